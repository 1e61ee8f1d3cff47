use std::process::exit;

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    exit(objtx::cli::run_cli(&argv));
}
