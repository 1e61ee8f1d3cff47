//! Parameter construction, initialization, and naming.
//!
//! Registration order is fixed and defines checkpoint layout. Weight
//! matrices decay; biases, layer-norm scales/shifts, and embedding tables
//! do not.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::numerics::registry::{ParamId, ParamRegistry};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;
use crate::rng::{truncated_normal, SubRng};

/// Init std for all weight-like tensors (truncated at two sigma).
pub const INIT_STD: f64 = 0.02;

/// Slot tables start larger than ordinary weights. Slots are discrete
/// coordinates, not content: with tokens carrying strong identity and shot
/// coordinates from step 0, attention can condition on "same shot" or "same
/// instance" immediately instead of having to bootstrap that structure
/// through near-zero query/key products.
pub const SLOT_INIT_STD: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub w_q: ParamId,
    pub b_q: ParamId,
    pub w_k: ParamId,
    pub b_k: ParamId,
    pub w_v: ParamId,
    pub b_v: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub w_ff1: ParamId,
    pub b_ff1: ParamId,
    pub w_ff2: ParamId,
    pub b_ff2: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct EmbedIds {
    pub w_feat: ParamId,
    pub w_spatial: ParamId,
    pub w_pos: ParamId,
    pub bias: ParamId,
    pub instance_table: ParamId,
    pub shot_table: ParamId,
    pub cls: ParamId,
    /// Learned replacement feature used by masked-instance corruption.
    pub z_mask: ParamId,
}

#[derive(Clone, Debug)]
pub struct HeadIds {
    pub mask_w1: ParamId,
    pub mask_b1: ParamId,
    pub mask_w2: ParamId,
    pub mask_b2: ParamId,
    pub compat_w: ParamId,
    pub compat_b: ParamId,
    pub fusion_w: ParamId,
    pub fusion_b: ParamId,
}

/// Classification/regression head added at fine-tune time.
#[derive(Clone, Debug)]
pub struct TaskHeadIds {
    pub w: ParamId,
    pub b: ParamId,
    pub n_out: usize,
}

/// A model: config, parameter registry, and the id map into it.
#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub registry: ParamRegistry<S>,
    pub embed: EmbedIds,
    pub layers: Vec<LayerIds>,
    pub heads: HeadIds,
    pub task_head: Option<TaskHeadIds>,
}

fn init_matrix<S: Scalar>(shape: &[usize], rng: &mut SubRng) -> Result<Tensor<S>> {
    init_matrix_std(shape, INIT_STD, rng)
}

fn init_matrix_std<S: Scalar>(shape: &[usize], std: f64, rng: &mut SubRng) -> Result<Tensor<S>> {
    let numel: usize = shape.iter().product();
    let data: Vec<S> = (0..numel)
        .map(|_| S::from_f64(truncated_normal(rng, std, 2.0)))
        .collect();
    Tensor::from_vec(shape, data)
}

impl<S: Scalar> ModelParams<S> {
    /// Fresh model with truncated-normal weights drawn from `rng` in
    /// registration order, zero biases, unit layer-norm scales. Slot tables
    /// use `SLOT_INIT_STD`, everything else `INIT_STD`.
    pub fn new(config: &ModelConfig, rng: &mut SubRng) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let h = config.hidden;

        let embed = EmbedIds {
            w_feat: reg.register("embed.w_feat", init_matrix(&[config.d_z, h], rng)?, true)?,
            w_spatial: reg.register("embed.w_spatial", init_matrix(&[4, h], rng)?, true)?,
            w_pos: reg.register("embed.w_pos", init_matrix(&[3, h], rng)?, true)?,
            bias: reg.register("embed.bias", Tensor::zeros(&[h])?, false)?,
            instance_table: reg.register(
                "embed.instance_table",
                init_matrix_std(&[config.instance_slots, h], SLOT_INIT_STD, rng)?,
                false,
            )?,
            shot_table: reg.register(
                "embed.shot_table",
                init_matrix_std(&[config.shot_slots, h], SLOT_INIT_STD, rng)?,
                false,
            )?,
            cls: reg.register("embed.cls", init_matrix(&[1, h], rng)?, false)?,
            z_mask: reg.register("embed.z_mask", init_matrix(&[1, config.d_z], rng)?, false)?,
        };

        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("enc{l}.{s}");
            layers.push(LayerIds {
                w_q: reg.register(&p("attn.w_q"), init_matrix(&[h, h], rng)?, true)?,
                b_q: reg.register(&p("attn.b_q"), Tensor::zeros(&[h])?, false)?,
                w_k: reg.register(&p("attn.w_k"), init_matrix(&[h, h], rng)?, true)?,
                b_k: reg.register(&p("attn.b_k"), Tensor::zeros(&[h])?, false)?,
                w_v: reg.register(&p("attn.w_v"), init_matrix(&[h, h], rng)?, true)?,
                b_v: reg.register(&p("attn.b_v"), Tensor::zeros(&[h])?, false)?,
                w_out: reg.register(&p("attn.w_out"), init_matrix(&[h, h], rng)?, true)?,
                b_out: reg.register(&p("attn.b_out"), Tensor::zeros(&[h])?, false)?,
                ln1_gamma: reg.register(&p("ln1.gamma"), Tensor::filled(&[h], S::ONE)?, false)?,
                ln1_beta: reg.register(&p("ln1.beta"), Tensor::zeros(&[h])?, false)?,
                w_ff1: reg.register(&p("ffn.w1"), init_matrix(&[h, config.ffn_dim], rng)?, true)?,
                b_ff1: reg.register(&p("ffn.b1"), Tensor::zeros(&[config.ffn_dim])?, false)?,
                w_ff2: reg.register(&p("ffn.w2"), init_matrix(&[config.ffn_dim, h], rng)?, true)?,
                b_ff2: reg.register(&p("ffn.b2"), Tensor::zeros(&[h])?, false)?,
                ln2_gamma: reg.register(&p("ln2.gamma"), Tensor::filled(&[h], S::ONE)?, false)?,
                ln2_beta: reg.register(&p("ln2.beta"), Tensor::zeros(&[h])?, false)?,
            });
        }

        let heads = HeadIds {
            mask_w1: reg.register("head.mask.w1", init_matrix(&[h, h], rng)?, true)?,
            mask_b1: reg.register("head.mask.b1", Tensor::zeros(&[h])?, false)?,
            mask_w2: reg.register("head.mask.w2", init_matrix(&[h, config.d_label], rng)?, true)?,
            mask_b2: reg.register("head.mask.b2", Tensor::zeros(&[config.d_label])?, false)?,
            compat_w: reg.register("head.compat.w", init_matrix(&[h, h], rng)?, true)?,
            compat_b: reg.register("head.compat.b", Tensor::zeros(&[h])?, false)?,
            fusion_w: reg.register(
                "head.fusion.w",
                init_matrix(&[h + config.d_label, config.d_label], rng)?,
                true,
            )?,
            fusion_b: reg.register("head.fusion.b", Tensor::zeros(&[config.d_label])?, false)?,
        };

        Ok(ModelParams {
            config: config.clone(),
            registry: reg,
            embed,
            layers,
            heads,
            task_head: None,
        })
    }

    /// Append a fine-tuning head with `n_out` outputs. At most one task
    /// head exists at a time.
    pub fn add_task_head(&mut self, n_out: usize, rng: &mut SubRng) -> Result<()> {
        if self.task_head.is_some() {
            return Err(Error::Usage("model already has a task head".into()));
        }
        if n_out == 0 {
            return Err(Error::Config("task head needs at least one output".into()));
        }
        let w = self.registry.register(
            "head.task.w",
            init_matrix(&[self.config.hidden, n_out], rng)?,
            true,
        )?;
        let b = self
            .registry
            .register("head.task.b", Tensor::zeros(&[n_out])?, false)?;
        self.task_head = Some(TaskHeadIds { w, b, n_out });
        Ok(())
    }

    /// Trainable mask that is true only for the named parameters.
    pub fn only_trainable(&self, names: &[&str]) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.registry.len()];
        for name in names {
            let id = self
                .registry
                .find(name)
                .ok_or_else(|| Error::Usage(format!("no parameter named {name:?}")))?;
            mask[id.0] = true;
        }
        Ok(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            head_dim: 4,
            ffn_dim: 16,
            dropout: 0.1,
            d_z: 5,
            d_label: 3,
            instance_slots: 6,
            shot_slots: 4,
            token_cap: 32,
        }
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let cfg = tiny();
        let a = ModelParams::<f64>::new(&cfg, &mut substream(3, "init")).unwrap();
        let b = ModelParams::<f64>::new(&cfg, &mut substream(3, "init")).unwrap();
        let c = ModelParams::<f64>::new(&cfg, &mut substream(4, "init")).unwrap();
        for (id, e) in a.registry.iter() {
            assert_eq!(e.value, b.registry.value(id).clone(), "{}", e.name);
        }
        let differs = a
            .registry
            .iter()
            .any(|(id, e)| e.value != *c.registry.value(id));
        assert!(differs);
    }

    #[test]
    fn init_statistics_and_decay_flags() {
        let cfg = tiny();
        let m = ModelParams::<f64>::new(&cfg, &mut substream(7, "init")).unwrap();
        for (_, e) in m.registry.iter() {
            let is_bias = e.name.contains(".b_")
                || e.name.ends_with(".bias")
                || e.name.ends_with(".b1")
                || e.name.ends_with(".b2")
                || e.name.ends_with("compat.b")
                || e.name.ends_with("fusion.b");
            let is_ln = e.name.contains("ln1.") || e.name.contains("ln2.");
            let is_table = e.name.contains("_table")
                || e.name.ends_with(".cls")
                || e.name.ends_with(".z_mask");
            if is_bias {
                assert!(e.value.data().iter().all(|&v| v == 0.0), "{}", e.name);
                assert!(!e.decay, "{}", e.name);
            } else if is_ln {
                assert!(!e.decay, "{}", e.name);
                if e.name.ends_with("gamma") {
                    assert!(e.value.data().iter().all(|&v| v == 1.0), "{}", e.name);
                } else {
                    assert!(e.value.data().iter().all(|&v| v == 0.0), "{}", e.name);
                }
            } else if is_table {
                assert!(!e.decay, "{}", e.name);
                let bound = if e.name.contains("_table") {
                    SLOT_INIT_STD
                } else {
                    INIT_STD
                };
                assert!(
                    e.value.data().iter().all(|&v| v.abs() <= 2.0 * bound + 1e-12),
                    "{}",
                    e.name
                );
                assert!(e.value.data().iter().any(|&v| v != 0.0), "{}", e.name);
            } else {
                assert!(e.decay, "weight {} should decay", e.name);
                // truncated normal: bounded by 2 sigma, not all zero
                assert!(e
                    .value
                    .data()
                    .iter()
                    .all(|&v| v.abs() <= 2.0 * INIT_STD + 1e-12));
                assert!(e.value.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn task_head_appends_without_disturbing_existing_ids() {
        let cfg = tiny();
        let mut m = ModelParams::<f64>::new(&cfg, &mut substream(7, "init")).unwrap();
        let before = m.registry.len();
        let cls_value = m.registry.value(m.embed.cls).clone();
        m.add_task_head(4, &mut substream(7, "task_init")).unwrap();
        assert_eq!(m.registry.len(), before + 2);
        assert_eq!(*m.registry.value(m.embed.cls), cls_value);
        let th = m.task_head.as_ref().unwrap();
        assert_eq!(m.registry.value(th.w).shape(), &[8, 4]);
        assert!(m.add_task_head(4, &mut substream(7, "task_init")).is_err());
    }

    #[test]
    fn only_trainable_selects_by_name() {
        let cfg = tiny();
        let mut m = ModelParams::<f64>::new(&cfg, &mut substream(1, "init")).unwrap();
        m.add_task_head(2, &mut substream(1, "task_init")).unwrap();
        let mask = m.only_trainable(&["head.fusion.w", "head.fusion.b"]).unwrap();
        let on: Vec<_> = m
            .registry
            .iter()
            .filter(|(id, _)| mask[id.0])
            .map(|(_, e)| e.name.clone())
            .collect();
        assert_eq!(on, vec!["head.fusion.w", "head.fusion.b"]);
        assert!(m.only_trainable(&["nope"]).is_err());
    }
}
