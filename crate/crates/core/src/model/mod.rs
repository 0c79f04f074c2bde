//! Compact unified encoder-decoder transformer over compound tokens.
//!
//! All parameters live in one flat buffer described by a [`Layout`],
//! which keeps the optimizer, checkpoint format and finite-difference
//! checking trivial. The forward/backward passes are written directly
//! over `ndarray` with an explicit activation tape.

mod checkpoint;
mod gradcheck;
mod net;
mod optim;
mod train;

pub use checkpoint::{
    checkpoint_hash, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError,
};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use net::{
    attr_offsets, backward, embed, forward, forward_loss, loss_and_grad, lower_sample,
    run_forward, Activations, ForwardOutput, ModelInput,
};
pub use optim::{AdamW, OneCycle};
pub use train::{TrainConfig, TrainError, Trainer};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seeding::derive_rng;
use crate::tokens::{Attribute, Vocab};

/// Floating point scalar for model math: f32 for training, f64 for
/// numerical verification.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Embedding width per token attribute (concatenated, then fused).
    pub embed_widths: [usize; 5],
    pub vocab: Vocab,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            dropout: 0.1,
            embed_widths: [128, 128, 256, 512, 256],
            vocab: Vocab::default(),
            max_seq: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU experiments.
    pub fn desk() -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            d_model: 64,
            d_ff: 256,
            dropout: 0.1,
            embed_widths: [16, 16, 32, 64, 32],
            ..ModelConfig::default()
        }
    }

    /// Full-size configuration (~52M parameters).
    pub fn paper() -> Self {
        ModelConfig { layers: 16, ..ModelConfig::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.layers == 0 || self.d_ff == 0 || self.embed_widths.contains(&0) {
            return Err("all sizes must be at least 1".into());
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        self.embed_widths.iter().sum()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Shape and offset of one named tensor in the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Indices into [`Layout::specs`] for one transformer layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Full parameter layout derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Layout {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    pub embed: [usize; 5],
    pub fusion_w: usize,
    pub fusion_b: usize,
    pub bar_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerIds>,
    pub final_ln_g: usize,
    pub final_ln_b: usize,
    pub out_w: usize,
    pub out_b: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut specs = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize| -> usize {
            specs.push(TensorSpec { name, rows, cols, offset });
            offset += rows * cols;
            specs.len() - 1
        };

        let d = cfg.d_model;
        let embed = [
            push("embed.tempo".into(), cfg.vocab.size(Attribute::Tempo), cfg.embed_widths[0]),
            push("embed.bar".into(), cfg.vocab.size(Attribute::Bar), cfg.embed_widths[1]),
            push("embed.position".into(), cfg.vocab.size(Attribute::Position), cfg.embed_widths[2]),
            push("embed.pitch".into(), cfg.vocab.size(Attribute::Pitch), cfg.embed_widths[3]),
            push("embed.duration".into(), cfg.vocab.size(Attribute::Duration), cfg.embed_widths[4]),
        ];
        let fusion_w = push("fusion.w".into(), cfg.concat_width(), d);
        let fusion_b = push("fusion.b".into(), 1, d);
        let bar_emb = push("pos.bar".into(), cfg.vocab.size(Attribute::Bar), d);
        let pos_emb = push("pos.position".into(), cfg.vocab.size(Attribute::Position), d);

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_g: push(p("ln1.g"), 1, d),
                ln1_b: push(p("ln1.b"), 1, d),
                wq: push(p("attn.wq"), d, d),
                bq: push(p("attn.bq"), 1, d),
                wk: push(p("attn.wk"), d, d),
                bk: push(p("attn.bk"), 1, d),
                wv: push(p("attn.wv"), d, d),
                bv: push(p("attn.bv"), 1, d),
                wo: push(p("attn.wo"), d, d),
                bo: push(p("attn.bo"), 1, d),
                ln2_g: push(p("ln2.g"), 1, d),
                ln2_b: push(p("ln2.b"), 1, d),
                w1: push(p("ffn.w1"), d, cfg.d_ff),
                b1: push(p("ffn.b1"), 1, cfg.d_ff),
                w2: push(p("ffn.w2"), cfg.d_ff, d),
                b2: push(p("ffn.b2"), 1, d),
            });
        }
        let final_ln_g = push("final_ln.g".into(), 1, d);
        let final_ln_b = push("final_ln.b".into(), 1, d);
        let out_w = push("out.w".into(), d, cfg.vocab.total());
        let out_b = push("out.b".into(), 1, cfg.vocab.total());

        Layout {
            total: offset,
            specs,
            embed,
            fusion_w,
            fusion_b,
            bar_emb,
            pos_emb,
            layers,
            final_ln_g,
            final_ln_b,
            out_w,
            out_b,
        }
    }

    pub fn view<'a, F: Scalar>(&self, buf: &'a [F], id: usize) -> ndarray::ArrayView2<'a, F> {
        let s = &self.specs[id];
        ndarray::ArrayView2::from_shape((s.rows, s.cols), &buf[s.offset..s.offset + s.len()])
            .expect("layout shape")
    }

    pub fn slice<'a, F: Scalar>(&self, buf: &'a [F], id: usize) -> &'a [F] {
        let s = &self.specs[id];
        &buf[s.offset..s.offset + s.len()]
    }

    pub fn slice_mut<'a, F: Scalar>(&self, buf: &'a mut [F], id: usize) -> &'a mut [F] {
        let s = &self.specs[id];
        &mut buf[s.offset..s.offset + s.len()]
    }
}

/// Initialize parameters: scaled normal (std 0.02) for matrices and
/// embeddings, ones for layer-norm gains, zeros for biases.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, layout: &Layout) -> Vec<F> {
    let mut rng: ChaCha8Rng = derive_rng(cfg.seed, "init", 0);
    let mut buf = vec![F::zero(); layout.total];
    for (id, spec) in layout.specs.iter().enumerate() {
        let data = layout.slice_mut(&mut buf, id);
        if spec.name.ends_with(".g") {
            data.fill(F::one());
        } else if spec.name.ends_with(".b") && spec.rows == 1 {
            // biases and layer-norm shifts start at zero
        } else {
            for v in data.iter_mut() {
                *v = F::from_f64(normal(&mut rng) * 0.02);
            }
        }
    }
    buf
}

/// Standard normal draw (Box-Muller).
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous_and_named() {
        let cfg = ModelConfig::desk();
        let layout = Layout::new(&cfg);
        let mut expected = 0;
        for s in &layout.specs {
            assert_eq!(s.offset, expected);
            expected += s.len();
            assert!(!s.name.is_empty());
        }
        assert_eq!(layout.total, expected);
    }

    #[test]
    fn paper_preset_parameter_count_near_53m() {
        let cfg = ModelConfig::paper();
        cfg.validate().unwrap();
        let layout = Layout::new(&cfg);
        let count = layout.total as f64;
        assert!(
            (count - 53e6).abs() / 53e6 < 0.10,
            "parameter count {count} outside 10% of 53M"
        );
    }

    #[test]
    fn desk_preset_is_expressible_and_small() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        let layout = Layout::new(&cfg);
        assert!(layout.total < 1_000_000, "desk preset has {} params", layout.total);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::desk();
        let layout = Layout::new(&cfg);
        let a: Vec<f32> = init_params(&cfg, &layout);
        let b: Vec<f32> = init_params(&cfg, &layout);
        assert_eq!(a, b);
        let gains = layout.slice(&a, layout.layers[0].ln1_g);
        assert!(gains.iter().all(|&g| g == 1.0));
    }
}
