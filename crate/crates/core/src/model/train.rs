//! Training loop: AdamW, one-cycle schedule, deterministic batches,
//! resume-exact checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::net::{backward, forward, loss_and_grad, lower_sample, ModelInput};
use super::{AdamW, Checkpoint, Layout, ModelConfig, OneCycle};
use crate::infill::MaskedSample;
use crate::seeding::derive_rng;
use crate::tokens::{to_text, TokenSequence, VocabError};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub peak_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            peak_lr: 5e-4,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.1,
            checkpoint_every: 500,
            log_every: 10,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; offending batch dumped to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] super::CheckpointError),
}

pub struct Trainer {
    pub model: ModelConfig,
    pub layout: Layout,
    pub params: Vec<f32>,
    pub opt: AdamW<f32>,
    pub schedule: OneCycle,
    pub step: u64,
    dropout_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModelConfig, train: &TrainConfig) -> Trainer {
        let layout = Layout::new(&model);
        let params = super::init_params(&model, &layout);
        let opt =
            AdamW::new(layout.total, train.beta1, train.beta2, train.eps, train.weight_decay);
        let schedule =
            OneCycle { peak: train.peak_lr, warmup: train.warmup, total: train.steps, start: 0 };
        let dropout_rng = derive_rng(model.seed, "dropout", 0);
        Trainer { model, layout, params, opt, schedule, step: 0, dropout_rng }
    }

    pub fn from_checkpoint(ck: Checkpoint, train: &TrainConfig) -> Trainer {
        let layout = Layout::new(&ck.config);
        let mut opt =
            AdamW::new(layout.total, train.beta1, train.beta2, train.eps, train.weight_decay);
        opt.step = ck.adam_step;
        opt.m = ck.adam_m;
        opt.v = ck.adam_v;
        let mut dropout_rng = ChaCha8Rng::from_seed(ck.rng_seed);
        dropout_rng.set_word_pos(ck.rng_word_pos);
        Trainer {
            model: ck.config,
            layout,
            params: ck.params,
            opt,
            schedule: ck.schedule,
            step: ck.step,
            dropout_rng,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            step: self.step,
            adam_step: self.opt.step,
            rng_seed: self.dropout_rng.get_seed(),
            rng_word_pos: self.dropout_rng.get_word_pos(),
            schedule: self.schedule,
            params: self.params.clone(),
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        }
    }

    /// Mean loss over the batch, or the formatted batch dump when the
    /// loss goes non-finite.
    pub fn train_step(&mut self, batch: &[MaskedSample]) -> Result<f64, (f64, String)> {
        let inputs: Vec<ModelInput> = batch
            .iter()
            .map(|s| lower_sample(s, &self.model.vocab))
            .collect::<Result<_, _>>()
            .map_err(|e| (f64::NAN, format!("vocabulary error while lowering batch: {e}")))?;

        // Per-sample dropout streams derive from one step seed, so worker
        // scheduling cannot change the draws.
        let step_seed = {
            use rand::Rng;
            self.dropout_rng.random::<u64>()
        };
        let rate = self.model.dropout;
        let model = &self.model;
        let layout = &self.layout;
        let params = &self.params;

        let results: Vec<(f64, Vec<f32>)> = inputs
            .par_iter()
            .enumerate()
            .map(|(i, input)| {
                let mut rng = derive_rng(step_seed, "sample-dropout", i as u64);
                let dropout = (rate > 0.0).then_some((rate, &mut rng));
                let acts = forward(model, layout, params, input, dropout);
                let (loss, dlogits, _) = loss_and_grad(model, input, &acts.logits);
                let mut grads = vec![0f32; layout.total];
                backward(model, layout, params, input, &acts, &dlogits, &mut grads);
                (loss, grads)
            })
            .collect();

        // Fixed-order reduction keeps every run bit-identical.
        let inv_b = 1.0 / batch.len().max(1) as f32;
        let mut grads = vec![0f32; self.layout.total];
        let mut loss_sum = 0.0;
        for (loss, g) in &results {
            loss_sum += loss;
            for (acc, &v) in grads.iter_mut().zip(g) {
                *acc += v * inv_b;
            }
        }
        let loss = loss_sum / batch.len().max(1) as f64;
        if !loss.is_finite() {
            return Err((loss, dump_batch(batch)));
        }

        let lr = self.schedule.lr(self.step);
        self.opt.update(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Run until `target_step`, pulling each batch from `provider` by
    /// step index. Appends `step lr loss` lines to the log and writes
    /// periodic checkpoints (`checkpoint_<step>.ckpt`) plus a final one.
    pub fn run(
        &mut self,
        target_step: u64,
        mut provider: impl FnMut(u64) -> Vec<MaskedSample>,
        train: &TrainConfig,
        out_dir: &Path,
    ) -> Result<f64, TrainError> {
        fs::create_dir_all(out_dir)
            .map_err(|source| TrainError::Io { path: out_dir.to_path_buf(), source })?;
        let log_path = out_dir.join("train.log");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|source| TrainError::Io { path: log_path.clone(), source })?;

        let mut last_loss = f64::NAN;
        while self.step < target_step {
            let step = self.step;
            let batch = provider(step);
            let lr = self.schedule.lr(step);
            match self.train_step(&batch) {
                Ok(loss) => {
                    last_loss = loss;
                    if train.log_every > 0 && step.is_multiple_of(train.log_every) {
                        writeln!(log, "{step} {lr} {loss}")
                            .map_err(|source| TrainError::Io { path: log_path.clone(), source })?;
                    }
                }
                Err((loss, dump)) => {
                    let dump_path = out_dir.join(format!("diagnostic_step_{step}.txt"));
                    let body = format!("step {step}\nloss {loss}\n\n{dump}");
                    fs::write(&dump_path, body)
                        .map_err(|source| TrainError::Io { path: dump_path.clone(), source })?;
                    return Err(TrainError::NonFiniteLoss { step, dump: dump_path });
                }
            }
            if train.checkpoint_every > 0 && self.step.is_multiple_of(train.checkpoint_every) {
                let path = out_dir.join(format!("checkpoint_{}.ckpt", self.step));
                super::save_checkpoint(&self.checkpoint(), &path)?;
            }
        }
        let final_path = out_dir.join("checkpoint_final.ckpt");
        super::save_checkpoint(&self.checkpoint(), &final_path)?;
        Ok(last_loss)
    }
}

fn dump_batch(batch: &[MaskedSample]) -> String {
    let mut out = String::new();
    for (i, s) in batch.iter().enumerate() {
        out.push_str(&format!(
            "== sample {i} objective {:?} fallback_spans {}\n-- prefix\n{}-- segments\n",
            s.objective,
            s.fallback_spans,
            to_text(&TokenSequence(s.prefix.clone()))
        ));
        for seg in &s.segments {
            out.push_str(&format!(
                "span start {} len {} mask_pos {:?}\n{}",
                seg.span.start,
                seg.span.length,
                seg.mask_pos,
                to_text(&TokenSequence(seg.tokens.clone()))
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MelodySequence, NoteEvent};
    use crate::infill::{make_training_batch, BatchMode, InfillConfig, Objective};
    use crate::tokens::encode;

    fn fixture_pieces(n: usize) -> Vec<TokenSequence> {
        (0..n)
            .map(|p| {
                let notes: Vec<NoteEvent> = (0..24)
                    .map(|i| NoteEvent {
                        pitch: 55 + ((i + 3 * p) % 12) as u8,
                        onset: i as u64 * 240,
                        duration: 240,
                    })
                    .collect();
                encode(&MelodySequence { tempo_bpm: 100.0, notes }).unwrap()
            })
            .collect()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout: 0.1,
            embed_widths: [4, 4, 4, 4, 4],
            seed: 5,
            ..ModelConfig::desk()
        }
    }

    fn provider(pieces: Vec<TokenSequence>) -> impl FnMut(u64) -> Vec<MaskedSample> {
        move |step| {
            let mut rng = derive_rng(17, "batch", step);
            make_training_batch(
                &pieces,
                BatchMode::Single(Objective::LongSpan),
                None,
                &InfillConfig::default(),
                &mut rng,
            )
        }
    }

    #[test]
    fn resume_is_bit_identical() {
        let pieces = fixture_pieces(4);
        let cfg = TrainConfig {
            steps: 6,
            warmup: 2,
            checkpoint_every: 3,
            log_every: 1,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();

        let mut a = Trainer::new(tiny_model(), &cfg);
        a.run(6, provider(pieces.clone()), &cfg, dir.path()).unwrap();

        // Resume from the step-3 checkpoint and replay.
        let ck = super::super::load_checkpoint(&dir.path().join("checkpoint_3.ckpt")).unwrap();
        let mut b = Trainer::from_checkpoint(ck, &cfg);
        assert_eq!(b.step, 3);
        let mut p = provider(pieces);
        for step in 3..6 {
            let batch = p(step);
            let loss_b = b.train_step(&batch).unwrap();
            let _ = loss_b;
        }
        assert_eq!(a.params, b.params, "diverged after resume");
        assert_eq!(a.opt.m, b.opt.m);
    }

    #[test]
    fn lr_schedule_endpoints_in_log() {
        let s = OneCycle { peak: 1e-3, warmup: 4, total: 8, start: 0 };
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(4), 1e-3);
    }

    #[test]
    fn non_finite_loss_dumps_batch() {
        let pieces = fixture_pieces(2);
        let cfg = TrainConfig { steps: 2, warmup: 1, ..TrainConfig::default() };
        let mut t = Trainer::new(tiny_model(), &cfg);
        // Poison the parameters so the forward pass overflows f32.
        for p in t.params.iter_mut() {
            *p = 1e30;
        }
        let dir = tempfile::tempdir().unwrap();
        let err = t.run(1, provider(pieces), &cfg, dir.path()).unwrap_err();
        match err {
            TrainError::NonFiniteLoss { step, dump } => {
                assert_eq!(step, 0);
                assert!(dump.exists());
                let body = fs::read_to_string(dump).unwrap();
                assert!(body.contains("sample 0"));
            }
            other => panic!("expected non-finite loss, got {other}"),
        }
    }
}
