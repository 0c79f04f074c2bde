//! Finite-difference verification of the analytic gradients.

use rayon::prelude::*;

use super::net::{backward, forward, forward_loss, loss_and_grad, lower_sample};
use super::{init_params, Layout, ModelConfig};
use crate::infill::MaskedSample;
use crate::tokens::VocabError;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter group, sorted descending.
    pub per_group: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn failures(&self, threshold: f64) -> Vec<&(String, f64)> {
        self.per_group.iter().filter(|(_, e)| *e > threshold).collect()
    }
}

/// Compare analytic gradients of the loss against central finite
/// differences (step `h`) for every element of every parameter group.
/// Meant for small double-precision configurations (d_model <= 16).
pub fn gradient_check(
    cfg: &ModelConfig,
    sample: &MaskedSample,
    h: f64,
) -> Result<GradCheckReport, VocabError> {
    let layout = Layout::new(cfg);
    let params: Vec<f64> = init_params(cfg, &layout);
    let input = lower_sample(sample, &cfg.vocab)?;

    let acts = forward(cfg, &layout, &params, &input, None);
    let (_, dlogits, _) = loss_and_grad(cfg, &input, &acts.logits);
    let mut analytic = vec![0f64; layout.total];
    backward(cfg, &layout, &params, &input, &acts, &dlogits, &mut analytic);

    let mut per_group: Vec<(String, f64)> = layout
        .specs
        .par_iter()
        .map(|spec| {
            let mut local = params.clone();
            let mut worst = 0f64;
            for i in spec.offset..spec.offset + spec.len() {
                let original = local[i];
                local[i] = original + h;
                let up = forward_loss(cfg, &layout, &local, &input);
                local[i] = original - h;
                let down = forward_loss(cfg, &layout, &local, &input);
                local[i] = original;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[i];
                // The 1e-4 floor acts as an absolute tolerance of 1e-8 at
                // the 1e-4 threshold: central differences at this h carry
                // ~1e-10 of cancellation noise, which would otherwise
                // swamp the relative error of near-zero gradients.
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                worst = worst.max(rel);
            }
            (spec.name.clone(), worst)
        })
        .collect();
    per_group.sort_by(|x, y| y.1.total_cmp(&x.1));
    let max_rel_err = per_group.first().map(|(_, e)| *e).unwrap_or(0.0);
    Ok(GradCheckReport { per_group, max_rel_err })
}
