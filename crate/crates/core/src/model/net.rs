//! Forward and backward passes over the flat parameter buffer.
//!
//! Pre-norm transformer blocks with GeLU feed-forward layers. The
//! attention mask blocks (i, j) pairs outside the prefix/suffix scheme;
//! blocked weights are exactly zero. Dropout (when enabled) applies to
//! attention weights and to both residual branches.

use log::warn;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Layout, ModelConfig, Scalar};
use crate::infill::{attention_mask, AttentionSpec, MaskedSample};
use crate::tokens::{Vocab, VocabError};

/// Numeric view of one sample: head ids per token, positional embedding
/// rows, the attention layout and per-suffix-position target ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<[usize; 5]>,
    pub coords: Vec<(usize, usize)>,
    pub prefix_len: usize,
    pub seg_lens: Vec<usize>,
    pub targets: Vec<[usize; 5]>,
}

impl ModelInput {
    pub fn total_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn suffix_len(&self) -> usize {
        self.targets.len()
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            prefix_len: self.prefix_len,
            suffix_segment_lens: self.seg_lens.clone(),
        }
    }
}

/// Map a masked sample to model ids. Fails on out-of-vocabulary symbols,
/// naming the attribute and token index.
pub fn lower_sample(sample: &MaskedSample, vocab: &Vocab) -> Result<ModelInput, VocabError> {
    let mut tokens = Vec::new();
    let mut coords = Vec::new();
    for (i, tok) in sample.prefix.iter().enumerate() {
        tokens.push(vocab.token_ids(tok, i)?);
        coords.push(vocab.coord_ids(sample.prefix_coords[i], i)?);
    }
    let base = tokens.len();
    for (i, (tok, coord)) in sample.suffix_inputs().into_iter().enumerate() {
        tokens.push(vocab.token_ids(&tok, base + i)?);
        coords.push(vocab.coord_ids(coord, base + i)?);
    }
    let targets = sample
        .targets()
        .iter()
        .enumerate()
        .map(|(i, t)| vocab.token_ids(t, base + i))
        .collect::<Result<Vec<_>, _>>()?;
    let spec = sample.attention_spec();
    Ok(ModelInput {
        tokens,
        coords,
        prefix_len: spec.prefix_len,
        seg_lens: spec.suffix_segment_lens,
        targets,
    })
}

/// Start offset of each attribute's block in the concatenated logits.
pub fn attr_offsets(vocab: &Vocab) -> [usize; 5] {
    let sizes = vocab.sizes();
    let mut off = [0; 5];
    for k in 1..5 {
        off[k] = off[k - 1] + sizes[k - 1];
    }
    off
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

const LN_EPS: f64 = 1e-5;

struct LayerNormTape<F> {
    norm: Array2<F>,
    rstd: Vec<F>,
}

fn layer_norm<F: Scalar>(x: &Array2<F>, g: &[F], b: &[F]) -> (Array2<F>, LayerNormTape<F>) {
    let (t, d) = x.dim();
    let mut norm = Array2::zeros((t, d));
    let mut out = Array2::zeros((t, d));
    let mut rstd = Vec::with_capacity(t);
    for i in 0..t {
        let row = x.row(i);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(F::from_f64(r));
        for j in 0..d {
            let n = F::from_f64((row[j].as_f64() - mean) * r);
            norm[(i, j)] = n;
            out[(i, j)] = n * g[j] + b[j];
        }
    }
    (out, LayerNormTape { norm, rstd })
}

/// Backward through layer norm; accumulates into `dg`/`db`, returns dx.
fn layer_norm_backward<F: Scalar>(
    dout: &Array2<F>,
    tape: &LayerNormTape<F>,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
) -> Array2<F> {
    let (t, d) = dout.dim();
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_dnorm = F::zero();
        let mut mean_dnorm_norm = F::zero();
        for j in 0..d {
            let dn = dout[(i, j)] * g[j];
            mean_dnorm += dn;
            mean_dnorm_norm += dn * tape.norm[(i, j)];
            dg[j] += dout[(i, j)] * tape.norm[(i, j)];
            db[j] += dout[(i, j)];
        }
        let inv_d = F::from_f64(1.0 / d as f64);
        mean_dnorm *= inv_d;
        mean_dnorm_norm *= inv_d;
        for j in 0..d {
            let dn = dout[(i, j)] * g[j];
            dx[(i, j)] = tape.rstd[i] * (dn - mean_dnorm - tape.norm[(i, j)] * mean_dnorm_norm);
        }
    }
    dx
}

/// `out = x . w + b` with b broadcast over rows.
fn linear<F: Scalar>(x: &Array2<F>, w: ArrayView2<F>, b: &[F]) -> Array2<F> {
    let mut out = x.dot(&w);
    for mut row in out.rows_mut() {
        for (o, &bb) in row.iter_mut().zip(b) {
            *o += bb;
        }
    }
    out
}

/// Backward of [`linear`]: accumulates dw/db, returns dx.
fn linear_backward<F: Scalar>(
    x: &Array2<F>,
    w: ArrayView2<F>,
    dout: &Array2<F>,
    mut dw: ArrayViewMut2<F>,
    db: &mut [F],
) -> Array2<F> {
    dw += &x.t().dot(dout);
    for row in dout.rows() {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    dout.dot(&w.t())
}

struct DropoutMask<F> {
    mask: Array2<F>,
}

fn make_dropout<F: Scalar>(
    shape: (usize, usize),
    dropout: &mut Option<(f64, &mut ChaCha8Rng)>,
) -> Option<DropoutMask<F>> {
    match dropout {
        Some((rate, rng)) if *rate > 0.0 => {
            let keep = 1.0 - *rate;
            let scale = 1.0 / keep;
            let mask = Array2::from_shape_fn(shape, |_| {
                if rng.random::<f64>() < keep {
                    F::from_f64(scale)
                } else {
                    F::zero()
                }
            });
            Some(DropoutMask { mask })
        }
        _ => None,
    }
}

fn apply_dropout<F: Scalar>(x: &mut Array2<F>, mask: &Option<DropoutMask<F>>) {
    if let Some(m) = mask {
        *x *= &m.mask;
    }
}

struct LayerTape<F> {
    ln1: LayerNormTape<F>,
    ln1_out: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    /// Post-softmax weights per head (before dropout).
    attn_w: Vec<Array2<F>>,
    attn_drop: Vec<Option<DropoutMask<F>>>,
    ctx: Array2<F>,
    resid1_drop: Option<DropoutMask<F>>,
    ln2: LayerNormTape<F>,
    ln2_out: Array2<F>,
    a1: Array2<F>,
    gelu_out: Array2<F>,
    resid2_drop: Option<DropoutMask<F>>,
}

/// Full activation tape of one forward pass.
pub struct Activations<F> {
    concat: Array2<F>,
    layers: Vec<LayerTape<F>>,
    final_ln: LayerNormTape<F>,
    final_out: Array2<F>,
    pub logits: Array2<F>,
    pub attn_weights: Vec<Vec<Array2<F>>>,
}

/// Inference view: per-position logits (split per attribute via
/// [`attr_offsets`]) and optional attention maps.
pub struct ForwardOutput<F> {
    pub logits: Array2<F>,
    pub attention: Option<Vec<Vec<Array2<F>>>>,
}

/// Embed tokens: K lookups concatenated, fused to `d_model`, plus bar
/// and position embeddings.
pub fn embed<F: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[F],
    input: &ModelInput,
) -> (Array2<F>, Array2<F>) {
    let t = input.total_len();
    let cw = cfg.concat_width();
    let mut concat = Array2::zeros((t, cw));
    for (i, ids) in input.tokens.iter().enumerate() {
        let mut col = 0;
        for (k, &id) in ids.iter().enumerate() {
            let table = layout.view(params, layout.embed[k]);
            let w = cfg.embed_widths[k];
            for j in 0..w {
                concat[(i, col + j)] = table[(id, j)];
            }
            col += w;
        }
    }
    let fusion_w = layout.view(params, layout.fusion_w);
    let fusion_b = layout.slice(params, layout.fusion_b);
    let mut x0 = linear(&concat, fusion_w, fusion_b);
    let bar = layout.view(params, layout.bar_emb);
    let pos = layout.view(params, layout.pos_emb);
    for (i, &(b, p)) in input.coords.iter().enumerate() {
        for j in 0..cfg.d_model {
            x0[(i, j)] += bar[(b, j)] + pos[(p, j)];
        }
    }
    (concat, x0)
}

/// Row softmax over allowed columns; blocked columns are exactly zero.
fn masked_softmax<F: Scalar>(scores: &mut Array2<F>, mask: &Array2<bool>, rows: usize) {
    for i in 0..rows {
        let mut max = f64::NEG_INFINITY;
        for j in 0..rows {
            if mask[(i, j)] {
                max = max.max(scores[(i, j)].as_f64());
            }
        }
        let mut sum = 0.0;
        for j in 0..rows {
            if mask[(i, j)] {
                let e = (scores[(i, j)].as_f64() - max).exp();
                scores[(i, j)] = F::from_f64(e);
                sum += e;
            } else {
                scores[(i, j)] = F::zero();
            }
        }
        for j in 0..rows {
            if mask[(i, j)] {
                scores[(i, j)] = F::from_f64(scores[(i, j)].as_f64() / sum);
            }
        }
    }
}

/// Run the network, recording the activation tape.
pub fn forward<F: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[F],
    input: &ModelInput,
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Activations<F> {
    let t = input.total_len();
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dk = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());
    let mask = attention_mask(&input.attention_spec());

    let (concat, x0) = embed(cfg, layout, params, input);
    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.layers);

    for ids in &layout.layers {
        let (ln1_out, ln1) =
            layer_norm(&x, layout.slice(params, ids.ln1_g), layout.slice(params, ids.ln1_b));
        let q = linear(&ln1_out, layout.view(params, ids.wq), layout.slice(params, ids.bq));
        let k = linear(&ln1_out, layout.view(params, ids.wk), layout.slice(params, ids.bk));
        let v = linear(&ln1_out, layout.view(params, ids.wv), layout.slice(params, ids.bv));

        let mut ctx = Array2::zeros((t, d));
        let mut attn_w = Vec::with_capacity(heads);
        let mut attn_drop = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(ndarray::s![.., cols.clone()]);
            let kh = k.slice(ndarray::s![.., cols.clone()]);
            let vh = v.slice(ndarray::s![.., cols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            masked_softmax(&mut scores, &mask, t);
            let weights = scores;
            let drop = make_dropout::<F>((t, t), &mut dropout);
            let mut dropped = weights.clone();
            apply_dropout(&mut dropped, &drop);
            let ctx_h = dropped.dot(&vh);
            ctx.slice_mut(ndarray::s![.., cols]).assign(&ctx_h);
            attn_w.push(weights);
            attn_drop.push(drop);
        }
        let mut attn_out =
            linear(&ctx, layout.view(params, ids.wo), layout.slice(params, ids.bo));
        let resid1_drop = make_dropout::<F>((t, d), &mut dropout);
        apply_dropout(&mut attn_out, &resid1_drop);
        let x_mid = &x + &attn_out;

        let (ln2_out, ln2) =
            layer_norm(&x_mid, layout.slice(params, ids.ln2_g), layout.slice(params, ids.ln2_b));
        let a1 = linear(&ln2_out, layout.view(params, ids.w1), layout.slice(params, ids.b1));
        let gelu_out = a1.mapv(|v| F::from_f64(gelu(v.as_f64())));
        let mut ffn_out =
            linear(&gelu_out, layout.view(params, ids.w2), layout.slice(params, ids.b2));
        let resid2_drop = make_dropout::<F>((t, d), &mut dropout);
        apply_dropout(&mut ffn_out, &resid2_drop);
        x = &x_mid + &ffn_out;

        layers.push(LayerTape {
            ln1,
            ln1_out,
            q,
            k,
            v,
            attn_w,
            attn_drop,
            ctx,
            resid1_drop,
            ln2,
            ln2_out,
            a1,
            gelu_out,
            resid2_drop,
        });
    }

    let (final_out, final_ln) = layer_norm(
        &x,
        layout.slice(params, layout.final_ln_g),
        layout.slice(params, layout.final_ln_b),
    );
    let logits = linear(
        &final_out,
        layout.view(params, layout.out_w),
        layout.slice(params, layout.out_b),
    );

    let attn_weights = layers.iter().map(|l| l.attn_w.clone()).collect();
    Activations { concat, layers, final_ln, final_out, logits, attn_weights }
}

/// Mean over suffix positions of the summed per-attribute cross
/// entropies. Returns the loss, the logit gradient and the per-position
/// losses. An empty suffix yields loss 0 with a warning.
pub fn loss_and_grad<F: Scalar>(
    cfg: &ModelConfig,
    input: &ModelInput,
    logits: &Array2<F>,
) -> (f64, Array2<F>, Vec<f64>) {
    let t = input.total_len();
    let total_v = cfg.vocab.total();
    let mut dlogits = Array2::zeros((t, total_v));
    let s = input.suffix_len();
    if s == 0 {
        warn!("sample has no suffix targets; loss is 0");
        return (0.0, dlogits, Vec::new());
    }
    let offsets = attr_offsets(&cfg.vocab);
    let sizes = cfg.vocab.sizes();
    let inv_s = 1.0 / s as f64;
    let mut per_position = Vec::with_capacity(s);
    let mut total = 0.0;
    for (si, target) in input.targets.iter().enumerate() {
        let row = input.prefix_len + si;
        let mut position_loss = 0.0;
        for k in 0..5 {
            let off = offsets[k];
            let vk = sizes[k];
            let seg: Vec<f64> =
                (0..vk).map(|j| logits[(row, off + j)].as_f64()).collect();
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = seg.iter().map(|&v| (v - max).exp()).collect();
            let sum: f64 = exp.iter().sum();
            let tid = target[k];
            position_loss += -((exp[tid] / sum).ln());
            for j in 0..vk {
                let p = exp[j] / sum;
                let grad = if j == tid { p - 1.0 } else { p };
                dlogits[(row, off + j)] = F::from_f64(grad * inv_s);
            }
        }
        per_position.push(position_loss);
        total += position_loss;
    }
    (total * inv_s, dlogits, per_position)
}

/// Backpropagate through the tape, accumulating into `grads` (same
/// layout as `params`).
pub fn backward<F: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[F],
    input: &ModelInput,
    acts: &Activations<F>,
    dlogits: &Array2<F>,
    grads: &mut [F],
) {
    let t = input.total_len();
    let d = cfg.d_model;
    let heads = cfg.heads;
    let dk = cfg.head_dim();
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());

    // Output projection.
    let (head, tail) = grads.split_at_mut(layout.specs[layout.out_b].offset);
    let d_final_out = {
        let dw = ArrayViewMut2::from_shape(
            (layout.specs[layout.out_w].rows, layout.specs[layout.out_w].cols),
            &mut head[layout.specs[layout.out_w].offset..],
        )
        .expect("out_w shape");
        let db = &mut tail[..layout.specs[layout.out_b].len()];
        linear_backward(&acts.final_out, layout.view(params, layout.out_w), dlogits, dw, db)
    };

    // Final layer norm.
    let mut dx = {
        let (g_slice, rest) = grads.split_at_mut(layout.specs[layout.final_ln_b].offset);
        let dg = &mut g_slice[layout.specs[layout.final_ln_g].offset..];
        let db = &mut rest[..layout.specs[layout.final_ln_b].len()];
        layer_norm_backward(
            &d_final_out,
            &acts.final_ln,
            layout.slice(params, layout.final_ln_g),
            dg,
            db,
        )
    };

    for (li, ids) in layout.layers.iter().enumerate().rev() {
        let tape = &acts.layers[li];

        // FFN residual branch.
        let mut dffn = dx.clone();
        if let Some(m) = &tape.resid2_drop {
            dffn *= &m.mask;
        }
        let dgelu_out = {
            let spec_w2 = &layout.specs[ids.w2];
            let spec_b2 = &layout.specs[ids.b2];
            let (head, tail) = grads.split_at_mut(spec_b2.offset);
            let dw2 = ArrayViewMut2::from_shape(
                (spec_w2.rows, spec_w2.cols),
                &mut head[spec_w2.offset..spec_w2.offset + spec_w2.len()],
            )
            .expect("w2 shape");
            let db2 = &mut tail[..spec_b2.len()];
            linear_backward(&tape.gelu_out, layout.view(params, ids.w2), &dffn, dw2, db2)
        };
        let mut da1 = dgelu_out;
        ndarray::Zip::from(&mut da1).and(&tape.a1).for_each(|g, &a| {
            *g *= F::from_f64(gelu_grad(a.as_f64()));
        });
        let dln2_out = {
            let spec_w1 = &layout.specs[ids.w1];
            let spec_b1 = &layout.specs[ids.b1];
            let (head, tail) = grads.split_at_mut(spec_b1.offset);
            let dw1 = ArrayViewMut2::from_shape(
                (spec_w1.rows, spec_w1.cols),
                &mut head[spec_w1.offset..spec_w1.offset + spec_w1.len()],
            )
            .expect("w1 shape");
            let db1 = &mut tail[..spec_b1.len()];
            linear_backward(&tape.ln2_out, layout.view(params, ids.w1), &da1, dw1, db1)
        };
        let dx_mid_ln = {
            let spec_g = &layout.specs[ids.ln2_g];
            let spec_b = &layout.specs[ids.ln2_b];
            let (head, tail) = grads.split_at_mut(spec_b.offset);
            let dg = &mut head[spec_g.offset..spec_g.offset + spec_g.len()];
            let db = &mut tail[..spec_b.len()];
            layer_norm_backward(&dln2_out, &tape.ln2, layout.slice(params, ids.ln2_g), dg, db)
        };
        let dx_mid = &dx + &dx_mid_ln;

        // Attention residual branch.
        let mut dattn = dx_mid.clone();
        if let Some(m) = &tape.resid1_drop {
            dattn *= &m.mask;
        }
        let dctx = {
            let spec_wo = &layout.specs[ids.wo];
            let spec_bo = &layout.specs[ids.bo];
            let (head, tail) = grads.split_at_mut(spec_bo.offset);
            let dwo = ArrayViewMut2::from_shape(
                (spec_wo.rows, spec_wo.cols),
                &mut head[spec_wo.offset..spec_wo.offset + spec_wo.len()],
            )
            .expect("wo shape");
            let dbo = &mut tail[..spec_bo.len()];
            linear_backward(&tape.ctx, layout.view(params, ids.wo), &dattn, dwo, dbo)
        };

        let mut dq: Array2<F> = Array2::zeros((t, d));
        let mut dk_grad: Array2<F> = Array2::zeros((t, d));
        let mut dv: Array2<F> = Array2::zeros((t, d));
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = tape.q.slice(ndarray::s![.., cols.clone()]);
            let kh = tape.k.slice(ndarray::s![.., cols.clone()]);
            let vh = tape.v.slice(ndarray::s![.., cols.clone()]);
            let dctx_h = dctx.slice(ndarray::s![.., cols.clone()]);
            let weights = &tape.attn_w[h];
            let mut dropped = weights.clone();
            apply_dropout(&mut dropped, &tape.attn_drop[h]);

            let mut dweights = dctx_h.dot(&vh.t());
            dv.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&dropped.t().dot(&dctx_h));
            if let Some(m) = &tape.attn_drop[h] {
                dweights *= &m.mask;
            }
            // Softmax backward: ds = w * (dw - rowsum(dw * w)).
            let mut ds = dweights;
            for i in 0..t {
                let mut dot = F::zero();
                for j in 0..t {
                    dot += ds[(i, j)] * weights[(i, j)];
                }
                for j in 0..t {
                    ds[(i, j)] = weights[(i, j)] * (ds[(i, j)] - dot);
                }
            }
            let mut ds_scaled = ds;
            ds_scaled *= scale;
            dq.slice_mut(ndarray::s![.., cols.clone()]).assign(&ds_scaled.dot(&kh));
            dk_grad.slice_mut(ndarray::s![.., cols]).assign(&ds_scaled.t().dot(&qh));
        }

        let mut dln1_out: Array2<F> = Array2::zeros((t, d));
        for (w_id, b_id, dgrad) in
            [(ids.wq, ids.bq, &dq), (ids.wk, ids.bk, &dk_grad), (ids.wv, ids.bv, &dv)]
        {
            let spec_w = &layout.specs[w_id];
            let spec_b = &layout.specs[b_id];
            let (head, tail) = grads.split_at_mut(spec_b.offset);
            let dw = ArrayViewMut2::from_shape(
                (spec_w.rows, spec_w.cols),
                &mut head[spec_w.offset..spec_w.offset + spec_w.len()],
            )
            .expect("qkv shape");
            let db = &mut tail[..spec_b.len()];
            dln1_out += &linear_backward(&tape.ln1_out, layout.view(params, w_id), dgrad, dw, db);
        }
        let dx_in_ln = {
            let spec_g = &layout.specs[ids.ln1_g];
            let spec_b = &layout.specs[ids.ln1_b];
            let (head, tail) = grads.split_at_mut(spec_b.offset);
            let dg = &mut head[spec_g.offset..spec_g.offset + spec_g.len()];
            let db = &mut tail[..spec_b.len()];
            layer_norm_backward(&dln1_out, &tape.ln1, layout.slice(params, ids.ln1_g), dg, db)
        };
        dx = &dx_mid + &dx_in_ln;
    }

    // Embeddings.
    let dx0 = dx;
    {
        let bar_spec = &layout.specs[layout.bar_emb];
        let pos_spec = &layout.specs[layout.pos_emb];
        for (i, &(b, p)) in input.coords.iter().enumerate() {
            for j in 0..d {
                grads[bar_spec.offset + b * d + j] += dx0[(i, j)];
                grads[pos_spec.offset + p * d + j] += dx0[(i, j)];
            }
        }
    }
    let dconcat = {
        let spec_w = &layout.specs[layout.fusion_w];
        let spec_b = &layout.specs[layout.fusion_b];
        let (head, tail) = grads.split_at_mut(spec_b.offset);
        let dw = ArrayViewMut2::from_shape(
            (spec_w.rows, spec_w.cols),
            &mut head[spec_w.offset..spec_w.offset + spec_w.len()],
        )
        .expect("fusion shape");
        let db = &mut tail[..spec_b.len()];
        linear_backward(&acts.concat, layout.view(params, layout.fusion_w), &dx0, dw, db)
    };
    for (i, ids) in input.tokens.iter().enumerate() {
        let mut col = 0;
        for (k, &id) in ids.iter().enumerate() {
            let spec = &layout.specs[layout.embed[k]];
            let w = cfg.embed_widths[k];
            for j in 0..w {
                grads[spec.offset + id * w + j] += dconcat[(i, col + j)];
            }
            col += w;
        }
    }
}

/// Forward without a tape consumer: logits plus optional attention maps.
pub fn run_forward<F: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[F],
    input: &ModelInput,
    want_attention: bool,
) -> ForwardOutput<F> {
    let acts = forward(cfg, layout, params, input, None);
    ForwardOutput {
        logits: acts.logits,
        attention: want_attention.then_some(acts.attn_weights),
    }
}

/// Convenience for verification: forward + loss in one call.
pub fn forward_loss<F: Scalar>(
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[F],
    input: &ModelInput,
) -> f64 {
    let acts = forward(cfg, layout, params, input, None);
    loss_and_grad(cfg, input, &acts.logits).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MelodySequence, NoteEvent};
    use crate::infill::{build_masked_sample, Objective, Span};
    use crate::model::{init_params, Layout};
    
    use crate::tokens::encode;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 16,
            d_ff: 32,
            dropout: 0.0,
            embed_widths: [4, 4, 4, 4, 4],
            vocab: Vocab::default(),
            max_seq: 64,
            seed: 3,
        }
    }

    fn fixture_sample(n_notes: usize, span: Option<Span>) -> crate::infill::MaskedSample {
        let notes: Vec<NoteEvent> = (0..n_notes)
            .map(|i| NoteEvent {
                pitch: 60 + (i % 7) as u8,
                onset: i as u64 * 480,
                duration: 480,
            })
            .collect();
        let t = encode(&MelodySequence { tempo_bpm: 110.0, notes }).unwrap();
        let spans: Vec<Span> = span.into_iter().collect();
        build_masked_sample(&t, &spans, Objective::LongSpan).unwrap()
    }

    #[test]
    fn embed_shape_and_determinism() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params: Vec<f64> = init_params(&cfg, &layout);
        let sample = fixture_sample(6, None);
        let mut input = lower_sample(&sample, &cfg.vocab).unwrap();
        let (_, x0) = embed(&cfg, &layout, &params, &input);
        assert_eq!(x0.dim(), (input.total_len(), cfg.d_model));

        // Two positions carrying the same five ids and the same
        // bar/position coordinates embed identically.
        input.tokens[4] = input.tokens[2];
        input.coords[4] = input.coords[2];
        let (_, y0) = embed(&cfg, &layout, &params, &input);
        assert_eq!(y0.row(2), y0.row(4));
    }

    #[test]
    fn zero_fusion_leaves_only_positional_embeddings() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let mut params: Vec<f64> = init_params(&cfg, &layout);
        layout.slice_mut(&mut params, layout.fusion_w).fill(0.0);
        layout.slice_mut(&mut params, layout.fusion_b).fill(0.0);
        let sample = fixture_sample(4, None);
        let input = lower_sample(&sample, &cfg.vocab).unwrap();
        let (_, x0) = embed(&cfg, &layout, &params, &input);
        let bar = layout.view(&params, layout.bar_emb);
        let pos = layout.view(&params, layout.pos_emb);
        for (i, &(b, p)) in input.coords.iter().enumerate() {
            for j in 0..cfg.d_model {
                assert_eq!(x0[(i, j)], bar[(b, j)] + pos[(p, j)]);
            }
        }
    }

    #[test]
    fn blocked_attention_weights_are_exactly_zero() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params: Vec<f64> = init_params(&cfg, &layout);
        let sample = fixture_sample(8, Some(Span { start: 2, length: 3 }));
        let input = lower_sample(&sample, &cfg.vocab).unwrap();
        let acts = forward(&cfg, &layout, &params, &input, None);
        let mask = attention_mask(&input.attention_spec());
        for layer in &acts.attn_weights {
            for head in layer {
                for ((i, j), &w) in head.indexed_iter() {
                    if !mask[(i, j)] {
                        assert_eq!(w, 0.0, "blocked weight ({i},{j}) leaked");
                    }
                }
                // Rows are probability vectors over allowed columns.
                for row in head.rows() {
                    let sum: f64 = row.sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn empty_suffix_equals_bidirectional_encoder() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params: Vec<f64> = init_params(&cfg, &layout);
        let sample = fixture_sample(6, None);
        let input = lower_sample(&sample, &cfg.vocab).unwrap();
        assert_eq!(input.suffix_len(), 0);
        let mask = attention_mask(&input.attention_spec());
        assert!(mask.iter().all(|&b| b));
        // Forward is deterministic without dropout.
        let a = forward(&cfg, &layout, &params, &input, None).logits;
        let b = forward(&cfg, &layout, &params, &input, None).logits;
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_permutation_equivariance() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params: Vec<f64> = init_params(&cfg, &layout);
        let sample = fixture_sample(6, None);
        let mut input = lower_sample(&sample, &cfg.vocab).unwrap();
        let base = forward(&cfg, &layout, &params, &input, None).logits;
        // Swap two prefix tokens together with their coordinates.
        input.tokens.swap(2, 4);
        input.coords.swap(2, 4);
        let swapped = forward(&cfg, &layout, &params, &input, None).logits;
        // Equivariance holds mathematically; float reassociation leaves
        // rounding-level residue.
        let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
        for j in 0..cfg.vocab.total() {
            assert!(close(base[(2, j)], swapped[(4, j)]));
            assert!(close(base[(4, j)], swapped[(2, j)]));
            assert!(close(base[(1, j)], swapped[(1, j)]));
        }
    }

    #[test]
    fn uniform_logits_loss_is_sum_of_log_vocab_sizes() {
        let cfg = tiny_cfg();
        let sample = fixture_sample(8, Some(Span { start: 2, length: 3 }));
        let input = lower_sample(&sample, &cfg.vocab).unwrap();
        let t = input.total_len();
        let logits: Array2<f64> = Array2::zeros((t, cfg.vocab.total()));
        let (loss, _, per_pos) = loss_and_grad(&cfg, &input, &logits);
        let expected: f64 = cfg.vocab.sizes().iter().map(|&v| (v as f64).ln()).sum();
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
        assert_eq!(per_pos.len(), input.suffix_len());

        // Near-one-hot logits at the targets drive the loss toward zero.
        let mut sharp: Array2<f64> = Array2::zeros((t, cfg.vocab.total()));
        let offsets = attr_offsets(&cfg.vocab);
        for (si, target) in input.targets.iter().enumerate() {
            for k in 0..5 {
                sharp[(input.prefix_len + si, offsets[k] + target[k])] = 50.0;
            }
        }
        let (loss, _, _) = loss_and_grad(&cfg, &input, &sharp);
        assert!(loss < 1e-9, "sharp loss {loss}");
    }

    #[test]
    fn causality_suffix_positions_ignore_later_tokens() {
        let cfg = tiny_cfg();
        let layout = Layout::new(&cfg);
        let params: Vec<f64> = init_params(&cfg, &layout);
        let sample = fixture_sample(10, Some(Span { start: 2, length: 5 }));
        let mut input = lower_sample(&sample, &cfg.vocab).unwrap();
        assert!(input.suffix_len() >= 4);
        let acts = forward(&cfg, &layout, &params, &input, None);
        let (_, _, base_losses) = loss_and_grad(&cfg, &input, &acts.logits);

        // Perturb the last suffix input token.
        let last = input.total_len() - 1;
        input.tokens[last][3] = (input.tokens[last][3] + 1) % 128;
        let acts2 = forward(&cfg, &layout, &params, &input, None);
        let (_, _, new_losses) = loss_and_grad(&cfg, &input, &acts2.logits);

        // Every per-position loss before the perturbed position is
        // bit-identical; blocked columns contribute exactly zero.
        let changed = last - input.prefix_len;
        for i in 0..changed {
            assert_eq!(base_losses[i], new_losses[i], "position {i} leaked");
        }
        for j in 0..cfg.vocab.total() {
            for row in input.prefix_len..last {
                assert_eq!(acts.logits[(row, j)], acts2.logits[(row, j)]);
            }
        }
    }
}
