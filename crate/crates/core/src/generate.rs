//! Autoregressive decoding: melody continuation and inpainting.
//!
//! Decoding drives the infilling layout: the prompt (or surrounding
//! context) forms the prefix with a single `<MASK>` where the missing
//! music goes, and suffix tokens are sampled head by head with top-k
//! temperature sampling. Joint constraints are enforced after sampling:
//! a special from the pitch head makes the whole token special, and
//! notes must advance monotonically (within the bar window when
//! inpainting). A violating token is resampled up to 8 times before the
//! generation is forced to stop.

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::infill::{build_masked_sample, MaskedSample, Objective, Span};
use crate::model::{attr_offsets, run_forward, Layout, ModelConfig, ModelInput, Scalar};
use crate::tokens::{
    Attribute, CompoundToken, Coord, NoteToken, SpecialKind, TempoClass, TokenSequence, Vocab,
};
use crate::TICKS_PER_BAR;

/// Decoding hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub max_new_tokens: usize,
    /// Generation stops when a note would start at or past this bar.
    pub bar_limit: u8,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { temperature: 0.9, top_k: 10, max_new_tokens: 512, bar_limit: 32 }
    }
}

const REJECT_BUDGET: usize = 8;

/// What happened during one decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GenReport {
    pub generated_notes: usize,
    pub rejected_tokens: usize,
    pub forced_stop: bool,
    pub empty_fill: bool,
}

/// Read-only model handle for decoding.
pub struct Model<'a, F: Scalar> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub params: &'a [F],
}

/// Sample one id from a logit slice restricted to `candidates`:
/// temperature scaling, top-k truncation, renormalized draw.
fn sample_id<F: Scalar>(
    logits: &[F],
    candidates: &[usize],
    temperature: f64,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> usize {
    debug_assert!(!candidates.is_empty());
    let mut scored: Vec<(usize, f64)> =
        candidates.iter().map(|&id| (id, logits[id].as_f64())).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(top_k.max(1));
    let max = scored[0].1;
    let temperature = temperature.max(1e-9);
    let weights: Vec<f64> = scored.iter().map(|(_, l)| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.random::<f64>() * total;
    for ((id, _), w) in scored.iter().zip(&weights) {
        draw -= w;
        if draw <= 0.0 {
            return *id;
        }
    }
    scored.last().unwrap().0
}

/// Sample one compound token from the five logit heads. The pitch head
/// may choose `<EOS>`, `<SEP>` or `<SEG>`, which makes the whole token
/// that special; the value heads never sample padding or special ids.
pub fn sample_next<F: Scalar>(
    logits_row: &[F],
    vocab: &Vocab,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> CompoundToken {
    let offsets = attr_offsets(vocab);
    let head = |attr: Attribute| {
        let off = offsets[attr.index()];
        &logits_row[off..off + vocab.size(attr)]
    };
    let value_ids = |attr: Attribute| (0..vocab.value_count(attr)).collect::<Vec<_>>();

    // Pitch first: it arbitrates between note and special tokens.
    let mut pitch_candidates = value_ids(Attribute::Pitch);
    for kind in [SpecialKind::Eos, SpecialKind::Sep, SpecialKind::Seg] {
        pitch_candidates.push(vocab.special_id(Attribute::Pitch, kind));
    }
    let pitch_id = sample_id(
        head(Attribute::Pitch),
        &pitch_candidates,
        cfg.temperature,
        cfg.top_k,
        rng,
    );
    if let Some(kind) = vocab.special_from_id(Attribute::Pitch, pitch_id) {
        return CompoundToken::Special(kind);
    }

    let tempo_id = sample_id(
        head(Attribute::Tempo),
        &value_ids(Attribute::Tempo),
        cfg.temperature,
        cfg.top_k,
        rng,
    );
    let bar_id = sample_id(
        head(Attribute::Bar),
        &value_ids(Attribute::Bar),
        cfg.temperature,
        cfg.top_k,
        rng,
    );
    let position_id = sample_id(
        head(Attribute::Position),
        &value_ids(Attribute::Position),
        cfg.temperature,
        cfg.top_k,
        rng,
    );
    let duration_id = sample_id(
        head(Attribute::Duration),
        &value_ids(Attribute::Duration),
        cfg.temperature,
        cfg.top_k,
        rng,
    );

    CompoundToken::Note(NoteToken {
        tempo: TempoClass::ALL[tempo_id],
        bar: vocab.value_from_id(Attribute::Bar, bar_id).unwrap() as u8,
        position: vocab.value_from_id(Attribute::Position, position_id).unwrap(),
        pitch: pitch_id as u8,
        duration: vocab.value_from_id(Attribute::Duration, duration_id).unwrap(),
    })
}

/// Lift a sampled bar id (stored modulo `bar_mod`) to the smallest
/// absolute bar at or after `last_bar` with that residue.
fn lift_bar(vocab: &Vocab, sampled: u8, last_bar: u8) -> u8 {
    match vocab.bar_mod {
        None => sampled,
        Some(m) => {
            let m = u16::from(m);
            let last = u16::from(last_bar);
            let delta = (u16::from(sampled) + m - last % m) % m;
            (last + delta).min(127) as u8
        }
    }
}

struct DecodeBounds {
    min_onset: u64,
    min_bar: u8,
    max_bar: u8,
}

/// Run one autoregressive decode of the suffix for a prefix with a
/// single mask. Returns the accepted tokens (notes and `<SEG>`s).
fn decode_span<F: Scalar>(
    model: &Model<'_, F>,
    prefix: &[CompoundToken],
    prefix_coords: &[Coord],
    mask_coord: Coord,
    bounds: &DecodeBounds,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<CompoundToken>, GenReport) {
    let vocab = &model.cfg.vocab;
    let mut report = GenReport::default();
    let mut out: Vec<CompoundToken> = Vec::new();
    let mut suffix: Vec<(CompoundToken, Coord)> =
        vec![(CompoundToken::Special(SpecialKind::Mask), mask_coord)];
    let mut last_bar = bounds.min_bar;
    let mut min_onset = bounds.min_onset;

    'outer: while out.len() < cfg.max_new_tokens {
        let mut tokens = Vec::with_capacity(prefix.len() + suffix.len());
        let mut coords = Vec::with_capacity(prefix.len() + suffix.len());
        for (tok, coord) in prefix.iter().zip(prefix_coords) {
            tokens.push(vocab.token_ids(tok, tokens.len()).expect("prefix in vocabulary"));
            coords.push(vocab.coord_ids(*coord, coords.len()).expect("prefix coords"));
        }
        for (tok, coord) in &suffix {
            tokens.push(vocab.token_ids(tok, tokens.len()).expect("suffix in vocabulary"));
            coords.push(vocab.coord_ids(*coord, coords.len()).expect("suffix coords"));
        }
        let input = ModelInput {
            tokens,
            coords,
            prefix_len: prefix.len(),
            seg_lens: vec![suffix.len()],
            targets: Vec::new(),
        };
        let logits = run_forward(model.cfg, model.layout, model.params, &input, false).logits;
        let last_row: Vec<F> = logits.row(logits.nrows() - 1).to_vec();

        let mut accepted = None;
        for _attempt in 0..REJECT_BUDGET {
            match sample_next(&last_row, vocab, cfg, rng) {
                CompoundToken::Special(SpecialKind::Eos) | CompoundToken::Special(SpecialKind::Sep) => {
                    break 'outer;
                }
                CompoundToken::Special(kind) => {
                    accepted = Some(CompoundToken::Special(kind));
                    break;
                }
                CompoundToken::Note(mut note) => {
                    note.bar = lift_bar(vocab, note.bar, last_bar);
                    if note.bar >= cfg.bar_limit || note.bar > bounds.max_bar {
                        break 'outer;
                    }
                    if note.onset() < min_onset {
                        report.rejected_tokens += 1;
                        continue;
                    }
                    accepted = Some(CompoundToken::Note(note));
                    break;
                }
            }
        }
        let Some(token) = accepted else {
            warn!("resample budget exhausted; forcing end of generation");
            report.forced_stop = true;
            break;
        };
        if let CompoundToken::Note(n) = &token {
            last_bar = n.bar;
            min_onset = n.onset() + u64::from(n.duration);
            report.generated_notes += 1;
        }
        suffix.push((token, token.coord()));
        out.push(token);
    }
    report.empty_fill = report.generated_notes == 0;
    (out, report)
}

fn prompt_body(prompt: &TokenSequence) -> Vec<CompoundToken> {
    prompt
        .tokens()
        .iter()
        .filter(|t| !matches!(t, CompoundToken::Special(SpecialKind::Bos | SpecialKind::Eos)))
        .copied()
        .collect()
}

/// Continue a melody (or create one from scratch when the prompt is
/// empty): the prompt is the prefix, one `<MASK>` covers the future, and
/// notes decode until `<EOS>`/`<SEP>` or the bar limit.
pub fn continue_melody<F: Scalar>(
    model: &Model<'_, F>,
    prompt: &TokenSequence,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (TokenSequence, GenReport) {
    let body = prompt_body(prompt);
    let last_note = body.iter().rev().find_map(|t| t.as_note().copied());
    let (min_bar, min_onset, mask_coord) = match last_note {
        Some(n) => (
            n.bar,
            n.onset() + u64::from(n.duration),
            Coord::Note { bar: n.bar, position: n.position },
        ),
        None => (0, 0, Coord::Note { bar: 0, position: 0 }),
    };

    let mut prefix = vec![CompoundToken::Special(SpecialKind::Bos)];
    prefix.extend(body.iter().copied());
    prefix.push(CompoundToken::Special(SpecialKind::Mask));
    prefix.push(CompoundToken::Special(SpecialKind::Eos));
    let mut coords: Vec<Coord> = prefix.iter().map(|t| t.coord()).collect();
    coords[prefix.len() - 2] = mask_coord;

    let bounds = DecodeBounds { min_onset, min_bar, max_bar: cfg.bar_limit.saturating_sub(1) };
    let (generated, report) = decode_span(model, &prefix, &coords, mask_coord, &bounds, cfg, rng);

    let mut tokens = vec![CompoundToken::Special(SpecialKind::Bos)];
    tokens.extend(body);
    tokens.extend(generated);
    tokens.push(CompoundToken::Special(SpecialKind::Eos));
    (TokenSequence(tokens), report)
}

/// Fill the gap between two bar-aligned contexts. The filled notes stay
/// within the bars between the contexts (bars 6..=9 for the standard
/// 6+4+6 layout).
pub fn inpaint<F: Scalar>(
    model: &Model<'_, F>,
    pre_ctx: &TokenSequence,
    post_ctx: &TokenSequence,
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (TokenSequence, GenReport) {
    let pre = prompt_body(pre_ctx);
    let post = prompt_body(post_ctx);
    let last_pre = pre.iter().rev().find_map(|t| t.as_note().copied());
    let first_post = post.iter().find_map(|t| t.as_note().copied());

    let fill_start = last_pre.map(|n| n.bar + 1).unwrap_or(0);
    let fill_end = first_post.map(|n| n.bar.saturating_sub(1)).unwrap_or(127);
    let min_onset = last_pre.map(|n| n.onset() + u64::from(n.duration)).unwrap_or(0);
    let min_onset = min_onset.max(u64::from(fill_start) * u64::from(TICKS_PER_BAR));
    let mask_coord = Coord::Note { bar: fill_start, position: 0 };

    let mut prefix = vec![CompoundToken::Special(SpecialKind::Bos)];
    prefix.extend(pre.iter().copied());
    let mask_pos = prefix.len();
    prefix.push(CompoundToken::Special(SpecialKind::Mask));
    prefix.extend(post.iter().copied());
    prefix.push(CompoundToken::Special(SpecialKind::Eos));
    let mut coords: Vec<Coord> = prefix.iter().map(|t| t.coord()).collect();
    coords[mask_pos] = mask_coord;

    let bounds = DecodeBounds { min_onset, min_bar: fill_start, max_bar: fill_end };
    let decode_cfg = SamplerConfig { bar_limit: 128, ..*cfg };
    let (generated, report) =
        decode_span(model, &prefix, &coords, mask_coord, &bounds, &decode_cfg, rng);
    if report.empty_fill {
        warn!("inpainting produced an empty fill for bars {fill_start}..={fill_end}");
    }

    let mut tokens = vec![CompoundToken::Special(SpecialKind::Bos)];
    tokens.extend(pre);
    tokens.extend(generated);
    tokens.extend(post);
    tokens.push(CompoundToken::Special(SpecialKind::Eos));
    (TokenSequence(tokens), report)
}

// ---------------------------------------------------------------------------
// Fine-tuning sample construction
// ---------------------------------------------------------------------------

/// Continuation fine-tuning: mask a trailing span covering a uniform
/// fraction (0.25..0.95) of the notes.
pub fn continuation_sample(t: &TokenSequence, rng: &mut ChaCha8Rng) -> Option<MaskedSample> {
    let notes = t.note_indices();
    let n = notes.len();
    if n < 2 {
        return None;
    }
    let fraction = 0.25 + rng.random::<f64>() * 0.70;
    let len = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let start_note = n - len;
    let span = Span {
        start: notes[start_note],
        length: notes[n - 1] - notes[start_note] + 1,
    };
    build_masked_sample(t, &[span], Objective::LongSpan).ok()
}

/// Inpainting fine-tuning: mask the middle 4 bars of a random 16-bar
/// window. `None` when the piece is shorter than 16 bars or the window's
/// middle is empty.
pub fn inpaint_sample(t: &TokenSequence, rng: &mut ChaCha8Rng) -> Option<MaskedSample> {
    let max_bar = t.max_bar()?;
    if u16::from(max_bar) + 1 < 16 {
        return None;
    }
    let window_start = rng.random_range(0..=max_bar - 15);
    let mid = window_start + 6..=window_start + 9;

    // Token span over the notes inside the middle bars of the window.
    let mut first = None;
    let mut last = None;
    for (i, tok) in t.tokens().iter().enumerate() {
        if let CompoundToken::Note(n) = tok {
            if mid.contains(&n.bar) {
                first.get_or_insert(i);
                last = Some(i);
            }
        }
    }
    let (first, last) = (first?, last?);
    let span = Span { start: first, length: last - first + 1 };
    build_masked_sample(t, &[span], Objective::LongSpan).ok()
}
