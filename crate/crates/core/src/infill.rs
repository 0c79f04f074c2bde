//! Blank-infilling task construction.
//!
//! A sample keeps a corrupted prefix (every sampled span collapsed to a
//! single `<MASK>`) and a suffix holding the span contents. Prefix
//! tokens attend bidirectionally; suffix tokens attend to the whole
//! prefix and causally within the suffix. Within each suffix segment the
//! first input is `<MASK>` carrying the span's original bar/position and
//! the final target is `<SEP>`, so span termination is learned.

use log::debug;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lexicon::{max_match, Dimension, Lexicon};
use crate::tokens::{CompoundToken, Coord, SpecialKind, TokenSequence};

/// A contiguous token-index span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub length: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Sampling strategies for corruption spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Objective {
    PitchNgram,
    RhythmNgram,
    CombinedNgram,
    LongSpan,
    RandomSpan,
    BarSpan,
    Slm,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Objective::PitchNgram,
        Objective::RhythmNgram,
        Objective::CombinedNgram,
        Objective::LongSpan,
        Objective::RandomSpan,
        Objective::BarSpan,
        Objective::Slm,
    ];

    pub fn ngram_dimension(self) -> Option<Dimension> {
        match self {
            Objective::PitchNgram => Some(Dimension::Pitch),
            Objective::RhythmNgram => Some(Dimension::Rhythm),
            Objective::CombinedNgram => Some(Dimension::Combined),
            _ => None,
        }
    }
}

/// Shape of the attention layout; fully determines the mask matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionSpec {
    pub prefix_len: usize,
    pub suffix_segment_lens: Vec<usize>,
}

impl AttentionSpec {
    pub fn suffix_len(&self) -> usize {
        self.suffix_segment_lens.iter().sum()
    }

    pub fn total_len(&self) -> usize {
        self.prefix_len + self.suffix_len()
    }
}

/// Boolean self-attention mask: `true` marks an allowed (i, j) pair.
/// Prefix positions attend bidirectionally within the prefix; suffix
/// positions attend to the whole prefix and causally up to themselves.
pub fn attention_mask(spec: &AttentionSpec) -> Array2<bool> {
    let n = spec.total_len();
    let p = spec.prefix_len;
    Array2::from_shape_fn((n, n), |(i, j)| j < p || j <= i)
}

/// One suffix segment: the original span and its contents.
/// `mask_pos` is the index of the span's `<MASK>` in the prefix
/// (`None` for the causal-LM layout, which has no mask).
#[derive(Debug, Clone, PartialEq)]
pub struct SuffixSegment {
    pub span: Span,
    pub mask_pos: Option<usize>,
    pub tokens: Vec<CompoundToken>,
}

/// A training instance in the prefix/suffix layout.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub objective: Objective,
    pub prefix: Vec<CompoundToken>,
    /// Bar/position identity per prefix token; a `<MASK>` keeps the
    /// coordinates of the first token of the span it replaces.
    pub prefix_coords: Vec<Coord>,
    pub segments: Vec<SuffixSegment>,
    /// Spans that came from the uniform fallback rather than the lexicon.
    pub fallback_spans: usize,
}

impl MaskedSample {
    /// Suffix inputs with their positional coordinates. Each segment is
    /// `<MASK>` followed by the span tokens except the last; the causal
    /// layout feeds all tokens but the last with no `<MASK>`.
    pub fn suffix_inputs(&self) -> Vec<(CompoundToken, Coord)> {
        let mut out = Vec::with_capacity(self.suffix_len());
        for seg in &self.segments {
            match seg.mask_pos {
                Some(_) => {
                    let first = seg.tokens[0].coord();
                    out.push((CompoundToken::Special(SpecialKind::Mask), first));
                    for tok in &seg.tokens {
                        out.push((*tok, tok.coord()));
                    }
                }
                None => {
                    for tok in &seg.tokens[..seg.tokens.len().saturating_sub(1)] {
                        out.push((*tok, tok.coord()));
                    }
                }
            }
        }
        out
    }

    /// Per-suffix-position prediction targets: each segment's tokens
    /// followed by `<SEP>` (the causal layout predicts the next token).
    pub fn targets(&self) -> Vec<CompoundToken> {
        let mut out = Vec::with_capacity(self.suffix_len());
        for seg in &self.segments {
            match seg.mask_pos {
                Some(_) => {
                    out.extend(seg.tokens.iter().copied());
                    out.push(CompoundToken::Special(SpecialKind::Sep));
                }
                None => out.extend(seg.tokens.iter().skip(1).copied()),
            }
        }
        out
    }

    pub fn suffix_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| match s.mask_pos {
                Some(_) => s.tokens.len() + 1,
                None => s.tokens.len().saturating_sub(1),
            })
            .sum()
    }

    pub fn attention_spec(&self) -> AttentionSpec {
        AttentionSpec {
            prefix_len: self.prefix.len(),
            suffix_segment_lens: self
                .segments
                .iter()
                .map(|s| match s.mask_pos {
                    Some(_) => s.tokens.len() + 1,
                    None => s.tokens.len().saturating_sub(1),
                })
                .collect(),
        }
    }

    /// Splice the span contents back over their `<MASK>` positions.
    pub fn reconstruct(&self) -> TokenSequence {
        if self.segments.len() == 1 && self.segments[0].mask_pos.is_none() {
            return TokenSequence(self.segments[0].tokens.clone());
        }
        let mut out = Vec::new();
        let mut segs = self.segments.iter();
        let mut next = segs.next();
        for (i, tok) in self.prefix.iter().enumerate() {
            match next {
                Some(seg) if seg.mask_pos == Some(i) => {
                    out.extend(seg.tokens.iter().copied());
                    next = segs.next();
                }
                _ => out.push(*tok),
            }
        }
        TokenSequence(out)
    }
}

#[derive(Debug, Error)]
pub enum SpanError {
    #[error("span {index} ({start}+{length}) overlaps its predecessor or is unsorted")]
    Overlap { index: usize, start: usize, length: usize },
    #[error("span {index} exceeds the sequence length {len}")]
    OutOfBounds { index: usize, len: usize },
    #[error("span {index} is empty")]
    Empty { index: usize },
}

/// Assemble the prefix/suffix layout for a set of disjoint sorted spans.
pub fn build_masked_sample(
    t: &TokenSequence,
    spans: &[Span],
    objective: Objective,
) -> Result<MaskedSample, SpanError> {
    let mut last_end = 0usize;
    for (index, s) in spans.iter().enumerate() {
        if s.length == 0 {
            return Err(SpanError::Empty { index });
        }
        if s.start < last_end {
            return Err(SpanError::Overlap { index, start: s.start, length: s.length });
        }
        if s.end() > t.len() {
            return Err(SpanError::OutOfBounds { index, len: t.len() });
        }
        last_end = s.end();
    }

    let mut prefix = Vec::with_capacity(t.len());
    let mut prefix_coords = Vec::with_capacity(t.len());
    let mut segments = Vec::with_capacity(spans.len());
    let mut iter = spans.iter().peekable();
    let mut i = 0;
    while i < t.len() {
        match iter.peek() {
            Some(&&s) if s.start == i => {
                let tokens = t.tokens()[s.start..s.end()].to_vec();
                prefix.push(CompoundToken::Special(SpecialKind::Mask));
                prefix_coords.push(tokens[0].coord());
                segments.push(SuffixSegment { span: s, mask_pos: Some(prefix.len() - 1), tokens });
                i = s.end();
                iter.next();
            }
            _ => {
                prefix.push(t.tokens()[i]);
                prefix_coords.push(t.tokens()[i].coord());
                i += 1;
            }
        }
    }

    Ok(MaskedSample { objective, prefix, prefix_coords, segments, fallback_spans: 0 })
}

/// Causal language-model layout: empty prefix, the whole sequence as one
/// segment, next-token targets.
pub fn build_slm_sample(t: &TokenSequence) -> MaskedSample {
    MaskedSample {
        objective: Objective::Slm,
        prefix: Vec::new(),
        prefix_coords: Vec::new(),
        segments: vec![SuffixSegment {
            span: Span { start: 0, length: t.len() },
            mask_pos: None,
            tokens: t.tokens().to_vec(),
        }],
        fallback_spans: 0,
    }
}

// ---------------------------------------------------------------------------
// Span samplers (note-index space, mapped to token spans)
// ---------------------------------------------------------------------------

/// Token span covering notes `[a, b]` plus any specials between them.
fn token_span(note_idx: &[usize], a: usize, b: usize) -> Span {
    Span { start: note_idx[a], length: note_idx[b] - note_idx[a] + 1 }
}

/// A single span of `round(ratio * n)` notes placed uniformly.
pub fn sample_long_span(t: &TokenSequence, ratio: f64, rng: &mut ChaCha8Rng) -> Option<Span> {
    let notes = t.note_indices();
    let n = notes.len();
    if n == 0 {
        return None;
    }
    let len = ((ratio * n as f64).round() as usize).clamp(1, n);
    let start = rng.random_range(0..=n - len);
    Some(token_span(&notes, start, start + len - 1))
}

/// Draw from Geometric(p) on {1, 2, ...} by inversion, clamped to `clip`.
fn geometric_len(p: f64, clip: (usize, usize), rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let l = 1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as usize;
    l.clamp(clip.0, clip.1)
}

/// Uniform non-overlapping start for a `len`-note window, or `None` when
/// nothing fits. Rejection sampling first, exhaustive scan as a fallback
/// so dense plans still terminate.
fn place_span(
    occupied: &[bool],
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let n = occupied.len();
    if len == 0 || len > n {
        return None;
    }
    let fits = |s: usize| occupied[s..s + len].iter().all(|&o| !o);
    for _ in 0..32 {
        let s = rng.random_range(0..=n - len);
        if fits(s) {
            return Some(s);
        }
    }
    let feasible: Vec<usize> = (0..=n - len).filter(|&s| fits(s)).collect();
    if feasible.is_empty() {
        None
    } else {
        Some(feasible[rng.random_range(0..feasible.len())])
    }
}

fn mark(occupied: &mut [bool], start: usize, len: usize) {
    occupied[start..start + len].iter_mut().for_each(|o| *o = true);
}

/// SpanBERT-style random spans: geometric lengths (p = `geometric_p`,
/// clipped) at uniform non-overlapping starts until `ratio` of the note
/// tokens is covered.
pub fn sample_random_spans(
    t: &TokenSequence,
    ratio: f64,
    geometric_p: f64,
    clip: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Vec<Span> {
    let notes = t.note_indices();
    let n = notes.len();
    if n == 0 {
        return Vec::new();
    }
    let target = ratio * n as f64;
    let mut occupied = vec![false; n];
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut masked = 0usize;
    while (masked as f64) < target {
        // The final span is trimmed to the remaining budget so the
        // masked fraction concentrates at `ratio` instead of overshooting
        // by up to a whole span.
        let remaining = (target - masked as f64).ceil() as usize;
        let len = geometric_len(geometric_p, clip, rng).min(n).min(remaining.max(1));
        let Some(start) = place_with_shrink(&occupied, len, rng) else { break };
        let (start, len) = start;
        mark(&mut occupied, start, len);
        chosen.push((start, len));
        masked += len;
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|(s, l)| token_span(&notes, s, s + l - 1)).collect()
}

/// Place a span of at most `len` notes, shrinking when nothing fits.
fn place_with_shrink(
    occupied: &[bool],
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize)> {
    for l in (1..=len).rev() {
        if let Some(s) = place_span(occupied, l, rng) {
            return Some((s, l));
        }
    }
    None
}

/// Whole-bar spans: non-empty bars drawn uniformly without replacement
/// until the masked note fraction reaches `ratio`.
pub fn sample_bar_spans(t: &TokenSequence, ratio: f64, rng: &mut ChaCha8Rng) -> Vec<Span> {
    let notes = t.note_indices();
    let n = notes.len();
    if n == 0 {
        return Vec::new();
    }
    // Note-index range per non-empty bar (notes are bar-sorted).
    let mut bars: Vec<(usize, usize)> = Vec::new();
    let mut current_bar = None;
    for (ni, &ti) in notes.iter().enumerate() {
        let bar = t.tokens()[ti].as_note().expect("note index").bar;
        match current_bar {
            Some(b) if b == bar => bars.last_mut().unwrap().1 = ni,
            _ => {
                bars.push((ni, ni));
                current_bar = Some(bar);
            }
        }
    }
    let mut order: Vec<usize> = (0..bars.len()).collect();
    order.shuffle(rng);
    let target = ratio * n as f64;
    let mut masked = 0usize;
    let mut chosen = Vec::new();
    for b in order {
        if (masked as f64) >= target {
            break;
        }
        chosen.push(bars[b]);
        masked += bars[b].1 - bars[b].0 + 1;
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|(a, b)| token_span(&notes, a, b)).collect()
}

/// Lexicon-guided spans: shuffle the maximum-matching candidates and
/// accept them until `ratio` of the note tokens is covered; any
/// shortfall is topped up with uniformly placed `fallback_len`-note
/// spans. Returns the spans plus the number that came from the fallback.
pub fn sample_ngram_spans(
    t: &TokenSequence,
    lexicon: Option<&Lexicon>,
    dimension: Dimension,
    ratio: f64,
    fallback_len: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Span>, usize) {
    let notes = t.note_indices();
    let n = notes.len();
    if n == 0 {
        return (Vec::new(), 0);
    }
    let target = ratio * n as f64;
    let mut occupied = vec![false; n];
    let mut chosen: Vec<(usize, usize)> = Vec::new();
    let mut masked = 0usize;

    let mut candidates = match lexicon {
        Some(lex) => max_match(t, lex, dimension),
        None => Vec::new(),
    };
    candidates.shuffle(rng);
    for c in candidates {
        if (masked as f64) >= target {
            break;
        }
        // max_match spans never overlap each other.
        mark(&mut occupied, c.start, c.len);
        chosen.push((c.start, c.len));
        masked += c.len;
    }

    let mut fallback = 0usize;
    while (masked as f64) < target {
        let len = fallback_len.min(n);
        let Some((start, len)) = place_with_shrink(&occupied, len, rng) else {
            debug!("ngram span sampling shortfall: {masked} of {target:.1} notes covered");
            break;
        };
        mark(&mut occupied, start, len);
        chosen.push((start, len));
        masked += len;
        fallback += 1;
    }

    chosen.sort_unstable();
    let spans = chosen.into_iter().map(|(s, l)| token_span(&notes, s, s + l - 1)).collect();
    (spans, fallback)
}

// ---------------------------------------------------------------------------
// Batch construction
// ---------------------------------------------------------------------------

/// How objectives are assigned in multi-task batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MultiTaskStyle {
    /// Each sample draws one of the four objectives uniformly.
    PerSample,
    /// Objectives rotate in a fixed order across the batch.
    RoundRobin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    Single(Objective),
    MultiTask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfillConfig {
    pub ngram_ratio: f64,
    pub long_ratio: f64,
    pub random_ratio: f64,
    pub bar_ratio: f64,
    pub geometric_p: f64,
    pub span_len_clip: (usize, usize),
    pub fallback_len: usize,
    pub max_transpose: i8,
    pub multi_task: MultiTaskStyle,
    pub max_seq: usize,
}

impl Default for InfillConfig {
    fn default() -> Self {
        InfillConfig {
            ngram_ratio: 0.15,
            long_ratio: 0.5,
            random_ratio: 0.5,
            bar_ratio: 0.5,
            geometric_p: 0.2,
            span_len_clip: (1, 10),
            fallback_len: 3,
            max_transpose: 6,
            multi_task: MultiTaskStyle::PerSample,
            max_seq: 256,
        }
    }
}

/// The four multi-task objectives.
const MULTI_TASK_OBJECTIVES: [Objective; 4] = [
    Objective::PitchNgram,
    Objective::RhythmNgram,
    Objective::CombinedNgram,
    Objective::LongSpan,
];

/// Shift every note token's pitch by a uniform number of semitones in
/// `[-max, max]`, clamped to the shifts that keep all pitches in range.
pub fn transpose_tokens(t: &TokenSequence, max: i8, rng: &mut ChaCha8Rng) -> TokenSequence {
    let (lo, hi) = t.notes().fold((0i16, 127i16), |(lo, hi), n| {
        (lo.max(-i16::from(n.pitch)), hi.min(127 - i16::from(n.pitch)))
    });
    let lo = lo.max(-i16::from(max));
    let hi = hi.min(i16::from(max));
    let shift = if lo >= hi { 0 } else { rng.random_range(lo..=hi) };
    shift_tokens(t, shift)
}

fn shift_tokens(t: &TokenSequence, shift: i16) -> TokenSequence {
    TokenSequence(
        t.tokens()
            .iter()
            .map(|tok| match tok {
                CompoundToken::Note(n) => {
                    let mut n = *n;
                    n.pitch = (i16::from(n.pitch) + shift) as u8;
                    CompoundToken::Note(n)
                }
                s => *s,
            })
            .collect(),
    )
}

/// Clip a token sequence to a random window of at most `max_seq` tokens.
pub fn slice_segment(t: &TokenSequence, max_seq: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
    if t.len() <= max_seq {
        return t.clone();
    }
    let start = rng.random_range(0..=t.len() - max_seq);
    TokenSequence(t.tokens()[start..start + max_seq].to_vec())
}

/// Sample spans for one objective and build the masked sample.
pub fn build_objective_sample(
    t: &TokenSequence,
    objective: Objective,
    lexicon: Option<&Lexicon>,
    cfg: &InfillConfig,
    rng: &mut ChaCha8Rng,
) -> MaskedSample {
    match objective {
        Objective::Slm => build_slm_sample(t),
        Objective::LongSpan => {
            let spans: Vec<Span> = sample_long_span(t, cfg.long_ratio, rng).into_iter().collect();
            build_masked_sample(t, &spans, objective).expect("long span is well-formed")
        }
        Objective::RandomSpan => {
            let spans =
                sample_random_spans(t, cfg.random_ratio, cfg.geometric_p, cfg.span_len_clip, rng);
            build_masked_sample(t, &spans, objective).expect("random spans are well-formed")
        }
        Objective::BarSpan => {
            let spans = sample_bar_spans(t, cfg.bar_ratio, rng);
            build_masked_sample(t, &spans, objective).expect("bar spans are well-formed")
        }
        Objective::PitchNgram | Objective::RhythmNgram | Objective::CombinedNgram => {
            let dimension = objective.ngram_dimension().unwrap();
            let (spans, fallback) =
                sample_ngram_spans(t, lexicon, dimension, cfg.ngram_ratio, cfg.fallback_len, rng);
            let mut sample =
                build_masked_sample(t, &spans, objective).expect("ngram spans are well-formed");
            sample.fallback_spans = fallback;
            sample
        }
    }
}

/// Build one batch: slice each piece to `max_seq`, transpose it, pick an
/// objective per the batch mode, and construct the masked sample.
pub fn make_training_batch(
    pieces: &[TokenSequence],
    mode: BatchMode,
    lexicon: Option<&Lexicon>,
    cfg: &InfillConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<MaskedSample> {
    pieces
        .iter()
        .enumerate()
        .map(|(i, piece)| {
            let segment = slice_segment(piece, cfg.max_seq, rng);
            let segment = transpose_tokens(&segment, cfg.max_transpose, rng);
            let objective = match mode {
                BatchMode::Single(o) => o,
                BatchMode::MultiTask => match cfg.multi_task {
                    MultiTaskStyle::PerSample => {
                        MULTI_TASK_OBJECTIVES[rng.random_range(0..MULTI_TASK_OBJECTIVES.len())]
                    }
                    MultiTaskStyle::RoundRobin => {
                        MULTI_TASK_OBJECTIVES[i % MULTI_TASK_OBJECTIVES.len()]
                    }
                },
            };
            build_objective_sample(&segment, objective, lexicon, cfg, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{MelodySequence, NoteEvent};
    use crate::lexicon::build_lexicon;
    use crate::seeding::derive_rng;
    use crate::tokens::encode;
    use proptest::prelude::*;

    fn piece(n_notes: usize) -> TokenSequence {
        let notes: Vec<NoteEvent> = (0..n_notes)
            .map(|i| NoteEvent {
                pitch: 55 + (i % 14) as u8,
                onset: i as u64 * 240,
                duration: 240,
            })
            .collect();
        encode(&MelodySequence { tempo_bpm: 120.0, notes }).unwrap()
    }

    #[test]
    fn long_span_length_and_bounds() {
        let t = piece(100);
        let n = t.note_count();
        assert_eq!(n, 100);
        let mut starts = std::collections::HashSet::new();
        for seed in 0..2000 {
            let mut rng = derive_rng(seed, "long", 0);
            let s = sample_long_span(&t, 0.5, &mut rng).unwrap();
            let sample = build_masked_sample(&t, &[s], Objective::LongSpan).unwrap();
            let masked_notes: usize =
                sample.segments.iter().map(|g| g.tokens.iter().filter(|t| t.is_note()).count()).sum();
            assert_eq!(masked_notes, 50);
            starts.insert(s.start);
        }
        assert_eq!(starts.len(), 51, "all 51 uniform starts should appear");
    }

    #[test]
    fn long_span_tiny_sequence() {
        let t = piece(2);
        let mut rng = derive_rng(0, "long", 1);
        let s = sample_long_span(&t, 0.5, &mut rng).unwrap();
        assert_eq!(s.length, 1);
    }

    #[test]
    fn long_span_start_is_uniform() {
        // Chi-squared goodness of fit over the 51 possible starts.
        let t = piece(100);
        let mut rng = derive_rng(7, "long-chi2", 0);
        let mut counts = [0u32; 51];
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_long_span(&t, 0.5, &mut rng).unwrap();
            // Token index 1 is the first note (after <BOS>).
            counts[s.start - 1] += 1;
        }
        let expected = draws as f64 / 51.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-squared with 50 degrees of freedom.
        assert!(chi2 < 76.154, "chi2 = {chi2}");
    }

    #[test]
    fn random_spans_lengths_clipped_and_ratio_concentrates() {
        let t = piece(100);
        let mut total_masked = 0usize;
        for seed in 0..1000 {
            let mut rng = derive_rng(seed, "random", 2);
            let spans = sample_random_spans(&t, 0.5, 0.2, (1, 10), &mut rng);
            let mut last_end = 0;
            for s in &spans {
                assert!(s.start >= last_end);
                last_end = s.end();
            }
            let masked: usize = spans
                .iter()
                .map(|s| t.tokens()[s.start..s.end()].iter().filter(|t| t.is_note()).count())
                .sum();
            total_masked += masked;
        }
        let fraction = total_masked as f64 / (1000.0 * 100.0);
        assert!((fraction - 0.5).abs() < 0.02, "mean masked fraction {fraction}");
    }

    #[test]
    fn random_spans_tiny_ratio_single_span() {
        let t = piece(100);
        let mut rng = derive_rng(3, "random", 3);
        let spans = sample_random_spans(&t, 1e-9, 0.2, (1, 10), &mut rng);
        assert_eq!(spans.len(), 1);
    }

    #[test]
    fn bar_spans_equal_bars() {
        // 8 bars of 8 eighth notes each.
        let t = piece(64);
        for seed in 0..50 {
            let mut rng = derive_rng(seed, "bar", 4);
            let spans = sample_bar_spans(&t, 0.5, &mut rng);
            assert_eq!(spans.len(), 4, "exactly half of 8 equal bars");
            let masked: usize = spans
                .iter()
                .map(|s| t.tokens()[s.start..s.end()].iter().filter(|t| t.is_note()).count())
                .sum();
            assert_eq!(masked, 32);
        }
    }

    #[test]
    fn bar_spans_stop_at_smallest_superset() {
        // Unequal bars: 2 + 8 + 8 + 14 notes.
        let mut notes = Vec::new();
        let sizes = [2usize, 8, 8, 14];
        for (bar, &count) in sizes.iter().enumerate() {
            for i in 0..count {
                notes.push(NoteEvent {
                    pitch: 60 + (i % 7) as u8,
                    onset: bar as u64 * 1920 + i as u64 * (1920 / count as u64) / 30 * 30,
                    duration: 30,
                });
            }
        }
        let t = encode(&MelodySequence { tempo_bpm: 120.0, notes }).unwrap();
        let n = t.note_count() as f64;
        for seed in 0..100 {
            let mut rng = derive_rng(seed, "bar", 5);
            let spans = sample_bar_spans(&t, 0.5, &mut rng);
            let per_span: Vec<usize> = spans
                .iter()
                .map(|s| t.tokens()[s.start..s.end()].iter().filter(|t| t.is_note()).count())
                .collect();
            let masked: usize = per_span.iter().sum();
            assert!(masked as f64 >= 0.5 * n);
            // Minimal superset: the last drawn bar pushed coverage over
            // the target, so removing some chosen bar (at least the
            // largest) must drop below it.
            let largest = per_span.iter().max().unwrap();
            assert!(((masked - largest) as f64) < 0.5 * n);
        }
    }

    #[test]
    fn ngram_sampler_fallback_only_without_lexicon() {
        let t = piece(100);
        let mut rng = derive_rng(1, "ngram", 6);
        let (spans, fallback) =
            sample_ngram_spans(&t, None, Dimension::Pitch, 0.15, 3, &mut rng);
        assert_eq!(spans.len(), fallback);
        let masked: usize = spans
            .iter()
            .map(|s| t.tokens()[s.start..s.end()].iter().filter(|t| t.is_note()).count())
            .sum();
        assert!((15..=17).contains(&masked), "fallback coverage {masked}");
    }

    #[test]
    fn ngram_sampler_coverage_band() {
        let melodies: Vec<MelodySequence> = (0..30)
            .map(|i| {
                let notes = (0..40)
                    .map(|j| NoteEvent {
                        pitch: 50 + ((i + j) % 20) as u8,
                        onset: j as u64 * 240,
                        duration: 240,
                    })
                    .collect();
                MelodySequence { tempo_bpm: 120.0, notes }
            })
            .collect();
        let lex = build_lexicon(&melodies, 12, 0.5);
        let t = piece(100);
        let n = t.note_count();
        for seed in 0..1000 {
            let mut rng = derive_rng(seed, "ngram-band", 7);
            let (spans, _) =
                sample_ngram_spans(&t, Some(&lex), Dimension::Pitch, 0.15, 3, &mut rng);
            let masked: usize = spans
                .iter()
                .map(|s| t.tokens()[s.start..s.end()].iter().filter(|t| t.is_note()).count())
                .sum();
            assert!(masked >= 15, "coverage shortfall {masked}");
            assert!(masked <= 15 + 11, "overshoot {masked} of {n}");
        }
    }

    #[test]
    fn masked_sample_arithmetic() {
        let t = piece(3); // <BOS> n n n <EOS>
        let sample = build_masked_sample(&t, &[], Objective::RandomSpan).unwrap();
        assert_eq!(sample.prefix, t.tokens());
        assert_eq!(sample.suffix_len(), 0);

        let sample =
            build_masked_sample(&t, &[Span { start: 1, length: 2 }], Objective::RandomSpan)
                .unwrap();
        assert_eq!(sample.prefix.len(), 4);
        assert_eq!(sample.suffix_len(), 3);
        let targets = sample.targets();
        assert_eq!(targets.len(), 3);
        assert_eq!(targets[2], CompoundToken::Special(SpecialKind::Sep));
        let inputs = sample.suffix_inputs();
        assert_eq!(inputs[0].0, CompoundToken::Special(SpecialKind::Mask));
        assert_eq!(inputs[0].1, t.tokens()[1].coord());
        assert_eq!(sample.reconstruct(), t);
    }

    #[test]
    fn overlapping_spans_rejected() {
        let t = piece(10);
        let err = build_masked_sample(
            &t,
            &[Span { start: 1, length: 3 }, Span { start: 2, length: 2 }],
            Objective::RandomSpan,
        )
        .unwrap_err();
        assert!(matches!(err, SpanError::Overlap { index: 1, .. }));
    }

    #[test]
    fn attention_mask_spec_rows() {
        let spec = AttentionSpec { prefix_len: 3, suffix_segment_lens: vec![2] };
        let m = attention_mask(&spec);
        let row = |i: usize| (0..5).filter(|&j| m[(i, j)]).collect::<Vec<_>>();
        assert_eq!(row(3), vec![0, 1, 2, 3]);
        assert_eq!(row(0), vec![0, 1, 2]);
        assert_eq!(row(4), vec![0, 1, 2, 3, 4]);

        // Empty suffix: fully bidirectional.
        let spec = AttentionSpec { prefix_len: 4, suffix_segment_lens: vec![] };
        assert!(attention_mask(&spec).iter().all(|&b| b));

        // Empty prefix: pure causal.
        let spec = AttentionSpec { prefix_len: 0, suffix_segment_lens: vec![4] };
        let m = attention_mask(&spec);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m[(i, j)], j <= i);
            }
        }
    }

    #[test]
    fn slm_layout_is_causal_next_token() {
        let t = piece(5);
        let sample = build_slm_sample(&t);
        assert!(sample.prefix.is_empty());
        let spec = sample.attention_spec();
        assert_eq!(spec.prefix_len, 0);
        assert_eq!(spec.suffix_len(), t.len() - 1);
        let inputs = sample.suffix_inputs();
        let targets = sample.targets();
        assert_eq!(inputs.len(), targets.len());
        assert_eq!(inputs[0].0, t.tokens()[0]);
        assert_eq!(targets[0], t.tokens()[1]);
        assert_eq!(sample.reconstruct(), t);
    }

    #[test]
    fn batch_modes_and_determinism() {
        let pieces: Vec<TokenSequence> = (0..16).map(|_| piece(60)).collect();
        let cfg = InfillConfig::default();

        let mut rng = derive_rng(11, "batch", 0);
        let batch =
            make_training_batch(&pieces, BatchMode::Single(Objective::LongSpan), None, &cfg, &mut rng);
        assert!(batch.iter().all(|s| s.segments.len() == 1));

        let mut rng_a = derive_rng(12, "batch", 1);
        let mut rng_b = derive_rng(12, "batch", 1);
        let a = make_training_batch(&pieces, BatchMode::MultiTask, None, &cfg, &mut rng_a);
        let b = make_training_batch(&pieces, BatchMode::MultiTask, None, &cfg, &mut rng_b);
        assert_eq!(a, b);
    }

    #[test]
    fn multi_task_objective_counts_are_uniform() {
        let pieces: Vec<TokenSequence> = (0..100).map(|_| piece(40)).collect();
        let cfg = InfillConfig::default();
        let mut counts = std::collections::HashMap::new();
        for b in 0..40 {
            let mut rng = derive_rng(99, "batch", b);
            for s in make_training_batch(&pieces, BatchMode::MultiTask, None, &cfg, &mut rng) {
                *counts.entry(s.objective).or_insert(0usize) += 1;
            }
        }
        // 4000 samples over 4 objectives: each within 3 sigma of 1000.
        let sigma = (4000.0f64 * 0.25 * 0.75).sqrt();
        for o in MULTI_TASK_OBJECTIVES {
            let c = *counts.get(&o).unwrap_or(&0) as f64;
            assert!((c - 1000.0).abs() < 3.0 * sigma, "{o:?} count {c}");
        }
    }

    #[test]
    fn transposition_preserves_rhythm_projection() {
        let t = piece(40);
        let mut rng = derive_rng(5, "transpose", 0);
        let shifted = transpose_tokens(&t, 6, &mut rng);
        let a = crate::lexicon::relative_projection(&crate::tokens::decode(&t), Dimension::Rhythm);
        let b = crate::lexicon::relative_projection(
            &crate::tokens::decode(&shifted),
            Dimension::Rhythm,
        );
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn reconstruction_round_trip(
            n_notes in 4usize..60,
            seed in 0u64..500,
            objective_idx in 0usize..7,
        ) {
            let t = piece(n_notes);
            let mut rng = derive_rng(seed, "fuzz", 0);
            let cfg = InfillConfig::default();
            let objective = Objective::ALL[objective_idx];
            let sample = build_objective_sample(&t, objective, None, &cfg, &mut rng);
            prop_assert_eq!(sample.reconstruct(), t.clone());
            // Prefix length bookkeeping.
            let span_tokens: usize = sample.segments.iter().map(|s| s.tokens.len()).sum();
            if objective != Objective::Slm {
                prop_assert_eq!(
                    sample.prefix.len(),
                    t.len() - span_tokens + sample.segments.len()
                );
            }
        }
    }
}
