//! Objective evaluation metrics.
//!
//! Pitch and rhythm similarity compare corpus-level pitch-class and
//! inter-onset-interval histograms by overlapped area. Structure
//! similarity compares bar-pair content-similarity curves (mean absolute
//! difference: the similarity error). Diversity is the distinct/total
//! ratio of absolute-pitch n-grams per degree group. Settings are ranked
//! per metric and summed into task scores.

use std::collections::HashMap;

use log::warn;
use thiserror::Error;

use crate::corpus::MelodySequence;
use crate::tokens::POSITION_VALUES;
use crate::TICKS_PER_BAR;

/// A labelled probability histogram (masses sum to 1 unless empty).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub labels: Vec<String>,
    pub masses: Vec<f64>,
}

impl Histogram {
    pub fn is_empty(&self) -> bool {
        self.masses.iter().all(|&m| m == 0.0)
    }

    fn normalized(labels: Vec<String>, weights: Vec<f64>) -> Histogram {
        let total: f64 = weights.iter().sum();
        let masses = if total > 0.0 {
            weights.into_iter().map(|w| w / total).collect()
        } else {
            weights
        };
        Histogram { labels, masses }
    }
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("histograms have different bin labels")]
    BinMismatch,
    #[error("need at least 2 settings to rank")]
    TooFewSettings,
}

/// Duration-weighted pitch-class histogram (12 bins).
pub fn pch(m: &MelodySequence) -> Histogram {
    let labels = (0..12).map(|c| format!("pc{c}")).collect();
    let mut weights = vec![0.0; 12];
    for n in &m.notes {
        weights[usize::from(n.pitch % 12)] += f64::from(n.duration);
    }
    Histogram::normalized(labels, weights)
}

fn ioi_bins() -> Vec<u32> {
    let mut bins: Vec<u32> = POSITION_VALUES.iter().skip(1).map(|&p| u32::from(p)).collect();
    bins.push(TICKS_PER_BAR);
    bins.sort_unstable();
    bins.dedup();
    bins
}

/// Inter-onset-interval histogram over the mixed tick grid up to one
/// bar, plus an overflow bin. Off-grid intervals snap to the nearest bin.
pub fn ioi_hist(m: &MelodySequence) -> Histogram {
    let bins = ioi_bins();
    let mut labels: Vec<String> = bins.iter().map(|b| b.to_string()).collect();
    labels.push("overflow".into());
    let mut weights = vec![0.0; labels.len()];
    if m.notes.len() < 2 {
        return Histogram { labels, masses: weights };
    }
    for w in m.notes.windows(2) {
        let ioi = w[1].onset - w[0].onset;
        if ioi > u64::from(TICKS_PER_BAR) {
            *weights.last_mut().unwrap() += 1.0;
        } else {
            let ioi = ioi as u32;
            let idx = match bins.binary_search(&ioi) {
                Ok(i) => i,
                Err(i) => {
                    // Nearest bin; ties take the lower one.
                    if i == 0 {
                        0
                    } else if i == bins.len() {
                        bins.len() - 1
                    } else if ioi - bins[i - 1] <= bins[i] - ioi {
                        i - 1
                    } else {
                        i
                    }
                }
            };
            weights[idx] += 1.0;
        }
    }
    Histogram::normalized(labels, weights)
}

/// Overlapped area: sum over bins of the smaller mass.
pub fn overlap_area(a: &Histogram, b: &Histogram) -> Result<f64, MetricError> {
    if a.labels != b.labels {
        return Err(MetricError::BinMismatch);
    }
    if a.is_empty() || b.is_empty() {
        warn!("overlap area of an empty histogram is 0");
        return Ok(0.0);
    }
    Ok(a.masses.iter().zip(&b.masses).map(|(x, y)| x.min(*y)).sum())
}

/// Mean histogram over a corpus (per-piece histograms averaged).
fn corpus_mean<Fh>(corpus: &[MelodySequence], f: Fh) -> Option<Histogram>
where
    Fh: Fn(&MelodySequence) -> Histogram,
{
    let hists: Vec<Histogram> = corpus.iter().map(f).filter(|h| !h.is_empty()).collect();
    let first = hists.first()?;
    let mut masses = vec![0.0; first.masses.len()];
    for h in &hists {
        for (acc, m) in masses.iter_mut().zip(&h.masses) {
            *acc += m;
        }
    }
    let n = hists.len() as f64;
    masses.iter_mut().for_each(|m| *m /= n);
    Some(Histogram { labels: first.labels.clone(), masses })
}

/// Pitch similarity: overlapped area of corpus-mean pitch-class
/// histograms.
pub fn pitch_similarity(gen: &[MelodySequence], reference: &[MelodySequence]) -> f64 {
    match (corpus_mean(gen, pch), corpus_mean(reference, pch)) {
        (Some(a), Some(b)) => overlap_area(&a, &b).unwrap_or(0.0),
        _ => 0.0,
    }
}

/// Rhythm similarity: overlapped area of corpus-mean IOI histograms.
pub fn rhythm_similarity(gen: &[MelodySequence], reference: &[MelodySequence]) -> f64 {
    match (corpus_mean(gen, ioi_hist), corpus_mean(reference, ioi_hist)) {
        (Some(a), Some(b)) => overlap_area(&a, &b).unwrap_or(0.0),
        _ => 0.0,
    }
}

pub const STRUCTURE_MAX_DISTANCE: usize = 16;

/// Bar-pair content similarity of one piece: for each bar distance d,
/// the mean over bar pairs (u, u+d) of
/// `|intersection of (position, pitch, duration) multisets| / max(|u|, |v|, 1)`.
pub fn bar_similarity_curve(m: &MelodySequence) -> Option<[Option<f64>; STRUCTURE_MAX_DISTANCE]> {
    let last_bar = m.notes.last()?.bar() as usize;
    let n_bars = last_bar + 1;
    if n_bars < 2 {
        return None;
    }
    let mut bars: Vec<Vec<(u16, u8, u32)>> = vec![Vec::new(); n_bars];
    for n in &m.notes {
        bars[n.bar() as usize].push((
            (n.onset % u64::from(TICKS_PER_BAR)) as u16,
            n.pitch,
            n.duration,
        ));
    }
    for b in &mut bars {
        b.sort_unstable();
    }

    let mut curve = [None; STRUCTURE_MAX_DISTANCE];
    for (slot, d) in (1..=STRUCTURE_MAX_DISTANCE).enumerate() {
        if d >= n_bars {
            break;
        }
        let mut total = 0.0;
        let mut pairs = 0usize;
        for u in 0..n_bars - d {
            total += multiset_similarity(&bars[u], &bars[u + d]);
            pairs += 1;
        }
        curve[slot] = Some(total / pairs as f64);
    }
    Some(curve)
}

fn multiset_similarity(a: &[(u16, u8, u32)], b: &[(u16, u8, u32)]) -> f64 {
    let mut counts: HashMap<(u16, u8, u32), i64> = HashMap::new();
    for &x in a {
        *counts.entry(x).or_insert(0) += 1;
    }
    let mut inter = 0usize;
    for &x in b {
        let c = counts.entry(x).or_insert(0);
        if *c > 0 {
            *c -= 1;
            inter += 1;
        }
    }
    inter as f64 / a.len().max(b.len()).max(1) as f64
}

fn corpus_curve(corpus: &[MelodySequence]) -> [Option<f64>; STRUCTURE_MAX_DISTANCE] {
    let mut sums = [0.0; STRUCTURE_MAX_DISTANCE];
    let mut counts = [0usize; STRUCTURE_MAX_DISTANCE];
    let mut skipped = 0usize;
    for m in corpus {
        match bar_similarity_curve(m) {
            Some(curve) => {
                for (i, v) in curve.iter().enumerate() {
                    if let Some(v) = v {
                        sums[i] += v;
                        counts[i] += 1;
                    }
                }
            }
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("structure similarity skipped {skipped} single-bar pieces");
    }
    let mut out = [None; STRUCTURE_MAX_DISTANCE];
    for i in 0..STRUCTURE_MAX_DISTANCE {
        if counts[i] > 0 {
            out[i] = Some(sums[i] / counts[i] as f64);
        }
    }
    out
}

/// Structure similarity error: mean absolute difference between the
/// bar-pair similarity curves of two corpora (distances 1..=16).
pub fn structure_similarity_error(gen: &[MelodySequence], reference: &[MelodySequence]) -> f64 {
    let a = corpus_curve(gen);
    let b = corpus_curve(reference);
    let mut diff = 0.0;
    let mut n = 0usize;
    for i in 0..STRUCTURE_MAX_DISTANCE {
        if let (Some(x), Some(y)) = (a[i], b[i]) {
            diff += (x - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        diff / n as f64
    }
}

/// Degree groups for the diversity metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityGroup {
    /// n in 3..=5
    Short,
    /// n in 6..=10
    Mid,
    /// n in 11..=20
    Long,
}

impl DiversityGroup {
    pub fn degrees(self) -> std::ops::RangeInclusive<usize> {
        match self {
            DiversityGroup::Short => 3..=5,
            DiversityGroup::Mid => 6..=10,
            DiversityGroup::Long => 11..=20,
        }
    }
}

/// Distinct/total ratio of absolute-pitch n-grams across the corpus,
/// averaged over the group's degrees (degrees with no grams are
/// skipped).
pub fn diversity(corpus: &[MelodySequence], group: DiversityGroup) -> f64 {
    let mut values = Vec::new();
    for n in group.degrees() {
        let mut distinct: HashMap<&[u8], ()> = HashMap::new();
        let mut total = 0u64;
        let pieces: Vec<Vec<u8>> =
            corpus.iter().map(|m| m.notes.iter().map(|x| x.pitch).collect()).collect();
        for pitches in &pieces {
            if pitches.len() < n {
                continue;
            }
            for w in pitches.windows(n) {
                distinct.insert(w, ());
                total += 1;
            }
        }
        if total > 0 {
            values.push(distinct.len() as f64 / total as f64);
        }
    }
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Ranking
// ---------------------------------------------------------------------------

/// The six per-setting metric values for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub setting: String,
    /// Pitch similarity (higher is better).
    pub d_p: f64,
    /// Rhythm similarity (higher is better).
    pub d_r: f64,
    /// Structure similarity error (lower is better).
    pub d_s: f64,
    /// Diversity per group; ranked by absolute gap to the reference.
    pub d_ds: f64,
    pub d_dm: f64,
    pub d_dl: f64,
}

/// Compute all six metrics of a generated corpus against a reference.
pub fn metric_row(
    setting: &str,
    gen: &[MelodySequence],
    reference: &[MelodySequence],
) -> MetricRow {
    MetricRow {
        setting: setting.to_string(),
        d_p: pitch_similarity(gen, reference),
        d_r: rhythm_similarity(gen, reference),
        d_s: structure_similarity_error(gen, reference),
        d_ds: diversity(gen, DiversityGroup::Short),
        d_dm: diversity(gen, DiversityGroup::Mid),
        d_dl: diversity(gen, DiversityGroup::Long),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScore {
    pub setting: String,
    /// Average rank per metric (ties share the average rank).
    pub ranks: [f64; 6],
    pub total: f64,
}

/// Rank settings per metric (1 = best) and sum the ranks into the task
/// score. Diversity metrics rank by |value - reference|, ascending.
pub fn task_scores(
    rows: &[MetricRow],
    reference_diversity: [f64; 3],
) -> Result<Vec<TaskScore>, MetricError> {
    if rows.len() < 2 {
        return Err(MetricError::TooFewSettings);
    }
    // Keyed ascending: lower key = better rank.
    let keys: Vec<[f64; 6]> = rows
        .iter()
        .map(|r| {
            [
                -r.d_p,
                -r.d_r,
                r.d_s,
                (r.d_ds - reference_diversity[0]).abs(),
                (r.d_dm - reference_diversity[1]).abs(),
                (r.d_dl - reference_diversity[2]).abs(),
            ]
        })
        .collect();

    let mut scores: Vec<TaskScore> = rows
        .iter()
        .map(|r| TaskScore { setting: r.setting.clone(), ranks: [0.0; 6], total: 0.0 })
        .collect();
    for metric in 0..6 {
        let ranks = average_ranks(keys.iter().map(|k| k[metric]));
        for (s, rank) in scores.iter_mut().zip(&ranks) {
            s.ranks[metric] = *rank;
            s.total += rank;
        }
    }
    Ok(scores)
}

/// Ascending ranks starting at 1; ties receive the average of the ranks
/// they span.
fn average_ranks(keys: impl Iterator<Item = f64>) -> Vec<f64> {
    let keys: Vec<f64> = keys.collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
    let mut ranks = vec![0.0; keys.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && keys[order[j + 1]] == keys[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Order settings by the sum of their task scores (rank 1 = smallest).
pub fn overall_rank(totals: &[(String, f64)]) -> Vec<(String, f64, f64)> {
    let ranks = average_ranks(totals.iter().map(|(_, t)| *t));
    let mut out: Vec<(String, f64, f64)> = totals
        .iter()
        .zip(&ranks)
        .map(|((name, total), rank)| (name.clone(), *total, *rank))
        .collect();
    out.sort_by(|a, b| a.2.total_cmp(&b.2));
    out
}
