//! Melodic n-gram lexicon.
//!
//! N-grams are mined in a relative representation over three dimensions:
//! pitch (signed intervals), rhythm (in-bar onsets in ticks) and their
//! combination. A degree-k gram spans k notes: its item tuple holds k-1
//! intervals (pitch), k onsets (rhythm) or k-1 interval/onset pairs
//! (combined). Grams are scored with a t-statistic against the product
//! of their constituent 2-gram frequencies and the top fraction per
//! (dimension, degree) bucket forms the lexicon.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::MelodySequence;
use crate::stablehash::StableHasher;
use crate::tokens::TokenSequence;
use crate::TICKS_PER_BAR;

/// The three n-gram dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dimension {
    Pitch,
    Rhythm,
    Combined,
}

impl Dimension {
    pub const ALL: [Dimension; 3] = [Dimension::Pitch, Dimension::Rhythm, Dimension::Combined];

    /// Items per gram of the given degree (a degree-k gram spans k notes).
    pub fn items_for_degree(self, degree: usize) -> usize {
        match self {
            Dimension::Pitch | Dimension::Combined => degree - 1,
            Dimension::Rhythm => degree,
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dimension::Pitch => "pitch",
            Dimension::Rhythm => "rhythm",
            Dimension::Combined => "combined",
        })
    }
}

impl FromStr for Dimension {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "pitch" => Ok(Dimension::Pitch),
            "rhythm" => Ok(Dimension::Rhythm),
            "combined" => Ok(Dimension::Combined),
            _ => Err(()),
        }
    }
}

/// Item tuple of one gram in relative representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GramItems {
    /// Signed pitch intervals between consecutive notes.
    Intervals(Vec<i16>),
    /// In-bar note onsets in ticks.
    Onsets(Vec<u16>),
    /// (interval, onset of the later note) pairs.
    Pairs(Vec<(i16, u16)>),
}

impl GramItems {
    pub fn len(&self) -> usize {
        match self {
            GramItems::Intervals(v) => v.len(),
            GramItems::Onsets(v) => v.len(),
            GramItems::Pairs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn window(&self, start: usize, len: usize) -> GramItems {
        match self {
            GramItems::Intervals(v) => GramItems::Intervals(v[start..start + len].to_vec()),
            GramItems::Onsets(v) => GramItems::Onsets(v[start..start + len].to_vec()),
            GramItems::Pairs(v) => GramItems::Pairs(v[start..start + len].to_vec()),
        }
    }
}

impl fmt::Display for GramItems {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        let mut sep = |f: &mut fmt::Formatter<'_>| -> fmt::Result {
            if !first {
                f.write_str(" ")?;
            }
            first = false;
            Ok(())
        };
        match self {
            GramItems::Intervals(v) => {
                for x in v {
                    sep(f)?;
                    write!(f, "{x}")?;
                }
            }
            GramItems::Onsets(v) => {
                for x in v {
                    sep(f)?;
                    write!(f, "{x}")?;
                }
            }
            GramItems::Pairs(v) => {
                for (i, o) in v {
                    sep(f)?;
                    write!(f, "{i}:{o}")?;
                }
            }
        }
        Ok(())
    }
}

/// One melodic n-gram.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NGram {
    pub dimension: Dimension,
    pub degree: u8,
    pub items: GramItems,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconEntry {
    pub ngram: NGram,
    pub frequency: u64,
    pub relative_frequency: f64,
    pub t_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LexiconMeta {
    pub corpus_hash: u64,
    pub n_max: u8,
    pub top_ratio: f64,
}

/// Per-bucket counting denominators kept for reproducibility.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BucketStats {
    pub total: u64,
    pub distinct: u64,
}

/// The mined lexicon: scored top grams per (dimension, degree >= 3)
/// bucket, plus the degree-2 frequency tables that served as the null
/// model. Immutable after build; queries are read-only.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub meta: LexiconMeta,
    entries: BTreeMap<(Dimension, u8), Vec<LexiconEntry>>,
    index: HashMap<(Dimension, u8), HashSet<GramItems>>,
    bigrams: BTreeMap<Dimension, HashMap<GramItems, u64>>,
    stats: BTreeMap<(Dimension, u8), BucketStats>,
}

impl Lexicon {
    pub fn is_empty(&self) -> bool {
        self.entries.values().all(Vec::is_empty)
    }

    pub fn entries(&self, dimension: Dimension, degree: u8) -> &[LexiconEntry] {
        self.entries.get(&(dimension, degree)).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn all_entries(&self) -> impl Iterator<Item = &LexiconEntry> {
        self.entries.values().flatten()
    }

    pub fn contains(&self, dimension: Dimension, degree: u8, items: &GramItems) -> bool {
        self.index.get(&(dimension, degree)).is_some_and(|s| s.contains(items))
    }

    pub fn bigram_frequency(&self, dimension: Dimension, items: &GramItems) -> u64 {
        self.bigrams.get(&dimension).and_then(|m| m.get(items)).copied().unwrap_or(0)
    }

    pub fn bucket_stats(&self, dimension: Dimension, degree: u8) -> BucketStats {
        self.stats.get(&(dimension, degree)).copied().unwrap_or_default()
    }
}

/// Split a melody into runs (broken where the rest between consecutive
/// notes exceeds one bar) and project each run into the given dimension.
pub fn relative_projection(m: &MelodySequence, dimension: Dimension) -> Vec<GramItems> {
    note_runs(m)
        .into_iter()
        .map(|run| project_notes(&run, dimension))
        .collect()
}

/// (pitch, onset) per note, split into runs at rests longer than one bar.
fn note_runs(m: &MelodySequence) -> Vec<Vec<(u8, u64)>> {
    let mut runs = Vec::new();
    let mut current: Vec<(u8, u64)> = Vec::new();
    for (i, n) in m.notes.iter().enumerate() {
        if i > 0 {
            let rest = n.onset.saturating_sub(m.notes[i - 1].end());
            if rest > u64::from(TICKS_PER_BAR) {
                runs.push(std::mem::take(&mut current));
            }
        }
        current.push((n.pitch, n.onset));
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

fn in_bar(onset: u64) -> u16 {
    (onset % u64::from(TICKS_PER_BAR)) as u16
}

/// Project a window of notes into gram items.
pub fn project_notes(notes: &[(u8, u64)], dimension: Dimension) -> GramItems {
    match dimension {
        Dimension::Pitch => GramItems::Intervals(
            notes.windows(2).map(|w| i16::from(w[1].0) - i16::from(w[0].0)).collect(),
        ),
        Dimension::Rhythm => GramItems::Onsets(notes.iter().map(|&(_, o)| in_bar(o)).collect()),
        Dimension::Combined => GramItems::Pairs(
            notes
                .windows(2)
                .map(|w| (i16::from(w[1].0) - i16::from(w[0].0), in_bar(w[1].1)))
                .collect(),
        ),
    }
}

/// All contiguous item windows of length `window` over a projected run.
pub fn extract_ngrams(run: &GramItems, window: usize) -> Vec<GramItems> {
    if window == 0 || run.len() < window {
        return Vec::new();
    }
    (0..=run.len() - window).map(|s| run.window(s, window)).collect()
}

/// t-statistic of an observed gram frequency `p_s` against the null
/// probability `p_null`, with `n_k` distinct grams in the bucket:
/// `(p_s - p_null) / sqrt(p_s (1 - p_s) / n_k)`.
pub fn t_statistic(p_s: f64, p_null: f64, n_k: u64) -> f64 {
    (p_s - p_null) / (p_s * (1.0 - p_s) / n_k as f64).sqrt()
}

/// Null probability of a gram: the product of the relative frequencies
/// of its k-1 constituent 2-grams. A missing constituent yields 0.
pub fn null_probability(
    items: &GramItems,
    bigrams: &HashMap<GramItems, u64>,
    bigram_total: u64,
) -> f64 {
    let window = match items {
        GramItems::Intervals(_) | GramItems::Pairs(_) => 1,
        GramItems::Onsets(_) => 2,
    };
    let mut p = 1.0;
    for constituent in extract_ngrams(items, window) {
        match bigrams.get(&constituent) {
            Some(&c) if bigram_total > 0 => p *= c as f64 / bigram_total as f64,
            _ => return 0.0,
        }
    }
    p
}

/// Stable hash of a corpus: the note content of every melody in order.
pub fn corpus_hash(corpus: &[MelodySequence]) -> u64 {
    let mut h = StableHasher::new(0x1e78);
    for m in corpus {
        h.write_u64(m.notes.len() as u64);
        for n in &m.notes {
            h.write_u64(n.onset);
            h.write_u64(u64::from(n.duration));
            h.write_u64(u64::from(n.pitch));
        }
    }
    h.finish()
}

/// Mine the lexicon: count every k-gram (k = 2..=n_max) per dimension
/// corpus-wide, score degrees >= 3 with [`t_statistic`] against
/// [`null_probability`], and keep the top `ceil(top_ratio * distinct)`
/// per bucket (ties broken by item order). Deterministic for a given
/// corpus order.
pub fn build_lexicon(corpus: &[MelodySequence], n_max: u8, top_ratio: f64) -> Lexicon {
    assert!(n_max >= 2, "n_max must be at least 2");
    assert!(top_ratio > 0.0 && top_ratio <= 1.0, "top_ratio must lie in (0, 1]");

    // Count per melody in parallel, then merge; counts are exact so the
    // merge order cannot matter.
    type Buckets = HashMap<(Dimension, u8), HashMap<GramItems, u64>>;
    let counts: Buckets = corpus
        .par_iter()
        .fold(Buckets::default, |mut acc, m| {
            for dimension in Dimension::ALL {
                for run in relative_projection(m, dimension) {
                    for k in 2..=n_max {
                        let window = dimension.items_for_degree(usize::from(k));
                        for gram in extract_ngrams(&run, window) {
                            *acc.entry((dimension, k)).or_default().entry(gram).or_insert(0) += 1;
                        }
                    }
                }
            }
            acc
        })
        .reduce(Buckets::default, |mut a, b| {
            for (bucket, m) in b {
                let target = a.entry(bucket).or_default();
                for (gram, c) in m {
                    *target.entry(gram).or_insert(0) += c;
                }
            }
            a
        });

    let mut stats = BTreeMap::new();
    for (&(dimension, k), bucket) in &counts {
        stats.insert(
            (dimension, k),
            BucketStats {
                total: bucket.values().sum(),
                distinct: bucket.len() as u64,
            },
        );
    }

    let mut bigrams: BTreeMap<Dimension, HashMap<GramItems, u64>> = BTreeMap::new();
    for dimension in Dimension::ALL {
        bigrams.insert(
            dimension,
            counts.get(&(dimension, 2)).cloned().unwrap_or_default(),
        );
    }

    let mut entries: BTreeMap<(Dimension, u8), Vec<LexiconEntry>> = BTreeMap::new();
    let mut index: HashMap<(Dimension, u8), HashSet<GramItems>> = HashMap::new();
    for dimension in Dimension::ALL {
        let bigram_table = &bigrams[&dimension];
        let bigram_total = stats.get(&(dimension, 2)).map(|s| s.total).unwrap_or(0);
        for k in 3..=n_max {
            let Some(bucket) = counts.get(&(dimension, k)) else { continue };
            let BucketStats { total, distinct } = stats[&(dimension, k)];
            let mut scored: Vec<LexiconEntry> = bucket
                .iter()
                .filter_map(|(items, &frequency)| {
                    let p_s = frequency as f64 / total as f64;
                    if p_s >= 1.0 {
                        warn!(
                            "{dimension} {k}-gram is the only one in its bucket; \
                             variance undefined, excluded from lexicon"
                        );
                        return None;
                    }
                    let p_null = null_probability(items, bigram_table, bigram_total);
                    Some(LexiconEntry {
                        ngram: NGram { dimension, degree: k, items: items.clone() },
                        frequency,
                        relative_frequency: p_s,
                        t_score: t_statistic(p_s, p_null, distinct),
                    })
                })
                .collect();
            scored.sort_by(|a, b| {
                b.t_score.total_cmp(&a.t_score).then_with(|| a.ngram.items.cmp(&b.ngram.items))
            });
            let keep = ((top_ratio * distinct as f64).ceil() as usize).min(scored.len());
            scored.truncate(keep);
            index.insert(
                (dimension, k),
                scored.iter().map(|e| e.ngram.items.clone()).collect(),
            );
            entries.insert((dimension, k), scored);
        }
    }

    Lexicon {
        meta: LexiconMeta { corpus_hash: corpus_hash(corpus), n_max, top_ratio },
        entries,
        index,
        bigrams,
        stats,
    }
}

/// A span of consecutive notes (note indices, not token indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteSpan {
    pub start: usize,
    pub len: usize,
}

/// Greedy maximum matching: scan the note subsequence left to right and
/// at each note try degrees n_max down to 3 against the lexicon; on a
/// match emit the span and continue after it. Matches never straddle a
/// run break.
pub fn max_match(t: &TokenSequence, lexicon: &Lexicon, dimension: Dimension) -> Vec<NoteSpan> {
    let melody = crate::tokens::decode(t);
    let runs = note_runs(&melody);

    let mut spans = Vec::new();
    let mut note_base = 0usize;
    for run in runs {
        let n = run.len();
        let mut i = 0usize;
        while i < n {
            let mut matched = false;
            let max_k = usize::from(lexicon.meta.n_max).min(n - i);
            for k in (3..=max_k).rev() {
                let items = project_notes(&run[i..i + k], dimension);
                if lexicon.contains(dimension, k as u8, &items) {
                    spans.push(NoteSpan { start: note_base + i, len: k });
                    i += k;
                    matched = true;
                    break;
                }
            }
            if !matched {
                i += 1;
            }
        }
        note_base += n;
    }
    spans
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum LexiconFileError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed lexicon file {path} (line {line}): {reason}")]
    Malformed { path: PathBuf, line: usize, reason: String },
}

/// Save as a line-oriented UTF-8 file: header comments carry the corpus
/// hash, n_max, top_ratio and per-bucket denominators; each record line
/// is `dimension degree items... frequency t_score` (degree-2 null-model
/// records carry `-` in place of a score).
pub fn save_lexicon(lexicon: &Lexicon, path: &Path) -> Result<(), LexiconFileError> {
    let mut out = String::new();
    out.push_str("# melodic-ngram-lexicon v1\n");
    out.push_str(&format!("# corpus_hash {:016x}\n", lexicon.meta.corpus_hash));
    out.push_str(&format!("# n_max {}\n", lexicon.meta.n_max));
    out.push_str(&format!("# top_ratio {}\n", lexicon.meta.top_ratio));
    out.push_str("# tie_break lexicographic\n");
    for (&(dimension, degree), s) in &lexicon.stats {
        out.push_str(&format!("# bucket {dimension} {degree} {} {}\n", s.total, s.distinct));
    }
    for dimension in Dimension::ALL {
        let mut grams: Vec<(&GramItems, u64)> =
            lexicon.bigrams[&dimension].iter().map(|(g, &c)| (g, c)).collect();
        grams.sort_by(|a, b| a.0.cmp(b.0));
        for (items, frequency) in grams {
            out.push_str(&format!("{dimension} 2 {items} {frequency} -\n"));
        }
    }
    for bucket in lexicon.entries.values() {
        for e in bucket {
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                e.ngram.dimension, e.ngram.degree, e.ngram.items, e.frequency, e.t_score
            ));
        }
    }
    fs::write(path, out).map_err(|source| LexiconFileError::Io { path: path.to_path_buf(), source })
}

pub fn load_lexicon(path: &Path) -> Result<Lexicon, LexiconFileError> {
    let text = fs::read_to_string(path)
        .map_err(|source| LexiconFileError::Io { path: path.to_path_buf(), source })?;
    let bad = |line: usize, reason: &str| LexiconFileError::Malformed {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };

    let mut meta = LexiconMeta { corpus_hash: 0, n_max: 0, top_ratio: 0.0 };
    let mut stats = BTreeMap::new();
    let mut bigrams: BTreeMap<Dimension, HashMap<GramItems, u64>> =
        Dimension::ALL.iter().map(|&d| (d, HashMap::new())).collect();
    let mut entries: BTreeMap<(Dimension, u8), Vec<LexiconEntry>> = BTreeMap::new();
    let mut index: HashMap<(Dimension, u8), HashSet<GramItems>> = HashMap::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            let fields: Vec<&str> = rest.split_whitespace().collect();
            match fields.as_slice() {
                ["corpus_hash", v] => {
                    meta.corpus_hash = u64::from_str_radix(v, 16)
                        .map_err(|_| bad(lineno, "bad corpus hash"))?;
                }
                ["n_max", v] => {
                    meta.n_max = v.parse().map_err(|_| bad(lineno, "bad n_max"))?;
                }
                ["top_ratio", v] => {
                    meta.top_ratio = v.parse().map_err(|_| bad(lineno, "bad top_ratio"))?;
                }
                ["bucket", d, k, total, distinct] => {
                    let dimension =
                        Dimension::from_str(d).map_err(|_| bad(lineno, "bad dimension"))?;
                    let degree: u8 = k.parse().map_err(|_| bad(lineno, "bad degree"))?;
                    stats.insert(
                        (dimension, degree),
                        BucketStats {
                            total: total.parse().map_err(|_| bad(lineno, "bad total"))?,
                            distinct: distinct.parse().map_err(|_| bad(lineno, "bad distinct"))?,
                        },
                    );
                }
                _ => {}
            }
            continue;
        }

        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() < 4 {
            return Err(bad(lineno, "expected dimension degree items freq score"));
        }
        let dimension = Dimension::from_str(fields[0]).map_err(|_| bad(lineno, "bad dimension"))?;
        let degree: u8 = fields[1].parse().map_err(|_| bad(lineno, "bad degree"))?;
        let n_items = dimension.items_for_degree(usize::from(degree));
        if fields.len() != 2 + n_items + 2 {
            return Err(bad(lineno, "wrong item count for degree"));
        }
        let item_fields = &fields[2..2 + n_items];
        let items = parse_items(dimension, item_fields).ok_or_else(|| bad(lineno, "bad items"))?;
        let frequency: u64 =
            fields[2 + n_items].parse().map_err(|_| bad(lineno, "bad frequency"))?;
        let score_field = fields[3 + n_items];

        if degree == 2 {
            bigrams.get_mut(&dimension).unwrap().insert(items, frequency);
        } else {
            let t_score: f64 = score_field.parse().map_err(|_| bad(lineno, "bad t_score"))?;
            let total = stats
                .get(&(dimension, degree))
                .map(|s: &BucketStats| s.total)
                .ok_or_else(|| bad(lineno, "entry without bucket header"))?;
            index.entry((dimension, degree)).or_default().insert(items.clone());
            entries.entry((dimension, degree)).or_default().push(LexiconEntry {
                ngram: NGram { dimension, degree, items },
                frequency,
                relative_frequency: frequency as f64 / total as f64,
                t_score,
            });
        }
    }

    for bucket in entries.values_mut() {
        bucket.sort_by(|a, b| {
            b.t_score.total_cmp(&a.t_score).then_with(|| a.ngram.items.cmp(&b.ngram.items))
        });
    }

    Ok(Lexicon { meta, entries, index, bigrams, stats })
}

fn parse_items(dimension: Dimension, fields: &[&str]) -> Option<GramItems> {
    match dimension {
        Dimension::Pitch => Some(GramItems::Intervals(
            fields.iter().map(|f| f.parse().ok()).collect::<Option<Vec<i16>>>()?,
        )),
        Dimension::Rhythm => Some(GramItems::Onsets(
            fields.iter().map(|f| f.parse().ok()).collect::<Option<Vec<u16>>>()?,
        )),
        Dimension::Combined => Some(GramItems::Pairs(
            fields
                .iter()
                .map(|f| {
                    let (a, b) = f.split_once(':')?;
                    Some((a.parse().ok()?, b.parse().ok()?))
                })
                .collect::<Option<Vec<(i16, u16)>>>()?,
        )),
    }
}
