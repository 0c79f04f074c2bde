//! Corpus construction: melody-track extraction, mixed-grid quantization,
//! heuristic filtering and transposition-invariant deduplication.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use thiserror::Error;
use walkdir::WalkDir;

use crate::midi::{self, RawSong};
use crate::stablehash::StableHasher;
use crate::TICKS_PER_BAR;

/// One note: MIDI pitch, onset in ticks from piece start, duration in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u32,
}

impl NoteEvent {
    pub fn end(&self) -> u64 {
        self.onset + u64::from(self.duration)
    }

    pub fn bar(&self) -> u64 {
        self.onset / u64::from(TICKS_PER_BAR)
    }
}

/// A monophonic 4/4 melody: notes sorted by onset, non-overlapping.
#[derive(Debug, Clone, PartialEq)]
pub struct MelodySequence {
    pub tempo_bpm: f64,
    pub notes: Vec<NoteEvent>,
}

/// Straight grid step (64th note) and the triplet grids of the mixed
/// quantization scheme.
pub const STRAIGHT_STEP: u32 = 30;
pub const TRIPLET_STEP: u32 = 40;

/// Legal duration symbols: 64th-note multiples up to one bar, plus the
/// five triplet durations.
pub fn duration_values() -> Vec<u32> {
    let mut v: Vec<u32> = (1..=64).map(|k| k * STRAIGHT_STEP).collect();
    v.extend_from_slice(&[40, 80, 160, 320, 640]);
    v.sort_unstable();
    v.dedup();
    v
}

/// Heuristic corpus filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FilterRule {
    /// At least 32 notes.
    R1,
    /// At least 8 non-empty bars covering more than 70% of all bars.
    R2,
    /// No run of identical consecutive pitches longer than 10.
    R3,
    /// More than 5 distinct pitch classes.
    R4,
}

impl fmt::Display for FilterRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FilterRule::R1 => "R1",
            FilterRule::R2 => "R2",
            FilterRule::R3 => "R3",
            FilterRule::R4 => "R4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterVerdict {
    pub failed_rules: Vec<FilterRule>,
}

impl FilterVerdict {
    pub fn accepted(&self) -> bool {
        self.failed_rules.is_empty()
    }
}

/// Minimum fraction of non-overlapping notes for a track to count as a
/// melody candidate.
const MONOPHONIC_COVERAGE: f64 = 0.9;

/// Pick the melody track of a parsed song and flatten it to a monophonic
/// line. Among non-percussion tracks with at least 90% monophonic note
/// coverage, the one with the highest mean pitch wins. Returns `None`
/// when the song is not in 4/4 or no track qualifies.
///
/// Overlap resolution: notes sharing an onset keep only the highest
/// pitch; a note overlapping its successor is truncated at the
/// successor's onset.
pub fn extract_melody_track(song: &RawSong) -> Option<MelodySequence> {
    if !song.is_four_four() {
        return None;
    }
    let best = song
        .tracks
        .iter()
        .filter(|t| !t.is_percussion() && !t.notes.is_empty())
        .filter(|t| monophonic_coverage(&t.notes) >= MONOPHONIC_COVERAGE)
        .max_by(|a, b| {
            mean_pitch(&a.notes)
                .total_cmp(&mean_pitch(&b.notes))
                .then(b.track_index.cmp(&a.track_index))
                .then(b.channel.cmp(&a.channel))
        })?;

    let mut notes = best.notes.clone();
    // Among simultaneous notes keep the highest pitch.
    notes.sort_by_key(|n| (n.onset, std::cmp::Reverse(n.pitch)));
    notes.dedup_by_key(|n| n.onset);
    // Truncate notes that run past the next onset.
    for i in 0..notes.len().saturating_sub(1) {
        let next_onset = notes[i + 1].onset;
        if notes[i].end() > next_onset {
            notes[i].duration = (next_onset - notes[i].onset) as u32;
        }
    }
    notes.retain(|n| n.duration > 0);
    if notes.is_empty() {
        return None;
    }
    Some(MelodySequence { tempo_bpm: song.tempo_bpm, notes })
}

fn mean_pitch(notes: &[NoteEvent]) -> f64 {
    notes.iter().map(|n| f64::from(n.pitch)).sum::<f64>() / notes.len() as f64
}

fn monophonic_coverage(notes: &[NoteEvent]) -> f64 {
    if notes.len() < 2 {
        return 1.0;
    }
    let mut sorted: Vec<&NoteEvent> = notes.iter().collect();
    sorted.sort_by_key(|n| (n.onset, n.pitch));
    let overlaps = sorted
        .windows(2)
        .filter(|w| w[0].end() > w[1].onset)
        .count();
    1.0 - overlaps as f64 / (notes.len() - 1) as f64
}

fn snap(value: u64, step: u32) -> u64 {
    let step = u64::from(step);
    (value + step / 2) / step * step
}

/// Snap one onset to the nearer of the straight (30-tick) and triplet
/// (40-tick) grids; ties go to the straight grid.
pub fn snap_onset(onset: u64) -> u64 {
    let straight = snap(onset, STRAIGHT_STEP);
    let triplet = snap(onset, TRIPLET_STEP);
    if onset.abs_diff(triplet) < onset.abs_diff(straight) {
        triplet
    } else {
        straight
    }
}

/// Snap a duration to the nearest legal duration symbol (ties prefer the
/// straight grid, matching `snap_onset`).
pub fn snap_duration(duration: u32) -> u32 {
    let straight = snap(u64::from(duration), STRAIGHT_STEP)
        .clamp(u64::from(STRAIGHT_STEP), u64::from(TICKS_PER_BAR)) as u32;
    let triplet = *[40u32, 80, 160, 320, 640]
        .iter()
        .min_by_key(|&&t| (duration.abs_diff(t), t))
        .unwrap();
    if duration.abs_diff(triplet) < duration.abs_diff(straight) {
        triplet
    } else {
        straight
    }
}

/// Mixed-precision quantization: every onset and duration is snapped to
/// the closer of the straight and triplet grids, then monophony is
/// restored (durations shortened to the next onset, simultaneous notes
/// reduced to the highest pitch). Idempotent.
pub fn quantize(m: &MelodySequence) -> MelodySequence {
    let mut notes: Vec<NoteEvent> = m
        .notes
        .iter()
        .map(|n| NoteEvent {
            pitch: n.pitch,
            onset: snap_onset(n.onset),
            duration: snap_duration(n.duration),
        })
        .collect();
    notes.sort_by_key(|n| (n.onset, std::cmp::Reverse(n.pitch)));
    notes.dedup_by_key(|n| n.onset);
    // Snapping can squeeze neighbours closer than the shortest legal
    // duration; such an earlier note has nowhere to live and is dropped.
    let mut fixed: Vec<NoteEvent> = Vec::with_capacity(notes.len());
    for n in notes {
        while let Some(last) = fixed.last() {
            if n.onset - last.onset < u64::from(STRAIGHT_STEP) {
                fixed.pop();
            } else {
                break;
            }
        }
        fixed.push(n);
    }
    let mut notes = fixed;
    for i in 0..notes.len().saturating_sub(1) {
        let gap = notes[i + 1].onset - notes[i].onset;
        if u64::from(notes[i].duration) > gap {
            // Largest legal duration that still fits the gap.
            let fitted = duration_values()
                .into_iter()
                .rev()
                .find(|&d| u64::from(d) <= gap)
                .expect("gap is at least one straight step");
            notes[i].duration = fitted;
        }
    }
    MelodySequence { tempo_bpm: m.tempo_bpm, notes }
}

/// Apply filter rules R1-R4.
pub fn filter_melody(m: &MelodySequence) -> FilterVerdict {
    let mut failed = Vec::new();

    if m.notes.len() < 32 {
        failed.push(FilterRule::R1);
    }

    let total_bars = m.notes.last().map(|n| n.bar() + 1).unwrap_or(0);
    let mut non_empty: Vec<u64> = m.notes.iter().map(|n| n.bar()).collect();
    non_empty.dedup();
    let non_empty = non_empty.len() as u64;
    if non_empty < 8 || (non_empty as f64) <= 0.7 * total_bars as f64 {
        failed.push(FilterRule::R2);
    }

    let mut run = 0usize;
    let mut longest_run = 0usize;
    let mut prev_pitch = None;
    for n in &m.notes {
        if prev_pitch == Some(n.pitch) {
            run += 1;
        } else {
            run = 1;
            prev_pitch = Some(n.pitch);
        }
        longest_run = longest_run.max(run);
    }
    if longest_run > 10 {
        failed.push(FilterRule::R3);
    }

    let mut classes = [false; 12];
    for n in &m.notes {
        classes[usize::from(n.pitch % 12)] = true;
    }
    if classes.iter().filter(|&&c| c).count() <= 5 {
        failed.push(FilterRule::R4);
    }

    FilterVerdict { failed_rules: failed }
}

/// Transposition-invariant 64-bit key: a stable hash of the signed pitch
/// interval sequence. The seed is fixed in the corpus configuration so
/// manifests reproduce across runs and platforms.
pub fn dedup_key(m: &MelodySequence, seed: u64) -> u64 {
    let mut h = StableHasher::new(seed);
    for w in m.notes.windows(2) {
        h.write_i64(i64::from(w[1].pitch) - i64::from(w[0].pitch));
    }
    h.finish()
}

/// Shift all pitches by `semitones`; `None` when any pitch would leave
/// the MIDI range.
pub fn transpose(m: &MelodySequence, semitones: i8) -> Option<MelodySequence> {
    let mut out = m.clone();
    for n in &mut out.notes {
        let p = i16::from(n.pitch) + i16::from(semitones);
        if !(0..=127).contains(&p) {
            return None;
        }
        n.pitch = p as u8;
    }
    Some(out)
}

// ---------------------------------------------------------------------------
// Corpus building
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("input directory {0} does not exist")]
    MissingInput(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed note file {path} (line {line}): {reason}")]
    BadNoteFile { path: PathBuf, line: usize, reason: String },
}

/// Outcome of one input file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileStatus {
    Accepted,
    Rejected(Vec<FilterRule>),
    Duplicate,
    NoMelody,
    Error(String),
}

impl fmt::Display for FileStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FileStatus::Accepted => write!(f, "accepted"),
            FileStatus::Rejected(_) => write!(f, "rejected"),
            FileStatus::Duplicate => write!(f, "duplicate"),
            FileStatus::NoMelody => write!(f, "no_melody"),
            FileStatus::Error(_) => write!(f, "error"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub inputs: usize,
    pub accepted: usize,
    pub duplicates: usize,
    pub no_melody: usize,
    pub errors: usize,
    /// Files rejected by at least one rule.
    pub rejected: usize,
    pub rejected_by_rule: BTreeMap<String, usize>,
}

/// Seed for dedup keys; fixed so corpus manifests are reproducible.
pub const DEDUP_SEED: u64 = 0x6d656c6f_64795f76;

/// Run the full pipeline over every `.mid`/`.midi` file under
/// `input_dir`: parse, extract, quantize, filter, deduplicate. Accepted
/// melodies are written as note files into `out_dir` next to a
/// `manifest.txt` with one record per input. Deterministic and
/// idempotent for identical inputs.
pub fn build_corpus(input_dir: &Path, out_dir: &Path) -> Result<CorpusStats, CorpusError> {
    if !input_dir.is_dir() {
        return Err(CorpusError::MissingInput(input_dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = WalkDir::new(input_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("mid") | Some("midi")
            )
        })
        .collect();
    files.sort();

    type Processed = (PathBuf, Result<(u64, MelodySequence), FileStatus>);
    let processed: Vec<Processed> = files
        .par_iter()
        .map(|path| {
            let outcome = process_file(path);
            (path.clone(), outcome)
        })
        .collect();

    fs::create_dir_all(out_dir)
        .map_err(|source| CorpusError::Io { path: out_dir.to_path_buf(), source })?;

    // Sequential merge in path order: first occurrence of a key wins.
    let mut seen_keys: BTreeMap<u64, PathBuf> = BTreeMap::new();
    let mut stats = CorpusStats::default();
    let mut records: Vec<String> = Vec::new();
    for (path, outcome) in processed {
        stats.inputs += 1;
        let (status, key) = match outcome {
            Ok((key, melody)) => {
                if let std::collections::btree_map::Entry::Vacant(e) = seen_keys.entry(key) {
                    e.insert(path.clone());
                    let name = format!("{:03}_{key:016x}.notes", stats.accepted);
                    write_note_file(&out_dir.join(name), &melody)?;
                    stats.accepted += 1;
                    (FileStatus::Accepted, Some(key))
                } else {
                    stats.duplicates += 1;
                    (FileStatus::Duplicate, Some(key))
                }
            }
            Err(status) => {
                match &status {
                    FileStatus::Rejected(rules) => {
                        stats.rejected += 1;
                        for r in rules {
                            *stats.rejected_by_rule.entry(r.to_string()).or_insert(0) += 1;
                        }
                    }
                    FileStatus::NoMelody => stats.no_melody += 1,
                    FileStatus::Error(msg) => {
                        warn!("skipping {}: {msg}", path.display());
                        stats.errors += 1;
                    }
                    _ => unreachable!(),
                }
                (status, None)
            }
        };
        let rules = match &status {
            FileStatus::Rejected(rules) => {
                rules.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
            }
            _ => String::from("-"),
        };
        let key = key.map(|k| format!("{k:016x}")).unwrap_or_else(|| "-".into());
        let rel = path.strip_prefix(input_dir).unwrap_or(&path);
        records.push(format!("{}\t{status}\t{key}\t{rules}", rel.display()));
    }

    let manifest_path = out_dir.join("manifest.txt");
    let mut manifest = String::new();
    manifest.push_str(&format!("# inputs {}\n", stats.inputs));
    manifest.push_str(&format!("# accepted {}\n", stats.accepted));
    manifest.push_str(&format!("# duplicates {}\n", stats.duplicates));
    manifest.push_str(&format!("# no_melody {}\n", stats.no_melody));
    manifest.push_str(&format!("# errors {}\n", stats.errors));
    manifest.push_str(&format!("# rejected_total {}\n", stats.rejected));
    for (rule, count) in &stats.rejected_by_rule {
        manifest.push_str(&format!("# rejected {rule} {count}\n"));
    }
    for r in &records {
        manifest.push_str(r);
        manifest.push('\n');
    }
    fs::write(&manifest_path, manifest)
        .map_err(|source| CorpusError::Io { path: manifest_path, source })?;

    Ok(stats)
}

fn process_file(path: &Path) -> Result<(u64, MelodySequence), FileStatus> {
    let bytes = fs::read(path).map_err(|e| FileStatus::Error(e.to_string()))?;
    let song = midi::parse_midi(&bytes).map_err(|e| FileStatus::Error(e.to_string()))?;
    let melody = extract_melody_track(&song).ok_or(FileStatus::NoMelody)?;
    let melody = quantize(&melody);
    let verdict = filter_melody(&melody);
    if !verdict.accepted() {
        return Err(FileStatus::Rejected(verdict.failed_rules));
    }
    Ok((dedup_key(&melody, DEDUP_SEED), melody))
}

/// Write one melody in the line-oriented note format:
/// a `tempo` header then `onset,duration,pitch` per line.
pub fn write_note_file(path: &Path, m: &MelodySequence) -> Result<(), CorpusError> {
    let mut out = String::new();
    out.push_str(&format!("tempo {}\n", m.tempo_bpm));
    for n in &m.notes {
        out.push_str(&format!("{},{},{}\n", n.onset, n.duration, n.pitch));
    }
    let mut f = fs::File::create(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    f.write_all(out.as_bytes())
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

/// Parse a note file written by [`write_note_file`].
pub fn read_note_file(path: &Path) -> Result<MelodySequence, CorpusError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let bad = |line: usize, reason: &str| CorpusError::BadNoteFile {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    let tempo_bpm: f64 = header
        .strip_prefix("tempo ")
        .and_then(|t| t.parse().ok())
        .filter(|t| *t > 0.0)
        .ok_or_else(|| bad(1, "expected `tempo <bpm>` header"))?;
    let mut notes = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let onset = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(i + 1, "bad onset"))?;
        let duration = parts
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| bad(i + 1, "bad duration"))?;
        let pitch = parts
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|p| *p <= 127)
            .ok_or_else(|| bad(i + 1, "bad pitch"))?;
        if parts.next().is_some() {
            return Err(bad(i + 1, "trailing fields"));
        }
        notes.push(NoteEvent { pitch, onset, duration });
    }
    Ok(MelodySequence { tempo_bpm, notes })
}

/// Load every `.notes` file under a directory, sorted by path.
pub fn load_corpus(dir: &Path) -> Result<Vec<MelodySequence>, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::MissingInput(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("notes"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_note_file(p)).collect()
}
