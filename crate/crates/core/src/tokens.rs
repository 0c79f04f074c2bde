//! Compound token representation.
//!
//! Each note becomes a single token bundling tempo class, bar index,
//! in-bar position, pitch and duration. Special tokens carry the same
//! symbol in all five fields. `<SEG>` marks detected phrase boundaries.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use log::warn;
use thiserror::Error;

use crate::corpus::{snap_duration, MelodySequence, NoteEvent};
use crate::{TICKS_PER_BAR, TICKS_PER_QUARTER};

/// The six special symbols, in vocabulary order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialKind {
    Bos,
    Eos,
    Mask,
    Pad,
    Sep,
    Seg,
}

impl SpecialKind {
    pub const ALL: [SpecialKind; 6] = [
        SpecialKind::Bos,
        SpecialKind::Eos,
        SpecialKind::Mask,
        SpecialKind::Pad,
        SpecialKind::Sep,
        SpecialKind::Seg,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            SpecialKind::Bos => "<BOS>",
            SpecialKind::Eos => "<EOS>",
            SpecialKind::Mask => "<MASK>",
            SpecialKind::Pad => "<PAD>",
            SpecialKind::Sep => "<SEP>",
            SpecialKind::Seg => "<SEG>",
        }
    }

    pub fn from_label(s: &str) -> Option<SpecialKind> {
        SpecialKind::ALL.iter().copied().find(|k| k.label() == s)
    }
}

/// The seven tempo classes with their half-open bpm intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TempoClass {
    Largo,
    Larghetto,
    Adagio,
    Andante,
    Moderato,
    Allegro,
    Presto,
}

impl TempoClass {
    pub const ALL: [TempoClass; 7] = [
        TempoClass::Largo,
        TempoClass::Larghetto,
        TempoClass::Adagio,
        TempoClass::Andante,
        TempoClass::Moderato,
        TempoClass::Allegro,
        TempoClass::Presto,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            TempoClass::Largo => "Largo",
            TempoClass::Larghetto => "Larghetto",
            TempoClass::Adagio => "Adagio",
            TempoClass::Andante => "Andante",
            TempoClass::Moderato => "Moderato",
            TempoClass::Allegro => "Allegro",
            TempoClass::Presto => "Presto",
        }
    }

    pub fn from_name(s: &str) -> Option<TempoClass> {
        TempoClass::ALL.iter().copied().find(|c| c.name() == s)
    }

    /// Canonical bpm used when a melody is reconstructed from tokens.
    /// Each value re-buckets to its own class after a round trip through
    /// the MIDI tempo encoding.
    pub fn representative_bpm(self) -> f64 {
        match self {
            TempoClass::Largo => 50.0,
            TempoClass::Larghetto => 63.0,
            TempoClass::Adagio => 71.0,
            TempoClass::Andante => 92.0,
            TempoClass::Moderato => 114.0,
            TempoClass::Allegro => 144.0,
            TempoClass::Presto => 184.0,
        }
    }
}

/// Bucket a bpm value into its tempo class.
pub fn tempo_bucket(bpm: f64) -> TempoClass {
    if bpm < 60.0 {
        TempoClass::Largo
    } else if bpm < 66.0 {
        TempoClass::Larghetto
    } else if bpm < 76.0 {
        TempoClass::Adagio
    } else if bpm < 108.0 {
        TempoClass::Andante
    } else if bpm < 120.0 {
        TempoClass::Moderato
    } else if bpm < 168.0 {
        TempoClass::Allegro
    } else {
        TempoClass::Presto
    }
}

/// In-bar onset symbols: the union of the straight and triplet grids.
pub static POSITION_VALUES: LazyLock<Vec<u16>> = LazyLock::new(|| {
    let mut v: Vec<u16> = (0..64).map(|k| k * 30).collect();
    v.extend((0..48).map(|k| k * 40));
    v.sort_unstable();
    v.dedup();
    v
});

/// Duration symbols: 64th-note multiples up to one bar plus the five
/// triplet durations (69 values; the model pads this to its embedding
/// size).
pub static DURATION_VALUES: LazyLock<Vec<u16>> = LazyLock::new(|| {
    let mut v: Vec<u16> = (1..=64).map(|k| k * 30).collect();
    v.extend_from_slice(&[40, 80, 160, 320, 640]);
    v.sort_unstable();
    v.dedup();
    v
});

pub fn position_index(position: u16) -> Option<usize> {
    POSITION_VALUES.binary_search(&position).ok()
}

pub fn duration_index(duration: u16) -> Option<usize> {
    DURATION_VALUES.binary_search(&duration).ok()
}

/// Note attributes of one compound token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoteToken {
    pub tempo: TempoClass,
    pub bar: u8,
    pub position: u16,
    pub pitch: u8,
    pub duration: u16,
}

impl NoteToken {
    pub fn onset(&self) -> u64 {
        u64::from(self.bar) * u64::from(TICKS_PER_BAR) + u64::from(self.position)
    }
}

/// One token: either five note attributes or one special symbol in all
/// five fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompoundToken {
    Note(NoteToken),
    Special(SpecialKind),
}

impl CompoundToken {
    pub fn is_note(&self) -> bool {
        matches!(self, CompoundToken::Note(_))
    }

    pub fn as_note(&self) -> Option<&NoteToken> {
        match self {
            CompoundToken::Note(n) => Some(n),
            CompoundToken::Special(_) => None,
        }
    }

    /// Bar/position identity used by the positional embeddings.
    pub fn coord(&self) -> Coord {
        match self {
            CompoundToken::Note(n) => Coord::Note { bar: n.bar, position: n.position },
            CompoundToken::Special(s) => Coord::Special(*s),
        }
    }
}

/// Positional identity of a token for the bar/position embeddings.
/// Masked positions keep the coordinates of the original token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Coord {
    Note { bar: u8, position: u16 },
    Special(SpecialKind),
}

/// An ordered token sequence. Full pieces start with `<BOS>` and end
/// with `<EOS>`; bar indices are non-decreasing across note tokens.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence(pub Vec<CompoundToken>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[CompoundToken] {
        &self.0
    }

    pub fn note_count(&self) -> usize {
        self.0.iter().filter(|t| t.is_note()).count()
    }

    /// Token indices of the note tokens, in order.
    pub fn note_indices(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, t)| t.is_note().then_some(i))
            .collect()
    }

    pub fn notes(&self) -> impl Iterator<Item = &NoteToken> {
        self.0.iter().filter_map(|t| t.as_note())
    }

    pub fn max_bar(&self) -> Option<u8> {
        self.notes().map(|n| n.bar).max()
    }
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("piece too long: note {index} falls in bar {bar} (limit 128 bars)")]
    PieceTooLong { index: usize, bar: u64 },
    #[error("note {index} has off-grid position {position}; quantize first")]
    OffGridPosition { index: usize, position: u64 },
}

/// Detect phrase-ending notes.
///
/// Candidates are (a) the longest note of each measure when it exceeds a
/// quarter note and (b) notes followed by a rest of at least an eighth
/// note. A first-note candidate survives only when its duration exceeds
/// the next candidate's by 240 ticks or more; a last-note candidate is
/// always dropped; of two candidates on adjacent notes, the later one is
/// dropped only when the earlier exceeds it by more than 240 ticks,
/// otherwise the earlier is dropped.
pub fn detect_phrase_boundaries(m: &MelodySequence) -> Vec<usize> {
    let notes = &m.notes;
    if notes.is_empty() {
        return Vec::new();
    }

    let mut candidates: BTreeSet<usize> = BTreeSet::new();

    // Longest note per measure, if longer than a quarter note.
    let mut i = 0;
    while i < notes.len() {
        let bar = notes[i].bar();
        let mut best = i;
        let mut j = i;
        while j < notes.len() && notes[j].bar() == bar {
            if notes[j].duration > notes[best].duration {
                best = j;
            }
            j += 1;
        }
        if notes[best].duration > TICKS_PER_QUARTER {
            candidates.insert(best);
        }
        i = j;
    }

    // Notes followed by a rest of at least an eighth note.
    for i in 0..notes.len() - 1 {
        if notes[i + 1].onset.saturating_sub(notes[i].end()) >= u64::from(TICKS_PER_QUARTER / 2) {
            candidates.insert(i);
        }
    }

    let mut u: Vec<usize> = candidates.into_iter().collect();
    let dur = |i: usize| i64::from(notes[i].duration);

    // A boundary on the very first note must clearly dominate the next
    // candidate to survive.
    if u.first() == Some(&0) {
        let keep = u.len() >= 2 && dur(u[0]) - dur(u[1]) >= 240;
        if !keep {
            u.remove(0);
        }
    }
    // The last note never ends a phrase early.
    if u.last() == Some(&(notes.len() - 1)) {
        u.pop();
    }
    // Collapse candidates on adjacent notes.
    let mut i = 1;
    while i < u.len() {
        if u[i] == u[i - 1] + 1 {
            if dur(u[i - 1]) - dur(u[i]) > 240 {
                u.remove(i);
            } else {
                u.remove(i - 1);
            }
        } else {
            i += 1;
        }
    }
    u
}

/// Encode a quantized melody into a token sequence: `<BOS>`, one note
/// token per note with `<SEG>` inserted after each phrase-ending note,
/// then `<EOS>`. Durations are clipped to one bar and snapped to the
/// duration symbol set.
pub fn encode(m: &MelodySequence) -> Result<TokenSequence, EncodeError> {
    let tempo = tempo_bucket(m.tempo_bpm);
    let boundaries: BTreeSet<usize> = detect_phrase_boundaries(m).into_iter().collect();
    let mut tokens = Vec::with_capacity(m.notes.len() + boundaries.len() + 2);
    tokens.push(CompoundToken::Special(SpecialKind::Bos));
    for (index, n) in m.notes.iter().enumerate() {
        let bar = n.onset / u64::from(TICKS_PER_BAR);
        if bar >= 128 {
            return Err(EncodeError::PieceTooLong { index, bar });
        }
        let position = (n.onset % u64::from(TICKS_PER_BAR)) as u16;
        if position_index(position).is_none() {
            return Err(EncodeError::OffGridPosition { index, position: u64::from(position) });
        }
        let duration = snap_duration(n.duration.min(TICKS_PER_BAR)) as u16;
        tokens.push(CompoundToken::Note(NoteToken {
            tempo,
            bar: bar as u8,
            position,
            pitch: n.pitch,
            duration,
        }));
        if boundaries.contains(&index) {
            tokens.push(CompoundToken::Special(SpecialKind::Seg));
        }
    }
    tokens.push(CompoundToken::Special(SpecialKind::Eos));
    Ok(TokenSequence(tokens))
}

/// Reconstruct a melody from tokens. `<SEG>` markers are dropped
/// (boundaries are recomputable); a missing `<EOS>` is tolerated with a
/// warning so truncated generations still decode. The tempo comes from
/// the first note token's class representative.
pub fn decode(t: &TokenSequence) -> MelodySequence {
    if !matches!(t.0.last(), Some(CompoundToken::Special(SpecialKind::Eos))) {
        warn!("token sequence does not end with <EOS>; decoding anyway");
    }
    let mut tempo_bpm = 120.0;
    let mut notes = Vec::new();
    for tok in &t.0 {
        if let CompoundToken::Note(n) = tok {
            if notes.is_empty() {
                tempo_bpm = n.tempo.representative_bpm();
            }
            notes.push(NoteEvent {
                pitch: n.pitch,
                onset: n.onset(),
                duration: u32::from(n.duration),
            });
        }
    }
    MelodySequence { tempo_bpm, notes }
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum TokenTextError {
    #[error("token {index}: expected 5 comma-separated fields")]
    FieldCount { index: usize },
    #[error("token {index}: special field mixed with note fields")]
    MixedFields { index: usize },
    #[error("token {index}: unknown {what} `{value}`")]
    BadValue { index: usize, what: &'static str, value: String },
}

/// One token per line, five comma-separated fields; special tokens spell
/// their symbol in every field. Bit-exact across platforms.
pub fn to_text(t: &TokenSequence) -> String {
    let mut out = String::new();
    for tok in &t.0 {
        match tok {
            CompoundToken::Special(s) => {
                let l = s.label();
                out.push_str(&format!("{l},{l},{l},{l},{l}\n"));
            }
            CompoundToken::Note(n) => {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    n.tempo.name(),
                    n.bar,
                    n.position,
                    n.pitch,
                    n.duration
                ));
            }
        }
    }
    out
}

pub fn from_text(text: &str) -> Result<TokenSequence, TokenTextError> {
    let mut tokens = Vec::new();
    for (index, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(TokenTextError::FieldCount { index });
        }
        let specials: Vec<Option<SpecialKind>> =
            fields.iter().map(|f| SpecialKind::from_label(f)).collect();
        if specials.iter().any(Option::is_some) {
            let first = specials[0];
            if first.is_none() || specials.iter().any(|s| *s != first) {
                return Err(TokenTextError::MixedFields { index });
            }
            tokens.push(CompoundToken::Special(first.unwrap()));
            continue;
        }
        let bad = |what: &'static str, value: &str| TokenTextError::BadValue {
            index,
            what,
            value: value.to_string(),
        };
        let tempo =
            TempoClass::from_name(fields[0]).ok_or_else(|| bad("tempo class", fields[0]))?;
        let bar: u8 = fields[1]
            .parse()
            .ok()
            .filter(|b| *b < 128)
            .ok_or_else(|| bad("bar", fields[1]))?;
        let position: u16 = fields[2]
            .parse()
            .ok()
            .filter(|p| position_index(*p).is_some())
            .ok_or_else(|| bad("position", fields[2]))?;
        let pitch: u8 = fields[3]
            .parse()
            .ok()
            .filter(|p| *p < 128)
            .ok_or_else(|| bad("pitch", fields[3]))?;
        let duration: u16 = fields[4]
            .parse()
            .ok()
            .filter(|d| duration_index(*d).is_some())
            .ok_or_else(|| bad("duration", fields[4]))?;
        tokens.push(CompoundToken::Note(NoteToken { tempo, bar, position, pitch, duration }));
    }
    Ok(TokenSequence(tokens))
}

// ---------------------------------------------------------------------------
// Model-facing vocabulary
// ---------------------------------------------------------------------------

/// The five token attributes, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attribute {
    Tempo,
    Bar,
    Position,
    Pitch,
    Duration,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::Tempo,
        Attribute::Bar,
        Attribute::Position,
        Attribute::Pitch,
        Attribute::Duration,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Error)]
#[error("{attribute:?} value out of vocabulary at token {index}")]
pub struct VocabError {
    pub attribute: Attribute,
    pub index: usize,
}

/// Mapping between token attributes and padded model vocabularies.
///
/// Value symbols occupy the low indices of each attribute's padded block
/// and the six specials are appended after it, so special ids stay put
/// regardless of how many value slots are actually used. The bar
/// embedding works modulo `bar_mod` (the token keeps the absolute bar);
/// set `bar_mod: None` to embed absolute bar indices instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub padded: [usize; 5],
    pub bar_mod: Option<u8>,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab { padded: [16, 16, 128, 256, 128], bar_mod: Some(16) }
    }
}

impl Vocab {
    /// Vocabulary size of one attribute head (padded values + specials).
    pub fn size(&self, attr: Attribute) -> usize {
        self.padded[attr.index()] + SpecialKind::ALL.len()
    }

    pub fn sizes(&self) -> [usize; 5] {
        let mut s = [0; 5];
        for a in Attribute::ALL {
            s[a.index()] = self.size(a);
        }
        s
    }

    pub fn total(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Number of real (non-padding, non-special) value ids per attribute.
    pub fn value_count(&self, attr: Attribute) -> usize {
        match attr {
            Attribute::Tempo => TempoClass::ALL.len(),
            Attribute::Bar => self.bar_mod.map(usize::from).unwrap_or(128),
            Attribute::Position => POSITION_VALUES.len(),
            Attribute::Pitch => 128,
            Attribute::Duration => DURATION_VALUES.len(),
        }
    }

    pub fn special_id(&self, attr: Attribute, kind: SpecialKind) -> usize {
        self.padded[attr.index()] + kind.index()
    }

    pub fn bar_value_id(&self, bar: u8) -> usize {
        match self.bar_mod {
            Some(m) => usize::from(bar % m),
            None => usize::from(bar),
        }
    }

    /// The five head ids of a token.
    pub fn token_ids(&self, token: &CompoundToken, index: usize) -> Result<[usize; 5], VocabError> {
        match token {
            CompoundToken::Special(s) => {
                let mut ids = [0; 5];
                for a in Attribute::ALL {
                    ids[a.index()] = self.special_id(a, *s);
                }
                Ok(ids)
            }
            CompoundToken::Note(n) => {
                let err = |attribute| VocabError { attribute, index };
                Ok([
                    n.tempo.index(),
                    self.bar_value_id(n.bar),
                    position_index(n.position).ok_or(err(Attribute::Position))?,
                    usize::from(n.pitch),
                    duration_index(n.duration).ok_or(err(Attribute::Duration))?,
                ])
            }
        }
    }

    /// Row indices into the bar and position embedding tables.
    pub fn coord_ids(&self, coord: Coord, index: usize) -> Result<(usize, usize), VocabError> {
        match coord {
            Coord::Special(s) => {
                Ok((self.special_id(Attribute::Bar, s), self.special_id(Attribute::Position, s)))
            }
            Coord::Note { bar, position } => Ok((
                self.bar_value_id(bar),
                position_index(position)
                    .ok_or(VocabError { attribute: Attribute::Position, index })?,
            )),
        }
    }

    /// Inverse of the value mapping; `None` for padding or special ids.
    pub fn value_from_id(&self, attr: Attribute, id: usize) -> Option<u16> {
        if id >= self.value_count(attr) {
            return None;
        }
        Some(match attr {
            Attribute::Tempo | Attribute::Bar | Attribute::Pitch => id as u16,
            Attribute::Position => POSITION_VALUES[id],
            Attribute::Duration => DURATION_VALUES[id],
        })
    }

    pub fn special_from_id(&self, attr: Attribute, id: usize) -> Option<SpecialKind> {
        let base = self.padded[attr.index()];
        id.checked_sub(base).and_then(|i| SpecialKind::ALL.get(i).copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn melody(notes: Vec<NoteEvent>, bpm: f64) -> MelodySequence {
        MelodySequence { tempo_bpm: bpm, notes }
    }

    #[test]
    fn tempo_bucket_interval_edges() {
        assert_eq!(tempo_bucket(59.0), TempoClass::Largo);
        assert_eq!(tempo_bucket(60.0), TempoClass::Larghetto);
        assert_eq!(tempo_bucket(100.0), TempoClass::Andante);
        assert_eq!(tempo_bucket(120.0), TempoClass::Allegro);
        assert_eq!(tempo_bucket(168.0), TempoClass::Presto);
    }

    #[test]
    fn representative_bpms_rebucket_to_their_class() {
        for class in TempoClass::ALL {
            let bpm = class.representative_bpm();
            assert_eq!(tempo_bucket(bpm), class);
            // ... and survive the MIDI microseconds-per-quarter round trip.
            let uspq = (60_000_000.0 / bpm).round();
            assert_eq!(tempo_bucket(60_000_000.0 / uspq), class);
        }
    }

    #[test]
    fn vocabulary_cardinalities_match_table() {
        assert_eq!(TempoClass::ALL.len(), 7);
        assert_eq!(POSITION_VALUES.len(), 96);
        assert_eq!(DURATION_VALUES.len(), 69);
        assert_eq!(SpecialKind::ALL.len(), 6);
        let v = Vocab::default();
        assert_eq!(v.sizes(), [22, 22, 134, 262, 134]);
        // Tokens carry the absolute bar range; only the embedding id is
        // reduced modulo 16. Disabling the reduction exposes all 128.
        let absolute = Vocab { bar_mod: None, padded: [16, 128, 128, 256, 128] };
        assert_eq!(absolute.value_count(Attribute::Bar), 128);
    }

    #[test]
    fn decode_tolerates_missing_eos() {
        let t = TokenSequence(vec![
            CompoundToken::Special(SpecialKind::Bos),
            CompoundToken::Note(NoteToken {
                tempo: TempoClass::Allegro,
                bar: 0,
                position: 0,
                pitch: 64,
                duration: 240,
            }),
        ]);
        let m = decode(&t);
        assert_eq!(m.notes.len(), 1);
    }

    #[test]
    fn encode_spec_examples() {
        let m = melody(vec![NoteEvent { pitch: 60, onset: 0, duration: 480 }], 100.0);
        let t = encode(&m).unwrap();
        assert_eq!(
            t.0[1],
            CompoundToken::Note(NoteToken {
                tempo: TempoClass::Andante,
                bar: 0,
                position: 0,
                pitch: 60,
                duration: 480,
            })
        );

        let m = melody(vec![NoteEvent { pitch: 62, onset: 1950, duration: 480 }], 100.0);
        let t = encode(&m).unwrap();
        let n = t.0[1].as_note().unwrap();
        assert_eq!((n.bar, n.position), (1, 30));

        let empty = melody(vec![], 100.0);
        let t = encode(&empty).unwrap();
        assert_eq!(
            t.0,
            vec![
                CompoundToken::Special(SpecialKind::Bos),
                CompoundToken::Special(SpecialKind::Eos)
            ]
        );
    }

    #[test]
    fn encode_rejects_long_pieces() {
        let m = melody(vec![NoteEvent { pitch: 60, onset: 128 * 1920, duration: 480 }], 100.0);
        assert!(matches!(encode(&m), Err(EncodeError::PieceTooLong { .. })));
    }

    #[test]
    fn decode_token_onset() {
        let t = TokenSequence(vec![CompoundToken::Note(NoteToken {
            tempo: TempoClass::Andante,
            bar: 2,
            position: 30,
            pitch: 60,
            duration: 480,
        })]);
        let m = decode(&t);
        assert_eq!(m.notes[0].onset, 3870);
    }

    #[test]
    fn phrase_boundary_last_note_only_candidate() {
        // Uniform quarters, last note followed by nothing: the final long
        // note is the only candidate and is dropped.
        let notes: Vec<NoteEvent> = (0..4)
            .map(|i| NoteEvent { pitch: 60, onset: i * 480, duration: 480 })
            .chain(std::iter::once(NoteEvent { pitch: 62, onset: 1920, duration: 960 }))
            .collect();
        assert!(detect_phrase_boundaries(&melody(notes, 120.0)).is_empty());
    }

    #[test]
    fn phrase_boundary_rest_candidate() {
        // Bar 1: four quarters. Bar 2: eighth note, 240-tick rest, then
        // three quarters. Only the eighth note ends a phrase.
        let mut notes: Vec<NoteEvent> =
            (0..4).map(|i| NoteEvent { pitch: 60, onset: i * 480, duration: 480 }).collect();
        notes.push(NoteEvent { pitch: 64, onset: 1920, duration: 240 });
        notes.push(NoteEvent { pitch: 65, onset: 2400, duration: 480 });
        notes.push(NoteEvent { pitch: 67, onset: 2880, duration: 480 });
        notes.push(NoteEvent { pitch: 69, onset: 3360, duration: 480 });
        assert_eq!(detect_phrase_boundaries(&melody(notes, 120.0)), vec![4]);
    }

    #[test]
    fn phrase_boundary_uniform_eighths_empty() {
        let notes: Vec<NoteEvent> =
            (0..16).map(|i| NoteEvent { pitch: 60, onset: i * 240, duration: 240 }).collect();
        assert!(detect_phrase_boundaries(&melody(notes, 120.0)).is_empty());
    }

    #[test]
    fn seg_insertion_preserves_note_subsequence() {
        let mut notes: Vec<NoteEvent> =
            (0..8).map(|i| NoteEvent { pitch: 60 + i as u8, onset: i * 480, duration: 480 }).collect();
        notes[3].duration = 960; // long note in bar 1 -> phrase boundary
        notes[4].onset = 2880;
        let m = melody(notes.clone(), 120.0);
        let t = encode(&m).unwrap();
        let decoded: Vec<u8> = t.notes().map(|n| n.pitch).collect();
        assert_eq!(decoded, notes.iter().map(|n| n.pitch).collect::<Vec<_>>());
        assert!(t.0.iter().any(|t| matches!(t, CompoundToken::Special(SpecialKind::Seg))));
    }

    #[test]
    fn text_round_trip_and_errors() {
        let m = melody(
            vec![
                NoteEvent { pitch: 60, onset: 0, duration: 480 },
                NoteEvent { pitch: 64, onset: 480, duration: 240 },
            ],
            130.0,
        );
        let t = encode(&m).unwrap();
        let text = to_text(&t);
        assert_eq!(from_text(&text).unwrap(), t);

        let err = from_text("<MASK>,0,30,60,480\n").unwrap_err();
        assert!(matches!(err, TokenTextError::MixedFields { index: 0 }));
    }

    #[test]
    fn vocab_ids_round_trip() {
        let v = Vocab::default();
        let tok = CompoundToken::Note(NoteToken {
            tempo: TempoClass::Presto,
            bar: 37,
            position: 1880,
            pitch: 127,
            duration: 640,
        });
        let ids = v.token_ids(&tok, 0).unwrap();
        assert_eq!(ids[1], 37 % 16);
        assert_eq!(v.value_from_id(Attribute::Position, ids[2]), Some(1880));
        assert_eq!(v.value_from_id(Attribute::Duration, ids[4]), Some(640));
        let sep = v.special_id(Attribute::Pitch, SpecialKind::Sep);
        assert_eq!(v.special_from_id(Attribute::Pitch, sep), Some(SpecialKind::Sep));
        assert_eq!(v.value_from_id(Attribute::Pitch, sep), None);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            pitches in proptest::collection::vec(1u8..127, 1..60),
            raw_onsets in proptest::collection::vec(0u64..100_000, 60),
            raw_durs in proptest::collection::vec(1u32..2500, 60),
        ) {
            let notes: Vec<NoteEvent> = pitches
                .iter()
                .zip(&raw_onsets)
                .zip(&raw_durs)
                .map(|((&p, &o), &d)| NoteEvent { pitch: p, onset: o, duration: d })
                .collect();
            let mut m = melody(notes, 97.0);
            m.notes.sort_by_key(|n| n.onset);
            let q = crate::corpus::quantize(&m);
            let t = encode(&q).unwrap();
            let back = decode(&t);
            prop_assert_eq!(&back.notes, &q.notes);
            prop_assert_eq!(tempo_bucket(back.tempo_bpm), tempo_bucket(q.tempo_bpm));
            // Encoded positions always lie in the position symbol set.
            for n in t.notes() {
                prop_assert!(position_index(n.position).is_some());
            }
        }
    }
}
