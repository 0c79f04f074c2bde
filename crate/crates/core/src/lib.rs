//! Symbolic melody modeling toolkit.
//!
//! The crate covers the full path from raw MIDI files to a trained
//! sequence model and back:
//!
//! * [`midi`] — minimal Standard MIDI File reader/writer (format 0/1).
//! * [`corpus`] — melody extraction, mixed-grid quantization, heuristic
//!   filtering and interval-hash deduplication into a clean corpus.
//! * [`tokens`] — the compound token representation (tempo, bar,
//!   position, pitch, duration) with phrase-boundary markers.
//! * [`lexicon`] — melodic n-gram mining over pitch/rhythm/combined
//!   dimensions with t-statistic selection, plus maximum matching.
//! * [`infill`] — blank-infilling task construction: span samplers,
//!   prefix/suffix sample layout and the self-attention mask.
//! * [`model`] — a compact unified encoder-decoder transformer with
//!   compound embeddings, written directly over `ndarray` with manual
//!   backpropagation, AdamW and one-cycle scheduling.
//! * [`generate`] — top-k temperature decoding for melody continuation
//!   and inpainting.
//! * [`evaluate`] — objective metrics (pitch/rhythm/structure/diversity
//!   similarity) and rank-sum task scores.

pub mod corpus;
pub mod evaluate;
pub mod generate;
pub mod infill;
pub mod lexicon;
pub mod midi;
pub mod model;
pub mod seeding;
pub mod stablehash;
pub mod tokens;

/// Ticks per quarter note used throughout the crate.
pub const TICKS_PER_QUARTER: u32 = 480;

/// Ticks per 4/4 bar (the only supported time signature).
pub const TICKS_PER_BAR: u32 = 4 * TICKS_PER_QUARTER;
