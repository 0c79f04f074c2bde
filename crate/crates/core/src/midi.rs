//! Minimal Standard MIDI File reader and writer.
//!
//! Supports format 0 and 1 files with metrical (ticks-per-quarter)
//! timing. All tick values are rescaled to 480 per quarter note on
//! parse. Only the events the melody pipeline needs are interpreted:
//! note on/off, set-tempo, time signature and end-of-track; everything
//! else is skipped.

use std::collections::VecDeque;

use log::warn;
use thiserror::Error;

use crate::corpus::NoteEvent;
use crate::TICKS_PER_QUARTER;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("not a MIDI file: missing MThd magic at byte {offset}")]
    BadMagic { offset: usize },
    #[error("truncated {chunk} chunk at byte {offset}")]
    Truncated { chunk: &'static str, offset: usize },
    #[error("unsupported MIDI format {format} (only 0 and 1)")]
    UnsupportedFormat { format: u16 },
    #[error("SMPTE time division is not supported (byte {offset})")]
    SmpteDivision { offset: usize },
    #[error("invalid variable-length quantity at byte {offset}")]
    BadVarLen { offset: usize },
    #[error("unexpected running status at byte {offset}")]
    OrphanData { offset: usize },
}

/// One note stream of a parsed file: a (track, channel) pair.
#[derive(Debug, Clone)]
pub struct RawTrack {
    pub track_index: usize,
    pub channel: u8,
    pub notes: Vec<NoteEvent>,
}

impl RawTrack {
    /// MIDI channel 10 (index 9) is reserved for percussion.
    pub fn is_percussion(&self) -> bool {
        self.channel == 9
    }
}

/// Parsed song: note streams plus the timing metadata the pipeline needs.
#[derive(Debug, Clone)]
pub struct RawSong {
    /// Beats per minute from the first set-tempo event (120 if none).
    pub tempo_bpm: f64,
    /// (tick, numerator, denominator) of every time-signature event.
    pub time_signatures: Vec<(u64, u8, u8)>,
    pub tracks: Vec<RawTrack>,
}

impl RawSong {
    /// True when every time-signature event (or the 4/4 default) is 4/4.
    pub fn is_four_four(&self) -> bool {
        self.time_signatures.iter().all(|&(_, n, d)| n == 4 && d == 4)
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, chunk: &'static str) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(MidiError::Truncated { chunk, offset: self.pos });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, chunk: &'static str) -> Result<u8, MidiError> {
        Ok(self.take(1, chunk)?[0])
    }

    fn u16(&mut self, chunk: &'static str) -> Result<u16, MidiError> {
        let b = self.take(2, chunk)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, chunk: &'static str) -> Result<u32, MidiError> {
        let b = self.take(4, chunk)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn var_len(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let byte = self.u8("MTrk")?;
            value = (value << 7) | u32::from(byte & 0x7f);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(MidiError::BadVarLen { offset: start })
    }
}

/// Parse a Standard MIDI File (format 0 or 1), rescaling all tick values
/// to 480 per quarter note. Unmatched note-ons are dropped with a warning.
pub fn parse_midi(bytes: &[u8]) -> Result<RawSong, MidiError> {
    let mut cur = Cursor { data: bytes, pos: 0 };

    let magic = cur.take(4, "MThd")?;
    if magic != b"MThd" {
        return Err(MidiError::BadMagic { offset: 0 });
    }
    let header_len = cur.u32("MThd")? as usize;
    if header_len < 6 {
        return Err(MidiError::Truncated { chunk: "MThd", offset: cur.pos });
    }
    let format = cur.u16("MThd")?;
    if format > 1 {
        return Err(MidiError::UnsupportedFormat { format });
    }
    let ntracks = cur.u16("MThd")?;
    let division_offset = cur.pos;
    let division = cur.u16("MThd")?;
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision { offset: division_offset });
    }
    let division = u64::from(division.max(1));
    // Skip any header extension bytes.
    cur.take(header_len - 6, "MThd")?;

    let mut first_tempo: Option<(u64, f64)> = None;
    let mut time_signatures: Vec<(u64, u8, u8)> = Vec::new();
    let mut tracks: Vec<RawTrack> = Vec::new();

    let rescale = |tick: u64| -> u64 {
        (tick * u64::from(TICKS_PER_QUARTER) + division / 2) / division
    };

    for track_index in 0..usize::from(ntracks) {
        let magic = cur.take(4, "MTrk")?;
        if magic != b"MTrk" {
            return Err(MidiError::BadMagic { offset: cur.pos - 4 });
        }
        let len = cur.u32("MTrk")? as usize;
        if cur.pos + len > bytes.len() {
            return Err(MidiError::Truncated { chunk: "MTrk", offset: cur.pos });
        }
        let track_end = cur.pos + len;

        // Open note-ons per (channel, pitch), matched first-in-first-out.
        let mut open: Vec<VecDeque<u64>> = (0..2048).map(|_| VecDeque::new()).collect();
        let mut finished: Vec<(u8, NoteEvent)> = Vec::new();
        let mut tick: u64 = 0;
        let mut running_status: Option<u8> = None;

        while cur.pos < track_end {
            tick += u64::from(cur.var_len()?);
            let status_offset = cur.pos;
            let mut status = cur.u8("MTrk")?;
            if status & 0x80 == 0 {
                // Running status: reuse the previous status byte.
                status = running_status.ok_or(MidiError::OrphanData { offset: status_offset })?;
                cur.pos -= 1;
            }
            match status {
                0xff => {
                    running_status = None;
                    let meta = cur.u8("MTrk")?;
                    let len = cur.var_len()? as usize;
                    let data = cur.take(len, "MTrk")?;
                    match meta {
                        0x51 if len >= 3 => {
                            let uspq = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                            if uspq > 0 {
                                let t = (rescale(tick), 60_000_000.0 / f64::from(uspq));
                                match first_tempo {
                                    Some((at, _)) if at <= t.0 => {}
                                    _ => first_tempo = Some(t),
                                }
                            }
                        }
                        0x58 if len >= 2 => {
                            let num = data[0];
                            let den = 1u8.checked_shl(u32::from(data[1])).unwrap_or(0);
                            time_signatures.push((rescale(tick), num, den));
                        }
                        0x2f => {
                            cur.pos = track_end;
                        }
                        _ => {}
                    }
                }
                0xf0 | 0xf7 => {
                    running_status = None;
                    let len = cur.var_len()? as usize;
                    cur.take(len, "MTrk")?;
                }
                _ => {
                    running_status = Some(status);
                    let kind = status >> 4;
                    let channel = status & 0x0f;
                    match kind {
                        0x9 => {
                            let pitch = cur.u8("MTrk")? & 0x7f;
                            let velocity = cur.u8("MTrk")?;
                            let slot = usize::from(channel) << 7 | usize::from(pitch);
                            if velocity > 0 {
                                open[slot].push_back(tick);
                            } else {
                                close_note(&mut open[slot], tick, channel, pitch, &mut finished);
                            }
                        }
                        0x8 => {
                            let pitch = cur.u8("MTrk")? & 0x7f;
                            let _velocity = cur.u8("MTrk")?;
                            let slot = usize::from(channel) << 7 | usize::from(pitch);
                            close_note(&mut open[slot], tick, channel, pitch, &mut finished);
                        }
                        0xc | 0xd => {
                            cur.u8("MTrk")?;
                        }
                        _ => {
                            cur.take(2, "MTrk")?;
                        }
                    }
                }
            }
        }
        cur.pos = track_end;

        for (slot, opens) in open.iter().enumerate() {
            for _ in opens {
                warn!(
                    "unmatched note-on (track {track_index}, channel {}, pitch {}): dropped",
                    slot >> 7,
                    slot & 0x7f
                );
            }
        }

        // One RawTrack per channel present in this MTrk chunk.
        finished.sort_by_key(|(ch, n)| (*ch, n.onset, n.pitch));
        let mut by_channel: Vec<(u8, Vec<NoteEvent>)> = Vec::new();
        for (ch, note) in finished {
            let rescaled = NoteEvent {
                pitch: note.pitch,
                onset: rescale(note.onset),
                duration: (rescale(note.onset + u64::from(note.duration)) - rescale(note.onset))
                    .max(1) as u32,
            };
            match by_channel.last_mut() {
                Some((c, notes)) if *c == ch => notes.push(rescaled),
                _ => by_channel.push((ch, vec![rescaled])),
            }
        }
        for (channel, mut notes) in by_channel {
            notes.sort_by_key(|n| (n.onset, n.pitch));
            tracks.push(RawTrack { track_index, channel, notes });
        }
    }

    Ok(RawSong {
        tempo_bpm: first_tempo.map(|(_, bpm)| bpm).unwrap_or(120.0),
        time_signatures,
        tracks,
    })
}

fn close_note(
    opens: &mut VecDeque<u64>,
    tick: u64,
    channel: u8,
    pitch: u8,
    finished: &mut Vec<(u8, NoteEvent)>,
) {
    match opens.pop_front() {
        Some(onset) => {
            let duration = tick.saturating_sub(onset).max(1) as u32;
            finished.push((channel, NoteEvent { pitch, onset, duration }));
        }
        None => warn!("note-off without matching note-on (channel {channel}, pitch {pitch})"),
    }
}

fn push_var_len(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut byte = stack[i];
        if i > 0 {
            byte |= 0x80;
        }
        out.push(byte);
    }
}

/// Write a monophonic note list as a format-0 MIDI file at 480 ticks per
/// quarter with a 4/4 time signature and a single tempo event.
pub fn write_midi(tempo_bpm: f64, notes: &[NoteEvent]) -> Vec<u8> {
    let mut events: Vec<(u64, Vec<u8>)> = Vec::new();
    let uspq = (60_000_000.0 / tempo_bpm).round().max(1.0) as u32;
    events.push((0, vec![0xff, 0x58, 0x04, 4, 2, 24, 8]));
    events.push((0, vec![0xff, 0x51, 0x03, (uspq >> 16) as u8, (uspq >> 8) as u8, uspq as u8]));
    for n in notes {
        events.push((n.onset, vec![0x90, n.pitch, 80]));
        events.push((n.onset + u64::from(n.duration), vec![0x80, n.pitch, 0]));
    }
    // Stable order: offs before ons at the same tick so re-parsing never
    // sees overlapping note pairs of the same pitch.
    events.sort_by(|a, b| (a.0, a.1[0]).cmp(&(b.0, b.1[0])));

    let mut track = Vec::new();
    let mut last_tick = 0u64;
    for (tick, bytes) in events {
        push_var_len(&mut track, (tick - last_tick) as u32);
        track.extend_from_slice(&bytes);
        last_tick = tick;
    }
    push_var_len(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(TICKS_PER_QUARTER as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Build a minimal one-track file by hand.
    fn single_note_file(division: u16, duration: u32) -> Vec<u8> {
        let mut track = Vec::new();
        track.extend_from_slice(&[0x00, 0x90, 60, 100]);
        push_var_len(&mut track, duration);
        track.extend_from_slice(&[0x80, 60, 0]);
        track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&0u16.to_be_bytes());
        out.extend_from_slice(&1u16.to_be_bytes());
        out.extend_from_slice(&division.to_be_bytes());
        out.extend_from_slice(b"MTrk");
        out.extend_from_slice(&(track.len() as u32).to_be_bytes());
        out.extend_from_slice(&track);
        out
    }

    #[test]
    fn parses_single_quarter_note() {
        let song = parse_midi(&single_note_file(480, 480)).unwrap();
        assert_eq!(song.tracks.len(), 1);
        let n = &song.tracks[0].notes;
        assert_eq!(n.len(), 1);
        assert_eq!((n[0].pitch, n[0].onset, n[0].duration), (60, 0, 480));
    }

    #[test]
    fn rescales_other_resolutions() {
        let song = parse_midi(&single_note_file(960, 960)).unwrap();
        let n = &song.tracks[0].notes[0];
        assert_eq!((n.onset, n.duration), (0, 480));
    }

    #[test]
    fn truncated_chunk_is_named() {
        let mut bytes = single_note_file(480, 480);
        bytes.truncate(bytes.len() - 6);
        let err = parse_midi(&bytes).unwrap_err();
        match err {
            MidiError::Truncated { chunk, .. } => assert_eq!(chunk, "MTrk"),
            other => panic!("expected truncation error, got {other}"),
        }
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let err = parse_midi(b"RIFFxxxx").unwrap_err();
        match err {
            MidiError::BadMagic { offset } => assert_eq!(offset, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn roundtrip_through_writer() {
        let notes = vec![
            NoteEvent { pitch: 60, onset: 0, duration: 480 },
            NoteEvent { pitch: 64, onset: 480, duration: 240 },
            NoteEvent { pitch: 67, onset: 960, duration: 960 },
        ];
        let bytes = write_midi(96.0, &notes);
        let song = parse_midi(&bytes).unwrap();
        assert!(song.is_four_four());
        assert!((song.tempo_bpm - 96.0).abs() < 1e-3);
        assert_eq!(song.tracks.len(), 1);
        assert_eq!(song.tracks[0].notes, notes);
    }

    #[test]
    fn tempo_comes_from_first_event() {
        // Two tempo events; the earlier tick wins.
        let mut track = Vec::new();
        track.extend_from_slice(&[0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20]); // 120 bpm at 0
        track.extend_from_slice(&[0x60, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40]); // 60 bpm later
        track.extend_from_slice(&[0x00, 0x90, 60, 100, 0x40, 0x80, 60, 0]);
        track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd");
        bytes.extend_from_slice(&6u32.to_be_bytes());
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&1u16.to_be_bytes());
        bytes.extend_from_slice(&480u16.to_be_bytes());
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);

        let song = parse_midi(&bytes).unwrap();
        assert!((song.tempo_bpm - 120.0).abs() < 1e-9);
    }
}
