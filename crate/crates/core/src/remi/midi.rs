//! Standard MIDI File reading and writing.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};

use super::notes::{Note, NoteList, TempoChange, TICKS_PER_QUARTER};
use super::vocab::{bpm_from_uspq, uspq_from_bpm};

fn parse_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Midi { offset, message: message.into() })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn u8(&mut self) -> Result<u8> {
        if self.pos >= self.end {
            return parse_err(self.pos, "unexpected end of data");
        }
        let b = self.bytes[self.pos];
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return parse_err(self.pos, format!("need {n} bytes, {} remain", self.end - self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity: at most four bytes, seven bits each.
    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        parse_err(start, "variable-length quantity longer than 4 bytes")
    }
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7F) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Parses a Standard MIDI File (format 0 or 1). Notes from every track and
/// channel are merged; note-ons are matched to note-offs first-in first-out
/// per (channel, pitch). Ticks are rescaled to 480 per quarter.
pub fn parse_midi(bytes: &[u8]) -> Result<NoteList> {
    let mut r = Reader { bytes, pos: 0, end: bytes.len() };
    if r.take(4).ok() != Some(b"MThd".as_slice()) {
        return parse_err(0, "missing MThd header");
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return parse_err(4, format!("header length {header_len} < 6"));
    }
    let header_start = r.pos;
    let _format = r.u16()?;
    let n_tracks = r.u16()?;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return parse_err(header_start + 4, "SMPTE time division is not supported");
    }
    if division == 0 {
        return parse_err(header_start + 4, "zero ticks per quarter");
    }
    r.pos = header_start;
    r.take(header_len)?;

    let mut notes = Vec::new();
    let mut tempo = Vec::new();
    let mut tracks_read = 0;
    while r.pos < bytes.len() && tracks_read < n_tracks {
        let chunk_start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if bytes.len() - r.pos < len {
            return parse_err(chunk_start, format!("chunk declares {len} bytes, {} remain", bytes.len() - r.pos));
        }
        if id != b"MTrk" {
            r.pos += len;
            continue;
        }
        let mut track = Reader { bytes, pos: r.pos, end: r.pos + len };
        parse_track(&mut track, &mut notes, &mut tempo)?;
        r.pos += len;
        tracks_read += 1;
    }
    let list = NoteList::new(notes, dedup_tempo(tempo), division as u32);
    Ok(list.rescaled(TICKS_PER_QUARTER))
}

fn dedup_tempo(mut tempo: Vec<TempoChange>) -> Vec<TempoChange> {
    tempo.sort_by_key(|t| t.tick);
    let mut out: Vec<TempoChange> = Vec::with_capacity(tempo.len());
    for t in tempo {
        match out.last_mut() {
            Some(last) if last.tick == t.tick => *last = t,
            _ => out.push(t),
        }
    }
    out
}

fn parse_track(r: &mut Reader<'_>, notes: &mut Vec<Note>, tempo: &mut Vec<TempoChange>) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    while r.pos < r.end {
        tick += r.vlq()? as u64;
        let status_pos = r.pos;
        let first = r.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => return parse_err(status_pos, "data byte without running status"),
            }
        };
        match status {
            0xFF => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let uspq = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if uspq == 0 {
                            return parse_err(status_pos, "zero tempo");
                        }
                        tempo.push(TempoChange { tick, bpm: bpm_from_uspq(uspq) });
                    }
                    0x2F => break,
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let d1 = match first_data {
                    Some(d) => d,
                    None => r.u8()?,
                };
                let kind = status & 0xF0;
                let channel = status & 0x0F;
                if kind == 0xC0 || kind == 0xD0 {
                    continue;
                }
                let d2 = r.u8()?;
                if d1 > 0x7F || d2 > 0x7F {
                    return parse_err(r.pos - 1, "data byte with the high bit set");
                }
                match kind {
                    0x90 if d2 > 0 => open.entry((channel, d1)).or_default().push_back((tick, d2)),
                    0x80 | 0x90 => {
                        if let Some((onset, velocity)) = open.get_mut(&(channel, d1)).and_then(VecDeque::pop_front) {
                            if tick > onset {
                                notes.push(Note { onset, pitch: d1, duration: tick - onset, velocity });
                            }
                        }
                    }
                    _ => {}
                }
            }
            _ => return parse_err(status_pos, format!("unsupported status byte {status:#04x}")),
        }
    }
    // Notes still sounding at the end of the track stop at the last tick.
    let mut keys: Vec<_> = open.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        for (onset, velocity) in open.remove(&key).unwrap_or_default() {
            if tick > onset {
                notes.push(Note { onset, pitch: key.1, duration: tick - onset, velocity });
            }
        }
    }
    Ok(())
}

/// Writes a format-0 file at 480 ticks per quarter: tempo events first, then
/// note-offs before note-ons at equal ticks, then an end-of-track event.
pub fn write_midi(list: &NoteList) -> Vec<u8> {
    let list = list.rescaled(TICKS_PER_QUARTER);
    // (tick, order, seq, bytes): order 0 tempo, 1 note-off, 2 note-on.
    let mut events: Vec<(u64, u8, usize, Vec<u8>)> = Vec::new();
    for (i, t) in list.tempo_changes.iter().enumerate() {
        let u = uspq_from_bpm(t.bpm).to_be_bytes();
        events.push((t.tick, 0, i, vec![0xFF, 0x51, 0x03, u[1], u[2], u[3]]));
    }
    for (i, n) in list.notes.iter().enumerate() {
        events.push((n.onset, 2, i, vec![0x90, n.pitch & 0x7F, n.velocity.clamp(1, 127)]));
        events.push((n.onset + n.duration, 1, i, vec![0x80, n.pitch & 0x7F, 0]));
    }
    events.sort_by_key(|e| (e.0, e.1, e.2));

    let mut track = Vec::new();
    let mut last = 0u64;
    for (tick, _, _, data) in &events {
        write_vlq(&mut track, (tick - last) as u32);
        track.extend_from_slice(data);
        last = *tick;
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(22 + track.len());
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

    /// Hand-assembled file: 96 ticks/quarter, tempo 120, C4 for one quarter.
    fn one_note_fixture() -> Vec<u8> {
        let track: Vec<u8> = vec![
            0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20, // tempo 500000 µs
            0x00, 0x90, 60, 100, // note on
            0x60, 0x80, 60, 0, // +96: note off
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let mut f = b"MThd".to_vec();
        f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);
        f
    }

    #[test]
    fn parses_one_note_fixture() {
        let list = parse_midi(&one_note_fixture()).unwrap();
        assert_eq!(list.ticks_per_quarter, 480);
        assert_eq!(list.notes, vec![Note { onset: 0, pitch: 60, duration: 480, velocity: 100 }]);
        assert_eq!(list.tempo_changes, vec![TempoChange { tick: 0, bpm: 120.0 }]);
    }

    #[test]
    fn zero_velocity_note_on_is_note_off_and_running_status_works() {
        let track: Vec<u8> = vec![
            0x00, 0x90, 64, 80, // on
            0x83, 0x60, 64, 0, // +480, running status, velocity 0
            0x00, 0xFF, 0x2F, 0x00,
        ];
        let mut f = b"MThd".to_vec();
        f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0x01, 0xE0]);
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);
        let list = parse_midi(&f).unwrap();
        assert_eq!(list.notes, vec![Note { onset: 0, pitch: 64, duration: 480, velocity: 80 }]);
    }

    #[test]
    fn empty_track_gives_empty_list() {
        let list = parse_midi(&write_midi(&NoteList::default())).unwrap();
        assert!(list.notes.is_empty() && list.tempo_changes.is_empty());
    }

    #[test]
    fn empty_list_writes_end_of_track() {
        let bytes = write_midi(&NoteList::default());
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0xFF, 0x2F, 0x00]);
    }

    #[test]
    fn round_trip_one_note() {
        let list = parse_midi(&one_note_fixture()).unwrap();
        assert_eq!(parse_midi(&write_midi(&list)).unwrap(), list);
    }

    #[test]
    fn truncated_chunk_reports_offset() {
        let mut f = one_note_fixture();
        f.truncate(f.len() - 3);
        match parse_midi(&f) {
            Err(Error::Midi { offset, .. }) => assert_eq!(offset, 14),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn orphan_data_byte_is_error() {
        let track: Vec<u8> = vec![0x00, 60, 100];
        let mut f = b"MThd".to_vec();
        f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);
        assert!(matches!(parse_midi(&f), Err(Error::Midi { offset: 23, .. })));
    }

    #[test]
    fn overlong_vlq_is_error() {
        let track: Vec<u8> = vec![0xFF, 0xFF, 0xFF, 0xFF, 0x7F];
        let mut f = b"MThd".to_vec();
        f.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        f.extend_from_slice(b"MTrk");
        f.extend_from_slice(&(track.len() as u32).to_be_bytes());
        f.extend_from_slice(&track);
        assert!(matches!(parse_midi(&f), Err(Error::Midi { offset: 22, .. })));
    }

    #[test]
    fn rejects_missing_header() {
        assert!(matches!(parse_midi(b"RIFF0000"), Err(Error::Midi { offset: 0, .. })));
    }

    #[test]
    fn vlq_encoding() {
        for (v, bytes) in [(0u32, vec![0x00]), (0x7F, vec![0x7F]), (0x80, vec![0x81, 0x00]), (0x0FFF_FFFF, vec![0xFF, 0xFF, 0xFF, 0x7F])] {
            let mut out = Vec::new();
            write_vlq(&mut out, v);
            assert_eq!(out, bytes);
            let mut r = Reader { bytes: &out, pos: 0, end: out.len() };
            assert_eq!(r.vlq().unwrap(), v);
        }
    }
}
