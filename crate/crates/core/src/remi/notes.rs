use crate::error::{contract_err, Result};

use super::vocab::{duration_bin, tempo_bin, tempo_bin_bpm, velocity_bin, velocity_bin_value, MAX_DURATION_SLOTS};

/// Ticks per quarter note of every NoteList the codec produces.
pub const TICKS_PER_QUARTER: u32 = 480;
/// Grid positions per 4/4 bar.
pub const SLOTS_PER_BAR: u64 = 16;
/// Ticks per sixteenth-note grid slot at [`TICKS_PER_QUARTER`].
pub const SLOT_TICKS: u64 = TICKS_PER_QUARTER as u64 / 4;
/// Tempo assumed before the first tempo event.
pub const DEFAULT_BPM: f64 = 120.0;

/// One performed note. Field order gives the canonical sort order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Note {
    pub onset: u64,
    pub pitch: u8,
    pub duration: u64,
    pub velocity: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TempoChange {
    pub tick: u64,
    pub bpm: f64,
}

/// Decoded performance: notes plus tempo map at a given resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct NoteList {
    pub notes: Vec<Note>,
    pub tempo_changes: Vec<TempoChange>,
    pub ticks_per_quarter: u32,
}

impl Default for NoteList {
    fn default() -> Self {
        Self { notes: Vec::new(), tempo_changes: Vec::new(), ticks_per_quarter: TICKS_PER_QUARTER }
    }
}

impl NoteList {
    pub fn new(mut notes: Vec<Note>, mut tempo_changes: Vec<TempoChange>, ticks_per_quarter: u32) -> Self {
        notes.sort();
        tempo_changes.sort_by_key(|t| t.tick);
        Self { notes, tempo_changes, ticks_per_quarter }
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    /// Checks the MIDI ranges and sort order.
    pub fn validate(&self) -> Result<()> {
        if self.ticks_per_quarter == 0 {
            return contract_err("ticks_per_quarter must be positive");
        }
        for n in &self.notes {
            if n.duration == 0 {
                return contract_err(format!("zero-duration note at tick {}", n.onset));
            }
            if n.pitch > 127 || n.velocity == 0 || n.velocity > 127 {
                return contract_err(format!("note {n:?} outside MIDI range"));
            }
        }
        if self.notes.windows(2).any(|w| w[0] > w[1]) {
            return contract_err("notes are not sorted by (onset, pitch)");
        }
        Ok(())
    }

    /// Tempo in effect at `tick`.
    pub fn tempo_at(&self, tick: u64) -> f64 {
        self.tempo_changes
            .iter()
            .take_while(|t| t.tick <= tick)
            .last()
            .map_or(DEFAULT_BPM, |t| t.bpm)
    }

    /// Same performance expressed at `tpq` ticks per quarter.
    pub fn rescaled(&self, tpq: u32) -> NoteList {
        if tpq == self.ticks_per_quarter {
            return self.clone();
        }
        let (from, to) = (self.ticks_per_quarter as u64, tpq as u64);
        let conv = |t: u64| (t * to + from / 2) / from;
        let notes = self
            .notes
            .iter()
            .map(|n| {
                let onset = conv(n.onset);
                let end = conv(n.onset + n.duration);
                Note { onset, duration: end.saturating_sub(onset).max(1), ..*n }
            })
            .collect();
        let tempo = self.tempo_changes.iter().map(|t| TempoChange { tick: conv(t.tick), ..*t }).collect();
        NoteList::new(notes, tempo, tpq)
    }

    /// Transposes every pitch by `semitones`, clamping to 0..=127.
    pub fn transposed(&self, semitones: i32) -> NoteList {
        let notes = self
            .notes
            .iter()
            .map(|n| Note { pitch: (n.pitch as i32 + semitones).clamp(0, 127) as u8, ..*n })
            .collect();
        NoteList::new(notes, self.tempo_changes.clone(), self.ticks_per_quarter)
    }
}

/// Grid slot of a tick at the codec resolution, rounding half up.
pub fn tick_to_slot(tick: u64) -> u64 {
    (tick + SLOT_TICKS / 2) / SLOT_TICKS
}

/// Length in slots of a duration, rounded, at least one, not clipped.
pub fn duration_slots(duration: u64) -> u64 {
    tick_to_slot(duration).max(1)
}

/// Projects a NoteList onto exactly what the token representation can
/// express: 480 ticks/quarter, onsets on the sixteenth grid, durations of
/// 1–32 slots, binned velocities, and one tempo change per occupied slot
/// where the tempo bin differs from the previous one.
pub fn quantize(input: &NoteList) -> NoteList {
    let src = input.rescaled(TICKS_PER_QUARTER);
    let notes: Vec<Note> = src
        .notes
        .iter()
        .map(|n| {
            let slots = duration_slots(n.duration).min(MAX_DURATION_SLOTS);
            Note {
                onset: tick_to_slot(n.onset) * SLOT_TICKS,
                pitch: n.pitch,
                duration: slots * SLOT_TICKS,
                velocity: velocity_bin_value(velocity_bin(n.velocity)),
            }
        })
        .collect();
    let mut sorted = notes;
    sorted.sort();
    let mut tempo_changes = Vec::new();
    let mut current: Option<usize> = None;
    let mut last_tick = None;
    for n in &sorted {
        if last_tick == Some(n.onset) {
            continue;
        }
        last_tick = Some(n.onset);
        let bin = tempo_bin(src.tempo_at(n.onset));
        if current != Some(bin) {
            tempo_changes.push(TempoChange { tick: n.onset, bpm: tempo_bin_bpm(bin) });
            current = Some(bin);
        }
    }
    debug_assert!(sorted.iter().all(|n| duration_bin(n.duration) < MAX_DURATION_SLOTS as usize));
    NoteList { notes: sorted, tempo_changes, ticks_per_quarter: TICKS_PER_QUARTER }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn note(onset: u64, pitch: u8, duration: u64, velocity: u8) -> Note {
        Note { onset, pitch, duration, velocity }
    }

    #[test]
    fn quantize_rounds_to_grid() {
        let x = NoteList::new(vec![note(61, 60, 400, 64)], vec![], 480);
        let q = quantize(&x);
        assert_eq!(q.notes, vec![note(120, 60, 360, 62)]);
        assert_eq!(q.tempo_changes.len(), 1);
        assert_eq!(q.tempo_changes[0].tick, 120);
    }

    #[test]
    fn quantize_clips_long_notes() {
        let x = NoteList::new(vec![note(0, 60, 480 * 40, 64)], vec![], 480);
        assert_eq!(quantize(&x).notes[0].duration, 32 * SLOT_TICKS);
    }

    #[test]
    fn quantize_is_idempotent() {
        let x = NoteList::new(
            vec![note(0, 60, 100, 10), note(130, 64, 900, 127), note(2000, 40, 5, 1)],
            vec![TempoChange { tick: 0, bpm: 90.0 }, TempoChange { tick: 1900, bpm: 200.0 }],
            480,
        );
        let q = quantize(&x);
        assert_eq!(quantize(&q), q);
        assert_eq!(q.tempo_changes.len(), 2);
    }

    #[test]
    fn rescale_to_codec_resolution() {
        let x = NoteList::new(vec![note(96, 60, 96, 64)], vec![], 96);
        let r = x.rescaled(480);
        assert_eq!(r.notes, vec![note(480, 60, 480, 64)]);
    }

    #[test]
    fn validate_catches_zero_duration() {
        let x = NoteList::new(vec![note(0, 60, 0, 64)], vec![], 480);
        assert!(x.validate().is_err());
    }
}
