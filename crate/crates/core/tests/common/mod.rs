#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sentigen_core::remi::vocab::{tempo_bin_bpm, velocity_bin_value, N_TEMPO_BINS, N_VELOCITY_BINS};
use sentigen_core::remi::{encode, quantize, Note, NoteList, TempoChange, TokenSequence, SLOT_TICKS, TICKS_PER_QUARTER};
use sentigen_core::EmotionClass;

/// Random NoteList already on the codec grid. Notes of equal pitch never
/// overlap.
pub fn random_quantized(rng: &mut ChaCha8Rng) -> NoteList {
    let n = rng.random_range(0..40);
    let mut notes: Vec<Note> = Vec::with_capacity(n);
    let mut tries = 0;
    while notes.len() < n && tries < 400 {
        tries += 1;
        let onset = rng.random_range(0..128u64) * SLOT_TICKS;
        let duration = rng.random_range(1..=32u64) * SLOT_TICKS;
        let pitch = rng.random_range(0..128u8);
        let clash = notes
            .iter()
            .any(|m| m.pitch == pitch && m.onset < onset + duration && onset < m.onset + m.duration);
        if clash {
            continue;
        }
        let velocity = velocity_bin_value(rng.random_range(0..N_VELOCITY_BINS));
        notes.push(Note { onset, pitch, duration, velocity });
    }
    let tempos: Vec<TempoChange> = (0..rng.random_range(0..4))
        .map(|_| TempoChange {
            tick: rng.random_range(0..128u64) * SLOT_TICKS,
            bpm: tempo_bin_bpm(rng.random_range(0..N_TEMPO_BINS)),
        })
        .collect();
    quantize(&NoteList::new(notes, tempos, TICKS_PER_QUARTER))
}

/// Random NoteList with off-grid timing and arbitrary velocities.
pub fn random_raw(rng: &mut ChaCha8Rng) -> NoteList {
    let n = rng.random_range(0..30);
    let notes = (0..n)
        .map(|_| Note {
            onset: rng.random_range(0..20_000),
            pitch: rng.random_range(0..128),
            duration: rng.random_range(1..5_000),
            velocity: rng.random_range(1..128),
        })
        .collect();
    NoteList::new(notes, vec![], TICKS_PER_QUARTER)
}

/// Melody of quarter notes drawn from `pitches`, `bars` bars long.
pub fn melody(rng: &mut ChaCha8Rng, pitches: std::ops::RangeInclusive<u8>, bars: u64) -> NoteList {
    let mut notes = Vec::new();
    for bar in 0..bars {
        for beat in 0..4 {
            notes.push(Note {
                onset: (bar * 16 + beat * 4) * SLOT_TICKS,
                pitch: rng.random_range(pitches.clone()),
                duration: 4 * SLOT_TICKS,
                velocity: 80,
            });
        }
    }
    NoteList::new(notes, vec![TempoChange { tick: 0, bpm: 120.0 }], TICKS_PER_QUARTER)
}

/// Two-class corpus: Q1 melodies in 48–59, Q3 melodies in 72–83.
pub fn register_corpus(rng: &mut ChaCha8Rng, per_class: usize, bars: u64) -> Vec<TokenSequence> {
    let mut out = Vec::new();
    for _ in 0..per_class {
        for (class, range) in [(EmotionClass::Q1, 48..=59), (EmotionClass::Q3, 72..=83)] {
            let mut seq = encode(&melody(rng, range, bars));
            seq.label = class;
            out.push(seq);
        }
    }
    out
}
