//! The REMI token vocabulary.
//!
//! Index layout (244 tokens):
//!
//! | family        | count | indices   |
//! |---------------|-------|-----------|
//! | PAD, BOS, EOS | 3     | 0..3      |
//! | BAR           | 1     | 3         |
//! | BEAT          | 16    | 4..20     |
//! | TEMPO         | 32    | 20..52    |
//! | NOTE_ON       | 128   | 52..180   |
//! | VELOCITY      | 32    | 180..212  |
//! | NOTE_DURATION | 32    | 212..244  |

use std::fmt;

use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 244;
pub const N_BEATS: usize = 16;
pub const N_TEMPO_BINS: usize = 32;
pub const N_PITCHES: usize = 128;
pub const N_VELOCITY_BINS: usize = 32;
pub const N_DURATION_BINS: usize = 32;
pub const MAX_DURATION_SLOTS: u64 = N_DURATION_BINS as u64;

pub const TEMPO_MIN_BPM: f64 = 30.0;
pub const TEMPO_MAX_BPM: f64 = 210.0;
const TEMPO_BIN_WIDTH: f64 = (TEMPO_MAX_BPM - TEMPO_MIN_BPM) / N_TEMPO_BINS as f64;
const VELOCITY_BIN_WIDTH: u8 = 4;

const BAR_BASE: usize = 3;
const BEAT_BASE: usize = BAR_BASE + 1;
const TEMPO_BASE: usize = BEAT_BASE + N_BEATS;
const NOTE_ON_BASE: usize = TEMPO_BASE + N_TEMPO_BINS;
const VELOCITY_BASE: usize = NOTE_ON_BASE + N_PITCHES;
const DURATION_BASE: usize = VELOCITY_BASE + N_VELOCITY_BINS;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const BAR: usize = BAR_BASE;

/// A decoded vocabulary entry. Bin payloads are zero-based bin indices;
/// `Duration(b)` lasts `b + 1` grid slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Bar,
    Beat(u8),
    Tempo(u8),
    NoteOn(u8),
    Velocity(u8),
    Duration(u8),
}

impl Token {
    pub fn index(self) -> usize {
        match self {
            Token::Pad => PAD,
            Token::Bos => BOS,
            Token::Eos => EOS,
            Token::Bar => BAR_BASE,
            Token::Beat(b) => BEAT_BASE + b as usize,
            Token::Tempo(b) => TEMPO_BASE + b as usize,
            Token::NoteOn(p) => NOTE_ON_BASE + p as usize,
            Token::Velocity(b) => VELOCITY_BASE + b as usize,
            Token::Duration(b) => DURATION_BASE + b as usize,
        }
    }

    pub fn from_index(i: usize) -> Result<Token> {
        let tok = match i {
            PAD => Token::Pad,
            BOS => Token::Bos,
            EOS => Token::Eos,
            BAR_BASE => Token::Bar,
            _ if i < TEMPO_BASE => Token::Beat((i - BEAT_BASE) as u8),
            _ if i < NOTE_ON_BASE => Token::Tempo((i - TEMPO_BASE) as u8),
            _ if i < VELOCITY_BASE => Token::NoteOn((i - NOTE_ON_BASE) as u8),
            _ if i < DURATION_BASE => Token::Velocity((i - VELOCITY_BASE) as u8),
            _ if i < VOCAB_SIZE => Token::Duration((i - DURATION_BASE) as u8),
            _ => return Err(Error::Index(format!("token index {i} outside vocabulary of {VOCAB_SIZE}"))),
        };
        Ok(tok)
    }

    /// True for NOTE_ON tokens.
    pub fn is_note_on(i: usize) -> bool {
        (NOTE_ON_BASE..VELOCITY_BASE).contains(&i)
    }

    /// Pitch of a NOTE_ON token index.
    pub fn pitch_of(i: usize) -> Option<u8> {
        Self::is_note_on(i).then(|| (i - NOTE_ON_BASE) as u8)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => write!(f, "PAD"),
            Token::Bos => write!(f, "BOS"),
            Token::Eos => write!(f, "EOS"),
            Token::Bar => write!(f, "BAR"),
            Token::Beat(b) => write!(f, "BEAT_{b}"),
            Token::Tempo(b) => write!(f, "TEMPO_{b}"),
            Token::NoteOn(p) => write!(f, "NOTE_ON_{p}"),
            Token::Velocity(b) => write!(f, "VELOCITY_{b}"),
            Token::Duration(b) => write!(f, "NOTE_DURATION_{b}"),
        }
    }
}

/// Velocity bin of width 4 over 1..=127.
pub fn velocity_bin(velocity: u8) -> usize {
    ((velocity.max(1) - 1) / VELOCITY_BIN_WIDTH).min(N_VELOCITY_BINS as u8 - 1) as usize
}

/// Representative velocity of a bin.
pub fn velocity_bin_value(bin: usize) -> u8 {
    (bin as u8) * VELOCITY_BIN_WIDTH + 2
}

/// Bin of a duration in ticks at 480 ticks/quarter: sixteenth units, clipped to 1..=32.
pub fn duration_bin(duration_ticks: u64) -> usize {
    (super::notes::duration_slots(duration_ticks).min(MAX_DURATION_SLOTS) - 1) as usize
}

/// Uniform tempo bin over 30–210 BPM, clipped at both ends.
pub fn tempo_bin(bpm: f64) -> usize {
    let b = ((bpm - TEMPO_MIN_BPM) / TEMPO_BIN_WIDTH).floor();
    b.clamp(0.0, (N_TEMPO_BINS - 1) as f64) as usize
}

/// Representative tempo of a bin: the bin centre snapped to a whole number of
/// microseconds per quarter, so it survives a MIDI round trip exactly.
pub fn tempo_bin_bpm(bin: usize) -> f64 {
    let centre = TEMPO_MIN_BPM + (bin as f64 + 0.5) * TEMPO_BIN_WIDTH;
    bpm_from_uspq(uspq_from_bpm(centre))
}

pub fn uspq_from_bpm(bpm: f64) -> u32 {
    (60_000_000.0 / bpm).round().clamp(1.0, 0xFF_FFFF as f64) as u32
}

pub fn bpm_from_uspq(uspq: u32) -> f64 {
    60_000_000.0 / uspq as f64
}
