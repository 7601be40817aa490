//! MIDI ingestion and the REMI token representation.

mod codec;
pub mod corpus;
mod midi;
mod notes;
pub mod vocab;

pub use codec::{chunk, decode, encode, DecodeMode, Decoded, TokenSequence, DEFAULT_DURATION_SLOTS, DEFAULT_VELOCITY_BIN};
pub use midi::{parse_midi, write_midi};
pub use notes::{
    duration_slots, quantize, tick_to_slot, Note, NoteList, TempoChange, DEFAULT_BPM, SLOTS_PER_BAR, SLOT_TICKS,
    TICKS_PER_QUARTER,
};
pub use vocab::{Token, VOCAB_SIZE};
