use crate::emotion::EmotionClass;
use crate::error::{Error, Result};

use super::notes::{quantize, Note, NoteList, TempoChange, SLOTS_PER_BAR, SLOT_TICKS, TICKS_PER_QUARTER};
use super::vocab::{
    duration_bin, tempo_bin, tempo_bin_bpm, velocity_bin, velocity_bin_value, Token, BOS, EOS, PAD,
    VOCAB_SIZE,
};

/// Vocabulary indices plus the emotion label they were drawn under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub label: EmotionClass,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, label: EmotionClass) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= VOCAB_SIZE) {
            return Err(Error::Index(format!("token {bad} outside vocabulary of {VOCAB_SIZE}")));
        }
        Ok(Self { tokens, label })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Fail at the first token that breaks the grammar.
    Strict,
    /// Skip offending tokens and fill in defaults for incomplete notes.
    Robust,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub notes: NoteList,
    /// Tokens skipped or repaired in robust mode.
    pub warnings: usize,
}

/// Velocity bin given to a NOTE_ON that has no VELOCITY token.
pub const DEFAULT_VELOCITY_BIN: usize = 16;
/// Duration in slots given to a NOTE_ON that has no NOTE_DURATION token.
pub const DEFAULT_DURATION_SLOTS: u64 = 2;

/// Encodes a NoteList as BOS, bars, EOS. Each bar is BAR followed, for every
/// occupied grid slot in ascending order, by BEAT, an optional TEMPO when the
/// tempo bin changes, and NOTE_ON, VELOCITY, NOTE_DURATION per note.
pub fn encode(notes: &NoteList) -> TokenSequence {
    let q = quantize(notes);
    let mut tokens = vec![BOS];
    if let Some(last) = q.notes.last() {
        let last_bar = last.onset / SLOT_TICKS / SLOTS_PER_BAR;
        let mut i = 0;
        let mut tempo = q.tempo_changes.iter().peekable();
        for bar in 0..=last_bar {
            tokens.push(Token::Bar.index());
            while i < q.notes.len() && q.notes[i].onset / SLOT_TICKS / SLOTS_PER_BAR == bar {
                let onset = q.notes[i].onset;
                let slot = (onset / SLOT_TICKS % SLOTS_PER_BAR) as u8;
                tokens.push(Token::Beat(slot).index());
                if let Some(t) = tempo.next_if(|t| t.tick == onset) {
                    tokens.push(Token::Tempo(tempo_bin(t.bpm) as u8).index());
                }
                while i < q.notes.len() && q.notes[i].onset == onset {
                    let n = q.notes[i];
                    tokens.push(Token::NoteOn(n.pitch).index());
                    tokens.push(Token::Velocity(velocity_bin(n.velocity) as u8).index());
                    tokens.push(Token::Duration(duration_bin(n.duration) as u8).index());
                    i += 1;
                }
            }
        }
    }
    tokens.push(EOS);
    TokenSequence { tokens, label: EmotionClass::Unlabeled }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Expect {
    Start,
    /// After BOS: BAR or EOS.
    FirstBar,
    /// After BAR or a complete slot: BAR, BEAT, EOS.
    BarBody,
    /// After BEAT: TEMPO or NOTE_ON.
    SlotStart,
    /// After TEMPO: NOTE_ON.
    FirstNote,
    Velocity,
    Duration,
    /// After a complete note: NOTE_ON, BEAT, BAR, EOS.
    AfterNote,
    End,
}

struct Pending {
    pitch: u8,
    velocity_bin: Option<usize>,
    duration_bin: Option<usize>,
}

struct Decoder {
    mode: DecodeMode,
    warnings: usize,
    bar: Option<u64>,
    slot: Option<u64>,
    tempo_bin: Option<usize>,
    pending: Option<Pending>,
    notes: Vec<Note>,
    tempo_changes: Vec<TempoChange>,
    // strict-mode bookkeeping
    expect: Expect,
    bar_has_notes: bool,
    last_in_slot: Option<(u8, usize, usize)>,
}

impl Decoder {
    fn violation(&mut self, index: usize, message: String) -> Result<()> {
        match self.mode {
            DecodeMode::Strict => Err(Error::Grammar { index, message }),
            DecodeMode::Robust => {
                self.warnings += 1;
                Ok(())
            }
        }
    }

    fn onset(&self) -> u64 {
        (self.bar.unwrap_or(0) * SLOTS_PER_BAR + self.slot.unwrap_or(0)) * SLOT_TICKS
    }

    fn flush(&mut self) {
        if let Some(p) = self.pending.take() {
            let vel = p.velocity_bin.unwrap_or(DEFAULT_VELOCITY_BIN);
            let slots = p.duration_bin.map_or(DEFAULT_DURATION_SLOTS, |b| b as u64 + 1);
            self.notes.push(Note {
                onset: self.onset(),
                pitch: p.pitch,
                duration: slots * SLOT_TICKS,
                velocity: velocity_bin_value(vel),
            });
        }
    }

    /// In robust mode a note or tempo outside any bar/slot is placed at the
    /// start of the current (or first) bar.
    fn ensure_position(&mut self, index: usize, what: &str) -> Result<()> {
        if self.slot.is_none() {
            self.violation(index, format!("{what} before any BEAT"))?;
            self.bar.get_or_insert(0);
            self.slot = Some(0);
        }
        Ok(())
    }

    fn step(&mut self, index: usize, token: Token) -> Result<bool> {
        use Expect::*;
        if self.mode == DecodeMode::Strict {
            let ok = match (self.expect, token) {
                (End, Token::Pad) => true,
                (End, _) => false,
                (Start, Token::Bos) => true,
                (FirstBar, Token::Bar | Token::Eos) => true,
                (BarBody, Token::Bar | Token::Beat(_)) => true,
                (BarBody, Token::Eos) => self.bar_has_notes,
                (SlotStart, Token::Tempo(_) | Token::NoteOn(_)) => true,
                (FirstNote, Token::NoteOn(_)) => true,
                (Velocity, Token::Velocity(_)) => true,
                (Duration, Token::Duration(_)) => true,
                (AfterNote, Token::NoteOn(_) | Token::Beat(_) | Token::Bar | Token::Eos) => true,
                _ => false,
            };
            if !ok {
                return Err(Error::Grammar {
                    index,
                    message: format!("unexpected {token} (expecting {:?})", self.expect),
                });
            }
        }
        match token {
            Token::Pad => {}
            Token::Bos => {
                if index != 0 {
                    self.violation(index, "BOS inside the sequence".into())?;
                }
                self.expect = Expect::FirstBar;
            }
            Token::Eos => {
                self.flush();
                self.expect = Expect::End;
                return Ok(self.mode == DecodeMode::Strict);
            }
            Token::Bar => {
                self.flush();
                self.bar = Some(self.bar.map_or(0, |b| b + 1));
                self.slot = None;
                self.bar_has_notes = false;
                self.expect = Expect::BarBody;
            }
            Token::Beat(s) => {
                self.flush();
                let s = s as u64;
                if self.mode == DecodeMode::Strict && self.slot.is_some_and(|prev| s <= prev) {
                    return Err(Error::Grammar { index, message: format!("BEAT_{s} does not advance") });
                }
                if self.bar.is_none() {
                    self.violation(index, "BEAT before any BAR".into())?;
                    self.bar = Some(0);
                }
                self.slot = Some(s);
                self.last_in_slot = None;
                self.expect = Expect::SlotStart;
            }
            Token::Tempo(b) => {
                self.flush();
                let b = b as usize;
                if self.mode == DecodeMode::Strict && self.tempo_bin == Some(b) {
                    return Err(Error::Grammar { index, message: "TEMPO repeats the current bin".into() });
                }
                self.ensure_position(index, "TEMPO")?;
                let tick = self.onset();
                self.tempo_changes.retain(|t| t.tick != tick);
                self.tempo_changes.push(TempoChange { tick, bpm: tempo_bin_bpm(b) });
                self.tempo_bin = Some(b);
                self.expect = Expect::FirstNote;
            }
            Token::NoteOn(p) => {
                self.flush();
                if self.mode == DecodeMode::Strict && self.tempo_bin.is_none() {
                    return Err(Error::Grammar { index, message: "first slot carries no TEMPO".into() });
                }
                self.ensure_position(index, "NOTE_ON")?;
                self.pending = Some(Pending { pitch: p, velocity_bin: None, duration_bin: None });
                self.expect = Expect::Velocity;
            }
            Token::Velocity(b) => match self.pending.as_mut() {
                Some(p) if p.velocity_bin.is_none() && p.duration_bin.is_none() => {
                    p.velocity_bin = Some(b as usize);
                    self.expect = Expect::Duration;
                }
                _ => self.violation(index, "VELOCITY without a NOTE_ON".into())?,
            },
            Token::Duration(b) => match self.pending.as_mut() {
                Some(p) if p.duration_bin.is_none() => {
                    p.duration_bin = Some(b as usize);
                    let key = (p.pitch, b as usize, p.velocity_bin.unwrap_or(DEFAULT_VELOCITY_BIN));
                    if self.mode == DecodeMode::Strict && self.last_in_slot.is_some_and(|prev| key < prev) {
                        return Err(Error::Grammar { index, message: "notes in a slot are out of order".into() });
                    }
                    self.last_in_slot = Some(key);
                    self.bar_has_notes = true;
                    self.flush();
                    self.expect = Expect::AfterNote;
                }
                _ => self.violation(index, "NOTE_DURATION without a NOTE_ON".into())?,
            },
        }
        Ok(true)
    }
}

/// Decodes tokens into notes. Strict mode accepts exactly the sequences
/// [`encode`] can produce (optionally followed by PAD); robust mode accepts
/// anything and counts repairs.
pub fn decode(tokens: &[usize], mode: DecodeMode) -> Result<Decoded> {
    let mut d = Decoder {
        mode,
        warnings: 0,
        bar: None,
        slot: None,
        tempo_bin: None,
        pending: None,
        notes: Vec::new(),
        tempo_changes: Vec::new(),
        expect: Expect::Start,
        bar_has_notes: false,
        last_in_slot: None,
    };
    for (index, &t) in tokens.iter().enumerate() {
        let token = match Token::from_index(t) {
            Ok(tok) => tok,
            Err(e) => match mode {
                DecodeMode::Strict => return Err(e),
                DecodeMode::Robust => {
                    d.warnings += 1;
                    continue;
                }
            },
        };
        if !d.step(index, token)? {
            break;
        }
    }
    if mode == DecodeMode::Strict && d.expect != Expect::End {
        return Err(Error::Grammar { index: tokens.len(), message: "sequence ends without EOS".into() });
    }
    d.flush();
    Ok(Decoded {
        notes: NoteList::new(d.notes, d.tempo_changes, TICKS_PER_QUARTER),
        warnings: d.warnings,
    })
}

/// Splits into windows of `length` tokens starting every `stride` tokens,
/// the last window reaching the end of the sequence and padded with PAD.
pub fn chunk(seq: &TokenSequence, length: usize, stride: usize) -> Result<Vec<TokenSequence>> {
    if length == 0 || stride == 0 {
        return Err(Error::Contract("chunk length and stride must be at least 1".into()));
    }
    let n = seq.tokens.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let count = if n <= length { 1 } else { (n - length).div_ceil(stride) + 1 };
    Ok((0..count)
        .map(|c| {
            let start = c * stride;
            let end = (start + length).min(n);
            let mut tokens = seq.tokens[start..end].to_vec();
            tokens.resize(length, PAD);
            TokenSequence { tokens, label: seq.label }
        })
        .collect())
}
