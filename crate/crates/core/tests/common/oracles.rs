#![allow(dead_code)]

use sentigen_core::attention::{phi, ATTENTION_EPS};
use sentigen_core::remi::{duration_slots, tick_to_slot, NoteList, TICKS_PER_QUARTER};

/// Direct double-loop evaluation of causal (or full) linear attention,
/// row-major `[n×d]` inputs split into `heads` column blocks.
pub fn direct_attention(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, heads: usize, causal: bool) -> Vec<f64> {
    let dh = d / heads;
    let mut out = vec![0.0; n * d];
    for h in 0..heads {
        let col = |row: usize, c: usize| row * d + h * dh + c;
        for i in 0..n {
            let last = if causal { i + 1 } else { n };
            let mut num = vec![0.0; dh];
            let mut den = 0.0;
            for j in 0..last {
                let w: f64 = (0..dh).map(|c| phi(q[col(i, c)]) * phi(k[col(j, c)])).sum();
                den += w;
                for c in 0..dh {
                    num[c] += w * v[col(j, c)];
                }
            }
            for c in 0..dh {
                out[col(i, c)] = num[c] / den.max(ATTENTION_EPS);
            }
        }
    }
    out
}

pub fn brute_pitch_range(x: &NoteList) -> u8 {
    let mut best = 0;
    for a in &x.notes {
        for b in &x.notes {
            best = best.max(a.pitch.saturating_sub(b.pitch));
        }
    }
    best
}

pub fn brute_pitch_classes(x: &NoteList) -> usize {
    (0..12u8).filter(|c| x.notes.iter().any(|n| n.pitch % 12 == *c)).count()
}

pub fn brute_polyphony(x: &NoteList) -> f64 {
    let x = x.rescaled(TICKS_PER_QUARTER);
    let spans: Vec<(u64, u64)> = x
        .notes
        .iter()
        .map(|n| {
            let s = tick_to_slot(n.onset);
            (s, s + duration_slots(n.duration))
        })
        .collect();
    let end = spans.iter().map(|s| s.1).max().unwrap_or(0);
    let (mut total, mut occupied) = (0u64, 0u64);
    for slot in 0..end {
        let c = spans.iter().filter(|(s, e)| *s <= slot && slot < *e).count() as u64;
        if c > 0 {
            total += c;
            occupied += 1;
        }
    }
    if occupied == 0 {
        0.0
    } else {
        total as f64 / occupied as f64
    }
}
