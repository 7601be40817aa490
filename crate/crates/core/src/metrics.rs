//! Pitch range, pitch-class count and polyphony, per sample and per corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::emotion::EmotionClass;
use crate::error::{Error, Result};
use crate::remi::corpus::{read_label_manifest, read_token_file};
use crate::remi::{decode, duration_slots, parse_midi, tick_to_slot, DecodeMode, NoteList, TICKS_PER_QUARTER};

/// Published corpus statistics of the real labeled piano set, kept for
/// side-by-side display. Not produced by this code.
pub const REFERENCE_REAL: ReferenceRow = ReferenceRow { name: "Real EMOPIA", pitch_range: 50.94, n_pitch_classes: 8.50, polyphony: 5.60 };

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub pitch_range: f64,
    pub n_pitch_classes: f64,
    pub polyphony: f64,
}

/// Highest minus lowest pitch; 0 for empty input.
pub fn pitch_range(notes: &NoteList) -> u8 {
    let max = notes.notes.iter().map(|n| n.pitch).max();
    let min = notes.notes.iter().map(|n| n.pitch).min();
    match (max, min) {
        (Some(a), Some(b)) => a - b,
        _ => 0,
    }
}

/// Number of distinct pitches modulo 12.
pub fn n_pitch_classes(notes: &NoteList) -> usize {
    notes.notes.iter().map(|n| n.pitch % 12).collect::<BTreeSet<_>>().len()
}

/// Mean number of sounding notes over sixteenth-note slots where at least
/// one note sounds; 0 if nothing sounds.
pub fn polyphony(notes: &NoteList) -> f64 {
    let list = notes.rescaled(TICKS_PER_QUARTER);
    let mut events: Vec<(u64, i64)> = Vec::with_capacity(list.notes.len() * 2);
    for n in &list.notes {
        let start = tick_to_slot(n.onset);
        events.push((start, 1));
        events.push((start + duration_slots(n.duration), -1));
    }
    events.sort();
    let (mut active, mut sum, mut occupied) = (0i64, 0u64, 0u64);
    let mut prev = 0u64;
    for (slot, delta) in events {
        if active > 0 {
            sum += active as u64 * (slot - prev);
            occupied += slot - prev;
        }
        active += delta;
        prev = slot;
    }
    if occupied == 0 {
        0.0
    } else {
        sum as f64 / occupied as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub class: EmotionClass,
    pub pitch_range: f64,
    pub n_pitch_classes: f64,
    pub polyphony: f64,
    /// No notes; excluded from aggregates.
    pub empty: bool,
}

impl SampleMetrics {
    pub fn of(sample_id: impl Into<String>, class: EmotionClass, notes: &NoteList) -> Self {
        Self {
            sample_id: sample_id.into(),
            class,
            pitch_range: pitch_range(notes) as f64,
            n_pitch_classes: n_pitch_classes(notes) as f64,
            polyphony: polyphony(notes),
            empty: notes.notes.is_empty(),
        }
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub name: String,
    pub count: usize,
    pub pitch_range: Stat,
    pub n_pitch_classes: Stat,
    pub polyphony: Stat,
}

impl GroupSummary {
    fn of<'a>(name: String, samples: impl Iterator<Item = &'a SampleMetrics>) -> Self {
        let kept: Vec<&SampleMetrics> = samples.filter(|s| !s.empty).collect();
        let col = |f: fn(&SampleMetrics) -> f64| Stat::of(&kept.iter().map(|s| f(s)).collect::<Vec<_>>());
        Self {
            name,
            count: kept.len(),
            pitch_range: col(|s| s.pitch_range),
            n_pitch_classes: col(|s| s.n_pitch_classes),
            polyphony: col(|s| s.polyphony),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub per_class: Vec<GroupSummary>,
    pub overall: GroupSummary,
    pub skipped: usize,
    pub empty: usize,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let mut per_class = Vec::new();
        for class in EmotionClass::ALL {
            if samples.iter().any(|s| s.class == class) {
                per_class.push(GroupSummary::of(class.to_string(), samples.iter().filter(|s| s.class == class)));
            }
        }
        let overall = GroupSummary::of("All".into(), samples.iter());
        let empty = samples.iter().filter(|s| s.empty).count();
        Self { samples, per_class, overall, skipped: 0, empty, warnings: Vec::new() }
    }

    /// Aligned table of per-class and overall means ± std, followed by the
    /// reference row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<40} {:>5} {:>16} {:>14} {:>14}", "Group", "N", "PR", "NPC", "POLY");
        let row = |out: &mut String, g: &GroupSummary| {
            let cell = |s: Stat| format!("{:.2} ± {:.2}", s.mean, s.std);
            let _ = writeln!(
                out,
                "{:<40} {:>5} {:>16} {:>14} {:>14}",
                g.name,
                g.count,
                cell(g.pitch_range),
                cell(g.n_pitch_classes),
                cell(g.polyphony)
            );
        };
        for g in &self.per_class {
            row(&mut out, g);
        }
        row(&mut out, &self.overall);
        let r = REFERENCE_REAL;
        let _ = writeln!(
            out,
            "{:<40} {:>5} {:>16.2} {:>14.2} {:>14.2}",
            format!("{} (reference, not reproduced)", r.name),
            "-",
            r.pitch_range,
            r.n_pitch_classes,
            r.polyphony
        );
        let _ = writeln!(out, "skipped {} unreadable, {} empty", self.skipped, self.empty);
        out
    }

    /// One `sample_id class pr npc poly` line per sample.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}",
                s.sample_id, s.class, s.pitch_range, s.n_pitch_classes, s.polyphony
            );
        }
        out
    }
}

fn is_midi(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("mid" | "midi" | "MID" | "MIDI"))
}

fn is_tokens(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("tokens"))
}

/// Evaluates every MIDI (`.mid`, `.midi`) and token (`.tokens`) file in
/// `dir`, in filename order. MIDI files take their class from `labels`
/// (Unlabeled if absent); token files from their manifest. Unreadable files
/// are skipped and counted.
pub fn evaluate_corpus(dir: &Path, labels: Option<&Path>) -> Result<MetricReport> {
    let labels: BTreeMap<String, EmotionClass> = match labels {
        Some(p) => read_label_manifest(p)?,
        None => BTreeMap::new(),
    };
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && (is_midi(p) || is_tokens(p)))
        .collect();
    paths.sort();
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    let mut skipped = 0;
    for path in &paths {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if is_midi(path) {
            match fs::read(path).map_err(Error::from).and_then(|b| parse_midi(&b)) {
                Ok(notes) => {
                    let class = labels.get(&name).copied().unwrap_or(EmotionClass::Unlabeled);
                    samples.push(SampleMetrics::of(name, class, &notes));
                }
                Err(e) => {
                    skipped += 1;
                    warnings.push(format!("{name}: {e}"));
                }
            }
        } else {
            match read_token_file(path) {
                Ok(entries) => {
                    for (i, e) in entries.iter().enumerate() {
                        match decode(&e.sequence.tokens, DecodeMode::Robust) {
                            Ok(d) => samples.push(SampleMetrics::of(format!("{name}:{i}:{}", e.source), e.sequence.label, &d.notes)),
                            Err(err) => {
                                skipped += 1;
                                warnings.push(format!("{name}:{i}: {err}"));
                            }
                        }
                    }
                }
                Err(e) => {
                    skipped += 1;
                    warnings.push(format!("{name}: {e}"));
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Contract(format!(
            "no readable samples in {} ({skipped} skipped)",
            dir.display()
        )));
    }
    let mut report = MetricReport::from_samples(samples);
    report.skipped = skipped;
    report.warnings = warnings;
    Ok(report)
}
