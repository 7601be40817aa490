//! Token corpus files: one sequence per line as space-separated indices, with
//! a `<file>.manifest` sidecar of `source=label` lines in the same order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::emotion::EmotionClass;
use crate::error::{Error, Result};

use super::codec::TokenSequence;

/// A sequence together with the name of the file it came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub source: String,
    pub sequence: TokenSequence,
}

pub fn manifest_path(token_file: &Path) -> PathBuf {
    let mut name = token_file.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

pub fn format_tokens(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

pub fn parse_tokens(line: &str) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Config(format!("bad token `{t}`: {e}"))))
        .collect()
}

/// Writes the token file and its manifest.
pub fn write_token_file(path: &Path, entries: &[CorpusEntry]) -> Result<()> {
    let mut body = String::new();
    let mut manifest = String::new();
    for e in entries {
        body.push_str(&format_tokens(&e.sequence.tokens));
        body.push('\n');
        manifest.push_str(&format!("{}={}\n", e.source, e.sequence.label));
    }
    fs::write(path, body)?;
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

/// Reads a token file. Without a manifest every sequence is Unlabeled and
/// named by its line number.
pub fn read_token_file(path: &Path) -> Result<Vec<CorpusEntry>> {
    let body = fs::read_to_string(path)?;
    let mpath = manifest_path(path);
    let manifest: Option<Vec<(String, EmotionClass)>> = if mpath.exists() {
        let text = fs::read_to_string(&mpath)?;
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (source, label) = line
                .rsplit_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line without `=`: {line}")))?;
            rows.push((source.to_string(), label.parse()?));
        }
        Some(rows)
    } else {
        None
    };
    let lines: Vec<&str> = body.lines().collect();
    if let Some(m) = &manifest {
        if m.len() != lines.len() {
            return Err(Error::Config(format!(
                "{} has {} lines but its manifest has {}",
                path.display(),
                lines.len(),
                m.len()
            )));
        }
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let (source, label) = match &manifest {
                Some(m) => m[i].clone(),
                None => (format!("line{i}"), EmotionClass::Unlabeled),
            };
            Ok(CorpusEntry { source, sequence: TokenSequence::new(parse_tokens(line)?, label)? })
        })
        .collect()
}

/// Reads a label manifest of `<filename> <Q1|Q2|Q3|Q4>` lines.
pub fn read_label_manifest(path: &Path) -> Result<BTreeMap<String, EmotionClass>> {
    let text = fs::read_to_string(path)?;
    let mut labels = BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Config(format!("label manifest line `{line}` is not `<file> <label>`")));
        };
        let class: EmotionClass = label.parse()?;
        if !class.is_labeled() {
            return Err(Error::Config(format!("label manifest uses `{label}`; expected Q1..Q4")));
        }
        labels.insert(name.to_string(), class);
    }
    Ok(labels)
}
