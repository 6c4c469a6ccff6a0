//! Edit-distance scoring, corpus error rates and learning-curve export.

mod curves;

pub use curves::{export_curves, parse_curves, render_svg, EpochMetrics, MetricsLog};

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Alignment cost between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

/// Levenshtein alignment of hypothesis `hyp` against reference `reference`.
///
/// Among minimal alignments the backtrace prefers substitutions, then
/// deletions, then insertions, so counts are deterministic.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        cost[i * w] = i;
        for j in 1..=m {
            let sub = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = cost[(i - 1) * w + j] + 1;
            let ins = cost[i * w + j - 1] + 1;
            cost[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts {
        distance: cost[n * w + m],
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let differ = reference[i - 1] != hyp[j - 1];
            if here == cost[(i - 1) * w + j - 1] + usize::from(differ) {
                counts.substitutions += usize::from(differ);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * w + j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
}

/// Words are separated by spaces; empty words are ignored.
pub fn tokenize(text: &str, unit: Unit) -> Vec<String> {
    match unit {
        Unit::Char => text.chars().map(String::from).collect(),
        Unit::Word => text.split(' ').filter(|w| !w.is_empty()).map(String::from).collect(),
    }
}

/// Corpus-level error counts for one unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct UnitScore {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

impl UnitScore {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    /// Total edits over total reference length, as a fraction.
    pub fn rate(&self) -> f64 {
        self.errors() as f64 / self.ref_len.max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub chars: UnitScore,
    pub words: UnitScore,
}

impl ScoreReport {
    pub fn cer(&self) -> f64 {
        self.chars.rate()
    }

    pub fn wer(&self) -> f64 {
        self.words.rate()
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "unit   ref     sub   ins   del   rate")?;
        for (name, s) in [("char", &self.chars), ("word", &self.words)] {
            writeln!(
                f,
                "{name:<6} {:<7} {:<5} {:<5} {:<5} {:.1}%",
                s.ref_len,
                s.substitutions,
                s.insertions,
                s.deletions,
                100.0 * s.rate()
            )?;
        }
        Ok(())
    }
}

pub fn score_units(
    hyps: &BTreeMap<String, String>,
    refs: &BTreeMap<String, String>,
    unit: Unit,
) -> Result<UnitScore> {
    if refs.is_empty() {
        return Err(Error::Input("empty reference corpus".into()));
    }
    let mut total = UnitScore::default();
    for (id, reference) in refs {
        let r = tokenize(reference, unit);
        let h = match hyps.get(id) {
            Some(h) => tokenize(h, unit),
            None => {
                log::warn!("no hypothesis for {id}; counting it as fully deleted");
                Vec::new()
            }
        };
        let e = edit_distance(&r, &h);
        total.substitutions += e.substitutions;
        total.insertions += e.insertions;
        total.deletions += e.deletions;
        total.ref_len += r.len();
    }
    Ok(total)
}

/// CER and WER over a corpus, keyed by utterance id.
pub fn score_corpus(
    hyps: &BTreeMap<String, String>,
    refs: &BTreeMap<String, String>,
) -> Result<ScoreReport> {
    Ok(ScoreReport {
        chars: score_units(hyps, refs, Unit::Char)?,
        words: score_units(hyps, refs, Unit::Word)?,
    })
}

/// Parses `id TAB text [TAB extra...]` lines.
pub fn parse_transcripts(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let id = parts.next().unwrap_or_default();
        let Some(body) = parts.next() else {
            return Err(Error::Format {
                line: i + 1,
                msg: "expected `id<TAB>text`".into(),
            });
        };
        if out.insert(id.to_string(), body.to_string()).is_some() {
            return Err(Error::Format {
                line: i + 1,
                msg: format!("duplicate id {id}"),
            });
        }
    }
    Ok(out)
}

pub fn load_transcripts(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_transcripts(&text)
}

#[cfg(test)]
mod tests;
