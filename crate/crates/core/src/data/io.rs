use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Utterance};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<Vec<f64>>>,
}

/// One JSON object per line: `id`, optional `text`, optional `features`
/// (array of frames, each an array of numbers).
pub fn dataset_to_string(utts: &[Utterance]) -> String {
    let mut out = String::new();
    for u in utts {
        let rec = Record {
            id: u.id.clone(),
            text: u.text.clone(),
            features: u.features.as_ref().map(FeatureSequence::rows),
        };
        let line = serde_json::to_string(&rec).expect("records always serialize");
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn parse_dataset(text: &str) -> Result<Vec<Utterance>> {
    let mut utts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |msg: String| Error::Format { line: line_no, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        if rec.text.is_none() && rec.features.is_none() {
            return Err(fail(format!("record {} has neither text nor features", rec.id)));
        }
        let features = match rec.features {
            Some(rows) => Some(FeatureSequence::from_rows(&rows).map_err(|e| fail(e.to_string()))?),
            None => None,
        };
        utts.push(Utterance {
            id: rec.id,
            features,
            text: rec.text,
        });
    }
    Ok(utts)
}

pub fn save_dataset(path: impl AsRef<Path>, utts: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, dataset_to_string(utts)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Plain text corpus, one sentence per line.
pub fn save_texts(path: impl AsRef<Path>, texts: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut body = texts.join("\n");
    body.push('\n');
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_texts(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}
