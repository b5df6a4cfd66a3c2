// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labeled bias statements: the compiled-in corpus, JSONL I/O and
//! deterministic stratified splits.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Identifier of the compiled-in corpus.
pub const BUILTIN_DATASET_ID: &str = "builtin-v1";

const BUILTIN_CORPUS: &str = include_str!("../data/bias_corpus_v1.jsonl");

/// Maximum statement length in tokens.
pub const MAX_STATEMENT_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Neutral = 0,
    Biased = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_biased(self) -> bool {
        self == Label::Biased
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Neutral => Label::Biased,
            Label::Biased => Label::Neutral,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Neutral),
            1 => Ok(Label::Biased),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Neutral => f.write_str("neutral"),
            Label::Biased => f.write_str("biased"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Gender,
    Race,
    Age,
    Religion,
    Disability,
    Socioeconomic,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Gender,
        Category::Race,
        Category::Age,
        Category::Religion,
        Category::Disability,
        Category::Socioeconomic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Gender => "gender",
            Category::Race => "race",
            Category::Age => "age",
            Category::Religion => "religion",
            Category::Disability => "disability",
            Category::Socioeconomic => "socioeconomic",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledStatement {
    pub text: String,
    pub label: Label,
    pub category: Category,
}

/// Test fraction and seed for [`split`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            test_fraction: 0.3,
            seed: 0,
        }
    }
}

/// The 140-statement corpus shipped with the crate (70 neutral, 70 biased).
pub fn generate_builtin_dataset() -> Vec<LabeledStatement> {
    parse_jsonl(BUILTIN_CORPUS).expect("compiled-in corpus is valid")
}

/// Canonical JSONL serialization, one record per line.
pub fn to_jsonl(data: &[LabeledStatement]) -> String {
    let mut out = String::new();
    for s in data {
        out.push_str(&serde_json::to_string(s).expect("statements always serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(data: &[LabeledStatement], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(data).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct RawRecord {
    text: Option<String>,
    label: Option<serde_json::Value>,
    category: Option<String>,
}

/// Parses JSONL content; blank lines are skipped.
pub fn parse_jsonl(content: &str) -> Result<Vec<LabeledStatement>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| Error::Parse { line: line_no, msg };
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
        let text = raw.text.ok_or_else(|| err("missing key `text`".into()))?;
        if text.trim().is_empty() {
            return Err(err("`text` is empty".into()));
        }
        let label = raw.label.ok_or_else(|| err("missing key `label`".into()))?;
        let label = label
            .as_u64()
            .and_then(|v| u8::try_from(v).ok())
            .ok_or_else(|| err(format!("label must be 0 or 1, got {label}")))
            .and_then(|v| Label::try_from(v).map_err(err))?;
        let category = raw
            .category
            .ok_or_else(|| err("missing key `category`".into()))?
            .parse()
            .map_err(err)?;
        out.push(LabeledStatement {
            text,
            label,
            category,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<LabeledStatement>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&content).map_err(|e| e.tagged(path.display().to_string()))
}

/// Content-derived identifier for an external corpus.
pub fn dataset_id(data: &[LabeledStatement]) -> String {
    let digest = Sha256::digest(to_jsonl(data).as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

/// Stratified train/test index split over `labels`.
///
/// Each label's indices are shuffled with a generator seeded from
/// `spec.seed`; `round(test_fraction · count)` of them (clamped so both sides
/// keep at least one) go to the test side. Both index lists come back sorted.
pub fn split_indices(labels: &[Label], spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.test_fraction > 0.0 && spec.test_fraction < 1.0) {
        return Err(Error::Domain(format!(
            "test_fraction must be in (0, 1), got {}",
            spec.test_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in [Label::Neutral, Label::Biased] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.len() < 2 {
            return Err(Error::Stratification(format!(
                "label {} ({label}) has {} example(s); at least 2 are needed",
                label.as_u8(),
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((spec.test_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Stratified split of statements; see [`split_indices`].
pub fn split(
    data: &[LabeledStatement],
    spec: &SplitSpec,
) -> Result<(Vec<LabeledStatement>, Vec<LabeledStatement>)> {
    let labels: Vec<Label> = data.iter().map(|s| s.label).collect();
    let (train, test) = split_indices(&labels, spec)?;
    Ok((
        train.into_iter().map(|i| data[i].clone()).collect(),
        test.into_iter().map(|i| data[i].clone()).collect(),
    ))
}
