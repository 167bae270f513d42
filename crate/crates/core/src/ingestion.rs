//! Loading and validation of score matrices, label matrices, class schemas and
//! case manifests.
//!
//! File formats:
//!
//! * `scores.csv` / `labels.csv`: header `case_id,<name1>,...,<nameK>`, one
//!   row per case. Scores lie in `[0, 1]`, labels are `0` or `1`.
//! * `schema.json`: a JSON array of the `K` class names, in column order.
//! * `manifest.json`: a JSON array of `{case_id, image, split}` objects where
//!   `split` is `"calibration"` or `"test"`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The fourteen CheXpert observations in their conventional column order.
///
/// "Enlarged Cardiomediastinum" is also accepted under the short alias
/// "Cardiomediastinum" by [`LabelSchema::index_of`].
pub const CHEXPERT_LABELS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

const LABEL_ALIASES: [(&str, &str); 1] = [("Cardiomediastinum", "Enlarged Cardiomediastinum")];

/// Ordered, unique class names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSchema {
    names: Vec<String>,
}

impl LabelSchema {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::SchemaMismatch("schema must list at least one class".into()));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(Error::SchemaMismatch("class names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn chexpert() -> Self {
        Self {
            names: CHEXPERT_LABELS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// Exact lookup first, then a case-insensitive match, then known aliases.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            return Some(i);
        }
        if let Some(i) = self.names.iter().position(|n| n.eq_ignore_ascii_case(name)) {
            return Some(i);
        }
        LABEL_ALIASES
            .iter()
            .find(|(alias, _)| alias.eq_ignore_ascii_case(name))
            .and_then(|(_, canonical)| self.names.iter().position(|n| n == canonical))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.names).expect("string list serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

impl TryFrom<Vec<String>> for LabelSchema {
    type Error = Error;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<LabelSchema> for Vec<String> {
    fn from(schema: LabelSchema) -> Self {
        schema.names
    }
}

/// Row-major `n x K` matrix of model scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    case_ids: Vec<String>,
    k: usize,
    values: Vec<f64>,
}

/// Row-major `n x K` matrix of binary ground-truth labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatrix {
    case_ids: Vec<String>,
    k: usize,
    values: Vec<u8>,
}

fn check_case_ids(case_ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(case_ids.len());
    for id in case_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Alignment(format!("duplicate case_id {id:?}")));
        }
    }
    Ok(())
}

impl ScoreMatrix {
    pub fn new(case_ids: Vec<String>, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != case_ids.len() * k {
            return Err(Error::SchemaMismatch(format!(
                "{} values cannot form {} rows of {k} columns",
                values.len(),
                case_ids.len()
            )));
        }
        check_case_ids(&case_ids)?;
        if let Some((pos, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Range(format!(
                "score {v} for case {:?} is outside [0, 1]",
                case_ids[pos / k]
            )));
        }
        Ok(Self { case_ids, k, values })
    }

    /// Builds a matrix from nested rows; convenient for tests and fixtures.
    pub fn from_rows(case_ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::SchemaMismatch("ragged score rows".into()));
        }
        Self::new(case_ids, k, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.case_ids.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            case_ids: indices.iter().map(|&i| self.case_ids[i].clone()).collect(),
            k: self.k,
            values,
        }
    }
}

impl LabelMatrix {
    pub fn new(case_ids: Vec<String>, k: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != case_ids.len() * k {
            return Err(Error::SchemaMismatch(format!(
                "{} labels cannot form {} rows of {k} columns",
                values.len(),
                case_ids.len()
            )));
        }
        check_case_ids(&case_ids)?;
        if let Some((pos, v)) = values.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(Error::Range(format!(
                "label {v} for case {:?} is not 0 or 1",
                case_ids[pos / k]
            )));
        }
        Ok(Self { case_ids, k, values })
    }

    pub fn from_rows(case_ids: Vec<String>, rows: &[Vec<u8>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::SchemaMismatch("ragged label rows".into()));
        }
        Self::new(case_ids, k, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.case_ids.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.case_ids.is_empty()
    }

    pub fn case_ids(&self) -> &[String] {
        &self.case_ids
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> + '_ {
        (0..self.n()).map(move |i| self.row(i))
    }

    /// Number of positives per class.
    pub fn positives(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for row in self.rows() {
            for (c, &y) in counts.iter_mut().zip(row) {
                *c += y as usize;
            }
        }
        counts
    }

    fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.k);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            case_ids: indices.iter().map(|&i| self.case_ids[i].clone()).collect(),
            k: self.k,
            values,
        }
    }

    /// Reorders rows to follow `order`; both must hold the same case set.
    pub fn aligned_to(&self, order: &[String]) -> Result<Self> {
        if order.len() != self.n() {
            return Err(Error::Alignment(format!(
                "{} labelled cases vs {} requested",
                self.n(),
                order.len()
            )));
        }
        self.subset(order)
    }

    /// Rows for `ids`, in that order.
    pub fn subset(&self, ids: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> = self
            .case_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut rows = Vec::with_capacity(ids.len());
        for id in ids {
            match index.get(id.as_str()) {
                Some(&i) => rows.push(i),
                None => {
                    return Err(Error::Alignment(format!("case_id {id:?} has no labels")));
                }
            }
        }
        Ok(self.select(&rows))
    }
}

/// Which half of the data a case belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub case_id: String,
    /// Opaque path or URI of the input image.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaseManifest {
    entries: Vec<CaseEntry>,
    index: HashMap<String, usize>,
}

impl CaseManifest {
    pub fn new(entries: Vec<CaseEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.case_id.clone(), i).is_some() {
                return Err(Error::Alignment(format!(
                    "case_id {:?} appears twice in the manifest",
                    e.case_id
                )));
            }
        }
        Ok(Self { entries, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<CaseEntry> =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn entries(&self) -> &[CaseEntry] {
        &self.entries
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseEntry> {
        self.index.get(case_id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Scores and labels for the same cases in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scores: ScoreMatrix,
    pub labels: LabelMatrix,
}

impl Dataset {
    pub fn new(scores: ScoreMatrix, labels: LabelMatrix) -> Result<Self> {
        if scores.k() != labels.k() {
            return Err(Error::SchemaMismatch(format!(
                "scores have {} columns, labels have {}",
                scores.k(),
                labels.k()
            )));
        }
        if scores.case_ids() != labels.case_ids() {
            return Err(Error::Alignment("score and label rows are not aligned".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn n(&self) -> usize {
        self.scores.n()
    }

    pub fn k(&self) -> usize {
        self.scores.k()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

struct RawTable {
    case_ids: Vec<String>,
    cells: Vec<String>,
}

fn read_table(path: &Path, schema: &LabelSchema) -> Result<RawTable> {
    let context = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::parse(&context, e),
        })?;
    let header = reader.headers().map_err(|e| Error::parse(&context, e))?.clone();
    if header.get(0) != Some("case_id") {
        return Err(Error::parse(&context, "first header column must be `case_id`"));
    }
    let columns: Vec<&str> = header.iter().skip(1).collect();
    if columns.len() != schema.k() {
        return Err(Error::SchemaMismatch(format!(
            "{context} has {} class columns, schema has {}",
            columns.len(),
            schema.k()
        )));
    }
    for (i, col) in columns.iter().enumerate() {
        if schema.index_of(col) != Some(i) {
            return Err(Error::SchemaMismatch(format!(
                "{context} column {} is {col:?}, schema expects {:?}",
                i + 1,
                schema.name(i)
            )));
        }
    }
    let mut case_ids = Vec::new();
    let mut cells = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(&context, e))?;
        if record.len() != schema.k() + 1 {
            return Err(Error::parse(
                &context,
                format!("row has {} fields, expected {}", record.len(), schema.k() + 1),
            ));
        }
        case_ids.push(record[0].to_string());
        cells.extend(record.iter().skip(1).map(str::to_string));
    }
    Ok(RawTable { case_ids, cells })
}

pub fn load_scores(path: &Path, schema: &LabelSchema) -> Result<ScoreMatrix> {
    let table = read_table(path, schema)?;
    let values = table
        .cells
        .iter()
        .map(|c| {
            c.parse::<f64>()
                .map_err(|e| Error::parse(path.display().to_string(), format!("{c:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreMatrix::new(table.case_ids, schema.k(), values)
}

pub fn load_labels(path: &Path, schema: &LabelSchema) -> Result<LabelMatrix> {
    let table = read_table(path, schema)?;
    let values = table
        .cells
        .iter()
        .map(|c| match c.parse::<f64>() {
            Ok(0.0) => Ok(0),
            Ok(1.0) => Ok(1),
            Ok(v) => Err(Error::Range(format!("label {v} is not 0 or 1"))),
            Err(e) => Err(Error::parse(path.display().to_string(), format!("{c:?}: {e}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMatrix::new(table.case_ids, schema.k(), values)
}

/// Loads scores, labels and schema; label rows are reordered to follow the
/// score file.
pub fn load_dataset(
    score_path: &Path,
    label_path: &Path,
    schema_path: &Path,
) -> Result<(ScoreMatrix, LabelMatrix, LabelSchema)> {
    let schema = LabelSchema::load(schema_path)?;
    let scores = load_scores(score_path, &schema)?;
    let labels = load_labels(label_path, &schema)?;

    let score_ids: HashSet<&str> = scores.case_ids().iter().map(String::as_str).collect();
    if let Some(id) = labels.case_ids().iter().find(|id| !score_ids.contains(id.as_str())) {
        return Err(Error::Alignment(format!(
            "case_id {id:?} has labels but no scores"
        )));
    }
    let labels = labels.aligned_to(scores.case_ids())?;
    Ok((scores, labels, schema))
}

fn write_table<T: ToString>(
    path: &Path,
    schema: &LabelSchema,
    case_ids: &[String],
    k: usize,
    cell: impl Fn(usize, usize) -> T,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| {
        Error::io(path, std::io::Error::other(e.to_string()))
    })?;
    let to_io = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    let mut header = vec!["case_id".to_string()];
    header.extend(schema.names().iter().cloned());
    writer.write_record(&header).map_err(to_io)?;
    for (i, id) in case_ids.iter().enumerate() {
        let mut row = Vec::with_capacity(k + 1);
        row.push(id.clone());
        row.extend((0..k).map(|j| cell(i, j).to_string()));
        writer.write_record(&row).map_err(to_io)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes the three dataset files. Scores use the shortest representation
/// that parses back to the identical `f64`.
pub fn save_dataset(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    schema: &LabelSchema,
    score_path: &Path,
    label_path: &Path,
    schema_path: &Path,
) -> Result<()> {
    if scores.k() != schema.k() || labels.k() != schema.k() {
        return Err(Error::SchemaMismatch("matrix width differs from schema".into()));
    }
    schema.save(schema_path)?;
    write_table(score_path, schema, scores.case_ids(), scores.k(), |i, j| {
        scores.row(i)[j]
    })?;
    write_table(label_path, schema, labels.case_ids(), labels.k(), |i, j| {
        labels.row(i)[j]
    })
}

/// Partitions aligned scores and labels by the manifest's split tags,
/// preserving row order within each half.
pub fn split_dataset(
    scores: &ScoreMatrix,
    labels: &LabelMatrix,
    manifest: &CaseManifest,
) -> Result<(Dataset, Dataset)> {
    if scores.case_ids() != labels.case_ids() {
        return Err(Error::Alignment("score and label rows are not aligned".into()));
    }
    let mut calibration = Vec::new();
    let mut test = Vec::new();
    for (i, id) in scores.case_ids().iter().enumerate() {
        let entry = manifest
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("case_id {id:?} is missing from the manifest")))?;
        match entry.split {
            Some(Split::Calibration) => calibration.push(i),
            Some(Split::Test) => test.push(i),
            None => return Err(Error::MissingSplitTag(id.clone())),
        }
    }
    Ok((
        Dataset::new(scores.select(&calibration), labels.select(&calibration))?,
        Dataset::new(scores.select(&test), labels.select(&test))?,
    ))
}
