//! Per-label favor/against guidance from a vision-language model.
//!
//! Each flagged label of a case gets one call: the image plus the radiologist
//! prompt rendered for that label. Replies are expected to carry a JSON object
//! `{"label", "favor", "against"}`; failures are recorded per record and never
//! abort a batch.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::endpoint::{parallel_map, EndpointError, ImageData, VlmClient, VlmRequest};
use crate::error::{Error, Result};
use crate::ingestion::LabelSchema;
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::riskcontrol::PredictionSet;

/// The radiologist guidance prompt with `{item}`, `{label_name}`, `{view}` and
/// `{view_long}` placeholders.
pub const GUIDANCE_TEMPLATE: &str = include_str!("../prompts/guidance.txt");

/// Projection of the radiograph, substituted into prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum View {
    #[default]
    AP,
    PA,
}

impl View {
    pub fn short(self) -> &'static str {
        match self {
            View::AP => "AP",
            View::PA => "PA",
        }
    }

    pub fn long(self) -> &'static str {
        match self {
            View::AP => "anterior-posterior",
            View::PA => "posterior-anterior",
        }
    }
}

/// Hex SHA-256 of a template's text.
pub fn template_hash(template: &str) -> String {
    hex::encode(Sha256::digest(template.as_bytes()))
}

/// Substitutes the label and view placeholders of `template`. `{item}` and
/// `{label_name}` both receive the class name.
pub fn fill_template(template: &str, label_name: &str, view: View) -> String {
    template
        .replace("{item}", label_name)
        .replace("{label_name}", label_name)
        .replace("{view_long}", view.long())
        .replace("{view}", view.short())
}

pub fn render_prompt(schema: &LabelSchema, label_name: &str, view: View) -> Result<String> {
    let index = schema
        .index_of(label_name)
        .ok_or_else(|| Error::UnknownLabel(label_name.to_string()))?;
    Ok(fill_template(GUIDANCE_TEMPLATE, schema.name(index), view))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceStatus {
    Ok,
    ParseFailed,
    ApiFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub case_id: String,
    pub label_name: String,
    pub favor: String,
    pub against: String,
    pub model_id: String,
    pub raw_response: String,
    pub status: GuidanceStatus,
    #[serde(default)]
    pub template_hash: String,
}

impl GuidanceRecord {
    pub fn is_ok(&self) -> bool {
        self.status == GuidanceStatus::Ok
    }
}

/// Bodies of fenced code blocks, in order of appearance.
fn fenced_blocks(raw: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = raw;
    while let Some(open) = rest.find("```") {
        let after = &rest[open + 3..];
        // skip an info string such as `json`
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(close) => {
                blocks.push(&body[..close]);
                rest = &body[close + 3..];
            }
            None => break,
        }
    }
    blocks
}

fn first_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    for (pos, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[pos..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Extracts the first JSON object from a reply, looking inside fenced blocks
/// before the raw text. The returned record has empty `case_id` and
/// `model_id`.
pub fn parse_guidance_json(raw: &str, expected_label: &str) -> GuidanceRecord {
    let object = fenced_blocks(raw)
        .into_iter()
        .find_map(first_json_object)
        .or_else(|| first_json_object(raw));

    let mut record = GuidanceRecord {
        case_id: String::new(),
        label_name: expected_label.to_string(),
        favor: String::new(),
        against: String::new(),
        model_id: String::new(),
        raw_response: raw.to_string(),
        status: GuidanceStatus::ParseFailed,
        template_hash: String::new(),
    };
    let Some(object) = object else {
        return record;
    };
    let field = |key: &str| object.get(key).and_then(|v| v.as_str()).map(str::trim);
    if let (Some(label), Some(favor), Some(against)) =
        (field("label"), field("favor"), field("against"))
    {
        if label.eq_ignore_ascii_case(expected_label.trim()) && !favor.is_empty() && !against.is_empty() {
            record.favor = favor.to_string();
            record.against = against.to_string();
            record.status = GuidanceStatus::Ok;
        }
    }
    record
}

/// One case's flagged labels plus its image, ready for generation.
pub struct GuidanceJob<'a> {
    pub set: &'a PredictionSet,
    pub image: &'a ImageData,
}

pub struct GuidanceGenerator<'a> {
    pub client: &'a dyn VlmClient,
    pub schema: &'a LabelSchema,
    pub view: View,
    pub max_retries: u32,
    pub max_parallel: usize,
}

struct LabelTask<'a> {
    case_id: &'a str,
    label: &'a str,
    image: &'a ImageData,
}

impl GuidanceGenerator<'_> {
    fn request_one(&self, task: &LabelTask<'_>, prompt: &str, hash: &str) -> GuidanceRecord {
        let attempts = self.max_retries as usize + 1;
        let mut last_raw = String::new();
        let mut last_status = GuidanceStatus::ApiFailed;
        for attempt in 1..=attempts {
            let request = VlmRequest {
                case_id: task.case_id,
                label: task.label,
                image: task.image,
                prompt,
            };
            match self.client.complete(&request) {
                Ok(raw) => {
                    let mut record = parse_guidance_json(&raw, task.label);
                    if record.is_ok() {
                        record.case_id = task.case_id.to_string();
                        record.model_id = self.client.model_id().to_string();
                        record.template_hash = hash.to_string();
                        return record;
                    }
                    last_raw = raw;
                    last_status = GuidanceStatus::ParseFailed;
                }
                Err(e) => {
                    last_raw = match &e {
                        EndpointError::Timeout => "timeout".to_string(),
                        other => other.to_string(),
                    };
                    last_status = GuidanceStatus::ApiFailed;
                }
            }
            warn!(
                case_id = task.case_id,
                label = task.label,
                attempt,
                "guidance attempt failed: {last_raw:.80}"
            );
        }
        GuidanceRecord {
            case_id: task.case_id.to_string(),
            label_name: task.label.to_string(),
            favor: String::new(),
            against: String::new(),
            model_id: self.client.model_id().to_string(),
            raw_response: last_raw,
            status: last_status,
            template_hash: hash.to_string(),
        }
    }

    /// Guidance for every flagged label of every job, optionally served from
    /// `cache`. Output is grouped by job and ordered by class index within a
    /// job.
    pub fn generate_batch(
        &self,
        jobs: &[GuidanceJob<'_>],
        cache: Option<&GuidanceStore>,
    ) -> Vec<Vec<GuidanceRecord>> {
        let hash = template_hash(GUIDANCE_TEMPLATE);
        let model = self.client.model_id();
        let mut tasks = Vec::new();
        let mut slots: Vec<Vec<Option<GuidanceRecord>>> = Vec::with_capacity(jobs.len());
        for (j, job) in jobs.iter().enumerate() {
            let mut row = Vec::with_capacity(job.set.members.len());
            for (m, &class) in job.set.members.iter().enumerate() {
                let label = self.schema.name(class);
                let cached = cache.and_then(|c| c.get(&job.set.case_id, label, model, &hash));
                match cached {
                    Some(record) => row.push(Some(record.clone())),
                    None => {
                        row.push(None);
                        tasks.push((
                            j,
                            m,
                            LabelTask {
                                case_id: &job.set.case_id,
                                label,
                                image: job.image,
                            },
                        ));
                    }
                }
            }
            slots.push(row);
        }
        let results = parallel_map(&tasks, self.max_parallel, |(_, _, task)| {
            let prompt = fill_template(GUIDANCE_TEMPLATE, task.label, self.view);
            self.request_one(task, &prompt, &hash)
        });
        for ((j, m, _), record) in tasks.iter().zip(results) {
            slots[*j][*m] = Some(record);
        }
        slots
            .into_iter()
            .map(|row| row.into_iter().map(|r| r.expect("slot filled")).collect())
            .collect()
    }

    pub fn generate_guidance(&self, set: &PredictionSet, image: &ImageData) -> Vec<GuidanceRecord> {
        self.generate_batch(&[GuidanceJob { set, image }], None)
            .pop()
            .unwrap_or_default()
    }
}

/// JSON Lines store of guidance records, doubling as the request cache.
#[derive(Debug, Clone, Default)]
pub struct GuidanceStore {
    records: Vec<GuidanceRecord>,
    index: HashMap<(String, String), usize>,
}

impl GuidanceStore {
    pub fn from_records(records: Vec<GuidanceRecord>) -> Self {
        let mut store = Self::default();
        for r in records {
            store.insert(r);
        }
        store
    }

    /// Later records for the same `(case_id, label_name)` replace earlier ones.
    pub fn insert(&mut self, record: GuidanceRecord) {
        let key = (record.case_id.clone(), record.label_name.clone());
        match self.index.get(&key) {
            Some(&i) => self.records[i] = record,
            None => {
                self.index.insert(key, self.records.len());
                self.records.push(record);
            }
        }
    }

    pub fn records(&self) -> &[GuidanceRecord] {
        &self.records
    }

    pub fn lookup(&self, case_id: &str, label_name: &str) -> Option<&GuidanceRecord> {
        self.index
            .get(&(case_id.to_string(), label_name.to_string()))
            .map(|&i| &self.records[i])
    }

    /// Cache hit: an ok record for the same case, label, model and template.
    pub fn get(&self, case_id: &str, label_name: &str, model_id: &str, template_hash: &str) -> Option<&GuidanceRecord> {
        self.lookup(case_id, label_name)
            .filter(|r| r.is_ok() && r.model_id == model_id && r.template_hash == template_hash)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_jsonl(path).map(Self::from_records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}
