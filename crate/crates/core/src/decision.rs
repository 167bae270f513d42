//! Final per-case decisions under the four pipeline configurations.
//!
//! `standard` and `crc` take the prediction set as the decision. In
//! `crc_plus_plus` and `confguide` a reviewer (a model or a person) gives a
//! present/absent verdict for each flagged label; labels outside the set are
//! forced absent and cannot be overturned, so review can only remove
//! positives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::endpoint::{ImageData, VlmClient, VlmRequest};
use crate::error::{Error, Result};
use crate::guidance::{fill_template, GuidanceRecord, View};
use crate::ingestion::LabelSchema;
use crate::riskcontrol::PredictionSet;

pub const REVIEWER_TEMPLATE: &str = include_str!("../prompts/reviewer.txt");
pub const REVIEWER_GUIDED_TEMPLATE: &str = include_str!("../prompts/reviewer_guided.txt");

/// Reviewer id recorded for configurations without a reviewer.
pub const DIRECT_REVIEWER: &str = "direct";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionConfig {
    Standard,
    Crc,
    CrcPlusPlus,
    Confguide,
}

impl DecisionConfig {
    pub const ALL: [DecisionConfig; 4] = [
        DecisionConfig::Standard,
        DecisionConfig::Crc,
        DecisionConfig::CrcPlusPlus,
        DecisionConfig::Confguide,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecisionConfig::Standard => "standard",
            DecisionConfig::Crc => "crc",
            DecisionConfig::CrcPlusPlus => "crc_plus_plus",
            DecisionConfig::Confguide => "confguide",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DecisionConfig::Standard => "Standard (λ=0.5)",
            DecisionConfig::Crc => "CRC",
            DecisionConfig::CrcPlusPlus => "CRC++",
            DecisionConfig::Confguide => "ConfGuide",
        }
    }

    pub fn is_reviewed(self) -> bool {
        matches!(self, DecisionConfig::CrcPlusPlus | DecisionConfig::Confguide)
    }
}

impl fmt::Display for DecisionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecisionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DecisionConfig::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown configuration {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    ForcedAbsent,
    ReviewedPresent,
    ReviewedAbsent,
    SetDirect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Present,
    Absent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub case_id: String,
    pub decisions: Vec<u8>,
    pub provenance: Vec<Provenance>,
    pub config: DecisionConfig,
    pub reviewer_id: String,
    /// Flagged labels whose verdict could not be obtained and was defaulted
    /// to present.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub defaulted: Vec<String>,
}

impl DecisionRecord {
    /// Indices of classes decided present.
    pub fn positives(&self) -> Vec<usize> {
        self.decisions
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 1)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Takes the prediction set itself as the decision.
pub fn decide_direct(set: &PredictionSet, k: usize, config: DecisionConfig) -> DecisionRecord {
    let mut decisions = vec![0; k];
    let mut provenance = vec![Provenance::ForcedAbsent; k];
    for &m in &set.members {
        decisions[m] = 1;
        provenance[m] = Provenance::SetDirect;
    }
    DecisionRecord {
        case_id: set.case_id.clone(),
        decisions,
        provenance,
        config,
        reviewer_id: DIRECT_REVIEWER.to_string(),
        defaulted: Vec::new(),
    }
}

/// Applies one verdict per flagged class; every other class is forced absent.
pub fn review_case(
    set: &PredictionSet,
    k: usize,
    verdicts: &BTreeMap<usize, Verdict>,
    config: DecisionConfig,
    reviewer_id: &str,
    schema: &LabelSchema,
) -> Result<DecisionRecord> {
    if let Some(&class) = verdicts.keys().find(|&&c| !set.contains(c)) {
        let name = if class < schema.k() { schema.name(class).to_string() } else { class.to_string() };
        return Err(Error::VerdictOutsideSet(name));
    }
    if let Some(&class) = set.members.iter().find(|c| !verdicts.contains_key(c)) {
        return Err(Error::IncompleteReview(schema.name(class).to_string()));
    }
    let mut decisions = vec![0; k];
    let mut provenance = vec![Provenance::ForcedAbsent; k];
    for (&class, &verdict) in verdicts {
        match verdict {
            Verdict::Present => {
                decisions[class] = 1;
                provenance[class] = Provenance::ReviewedPresent;
            }
            Verdict::Absent => provenance[class] = Provenance::ReviewedAbsent,
        }
    }
    Ok(DecisionRecord {
        case_id: set.case_id.clone(),
        decisions,
        provenance,
        config,
        reviewer_id: reviewer_id.to_string(),
        defaulted: Vec::new(),
    })
}

/// Resolves label-name verdicts against the schema, then reviews.
pub fn review_case_by_name(
    set: &PredictionSet,
    schema: &LabelSchema,
    verdicts: &BTreeMap<String, Verdict>,
    config: DecisionConfig,
    reviewer_id: &str,
) -> Result<DecisionRecord> {
    let mut by_index = BTreeMap::new();
    for (name, &v) in verdicts {
        let class = schema
            .index_of(name)
            .ok_or_else(|| Error::UnknownLabel(name.clone()))?;
        by_index.insert(class, v);
    }
    review_case(set, schema.k(), &by_index, config, reviewer_id, schema)
}

/// Reads a one-word verdict; `None` when the reply names both or neither.
pub fn parse_verdict(reply: &str) -> Option<Verdict> {
    let lower = reply.to_ascii_lowercase();
    let words: Vec<&str> = lower
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .collect();
    let present = words.contains(&"present");
    let absent = words.contains(&"absent");
    match (present, absent) {
        (true, false) => Some(Verdict::Present),
        (false, true) => Some(Verdict::Absent),
        _ => None,
    }
}

pub fn render_reviewer_prompt(label_name: &str, view: View, guidance: Option<&GuidanceRecord>) -> String {
    match guidance {
        None => fill_template(REVIEWER_TEMPLATE, label_name, view),
        Some(g) => {
            let (favor, against) = if g.is_ok() {
                (g.favor.as_str(), g.against.as_str())
            } else {
                ("No guidance available.", "No guidance available.")
            };
            fill_template(REVIEWER_GUIDED_TEMPLATE, label_name, view)
                .replace("{favor}", favor)
                .replace("{against}", against)
        }
    }
}

/// Simulated reviewer backed by a chat-with-image endpoint.
pub struct SimulatedReviewer<'a> {
    pub client: &'a dyn VlmClient,
    pub schema: &'a LabelSchema,
    pub view: View,
    pub max_retries: u32,
}

impl SimulatedReviewer<'_> {
    fn ask(&self, case_id: &str, label: &str, image: &ImageData, prompt: &str) -> Option<Verdict> {
        let request = VlmRequest {
            case_id,
            label,
            image,
            prompt,
        };
        for attempt in 1..=self.max_retries as usize + 1 {
            match self.client.complete(&request) {
                Ok(reply) => match parse_verdict(&reply) {
                    Some(v) => return Some(v),
                    None => warn!(case_id, label, attempt, "unparseable verdict: {reply:.80}"),
                },
                Err(e) => warn!(case_id, label, attempt, "reviewer call failed: {e}"),
            }
        }
        None
    }

    /// Reviews every flagged label of one case. For `confguide` a guidance
    /// record must be supplied for each flagged label. Verdicts that cannot be
    /// obtained default to present and are listed in `defaulted`.
    pub fn review(
        &self,
        set: &PredictionSet,
        image: &ImageData,
        guidance: Option<&[GuidanceRecord]>,
        config: DecisionConfig,
    ) -> Result<DecisionRecord> {
        if !config.is_reviewed() {
            return Err(Error::Precondition(format!(
                "{config} decisions are not reviewed"
            )));
        }
        let mut per_label = Vec::with_capacity(set.members.len());
        for &class in &set.members {
            let label = self.schema.name(class);
            let record = match config {
                DecisionConfig::Confguide => {
                    let found = guidance
                        .and_then(|g| g.iter().find(|r| r.case_id == set.case_id && r.label_name == label));
                    Some(found.ok_or_else(|| {
                        Error::Precondition(format!(
                            "no guidance for {label:?} on case {:?}",
                            set.case_id
                        ))
                    })?)
                }
                _ => None,
            };
            per_label.push((class, label, record));
        }

        let mut verdicts = BTreeMap::new();
        let mut defaulted = Vec::new();
        for (class, label, record) in per_label {
            let prompt = render_reviewer_prompt(label, self.view, record);
            let verdict = match self.ask(&set.case_id, label, image, &prompt) {
                Some(v) => v,
                None => {
                    warn!(case_id = %set.case_id, label, "defaulting verdict to present");
                    defaulted.push(label.to_string());
                    Verdict::Present
                }
            };
            verdicts.insert(class, verdict);
        }
        let mut record = review_case(
            set,
            self.schema.k(),
            &verdicts,
            config,
            self.client.model_id(),
            self.schema,
        )?;
        record.defaulted = defaulted;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::{MockBehavior, MockVlm};
    use crate::guidance::GuidanceStatus;

    fn set(members: Vec<usize>) -> PredictionSet {
        PredictionSet {
            case_id: "c1".into(),
            members,
            lambda_used: 0.4,
        }
    }

    fn schema4() -> LabelSchema {
        LabelSchema::new(vec!["A".into(), "B".into(), "C".into(), "D".into()]).unwrap()
    }

    #[test]
    fn direct_decisions() {
        let r = decide_direct(&set(vec![0, 2]), 4, DecisionConfig::Crc);
        assert_eq!(r.decisions, vec![1, 0, 1, 0]);
        assert_eq!(r.provenance[0], Provenance::SetDirect);
        assert_eq!(r.provenance[1], Provenance::ForcedAbsent);
        assert_eq!(decide_direct(&set(vec![]), 3, DecisionConfig::Crc).decisions, vec![0, 0, 0]);
        assert_eq!(
            decide_direct(&set(vec![0, 1, 2]), 3, DecisionConfig::Standard).decisions,
            vec![1, 1, 1]
        );
    }

    #[test]
    fn review_single_present() {
        let schema = LabelSchema::chexpert();
        let edema = schema.index_of("Edema").unwrap();
        let verdicts = BTreeMap::from([(edema, Verdict::Present)]);
        let r = review_case(&set(vec![edema]), 14, &verdicts, DecisionConfig::Confguide, "dr", &schema)
            .unwrap();
        assert_eq!(r.positives(), vec![edema]);
        for (k, p) in r.provenance.iter().enumerate() {
            if k == edema {
                assert_eq!(*p, Provenance::ReviewedPresent);
            } else {
                assert_eq!(*p, Provenance::ForcedAbsent);
                assert_eq!(r.decisions[k], 0);
            }
        }
    }

    #[test]
    fn review_all_absent() {
        let verdicts = BTreeMap::from([(0, Verdict::Absent), (1, Verdict::Absent)]);
        let r = review_case(&set(vec![0, 1]), 4, &verdicts, DecisionConfig::CrcPlusPlus, "dr", &schema4())
            .unwrap();
        assert_eq!(r.decisions, vec![0; 4]);
        assert_eq!(
            r.provenance.iter().filter(|p| **p == Provenance::ReviewedAbsent).count(),
            2
        );
    }

    #[test]
    fn review_rejects_unflagged_and_incomplete() {
        let schema = LabelSchema::chexpert();
        let pneumonia = schema.index_of("Pneumonia").unwrap();
        let verdicts = BTreeMap::from([(3, Verdict::Present), (pneumonia, Verdict::Present)]);
        let err = review_case(&set(vec![3]), 14, &verdicts, DecisionConfig::Confguide, "dr", &schema)
            .unwrap_err();
        assert!(matches!(err, Error::VerdictOutsideSet(ref n) if n == "Pneumonia"));

        let err = review_case(&set(vec![1, 3]), 14, &BTreeMap::from([(1, Verdict::Absent)]), DecisionConfig::Confguide, "dr", &schema)
            .unwrap_err();
        assert!(matches!(err, Error::IncompleteReview(ref n) if n == "Edema"));
    }

    #[test]
    fn review_is_idempotent() {
        let verdicts = BTreeMap::from([(0, Verdict::Present), (2, Verdict::Absent)]);
        let a = review_case(&set(vec![0, 2]), 4, &verdicts, DecisionConfig::Confguide, "dr", &schema4()).unwrap();
        let b = review_case(&set(vec![0, 2]), 4, &verdicts, DecisionConfig::Confguide, "dr", &schema4()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("present"), Some(Verdict::Present));
        assert_eq!(parse_verdict("  Absent.\n"), Some(Verdict::Absent));
        assert_eq!(parse_verdict("**PRESENT**"), Some(Verdict::Present));
        assert_eq!(parse_verdict("present or absent"), None);
        assert_eq!(parse_verdict("unsure"), None);
    }

    fn image() -> ImageData {
        ImageData::Url("http://x/1.png".into())
    }

    #[test]
    fn absent_reviewer_clears_everything() {
        let client = MockVlm::new("absent", MockBehavior::Absent, 0);
        let schema = schema4();
        let reviewer = SimulatedReviewer {
            client: &client,
            schema: &schema,
            view: View::AP,
            max_retries: 0,
        };
        let r = reviewer
            .review(&set(vec![0, 1, 3]), &image(), None, DecisionConfig::CrcPlusPlus)
            .unwrap();
        assert_eq!(r.decisions, vec![0; 4]);
        assert_eq!(r.reviewer_id, "absent");
    }

    #[test]
    fn echo_reviewer_matches_direct_decisions() {
        let client = MockVlm::new("echo", MockBehavior::Present, 0);
        let schema = schema4();
        let reviewer = SimulatedReviewer {
            client: &client,
            schema: &schema,
            view: View::AP,
            max_retries: 0,
        };
        let s = set(vec![1, 2]);
        let reviewed = reviewer.review(&s, &image(), None, DecisionConfig::CrcPlusPlus).unwrap();
        let direct = decide_direct(&s, 4, DecisionConfig::Crc);
        assert_eq!(reviewed.decisions, direct.decisions);
    }

    #[test]
    fn confguide_requires_guidance_for_every_member() {
        let client = MockVlm::new("echo", MockBehavior::Present, 0);
        let schema = schema4();
        let reviewer = SimulatedReviewer {
            client: &client,
            schema: &schema,
            view: View::AP,
            max_retries: 0,
        };
        let g = GuidanceRecord {
            case_id: "c1".into(),
            label_name: "A".into(),
            favor: "f".into(),
            against: "a".into(),
            model_id: "m".into(),
            raw_response: String::new(),
            status: GuidanceStatus::Ok,
            template_hash: String::new(),
        };
        let err = reviewer
            .review(&set(vec![0, 1]), &image(), Some(std::slice::from_ref(&g)), DecisionConfig::Confguide)
            .unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
        assert_eq!(client.calls(), 0);
        let ok = reviewer
            .review(&set(vec![0]), &image(), Some(&[g]), DecisionConfig::Confguide)
            .unwrap();
        assert_eq!(ok.decisions, vec![1, 0, 0, 0]);
    }

    #[test]
    fn failed_calls_default_to_present() {
        let client = MockVlm::new("slow", MockBehavior::Timeout, 0);
        let schema = schema4();
        let reviewer = SimulatedReviewer {
            client: &client,
            schema: &schema,
            view: View::AP,
            max_retries: 1,
        };
        let r = reviewer.review(&set(vec![2]), &image(), None, DecisionConfig::CrcPlusPlus).unwrap();
        assert_eq!(r.decisions, vec![0, 0, 1, 0]);
        assert_eq!(r.provenance[2], Provenance::ReviewedPresent);
        assert_eq!(r.defaulted, vec!["C".to_string()]);
        assert_eq!(client.calls(), 2);
    }

    #[test]
    fn guided_prompt_carries_both_arguments() {
        let g = GuidanceRecord {
            case_id: "c1".into(),
            label_name: "Edema".into(),
            favor: "bilateral haze".into(),
            against: "no Kerley lines".into(),
            model_id: "m".into(),
            raw_response: String::new(),
            status: GuidanceStatus::Ok,
            template_hash: String::new(),
        };
        let p = render_reviewer_prompt("Edema", View::AP, Some(&g));
        assert!(p.contains("bilateral haze") && p.contains("no Kerley lines"));
        let plain = render_reviewer_prompt("Edema", View::AP, None);
        assert!(!plain.contains("Reasons in favor"));
        assert!(plain.contains("present or absent"));
    }
}
