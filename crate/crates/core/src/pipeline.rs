//! Pipeline stages behind the `confguide` subcommands.
//!
//! ```text
//! calibrate ─┬─ predict ─┬─ guide ─┐
//! sweep      │           └─────────┴─ simulate ── evaluate
//! ```
//!
//! Every stage reads the run configuration, checks that its upstream stages
//! are present and fresh (see [`crate::provenance`]), writes its outputs into
//! the output directory and records their hashes. Outputs contain no paths or
//! timestamps, so two runs with the same inputs and seed are byte-identical.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::info;

use crate::decision::{decide_direct, DecisionConfig, DecisionRecord, SimulatedReviewer};
use crate::endpoint::{
    load_image, parallel_map, EndpointError, EndpointKind, ImageData, VlmClient, VlmEndpointConfig, VlmRequest,
};
use crate::evaluation::{compare_configs, empirical_fnr_of_sets, evaluate_decisions, render_markdown, ComparisonTable, MetricReport};
use crate::guidance::{template_hash, GuidanceGenerator, GuidanceJob, GuidanceRecord, GuidanceStore, View, GUIDANCE_TEMPLATE};
use crate::ingestion::{load_dataset, split_dataset, CaseManifest, Dataset, LabelSchema};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::operating_point::{default_alpha_grid, detect_plateaus, select_plateau, sweep_alpha, OperatingPoint, Plateau};
use crate::provenance::{check_upstream, StageRecord};
use crate::riskcontrol::{calibrate_lambda, mean_set_size, prediction_sets, CalibrationResult, FalseNegativeRate, LambdaGrid, PredictionSet, DEFAULT_GRID_STEPS};

pub const CALIBRATION_FILE: &str = "calibration.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const PLATEAUS_FILE: &str = "plateaus.json";
pub const SETS_FILE: &str = "sets.jsonl";
pub const STANDARD_SETS_FILE: &str = "standard_sets.jsonl";
pub const PREDICT_SUMMARY_FILE: &str = "predict_summary.json";
pub const GUIDANCE_FILE: &str = "guidance.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

pub fn decisions_file(config: DecisionConfig) -> String {
    format!("decisions_{}.jsonl", config.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub bind: String,
    /// Environment variable holding the bearer token required by the API.
    pub token_env: Option<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            token_env: None,
        }
    }
}

/// Everything a run needs. Relative paths are resolved against the directory
/// of the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scores: PathBuf,
    pub labels: PathBuf,
    pub schema: PathBuf,
    pub manifest: PathBuf,
    /// Base directory for relative image references; defaults to the
    /// manifest's directory.
    pub images_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub alpha: Option<f64>,
    pub alpha_grid: Vec<f64>,
    pub lambda_steps: usize,
    /// Explicit lambda grid; overrides `lambda_steps`.
    pub lambda_grid: Option<Vec<f64>>,
    /// Lambda of the fixed-threshold baseline (threshold `1 - lambda`).
    pub standard_lambda: f64,
    pub configs: Vec<DecisionConfig>,
    pub seed: u64,
    pub view: View,
    pub guidance: VlmEndpointConfig,
    pub reviewer: VlmEndpointConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scores: "scores.csv".into(),
            labels: "labels.csv".into(),
            schema: "schema.json".into(),
            manifest: "manifest.json".into(),
            images_dir: None,
            output_dir: "out".into(),
            alpha: None,
            alpha_grid: default_alpha_grid(),
            lambda_steps: DEFAULT_GRID_STEPS,
            lambda_grid: None,
            standard_lambda: 0.5,
            configs: DecisionConfig::ALL.to_vec(),
            seed: 0,
            view: View::AP,
            guidance: VlmEndpointConfig {
                model_id: "mock-guidance".into(),
                ..VlmEndpointConfig::default()
            },
            reviewer: VlmEndpointConfig {
                kind: EndpointKind::MockHash,
                model_id: "mock-reviewer".into(),
                ..VlmEndpointConfig::default()
            },
            serve: ServeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.scores);
        fix(&mut self.labels);
        fix(&mut self.schema);
        fix(&mut self.manifest);
        fix(&mut self.output_dir);
        if let Some(p) = self.images_dir.as_mut() {
            fix(p);
        }
    }

    pub fn lambda_grid(&self) -> Result<LambdaGrid> {
        Ok(match &self.lambda_grid {
            Some(values) => LambdaGrid::new(values.clone())?,
            None => LambdaGrid::uniform(self.lambda_steps)?,
        })
    }

    pub fn images_dir(&self) -> PathBuf {
        self.images_dir.clone().unwrap_or_else(|| {
            self.manifest
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }

    fn lambda_grid_param(&self) -> serde_json::Value {
        match &self.lambda_grid {
            Some(v) => json!(v),
            None => json!({ "uniform_steps": self.lambda_steps }),
        }
    }

    /// Current path for a provenance input role.
    fn resolve_role(&self, role: &str) -> Option<PathBuf> {
        match role {
            "scores" => Some(self.scores.clone()),
            "labels" => Some(self.labels.clone()),
            "schema" => Some(self.schema.clone()),
            "manifest" => Some(self.manifest.clone()),
            other if other.ends_with(".json") || other.ends_with(".jsonl") || other.ends_with(".csv") => {
                Some(self.output_dir.join(other))
            }
            _ => None,
        }
    }

    fn check_data_paths(&self) -> Result<()> {
        for (role, path) in [
            ("scores", &self.scores),
            ("labels", &self.labels),
            ("schema", &self.schema),
            ("manifest", &self.manifest),
        ] {
            if !path.is_file() {
                bail!("{role} file not found: {}", path.display());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StageOptions {
    pub force: bool,
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))
}

fn require_stage(cfg: &RunConfig, opts: StageOptions, stage: &str, artifacts: &[&str]) -> Result<()> {
    for artifact in artifacts {
        if !cfg.output_dir.join(artifact).is_file() {
            bail!(
                "missing {artifact} from stage `{stage}`; run `confguide {stage}` first"
            );
        }
    }
    if opts.force {
        return Ok(());
    }
    if let Some(problem) = check_upstream(&cfg.output_dir, stage, |role| cfg.resolve_role(role))? {
        bail!("{problem}");
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

struct Inputs {
    schema: LabelSchema,
    manifest: CaseManifest,
    calibration: Dataset,
    test: Dataset,
}

fn load_inputs(cfg: &RunConfig) -> Result<Inputs> {
    cfg.check_data_paths()?;
    let (scores, labels, schema) = load_dataset(&cfg.scores, &cfg.labels, &cfg.schema)?;
    let manifest = CaseManifest::load(&cfg.manifest)?;
    let (calibration, test) = split_dataset(&scores, &labels, &manifest)?;
    Ok(Inputs {
        schema,
        manifest,
        calibration,
        test,
    })
}

fn data_inputs(record: &mut StageRecord, cfg: &RunConfig) -> Result<()> {
    record.add_input("scores", &cfg.scores)?;
    record.add_input("labels", &cfg.labels)?;
    record.add_input("schema", &cfg.schema)?;
    record.add_input("manifest", &cfg.manifest)?;
    Ok(())
}

pub fn run_calibrate(cfg: &RunConfig, _opts: StageOptions) -> Result<CalibrationResult> {
    let alpha = cfg
        .alpha
        .ok_or_else(|| anyhow!("alpha is not set; pass --alpha or set `alpha` in the config"))?;
    let inputs = load_inputs(cfg)?;
    let grid = cfg.lambda_grid()?;
    let result = calibrate_lambda(&inputs.calibration, alpha, &grid, &FalseNegativeRate)
        .context("calibration failed")?;
    ensure_out_dir(cfg)?;
    write_json(&cfg.output_dir.join(CALIBRATION_FILE), &result)?;

    let mut record = StageRecord::new(
        "calibrate",
        json!({ "alpha": alpha, "lambda_grid": cfg.lambda_grid_param(), "loss": "fnr" }),
    );
    data_inputs(&mut record, cfg)?;
    record.add_output(&cfg.output_dir, CALIBRATION_FILE)?;
    record.save(&cfg.output_dir)?;
    info!(lambda_hat = result.lambda_hat, vacuous = result.vacuous, "calibrated");
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauEntry {
    #[serde(flatten)]
    pub plateau: Plateau,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub points: Vec<OperatingPoint>,
    pub plateaus: Vec<PlateauEntry>,
    pub alpha_star: f64,
}

pub fn run_sweep(cfg: &RunConfig, _opts: StageOptions) -> Result<SweepOutcome> {
    if cfg.alpha_grid.is_empty() {
        bail!("alpha grid is empty");
    }
    let inputs = load_inputs(cfg)?;
    let grid = cfg.lambda_grid()?;
    let points = sweep_alpha(&inputs.calibration, &cfg.alpha_grid, &grid, &FalseNegativeRate)?;
    let plateaus = detect_plateaus(&points);
    let chosen = select_plateau(&plateaus)?;
    let alpha_star = plateaus[chosen].alpha_lo;
    let entries: Vec<PlateauEntry> = plateaus
        .into_iter()
        .enumerate()
        .map(|(i, plateau)| PlateauEntry {
            plateau,
            selected: i == chosen,
        })
        .collect();

    ensure_out_dir(cfg)?;
    let mut csv = String::from("alpha,lambda_hat,risk,avg_set_size\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            p.alpha, p.lambda_hat, p.empirical_risk, p.avg_set_size
        ));
    }
    fs::write(cfg.output_dir.join(SWEEP_FILE), csv)?;
    write_json(&cfg.output_dir.join(PLATEAUS_FILE), &entries)?;

    let mut record = StageRecord::new(
        "sweep",
        json!({ "alpha_grid": cfg.alpha_grid, "lambda_grid": cfg.lambda_grid_param(), "loss": "fnr" }),
    );
    data_inputs(&mut record, cfg)?;
    record.add_output(&cfg.output_dir, SWEEP_FILE)?;
    record.add_output(&cfg.output_dir, PLATEAUS_FILE)?;
    record.save(&cfg.output_dir)?;
    info!(alpha_star, "sweep done");
    Ok(SweepOutcome {
        points,
        plateaus: entries,
        alpha_star,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub lambda_hat: f64,
    pub standard_lambda: f64,
    pub n_test: usize,
    pub avg_set_size: Option<f64>,
    pub empirical_fnr: Option<f64>,
    pub standard_empirical_fnr: Option<f64>,
}

pub fn run_predict(cfg: &RunConfig, opts: StageOptions) -> Result<PredictSummary> {
    require_stage(cfg, opts, "calibrate", &[CALIBRATION_FILE])?;
    let calibration: CalibrationResult = read_json(&cfg.output_dir.join(CALIBRATION_FILE))?;
    let inputs = load_inputs(cfg)?;
    let sets = prediction_sets(&inputs.test, calibration.lambda_hat)?;
    let standard = prediction_sets(&inputs.test, cfg.standard_lambda)?;
    write_jsonl(&cfg.output_dir.join(SETS_FILE), &sets)?;
    write_jsonl(&cfg.output_dir.join(STANDARD_SETS_FILE), &standard)?;

    let nonempty = !inputs.test.is_empty();
    let summary = PredictSummary {
        lambda_hat: calibration.lambda_hat,
        standard_lambda: cfg.standard_lambda,
        n_test: inputs.test.n(),
        avg_set_size: nonempty
            .then(|| mean_set_size(&inputs.test, calibration.lambda_hat))
            .transpose()?,
        empirical_fnr: nonempty
            .then(|| empirical_fnr_of_sets(&sets, &inputs.test.labels))
            .transpose()?,
        standard_empirical_fnr: nonempty
            .then(|| empirical_fnr_of_sets(&standard, &inputs.test.labels))
            .transpose()?,
    };
    write_json(&cfg.output_dir.join(PREDICT_SUMMARY_FILE), &summary)?;

    let mut record = StageRecord::new("predict", json!({ "standard_lambda": cfg.standard_lambda }));
    data_inputs(&mut record, cfg)?;
    record.add_input(CALIBRATION_FILE, &cfg.output_dir.join(CALIBRATION_FILE))?;
    for f in [SETS_FILE, STANDARD_SETS_FILE, PREDICT_SUMMARY_FILE] {
        record.add_output(&cfg.output_dir, f)?;
    }
    record.save(&cfg.output_dir)?;
    Ok(summary)
}

/// Counts calls made through a client.
struct CountingClient<'a> {
    inner: &'a dyn VlmClient,
    calls: AtomicUsize,
}

impl VlmClient for CountingClient<'_> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, request: &VlmRequest<'_>) -> std::result::Result<String, EndpointError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(request)
    }
}

pub fn load_sets(path: &Path) -> Result<Vec<PredictionSet>> {
    Ok(read_jsonl(path)?)
}

fn load_images(
    cfg: &RunConfig,
    manifest: &CaseManifest,
    sets: &[PredictionSet],
) -> Result<HashMap<String, ImageData>> {
    let base = cfg.images_dir();
    let mut images = HashMap::new();
    for set in sets.iter().filter(|s| !s.is_empty()) {
        let entry = manifest
            .get(&set.case_id)
            .ok_or_else(|| anyhow!("case {:?} is missing from the manifest", set.case_id))?;
        images.insert(set.case_id.clone(), load_image(entry, &base)?);
    }
    Ok(images)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuideOutcome {
    pub records: Vec<GuidanceRecord>,
    pub endpoint_calls: usize,
}

pub fn run_guide(cfg: &RunConfig, opts: StageOptions) -> Result<GuideOutcome> {
    require_stage(cfg, opts, "predict", &[SETS_FILE])?;
    let schema = LabelSchema::load(&cfg.schema)?;
    let manifest = CaseManifest::load(&cfg.manifest)?;
    let sets = load_sets(&cfg.output_dir.join(SETS_FILE))?;
    let images = load_images(cfg, &manifest, &sets)?;

    let store_path = cfg.output_dir.join(GUIDANCE_FILE);
    let cache = if store_path.is_file() {
        Some(GuidanceStore::load(&store_path)?)
    } else {
        None
    };
    let client = cfg.guidance.client(cfg.seed)?;
    let counting = CountingClient {
        inner: client.as_ref(),
        calls: AtomicUsize::new(0),
    };
    let generator = GuidanceGenerator {
        client: &counting,
        schema: &schema,
        view: cfg.view,
        max_retries: cfg.guidance.max_retries,
        max_parallel: cfg.guidance.max_parallel,
    };
    let jobs: Vec<GuidanceJob<'_>> = sets
        .iter()
        .filter(|s| !s.is_empty())
        .map(|set| GuidanceJob {
            set,
            image: &images[&set.case_id],
        })
        .collect();
    let records: Vec<GuidanceRecord> = generator
        .generate_batch(&jobs, cache.as_ref())
        .into_iter()
        .flatten()
        .collect();
    write_jsonl(&store_path, &records)?;

    let mut record = StageRecord::new(
        "guide",
        json!({
            "model_id": cfg.guidance.model_id,
            "template_sha256": template_hash(GUIDANCE_TEMPLATE),
            "view": cfg.view,
        }),
    );
    record.add_input("schema", &cfg.schema)?;
    record.add_input("manifest", &cfg.manifest)?;
    record.add_input(SETS_FILE, &cfg.output_dir.join(SETS_FILE))?;
    record.add_output(&cfg.output_dir, GUIDANCE_FILE)?;
    record.save(&cfg.output_dir)?;
    let endpoint_calls = counting.calls.load(Ordering::SeqCst);
    info!(records = records.len(), endpoint_calls, "guidance done");
    Ok(GuideOutcome {
        records,
        endpoint_calls,
    })
}

pub fn run_simulate(cfg: &RunConfig, opts: StageOptions) -> Result<Vec<(DecisionConfig, Vec<DecisionRecord>)>> {
    if cfg.configs.is_empty() {
        bail!("no configurations selected");
    }
    require_stage(cfg, opts, "predict", &[SETS_FILE, STANDARD_SETS_FILE])?;
    let needs_guidance = cfg.configs.contains(&DecisionConfig::Confguide);
    if needs_guidance {
        require_stage(cfg, opts, "guide", &[GUIDANCE_FILE])?;
    }
    let schema = LabelSchema::load(&cfg.schema)?;
    let manifest = CaseManifest::load(&cfg.manifest)?;
    let sets = load_sets(&cfg.output_dir.join(SETS_FILE))?;
    let standard = load_sets(&cfg.output_dir.join(STANDARD_SETS_FILE))?;
    let guidance = if needs_guidance {
        GuidanceStore::load(&cfg.output_dir.join(GUIDANCE_FILE))?
    } else {
        GuidanceStore::default()
    };
    let k = schema.k();

    let reviewed = cfg.configs.iter().any(|c| c.is_reviewed());
    let images = if reviewed {
        load_images(cfg, &manifest, &sets)?
    } else {
        HashMap::new()
    };
    let client = if reviewed {
        Some(cfg.reviewer.client(cfg.seed)?)
    } else {
        None
    };

    let mut outputs = Vec::new();
    for &config in &cfg.configs {
        let records: Vec<DecisionRecord> = match config {
            DecisionConfig::Standard => standard.iter().map(|s| decide_direct(s, k, config)).collect(),
            DecisionConfig::Crc => sets.iter().map(|s| decide_direct(s, k, config)).collect(),
            DecisionConfig::CrcPlusPlus | DecisionConfig::Confguide => {
                let reviewer = SimulatedReviewer {
                    client: client.as_deref().expect("client built for reviewed configs"),
                    schema: &schema,
                    view: cfg.view,
                    max_retries: cfg.reviewer.max_retries,
                };
                let per_case: Vec<Vec<GuidanceRecord>> = sets
                    .iter()
                    .map(|s| {
                        s.members
                            .iter()
                            .filter_map(|&m| guidance.lookup(&s.case_id, schema.name(m)).cloned())
                            .collect()
                    })
                    .collect();
                let indexed: Vec<usize> = (0..sets.len()).collect();
                parallel_map(&indexed, cfg.reviewer.max_parallel, |&i| {
                    let set = &sets[i];
                    if set.is_empty() {
                        return crate::decision::review_case(
                            set,
                            k,
                            &Default::default(),
                            config,
                            client.as_deref().map_or("", |c| c.model_id()),
                            &schema,
                        );
                    }
                    let g = (config == DecisionConfig::Confguide).then(|| per_case[i].as_slice());
                    reviewer.review(set, &images[&set.case_id], g, config)
                })
                .into_iter()
                .collect::<crate::Result<Vec<_>>>()?
            }
        };
        write_jsonl(&cfg.output_dir.join(decisions_file(config)), &records)?;
        outputs.push((config, records));
    }

    let mut record = StageRecord::new(
        "simulate",
        json!({
            "configs": cfg.configs,
            "reviewer_model_id": cfg.reviewer.model_id,
            "seed": cfg.seed,
            "view": cfg.view,
        }),
    );
    record.add_input("schema", &cfg.schema)?;
    record.add_input("manifest", &cfg.manifest)?;
    record.add_input(SETS_FILE, &cfg.output_dir.join(SETS_FILE))?;
    record.add_input(STANDARD_SETS_FILE, &cfg.output_dir.join(STANDARD_SETS_FILE))?;
    if needs_guidance {
        record.add_input(GUIDANCE_FILE, &cfg.output_dir.join(GUIDANCE_FILE))?;
    }
    for &config in &cfg.configs {
        record.add_output(&cfg.output_dir, &decisions_file(config))?;
    }
    record.save(&cfg.output_dir)?;
    Ok(outputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOutput {
    pub reports: Vec<MetricReport>,
    pub comparison: ComparisonTable,
}

pub fn run_evaluate(cfg: &RunConfig, opts: StageOptions) -> Result<EvaluationOutput> {
    if cfg.configs.is_empty() {
        bail!("no configurations selected");
    }
    let artifacts: Vec<String> = cfg.configs.iter().map(|&c| decisions_file(c)).collect();
    let artifact_refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    require_stage(cfg, opts, "simulate", &artifact_refs)?;
    let inputs = load_inputs(cfg)?;
    if inputs.test.is_empty() {
        bail!("the test split is empty");
    }
    let mut reports = Vec::new();
    for (config, file) in cfg.configs.iter().zip(&artifacts) {
        let decisions: Vec<DecisionRecord> = read_jsonl(&cfg.output_dir.join(file))?;
        let mut report = evaluate_decisions(&decisions, &inputs.test.labels, &inputs.schema)
            .with_context(|| format!("evaluating {config}"))?;
        report.config = Some(*config);
        reports.push(report);
    }
    let comparison = compare_configs(&reports)?;
    let output = EvaluationOutput { reports, comparison };
    write_json(&cfg.output_dir.join(REPORT_JSON), &output)?;

    let mut md = String::from("# Decision quality report\n\n");
    md.push_str(&format!("Test cases: {}\n\n", inputs.test.n()));
    md.push_str("| Config | Model | Empirical FNR |\n|---|---|---:|\n");
    for r in &output.reports {
        md.push_str(&format!(
            "| {} | {} | {} |\n",
            r.config.map_or("-", |c| c.display_name()),
            r.reviewer_id,
            r.empirical_fnr.map_or_else(|| "n/a".into(), |v| format!("{v:.4}"))
        ));
    }
    md.push('\n');
    md.push_str(&render_markdown(&output.comparison));
    fs::write(cfg.output_dir.join(REPORT_MD), md)?;

    let mut record = StageRecord::new("evaluate", json!({ "configs": cfg.configs }));
    record.add_input("labels", &cfg.labels)?;
    record.add_input("manifest", &cfg.manifest)?;
    for f in &artifacts {
        record.add_input(f, &cfg.output_dir.join(f))?;
    }
    record.add_output(&cfg.output_dir, REPORT_JSON)?;
    record.add_output(&cfg.output_dir, REPORT_MD)?;
    record.save(&cfg.output_dir)?;
    Ok(output)
}

/// Loaded state for the review service.
pub struct ReviewInputs {
    pub schema: LabelSchema,
    pub manifest: CaseManifest,
    pub sets: Vec<PredictionSet>,
    pub guidance: Option<GuidanceStore>,
    pub test: Dataset,
}

pub fn load_review_inputs(cfg: &RunConfig, opts: StageOptions) -> Result<ReviewInputs> {
    require_stage(cfg, opts, "predict", &[SETS_FILE])?;
    let inputs = load_inputs(cfg)?;
    let sets = load_sets(&cfg.output_dir.join(SETS_FILE))?;
    let guidance_path = cfg.output_dir.join(GUIDANCE_FILE);
    let guidance = if guidance_path.is_file() {
        if !opts.force {
            if let Some(problem) = check_upstream(&cfg.output_dir, "guide", |r| cfg.resolve_role(r))? {
                bail!("{problem}");
            }
        }
        Some(GuidanceStore::load(&guidance_path)?)
    } else {
        None
    };
    Ok(ReviewInputs {
        schema: inputs.schema,
        manifest: inputs.manifest,
        sets,
        guidance,
        test: inputs.test,
    })
}
