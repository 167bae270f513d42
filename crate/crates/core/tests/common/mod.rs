//! Independent reference implementations used as test oracles, plus fixture
//! helpers. Nothing here calls the code under test except for building
//! inputs.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use confguide::{Dataset, LabelMatrix, ScoreMatrix};
use rand::Rng;

pub fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i:04}")).collect()
}

pub fn dataset(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Dataset {
    let ids = ids(scores.len());
    Dataset::new(
        ScoreMatrix::from_rows(ids.clone(), scores).unwrap(),
        LabelMatrix::from_rows(ids, labels).unwrap(),
    )
    .unwrap()
}

/// Per-case FNR by direct enumeration of classes.
pub fn oracle_fnr(scores: &[f64], truth: &[u8], lambda: f64) -> f64 {
    let mut positives = 0usize;
    let mut missed = 0usize;
    for (s, &y) in scores.iter().zip(truth) {
        if y == 1 {
            positives += 1;
            if *s < 1.0 - lambda {
                missed += 1;
            }
        }
    }
    missed as f64 / positives.max(1) as f64
}

/// Brute-force scan: first grid value whose adjusted risk is within `alpha`,
/// else the last grid value flagged vacuous.
pub fn oracle_lambda_hat(scores: &[Vec<f64>], labels: &[Vec<u8>], alpha: f64, grid: &[f64]) -> (f64, bool) {
    let n = scores.len() as f64;
    for &lambda in grid {
        let mut sum = 0.0;
        for (row, truth) in scores.iter().zip(labels) {
            sum += oracle_fnr(row, truth, lambda);
        }
        if (sum + 1.0) / (n + 1.0) <= alpha {
            return (lambda, false);
        }
    }
    (*grid.last().unwrap(), true)
}

pub fn oracle_mean_fnr(scores: &[Vec<f64>], labels: &[Vec<u8>], lambda: f64) -> f64 {
    let mut sum = 0.0;
    for (row, truth) in scores.iter().zip(labels) {
        sum += oracle_fnr(row, truth, lambda);
    }
    sum / scores.len() as f64
}

/// Precision, recall, F1 as fractions from one binary problem.
pub fn oracle_prf(pred: &[u8], truth: &[u8]) -> (f64, f64, f64) {
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fneg += 1,
            _ => {}
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// `(micro, macro)` P/R/F1 fractions: micro flattens every (case, class)
/// pair into one binary problem, macro averages per-class problems.
pub fn oracle_metrics(pred: &[Vec<u8>], truth: &[Vec<u8>]) -> ((f64, f64, f64), (f64, f64, f64)) {
    let flat_p: Vec<u8> = pred.iter().flatten().copied().collect();
    let flat_t: Vec<u8> = truth.iter().flatten().copied().collect();
    let micro = oracle_prf(&flat_p, &flat_t);
    let k = truth[0].len();
    let mut sums = (0.0, 0.0, 0.0);
    for c in 0..k {
        let col_p: Vec<u8> = pred.iter().map(|r| r[c]).collect();
        let col_t: Vec<u8> = truth.iter().map(|r| r[c]).collect();
        let (p, r, f) = oracle_prf(&col_p, &col_t);
        sums.0 += p;
        sums.1 += r;
        sums.2 += f;
    }
    let k = k as f64;
    (micro, (sums.0 / k, sums.1 / k, sums.2 / k))
}

/// Score ~ U[0,1] and label ~ Bernoulli(score), per class.
pub fn draw_exchangeable<R: Rng>(rng: &mut R, n: usize, k: usize) -> (Vec<Vec<f64>>, Vec<Vec<u8>>) {
    let mut scores = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let truth: Vec<u8> = row.iter().map(|&s| u8::from(rng.random::<f64>() < s)).collect();
        scores.push(row);
        labels.push(truth);
    }
    (scores, labels)
}

/// The bundled ten-case demo dataset.
pub fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/demo")
}

/// Copies the demo fixture into `dest` so tests can write outputs and
/// modify inputs freely.
pub fn copy_demo(dest: &Path) -> PathBuf {
    copy_dir(&demo_dir(), dest);
    let _ = std::fs::remove_dir_all(dest.join("out"));
    dest.join("confguide.toml")
}

fn copy_dir(src: &Path, dest: &Path) {
    std::fs::create_dir_all(dest).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let target = dest.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// Sends one request to the router and returns the status and JSON body
/// (`Null` for an empty or non-JSON body).
pub async fn call(
    app: &axum::Router,
    method: &str,
    uri: &str,
    body: Option<serde_json::Value>,
) -> (axum::http::StatusCode, serde_json::Value) {
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    let mut builder = axum::http::Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            builder = builder.header("content-type", "application/json");
            axum::body::Body::from(v.to_string())
        }
        None => axum::body::Body::empty(),
    };
    let response = app.clone().oneshot(builder.body(body).unwrap()).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let json = serde_json::from_slice(&bytes).unwrap_or(serde_json::Value::Null);
    (status, json)
}
