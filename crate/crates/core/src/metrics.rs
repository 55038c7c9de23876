//! Quality and cost measurement: elementwise output degradation between the
//! uncompressed and compressed paths, a cross-entropy perplexity proxy for
//! plan quality, and the merged experiment report written at the end of a
//! run.

use crate::engine::{self, ForwardOutput, ForwardRequest, Mode, ModelRef, RunStats};
use crate::error::Error;
use crate::formats;
use crate::model::{FoldedModel, ToyModel};
use crate::plan::CompressionPlan;
use crate::tensor::{kept_width, Matrix};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Reference elements smaller than this in magnitude are excluded from the
/// degradation mean instead of blowing up the ratio.
pub const EXCLUSION_FLOOR: f64 = 1e-12;

/// Mean elementwise relative deviation, with the number of elements that
/// took part and the number excluded by the reference floor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Degradation {
    pub d: f64,
    pub compared: u64,
    pub excluded: u64,
}

fn degradation_over<'a>(
    pairs: impl Iterator<Item = (&'a Matrix, &'a Matrix)>,
) -> Result<Degradation> {
    let mut total = 0.0;
    let mut compared = 0u64;
    let mut excluded = 0u64;
    for (reference, candidate) in pairs {
        if reference.rows() != candidate.rows() || reference.cols() != candidate.cols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", reference.rows(), reference.cols()),
                got: format!("{}x{}", candidate.rows(), candidate.cols()),
            });
        }
        for (u, v) in reference.data().iter().zip(candidate.data()) {
            if u.abs() < EXCLUSION_FLOOR {
                excluded += 1;
            } else {
                total += (v - u).abs() / u.abs();
                compared += 1;
            }
        }
    }
    if compared == 0 {
        return Err(Error::AllExcluded);
    }
    Ok(Degradation { d: total / compared as f64, compared, excluded })
}

/// Degradation of per-layer post-projection attention outputs: the flat
/// mean of |v - u| / |u| over every element of every layer, `u` taken from
/// the uncompressed run.
pub fn degradation_d(baseline: &[Matrix], compressed: &[Matrix]) -> Result<Degradation> {
    if baseline.len() != compressed.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} layer outputs", baseline.len()),
            got: format!("{}", compressed.len()),
        });
    }
    degradation_over(baseline.iter().zip(compressed.iter()))
}

fn block_rows(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(len, m.cols(), |i, j| m.get(start + i, j))
}

/// Per-head degradation measured on each head's contribution to the layer
/// output. The compressed head output lives in the rotated basis, so both
/// sides are pushed through their own output-projection block first; the
/// contributions sum to the layer output on each side and share a basis.
pub fn head_contribution_degradation(
    model: &ToyModel,
    folded: &FoldedModel,
    base: &ForwardOutput,
    comp: &ForwardOutput,
) -> Result<Degradation> {
    let dims = model.dims;
    let dh = dims.head_dim;
    let mut pairs = Vec::new();
    for l in 0..dims.n_layers {
        for h in 0..dims.n_heads {
            let base_o = &base.head_outputs[l][h];
            let comp_o = &comp.head_outputs[l][h];
            let base_block = block_rows(&model.layers[l].w_l, h * dh, dh);
            let comp_block = block_rows(&folded.layers[l].wl_r, h * dh, comp_o.cols());
            pairs.push((base_o.matmul(&base_block)?, comp_o.matmul(&comp_block)?));
        }
    }
    degradation_over(pairs.iter().map(|(a, b)| (a, b)))
}

/// Degradation of a row set under rotate, drop the trailing `p` fraction,
/// rotate back. This is the activation-level quality measure used to study
/// how well a rotation derived from one sample transfers to another.
pub fn truncation_degradation(rows: &Matrix, r: &Matrix, p: f64) -> Result<Degradation> {
    if r.rows() != rows.cols() || r.cols() != rows.cols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{0}x{0} rotation", rows.cols()),
            got: format!("{}x{}", r.rows(), r.cols()),
        });
    }
    let keep = kept_width(rows.cols(), p)?;
    let mut rotated = rows.matmul(r)?;
    for i in 0..rotated.rows() {
        rotated.zero_row_tail(i, keep);
    }
    let back = rotated.matmul(&r.transpose())?;
    degradation_over(std::iter::once((rows, &back)))
}

/// Mean next-token cross-entropy of a logits matrix against the shifted
/// token sequence: row `t` predicts `tokens[t + 1]`.
pub fn cross_entropy_from_logits(logits: &Matrix, tokens: &[u32]) -> Result<f64> {
    if tokens.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} logit rows", tokens.len()),
            got: format!("{}", logits.rows()),
        });
    }
    if tokens.len() < 2 {
        return Err(Error::Invalid("cross entropy needs at least two tokens".into()));
    }
    let mut total = 0.0;
    for t in 0..tokens.len() - 1 {
        let target = tokens[t + 1] as usize;
        if target >= logits.cols() {
            return Err(Error::TokenOutOfRange { token: tokens[t + 1], vocab: logits.cols() });
        }
        let row = logits.row(t);
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            m = m.max(v);
        }
        let mut sum = 0.0;
        for &v in row {
            sum += (v - m).exp();
        }
        total += sum.ln() + m - row[target];
    }
    Ok(total / (tokens.len() - 1) as f64)
}

/// exp(mean teacher-forced cross entropy) over every sequence of the
/// evaluation set, the scalar the planner's quality target is defined on.
pub fn perplexity_proxy(
    model: ModelRef,
    plan: &CompressionPlan,
    mode: Mode,
    normalize_importance: bool,
    eval_set: &[&[u32]],
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::EmptyCorpus { context: "perplexity over an empty evaluation set".into() });
    }
    let mut total = 0.0;
    let mut terms = 0u64;
    for seq in eval_set {
        if seq.len() < 2 {
            continue;
        }
        let out = engine::forward(
            model,
            &ForwardRequest {
                tokens: seq,
                plan,
                mode,
                normalize_importance,
                capture_qkv: false,
            },
        )?;
        total += cross_entropy_from_logits(&out.logits, seq)? * (seq.len() - 1) as f64;
        terms += (seq.len() - 1) as u64;
    }
    if terms == 0 {
        return Err(Error::EmptyCorpus {
            context: "every evaluation sequence is shorter than two tokens".into(),
        });
    }
    Ok((total / terms as f64).exp())
}

pub const REPORT_SCHEMA: &str = "zdc-report/1";

/// One point of a drop-ratio sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegradationPoint {
    pub p: f64,
    pub d_layer: f64,
    pub d_head: f64,
    pub q_d: f64,
    pub excluded: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Merged experiment output: run counters per mode, the quality sweep, any
/// sequence-parallel section, the plan that drove it, and the pass/fail
/// checks evaluated during the run. Key order is declaration order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema: String,
    pub config: serde_json::Value,
    pub runs: Vec<RunStats>,
    pub total_flops: Vec<u64>,
    pub degradation: Vec<DegradationPoint>,
    pub sp: Option<serde_json::Value>,
    pub plan: Option<CompressionPlan>,
    pub checks: Vec<CheckResult>,
}

impl ExperimentReport {
    pub fn skeleton() -> ExperimentReport {
        ExperimentReport {
            schema: REPORT_SCHEMA.into(),
            config: serde_json::Value::Null,
            runs: Vec::new(),
            total_flops: Vec::new(),
            degradation: Vec::new(),
            sp: None,
            plan: None,
            checks: Vec::new(),
        }
    }

    /// Appends a run and its precomputed total so the written file carries
    /// both the breakdown and the sum.
    pub fn push_run(&mut self, stats: RunStats) {
        self.total_flops.push(stats.flops.total());
        self.runs.push(stats);
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn emit_report(report: &ExperimentReport, path: &Path) -> Result<()> {
    formats::save_json(report, path)
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    let report: ExperimentReport = formats::load_json(path)?;
    if report.schema != REPORT_SCHEMA {
        return Err(Error::BadArtifact {
            path: path.display().to_string(),
            reason: format!("unexpected schema {}", report.schema),
        });
    }
    Ok(report)
}
