//! Drop-ratio planning: a grid oracle that maximizes the total-compression
//! objective subject to a measured quality-degradation ceiling, and a
//! polynomial regressor fitted to the oracle frontier so a target can be
//! answered without re-running the grid.

use crate::engine::Mode;
use crate::error::Error;
use crate::metrics;
use crate::model::{FoldedModel, ToyModel};
use crate::plan::{CompressionPlan, ConstraintDirection};
use crate::svd::svd;
use crate::tensor::Matrix;
use crate::Result;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Candidate values for the grid search. Plans are built from four drop
/// ratios plus a linear important-fraction ramp between two endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub p_values: Vec<f64>,
    pub g_values: Vec<f64>,
    pub direction: ConstraintDirection,
    pub strict_g: bool,
}

impl GridSpec {
    /// Full grid: drop ratios 0 to 0.8 in tenths, fractions 0.2 to 0.8.
    pub fn default_grid() -> GridSpec {
        GridSpec {
            p_values: (0..=8).map(|i| i as f64 / 10.0).collect(),
            g_values: (2..=8).map(|i| i as f64 / 10.0).collect(),
            direction: ConstraintDirection::Prose,
            strict_g: false,
        }
    }

    /// Coarse grid sized for quick runs.
    pub fn laptop() -> GridSpec {
        GridSpec {
            p_values: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            g_values: vec![0.2, 0.4, 0.6, 0.8],
            direction: ConstraintDirection::Prose,
            strict_g: false,
        }
    }

    pub fn named(name: &str) -> Result<GridSpec> {
        match name {
            "default" => Ok(GridSpec::default_grid()),
            "laptop" => Ok(GridSpec::laptop()),
            other => Err(Error::Invalid(format!("unknown grid {other:?}"))),
        }
    }
}

/// Linear ramp from `g_start` at the first layer to `g_end` at the last.
pub fn interpolate_g(g_start: f64, g_end: f64, n_layers: usize) -> Vec<f64> {
    if n_layers <= 1 {
        return vec![g_start; n_layers.max(1)];
    }
    (0..n_layers)
        .map(|l| g_start + (g_end - g_start) * l as f64 / (n_layers - 1) as f64)
        .collect()
}

/// Every grid plan that passes validation and the direction policy, in a
/// fixed enumeration order (g endpoints outer, then the four ratios).
pub fn enumerate_plans(spec: &GridSpec, n_layers: usize, group_map: &[usize]) -> Vec<CompressionPlan> {
    let mut plans = Vec::new();
    for &gs in &spec.g_values {
        for &ge in &spec.g_values {
            if ge < gs {
                continue;
            }
            let g = interpolate_g(gs, ge, n_layers);
            for &a in &spec.p_values {
                for &b in &spec.p_values {
                    for &c in &spec.p_values {
                        for &e in &spec.p_values {
                            let plan = CompressionPlan {
                                g: g.clone(),
                                p_qk_i: a,
                                p_qk_u: b,
                                p_vl_i: c,
                                p_vl_u: e,
                                group_map: group_map.to_vec(),
                            };
                            if plan.satisfies_constraints(spec.direction, spec.strict_g)
                                && plan.validate(n_layers).is_ok()
                            {
                                plans.push(plan);
                            }
                        }
                    }
                }
            }
        }
    }
    plans
}

/// One measured grid point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSample {
    pub plan: CompressionPlan,
    pub q_d: f64,
    pub objective: f64,
}

/// Relative perplexity increase of a plan over the uncompressed baseline.
pub fn measure_qd(
    model: &ToyModel,
    folded: &FoldedModel,
    plan: &CompressionPlan,
    eval_set: &[&[u32]],
    normalize: bool,
) -> Result<f64> {
    let base = baseline_perplexity(model, eval_set, normalize)?;
    qd_against_base(folded, plan, eval_set, normalize, base)
}

pub fn baseline_perplexity(model: &ToyModel, eval_set: &[&[u32]], normalize: bool) -> Result<f64> {
    metrics::perplexity_proxy(
        crate::engine::ModelRef::Baseline(model),
        &CompressionPlan::none(model.dims.n_layers),
        Mode::Baseline,
        normalize,
        eval_set,
    )
}

pub fn qd_against_base(
    folded: &FoldedModel,
    plan: &CompressionPlan,
    eval_set: &[&[u32]],
    normalize: bool,
    base_perp: f64,
) -> Result<f64> {
    let comp = metrics::perplexity_proxy(
        crate::engine::ModelRef::Folded(folded),
        plan,
        Mode::Zdc,
        normalize,
        eval_set,
    )?;
    Ok((comp - base_perp) / base_perp)
}

/// Measures every grid plan's quality degradation. Plans are evaluated in
/// parallel; the returned order is the enumeration order, so serial and
/// parallel runs agree element for element.
pub fn evaluate_grid(
    model: &ToyModel,
    folded: &FoldedModel,
    eval_set: &[&[u32]],
    spec: &GridSpec,
    group_map: &[usize],
    normalize: bool,
) -> Result<Vec<PlanSample>> {
    let plans = enumerate_plans(spec, model.dims.n_layers, group_map);
    let base = baseline_perplexity(model, eval_set, normalize)?;
    plans
        .into_par_iter()
        .map(|plan| -> Result<PlanSample> {
            let q_d = qd_against_base(folded, &plan, eval_set, normalize, base)?;
            let objective = plan.objective();
            Ok(PlanSample { plan, q_d, objective })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleOutcome {
    /// False when no grid plan met the target; `best` then carries the
    /// plan with the smallest measured degradation instead.
    pub feasible: bool,
    pub best: PlanSample,
    pub evaluated: usize,
}

fn lex_less(a: &CompressionPlan, b: &CompressionPlan) -> bool {
    for (x, y) in a.lex_key().iter().zip(b.lex_key()) {
        if x < &y {
            return true;
        }
        if x > &y {
            return false;
        }
    }
    false
}

/// Best measured sample under the target: highest objective with
/// q_d ≤ t_qd, ties resolved toward the lexicographically smaller plan.
pub fn oracle_from_samples(samples: &[PlanSample], t_qd: f64) -> Result<OracleOutcome> {
    if samples.is_empty() {
        return Err(Error::BadPlan { reason: "oracle needs at least one grid sample".into() });
    }
    let mut best: Option<&PlanSample> = None;
    for s in samples {
        if s.q_d > t_qd {
            continue;
        }
        let replace = match best {
            None => true,
            Some(cur) => {
                s.objective > cur.objective
                    || (s.objective == cur.objective && lex_less(&s.plan, &cur.plan))
            }
        };
        if replace {
            best = Some(s);
        }
    }
    if let Some(b) = best {
        return Ok(OracleOutcome { feasible: true, best: b.clone(), evaluated: samples.len() });
    }
    let mut fallback = &samples[0];
    for s in &samples[1..] {
        if s.q_d < fallback.q_d || (s.q_d == fallback.q_d && lex_less(&s.plan, &fallback.plan)) {
            fallback = s;
        }
    }
    Ok(OracleOutcome { feasible: false, best: fallback.clone(), evaluated: samples.len() })
}

/// Full oracle: measure the grid, pick the best plan for the target, and
/// hand back the samples for reuse (regressor training, reports).
pub fn enumerate_oracle(
    model: &ToyModel,
    folded: &FoldedModel,
    eval_set: &[&[u32]],
    spec: &GridSpec,
    group_map: &[usize],
    normalize: bool,
    t_qd: f64,
) -> Result<(OracleOutcome, Vec<PlanSample>)> {
    let samples = evaluate_grid(model, folded, eval_set, spec, group_map, normalize)?;
    let outcome = oracle_from_samples(&samples, t_qd)?;
    Ok((outcome, samples))
}

/// Oracle winners for a sweep of targets, the training set for the
/// regressor. Targets nothing satisfies are skipped.
pub fn frontier_samples(samples: &[PlanSample], targets: &[f64]) -> Result<Vec<PlanSample>> {
    let mut out = Vec::new();
    for &t in targets {
        let outcome = oracle_from_samples(samples, t)?;
        if outcome.feasible {
            out.push(outcome.best);
        }
    }
    Ok(out)
}

/// Evenly spaced degradation targets covering the measured range.
pub fn linspace_targets(samples: &[PlanSample], count: usize) -> Vec<f64> {
    let max = samples.iter().fold(0.0f64, |m, s| m.max(s.q_d));
    (0..count).map(|i| max * (i + 1) as f64 / count as f64).collect()
}

/// One fitted output: polynomial coefficients (constant term first) plus
/// the training hull the prediction is clamped to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolyFit {
    pub coeffs: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl PolyFit {
    fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for &c in self.coeffs.iter().rev() {
            acc = acc * x + c;
        }
        acc.clamp(self.lo, self.hi)
    }
}

/// Maps a degradation target to a plan: six independent least-squares
/// polynomials in the target (g endpoints and the four ratios), with
/// predictions clamped to the training hulls and clipped back into the
/// ordering constraints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Regressor {
    pub degree: usize,
    pub direction: ConstraintDirection,
    pub n_layers: usize,
    pub group_map: Vec<usize>,
    /// Order: g_start, g_end, p_qk_i, p_qk_u, p_vl_i, p_vl_u.
    pub fits: Vec<PolyFit>,
}

pub const MIN_REGRESSOR_SAMPLES: usize = 20;

fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    let n = xs.len();
    let cols = degree + 1;
    let design = Matrix::from_fn(n, cols, |i, j| xs[i].powi(j as i32));
    let f = svd(&design)?;
    let cutoff = f.sigma[0] * 1e-12;
    if f.sigma.iter().any(|&s| s <= cutoff) {
        return Err(Error::DegenerateSamples {
            reason: format!("design matrix is rank deficient at degree {degree}"),
        });
    }
    // beta = R * diag(1/sigma) * U^T y
    let mut uty = vec![0.0; cols];
    for (j, val) in uty.iter_mut().enumerate() {
        for i in 0..n {
            *val += f.u.get(i, j) * ys[i];
        }
    }
    for (v, s) in uty.iter_mut().zip(&f.sigma) {
        *v /= s;
    }
    let mut beta = vec![0.0; cols];
    for (i, b) in beta.iter_mut().enumerate() {
        for j in 0..cols {
            *b += f.r_mat.get(i, j) * uty[j];
        }
    }
    Ok(beta)
}

pub fn fit_regressor(samples: &[PlanSample], direction: ConstraintDirection) -> Result<Regressor> {
    if samples.len() < MIN_REGRESSOR_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_REGRESSOR_SAMPLES, got: samples.len() });
    }
    let n_layers = samples[0].plan.g.len();
    let group_map = samples[0].plan.group_map.clone();
    if samples.iter().any(|s| s.plan.g.len() != n_layers || s.plan.group_map != group_map) {
        return Err(Error::DegenerateSamples {
            reason: "samples mix layer counts or group maps".into(),
        });
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.q_d).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite degradation values"));
    sorted.dedup();
    if sorted.len() < 2 || sorted[sorted.len() - 1] - sorted[0] < 1e-9 {
        return Err(Error::DegenerateSamples { reason: "degradation values span no range".into() });
    }
    let degree = (sorted.len() - 1).min(3);
    let outputs: [Vec<f64>; 6] = [
        samples.iter().map(|s| s.plan.g[0]).collect(),
        samples.iter().map(|s| s.plan.g[n_layers - 1]).collect(),
        samples.iter().map(|s| s.plan.p_qk_i).collect(),
        samples.iter().map(|s| s.plan.p_qk_u).collect(),
        samples.iter().map(|s| s.plan.p_vl_i).collect(),
        samples.iter().map(|s| s.plan.p_vl_u).collect(),
    ];
    let mut fits = Vec::with_capacity(6);
    for ys in &outputs {
        let coeffs = polyfit(&xs, ys, degree)?;
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        fits.push(PolyFit { coeffs, lo, hi });
    }
    Ok(Regressor { degree, direction, n_layers, group_map, fits })
}

impl Regressor {
    /// Plan for a degradation target. Clamping keeps every value inside
    /// what the training set exhibited; the clipping pass restores the
    /// ordering policy (under the as-printed policy the strict
    /// inequalities must already hold in the clamped values, clipping
    /// only enforces the non-strict part).
    pub fn predict(&self, t_qd: f64) -> Result<CompressionPlan> {
        let g_start = self.fits[0].eval(t_qd);
        let g_end = self.fits[1].eval(t_qd).max(g_start);
        let mut a = self.fits[2].eval(t_qd);
        let mut b = self.fits[3].eval(t_qd);
        let mut c = self.fits[4].eval(t_qd);
        let mut e = self.fits[5].eval(t_qd);
        match self.direction {
            ConstraintDirection::Prose => {
                b = b.max(a);
                c = c.min(a);
                e = e.min(b);
                e = e.max(c);
            }
            ConstraintDirection::AsPrinted => {
                b = b.min(a);
                c = c.max(a);
                e = e.max(b);
                e = e.min(c);
            }
        }
        // Clamp the final clip results into the legal ratio range.
        let legal = |v: f64| v.clamp(0.0, 1.0 - 1e-9);
        (a, b, c, e) = (legal(a), legal(b), legal(c), legal(e));
        let plan = CompressionPlan {
            g: interpolate_g(g_start.clamp(1e-9, 1.0), g_end.clamp(1e-9, 1.0), self.n_layers),
            p_qk_i: a,
            p_qk_u: b,
            p_vl_i: c,
            p_vl_u: e,
            group_map: self.group_map.clone(),
        };
        plan.validate(self.n_layers)?;
        Ok(plan)
    }
}
