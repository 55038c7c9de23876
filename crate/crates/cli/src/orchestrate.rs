//! End-to-end experiment driver behind `zdc all`: generate model and
//! corpus, derive and fold rotations, choose a plan, run every requested
//! mode, sweep worker counts through the sequence-parallel simulator, and
//! write a single report whose checks gate the exit code. Everything is
//! seeded, so identical configs produce identical reports.

use crate::config::ExperimentConfig;
use anyhow::{bail, Context};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use zdc_core::corpus;
use zdc_core::engine::{self, forward, generate, ForwardRequest, Mode, ModelRef};
use zdc_core::metrics::{
    self, degradation_d, head_contribution_degradation, CheckResult, DegradationPoint,
    ExperimentReport,
};
use zdc_core::model::{self, FoldedModel, ToyModel};
use zdc_core::pipeline;
use zdc_core::plan::CompressionPlan;
use zdc_core::planner::{self, GridSpec};
use zdc_core::spsim::{self, SpConfig};
use zdc_core::tensor::{rel_frob_diff, Matrix};

/// Order-sensitive digest of a logits matrix, stable across platforms
/// because every f64 bit pattern is deterministic.
pub fn logits_checksum(m: &Matrix) -> String {
    let mut acc = 0u64;
    for &v in m.data() {
        acc = acc.rotate_left(7) ^ v.to_bits();
    }
    format!("{acc:016x}")
}

/// Mode string as a file-name fragment.
fn mode_slug(mode: &str) -> String {
    mode.replace('/', "-").to_lowercase()
}

struct Artifacts {
    model: ToyModel,
    folded: FoldedModel,
    corpus: corpus::Corpus,
    group_map: Vec<usize>,
    plan: CompressionPlan,
    plan_outcome: serde_json::Value,
}

fn build_artifacts(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Artifacts> {
    let seed = cfg.experiment.seed;
    let dims = cfg.model.dims();
    let model = ToyModel::generate(dims, seed).context("generating model")?;
    model::save_model(&model, &out.join("model"), Some(seed))?;

    let spec = cfg.corpus.spec(cfg.model.vocab);
    let corp = corpus::generate(&spec, seed).context("generating corpus")?;
    corpus::save_corpus(&corp, &out.join("corpus.json"))?;

    let pruned = corpus::prune_corpus(&corp, cfg.pipeline.prune, seed)?;
    let bank = pipeline::collect_activations(&model, &pruned)?;
    let kmeans_k = if cfg.pipeline.kmeans_k == 0 {
        pipeline::default_kmeans_k(bank.heads[0][0].q.rows())
    } else {
        cfg.pipeline.kmeans_k
    };
    let rotations =
        pipeline::compute_rotations(&model, &bank, kmeans_k, cfg.pipeline.kmeans_iters, seed)?;
    pipeline::save_rotations(&rotations, &out.join("rotations"), Some(seed))?;
    let folded = pipeline::fold_parameters(&model, &rotations)?;
    model::save_folded(&folded, &out.join("folded"))?;

    let all_seqs = corp.all_sequences();
    let calib: Vec<&[u32]> = all_seqs.iter().take(cfg.plan.eval_sequences).copied().collect();
    let masks =
        pipeline::calibration_importance_sets(&model, &calib, cfg.pipeline.group_g, true)?;
    let group_map = pipeline::identify_layer_groups(&masks, cfg.pipeline.group_threshold);

    let (plan, plan_outcome) = choose_plan(cfg, &model, &folded, &calib, &group_map)?;
    zdc_core::plan::save_plan(&plan, &out.join("plan.json"))?;

    Ok(Artifacts { model, folded, corpus: corp, group_map, plan, plan_outcome })
}

fn choose_plan(
    cfg: &ExperimentConfig,
    model: &ToyModel,
    folded: &FoldedModel,
    eval: &[&[u32]],
    group_map: &[usize],
) -> anyhow::Result<(CompressionPlan, serde_json::Value)> {
    let n_layers = model.dims.n_layers;
    match cfg.plan.source.as_str() {
        "uniform" => {
            let mut plan =
                CompressionPlan::uniform(n_layers, cfg.plan.uniform_p, cfg.plan.uniform_g);
            plan.group_map = group_map.to_vec();
            plan.validate(n_layers)?;
            Ok((plan, json!({"source": "uniform"})))
        }
        "file" => {
            let plan = zdc_core::plan::load_plan(Path::new(&cfg.plan.file))?;
            plan.validate(n_layers)?;
            Ok((plan, json!({"source": "file", "path": cfg.plan.file})))
        }
        "oracle" => {
            let grid = GridSpec::named(&cfg.plan.grid)?;
            let (outcome, samples) = planner::enumerate_oracle(
                model,
                folded,
                eval,
                &grid,
                group_map,
                true,
                cfg.plan.target_qd,
            )?;
            let info = json!({
                "source": "oracle",
                "feasible": outcome.feasible,
                "evaluated": samples.len(),
                "q_d": outcome.best.q_d,
                "objective": outcome.best.objective,
            });
            Ok((outcome.best.plan, info))
        }
        "regressor" => {
            let grid = GridSpec::named(&cfg.plan.grid)?;
            let samples = planner::evaluate_grid(model, folded, eval, &grid, group_map, true)?;
            let targets = planner::linspace_targets(&samples, 24);
            let frontier = planner::frontier_samples(&samples, &targets)?;
            let reg = planner::fit_regressor(&frontier, grid.direction)?;
            let plan = reg.predict(cfg.plan.target_qd)?;
            let base = planner::baseline_perplexity(model, eval, true)?;
            let measured = planner::qd_against_base(folded, &plan, eval, true, base)?;
            let info = json!({
                "source": "regressor",
                "frontier_samples": frontier.len(),
                "degree": reg.degree,
                "measured_q_d": measured,
            });
            Ok((plan, info))
        }
        other => bail!("unknown plan source {other:?}"),
    }
}

fn run_modes(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    out: &Path,
    report: &mut ExperimentReport,
) -> anyhow::Result<()> {
    let prompt = prompt_tokens(&art.corpus, 0, cfg.run.prompt_len)?;
    let n_layers = art.model.dims.n_layers;
    let none = CompressionPlan::none(n_layers);
    for mode_str in &cfg.run.modes {
        let mode = Mode::parse(mode_str)?;
        let (model_ref, plan) = if mode == Mode::Baseline {
            (ModelRef::Baseline(&art.model), &none)
        } else {
            (ModelRef::Folded(&art.folded), &art.plan)
        };
        let stats = if cfg.run.max_new > 0 {
            generate(model_ref, &prompt, cfg.run.max_new, plan, mode, true)?.stats
        } else {
            forward(
                model_ref,
                &ForwardRequest {
                    tokens: &prompt,
                    plan,
                    mode,
                    normalize_importance: true,
                    capture_qkv: false,
                },
            )?
            .stats
        };
        zdc_core::formats::save_json(
            &stats,
            &out.join(format!("stats-{}.json", mode_slug(mode_str))),
        )?;
        report.push_run(stats);
    }
    Ok(())
}

fn prompt_tokens(corp: &corpus::Corpus, seq_index: usize, len: usize) -> anyhow::Result<Vec<u32>> {
    let seqs = corp.all_sequences();
    let seq = seqs
        .get(seq_index.min(seqs.len().saturating_sub(1)))
        .copied()
        .context("corpus holds no sequences")?;
    anyhow::ensure!(seq.len() >= len, "corpus sequences are shorter than the requested prompt");
    Ok(seq[..len].to_vec())
}

fn degradation_sweep(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    eval: &[&[u32]],
) -> anyhow::Result<Vec<DegradationPoint>> {
    let prompt = prompt_tokens(&art.corpus, 0, cfg.run.prompt_len)?;
    let n_layers = art.model.dims.n_layers;
    let base_run = forward(
        ModelRef::Baseline(&art.model),
        &ForwardRequest {
            tokens: &prompt,
            plan: &CompressionPlan::none(n_layers),
            mode: Mode::Baseline,
            normalize_importance: true,
            capture_qkv: false,
        },
    )?;
    let base_perp = planner::baseline_perplexity(&art.model, eval, true)?;
    let mut points = Vec::new();
    for p in [0.0, 0.25, 0.5] {
        let mut plan = CompressionPlan::uniform(n_layers, p, cfg.plan.uniform_g);
        plan.group_map = art.group_map.clone();
        let comp_run = forward(
            ModelRef::Folded(&art.folded),
            &ForwardRequest {
                tokens: &prompt,
                plan: &plan,
                mode: Mode::Zdc,
                normalize_importance: true,
                capture_qkv: false,
            },
        )?;
        let d_layer = degradation_d(&base_run.layer_outputs, &comp_run.layer_outputs)?;
        let d_head = head_contribution_degradation(&art.model, &art.folded, &base_run, &comp_run)?;
        let q_d = planner::qd_against_base(&art.folded, &plan, eval, true, base_perp)?;
        points.push(DegradationPoint {
            p,
            d_layer: d_layer.d,
            d_head: d_head.d,
            q_d,
            excluded: d_layer.excluded + d_head.excluded,
        });
    }
    Ok(points)
}

fn sp_sweep(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    out: &Path,
) -> anyhow::Result<(serde_json::Value, Vec<CheckResult>)> {
    let tokens = prompt_tokens(&art.corpus, 1, cfg.sp.seq_len)?;
    let dims = art.model.dims;
    let mut sections = Vec::new();
    let mut checksums = Vec::new();
    let mut model_match = true;
    for &workers in &cfg.sp.workers {
        let sp_cfg = SpConfig {
            n_workers: workers,
            bytes_per_element: cfg.sp.bytes_per_element,
            link_bandwidth: cfg.sp.link_bandwidth,
        };
        let run = spsim::sp_forward(&art.folded, &tokens, &art.plan, &sp_cfg, true)?;
        let predicted = spsim::comm_bytes_model(&art.plan, &dims, tokens.len(), &sp_cfg)?;
        model_match &= run.ledger.a2a1_bytes == predicted.a2a1
            && run.ledger.a2a2_bytes == predicted.a2a2;
        let checksum = logits_checksum(&run.logits);
        checksums.push(checksum.clone());
        let section = json!({
            "workers": workers,
            "seq_len": tokens.len(),
            "a2a1_bytes": run.ledger.a2a1_bytes,
            "a2a2_bytes": run.ledger.a2a2_bytes,
            "kv_gather_bytes": run.ledger.kv_gather_bytes,
            "per_layer": run.ledger.per_layer,
            "predicted": {"a2a1": predicted.a2a1, "a2a2": predicted.a2a2},
            "est_seconds": spsim::est_seconds(&run.ledger, &sp_cfg),
            "logits_checksum": checksum,
        });
        zdc_core::formats::save_json(&section, &out.join(format!("sp-w{workers}.json")))?;
        sections.push(section);
    }
    let invariant = checksums.windows(2).all(|w| w[0] == w[1]);
    let checks = vec![
        CheckResult {
            name: "sp-ledger-matches-model".into(),
            pass: model_match,
            detail: "simulated exchange bytes equal the closed-form prediction".into(),
        },
        CheckResult {
            name: "sp-worker-count-invariance".into(),
            pass: invariant,
            detail: format!("logits checksums across worker counts: {checksums:?}"),
        },
    ];
    Ok((json!(sections), checks))
}

fn verification_checks(
    cfg: &ExperimentConfig,
    art: &Artifacts,
    report: &ExperimentReport,
) -> anyhow::Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    let prompt = prompt_tokens(&art.corpus, 0, cfg.run.prompt_len)?;
    let n_layers = art.model.dims.n_layers;
    fn req<'a>(tokens: &'a [u32], plan: &'a CompressionPlan, mode: Mode) -> ForwardRequest<'a> {
        ForwardRequest { tokens, plan, mode, normalize_importance: true, capture_qkv: false }
    }

    let none = CompressionPlan::none(n_layers);
    let base = forward(ModelRef::Baseline(&art.model), &req(&prompt, &none, Mode::Baseline))?;
    let zero = forward(ModelRef::Folded(&art.folded), &req(&prompt, &none, Mode::Zdc))?;
    let rel = rel_frob_diff(&zero.logits, &base.logits);
    checks.push(CheckResult {
        name: "zero-drop-identity".into(),
        pass: rel <= 1e-8,
        detail: format!("relative logits deviation at p=0: {rel:.3e}"),
    });

    let zdc = forward(ModelRef::Folded(&art.folded), &req(&prompt, &art.plan, Mode::Zdc))?;
    checks.push(CheckResult {
        name: "zdc-offline-only".into(),
        pass: zdc.stats.flops.compress == 0 && zdc.stats.flops.decompress == 0,
        detail: format!(
            "compress={} decompress={}",
            zdc.stats.flops.compress, zdc.stats.flops.decompress
        ),
    });

    let zo = forward(ModelRef::Folded(&art.folded), &req(&prompt, &art.plan, Mode::ZdcZo))?;
    let zo_rel = rel_frob_diff(&zo.logits, &zdc.logits);
    checks.push(CheckResult {
        name: "zo-online-counters".into(),
        pass: zo.stats.flops.compress > 0 && zo.stats.flops.decompress > 0 && zo_rel <= 1e-12,
        detail: format!(
            "compress={} decompress={} logits deviation {zo_rel:.3e}",
            zo.stats.flops.compress, zo.stats.flops.decompress
        ),
    });

    let lt = forward(ModelRef::Folded(&art.folded), &req(&prompt, &art.plan, Mode::ZdcLt))?;
    checks.push(CheckResult {
        name: "importance-equivalence".into(),
        pass: lt.classes == zdc.classes && lt.stats.flops.attn > zdc.stats.flops.attn,
        detail: format!(
            "classes equal: {}; attn flops {} vs {}",
            lt.classes == zdc.classes,
            lt.stats.flops.attn,
            zdc.stats.flops.attn
        ),
    });

    let kvc_expect = engine::kvc_floats_model(&art.plan, &art.model.dims, prompt.len())?;
    checks.push(CheckResult {
        name: "kvc-closed-form".into(),
        pass: zdc.stats.kvc_floats == kvc_expect,
        detail: format!("stored {} expected {}", zdc.stats.kvc_floats, kvc_expect),
    });

    let zero_point = report.degradation.iter().find(|pt| pt.p == 0.0);
    let zero_ok = zero_point
        .map(|pt| pt.d_layer <= 1e-9 && pt.d_head <= 1e-9 && pt.q_d.abs() <= 1e-9)
        .unwrap_or(false);
    checks.push(CheckResult {
        name: "degradation-vanishes-at-zero".into(),
        pass: zero_ok,
        detail: format!("p=0 sweep point: {zero_point:?}"),
    });

    let totals_ok = report
        .runs
        .iter()
        .zip(&report.total_flops)
        .all(|(run, &total)| run.flops.total() == total);
    checks.push(CheckResult {
        name: "report-totals".into(),
        pass: totals_ok,
        detail: "per-run totals equal the sum of their breakdowns".into(),
    });

    if let Some(feasible) = art.plan_outcome.get("feasible").and_then(|v| v.as_bool()) {
        checks.push(CheckResult {
            name: "plan-feasible".into(),
            pass: feasible,
            detail: format!("plan search outcome: {}", art.plan_outcome),
        });
    }
    Ok(checks)
}

/// Runs the full experiment described by `cfg`, writing artifacts under
/// its `out_dir` and returning the report plus the path it was written to.
pub fn run_all(cfg: &ExperimentConfig) -> anyhow::Result<(ExperimentReport, PathBuf)> {
    let out = PathBuf::from(&cfg.experiment.out_dir);
    fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;

    let art = build_artifacts(cfg, &out)?;
    let mut report = ExperimentReport::skeleton();
    report.config = json!({
        "config": cfg,
        "group_map": art.group_map,
        "plan_outcome": art.plan_outcome,
    });
    report.plan = Some(art.plan.clone());

    run_modes(cfg, &art, &out, &mut report)?;

    let all_seqs = art.corpus.all_sequences();
    let eval: Vec<&[u32]> = all_seqs.iter().take(cfg.plan.eval_sequences).copied().collect();
    report.degradation = degradation_sweep(cfg, &art, &eval)?;

    let (sp_value, sp_checks) = sp_sweep(cfg, &art, &out)?;
    report.sp = Some(sp_value);

    let mut checks = verification_checks(cfg, &art, &report)?;
    checks.extend(sp_checks);
    report.checks = checks;

    let path = out.join("experiment.json");
    metrics::emit_report(&report, &path)?;
    Ok((report, path))
}
