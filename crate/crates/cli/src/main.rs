//! `zdc`: command-line front end over the compression library. Each
//! subcommand wraps one stage (model and corpus generation, rotation
//! derivation, folding, instrumented runs, plan search, the
//! sequence-parallel simulator, report merging); `all` chains every stage
//! from a single TOML config and succeeds only if every check passes.

mod config;
mod orchestrate;

use anyhow::{bail, ensure, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use std::fs;
use std::path::{Path, PathBuf};
use zdc_core::corpus::{self, CorpusSpec};
use zdc_core::engine::{forward, generate, ForwardRequest, Mode, ModelRef, RunStats};
use zdc_core::metrics::{CheckResult, ExperimentReport};
use zdc_core::model::{load_folded, load_model, save_model, ModelDims, ToyModel};
use zdc_core::pipeline;
use zdc_core::plan::{load_plan, save_plan, CompressionPlan};
use zdc_core::planner::{self, GridSpec};
use zdc_core::spsim::{self, SpConfig};

#[derive(Parser)]
#[command(name = "zdc", version, about = "Zero-delay QKV compression toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded toy transformer and save it as a model file.
    GenModel {
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 32)]
        d_mlp: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a topic-structured synthetic corpus.
    GenCorpus {
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 4)]
        topics: usize,
        #[arg(long, default_value_t = 8)]
        sequences_per_topic: usize,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive per-head rotation matrices from corpus activations.
    Rotations {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Fraction of sequences dropped per topic before collection.
        #[arg(long, default_value_t = 0.5)]
        prune: f64,
        /// Centroids per head and tensor; 0 picks a size-based default.
        #[arg(long, default_value_t = 0)]
        kmeans_k: usize,
        #[arg(long, default_value_t = 25)]
        kmeans_iters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold a rotation set into model parameters.
    Fold {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one mode over a prompt and write its counter stats.
    Run {
        /// Original model file; required by baseline mode.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Folded model file; required by every zdc mode.
        #[arg(long)]
        folded: Option<PathBuf>,
        /// Plan file; omitted means a uniform plan from --uniform-p/-g.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "zdc")]
        mode: String,
        /// Token ids, whitespace-separated or a JSON array.
        #[arg(long)]
        prompt_file: PathBuf,
        #[arg(long, default_value_t = 0)]
        max_new: usize,
        #[arg(long, default_value_t = 0.35)]
        uniform_p: f64,
        #[arg(long, default_value_t = 0.5)]
        uniform_g: f64,
        #[arg(long, default_value = "stats.json")]
        stats_out: PathBuf,
    },
    /// Search compression plans against a degradation target.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        folded: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        target_qd: f64,
        /// "oracle" exhausts the grid; "regressor" fits the frontier first.
        #[arg(long, default_value = "oracle")]
        mode: String,
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long, default_value_t = 6)]
        eval_sequences: usize,
        #[arg(long, default_value_t = 0.95)]
        group_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        group_g: f64,
        #[arg(long, default_value = "plan.json")]
        out: PathBuf,
    },
    /// Simulate sequence-parallel execution and account its traffic.
    SpSim {
        #[arg(long)]
        folded: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value_t = 0.35)]
        uniform_p: f64,
        #[arg(long, default_value_t = 0.5)]
        uniform_g: f64,
        /// Worker counts, repeatable or comma-separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
        workers: Vec<usize>,
        /// Length of the synthetic prompt when no prompt file is given.
        #[arg(long, default_value_t = 24)]
        seq_len: usize,
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        /// Decode steps to simulate after the prompt.
        #[arg(long, default_value_t = 0)]
        max_new: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        bytes_per_element: u64,
        #[arg(long, default_value_t = 1e9)]
        link_bandwidth: f64,
        #[arg(long, default_value = "sp.json")]
        report: PathBuf,
    },
    /// Merge run stats, an SP section, and a plan into one report.
    Report {
        #[arg(long, value_delimiter = ',', required = true)]
        stats: Vec<PathBuf>,
        #[arg(long)]
        sp: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "experiment.json")]
        out: PathBuf,
    },
    /// Run the whole experiment a config file describes.
    All {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_prompt(path: &Path) -> anyhow::Result<Vec<u32>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading prompt file {}", path.display()))?;
    let trimmed = text.trim();
    let tokens: Vec<u32> = if trimmed.starts_with('[') {
        serde_json::from_str(trimmed).context("parsing prompt file as a JSON array")?
    } else {
        trimmed
            .split_whitespace()
            .map(|w| w.parse::<u32>().with_context(|| format!("bad token id {w:?}")))
            .collect::<anyhow::Result<_>>()?
    };
    ensure!(!tokens.is_empty(), "prompt file {} holds no tokens", path.display());
    Ok(tokens)
}

fn plan_or_uniform(
    plan: Option<&Path>,
    n_layers: usize,
    uniform_p: f64,
    uniform_g: f64,
) -> anyhow::Result<CompressionPlan> {
    let plan = match plan {
        Some(path) => load_plan(path)?,
        None => CompressionPlan::uniform(n_layers, uniform_p, uniform_g),
    };
    plan.validate(n_layers)?;
    Ok(plan)
}

fn cmd_run(
    model: Option<PathBuf>,
    folded: Option<PathBuf>,
    plan: Option<PathBuf>,
    mode_str: &str,
    prompt_file: &Path,
    max_new: usize,
    uniform_p: f64,
    uniform_g: f64,
    stats_out: &Path,
) -> anyhow::Result<()> {
    let mode = Mode::parse(mode_str)?;
    let prompt = read_prompt(prompt_file)?;
    let (base_model, folded_model);
    let (model_ref, n_layers) = if mode == Mode::Baseline {
        let dir = model.context("baseline mode needs --model")?;
        base_model = load_model(&dir)?;
        (ModelRef::Baseline(&base_model), base_model.dims.n_layers)
    } else {
        let dir = folded.context("compressed modes need --folded")?;
        folded_model = load_folded(&dir)?;
        (ModelRef::Folded(&folded_model), folded_model.dims.n_layers)
    };
    let plan = if mode == Mode::Baseline {
        CompressionPlan::none(n_layers)
    } else {
        plan_or_uniform(plan.as_deref(), n_layers, uniform_p, uniform_g)?
    };
    let stats = if max_new > 0 {
        generate(model_ref, &prompt, max_new, &plan, mode, true)?.stats
    } else {
        forward(
            model_ref,
            &ForwardRequest {
                tokens: &prompt,
                plan: &plan,
                mode,
                normalize_importance: true,
                capture_qkv: false,
            },
        )?
        .stats
    };
    zdc_core::formats::save_json(&stats, stats_out)?;
    println!(
        "mode {} flops {} kvc_floats {} -> {}",
        stats.mode,
        stats.flops.total(),
        stats.kvc_floats,
        stats_out.display()
    );
    Ok(())
}

fn cmd_plan(
    model_dir: &Path,
    folded_dir: &Path,
    corpus_path: &Path,
    target_qd: f64,
    mode: &str,
    grid_name: &str,
    eval_sequences: usize,
    group_threshold: f64,
    group_g: f64,
    out: &Path,
) -> anyhow::Result<()> {
    let model = load_model(model_dir)?;
    let folded = load_folded(folded_dir)?;
    let corp = corpus::load_corpus(corpus_path)?;
    let all_seqs = corp.all_sequences();
    let eval: Vec<&[u32]> = all_seqs.iter().take(eval_sequences.max(1)).copied().collect();
    ensure!(!eval.is_empty(), "corpus holds no sequences");
    let masks = pipeline::calibration_importance_sets(&model, &eval, group_g, true)?;
    let group_map = pipeline::identify_layer_groups(&masks, group_threshold);
    let grid = GridSpec::named(grid_name)?;
    let plan = match mode {
        "oracle" => {
            let (outcome, samples) =
                planner::enumerate_oracle(&model, &folded, &eval, &grid, &group_map, true, target_qd)?;
            println!(
                "oracle: {} plans evaluated, feasible {}, q_d {:.6}, objective {:.4}",
                samples.len(),
                outcome.feasible,
                outcome.best.q_d,
                outcome.best.objective
            );
            outcome.best.plan
        }
        "regressor" => {
            let samples = planner::evaluate_grid(&model, &folded, &eval, &grid, &group_map, true)?;
            let targets = planner::linspace_targets(&samples, 24);
            let frontier = planner::frontier_samples(&samples, &targets)?;
            let reg = planner::fit_regressor(&frontier, grid.direction)?;
            let plan = reg.predict(target_qd)?;
            let base = planner::baseline_perplexity(&model, &eval, true)?;
            let measured = planner::qd_against_base(&folded, &plan, &eval, true, base)?;
            println!(
                "regressor: degree {}, {} frontier samples, measured q_d {:.6}",
                reg.degree,
                frontier.len(),
                measured
            );
            plan
        }
        other => bail!("unknown plan mode {other:?} (use \"oracle\" or \"regressor\")"),
    };
    save_plan(&plan, out)?;
    println!("plan -> {}", out.display());
    Ok(())
}

/// Deterministic stand-in prompt when no file is given: the first sequence
/// of a one-topic corpus generated from the model's own vocabulary.
fn synthetic_prompt(dims: &ModelDims, seq_len: usize, seed: u64) -> anyhow::Result<Vec<u32>> {
    let spec =
        CorpusSpec { vocab: dims.vocab, n_topics: 1, sequences_per_topic: 1, seq_len };
    let corp = corpus::generate(&spec, seed)?;
    Ok(corp.topics[0].sequences[0].clone())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sp_sim(
    folded_dir: &Path,
    plan: Option<PathBuf>,
    uniform_p: f64,
    uniform_g: f64,
    workers: &[usize],
    seq_len: usize,
    prompt_file: Option<PathBuf>,
    max_new: usize,
    seed: u64,
    bytes_per_element: u64,
    link_bandwidth: f64,
    report_path: &Path,
) -> anyhow::Result<()> {
    let folded = load_folded(folded_dir)?;
    let dims = folded.dims;
    let plan = plan_or_uniform(plan.as_deref(), dims.n_layers, uniform_p, uniform_g)?;
    let tokens = match prompt_file {
        Some(path) => read_prompt(&path)?,
        None => synthetic_prompt(&dims, seq_len, seed)?,
    };
    let mut sections = Vec::new();
    for &w in workers {
        let cfg = SpConfig { n_workers: w, bytes_per_element, link_bandwidth };
        let section = if max_new > 0 {
            let run = spsim::sp_generate(&folded, &tokens, max_new, &plan, &cfg, true)?;
            let prompt_pred = spsim::comm_bytes_model(&plan, &dims, tokens.len(), &cfg)?;
            let decode_pred = spsim::decode_comm_model(
                &plan,
                &dims,
                &run.class_log,
                tokens.len(),
                max_new,
                &cfg,
            )?;
            json!({
                "workers": w,
                "seq_len": tokens.len(),
                "decode_steps": max_new,
                "a2a1_bytes": run.ledger.a2a1_bytes,
                "a2a2_bytes": run.ledger.a2a2_bytes,
                "kv_gather_bytes": run.ledger.kv_gather_bytes,
                "per_layer": run.ledger.per_layer,
                "predicted": {
                    "a2a1": prompt_pred.a2a1 + decode_pred.a2a1,
                    "a2a2": prompt_pred.a2a2 + decode_pred.a2a2,
                    "kv_gather": decode_pred.kv_gather,
                },
                "est_seconds": spsim::est_seconds(&run.ledger, &cfg),
                "output_tokens": run.tokens,
            })
        } else {
            let run = spsim::sp_forward(&folded, &tokens, &plan, &cfg, true)?;
            let pred = spsim::comm_bytes_model(&plan, &dims, tokens.len(), &cfg)?;
            json!({
                "workers": w,
                "seq_len": tokens.len(),
                "a2a1_bytes": run.ledger.a2a1_bytes,
                "a2a2_bytes": run.ledger.a2a2_bytes,
                "kv_gather_bytes": run.ledger.kv_gather_bytes,
                "per_layer": run.ledger.per_layer,
                "predicted": {"a2a1": pred.a2a1, "a2a2": pred.a2a2},
                "est_seconds": spsim::est_seconds(&run.ledger, &cfg),
                "logits_checksum": orchestrate::logits_checksum(&run.logits),
            })
        };
        println!(
            "workers {w}: a2a1 {} a2a2 {} kv_gather {}",
            section["a2a1_bytes"], section["a2a2_bytes"], section["kv_gather_bytes"]
        );
        sections.push(section);
    }
    zdc_core::formats::save_json(&sections, report_path)?;
    println!("sp report -> {}", report_path.display());
    Ok(())
}

fn cmd_report(
    stats: &[PathBuf],
    sp: Option<PathBuf>,
    plan: Option<PathBuf>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut report = ExperimentReport::skeleton();
    for path in stats {
        let run: RunStats = zdc_core::formats::load_json(path)?;
        report.push_run(run);
    }
    if let Some(path) = &sp {
        report.sp = Some(zdc_core::formats::load_json(path)?);
    }
    if let Some(path) = &plan {
        report.plan = Some(load_plan(path)?);
    }
    report.config = json!({
        "merged_from": {
            "stats": stats.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "sp": sp.as_ref().map(|p| p.display().to_string()),
            "plan": plan.as_ref().map(|p| p.display().to_string()),
        }
    });
    let totals_ok = report
        .runs
        .iter()
        .zip(&report.total_flops)
        .all(|(run, &total)| run.flops.total() == total);
    report.checks.push(CheckResult {
        name: "report-totals".into(),
        pass: totals_ok,
        detail: "per-run totals equal the sum of their breakdowns".into(),
    });
    let offline = report.runs.iter().filter(|r| r.mode != "baseline" && r.mode != "zdc/ZO");
    let offline_ok = offline.clone().all(|r| r.flops.compress == 0 && r.flops.decompress == 0);
    report.checks.push(CheckResult {
        name: "zdc-offline-only".into(),
        pass: offline_ok,
        detail: format!(
            "{} folded-path runs carry zero compression counters",
            offline.count()
        ),
    });
    if let Some(zo) = report.runs.iter().find(|r| r.mode == "zdc/ZO") {
        report.checks.push(CheckResult {
            name: "zo-online-counters".into(),
            pass: zo.flops.compress > 0 && zo.flops.decompress > 0,
            detail: format!(
                "compress={} decompress={}",
                zo.flops.compress, zo.flops.decompress
            ),
        });
    }
    zdc_core::metrics::emit_report(&report, out)?;
    for check in &report.checks {
        println!("check {}: {}", check.name, if check.pass { "pass" } else { "fail" });
    }
    println!("report -> {}", out.display());
    Ok(())
}

fn cmd_all(config_path: &Path) -> anyhow::Result<()> {
    let cfg = config::load(config_path)?;
    let (report, path) = orchestrate::run_all(&cfg)?;
    for check in &report.checks {
        println!("check {}: {}", check.name, if check.pass { "pass" } else { "fail" });
    }
    println!("report -> {}", path.display());
    if !report.all_checks_pass() {
        std::process::exit(1);
    }
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenModel { layers, heads, head_dim, d_mlp, vocab, seed, out } => {
            let dims = ModelDims { n_layers: layers, n_heads: heads, head_dim, d_mlp, vocab };
            let model = ToyModel::generate(dims, seed)?;
            save_model(&model, &out, Some(seed))?;
            println!("model {dims:?} -> {}", out.display());
        }
        Cmd::GenCorpus { vocab, topics, sequences_per_topic, seq_len, seed, out } => {
            let spec = CorpusSpec { vocab, n_topics: topics, sequences_per_topic, seq_len };
            let corp = corpus::generate(&spec, seed)?;
            corpus::save_corpus(&corp, &out)?;
            println!(
                "corpus: {} topics, {} sequences -> {}",
                corp.topics.len(),
                corp.total_sequences(),
                out.display()
            );
        }
        Cmd::Rotations { model, corpus: corpus_path, prune, kmeans_k, kmeans_iters, seed, out } => {
            let model = load_model(&model)?;
            let corp = corpus::load_corpus(&corpus_path)?;
            let pruned = corpus::prune_corpus(&corp, prune, seed)?;
            let bank = pipeline::collect_activations(&model, &pruned)?;
            let k = if kmeans_k == 0 {
                pipeline::default_kmeans_k(bank.heads[0][0].q.rows())
            } else {
                kmeans_k
            };
            let rotations = pipeline::compute_rotations(&model, &bank, k, kmeans_iters, seed)?;
            pipeline::save_rotations(&rotations, &out, Some(seed))?;
            println!("rotations (k={k}) -> {}", out.display());
        }
        Cmd::Fold { model, rotations, out } => {
            let model = load_model(&model)?;
            let rotations = pipeline::load_rotations(&rotations)?;
            let folded = pipeline::fold_parameters(&model, &rotations)?;
            zdc_core::model::save_folded(&folded, &out)?;
            println!("folded model -> {}", out.display());
        }
        Cmd::Run {
            model,
            folded,
            plan,
            mode,
            prompt_file,
            max_new,
            uniform_p,
            uniform_g,
            stats_out,
        } => cmd_run(
            model, folded, plan, &mode, &prompt_file, max_new, uniform_p, uniform_g, &stats_out,
        )?,
        Cmd::Plan {
            model,
            folded,
            corpus: corpus_path,
            target_qd,
            mode,
            grid,
            eval_sequences,
            group_threshold,
            group_g,
            out,
        } => cmd_plan(
            &model,
            &folded,
            &corpus_path,
            target_qd,
            &mode,
            &grid,
            eval_sequences,
            group_threshold,
            group_g,
            &out,
        )?,
        Cmd::SpSim {
            folded,
            plan,
            uniform_p,
            uniform_g,
            workers,
            seq_len,
            prompt_file,
            max_new,
            seed,
            bytes_per_element,
            link_bandwidth,
            report,
        } => cmd_sp_sim(
            &folded,
            plan,
            uniform_p,
            uniform_g,
            &workers,
            seq_len,
            prompt_file,
            max_new,
            seed,
            bytes_per_element,
            link_bandwidth,
            &report,
        )?,
        Cmd::Report { stats, sp, plan, out } => cmd_report(&stats, sp, plan, &out)?,
        Cmd::All { config } => cmd_all(&config)?,
    }
    Ok(())
}
