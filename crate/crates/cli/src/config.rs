//! TOML configuration for `zdc all`. Every knob of the end-to-end flow
//! lives here; missing keys take the documented defaults and unknown keys
//! are rejected, so a config file is a complete description of a run.

use serde::{Deserialize, Serialize};
use zdc_core::corpus::CorpusSpec;
use zdc_core::model::ModelDims;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub corpus: CorpusSection,
    pub pipeline: PipelineSection,
    pub plan: PlanSection,
    pub run: RunSection,
    pub sp: SpSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub seed: u64,
    pub out_dir: String,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { seed: 7, out_dir: "out".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub d_mlp: usize,
    pub vocab: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { layers: 4, heads: 4, head_dim: 16, d_mlp: 32, vocab: 64 }
    }
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n_layers: self.layers,
            n_heads: self.heads,
            head_dim: self.head_dim,
            d_mlp: self.d_mlp,
            vocab: self.vocab,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub topics: usize,
    pub sequences_per_topic: usize,
    pub seq_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { topics: 4, sequences_per_topic: 8, seq_len: 32 }
    }
}

impl CorpusSection {
    pub fn spec(&self, vocab: usize) -> CorpusSpec {
        CorpusSpec {
            vocab,
            n_topics: self.topics,
            sequences_per_topic: self.sequences_per_topic,
            seq_len: self.seq_len,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    /// Fraction of calibration sequences dropped before activation
    /// collection.
    pub prune: f64,
    /// k-means centroid count per head and tensor; 0 picks a size-based
    /// default automatically.
    pub kmeans_k: usize,
    pub kmeans_iters: usize,
    /// Important-token overlap above which a layer joins the previous
    /// group instead of starting its own.
    pub group_threshold: f64,
    /// Important fraction used when computing the grouping masks.
    pub group_g: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            prune: 0.5,
            kmeans_k: 0,
            kmeans_iters: 25,
            group_threshold: 0.95,
            group_g: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    /// "oracle", "regressor", "uniform", or "file".
    pub source: String,
    pub target_qd: f64,
    /// Grid preset name for the oracle and regressor sources.
    pub grid: String,
    pub uniform_p: f64,
    pub uniform_g: f64,
    /// Plan path when `source = "file"`.
    pub file: String,
    /// How many corpus sequences feed quality measurement.
    pub eval_sequences: usize,
}

impl Default for PlanSection {
    fn default() -> Self {
        PlanSection {
            source: "oracle".into(),
            target_qd: 0.1,
            grid: "laptop".into(),
            uniform_p: 0.35,
            uniform_g: 0.5,
            file: String::new(),
            eval_sequences: 6,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub modes: Vec<String>,
    pub prompt_len: usize,
    pub max_new: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            modes: ["baseline", "zdc", "zdc/ZO", "zdc/DT", "zdc/DL", "zdc/LT"]
                .map(String::from)
                .to_vec(),
            prompt_len: 24,
            max_new: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpSection {
    pub workers: Vec<usize>,
    pub seq_len: usize,
    pub bytes_per_element: u64,
    pub link_bandwidth: f64,
}

impl Default for SpSection {
    fn default() -> Self {
        SpSection { workers: vec![1, 2, 4], seq_len: 24, bytes_per_element: 8, link_bandwidth: 1e9 }
    }
}

pub fn load(path: &std::path::Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("reading config {}: {e}", path.display()))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("parsing config: {e}"))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    anyhow::ensure!(cfg.model.vocab >= 2, "model vocab must be at least 2");
    anyhow::ensure!(
        cfg.run.prompt_len >= 2 && cfg.run.prompt_len <= cfg.corpus.seq_len,
        "run prompt_len must be in 2..=corpus seq_len"
    );
    anyhow::ensure!(
        cfg.sp.seq_len >= 2 && cfg.sp.seq_len <= cfg.corpus.seq_len,
        "sp seq_len must be in 2..=corpus seq_len"
    );
    anyhow::ensure!(!cfg.run.modes.is_empty(), "run modes must not be empty");
    anyhow::ensure!(!cfg.sp.workers.is_empty(), "sp workers must not be empty");
    anyhow::ensure!(
        cfg.plan.eval_sequences >= 1,
        "plan eval_sequences must be at least 1"
    );
    match cfg.plan.source.as_str() {
        "oracle" | "regressor" | "uniform" => {}
        "file" => anyhow::ensure!(!cfg.plan.file.is_empty(), "plan source \"file\" needs plan.file"),
        other => anyhow::bail!("unknown plan source {other:?}"),
    }
    Ok(())
}
