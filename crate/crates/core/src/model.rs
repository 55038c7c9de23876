//! Seeded toy transformer used as the workload for the compression
//! pipeline: an embedding table, per-layer per-head Q/K/V projections, a
//! per-layer output projection, a two-matrix tanh MLP with residual
//! connections, and a vocab-sized output head. No layer norm, nothing
//! learned; weights are drawn once from a seeded stream.

use crate::error::Error;
use crate::formats;
use crate::rng;
use crate::tensor::Matrix;
use crate::Result;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub d_mlp: usize,
    pub vocab: usize,
}

impl ModelDims {
    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.vocab == 0 {
            return Err(Error::BadModel { reason: "all dimensions must be positive".into() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Output projection, d x d, applied on the right of the concatenated
    /// head outputs.
    pub w_l: Matrix,
    pub mlp1: Matrix,
    pub mlp2: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub output_head: Matrix,
}

fn normal(rng: &mut impl Rng, std: f64) -> f64 {
    // Box-Muller; one value per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std
}

fn random_weights(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let std = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| normal(rng, std))
}

/// Orthogonal n x n matrix: the left factor of a random Gaussian square.
fn orthogonal(rng: &mut impl Rng, n: usize) -> Result<Matrix> {
    let g = Matrix::from_fn(n, n, |_, _| normal(rng, 1.0));
    Ok(crate::svd::svd(&g)?.u)
}

impl ToyModel {
    /// Draws a fresh model. Embedding entries are unit normal and weight
    /// matrices are scaled by 1/sqrt(fan_in), which puts attention scores
    /// at unit scale before the 1/sqrt(head_dim) factor.
    pub fn generate(dims: ModelDims, seed: u64) -> Result<ToyModel> {
        dims.validate()?;
        let d = dims.d_model();
        let mut emb_rng = rng::stream(seed, "model-embedding");
        let embedding = Matrix::from_fn(dims.vocab, d, |_, _| normal(&mut emb_rng, 1.0));
        let mut layers = Vec::with_capacity(dims.n_layers);
        for l in 0..dims.n_layers {
            let mut lr = rng::stream_n(seed, "model-layer", l as u64);
            let heads = (0..dims.n_heads)
                .map(|_| HeadParams {
                    wq: random_weights(&mut lr, d, dims.head_dim),
                    wk: random_weights(&mut lr, d, dims.head_dim),
                    wv: random_weights(&mut lr, d, dims.head_dim),
                })
                .collect();
            let w_l = random_weights(&mut lr, d, d);
            let mlp1 = random_weights(&mut lr, d, dims.d_mlp);
            let mlp2 = random_weights(&mut lr, dims.d_mlp, d);
            layers.push(LayerParams { heads, w_l, mlp1, mlp2 });
        }
        let mut out_rng = rng::stream(seed, "model-output");
        let output_head = random_weights(&mut out_rng, d, dims.vocab);
        Ok(ToyModel { dims, embedding, layers, output_head })
    }

    /// Builds a model wired by hand to predict from a bigram table rather
    /// than drawn at random. Untrained random models score worse than the
    /// uniform distribution, so narrowing their activations can only pull
    /// logits toward uniform and *improve* the cross-entropy proxy; quality
    /// studies need a model where compression genuinely costs accuracy.
    ///
    /// Wiring: token `t` embeds as a one-hot row scaled by `0.9^t`, giving
    /// the activation spectra a geometric decay. Each layer projects
    /// through slices of seeded orthogonal mixers; Q and K share one, so a
    /// token scores its own earlier occurrences highest. The output
    /// projection inverts the value mixer and then shifts the result into
    /// a second coordinate block, so attention deposits a softmax-weighted
    /// mix of past token identities there while the embedding block stays
    /// untouched. The output head reads only the shifted block, mapping
    /// identity coordinate `t` to `log_probs` row `t`: every logit is an
    /// attention-routed bigram lookup with no residual shortcut, and
    /// truncating rotated Q/K/V columns corrupts exactly that pathway. As
    /// a result measured degradation grows with the drop ratio instead of
    /// shrinking toward uniform.
    ///
    /// `log_probs` must be vocab x vocab, and both coordinate blocks must
    /// fit the model width (`2 * vocab <= n_heads * head_dim`).
    pub fn bigram_predictor(dims: ModelDims, log_probs: &Matrix, seed: u64) -> Result<ToyModel> {
        dims.validate()?;
        let d = dims.d_model();
        let v = dims.vocab;
        if 2 * v > d {
            return Err(Error::BadModel {
                reason: format!("bigram predictor needs 2 * vocab <= d_model, got {} > {d}", 2 * v),
            });
        }
        if log_probs.rows() != v || log_probs.cols() != v {
            return Err(Error::ShapeMismatch {
                expected: format!("{v}x{v} log-probability table"),
                got: format!("{}x{}", log_probs.rows(), log_probs.cols()),
            });
        }
        const DECAY: f64 = 0.9;
        const ATTN_GAIN: f64 = 4.0;
        const MIX_GAIN: f64 = 0.5;
        const MLP_SCALE: f64 = 1e-3;
        const LOGIT_GAIN: f64 = 1.5;
        let dh = dims.head_dim;
        let embedding =
            Matrix::from_fn(v, d, |t, j| if j == t { DECAY.powi(t as i32) } else { 0.0 });
        let mut layers = Vec::with_capacity(dims.n_layers);
        for l in 0..dims.n_layers {
            let mut lr = rng::stream_n(seed, "bigram-layer", l as u64);
            let qk_mixer = orthogonal(&mut lr, d)?;
            let v_mixer = orthogonal(&mut lr, d)?;
            let heads = (0..dims.n_heads)
                .map(|h| {
                    let slice = |m: &Matrix, gain: f64| {
                        Matrix::from_fn(d, dh, |i, j| gain * m.get(i, h * dh + j))
                    };
                    HeadParams {
                        wq: slice(&qk_mixer, ATTN_GAIN),
                        wk: slice(&qk_mixer, ATTN_GAIN),
                        wv: slice(&v_mixer, 1.0),
                    }
                })
                .collect();
            // v_mixer^T recovers identity coordinates; the column shift by
            // `v` lands them in the read-out block and drops anything the
            // previous layers wrote there.
            let w_l = Matrix::from_fn(d, d, |i, j| {
                if j >= v && j < 2 * v {
                    MIX_GAIN * v_mixer.get(j - v, i)
                } else {
                    0.0
                }
            });
            let mlp1 = Matrix::from_fn(d, dims.d_mlp, |_, _| MLP_SCALE * normal(&mut lr, 1.0));
            let mlp2 = Matrix::from_fn(dims.d_mlp, d, |_, _| MLP_SCALE * normal(&mut lr, 1.0));
            layers.push(LayerParams { heads, w_l, mlp1, mlp2 });
        }
        let output_head = Matrix::from_fn(d, v, |i, y| {
            if i >= v && i < 2 * v {
                LOGIT_GAIN * log_probs.get(i - v, y)
            } else {
                0.0
            }
        });
        Ok(ToyModel { dims, embedding, layers, output_head })
    }

    /// Embeds a token sequence into an s x d matrix.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.dims.d_model();
        let mut e = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.dims.vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.dims.vocab });
            }
            e.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }
        Ok(e)
    }

    /// Head `h`'s slice of the output projection in rotation-input
    /// orientation: a d x head_dim matrix whose column `j` is row
    /// `h * head_dim + j` of `w_l`.
    pub fn w_l_head(&self, layer: usize, head: usize) -> Matrix {
        let d = self.dims.d_model();
        let dh = self.dims.head_dim;
        let w_l = &self.layers[layer].w_l;
        Matrix::from_fn(d, dh, |i, j| w_l.get(head * dh + j, i))
    }
}

/// One attention head after folding: projections carry the head's rotations
/// on the right, so truncating columns of the projected activations is the
/// whole online compression step.
#[derive(Debug, Clone)]
pub struct FoldedHead {
    pub wq_r: Matrix,
    pub wk_r: Matrix,
    pub wv_r: Matrix,
}

#[derive(Debug, Clone)]
pub struct FoldedLayer {
    pub heads: Vec<FoldedHead>,
    /// Folded output projection, d x d. Rows `h * head_dim ..` hold head
    /// `h`'s block, ordered so dropping a head's trailing rows matches
    /// dropping the trailing columns of its rotated V.
    pub wl_r: Matrix,
    pub mlp1: Matrix,
    pub mlp2: Matrix,
}

/// Model with rotations folded into the attention parameters. Embedding,
/// MLP, and output head are byte-identical copies from the source model.
#[derive(Debug, Clone)]
pub struct FoldedModel {
    pub dims: ModelDims,
    pub embedding: Matrix,
    pub layers: Vec<FoldedLayer>,
    pub output_head: Matrix,
}

impl FoldedModel {
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let d = self.dims.d_model();
        let mut e = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= self.dims.vocab {
                return Err(Error::TokenOutOfRange { token: t, vocab: self.dims.vocab });
            }
            e.row_mut(i).copy_from_slice(self.embedding.row(t as usize));
        }
        Ok(e)
    }
}

const FOLDED_SCHEMA: &str = "zdc-folded/1";

pub fn save_folded(model: &FoldedModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ModelManifest { schema: FOLDED_SCHEMA.into(), dims: model.dims, seed: None };
    formats::save_json(&manifest, &dir.join("manifest.json"))?;
    formats::write_matrix_pair(&model.embedding, dir, "embedding")?;
    formats::write_matrix_pair(&model.output_head, dir, "output_head")?;
    for (l, layer) in model.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            formats::write_matrix_pair(&head.wq_r, dir, &format!("l{l}_h{h}_wq_r"))?;
            formats::write_matrix_pair(&head.wk_r, dir, &format!("l{l}_h{h}_wk_r"))?;
            formats::write_matrix_pair(&head.wv_r, dir, &format!("l{l}_h{h}_wv_r"))?;
        }
        formats::write_matrix_pair(&layer.wl_r, dir, &format!("l{l}_wl_r"))?;
        formats::write_matrix_pair(&layer.mlp1, dir, &format!("l{l}_mlp1"))?;
        formats::write_matrix_pair(&layer.mlp2, dir, &format!("l{l}_mlp2"))?;
    }
    Ok(())
}

pub fn load_folded(dir: &Path) -> Result<FoldedModel> {
    let manifest: ModelManifest = formats::load_json(&dir.join("manifest.json"))?;
    if manifest.schema != FOLDED_SCHEMA {
        return Err(Error::BadArtifact {
            path: dir.display().to_string(),
            reason: format!("unexpected schema {}", manifest.schema),
        });
    }
    let dims = manifest.dims;
    dims.validate()?;
    let embedding = formats::read_matrix_pair(dir, "embedding")?;
    let output_head = formats::read_matrix_pair(dir, "output_head")?;
    let mut layers = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let mut heads = Vec::with_capacity(dims.n_heads);
        for h in 0..dims.n_heads {
            heads.push(FoldedHead {
                wq_r: formats::read_matrix_pair(dir, &format!("l{l}_h{h}_wq_r"))?,
                wk_r: formats::read_matrix_pair(dir, &format!("l{l}_h{h}_wk_r"))?,
                wv_r: formats::read_matrix_pair(dir, &format!("l{l}_h{h}_wv_r"))?,
            });
        }
        layers.push(FoldedLayer {
            heads,
            wl_r: formats::read_matrix_pair(dir, &format!("l{l}_wl_r"))?,
            mlp1: formats::read_matrix_pair(dir, &format!("l{l}_mlp1"))?,
            mlp2: formats::read_matrix_pair(dir, &format!("l{l}_mlp2"))?,
        });
    }
    Ok(FoldedModel { dims, embedding, layers, output_head })
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    schema: String,
    dims: ModelDims,
    seed: Option<u64>,
}

const MODEL_SCHEMA: &str = "zdc-model/1";

/// Writes manifest plus one matrix pair (.zdcm and .json mirror) per
/// parameter.
pub fn save_model(model: &ToyModel, dir: &Path, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ModelManifest { schema: MODEL_SCHEMA.into(), dims: model.dims, seed };
    formats::save_json(&manifest, &dir.join("manifest.json"))?;
    formats::write_matrix_pair(&model.embedding, dir, "embedding")?;
    formats::write_matrix_pair(&model.output_head, dir, "output_head")?;
    for (l, layer) in model.layers.iter().enumerate() {
        for (h, head) in layer.heads.iter().enumerate() {
            formats::write_matrix_pair(&head.wq, dir, &format!("l{l}_h{h}_wq"))?;
            formats::write_matrix_pair(&head.wk, dir, &format!("l{l}_h{h}_wk"))?;
            formats::write_matrix_pair(&head.wv, dir, &format!("l{l}_h{h}_wv"))?;
        }
        formats::write_matrix_pair(&layer.w_l, dir, &format!("l{l}_wl"))?;
        formats::write_matrix_pair(&layer.mlp1, dir, &format!("l{l}_mlp1"))?;
        formats::write_matrix_pair(&layer.mlp2, dir, &format!("l{l}_mlp2"))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<ToyModel> {
    let manifest: ModelManifest = formats::load_json(&dir.join("manifest.json"))?;
    if manifest.schema != MODEL_SCHEMA {
        return Err(Error::BadArtifact {
            path: dir.display().to_string(),
            reason: format!("unexpected schema {}", manifest.schema),
        });
    }
    let dims = manifest.dims;
    dims.validate()?;
    let d = dims.d_model();
    let expect = |m: &Matrix, rows: usize, cols: usize, what: &str| -> Result<()> {
        if m.rows() != rows || m.cols() != cols {
            return Err(Error::BadArtifact {
                path: dir.display().to_string(),
                reason: format!(
                    "{what} is {}x{}, expected {rows}x{cols}",
                    m.rows(),
                    m.cols()
                ),
            });
        }
        Ok(())
    };
    let embedding = formats::read_matrix_pair(dir, "embedding")?;
    expect(&embedding, dims.vocab, d, "embedding")?;
    let output_head = formats::read_matrix_pair(dir, "output_head")?;
    expect(&output_head, d, dims.vocab, "output_head")?;
    let mut layers = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let mut heads = Vec::with_capacity(dims.n_heads);
        for h in 0..dims.n_heads {
            let wq = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_wq"))?;
            let wk = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_wk"))?;
            let wv = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_wv"))?;
            expect(&wq, d, dims.head_dim, "wq")?;
            expect(&wk, d, dims.head_dim, "wk")?;
            expect(&wv, d, dims.head_dim, "wv")?;
            heads.push(HeadParams { wq, wk, wv });
        }
        let w_l = formats::read_matrix_pair(dir, &format!("l{l}_wl"))?;
        expect(&w_l, d, d, "w_l")?;
        let mlp1 = formats::read_matrix_pair(dir, &format!("l{l}_mlp1"))?;
        expect(&mlp1, d, dims.d_mlp, "mlp1")?;
        let mlp2 = formats::read_matrix_pair(dir, &format!("l{l}_mlp2"))?;
        expect(&mlp2, dims.d_mlp, d, "mlp2")?;
        layers.push(LayerParams { heads, w_l, mlp1, mlp2 });
    }
    Ok(ToyModel { dims, embedding, layers, output_head })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dims() -> ModelDims {
        ModelDims { n_layers: 2, n_heads: 2, head_dim: 4, d_mlp: 6, vocab: 11 }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = ToyModel::generate(small_dims(), 42).unwrap();
        let b = ToyModel::generate(small_dims(), 42).unwrap();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.layers[1].heads[1].wv, b.layers[1].heads[1].wv);
        assert_eq!(a.output_head, b.output_head);
        let c = ToyModel::generate(small_dims(), 43).unwrap();
        assert_ne!(a.embedding, c.embedding);
    }

    #[test]
    fn embed_rejects_out_of_range_tokens() {
        let m = ToyModel::generate(small_dims(), 1).unwrap();
        assert!(m.embed(&[0, 10]).is_ok());
        assert!(m.embed(&[11]).is_err());
    }

    #[test]
    fn w_l_head_slices_reassemble_output_projection() {
        let m = ToyModel::generate(small_dims(), 7).unwrap();
        let d = m.dims.d_model();
        let o = Matrix::from_fn(5, d, |i, j| ((i * d + j) as f64).sin());
        let direct = o.matmul(&m.layers[0].w_l).unwrap();
        let mut via_heads = Matrix::zeros(5, d);
        for h in 0..m.dims.n_heads {
            let dh = m.dims.head_dim;
            let o_h = Matrix::from_fn(5, dh, |i, j| o.get(i, h * dh + j));
            let block = m.w_l_head(0, h).transpose();
            via_heads = via_heads.add(&o_h.matmul(&block).unwrap()).unwrap();
        }
        assert!(crate::tensor::rel_frob_diff(&via_heads, &direct) < 1e-12);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ToyModel::generate(small_dims(), 9).unwrap();
        save_model(&m, dir.path(), Some(9)).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(m.dims, back.dims);
        assert_eq!(m.embedding, back.embedding);
        assert_eq!(m.layers[0].heads[0].wq, back.layers[0].heads[0].wq);
        assert_eq!(m.layers[1].mlp2, back.layers[1].mlp2);
    }

    fn bigram_dims() -> ModelDims {
        ModelDims { n_layers: 2, n_heads: 4, head_dim: 8, d_mlp: 16, vocab: 16 }
    }

    fn bigram_fixture() -> (crate::corpus::Corpus, ToyModel) {
        let spec = crate::corpus::CorpusSpec {
            vocab: 16,
            n_topics: 3,
            sequences_per_topic: 8,
            seq_len: 24,
        };
        let corpus = crate::corpus::generate(&spec, 5).unwrap();
        let table = crate::corpus::bigram_log_probs(&corpus, 0.2).unwrap();
        let model = ToyModel::bigram_predictor(bigram_dims(), &table, 11).unwrap();
        (corpus, model)
    }

    #[test]
    fn bigram_predictor_needs_room_for_both_blocks() {
        let table = Matrix::zeros(11, 11);
        // d_model = 8 < 2 * 11, so the shifted block does not fit.
        assert!(ToyModel::bigram_predictor(small_dims(), &table, 1).is_err());
    }

    #[test]
    fn bigram_predictor_rejects_wrong_table_shape() {
        let table = Matrix::zeros(16, 12);
        assert!(ToyModel::bigram_predictor(bigram_dims(), &table, 1).is_err());
    }

    #[test]
    fn bigram_predictor_is_deterministic() {
        let (_, a) = bigram_fixture();
        let (_, b) = bigram_fixture();
        assert_eq!(a.embedding, b.embedding);
        assert_eq!(a.layers[1].heads[2].wv, b.layers[1].heads[2].wv);
        assert_eq!(a.output_head, b.output_head);
    }

    #[test]
    fn bigram_predictor_beats_uniform_guessing() {
        let (corpus, model) = bigram_fixture();
        let eval: Vec<&[u32]> = corpus.all_sequences().into_iter().take(8).collect();
        let perp = crate::planner::baseline_perplexity(&model, &eval, true).unwrap();
        let uniform = corpus.vocab as f64;
        assert!(
            perp < 0.75 * uniform,
            "perplexity {perp} not clearly below uniform {uniform}"
        );
    }
}
