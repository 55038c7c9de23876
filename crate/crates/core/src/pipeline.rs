//! Offline preparation: collect per-head Q/K/V activations from the
//! uncompressed model, reduce them with k-means, derive per-head rotations
//! from the SVD right factor for the QK pair and the V-with-output-projection
//! pair, fold the rotations into weights, and group layers whose important
//! tokens repeat. Nothing here runs during inference.

use crate::corpus::Corpus;
use crate::engine::{self, classify_by_rank, ForwardRequest, Mode, ModelRef};
use crate::error::Error;
use crate::formats;
use crate::model::{FoldedHead, FoldedLayer, FoldedModel, ModelDims, ToyModel};
use crate::plan::CompressionPlan;
use crate::rng;
use crate::svd::{orthogonality_residual, svd};
use crate::tensor::Matrix;
use crate::Result;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Lloyd iteration cap used when callers do not override it.
pub const DEFAULT_KMEANS_ITERS: usize = 25;

/// Desk-scale default cluster count for `n` activation rows.
pub fn default_kmeans_k(n: usize) -> usize {
    (n / 4).clamp(1, 4096).min(n.max(1))
}

/// Per-head activation rows gathered over a whole corpus, in token order.
#[derive(Debug, Clone)]
pub struct HeadActivations {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

#[derive(Debug, Clone)]
pub struct ActivationBank {
    pub dims: ModelDims,
    /// Indexed `[layer][head]`; every entry holds one row per corpus token.
    pub heads: Vec<Vec<HeadActivations>>,
}

/// Runs the uncompressed forward pass over every corpus sequence and stacks
/// each token's per-head q, k, v rows.
pub fn collect_activations(model: &ToyModel, corpus: &Corpus) -> Result<ActivationBank> {
    let dims = model.dims;
    if corpus.total_tokens() == 0 {
        return Err(Error::EmptyCorpus { context: "no tokens to collect activations from".into() });
    }
    let plan = CompressionPlan::none(dims.n_layers);
    let mut bufs: Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>> =
        vec![vec![(Vec::new(), Vec::new(), Vec::new()); dims.n_heads]; dims.n_layers];
    let mut total_rows = 0usize;
    for seq in corpus.all_sequences() {
        let out = engine::forward(
            ModelRef::Baseline(model),
            &ForwardRequest {
                tokens: seq,
                plan: &plan,
                mode: Mode::Baseline,
                normalize_importance: true,
                capture_qkv: true,
            },
        )?;
        let qkv = out.qkv.expect("capture was requested");
        for (l, layer) in qkv.iter().enumerate() {
            for (h, (q, k, v)) in layer.iter().enumerate() {
                bufs[l][h].0.extend_from_slice(q.data());
                bufs[l][h].1.extend_from_slice(k.data());
                bufs[l][h].2.extend_from_slice(v.data());
            }
        }
        total_rows += seq.len();
    }
    let mut heads = Vec::with_capacity(dims.n_layers);
    for layer in bufs {
        let mut row = Vec::with_capacity(dims.n_heads);
        for (q, k, v) in layer {
            row.push(HeadActivations {
                q: Matrix::from_vec(total_rows, dims.head_dim, q)?,
                k: Matrix::from_vec(total_rows, dims.head_dim, k)?,
                v: Matrix::from_vec(total_rows, dims.head_dim, v)?,
            });
        }
        heads.push(row);
    }
    Ok(ActivationBank { dims, heads })
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Lloyd's algorithm with k-means++ seeding. Stops after `iters` rounds or
/// when no centroid moves more than 1e-9. A cluster that loses all members
/// is re-seeded to the point currently farthest from its own centroid.
pub fn kmeans_reduce(vectors: &Matrix, k: usize, iters: usize, seed: u64) -> Result<Matrix> {
    let n = vectors.rows();
    let d = vectors.cols();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k-means cluster count {k} outside 1..={n}")));
    }
    let mut rng = rng::stream(seed, "kmeans");

    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2 = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let latest = *chosen.last().expect("at least one centroid");
        for i in 0..n {
            let dist = dist2(vectors.row(i), vectors.row(latest));
            if dist < d2[i] {
                d2[i] = dist;
            }
        }
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                acc += w;
                if r < acc {
                    pick = Some(i);
                    break;
                }
            }
            // Roundoff can push r past the final partial sum; fall back to
            // the last weighted point.
            pick.unwrap_or_else(|| {
                (0..n).rev().find(|&i| d2[i] > 0.0).expect("total > 0 implies a weighted point")
            })
        } else {
            // Every remaining point duplicates a centroid; keep indices
            // distinct so k centroids always come back.
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n leaves an unchosen index")
        };
        chosen.push(next);
        d2[next] = 0.0;
    }

    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| vectors.row(i).to_vec()).collect();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let dist = dist2(vectors.row(i), cent);
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            assign[i] = best;
        }
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = None;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assign[i]] <= 1 {
                    continue;
                }
                let dist = dist2(vectors.row(i), &centroids[assign[i]]);
                if dist > far_d {
                    far_d = dist;
                    far = Some(i);
                }
            }
            if let Some(i) = far {
                counts[assign[i]] -= 1;
                assign[i] = c;
                counts[c] = 1;
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mut mean = vec![0.0; d];
            for i in 0..n {
                if assign[i] == c {
                    for (m, &x) in mean.iter_mut().zip(vectors.row(i)) {
                        *m += x;
                    }
                }
            }
            for m in &mut mean {
                *m /= counts[c] as f64;
            }
            movement = movement.max(dist2(&mean, &centroids[c]).sqrt());
            centroids[c] = mean;
        }
        if movement < 1e-9 {
            break;
        }
    }
    Matrix::from_rows(&centroids)
}

fn rotation_from_rows(stacked: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let dh = stacked.cols();
    if stacked.rows() < dh {
        return Err(Error::TooFewRows { rows: stacked.rows(), head_dim: dh });
    }
    let f = svd(stacked)?;
    Ok((f.r_mat, f.sigma))
}

/// Shared rotation for a head's Q and K: right singular vectors of the two
/// row sets stacked vertically. Requires at least `head_dim` combined rows
/// so the returned factor is square.
pub fn compute_rotation_qk(q_rows: &Matrix, k_rows: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if q_rows.cols() != k_rows.cols() {
        return Err(Error::DimMismatch {
            lr: q_rows.rows(),
            lc: q_rows.cols(),
            rr: k_rows.rows(),
            rc: k_rows.cols(),
        });
    }
    rotation_from_rows(&Matrix::concat_rows(&[q_rows, k_rows])?)
}

/// Shared rotation for a head's V and its output-projection block. The
/// parameter rows ride along with the activation rows so the basis serves
/// both sides of the product.
pub fn compute_rotation_vl(v_rows: &Matrix, w_l_head: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if v_rows.cols() != w_l_head.cols() {
        return Err(Error::DimMismatch {
            lr: v_rows.rows(),
            lc: v_rows.cols(),
            rr: w_l_head.rows(),
            rc: w_l_head.cols(),
        });
    }
    rotation_from_rows(&Matrix::concat_rows(&[v_rows, w_l_head])?)
}

/// Per-head rotation pair plus the singular values the rotations came from.
#[derive(Debug, Clone)]
pub struct HeadRotations {
    pub r_qk: Matrix,
    pub r_vl: Matrix,
    pub sv_qk: Vec<f64>,
    pub sv_vl: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RotationSet {
    pub dims: ModelDims,
    /// Indexed `[layer][head]`.
    pub heads: Vec<Vec<HeadRotations>>,
}

impl RotationSet {
    /// Identity rotations: folding with these reproduces the source model's
    /// attention parameters exactly. Singular values are set to 1 so profile
    /// queries stay meaningful.
    pub fn identity(dims: &ModelDims) -> RotationSet {
        let head = HeadRotations {
            r_qk: Matrix::identity(dims.head_dim),
            r_vl: Matrix::identity(dims.head_dim),
            sv_qk: vec![1.0; dims.head_dim],
            sv_vl: vec![1.0; dims.head_dim],
        };
        RotationSet {
            dims: *dims,
            heads: vec![vec![head; dims.n_heads]; dims.n_layers],
        }
    }
}

/// Computes every head's QK and VL rotations from a collected activation
/// bank. Activation rows are first reduced to at most `kmeans_k` centroids
/// per tensor (0 disables reduction). Head tasks run in parallel with
/// per-task seeds, so the result is identical at any thread count.
pub fn compute_rotations(
    model: &ToyModel,
    bank: &ActivationBank,
    kmeans_k: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<RotationSet> {
    let dims = model.dims;
    if bank.dims != dims {
        return Err(Error::BadModel {
            reason: format!("activation bank dims {:?} do not match model dims {dims:?}", bank.dims),
        });
    }
    let flat: Vec<HeadRotations> = (0..dims.n_layers * dims.n_heads)
        .into_par_iter()
        .map(|idx| -> Result<HeadRotations> {
            let (l, h) = (idx / dims.n_heads, idx % dims.n_heads);
            let acts = &bank.heads[l][h];
            let mut seeder = rng::stream_n(seed, "rotation-kmeans", idx as u64);
            let reduce = |m: &Matrix, s: u64| -> Result<Matrix> {
                if kmeans_k == 0 || kmeans_k >= m.rows() {
                    Ok(m.clone())
                } else {
                    kmeans_reduce(m, kmeans_k, kmeans_iters, s)
                }
            };
            let (sq, sk, sv) = (seeder.gen::<u64>(), seeder.gen::<u64>(), seeder.gen::<u64>());
            let q_red = reduce(&acts.q, sq)?;
            let k_red = reduce(&acts.k, sk)?;
            let v_red = reduce(&acts.v, sv)?;
            let (r_qk, sv_qk) = compute_rotation_qk(&q_red, &k_red)?;
            let (r_vl, sv_vl) = compute_rotation_vl(&v_red, &model.w_l_head(l, h))?;
            Ok(HeadRotations { r_qk, r_vl, sv_qk, sv_vl })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut heads = Vec::with_capacity(dims.n_layers);
    let mut it = flat.into_iter();
    for _ in 0..dims.n_layers {
        heads.push(it.by_ref().take(dims.n_heads).collect());
    }
    Ok(RotationSet { dims, heads })
}

/// Multiplies each head's rotations into the model weights. Q and K share
/// the QK rotation; V and the head's output-projection block share the VL
/// rotation, the block stored transposed so dropping a head's trailing
/// projection rows mirrors dropping its trailing V columns.
pub fn fold_parameters(model: &ToyModel, rotations: &RotationSet) -> Result<FoldedModel> {
    let dims = model.dims;
    if rotations.dims != dims {
        return Err(Error::BadModel {
            reason: format!("rotation dims {:?} do not match model dims {dims:?}", rotations.dims),
        });
    }
    let dh = dims.head_dim;
    let mut layers = Vec::with_capacity(dims.n_layers);
    for (l, layer) in model.layers.iter().enumerate() {
        let mut heads = Vec::with_capacity(dims.n_heads);
        let mut wl_blocks = Vec::with_capacity(dims.n_heads);
        for h in 0..dims.n_heads {
            let rot = &rotations.heads[l][h];
            for (r, name) in [(&rot.r_qk, "qk"), (&rot.r_vl, "vl")] {
                if r.rows() != dh || r.cols() != dh {
                    return Err(Error::BadModel {
                        reason: format!(
                            "{name} rotation for layer {l} head {h} is {}x{}, expected {dh}x{dh}",
                            r.rows(),
                            r.cols()
                        ),
                    });
                }
                let residual = orthogonality_residual(r);
                if residual > 1e-8 {
                    return Err(Error::NotOrthogonal { layer: l, head: h, residual });
                }
            }
            heads.push(FoldedHead {
                wq_r: layer.heads[h].wq.matmul(&rot.r_qk)?,
                wk_r: layer.heads[h].wk.matmul(&rot.r_qk)?,
                wv_r: layer.heads[h].wv.matmul(&rot.r_vl)?,
            });
            wl_blocks.push(model.w_l_head(l, h).matmul(&rot.r_vl)?.transpose());
        }
        let block_refs: Vec<&Matrix> = wl_blocks.iter().collect();
        layers.push(FoldedLayer {
            heads,
            wl_r: Matrix::concat_rows(&block_refs)?,
            mlp1: layer.mlp1.clone(),
            mlp2: layer.mlp2.clone(),
        });
    }
    Ok(FoldedModel {
        dims,
        embedding: model.embedding.clone(),
        layers,
        output_head: model.output_head.clone(),
    })
}

/// Greedy grouping of layers whose important-token sets repeat: starting a
/// group at its first layer, each following layer joins while the fraction
/// of the group head's set it reproduces stays above `threshold`.
pub fn identify_layer_groups(importance_sets: &[Vec<bool>], threshold: f64) -> Vec<usize> {
    let mut group_map = Vec::with_capacity(importance_sets.len());
    let mut rep = 0usize;
    for (l, set) in importance_sets.iter().enumerate() {
        if l == 0 {
            group_map.push(0);
            continue;
        }
        let rep_set = &importance_sets[rep];
        let rep_size = rep_set.iter().filter(|&&b| b).count();
        let both = rep_set.iter().zip(set).filter(|&(&a, &b)| a && b).count();
        let overlap = if rep_size == 0 {
            if set.iter().any(|&b| b) { 0.0 } else { 1.0 }
        } else {
            both as f64 / rep_size as f64
        };
        if overlap > threshold {
            group_map.push(rep);
        } else {
            rep = l;
            group_map.push(l);
        }
    }
    group_map
}

/// Per-layer important-token masks from uncompressed forward passes over
/// `sequences`, all of one length: importance sums position-wise across
/// sequences, then the top `g` fraction per layer is marked.
pub fn calibration_importance_sets(
    model: &ToyModel,
    sequences: &[&[u32]],
    g: f64,
    normalize: bool,
) -> Result<Vec<Vec<bool>>> {
    if sequences.is_empty() {
        return Err(Error::EmptyCorpus { context: "calibration needs at least one sequence".into() });
    }
    let len = sequences[0].len();
    if sequences.iter().any(|s| s.len() != len) {
        return Err(Error::Invalid("calibration sequences must share one length".into()));
    }
    let dims = model.dims;
    let plan = CompressionPlan::none(dims.n_layers);
    let mut scores = vec![vec![0.0f64; len]; dims.n_layers];
    for seq in sequences {
        let out = engine::forward(
            ModelRef::Baseline(model),
            &ForwardRequest {
                tokens: seq,
                plan: &plan,
                mode: Mode::Baseline,
                normalize_importance: normalize,
                capture_qkv: false,
            },
        )?;
        for (l, layer_scores) in out.importance.iter().enumerate() {
            for (t, &s) in layer_scores.iter().enumerate() {
                scores[l][t] += s;
            }
        }
    }
    Ok(scores.iter().map(|s| classify_by_rank(s, g)).collect())
}

/// Fraction of all stored singular values below `threshold`, reported for
/// the QK pair and the VL pair separately.
pub fn singular_value_profile(rotations: &RotationSet, threshold: f64) -> (f64, f64) {
    let mut qk = (0usize, 0usize);
    let mut vl = (0usize, 0usize);
    for layer in &rotations.heads {
        for head in layer {
            qk.0 += head.sv_qk.iter().filter(|&&v| v < threshold).count();
            qk.1 += head.sv_qk.len();
            vl.0 += head.sv_vl.iter().filter(|&&v| v < threshold).count();
            vl.1 += head.sv_vl.len();
        }
    }
    let frac = |(below, total): (usize, usize)| if total == 0 { 0.0 } else { below as f64 / total as f64 };
    (frac(qk), frac(vl))
}

const ROTATIONS_SCHEMA: &str = "zdc-rotations/1";

#[derive(Serialize, Deserialize)]
struct RotationManifest {
    schema: String,
    dims: ModelDims,
    seed: Option<u64>,
    /// Fractions of singular values below 1.0 for the QK and VL pairs.
    sv_below_one_qk: f64,
    sv_below_one_vl: f64,
}

fn sv_matrix(sv: &[f64]) -> Result<Matrix> {
    Matrix::from_vec(1, sv.len(), sv.to_vec())
}

pub fn save_rotations(set: &RotationSet, dir: &Path, seed: Option<u64>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (qk_frac, vl_frac) = singular_value_profile(set, 1.0);
    let manifest = RotationManifest {
        schema: ROTATIONS_SCHEMA.into(),
        dims: set.dims,
        seed,
        sv_below_one_qk: qk_frac,
        sv_below_one_vl: vl_frac,
    };
    formats::save_json(&manifest, &dir.join("manifest.json"))?;
    for (l, layer) in set.heads.iter().enumerate() {
        for (h, head) in layer.iter().enumerate() {
            formats::write_matrix_pair(&head.r_qk, dir, &format!("l{l}_h{h}_qk_r"))?;
            formats::write_matrix_pair(&head.r_vl, dir, &format!("l{l}_h{h}_vl_r"))?;
            formats::write_matrix_pair(&sv_matrix(&head.sv_qk)?, dir, &format!("l{l}_h{h}_qk_sv"))?;
            formats::write_matrix_pair(&sv_matrix(&head.sv_vl)?, dir, &format!("l{l}_h{h}_vl_sv"))?;
        }
    }
    Ok(())
}

pub fn load_rotations(dir: &Path) -> Result<RotationSet> {
    let manifest: RotationManifest = formats::load_json(&dir.join("manifest.json"))?;
    if manifest.schema != ROTATIONS_SCHEMA {
        return Err(Error::BadArtifact {
            path: dir.display().to_string(),
            reason: format!("unexpected schema {}", manifest.schema),
        });
    }
    let dims = manifest.dims;
    dims.validate()?;
    let dh = dims.head_dim;
    let mut heads = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let mut row = Vec::with_capacity(dims.n_heads);
        for h in 0..dims.n_heads {
            let r_qk = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_qk_r"))?;
            let r_vl = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_vl_r"))?;
            let sv_qk = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_qk_sv"))?;
            let sv_vl = formats::read_matrix_pair(dir, &format!("l{l}_h{h}_vl_sv"))?;
            for m in [&r_qk, &r_vl] {
                if m.rows() != dh || m.cols() != dh {
                    return Err(Error::BadArtifact {
                        path: dir.display().to_string(),
                        reason: format!(
                            "rotation l{l} h{h} is {}x{}, expected {dh}x{dh}",
                            m.rows(),
                            m.cols()
                        ),
                    });
                }
            }
            row.push(HeadRotations {
                r_qk,
                r_vl,
                sv_qk: sv_qk.data().to_vec(),
                sv_vl: sv_vl.data().to_vec(),
            });
        }
        heads.push(row);
    }
    Ok(RotationSet { dims, heads })
}
