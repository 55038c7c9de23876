//! In-process sequence-parallel simulation. The prompt's tokens are split
//! into contiguous shards, one per worker; a first all-to-all carries every
//! shard's compressed q'/k'/v' rows to the workers owning each attention
//! head, a second all-to-all carries head-output rows back to the shard
//! owners. Workers run sequentially in a fixed order and all arithmetic
//! matches the single-process engine bit for bit; what the simulation adds
//! is byte-exact accounting of the traffic that would cross workers, with
//! rows counted at their kept widths (tight packing, zero-fill at the
//! receiver). Reported time is bytes over link bandwidth, an estimate only.

use crate::engine::{
    argmax, attention_compressed, classify_by_rank, linear_decompress, plan_widths,
    CompressedKVCache, Widths,
};
use crate::error::Error;
use crate::model::{FoldedModel, ModelDims};
use crate::plan::CompressionPlan;
use crate::tensor::{ceil_count, unmasked_counts, Matrix};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpConfig {
    pub n_workers: usize,
    /// Wire size of one tensor element. Kept elements only are counted.
    pub bytes_per_element: u64,
    /// Bytes per second, used for the reported time estimate only.
    pub link_bandwidth: f64,
}

impl Default for SpConfig {
    fn default() -> SpConfig {
        SpConfig { n_workers: 1, bytes_per_element: 8, link_bandwidth: 1e9 }
    }
}

impl SpConfig {
    pub fn with_workers(n_workers: usize) -> SpConfig {
        SpConfig { n_workers, ..SpConfig::default() }
    }
}

/// Byte counters for one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBytes {
    pub a2a1: u64,
    pub a2a2: u64,
    pub kv_gather: u64,
}

impl PhaseBytes {
    pub fn total(&self) -> u64 {
        self.a2a1 + self.a2a2 + self.kv_gather
    }
}

/// Cross-worker traffic by phase: the QKV-distributing first all-to-all,
/// the head-gathering second all-to-all, and cached KV rows pulled to head
/// owners during decode steps.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub a2a1_bytes: u64,
    pub a2a2_bytes: u64,
    pub kv_gather_bytes: u64,
    pub per_layer: Vec<PhaseBytes>,
}

impl CommLedger {
    fn new(n_layers: usize) -> CommLedger {
        CommLedger { per_layer: vec![PhaseBytes::default(); n_layers], ..CommLedger::default() }
    }

    /// Recomputes the totals from the per-layer breakdown.
    fn finalize(&mut self) {
        self.a2a1_bytes = self.per_layer.iter().map(|p| p.a2a1).sum();
        self.a2a2_bytes = self.per_layer.iter().map(|p| p.a2a2).sum();
        self.kv_gather_bytes = self.per_layer.iter().map(|p| p.kv_gather).sum();
    }

    pub fn total_bytes(&self) -> u64 {
        self.a2a1_bytes + self.a2a2_bytes + self.kv_gather_bytes
    }
}

/// Estimated transfer seconds at the configured link bandwidth.
pub fn est_seconds(ledger: &CommLedger, cfg: &SpConfig) -> f64 {
    ledger.total_bytes() as f64 / cfg.link_bandwidth
}

/// Contiguous shard ranges with sizes differing by at most one; earlier
/// workers take the remainder.
pub fn shard_ranges(seq_len: usize, n_workers: usize) -> Result<Vec<Range<usize>>> {
    if n_workers == 0 {
        return Err(Error::Invalid("worker count must be positive".into()));
    }
    if seq_len < n_workers {
        return Err(Error::TooFewTokens { seq_len, workers: n_workers });
    }
    let base = seq_len / n_workers;
    let rem = seq_len % n_workers;
    let mut out = Vec::with_capacity(n_workers);
    let mut start = 0;
    for r in 0..n_workers {
        let len = base + usize::from(r < rem);
        out.push(start..start + len);
        start += len;
    }
    Ok(out)
}

/// Splits an embedding matrix into per-worker row blocks.
pub fn partition_sequence(e: &Matrix, n_workers: usize) -> Result<Vec<Matrix>> {
    let ranges = shard_ranges(e.rows(), n_workers)?;
    Ok(ranges
        .into_iter()
        .map(|rg| Matrix::from_fn(rg.len(), e.cols(), |i, j| e.get(rg.start + i, j)))
        .collect())
}

/// Contiguous head blocks per worker; the head count must divide evenly.
pub fn head_ranges(n_heads: usize, n_workers: usize) -> Result<Vec<Range<usize>>> {
    if n_workers == 0 {
        return Err(Error::Invalid("worker count must be positive".into()));
    }
    if n_heads % n_workers != 0 {
        return Err(Error::UnevenHeads { heads: n_heads, workers: n_workers });
    }
    let span = n_heads / n_workers;
    Ok((0..n_workers).map(|r| r * span..(r + 1) * span).collect())
}

/// One worker's q'/k'/v' rows for one head, addressed by the global token
/// range they cover.
#[derive(Debug, Clone)]
pub struct QkvTile {
    pub from: usize,
    pub head: usize,
    pub rows: Range<usize>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Routes every tile to the worker owning its head and reassembles
/// per-head full-sequence q'/k'/v'. Tiles leaving their producer are
/// charged to `counter` at the per-token kept widths in `token_widths`
/// (`(qk, vl)` pairs; q and k rows share the first width).
pub fn all_to_all_first(
    tiles: Vec<QkvTile>,
    n_heads: usize,
    n_workers: usize,
    token_widths: &[(usize, usize)],
    bytes_per_element: u64,
    counter: &mut u64,
) -> Result<Vec<(Matrix, Matrix, Matrix)>> {
    if n_workers == 0 || n_heads % n_workers != 0 {
        return Err(Error::UnevenHeads { heads: n_heads, workers: n_workers });
    }
    let span = n_heads / n_workers;
    let mut slots: Vec<Vec<Option<QkvTile>>> = (0..n_heads)
        .map(|_| (0..n_workers).map(|_| None).collect())
        .collect();
    for tile in tiles {
        if tile.head >= n_heads || tile.from >= n_workers {
            return Err(Error::Invalid("tile addressed outside the worker grid".into()));
        }
        let to = tile.head / span;
        if tile.from != to {
            let mut elems = 0u64;
            for t in tile.rows.clone() {
                let (qw, vw) = token_widths[t];
                elems += (2 * qw + vw) as u64;
            }
            *counter += elems * bytes_per_element;
        }
        if slots[tile.head][tile.from].replace(tile).is_some() {
            return Err(Error::Invalid("duplicate tile for a head and shard".into()));
        }
    }
    let mut gathered = Vec::with_capacity(n_heads);
    for (h, shard_tiles) in slots.into_iter().enumerate() {
        let mut qs = Vec::with_capacity(n_workers);
        let mut ks = Vec::with_capacity(n_workers);
        let mut vs = Vec::with_capacity(n_workers);
        let mut next_row = 0;
        for (r, tile) in shard_tiles.into_iter().enumerate() {
            let tile = tile.ok_or_else(|| {
                Error::Invalid(format!("missing tile for head {h} from worker {r}"))
            })?;
            if tile.rows.start != next_row {
                return Err(Error::Invalid(format!(
                    "tiles for head {h} do not tile the sequence contiguously"
                )));
            }
            next_row = tile.rows.end;
            qs.push(tile.q);
            ks.push(tile.k);
            vs.push(tile.v);
        }
        if next_row != token_widths.len() {
            return Err(Error::Invalid(format!("tiles for head {h} do not cover the sequence")));
        }
        let q = Matrix::concat_rows(&qs.iter().collect::<Vec<_>>())?;
        let k = Matrix::concat_rows(&ks.iter().collect::<Vec<_>>())?;
        let v = Matrix::concat_rows(&vs.iter().collect::<Vec<_>>())?;
        gathered.push((q, k, v));
    }
    Ok(gathered)
}

/// Inverse layout transform: per-head full-sequence output rows are cut
/// back into shard blocks and delivered to each shard's owner. Rows
/// leaving the head owner are charged at the matrix width.
pub fn all_to_all_second(
    head_outputs: &[Matrix],
    shards: &[Range<usize>],
    bytes_per_element: u64,
    counter: &mut u64,
) -> Result<Vec<Vec<Matrix>>> {
    let n_workers = shards.len();
    let n_heads = head_outputs.len();
    if n_workers == 0 || n_heads % n_workers != 0 {
        return Err(Error::UnevenHeads { heads: n_heads, workers: n_workers });
    }
    let span = n_heads / n_workers;
    let mut out: Vec<Vec<Matrix>> = (0..n_workers).map(|_| Vec::with_capacity(n_heads)).collect();
    for (h, o) in head_outputs.iter().enumerate() {
        let owner = h / span;
        for (r, rg) in shards.iter().enumerate() {
            if o.rows() < rg.end {
                return Err(Error::ShapeMismatch {
                    expected: format!("head output rows covering token {}", rg.end - 1),
                    got: format!("{} rows", o.rows()),
                });
            }
            if r != owner {
                *counter += (rg.len() * o.cols()) as u64 * bytes_per_element;
            }
            out[r].push(Matrix::from_fn(rg.len(), o.cols(), |i, j| o.get(rg.start + i, j)));
        }
    }
    Ok(out)
}

/// Prompt-pass result: logits for every position plus the traffic ledger.
#[derive(Debug)]
pub struct SpRun {
    pub logits: Matrix,
    pub ledger: CommLedger,
    pub importance: Vec<Vec<f64>>,
    pub classes: Vec<Vec<bool>>,
}

/// Decode result: greedily generated tokens, the combined prompt and
/// decode traffic, and each token's class at KV-write time per layer
/// (the widths its cached rows travel at).
#[derive(Debug)]
pub struct SpGenerate {
    pub tokens: Vec<u32>,
    pub ledger: CommLedger,
    pub class_log: Vec<Vec<bool>>,
}

struct SpState<'a> {
    folded: &'a FoldedModel,
    dims: ModelDims,
    plan: CompressionPlan,
    cfg: SpConfig,
    normalize: bool,
    w: Widths,
    scale: f64,
    shards: Vec<Range<usize>>,
    prompt_len: usize,
    importance: Vec<Vec<f64>>,
    classes: Vec<Vec<bool>>,
    cache: CompressedKVCache,
    ledger: CommLedger,
}

impl<'a> SpState<'a> {
    fn new(
        folded: &'a FoldedModel,
        prompt_len: usize,
        plan: &CompressionPlan,
        cfg: &SpConfig,
        normalize: bool,
    ) -> Result<SpState<'a>> {
        let dims = folded.dims;
        plan.validate(dims.n_layers)?;
        let shards = shard_ranges(prompt_len, cfg.n_workers)?;
        head_ranges(dims.n_heads, cfg.n_workers)?;
        Ok(SpState {
            folded,
            dims,
            plan: plan.clone(),
            cfg: cfg.clone(),
            normalize,
            w: plan_widths(&dims, plan)?,
            scale: 1.0 / (dims.head_dim as f64).sqrt(),
            shards,
            prompt_len,
            importance: vec![Vec::new(); dims.n_layers],
            classes: vec![Vec::new(); dims.n_layers],
            cache: CompressedKVCache::new(&dims),
            ledger: CommLedger::new(dims.n_layers),
        })
    }

    fn head_owner(&self, head: usize) -> usize {
        head / (self.dims.n_heads / self.cfg.n_workers)
    }

    /// Prompt positions belong to their shard owner; decoded positions are
    /// appended to the last worker's shard.
    fn token_owner(&self, t: usize) -> usize {
        if t >= self.prompt_len {
            return self.cfg.n_workers - 1;
        }
        self.shards.iter().position(|rg| rg.contains(&t)).unwrap_or(self.cfg.n_workers - 1)
    }

    /// Wire widths (qk, vl) per token for a layer's first exchange. A
    /// representative layer classifies only after its own attention, so
    /// all of its rows travel at the live widths; member layers send
    /// unimportant rows at the unimportant-class widths.
    fn row_widths(&self, layer: usize, s: usize) -> Vec<(usize, usize)> {
        let rep = self.plan.group_map[layer];
        (0..s)
            .map(|t| {
                if rep != layer && !self.classes[rep][t] {
                    (self.w.qk_u, self.w.vl_u)
                } else {
                    (self.w.qk_live, self.w.vl_live)
                }
            })
            .collect()
    }

    fn classify(&mut self, layer: usize) {
        let rep = self.plan.group_map[layer];
        self.classes[layer] = if rep == layer {
            classify_by_rank(&self.importance[layer], self.plan.g[layer])
        } else {
            self.classes[rep].clone()
        };
    }

    fn mlp_residual(&self, e: Matrix, o_l: &Matrix, layer: usize) -> Result<Matrix> {
        let lp = &self.folded.layers[layer];
        let e = e.add(o_l)?;
        let hidden = e.matmul(&lp.mlp1)?.map(f64::tanh);
        let out = hidden.matmul(&lp.mlp2)?;
        e.add(&out)
    }

    fn write_kv(&mut self, layer: usize, head: usize, token: usize, k: &Matrix, v: &Matrix, row: usize) {
        let important = self.classes[layer][token];
        let (kw, vw) = if important { (self.w.qk_i, self.w.vl_i) } else { (self.w.qk_u, self.w.vl_u) };
        let k_slice = &k.row(row)[..kw.min(k.cols())];
        let v_slice = &v.row(row)[..vw.min(v.cols())];
        self.cache.write(layer, head, token, k_slice, v_slice, important);
    }

    fn prompt(&mut self, tokens: &[u32]) -> Result<Matrix> {
        let s = tokens.len();
        let mut e_shards = Vec::with_capacity(self.cfg.n_workers);
        for rg in &self.shards {
            e_shards.push(self.folded.embed(&tokens[rg.clone()])?);
        }
        for l in 0..self.dims.n_layers {
            let rep = self.plan.group_map[l];
            let mut tiles = Vec::with_capacity(self.cfg.n_workers * self.dims.n_heads);
            for (r, e_r) in e_shards.iter().enumerate() {
                for h in 0..self.dims.n_heads {
                    let hp = &self.folded.layers[l].heads[h];
                    let mut q = e_r.matmul(&hp.wq_r.take_cols(self.w.qk_live))?;
                    let mut k = e_r.matmul(&hp.wk_r.take_cols(self.w.qk_live))?;
                    let mut v = e_r.matmul(&hp.wv_r.take_cols(self.w.vl_live))?;
                    if rep != l {
                        for (local, t) in self.shards[r].clone().enumerate() {
                            if !self.classes[rep][t] {
                                q.zero_row_tail(local, self.w.qk_u.min(q.cols()));
                                k.zero_row_tail(local, self.w.qk_u.min(k.cols()));
                                v.zero_row_tail(local, self.w.vl_u.min(v.cols()));
                            }
                        }
                    }
                    tiles.push(QkvTile { from: r, head: h, rows: self.shards[r].clone(), q, k, v });
                }
            }
            let widths = self.row_widths(l, s);
            let per_head = all_to_all_first(
                tiles,
                self.dims.n_heads,
                self.cfg.n_workers,
                &widths,
                self.cfg.bytes_per_element,
                &mut self.ledger.per_layer[l].a2a1,
            )?;

            self.importance[l] = vec![0.0; s];
            let mut head_o = Vec::with_capacity(self.dims.n_heads);
            let mut kv_full = Vec::with_capacity(self.dims.n_heads);
            let counts = unmasked_counts(s, s, true);
            for (q, k, v) in &per_head {
                let attn = attention_compressed(q, k, v, self.scale, true)?;
                for t in 0..s {
                    let c = if self.normalize {
                        attn.denoms[t] / counts[t] as f64
                    } else {
                        attn.denoms[t]
                    };
                    self.importance[l][t] += c;
                }
                head_o.push(attn.o);
            }
            for (k_full, v_full) in per_head.into_iter().map(|(_, k, v)| (k, v)) {
                kv_full.push((k_full, v_full));
            }
            self.classify(l);
            for (h, (k, v)) in kv_full.iter().enumerate() {
                for t in 0..s {
                    self.write_kv(l, h, t, k, v, t);
                }
            }

            let shard_heads = all_to_all_second(
                &head_o,
                &self.shards,
                self.cfg.bytes_per_element,
                &mut self.ledger.per_layer[l].a2a2,
            )?;
            let mut next = Vec::with_capacity(self.cfg.n_workers);
            for (r, e_r) in e_shards.into_iter().enumerate() {
                let o_l = linear_decompress(
                    &shard_heads[r],
                    &self.folded.layers[l].wl_r,
                    self.dims.head_dim,
                    self.w.vl_live,
                )?;
                next.push(self.mlp_residual(e_r, &o_l, l)?);
            }
            e_shards = next;
        }
        let logit_shards = e_shards
            .iter()
            .map(|e| e.matmul(&self.folded.output_head))
            .collect::<Result<Vec<_>>>()?;
        Matrix::concat_rows(&logit_shards.iter().collect::<Vec<_>>())
    }

    /// One decode step for position `pos`. The fresh token lives on the
    /// last worker: its q'/k'/v' row crosses to every other head owner
    /// (first-exchange traffic), cached KV rows cross from their sequence
    /// owners to head owners (kv-gather), and output rows cross back
    /// (second-exchange traffic).
    fn step(&mut self, token: u32, pos: usize) -> Result<Matrix> {
        let owner = self.cfg.n_workers - 1;
        let mut e = self.folded.embed(&[token])?;
        for l in 0..self.dims.n_layers {
            let rep = self.plan.group_map[l];
            let narrowed = rep != l && !self.classes[rep][pos];
            let (qw, vw) = if narrowed {
                (self.w.qk_u, self.w.vl_u)
            } else {
                (self.w.qk_live, self.w.vl_live)
            };
            let mut head_rows = Vec::with_capacity(self.dims.n_heads);
            let mut fresh = Vec::with_capacity(self.dims.n_heads);
            let mut new_score = 0.0;
            let counts = unmasked_counts(1, pos + 1, true);
            for h in 0..self.dims.n_heads {
                let hp = &self.folded.layers[l].heads[h];
                let mut q = e.matmul(&hp.wq_r.take_cols(self.w.qk_live))?;
                let mut k = e.matmul(&hp.wk_r.take_cols(self.w.qk_live))?;
                let mut v = e.matmul(&hp.wv_r.take_cols(self.w.vl_live))?;
                if narrowed {
                    q.zero_row_tail(0, self.w.qk_u.min(q.cols()));
                    k.zero_row_tail(0, self.w.qk_u.min(k.cols()));
                    v.zero_row_tail(0, self.w.vl_u.min(v.cols()));
                }
                let wh = self.head_owner(h);
                if wh != owner {
                    self.ledger.per_layer[l].a2a1 +=
                        (2 * qw + vw) as u64 * self.cfg.bytes_per_element;
                    self.ledger.per_layer[l].a2a2 +=
                        self.w.vl_live as u64 * self.cfg.bytes_per_element;
                }
                for t in 0..pos {
                    if self.token_owner(t) != wh {
                        let (ckw, cvw) = if self.cache.class_at_write(l, t) {
                            (self.w.qk_i, self.w.vl_i)
                        } else {
                            (self.w.qk_u, self.w.vl_u)
                        };
                        self.ledger.per_layer[l].kv_gather +=
                            (ckw + cvw) as u64 * self.cfg.bytes_per_element;
                    }
                }
                let k_all = {
                    let cached = self.cache.read_k(l, h, self.w.qk_live);
                    Matrix::concat_rows(&[&cached, &k])?
                };
                let v_all = {
                    let cached = self.cache.read_v(l, h, self.w.vl_live);
                    Matrix::concat_rows(&[&cached, &v])?
                };
                let attn = attention_compressed(&q, &k_all, &v_all, self.scale, true)?;
                let c = if self.normalize {
                    attn.denoms[0] / counts[0] as f64
                } else {
                    attn.denoms[0]
                };
                new_score += c;
                head_rows.push(attn.o);
                fresh.push((k, v));
            }
            self.importance[l].push(new_score);
            self.classify(l);
            for (h, (k, v)) in fresh.iter().enumerate() {
                self.write_kv(l, h, pos, k, v, 0);
            }
            let o_l = linear_decompress(
                &head_rows,
                &self.folded.layers[l].wl_r,
                self.dims.head_dim,
                self.w.vl_live,
            )?;
            e = self.mlp_residual(e, &o_l, l)?;
        }
        e.matmul(&self.folded.output_head)
    }
}

/// Prompt pass through the sequence-parallel layout. Logits are bit-equal
/// to the single-process compressed forward for every worker count; the
/// ledger reports what would have crossed workers.
pub fn sp_forward(
    folded: &FoldedModel,
    tokens: &[u32],
    plan: &CompressionPlan,
    cfg: &SpConfig,
    normalize: bool,
) -> Result<SpRun> {
    let mut st = SpState::new(folded, tokens.len(), plan, cfg, normalize)?;
    let logits = st.prompt(tokens)?;
    st.ledger.finalize();
    Ok(SpRun { logits, ledger: st.ledger, importance: st.importance, classes: st.classes })
}

/// Prompt pass plus `n_new` greedy decode steps, mirroring the engine's
/// generation chain exactly while accounting decode-phase traffic.
pub fn sp_generate(
    folded: &FoldedModel,
    prompt: &[u32],
    n_new: usize,
    plan: &CompressionPlan,
    cfg: &SpConfig,
    normalize: bool,
) -> Result<SpGenerate> {
    let mut st = SpState::new(folded, prompt.len(), plan, cfg, normalize)?;
    let logits = st.prompt(prompt)?;
    let mut last_row = logits.row(logits.rows() - 1).to_vec();
    let mut out = Vec::with_capacity(n_new);
    for i in 0..n_new {
        let next = argmax(&last_row) as u32;
        out.push(next);
        let step_logits = st.step(next, prompt.len() + i)?;
        last_row = step_logits.row(0).to_vec();
    }
    st.ledger.finalize();
    let total = prompt.len() + n_new;
    let class_log = (0..st.dims.n_layers)
        .map(|l| (0..total).map(|t| st.cache.class_at_write(l, t)).collect())
        .collect();
    Ok(SpGenerate { tokens: out, ledger: st.ledger, class_log })
}

/// Closed-form prediction of the prompt-pass exchange bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedComm {
    pub a2a1: u64,
    pub a2a2: u64,
    pub per_layer: Vec<PhaseBytes>,
}

/// Mirrors the simulator's prompt accounting in integer arithmetic.
/// Summed over a worker's head block, off-worker token counts average out
/// exactly, so the prediction is `heads_per_worker * (workers - 1)` times
/// the per-head kept-element volume regardless of shard imbalance.
pub fn comm_bytes_model(
    plan: &CompressionPlan,
    dims: &ModelDims,
    s: usize,
    cfg: &SpConfig,
) -> Result<PredictedComm> {
    plan.validate(dims.n_layers)?;
    shard_ranges(s, cfg.n_workers)?;
    head_ranges(dims.n_heads, cfg.n_workers)?;
    let w = plan_widths(dims, plan)?;
    let off = (dims.n_heads / cfg.n_workers * (cfg.n_workers - 1)) as u64;
    let mut per_layer = Vec::with_capacity(dims.n_layers);
    for l in 0..dims.n_layers {
        let rep = plan.group_map[l];
        let (qk_sum, vl_sum) = if rep == l {
            ((s * w.qk_live) as u64, (s * w.vl_live) as u64)
        } else {
            let n_i = ceil_count(plan.g[rep], s);
            (
                (n_i * w.qk_live + (s - n_i) * w.qk_u) as u64,
                (n_i * w.vl_live + (s - n_i) * w.vl_u) as u64,
            )
        };
        per_layer.push(PhaseBytes {
            a2a1: off * (2 * qk_sum + vl_sum) * cfg.bytes_per_element,
            a2a2: off * (s * w.vl_live) as u64 * cfg.bytes_per_element,
            kv_gather: 0,
        });
    }
    Ok(PredictedComm {
        a2a1: per_layer.iter().map(|p| p.a2a1).sum(),
        a2a2: per_layer.iter().map(|p| p.a2a2).sum(),
        per_layer,
    })
}

/// Mirrors the simulator's decode accounting from the recorded write-time
/// classes: fresh rows cross to off-worker head owners, cached rows cross
/// from their sequence owners, output rows cross back.
pub fn decode_comm_model(
    plan: &CompressionPlan,
    dims: &ModelDims,
    class_log: &[Vec<bool>],
    prompt_len: usize,
    n_steps: usize,
    cfg: &SpConfig,
) -> Result<PhaseBytes> {
    plan.validate(dims.n_layers)?;
    let shards = shard_ranges(prompt_len, cfg.n_workers)?;
    head_ranges(dims.n_heads, cfg.n_workers)?;
    let w = plan_widths(dims, plan)?;
    let span = dims.n_heads / cfg.n_workers;
    let owner_of = |t: usize| -> usize {
        if t >= prompt_len {
            return cfg.n_workers - 1;
        }
        shards.iter().position(|rg| rg.contains(&t)).unwrap_or(cfg.n_workers - 1)
    };
    let off_heads = (dims.n_heads - span) as u64;
    let mut out = PhaseBytes::default();
    for j in 0..n_steps {
        let pos = prompt_len + j;
        for l in 0..dims.n_layers {
            let rep = plan.group_map[l];
            let narrowed = rep != l && !class_log[rep][pos];
            let (qw, vw) = if narrowed { (w.qk_u, w.vl_u) } else { (w.qk_live, w.vl_live) };
            out.a2a1 += off_heads * (2 * qw + vw) as u64 * cfg.bytes_per_element;
            out.a2a2 += off_heads * w.vl_live as u64 * cfg.bytes_per_element;
            for h in 0..dims.n_heads {
                let wh = h / span;
                for t in 0..pos {
                    if owner_of(t) != wh {
                        let (ckw, cvw) = if class_log[l][t] {
                            (w.qk_i, w.vl_i)
                        } else {
                            (w.qk_u, w.vl_u)
                        };
                        out.kv_gather += (ckw + cvw) as u64 * cfg.bytes_per_element;
                    }
                }
            }
        }
    }
    Ok(out)
}
