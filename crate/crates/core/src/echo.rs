//! Echo: deconstruct features into waveforms, retrieve their Top-K most
//! similar meta-patterns from the pool, and reconstruct them as features
//! (echo layer) or as decoder input filler (echo padding).
//!
//! Selection is a discrete lookup; the pool itself is not learnable and
//! receives no gradient. Softmax mixing weights over the selected patterns and
//! the projections around them are differentiable.

use std::io::Write;

use rand::Rng;

use crate::array::Array2;
use crate::decomposition::decompose;
use crate::error::{Error, Result};
use crate::pool::{dot, standardize, MetaPatternPool};
use crate::tensor::{Graph, Linear, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EchoConfig {
    pub top_k: usize,
    pub slice_len: usize,
    pub d_model: usize,
}

impl EchoConfig {
    pub fn validate(&self, seq_len: usize, pool: Option<&MetaPatternPool>) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("Top-K must be at least 1"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!("d_model = {} must be even", self.d_model)));
        }
        if self.slice_len == 0 || !seq_len.is_multiple_of(self.slice_len) {
            return Err(Error::config(format!(
                "L = {seq_len} is not a multiple of s = {} (L mod s != 0)",
                self.slice_len
            )));
        }
        if let Some(pool) = pool {
            if self.top_k > pool.capacity() {
                return Err(Error::config(format!(
                    "Top-K = {} exceeds pool capacity P = {}",
                    self.top_k,
                    pool.capacity()
                )));
            }
            if pool.slice_len() != self.slice_len {
                return Err(Error::config("pool slice length differs from echo slice length"));
            }
        }
        Ok(())
    }
}

/// Top-K pool rows chosen for each batch element of one block.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoSelection {
    pub batch: usize,
    pub top_k: usize,
    /// `batch × top_k` pool row indices, best first.
    pub indices: Vec<usize>,
    /// Similarity scores matching `indices`.
    pub scores: Vec<f64>,
    /// True when the pool held fewer than `top_k` rows and the best row was
    /// repeated to fill the selection.
    pub padded: bool,
}

impl EchoSelection {
    pub fn row(&self, b: usize) -> &[usize] {
        &self.indices[b * self.top_k..(b + 1) * self.top_k]
    }

    pub fn row_scores(&self, b: usize) -> &[f64] {
        &self.scores[b * self.top_k..(b + 1) * self.top_k]
    }

    /// Selected patterns as a `batch × top_k × s` array.
    pub fn selected(&self, pool: &MetaPatternPool) -> Vec<f64> {
        self.indices
            .iter()
            .flat_map(|&r| pool.pattern(r).iter().copied())
            .collect()
    }
}

/// Picks, for every query waveform, the `k` filled pool rows with the highest
/// similarity to the standardized query. Ties go to the lower row index.
pub fn select_top_k(queries: &[Vec<f64>], pool: &MetaPatternPool, k: usize) -> Result<EchoSelection> {
    let filled = pool.occupancy();
    if filled == 0 {
        return Err(Error::state("echo selection needs a non-empty pattern pool"));
    }
    if k == 0 {
        return Err(Error::config("Top-K must be at least 1"));
    }
    let mut indices = Vec::with_capacity(queries.len() * k);
    let mut scores = Vec::with_capacity(queries.len() * k);
    let mut order: Vec<(usize, f64)> = Vec::with_capacity(filled);
    for q in queries {
        if q.len() != pool.slice_len() {
            return Err(Error::input(format!(
                "query length {} differs from pool slice length {}",
                q.len(),
                pool.slice_len()
            )));
        }
        let z = standardize(q);
        order.clear();
        order.extend((0..filled).map(|r| (r, dot(&z, pool.pattern(r)))));
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for j in 0..k {
            let (r, v) = if j < filled { order[j] } else { order[0] };
            indices.push(r);
            scores.push(v);
        }
    }
    Ok(EchoSelection {
        batch: queries.len(),
        top_k: k,
        indices,
        scores,
        padded: k > filled,
    })
}

/// Learnable projections of one echo layer.
#[derive(Clone, Debug)]
pub struct EchoProjections {
    /// Collapses the feature axis of a block to a single query channel.
    pub query_reduce: Linear,
    /// Features to per-pattern mixing logits.
    pub reduce: Linear,
    /// Mixed pattern channels back to half the model width.
    pub expand: Linear,
}

impl EchoProjections {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        top_k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let half = d_model / 2;
        Ok(EchoProjections {
            query_reduce: Linear::new(store, &format!("{name}.query_reduce"), half, 1, true, rng)?,
            reduce: Linear::new(store, &format!("{name}.reduce"), half, top_k, true, rng)?,
            expand: Linear::new(store, &format!("{name}.expand"), top_k, half, true, rng)?,
        })
    }
}

/// Splits `a_en` into its untouched first feature half and `L / s` time
/// blocks of the second half, each `B × s × d_model/2`.
pub fn deconstruct<T: Scalar>(g: &mut Graph<T>, a_en: Var, s: usize) -> Result<(Var, Vec<Var>)> {
    let shape = g.shape(a_en).to_vec();
    if shape.len() != 3 {
        return Err(Error::config(format!("echo input must be B x L x d_model, got {shape:?}")));
    }
    let (len, d) = (shape[1], shape[2]);
    if d % 2 != 0 || s == 0 || len % s != 0 {
        return Err(Error::config(format!(
            "echo needs even d_model and L mod s == 0 (L = {len}, s = {s}, d_model = {d})"
        )));
    }
    let first = g.slice(a_en, 2, 0, d / 2)?;
    let second = g.slice(a_en, 2, d / 2, d)?;
    let blocks = (0..len / s)
        .map(|i| g.slice(second, 1, i * s, (i + 1) * s))
        .collect::<Result<Vec<_>>>()?;
    Ok((first, blocks))
}

/// `B × len × k` constant holding, at step `i*s + t`, the `t`-th value of each
/// pattern selected for block `i`.
fn pattern_tensor<T: Scalar>(
    selections: &[EchoSelection],
    pool: &MetaPatternPool,
    batch: usize,
    k: usize,
) -> Result<Tensor<T>> {
    let s = pool.slice_len();
    let len = selections.len() * s;
    let mut data = vec![T::zero(); batch * len * k];
    for (i, sel) in selections.iter().enumerate() {
        for b in 0..batch {
            for (j, &r) in sel.row(b).iter().enumerate() {
                for (t, &v) in pool.pattern(r).iter().enumerate() {
                    data[(b * len + i * s + t) * k + j] = T::of(v);
                }
            }
        }
    }
    Tensor::new(vec![batch, len, k], data)
}

/// Echo layer over encoder features `a_en: B × L × d_model`. Returns the
/// output (same shape) and the per-block selections.
pub fn echo_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    proj: &EchoProjections,
    a_en: Var,
    pool: &MetaPatternPool,
    k: usize,
) -> Result<(Var, Vec<EchoSelection>)> {
    let s = pool.slice_len();
    let (first, blocks) = deconstruct(g, a_en, s)?;
    let shape = g.shape(a_en).to_vec();
    let batch = shape[0];
    let second = g.concat(&blocks, 1)?;

    let query = proj.query_reduce.forward(g, store, second)?;
    let qv = g.value(query).to_f64();
    let len = shape[1];
    let selections = (0..blocks.len())
        .map(|i| {
            let queries: Vec<Vec<f64>> = (0..batch)
                .map(|b| qv[b * len + i * s..b * len + (i + 1) * s].to_vec())
                .collect();
            select_top_k(&queries, pool, k)
        })
        .collect::<Result<Vec<_>>>()?;

    let patterns = g.constant(pattern_tensor(&selections, pool, batch, k)?);
    let logits = proj.reduce.forward(g, store, second)?;
    let weights = g.softmax(logits, 2)?;
    let mixed = g.mul(weights, patterns)?;
    let expanded = proj.expand.forward(g, store, mixed)?;
    let out = g.concat(&[first, expanded], 2)?;
    Ok((out, selections))
}

/// Output of [`echo_padding`].
#[derive(Debug)]
pub struct PaddingOutput {
    /// `B × L_y × d` filler.
    pub values: Var,
    /// `B × (n·s) × k` softmax mixing weights before truncation.
    pub weights: Var,
    pub selections: Vec<EchoSelection>,
}

/// Fills the decoder horizon from meta-patterns. The last `ceil(L_y / s)`
/// slices of the lookback's seasonal part select Top-K patterns; each step is
/// the softmax(`pad_reduce`)-weighted sum of the selected patterns, truncated
/// to `L_y` and replicated across all `d` features.
#[allow(clippy::too_many_arguments)]
pub fn echo_padding<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pad_reduce: &Linear,
    x: &Tensor<T>,
    pool: &MetaPatternPool,
    k: usize,
    horizon: usize,
    period: usize,
) -> Result<PaddingOutput> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::config(format!("padding input must be B x L x d, got {shape:?}")));
    }
    let (batch, len, d) = (shape[0], shape[1], shape[2]);
    let s = pool.slice_len();
    let n = horizon.div_ceil(s);
    if n * s > len {
        return Err(Error::config(format!(
            "echo padding needs {n} slices of length {s} but the lookback has only {len} steps"
        )));
    }
    let span = n * s;
    let xs = x.to_f64();
    let mut seasonal = Vec::with_capacity(batch * span * d);
    let mut queries: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(batch); n];
    for b in 0..batch {
        let series = Array2::new(len, d, xs[b * len * d..(b + 1) * len * d].to_vec())?;
        let part = decompose(&series, period)?.seasonal;
        let tail = part.slice_rows(len - span, len);
        seasonal.extend_from_slice(tail.data());
        let lead = tail.col(0);
        for (j, q) in queries.iter_mut().enumerate() {
            q.push(lead[j * s..(j + 1) * s].to_vec());
        }
    }
    let selections = queries
        .iter()
        .map(|q| select_top_k(q, pool, k))
        .collect::<Result<Vec<_>>>()?;

    let input = g.constant(Tensor::from_f64(vec![batch, span, d], &seasonal)?);
    let logits = pad_reduce.forward(g, store, input)?;
    let weights = g.softmax(logits, 2)?;
    let patterns = g.constant(pattern_tensor(&selections, pool, batch, k)?);
    let mixed = g.mul(weights, patterns)?;
    let ones = g.constant(Tensor::ones(vec![k, 1]));
    let summed = g.matmul(mixed, ones)?;
    let trimmed = g.slice(summed, 1, 0, horizon)?;
    let spread = g.constant(Tensor::ones(vec![d]));
    let values = g.mul(trimmed, spread)?;
    Ok(PaddingOutput {
        values,
        weights,
        selections,
    })
}

/// One row of the echo inspection export.
#[derive(Clone, Debug, PartialEq)]
pub struct EchoRecord {
    pub batch_index: usize,
    pub block_index: usize,
    pub rank: usize,
    pub pool_row: usize,
    pub similarity: f64,
}

/// Flattens per-block selections into inspection records.
pub fn inspection_records(selections: &[EchoSelection]) -> Vec<EchoRecord> {
    let mut out = Vec::new();
    for (block, sel) in selections.iter().enumerate() {
        for b in 0..sel.batch {
            for (rank, (&row, &score)) in sel.row(b).iter().zip(sel.row_scores(b)).enumerate() {
                out.push(EchoRecord {
                    batch_index: b,
                    block_index: block,
                    rank,
                    pool_row: row,
                    similarity: score,
                });
            }
        }
    }
    out
}

/// Writes records as CSV with a header row.
pub fn write_inspection_csv(records: &[EchoRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["batch_index", "block_index", "rank", "pool_row", "similarity"])?;
    for r in records {
        w.write_record([
            r.batch_index.to_string(),
            r.block_index.to_string(),
            r.rank.to_string(),
            r.pool_row.to_string(),
            r.similarity.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
