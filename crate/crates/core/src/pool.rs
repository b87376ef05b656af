//! Meta-pattern pool: purification of standardized seasonal waveforms into a
//! bounded table of representative patterns, and its online maintenance.
//!
//! Construction runs once, on the first training batch. Each waveform is
//! either fused with every waveform it resembles beyond the purification
//! threshold (weighted by similarity) or kept as is, and the result is
//! appended to the pool. Later batches update the pool: resembling waveforms
//! pull their best-matching pattern toward them by the update rate, novel ones
//! occupy free rows until the pool is full.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::decomposition::decompose;
use crate::error::{Error, Result};

/// Population standard deviation below which a slice counts as constant.
pub const FLAT_STD: f64 = 1e-8;

const MAGIC: &[u8; 4] = b"MPP1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    /// Pool capacity `P`.
    pub capacity: usize,
    /// Waveform (slice) length `s`.
    pub slice_len: usize,
    /// Scale of the deviation term in the purification threshold.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Convex update rate.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Training batches between pool updates.
    #[serde(default = "default_interval")]
    pub update_interval: usize,
    /// Decomposition period used to extract the seasonal part.
    #[serde(default = "default_period")]
    pub period: usize,
}

fn default_alpha() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.1
}
fn default_interval() -> usize {
    50
}
fn default_period() -> usize {
    24
}

impl PoolConfig {
    pub fn new(capacity: usize, slice_len: usize) -> Self {
        PoolConfig {
            capacity,
            slice_len,
            alpha: default_alpha(),
            gamma: default_gamma(),
            update_interval: default_interval(),
            period: default_period(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity < 1 {
            return Err(Error::config("pool capacity P must be at least 1"));
        }
        if self.slice_len < 2 {
            return Err(Error::config("slice length s must be at least 2"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(format!(
                "update rate gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("alpha must be finite"));
        }
        if self.update_interval < 1 {
            return Err(Error::config("update interval must be at least 1"));
        }
        if self.period < 1 {
            return Err(Error::config("decomposition period must be positive"));
        }
        Ok(())
    }
}

/// Z-normalizes a waveform with the population standard deviation. Constant
/// waveforms map to all zeros.
pub fn standardize(w: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < FLAT_STD {
        return vec![0.0; w.len()];
    }
    w.iter().map(|v| (v - mean) / std).collect()
}

/// Alignment similarity: the plain dot product of two waveforms.
pub fn sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "waveform lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot(a, b))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standardized waveforms, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveformMatrix(pub Array2);

impl WaveformMatrix {
    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Cuts every series into contiguous length-`s` slices in time order and
/// standardizes each slice.
pub fn slice(seasonal: &[Vec<f64>], s: usize) -> Result<WaveformMatrix> {
    if s < 2 {
        return Err(Error::config(format!("slice length must be at least 2, got {s}")));
    }
    let mut rows = Vec::new();
    for series in seasonal {
        let len = series.len();
        if len == 0 || len % s != 0 {
            return Err(Error::config(format!(
                "series length L = {len} is not a multiple of slice length s = {s} (L mod s != 0)"
            )));
        }
        rows.extend(series.chunks(s).map(standardize));
    }
    if rows.is_empty() {
        return Err(Error::input("no series to slice"));
    }
    Ok(WaveformMatrix(Array2::from_rows(&rows)?))
}

/// Seasonal part of each series followed by [`slice`].
pub fn extract_waveforms(batch: &[Vec<f64>], period: usize, s: usize) -> Result<WaveformMatrix> {
    let seasonal = batch
        .iter()
        .map(|series| Ok(decompose(&Array2::column(series), period)?.seasonal.into_data()))
        .collect::<Result<Vec<_>>>()?;
    slice(&seasonal, s)
}

/// Pairwise similarities; entries on and below the diagonal are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix(pub Array2);

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Strictly upper-triangular entries in row order.
    pub fn upper(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.len();
        (0..n).flat_map(move |i| (i + 1..n).map(move |j| self.0.get(i, j)))
    }
}

pub fn similarity_matrix(w: &WaveformMatrix) -> Result<SimilarityMatrix> {
    let n = w.rows();
    if n < 2 {
        return Err(Error::input(format!(
            "similarity matrix needs at least 2 waveforms, got {n}"
        )));
    }
    let mut sm = Array2::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            sm.set(i, j, dot(w.row(i), w.row(j)));
        }
    }
    Ok(SimilarityMatrix(sm))
}

/// `mu + (alpha * P / n) * sigma` over the strictly-upper entries, with `n`
/// the number of rows and `sigma` the population standard deviation.
pub fn purification_threshold(sm: &SimilarityMatrix, capacity: usize, alpha: f64) -> Result<f64> {
    let n = sm.len();
    let count = n * n.saturating_sub(1) / 2;
    if count == 0 {
        return Err(Error::input("similarity matrix has no off-diagonal entries"));
    }
    let mean = sm.upper().sum::<f64>() / count as f64;
    let var = sm.upper().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    Ok(mean + alpha * capacity as f64 / n as f64 * var.sqrt())
}

/// Changes made by one pool update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateReport {
    /// Waveforms merged into an existing pattern.
    pub merged: usize,
    /// Waveforms written into a free row.
    pub appended: usize,
    /// Euclidean norm of each row's change, one entry per pool row.
    pub row_deltas: Vec<f64>,
}

/// Bounded table of purified patterns with occupancy tracking.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaPatternPool {
    config: PoolConfig,
    patterns: Array2,
    occupancy: usize,
    threshold: Option<f64>,
    update_count: u64,
}

impl MetaPatternPool {
    /// Unconstructed pool with every row masked to zero.
    pub fn new(config: PoolConfig) -> Result<Self> {
        config.validate()?;
        Ok(MetaPatternPool {
            patterns: Array2::zeros(config.capacity, config.slice_len),
            config,
            occupancy: 0,
            threshold: None,
            update_count: 0,
        })
    }

    /// Full pool of random standardized waveforms. It is marked constructed
    /// with an infinite threshold.
    pub fn random(config: PoolConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut pool = Self::new(config)?;
        let s = pool.config.slice_len;
        for r in 0..pool.config.capacity {
            let raw: Vec<f64> = (0..s).map(|_| rng.random_range(-1.0..1.0)).collect();
            pool.patterns.row_mut(r).copy_from_slice(&standardize(&raw));
        }
        pool.occupancy = pool.config.capacity;
        pool.threshold = Some(f64::INFINITY);
        Ok(pool)
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn patterns(&self) -> &Array2 {
        &self.patterns
    }

    pub fn pattern(&self, r: usize) -> &[f64] {
        self.patterns.row(r)
    }

    pub fn occupancy(&self) -> usize {
        self.occupancy
    }

    pub fn capacity(&self) -> usize {
        self.config.capacity
    }

    pub fn slice_len(&self) -> usize {
        self.config.slice_len
    }

    pub fn is_full(&self) -> bool {
        self.occupancy == self.config.capacity
    }

    pub fn is_constructed(&self) -> bool {
        self.threshold.is_some()
    }

    /// Purification threshold fixed at construction.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    /// Mean of the filled rows; zeros for an empty pool.
    pub fn mean_pattern(&self) -> Vec<f64> {
        let s = self.config.slice_len;
        let mut mean = vec![0.0; s];
        if self.occupancy == 0 {
            return mean;
        }
        for r in 0..self.occupancy {
            for (m, v) in mean.iter_mut().zip(self.patterns.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.occupancy as f64);
        mean
    }

    /// Most similar filled row; ties go to the lower index.
    pub fn best_match(&self, w: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in 0..self.occupancy {
            let v = dot(self.patterns.row(r), w);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((r, v));
            }
        }
        best
    }

    fn merge(&mut self, row: usize, w: &[f64]) -> f64 {
        let gamma = self.config.gamma;
        let mut delta = 0.0;
        for (p, &x) in self.patterns.row_mut(row).iter_mut().zip(w) {
            let next = (1.0 - gamma) * *p + gamma * x;
            delta += (next - *p).powi(2);
            *p = next;
        }
        delta.sqrt()
    }

    fn append(&mut self, w: &[f64]) {
        let r = self.occupancy;
        self.patterns.row_mut(r).copy_from_slice(w);
        self.occupancy += 1;
    }

    /// Adds a pattern, merging it into its best match once the pool is full.
    fn admit(&mut self, candidate: &[f64]) {
        if self.is_full() {
            let (best, _) = self.best_match(candidate).expect("full pool has rows");
            self.merge(best, candidate);
        } else {
            self.append(candidate);
        }
    }

    /// Builds the pool from the first batch of univariate series.
    pub fn construct(&mut self, batch: &[Vec<f64>]) -> Result<()> {
        if self.is_constructed() {
            return Err(Error::state("meta-pattern pool is already constructed"));
        }
        let w = extract_waveforms(batch, self.config.period, self.config.slice_len)?;
        self.construct_from_waveforms(&w)
    }

    /// Construction over already standardized waveforms.
    pub fn construct_from_waveforms(&mut self, w: &WaveformMatrix) -> Result<()> {
        if self.is_constructed() {
            return Err(Error::state("meta-pattern pool is already constructed"));
        }
        if w.0.cols() != self.config.slice_len {
            return Err(Error::input("waveform length differs from the pool slice length"));
        }
        let sm = similarity_matrix(w)?;
        let tau = purification_threshold(&sm, self.config.capacity, self.config.alpha)?;
        let s = self.config.slice_len;
        for i in 0..sm.len() {
            let row = sm.row(i);
            let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut candidate = w.row(i).to_vec();
            if peak > tau {
                let mut fused = vec![0.0; s];
                let mut total = 0.0;
                for (k, &weight) in row.iter().enumerate() {
                    if weight > tau {
                        total += weight;
                        for (f, v) in fused.iter_mut().zip(w.row(k)) {
                            *f += weight * v;
                        }
                    }
                }
                if total > 0.0 {
                    fused.iter_mut().for_each(|f| *f /= total);
                    candidate = fused;
                }
            }
            self.admit(&candidate);
        }
        self.threshold = Some(tau);
        Ok(())
    }

    /// Folds a new batch into the pool using the threshold fixed at
    /// construction. Best matches are computed against the pool as it was
    /// before this batch.
    pub fn update(&mut self, batch: &[Vec<f64>]) -> Result<UpdateReport> {
        if !self.is_constructed() {
            return Err(Error::state("meta-pattern pool has not been constructed"));
        }
        let w = extract_waveforms(batch, self.config.period, self.config.slice_len)?;
        self.update_from_waveforms(&w)
    }

    /// Update over already standardized waveforms.
    pub fn update_from_waveforms(&mut self, w: &WaveformMatrix) -> Result<UpdateReport> {
        let Some(tau) = self.threshold else {
            return Err(Error::state("meta-pattern pool has not been constructed"));
        };
        if w.0.cols() != self.config.slice_len {
            return Err(Error::input("waveform length differs from the pool slice length"));
        }
        let matches: Vec<(usize, f64)> = (0..w.rows())
            .map(|i| self.best_match(w.row(i)).expect("constructed pool has rows"))
            .collect();
        let before = self.patterns.clone();
        let mut report = UpdateReport::default();
        for (i, &(best, score)) in matches.iter().enumerate() {
            if score > tau {
                self.merge(best, w.row(i));
                report.merged += 1;
            }
        }
        for (i, &(best, score)) in matches.iter().enumerate() {
            if score > tau {
                continue;
            }
            if self.is_full() {
                self.merge(best, w.row(i));
                report.merged += 1;
            } else {
                self.append(w.row(i));
                report.appended += 1;
            }
        }
        report.row_deltas = (0..self.config.capacity)
            .map(|r| {
                before
                    .row(r)
                    .iter()
                    .zip(self.patterns.row(r))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        self.update_count += 1;
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&self.to_bytes())?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut b = Vec::with_capacity(96 + self.patterns.data().len() * 8);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        for v in [c.capacity, c.slice_len, c.update_interval, c.period, self.occupancy] {
            b.extend_from_slice(&(v as u64).to_le_bytes());
        }
        b.extend_from_slice(&c.alpha.to_le_bytes());
        b.extend_from_slice(&c.gamma.to_le_bytes());
        b.push(u8::from(self.threshold.is_some()));
        b.extend_from_slice(&self.threshold.unwrap_or(0.0).to_le_bytes());
        b.extend_from_slice(&self.update_count.to_le_bytes());
        for v in self.patterns.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a pattern pool file (bad magic)"));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::format(format!("unsupported pool file version {version}")));
        }
        let capacity = r.u64()? as usize;
        let slice_len = r.u64()? as usize;
        let update_interval = r.u64()? as usize;
        let period = r.u64()? as usize;
        let occupancy = r.u64()? as usize;
        let alpha = r.f64()?;
        let gamma = r.f64()?;
        let constructed = r.take(1)?[0];
        let tau = r.f64()?;
        let update_count = r.u64()?;
        let config = PoolConfig {
            capacity,
            slice_len,
            alpha,
            gamma,
            update_interval,
            period,
        };
        config
            .validate()
            .map_err(|e| Error::format(format!("invalid pool header: {e}")))?;
        if occupancy > capacity || constructed > 1 {
            return Err(Error::format("invalid pool header: occupancy exceeds capacity"));
        }
        let n = capacity
            .checked_mul(slice_len)
            .ok_or_else(|| Error::format("pool shape overflows"))?;
        if r.remaining() != n * 8 {
            return Err(Error::format(format!(
                "pool body holds {} bytes, expected {} for {capacity}x{slice_len}",
                r.remaining(),
                n * 8
            )));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(MetaPatternPool {
            config,
            patterns: Array2::new(capacity, slice_len, data)?,
            occupancy,
            threshold: (constructed == 1).then_some(tau),
            update_count,
        })
    }
}

/// Builds a pool from the first training batch.
pub fn construct_pool(first_batch: &[Vec<f64>], config: PoolConfig) -> Result<MetaPatternPool> {
    let mut pool = MetaPatternPool::new(config)?;
    pool.construct(first_batch)?;
    Ok(pool)
}

pub fn update_pool(pool: &mut MetaPatternPool, batch: &[Vec<f64>]) -> Result<UpdateReport> {
    pool.update(batch)
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
