//! Reference implementations written independently of the library, used as
//! oracles by the integration and acceptance tests.

#![allow(dead_code, clippy::needless_range_loop)]

use echocast::data::{LoadSeries, WindowSample};
use echocast::model::{Batch, EchoFormer, ModelConfig};
use echocast::pool::{MetaPatternPool, PoolConfig};
use echocast::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Mean and population standard deviation, plain two-pass.
pub fn z_score(w: &[f64]) -> Vec<f64> {
    let n = w.len() as f64;
    let mut mean = 0.0;
    for v in w {
        mean += v;
    }
    mean /= n;
    let mut ss = 0.0;
    for v in w {
        ss += (v - mean) * (v - mean);
    }
    let sd = (ss / n).sqrt();
    if sd < 1e-8 {
        return vec![0.0; w.len()];
    }
    w.iter().map(|v| (v - mean) / sd).collect()
}

/// Seasonal part via an explicit windowed average with clamped indices.
pub fn naive_seasonal(x: &[f64], period: usize) -> Vec<f64> {
    let n = x.len();
    let mut window = if period.is_multiple_of(2) { period + 1 } else { period };
    if window > 2 * n - 1 {
        window = 2 * n - 1;
    }
    let half = (window / 2) as isize;
    (0..n)
        .map(|t| {
            let mut acc = 0.0;
            for o in -half..=half {
                let idx = (t as isize + o).clamp(0, n as isize - 1) as usize;
                acc += x[idx];
            }
            x[t] - acc / window as f64
        })
        .collect()
}

/// Line-by-line construction: similarity matrix, threshold, then for each
/// row either the similarity-weighted fusion of its above-threshold partners
/// or the waveform itself; overflow merges into the best row.
pub fn literal_construct(batch: &[Vec<f64>], cfg: &PoolConfig) -> (Vec<Vec<f64>>, f64) {
    let s = cfg.slice_len;
    let mut w: Vec<Vec<f64>> = Vec::new();
    for series in batch {
        let seasonal = naive_seasonal(series, cfg.period);
        let mut start = 0;
        while start < seasonal.len() {
            w.push(z_score(&seasonal[start..start + s]));
            start += s;
        }
    }
    let r = w.len();
    let mut sm = vec![vec![0.0; r]; r];
    for i in 0..r {
        for j in 0..r {
            if i < j {
                sm[i][j] = (0..s).map(|t| w[i][t] * w[j][t]).sum();
            }
        }
    }
    let mut upper = Vec::new();
    for i in 0..r {
        for j in (i + 1)..r {
            upper.push(sm[i][j]);
        }
    }
    let mu = upper.iter().sum::<f64>() / upper.len() as f64;
    let sigma = (upper.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / upper.len() as f64).sqrt();
    let tau = mu + cfg.alpha * cfg.capacity as f64 / r as f64 * sigma;

    let mut pool: Vec<Vec<f64>> = Vec::new();
    for i in 0..r {
        let nu = sm[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut m = w[i].clone();
        if nu > tau {
            let mut num = vec![0.0; s];
            let mut den = 0.0;
            for k in 0..r {
                if sm[i][k] > tau {
                    den += sm[i][k];
                    for t in 0..s {
                        num[t] += sm[i][k] * w[k][t];
                    }
                }
            }
            if den > 0.0 {
                m = num.iter().map(|v| v / den).collect();
            }
        }
        if pool.len() < cfg.capacity {
            pool.push(m);
        } else {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (idx, row) in pool.iter().enumerate() {
                let score: f64 = (0..s).map(|t| row[t] * m[t]).sum();
                if score > best_score {
                    best = idx;
                    best_score = score;
                }
            }
            for t in 0..s {
                pool[best][t] = (1.0 - cfg.gamma) * pool[best][t] + cfg.gamma * m[t];
            }
        }
    }
    (pool, tau)
}

/// Indices of the `k` best filled rows by a full sort of all scores,
/// descending, lower index first on ties.
pub fn brute_top_k(query: &[f64], pool: &MetaPatternPool, k: usize) -> Vec<usize> {
    let z = z_score(query);
    let mut all: Vec<(f64, usize)> = (0..pool.occupancy())
        .map(|r| (z.iter().zip(pool.pattern(r)).map(|(a, b)| a * b).sum(), r))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, r)| r).collect()
}

/// Weights of a dense layer as plain row-major `fan_in × fan_out` plus bias.
pub struct Dense {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.fan_out)
            .map(|o| self.b[o] + (0..self.fan_in).map(|i| x[i] * self.w[i * self.fan_out + o]).sum::<f64>())
            .collect()
    }
}

/// Echo layer written step by step: for every batch element and block,
/// query from the collapsed second-half features, full-sort Top-K, softmax
/// mixing, pointwise product with the selected patterns, expansion, then
/// concatenation after the untouched first half.
#[allow(clippy::too_many_arguments)]
pub fn reference_echo(
    a: &[f64],
    batch: usize,
    len: usize,
    d_model: usize,
    pool: &MetaPatternPool,
    k: usize,
    query: &Dense,
    reduce: &Dense,
    expand: &Dense,
) -> (Vec<f64>, Vec<Vec<Vec<usize>>>) {
    let s = pool.slice_len();
    let h = d_model / 2;
    let mut out = vec![0.0; batch * len * d_model];
    let mut picked = vec![Vec::new(); len / s];
    for b in 0..batch {
        for blk in 0..len / s {
            let rows: Vec<Vec<f64>> = (0..s)
                .map(|t| {
                    let base = (b * len + blk * s + t) * d_model;
                    a[base + h..base + d_model].to_vec()
                })
                .collect();
            let q: Vec<f64> = rows.iter().map(|r| query.apply(r)[0]).collect();
            let sel = brute_top_k(&q, pool, k);
            for (t, row) in rows.iter().enumerate() {
                let logits = reduce.apply(row);
                let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                let mixed: Vec<f64> = (0..k).map(|j| e[j] / z * pool.pattern(sel[j])[t]).collect();
                let feat = expand.apply(&mixed);
                let base = (b * len + blk * s + t) * d_model;
                out[base..base + h].copy_from_slice(&a[base..base + h]);
                out[base + h..base + d_model].copy_from_slice(&feat);
            }
            picked[blk].push(sel);
        }
    }
    (out, picked)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        lookback: 8,
        horizon: 4,
        start_token: 2,
        features: 1,
        d_model: 8,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        top_k: 2,
        slice_len: 4,
        static_dim: 2,
        period: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Random batch and a constructed pool matching `cfg`.
pub fn tiny_inputs(cfg: &ModelConfig, batch: usize, capacity: usize, seed: u64) -> (Batch<f64>, MetaPatternPool) {
    let mut r = rng(seed);
    let dec = cfg.start_token + cfg.horizon;
    let shape = |a: usize, b: usize| vec![batch, a, b];
    let t = |r: &mut ChaCha8Rng, sh: Vec<usize>| {
        let n = sh.iter().product();
        Tensor::<f64>::from_f64(sh, &uniform_vec(r, n, -1.0, 1.0)).unwrap()
    };
    let batch_t = Batch {
        x: t(&mut r, shape(cfg.lookback, cfg.features)),
        marks_x: t(&mut r, shape(cfg.lookback, cfg.mark_dim)),
        marks_y: t(&mut r, shape(dec, cfg.mark_dim)),
        statics: (cfg.static_dim > 0).then(|| t(&mut r, vec![batch, cfg.static_dim])),
        y: Some(t(&mut r, shape(cfg.horizon, cfg.features))),
    };
    let pcfg = PoolConfig {
        period: cfg.period,
        ..PoolConfig::new(capacity, cfg.slice_len)
    };
    let mut pool = MetaPatternPool::new(pcfg).unwrap();
    let series: Vec<Vec<f64>> = (0..6).map(|_| uniform_vec(&mut r, cfg.lookback, -1.0, 1.0)).collect();
    pool.construct(&series).unwrap();
    (batch_t, pool)
}

/// Per-tensor gradient comparison against central differences.
pub struct GradReport {
    pub name: String,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

fn loss_of(model: &EchoFormer<f64>, batch: &Batch<f64>, pool: &MetaPatternPool) -> f64 {
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, batch, Some(pool)).unwrap();
    g.value(loss).data()[0]
}

/// Relative error `|a - n| / max(|a| + |n|, floor)` in the L2 sense per
/// parameter tensor.
pub fn model_gradcheck(model: &mut EchoFormer<f64>, batch: &Batch<f64>, pool: &MetaPatternPool) -> Vec<GradReport> {
    let mut g = Graph::new();
    let (loss, _) = model.loss(&mut g, batch, Some(pool)).unwrap();
    let grads = g.backward(loss).unwrap();
    model.params_mut().zero_grad();
    model.params_mut().accumulate(&grads);
    let analytic: Vec<(String, Vec<f64>)> =
        model.params().iter().map(|(_, p)| (p.name.clone(), p.grad.data().to_vec())).collect();
    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    let eps = 1e-5;
    let mut reports = Vec::new();
    for (id, (name, an)) in ids.into_iter().zip(analytic) {
        let mut numeric = vec![0.0; an.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.params().get(id).value.data()[i];
            model.params_mut().get_mut(id).value.data_mut()[i] = orig + eps;
            let up = loss_of(model, batch, pool);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig - eps;
            let down = loss_of(model, batch, pool);
            model.params_mut().get_mut(id).value.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let diff = an.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = an.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        reports.push(GradReport {
            name,
            analytic_norm: na,
            rel_error: diff / (na + nn).max(1e-7),
        });
    }
    reports
}

/// Sine with a linear trend, `n` hourly points.
pub fn sine_trend_series(id: &str, n: usize, slope: f64) -> LoadSeries {
    let values: Vec<f64> = (0..n)
        .map(|t| (2.0 * std::f64::consts::PI * t as f64 / 24.0).sin() + slope * t as f64)
        .collect();
    LoadSeries::new(id, 1_704_067_200, 3600, echocast::array::Array2::column(&values), vec![]).unwrap()
}

pub fn refs(samples: &[WindowSample]) -> Vec<&WindowSample> {
    samples.iter().collect()
}
