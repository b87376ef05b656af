//! Optimisation loop with scheduled pool maintenance, evaluation metrics and
//! the ablation driver.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::Array2;
use crate::data::{to_batch, Normalizer, WindowSample};
use crate::error::{Error, Result};
use crate::model::{Ablation, EchoFormer, ModelConfig};
use crate::pool::{MetaPatternPool, PoolConfig, UpdateReport};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, lr, eps) = (T::one(), self.lr, self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = m.f64() / c1;
                let v_hat = v.f64() / c2;
                *x -= T::of(lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
    }
}

fn d_lr() -> f64 {
    1e-4
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    10
}
fn d_interval() -> Option<usize> {
    Some(50)
}
fn d_patience() -> usize {
    10
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Batches between pool updates; `None` never updates.
    #[serde(default = "d_interval")]
    pub update_interval: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_true")]
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 || self.learning_rate.is_infinite() {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, epochs and patience must be positive"));
        }
        if self.update_interval == Some(0) {
            return Err(Error::config("update_interval must be at least 1"));
        }
        Ok(())
    }
}

/// Error metrics over a set of windows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

impl Metrics {
    pub fn of(pred: &[f64], target: &[f64]) -> Result<Metrics> {
        if pred.len() != target.len() || pred.is_empty() {
            return Err(Error::input("metrics need equally sized, non-empty inputs"));
        }
        let n = pred.len() as f64;
        let (se, ae) = pred.iter().zip(target).fold((0.0, 0.0), |(se, ae), (p, t)| {
            let e = p - t;
            (se + e * e, ae + e.abs())
        });
        Ok(Metrics {
            mse: se / n,
            mae: ae / n,
            count: pred.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub pool_occupancy: usize,
    pub pool_update_count: u64,
}

/// Row-delta norms of one pool update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateRecord {
    pub step: u64,
    pub report: UpdateReport,
}

/// What happened to the pool during a step.
#[derive(Clone, Debug, PartialEq)]
pub enum PoolEvent {
    None,
    Constructed,
    Updated(UpdateReport),
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: f64,
    pub pool: PoolEvent,
}

/// Leading-feature lookbacks of the samples, the pool's input format.
pub fn pool_batch(samples: &[&WindowSample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.x.col(0)).collect()
}

/// Owns a model, its pool and optimizer state across steps.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: EchoFormer<f32>,
    pub pool: Option<MetaPatternPool>,
    pool_config: PoolConfig,
    config: TrainConfig,
    adam: Adam<f32>,
    step: u64,
    /// `(series_id, first target time)` of every window the pool has seen.
    provenance: BTreeSet<(String, i64)>,
    updates: Vec<UpdateRecord>,
}

impl Trainer {
    pub fn new(model: EchoFormer<f32>, pool_config: PoolConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        pool_config.validate()?;
        let mc = model.config();
        if pool_config.slice_len != mc.slice_len {
            return Err(Error::config(format!(
                "pool slice length {} differs from model slice length {}",
                pool_config.slice_len, mc.slice_len
            )));
        }
        mc.echo_config().validate(mc.lookback, None)?;
        if mc.top_k > pool_config.capacity {
            return Err(Error::config(format!(
                "Top-K = {} exceeds pool capacity P = {}",
                mc.top_k, pool_config.capacity
            )));
        }
        let pool = if mc.ablation == Ablation::DeMpp {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
            Some(MetaPatternPool::random(pool_config.clone(), &mut rng)?)
        } else {
            None
        };
        Ok(Trainer {
            adam: Adam::new(config.learning_rate),
            model,
            pool,
            pool_config,
            config,
            step: 0,
            provenance: BTreeSet::new(),
            updates: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn provenance(&self) -> &BTreeSet<(String, i64)> {
        &self.provenance
    }

    pub fn updates(&self) -> &[UpdateRecord] {
        &self.updates
    }

    fn frozen_pool(&self) -> bool {
        self.model.config().ablation == Ablation::DeMpp
    }

    fn maintain_pool(&mut self, samples: &[&WindowSample]) -> Result<PoolEvent> {
        if self.frozen_pool() {
            return Ok(PoolEvent::None);
        }
        let event = match (&mut self.pool, self.config.update_interval) {
            (None, _) => {
                let mut pool = MetaPatternPool::new(self.pool_config.clone())?;
                pool.construct(&pool_batch(samples))?;
                self.pool = Some(pool);
                PoolEvent::Constructed
            }
            (Some(pool), Some(m)) if self.step.is_multiple_of(m as u64) => {
                let report = pool.update(&pool_batch(samples))?;
                self.updates.push(UpdateRecord {
                    step: self.step,
                    report: report.clone(),
                });
                PoolEvent::Updated(report)
            }
            _ => return Ok(PoolEvent::None),
        };
        for s in samples {
            self.provenance.insert((s.series_id.clone(), s.y_start));
        }
        Ok(event)
    }

    /// One optimisation step: pool maintenance, forward, MSE, backward, Adam.
    pub fn step(&mut self, samples: &[&WindowSample]) -> Result<StepReport> {
        let pool_event = self.maintain_pool(samples)?;
        let batch = to_batch::<f32>(samples)?;
        let seed = self.config.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ self.step;
        let mut g = Graph::training(seed);
        let (loss, _) = self.model.loss(&mut g, &batch, self.pool.as_ref())?;
        let loss_value = g.value(loss).data()[0].f64();
        if !loss_value.is_finite() {
            return Err(Error::state(format!("training loss diverged at step {}", self.step)));
        }
        let grads = g.backward(loss)?;
        let store = self.model.params_mut();
        store.zero_grad();
        store.accumulate(&grads);
        self.adam.step(store);
        self.step += 1;
        Ok(StepReport {
            loss: loss_value,
            pool: pool_event,
        })
    }

    /// Mean training loss over one pass of `samples` in `order`.
    pub fn epoch(&mut self, samples: &[WindowSample], order: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let refs: Vec<&WindowSample> = chunk.iter().map(|&i| &samples[i]).collect();
            total += self.step(&refs)?.loss * refs.len() as f64;
        }
        Ok(total / order.len() as f64)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EchoFormer<f32>,
    pub pool: MetaPatternPool,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Option<f64>,
    pub updates: Vec<UpdateRecord>,
    pub provenance: BTreeSet<(String, i64)>,
}

/// Trains for up to `config.epochs`, stopping early when validation loss
/// has not improved for `patience` epochs, and returns the best-validation
/// parameters and pool.
pub fn train(
    model: EchoFormer<f32>,
    pool_config: PoolConfig,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let mut trainer = Trainer::new(model, pool_config, config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>, MetaPatternPool)> = None;
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let train_loss = trainer.epoch(train_set, &order)?;
        let pool = trainer.pool.as_ref().expect("constructed on the first step");
        let val_loss = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, pool, val_set, config.batch_size, None)?.mse)
        };
        match val_loss {
            Some(v) => log::info!("epoch {epoch}: train {train_loss:.6} val {v:.6}"),
            None => log::info!("epoch {epoch}: train {train_loss:.6}"),
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            pool_occupancy: pool.occupancy(),
            pool_update_count: pool.update_count(),
        });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, trainer.model.params().snapshot(), pool.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    let (score, best_epoch, params, pool) = best.expect("at least one epoch ran");
    let mut model = trainer.model;
    model.params_mut().restore(&params);
    Ok(TrainOutcome {
        model,
        pool,
        best_epoch,
        best_val: (!val_set.is_empty()).then_some(score),
        history,
        updates: trainer.updates,
        provenance: trainer.provenance,
    })
}

/// Maps a series id to the statistics that undo its normalization.
pub type NormalizerLookup<'a> = &'a dyn Fn(&str) -> Option<Normalizer>;

/// Predictions for `samples`, one `L_y × d` array each. When normalizers
/// are given, predictions are mapped back to each series' original scale.
pub fn predict_windows<T: Scalar>(
    model: &EchoFormer<T>,
    pool: &MetaPatternPool,
    samples: &[WindowSample],
    batch_size: usize,
    normalizers: Option<NormalizerLookup<'_>>,
) -> Result<Vec<Array2>> {
    let cfg = model.config();
    let (ly, d) = (cfg.horizon, cfg.features);
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (pred, _) = model.predict(&to_batch::<T>(&refs)?, Some(pool))?;
        let values = pred.to_f64();
        for (i, s) in chunk.iter().enumerate() {
            let a = Array2::new(ly, d, values[i * ly * d..(i + 1) * ly * d].to_vec())?;
            let a = match normalizers.and_then(|f| f(&s.series_id)) {
                Some(n) => n.invert(&a),
                None => a,
            };
            out.push(a);
        }
    }
    Ok(out)
}

/// MSE and MAE over every horizon value of `samples`, on the scale the
/// samples are stored in, or on the original scale when `normalizers` maps
/// series ids to their statistics.
pub fn evaluate<T: Scalar>(
    model: &EchoFormer<T>,
    pool: &MetaPatternPool,
    samples: &[WindowSample],
    batch_size: usize,
    normalizers: Option<NormalizerLookup<'_>>,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::input("evaluation set is empty"));
    }
    let preds = predict_windows(model, pool, samples, batch_size, normalizers)?;
    let mut p = Vec::new();
    let mut t = Vec::new();
    for (pred, s) in preds.iter().zip(samples) {
        p.extend_from_slice(pred.data());
        let y = match normalizers.and_then(|f| f(&s.series_id)) {
            Some(n) => n.invert(&s.y),
            None => s.y.clone(),
        };
        t.extend_from_slice(y.data());
    }
    Metrics::of(&p, &t)
}

pub fn write_history_csv(history: &[EpochRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_loss", "val_loss", "pool_occupancy", "pool_update_count"])?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_loss.map_or_else(String::new, |v| v.to_string()),
            h.pool_occupancy.to_string(),
            h.pool_update_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One CSV row per (update, pool row) with the row's change norm.
pub fn write_updates_csv(updates: &[UpdateRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["update", "step", "row", "delta_norm"])?;
    for (i, u) in updates.iter().enumerate() {
        for (row, delta) in u.report.row_deltas.iter().enumerate() {
            w.write_record([i.to_string(), u.step.to_string(), row.to_string(), delta.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Ablation,
    pub metrics: Metrics,
}

/// Trains each variant with identical seed and data order and reports test
/// metrics on the normalized scale.
pub fn run_ablation(
    base: &ModelConfig,
    pool_config: &PoolConfig,
    config: &TrainConfig,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    test_set: &[WindowSample],
    variants: &[Ablation],
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = ModelConfig {
                ablation: variant,
                ..base.clone()
            };
            let model = EchoFormer::new(cfg, config.seed)?;
            let out = train(model, pool_config.clone(), train_set, val_set, config)?;
            let metrics = evaluate(&out.model, &out.pool, test_set, config.batch_size, None)?;
            Ok(AblationRow { variant, metrics })
        })
        .collect()
}

pub fn write_ablation_csv(rows: &[AblationRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "mse", "mae"])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.metrics.mse.to_string(),
            r.metrics.mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenario, prepare_dataset, ScenarioSpec, SplitRatios, WindowSpec};

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut store = ParamStore::<f64>::new();
        store.register("p", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        assert_eq!(store.snapshot()[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("p", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap()).unwrap();
        store.get_mut(id).grad = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(0.01);
        adam.step(&mut store);
        let v = store.snapshot()[0].data().to_vec();
        assert!((v[0] - 0.99).abs() < 1e-8);
        assert!((v[1] - 1.01).abs() < 1e-8);
    }

    #[test]
    fn adam_minimizes_square() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("p", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let p = store.get(id).value.data()[0];
            store.get_mut(id).grad = Tensor::new(vec![1], vec![2.0 * p]).unwrap();
            adam.step(&mut store);
        }
        assert!(store.get(id).value.data()[0].abs() < 0.1);
    }

    #[test]
    fn metric_arithmetic() {
        let m = Metrics::of(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((m.mse, m.mae), (1.0, 1.0));
        let m = Metrics::of(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert_eq!((m.mse, m.mae), (0.0, 0.0));
        assert!(Metrics::of(&[], &[]).is_err());
    }

    #[test]
    fn invalid_train_config_rejected() {
        let c = TrainConfig {
            update_interval: Some(0),
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c: TrainConfig = serde_json::from_str(r#"{"update_interval": null}"#).unwrap();
        assert_eq!(c.update_interval, None);
    }

    fn tiny_setup() -> (ModelConfig, PoolConfig, Vec<WindowSample>, Vec<WindowSample>) {
        let spec = ScenarioSpec::preset("switch").unwrap();
        let series = generate_scenario(&spec, 1).unwrap();
        let w = WindowSpec {
            lookback: 16,
            horizon: 8,
            start_token: 4,
            stride: 8,
        };
        let data = prepare_dataset(&series[..1], w, SplitRatios::default()).unwrap();
        let cfg = ModelConfig {
            lookback: 16,
            horizon: 8,
            start_token: 4,
            d_model: 8,
            heads: 2,
            slice_len: 8,
            top_k: 2,
            static_dim: 1,
            period: 12,
            ..ModelConfig::default()
        };
        let pool = PoolConfig {
            period: 12,
            ..PoolConfig::new(8, 8)
        };
        (cfg, pool, data.train, data.val)
    }

    #[test]
    fn pool_built_on_first_step_and_frozen_without_updates() {
        let (cfg, pc, train_set, _) = tiny_setup();
        let model = EchoFormer::new(cfg, 0).unwrap();
        let config = TrainConfig {
            update_interval: None,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, pc, config).unwrap();
        let refs: Vec<&WindowSample> = train_set.iter().take(16).collect();
        let r = t.step(&refs).unwrap();
        assert_eq!(r.pool, PoolEvent::Constructed);
        let before = t.pool.clone().unwrap();
        assert!(before.occupancy() >= 1);
        let order: Vec<usize> = (0..train_set.len()).collect();
        t.epoch(&train_set, &order).unwrap();
        t.epoch(&train_set, &order).unwrap();
        assert_eq!(t.pool.as_ref().unwrap().to_bytes(), before.to_bytes());
        assert_eq!(t.provenance().len(), 16);
    }

    #[test]
    fn training_is_reproducible() {
        let (cfg, pc, train_set, val_set) = tiny_setup();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            update_interval: Some(2),
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let run = || {
            let model = EchoFormer::new(cfg.clone(), 4).unwrap();
            train(model, pc.clone(), &train_set, &val_set, &config).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        assert!(a.pool.update_count() > 0);
        assert!(!a.updates.is_empty());
        let mut buf = Vec::new();
        write_history_csv(&a.history, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,pool_occupancy,pool_update_count\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn empty_sets_rejected() {
        let (cfg, pc, _, val_set) = tiny_setup();
        let model = EchoFormer::new(cfg, 0).unwrap();
        assert!(matches!(
            train(model, pc, &[], &val_set, &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn de_mpp_pool_never_changes() {
        let (cfg, pc, train_set, _) = tiny_setup();
        let cfg = ModelConfig {
            ablation: Ablation::DeMpp,
            ..cfg
        };
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            update_interval: Some(1),
            ..TrainConfig::default()
        };
        let model = EchoFormer::new(cfg, 0).unwrap();
        let t = Trainer::new(model.clone(), pc.clone(), config.clone()).unwrap();
        let initial = t.pool.clone().unwrap();
        let out = train(model, pc, &train_set, &[], &config).unwrap();
        assert_eq!(out.pool.to_bytes(), initial.to_bytes());
        assert!(out.provenance.is_empty());
    }
}
