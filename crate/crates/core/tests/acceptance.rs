//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. `ACCEPTANCE_ONLY=3,7` restricts the run.

mod common;

use std::time::{Duration, Instant};

use common::{brute_top_k, literal_construct, model_gradcheck, rng, tiny_config, tiny_inputs, uniform_vec, z_score};
use echocast::array::Array2;
use echocast::data::{
    adf_test, generate_scenario, make_windows, prepare_dataset, Normalizer, PreparedData, ScenarioSpec, SplitRatios,
    WindowSample, WindowSpec,
};
use echocast::decomposition::decompose;
use echocast::echo::{echo_layer, echo_padding, select_top_k, EchoProjections};
use echocast::model::{checkpoint_from_bytes, checkpoint_to_bytes, Ablation, CheckpointMeta, EchoFormer, ModelConfig};
use echocast::pool::{construct_pool, sim, standardize, MetaPatternPool, PoolConfig, WaveformMatrix};
use echocast::tensor::{Graph, Linear, ParamStore, Tensor};
use echocast::training::{evaluate, pool_batch, train, TrainConfig, Trainer};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Duration);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn decomposition_identity() -> Check {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = r.random_range(2..400);
        let dims = r.random_range(1..4);
        let data = uniform_vec(&mut r, len * dims, -50.0, 50.0);
        let x = Array2::new(len, dims, data).unwrap();
        let d = decompose(&x, r.random_range(1..60)).map_err(|e| e.to_string())?;
        for i in 0..x.data().len() {
            worst = worst.max((d.trend.data()[i] + d.seasonal.data()[i] - x.data()[i]).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:.2e}"))?;
    Ok(format!("max |trend + seasonal - x| = {worst:.1e}"))
}

fn similarity_algebra() -> Check {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let s = [4usize, 8, 16][i % 3];
        let z = standardize(&uniform_vec(&mut r, s, -3.0, 3.0));
        let other = standardize(&uniform_vec(&mut r, s, -3.0, 3.0));
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        let sf = s as f64;
        let own = sim(&z, &z).unwrap();
        let anti = sim(&z, &neg).unwrap();
        let cross = sim(&z, &other).unwrap();
        worst = worst.max((own - sf).abs()).max((anti + sf).abs());
        ensure(cross.abs() <= sf + 1e-9, || format!("|Sim| = {cross} exceeds s = {s}"))?;
    }
    ensure(worst <= 1e-4, || format!("self/anti similarity off by {worst:.2e}"))?;
    Ok(format!("1000 waveforms, max error {worst:.1e}"))
}

fn construction_oracle() -> Check {
    let mut r = rng(3);
    let mut cases = 0;
    let mut worst = 0.0f64;
    while cases < 50 {
        let s = if r.random_bool(0.5) { 4 } else { 8 };
        let len = s * r.random_range(1..=32 / s);
        let batch = r.random_range(1..=8);
        if batch * len / s < 2 {
            continue;
        }
        let cfg = PoolConfig {
            alpha: r.random_range(0.1..1.0),
            period: r.random_range(2..25),
            ..PoolConfig::new(r.random_range(1..40), s)
        };
        let series: Vec<Vec<f64>> = (0..batch).map(|_| uniform_vec(&mut r, len, -5.0, 5.0)).collect();
        let pool = construct_pool(&series, cfg.clone()).map_err(|e| e.to_string())?;
        let (want, _) = literal_construct(&series, &cfg);
        ensure(pool.occupancy() == want.len(), || {
            format!("occupancy {} vs oracle {}", pool.occupancy(), want.len())
        })?;
        for (i, row) in want.iter().enumerate() {
            for (a, b) in pool.pattern(i).iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
        cases += 1;
    }
    ensure(worst <= 1e-5, || format!("row deviation {worst:.2e}"))?;
    Ok(format!("50 batches, max row deviation {worst:.1e}"))
}

fn update_invariants() -> Check {
    let mut r = rng(4);
    for case in 0..50 {
        let s = [4usize, 8][case % 2];
        let cfg = PoolConfig {
            gamma: r.random_range(0.01..1.0),
            ..PoolConfig::new(r.random_range(2..20), s)
        };
        let first: Vec<Vec<f64>> = (0..3).map(|_| uniform_vec(&mut r, 4 * s, -1.0, 1.0)).collect();
        let mut pool = construct_pool(&first, cfg.clone()).map_err(|e| e.to_string())?;
        for _ in 0..30 {
            let w = z_score(&uniform_vec(&mut r, s, -1.0, 1.0));
            let before = pool.clone();
            pool.update_from_waveforms(&WaveformMatrix(Array2::from_rows(std::slice::from_ref(&w)).unwrap()))
                .map_err(|e| e.to_string())?;
            ensure(pool.occupancy() <= cfg.capacity, || "occupancy exceeds P".into())?;
            ensure(pool.occupancy() >= before.occupancy(), || "occupancy decreased".into())?;
            for row in 0..before.occupancy() {
                for (t, &new) in w.iter().enumerate() {
                    let (old, v) = (before.pattern(row)[t], pool.pattern(row)[t]);
                    ensure(v >= old.min(new) - 1e-12 && v <= old.max(new) + 1e-12, || {
                        format!("row {row} left the interval between old row and waveform")
                    })?;
                }
            }
        }
        // A waveform identical to a stored row leaves that row as is.
        let pick = r.random_range(0..pool.occupancy());
        let same = pool.pattern(pick).to_vec();
        pool.update_from_waveforms(&WaveformMatrix(Array2::from_rows(std::slice::from_ref(&same)).unwrap()))
            .map_err(|e| e.to_string())?;
        for (a, b) in same.iter().zip(pool.pattern(pick)) {
            ensure((a - b).abs() < 1e-12, || format!("fixed point moved row {pick}"))?;
        }
    }
    Ok("50 sequences of 30 updates".into())
}

fn echo_contracts() -> Check {
    let mut r = rng(5);
    for case in 0..50 {
        let s = [4usize, 8, 16][case % 3];
        let len = s * r.random_range(1..4);
        let d_model = 2 * r.random_range(1..6);
        let batch = r.random_range(1..4);
        let cap = r.random_range(4..24);
        let series: Vec<Vec<f64>> = (0..4).map(|_| uniform_vec(&mut r, 2 * s, -1.0, 1.0)).collect();
        let pool = construct_pool(&series, PoolConfig::new(cap, s)).map_err(|e| e.to_string())?;
        let k = r.random_range(1..=pool.occupancy());

        let mut store = ParamStore::<f64>::new();
        let proj = EchoProjections::new(&mut store, "echo", d_model, k, &mut r).map_err(|e| e.to_string())?;
        let a = uniform_vec(&mut r, batch * len * d_model, -2.0, 2.0);
        let mut g = Graph::new();
        let av = g.constant(Tensor::from_f64(vec![batch, len, d_model], &a).unwrap());
        let (out, _) = echo_layer(&mut g, &store, &proj, av, &pool, k).map_err(|e| e.to_string())?;
        let got = g.value(out).data();
        ensure(g.shape(out) == [batch, len, d_model], || "echo output shape changed".into())?;
        let h = d_model / 2;
        for (i, row) in got.chunks(d_model).enumerate() {
            ensure(row[..h] == a[i * d_model..i * d_model + h], || "first half was modified".into())?;
        }
        let second = g.slice(av, 2, h, d_model).unwrap();
        let logits = proj.reduce.forward(&mut g, &store, second).unwrap();
        let weights = g.softmax(logits, 2).unwrap();
        for step in g.value(weights).data().chunks(k) {
            let total: f64 = step.iter().sum();
            ensure((total - 1.0).abs() <= 1e-6, || format!("echo weights sum to {total}"))?;
        }

        let queries: Vec<Vec<f64>> = (0..batch).map(|_| uniform_vec(&mut r, s, -1.0, 1.0)).collect();
        let sel = select_top_k(&queries, &pool, k).map_err(|e| e.to_string())?;
        for (b, q) in queries.iter().enumerate() {
            ensure(sel.row(b) == brute_top_k(q, &pool, k).as_slice(), || {
                format!("Top-K {:?} differs from the full sort", sel.row(b))
            })?;
        }

        if len >= s {
            let d = r.random_range(1..3);
            let pad = Linear::new(&mut store, "pad", d, k, true, &mut r).unwrap();
            let x = Tensor::from_f64(vec![batch, len, d], &uniform_vec(&mut r, batch * len * d, -1.0, 1.0)).unwrap();
            let horizon = r.random_range(1..=len - len % s).min(len);
            let out = echo_padding(&mut g, &store, &pad, &x, &pool, k, horizon, 24).map_err(|e| e.to_string())?;
            for step in g.value(out.weights).data().chunks(k) {
                let total: f64 = step.iter().sum();
                ensure((total - 1.0).abs() <= 1e-6, || format!("padding weights sum to {total}"))?;
            }
        }
    }
    Ok("50 configurations".into())
}

fn gradient_check() -> Check {
    let cfg = tiny_config();
    let (batch, pool) = tiny_inputs(&cfg, 2, 8, 6);
    let mut model = EchoFormer::<f64>::new(cfg, 6).map_err(|e| e.to_string())?;
    let reports = model_gradcheck(&mut model, &batch, &pool);
    let worst = reports.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).unwrap();
    ensure(worst.rel_error <= 1e-3, || format!("{}: relative error {:.2e}", worst.name, worst.rel_error))?;
    for part in [
        "enc_embed.token",
        "static_proj",
        "time_weight",
        "attn",
        "echo.reduce",
        "echo.expand",
        "pad_reduce",
        "decoder",
        "head",
    ] {
        let live = reports.iter().any(|r| r.name.contains(part) && r.analytic_norm > 0.0);
        ensure(live, || format!("no gradient reaches {part}"))?;
    }
    Ok(format!("{} tensors, worst relative error {:.1e} ({})", reports.len(), worst.rel_error, worst.name))
}

fn overfit() -> Check {
    let spec = WindowSpec {
        lookback: 48,
        horizon: 24,
        start_token: 12,
        stride: 1,
    };
    let n = spec.lookback + spec.horizon + 199;
    let raw = common::sine_trend_series("overfit", n, 0.01);
    let series = Normalizer::fit(&raw.values).apply_series(&raw);
    let windows = make_windows(&series, spec).map_err(|e| e.to_string())?;
    ensure(windows.len() == 200, || format!("{} windows", windows.len()))?;
    let model_cfg = ModelConfig {
        d_model: 32,
        dropout: 0.0,
        top_k: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 200,
        patience: 200,
        seed: 7,
        ..TrainConfig::default()
    };
    let pool_cfg = PoolConfig::new(64, model_cfg.slice_len);
    let model = EchoFormer::new(model_cfg, 7).map_err(|e| e.to_string())?;
    let out = train(model, pool_cfg, &windows, &[], &cfg).map_err(|e| e.to_string())?;
    let first = out.history[0].train_loss;
    let last = out.history.last().unwrap().train_loss;
    let m = evaluate(&out.model, &out.pool, &windows, 64, None).map_err(|e| e.to_string())?;
    ensure(last <= 0.05 * first, || format!("loss {first:.4} -> {last:.4}"))?;
    ensure(m.mae <= 0.05, || format!("training MAE {:.4}", m.mae))?;
    Ok(format!("loss {first:.4} -> {last:.5} ({:.2}%), training MAE {:.4}", 100.0 * last / first, m.mae))
}

fn switch_data(seed: u64, spec: WindowSpec) -> Result<PreparedData, String> {
    let scenario = ScenarioSpec::preset("switch").map_err(|e| e.to_string())?;
    let series = generate_scenario(&scenario, seed).map_err(|e| e.to_string())?;
    prepare_dataset(&series, spec, SplitRatios::default()).map_err(|e| e.to_string())
}

fn desk_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        static_dim: 1,
        top_k: 16,
        ..ModelConfig::default()
    }
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 6,
        patience: 3,
        seed,
        ..TrainConfig::default()
    }
}

fn fit_and_test(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &PreparedData,
    capacity: usize,
) -> Result<(f64, f64), String> {
    let pool_cfg = PoolConfig {
        update_interval: train_cfg.update_interval.unwrap_or(usize::MAX),
        period: model_cfg.period,
        ..PoolConfig::new(capacity, model_cfg.slice_len)
    };
    let model = EchoFormer::new(model_cfg.clone(), train_cfg.seed).map_err(|e| e.to_string())?;
    let out = train(model, pool_cfg, &data.train, &data.val, train_cfg).map_err(|e| e.to_string())?;
    let test = evaluate(&out.model, &out.pool, &data.test, 64, None).map_err(|e| e.to_string())?;
    let val = evaluate(&out.model, &out.pool, &data.val, 64, None).map_err(|e| e.to_string())?;
    Ok((test.mse, val.mae))
}

fn spec_of(m: &ModelConfig, stride: usize) -> WindowSpec {
    WindowSpec {
        lookback: m.lookback,
        horizon: m.horizon,
        start_token: m.start_token,
        stride,
    }
}

fn ablation_direction() -> Check {
    let base = desk_model();
    let mut mse = [vec![], vec![], vec![]];
    for seed in 0..5u64 {
        let data = switch_data(seed, spec_of(&base, 2))?;
        for (slot, ablation) in [Ablation::None, Ablation::DeMpp, Ablation::DeEl].into_iter().enumerate() {
            let cfg = ModelConfig { ablation, ..base.clone() };
            mse[slot].push(fit_and_test(&cfg, &desk_train(seed), &data, 128)?.0);
        }
    }
    let [full, de_mpp, de_el] = mse.map(median);
    let line = format!("median test MSE full {full:.4}, de_mpp {de_mpp:.4}, de_el {de_el:.4}");
    ensure(de_mpp >= full && de_el >= full, || line.clone())?;
    Ok(line)
}

fn overhead() -> Check {
    let model_cfg = ModelConfig {
        d_model: 64,
        top_k: 16,
        static_dim: 1,
        ..ModelConfig::default()
    };
    let data = switch_data(0, spec_of(&model_cfg, 1))?;
    let train_cfg = TrainConfig {
        update_interval: Some(1),
        ..TrainConfig::default()
    };
    let pool_cfg = PoolConfig {
        update_interval: 1,
        ..PoolConfig::new(128, model_cfg.slice_len)
    };
    let model = EchoFormer::new(model_cfg.clone(), 0).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(model, pool_cfg, train_cfg).map_err(|e| e.to_string())?;
    let batches: Vec<Vec<&WindowSample>> = data.train.chunks(32).filter(|c| c.len() == 32).map(|c| c.iter().collect()).collect();

    let steps = 200;
    let mut step_time = Duration::ZERO;
    let mut extra = Duration::ZERO;
    let s = model_cfg.slice_len;
    let blocks = model_cfg.encoder_layers * model_cfg.lookback / s + model_cfg.horizon.div_ceil(s);
    let mut r = rng(9);
    for i in 0..steps {
        let batch = &batches[i % batches.len()];
        let t = Instant::now();
        trainer.step(batch).map_err(|e| e.to_string())?;
        step_time += t.elapsed();

        // The same pool work in isolation: one update and every selection a
        // forward pass performs.
        let mut pool: MetaPatternPool = trainer.pool.clone().expect("pool constructed");
        let series = pool_batch(batch);
        let queries: Vec<Vec<Vec<f64>>> =
            (0..blocks).map(|_| (0..32).map(|_| uniform_vec(&mut r, s, -1.0, 1.0)).collect()).collect();
        let t = Instant::now();
        pool.update(&series).map_err(|e| e.to_string())?;
        for q in &queries {
            std::hint::black_box(select_top_k(q, &pool, model_cfg.top_k).map_err(|e| e.to_string())?);
        }
        extra += t.elapsed();
    }
    let ratio = extra.as_secs_f64() / step_time.as_secs_f64();
    let line = format!(
        "pool update + selection {:.2} ms vs step {:.1} ms ({:.1}%)",
        1e3 * extra.as_secs_f64() / steps as f64,
        1e3 * step_time.as_secs_f64() / steps as f64,
        100.0 * ratio
    );
    ensure(ratio <= 0.15, || line.clone())?;
    Ok(line)
}

fn adf_sanity() -> Check {
    let mut r = rng(10);
    let (mut stationary, mut unit_root) = (0, 0);
    for _ in 0..20 {
        let noise: Vec<f64> = (0..1000).map(|_| StandardNormal.sample(&mut r)).collect();
        if adf_test(&noise).map_err(|e| e.to_string())?.is_stationary {
            stationary += 1;
        }
        let mut level = 0.0;
        let walk: Vec<f64> = (0..1000)
            .map(|_| {
                let step: f64 = StandardNormal.sample(&mut r);
                level += step;
                level
            })
            .collect::<Vec<f64>>();
        if !adf_test(&walk).map_err(|e| e.to_string())?.is_stationary {
            unit_root += 1;
        }
    }
    let line = format!("white noise {stationary}/20 stationary, random walks {unit_root}/20 non-stationary");
    ensure(stationary >= 19 && unit_root >= 19, || line.clone())?;
    Ok(line)
}

fn persistence() -> Check {
    let model_cfg = ModelConfig {
        d_model: 16,
        heads: 2,
        top_k: 4,
        slice_len: 8,
        static_dim: 1,
        ..ModelConfig::default()
    };
    let data = switch_data(3, spec_of(&model_cfg, 8))?;
    let train_cfg = TrainConfig {
        epochs: 1,
        update_interval: Some(3),
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let pool_cfg = PoolConfig {
        update_interval: 3,
        ..PoolConfig::new(32, 8)
    };
    let model = EchoFormer::new(model_cfg, 3).map_err(|e| e.to_string())?;
    let out = train(model, pool_cfg, &data.train, &data.val, &train_cfg).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pool_path = dir.path().join("pool.mpp");
    out.pool.save(&pool_path).map_err(|e| e.to_string())?;
    let pool = MetaPatternPool::load(&pool_path).map_err(|e| e.to_string())?;
    ensure(pool.to_bytes() == out.pool.to_bytes(), || "pool bytes differ after reload".into())?;

    let meta = CheckpointMeta {
        pool_path: Some("pool.mpp".into()),
        normalizers: data.normalizers.clone(),
    };
    let bytes = checkpoint_to_bytes(&out.model, &meta).map_err(|e| e.to_string())?;
    let ckpt = checkpoint_from_bytes(&bytes).map_err(|e| e.to_string())?;
    ensure(checkpoint_to_bytes(&ckpt.model, &ckpt.meta).map_err(|e| e.to_string())? == bytes, || {
        "checkpoint bytes differ after reload".into()
    })?;
    let before = evaluate(&out.model, &out.pool, &data.test, 32, None).map_err(|e| e.to_string())?;
    let after = evaluate(&ckpt.model, &pool, &data.test, 32, None).map_err(|e| e.to_string())?;
    ensure(before == after, || format!("metrics {before:?} vs {after:?}"))?;
    Ok(format!("{} checkpoint bytes, test mse {:.4} reproduced", bytes.len(), after.mse))
}

fn robustness() -> Check {
    let base = desk_model();
    let data16 = switch_data(0, spec_of(&base, 2))?;
    let mut results = Vec::new();
    for (k, s) in [(4, 16), (16, 16), (64, 16), (16, 8), (16, 24)] {
        let cfg = ModelConfig {
            top_k: k,
            slice_len: s,
            ..base.clone()
        };
        let (_, mae) = fit_and_test(&cfg, &desk_train(0), &data16, 128)?;
        results.push(((k, s), mae));
    }
    let lo = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let spread = hi / lo - 1.0;
    let detail: Vec<String> = results.iter().map(|((k, s), m)| format!("K{k}/s{s} {m:.4}")).collect();
    let line = format!("validation MAE {}; spread {:.1}%", detail.join(", "), 100.0 * spread);
    ensure(spread <= 0.5, || line.clone())?;
    Ok(line)
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("decomposition identity", decomposition_identity, Duration::from_secs(1)),
        ("similarity algebra", similarity_algebra, Duration::from_secs(1)),
        ("construction oracle", construction_oracle, Duration::from_secs(10)),
        ("update invariants", update_invariants, Duration::from_secs(10)),
        ("echo contracts", echo_contracts, Duration::from_secs(10)),
        ("gradient check", gradient_check, Duration::from_secs(120)),
        ("overfit", overfit, Duration::from_secs(300)),
        ("ablation direction", ablation_direction, Duration::from_secs(1800)),
        ("overhead benchmark", overhead, Duration::from_secs(120)),
        ("ADF sanity", adf_sanity, Duration::from_secs(30)),
        ("persistence", persistence, Duration::from_secs(30)),
        ("robustness", robustness, Duration::from_secs(1800)),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|n| n.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; took {took:.1?}, budget {budget:?}")),
            Err(e) => (false, e),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {id:>2} {name}: {detail} [{:.1?}]",
            if ok { "PASS" } else { "FAIL" },
            took
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
