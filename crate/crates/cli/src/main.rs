mod config;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use echocast::data::{
    adf_test, forecast_input, format_timestamp, generate_scenario, load_csv, to_batch, write_csv, CsvSchema,
    Normalizer, ScenarioSpec,
};
use echocast::echo::{inspection_records, write_inspection_csv};
use echocast::model::{load_checkpoint, save_checkpoint, Ablation, CheckpointMeta, EchoFormer};
use echocast::pool::MetaPatternPool;
use echocast::training::{
    evaluate, run_ablation, train, write_ablation_csv, write_history_csv, write_updates_csv, Metrics,
};
use echocast::Error;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "echocast", version, about = "Pattern-pool transformer load forecasting")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, pool and history.
    Train,
    /// Forecast the horizon following each series of a CSV.
    Forecast(ForecastArgs),
    /// Evaluate a checkpoint on the configured data's validation and test splits.
    Evaluate(CheckpointArg),
    /// Train every ablation variant and tabulate test metrics.
    Ablate(AblateArgs),
    /// Generate a synthetic scenario CSV.
    Gen(GenArgs),
    /// Augmented Dickey-Fuller test per series and feature.
    Adf(InputArg),
    /// Export pool rows, update deltas and optional echo selections.
    InspectPool(InspectArgs),
}

#[derive(Args, Debug)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pool file; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pool: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ForecastArgs {
    #[command(flatten)]
    model: CheckpointArg,
    #[arg(long)]
    input: PathBuf,
    /// Output CSV (default: <out>/forecast.csv).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Comma-separated subset of none,de_mpp,de_el,de_ep,de_si.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Built-in scenario: switch or new_app.
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Scenario JSON document.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output CSV (default: <out>/scenario.csv).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InputArg {
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    pool: PathBuf,
    /// Update log written by `train` (pool_updates.csv).
    #[arg(long)]
    updates: Option<PathBuf>,
    /// With --input, also export the echo selections of a forward pass.
    #[arg(long, requires = "input")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
}

type CmdResult = echocast::Result<()>;

/// 1 for problems with the request, 2 for unreadable or malformed files.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Format(_) | Error::Csv(_) | Error::Json(_) => 2,
        _ => 1,
    }
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn run_config(&self) -> echocast::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => return Err(Error::Config("--config is required for this command".into())),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&RunConfig>) -> echocast::Result<PathBuf> {
        let dir = self
            .out
            .clone()
            .or_else(|| cfg.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }
}

fn create(path: &Path) -> echocast::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_train(ctx: &Ctx) -> CmdResult {
    let mut cfg = ctx.run_config()?;
    let data = cfg.dataset()?;
    cfg.validate()?;
    let out = ctx.out_dir(Some(&cfg))?;
    let model = EchoFormer::new(cfg.model.clone(), cfg.train.seed)?;
    let result = train(model, cfg.pool_config(), &data.train, &data.val, &cfg.train)?;

    let pool_path = out.join("pool.mpp");
    result.pool.save(&pool_path)?;
    let meta = CheckpointMeta {
        pool_path: Some(PathBuf::from("pool.mpp")),
        normalizers: data.normalizers.clone(),
    };
    save_checkpoint(&result.model, &meta, out.join("model.ckpt"))?;
    write_history_csv(&result.history, create(&out.join("history.csv"))?)?;
    write_updates_csv(&result.updates, create(&out.join("pool_updates.csv"))?)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let val = if data.val.is_empty() {
        None
    } else {
        Some(evaluate(&result.model, &result.pool, &data.val, cfg.train.batch_size, None)?)
    };
    let summary = serde_json::json!({
        "best_epoch": result.best_epoch,
        "epochs_run": result.history.len(),
        "pool_occupancy": result.pool.occupancy(),
        "validation": val,
    });
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    match val {
        Some(m) => ctx.say(format!("validation mse={:.6} mae={:.6}", m.mse, m.mae)),
        None => ctx.say("no validation windows"),
    }
    Ok(())
}

fn load_model(arg: &CheckpointArg) -> echocast::Result<(EchoFormer<f32>, MetaPatternPool, CheckpointMeta)> {
    let ckpt = load_checkpoint(&arg.checkpoint)?;
    let pool_path = match (&arg.pool, &ckpt.meta.pool_path) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) if p.is_relative() => arg.checkpoint.parent().unwrap_or(Path::new(".")).join(p),
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(Error::Config("checkpoint names no pool file; pass --pool".into())),
    };
    let pool = MetaPatternPool::load(pool_path)?;
    let cfg = ckpt.model.config();
    cfg.echo_config().validate(cfg.lookback, Some(&pool))?;
    Ok((ckpt.model, pool, ckpt.meta))
}

fn cmd_forecast(ctx: &Ctx, args: &ForecastArgs) -> CmdResult {
    let (model, pool, meta) = load_model(&args.model)?;
    let cfg = model.config().clone();
    let series = load_csv(&args.input, &CsvSchema::default())?;
    let spec = echocast::data::WindowSpec {
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        start_token: cfg.start_token,
        stride: 1,
    };
    let output = match &args.output {
        Some(p) => p.clone(),
        None => ctx.out_dir(None)?.join("forecast.csv"),
    };
    let mut w = csv::Writer::from_writer(create(&output)?);
    let mut header = vec!["series_id".to_string(), "timestamp".to_string()];
    header.extend((0..cfg.features).map(|j| format!("value_{j}")));
    w.write_record(&header)?;
    for s in &series {
        if s.features() != cfg.features || s.static_context.len() != cfg.static_dim {
            return Err(Error::Input(format!(
                "series {:?} has {} values and {} static columns, the model expects {} and {}",
                s.series_id,
                s.features(),
                s.static_context.len(),
                cfg.features,
                cfg.static_dim
            )));
        }
        // Unknown series are scaled by their own statistics.
        let norm = meta
            .normalizers
            .get(&s.series_id)
            .cloned()
            .unwrap_or_else(|| Normalizer::fit(&s.values));
        let sample = forecast_input(&norm.apply_series(s), spec)?;
        let (pred, _) = model.predict(&to_batch::<f32>(&[&sample])?, Some(&pool))?;
        let pred = echocast::array::Array2::new(cfg.horizon, cfg.features, pred.to_f64())?;
        let pred = norm.invert(&pred);
        for r in 0..cfg.horizon {
            let t = sample.y_start + r as i64 * s.interval;
            let mut row = vec![s.series_id.clone(), format_timestamp(t)];
            row.extend(pred.row(r).iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    ctx.say(format!("wrote {} forecast rows to {}", series.len() * cfg.horizon, output.display()));
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, args: &CheckpointArg) -> CmdResult {
    let mut cfg = ctx.run_config()?;
    let (model, pool, _) = load_model(args)?;
    cfg.model = model.config().clone();
    let data = cfg.dataset()?;
    let out = ctx.out_dir(Some(&cfg))?;
    let norms = data.normalizers.clone();
    let lookup = move |id: &str| norms.get(id).cloned();
    let mut w = csv::Writer::from_writer(create(&out.join("metrics.csv"))?);
    w.write_record(["split", "scale", "mse", "mae", "count"])?;
    for (split, set) in [("val", &data.val), ("test", &data.test)] {
        if set.is_empty() {
            continue;
        }
        let scaled: [(&str, Metrics); 2] = [
            ("normalized", evaluate(&model, &pool, set, cfg.train.batch_size, None)?),
            ("original", evaluate(&model, &pool, set, cfg.train.batch_size, Some(&lookup))?),
        ];
        for (scale, m) in scaled {
            w.write_record([split, scale, &m.mse.to_string(), &m.mae.to_string(), &m.count.to_string()])?;
            ctx.say(format!("{split} {scale}: mse={:.6} mae={:.6}", m.mse, m.mae));
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, args: &AblateArgs) -> CmdResult {
    let mut cfg = ctx.run_config()?;
    let variants = if args.variants.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|v| {
                serde_json::from_value(serde_json::Value::String(v.trim().to_string()))
                    .map_err(|_| Error::Config(format!("unknown ablation variant {v:?}")))
            })
            .collect::<echocast::Result<Vec<Ablation>>>()?
    };
    let data = cfg.dataset()?;
    cfg.validate()?;
    let out = ctx.out_dir(Some(&cfg))?;
    let rows = run_ablation(
        &cfg.model,
        &cfg.pool_config(),
        &cfg.train,
        &data.train,
        &data.val,
        &data.test,
        &variants,
    )?;
    write_ablation_csv(&rows, create(&out.join("ablation.csv"))?)?;
    for r in &rows {
        ctx.say(format!("{:<7} mse={:.6} mae={:.6}", r.variant.name(), r.metrics.mse, r.metrics.mae));
    }
    Ok(())
}

fn cmd_gen(ctx: &Ctx, args: &GenArgs) -> CmdResult {
    let spec = match (&args.preset, &args.spec) {
        (Some(name), _) => ScenarioSpec::preset(name)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        (None, None) => return Err(Error::Config("gen needs --preset or --spec".into())),
    };
    let series = generate_scenario(&spec, ctx.seed.unwrap_or(0))?;
    let output = match &args.output {
        Some(p) => p.clone(),
        None => ctx.out_dir(None)?.join("scenario.csv"),
    };
    write_csv(&series, create(&output)?)?;
    ctx.say(format!(
        "wrote {} series ({} rows) to {}; switch times {:?}",
        series.len(),
        series.iter().map(|s| s.len()).sum::<usize>(),
        output.display(),
        spec.switch_times()
    ));
    Ok(())
}

fn cmd_adf(ctx: &Ctx, args: &InputArg) -> CmdResult {
    let series = load_csv(&args.input, &CsvSchema::default())?;
    let out = ctx.out_dir(None)?;
    let mut w = csv::Writer::from_writer(create(&out.join("adf.csv"))?);
    w.write_record(["series_id", "feature", "statistic", "critical_value_1pct", "lags", "verdict"])?;
    for s in &series {
        for j in 0..s.features() {
            let r = adf_test(&s.values.col(j))?;
            let verdict = if r.is_stationary { "stationary" } else { "non-stationary" };
            w.write_record([
                s.series_id.clone(),
                j.to_string(),
                r.statistic.to_string(),
                r.critical_value_1pct.to_string(),
                r.lags.to_string(),
                verdict.to_string(),
            ])?;
            ctx.say(format!(
                "{} feature {j}: statistic {:.4} vs {:.4} -> {verdict}",
                s.series_id, r.statistic, r.critical_value_1pct
            ));
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_inspect_pool(ctx: &Ctx, args: &InspectArgs) -> CmdResult {
    let pool = MetaPatternPool::load(&args.pool)?;
    let out = ctx.out_dir(None)?;
    let mut w = csv::Writer::from_writer(create(&out.join("pool_rows.csv"))?);
    let mut header = vec!["row".to_string()];
    header.extend((0..pool.slice_len()).map(|t| format!("t{t}")));
    w.write_record(&header)?;
    for r in 0..pool.occupancy() {
        let mut row = vec![r.to_string()];
        row.extend(pool.pattern(r).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    ctx.say(format!("{} of {} pool rows filled", pool.occupancy(), pool.capacity()));

    if let Some(path) = &args.updates {
        write_delta_matrix(path, pool.capacity(), &out.join("pool_deltas.csv"))?;
    }
    if let (Some(ckpt), Some(input)) = (&args.checkpoint, &args.input) {
        let arg = CheckpointArg {
            checkpoint: ckpt.clone(),
            pool: Some(args.pool.clone()),
        };
        let (model, pool, meta) = load_model(&arg)?;
        let cfg = model.config().clone();
        let spec = echocast::data::WindowSpec {
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            start_token: cfg.start_token,
            stride: 1,
        };
        let mut samples = Vec::new();
        for s in load_csv(input, &CsvSchema::default())? {
            let norm = meta
                .normalizers
                .get(&s.series_id)
                .cloned()
                .unwrap_or_else(|| Normalizer::fit(&s.values));
            samples.push(forecast_input(&norm.apply_series(&s), spec)?);
        }
        let refs: Vec<_> = samples.iter().collect();
        let (_, trace) = model.predict(&to_batch::<f32>(&refs)?, Some(&pool))?;
        for (i, layer) in trace.layers.iter().enumerate() {
            write_inspection_csv(&inspection_records(layer), create(&out.join(format!("echo_layer{i}.csv")))?)?;
        }
        if !trace.padding.is_empty() {
            write_inspection_csv(&inspection_records(&trace.padding), create(&out.join("echo_padding.csv"))?)?;
        }
    }
    Ok(())
}

/// Pivots the `(update, step, row, delta_norm)` log into one line per
/// update with a column per pool row.
fn write_delta_matrix(updates: &Path, capacity: usize, dest: &Path) -> CmdResult {
    let mut rdr = csv::Reader::from_path(updates)?;
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Format(format!("{}: malformed line {}", updates.display(), i + 2));
        let update: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let row: usize = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let delta: f64 = rec.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        if row >= capacity {
            return Err(bad());
        }
        while rows.len() <= update {
            rows.push((String::new(), vec![0.0; capacity]));
        }
        rows[update].0 = rec.get(1).unwrap_or_default().to_string();
        rows[update].1[row] = delta;
    }
    let mut w = csv::Writer::from_writer(create(dest)?);
    let mut header = vec!["update".to_string(), "step".to_string()];
    header.extend((0..capacity).map(|r| format!("row_{r}")));
    w.write_record(&header)?;
    for (i, (step, deltas)) in rows.iter().enumerate() {
        let mut line = vec![i.to_string(), step.clone()];
        line.extend(deltas.iter().map(f64::to_string));
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let ctx = Ctx {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        quiet: cli.quiet,
    };
    let result = match &cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Forecast(a) => cmd_forecast(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::Gen(a) => cmd_gen(&ctx, a),
        Command::Adf(a) => cmd_adf(&ctx, a),
        Command::InspectPool(a) => cmd_inspect_pool(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
