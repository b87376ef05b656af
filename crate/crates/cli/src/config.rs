use std::path::{Path, PathBuf};

use echocast::data::{
    generate_scenario, load_csv, prepare_dataset, CsvSchema, LoadSeries, PreparedData, ScenarioSpec,
    SplitRatios, WindowSpec,
};
use echocast::model::ModelConfig;
use echocast::pool::PoolConfig;
use echocast::training::TrainConfig;
use echocast::Error;
use serde::{Deserialize, Serialize};

fn default_capacity() -> usize {
    128
}
fn default_alpha() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    0.1
}

/// Pool settings not shared with the model or training sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSettings {
    #[serde(default = "default_capacity")]
    pub capacity: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

impl Default for PoolSettings {
    fn default() -> Self {
        PoolSettings {
            capacity: default_capacity(),
            alpha: default_alpha(),
            gamma: default_gamma(),
        }
    }
}

/// Either a preset name or a full scenario document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSource {
    Preset(String),
    Spec(ScenarioSpec),
}

impl ScenarioSource {
    pub fn resolve(&self) -> echocast::Result<ScenarioSpec> {
        match self {
            ScenarioSource::Preset(name) => ScenarioSpec::preset(name),
            ScenarioSource::Spec(spec) => Ok(spec.clone()),
        }
    }
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    /// Input CSV; relative paths resolve against the config file.
    #[serde(default)]
    pub csv: Option<PathBuf>,
    /// Synthetic source used when no CSV is given.
    #[serde(default)]
    pub scenario: Option<ScenarioSource>,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(default)]
    pub splits: SplitRatios,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

/// Everything one run needs. `model.features` and `model.static_dim` are
/// taken from the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub pool: PoolSettings,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads and validates a config file. Parse failures are validation
    /// errors since they point at the document's fields.
    pub fn load(path: &Path) -> echocast::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let (Some(csv), Some(dir)) = (&cfg.data.csv, path.parent()) {
            if csv.is_relative() {
                cfg.data.csv = Some(dir.join(csv));
            }
        }
        Ok(cfg)
    }

    pub fn pool_config(&self) -> PoolConfig {
        PoolConfig {
            capacity: self.pool.capacity,
            slice_len: self.model.slice_len,
            alpha: self.pool.alpha,
            gamma: self.pool.gamma,
            update_interval: self.train.update_interval.unwrap_or(usize::MAX),
            period: self.model.period,
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.model.lookback,
            horizon: self.model.horizon,
            start_token: self.model.start_token,
            stride: self.data.stride,
        }
    }

    /// Cross-section checks, with the offending field named in each message.
    pub fn validate(&self) -> echocast::Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(msg) => Error::Config(format!("{name}: {msg}")),
            other => other,
        };
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.validate().map_err(|e| field("train", e))?;
        self.pool_config().validate().map_err(|e| field("pool", e))?;
        if self.model.top_k > self.pool.capacity {
            return Err(Error::Config(format!(
                "model.top_k: K = {} exceeds pool.capacity P = {}",
                self.model.top_k, self.pool.capacity
            )));
        }
        if self.data.stride == 0 {
            return Err(Error::Config("data.stride: must be positive".into()));
        }
        if self.data.csv.is_some() && self.data.scenario.is_some() {
            return Err(Error::Config("data: give either csv or scenario, not both".into()));
        }
        Ok(())
    }

    /// Loads the configured series.
    pub fn series(&self) -> echocast::Result<Vec<LoadSeries>> {
        match (&self.data.csv, &self.data.scenario) {
            (Some(path), _) => load_csv(path, &self.data.schema),
            (None, Some(source)) => generate_scenario(&source.resolve()?, self.train.seed),
            (None, None) => Err(Error::Config("data: either csv or scenario is required".into())),
        }
    }

    /// Adopts the data's feature and static widths.
    pub fn fit_to(&mut self, series: &[LoadSeries]) -> echocast::Result<()> {
        let first = series.first().ok_or_else(|| Error::Input("no series loaded".into()))?;
        if series
            .iter()
            .any(|s| s.features() != first.features() || s.static_context.len() != first.static_context.len())
        {
            return Err(Error::Input("series disagree on value or static widths".into()));
        }
        self.model.features = first.features();
        self.model.static_dim = first.static_context.len();
        Ok(())
    }

    /// Loads data, adapts the model widths and prepares windows.
    pub fn dataset(&mut self) -> echocast::Result<PreparedData> {
        let series = self.series()?;
        self.fit_to(&series)?;
        // Series too short for a full split (few-shot entities) are skipped.
        let usable: Vec<LoadSeries> = series
            .into_iter()
            .filter(|s| {
                let short = s.len() * 2 / 10 < self.model.lookback + self.model.horizon;
                if short {
                    log::warn!("series {:?} is too short to split and is skipped", s.series_id);
                }
                !short
            })
            .collect();
        prepare_dataset(&usable, self.window_spec(), self.data.splits)
    }
}
