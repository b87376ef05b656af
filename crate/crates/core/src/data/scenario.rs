use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LoadSeries;
use crate::array::Array2;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Sine,
    Square,
    Sawtooth,
    /// Fundamental plus a half-amplitude second harmonic.
    Composite,
}

impl Generator {
    /// Unit-amplitude waveform at phase angle `angle`.
    fn wave(self, angle: f64) -> f64 {
        match self {
            Generator::Sine => angle.sin(),
            Generator::Square => {
                if angle.sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Generator::Sawtooth => 2.0 * (angle / TAU).rem_euclid(1.0) - 1.0,
            Generator::Composite => angle.sin() + 0.5 * (2.0 * angle).sin(),
        }
    }
}

fn default_generator() -> Generator {
    Generator::Sine
}

/// A stretch of series drawn from one generating distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    #[serde(default = "default_generator")]
    pub generator: Generator,
    pub amplitude: f64,
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub noise_std: f64,
    /// Constant level added to the segment.
    #[serde(default)]
    pub offset: f64,
    pub length: usize,
}

/// A source introduced late with only `budget` observed steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewEntity {
    pub id: String,
    pub template: Segment,
    pub budget: usize,
    #[serde(default)]
    pub static_context: Vec<f64>,
}

fn default_interval() -> i64 {
    3600
}

fn default_start() -> i64 {
    1_704_067_200
}

fn default_id() -> String {
    "scenario".into()
}

/// Piecewise synthetic load: segments switch generating distribution at
/// the boundaries between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    #[serde(default = "default_id")]
    pub series_id: String,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub static_context: Vec<f64>,
    #[serde(default)]
    pub new_entities: Vec<NewEntity>,
    #[serde(default = "default_interval")]
    pub interval: i64,
    #[serde(default = "default_start")]
    pub start: i64,
}

impl ScenarioSpec {
    /// Indices where one segment hands over to the next.
    pub fn switch_times(&self) -> Vec<usize> {
        self.segments
            .iter()
            .scan(0, |acc, s| {
                *acc += s.length;
                Some(*acc)
            })
            .take(self.segments.len().saturating_sub(1))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::config("scenario needs at least one segment"));
        }
        let all = self
            .segments
            .iter()
            .chain(self.new_entities.iter().map(|e| &e.template));
        for s in all {
            if s.length == 0 || s.period.is_nan() || s.period <= 0.0 || s.noise_std.is_nan() || s.noise_std < 0.0 || !s.amplitude.is_finite() {
                return Err(Error::config(
                    "segments need positive length and period, finite amplitude and non-negative noise",
                ));
            }
        }
        for e in &self.new_entities {
            if e.budget == 0 || e.budget > e.template.length {
                return Err(Error::config(format!(
                    "entity {:?}: budget must lie in 1..={}",
                    e.id, e.template.length
                )));
            }
        }
        if self.interval <= 0 {
            return Err(Error::config("interval must be positive"));
        }
        Ok(())
    }

    /// Named presets: `switch` (low regime, daily period, handing over to a
    /// high regime with a half-day period) and `new_app` (two known regimes
    /// plus a few-shot entity with an unseen waveform).
    pub fn preset(name: &str) -> Result<Self> {
        let seg = |generator, amplitude, period, offset, length| Segment {
            generator,
            amplitude,
            period,
            phase: 0.0,
            noise_std: 0.05,
            offset,
            length,
        };
        match name {
            "switch" => Ok(ScenarioSpec {
                series_id: "switch".into(),
                segments: vec![
                    seg(Generator::Sine, 1.0, 24.0, 0.0, 1200),
                    seg(Generator::Composite, 2.0, 12.0, 3.0, 1200),
                ],
                static_context: vec![1.0],
                new_entities: Vec::new(),
                interval: default_interval(),
                start: default_start(),
            }),
            "new_app" => Ok(ScenarioSpec {
                series_id: "base".into(),
                segments: vec![
                    seg(Generator::Sine, 1.0, 24.0, 0.0, 800),
                    seg(Generator::Square, 1.0, 24.0, 1.0, 800),
                ],
                static_context: vec![0.0],
                new_entities: vec![NewEntity {
                    id: "new_app".into(),
                    template: seg(Generator::Sawtooth, 1.5, 24.0, 0.5, 480),
                    budget: 96,
                    static_context: vec![1.0],
                }],
                interval: default_interval(),
                start: default_start(),
            }),
            other => Err(Error::config(format!(
                "unknown scenario preset {other:?} (expected \"switch\" or \"new_app\")"
            ))),
        }
    }
}

fn render(segments: &[Segment], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(segments.iter().map(|s| s.length).sum());
    for s in segments {
        let noise = Normal::new(0.0, s.noise_std).map_err(|e| Error::config(e.to_string()))?;
        for _ in 0..s.length {
            let t = out.len() as f64;
            let angle = TAU * t / s.period + s.phase;
            let eps = if s.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            out.push(s.offset + s.amplitude * s.generator.wave(angle) + eps);
        }
    }
    Ok(out)
}

/// The main series followed by any new-entity series (truncated to their
/// budget). Pure in `(spec, seed)`.
pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Vec<LoadSeries>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let main = render(&spec.segments, &mut rng)?;
    let mut out = vec![LoadSeries::new(
        spec.series_id.clone(),
        spec.start,
        spec.interval,
        Array2::column(&main),
        spec.static_context.clone(),
    )?];
    for e in &spec.new_entities {
        let values = render(std::slice::from_ref(&e.template), &mut rng)?;
        // The entity appears at the end of the main series' timeline.
        let start = spec.start + (main.len() - e.budget.min(main.len())) as i64 * spec.interval;
        out.push(LoadSeries::new(
            e.id.clone(),
            start,
            spec.interval,
            Array2::column(&values[values.len() - e.budget..]),
            e.static_context.clone(),
        )?);
    }
    Ok(out)
}
