//! Deterministic signal generators standing in for physical sensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

pub const DEFAULT_WALK_STEP_MS: i64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveKind {
    Constant,
    Ramp,
    Sine,
    Step,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub kind: WaveKind,
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub period_ms: i64,
    /// Units per second.
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub step_ts_ms: i64,
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub walk_sigma: f64,
    #[serde(default = "default_walk_step")]
    pub walk_step_ms: i64,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_walk_step() -> i64 {
    DEFAULT_WALK_STEP_MS
}

impl WaveformSpec {
    fn blank(kind: WaveKind, base: f64) -> Self {
        WaveformSpec {
            kind,
            base,
            amplitude: 0.0,
            period_ms: 0,
            slope: 0.0,
            step_ts_ms: 0,
            level: 0.0,
            walk_sigma: 0.0,
            walk_step_ms: DEFAULT_WALK_STEP_MS,
            seed: None,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::blank(WaveKind::Constant, value)
    }

    pub fn ramp(base: f64, slope_per_s: f64) -> Self {
        WaveformSpec {
            slope: slope_per_s,
            ..Self::blank(WaveKind::Ramp, base)
        }
    }

    pub fn sine(base: f64, amplitude: f64, period_ms: i64) -> Self {
        WaveformSpec {
            amplitude,
            period_ms,
            ..Self::blank(WaveKind::Sine, base)
        }
    }

    pub fn step(base: f64, step_ts_ms: i64, level: f64) -> Self {
        WaveformSpec {
            step_ts_ms,
            level,
            ..Self::blank(WaveKind::Step, base)
        }
    }

    pub fn random_walk(base: f64, sigma: f64, seed: u64) -> Self {
        WaveformSpec {
            walk_sigma: sigma,
            seed: Some(seed),
            ..Self::blank(WaveKind::RandomWalk, base)
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::BadSpec(m.to_string()));
        let finite = [self.base, self.amplitude, self.slope, self.level, self.walk_sigma];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("waveform parameters must be finite");
        }
        match self.kind {
            WaveKind::Sine if self.period_ms <= 0 => bad("sine needs period_ms > 0"),
            WaveKind::RandomWalk if self.seed.is_none() => bad("random_walk needs a seed"),
            WaveKind::RandomWalk if self.walk_sigma < 0.0 || self.walk_step_ms <= 0 => {
                bad("random_walk needs walk_sigma >= 0 and walk_step_ms > 0")
            }
            _ => Ok(()),
        }
    }
}

/// Value of the waveform at `t_ms` after scenario start.
pub fn gen_waveform(spec: &WaveformSpec, t_ms: i64) -> Result<f64, HarnessError> {
    Waveform::new(spec.clone())?.at(t_ms)
}

/// Stateful sampler; equal to [`gen_waveform`] but walks forward
/// incrementally when queried at increasing times.
#[derive(Debug, Clone)]
pub struct Waveform {
    spec: WaveformSpec,
    walk: Option<Walk>,
}

#[derive(Debug, Clone)]
struct Walk {
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    steps: i64,
    value: f64,
}

impl Waveform {
    pub fn new(spec: WaveformSpec) -> Result<Self, HarnessError> {
        spec.validate()?;
        Ok(Waveform { spec, walk: None })
    }

    pub fn spec(&self) -> &WaveformSpec {
        &self.spec
    }

    pub fn at(&mut self, t_ms: i64) -> Result<f64, HarnessError> {
        if t_ms < 0 {
            return Err(HarnessError::BadSpec(format!("negative time {t_ms}")));
        }
        let s = &self.spec;
        let t = t_ms as f64;
        Ok(match s.kind {
            WaveKind::Constant => s.base,
            WaveKind::Ramp => s.base + s.slope * t / 1000.0,
            WaveKind::Sine => s.base + s.amplitude * (std::f64::consts::TAU * t / s.period_ms as f64).sin(),
            WaveKind::Step => {
                if t_ms < s.step_ts_ms {
                    s.base
                } else {
                    s.level
                }
            }
            WaveKind::RandomWalk => self.walk_to(t_ms / self.spec.walk_step_ms),
        })
    }

    fn walk_to(&mut self, steps: i64) -> f64 {
        let fresh = || Walk {
            rng: ChaCha8Rng::seed_from_u64(self.spec.seed.unwrap_or_default()),
            noise: Normal::new(0.0, self.spec.walk_sigma).expect("sigma validated"),
            steps: 0,
            value: self.spec.base,
        };
        let walk = match self.walk.take() {
            Some(w) if w.steps <= steps => w,
            _ => fresh(),
        };
        let walk = self.walk.insert(walk);
        while walk.steps < steps {
            walk.value += walk.noise.sample(&mut walk.rng);
            walk.steps += 1;
        }
        walk.value
    }
}
