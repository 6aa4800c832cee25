//! Latency distributions for environment and service timing.
//!
//! All validation happens at construction; `sample` can no longer fail.
//! Draws are clamped to `[0, inf)`. A distribution may carry a fail-slow
//! component: with probability `failure_prob` a draw pays `failure_penalty`
//! on top of the base value (a failed attempt plus retry).

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::kernel::SimTime;

#[derive(Debug, Clone, PartialEq)]
enum Family {
    Constant(f64),
    Gaussian { mean: f64, std: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistConfig", into = "DistConfig")]
pub struct LatencyDistribution {
    family: Family,
    failure_prob: f64,
    failure_penalty: f64,
}

impl LatencyDistribution {
    pub fn constant(value: f64) -> Result<Self, SimError> {
        if !value.is_finite() || value < 0.0 {
            return Err(SimError::Distribution(format!(
                "constant value {value} must be finite and >= 0"
            )));
        }
        Ok(Self::plain(Family::Constant(value)))
    }

    pub fn gaussian(mean: f64, std: f64) -> Result<Self, SimError> {
        if !mean.is_finite() || !std.is_finite() || std < 0.0 {
            return Err(SimError::Distribution(format!(
                "gaussian(mean={mean}, std={std}) requires finite mean and std >= 0"
            )));
        }
        Ok(Self::plain(Family::Gaussian { mean, std }))
    }

    /// Log-normal with location `mu` and shape `sigma` (of the underlying
    /// normal); the heavy-tail family used for env.reset / env.step.
    pub fn lognormal(mu: f64, sigma: f64) -> Result<Self, SimError> {
        if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
            return Err(SimError::Distribution(format!(
                "lognormal(mu={mu}, sigma={sigma}) requires finite mu and sigma >= 0"
            )));
        }
        Ok(Self::plain(Family::LogNormal { mu, sigma }))
    }

    pub fn empirical(table: Vec<f64>) -> Result<Self, SimError> {
        if table.is_empty() {
            return Err(SimError::Distribution("empirical table is empty".into()));
        }
        if let Some(bad) = table.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(SimError::Distribution(format!(
                "empirical table entry {bad} must be finite and >= 0"
            )));
        }
        Ok(Self::plain(Family::Empirical(table)))
    }

    fn plain(family: Family) -> Self {
        LatencyDistribution {
            family,
            failure_prob: 0.0,
            failure_penalty: 0.0,
        }
    }

    /// Attach a fail-slow component: with probability `prob` a draw costs an
    /// extra `penalty` seconds.
    pub fn with_failure(mut self, prob: f64, penalty: f64) -> Result<Self, SimError> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(SimError::Distribution(format!(
                "failure_prob {prob} must be within [0, 1]"
            )));
        }
        if !penalty.is_finite() || penalty < 0.0 {
            return Err(SimError::Distribution(format!(
                "failure_penalty {penalty} must be finite and >= 0"
            )));
        }
        self.failure_prob = prob;
        self.failure_penalty = penalty;
        Ok(self)
    }

    pub fn failure_prob(&self) -> f64 {
        self.failure_prob
    }

    /// One draw. Base value is clamped to zero before any failure penalty.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> SimTime {
        let base = match &self.family {
            Family::Constant(v) => *v,
            Family::Gaussian { mean, std } => {
                let normal = Normal::new(*mean, *std).expect("validated at construction");
                normal.sample(rng)
            }
            Family::LogNormal { mu, sigma } => {
                let ln = LogNormal::new(*mu, *sigma).expect("validated at construction");
                ln.sample(rng)
            }
            Family::Empirical(table) => table[rng.gen_range(0..table.len())],
        };
        let mut value = base.max(0.0);
        if self.failure_prob > 0.0 && rng.gen::<f64>() < self.failure_prob {
            value += self.failure_penalty;
        }
        SimTime::secs_unchecked(value)
    }

    /// Analytic mean including the expected failure penalty. Gaussian means
    /// ignore the zero clamp (callers keep means well away from zero).
    pub fn mean(&self) -> f64 {
        let base = match &self.family {
            Family::Constant(v) => *v,
            Family::Gaussian { mean, .. } => *mean,
            Family::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            Family::Empirical(table) => table.iter().sum::<f64>() / table.len() as f64,
        };
        base + self.failure_prob * self.failure_penalty
    }

    /// Gaussian std override, used by the sigma sweep axis.
    pub fn with_gaussian_std(&self, std: f64) -> Result<Self, SimError> {
        match self.family {
            Family::Gaussian { mean, .. } => {
                LatencyDistribution::gaussian(mean, std)?.with_failure(self.failure_prob, self.failure_penalty)
            }
            _ => Err(SimError::Distribution(
                "sigma sweep requires a gaussian distribution".into(),
            )),
        }
    }
}

/// Config-file representation; exactly one family key must be present.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub constant: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<GaussianParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lognormal: Option<LogNormalParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub failure_prob: f64,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub failure_penalty: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl TryFrom<DistConfig> for LatencyDistribution {
    type Error = SimError;

    fn try_from(cfg: DistConfig) -> Result<Self, SimError> {
        let families = cfg.constant.is_some() as u8
            + cfg.gaussian.is_some() as u8
            + cfg.lognormal.is_some() as u8
            + cfg.empirical.is_some() as u8;
        if families != 1 {
            return Err(SimError::Distribution(
                "exactly one of constant/gaussian/lognormal/empirical is required".into(),
            ));
        }
        let dist = if let Some(v) = cfg.constant {
            LatencyDistribution::constant(v)?
        } else if let Some(g) = cfg.gaussian {
            LatencyDistribution::gaussian(g.mean, g.std)?
        } else if let Some(l) = cfg.lognormal {
            LatencyDistribution::lognormal(l.mu, l.sigma)?
        } else {
            LatencyDistribution::empirical(cfg.empirical.unwrap())?
        };
        dist.with_failure(cfg.failure_prob, cfg.failure_penalty)
    }
}

impl From<LatencyDistribution> for DistConfig {
    fn from(d: LatencyDistribution) -> DistConfig {
        let mut cfg = DistConfig {
            failure_prob: d.failure_prob,
            failure_penalty: d.failure_penalty,
            ..DistConfig::default()
        };
        match d.family {
            Family::Constant(v) => cfg.constant = Some(v),
            Family::Gaussian { mean, std } => cfg.gaussian = Some(GaussianParams { mean, std }),
            Family::LogNormal { mu, sigma } => {
                cfg.lognormal = Some(LogNormalParams { mu, sigma })
            }
            Family::Empirical(t) => cfg.empirical = Some(t),
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::StreamRegistry;

    #[test]
    fn constant_always_returns_value() {
        let d = LatencyDistribution::constant(10.0).unwrap();
        let mut reg = StreamRegistry::new(1);
        for _ in 0..100 {
            assert_eq!(d.sample(reg.stream("c")).secs(), 10.0);
        }
    }

    #[test]
    fn degenerate_gaussian_is_constant() {
        let d = LatencyDistribution::gaussian(10.0, 0.0).unwrap();
        let mut reg = StreamRegistry::new(1);
        for _ in 0..100 {
            assert_eq!(d.sample(reg.stream("g")).secs(), 10.0);
        }
    }

    #[test]
    fn invalid_params_fail_at_construction() {
        assert!(LatencyDistribution::gaussian(1.0, -0.5).is_err());
        assert!(LatencyDistribution::lognormal(f64::NAN, 1.0).is_err());
        assert!(LatencyDistribution::empirical(vec![]).is_err());
        assert!(LatencyDistribution::constant(-1.0).is_err());
        assert!(LatencyDistribution::constant(1.0)
            .unwrap()
            .with_failure(1.5, 0.0)
            .is_err());
    }

    #[test]
    fn negative_gaussian_draws_are_clamped() {
        let d = LatencyDistribution::gaussian(0.1, 5.0).unwrap();
        let mut reg = StreamRegistry::new(3);
        for _ in 0..10_000 {
            assert!(d.sample(reg.stream("n")).secs() >= 0.0);
        }
    }

    /// Monte-Carlo check of the fail-slow rate: with failure_prob = 0.1 and
    /// penalty 300 on a lognormal base, roughly 10% of draws must exceed the
    /// penalty floor. 1e5 draws, tolerance +/- 1% absolute.
    #[test]
    fn failure_rate_matches_probability() {
        let d = LatencyDistribution::lognormal(2.3, 0.5)
            .unwrap()
            .with_failure(0.1, 300.0)
            .unwrap();
        let mut reg = StreamRegistry::new(1234);
        let n = 100_000usize;
        let mut penalized = 0usize;
        for _ in 0..n {
            // base lognormal with mu=2.3, sigma=0.5 stays far below 300,
            // so a draw >= 300 identifies a penalty event unambiguously.
            if d.sample(reg.stream("mc")).secs() >= 300.0 {
                penalized += 1;
            }
        }
        let rate = penalized as f64 / n as f64;
        assert!(
            (rate - 0.1).abs() <= 0.01,
            "penalty rate {rate} outside 0.1 +/- 0.01"
        );
    }

    #[test]
    fn lognormal_mean_is_analytic() {
        let d = LatencyDistribution::lognormal(1.0, 0.5).unwrap();
        let expected = (1.0f64 + 0.125).exp();
        assert!((d.mean() - expected).abs() < 1e-12);
    }

    #[test]
    fn config_roundtrip() {
        let d = LatencyDistribution::lognormal(2.0, 0.7)
            .unwrap()
            .with_failure(0.05, 60.0)
            .unwrap();
        let toml = toml::to_string(&DistConfig::from(d.clone())).unwrap();
        let back: DistConfig = toml::from_str(&toml).unwrap();
        assert_eq!(LatencyDistribution::try_from(back).unwrap(), d);
    }

    #[test]
    fn config_rejects_zero_or_two_families() {
        let none: Result<LatencyDistribution, _> = DistConfig::default().try_into();
        assert!(none.is_err());
        let both = DistConfig {
            constant: Some(1.0),
            gaussian: Some(GaussianParams { mean: 1.0, std: 0.0 }),
            ..DistConfig::default()
        };
        let got: Result<LatencyDistribution, _> = both.try_into();
        assert!(got.is_err());
    }
}
