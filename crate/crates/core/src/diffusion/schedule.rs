use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-schedule β endpoints.
pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 0.2;
/// Cosine-schedule offset and per-step β cap.
const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::arg(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Cumulative signal fractions ᾱ_0..ᾱ_T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 4 {
            return Err(Error::arg(format!("schedule needs T >= 4, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    LINEAR_BETA_START
                        + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                })
                .collect(),
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
                    (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t) / f(t - 1)).clamp(0.0, COSINE_MAX_BETA))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sched = Self { kind, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    /// Number of diffusion steps T.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::arg(format!("timestep {t} outside [0, {}]", self.steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// True when the last step is close to pure noise (ᾱ_T < 0.02). The
    /// linear schedule reaches this for T ≥ 36.
    pub fn reaches_noise(&self) -> bool {
        *self.alpha_bar.last().expect("non-empty") < 0.02
    }

    fn validate(&self) -> Result<()> {
        let a0 = self.alpha_bar[0];
        if !(a0 > 0.999 && a0 <= 1.0) {
            return Err(Error::Numeric(format!("alpha_bar_0 = {a0}")));
        }
        for w in self.alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return Err(Error::Numeric(format!(
                    "alpha_bar not strictly decreasing in (0,1]: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_endpoint_and_monotone() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        assert!(s.alpha_bar(1000).unwrap() < 0.02);
        assert!(s.reaches_noise());
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for t in [4, 10, 37, 100, 1000] {
                let s = NoiseSchedule::new(kind, t).unwrap();
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
                assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
            }
        }
        assert!(NoiseSchedule::new(ScheduleKind::Cosine, 4).unwrap().reaches_noise());
    }

    #[test]
    fn linear_t10_is_cumulative_product() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 10).unwrap();
        let mut prod = 1.0;
        for t in 1..=10 {
            let beta = 1e-4 + (0.2 - 1e-4) * (t - 1) as f64 / 9.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t).unwrap() - prod).abs() < 1e-15);
        }
    }

    #[test]
    fn short_schedules_rejected() {
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 3).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap().alpha_bar(101).is_err());
    }
}
