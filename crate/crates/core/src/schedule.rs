//! Interpolation path `x_t = alpha_t x_1 + sigma_t x_0` and the time-dependent
//! guidance strength.
//!
//! Time runs from noise (`t = 0`, `alpha = 0`, `sigma = 1`) to data
//! (`t = 1`, `alpha = 1`, `sigma = 0`). Evaluations are restricted to the
//! clamp range `[t_min, t_max]` so that divisions by `alpha_t` and `sigma_t`
//! stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::guidance::GuidanceConfig;

pub const DEFAULT_T_MIN: f64 = 1e-3;
pub const DEFAULT_T_MAX: f64 = 1.0 - 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `alpha_t = t`, `sigma_t = 1 - t`.
    #[default]
    LinearRectified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default)]
    pub kind: ScheduleKind,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

fn default_t_max() -> f64 {
    DEFAULT_T_MAX
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::LinearRectified,
            t_min: DEFAULT_T_MIN,
            t_max: DEFAULT_T_MAX,
        }
    }
}

/// `(alpha_t, sigma_t)` and their time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub alpha: f64,
    pub sigma: f64,
    pub dalpha: f64,
    pub dsigma: f64,
}

/// Coefficients of the velocity/score conversion `v = a x - b s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCoefficients {
    pub a: f64,
    pub b: f64,
}

impl Schedule {
    pub fn linear(t_min: f64, t_max: f64) -> Result<Self> {
        let s = Self {
            kind: ScheduleKind::LinearRectified,
            t_min,
            t_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.t_min.is_finite()
            && self.t_max.is_finite()
            && 0.0 < self.t_min
            && self.t_min < self.t_max
            && self.t_max < 1.0;
        if ok {
            Ok(())
        } else {
            Err(LabError::Config(format!(
                "schedule clamps must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )))
        }
    }

    pub fn check(&self, t: f64) -> Result<()> {
        if t >= self.t_min && t <= self.t_max {
            Ok(())
        } else {
            Err(LabError::Domain {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            })
        }
    }

    /// Path values without the clamp check. Callers must ensure `t` is in range.
    pub(crate) fn point_unchecked(&self, t: f64) -> PathPoint {
        match self.kind {
            ScheduleKind::LinearRectified => PathPoint {
                alpha: t,
                sigma: 1.0 - t,
                dalpha: 1.0,
                dsigma: -1.0,
            },
        }
    }

    pub fn eval(&self, t: f64) -> Result<PathPoint> {
        self.check(t)?;
        Ok(self.point_unchecked(t))
    }

    pub fn coefficients(&self, t: f64) -> Result<PathCoefficients> {
        let p = self.eval(t)?;
        if p.alpha == 0.0 {
            return Err(LabError::Domain {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            });
        }
        Ok(p.coefficients())
    }
}

impl PathPoint {
    pub fn coefficients(&self) -> PathCoefficients {
        let a = self.dalpha / self.alpha;
        let b = (self.dsigma * self.sigma * self.alpha - self.dalpha * self.sigma * self.sigma)
            / self.alpha;
        PathCoefficients { a, b }
    }
}

/// Power-law guidance strength `max(omega_min, omega_ref * (1 - t)^gamma)`.
pub fn omega(config: &GuidanceConfig, t: f64) -> Result<f64> {
    config.validate()?;
    if !(0.0..=1.0).contains(&t) {
        return Err(LabError::Config(format!("omega evaluated at t = {t} outside [0, 1]")));
    }
    Ok(omega_unchecked(config, t))
}

pub(crate) fn omega_unchecked(config: &GuidanceConfig, t: f64) -> f64 {
    config
        .omega_min
        .max(config.omega_ref * (1.0 - t).powf(config.gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::GuidanceRule;

    fn cfg(omega_ref: f64, omega_min: f64, gamma: f64) -> GuidanceConfig {
        GuidanceConfig {
            rule: GuidanceRule::AdaMaG,
            omega_ref,
            omega_min,
            gamma,
            ..GuidanceConfig::default()
        }
    }

    #[test]
    fn eval_linear() {
        let s = Schedule::default();
        let p = s.eval(0.5).unwrap();
        assert_eq!((p.alpha, p.sigma, p.dalpha, p.dsigma), (0.5, 0.5, 1.0, -1.0));
        let p = s.eval(0.25).unwrap();
        assert_eq!((p.alpha, p.sigma), (0.25, 0.75));
        let p = s.eval(s.t_max).unwrap();
        assert_eq!((p.alpha, p.sigma), (s.t_max, 1.0 - s.t_max));
    }

    #[test]
    fn eval_out_of_range_names_bounds() {
        let s = Schedule::default();
        let err = s.eval(1.0).unwrap_err().to_string();
        assert!(err.contains("0.001") && err.contains("0.999"), "{err}");
        assert!(s.eval(0.0).is_err());
    }

    #[test]
    fn coefficients_linear() {
        let s = Schedule::default();
        for (t, a, b) in [(0.5, 2.0, -1.0), (0.8, 1.25, -0.25), (0.1, 10.0, -9.0)] {
            let c = s.coefficients(t).unwrap();
            assert!((c.a - a).abs() < 1e-12, "a({t}) = {}", c.a);
            assert!((c.b - b).abs() < 1e-12, "b({t}) = {}", c.b);
        }
    }

    #[test]
    fn invalid_clamps() {
        assert!(Schedule::linear(0.5, 0.4).is_err());
        assert!(Schedule::linear(0.0, 0.4).is_err());
        assert!(Schedule::linear(0.1, 1.0).is_err());
    }

    #[test]
    fn omega_examples() {
        assert_eq!(omega(&cfg(10.0, 1.0, 4.0), 0.0).unwrap(), 10.0);
        assert_eq!(omega(&cfg(10.0, 1.0, 4.0), 0.5).unwrap(), 1.0);
        for t in [0.0, 0.3, 0.9, 1.0] {
            assert_eq!(omega(&cfg(7.0, 7.0, 4.0), t).unwrap(), 7.0);
        }
    }

    #[test]
    fn omega_rejects_bad_config() {
        assert!(omega(&cfg(1.0, 2.0, 4.0), 0.5).is_err());
        assert!(omega(&cfg(10.0, 1.0, -1.0), 0.5).is_err());
    }

    #[test]
    fn linear_a_is_inverse_t() {
        use rand::{Rng, SeedableRng};
        let s = Schedule::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let t = rng.random_range(s.t_min..=s.t_max);
            let p = s.eval(t).unwrap();
            let c = p.coefficients();
            assert!((c.a * p.sigma * t - p.sigma).abs() <= 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn omega_monotone_and_bounded(
            omega_ref in 0.1f64..50.0,
            frac in 0.0f64..=1.0,
            gamma in 0.0f64..8.0,
            t1 in 0.0f64..=1.0,
            t2 in 0.0f64..=1.0,
        ) {
            let c = cfg(omega_ref, omega_ref * frac, gamma);
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let w_lo = omega(&c, lo).unwrap();
            let w_hi = omega(&c, hi).unwrap();
            proptest::prop_assert!(w_lo >= w_hi);
            proptest::prop_assert!(w_hi >= c.omega_min);
            proptest::prop_assert_eq!(omega(&c, 0.0).unwrap(), omega_ref);
        }

        #[test]
        fn b_times_score_matches_velocity_term(t in DEFAULT_T_MIN..=DEFAULT_T_MAX, s in -1e3f64..1e3) {
            let sched = Schedule::default();
            let p = sched.eval(t).unwrap();
            let c = sched.coefficients(t).unwrap();
            let direct = (p.dsigma * p.sigma * p.alpha - p.dalpha * p.sigma * p.sigma) / p.alpha * s;
            let lhs = c.b * s;
            proptest::prop_assert!((lhs - direct).abs() <= 1e-12 * direct.abs().max(f64::MIN_POSITIVE));
        }
    }
}
