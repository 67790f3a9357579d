//! Guidance-field algebra: CFG combination, the score-normal direction,
//! parallel/orthogonal split and the AdaMaG update.
//!
//! The raw residual is the unit difference `g = v_c - v_u`; guidance scale
//! enters only through `omega(t)`. The sampler integrates `v_u + g_tilde`.

use serde::{Deserialize, Serialize};

use crate::divergence::{divergence_with, DivMethod};
use crate::error::{check_len, LabError, Result};
use crate::field::VectorField;
use crate::schedule::{omega_unchecked, Schedule};
use crate::target::{dot, norm2, GaussianMixture, TargetPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceRule {
    Cfg,
    #[default]
    #[serde(rename = "adamag")]
    AdaMaG,
}

/// Which velocity defines `n_t = a_t x - v_t(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalSource {
    #[default]
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    #[serde(default)]
    pub rule: GuidanceRule,
    #[serde(default = "default_omega_ref")]
    pub omega_ref: f64,
    #[serde(default = "default_omega_min")]
    pub omega_min: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub normal_source: NormalSource,
}

fn default_omega_ref() -> f64 {
    7.0
}
fn default_omega_min() -> f64 {
    1.0
}
fn default_gamma() -> f64 {
    4.0
}
fn default_beta() -> f64 {
    0.1
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            rule: GuidanceRule::AdaMaG,
            omega_ref: default_omega_ref(),
            omega_min: default_omega_min(),
            gamma: default_gamma(),
            beta: default_beta(),
            normal_source: NormalSource::Conditional,
        }
    }
}

impl GuidanceConfig {
    pub fn cfg(omega: f64) -> Self {
        Self {
            rule: GuidanceRule::Cfg,
            omega_ref: omega,
            omega_min: omega.min(default_omega_min()),
            ..Self::default()
        }
    }

    pub fn adamag(omega_ref: f64, beta: f64, gamma: f64) -> Self {
        Self {
            rule: GuidanceRule::AdaMaG,
            omega_ref,
            omega_min: omega_ref.min(default_omega_min()),
            gamma,
            beta,
            normal_source: NormalSource::Conditional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.omega_ref, self.omega_min, self.gamma, self.beta]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(LabError::Config("guidance parameters must be finite".into()));
        }
        if !(self.omega_ref > 0.0) {
            return Err(LabError::Config(format!("omega_ref must be > 0, got {}", self.omega_ref)));
        }
        if self.omega_min < 0.0 || self.omega_min > self.omega_ref {
            return Err(LabError::Config(format!(
                "need 0 <= omega_min <= omega_ref, got omega_min = {}, omega_ref = {}",
                self.omega_min, self.omega_ref
            )));
        }
        if self.gamma < 0.0 {
            return Err(LabError::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.beta < 0.0 {
            return Err(LabError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Guidance strength at `t`: the power-law schedule for AdaMaG, the
    /// constant `omega_ref` for CFG.
    pub fn strength(&self, t: f64) -> f64 {
        match self.rule {
            GuidanceRule::Cfg => self.omega_ref,
            GuidanceRule::AdaMaG => omega_unchecked(self, t),
        }
    }
}

/// Every intermediate of one guidance evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceBreakdown {
    pub g: Vec<f64>,
    pub g_par: Vec<f64>,
    pub g_perp: Vec<f64>,
    pub n: Vec<f64>,
    pub omega_t: f64,
    pub g_tilde: Vec<f64>,
    /// `|n|` fell below the projection threshold and `g` passed through.
    pub degenerate: bool,
}

/// `v_u + omega (v_c - v_u)`.
pub fn cfg_velocity(v_u: &[f64], v_c: &[f64], omega: f64) -> Result<Vec<f64>> {
    check_len(v_u.len(), v_c.len())?;
    Ok(v_u.iter().zip(v_c).map(|(u, c)| u + omega * (c - u)).collect())
}

/// `n_t(x) = a_t x - v`.
pub fn normal_direction(v: &[f64], x: &[f64], a_t: f64) -> Result<Vec<f64>> {
    check_len(x.len(), v.len())?;
    Ok(x.iter().zip(v).map(|(x, v)| a_t * x - v).collect())
}

/// Projection threshold `1e-12 sqrt(D) (1 + |x|)` below which `n` is treated as zero.
pub fn normal_threshold(x: &[f64]) -> f64 {
    1e-12 * (x.len() as f64).sqrt() * (1.0 + norm2(x).sqrt())
}

/// Split `g` into its projection on `n` and the orthogonal remainder.
pub fn decompose(g: &[f64], n: &[f64], eps_n: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(g.len(), n.len())?;
    let nn = norm2(n);
    let norm = nn.sqrt();
    if !(norm > eps_n) {
        return Err(LabError::DegenerateNormal {
            norm,
            threshold: eps_n,
        });
    }
    let coef = dot(g, n) / nn;
    let g_par: Vec<f64> = n.iter().map(|n| coef * n).collect();
    let g_perp = g.iter().zip(&g_par).map(|(g, p)| g - p).collect();
    Ok((g_par, g_perp))
}

/// Guidance breakdown for either rule.
///
/// AdaMaG: `g_tilde = omega(t) (g_perp + beta g_par)`, evaluated as
/// `omega(t) (g + (beta - 1) g_par)`. CFG: `g_tilde = omega_ref g`, with the
/// split still reported.
pub fn guidance_breakdown(
    v_u: &[f64],
    v_c: &[f64],
    x: &[f64],
    t: f64,
    schedule: &Schedule,
    config: &GuidanceConfig,
) -> Result<GuidanceBreakdown> {
    check_len(x.len(), v_u.len())?;
    check_len(x.len(), v_c.len())?;
    config.validate()?;
    let coef = schedule.coefficients(t)?;
    let g: Vec<f64> = v_c.iter().zip(v_u).map(|(c, u)| c - u).collect();
    let source = match config.normal_source {
        NormalSource::Conditional => v_c,
        NormalSource::Unconditional => v_u,
    };
    let n = normal_direction(source, x, coef.a)?;
    let (g_par, g_perp, degenerate) = match decompose(&g, &n, normal_threshold(x)) {
        Ok((p, q)) => (p, q, false),
        Err(LabError::DegenerateNormal { .. }) => (vec![0.0; g.len()], g.clone(), true),
        Err(e) => return Err(e),
    };
    let omega_t = config.strength(t);
    let g_tilde = match config.rule {
        GuidanceRule::Cfg => g.iter().map(|g| omega_t * g).collect(),
        GuidanceRule::AdaMaG => {
            let damp = config.beta - 1.0;
            g.iter()
                .zip(&g_par)
                .map(|(g, p)| omega_t * (g + damp * p))
                .collect()
        }
    };
    Ok(GuidanceBreakdown {
        g,
        g_par,
        g_perp,
        n,
        omega_t,
        g_tilde,
        degenerate,
    })
}

/// AdaMaG breakdown; rejects CFG configurations.
pub fn adamag_field(
    v_u: &[f64],
    v_c: &[f64],
    x: &[f64],
    t: f64,
    schedule: &Schedule,
    config: &GuidanceConfig,
) -> Result<GuidanceBreakdown> {
    if config.rule != GuidanceRule::AdaMaG {
        return Err(LabError::Config("adamag_field requires rule = adamag".into()));
    }
    guidance_breakdown(v_u, v_c, x, t, schedule, config)
}

/// Exact conditional and unconditional velocities of a pair at `(x, t)`.
pub fn pair_velocities(
    pair: &TargetPair,
    schedule: &Schedule,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_len(pair.dim(), x.len())?;
    let v_u = pair.unconditional.at(schedule, t)?.velocity(x);
    let v_c = pair.conditional.at(schedule, t)?.velocity(x);
    Ok((v_u, v_c))
}

/// Which part of the breakdown a [`GuidanceField`] exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceComponent {
    Raw,
    Parallel,
    Orthogonal,
    Guided,
}

/// A guidance component built from an analytic pair, as a vector field.
#[derive(Debug, Clone, Copy)]
pub struct GuidanceField<'a> {
    pub pair: &'a TargetPair,
    pub schedule: &'a Schedule,
    pub config: GuidanceConfig,
    pub component: GuidanceComponent,
}

impl GuidanceField<'_> {
    pub fn breakdown(&self, x: &[f64], t: f64) -> Result<GuidanceBreakdown> {
        let (v_u, v_c) = pair_velocities(self.pair, self.schedule, t, x)?;
        guidance_breakdown(&v_u, &v_c, x, t, self.schedule, &self.config)
    }
}

impl VectorField for GuidanceField<'_> {
    fn dim(&self) -> usize {
        self.pair.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let b = self
            .breakdown(x, t)
            .expect("guidance field evaluated outside schedule clamp");
        match self.component {
            GuidanceComponent::Raw => b.g,
            GuidanceComponent::Parallel => b.g_par,
            GuidanceComponent::Orthogonal => b.g_perp,
            GuidanceComponent::Guided => b.g_tilde,
        }
    }

    fn exact_divergence(&self, x: &[f64], t: f64) -> Option<f64> {
        let d = crate::divergence::guidance_divergence_exact(
            self.pair,
            self.schedule,
            &self.config,
            t,
            x,
        )
        .ok()?;
        Some(match self.component {
            GuidanceComponent::Raw => d.g,
            GuidanceComponent::Parallel => d.g_par,
            GuidanceComponent::Orthogonal => d.g_perp,
            GuidanceComponent::Guided => d.g_tilde,
        })
    }
}

/// `div g + g . grad log p_t` at `(x, t)`; zero iff `g` conserves `p_t` there.
pub fn conservation_residual(
    g_field: &dyn VectorField,
    target: &GaussianMixture,
    schedule: &Schedule,
    t: f64,
    x: &[f64],
    method: &DivMethod,
) -> Result<f64> {
    check_len(target.dim(), x.len())?;
    check_len(g_field.dim(), x.len())?;
    let s = target.at(schedule, t)?.score(x);
    let div = divergence_with(g_field, t, x, method)?;
    Ok(div + dot(&g_field.eval(x, t), &s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FnField, ScoreRotationField};
    use crate::target::MixtureSpec;

    #[test]
    fn cfg_examples() {
        let vu = [0.3, -1.0];
        let vc = [1.2, 0.5];
        assert_eq!(cfg_velocity(&vu, &vc, 1.0).unwrap(), vc.to_vec());
        assert_eq!(cfg_velocity(&vu, &vc, 0.0).unwrap(), vu.to_vec());
        assert_eq!(cfg_velocity(&[0.0, 0.0], &[1.0, 2.0], 7.0).unwrap(), vec![7.0, 14.0]);
        assert!(cfg_velocity(&[0.0], &[1.0, 2.0], 7.0).is_err());
    }

    #[test]
    fn normal_examples() {
        let x = [0.5, -2.0];
        let v: Vec<f64> = x.iter().map(|x| 3.0 * x).collect();
        assert_eq!(normal_direction(&v, &x, 3.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(normal_direction(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn normal_is_parallel_to_exact_score() {
        let s = Schedule::default();
        let g = GaussianMixture::new(MixtureSpec::isotropic(
            &[0.4, 0.6],
            &[vec![2.0, 1.0], vec![-1.0, 0.5]],
            &[0.5, 1.5],
        ))
        .unwrap();
        for (t, x) in [(0.3, [0.2, 0.9]), (0.7, [-1.0, 2.0]), (0.95, [1.5, 0.7])] {
            let m = g.at(&s, t).unwrap();
            let n = normal_direction(&m.velocity(&x), &x, m.coefficients().a).unwrap();
            let sc = m.score(&x);
            let cos = dot(&n, &sc) / (norm2(&n) * norm2(&sc)).sqrt();
            assert!((cos.abs() - 1.0).abs() < 1e-8);
            // b_t < 0, so n points against the score
            assert!(cos < 0.0);
        }
    }

    #[test]
    fn decompose_examples() {
        let (p, q) = decompose(&[3.0, 4.0], &[1.0, 0.0], 0.0).unwrap();
        assert_eq!((p, q), (vec![3.0, 0.0], vec![0.0, 4.0]));
        let (p, q) = decompose(&[0.0, 2.0], &[5.0, 0.0], 0.0).unwrap();
        assert_eq!((p, q), (vec![0.0, 0.0], vec![0.0, 2.0]));
        let n = [0.5, -1.5];
        let g = [1.0, -3.0];
        let (p, q) = decompose(&g, &n, 0.0).unwrap();
        assert_eq!(p, g.to_vec());
        assert_eq!(q, vec![0.0, 0.0]);
        assert!(matches!(
            decompose(&g, &[0.0, 0.0], 1e-12),
            Err(LabError::DegenerateNormal { .. })
        ));
    }

    #[test]
    fn degenerate_normal_passes_through() {
        let s = Schedule::default();
        let t = 0.5;
        let a = s.coefficients(t).unwrap().a;
        let x = [1.0, 2.0];
        // v_c purely radial: n = 0
        let v_c: Vec<f64> = x.iter().map(|x| a * x).collect();
        let v_u = [0.0, 0.5];
        let cfg = GuidanceConfig::adamag(5.0, 0.0, 0.0);
        let b = adamag_field(&v_u, &v_c, &x, t, &s, &cfg).unwrap();
        assert!(b.degenerate);
        assert_eq!(b.g_perp, b.g);
        assert!(b.g_tilde.iter().zip(&b.g).all(|(gt, g)| *gt == 5.0 * g));
    }

    #[test]
    fn adamag_reduces_to_cfg_and_iso_density() {
        let s = Schedule::default();
        let x = [0.3, -0.8, 1.1];
        let v_u = [0.1, 0.2, -0.4];
        let v_c = [1.0, -0.3, 0.6];
        let t = 0.4;
        let cfg = GuidanceConfig {
            beta: 1.0,
            omega_ref: 6.0,
            omega_min: 6.0,
            gamma: 2.5,
            ..GuidanceConfig::default()
        };
        let b = adamag_field(&v_u, &v_c, &x, t, &s, &cfg).unwrap();
        let cfgv = cfg_velocity(&v_u, &v_c, 6.0).unwrap();
        for i in 0..3 {
            assert_eq!(v_u[i] + b.g_tilde[i], cfgv[i]);
        }
        let cfg0 = GuidanceConfig { beta: 0.0, ..cfg };
        let b0 = adamag_field(&v_u, &v_c, &x, t, &s, &cfg0).unwrap();
        for i in 0..3 {
            assert!((b0.g_tilde[i] - 6.0 * b0.g_perp[i]).abs() < 1e-14);
        }
        assert!(adamag_field(&v_u, &v_c, &x, t, &s, &GuidanceConfig::cfg(3.0)).is_err());
    }

    #[test]
    fn breakdown_invariants() {
        let s = Schedule::default();
        let x = [0.3, -0.8, 1.1];
        let v_u = [0.1, 0.2, -0.4];
        let v_c = [1.0, -0.3, 0.6];
        let cfg = GuidanceConfig::adamag(9.0, 0.3, 4.0);
        let b = adamag_field(&v_u, &v_c, &x, 0.2, &s, &cfg).unwrap();
        for i in 0..3 {
            assert_eq!(b.g[i], b.g_par[i] + b.g_perp[i]);
            let expect = b.omega_t * (b.g_perp[i] + cfg.beta * b.g_par[i]);
            assert!((b.g_tilde[i] - expect).abs() < 1e-13);
        }
        let gn = norm2(&b.g).sqrt() * norm2(&b.n).sqrt();
        assert!(dot(&b.g_perp, &b.n).abs() <= 1e-10 * gn);
        let pyth = norm2(&b.g_par) + norm2(&b.g_perp);
        assert!((pyth - norm2(&b.g)).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = GuidanceConfig {
            omega_min: 8.0,
            omega_ref: 7.0,
            ..GuidanceConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuidanceConfig {
            beta: -0.5,
            ..GuidanceConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GuidanceConfig {
            omega_ref: f64::NAN,
            ..GuidanceConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn conservation_residual_zero_field_and_rotation() {
        let s = Schedule::default();
        let g = GaussianMixture::isotropic(vec![0.0, 0.0], 1.0).unwrap();
        let zero = FnField::new(2, |_: &[f64], _| vec![0.0, 0.0]);
        let r = conservation_residual(
            &zero,
            &g,
            &s,
            0.5,
            &[1.0, 2.0],
            &DivMethod::FiniteDifference { step: 1e-4 },
        )
        .unwrap();
        assert_eq!(r, 0.0);
        let rot = ScoreRotationField {
            target: &g,
            schedule: &s,
            scale: 1.0,
        };
        for method in [DivMethod::Exact, DivMethod::FiniteDifference { step: 1e-4 }] {
            let r = conservation_residual(&rot, &g, &s, 0.3, &[0.7, -1.4], &method).unwrap();
            assert!(r.abs() < 1e-8, "{method:?}: {r}");
        }
        assert!(matches!(
            conservation_residual(&zero, &g, &s, 0.5, &[1.0, 2.0], &DivMethod::Exact),
            Err(LabError::Capability(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn projection_is_scale_free(
            g in proptest::collection::vec(-10.0f64..10.0, 4),
            n in proptest::collection::vec(-10.0f64..10.0, 4),
            c in 1e-3f64..1e3,
        ) {
            proptest::prop_assume!(norm2(&n).sqrt() > 1e-3);
            let (p1, q1) = decompose(&g, &n, 0.0).unwrap();
            let scaled: Vec<f64> = n.iter().map(|v| c * v).collect();
            let (p2, q2) = decompose(&g, &scaled, 0.0).unwrap();
            let tol = 1e-12 * (1.0 + norm2(&g).sqrt());
            for i in 0..4 {
                proptest::prop_assert!((p1[i] - p2[i]).abs() <= tol);
                proptest::prop_assert!((q1[i] - q2[i]).abs() <= tol);
            }
        }
    }
}
