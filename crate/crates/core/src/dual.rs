//! Forward-mode dual numbers and a second, independent route to the exact
//! divergence of the guidance components: the whole field (mixture
//! log-sum-exp, score, velocities, projection) is evaluated in dual
//! arithmetic and the Jacobian diagonal read off one axis at a time.

use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::divergence::GuidanceDivergence;
use crate::error::{check_len, Result};
use crate::guidance::{normal_threshold, GuidanceConfig, GuidanceRule, NormalSource};
use crate::schedule::Schedule;
use crate::target::{Marginal, TargetPair};

/// `re + eps du` with `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub du: f64,
}

impl Dual {
    pub const fn new(re: f64, du: f64) -> Self {
        Self { re, du }
    }

    pub const fn constant(re: f64) -> Self {
        Self { re, du: 0.0 }
    }

    pub fn exp(self) -> Self {
        let e = self.re.exp();
        Self::new(e, e * self.du)
    }

    pub fn ln(self) -> Self {
        Self::new(self.re.ln(), self.du / self.re)
    }

    pub fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        Self::new(r, self.du / (2.0 * r))
    }

    pub fn scale(self, c: f64) -> Self {
        Self::new(c * self.re, c * self.du)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.du + o.du)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.du - o.du)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.du + self.du * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.re / o.re, (self.du * o.re - self.re * o.du) / (o.re * o.re))
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.du)
    }
}

fn ddot(a: &[Dual], b: &[Dual]) -> Dual {
    a.iter().zip(b).fold(Dual::default(), |acc, (a, b)| acc + *a * *b)
}

/// Applies a fixed real matrix (or its transpose) to a dual vector.
fn apply(m: Option<&DMatrix<f64>>, v: &[Dual], transpose: bool) -> Vec<Dual> {
    let Some(m) = m else {
        return v.to_vec();
    };
    let d = v.len();
    (0..d)
        .map(|i| {
            (0..d).fold(Dual::default(), |acc, k| {
                let w = if transpose { m[(k, i)] } else { m[(i, k)] };
                acc + v[k].scale(w)
            })
        })
        .collect()
}

/// Mixture score of a marginal at a dual point.
pub fn dual_score(m: &Marginal<'_>, x: &[Dual]) -> Vec<Dual> {
    let alpha = m.path().alpha;
    let k = m.num_components();
    let mut logs = Vec::with_capacity(k);
    let mut comp_scores = Vec::with_capacity(k);
    for j in 0..k {
        let (mean, scales, log_norm, vecs) = m.component_parts(j);
        let diff: Vec<Dual> = x.iter().zip(mean).map(|(x, mu)| *x - Dual::constant(alpha * mu)).collect();
        let z = apply(vecs, &diff, true);
        let quad = z
            .iter()
            .zip(scales)
            .fold(Dual::default(), |acc, (z, c)| acc + (*z * *z).scale(1.0 / c));
        logs.push(Dual::constant(log_norm) - quad.scale(0.5));
        let w: Vec<Dual> = z.iter().zip(scales).map(|(z, c)| z.scale(-1.0 / c)).collect();
        comp_scores.push(apply(vecs, &w, false));
    }
    let max = logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max);
    let total = logs
        .iter()
        .fold(Dual::default(), |acc, l| acc + (*l - Dual::constant(max)).exp());
    let log_p = Dual::constant(max) + total.ln();
    let mut s = vec![Dual::default(); x.len()];
    for (l, sj) in logs.iter().zip(&comp_scores) {
        let r = (*l - log_p).exp();
        for (si, v) in s.iter_mut().zip(sj) {
            *si = *si + r * *v;
        }
    }
    s
}

fn dual_velocity(m: &Marginal<'_>, x: &[Dual]) -> Vec<Dual> {
    let c = m.coefficients();
    dual_score(m, x)
        .into_iter()
        .zip(x)
        .map(|(s, x)| x.scale(c.a) - s.scale(c.b))
        .collect()
}

struct DualBreakdown {
    g: Vec<Dual>,
    g_par: Vec<Dual>,
    g_tilde: Vec<Dual>,
}

fn dual_breakdown(
    mc: &Marginal<'_>,
    mu: &Marginal<'_>,
    config: &GuidanceConfig,
    omega_t: f64,
    eps_n: f64,
    x: &[Dual],
) -> DualBreakdown {
    let a = mc.coefficients().a;
    let v_u = dual_velocity(mu, x);
    let v_c = dual_velocity(mc, x);
    let g: Vec<Dual> = v_c.iter().zip(&v_u).map(|(c, u)| *c - *u).collect();
    let src = match config.normal_source {
        NormalSource::Conditional => &v_c,
        NormalSource::Unconditional => &v_u,
    };
    let n: Vec<Dual> = x.iter().zip(src).map(|(x, v)| x.scale(a) - *v).collect();
    let nn = ddot(&n, &n);
    let g_par: Vec<Dual> = if nn.re.sqrt() > eps_n {
        let phi = ddot(&g, &n) / nn;
        n.iter().map(|n| phi * *n).collect()
    } else {
        vec![Dual::default(); x.len()]
    };
    let g_tilde = match config.rule {
        GuidanceRule::Cfg => g.iter().map(|g| g.scale(omega_t)).collect(),
        GuidanceRule::AdaMaG => g
            .iter()
            .zip(&g_par)
            .map(|(g, p)| (*g + p.scale(config.beta - 1.0)).scale(omega_t))
            .collect(),
    };
    DualBreakdown { g, g_par, g_tilde }
}

/// Exact divergences of the guidance components by forward-mode
/// differentiation, `D` dual passes.
pub fn forward_divergence(
    pair: &TargetPair,
    schedule: &Schedule,
    config: &GuidanceConfig,
    t: f64,
    x: &[f64],
) -> Result<GuidanceDivergence> {
    check_len(pair.dim(), x.len())?;
    config.validate()?;
    let mc = pair.conditional.at(schedule, t)?;
    let mu = pair.unconditional.at(schedule, t)?;
    let omega_t = config.strength(t);
    let eps_n = normal_threshold(x);
    let mut out = GuidanceDivergence {
        g: 0.0,
        g_par: 0.0,
        g_perp: 0.0,
        g_tilde: 0.0,
        omega_t,
    };
    let mut xd: Vec<Dual> = x.iter().map(|v| Dual::constant(*v)).collect();
    for i in 0..x.len() {
        xd[i].du = 1.0;
        let b = dual_breakdown(&mc, &mu, config, omega_t, eps_n, &xd);
        out.g += b.g[i].du;
        out.g_par += b.g_par[i].du;
        out.g_tilde += b.g_tilde[i].du;
        xd[i].du = 0.0;
    }
    out.g_perp = out.g - out.g_par;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::guidance_divergence_exact;
    use crate::target::{ComponentSpec, GaussianMixture, MixtureSpec};

    #[test]
    fn dual_arithmetic_rules() {
        let x = Dual::new(2.0, 1.0);
        let y = x * x * x - x.scale(4.0);
        assert_eq!(y, Dual::new(0.0, 8.0));
        let q = Dual::constant(1.0) / x;
        assert_eq!(q, Dual::new(0.5, -0.25));
        let e = x.ln().exp();
        assert!((e.re - 2.0).abs() < 1e-15 && (e.du - 1.0).abs() < 1e-15);
        assert!((x.sqrt().du - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn dual_score_matches_score_and_hessian() {
        let s = Schedule::default();
        let g = GaussianMixture::new(MixtureSpec {
            dim: 2,
            components: vec![
                ComponentSpec {
                    weight: 0.3,
                    mean: vec![1.0, -1.0],
                    cov_diag: None,
                    cov_full: Some(vec![vec![0.8, 0.3], vec![0.3, 0.5]]),
                },
                ComponentSpec {
                    weight: 0.7,
                    mean: vec![-0.5, 0.2],
                    cov_diag: Some(vec![0.2, 1.4]),
                    cov_full: None,
                },
            ],
        })
        .unwrap();
        let m = g.at(&s, 0.6).unwrap();
        let x = [0.3, -0.4];
        let v = [0.7, -1.2];
        let xd: Vec<Dual> = x.iter().zip(&v).map(|(x, v)| Dual::new(*x, *v)).collect();
        let sd = dual_score(&m, &xd);
        let sc = m.score(&x);
        let hv = m.hessian_vec(&x, &v);
        for i in 0..2 {
            assert!((sd[i].re - sc[i]).abs() < 1e-13);
            assert!((sd[i].du - hv[i]).abs() < 1e-11 * (1.0 + hv[i].abs()));
        }
    }

    #[test]
    fn forward_route_agrees_with_closed_form() {
        let s = Schedule::default();
        let c = GaussianMixture::new(MixtureSpec::isotropic(
            &[0.5, 0.5],
            &[vec![1.0, 0.0, 0.5, -0.2], vec![0.0, 1.0, -0.4, 0.3]],
            &[0.2, 0.4],
        ))
        .unwrap();
        let u = GaussianMixture::isotropic(vec![0.0; 4], 1.0).unwrap();
        let pair = TargetPair::new(c, u).unwrap();
        let x = [0.4, -0.3, 0.2, 0.9];
        for beta in [0.0, 0.1, 1.0, 5.0, 20.0] {
            for source in [NormalSource::Conditional, NormalSource::Unconditional] {
                let cfg = GuidanceConfig {
                    normal_source: source,
                    ..GuidanceConfig::adamag(8.0, beta, 4.0)
                };
                for t in [0.2, 0.6, 0.97] {
                    let a = guidance_divergence_exact(&pair, &s, &cfg, t, &x).unwrap();
                    let b = forward_divergence(&pair, &s, &cfg, t, &x).unwrap();
                    for (p, q) in [(a.g, b.g), (a.g_par, b.g_par), (a.g_tilde, b.g_tilde)] {
                        assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0), "beta {beta} t {t}: {p} vs {q}");
                    }
                }
            }
        }
    }
}
