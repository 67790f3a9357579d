//! Time-indexed vector fields `x -> v(x, t)` over `R^D`.

use crate::schedule::Schedule;
use crate::target::GaussianMixture;

/// A deterministic vector field. Implementations must be safe to evaluate
/// from several threads at once.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// Exact divergence when the field has an analytic Jacobian.
    fn exact_divergence(&self, _x: &[f64], _t: f64) -> Option<f64> {
        None
    }
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        (**self).eval(x, t)
    }

    fn exact_divergence(&self, x: &[f64], t: f64) -> Option<f64> {
        (**self).exact_divergence(x, t)
    }
}

/// Wraps a closure as a black-box field.
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        (self.f)(x, t)
    }
}

/// `v(x) = A x + c`, time independent. `A` is row-major.
#[derive(Debug, Clone)]
pub struct AffineField {
    dim: usize,
    matrix: Vec<f64>,
    offset: Vec<f64>,
}

impl AffineField {
    pub fn new(dim: usize, matrix: Vec<f64>, offset: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), dim * dim);
        assert_eq!(offset.len(), dim);
        Self { dim, matrix, offset }
    }
}

impl VectorField for AffineField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &[f64], _t: f64) -> Vec<f64> {
        self.matrix
            .chunks(self.dim)
            .zip(&self.offset)
            .map(|(row, c)| row.iter().zip(x).map(|(a, x)| a * x).sum::<f64>() + c)
            .collect()
    }

    fn exact_divergence(&self, _x: &[f64], _t: f64) -> Option<f64> {
        Some((0..self.dim).map(|i| self.matrix[i * self.dim + i]).sum())
    }
}

/// Exact marginal velocity `a_t x - b_t s_t(x)` of an analytic target.
///
/// Panics if evaluated outside the schedule clamp.
#[derive(Debug, Clone, Copy)]
pub struct VelocityField<'a> {
    pub target: &'a GaussianMixture,
    pub schedule: &'a Schedule,
}

impl VectorField for VelocityField<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.target
            .at(self.schedule, t)
            .expect("velocity field evaluated outside schedule clamp")
            .velocity(x)
    }

    /// `D a_t - b_t Delta log p_t(x)`.
    fn exact_divergence(&self, x: &[f64], t: f64) -> Option<f64> {
        let m = self.target.at(self.schedule, t).ok()?;
        let c = m.coefficients();
        Some(self.dim() as f64 * c.a - c.b * m.laplacian_log_density(x))
    }
}

/// `g(x, t) = scale * R s_t(x)` with `R` a quarter turn in each coordinate
/// plane `(0, 1), (2, 3), ...`. Since `R` is antisymmetric and the Hessian
/// of `log p_t` is symmetric, `tr(R H) = 0`; on an isotropic Gaussian the
/// field is also orthogonal to the score, so it conserves `p_t`.
#[derive(Debug, Clone, Copy)]
pub struct ScoreRotationField<'a> {
    pub target: &'a GaussianMixture,
    pub schedule: &'a Schedule,
    pub scale: f64,
}

fn quarter_turn(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for k in (0..v.len() - v.len() % 2).step_by(2) {
        out[k] = -v[k + 1];
        out[k + 1] = v[k];
    }
    out
}

impl VectorField for ScoreRotationField<'_> {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s = self
            .target
            .at(self.schedule, t)
            .expect("rotation field evaluated outside schedule clamp")
            .score(x);
        quarter_turn(&s).into_iter().map(|v| self.scale * v).collect()
    }

    /// `scale * tr(R H)` from Hessian columns.
    fn exact_divergence(&self, x: &[f64], t: f64) -> Option<f64> {
        let m = self.target.at(self.schedule, t).ok()?;
        let d = self.dim();
        let mut e = vec![0.0; d];
        let mut tr = 0.0;
        for k in 0..d {
            e[k] = 1.0;
            let col = quarter_turn(&m.hessian_vec(x, &e));
            tr += col[k];
            e[k] = 0.0;
        }
        Some(self.scale * tr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_trace() {
        let f = AffineField::new(2, vec![1.0, 2.0, -2.0, 3.0], vec![0.5, 0.0]);
        assert_eq!(f.eval(&[1.0, 1.0], 0.0), vec![3.5, 1.0]);
        assert_eq!(f.exact_divergence(&[0.0, 0.0], 0.0), Some(4.0));
    }

    #[test]
    fn rotation_is_orthogonal_to_score_and_divergence_free() {
        let s = Schedule::default();
        let g = GaussianMixture::isotropic(vec![1.0, -2.0], 3.0).unwrap();
        let f = ScoreRotationField {
            target: &g,
            schedule: &s,
            scale: 1.0,
        };
        let x = [0.4, 2.2];
        let t = 0.35;
        let sc = g.at(&s, t).unwrap().score(&x);
        let v = f.eval(&x, t);
        assert!((v[0] * sc[0] + v[1] * sc[1]).abs() < 1e-14);
        assert!(f.exact_divergence(&x, t).unwrap().abs() < 1e-14);
    }
}
