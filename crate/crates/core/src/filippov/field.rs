use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which smooth branch of the piecewise drift to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn of(x1: f64) -> Option<Side> {
        if x1 < 0.0 {
            Some(Side::Left)
        } else if x1 > 0.0 {
            Some(Side::Right)
        } else {
            None
        }
    }
}

/// A pair of smooth fields, one per half-space `x₁ < 0` / `x₁ > 0`.
///
/// Each branch must be evaluable on the closure of its half-space; integrators also
/// evaluate it slightly beyond the manifold inside a single step.
pub trait PiecewiseField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, side: Side, x: &[f64], out: &mut [f64]);

    /// Jacobian of one branch. The default uses central differences with step 1e-6.
    fn jacobian(&self, side: Side, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let h = 1e-6;
        let mut jac = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for j in 0..n {
            xp[j] = x[j] + h;
            self.eval(side, &xp, &mut fp);
            xp[j] = x[j] - h;
            self.eval(side, &xp, &mut fm);
            xp[j] = x[j];
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    /// Whether `jacobian` is exact and constant (affine branches).
    fn is_affine(&self) -> bool {
        false
    }
}

/// `φ⁽ᴸ⁾(x) = A_L x + b_L`, `φ⁽ᴿ⁾(x) = A_R x + b_R`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub a_left: DMatrix<f64>,
    pub b_left: DVector<f64>,
    pub a_right: DMatrix<f64>,
    pub b_right: DVector<f64>,
}

impl AffineField {
    pub fn new(
        a_left: DMatrix<f64>,
        b_left: DVector<f64>,
        a_right: DMatrix<f64>,
        b_right: DVector<f64>,
    ) -> Result<Self> {
        let n = a_left.nrows();
        let ok = n >= 2
            && a_left.is_square()
            && a_right.shape() == (n, n)
            && b_left.len() == n
            && b_right.len() == n;
        if !ok {
            return Err(Error::InvalidInput("affine field dimensions disagree".into()));
        }
        Ok(Self { a_left, b_left, a_right, b_right })
    }

    fn parts(&self, side: Side) -> (&DMatrix<f64>, &DVector<f64>) {
        match side {
            Side::Left => (&self.a_left, &self.b_left),
            Side::Right => (&self.a_right, &self.b_right),
        }
    }
}

impl PiecewiseField for AffineField {
    fn dim(&self) -> usize {
        self.b_left.len()
    }

    fn eval(&self, side: Side, x: &[f64], out: &mut [f64]) {
        let (a, b) = self.parts(side);
        let n = b.len();
        for i in 0..n {
            let mut s = b[i];
            for j in 0..n {
                s += a[(i, j)] * x[j];
            }
            out[i] = s;
        }
    }

    fn jacobian(&self, side: Side, _x: &[f64]) -> DMatrix<f64> {
        self.parts(side).0.clone()
    }

    fn is_affine(&self) -> bool {
        true
    }
}

/// Blocks of `DDᵀ = [[α, βᵀ], [β, γ]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePartition {
    pub alpha: f64,
    pub beta: DVector<f64>,
    pub gamma: DMatrix<f64>,
}

impl NoisePartition {
    pub fn assemble(&self) -> DMatrix<f64> {
        let n = self.beta.len() + 1;
        let mut m = DMatrix::zeros(n, n);
        m[(0, 0)] = self.alpha;
        for i in 1..n {
            m[(i, 0)] = self.beta[i - 1];
            m[(0, i)] = self.beta[i - 1];
            for j in 1..n {
                m[(i, j)] = self.gamma[(i - 1, j - 1)];
            }
        }
        m
    }
}

/// `α = (DDᵀ)₁₁`, `β` the first-column tail, `γ` the trailing block.
pub fn noise_partition(d: &DMatrix<f64>) -> NoisePartition {
    let dd = d * d.transpose();
    let n = dd.nrows();
    NoisePartition {
        alpha: dd[(0, 0)],
        beta: DVector::from_fn(n - 1, |i, _| dd[(i + 1, 0)]),
        gamma: dd.view((1, 1), (n - 1, n - 1)).into_owned(),
    }
}

/// Local expansion of both branches about a point `(0, y)` of the manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidingCoeffs {
    pub a_l: f64,
    pub a_r: f64,
    pub b_l: DVector<f64>,
    pub b_r: DVector<f64>,
    pub c_l: f64,
    pub c_r: f64,
    pub d_l: DVector<f64>,
    pub d_r: DVector<f64>,
}

impl SlidingCoeffs {
    pub fn in_stable_region(&self) -> bool {
        self.a_l > 0.0 && self.a_r > 0.0
    }
}

/// Filippov's sliding field `Ω = (1 − μ)φ_L + μφ_R` and the weight `μ` of the right branch.
pub fn filippov_field(c: &SlidingCoeffs) -> Result<(DVector<f64>, f64)> {
    if !c.in_stable_region() {
        return Err(Error::OutsideSlidingRegion { a_l: c.a_l, a_r: c.a_r });
    }
    let s = c.a_l + c.a_r;
    let omega = (&c.b_r * c.a_l + &c.b_l * c.a_r) / s;
    Ok((omega, c.a_l / s))
}

/// Piecewise-smooth SDE `dx = φ(x) dt + √ε D dW` switching on `x₁ = 0`.
#[derive(Clone)]
pub struct FilippovSde {
    field: Arc<dyn PiecewiseField>,
    d: DMatrix<f64>,
}

impl fmt::Debug for FilippovSde {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FilippovSde").field("dim", &self.dim()).field("d", &self.d).finish()
    }
}

impl FilippovSde {
    pub fn new(field: Arc<dyn PiecewiseField>, d: DMatrix<f64>) -> Result<Self> {
        let n = field.dim();
        if n < 2 {
            return Err(Error::InvalidInput("dimension must be at least 2".into()));
        }
        if d.shape() != (n, n) {
            return Err(Error::InvalidInput(format!("diffusion must be {n}x{n}")));
        }
        Ok(Self { field, d })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn field(&self) -> &Arc<dyn PiecewiseField> {
        &self.field
    }

    /// Same drift, different diffusion.
    pub fn with_diffusion(&self, d: DMatrix<f64>) -> Result<Self> {
        Self::new(self.field.clone(), d)
    }

    pub fn noise_partition(&self) -> NoisePartition {
        noise_partition(&self.d)
    }

    pub fn dd_t(&self) -> DMatrix<f64> {
        &self.d * self.d.transpose()
    }

    /// Drift at `x`; a side must be supplied when `x₁ = 0`.
    pub fn eval_drift(&self, x: &[f64], side: Option<Side>) -> Result<DVector<f64>> {
        let side = match side.or_else(|| Side::of(x[0])) {
            Some(s) => s,
            None => return Err(Error::SideRequired),
        };
        Ok(self.drift(side, x))
    }

    pub fn drift(&self, side: Side, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.field.eval(side, x, out.as_mut_slice());
        out
    }

    #[inline]
    pub fn drift_into(&self, side: Side, x: &[f64], out: &mut [f64]) {
        self.field.eval(side, x, out);
    }

    pub fn jacobian(&self, side: Side, x: &[f64]) -> DMatrix<f64> {
        self.field.jacobian(side, x)
    }

    /// `ẍ = J(x) φ(x)` along the smooth flow of one branch.
    pub fn acceleration(&self, side: Side, x: &[f64]) -> DVector<f64> {
        self.jacobian(side, x) * self.drift(side, x)
    }

    fn manifold_point(y: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(y.len() + 1);
        x.push(0.0);
        x.extend_from_slice(y);
        x
    }

    pub fn sliding_coeffs(&self, y: &[f64]) -> SlidingCoeffs {
        let x = Self::manifold_point(y);
        let n = self.dim();
        let fl = self.drift(Side::Left, &x);
        let fr = self.drift(Side::Right, &x);
        let jl = self.jacobian(Side::Left, &x);
        let jr = self.jacobian(Side::Right, &x);
        SlidingCoeffs {
            a_l: fl[0],
            a_r: -fr[0],
            b_l: fl.rows(1, n - 1).into_owned(),
            b_r: fr.rows(1, n - 1).into_owned(),
            c_l: jl[(0, 0)],
            c_r: jr[(0, 0)],
            d_l: jl.view((1, 0), (n - 1, 1)).column(0).into_owned(),
            d_r: jr.view((1, 0), (n - 1, 1)).column(0).into_owned(),
        }
    }

    /// Sliding field at `y`, erroring outside the stable sliding region.
    pub fn sliding_field(&self, y: &[f64]) -> Result<DVector<f64>> {
        filippov_field(&self.sliding_coeffs(y)).map(|(o, _)| o)
    }

    /// `D_y Ω` from the branch Jacobians at `(0, y)`.
    pub fn sliding_jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>> {
        let c = self.sliding_coeffs(y);
        if !c.in_stable_region() {
            return Err(Error::OutsideSlidingRegion { a_l: c.a_l, a_r: c.a_r });
        }
        let x = Self::manifold_point(y);
        let n = self.dim();
        let m = n - 1;
        let jl = self.jacobian(Side::Left, &x);
        let jr = self.jacobian(Side::Right, &x);
        let s = c.a_l + c.a_r;
        let num = &c.b_r * c.a_l + &c.b_l * c.a_r;
        let mut out = DMatrix::zeros(m, m);
        for k in 0..m {
            let dal = jl[(0, k + 1)];
            let dar = -jr[(0, k + 1)];
            for i in 0..m {
                let dbl = jl[(i + 1, k + 1)];
                let dbr = jr[(i + 1, k + 1)];
                let dnum = dal * c.b_r[i] + c.a_l * dbr + dar * c.b_l[i] + c.a_r * dbl;
                out[(i, k)] = (dnum * s - num[i] * (dal + dar)) / (s * s);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(al: f64, ar: f64) -> FilippovSde {
        let a = DMatrix::zeros(2, 2);
        let f = AffineField::new(
            a.clone(),
            DVector::from_vec(vec![al, 0.0]),
            a,
            DVector::from_vec(vec![-ar, 1.0]),
        )
        .unwrap();
        FilippovSde::new(Arc::new(f), DMatrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn side_required_on_manifold() {
        let s = toy(1.0, 1.0);
        assert_eq!(s.eval_drift(&[0.0, 0.3], None), Err(Error::SideRequired));
        assert!(s.eval_drift(&[0.0, 0.3], Some(Side::Left)).is_ok());
    }

    #[test]
    fn linear_decay_drift_is_minus_x() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let z = DVector::zeros(2);
        let f = AffineField::new(a.clone(), z.clone(), a, z).unwrap();
        let s = FilippovSde::new(Arc::new(f), DMatrix::zeros(2, 2)).unwrap();
        let d = s.eval_drift(&[-0.5, 2.0], None).unwrap();
        assert_eq!(d.as_slice(), &[0.5, -2.0]);
    }

    #[test]
    fn symmetric_toy_coeffs() {
        let c = toy(1.0, 1.0).sliding_coeffs(&[0.0]);
        assert_eq!((c.a_l, c.a_r), (1.0, 1.0));
        assert_eq!(filippov_field(&c).unwrap().1, 0.5);
    }

    #[test]
    fn omega_direct_substitution() {
        let c = SlidingCoeffs {
            a_l: 3.0,
            a_r: 1.0,
            b_l: DVector::from_vec(vec![0.0]),
            b_r: DVector::from_vec(vec![4.0]),
            c_l: 0.0,
            c_r: 0.0,
            d_l: DVector::zeros(1),
            d_r: DVector::zeros(1),
        };
        let (o, mu) = filippov_field(&c).unwrap();
        assert_eq!(o[0], 3.0);
        assert_eq!(mu, 0.75);
    }

    #[test]
    fn outside_region_is_rejected() {
        let c = toy(1.0, -0.5).sliding_coeffs(&[0.0]);
        assert!(matches!(filippov_field(&c), Err(Error::OutsideSlidingRegion { .. })));
    }

    #[test]
    fn partition_of_identity_and_e1() {
        let p = noise_partition(&DMatrix::identity(3, 3));
        assert_eq!(p.alpha, 1.0);
        assert_eq!(p.beta, DVector::zeros(2));
        assert_eq!(p.gamma, DMatrix::identity(2, 2));
        let mut e1 = DMatrix::zeros(3, 3);
        e1[(0, 0)] = 1.0;
        let p = noise_partition(&e1);
        assert_eq!((p.alpha, p.beta.norm(), p.gamma.norm()), (1.0, 0.0, 0.0));
    }

    #[test]
    fn default_jacobian_matches_affine() {
        struct Wrap(AffineField);
        impl PiecewiseField for Wrap {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn eval(&self, side: Side, x: &[f64], out: &mut [f64]) {
                self.0.eval(side, x, out)
            }
        }
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let f = AffineField::new(a.clone(), b.clone(), a.clone(), b).unwrap();
        let j = Wrap(f).jacobian(Side::Left, &[0.3, -0.2]);
        assert!((j - a).abs().max() < 1e-8);
    }
}
