//! Bivariate Gaussian primitives and the closed-form divergences built on them.

use std::f64::consts::{E, PI};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec2 = [f64; 2];

/// Smallest covariance eigenvalue (m²) tolerated by the fitting code.
pub const DEFAULT_EIGEN_FLOOR: f64 = 1e-6;

const SYMMETRY_TOL: f64 = 1e-12;

/// Symmetric 2×2 matrix stored by its three free entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymMat2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl SymMat2 {
    pub const IDENTITY: SymMat2 = SymMat2 { xx: 1.0, xy: 0.0, yy: 1.0 };

    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn diag(a: f64, b: f64) -> Self {
        Self::new(a, 0.0, b)
    }

    pub fn scaled_identity(c: f64) -> Self {
        Self::new(c, 0.0, c)
    }

    /// Builds from a full matrix, rejecting asymmetry beyond 1e-12.
    pub fn from_rows(m: [[f64; 2]; 2]) -> Result<Self> {
        if (m[0][1] - m[1][0]).abs() > SYMMETRY_TOL {
            return Err(Error::invalid(format!(
                "covariance is not symmetric: off-diagonals {} and {}",
                m[0][1], m[1][0]
            )));
        }
        Ok(Self::new(m[0][0], m[0][1], m[1][1]))
    }

    pub fn to_rows(self) -> [[f64; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn inverse(&self) -> Option<SymMat2> {
        let det = self.det();
        if !(det.is_finite() && det > 0.0) {
            return None;
        }
        Some(SymMat2::new(self.yy / det, -self.xy / det, self.xx / det))
    }

    /// `vᵀ M v`
    pub fn quad(&self, v: Vec2) -> f64 {
        self.xx * v[0] * v[0] + 2.0 * self.xy * v[0] * v[1] + self.yy * v[1] * v[1]
    }

    pub fn add(&self, o: &SymMat2) -> SymMat2 {
        SymMat2::new(self.xx + o.xx, self.xy + o.xy, self.yy + o.yy)
    }

    pub fn scale(&self, c: f64) -> SymMat2 {
        SymMat2::new(self.xx * c, self.xy * c, self.yy * c)
    }

    /// `tr(A B)` for symmetric A, B.
    pub fn trace_product(&self, o: &SymMat2) -> f64 {
        self.xx * o.xx + 2.0 * self.xy * o.xy + self.yy * o.yy
    }

    /// Eigenvalues `(λ₁, λ₂)` with `λ₁ ≥ λ₂`, from the characteristic polynomial.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_tr = 0.5 * self.trace();
        let half_diff = 0.5 * (self.xx - self.yy);
        let disc = half_diff.hypot(self.xy);
        let l1 = half_tr + disc;
        // The smaller root via the determinant avoids cancellation when λ₂ ≪ λ₁.
        let l2 = if l1 > 0.0 { self.det() / l1 } else { half_tr - disc };
        (l1, l2)
    }

    fn is_finite(&self) -> bool {
        self.xx.is_finite() && self.xy.is_finite() && self.yy.is_finite()
    }
}

/// One role's generating distribution: mean (m), covariance (m²) and mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian2D {
    mean: Vec2,
    cov: SymMat2,
    weight: f64,
    precision: SymMat2,
    log_det: f64,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    mean: Vec2,
    cov: [[f64; 2]; 2],
    weight: f64,
}

impl TryFrom<GaussianRepr> for Gaussian2D {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        Gaussian2D::new(r.mean, SymMat2::from_rows(r.cov)?, r.weight)
    }
}

impl From<Gaussian2D> for GaussianRepr {
    fn from(g: Gaussian2D) -> Self {
        GaussianRepr {
            mean: g.mean,
            cov: g.cov.to_rows(),
            weight: g.weight,
        }
    }
}

impl Gaussian2D {
    /// Rejects non-finite parameters, covariances that are not positive
    /// definite, and weights outside `[0, 1]`.
    pub fn new(mean: Vec2, cov: SymMat2, weight: f64) -> Result<Self> {
        if !(mean[0].is_finite() && mean[1].is_finite()) {
            return Err(Error::invalid("gaussian mean must be finite"));
        }
        if !cov.is_finite() {
            return Err(Error::invalid("gaussian covariance must be finite"));
        }
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::invalid(format!("mixture weight {weight} outside [0, 1]")));
        }
        let (_, l2) = cov.eigenvalues();
        if !(l2 > 0.0) {
            return Err(Error::invalid(format!(
                "covariance is not positive definite (smallest eigenvalue {l2})"
            )));
        }
        let precision = cov
            .inverse()
            .ok_or_else(|| Error::Degenerate("covariance determinant is not positive".into()))?;
        Ok(Self {
            mean,
            cov,
            weight,
            precision,
            log_det: cov.det().ln(),
        })
    }

    /// Like [`Gaussian2D::new`] but first lifts the diagonal so that the
    /// smallest eigenvalue is at least `floor`.
    pub fn regularized(mean: Vec2, cov: SymMat2, weight: f64, floor: f64) -> Result<Self> {
        Self::new(mean, floor_eigenvalues(cov, floor), weight)
    }

    pub fn standard() -> Self {
        Self::new([0.0, 0.0], SymMat2::IDENTITY, 1.0).expect("identity covariance is valid")
    }

    pub fn mean(&self) -> Vec2 {
        self.mean
    }

    pub fn cov(&self) -> SymMat2 {
        self.cov
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn precision(&self) -> SymMat2 {
        self.precision
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn with_weight(&self, weight: f64) -> Result<Self> {
        Self::new(self.mean, self.cov, weight)
    }

    pub fn translated(&self, by: Vec2) -> Self {
        let mut g = self.clone();
        g.mean = [self.mean[0] + by[0], self.mean[1] + by[1]];
        g
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: Vec2) -> f64 {
        self.precision.quad([x[0] - self.mean[0], x[1] - self.mean[1]])
    }

    pub fn log_pdf(&self, x: Vec2) -> f64 {
        gaussian_log_pdf(self, x)
    }

    /// One draw via the Cholesky factor of the covariance.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec2 {
        let z0: f64 = StandardNormal.sample(rng);
        let z1: f64 = StandardNormal.sample(rng);
        let l11 = self.cov.xx.sqrt();
        let l21 = self.cov.xy / l11;
        let l22 = (self.cov.yy - l21 * l21).max(0.0).sqrt();
        [self.mean[0] + l11 * z0, self.mean[1] + l21 * z0 + l22 * z1]
    }
}

/// Adds `(floor − λ₂)` to the diagonal when the smaller eigenvalue is below `floor`.
pub fn floor_eigenvalues(cov: SymMat2, floor: f64) -> SymMat2 {
    let (_, l2) = cov.eigenvalues();
    if l2 >= floor {
        cov
    } else {
        let lift = floor - l2;
        SymMat2::new(cov.xx + lift, cov.xy, cov.yy + lift)
    }
}

/// `ln 𝒩(x; μ, Σ)` in nats.
pub fn gaussian_log_pdf(g: &Gaussian2D, x: Vec2) -> f64 {
    -(2.0 * PI).ln() - 0.5 * g.log_det - 0.5 * g.mahalanobis_sq(x)
}

fn mean_diff(p: &Gaussian2D, q: &Gaussian2D) -> Vec2 {
    [q.mean[0] - p.mean[0], q.mean[1] - p.mean[1]]
}

/// Bhattacharyya distance between two Gaussians, using the midpoint covariance
/// `(Σp + Σq) / 2` in both the mean and log-determinant terms.
pub fn bhattacharyya_distance(p: &Gaussian2D, q: &Gaussian2D) -> Result<f64> {
    let mid = p.cov.add(&q.cov).scale(0.5);
    let inv = mid
        .inverse()
        .ok_or_else(|| Error::Degenerate("midpoint covariance is singular".into()))?;
    let d = mean_diff(p, q);
    let mean_term = 0.125 * inv.quad(d);
    let log_term = 0.5 * (mid.det().ln() - 0.5 * (p.log_det + q.log_det));
    // Both terms are non-negative in exact arithmetic.
    Ok((mean_term + log_term).max(0.0))
}

/// Mahalanobis distance between the two means under the midpoint covariance.
pub fn mahalanobis_between_means(p: &Gaussian2D, q: &Gaussian2D) -> Result<f64> {
    let mid = p.cov.add(&q.cov).scale(0.5);
    let inv = mid
        .inverse()
        .ok_or_else(|| Error::Degenerate("midpoint covariance is singular".into()))?;
    Ok(inv.quad(mean_diff(p, q)).sqrt())
}

/// Closed-form `KL(p ‖ q)` in nats.
pub fn kl_divergence(p: &Gaussian2D, q: &Gaussian2D) -> f64 {
    let d = mean_diff(p, q);
    let kl = 0.5 * (q.precision.trace_product(&p.cov) + q.precision.quad(d) - 2.0 + q.log_det - p.log_det);
    kl.max(0.0)
}

/// `½ ln((2πe)² det Σ)`
pub fn differential_entropy(g: &Gaussian2D) -> f64 {
    (2.0 * PI * E).ln() + 0.5 * g.log_det
}

pub fn covariance_eigenvalues(g: &Gaussian2D) -> (f64, f64) {
    g.cov.eigenvalues()
}

/// How to turn covariance eigenvalues into a field area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AreaConvention {
    /// `π / √(λ₁λ₂)`, the formula used in the formation-comparison literature.
    #[default]
    InverseRoot,
    /// `π √(λ₁λ₂)`, the area of the one-sigma ellipse.
    Ellipse,
}

pub fn role_area(g: &Gaussian2D) -> f64 {
    role_area_with(g, AreaConvention::InverseRoot)
}

pub fn role_area_with(g: &Gaussian2D, convention: AreaConvention) -> f64 {
    let (l1, l2) = covariance_eigenvalues(g);
    let root = (l1 * l2).sqrt();
    match convention {
        AreaConvention::InverseRoot => PI / root,
        AreaConvention::Ellipse => PI * root,
    }
}

/// Ratio `λ₁ / λ₂ ≥ 1`.
pub fn eigenvalue_ratio(g: &Gaussian2D) -> f64 {
    let (l1, l2) = covariance_eigenvalues(g);
    l1 / l2
}
