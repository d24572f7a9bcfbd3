//! Landmark covariance propagation.
//!
//! For static landmarks each 2x2 covariance block follows the Riccati map
//! `S_next = (S^-1 + M)^-1`. In vector form, with `sigma = (S11, S12, S22)`
//! and `m = (M11, M12, M22)`, the map has the closed form
//!
//! ```text
//! g1 = (sigma1 + det(S) m3) / f      g2 = (sigma2 - det(S) m2) / f
//! g3 = (sigma3 + det(S) m1) / f
//! f  = 1 + sigma1 m1 + 2 sigma2 m2 + sigma3 m3 + det(S) det(M)
//! ```
//!
//! whose Jacobians in `sigma` and (through the information vector) in the
//! robot state are assembled block by block; they are never densified.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::scalar::{lit, Real};
use crate::sensing::{info_vector, info_vector_gradient, LandmarkSet, SensorModel};

/// Per-landmark 2x2 SPD covariance blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CovBlocks<T: Real> {
    blocks: Vec<Matrix2<T>>,
}

impl<T: Real> CovBlocks<T> {
    pub fn new(blocks: Vec<Matrix2<T>>) -> Result<Self> {
        for (j, b) in blocks.iter().enumerate() {
            if (b[(0, 1)] - b[(1, 0)]).abs() > lit::<T>(1e-12) * T::one().max(b.abs().max()) {
                return Err(Error::invalid(
                    "CovBlocks",
                    format!("block {j} is not symmetric"),
                ));
            }
            if b[(0, 0)] <= T::zero()
                || b[(1, 1)] <= T::zero()
                || b[(0, 0)] * b[(1, 1)] - b[(0, 1)] * b[(1, 0)] <= T::zero()
            {
                return Err(Error::invalid(
                    "CovBlocks",
                    format!("block {j} is not positive definite"),
                ));
            }
        }
        Ok(CovBlocks { blocks })
    }

    pub fn blocks(&self) -> &[Matrix2<T>] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Stacked per-block triples `(S11, S12, S22)` of a block-diagonal
/// covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct CovVector<T: Real> {
    data: Vec<T>,
}

impl<T: Real> CovVector<T> {
    pub fn new(data: Vec<T>) -> Result<Self> {
        if data.is_empty() || data.len() % 3 != 0 {
            return Err(Error::invalid(
                "CovVector",
                format!("length {} is not a positive multiple of 3", data.len()),
            ));
        }
        for (j, t) in data.chunks_exact(3).enumerate() {
            let (s1, s2, s3) = (t[0], t[1], t[2]);
            if !(s1 > T::zero() && s3 > T::zero() && s1 * s3 - s2 * s2 > T::zero()) {
                return Err(Error::invalid(
                    "CovVector",
                    format!("triple {j} is not positive definite"),
                ));
            }
        }
        Ok(CovVector { data })
    }

    /// Uniform blocks `scale * I` for `n` landmarks.
    pub fn isotropic(n: usize, scale: T) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * n);
        for _ in 0..n {
            data.extend_from_slice(&[scale, T::zero(), scale]);
        }
        CovVector::new(data)
    }

    pub fn n_blocks(&self) -> usize {
        self.data.len() / 3
    }

    pub fn block(&self, j: usize) -> Vector3<T> {
        Vector3::new(self.data[3 * j], self.data[3 * j + 1], self.data[3 * j + 2])
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Sum of the diagonal entries of the underlying matrix,
    /// `sum_j (sigma1 + sigma3)`.
    pub fn trace(&self) -> T {
        self.data
            .chunks_exact(3)
            .fold(T::zero(), |acc, t| acc + t[0] + t[2])
    }
}

/// Information block as the triple `(M11, M12, M22)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfoVector<T: Real>(Vector3<T>);

impl<T: Real> InfoVector<T> {
    pub fn new(m: Vector3<T>) -> Result<Self> {
        let tol = lit::<T>(-1e-12) * T::one().max(m.abs().max());
        if m.x < T::zero() || m.z < T::zero() || m.x * m.z - m.y * m.y < tol {
            return Err(Error::invalid(
                "InfoVector",
                "must be positive semidefinite",
            ));
        }
        Ok(InfoVector(m))
    }

    pub fn as_vector(&self) -> &Vector3<T> {
        &self.0
    }
}

/// `vecbl`: block-diagonal covariance to stacked triples.
pub fn vecbl<T: Real>(blocks: &CovBlocks<T>) -> CovVector<T> {
    let mut data = Vec::with_capacity(3 * blocks.len());
    for b in blocks.blocks() {
        data.extend_from_slice(&[b[(0, 0)], b[(0, 1)], b[(1, 1)]]);
    }
    CovVector { data }
}

/// Inverse of [`vecbl`].
pub fn unvecbl<T: Real>(sigma: &CovVector<T>) -> CovBlocks<T> {
    let blocks = sigma
        .data
        .chunks_exact(3)
        .map(|t| Matrix2::new(t[0], t[1], t[1], t[2]))
        .collect();
    CovBlocks { blocks }
}

/// General matrix Riccati update `A (S^-1 + M)^-1 A' + Xi`.
///
/// Retained for dynamic targets and as a reference for the vectorized path;
/// rejects non-SPD `sigma`.
pub fn riccati_general<T: Real>(
    sigma: &DMatrix<T>,
    m: &DMatrix<T>,
    a: &DMatrix<T>,
    xi: &DMatrix<T>,
) -> Result<DMatrix<T>> {
    let n = sigma.nrows();
    if sigma.ncols() != n || m.shape() != (n, n) || a.shape() != (n, n) || xi.shape() != (n, n) {
        return Err(Error::invalid("riccati_general", "dimension mismatch"));
    }
    let chol = sigma.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        what: "riccati_general.sigma",
    })?;
    let info = chol.inverse() + m;
    let inner = info.cholesky().ok_or(Error::NotPositiveDefinite {
        what: "riccati_general.information",
    })?;
    let out = a * inner.inverse() * a.transpose() + xi;
    Ok((&out + out.transpose()) * lit::<T>(0.5))
}

/// Determinant-style factor `f(sigma, m)`; positive whenever `sigma` is SPD
/// and `m` PSD.
#[inline]
fn riccati_f<T: Real>(s: &Vector3<T>, m: &Vector3<T>) -> T {
    let two = lit::<T>(2.0);
    s.y * s.y * (m.y * m.y - m.x * m.z)
        + two * s.y * m.y
        + s.z * m.z
        + s.x * (m.x * (s.z * m.z + T::one()) - s.z * m.y * m.y)
        + T::one()
}

/// One-block vectorized Riccati update `g(sigma, m)`.
///
/// Panics if `f(sigma, m) <= 0`, which signals loss of positive definiteness
/// and is impossible for an SPD `sigma` and PSD `m`.
pub fn riccati_block_vector<T: Real>(sigma: &Vector3<T>, m: &Vector3<T>) -> Vector3<T> {
    let f = riccati_f(sigma, m);
    assert!(
        f > T::zero(),
        "Riccati block update lost positive definiteness (f = {f:?})"
    );
    let det = sigma.x * sigma.z - sigma.y * sigma.y;
    Vector3::new(
        (sigma.x + det * m.z) / f,
        (sigma.y - det * m.y) / f,
        (sigma.z + det * m.x) / f,
    )
}

/// Propagate the full stacked covariance vector through one step, with the
/// information blocks evaluated at the planning-time landmark estimates.
pub fn riccati_step<T: Real>(
    sigma: &CovVector<T>,
    x_next: &Pose2<T>,
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
) -> CovVector<T> {
    assert_eq!(sigma.n_blocks(), landmarks_hat.len());
    let mut data = Vec::with_capacity(sigma.data.len());
    for j in 0..sigma.n_blocks() {
        let m = info_vector(x_next, landmarks_hat.position(j), sensor);
        let next = riccati_block_vector(&sigma.block(j), &m);
        data.extend_from_slice(&[next.x, next.y, next.z]);
    }
    CovVector { data }
}

/// Per-block Jacobians of the vectorized Riccati update.
///
/// `f_blocks[j]` is `dg/dsigma` of block `j` (the full `F` is their block
/// diagonal); `g_blocks[j]` is `dg/dx` of block `j` (the full `G` stacks
/// them into a `3 n_l x 3` matrix).
#[derive(Clone, Debug)]
pub struct RiccatiJacobians<T: Real> {
    pub f_blocks: Vec<Matrix3<T>>,
    pub g_blocks: Vec<Matrix3<T>>,
    /// Number of blocks whose signed-distance gradient hit a kink.
    pub kink_events: usize,
}

/// Jacobians `dg/dsigma` and `dg/dm` of one block.
pub(crate) fn block_jacobians<T: Real>(
    sigma: &Vector3<T>,
    m: &Vector3<T>,
) -> (Matrix3<T>, Matrix3<T>) {
    let two = lit::<T>(2.0);
    let f = riccati_f(sigma, m);
    assert!(f > T::zero(), "Riccati Jacobian at non-positive f");
    let f_inv = T::one() / f;
    let det_s = sigma.x * sigma.z - sigma.y * sigma.y;
    let det_m = m.x * m.z - m.y * m.y;
    let g = riccati_block_vector(sigma, m);

    let df_dsigma = Vector3::new(
        m.x + sigma.z * det_m,
        two * m.y - two * sigma.y * det_m,
        m.z + sigma.x * det_m,
    );
    let rows = [
        Vector3::new(T::one() + sigma.z * m.z, -two * sigma.y * m.z, sigma.x * m.z),
        Vector3::new(-sigma.z * m.y, T::one() + two * sigma.y * m.y, -sigma.x * m.y),
        Vector3::new(sigma.z * m.x, -two * sigma.y * m.x, T::one() + sigma.x * m.x),
    ];
    let mut dg_dsigma = Matrix3::zeros();
    for i in 0..3 {
        let row = (rows[i] - df_dsigma * g[i]) * f_inv;
        dg_dsigma.set_row(i, &row.transpose());
    }

    let df_dm = Vector3::new(
        sigma.x + det_s * m.z,
        two * sigma.y - two * det_s * m.y,
        sigma.z + det_s * m.x,
    );
    let tilde = [
        Vector3::new(T::zero(), T::zero(), T::one()),
        Vector3::new(T::zero(), -T::one(), T::zero()),
        Vector3::new(T::one(), T::zero(), T::zero()),
    ];
    let mut dg_dm = Matrix3::zeros();
    for i in 0..3 {
        let row = (tilde[i] * det_s - df_dm * g[i]) * f_inv;
        dg_dm.set_row(i, &row.transpose());
    }

    (dg_dsigma, dg_dm)
}

/// Assemble `F` and `G` for every landmark block at `(sigma_k, x_{k+1})`.
pub fn riccati_jacobians<T: Real>(
    sigma: &CovVector<T>,
    x_next: &Pose2<T>,
    landmarks_hat: &LandmarkSet<T>,
    sensor: &SensorModel<T>,
) -> RiccatiJacobians<T> {
    assert_eq!(sigma.n_blocks(), landmarks_hat.len());
    let n = sigma.n_blocks();
    let mut f_blocks = Vec::with_capacity(n);
    let mut g_blocks = Vec::with_capacity(n);
    let mut kink_events = 0;
    for j in 0..n {
        let y = landmarks_hat.position(j);
        let m = info_vector(x_next, y, sensor);
        let (dg_dsigma, dg_dm) = block_jacobians(&sigma.block(j), &m);
        let (dm_dx, kink) = info_vector_gradient(x_next, y, sensor);
        if kink {
            kink_events += 1;
        }
        f_blocks.push(dg_dsigma);
        g_blocks.push(dg_dm * dm_dx);
    }
    RiccatiJacobians {
        f_blocks,
        g_blocks,
        kink_events,
    }
}
