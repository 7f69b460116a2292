//! Analytic reference systems with exact potentials, forces and Boltzmann
//! samplers.
//!
//! Müller–Brown uses the standard four-term parameterization
//! `U(x, y) = sum_k A_k exp(a_k (x - x0_k)^2 + b_k (x - x0_k)(y - y0_k) + c_k (y - y0_k)^2)`
//! with
//!
//! | k | A    | a    | b  | c    | x0   | y0  |
//! |---|------|------|----|------|------|-----|
//! | 1 | -200 | -1   | 0  | -10  | 1    | 0   |
//! | 2 | -100 | -1   | 0  | -10  | 0    | 0.5 |
//! | 3 | -170 | -6.5 | 11 | -6.5 | -0.5 | 1.5 |
//! | 4 | 15   | 0.7  | 0.6| 0.7  | -1   | 1   |

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, DffError, Result};
use crate::schedule::NoiseSchedule;

const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_LA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_LB: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_LC: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];
/// Lower bound on the Müller–Brown potential (global minimum is about -146.70).
pub const MB_ENERGY_FLOOR: f64 = -147.0;
/// Rejection box `[xmin, xmax, ymin, ymax]`; outside mass < 1e-6 for kT <= [`MB_MAX_KT`].
pub const MB_BOX: [f64; 4] = [-2.5, 1.8, -1.0, 3.0];
pub const MB_MAX_KT: f64 = 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExactSampler {
    DirectGaussian,
    Rejection,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SystemKind {
    /// `U = kT |x|^2 / (2 sigma^2)`, Boltzmann density `N(0, sigma^2 I)`.
    GaussianWell { dim: usize, sigma: f64 },
    /// `U = a (x^2 - 1)^2`.
    DoubleWell { a: f64 },
    MullerBrown,
    /// Bead chain with bonds `spring/2 |r_{j+1} - r_j|^2` in 3-D, centre of
    /// mass removed. The CG map keeps every `stride`-th bead.
    HarmonicChain {
        n_fine: usize,
        spring: f64,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySystem {
    pub name: String,
    pub kind: SystemKind,
    pub kt: f64,
}

impl ToySystem {
    pub fn gaussian_well(dim: usize, sigma: f64, kt: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) || !(sigma > 0.0) {
            return Err(invalid("gaussian well needs dim in 1..=3 and sigma > 0"));
        }
        Self::checked(format!("gaussian{dim}d"), SystemKind::GaussianWell { dim, sigma }, kt)
    }

    pub fn double_well(a: f64, kt: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(invalid("double well needs a > 0"));
        }
        Self::checked("double-well".into(), SystemKind::DoubleWell { a }, kt)
    }

    pub fn muller_brown(kt: f64) -> Result<Self> {
        if kt > MB_MAX_KT {
            return Err(invalid(format!(
                "Müller–Brown sampling box only covers kT <= {MB_MAX_KT}"
            )));
        }
        Self::checked("muller-brown".into(), SystemKind::MullerBrown, kt)
    }

    pub fn harmonic_chain(n_fine: usize, spring: f64, stride: usize, kt: f64) -> Result<Self> {
        if n_fine < 2 || stride == 0 || !(n_fine - 1).is_multiple_of(stride) || !(spring > 0.0) {
            return Err(invalid(
                "harmonic chain needs n_fine >= 2, spring > 0 and stride dividing n_fine - 1",
            ));
        }
        Self::checked(
            "harmonic-chain".into(),
            SystemKind::HarmonicChain {
                n_fine,
                spring,
                stride,
            },
            kt,
        )
    }

    fn checked(name: String, kind: SystemKind, kt: f64) -> Result<Self> {
        if !(kt > 0.0 && kt.is_finite()) {
            return Err(invalid(format!("kT must be positive, got {kt}")));
        }
        Ok(Self { name, kind, kt })
    }

    /// `(n_beads, dim)` of a fine-grained frame.
    pub fn frame_shape(&self) -> (usize, usize) {
        match self.kind {
            SystemKind::GaussianWell { dim, .. } => (1, dim),
            SystemKind::DoubleWell { .. } => (1, 1),
            SystemKind::MullerBrown => (1, 2),
            SystemKind::HarmonicChain { n_fine, .. } => (n_fine, 3),
        }
    }

    pub fn dim_total(&self) -> usize {
        let (n, d) = self.frame_shape();
        n * d
    }

    pub fn exact_sampler(&self) -> ExactSampler {
        match self.kind {
            SystemKind::GaussianWell { .. } | SystemKind::HarmonicChain { .. } => {
                ExactSampler::DirectGaussian
            }
            SystemKind::DoubleWell { .. } | SystemKind::MullerBrown => ExactSampler::Rejection,
        }
    }

    fn check_len(&self, r: &[f64]) -> Result<()> {
        if r.len() != self.dim_total() {
            return Err(invalid(format!(
                "{} expects {} coordinates, got {}",
                self.name,
                self.dim_total(),
                r.len()
            )));
        }
        Ok(())
    }

    pub fn potential(&self, r: &[f64]) -> Result<f64> {
        self.check_len(r)?;
        Ok(match self.kind {
            SystemKind::GaussianWell { sigma, .. } => {
                self.kt * r.iter().map(|v| v * v).sum::<f64>() / (2.0 * sigma * sigma)
            }
            SystemKind::DoubleWell { a } => a * (r[0] * r[0] - 1.0).powi(2),
            SystemKind::MullerBrown => muller_brown_terms(r[0], r[1]).0,
            SystemKind::HarmonicChain { spring, .. } => {
                0.5 * spring
                    * r.chunks(3)
                        .zip(r.chunks(3).skip(1))
                        .map(|(p, q)| (0..3).map(|c| (q[c] - p[c]).powi(2)).sum::<f64>())
                        .sum::<f64>()
            }
        })
    }

    /// Exact force `-grad U`.
    pub fn force(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check_len(r)?;
        Ok(match self.kind {
            SystemKind::GaussianWell { sigma, .. } => {
                r.iter().map(|v| -self.kt * v / (sigma * sigma)).collect()
            }
            SystemKind::DoubleWell { a } => vec![-4.0 * a * r[0] * (r[0] * r[0] - 1.0)],
            SystemKind::MullerBrown => {
                let (_, gx, gy) = muller_brown_terms(r[0], r[1]);
                vec![-gx, -gy]
            }
            SystemKind::HarmonicChain { n_fine, spring, .. } => chain_force(r, n_fine, spring, 1),
        })
    }

    /// I.i.d. exact samples, `n * dim_total` values.
    pub fn boltzmann_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n * self.dim_total());
        match self.kind {
            SystemKind::GaussianWell { dim, sigma } => {
                for _ in 0..n * dim {
                    let z: f64 = StandardNormal.sample(rng);
                    out.push(sigma * z);
                }
            }
            SystemKind::DoubleWell { a } => {
                let half = self.double_well_half_width(a);
                while out.len() < n {
                    let x = rng.random_range(-half..half);
                    let u = a * (x * x - 1.0).powi(2);
                    let ratio = (-u / self.kt).exp();
                    if ratio > 1.0 {
                        return Err(DffError::Numerical(format!(
                            "double-well envelope violated at x = {x}"
                        )));
                    }
                    if rng.random::<f64>() < ratio {
                        out.push(x);
                    }
                }
            }
            SystemKind::MullerBrown => {
                let [x0, x1, y0, y1] = MB_BOX;
                while out.len() < 2 * n {
                    let x = rng.random_range(x0..x1);
                    let y = rng.random_range(y0..y1);
                    let u = muller_brown_terms(x, y).0;
                    let ratio = (-(u - MB_ENERGY_FLOOR) / self.kt).exp();
                    if ratio > 1.0 {
                        return Err(DffError::Numerical(format!(
                            "Müller–Brown envelope violated at ({x}, {y})"
                        )));
                    }
                    if rng.random::<f64>() < ratio {
                        out.push(x);
                        out.push(y);
                    }
                }
            }
            SystemKind::HarmonicChain { n_fine, spring, .. } => {
                let bond_sd = (self.kt / spring).sqrt();
                let mut frame = vec![0.0; n_fine * 3];
                for _ in 0..n {
                    for j in 1..n_fine {
                        for c in 0..3 {
                            let z: f64 = StandardNormal.sample(rng);
                            frame[j * 3 + c] = frame[(j - 1) * 3 + c] + bond_sd * z;
                        }
                    }
                    remove_center(&mut frame, 3);
                    out.extend_from_slice(&frame);
                    frame.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        Ok(out)
    }

    /// Half-width of the double-well rejection interval: `U / kT >= 40` at the edge.
    pub fn double_well_half_width(&self, a: f64) -> f64 {
        (1.0 + (40.0 * self.kt / a).sqrt()).sqrt()
    }

    /// Covariance of the Boltzmann distribution for the Gaussian family.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        match self.kind {
            SystemKind::GaussianWell { dim, sigma } => {
                Ok(DMatrix::identity(dim, dim) * (sigma * sigma))
            }
            SystemKind::HarmonicChain { n_fine, spring, .. } => {
                Ok(chain_covariance(n_fine, self.kt / spring))
            }
            _ => Err(DffError::Unsupported(format!(
                "{} is not a Gaussian system",
                self.name
            ))),
        }
    }

    /// CG map for systems that have one (the chain).
    pub fn cg_map(&self) -> Option<CGMap> {
        match self.kind {
            SystemKind::HarmonicChain { n_fine, stride, .. } => {
                let keep: Vec<usize> = (0..n_fine).step_by(stride).collect();
                Some(CGMap::slicing(n_fine, 3, &keep).expect("valid slicing"))
            }
            _ => None,
        }
    }

    /// Exact covariance of the CG marginal `Xi Sigma Xi^T`.
    pub fn cg_covariance(&self) -> Result<DMatrix<f64>> {
        let map = self
            .cg_map()
            .ok_or_else(|| DffError::Unsupported(format!("{} has no CG map", self.name)))?;
        let xi = map.full_matrix();
        Ok(&xi * self.covariance()? * xi.transpose())
    }

    /// Mean force of the sliced harmonic chain, `-grad V_CG(z)`: the CG beads
    /// are joined by effective springs of stiffness `spring / stride`.
    pub fn cg_mean_force(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            SystemKind::HarmonicChain {
                n_fine,
                spring,
                stride,
            } => {
                let n_cg = (n_fine - 1) / stride + 1;
                if z.len() != n_cg * 3 {
                    return Err(invalid("CG configuration has the wrong length"));
                }
                Ok(chain_force(z, n_cg, spring, stride))
            }
            _ => Err(DffError::Unsupported(format!(
                "no closed-form mean force for {}",
                self.name
            ))),
        }
    }
}

fn chain_force(r: &[f64], n: usize, spring: f64, stride: usize) -> Vec<f64> {
    let k = spring / stride as f64;
    let mut f = vec![0.0; n * 3];
    for j in 0..n - 1 {
        for c in 0..3 {
            let b = r[(j + 1) * 3 + c] - r[j * 3 + c];
            f[j * 3 + c] += k * b;
            f[(j + 1) * 3 + c] -= k * b;
        }
    }
    f
}

/// Centred chain covariance in bead-major / coordinate-minor order.
fn chain_covariance(n: usize, bond_var: f64) -> DMatrix<f64> {
    // positions from bonds with the first bead at the origin, then centred
    let mut pos = DMatrix::zeros(n, n - 1);
    for j in 1..n {
        for m in 0..j {
            pos[(j, m)] = 1.0;
        }
    }
    let center = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = &center * pos;
    let one_d = (&b * b.transpose()) * bond_var;
    kron_identity(&one_d, 3)
}

fn kron_identity(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(r * d, c * d);
    for i in 0..r {
        for j in 0..c {
            for k in 0..d {
                out[(i * d + k, j * d + k)] = m[(i, j)];
            }
        }
    }
    out
}

/// Subtracts the centroid from a flattened frame.
pub fn remove_center(frame: &mut [f64], dim: usize) {
    let n = frame.len() / dim;
    for c in 0..dim {
        let mean = frame.iter().skip(c).step_by(dim).sum::<f64>() / n as f64;
        frame.iter_mut().skip(c).step_by(dim).for_each(|v| *v -= mean);
    }
}

/// Returns `(U, dU/dx, dU/dy)`.
pub fn muller_brown_terms(x: f64, y: f64) -> (f64, f64, f64) {
    let mut u = 0.0;
    let mut gx = 0.0;
    let mut gy = 0.0;
    for k in 0..4 {
        let dx = x - MB_X0[k];
        let dy = y - MB_Y0[k];
        let e = MB_A[k] * (MB_LA[k] * dx * dx + MB_LB[k] * dx * dy + MB_LC[k] * dy * dy).exp();
        u += e;
        gx += e * (2.0 * MB_LA[k] * dx + MB_LB[k] * dy);
        gy += e * (MB_LB[k] * dx + 2.0 * MB_LC[k] * dy);
    }
    (u, gx, gy)
}

/// Linear CG map acting identically on every spatial coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct CGMap {
    dim: usize,
    /// `n_cg x n_fine`
    xi: DMatrix<f64>,
    /// `n_cg x n_fine`
    xi_force: DMatrix<f64>,
}

impl CGMap {
    pub fn slicing(n_fine: usize, dim: usize, keep: &[usize]) -> Result<Self> {
        if keep.is_empty() || keep.iter().any(|&k| k >= n_fine) {
            return Err(invalid("slicing indices out of range"));
        }
        let mut xi = DMatrix::zeros(keep.len(), n_fine);
        for (r, &k) in keep.iter().enumerate() {
            xi[(r, k)] = 1.0;
        }
        Ok(Self {
            dim,
            xi_force: xi.clone(),
            xi,
        })
    }

    /// Centroid of each (disjoint) group; forces of a group are summed.
    pub fn averaging(n_fine: usize, dim: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut seen = vec![false; n_fine];
        let mut xi = DMatrix::zeros(groups.len(), n_fine);
        let mut xi_force = DMatrix::zeros(groups.len(), n_fine);
        for (r, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(invalid("empty CG group"));
            }
            for &k in g {
                if k >= n_fine || seen[k] {
                    return Err(invalid("CG groups must be disjoint and in range"));
                }
                seen[k] = true;
                xi[(r, k)] = 1.0 / g.len() as f64;
                xi_force[(r, k)] = 1.0;
            }
        }
        Ok(Self { dim, xi, xi_force })
    }

    pub fn n_cg(&self) -> usize {
        self.xi.nrows()
    }

    pub fn n_fine(&self) -> usize {
        self.xi.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.xi
    }

    pub fn force_matrix(&self) -> &DMatrix<f64> {
        &self.xi_force
    }

    /// `Xi` expanded over coordinates (`3n x 3N` for 3-D).
    pub fn full_matrix(&self) -> DMatrix<f64> {
        kron_identity(&self.xi, self.dim)
    }

    fn apply_with(&self, m: &DMatrix<f64>, r: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; self.n_cg() * d];
        for i in 0..self.n_cg() {
            for j in 0..self.n_fine() {
                let w = m[(i, j)];
                if w != 0.0 {
                    for c in 0..d {
                        out[i * d + c] += w * r[j * d + c];
                    }
                }
            }
        }
        out
    }

    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        self.apply_with(&self.xi, r)
    }

    pub fn apply_force(&self, f: &[f64]) -> Vec<f64> {
        self.apply_with(&self.xi_force, f)
    }
}

/// Score of the diffused Gaussian `N(0, abar Sigma + (1 - abar) I)` at `x`.
pub fn diffused_gaussian_score(
    cov: &DMatrix<f64>,
    schedule: &NoiseSchedule,
    level: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_level(level)?;
    if cov.nrows() != x.len() || !cov.is_square() {
        return Err(invalid("covariance does not match configuration length"));
    }
    let abar = schedule.alpha_bar(level);
    let n = x.len();
    let m = cov * abar + DMatrix::identity(n, n) * (1.0 - abar);
    let chol = m
        .cholesky()
        .ok_or_else(|| DffError::Numerical("diffused covariance not positive definite".into()))?;
    let s = chol.solve(&DVector::from_column_slice(x));
    Ok(s.iter().map(|v| -v).collect())
}

/// Exact diffused score for Gaussian systems; unsupported otherwise.
pub fn diffused_score_oracle(
    system: &ToySystem,
    schedule: &NoiseSchedule,
    level: usize,
    x: &[f64],
) -> Result<Vec<f64>> {
    diffused_gaussian_score(&system.covariance()?, schedule, level, x)
}

/// `(Xi r, Xi_f(-grad U(r)))` for each fine-grained sample.
pub fn projected_forces(
    system: &ToySystem,
    map: &CGMap,
    fine_samples: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dt = system.dim_total();
    if map.n_fine() * map.dim != dt || !fine_samples.len().is_multiple_of(dt) {
        return Err(invalid("CG map or samples do not match the system"));
    }
    let mut z = Vec::new();
    let mut f = Vec::new();
    for r in fine_samples.chunks(dt) {
        z.extend(map.apply(r));
        f.extend(map.apply_force(&system.force(r)?));
    }
    Ok((z, f))
}

/// The built-in catalogue with default parameters.
pub fn builtin_systems() -> Vec<ToySystem> {
    vec![
        ToySystem::gaussian_well(1, 1.0, 1.0).expect("valid"),
        ToySystem::gaussian_well(2, 1.0, 1.0).expect("valid"),
        ToySystem::gaussian_well(3, 1.0, 1.0).expect("valid"),
        ToySystem::double_well(1.0, 0.5).expect("valid"),
        ToySystem::muller_brown(10.0).expect("valid"),
        ToySystem::harmonic_chain(9, 1.0, 2, 1.0).expect("valid"),
    ]
}

/// Looks a system up by name, overriding its temperature when `kt` is given.
pub fn system_by_name(name: &str, kt: Option<f64>) -> Result<ToySystem> {
    let base = builtin_systems()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| {
            let names: Vec<String> = builtin_systems().into_iter().map(|s| s.name).collect();
            invalid(format!("unknown system {name:?}; known: {}", names.join(", ")))
        })?;
    match kt {
        None => Ok(base),
        Some(kt) => match base.kind {
            SystemKind::MullerBrown => ToySystem::muller_brown(kt),
            kind => ToySystem::checked(base.name, kind, kt),
        },
    }
}

/// Centring projector applied to a covariance over `n` points in `dim` dimensions.
pub fn center_covariance(cov: &DMatrix<f64>, n: usize, dim: usize) -> DMatrix<f64> {
    let c = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let c = kron_identity(&c, dim);
    &c * cov * c.transpose()
}
