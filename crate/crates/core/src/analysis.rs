//! Evaluation: histograms and free energies, JS divergences, internal
//! coordinates, RMSD, TICA, k-means and Markov transition matrices.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::Trajectory;
use crate::error::{invalid, DffError, Result};

/// Default resolution of 2-D maps.
pub const DEFAULT_BINS_2D: usize = 64;
/// Default TICA lag in saved frames.
pub const DEFAULT_TICA_LAG: usize = 10;
/// Default minimum sequence offset for pairwise distances.
pub const DEFAULT_PWD_OFFSET: usize = 3;

/// 1-D or 2-D histogram; 2-D counts are row-major over (x, y).
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    edges: Vec<Vec<f64>>,
    counts: Vec<u64>,
    out_of_range: u64,
}

fn linspace(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|k| lo + (hi - lo) * k as f64 / bins as f64)
        .collect()
}

fn check_axis(bins: usize, range: (f64, f64)) -> Result<()> {
    if bins == 0 {
        return Err(invalid("bins must be >= 1"));
    }
    if !(range.0.is_finite() && range.1.is_finite() && range.1 > range.0) {
        return Err(invalid(format!("range {:?} must be finite and increasing", range)));
    }
    Ok(())
}

/// Bin of `v`, with the upper edge belonging to the last bin.
fn bin_of(v: f64, lo: f64, hi: f64, bins: usize) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    Some((((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
}

impl Histogram {
    pub fn new_1d(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Self> {
        check_axis(bins, range)?;
        let mut counts = vec![0u64; bins];
        let mut out = 0;
        for &v in values {
            match bin_of(v, range.0, range.1, bins) {
                Some(b) => counts[b] += 1,
                None => out += 1,
            }
        }
        Ok(Self {
            edges: vec![linspace(range.0, range.1, bins)],
            counts,
            out_of_range: out,
        })
    }

    /// `points` holds interleaved (x, y) pairs.
    pub fn new_2d(points: &[f64], bins: (usize, usize), xr: (f64, f64), yr: (f64, f64)) -> Result<Self> {
        check_axis(bins.0, xr)?;
        check_axis(bins.1, yr)?;
        if !points.len().is_multiple_of(2) {
            return Err(invalid("2-D histogram needs (x, y) pairs"));
        }
        let mut counts = vec![0u64; bins.0 * bins.1];
        let mut out = 0;
        for p in points.chunks(2) {
            match (bin_of(p[0], xr.0, xr.1, bins.0), bin_of(p[1], yr.0, yr.1, bins.1)) {
                (Some(i), Some(j)) => counts[i * bins.1 + j] += 1,
                _ => out += 1,
            }
        }
        Ok(Self {
            edges: vec![linspace(xr.0, xr.1, bins.0), linspace(yr.0, yr.1, bins.1)],
            counts,
            out_of_range: out,
        })
    }

    pub fn edges(&self) -> &[Vec<f64>] {
        &self.edges
    }

    pub fn shape(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.len() - 1).collect()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn out_of_range(&self) -> u64 {
        self.out_of_range
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Normalized over in-range samples; all zero when nothing fell in range.
    pub fn probabilities(&self) -> Vec<f64> {
        let t = self.total();
        if t == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / t as f64).collect()
    }

    pub fn same_binning(&self, other: &Self) -> bool {
        self.edges == other.edges
    }
}

/// `-ln p` per bin; `None` for empty bins.
pub fn free_energy(h: &Histogram) -> Vec<Option<f64>> {
    h.probabilities()
        .into_iter()
        .map(|p| (p > 0.0).then(|| -p.ln()))
        .collect()
}

/// Jensen-Shannon divergence (nats) between two probability vectors.
pub fn js_from_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "distributions have {} and {} bins",
            p.len(),
            q.len()
        )));
    }
    let kl_half = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        js += 0.5 * (kl_half(a, m) + kl_half(b, m));
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if !p.same_binning(q) {
        return Err(invalid("histograms use different binning"));
    }
    if p.total() == 0 || q.total() == 0 {
        return Err(invalid("histogram holds no in-range samples"));
    }
    js_from_probs(&p.probabilities(), &q.probabilities())
}

/// Range covering both samples, widened slightly so a constant series still
/// spans a bin.
pub fn joint_range(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in a.iter().chain(b) {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return Err(invalid("no finite values to bin"));
    }
    let pad = 1e-9 * (hi - lo).abs().max(lo.abs()).max(1e-12);
    Ok((lo - pad, hi + pad))
}

/// JS between two scalar samples on a shared `bins`-bin grid.
pub fn sample_js(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    let r = joint_range(a, b)?;
    js_divergence(&Histogram::new_1d(a, bins, r)?, &Histogram::new_1d(b, bins, r)?)
}

/// JS between two 2-D samples (interleaved pairs) on a shared grid.
pub fn sample_js_2d(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    let axis = |k: usize| {
        let xa: Vec<f64> = a.iter().skip(k).step_by(2).copied().collect();
        let xb: Vec<f64> = b.iter().skip(k).step_by(2).copied().collect();
        joint_range(&xa, &xb)
    };
    let (xr, yr) = (axis(0)?, axis(1)?);
    js_divergence(
        &Histogram::new_2d(a, (bins, bins), xr, yr)?,
        &Histogram::new_2d(b, (bins, bins), xr, yr)?,
    )
}

fn sub(a: &[f64], b: &[f64]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Torsion of four points in (-pi, pi]; cis is 0, trans is pi.
pub fn torsion(p0: &[f64], p1: &[f64], p2: &[f64], p3: &[f64]) -> f64 {
    let b1 = sub(p1, p0);
    let b2 = sub(p2, p1);
    let b3 = sub(p3, p2);
    let n1 = cross(b1, b2);
    let n2 = cross(b2, b3);
    let y = dot(b2, b2).sqrt() * dot(b1, n2);
    let x = dot(n1, n2);
    let t = y.atan2(x);
    if t <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        t
    }
}

/// Torsions of consecutive bead quadruplets, one row of `n_beads - 3` per frame.
pub fn dihedral_angles(traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    if traj.dim() != 3 || traj.n_beads() < 4 {
        return Err(invalid(format!(
            "dihedrals need >= 4 beads in 3-D, got {} beads in {}-D",
            traj.n_beads(),
            traj.dim()
        )));
    }
    let x = traj.to_f64();
    let c = traj.frame_len();
    Ok(x.chunks(c)
        .map(|f| {
            (0..traj.n_beads() - 3)
                .map(|j| torsion(&f[3 * j..], &f[3 * j + 3..], &f[3 * j + 6..], &f[3 * j + 9..]))
                .collect()
        })
        .collect())
}

/// Bead pairs `(j, k)` with `k - j > min_offset`.
pub fn bead_pairs(n_beads: usize, min_offset: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for j in 0..n_beads {
        for k in j + min_offset + 1..n_beads {
            out.push((j, k));
        }
    }
    out
}

pub fn distance(frame: &[f64], dim: usize, j: usize, k: usize) -> f64 {
    (0..dim)
        .map(|c| (frame[j * dim + c] - frame[k * dim + c]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-pair distance series: `out[p][t]` for pair `p` at frame `t`.
pub fn pair_distance_series(traj: &Trajectory, min_offset: usize) -> (Vec<(usize, usize)>, Vec<Vec<f64>>) {
    let pairs = bead_pairs(traj.n_beads(), min_offset);
    let x = traj.to_f64();
    let mut series = vec![Vec::with_capacity(traj.n_frames()); pairs.len()];
    for f in x.chunks(traj.frame_len()) {
        for (p, &(j, k)) in pairs.iter().enumerate() {
            series[p].push(distance(f, traj.dim(), j, k));
        }
    }
    (pairs, series)
}

/// Distance histograms for every qualifying pair over the data's own range.
pub fn pairwise_distance_distributions(
    traj: &Trajectory,
    min_offset: usize,
    bins: usize,
) -> Result<Vec<((usize, usize), Histogram)>> {
    let (pairs, series) = pair_distance_series(traj, min_offset);
    pairs
        .into_iter()
        .zip(series)
        .map(|(p, s)| {
            let r = joint_range(&s, &[])?;
            Ok((p, Histogram::new_1d(&s, bins, r)?))
        })
        .collect()
}

fn check_same_shape(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.n_beads() != b.n_beads() || a.dim() != b.dim() {
        return Err(invalid(format!(
            "reference has {} beads x {} dims but model has {} beads x {} dims",
            a.n_beads(),
            a.dim(),
            b.n_beads(),
            b.dim()
        )));
    }
    Ok(())
}

/// Per-pair JS of distance distributions on grids shared by both sets.
pub fn pwd_js(reference: &Trajectory, model: &Trajectory, min_offset: usize, bins: usize) -> Result<Vec<((usize, usize), f64)>> {
    check_same_shape(reference, model)?;
    let (pairs, a) = pair_distance_series(reference, min_offset);
    let (_, b) = pair_distance_series(model, min_offset);
    pairs
        .into_iter()
        .zip(a.iter().zip(&b))
        .map(|(p, (x, y))| Ok((p, sample_js(x, y, bins)?)))
        .collect()
}

/// Fraction of frames with bead distance below `threshold`, row-major n x n.
pub fn contact_probability_map(traj: &Trajectory, threshold: f64) -> Vec<f64> {
    let n = traj.n_beads();
    let mut m = vec![0.0; n * n];
    let frames = traj.n_frames();
    if frames == 0 {
        return m;
    }
    let x = traj.to_f64();
    for f in x.chunks(traj.frame_len()) {
        for j in 0..n {
            for k in j..n {
                if j == k || distance(f, traj.dim(), j, k) < threshold {
                    m[j * n + k] += 1.0;
                    if j != k {
                        m[k * n + j] += 1.0;
                    }
                }
            }
        }
    }
    m.iter_mut().for_each(|v| *v /= frames as f64);
    m
}

/// Minimum RMSD over proper rotations and translations (Kabsch).
pub fn rmsd(frame: &[f64], reference: &[f64], dim: usize) -> Result<f64> {
    if frame.len() != reference.len() || dim == 0 || !frame.len().is_multiple_of(dim) || frame.is_empty() {
        return Err(invalid("frames must have equal, whole shapes"));
    }
    let n = frame.len() / dim;
    let centred = |x: &[f64]| {
        let mut m = DMatrix::from_row_slice(n, dim, x);
        for c in 0..dim {
            let mean = m.column(c).mean();
            m.column_mut(c).add_scalar_mut(-mean);
        }
        m
    };
    let p = centred(frame);
    let q = centred(reference);
    let h = p.transpose() * &q;
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = DMatrix::<f64>::identity(dim, dim);
    if (u.determinant() * vt.determinant()) < 0.0 {
        // flip the weakest axis to exclude reflections
        d[(dim - 1, dim - 1)] = -1.0;
    }
    let rot = vt.transpose() * d * u.transpose();
    let e = (p * rot.transpose() - q).norm_squared();
    Ok((e.max(0.0) / n as f64).sqrt())
}

/// TICA input features: all pairwise distances for 2+ beads, raw
/// coordinates for a single bead.
pub fn tica_features(traj: &Trajectory) -> (usize, Vec<f64>) {
    if traj.n_beads() < 2 {
        return (traj.frame_len(), traj.to_f64());
    }
    let (pairs, series) = pair_distance_series(traj, 0);
    let d = pairs.len();
    let mut out = Vec::with_capacity(d * traj.n_frames());
    for t in 0..traj.n_frames() {
        for s in &series {
            out.push(s[t]);
        }
    }
    (d, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TicaModel {
    pub mean: Vec<f64>,
    pub lag: usize,
    pub c0: DMatrix<f64>,
    pub ctau: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Columns are components, C0-orthonormal.
    pub components: DMatrix<f64>,
}

/// Fits TICA on segments of `dim`-feature rows (each segment a contiguous
/// time series) with the symmetrized reversible estimator.
pub fn tica_fit(segments: &[&[f64]], dim: usize, lag: usize, n_components: usize) -> Result<TicaModel> {
    if dim == 0 || lag == 0 || n_components == 0 || n_components > dim {
        return Err(invalid("need dim >= 1, lag >= 1 and 1 <= n_components <= dim"));
    }
    let mut n_pairs = 0usize;
    let mut mean = vec![0.0; dim];
    for s in segments {
        if s.len() % dim != 0 {
            return Err(invalid("segment does not hold whole feature rows"));
        }
        let t = s.len() / dim;
        if t > lag {
            n_pairs += t - lag;
            for i in 0..t - lag {
                for c in 0..dim {
                    mean[c] += s[i * dim + c] + s[(i + lag) * dim + c];
                }
            }
        }
    }
    if n_pairs <= dim {
        return Err(invalid(format!(
            "{n_pairs} time-lagged pairs are too few for {dim} features at lag {lag}"
        )));
    }
    mean.iter_mut().for_each(|m| *m /= 2.0 * n_pairs as f64);
    let mut c0 = DMatrix::<f64>::zeros(dim, dim);
    let mut ct = DMatrix::<f64>::zeros(dim, dim);
    let mut a = vec![0.0; dim];
    let mut b = vec![0.0; dim];
    for s in segments {
        let t = s.len() / dim;
        if t <= lag {
            continue;
        }
        for i in 0..t - lag {
            for c in 0..dim {
                a[c] = s[i * dim + c] - mean[c];
                b[c] = s[(i + lag) * dim + c] - mean[c];
            }
            for r in 0..dim {
                for c in 0..dim {
                    c0[(r, c)] += a[r] * a[c] + b[r] * b[c];
                    ct[(r, c)] += a[r] * b[c] + b[r] * a[c];
                }
            }
        }
    }
    c0 /= 2.0 * n_pairs as f64;
    ct /= 2.0 * n_pairs as f64;

    let scale = (0..dim).map(|k| c0[(k, k)]).fold(0.0f64, f64::max);
    for k in 0..dim {
        if c0[(k, k)] <= 1e-12 * scale.max(1e-300) {
            return Err(DffError::Numerical(format!(
                "feature {k} has (near-)zero variance; TICA covariance is rank-deficient"
            )));
        }
    }
    let eps = 1e-10 * c0.trace() / dim as f64;
    let reg = &c0 + DMatrix::identity(dim, dim) * eps;
    let chol = reg
        .clone()
        .cholesky()
        .ok_or_else(|| DffError::Numerical("TICA covariance is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| DffError::Numerical("TICA covariance factor is singular".into()))?;
    let sym = &linv * &ct * linv.transpose();
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let back = linv.transpose();
    let mut comps = DMatrix::zeros(dim, n_components);
    let mut vals = Vec::with_capacity(n_components);
    for (col, &k) in order.iter().take(n_components).enumerate() {
        let mut v = &back * eig.eigenvectors.column(k);
        let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if big < 0.0 {
            v = -v;
        }
        comps.set_column(col, &v);
        vals.push(eig.eigenvalues[k]);
    }
    Ok(TicaModel {
        mean,
        lag,
        c0,
        ctau: ct,
        eigenvalues: vals,
        components: comps,
    })
}

/// Projects feature rows onto the TICA components.
pub fn tica_transform(model: &TicaModel, features: &[f64]) -> Result<Vec<f64>> {
    let d = model.mean.len();
    if !features.len().is_multiple_of(d) {
        return Err(invalid(format!("features are not rows of {d}")));
    }
    let m = model.components.ncols();
    let mut out = Vec::with_capacity(features.len() / d * m);
    for row in features.chunks(d) {
        for c in 0..m {
            out.push(
                (0..d)
                    .map(|k| (row[k] - model.mean[k]) * model.components[(k, c)])
                    .sum(),
            );
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration of the kept restart.
    pub inertia_history: Vec<f64>,
}

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn assign(points: &[f64], centroids: &[f64], dim: usize) -> Vec<usize> {
    points.chunks(dim).map(|p| nearest(p, centroids, dim).0).collect()
}

fn kmeans_pp<R: Rng>(points: &[f64], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = points.len() / dim;
    let mut cen = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    cen.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks(dim).map(|p| sq_dist(p, &cen[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let start = cen.len();
        cen.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
        for (i, p) in points.chunks(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &cen[start..]));
        }
    }
    cen
}

fn lloyd(points: &[f64], dim: usize, k: usize, mut cen: Vec<f64>) -> KMeans {
    let n = points.len() / dim;
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, p) in points.chunks(dim).enumerate() {
            let (c, d) = nearest(p, &cen, dim);
            inertia += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks(dim).enumerate() {
            counts[labels[i]] += 1;
            for c in 0..dim {
                sums[labels[i] * dim + c] += p[c];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..dim {
                    cen[j * dim + c] = sums[j * dim + c] / counts[j] as f64;
                }
            }
        }
    }
    let inertia = *history.last().expect("at least one iteration");
    KMeans {
        k,
        dim,
        centroids: cen,
        labels,
        inertia,
        inertia_history: history,
    }
}

/// k-means++ seeding and Lloyd iterations, best of [`KMEANS_RESTARTS`].
pub fn kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(invalid("points must be whole rows"));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<KMeans> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart as u64);
        let fit = lloyd(points, dim, k, kmeans_pp(points, dim, k, &mut rng));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Inertia for each K, for elbow plots.
pub fn inertia_curve(points: &[f64], dim: usize, ks: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    ks.iter().map(|&k| Ok((k, kmeans(points, dim, k, seed)?.inertia))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub n_states: usize,
    pub counts: Vec<u64>,
    /// Row-stochastic, row-major; rows without counts are identity rows.
    pub p: Vec<f64>,
    pub pi: Vec<f64>,
    pub empty_rows: Vec<bool>,
}

impl TransitionMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.p[i * self.n_states..(i + 1) * self.n_states]
    }
}

/// Counts transitions at `lag` within each segment and normalizes rows.
pub fn transition_matrix(segments: &[&[usize]], n_states: usize, lag: usize) -> Result<TransitionMatrix> {
    if n_states == 0 || lag == 0 {
        return Err(invalid("need n_states >= 1 and lag >= 1"));
    }
    let mut counts = vec![0u64; n_states * n_states];
    let mut occ = vec![0u64; n_states];
    for s in segments {
        for &l in s.iter() {
            if l >= n_states {
                return Err(invalid(format!("label {l} exceeds {n_states} states")));
            }
            occ[l] += 1;
        }
        for w in 0..s.len().saturating_sub(lag) {
            counts[s[w] * n_states + s[w + lag]] += 1;
        }
    }
    let mut p = vec![0.0; n_states * n_states];
    let mut empty = vec![false; n_states];
    for i in 0..n_states {
        let row = &counts[i * n_states..(i + 1) * n_states];
        let t: u64 = row.iter().sum();
        if t == 0 {
            empty[i] = true;
            p[i * n_states + i] = 1.0;
        } else {
            for j in 0..n_states {
                p[i * n_states + j] = row[j] as f64 / t as f64;
            }
        }
    }
    let total: u64 = occ.iter().sum();
    let pi = occ
        .iter()
        .map(|&c| if total > 0 { c as f64 / total as f64 } else { 0.0 })
        .collect();
    Ok(TransitionMatrix {
        n_states,
        counts,
        p,
        pi,
        empty_rows: empty,
    })
}

/// Row-wise JS between transition matrices: plain mean and mean weighted by
/// the reference state probabilities. Rows empty in either are skipped.
pub fn transition_js(model: &TransitionMatrix, reference: &TransitionMatrix) -> Result<(f64, f64)> {
    if model.n_states != reference.n_states {
        return Err(invalid("transition matrices have different state counts"));
    }
    let mut sum = 0.0;
    let mut wsum = 0.0;
    let mut n = 0usize;
    let mut w = 0.0;
    for i in 0..model.n_states {
        if model.empty_rows[i] || reference.empty_rows[i] {
            continue;
        }
        let js = js_from_probs(model.row(i), reference.row(i))?;
        sum += js;
        n += 1;
        wsum += reference.pi[i] * js;
        w += reference.pi[i];
    }
    if n == 0 {
        return Err(invalid("no state is populated in both matrices"));
    }
    Ok((sum / n as f64, if w > 0.0 { wsum / w } else { 0.0 }))
}

/// CSV and SVG report writers.
pub mod report {
    use std::fmt::Write;

    /// CSV text from a header and numeric rows.
    pub fn csv(header: &[&str], rows: &[Vec<f64>]) -> String {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Matrix as CSV without header.
    pub fn matrix_csv(values: &[f64], ncols: usize) -> String {
        let mut s = String::new();
        for row in values.chunks(ncols) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    // viridis anchor colours
    const MAP: [(f64, f64, f64); 5] = [
        (68.0, 1.0, 84.0),
        (59.0, 82.0, 139.0),
        (33.0, 145.0, 140.0),
        (94.0, 201.0, 98.0),
        (253.0, 231.0, 37.0),
    ];

    fn colour(t: f64) -> String {
        let t = t.clamp(0.0, 1.0) * (MAP.len() - 1) as f64;
        let i = (t.floor() as usize).min(MAP.len() - 2);
        let f = t - i as f64;
        let (a, b) = (MAP[i], MAP[i + 1]);
        let mix = |x: f64, y: f64| (x + (y - x) * f).round() as u8;
        format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
    }

    /// Heatmap of a row-major `nrows x ncols` grid; `None` cells are grey.
    /// Row 0 is drawn at the bottom.
    pub fn heatmap_svg(values: &[Option<f64>], nrows: usize, ncols: usize, title: &str) -> String {
        let cell = (480.0 / nrows.max(ncols) as f64).max(1.0);
        let (w, h) = (cell * ncols as f64, cell * nrows as f64);
        let finite: Vec<f64> = values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
            w,
            h + 24.0,
            w,
            h + 24.0
        );
        let _ = writeln!(s, r#"<text x="4" y="16" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));
        for r in 0..nrows {
            for c in 0..ncols {
                let fill = match values[r * ncols + c] {
                    Some(v) if v.is_finite() => colour((v - lo) / span),
                    _ => "#d0d0d0".to_string(),
                };
                let y = 24.0 + (nrows - 1 - r) as f64 * cell;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                    c as f64 * cell,
                    y,
                    cell,
                    cell,
                    fill
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }

    fn escape(t: &str) -> String {
        t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
    }
}
