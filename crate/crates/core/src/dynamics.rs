//! CG dynamics with any force provider: underdamped Langevin (BAOAB),
//! overdamped Brownian (Euler-Maruyama) and the diffuse-denoise chain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{Provenance, Trajectory};
use crate::error::{invalid, DffError, Result};
use crate::sampler::posterior_update;
use crate::scorenet::NoisePredictor;
use crate::toyworlds::ToySystem;

/// Coordinates beyond this magnitude count as a diverged replica.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Reduced units: kcal/mol, g/mol and Angstrom, so time is in
/// `sqrt(g/mol * A^2 / (kcal/mol))`.
pub mod units {
    /// Boltzmann constant in kcal/mol/K.
    pub const KB: f64 = 0.001_987_204_1;
    /// One internal time unit in femtoseconds.
    pub const TIME_UNIT_FS: f64 = 48.888_21;

    pub fn femtoseconds(t: f64) -> f64 {
        t / TIME_UNIT_FS
    }

    /// Converts a rate in ps^-1 to inverse internal time.
    pub fn per_picosecond(rate: f64) -> f64 {
        rate * TIME_UNIT_FS / 1000.0
    }

    pub fn kelvin(t: f64) -> f64 {
        KB * t
    }
}

pub trait ForceProvider: Sync {
    /// `(n_beads, dim)` of one configuration.
    fn frame_shape(&self) -> (usize, usize);
    fn coords(&self) -> usize {
        let (n, d) = self.frame_shape();
        n * d
    }
    /// Forces for a batch of flattened configurations.
    fn forces(&self, xs: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroForce {
    pub n_beads: usize,
    pub dim: usize,
}

impl ForceProvider for ZeroForce {
    fn frame_shape(&self) -> (usize, usize) {
        (self.n_beads, self.dim)
    }
    fn forces(&self, xs: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; xs.len()])
    }
}

/// `F = -k x` on every coordinate.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicForce {
    pub n_beads: usize,
    pub dim: usize,
    pub k: f64,
}

impl ForceProvider for HarmonicForce {
    fn frame_shape(&self) -> (usize, usize) {
        (self.n_beads, self.dim)
    }
    fn forces(&self, xs: &[f64]) -> Result<Vec<f64>> {
        Ok(xs.iter().map(|x| -self.k * x).collect())
    }
}

impl ForceProvider for ToySystem {
    fn frame_shape(&self) -> (usize, usize) {
        ToySystem::frame_shape(self)
    }
    fn forces(&self, xs: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(xs.len());
        for x in xs.chunks(self.dim_total()) {
            out.extend(self.force(x)?);
        }
        Ok(out)
    }
}

/// Denoising force field of a noise predictor at a fixed level.
pub struct DffForce<'a, P: NoisePredictor + ?Sized> {
    model: &'a P,
    level: usize,
    kt: f64,
}

impl<'a, P: NoisePredictor + ?Sized> DffForce<'a, P> {
    pub fn new(model: &'a P, level: usize, kt: f64) -> Result<Self> {
        model.schedule().check_level(level)?;
        if !(kt > 0.0) {
            return Err(invalid("DFF needs kT > 0"));
        }
        Ok(Self { model, level, kt })
    }
}

impl<P: NoisePredictor + ?Sized> ForceProvider for DffForce<'_, P> {
    fn frame_shape(&self) -> (usize, usize) {
        (self.model.n_beads(), self.model.dim())
    }
    fn forces(&self, xs: &[f64]) -> Result<Vec<f64>> {
        crate::scorenet::dff_force_batch(self.model, xs, self.level, self.kt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Langevin,
    Brownian,
    DiffuseDenoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinConfig {
    pub mass: f64,
    pub friction: f64,
    pub kt: f64,
    pub dt: f64,
    pub n_steps: usize,
    pub save_every: usize,
    pub n_replicas: usize,
    /// Level at which a DFF provider is evaluated.
    pub noise_level: Option<usize>,
    pub seed: u64,
    /// Also store each replica's starting frame.
    pub save_initial: bool,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            mass: 1.0,
            friction: 1.0,
            kt: 1.0,
            dt: 1e-2,
            n_steps: 1000,
            save_every: 10,
            n_replicas: 1,
            noise_level: None,
            seed: 0,
            save_initial: false,
        }
    }
}

impl LangevinConfig {
    /// 2 fs steps saved every 250, 300 K, 1 ps^-1 friction, 12.8 g/mol beads.
    pub fn alanine() -> Self {
        Self {
            mass: 12.8,
            friction: units::per_picosecond(1.0),
            kt: units::kelvin(300.0),
            dt: units::femtoseconds(2.0),
            n_steps: 1_000_000,
            save_every: 250,
            n_replicas: 100,
            ..Self::default()
        }
    }

    /// 6M steps saved every 500, 12 g/mol beads, temperature of the
    /// reference simulation and the protein's level.
    pub fn fast_folder(protein: &str) -> Result<Self> {
        let (kelvin, level) = FAST_FOLDERS
            .iter()
            .find(|(name, _, _)| name.eq_ignore_ascii_case(protein))
            .map(|(_, t, l)| (*t, *l))
            .ok_or_else(|| invalid(format!("unknown fast folder {protein}")))?;
        Ok(Self {
            mass: 12.0,
            friction: units::per_picosecond(1.0),
            kt: units::kelvin(kelvin),
            dt: units::femtoseconds(2.0),
            n_steps: 6_000_000,
            save_every: 500,
            n_replicas: 100,
            noise_level: Some(level + 1),
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.friction >= 0.0 && self.dt > 0.0 && self.kt >= 0.0) {
            return Err(invalid(
                "need mass > 0, friction >= 0, dt > 0 and kT >= 0",
            ));
        }
        if self.save_every == 0 || self.n_replicas == 0 {
            return Err(invalid("save_every and n_replicas must be >= 1"));
        }
        Ok(())
    }
}

/// Name, reference temperature (K) and 0-based DFF level of each fast folder.
pub const FAST_FOLDERS: [(&str, f64, usize); 5] = [
    ("chignolin", 340.0, 20),
    ("trp-cage", 290.0, 15),
    ("bba", 325.0, 5),
    ("villin", 360.0, 5),
    ("protein-g", 350.0, 5),
];

/// Cross-validated 0-based levels by training-set size (1000-level cosine schedule).
pub const LEVEL_BY_DATASET_SIZE: [(usize, usize); 6] = [
    (10_000, 26),
    (20_000, 25),
    (50_000, 20),
    (100_000, 19),
    (200_000, 17),
    (500_000, 8),
];

/// Default 1-based level for a training-set size: the table entry closest
/// in log-size, rescaled to schedules with other than 1000 levels.
pub fn default_noise_level(n_train: usize, levels: usize) -> usize {
    let n = (n_train.max(1) as f64).ln();
    let (_, zero_based) = LEVEL_BY_DATASET_SIZE
        .iter()
        .min_by(|a, b| {
            let da = ((a.0 as f64).ln() - n).abs();
            let db = ((b.0 as f64).ln() - n).abs();
            da.total_cmp(&db)
        })
        .copied()
        .expect("non-empty table");
    let one_based = zero_based + 1;
    if levels == 1000 {
        one_based
    } else {
        ((one_based as f64 * levels as f64 / 1000.0).round() as usize).clamp(1, levels.max(1))
    }
}

/// Candidate with the lowest score; ties keep the smaller level.
pub fn cross_validate_level<F: FnMut(usize) -> Result<f64>>(candidates: &[usize], mut score: F) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(invalid("no candidate levels"));
    }
    let scores = candidates.iter().map(|&l| score(l)).collect::<Result<Vec<_>>>()?;
    let best = (0..candidates.len())
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(candidates[a].cmp(&candidates[b])))
        .expect("non-empty");
    Ok((candidates[best], scores))
}

/// Positions, velocities and the force at the current positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DynState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    force: Option<Vec<f64>>,
    pub step: usize,
}

impl DynState {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if x.len() != v.len() {
            return Err(invalid("positions and velocities differ in length"));
        }
        Ok(Self {
            x,
            v,
            force: None,
            step: 0,
        })
    }

    pub fn at_rest(x: Vec<f64>) -> Self {
        let v = vec![0.0; x.len()];
        Self {
            x,
            v,
            force: None,
            step: 0,
        }
    }

    /// Maxwell-Boltzmann velocities at `kt / mass`.
    pub fn thermal<R: Rng + ?Sized>(x: Vec<f64>, kt: f64, mass: f64, rng: &mut R) -> Self {
        let s = (kt / mass).sqrt();
        let v = (0..x.len()).map(|_| s * normal(rng)).collect::<Vec<f64>>();
        Self {
            x,
            v,
            force: None,
            step: 0,
        }
    }

    fn ensure_force(&mut self, provider: &dyn ForceProvider) -> Result<()> {
        if self.force.is_none() {
            self.force = Some(provider.forces(&self.x)?);
        }
        Ok(())
    }

    pub fn kinetic_energy(&self, mass: f64) -> f64 {
        0.5 * mass * self.v.iter().map(|v| v * v).sum::<f64>()
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn diverged(x: &[f64]) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
}

fn kick(v: &mut [f64], f: &[f64], h: f64, mass: f64) {
    for (vi, fi) in v.iter_mut().zip(f) {
        *vi += h * fi / mass;
    }
}

/// Drift half step, exact Ornstein-Uhlenbeck velocity update, drift half step.
fn drift_ou_drift(x: &mut [f64], v: &mut [f64], cfg: &LangevinConfig, xi: &[f64]) {
    let h = 0.5 * cfg.dt;
    let c1 = (-cfg.friction * cfg.dt).exp();
    let c2 = ((1.0 - c1 * c1) * cfg.kt / cfg.mass).sqrt();
    for k in 0..x.len() {
        x[k] += h * v[k];
        v[k] = c1 * v[k] + c2 * xi[k];
        x[k] += h * v[k];
    }
}

/// One BAOAB step with explicit Gaussian noise `xi`.
pub fn langevin_step_with_noise(
    state: &mut DynState,
    provider: &dyn ForceProvider,
    cfg: &LangevinConfig,
    xi: &[f64],
) -> Result<()> {
    state.ensure_force(provider)?;
    let f = state.force.take().expect("force cached");
    kick(&mut state.v, &f, 0.5 * cfg.dt, cfg.mass);
    drift_ou_drift(&mut state.x, &mut state.v, cfg, xi);
    state.step += 1;
    if diverged(&state.x) {
        return Err(DffError::SimulationDiverged { step: state.step, replica: 0 });
    }
    let f = provider.forces(&state.x)?;
    kick(&mut state.v, &f, 0.5 * cfg.dt, cfg.mass);
    state.force = Some(f);
    if diverged(&state.v) {
        return Err(DffError::SimulationDiverged { step: state.step, replica: 0 });
    }
    Ok(())
}

pub fn langevin_step<R: Rng + ?Sized>(
    state: &mut DynState,
    provider: &dyn ForceProvider,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<()> {
    let xi: Vec<f64> = (0..state.x.len()).map(|_| StandardNormal.sample(rng)).collect();
    langevin_step_with_noise(state, provider, cfg, &xi)
}

/// Euler-Maruyama: `x + dt F / (gamma M) + sqrt(2 dt kT / (gamma M)) w`.
pub fn brownian_update(x: &[f64], f: &[f64], cfg: &LangevinConfig, w: &[f64]) -> Vec<f64> {
    let eta = cfg.friction * cfg.mass;
    let drift = cfg.dt / eta;
    let noise = (2.0 * cfg.dt * cfg.kt / eta).sqrt();
    x.iter()
        .zip(f)
        .zip(w)
        .map(|((x, f), w)| x + drift * f + noise * w)
        .collect()
}

pub fn brownian_step<R: Rng + ?Sized>(
    state: &mut DynState,
    provider: &dyn ForceProvider,
    cfg: &LangevinConfig,
    rng: &mut R,
) -> Result<()> {
    if !(cfg.friction > 0.0) {
        return Err(invalid("Brownian dynamics needs friction > 0"));
    }
    let w: Vec<f64> = (0..state.x.len()).map(|_| StandardNormal.sample(rng)).collect();
    let f = provider.forces(&state.x)?;
    state.x = brownian_update(&state.x, &f, cfg, &w);
    state.step += 1;
    if diverged(&state.x) {
        return Err(DffError::SimulationDiverged { step: state.step, replica: 0 });
    }
    Ok(())
}

/// Brownian timestep implied by one diffuse-denoise step at level 1.
pub fn implicit_timestep(beta1: f64, mass: f64, friction: f64, kt: f64) -> f64 {
    mass * friction * beta1 / kt
}

/// Diffuse to level 1 with noise `eps`, then sample the learned reverse
/// step with noise `w`.
pub fn diffuse_denoise_with_noise<P: NoisePredictor + ?Sized>(
    model: &P,
    xs: &[f64],
    eps: &[f64],
    w: &[f64],
) -> Result<Vec<f64>> {
    let sched = model.schedule();
    let x1 = sched.diffuse(xs, 1, eps)?;
    let c = model.coords();
    let pred = model.predict_noise_batch(&x1, &vec![1; xs.len() / c])?;
    Ok(posterior_update(
        &x1,
        &pred,
        sched.alpha(1),
        sched.beta(1),
        sched.alpha_bar(1),
        sched.sigma(1),
        w,
    ))
}

pub fn diffuse_denoise_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    state: &mut DynState,
    rng: &mut R,
) -> Result<()> {
    let n = state.x.len();
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    let w: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    state.x = diffuse_denoise_with_noise(model, &state.x, &eps, &w)?;
    state.step += 1;
    if diverged(&state.x) {
        return Err(DffError::SimulationDiverged { step: state.step, replica: 0 });
    }
    Ok(())
}

/// What drives a simulation.
pub enum Driver<'a> {
    Force(&'a dyn ForceProvider),
    /// Diffuse-denoise chain of a noise predictor.
    Chain(&'a dyn NoisePredictor),
}

impl Driver<'_> {
    fn frame_shape(&self) -> (usize, usize) {
        match self {
            Driver::Force(p) => p.frame_shape(),
            Driver::Chain(m) => (m.n_beads(), m.dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub trajectory: Trajectory,
    /// `(replica, step)` of every diverged replica.
    pub diverged: Vec<(usize, usize)>,
}

/// Per-replica RNG stream.
pub fn replica_rng(seed: u64, replica: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica as u64);
    rng
}

struct Replica {
    x: Vec<f64>,
    v: Vec<f64>,
    f: Vec<f64>,
    rng: ChaCha8Rng,
    frames: Vec<f64>,
    alive: bool,
}

/// Runs `n_replicas` chains in lockstep. Replica `r` starts from
/// `initial[r % n_initial]`; velocities are drawn at `kT`. A replica that
/// diverges is stopped and reported; the run fails only if all do.
pub fn simulate(
    driver: Driver<'_>,
    integrator: Integrator,
    initial: &[f64],
    cfg: &LangevinConfig,
    mut progress: impl FnMut(usize, usize),
) -> Result<SimulationReport> {
    cfg.validate()?;
    let (n_beads, dim) = driver.frame_shape();
    let c = n_beads * dim;
    if initial.is_empty() || !initial.len().is_multiple_of(c) {
        return Err(invalid("initial set must hold whole configurations"));
    }
    match (&driver, integrator) {
        (Driver::Chain(_), Integrator::DiffuseDenoise) => {}
        (Driver::Chain(_), _) | (Driver::Force(_), Integrator::DiffuseDenoise) => {
            return Err(invalid(
                "the diffuse-denoise integrator needs a model and the others need a force provider",
            ))
        }
        (Driver::Force(_), Integrator::Brownian) if !(cfg.friction > 0.0) => {
            return Err(invalid("Brownian dynamics needs friction > 0"))
        }
        _ => {}
    }
    let n_init = initial.len() / c;
    let mut reps: Vec<Replica> = (0..cfg.n_replicas)
        .map(|r| {
            let k = r % n_init;
            let mut rng = replica_rng(cfg.seed, r);
            let x = initial[k * c..(k + 1) * c].to_vec();
            let s = (cfg.kt / cfg.mass).sqrt();
            let v = if integrator == Integrator::Langevin {
                (0..c).map(|_| s * normal(&mut rng)).collect()
            } else {
                vec![0.0; c]
            };
            let frames = if cfg.save_initial { x.clone() } else { Vec::new() };
            Replica {
                x,
                v,
                f: Vec::new(),
                rng,
                frames,
                alive: true,
            }
        })
        .collect();
    let mut diverged_at = Vec::new();

    if integrator == Integrator::Langevin {
        if let Driver::Force(p) = &driver {
            let xs: Vec<f64> = reps.iter().flat_map(|r| r.x.iter().copied()).collect();
            let f = p.forces(&xs)?;
            for (r, chunk) in reps.iter_mut().zip(f.chunks(c)) {
                r.f = chunk.to_vec();
            }
        }
    }

    let report_every = (cfg.n_steps / 20).max(1);
    for step in 1..=cfg.n_steps {
        match (&driver, integrator) {
            (Driver::Force(p), Integrator::Langevin) => {
                for r in reps.iter_mut().filter(|r| r.alive) {
                    kick(&mut r.v, &r.f, 0.5 * cfg.dt, cfg.mass);
                    let xi: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut r.rng)).collect();
                    drift_ou_drift(&mut r.x, &mut r.v, cfg, &xi);
                }
                mark_diverged(&mut reps, step, &mut diverged_at);
                let f = batch_eval(&reps, |xs| p.forces(xs))?;
                for (r, chunk) in reps.iter_mut().filter(|r| r.alive).zip(f.chunks(c)) {
                    kick(&mut r.v, chunk, 0.5 * cfg.dt, cfg.mass);
                    r.f = chunk.to_vec();
                }
            }
            (Driver::Force(p), Integrator::Brownian) => {
                let f = batch_eval(&reps, |xs| p.forces(xs))?;
                for (r, chunk) in reps.iter_mut().filter(|r| r.alive).zip(f.chunks(c)) {
                    let w: Vec<f64> = (0..c).map(|_| StandardNormal.sample(&mut r.rng)).collect();
                    r.x = brownian_update(&r.x, chunk, cfg, &w);
                }
            }
            (Driver::Chain(m), Integrator::DiffuseDenoise) => {
                let mut xs = Vec::new();
                let mut eps = Vec::new();
                let mut w = Vec::new();
                for r in reps.iter_mut().filter(|r| r.alive) {
                    xs.extend_from_slice(&r.x);
                    for _ in 0..c {
                        eps.push(StandardNormal.sample(&mut r.rng));
                    }
                    for _ in 0..c {
                        w.push(StandardNormal.sample(&mut r.rng));
                    }
                }
                if !xs.is_empty() {
                    let next = diffuse_denoise_with_noise(*m, &xs, &eps, &w)?;
                    for (r, chunk) in reps.iter_mut().filter(|r| r.alive).zip(next.chunks(c)) {
                        r.x.copy_from_slice(chunk);
                    }
                }
            }
            _ => unreachable!("checked above"),
        }
        mark_diverged(&mut reps, step, &mut diverged_at);
        if reps.iter().all(|r| !r.alive) {
            let (replica, _) = diverged_at.last().copied().unwrap_or_default();
            return Err(DffError::SimulationDiverged { step, replica });
        }
        if step % cfg.save_every == 0 {
            for r in reps.iter_mut().filter(|r| r.alive) {
                r.frames.extend_from_slice(&r.x);
            }
        }
        if step % report_every == 0 {
            progress(step, cfg.n_steps);
        }
    }

    let mut frames = Vec::new();
    let mut segments = Vec::new();
    for r in &reps {
        if !frames.is_empty() && !r.frames.is_empty() {
            segments.push((frames.len() / c) as u64);
        }
        frames.extend_from_slice(&r.frames);
    }
    let trajectory = Trajectory::from_f64(n_beads, dim, &frames, cfg.kt, Provenance::Simulation)?
        .with_timing(cfg.dt, cfg.save_every as u64)
        .with_segments(segments)?;
    Ok(SimulationReport {
        trajectory,
        diverged: diverged_at,
    })
}

fn mark_diverged(reps: &mut [Replica], step: usize, out: &mut Vec<(usize, usize)>) {
    for (k, r) in reps.iter_mut().enumerate() {
        if r.alive && (diverged(&r.x) || diverged(&r.v)) {
            r.alive = false;
            out.push((k, step));
        }
    }
}

fn batch_eval(reps: &[Replica], f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let xs: Vec<f64> = reps.iter().filter(|r| r.alive).flat_map(|r| r.x.iter().copied()).collect();
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    f(&xs)
}
