//! Verification harness and small toy-system workflows shared by the CLI
//! and the test suites.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::{js_divergence, pwd_js, Histogram};
use crate::dataio::{Provenance, Trajectory};
use crate::dynamics::{simulate, DffForce, Driver, Integrator, LangevinConfig};
use crate::error::{invalid, Result};
use crate::schedule::make_cosine_schedule;
use crate::scorenet::{equivariance_error, random_rotation, ModelConfig, NoisePredictor, ScoreModel};
use crate::toyworlds::{center_covariance, remove_center, ToySystem};
use crate::trainer::{
    denoising_loss_grad, denoising_loss_value, score_matching_loss_value, DenoisingDraws, LossWeighting,
    TrainConfig, Trainer,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Finite-difference checks, relative to the largest entry.
    pub relative: f64,
    /// Largest `|J - J^T|` entry of the noise Jacobian.
    pub asymmetry: f64,
    /// Absolute gap between the noise and score losses.
    pub equivalence: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            relative: 1e-4,
            asymmetry: 1e-5,
            equivalence: 1e-10,
        }
    }
}

/// Small conservative model (under 100 parameters) for gradient checks.
pub fn gradcheck_model(seed: u64) -> Result<ScoreModel> {
    let cfg = ModelConfig {
        n_beads: 3,
        dim: 3,
        n_layers: 1,
        n_features: 2,
        levels: 50,
        conservative: true,
        embed_dim: 2,
        anchored: false,
    };
    ScoreModel::new(cfg, make_cosine_schedule(50)?, seed)
}

const FD_STEP: f64 = 1e-5;
const MAX_FD_PARAMS: usize = 200;

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Finite-difference and identity checks on `model`.
pub fn gradcheck(model: &ScoreModel, tol: Tolerances, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.coords();
    let levels = model.config().levels;
    let mut checks = Vec::new();

    if model.config().conservative {
        let mut grad_err = 0.0f64;
        let mut asym = 0.0f64;
        for _ in 0..3 {
            let x = gaussian_vec(c, &mut rng);
            let level = rng.random_range(1..=levels);
            let eps = model.predict_noise(&x, level)?;
            let mut fd = vec![0.0; c];
            let mut jac = vec![0.0; c * c];
            for k in 0..c {
                let mut p = x.clone();
                p[k] += FD_STEP;
                let (ep, np) = (model.energy(&p, level)?, model.predict_noise(&p, level)?);
                p[k] -= 2.0 * FD_STEP;
                let (em, nm) = (model.energy(&p, level)?, model.predict_noise(&p, level)?);
                fd[k] = (ep - em) / (2.0 * FD_STEP);
                for r in 0..c {
                    jac[r * c + k] = (np[r] - nm[r]) / (2.0 * FD_STEP);
                }
            }
            grad_err = grad_err.max(max_rel(&eps, &fd));
            for r in 0..c {
                for k in 0..c {
                    asym = asym.max((jac[r * c + k] - jac[k * c + r]).abs());
                }
            }
        }
        checks.push(Check {
            name: "noise_vs_energy_gradient",
            value: grad_err,
            tolerance: tol.relative,
        });
        checks.push(Check {
            name: "noise_jacobian_asymmetry",
            value: asym,
            tolerance: tol.asymmetry,
        });
    }

    let batch = 3;
    let x0 = gaussian_vec(batch * c, &mut rng);
    let draws = DenoisingDraws::sample(batch, c, levels, 0.1, &mut rng)?;
    let (_, grad) = denoising_loss_grad(model, &x0, &draws, LossWeighting::Unit)?;
    let theta = model.params().to_vec();
    let mut idx: Vec<usize> = (0..theta.len()).collect();
    if idx.len() > MAX_FD_PARAMS {
        for k in 0..MAX_FD_PARAMS {
            let j = rng.random_range(k..idx.len());
            idx.swap(k, j);
        }
        idx.truncate(MAX_FD_PARAMS);
    }
    let mut fd = Vec::with_capacity(idx.len());
    let mut exact = Vec::with_capacity(idx.len());
    for &k in &idx {
        let mut p = theta.clone();
        p[k] += FD_STEP;
        let up = denoising_loss_value(&model.with_params(&p)?, &x0, &draws, LossWeighting::Unit)?;
        p[k] -= 2.0 * FD_STEP;
        let dn = denoising_loss_value(&model.with_params(&p)?, &x0, &draws, LossWeighting::Unit)?;
        fd.push((up - dn) / (2.0 * FD_STEP));
        exact.push(grad[k]);
    }
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1e-12);
    let err = exact.iter().zip(&fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
    checks.push(Check {
        name: "loss_gradient",
        value: err,
        tolerance: tol.relative,
    });

    checks.push(Check {
        name: "noise_score_loss_equivalence",
        value: loss_equivalence_gap(model, 100, &mut rng)?,
        tolerance: tol.equivalence,
    });
    Ok(checks)
}

/// Largest gap between the unit-weight noise loss and the reweighted score
/// loss over `n` shared single-sample draws.
pub fn loss_equivalence_gap<P: NoisePredictor + ?Sized>(model: &P, n: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let c = model.coords();
    let levels = model.schedule().len();
    let mut gap = 0.0f64;
    for _ in 0..n {
        let x0 = gaussian_vec(c, rng);
        let level = rng.random_range(1..=levels);
        let draws = DenoisingDraws::at_level(1, c, level, rng);
        let a = denoising_loss_value(model, &x0, &draws, LossWeighting::Unit)?;
        let b = score_matching_loss_value(model, &x0, &draws)?;
        gap = gap.max((a - b).abs());
    }
    Ok(gap)
}

/// Trains from scratch and returns the EMA model.
pub fn train_model(train: &[f64], val: &[f64], model: &ModelConfig, config: &TrainConfig) -> Result<ScoreModel> {
    let net = ScoreModel::new(model.clone(), make_cosine_schedule(model.levels)?, config.seed)?;
    let mut t = Trainer::new(net, train.to_vec(), val.to_vec(), config.clone())?;
    t.run()?;
    Ok(t.ema_model())
}

/// Langevin simulation with the DFF at `level`; returns saved frames.
pub fn dff_langevin(model: &ScoreModel, level: usize, init: &[f64], cfg: &LangevinConfig) -> Result<Vec<f64>> {
    let force = DffForce::new(model, level, cfg.kt)?;
    let rep = simulate(Driver::Force(&force), Integrator::Langevin, init, cfg, |_, _| {})?;
    Ok(rep.trajectory.to_f64())
}

/// JS between two scalar samples on a fixed grid.
pub fn histogram_js(a: &[f64], b: &[f64], bins: usize, range: (f64, f64)) -> Result<f64> {
    js_divergence(&Histogram::new_1d(a, bins, range)?, &Histogram::new_1d(b, bins, range)?)
}

/// Fraction of samples above `threshold`.
pub fn occupation(samples: &[f64], threshold: f64) -> f64 {
    samples.iter().filter(|&&x| x > threshold).count() as f64 / samples.len().max(1) as f64
}

/// Double-well setup: data, model, training and simulation settings.
#[derive(Debug, Clone)]
pub struct DoubleWellSetup {
    pub system: ToySystem,
    pub n_train: usize,
    pub n_val: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: LangevinConfig,
    pub bins: usize,
    pub range: (f64, f64),
}

impl DoubleWellSetup {
    pub fn new(seed: u64) -> Result<Self> {
        let system = ToySystem::double_well(1.0, 0.5)?;
        let model = ModelConfig {
            anchored: true,
            ..ModelConfig::new(1, 1)
        };
        let train = TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            iterations: 4000,
            validation_interval: 1000,
            validation_samples: 1000,
            seed,
            ..TrainConfig::default()
        };
        let sim = LangevinConfig {
            mass: 1.0,
            friction: 1.0,
            kt: system.kt,
            dt: 0.01,
            n_steps: 3000,
            save_every: 10,
            n_replicas: 200,
            seed: seed ^ 0xd1ff,
            ..LangevinConfig::default()
        };
        Ok(Self {
            system,
            n_train: 90_000,
            n_val: 10_000,
            model,
            train,
            sim,
            bins: 64,
            range: (-2.5, 2.5),
        })
    }

    /// Oracle train and validation samples.
    pub fn data(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        let mut all = self.system.boltzmann_sample(self.n_train + self.n_val, &mut rng)?;
        let val = all.split_off(self.n_train);
        Ok((all, val))
    }

    pub fn fit(&self, train: &[f64], val: &[f64]) -> Result<ScoreModel> {
        train_model(train, val, &self.model, &self.train)
    }

    /// Simulated histogram JS against `reference` and the right-well occupation.
    pub fn evaluate(&self, model: &ScoreModel, level: usize, init: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
        let xs = dff_langevin(model, level, init, &self.sim)?;
        Ok((histogram_js(&xs, reference, self.bins, self.range)?, occupation(&xs, 0.0)))
    }

    /// Picks the level with the lowest short-simulation JS against `val`.
    pub fn select_level(&self, model: &ScoreModel, candidates: &[usize], init: &[f64], val: &[f64]) -> Result<(usize, Vec<f64>)> {
        let short = Self {
            sim: LangevinConfig {
                n_steps: self.sim.n_steps / 3,
                ..self.sim.clone()
            },
            ..self.clone()
        };
        crate::dynamics::cross_validate_level(candidates, |l| Ok(short.evaluate(model, l, init, val)?.0))
    }
}

/// Five-bead CG harmonic chain: CG data, model, training and simulation settings.
#[derive(Debug, Clone)]
pub struct ChainSetup {
    pub system: ToySystem,
    pub n_train: usize,
    pub n_val: usize,
    /// Number of i.i.d. model samples to draw.
    pub n_iid: usize,
    /// DFF level used in simulation.
    pub level: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sim: LangevinConfig,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    pub pwd_js_mean: f64,
    /// Largest `|C_jk - S_jk| / sqrt(S_jj S_kk)` over bead pairs, where `C`
    /// is the per-axis bead covariance and `S` the exact one.
    pub max_cov_error: f64,
}

impl ChainSetup {
    pub fn new(seed: u64) -> Result<Self> {
        let system = ToySystem::harmonic_chain(9, 1.0, 2, 1.0)?;
        let model = ModelConfig {
            levels: 100,
            ..ModelConfig::new(5, 3)
        };
        let train = TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            iterations: 20_000,
            validation_interval: 5000,
            validation_samples: 2000,
            seed,
            ..TrainConfig::default()
        };
        let sim = LangevinConfig {
            kt: system.kt,
            dt: 0.02,
            n_steps: 5000,
            save_every: 25,
            n_replicas: 100,
            seed: seed ^ 0xc4a1,
            ..LangevinConfig::default()
        };
        Ok(Self {
            system,
            n_train: 50_000,
            n_val: 5_000,
            n_iid: 2000,
            level: 10,
            model,
            train,
            sim,
            bins: 64,
        })
    }

    fn cg_samples(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let map = self.system.cg_map().ok_or_else(|| invalid("chain has no CG map"))?;
        let fine = self.system.boltzmann_sample(n, rng)?;
        Ok(fine.chunks(self.system.dim_total()).flat_map(|f| map.apply(f)).collect())
    }

    pub fn data(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        Ok((self.cg_samples(self.n_train, &mut rng)?, self.cg_samples(self.n_val, &mut rng)?))
    }

    pub fn fit(&self, train: &[f64], val: &[f64]) -> Result<ScoreModel> {
        train_model(train, val, &self.model, &self.train)
    }

    /// Pairwise-distance JS against fresh exact samples and covariance error
    /// against the analytic CG covariance.
    pub fn compare(&self, xs: &[f64]) -> Result<ChainReport> {
        let (n, d) = (self.model.n_beads, self.model.dim);
        let c = n * d;
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed ^ 0x0dd5);
        let reference = self.cg_samples(50_000, &mut rng)?;
        let to_traj = |x: &[f64]| Trajectory::from_f64(n, d, x, self.system.kt, Provenance::Oracle);
        let js = pwd_js(&to_traj(&reference)?, &to_traj(xs)?, 1, self.bins)?;
        let pwd_js_mean = js.iter().map(|(_, v)| v).sum::<f64>() / js.len() as f64;

        // The learned density is translation-invariant, so covariances are
        // compared after removing each frame's centroid.
        let sigma = center_covariance(&self.system.cg_covariance()?, n, d);
        let exact = DMatrix::from_fn(n, n, |j, k| {
            (0..d).map(|a| sigma[(j * d + a, k * d + a)]).sum::<f64>() / d as f64
        });
        let frames = xs.len() / c;
        let mut sample = DMatrix::zeros(n, n);
        let mut centered = vec![0.0; c];
        for f in xs.chunks(c) {
            centered.copy_from_slice(f);
            remove_center(&mut centered, d);
            for j in 0..n {
                for k in 0..n {
                    sample[(j, k)] += (0..d)
                        .map(|a| centered[j * d + a] * centered[k * d + a])
                        .sum::<f64>();
                }
            }
        }
        sample /= (frames * d) as f64;
        let mut max_cov_error = 0.0f64;
        for j in 0..n {
            for k in j..n {
                let scale = (exact[(j, j)] * exact[(k, k)]).sqrt();
                max_cov_error = max_cov_error.max((sample[(j, k)] - exact[(j, k)]).abs() / scale);
            }
        }
        Ok(ChainReport {
            pwd_js_mean,
            max_cov_error,
        })
    }
}

/// Stationary variances of the diffuse-denoise chain and of Brownian dynamics
/// with the DFF at level 1 and the implicit timestep, driven by common
/// random numbers. Frames before `burn_in` are discarded.
pub fn paired_stationary_variance<P: NoisePredictor + ?Sized>(
    model: &P,
    init: &[f64],
    kt: f64,
    n_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if burn_in >= n_steps {
        return Err(invalid("burn_in must be below n_steps"));
    }
    let beta = model.schedule().beta(1);
    let cfg = LangevinConfig {
        mass: 1.0,
        friction: 1.0,
        kt,
        dt: crate::dynamics::implicit_timestep(beta, 1.0, 1.0, kt),
        ..LangevinConfig::default()
    };
    let force = DffForce::new(model, 1, kt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut xd, mut xb) = (init.to_vec(), init.to_vec());
    let mix = ((1.0 - beta).sqrt(), (2.0 - beta).sqrt());
    let mut sums = [[0.0f64; 2]; 2];
    let mut count = 0usize;
    for step in 0..n_steps {
        let eps = gaussian_vec(init.len(), &mut rng);
        let w = gaussian_vec(init.len(), &mut rng);
        let wb: Vec<f64> = eps.iter().zip(&w).map(|(e, w)| (e + mix.0 * w) / mix.1).collect();
        xd = crate::dynamics::diffuse_denoise_with_noise(model, &xd, &eps, &w)?;
        let f = crate::dynamics::ForceProvider::forces(&force, &xb)?;
        xb = crate::dynamics::brownian_update(&xb, &f, &cfg, &wb);
        if step >= burn_in {
            for (k, xs) in [&xd, &xb].into_iter().enumerate() {
                for v in xs {
                    sums[k][0] += v;
                    sums[k][1] += v * v;
                }
            }
            count += init.len();
        }
    }
    let var = |s: [f64; 2]| {
        let m = s[0] / count as f64;
        s[1] / count as f64 - m * m
    };
    Ok((var(sums[0]), var(sums[1])))
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub sim_steps: usize,
    pub level: usize,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            iterations: 6000,
            sim_steps: 12_000,
            level: 5,
        }
    }
}

fn ablation_setup(seed: u64, opts: &AblationOptions) -> Result<DoubleWellSetup> {
    let mut s = DoubleWellSetup::new(seed)?;
    s.train.iterations = opts.iterations;
    s.sim.n_steps = opts.sim_steps;
    s.n_train = 20_000;
    s.n_val = 20_000;
    Ok(s)
}

/// Simulated double-well JS for conservative and direct-vector models.
pub fn ablate_conservative(opts: &AblationOptions) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let base = ablation_setup(seed, opts)?;
        let (train, val) = base.data()?;
        for conservative in [true, false] {
            let mut s = base.clone();
            s.model.conservative = conservative;
            let model = s.fit(&train, &val)?;
            let (js, _) = s.evaluate(&model, opts.level, &train[..s.sim.n_replicas], &val)?;
            rows.push(AblationRow {
                variant: if conservative { "conservative" } else { "non-conservative" }.into(),
                seed,
                metric: "sim_js",
                value: js,
            });
        }
    }
    Ok(rows)
}

/// Simulated double-well JS across DFF levels for one trained model per seed.
pub fn ablate_noise_level(opts: &AblationOptions, levels: &[usize]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let s = ablation_setup(seed, opts)?;
        let (train, val) = s.data()?;
        let model = s.fit(&train, &val)?;
        for &l in levels {
            let (js, _) = s.evaluate(&model, l, &train[..s.sim.n_replicas], &val)?;
            rows.push(AblationRow {
                variant: format!("level {l}"),
                seed,
                metric: "sim_js",
                value: js,
            });
        }
    }
    Ok(rows)
}

/// Simulated double-well JS across hidden widths.
pub fn ablate_features(opts: &AblationOptions, widths: &[usize]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let base = ablation_setup(seed, opts)?;
        let (train, val) = base.data()?;
        for &w in widths {
            let mut s = base.clone();
            s.model.n_features = w;
            let model = s.fit(&train, &val)?;
            let (js, _) = s.evaluate(&model, opts.level, &train[..s.sim.n_replicas], &val)?;
            rows.push(AblationRow {
                variant: format!("{w} features"),
                seed,
                metric: "sim_js",
                value: js,
            });
        }
    }
    Ok(rows)
}

/// Mean equivariance error on held-out points of an isotropic 2-D well.
pub fn mean_equivariance_error(model: &ScoreModel, points: &[f64], level: usize, seed: u64) -> Result<f64> {
    let c = model.coords();
    if points.is_empty() || !points.len().is_multiple_of(c) {
        return Err(invalid("points must hold whole configurations"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let n = points.len() / c;
    for x in points.chunks(c) {
        let rot = random_rotation(model.dim(), &mut rng)?;
        total += equivariance_error(model, x, level, &rot)?;
    }
    Ok(total / n as f64)
}

/// Isotropic 2-D well trained with and without rotation augmentation.
pub fn ablate_equivariance(opts: &AblationOptions) -> Result<Vec<AblationRow>> {
    let system = ToySystem::gaussian_well(2, 1.0, 1.0)?;
    let mut rows = Vec::new();
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = system.boltzmann_sample(20_000, &mut rng)?;
        let test = system.boltzmann_sample(1000, &mut rng)?;
        for augment in [true, false] {
            let model_cfg = ModelConfig {
                anchored: true,
                ..ModelConfig::new(1, 2)
            };
            let cfg = TrainConfig {
                batch_size: 128,
                learning_rate: 1e-3,
                iterations: opts.iterations,
                augment_rotations: augment,
                validation_interval: opts.iterations.max(1),
                validation_samples: 500,
                seed,
                ..TrainConfig::default()
            };
            let model = train_model(&train, &test, &model_cfg, &cfg)?;
            rows.push(AblationRow {
                variant: if augment { "augmented" } else { "no augmentation" }.into(),
                seed,
                metric: "equivariance_error",
                value: mean_equivariance_error(&model, &test, opts.level, seed)?,
            });
        }
    }
    Ok(rows)
}

/// Plain-text table of ablation rows.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<20} {:>6} {:<20} {:>14}\n", "variant", "seed", "metric", "value");
    for r in rows {
        s.push_str(&format!("{:<20} {:>6} {:<20} {:>14.6e}\n", r.variant, r.seed, r.metric, r.value));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_model_passes_gradcheck() {
        let m = gradcheck_model(1).unwrap();
        assert!(m.n_params() <= 100, "{}", m.n_params());
        let checks = gradcheck(&m, Tolerances::default(), 2).unwrap();
        assert_eq!(checks.len(), 4);
        for c in &checks {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn non_conservative_skips_energy_checks() {
        let cfg = ModelConfig {
            conservative: false,
            n_features: 4,
            n_layers: 1,
            levels: 20,
            ..ModelConfig::new(2, 2)
        };
        let m = ScoreModel::new(cfg, make_cosine_schedule(20).unwrap(), 3).unwrap();
        let checks = gradcheck(&m, Tolerances::default(), 4).unwrap();
        let names: Vec<_> = checks.iter().map(|c| c.name).collect();
        assert_eq!(names, vec!["loss_gradient", "noise_score_loss_equivalence"]);
        assert!(checks.iter().all(Check::passed));
    }

    #[test]
    fn failing_check_is_reported() {
        let c = Check { name: "x", value: 2.0, tolerance: 1.0 };
        assert!(!c.passed());
        assert!(!Check { name: "x", value: f64::NAN, tolerance: 1.0 }.passed());
    }

    #[test]
    fn occupation_and_table() {
        assert_eq!(occupation(&[-1.0, 1.0, 2.0, -0.5], 0.0), 0.5);
        let t = format_table(&[AblationRow { variant: "a".into(), seed: 1, metric: "m", value: 0.5 }]);
        assert!(t.lines().count() == 2 && t.contains("5.000000e-1"));
    }
}
