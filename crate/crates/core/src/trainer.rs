//! Noise-prediction training: split noise-level sampling, the reweighted
//! denoising loss, rotation augmentation, Adam with cosine decay and an EMA
//! copy of the parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DffError, Result};
use crate::schedule::NoiseSchedule;
use crate::scorenet::{random_rotation, NoisePredictor, ScoreModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeighting {
    /// `K_i = 1`
    Unit,
    /// `K_i = beta_i^2 / (2 sigma_i^2 alpha_i (1 - abar_i))`
    Elbo,
}

impl LossWeighting {
    pub fn weight(self, schedule: &NoiseSchedule, level: usize) -> f64 {
        match self {
            LossWeighting::Unit => 1.0,
            LossWeighting::Elbo => {
                let b = schedule.beta(level);
                let var = schedule.sigma(level).powi(2);
                b * b / (2.0 * var * schedule.alpha(level) * (1.0 - schedule.alpha_bar(level)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Floor of the cosine learning-rate decay.
    pub min_learning_rate: f64,
    pub iterations: usize,
    pub ema_decay: f64,
    pub augment_rotations: bool,
    /// Fraction of levels in the low-noise bucket.
    pub noise_split: f64,
    pub seed: u64,
    pub loss_weighting: LossWeighting,
    pub validation_interval: usize,
    /// Validation samples used per evaluation (capped by the split size).
    pub validation_samples: usize,
    /// Stop after this many validation checks without improvement.
    pub patience: Option<usize>,
    /// Pair every draw with a copy using the same data point and level and
    /// negated noise.
    pub antithetic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 4e-4,
            min_learning_rate: 1e-5,
            iterations: 10_000,
            ema_decay: 0.995,
            augment_rotations: true,
            noise_split: 0.1,
            seed: 0,
            loss_weighting: LossWeighting::Unit,
            validation_interval: 500,
            validation_samples: 2048,
            patience: None,
            antithetic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid("ema_decay must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0 && self.min_learning_rate >= 0.0) {
            return Err(invalid("learning rates must be non-negative"));
        }
        if self.validation_interval == 0 {
            return Err(invalid("validation_interval must be >= 1"));
        }
        Ok(())
    }

    /// Cosine decay from `learning_rate` to `min_learning_rate`.
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let floor = self.min_learning_rate.min(self.learning_rate);
        let progress = iteration as f64 / self.iterations.max(1) as f64;
        floor
            + 0.5
                * (self.learning_rate - floor)
                * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// With probability 1/2 a level from `1..=floor(L * split)`, otherwise from
/// the remaining upper levels.
pub fn sample_noise_level<R: Rng + ?Sized>(levels: usize, split: f64, rng: &mut R) -> Result<usize> {
    let low = low_bucket(levels, split)?;
    Ok(if rng.random::<bool>() {
        rng.random_range(1..=low)
    } else {
        rng.random_range(low + 1..=levels)
    })
}

fn low_bucket(levels: usize, split: f64) -> Result<usize> {
    if levels < 2 {
        return Err(invalid("split level sampling needs L >= 2"));
    }
    let low = (levels as f64 * split).floor() as usize;
    if low == 0 || low >= levels {
        return Err(invalid(format!(
            "split {split} leaves an empty bucket for L = {levels}"
        )));
    }
    Ok(low)
}

/// Shared randomness for one loss evaluation: a level and a noise vector per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingDraws {
    pub levels: Vec<usize>,
    pub eps: Vec<f64>,
}

impl DenoisingDraws {
    pub fn sample<R: Rng + ?Sized>(
        batch: usize,
        coords: usize,
        levels: usize,
        split: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut lv = Vec::with_capacity(batch);
        let mut eps = Vec::with_capacity(batch * coords);
        for _ in 0..batch {
            lv.push(sample_noise_level(levels, split, rng)?);
            for _ in 0..coords {
                eps.push(StandardNormal.sample(rng));
            }
        }
        Ok(Self { levels: lv, eps })
    }

    /// Every sample at the same `level`.
    pub fn at_level<R: Rng + ?Sized>(batch: usize, coords: usize, level: usize, rng: &mut R) -> Self {
        let eps = (0..batch * coords).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            levels: vec![level; batch],
            eps,
        }
    }
}

/// Interleaves each draw with its mirror image `-eps`.
fn antithetic_pairs(x0: &[f64], draws: &DenoisingDraws, c: usize) -> (Vec<f64>, DenoisingDraws) {
    let n = draws.levels.len();
    let mut xs = Vec::with_capacity(2 * x0.len());
    let mut levels = Vec::with_capacity(2 * n);
    let mut eps = Vec::with_capacity(2 * x0.len());
    for b in 0..n {
        let r = b * c..(b + 1) * c;
        xs.extend_from_slice(&x0[r.clone()]);
        xs.extend_from_slice(&x0[r.clone()]);
        levels.extend([draws.levels[b]; 2]);
        eps.extend_from_slice(&draws.eps[r.clone()]);
        eps.extend(draws.eps[r].iter().map(|e| -e));
    }
    (xs, DenoisingDraws { levels, eps })
}

fn noised_inputs(schedule: &NoiseSchedule, x0: &[f64], draws: &DenoisingDraws) -> Result<Vec<f64>> {
    let batch = draws.levels.len();
    if batch == 0 {
        return Err(invalid("loss needs a non-empty batch"));
    }
    if x0.len() != draws.eps.len() || !x0.len().is_multiple_of(batch) {
        return Err(invalid("draws do not match the batch"));
    }
    let c = x0.len() / batch;
    let mut xs = Vec::with_capacity(x0.len());
    for (b, &lvl) in draws.levels.iter().enumerate() {
        let r = b * c..(b + 1) * c;
        xs.extend(schedule.diffuse(&x0[r.clone()], lvl, &draws.eps[r])?);
    }
    Ok(xs)
}

fn check_loss(loss: f64, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(DffError::TrainingDiverged {
            iteration,
            detail: format!("loss evaluated to {loss}"),
        })
    }
}

/// `mean_b K_i |eps_b - eps_theta(x_i, i)|^2` on fixed draws, any predictor.
pub fn denoising_loss_value<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &[f64],
    draws: &DenoisingDraws,
    weighting: LossWeighting,
) -> Result<f64> {
    let xs = noised_inputs(model.schedule(), x0, draws)?;
    let pred = model.predict_noise_batch(&xs, &draws.levels)?;
    let c = model.coords();
    let total: f64 = draws
        .levels
        .iter()
        .enumerate()
        .map(|(b, &lvl)| {
            let k = weighting.weight(model.schedule(), lvl);
            let r = b * c..(b + 1) * c;
            k * pred[r.clone()]
                .iter()
                .zip(&draws.eps[r])
                .map(|(p, e)| (e - p).powi(2))
                .sum::<f64>()
        })
        .sum();
    check_loss(total / draws.levels.len() as f64, 0)
}

/// Denoising loss and its exact parameter gradient on fixed draws.
pub fn denoising_loss_grad(
    model: &ScoreModel,
    x0: &[f64],
    draws: &DenoisingDraws,
    weighting: LossWeighting,
) -> Result<(f64, Vec<f64>)> {
    let xs = noised_inputs(model.schedule(), x0, draws)?;
    let weights: Vec<f64> = draws
        .levels
        .iter()
        .map(|&l| weighting.weight(model.schedule(), l))
        .collect();
    let (loss, grad) = model.regression_loss_grad(&xs, &draws.levels, &draws.eps, &weights)?;
    check_loss(loss, 0)?;
    Ok((loss, grad))
}

/// Draws levels by the split sampler and Gaussian noise, then evaluates
/// [`denoising_loss_grad`].
pub fn denoising_loss<R: Rng + ?Sized>(
    model: &ScoreModel,
    x0: &[f64],
    rng: &mut R,
    weighting: LossWeighting,
    split: f64,
) -> Result<(f64, Vec<f64>)> {
    let c = model.config().coords();
    if x0.is_empty() || !x0.len().is_multiple_of(c) {
        return Err(invalid("batch must hold whole configurations"));
    }
    let draws = DenoisingDraws::sample(x0.len() / c, c, model.config().levels, split, rng)?;
    denoising_loss_grad(model, x0, &draws, weighting)
}

/// `(1 - abar_i) mean |s_theta(x_i, i) - grad log q(x_i | x_0)|^2` on fixed draws.
pub fn score_matching_loss_value<P: NoisePredictor + ?Sized>(
    model: &P,
    x0: &[f64],
    draws: &DenoisingDraws,
) -> Result<f64> {
    let schedule = model.schedule();
    let xs = noised_inputs(schedule, x0, draws)?;
    let pred = model.predict_noise_batch(&xs, &draws.levels)?;
    let c = model.coords();
    let mut total = 0.0;
    for (b, &lvl) in draws.levels.iter().enumerate() {
        let abar = schedule.alpha_bar(lvl);
        let var = 1.0 - abar;
        let mut sq = 0.0;
        for k in b * c..(b + 1) * c {
            let s_theta = -pred[k] / var.sqrt();
            let target = -(xs[k] - abar.sqrt() * x0[k]) / var;
            sq += (s_theta - target).powi(2);
        }
        total += var * sq;
    }
    check_loss(total / draws.levels.len() as f64, 0)
}

/// Score-matching loss at one fixed level with fresh noise.
pub fn score_matching_loss<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x0: &[f64],
    level: usize,
    rng: &mut R,
) -> Result<f64> {
    model.schedule().check_level(level)?;
    let c = model.coords();
    let draws = DenoisingDraws::at_level(x0.len() / c.max(1), c, level, rng);
    score_matching_loss_value(model, x0, &draws)
}

fn check_force_shapes(coords: usize, z: &[f64], f: &[f64], kt: f64) -> Result<()> {
    if z.len() != f.len() || z.is_empty() || !z.len().is_multiple_of(coords) {
        return Err(invalid(format!(
            "force matching shapes disagree: {} positions, {} forces, {} per frame",
            z.len(),
            f.len(),
            coords
        )));
    }
    if !(kt > 0.0) {
        return Err(invalid("kT must be positive"));
    }
    Ok(())
}

/// `mean |dff_force(z, i0, kT) - f|^2` for any predictor.
pub fn force_matching_loss_value<P: NoisePredictor + ?Sized>(
    model: &P,
    level: usize,
    z: &[f64],
    f: &[f64],
    kt: f64,
) -> Result<f64> {
    let c = model.coords();
    check_force_shapes(c, z, f, kt)?;
    let force = crate::scorenet::dff_force_batch(model, z, level, kt)?;
    let total: f64 = force.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(total / (z.len() / c) as f64)
}

/// Force-matching baseline with parameter gradient. Since
/// `dff = -(kT / s_i) eps`, the loss is a weighted regression of `eps` onto
/// `-(s_i / kT) f` with weight `(kT / s_i)^2`.
pub fn force_matching_loss(
    model: &ScoreModel,
    level: usize,
    z: &[f64],
    f: &[f64],
    kt: f64,
) -> Result<(f64, Vec<f64>)> {
    let c = model.config().coords();
    check_force_shapes(c, z, f, kt)?;
    model.schedule().check_level(level)?;
    let s = model.schedule().noise_scale(level);
    let batch = z.len() / c;
    let targets: Vec<f64> = f.iter().map(|v| -s * v / kt).collect();
    let weights = vec![(kt / s).powi(2); batch];
    model.regression_loss_grad(z, &vec![level; batch], &targets, &weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub iteration: usize,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub rng: ChaCha8Rng,
    pub best_val: f64,
    pub stale_checks: usize,
}

impl TrainerState {
    pub fn fresh(model: &ScoreModel, seed: u64) -> Self {
        let n = model.n_params();
        Self {
            iteration: 0,
            params: model.params().to_vec(),
            ema: model.params().to_vec(),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            best_val: f64::INFINITY,
            stale_checks: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub struct Trainer {
    model: ScoreModel,
    config: TrainConfig,
    train: Vec<f64>,
    val: Vec<f64>,
    state: TrainerState,
    history: Vec<HistoryRow>,
    stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub raw: ScoreModel,
    pub ema: ScoreModel,
    pub history: Vec<HistoryRow>,
    pub stopped_early: bool,
}

impl Trainer {
    pub fn new(model: ScoreModel, train: Vec<f64>, val: Vec<f64>, config: TrainConfig) -> Result<Self> {
        let state = TrainerState::fresh(&model, config.seed);
        Self::resume(model, train, val, config, state)
    }

    pub fn resume(
        model: ScoreModel,
        train: Vec<f64>,
        val: Vec<f64>,
        config: TrainConfig,
        state: TrainerState,
    ) -> Result<Self> {
        config.validate()?;
        let c = model.config().coords();
        if train.is_empty() || !train.len().is_multiple_of(c) || !val.len().is_multiple_of(c) {
            return Err(invalid("training data must hold whole, non-empty frames"));
        }
        if state.params.len() != model.n_params() {
            return Err(invalid("trainer state does not match the model"));
        }
        low_bucket(model.config().levels, config.noise_split)?;
        Ok(Self {
            model,
            config,
            train,
            val,
            state,
            history: Vec::new(),
            stopped_early: false,
        })
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn raw_model(&self) -> ScoreModel {
        self.model.with_params(&self.state.params).expect("finite parameters")
    }

    pub fn ema_model(&self) -> ScoreModel {
        self.model.with_params(&self.state.ema).expect("finite parameters")
    }

    pub fn is_finished(&self) -> bool {
        self.stopped_early || self.state.iteration >= self.config.iterations
    }

    fn batch(&mut self, size: usize) -> Result<Vec<f64>> {
        let c = self.model.config().coords();
        let dim = self.model.config().dim;
        let n = self.train.len() / c;
        let mut out = Vec::with_capacity(size * c);
        for _ in 0..size {
            let k = self.state.rng.random_range(0..n);
            let start = out.len();
            out.extend_from_slice(&self.train[k * c..(k + 1) * c]);
            if self.config.augment_rotations && dim > 1 {
                let rot = random_rotation(dim, &mut self.state.rng)?;
                rot.apply(&mut out[start..]);
            }
        }
        Ok(out)
    }

    /// One optimizer step. On a non-finite loss or gradient the state is
    /// left untouched and an error is returned.
    pub fn step(&mut self) -> Result<f64> {
        let mut rng_backup = self.state.rng.clone();
        let size = if self.config.antithetic {
            self.config.batch_size.div_ceil(2)
        } else {
            self.config.batch_size
        };
        let mut x0 = self.batch(size)?;
        let model = self.model.with_params(&self.state.params)?;
        let c = model.config().coords();
        let mut draws = DenoisingDraws::sample(
            size,
            c,
            model.config().levels,
            self.config.noise_split,
            &mut self.state.rng,
        )?;
        if self.config.antithetic {
            (x0, draws) = antithetic_pairs(&x0, &draws, c);
        }
        let iteration = self.state.iteration;
        let outcome = denoising_loss_grad(&model, &x0, &draws, self.config.loss_weighting);
        let (loss, grad) = match outcome {
            Ok(v) if v.1.iter().all(|g| g.is_finite()) => v,
            Ok(_) | Err(DffError::TrainingDiverged { .. }) => {
                std::mem::swap(&mut self.state.rng, &mut rng_backup);
                return Err(DffError::TrainingDiverged {
                    iteration,
                    detail: "non-finite loss or gradient; state kept at last good step".into(),
                });
            }
            Err(e) => return Err(e),
        };

        let t = (iteration + 1) as i32;
        let lr = self.config.learning_rate_at(iteration);
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let decay = self.config.ema_decay;
        let s = &mut self.state;
        for k in 0..grad.len() {
            let g = grad[k];
            s.adam_m[k] = ADAM_BETA1 * s.adam_m[k] + (1.0 - ADAM_BETA1) * g;
            s.adam_v[k] = ADAM_BETA2 * s.adam_v[k] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = s.adam_m[k] / bc1;
            let v_hat = s.adam_v[k] / bc2;
            s.params[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            s.ema[k] += (1.0 - decay) * (s.params[k] - s.ema[k]);
        }
        s.iteration += 1;
        Ok(loss)
    }

    /// Denoising loss of the EMA parameters on the validation split, with
    /// randomness fixed by the seed and iteration.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        let c = self.model.config().coords();
        let n = (self.val.len() / c).min(self.config.validation_samples);
        if n == 0 {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed_0f_7a11);
        rng.set_stream(self.state.iteration as u64);
        let model = self.ema_model();
        let mut total = 0.0;
        for chunk in self.val[..n * c].chunks(512 * c) {
            let draws = DenoisingDraws::sample(
                chunk.len() / c,
                c,
                model.config().levels,
                self.config.noise_split,
                &mut rng,
            )?;
            total += denoising_loss_value(&model, chunk, &draws, self.config.loss_weighting)?
                * (chunk.len() / c) as f64;
        }
        Ok(Some(total / n as f64))
    }

    /// Trains until the iteration budget is spent or early stopping triggers.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    /// Like [`Trainer::run`] but pauses once `stop` iterations are done.
    pub fn run_until(&mut self, stop: usize) -> Result<()> {
        while !self.is_finished() && self.state.iteration < stop {
            let loss = self.step()?;
            let it = self.state.iteration;
            let check = it.is_multiple_of(self.config.validation_interval) || it == self.config.iterations;
            let val_loss = if check { self.validation_loss()? } else { None };
            self.history.push(HistoryRow {
                iteration: it,
                train_loss: loss,
                val_loss,
            });
            if let (Some(v), Some(patience)) = (val_loss, self.config.patience) {
                if v < self.state.best_val {
                    self.state.best_val = v;
                    self.state.stale_checks = 0;
                } else {
                    self.state.stale_checks += 1;
                    if self.state.stale_checks >= patience {
                        self.stopped_early = true;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            raw: self.raw_model(),
            ema: self.ema_model(),
            history: self.history,
            stopped_early: self.stopped_early,
        }
    }
}

/// Convenience wrapper around [`Trainer`].
pub fn train(model: ScoreModel, train: Vec<f64>, val: Vec<f64>, config: TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(model, train, val, config)?;
    t.run()?;
    Ok(t.into_outcome())
}

/// History as `iteration,train_loss,val_loss` CSV.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from("iteration,train_loss,val_loss\n");
    for r in history {
        let v = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.iteration, r.train_loss, v));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_cosine_schedule;
    use crate::scorenet::ModelConfig;
    use crate::toyworlds::{projected_forces, ToySystem};

    struct Scaled {
        schedule: NoiseSchedule,
        n: usize,
        dim: usize,
        factor: f64,
    }

    impl NoisePredictor for Scaled {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }
        fn n_beads(&self) -> usize {
            self.n
        }
        fn dim(&self) -> usize {
            self.dim
        }
        fn predict_noise_batch(&self, xs: &[f64], _: &[usize]) -> Result<Vec<f64>> {
            Ok(xs.iter().map(|v| self.factor * v).collect())
        }
    }

    /// Returns a fixed noise vector regardless of input.
    struct Replay(NoiseSchedule, Vec<f64>);

    impl NoisePredictor for Replay {
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn n_beads(&self) -> usize {
            2
        }
        fn dim(&self) -> usize {
            3
        }
        fn predict_noise_batch(&self, _: &[f64], _: &[usize]) -> Result<Vec<f64>> {
            Ok(self.1.clone())
        }
    }

    fn tiny(n_beads: usize, dim: usize, features: usize, anchored: bool) -> ScoreModel {
        let cfg = ModelConfig {
            n_beads,
            dim,
            n_layers: 1,
            n_features: features,
            levels: 20,
            conservative: true,
            embed_dim: 2,
            anchored,
        };
        ScoreModel::new(cfg, make_cosine_schedule(20).unwrap(), 11).unwrap()
    }

    fn gaussian(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn split_sampler_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut low = 0;
        for _ in 0..n {
            let i = sample_noise_level(1000, 0.1, &mut rng).unwrap();
            assert!((1..=1000).contains(&i));
            low += (i <= 100) as usize;
        }
        assert!((low as f64 / n as f64 - 0.5).abs() < 0.01);

        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[sample_noise_level(2, 0.5, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        assert!((counts[1] as f64 / 10_000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn split_sampler_rejects_empty_bucket() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_noise_level(5, 0.1, &mut rng).is_err());
        assert!(sample_noise_level(10, 1.0, &mut rng).is_err());
        assert!(sample_noise_level(1, 0.5, &mut rng).is_err());
    }

    #[test]
    fn learning_rate_cosine() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            iterations: 100,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 1e-3);
        assert!((cfg.learning_rate_at(100) - 1e-5).abs() < 1e-18);
        assert!((cfg.learning_rate_at(50) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        let zero = TrainConfig {
            learning_rate: 0.0,
            ..cfg
        };
        assert_eq!(zero.learning_rate_at(30), 0.0);
        assert_eq!(TrainConfig::default().ema_decay, 0.995);
    }

    #[test]
    fn stub_losses() {
        let sched = make_cosine_schedule(50).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = 4000;
        let x0 = gaussian(batch * 6, 3);
        let draws = DenoisingDraws::sample(batch, 6, 50, 0.1, &mut rng).unwrap();

        let perfect = Replay(sched.clone(), draws.eps.clone());
        assert_eq!(denoising_loss_value(&perfect, &x0, &draws, LossWeighting::Unit).unwrap(), 0.0);

        let zero = Replay(sched.clone(), vec![0.0; batch * 6]);
        let l3 = denoising_loss_value(&zero, &x0, &draws, LossWeighting::Unit).unwrap();
        let norm: f64 = draws.eps.iter().map(|e| e * e).sum::<f64>() / batch as f64;
        assert!((l3 - norm).abs() < 1e-12 * norm);
        // chi-square with 6 dof, standard error sqrt(12 / batch)
        assert!((l3 - 6.0).abs() < 4.0 * (12.0 / batch as f64).sqrt());

        let at = DenoisingDraws::at_level(batch, 6, 7, &mut rng);
        let a = denoising_loss_value(&zero, &x0, &at, LossWeighting::Unit).unwrap();
        let b = score_matching_loss_value(&zero, &x0, &at).unwrap();
        assert!((a - b).abs() < 1e-10 * a);
    }

    #[test]
    fn loss_equivalence_on_shared_draws() {
        let model = tiny(3, 2, 5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = gaussian(6, 5);
        for _ in 0..100 {
            let level = rng.random_range(1..=20);
            let draws = DenoisingDraws::at_level(1, 6, level, &mut rng);
            let a = denoising_loss_value(&model, &x0, &draws, LossWeighting::Unit).unwrap();
            let b = score_matching_loss_value(&model, &x0, &draws).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn elbo_weight_formula() {
        let sched = make_cosine_schedule(100).unwrap();
        for i in [1, 10, 100] {
            let b = sched.beta(i);
            let want = b / (2.0 * sched.alpha(i) * (1.0 - sched.alpha_bar(i)));
            let got = LossWeighting::Elbo.weight(&sched, i);
            assert!((got - want).abs() < 1e-12 * want);
        }
        assert_eq!(LossWeighting::Unit.weight(&sched, 3), 1.0);
    }

    #[test]
    fn denoising_gradient_matches_finite_differences() {
        for (anchored, weighting) in [(false, LossWeighting::Unit), (true, LossWeighting::Elbo)] {
            let model = tiny(2, 2, 2, anchored);
            assert!(model.n_params() <= 100, "{}", model.n_params());
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let x0 = gaussian(4 * 3, 7);
            let draws = DenoisingDraws::sample(3, 4, 20, 0.1, &mut rng).unwrap();
            let (_, grad) = denoising_loss_grad(&model, &x0, &draws, weighting).unwrap();
            let theta = model.params().to_vec();
            let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for k in 0..theta.len() {
                let h = 1e-5;
                let mut p = theta.clone();
                p[k] += h;
                let up = denoising_loss_value(&model.with_params(&p).unwrap(), &x0, &draws, weighting).unwrap();
                p[k] -= 2.0 * h;
                let dn = denoising_loss_value(&model.with_params(&p).unwrap(), &x0, &draws, weighting).unwrap();
                let fd = (up - dn) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() < 1e-4 * scale.max(1e-8),
                    "param {k}: fd {fd} vs {}",
                    grad[k]
                );
            }
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let model = tiny(2, 2, 3, false);
        let model = model.with_params(&vec![1e200; model.n_params()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = vec![0.5, 0.0, 1.0, 1.0];
        let draws = DenoisingDraws::sample(1, 4, 20, 0.1, &mut rng).unwrap();
        let err = denoising_loss_grad(&model, &x0, &draws, LossWeighting::Unit).unwrap_err();
        assert!(matches!(err, DffError::TrainingDiverged { .. }));
    }

    #[test]
    fn force_matching_cases() {
        let model = tiny(3, 2, 4, false);
        let z = gaussian(5 * 6, 9);
        let f = crate::scorenet::dff_force_batch(&model, &z, 3, 1.3).unwrap();
        let (loss, grad) = force_matching_loss(&model, 3, &z, &f, 1.3).unwrap();
        assert!(loss < 1e-20);
        assert!(grad.iter().all(|g| g.abs() < 1e-9));
        let direct = force_matching_loss_value(&model, 3, &z, &f, 1.3).unwrap();
        assert!(direct < 1e-20);

        let f2: Vec<f64> = f.iter().map(|v| v + 0.5).collect();
        let (a, _) = force_matching_loss(&model, 3, &z, &f2, 1.3).unwrap();
        let b = force_matching_loss_value(&model, 3, &z, &f2, 1.3).unwrap();
        assert!((a - b).abs() < 1e-10 * b);

        assert!(force_matching_loss(&model, 3, &z, &f[1..], 1.3).is_err());

        let sched = make_cosine_schedule(20).unwrap();
        let base = Scaled { schedule: sched.clone(), n: 3, dim: 2, factor: 0.7 };
        let shrunk = Scaled { schedule: sched, n: 3, dim: 2, factor: 0.7 / 4.0 };
        let l1 = force_matching_loss_value(&base, 5, &z, &f2, 1.0).unwrap();
        let l2 = force_matching_loss_value(&shrunk, 5, &z, &f2, 4.0).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1);
    }

    /// Predicts the exact CG mean force of a harmonic chain, scaled by `factor`.
    struct ChainForce {
        schedule: NoiseSchedule,
        system: ToySystem,
        n: usize,
        factor: f64,
    }

    impl NoisePredictor for ChainForce {
        fn schedule(&self) -> &NoiseSchedule {
            &self.schedule
        }
        fn n_beads(&self) -> usize {
            self.n
        }
        fn dim(&self) -> usize {
            3
        }
        fn predict_noise_batch(&self, xs: &[f64], levels: &[usize]) -> Result<Vec<f64>> {
            let s = self.schedule.noise_scale(levels[0]);
            let kt = self.system.kt;
            let mut out = Vec::new();
            for z in xs.chunks(self.n * 3) {
                let f = self.system.cg_mean_force(z)?;
                out.extend(f.iter().map(|v| -self.factor * v * s / kt));
            }
            Ok(out)
        }
    }

    #[test]
    fn force_matching_floor_is_the_projected_noise() {
        let system = ToySystem::harmonic_chain(9, 1.0, 2, 1.0).unwrap();
        let map = system.cg_map().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fine = system.boltzmann_sample(20_000, &mut rng).unwrap();
        let (z, f) = projected_forces(&system, &map, &fine).unwrap();
        let sched = make_cosine_schedule(20).unwrap();
        let n = map.n_cg();
        let exact = ChainForce { schedule: sched.clone(), system: system.clone(), n, factor: 1.0 };
        let floor = force_matching_loss_value(&exact, 1, &z, &f, 1.0).unwrap();

        // sliced chain: each kept interior bead has two fine neighbours whose
        // bond forces fluctuate given z; the conditional variance per
        // coordinate is spring * kT / 2 for each free neighbour
        let free_neighbours = 2 * (n - 1);
        let per_coord = 1.0 * 1.0 / 2.0;
        let analytic = free_neighbours as f64 * per_coord * 3.0;
        assert!((floor - analytic).abs() < 0.05 * analytic, "{floor} vs {analytic}");

        for factor in [0.8, 1.2] {
            let other = ChainForce { schedule: sched.clone(), system: system.clone(), n, factor };
            assert!(force_matching_loss_value(&other, 1, &z, &f, 1.0).unwrap() > floor);
        }
    }

    fn gaussian_trainer(config: TrainConfig) -> Trainer {
        let model = tiny(1, 1, 8, true);
        Trainer::new(model, gaussian(2000, 12), gaussian(500, 13), config).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            iterations: 30,
            validation_interval: 10,
            validation_samples: 200,
            learning_rate: 1e-3,
            seed: 21,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut t = gaussian_trainer(TrainConfig {
            learning_rate: 0.0,
            ..quick()
        });
        let before = t.state().params.clone();
        t.run().unwrap();
        assert_eq!(t.state().params, before);
        assert_eq!(t.state().ema, before);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let mut a = gaussian_trainer(quick());
        a.run().unwrap();
        let mut b = gaussian_trainer(quick());
        b.run().unwrap();
        assert_eq!(a.history(), b.history());
        assert_eq!(a.state(), b.state());
        assert_eq!(a.history().iter().filter(|r| r.val_loss.is_some()).count(), 3);

        let mut first = gaussian_trainer(TrainConfig { iterations: 30, ..quick() });
        for _ in 0..13 {
            first.step().unwrap();
        }
        let snapshot = first.state().clone();
        let model = tiny(1, 1, 8, true);
        let mut resumed = Trainer::resume(model, gaussian(2000, 12), gaussian(500, 13), quick(), snapshot).unwrap();
        resumed.run().unwrap();
        assert_eq!(resumed.state(), a.state());
    }

    #[test]
    fn ema_stays_inside_the_parameter_envelope() {
        let mut t = gaussian_trainer(quick());
        let mut lo = t.state().params.clone();
        let mut hi = lo.clone();
        while !t.is_finished() {
            t.step().unwrap();
            for (k, p) in t.state().params.iter().enumerate() {
                lo[k] = lo[k].min(*p);
                hi[k] = hi[k].max(*p);
            }
            for (k, e) in t.state().ema.iter().enumerate() {
                assert!(*e >= lo[k] - 1e-15 && *e <= hi[k] + 1e-15);
            }
        }
    }

    #[test]
    fn early_stopping_triggers() {
        let mut t = gaussian_trainer(TrainConfig {
            learning_rate: 0.0,
            iterations: 1000,
            patience: Some(2),
            ..quick()
        });
        t.run().unwrap();
        // validation randomness differs per check, so with a frozen model the
        // loss cannot improve forever; it stops well before the budget
        assert!(t.state().iteration < 1000);
        assert!(t.into_outcome().stopped_early);
    }

    #[test]
    fn rotation_augmentation_preserves_norms() {
        let model = tiny(2, 2, 3, false);
        let data = vec![1.0, 0.0, 0.0, 2.0];
        let mut t = Trainer::new(
            model,
            data.clone(),
            vec![],
            TrainConfig { batch_size: 8, ..quick() },
        )
        .unwrap();
        let batch = t.batch(t.config().batch_size).unwrap();
        for frame in batch.chunks(4) {
            assert!((frame[0].hypot(frame[1]) - 1.0).abs() < 1e-12);
            assert!((frame[2].hypot(frame[3]) - 2.0).abs() < 1e-12);
        }
        assert!(batch.chunks(4).any(|f| (f[0] - 1.0).abs() > 1e-6));
    }

    #[test]
    fn history_csv_layout() {
        let rows = vec![
            HistoryRow { iteration: 1, train_loss: 0.5, val_loss: None },
            HistoryRow { iteration: 2, train_loss: 0.25, val_loss: Some(0.125) },
        ];
        assert_eq!(history_csv(&rows), "iteration,train_loss,val_loss\n1,0.5,\n2,0.25,0.125\n");
    }

    #[test]
    fn invalid_configs() {
        let bad = TrainConfig { ema_decay: 1.0, ..quick() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..quick() };
        assert!(bad.validate().is_err());
    }
}
