//! Ancestral sampling of the learned reverse chain (i.i.d. equilibrium samples).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{invalid, DffError, Result};
use crate::schedule::NoiseSchedule;
use crate::scorenet::NoisePredictor;

/// Samples generated per RNG stream.
pub const SAMPLE_BLOCK: usize = 256;

/// Reverse-chain mean `(x - beta_i / sqrt(1 - abar_i) * eps) / sqrt(alpha_i)`.
pub fn denoise_mean(schedule: &NoiseSchedule, x: &[f64], eps: &[f64], level: usize) -> Result<Vec<f64>> {
    schedule.check_level(level)?;
    if x.len() != eps.len() {
        return Err(invalid("noise prediction and configuration differ in length"));
    }
    Ok(posterior_update(
        x,
        eps,
        schedule.alpha(level),
        schedule.beta(level),
        schedule.alpha_bar(level),
        0.0,
        &[],
    ))
}

/// `mu + sigma * w` for explicit coefficients; `w` empty means no noise.
pub fn posterior_update(
    x: &[f64],
    eps: &[f64],
    alpha: f64,
    beta: f64,
    alpha_bar: f64,
    sigma: f64,
    w: &[f64],
) -> Vec<f64> {
    let c = beta / (1.0 - alpha_bar).sqrt();
    let inv = 1.0 / alpha.sqrt();
    x.iter()
        .zip(eps)
        .enumerate()
        .map(|(k, (xv, e))| {
            let mu = inv * (xv - c * e);
            if w.is_empty() {
                mu
            } else {
                mu + sigma * w[k]
            }
        })
        .collect()
}

/// One reverse step `x_i -> x_{i-1}`; the step from level 1 returns the mean.
pub fn denoise_step<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    x: &[f64],
    level: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let out = denoise_batch(model, x, level, rng)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(DffError::SimulationDiverged { step: level, replica: 0 });
    }
    Ok(out)
}

/// [`denoise_step`] over a batch of configurations at one level. Non-finite
/// outputs are returned as-is so callers can drop individual samples.
pub fn denoise_batch<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    xs: &[f64],
    level: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let sched = model.schedule();
    sched.check_level(level)?;
    let c = model.coords();
    if !xs.len().is_multiple_of(c) {
        return Err(invalid("batch must hold whole configurations"));
    }
    let eps = model.predict_noise_batch(xs, &vec![level; xs.len() / c])?;
    let w: Vec<f64> = if level > 1 {
        (0..xs.len()).map(|_| StandardNormal.sample(rng)).collect()
    } else {
        Vec::new()
    };
    Ok(posterior_update(
        xs,
        &eps,
        sched.alpha(level),
        sched.beta(level),
        sched.alpha_bar(level),
        sched.sigma(level),
        &w,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Flattened configurations that stayed finite, in generation order.
    pub samples: Vec<f64>,
    pub n_failed: usize,
}

impl SampleSet {
    pub fn len(&self, coords: usize) -> usize {
        self.samples.len() / coords
    }
}

/// RNG for block `block` of a run seeded with `seed`.
pub fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

/// Draws `n_samples` configurations by running the reverse chain from
/// `x_L ~ N(0, I)` down to level 1. Samples that turn non-finite are
/// dropped and counted.
pub fn ancestral_sample<P: NoisePredictor + ?Sized>(model: &P, n_samples: usize, seed: u64) -> Result<SampleSet> {
    let n_blocks = n_samples.div_ceil(SAMPLE_BLOCK);
    let blocks: Vec<Result<(Vec<f64>, usize)>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let size = SAMPLE_BLOCK.min(n_samples - b * SAMPLE_BLOCK);
            sample_block(model, size, &mut block_rng(seed, b as u64))
        })
        .collect();
    let mut out = SampleSet {
        samples: Vec::with_capacity(n_samples * model.coords()),
        n_failed: 0,
    };
    for b in blocks {
        let (s, failed) = b?;
        out.samples.extend(s);
        out.n_failed += failed;
    }
    Ok(out)
}

fn sample_block<P: NoisePredictor + ?Sized>(model: &P, size: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, usize)> {
    let c = model.coords();
    let mut x: Vec<f64> = (0..size * c).map(|_| StandardNormal.sample(rng)).collect();
    let mut failed = 0;
    for level in (1..=model.schedule().len()).rev() {
        if x.is_empty() {
            break;
        }
        x = denoise_batch(model, &x, level, rng)?;
        let before = x.len() / c;
        x = x
            .chunks(c)
            .filter(|f| f.iter().all(|v| v.is_finite() && v.abs() < 1e6))
            .flatten()
            .copied()
            .collect();
        failed += before - x.len() / c;
    }
    Ok((x, failed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_cosine_schedule;

    struct Zero(NoiseSchedule, usize);
    impl NoisePredictor for Zero {
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn n_beads(&self) -> usize {
            self.1
        }
        fn dim(&self) -> usize {
            1
        }
        fn predict_noise_batch(&self, xs: &[f64], _: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![0.0; xs.len()])
        }
    }

    /// Exact noise predictor for N(0, var) data in one dimension.
    struct GaussOracle(NoiseSchedule, f64);
    impl NoisePredictor for GaussOracle {
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn n_beads(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn predict_noise_batch(&self, xs: &[f64], levels: &[usize]) -> Result<Vec<f64>> {
            Ok(xs
                .iter()
                .zip(levels)
                .map(|(x, &l)| {
                    let ab = self.0.alpha_bar(l);
                    (1.0 - ab).sqrt() * x / (ab * self.1 + 1.0 - ab)
                })
                .collect())
        }
    }

    #[test]
    fn zero_predictor_step_formula() {
        let sched = make_cosine_schedule(10).unwrap();
        let m = Zero(sched.clone(), 3);
        let x = vec![0.3, -1.0, 2.0];
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        let out = denoise_step(&m, &x, 4, &mut a).unwrap();
        for (k, v) in out.iter().enumerate() {
            let w: f64 = StandardNormal.sample(&mut b);
            let want = x[k] / sched.alpha(4).sqrt() + sched.sigma(4) * w;
            assert!((v - want).abs() < 1e-14);
        }
        let last = denoise_step(&m, &x, 1, &mut a).unwrap();
        for (v, xv) in last.iter().zip(&x) {
            assert!((v - xv / sched.alpha(1).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn unit_alpha_no_noise_is_identity() {
        let x = vec![1.0, -2.0];
        let out = posterior_update(&x, &[0.0, 0.0], 1.0, 0.0, 0.5, 0.0, &[3.0, 4.0]);
        assert_eq!(out, x);
    }

    #[test]
    fn single_level_decode_variance() {
        let sched = NoiseSchedule::from_betas(vec![0.2]).unwrap();
        let m = Zero(sched.clone(), 1);
        let set = ancestral_sample(&m, 20_000, 3).unwrap();
        let n = set.samples.len() as f64;
        let var = set.samples.iter().map(|v| v * v).sum::<f64>() / n;
        let want = 1.0 / sched.alpha(1);
        assert!((var - want).abs() < 4.0 * want * (2.0 / n).sqrt(), "{var} {want}");
    }

    #[test]
    fn exact_gaussian_predictor_recovers_data() {
        let sched = make_cosine_schedule(200).unwrap();
        let m = GaussOracle(sched, 1.0);
        let set = ancestral_sample(&m, 10_000, 4).unwrap();
        assert_eq!(set.n_failed, 0);
        let n = set.samples.len() as f64;
        let mean = set.samples.iter().sum::<f64>() / n;
        let var = set.samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((0.9..1.1).contains(&var), "{var}");

        let lag: f64 = set.samples.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum::<f64>()
            / ((n - 1.0) * var);
        assert!(lag.abs() < 3.0 / n.sqrt(), "{lag}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = GaussOracle(make_cosine_schedule(20).unwrap(), 2.0);
        let a = ancestral_sample(&m, 600, 9).unwrap();
        let b = ancestral_sample(&m, 600, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.len(), 600);
        let c = ancestral_sample(&m, 600, 10).unwrap();
        assert_ne!(a.samples, c.samples);
        assert!(ancestral_sample(&m, 0, 9).unwrap().samples.is_empty());
    }

    struct Exploding(NoiseSchedule);
    impl NoisePredictor for Exploding {
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn n_beads(&self) -> usize {
            1
        }
        fn dim(&self) -> usize {
            1
        }
        fn predict_noise_batch(&self, xs: &[f64], _: &[usize]) -> Result<Vec<f64>> {
            Ok(xs.iter().map(|x| if *x > 0.0 { f64::INFINITY } else { 0.0 }).collect())
        }
    }

    #[test]
    fn failed_samples_are_counted_not_fatal() {
        let m = Exploding(make_cosine_schedule(5).unwrap());
        let set = ancestral_sample(&m, 300, 2).unwrap();
        assert!(set.n_failed > 0);
        assert_eq!(set.n_failed + set.samples.len(), 300);
    }
}
