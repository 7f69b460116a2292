//! Forward diffusion process: variance sequences and closed-form marginals.
//!
//! Noise levels are 1-based throughout the public API (`1..=L`).

use crate::error::{invalid, Result};

/// Offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every beta of the cosine schedule.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
    Custom,
}

/// Immutable diffusion schedule. Internally stored 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        Self::build(ScheduleKind::Custom, betas)
    }

    /// Rebuilds a stored schedule, keeping its kind tag.
    pub(crate) fn from_betas_with_kind(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        Self::build(kind, betas)
    }

    fn build(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one noise level"));
        }
        if let Some((i, b)) = betas
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(invalid(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut running = 1.0;
        for a in &alphas {
            running *= a;
            alpha_bars.push(running);
        }
        // denoising std: variance beta_i
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of noise levels `L`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.len() {
            return Err(invalid(format!(
                "noise level {level} outside 1..={}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, level: usize) -> f64 {
        self.betas[level - 1]
    }

    pub fn alpha(&self, level: usize) -> f64 {
        self.alphas[level - 1]
    }

    pub fn alpha_bar(&self, level: usize) -> f64 {
        self.alpha_bars[level - 1]
    }

    /// Standard deviation of the reverse (denoising) step at `level`.
    pub fn sigma(&self, level: usize) -> f64 {
        self.sigmas[level - 1]
    }

    /// `sqrt(1 - alpha_bar_i)`, the marginal noise scale at `level`.
    pub fn noise_scale(&self, level: usize) -> f64 {
        (1.0 - self.alpha_bar(level)).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `sqrt(abar_i) * x0 + sqrt(1 - abar_i) * eps`.
    pub fn diffuse(&self, x0: &[f64], level: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_level(level)?;
        if x0.len() != eps.len() {
            return Err(invalid(format!(
                "eps length {} does not match x0 length {}",
                eps.len(),
                x0.len()
            )));
        }
        let signal = self.alpha_bar(level).sqrt();
        let noise = self.noise_scale(level);
        Ok(x0
            .iter()
            .zip(eps)
            .map(|(x, e)| signal * x + noise * e)
            .collect())
    }
}

/// Cosine schedule: `abar(t) = f(t) / f(0)` with
/// `f(t) = cos^2(((t/L + s) / (1 + s)) * pi/2)`, betas clipped at [`MAX_BETA`].
pub fn make_cosine_schedule(levels: usize) -> Result<NoiseSchedule> {
    if levels == 0 {
        return Err(invalid("cosine schedule needs L >= 1"));
    }
    let l = levels as f64;
    let f = |t: f64| {
        let u = ((t / l + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
        u.cos().powi(2)
    };
    let betas = (1..=levels)
        .map(|i| {
            let b = 1.0 - f(i as f64) / f((i - 1) as f64);
            b.min(MAX_BETA)
        })
        .collect();
    NoiseSchedule::build(ScheduleKind::Cosine, betas)
}

pub fn make_linear_schedule(levels: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if levels == 0 {
        return Err(invalid("linear schedule needs L >= 1"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(invalid(format!(
            "linear schedule needs 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let betas = if levels == 1 {
        vec![beta_min]
    } else {
        let step = (beta_max - beta_min) / (levels - 1) as f64;
        (0..levels).map(|k| beta_min + step * k as f64).collect()
    };
    NoiseSchedule::build(ScheduleKind::Linear, betas)
}
