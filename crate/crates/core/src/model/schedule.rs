use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

/// Variance-preserving noise schedule; timesteps run from 1 to `len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Linear schedule between the endpoints (a single step uses `beta_start`).
pub fn make_schedule(cfg: &ScheduleConfig) -> Result<Schedule, ModelError> {
    let ok = |b: f64| b > 0.0 && b < 1.0;
    if cfg.steps == 0 || !ok(cfg.beta_start) || !ok(cfg.beta_end) || cfg.beta_end < cfg.beta_start {
        return Err(ModelError::Config(format!(
            "schedule needs 0 < beta_start <= beta_end < 1 and steps > 0, got {cfg:?}"
        )));
    }
    let n = cfg.steps;
    let betas: Vec<f64> = (0..n)
        .map(|i| {
            if n == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64
            }
        })
        .collect();
    Schedule::from_betas(betas)
}

impl Schedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, ModelError> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(ModelError::Config("betas must lie in (0, 1]".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; equals 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Mean coefficients `(c_x0, c_xt)` and variance of q(x_{t-1} | x_t, x_0).
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let denom = 1.0 - ab;
        let c0 = ab_prev.sqrt() * beta / denom;
        let ct = self.alpha(t).sqrt() * (1.0 - ab_prev) / denom;
        let var = (1.0 - ab_prev) / denom * beta;
        (c0, ct, var)
    }
}

/// Forward noising `sqrt(ab) x0 + sqrt(1 - ab) noise`.
pub fn q_sample(schedule: &Schedule, x0: &[f64], t: usize, noise: &[f64]) -> Vec<f64> {
    assert_eq!(x0.len(), noise.len(), "noise must match the clean sample");
    mix(schedule.alpha_bar(t), x0, noise)
}

pub(crate) fn mix(alpha_bar: f64, x0: &[f64], noise: &[f64]) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect()
}
