//! Compression-ratio sampling for training.
//!
//! The progressive scheme draws ratios from `Beta(alpha, beta)` with `alpha`
//! decaying geometrically from a high-compression bias (`alpha = 80`,
//! `beta = 5`) to a symmetric distribution (`alpha = beta = 5`) over the first
//! 60% of training. Draws are snapped to the token grid.

use serde::{Deserialize, Serialize};

use crate::error::{ArfcError, Result};
use crate::numkit::Rng;
use crate::tokenizer::{ratio_grid, ratio_to_token_count, Ratio};

pub const PROGRESSIVE_ALPHA_START: f64 = 80.0;
pub const PROGRESSIVE_BETA: f64 = 5.0;
/// Fraction of training over which `alpha` decays.
pub const DECAY_FRACTION: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    Progressive,
    Uniform,
    FullGrid,
}

impl std::str::FromStr for ScheduleMode {
    type Err = ArfcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "progressive" => Ok(ScheduleMode::Progressive),
            "uniform" => Ok(ScheduleMode::Uniform),
            "full-grid" | "full_grid" => Ok(ScheduleMode::FullGrid),
            other => Err(ArfcError::invalid(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub beta: f64,
    pub total_steps: u64,
    pub mode: ScheduleMode,
}

impl BetaSchedule {
    pub fn new(mode: ScheduleMode, total_steps: u64) -> Self {
        match mode {
            ScheduleMode::Progressive => BetaSchedule {
                alpha_start: PROGRESSIVE_ALPHA_START,
                alpha_end: PROGRESSIVE_BETA,
                beta: PROGRESSIVE_BETA,
                total_steps,
                mode,
            },
            ScheduleMode::Uniform | ScheduleMode::FullGrid => BetaSchedule {
                alpha_start: 1.0,
                alpha_end: 1.0,
                beta: 1.0,
                total_steps,
                mode,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_end > 0.0 && self.alpha_start >= self.alpha_end && self.beta > 0.0) {
            return Err(ArfcError::config(
                "schedule needs alpha_start >= alpha_end > 0 and beta > 0",
            ));
        }
        if self.mode == ScheduleMode::Uniform
            && (self.alpha_start != 1.0 || self.alpha_end != 1.0 || self.beta != 1.0)
        {
            return Err(ArfcError::config(
                "uniform schedule requires alpha = beta = 1",
            ));
        }
        Ok(())
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        let horizon = DECAY_FRACTION * self.total_steps as f64;
        if step == 0 || self.alpha_start == self.alpha_end {
            return self.alpha_start;
        }
        if step as f64 >= horizon {
            return self.alpha_end;
        }
        let frac = step as f64 / horizon;
        self.alpha_start * (self.alpha_end / self.alpha_start).powf(frac)
    }

    /// Raw (unsnapped) draw from `Beta(alpha(step), beta)`.
    pub fn sample_raw(&self, step: u64, rng: &mut Rng) -> f64 {
        sample_beta(self.alpha_at(step), self.beta, rng)
    }

    /// One ratio snapped to the grid of `tokens` tokens.
    pub fn sample_ratio(&self, step: u64, tokens: usize, rng: &mut Rng) -> Ratio {
        let raw = self.sample_raw(step, rng).min(1.0 - f64::EPSILON);
        Ratio::new(raw)
            .expect("beta draw in [0, 1)")
            .floor_to_grid(tokens)
    }

    /// `count` distinct grid ratios for one step, in draw order. Full-grid
    /// mode ignores `count` and returns every grid point.
    pub fn sample_batch_ratios(
        &self,
        step: u64,
        count: usize,
        tokens: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Ratio>> {
        if self.mode == ScheduleMode::FullGrid {
            return Ok(ratio_grid(tokens));
        }
        if count == 0 || count > tokens {
            return Err(ArfcError::invalid(format!(
                "cannot draw {count} distinct ratios from {tokens} grid points"
            )));
        }
        let mut kept: Vec<usize> = Vec::with_capacity(count);
        let mut attempts = 0;
        while kept.len() < count && attempts < 100 * count {
            let j = ratio_to_token_count(self.sample_ratio(step, tokens, rng), tokens);
            if !kept.contains(&j) {
                kept.push(j);
            }
            attempts += 1;
        }
        if kept.len() < count {
            // fill with the unused grid points closest to the distribution mean
            let a = self.alpha_at(step);
            let mean = a / (a + self.beta);
            let centre = ratio_to_token_count(Ratio::new(mean.min(1.0 - 1e-12))?, tokens) as i64;
            let mut unused: Vec<usize> = (1..=tokens).filter(|j| !kept.contains(j)).collect();
            unused.sort_by_key(|&j| ((j as i64 - centre).abs(), j));
            kept.extend(unused.into_iter().take(count - kept.len()));
        }
        kept.into_iter()
            .map(|j| Ratio::from_token_count(j, tokens))
            .collect()
    }
}

/// Marsaglia-Tsang gamma sampler with unit scale.
pub fn sample_gamma(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let u = rng.uniform_open();
        return sample_gamma(shape + 1.0, rng) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        if u < 1.0 - 0.0331 * x.powi(4) || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

/// `Beta(a, b)` as `X / (X + Y)` with `X ~ Gamma(a)`, `Y ~ Gamma(b)`.
pub fn sample_beta(a: f64, b: f64, rng: &mut Rng) -> f64 {
    let x = sample_gamma(a, rng);
    let y = sample_gamma(b, rng);
    x / (x + y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_decay() {
        let s = BetaSchedule::new(ScheduleMode::Progressive, 1000);
        assert_eq!(s.alpha_at(0), 80.0);
        assert_eq!(s.alpha_at(600), 5.0);
        assert_eq!(s.alpha_at(1000), 5.0);
        let mut prev = f64::INFINITY;
        for step in 0..=1000 {
            let a = s.alpha_at(step);
            assert!(a <= prev);
            prev = a;
        }
        let flat = BetaSchedule {
            alpha_start: 3.0,
            alpha_end: 3.0,
            ..s
        };
        assert_eq!(flat.alpha_at(123), 3.0);
    }

    #[test]
    fn validation() {
        assert!(BetaSchedule::new(ScheduleMode::Uniform, 10)
            .validate()
            .is_ok());
        let bad = BetaSchedule {
            alpha_start: 1.0,
            alpha_end: 2.0,
            ..BetaSchedule::new(ScheduleMode::Progressive, 10)
        };
        assert!(bad.validate().is_err());
        assert!("full-grid".parse::<ScheduleMode>().is_ok());
        assert!("nope".parse::<ScheduleMode>().is_err());
    }

    #[test]
    fn uniform_mean() {
        let s = BetaSchedule::new(ScheduleMode::Uniform, 10);
        let mut rng = Rng::new(1);
        let mean: f64 = (0..100_000).map(|_| s.sample_raw(0, &mut rng)).sum::<f64>() / 1e5;
        assert!((mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn skewed_mean_and_tail() {
        let s = BetaSchedule::new(ScheduleMode::Progressive, 10);
        let mut rng = Rng::new(2);
        let draws: Vec<f64> = (0..100_000).map(|_| s.sample_raw(0, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / 1e5;
        assert!((mean - 80.0 / 85.0).abs() < 0.01);
        let above = draws.iter().filter(|&&r| r > 0.75).count() as f64 / 1e5;
        assert!(above > 0.99);
    }

    #[test]
    fn batch_ratios() {
        let s = BetaSchedule::new(ScheduleMode::Progressive, 100);
        let mut rng = Rng::new(3);
        let all = s.sample_batch_ratios(0, 8, 8, &mut rng).unwrap();
        let mut counts: Vec<usize> = all.iter().map(|r| ratio_to_token_count(*r, 8)).collect();
        counts.sort();
        assert_eq!(counts, (1..=8).collect::<Vec<_>>());
        let one = s.sample_batch_ratios(0, 1, 8, &mut rng).unwrap();
        assert_eq!(one.len(), 1);
        let again = |seed| {
            s.sample_batch_ratios(10, 3, 8, &mut Rng::new(seed))
                .unwrap()
        };
        assert_eq!(again(4), again(4));
        assert!(s.sample_batch_ratios(0, 9, 8, &mut rng).is_err());
        let grid = BetaSchedule::new(ScheduleMode::FullGrid, 10)
            .sample_batch_ratios(0, 1, 8, &mut rng)
            .unwrap();
        assert_eq!(grid.len(), 8);
    }

    #[test]
    fn early_steps_keep_fewer_tokens() {
        let s = BetaSchedule::new(ScheduleMode::Progressive, 100);
        let mut rng = Rng::new(5);
        let mean_kept = |step, rng: &mut Rng| {
            (0..20_000)
                .map(|_| ratio_to_token_count(s.sample_ratio(step, 8, rng), 8) as f64)
                .sum::<f64>()
                / 2e4
        };
        assert!(mean_kept(0, &mut rng) < mean_kept(100, &mut rng));
    }
}
