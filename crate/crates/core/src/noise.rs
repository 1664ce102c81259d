//! Heteroscedastic Gaussian noise: variance `sigma_s * x + sigma_r^2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawproc::PackedRaw;

/// Shot (signal-proportional variance) and read (constant std) noise scales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma_s: f64,
    pub sigma_r: f64,
}

impl NoiseParams {
    pub fn new(sigma_s: f64, sigma_r: f64) -> Result<Self> {
        if !(sigma_s >= 0.0 && sigma_r >= 0.0 && sigma_s.is_finite() && sigma_r.is_finite()) {
            return Err(Error::Config(format!(
                "noise scales must be finite and non-negative, got ({sigma_s}, {sigma_r})"
            )));
        }
        Ok(NoiseParams { sigma_s, sigma_r })
    }

    pub const ZERO: NoiseParams = NoiseParams {
        sigma_s: 0.0,
        sigma_r: 0.0,
    };

    /// Noise variance at clean intensity `x`.
    pub fn variance(&self, x: f64) -> f64 {
        self.sigma_s * x + self.sigma_r * self.sigma_r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingLaw {
    LogUniform,
    Uniform,
}

/// Ranges the training noise scales are drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRanges {
    pub s_lo: f64,
    pub s_hi: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub sampling_law: SamplingLaw,
}

impl Default for NoiseRanges {
    fn default() -> Self {
        NoiseRanges {
            s_lo: 1e-4,
            s_hi: 1e-2,
            r_lo: 1e-3,
            r_hi: 10f64.powf(-1.5),
            sampling_law: SamplingLaw::LogUniform,
        }
    }
}

impl NoiseRanges {
    /// Ranges collapsed to a single point.
    pub fn fixed(p: NoiseParams) -> Self {
        NoiseRanges {
            s_lo: p.sigma_s,
            s_hi: p.sigma_s,
            r_lo: p.sigma_r,
            r_hi: p.sigma_r,
            sampling_law: SamplingLaw::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi;
        if !ok(self.s_lo, self.s_hi) || !ok(self.r_lo, self.r_hi) {
            return Err(Error::Config(format!("invalid noise ranges {self:?}")));
        }
        if self.sampling_law == SamplingLaw::LogUniform && (self.s_lo <= 0.0 || self.r_lo <= 0.0)
        {
            return Err(Error::Config(
                "log-uniform sampling needs strictly positive bounds".into(),
            ));
        }
        Ok(())
    }
}

/// `clean + N(0, sigma_s * clean + sigma_r^2)`, deterministic in `seed`.
/// The result is not clamped.
pub fn apply_noise(clean: &PackedRaw, np: NoiseParams, seed: u64) -> Result<PackedRaw> {
    if let Some(v) = clean.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Input(format!(
            "clean raw values must be non-negative, found {v}"
        )));
    }
    let mut out = clean.clone();
    if np.sigma_s == 0.0 && np.sigma_r == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in out.data_mut().iter_mut() {
        let std = np.variance(*v as f64).sqrt();
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + std * z) as f32;
    }
    Ok(out)
}

/// Per-pixel noise standard deviation estimated from the observed frame,
/// `sqrt(sigma_s * max(y, 0) + sigma_r^2)`.
pub fn noise_map(noisy: &PackedRaw, np: NoiseParams) -> PackedRaw {
    let data = noisy
        .data()
        .mapv(|y| np.variance((y as f64).max(0.0)).sqrt() as f32);
    PackedRaw::new(data).expect("shape preserved")
}

pub fn sample_noise_params(ranges: &NoiseRanges, seed: u64) -> Result<NoiseParams> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |lo: f64, hi: f64| -> f64 {
        if lo == hi {
            return lo;
        }
        match ranges.sampling_law {
            SamplingLaw::Uniform => rng.random_range(lo..=hi),
            SamplingLaw::LogUniform => {
                let e = rng.random_range(lo.log10()..=hi.log10());
                10f64.powf(e).clamp(lo, hi)
            }
        }
    };
    let sigma_s = draw(ranges.s_lo, ranges.s_hi);
    let sigma_r = draw(ranges.r_lo, ranges.r_hi);
    NoiseParams::new(sigma_s, sigma_r)
}
