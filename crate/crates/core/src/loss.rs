use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rawproc::{process_tensor, IspParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharbonnierMode {
    /// One Euclidean norm over every element under a single square root.
    #[default]
    Global,
    /// Mean of per-element `sqrt(d^2 + eps^2)`.
    PerPixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub epsilon: f64,
    pub lambda: f64,
    pub mode: CharbonnierMode,
    pub isp: IspParams,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-3,
            lambda: 1.0,
            mode: CharbonnierMode::Global,
            isp: IspParams::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Scalar Charbonnier penalty between two equally shaped tensors.
pub fn charbonnier(a: &Tensor, b: &Tensor, eps: f64, mode: CharbonnierMode) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    // eps * sqrt(1 + r / eps^2) equals sqrt(r + eps^2) and is exactly eps at r = 0
    let d2 = (a - b)?.sqr()?;
    let inv = 1.0 / (eps * eps);
    let v = match mode {
        CharbonnierMode::Global => ((d2.sum_all()? * inv)? + 1.0)?.sqrt()?,
        CharbonnierMode::PerPixel => ((d2 * inv)? + 1.0)?.sqrt()?.mean_all()?,
    };
    Ok((v * eps)?)
}

/// Penalty after mapping both `[B, 3, H, W]` linear images through the ISP.
pub fn loss_srgb(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let p = process_tensor(pred, &cfg.isp)?;
    let g = process_tensor(gt, &cfg.isp)?;
    charbonnier(&p, &g, cfg.epsilon, cfg.mode)
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub linear: Tensor,
    pub srgb: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let f = |t: &Tensor| -> Result<f64> {
            Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
        };
        Ok((f(&self.linear)?, f(&self.srgb)?, f(&self.total)?))
    }
}

/// `L_linear + lambda * L_srgb`.
pub fn total_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<LossTerms> {
    let linear = charbonnier(pred, gt, cfg.epsilon, cfg.mode)?;
    let srgb = loss_srgb(pred, gt, cfg)?;
    let total = (&linear + (&srgb * cfg.lambda)?)?;
    Ok(LossTerms { linear, srgb, total })
}
