use candle_core::Tensor;

use super::layers::{lrelu, sigmoid, Conv2d, ConvTranspose2d};
use super::params::{join, ParamStore};
use crate::error::{Error, Result};

/// Squeeze-excite style channel weights in (0, 1), shape `[B, C, 1, 1]`.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    reduce: Conv2d,
    expand: Conv2d,
    slope: f64,
}

impl ChannelAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize, slope: f64) -> Result<Self> {
        let mid = (c / reduction).max(1);
        Ok(ChannelAttention {
            reduce: Conv2d::new(store, &join(name, "reduce"), c, mid, 1, 1)?,
            expand: Conv2d::new(store, &join(name, "expand"), mid, c, 1, 1)?,
            slope,
        })
    }

    /// `f` scaled per channel by [`Self::weights`].
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        Ok(f.broadcast_mul(&self.weights(f)?)?)
    }

    pub fn weights(&self, f: &Tensor) -> Result<Tensor> {
        let pooled = f.mean_keepdim(3)?.mean_keepdim(2)?;
        let z = lrelu(&self.reduce.forward(&pooled)?, self.slope)?;
        sigmoid(&self.expand.forward(&z)?)
    }
}

/// Per-pixel weights in (0, 1), shape `[B, 1, H, W]`.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    c1: Conv2d,
    c2: Conv2d,
    slope: f64,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, reduction: usize, slope: f64) -> Result<Self> {
        let mid = (c / reduction).max(1);
        Ok(SpatialAttention {
            c1: Conv2d::new(store, &join(name, "c1"), c, mid, 3, 1)?,
            c2: Conv2d::new(store, &join(name, "c2"), mid, 1, 3, 1)?,
            slope,
        })
    }

    /// `f` scaled per pixel by [`Self::weights`].
    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        Ok(f.broadcast_mul(&self.weights(f)?)?)
    }

    pub fn weights(&self, f: &Tensor) -> Result<Tensor> {
        let z = lrelu(&self.c1.forward(f)?, self.slope)?;
        sigmoid(&self.c2.forward(&z)?)
    }
}

/// Feature modulation by a guide: `gamma(guide) * f + beta(guide)`.
#[derive(Debug, Clone)]
pub struct GgUnit {
    gamma: Conv2d,
    beta: Conv2d,
}

impl GgUnit {
    pub fn new(store: &mut ParamStore, name: &str, c_guide: usize, c: usize) -> Result<Self> {
        Ok(GgUnit {
            gamma: Conv2d::new(store, &join(name, "gamma"), c_guide, c, 3, 1)?,
            beta: Conv2d::new(store, &join(name, "beta"), c_guide, c, 3, 1)?,
        })
    }

    pub fn forward(&self, f: &Tensor, guide: &Tensor) -> Result<Tensor> {
        if f.dims()[2..] != guide.dims()[2..] {
            return Err(Error::Shape(format!(
                "guide {:?} does not match features {:?}",
                guide.dims(),
                f.dims()
            )));
        }
        let g = self.gamma.forward(guide)?;
        let b = self.beta.forward(guide)?;
        Ok(((g * f)? + b)?)
    }
}

/// `x + conv(lrelu(conv(x)))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    c1: Conv2d,
    c2: Conv2d,
    slope: f64,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, slope: f64) -> Result<Self> {
        Ok(ResidualBlock {
            c1: Conv2d::new(store, &join(name, "c1"), c, c, 3, 1)?,
            c2: Conv2d::new(store, &join(name, "c2"), c, c, 3, 1)?,
            slope,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.c2.forward(&lrelu(&self.c1.forward(x)?, self.slope)?)?;
        Ok((x + y)?)
    }
}

/// Optionally guided block: modulation, two residual blocks, then
/// `f_r + f_r * z_c + f_r * z_s`.
#[derive(Debug, Clone)]
pub struct GcaBlock {
    gg: Option<GgUnit>,
    res: [ResidualBlock; 2],
    ca: ChannelAttention,
    sa: SpatialAttention,
}

impl GcaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c: usize,
        guided: bool,
        reduction: usize,
        slope: f64,
    ) -> Result<Self> {
        let gg = if guided {
            Some(GgUnit::new(store, &join(name, "gg"), c, c)?)
        } else {
            None
        };
        Ok(GcaBlock {
            gg,
            res: [
                ResidualBlock::new(store, &join(name, "rb0"), c, slope)?,
                ResidualBlock::new(store, &join(name, "rb1"), c, slope)?,
            ],
            ca: ChannelAttention::new(store, &join(name, "ca"), c, reduction, slope)?,
            sa: SpatialAttention::new(store, &join(name, "sa"), c, reduction, slope)?,
        })
    }

    pub fn is_guided(&self) -> bool {
        self.gg.is_some()
    }

    /// Output of the modulation and residual stages, before attention.
    pub fn residual_features(&self, f: &Tensor, guide: Option<&Tensor>) -> Result<Tensor> {
        let fe = match (&self.gg, guide) {
            (Some(gg), Some(g)) => gg.forward(f, g)?,
            (Some(_), None) => return Err(Error::Input("guided block called without a guide".into())),
            (None, _) => f.clone(),
        };
        self.res[1].forward(&self.res[0].forward(&fe)?)
    }

    pub fn forward(&self, f: &Tensor, guide: Option<&Tensor>) -> Result<Tensor> {
        let fr = self.residual_features(f, guide)?;
        let zc = self.ca.weights(&fr)?;
        let zs = self.sa.weights(&fr)?;
        Ok(((&fr + fr.broadcast_mul(&zc)?)? + fr.broadcast_mul(&zs)?)?)
    }
}

/// Hidden and cell state of a convolutional LSTM.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(like: &Tensor, hidden: usize) -> Result<Self> {
        let (b, _, h, w) = like.dims4()?;
        let z = Tensor::zeros((b, hidden, h, w), like.dtype(), like.device())?;
        Ok(LstmState { h: z.clone(), c: z })
    }
}

/// Convolutional LSTM cell with 3x3 gates ordered input, forget, output,
/// candidate.
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    gates: Conv2d,
    hidden: usize,
}

impl ConvLstmCell {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, hidden: usize) -> Result<Self> {
        Ok(ConvLstmCell {
            gates: Conv2d::new(store, &join(name, "gates"), cin + hidden, 4 * hidden, 3, 1)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> Result<LstmState> {
        let z = self.gates.forward(&Tensor::cat(&[x, &state.h], 1)?)?;
        let n = self.hidden;
        let i = sigmoid(&z.narrow(1, 0, n)?)?;
        let f = sigmoid(&z.narrow(1, n, n)?)?;
        let o = sigmoid(&z.narrow(1, 2 * n, n)?)?;
        let g = z.narrow(1, 3 * n, n)?.tanh()?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }
}

/// 2x upsampling of features, modulated by an equally upsampled guide when
/// one is configured.
#[derive(Debug, Clone)]
pub struct AdaptiveUpsample {
    up_f: ConvTranspose2d,
    guide: Option<(ConvTranspose2d, GgUnit)>,
}

impl AdaptiveUpsample {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, c_guide: Option<usize>) -> Result<Self> {
        let up_f = ConvTranspose2d::new(store, &join(name, "up_f"), c, c)?;
        let guide = match c_guide {
            Some(cg) => Some((
                ConvTranspose2d::new(store, &join(name, "up_g"), cg, cg)?,
                GgUnit::new(store, &join(name, "gg"), cg, c)?,
            )),
            None => None,
        };
        Ok(AdaptiveUpsample { up_f, guide })
    }

    pub fn forward(&self, f: &Tensor, guide: Option<&Tensor>) -> Result<Tensor> {
        let up = self.up_f.forward(f)?;
        match (&self.guide, guide) {
            (Some((up_g, gg)), Some(g)) => gg.forward(&up, &up_g.forward(g)?),
            (Some(_), None) => Err(Error::Input("guided upsampling called without a guide".into())),
            (None, _) => Ok(up),
        }
    }
}
