use candle_core::Tensor;

use super::flops;
use super::params::{join, Init, ParamStore};
use crate::error::{Error, Result};

/// 2-D convolution with bias, `weight: [out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-initialized weights, zero bias, "same" padding.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_init(
            store,
            name,
            cin,
            cout,
            k,
            stride,
            Init::He { fan_in: cin * k * k },
            Init::Constant(0.0),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        let w = store.create(&join(name, "weight"), &[cout, cin, k, k], weight)?;
        let b = store.create(&join(name, "bias"), &[cout], bias)?;
        Ok(Conv2d {
            weight: w,
            bias: b,
            stride,
            padding: k / 2,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, _, _) = x.dims4()?;
        if cin != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {cin}",
                self.in_channels()
            )));
        }
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let (_, cout, ho, wo) = y.dims4()?;
        let k = self.weight.dims()[2];
        flops::record(2 * (b * cout * ho * wo * cin * k * k) as u64);
        Ok(y.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)?)
    }
}

/// Stride-2 transposed convolution (4x4 kernel, padding 1) doubling the
/// spatial size. `weight: [in, out, 4, 4]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
}

impl ConvTranspose2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize) -> Result<Self> {
        // each output pixel receives 2x2 taps from every input channel
        let w = store.create(
            &join(name, "weight"),
            &[cin, cout, 4, 4],
            Init::He { fan_in: cin * 4 },
        )?;
        let b = store.create(&join(name, "bias"), &[cout], Init::Constant(0.0))?;
        Ok(ConvTranspose2d { weight: w, bias: b })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        let cout = self.weight.dims()[1];
        if cin != self.weight.dims()[0] {
            return Err(Error::Shape(format!(
                "transposed conv expects {} input channels, got {cin}",
                self.weight.dims()[0]
            )));
        }
        let y = x.conv_transpose2d(&self.weight, 1, 0, 2, 1)?;
        flops::record(2 * (b * cin * cout * h * w * 16) as u64);
        Ok(y.broadcast_add(&self.bias.reshape((1, cout, 1, 1))?)?)
    }
}

pub fn lrelu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic sigmoid through `tanh`, which has no overflow in its gradient.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Nearest-neighbour 2x upsampling.
// Built from a broadcast: the backward of candle's `upsample_nearest2d`
// replaces, rather than adds to, gradients already accumulated for its input.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// `[B, C*4, H, W] -> [B, C, 2H, 2W]`.
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, c4, h, w) = x.dims4()?;
    if c4 % 4 != 0 {
        return Err(Error::Shape(format!("depth_to_space needs 4k channels, got {c4}")));
    }
    let c = c4 / 4;
    Ok(x
        .reshape((b, c, 2, 2, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// `[B, C, 2H, 2W] -> [B, C*4, H, W]`, inverse of [`depth_to_space`].
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, c, h2, w2) = x.dims4()?;
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::Shape(format!("space_to_depth needs even size, got {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    Ok(x
        .reshape((b, c, h, 2, w, 2))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((b, c * 4, h, w))?)
}
