//! Camera pipeline simulation: the forward ISP `process` (white balance,
//! color correction, gamma), its exact inverse `unprocess`, RGGB mosaicking
//! and packing of the Bayer plane into four half-resolution channels.
//!
//! Tone mapping is deliberately absent from both directions so that the two
//! transforms are mutual inverses on in-gamut values.

use candle_core::{DType, Tensor};
use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SRGB_LINEAR_THRESHOLD: f64 = 0.003_130_8;
const SRGB_ENCODED_THRESHOLD: f64 = 0.040_45;
/// Lower bound applied before fractional powers so derivatives stay finite.
const POW_FLOOR: f64 = 1e-8;

/// Transfer curve used for gamma compression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "exponent")]
pub enum Gamma {
    /// IEC 61966-2-1 piecewise curve.
    SrgbStandard,
    /// `v = x^(1/exponent)`.
    PurePower(f64),
}

impl Gamma {
    /// Linear value in [0, 1] to encoded value.
    pub fn encode(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        match *self {
            Gamma::SrgbStandard => {
                if x <= SRGB_LINEAR_THRESHOLD {
                    12.92 * x
                } else {
                    1.055 * x.powf(1.0 / 2.4) - 0.055
                }
            }
            Gamma::PurePower(e) => x.powf(1.0 / e),
        }
    }

    /// Encoded value in [0, 1] back to linear.
    pub fn decode(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match *self {
            Gamma::SrgbStandard => {
                if v <= SRGB_ENCODED_THRESHOLD {
                    v / 12.92
                } else {
                    ((v + 0.055) / 1.055).powf(2.4)
                }
            }
            Gamma::PurePower(e) => v.powf(e),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIsp {
    wb_gains: [f64; 3],
    ccm: [[f64; 3]; 3],
    gamma: Gamma,
}

/// White-balance gains, color-correction matrix and transfer curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIsp", into = "RawIsp")]
pub struct IspParams {
    wb_gains: [f64; 3],
    ccm: [[f64; 3]; 3],
    ccm_inv: [[f64; 3]; 3],
    gamma: Gamma,
}

impl TryFrom<RawIsp> for IspParams {
    type Error = Error;

    fn try_from(raw: RawIsp) -> Result<Self> {
        IspParams::new(raw.wb_gains, raw.ccm, raw.gamma)
    }
}

impl From<IspParams> for RawIsp {
    fn from(p: IspParams) -> Self {
        RawIsp {
            wb_gains: p.wb_gains,
            ccm: p.ccm,
            gamma: p.gamma,
        }
    }
}

impl Default for IspParams {
    fn default() -> Self {
        IspParams::new([2.0, 1.0, 1.7], IDENTITY3, Gamma::SrgbStandard)
            .expect("default ISP parameters are valid")
    }
}

const IDENTITY3: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl IspParams {
    pub fn new(wb_gains: [f64; 3], ccm: [[f64; 3]; 3], gamma: Gamma) -> Result<Self> {
        if wb_gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::Config(format!(
                "white-balance gains must be positive, got {wb_gains:?}"
            )));
        }
        for (i, row) in ccm.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "color-correction row {i} sums to {sum}, expected 1"
                )));
            }
        }
        if let Gamma::PurePower(e) = gamma {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::Config(format!("gamma exponent must be positive, got {e}")));
            }
        }
        let ccm_inv = invert3(&ccm).ok_or_else(|| {
            Error::Config("color-correction matrix is singular".to_string())
        })?;
        Ok(IspParams {
            wb_gains,
            ccm,
            ccm_inv,
            gamma,
        })
    }

    /// Identity white balance and color correction with the given curve.
    pub fn neutral(gamma: Gamma) -> Self {
        IspParams::new([1.0; 3], IDENTITY3, gamma).expect("neutral ISP parameters are valid")
    }

    pub fn wb_gains(&self) -> [f64; 3] {
        self.wb_gains
    }

    pub fn ccm(&self) -> [[f64; 3]; 3] {
        self.ccm
    }

    pub fn gamma(&self) -> Gamma {
        self.gamma
    }

    /// Upper bound of a linear value produced by [`unprocess`].
    pub fn linear_ceiling(&self) -> f64 {
        1.0 / self.wb_gains.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if !det.is_finite() || det.abs() <= 1e-12 * scale.powi(3).max(f64::MIN_POSITIVE) {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // cofactor of (c, r)
            let (r0, r1) = match c {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let (c0, c1) = match r {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let minor = m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * minor / det;
        }
    }
    Some(inv)
}

/// Full-resolution linear RGB image, `2H x 2W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRgbImage(Array3<f32>);

impl LinearRgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 3 {
            return Err(Error::Shape(format!(
                "linear RGB image needs 3 channels, got {:?}",
                data.dim()
            )));
        }
        Ok(LinearRgbImage(data))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }
}

/// Single-plane RGGB mosaic.
#[derive(Debug, Clone, PartialEq)]
pub struct BayerImage(Array2<f32>);

impl BayerImage {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (h, w) = data.dim();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "Bayer plane needs even non-zero dimensions, got {h}x{w}"
            )));
        }
        Ok(BayerImage(data))
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }
}

/// Bayer plane rearranged as `H x W x 4` with channels (R, Gr, Gb, B).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedRaw(Array3<f32>);

impl PackedRaw {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().2 != 4 {
            return Err(Error::Shape(format!(
                "packed raw needs 4 channels, got {:?}",
                data.dim()
            )));
        }
        Ok(PackedRaw(data))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<f32> {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }
}

fn check_rgb(img: &ArrayView3<f32>) -> Result<()> {
    if img.dim().2 != 3 {
        return Err(Error::Shape(format!(
            "expected an RGB image, got {:?}",
            img.dim()
        )));
    }
    Ok(())
}

/// sRGB in [0,1] to linear camera RGB: inverse gamma, inverse color
/// correction, inverse white balance.
pub fn unprocess(srgb: &Array3<f32>, isp: &IspParams) -> Result<LinearRgbImage> {
    check_rgb(&srgb.view())?;
    let ceiling = isp.linear_ceiling();
    let mut out = Array3::<f32>::zeros(srgb.dim());
    for (src, mut dst) in srgb.lanes(Axis(2)).into_iter().zip(out.lanes_mut(Axis(2))) {
        let lin = [
            isp.gamma.decode(src[0] as f64),
            isp.gamma.decode(src[1] as f64),
            isp.gamma.decode(src[2] as f64),
        ];
        for c in 0..3 {
            let cam: f64 = (0..3).map(|j| isp.ccm_inv[c][j] * lin[j]).sum();
            dst[c] = (cam / isp.wb_gains[c]).clamp(0.0, ceiling) as f32;
        }
    }
    LinearRgbImage::new(out)
}

/// Linear camera RGB to sRGB in [0,1]: white balance, color correction,
/// gamma compression.
pub fn process(linear: &LinearRgbImage, isp: &IspParams) -> Array3<f32> {
    process_array(linear.data(), isp)
}

/// [`process`] on a bare `H x W x 3` array.
pub fn process_array(linear: &Array3<f32>, isp: &IspParams) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros(linear.dim());
    for (src, mut dst) in linear.lanes(Axis(2)).into_iter().zip(out.lanes_mut(Axis(2))) {
        let wb = [
            (src[0] as f64).max(0.0) * isp.wb_gains[0],
            (src[1] as f64).max(0.0) * isp.wb_gains[1],
            (src[2] as f64).max(0.0) * isp.wb_gains[2],
        ];
        for c in 0..3 {
            let v: f64 = (0..3).map(|j| isp.ccm[c][j] * wb[j]).sum();
            dst[c] = isp.gamma.encode(v.clamp(0.0, 1.0)) as f32;
        }
    }
    out
}

/// Differentiable [`process`] for `B x 3 x H x W` tensors.
///
/// Clamping is done with min/max so the gradient is a subgradient at the
/// clamp boundaries.
pub fn process_tensor(linear: &Tensor, isp: &IspParams) -> Result<Tensor> {
    let (_, c, _, _) = linear.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!(
            "process expects 3 channels, got {c}"
        )));
    }
    let dtype = linear.dtype();
    let device = linear.device();
    let x = linear.maximum(0.0)?;
    let gains = Tensor::new(&isp.wb_gains, device)?
        .to_dtype(dtype)?
        .reshape((1, 3, 1, 1))?;
    let x = x.broadcast_mul(&gains)?;
    let x = if isp.ccm == IDENTITY3 {
        x
    } else {
        let flat: Vec<f64> = isp.ccm.iter().flatten().copied().collect();
        let kernel = Tensor::from_vec(flat, (3, 3, 1, 1), device)?.to_dtype(dtype)?;
        x.conv2d(&kernel, 0, 1, 1, 1)?
    };
    let x = x.clamp(0.0, 1.0)?;
    Ok(gamma_tensor(&x, isp.gamma)?)
}

fn gamma_tensor(x: &Tensor, gamma: Gamma) -> candle_core::Result<Tensor> {
    match gamma {
        Gamma::SrgbStandard => {
            let lin = (x * 12.92)?;
            let pow = ((x.maximum(SRGB_LINEAR_THRESHOLD)?.powf(1.0 / 2.4)? * 1.055)? - 0.055)?;
            let mask = x.le(SRGB_LINEAR_THRESHOLD)?;
            mask.where_cond(&lin, &pow)
        }
        Gamma::PurePower(1.0) => Ok(x.clone()),
        Gamma::PurePower(e) => {
            // linear below the floor keeps 0 -> 0 with a finite slope
            let pow = x.maximum(POW_FLOOR)?.powf(1.0 / e)?;
            let lin = (x * (POW_FLOOR.powf(1.0 / e) / POW_FLOOR))?;
            x.le(POW_FLOOR)?.where_cond(&lin, &pow)
        }
    }
}

/// Sample the RGGB grid: R at (even, even), G at (even, odd) and
/// (odd, even), B at (odd, odd).
pub fn mosaic(linear: &LinearRgbImage) -> Result<BayerImage> {
    let (h, w, _) = linear.data().dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "mosaicking needs even dimensions, got {h}x{w}"
        )));
    }
    let d = linear.data();
    let plane = Array2::from_shape_fn((h, w), |(y, x)| d[[y, x, cfa_channel(y, x)]]);
    BayerImage::new(plane)
}

/// RGB channel index recorded at Bayer site `(y, x)`.
pub fn cfa_channel(y: usize, x: usize) -> usize {
    match (y % 2, x % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

pub fn pack_bayer(b: &BayerImage) -> PackedRaw {
    let d = b.data();
    let (h, w) = d.dim();
    let mut out = Array3::<f32>::zeros((h / 2, w / 2, 4));
    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        out.slice_mut(s![.., .., k])
            .assign(&d.slice(s![dy..;2, dx..;2]));
    }
    PackedRaw(out)
}

pub fn unpack_bayer(p: &PackedRaw) -> BayerImage {
    let d = p.data();
    let (h, w, _) = d.dim();
    let mut out = Array2::<f32>::zeros((2 * h, 2 * w));
    for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
        out.slice_mut(s![dy..;2, dx..;2])
            .assign(&d.slice(s![.., .., k]));
    }
    BayerImage(out)
}

/// Green sub-images (Gr, Gb) of a packed frame and of its noise map.
pub fn extract_green(p: &PackedRaw, map: &PackedRaw) -> Result<(Array3<f32>, Array3<f32>)> {
    if p.data().dim() != map.data().dim() {
        return Err(Error::Shape(format!(
            "frame {:?} and noise map {:?} differ",
            p.data().dim(),
            map.data().dim()
        )));
    }
    Ok((
        p.data().slice(s![.., .., 1..3]).to_owned(),
        map.data().slice(s![.., .., 1..3]).to_owned(),
    ))
}

/// Bilinear demosaicking by normalized convolution of each color's samples.
pub fn demosaic_bilinear(b: &BayerImage) -> LinearRgbImage {
    let d = b.data();
    let (h, w) = d.dim();
    let green_k = [[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]];
    let rb_k = [[0.25, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 0.25]];
    let mut out = Array3::<f32>::zeros((h, w, 3));
    for c in 0..3 {
        let k = if c == 1 { &green_k } else { &rb_k };
        for y in 0..h {
            for x in 0..w {
                if cfa_channel(y, x) == c {
                    out[[y, x, c]] = d[[y, x]];
                    continue;
                }
                let (mut acc, mut norm) = (0.0f64, 0.0f64);
                for (ky, row) in k.iter().enumerate() {
                    for (kx, &wt) in row.iter().enumerate() {
                        let yy = y as isize + ky as isize - 1;
                        let xx = x as isize + kx as isize - 1;
                        if wt == 0.0 || yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize
                        {
                            continue;
                        }
                        let (yy, xx) = (yy as usize, xx as usize);
                        if cfa_channel(yy, xx) == c {
                            acc += wt * d[[yy, xx]] as f64;
                            norm += wt;
                        }
                    }
                }
                out[[y, x, c]] = if norm > 0.0 { (acc / norm) as f32 } else { 0.0 };
            }
        }
    }
    LinearRgbImage(out)
}

/// `H x W x C` array to a `1 x C x H x W` tensor.
pub fn hwc_to_tensor(a: &Array3<f32>, dtype: DType) -> Result<Tensor> {
    let (h, w, c) = a.dim();
    let chw: Vec<f32> = a.view().permuted_axes([2, 0, 1]).iter().copied().collect();
    Ok(Tensor::from_vec(chw, (1, c, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

/// `C x H x W` (or `1 x C x H x W`) tensor to an `H x W x C` array.
pub fn tensor_to_hwc(t: &Tensor) -> Result<Array3<f32>> {
    let t = match t.rank() {
        4 => t.squeeze(0)?,
        3 => t.clone(),
        r => return Err(Error::Shape(format!("expected rank 3 or 4, got {r}"))),
    };
    let (c, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let chw = Array3::from_shape_vec((c, h, w), data)
        .map_err(|e| Error::Shape(e.to_string()))?;
    Ok(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
}
