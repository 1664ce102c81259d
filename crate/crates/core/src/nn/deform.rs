//! Modulated deformable convolution with odd square kernels.
//!
//! Sampling is a custom op producing per-tap columns `[B, C*K, H, W]`; the
//! modulation masks and weight contraction are ordinary tensor ops, so only
//! bilinear sampling needs a hand-written backward.
//!
//! Offsets are `[B, 2*G*K, H, W]` with `(dy, dx)` of group `g`, tap `k` at
//! channels `2*(g*K + k)` and `2*(g*K + k) + 1`. Masks are `[B, G*K, H, W]`.

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

use super::flops;
use super::params::{join, Init, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    groups: usize,
    ks: usize,
    k: usize,
}

impl Geom {
    fn taps(&self) -> usize {
        self.k
    }

    /// Offset from the output position to tap `k` before deformation.
    fn tap(&self, k: usize) -> (isize, isize) {
        let r = (self.ks / 2) as isize;
        ((k / self.ks) as isize - r, (k % self.ks) as isize - r)
    }
}

fn at<T: Float>(img: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        img[y as usize * w + x as usize]
    }
}

fn sample_fwd<T: Float>(g: &Geom, f: &[T], off: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let cpg = g.c / g.groups;
    let mut out = vec![T::zero(); g.b * g.c * g.k * hw];
    for b in 0..g.b {
        for c in 0..g.c {
            let gi = c / cpg;
            let img = &f[(b * g.c + c) * hw..(b * g.c + c + 1) * hw];
            for k in 0..g.k {
                let (ty, tx) = g.tap(k);
                let oy = &off[(b * 2 * g.groups * g.k + 2 * (gi * g.k + k)) * hw..][..hw];
                let ox = &off[(b * 2 * g.groups * g.k + 2 * (gi * g.k + k) + 1) * hw..][..hw];
                let dst = &mut out[((b * g.c + c) * g.k + k) * hw..][..hw];
                for y in 0..g.h {
                    for x in 0..g.w {
                        let i = y * g.w + x;
                        let py = T::from(y as isize + ty).unwrap() + oy[i];
                        let px = T::from(x as isize + tx).unwrap() + ox[i];
                        dst[i] = bilinear(img, g.h, g.w, py, px);
                    }
                }
            }
        }
    }
    out
}

fn bilinear<T: Float>(img: &[T], h: usize, w: usize, py: T, px: T) -> T {
    let y0f = py.floor();
    let x0f = px.floor();
    let (ly, lx) = (py - y0f, px - x0f);
    let (hy, hx) = (T::one() - ly, T::one() - lx);
    let (y0, x0) = (y0f.to_isize().unwrap_or(isize::MIN / 2), x0f.to_isize().unwrap_or(isize::MIN / 2));
    hy * hx * at(img, h, w, y0, x0)
        + hy * lx * at(img, h, w, y0, x0 + 1)
        + ly * hx * at(img, h, w, y0 + 1, x0)
        + ly * lx * at(img, h, w, y0 + 1, x0 + 1)
}

fn sample_bwd<T: Float>(g: &Geom, f: &[T], off: &[T], grad: &[T]) -> (Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let cpg = g.c / g.groups;
    let mut gf = vec![T::zero(); f.len()];
    let mut goff = vec![T::zero(); off.len()];
    for b in 0..g.b {
        for c in 0..g.c {
            let gi = c / cpg;
            let base = (b * g.c + c) * hw;
            for k in 0..g.k {
                let (ty, tx) = g.tap(k);
                let cy = (b * 2 * g.groups * g.k + 2 * (gi * g.k + k)) * hw;
                let cx = cy + hw;
                let gsrc = &grad[((b * g.c + c) * g.k + k) * hw..][..hw];
                for y in 0..g.h {
                    for x in 0..g.w {
                        let i = y * g.w + x;
                        let gr = gsrc[i];
                        if gr == T::zero() {
                            continue;
                        }
                        let py = T::from(y as isize + ty).unwrap() + off[cy + i];
                        let px = T::from(x as isize + tx).unwrap() + off[cx + i];
                        let (y0f, x0f) = (py.floor(), px.floor());
                        let (ly, lx) = (py - y0f, px - x0f);
                        let (hy, hx) = (T::one() - ly, T::one() - lx);
                        let (y0, x0) = match (y0f.to_isize(), x0f.to_isize()) {
                            (Some(a), Some(b)) => (a, b),
                            _ => continue,
                        };
                        let img = &f[base..base + hw];
                        let v00 = at(img, g.h, g.w, y0, x0);
                        let v01 = at(img, g.h, g.w, y0, x0 + 1);
                        let v10 = at(img, g.h, g.w, y0 + 1, x0);
                        let v11 = at(img, g.h, g.w, y0 + 1, x0 + 1);
                        goff[cy + i] = goff[cy + i] + gr * (hx * (v10 - v00) + lx * (v11 - v01));
                        goff[cx + i] = goff[cx + i] + gr * (hy * (v01 - v00) + ly * (v11 - v10));
                        for (dy, dx, wgt) in [
                            (0, 0, hy * hx),
                            (0, 1, hy * lx),
                            (1, 0, ly * hx),
                            (1, 1, ly * lx),
                        ] {
                            let (yy, xx) = (y0 + dy, x0 + dx);
                            if yy >= 0 && xx >= 0 && yy < g.h as isize && xx < g.w as isize {
                                let j = base + yy as usize * g.w + xx as usize;
                                gf[j] = gf[j] + gr * wgt;
                            }
                        }
                    }
                }
            }
        }
    }
    (gf, goff)
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("deformable sampling needs contiguous inputs"),
    }
}

struct DeformSample {
    groups: usize,
    ks: usize,
}

impl DeformSample {
    fn geom(&self, l1: &Layout, l2: &Layout) -> candle_core::Result<Geom> {
        let (b, c, h, w) = l1.shape().dims4()?;
        let (b2, oc, h2, w2) = l2.shape().dims4()?;
        let k = self.ks * self.ks;
        if b2 != b || h2 != h || w2 != w || oc != 2 * self.groups * k || c % self.groups != 0 {
            candle_core::bail!(
                "deformable sampling: features {:?}, offsets {:?}, groups {}",
                l1.dims(),
                l2.dims(),
                self.groups
            );
        }
        Ok(Geom { b, c, h, w, groups: self.groups, ks: self.ks, k })
    }
}

impl CustomOp2 for DeformSample {
    fn name(&self) -> &'static str {
        "deform-sample"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom(l1, l2)?;
        let shape = Shape::from((g.b, g.c * g.taps(), g.h, g.w));
        let out = match (s1, s2) {
            (CpuStorage::F32(f), CpuStorage::F32(o)) => {
                CpuStorage::F32(sample_fwd(&g, contiguous(f, l1)?, contiguous(o, l2)?))
            }
            (CpuStorage::F64(f), CpuStorage::F64(o)) => {
                CpuStorage::F64(sample_fwd(&g, contiguous(f, l1)?, contiguous(o, l2)?))
            }
            _ => candle_core::bail!("deformable sampling supports matching f32 or f64 inputs"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        f: &Tensor,
        off: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geom(f.layout(), off.layout())?;
        fn run<T: WithDType + Float>(
            g: &Geom,
            f: &Tensor,
            off: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<(Tensor, Tensor)> {
            let fv = f.flatten_all()?.to_vec1::<T>()?;
            let ov = off.flatten_all()?.to_vec1::<T>()?;
            let gv = grad.flatten_all()?.to_vec1::<T>()?;
            let (gf, go) = sample_bwd(g, &fv, &ov, &gv);
            Ok((
                Tensor::from_vec(gf, f.shape(), f.device())?,
                Tensor::from_vec(go, off.shape(), off.device())?,
            ))
        }
        let (gf, go) = match f.dtype() {
            DType::F32 => run::<f32>(&g, f, off, grad)?,
            DType::F64 => run::<f64>(&g, f, off, grad)?,
            dt => candle_core::bail!("deformable sampling does not support {dt:?}"),
        };
        Ok((Some(gf), Some(go)))
    }
}

/// Offsets and modulation masks driving one deformable convolution.
#[derive(Debug, Clone)]
pub struct DeformField {
    pub offsets: Tensor,
    pub masks: Tensor,
}

/// Bilinear samples of `f` at the `K = ks*ks` deformed taps of each
/// position, `[B, C*K, H, W]` with channel index `c*K + k`.
pub fn deform_sample(f: &Tensor, offsets: &Tensor, groups: usize, ks: usize) -> Result<Tensor> {
    if ks.is_multiple_of(2) {
        return Err(Error::Config(format!("deformable kernel size must be odd, got {ks}")));
    }
    let f = f.contiguous()?;
    let offsets = offsets.contiguous()?;
    Ok(f.apply_op2(&offsets, DeformSample { groups, ks })?)
}

/// Modulated deformable convolution, `weight: [out, C, k, k]`.
#[derive(Debug, Clone)]
pub struct DeformConv2d {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl DeformConv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        ks: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !cin.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "{cin} channels cannot be split into {groups} deformable groups"
            )));
        }
        let weight = store.create(
            &join(name, "weight"),
            &[cout, cin, ks, ks],
            Init::He { fan_in: cin * ks * ks },
        )?;
        let bias = store.create(&join(name, "bias"), &[cout], Init::Constant(0.0))?;
        Ok(DeformConv2d { weight, bias, groups })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, f: &Tensor, field: &DeformField) -> Result<Tensor> {
        deform_conv(f, field, &self.weight, &self.bias, self.groups)
    }
}

/// Functional form of [`DeformConv2d::forward`].
pub fn deform_conv(
    f: &Tensor,
    field: &DeformField,
    weight: &Tensor,
    bias: &Tensor,
    groups: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let (cout, cin, kh, kw) = weight.dims4()?;
    let k = kh * kw;
    if cin != c || kh != kw {
        return Err(Error::Shape(format!(
            "deformable weight {:?} does not fit {c} input channels",
            weight.dims()
        )));
    }
    if field.masks.dims() != [b, groups * k, h, w] {
        return Err(Error::Shape(format!(
            "masks are {:?}, expected {:?}",
            field.masks.dims(),
            [b, groups * k, h, w]
        )));
    }
    let cols = deform_sample(f, &field.offsets, groups, kh)?;
    let cols = cols
        .reshape((b, groups, c / groups, k, h * w))?
        .broadcast_mul(&field.masks.reshape((b, groups, 1, k, h * w))?)?
        .reshape((b, c * k, h * w))?;
    let wm = weight
        .reshape((1, cout, c * k))?
        .broadcast_as((b, cout, c * k))?
        .contiguous()?;
    flops::record(2 * (b * cout * h * w * c * k) as u64);
    let y = wm.matmul(&cols)?.reshape((b, cout, h, w))?;
    Ok(y.broadcast_add(&bias.reshape((1, cout, 1, 1))?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{gradcheck, random_tensor};
    use candle_core::Device;

    fn field(b: usize, g: usize, h: usize, w: usize, dt: DType) -> DeformField {
        DeformField {
            offsets: Tensor::zeros((b, 2 * g * 9, h, w), dt, &Device::Cpu).unwrap(),
            masks: Tensor::ones((b, g * 9, h, w), dt, &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn zero_offsets_unit_masks_match_conv() {
        let x = random_tensor(&[2, 4, 6, 7], 1, 1.0, DType::F32);
        let wt = random_tensor(&[5, 4, 3, 3], 2, 0.3, DType::F32);
        let bias = random_tensor(&[5], 3, 0.1, DType::F32);
        let a = deform_conv(&x, &field(2, 2, 6, 7, DType::F32), &wt, &bias, 2).unwrap();
        let b = x
            .conv2d(&wt, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&bias.reshape((1, 5, 1, 1)).unwrap())
            .unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(d < 1e-5, "{d}");
    }

    #[test]
    fn integer_offset_shifts_image() {
        // every tap displaced by +1 row: same as convolving the image shifted up
        let x = random_tensor(&[1, 1, 5, 5], 4, 1.0, DType::F64);
        let mut fld = field(1, 1, 5, 5, DType::F64);
        let mut off = vec![0.0f64; 18 * 25];
        for k in 0..9 {
            off[2 * k * 25..(2 * k + 1) * 25].fill(1.0);
        }
        fld.offsets = Tensor::from_vec(off, (1, 18, 5, 5), &Device::Cpu).unwrap();
        let cols = deform_sample(&x, &fld.offsets, 1, 3).unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let cv = cols.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        // centre tap (k = 4) at (y, x) samples x[y + 1, x]
        for y in 0..5 {
            for xx in 0..5 {
                let expect = if y + 1 < 5 { xv[(y + 1) * 5 + xx] } else { 0.0 };
                assert!((cv[4 * 25 + y * 5 + xx] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fractional_offset_interpolates() {
        let x = Tensor::from_vec(vec![0.0f64, 1.0, 2.0, 3.0], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let mut off = vec![0.0f64; 18 * 4];
        // centre tap, position (0,0): dy = 0.5, dx = 0.25
        off[8 * 4] = 0.5;
        off[9 * 4] = 0.25;
        let offsets = Tensor::from_vec(off, (1, 18, 2, 2), &Device::Cpu).unwrap();
        let cols = deform_sample(&x, &offsets, 1, 3).unwrap();
        let v = cols.flatten_all().unwrap().to_vec1::<f64>().unwrap()[4 * 4];
        let expect = 0.5 * (0.75 * 0.0 + 0.25 * 1.0) + 0.5 * (0.75 * 2.0 + 0.25 * 3.0);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn far_offsets_read_zero_padding() {
        let x = Tensor::ones((1, 2, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let offsets = Tensor::full(100.0f64, (1, 18, 3, 3), &Device::Cpu).unwrap();
        let cols = deform_sample(&x, &offsets, 1, 3).unwrap();
        assert_eq!(cols.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random_tensor(&[1, 4, 5, 5], 10, 1.0, DType::F64);
        // fractional offsets away from integer kinks
        let off = (random_tensor(&[1, 36, 5, 5], 11, 0.3, DType::F64) + 0.37).unwrap();
        let m = random_tensor(&[1, 18, 5, 5], 12, 1.0, DType::F64);
        let wt = random_tensor(&[3, 4, 3, 3], 13, 0.3, DType::F64);
        let bias = random_tensor(&[3], 14, 0.1, DType::F64);
        let err = gradcheck(
            |t| {
                let fld = DeformField { offsets: t[1].clone(), masks: t[2].clone() };
                deform_conv(&t[0], &fld, &t[3], &t[4], 2)
            },
            &[x, off, m, wt, bias],
            1e-6,
            60,
        )
        .unwrap();
        assert!(err < 1e-3, "max relative error {err}");
    }

    #[test]
    fn rejects_bad_groups() {
        let mut store = ParamStore::new(DType::F32, 0, 0.1);
        assert!(DeformConv2d::new(&mut store, "d", 6, 6, 3, 4).is_err());
    }

    #[test]
    fn ramp_with_half_pixel_offset() {
        // 1x1 kernel of weight 1 on f(y, x) = x, every sample displaced by +0.5 in x
        let (h, w) = (4, 7);
        let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let x = Tensor::from_vec(ramp, (1, 1, h, w), &Device::Cpu).unwrap();
        let mut off = vec![0.0f64; 2 * h * w];
        off[h * w..].fill(0.5);
        let fld = DeformField {
            offsets: Tensor::from_vec(off, (1, 2, h, w), &Device::Cpu).unwrap(),
            masks: Tensor::ones((1, 1, h, w), DType::F64, &Device::Cpu).unwrap(),
        };
        let wt = Tensor::ones((1, 1, 1, 1), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros(1, DType::F64, &Device::Cpu).unwrap();
        let y = deform_conv(&x, &fld, &wt, &b, 1).unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for r in 0..h {
            for c in 0..w - 1 {
                assert!((y[r * w + c] - (c as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }
}
