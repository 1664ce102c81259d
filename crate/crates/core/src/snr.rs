//! Per-channel signal-to-noise statistics on raw data.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{apply_noise, NoiseParams};
use crate::rawproc::{mosaic, pack_bayer, unprocess, IspParams, PackedRaw};

/// Reported in place of an infinite SNR.
pub const SNR_CAP_DB: f64 = 300.0;

fn snr_db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        return SNR_CAP_DB;
    }
    (10.0 * (signal / noise).log10()).min(SNR_CAP_DB)
}

fn energies(clean: &PackedRaw, noisy: &PackedRaw, channels: &[usize]) -> (f64, f64) {
    let (mut sig, mut err) = (0.0, 0.0);
    for &c in channels {
        let a = clean.data().slice(s![.., .., c]);
        let b = noisy.data().slice(s![.., .., c]);
        for (x, y) in a.iter().zip(b.iter()) {
            let (x, y) = (*x as f64, *y as f64);
            sig += x * x;
            err += (y - x) * (y - x);
        }
    }
    (sig, err)
}

/// `10 log10(sum clean^2 / sum (noisy - clean)^2)` for R, pooled G (Gr and
/// Gb together) and B.
pub fn channel_snr(clean: &PackedRaw, noisy: &PackedRaw) -> Result<(f64, f64, f64)> {
    if clean.data().dim() != noisy.data().dim() {
        return Err(Error::Shape(format!(
            "clean {:?} vs noisy {:?}",
            clean.data().dim(),
            noisy.data().dim()
        )));
    }
    let mut out = [0.0; 3];
    for (i, (name, chans)) in [("red", &[0][..]), ("green", &[1, 2][..]), ("blue", &[3][..])]
        .into_iter()
        .enumerate()
    {
        let (sig, err) = energies(clean, noisy, chans);
        if sig == 0.0 {
            return Err(Error::UndefinedSnr(format!("{name} channel of the clean image is all zero")));
        }
        out[i] = snr_db(sig, err);
    }
    Ok((out[0], out[1], out[2]))
}

/// SNR of a single packed channel; used to check pooling bounds.
pub fn single_channel_snr(clean: &PackedRaw, noisy: &PackedRaw, channel: usize) -> Result<f64> {
    let (sig, err) = energies(clean, noisy, &[channel]);
    if sig == 0.0 {
        return Err(Error::UndefinedSnr(format!("channel {channel} is all zero")));
    }
    Ok(snr_db(sig, err))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrRecord {
    pub image_id: String,
    pub snr_r: f64,
    pub snr_g: f64,
    pub snr_b: f64,
}

impl SnrRecord {
    pub fn green_is_max(&self) -> bool {
        self.snr_g > self.snr_r && self.snr_g > self.snr_b
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelSnrReport {
    pub records: Vec<SnrRecord>,
}

impl ChannelSnrReport {
    /// Fraction of images whose green SNR strictly exceeds red and blue.
    pub fn green_max_fraction(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.green_is_max()).count() as f64 / self.records.len() as f64
    }

    /// CSV with columns `image_id,snr_r,snr_g,snr_b`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "image_id,snr_r,snr_g,snr_b")?;
        for r in &self.records {
            writeln!(f, "{},{:.6},{:.6},{:.6}", r.image_id, r.snr_r, r.snr_g, r.snr_b)?;
        }
        f.flush()?;
        Ok(())
    }

    /// Plot series: one line per image, sorted by ascending green SNR, with
    /// the rank as the x coordinate.
    pub fn write_plot_series(&self, path: &Path) -> Result<()> {
        let mut sorted = self.records.clone();
        sorted.sort_by(|a, b| a.snr_g.total_cmp(&b.snr_g));
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "rank,image_id,snr_r,snr_g,snr_b")?;
        for (i, r) in sorted.iter().enumerate() {
            writeln!(f, "{i},{},{:.6},{:.6},{:.6}", r.image_id, r.snr_r, r.snr_g, r.snr_b)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Synthesize noisy raw data for each sRGB image and measure channel SNRs.
/// Image `i` uses noise seed `seed + i`, so results do not depend on order
/// of evaluation.
pub fn snr_report(
    images: &[(String, Array3<f32>)],
    isp: &IspParams,
    np: NoiseParams,
    seed: u64,
) -> Result<ChannelSnrReport> {
    if images.is_empty() {
        return Err(Error::Input("SNR report needs at least one image".into()));
    }
    let mut records = Vec::with_capacity(images.len());
    for (i, (id, img)) in images.iter().enumerate() {
        let (h, w, _) = img.dim();
        let img = img.slice(s![..h - h % 2, ..w - w % 2, ..]).to_owned();
        let clean = pack_bayer(&mosaic(&unprocess(&img, isp)?)?);
        let noisy = apply_noise(&clean, np, seed.wrapping_add(i as u64))?;
        let (snr_r, snr_g, snr_b) = channel_snr(&clean, &noisy)?;
        records.push(SnrRecord {
            image_id: id.clone(),
            snr_r,
            snr_g,
            snr_b,
        });
    }
    Ok(ChannelSnrReport { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rawproc::Gamma;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn constant(v: f32, h: usize, w: usize) -> PackedRaw {
        PackedRaw::new(Array3::from_elem((h, w, 4), v)).unwrap()
    }

    #[test]
    fn zero_noise_is_capped() {
        let c = constant(0.5, 4, 4);
        assert_eq!(channel_snr(&c, &c).unwrap(), (SNR_CAP_DB, SNR_CAP_DB, SNR_CAP_DB));
    }

    #[test]
    fn unit_signal_with_tenth_noise_is_twenty_db() {
        let clean = constant(1.0, 500, 500);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = Normal::new(0.0, 0.1).unwrap();
        let noisy = PackedRaw::new(clean.data().mapv(|v| v + n.sample(&mut rng) as f32)).unwrap();
        let (r, g, b) = channel_snr(&clean, &noisy).unwrap();
        for v in [r, g, b] {
            assert!((v - 20.0).abs() < 0.2, "{v}");
        }
    }

    #[test]
    fn ratio_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = Normal::new(0.0, 0.05).unwrap();
        let clean = PackedRaw::new(Array3::from_shape_fn((16, 16, 4), |(y, x, c)| {
            0.1 + 0.01 * (y + x + c) as f32
        }))
        .unwrap();
        let noisy = PackedRaw::new(clean.data().mapv(|v| v + n.sample(&mut rng) as f32)).unwrap();
        // doubling is exact in floating point, so the ratio is unchanged
        let scaled_clean = PackedRaw::new(clean.data() * 2.0).unwrap();
        let scaled_noisy = PackedRaw::new(noisy.data() * 2.0).unwrap();
        let a = channel_snr(&clean, &noisy).unwrap();
        let b = channel_snr(&scaled_clean, &scaled_noisy).unwrap();
        assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9 && (a.2 - b.2).abs() < 1e-9);
    }

    #[test]
    fn pooled_green_between_gr_and_gb() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 0.05).unwrap();
        let clean = PackedRaw::new(Array3::from_shape_fn((32, 32, 4), |(_, _, c)| {
            if c == 2 { 0.2 } else { 0.6 }
        }))
        .unwrap();
        let noisy = PackedRaw::new(clean.data().mapv(|v| v + n.sample(&mut rng) as f32)).unwrap();
        let (_, g, _) = channel_snr(&clean, &noisy).unwrap();
        let gr = single_channel_snr(&clean, &noisy, 1).unwrap();
        let gb = single_channel_snr(&clean, &noisy, 2).unwrap();
        assert!(g <= gr.max(gb) && g >= gr.min(gb));
    }

    #[test]
    fn zero_channel_is_undefined() {
        let mut clean = constant(0.5, 4, 4);
        clean.data_mut().slice_mut(s![.., .., 0]).fill(0.0);
        assert!(matches!(
            channel_snr(&clean, &clean),
            Err(Error::UndefinedSnr(_))
        ));
    }

    #[test]
    fn brighter_green_has_higher_snr() {
        let img = Array3::from_elem((200, 200, 3), 0.5f32);
        let np = NoiseParams::new(6.4e-3, 2e-2).unwrap();
        let rep = snr_report(&[("gray".into(), img)], &IspParams::default(), np, 0).unwrap();
        let r = &rep.records[0];
        assert!(r.snr_g > r.snr_r && r.snr_g > r.snr_b, "{r:?}");
    }

    #[test]
    fn equal_gains_give_equal_snr() {
        let img = Array3::from_elem((400, 400, 3), 0.5f32);
        let np = NoiseParams::new(6.4e-3, 2e-2).unwrap();
        let isp = IspParams::neutral(Gamma::SrgbStandard);
        let rep = snr_report(&[("gray".into(), img)], &isp, np, 3).unwrap();
        let r = &rep.records[0];
        assert!((r.snr_r - r.snr_g).abs() < 0.2 && (r.snr_b - r.snr_g).abs() < 0.2, "{r:?}");
    }

    #[test]
    fn empty_set_rejected() {
        let np = NoiseParams::new(1e-3, 1e-3).unwrap();
        assert!(snr_report(&[], &IspParams::default(), np, 0).is_err());
    }
}
