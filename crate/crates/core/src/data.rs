//! Clip discovery and burst synthesis from sRGB video frames.

use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BurstInput;
use crate::noise::{apply_noise, noise_map, sample_noise_params, NoiseParams, NoiseRanges};
use crate::rawproc::{mosaic, pack_bayer, unprocess, IspParams, LinearRgbImage, PackedRaw};
use crate::tensorio::read_png;

/// Mixes a base seed with two counters (splitmix64 finalizer), so streams
/// for different steps, samples and frames never overlap.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// An ordered sequence of PNG frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clip {
    /// Path relative to the scanned root, `/`-separated.
    pub name: String,
    pub frames: Vec<PathBuf>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads `count` consecutive frames starting at `start`.
    pub fn load(&self, start: usize, count: usize) -> Result<Vec<Array3<f32>>> {
        if start + count > self.frames.len() {
            return Err(Error::Input(format!(
                "clip {} has {} frames, requested {start}..{}",
                self.name,
                self.frames.len(),
                start + count
            )));
        }
        self.frames[start..start + count].iter().map(|p| read_png(p)).collect()
    }
}

/// Every directory under `root` holding at least `min_frames` PNG files is
/// a clip; frames are ordered by file name and clips by relative path.
pub fn scan_clips(root: &Path, min_frames: usize) -> Result<Vec<Clip>> {
    if !root.is_dir() {
        return Err(Error::Input(format!("clip root {} is not a directory", root.display())));
    }
    let mut clips = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Input(e.to_string()))?;
        if !entry.file_type().is_dir() {
            continue;
        }
        let mut frames: Vec<PathBuf> = std::fs::read_dir(entry.path())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png"))
            })
            .collect();
        if frames.len() < min_frames.max(1) {
            continue;
        }
        frames.sort();
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let name = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        clips.push(Clip {
            name: if name.is_empty() { ".".into() } else { name },
            frames,
        });
    }
    Ok(clips)
}

/// A synthesized burst with its targets.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub burst: BurstInput,
    /// Clean linear RGB of the reference frame, twice the packed size.
    pub gt: LinearRgbImage,
    /// Clean packed reference frame.
    pub clean_ref: PackedRaw,
    pub noise: NoiseParams,
    pub seed: u64,
}

/// Unprocesses, mosaicks, packs and corrupts every frame at a fixed noise
/// level. Frame `t` draws its noise from `derive_seed(seed, 1, t)`.
pub fn synthesize_burst(
    frames: &[Array3<f32>],
    isp: &IspParams,
    np: NoiseParams,
    seed: u64,
) -> Result<TrainSample> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("burst synthesis needs at least one frame".into()))?;
    let dim = first.dim();
    if frames.iter().any(|f| f.dim() != dim) {
        return Err(Error::Shape("all frames of a clip must share one size".into()));
    }
    if dim.0 % 2 != 0 || dim.1 % 2 != 0 || dim.0 == 0 || dim.1 == 0 {
        return Err(Error::Shape(format!("frames need even, nonzero size, got {}x{}", dim.0, dim.1)));
    }
    let r = frames.len() / 2;
    let mut noisy = Vec::with_capacity(frames.len());
    let mut maps = Vec::with_capacity(frames.len());
    let mut gt = None;
    let mut clean_ref = None;
    for (t, f) in frames.iter().enumerate() {
        let linear = unprocess(f, isp)?;
        let clean = pack_bayer(&mosaic(&linear)?);
        let y = apply_noise(&clean, np, derive_seed(seed, 1, t as u64))?;
        maps.push(noise_map(&y, np));
        noisy.push(y);
        if t == r {
            gt = Some(linear);
            clean_ref = Some(clean);
        }
    }
    Ok(TrainSample {
        burst: BurstInput::new(noisy, maps)?,
        gt: gt.expect("reference frame exists"),
        clean_ref: clean_ref.expect("reference frame exists"),
        noise: np,
        seed,
    })
}

/// Crops an even-aligned `2 * patch` square from every frame, draws one
/// noise level from `ranges`, and synthesizes the burst.
pub fn synthesize_sample(
    clip: &[Array3<f32>],
    isp: &IspParams,
    ranges: &NoiseRanges,
    patch: usize,
    seed: u64,
) -> Result<TrainSample> {
    let first = clip
        .first()
        .ok_or_else(|| Error::Input("empty clip".into()))?;
    let (h, w, _) = first.dim();
    let side = 2 * patch;
    if patch == 0 || h < side || w < side {
        return Err(Error::Input(format!(
            "frames of {h}x{w} are smaller than the {side}x{side} crop"
        )));
    }
    if clip.iter().any(|f| f.dim() != first.dim()) {
        return Err(Error::Shape("all frames of a clip must share one size".into()));
    }
    // even offsets keep the RGGB phase
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0));
    let y0 = 2 * rng.random_range(0..=(h - side) / 2);
    let x0 = 2 * rng.random_range(0..=(w - side) / 2);
    let np = sample_noise_params(ranges, derive_seed(seed, 0, 1))?;
    let crops: Vec<Array3<f32>> = clip
        .iter()
        .map(|f| f.slice(s![y0..y0 + side, x0..x0 + side, ..]).to_owned())
        .collect();
    synthesize_burst(&crops, isp, np, seed)
}
