//! Gamma-space PSNR/SSIM, clip evaluation at the two fixed noise levels,
//! and the ablation runner with its report tables.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, synthesize_burst, Clip, TrainSample};
use crate::error::{Error, Result};
use crate::model::{BurstInput, GcpNet, GuideSource, ModelConfig, StageLayout};
use crate::nn::params::fnv1a;
use crate::noise::NoiseParams;
use crate::rawproc::{demosaic_bilinear, process_array, tensor_to_hwc, unpack_bayer, IspParams, PackedRaw};
use crate::scene::natural_clip;
use crate::train::{train_loop, DataSource, TrainConfig};

pub const PSNR_CAP_DB: f64 = 100.0;

/// Printed under every text table.
pub const BUDGET_NOTE: &str =
    "Note: desk-scale training budget. Absolute PSNR/SSIM values are not reproducible at this scale and are not comparable to full-budget results.";

fn check_same(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` after clipping both images to [0, 1], capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same(a, b)?;
    if a.is_empty() {
        return Err(Error::Input("PSNR of an empty image".into()));
    }
    let se: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.clamp(0.0, 1.0) as f64 - y.clamp(0.0, 1.0) as f64).powi(2))
        .sum();
    let mse = se / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

/// Separable Gaussian filtering, "valid" region only.
fn filter_valid(x: &Array2<f64>, k: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = x.dim();
    let (ho, wo) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows = Array2::from_shape_fn((h, wo), |(y, x0)| (0..SSIM_WINDOW).map(|i| k[i] * x[[y, x0 + i]]).sum::<f64>());
    Array2::from_shape_fn((ho, wo), |(y0, x0)| (0..SSIM_WINDOW).map(|i| k[i] * rows[[y0 + i, x0]]).sum::<f64>())
}

fn ssim_plane(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let k = gaussian_taps();
    let a = a.mapv(|v| v.clamp(0.0, 1.0) as f64);
    let b = b.mapv(|v| v.clamp(0.0, 1.0) as f64);
    let mu_a = filter_valid(&a, &k);
    let mu_b = filter_valid(&b, &k);
    let aa = filter_valid(&(&a * &a), &k);
    let bb = filter_valid(&(&b * &b), &k);
    let ab = filter_valid(&(&a * &b), &k);
    let mut sum = 0.0;
    for (((ma, mb), (xaa, xbb)), xab) in mu_a.iter().zip(&mu_b).zip(aa.iter().zip(&bb)).zip(&ab) {
        let (va, vb, cov) = (xaa - ma * ma, xbb - mb * mb, xab - ma * mb);
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / mu_a.len() as f64
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1),
/// averaged over channels.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW || c == 0 {
        return Err(Error::Input(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}")));
    }
    let total: f64 = (0..c)
        .map(|k| ssim_plane(a.index_axis(Axis(2), k), b.index_axis(Axis(2), k)))
        .sum();
    Ok(total / c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLevel {
    High,
    Low,
}

impl NoiseLevel {
    pub const ALL: [NoiseLevel; 2] = [NoiseLevel::High, NoiseLevel::Low];

    pub fn params(self) -> NoiseParams {
        match self {
            NoiseLevel::High => NoiseParams { sigma_s: 6.4e-3, sigma_r: 2e-2 },
            NoiseLevel::Low => NoiseParams { sigma_s: 2.5e-3, sigma_r: 1e-2 },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseLevel::High => "high",
            NoiseLevel::Low => "low",
        }
    }

    fn title(self) -> &'static str {
        match self {
            NoiseLevel::High => "High",
            NoiseLevel::Low => "Low",
        }
    }
}

impl FromStr for NoiseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(NoiseLevel::High),
            "low" => Ok(NoiseLevel::Low),
            _ => Err(Error::Config(format!("noise level must be high or low, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub name: NoiseLevel,
    pub params: NoiseParams,
}

impl EvalSetting {
    pub fn new(level: NoiseLevel) -> Self {
        EvalSetting { name: level, params: level.params() }
    }
}

/// Anything that maps a synthesized burst to a linear RGB image of twice
/// its packed size.
pub trait Restorer {
    fn name(&self) -> String;
    fn frames(&self) -> usize;
    fn restore(&self, sample: &TrainSample) -> Result<Array3<f32>>;
}

/// Returns the ground truth; checks the evaluation pipeline itself.
pub struct Oracle {
    pub frames: usize,
}

impl Restorer for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn frames(&self) -> usize {
        self.frames
    }

    fn restore(&self, sample: &TrainSample) -> Result<Array3<f32>> {
        Ok(sample.gt.data().clone())
    }
}

/// Bilinear demosaicking of the noisy reference frame.
pub struct Bilinear {
    pub frames: usize,
}

impl Restorer for Bilinear {
    fn name(&self) -> String {
        "bilinear".into()
    }

    fn frames(&self) -> usize {
        self.frames
    }

    fn restore(&self, sample: &TrainSample) -> Result<Array3<f32>> {
        let r = sample.burst.reference_index();
        Ok(demosaic_bilinear(&unpack_bayer(&sample.burst.frames()[r])).into_inner())
    }
}

/// The network, optionally run in overlapping tiles.
pub struct ModelRestorer<'a> {
    pub net: &'a GcpNet,
    pub label: String,
    /// Packed tile side; `None` runs whole frames.
    pub tile: Option<usize>,
    pub overlap: usize,
}

impl<'a> ModelRestorer<'a> {
    pub fn new(net: &'a GcpNet) -> Self {
        ModelRestorer {
            net,
            label: format!("gcpnet-{}", net.config().frames),
            tile: None,
            overlap: 16,
        }
    }

    pub fn tiled(mut self, tile: usize) -> Self {
        self.tile = Some(tile);
        self
    }
}

impl Restorer for ModelRestorer<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn frames(&self) -> usize {
        self.net.config().frames
    }

    fn restore(&self, sample: &TrainSample) -> Result<Array3<f32>> {
        match self.tile {
            Some(t) => restore_tiled(self.net, &sample.burst, t, self.overlap),
            None => tensor_to_hwc(&self.net.restore(&sample.burst)?),
        }
    }
}

/// Tiles covering `[0, len)`: `(start, keep_from, keep_to)`. Neighbours
/// overlap by at least `overlap` and each keeps the half of the overlap
/// nearest its own centre.
fn tile_spans(len: usize, tile: usize, overlap: usize) -> Vec<(usize, usize, usize)> {
    if len <= tile {
        return vec![(0, 0, len)];
    }
    let step = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|s| s + tile < len).collect();
    starts.push(len - tile);
    let mut spans = Vec::with_capacity(starts.len());
    let mut from = 0;
    for (i, &s) in starts.iter().enumerate() {
        let to = if i + 1 == starts.len() { len } else { s + tile - overlap / 2 };
        spans.push((s, from, to));
        from = to;
    }
    spans
}

/// Runs the network on overlapping `tile x tile` packed windows and
/// stitches the centre parts of their outputs.
pub fn restore_tiled(net: &GcpNet, burst: &BurstInput, tile: usize, overlap: usize) -> Result<Array3<f32>> {
    if tile <= overlap || !tile.is_multiple_of(2) {
        return Err(Error::Config(format!("tile {tile} must be even and exceed the overlap {overlap}")));
    }
    let (h, w) = burst.size();
    let mut out = Array3::<f32>::zeros((2 * h, 2 * w, 3));
    let cut = |p: &PackedRaw, y: usize, x: usize, th: usize, tw: usize| {
        PackedRaw::new(p.data().slice(s![y..y + th, x..x + tw, ..]).to_owned())
    };
    for (y0, ya, yb) in tile_spans(h, tile, overlap) {
        for (x0, xa, xb) in tile_spans(w, tile, overlap) {
            let (th, tw) = (tile.min(h), tile.min(w));
            let frames = burst.frames().iter().map(|p| cut(p, y0, x0, th, tw)).collect::<Result<Vec<_>>>()?;
            let maps = burst.maps().iter().map(|p| cut(p, y0, x0, th, tw)).collect::<Result<Vec<_>>>()?;
            let rgb = tensor_to_hwc(&net.restore(&BurstInput::new(frames, maps)?)?)?;
            out.slice_mut(s![2 * ya..2 * yb, 2 * xa..2 * xb, ..]).assign(&rgb.slice(s![
                2 * (ya - y0)..2 * (yb - y0),
                2 * (xa - x0)..2 * (xb - x0),
                ..
            ]));
        }
    }
    Ok(out)
}

/// A named sequence of sRGB frames with even sizes.
#[derive(Debug, Clone)]
pub struct EvalClip {
    pub name: String,
    pub frames: Vec<Array3<f32>>,
}

impl EvalClip {
    /// Loads every frame, dropping a trailing odd row or column.
    pub fn load(clip: &Clip) -> Result<Self> {
        let frames = clip
            .load(0, clip.len())?
            .into_iter()
            .map(|f| {
                let (h, w, _) = f.dim();
                f.slice(s![..h - h % 2, ..w - w % 2, ..]).to_owned()
            })
            .collect();
        Ok(EvalClip { name: clip.name.clone(), frames })
    }

    pub fn procedural(name: &str, seed: u64, frames: usize, height: usize, width: usize) -> Self {
        EvalClip {
            name: name.to_string(),
            frames: natural_clip(seed, frames, height, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip: String,
    /// Number of evaluated (centre) frames.
    pub frames: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub setting: EvalSetting,
    /// Sorted by clip name.
    pub clips: Vec<ClipScore>,
    /// Means over clips.
    pub psnr: f64,
    pub ssim: f64,
}

/// Seed of the burst centred on frame `center` of clip `name`.
pub fn burst_seed(seed: u64, name: &str, center: usize) -> u64 {
    derive_seed(seed, fnv1a(name), center as u64)
}

/// Scores every frame that has a full window of `restorer.frames()`
/// neighbours; edge frames are skipped. Both prediction and ground truth
/// go through the ISP before measuring.
pub fn evaluate(
    restorer: &dyn Restorer,
    clips: &[EvalClip],
    setting: &EvalSetting,
    isp: &IspParams,
    seed: u64,
) -> Result<EvalReport> {
    let n = restorer.frames();
    let half = n / 2;
    let mut order: Vec<&EvalClip> = clips.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    let mut scores = Vec::new();
    for clip in order {
        if clip.frames.len() < n {
            log::warn!("skipping clip {}: {} frames, window needs {n}", clip.name, clip.frames.len());
            continue;
        }
        if half > 0 {
            log::warn!("clip {}: skipping {half} frame(s) at each end without a full window", clip.name);
        }
        let (mut p, mut q) = (0.0, 0.0);
        let centers = half..clip.frames.len() - half;
        let count = centers.len();
        for c in centers {
            let window = &clip.frames[c - half..=c + half];
            let sample = synthesize_burst(window, isp, setting.params, burst_seed(seed, &clip.name, c))?;
            let pred = process_array(&restorer.restore(&sample)?, isp);
            let gt = process_array(sample.gt.data(), isp);
            p += psnr(&pred, &gt)?;
            q += ssim(&pred, &gt)?;
        }
        scores.push(ClipScore {
            clip: clip.name.clone(),
            frames: count,
            psnr: p / count as f64,
            ssim: q / count as f64,
        });
    }
    if scores.is_empty() {
        return Err(Error::Input(format!("no clip has the {n} frames a window needs")));
    }
    let k = scores.len() as f64;
    Ok(EvalReport {
        method: restorer.name(),
        setting: *setting,
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / k,
        ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / k,
        clips: scores,
    })
}

/// Plain-text table with aligned columns.
fn render(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row.iter().enumerate().map(|(c, s)| format!("{s:<w$}", w = widths[c])).collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
    }
    out
}

fn cell(psnr: f64, ssim: f64) -> String {
    format!("{psnr:.2}/{ssim:.4}")
}

/// Results table: for each noise level, one row per method with
/// `PSNR/SSIM` for every clip and the average.
pub fn results_table(reports: &[EvalReport]) -> String {
    let mut clips: Vec<String> = reports.iter().flat_map(|r| r.clips.iter().map(|c| c.clip.clone())).collect();
    clips.sort();
    clips.dedup();
    let mut rows = vec![[vec!["Noise Level".to_string(), "Methods".into()], clips.clone(), vec!["Average".into()]].concat()];
    for level in NoiseLevel::ALL {
        let mut first = true;
        for r in reports.iter().filter(|r| r.setting.name == level) {
            let mut row = vec![
                if first { format!("{} noise level", level.title()) } else { String::new() },
                r.method.clone(),
            ];
            first = false;
            for c in &clips {
                row.push(match r.clips.iter().find(|s| &s.clip == c) {
                    Some(s) => cell(s.psnr, s.ssim),
                    None => "-".into(),
                });
            }
            row.push(cell(r.psnr, r.ssim));
            rows.push(row);
        }
    }
    format!("{}{BUDGET_NOTE}\n", render(&rows))
}

/// Long-format CSV: `noise_level,method,clip,frames,psnr,ssim`, with an
/// `Average` row per report.
pub fn results_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("noise_level,method,clip,frames,psnr,ssim\n");
    for level in NoiseLevel::ALL {
        for r in reports.iter().filter(|r| r.setting.name == level) {
            for c in &r.clips {
                let _ = writeln!(out, "{},{},{},{},{:.6},{:.6}", level.name(), r.method, c.clip, c.frames, c.psnr, c.ssim);
            }
            let total: usize = r.clips.iter().map(|c| c.frames).sum();
            let _ = writeln!(out, "{},{},Average,{total},{:.6},{:.6}", level.name(), r.method, r.psnr, r.ssim);
        }
    }
    out
}

/// Writes `<stem>.csv` and `<stem>.txt` into `dir`.
pub fn write_results(reports: &[EvalReport], dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{stem}.csv")), results_csv(reports))?;
    std::fs::write(dir.join(format!("{stem}.txt")), results_table(reports))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationTable {
    GgUnits,
    Stage,
    Interf,
    Frames,
}

impl AblationTable {
    pub fn name(self) -> &'static str {
        match self {
            AblationTable::GgUnits => "gg_units",
            AblationTable::Stage => "stage",
            AblationTable::Interf => "interf",
            AblationTable::Frames => "frames",
        }
    }
}

impl FromStr for AblationTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gg_units" => Ok(AblationTable::GgUnits),
            "stage" | "stage_layout" => Ok(AblationTable::Stage),
            "interf" => Ok(AblationTable::Interf),
            "frames" | "frame_count" => Ok(AblationTable::Frames),
            _ => Err(Error::Config(format!(
                "unknown ablation table {s:?}; expected gg_units, stage, interf or frames"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVariant {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub table: AblationTable,
    pub variants: Vec<AblationVariant>,
    /// Index of the full model, the reference for deltas.
    pub full: usize,
}

impl AblationSpec {
    /// Variants of `base` in table column order.
    pub fn new(table: AblationTable, base: &ModelConfig) -> Self {
        let v = |name: &str, config: ModelConfig| AblationVariant { name: name.into(), config };
        let b = base.clone();
        let (variants, full) = match table {
            AblationTable::GgUnits => {
                let mut vs: Vec<AblationVariant> = (0..=5)
                    .map(|k| {
                        v(&k.to_string(), ModelConfig { gg_units: k, gca_blocks: b.gca_blocks.max(k), ..b.clone() })
                    })
                    .collect();
                let full = b.gg_units.min(5);
                vs.push(v(&format!("{} (w/o GCP upsampling)", b.gg_units), ModelConfig { use_gcp_upsample: false, ..b.clone() }));
                vs.push(v("using RB to guide", ModelConfig { guide_source: GuideSource::RedBlue, ..b.clone() }));
                (vs, full)
            }
            AblationTable::Stage => (
                vec![
                    v("DE + DM", ModelConfig { stage_layout: StageLayout::DeDm, ..b.clone() }),
                    v("DM + DE", ModelConfig { stage_layout: StageLayout::DmDe, ..b.clone() }),
                    v("JDD", ModelConfig { stage_layout: StageLayout::OneStage, ..b.clone() }),
                ],
                2,
            ),
            AblationTable::Interf => (
                vec![
                    v("w/o GCP", ModelConfig { use_gcp_offset: false, ..b.clone() }),
                    v("w/o Inter", ModelConfig { use_interf: false, ..b.clone() }),
                    v("w/o MS", ModelConfig { use_multiscale_offset: false, ..b.clone() }),
                    v("w/o LSTM", ModelConfig { use_lstm: false, ..b.clone() }),
                    v("full", b.clone()),
                ],
                4,
            ),
            AblationTable::Frames => {
                let vs: Vec<AblationVariant> = [1, 3, 5, 7]
                    .into_iter()
                    .map(|n| v(&format!("gcpnet-{n}"), ModelConfig { frames: n, ..b.clone() }))
                    .collect();
                let full = [1, 3, 5, 7].iter().position(|n| *n == b.frames).unwrap_or(2);
                (vs, full)
            }
        };
        AblationSpec { table, variants, full }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub params: usize,
    /// One report per noise level, or the reason the variant failed.
    pub outcome: std::result::Result<Vec<EvalReport>, String>,
}

impl AblationRow {
    fn report(&self, level: NoiseLevel) -> Option<&EvalReport> {
        self.outcome.as_ref().ok()?.iter().find(|r| r.setting.name == level)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub table: AblationTable,
    pub dataset: String,
    pub rows: Vec<AblationRow>,
    pub full: usize,
}

impl AblationReport {
    /// PSNR difference to the full model at `level`.
    pub fn delta(&self, row: usize, level: NoiseLevel) -> Option<f64> {
        Some(self.rows[row].report(level)?.psnr - self.rows[self.full].report(level)?.psnr)
    }

    /// One line per variant:
    /// `variant,params,status,<level>_psnr,<level>_ssim,<level>_delta_psnr...`.
    pub fn csv(&self) -> String {
        let mut out = String::from("variant,params,status");
        for l in NoiseLevel::ALL {
            let n = l.name();
            let _ = write!(out, ",{n}_psnr,{n}_ssim,{n}_delta_psnr");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let status = if row.outcome.is_ok() { "ok" } else { "diverged" };
            let _ = write!(out, "\"{}\",{},{status}", row.name, row.params);
            for l in NoiseLevel::ALL {
                match (row.report(l), self.delta(i, l)) {
                    (Some(r), d) => {
                        let d = d.map(|d| format!("{d:.6}")).unwrap_or_default();
                        let _ = write!(out, ",{:.6},{:.6},{d}", r.psnr, r.ssim);
                    }
                    (None, _) => out.push_str(",,,"),
                }
            }
            out.push('\n');
        }
        out
    }

    fn psnr_cell(&self, row: usize, level: NoiseLevel) -> String {
        match self.rows[row].report(level) {
            Some(r) => format!("{:.2}", r.psnr),
            None => "diverged".into(),
        }
    }

    fn delta_cell(&self, row: usize, level: NoiseLevel) -> String {
        self.delta(row, level).map(|d| format!("{d:+.2}")).unwrap_or_else(|| "-".into())
    }

    /// The text table in the layout of the corresponding study.
    pub fn text(&self) -> String {
        let names: Vec<String> = self.rows.iter().map(|r| r.name.clone()).collect();
        let mut out = String::new();
        match self.table {
            AblationTable::GgUnits => {
                for level in NoiseLevel::ALL {
                    let _ = writeln!(out, "{} noise level, {}", level.title(), self.dataset);
                    let mut rows = vec![[vec!["# of GG Units".to_string()], names.clone()].concat()];
                    let clips: Vec<String> = self
                        .rows
                        .iter()
                        .find_map(|r| r.report(level))
                        .map(|r| r.clips.iter().map(|c| c.clip.clone()).collect())
                        .unwrap_or_default();
                    for clip in &clips {
                        let mut row = vec![clip.clone()];
                        for r in &self.rows {
                            row.push(
                                r.report(level)
                                    .and_then(|e| e.clips.iter().find(|c| &c.clip == clip))
                                    .map(|c| format!("{:.2}", c.psnr))
                                    .unwrap_or_else(|| "diverged".into()),
                            );
                        }
                        rows.push(row);
                    }
                    rows.push([vec!["Average".to_string()], (0..names.len()).map(|i| self.psnr_cell(i, level)).collect()].concat());
                    rows.push([vec!["Delta vs full".to_string()], (0..names.len()).map(|i| self.delta_cell(i, level)).collect()].concat());
                    out.push_str(&render(&rows));
                    out.push('\n');
                }
            }
            AblationTable::Stage => {
                let mut rows = vec![[vec!["Testset".to_string(), "Noise Level".into()], names.clone()].concat()];
                for (k, level) in NoiseLevel::ALL.into_iter().enumerate() {
                    let set = if k == 0 { self.dataset.clone() } else { String::new() };
                    rows.push([vec![set, level.title().into()], (0..names.len()).map(|i| self.psnr_cell(i, level)).collect()].concat());
                }
                for level in NoiseLevel::ALL {
                    rows.push([vec!["Delta vs full".to_string(), level.title().into()], (0..names.len()).map(|i| self.delta_cell(i, level)).collect()].concat());
                }
                out.push_str(&render(&rows));
            }
            AblationTable::Interf => {
                let _ = writeln!(out, "{}", self.dataset);
                let mut rows = vec![[vec!["Noise".to_string()], names.clone()].concat()];
                for level in NoiseLevel::ALL {
                    rows.push([vec![level.title().to_string()], (0..names.len()).map(|i| self.psnr_cell(i, level)).collect()].concat());
                }
                for level in NoiseLevel::ALL {
                    rows.push([vec![format!("Delta {}", level.title())], (0..names.len()).map(|i| self.delta_cell(i, level)).collect()].concat());
                }
                out.push_str(&render(&rows));
            }
            AblationTable::Frames => {
                let reports: Vec<EvalReport> = self
                    .rows
                    .iter()
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .flatten()
                    .cloned()
                    .collect();
                let _ = writeln!(out, "{}", self.dataset);
                let table = results_table(&reports);
                out.push_str(table.strip_suffix(&format!("{BUDGET_NOTE}\n")).unwrap_or(&table));
                for (i, r) in self.rows.iter().enumerate() {
                    if let Err(e) = &r.outcome {
                        let _ = writeln!(out, "{}: diverged ({e})", r.name);
                    } else {
                        let _ = writeln!(
                            out,
                            "{}: delta vs full {} (high), {} (low)",
                            r.name,
                            self.delta_cell(i, NoiseLevel::High),
                            self.delta_cell(i, NoiseLevel::Low)
                        );
                    }
                }
            }
        }
        out.push_str(BUDGET_NOTE);
        out.push('\n');
        out
    }

    /// Writes `ablation_<table>.csv` and `ablation_<table>.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let stem = format!("ablation_{}", self.table.name());
        std::fs::write(dir.join(format!("{stem}.csv")), self.csv())?;
        std::fs::write(dir.join(format!("{stem}.txt")), self.text())?;
        Ok(())
    }
}

/// Trains every variant with the same seed, data and step budget, then
/// evaluates it at both noise levels. A variant that fails to train is
/// recorded and the run continues.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &TrainConfig,
    data: &DataSource,
    clips: &[EvalClip],
    dataset: &str,
    eval_seed: u64,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(spec.variants.len());
    for variant in &spec.variants {
        variant.config.validate()?;
        let cfg = TrainConfig { frames: variant.config.frames, ..train.clone() };
        log::info!("ablation {}: training variant {}", spec.table.name(), variant.name);
        let outcome = match train_loop(&variant.config, &cfg, data, None, None) {
            Ok(run) => {
                let restorer = ModelRestorer { label: variant.name.clone(), ..ModelRestorer::new(&run.net) };
                let reports = NoiseLevel::ALL
                    .into_iter()
                    .map(|l| evaluate(&restorer, clips, &EvalSetting::new(l), &train.loss.isp, eval_seed))
                    .collect::<Result<Vec<_>>>()?;
                Ok((run.net.param_count(), reports))
            }
            Err(e @ (Error::Divergence { .. } | Error::NonFinite { .. })) => {
                log::warn!("variant {} diverged: {e}", variant.name);
                Err(e.to_string())
            }
            Err(e) => return Err(e),
        };
        let params = match &outcome {
            Ok((p, _)) => *p,
            Err(_) => GcpNet::new(&variant.config, candle_core::DType::F32, 0)?.param_count(),
        };
        rows.push(AblationRow {
            name: variant.name.clone(),
            params,
            outcome: outcome.map(|(_, r)| r),
        });
    }
    Ok(AblationReport { table: spec.table, dataset: dataset.to_string(), rows, full: spec.full })
}
