use candle_core::{DType, Device, IndexOp, Tensor};

use super::config::{GuideSource, ModelConfig, StageLayout};
use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{
    depth_to_space, flops, lrelu, sigmoid, space_to_depth, upsample2x, AdaptiveUpsample, Conv2d,
    ConvLstmCell, ConvTranspose2d, DeformConv2d, DeformField, GcaBlock, Init, LstmState, ParamStore,
};
use crate::rawproc::{hwc_to_tensor, PackedRaw};

/// Noisy packed frames of one burst with their noise maps.
#[derive(Debug, Clone)]
pub struct BurstInput {
    frames: Vec<PackedRaw>,
    maps: Vec<PackedRaw>,
}

impl BurstInput {
    pub fn new(frames: Vec<PackedRaw>, maps: Vec<PackedRaw>) -> Result<Self> {
        if frames.is_empty() || frames.len() != maps.len() {
            return Err(Error::Input(format!(
                "burst needs matching frames and maps, got {} and {}",
                frames.len(),
                maps.len()
            )));
        }
        let dim = frames[0].data().dim();
        if frames.iter().chain(&maps).any(|p| p.data().dim() != dim) {
            return Err(Error::Shape("all frames and maps of a burst must share one shape".into()));
        }
        if maps.iter().any(|m| m.data().iter().any(|v| !(*v >= 0.0))) {
            return Err(Error::Input("noise maps must be non-negative".into()));
        }
        Ok(BurstInput { frames, maps })
    }

    pub fn frames(&self) -> &[PackedRaw] {
        &self.frames
    }

    pub fn maps(&self) -> &[PackedRaw] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.frames.len() / 2
    }

    /// Packed height and width.
    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.frames[0].data().dim();
        (h, w)
    }

    pub fn to_tensors(&self, dtype: DType) -> Result<BurstTensors> {
        BurstTensors::stack(std::slice::from_ref(self), dtype)
    }
}

/// A batch of bursts: one `[B, 4, H, W]` tensor per frame position.
#[derive(Debug, Clone)]
pub struct BurstTensors {
    pub frames: Vec<Tensor>,
    pub maps: Vec<Tensor>,
}

impl BurstTensors {
    pub fn stack(bursts: &[BurstInput], dtype: DType) -> Result<Self> {
        let first = bursts
            .first()
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let n = first.len();
        if bursts.iter().any(|b| b.len() != n || b.size() != first.size()) {
            return Err(Error::Shape("bursts in a batch must share frame count and size".into()));
        }
        let gather = |pick: &dyn Fn(&BurstInput) -> &PackedRaw| -> Result<Tensor> {
            let parts = bursts
                .iter()
                .map(|b| hwc_to_tensor(pick(b).data(), dtype))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::cat(&parts, 0)?)
        };
        let mut frames = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for t in 0..n {
            frames.push(gather(&|b| &b.frames[t])?);
            maps.push(gather(&|b| &b.maps[t])?);
        }
        Ok(BurstTensors { frames, maps })
    }

    pub fn batch(&self) -> usize {
        self.frames[0].dims()[0]
    }
}

/// Guidance features for every frame, stacked frame-major along the batch
/// axis (`[N*B, C, H, W]`).
#[derive(Debug, Clone)]
pub struct GcpFeatures {
    /// One guide per guided GCA block.
    pub guides: Vec<Tensor>,
    /// Output of the last guidance stage.
    pub last: Tensor,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Linear RGB prediction `[B, 3, 2H, 2W]`.
    pub rgb: Tensor,
    /// Denoised packed reference `[B, 4, H, W]` (denoise-first layout only).
    pub denoised_raw: Option<Tensor>,
    /// Demosaicked noisy frames `[B, 3, 2H, 2W]` (demosaic-first layout only).
    pub frame_rgb: Option<Vec<Tensor>>,
}

struct GcpBranch {
    head: Conv2d,
    stages: Vec<Conv2d>,
    source: GuideSource,
    slope: f64,
}

impl GcpBranch {
    fn forward(&self, y: &Tensor, m: &Tensor) -> Result<GcpFeatures> {
        let idx: &[u32] = match self.source {
            GuideSource::Green => &[1, 2],
            GuideSource::RedBlue => &[0, 3],
        };
        let idx = Tensor::new(idx, y.device())?;
        let input = Tensor::cat(&[y.index_select(&idx, 1)?, m.index_select(&idx, 1)?], 1)?;
        let mut f = lrelu(&self.head.forward(&input)?, self.slope)?;
        let mut guides = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            f = lrelu(&s.forward(&f)?, self.slope)?;
            guides.push(f.clone());
        }
        Ok(GcpFeatures { guides, last: f })
    }
}

struct IntraF {
    m0: Conv2d,
    blocks: Vec<GcaBlock>,
}

impl IntraF {
    fn forward(&self, y: &Tensor, m: &Tensor, guides: &[Tensor]) -> Result<Tensor> {
        let guided = self.blocks.iter().filter(|b| b.is_guided()).count();
        if guides.len() != guided {
            return Err(Error::Shape(format!(
                "{guided} guided blocks but {} guides",
                guides.len()
            )));
        }
        let mut f = self.m0.forward(&Tensor::cat(&[y, m], 1)?)?;
        for (i, b) in self.blocks.iter().enumerate() {
            f = b.forward(&f, guides.get(i))?;
        }
        Ok(f)
    }
}

struct Scale {
    inter: Conv2d,
    lstm: Option<(ConvLstmCell, Conv2d)>,
    offset_feat: Conv2d,
    offset: Conv2d,
    dcn: DeformConv2d,
    fuse: Option<Conv2d>,
}

struct InterF {
    feat_down: Vec<Conv2d>,
    gcp_down: Vec<Conv2d>,
    scales: Vec<Scale>,
    multiscale: bool,
    taps: usize,
    slope: f64,
}

fn pyramid(x: &Tensor, downs: &[Conv2d], slope: f64) -> Result<Vec<Tensor>> {
    let mut out = vec![x.clone()];
    for d in downs {
        let next = lrelu(&d.forward(out.last().expect("non-empty"))?, slope)?;
        out.push(next);
    }
    Ok(out)
}

impl InterF {
    /// Aligns every frame to the reference. `feat` and `gcp` are frame-major
    /// `[N*B, C, H, W]`.
    fn forward(&self, feat: &Tensor, gcp: Option<&Tensor>, n: usize, b: usize) -> Result<Tensor> {
        let slope = self.slope;
        let fp = pyramid(feat, &self.feat_down, slope)?;
        let gp = match gcp {
            Some(g) => pyramid(g, &self.gcp_down, slope)?,
            None => fp.clone(),
        };
        let r = n / 2;
        let groups = self.scales[0].dcn.groups();
        let mut prev: Option<(Tensor, Tensor)> = None;
        for s in (0..self.scales.len()).rev() {
            let sc = &self.scales[s];
            let g = &gp[s];
            let g_ref = g.narrow(0, r * b, b)?;
            let g_ref = Tensor::cat(&vec![g_ref; n], 0)?;
            let inter = lrelu(&sc.inter.forward(&Tensor::cat(&[g, &g_ref], 1)?)?, slope)?;
            let inter = match &sc.lstm {
                Some((cell, out)) => {
                    let mut state = LstmState::zeros(&inter.narrow(0, 0, b)?, cell.hidden())?;
                    let mut steps = Vec::with_capacity(n);
                    for t in 0..n {
                        let x = inter.narrow(0, t * b, b)?;
                        state = cell.step(&x, &state)?;
                        steps.push(lrelu(&out.forward(&Tensor::cat(&[&x, &state.h], 1)?)?, slope)?);
                    }
                    Tensor::cat(&steps, 0)?
                }
                None => inter,
            };
            let off_in = match (&prev, self.multiscale) {
                (Some((off, _)), true) => Tensor::cat(&[&inter, &(upsample2x(off)? * 2.0)?], 1)?,
                _ => inter,
            };
            let o = lrelu(&sc.offset_feat.forward(&off_in)?, slope)?;
            let raw = sc.offset.forward(&o)?;
            let gk = groups * self.taps;
            let field = DeformField {
                offsets: raw.narrow(1, 0, 2 * gk)?,
                masks: sigmoid(&raw.narrow(1, 2 * gk, gk)?)?,
            };
            let mut aligned = sc.dcn.forward(&fp[s], &field)?;
            if let (Some(fuse), Some((_, coarse))) = (&sc.fuse, &prev) {
                aligned = lrelu(&fuse.forward(&Tensor::cat(&[&aligned, &upsample2x(coarse)?], 1)?)?, slope)?;
            }
            prev = Some((field.offsets, aligned));
        }
        Ok(prev.expect("at least one scale").1)
    }
}

struct UNet {
    enc: Vec<[Conv2d; 2]>,
    down: Vec<Conv2d>,
    bottleneck: Vec<Conv2d>,
    up: Vec<ConvTranspose2d>,
    dec: Vec<[Conv2d; 2]>,
    out: Conv2d,
    slope: f64,
}

impl UNet {
    fn new(store: &mut ParamStore, name: &str, cin: usize, width: usize, scales: usize, slope: f64) -> Result<Self> {
        let w = |l: usize| width << l;
        let deep = scales - 1;
        let mut enc = Vec::new();
        let mut down = Vec::new();
        let mut c = cin;
        for l in 0..deep {
            let p = join(name, &format!("enc{l}"));
            enc.push([
                Conv2d::new(store, &join(&p, "c0"), c, w(l), 3, 1)?,
                Conv2d::new(store, &join(&p, "c1"), w(l), w(l), 3, 1)?,
            ]);
            down.push(Conv2d::new(store, &join(name, &format!("down{l}")), w(l), w(l + 1), 3, 2)?);
            c = w(l + 1);
        }
        let mut bottleneck = Vec::new();
        for i in 0..4 {
            bottleneck.push(Conv2d::new(store, &join(name, &format!("mid{i}")), c, w(deep), 3, 1)?);
            c = w(deep);
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..deep).rev() {
            up.push(ConvTranspose2d::new(store, &join(name, &format!("up{l}")), w(l + 1), w(l))?);
            let p = join(name, &format!("dec{l}"));
            dec.push([
                Conv2d::new(store, &join(&p, "c0"), 2 * w(l), w(l), 3, 1)?,
                Conv2d::new(store, &join(&p, "c1"), w(l), w(l), 3, 1)?,
            ]);
        }
        let out = Conv2d::new(store, &join(name, "out"), w(0), 3, 3, 1)?;
        Ok(UNet { enc, down, bottleneck, up, dec, out, slope })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let act = |t: Tensor| lrelu(&t, self.slope);
        let mut skips = Vec::new();
        let mut h = x.clone();
        for (e, d) in self.enc.iter().zip(&self.down) {
            h = act(e[1].forward(&act(e[0].forward(&h)?)?)?)?;
            skips.push(h.clone());
            h = act(d.forward(&h)?)?;
        }
        for c in &self.bottleneck {
            h = act(c.forward(&h)?)?;
        }
        for (u, d) in self.up.iter().zip(&self.dec) {
            let skip = skips.pop().expect("one skip per level");
            h = act(u.forward(&h)?)?;
            h = Tensor::cat(&[&h, &skip], 1)?;
            h = act(d[1].forward(&act(d[0].forward(&h)?)?)?)?;
        }
        self.out.forward(&h)
    }
}

struct Merge {
    conv: Conv2d,
    de_dm: Option<(Conv2d, Conv2d)>,
    upsample: AdaptiveUpsample,
    unet: UNet,
}

/// The burst restoration network with its parameters.
pub struct GcpNet {
    cfg: ModelConfig,
    store: ParamStore,
    gcp: Option<GcpBranch>,
    intra: IntraF,
    dm_de: Option<(Conv2d, Conv2d)>,
    inter: Option<InterF>,
    merge: Merge,
}

fn check_finite(t: &Tensor, module: &'static str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { module })
    }
}

fn frames_to_channels(x: &Tensor, n: usize, b: usize) -> Result<Tensor> {
    let parts = (0..n)
        .map(|t| x.narrow(0, t * b, b))
        .collect::<candle_core::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 1)?)
}

impl GcpNet {
    /// Builds the network with freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed, cfg.lrelu_slope);
        let st = &mut store;
        let c = cfg.base_width;
        let slope = cfg.lrelu_slope;

        let gcp = if cfg.has_gcp_branch() {
            Some(GcpBranch {
                head: Conv2d::new(st, "gcp.head", 4, c, 3, 1)?,
                stages: (0..cfg.gg_units)
                    .map(|i| Conv2d::new(st, &format!("gcp.stage{i}"), c, c, 3, 1))
                    .collect::<Result<_>>()?,
                source: cfg.guide_source,
                slope,
            })
        } else {
            None
        };

        let intra = IntraF {
            m0: Conv2d::new(st, "intra.m0", 8, c, 3, 1)?,
            blocks: (0..cfg.gca_blocks)
                .map(|i| {
                    GcaBlock::new(st, &format!("intra.gca{i}"), c, i < cfg.gg_units, cfg.attention_reduction, slope)
                })
                .collect::<Result<_>>()?,
        };

        let dm_de = if cfg.stage_layout == StageLayout::DmDe {
            Some((
                Conv2d::new(st, "dmde.head", c, 12, 3, 1)?,
                Conv2d::new(st, "dmde.embed", 12, c, 3, 1)?,
            ))
        } else {
            None
        };

        let inter = if cfg.use_interf {
            let levels = cfg.pyramid_levels;
            let g = cfg.deform_groups;
            let k = cfg.deform_kernel * cfg.deform_kernel;
            let mut scales = Vec::with_capacity(levels);
            for s in 0..levels {
                let p = format!("inter.s{s}");
                let lstm = if cfg.use_lstm {
                    Some((
                        ConvLstmCell::new(st, &join(&p, "lstm"), c, cfg.lstm_hidden)?,
                        Conv2d::new(st, &join(&p, "lstm_out"), c + cfg.lstm_hidden, c, 3, 1)?,
                    ))
                } else {
                    None
                };
                let coarser = s + 1 < levels;
                let off_in = if coarser && cfg.use_multiscale_offset { c + 2 * g * k } else { c };
                scales.push(Scale {
                    inter: Conv2d::new(st, &join(&p, "inter"), 2 * c, c, 3, 1)?,
                    lstm,
                    offset_feat: Conv2d::new(st, &join(&p, "offset_feat"), off_in, c, 3, 1)?,
                    // zero init: identity sampling grid with masks of 0.5
                    offset: Conv2d::with_init(
                        st,
                        &join(&p, "offset"),
                        c,
                        3 * g * k,
                        3,
                        1,
                        Init::Constant(0.0),
                        Init::Constant(0.0),
                    )?,
                    dcn: DeformConv2d::new(st, &join(&p, "dcn"), c, c, cfg.deform_kernel, g)?,
                    fuse: if coarser {
                        Some(Conv2d::new(st, &join(&p, "fuse"), 2 * c, c, 3, 1)?)
                    } else {
                        None
                    },
                });
            }
            let downs = |st: &mut ParamStore, prefix: &str| -> Result<Vec<Conv2d>> {
                (1..levels)
                    .map(|s| Conv2d::new(st, &format!("{prefix}{s}"), c, c, 3, 2))
                    .collect()
            };
            let feat_down = downs(st, "inter.down")?;
            let gcp_down = if cfg.use_gcp_offset { downs(st, "gcp.down")? } else { Vec::new() };
            Some(InterF {
                feat_down,
                gcp_down,
                scales,
                multiscale: cfg.use_multiscale_offset,
                taps: k,
                slope,
            })
        } else {
            None
        };

        let merge = Merge {
            conv: Conv2d::new(st, "merge.conv", cfg.frames * c, c, 3, 1)?,
            de_dm: if cfg.stage_layout == StageLayout::DeDm {
                Some((
                    Conv2d::new(st, "dedm.head", c, 4, 3, 1)?,
                    Conv2d::new(st, "dedm.embed", 4, c, 3, 1)?,
                ))
            } else {
                None
            },
            upsample: AdaptiveUpsample::new(st, "merge.up", c, cfg.use_gcp_upsample.then_some(c))?,
            unet: UNet::new(st, "unet", c, cfg.unet_width, cfg.unet_scales, slope)?,
        };

        Ok(GcpNet { cfg: cfg.clone(), store, gcp, intra, dm_de, inter, merge })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn prepare(&self, burst: &BurstTensors) -> Result<(Tensor, Tensor, usize, usize, usize)> {
        let n = self.cfg.frames;
        if burst.frames.len() != n || burst.maps.len() != n {
            return Err(Error::Input(format!(
                "model expects {n} frames, burst has {} frames and {} maps",
                burst.frames.len(),
                burst.maps.len()
            )));
        }
        let (b, c, h, w) = burst.frames[0].dims4()?;
        if c != 4 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frames must be [B, 4, H, W], got {:?}", burst.frames[0].dims())));
        }
        if burst.frames.iter().chain(&burst.maps).any(|t| t.dims() != [b, 4, h, w]) {
            return Err(Error::Shape("all frames and maps must share one shape".into()));
        }
        let m = self.cfg.size_multiple();
        let pad = |t: &Tensor| -> Result<Tensor> {
            let t = t.to_dtype(self.dtype())?;
            let t = if h % m != 0 { t.pad_with_same(2, 0, m - h % m)? } else { t };
            Ok(if w % m != 0 { t.pad_with_same(3, 0, m - w % m)? } else { t })
        };
        let y = Tensor::cat(&burst.frames.iter().map(pad).collect::<Result<Vec<_>>>()?, 0)?;
        let mp = Tensor::cat(&burst.maps.iter().map(pad).collect::<Result<Vec<_>>>()?, 0)?;
        Ok((y, mp, b, h, w))
    }

    fn gcp_features(&self, y: &Tensor, m: &Tensor) -> Result<Option<GcpFeatures>> {
        match &self.gcp {
            Some(g) => {
                let f = g.forward(y, m)?;
                check_finite(&f.last, "gcp_branch")?;
                Ok(Some(f))
            }
            None => Ok(None),
        }
    }

    /// Guidance features of every frame (frame-major batch), on the padded
    /// grid. `None` when the configuration has no guidance branch.
    pub fn gcp_branch(&self, burst: &BurstTensors) -> Result<Option<GcpFeatures>> {
        let (y, m, ..) = self.prepare(burst)?;
        self.gcp_features(&y, &m)
    }

    /// Per-frame features after intra-frame processing and alignment, each
    /// `[B, C, H', W']` on the padded grid, plus the demosaicked frames of
    /// the demosaic-first layout.
    fn aligned(
        &self,
        y: &Tensor,
        m: &Tensor,
        gcp: Option<&GcpFeatures>,
        b: usize,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let n = self.cfg.frames;
        let no_guides = Vec::new();
        let guides = gcp.map(|g| &g.guides).unwrap_or(&no_guides);
        let mut f = self.intra.forward(y, m, guides)?;
        check_finite(&f, "intraf")?;
        let mut frame_rgb = None;
        if let Some((head, embed)) = &self.dm_de {
            let rgb = depth_to_space(&head.forward(&f)?)?;
            f = lrelu(&embed.forward(&space_to_depth(&rgb)?)?, self.cfg.lrelu_slope)?;
            frame_rgb = Some(rgb);
        }
        if let Some(inter) = &self.inter {
            let g = if self.cfg.use_gcp_offset { gcp.map(|g| &g.last) } else { None };
            f = inter.forward(&f, g, n, b)?;
            check_finite(&f, "interf")?;
        }
        Ok((f, frame_rgb))
    }

    /// Aligned features of each frame, cropped to the input size.
    pub fn align(&self, burst: &BurstTensors) -> Result<Vec<Tensor>> {
        let (y, m, b, h, w) = self.prepare(burst)?;
        let gcp = self.gcp_features(&y, &m)?;
        let (f, _) = self.aligned(&y, &m, gcp.as_ref(), b)?;
        (0..self.cfg.frames)
            .map(|t| Ok(f.narrow(0, t * b, b)?.narrow(2, 0, h)?.narrow(3, 0, w)?))
            .collect()
    }

    pub fn forward(&self, burst: &BurstTensors) -> Result<ForwardOutput> {
        let (y, m, b, h, w) = self.prepare(burst)?;
        let n = self.cfg.frames;
        let r = self.cfg.reference_index();
        let gcp = self.gcp_features(&y, &m)?;
        let (f, frame_rgb) = self.aligned(&y, &m, gcp.as_ref(), b)?;

        let mut fm = self.merge.conv.forward(&frames_to_channels(&f, n, b)?)?;
        let mut denoised_raw = None;
        if let Some((head, embed)) = &self.merge.de_dm {
            let raw = head.forward(&fm)?;
            fm = lrelu(&embed.forward(&raw)?, self.cfg.lrelu_slope)?;
            denoised_raw = Some(raw.narrow(2, 0, h)?.narrow(3, 0, w)?);
        }
        check_finite(&fm, "merge")?;
        let guide = match (&gcp, self.cfg.use_gcp_upsample) {
            (Some(g), true) => Some(g.last.narrow(0, r * b, b)?),
            _ => None,
        };
        let up = self.merge.upsample.forward(&fm, guide.as_ref())?;
        let rgb = self.merge.unet.forward(&up)?;
        check_finite(&rgb, "unet")?;
        let crop = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(2, 0, 2 * h)?.narrow(3, 0, 2 * w)?) };
        let frame_rgb = match frame_rgb {
            Some(all) => Some((0..n).map(|t| crop(&all.narrow(0, t * b, b)?)).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        Ok(ForwardOutput { rgb: crop(&rgb)?, denoised_raw, frame_rgb })
    }

    /// Runs the network on a single burst and returns `[3, 2H, 2W]`.
    pub fn restore(&self, burst: &BurstInput) -> Result<Tensor> {
        let out = self.forward(&burst.to_tensors(self.dtype())?)?;
        Ok(out.rgb.i(0)?)
    }
}

/// Parameter count and convolution FLOPs (2 x multiply-accumulates) for a
/// burst of `cfg.frames` raw frames of `raw_size x raw_size`, measured by
/// tracing a forward pass.
pub fn count_params_flops_at(cfg: &ModelConfig, raw_size: usize) -> Result<(usize, u64)> {
    let net = GcpNet::new(cfg, DType::F32, 0)?;
    let z = Tensor::zeros((1, 4, raw_size, raw_size), DType::F32, &Device::Cpu)?;
    let burst = BurstTensors {
        frames: vec![z.clone(); cfg.frames],
        maps: vec![z; cfg.frames],
    };
    let (out, f) = flops::trace(|| net.forward(&burst));
    out?;
    Ok((net.param_count(), f))
}

/// Parameter count and FLOPs for frames whose RGB reconstruction is
/// 128 x 128 (64 x 64 packed raw).
pub fn count_params_flops(cfg: &ModelConfig) -> Result<(usize, u64)> {
    count_params_flops_at(cfg, 64)
}
