//! Optimization loop: synthesized batches, Adam updates on a cosine
//! schedule, CSV metrics and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, synthesize_sample, Clip, TrainSample};
use crate::error::{Error, Result};
use crate::loss::{charbonnier, total_loss, LossConfig, LossTerms};
use crate::model::{BurstInput, BurstTensors, Checkpoint, GcpNet, HostTensor, ModelConfig, StageLayout};
use crate::nn::ParamStore;
use crate::noise::NoiseRanges;
use crate::rawproc::hwc_to_tensor;
use crate::scene::natural_clip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Packed raw patch side; the RGB target is twice this.
    pub patch_size: usize,
    pub lr0: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub noise_ranges: NoiseRanges,
    pub frames: usize,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Leading steps that train only the demosaicking stage of the
    /// demosaic-first layout. Ignored by other layouts.
    pub pretrain_steps: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            patch_size: 64,
            lr0: 4e-4,
            betas: [0.9, 0.99],
            adam_eps: 1e-8,
            total_steps: 20_000,
            seed: 0,
            noise_ranges: NoiseRanges::default(),
            frames: 5,
            checkpoint_every: 1000,
            log_every: 50,
            pretrain_steps: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(2) {
            return bad(format!("patch_size must be even and positive, got {}", self.patch_size));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.frames == 0 || self.frames.is_multiple_of(2) {
            return bad(format!("frames must be odd, got {}", self.frames));
        }
        if self.pretrain_steps > self.total_steps {
            return bad("pretrain_steps exceeds total_steps".into());
        }
        self.noise_ranges.validate()?;
        self.loss.validate()
    }

    /// Seed of sample `index` in step `step`.
    pub fn sample_seed(&self, step: usize, index: usize) -> u64 {
        derive_seed(self.seed, step as u64, index as u64)
    }
}

/// `0.5 * lr0 * (1 + cos(pi * step / total))`, with `step` clamped to
/// `[0, total]`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> f64 {
    let t = step.min(total) as f64 / total.max(1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam with bias correction. Moments and step counts are kept per
/// parameter, so parameters that join training late are corrected from
/// their own first update.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u32,
}

impl Adam {
    pub fn new(betas: [f64; 2], eps: f64) -> Self {
        Adam {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            state: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient. At `lr = 0` the
    /// moments advance but parameters are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let (b1, b2) = (self.beta1, self.beta2);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let next = match self.state.get(name) {
                Some(s) => Moments {
                    m: ((&s.m * b1)? + (&g * (1.0 - b1))?)?,
                    v: ((&s.v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                    t: s.t + 1,
                },
                None => Moments {
                    m: (&g * (1.0 - b1))?,
                    v: (g.sqr()? * (1.0 - b2))?,
                    t: 1,
                },
            };
            if lr > 0.0 {
                let mh = (&next.m / (1.0 - b1.powi(next.t as i32)))?;
                let vh = (&next.v / (1.0 - b2.powi(next.t as i32)))?;
                let update = ((mh / (vh.sqrt()? + self.eps)?)? * lr)?;
                var.set(&(var.as_tensor().detach() - update)?)?;
            }
            self.state.insert(name.clone(), next);
        }
        Ok(())
    }

    /// Moments as `adam.m/<name>`, `adam.v/<name>` and `adam.t/<name>`.
    pub fn export(&self, into: &mut BTreeMap<String, HostTensor>) -> Result<()> {
        for (name, s) in &self.state {
            into.insert(format!("adam.m/{name}"), HostTensor::from_tensor(&s.m)?);
            into.insert(format!("adam.v/{name}"), HostTensor::from_tensor(&s.v)?);
            into.insert(
                format!("adam.t/{name}"),
                HostTensor { shape: vec![1], data: vec![s.t as f32] },
            );
        }
        Ok(())
    }

    pub fn import(&mut self, from: &BTreeMap<String, HostTensor>, dtype: DType) -> Result<()> {
        self.state.clear();
        for (key, t) in from {
            let Some(name) = key.strip_prefix("adam.t/") else { continue };
            let get = |kind: &str| -> Result<Tensor> {
                from.get(&format!("adam.{kind}/{name}"))
                    .ok_or_else(|| Error::Config(format!("optimizer state for {name} lacks {kind}")))?
                    .to_tensor(dtype)
            };
            self.state.insert(
                name.to_string(),
                Moments { m: get("m")?, v: get("v")?, t: t.data[0] as u32 },
            );
        }
        Ok(())
    }
}

/// Where training bursts come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// A freshly rendered procedural clip per sample, frames
    /// `frame_size x frame_size` RGB.
    Procedural { frame_size: usize },
    /// Random windows of PNG clips.
    Clips(Vec<Clip>),
    /// Pre-synthesized samples cycled in order.
    Fixed(Vec<TrainSample>),
}

impl DataSource {
    /// Sample `index` of step `step`; a pure function of the seeds.
    pub fn sample(&self, cfg: &TrainConfig, isp: &crate::rawproc::IspParams, step: usize, index: usize) -> Result<TrainSample> {
        let seed = cfg.sample_seed(step, index);
        match self {
            DataSource::Procedural { frame_size } => {
                let clip = natural_clip(derive_seed(seed, 2, 0), cfg.frames, *frame_size, *frame_size);
                synthesize_sample(&clip, isp, &cfg.noise_ranges, cfg.patch_size, seed)
            }
            DataSource::Clips(clips) => {
                if clips.is_empty() {
                    return Err(Error::Input("no training clips".into()));
                }
                let pick = derive_seed(seed, 2, 1);
                let clip = &clips[(pick % clips.len() as u64) as usize];
                if clip.len() < cfg.frames {
                    return Err(Error::Input(format!("clip {} has fewer than {} frames", clip.name, cfg.frames)));
                }
                let starts = (clip.len() - cfg.frames + 1) as u64;
                let start = (derive_seed(seed, 2, 2) % starts) as usize;
                let frames = clip.load(start, cfg.frames)?;
                synthesize_sample(&frames, isp, &cfg.noise_ranges, cfg.patch_size, seed)
            }
            DataSource::Fixed(samples) => {
                if samples.is_empty() {
                    return Err(Error::Input("fixed data source is empty".into()));
                }
                let k = ((step.saturating_sub(1)) * cfg.batch_size + index) % samples.len();
                Ok(samples[k].clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss_linear: f64,
    pub loss_srgb: f64,
    pub loss_total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,loss_linear,loss_srgb,loss_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.loss_linear, self.loss_srgb, self.loss_total
        )
    }
}

/// Stacks samples into network inputs and `[B, 3, 2H, 2W]` targets.
pub fn stack_batch(samples: &[TrainSample], dtype: DType) -> Result<(BurstTensors, Tensor, Tensor)> {
    let bursts: Vec<BurstInput> = samples.iter().map(|s| s.burst.clone()).collect();
    let burst = BurstTensors::stack(&bursts, dtype)?;
    let gt = samples
        .iter()
        .map(|s| hwc_to_tensor(s.gt.data(), dtype))
        .collect::<Result<Vec<_>>>()?;
    let raw = samples
        .iter()
        .map(|s| hwc_to_tensor(s.clean_ref.data(), dtype))
        .collect::<Result<Vec<_>>>()?;
    Ok((burst, Tensor::cat(&gt, 0)?, Tensor::cat(&raw, 0)?))
}

/// Loss of one batch. The denoise-first layout adds a Charbonnier term on
/// the intermediate packed raw; the demosaic-first layout optimizes only
/// its reference-frame demosaicking output while `pretrain` is set.
pub fn batch_loss(net: &GcpNet, samples: &[TrainSample], loss: &LossConfig, pretrain: bool) -> Result<LossTerms> {
    let (burst, gt, clean_raw) = stack_batch(samples, net.dtype())?;
    let out = net.forward(&burst)?;
    let r = net.config().reference_index();
    match (net.config().stage_layout, &out.frame_rgb, &out.denoised_raw) {
        (StageLayout::DmDe, Some(frames), _) if pretrain => total_loss(&frames[r], &gt, loss),
        (StageLayout::DeDm, _, Some(raw)) => {
            let mut t = total_loss(&out.rgb, &gt, loss)?;
            let aux = charbonnier(raw, &clean_raw, loss.epsilon, loss.mode)?;
            t.total = (t.total + aux)?;
            Ok(t)
        }
        _ => total_loss(&out.rgb, &gt, loss),
    }
}

/// Network plus optimizer state, advanced one step at a time.
pub struct Trainer {
    net: GcpNet,
    adam: Adam,
    cfg: TrainConfig,
    isp: crate::rawproc::IspParams,
    step: usize,
}

impl Trainer {
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Self::check(model, cfg)?;
        let net = GcpNet::new(model, DType::F32, derive_seed(cfg.seed, u64::MAX, 0))?;
        Ok(Trainer {
            net,
            adam: Adam::new(cfg.betas, cfg.adam_eps),
            cfg: cfg.clone(),
            isp: cfg.loss.isp.clone(),
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        Self::check(&ck.config, cfg)?;
        let net = ck.to_model(DType::F32)?;
        let mut adam = Adam::new(cfg.betas, cfg.adam_eps);
        adam.import(&ck.tensors, DType::F32)?;
        if let Some(s) = ck.meta.get("seed").and_then(|s| s.as_u64()) {
            if s != cfg.seed {
                log::warn!("resuming a run seeded {s} with seed {}", cfg.seed);
            }
        }
        Ok(Trainer {
            net,
            adam,
            cfg: cfg.clone(),
            isp: cfg.loss.isp.clone(),
            step: ck.step as usize,
        })
    }

    fn check(model: &ModelConfig, cfg: &TrainConfig) -> Result<()> {
        model.validate()?;
        cfg.validate()?;
        if model.frames != cfg.frames {
            return Err(Error::Config(format!(
                "model expects {} frames, training config has {}",
                model.frames, cfg.frames
            )));
        }
        Ok(())
    }

    pub fn net(&self) -> &GcpNet {
        &self.net
    }

    pub fn into_net(self) -> GcpNet {
        self.net
    }

    /// Number of completed steps.
    pub fn completed(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    pub fn step(&mut self, data: &DataSource) -> Result<StepLog> {
        let step = self.step + 1;
        let samples = (0..self.cfg.batch_size)
            .map(|i| data.sample(&self.cfg, &self.isp, step, i))
            .collect::<Result<Vec<_>>>()?;
        let pretrain = step <= self.cfg.pretrain_steps;
        let diverged = Error::Divergence { step, seed: samples[0].seed };
        let terms = match batch_loss(&self.net, &samples, &self.cfg.loss, pretrain) {
            Err(Error::NonFinite { .. }) => return Err(diverged),
            r => r?,
        };
        let (loss_linear, loss_srgb, loss_total) = terms.values()?;
        if !loss_total.is_finite() {
            return Err(diverged);
        }
        let lr = cosine_lr(step - 1, self.cfg.total_steps, self.cfg.lr0);
        let grads = terms.total.backward()?;
        self.adam.step(self.net.params(), &grads, lr)?;
        self.step = step;
        Ok(StepLog { step, lr, loss_linear, loss_srgb, loss_total })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "seed": self.cfg.seed, "train": self.cfg });
        let mut ck = Checkpoint::from_model(&self.net, self.step as u64, meta)?;
        self.adam.export(&mut ck.tensors)?;
        Ok(ck)
    }
}

pub struct TrainOutcome {
    pub net: GcpNet,
    pub history: Vec<StepLog>,
}

/// Runs (or resumes) training to `cfg.total_steps`. With an output
/// directory, metrics go to `metrics.csv`, periodic checkpoints to
/// `checkpoints/step_NNNNNNN.ckpt` and the final model to `model.ckpt`.
pub fn train_loop(
    model: &ModelConfig,
    cfg: &TrainConfig,
    data: &DataSource,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(ck, cfg)?,
        None => Trainer::new(model, cfg)?,
    };
    let mut metrics = match out {
        Some(dir) => Some(open_metrics(dir, trainer.completed())?),
        None => None,
    };
    let mut history = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.step(data)?;
        if let Some(f) = metrics.as_mut() {
            writeln!(f, "{}", rec.csv_row())?;
        }
        if cfg.log_every > 0 && rec.step % cfg.log_every == 0 {
            log::info!(
                "step {} lr {:.3e} loss {:.5} (linear {:.5}, srgb {:.5})",
                rec.step, rec.lr, rec.loss_total, rec.loss_linear, rec.loss_srgb
            );
        }
        history.push(rec);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && rec.step % cfg.checkpoint_every == 0 {
                if let Some(f) = metrics.as_mut() {
                    f.flush()?;
                }
                let ckdir = dir.join("checkpoints");
                std::fs::create_dir_all(&ckdir)?;
                trainer.checkpoint()?.save(&checkpoint_path(&ckdir, rec.step))?;
            }
        }
    }
    if let Some(dir) = out {
        if let Some(f) = metrics.as_mut() {
            f.flush()?;
        }
        trainer.checkpoint()?.save(&dir.join("model.ckpt"))?;
    }
    Ok(TrainOutcome { net: trainer.into_net(), history })
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step_{step:07}.ckpt"))
}

/// Opens `metrics.csv` for appending, dropping rows past `completed` left
/// by an interrupted run.
fn open_metrics(dir: &Path, completed: usize) -> Result<File> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("metrics.csv");
    let mut kept = vec![StepLog::CSV_HEADER.to_string()];
    if completed > 0 && path.exists() {
        for line in BufReader::new(File::open(&path)?).lines().skip(1) {
            let line = line?;
            let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if step.is_some_and(|s| s <= completed) {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(&path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}
