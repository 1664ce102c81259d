use std::path::{Path, PathBuf};

use candle_core::DType;
use gcpnet::data::{scan_clips, Clip, TrainSample};
use gcpnet::eval::{
    evaluate, run_ablation, write_results, AblationSpec, AblationTable, Bilinear, EvalClip, EvalReport,
    EvalSetting, ModelRestorer, NoiseLevel, Oracle, Restorer,
};
use gcpnet::model::{BurstInput, Checkpoint};
use gcpnet::noise::{NoiseParams, NoiseRanges};
use gcpnet::rawproc::{process_array, tensor_to_hwc, PackedRaw};
use gcpnet::scene::natural_image;
use gcpnet::snr::snr_report;
use gcpnet::tensorio::{load_array, read_png, save_array, write_png16};
use gcpnet::train::{train_loop, DataSource};
use gcpnet::{Error, Result};
use ndarray::{Array3, Array4, Axis, Ix4};
use serde_json::json;

use crate::config::RunConfig;

pub const FRAMES_FILE: &str = "frames.gcpb";
pub const MAPS_FILE: &str = "maps.gcpb";
pub const GT_FILE: &str = "gt.gcpb";
pub const META_FILE: &str = "meta.json";

fn fresh_out_dir(out: &Path) -> Result<()> {
    if out.exists() && out.read_dir()?.next().is_some() {
        return Err(Error::Input(format!("output directory {} is not empty", out.display())));
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn train_clips(cfg: &RunConfig) -> Result<Option<Vec<Clip>>> {
    match &cfg.data_root {
        Some(root) => {
            let clips = scan_clips(root, cfg.model.frames)?;
            if clips.is_empty() {
                return Err(Error::Input(format!(
                    "no clip under {} has {} PNG frames",
                    root.display(),
                    cfg.model.frames
                )));
            }
            Ok(Some(clips))
        }
        None => Ok(None),
    }
}

fn data_source(cfg: &RunConfig) -> Result<DataSource> {
    Ok(match train_clips(cfg)? {
        Some(clips) => DataSource::Clips(clips),
        None => DataSource::Procedural { frame_size: cfg.data.train_frame_size },
    })
}

/// Evaluation clips: every clip under the data root, or rendered ones.
fn eval_clips(cfg: &RunConfig, frames: usize) -> Result<(String, Vec<EvalClip>)> {
    match &cfg.data_root {
        Some(root) => {
            let clips = scan_clips(root, frames)?;
            if clips.is_empty() {
                return Err(Error::Input(format!("no clip under {} has {frames} PNG frames", root.display())));
            }
            let name = root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "clips".into());
            Ok((name, clips.iter().map(EvalClip::load).collect::<Result<_>>()?))
        }
        None => {
            let d = &cfg.data;
            let n = d.eval_clip_frames.max(frames);
            let clips = (0..d.eval_clips)
                .map(|i| {
                    let seed = gcpnet::data::derive_seed(cfg.train.seed, 4, i as u64);
                    EvalClip::procedural(&format!("synthetic_{i:02}"), seed, n, d.eval_frame_size, d.eval_frame_size)
                })
                .collect();
            Ok(("synthetic".into(), clips))
        }
    }
}

fn levels(cfg: &RunConfig, only: Option<NoiseLevel>) -> Vec<NoiseLevel> {
    match only {
        Some(l) => vec![l],
        None => cfg.eval.noise_levels.clone(),
    }
}

/// Writes bursts, noise maps, targets and sidecars under `out/bursts`.
/// Everything is built in a staging directory and moved into place at the
/// end, so a failure leaves nothing behind.
pub fn synth(cfg: &RunConfig, out: &Path, level: Option<NoiseLevel>, zero_noise: bool) -> Result<()> {
    if out.exists() {
        return Err(Error::Input(format!("output {} already exists", out.display())));
    }
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let stage = tempfile::Builder::new().prefix(".synth-").tempdir_in(parent)?;
    synth_into(cfg, stage.path(), level, zero_noise)?;
    std::fs::rename(stage.keep(), out)?;
    Ok(())
}

fn synth_into(cfg: &RunConfig, dir: &Path, level: Option<NoiseLevel>, zero_noise: bool) -> Result<()> {
    let mut train = cfg.train.clone();
    train.patch_size = cfg.synth.patch_size;
    if zero_noise {
        train.noise_ranges = NoiseRanges::fixed(NoiseParams::ZERO);
    } else if let Some(l) = level {
        train.noise_ranges = NoiseRanges::fixed(l.params());
    }
    let data = data_source(cfg)?;
    write_config(cfg, dir)?;
    let bursts = dir.join("bursts");
    for i in 0..cfg.synth.bursts {
        // burst i is exactly the first sample of training step i + 1
        let s = data.sample(&train, &cfg.isp, i + 1, 0)?;
        let d = bursts.join(format!("{i:06}"));
        std::fs::create_dir_all(&d)?;
        save_array(&d.join(FRAMES_FILE), &stack(s.burst.frames()).into_dyn())?;
        save_array(&d.join(MAPS_FILE), &stack(s.burst.maps()).into_dyn())?;
        save_array(&d.join(GT_FILE), &s.gt.data().clone().into_dyn())?;
        write_png16(&d.join("gt.png"), &process_array(s.gt.data(), &cfg.isp))?;
        std::fs::write(d.join(META_FILE), serde_json::to_string_pretty(&sidecar(cfg, &s))?)?;
    }
    Ok(())
}

fn stack(frames: &[PackedRaw]) -> Array4<f32> {
    let views: Vec<_> = frames.iter().map(|f| f.data().view()).collect();
    ndarray::stack(Axis(0), &views).expect("burst frames share one shape")
}

fn sidecar(cfg: &RunConfig, s: &TrainSample) -> serde_json::Value {
    json!({
        "seed": s.seed,
        "run_seed": cfg.train.seed,
        "frames": s.burst.len(),
        "reference_index": s.burst.reference_index(),
        "noise": { "sigma_s": s.noise.sigma_s, "sigma_r": s.noise.sigma_r },
        "isp": cfg.isp,
    })
}

/// Reads a burst directory written by `synth`.
pub fn load_burst(dir: &Path) -> Result<BurstInput> {
    let as4 = |name: &str| -> Result<Array4<f32>> {
        let p = dir.join(name);
        load_array(&p)?.into_dimensionality::<Ix4>().map_err(|_| Error::Format {
            path: p.clone(),
            reason: "expected a [N, H, W, 4] tensor".into(),
        })
    };
    let split = |a: Array4<f32>| -> Result<Vec<PackedRaw>> {
        a.axis_iter(Axis(0)).map(|f| PackedRaw::new(f.to_owned())).collect()
    };
    BurstInput::new(split(as4(FRAMES_FILE)?)?, split(as4(MAPS_FILE)?)?)
}

pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ck = resume.map(Checkpoint::load).transpose()?;
    match &ck {
        Some(ck) => {
            if ck.config != cfg.model {
                return Err(Error::Config("checkpoint model config differs from [model]".into()));
            }
            std::fs::create_dir_all(out)?;
        }
        None => fresh_out_dir(out)?,
    }
    write_config(cfg, out)?;
    let data = data_source(cfg)?;
    let run = train_loop(&cfg.model, &cfg.train, &data, Some(out), ck.as_ref())?;
    if let Some(last) = run.history.last() {
        log::info!("finished at step {} with loss {:.5}", last.step, last.loss_total);
    }
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    level: Option<NoiseLevel>,
) -> Result<Vec<EvalReport>> {
    let net = match (checkpoint, oracle) {
        (Some(p), false) => Some(Checkpoint::load(p)?.to_model(DType::F32)?),
        (None, true) => None,
        (Some(_), true) => return Err(Error::Config("--oracle and --checkpoint are exclusive".into())),
        (None, false) => return Err(Error::Config("eval needs --checkpoint or --oracle".into())),
    };
    let frames = net.as_ref().map_or(cfg.model.frames, |n| n.config().frames);
    let (_, clips) = eval_clips(cfg, frames)?;
    let mut restorers: Vec<Box<dyn Restorer + '_>> = Vec::new();
    match &net {
        Some(net) => {
            let mut r = ModelRestorer::new(net);
            r.overlap = cfg.eval.overlap;
            if cfg.eval.tile > 0 {
                r = r.tiled(cfg.eval.tile);
            }
            restorers.push(Box::new(r));
        }
        None => restorers.push(Box::new(Oracle { frames })),
    }
    if cfg.eval.baseline {
        restorers.push(Box::new(Bilinear { frames }));
    }
    fresh_out_dir(out)?;
    write_config(cfg, out)?;
    let mut reports = Vec::new();
    for l in levels(cfg, level) {
        for r in &restorers {
            let rep = evaluate(r.as_ref(), &clips, &EvalSetting::new(l), &cfg.isp, cfg.train.seed)?;
            log::info!("{} {}: {:.2} dB / {:.4}", l.name(), rep.method, rep.psnr, rep.ssim);
            reports.push(rep);
        }
    }
    write_results(&reports, out, "results")?;
    Ok(reports)
}

pub fn ablate(cfg: &RunConfig, out: &Path, table: AblationTable) -> Result<()> {
    let spec = AblationSpec::new(table, &cfg.model);
    let frames = spec.variants.iter().map(|v| v.config.frames).max().unwrap_or(cfg.model.frames);
    let (dataset, clips) = eval_clips(cfg, frames)?;
    let data = data_source(cfg)?;
    fresh_out_dir(out)?;
    write_config(cfg, out)?;
    let report = run_ablation(&spec, &cfg.train, &data, &clips, &dataset, cfg.train.seed)?;
    report.write(out)
}

/// Restores one burst directory and writes the sRGB result as a 16-bit PNG
/// next to the linear output tensor.
pub fn infer(cfg: &RunConfig, input: &Path, checkpoint: &Path, out: &Path) -> Result<PathBuf> {
    let net = Checkpoint::load(checkpoint)?.to_model(DType::F32)?;
    let burst = load_burst(input)?;
    if burst.len() != net.config().frames {
        return Err(Error::Input(format!(
            "burst has {} frames, the checkpoint expects {}",
            burst.len(),
            net.config().frames
        )));
    }
    let linear: Array3<f32> = if cfg.eval.tile > 0 {
        gcpnet::eval::restore_tiled(&net, &burst, cfg.eval.tile, cfg.eval.overlap)?
    } else {
        tensor_to_hwc(&net.restore(&burst)?)?
    };
    std::fs::create_dir_all(out)?;
    save_array(&out.join("restored.gcpb"), &linear.clone().into_dyn())?;
    let png = out.join("restored.png");
    write_png16(&png, &process_array(&linear, &cfg.isp))?;
    Ok(png)
}

/// Channel SNR study on the first frame of every clip, or on rendered
/// images when no data root is set.
pub fn snr(cfg: &RunConfig, out: &Path, level: Option<NoiseLevel>) -> Result<f64> {
    let images: Vec<(String, Array3<f32>)> = match &cfg.data_root {
        Some(root) => scan_clips(root, 1)?
            .iter()
            .map(|c| Ok((c.name.clone(), read_png(&c.frames[0])?)))
            .collect::<Result<_>>()?,
        None => (0..cfg.data.snr_images)
            .map(|i| {
                let seed = gcpnet::data::derive_seed(cfg.train.seed, 5, i as u64);
                let side = cfg.data.eval_frame_size;
                (format!("synthetic_{i:02}"), natural_image(seed, side, side))
            })
            .collect(),
    };
    let level = level.unwrap_or(NoiseLevel::High);
    let report = snr_report(&images, &cfg.isp, level.params(), cfg.train.seed)?;
    fresh_out_dir(out)?;
    write_config(cfg, out)?;
    report.write_csv(&out.join("snr.csv"))?;
    report.write_plot_series(&out.join("snr_plot.csv"))?;
    let frac = report.green_max_fraction();
    let summary = json!({
        "images": report.records.len(),
        "noise_level": level.name(),
        "green_max_fraction": frac,
    });
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(frac)
}
