//! Subcommand implementations. Each takes a resolved [`RunConfig`] and
//! writes its artifacts below `out_dir`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use acv_core::baseline::block_match;
use acv_core::checkpoint::{Checkpoint, CheckpointMeta};
use acv_core::evalio::{colormap, dataset, image, pfm, NamedSample};
use acv_core::selftest::{self, SelfTestOptions};
use acv_core::{gradcheck, run_training, EvalReport, ModelRegistry, StereoModel};
use acv_ndops::{Real, Tensor};
use log::info;
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.acv";
pub const LOSS_LOG_FILE: &str = "loss.log";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Writes `NAME.pfm` and a colour-mapped `NAME.png` over `[0, max]`.
fn write_disparity(dir: &Path, name: &str, map: &Tensor<f64>, max: f64) -> Result<()> {
    pfm::write(&dir.join(format!("{name}.pfm")), &map.cast())?;
    let (h, w) = (map.shape()[0], map.shape()[1]);
    image::write_png_rgb(&dir.join(format!("{name}.png")), w, h, &colormap::render(map, max))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub name: String,
    pub all: EvalReport,
    /// Non-occluded pixels, when the data provides a mask.
    pub noc: Option<EvalReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub method: String,
    pub samples: Vec<SampleReport>,
    pub overall: EvalReport,
    pub overall_noc: Option<EvalReport>,
}

impl Report {
    fn new(method: String, samples: Vec<SampleReport>) -> Result<Self> {
        let all: Vec<_> = samples.iter().map(|s| s.all).collect();
        let noc: Vec<_> = samples.iter().filter_map(|s| s.noc).collect();
        let overall = EvalReport::merge(&all).ok_or_else(|| CliError::Usage("no valid ground-truth pixel".into()))?;
        let overall_noc = (noc.len() == samples.len()).then(|| EvalReport::merge(&noc)).flatten();
        Ok(Self { method, samples, overall, overall_noc })
    }

    pub fn text(&self) -> String {
        let mut s = format!("{} on {} samples\nall pixels\n{}", self.method, self.samples.len(), self.overall.table());
        if let Some(noc) = &self.overall_noc {
            s += &format!("non-occluded pixels\n{}", noc.table());
        }
        s
    }

    fn write(&self, dir: &Path) -> Result<()> {
        write_text(&dir.join(REPORT_FILE), &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

fn score(name: &str, sample: &acv_core::StereoSample, pred: &Tensor<f64>) -> Result<SampleReport> {
    let all = EvalReport::compute(pred, &sample.gt, &sample.mask)?;
    let noc = match &sample.noc {
        Some(m) if m.iter().any(|&v| v) => Some(EvalReport::compute(pred, &sample.gt, m)?),
        _ => None,
    };
    Ok(SampleReport { name: name.to_string(), all, noc })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains from the seeded initialisation; writes the checkpoint, the loss
/// log and the resolved configuration.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<T: Real>(cfg: &RunConfig) -> Result<TrainSummary> {
    let model = ModelRegistry::<T>::default().build(&cfg.model, &cfg.pipeline)?;
    let samples: Vec<_> = cfg.data.load(cfg.pipeline.max_disp)?.into_iter().map(|s| s.sample).collect();
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join(CONFIG_FILE), &(cfg.to_json()? + "\n"))?;
    let log_path = cfg.out_dir.join(LOSS_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(CliError::io(&log_path))?);
    let mut params = model.init_params(cfg.seed);
    info!(
        "training {} ({} parameters) on {} samples for {} steps",
        model.name(),
        params.count(),
        samples.len(),
        cfg.train.total_steps()
    );
    let mut write_err = None;
    let records = run_training(model.as_ref(), &mut params, &samples, &cfg.train, cfg.seed, |r| {
        if let Err(e) = writeln!(log, "{}", r.log_line()) {
            write_err.get_or_insert(e);
        }
        if r.step % 100 == 0 {
            info!("step {} loss {:.4} epe {:.4}", r.step, r.loss, r.epe);
        }
    })?;
    log.flush().map_err(CliError::io(&log_path))?;
    if let Some(e) = write_err {
        return Err(CliError::Io { path: log_path, source: e });
    }
    let path = cfg.out_dir.join(CHECKPOINT_FILE);
    let ck = Checkpoint { meta: CheckpointMeta { model: model.name().to_string(), config: cfg.pipeline.clone() }, params };
    ck.save(&path)?;
    info!("wrote {}", path.display());
    Ok(TrainSummary { steps: records.len(), final_loss: records.last().map(|r| r.loss), checkpoint: path })
}

fn checkpoint_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.checkpoint.as_deref().ok_or_else(|| CliError::Usage("no checkpoint given (--checkpoint or config)".into()))
}

/// Loads a checkpoint and rebuilds its model; parameters must match the
/// model exactly.
fn restore<T: Real>(path: &Path) -> Result<(Box<dyn StereoModel<T>>, Checkpoint<T>)> {
    let ck = Checkpoint::<T>::load(path)?;
    let model = ModelRegistry::<T>::default().build(&ck.meta.model, &ck.meta.config)?;
    ck.check_compatible(&model.init_params(0))?;
    Ok((model, ck))
}

/// Evaluates a checkpoint on the configured data; writes per-sample
/// disparity maps (PFM + PNG) and the JSON report.
pub fn eval(cfg: &RunConfig) -> Result<Report> {
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg),
        Precision::F64 => eval_as::<f64>(cfg),
    }
}

fn eval_as<T: Real>(cfg: &RunConfig) -> Result<Report> {
    let (model, ck) = restore::<T>(checkpoint_path(cfg)?)?;
    let data = cfg.data.load(ck.meta.config.max_disp)?;
    create_dir(&cfg.out_dir)?;
    let max = ck.meta.config.max_disp as f64;
    let mut rows = Vec::with_capacity(data.len());
    for NamedSample { name, sample } in &data {
        let pred: Tensor<f64> = model.predict(&ck.params, &sample.left.cast(), &sample.right.cast())?.cast();
        write_disparity(&cfg.out_dir, name, &pred, max)?;
        rows.push(score(name, sample, &pred)?);
    }
    let report = Report::new(ck.meta.model.clone(), rows)?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Predicts the disparity of one pair; writes `disparity.pfm` and `.png`.
pub fn infer(cfg: &RunConfig, left: &Path, right: &Path) -> Result<Tensor<f64>> {
    match cfg.precision {
        Precision::F32 => infer_as::<f32>(cfg, left, right),
        Precision::F64 => infer_as::<f64>(cfg, left, right),
    }
}

fn infer_as<T: Real>(cfg: &RunConfig, left: &Path, right: &Path) -> Result<Tensor<f64>> {
    let (model, ck) = restore::<T>(checkpoint_path(cfg)?)?;
    let (l, r) = (image::read_image(left)?, image::read_image(right)?);
    let pred: Tensor<f64> = model.predict(&ck.params, &l.cast(), &r.cast())?.cast();
    create_dir(&cfg.out_dir)?;
    write_disparity(&cfg.out_dir, "disparity", &pred, ck.meta.config.max_disp as f64)?;
    Ok(pred)
}

/// SAD block matching on the configured data, written like `eval`.
pub fn baseline(cfg: &RunConfig, window: usize, max_disp: usize) -> Result<Report> {
    let data = cfg.data.load(cfg.pipeline.max_disp)?;
    create_dir(&cfg.out_dir)?;
    let mut rows = Vec::with_capacity(data.len());
    for NamedSample { name, sample } in &data {
        let pred = block_match(&sample.left, &sample.right, window, max_disp)?;
        write_disparity(&cfg.out_dir, name, &pred, cfg.pipeline.max_disp as f64)?;
        rows.push(score(name, sample, &pred)?);
    }
    let report = Report::new(format!("block matching, {window}x{window} SAD, D={max_disp}"), rows)?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Writes the configured data in the directory layout.
pub fn gen_data(cfg: &RunConfig) -> Result<usize> {
    let data = cfg.data.load(cfg.pipeline.max_disp)?;
    dataset::write_dir(&cfg.out_dir, &data)?;
    Ok(data.len())
}

/// Runs every self-test suite; fails if any suite fails.
pub fn selftest(opts: &SelfTestOptions, out: &mut impl Write) -> Result<()> {
    let results = selftest::run_all(opts);
    for r in &results {
        writeln!(out, "{}", r.line()).map_err(CliError::io("<stdout>"))?;
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    writeln!(out, "{} of {} suites passed in {total:.1}s", results.len() - failed.len(), results.len())
        .map_err(CliError::io("<stdout>"))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("failed suites: {}", failed.join(", "))))
    }
}

/// Finite-difference check of every differentiable op; one line per op.
pub fn gradcheck(seed: u64, out: &mut impl Write) -> Result<()> {
    let checks = gradcheck::run_all(seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        let r = &c.report;
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<26} max rel err {:.2e}  ({} coordinates, {} skipped at kinks)  {verdict}",
            c.name, r.max_rel_err, r.checked, r.skipped
        )
            .map_err(CliError::io("<stdout>"))?;
        if !r.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("gradient check failed for: {}", failed.join(", "))))
    }
}
