use std::io::Write;
use std::path::Path;

use dtnet_core::autograd::set_backward_corruption;
use dtnet_core::data::{load_dataset, save_dataset, synth_generate, Sample, SynthConfig};
use dtnet_core::eval::{evaluate, export_pr_curve, EvalConfig, EvalReport};
use dtnet_core::gradcheck::{check_problem, gradcheck_suite, model_problem, BlockCheck, GRAD_TOL};
use dtnet_core::model::{load_checkpoint, save_checkpoint};
use dtnet_core::train::{train_loop, EpochRecord, MetricLog, TrainConfig};
use dtnet_core::{DtNetModel, Error, ModelConfig, Result, Variant};
use rand::SeedableRng;
use serde::Serialize;

use crate::run_config::{RunConfig, RUN_CONFIG_FILE};
use crate::{AblateArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs, EXIT_OK, EXIT_VERIFY};

pub const CHECKPOINT_FILE: &str = "model.dtnt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PR_FILE: &str = "pr.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn io<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(Error::from)
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    if a.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let model = ModelConfig::preset(&a.size)?;
    let cfg = SynthConfig {
        height: model.input.0,
        width: model.input.1,
        num_classes: model.num_classes,
        ..SynthConfig::default()
    };
    let samples = synth_generate(a.seed, a.count, &cfg)?;
    save_dataset(&a.out, &samples)?;
    RunConfig {
        out: Some(a.out.clone()),
        count: Some(a.count),
        synth: Some(cfg),
        ..RunConfig::new("synth", a.seed)
    }
    .write(&a.out)?;
    io(writeln!(out, "wrote {} samples to {}", samples.len(), a.out.display()))
}

/// Model preset adapted to the resolution of `samples`.
fn model_config(size: &str, variant: Variant, samples: &[Sample]) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(size)?;
    let [_, _, h, w] = samples[0].image.dims();
    cfg.input = (h, w);
    cfg.variant = variant;
    cfg.validate()?;
    Ok(cfg)
}

fn load(path: &Path) -> Result<Vec<Sample>> {
    load_dataset(path)
}

struct TrainJob<'a> {
    train: &'a [Sample],
    eval: Option<&'a [Sample]>,
    model: ModelConfig,
    config: TrainConfig,
    out: &'a Path,
}

/// Trains one model into `job.out`, writing checkpoint and metric log.
fn run_training(job: &TrainJob<'_>, run: RunConfig, out: &mut dyn Write) -> Result<DtNetModel<f32>> {
    std::fs::create_dir_all(job.out)?;
    RunConfig {
        out: Some(job.out.to_path_buf()),
        checkpoint: Some(job.out.join(CHECKPOINT_FILE)),
        model: Some(job.model.clone()),
        train: Some(job.config.clone()),
        ..run
    }
    .write(job.out)?;
    let metrics = job.out.join(METRICS_FILE);
    if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }
    let mut log = MetricLog::open(&metrics)?;
    let mut model = DtNetModel::new(job.model.clone(), job.config.seed)?;
    let result = train_loop(&mut model, job.train, job.eval, &job.config, |rec: &EpochRecord| {
        log.append(rec)?;
        let map = rec.map50.map_or(String::new(), |m| format!("  map50 {m:.4}"));
        io(writeln!(
            out,
            "epoch {:>3}  lr {:.2e}  box {:.4}  obj {:.4}  cls {:.4}  total {:.4}{map}",
            rec.epoch, rec.lr, rec.box_loss, rec.obj, rec.cls, rec.total
        ))
    });
    result?;
    save_checkpoint(&model, job.out.join(CHECKPOINT_FILE))?;
    Ok(model)
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<DtNetModel<f32>> {
    let data = load(&a.data)?;
    let eval_set = a.eval_data.as_deref().map(load).transpose()?;
    let model = model_config(&a.size, a.variant, &data)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        max_steps: a.max_steps,
        max_lr: a.lr,
        eval_every: a.eval_every,
        hflip: a.hflip,
        ..TrainConfig::default()
    };
    let job = TrainJob {
        train: &data,
        eval: eval_set.as_deref(),
        model,
        config,
        out: &a.out,
    };
    let run = RunConfig {
        data: Some(a.data.clone()),
        eval_data: a.eval_data.clone(),
        ..RunConfig::new("train", a.seed)
    };
    let model = run_training(&job, run, out)?;
    io(writeln!(out, "checkpoint written to {}", a.out.join(CHECKPOINT_FILE).display()))?;
    Ok(model)
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    precision: f64,
    recall: f64,
    map50: f64,
    map5095: f64,
    ap50: &'a [Option<f64>],
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let ckpt_dir = a.ckpt.parent().unwrap_or(Path::new("."));
    let trained = RunConfig::read(ckpt_dir)?;
    let config = trained.model.ok_or_else(|| {
        Error::Data(format!("{} has no model section", ckpt_dir.join(RUN_CONFIG_FILE).display()))
    })?;
    let model = load_checkpoint(&a.ckpt, config.clone())?;
    let data = load(&a.data)?;
    let cfg = EvalConfig {
        operating_conf: a.conf,
        nms_iou: a.nms,
        ..EvalConfig::default()
    };
    let report = evaluate(&model, &data, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    RunConfig {
        data: Some(a.data.clone()),
        checkpoint: Some(a.ckpt.clone()),
        out: Some(a.out.clone()),
        model: Some(config),
        eval: Some(cfg),
        ..RunConfig::new("eval", trained.seed)
    }
    .write(&a.out)?;
    let summary = ReportSummary {
        precision: report.precision,
        recall: report.recall,
        map50: report.map50,
        map5095: report.map5095,
        ap50: &report.ap50,
    };
    std::fs::write(a.out.join(REPORT_FILE), serde_json::to_string_pretty(&summary)?)?;
    export_pr_curve(&report, &a.out.join(PR_FILE))?;
    io(writeln!(
        out,
        "precision {:.4}  recall {:.4}  mAP@0.5 {:.4}  mAP@0.5:0.95 {:.4}",
        report.precision, report.recall, report.map50, report.map5095
    ))?;
    Ok(report)
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<u8> {
    if a.size != "tiny" {
        return Err(Error::Usage(format!("gradcheck runs on tiny shapes only, got --size {}", a.size)));
    }
    if a.coords == 0 {
        return Err(Error::Usage("--coords must be at least 1".into()));
    }
    if let Some(kind) = &a.corrupt_backward {
        set_backward_corruption(Some(Box::leak(kind.clone().into_boxed_str())));
    }
    let checked = (|| {
        let mut checks = gradcheck_suite(a.seed, a.coords)?;
        if a.full_model {
            let mut p = model_problem(ModelConfig::tiny(), 2, a.seed)?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            checks.push(check_problem(&mut p, 2, &mut rng)?);
        }
        Ok::<Vec<BlockCheck>, Error>(checks)
    })();
    set_backward_corruption(None);
    let checks = checked?;
    io(writeln!(out, "{:<18} {:>12} {:>8}  worst entry", "block", "max rel err", "status"))?;
    for c in &checks {
        io(writeln!(
            out,
            "{:<18} {:>12.3e} {:>8}  {}",
            c.block,
            c.max_rel_err,
            if c.passed() { "pass" } else { "FAIL" },
            c.worst
        ))?;
    }
    let all = checks.iter().all(BlockCheck::passed);
    io(writeln!(out, "tolerance {GRAD_TOL:e}: {}", if all { "all blocks pass" } else { "FAILED" }))?;
    if let Some(dir) = &a.out {
        RunConfig {
            out: Some(dir.clone()),
            ..RunConfig::new("gradcheck", a.seed)
        }
        .write(dir)?;
        std::fs::write(dir.join(GRADCHECK_FILE), serde_json::to_string_pretty(&checks)?)?;
    }
    Ok(if all { EXIT_OK } else { EXIT_VERIFY })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub label: String,
    pub map50: f64,
}

pub fn ablate(a: &AblateArgs, out: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let data = load(&a.data)?;
    let eval_set = a.eval_data.as_deref().map(load).transpose()?;
    let held_out = eval_set.as_deref().unwrap_or(&data);
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        max_steps: a.max_steps,
        eval_every: 0,
        ..TrainConfig::default()
    };
    RunConfig {
        data: Some(a.data.clone()),
        eval_data: a.eval_data.clone(),
        out: Some(a.out.clone()),
        model: Some(model_config(&a.size, Variant::Full, &data)?),
        train: Some(config.clone()),
        ..RunConfig::new("ablate", a.seed)
    }
    .write(&a.out)?;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        io(writeln!(out, "== {} ==", variant.label()))?;
        let dir = a.out.join(variant.name());
        let job = TrainJob {
            train: &data,
            eval: None,
            model: model_config(&a.size, variant, &data)?,
            config: config.clone(),
            out: &dir,
        };
        let run = RunConfig {
            data: Some(a.data.clone()),
            ..RunConfig::new("train", a.seed)
        };
        let model = run_training(&job, run, out)?;
        let report = evaluate(&model, held_out, &config.eval)?;
        rows.push(AblationRow {
            variant: variant.name().into(),
            label: variant.label().into(),
            map50: report.map50,
        });
    }
    let mut w = csv::Writer::from_path(a.out.join(ABLATION_FILE)).map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    io(writeln!(out, "{:<36} {:>8}", "variant", "mAP@0.5"))?;
    for r in &rows {
        io(writeln!(out, "{:<36} {:>8.4}", r.label, r.map50))?;
    }
    Ok(rows)
}
