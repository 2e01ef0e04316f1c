//! Subcommand bodies. Every command validates its config and any referenced
//! checkpoints before the output directory is created.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{anyhow, Context};

use liftkd_core::diffusion::{corrected_sample, write_step_csv, FitScope};
use liftkd_core::harness::{self, HarnessConfig, RunReport};
use liftkd_core::numerics::streams;
use liftkd_core::place::export_error_map;
use liftkd_core::{Error, Mlp, Rng};

/// Exit category of a failed command.
#[derive(Debug)]
pub enum Failure {
    /// Bad config or referenced file; reported before any output exists.
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig { .. } => Failure::Invalid(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome<T> = Result<T, Failure>;

pub fn defaults_toml() -> String {
    toml::to_string(&HarnessConfig::default()).expect("default config serializes")
}

pub fn parse_config(text: &str) -> anyhow::Result<HarnessConfig> {
    let cfg: HarnessConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_checkpoint(path: Option<&Path>, field: &str, cfg: &HarnessConfig) -> anyhow::Result<()> {
    let Some(path) = path else { return Ok(()) };
    let m = Mlp::load(path).with_context(|| format!("{field}: cannot load {}", path.display()))?;
    if m.data_dim() != cfg.data.kind.data_dim() || m.timesteps() != cfg.schedule.timesteps {
        return Err(anyhow!(
            "{field}: {} has data_dim {} and {} timesteps, config needs {} and {}",
            path.display(),
            m.data_dim(),
            m.timesteps(),
            cfg.data.kind.data_dim(),
            cfg.schedule.timesteps
        ));
    }
    Ok(())
}

/// Reads and validates the config, then creates `out`.
pub fn prepare(config: &Path, out: &Path) -> Outcome<HarnessConfig> {
    let text = fs::read_to_string(config)
        .with_context(|| format!("cannot read config file {}", config.display()))
        .map_err(Failure::Invalid)?;
    let cfg = parse_config(&text)
        .with_context(|| format!("in {}", config.display()))
        .map_err(Failure::Invalid)?;
    check_checkpoint(cfg.teacher.checkpoint.as_deref(), "teacher.checkpoint", &cfg).map_err(Failure::Invalid)?;
    check_checkpoint(cfg.student.checkpoint.as_deref(), "student.checkpoint", &cfg).map_err(Failure::Invalid)?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(cfg)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    serde_json::to_writer(create(path)?, value)?;
    Ok(())
}

/// Loads the configured teacher or trains one and saves it under `out`.
fn teacher(cfg: &HarnessConfig, out: &Path) -> Outcome<Mlp> {
    let model = harness::train_teacher(cfg, &Rng::new(cfg.seed))?;
    if cfg.teacher.checkpoint.is_none() {
        model.save(&out.join("teacher.json"))?;
    }
    Ok(model)
}

fn write_report(report: &RunReport, out: &Path, name: &str) -> anyhow::Result<()> {
    report.write_csv(create(&out.join(name))?)?;
    Ok(())
}

/// Runs distillation, keeping the partial log of a diverged run.
fn distill_into(cfg: &HarnessConfig, teacher: &Mlp, out: &Path) -> Outcome<(RunReport, Mlp)> {
    match harness::distill_model(cfg, teacher, &Rng::new(cfg.seed)) {
        Ok((report, student)) => {
            write_report(&report, out, "run.csv")?;
            write_json(&report, &out.join("report.json"))?;
            student.save(&out.join("student.json"))?;
            Ok((report, student))
        }
        Err(Error::Diverged { step, partial }) => {
            if let Some(r) = partial {
                write_report(&r, out, "run.csv")?;
            }
            Err(Failure::Runtime(anyhow!("training diverged at step {step}; partial log in run.csv")))
        }
        Err(e) => Err(e.into()),
    }
}

/// The configured student checkpoint, or a freshly distilled student.
fn student(cfg: &HarnessConfig, teacher: &Mlp, out: &Path) -> Outcome<Mlp> {
    match &cfg.student.checkpoint {
        Some(path) => Ok(Mlp::load(path)?),
        None => Ok(distill_into(cfg, teacher, out)?.1),
    }
}

pub fn train_teacher(cfg: &HarnessConfig, out: &Path) -> Outcome<()> {
    let model = teacher(cfg, out)?;
    let sched = cfg.schedule.build()?;
    let n = cfg.eval.samples;
    let samples = liftkd_core::diffusion::sample(
        &model,
        &sched,
        &mut Rng::new(cfg.seed).fork(streams::SAMPLER),
        &[n, model.data_dim()],
    )?;
    let (sw, mean_err, cov_err) = harness::score(cfg, &samples)?;
    println!(
        "train-teacher: {} params, sliced-W {sw:.4}, mean gap {mean_err:.4}, cov gap {cov_err:.4}",
        model.param_count()
    );
    Ok(())
}

pub fn distill(cfg: &HarnessConfig, out: &Path) -> Outcome<()> {
    let t = teacher(cfg, out)?;
    let (r, _) = distill_into(cfg, &t, out)?;
    let last = r.log.last().map_or(f64::NAN, |b| b.total);
    println!(
        "distill: {} steps, final loss {last:.5}, sliced-W {:.4}, mean gap {:.4}, cov gap {:.4}",
        r.log.len(),
        r.final_sw,
        r.mean_err,
        r.cov_err
    );
    Ok(())
}

pub fn correct_sample(cfg: &HarnessConfig, out: &Path) -> Outcome<()> {
    let t = teacher(cfg, out)?;
    let s = student(cfg, &t, out)?;
    let sched = cfg.schedule.build()?;
    let shape = [cfg.eval.samples, t.data_dim()];
    let run = corrected_sample(
        &t,
        &s,
        &sched,
        &mut Rng::new(cfg.seed).fork(streams::SAMPLER),
        &shape,
        FitScope::PerSample,
    )?;
    write_step_csv(&run.steps, create(&out.join("steps.csv"))?)?;
    write_json(&run.x0, &out.join("samples.json"))?;
    let raw = run.steps.iter().map(|s| s.raw_mse).sum::<f64>() / run.steps.len() as f64;
    let fixed = run.steps.iter().map(|s| s.corrected_mse).sum::<f64>() / run.steps.len() as f64;
    println!(
        "correct-sample: {} steps, mean raw mse {raw:.5}, mean corrected mse {fixed:.5}",
        run.steps.len()
    );
    Ok(())
}

pub fn error_map(cfg: &HarnessConfig, out: &Path) -> Outcome<()> {
    let t = teacher(cfg, out)?;
    let s = student(cfg, &t, out)?;
    let step = cfg.schedule.timesteps.div_ceil(2);
    let map = harness::error_map_snapshot(cfg, &t, &s, step, &Rng::new(cfg.seed))?;
    export_error_map(&map, &out.join("error_map.json"))?;
    let v = map.values();
    println!(
        "error-map: shape {:?} at t = {step}, mean {:.5}, max {:.5}",
        v.shape(),
        v.mean(),
        v.data().iter().copied().fold(0.0, f64::max)
    );
    Ok(())
}

pub fn capacity_gap(cfg: &HarnessConfig, out: &Path, workers: usize) -> Outcome<()> {
    let table = harness::capacity_gap_experiment(cfg, workers)?;
    let runs = out.join("runs");
    fs::create_dir_all(&runs).with_context(|| format!("cannot create {}", runs.display()))?;
    for (i, cell) in table.cells.iter().enumerate() {
        for r in &cell.runs {
            if let Some(report) = &r.report {
                write_report(report, &runs, &format!("cell{i}_{}_seed{}.csv", cell.method.as_str(), r.seed))?;
            }
        }
    }
    table.write_csv(create(&out.join("summary.csv"))?)?;
    let diverged: usize = table.cells.iter().map(|c| c.diverged_count()).sum();
    let total: usize = table.cells.iter().map(|c| c.runs.len()).sum();
    println!(
        "capacity-gap: {} cells, {total} runs, {diverged} diverged; see summary.csv",
        table.cells.len()
    );
    Ok(())
}

pub fn ablate_scheduler(cfg: &HarnessConfig, out: &Path, workers: usize) -> Outcome<()> {
    let t = teacher(cfg, out)?;
    let ablation = harness::ablate_scheduler(cfg, &t, workers)?;
    for (name, o) in &ablation.runs {
        if let Some(r) = &o.report {
            write_report(r, out, &format!("run_{}.csv", name.as_str()))?;
        }
    }
    ablation.write_csv(create(&out.join("comparison.csv"))?)?;
    let parts: Vec<String> = ablation
        .runs
        .iter()
        .map(|(n, o)| format!("{} {:.4}", n.as_str(), o.final_sw()))
        .collect();
    println!("ablate-scheduler: sliced-W {}", parts.join(", "));
    Ok(())
}
