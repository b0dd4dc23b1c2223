use std::fs;
use std::path::{Path, PathBuf};

use cascade_core::data::{load_region, synth_generate, write_region};
use cascade_core::experiment::{
    compare, evaluate_variant, prepare, run_ablation, train_variant, write_predictions,
    VariantResult,
};
use cascade_core::training::write_run_log;
use cascade_core::{AblationAxis, Checkpoint, Error, EvalReport, Result, RunConfig};

pub struct Context {
    pub cfg: RunConfig,
    pub jobs: usize,
    pub run_root: PathBuf,
}

impl Context {
    fn run_dir(&self) -> PathBuf {
        self.run_root.join(self.cfg.run_id())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `config.toml` into a fresh run directory.
fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    create_dir(dir)?;
    write_file(&dir.join("config.toml"), &cfg.to_toml()?)
}

fn member_path(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("member_{member}.json"))
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    report.write(dir)?;
    let a = &report.aggregates;
    println!(
        "{:<9} rmse {:.4}  nse mean {:.4}  nse median {:.4}  basins {} (excluded {})",
        report.metadata.variant, a.rmse_mean, a.nse_mean, a.nse_median, a.n_basins, a.n_excluded
    );
    Ok(())
}

fn write_comparison(dir: &Path, reports: &[EvalReport]) -> Result<()> {
    if reports.len() < 2 {
        return Ok(());
    }
    let counts = compare(reports)?;
    let path = dir.join("comparison.json");
    let json = serde_json::to_string_pretty(&counts).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    write_file(&path, &(json + "\n"))
}

pub fn synth(ctx: &Context) -> Result<()> {
    let region = synth_generate(&ctx.cfg.synth)?;
    let dir = &ctx.cfg.data.dir;
    write_region(dir, &region, &ctx.cfg.data.schema)?;
    log::info!(
        "wrote {} synthetic basins to {}",
        region.records.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let region = load_region(&cfg.data.dir, &cfg.data.schema)?;
    let prepared = prepare(&region, cfg)?;
    let run_dir = ctx.run_dir();
    echo_config(&run_dir, cfg)?;
    for &variant in &cfg.model.variants {
        log::info!("training {variant}: {} members", cfg.train.seeds.len());
        let runs = train_variant(&prepared, cfg, variant, ctx.jobs)?;
        let dir = run_dir.join(variant.name());
        create_dir(&dir)?;
        let mut log = Vec::new();
        for (k, run) in runs.iter().enumerate() {
            run.checkpoint.save(&member_path(&dir, k))?;
            log.extend(run.log.iter().cloned());
        }
        write_run_log(&dir.join("run_log.jsonl"), &log)?;
    }
    log::info!("checkpoints in {}", run_dir.display());
    Ok(())
}

pub fn eval(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let run_dir = ctx.run_dir();
    let mut checkpoints = Vec::new();
    for &variant in &cfg.model.variants {
        let dir = run_dir.join(variant.name());
        let members = (0..cfg.train.seeds.len())
            .map(|k| Checkpoint::load(&member_path(&dir, k)))
            .collect::<Result<Vec<_>>>()?;
        checkpoints.push((variant, members));
    }
    let region = load_region(&cfg.data.dir, &cfg.data.schema)?;
    let prepared = prepare(&region, cfg)?;
    let mut reports = Vec::new();
    for (variant, members) in &checkpoints {
        let (report, forecasts) = evaluate_variant(&prepared, cfg, *variant, members)?;
        let dir = run_dir.join(variant.name()).join("eval");
        write_report(&dir, &report)?;
        write_predictions(&dir.join("predictions"), &prepared, &forecasts)?;
        reports.push(report);
    }
    write_comparison(&run_dir, &reports)
}

pub fn ablate(ctx: &Context, axis: Option<&str>) -> Result<()> {
    let cfg = &ctx.cfg;
    let axis: AblationAxis = match axis {
        Some(name) => name.parse()?,
        None => cfg
            .eval
            .axis
            .ok_or_else(|| Error::Usage("no ablation axis: pass --axis or set eval.axis".into()))?,
    };
    let region = load_region(&cfg.data.dir, &cfg.data.schema)?;
    let mut failure = None;
    let grid = run_ablation(
        &region,
        cfg,
        axis,
        &cfg.eval.values,
        ctx.jobs,
        |cell, results: &[VariantResult]| {
            let outcome = (|| {
                let cell_cfg = axis.apply(cfg, cell.value)?;
                let dir = ctx.run_root.join(cell_cfg.run_id());
                echo_config(&dir, &cell_cfg)?;
                for r in results {
                    write_report(&dir.join(r.variant.name()).join("eval"), &r.report)?;
                }
                write_comparison(&dir, &cell.reports)
            })();
            if let Err(e) = outcome {
                failure.get_or_insert(e);
            }
        },
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let dir = ctx.run_dir().join(format!("ablate_{}", axis.name()));
    echo_config(&ctx.run_dir(), cfg)?;
    grid.write(&dir)?;
    log::info!("grid with {} cells in {}", grid.cells.len(), dir.display());
    match grid.cells.iter().find_map(|c| c.error.as_ref()) {
        Some(err) if grid.cells.iter().all(|c| c.error.is_some()) => Err(Error::Data(format!(
            "every ablation cell failed, first: {err}"
        ))),
        _ => Ok(()),
    }
}
