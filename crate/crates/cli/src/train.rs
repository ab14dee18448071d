use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use pathdiff::datasets::{generate, generate_with};
use pathdiff::persistence::{Checkpoint, RunConfig};
use pathdiff::trainer::{run_training_with, StepRule, TrainState};
use pathdiff::{Error, Result};
use serde::Serialize;

use crate::rundir::{checkpoint_name, RunDir};
use crate::TrainArgs;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const DIVERGENCE_FILE: &str = "divergence.json";

#[derive(Serialize)]
struct RunInfo<'a> {
    crate_version: &'a str,
    config_hash: &'a str,
    seed: u64,
    resumed_from: Option<String>,
    start_iteration: u64,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    iteration: u64,
    t: usize,
    k: usize,
    cond_rate: f64,
    detail: &'a str,
    last_logged: Option<pathdiff::trainer::LossRecord>,
}

fn write_file(path: PathBuf, contents: &[u8]) -> Result<()> {
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

/// Runs training and returns the run directory.
pub fn run(args: &TrainArgs) -> Result<PathBuf> {
    let resumed = match &args.resume {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    let mut cfg = match (&resumed, &args.config) {
        (Some(ck), None) => ck.config.clone(),
        (Some(_), Some(_)) => {
            return Err(Error::Usage(
                "--resume takes its config from the checkpoint; drop --config".into(),
            ))
        }
        (None, Some(path)) => RunConfig::load(path)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        if resumed.is_some() && seed != cfg.seed {
            return Err(Error::Usage(format!(
                "--seed {seed} conflicts with the checkpoint seed {}",
                cfg.seed
            )));
        }
        cfg.seed = seed;
    }
    if let Some(iterations) = args.iterations {
        cfg.iterations = iterations;
    }
    if args.disable_relax {
        cfg.relax_enabled = false;
    }
    cfg.validate()?;
    let train_cfg = cfg.train_config();
    let schedule = cfg.schedule_params().build()?;

    let dataset = match &resumed {
        Some(ck) => generate_with(&cfg.dataset_spec(), &ck.normalization)?,
        None => generate(&cfg.dataset_spec())?,
    };
    let arch = cfg.architecture_for(dataset.dims(), dataset.image_shape)?;
    let mut state = match resumed {
        Some(ck) => {
            if ck.state.triplet.base.architecture() != &arch {
                return Err(Error::Config(
                    "checkpoint architecture does not match its config".into(),
                ));
            }
            ck.state
        }
        None => TrainState::new(arch, &train_cfg)?,
    };

    let hash = cfg.hash()?;
    let run_dir = RunDir::create(&args.out, &hash)?;
    info!("run directory {}", run_dir.path().display());
    write_file(run_dir.join("config.toml"), cfg.to_toml_string()?.as_bytes())?;
    let run_info = RunInfo {
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: &hash,
        seed: cfg.seed,
        resumed_from: args.resume.as_ref().map(|p| p.display().to_string()),
        start_iteration: state.iteration,
    };
    write_file(
        run_dir.join("run.json"),
        &serde_json::to_vec_pretty(&run_info).map_err(|e| Error::format("run.json", e))?,
    )?;

    let log_path = run_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let snapshot = |state: &TrainState| Checkpoint {
        config: cfg.clone(),
        schedule: cfg.schedule_params(),
        normalization: dataset.normalization.clone(),
        image_shape: dataset.image_shape,
        state: state.clone(),
    };
    let mut last_logged = None;
    let outcome = run_training_with(
        &mut state,
        dataset.data.view(),
        &train_cfg,
        &schedule,
        StepRule::MultiState,
        |st, rec| {
            if rec.iteration % cfg.log_interval == 0 || rec.iteration == cfg.iterations {
                let line = serde_json::to_string(rec).map_err(|e| Error::format("log", e))?;
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                last_logged = Some(*rec);
            }
            if cfg.checkpoint_interval > 0
                && rec.iteration % cfg.checkpoint_interval == 0
                && rec.iteration < cfg.iterations
            {
                snapshot(st).save(&run_dir.join(&checkpoint_name(rec.iteration)))?;
            }
            Ok(())
        },
    );
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    if let Err(err) = outcome {
        if let Error::Diverged {
            iteration,
            t,
            k,
            cond_rate,
            detail,
        } = &err
        {
            let dump = DivergenceDump {
                iteration: *iteration,
                t: *t,
                k: *k,
                cond_rate: *cond_rate,
                detail,
                last_logged,
            };
            let bytes = serde_json::to_vec_pretty(&dump).map_err(|e| Error::format("dump", e))?;
            write_file(run_dir.join(DIVERGENCE_FILE), &bytes)?;
            warn!("diagnostics written to {}", run_dir.join(DIVERGENCE_FILE).display());
        }
        return Err(err);
    }

    let final_path = run_dir.join(&checkpoint_name(state.iteration));
    snapshot(&state).save(&final_path)?;
    if let Some(rec) = state.log.last() {
        info!(
            "iteration {}: noise {:.5} relax {:.5} cond_rate {:.3}",
            rec.iteration, rec.noise_loss, rec.relax_loss, rec.cond_rate
        );
    }
    println!("{}", final_path.display());
    Ok(run_dir.path().to_path_buf())
}
