use std::path::PathBuf;

use pathdiff::datasets::generate_with;
use pathdiff::metrics::{nfe_sweep, MetricConfig, NfeSweepReport, SweepConfig, SweepEntry};
use pathdiff::persistence::{Checkpoint, ModelRole};
use pathdiff::{Error, Result};

use crate::plot::sweep_svg;
use crate::EvalArgs;

pub const CSV_FILE: &str = "sweep.csv";
pub const TEXT_FILE: &str = "sweep.txt";
pub const PLOT_FILE: &str = "sweep.svg";

fn label_for(path: &std::path::Path, index: usize) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned());
    let parent = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned());
    match (parent, stem) {
        (Some(p), Some(s)) => format!("{p}/{s}"),
        (None, Some(s)) => s,
        _ => format!("checkpoint{index}"),
    }
}

/// Writes the sweep table, CSV and plot into `args.out` and returns the report.
pub fn run(args: &EvalArgs) -> Result<NfeSweepReport> {
    if !args.labels.is_empty() && args.labels.len() != args.checkpoints.len() {
        return Err(Error::Usage(format!(
            "{} labels for {} checkpoints",
            args.labels.len(),
            args.checkpoints.len()
        )));
    }
    let mut checkpoints = Vec::new();
    for path in &args.checkpoints {
        checkpoints.push(Checkpoint::load(path)?);
    }
    let first = &checkpoints[0];
    for (ck, path) in checkpoints.iter().zip(&args.checkpoints).skip(1) {
        if ck.normalization != first.normalization {
            return Err(Error::Config(format!(
                "{} was trained on differently normalized data than {}",
                path.display(),
                args.checkpoints[0].display()
            )));
        }
    }
    let reference = generate_with(
        &first.config.reference_spec(args.reference_size),
        &first.normalization,
    )?;
    let schedules = checkpoints
        .iter()
        .map(Checkpoint::noise_schedule)
        .collect::<Result<Vec<_>>>()?;
    let role: ModelRole = args.model.into();
    let entries: Vec<SweepEntry<'_>> = checkpoints
        .iter()
        .zip(&schedules)
        .enumerate()
        .map(|(i, (ck, s))| SweepEntry {
            label: args
                .labels
                .get(i)
                .cloned()
                .unwrap_or_else(|| label_for(&args.checkpoints[i], i)),
            model: ck.model(role),
            schedule: s,
        })
        .collect();
    let cfg = SweepConfig {
        metric: MetricConfig {
            kind: args.metric.into(),
            seed: args.seed,
            ..MetricConfig::default()
        },
        batch: args.batch,
        seed: args.seed,
        strategy: args.strategy.into(),
    };
    let report = nfe_sweep(&entries, &args.nfe, reference.data.view(), &cfg)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let write = |name: &str, text: String| -> Result<PathBuf> {
        let path = args.out.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    write(CSV_FILE, report.to_csv()?)?;
    let table = report.to_text();
    write(TEXT_FILE, table.clone())?;
    let title = format!("{} vs NFE ({} model)", report.metric_kind.name(), role.name());
    write(PLOT_FILE, sweep_svg(&report, &title))?;
    print!("{table}");
    Ok(report)
}
