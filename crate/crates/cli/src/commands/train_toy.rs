use std::fs;
use std::path::Path;

use rrqr_lora::train::{gen_toy_task, layer_names, run_experiment_with_model, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_checkpoint;
use crate::error::{CliError, CliResult};
use crate::files::write_json;

/// Run facts that vary between otherwise identical runs; kept out of
/// `report.json` so reports stay byte-comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub wall_clock_secs: f64,
    pub threads: usize,
    pub tool_version: String,
}

pub fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    cfg.validate()
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
    Ok(cfg)
}

pub fn train_toy(config: Option<&Path>, out: &Path, seed: Option<u64>, csv: bool) -> CliResult<()> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let task = gen_toy_task(cfg.seed, cfg.shift_strength)?;
    let (report, model) = run_experiment_with_model(&cfg, &task)?;

    write_json(&out.join("report.json"), &report)?;
    write_json(
        &out.join("run_meta.json"),
        &RunMeta {
            wall_clock_secs: report.wall_clock_secs,
            threads: rayon::current_num_threads(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    let layers: Vec<_> = layer_names(model.layers.len()).into_iter().zip(model.layers).collect();
    write_checkpoint(&out.join("checkpoint"), &layers, csv)?;

    println!(
        "{} on seed {}: {} steps in {:.2}s",
        cfg.strategy.name(),
        cfg.seed,
        cfg.iterations,
        report.wall_clock_secs
    );
    println!(
        "target loss {:.6e} -> {:.6e}, source loss {:.6e} -> {:.6e}",
        report.initial_target_loss, report.final_target_loss, report.initial_source_loss, report.final_source_loss
    );
    if let Some(last) = report.snapshots.last() {
        let agg = &last.diagnostics.aggregate;
        let show = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |v| format!("{v:.6}"));
        println!(
            "effective_rank {} phi {} avg_ratio {}",
            show(agg.effective_rank),
            show(agg.phi),
            show(agg.norm_stats.and_then(|s| s.avg_ratio))
        );
    }
    Ok(())
}
