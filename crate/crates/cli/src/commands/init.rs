use std::path::Path;

use rayon::prelude::*;
use rrqr_lora::train::layer_seed;
use rrqr_lora::{build_dual_layer, InitStrategy};

use super::{probe_inputs, INIT_TOL};
use crate::checkpoint::{layer_matrices, load_layer, load_role, write_entries, CheckpointManifest, Role};
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy)]
pub struct InitOptions {
    pub r_main: usize,
    pub r_sub: usize,
    pub strategy: InitStrategy,
    pub seed: u64,
    pub verify: bool,
    pub csv: bool,
}

pub fn init(dir: &Path, opts: &InitOptions) -> CliResult<()> {
    let mut manifest = CheckpointManifest::load(dir)?;
    let originals: Vec<(String, usize, usize)> = manifest
        .layers
        .iter()
        .filter(|e| e.role == Role::Original)
        .map(|e| (e.name.clone(), e.rows, e.cols))
        .collect();
    if originals.is_empty() {
        return Err(CliError::data("checkpoint has no original matrices"));
    }

    let (r_main, r_sub) = opts.strategy.effective_ranks(opts.r_main, opts.r_sub);
    if r_main == 0 && r_sub == 0 {
        return Err(CliError::usage(format!(
            "{} needs a nonzero adapter rank",
            opts.strategy.name()
        )));
    }
    let disjoint = opts.strategy != InitStrategy::KaimingUniform;
    let offending: Vec<String> = originals
        .iter()
        .filter(|(_, d, k)| {
            let m = *d.min(k);
            (disjoint && r_main + r_sub > m) || r_main > m || r_sub > m
        })
        .map(|(name, d, k)| format!("{name} ({d}x{k}, min(d, k) = {})", d.min(k)))
        .collect();
    if !offending.is_empty() {
        return Err(CliError::data(format!(
            "r_main ({r_main}) + r_sub ({r_sub}) does not fit layers: {}",
            offending.join(", ")
        )));
    }

    let layers = originals
        .par_iter()
        .enumerate()
        .map(|(i, (name, _, _))| {
            let w0 = load_role(dir, &manifest, name, Role::Original)?;
            let layer = build_dual_layer(&w0, opts.r_main, opts.r_sub, opts.strategy, layer_seed(opts.seed, i))
                .map_err(|e| CliError::data(format!("layer {name}: {e}")))?;
            Ok((name.clone(), layer))
        })
        .collect::<CliResult<Vec<_>>>()?;

    let entries: Vec<_> = layers
        .iter()
        .flat_map(|(name, layer)| layer_matrices(name, layer, false))
        .collect();
    write_entries(dir, &entries, opts.csv)?;

    let before = manifest.layers.len();
    manifest.layers.retain(|e| e.role == Role::Original);
    let replaced = before - manifest.layers.len();
    let added = entries.len();
    manifest.layers.extend(entries.into_iter().map(|(e, _)| e));
    manifest.save(dir)?;

    println!(
        "initialized {} layer(s) with {} (r_main {r_main}, r_sub {r_sub}): {added} entries added, {replaced} replaced",
        layers.len(),
        opts.strategy.name()
    );
    for (name, layer) in &layers {
        let sel = |a: Option<&rrqr_lora::LoraAdapter>| {
            a.map(|a| format!("{:?}", a.selected_cols()))
                .unwrap_or_else(|| "-".into())
        };
        println!(
            "  {name}: main cols {} sub cols {}",
            sel(layer.main()),
            sel(layer.sub())
        );
    }

    if opts.verify {
        let reloaded = CheckpointManifest::load(dir)?;
        let mut worst = 0.0f64;
        for (i, (name, _)) in layers.iter().enumerate() {
            let layer = load_layer(dir, &reloaded, name)?;
            let x = probe_inputs(layer.d_in(), layer_seed(opts.seed, i));
            let diff = layer
                .forward(&x)?
                .max_abs_diff(&layer.w_original().matmul(&x)?)
                .expect("same shape");
            println!("  {name}: max |forward - W0 x| = {diff:e}");
            worst = worst.max(diff);
        }
        println!("output preservation: max |delta| = {worst:e}");
        if worst > INIT_TOL {
            return Err(CliError::data(format!("verification failed: {worst:e} > {INIT_TOL:e}")));
        }
    }
    Ok(())
}
