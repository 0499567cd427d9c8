use std::path::Path;

use rayon::prelude::*;

use super::{probe_inputs, MERGE_TOL};
use crate::checkpoint::{file_name, load_entry, load_layers, write_entries, CheckpointManifest, ManifestEntry, Role};
use crate::error::{CliError, CliResult};

pub fn merge(dir: &Path, out: &Path, seed: u64, verify: bool, csv: bool) -> CliResult<()> {
    let manifest = CheckpointManifest::load(dir)?;
    let layers = load_layers(dir, &manifest)?;
    let entries: Vec<_> = layers
        .par_iter()
        .map(|(name, layer)| {
            let merged = layer.merge();
            let entry = ManifestEntry {
                name: name.clone(),
                rows: merged.rows(),
                cols: merged.cols(),
                file: file_name(name, Role::Original),
                role: Role::Original,
                selected_cols: Vec::new(),
            };
            (entry, merged)
        })
        .collect();
    write_entries(out, &entries, csv)?;
    let merged_manifest = CheckpointManifest {
        format_version: manifest.format_version,
        layers: entries.into_iter().map(|(e, _)| e).collect(),
    };
    merged_manifest.save(out)?;
    println!("merged {} layer(s) into {}", layers.len(), out.display());

    if verify {
        let mut worst = 0.0f64;
        for ((name, layer), entry) in layers.iter().zip(&merged_manifest.layers) {
            let dense = load_entry(out, entry)?;
            let x = probe_inputs(layer.d_in(), seed);
            let diff = layer.forward(&x)?.max_abs_diff(&dense.matmul(&x)?).expect("same shape");
            println!("  {name}: max |adapter - merged| = {diff:e}");
            worst = worst.max(diff);
        }
        println!("merge equivalence: max |delta| = {worst:e}");
        if worst > MERGE_TOL {
            return Err(CliError::data(format!(
                "verification failed: {worst:e} > {MERGE_TOL:e}"
            )));
        }
    }
    Ok(())
}
