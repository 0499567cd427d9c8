use std::path::Path;

use rrqr_lora::diagnostics::{cosine_structure, diagnostics_report, Axis};

use crate::checkpoint::{load_layers, CheckpointManifest};
use crate::error::CliResult;
use crate::files::{matrix_to_csv, write_atomic, write_json};

pub fn analyze(dir: &Path, report_path: &Path, heatmaps: Option<&Path>) -> CliResult<()> {
    let manifest = CheckpointManifest::load(dir)?;
    let layers = load_layers(dir, &manifest)?;
    let report = diagnostics_report(layers.iter().map(|(n, l)| (n.as_str(), l)));
    write_json(report_path, &report)?;

    if let Some(hdir) = heatmaps {
        for (name, layer) in &layers {
            let Some(primary) = layer.main().or(layer.sub()) else {
                continue;
            };
            for (tag, m, axis) in [("cos_a", primary.a(), Axis::Rows), ("cos_b", primary.b(), Axis::Cols)] {
                if let Ok(c) = cosine_structure(m, axis) {
                    write_atomic(
                        &hdir.join(format!("{name}.{tag}.csv")),
                        matrix_to_csv(&c.heatmap).as_bytes(),
                    )?;
                }
            }
        }
    }

    let show = |v: Option<f64>| v.map_or_else(|| "null".to_string(), |v| format!("{v:.6}"));
    for l in &report.layers {
        println!(
            "{}: effective_rank {} rank_efficiency {} phi {} avg_ratio {}",
            l.layer_id,
            show(l.effective_rank),
            show(l.rank_efficiency),
            show(l.phi),
            show(l.norm_stats.and_then(|s| s.avg_ratio)),
        );
    }
    println!("report written to {}", report_path.display());
    Ok(())
}
