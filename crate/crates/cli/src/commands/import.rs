use std::path::Path;

use crate::checkpoint::{check_layer_name, file_name, CheckpointManifest, ManifestEntry, Role};
use crate::error::{CliError, CliResult};
use crate::files::{read_matrix, write_matrix};

pub fn import(specs: &[String], out: &Path, csv: bool) -> CliResult<()> {
    let mut manifest = CheckpointManifest::new();
    for spec in specs {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("expected NAME=PATH, got `{spec}`")))?;
        check_layer_name(name)?;
        if manifest.entry(name, Role::Original).is_some() {
            return Err(CliError::usage(format!("layer `{name}` given twice")));
        }
        let m = read_matrix(Path::new(path), csv)?;
        let file = file_name(name, Role::Original);
        write_matrix(&out.join(&file), &m, csv)?;
        println!("{name}: {}x{} from {path}", m.rows(), m.cols());
        manifest.layers.push(ManifestEntry {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
            file,
            role: Role::Original,
            selected_cols: Vec::new(),
        });
    }
    manifest.save(out)
}
