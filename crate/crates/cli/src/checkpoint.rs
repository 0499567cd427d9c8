//! Checkpoint directories: a `manifest.json` plus one RLMX file per matrix.

use std::collections::HashSet;
use std::fs;
use std::path::{Component, Path};

use rayon::prelude::*;
use rrqr_lora::adapter::{DEFAULT_MAIN_LR_MULT, DEFAULT_SUB_LR_MULT};
use rrqr_lora::{DualAdapterLinear, LoraAdapter, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::files::{write_json, write_matrix};
use crate::rlmx;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Original,
    Residual,
    AdapterAMain,
    AdapterBMain,
    AdapterASub,
    AdapterBSub,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Original => "original",
            Role::Residual => "residual",
            Role::AdapterAMain => "adapter_a_main",
            Role::AdapterBMain => "adapter_b_main",
            Role::AdapterASub => "adapter_a_sub",
            Role::AdapterBSub => "adapter_b_sub",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Relative to the checkpoint directory.
    pub file: String,
    pub role: Role,
    #[serde(default)]
    pub selected_cols: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub layers: Vec<ManifestEntry>,
}

/// Layer names become file names, so they are restricted to a safe alphabet.
pub fn check_layer_name(name: &str) -> CliResult<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "invalid layer name `{name}`: use letters, digits, `_`, `-` or `.`"
        )))
    }
}

pub fn file_name(layer: &str, role: Role) -> String {
    format!("{layer}.{}.rlmx", role.as_str())
}

impl CheckpointManifest {
    pub fn new() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            layers: Vec::new(),
        }
    }

    /// Loads and validates `dir/manifest.json`.
    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let manifest: Self =
            serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        manifest.validate(dir)?;
        Ok(manifest)
    }

    /// Checks the version, `(name, role)` uniqueness, and that every
    /// referenced file exists inside `dir` with the recorded shape.
    pub fn validate(&self, dir: &Path) -> CliResult<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::data(format!(
                "unsupported manifest format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let mut seen = HashSet::new();
        for e in &self.layers {
            check_layer_name(&e.name).map_err(|err| CliError::data(err.message))?;
            if !seen.insert((e.name.as_str(), e.role)) {
                return Err(CliError::data(format!(
                    "duplicate manifest entry {} / {}",
                    e.name,
                    e.role.as_str()
                )));
            }
            let rel = Path::new(&e.file);
            if rel.is_absolute() || rel.components().any(|c| !matches!(c, Component::Normal(_))) {
                return Err(CliError::data(format!(
                    "manifest file path `{}` must stay inside the checkpoint",
                    e.file
                )));
            }
            let header = rlmx::read_header(&dir.join(rel))?;
            if (header.rows, header.cols) != (e.rows, e.cols) {
                return Err(CliError::data(format!(
                    "{}: manifest says {}x{}, file holds {}x{}",
                    e.file, e.rows, e.cols, header.rows, header.cols
                )));
            }
        }
        Ok(())
    }

    /// Distinct layer names in order of first appearance.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for e in &self.layers {
            if !names.contains(&e.name) {
                names.push(e.name.clone());
            }
        }
        names
    }

    pub fn entry(&self, name: &str, role: Role) -> Option<&ManifestEntry> {
        self.layers.iter().find(|e| e.name == name && e.role == role)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

impl Default for CheckpointManifest {
    fn default() -> Self {
        Self::new()
    }
}

pub fn load_entry(dir: &Path, entry: &ManifestEntry) -> CliResult<Matrix> {
    Ok(rlmx::read_file(&dir.join(&entry.file))?.0)
}

pub fn load_role(dir: &Path, manifest: &CheckpointManifest, name: &str, role: Role) -> CliResult<Matrix> {
    let entry = manifest
        .entry(name, role)
        .ok_or_else(|| CliError::data(format!("layer {name}: missing role {}", role.as_str())))?;
    load_entry(dir, entry)
}

fn load_adapter(
    dir: &Path,
    manifest: &CheckpointManifest,
    name: &str,
    (role_b, role_a): (Role, Role),
    lr_multiplier: f64,
) -> CliResult<Option<LoraAdapter>> {
    match (manifest.entry(name, role_b), manifest.entry(name, role_a)) {
        (None, None) => Ok(None),
        (Some(b), Some(a)) => {
            let adapter = LoraAdapter::from_parts(
                load_entry(dir, b)?,
                load_entry(dir, a)?,
                lr_multiplier,
                a.selected_cols.clone(),
            )
            .map_err(|e| CliError::data(format!("layer {name}: {e}")))?;
            Ok(Some(adapter))
        }
        (Some(_), None) => Err(CliError::data(format!(
            "layer {name}: missing role {}",
            role_a.as_str()
        ))),
        (None, Some(_)) => Err(CliError::data(format!(
            "layer {name}: missing role {}",
            role_b.as_str()
        ))),
    }
}

/// Reassembles an adapted layer. Requires `original`, `residual` and at
/// least one complete adapter pair.
pub fn load_layer(dir: &Path, manifest: &CheckpointManifest, name: &str) -> CliResult<DualAdapterLinear> {
    let original = load_role(dir, manifest, name, Role::Original)?;
    let residual = load_role(dir, manifest, name, Role::Residual)?;
    let main = load_adapter(
        dir,
        manifest,
        name,
        (Role::AdapterBMain, Role::AdapterAMain),
        DEFAULT_MAIN_LR_MULT,
    )?;
    let sub = load_adapter(
        dir,
        manifest,
        name,
        (Role::AdapterBSub, Role::AdapterASub),
        DEFAULT_SUB_LR_MULT,
    )?;
    if main.is_none() && sub.is_none() {
        return Err(CliError::data(format!(
            "layer {name}: missing adapter roles (need adapter_a_main/adapter_b_main or adapter_a_sub/adapter_b_sub)"
        )));
    }
    DualAdapterLinear::from_parts(original, residual, main, sub)
        .map_err(|e| CliError::data(format!("layer {name}: {e}")))
}

/// Every adapted layer in the manifest, in manifest order.
pub fn load_layers(dir: &Path, manifest: &CheckpointManifest) -> CliResult<Vec<(String, DualAdapterLinear)>> {
    let names = manifest.layer_names();
    if names.is_empty() {
        return Err(CliError::data("checkpoint has no layers"));
    }
    names
        .into_par_iter()
        .map(|name| {
            let layer = load_layer(dir, manifest, &name)?;
            Ok((name, layer))
        })
        .collect()
}

/// Matrices for `layer` under the given roles, ready to be written.
pub fn layer_matrices(name: &str, layer: &DualAdapterLinear, include_original: bool) -> Vec<(ManifestEntry, Matrix)> {
    let mut out = Vec::new();
    let mut push = |role: Role, m: &Matrix, selected: &[usize]| {
        out.push((
            ManifestEntry {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                file: file_name(name, role),
                role,
                selected_cols: selected.to_vec(),
            },
            m.clone(),
        ));
    };
    if include_original {
        push(Role::Original, layer.w_original(), &[]);
    }
    push(Role::Residual, layer.w_residual(), &[]);
    if let Some(a) = layer.main() {
        push(Role::AdapterBMain, a.b(), a.selected_cols());
        push(Role::AdapterAMain, a.a(), a.selected_cols());
    }
    if let Some(a) = layer.sub() {
        push(Role::AdapterBSub, a.b(), a.selected_cols());
        push(Role::AdapterASub, a.a(), a.selected_cols());
    }
    out
}

/// Writes matrix files concurrently; the caller writes the manifest last.
pub fn write_entries(dir: &Path, entries: &[(ManifestEntry, Matrix)], csv: bool) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::data(format!("creating {}: {e}", dir.display())))?;
    entries
        .par_iter()
        .try_for_each(|(entry, m)| write_matrix(&dir.join(&entry.file), m, csv))
}

/// Writes a self-contained checkpoint of adapted layers.
pub fn write_checkpoint(
    dir: &Path,
    layers: &[(String, DualAdapterLinear)],
    csv: bool,
) -> CliResult<CheckpointManifest> {
    let entries: Vec<(ManifestEntry, Matrix)> = layers
        .iter()
        .flat_map(|(name, layer)| layer_matrices(name, layer, true))
        .collect();
    write_entries(dir, &entries, csv)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        layers: entries.into_iter().map(|(e, _)| e).collect(),
    };
    manifest.save(dir)?;
    Ok(manifest)
}
