//! JSON artifacts exchanged between subcommands.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bootstrap::BootSummary;
use crate::cimetest::{SkippedCell, TestReport};
use crate::cmle::{CmleConfig, CmleResult, StartDiagnostics};
use crate::dataset::ExclusionReport;
use crate::error::{Error, Result};
use crate::latent::{FitKind, ParametricFit, Target};
use crate::model::MisclassificationModel;
use crate::spectral::{IdentificationDiagnostics, SpectralOptions};

pub const SCHEMA_VERSION: u32 = 1;

pub const KIND_TESTS: &str = "test-reports";
pub const KIND_MODELS: &str = "models";
pub const KIND_FIT: &str = "fit";
pub const KIND_MANIFEST: &str = "manifest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Spectral,
    Cmle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestArtifact {
    pub schema_version: u32,
    pub kind: String,
    pub exclusions: ExclusionReport,
    pub reports: Vec<TestReport>,
    #[serde(default)]
    pub skipped: Vec<SkippedCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmleFitInfo {
    pub loglik: f64,
    pub n_starts: usize,
    pub n_starts_converged: usize,
    pub n_starts_agreeing: usize,
    pub boundary_flags: Vec<String>,
    pub ord_satisfied: bool,
    pub label_order: Vec<usize>,
    pub starts: Vec<StartDiagnostics>,
}

impl From<&CmleResult> for CmleFitInfo {
    fn from(r: &CmleResult) -> Self {
        CmleFitInfo {
            loglik: r.loglik,
            n_starts: r.n_starts,
            n_starts_converged: r.n_starts_converged,
            n_starts_agreeing: r.n_starts_agreeing,
            boundary_flags: r.boundary_flags.clone(),
            ord_satisfied: r.ord_satisfied,
            label_order: r.label_order.clone(),
            starts: r.starts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellModel {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_cell: Option<usize>,
    pub w_label: String,
    pub n: u64,
    pub model: MisclassificationModel,
    pub parameter_names: Vec<String>,
    /// Aligned with `parameter_names`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_errors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<IdentificationDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmle: Option<CmleFitInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootInfo {
    pub replicates: usize,
    pub seed: u64,
    pub stratified: bool,
    pub summary: BootSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsArtifact {
    pub schema_version: u32,
    pub kind: String,
    pub method: Method,
    pub by_cell: bool,
    pub w_names: Vec<String>,
    pub spectral_options: SpectralOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmle_config: Option<CmleConfig>,
    pub exclusions: ExclusionReport,
    pub cells: Vec<CellModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boot: Option<BootInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub schema_version: u32,
    pub kind: String,
    pub model: FitKind,
    pub target: Target,
    pub n: usize,
    pub clamp: f64,
    /// Names of `fit.estimates()`, which is what `fit.std_errors` covers.
    pub estimate_names: Vec<String>,
    pub fit: ParametricFit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boot: Option<BootInfo>,
}

/// Everything needed to rerun one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub kind: String,
    pub command: String,
    pub argv: Vec<String>,
    pub working_directory: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub version: String,
    pub threads: usize,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Any artifact, dispatched on its `kind` field.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Tests(TestArtifact),
    Models(ModelsArtifact),
    Fit(FitArtifact),
}

pub fn read_artifact(path: &Path) -> Result<Artifact> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{} is not JSON: {e}", path.display())))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64());
    if version != Some(SCHEMA_VERSION as u64) {
        return Err(Error::Schema(format!(
            "{}: unsupported schema_version {version:?}, expected {SCHEMA_VERSION}",
            path.display()
        )));
    }
    let kind = value.get("kind").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    match kind.as_str() {
        KIND_TESTS => Ok(Artifact::Tests(typed(path, value)?)),
        KIND_MODELS => Ok(Artifact::Models(typed(path, value)?)),
        KIND_FIT => Ok(Artifact::Fit(typed(path, value)?)),
        other => Err(Error::Schema(format!("{}: unknown artifact kind {other:?}", path.display()))),
    }
}

fn typed<T: DeserializeOwned>(path: &Path, value: serde_json::Value) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| Error::Schema(format!("{} does not match its schema: {e}", path.display())))
}

pub fn read_models(path: &Path) -> Result<ModelsArtifact> {
    match read_artifact(path)? {
        Artifact::Models(m) => Ok(m),
        _ => Err(Error::Schema(format!("{} is not a models artifact", path.display()))),
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{} is not a run manifest: {e}", path.display())))?;
    if m.kind != KIND_MANIFEST || m.schema_version != SCHEMA_VERSION {
        return Err(Error::Schema(format!("{} is not a version {SCHEMA_VERSION} manifest", path.display())));
    }
    Ok(m)
}
