//! Scenario configuration, seeded orchestration, persistence and the acceptance suite.
//!
//! A scenario is described by a TOML file (see [`ScenarioConfig`]). Running it
//! produces a [`RunManifest`] plus, when an output directory is configured,
//! CSV tables, JSON-lines reports, binary field files and `manifest.json`.
//! Nothing written depends on wall-clock time or worker count, so identical
//! configs give byte-identical outputs.

mod labs;
mod scenarios;
pub mod suite;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corrector::{CellGrid, MonotoneOptions, Regime};
use crate::error::{Error, Result};
use crate::model::CoefficientModel;
use crate::profile::Profile;
use crate::sigma::{ConvergenceReport, Verdict};
use crate::solvers::{DiscreteField, ScalePair, Source};
use crate::stokes::UzawaOptions;

pub use labs::{FineElliptic, MeanLabConfig, SigmaCheck, SigmaLabConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Elliptic,
    ReiteratedElliptic,
    MonotoneReynolds,
    Stokes,
    SigmaLab,
    MeanvalueLab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    /// Cells per axis of the homogenized solve; defaults to 512 (1D) or 128.
    #[serde(default)]
    pub macro_cells: Option<usize>,
    /// Cells per axis of the periodic y-cell.
    #[serde(default = "default_cell")]
    pub cell: usize,
    /// Cells per axis of the truncated ω-box.
    #[serde(default = "default_cell")]
    pub omega_cells: usize,
    /// Side length L of the truncated ω-box, in units of x.
    #[serde(default = "default_truncation")]
    pub truncation: f64,
    /// Fine-solve cells per ε₂ period; at least 8.
    #[serde(default = "default_per_period")]
    pub fine_per_period: usize,
}

fn default_per_period() -> usize {
    8
}

fn default_cell() -> usize {
    128
}

fn default_truncation() -> f64 {
    32.0
}

impl Default for Grids {
    fn default() -> Self {
        Self {
            macro_cells: None,
            cell: default_cell(),
            omega_cells: default_cell(),
            truncation: default_truncation(),
            fine_per_period: default_per_period(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Largest relative L² gap ‖u_ε − u₀‖/‖u₀‖ accepted at the smallest ε.
    #[serde(default = "default_gap")]
    pub gap: f64,
    /// Relative slack when requiring the gap column to decrease; 0 demands strict decrease.
    #[serde(default)]
    pub slack: f64,
    /// Relative tolerance for `expect.effective` and `expect.coriolis`.
    #[serde(default = "default_expect")]
    pub expect: f64,
}

fn default_gap() -> f64 {
    0.05
}

fn default_expect() -> f64 {
    1e-2
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            gap: default_gap(),
            slack: 0.0,
            expect: default_expect(),
        }
    }
}

/// Reference values checked against the run; absolute tolerance is `tolerances.expect · max(1, |value|)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default)]
    pub effective: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub coriolis: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub kind: ScenarioKind,
    /// Root seed; every ω-sample and probe derives from it.
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Fine scales ε₂, decreasing.
    #[serde(default)]
    pub eps2: Vec<f64>,
    /// Coarse scales ε₁; defaults to √ε₂.
    #[serde(default)]
    pub eps1: Option<Vec<f64>>,
    #[serde(default)]
    pub model: Option<CoefficientModel>,
    #[serde(default)]
    pub regime: Option<Regime>,
    #[serde(default)]
    pub grids: Grids,
    #[serde(default)]
    pub source: Option<Source>,
    /// Body force of the Stokes scenario, one profile per component.
    #[serde(default)]
    pub force: Option<Vec<Profile>>,
    #[serde(default)]
    pub monotone: MonotoneOptions,
    #[serde(default)]
    pub uzawa: UzawaOptions,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub expect: Expectations,
    #[serde(default)]
    pub sigma: Option<SigmaLabConfig>,
    #[serde(default)]
    pub meanvalue: Option<MeanLabConfig>,
    /// Write every fine and homogenized field as a binary file.
    #[serde(default)]
    pub save_fields: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_samples() -> usize {
    16
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form, so formatting and key order do not matter.
    /// SHA-256 of the canonical JSON form. The output location is not part
    /// of the computation and is left out.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.portable()).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    fn portable(&self) -> ScenarioConfig {
        ScenarioConfig {
            output: None,
            ..self.clone()
        }
    }

    pub fn schedule(&self) -> Result<Vec<ScalePair>> {
        let eps1 = match &self.eps1 {
            Some(e) if e.len() != self.eps2.len() => {
                return Err(Error::Config(format!(
                    "eps1 has {} entries but eps2 has {}",
                    e.len(),
                    self.eps2.len()
                )))
            }
            Some(e) => e.clone(),
            None => self.eps2.iter().map(|e| e.sqrt()).collect(),
        };
        let pairs = eps1
            .iter()
            .zip(&self.eps2)
            .enumerate()
            .map(|(i, (&e1, &e2))| {
                ScalePair::new(e1, e2).map_err(|e| {
                    Error::Config(format!("scale pair {i} (eps1 = {e1}, eps2 = {e2}): {e}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(i) = (1..pairs.len()).find(|&i| pairs[i].eps2 >= pairs[i - 1].eps2) {
            return Err(Error::Config(format!(
                "eps2 schedule must decrease: entry {i} ({}) follows {}",
                pairs[i].eps2,
                pairs[i - 1].eps2
            )));
        }
        Ok(pairs)
    }

    pub fn dim(&self) -> usize {
        match (&self.model, &self.sigma, &self.meanvalue) {
            (Some(m), _, _) => m.dim,
            (None, Some(s), _) => s.dim,
            (None, None, Some(m)) => m.dim,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "scenario name {:?} is not a plain file stem",
                self.name
            )));
        }
        self.schedule()?;
        if self.samples == 0 {
            return Err(Error::Config("samples must be positive".into()));
        }
        let needs_model = matches!(
            self.kind,
            ScenarioKind::Elliptic
                | ScenarioKind::ReiteratedElliptic
                | ScenarioKind::MonotoneReynolds
                | ScenarioKind::Stokes
        );
        match &self.model {
            None if needs_model => {
                return Err(Error::Config(format!(
                    "{:?} scenario needs a [model]",
                    self.kind
                )))
            }
            Some(m) => m.check_shapes()?,
            None => {}
        }
        if self.kind == ScenarioKind::Stokes && self.dim() < 2 {
            return Err(Error::Config("Stokes scenarios need dim 2 or 3".into()));
        }
        if self.tolerances.gap <= 0.0
            || self.tolerances.slack < 0.0
            || self.tolerances.expect <= 0.0
        {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        if self.grids.cell < 4 || self.grids.omega_cells < 4 || self.grids.truncation <= 0.0 {
            return Err(Error::Config(
                "cell grids need at least 4 cells and a positive truncation".into(),
            ));
        }
        if self.grids.fine_per_period < 8 {
            return Err(Error::Config(
                "grids.fine_per_period must be at least 8 (h <= eps2/8)".into(),
            ));
        }
        Ok(())
    }

    fn macro_cells(&self) -> usize {
        self.grids
            .macro_cells
            .unwrap_or(if self.dim() == 1 { 512 } else { 128 })
    }

    fn y_cell(&self) -> CellGrid {
        CellGrid::unit(self.dim(), self.grids.cell)
    }

    fn omega_cell(&self) -> CellGrid {
        CellGrid::rve(self.dim(), self.grids.omega_cells, self.grids.truncation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskState {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub id: String,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One line of the ε-study table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub eps1: f64,
    pub eps2: f64,
    /// Successful ω-tasks at this ε.
    pub tasks: usize,
    /// Relative L² gap to the homogenized solution, averaged over ω.
    pub gap: f64,
    pub half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_divergence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_rotation_energy: Option<f64>,
    pub verdict: bool,
}

pub const STUDY_HEADER: &str =
    "scenario,eps1,eps2,tasks,gap,half_width,max_divergence,max_rotation_energy,verdict";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

pub fn study_csv(scenario: &str, rows: &[StudyRow]) -> String {
    let mut s = format!("{STUDY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{scenario},{:e},{:e},{},{:e},{:e},{},{},{}\n",
            r.eps1,
            r.eps2,
            r.tasks,
            r.gap,
            r.half_width,
            opt(r.max_divergence),
            opt(r.max_rotation_energy),
            if r.verdict { "pass" } else { "fail" }
        ));
    }
    s
}

/// Scalar results worth keeping in the manifest itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<Regime>,
    /// Effective tensor (first element for x-dependent models), row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effective_half_width: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coriolis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    pub kind: ScenarioKind,
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub tasks: Vec<TaskStatus>,
    pub artifacts: Vec<String>,
    pub summary: Summary,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Everything a scenario computed, before persistence.
#[derive(Clone, Debug, Default)]
pub struct ScenarioResult {
    pub tasks: Vec<TaskStatus>,
    pub summary: Summary,
    pub study: Vec<StudyRow>,
    pub reports: Vec<ConvergenceReport>,
    pub verdicts: Vec<Verdict>,
    /// Named fields to persist when `save_fields` is set.
    pub fields: Vec<(String, DiscreteField)>,
}

impl ScenarioResult {
    fn verdict(&mut self, name: impl Into<String>, pass: bool, value: f64, tolerance: f64) {
        self.verdicts.push(Verdict {
            name: name.into(),
            pass,
            value,
            tolerance,
        });
    }

    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass) && self.tasks.iter().all(|t| t.state == TaskState::Ok)
    }
}

/// Runs `f` with panics turned into errors, so one bad task cannot take down a sweep.
pub(crate) fn isolated<T>(f: impl FnOnce() -> Result<T>) -> Result<T> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            Err(Error::Invariant(format!("task panicked: {msg}")))
        }
    }
}

/// Executes the configured pipeline in memory.
pub fn execute(config: &ScenarioConfig, schedule: &[ScalePair]) -> Result<ScenarioResult> {
    config.validate()?;
    match config.kind {
        ScenarioKind::Elliptic | ScenarioKind::ReiteratedElliptic => {
            scenarios::elliptic(config, schedule)
        }
        ScenarioKind::MonotoneReynolds => scenarios::monotone(config, schedule),
        ScenarioKind::Stokes => scenarios::stokes(config, schedule),
        ScenarioKind::SigmaLab => labs::sigma_lab(config, schedule),
        ScenarioKind::MeanvalueLab => labs::meanvalue_lab(config),
    }
}

/// Runs `f` on a dedicated pool of `workers` threads (0 = rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Executes the scenario and writes its artifacts into `config.output/<name>/`.
///
/// A module error does not abort persistence: the manifest records the failure
/// and whatever was already computed.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunManifest> {
    config.validate()?;
    let schedule = config.schedule()?;
    let outcome = isolated(|| execute(config, &schedule));
    finish(config, outcome)
}

/// Like [`run_scenario`] with the ε schedule replaced; needs at least three scales.
pub fn convergence_study(config: &ScenarioConfig, eps2: &[f64]) -> Result<(RunManifest, String)> {
    let mut c = config.clone();
    if !eps2.is_empty() {
        c.eps2 = eps2.to_vec();
        c.eps1 = None;
    }
    let schedule = c.schedule()?;
    if schedule.len() < 3 {
        return Err(Error::Config(format!(
            "a convergence study needs at least 3 scales, got {}",
            schedule.len()
        )));
    }
    let outcome = isolated(|| execute(&c, &schedule));
    let table = match &outcome {
        Ok(r) if !r.study.is_empty() => study_csv(&c.name, &r.study),
        Ok(r) => {
            let mut s = format!("{}\n", ConvergenceReport::CSV_HEADER);
            for rep in &r.reports {
                for row in rep.csv_rows() {
                    s.push_str(&row);
                    s.push('\n');
                }
            }
            s
        }
        Err(_) => format!("{STUDY_HEADER}\n"),
    };
    Ok((finish(&c, outcome)?, table))
}

fn finish(config: &ScenarioConfig, outcome: Result<ScenarioResult>) -> Result<RunManifest> {
    let (result, failure) = match outcome {
        Ok(r) => (r, None),
        Err(e) => (ScenarioResult::default(), Some(e.to_string())),
    };
    let mut manifest = RunManifest {
        scenario: config.name.clone(),
        kind: config.kind,
        config_hash: config.hash(),
        version: VERSION.to_string(),
        seed: config.seed,
        tasks: result.tasks.clone(),
        artifacts: Vec::new(),
        summary: result.summary.clone(),
        verdicts: result.verdicts.clone(),
        pass: failure.is_none() && result.pass(),
        failure,
    };
    if let Some(dir) = &config.output {
        manifest.artifacts = persist(&dir.join(&config.name), config, &result, &manifest)?;
    }
    Ok(manifest)
}

fn write(dir: &Path, rel: &str, bytes: &[u8], out: &mut Vec<String>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    out.push(rel.to_string());
    Ok(())
}

fn persist(
    dir: &Path,
    config: &ScenarioConfig,
    result: &ScenarioResult,
    manifest: &RunManifest,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    write(
        dir,
        "config.toml",
        config.portable().to_toml()?.as_bytes(),
        &mut files,
    )?;
    if !result.study.is_empty() {
        write(
            dir,
            "study.csv",
            study_csv(&config.name, &result.study).as_bytes(),
            &mut files,
        )?;
    }
    if !result.reports.is_empty() {
        let mut jsonl = String::new();
        let mut csv = format!("{}\n", ConvergenceReport::CSV_HEADER);
        for r in &result.reports {
            jsonl.push_str(&r.to_json_line());
            jsonl.push('\n');
            for row in r.csv_rows() {
                csv.push_str(&row);
                csv.push('\n');
            }
        }
        write(dir, "reports.jsonl", jsonl.as_bytes(), &mut files)?;
        write(dir, "convergence.csv", csv.as_bytes(), &mut files)?;
    }
    if config.save_fields {
        for (name, f) in &result.fields {
            write(
                dir,
                &format!("fields/{name}.bin"),
                &f.to_bytes(),
                &mut files,
            )?;
        }
    }
    files.push("manifest.json".into());
    files.sort();
    let mut m = manifest.clone();
    m.artifacts = files.clone();
    let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "flat"
kind = "elliptic"
seed = 1
eps2 = [0.0625, 0.03125, 0.015625]

[model]
dim = 1
system = { dim = 1, kind = "periodic-shift" }
tensor = { type = "isotropic", value = { terms = [{ scale = 2.0 }] } }
"#;

    #[test]
    fn parses_and_hashes_stably() {
        let c = ScenarioConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.samples, 16);
        assert_eq!(c.schedule().unwrap().len(), 3);
        let again = ScenarioConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn seed_is_mandatory() {
        let text = MINIMAL.replace("seed = 1\n", "");
        assert!(matches!(
            ScenarioConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_pair_is_named() {
        let text = MINIMAL.replace(
            "eps2 = [0.0625, 0.03125, 0.015625]",
            "eps2 = [0.0625, 0.03125]\neps1 = [0.5, 0.04]",
        );
        let e = ScenarioConfig::from_toml(&text).unwrap_err().to_string();
        assert!(e.contains("scale pair 1") && e.contains("0.04"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace("seed = 1", "seed = 1\nsampels = 3");
        assert!(ScenarioConfig::from_toml(&text).is_err());
    }

    #[test]
    fn panics_become_task_errors() {
        let r: Result<()> = isolated(|| panic!("boom"));
        assert!(r.unwrap_err().to_string().contains("boom"));
    }
}
