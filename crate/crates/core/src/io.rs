//! Field archives and run configuration.
//!
//! An archive is a directory holding `manifest.json` and one raw file per
//! array: 32-bit little-endian floats, row-major with the last axis fastest
//! and the time axis outermost.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{GridSpec, MaterialTable};
use crate::error::{Error, Result};
use crate::forward::{SamplingRanges, SimOptions, Units};
use crate::optimize::{FitOptions, FitSettings, LossWeights, ParamBounds};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const DTYPE: &str = "float32";
const BYTE_ORDER: &str = "little";

/// One named array.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    /// Array from `f64` values, rounded to `f32`.
    pub fn from_f64(name: &str, shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(name, shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn from_mask(name: &str, shape: &[usize], mask: &[bool]) -> Result<Self> {
        Self::new(name, shape, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
    }

    pub fn new(name: &str, shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array {name}: shape {shape:?} holds {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Config(format!("array name {name:?} must be [A-Za-z0-9_-]+")));
        }
        Ok(Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&x| x >= 0.5).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    file: String,
    shape: Vec<usize>,
    dtype: String,
    byte_order: String,
    crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    grid: Option<GridSpec>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    arrays: Vec<Entry>,
}

/// In-memory contents of an archive directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FieldArchive {
    pub grid: Option<GridSpec>,
    pub metadata: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl FieldArchive {
    pub fn new(grid: Option<GridSpec>) -> Self {
        Self {
            grid,
            ..Self::default()
        }
    }

    pub fn push(&mut self, a: NamedArray) -> &mut Self {
        self.arrays.push(a);
        self
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::ShapeMismatch(format!("archive has no array {name}")))
    }

    pub fn grid(&self) -> Result<&GridSpec> {
        self.grid
            .as_ref()
            .ok_or_else(|| Error::ShapeMismatch("archive has no grid".into()))
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `archive` into `dir`, creating it if needed.
pub fn save_archive(dir: &Path, archive: &FieldArchive) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(archive.arrays.len());
    for a in &archive.arrays {
        if entries.iter().any(|e: &Entry| e.name == a.name) {
            return Err(Error::Config(format!("duplicate array {}", a.name)));
        }
        let bytes: Vec<u8> = a.data.iter().flat_map(|x| x.to_le_bytes()).collect();
        let file = format!("{}.f32", a.name);
        write(&dir.join(&file), &bytes)?;
        entries.push(Entry {
            name: a.name.clone(),
            file,
            shape: a.shape.clone(),
            dtype: DTYPE.into(),
            byte_order: BYTE_ORDER.into(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        grid: archive.grid.clone(),
        metadata: archive.metadata.clone(),
        arrays: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Manifest {
        path: dir.join(MANIFEST),
        msg: e.to_string(),
    })?;
    write(&dir.join(MANIFEST), format!("{text}\n").as_bytes())
}

/// Reads and verifies an archive directory.
pub fn load_archive(dir: &Path) -> Result<FieldArchive> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        other => return Err(Error::UnsupportedSchema(format!("schema version {other:?}"))),
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Manifest {
        path: mpath.clone(),
        msg: e.to_string(),
    })?;
    if let Some(g) = &manifest.grid {
        GridSpec::new(g.shape(), g.nt()).map_err(|e| Error::Manifest {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        if e.dtype != DTYPE || e.byte_order != BYTE_ORDER {
            return Err(Error::UnsupportedSchema(format!(
                "array {} has dtype {} / byte order {}; only {DTYPE} / {BYTE_ORDER} is supported",
                e.name, e.dtype, e.byte_order
            )));
        }
        if e.file.contains(['/', '\\']) || e.file.starts_with('.') {
            return Err(Error::Manifest {
                path: mpath.clone(),
                msg: format!("array file {:?} must be a plain file name", e.file),
            });
        }
        let fpath: PathBuf = dir.join(&e.file);
        let bytes = fs::read(&fpath).map_err(|err| Error::io(&fpath, err))?;
        let n: usize = e.shape.iter().product();
        if bytes.len() != 4 * n {
            return Err(Error::ShapeMismatch(format!(
                "{} holds {} bytes, shape {:?} needs {}",
                fpath.display(),
                bytes.len(),
                e.shape,
                4 * n
            )));
        }
        if crc32fast::hash(&bytes) != e.crc32 {
            return Err(Error::ChecksumMismatch(fpath));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        arrays.push(NamedArray {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    Ok(FieldArchive {
        grid: manifest.grid,
        metadata: manifest.metadata,
        arrays,
    })
}

/// Grid section of the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub ndim: usize,
    pub shape: Vec<usize>,
    pub nt: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            ndim: 2,
            shape: vec![64, 64],
            nt: 16,
        }
    }
}

/// Synthetic cohort controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub focal_count: usize,
    pub recurrence_t_end: f64,
    pub min_core_cells: usize,
    pub pet_noise: bool,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            focal_count: 1,
            recurrence_t_end: 1.25,
            min_core_cells: 4,
            pet_noise: true,
        }
    }
}

/// Gradient-check instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub shape: Vec<usize>,
    pub nt: usize,
    pub seed: u64,
    pub step: f64,
    /// Check every this many learnables.
    pub stride: usize,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            shape: vec![8, 8],
            nt: 4,
            seed: 7,
            step: 1e-5,
            stride: 1,
            tolerance: 1e-4,
        }
    }
}

/// Evaluation controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Standard-plan margin in mm.
    pub margin_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { margin_mm: 15.0 }
    }
}

/// Complete run configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub weights: LossWeights,
    pub optimizer: FitOptions,
    /// Explicit nondimensional bounds; derived from `ranges` when absent.
    pub bounds: Option<ParamBounds>,
    pub ranges: SamplingRanges,
    pub units: Units,
    pub materials: MaterialTable,
    pub simulation: SimOptions,
    pub cohort: CohortConfig,
    pub evaluation: EvalConfig,
    pub grad_check: GradCheckConfig,
    pub symmetry_axis: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid: GridConfig::default(),
            weights: LossWeights::default(),
            optimizer: FitOptions::default(),
            bounds: None,
            ranges: SamplingRanges {
                gamma: (0.0, 0.5),
                ..SamplingRanges::default()
            },
            units: Units::default(),
            materials: MaterialTable::default(),
            simulation: SimOptions::default(),
            cohort: CohortConfig::default(),
            evaluation: EvalConfig::default(),
            grad_check: GradCheckConfig::default(),
            symmetry_axis: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        if self.grid.shape.len() != self.grid.ndim {
            return Err(Error::Config(format!(
                "grid.ndim = {} but grid.shape has {} axes",
                self.grid.ndim,
                self.grid.shape.len()
            )));
        }
        GridSpec::new(&self.grid.shape, self.grid.nt).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fitting bounds: explicit ones, else the (γ-widened) sampling ranges
    /// mapped to domain units.
    pub fn param_bounds(&self) -> ParamBounds {
        self.bounds.unwrap_or_else(|| ParamBounds {
            gamma: (0.0, FIT_GAMMA_MAX),
            ..ParamBounds::from_ranges(&self.ranges, &self.units)
        })
    }

    pub fn fit_settings(&self) -> FitSettings {
        FitSettings {
            weights: self.weights,
            bounds: self.param_bounds(),
            materials: self.materials,
            symmetry_axis: self.symmetry_axis,
            options: self.optimizer,
        }
    }

    /// Standard-plan margin in domain units.
    pub fn margin(&self) -> f64 {
        self.units.mm(self.evaluation.margin_mm)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.grid_spec()?;
        if self.symmetry_axis >= spec.ndim() {
            return Err(Error::Config(format!(
                "symmetry_axis {} out of range",
                self.symmetry_axis
            )));
        }
        self.weights.validate()?;
        self.optimizer.validate()?;
        self.ranges.validate()?;
        self.param_bounds().validate()?;
        crate::domain::lame_parameters(&self.materials)?;
        if !(self.units.mm_per_domain > 0.0 && self.units.days_per_unit > 0.0) {
            return Err(Error::Config("units must be positive".into()));
        }
        if !(self.evaluation.margin_mm >= 0.0) {
            return Err(Error::Config("evaluation.margin_mm must be nonnegative".into()));
        }
        if !(self.cohort.focal_count == 1 || self.cohort.focal_count == 3) {
            return Err(Error::Config("cohort.focal_count must be 1 or 3".into()));
        }
        if !(self.cohort.recurrence_t_end >= 1.0) {
            return Err(Error::Config("cohort.recurrence_t_end must be at least 1".into()));
        }
        let sim = &self.simulation;
        if sim.steps == 0 || !(sim.t_end >= 1.0) || !(sim.elastic_tol > 0.0) {
            return Err(Error::Config(
                "simulation needs steps > 0, t_end >= 1, elastic_tol > 0".into(),
            ));
        }
        let gc = &self.grad_check;
        GridSpec::new(&gc.shape, gc.nt).map_err(|e| Error::Config(format!("grad_check: {e}")))?;
        if gc.shape.len() != spec.ndim() || !(gc.step > 0.0) || gc.stride == 0 || !(gc.tolerance > 0.0) {
            return Err(Error::Config(
                "grad_check needs the grid's ndim, step > 0, stride > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Upper end of the fitted tumor-force coupling.
pub const FIT_GAMMA_MAX: f64 = 1.5;

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FieldArchive {
        let mut a = FieldArchive::new(Some(GridSpec::new(&[2, 3], 1).unwrap()));
        a.push(NamedArray::new("c", &[2, 2, 3], (0..12).map(|i| i as f32 * 0.37 - 1.0).collect()).unwrap())
            .push(NamedArray::new("tiny", &[1], vec![f32::MIN_POSITIVE]).unwrap())
            .meta("note", "x");
        a
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let a = sample();
        save_archive(dir.path(), &a).unwrap();
        let b = load_archive(dir.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_file_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_archive(dir.path(), &sample()).unwrap();
        let f = dir.path().join("c.f32");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_archive(dir.path()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn corrupted_file_is_checksum_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_archive(dir.path(), &sample()).unwrap();
        let f = dir.path().join("c.f32");
        let mut bytes = fs::read(&f).unwrap();
        bytes[0] ^= 1;
        fs::write(&f, &bytes).unwrap();
        assert!(matches!(load_archive(dir.path()), Err(Error::ChecksumMismatch(_))));
    }

    #[test]
    fn float64_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        save_archive(dir.path(), &sample()).unwrap();
        let m = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&m).unwrap().replace("float32", "float64");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_archive(dir.path()), Err(Error::UnsupportedSchema(_))));
        let text = fs::read_to_string(&m)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 2");
        fs::write(&m, text).unwrap();
        assert!(matches!(load_archive(dir.path()), Err(Error::UnsupportedSchema(_))));
    }

    #[test]
    fn config_round_trip_and_strictness() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_toml("[weights]\ngrowth = -1.0"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[grid]\nndim = 2\nshape = [64]\nnt = 4"),
            Err(Error::Config(_))
        ));
        let b = cfg.param_bounds();
        assert!((0.5 * (b.theta_up.0 + b.theta_up.1) - 0.525).abs() < 1e-12);
        assert!((cfg.margin() - 0.078125).abs() < 1e-15);
    }
}
