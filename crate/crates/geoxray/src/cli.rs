//! Command-line layer: run configuration with dotted-key overrides, built-in
//! phantoms and attenuation profiles, deterministic on-disk formats (flat
//! little-endian arrays with JSON sidecars, 16-bit PGM previews, SHA-256
//! manifests), and the four verbs `phantom`, `forward`, `invert`, `selftest`.
//!
//! Every output byte is a pure function of the configuration, so rerunning a
//! verb with the same config reproduces each file bit for bit. All writes
//! happen on the main thread after the numerical work is done.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GxError, Result};
use crate::fiber::{self, FullBoundaryData, InfluxData};
use crate::fredholm::{self, NeumannConfig};
use crate::geometry::{self, ConformalMetric, EndpointTable, InfluxCoord};
use crate::hif;
use crate::inversion::{self, ReconStatus, ReconstructionReport};
use crate::xray::{self, AttenuationProfile, Context, GridSpec, ScalarField};

// ---------------------------------------------------------------------------
// Run configuration

fn d_grid_n() -> usize {
    300
}
fn d_boundary_n() -> usize {
    300
}
fn d_n_theta() -> usize {
    64
}
fn d_h_step() -> f64 {
    1e-3
}
fn d_cache_h_step() -> f64 {
    4e-3
}
fn d_phantom() -> String {
    "smooth-gaussians".into()
}
fn d_attenuation() -> String {
    "gaussian".into()
}
fn d_one() -> f64 {
    1.0
}
fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Reconstruction driver selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Neumann,
    Oneshot,
    Doppler,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Neumann => "neumann",
            Method::Oneshot => "oneshot",
            Method::Doppler => "doppler",
        }
    }
}

fn d_metric_kind() -> String {
    "bump-pair".into()
}
fn d_amplitude() -> f64 {
    0.2
}
fn d_center() -> [f64; 2] {
    [0.3, 0.3]
}
fn d_sigma() -> f64 {
    0.25
}

/// Conformal factor e^{2λ}. `bump-pair` is the non-flat reference geometry,
/// λ = A(e^{−|x−c|²/2σ²} − e^{−|x+c|²/2σ²}); `euclidean` sets λ = 0 and is
/// exact for the closed-form oracles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    #[serde(default = "d_metric_kind")]
    pub kind: String,
    #[serde(default = "d_amplitude")]
    pub amplitude: f64,
    #[serde(default = "d_center")]
    pub center: [f64; 2],
    #[serde(default = "d_sigma")]
    pub sigma: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            kind: d_metric_kind(),
            amplitude: d_amplitude(),
            center: d_center(),
            sigma: d_sigma(),
        }
    }
}

impl MetricConfig {
    pub fn build(&self) -> Result<ConformalMetric> {
        match self.kind.as_str() {
            "euclidean" => Ok(ConformalMetric::euclidean()),
            "bump-pair" => Ok(ConformalMetric::bump_pair(
                self.amplitude,
                (self.center[0], self.center[1]),
                self.sigma,
            )),
            other => Err(GxError::Config(format!(
                "unknown metric kind '{other}' (expected euclidean or bump-pair)"
            ))),
        }
    }
}

/// Full run description. Every field has a default, so `{}` is a valid
/// configuration; unknown keys are rejected to catch typos early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Interior fields are sampled on a grid_n × grid_n grid over [−1, 1]².
    #[serde(default = "d_grid_n")]
    pub grid_n: usize,
    /// The influx grid is 2·boundary_n × boundary_n in (β, α).
    #[serde(default = "d_boundary_n")]
    pub boundary_n: usize,
    /// Fiber nodes per base point for phase-space fields; even, at least 8.
    #[serde(default = "d_n_theta")]
    pub n_theta: usize,
    /// Geodesic integrator step for data quadrature and the endpoint table.
    #[serde(default = "d_h_step")]
    pub h_step: f64,
    /// Coarser integrator step for the interior transport cache.
    #[serde(default = "d_cache_h_step")]
    pub cache_h_step: f64,
    #[serde(default)]
    pub neumann: NeumannConfig,
    #[serde(default)]
    pub metric: MetricConfig,
    /// Built-in phantom id; see [`build_phantom`].
    #[serde(default = "d_phantom")]
    pub phantom: String,
    /// Built-in attenuation id; see [`build_attenuation`].
    #[serde(default = "d_attenuation")]
    pub attenuation: String,
    /// Multiplies the built-in attenuation profile.
    #[serde(default = "d_one")]
    pub attenuation_scale: f64,
    #[serde(default)]
    pub method: Method,
    /// Reserved for randomized pipelines; echoed into manifests so reruns
    /// can assert bit-identical outputs.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_value(serde_json::json!({})).expect("empty config uses defaults")
    }
}

impl RunConfig {
    /// Build the geometry context, persisting endpoint tables under
    /// `GEOXRAY_CACHE_DIR` when that variable is set.
    pub fn build_context(&self) -> Result<Context> {
        let metric = self.metric.build()?;
        let cache = cache_dir();
        Context::with_cache(
            metric,
            self.grid_n,
            self.boundary_n,
            self.n_theta,
            self.h_step,
            self.cache_h_step,
            cache.as_deref(),
        )
    }
}

/// Endpoint tables persist under this directory when the variable is set.
pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("GEOXRAY_CACHE_DIR").map(PathBuf::from)
}

/// Parse an optional config file and apply `key.path=value` overrides. The
/// override value is parsed as JSON when possible and kept as a bare string
/// otherwise, so `--set metric.kind=euclidean` and `--set grid_n=129` both
/// read naturally.
pub fn load_config(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let mut value: serde_json::Value = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => serde_json::json!({}),
    };
    if !value.is_object() {
        return Err(GxError::Config("config root must be a JSON object".into()));
    }
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    Ok(serde_json::from_value(value)?)
}

fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| GxError::Config(format!("--set expects key=value, got '{spec}'")))?;
    let leaf: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = match parts.split_last() {
        Some((l, p)) if !l.is_empty() => (l, p),
        _ => return Err(GxError::Config(format!("empty key in --set '{spec}'"))),
    };
    for part in parents {
        let map = node
            .as_object_mut()
            .ok_or_else(|| GxError::Config(format!("'{part}' is not an object in '{key}'")))?;
        node = map
            .entry(part.to_string())
            .or_insert_with(|| serde_json::json!({}));
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| GxError::Config(format!("cannot set '{key}' inside a non-object")))?;
    map.insert(last.to_string(), leaf);
    Ok(())
}

// ---------------------------------------------------------------------------
// Built-in phantoms and attenuation profiles

/// A built-in test object: a scalar source or a vector field pair.
pub enum Phantom {
    Scalar(ScalarField),
    Vector(ScalarField, ScalarField),
}

fn gauss(x: f64, y: f64, cx: f64, cy: f64, s: f64) -> f64 {
    (-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (2.0 * s * s)).exp()
}

/// Three Gaussian bumps of graded widths; negligibly small at the rim.
pub fn smooth_gaussians(x: f64, y: f64) -> f64 {
    gauss(x, y, 0.25, 0.10, 0.16)
        + 0.8 * gauss(x, y, -0.30, -0.20, 0.12)
        + 0.6 * gauss(x, y, -0.05, 0.35, 0.20)
}

/// Disjoint disk, annulus, and small disk with unit-order jumps.
pub fn jumpy_phantom(x: f64, y: f64) -> f64 {
    let d1 = ((x - 0.25) * (x - 0.25) + (y - 0.15) * (y - 0.15)).sqrt();
    let d2 = ((x + 0.30) * (x + 0.30) + (y + 0.25) * (y + 0.25)).sqrt();
    let d3 = ((x + 0.10) * (x + 0.10) + (y - 0.40) * (y - 0.40)).sqrt();
    let mut v = 0.0;
    if d1 <= 0.30 {
        v += 1.0;
    }
    if (0.15..=0.28).contains(&d2) {
        v += 0.7;
    }
    if d3 <= 0.10 {
        v += 0.5;
    }
    v
}

/// Circles (cx, cy, r) across which the built-in phantom jumps; empty for
/// smooth profiles. Used by error localization diagnostics.
pub fn phantom_jump_circles(id: &str) -> Vec<[f64; 3]> {
    match id {
        "jumpy" => vec![
            [0.25, 0.15, 0.30],
            [-0.30, -0.25, 0.15],
            [-0.30, -0.25, 0.28],
            [-0.10, 0.40, 0.10],
        ],
        _ => Vec::new(),
    }
}

/// Circles across which the built-in attenuation jumps.
pub fn attenuation_jump_circles(id: &str) -> Vec<[f64; 3]> {
    match id {
        "jumpy" => vec![[0.10, 0.0, 0.55], [-0.35, 0.30, 0.30]],
        _ => Vec::new(),
    }
}

/// Distance from (x, y) to the nearest of the given circles; +∞ when the
/// list is empty.
pub fn distance_to_circles(x: f64, y: f64, circles: &[[f64; 3]]) -> f64 {
    circles.iter().fold(f64::INFINITY, |m, c| {
        let d = ((x - c[0]) * (x - c[0]) + (y - c[1]) * (y - c[1])).sqrt();
        m.min((d - c[2]).abs())
    })
}

/// Construct a built-in phantom on `grid`. Ids: `smooth-gaussians` (three
/// Gaussian bumps), `jumpy` (disks and an annulus with jumps), `poly-vector`
/// (an affine vector field pair for the Doppler driver), and `metric-lambda`
/// (the log conformal factor of the configured metric, as a scalar field).
pub fn build_phantom(id: &str, grid: GridSpec, metric: &ConformalMetric) -> Result<Phantom> {
    match id {
        "smooth-gaussians" => Ok(Phantom::Scalar(ScalarField::from_real_fn(
            grid,
            smooth_gaussians,
        ))),
        "jumpy" => Ok(Phantom::Scalar(ScalarField::from_real_fn(
            grid,
            jumpy_phantom,
        ))),
        "poly-vector" => Ok(Phantom::Vector(
            ScalarField::from_real_fn(grid, |x, _| 0.3 + 0.5 * x),
            ScalarField::from_real_fn(grid, |_, y| -0.2 + 0.4 * y),
        )),
        "metric-lambda" => Ok(Phantom::Scalar(ScalarField::from_real_fn(grid, |x, y| {
            metric.lambda(x, y)
        }))),
        other => Err(GxError::Config(format!(
            "unknown phantom '{other}' (expected smooth-gaussians, jumpy, poly-vector, or metric-lambda)"
        ))),
    }
}

/// Construct a built-in attenuation profile, multiplied by `scale`. Ids:
/// `zero`, `constant` (0.5), `gaussian` (one wide smooth bump), and `jumpy`
/// (two overlapping disks with jumps, peak value 1.2 in the overlap lens).
pub fn build_attenuation(id: &str, scale: f64, grid: GridSpec) -> Result<AttenuationProfile> {
    match id {
        "zero" => Ok(AttenuationProfile::zero(grid)),
        "constant" => Ok(AttenuationProfile::from_fn(grid, move |_, _| 0.5 * scale)),
        "gaussian" => Ok(AttenuationProfile::from_fn(grid, move |x, y| {
            scale * 0.45 * gauss(x, y, -0.10, 0.10, 0.30)
        })),
        "jumpy" => Ok(AttenuationProfile::from_fn(grid, move |x, y| {
            let mut v = 0.0;
            if (x - 0.10) * (x - 0.10) + y * y <= 0.55 * 0.55 {
                v += 0.95;
            }
            if (x + 0.35) * (x + 0.35) + (y - 0.30) * (y - 0.30) <= 0.30 * 0.30 {
                v += 0.25;
            }
            scale * v
        })),
        other => Err(GxError::Config(format!(
            "unknown attenuation '{other}' (expected zero, constant, gaussian, or jumpy)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// On-disk formats

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One output file as listed in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Format family: array, sidecar, image, image-sidecar, report, iterations.
    pub role: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Per-verb output inventory: a configuration echo, the geometry fingerprint
/// of the endpoint table the run depends on, and a hash per written file.
/// Written last, so a complete manifest vouches for a complete run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub verb: String,
    pub config: RunConfig,
    /// Fingerprint of (metric, integrator step, guard time).
    pub geometry_hash: String,
    pub files: BTreeMap<String, FileEntry>,
}

impl Manifest {
    pub fn new(verb: &str, config: &RunConfig) -> Result<Self> {
        let metric = config.metric.build()?;
        Ok(Manifest {
            verb: verb.to_string(),
            config: config.clone(),
            geometry_hash: format!(
                "{:016x}",
                geometry::table_hash(&metric, config.h_step, geometry::DEFAULT_T_MAX)
            ),
            files: BTreeMap::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.verb));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn emit(dir: &Path, manifest: &mut Manifest, name: &str, role: &str, bytes: &[u8]) -> Result<()> {
    std::fs::write(dir.join(name), bytes)?;
    manifest.files.insert(
        name.to_string(),
        FileEntry {
            role: role.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        },
    );
    Ok(())
}

fn encode_f64_le(vals: impl Iterator<Item = f64>) -> Vec<u8> {
    let mut buf = Vec::new();
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_f64_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}

fn window_of(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if hi > lo {
        (lo, hi)
    } else {
        let c = if lo.is_finite() { lo } else { 0.0 };
        (c - 0.5, c + 0.5)
    }
}

/// 16-bit binary PGM. The affine window [lo, hi] maps to [0, 65535]; pixels
/// are big-endian per the format, everything else in the crate stays
/// little-endian.
fn encode_pgm16(vals: &[f64], rows: usize, cols: usize, window: (f64, f64)) -> Vec<u8> {
    assert_eq!(vals.len(), rows * cols);
    let (lo, hi) = window;
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut buf = format!("P5\n{cols} {rows}\n65535\n").into_bytes();
    for &v in vals {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        buf.extend_from_slice(&(((t * 65535.0).round()) as u16).to_be_bytes());
    }
    buf
}

/// Image-ordered samples of a scalar field: row 0 is y = +1, so previews
/// read with the mathematical orientation.
fn scalar_image_vals(field: &ScalarField) -> Vec<f64> {
    let n = field.grid.n;
    let mut v = Vec::with_capacity(n * n);
    for iy in (0..n).rev() {
        for ix in 0..n {
            v.push(field.values[(iy, ix)].re);
        }
    }
    v
}

fn emit_image(
    dir: &Path,
    manifest: &mut Manifest,
    stem: &str,
    vals: &[f64],
    rows: usize,
    cols: usize,
    orientation: &str,
) -> Result<()> {
    let window = window_of(vals);
    let pgm = encode_pgm16(vals, rows, cols, window);
    emit(dir, manifest, &format!("{stem}.pgm"), "image", &pgm)?;
    let sidecar = serde_json::json!({
        "format": "pgm16",
        "shape": [rows, cols],
        "window": [window.0, window.1],
        "orientation": orientation,
    });
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    emit(
        dir,
        manifest,
        &format!("{stem}.pgm.json"),
        "image-sidecar",
        text.as_bytes(),
    )
}

/// Write `stem.bin` (real parts, row-major little-endian f64), `stem.json`
/// (shape, domain, extrema, hash), and a preview image pair.
fn emit_scalar(dir: &Path, manifest: &mut Manifest, stem: &str, field: &ScalarField) -> Result<()> {
    let n = field.grid.n;
    let bin = encode_f64_le(field.values.iter().map(|z| z.re));
    let sha = sha256_hex(&bin);
    emit(dir, manifest, &format!("{stem}.bin"), "array", &bin)?;
    let flat: Vec<f64> = field.values.iter().map(|z| z.re).collect();
    let (lo, hi) = window_of(&flat);
    let sidecar = serde_json::json!({
        "dtype": "f64-le",
        "layout": "row-major",
        "kind": "scalar-field",
        "shape": [n, n],
        "grid": {"n": n, "range": [-1.0, 1.0], "index": "(iy, ix)"},
        "min": lo,
        "max": hi,
        "sha256": sha,
    });
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    emit(dir, manifest, &format!("{stem}.json"), "sidecar", text.as_bytes())?;
    let img = scalar_image_vals(field);
    emit_image(dir, manifest, stem, &img, n, n, "row 0 at y=+1")
}

/// Write influx data like [`emit_scalar`]: rows are β nodes, columns α nodes.
fn emit_influx(dir: &Path, manifest: &mut Manifest, stem: &str, d: &InfluxData) -> Result<()> {
    let g = d.grid;
    let (nb, na) = (g.n_beta(), g.n_alpha());
    let bin = encode_f64_le(d.values.iter().map(|z| z.re));
    let sha = sha256_hex(&bin);
    emit(dir, manifest, &format!("{stem}.bin"), "array", &bin)?;
    let flat: Vec<f64> = d.values.iter().map(|z| z.re).collect();
    let (lo, hi) = window_of(&flat);
    let sidecar = serde_json::json!({
        "dtype": "f64-le",
        "layout": "row-major",
        "kind": "influx-data",
        "shape": [nb, na],
        "boundary": {
            "n_beta": nb,
            "n_alpha": na,
            "beta_range": [0.0, TAU],
            "alpha_first": g.alpha(0),
            "alpha_last": g.alpha(na - 1),
            "index": "(i_beta, j_alpha)",
        },
        "min": lo,
        "max": hi,
        "sha256": sha,
    });
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    emit(dir, manifest, &format!("{stem}.json"), "sidecar", text.as_bytes())?;
    emit_image(dir, manifest, stem, &flat, nb, na, "row i at beta node i")
}

/// Read a flat little-endian array written by [`emit_influx`], checking the
/// sidecar shape and hash against the file and the expected boundary grid.
fn read_influx(path: &Path, expect: geometry::BoundaryGrid) -> Result<InfluxData> {
    let bytes = std::fs::read(path)?;
    let sidecar_path = path.with_extension("json");
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)?;
    let shape: [usize; 2] = serde_json::from_value(sidecar["shape"].clone())
        .map_err(|_| GxError::Format(format!("{}: missing shape", sidecar_path.display())))?;
    let (nb, na) = (expect.n_beta(), expect.n_alpha());
    if shape != [nb, na] {
        return Err(GxError::GridMismatch(format!(
            "data shape {}×{} does not match the configured boundary grid {nb}×{na}",
            shape[0], shape[1]
        )));
    }
    if let Some(sha) = sidecar["sha256"].as_str() {
        if sha != sha256_hex(&bytes) {
            return Err(GxError::Format(format!(
                "{}: content does not match the sidecar hash",
                path.display()
            )));
        }
    }
    if bytes.len() != nb * na * 8 {
        return Err(GxError::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            nb * na * 8
        )));
    }
    let vals = decode_f64_le(&bytes);
    let mut d = InfluxData::zeros(expect);
    for (slot, v) in d.values.iter_mut().zip(vals) {
        *slot = Complex64::new(v, 0.0);
    }
    Ok(d)
}

fn encode_iterations_csv(report: &ReconstructionReport) -> Vec<u8> {
    let mut s = String::from("iterate,residual_norm,rel_error,step_norm\n");
    let n = report
        .residual_norms
        .len()
        .max(report.errors.len())
        .max(report.step_norms.len());
    let cell = |v: Option<&f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
    for i in 0..n {
        s.push_str(&format!(
            "{},{},{},{}\n",
            i + 1,
            cell(report.residual_norms.get(i)),
            cell(report.errors.get(i)),
            cell(report.step_norms.get(i)),
        ));
    }
    s.into_bytes()
}

// ---------------------------------------------------------------------------
// Verbs

/// Write the configured phantom: source field(s) `f` (or `f1`, `f2`), the
/// attenuation `a`, and the conformal factor `c = e^{−λ}`.
pub fn cmd_phantom(cfg: &RunConfig) -> Result<()> {
    let metric = cfg.metric.build()?;
    let grid = GridSpec::new(cfg.grid_n);
    let phantom = build_phantom(&cfg.phantom, grid, &metric)?;
    let a = build_attenuation(&cfg.attenuation, cfg.attenuation_scale, grid)?;
    let c = ScalarField::from_real_fn(grid, |x, y| (-metric.lambda(x, y)).exp());
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = Manifest::new("phantom", cfg)?;
    match &phantom {
        Phantom::Scalar(f) => emit_scalar(&cfg.out_dir, &mut manifest, "f", f)?,
        Phantom::Vector(f1, f2) => {
            emit_scalar(&cfg.out_dir, &mut manifest, "f1", f1)?;
            emit_scalar(&cfg.out_dir, &mut manifest, "f2", f2)?;
        }
    }
    emit_scalar(&cfg.out_dir, &mut manifest, "a", &a.field)?;
    emit_scalar(&cfg.out_dir, &mut manifest, "c", &c)?;
    let path = manifest.write(&cfg.out_dir)?;
    println!(
        "phantom '{}' on a {}×{} grid, {} files, manifest {}",
        cfg.phantom,
        cfg.grid_n,
        cfg.grid_n,
        manifest.files.len(),
        path.display()
    );
    Ok(())
}

fn synthesize_data(cfg: &RunConfig, ctx: &Context) -> Result<(Phantom, AttenuationProfile, InfluxData)> {
    let phantom = build_phantom(&cfg.phantom, ctx.grid, &ctx.metric)?;
    let a = build_attenuation(&cfg.attenuation, cfg.attenuation_scale, ctx.grid)?;
    let d = match (&phantom, cfg.method) {
        (Phantom::Vector(f1, f2), Method::Doppler) => inversion::forward_vector(f1, f2, &a, ctx)?,
        (Phantom::Scalar(_), Method::Doppler) => {
            return Err(GxError::Config(format!(
                "method doppler needs a vector phantom, got scalar '{}'",
                cfg.phantom
            )))
        }
        (Phantom::Scalar(f), _) => xray::forward_attenuated(f, &a, ctx)?,
        (Phantom::Vector(..), _) => {
            return Err(GxError::Config(format!(
                "method {} needs a scalar phantom, got vector '{}'",
                cfg.method.name(),
                cfg.phantom
            )))
        }
    };
    Ok((phantom, a, d))
}

/// Integrate the attenuated transform of the configured phantom and write
/// the boundary data with its preview and manifest.
pub fn cmd_forward(cfg: &RunConfig) -> Result<()> {
    let ctx = cfg.build_context()?;
    let (_, _, d) = synthesize_data(cfg, &ctx)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = Manifest::new("forward", cfg)?;
    emit_influx(&cfg.out_dir, &mut manifest, "data", &d)?;
    let path = manifest.write(&cfg.out_dir)?;
    let bg = ctx.boundary_grid();
    println!(
        "forward '{}' ({}): {}×{} boundary samples, manifest {}",
        cfg.phantom,
        cfg.method.name(),
        bg.n_beta(),
        bg.n_alpha(),
        path.display()
    );
    Ok(())
}

/// Reconstruct the configured phantom. Data comes from `data_path` when
/// given (a `.bin` with its sidecar, as written by `forward`) and is
/// synthesized from the configuration otherwise; error columns always
/// compare against the configured phantom. Returns the process exit code:
/// 0 when the driver converged or exhausted its budget, 2 when the
/// divergence guard fired. Diagnostics are written in both cases.
pub fn cmd_invert(cfg: &RunConfig, data_path: Option<&Path>) -> Result<i32> {
    let ctx = cfg.build_context()?;
    let phantom = build_phantom(&cfg.phantom, ctx.grid, &ctx.metric)?;
    let a = build_attenuation(&cfg.attenuation, cfg.attenuation_scale, ctx.grid)?;
    let d = match data_path {
        Some(p) => read_influx(p, ctx.boundary_grid())?,
        None => synthesize_data(cfg, &ctx)?.2,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = Manifest::new("invert", cfg)?;
    let report;
    match (&phantom, cfg.method) {
        (Phantom::Scalar(truth), Method::Neumann) => {
            let (est, rep) = inversion::neumann_reconstruct(&d, &a, &ctx, &cfg.neumann, Some(truth))?;
            report = rep;
            emit_scalar(&cfg.out_dir, &mut manifest, "f_est", &est)?;
            let err: Vec<f64> = scalar_image_vals(&est.sub(truth).map(|z| Complex64::new(z.norm(), 0.0)));
            emit_image(&cfg.out_dir, &mut manifest, "error", &err, ctx.grid.n, ctx.grid.n, "row 0 at y=+1")?;
        }
        (Phantom::Scalar(truth), Method::Oneshot) => {
            let (est, rep) = inversion::oneshot_reconstruct(&d, &a, &ctx, &cfg.neumann, Some(truth))?;
            report = rep;
            emit_scalar(&cfg.out_dir, &mut manifest, "f_est", &est)?;
            let err: Vec<f64> = scalar_image_vals(&est.sub(truth).map(|z| Complex64::new(z.norm(), 0.0)));
            emit_image(&cfg.out_dir, &mut manifest, "error", &err, ctx.grid.n, ctx.grid.n, "row 0 at y=+1")?;
        }
        (Phantom::Vector(t1, t2), Method::Doppler) => {
            let (e1, e2, rep) =
                inversion::doppler_reconstruct(&d, &a, &ctx, &cfg.neumann, Some((t1, t2)))?;
            report = rep;
            emit_scalar(&cfg.out_dir, &mut manifest, "f1_est", &e1)?;
            emit_scalar(&cfg.out_dir, &mut manifest, "f2_est", &e2)?;
            let d1 = e1.sub(t1);
            let d2 = e2.sub(t2);
            let joint = d1.map(|z| Complex64::new(z.norm_sqr(), 0.0))
                .add(&d2.map(|z| Complex64::new(z.norm_sqr(), 0.0)))
                .map(|z| Complex64::new(z.re.sqrt(), 0.0));
            let err = scalar_image_vals(&joint);
            emit_image(&cfg.out_dir, &mut manifest, "error", &err, ctx.grid.n, ctx.grid.n, "row 0 at y=+1")?;
        }
        _ => {
            return Err(GxError::Config(format!(
                "method {} and phantom '{}' are incompatible",
                cfg.method.name(),
                cfg.phantom
            )))
        }
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(&cfg.out_dir, &mut manifest, "report.json", "report", text.as_bytes())?;
    emit(
        &cfg.out_dir,
        &mut manifest,
        "iterations.csv",
        "iterations",
        &encode_iterations_csv(&report),
    )?;
    manifest.write(&cfg.out_dir)?;
    let status = match report.status {
        ReconStatus::Converged => "converged",
        ReconStatus::Maxed => "stopped at the iteration budget",
        ReconStatus::Diverged => "diverged (guard fired)",
    };
    match report.errors.last() {
        Some(e) => println!(
            "invert ({}): {status}, final interior rel error {:.2}%",
            cfg.method.name(),
            100.0 * e
        ),
        None => println!("invert ({}): {status}", cfg.method.name()),
    }
    Ok(if report.status == ReconStatus::Diverged { 2 } else { 0 })
}

// ---------------------------------------------------------------------------
// Selftest

struct CheckRow {
    name: &'static str,
    measured: f64,
    bound: f64,
}

impl CheckRow {
    fn pass(&self) -> bool {
        self.measured.is_finite() && self.measured <= self.bound
    }
}

fn push_row(rows: &mut Vec<CheckRow>, name: &'static str, measured: f64, bound: f64) {
    let row = CheckRow { name, measured, bound };
    println!(
        "{:<34} {:>12.4e}  <= {:>8.1e}  {}",
        row.name,
        row.measured,
        row.bound,
        if row.pass() { "PASS" } else { "FAIL" }
    );
    rows.push(row);
}

fn selftest_flow_residual(ctx: &Context, a: &AttenuationProfile, w: &hif::IntegratingFactor) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let stride = 15usize;
    let delta = stride as f64 * ctx.h_step;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for _ in 0..20 {
        let beta = rng.random::<f64>() * TAU;
        let alpha = (rng.random::<f64>() - 0.5) * 2.4;
        let start = InfluxCoord { beta, alpha }.phase_point();
        let Ok(path) = geometry::trace_geodesic(&ctx.metric, &start, ctx.h_step, ctx.t_max) else {
            continue;
        };
        let p = &path.samples;
        let mut i = stride;
        while i + stride < p.len() {
            let (lo, mid, hi) = (&p[i - stride], &p[i], &p[i + stride]);
            if mid.x * mid.x + mid.y * mid.y < 0.8
                && lo.x * lo.x + lo.y * lo.y < 0.95
                && hi.x * hi.x + hi.y * hi.y < 0.95
            {
                let dw = (w.interior.sample(hi.x, hi.y, hi.theta)
                    - w.interior.sample(lo.x, lo.y, lo.theta))
                    / (2.0 * delta);
                sq_sum += (dw + Complex64::from(a.eval(mid.x, mid.y))).norm_sqr();
                count += 1;
            }
            i += stride;
        }
    }
    if count == 0 {
        return f64::INFINITY;
    }
    (sq_sum / count as f64).sqrt() / a.max_abs()
}

/// Run the reduced-size invariant suites (65×65 interior, 128×64 boundary)
/// and print one pass/fail row per check with the measured value. Problem
/// sizes are fixed; only `GEOXRAY_CACHE_DIR` affects the run. Returns the
/// process exit code: 0 when every check passes, 1 otherwise.
pub fn cmd_selftest() -> Result<i32> {
    println!("selftest: 65×65 interior grid, 128×64 influx grid, 64 fiber modes");
    let cache = cache_dir();
    let flat = Context::with_cache(ConformalMetric::euclidean(), 65, 64, 64, 2e-3, 4e-3, cache.as_deref())?;
    let curved = Context::with_cache(
        ConformalMetric::bump_pair(0.2, (0.3, 0.3), 0.25),
        65,
        64,
        64,
        2e-3,
        4e-3,
        cache.as_deref(),
    )?;
    let m = &flat.metric;
    let bg = flat.boundary_grid();
    let mut rows = Vec::new();

    // Closed-form geometry oracles on the flat disk.
    let mut tau_err: f64 = 0.0;
    let mut scat_err: f64 = 0.0;
    for i in 0..bg.n_beta() {
        for j in 0..bg.n_alpha() {
            let (beta, alpha) = (bg.beta(i), bg.alpha(j));
            tau_err = tau_err.max((flat.table.tau[(i, j)] - 2.0 * alpha.cos()).abs());
            let b1 = geometry::wrap_to_pi(flat.table.beta1[(i, j)] - (beta + PI_CONST + 2.0 * alpha));
            scat_err = scat_err.max(b1.abs() + (flat.table.alpha1[(i, j)] + alpha).abs());
        }
    }
    push_row(&mut rows, "exit-time-chord-law", tau_err, 1e-4);
    push_row(&mut rows, "scattering-antipodal-law", scat_err, 1e-4);

    let one = ScalarField::from_real_fn(flat.grid, |_, _| 1.0);
    let d_one = xray::forward(&one, &flat)?;
    let mut fwd_err: f64 = 0.0;
    for i in 0..bg.n_beta() {
        for j in 0..bg.n_alpha() {
            fwd_err = fwd_err.max((d_one.values[(i, j)].re - 2.0 * bg.alpha(j).cos()).abs());
        }
    }
    push_row(&mut rows, "constant-forward-chord", fwd_err, 1e-4);

    // Flow fundamental theorem: integrating a derivative telescopes to the
    // boundary difference.
    let u_fn = |x: f64, y: f64| (0.8 * x).exp() * (1.0 + 0.5 * y);
    let lhs = xray::forward_integrand(
        |x, y, th| {
            let ux = 0.8 * (0.8 * x).exp() * (1.0 + 0.5 * y);
            let uy = 0.5 * (0.8 * x).exp();
            Complex64::new(th.cos() * ux + th.sin() * uy, 0.0)
        },
        None,
        &flat,
    )?;
    let ub = FullBoundaryData::from_fn(bg, |beta, _| Complex64::new(u_fn(beta.cos(), beta.sin()), 0.0));
    let rhs = fiber::apply_a_star(&ub, &flat.table, -1.0);
    push_row(
        &mut rows,
        "transport-ftc",
        lhs.add(&rhs).norm_mu(m) / rhs.norm_mu(m),
        0.01,
    );

    // Fiberwise Hilbert transform squares to −Id off the fiber mean.
    let fb = FullBoundaryData::from_fn(bg, |beta, theta| {
        Complex64::new(
            beta.sin() + 0.4 * (3.0 * beta).cos() * theta.cos(),
            0.3 * (2.0 * theta - beta).sin(),
        )
    });
    let invol = fb
        .hilbert()
        .hilbert()
        .add(&fb)
        .sub(&fb.pi0_component())
        .max_abs()
        / fb.max_abs();
    push_row(&mut rows, "hilbert-involution", invol, 1e-12);

    let smooth_d = InfluxData::from_fn(bg, |beta, alpha| {
        Complex64::new((beta.sin() + 0.4 * (3.0 * beta).cos()) * alpha.cos().powi(2), 0.0)
    });
    let doubled = fiber::apply_a_star(&fiber::apply_a_plus(&smooth_d, &flat.table), &flat.table, 1.0);
    push_row(
        &mut rows,
        "fold-adjoint-doubling",
        doubled.sub(&smooth_d.scaled(2.0.into())).norm_mu(m) / (2.0 * smooth_d.norm_mu(m)),
        0.03,
    );

    let (dp, dm) = fiber::project_v_parts(&smooth_d, &flat.table);
    let cross = dp.inner_mu(&dm, m).norm()
        / (dp.norm_mu(m) * dm.norm_mu(m)).max(f64::MIN_POSITIVE);
    push_row(&mut rows, "parity-split-orthogonality", cross, 0.02);

    let f_smooth = ScalarField::from_real_fn(flat.grid, smooth_gaussians);
    let d_pair = InfluxData::from_fn(bg, |beta, alpha| {
        Complex64::new(beta.sin() + 0.4 * (3.0 * beta).cos(), 0.0) * alpha.cos().powi(2)
    });
    let lhs0 = xray::forward(&f_smooth, &flat)?.inner_mu(&d_pair, m);
    let rhs0 = f_smooth.inner(&xray::backproject(&d_pair, &flat), m);
    let scale0 = f_smooth.norm_l2(m) * d_pair.norm_mu(m);
    push_row(&mut rows, "adjoint-pairing-zero", (lhs0 - rhs0).norm() / scale0, 0.02);

    let h_smooth = ScalarField::from_real_fn(flat.grid, |x, y| {
        smooth_gaussians(x, y) * (1.0 - x * x - y * y).max(0.0)
    });
    let lhs1 = xray::forward_perp(&h_smooth, &flat)?.inner_mu(&d_pair, m);
    let rhs1 = h_smooth.inner(&xray::backproject_perp(&d_pair, &flat), m);
    let scale1 = h_smooth.norm_l2(m) * d_pair.norm_mu(m);
    push_row(&mut rows, "adjoint-pairing-perp", (lhs1 - rhs1).norm() / scale1, 0.03);

    let filtered = fredholm::filtered_bp_perp(&xray::forward(&f_smooth, &flat)?, &flat);
    push_row(
        &mut rows,
        "fredholm-filter-identity",
        filtered.relative_error(&f_smooth, m, 2),
        0.2,
    );

    // Integrating factor on the curved disk: flow derivative, parity, and
    // holomorphy.
    let a_smooth = AttenuationProfile::from_fn(curved.grid, |x, y| {
        let r2 = x * x + y * y;
        let cut = (1.0 - r2 / 0.81).max(0.0);
        0.6 * (-((x - 0.15).powi(2) + (y + 0.1).powi(2)) / 0.1).exp() * cut * cut
    });
    let w = hif::integrating_factor(&a_smooth, &curved, &NeumannConfig::default())?;
    push_row(
        &mut rows,
        "integrating-factor-flow-rms",
        selftest_flow_residual(&curved, &a_smooth, &w),
        0.05,
    );
    push_row(
        &mut rows,
        "integrating-factor-oddness",
        w.interior.odd_parity_residue(),
        0.03,
    );
    push_row(
        &mut rows,
        "integrating-factor-holomorphy",
        w.exp_interior().negative_mode_energy_fraction().sqrt(),
        0.05,
    );

    // A cache file with a clobbered magic header must be rejected, not
    // silently rebuilt.
    let tmp = std::env::temp_dir().join(format!("geoxray-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&tmp)?;
    let metric = ConformalMetric::euclidean();
    EndpointTable::load_or_build(&metric, 8, 5e-3, 10.0, Some(&tmp))?;
    let name = EndpointTable::cache_file_name(geometry::table_hash(&metric, 5e-3, 10.0), 8);
    let cache_file = tmp.join(name);
    let mut bytes = std::fs::read(&cache_file)?;
    bytes[..4].copy_from_slice(b"XXXX");
    std::fs::write(&cache_file, &bytes)?;
    let rejected = matches!(
        EndpointTable::load_or_build(&metric, 8, 5e-3, 10.0, Some(&tmp)),
        Err(GxError::Format(_))
    );
    let _ = std::fs::remove_dir_all(&tmp);
    push_row(
        &mut rows,
        "endpoint-cache-bad-magic",
        if rejected { 0.0 } else { 1.0 },
        0.5,
    );

    // Two independently built contexts must produce identical bytes.
    let run_once = || -> Result<Vec<u8>> {
        let ctx = Context::new(ConformalMetric::euclidean(), 33, 12, 16, 2e-3)?;
        let f = ScalarField::from_real_fn(ctx.grid, smooth_gaussians);
        Ok(encode_f64_le(xray::forward(&f, &ctx)?.values.iter().map(|z| z.re)))
    };
    let identical = run_once()? == run_once()?;
    push_row(
        &mut rows,
        "forward-determinism",
        if identical { 0.0 } else { 1.0 },
        0.5,
    );

    let failed = rows.iter().filter(|r| !r.pass()).count();
    println!("selftest: {} checks, {} failed", rows.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}

const PI_CONST: f64 = std::f64::consts::PI;

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Parser)]
#[command(
    name = "geoxray",
    version,
    about = "Attenuated geodesic X-ray transforms on a conformal disk"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set grid_n=129 --set metric.kind=euclidean.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Write the configured phantom: source, attenuation, conformal factor.
    Phantom(CommonArgs),
    /// Integrate the attenuated transform of the configured phantom.
    Forward(CommonArgs),
    /// Reconstruct the phantom and write per-iteration diagnostics.
    Invert {
        #[command(flatten)]
        common: CommonArgs,
        /// Boundary data from a forward run; synthesized from the
        /// configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run reduced-size invariant checks and print a pass/fail table.
    Selftest(CommonArgs),
}

/// Parse arguments, run the requested verb, and return the process exit
/// code: 0 success, 1 error, 2 guard-detected divergence.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let outcome = match cli.verb {
        Verb::Phantom(c) => load_config(c.config.as_deref(), &c.set)
            .and_then(|cfg| cmd_phantom(&cfg))
            .map(|()| 0),
        Verb::Forward(c) => load_config(c.config.as_deref(), &c.set)
            .and_then(|cfg| cmd_forward(&cfg))
            .map(|()| 0),
        Verb::Invert { common, data } => load_config(common.config.as_deref(), &common.set)
            .and_then(|cfg| cmd_invert(&cfg, data.as_deref())),
        Verb::Selftest(c) => load_config(c.config.as_deref(), &c.set).and_then(|_| cmd_selftest()),
    };
    match outcome {
        Ok(code) => code,
        Err(e @ GxError::Diverged { .. }) => {
            eprintln!("diverged: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
