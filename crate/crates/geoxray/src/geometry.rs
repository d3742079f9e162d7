//! Disk geometry: conformal metric, geodesic tracing, the influx
//! parameterization of boundary rays, and the cached endpoint table.
//!
//! The manifold is the closed unit disk with metric e^{2λ(x)}(dx² + dy²),
//! λ given in closed form as a sum of Gaussian bumps. Unit-speed geodesics
//! are integrated in the angular form
//!
//! ```text
//!   ẋ = e^{−λ} cos θ,   ẏ = e^{−λ} sin θ,
//!   θ̇ = e^{−λ} (∂_y λ cos θ − ∂_x λ sin θ),
//! ```
//!
//! with fixed-step RK4 and a bisected partial step at the boundary crossing.
//! Inward-pointing boundary directions are parameterized by (β, α): the ray
//! starts at (cos β, sin β) with direction θ = β + π + α, α ∈ (−π/2, π/2).

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{GxError, Result};

/// Default RK4 step in flow time.
pub const DEFAULT_H_STEP: f64 = 1e-3;
/// Non-trapping guard: a geodesic still inside after this flow time is an error.
pub const DEFAULT_T_MAX: f64 = 10.0;
/// Boundary-hit tolerance on |x|² − 1 for the bisected exit step.
const EXIT_F_TOL: f64 = 1e-12;
/// Slack admitted on |x|² when validating that a start point is in the disk.
const DISK_SLACK: f64 = 1e-9;

/// Wrap an angle into (−π, π].
#[inline]
pub fn wrap_to_pi(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Wrap an angle into [0, 2π).
#[inline]
pub fn wrap_to_2pi(a: f64) -> f64 {
    a.rem_euclid(TAU)
}

/// One isotropic Gaussian bump contributing to the conformal exponent λ.
#[derive(Clone, Copy, Debug)]
pub struct GaussianBump {
    pub amplitude: f64,
    pub center: (f64, f64),
    pub sigma: f64,
}

/// Conformal factor e^{2λ} with λ a sum of Gaussian bumps. An empty sum is
/// the Euclidean disk.
#[derive(Clone, Debug)]
pub struct ConformalMetric {
    bumps: Vec<GaussianBump>,
}

impl ConformalMetric {
    pub fn euclidean() -> Self {
        Self { bumps: Vec::new() }
    }

    /// Antisymmetric pair: +amplitude at `center`, −amplitude at −`center`.
    /// Models a low sound-speed region near `center` (c = e^{−λ} < 1 there)
    /// and a mirrored high-speed region.
    pub fn bump_pair(amplitude: f64, center: (f64, f64), sigma: f64) -> Self {
        Self {
            bumps: vec![
                GaussianBump { amplitude, center, sigma },
                GaussianBump {
                    amplitude: -amplitude,
                    center: (-center.0, -center.1),
                    sigma,
                },
            ],
        }
    }

    pub fn from_bumps(bumps: Vec<GaussianBump>) -> Self {
        Self { bumps }
    }

    pub fn is_euclidean(&self) -> bool {
        self.bumps.is_empty()
    }

    pub fn lambda(&self, x: f64, y: f64) -> f64 {
        let mut lam = 0.0;
        for b in &self.bumps {
            let dx = x - b.center.0;
            let dy = y - b.center.1;
            let s2 = b.sigma * b.sigma;
            lam += b.amplitude * (-0.5 * (dx * dx + dy * dy) / s2).exp();
        }
        lam
    }

    /// Fused (e^{−λ}, ∂_x λ, ∂_y λ); the tracer hot path.
    #[inline]
    pub fn conformal_data(&self, x: f64, y: f64) -> (f64, f64, f64) {
        if self.bumps.is_empty() {
            return (1.0, 0.0, 0.0);
        }
        let (mut lam, mut lx, mut ly) = (0.0, 0.0, 0.0);
        for b in &self.bumps {
            let dx = x - b.center.0;
            let dy = y - b.center.1;
            let inv_s2 = 1.0 / (b.sigma * b.sigma);
            let e = b.amplitude * (-0.5 * (dx * dx + dy * dy) * inv_s2).exp();
            lam += e;
            lx -= dx * inv_s2 * e;
            ly -= dy * inv_s2 * e;
        }
        ((-lam).exp(), lx, ly)
    }

    pub fn grad_lambda(&self, x: f64, y: f64) -> (f64, f64) {
        let (_, lx, ly) = self.conformal_data(x, y);
        (lx, ly)
    }

    pub fn laplacian_lambda(&self, x: f64, y: f64) -> f64 {
        let mut acc = 0.0;
        for b in &self.bumps {
            let dx = x - b.center.0;
            let dy = y - b.center.1;
            let inv_s2 = 1.0 / (b.sigma * b.sigma);
            let r2 = dx * dx + dy * dy;
            let e = b.amplitude * (-0.5 * r2 * inv_s2).exp();
            acc += e * (r2 * inv_s2 - 2.0) * inv_s2;
        }
        acc
    }

    /// Gaussian curvature κ = −e^{−2λ} Δλ.
    pub fn curvature(&self, x: f64, y: f64) -> f64 {
        let lam = self.lambda(x, y);
        -(-2.0 * lam).exp() * self.laplacian_lambda(x, y)
    }

    pub fn sound_speed(&self, x: f64, y: f64) -> f64 {
        (-self.lambda(x, y)).exp()
    }

    /// Pointwise metric report at a point of the closed disk.
    pub fn eval(&self, x: f64, y: f64) -> Result<MetricEval> {
        if x * x + y * y > 1.0 + DISK_SLACK {
            return Err(GxError::Domain(format!(
                "metric evaluation outside the closed disk: ({x}, {y})"
            )));
        }
        Ok(MetricEval {
            lambda: self.lambda(x, y),
            grad_lambda: self.grad_lambda(x, y),
            curvature: self.curvature(x, y),
            sound_speed: self.sound_speed(x, y),
        })
    }

    /// Deterministic fingerprint of the bump parameters (cache keying).
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.bumps.len() as u64);
        for b in &self.bumps {
            h.write_f64(b.amplitude);
            h.write_f64(b.center.0);
            h.write_f64(b.center.1);
            h.write_f64(b.sigma);
        }
        h.finish()
    }
}

impl Default for ConformalMetric {
    /// The standard bump pair: amplitude 0.2, center (0.3, 0.3), width 0.25.
    fn default() -> Self {
        Self::bump_pair(0.2, (0.3, 0.3), 0.25)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricEval {
    pub lambda: f64,
    pub grad_lambda: (f64, f64),
    pub curvature: f64,
    pub sound_speed: f64,
}

/// FNV-1a, used for cache fingerprints only.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write_u8(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x100000001b3);
    }
    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.write_u8(b);
        }
    }
    fn write_f64(&mut self, v: f64) {
        self.write_u64(v.to_bits());
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Key identifying an endpoint table: metric parameters plus integrator setup.
pub fn table_hash(metric: &ConformalMetric, h_step: f64, t_max: f64) -> u64 {
    let mut h = Fnv::new();
    h.write_u64(metric.fingerprint());
    h.write_f64(h_step);
    h.write_f64(t_max);
    h.finish()
}

/// Point of the unit sphere bundle in isothermal coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhasePoint {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Inward boundary ray: start (cos β, sin β), direction β + π + α.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InfluxCoord {
    pub beta: f64,
    pub alpha: f64,
}

impl InfluxCoord {
    pub fn phase_point(&self) -> PhasePoint {
        PhasePoint {
            x: self.beta.cos(),
            y: self.beta.sin(),
            theta: wrap_to_2pi(self.beta + PI + self.alpha),
        }
    }

    /// Influx density μ = cos α (vanishes at grazing incidence).
    pub fn weight(&self) -> f64 {
        self.alpha.cos()
    }
}

/// Boundary crossing: position angle β and the forward direction θ there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryHit {
    pub beta: f64,
    pub theta: f64,
}

impl BoundaryHit {
    /// Influx coordinates of the direction-reversed point (x, −v).
    /// For an exit hit this is the antipodal influx image of the ray.
    pub fn reversed_influx(&self) -> InfluxCoord {
        InfluxCoord {
            beta: self.beta,
            alpha: wrap_to_pi(self.theta - self.beta),
        }
    }
}

/// Traced geodesic: samples at uniform spacing `h_step` plus the bisected
/// boundary point appended last, so `exit_time` equals
/// (samples.len() − 2) · h_step + the final partial step.
#[derive(Clone, Debug)]
pub struct GeodesicPath {
    pub samples: Vec<PhasePoint>,
    pub h_step: f64,
    pub exit_time: f64,
    pub exit: BoundaryHit,
}

#[inline]
fn rhs(metric: &ConformalMetric, s: &[f64; 3]) -> [f64; 3] {
    let (e, lx, ly) = metric.conformal_data(s[0], s[1]);
    let (sin_t, cos_t) = s[2].sin_cos();
    [e * cos_t, e * sin_t, e * (ly * cos_t - lx * sin_t)]
}

#[inline]
fn rk4_step(metric: &ConformalMetric, s: &[f64; 3], h: f64) -> [f64; 3] {
    let k1 = rhs(metric, s);
    let s2 = [
        s[0] + 0.5 * h * k1[0],
        s[1] + 0.5 * h * k1[1],
        s[2] + 0.5 * h * k1[2],
    ];
    let k2 = rhs(metric, &s2);
    let s3 = [
        s[0] + 0.5 * h * k2[0],
        s[1] + 0.5 * h * k2[1],
        s[2] + 0.5 * h * k2[2],
    ];
    let k3 = rhs(metric, &s3);
    let s4 = [s[0] + h * k3[0], s[1] + h * k3[1], s[2] + h * k3[2]];
    let k4 = rhs(metric, &s4);
    [
        s[0] + h / 6.0 * (k1[0] + 2.0 * (k2[0] + k3[0]) + k4[0]),
        s[1] + h / 6.0 * (k1[1] + 2.0 * (k2[1] + k3[1]) + k4[1]),
        s[2] + h / 6.0 * (k1[2] + 2.0 * (k2[2] + k3[2]) + k4[2]),
    ]
}

#[inline]
fn norm2(s: &[f64; 3]) -> f64 {
    s[0] * s[0] + s[1] * s[1]
}

/// Bisect the partial step δ ∈ [0, |h|] at which the RK4 sub-step from `s`
/// crosses |x|² = 1. `s` must satisfy |x|² ≤ 1, the full step must land at
/// |x|² ≥ 1. Returns (δ, crossing state).
fn bisect_exit(metric: &ConformalMetric, s: &[f64; 3], h_signed: f64) -> (f64, [f64; 3]) {
    let sign = h_signed.signum();
    let mut lo = 0.0;
    let mut hi = h_signed.abs();
    let mut state = rk4_step(metric, s, h_signed);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let probe = rk4_step(metric, s, sign * mid);
        let f = norm2(&probe) - 1.0;
        if f >= 0.0 {
            hi = mid;
            state = probe;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-14 || f.abs() <= EXIT_F_TOL {
            if f >= 0.0 {
                state = probe;
            }
            break;
        }
    }
    (hi, state)
}

/// March a geodesic (forward for h > 0, reversed flow for h < 0) until it
/// leaves the disk, invoking `on_segment(prev, next, dt)` for every completed
/// sub-interval including the bisected final one. Returns the crossing and
/// the total unsigned flow time.
pub(crate) fn march_to_boundary<F>(
    metric: &ConformalMetric,
    start: &PhasePoint,
    h_signed: f64,
    t_max: f64,
    mut on_segment: F,
) -> Result<(BoundaryHit, f64)>
where
    F: FnMut(&[f64; 3], &[f64; 3], f64),
{
    let mut s = [start.x, start.y, start.theta];
    if norm2(&s) > 1.0 + DISK_SLACK {
        return Err(GxError::Domain(format!(
            "trace start outside the closed disk: ({}, {})",
            start.x, start.y
        )));
    }
    let mut t = 0.0;
    loop {
        let s_next = rk4_step(metric, &s, h_signed);
        if !(s_next[0].is_finite() && s_next[1].is_finite() && s_next[2].is_finite()) {
            return Err(GxError::Numeric(format!(
                "non-finite state while tracing from ({}, {}, {})",
                start.x, start.y, start.theta
            )));
        }
        if norm2(&s_next) >= 1.0 {
            let (delta, s_exit) = bisect_exit(metric, &s, h_signed);
            on_segment(&s, &s_exit, delta);
            let hit = BoundaryHit {
                beta: wrap_to_2pi(s_exit[1].atan2(s_exit[0])),
                theta: wrap_to_2pi(s_exit[2]),
            };
            return Ok((hit, t + delta));
        }
        on_segment(&s, &s_next, h_signed.abs());
        t += h_signed.abs();
        s = s_next;
        if t > t_max {
            return Err(GxError::Trapped {
                x: start.x,
                y: start.y,
                theta: start.theta,
                t_max,
            });
        }
    }
}

/// Forward exit of the geodesic through `start`; no path storage.
pub fn trace_exit(
    metric: &ConformalMetric,
    start: &PhasePoint,
    h_step: f64,
    t_max: f64,
) -> Result<(BoundaryHit, f64)> {
    march_to_boundary(metric, start, h_step, t_max, |_, _, _| {})
}

/// Forward trace retaining the sampled path.
pub fn trace_geodesic(
    metric: &ConformalMetric,
    start: &PhasePoint,
    h_step: f64,
    t_max: f64,
) -> Result<GeodesicPath> {
    let mut samples = vec![*start];
    let (exit, exit_time) = march_to_boundary(metric, start, h_step, t_max, |_, next, _| {
        samples.push(PhasePoint {
            x: next[0],
            y: next[1],
            theta: next[2],
        });
    })?;
    Ok(GeodesicPath {
        samples,
        h_step,
        exit_time,
        exit,
    })
}

/// Backward trace to the influx boundary: the influx coordinates of the
/// geodesic through `p` and the flow time from the influx point to `p`.
pub fn trace_to_influx(
    metric: &ConformalMetric,
    p: &PhasePoint,
    h_step: f64,
    t_max: f64,
) -> Result<(InfluxCoord, f64)> {
    let (hit, t) = march_to_boundary(metric, p, -h_step, t_max, |_, _, _| {})?;
    // The state θ keeps the forward orientation, so at the backward exit it
    // points into the disk and (β, θ) is an influx point.
    Ok((
        InfluxCoord {
            beta: hit.beta,
            alpha: wrap_to_pi(hit.theta - hit.beta - PI),
        },
        t,
    ))
}

/// Discrete boundary layout shared by influx data (β_i, α_j) and full
/// boundary data (β_i, θ_k): β has 2·n_base nodes on [0, 2π), α has n_base
/// cell-centered nodes strictly inside (−π/2, π/2), θ has 2·n_base nodes on
/// [0, 2π) so that θ ↦ θ + π is an exact index shift by n_base.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BoundaryGrid {
    pub n_base: usize,
}

impl BoundaryGrid {
    pub fn new(n_base: usize) -> Self {
        assert!(n_base >= 4, "boundary grid needs at least 4 alpha nodes");
        Self { n_base }
    }

    pub fn n_beta(&self) -> usize {
        2 * self.n_base
    }
    pub fn n_alpha(&self) -> usize {
        self.n_base
    }
    pub fn n_theta(&self) -> usize {
        2 * self.n_base
    }

    pub fn d_beta(&self) -> f64 {
        PI / self.n_base as f64
    }
    pub fn d_alpha(&self) -> f64 {
        PI / self.n_base as f64
    }
    pub fn d_theta(&self) -> f64 {
        PI / self.n_base as f64
    }

    pub fn beta(&self, i: usize) -> f64 {
        i as f64 * self.d_beta()
    }
    pub fn alpha(&self, j: usize) -> f64 {
        -FRAC_PI_2 + (j as f64 + 0.5) * self.d_alpha()
    }
    pub fn theta(&self, k: usize) -> f64 {
        k as f64 * self.d_theta()
    }

    pub fn influx_coord(&self, i: usize, j: usize) -> InfluxCoord {
        InfluxCoord {
            beta: self.beta(i),
            alpha: self.alpha(j),
        }
    }

    /// Signed incidence angle of the full-boundary node (β_i, θ_k):
    /// inward iff |result| < π/2.
    pub fn incidence(&self, i: usize, k: usize) -> f64 {
        wrap_to_pi(self.theta(k) - self.beta(i) - PI)
    }

    /// Periodic cell lookup along β: (lower index, fraction).
    pub fn beta_cell(&self, beta: f64) -> (usize, f64) {
        let nf = wrap_to_2pi(beta) / self.d_beta();
        let mut i0 = nf.floor() as usize;
        let mut t = nf - i0 as f64;
        if i0 >= self.n_beta() {
            i0 = 0;
            t = 0.0;
        }
        (i0, t)
    }

    /// Periodic cell lookup along θ: (lower index, fraction).
    pub fn theta_cell(&self, theta: f64) -> (usize, f64) {
        let nf = wrap_to_2pi(theta) / self.d_theta();
        let mut k0 = nf.floor() as usize;
        let mut t = nf - k0 as f64;
        if k0 >= self.n_theta() {
            k0 = 0;
            t = 0.0;
        }
        (k0, t)
    }

    /// Clamped cell lookup along α: (lower index, fraction, out-of-range flag).
    /// Queries beyond ±π/2 are clamped to the edge cells; the flag lets the
    /// caller count grazing-ray clamps.
    pub fn alpha_cell(&self, alpha: f64) -> (usize, f64, bool) {
        let out = !(-FRAC_PI_2..=FRAC_PI_2).contains(&alpha);
        let jf = (alpha + FRAC_PI_2) / self.d_alpha() - 0.5;
        let j0 = (jf.floor() as isize).clamp(0, self.n_alpha() as isize - 2) as usize;
        let t = (jf - j0 as f64).clamp(0.0, 1.0);
        (j0, t, out)
    }
}

/// Per-ray boundary endpoints over the influx grid: the exit point
/// (β_out, θ_out), its direction-reversed influx image (β′, α′), and the
/// travel time τ. α′ ≡ −incidence convention: (β′, α′) is again an influx
/// coordinate, and the map (β, α) ↦ (β′, α′) is an involution.
pub struct EndpointTable {
    pub grid: BoundaryGrid,
    pub beta_out: Array2<f64>,
    pub theta_out: Array2<f64>,
    pub beta1: Array2<f64>,
    pub alpha1: Array2<f64>,
    pub tau: Array2<f64>,
    pub metric_hash: u64,
    clamp_warnings: AtomicU64,
}

const CACHE_MAGIC: &[u8; 4] = b"GXET";
const CACHE_VERSION: u32 = 1;

impl EndpointTable {
    /// Trace every influx node to its exit. Rows are independent rays.
    pub fn build(
        metric: &ConformalMetric,
        n_base: usize,
        h_step: f64,
        t_max: f64,
    ) -> Result<EndpointTable> {
        let grid = BoundaryGrid::new(n_base);
        let (nb, na) = (grid.n_beta(), grid.n_alpha());
        let rows: Vec<[f64; 5]> = (0..nb * na)
            .into_par_iter()
            .map(|idx| {
                let (i, j) = (idx / na, idx % na);
                let start = grid.influx_coord(i, j).phase_point();
                let (hit, tau) = trace_exit(metric, &start, h_step, t_max)?;
                let rev = hit.reversed_influx();
                Ok([hit.beta, hit.theta, rev.beta, rev.alpha, tau])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut table = EndpointTable {
            grid,
            beta_out: Array2::zeros((nb, na)),
            theta_out: Array2::zeros((nb, na)),
            beta1: Array2::zeros((nb, na)),
            alpha1: Array2::zeros((nb, na)),
            tau: Array2::zeros((nb, na)),
            metric_hash: table_hash(metric, h_step, t_max),
            clamp_warnings: AtomicU64::new(0),
        };
        for (idx, r) in rows.iter().enumerate() {
            let (i, j) = (idx / na, idx % na);
            table.beta_out[(i, j)] = r[0];
            table.theta_out[(i, j)] = r[1];
            table.beta1[(i, j)] = r[2];
            table.alpha1[(i, j)] = r[3];
            table.tau[(i, j)] = r[4];
        }
        Ok(table)
    }

    /// Exit point (β_out, θ_out) at an influx node.
    pub fn scattering_node(&self, i: usize, j: usize) -> (f64, f64) {
        (self.beta_out[(i, j)], self.theta_out[(i, j)])
    }

    /// Antipodal influx image (β′, α′) at an influx node.
    pub fn antipodal_node(&self, i: usize, j: usize) -> (f64, f64) {
        (self.beta1[(i, j)], self.alpha1[(i, j)])
    }

    /// Antipodal image interpolated along the β_i row at off-node α.
    /// β′ is interpolated with wrap-aware differences (it crosses 0 ≡ 2π).
    pub fn antipodal_row_interp(&self, i: usize, alpha: f64) -> (f64, f64) {
        let (j0, t, out) = self.grid.alpha_cell(alpha);
        if out {
            self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
        }
        let b0 = self.beta1[(i, j0)];
        let b1 = self.beta1[(i, j0 + 1)];
        let beta = wrap_to_2pi(b0 + t * wrap_to_pi(b1 - b0));
        let a = (1.0 - t) * self.alpha1[(i, j0)] + t * self.alpha1[(i, j0 + 1)];
        (beta, a)
    }

    /// Number of α-interpolations clamped outside (−π/2, π/2) so far.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_warnings.load(Ordering::Relaxed)
    }

    pub(crate) fn count_clamp(&self) {
        self.clamp_warnings.fetch_add(1, Ordering::Relaxed);
    }

    /// Serialize: magic, version, n_base, metric hash, then the five arrays
    /// (β_out, θ_out, β′, α′, τ) row-major as little-endian f64.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.grid.n_base as u32).to_le_bytes());
        buf.extend_from_slice(&self.metric_hash.to_le_bytes());
        for arr in [
            &self.beta_out,
            &self.theta_out,
            &self.beta1,
            &self.alpha1,
            &self.tau,
        ] {
            for v in arr.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EndpointTable> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 20 || &bytes[0..4] != CACHE_MAGIC {
            return Err(GxError::Format(format!(
                "{} is not an endpoint table (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(GxError::Format(format!(
                "endpoint table version {version} unsupported"
            )));
        }
        let n_base = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let metric_hash = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let grid = BoundaryGrid::new(n_base);
        let (nb, na) = (grid.n_beta(), grid.n_alpha());
        let expect = 20 + 5 * nb * na * 8;
        if bytes.len() != expect {
            return Err(GxError::Format(format!(
                "endpoint table truncated: {} bytes, expected {expect}",
                bytes.len()
            )));
        }
        let mut off = 20;
        let mut read_array = || {
            let mut a = Array2::zeros((nb, na));
            for v in a.iter_mut() {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
            a
        };
        let beta_out = read_array();
        let theta_out = read_array();
        let beta1 = read_array();
        let alpha1 = read_array();
        let tau = read_array();
        if tau.iter().any(|v| !v.is_finite()) {
            return Err(GxError::Format("endpoint table has non-finite entries".into()));
        }
        Ok(EndpointTable {
            grid,
            beta_out,
            theta_out,
            beta1,
            alpha1,
            tau,
            metric_hash,
            clamp_warnings: AtomicU64::new(0),
        })
    }

    pub fn cache_file_name(hash: u64, n_base: usize) -> String {
        format!("gxet-{hash:016x}-{n_base}.bin")
    }

    /// Load from `cache_dir` when a matching file exists, else build and
    /// (best effort) store. Returns the table and whether it was a cache hit.
    pub fn load_or_build(
        metric: &ConformalMetric,
        n_base: usize,
        h_step: f64,
        t_max: f64,
        cache_dir: Option<&Path>,
    ) -> Result<(EndpointTable, bool)> {
        let hash = table_hash(metric, h_step, t_max);
        if let Some(dir) = cache_dir {
            let path: PathBuf = dir.join(Self::cache_file_name(hash, n_base));
            if path.is_file() {
                let table = Self::load(&path)?;
                if table.metric_hash == hash && table.grid.n_base == n_base {
                    return Ok((table, true));
                }
            }
        }
        let table = Self::build(metric, n_base, h_step, t_max)?;
        if let Some(dir) = cache_dir {
            let _ = std::fs::create_dir_all(dir);
            let _ = table.save(&dir.join(Self::cache_file_name(hash, n_base)));
        }
        Ok((table, false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EUCLID_CHORD_TOL: f64 = 1e-8;

    fn euclid_exit(beta: f64, alpha: f64) -> (f64, f64, f64) {
        // Straight chord in the unit disk: exit angle, exit direction, length.
        (
            wrap_to_2pi(beta + PI + 2.0 * alpha),
            wrap_to_2pi(beta + PI + alpha),
            2.0 * alpha.cos(),
        )
    }

    #[test]
    fn test_metric_default_value_at_bump_center() {
        // λ(0.3, 0.3) = 0.2 (1 − exp(−0.72 / (2 · 0.25²))); the second bump
        // sits at distance |(0.6, 0.6)|.
        let m = ConformalMetric::default();
        let expected = 0.2 * (1.0 - (-0.72f64 / 0.125).exp());
        assert!(
            (m.lambda(0.3, 0.3) - expected).abs() < 1e-15,
            "lambda at bump center: got {}, expected {}",
            m.lambda(0.3, 0.3),
            expected
        );
        // Antisymmetry of the pair.
        assert!((m.lambda(-0.3, -0.3) + expected).abs() < 1e-15);
        assert!(m.lambda(0.0, 0.0).abs() < 1e-15);
    }

    #[test]
    fn test_metric_gradient_and_laplacian_match_finite_differences() {
        let m = ConformalMetric::default();
        let h = 1e-5;
        for &(x, y) in &[(0.1, 0.2), (-0.4, 0.35), (0.3, 0.3), (0.0, -0.6)] {
            let (lx, ly) = m.grad_lambda(x, y);
            let fd_x = (m.lambda(x + h, y) - m.lambda(x - h, y)) / (2.0 * h);
            let fd_y = (m.lambda(x, y + h) - m.lambda(x, y - h)) / (2.0 * h);
            assert!((lx - fd_x).abs() < 1e-8, "grad_x at ({x},{y}): {lx} vs {fd_x}");
            assert!((ly - fd_y).abs() < 1e-8, "grad_y at ({x},{y}): {ly} vs {fd_y}");
            let lap = m.laplacian_lambda(x, y);
            let fd_lap = (m.lambda(x + h, y)
                + m.lambda(x - h, y)
                + m.lambda(x, y + h)
                + m.lambda(x, y - h)
                - 4.0 * m.lambda(x, y))
                / (h * h);
            assert!(
                (lap - fd_lap).abs() < 1e-4,
                "laplacian at ({x},{y}): {lap} vs {fd_lap}"
            );
            let kappa = m.curvature(x, y);
            let kappa_fd = -(-2.0 * m.lambda(x, y)).exp() * fd_lap;
            assert!((kappa - kappa_fd).abs() < 1e-4);
        }
    }

    #[test]
    fn test_metric_eval_rejects_points_outside_disk() {
        let m = ConformalMetric::default();
        assert!(m.eval(0.9, 0.1).is_ok());
        assert!(matches!(m.eval(1.2, 0.0), Err(GxError::Domain(_))));
        let e = m.eval(0.0, 0.0).unwrap();
        assert!((e.sound_speed - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_euclidean_chord_exit_matches_closed_form() {
        let m = ConformalMetric::euclidean();
        for ib in 0..12 {
            for ia in 0..9 {
                let beta = ib as f64 * TAU / 12.0;
                let alpha = -FRAC_PI_2 + (ia as f64 + 0.5) * PI / 9.0;
                let start = InfluxCoord { beta, alpha }.phase_point();
                let (hit, tau) = trace_exit(&m, &start, 1e-3, 10.0).unwrap();
                let (b_exp, t_exp, tau_exp) = euclid_exit(beta, alpha);
                assert!(
                    wrap_to_pi(hit.beta - b_exp).abs() < EUCLID_CHORD_TOL,
                    "beta_out at ({beta:.3},{alpha:.3}): {} vs {}",
                    hit.beta,
                    b_exp
                );
                assert!(wrap_to_pi(hit.theta - t_exp).abs() < EUCLID_CHORD_TOL);
                assert!(
                    (tau - tau_exp).abs() < EUCLID_CHORD_TOL,
                    "tau at ({beta:.3},{alpha:.3}): {tau} vs {tau_exp}"
                );
            }
        }
    }

    #[test]
    fn test_euclidean_endpoint_table_matches_chord_oracle() {
        let m = ConformalMetric::euclidean();
        let table = EndpointTable::build(&m, 16, 1e-3, 10.0).unwrap();
        let g = table.grid;
        let mut max_err: f64 = 0.0;
        for i in 0..g.n_beta() {
            for j in 0..g.n_alpha() {
                let (beta, alpha) = (g.beta(i), g.alpha(j));
                let (b1, a1) = table.antipodal_node(i, j);
                max_err = max_err
                    .max(wrap_to_pi(b1 - (beta + PI + 2.0 * alpha)).abs())
                    .max((a1 + alpha).abs())
                    .max((table.tau[(i, j)] - 2.0 * alpha.cos()).abs());
            }
        }
        assert!(max_err < 1e-7, "endpoint table max error {max_err}");
    }

    #[test]
    fn test_grazing_ray_has_short_chord() {
        let m = ConformalMetric::euclidean();
        let alpha = FRAC_PI_2 - 0.02;
        let start = InfluxCoord { beta: 1.0, alpha }.phase_point();
        let (_, tau) = trace_exit(&m, &start, 1e-3, 10.0).unwrap();
        assert!((tau - 2.0 * alpha.cos()).abs() < 1e-7, "grazing tau {tau}");
    }

    #[test]
    fn test_rk4_fourth_order_self_convergence() {
        // Richardson triple on a curved ray through the bump region;
        // observed order should sit near 4.
        let m = ConformalMetric::default();
        let start = InfluxCoord {
            beta: 0.3,
            alpha: 0.4,
        }
        .phase_point();
        let q = |h: f64| {
            let (hit, tau) = trace_exit(&m, &start, h, 10.0).unwrap();
            (hit.beta, tau)
        };
        let (b0, t0) = q(0.08);
        let (b1, t1) = q(0.04);
        let (b2, t2) = q(0.02);
        let order_beta = ((b0 - b1).abs() / (b1 - b2).abs()).log2();
        let order_tau = ((t0 - t1).abs() / (t1 - t2).abs()).log2();
        assert!(
            (3.2..=5.4).contains(&order_beta),
            "beta_out convergence order {order_beta}"
        );
        assert!(
            (3.2..=5.4).contains(&order_tau),
            "tau convergence order {order_tau}"
        );
    }

    #[test]
    fn test_antipodal_map_is_an_involution() {
        let m = ConformalMetric::default();
        let table = EndpointTable::build(&m, 16, 2e-3, 10.0).unwrap();
        let g = table.grid;
        for &(i, j) in &[(0, 8), (5, 3), (17, 12), (25, 1), (30, 15)] {
            let (b1, a1) = table.antipodal_node(i, j);
            let start = InfluxCoord { beta: b1, alpha: a1 }.phase_point();
            let (hit, _) = trace_exit(&m, &start, 2e-3, 10.0).unwrap();
            let back = hit.reversed_influx();
            assert!(
                wrap_to_pi(back.beta - g.beta(i)).abs() < 1e-6,
                "involution beta mismatch at node ({i},{j})"
            );
            assert!(
                (back.alpha - g.alpha(j)).abs() < 1e-6,
                "involution alpha mismatch at node ({i},{j})"
            );
        }
    }

    #[test]
    fn test_trace_to_influx_inverts_forward_flow() {
        let m = ConformalMetric::default();
        let coord = InfluxCoord {
            beta: 2.1,
            alpha: -0.55,
        };
        let path = trace_geodesic(&m, &coord.phase_point(), 1e-3, 10.0).unwrap();
        let k = path.samples.len() / 2;
        let mid = path.samples[k];
        let (back, t_back) = trace_to_influx(&m, &mid, 1e-3, 10.0).unwrap();
        assert!(wrap_to_pi(back.beta - coord.beta).abs() < 1e-6);
        assert!((back.alpha - coord.alpha).abs() < 1e-6);
        assert!((t_back - k as f64 * 1e-3).abs() < 1e-6);
    }

    #[test]
    fn test_geodesic_path_layout() {
        let m = ConformalMetric::default();
        let start = InfluxCoord {
            beta: 0.7,
            alpha: 0.2,
        }
        .phase_point();
        let path = trace_geodesic(&m, &start, 1e-3, 10.0).unwrap();
        let first = path.samples.first().unwrap();
        let last = path.samples.last().unwrap();
        assert!((first.x * first.x + first.y * first.y - 1.0).abs() < 1e-12);
        assert!((last.x * last.x + last.y * last.y - 1.0).abs() < 1e-9);
        let n_uniform = path.samples.len() - 1;
        let partial = path.exit_time - (n_uniform as f64 - 1.0) * path.h_step;
        assert!(
            partial >= 0.0 && partial <= path.h_step + 1e-12,
            "final partial step {partial} outside [0, h]"
        );
    }

    #[test]
    fn test_trapping_guard_fires() {
        let m = ConformalMetric::euclidean();
        let start = InfluxCoord {
            beta: 0.0,
            alpha: 0.0,
        }
        .phase_point();
        match trace_exit(&m, &start, 1e-3, 0.5) {
            Err(GxError::Trapped { t_max, .. }) => assert!((t_max - 0.5).abs() < 1e-15),
            other => panic!("expected trapping error, got {other:?}"),
        }
    }

    #[test]
    fn test_boundary_grid_layout() {
        let g = BoundaryGrid::new(8);
        assert_eq!(g.n_beta(), 16);
        assert_eq!(g.n_theta(), 16);
        assert!(g.alpha(0) > -FRAC_PI_2);
        assert!(g.alpha(7) < FRAC_PI_2);
        assert!((g.alpha(0) + g.alpha(7)).abs() < 1e-15, "alpha grid symmetric");
        // Cell lookups: exact nodes, periodic wrap, clamping.
        let (i0, t) = g.beta_cell(g.beta(5));
        assert_eq!(i0, 5);
        assert!(t.abs() < 1e-12);
        let (i0, t) = g.beta_cell(-g.d_beta() / 2.0);
        assert_eq!(i0, 15);
        assert!((t - 0.5).abs() < 1e-12);
        let (j0, t, out) = g.alpha_cell(1.8);
        assert!(out && j0 == g.n_alpha() - 2 && (t - 1.0).abs() < 1e-15);
        let (_, _, out) = g.alpha_cell(0.3);
        assert!(!out);
    }

    #[test]
    fn test_endpoint_cache_roundtrip_and_bad_magic() {
        let m = ConformalMetric::default();
        let table = EndpointTable::build(&m, 8, 5e-3, 10.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.bin");
        table.save(&path).unwrap();
        let loaded = EndpointTable::load(&path).unwrap();
        assert_eq!(loaded.metric_hash, table.metric_hash);
        assert_eq!(loaded.tau, table.tau);
        assert_eq!(loaded.beta_out, table.beta_out);
        assert_eq!(loaded.alpha1, table.alpha1);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(EndpointTable::load(&bad), Err(GxError::Format(_))));
    }

    #[test]
    fn test_load_or_build_uses_cache() {
        let m = ConformalMetric::default();
        let dir = tempfile::tempdir().unwrap();
        let (t1, hit1) =
            EndpointTable::load_or_build(&m, 8, 5e-3, 10.0, Some(dir.path())).unwrap();
        assert!(!hit1);
        let (t2, hit2) =
            EndpointTable::load_or_build(&m, 8, 5e-3, 10.0, Some(dir.path())).unwrap();
        assert!(hit2);
        assert_eq!(t1.tau, t2.tau);
        // Different integrator step: different hash, rebuild.
        let (_, hit3) =
            EndpointTable::load_or_build(&m, 8, 2.5e-3, 10.0, Some(dir.path())).unwrap();
        assert!(!hit3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn prop_euclidean_exit_relations(
            beta in 0.0..TAU,
            alpha in -1.35..1.35f64,
        ) {
            let m = ConformalMetric::euclidean();
            let start = InfluxCoord { beta, alpha }.phase_point();
            let (hit, tau) = trace_exit(&m, &start, 2e-3, 10.0).unwrap();
            let (b_exp, t_exp, tau_exp) = euclid_exit(beta, alpha);
            prop_assert!(wrap_to_pi(hit.beta - b_exp).abs() < 1e-7);
            prop_assert!(wrap_to_pi(hit.theta - t_exp).abs() < 1e-7);
            prop_assert!((tau - tau_exp).abs() < 1e-7);
        }

        #[test]
        fn prop_wrap_functions_agree(a in -30.0..30.0f64) {
            let w = wrap_to_pi(a);
            prop_assert!(w > -PI - 1e-12 && w <= PI + 1e-12);
            prop_assert!(((a - w).rem_euclid(TAU)).min(TAU - (a - w).rem_euclid(TAU)) < 1e-9);
            let v = wrap_to_2pi(a);
            prop_assert!((0.0..TAU + 1e-12).contains(&v));
        }
    }
}
