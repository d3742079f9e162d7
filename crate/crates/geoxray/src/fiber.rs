//! Boundary data containers and fiberwise harmonic analysis.
//!
//! Three sample layouts share one spectral toolkit:
//! influx data on the (β, α) grid, full-boundary data on the (β, θ) grid,
//! and phase-space fields on (grid node, θ). The θ fiber is always a full
//! circle sampled uniformly, so the Hilbert transform, harmonic projections,
//! and parity splits are exact FFT multipliers.
//!
//! The glancing set |α| = π/2 never carries grid nodes (the α grid is offset
//! by half a cell); queries that clamp past it are counted on the endpoint
//! table as a data-quality diagnostic.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::geometry::{wrap_to_2pi, wrap_to_pi, BoundaryGrid, ConformalMetric, EndpointTable};
use crate::xray::{GridSpec, ScalarField};

/// Apply a signed-frequency multiplier fiberwise: each length-`n` chunk of
/// `buf` is one uniformly sampled θ fiber. The Nyquist bin counts as the
/// negative frequency −n/2; the inverse-FFT 1/n factor is folded in.
pub(crate) fn theta_multiplier_inplace(
    buf: &mut [Complex64],
    n: usize,
    weight: impl Fn(i64) -> Complex64,
) {
    debug_assert_eq!(buf.len() % n, 0);
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(buf);
    let w: Vec<Complex64> = (0..n)
        .map(|idx| {
            let k = if idx < n.div_ceil(2) {
                idx as i64
            } else {
                idx as i64 - n as i64
            };
            weight(k) / n as f64
        })
        .collect();
    for chunk in buf.chunks_mut(n) {
        for (v, wk) in chunk.iter_mut().zip(&w) {
            *v *= *wk;
        }
    }
    planner.plan_fft_inverse(n).process(buf);
}

fn hilbert_weight(k: i64) -> Complex64 {
    Complex64::new(0.0, -(k.signum() as f64))
}

/// Data on the influx grid: values[(i, j)] at (β_i, α_j).
#[derive(Clone, Debug)]
pub struct InfluxData {
    pub grid: BoundaryGrid,
    pub values: Array2<Complex64>,
}

impl InfluxData {
    pub fn zeros(grid: BoundaryGrid) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.n_beta(), grid.n_alpha())),
        }
    }

    pub fn from_fn(grid: BoundaryGrid, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let mut values = Array2::zeros((grid.n_beta(), grid.n_alpha()));
        for i in 0..grid.n_beta() {
            for j in 0..grid.n_alpha() {
                values[(i, j)] = f(grid.beta(i), grid.alpha(j));
            }
        }
        Self { grid, values }
    }

    /// Bilinear interpolation from precomputed cell coordinates: β periodic,
    /// α clamped by the caller's cell lookup.
    #[inline]
    pub fn bilerp_cells(&self, i0: usize, ti: f64, j0: usize, tj: f64) -> Complex64 {
        let i1 = (i0 + 1) % self.grid.n_beta();
        let v00 = self.values[(i0, j0)];
        let v01 = self.values[(i0, j0 + 1)];
        let v10 = self.values[(i1, j0)];
        let v11 = self.values[(i1, j0 + 1)];
        (v00 * (1.0 - tj) + v01 * tj) * (1.0 - ti) + (v10 * (1.0 - tj) + v11 * tj) * ti
    }

    /// Interpolate at (β, α), counting clamped α queries on the table.
    #[inline]
    pub fn interp(&self, table: &EndpointTable, beta: f64, alpha: f64) -> Complex64 {
        let (i0, ti) = self.grid.beta_cell(beta);
        let (j0, tj, out) = self.grid.alpha_cell(alpha);
        if out {
            table.count_clamp();
        }
        self.bilerp_cells(i0, ti, j0, tj)
    }

    /// Interpolate in α along the β_i row. Structural queries (grid-aligned
    /// extension operators), so edge clamps are not counted.
    #[inline]
    pub fn row_lerp(&self, i: usize, alpha: f64) -> Complex64 {
        let (j0, t, _) = self.grid.alpha_cell(alpha);
        self.values[(i, j0)] * (1.0 - t) + self.values[(i, j0 + 1)] * t
    }

    /// L²_μ inner product: weight cos α · e^{λ(β)} · Δβ Δα.
    pub fn inner_mu(&self, other: &InfluxData, metric: &ConformalMetric) -> Complex64 {
        assert_eq!(self.grid.n_base, other.grid.n_base, "influx grid mismatch");
        let g = self.grid;
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 0..g.n_beta() {
            let b = g.beta(i);
            let w_beta = metric.lambda(b.cos(), b.sin()).exp();
            for j in 0..g.n_alpha() {
                let w = g.alpha(j).cos() * w_beta;
                acc += self.values[(i, j)] * other.values[(i, j)].conj() * w;
            }
        }
        acc * g.d_beta() * g.d_alpha()
    }

    pub fn norm_mu(&self, metric: &ConformalMetric) -> f64 {
        self.inner_mu(self, metric).re.max(0.0).sqrt()
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.map(|v| f(*v)),
        }
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &InfluxData) -> Self {
        assert_eq!(self.grid.n_base, other.grid.n_base);
        Self {
            grid: self.grid,
            values: &self.values + &other.values,
        }
    }

    pub fn sub(&self, other: &InfluxData) -> Self {
        assert_eq!(self.grid.n_base, other.grid.n_base);
        Self {
            grid: self.grid,
            values: &self.values - &other.values,
        }
    }

    pub fn mul_pointwise(&self, other: &InfluxData) -> Self {
        assert_eq!(self.grid.n_base, other.grid.n_base);
        Self {
            grid: self.grid,
            values: &self.values * &other.values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}

/// Data on the full boundary circle bundle: values[(i, k)] at (β_i, θ_k),
/// with θ covering the whole fiber.
#[derive(Clone, Debug)]
pub struct FullBoundaryData {
    pub grid: BoundaryGrid,
    pub values: Array2<Complex64>,
}

impl FullBoundaryData {
    pub fn zeros(grid: BoundaryGrid) -> Self {
        Self {
            grid,
            values: Array2::zeros((grid.n_beta(), grid.n_theta())),
        }
    }

    pub fn from_fn(grid: BoundaryGrid, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let mut values = Array2::zeros((grid.n_beta(), grid.n_theta()));
        for i in 0..grid.n_beta() {
            for k in 0..grid.n_theta() {
                values[(i, k)] = f(grid.beta(i), grid.theta(k));
            }
        }
        Self { grid, values }
    }

    /// Periodic bilinear interpolation at (β, θ).
    pub fn bilerp(&self, beta: f64, theta: f64) -> Complex64 {
        let (i0, ti) = self.grid.beta_cell(beta);
        let (k0, tk) = self.grid.theta_cell(theta);
        let i1 = (i0 + 1) % self.grid.n_beta();
        let k1 = (k0 + 1) % self.grid.n_theta();
        let v00 = self.values[(i0, k0)];
        let v01 = self.values[(i0, k1)];
        let v10 = self.values[(i1, k0)];
        let v11 = self.values[(i1, k1)];
        (v00 * (1.0 - tk) + v01 * tk) * (1.0 - ti) + (v10 * (1.0 - tk) + v11 * tk) * ti
    }

    /// Interpolate in θ along the β_i row, periodic.
    pub fn row_theta_lerp(&self, i: usize, theta: f64) -> Complex64 {
        let (k0, t) = self.grid.theta_cell(theta);
        let k1 = (k0 + 1) % self.grid.n_theta();
        self.values[(i, k0)] * (1.0 - t) + self.values[(i, k1)] * t
    }

    /// Fiberwise Hilbert transform (FFT multiplier −i·sgn k).
    pub fn hilbert(&self) -> Self {
        let mut out = self.clone();
        let n = self.grid.n_theta();
        theta_multiplier_inplace(out.values.as_slice_mut().unwrap(), n, hilbert_weight);
        out
    }

    /// Fiber average broadcast back onto the fiber.
    pub fn pi0_component(&self) -> Self {
        let n = self.grid.n_theta() as f64;
        let mut out = self.clone();
        for mut row in out.values.rows_mut() {
            let mean = row.iter().sum::<Complex64>() / n;
            row.fill(mean);
        }
        out
    }

    /// Direction reversal (β, θ) ↦ (β, θ + π): exact index roll.
    pub fn antipodal_flip(&self) -> Self {
        let nt = self.grid.n_theta();
        let half = nt / 2;
        let mut out = Self::zeros(self.grid);
        for i in 0..self.grid.n_beta() {
            for k in 0..nt {
                out.values[(i, k)] = self.values[(i, (k + half) % nt)];
            }
        }
        out
    }

    pub fn even_part(&self) -> Self {
        self.add(&self.antipodal_flip()).scaled(0.5.into())
    }

    pub fn odd_part(&self) -> Self {
        self.sub(&self.antipodal_flip()).scaled(0.5.into())
    }

    pub fn hilbert_even(&self) -> Self {
        self.even_part().hilbert()
    }

    pub fn hilbert_odd(&self) -> Self {
        self.odd_part().hilbert()
    }

    /// Analytic signal u + iHu: doubles positive modes, keeps the mean,
    /// removes negative modes.
    pub fn analytic_signal(&self) -> Self {
        let mut out = self.clone();
        let n = self.grid.n_theta();
        theta_multiplier_inplace(out.values.as_slice_mut().unwrap(), n, |k| {
            Complex64::new(1.0 + k.signum() as f64, 0.0)
        });
        out
    }

    /// u − iHu: doubles negative modes, removes positive ones.
    pub fn anti_analytic_signal(&self) -> Self {
        let mut out = self.clone();
        let n = self.grid.n_theta();
        theta_multiplier_inplace(out.values.as_slice_mut().unwrap(), n, |k| {
            Complex64::new(1.0 - k.signum() as f64, 0.0)
        });
        out
    }

    /// Restrict to the influx grid: sample at θ = β_i + π + α_j.
    pub fn restrict_influx(&self) -> InfluxData {
        let g = self.grid;
        let mut out = InfluxData::zeros(g);
        for i in 0..g.n_beta() {
            for j in 0..g.n_alpha() {
                out.values[(i, j)] = self.row_theta_lerp(i, g.beta(i) + PI + g.alpha(j));
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.map(|v| f(*v)),
        }
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.grid.n_base, other.grid.n_base);
        Self {
            grid: self.grid,
            values: &self.values + &other.values,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.grid.n_base, other.grid.n_base);
        Self {
            grid: self.grid,
            values: &self.values - &other.values,
        }
    }

    pub fn mul_pointwise(&self, other: &Self) -> Self {
        assert_eq!(self.grid.n_base, other.grid.n_base);
        Self {
            grid: self.grid,
            values: &self.values * &other.values,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }

    pub fn rms(&self) -> f64 {
        (self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() / self.values.len() as f64).sqrt()
    }
}

/// Extend influx data to the full boundary bundle as an odd function of the
/// incidence: outflux values are −(data at the direction-reversed influx
/// point), which realizes scattering pullback on chord-symmetric data.
pub fn extend_odd(d: &InfluxData) -> FullBoundaryData {
    extend_with_sign(d, -1.0)
}

/// Even counterpart of [`extend_odd`].
pub fn extend_even(d: &InfluxData) -> FullBoundaryData {
    extend_with_sign(d, 1.0)
}

/// Influx data viewed on the full boundary bundle with zero outflux values:
/// the boundary trace of a transport solution that vanishes at exit points.
pub fn embed_influx(d: &InfluxData) -> FullBoundaryData {
    let g = d.grid;
    let mut out = FullBoundaryData::zeros(g);
    for i in 0..g.n_beta() {
        for k in 0..g.n_theta() {
            let inc = g.incidence(i, k);
            if inc.abs() <= FRAC_PI_2 {
                out.values[(i, k)] = d.row_lerp(i, inc);
            }
        }
    }
    out
}

fn extend_with_sign(d: &InfluxData, sign: f64) -> FullBoundaryData {
    let g = d.grid;
    let mut out = FullBoundaryData::zeros(g);
    for i in 0..g.n_beta() {
        for k in 0..g.n_theta() {
            let inc = g.incidence(i, k);
            out.values[(i, k)] = if inc.abs() <= FRAC_PI_2 {
                d.row_lerp(i, inc)
            } else {
                d.row_lerp(i, wrap_to_pi(inc + PI)) * sign
            };
        }
    }
    out
}

/// Extend influx data by constancy along geodesics, restricted to the
/// boundary: outflux values are pulled back through the scattering relation.
/// `sign` is +1 for the transport extension and −1 for its odd twin.
fn apply_a_with_sign(d: &InfluxData, table: &EndpointTable, sign: f64) -> FullBoundaryData {
    let g = d.grid;
    let mut out = FullBoundaryData::zeros(g);
    for i in 0..g.n_beta() {
        for k in 0..g.n_theta() {
            let inc = g.incidence(i, k);
            out.values[(i, k)] = if inc.abs() <= FRAC_PI_2 {
                d.row_lerp(i, inc)
            } else {
                let (b1, a1) = table.antipodal_row_interp(i, wrap_to_pi(inc + PI));
                d.interp(table, b1, a1) * sign
            };
        }
    }
    out
}

pub fn apply_a_plus(d: &InfluxData, table: &EndpointTable) -> FullBoundaryData {
    apply_a_with_sign(d, table, 1.0)
}

pub fn apply_a_minus(d: &InfluxData, table: &EndpointTable) -> FullBoundaryData {
    apply_a_with_sign(d, table, -1.0)
}

/// Adjoint-type restriction: (u ± u∘scattering)|influx.
pub fn apply_a_star(u: &FullBoundaryData, table: &EndpointTable, sign: f64) -> InfluxData {
    let g = u.grid;
    let mut out = InfluxData::zeros(g);
    for i in 0..g.n_beta() {
        for j in 0..g.n_alpha() {
            let v_in = u.row_theta_lerp(i, g.beta(i) + PI + g.alpha(j));
            let (bo, to) = table.scattering_node(i, j);
            out.values[(i, j)] = v_in + u.bilerp(bo, to) * sign;
        }
    }
    out
}

/// Split influx data into the ±1 eigenspaces of the direction-reversed
/// scattering involution: d± = (d ± d∘S)/2. The parts recombine exactly.
pub fn project_v_parts(d: &InfluxData, table: &EndpointTable) -> (InfluxData, InfluxData) {
    let g = d.grid;
    let mut plus = InfluxData::zeros(g);
    let mut minus = InfluxData::zeros(g);
    for i in 0..g.n_beta() {
        for j in 0..g.n_alpha() {
            let (b1, a1) = table.antipodal_node(i, j);
            let pd = d.interp(table, b1, a1);
            let v = d.values[(i, j)];
            plus.values[(i, j)] = (v + pd) * 0.5;
            minus.values[(i, j)] = (v - pd) * 0.5;
        }
    }
    (plus, minus)
}

/// Phase-space samples values[(iy, ix, k)] over a Cartesian grid and a
/// uniform θ fiber of even length.
#[derive(Clone, Debug)]
pub struct FiberField {
    pub grid: GridSpec,
    pub n_theta: usize,
    pub values: Array3<Complex64>,
}

impl FiberField {
    pub fn zeros(grid: GridSpec, n_theta: usize) -> Self {
        assert!(n_theta % 2 == 0 && n_theta >= 8, "bad fiber size");
        Self {
            grid,
            n_theta,
            values: Array3::zeros((grid.n, grid.n, n_theta)),
        }
    }

    pub fn theta(&self, k: usize) -> f64 {
        k as f64 * TAU / self.n_theta as f64
    }

    pub fn from_fn(grid: GridSpec, n_theta: usize, f: impl Fn(f64, f64, f64) -> Complex64) -> Self {
        let mut out = Self::zeros(grid, n_theta);
        for iy in 0..grid.n {
            for ix in 0..grid.n {
                for k in 0..n_theta {
                    out.values[(iy, ix, k)] =
                        f(grid.coord(ix), grid.coord(iy), out.theta(k));
                }
            }
        }
        out
    }

    /// Fiberwise Hilbert transform.
    pub fn hilbert(&self) -> Self {
        let mut out = self.clone();
        theta_multiplier_inplace(out.values.as_slice_mut().unwrap(), self.n_theta, hilbert_weight);
        out
    }

    /// u + iHu fiberwise; see [`FullBoundaryData::analytic_signal`].
    pub fn analytic_signal(&self) -> Self {
        let mut out = self.clone();
        theta_multiplier_inplace(out.values.as_slice_mut().unwrap(), self.n_theta, |k| {
            Complex64::new(1.0 + k.signum() as f64, 0.0)
        });
        out
    }

    /// Fiber average as a scalar field.
    pub fn pi0(&self) -> ScalarField {
        let mut out = ScalarField::zeros(self.grid);
        let n = self.n_theta as f64;
        for iy in 0..self.grid.n {
            for ix in 0..self.grid.n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..self.n_theta {
                    acc += self.values[(iy, ix, k)];
                }
                out.values[(iy, ix)] = acc / n;
            }
        }
        out
    }

    /// Fourier coefficient c_m(x) = (1/2π)∮ u e^{−imθ} dθ by the fiber
    /// trapezoid rule.
    pub fn mode_coefficient(&self, m: i64) -> ScalarField {
        let mut out = ScalarField::zeros(self.grid);
        let n = self.n_theta as f64;
        for iy in 0..self.grid.n {
            for ix in 0..self.grid.n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..self.n_theta {
                    let ph = Complex64::from_polar(1.0, -(m as f64) * self.theta(k));
                    acc += self.values[(iy, ix, k)] * ph;
                }
                out.values[(iy, ix)] = acc / n;
            }
        }
        out
    }

    /// Direction reversal θ ↦ θ + π: exact index roll.
    pub fn antipodal_flip(&self) -> Self {
        let half = self.n_theta / 2;
        let mut out = Self::zeros(self.grid, self.n_theta);
        for iy in 0..self.grid.n {
            for ix in 0..self.grid.n {
                for k in 0..self.n_theta {
                    out.values[(iy, ix, k)] = self.values[(iy, ix, (k + half) % self.n_theta)];
                }
            }
        }
        out
    }

    pub fn even_part(&self) -> Self {
        self.add(&self.antipodal_flip()).scaled(0.5.into())
    }

    pub fn odd_part(&self) -> Self {
        self.sub(&self.antipodal_flip()).scaled(0.5.into())
    }

    /// Geodesic-perpendicular derivative on phase space:
    /// e^{−λ}(sin θ ∂_x − cos θ ∂_y + (λ_x cos θ + λ_y sin θ) ∂_θ),
    /// grid gradients in x, y and spectral ∂_θ.
    pub fn x_perp(&self, metric: &ConformalMetric) -> Self {
        let g = self.grid;
        let nt = self.n_theta;
        let mut dtheta = self.clone();
        theta_multiplier_inplace(dtheta.values.as_slice_mut().unwrap(), nt, |k| {
            Complex64::new(0.0, k as f64)
        });
        let mut out = Self::zeros(g, nt);
        for k in 0..nt {
            let slice = ScalarField {
                grid: g,
                values: self.values.index_axis(Axis(2), k).to_owned(),
            };
            let (ux, uy) = slice.gradient();
            let (sin_t, cos_t) = self.theta(k).sin_cos();
            for iy in 0..g.n {
                for ix in 0..g.n {
                    if !g.inside(ix, iy) {
                        continue;
                    }
                    let (em, lx, ly) = metric.conformal_data(g.coord(ix), g.coord(iy));
                    let ut = dtheta.values[(iy, ix, k)];
                    out.values[(iy, ix, k)] = em
                        * (sin_t * ux.values[(iy, ix)] - cos_t * uy.values[(iy, ix)]
                            + (lx * cos_t + ly * sin_t) * ut);
                }
            }
        }
        out
    }

    /// Trilinear sample: bilinear in (x, y), periodic linear in θ.
    /// Geodesic flow generator X = e^{−λ}(cosθ ∂x + sinθ ∂y +
    /// (λ_y cosθ − λ_x sinθ) ∂θ), the derivative realized by the tracer.
    /// Same gradient caveats as [`FiberField::x_perp`].
    pub fn x_flow(&self, metric: &ConformalMetric) -> Self {
        let g = self.grid;
        let nt = self.n_theta;
        let mut dtheta = self.clone();
        theta_multiplier_inplace(dtheta.values.as_slice_mut().unwrap(), nt, |k| {
            Complex64::new(0.0, k as f64)
        });
        let mut out = Self::zeros(g, nt);
        for k in 0..nt {
            let slice = ScalarField {
                grid: g,
                values: self.values.index_axis(Axis(2), k).to_owned(),
            };
            let (ux, uy) = slice.gradient();
            let (sin_t, cos_t) = self.theta(k).sin_cos();
            for iy in 0..g.n {
                for ix in 0..g.n {
                    if !g.inside(ix, iy) {
                        continue;
                    }
                    let (em, lx, ly) = metric.conformal_data(g.coord(ix), g.coord(iy));
                    let ut = dtheta.values[(iy, ix, k)];
                    out.values[(iy, ix, k)] = em
                        * (cos_t * ux.values[(iy, ix)]
                            + sin_t * uy.values[(iy, ix)]
                            + (ly * cos_t - lx * sin_t) * ut);
                }
            }
        }
        out
    }

    pub fn sample(&self, x: f64, y: f64, theta: f64) -> Complex64 {
        let (ix0, tx) = self.grid.cell(x);
        let (iy0, ty) = self.grid.cell(y);
        let ft = wrap_to_2pi(theta) / (TAU / self.n_theta as f64);
        let mut k0 = ft.floor() as usize;
        let mut tk = ft - k0 as f64;
        if k0 >= self.n_theta {
            k0 = 0;
            tk = 0.0;
        }
        let k1 = (k0 + 1) % self.n_theta;
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, wk) in [(k0, 1.0 - tk), (k1, tk)] {
            let v00 = self.values[(iy0, ix0, k)];
            let v01 = self.values[(iy0, ix0 + 1, k)];
            let v10 = self.values[(iy0 + 1, ix0, k)];
            let v11 = self.values[(iy0 + 1, ix0 + 1, k)];
            acc += ((v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty)
                + (v10 * (1.0 - tx) + v11 * tx) * ty)
                * wk;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }

    /// RMS over fiber samples above disk-interior nodes.
    pub fn mask_rms(&self) -> f64 {
        let g = self.grid;
        let (mut acc, mut cnt) = (0.0f64, 0usize);
        for iy in 0..g.n {
            for ix in 0..g.n {
                if g.inside(ix, iy) {
                    for k in 0..self.n_theta {
                        acc += self.values[(iy, ix, k)].norm_sqr();
                        cnt += 1;
                    }
                }
            }
        }
        (acc / cnt.max(1) as f64).sqrt()
    }

    /// Fraction of fiber spectral energy in negative modes, mask nodes only.
    /// Zero for holomorphic (non-negative-mode) fields.
    pub fn negative_mode_energy_fraction(&self) -> f64 {
        let g = self.grid;
        let nt = self.n_theta;
        let mut buf = self.values.as_slice().unwrap().to_vec();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(nt).process(&mut buf);
        let (mut neg, mut tot) = (0.0f64, 0.0f64);
        for iy in 0..g.n {
            for ix in 0..g.n {
                if !g.inside(ix, iy) {
                    continue;
                }
                let base = (iy * g.n + ix) * nt;
                for idx in 0..nt {
                    let e = buf[base + idx].norm_sqr();
                    tot += e;
                    if idx >= nt.div_ceil(2) {
                        neg += e;
                    }
                }
            }
        }
        neg / tot.max(f64::MIN_POSITIVE)
    }

    /// Relative size of the even part, for fields expected odd in θ ↦ θ + π.
    pub fn odd_parity_residue(&self) -> f64 {
        self.even_part().mask_rms() / self.mask_rms().max(f64::MIN_POSITIVE)
    }

    pub fn map(&self, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            grid: self.grid,
            n_theta: self.n_theta,
            values: self.values.map(|v| f(*v)),
        }
    }

    pub fn exp(&self) -> Self {
        self.map(|v| v.exp())
    }

    pub fn im(&self) -> Self {
        self.map(|v| Complex64::new(v.im, 0.0))
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        self.map(|v| v * c)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.values.dim(), other.values.dim());
        Self {
            grid: self.grid,
            n_theta: self.n_theta,
            values: &self.values + &other.values,
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.values.dim(), other.values.dim());
        Self {
            grid: self.grid,
            n_theta: self.n_theta,
            values: &self.values - &other.values,
        }
    }

    pub fn mul_pointwise(&self, other: &Self) -> Self {
        assert_eq!(self.values.dim(), other.values.dim());
        Self {
            grid: self.grid,
            n_theta: self.n_theta,
            values: &self.values * &other.values,
        }
    }
}
