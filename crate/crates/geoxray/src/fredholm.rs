//! Fredholm-type inversion identities and the Neumann-series solver.
//!
//! The composition (1/2π) I_⊥* ∘ η_⊥ ∘ I₀ equals Id + W² with W a
//! curvature-driven compact operator (zero on the Euclidean disk), and the
//! dual composition −(1/2π) I₀* ∘ η₀ ∘ I_⊥ equals Id + (W*)². Both are
//! inverted by a short Neumann series; a growth guard turns runaway series
//! into a structured error carrying the step history.

use serde::{Deserialize, Serialize};

use crate::error::{GxError, Result};
use crate::fiber::{self, InfluxData};
use crate::xray::{self, Context, ScalarField};

const INV_TWO_PI: f64 = 1.0 / std::f64::consts::TAU;

/// Stopping and guard parameters for [`neumann_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeumannConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    /// A step that grows and exceeds this multiple of the smallest step seen
    /// is treated as divergence, not noise-floor oscillation.
    #[serde(default = "default_divergence_guard")]
    pub divergence_guard: f64,
}

fn default_max_iters() -> usize {
    8
}
fn default_rel_tol() -> f64 {
    1e-6
}
fn default_divergence_guard() -> f64 {
    10.0
}

impl Default for NeumannConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            rel_tol: default_rel_tol(),
            divergence_guard: default_divergence_guard(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxedIterations,
}

/// Step-norm history of a Neumann run. The residual of iterate k is exactly
/// the (k+1)-th step, so one sequence serves as both.
#[derive(Clone, Debug, Serialize)]
pub struct SolveLog {
    pub step_norms: Vec<f64>,
    pub status: SolveStatus,
}

/// True when the newest step grows and sits `guard` above the smallest step
/// seen before it.
pub(crate) fn steps_diverged(steps: &[f64], guard: f64) -> bool {
    let k = steps.len();
    if k < 2 {
        return false;
    }
    let min = steps[..k - 1].iter().cloned().fold(f64::INFINITY, f64::min);
    steps[k - 1] > steps[k - 2] && steps[k - 1] >= guard * min
}

/// Solve apply(x) = g by the Neumann series Σ (Id − apply)^k g: iterate
/// x ← x + (g − apply(x)) from x = g. Stops on relative step change,
/// errors out if the guard detects growth.
pub fn neumann_solve(
    apply: impl Fn(&ScalarField) -> Result<ScalarField>,
    g: &ScalarField,
    ctx: &Context,
    cfg: &NeumannConfig,
) -> Result<(ScalarField, SolveLog)> {
    let g_norm = g.norm_l2(&ctx.metric).max(f64::MIN_POSITIVE);
    let mut x = g.clone();
    let mut steps = Vec::with_capacity(cfg.max_iters);
    for _ in 0..cfg.max_iters {
        let step = g.sub(&apply(&x)?);
        let s = step.norm_l2(&ctx.metric);
        steps.push(s);
        if steps_diverged(&steps, cfg.divergence_guard) {
            return Err(GxError::Diverged { history: steps });
        }
        x = x.add(&step);
        if s <= cfg.rel_tol * g_norm {
            return Ok((
                x,
                SolveLog {
                    step_norms: steps,
                    status: SolveStatus::Converged,
                },
            ));
        }
    }
    Ok((
        x,
        SolveLog {
            step_norms: steps,
            status: SolveStatus::MaxedIterations,
        },
    ))
}

/// η_⊥ d = ¼ A₊* H (odd extension of d). Maps influx data into V₋ up to
/// interpolation error.
pub fn eta_perp(d: &InfluxData, ctx: &Context) -> InfluxData {
    fiber::apply_a_star(&fiber::extend_odd(d).hilbert(), &ctx.table, 1.0).scaled(0.25.into())
}

/// η₀ d = ¼ A₊* H (even extension of d).
pub fn eta_zero(d: &InfluxData, ctx: &Context) -> InfluxData {
    fiber::apply_a_star(&fiber::extend_even(d).hilbert(), &ctx.table, 1.0).scaled(0.25.into())
}

/// Filtered backprojection (1/2π) I_⊥* η_⊥ d; composed with I₀ it gives
/// Id + W².
pub fn filtered_bp_perp(d: &InfluxData, ctx: &Context) -> ScalarField {
    xray::backproject_perp(&eta_perp(d, ctx), ctx).scaled(INV_TWO_PI.into())
}

/// Filtered backprojection −(1/2π) I₀* η₀ d; composed with I_⊥ it gives
/// Id + (W*)².
pub fn filtered_bp_zero(d: &InfluxData, ctx: &Context) -> ScalarField {
    xray::backproject(&eta_zero(d, ctx), ctx).scaled((-INV_TWO_PI).into())
}

/// Id + W² as one operator: filtered perpendicular backprojection of I₀ f.
pub fn fredholm_w(f: &ScalarField, ctx: &Context) -> Result<ScalarField> {
    Ok(filtered_bp_perp(&xray::forward(f, ctx)?, ctx))
}

/// Id + (W*)²: filtered plain backprojection of I_⊥ h.
pub fn fredholm_w_star(h: &ScalarField, ctx: &Context) -> Result<ScalarField> {
    Ok(filtered_bp_zero(&xray::forward_perp(h, ctx)?, ctx))
}

/// Right inverse of I_⊥*: p with I_⊥* p ≈ f, p ∈ V₋.
pub fn right_inverse_perp(
    f: &ScalarField,
    ctx: &Context,
    cfg: &NeumannConfig,
) -> Result<(InfluxData, SolveLog)> {
    let (w, log) = neumann_solve(|x| fredholm_w(x, ctx), f, ctx, cfg)?;
    let d = xray::forward(&w, ctx)?;
    Ok((eta_perp(&d, ctx).scaled(INV_TWO_PI.into()), log))
}

/// Right inverse of I₀*: q with I₀* q ≈ g, q ∈ V₊.
pub fn right_inverse_zero(
    g: &ScalarField,
    ctx: &Context,
    cfg: &NeumannConfig,
) -> Result<(InfluxData, SolveLog)> {
    let (w, log) = neumann_solve(|x| fredholm_w_star(x, ctx), g, ctx, cfg)?;
    let d = xray::forward_perp(&w, ctx)?;
    Ok((eta_zero(&d, ctx).scaled((-INV_TWO_PI).into()), log))
}

/// Recover (f, h) from d = I₀ f + I_⊥ h through the V± split: the V₊ part
/// carries I₀ f, the V₋ part carries I_⊥ h.
pub fn invert_split(
    d: &InfluxData,
    ctx: &Context,
    cfg: &NeumannConfig,
) -> Result<(ScalarField, ScalarField, SolveLog, SolveLog)> {
    let (d_plus, d_minus) = fiber::project_v_parts(d, &ctx.table);
    let (f, log_f) = neumann_solve(
        |x| fredholm_w(x, ctx),
        &filtered_bp_perp(&d_plus, ctx),
        ctx,
        cfg,
    )?;
    let (h, log_h) = neumann_solve(
        |x| fredholm_w_star(x, ctx),
        &filtered_bp_zero(&d_minus, ctx),
        ctx,
        cfg,
    )?;
    Ok((f, h, log_f, log_h))
}
