//! Holomorphic integrating factors for the attenuated transport equation.
//!
//! For an attenuation a the factor w solves Xw = −a on the phase space and
//! is fiberwise holomorphic (nonnegative θ-modes only) and odd under
//! θ ↦ θ + π. Construction: lift a to an influx layer p = R_⊥ a, extend p
//! by transport, and take 2πi times the analytic signal. The flow kills the
//! transported layer itself, and the Hilbert part differentiates to −a
//! because I_⊥* p = a; both facts hold only up to quadrature, so the flow
//! residual is the quantity to watch, not an exact identity.

use num_complex::Complex64;
use std::f64::consts::TAU;

use crate::error::Result;
use crate::fiber::{self, FiberField, FullBoundaryData, InfluxData};
use crate::fredholm::{self, NeumannConfig, SolveLog};
use crate::xray::{self, AttenuationProfile, Context};

/// Integrating factor w for a fixed attenuation, kept in both layouts the
/// reconstruction pipelines need: boundary values on the (β, θ) grid and
/// interior values on the phase grid.
pub struct IntegratingFactor {
    pub boundary: FullBoundaryData,
    pub interior: FiberField,
    /// Log of the Neumann solve behind the influx layer.
    pub solve_log: SolveLog,
}

impl IntegratingFactor {
    /// e^{−w} restricted to the influx boundary; multiplies measured data
    /// before any unattenuated machinery is applied.
    pub fn exp_neg_influx(&self) -> InfluxData {
        self.boundary.map(|z| (-z).exp()).restrict_influx()
    }

    /// e^{w} on the interior phase grid.
    pub fn exp_interior(&self) -> FiberField {
        self.interior.exp()
    }
}

/// Builds the integrating factor for `a`. The factor vanishes identically
/// when a ≡ 0.
pub fn integrating_factor(
    a: &AttenuationProfile,
    ctx: &Context,
    cfg: &NeumannConfig,
) -> Result<IntegratingFactor> {
    let (layer, solve_log) = fredholm::right_inverse_perp(&a.field, ctx, cfg)?;
    let scale = Complex64::new(0.0, TAU);
    let boundary = fiber::apply_a_plus(&layer, &ctx.table)
        .analytic_signal()
        .scaled(scale);
    let interior = xray::transport_extend(&layer, ctx)
        .analytic_signal()
        .scaled(scale);
    Ok(IntegratingFactor {
        boundary,
        interior,
        solve_log,
    })
}
