//! Piecewise-smooth fields with one switching manifold `{x₁ = 0}`, deterministic
//! integration with Filippov sliding, and the relay-control reference model.

mod field;
mod integrate;
mod relay;

pub use field::{
    filippov_field, noise_partition, AffineField, FilippovSde, NoisePartition, PiecewiseField, Side, SlidingCoeffs,
};
pub use integrate::{integrate_deterministic, IntegrateOptions, Mode, StopEvent, Trajectory};
pub use relay::{
    build_relay_model, check_normal_form, half_oscillation, relay_sliding_solution, x_int, NoiseSpec, PhaseAnchors,
    RelayModel, RelayParams,
};
