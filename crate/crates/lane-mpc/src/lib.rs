//! Closed-loop lane-following testbench.
//!
//! The crate reproduces a camera-to-actuator lane-keeping stack entirely in
//! software: a synthetic road-view renderer stands in for the camera, a
//! classical vision pipeline extracts the lane lines and turns them into a
//! metric reference trajectory, and either a receding-horizon MPC or a PID
//! baseline steers a nonlinear bicycle-model plant along it. Deterministic
//! end to end: a scenario, a seed and a config fully determine every trace.
//!
//! Modules mirror the stack:
//!
//! - [`imaging`]: raster type, PNM IO, resize/rotate/HSV/blur/threshold/morphology
//! - [`camera`]: pinhole model, distortion, homographies, road renderer
//! - [`lanes`]: histogram bases, sliding windows, polynomial fits, reference
//! - [`dynamics`]: Ackermann geometry, bicycle model, RK4, linearization
//! - [`control`]: PID, prediction matrices, box-QP solver, MPC
//! - [`vision`]: the composed detection pipeline
//! - [`sim`]: closed-loop harness, scenarios, metrics
//! - [`config`]: INI-style configuration with strict validation
//! - [`cli`]: the `lane-mpc` subcommands
//!
//! The `book/` directory holds a narrative guide; its code snippets compile
//! and run as doctests of this crate, so the guide cannot drift from the
//! library.

pub mod camera;
pub mod cli;
pub mod config;
pub mod control;
pub mod dynamics;
pub mod imaging;
pub mod lanes;
pub mod plot;
pub mod sim;
pub mod vision;

// Run every fenced Rust block in the book as a doctest.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/imaging.md")]
    mod imaging {}
    #[doc = include_str!("../../../book/src/camera.md")]
    mod camera {}
    #[doc = include_str!("../../../book/src/lane-detection.md")]
    mod lane_detection {}
    #[doc = include_str!("../../../book/src/vehicle-dynamics.md")]
    mod vehicle_dynamics {}
    #[doc = include_str!("../../../book/src/control.md")]
    mod control {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/tuning.md")]
    mod tuning {}
}
