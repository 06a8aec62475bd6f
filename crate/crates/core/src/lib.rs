//! Soft-physics inverse solver for glioma growth on a moving particle mesh.
//!
//! The unknown tumor density, particle trajectories and model parameters are
//! fitted jointly by minimizing discrete growth and elasticity residuals
//! together with initial-condition priors and imaging losses.

pub mod ad;
pub mod commands;
pub mod domain;
pub mod error;
pub mod evaluate;
pub mod forward;
pub mod imaging;
pub mod io;
pub mod optimize;
pub mod physics;
pub mod priors;
pub mod transfer;

pub use domain::{
    CellGeometry, DynamicsParams, GridSpec, ImagingParams, InitialParams, Lattice, MaterialTable, ParticleMesh,
    PatientCase, TissueField, Topology, TumorField,
};
pub use error::{Error, ErrorKind, Result};
