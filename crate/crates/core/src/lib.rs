//! Volumes, diffeomorphic transforms, pairwise registration, metrics and
//! synthetic longitudinal phantoms.

pub mod dataset;
pub mod diffeo;
pub mod error;
pub mod io;
pub mod metrics;
pub mod registration;
pub mod subject;
pub mod synthdata;
pub mod volume;

pub use diffeo::{
    compose, detjac_report_csv, detjac_stats, integrate_svf, jacobian_determinant, warp, DeformationField,
    DetJacRow, DetJacStats, WarpMode,
};
pub use error::{Error, Result};
pub use metrics::{dice, psnr, ssim3d, SsimParams};
pub use registration::{register_pair, register_sequence, RegistrationConfig, RegistrationResult};
pub use subject::{DiseaseLabel, SubjectRecord};
pub use volume::{
    resample, spatial_gradient, trilinear_sample, Boundary, ScalarVolume, Shape, VectorField, VelocitySequence,
};
