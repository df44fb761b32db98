//! Gaussian splat representation, deformation fields, and their
//! regularization losses.

mod deform;
mod gaussians;

pub use deform::{
    DeformCache, DeformationField, FieldArchitecture, FieldGrads, Mlp, PlaneGrid, tv_loss,
    tv_loss_grad,
};
pub use gaussians::{
    DensifyOptions, DensifyReport, GaussianGrads, GaussianSet, NeighborGraph, TimeStamp,
    densify_and_prune, init_sphere_gaussians, rigidity_loss, rigidity_loss_grad,
};

pub(crate) use gaussians::quat_to_matrix;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
