//! End-to-end equivariant protein-ligand blind docking: unified pocket
//! prediction and pose regression built from equivariant message-passing
//! layers, trained on synthetic complexes.

pub mod autodiff;
pub mod checkpoint;
pub mod checks;
pub mod complex;
pub mod docking;
pub mod geom;
pub mod layer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pocket;
pub mod report;
pub mod synth;
pub mod train;
