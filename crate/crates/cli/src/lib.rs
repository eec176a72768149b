//! IO, file formats, and the command-line surface for the multi-view
//! contrastive segmentation pipeline. The algorithms live in `mimic-core`;
//! this crate handles datasets on disk, the preprocessing cache, checkpoints,
//! CSV reports, and SVG plots.

pub mod cache;
pub mod checkpoint;
pub mod commands;
pub mod nifti;
pub mod report;
pub mod rundir;
pub mod svg;
pub mod table;
pub mod volume_io;
