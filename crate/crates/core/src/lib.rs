//! Geometry-level document layout structuring.
//!
//! Class-labeled detection proposals go in; an ordered page layout with
//! table grids comes out. The crate also carries the tooling around that
//! pipeline: a seeded synthetic ground-truth generator with a noisy detector
//! simulator, detection and classification metrics, and a small layer-grouped
//! classifier with distillation-based incremental training.

pub mod eval;
pub mod geometry;
pub mod incremental;
pub mod layout;
pub mod pipeline;
pub mod synth;

pub use geometry::{bounding_union, iou, nms, BBox, Label, NmsConfig, Region};
pub use layout::{
    assemble_document, assign_cols, assign_rows, build_table, region_combine, DocumentLayout,
    LayoutEntry, RcConfig, TableConfig, TableStructure,
};
pub use pipeline::{structure, PipelineConfig, ProposalSet};
