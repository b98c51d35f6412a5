//! End-to-end structuring of one page of proposals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{nms, Label, NmsConfig, Region};
use crate::layout::{assemble_document, region_combine, DocumentLayout, RcConfig, TableConfig};

pub const DEFAULT_PAGE_WIDTH: u32 = 2480;
pub const DEFAULT_PAGE_HEIGHT: u32 = 3508;

/// Raw detections for one page, one JSON line per page in proposal files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub page_id: String,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    pub regions: Vec<Region>,
}

fn default_width() -> u32 {
    DEFAULT_PAGE_WIDTH
}

fn default_height() -> u32 {
    DEFAULT_PAGE_HEIGHT
}

/// How overlapping same-class proposals are reduced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    RegionCombine(RcConfig),
    /// Plain NMS, no merging. Used as the ablation baseline.
    NmsOnly(NmsConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Applied to tables, cells and text blocks.
    pub layout_reduction: Reduction,
    /// Handwriting proposals always go through plain NMS.
    pub handwriting_nms: NmsConfig,
    pub table: TableConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            layout_reduction: Reduction::RegionCombine(RcConfig::default()),
            handwriting_nms: NmsConfig::new(0.3).expect("valid"),
            table: TableConfig::Auto,
        }
    }
}

impl PipelineConfig {
    /// Region combination replaced by NMS at the same lenient threshold.
    pub fn without_combination() -> Self {
        Self {
            layout_reduction: Reduction::NmsOnly(NmsConfig::new(0.7).expect("valid")),
            ..Self::default()
        }
    }
}

/// Per-class reduction of raw proposals, classes in fixed order.
pub fn reduce_proposals(proposals: &[Region], cfg: &PipelineConfig) -> Vec<Region> {
    let mut by_class: BTreeMap<Label, Vec<Region>> = BTreeMap::new();
    for r in proposals {
        by_class.entry(r.label).or_default().push(*r);
    }
    let mut out = Vec::with_capacity(proposals.len());
    for (label, group) in by_class {
        let reduced = if label == Label::Handwriting {
            nms(&group, &cfg.handwriting_nms)
        } else {
            match &cfg.layout_reduction {
                Reduction::RegionCombine(rc) => region_combine(&group, rc).map_err(|e| match e {
                    crate::layout::LayoutError::Geometry(g) => g,
                    other => unreachable!("region_combine on one class: {other}"),
                }),
                Reduction::NmsOnly(n) => nms(&group, n),
            }
        };
        out.extend(reduced.expect("groups are single-class"));
    }
    out
}

/// Reduce, build tables, and order the page.
pub fn structure(page_id: &str, proposals: &[Region], cfg: &PipelineConfig) -> DocumentLayout {
    let reduced = reduce_proposals(proposals, cfg);
    assemble_document(page_id, &reduced, &cfg.table)
}

pub fn structure_set(set: &ProposalSet, cfg: &PipelineConfig) -> DocumentLayout {
    structure(&set.page_id, &set.regions, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(label: Label, c: [f64; 4], s: f64) -> Region {
        Region::from_coords(label, c, s).unwrap()
    }

    #[test]
    fn fragments_merge_only_with_combination() {
        let props = vec![
            r(Label::Table, [0., 0., 200., 100.], 0.9),
            r(Label::Cell, [10., 10., 60., 30.], 0.9),
            r(Label::Cell, [55., 10., 100., 30.], 0.8),
        ];
        let with = structure("p", &props, &PipelineConfig::default());
        let t = with.regions[0].as_table().unwrap();
        assert_eq!(t.placements.len(), 1);
        assert_eq!(t.placements[0].cell.bbox.to_array(), [10., 10., 100., 30.]);

        let without = structure("p", &props, &PipelineConfig::without_combination());
        assert_eq!(without.regions[0].as_table().unwrap().placements.len(), 2);
    }

    #[test]
    fn handwriting_uses_strict_nms() {
        let props = vec![
            r(Label::Handwriting, [0., 0., 10., 10.], 0.9),
            r(Label::Handwriting, [5., 0., 15., 10.], 0.8),
        ];
        let out = reduce_proposals(&props, &PipelineConfig::default());
        assert_eq!(out, vec![props[0]]);
    }

    #[test]
    fn proposal_set_defaults_page_size() {
        let s: ProposalSet = serde_json::from_str(r#"{"page_id":"a","regions":[]}"#).unwrap();
        assert_eq!(
            (s.width, s.height),
            (DEFAULT_PAGE_WIDTH, DEFAULT_PAGE_HEIGHT)
        );
        assert!(structure_set(&s, &PipelineConfig::default())
            .regions
            .is_empty());
    }
}
