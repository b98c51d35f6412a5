//! Turning per-class detections into a structured page layout.
//!
//! The stages are:
//!
//! 1. [`region_combine`]: lenient NMS followed by merging every group of
//!    mutually overlapping survivors into its bounding rectangle, repeated
//!    until no two outputs overlap.
//! 2. [`assign_rows`] / [`assign_cols`]: grid reconstruction from cell
//!    coordinates against a height (width) threshold.
//! 3. [`build_table`]: both assignment passes over the cells of one table.
//! 4. [`assemble_document`]: cell-to-table association, orphan handling and
//!    top-edge ordering into a [`DocumentLayout`].
//!
//! Row construction follows the row-opening rule literally: the row baseline
//! (`last_end`) is only updated when a row opens, so a tall cell that joins an
//! existing row does not push the baseline down. Cells that tie on their top
//! edge are visited shortest-first, which keeps the baseline at the bottom of
//! a single-row cell whenever the row has one.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    bounding_union, common_label, iou, nms, BBox, GeometryError, Label, NmsConfig, Region,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("cell list is empty")]
    NoCells,
    #[error("threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
    #[error("expected only cell regions, found {0}")]
    NotACell(Label),
    #[error("expected a table region, found {0}")]
    NotATable(Label),
    #[error("cell {0} does not intersect the table bbox")]
    CellOutsideTable(usize),
    #[error("invalid layout entry: {0}")]
    InvalidEntry(String),
}

/// Settings for [`region_combine`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcConfig {
    nms: NmsConfig,
    combine_min_overlap: f64,
}

impl RcConfig {
    pub fn new(nms_iou_threshold: f64, combine_min_overlap: f64) -> Result<Self, LayoutError> {
        if !(combine_min_overlap >= 0.0 && combine_min_overlap.is_finite()) {
            return Err(LayoutError::BadThreshold(combine_min_overlap));
        }
        Ok(Self {
            nms: NmsConfig::new(nms_iou_threshold)?,
            combine_min_overlap,
        })
    }

    pub fn nms_iou_threshold(&self) -> f64 {
        self.nms.iou_threshold()
    }

    pub fn combine_min_overlap(&self) -> f64 {
        self.combine_min_overlap
    }
}

impl Default for RcConfig {
    fn default() -> Self {
        Self::new(0.7, 0.0).expect("default thresholds are valid")
    }
}

fn merge(a: &Region, b: &Region) -> Region {
    Region {
        label: a.label,
        bbox: bounding_union(&a.bbox, &b.bbox),
        score: a.score.max(b.score),
    }
}

/// One sweep of the combination loop. Returns the new working set and whether
/// any merge happened.
fn combine_pass(mut pending: Vec<Region>, min_overlap: f64) -> (Vec<Region>, bool) {
    pending.sort_by(Region::priority_cmp);
    let mut pending = std::collections::VecDeque::from(pending);
    let mut out = Vec::with_capacity(pending.len());
    let mut merged_any = false;

    while let Some(mut r) = pending.pop_front() {
        // the merged box grows, so rescan until it absorbs nothing new
        loop {
            let before = pending.len();
            pending.retain(|c| {
                if iou(&r.bbox, &c.bbox) > min_overlap {
                    r = merge(&r, c);
                    false
                } else {
                    true
                }
            });
            if pending.len() == before {
                break;
            }
            merged_any = true;
        }
        out.push(r);
    }
    (out, merged_any)
}

/// Region combination over candidates of one class.
///
/// Output regions are pairwise non-overlapping (for the default zero
/// `combine_min_overlap`) and returned in descending score priority.
pub fn region_combine(candidates: &[Region], cfg: &RcConfig) -> Result<Vec<Region>, LayoutError> {
    common_label(candidates)?;
    let mut work = nms(candidates, &cfg.nms)?;
    loop {
        let (next, merged) = combine_pass(work, cfg.combine_min_overlap);
        work = next;
        if !merged {
            break;
        }
    }
    work.sort_by(Region::priority_cmp);
    Ok(work)
}

#[derive(Clone, Copy)]
enum Axis {
    Rows,
    Cols,
}

impl Axis {
    fn span(self, b: &BBox) -> (f64, f64) {
        match self {
            Axis::Rows => (b.ymin(), b.ymax()),
            Axis::Cols => (b.xmin(), b.xmax()),
        }
    }

    fn cross(self, b: &BBox) -> (f64, f64) {
        match self {
            Axis::Rows => (b.xmin(), b.xmax()),
            Axis::Cols => (b.ymin(), b.ymax()),
        }
    }
}

fn check_threshold(t: f64) -> Result<f64, LayoutError> {
    if t > 0.0 && t.is_finite() {
        Ok(t)
    } else {
        Err(LayoutError::BadThreshold(t))
    }
}

fn check_cells(cells: &[Region]) -> Result<(), LayoutError> {
    if cells.is_empty() {
        return Err(LayoutError::NoCells);
    }
    if let Some(c) = cells.iter().find(|c| c.label != Label::Cell) {
        return Err(LayoutError::NotACell(c.label));
    }
    Ok(())
}

/// Index sets along one axis, aligned with the input order.
fn assign_axis(cells: &[Region], threshold: f64, axis: Axis) -> Vec<Vec<u32>> {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, ea) = axis.span(&cells[a].bbox);
        let (sb, eb) = axis.span(&cells[b].bbox);
        let (ca, _) = axis.cross(&cells[a].bbox);
        let (cb, _) = axis.cross(&cells[b].bbox);
        sa.total_cmp(&sb)
            .then(ea.total_cmp(&eb))
            .then(ca.total_cmp(&cb))
            .then(a.cmp(&b))
    });

    let mut sets: Vec<Vec<u32>> = vec![Vec::new(); cells.len()];
    let mut current: Vec<usize> = Vec::new();
    let mut n: u32 = 0;
    let mut last_end = f64::NEG_INFINITY;

    for &i in &order {
        let (start, end) = axis.span(&cells[i].bbox);
        if start - last_end > threshold {
            n += 1;
            last_end = end;
            let previous = std::mem::take(&mut current);
            sets[i].push(n);
            current.push(i);
            for j in previous {
                let (_, end_j) = axis.span(&cells[j].bbox);
                if end_j > start {
                    sets[j].push(n);
                    current.push(j);
                }
            }
        } else {
            sets[i].push(n);
            current.push(i);
        }
    }
    sets
}

/// Row indices (1-based) for each cell, in input order.
pub fn assign_rows(cells: &[Region], h: f64) -> Result<Vec<(Region, Vec<u32>)>, LayoutError> {
    check_cells(cells)?;
    let h = check_threshold(h)?;
    Ok(cells
        .iter()
        .copied()
        .zip(assign_axis(cells, h, Axis::Rows))
        .collect())
}

/// Column indices (1-based) for each cell, in input order. Mirror of
/// [`assign_rows`] along x.
pub fn assign_cols(cells: &[Region], w: f64) -> Result<Vec<(Region, Vec<u32>)>, LayoutError> {
    check_cells(cells)?;
    let w = check_threshold(w)?;
    Ok(cells
        .iter()
        .copied()
        .zip(assign_axis(cells, w, Axis::Cols))
        .collect())
}

/// Fraction of the median cell height used by [`TableConfig::Auto`].
pub const AUTO_THRESHOLD_FRACTION: f64 = 0.25;

/// Row/column gap thresholds for table construction.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TableConfig {
    /// A quarter of the median cell height for both rows and columns.
    ///
    /// The row rule compares a cell's top edge with the bottom edge of the
    /// cell that opened the previous row, i.e. it thresholds the inter-row
    /// gap. Same-row cells sit about one cell height below that threshold, so
    /// a fraction of the line height separates the two cases without
    /// requiring gaps wider than half a cell.
    #[default]
    Auto,
    Explicit {
        row_height: f64,
        col_width: f64,
    },
}

impl TableConfig {
    pub fn explicit(row_height: f64, col_width: f64) -> Result<Self, LayoutError> {
        Ok(TableConfig::Explicit {
            row_height: check_threshold(row_height)?,
            col_width: check_threshold(col_width)?,
        })
    }

    /// Resolved `(H, W)` for a non-empty set of cells.
    pub fn thresholds(&self, cells: &[Region]) -> (f64, f64) {
        match *self {
            TableConfig::Explicit {
                row_height,
                col_width,
            } => (row_height, col_width),
            TableConfig::Auto => {
                let heights: Vec<f64> = cells.iter().map(|c| c.bbox.height()).collect();
                let t = AUTO_THRESHOLD_FRACTION * median(heights);
                (t, t)
            }
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellPlacement {
    pub cell: Region,
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableStructure {
    pub table: Region,
    pub placements: Vec<CellPlacement>,
    pub n_rows: u32,
    pub n_cols: u32,
}

impl TableStructure {
    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }
}

/// Builds the row/column grid for the cells of one table.
///
/// A table without cells yields an empty 0x0 grid.
pub fn build_table(
    table: &Region,
    cells: &[Region],
    cfg: &TableConfig,
) -> Result<TableStructure, LayoutError> {
    if table.label != Label::Table {
        return Err(LayoutError::NotATable(table.label));
    }
    if cells.is_empty() {
        return Ok(TableStructure {
            table: *table,
            placements: Vec::new(),
            n_rows: 0,
            n_cols: 0,
        });
    }
    check_cells(cells)?;
    if let Some(i) = cells
        .iter()
        .position(|c| c.bbox.intersection_area(&table.bbox) <= 0.0)
    {
        return Err(LayoutError::CellOutsideTable(i));
    }

    let (h, w) = cfg.thresholds(cells);
    let h = check_threshold(h)?;
    let w = check_threshold(w)?;
    let rows = assign_axis(cells, h, Axis::Rows);
    let cols = assign_axis(cells, w, Axis::Cols);

    let mut placements: Vec<CellPlacement> = cells
        .iter()
        .zip(rows)
        .zip(cols)
        .map(|((cell, rows), cols)| CellPlacement {
            cell: *cell,
            rows,
            cols,
        })
        .collect();
    placements.sort_by(|a, b| {
        a.rows[0]
            .cmp(&b.rows[0])
            .then(a.cols[0].cmp(&b.cols[0]))
            .then(a.cell.bbox.geometric_cmp(&b.cell.bbox))
    });
    let n_rows = placements
        .iter()
        .flat_map(|p| p.rows.last())
        .copied()
        .max()
        .unwrap_or(0);
    let n_cols = placements
        .iter()
        .flat_map(|p| p.cols.last())
        .copied()
        .max()
        .unwrap_or(0);
    Ok(TableStructure {
        table: *table,
        placements,
        n_rows,
        n_cols,
    })
}

/// Marks attached to layout entries that need operator attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    /// A detected cell that intersects no table, demoted to a text block.
    OrphanCell,
    /// A table with no cells assigned to it.
    EmptyTable,
}

/// One top-level entry of a page layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EntryWire", into = "EntryWire")]
pub enum LayoutEntry {
    Block {
        region: Region,
        flags: Vec<Flag>,
    },
    Table {
        structure: TableStructure,
        flags: Vec<Flag>,
    },
}

impl LayoutEntry {
    pub fn region(&self) -> &Region {
        match self {
            LayoutEntry::Block { region, .. } => region,
            LayoutEntry::Table { structure, .. } => &structure.table,
        }
    }

    pub fn flags(&self) -> &[Flag] {
        match self {
            LayoutEntry::Block { flags, .. } | LayoutEntry::Table { flags, .. } => flags,
        }
    }

    pub fn as_table(&self) -> Option<&TableStructure> {
        match self {
            LayoutEntry::Table { structure, .. } => Some(structure),
            LayoutEntry::Block { .. } => None,
        }
    }

    /// Top-level page order: top edge, then left edge, then extent.
    pub fn order_cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.region(), other.region());
        a.bbox
            .ymin()
            .total_cmp(&b.bbox.ymin())
            .then(a.bbox.xmin().total_cmp(&b.bbox.xmin()))
            .then(a.bbox.ymax().total_cmp(&b.bbox.ymax()))
            .then(a.bbox.xmax().total_cmp(&b.bbox.xmax()))
            .then(a.label.cmp(&b.label))
            .then(b.score.total_cmp(&a.score))
    }
}

#[derive(Serialize, Deserialize)]
struct CellWire {
    bbox: BBox,
    rows: Vec<u32>,
    cols: Vec<u32>,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct EntryWire {
    class: Label,
    bbox: BBox,
    score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_rows: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_cols: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<CellWire>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    flags: Vec<Flag>,
}

impl From<LayoutEntry> for EntryWire {
    fn from(e: LayoutEntry) -> Self {
        match e {
            LayoutEntry::Block { region, flags } => EntryWire {
                class: region.label,
                bbox: region.bbox,
                score: region.score,
                n_rows: None,
                n_cols: None,
                cells: None,
                flags,
            },
            LayoutEntry::Table { structure, flags } => EntryWire {
                class: Label::Table,
                bbox: structure.table.bbox,
                score: structure.table.score,
                n_rows: Some(structure.n_rows),
                n_cols: Some(structure.n_cols),
                cells: Some(
                    structure
                        .placements
                        .into_iter()
                        .map(|p| CellWire {
                            bbox: p.cell.bbox,
                            rows: p.rows,
                            cols: p.cols,
                            score: p.cell.score,
                        })
                        .collect(),
                ),
                flags,
            },
        }
    }
}

fn contiguous(v: &[u32]) -> bool {
    !v.is_empty() && v[0] >= 1 && v.windows(2).all(|w| w[1] == w[0] + 1)
}

impl TryFrom<EntryWire> for LayoutEntry {
    type Error = LayoutError;

    fn try_from(w: EntryWire) -> Result<Self, Self::Error> {
        let region = Region::new(w.class, w.bbox, w.score)?;
        match w.class {
            Label::Cell => Err(LayoutError::InvalidEntry(
                "cell regions may not appear at top level".into(),
            )),
            Label::Table => {
                let (Some(n_rows), Some(n_cols), Some(cells)) = (w.n_rows, w.n_cols, w.cells)
                else {
                    return Err(LayoutError::InvalidEntry(
                        "table entries require n_rows, n_cols and cells".into(),
                    ));
                };
                let mut placements = Vec::with_capacity(cells.len());
                for c in cells {
                    if !contiguous(&c.rows) || !contiguous(&c.cols) {
                        return Err(LayoutError::InvalidEntry(
                            "cell rows/cols must be non-empty contiguous 1-based ranges".into(),
                        ));
                    }
                    if c.rows.last() > Some(&n_rows) || c.cols.last() > Some(&n_cols) {
                        return Err(LayoutError::InvalidEntry(
                            "cell index exceeds table dimensions".into(),
                        ));
                    }
                    placements.push(CellPlacement {
                        cell: Region::new(Label::Cell, c.bbox, c.score)?,
                        rows: c.rows,
                        cols: c.cols,
                    });
                }
                Ok(LayoutEntry::Table {
                    structure: TableStructure {
                        table: region,
                        placements,
                        n_rows,
                        n_cols,
                    },
                    flags: w.flags,
                })
            }
            _ => {
                if w.n_rows.is_some() || w.n_cols.is_some() || w.cells.is_some() {
                    return Err(LayoutError::InvalidEntry(format!(
                        "{} entries may not carry grid fields",
                        w.class
                    )));
                }
                Ok(LayoutEntry::Block {
                    region,
                    flags: w.flags,
                })
            }
        }
    }
}

/// Structured page layout, top-level entries ordered by top edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentLayout {
    pub page_id: String,
    pub regions: Vec<LayoutEntry>,
}

impl DocumentLayout {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    /// Every region in the layout as a flat list: top-level entries followed
    /// by their cells. Orphan cells keep their demoted `text_block` class
    /// unless `restore_orphans` is set, in which case they are reported as
    /// cells again.
    pub fn flatten(&self, restore_orphans: bool) -> Vec<Region> {
        let mut out = Vec::new();
        for e in &self.regions {
            match e {
                LayoutEntry::Block { region, flags } => {
                    let mut r = *region;
                    if restore_orphans && flags.contains(&Flag::OrphanCell) {
                        r.label = Label::Cell;
                    }
                    out.push(r);
                }
                LayoutEntry::Table { structure, .. } => {
                    out.push(structure.table);
                    out.extend(structure.placements.iter().map(|p| p.cell));
                }
            }
        }
        out
    }
}

/// Associates cells with tables, builds grids, and orders the page.
///
/// `regions` are expected to be post-combination. Each cell goes to the table
/// it intersects with the largest area; cells that intersect no table become
/// flagged text blocks.
pub fn assemble_document(page_id: &str, regions: &[Region], cfg: &TableConfig) -> DocumentLayout {
    let mut tables: Vec<Region> = regions
        .iter()
        .filter(|r| r.label == Label::Table)
        .copied()
        .collect();
    tables.sort_by(|a, b| a.bbox.geometric_cmp(&b.bbox).then(a.priority_cmp(b)));

    let mut members: Vec<Vec<Region>> = vec![Vec::new(); tables.len()];
    let mut entries: Vec<LayoutEntry> = Vec::new();

    for r in regions {
        match r.label {
            Label::Table => {}
            Label::Cell => {
                let best = tables
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, t.bbox.intersection_area(&r.bbox)))
                    .filter(|&(_, a)| a > 0.0)
                    .fold(None::<(usize, f64)>, |acc, (i, a)| match acc {
                        Some((_, best)) if best >= a => acc,
                        _ => Some((i, a)),
                    });
                match best {
                    Some((i, _)) => members[i].push(*r),
                    None => entries.push(LayoutEntry::Block {
                        region: Region {
                            label: Label::TextBlock,
                            ..*r
                        },
                        flags: vec![Flag::OrphanCell],
                    }),
                }
            }
            Label::TextBlock | Label::Handwriting => entries.push(LayoutEntry::Block {
                region: *r,
                flags: Vec::new(),
            }),
        }
    }

    for (table, cells) in tables.iter().zip(members) {
        let structure =
            build_table(table, &cells, cfg).expect("cells were assigned by positive intersection");
        let flags = if structure.is_empty() {
            vec![Flag::EmptyTable]
        } else {
            Vec::new()
        };
        entries.push(LayoutEntry::Table { structure, flags });
    }

    entries.sort_by(LayoutEntry::order_cmp);
    DocumentLayout {
        page_id: page_id.to_string(),
        regions: entries,
    }
}
