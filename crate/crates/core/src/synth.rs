//! Seeded synthetic page layouts and a noisy detector simulator.
//!
//! Pages are geometry only: tables laid out on exact grids, text blocks and
//! handwriting boxes stacked down the page. The simulator turns ground truth
//! into proposals with coordinate jitter, fragmentation of cells and text
//! blocks into overlapping pieces, spurious boxes and dropped detections.
//!
//! Everything is a pure function of `(config, seed)`. Per-document streams are
//! derived from the seed and the document index (generation) or page id
//! (simulation), so corpora can be produced in any order or in parallel.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Label, Region};
use crate::layout::{CellPlacement, DocumentLayout, Flag, LayoutEntry, TableStructure};
use crate::pipeline::ProposalSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("page too small: elements need {required} px of height but only {available} px fit between the margins")]
    PageTooSmall { required: f64, available: f64 },
    #[error("page too narrow: a {what} needs at least {required} px but only {available} px fit between the margins")]
    PageTooNarrow {
        what: &'static str,
        required: f64,
        available: f64,
    },
}

/// Inclusive integer range, serialized as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[u32; 2]", into = "[u32; 2]")]
pub struct IntRange {
    pub min: u32,
    pub max: u32,
}

impl IntRange {
    pub const fn new(min: u32, max: u32) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        rng.gen_range(self.min..=self.max)
    }

    fn check(&self, name: &str) -> Result<(), SynthError> {
        if self.min > self.max {
            return Err(SynthError::InvalidConfig(format!(
                "{name}: empty range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

impl From<[u32; 2]> for IntRange {
    fn from(v: [u32; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<IntRange> for [u32; 2] {
    fn from(r: IntRange) -> Self {
        [r.min, r.max]
    }
}

/// Inclusive real range, serialized as `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct RealRange {
    pub min: f64,
    pub max: f64,
}

impl RealRange {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }

    fn check(&self, name: &str) -> Result<(), SynthError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.min <= self.max) {
            return Err(SynthError::InvalidConfig(format!(
                "{name}: empty or non-finite range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

impl From<[f64; 2]> for RealRange {
    fn from(v: [f64; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<RealRange> for [f64; 2] {
    fn from(r: RealRange) -> Self {
        [r.min, r.max]
    }
}

/// Page generator settings. Sizes are integer pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub page_width: u32,
    pub page_height: u32,
    pub margin: u32,
    pub n_tables: IntRange,
    pub n_text_blocks: IntRange,
    pub n_handwriting: IntRange,
    pub rows: IntRange,
    pub cols: IntRange,
    pub cell_height: IntRange,
    pub cell_width: IntRange,
    /// Gap between neighbouring cells, both directions, as a fraction of the
    /// table's cell height. Must stay above
    /// [`AUTO_THRESHOLD_FRACTION`](crate::layout::AUTO_THRESHOLD_FRACTION) for
    /// grids to be recoverable with the automatic thresholds.
    pub cell_gap: RealRange,
    pub table_padding: u32,
    /// Probability of trying to merge a grid slot with its right or lower
    /// neighbour into one spanning cell.
    pub span_rate: f64,
    pub text_block_width: IntRange,
    pub text_block_height: IntRange,
    pub handwriting_width: IntRange,
    pub handwriting_height: IntRange,
    pub element_spacing: IntRange,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            page_width: 2480,
            page_height: 3508,
            margin: 100,
            n_tables: IntRange::new(0, 2),
            n_text_blocks: IntRange::new(1, 5),
            n_handwriting: IntRange::new(0, 4),
            rows: IntRange::new(2, 6),
            cols: IntRange::new(2, 5),
            cell_height: IntRange::new(30, 60),
            cell_width: IntRange::new(100, 250),
            cell_gap: RealRange::new(0.4, 0.8),
            table_padding: 10,
            span_rate: 0.0,
            text_block_width: IntRange::new(300, 2000),
            text_block_height: IntRange::new(40, 160),
            handwriting_width: IntRange::new(200, 600),
            handwriting_height: IntRange::new(60, 150),
            element_spacing: IntRange::new(20, 60),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, r) in [
            ("n_tables", self.n_tables),
            ("n_text_blocks", self.n_text_blocks),
            ("n_handwriting", self.n_handwriting),
            ("rows", self.rows),
            ("cols", self.cols),
            ("cell_height", self.cell_height),
            ("cell_width", self.cell_width),
            ("text_block_width", self.text_block_width),
            ("text_block_height", self.text_block_height),
            ("handwriting_width", self.handwriting_width),
            ("handwriting_height", self.handwriting_height),
            ("element_spacing", self.element_spacing),
        ] {
            r.check(name)?;
        }
        self.cell_gap.check("cell_gap")?;
        let positive = [
            ("rows", self.rows.min),
            ("cols", self.cols.min),
            ("cell_height", self.cell_height.min),
            ("cell_width", self.cell_width.min),
            ("text_block_width", self.text_block_width.min),
            ("text_block_height", self.text_block_height.min),
            ("handwriting_width", self.handwriting_width.min),
            ("handwriting_height", self.handwriting_height.min),
            ("page_width", self.page_width),
            ("page_height", self.page_height),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SynthError::InvalidConfig(format!(
                "{name} must be positive"
            )));
        }
        if self.cell_gap.min <= 0.0 {
            return Err(SynthError::InvalidConfig(
                "cell_gap must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.span_rate) {
            return Err(SynthError::InvalidConfig(
                "span_rate must lie in [0, 1]".into(),
            ));
        }
        if 2 * self.margin >= self.page_width || 2 * self.margin >= self.page_height {
            return Err(SynthError::InvalidConfig(
                "margins leave no room on the page".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTruth {
    pub cell: Region,
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableTruth {
    pub table: Region,
    pub n_rows: u32,
    pub n_cols: u32,
    pub cells: Vec<CellTruth>,
}

/// Ground truth for one synthetic page. One JSON line per page in truth files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDoc {
    pub page_id: String,
    pub width: u32,
    pub height: u32,
    pub tables: Vec<TableTruth>,
    pub text_blocks: Vec<Region>,
    pub handwriting: Vec<Region>,
}

impl GroundTruthDoc {
    /// All truth regions: each table followed by its cells, then text blocks,
    /// then handwriting.
    pub fn regions(&self) -> Vec<Region> {
        let mut out = Vec::new();
        for t in &self.tables {
            out.push(t.table);
            out.extend(t.cells.iter().map(|c| c.cell));
        }
        out.extend(&self.text_blocks);
        out.extend(&self.handwriting);
        out
    }

    pub fn cells(&self) -> impl Iterator<Item = &CellTruth> {
        self.tables.iter().flat_map(|t| t.cells.iter())
    }

    /// The layout a perfect pipeline would produce for this page.
    pub fn to_layout(&self) -> DocumentLayout {
        let mut entries: Vec<LayoutEntry> = self
            .text_blocks
            .iter()
            .chain(&self.handwriting)
            .map(|r| LayoutEntry::Block {
                region: *r,
                flags: Vec::new(),
            })
            .collect();
        for t in &self.tables {
            let mut placements: Vec<CellPlacement> = t
                .cells
                .iter()
                .map(|c| CellPlacement {
                    cell: c.cell,
                    rows: c.rows.clone(),
                    cols: c.cols.clone(),
                })
                .collect();
            placements.sort_by_key(|p| (p.rows[0], p.cols[0]));
            let flags = if placements.is_empty() {
                vec![Flag::EmptyTable]
            } else {
                Vec::new()
            };
            entries.push(LayoutEntry::Table {
                structure: TableStructure {
                    table: t.table,
                    placements,
                    n_rows: t.n_rows,
                    n_cols: t.n_cols,
                },
                flags,
            });
        }
        entries.sort_by(LayoutEntry::order_cmp);
        DocumentLayout {
            page_id: self.page_id.clone(),
            regions: entries,
        }
    }
}

fn truth(label: Label, x0: f64, y0: f64, x1: f64, y1: f64) -> Region {
    Region::new(
        label,
        BBox::new(x0, y0, x1, y1).expect("generator emits valid boxes"),
        1.0,
    )
    .expect("unit score")
}

enum Element {
    Table {
        rows: u32,
        cols: u32,
        cell_w: f64,
        cell_h: f64,
        gap_x: f64,
        gap_y: f64,
        width: f64,
        height: f64,
    },
    Block {
        label: Label,
        width: f64,
        height: f64,
    },
}

impl Element {
    fn size(&self) -> (f64, f64) {
        match self {
            Element::Table { width, height, .. } | Element::Block { width, height, .. } => {
                (*width, *height)
            }
        }
    }
}

/// Grid slots covered by one cell: top-left slot plus extent.
#[derive(Clone, Copy)]
struct Slot {
    row: u32,
    col: u32,
    rows: u32,
    cols: u32,
}

/// Merges pairs of grid slots into spanning cells while every row and column
/// keeps a single-slot cell starting on it and more than half of the cells
/// stay single-height and single-width. Those conditions keep the automatic
/// thresholds at half a unit cell and keep every grid line anchored.
fn plan_spans<R: Rng>(rows: u32, cols: u32, rate: f64, rng: &mut R) -> Vec<Slot> {
    let unit = |row, col| Slot {
        row,
        col,
        rows: 1,
        cols: 1,
    };
    let mut slots: Vec<Slot> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| unit(r, c)))
        .collect();
    if rate <= 0.0 {
        return slots;
    }

    let valid = |slots: &[Slot]| {
        let n = slots.len();
        let tall = slots.iter().filter(|s| s.rows > 1).count();
        let wide = slots.iter().filter(|s| s.cols > 1).count();
        let rows_ok = (0..rows).all(|r| slots.iter().any(|s| s.row == r && s.rows == 1));
        let cols_ok = (0..cols).all(|c| slots.iter().any(|s| s.col == c && s.cols == 1));
        rows_ok && cols_ok && 2 * tall < n && 2 * wide < n
    };

    for r in 0..rows {
        for c in 0..cols {
            if !rng.gen_bool(rate) {
                continue;
            }
            let down = rng.gen_bool(0.5);
            let (tr, tc) = if down { (r + 1, c) } else { (r, c + 1) };
            let find = |slots: &[Slot], rr, cc| {
                slots
                    .iter()
                    .position(|s| s.row == rr && s.col == cc && s.rows == 1 && s.cols == 1)
            };
            let (Some(a), Some(b)) = (find(&slots, r, c), find(&slots, tr, tc)) else {
                continue;
            };
            let mut trial = slots.clone();
            trial[a] = Slot {
                row: r,
                col: c,
                rows: if down { 2 } else { 1 },
                cols: if down { 1 } else { 2 },
            };
            trial.remove(b);
            if valid(&trial) {
                slots = trial;
            }
        }
    }
    slots
}

fn doc_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One page from `cfg.seed`.
pub fn generate_document(cfg: &GenConfig) -> Result<GroundTruthDoc, SynthError> {
    generate_indexed(cfg, 0)
}

/// `count` pages; page `i` uses stream `i` of `cfg.seed`.
pub fn generate_corpus(cfg: &GenConfig, count: usize) -> Result<Vec<GroundTruthDoc>, SynthError> {
    (0..count as u64)
        .map(|i| generate_indexed(cfg, i))
        .collect()
}

pub fn generate_indexed(cfg: &GenConfig, index: u64) -> Result<GroundTruthDoc, SynthError> {
    cfg.validate()?;
    let mut rng = doc_rng(cfg.seed, index);
    let margin = cfg.margin as f64;
    let avail_w = cfg.page_width as f64 - 2.0 * margin;
    let avail_h = cfg.page_height as f64 - 2.0 * margin;
    let pad = cfg.table_padding as f64;

    let mut kinds: Vec<Label> = Vec::new();
    kinds.extend(std::iter::repeat_n(
        Label::Table,
        cfg.n_tables.sample(&mut rng) as usize,
    ));
    kinds.extend(std::iter::repeat_n(
        Label::TextBlock,
        cfg.n_text_blocks.sample(&mut rng) as usize,
    ));
    kinds.extend(std::iter::repeat_n(
        Label::Handwriting,
        cfg.n_handwriting.sample(&mut rng) as usize,
    ));
    kinds.shuffle(&mut rng);

    let mut elements = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let el = match kind {
            Label::Table => {
                let rows = cfg.rows.sample(&mut rng);
                let cols = cfg.cols.sample(&mut rng);
                let cell_h = cfg.cell_height.sample(&mut rng) as f64;
                let gap_ry = cfg.cell_gap.sample(&mut rng);
                let gap_rx = cfg.cell_gap.sample(&mut rng);
                let gap_y = (gap_ry * cell_h).round().max(1.0);
                let gap_x = (gap_rx * cell_h).round().max(1.0);
                // narrow columns so the widest tables still fit
                let fit = ((avail_w - 2.0 * pad - (cols - 1) as f64 * gap_x) / cols as f64).floor();
                if fit < 1.0 {
                    return Err(SynthError::PageTooNarrow {
                        what: "table",
                        required: 2.0 * pad + cols as f64 + (cols - 1) as f64 * gap_x,
                        available: avail_w,
                    });
                }
                let cell_w = (cfg.cell_width.sample(&mut rng) as f64).min(fit);
                let width = 2.0 * pad + cols as f64 * cell_w + (cols - 1) as f64 * gap_x;
                let height = 2.0 * pad + rows as f64 * cell_h + (rows - 1) as f64 * gap_y;
                if width > avail_w {
                    return Err(SynthError::PageTooNarrow {
                        what: "table",
                        required: width,
                        available: avail_w,
                    });
                }
                Element::Table {
                    rows,
                    cols,
                    cell_w,
                    cell_h,
                    gap_x,
                    gap_y,
                    width,
                    height,
                }
            }
            label => {
                let (wr, hr) = if label == Label::TextBlock {
                    (cfg.text_block_width, cfg.text_block_height)
                } else {
                    (cfg.handwriting_width, cfg.handwriting_height)
                };
                let width = (wr.sample(&mut rng) as f64).min(avail_w.floor());
                let height = hr.sample(&mut rng) as f64;
                Element::Block {
                    label,
                    width,
                    height,
                }
            }
        };
        elements.push(el);
    }

    let spacings: Vec<f64> = (0..elements.len().saturating_sub(1))
        .map(|_| cfg.element_spacing.sample(&mut rng) as f64)
        .collect();
    let required: f64 =
        elements.iter().map(|e| e.size().1).sum::<f64>() + spacings.iter().sum::<f64>();
    if required > avail_h {
        return Err(SynthError::PageTooSmall {
            required,
            available: avail_h,
        });
    }

    let mut doc = GroundTruthDoc {
        page_id: format!("synth-{}-{:05}", cfg.seed, index),
        width: cfg.page_width,
        height: cfg.page_height,
        tables: Vec::new(),
        text_blocks: Vec::new(),
        handwriting: Vec::new(),
    };

    let mut y = margin;
    for (i, el) in elements.iter().enumerate() {
        let (width, height) = el.size();
        let slack = (avail_w - width).floor() as u32;
        let x = margin + rng.gen_range(0..=slack) as f64;
        match *el {
            Element::Block { label, .. } => {
                let r = truth(label, x, y, x + width, y + height);
                if label == Label::TextBlock {
                    doc.text_blocks.push(r);
                } else {
                    doc.handwriting.push(r);
                }
            }
            Element::Table {
                rows,
                cols,
                cell_w,
                cell_h,
                gap_x,
                gap_y,
                ..
            } => {
                let slots = plan_spans(rows, cols, cfg.span_rate, &mut rng);
                let cells = slots
                    .iter()
                    .map(|s| {
                        let x0 = x + pad + s.col as f64 * (cell_w + gap_x);
                        let y0 = y + pad + s.row as f64 * (cell_h + gap_y);
                        let x1 = x0 + s.cols as f64 * cell_w + (s.cols - 1) as f64 * gap_x;
                        let y1 = y0 + s.rows as f64 * cell_h + (s.rows - 1) as f64 * gap_y;
                        CellTruth {
                            cell: truth(Label::Cell, x0, y0, x1, y1),
                            rows: (s.row + 1..=s.row + s.rows).collect(),
                            cols: (s.col + 1..=s.col + s.cols).collect(),
                        }
                    })
                    .collect();
                doc.tables.push(TableTruth {
                    table: truth(Label::Table, x, y, x + width, y + height),
                    n_rows: rows,
                    n_cols: cols,
                    cells,
                });
            }
        }
        if let Some(s) = spacings.get(i) {
            y += height + s;
        }
    }
    Ok(doc)
}

/// Detector simulator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Standard deviation of per-coordinate Gaussian jitter, pixels.
    pub jitter_sigma: f64,
    /// Probability a cell or text block is split into 2-4 overlapping fragments.
    pub fragmentation_rate: f64,
    /// Expected number of spurious boxes per page.
    pub spurious_rate: f64,
    /// Probability a truth region produces no proposal at all.
    pub drop_rate: f64,
    /// Scores are `1 - |N(0, score_sigma)|`, clamped to `[score_floor, 1]`.
    pub score_sigma: f64,
    pub score_floor: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            jitter_sigma: 0.0,
            fragmentation_rate: 0.0,
            spurious_rate: 0.0,
            drop_rate: 0.0,
            score_sigma: 0.0,
            score_floor: 0.05,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let unit = [
            ("fragmentation_rate", self.fragmentation_rate),
            ("drop_rate", self.drop_rate),
            ("score_floor", self.score_floor),
        ];
        if let Some((name, v)) = unit.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return Err(SynthError::InvalidConfig(format!(
                "{name} must lie in [0, 1], got {v}"
            )));
        }
        let nonneg = [
            ("jitter_sigma", self.jitter_sigma),
            ("spurious_rate", self.spurious_rate),
            ("score_sigma", self.score_sigma),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(SynthError::InvalidConfig(format!(
                "{name} must be >= 0, got {v}"
            )));
        }
        Ok(())
    }
}

/// FNV-1a, used to derive a per-page noise stream from the page id.
fn page_stream(page_id: &str) -> u64 {
    page_id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Splits a box along its long axis into `k` pieces whose neighbours overlap
/// by 5-15% of the nominal piece length. The union of the pieces is the box.
fn fragment<R: Rng>(b: &BBox, k: u32, rng: &mut R) -> Vec<BBox> {
    let horizontal = b.width() >= b.height();
    let (start, end) = if horizontal {
        (b.xmin(), b.xmax())
    } else {
        (b.ymin(), b.ymax())
    };
    let len = end - start;
    let piece = len / k as f64;
    let cuts: Vec<f64> = (1..k)
        .map(|i| start + piece * (i as f64 + rng.gen_range(-0.25..=0.25)))
        .collect();
    let overlaps: Vec<f64> = (1..k).map(|_| piece * rng.gen_range(0.05..=0.15)).collect();

    (0..k as usize)
        .map(|i| {
            let lo = if i == 0 {
                start
            } else {
                cuts[i - 1] - overlaps[i - 1] / 2.0
            };
            let hi = if i + 1 == k as usize {
                end
            } else {
                cuts[i] + overlaps[i] / 2.0
            };
            if horizontal {
                BBox::new(lo, b.ymin(), hi, b.ymax())
            } else {
                BBox::new(b.xmin(), lo, b.xmax(), hi)
            }
            .expect("pieces keep positive length")
        })
        .collect()
}

fn jitter<R: Rng>(b: &BBox, normal: &Option<Normal<f64>>, rng: &mut R) -> BBox {
    let Some(n) = normal else { return *b };
    let c = b.to_array();
    let moved = [
        c[0] + n.sample(rng),
        c[1] + n.sample(rng),
        c[2] + n.sample(rng),
        c[3] + n.sample(rng),
    ];
    BBox::try_from(moved).unwrap_or(*b)
}

/// Noisy proposals for one page.
pub fn simulate_proposals(
    gt: &GroundTruthDoc,
    noise: &NoiseConfig,
) -> Result<Vec<Region>, SynthError> {
    noise.validate()?;
    let mut rng = doc_rng(noise.seed, page_stream(&gt.page_id));
    let coord_noise = (noise.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, noise.jitter_sigma).expect("sigma validated"));
    let score_noise = (noise.score_sigma > 0.0)
        .then(|| Normal::new(0.0, noise.score_sigma).expect("sigma validated"));
    let score = |rng: &mut ChaCha8Rng| match &score_noise {
        Some(n) => (1.0 - n.sample(rng).abs()).clamp(noise.score_floor, 1.0),
        None => 1.0,
    };

    let mut out = Vec::new();
    for r in gt.regions() {
        if noise.drop_rate > 0.0 && rng.gen_bool(noise.drop_rate) {
            continue;
        }
        let fragmentable = matches!(r.label, Label::Cell | Label::TextBlock);
        let pieces = if fragmentable
            && noise.fragmentation_rate > 0.0
            && rng.gen_bool(noise.fragmentation_rate)
        {
            let k = rng.gen_range(2..=4);
            fragment(&r.bbox, k, &mut rng)
        } else {
            vec![r.bbox]
        };
        for p in pieces {
            let bbox = jitter(&p, &coord_noise, &mut rng);
            let s = score(&mut rng);
            out.push(Region::new(r.label, bbox, s).expect("score clamped to [0, 1]"));
        }
    }

    if noise.spurious_rate > 0.0 {
        let count = Poisson::new(noise.spurious_rate)
            .expect("rate validated")
            .sample(&mut rng) as usize;
        for _ in 0..count {
            let label = if rng.gen_bool(0.5) {
                Label::Cell
            } else {
                Label::TextBlock
            };
            let w = rng.gen_range(50.0..400.0f64).min(gt.width as f64 - 1.0);
            let h = rng.gen_range(20.0..120.0f64).min(gt.height as f64 - 1.0);
            let x = rng.gen_range(0.0..(gt.width as f64 - w));
            let y = rng.gen_range(0.0..(gt.height as f64 - h));
            let bbox = BBox::new(x, y, x + w, y + h).expect("positive size");
            out.push(Region::new(label, bbox, rng.gen_range(0.1..0.6)).expect("score in range"));
        }
    }
    Ok(out)
}

pub fn simulate_set(gt: &GroundTruthDoc, noise: &NoiseConfig) -> Result<ProposalSet, SynthError> {
    Ok(ProposalSet {
        page_id: gt.page_id.clone(),
        width: gt.width,
        height: gt.height,
        regions: simulate_proposals(gt, noise)?,
    })
}
