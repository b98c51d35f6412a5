//! Axis-aligned rectangle arithmetic and class-wise non-maximum suppression.
//!
//! Coordinates are pixels with the origin at the top-left corner and `y`
//! growing downward. Boxes are closed rectangles with strictly positive area.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("bbox coordinates must be finite, got [{0}, {1}, {2}, {3}]")]
    NonFinite(f64, f64, f64, f64),
    #[error("bbox must have xmax > xmin and ymax > ymin, got [{0}, {1}, {2}, {3}]")]
    Degenerate(f64, f64, f64, f64),
    #[error("score must lie in [0, 1], got {0}")]
    ScoreOutOfRange(f64),
    #[error("iou threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("regions must share one class; found {first} and {other} (partition by class first)")]
    MixedClasses { first: Label, other: Label },
}

/// Axis-aligned rectangle `[xmin, ymin, xmax, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    xmin: f64,
    ymin: f64,
    xmax: f64,
    ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, GeometryError> {
        if !(xmin.is_finite() && ymin.is_finite() && xmax.is_finite() && ymax.is_finite()) {
            return Err(GeometryError::NonFinite(xmin, ymin, xmax, ymax));
        }
        if xmax <= xmin || ymax <= ymin {
            return Err(GeometryError::Degenerate(xmin, ymin, xmax, ymax));
        }
        Ok(Self {
            xmin,
            ymin,
            xmax,
            ymax,
        })
    }

    #[inline]
    pub fn xmin(&self) -> f64 {
        self.xmin
    }
    #[inline]
    pub fn ymin(&self) -> f64 {
        self.ymin
    }
    #[inline]
    pub fn xmax(&self) -> f64 {
        self.xmax
    }
    #[inline]
    pub fn ymax(&self) -> f64 {
        self.ymax
    }
    #[inline]
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }
    #[inline]
    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }
    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.xmin <= other.xmin
            && self.ymin <= other.ymin
            && self.xmax >= other.xmax
            && self.ymax >= other.ymax
    }

    /// Total order used for deterministic tie-breaking: position first, then extent.
    pub fn geometric_cmp(&self, other: &BBox) -> Ordering {
        self.ymin
            .total_cmp(&other.ymin)
            .then(self.xmin.total_cmp(&other.xmin))
            .then(self.ymax.total_cmp(&other.ymax))
            .then(self.xmax.total_cmp(&other.xmax))
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = <[f64; 4]>::deserialize(deserializer)?;
        BBox::try_from(raw).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union. Returns a value in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Minimal rectangle containing both boxes.
pub fn bounding_union(a: &BBox, b: &BBox) -> BBox {
    BBox {
        xmin: a.xmin.min(b.xmin),
        ymin: a.ymin.min(b.ymin),
        xmax: a.xmax.max(b.xmax),
        ymax: a.ymax.max(b.ymax),
    }
}

/// Layout classes produced by the detectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Handwriting,
    Table,
    Cell,
    TextBlock,
}

impl Label {
    pub const ALL: [Label; 4] = [
        Label::Handwriting,
        Label::Table,
        Label::Cell,
        Label::TextBlock,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Handwriting => "handwriting",
            Label::Table => "table",
            Label::Cell => "cell",
            Label::TextBlock => "text_block",
        }
    }

    /// Dense class index, stable across releases.
    pub fn index(&self) -> usize {
        match self {
            Label::Handwriting => 0,
            Label::Table => 1,
            Label::Cell => 2,
            Label::TextBlock => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown class '{s}'"))
    }
}

/// A class-labeled, scored box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "class")]
    pub label: Label,
    pub bbox: BBox,
    #[serde(deserialize_with = "de_score")]
    pub score: f64,
}

fn de_score<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
    let s = f64::deserialize(deserializer)?;
    check_score(s).map_err(serde::de::Error::custom)
}

fn check_score(score: f64) -> Result<f64, GeometryError> {
    if (0.0..=1.0).contains(&score) {
        Ok(score)
    } else {
        Err(GeometryError::ScoreOutOfRange(score))
    }
}

impl Region {
    pub fn new(label: Label, bbox: BBox, score: f64) -> Result<Self, GeometryError> {
        Ok(Self {
            label,
            bbox,
            score: check_score(score)?,
        })
    }

    /// Convenience constructor for literal coordinates.
    pub fn from_coords(label: Label, coords: [f64; 4], score: f64) -> Result<Self, GeometryError> {
        Region::new(label, BBox::try_from(coords)?, score)
    }

    /// Suppression priority: higher score, then larger area, then smaller xmin, then smaller ymin.
    pub fn priority_cmp(&self, other: &Region) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(other.bbox.area().total_cmp(&self.bbox.area()))
            .then(self.bbox.xmin.total_cmp(&other.bbox.xmin))
            .then(self.bbox.ymin.total_cmp(&other.bbox.ymin))
            .then(self.bbox.xmax.total_cmp(&other.bbox.xmax))
            .then(self.bbox.ymax.total_cmp(&other.bbox.ymax))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    iou_threshold: f64,
}

impl NmsConfig {
    pub fn new(iou_threshold: f64) -> Result<Self, GeometryError> {
        if iou_threshold > 0.0 && iou_threshold <= 1.0 {
            Ok(Self { iou_threshold })
        } else {
            Err(GeometryError::BadThreshold(iou_threshold))
        }
    }

    pub fn iou_threshold(&self) -> f64 {
        self.iou_threshold
    }
}

/// Returns the shared label of `regions`, or an error if classes are mixed.
pub fn common_label(regions: &[Region]) -> Result<Option<Label>, GeometryError> {
    let Some(first) = regions.first() else {
        return Ok(None);
    };
    match regions.iter().find(|r| r.label != first.label) {
        Some(other) => Err(GeometryError::MixedClasses {
            first: first.label,
            other: other.label,
        }),
        None => Ok(Some(first.label)),
    }
}

/// Greedy non-maximum suppression over regions of a single class.
///
/// A region is dropped when a retained region of higher priority overlaps it
/// with IoU strictly above the threshold. Output is in descending priority.
pub fn nms(regions: &[Region], cfg: &NmsConfig) -> Result<Vec<Region>, GeometryError> {
    common_label(regions)?;
    let mut sorted = regions.to_vec();
    sorted.sort_by(Region::priority_cmp);

    let mut keep: Vec<Region> = Vec::with_capacity(sorted.len());
    for cand in sorted {
        if keep
            .iter()
            .all(|k| iou(&k.bbox, &cand.bbox) <= cfg.iou_threshold)
        {
            keep.push(cand);
        }
    }
    Ok(keep)
}
