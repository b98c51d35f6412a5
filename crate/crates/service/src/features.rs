//! Geometric feature vectors for region classification.
//!
//! The service's classifier stands in for the detector head: it sees one
//! region in the context of its page and predicts its class. Corrections
//! produce labelled feature vectors that feed incremental training.

use docstruct_core::Region;

pub const FEATURE_DIM: usize = 12;

/// Features of `regions[index]` relative to the page and its neighbours.
/// All values are roughly unit-scaled.
pub fn region_features(regions: &[Region], index: usize, width: f64, height: f64) -> Vec<f64> {
    let r = &regions[index];
    let b = r.bbox;
    let (w, h) = (b.width(), b.height());
    let mut contains = 0usize;
    let mut contained_by = 0usize;
    let mut max_overlap: f64 = 0.0;
    for (j, other) in regions.iter().enumerate() {
        if j == index {
            continue;
        }
        if b.contains(&other.bbox) {
            contains += 1;
        }
        if other.bbox.contains(&b) {
            contained_by += 1;
        }
        let inter = b.intersection_area(&other.bbox);
        if b.area() > 0.0 {
            max_overlap = max_overlap.max(inter / b.area());
        }
    }
    vec![
        b.xmin() / width,
        b.ymin() / height,
        b.xmax() / width,
        b.ymax() / height,
        w / width,
        h / height,
        ((w.max(1.0) / h.max(1.0)).ln() / 4.0).clamp(-2.0, 2.0),
        (b.area() / (width * height)).sqrt(),
        r.score,
        (contains as f64 + 1.0).ln() / 4.0,
        contained_by.min(4) as f64 / 4.0,
        max_overlap,
    ]
}

/// Features for every region, in order.
pub fn page_features(regions: &[Region], width: f64, height: f64) -> Vec<Vec<f64>> {
    (0..regions.len())
        .map(|i| region_features(regions, i, width, height))
        .collect()
}
