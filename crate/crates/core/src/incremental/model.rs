//! Layer-grouped multilayer classifier with hand-written backpropagation.
//!
//! Every layer is one group. Hidden groups are `tanh(W x + b)`; the final
//! group produces class logits, either `W h + b` (softmax head) or
//! `ŵ_j · h` with unit-norm class directions `ŵ_j` (angular head).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input has dimension {got}, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("margin must be at least 1, got {0}")]
    BadMargin(u32),
    #[error("model structures differ: {0}")]
    StructureMismatch(String),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("invalid multi-task terms: {0}")]
    BadTerms(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Softmax,
    #[serde(rename = "a_softmax")]
    ASoftmax,
}

/// Dense map `out = W in + b`, weights row-major `outputs x inputs`.
/// The angular head carries no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize, with_bias: bool) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: if with_bias {
                vec![0.0; outputs]
            } else {
                Vec::new()
            },
        }
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.inputs..(j + 1) * self.inputs]
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|j| {
                let b = self.bias.get(j).copied().unwrap_or(0.0);
                b + dot(self.row(j), x)
            })
            .collect()
    }

    /// Row directions; an all-zero row stays zero.
    pub fn normalized_rows(&self) -> Vec<f64> {
        let mut out = self.weights.clone();
        for j in 0..self.outputs {
            let row = &mut out[j * self.inputs..(j + 1) * self.inputs];
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        out
    }

    fn normalize_rows_in_place(&mut self) {
        self.weights = self.normalized_rows();
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// All group outputs of one forward pass; the last entry is the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub groups: Vec<Vec<f64>>,
}

impl Forward {
    pub fn logits(&self) -> &[f64] {
        self.groups.last().expect("at least two groups")
    }

    /// Input to the final group.
    pub fn feature(&self) -> &[f64] {
        &self.groups[self.groups.len() - 2]
    }
}

/// Parameter-shaped gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub groups: Vec<Dense>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.groups {
            g.weights
                .iter_mut()
                .chain(g.bias.iter_mut())
                .for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            a.weights
                .iter_mut()
                .zip(&b.weights)
                .for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Gradient arriving at the final group that does not pass through the
/// plain logits, e.g. from the angular-margin target term.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub d_feature: Vec<f64>,
    /// With respect to the normalized class directions, row-major.
    pub d_directions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Snapshot", into = "Snapshot")]
pub struct GroupedClassifier {
    groups: Vec<Dense>,
    head: HeadKind,
}

pub const SNAPSHOT_FORMAT: &str = "docstruct.grouped_classifier";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    head: HeadKind,
    groups: Vec<Dense>,
}

impl From<GroupedClassifier> for Snapshot {
    fn from(m: GroupedClassifier) -> Self {
        Snapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            head: m.head,
            groups: m.groups,
        }
    }
}

impl TryFrom<Snapshot> for GroupedClassifier {
    type Error = ModelError;

    fn try_from(s: Snapshot) -> Result<Self, Self::Error> {
        if s.format != SNAPSHOT_FORMAT || s.version != SNAPSHOT_VERSION {
            return Err(ModelError::Invalid(format!(
                "unsupported snapshot {} v{}",
                s.format, s.version
            )));
        }
        GroupedClassifier::from_groups(s.groups, s.head)
    }
}

impl GroupedClassifier {
    /// Xavier-uniform initialization. `hidden` lists hidden group widths.
    pub fn new<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        head: HeadKind,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let mut m = Self::zeros(input_dim, hidden, classes, head)?;
        for g in &mut m.groups {
            let limit = (6.0 / (g.inputs + g.outputs) as f64).sqrt();
            g.weights
                .iter_mut()
                .for_each(|w| *w = rng.gen_range(-limit..=limit));
        }
        if head == HeadKind::ASoftmax {
            m.groups
                .last_mut()
                .expect("groups")
                .normalize_rows_in_place();
        }
        Ok(m)
    }

    pub fn zeros(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        head: HeadKind,
    ) -> Result<Self, ModelError> {
        if hidden.is_empty() {
            return Err(ModelError::Invalid("need at least one hidden group".into()));
        }
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(ModelError::Invalid("dimensions must be positive".into()));
        }
        let mut groups = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input_dim;
        for &h in hidden {
            groups.push(Dense::zeros(prev, h, true));
            prev = h;
        }
        groups.push(Dense::zeros(prev, classes, head == HeadKind::Softmax));
        Ok(Self { groups, head })
    }

    pub fn from_groups(groups: Vec<Dense>, head: HeadKind) -> Result<Self, ModelError> {
        if groups.len() < 2 {
            return Err(ModelError::Invalid("need at least two groups".into()));
        }
        for (i, g) in groups.iter().enumerate() {
            let last = i + 1 == groups.len();
            let want_bias = !(last && head == HeadKind::ASoftmax);
            if g.weights.len() != g.inputs * g.outputs
                || g.bias.len() != if want_bias { g.outputs } else { 0 }
                || g.inputs == 0
                || g.outputs == 0
            {
                return Err(ModelError::Invalid(format!(
                    "group {} has inconsistent shape",
                    i + 1
                )));
            }
            if i > 0 && groups[i - 1].outputs != g.inputs {
                return Err(ModelError::Invalid(format!(
                    "group {} expects {} inputs but group {} emits {}",
                    i + 1,
                    g.inputs,
                    i,
                    groups[i - 1].outputs
                )));
            }
            if g.weights.iter().chain(&g.bias).any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "group {} has non-finite values",
                    i + 1
                )));
            }
        }
        Ok(Self { groups, head })
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn groups(&self) -> &[Dense] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn input_dim(&self) -> usize {
        self.groups[0].inputs
    }

    pub fn classes(&self) -> usize {
        self.head_group().outputs
    }

    pub fn head_group(&self) -> &Dense {
        self.groups.last().expect("at least two groups")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward, ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(self.groups.len());
        let last = self.groups.len() - 1;
        for (i, g) in self.groups.iter().enumerate() {
            let input = if i == 0 { x } else { &outs[i - 1] };
            let out = if i < last {
                g.affine(input).into_iter().map(f64::tanh).collect()
            } else {
                match self.head {
                    HeadKind::Softmax => g.affine(input),
                    HeadKind::ASoftmax => {
                        let dirs = g.normalized_rows();
                        (0..g.outputs)
                            .map(|j| dot(&dirs[j * g.inputs..(j + 1) * g.inputs], input))
                            .collect()
                    }
                }
            };
            outs.push(out);
        }
        Ok(Forward { groups: outs })
    }

    /// Class indices sorted by descending logit.
    pub fn ranked(&self, x: &[f64]) -> Result<Vec<usize>, ModelError> {
        let f = self.forward(x)?;
        let logits = f.logits();
        let mut idx: Vec<usize> = (0..logits.len()).collect();
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        Ok(idx)
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(self.ranked(x)?[0])
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            groups: self
                .groups
                .iter()
                .map(|g| Dense::zeros(g.inputs, g.outputs, !g.bias.is_empty()))
                .collect(),
        }
    }

    /// Accumulates parameter gradients into `grads`.
    ///
    /// `upstream[l]` is the loss gradient with respect to the output of group
    /// `l` (the last entry being the logits); `head` adds gradient that enters
    /// the final group through its input and class directions directly.
    pub fn backward(
        &self,
        x: &[f64],
        fwd: &Forward,
        upstream: &[Vec<f64>],
        head: Option<&HeadGradient>,
        grads: &mut Gradients,
    ) {
        let last = self.groups.len() - 1;
        debug_assert_eq!(upstream.len(), self.groups.len());
        let input_of = |i: usize| -> &[f64] {
            if i == 0 {
                x
            } else {
                &fwd.groups[i - 1]
            }
        };

        // final group
        let g = &self.groups[last];
        let h = input_of(last);
        let d_logits = &upstream[last];
        let gg = &mut grads.groups[last];
        let mut dh = vec![0.0; g.inputs];
        match self.head {
            HeadKind::Softmax => {
                for j in 0..g.outputs {
                    let d = d_logits[j];
                    if d == 0.0 {
                        continue;
                    }
                    gg.bias[j] += d;
                    let row = g.row(j);
                    for k in 0..g.inputs {
                        gg.weights[j * g.inputs + k] += d * h[k];
                        dh[k] += d * row[k];
                    }
                }
            }
            HeadKind::ASoftmax => {
                let dirs = g.normalized_rows();
                let mut d_dirs = vec![0.0; dirs.len()];
                for j in 0..g.outputs {
                    let d = d_logits[j];
                    if d == 0.0 {
                        continue;
                    }
                    for k in 0..g.inputs {
                        d_dirs[j * g.inputs + k] += d * h[k];
                        dh[k] += d * dirs[j * g.inputs + k];
                    }
                }
                if let Some(extra) = head {
                    d_dirs
                        .iter_mut()
                        .zip(&extra.d_directions)
                        .for_each(|(a, b)| *a += b);
                    dh.iter_mut()
                        .zip(&extra.d_feature)
                        .for_each(|(a, b)| *a += b);
                }
                // through ŵ = w / |w|; zero rows pass the gradient unchanged
                for j in 0..g.outputs {
                    let n = norm(g.row(j));
                    let dir = &dirs[j * g.inputs..(j + 1) * g.inputs];
                    let dd = &d_dirs[j * g.inputs..(j + 1) * g.inputs];
                    let out = &mut gg.weights[j * g.inputs..(j + 1) * g.inputs];
                    if n > 0.0 {
                        let along = dot(dd, dir);
                        for k in 0..g.inputs {
                            out[k] += (dd[k] - along * dir[k]) / n;
                        }
                    } else {
                        out.iter_mut().zip(dd).for_each(|(o, d)| *o += d);
                    }
                }
            }
        }
        if self.head == HeadKind::Softmax {
            if let Some(extra) = head {
                dh.iter_mut()
                    .zip(&extra.d_feature)
                    .for_each(|(a, b)| *a += b);
            }
        }

        // hidden groups, tanh' = 1 - y^2
        for i in (0..last).rev() {
            let g = &self.groups[i];
            let y = &fwd.groups[i];
            let input = input_of(i);
            let d_pre: Vec<f64> = (0..g.outputs)
                .map(|j| (dh[j] + upstream[i][j]) * (1.0 - y[j] * y[j]))
                .collect();
            let gg = &mut grads.groups[i];
            let mut next = vec![0.0; g.inputs];
            for j in 0..g.outputs {
                let d = d_pre[j];
                if d == 0.0 {
                    continue;
                }
                gg.bias[j] += d;
                let row = g.row(j);
                for k in 0..g.inputs {
                    gg.weights[j * g.inputs + k] += d * input[k];
                    next[k] += d * row[k];
                }
            }
            dh = next;
        }
    }

    pub fn param_count(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.weights.len() + g.bias.len())
            .sum()
    }

    /// Parameters in group order, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        self.groups
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::Invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for g in &mut self.groups {
            g.weights.iter_mut().chain(g.bias.iter_mut()).for_each(|v| {
                *v = it.next().expect("length checked");
            });
        }
        Ok(())
    }

    /// Re-projects angular-head rows onto the unit sphere. The function the
    /// model computes is unchanged.
    pub fn renormalize_head(&mut self) {
        if self.head == HeadKind::ASoftmax {
            self.groups
                .last_mut()
                .expect("groups")
                .normalize_rows_in_place();
        }
    }

    /// Copy with `n_new` extra classes. Existing rows are kept bit-for-bit and
    /// the new rows start at zero, so old-class logits are unchanged.
    pub fn expand_output_layer(&self, n_new: usize) -> Result<GroupedClassifier, ModelError> {
        if n_new == 0 {
            return Err(ModelError::Invalid(
                "n_new_classes must be at least 1".into(),
            ));
        }
        let mut m = self.clone();
        let g = m.groups.last_mut().expect("groups");
        g.weights.extend(std::iter::repeat_n(0.0, n_new * g.inputs));
        if self.head == HeadKind::Softmax {
            g.bias.extend(std::iter::repeat_n(0.0, n_new));
        }
        g.outputs += n_new;
        Ok(m)
    }

    /// Checks that `other` can be distilled against `self`: same input, same
    /// hidden widths, same head, and at least as many classes.
    pub fn check_compatible(&self, other: &GroupedClassifier) -> Result<(), ModelError> {
        if self.groups.len() != other.groups.len() {
            return Err(ModelError::StructureMismatch(format!(
                "{} groups vs {}",
                self.groups.len(),
                other.groups.len()
            )));
        }
        if self.head != other.head {
            return Err(ModelError::StructureMismatch("head kinds differ".into()));
        }
        let last = self.groups.len() - 1;
        for (i, (a, b)) in self.groups.iter().zip(&other.groups).enumerate() {
            let same_out = if i == last {
                b.outputs >= a.outputs
            } else {
                a.outputs == b.outputs
            };
            if a.inputs != b.inputs || !same_out {
                return Err(ModelError::StructureMismatch(format!(
                    "group {} is {}x{} vs {}x{}",
                    i + 1,
                    a.outputs,
                    a.inputs,
                    b.outputs,
                    b.inputs
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_model_gives_zero_logits() {
        for head in [HeadKind::Softmax, HeadKind::ASoftmax] {
            let m = GroupedClassifier::zeros(4, &[3, 3], 5, head).unwrap();
            let f = m.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap();
            assert_eq!(f.groups.len(), m.group_count());
            assert_eq!(f.logits(), &[0.0; 5]);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = GroupedClassifier::zeros(4, &[3], 2, HeadKind::Softmax).unwrap();
        assert_eq!(
            m.forward(&[1.0]),
            Err(ModelError::DimensionMismatch {
                expected: 4,
                got: 1
            })
        );
        assert!(GroupedClassifier::zeros(4, &[], 2, HeadKind::Softmax).is_err());
    }

    #[test]
    fn expansion_keeps_old_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for head in [HeadKind::Softmax, HeadKind::ASoftmax] {
            let m = GroupedClassifier::new(6, &[8, 8], 4, head, &mut rng).unwrap();
            let e = m.expand_output_layer(2).unwrap();
            assert_eq!(e.classes(), 6);
            for _ in 0..20 {
                let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let a = m.forward(&x).unwrap();
                let b = e.forward(&x).unwrap();
                assert_eq!(a.logits(), &b.logits()[..4]);
                assert_eq!(&b.logits()[4..], &[0.0, 0.0]);
            }
            assert!(m.expand_output_layer(0).is_err());
            m.check_compatible(&e).unwrap();
            assert!(e.check_compatible(&m).is_err());
        }
    }

    #[test]
    fn snapshot_round_trip_and_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = GroupedClassifier::new(3, &[4], 2, HeadKind::ASoftmax, &mut rng).unwrap();
        let s = m.to_json();
        assert!(s.starts_with(
            r#"{"format":"docstruct.grouped_classifier","version":1,"head":"a_softmax""#
        ));
        assert_eq!(GroupedClassifier::from_json(&s).unwrap(), m);
        let broken = s.replace(r#""inputs":4"#, r#""inputs":5"#);
        assert!(GroupedClassifier::from_json(&broken).is_err());
        let future = s.replace(r#""version":1"#, r#""version":2"#);
        assert!(GroupedClassifier::from_json(&future).is_err());
    }

    #[test]
    fn angular_rows_are_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = GroupedClassifier::new(3, &[5], 4, HeadKind::ASoftmax, &mut rng).unwrap();
        let g = m.head_group();
        for j in 0..g.outputs {
            assert!((norm(g.row(j)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = GroupedClassifier::new(3, &[5, 2], 4, HeadKind::Softmax, &mut rng).unwrap();
        let p = m.params();
        assert_eq!(p.len(), m.param_count());
        let mut z = GroupedClassifier::zeros(3, &[5, 2], 4, HeadKind::Softmax).unwrap();
        z.set_params(&p).unwrap();
        assert_eq!(z, m);
        assert!(z.set_params(&p[1..]).is_err());
    }
}
