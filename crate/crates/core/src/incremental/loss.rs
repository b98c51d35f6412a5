//! Classification, angular-margin, multi-task and distillation losses with
//! their gradients.

use serde::{Deserialize, Serialize};

use super::model::{
    dot, norm, Dense, Gradients, GroupedClassifier, HeadGradient, HeadKind, ModelError,
};

fn check_label(label: usize, classes: usize) -> Result<(), ModelError> {
    if label >= classes {
        return Err(ModelError::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(z);
    z.iter().map(|v| (v - lse).exp()).collect()
}

/// Cross-entropy of the softmax distribution over `logits` (0-based label).
pub fn softmax_loss(logits: &[f64], label: usize) -> Result<f64, ModelError> {
    check_label(label, logits.len())?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// Loss and its gradient with respect to the logits.
pub fn softmax_loss_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>), ModelError> {
    check_label(label, logits.len())?;
    let mut p = softmax(logits);
    let loss = log_sum_exp(logits) - logits[label];
    p[label] -= 1.0;
    Ok((loss, p))
}

/// Chebyshev polynomial `T_m(c) = cos(m·acos c)` and its derivative.
fn chebyshev(m: u32, c: f64) -> (f64, f64) {
    // T_n' = n U_{n-1}
    let (mut t_prev, mut t) = (1.0, c);
    let (mut u_prev, mut u) = (0.0, 1.0); // U_{-1}, U_0
    if m == 0 {
        return (1.0, 0.0);
    }
    for _ in 1..m {
        let t_next = 2.0 * c * t - t_prev;
        let u_next = 2.0 * c * u - u_prev;
        t_prev = t;
        t = t_next;
        u_prev = u;
        u = u_next;
    }
    (t, m as f64 * u)
}

/// Monotone angular-margin target `ψ(θ) = (-1)^k cos(mθ) - 2k` for
/// `θ ∈ [kπ/m, (k+1)π/m]`, evaluated from `cos θ`. Returns `ψ` and `dψ/d(cos θ)`.
pub fn margin_psi(cos_theta: f64, m: u32) -> (f64, f64) {
    let c = cos_theta.clamp(-1.0, 1.0);
    let theta = c.acos();
    let k = ((m as f64 * theta / std::f64::consts::PI).floor() as u32).min(m - 1);
    let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
    let (t, dt) = chebyshev(m, c);
    (sign * t - 2.0 * k as f64, sign * dt)
}

/// Angular-softmax loss on the final-group input `feature`.
///
/// The target logit is `|x|·ψ(θ_y)`, every other logit `ŵ_j·x`, with `ŵ_j` the
/// unit-norm class directions of `head`. With `m = 1` this is ordinary
/// softmax cross-entropy over normalized-weight logits.
pub fn asoftmax_loss(
    head: &Dense,
    feature: &[f64],
    label: usize,
    m: u32,
) -> Result<f64, ModelError> {
    Ok(asoftmax_loss_grad(head, feature, label, m)?.0)
}

pub fn asoftmax_loss_grad(
    head: &Dense,
    feature: &[f64],
    label: usize,
    m: u32,
) -> Result<(f64, HeadGradient), ModelError> {
    blended_asoftmax_loss_grad(head, feature, label, Margin::exact(m))
}

/// Angular margin with an optional training-time blend `λ`: the target logit
/// becomes `|x|·(λ cos θ + ψ(θ)) / (1 + λ)`. `λ = 0` is the plain margin loss;
/// annealing `λ` from a large value towards 0 is the usual way to make large
/// margins trainable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margin {
    pub m: u32,
    pub blend: f64,
}

impl Margin {
    pub fn exact(m: u32) -> Self {
        Self { m, blend: 0.0 }
    }

    /// Target value and its derivative with respect to `cos θ`.
    fn target(&self, cos_theta: f64) -> (f64, f64) {
        let (psi, dpsi) = margin_psi(cos_theta, self.m);
        let l = self.blend;
        ((l * cos_theta + psi) / (1.0 + l), (l + dpsi) / (1.0 + l))
    }
}

pub fn blended_asoftmax_loss_grad(
    head: &Dense,
    feature: &[f64],
    label: usize,
    margin: Margin,
) -> Result<(f64, HeadGradient), ModelError> {
    if margin.m < 1 {
        return Err(ModelError::BadMargin(margin.m));
    }
    if !(margin.blend >= 0.0 && margin.blend.is_finite()) {
        return Err(ModelError::Invalid(
            "margin blend must be finite and non-negative".into(),
        ));
    }
    check_label(label, head.outputs)?;
    if feature.len() != head.inputs {
        return Err(ModelError::DimensionMismatch {
            expected: head.inputs,
            got: feature.len(),
        });
    }
    let dim = head.inputs;
    let dirs = head.normalized_rows();
    let dir = |j: usize| &dirs[j * dim..(j + 1) * dim];
    let n = norm(feature);

    let mut logits: Vec<f64> = (0..head.outputs).map(|j| dot(dir(j), feature)).collect();
    let (cos_y, psi, dpsi) = if n > 0.0 {
        let c = logits[label] / n;
        let (psi, dpsi) = margin.target(c);
        (c, psi, dpsi)
    } else {
        (0.0, 0.0, 0.0)
    };
    logits[label] = n * psi;

    let (loss, d_logits) = softmax_loss_grad(&logits, label)?;
    let mut d_feature = vec![0.0; dim];
    let mut d_directions = vec![0.0; dirs.len()];
    for j in 0..head.outputs {
        let g = d_logits[j];
        if j == label {
            if n > 0.0 {
                // d(n ψ(c))/dx = ψ u + ψ'(ŵ - c u),   d/dŵ = ψ' x
                let w = dir(j);
                for k in 0..dim {
                    let u = feature[k] / n;
                    d_feature[k] += g * (psi * u + dpsi * (w[k] - cos_y * u));
                    d_directions[j * dim + k] += g * dpsi * feature[k];
                }
            }
        } else {
            let w = dir(j);
            for k in 0..dim {
                d_feature[k] += g * w[k];
                d_directions[j * dim + k] += g * feature[k];
            }
        }
    }
    Ok((
        loss,
        HeadGradient {
            d_feature,
            d_directions,
        },
    ))
}

/// Terms of the weighted multi-task objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiTaskTerms {
    classification: f64,
    recognition: f64,
    target_len: u32,
}

impl MultiTaskTerms {
    pub fn new(classification: f64, recognition: f64, target_len: u32) -> Result<Self, ModelError> {
        if !(classification >= 0.0 && recognition >= 0.0) {
            return Err(ModelError::BadTerms("losses must be non-negative".into()));
        }
        if target_len < 1 {
            return Err(ModelError::BadTerms(
                "target length must be at least 1".into(),
            ));
        }
        Ok(Self {
            classification,
            recognition,
            target_len,
        })
    }
}

/// `λ·L_c + L_r / N`.
pub fn multitask_loss(terms: &MultiTaskTerms, lambda: f64) -> f64 {
    lambda * terms.classification + terms.recognition / terms.target_len as f64
}

/// Task loss for one sample, accumulating `weight`-scaled gradients.
///
/// Softmax heads use cross-entropy on the logits; angular heads use the
/// angular-margin loss.
pub fn task_loss_grad(
    model: &GroupedClassifier,
    x: &[f64],
    label: usize,
    margin: Margin,
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64, ModelError> {
    let fwd = model.forward(x)?;
    let mut upstream: Vec<Vec<f64>> = fwd.groups.iter().map(|g| vec![0.0; g.len()]).collect();
    let last = upstream.len() - 1;
    match model.head() {
        HeadKind::Softmax => {
            let (loss, d) = softmax_loss_grad(fwd.logits(), label)?;
            upstream[last] = d.into_iter().map(|v| v * weight).collect();
            model.backward(x, &fwd, &upstream, None, grads);
            Ok(loss)
        }
        HeadKind::ASoftmax => {
            let (loss, mut hg) =
                blended_asoftmax_loss_grad(model.head_group(), fwd.feature(), label, margin)?;
            hg.d_feature.iter_mut().for_each(|v| *v *= weight);
            hg.d_directions.iter_mut().for_each(|v| *v *= weight);
            model.backward(x, &fwd, &upstream, Some(&hg), grads);
            Ok(loss)
        }
    }
}

/// Loss without gradients.
pub fn task_loss(
    model: &GroupedClassifier,
    x: &[f64],
    label: usize,
    margin: Margin,
) -> Result<f64, ModelError> {
    let fwd = model.forward(x)?;
    match model.head() {
        HeadKind::Softmax => softmax_loss(fwd.logits(), label),
        HeadKind::ASoftmax => {
            Ok(blended_asoftmax_loss_grad(model.head_group(), fwd.feature(), label, margin)?.0)
        }
    }
}

/// Sum over groups of squared L2 distance between per-group outputs of one
/// sample. The student may have a wider final group; only the teacher's
/// coordinates are compared there.
pub fn group_distance(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64, ModelError> {
    if teacher.len() != student.len() {
        return Err(ModelError::StructureMismatch(format!(
            "{} groups vs {}",
            teacher.len(),
            student.len()
        )));
    }
    let last = teacher.len().saturating_sub(1);
    let mut total = 0.0;
    for (l, (t, s)) in teacher.iter().zip(student).enumerate() {
        let ok = if l == last {
            s.len() >= t.len()
        } else {
            s.len() == t.len()
        };
        if !ok {
            return Err(ModelError::StructureMismatch(format!(
                "group {} has width {} vs {}",
                l + 1,
                t.len(),
                s.len()
            )));
        }
        total += t.iter().zip(s).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// Per-group output distance between a frozen `teacher` and `student`,
/// summed over groups and averaged over the batch. Empty batches give 0.
pub fn distillation_loss(
    teacher: &GroupedClassifier,
    student: &GroupedClassifier,
    batch: &[Vec<f64>],
) -> Result<f64, ModelError> {
    teacher.check_compatible(student)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for x in batch {
        let t = teacher.forward(x)?;
        let s = student.forward(x)?;
        total += group_distance(&t.groups, &s.groups)?;
    }
    Ok(total / batch.len() as f64)
}

/// [`distillation_loss`] with `weight`-scaled student gradients accumulated
/// into `grads`.
pub fn distillation_loss_grad(
    teacher: &GroupedClassifier,
    student: &GroupedClassifier,
    batch: &[Vec<f64>],
    weight: f64,
    grads: &mut Gradients,
) -> Result<f64, ModelError> {
    teacher.check_compatible(student)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let scale = 2.0 * weight / batch.len() as f64;
    let mut total = 0.0;
    for x in batch {
        let t = teacher.forward(x)?;
        let s = student.forward(x)?;
        total += group_distance(&t.groups, &s.groups)?;
        let upstream: Vec<Vec<f64>> = t
            .groups
            .iter()
            .zip(&s.groups)
            .map(|(tg, sg)| {
                sg.iter()
                    .enumerate()
                    .map(|(k, sv)| tg.get(k).map_or(0.0, |tv| scale * (sv - tv)))
                    .collect()
            })
            .collect();
        student.backward(x, &s, &upstream, None, grads);
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        for k in [2usize, 5, 10] {
            let l = softmax_loss(&vec![0.3; k], 1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-12);
        }
        let l = softmax_loss(&[2.0, 0.0], 0).unwrap();
        assert!((l - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for z in [0.0, 1.0, 2.0, 5.0, 10.0, 50.0] {
            let l = softmax_loss(&[z, 0.0, 0.0], 0).unwrap();
            assert!(l < prev && l >= 0.0);
            prev = l;
        }
        assert!(prev < 1e-20);
        assert_eq!(
            softmax_loss(&[0.0, 0.0], 2),
            Err(ModelError::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        );
    }

    #[test]
    fn psi_matches_definition() {
        for m in 1..=5u32 {
            for i in 0..=200 {
                let theta = std::f64::consts::PI * i as f64 / 200.0;
                let k = ((m as f64 * theta / std::f64::consts::PI).floor() as u32).min(m - 1);
                let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
                let want = sign * (m as f64 * theta).cos() - 2.0 * k as f64;
                let (got, _) = margin_psi(theta.cos(), m);
                assert!((got - want).abs() < 1e-9, "m={m} θ={theta}");
            }
            assert_eq!(margin_psi(1.0, m).0, 1.0);
        }
        // monotone decreasing in θ
        for m in 1..=4u32 {
            let vals: Vec<f64> = (0..=100)
                .map(|i| margin_psi((std::f64::consts::PI * i as f64 / 100.0).cos(), m).0)
                .collect();
            assert!(vals.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    fn head_with(dirs: &[[f64; 2]]) -> Dense {
        Dense {
            inputs: 2,
            outputs: dirs.len(),
            weights: dirs.iter().flatten().copied().collect(),
            bias: Vec::new(),
        }
    }

    #[test]
    fn asoftmax_m1_is_normalized_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = GroupedClassifier::new(3, &[4], 3, HeadKind::ASoftmax, &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = m.forward(&x).unwrap();
            let label = rng.gen_range(0..3);
            let a = asoftmax_loss(m.head_group(), f.feature(), label, 1).unwrap();
            let s = softmax_loss(f.logits(), label).unwrap();
            assert!((a - s).abs() < 1e-12);
        }
    }

    #[test]
    fn asoftmax_zero_angle_target_is_norm() {
        let head = head_with(&[[1.0, 0.0], [0.0, 1.0]]);
        let x = [3.0, 0.0];
        for m in 1..=4 {
            // logits (3, 0) regardless of m
            let l = asoftmax_loss(&head, &x, 0, m).unwrap();
            assert!((l - softmax_loss(&[3.0, 0.0], 0).unwrap()).abs() < 1e-12);
        }
        assert_eq!(
            asoftmax_loss(&head, &x, 0, 0),
            Err(ModelError::BadMargin(0))
        );
        assert!(asoftmax_loss(&head, &x, 2, 1).is_err());
    }

    #[test]
    fn larger_margin_never_lowers_loss() {
        let head = head_with(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.3]]);
        let max_m = 4;
        for i in 1..100 {
            let theta = (std::f64::consts::PI / max_m as f64) * i as f64 / 100.0;
            let x = [2.5 * theta.cos(), 2.5 * theta.sin()];
            let losses: Vec<f64> = (1..=max_m)
                .map(|m| asoftmax_loss(&head, &x, 0, m).unwrap())
                .collect();
            assert!(
                losses.windows(2).all(|w| w[1] >= w[0] - 1e-12),
                "θ={theta}: {losses:?}"
            );
            assert!(losses[3] >= losses[0]);
        }
    }

    #[test]
    fn multitask_examples() {
        let t = |c, r, n| MultiTaskTerms::new(c, r, n).unwrap();
        assert_eq!(multitask_loss(&t(2.0, 3.0, 1), 1.0), 5.0);
        assert_eq!(multitask_loss(&t(2.0, 3.0, 4), 0.0), 0.75);
        assert!((multitask_loss(&t(0.5, 10.0, 10), 1.0) - 1.5).abs() < 1e-12);
        assert!(MultiTaskTerms::new(1.0, 1.0, 0).is_err());
        assert!(MultiTaskTerms::new(-1.0, 1.0, 1).is_err());
    }

    #[test]
    fn distance_examples() {
        let d = group_distance(&[vec![1.0, 2.0]], &[vec![1.5, 0.0]]).unwrap();
        assert_eq!(d, 0.25 + 4.0);
        let d = group_distance(
            &[vec![0.0, 0.0], vec![1.0]],
            &[vec![3.0, 4.0], vec![-1.0, 9.0]],
        )
        .unwrap();
        // ‖(3,4)‖² + ‖(-2)‖², the extra class coordinate is ignored
        assert_eq!(d, 25.0 + 4.0);
        assert!(group_distance(&[vec![0.0]], &[vec![0.0, 1.0], vec![1.0]]).is_err());
        assert!(group_distance(&[vec![0.0, 0.0], vec![0.0]], &[vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn distillation_identity_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = GroupedClassifier::new(4, &[5, 3], 3, HeadKind::Softmax, &mut rng).unwrap();
        let batch: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        assert_eq!(distillation_loss(&m, &m.clone(), &batch).unwrap(), 0.0);
        assert_eq!(distillation_loss(&m, &m, &[]).unwrap(), 0.0);
        let expanded = m.expand_output_layer(2).unwrap();
        assert_eq!(distillation_loss(&m, &expanded, &batch).unwrap(), 0.0);

        let other = GroupedClassifier::new(4, &[5], 3, HeadKind::Softmax, &mut rng).unwrap();
        assert!(matches!(
            distillation_loss(&m, &other, &batch),
            Err(ModelError::StructureMismatch(_))
        ));
        let mut perturbed = m.clone();
        let mut p = perturbed.params();
        p[0] += 0.5;
        perturbed.set_params(&p).unwrap();
        assert!(distillation_loss(&m, &perturbed, &batch).unwrap() > 0.0);
    }
}
