//! Contrastive objectives between teacher proposals and student predictions.
//!
//! All proposals of a batch are flattened into one index `r = i·N + j`
//! (image `i`, query `j`), so every distribution here is an
//! `(N_b·N) × (N_b·N)` matrix and every query of every image acts as an
//! instance of the contrastive task.
//!
//! Teacher quantities (embeddings, relation distribution, IoU gates) enter
//! the tape as constants; only student embeddings and boxes carry
//! gradients.

use crate::config::{LossKind, RelationMask, RunConfig};
use crate::detector::ProposalSet;
use crate::error::{Error, Result};
use crate::geometry::{giou_loss_rows, l1_coord_loss_rows, pairwise_iou, BoxSet};
use crate::matching::MatchAssignment;
use crate::tensor::{masked_softmax_rows, matmul, Tape, Tensor, Var};

/// Row-stochastic matrix over flattened proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityDistribution {
    pub values: Tensor,
    pub temperature: f64,
    /// Excluded entries (`true`), when a mask was applied.
    pub mask: Option<Vec<bool>>,
}

/// Soft targets `λ_SCE·positive + (1 − λ_SCE)·p′`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    pub values: Tensor,
    pub lambda_sce: f64,
    pub delta: f64,
}

/// Layout of a flattened batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub images: usize,
    pub queries: usize,
}

impl BatchShape {
    pub fn total(&self) -> usize {
        self.images * self.queries
    }

    fn split(&self, r: usize) -> (usize, usize) {
        (r / self.queries, r % self.queries)
    }
}

/// Exclusion mask of the teacher relation softmax (`true` = excluded).
///
/// `AsWritten` excludes `(i,j)→(k,l)` whenever `k = i` or `l = j`, leaving
/// `(N_b − 1)(N − 1)` entries per row. `SelfOnly` excludes the diagonal.
pub fn relation_mask(shape: BatchShape, kind: RelationMask) -> Vec<bool> {
    let m = shape.total();
    let mut mask = vec![false; m * m];
    for r in 0..m {
        let (i, j) = shape.split(r);
        for c in 0..m {
            let (k, l) = shape.split(c);
            mask[r * m + c] = match kind {
                RelationMask::AsWritten => i == k || j == l,
                RelationMask::SelfOnly => r == c,
            };
        }
    }
    mask
}

fn check_embeddings(z: &Tensor, shape: BatchShape, what: &str) -> Result<usize> {
    let (rows, d) = z.dims2()?;
    if rows != shape.total() {
        return Err(Error::Shape(format!(
            "{what} embeddings have {rows} rows, batch has {}x{}",
            shape.images, shape.queries
        )));
    }
    Ok(d)
}

/// Teacher-teacher relation distribution `p′` at temperature `τ_t`.
pub fn teacher_relations(
    z: &Tensor,
    shape: BatchShape,
    tau_t: f64,
    mask_kind: RelationMask,
) -> Result<SimilarityDistribution> {
    check_embeddings(z, shape, "teacher")?;
    if tau_t <= 0.0 {
        return Err(Error::Contract(format!("temperature {tau_t} must be positive")));
    }
    let mask = relation_mask(shape, mask_kind);
    let mut logits = matmul(z, &z.transpose()?)?;
    let inv = (1.0 / tau_t) as f32;
    logits.data_mut().iter_mut().for_each(|v| *v *= inv);
    let values = masked_softmax_rows(&logits, Some(&mask))?;
    Ok(SimilarityDistribution { values, temperature: tau_t, mask: Some(mask) })
}

/// Teacher-student similarity distribution `p″` at temperature `τ`: row
/// `(i,j)` is a softmax over all `N_b·N` student proposals.
pub fn cross_similarities(z: &Tensor, z_hat: &Tensor, shape: BatchShape, tau: f64) -> Result<SimilarityDistribution> {
    check_embeddings(z, shape, "teacher")?;
    check_embeddings(z_hat, shape, "student")?;
    let mut logits = matmul(z, &z_hat.transpose()?)?;
    let inv = (1.0 / tau) as f32;
    logits.data_mut().iter_mut().for_each(|v| *v *= inv);
    let values = masked_softmax_rows(&logits, None)?;
    Ok(SimilarityDistribution { values, temperature: tau, mask: None })
}

/// Within-image IoU gate: entry `(i,j),(n,m)` is true iff `i = n` and
/// `IoU_i(j, m) ≥ δ` between teacher boxes.
pub fn iou_gate(teacher_boxes: &[BoxSet], shape: BatchShape, delta: f64) -> Result<Vec<bool>> {
    if teacher_boxes.len() != shape.images || teacher_boxes.iter().any(|b| b.len() != shape.queries) {
        return Err(Error::Shape(format!(
            "IoU gate needs {} box sets of {} boxes",
            shape.images, shape.queries
        )));
    }
    let (m, n) = (shape.total(), shape.queries);
    let mut gate = vec![false; m * m];
    for (i, boxes) in teacher_boxes.iter().enumerate() {
        let iou = pairwise_iou(boxes);
        for j in 0..n {
            for l in 0..n {
                gate[(i * n + j) * m + i * n + l] = iou[j * n + l] >= delta;
            }
        }
    }
    Ok(gate)
}

/// `w^Loc = λ_SCE·gate + (1 − λ_SCE)·p′`.
///
/// `p_prime` may be omitted only when `λ_SCE = 1`, where the relation term
/// has zero weight.
pub fn locsce_target(
    p_prime: Option<&SimilarityDistribution>,
    teacher_boxes: &[BoxSet],
    shape: BatchShape,
    lambda_sce: f64,
    delta: f64,
) -> Result<TargetDistribution> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Contract(format!("delta {delta} outside (0, 1]")));
    }
    let gate = iou_gate(teacher_boxes, shape, delta)?;
    mix_target(&gate, p_prime, shape, lambda_sce, delta)
}

/// `w = λ_SCE·𝟙[(i,j) = (n,m)] + (1 − λ_SCE)·p′`.
pub fn sce_target(
    p_prime: Option<&SimilarityDistribution>,
    shape: BatchShape,
    lambda_sce: f64,
) -> Result<TargetDistribution> {
    let m = shape.total();
    let mut diag = vec![false; m * m];
    for r in 0..m {
        diag[r * m + r] = true;
    }
    mix_target(&diag, p_prime, shape, lambda_sce, 1.0)
}

fn mix_target(
    positive: &[bool],
    p_prime: Option<&SimilarityDistribution>,
    shape: BatchShape,
    lambda_sce: f64,
    delta: f64,
) -> Result<TargetDistribution> {
    if !(0.0..=1.0).contains(&lambda_sce) {
        return Err(Error::Contract(format!("lambda_sce {lambda_sce} outside [0, 1]")));
    }
    let m = shape.total();
    let lam = lambda_sce as f32;
    let rest = (1.0 - lambda_sce) as f32;
    let data = match p_prime {
        Some(p) => {
            if p.values.shape() != [m, m] {
                return Err(Error::Shape(format!("p' has shape {:?}, batch needs {m}x{m}", p.values.shape())));
            }
            positive
                .iter()
                .zip(p.values.data())
                .map(|(&pos, &pv)| lam * if pos { 1.0 } else { 0.0 } + rest * pv)
                .collect()
        }
        None if lambda_sce == 1.0 => positive.iter().map(|&pos| if pos { 1.0 } else { 0.0 }).collect(),
        None => {
            return Err(Error::Contract("relation distribution required when lambda_sce < 1".into()))
        }
    };
    Ok(TargetDistribution { values: Tensor::matrix(m, m, data)?, lambda_sce, delta })
}

/// Student side of a batch on the tape, rows flattened as `i·N + j`.
#[derive(Debug, Clone, Copy)]
pub struct StudentBatch {
    /// `[N_b·N × d_proj]`, unit rows.
    pub embeddings: Var,
    /// `[N_b·N × 4]`.
    pub boxes: Var,
}

fn teacher_embeddings(teacher: &[ProposalSet]) -> Result<(Tensor, BatchShape)> {
    let first = teacher.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (n, d) = first.embeddings.dims2()?;
    let mut data = Vec::with_capacity(teacher.len() * n * d);
    for p in teacher {
        if p.embeddings.shape() != [n, d] || p.len() != n {
            return Err(Error::Shape("teacher proposal sets differ in size".into()));
        }
        data.extend_from_slice(p.embeddings.data());
    }
    let shape = BatchShape { images: teacher.len(), queries: n };
    Ok((Tensor::matrix(shape.total(), d, data)?, shape))
}

/// Flattened column permutation: column `(n, m)` reads student row
/// `(n, σ_n(m))`.
fn matched_columns(sigma: &[MatchAssignment], shape: BatchShape) -> Result<Vec<usize>> {
    if sigma.len() != shape.images {
        return Err(Error::Contract(format!(
            "{} proposal matchings for {} images",
            sigma.len(),
            shape.images
        )));
    }
    let mut index = Vec::with_capacity(shape.total());
    for (img, s) in sigma.iter().enumerate() {
        let perm = s.as_permutation(shape.queries)?;
        index.extend(perm.into_iter().map(|t| img * shape.queries + t));
    }
    Ok(index)
}

/// `log p″` with columns reordered by the proposal matching, on the tape.
fn matched_log_similarities(
    tape: &mut Tape,
    z: &Tensor,
    student: &StudentBatch,
    sigma: &[MatchAssignment],
    shape: BatchShape,
    tau: f64,
) -> Result<Var> {
    let (rows, _) = tape.value(student.embeddings).dims2()?;
    if rows != shape.total() {
        return Err(Error::Shape(format!("student has {rows} rows, teacher {}", shape.total())));
    }
    let columns = matched_columns(sigma, shape)?;
    let zt = tape.constant(z.transpose()?);
    let matched = tape.gather_rows(student.embeddings, &columns)?;
    // logits[r][c] = z_r · ẑ_c, computed as (ẑ · zᵀ)ᵀ so that only the
    // student factor is tracked.
    let sim = tape.matmul(matched, zt)?;
    let logits = tape.transpose(sim)?;
    let logits = tape.scale(logits, (1.0 / tau) as f32);
    let p = tape.masked_softmax_rows(logits, None)?;
    Ok(tape.log(p))
}

/// `−1/(N_b·N) · Σ w ⊙ log p″`.
fn weighted_cross_entropy(tape: &mut Tape, log_p: Var, weights: Tensor, shape: BatchShape) -> Result<Var> {
    let w = tape.constant(weights);
    let prod = tape.mul(w, log_p)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / shape.total() as f32))
}

fn relations_if_needed(z: &Tensor, shape: BatchShape, cfg: &RunConfig) -> Result<Option<SimilarityDistribution>> {
    if cfg.lambda_sce == 1.0 {
        return Ok(None);
    }
    teacher_relations(z, shape, cfg.tau_t, cfg.relation_mask).map(Some)
}

fn teacher_box_sets(teacher: &[ProposalSet]) -> Vec<BoxSet> {
    teacher.iter().map(|p| p.boxes.clone()).collect()
}

/// Localization-aware relational contrastive loss.
pub fn locsce_loss(
    tape: &mut Tape,
    teacher: &[ProposalSet],
    student: &StudentBatch,
    sigma_prop: &[MatchAssignment],
    cfg: &RunConfig,
) -> Result<Var> {
    let (z, shape) = teacher_embeddings(teacher)?;
    let p_prime = relations_if_needed(&z, shape, cfg)?;
    let target = locsce_target(p_prime.as_ref(), &teacher_box_sets(teacher), shape, cfg.lambda_sce, cfg.delta)?;
    let log_p = matched_log_similarities(tape, &z, student, sigma_prop, shape, cfg.tau)?;
    weighted_cross_entropy(tape, log_p, target.values, shape)
}

/// Relational contrastive loss with the matched pair as the only positive.
pub fn sce_loss(
    tape: &mut Tape,
    teacher: &[ProposalSet],
    student: &StudentBatch,
    sigma_prop: &[MatchAssignment],
    cfg: &RunConfig,
) -> Result<Var> {
    let (z, shape) = teacher_embeddings(teacher)?;
    let p_prime = relations_if_needed(&z, shape, cfg)?;
    let target = sce_target(p_prime.as_ref(), shape, cfg.lambda_sce)?;
    let log_p = matched_log_similarities(tape, &z, student, sigma_prop, shape, cfg.tau)?;
    weighted_cross_entropy(tape, log_p, target.values, shape)
}

/// InfoNCE over all `N_b·N` student proposals, one positive per row.
pub fn infonce_loss(
    tape: &mut Tape,
    teacher: &[ProposalSet],
    student: &StudentBatch,
    sigma_prop: &[MatchAssignment],
    cfg: &RunConfig,
) -> Result<Var> {
    let (z, shape) = teacher_embeddings(teacher)?;
    let m = shape.total();
    let mut w = vec![0.0f32; m * m];
    for r in 0..m {
        w[r * m + r] = 1.0;
    }
    let log_p = matched_log_similarities(tape, &z, student, sigma_prop, shape, cfg.tau)?;
    weighted_cross_entropy(tape, log_p, Tensor::matrix(m, m, w)?, shape)
}

/// InfoNCE with every same-image teacher proposal overlapping at
/// `IoU ≥ δ` counted as an additional positive.
pub fn locnce_loss(
    tape: &mut Tape,
    teacher: &[ProposalSet],
    student: &StudentBatch,
    sigma_prop: &[MatchAssignment],
    cfg: &RunConfig,
) -> Result<Var> {
    let (z, shape) = teacher_embeddings(teacher)?;
    let gate = iou_gate(&teacher_box_sets(teacher), shape, cfg.delta)?;
    let m = shape.total();
    let w = gate.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let log_p = matched_log_similarities(tape, &z, student, sigma_prop, shape, cfg.tau)?;
    weighted_cross_entropy(tape, log_p, Tensor::matrix(m, m, w)?, shape)
}

pub fn contrastive_loss(
    tape: &mut Tape,
    teacher: &[ProposalSet],
    student: &StudentBatch,
    sigma_prop: &[MatchAssignment],
    cfg: &RunConfig,
) -> Result<Var> {
    match cfg.loss_kind {
        LossKind::Locsce => locsce_loss(tape, teacher, student, sigma_prop, cfg),
        LossKind::Sce => sce_loss(tape, teacher, student, sigma_prop, cfg),
        LossKind::Infonce => infonce_loss(tape, teacher, student, sigma_prop, cfg),
        LossKind::Locnce => locnce_loss(tape, teacher, student, sigma_prop, cfg),
    }
}

/// Components of the global loss, all scalars on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    /// Unweighted contrastive term.
    pub contrast: Var,
    /// `1/(N_b·K) · Σ λ_coord·L1` over box-matched pairs.
    pub coord: Var,
    /// `1/(N_b·K) · Σ λ_giou·(1 − GIoU)` over box-matched pairs.
    pub giou: Var,
}

/// `λ_contrast·L_contrast + 1/(N_b·K)·Σ_i Σ_j [λ_coord·L1 + λ_giou·L_giou]`
/// where sampled box `j` of image `i` is paired with student box
/// `σ^box_i(j)`.
pub fn global_loss(
    tape: &mut Tape,
    teacher: &[ProposalSet],
    student: &StudentBatch,
    sigma_prop: &[MatchAssignment],
    sigma_box: &[MatchAssignment],
    ss_boxes: &[BoxSet],
    cfg: &RunConfig,
) -> Result<LossBreakdown> {
    let contrast = contrastive_loss(tape, teacher, student, sigma_prop, cfg)?;
    let (coord, giou) = box_terms(tape, student, sigma_box, ss_boxes, teacher.len(), cfg)?;
    let weighted = tape.scale(contrast, cfg.lambda_contrast as f32);
    let boxes = tape.add(coord, giou)?;
    let total = tape.add(weighted, boxes)?;
    Ok(LossBreakdown { total, contrast, coord, giou })
}

fn box_terms(
    tape: &mut Tape,
    student: &StudentBatch,
    sigma_box: &[MatchAssignment],
    ss_boxes: &[BoxSet],
    images: usize,
    cfg: &RunConfig,
) -> Result<(Var, Var)> {
    if sigma_box.len() != images || ss_boxes.len() != images {
        return Err(Error::Contract(format!(
            "{} box matchings and {} box sets for {images} images",
            sigma_box.len(),
            ss_boxes.len()
        )));
    }
    let k = ss_boxes.first().map_or(0, BoxSet::len);
    if ss_boxes.iter().any(|s| s.len() != k) {
        return Err(Error::Contract("sampled box sets differ in size".into()));
    }
    let (rows, _) = tape.value(student.boxes).dims2()?;
    let n = rows / images;
    if k == 0 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok((zero, zero));
    }

    let mut index = Vec::with_capacity(images * k);
    let mut targets = Vec::with_capacity(images * k);
    for (img, (sigma, ss)) in sigma_box.iter().zip(ss_boxes).enumerate() {
        if sigma.pairs.len() != k {
            return Err(Error::Contract(format!("box matching of image {img} covers {} of {k} boxes", sigma.pairs.len())));
        }
        for &(j, s) in &sigma.pairs {
            index.push(img * n + s);
            targets.push(ss.boxes[j]);
        }
    }
    let pred = tape.gather_rows(student.boxes, &index)?;
    let target = tape.constant(BoxSet::new("", targets).to_tensor());
    let norm = 1.0 / (images * k) as f32;

    let l1 = l1_coord_loss_rows(tape, pred, target)?;
    let l1 = tape.sum(l1);
    let coord = tape.scale(l1, cfg.lambda_coord as f32 * norm);
    let g = giou_loss_rows(tape, pred, target)?;
    let g = tape.sum(g);
    let giou = tape.scale(g, cfg.lambda_giou as f32 * norm);
    Ok((coord, giou))
}

/// Mean cosine between each teacher embedding and its matched student
/// embedding.
pub fn matched_cosine(teacher: &[ProposalSet], student: &[ProposalSet], sigma: &[MatchAssignment]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ((t, s), a) in teacher.iter().zip(student).zip(sigma) {
        for &(j, m) in &a.pairs {
            let dot: f64 = t.embeddings.row(j).iter().zip(s.embeddings.row(m)).map(|(x, y)| *x as f64 * *y as f64).sum();
            total += dot;
            count += 1;
        }
    }
    if count == 0 { 0.0 } else { total / count as f64 }
}

/// Mean number of IoU-gate positives per teacher proposal (itself included).
pub fn mean_positive_count(teacher_boxes: &[BoxSet], delta: f64) -> f64 {
    let mut total = 0usize;
    let mut count = 0usize;
    for boxes in teacher_boxes {
        let n = boxes.len();
        let iou = pairwise_iou(boxes);
        total += iou.iter().filter(|&&v| v >= delta).count();
        count += n;
    }
    if count == 0 { 0.0 } else { total as f64 / count as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxN;
    use crate::matching::MatchAssignment;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..rows {
            let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            data.extend(v.into_iter().map(|x| x / norm));
        }
        Tensor::matrix(rows, d, data).unwrap()
    }

    fn random_boxes(rng: &mut ChaCha8Rng, n: usize) -> BoxSet {
        let boxes = (0..n)
            .map(|_| BoxN::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)).unwrap())
            .collect();
        BoxSet::new("img", boxes)
    }

    fn identity(n: usize) -> MatchAssignment {
        MatchAssignment { pairs: (0..n).map(|i| (i, i)).collect(), total_cost: 0.0 }
    }

    fn batch(rng: &mut ChaCha8Rng, shape: BatchShape, d: usize) -> Vec<ProposalSet> {
        (0..shape.images)
            .map(|_| ProposalSet { embeddings: unit_rows(rng, shape.queries, d), boxes: random_boxes(rng, shape.queries) })
            .collect()
    }

    fn student_on_tape(tape: &mut Tape, emb: &Tensor, boxes: &Tensor) -> StudentBatch {
        StudentBatch { embeddings: tape.param(emb.clone()), boxes: tape.param(boxes.clone()) }
    }

    #[test]
    fn relation_mask_counts() {
        let shape = BatchShape { images: 2, queries: 3 };
        let mask = relation_mask(shape, RelationMask::AsWritten);
        for row in mask.chunks(6) {
            assert_eq!(row.iter().filter(|m| !**m).count(), 2);
        }
        let mask = relation_mask(shape, RelationMask::SelfOnly);
        for row in mask.chunks(6) {
            assert_eq!(row.iter().filter(|m| !**m).count(), 5);
        }
    }

    #[test]
    fn teacher_relations_examples() {
        let shape = BatchShape { images: 2, queries: 2 };
        let z = Tensor::full(&[4, 3], 1.0 / 3f32.sqrt());
        let p = teacher_relations(&z, shape, 0.07, RelationMask::AsWritten).unwrap();
        for r in 0..4 {
            let row = p.values.row(r);
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), 3);
        }

        let shape = BatchShape { images: 2, queries: 3 };
        let z = Tensor::full(&[6, 2], 1.0 / 2f32.sqrt());
        let p = teacher_relations(&z, shape, 0.07, RelationMask::AsWritten).unwrap();
        for r in 0..6 {
            // (N_b - 1)(N - 1) = 2 entries survive the mask.
            let nonzero: Vec<f32> = p.values.row(r).iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nonzero.len(), 2);
            assert!(nonzero.iter().all(|v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn teacher_relations_match_f64_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = BatchShape { images: 2, queries: 2 };
        let z = unit_rows(&mut rng, 4, 5);
        let p = teacher_relations(&z, shape, 0.07, RelationMask::AsWritten).unwrap();
        for r in 0..4 {
            let (i, j) = (r / 2, r % 2);
            let logits: Vec<Option<f64>> = (0..4)
                .map(|c| {
                    let (k, l) = (c / 2, c % 2);
                    (i != k && j != l).then(|| {
                        z.row(r).iter().zip(z.row(c)).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / 0.07
                    })
                })
                .collect();
            let denom: f64 = logits.iter().flatten().map(|v| v.exp()).sum();
            for c in 0..4 {
                let expect = logits[c].map_or(0.0, |v| v.exp() / denom);
                assert!((p.values.at(r, c) as f64 - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_batch_for_single_image() {
        let z = Tensor::full(&[2, 2], 0.5f32.sqrt());
        let shape = BatchShape { images: 1, queries: 2 };
        let err = teacher_relations(&z, shape, 0.07, RelationMask::AsWritten).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { .. }));
        teacher_relations(&z, shape, 0.07, RelationMask::SelfOnly).unwrap();
    }

    #[test]
    fn cross_similarity_examples() {
        let shape = BatchShape { images: 2, queries: 3 };
        let z = Tensor::full(&[6, 4], 0.5);
        let p = cross_similarities(&z, &z, shape, 0.1).unwrap();
        assert!(p.values.data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-6));

        let shape = BatchShape { images: 1, queries: 2 };
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = cross_similarities(&eye, &eye, shape, 0.1).unwrap();
        assert!((p.values.at(0, 0) - 0.9999546).abs() < 1e-6);
        assert!((p.values.at(0, 1) - 4.54e-5).abs() < 1e-7);
        assert_eq!(p.values.shape(), &[2, 2]);
    }

    #[test]
    fn target_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = BatchShape { images: 2, queries: 3 };
        let z = unit_rows(&mut rng, 6, 4);
        let boxes = vec![random_boxes(&mut rng, 3), random_boxes(&mut rng, 3)];
        let p = teacher_relations(&z, shape, 0.07, RelationMask::AsWritten).unwrap();

        let loc = locsce_target(Some(&p), &boxes, shape, 0.3, 1.0).unwrap();
        let sce = sce_target(Some(&p), shape, 0.3).unwrap();
        assert_eq!(loc.values, sce.values);

        let w0 = locsce_target(Some(&p), &boxes, shape, 0.0, 0.5).unwrap();
        assert!(w0.values.data().iter().zip(p.values.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        assert!(locsce_target(None, &boxes, shape, 0.5, 0.5).is_err());
        assert!(locsce_target(Some(&p), &boxes, shape, 0.5, 0.0).is_err());
    }

    #[test]
    fn gate_marks_overlapping_block() {
        let shape = BatchShape { images: 1, queries: 2 };
        let a = BoxN::from_corners(0.0, 0.0, 1.0, 0.5).unwrap();
        // Same height, 0.8 of the width: IoU 0.8.
        let b = BoxN::from_corners(0.0, 0.0, 0.8, 0.5).unwrap();
        let w = locsce_target(None, &[BoxSet::new("x", vec![a, b])], shape, 1.0, 0.5).unwrap();
        assert_eq!(w.values.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn lowering_delta_never_removes_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = BatchShape { images: 3, queries: 5 };
        let boxes: Vec<BoxSet> = (0..3).map(|_| random_boxes(&mut rng, 5)).collect();
        let mut last = 0;
        for delta in [1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 0.01] {
            let count = iou_gate(&boxes, shape, delta).unwrap().iter().filter(|g| **g).count();
            assert!(count >= last);
            last = count;
        }
        assert!(last > 15);
    }

    #[test]
    fn worked_two_query_value() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let teacher = vec![ProposalSet {
            embeddings: eye.clone(),
            boxes: BoxSet::new("x", vec![BoxN::new(0.2, 0.2, 0.2, 0.2).unwrap(), BoxN::new(0.8, 0.8, 0.2, 0.2).unwrap()]),
        }];
        let cfg = RunConfig { lambda_sce: 1.0, delta: 1.0, tau: 0.1, ..RunConfig::default() };
        let sigma = vec![identity(2)];
        let expected = -(1.0 / (1.0 + (-10.0f64).exp())).ln();
        for kind in [LossKind::Locsce, LossKind::Infonce, LossKind::Locnce, LossKind::Sce] {
            let mut tape = Tape::new();
            let student = student_on_tape(&mut tape, &eye, &teacher[0].boxes.to_tensor());
            let cfg = RunConfig { loss_kind: kind, ..cfg.clone() };
            let loss = contrastive_loss(&mut tape, &teacher, &student, &sigma, &cfg).unwrap();
            let v = tape.value(loss).item() as f64;
            assert!((v - expected).abs() < 1e-6, "{kind:?}: {v} vs {expected}");
            assert!((v - 4.54e-5).abs() < 1e-6);
        }
    }

    /// Independent f64 evaluation of
    /// `−1/(N_b N) Σ_{i,n,j,m} w_{(in,jm)} log p″_{(in, j σ_n(m))}`.
    fn oracle_loss(
        teacher: &[ProposalSet],
        student_emb: &Tensor,
        sigma: &[Vec<usize>],
        cfg: &RunConfig,
        positive: impl Fn(usize, usize, usize, usize) -> bool,
    ) -> f64 {
        let nb = teacher.len();
        let n = teacher[0].len();
        let zt = |i: usize, j: usize| teacher[i].embeddings.row(j);
        let zs = |i: usize, j: usize| student_emb.row(i * n + j);
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        let mut loss = 0.0;
        for i in 0..nb {
            for j in 0..n {
                let denom_s: f64 = (0..nb).flat_map(|k| (0..n).map(move |l| (k, l))).map(|(k, l)| (dot(zt(i, j), zs(k, l)) / cfg.tau).exp()).sum();
                let rel = |k: usize, l: usize| match cfg.relation_mask {
                    RelationMask::AsWritten => i != k && j != l,
                    RelationMask::SelfOnly => !(i == k && j == l),
                };
                let denom_t: f64 = (0..nb)
                    .flat_map(|k| (0..n).map(move |l| (k, l)))
                    .filter(|&(k, l)| rel(k, l))
                    .map(|(k, l)| (dot(zt(i, j), zt(k, l)) / cfg.tau_t).exp())
                    .sum();
                for nn in 0..nb {
                    for m in 0..n {
                        let p_rel = if cfg.lambda_sce < 1.0 && rel(nn, m) {
                            (dot(zt(i, j), zt(nn, m)) / cfg.tau_t).exp() / denom_t
                        } else {
                            0.0
                        };
                        let ind = if positive(i, nn, j, m) { 1.0 } else { 0.0 };
                        let w = cfg.lambda_sce * ind + (1.0 - cfg.lambda_sce) * p_rel;
                        let p = (dot(zt(i, j), zs(nn, sigma[nn][m])) / cfg.tau).exp() / denom_s;
                        loss -= w * p.ln();
                    }
                }
            }
        }
        loss / (nb * n) as f64
    }

    fn random_sigma(rng: &mut ChaCha8Rng, images: usize, n: usize) -> (Vec<MatchAssignment>, Vec<Vec<usize>>) {
        use rand::seq::SliceRandom;
        let perms: Vec<Vec<usize>> = (0..images)
            .map(|_| {
                let mut p: Vec<usize> = (0..n).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        let sigma = perms
            .iter()
            .map(|p| MatchAssignment { pairs: p.iter().enumerate().map(|(a, &b)| (a, b)).collect(), total_cost: 0.0 })
            .collect();
        (sigma, perms)
    }

    #[test]
    fn losses_match_f64_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..12 {
            let shape = BatchShape { images: 2 + trial % 2, queries: 3 + trial % 3 };
            let teacher = batch(&mut rng, shape, 6);
            let student_emb = unit_rows(&mut rng, shape.total(), 6);
            let student_boxes = random_boxes(&mut rng, shape.total()).to_tensor();
            let (sigma, perms) = random_sigma(&mut rng, shape.images, shape.queries);
            let mask = if trial % 2 == 0 { RelationMask::AsWritten } else { RelationMask::SelfOnly };
            let cfg = RunConfig { lambda_sce: 0.5, delta: 0.3, relation_mask: mask, ..RunConfig::default() };
            let ious: Vec<Vec<f64>> = teacher.iter().map(|t| pairwise_iou(&t.boxes)).collect();
            let n = shape.queries;
            let gate = |i: usize, nn: usize, j: usize, m: usize| i == nn && ious[i][j * n + m] >= cfg.delta;
            let diag = |i: usize, nn: usize, j: usize, m: usize| i == nn && j == m;

            let cases: [(LossKind, f64, &dyn Fn(usize, usize, usize, usize) -> bool); 4] = [
                (LossKind::Locsce, 0.5, &gate),
                (LossKind::Sce, 0.5, &diag),
                (LossKind::Infonce, 1.0, &diag),
                (LossKind::Locnce, 1.0, &gate),
            ];
            for (kind, lambda, positive) in cases {
                let cfg = RunConfig { loss_kind: kind, lambda_sce: lambda, ..cfg.clone() };
                let expected = oracle_loss(&teacher, &student_emb, &perms, &cfg, positive);
                let mut tape = Tape::new();
                let student = student_on_tape(&mut tape, &student_emb, &student_boxes);
                let loss = contrastive_loss(&mut tape, &teacher, &student, &sigma, &cfg).unwrap();
                let got = tape.value(loss).item() as f64;
                assert!((got - expected).abs() < 1e-5 * expected.abs().max(1.0), "{kind:?}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn duplicate_teacher_boxes_add_positive_terms() {
        let b = BoxN::new(0.5, 0.5, 0.3, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let teacher = vec![ProposalSet { embeddings: unit_rows(&mut rng, 2, 3), boxes: BoxSet::new("x", vec![b, b]) }];
        let student_emb = unit_rows(&mut rng, 2, 3);
        let cfg = RunConfig { delta: 0.5, tau: 0.1, ..RunConfig::default() };
        let mut tape = Tape::new();
        let student = student_on_tape(&mut tape, &student_emb, &teacher[0].boxes.to_tensor());
        let sigma = vec![identity(2)];
        let loc = locnce_loss(&mut tape, &teacher, &student, &sigma, &cfg).unwrap();
        let p = cross_similarities(&teacher[0].embeddings, &student_emb, BatchShape { images: 1, queries: 2 }, 0.1).unwrap();
        let all_four: f64 = p.values.data().iter().map(|v| -(*v as f64).ln()).sum::<f64>() / 2.0;
        assert!((tape.value(loc).item() as f64 - all_four).abs() < 1e-5);
    }

    #[test]
    fn gradients_reach_only_the_student() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = BatchShape { images: 2, queries: 2 };
        let teacher = batch(&mut rng, shape, 4);
        let student_emb = unit_rows(&mut rng, 4, 4);
        let (sigma, _) = random_sigma(&mut rng, 2, 2);
        let ss: Vec<BoxSet> = (0..2).map(|_| random_boxes(&mut rng, 2)).collect();
        let sigma_box = vec![identity(2), identity(2)];
        let mut tape = Tape::new();
        let teacher_var = tape.param(teacher[0].embeddings.clone());
        let student = student_on_tape(&mut tape, &student_emb, &random_boxes(&mut rng, 4).to_tensor());
        let l = global_loss(&mut tape, &teacher, &student, &sigma, &sigma_box, &ss, &RunConfig::default()).unwrap();
        tape.backward(l.total).unwrap();
        assert!(tape.grad(teacher_var).is_none());
        assert!(tape.grad(student.embeddings).is_some());
        assert!(tape.grad(student.boxes).is_some());
    }

    #[test]
    fn global_loss_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = BatchShape { images: 2, queries: 3 };
        let teacher = batch(&mut rng, shape, 4);
        let student_emb = unit_rows(&mut rng, 6, 4);
        let ss: Vec<BoxSet> = (0..2).map(|_| random_boxes(&mut rng, 3)).collect();
        let student_boxes = BoxSet::new("s", ss.iter().flat_map(|s| s.boxes.clone()).collect()).to_tensor();
        let sigma = vec![identity(3), identity(3)];
        let cfg = RunConfig::default();

        let mut tape = Tape::new();
        let student = student_on_tape(&mut tape, &student_emb, &student_boxes);
        let l = global_loss(&mut tape, &teacher, &student, &sigma, &sigma, &ss, &cfg).unwrap();
        assert!(tape.value(l.coord).item().abs() < 1e-7);
        assert!(tape.value(l.giou).item().abs() < 1e-6);
        let c = tape.value(l.contrast).item();
        assert!((tape.value(l.total).item() - 2.0 * c).abs() < 1e-5);

        let cfg0 = RunConfig { lambda_contrast: 0.0, ..cfg };
        let mut tape = Tape::new();
        let other_boxes = random_boxes(&mut rng, 6).to_tensor();
        let student = student_on_tape(&mut tape, &student_emb, &other_boxes);
        let l = global_loss(&mut tape, &teacher, &student, &sigma, &sigma, &ss, &cfg0).unwrap();
        let boxes_only = tape.value(l.coord).item() + tape.value(l.giou).item();
        assert!((tape.value(l.total).item() - boxes_only).abs() < 1e-7);
        assert!(boxes_only > 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let shape = BatchShape { images: 2, queries: 2 };
        let teacher = batch(&mut rng, shape, 3);
        let student_emb = unit_rows(&mut rng, 4, 3);
        let student_boxes = random_boxes(&mut rng, 4).to_tensor();
        let (sigma, _) = random_sigma(&mut rng, 2, 2);
        for kind in [LossKind::Locsce, LossKind::Infonce, LossKind::Locnce] {
            let cfg = RunConfig { loss_kind: kind, delta: 0.2, ..RunConfig::default() };
            let report = grad_check(
                |tape, x| {
                    let boxes = tape.constant(student_boxes.clone());
                    let normalized = tape.l2_normalize_rows(x)?;
                    contrastive_loss(tape, &teacher, &StudentBatch { embeddings: normalized, boxes }, &sigma, &cfg)
                },
                &student_emb,
                1e-3,
            )
            .unwrap();
            assert!(report.passes(1e-2), "{kind:?}: {report:?}");
        }
    }

    #[test]
    fn diagnostics() {
        let b = BoxN::new(0.5, 0.5, 0.3, 0.3).unwrap();
        let far = BoxN::new(0.1, 0.1, 0.1, 0.1).unwrap();
        let sets = vec![BoxSet::new("x", vec![b, b, far])];
        assert!((mean_positive_count(&sets, 0.5) - 5.0 / 3.0).abs() < 1e-12);

        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let p = ProposalSet { embeddings: eye, boxes: BoxSet::new("x", vec![b, far]) };
        let swap = MatchAssignment { pairs: vec![(0, 1), (1, 0)], total_cost: 0.0 };
        assert_eq!(matched_cosine(&[p.clone()], &[p.clone()], &[identity(2)]), 1.0);
        assert_eq!(matched_cosine(&[p.clone()], &[p], &[swap]), 0.0);
    }
}
