//! Self-contained verification suites, runnable from the command line.
//!
//! Each suite compares library results against a separate reference:
//! brute-force enumeration for assignments, plain f64 loops for the
//! objectives and geometry, central differences for gradients.

use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{LossKind, RelationMask, RunConfig};
use crate::detector::{forward_on_tape, init_pair, Backbone, DetectorConfig, ParamVars, ProposalSet};
use crate::error::{Error, Result};
use crate::geometry::{giou, giou_loss, giou_loss_rows, iou, l1_coord_loss_rows, pairwise_iou, BoxN, BoxSet};
use crate::matching::{hungarian, CostMatrix, MatchAssignment};
use crate::objectives::{contrastive_loss, cross_similarities, global_loss, teacher_relations, BatchShape, StudentBatch};
use crate::pipeline::ImageTensor;
use crate::tensor::{grad_check, probe_sum, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    All,
    Matching,
    Objectives,
    Geometry,
    Grad,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Suite::All),
            "matching" => Ok(Suite::Matching),
            "objectives" => Ok(Suite::Objectives),
            "geometry" => Ok(Suite::Geometry),
            "grad" => Ok(Suite::Grad),
            other => Err(Error::Contract(format!(
                "unknown suite {other:?}; expected all, matching, objectives, geometry or grad"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub suite: String,
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// First failure, if any.
    pub detail: Option<String>,
}

impl CheckResult {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.checks.iter().all(CheckResult::ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.ok() { "ok  " } else { "FAIL" };
            out.push_str(&format!("{status} {}/{}: {}/{} passed", c.suite, c.name, c.passed, c.total));
            if let Some(d) = &c.detail {
                out.push_str(&format!(" ({d})"));
            }
            out.push('\n');
        }
        let passed: usize = self.checks.iter().map(|c| c.passed).sum();
        let total: usize = self.checks.iter().map(|c| c.total).sum();
        out.push_str(&format!("{passed}/{total} cases passed\n"));
        out
    }
}

struct Tally {
    suite: &'static str,
    name: &'static str,
    passed: usize,
    total: usize,
    detail: Option<String>,
}

impl Tally {
    fn new(suite: &'static str, name: &'static str) -> Self {
        Tally { suite, name, passed: 0, total: 0, detail: None }
    }

    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.detail.is_none() {
            self.detail = Some(detail());
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            suite: self.suite.into(),
            name: self.name.into(),
            passed: self.passed,
            total: self.total,
            detail: self.detail,
        }
    }
}

pub fn run(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::All | Suite::Matching) {
        checks.extend(matching_suite(seed));
    }
    if matches!(suite, Suite::All | Suite::Objectives) {
        checks.extend(objectives_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Geometry) {
        checks.extend(geometry_suite(seed)?);
    }
    if matches!(suite, Suite::All | Suite::Grad) {
        checks.extend(grad_suite(seed)?);
    }
    Ok(VerifyReport { checks })
}

fn brute_force_assignment(c: &CostMatrix) -> f64 {
    fn go(c: &CostMatrix, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == c.rows() {
            *best = best.min(acc);
            return;
        }
        for col in 0..c.cols() {
            if !used[col] {
                used[col] = true;
                go(c, row + 1, used, acc + c.get(row, col), best);
                used[col] = false;
            }
        }
    }
    if c.rows() > c.cols() {
        return brute_force_assignment(&c.transpose());
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    if best.is_infinite() {
        0.0
    } else {
        best
    }
}

fn assignment_is_injective(a: &MatchAssignment, rows: usize, cols: usize) -> bool {
    let mut seen_r = vec![false; rows];
    let mut seen_c = vec![false; cols];
    a.pairs.len() == rows.min(cols)
        && a.pairs.iter().all(|&(r, c)| {
            r < rows && c < cols && !std::mem::replace(&mut seen_r[r], true) && !std::mem::replace(&mut seen_c[c], true)
        })
}

fn matching_suite(seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut integer = Tally::new("matching", "integer_optimality");
    let mut real = Tally::new("matching", "real_optimality");
    let mut perm = Tally::new("matching", "row_permutation");
    for case in 0..200 {
        let rows = rng.gen_range(1..=7);
        let cols = rng.gen_range(1..=7);
        let is_int = case % 2 == 0;
        let entries: Vec<f64> = (0..rows * cols)
            .map(|_| if is_int { rng.gen_range(0..20) as f64 } else { rng.gen_range(-5.0..5.0) })
            .collect();
        let c = CostMatrix::new(rows, cols, entries.clone()).expect("finite entries");
        let got = hungarian(&c);
        let best = brute_force_assignment(&c);
        let sum: f64 = got.pairs.iter().map(|&(r, k)| c.get(r, k)).sum();
        let ok = assignment_is_injective(&got, rows, cols)
            && if is_int { got.total_cost == best && sum == best } else { (got.total_cost - best).abs() < 1e-6 };
        let tally = if is_int { &mut integer } else { &mut real };
        tally.record(ok, || format!("{rows}x{cols}: got {} expected {best}", got.total_cost));

        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<f64> = order.iter().flat_map(|&r| entries[r * cols..(r + 1) * cols].to_vec()).collect();
        let p = hungarian(&CostMatrix::new(rows, cols, shuffled).expect("finite"));
        perm.record((p.total_cost - got.total_cost).abs() < 1e-9, || {
            format!("permuted rows changed cost {} -> {}", got.total_cost, p.total_cost)
        });
    }
    vec![integer.finish(), real.finish(), perm.finish()]
}

fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * d);
    for _ in 0..rows {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        data.extend(v.iter().map(|x| x / n));
    }
    Tensor::matrix(rows, d, data).expect("sized")
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxN {
    let (x1, y1) = (rng.gen_range(0.0..0.8), rng.gen_range(0.0..0.8));
    let (w, h) = (rng.gen_range(0.05..0.2f64), rng.gen_range(0.05..0.2f64));
    BoxN::from_corners(x1, y1, x1 + w, y1 + h).expect("inside")
}

/// Random toy batch: teacher proposals, student embeddings/boxes, matchings.
struct ToyBatch {
    teacher: Vec<ProposalSet>,
    student_emb: Tensor,
    student_boxes: Tensor,
    sigma: Vec<Vec<usize>>,
}

impl ToyBatch {
    fn draw(rng: &mut ChaCha8Rng, images: usize, queries: usize, d: usize) -> Self {
        let teacher = (0..images)
            .map(|_| ProposalSet {
                embeddings: random_unit_rows(rng, queries, d),
                boxes: BoxSet::new("t", (0..queries).map(|_| random_box(rng)).collect()),
            })
            .collect();
        let student_emb = random_unit_rows(rng, images * queries, d);
        let student_boxes = BoxSet::new("s", (0..images * queries).map(|_| random_box(rng)).collect()).to_tensor();
        let sigma = (0..images)
            .map(|_| {
                let mut p: Vec<usize> = (0..queries).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        ToyBatch { teacher, student_emb, student_boxes, sigma }
    }

    fn assignments(&self) -> Vec<MatchAssignment> {
        self.sigma
            .iter()
            .map(|p| MatchAssignment { pairs: p.iter().copied().enumerate().collect(), total_cost: 0.0 })
            .collect()
    }

    fn loss(&self, cfg: &RunConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let student = StudentBatch {
            embeddings: tape.constant(self.student_emb.clone()),
            boxes: tape.constant(self.student_boxes.clone()),
        };
        let l = contrastive_loss(&mut tape, &self.teacher, &student, &self.assignments(), cfg)?;
        Ok(tape.value(l).item() as f64)
    }

    /// Relational loss with a single exact-match positive, in plain f64.
    fn reference_sce(&self, cfg: &RunConfig, lambda: f64) -> f64 {
        let nb = self.teacher.len();
        let n = self.teacher[0].len();
        let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
        let zt = |i: usize, j: usize| self.teacher[i].embeddings.row(j);
        let zs = |i: usize, j: usize| self.student_emb.row(i * n + j);
        let mut total = 0.0;
        for i in 0..nb {
            for j in 0..n {
                let keep = |k: usize, l: usize| match cfg.relation_mask {
                    RelationMask::AsWritten => k != i && l != j,
                    RelationMask::SelfOnly => (k, l) != (i, j),
                };
                let rel_den: f64 = (0..nb)
                    .flat_map(|k| (0..n).map(move |l| (k, l)))
                    .filter(|&(k, l)| keep(k, l))
                    .map(|(k, l)| (dot(zt(i, j), zt(k, l)) / cfg.tau_t).exp())
                    .sum();
                let sim_den: f64 = (0..nb)
                    .flat_map(|k| (0..n).map(move |l| (k, l)))
                    .map(|(k, l)| (dot(zt(i, j), zs(k, l)) / cfg.tau).exp())
                    .sum();
                for k in 0..nb {
                    for l in 0..n {
                        let rel = if lambda < 1.0 && keep(k, l) {
                            (dot(zt(i, j), zt(k, l)) / cfg.tau_t).exp() / rel_den
                        } else {
                            0.0
                        };
                        let pos = if (i, j) == (k, l) { 1.0 } else { 0.0 };
                        let w = lambda * pos + (1.0 - lambda) * rel;
                        if w != 0.0 {
                            let p = (dot(zt(i, j), zs(k, self.sigma[k][l])) / cfg.tau).exp() / sim_den;
                            total -= w * p.ln();
                        }
                    }
                }
            }
        }
        total / (nb * n) as f64
    }
}

fn objectives_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e);
    let mut reduction = Tally::new("objectives", "locsce_delta1_equals_sce");
    let mut nce = Tally::new("objectives", "locnce_delta1_equals_infonce");
    let mut rows = Tally::new("objectives", "distribution_rows_sum_to_one");
    for case in 0..100 {
        let nb = [1, 2, 4][case % 3];
        let n = [2, 4, 8][(case / 3) % 3];
        let batch = ToyBatch::draw(&mut rng, nb, n, 8);
        // The as-written relation mask leaves no entries when N_b = 1.
        let mask = if nb == 1 { RelationMask::SelfOnly } else { RelationMask::AsWritten };
        let base = RunConfig { delta: 1.0, relation_mask: mask, ..RunConfig::default() };

        let loc = batch.loss(&RunConfig { loss_kind: LossKind::Locsce, ..base.clone() })?;
        let expected = batch.reference_sce(&base, base.lambda_sce);
        reduction.record((loc - expected).abs() <= 1e-6 * expected.abs().max(1.0), || {
            format!("N_b={nb} N={n}: {loc} vs {expected}")
        });

        let locnce = batch.loss(&RunConfig { loss_kind: LossKind::Locnce, ..base.clone() })?;
        let info = batch.loss(&RunConfig { loss_kind: LossKind::Infonce, ..base.clone() })?;
        let info_ref = batch.reference_sce(&base, 1.0);
        nce.record(
            (locnce - info).abs() <= 1e-6 * info.abs().max(1.0) && (info - info_ref).abs() <= 1e-6 * info_ref.abs().max(1.0),
            || format!("N_b={nb} N={n}: locnce {locnce}, infonce {info}, reference {info_ref}"),
        );

        let z: Vec<f32> = batch.teacher.iter().flat_map(|t| t.embeddings.data().to_vec()).collect();
        let z = Tensor::matrix(nb * n, 8, z)?;
        let shape = BatchShape { images: nb, queries: n };
        let pp = cross_similarities(&z, &batch.student_emb, shape, base.tau)?;
        let mut ok = pp.values.shape() == [nb * n, nb * n];
        let mut check_rows = |t: &Tensor| {
            for r in 0..t.shape()[0] {
                let s: f64 = t.row(r).iter().map(|&v| v as f64).sum();
                ok &= (s - 1.0).abs() <= 1e-5;
            }
        };
        check_rows(&pp.values);
        let p = teacher_relations(&z, shape, base.tau_t, mask)?;
        check_rows(&p.values);
        rows.record(ok, || format!("N_b={nb} N={n}: a row does not sum to 1"));
    }
    Ok(vec![reduction.finish(), nce.finish(), rows.finish()])
}

fn geometry_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e0);
    let mut sym = Tally::new("geometry", "iou_symmetry_and_bounds");
    let mut scale = Tally::new("geometry", "iou_scale_invariance");
    let mut gl = Tally::new("geometry", "giou_loss_range");
    let mut diag = Tally::new("geometry", "pairwise_unit_diagonal");
    for _ in 0..500 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        sym.record(ab == ba && (0.0..=1.0).contains(&ab) && iou(&a, &a) > 1.0 - 1e-9, || {
            format!("iou({a:?}, {b:?}) = {ab}, reversed {ba}")
        });

        let s = rng.gen_range(0.5f64..1.0);
        let scaled = |x: &BoxN| {
            let (x1, y1, x2, y2) = x.to_corners();
            BoxN::from_corners(x1 * s, y1 * s, x2 * s, y2 * s).expect("inside")
        };
        let v = iou(&scaled(&a), &scaled(&b));
        scale.record((v - ab).abs() < 1e-5, || format!("scale {s}: {ab} -> {v}"));

        let l = giou_loss(&a, &b);
        gl.record((0.0..=2.0).contains(&l) && giou(&a, &b) <= ab + 1e-12, || format!("giou loss {l}"));
    }
    // Disjoint unit-area boxes one gap apart: enclosing area 3, union 2.
    let a = BoxN::from_corners(0.0, 0.0, 0.25, 0.5)?;
    let b = BoxN::from_corners(0.5, 0.0, 0.75, 0.5)?;
    gl.record((giou_loss(&a, &b) - 4.0 / 3.0).abs() < 1e-6, || format!("worked case {}", giou_loss(&a, &b)));
    for n in 1..20 {
        let set = BoxSet::new("d", (0..n).map(|_| random_box(&mut rng)).collect());
        let m = pairwise_iou(&set);
        diag.record((0..n).all(|i| m[i * n + i] == 1.0), || format!("n={n}"));
    }
    Ok(vec![sym.finish(), scale.finish(), gl.finish(), diag.finish()])
}

const GRAD_TOL: f64 = 1e-2;

/// Gradient checks run on fixed inputs whatever the run seed: f32 central
/// differences are only trustworthy away from kinks and noise, and these
/// inputs are known to be clear of both.
const GRAD_SEED: u64 = 0;

fn grad_suite(_seed: u64) -> Result<Vec<CheckResult>> {
    let seed = GRAD_SEED;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x96ad);
    let mut out = Vec::new();
    let mut record = |name: &'static str, report: Result<f64>, expect_pass: bool| {
        let mut t = Tally::new("grad", name);
        match report {
            Ok(err) => t.record((err < GRAD_TOL) == expect_pass, || format!("max relative error {err:.3e}")),
            Err(e) => t.record(false, || e.to_string()),
        }
        out.push(t.finish());
    };

    let boxes = |rng: &mut ChaCha8Rng, n: usize| BoxSet::new("g", (0..n).map(|_| random_box(rng)).collect()).to_tensor();
    let pred = boxes(&mut rng, 4);
    // Every coordinate of the target differs from the prediction by at
    // least 0.02 so that no |·| kink falls inside the difference stencil.
    let target = Tensor::matrix(
        4,
        4,
        pred.data().iter().map(|&v| v + rng.gen_range(0.02f32..0.05) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    )?;
    record(
        "giou_loss",
        grad_check(
            |tape, x| {
                let t = tape.constant(target.clone());
                let l = giou_loss_rows(tape, x, t)?;
                Ok(tape.sum(l))
            },
            &pred,
            1e-3,
        )
        .map(|r| r.max_rel_error),
        true,
    );
    record(
        "l1_coord_loss",
        grad_check(
            |tape, x| {
                let t = tape.constant(target.clone());
                let l = l1_coord_loss_rows(tape, x, t)?;
                Ok(tape.sum(l))
            },
            &pred,
            1e-3,
        )
        .map(|r| r.max_rel_error),
        true,
    );

    let batch = ToyBatch::draw(&mut rng, 2, 3, 4);
    let sigma = batch.assignments();
    for (name, kind) in [("locsce_loss", LossKind::Locsce), ("infonce_loss", LossKind::Infonce), ("locnce_loss", LossKind::Locnce)] {
        let cfg = RunConfig { loss_kind: kind, delta: 0.1, ..RunConfig::default() };
        let rep = grad_check(
            |tape, x| {
                let emb = tape.l2_normalize_rows(x)?;
                let b = tape.constant(batch.student_boxes.clone());
                contrastive_loss(tape, &batch.teacher, &StudentBatch { embeddings: emb, boxes: b }, &sigma, &cfg)
            },
            &batch.student_emb,
            1e-2,
        );
        record(name, rep.map(|r| r.max_rel_error), true);
    }

    let ss: Vec<BoxSet> = (0..2).map(|_| BoxSet::new("s", (0..2).map(|_| random_box(&mut rng)).collect())).collect();
    let sigma_box: Vec<MatchAssignment> =
        (0..2).map(|_| MatchAssignment { pairs: vec![(0, 2), (1, 0)], total_cost: 0.0 }).collect();
    let cfg = RunConfig::default();
    let rep = grad_check(
        |tape, x| {
            let b = tape.sigmoid(x);
            let emb = tape.constant(batch.student_emb.clone());
            let l = global_loss(tape, &batch.teacher, &StudentBatch { embeddings: emb, boxes: b }, &sigma, &sigma_box, &ss, &cfg)?;
            Ok(l.total)
        },
        &Tensor::matrix(6, 4, (0..24).map(|i| ((i * 7) % 11) as f32 / 11.0 - 0.5).collect())?,
        1e-2,
    );
    record("global_loss", rep.map(|r| r.max_rel_error), true);

    let det = DetectorConfig { queries: 4, d_model: 8, d_proj: 6, projector_hidden: 8, input_size: 16, grid: 4 };
    let (mut params, _) = init_pair(&det, seed)?;
    // Spread the attention scores so the query projection has gradients
    // well above f32 difference noise.
    params.get_mut("queries").expect("known").data_mut().iter_mut().for_each(|v| *v *= 8.0);
    let backbone = Backbone::new(&det, seed);
    let img = ImageTensor::new(16, 16, (0..768).map(|i| ((i * 37) % 101) as f32 / 100.0).collect())?;
    let feats = backbone.features(&img)?;
    for (name, probe, step) in
        [("detector_attn_wq", "attn.wq", 6e-2), ("detector_attn_wv", "attn.wv", 6e-2), ("detector_box_w", "box.w", 3e-2)]
    {
        let x = params.get(probe).expect("known parameter").clone();
        let rep = grad_check(
            |tape, v| {
                let mut p = params.clone();
                *p.get_mut(probe).expect("known") = tape.value(v).clone();
                let mut vars = ParamVars::register(tape, &p, false);
                vars.replace(probe, v);
                let out = forward_on_tape(tape, &vars, &feats)?;
                let e = probe_sum(tape, out.embeddings)?;
                let b = probe_sum(tape, out.boxes)?;
                tape.add(e, b)
            },
            &x,
            step,
        );
        record(name, rep.map(|r| r.max_rel_error), true);
    }

    // A deliberately wrong derivative (2x instead of 3x²) must be caught.
    let x = Tensor::vector(vec![0.7, -1.3, 2.1]);
    let rep = grad_check(
        |tape, v| {
            let c = tape.custom_unary(
                v,
                |t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|a| a * a * a).collect()).expect("same shape"),
                Rc::new(|input: &Tensor, _out: &Tensor, g: &[f32]| {
                    input.data().iter().zip(g).map(|(a, gi)| 2.0 * a * gi).collect()
                }),
            );
            Ok(tape.sum(c))
        },
        &x,
        1e-3,
    );
    record("negative_control_fails", rep.map(|r| r.max_rel_error), false);
    Ok(out)
}
