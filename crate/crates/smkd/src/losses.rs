//! Training objectives: class-token distillation, masked patch recovery,
//! best-match patch distillation, and the two stage aggregates.

use std::fmt;

use crate::masking::MaskSpec;
use crate::tensor::{Scalar, Tensor, TensorError, TensorResult};

const CLAMP_EPS: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Teacher,
    Student,
}

#[derive(Debug)]
pub enum LossError {
    SideMismatch { expected: Side, got: Side },
    NegativeProbability { value: f64 },
    RowNotNormalized { row: usize, sum: f64 },
    WeightsNotNormalized { sum: f64 },
    Tensor(TensorError),
}

impl fmt::Display for LossError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossError::SideMismatch { expected, got } => {
                write!(f, "expected a {expected:?}-side table, got {got:?}")
            }
            LossError::NegativeProbability { value } => {
                write!(f, "negative probability entry {value}")
            }
            LossError::RowNotNormalized { row, sum } => {
                write!(f, "distribution row {row} sums to {sum}, not 1")
            }
            LossError::WeightsNotNormalized { sum } => {
                write!(f, "attention weight vector sums to {sum}, not 1")
            }
            LossError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for LossError {}

impl From<TensorError> for LossError {
    fn from(e: TensorError) -> Self {
        LossError::Tensor(e)
    }
}

pub type LossResult<T> = Result<T, LossError>;

/// Categorical distributions a projection head produced for one view:
/// the `[cls]` token row and one row per patch.
#[derive(Clone, Debug)]
pub struct ProbTable<T: Scalar> {
    pub cls: Tensor<T>,
    pub patches: Tensor<T>,
    pub side: Side,
}

impl<T: Scalar> ProbTable<T> {
    /// Validates that every row is a distribution: entries nonnegative, sum
    /// within `1e-6` of one — widened for coarse element types, where the
    /// rounded softmax outputs themselves cannot sum tighter than roughly
    /// `sqrt(K)` half-ulps.
    pub fn new(cls: Tensor<T>, patches: Tensor<T>, side: Side) -> LossResult<Self> {
        let k = cls.len();
        if patches.ndim() != 2 || patches.shape()[1] != k {
            return Err(LossError::Tensor(TensorError::ShapeMismatch {
                op: "prob_table",
                left: cls.shape().to_vec(),
                right: patches.shape().to_vec(),
            }));
        }
        let tol = 1e-6f64.max(32.0 * (k as f64).sqrt() * T::machine_eps());
        for (row, chunk) in std::iter::once(cls.data())
            .chain(patches.data().chunks(k))
            .enumerate()
        {
            let mut sum = 0.0;
            for &v in chunk {
                let v = v.to_f64();
                if v < -1e-9 {
                    return Err(LossError::NegativeProbability { value: v });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(LossError::RowNotNormalized { row, sum });
            }
        }
        Ok(ProbTable { cls, patches, side })
    }

    /// Split a `[1+N, K]` distribution stack (cls row first) into a table.
    pub fn from_stack(stack: &Tensor<T>, side: Side) -> LossResult<Self> {
        let (rows, k) = (stack.shape()[0], stack.shape()[1]);
        let cls = stack.row(0)?;
        let patches = stack.select_block(1, rows - 1, 0, k)?;
        ProbTable::new(cls, patches, side)
    }

    pub fn num_patches(&self) -> usize {
        self.patches.shape()[0]
    }
}

/// One mined intra-class pairing: the student consumes a masked view of one
/// image, the teacher an unmasked view of a same-class image (possibly the
/// same image, flagged accordingly).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewPair {
    pub student_image: usize,
    pub student_view: usize,
    pub teacher_image: usize,
    pub teacher_view: usize,
    pub label: u32,
    pub same_image: bool,
}

impl ViewPair {
    pub fn new(
        student_image: usize,
        student_view: usize,
        teacher_image: usize,
        teacher_view: usize,
        label: u32,
    ) -> Self {
        ViewPair {
            student_image,
            student_view,
            teacher_image,
            teacher_view,
            label,
            same_image: student_image == teacher_image,
        }
    }
}

/// Teacher->student patch assignment: for each teacher patch `k`, the index
/// of the most cosine-similar student patch and that similarity.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchMap {
    pub k_plus: Vec<usize>,
    pub sims: Vec<f64>,
}

/// `H(p, q) = -sum(p * log q)` with `q` clamped below at 1e-8; gradient flows
/// only through `q`.
pub fn cross_entropy_h<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> LossResult<Tensor<T>> {
    check_nonnegative(p)?;
    check_nonnegative(q)?;
    let logq = q.clamp_min(T::from_f64(CLAMP_EPS)).log();
    Ok(p.stop_grad().mul(&logq)?.sum_all().scale(-T::ONE))
}

/// Row-wise `H`: `[N, K] x [N, K] -> [N]`.
pub fn cross_entropy_rows<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>) -> LossResult<Tensor<T>> {
    check_nonnegative(p)?;
    check_nonnegative(q)?;
    let logq = q.clamp_min(T::from_f64(CLAMP_EPS)).log();
    Ok(p.stop_grad().mul(&logq)?.sum_axis1()?.scale(-T::ONE))
}

fn check_nonnegative<T: Scalar>(t: &Tensor<T>) -> LossResult<()> {
    for &v in t.data() {
        if v.to_f64() < -1e-9 {
            return Err(LossError::NegativeProbability { value: v.to_f64() });
        }
    }
    Ok(())
}

fn expect_side<T: Scalar>(table: &ProbTable<T>, side: Side) -> LossResult<()> {
    if table.side != side {
        return Err(LossError::SideMismatch {
            expected: side,
            got: table.side,
        });
    }
    Ok(())
}

/// Class-token distillation for an intra-class pair: `H` between the teacher's
/// `[cls]` distribution of the unmasked view and the student's of the masked
/// view. With a same-image pair this is exactly the self-distillation case.
pub fn loss_cls<T: Scalar>(
    _pair: &ViewPair,
    teacher: &ProbTable<T>,
    student: &ProbTable<T>,
) -> LossResult<Tensor<T>> {
    expect_side(teacher, Side::Teacher)?;
    expect_side(student, Side::Student)?;
    cross_entropy_h(&teacher.cls, &student.cls)
}

/// Same-image specialization of the class loss (cross-view self-distillation).
pub fn loss_cls_self<T: Scalar>(
    teacher: &ProbTable<T>,
    student: &ProbTable<T>,
) -> LossResult<Tensor<T>> {
    expect_side(teacher, Side::Teacher)?;
    expect_side(student, Side::Student)?;
    cross_entropy_h(&teacher.cls, &student.cls)
}

/// Masked-patch recovery: mean of per-patch `H` over masked positions between
/// the teacher's distributions of the intact view and the student's of the
/// corrupted view of the same image. `normalize: false` keeps the bare sum.
pub fn loss_mim_with<T: Scalar>(
    teacher: &ProbTable<T>,
    student: &ProbTable<T>,
    mask: &MaskSpec,
    normalize: bool,
) -> LossResult<Tensor<T>> {
    expect_side(teacher, Side::Teacher)?;
    expect_side(student, Side::Student)?;
    let n = teacher.num_patches();
    if mask.len() != n || student.num_patches() != n {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "loss_mim",
            left: vec![n],
            right: vec![mask.len()],
        }));
    }
    let masked = mask.popcount();
    if masked == 0 {
        return Ok(Tensor::scalar(T::ZERO));
    }
    let per_patch = cross_entropy_rows(&teacher.patches, &student.patches)?;
    let flags: Vec<T> = mask
        .grid
        .iter()
        .map(|&m| if m { T::ONE } else { T::ZERO })
        .collect();
    let picked = per_patch.mul(&Tensor::vector(flags))?.sum_all();
    if normalize {
        Ok(picked.scale(T::ONE / T::from_usize(masked)))
    } else {
        Ok(picked)
    }
}

pub fn loss_mim<T: Scalar>(
    teacher: &ProbTable<T>,
    student: &ProbTable<T>,
    mask: &MaskSpec,
) -> LossResult<Tensor<T>> {
    loss_mim_with(teacher, student, mask, true)
}

/// For each teacher patch, the student patch with the highest cosine
/// similarity over backbone features (masked positions carry the student's
/// reconstructed tokens and compete like any other). Ties break to the
/// lowest index.
pub fn match_patches<T: Scalar>(
    teacher_feats: &Tensor<T>,
    student_feats: &Tensor<T>,
) -> LossResult<MatchMap> {
    let (tn, d) = (teacher_feats.shape()[0], teacher_feats.shape()[1]);
    let (sn, sd) = (student_feats.shape()[0], student_feats.shape()[1]);
    if d != sd || sn == 0 {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "match_patches",
            left: teacher_feats.shape().to_vec(),
            right: student_feats.shape().to_vec(),
        }));
    }
    // one f64 conversion per element, then fixed-order lane dots
    let t: Vec<f64> = teacher_feats.data().iter().map(|v| v.to_f64()).collect();
    let s: Vec<f64> = student_feats.data().iter().map(|v| v.to_f64()).collect();
    let norm = |row: &[f64]| -> f64 {
        crate::tensor::kernel::dot_lanes(row, row).sqrt().max(NORM_EPS)
    };
    let s_norms: Vec<f64> = (0..sn).map(|l| norm(&s[l * d..(l + 1) * d])).collect();
    let mut k_plus = Vec::with_capacity(tn);
    let mut sims = Vec::with_capacity(tn);
    for k in 0..tn {
        let trow = &t[k * d..(k + 1) * d];
        let tnorm = norm(trow);
        let mut best = 0usize;
        let mut best_sim = f64::NEG_INFINITY;
        for (l, s_norm) in s_norms.iter().enumerate() {
            let srow = &s[l * d..(l + 1) * d];
            let dot = crate::tensor::kernel::dot_lanes(trow, srow);
            let sim = dot / (tnorm * s_norm);
            if sim > best_sim {
                best_sim = sim;
                best = l;
            }
        }
        k_plus.push(best);
        sims.push(best_sim);
    }
    Ok(MatchMap { k_plus, sims })
}

/// Weight given to each matched-pair term of the patch loss.
#[derive(Clone, Debug)]
pub enum PatchWeighting<T: Scalar> {
    /// Constant `1/N` per term.
    Uniform,
    /// Teacher `[cls]`-attention weights over the N patches; must sum to 1.
    /// Each term is weighted by the entry at its matched index.
    Attention(Vec<T>),
}

/// Patch-level distillation over matched pairs:
/// `sum_k w_{k+} * H(teacher_patch_k, student_patch_{k+})`.
pub fn loss_patch<T: Scalar>(
    teacher: &ProbTable<T>,
    student: &ProbTable<T>,
    matches: &MatchMap,
    weighting: &PatchWeighting<T>,
) -> LossResult<Tensor<T>> {
    expect_side(teacher, Side::Teacher)?;
    expect_side(student, Side::Student)?;
    let n = teacher.num_patches();
    if matches.k_plus.len() != n {
        return Err(LossError::Tensor(TensorError::ShapeMismatch {
            op: "loss_patch",
            left: vec![n],
            right: vec![matches.k_plus.len()],
        }));
    }
    let gathered = student.patches.select_rows(&matches.k_plus)?;
    let per_match = cross_entropy_rows(&teacher.patches, &gathered)?;
    let weights: Vec<T> = match weighting {
        PatchWeighting::Uniform => vec![T::ONE / T::from_usize(n); n],
        PatchWeighting::Attention(w) => {
            let sum: f64 = w.iter().map(|v| v.to_f64()).sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(LossError::WeightsNotNormalized { sum });
            }
            matches.k_plus.iter().map(|&kp| w[kp]).collect()
        }
    };
    Ok(per_match.mul(&Tensor::vector(weights))?.sum_all())
}

/// First-stage objective for one image: cross-view class distillation plus
/// masked patch recovery, summed without scaling. Both directions of the two
/// views are averaged.
#[derive(Clone, Debug)]
pub struct Stage1Loss<T: Scalar> {
    pub total: Tensor<T>,
    pub cls: Tensor<T>,
    pub mim: Tensor<T>,
}

pub fn stage1_loss<T: Scalar>(
    teacher_tables: &[ProbTable<T>; 2],
    student_tables: &[ProbTable<T>; 2],
    masks: [&MaskSpec; 2],
    normalize_mim: bool,
) -> LossResult<Stage1Loss<T>> {
    let c01 = loss_cls_self(&teacher_tables[0], &student_tables[1])?;
    let c10 = loss_cls_self(&teacher_tables[1], &student_tables[0])?;
    let cls = mean_of_scalars(&[c01, c10])?;
    let m0 = loss_mim_with(&teacher_tables[0], &student_tables[0], masks[0], normalize_mim)?;
    let m1 = loss_mim_with(&teacher_tables[1], &student_tables[1], masks[1], normalize_mim)?;
    let mim = mean_of_scalars(&[m0, m1])?;
    let total = cls.add(&mim)?;
    Ok(Stage1Loss { total, cls, mim })
}

/// Second-stage objective over mined pairs: `mean(cls) + lambda * mean(patch)`.
#[derive(Clone, Debug)]
pub struct Stage2Loss<T: Scalar> {
    pub total: Tensor<T>,
    pub cls: Tensor<T>,
    pub patch: Tensor<T>,
}

pub fn stage2_loss<T: Scalar>(
    cls_terms: &[Tensor<T>],
    patch_terms: &[Tensor<T>],
    lambda: f64,
) -> LossResult<Stage2Loss<T>> {
    let cls = mean_of_scalars(cls_terms)?;
    let patch = mean_of_scalars(patch_terms)?;
    let total = cls.add(&patch.scale(T::from_f64(lambda)))?;
    Ok(Stage2Loss { total, cls, patch })
}

/// Mean of scalar tensors as a single graph node (keeps graphs shallow).
pub fn mean_of_scalars<T: Scalar>(terms: &[Tensor<T>]) -> TensorResult<Tensor<T>> {
    if terms.is_empty() {
        return Ok(Tensor::scalar(T::ZERO));
    }
    let rows: Vec<Tensor<T>> = terms
        .iter()
        .map(|t| t.reshape(&[1, 1]))
        .collect::<TensorResult<_>>()?;
    Ok(Tensor::concat_rows(&rows)?.mean_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn one_hot(k: usize, i: usize) -> Tensor<f64> {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        Tensor::vector(v)
    }

    fn random_dist(k: usize, rng: &mut StdRng) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    fn random_table(n: usize, k: usize, side: Side, rng: &mut StdRng) -> ProbTable<f64> {
        let cls = Tensor::vector(random_dist(k, rng));
        let mut patches = Vec::new();
        for _ in 0..n {
            patches.extend(random_dist(k, rng));
        }
        ProbTable::new(cls, Tensor::leaf(&[n, k], patches).unwrap(), side).unwrap()
    }

    #[test]
    fn cross_entropy_one_hot_match_is_zero() {
        let p = one_hot(4, 2);
        let q = one_hot(4, 2);
        let h = cross_entropy_h(&p, &q).unwrap();
        assert!(h.item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_two_way() {
        let p = one_hot(2, 0);
        let q = Tensor::vector(vec![0.5f64, 0.5]);
        let h = cross_entropy_h(&p, &q).unwrap();
        assert!((h.item() - (2.0f64).ln()).abs() < 1e-9);
        assert!((h.item() - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let p = Tensor::vector(vec![0.7f64, 0.3]);
        let q = Tensor::vector(vec![0.4f64, 0.6]);
        let h = cross_entropy_h(&p, &q).unwrap();
        let expect = -(0.7 * 0.4f64.ln() + 0.3 * 0.6f64.ln());
        assert!((h.item() - expect).abs() < 1e-9);
        assert!((h.item() - 0.7946).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_negative() {
        let p = Tensor::vector(vec![0.5f64, 0.5]);
        let q = Tensor::vector(vec![-0.1f64, 1.1]);
        assert!(matches!(
            cross_entropy_h(&p, &q),
            Err(LossError::NegativeProbability { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_only_through_q() {
        let p = Tensor::param(&[3], vec![0.2f64, 0.5, 0.3]).unwrap();
        let q = Tensor::param(&[3], vec![0.3f64, 0.4, 0.3]).unwrap();
        let h = cross_entropy_h(&p, &q).unwrap();
        let gm = backward(&h).unwrap();
        assert!(!gm.contains(&p));
        assert!(gm.contains(&q));
    }

    #[test]
    fn gibbs_inequality_with_equality_at_p() {
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..20 {
            let pv = random_dist(6, &mut rng);
            let qv = random_dist(6, &mut rng);
            let p = Tensor::vector(pv.clone());
            let q = Tensor::vector(qv);
            let h = cross_entropy_h(&p, &q).unwrap().item();
            let entropy: f64 = -pv.iter().map(|&v| v * v.ln()).sum::<f64>();
            assert!(h >= entropy - 1e-9);
            let h_self = cross_entropy_h(&p, &p).unwrap().item();
            assert!((h_self - entropy).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_cls_matches_cross_entropy_of_cls_rows() {
        let mut rng = StdRng::seed_from_u64(2);
        let t = random_table(3, 5, Side::Teacher, &mut rng);
        let s = random_table(3, 5, Side::Student, &mut rng);
        let pair = ViewPair::new(0, 0, 1, 1, 7);
        let l = loss_cls(&pair, &t, &s).unwrap();
        let direct = cross_entropy_h(&t.cls, &s.cls).unwrap();
        assert_eq!(l.item(), direct.item());
    }

    #[test]
    fn same_image_pair_equals_self_distillation_path_bit_for_bit() {
        let mut rng = StdRng::seed_from_u64(3);
        let t = random_table(3, 5, Side::Teacher, &mut rng);
        let s = random_table(3, 5, Side::Student, &mut rng);
        let pair = ViewPair::new(4, 0, 4, 1, 2);
        assert!(pair.same_image);
        let via_pair = loss_cls(&pair, &t, &s).unwrap();
        let via_self = loss_cls_self(&t, &s).unwrap();
        assert_eq!(via_pair.item().to_bits(), via_self.item().to_bits());
    }

    #[test]
    fn loss_cls_side_mismatch_rejected() {
        let mut rng = StdRng::seed_from_u64(4);
        let t = random_table(2, 4, Side::Teacher, &mut rng);
        let s = random_table(2, 4, Side::Student, &mut rng);
        let pair = ViewPair::new(0, 0, 1, 0, 0);
        assert!(matches!(
            loss_cls(&pair, &s, &t),
            Err(LossError::SideMismatch { .. })
        ));
    }

    #[test]
    fn mim_empty_mask_is_zero() {
        let mut rng = StdRng::seed_from_u64(5);
        let t = random_table(4, 5, Side::Teacher, &mut rng);
        let s = random_table(4, 5, Side::Student, &mut rng);
        let l = loss_mim(&t, &s, &MaskSpec::none(4)).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn mim_single_patch_equals_that_h() {
        let mut rng = StdRng::seed_from_u64(6);
        let t = random_table(4, 5, Side::Teacher, &mut rng);
        let s = random_table(4, 5, Side::Student, &mut rng);
        let mask = MaskSpec {
            grid: vec![false, false, true, false],
            target_ratio: 0.25,
        };
        let l = loss_mim(&t, &s, &mask).unwrap();
        let tp = t.patches.row(2).unwrap();
        let sp = s.patches.row(2).unwrap();
        let h = cross_entropy_h(&tp, &sp).unwrap();
        assert!((l.item() - h.item()).abs() < 1e-9);
    }

    #[test]
    fn mim_equals_brute_force_sum() {
        let mut rng = StdRng::seed_from_u64(7);
        let n = 8;
        let k = 6;
        let t = random_table(n, k, Side::Teacher, &mut rng);
        let s = random_table(n, k, Side::Student, &mut rng);
        let grid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        let mask = MaskSpec {
            grid: grid.clone(),
            target_ratio: 0.4,
        };
        let l = loss_mim(&t, &s, &mask).unwrap();

        let mut brute = 0.0;
        let mut cnt = 0usize;
        for i in 0..n {
            if grid[i] {
                let tp = t.patches.row(i).unwrap();
                let sp = s.patches.row(i).unwrap();
                brute += cross_entropy_h(&tp, &sp).unwrap().item();
                cnt += 1;
            }
        }
        let expect = if cnt == 0 { 0.0 } else { brute / cnt as f64 };
        assert!((l.item() - expect).abs() < 1e-9);
    }

    #[test]
    fn mim_unnormalized_monotone_under_mask_growth() {
        let mut rng = StdRng::seed_from_u64(8);
        let n = 6;
        let t = random_table(n, 4, Side::Teacher, &mut rng);
        let s = random_table(n, 4, Side::Student, &mut rng);
        let sub = MaskSpec {
            grid: vec![true, false, true, false, false, false],
            target_ratio: 0.3,
        };
        let full = MaskSpec {
            grid: vec![true; n],
            target_ratio: 1.0,
        };
        let l_sub = loss_mim_with(&t, &s, &sub, false).unwrap();
        let l_full = loss_mim_with(&t, &s, &full, false).unwrap();
        assert!(l_full.item() >= l_sub.item());
    }

    #[test]
    fn match_identity_and_permutation() {
        let feats = Tensor::leaf(&[3, 3], vec![1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let m = match_patches(&feats, &feats).unwrap();
        assert_eq!(m.k_plus, vec![0, 1, 2]);

        let teacher = Tensor::leaf(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let student = Tensor::leaf(&[2, 2], vec![0.0f64, 1.0, 1.0, 0.0]).unwrap();
        let m = match_patches(&teacher, &student).unwrap();
        assert_eq!(m.k_plus, vec![1, 0]);
    }

    #[test]
    fn match_equals_brute_force_and_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..20 {
            let n = 6;
            let d = 8;
            let tf: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let sf: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = Tensor::leaf(&[n, d], tf.clone()).unwrap();
            let s = Tensor::leaf(&[n, d], sf.clone()).unwrap();
            let m = match_patches(&t, &s).unwrap();

            // exhaustive search oracle
            for k in 0..n {
                let mut best = 0;
                let mut best_sim = f64::NEG_INFINITY;
                for l in 0..n {
                    let dot: f64 = (0..d).map(|j| tf[k * d + j] * sf[l * d + j]).sum();
                    let na: f64 = (0..d).map(|j| tf[k * d + j].powi(2)).sum::<f64>().sqrt();
                    let nb: f64 = (0..d).map(|j| sf[l * d + j].powi(2)).sum::<f64>().sqrt();
                    let sim = dot / (na * nb).max(1e-12);
                    if sim > best_sim {
                        best_sim = sim;
                        best = l;
                    }
                }
                assert_eq!(m.k_plus[k], best);
                assert!(m.sims[k] >= -1.0 - 1e-9 && m.sims[k] <= 1.0 + 1e-9);
            }

            // cosine is scale invariant for c > 0
            let t2 = t.scale(3.7);
            let s2 = s.scale(0.2);
            let m2 = match_patches(&t2, &s2).unwrap();
            assert_eq!(m.k_plus, m2.k_plus);
        }
    }

    #[test]
    fn match_ties_break_to_lowest_index() {
        let teacher = Tensor::leaf(&[1, 2], vec![1.0f64, 0.0]).unwrap();
        let student = Tensor::leaf(&[3, 2], vec![2.0f64, 0.0, 1.0, 0.0, 0.5, 0.0]).unwrap();
        let m = match_patches(&teacher, &student).unwrap();
        assert_eq!(m.k_plus, vec![0]);
    }

    #[test]
    fn loss_patch_identical_one_hots_is_zero() {
        let k = 5;
        let cls = Tensor::vector(vec![0.2f64; 5]);
        let mut rows = Vec::new();
        for i in 0..3 {
            let mut r = vec![0.0; k];
            r[i] = 1.0;
            rows.extend(r);
        }
        let patches = Tensor::leaf(&[3, k], rows).unwrap();
        let t = ProbTable::new(cls.clone(), patches.clone(), Side::Teacher).unwrap();
        let s = ProbTable::new(cls, patches, Side::Student).unwrap();
        let matches = MatchMap {
            k_plus: vec![0, 1, 2],
            sims: vec![1.0; 3],
        };
        let l = loss_patch(&t, &s, &matches, &PatchWeighting::Uniform).unwrap();
        assert!(l.item().abs() < 1e-9);
    }

    #[test]
    fn loss_patch_single_patch_equals_h() {
        let mut rng = StdRng::seed_from_u64(10);
        let t = random_table(1, 4, Side::Teacher, &mut rng);
        let s = random_table(1, 4, Side::Student, &mut rng);
        let matches = MatchMap {
            k_plus: vec![0],
            sims: vec![1.0],
        };
        let l = loss_patch(&t, &s, &matches, &PatchWeighting::Uniform).unwrap();
        let h = cross_entropy_h(
            &t.patches.row(0).unwrap(),
            &s.patches.row(0).unwrap(),
        )
        .unwrap();
        assert!((l.item() - h.item()).abs() < 1e-9);
    }

    #[test]
    fn loss_patch_equals_brute_force_weighted_sum() {
        let mut rng = StdRng::seed_from_u64(11);
        let n = 6;
        let k = 5;
        let t = random_table(n, k, Side::Teacher, &mut rng);
        let s = random_table(n, k, Side::Student, &mut rng);
        let k_plus: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        let matches = MatchMap {
            k_plus: k_plus.clone(),
            sims: vec![0.5; n],
        };

        for weighting in [
            PatchWeighting::Uniform,
            PatchWeighting::Attention({
                let w = random_dist(n, &mut rng);
                w.into_iter().collect()
            }),
        ] {
            let l = loss_patch(&t, &s, &matches, &weighting).unwrap();
            let mut brute = 0.0;
            for (kk, &kp) in k_plus.iter().enumerate() {
                let h = cross_entropy_h(
                    &t.patches.row(kk).unwrap(),
                    &s.patches.row(kp).unwrap(),
                )
                .unwrap()
                .item();
                let w = match &weighting {
                    PatchWeighting::Uniform => 1.0 / n as f64,
                    PatchWeighting::Attention(wv) => wv[kp],
                };
                brute += w * h;
            }
            assert!((l.item() - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_patch_rejects_unnormalized_attention() {
        let mut rng = StdRng::seed_from_u64(12);
        let t = random_table(3, 4, Side::Teacher, &mut rng);
        let s = random_table(3, 4, Side::Student, &mut rng);
        let matches = MatchMap {
            k_plus: vec![0, 1, 2],
            sims: vec![1.0; 3],
        };
        let bad = PatchWeighting::Attention(vec![0.5, 0.5, 0.5]);
        assert!(matches!(
            loss_patch(&t, &s, &matches, &bad),
            Err(LossError::WeightsNotNormalized { .. })
        ));
    }

    #[test]
    fn stage1_zero_mask_reduces_to_cls() {
        let mut rng = StdRng::seed_from_u64(13);
        let tt = [
            random_table(4, 5, Side::Teacher, &mut rng),
            random_table(4, 5, Side::Teacher, &mut rng),
        ];
        let st = [
            random_table(4, 5, Side::Student, &mut rng),
            random_table(4, 5, Side::Student, &mut rng),
        ];
        let none = MaskSpec::none(4);
        let out = stage1_loss(&tt, &st, [&none, &none], true).unwrap();
        assert_eq!(out.mim.item(), 0.0);
        assert_eq!(out.total.item(), out.cls.item());
    }

    #[test]
    fn stage1_total_is_component_sum_and_recomposes() {
        let mut rng = StdRng::seed_from_u64(14);
        let tt = [
            random_table(4, 5, Side::Teacher, &mut rng),
            random_table(4, 5, Side::Teacher, &mut rng),
        ];
        let st = [
            random_table(4, 5, Side::Student, &mut rng),
            random_table(4, 5, Side::Student, &mut rng),
        ];
        let m0 = MaskSpec {
            grid: vec![true, false, true, false],
            target_ratio: 0.5,
        };
        let m1 = MaskSpec {
            grid: vec![false, true, false, false],
            target_ratio: 0.25,
        };
        let out = stage1_loss(&tt, &st, [&m0, &m1], true).unwrap();
        assert!((out.total.item() - (out.cls.item() + out.mim.item())).abs() < 1e-12);

        let c01 = cross_entropy_h(&tt[0].cls, &st[1].cls).unwrap().item();
        let c10 = cross_entropy_h(&tt[1].cls, &st[0].cls).unwrap().item();
        let mim0 = loss_mim(&tt[0], &st[0], &m0).unwrap().item();
        let mim1 = loss_mim(&tt[1], &st[1], &m1).unwrap().item();
        let expect = (c01 + c10) / 2.0 + (mim0 + mim1) / 2.0;
        assert!((out.total.item() - expect).abs() < 1e-9);
    }

    #[test]
    fn stage2_lambda_zero_is_cls_only() {
        let mut rng = StdRng::seed_from_u64(15);
        let cls_terms: Vec<Tensor<f64>> = (0..5)
            .map(|_| Tensor::scalar(rng.gen_range(0.1..2.0)))
            .collect();
        let patch_terms: Vec<Tensor<f64>> = (0..5)
            .map(|_| Tensor::scalar(rng.gen_range(0.1..2.0)))
            .collect();
        let out = stage2_loss(&cls_terms, &patch_terms, 0.0).unwrap();
        assert_eq!(out.total.item().to_bits(), out.cls.item().to_bits());
        // the patch component is still reported
        assert!(out.patch.item() > 0.0);
    }

    #[test]
    fn stage2_single_pair_and_recomposition() {
        let c = Tensor::scalar(0.8f64);
        let p = Tensor::scalar(0.5f64);
        let out = stage2_loss(&[c.clone()], &[p.clone()], 0.45).unwrap();
        assert!((out.total.item() - (0.8 + 0.45 * 0.5)).abs() < 1e-12);

        let mut rng = StdRng::seed_from_u64(16);
        let cls_terms: Vec<Tensor<f64>> = (0..7)
            .map(|_| Tensor::scalar(rng.gen_range(0.1..2.0)))
            .collect();
        let patch_terms: Vec<Tensor<f64>> = (0..7)
            .map(|_| Tensor::scalar(rng.gen_range(0.1..2.0)))
            .collect();
        let out = stage2_loss(&cls_terms, &patch_terms, 0.3).unwrap();
        let mc: f64 = cls_terms.iter().map(|t| t.item()).sum::<f64>() / 7.0;
        let mp: f64 = patch_terms.iter().map(|t| t.item()).sum::<f64>() / 7.0;
        assert!((out.total.item() - (mc + 0.3 * mp)).abs() < 1e-9);
    }

    #[test]
    fn prob_table_validation() {
        let cls = Tensor::vector(vec![0.5f64, 0.5]);
        let bad_patches = Tensor::leaf(&[1, 2], vec![0.9f64, 0.3]).unwrap();
        assert!(matches!(
            ProbTable::new(cls, bad_patches, Side::Teacher),
            Err(LossError::RowNotNormalized { .. })
        ));
    }
}
