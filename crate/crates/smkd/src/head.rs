//! Shared projection head: 3-layer GELU MLP into an l2-normalized bottleneck,
//! then a weight-normalized linear map to K logits. One parameter set serves
//! `[cls]` and `[patch]` tokens alike. Teacher logits are centered and
//! sharpened; student logits only sharpened.

use rand::Rng;

use crate::tensor::{Scalar, Tensor, TensorError, TensorResult};
use crate::vit::LinearParams;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    /// Output dimension K of the categorical distributions.
    pub out_dim: usize,
    pub student_temp: f64,
    pub teacher_temp_start: f64,
    pub teacher_temp_end: f64,
    /// Epochs of linear teacher-temperature warmup.
    pub teacher_temp_warmup_epochs: usize,
    pub center_momentum: f64,
}

impl HeadConfig {
    pub fn desk_default(in_dim: usize) -> Self {
        HeadConfig {
            in_dim,
            hidden_dim: 2 * in_dim,
            bottleneck_dim: in_dim,
            out_dim: 256,
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 5,
            center_momentum: 0.9,
        }
    }

    pub fn validate(&self) -> TensorResult<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.bottleneck_dim == 0 || self.out_dim == 0
        {
            return Err(TensorError::NonPositiveParameter {
                name: "head dimension",
                value: 0.0,
            });
        }
        if self.student_temp <= 0.0 {
            return Err(TensorError::NonPositiveParameter {
                name: "student_temp",
                value: self.student_temp,
            });
        }
        if self.teacher_temp_start <= 0.0 || self.teacher_temp_end <= 0.0 {
            return Err(TensorError::NonPositiveParameter {
                name: "teacher_temp",
                value: self.teacher_temp_start.min(self.teacher_temp_end),
            });
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(TensorError::NonPositiveParameter {
                name: "center_momentum",
                value: self.center_momentum,
            });
        }
        Ok(())
    }

    /// Teacher temperature at a given epoch: linear warmup from start to end.
    pub fn teacher_temp_at(&self, epoch: usize) -> f64 {
        if self.teacher_temp_warmup_epochs == 0 || epoch >= self.teacher_temp_warmup_epochs {
            return self.teacher_temp_end;
        }
        let t = epoch as f64 / self.teacher_temp_warmup_epochs as f64;
        self.teacher_temp_start + (self.teacher_temp_end - self.teacher_temp_start) * t
    }
}

/// Running mean of teacher logits, subtracted before sharpening to prevent
/// collapse onto a single output dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterState<T: Scalar> {
    pub center: Vec<T>,
}

impl<T: Scalar> CenterState<T> {
    pub fn zeros(k: usize) -> Self {
        CenterState {
            center: vec![T::ZERO; k],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.center.iter().all(|v| v.is_finite())
    }
}

/// `center <- m_c * center + (1 - m_c) * mean(batch_teacher_logits)`.
pub fn update_center<T: Scalar>(
    cs: &CenterState<T>,
    batch_teacher_logits: &Tensor<T>,
    m_c: f64,
) -> TensorResult<CenterState<T>> {
    let k = cs.center.len();
    let (rows, cols) = match batch_teacher_logits.shape() {
        [r, c] if *r >= 1 => (*r, *c),
        other => {
            return Err(TensorError::NotTwoDimensional {
                op: "update_center",
                shape: other.to_vec(),
            })
        }
    };
    if cols != k {
        return Err(TensorError::ShapeMismatch {
            op: "update_center",
            left: vec![rows, cols],
            right: vec![k],
        });
    }
    let m = T::from_f64(m_c);
    let one_minus = T::from_f64(1.0 - m_c);
    let inv_rows = T::ONE / T::from_usize(rows);
    let data = batch_teacher_logits.data();
    let mut center = vec![T::ZERO; k];
    for row in data.chunks(k) {
        for (acc, &v) in center.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (c, prev) in center.iter_mut().zip(&cs.center) {
        *c = m * *prev + one_minus * (*c * inv_rows);
    }
    Ok(CenterState { center })
}

/// Projection head parameters, shared between `[cls]` and `[patch]` tokens.
#[derive(Clone, Debug)]
pub struct HeadParams<T: Scalar> {
    pub l1: LinearParams<T>,
    pub l2: LinearParams<T>,
    pub l3: LinearParams<T>,
    /// Direction vectors of the final layer, `[K, bottleneck]`; rows are
    /// renormalized to unit length in the forward pass (weight norm with
    /// frozen unit gains), keeping logit scale bounded.
    pub last_dir: Tensor<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn init<R: Rng>(cfg: &HeadConfig, rng: &mut R) -> Self {
        HeadParams {
            l1: LinearParams::init(rng, cfg.in_dim, cfg.hidden_dim),
            l2: LinearParams::init(rng, cfg.hidden_dim, cfg.hidden_dim),
            l3: LinearParams::init(rng, cfg.hidden_dim, cfg.bottleneck_dim),
            last_dir: Tensor::param(
                &[cfg.out_dim, cfg.bottleneck_dim],
                crate::vit::trunc_normal(rng, cfg.out_dim * cfg.bottleneck_dim, 0.02),
            )
            .expect("head last layer"),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        f("l1.w".into(), &self.l1.w);
        f("l1.b".into(), &self.l1.b);
        f("l2.w".into(), &self.l2.w);
        f("l2.b".into(), &self.l2.b);
        f("l3.w".into(), &self.l3.w);
        f("l3.b".into(), &self.l3.b);
        f("last_dir".into(), &self.last_dir);
    }

    pub fn try_map(
        &self,
        f: &mut impl FnMut(String, &Tensor<T>) -> TensorResult<Tensor<T>>,
    ) -> TensorResult<Self> {
        Ok(HeadParams {
            l1: LinearParams {
                w: f("l1.w".into(), &self.l1.w)?,
                b: f("l1.b".into(), &self.l1.b)?,
            },
            l2: LinearParams {
                w: f("l2.w".into(), &self.l2.w)?,
                b: f("l2.b".into(), &self.l2.b)?,
            },
            l3: LinearParams {
                w: f("l3.w".into(), &self.l3.w)?,
                b: f("l3.b".into(), &self.l3.b)?,
            },
            last_dir: f("last_dir".into(), &self.last_dir)?,
        })
    }

    /// MLP + l2 bottleneck for a `[M, d]` stack of tokens -> `[M, bottleneck]`
    /// with unit-norm rows.
    pub fn bottleneck_rows(&self, tokens: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let h1 = self.l1.apply(tokens)?.gelu();
        let h2 = self.l2.apply(&h1)?.gelu();
        let b = self.l3.apply(&h2)?;
        Ok(b.l2_normalize_rows(T::from_f64(1e-12)))
    }

    /// Project a `[M, d]` stack of tokens to `[M, K]` logits.
    pub fn project_rows(&self, tokens: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let bn = self.bottleneck_rows(tokens)?;
        let dirs = self.last_dir.l2_normalize_rows(T::from_f64(1e-12));
        bn.matmul_nt(&dirs)
    }

    /// Project a single token `[d]` to `[K]` logits.
    pub fn project(&self, token: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let d = token.len();
        let k = self.last_dir.shape()[0];
        self.project_rows(&token.reshape(&[1, d])?)?.reshape(&[k])
    }
}

/// Teacher output distribution: `softmax((logits - center) / temp)` with the
/// whole branch detached from the gradient path.
pub fn teacher_distribution_rows<T: Scalar>(
    logits: &Tensor<T>,
    cs: &CenterState<T>,
    teacher_temp: f64,
) -> TensorResult<Tensor<T>> {
    if teacher_temp <= 0.0 {
        return Err(TensorError::NonPositiveParameter {
            name: "teacher_temp",
            value: teacher_temp,
        });
    }
    let neg_center: Vec<T> = cs.center.iter().map(|&v| -v).collect();
    let nc = Tensor::vector(neg_center);
    logits
        .stop_grad()
        .add_bias(&nc)?
        .softmax(1, T::from_f64(teacher_temp))
}

pub fn teacher_distribution<T: Scalar>(
    logits: &Tensor<T>,
    cs: &CenterState<T>,
    teacher_temp: f64,
) -> TensorResult<Tensor<T>> {
    let k = logits.len();
    teacher_distribution_rows(&logits.reshape(&[1, k])?, cs, teacher_temp)?.reshape(&[k])
}

/// Student output distribution: `softmax(logits / temp)`, differentiable.
pub fn student_distribution_rows<T: Scalar>(
    logits: &Tensor<T>,
    student_temp: f64,
) -> TensorResult<Tensor<T>> {
    logits.softmax(1, T::from_f64(student_temp))
}

pub fn student_distribution<T: Scalar>(
    logits: &Tensor<T>,
    student_temp: f64,
) -> TensorResult<Tensor<T>> {
    let k = logits.len();
    student_distribution_rows(&logits.reshape(&[1, k])?, student_temp)?.reshape(&[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, finite_diff_check};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn micro_cfg() -> HeadConfig {
        HeadConfig {
            in_dim: 6,
            hidden_dim: 10,
            bottleneck_dim: 5,
            out_dim: 8,
            student_temp: 0.1,
            teacher_temp_start: 0.04,
            teacher_temp_end: 0.07,
            teacher_temp_warmup_epochs: 5,
            center_momentum: 0.9,
        }
    }

    fn random_tokens(m: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        Tensor::leaf(
            &[m, d],
            (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn projection_shape_and_unit_bottleneck() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(1);
        let params = HeadParams::<f64>::init(&cfg, &mut rng);
        let token = random_tokens(1, 6, 2).reshape(&[6]).unwrap();
        let logits = params.project(&token).unwrap();
        assert_eq!(logits.shape(), &[cfg.out_dim]);

        let bn = params
            .bottleneck_rows(&token.reshape(&[1, 6]).unwrap())
            .unwrap();
        let norm: f64 = bn.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_parameters_serve_cls_and_patch() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(3);
        let params = HeadParams::<f64>::init(&cfg, &mut rng);
        let cls = random_tokens(1, 6, 4).reshape(&[6]).unwrap();
        let patch = random_tokens(1, 6, 5).reshape(&[6]).unwrap();

        let out_cls = params.project(&cls).unwrap();
        let out_patch = params.project(&patch).unwrap();

        // bump one shared weight; both outputs must change
        let bumped = params
            .try_map(&mut |name, t| {
                if name == "l1.w" {
                    let mut d = t.data().to_vec();
                    d[0] += 0.25;
                    t.with_data(d)
                } else {
                    Ok(t.clone())
                }
            })
            .unwrap();
        let out_cls2 = bumped.project(&cls).unwrap();
        let out_patch2 = bumped.project(&patch).unwrap();
        assert_ne!(out_cls.data(), out_cls2.data());
        assert_ne!(out_patch.data(), out_patch2.data());
    }

    #[test]
    fn head_gradients_all_params() {
        let cfg = micro_cfg();
        for seed in 0..3u64 {
            let mut rng = StdRng::seed_from_u64(10 + seed);
            // O(1)-scale weights: init-scale weights leave the bottleneck rows
            // with ~1e-5 norms, where normalization curvature swamps any
            // finite-difference step. The backward path is scale-independent.
            let params = HeadParams::<f64>::init(&cfg, &mut rng)
                .try_map(&mut |_, t| {
                    let d = t
                        .data()
                        .iter()
                        .map(|&v| if v == 0.0 { 0.0 } else { v * 30.0 })
                        .collect();
                    t.with_data(d)
                })
                .unwrap();
            let tokens = random_tokens(3, 6, 20 + seed);
            let probe = random_tokens(3, cfg.out_dim, 30 + seed);

            let mut names = Vec::new();
            params.visit(&mut |name, _| names.push(name));
            for target in names {
                let original = {
                    let mut found = None;
                    params.visit(&mut |name, t| {
                        if name == target {
                            found = Some(t.clone());
                        }
                    });
                    found.unwrap()
                };
                let p = params.clone();
                let toks = tokens.clone();
                let pr = probe.clone();
                let tname = target.clone();
                let f = move |x: &Tensor<f64>| {
                    let subst = p.try_map(&mut |name, t| {
                        if name == tname {
                            Ok(x.clone())
                        } else {
                            Ok(t.clone())
                        }
                    })?;
                    Ok(subst.project_rows(&toks)?.mul(&pr)?.sum_all())
                };
                let err = finite_diff_check(f, &original, 1e-5).unwrap();
                assert!(err < 1e-5, "param {target} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn teacher_distribution_uniform_when_centered() {
        let k = 6;
        let logits = Tensor::vector(vec![0.5f64, -1.0, 2.0, 0.0, 1.5, -0.5]);
        let cs = CenterState {
            center: logits.data().to_vec(),
        };
        let p = teacher_distribution(&logits, &cs, 0.07).unwrap();
        for &v in p.data() {
            assert!((v - 1.0 / k as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_sharpening_monotone_in_inverse_temperature() {
        let logits = Tensor::vector(vec![1.0f64, 0.3, -0.2, 0.0]);
        let cs = CenterState::zeros(4);
        let mut prev_max = 0.0;
        for temp in [1.0, 0.5, 0.2, 0.1, 0.05] {
            let p = teacher_distribution(&logits, &cs, temp).unwrap();
            let mx = p.data().iter().cloned().fold(f64::MIN, f64::max);
            assert!(mx >= prev_max, "temp {temp}: {mx} < {prev_max}");
            prev_max = mx;
        }
        assert!(prev_max > 0.99);
    }

    #[test]
    fn teacher_two_logit_value() {
        let logits = Tensor::vector(vec![1.0f64, 0.0]);
        let cs = CenterState::zeros(2);
        let p = teacher_distribution(&logits, &cs, 1.0).unwrap();
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        assert!((p.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn teacher_branch_is_gradient_free() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(40);
        let params = HeadParams::<f64>::init(&cfg, &mut rng);
        let tokens = random_tokens(2, 6, 41);
        let logits = params.project_rows(&tokens).unwrap();
        let cs = CenterState::zeros(cfg.out_dim);
        let teacher = teacher_distribution_rows(&logits, &cs, 0.05).unwrap();
        let loss = teacher.sum_all();
        let gm = backward(&loss).unwrap();
        assert!(gm.is_empty(), "teacher path leaked gradients");
    }

    #[test]
    fn student_distribution_properties() {
        // uniform input -> uniform output
        let logits = Tensor::full(&[5], 0.7f64);
        let p = student_distribution(&logits, 0.1).unwrap();
        for &v in p.data() {
            assert!((v - 0.2).abs() < 1e-9);
        }
        // shift invariance
        let a = Tensor::vector(vec![0.4f64, -0.1, 0.9]);
        let b = a.add(&Tensor::full(&[3], 3.0)).unwrap();
        let pa = student_distribution(&a, 0.3).unwrap();
        let pb = student_distribution(&b, 0.3).unwrap();
        for (&x, &y) in pa.data().iter().zip(pb.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        // scalar oracle at temperature 1
        let p = student_distribution(&Tensor::vector(vec![1.0f64, 0.0]), 1.0).unwrap();
        assert!((p.data()[0] - 0.7311).abs() < 1e-4);
        // sums to one
        let s: f64 = pa.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn center_update_rules() {
        let cs = CenterState::zeros(3);
        let batch = Tensor::leaf(&[2, 3], vec![1.0f64, 2.0, 3.0, 3.0, 2.0, 1.0]).unwrap();

        let unchanged = update_center(&cs, &batch, 1.0).unwrap();
        assert_eq!(unchanged.center, cs.center);

        let replaced = update_center(&cs, &batch, 0.0).unwrap();
        assert_eq!(replaced.center, vec![2.0, 2.0, 2.0]);

        let ones = Tensor::full(&[4, 3], 1.0f64);
        let blended = update_center(&cs, &ones, 0.9).unwrap();
        for &v in &blended.center {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_temp_schedule_endpoints() {
        let cfg = micro_cfg();
        assert!((cfg.teacher_temp_at(0) - 0.04).abs() < 1e-12);
        assert!((cfg.teacher_temp_at(5) - 0.07).abs() < 1e-12);
        assert!((cfg.teacher_temp_at(100) - 0.07).abs() < 1e-12);
        let mid = cfg.teacher_temp_at(2);
        assert!(mid > 0.04 && mid < 0.07);
    }

    #[test]
    fn rejects_bad_temperatures() {
        let logits = Tensor::vector(vec![0.0f64, 1.0]);
        let cs = CenterState::zeros(2);
        assert!(teacher_distribution(&logits, &cs, 0.0).is_err());
        assert!(student_distribution(&logits, -0.1).is_err());
    }
}
