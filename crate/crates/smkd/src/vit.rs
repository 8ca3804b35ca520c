//! Small pre-norm Vision Transformer: patch embedding, learnable `[MASK]`
//! substitution, `[cls]` token, and per-layer attention map exposure.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::masking::MaskSpec;
use crate::tensor::{Scalar, Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    /// Desk-scale defaults: every mechanism exercised, full runs in minutes.
    pub fn desk_default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(VitError::BadConfig(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(VitError::BadConfig(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return Err(VitError::BadConfig(
                "depth and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Debug)]
pub enum VitError {
    BadConfig(String),
    /// NaN or infinity detected in a block output.
    NonFinite { layer: usize },
    Tensor(TensorError),
}

impl fmt::Display for VitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VitError::BadConfig(msg) => write!(f, "bad ViT config: {msg}"),
            VitError::NonFinite { layer } => {
                write!(f, "non-finite activation after block {layer}")
            }
            VitError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for VitError {}

impl From<TensorError> for VitError {
    fn from(e: TensorError) -> Self {
        VitError::Tensor(e)
    }
}

/// ViT forward output: one `[cls]` embedding, `N` patch embeddings, and the
/// attention maps of every layer and head (each `[(N+1), (N+1)]`).
#[derive(Clone, Debug)]
pub struct TokenSet<T: Scalar> {
    pub cls: Tensor<T>,
    pub patches: Tensor<T>,
    pub attn: Vec<Vec<Tensor<T>>>,
}

/// How many attention maps a batched forward materializes per view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMode {
    /// No maps: training paths that never read them.
    None,
    /// Only the final layer: evaluation pooling and attention weighting.
    LastLayer,
    /// Every layer: the single-view `forward` contract and visualization.
    All,
}

#[derive(Clone, Debug)]
pub struct LinearParams<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LinearParams<T> {
    pub(crate) fn init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            w: Tensor::param(&[in_dim, out_dim], trunc_normal(rng, in_dim * out_dim, 0.02))
                .expect("linear init"),
            b: Tensor::param(&[out_dim], vec![T::ZERO; out_dim]).expect("bias init"),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> TensorResult<Tensor<T>> {
        x.matmul(&self.w)?.add_bias(&self.b)
    }
}

#[derive(Clone, Debug)]
pub struct NormParams<T: Scalar> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    fn init(dim: usize) -> Self {
        NormParams {
            gain: Tensor::param(&[dim], vec![T::ONE; dim]).expect("norm gain"),
            bias: Tensor::param(&[dim], vec![T::ZERO; dim]).expect("norm bias"),
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> TensorResult<Tensor<T>> {
        x.layer_norm(&self.gain, &self.bias, T::from_f64(1e-6))
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams<T: Scalar> {
    pub norm1: NormParams<T>,
    pub qkv: LinearParams<T>,
    pub proj: LinearParams<T>,
    pub norm2: NormParams<T>,
    pub fc1: LinearParams<T>,
    pub fc2: LinearParams<T>,
}

/// All backbone parameters; iterate them by name through [`VitParams::visit`].
#[derive(Clone, Debug)]
pub struct VitParams<T: Scalar> {
    pub patch_embed: LinearParams<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub mask_token: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_f: NormParams<T>,
}

impl<T: Scalar> VitParams<T> {
    /// Truncated-normal init (std 0.02), zero biases, unit norm gains.
    pub fn init<R: Rng>(cfg: &VitConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                norm1: NormParams::init(d),
                qkv: LinearParams::init(rng, d, 3 * d),
                proj: LinearParams::init(rng, d, d),
                norm2: NormParams::init(d),
                fc1: LinearParams::init(rng, d, cfg.mlp_ratio * d),
                fc2: LinearParams::init(rng, cfg.mlp_ratio * d, d),
            })
            .collect();
        VitParams {
            patch_embed: LinearParams::init(rng, patch_in, d),
            cls_token: Tensor::param(&[d], trunc_normal(rng, d, 0.02)).expect("cls"),
            pos_embed: Tensor::param(&[n + 1, d], trunc_normal(rng, (n + 1) * d, 0.02))
                .expect("pos"),
            mask_token: Tensor::param(&[d], trunc_normal(rng, d, 0.02)).expect("mask token"),
            blocks,
            norm_f: NormParams::init(d),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor<T>)) {
        f("patch_embed.w".into(), &self.patch_embed.w);
        f("patch_embed.b".into(), &self.patch_embed.b);
        f("cls_token".into(), &self.cls_token);
        f("pos_embed".into(), &self.pos_embed);
        f("mask_token".into(), &self.mask_token);
        for (i, blk) in self.blocks.iter().enumerate() {
            f(format!("blocks.{i}.norm1.gain"), &blk.norm1.gain);
            f(format!("blocks.{i}.norm1.bias"), &blk.norm1.bias);
            f(format!("blocks.{i}.qkv.w"), &blk.qkv.w);
            f(format!("blocks.{i}.qkv.b"), &blk.qkv.b);
            f(format!("blocks.{i}.proj.w"), &blk.proj.w);
            f(format!("blocks.{i}.proj.b"), &blk.proj.b);
            f(format!("blocks.{i}.norm2.gain"), &blk.norm2.gain);
            f(format!("blocks.{i}.norm2.bias"), &blk.norm2.bias);
            f(format!("blocks.{i}.fc1.w"), &blk.fc1.w);
            f(format!("blocks.{i}.fc1.b"), &blk.fc1.b);
            f(format!("blocks.{i}.fc2.w"), &blk.fc2.w);
            f(format!("blocks.{i}.fc2.b"), &blk.fc2.b);
        }
        f("norm_f.gain".into(), &self.norm_f.gain);
        f("norm_f.bias".into(), &self.norm_f.bias);
    }

    /// Rebuild with every parameter transformed; names match [`VitParams::visit`].
    pub fn try_map(
        &self,
        f: &mut impl FnMut(String, &Tensor<T>) -> TensorResult<Tensor<T>>,
    ) -> TensorResult<Self> {
        fn lin<T: Scalar>(
            f: &mut impl FnMut(String, &Tensor<T>) -> TensorResult<Tensor<T>>,
            name: &str,
            l: &LinearParams<T>,
        ) -> TensorResult<LinearParams<T>> {
            Ok(LinearParams {
                w: f(format!("{name}.w"), &l.w)?,
                b: f(format!("{name}.b"), &l.b)?,
            })
        }
        fn norm<T: Scalar>(
            f: &mut impl FnMut(String, &Tensor<T>) -> TensorResult<Tensor<T>>,
            name: &str,
            n: &NormParams<T>,
        ) -> TensorResult<NormParams<T>> {
            Ok(NormParams {
                gain: f(format!("{name}.gain"), &n.gain)?,
                bias: f(format!("{name}.bias"), &n.bias)?,
            })
        }
        let patch_embed = lin(f, "patch_embed", &self.patch_embed)?;
        let cls_token = f("cls_token".into(), &self.cls_token)?;
        let pos_embed = f("pos_embed".into(), &self.pos_embed)?;
        let mask_token = f("mask_token".into(), &self.mask_token)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            blocks.push(BlockParams {
                norm1: norm(f, &format!("blocks.{i}.norm1"), &blk.norm1)?,
                qkv: lin(f, &format!("blocks.{i}.qkv"), &blk.qkv)?,
                proj: lin(f, &format!("blocks.{i}.proj"), &blk.proj)?,
                norm2: norm(f, &format!("blocks.{i}.norm2"), &blk.norm2)?,
                fc1: lin(f, &format!("blocks.{i}.fc1"), &blk.fc1)?,
                fc2: lin(f, &format!("blocks.{i}.fc2"), &blk.fc2)?,
            });
        }
        let norm_f = norm(f, "norm_f", &self.norm_f)?;
        Ok(VitParams {
            patch_embed,
            cls_token,
            pos_embed,
            mask_token,
            blocks,
            norm_f,
        })
    }

    /// Extract non-overlapping patches and project them to embeddings.
    /// Positional embeddings are added later, inside `forward`.
    pub fn patchify(&self, cfg: &VitConfig, image: &Tensor<T>) -> Result<Tensor<T>, VitError> {
        let s = cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(VitError::Tensor(TensorError::ShapeMismatch {
                op: "patchify",
                left: image.shape().to_vec(),
                right: vec![3, s, s],
            }));
        }
        let p = cfg.patch_size;
        let g = cfg.grid();
        let src = image.data();
        let mut rows = Vec::with_capacity(g * g * 3 * p * p);
        for gy in 0..g {
            for gx in 0..g {
                for c in 0..3 {
                    for py in 0..p {
                        let y = gy * p + py;
                        let base = c * s * s + y * s + gx * p;
                        rows.extend_from_slice(&src[base..base + p]);
                    }
                }
            }
        }
        let pixels = Tensor::leaf(&[g * g, 3 * p * p], rows)?;
        Ok(self.patch_embed.apply(&pixels)?)
    }

    pub fn forward(&self, cfg: &VitConfig, tokens: &Tensor<T>) -> Result<TokenSet<T>, VitError> {
        Ok(self
            .forward_batch_attn(cfg, std::slice::from_ref(tokens), AttnMode::All)?
            .pop()
            .expect("one view in, one out"))
    }

    /// As [`VitParams::forward`] over several views at once, keeping every
    /// attention map.
    pub fn forward_batch(
        &self,
        cfg: &VitConfig,
        views: &[Tensor<T>],
    ) -> Result<Vec<TokenSet<T>>, VitError> {
        self.forward_batch_attn(cfg, views, AttnMode::All)
    }

    /// Run several views through the backbone at once. Row-local operations
    /// (projections, MLP, layer norm) are batched across views and attention
    /// runs block-diagonally per view, so results equal the one-view path bit
    /// for bit. `attn` controls how many attention maps are materialized into
    /// the token sets; training loops that never read them skip the copies.
    pub fn forward_batch_attn(
        &self,
        cfg: &VitConfig,
        views: &[Tensor<T>],
        attn: AttnMode,
    ) -> Result<Vec<TokenSet<T>>, VitError> {
        cfg.validate()?;
        if views.is_empty() {
            return Ok(vec![]);
        }
        let d = cfg.embed_dim;
        let n_view = views[0].shape()[0];
        for v in views {
            if v.shape() != [n_view, d] {
                return Err(VitError::Tensor(TensorError::ShapeMismatch {
                    op: "forward_batch",
                    left: v.shape().to_vec(),
                    right: vec![n_view, d],
                }));
            }
        }
        let t = n_view + 1; // tokens per view including [cls]
        let b = views.len();
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let pos = self.pos_for(cfg, n_view)?;

        let cls_row = self.cls_token.reshape(&[1, d])?;
        let mut stacked = Vec::with_capacity(b);
        for v in views {
            let with_cls = Tensor::concat_rows(&[cls_row.clone(), v.clone()])?;
            stacked.push(with_cls.add(&pos)?);
        }
        let mut x = Tensor::concat_rows(&stacked)?;

        // [layer][head] batched attention maps, each [b*t, t]
        let mut batched_attn: Vec<Vec<Tensor<T>>> = Vec::with_capacity(self.blocks.len());
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());

        for (layer, blk) in self.blocks.iter().enumerate() {
            let h = blk.norm1.apply(&x)?;
            let qkv = blk.qkv.apply(&h)?;
            let rows = b * t;
            let mut head_ctx = Vec::with_capacity(heads);
            let mut head_maps = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = qkv.select_block(0, rows, hd * dh, dh)?;
                let k = qkv.select_block(0, rows, d + hd * dh, dh)?;
                let v = qkv.select_block(0, rows, 2 * d + hd * dh, dh)?;
                let scores = q.matmul_batch_nt(&k, b)?.scale(scale);
                let probs = scores.softmax(1, T::ONE)?;
                head_ctx.push(probs.matmul_batch_nn(&v, b)?);
                head_maps.push(probs);
            }
            let ctx = Tensor::concat_cols(&head_ctx)?;
            batched_attn.push(head_maps);
            x = x.add(&blk.proj.apply(&ctx)?)?;
            let h2 = blk.norm2.apply(&x)?;
            let mlp = blk.fc2.apply(&blk.fc1.apply(&h2)?.gelu())?;
            x = x.add(&mlp)?;
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(VitError::NonFinite { layer });
            }
        }
        let final_x = self.norm_f.apply(&x)?;

        let layer_range = match attn {
            AttnMode::None => 0..0,
            AttnMode::LastLayer => self.blocks.len() - 1..self.blocks.len(),
            AttnMode::All => 0..self.blocks.len(),
        };

        let mut out = Vec::with_capacity(b);
        for vi in 0..b {
            let cls = final_x.row(vi * t)?;
            let patches = final_x.select_block(vi * t + 1, n_view, 0, d)?;
            let mut maps = Vec::new();
            for layer in layer_range.clone() {
                let mut per_head = Vec::with_capacity(heads);
                for hd in 0..heads {
                    per_head.push(batched_attn[layer][hd].select_block(vi * t, t, 0, t)?);
                }
                maps.push(per_head);
            }
            out.push(TokenSet {
                cls,
                patches,
                attn: maps,
            });
        }
        Ok(out)
    }

    /// Positional embeddings for a view with `n_view` patches; local crops
    /// with a smaller grid get a bilinear resample of the patch rows.
    fn pos_for(&self, cfg: &VitConfig, n_view: usize) -> TensorResult<Tensor<T>> {
        let n = cfg.num_patches();
        if n_view == n {
            return Ok(self.pos_embed.clone());
        }
        let d = cfg.embed_dim;
        let src_g = cfg.grid();
        let dst_g = (n_view as f64).sqrt().round() as usize;
        let cls_pos = self.pos_embed.select_block(0, 1, 0, d)?;
        let patch_pos = self.pos_embed.select_block(1, n, 0, d)?;
        let m = bilinear_matrix::<T>(src_g, dst_g);
        let resampled = m.matmul(&patch_pos)?;
        Tensor::concat_rows(&[cls_pos, resampled])
    }
}

/// Substitute masked patch embeddings with a learnable `[MASK]` vector:
/// row `i` becomes `e_mask` where the mask is set, stays untouched otherwise.
pub fn apply_mask_tokens<T: Scalar>(
    patch_embeds: &Tensor<T>,
    mask: &MaskSpec,
    e_mask: &Tensor<T>,
) -> TensorResult<Tensor<T>> {
    patch_embeds.mask_rows(&mask.grid, e_mask)
}

/// Head-averaged `[cls]` attention over patches from the last layer,
/// renormalized to sum to one.
pub fn cls_attention_weights<T: Scalar>(ts: &TokenSet<T>) -> Tensor<T> {
    let last = ts.attn.last().expect("at least one layer");
    let heads = last.len();
    let t = last[0].shape()[1];
    let n = t - 1;
    let mut w = vec![T::ZERO; n];
    for head in last {
        let row0 = &head.data()[..t];
        for (j, acc) in w.iter_mut().enumerate() {
            *acc += row0[j + 1];
        }
    }
    let inv_h = T::ONE / T::from_usize(heads);
    for v in &mut w {
        *v = *v * inv_h;
    }
    let total: T = w.iter().copied().sum();
    let denom = total.maximum(T::from_f64(1e-12));
    for v in &mut w {
        *v = *v / denom;
    }
    Tensor::vector(w)
}

/// Row-stochastic bilinear resampling matrix from a `src x src` grid to a
/// `dst x dst` grid, flattened row-major.
fn bilinear_matrix<T: Scalar>(src_g: usize, dst_g: usize) -> Tensor<T> {
    let mut data = vec![T::ZERO; dst_g * dst_g * src_g * src_g];
    let scale = src_g as f64 / dst_g as f64;
    let n_src = src_g * src_g;
    for dy in 0..dst_g {
        for dx in 0..dst_g {
            let row = dy * dst_g + dx;
            let sy = ((dy as f64 + 0.5) * scale - 0.5).clamp(0.0, src_g as f64 - 1.0);
            let sx = ((dx as f64 + 0.5) * scale - 0.5).clamp(0.0, src_g as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(src_g - 1);
            let x1 = (x0 + 1).min(src_g - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let mut add = |y: usize, x: usize, wgt: f64| {
                data[row * n_src + y * src_g + x] += T::from_f64(wgt);
            };
            add(y0, x0, (1.0 - fy) * (1.0 - fx));
            add(y0, x1, (1.0 - fy) * fx);
            add(y1, x0, fy * (1.0 - fx));
            add(y1, x1, fy * fx);
        }
    }
    Tensor::leaf(&[dst_g * dst_g, src_g * src_g], data).expect("bilinear matrix")
}

pub(crate) fn trunc_normal<T: Scalar, R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("normal");
    (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                return T::from_f64(v);
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn micro_cfg() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
        }
    }

    fn random_image(cfg: &VitConfig, seed: u64) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = 3 * cfg.image_size * cfg.image_size;
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::leaf(&[3, cfg.image_size, cfg.image_size], data).unwrap()
    }

    #[test]
    fn desk_config_patch_count() {
        let cfg = VitConfig::desk_default();
        assert_eq!(cfg.num_patches(), 16);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_divisibility_enforced() {
        let mut cfg = VitConfig::desk_default();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = VitConfig::desk_default();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_tokens() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(1);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let img = Tensor::zeros(&[3, 8, 8]);
        let toks = params.patchify(&cfg, &img).unwrap();
        assert_eq!(toks.shape(), &[4, 8]);
        assert!(toks.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_locality() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(2);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let a = random_image(&cfg, 3);
        // perturb only patch (0,0)
        let mut data = a.data().to_vec();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    data[c * 64 + y * 8 + x] += 0.5;
                }
            }
        }
        let b = Tensor::leaf(&[3, 8, 8], data).unwrap();
        let ta = params.patchify(&cfg, &a).unwrap();
        let tb = params.patchify(&cfg, &b).unwrap();
        let d = cfg.embed_dim;
        let differs: Vec<bool> = (0..cfg.num_patches())
            .map(|i| ta.data()[i * d..(i + 1) * d] != tb.data()[i * d..(i + 1) * d])
            .collect();
        assert_eq!(differs, vec![true, false, false, false]);
    }

    #[test]
    fn mask_token_substitution() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(4);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let toks = params.patchify(&cfg, &random_image(&cfg, 5)).unwrap();

        let none = MaskSpec::none(4);
        let same = apply_mask_tokens(&toks, &none, &params.mask_token).unwrap();
        assert_eq!(same.data(), toks.data());

        let all = MaskSpec {
            grid: vec![true; 4],
            target_ratio: 1.0,
        };
        let filled = apply_mask_tokens(&toks, &all, &params.mask_token).unwrap();
        for row in filled.data().chunks(cfg.embed_dim) {
            assert_eq!(row, params.mask_token.data());
        }

        let mixed = MaskSpec {
            grid: vec![true, false, true, false],
            target_ratio: 0.5,
        };
        let m = apply_mask_tokens(&toks, &mixed, &params.mask_token).unwrap();
        for (i, row) in m.data().chunks(cfg.embed_dim).enumerate() {
            let expect: &[f64] = if mixed.grid[i] {
                params.mask_token.data()
            } else {
                &toks.data()[i * cfg.embed_dim..(i + 1) * cfg.embed_dim]
            };
            assert_eq!(row, expect, "row {i}");
        }
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(6);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let toks = params.patchify(&cfg, &random_image(&cfg, 7)).unwrap();
        let ts = params.forward(&cfg, &toks).unwrap();
        assert_eq!(ts.cls.shape(), &[cfg.embed_dim]);
        assert_eq!(ts.patches.shape(), &[4, cfg.embed_dim]);
        assert_eq!(ts.attn.len(), cfg.depth);
        for layer in &ts.attn {
            assert_eq!(layer.len(), cfg.num_heads);
            for head in layer {
                assert_eq!(head.shape(), &[5, 5]);
                for row in head.data().chunks(5) {
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn forward_deterministic() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(8);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let toks = params.patchify(&cfg, &random_image(&cfg, 9)).unwrap();
        let a = params.forward(&cfg, &toks).unwrap();
        let b = params.forward(&cfg, &toks).unwrap();
        assert_eq!(a.cls.data(), b.cls.data());
        assert_eq!(a.patches.data(), b.patches.data());
    }

    #[test]
    fn batched_forward_matches_single() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(10);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let t1 = params.patchify(&cfg, &random_image(&cfg, 11)).unwrap();
        let t2 = params.patchify(&cfg, &random_image(&cfg, 12)).unwrap();
        let batch = params
            .forward_batch(&cfg, &[t1.clone(), t2.clone()])
            .unwrap();
        let s1 = params.forward(&cfg, &t1).unwrap();
        let s2 = params.forward(&cfg, &t2).unwrap();
        assert_eq!(batch[0].cls.data(), s1.cls.data());
        assert_eq!(batch[1].patches.data(), s2.patches.data());
    }

    #[test]
    fn permuting_patches_and_positions_permutes_outputs() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(13);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let toks = params.patchify(&cfg, &random_image(&cfg, 14)).unwrap();

        // swap patch rows 1 and 3 plus their positional embeddings (pos rows 2 and 4)
        let swapped_toks = toks.select_rows(&[0, 3, 2, 1]).unwrap();
        let swapped_params = params
            .try_map(&mut |name, t| {
                if name == "pos_embed" {
                    t.select_rows(&[0, 1, 4, 3, 2])
                } else {
                    Ok(t.clone())
                }
            })
            .unwrap();

        let base = params.forward(&cfg, &toks).unwrap();
        let perm = swapped_params.forward(&cfg, &swapped_toks).unwrap();

        let d = cfg.embed_dim;
        let bp = base.patches.data();
        let pp = perm.patches.data();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
        assert!(close(&pp[d..2 * d], &bp[3 * d..4 * d]));
        assert!(close(&pp[3 * d..4 * d], &bp[d..2 * d]));
        assert!(close(&pp[2 * d..3 * d], &bp[2 * d..3 * d]));
        assert!(close(base.cls.data(), perm.cls.data()));
    }

    #[test]
    fn cls_attention_weights_uniform_and_recompute() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(15);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let toks = params.patchify(&cfg, &random_image(&cfg, 16)).unwrap();
        let ts = params.forward(&cfg, &toks).unwrap();

        let w = cls_attention_weights(&ts);
        let total: f64 = w.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);

        // recompute from the stored attention maps
        let last = ts.attn.last().unwrap();
        let mut expect = vec![0.0; 4];
        for head in last {
            for (j, acc) in expect.iter_mut().enumerate() {
                *acc += head.data()[j + 1] / cfg.num_heads as f64;
            }
        }
        let s: f64 = expect.iter().sum();
        for (a, e) in w.data().iter().zip(&expect) {
            assert!((a - e / s).abs() < 1e-9);
        }

        // hand-built uniform attention over a 2x2 grid
        let uniform = TokenSet {
            cls: Tensor::zeros(&[8]),
            patches: Tensor::zeros(&[4, 8]),
            attn: vec![vec![Tensor::full(&[5, 5], 0.2); 2]],
        };
        let wu = cls_attention_weights(&uniform);
        for &v in wu.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_params_detected_with_layer() {
        let cfg = micro_cfg();
        let mut rng = StdRng::seed_from_u64(17);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        let poisoned = params
            .try_map(&mut |name, t| {
                if name == "blocks.1.fc2.b" {
                    let mut d = t.data().to_vec();
                    d[0] = f64::INFINITY;
                    t.with_data(d)
                } else {
                    Ok(t.clone())
                }
            })
            .unwrap();
        let toks = poisoned.patchify(&cfg, &random_image(&cfg, 18)).unwrap();
        match poisoned.forward(&cfg, &toks) {
            Err(VitError::NonFinite { layer }) => assert_eq!(layer, 1),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn local_crop_pos_interpolation_runs() {
        let cfg = micro_cfg(); // grid 2x2
        let mut rng = StdRng::seed_from_u64(19);
        let params = VitParams::<f64>::init(&cfg, &mut rng);
        // a 1x1-grid local view: single patch token
        let local = Tensor::leaf(&[1, 8], vec![0.1; 8]).unwrap();
        let ts = params.forward(&cfg, &local).unwrap();
        assert_eq!(ts.patches.shape(), &[1, 8]);
        // bilinear rows are convex combinations, so they sum to one
        let m = bilinear_matrix::<f64>(4, 2);
        for row in m.data().chunks(16) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_gradients_all_params_micro_config() {
        let cfg = micro_cfg();
        for seed in 0..2u64 {
            let mut rng = StdRng::seed_from_u64(100 + seed);
            let params = VitParams::<f64>::init(&cfg, &mut rng);
            let image = random_image(&cfg, 200 + seed);

            // fixed random linear functional of the forward output
            let mut rng_probe = StdRng::seed_from_u64(300 + seed);
            let probe_cls = Tensor::leaf(
                &[cfg.embed_dim],
                (0..cfg.embed_dim).map(|_| rng_probe.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let probe_patches = Tensor::leaf(
                &[cfg.num_patches(), cfg.embed_dim],
                (0..cfg.num_patches() * cfg.embed_dim)
                    .map(|_| rng_probe.gen_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();

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
                let cfg2 = cfg.clone();
                let img = image.clone();
                let tname = target.clone();
                let pc = probe_cls.clone();
                let pp = probe_patches.clone();
                let f = move |x: &Tensor<f64>| {
                    let subst = p.try_map(&mut |name, t| {
                        if name == tname {
                            Ok(x.clone())
                        } else {
                            Ok(t.clone())
                        }
                    })?;
                    let toks =
                        subst
                            .patchify(&cfg2, &img)
                            .map_err(|_| TensorError::NonFinite {
                                context: "patchify".into(),
                            })?;
                    let ts = subst
                        .forward(&cfg2, &toks)
                        .map_err(|_| TensorError::NonFinite {
                            context: "forward".into(),
                        })?;
                    ts.cls.mul(&pc)?.sum_all().add(&ts.patches.mul(&pp)?.sum_all())
                };
                let err = finite_diff_check(f, &original, 1e-5).unwrap();
                assert!(err < 1e-5, "param {target} seed {seed}: rel err {err}");
            }
        }
    }
}
