//! Episodic N-way K-shot evaluation: episode sampling, feature extraction
//! with configurable token pooling, prototype and linear-classifier methods.

use std::fmt;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use crate::data::{Image, LabeledDataset, Split};
use crate::tensor::Scalar;
use crate::trainer::ModelParams;
use crate::util::derive_seed;
use crate::vit::{cls_attention_weights, AttnMode, TokenSet, VitConfig, VitError};

#[derive(Debug)]
pub enum FewshotError {
    InsufficientData {
        needed_classes: usize,
        have_classes: usize,
        needed_per_class: usize,
    },
    UnknownMode(String),
    UnknownMethod(String),
    Model(VitError),
}

impl fmt::Display for FewshotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FewshotError::InsufficientData {
                needed_classes,
                have_classes,
                needed_per_class,
            } => write!(
                f,
                "episode needs {needed_classes} classes with {needed_per_class} images each, \
                 dataset offers {have_classes}"
            ),
            FewshotError::UnknownMode(s) => write!(f, "unknown feature mode {s:?}"),
            FewshotError::UnknownMethod(s) => write!(f, "unknown evaluation method {s:?}"),
            FewshotError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for FewshotError {}

impl From<VitError> for FewshotError {
    fn from(e: VitError) -> Self {
        FewshotError::Model(e)
    }
}

/// Support and query sets of one episode, as dataset indices with labels.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support: Vec<(usize, u16)>,
    pub query: Vec<(usize, u16)>,
}

/// Which tokens feed the evaluation feature: any non-empty combination of the
/// `[cls]` token, plain average pooling, and attention-weighted pooling.
/// Components are individually l2-normalized, then concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMode {
    pub cls: bool,
    pub avg_pool: bool,
    pub weighted_avg_pool: bool,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self, FewshotError> {
        let mut mode = FeatureMode {
            cls: false,
            avg_pool: false,
            weighted_avg_pool: false,
        };
        for token in s.split('+') {
            match token.trim() {
                "cls" => mode.cls = true,
                "avg" | "avg_pool" => mode.avg_pool = true,
                "weighted" | "wavg" | "weighted_avg_pool" => mode.weighted_avg_pool = true,
                other => return Err(FewshotError::UnknownMode(other.into())),
            }
        }
        if !(mode.cls || mode.avg_pool || mode.weighted_avg_pool) {
            return Err(FewshotError::UnknownMode(s.into()));
        }
        Ok(mode)
    }

    pub fn components(&self) -> usize {
        self.cls as usize + self.avg_pool as usize + self.weighted_avg_pool as usize
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.cls {
            parts.push("cls");
        }
        if self.avg_pool {
            parts.push("avg_pool");
        }
        if self.weighted_avg_pool {
            parts.push("weighted_avg_pool");
        }
        write!(f, "{}", parts.join("+"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Prototype,
    Classifier,
}

impl Method {
    pub fn parse(s: &str) -> Result<Self, FewshotError> {
        match s {
            "prototype" => Ok(Method::Prototype),
            "classifier" => Ok(Method::Classifier),
            other => Err(FewshotError::UnknownMethod(other.into())),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Prototype => write!(f, "prototype"),
            Method::Classifier => write!(f, "classifier"),
        }
    }
}

/// Uniform class and image sampling without replacement from the novel split.
pub fn sample_episode(
    dataset: &LabeledDataset,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    rng: &mut StdRng,
) -> Result<Episode, FewshotError> {
    let pool: Vec<(u16, Vec<usize>)> = dataset
        .by_class(Split::Novel)
        .into_iter()
        .filter(|(_, idx)| idx.len() >= k_shot + queries)
        .collect();
    if pool.len() < n_way {
        return Err(FewshotError::InsufficientData {
            needed_classes: n_way,
            have_classes: pool.len(),
            needed_per_class: k_shot + queries,
        });
    }

    // choose n_way distinct classes
    let mut class_order: Vec<usize> = (0..pool.len()).collect();
    for i in 0..n_way {
        let j = rng.gen_range(i..class_order.len());
        class_order.swap(i, j);
    }

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * queries);
    for &ci in &class_order[..n_way] {
        let (class, indices) = &pool[ci];
        let mut order: Vec<usize> = (0..indices.len()).collect();
        for i in 0..k_shot + queries {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        for &o in &order[..k_shot] {
            support.push((indices[o], *class));
        }
        for &o in &order[k_shot..k_shot + queries] {
            query.push((indices[o], *class));
        }
    }
    Ok(Episode { support, query })
}

/// Pool the patch tokens of a frozen forward pass according to the mode.
/// Exposed separately so the pooling arithmetic is testable on synthetic
/// token sets.
pub fn pool_features<T: Scalar>(ts: &TokenSet<T>, mode: FeatureMode) -> Vec<f32> {
    let d = ts.cls.len();
    let n = ts.patches.shape()[0];
    let mut out = Vec::with_capacity(mode.components() * d);
    let mut push_normalized = |v: Vec<f64>| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        out.extend(v.into_iter().map(|x| (x / norm) as f32));
    };
    if mode.cls {
        push_normalized(ts.cls.data_f64());
    }
    if mode.avg_pool {
        let p = ts.patches.data();
        let mut avg = vec![0.0f64; d];
        for row in p.chunks(d) {
            for (a, &v) in avg.iter_mut().zip(row) {
                *a += v.to_f64();
            }
        }
        for a in &mut avg {
            *a /= n as f64;
        }
        push_normalized(avg);
    }
    if mode.weighted_avg_pool {
        let w = cls_attention_weights(ts);
        let p = ts.patches.data();
        let mut pooled = vec![0.0f64; d];
        for (row, &wi) in p.chunks(d).zip(w.data()) {
            for (a, &v) in pooled.iter_mut().zip(row) {
                *a += wi.to_f64() * v.to_f64();
            }
        }
        push_normalized(pooled);
    }
    out
}

/// Frozen-model feature for one image.
pub fn extract_feature(
    model: &ModelParams<f32>,
    vit_cfg: &VitConfig,
    image: &Image,
    mode: FeatureMode,
) -> Result<Vec<f32>, FewshotError> {
    let tokens = model.vit.patchify(vit_cfg, &image.to_tensor())?;
    let ts = model
        .vit
        .forward_batch_attn(vit_cfg, std::slice::from_ref(&tokens), AttnMode::LastLayer)?
        .pop()
        .expect("one view");
    Ok(pool_features(&ts, mode))
}

/// Features for many images, computed in parallel against the frozen model.
pub fn extract_features(
    model: &ModelParams<f32>,
    vit_cfg: &VitConfig,
    dataset: &LabeledDataset,
    indices: &[usize],
    mode: FeatureMode,
) -> Result<Vec<Vec<f32>>, FewshotError> {
    indices
        .par_iter()
        .map(|&i| extract_feature(model, vit_cfg, &dataset.image(i), mode))
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

fn sorted_classes(labels: &[u16]) -> Vec<u16> {
    let mut classes: Vec<u16> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes
}

/// Class prototypes are support means; queries go to the prototype with the
/// highest cosine similarity. Ties break to the lowest class index.
pub fn prototype_classify(
    support_feats: &[Vec<f32>],
    support_labels: &[u16],
    query_feats: &[Vec<f32>],
) -> Vec<u16> {
    let classes = sorted_classes(support_labels);
    let dim = support_feats.first().map(|f| f.len()).unwrap_or(0);
    let prototypes: Vec<Vec<f32>> = classes
        .iter()
        .map(|&c| {
            let mut proto = vec![0.0f32; dim];
            let mut count = 0;
            for (f, &l) in support_feats.iter().zip(support_labels) {
                if l == c {
                    for (p, &v) in proto.iter_mut().zip(f) {
                        *p += v;
                    }
                    count += 1;
                }
            }
            for p in &mut proto {
                *p /= count as f32;
            }
            proto
        })
        .collect();

    query_feats
        .iter()
        .map(|q| {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (ci, proto) in prototypes.iter().enumerate() {
                let sim = cosine(q, proto);
                if sim > best_sim {
                    best_sim = sim;
                    best = ci;
                }
            }
            classes[best]
        })
        .collect()
}

const LOGREG_ITERS: usize = 100;
const LOGREG_LR: f64 = 0.01;
const LOGREG_L2: f64 = 1e-3;

/// Multinomial logistic regression on the support set (fixed 100 full-batch
/// gradient steps, lr 0.01, l2 1e-3), then argmax logits on the queries.
/// Prints a warning when the final gradient is still large, but predicts
/// regardless.
pub fn linear_classifier_eval(
    support_feats: &[Vec<f32>],
    support_labels: &[u16],
    query_feats: &[Vec<f32>],
) -> Vec<u16> {
    let classes = sorted_classes(support_labels);
    let c = classes.len();
    let dim = support_feats.first().map(|f| f.len()).unwrap_or(0);
    let n = support_feats.len();
    let class_index = |l: u16| classes.iter().position(|&x| x == l).unwrap();

    // weights [c, dim] plus bias [c], trained in f64 for stable small-step GD
    let mut w = vec![0.0f64; c * dim];
    let mut b = vec![0.0f64; c];
    let mut grad_norm = 0.0;
    for _ in 0..LOGREG_ITERS {
        let mut gw = vec![0.0f64; c * dim];
        let mut gb = vec![0.0f64; c];
        for (f, &l) in support_feats.iter().zip(support_labels) {
            let mut logits = vec![0.0f64; c];
            for (ci, logit) in logits.iter_mut().enumerate() {
                let row = &w[ci * dim..(ci + 1) * dim];
                *logit = b[ci]
                    + row
                        .iter()
                        .zip(f)
                        .map(|(&wv, &x)| wv * x as f64)
                        .sum::<f64>();
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            let target = class_index(l);
            for ci in 0..c {
                let p = exps[ci] / z;
                let err = p - if ci == target { 1.0 } else { 0.0 };
                gb[ci] += err;
                for (g, &x) in gw[ci * dim..(ci + 1) * dim].iter_mut().zip(f) {
                    *g += err * x as f64;
                }
            }
        }
        grad_norm = 0.0;
        for (wi, gi) in w.iter_mut().zip(&gw) {
            let g = gi / n as f64 + LOGREG_L2 * *wi;
            grad_norm += g * g;
            *wi -= LOGREG_LR * g;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            let g = gi / n as f64;
            grad_norm += g * g;
            *bi -= LOGREG_LR * g;
        }
        grad_norm = grad_norm.sqrt();
    }
    if grad_norm > 1.0 {
        eprintln!("warning: linear classifier not converged (grad norm {grad_norm:.3})");
    }

    query_feats
        .iter()
        .map(|q| {
            let mut best = 0usize;
            let mut best_logit = f64::NEG_INFINITY;
            for ci in 0..c {
                let row = &w[ci * dim..(ci + 1) * dim];
                let logit = b[ci]
                    + row
                        .iter()
                        .zip(q)
                        .map(|(&wv, &x)| wv * x as f64)
                        .sum::<f64>();
                if logit > best_logit {
                    best_logit = logit;
                    best = ci;
                }
            }
            classes[best]
        })
        .collect()
}

/// Mean accuracy and 95% confidence half-width over per-episode accuracies
/// (`1.96 * std / sqrt(n)`, sample standard deviation).
pub fn summarize(per_episode: &[f64]) -> (f64, f64) {
    let n = per_episode.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = per_episode.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = per_episode
        .iter()
        .map(|&a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub method: Method,
    pub mode: FeatureMode,
    pub n_way: usize,
    pub k_shot: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub per_episode: Vec<f64>,
}

/// Evaluate a frozen model over episodes sampled from the novel split.
/// Features are computed once per novel image, then episodes (whose RNG is
/// derived from the seed and episode index) are scored in parallel.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &ModelParams<f32>,
    vit_cfg: &VitConfig,
    dataset: &LabeledDataset,
    n_episodes: usize,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    mode: FeatureMode,
    method: Method,
    seed: u64,
) -> Result<EvalReport, FewshotError> {
    let novel_indices = dataset.indices_of(Split::Novel);
    let feats = extract_features(model, vit_cfg, dataset, &novel_indices, mode)?;
    evaluate_cached(
        dataset, &novel_indices, &feats, n_episodes, n_way, k_shot, queries, mode, method, seed,
    )
}

/// Episode scoring over precomputed per-image features (`feats[i]` belongs to
/// `novel_indices[i]`).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cached(
    dataset: &LabeledDataset,
    novel_indices: &[usize],
    feats: &[Vec<f32>],
    n_episodes: usize,
    n_way: usize,
    k_shot: usize,
    queries: usize,
    mode: FeatureMode,
    method: Method,
    seed: u64,
) -> Result<EvalReport, FewshotError> {
    let mut lookup = vec![usize::MAX; dataset.len()];
    for (slot, &di) in novel_indices.iter().enumerate() {
        lookup[di] = slot;
    }

    let per_episode: Vec<f64> = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let mut rng = StdRng::seed_from_u64(derive_seed(seed, "episode", ep as u64));
            let episode = sample_episode(dataset, n_way, k_shot, queries, &mut rng)?;
            let sup_feats: Vec<Vec<f32>> = episode
                .support
                .iter()
                .map(|&(i, _)| feats[lookup[i]].clone())
                .collect();
            let sup_labels: Vec<u16> = episode.support.iter().map(|&(_, c)| c).collect();
            let q_feats: Vec<Vec<f32>> = episode
                .query
                .iter()
                .map(|&(i, _)| feats[lookup[i]].clone())
                .collect();
            let predictions = match method {
                Method::Prototype => prototype_classify(&sup_feats, &sup_labels, &q_feats),
                Method::Classifier => linear_classifier_eval(&sup_feats, &sup_labels, &q_feats),
            };
            let correct = predictions
                .iter()
                .zip(&episode.query)
                .filter(|(p, (_, c))| *p == c)
                .count();
            Ok(correct as f64 / episode.query.len() as f64)
        })
        .collect::<Result<_, FewshotError>>()?;

    let (mean_acc, ci95) = summarize(&per_episode);
    Ok(EvalReport {
        method,
        mode,
        n_way,
        k_shot,
        mean_acc,
        ci95,
        n_episodes,
        per_episode,
    })
}
