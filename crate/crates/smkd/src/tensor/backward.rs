//! Reverse-mode gradient accumulation over the tensor graph.

use std::collections::{HashMap, HashSet};

use super::{kernel, NodeId, Op, Scalar, Tensor, TensorError, TensorResult};

/// Gradients keyed by parameter identity. Only parameter leaves reachable
/// from the loss appear; everything else is absent.
#[derive(Debug)]
pub struct GradMap<T: Scalar> {
    grads: HashMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, param: &Tensor<T>) -> Option<&Tensor<T>> {
        self.grads.get(&param.id())
    }

    pub fn contains(&self, param: &Tensor<T>) -> bool {
        self.grads.contains_key(&param.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Accumulate gradients of a scalar `loss` with respect to every reachable
/// parameter leaf. Stateless: calling twice re-derives identical values.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> TensorResult<GradMap<T>> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss { len: loss.len() });
    }

    let order = topo_order(loss);

    let mut grads: HashMap<NodeId, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::ONE]);
    let mut out = HashMap::new();

    for node in order.iter().rev() {
        let g = match grads.remove(&node.id()) {
            Some(g) => g,
            None => continue, // only reachable through a stop-gradient
        };
        match node.op() {
            Op::Leaf => {
                if node.is_param() {
                    let t = Tensor::leaf(node.shape(), g).expect("gradient shape");
                    out.insert(node.id(), t);
                }
            }
            op => propagate(node, op, &g, &mut grads),
        }
    }

    Ok(GradMap { grads: out })
}

fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    enum Visit<T: Scalar> {
        Enter(Tensor<T>),
        Exit(Tensor<T>),
    }
    let mut seen: HashSet<NodeId> = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![Visit::Enter(root.clone())];
    while let Some(v) = stack.pop() {
        match v {
            Visit::Enter(t) => {
                if !seen.insert(t.id()) {
                    continue;
                }
                let parents = parent_list(&t);
                stack.push(Visit::Exit(t));
                for p in parents {
                    stack.push(Visit::Enter(p));
                }
            }
            Visit::Exit(t) => order.push(t),
        }
    }
    order
}

/// Differentiable inputs of a node. A stop-gradient node reports none, so the
/// traversal never descends into the detached branch.
fn parent_list<T: Scalar>(t: &Tensor<T>) -> Vec<Tensor<T>> {
    match t.op() {
        Op::Leaf | Op::StopGrad => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
        Op::Scale(a, _) => vec![a.clone()],
        Op::AddBias(x, b) => vec![x.clone(), b.clone()],
        Op::Matmul(a, b) | Op::MatmulNT(a, b) => vec![a.clone(), b.clone()],
        Op::MatmulBatchNT { a, b, .. } | Op::MatmulBatchNN { a, b, .. } => {
            vec![a.clone(), b.clone()]
        }
        Op::Transpose(a) => vec![a.clone()],
        Op::Softmax { x, .. } => vec![x.clone()],
        Op::LayerNorm { x, gain, bias, .. } => vec![x.clone(), gain.clone(), bias.clone()],
        Op::Gelu(a) | Op::Log(a) | Op::ClampMin(a, _) => vec![a.clone()],
        Op::L2NormRows { x, .. } => vec![x.clone()],
        Op::SumAxis1(a) | Op::MeanAxis0(a) | Op::SumAll(a) | Op::MeanAll(a) => vec![a.clone()],
        Op::SelectRows { x, .. } | Op::SelectBlock { x, .. } => vec![x.clone()],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::MaskRows { x, fill, .. } => vec![x.clone(), fill.clone()],
        Op::Reshape(a) => vec![a.clone()],
    }
}

fn accumulate<T: Scalar>(grads: &mut HashMap<NodeId, Vec<T>>, target: &Tensor<T>, contrib: Vec<T>) {
    match grads.entry(target.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (acc, v) in e.get_mut().iter_mut().zip(contrib) {
                *acc += v;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contrib);
        }
    }
}

fn propagate<T: Scalar>(
    node: &Tensor<T>,
    op: &Op<T>,
    g: &[T],
    grads: &mut HashMap<NodeId, Vec<T>>,
) {
    match op {
        Op::Leaf | Op::StopGrad => {}
        Op::Add(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, a, g.to_vec());
            accumulate(grads, b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul(a, b) => {
            let da = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
            let db = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
            accumulate(grads, a, da);
            accumulate(grads, b, db);
        }
        Op::Scale(a, c) => {
            accumulate(grads, a, g.iter().map(|&v| v * *c).collect());
        }
        Op::AddBias(x, b) => {
            let c = b.len();
            let mut db = vec![T::ZERO; c];
            for row in g.chunks(c) {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            accumulate(grads, x, g.to_vec());
            accumulate(grads, b, db);
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut da = vec![T::ZERO; m * k];
            kernel::matmul_nt(g, b.data(), m, n, k, &mut da);
            let mut db = vec![T::ZERO; k * n];
            kernel::matmul_tn(a.data(), g, m, k, n, &mut db);
            accumulate(grads, a, da);
            accumulate(grads, b, db);
        }
        Op::MatmulNT(a, b) => {
            // y = a @ b^T, a: [m,k], b: [n,k], g: [m,n]
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[0];
            let mut da = vec![T::ZERO; m * k];
            kernel::matmul_nn(g, b.data(), m, n, k, &mut da);
            let mut db = vec![T::ZERO; n * k];
            kernel::matmul_tn(g, a.data(), m, n, k, &mut db);
            accumulate(grads, a, da);
            accumulate(grads, b, db);
        }
        Op::MatmulBatchNT { a, b, views } => {
            // per block: y_v = a_v @ b_v^T with a_v [m,k], b_v [n,k], g_v [m,n]
            let v = *views;
            let (m, k) = (a.shape()[0] / v, a.shape()[1]);
            let n = b.shape()[0] / v;
            let mut da = vec![T::ZERO; a.len()];
            let mut db = vec![T::ZERO; b.len()];
            for i in 0..v {
                let gv = &g[i * m * n..(i + 1) * m * n];
                kernel::matmul_nn(
                    gv,
                    &b.data()[i * n * k..(i + 1) * n * k],
                    m,
                    n,
                    k,
                    &mut da[i * m * k..(i + 1) * m * k],
                );
                kernel::matmul_tn(
                    gv,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    m,
                    n,
                    k,
                    &mut db[i * n * k..(i + 1) * n * k],
                );
            }
            accumulate(grads, a, da);
            accumulate(grads, b, db);
        }
        Op::MatmulBatchNN { a, b, views } => {
            // per block: y_v = a_v @ b_v with a_v [m,k], b_v [k,n], g_v [m,n]
            let v = *views;
            let (m, k) = (a.shape()[0] / v, a.shape()[1]);
            let n = b.shape()[1];
            let mut da = vec![T::ZERO; a.len()];
            let mut db = vec![T::ZERO; b.len()];
            for i in 0..v {
                let gv = &g[i * m * n..(i + 1) * m * n];
                kernel::matmul_nt(
                    gv,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    m,
                    n,
                    k,
                    &mut da[i * m * k..(i + 1) * m * k],
                );
                kernel::matmul_tn(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    gv,
                    m,
                    k,
                    n,
                    &mut db[i * k * n..(i + 1) * k * n],
                );
            }
            accumulate(grads, a, da);
            accumulate(grads, b, db);
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![T::ZERO; r * c];
            for j in 0..c {
                for i in 0..r {
                    da[i * c + j] = g[j * r + i];
                }
            }
            accumulate(grads, a, da);
        }
        Op::Softmax { x, axis, temp } => {
            let shape = node.shape();
            let lane = shape[*axis];
            let inner: usize = shape[*axis + 1..].iter().product();
            let outer: usize = shape[..*axis].iter().product();
            let y = node.data();
            let inv_t = T::ONE / *temp;
            let mut dx = vec![T::ZERO; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * lane * inner + i;
                    let mut dot = T::ZERO;
                    for l in 0..lane {
                        let ix = base + l * inner;
                        dot += g[ix] * y[ix];
                    }
                    for l in 0..lane {
                        let ix = base + l * inner;
                        dx[ix] = inv_t * y[ix] * (g[ix] - dot);
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let c = gain.len();
            let src = x.data();
            let gv = gain.data();
            let inv_c = T::ONE / T::from_usize(c);
            let mut dx = vec![T::ZERO; src.len()];
            let mut dgain = vec![T::ZERO; c];
            let mut dbias = vec![T::ZERO; c];
            let mut xhat = vec![T::ZERO; c];
            let mut dxh = vec![T::ZERO; c];
            for (r, row) in src.chunks(c).enumerate() {
                let grow = &g[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let inv_std = T::ONE / (var + *eps).sqrt();
                for j in 0..c {
                    xhat[j] = (row[j] - mean) * inv_std;
                    dxh[j] = grow[j] * gv[j];
                    dgain[j] += grow[j] * xhat[j];
                    dbias[j] += grow[j];
                }
                let mean_dxh = dxh.iter().copied().sum::<T>() * inv_c;
                let mean_dxh_xhat = dxh
                    .iter()
                    .zip(&xhat)
                    .map(|(&a, &b)| a * b)
                    .sum::<T>()
                    * inv_c;
                for j in 0..c {
                    dx[r * c + j] = inv_std * (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xhat);
                }
            }
            accumulate(grads, x, dx);
            accumulate(grads, gain, dgain);
            accumulate(grads, bias, dbias);
        }
        Op::Gelu(a) => {
            let da = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &xv)| gv * kernel::gelu_grad(xv))
                .collect();
            accumulate(grads, a, da);
        }
        Op::Log(a) => {
            let da = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &xv)| gv / xv)
                .collect();
            accumulate(grads, a, da);
        }
        Op::ClampMin(a, min) => {
            let da = g
                .iter()
                .zip(a.data())
                .map(|(&gv, &xv)| if xv > *min { gv } else { T::ZERO })
                .collect();
            accumulate(grads, a, da);
        }
        Op::L2NormRows { x, eps } => {
            let c = *x.shape().last().unwrap_or(&1);
            let src = x.data();
            let y = node.data();
            let mut dx = vec![T::ZERO; src.len()];
            for (r, row) in src.chunks(c).enumerate() {
                let yrow = &y[r * c..(r + 1) * c];
                let grow = &g[r * c..(r + 1) * c];
                let sq = row.iter().map(|&v| v * v).sum::<T>();
                let inv = T::ONE / (sq + *eps * *eps).sqrt();
                let dot = grow
                    .iter()
                    .zip(yrow)
                    .map(|(&a, &b)| a * b)
                    .sum::<T>();
                for j in 0..c {
                    dx[r * c + j] = (grow[j] - yrow[j] * dot) * inv;
                }
            }
            accumulate(grads, x, dx);
        }
        Op::SumAxis1(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut da = vec![T::ZERO; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[i];
                }
            }
            accumulate(grads, a, da);
        }
        Op::MeanAxis0(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let inv_r = T::ONE / T::from_usize(r);
            let mut da = vec![T::ZERO; r * c];
            for i in 0..r {
                for j in 0..c {
                    da[i * c + j] = g[j] * inv_r;
                }
            }
            accumulate(grads, a, da);
        }
        Op::SumAll(a) => {
            accumulate(grads, a, vec![g[0]; a.len()]);
        }
        Op::MeanAll(a) => {
            let v = g[0] / T::from_usize(a.len().max(1));
            accumulate(grads, a, vec![v; a.len()]);
        }
        Op::SelectRows { x, idx } => {
            let c = x.shape()[1];
            let mut dx = vec![T::ZERO; x.len()];
            for (out_i, &src_i) in idx.iter().enumerate() {
                for j in 0..c {
                    dx[src_i * c + j] += g[out_i * c + j];
                }
            }
            accumulate(grads, x, dx);
        }
        Op::SelectBlock { x, r0, nr, c0, nc } => {
            let c = x.shape()[1];
            let mut dx = vec![T::ZERO; x.len()];
            for i in 0..*nr {
                for j in 0..*nc {
                    dx[(r0 + i) * c + c0 + j] = g[i * nc + j];
                }
            }
            accumulate(grads, x, dx);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.len();
                accumulate(grads, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let r = node.shape()[0];
            let total_c = node.shape()[1];
            let mut c_off = 0;
            for p in parts {
                let pc = p.shape()[1];
                let mut dp = vec![T::ZERO; r * pc];
                for i in 0..r {
                    dp[i * pc..(i + 1) * pc]
                        .copy_from_slice(&g[i * total_c + c_off..i * total_c + c_off + pc]);
                }
                accumulate(grads, p, dp);
                c_off += pc;
            }
        }
        Op::MaskRows { x, fill, mask } => {
            let c = fill.len();
            let mut dx = vec![T::ZERO; x.len()];
            let mut dfill = vec![T::ZERO; c];
            for (i, &m) in mask.iter().enumerate() {
                let grow = &g[i * c..(i + 1) * c];
                if m {
                    for (acc, &v) in dfill.iter_mut().zip(grow) {
                        *acc += v;
                    }
                } else {
                    dx[i * c..(i + 1) * c].copy_from_slice(grow);
                }
            }
            accumulate(grads, x, dx);
            accumulate(grads, fill, dfill);
        }
        Op::Reshape(a) => {
            accumulate(grads, a, g.to_vec());
        }
    }
}
