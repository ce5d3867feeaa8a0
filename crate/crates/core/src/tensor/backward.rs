use std::collections::{HashMap, HashSet};

use super::batched;
use super::gemm::{gemm, View};
use super::{Inner, Op, Tensor};
use crate::error::{Error, Result};

impl Tensor {
    /// Accumulates `d self / d leaf` into every reachable gradient-tracking
    /// leaf. `self` must hold exactly one element.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut grads: HashMap<*const Inner, Vec<f64>> = HashMap::with_capacity(order.len());
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                t.accumulate_grad(&g);
                continue;
            };
            let upstream = node.op.backward(t, &node.parents, &g);
            for (parent, pg) in node.parents.iter().zip(upstream) {
                let Some(pg) = pg else { continue };
                match grads.get_mut(&parent.key()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(parent.key(), pg);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order over the gradient-tracking subgraph rooted at `root`
/// (parents before children).
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.key()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = &t.0.node {
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

impl Op {
    /// Vector-Jacobian products for each parent; `None` where the parent does
    /// not track gradients.
    fn backward(&self, out: &Tensor, parents: &[Tensor], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let need = |i: usize| parents[i].requires_grad();
        match self {
            &Op::MatMul { m, k, n } => {
                let (a, b) = (parents[0].data(), parents[1].data());
                let da = need(0).then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        View::plain(g, n),
                        View::transposed(b, n),
                        0.0,
                        &mut da,
                    );
                    da
                });
                let db = need(1).then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        View::transposed(a, k),
                        View::plain(g, n),
                        0.0,
                        &mut db,
                    );
                    db
                });
                vec![da, db]
            }
            &Op::Transpose { rows, cols } => {
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                vec![Some(dx)]
            }
            Op::Add => vec![need(0).then(|| g.to_vec()), need(1).then(|| g.to_vec())],
            Op::Mul => {
                let (a, b) = (parents[0].data(), parents[1].data());
                vec![
                    need(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    need(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            &Op::Scale(f) => vec![Some(g.iter().map(|g| g * f).collect())],
            &Op::AddRow { cols } => {
                let drow = need(1).then(|| {
                    let mut d = vec![0.0; cols];
                    if cols > 0 {
                        for chunk in g.chunks_exact(cols) {
                            d.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                        }
                    }
                    d
                });
                vec![need(0).then(|| g.to_vec()), drow]
            }
            &Op::Activation(kind) => {
                let x = parents[0].data();
                let y = out.data();
                let dx = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                vec![Some(dx)]
            }
            &Op::SoftmaxRows { cols } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                if cols > 0 {
                    for ((dx, y), g) in dx
                        .chunks_exact_mut(cols)
                        .zip(y.chunks_exact(cols))
                        .zip(g.chunks_exact(cols))
                    {
                        let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                        for c in 0..cols {
                            dx[c] = y[c] * (g[c] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm {
                cols,
                xhat,
                inv_std,
            } => layer_norm_backward(*cols, xhat, inv_std, parents, g),
            &Op::ConcatRows { split } => vec![
                need(0).then(|| g[..split].to_vec()),
                need(1).then(|| g[split..].to_vec()),
            ],
            &Op::SliceRows { offset } => {
                let mut dx = vec![0.0; parents[0].numel()];
                dx[offset..offset + g.len()].copy_from_slice(g);
                vec![Some(dx)]
            }
            &Op::SliceCols { start, cols } => {
                let rows = parents[0].rows();
                let width = if rows == 0 { 0 } else { g.len() / rows };
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + width]
                        .copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                vec![Some(dx)]
            }
            Op::ConcatCols { widths } => {
                let total: usize = widths.iter().sum();
                let rows = out.rows();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    grads.push(need(i).then(|| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                grads
            }
            Op::GatherRows { ids, cols } => {
                let mut dx = vec![0.0; parents[0].numel()];
                for (i, &id) in ids.iter().enumerate() {
                    dx[id * cols..(id + 1) * cols]
                        .iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                        .for_each(|(d, g)| *d += g);
                }
                vec![Some(dx)]
            }
            Op::Sum => vec![Some(vec![g[0]; parents[0].numel()])],
            Op::Mean => {
                let n = parents[0].numel();
                vec![Some(vec![g[0] / n.max(1) as f64; n])]
            }
            &Op::MeanRows { rows, cols } => {
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend(g.iter().map(|g| g / rows as f64));
                }
                vec![Some(dx)]
            }
            &Op::SumCols { cols } => {
                let dx = g
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g, cols))
                    .collect();
                vec![Some(dx)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            &Op::TileRows { times } => {
                let n = parents[0].numel();
                let mut dx = vec![0.0; n];
                if n > 0 {
                    for chunk in g.chunks_exact(n).take(times) {
                        dx.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
                vec![Some(dx)]
            }
            &Op::InterleaveRows {
                batch,
                first,
                second,
            } => {
                let mut da = Vec::with_capacity(batch * first);
                let mut db = Vec::with_capacity(batch * second);
                for b in 0..batch {
                    let at = b * (first + second);
                    da.extend_from_slice(&g[at..at + first]);
                    db.extend_from_slice(&g[at + first..at + first + second]);
                }
                vec![need(0).then_some(da), need(1).then_some(db)]
            }
            Op::BlockLeftMul {
                batch,
                s,
                l,
                weights,
            } => {
                let d = out.shape()[1];
                vec![Some(batched::block_left_mul_backward(
                    g, *batch, *s, *l, weights, d,
                ))]
            }
            Op::BlockAttention {
                batch,
                heads,
                lq,
                lk,
                scale,
                probs,
            } => batched::attention_backward(parents, g, *batch, *heads, *lq, *lk, *scale, probs),
            Op::AsymmetricLoss {
                targets,
                gamma_pos,
                gamma_neg,
                clamp,
            } => {
                let p = parents[0].data();
                let scale = g[0] / p.len() as f64;
                let dx = p
                    .iter()
                    .zip(targets)
                    .map(|(&p, &y)| {
                        if p < *clamp || p > 1.0 - clamp {
                            return 0.0;
                        }
                        let d = if y > 0.5 {
                            let q = 1.0 - p;
                            gamma_pos * q.powf(gamma_pos - 1.0) * p.ln() - q.powf(*gamma_pos) / p
                        } else {
                            let q = 1.0 - p;
                            -gamma_neg * p.powf(gamma_neg - 1.0) * q.ln() + p.powf(*gamma_neg) / q
                        };
                        scale * d
                    })
                    .collect();
                vec![Some(dx)]
            }
            Op::Custom { derivative, .. } => {
                let x = parents[0].data();
                vec![Some(
                    g.iter().zip(x).map(|(g, &x)| g * derivative(x)).collect(),
                )]
            }
        }
    }
}

fn layer_norm_backward(
    cols: usize,
    xhat: &[f64],
    inv_std: &[f64],
    parents: &[Tensor],
    g: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let gain = parents[1].data();
    let rows = inv_std.len();
    let n = cols as f64;
    let mut dx = vec![0.0; rows * cols];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let gr = &g[r * cols..(r + 1) * cols];
        let hr = &xhat[r * cols..(r + 1) * cols];
        let mut sum_d = 0.0;
        let mut sum_dh = 0.0;
        for c in 0..cols {
            dgain[c] += gr[c] * hr[c];
            dbias[c] += gr[c];
            dxhat[c] = gr[c] * gain[c];
            sum_d += dxhat[c];
            sum_dh += dxhat[c] * hr[c];
        }
        let k = inv_std[r] / n;
        for c in 0..cols {
            dx[r * cols + c] = k * (n * dxhat[c] - sum_d - hr[c] * sum_dh);
        }
    }
    vec![
        parents[0].requires_grad().then_some(dx),
        parents[1].requires_grad().then_some(dgain),
        parents[2].requires_grad().then_some(dbias),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_broadcast_input() {
        // loss = sum(W x) with x fixed: dL/dW[i][j] = x[j]
        let w = Tensor::leaf(vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.7], &[2, 3]).unwrap();
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        w.matmul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(x.grad().is_none());
    }

    #[test]
    fn detached_parameter_keeps_no_gradient() {
        let used = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
        let unused = Tensor::leaf(vec![5.0], &[1]).unwrap();
        used.sum().backward().unwrap();
        assert!(unused.grad().is_none());
        assert_eq!(used.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn second_backward_doubles_gradients() {
        let w = Tensor::leaf(vec![1.5, -2.0], &[2]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        let once = w.grad().unwrap();
        loss.backward().unwrap();
        let twice = w.grad().unwrap();
        assert_eq!(once, vec![3.0, -4.0]);
        assert_eq!(twice, vec![6.0, -8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::leaf(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(w.scale(2.0).backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = (a + a) * a  ->  dy/da = 4a
        let a = Tensor::leaf(vec![3.0], &[1]).unwrap();
        let y = a.add(&a).unwrap().mul(&a).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![12.0]);
    }
}
