//! Ops over a minibatch stored as equal-sized row blocks: sample `b` owns
//! rows `b * block .. (b + 1) * block` of every batched matrix.

use super::gemm::{gemm_into, View};
use super::{Op, Tensor};
use crate::error::{Error, Result};

fn block_rows(op: &'static str, t: &Tensor, batch: usize) -> Result<(usize, usize)> {
    let (rows, cols) = t.dims2(op)?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::invalid_shape(
            op,
            t.shape(),
            format!("rows do not split into {batch} equal blocks"),
        ));
    }
    Ok((rows / batch, cols))
}

/// `buf[at..]`, empty when `at` is past the end (zero-row blocks).
fn tail(buf: &mut [f64], at: usize) -> &mut [f64] {
    let at = at.min(buf.len());
    &mut buf[at..]
}

impl Tensor {
    /// `times` copies of `self` stacked vertically.
    pub fn tile_rows(&self, times: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("tile_rows")?;
        if times == 1 {
            return Ok(self.clone());
        }
        let out = self.data().repeat(times);
        Ok(Tensor::from_op(
            out,
            vec![rows * times, cols],
            Op::TileRows { times },
            vec![self.clone()],
        ))
    }

    /// Per block, the block of `self` followed by the block of `below`.
    /// With `batch = 1` this is [`Tensor::concat_rows`].
    pub fn interleave_rows(&self, below: &Tensor, batch: usize) -> Result<Tensor> {
        let (n, d) = block_rows("interleave_rows", self, batch)?;
        let (m, d2) = block_rows("interleave_rows", below, batch)?;
        if d != d2 {
            return Err(Error::shape("interleave_rows", self.shape(), below.shape()));
        }
        let (a, b) = (self.data(), below.data());
        let mut out = Vec::with_capacity(batch * (n + m) * d);
        for i in 0..batch {
            out.extend_from_slice(&a[i * n * d..(i + 1) * n * d]);
            out.extend_from_slice(&b[i * m * d..(i + 1) * m * d]);
        }
        Ok(Tensor::from_op(
            out,
            vec![batch * (n + m), d],
            Op::InterleaveRows {
                batch,
                first: n * d,
                second: m * d,
            },
            vec![self.clone(), below.clone()],
        ))
    }

    /// Applies the constant `[s, l]` matrix `weights` to every `l`-row block,
    /// giving `s` rows per block.
    pub fn block_left_mul(&self, weights: &[f64], s: usize, batch: usize) -> Result<Tensor> {
        let (l, d) = block_rows("block_left_mul", self, batch)?;
        if weights.len() != s * l {
            return Err(Error::shape("block_left_mul", &[weights.len()], &[s, l]));
        }
        let mut out = vec![0.0; batch * s * d];
        for b in 0..batch {
            gemm_into(
                s,
                l,
                d,
                View::plain(weights, l),
                View::window(self.data(), b * l * d, d),
                0.0,
                tail(&mut out, b * s * d),
                d,
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![batch * s, d],
            Op::BlockLeftMul {
                batch,
                s,
                l,
                weights: weights.to_vec(),
            },
            vec![self.clone()],
        ))
    }

    /// Block-diagonal multi-head scaled dot-product attention on already
    /// projected `q`, `k`, `v`: for every block and head,
    /// `softmax(Q K^T * scale) V`, heads written side by side.
    pub fn block_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        heads: usize,
        batch: usize,
        scale: f64,
    ) -> Result<Tensor> {
        const OP: &str = "attention";
        let (lq, d) = block_rows(OP, q, batch)?;
        let (lk, dk_full) = block_rows(OP, k, batch)?;
        if k.shape() != v.shape() {
            return Err(Error::shape(OP, k.shape(), v.shape()));
        }
        if dk_full != d {
            return Err(Error::shape(OP, q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible into {heads} heads"
            )));
        }
        if q.data().iter().chain(k.data()).any(|x| x.is_nan()) {
            return Err(Error::NonFinite { op: OP });
        }
        let dh = d / heads;
        let mut probs = vec![0.0; batch * heads * lq * lk];
        let mut out = vec![0.0; batch * lq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * lq * lk..][..lq * lk];
                let q_at = b * lq * d + h * dh;
                let kv_at = b * lk * d + h * dh;
                gemm_into(
                    lq,
                    dh,
                    lk,
                    View::window(q.data(), q_at, d),
                    View::window_t(k.data(), kv_at, d),
                    0.0,
                    p,
                    lk,
                );
                if lk > 0 {
                    for row in p.chunks_exact_mut(lk) {
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x * scale));
                        let mut total = 0.0;
                        for x in row.iter_mut() {
                            *x = (*x * scale - max).exp();
                            total += *x;
                        }
                        row.iter_mut().for_each(|x| *x /= total);
                    }
                }
                gemm_into(
                    lq,
                    lk,
                    dh,
                    View::plain(p, lk),
                    View::window(v.data(), kv_at, d),
                    0.0,
                    tail(&mut out, q_at),
                    d,
                );
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![batch * lq, d],
            Op::BlockAttention {
                batch,
                heads,
                lq,
                lk,
                scale,
                probs,
            },
            vec![q.clone(), k.clone(), v.clone()],
        ))
    }
}

/// VJPs of [`Tensor::block_attention`] for `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(super) fn attention_backward(
    parents: &[Tensor],
    g: &[f64],
    batch: usize,
    heads: usize,
    lq: usize,
    lk: usize,
    scale: f64,
    probs: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (q, k, v) = (parents[0].data(), parents[1].data(), parents[2].data());
    let d = parents[0].shape()[1];
    let dh = d / heads;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; lq * lk];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * lq * lk..][..lq * lk];
            let q_at = b * lq * d + h * dh;
            let kv_at = b * lk * d + h * dh;
            // dV = P^T G
            gemm_into(
                lk,
                lq,
                dh,
                View::transposed(p, lk),
                View::window(g, q_at, d),
                0.0,
                tail(&mut dv, kv_at),
                d,
            );
            // dP = G V^T, then through the softmax and the scale
            gemm_into(
                lq,
                dh,
                lk,
                View::window(g, q_at, d),
                View::window_t(v, kv_at, d),
                0.0,
                &mut ds,
                lk,
            );
            if lk > 0 {
                for (ds, p) in ds.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                    let dot: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
                    for (x, &pj) in ds.iter_mut().zip(p) {
                        *x = pj * (*x - dot) * scale;
                    }
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm_into(
                lq,
                lk,
                dh,
                View::plain(&ds, lk),
                View::window(k, kv_at, d),
                0.0,
                tail(&mut dq, q_at),
                d,
            );
            gemm_into(
                lk,
                lq,
                dh,
                View::transposed(&ds, lk),
                View::window(q, q_at, d),
                0.0,
                tail(&mut dk, kv_at),
                d,
            );
        }
    }
    vec![
        parents[0].requires_grad().then_some(dq),
        parents[1].requires_grad().then_some(dk),
        parents[2].requires_grad().then_some(dv),
    ]
}

pub(super) fn block_left_mul_backward(
    g: &[f64],
    batch: usize,
    s: usize,
    l: usize,
    weights: &[f64],
    d: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * l * d];
    for b in 0..batch {
        gemm_into(
            l,
            s,
            d,
            View::transposed(weights, l),
            View::window(g, b * s * d, d),
            0.0,
            tail(&mut dx, b * l * d),
            d,
        );
    }
    dx
}
