use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, View};
use super::Tensor;
use crate::error::{Error, Result};

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    /// tanh approximation
    Gelu,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) type Derivative = Rc<dyn Fn(f64) -> f64>;

/// Backprop record. Each variant carries whatever its backward rule needs
/// beyond the parents and the output values.
pub(crate) enum Op {
    MatMul {
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        rows: usize,
        cols: usize,
    },
    Add,
    Mul,
    Scale(f64),
    AddRow {
        cols: usize,
    },
    Activation(Activation),
    SoftmaxRows {
        cols: usize,
    },
    LayerNorm {
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows {
        split: usize,
    },
    SliceRows {
        offset: usize,
    },
    SliceCols {
        start: usize,
        cols: usize,
    },
    ConcatCols {
        widths: Vec<usize>,
    },
    GatherRows {
        ids: Vec<usize>,
        cols: usize,
    },
    Sum,
    Mean,
    MeanRows {
        rows: usize,
        cols: usize,
    },
    SumCols {
        cols: usize,
    },
    Reshape,
    TileRows {
        times: usize,
    },
    InterleaveRows {
        batch: usize,
        first: usize,
        second: usize,
    },
    BlockLeftMul {
        batch: usize,
        s: usize,
        l: usize,
        weights: Vec<f64>,
    },
    BlockAttention {
        batch: usize,
        heads: usize,
        lq: usize,
        lk: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    AsymmetricLoss {
        targets: Vec<f64>,
        gamma_pos: f64,
        gamma_neg: f64,
        clamp: f64,
    },
    Custom {
        name: String,
        derivative: Derivative,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub(crate) fn name(&self) -> &str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::Activation(Activation::Sigmoid) => "sigmoid",
            Op::Activation(Activation::Relu) => "relu",
            Op::Activation(Activation::Gelu) => "gelu",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols { .. } => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::MeanRows { .. } => "mean_rows",
            Op::SumCols { .. } => "sum_cols",
            Op::Reshape => "reshape",
            Op::TileRows { .. } => "tile_rows",
            Op::InterleaveRows { .. } => "interleave_rows",
            Op::BlockLeftMul { .. } => "block_left_mul",
            Op::BlockAttention { .. } => "attention",
            Op::AsymmetricLoss { .. } => "asymmetric_loss",
            Op::Custom { name, .. } => name,
        }
    }
}

impl Tensor {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            View::plain(self.data(), k),
            View::plain(rhs.data(), n),
            0.0,
            &mut out,
        );
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::MatMul { m, k, n },
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("transpose")?;
        let src = self.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![cols, rows],
            Op::Transpose { rows, cols },
            vec![self.clone()],
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("add", self.shape(), rhs.shape()));
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Add,
            vec![self.clone(), rhs.clone()],
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape("mul", self.shape(), rhs.shape()));
        }
        let out = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Mul,
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Scale(factor),
            vec![self.clone()],
        )
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        let (_, cols) = self.dims2("add_row")?;
        if row.numel() != cols {
            return Err(Error::shape("add_row", self.shape(), row.shape()));
        }
        let b = row.data();
        let mut out = self.data().to_vec();
        if cols > 0 {
            for chunk in out.chunks_exact_mut(cols) {
                chunk.iter_mut().zip(b).for_each(|(v, b)| *v += b);
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::AddRow { cols },
            vec![self.clone(), row.clone()],
        ))
    }

    pub fn activation(&self, kind: Activation) -> Tensor {
        let out = self.data().iter().map(|&x| kind.apply(x)).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Activation(kind),
            vec![self.clone()],
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.activation(Activation::Sigmoid)
    }

    pub fn relu(&self) -> Tensor {
        self.activation(Activation::Relu)
    }

    pub fn gelu(&self) -> Tensor {
        self.activation(Activation::Gelu)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (_, cols) = self.dims2("softmax_rows")?;
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax_rows" });
        }
        let mut out = self.data().to_vec();
        if cols > 0 {
            for row in out.chunks_exact_mut(cols) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::SoftmaxRows { cols },
            vec![self.clone()],
        ))
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both length `n`).
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let (rows, cols) = self.dims2("layer_norm")?;
        if cols == 0 {
            return Err(Error::invalid_shape(
                "layer_norm",
                self.shape(),
                "zero-width rows",
            ));
        }
        if gain.numel() != cols || bias.numel() != cols {
            return Err(Error::shape("layer_norm", gain.shape(), bias.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let x = self.data();
        let (g, b) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                cols,
                xhat,
                inv_std,
            },
            vec![self.clone(), gain.clone(), bias.clone()],
        ))
    }

    /// Stacks the rows of `self` above the rows of `below`.
    pub fn concat_rows(&self, below: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2("concat_rows")?;
        let (m, d2) = below.dims2("concat_rows")?;
        if d != d2 {
            return Err(Error::shape("concat_rows", self.shape(), below.shape()));
        }
        let mut out = Vec::with_capacity((n + m) * d);
        out.extend_from_slice(self.data());
        out.extend_from_slice(below.data());
        Ok(Tensor::from_op(
            out,
            vec![n + m, d],
            Op::ConcatRows { split: n * d },
            vec![self.clone(), below.clone()],
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if start > end || end > rows {
            return Err(Error::invalid_shape(
                "slice_rows",
                self.shape(),
                format!("row range {start}..{end} out of bounds"),
            ));
        }
        let out = self.data()[start * cols..end * cols].to_vec();
        Ok(Tensor::from_op(
            out,
            vec![end - start, cols],
            Op::SliceRows {
                offset: start * cols,
            },
            vec![self.clone()],
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if start > end || end > cols {
            return Err(Error::invalid_shape(
                "slice_cols",
                self.shape(),
                format!("column range {start}..{end} out of bounds"),
            ));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.data()[r * cols + start..r * cols + end]);
        }
        Ok(Tensor::from_op(
            out,
            vec![rows, width],
            Op::SliceCols { start, cols },
            vec![self.clone()],
        ))
    }

    /// Places matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid_shape("concat_cols", &[], "no inputs"))?;
        let (rows, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", first.shape(), p.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![rows, total],
            Op::ConcatCols { widths },
            parts.to_vec(),
        ))
    }

    /// Embedding lookup: row `ids[i]` of `self` becomes output row `i`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor> {
        let (rows, cols) = self.dims2("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfVocabulary { id, size: rows });
            }
            out.extend_from_slice(&self.data()[id * cols..(id + 1) * cols]);
        }
        Ok(Tensor::from_op(
            out,
            vec![ids.len(), cols],
            Op::GatherRows {
                ids: ids.to_vec(),
                cols,
            },
            vec![self.clone()],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], Vec::new(), Op::Sum, vec![self.clone()])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        let total = self.data().iter().sum::<f64>() / n;
        Tensor::from_op(vec![total], Vec::new(), Op::Mean, vec![self.clone()])
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("mean_rows")?;
        if rows == 0 {
            return Err(Error::invalid_shape(
                "mean_rows",
                self.shape(),
                "no rows to average",
            ));
        }
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            out.iter_mut().zip(self.row(r)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(Tensor::from_op(
            out,
            vec![1, cols],
            Op::MeanRows { rows, cols },
            vec![self.clone()],
        ))
    }

    /// Sum of each row, `[m, n] -> [m]`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (rows, cols) = self.dims2("sum_cols")?;
        let out = (0..rows).map(|r| self.row(r).iter().sum()).collect();
        Ok(Tensor::from_op(
            out,
            vec![rows],
            Op::SumCols { cols },
            vec![self.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    /// Pointwise op defined by a value function and its derivative. Used for
    /// experiments and for exercising the gradient checker.
    pub fn map_pointwise(
        &self,
        name: &str,
        f: impl Fn(f64) -> f64,
        derivative: impl Fn(f64) -> f64 + 'static,
    ) -> Tensor {
        let out = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Custom {
                name: name.to_string(),
                derivative: Rc::new(derivative),
            },
            vec![self.clone()],
        )
    }
}
