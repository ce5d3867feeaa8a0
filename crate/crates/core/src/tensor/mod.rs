//! Dense row-major tensors with eager reverse-mode differentiation.
//!
//! Every op builds its output immediately and, when any input tracks
//! gradients, records an [`Op`] node pointing at its parents. Calling
//! [`Tensor::backward`] on a scalar walks that graph in reverse topological
//! order and accumulates gradients into the leaves. Intermediate gradients
//! live only for the duration of one backward call, so a second call on the
//! same graph adds the same contribution to the leaves again.

mod backward;
mod batched;
mod gemm;
pub mod gradcheck;
mod ops;
mod param;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use ops::Activation;
pub(crate) use ops::Op;
pub use param::Parameter;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any backprop nodes on this thread.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Inner>);

pub(crate) struct Inner {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f64>>>,
    pub(crate) node: Option<Node>,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::raw(data, shape.to_vec(), false))
    }

    /// A gradient-tracking leaf.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        check_len(&data, shape)?;
        Ok(Self::raw(data, shape.to_vec(), true))
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::invalid_shape(
                "from_rows",
                &[rows.len(), bad.len()],
                format!("ragged rows, expected width {cols}"),
            ));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(data, &[rows.len(), cols])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::raw(vec![0.0; n], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::raw(vec![value; n], shape.to_vec(), false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![value], Vec::new(), false)
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::raw(data, vec![n, n], false)
    }

    pub(crate) fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            node: None,
        }))
    }

    /// Builds an op output, attaching a backprop node only if some parent
    /// tracks gradients and recording is enabled.
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op, parents: Vec<Tensor>) -> Self {
        let track = grad_enabled() && parents.iter().any(Tensor::requires_grad);
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad: track,
            grad: RefCell::new(None),
            node: track.then_some(Node { op, parents }),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Row and column counts of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid_shape(op, self.shape(), "expected a matrix")),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape().first().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape().get(1).copied().unwrap_or(self.numel());
        &self.data()[i * cols..(i + 1) * cols]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data() {
            [v] => Ok(*v),
            _ => Err(Error::NotScalar(self.shape().to_vec())),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, no history.
    pub fn detach(&self) -> Tensor {
        Self::raw(self.data().to_vec(), self.shape().to_vec(), false)
    }

    pub(crate) fn key(&self) -> *const Inner {
        Rc::as_ptr(&self.0)
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }
}

fn check_len(data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::invalid_shape(
            "tensor",
            shape,
            format!("{} elements supplied", data.len()),
        ));
    }
    Ok(())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data", &self.data())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_element_count() {
        assert!(Tensor::new(vec![1.0; 5], &[2, 3]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn no_grad_suppresses_nodes_and_restores() {
        let w = Tensor::leaf(vec![1.0, 2.0], &[1, 2]).unwrap();
        let y = no_grad(|| w.scale(2.0));
        assert!(!y.requires_grad());
        assert!(grad_enabled());
        assert!(w.scale(2.0).requires_grad());
    }
}
