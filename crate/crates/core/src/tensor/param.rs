use std::cell::RefCell;
use std::rc::Rc;

use super::{Inner, Tensor};
use crate::error::{Error, Result};

/// A named, trainable leaf tensor.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::leaf(data, shape)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Handle for use in a forward pass. Cheap: shares storage.
    pub fn tensor(&self) -> Tensor {
        self.value.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    /// Mutable access to values and the accumulated gradient. Copies the
    /// storage first if a live graph still references this parameter.
    pub fn update(&mut self, f: impl FnOnce(&mut [f64], Option<&[f64]>)) {
        let inner = self.inner_mut();
        let Inner { data, grad, .. } = inner;
        f(data, grad.get_mut().as_deref());
    }

    pub fn set_data(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::shape("set_data", self.shape(), &[values.len()]));
        }
        self.update(|data, _| data.copy_from_slice(values));
        Ok(())
    }

    fn inner_mut(&mut self) -> &mut Inner {
        if Rc::get_mut(&mut self.value.0).is_none() {
            let old = &self.value.0;
            let copy = Inner {
                shape: old.shape.clone(),
                data: old.data.clone(),
                requires_grad: true,
                grad: RefCell::new(old.grad.borrow().clone()),
                node: None,
            };
            self.value = Tensor(Rc::new(copy));
        }
        Rc::get_mut(&mut self.value.0).expect("parameter storage is uniquely owned")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_while_graph_alive_leaves_graph_untouched() {
        let mut p = Parameter::new("w", vec![1.0, 2.0], &[2]).unwrap();
        let y = p.tensor().scale(3.0);
        p.update(|d, _| d[0] = 10.0);
        assert_eq!(p.data(), &[10.0, 2.0]);
        assert_eq!(y.data(), &[3.0, 6.0]);
    }

    #[test]
    fn gradient_reaches_parameter() {
        let p = Parameter::new("w", vec![1.0, 2.0], &[2]).unwrap();
        p.tensor().sum().backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0]);
        p.zero_grad();
        assert!(p.grad().is_none());
    }
}
