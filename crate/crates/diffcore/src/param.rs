use crate::{Scalar, Tensor};

/// A named model tensor with a trainability flag and an optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Self {
        Self {
            name: name.into(),
            tensor,
            trainable,
            grad: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        match &mut self.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.clone()),
        }
    }
}
