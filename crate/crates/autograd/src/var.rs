use std::sync::RwLock;

use crate::element::Element;
use crate::tensor::Tensor;

/// Mutable trainable parameter.
///
/// Every read hands out the current leaf tensor; [`Var::set`] swaps in a new
/// leaf, so graphs recorded before an update keep the values they saw.
pub struct Var<T: Element = f32> {
    value: RwLock<Tensor<T>>,
}

impl<T: Element> Var<T> {
    pub fn new(data: Vec<T>, shape: &[usize]) -> Self {
        Var {
            value: RwLock::new(Tensor::new_var(data, shape)),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(vec![T::zero(); n], shape)
    }

    pub fn tensor(&self) -> Tensor<T> {
        self.value.read().expect("var lock poisoned").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tensor().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tensor().numel()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.tensor().to_vec()
    }

    pub fn set(&self, data: Vec<T>) {
        let mut guard = self.value.write().expect("var lock poisoned");
        let shape = guard.shape().to_vec();
        *guard = Tensor::new_var(data, &shape);
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("shape", &self.shape()).finish()
    }
}
