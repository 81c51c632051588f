use super::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.tensors.iter().filter(|t| t.requires_grad).map(Tensor::numel).sum()
    }

    pub fn set_trainable(&mut self, mut pred: impl FnMut(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            t.requires_grad = pred(name);
        }
    }

    /// Records every tensor on `g`, honouring each tensor's `requires_grad`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t)).collect()
    }

    /// Records every tensor on `g` as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                g.constant(t.shape().to_vec(), t.values().to_vec())
                    .expect("stored tensors have valid shapes")
            })
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            if t.requires_grad {
                t.zero_grad();
            }
        }
    }

    /// Adds the gradients of `bound` (as returned by [`bind`](Self::bind)).
    pub fn accumulate(&mut self, bound: &[Var], grads: &Gradients) {
        for (t, v) in self.tensors.iter_mut().zip(bound) {
            if let Some(g) = grads.get(*v) {
                t.accumulate_grad(g);
            }
        }
    }
}
