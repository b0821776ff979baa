use serde::{Deserialize, Serialize};

/// Checkpoint section a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Section {
    Encoder,
    Adapter,
    Denoiser,
    Optimizer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub section: Section,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A fixed, ordered collection of named parameter tensors.
///
/// The three methods must enumerate the same tensors in the same order.
pub trait Parameters<T> {
    fn param_infos(&self) -> Vec<ParamInfo>;
    fn param_slices(&self) -> Vec<&[T]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [T]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}
