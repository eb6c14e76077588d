use serde::{Deserialize, Serialize};

/// Index of a named array inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named flat arrays. Used for trainable parameters and for
/// non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    /// Bumped on every in-place update; lets callers check that two
    /// forwards saw the same weights.
    version: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape mismatch for {name}");
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.shapes.push(shape);
        self.values.push(values);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    /// Mutable access; bumps the version.
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.version += 1;
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Gradient buffer with the same layout, filled with zeros.
    pub fn zeros_like(&self) -> Grads {
        Grads {
            values: self.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }

    pub(crate) fn values_mut_unversioned(&mut self) -> &mut [Vec<f64>] {
        &mut self.values
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Gradients laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub values: Vec<Vec<f64>>,
}

impl Grads {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}
