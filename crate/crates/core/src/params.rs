//! Named parameter arrays and shape-congruent gradient accumulators.

use rand::Rng;
use std::collections::HashMap;

/// Index of an array inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A dense row-major array of 64-bit floats with a name.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(len, data.len(), "array data does not match its shape");
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of rows; a vector is a single column.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered collection of uniquely named arrays. Enumeration order is
/// registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    arrays: Vec<Array>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers an array. Panics on a duplicate name.
    pub fn add(&mut self, array: Array) -> ParamId {
        let id = self.arrays.len();
        let prev = self.by_name.insert(array.name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {:?}", array.name);
        self.arrays.push(array);
        ParamId(id)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> ParamId {
        let len = shape.iter().product();
        self.add(Array::new(name, shape, vec![0.0; len]))
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        scale: f64,
        rng: &mut R,
    ) -> ParamId {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-scale..scale)).collect();
        self.add(Array::new(name, shape, data))
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.arrays.iter().enumerate().map(|(i, a)| (ParamId(i), a))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.arrays.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.arrays.iter().map(Array::len).sum()
    }

    /// Name of the first array holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.arrays
            .iter()
            .find(|a| a.data.iter().any(|x| !x.is_finite()))
            .map(|a| a.name.as_str())
    }
}

/// One accumulator per parameter array, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    grads: Vec<Vec<f64>>,
}

impl GradientStore {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            grads: params.arrays.iter().map(|a| vec![0.0; a.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_congruent(&self, params: &ParamSet) -> bool {
        self.grads.len() == params.len()
            && self
                .grads
                .iter()
                .zip(&params.arrays)
                .all(|(g, a)| g.len() == a.len())
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn add_assign(&mut self, other: &GradientStore) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn is_all_zero(&self, id: ParamId) -> bool {
        self.grads[id.0].iter().all(|&x| x == 0.0)
    }
}
