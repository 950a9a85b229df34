use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{NnError, Tensor};

/// Handle to one tensor inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters, each paired with a gradient of the same shape and a
/// frozen flag. Insertion order is stable and defines checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    frozen: Vec<bool>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.position(&name).is_none(), "duplicate parameter {name}");
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.names.push(name);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn position(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Borrow a parameter's value and its gradient at once.
    pub fn value_and_grad(&mut self, id: ParamId) -> (&Tensor, &mut Tensor) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    /// Freezes exactly the parameters whose name satisfies `pred`.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for i in 0..self.names.len() {
            self.frozen[i] = pred(&self.names[i]);
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|(g, _)| g.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in &mut self.grads {
                g.scale(s);
            }
        }
        norm
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite) && self.grads.iter().all(Tensor::all_finite)
    }

    /// Copies every value from `other`, which must have identical names and
    /// shapes.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<(), NnError> {
        if self.names != other.names {
            return Err(NnError::ShapeMismatch {
                context: "copy_values_from".into(),
                expected: format!("{:?}", self.names),
                found: format!("{:?}", other.names),
            });
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(NnError::ShapeMismatch {
                    context: "copy_values_from".into(),
                    expected: format!("{:?}", dst.shape()),
                    found: format!("{:?}", src.shape()),
                });
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// `(name, value)` pairs in insertion order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Replaces values by name from `(name, tensor)` pairs. Every parameter
    /// must be supplied with its exact shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<(), NnError> {
        if tensors.len() != self.values.len() {
            return Err(NnError::ShapeMismatch {
                context: "load_named".into(),
                expected: format!("{} tensors", self.values.len()),
                found: format!("{} tensors", tensors.len()),
            });
        }
        for (name, t) in tensors {
            let id = self.position(name).ok_or_else(|| NnError::ShapeMismatch {
                context: "load_named".into(),
                expected: "known parameter name".into(),
                found: name.clone(),
            })?;
            if self.values[id.0].shape() != t.shape() {
                return Err(NnError::ShapeMismatch {
                    context: format!("load_named {name}"),
                    expected: format!("{:?}", self.values[id.0].shape()),
                    found: format!("{:?}", t.shape()),
                });
            }
        }
        for (name, t) in tensors {
            let id = self.position(name).expect("checked");
            self.values[id.0] = t.clone();
        }
        Ok(())
    }

    /// Little-endian bytes of every value in order; equal bytes mean
    /// bit-identical parameters.
    pub fn value_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(Tensor::to_le_bytes).collect()
    }
}

/// Glorot/Xavier uniform: `U(-l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Tensor::from_matrix(fan_in, fan_out, (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect())
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// `rows×cols` matrix with orthonormal rows (or columns, whichever is
/// fewer), from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let (n, m) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let g = normal_matrix(rng, n, m, 1.0);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = g.row(i).to_vec();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    let flat: Vec<f64> = q.into_iter().flatten().collect();
    if rows <= cols {
        Tensor::from_matrix(rows, cols, flat)
    } else {
        Tensor::from_matrix(rows, cols, super::tensor::transpose(&flat, n, m))
    }
}
