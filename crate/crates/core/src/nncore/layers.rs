use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{glorot_uniform, normal_matrix, ParamId, ParameterSet};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{NnError, Tensor};

fn check_cols(context: &str, x: &Tensor, cols: usize) -> Result<(), NnError> {
    if x.shape().len() != 2 || x.cols() != cols {
        return Err(NnError::ShapeMismatch {
            context: context.to_string(),
            expected: format!("[n, {cols}]"),
            found: format!("{:?}", x.shape()),
        });
    }
    Ok(())
}

/// Affine map `y = x W + b`, `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = params.add(format!("{name}.w"), glorot_uniform(rng, inputs, outputs));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Dense { w, b, inputs, outputs }
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor, NnError> {
        check_cols("dense input", x, self.inputs)?;
        let n = x.rows();
        let bias = params.value(self.b).data();
        let mut y = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            y.extend_from_slice(bias);
        }
        matmul_acc(x.data(), params.value(self.w).data(), &mut y, n, self.inputs, self.outputs);
        Ok(Tensor::from_matrix(n, self.outputs, y))
    }

    /// Accumulates weight and bias gradients and returns `dL/dx`.
    pub fn backward(&self, params: &mut ParameterSet, x: &Tensor, dy: &Tensor) -> Tensor {
        let n = x.rows();
        debug_assert_eq!(dy.rows(), n);
        let mut dx = vec![0.0; n * self.inputs];
        matmul_nt_acc(dy.data(), params.value(self.w).data(), &mut dx, n, self.inputs, self.outputs);
        if !params.is_frozen(self.w) {
            matmul_tn_acc(x.data(), dy.data(), params.grad_mut(self.w).data_mut(), n, self.inputs, self.outputs);
        }
        if !params.is_frozen(self.b) {
            let db = params.grad_mut(self.b).data_mut();
            for i in 0..n {
                for (g, d) in db.iter_mut().zip(dy.row(i)) {
                    *g += d;
                }
            }
        }
        Tensor::from_matrix(n, self.inputs, dx)
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, vocab: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let table = params.add(format!("{name}.table"), normal_matrix(rng, vocab, dim, std));
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, params: &ParameterSet, ids: &[usize]) -> Result<Tensor, NnError> {
        let table = params.value(self.table);
        let mut out = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= self.vocab {
                return Err(NnError::ShapeMismatch {
                    context: "embedding lookup".into(),
                    expected: format!("id < {}", self.vocab),
                    found: id.to_string(),
                });
            }
            out.extend_from_slice(table.row(id));
        }
        Ok(Tensor::from_matrix(ids.len(), self.dim, out))
    }

    pub fn backward(&self, params: &mut ParameterSet, ids: &[usize], dy: &Tensor) {
        if params.is_frozen(self.table) {
            return;
        }
        let g = params.grad_mut(self.table);
        for (t, &id) in ids.iter().enumerate() {
            for (gi, d) in g.row_mut(id).iter_mut().zip(dy.row(t)) {
                *gi += d;
            }
        }
    }
}

/// Per-row normalization with learned scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(params: &mut ParameterSet, name: &str, dim: usize) -> Self {
        let mut gamma = Tensor::zeros(&[dim]);
        gamma.fill(1.0);
        let gamma = params.add(format!("{name}.gamma"), gamma);
        let beta = params.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        LayerNorm { gamma, beta, dim, eps: 1e-5 }
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Result<(Tensor, LayerNormCache), NnError> {
        check_cols("layer_norm input", x, self.dim)?;
        let n = x.rows();
        let d = self.dim;
        let gamma = params.value(self.gamma).data();
        let beta = params.value(self.beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut y = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                y[i * d + j] = h * gamma[j] + beta[j];
            }
        }
        Ok((Tensor::from_matrix(n, d, y), LayerNormCache { xhat: Tensor::from_matrix(n, d, xhat), inv_std }))
    }

    pub fn backward(&self, params: &mut ParameterSet, cache: &LayerNormCache, dy: &Tensor) -> Tensor {
        let n = dy.rows();
        let d = self.dim;
        let gamma = params.value(self.gamma).data().to_vec();
        if !params.is_frozen(self.gamma) {
            let dg = params.grad_mut(self.gamma).data_mut();
            for i in 0..n {
                for j in 0..d {
                    dg[j] += dy.row(i)[j] * cache.xhat.row(i)[j];
                }
            }
        }
        if !params.is_frozen(self.beta) {
            let db = params.grad_mut(self.beta).data_mut();
            for i in 0..n {
                for (g, v) in db.iter_mut().zip(dy.row(i)) {
                    *g += v;
                }
            }
        }
        let mut dx = vec![0.0; n * d];
        for i in 0..n {
            let xh = cache.xhat.row(i);
            let dyr = dy.row(i);
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                let dxh = dyr[j] * gamma[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            for j in 0..d {
                let dxh = dyr[j] * gamma[j];
                dx[i * d + j] = cache.inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        Tensor::from_matrix(n, d, dx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Tanh,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at pre-activation `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = self.apply(*v));
        y
    }

    /// `dL/dx` from the pre-activation input and `dL/dy`.
    pub fn backward(self, x: &Tensor, dy: &Tensor) -> Tensor {
        let mut dx = dy.clone();
        dx.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| *d *= self.derivative(v));
        dx
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax in place with max subtraction. Entries equal to
/// `-inf` receive probability zero.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    let c = y.cols();
    for row in y.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    y
}

/// `dL/dx` for `y = softmax(x)` row-wise.
pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let c = y.cols();
    let mut dx = dy.clone();
    for (dxr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
        let dot: f64 = dxr.iter().zip(yr).map(|(a, b)| a * b).sum();
        dxr.iter_mut().zip(yr).for_each(|(d, &p)| *d = p * (*d - dot));
    }
    dx
}

/// Log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else
/// `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Feed-forward stack of dense layers with a shared hidden activation and
/// a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input to each dense layer.
    inputs: Vec<Tensor>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Tensor>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(params, &format!("{name}.l{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Result<(Tensor, MlpCache), NnError> {
        let mut cache = MlpCache { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::new() };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(params, &h)?;
            cache.inputs.push(h);
            if i + 1 < self.layers.len() {
                h = self.activation.forward(&z);
                cache.pre.push(z);
            } else {
                h = z;
            }
        }
        Ok((h, cache))
    }

    pub fn infer(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor, NnError> {
        self.forward(params, x).map(|(y, _)| y)
    }

    pub fn backward(&self, params: &mut ParameterSet, cache: &MlpCache, dy: &Tensor) -> Tensor {
        let mut grad = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                grad = self.activation.backward(&cache.pre[i], &grad);
            }
            grad = self.layers[i].backward(params, &cache.inputs[i], &grad);
        }
        grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_dense_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        let d = Dense::new(&mut p, "d", 3, 2, &mut rng);
        p.value_mut(d.w).fill(0.0);
        let x = Tensor::from_matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        assert!(d.forward(&p, &x).unwrap().data().iter().all(|v| *v == 0.0));
        let bad = Tensor::from_matrix(1, 4, vec![0.0; 4]);
        assert!(matches!(d.forward(&p, &bad), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut row = vec![1000.0, 1001.0, 999.0];
        softmax_in_place(&mut row);
        assert!(row.iter().all(|v| v.is_finite()));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut masked = vec![f64::NEG_INFINITY, 0.0];
        softmax_in_place(&mut masked);
        assert_eq!(masked, vec![0.0, 1.0]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        let e = Embedding::new(&mut p, "e", 4, 2, 0.1, &mut rng);
        assert!(e.forward(&p, &[0, 3]).is_ok());
        assert!(e.forward(&p, &[4]).is_err());
    }
}
