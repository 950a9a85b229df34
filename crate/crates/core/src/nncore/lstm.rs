use rand::Rng;

use super::layers::sigmoid;
use super::params::{glorot_uniform, orthogonal, ParamId, ParameterSet};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{NnError, Tensor};

/// One LSTM layer unrolled over a sequence, starting from zero state.
/// Gate order inside the `4·hidden` pre-activations is input, forget,
/// cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w_input: ParamId,
    pub w_recurrent: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    x: Tensor,
    /// Activated gates per step, `[T, 4H]`.
    gates: Vec<f64>,
    /// Cell states per step, `[T, H]`.
    cells: Vec<f64>,
    /// Hidden states per step, `[T, H]`.
    hiddens: Vec<f64>,
}

impl Lstm {
    /// Forget-gate bias starts at 1. Recurrent weights are orthogonal when
    /// `orthogonal_recurrent` is set and Glorot-uniform otherwise.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        name: &str,
        inputs: usize,
        hidden: usize,
        orthogonal_recurrent: bool,
        rng: &mut R,
    ) -> Self {
        let w_input = params.add(format!("{name}.wx"), glorot_uniform(rng, inputs, 4 * hidden));
        let wh = if orthogonal_recurrent { orthogonal(rng, hidden, 4 * hidden) } else { glorot_uniform(rng, hidden, 4 * hidden) };
        let w_recurrent = params.add(format!("{name}.wh"), wh);
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let bias = params.add(format!("{name}.b"), b);
        Lstm { w_input, w_recurrent, bias, inputs, hidden }
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Result<(Tensor, LstmCache), NnError> {
        if x.shape().len() != 2 || x.cols() != self.inputs {
            return Err(NnError::ShapeMismatch {
                context: "lstm input".into(),
                expected: format!("[T, {}]", self.inputs),
                found: format!("{:?}", x.shape()),
            });
        }
        let t_len = x.rows();
        let h = self.hidden;
        let g4 = 4 * h;
        let bias = params.value(self.bias).data();
        let mut z = Vec::with_capacity(t_len * g4);
        for _ in 0..t_len {
            z.extend_from_slice(bias);
        }
        matmul_acc(x.data(), params.value(self.w_input).data(), &mut z, t_len, self.inputs, g4);
        let wh = params.value(self.w_recurrent).data();
        let mut cells = vec![0.0; t_len * h];
        let mut hiddens = vec![0.0; t_len * h];
        for t in 0..t_len {
            if t > 0 {
                let (prev, zt) = (&hiddens[(t - 1) * h..t * h], &mut z[t * g4..(t + 1) * g4]);
                matmul_acc(prev, wh, zt, 1, h, g4);
            }
            let zt = &mut z[t * g4..(t + 1) * g4];
            for j in 0..h {
                zt[j] = sigmoid(zt[j]);
                zt[h + j] = sigmoid(zt[h + j]);
                zt[2 * h + j] = zt[2 * h + j].tanh();
                zt[3 * h + j] = sigmoid(zt[3 * h + j]);
                let c_prev = if t > 0 { cells[(t - 1) * h + j] } else { 0.0 };
                let c = zt[h + j] * c_prev + zt[j] * zt[2 * h + j];
                cells[t * h + j] = c;
                hiddens[t * h + j] = zt[3 * h + j] * c.tanh();
            }
        }
        let y = Tensor::from_matrix(t_len, h, hiddens.clone());
        Ok((y, LstmCache { x: x.clone(), gates: z, cells, hiddens }))
    }

    /// Full backpropagation through time.
    pub fn backward(&self, params: &mut ParameterSet, cache: &LstmCache, dy: &Tensor) -> Tensor {
        let t_len = dy.rows();
        let h = self.hidden;
        let g4 = 4 * h;
        let wh = params.value(self.w_recurrent).data().to_vec();
        let mut dz = vec![0.0; t_len * g4];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..t_len).rev() {
            let gt = &cache.gates[t * g4..(t + 1) * g4];
            let dzt = &mut dz[t * g4..(t + 1) * g4];
            for j in 0..h {
                let (i, f, g, o) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let c = cache.cells[t * h + j];
                let tc = c.tanh();
                let c_prev = if t > 0 { cache.cells[(t - 1) * h + j] } else { 0.0 };
                let dh = dy.row(t)[j] + dh_next[j];
                let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
                dzt[j] = dc * g * i * (1.0 - i);
                dzt[h + j] = dc * c_prev * f * (1.0 - f);
                dzt[2 * h + j] = dc * i * (1.0 - g * g);
                dzt[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                matmul_nt_acc(dzt, &wh, &mut dh_next, 1, h, g4);
            }
        }
        if !params.is_frozen(self.w_recurrent) && t_len > 1 {
            let prev = &cache.hiddens[..(t_len - 1) * h];
            matmul_tn_acc(prev, &dz[g4..], params.grad_mut(self.w_recurrent).data_mut(), t_len - 1, h, g4);
        }
        if !params.is_frozen(self.w_input) {
            matmul_tn_acc(cache.x.data(), &dz, params.grad_mut(self.w_input).data_mut(), t_len, self.inputs, g4);
        }
        if !params.is_frozen(self.bias) {
            let db = params.grad_mut(self.bias).data_mut();
            for row in dz.chunks(g4) {
                for (g, v) in db.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut dx = vec![0.0; t_len * self.inputs];
        matmul_nt_acc(&dz, params.value(self.w_input).data(), &mut dx, t_len, self.inputs, g4);
        Tensor::from_matrix(t_len, self.inputs, dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        let l = Lstm::new(&mut p, "l", 3, 2, true, &mut rng);
        assert_eq!(p.value(l.bias).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn hidden_state_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParameterSet::new();
        let l = Lstm::new(&mut p, "l", 2, 3, false, &mut rng);
        let x = Tensor::from_matrix(50, 2, (0..100).map(|i| (i as f64).sin() * 10.0).collect());
        let (y, _) = l.forward(&p, &x).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
}
