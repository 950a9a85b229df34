use rand::Rng;

use super::layers::{softmax_in_place, Dense};
use super::params::ParameterSet;
use super::{NnError, Tensor};

/// Multi-head self-attention over one sequence with a strictly causal
/// mask: position `t` attends to positions `0..=t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalSelfAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `probs[h][t]` holds the `t + 1` attention weights of position `t`.
    probs: Vec<Vec<Vec<f64>>>,
    mixed: Tensor,
}

impl CausalSelfAttention {
    pub fn new<R: Rng + ?Sized>(params: &mut ParameterSet, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self, NnError> {
        if heads == 0 || dim % heads != 0 {
            return Err(NnError::ShapeMismatch {
                context: format!("{name} heads"),
                expected: "model_dim divisible by num_heads".into(),
                found: format!("dim {dim}, heads {heads}"),
            });
        }
        Ok(CausalSelfAttention {
            query: Dense::new(params, &format!("{name}.q"), dim, dim, rng),
            key: Dense::new(params, &format!("{name}.k"), dim, dim, rng),
            value: Dense::new(params, &format!("{name}.v"), dim, dim, rng),
            output: Dense::new(params, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, params: &ParameterSet, x: &Tensor) -> Result<(Tensor, AttentionCache), NnError> {
        let q = self.query.forward(params, x)?.into_data();
        let k = self.key.forward(params, x)?.into_data();
        let v = self.value.forward(params, x)?.into_data();
        let t_len = x.rows();
        let (d, dh) = (self.dim, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut mixed = vec![0.0; t_len * d];
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * dh;
            let mut head_probs = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let qt = &q[t * d + off..t * d + off + dh];
                let mut p: Vec<f64> = (0..=t)
                    .map(|s| {
                        let ks = &k[s * d + off..s * d + off + dh];
                        qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                softmax_in_place(&mut p);
                let out = &mut mixed[t * d + off..t * d + off + dh];
                for (s, &w) in p.iter().enumerate() {
                    let vs = &v[s * d + off..s * d + off + dh];
                    for (o, vv) in out.iter_mut().zip(vs) {
                        *o += w * vv;
                    }
                }
                head_probs.push(p);
            }
            probs.push(head_probs);
        }
        let mixed = Tensor::from_matrix(t_len, d, mixed);
        let y = self.output.forward(params, &mixed)?;
        Ok((y, AttentionCache { x: x.clone(), q, k, v, probs, mixed }))
    }

    pub fn backward(&self, params: &mut ParameterSet, cache: &AttentionCache, dy: &Tensor) -> Tensor {
        let dmixed = self.output.backward(params, &cache.mixed, dy);
        let t_len = dy.rows();
        let (d, dh) = (self.dim, self.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v) = (&cache.q, &cache.k, &cache.v);
        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut dp = Vec::with_capacity(t_len);
        for h in 0..self.heads {
            let off = h * dh;
            for t in 0..t_len {
                let p = &cache.probs[h][t];
                let dot = &dmixed.data()[t * d + off..t * d + off + dh];
                dp.clear();
                for s in 0..=t {
                    let vs = &v[s * d + off..s * d + off + dh];
                    dp.push(dot.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>());
                    let dvs = &mut dv[s * d + off..s * d + off + dh];
                    for (g, o) in dvs.iter_mut().zip(dot) {
                        *g += p[s] * o;
                    }
                }
                let inner: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for s in 0..=t {
                    let ds = p[s] * (dp[s] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..dh {
                        dq[t * d + off + j] += ds * k[s * d + off + j];
                        dk[s * d + off + j] += ds * q[t * d + off + j];
                    }
                }
            }
        }
        let mut dx = self.query.backward(params, &cache.x, &Tensor::from_matrix(t_len, d, dq));
        dx.add_assign(&self.key.backward(params, &cache.x, &Tensor::from_matrix(t_len, d, dk)));
        dx.add_assign(&self.value.backward(params, &cache.x, &Tensor::from_matrix(t_len, d, dv)));
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParameterSet::new();
        assert!(CausalSelfAttention::new(&mut p, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn first_position_copies_its_own_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParameterSet::new();
        let a = CausalSelfAttention::new(&mut p, "a", 4, 2, &mut rng).unwrap();
        let x = Tensor::from_matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
        let (_, cache) = a.forward(&p, &x).unwrap();
        let v = a.value.forward(&p, &x).unwrap();
        for j in 0..4 {
            assert!((cache.mixed.row(0)[j] - v.row(0)[j]).abs() < 1e-12);
        }
    }
}
