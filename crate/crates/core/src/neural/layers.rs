//! Building blocks of the measure-dependent transformer.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore};

use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};

/// Highest frequency of the time embedding grid; the lowest is 1.
pub const TIME_EMBED_MAX_FREQ: f64 = 1e4;

/// Dense layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).ncols()
    }
}

/// Dropout settings for one forward pass; `None` rng means eval mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl Dropout<'_> {
    pub fn eval() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let rate = self.rate;
                let keep = g.value(x).map(|_| rng.random::<f64>() >= rate);
                g.dropout(x, &keep, rate)
            }
            _ => x,
        }
    }
}

/// `concat(sin(2 pi B x), cos(2 pi B x))` for a single point.
pub fn fourier_features(x: &[f64], b: &Array2<f64>) -> Vec<f64> {
    let proj: Vec<f64> = b
        .rows()
        .into_iter()
        .map(|row| 2.0 * PI * row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    proj.iter()
        .map(|p| p.sin())
        .chain(proj.iter().map(|p| p.cos()))
        .collect()
}

/// Rows of `points` augmented with their Fourier features: `[x, sin(2 pi x B^T), cos(2 pi x B^T)]`.
pub fn fourier_input(g: &mut Graph, store: &ParamStore, freqs: ParamId, x: Var) -> Var {
    let b = g.param(store, freqs);
    let proj = g.matmul_t(x, b);
    let proj = g.scale(proj, 2.0 * PI);
    let s = g.sin(proj);
    let c = g.cos(proj);
    g.concat_cols(&[x, s, c])
}

/// Sinusoidal embedding with interleaved `(sin(t w_i), cos(t w_i))` pairs and
/// frequencies `w_i` log-spaced over `[1, 1e4]`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let frac = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = TIME_EMBED_MAX_FREQ.powf(frac);
        out[2 * i] = (t * freq).sin();
        out[2 * i + 1] = (t * freq).cos();
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

/// Multi-head self-attention over all rows (no masking).
///
/// Each head applies a row softmax to `<Q x_i, K x_j> / sqrt(head_dim)` and
/// mixes the value-projected rows; heads are concatenated and projected.
pub fn attention_finite(
    g: &mut Graph,
    store: &ParamStore,
    attn: &Attention,
    tokens: Var,
    num_heads: usize,
) -> Result<Var> {
    let width = attn.query.out_dim(store);
    if num_heads == 0 || !width.is_multiple_of(num_heads) {
        return Err(Error::InvalidArgument(format!(
            "attention width {width} not divisible by {num_heads} heads"
        )));
    }
    let head_dim = width / num_heads;
    let q = attn.query.apply(g, store, tokens);
    let k = attn.key.apply(g, store, tokens);
    let v = attn.value.apply(g, store, tokens);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let heads: Vec<Var> = (0..num_heads)
        .map(|h| {
            let qh = g.columns(q, h * head_dim, head_dim);
            let kh = g.columns(k, h * head_dim, head_dim);
            let vh = g.columns(v, h * head_dim, head_dim);
            let logits = g.matmul_t(qh, kh);
            let logits = g.scale(logits, scale);
            let weights = g.softmax_rows(logits);
            g.matmul(weights, vh)
        })
        .collect();
    let mixed = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)
    };
    Ok(attn.output.apply(g, store, mixed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockParams {
    pub attention: Attention,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// Maps the activated conditioning vector to six modulation vectors:
    /// shift, scale and gate for the attention and MLP sublayers.
    pub modulation: Linear,
}

/// `LN(x) * (1 + scale) + shift`
fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Var {
    let normed = g.layer_norm_rows(x);
    let one_plus = g.add_scalar(scale, 1.0);
    let scaled = g.mul_row(normed, one_plus);
    g.add_row(scaled, shift)
}

/// Pre-norm residual block with adaptive layer norm and gated residuals.
///
/// `cond` is the already-activated 1 x h conditioning row.
pub fn adaln_block(
    g: &mut Graph,
    store: &ParamStore,
    block: &BlockParams,
    tokens: Var,
    cond: Var,
    num_heads: usize,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let width = g.value(tokens).ncols();
    let m = block.modulation.apply(g, store, cond);
    let part = |g: &mut Graph, i: usize| g.columns(m, i * width, width);
    let (shift1, scale1, gate1) = (part(g, 0), part(g, 1), part(g, 2));
    let (shift2, scale2, gate2) = (part(g, 3), part(g, 4), part(g, 5));

    let a = modulate(g, tokens, shift1, scale1);
    let a = attention_finite(g, store, &block.attention, a, num_heads)?;
    let a = dropout.apply(g, a);
    let a = g.mul_row(a, gate1);
    let h = g.add(tokens, a);

    let f = modulate(g, h, shift2, scale2);
    let f = block.mlp_in.apply(g, store, f);
    let f = g.gelu(f);
    let f = dropout.apply(g, f);
    let f = block.mlp_out.apply(g, store, f);
    let f = g.mul_row(f, gate2);
    Ok(g.add(h, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn linear(store: &mut ParamStore, name: &str, w: Array2<f64>) -> Linear {
        let out = w.ncols();
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, out))),
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.sample::<f64, _>(StandardNormal) * 0.5)
    }

    fn random_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, h: usize) -> Attention {
        Attention {
            query: linear(store, "q", random(rng, h, h)),
            key: linear(store, "k", random(rng, h, h)),
            value: linear(store, "v", random(rng, h, h)),
            output: linear(store, "o", random(rng, h, h)),
        }
    }

    #[test]
    fn single_token_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let mut attn = random_attention(&mut store, &mut rng, 4);
        let ident = linear(&mut store, "id", Array2::eye(4));
        attn.output = ident;
        let x = array![[0.3, -1.2, 2.0, 0.7]];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = attention_finite(&mut g, &store, &attn, xv, 2).unwrap();
        let expected = x.dot(store.value(attn.value.weight));
        assert_eq!(g.value(out), &expected);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let attn = random_attention(&mut store, &mut rng, 4);
        let mut g = Graph::new();
        let xv = g.constant(array![[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0], [0.0, 1.0, 0.0, 1.0]]);
        let out = attention_finite(&mut g, &store, &attn, xv, 2).unwrap();
        let o = g.value(out);
        assert_eq!(o.row(0), o.row(1));
    }

    #[test]
    fn two_token_attention_by_hand() {
        let mut store = ParamStore::default();
        let attn = Attention {
            query: linear(&mut store, "q", array![[1.0, 0.0], [0.0, 2.0]]),
            key: linear(&mut store, "k", array![[1.0, 1.0], [0.0, 1.0]]),
            value: linear(&mut store, "v", array![[2.0, 0.0], [1.0, -1.0]]),
            output: linear(&mut store, "o", Array2::eye(2)),
        };
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = attention_finite(&mut g, &store, &attn, xv, 1).unwrap();
        // Q = [[1,0],[0,2]], K = [[1,1],[0,1]], V = [[2,0],[1,-1]], scale 1/sqrt(2).
        let s = 1.0 / 2f64.sqrt();
        let softmax2 = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            (ea / (ea + eb), eb / (ea + eb))
        };
        let (p00, p01) = softmax2(1.0 * s, 0.0 * s);
        let (p10, p11) = softmax2(2.0 * s, 2.0 * s);
        let expected = array![
            [2.0 * p00 + 1.0 * p01, -p01],
            [2.0 * p10 + 1.0 * p11, -p11]
        ];
        for (a, b) in g.value(out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_features_at_origin_and_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = random(&mut rng, 5, 3);
        let f = fourier_features(&[0.0, 0.0, 0.0], &b);
        assert_eq!(&f[..5], &[0.0; 5]);
        assert_eq!(&f[5..], &[1.0; 5]);
        let f = fourier_features(&[0.4, -2.0, 9.0], &Array2::zeros((5, 3)));
        assert_eq!(&f[..5], &[0.0; 5]);
        assert_eq!(&f[5..], &[1.0; 5]);
    }

    #[test]
    fn fourier_features_elementwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = random(&mut rng, 3, 2);
        let x = [0.3, -0.8];
        let f = fourier_features(&x, &b);
        for k in 0..3 {
            let p = 2.0 * PI * (b[[k, 0]] * x[0] + b[[k, 1]] * x[1]);
            assert!((f[k] - p.sin()).abs() < 1e-15);
            assert!((f[3 + k] - p.cos()).abs() < 1e-15);
        }
        // The graph version augments the raw coordinates with the same features.
        let mut store = ParamStore::default();
        let id = store.add("B", b.clone());
        let mut g = Graph::new();
        let xv = g.constant(array![[0.3, -0.8]]);
        let out = fourier_input(&mut g, &store, id, xv);
        let row = g.value(out).row(0).to_vec();
        assert_eq!(&row[..2], &x);
        for (a, b) in row[2..].iter().zip(&f) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn time_embedding_properties() {
        let e0 = time_embedding(0.0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e0[2 * i], 0.0);
            assert_eq!(e0[2 * i + 1], 1.0);
        }
        assert!(time_embedding(0.5, 7).is_err());
        assert_eq!(time_embedding(0.37, 16).unwrap(), time_embedding(0.37, 16).unwrap());
        let grid: Vec<Array1<f64>> = (0..=100).map(|k| time_embedding(k as f64 / 100.0, 16).unwrap()).collect();
        for i in 0..grid.len() {
            for j in i + 1..grid.len() {
                let dist: f64 = (&grid[i] - &grid[j]).mapv(|v| v * v).sum();
                assert!(dist > 0.0, "t grid points {i} and {j} collide");
            }
        }
    }

    fn block(store: &mut ParamStore, rng: &mut ChaCha8Rng, h: usize, zero_modulation: bool) -> BlockParams {
        let modulation_w = if zero_modulation { Array2::zeros((h, 6 * h)) } else { random(rng, h, 6 * h) };
        BlockParams {
            attention: random_attention(store, rng, h),
            mlp_in: linear(store, "fc1", random(rng, h, 2 * h)),
            mlp_out: linear(store, "fc2", random(rng, 2 * h, h)),
            modulation: linear(store, "mod", modulation_w),
        }
    }

    #[test]
    fn zero_gates_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::default();
        let blk = block(&mut store, &mut rng, 4, true);
        let x = random(&mut rng, 5, 4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let c = g.constant(random(&mut rng, 1, 4));
        let out = adaln_block(&mut g, &store, &blk, xv, c, 2, &mut Dropout::eval()).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn block_is_row_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::default();
        let blk = block(&mut store, &mut rng, 4, false);
        let x = random(&mut rng, 6, 4);
        let cond = random(&mut rng, 1, 4);
        let perm = [3, 0, 5, 1, 4, 2];
        let run = |x: Array2<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(x);
            let c = g.constant(cond.clone());
            let out = adaln_block(&mut g, &store, &blk, xv, c, 2, &mut Dropout::eval()).unwrap();
            g.value(out).clone()
        };
        let base = run(x.clone());
        let permuted = run(crate::measures::select_rows(&x, &perm).unwrap());
        for (j, &src) in perm.iter().enumerate() {
            for k in 0..4 {
                assert!((permuted[[j, k]] - base[[src, k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::default();
        let blk = block(&mut store, &mut rng, 4, false);
        let x = random(&mut rng, 3, 4);
        let cond = random(&mut rng, 1, 4);
        let probe = random(&mut rng, 3, 4);
        let loss_of = |store: &ParamStore, grads: bool| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let c = g.constant(cond.clone());
            let out = adaln_block(&mut g, store, &blk, xv, c, 2, &mut Dropout::eval()).unwrap();
            let p = g.constant(probe.clone());
            let prod = g.mul(out, p);
            let loss = g.sum(prod);
            let value = g.scalar(loss);
            if grads {
                let mut s = store.clone();
                s.zero_grad();
                g.backward(loss).unwrap().accumulate_into(&mut s);
                (value, Some(s))
            } else {
                (value, None)
            }
        };
        let (_, with_grads) = loss_of(&store, true);
        let with_grads = with_grads.unwrap();
        let h = 1e-6;
        for id in store.ids() {
            let n = store.value(id).len();
            for idx in 0..n {
                let mut plus = store.clone();
                plus.value_mut(id).as_slice_mut().unwrap()[idx] += h;
                let mut minus = store.clone();
                minus.value_mut(id).as_slice_mut().unwrap()[idx] -= h;
                let numeric = (loss_of(&plus, false).0 - loss_of(&minus, false).0) / (2.0 * h);
                let analytic = with_grads.grad(id).as_slice().unwrap()[idx];
                let err = (analytic - numeric).abs();
                assert!(
                    err <= 1e-5 * numeric.abs().max(analytic.abs()) || err < 1e-8,
                    "{} [{idx}]: analytic {analytic} numeric {numeric}",
                    store.get(id).name
                );
            }
        }
    }
}
