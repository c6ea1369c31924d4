//! The measure-dependent transformer and the pointwise MLP baseline.

use ndarray::{Array2, Axis};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layers::{
    adaln_block, fourier_input, time_embedding, Attention, BlockParams, Dropout, Linear,
};
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[default]
    Transformer,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub ambient_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub fourier_frequencies: usize,
    /// Std of the Gaussian initialization of the frequency matrix.
    pub fourier_scale: f64,
    pub time_embed_dim: usize,
    /// Width of the block MLP as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
    pub time_conditioned: bool,
    pub arch: Arch,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ambient_dim: 2,
            hidden_dim: 512,
            num_layers: 5,
            num_heads: 4,
            fourier_frequencies: 128,
            fourier_scale: 1.0,
            time_embed_dim: 128,
            mlp_ratio: 4,
            dropout_rate: 0.1,
            time_conditioned: true,
            arch: Arch::Transformer,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.ambient_dim == 0 {
            return bad("ambient_dim", "must be at least 1".into());
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be at least 1".into());
        }
        if self.num_layers == 0 {
            return bad("num_layers", "must be at least 1".into());
        }
        if self.arch == Arch::Transformer
            && (self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads))
        {
            return bad(
                "num_heads",
                format!("hidden_dim {} not divisible by {}", self.hidden_dim, self.num_heads),
            );
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim", format!("must be even and positive, got {}", self.time_embed_dim));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate", format!("must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.fourier_scale >= 0.0 && self.fourier_scale.is_finite()) {
            return bad("fourier_scale", format!("must be finite and >= 0, got {}", self.fourier_scale));
        }
        if self.arch == Arch::Mlp && !self.time_conditioned {
            return bad("arch", "the MLP baseline is a time-conditioned flow model".into());
        }
        Ok(())
    }

    fn input_width(&self) -> usize {
        self.ambient_dim + 2 * self.fourier_frequencies
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Conditioning {
    /// Sinusoidal time embedding followed by `Linear -> SiLU -> Linear`.
    Time { fc1: Linear, fc2: Linear },
    /// Learned constant row used by static (one-step) maps.
    Constant(ParamId),
}

#[derive(Debug, Clone, PartialEq)]
enum Layout {
    Transformer {
        fourier: Option<ParamId>,
        input: Linear,
        cond: Conditioning,
        blocks: Vec<BlockParams>,
        output: Linear,
    },
    Mlp {
        fourier: Option<ParamId>,
        layers: Vec<Linear>,
    },
}

/// A model's configuration together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut self.rng;
        let value = Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal));
        self.store.add(name, value)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> ParamId {
        self.store.add(name, Array2::zeros((rows, cols)))
    }

    /// Weights from `N(0, 1/fan_in)`, zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let std = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: self.normal(format!("{name}.weight"), fan_in, fan_out, std),
            bias: self.zeros(format!("{name}.bias"), 1, fan_out),
        }
    }

    fn zero_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: self.zeros(format!("{name}.weight"), fan_in, fan_out),
            bias: self.zeros(format!("{name}.bias"), 1, fan_out),
        }
    }

    fn fourier(&mut self, config: &ModelConfig) -> Option<ParamId> {
        (config.fourier_frequencies > 0).then(|| {
            self.normal(
                "fourier.freqs".into(),
                config.fourier_frequencies,
                config.ambient_dim,
                config.fourier_scale,
            )
        })
    }
}

impl ModelParams {
    /// Fresh weights drawn from `config.init_seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let h = config.hidden_dim;
        let layout = match config.arch {
            Arch::Transformer => {
                let fourier = init.fourier(&config);
                let input = init.linear("input", config.input_width(), h);
                let cond = if config.time_conditioned {
                    Conditioning::Time {
                        fc1: init.linear("time.fc1", config.time_embed_dim, h),
                        fc2: init.linear("time.fc2", h, h),
                    }
                } else {
                    Conditioning::Constant(init.normal("cond.constant".into(), 1, h, 1.0))
                };
                let blocks = (0..config.num_layers)
                    .map(|l| {
                        let p = format!("blocks.{l}");
                        BlockParams {
                            attention: Attention {
                                query: init.linear(&format!("{p}.attn.query"), h, h),
                                key: init.linear(&format!("{p}.attn.key"), h, h),
                                value: init.linear(&format!("{p}.attn.value"), h, h),
                                output: init.linear(&format!("{p}.attn.output"), h, h),
                            },
                            mlp_in: init.linear(&format!("{p}.mlp.fc1"), h, config.mlp_ratio * h),
                            mlp_out: init.linear(&format!("{p}.mlp.fc2"), config.mlp_ratio * h, h),
                            modulation: init.zero_linear(&format!("{p}.adaln"), h, 6 * h),
                        }
                    })
                    .collect();
                let output = init.zero_linear("output", h, config.ambient_dim);
                Layout::Transformer {
                    fourier,
                    input,
                    cond,
                    blocks,
                    output,
                }
            }
            Arch::Mlp => {
                let fourier = init.fourier(&config);
                let mut layers = Vec::with_capacity(config.num_layers + 1);
                let mut fan_in = config.input_width() + config.time_embed_dim;
                for l in 0..config.num_layers {
                    layers.push(init.linear(&format!("mlp.{l}"), fan_in, h));
                    fan_in = h;
                }
                layers.push(init.zero_linear("output", h, config.ambient_dim));
                Layout::Mlp { fourier, layers }
            }
        };
        Ok(ModelParams {
            config,
            store,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_store(config: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut fresh = Self::init(config)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                fresh.store.len(),
                store.len()
            )));
        }
        for (want, got) in fresh.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.dim() != got.value.dim() {
                return Err(Error::Format(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    want.name,
                    want.value.dim(),
                    got.name,
                    got.value.dim()
                )));
            }
        }
        fresh.store = store;
        Ok(fresh)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records the forward pass of one cloud on `g`.
    ///
    /// `x` is the `N x d` input node. `t` must be given exactly when the model
    /// is time-conditioned. With `rng = Some(..)` dropout is active.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: Var,
        t: Option<f64>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let d = self.config.ambient_dim;
        let (n, cols) = g.value(x).dim();
        if cols != d {
            return Err(Error::DimensionMismatch(format!(
                "model expects d={d}, input has d={cols}"
            )));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("empty input cloud".into()));
        }
        if let Some((i, _)) = g.value(x).iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite(format!("model input entry {i}")));
        }
        let temb = match (self.config.time_conditioned, t) {
            (true, Some(t)) => {
                if !t.is_finite() {
                    return Err(Error::NonFinite("time input".into()));
                }
                Some(time_embedding(t, self.config.time_embed_dim)?.insert_axis(Axis(0)))
            }
            (false, None) => None,
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "time-conditioned model called without t".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "static model called with a time value".into(),
                ))
            }
        };
        let store = &self.store;
        let mut dropout = Dropout {
            rate: self.config.dropout_rate,
            rng,
        };
        match &self.layout {
            Layout::Transformer {
                fourier,
                input,
                cond,
                blocks,
                output,
            } => {
                let feats = match fourier {
                    Some(f) => fourier_input(g, store, *f, x),
                    None => x,
                };
                let mut h = input.apply(g, store, feats);
                let c = match cond {
                    Conditioning::Time { fc1, fc2 } => {
                        let e = g.constant(temb.expect("checked above"));
                        let e = fc1.apply(g, store, e);
                        let e = g.silu(e);
                        fc2.apply(g, store, e)
                    }
                    Conditioning::Constant(id) => g.param(store, *id),
                };
                let c = g.silu(c);
                for block in blocks {
                    h = adaln_block(g, store, block, h, c, self.config.num_heads, &mut dropout)?;
                }
                Ok(output.apply(g, store, h))
            }
            Layout::Mlp { fourier, layers } => {
                let feats = match fourier {
                    Some(f) => fourier_input(g, store, *f, x),
                    None => x,
                };
                let temb = temb.expect("mlp is time-conditioned");
                let tcol = g.constant(Array2::from_shape_fn((n, temb.ncols()), |(_, j)| temb[[0, j]]));
                let mut h = g.concat_cols(&[feats, tcol]);
                let (last, hidden) = layers.split_last().expect("at least one layer");
                for layer in hidden {
                    h = layer.apply(g, store, h);
                    h = g.silu(h);
                    h = dropout.apply(g, h);
                }
                Ok(last.apply(g, store, h))
            }
        }
    }

    /// Eval-mode forward pass on a plain array.
    pub fn forward(&self, points: &Array2<f64>, t: Option<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.constant(points.clone());
        let out = self.forward_graph(&mut g, x, t, None)?;
        Ok(g.value(out).clone())
    }

    /// Train-mode forward pass (dropout active) on a plain array.
    pub fn forward_train<R: RngCore>(
        &self,
        points: &Array2<f64>,
        t: Option<f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let x = g.constant(points.clone());
        let out = self.forward_graph(&mut g, x, t, Some(rng))?;
        Ok(g.value(out).clone())
    }
}

/// `N x d -> N x d` measure-dependent transformer.
pub fn transformer_forward(params: &ModelParams, points: &Array2<f64>, t: Option<f64>) -> Result<Array2<f64>> {
    if params.config.arch != Arch::Transformer {
        return Err(Error::InvalidArgument("model is not a transformer".into()));
    }
    params.forward(points, t)
}

/// Pointwise MLP velocity for a single particle.
pub fn mlp_forward(params: &ModelParams, x: &[f64], t: f64) -> Result<Vec<f64>> {
    if params.config.arch != Arch::Mlp {
        return Err(Error::InvalidArgument("model is not an MLP".into()));
    }
    let row = Array2::from_shape_vec((1, x.len()), x.to_vec())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(params.forward(&row, Some(t))?.into_raw_vec_and_offset().0)
}
