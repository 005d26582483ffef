//! Model parameters and forward passes: the listwise Transformer ranker
//! with CLS token, scoring and listwide heads, and the pointwise MLP
//! baseline.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    mlp_forward, rankformer_forward, self_attention, transformer_layer, BatchForward, Mode,
};

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result, Scalar};

/// Architecture of the Transformer ranker. `standard_preln` switches the
/// feed-forward residual base from the layer input to the attention output
/// (the conventional pre-LN stack); off by default.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankFormerDims {
    pub d_x: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dim_ff: usize,
    pub head_width: usize,
    pub y_max: u8,
    pub standard_preln: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpDims {
    pub d_x: usize,
    pub hidden: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSpec {
    RankFormer(RankFormerDims),
    Mlp(MlpDims),
}

impl ModelSpec {
    pub fn d_x(&self) -> usize {
        match self {
            ModelSpec::RankFormer(d) => d.d_x,
            ModelSpec::Mlp(d) => d.d_x,
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            ModelSpec::RankFormer(_) => "rankformer",
            ModelSpec::Mlp(_) => "mlp",
        }
    }
}

/// A dense layer; weight is (fan_in, fan_out), bias (fan_out).
#[derive(Debug, Clone)]
pub struct LinearParams<F> {
    pub weight: Arc<ArrayD<F>>,
    pub bias: Arc<ArrayD<F>>,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams<F> {
    pub scale: Arc<ArrayD<F>>,
    pub shift: Arc<ArrayD<F>>,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<F> {
    pub query: LinearParams<F>,
    pub key: LinearParams<F>,
    pub value: LinearParams<F>,
    pub output: LinearParams<F>,
}

#[derive(Debug, Clone)]
pub struct TransformerLayerParams<F> {
    pub norm1: LayerNormParams<F>,
    pub attention: AttentionParams<F>,
    pub norm2: LayerNormParams<F>,
    pub ff1: LinearParams<F>,
    pub ff2: LinearParams<F>,
}

/// Two-layer head with one hidden layer.
#[derive(Debug, Clone)]
pub struct HeadParams<F> {
    pub hidden: LinearParams<F>,
    pub output: LinearParams<F>,
}

#[derive(Debug, Clone)]
pub struct RankFormerParams<F> {
    /// Learnable CLS feature row, shape (1, d_x).
    pub cls: Arc<ArrayD<F>>,
    pub layers: Vec<TransformerLayerParams<F>>,
    /// Scoring head over (item ++ CLS) features: 2 d_x -> width -> 1.
    pub score_head: HeadParams<F>,
    /// Listwide head over CLS features: d_x -> width -> y_max, sigmoid out.
    pub listwide_head: HeadParams<F>,
}

#[derive(Debug, Clone)]
pub struct MlpParams<F> {
    pub hidden: Vec<LinearParams<F>>,
    pub output: LinearParams<F>,
}

#[derive(Debug, Clone)]
pub enum ModelParams<F> {
    RankFormer(RankFormerParams<F>),
    Mlp(MlpParams<F>),
}

fn push_linear<'a, F>(
    out: &mut Vec<(String, &'a Arc<ArrayD<F>>)>,
    name: &str,
    linear: &'a LinearParams<F>,
) {
    out.push((format!("{name}.weight"), &linear.weight));
    out.push((format!("{name}.bias"), &linear.bias));
}

fn push_linear_mut<'a, F>(
    out: &mut Vec<(String, &'a mut Arc<ArrayD<F>>)>,
    name: &str,
    linear: &'a mut LinearParams<F>,
) {
    out.push((format!("{name}.weight"), &mut linear.weight));
    out.push((format!("{name}.bias"), &mut linear.bias));
}

impl<F: Scalar> RankFormerParams<F> {
    pub fn tensors(&self) -> Vec<(String, &Arc<ArrayD<F>>)> {
        let mut out = Vec::new();
        out.push(("cls".to_string(), &self.cls));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.norm1.scale"), &layer.norm1.scale));
            out.push((format!("layer{i}.norm1.shift"), &layer.norm1.shift));
            push_linear(&mut out, &format!("layer{i}.attn.query"), &layer.attention.query);
            push_linear(&mut out, &format!("layer{i}.attn.key"), &layer.attention.key);
            push_linear(&mut out, &format!("layer{i}.attn.value"), &layer.attention.value);
            push_linear(&mut out, &format!("layer{i}.attn.output"), &layer.attention.output);
            out.push((format!("layer{i}.norm2.scale"), &layer.norm2.scale));
            out.push((format!("layer{i}.norm2.shift"), &layer.norm2.shift));
            push_linear(&mut out, &format!("layer{i}.ff1"), &layer.ff1);
            push_linear(&mut out, &format!("layer{i}.ff2"), &layer.ff2);
        }
        push_linear(&mut out, "score_head.hidden", &self.score_head.hidden);
        push_linear(&mut out, "score_head.output", &self.score_head.output);
        push_linear(&mut out, "listwide_head.hidden", &self.listwide_head.hidden);
        push_linear(&mut out, "listwide_head.output", &self.listwide_head.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Arc<ArrayD<F>>)> {
        let mut out = Vec::new();
        out.push(("cls".to_string(), &mut self.cls));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.norm1.scale"), &mut layer.norm1.scale));
            out.push((format!("layer{i}.norm1.shift"), &mut layer.norm1.shift));
            push_linear_mut(&mut out, &format!("layer{i}.attn.query"), &mut layer.attention.query);
            push_linear_mut(&mut out, &format!("layer{i}.attn.key"), &mut layer.attention.key);
            push_linear_mut(&mut out, &format!("layer{i}.attn.value"), &mut layer.attention.value);
            push_linear_mut(&mut out, &format!("layer{i}.attn.output"), &mut layer.attention.output);
            out.push((format!("layer{i}.norm2.scale"), &mut layer.norm2.scale));
            out.push((format!("layer{i}.norm2.shift"), &mut layer.norm2.shift));
            push_linear_mut(&mut out, &format!("layer{i}.ff1"), &mut layer.ff1);
            push_linear_mut(&mut out, &format!("layer{i}.ff2"), &mut layer.ff2);
        }
        push_linear_mut(&mut out, "score_head.hidden", &mut self.score_head.hidden);
        push_linear_mut(&mut out, "score_head.output", &mut self.score_head.output);
        push_linear_mut(&mut out, "listwide_head.hidden", &mut self.listwide_head.hidden);
        push_linear_mut(&mut out, "listwide_head.output", &mut self.listwide_head.output);
        out
    }
}

impl<F: Scalar> MlpParams<F> {
    pub fn tensors(&self) -> Vec<(String, &Arc<ArrayD<F>>)> {
        let mut out = Vec::new();
        for (i, layer) in self.hidden.iter().enumerate() {
            push_linear(&mut out, &format!("hidden{i}"), layer);
        }
        push_linear(&mut out, "output", &self.output);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Arc<ArrayD<F>>)> {
        let mut out = Vec::new();
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("hidden{i}"), layer);
        }
        push_linear_mut(&mut out, "output", &mut self.output);
        out
    }
}

impl<F: Scalar> ModelParams<F> {
    pub fn tensors(&self) -> Vec<(String, &Arc<ArrayD<F>>)> {
        match self {
            ModelParams::RankFormer(p) => p.tensors(),
            ModelParams::Mlp(p) => p.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Arc<ArrayD<F>>)> {
        match self {
            ModelParams::RankFormer(p) => p.tensors_mut(),
            ModelParams::Mlp(p) => p.tensors_mut(),
        }
    }
}

fn init_linear<F: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> LinearParams<F> {
    let bound = (1.0 / fan_in as f64).sqrt();
    let weight = ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| {
        F::from(rng.gen_range(-bound..bound)).unwrap()
    });
    let bias = ArrayD::zeros(IxDyn(&[fan_out]));
    LinearParams {
        weight: Arc::new(weight),
        bias: Arc::new(bias),
    }
}

fn init_layer_norm<F: Scalar>(dim: usize) -> LayerNormParams<F> {
    LayerNormParams {
        scale: Arc::new(ArrayD::from_elem(IxDyn(&[dim]), F::one())),
        shift: Arc::new(ArrayD::zeros(IxDyn(&[dim]))),
    }
}

/// Standard normal draw via Box-Muller, so initialization only depends on
/// the uniform stream.
fn normal_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Parameter initialization: weights uniform in ±sqrt(1/fan_in), biases
/// zero, CLS row normal with standard deviation 0.02. Deterministic per
/// seed.
pub fn init_params<F: Scalar>(spec: &ModelSpec, seed: u64) -> ModelParams<F> {
    let mut rng = stream_rng(seed, Stream::ParamInit, &[]);
    match spec {
        ModelSpec::RankFormer(dims) => {
            let cls = ArrayD::from_shape_fn(IxDyn(&[1, dims.d_x]), |_| {
                F::from(0.02 * normal_draw(&mut rng)).unwrap()
            });
            let layers = (0..dims.n_layers)
                .map(|_| TransformerLayerParams {
                    norm1: init_layer_norm(dims.d_x),
                    attention: AttentionParams {
                        query: init_linear(dims.d_x, dims.d_x, &mut rng),
                        key: init_linear(dims.d_x, dims.d_x, &mut rng),
                        value: init_linear(dims.d_x, dims.d_x, &mut rng),
                        output: init_linear(dims.d_x, dims.d_x, &mut rng),
                    },
                    norm2: init_layer_norm(dims.d_x),
                    ff1: init_linear(dims.d_x, dims.dim_ff, &mut rng),
                    ff2: init_linear(dims.dim_ff, dims.d_x, &mut rng),
                })
                .collect();
            ModelParams::RankFormer(RankFormerParams {
                cls: Arc::new(cls),
                layers,
                score_head: HeadParams {
                    hidden: init_linear(2 * dims.d_x, dims.head_width, &mut rng),
                    output: init_linear(dims.head_width, 1, &mut rng),
                },
                listwide_head: HeadParams {
                    hidden: init_linear(dims.d_x, dims.head_width, &mut rng),
                    output: init_linear(dims.head_width, dims.y_max as usize, &mut rng),
                },
            })
        }
        ModelSpec::Mlp(dims) => {
            let mut hidden = Vec::new();
            let mut fan_in = dims.d_x;
            for &width in &dims.hidden {
                hidden.push(init_linear(fan_in, width, &mut rng));
                fan_in = width;
            }
            ModelParams::Mlp(MlpParams {
                hidden,
                output: init_linear(fan_in, 1, &mut rng),
            })
        }
    }
}

/// A model: architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Model<F> {
    pub spec: ModelSpec,
    pub params: ModelParams<F>,
}

impl<F: Scalar> Model<F> {
    pub fn init(spec: ModelSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Model { spec, params }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.spec, &self.params) {
            (ModelSpec::RankFormer(dims), ModelParams::RankFormer(_)) => {
                if dims.d_x % dims.n_heads != 0 {
                    return Err(Error::Config(format!(
                        "d_x {} not divisible by n_heads {}",
                        dims.d_x, dims.n_heads
                    )));
                }
                Ok(())
            }
            (ModelSpec::Mlp(_), ModelParams::Mlp(_)) => Ok(()),
            _ => Err(Error::Config("model spec and params kind mismatch".into())),
        }
    }

    /// Scores every list of a split in evaluation mode (batched, order
    /// preserved).
    pub fn score_split(
        &self,
        split: &crate::dataset::Split<F>,
        batch_size: usize,
    ) -> Result<Vec<Vec<F>>> {
        let batches = crate::dataset::batch_lists(&split.lists, batch_size, None)?;
        let mut all = Vec::with_capacity(split.lists.len());
        for batch in &batches {
            let mut tape = crate::tape::Tape::new();
            let fwd = forward::batch_forward(&mut tape, self, batch, Mode::Eval, None)?;
            all.extend(fwd.scores_per_list(&tape, batch));
        }
        Ok(all)
    }
}
