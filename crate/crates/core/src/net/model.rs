use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    add, avg_pool, avg_pool_backward, conv2d, conv2d_backward, cyclic_pad, cyclic_pad_backward,
    dense, dense_backward, global_avg_pool, global_avg_pool_backward, l2_normalize,
    l2_normalize_backward, relu, relu_backward,
};
use super::{NetError, Tensor};
use crate::preprocess::{PolarImage, ANGLES, RADII};

/// Residual stages in every variant.
pub const STAGES: usize = 3;
/// Radial pooling factor between stages. The angular axis is never pooled,
/// so any integer angular shift of the input leaves the embedding unchanged.
pub const RADIAL_POOL: usize = 2;
/// Product of the angular pooling strides.
pub const ANGULAR_STRIDE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Reference,
    DoubleBlock,
    BlockDepth2,
    BlockDepth4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Reference,
        Variant::DoubleBlock,
        Variant::BlockDepth2,
        Variant::BlockDepth4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Reference => "reference",
            Variant::DoubleBlock => "double-block",
            Variant::BlockDepth2 => "block-depth2",
            Variant::BlockDepth4 => "block-depth4",
        }
    }

    pub(crate) fn code(self) -> u32 {
        self as u32
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    fn blocks_per_stage(self) -> usize {
        match self {
            Variant::DoubleBlock => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| NetError::Config(format!(
                "unknown variant {s:?} (expected reference, double-block, block-depth2 or block-depth4)"
            )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Channel width `n`, constant across stages.
    pub width: usize,
    pub embedding_dim: usize,
    /// SupCon temperature, kept with the model so checkpoints are complete.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Reference,
            width: 16,
            embedding_dim: 64,
            temperature: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.width < 1 {
            return Err(NetError::Config("width must be >= 1".into()));
        }
        if self.embedding_dim < 2 {
            return Err(NetError::Config("embedding_dim must be >= 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NetError::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
}

/// Dot product of two embeddings (their cosine similarity).
pub fn similarity(a: &Embedding, b: &Embedding) -> f64 {
    a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
struct Conv {
    name: String,
    weight: usize,
    bias: usize,
    k: usize,
}

#[derive(Debug, Clone)]
enum Skip {
    Identity,
    /// 1x1 convolution without activation.
    Projection(Conv),
}

/// `u = pre.map(|c| relu(c(x))).unwrap_or(x)`, then `relu(body(u) + skip(u))`
/// where `body` is a chain of 5x5 convolutions with ReLU between them.
#[derive(Debug, Clone)]
struct Block {
    pre: Option<Conv>,
    skip: Skip,
    body: Vec<Conv>,
}

/// Gradient buffers aligned with [`Model::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    stem: Conv,
    stages: Vec<Vec<Block>>,
    head_weight: usize,
    head_bias: usize,
}

struct Builder {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Builder {
    /// Uniform fan-in initialization with variance `gain^2 / fan_in`; zero bias.
    fn push(&mut self, name: &str, weight_shape: Vec<usize>, gain: f64) -> (usize, usize) {
        let fan_in: usize = weight_shape[1..].iter().product();
        let bound = gain * (3.0 / fan_in as f64).sqrt();
        let n: usize = weight_shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let out = weight_shape[0];
        self.params.push(Tensor::parameter(weight_shape, data).expect("positive shape"));
        self.names.push(format!("{name}.weight"));
        self.params.push(Tensor::parameter(vec![out], vec![0.0; out]).expect("positive shape"));
        self.names.push(format!("{name}.bias"));
        (self.params.len() - 2, self.params.len() - 1)
    }

    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let (weight, bias) = self.push(&name, vec![cout, cin, k, k], gain);
        Conv { name, weight, bias, k }
    }
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model, NetError> {
    config.validate()?;
    let n = config.width;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        names: Vec::new(),
        params: Vec::new(),
    };
    let stem = b.conv("stem".into(), 1, n, 5, RELU_GAIN);
    let mut stages = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let mut blocks = Vec::new();
        for i in 0..config.variant.blocks_per_stage() {
            let prefix = format!("stage{}.block{}", s + 1, i + 1);
            let (pre, skip, body_len) = match config.variant {
                Variant::BlockDepth2 => (
                    None,
                    Skip::Projection(b.conv(format!("{prefix}.skip"), n, n, 1, 1.0)),
                    2,
                ),
                Variant::BlockDepth4 => (Some(b.conv(format!("{prefix}.pre"), n, n, 1, RELU_GAIN)), Skip::Identity, 3),
                Variant::Reference | Variant::DoubleBlock => {
                    (Some(b.conv(format!("{prefix}.pre"), n, n, 1, RELU_GAIN)), Skip::Identity, 2)
                }
            };
            let body = (0..body_len)
                .map(|j| {
                    let gain = if j + 1 < body_len { RELU_GAIN } else { 1.0 };
                    b.conv(format!("{prefix}.body{}", j + 1), n, n, 5, gain)
                })
                .collect();
            blocks.push(Block { pre, skip, body });
        }
        stages.push(blocks);
    }
    let (head_weight, head_bias) = b.push("head", vec![config.embedding_dim, n], 1.0);
    Ok(Model {
        config: *config,
        names: b.names,
        params: b.params,
        stem,
        stages,
        head_weight,
        head_bias,
    })
}

/// Cached activations of one convolution: its padded input.
struct ConvTape {
    input: Tensor,
}

struct BlockTape {
    pre: Option<(ConvTape, Tensor)>,
    /// Each body conv's tape and, for all but the last, its ReLU output.
    body: Vec<(ConvTape, Option<Tensor>)>,
    skip: Option<ConvTape>,
    output: Tensor,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    stem: ConvTape,
    stem_out: Tensor,
    stages: Vec<(Vec<BlockTape>, Option<[usize; 3]>)>,
    pooled_shape: [usize; 3],
    features: Tensor,
    head_out: Tensor,
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.names
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Convolutional and dense layers on the main path; a projection inside
    /// the skip connection is not counted.
    pub fn layer_count(&self) -> usize {
        let blocks: usize = self
            .stages
            .iter()
            .flatten()
            .map(|b| usize::from(b.pre.is_some()) + b.body.len())
            .sum();
        1 + blocks + 1
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients(self.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    fn conv_forward(&self, conv: &Conv, x: &Tensor) -> Result<(Tensor, ConvTape), NetError> {
        let input = cyclic_pad(x, conv.k / 2)?;
        let y = conv2d(&input, &self.params[conv.weight], &self.params[conv.bias], 1)?;
        if !y.is_finite() {
            return Err(NetError::NonFinite {
                layer: conv.name.clone(),
            });
        }
        Ok((y, ConvTape { input }))
    }

    fn conv_backward(
        &self,
        conv: &Conv,
        tape: &ConvTape,
        grad: &Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor, NetError> {
        let g = conv2d_backward(
            &tape.input,
            &self.params[conv.weight],
            &self.params[conv.bias],
            1,
            grad,
        )?;
        add_into(&mut grads.0[conv.weight], g.kernel.data());
        add_into(&mut grads.0[conv.bias], g.bias.data());
        cyclic_pad_backward(&g.input, conv.k / 2)
    }

    fn block_forward(&self, block: &Block, x: &Tensor) -> Result<BlockTape, NetError> {
        let pre = match &block.pre {
            Some(conv) => {
                let (z, tape) = self.conv_forward(conv, x)?;
                Some((tape, relu(&z)))
            }
            None => None,
        };
        let u = pre.as_ref().map_or(x, |(_, out)| out);
        let mut body = Vec::with_capacity(block.body.len());
        let mut h = u.clone();
        for (j, conv) in block.body.iter().enumerate() {
            let (z, tape) = self.conv_forward(conv, &h)?;
            if j + 1 < block.body.len() {
                h = relu(&z);
                body.push((tape, Some(h.clone())));
            } else {
                h = z;
                body.push((tape, None));
            }
        }
        let (skipped, skip) = match &block.skip {
            Skip::Identity => (u.clone(), None),
            Skip::Projection(conv) => {
                let (z, tape) = self.conv_forward(conv, u)?;
                (z, Some(tape))
            }
        };
        let output = relu(&add(&h, &skipped)?);
        Ok(BlockTape {
            pre,
            body,
            skip,
            output,
        })
    }

    fn block_backward(
        &self,
        block: &Block,
        tape: &BlockTape,
        grad: &Tensor,
        grads: &mut Gradients,
    ) -> Result<Tensor, NetError> {
        let g_sum = relu_backward(&tape.output, grad);
        let mut g_u = match (&block.skip, &tape.skip) {
            (Skip::Projection(conv), Some(t)) => self.conv_backward(conv, t, &g_sum, grads)?,
            _ => g_sum.clone(),
        };
        let mut g = g_sum;
        for (j, conv) in block.body.iter().enumerate().rev() {
            let (conv_tape, _) = &tape.body[j];
            g = self.conv_backward(conv, conv_tape, &g, grads)?;
            if j > 0 {
                let act = tape.body[j - 1].1.as_ref().expect("inner body convs keep activations");
                g = relu_backward(act, &g);
            }
        }
        add_into(g_u.data_mut(), g.data());
        match (&block.pre, &tape.pre) {
            (Some(conv), Some((t, out))) => {
                let g_pre = relu_backward(out, &g_u);
                self.conv_backward(conv, t, &g_pre, grads)
            }
            _ => Ok(g_u),
        }
    }

    /// Forward pass on a `[1, A, R]` input, keeping activations for
    /// [`Model::backward`]. `R` must be divisible by `2^(stages-1)`.
    pub fn forward(&self, input: &Tensor) -> Result<(Embedding, Tape), NetError> {
        input.expect_rank(3, "model input")?;
        if input.shape()[0] != 1 {
            return Err(NetError::Shape(format!("model input must have 1 channel, got {:?}", input.shape())));
        }
        let (z, stem) = self.conv_forward(&self.stem, input)?;
        let stem_out = relu(&z);
        let mut x = stem_out.clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for (s, blocks) in self.stages.iter().enumerate() {
            let mut tapes = Vec::with_capacity(blocks.len());
            for block in blocks {
                let t = self.block_forward(block, &x)?;
                x = t.output.clone();
                tapes.push(t);
            }
            let pooled = if s + 1 < self.stages.len() {
                let shape = [x.shape()[0], x.shape()[1], x.shape()[2]];
                x = avg_pool(&x, ANGULAR_STRIDE, RADIAL_POOL)?;
                Some(shape)
            } else {
                None
            };
            stages.push((tapes, pooled));
        }
        let pooled_shape = [x.shape()[0], x.shape()[1], x.shape()[2]];
        let features = global_avg_pool(&x)?;
        let head_out = dense(&features, &self.params[self.head_weight], &self.params[self.head_bias])?;
        if !head_out.is_finite() {
            return Err(NetError::NonFinite { layer: "head".into() });
        }
        let embedding = l2_normalize(&head_out)?;
        Ok((
            Embedding {
                vector: embedding.into_data(),
            },
            Tape {
                stem,
                stem_out,
                stages,
                pooled_shape,
                features,
                head_out,
            },
        ))
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d embedding`,
    /// and returns `d loss / d input`.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_embedding: &[f64],
        grads: &mut Gradients,
    ) -> Result<Tensor, NetError> {
        let g = Tensor::new(vec![grad_embedding.len()], grad_embedding.to_vec())?;
        let g = l2_normalize_backward(&tape.head_out, &g)?;
        let dg = dense_backward(&tape.features, &self.params[self.head_weight], &g)?;
        add_into(&mut grads.0[self.head_weight], dg.weight.data());
        add_into(&mut grads.0[self.head_bias], dg.bias.data());
        let [_, a, r] = tape.pooled_shape;
        let mut g = global_avg_pool_backward(&dg.input, a, r)?;
        for (blocks, (tapes, pooled)) in self.stages.iter().zip(&tape.stages).rev() {
            if pooled.is_some() {
                g = avg_pool_backward(&g, ANGULAR_STRIDE, RADIAL_POOL)?;
            }
            for (block, t) in blocks.iter().zip(tapes).rev() {
                g = self.block_backward(block, t, &g, grads)?;
            }
        }
        let g = relu_backward(&tape.stem_out, &g);
        self.conv_backward(&self.stem, &tape.stem, &g, grads)
    }

    /// Embeds a polar image; invalid samples enter the network as 0.
    pub fn embed(&self, img: &PolarImage) -> Result<Embedding, NetError> {
        Ok(self.forward(&polar_input(img))?.0)
    }
}

/// The `[1, 377, 60]` network input for a polar image.
pub fn polar_input(img: &PolarImage) -> Tensor {
    Tensor::new(vec![1, ANGLES, RADII], img.values().to_vec()).expect("polar shape")
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
