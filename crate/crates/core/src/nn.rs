//! Transformer sub-layers: multi-head attention, feed-forward networks, and
//! encoder / decoder layers built from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Activation, Parameter, Tensor};

/// Anything that owns trainable parameters, visited in a fixed order.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&self) {
        for p in self.parameters() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }
}

/// Seeded parameter factory.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Parameter {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Parameter::new(name, data, shape).expect("element count matches shape")
    }

    /// Glorot-uniform `[fan_in, fan_out]` weight.
    pub fn xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize) -> Parameter {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        self.uniform(name, &[fan_in, fan_out], bound)
    }

    pub fn constant(name: impl Into<String>, shape: &[usize], value: f64) -> Parameter {
        let n = shape.iter().product();
        Parameter::new(name, vec![value; n], shape).expect("element count matches shape")
    }
}

fn check_width(op: &'static str, x: &Tensor, dim: usize) -> Result<()> {
    let (_, cols) = x.dims2(op)?;
    if cols != dim {
        return Err(Error::shape(op, x.shape(), &[x.rows(), dim]));
    }
    Ok(())
}

/// Affine map applied row-wise: `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        Linear {
            weight: init.xavier(format!("{name}.weight"), fan_in, fan_out),
            bias: bias.then(|| ParamInit::constant(format!("{name}.bias"), &[fan_out], 0.0)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.tensor())?;
        match &self.bias {
            Some(b) => y.add_row(&b.tensor()),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gain: ParamInit::constant(format!("{name}.gain"), &[dim], 1.0),
            bias: ParamInit::constant(format!("{name}.bias"), &[dim], 0.0),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain.tensor(), &self.bias.tensor(), self.eps)
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if num_heads == 0 || model_dim == 0 || model_dim % num_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} is not divisible into {num_heads} heads"
            )));
        }
        Ok(AttentionConfig {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// `MSA(query, key, value)`: per head `softmax(Q K^T / sqrt(d_k)) V`, heads
/// concatenated and projected back to the model width.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new(init: &mut ParamInit, name: &str, cfg: AttentionConfig) -> Self {
        let d = cfg.model_dim;
        MultiHeadAttention {
            cfg,
            query: Linear::new(init, &format!("{name}.wq"), d, d, false),
            key: Linear::new(init, &format!("{name}.wk"), d, d, false),
            value: Linear::new(init, &format!("{name}.wv"), d, d, false),
            output: Linear::new(init, &format!("{name}.wo"), d, d, true),
        }
    }

    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        self.forward_batched(query, key, value, 1)
    }

    /// Attention within each of `batch` equal row blocks: query block `b`
    /// only sees key/value block `b`.
    pub fn forward_batched(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        batch: usize,
    ) -> Result<Tensor> {
        let d = self.cfg.model_dim;
        check_width("multi_head_attention", query, d)?;
        check_width("multi_head_attention", key, d)?;
        check_width("multi_head_attention", value, d)?;
        if key.rows() != value.rows() {
            return Err(Error::shape(
                "multi_head_attention",
                key.shape(),
                value.shape(),
            ));
        }
        let q = self.query.forward(query)?;
        let k = self.key.forward(key)?;
        let v = self.value.forward(value)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let joined = Tensor::block_attention(&q, &k, &v, self.cfg.num_heads, batch, scale)?;
        self.output.forward(&joined)
    }
}

impl Module for MultiHeadAttention {
    fn parameters(&self) -> Vec<&Parameter> {
        [&self.query, &self.key, &self.value, &self.output]
            .into_iter()
            .flat_map(|l| l.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
        ]
        .into_iter()
        .flat_map(|l| l.parameters_mut())
        .collect()
    }
}

/// Two-layer position-wise MLP: `D -> mult*D -> D`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(
        init: &mut ParamInit,
        name: &str,
        dim: usize,
        hidden_mult: usize,
        activation: Activation,
    ) -> Self {
        let hidden = dim * hidden_mult.max(1);
        FeedForward {
            hidden: Linear::new(init, &format!("{name}.w1"), dim, hidden, true),
            output: Linear::new(init, &format!("{name}.w2"), hidden, dim, true),
            activation,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden.forward(x)?.activation(self.activation);
        self.output.forward(&h)
    }
}

impl Module for FeedForward {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = self.hidden.parameters();
        ps.extend(self.output.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.hidden.parameters_mut();
        ps.extend(self.output.parameters_mut());
        ps
    }
}

/// How sub-layers are wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SublayerStyle {
    /// `x + f(norm(x))` around every sub-layer.
    PreNorm,
    /// `f(x)` with no residual and no normalisation.
    Plain,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub dim: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub activation: Activation,
    pub style: SublayerStyle,
    pub eps: f64,
}

impl BlockConfig {
    fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.dim, self.num_heads)
    }

    fn norm(&self, name: String) -> Option<LayerNorm> {
        (self.style == SublayerStyle::PreNorm).then(|| LayerNorm::new(&name, self.dim, self.eps))
    }
}

fn sublayer(
    x: &Tensor,
    norm: Option<&LayerNorm>,
    f: impl FnOnce(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    match norm {
        Some(norm) => x.add(&f(&norm.forward(x)?)?),
        None => f(x),
    }
}

/// Self-attention followed by a feed-forward network.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub dim: usize,
    pub norm1: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub norm2: Option<LayerNorm>,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(init: &mut ParamInit, name: &str, cfg: &BlockConfig) -> Result<Self> {
        Ok(EncoderLayer {
            dim: cfg.dim,
            norm1: cfg.norm(format!("{name}.norm1")),
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg.attention()?),
            norm2: cfg.norm(format!("{name}.norm2")),
            ffn: FeedForward::new(
                init,
                &format!("{name}.ffn"),
                cfg.dim,
                cfg.ffn_mult,
                cfg.activation,
            ),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_batched(x, 1)
    }

    /// `batch` independent sequences stacked as equal row blocks.
    pub fn forward_batched(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        check_width("encoder_layer", x, self.dim)?;
        let h = sublayer(x, self.norm1.as_ref(), |t| {
            self.attn.forward_batched(t, t, t, batch)
        })?;
        sublayer(&h, self.norm2.as_ref(), |t| self.ffn.forward(t))
    }
}

impl Module for EncoderLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps: Vec<&Parameter> = self.norm1.iter().flat_map(|n| n.parameters()).collect();
        ps.extend(self.attn.parameters());
        ps.extend(self.norm2.iter().flat_map(|n| n.parameters()));
        ps.extend(self.ffn.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps: Vec<&mut Parameter> = self
            .norm1
            .iter_mut()
            .flat_map(|n| n.parameters_mut())
            .collect();
        ps.extend(self.attn.parameters_mut());
        ps.extend(self.norm2.iter_mut().flat_map(|n| n.parameters_mut()));
        ps.extend(self.ffn.parameters_mut());
        ps
    }
}

/// Self-attention over the queries, cross-attention into a memory sequence,
/// then a feed-forward network, in that order.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub dim: usize,
    pub norm1: Option<LayerNorm>,
    pub self_attn: MultiHeadAttention,
    pub norm2: Option<LayerNorm>,
    pub cross_attn: MultiHeadAttention,
    pub norm3: Option<LayerNorm>,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(init: &mut ParamInit, name: &str, cfg: &BlockConfig) -> Result<Self> {
        Ok(DecoderLayer {
            dim: cfg.dim,
            norm1: cfg.norm(format!("{name}.norm1")),
            self_attn: MultiHeadAttention::new(
                init,
                &format!("{name}.self_attn"),
                cfg.attention()?,
            ),
            norm2: cfg.norm(format!("{name}.norm2")),
            cross_attn: MultiHeadAttention::new(
                init,
                &format!("{name}.cross_attn"),
                cfg.attention()?,
            ),
            norm3: cfg.norm(format!("{name}.norm3")),
            ffn: FeedForward::new(
                init,
                &format!("{name}.ffn"),
                cfg.dim,
                cfg.ffn_mult,
                cfg.activation,
            ),
        })
    }

    pub fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<Tensor> {
        self.forward_batched(queries, memory, 1)
    }

    /// Query block `b` attends to itself and to memory block `b` only.
    pub fn forward_batched(
        &self,
        queries: &Tensor,
        memory: &Tensor,
        batch: usize,
    ) -> Result<Tensor> {
        check_width("decoder_layer", queries, self.dim)?;
        check_width("decoder_layer", memory, self.dim)?;
        let a = sublayer(queries, self.norm1.as_ref(), |t| {
            self.self_attn.forward_batched(t, t, t, batch)
        })?;
        let a = sublayer(&a, self.norm2.as_ref(), |t| {
            self.cross_attn.forward_batched(t, memory, memory, batch)
        })?;
        sublayer(&a, self.norm3.as_ref(), |t| self.ffn.forward(t))
    }
}

impl Module for DecoderLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps: Vec<&Parameter> = self.norm1.iter().flat_map(|n| n.parameters()).collect();
        ps.extend(self.self_attn.parameters());
        ps.extend(self.norm2.iter().flat_map(|n| n.parameters()));
        ps.extend(self.cross_attn.parameters());
        ps.extend(self.norm3.iter().flat_map(|n| n.parameters()));
        ps.extend(self.ffn.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps: Vec<&mut Parameter> = self
            .norm1
            .iter_mut()
            .flat_map(|n| n.parameters_mut())
            .collect();
        ps.extend(self.self_attn.parameters_mut());
        ps.extend(self.norm2.iter_mut().flat_map(|n| n.parameters_mut()));
        ps.extend(self.cross_attn.parameters_mut());
        ps.extend(self.norm3.iter_mut().flat_map(|n| n.parameters_mut()));
        ps.extend(self.ffn.parameters_mut());
        ps
    }
}

impl<T: Module> Module for Vec<T> {
    fn parameters(&self) -> Vec<&Parameter> {
        self.iter().flat_map(|m| m.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().flat_map(|m| m.parameters_mut()).collect()
    }
}
