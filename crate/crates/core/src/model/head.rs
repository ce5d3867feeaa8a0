use crate::error::{Error, Result};
use crate::nn::{BlockConfig, DecoderLayer, LayerNorm, Linear, Module, ParamInit, SublayerStyle};
use crate::tensor::{Parameter, Tensor};

const ANSWER_BOUND: f64 = 0.5;

/// Scores each refined answer embedding: `logit_c = A_L[c] · w + b`.
#[derive(Debug, Clone)]
pub enum Classifier {
    /// One `[D_a, 1]` weight and a scalar bias shared by every class.
    Shared { weight: Parameter, bias: Parameter },
    /// A `[C, D_a]` weight row and a bias per class.
    PerClass { weight: Parameter, bias: Parameter },
}

impl Classifier {
    pub fn new(init: &mut ParamInit, classes: usize, dim: usize, per_class: bool) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        if per_class {
            Classifier::PerClass {
                weight: init.uniform("head.weight", &[classes, dim], bound),
                bias: ParamInit::constant("head.bias", &[classes], 0.0),
            }
        } else {
            Classifier::Shared {
                weight: init.uniform("head.weight", &[dim, 1], bound),
                bias: ParamInit::constant("head.bias", &[1], 0.0),
            }
        }
    }

    /// `[C, D_a]` to `[C]` logits.
    pub fn forward(&self, a: &Tensor) -> Result<Tensor> {
        self.forward_batched(a, 1)?.reshape(&[a.rows()])
    }

    /// `[batch * C, D_a]` to `[batch, C]` logits.
    pub fn forward_batched(&self, a: &Tensor, batch: usize) -> Result<Tensor> {
        let classes = if batch == 0 { 0 } else { a.rows() / batch };
        match self {
            Classifier::Shared { weight, bias } => a
                .matmul(&weight.tensor())?
                .add_row(&bias.tensor())?
                .reshape(&[batch, classes]),
            Classifier::PerClass { weight, bias } => a
                .mul(&weight.tensor().tile_rows(batch)?)?
                .sum_cols()?
                .reshape(&[batch, classes])?
                .add_row(&bias.tensor()),
        }
    }
}

impl Module for Classifier {
    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Classifier::Shared { weight, bias } | Classifier::PerClass { weight, bias } => {
                vec![weight, bias]
            }
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Classifier::Shared { weight, bias } | Classifier::PerClass { weight, bias } => {
                vec![weight, bias]
            }
        }
    }
}

/// Learnable candidate answer embeddings refined by decoder layers that
/// cross-attend into the fused features, then scored per class.
#[derive(Debug, Clone)]
pub struct AnswerDecoder {
    /// `[C, D_a]`, one row per answer class.
    pub answers: Parameter,
    /// Maps fused features to `D_a` when the widths differ.
    pub memory_proj: Option<Linear>,
    pub layers: Vec<DecoderLayer>,
    pub norm: Option<LayerNorm>,
    pub classifier: Classifier,
}

impl AnswerDecoder {
    pub fn new(
        init: &mut ParamInit,
        classes: usize,
        fused_dim: usize,
        layers: usize,
        block: &BlockConfig,
        per_class: bool,
    ) -> Result<Self> {
        let dim = block.dim;
        Ok(AnswerDecoder {
            answers: init.uniform("decoder.answers", &[classes, dim], ANSWER_BOUND),
            memory_proj: (fused_dim != dim)
                .then(|| Linear::new(init, "decoder.memory_proj", fused_dim, dim, true)),
            layers: (0..layers)
                .map(|i| DecoderLayer::new(init, &format!("decoder.layers.{i}"), block))
                .collect::<Result<_>>()?,
            norm: (block.style == SublayerStyle::PreNorm)
                .then(|| LayerNorm::new("decoder.norm", dim, block.eps)),
            classifier: Classifier::new(init, classes, dim, per_class),
        })
    }

    /// Refined embeddings `A_L`, `[C, D_a]`.
    pub fn decode(&self, fused: &Tensor) -> Result<Tensor> {
        self.decode_batched(fused, 1)
    }

    /// `[batch * C, D_a]`; every sample starts from the same answer rows.
    pub fn decode_batched(&self, fused: &Tensor, batch: usize) -> Result<Tensor> {
        let memory = match &self.memory_proj {
            Some(proj) => proj.forward(fused)?,
            None => fused.clone(),
        };
        let mut a = self.answers.tensor().tile_rows(batch)?;
        for layer in &self.layers {
            a = layer.forward_batched(&a, &memory, batch)?;
        }
        match &self.norm {
            Some(norm) => norm.forward(&a),
            None => Ok(a),
        }
    }

    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        self.classifier.forward(&self.decode(fused)?)
    }

    pub fn forward_batched(&self, fused: &Tensor, batch: usize) -> Result<Tensor> {
        self.classifier
            .forward_batched(&self.decode_batched(fused, batch)?, batch)
    }
}

impl Module for AnswerDecoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = vec![&self.answers];
        ps.extend(self.memory_proj.iter().flat_map(|l| l.parameters()));
        ps.extend(self.layers.parameters());
        ps.extend(self.norm.iter().flat_map(|n| n.parameters()));
        ps.extend(self.classifier.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = vec![&mut self.answers];
        ps.extend(self.memory_proj.iter_mut().flat_map(|l| l.parameters_mut()));
        ps.extend(self.layers.parameters_mut());
        ps.extend(self.norm.iter_mut().flat_map(|n| n.parameters_mut()));
        ps.extend(self.classifier.parameters_mut());
        ps
    }
}

/// Mean-pooled fused features through one affine map to `C` logits.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub proj: Linear,
}

impl LinearHead {
    pub fn new(init: &mut ParamInit, fused_dim: usize, classes: usize) -> Self {
        LinearHead {
            proj: Linear::new(init, "head.linear", fused_dim, classes, true),
        }
    }

    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        self.forward_batched(fused, 1)?
            .reshape(&[self.proj.out_dim()])
    }

    /// Mean over each sample's block of fused rows, `[batch, C]`.
    pub fn forward_batched(&self, fused: &Tensor, batch: usize) -> Result<Tensor> {
        let rows = if batch == 0 { 0 } else { fused.rows() / batch };
        if rows == 0 {
            return Err(Error::invalid_shape(
                "mean_rows",
                fused.shape(),
                "no rows to average",
            ));
        }
        let pooled = fused.block_left_mul(&vec![1.0 / rows as f64; rows], 1, batch)?;
        self.proj.forward(&pooled)
    }
}

impl Module for LinearHead {
    fn parameters(&self) -> Vec<&Parameter> {
        self.proj.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.proj.parameters_mut()
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Decoder(AnswerDecoder),
    Linear(LinearHead),
}

impl Head {
    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        match self {
            Head::Decoder(h) => h.forward(fused),
            Head::Linear(h) => h.forward(fused),
        }
    }

    pub fn forward_batched(&self, fused: &Tensor, batch: usize) -> Result<Tensor> {
        match self {
            Head::Decoder(h) => h.forward_batched(fused, batch),
            Head::Linear(h) => h.forward_batched(fused, batch),
        }
    }
}

impl Module for Head {
    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Head::Decoder(h) => h.parameters(),
            Head::Linear(h) => h.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Head::Decoder(h) => h.parameters_mut(),
            Head::Linear(h) => h.parameters_mut(),
        }
    }
}
