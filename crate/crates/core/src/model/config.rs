use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SublayerStyle;
use crate::tensor::Activation;

/// How image and question features are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Concatenate, then self-attention encoder layers.
    Cman,
    /// Elementwise sum of length-aligned features.
    Sum,
    /// Elementwise product of length-aligned features.
    Mul,
}

/// What turns fused features into per-class logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Answer-querying decoder over learnable answer embeddings.
    Decoder,
    /// Mean-pooled fused features through one linear classifier.
    Linear,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Mul, FusionKind::Sum, FusionKind::Cman];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Cman => "cman",
            FusionKind::Sum => "sum",
            FusionKind::Mul => "mul",
        }
    }
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Decoder => "decoder",
            HeadKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cman" => Ok(FusionKind::Cman),
            "sum" => Ok(FusionKind::Sum),
            "mul" => Ok(FusionKind::Mul),
            other => Err(Error::Config(format!("unknown fusion kind {other:?}"))),
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(HeadKind::Decoder),
            "linear" => Ok(HeadKind::Linear),
            other => Err(Error::Config(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. The image/question/answer sizes are
/// normally taken from the dataset (see [`ModelConfig::fit_to_data`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of image, question and fused features.
    pub feature_dim: usize,
    /// Image regions (grid cells).
    pub num_image_tokens: usize,
    /// Width of each cell's one-hot feature vector.
    pub cell_channels: usize,
    /// Question length after padding / truncation.
    pub max_question_tokens: usize,
    pub question_vocab_size: usize,
    pub num_answer_classes: usize,
    /// Width of the candidate answer embeddings and the decoder.
    pub answer_embed_dim: usize,
    pub fusion_layers: usize,
    pub question_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub activation: Activation,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub fusion_kind: FusionKind,
    pub head_kind: HeadKind,
    /// One classifier row per answer class instead of a shared one.
    pub per_class_head: bool,
    /// Drop residual connections and normalisation from every transformer
    /// layer, leaving the bare attention / FFN composition.
    pub plain_eq2: bool,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 64,
            num_image_tokens: 16,
            cell_channels: 7,
            max_question_tokens: 8,
            question_vocab_size: 19,
            num_answer_classes: 23,
            answer_embed_dim: 1024,
            fusion_layers: 2,
            question_layers: 1,
            decoder_layers: 2,
            num_heads: 4,
            ffn_mult: 4,
            activation: Activation::Gelu,
            gamma_plus: 1.0,
            gamma_minus: 4.0,
            fusion_kind: FusionKind::Cman,
            head_kind: HeadKind::Decoder,
            per_class_head: false,
            plain_eq2: false,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.feature_dim == 0 || self.answer_embed_dim == 0 {
            return fail("feature and answer dims must be positive".into());
        }
        if self.num_heads == 0 || self.feature_dim % self.num_heads != 0 {
            return fail(format!(
                "feature_dim {} is not divisible by num_heads {}",
                self.feature_dim, self.num_heads
            ));
        }
        if self.head_kind == HeadKind::Decoder && self.answer_embed_dim % self.num_heads != 0 {
            return fail(format!(
                "answer_embed_dim {} is not divisible by num_heads {}",
                self.answer_embed_dim, self.num_heads
            ));
        }
        if self.decoder_layers == 0 {
            return fail("decoder_layers must be at least 1".into());
        }
        if self.num_answer_classes < 2 {
            return fail("at least two answer classes are required".into());
        }
        if !(self.gamma_plus >= 0.0 && self.gamma_minus >= 0.0) {
            return fail("gamma_plus and gamma_minus must be non-negative".into());
        }
        if self.max_question_tokens == 0 || self.question_vocab_size == 0 || self.cell_channels == 0
        {
            return fail(
                "question length, question vocabulary and cell channels must be positive".into(),
            );
        }
        if self.ffn_mult == 0 {
            return fail("ffn_mult must be at least 1".into());
        }
        if self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        if self.fusion_kind != FusionKind::Cman && self.num_image_tokens == 0 {
            return fail("sum/mul fusion needs at least one image token".into());
        }
        Ok(())
    }

    pub fn sublayer_style(&self) -> SublayerStyle {
        if self.plain_eq2 {
            SublayerStyle::Plain
        } else {
            SublayerStyle::PreNorm
        }
    }

    /// The reference desk-scale configuration: 64-wide features, 128-wide
    /// answer embeddings, 4 heads, two fusion and two decoder layers, ReLU
    /// feed-forwards.
    pub fn reference() -> Self {
        ModelConfig {
            answer_embed_dim: 128,
            activation: Activation::Relu,
            ..ModelConfig::default()
        }
    }
}
