//! The end-to-end answer-querying model.
//!
//! ```text
//! cells ─ ImageEncoder ──┐
//!                        ├─ Fusion ─ Head ─ logits[C] ─ sigmoid ─ probs
//! tokens ─ QuestionEncoder┘
//! ```

mod config;
mod encoders;
mod fusion;
mod head;
mod loss;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedSample, QuestionType, NO, YES};
use crate::error::Result;
use crate::nn::{BlockConfig, Module, ParamInit};
use crate::tensor::{no_grad, Parameter, Tensor};

pub use config::{FusionKind, HeadKind, ModelConfig};
pub use encoders::{ImageEncoder, QuestionEncoder};
pub use fusion::{pool_rows, BaselineFusion, CmanFusion, Fusion};
pub use head::{AnswerDecoder, Classifier, Head, LinearHead};
pub use loss::{asymmetric_loss, one_hot, LOG_CLAMP};

/// How a class is picked from the per-class probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerSelection {
    /// Closed questions choose between `yes` / `no`; open questions among
    /// the remaining classes.
    #[default]
    ByQuestionType,
    /// Plain argmax over all classes.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    /// Argmax over all classes, ties to the lowest index.
    pub chosen_class: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = logits
            .iter()
            .map(|&z| crate::tensor::Activation::Sigmoid.apply(z))
            .collect();
        let chosen_class = argmax(&logits, 0..logits.len());
        Prediction {
            probs,
            logits,
            chosen_class,
        }
    }

    pub fn select(&self, qtype: QuestionType, mode: AnswerSelection) -> usize {
        match (mode, qtype) {
            (AnswerSelection::Global, _) => self.chosen_class,
            (AnswerSelection::ByQuestionType, QuestionType::Closed) => {
                argmax(&self.logits, YES..NO + 1)
            }
            (AnswerSelection::ByQuestionType, QuestionType::Open) => {
                argmax(&self.logits, NO + 1..self.logits.len())
            }
        }
    }
}

/// Sigmoid is strictly increasing, so the argmax is taken on logits; this
/// also keeps distinct scores distinct where probabilities round to 1.
fn argmax(values: &[f64], range: std::ops::Range<usize>) -> usize {
    let mut best = range.start;
    for i in range {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Stacks cell features row-wise and concatenates token ids.
fn stack_samples(samples: &[&EncodedSample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples
        .first()
        .ok_or_else(|| crate::Error::invalid_shape("forward", &[0], "empty batch"))?;
    let (rows, cols) = first.image.dims2("forward")?;
    let mut cells = Vec::with_capacity(samples.len() * rows * cols);
    let mut tokens = Vec::with_capacity(samples.len() * first.tokens.len());
    for s in samples {
        if s.image.shape() != first.image.shape() {
            return Err(crate::Error::shape(
                "forward",
                first.image.shape(),
                s.image.shape(),
            ));
        }
        cells.extend_from_slice(s.image.data());
        tokens.extend_from_slice(&s.tokens);
    }
    Ok((Tensor::new(cells, &[samples.len() * rows, cols])?, tokens))
}

#[derive(Debug, Clone)]
pub struct Q2ATransformer {
    config: ModelConfig,
    pub image: ImageEncoder,
    pub question: QuestionEncoder,
    pub fusion: Fusion,
    pub head: Head,
}

impl Q2ATransformer {
    /// Builds and randomly initialises a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(config.seed);
        let block = |dim| BlockConfig {
            dim,
            num_heads: config.num_heads,
            ffn_mult: config.ffn_mult,
            activation: config.activation,
            style: config.sublayer_style(),
            eps: config.layer_norm_eps,
        };
        let d = config.feature_dim;
        let image = ImageEncoder::new(&mut init, config.num_image_tokens, config.cell_channels, d);
        let question = QuestionEncoder::new(
            &mut init,
            config.question_vocab_size,
            config.max_question_tokens,
            config.question_layers,
            &block(d),
        )?;
        let fusion = match config.fusion_kind {
            FusionKind::Cman => {
                Fusion::Cman(CmanFusion::new(&mut init, config.fusion_layers, &block(d))?)
            }
            kind => Fusion::Baseline(BaselineFusion::new(&mut init, kind, d)?),
        };
        let head = match config.head_kind {
            HeadKind::Decoder => Head::Decoder(AnswerDecoder::new(
                &mut init,
                config.num_answer_classes,
                d,
                config.decoder_layers,
                &block(config.answer_embed_dim),
                config.per_class_head,
            )?),
            HeadKind::Linear => {
                Head::Linear(LinearHead::new(&mut init, d, config.num_answer_classes))
            }
        };
        Ok(Q2ATransformer {
            config,
            image,
            question,
            fusion,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fused features `F_f`.
    pub fn fuse(&self, cells: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        self.fuse_batched(cells, tokens, 1)
    }

    /// Fused features of `batch` stacked samples, one row block each.
    pub fn fuse_batched(&self, cells: &Tensor, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let f_i = self.image.forward_batched(cells, batch)?;
        let f_q = self.question.forward_batched(tokens, batch)?;
        self.fusion.forward_batched(&f_i, &f_q, batch)
    }

    /// Per-class logits, `[C]`.
    pub fn forward(&self, cells: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        self.forward_batched(cells, tokens, 1)?
            .reshape(&[self.config.num_answer_classes])
    }

    /// `[batch, C]` logits for `batch` samples whose cell features are
    /// stacked row-wise and whose padded token ids are laid end to end.
    /// Row `b` equals `forward` on sample `b` alone up to rounding.
    pub fn forward_batched(
        &self,
        cells: &Tensor,
        tokens: &[usize],
        batch: usize,
    ) -> Result<Tensor> {
        self.head
            .forward_batched(&self.fuse_batched(cells, tokens, batch)?, batch)
    }

    fn forward_samples(&self, samples: &[&EncodedSample]) -> Result<Tensor> {
        let (cells, tokens) = stack_samples(samples)?;
        self.forward_batched(&cells, &tokens, samples.len())
    }

    /// Loss of one sample, and its per-class probabilities.
    pub fn loss(&self, sample: &EncodedSample) -> Result<(Tensor, Tensor)> {
        let (loss, probs) = self.batch_loss(&[sample])?;
        Ok((loss, probs.reshape(&[self.config.num_answer_classes])?))
    }

    /// Mean loss over a minibatch and the `[batch, C]` probabilities.
    pub fn batch_loss(&self, samples: &[&EncodedSample]) -> Result<(Tensor, Tensor)> {
        let probs = self.forward_samples(samples)?.sigmoid();
        let classes = self.config.num_answer_classes;
        let targets: Vec<f64> = samples
            .iter()
            .flat_map(|s| one_hot(s.answer, classes))
            .collect();
        let loss = asymmetric_loss(
            &probs,
            &targets,
            self.config.gamma_plus,
            self.config.gamma_minus,
        )?;
        Ok((loss, probs))
    }

    pub fn predict(&self, sample: &EncodedSample) -> Result<Prediction> {
        Ok(self.predict_batch(&[sample])?.remove(0))
    }

    pub fn predict_batch(&self, samples: &[&EncodedSample]) -> Result<Vec<Prediction>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let logits = no_grad(|| self.forward_samples(samples))?;
        let classes = self.config.num_answer_classes;
        Ok(logits
            .data()
            .chunks_exact(classes)
            .map(|row| Prediction::from_logits(row.to_vec()))
            .collect())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters()
            .iter()
            .map(|p| p.name().to_string())
            .collect()
    }
}

impl Module for Q2ATransformer {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = self.image.parameters();
        ps.extend(self.question.parameters());
        ps.extend(self.fusion.parameters());
        ps.extend(self.head.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.image.parameters_mut();
        ps.extend(self.question.parameters_mut());
        ps.extend(self.fusion.parameters_mut());
        ps.extend(self.head.parameters_mut());
        ps
    }
}
