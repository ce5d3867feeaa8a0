use crate::error::{Error, Result};
use crate::nn::{BlockConfig, EncoderLayer, Linear, Module, ParamInit};
use crate::tensor::{Parameter, Tensor};

const EMBED_BOUND: f64 = 0.5;
const POS_BOUND: f64 = 0.1;

/// Per-cell affine embedding plus a learned position per cell:
/// `F_i = cells · W_i + b_i + P_i`.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub proj: Linear,
    pub pos: Parameter,
}

impl ImageEncoder {
    pub fn new(init: &mut ParamInit, cells: usize, channels: usize, dim: usize) -> Self {
        ImageEncoder {
            proj: Linear::new(init, "image.proj", channels, dim, true),
            pos: init.uniform("image.pos", &[cells, dim], POS_BOUND),
        }
    }

    /// `[N, channels]` cell features to `[N, D]`.
    pub fn forward(&self, cells: &Tensor) -> Result<Tensor> {
        self.forward_batched(cells, 1)
    }

    /// `batch` images stacked as `[batch * N, channels]`.
    pub fn forward_batched(&self, cells: &Tensor, batch: usize) -> Result<Tensor> {
        let expected = batch * self.pos.shape()[0];
        let (rows, cols) = cells.dims2("encode_image")?;
        if rows != expected || cols != self.proj.in_dim() {
            return Err(Error::shape(
                "encode_image",
                cells.shape(),
                &[expected, self.proj.in_dim()],
            ));
        }
        self.proj
            .forward(cells)?
            .add(&self.pos.tensor().tile_rows(batch)?)
    }
}

impl Module for ImageEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = self.proj.parameters();
        ps.push(&self.pos);
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.proj.parameters_mut();
        ps.push(&mut self.pos);
        ps
    }
}

/// Token embedding plus learned positions, then a small encoder stack.
#[derive(Debug, Clone)]
pub struct QuestionEncoder {
    pub embed: Parameter,
    pub pos: Parameter,
    pub layers: Vec<EncoderLayer>,
}

impl QuestionEncoder {
    pub fn new(
        init: &mut ParamInit,
        vocab: usize,
        max_len: usize,
        layers: usize,
        block: &BlockConfig,
    ) -> Result<Self> {
        Ok(QuestionEncoder {
            embed: init.uniform("question.embed", &[vocab, block.dim], EMBED_BOUND),
            pos: init.uniform("question.pos", &[max_len, block.dim], POS_BOUND),
            layers: (0..layers)
                .map(|i| EncoderLayer::new(init, &format!("question.layers.{i}"), block))
                .collect::<Result<_>>()?,
        })
    }

    /// Exactly `max_question_tokens` ids (already padded) to `[M, D]`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_batched(tokens, 1)
    }

    /// `batch` padded questions laid end to end.
    pub fn forward_batched(&self, tokens: &[usize], batch: usize) -> Result<Tensor> {
        let max_len = self.pos.shape()[0];
        if tokens.len() != batch * max_len {
            return Err(Error::invalid_shape(
                "encode_question",
                &[tokens.len()],
                format!("expected {batch} x {max_len} padded token ids"),
            ));
        }
        let pos = self.pos.tensor().tile_rows(batch)?;
        let mut x = self.embed.tensor().gather_rows(tokens)?.add(&pos)?;
        for layer in &self.layers {
            x = layer.forward_batched(&x, batch)?;
        }
        Ok(x)
    }
}

impl Module for QuestionEncoder {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = vec![&self.embed, &self.pos];
        ps.extend(self.layers.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = vec![&mut self.embed, &mut self.pos];
        ps.extend(self.layers.parameters_mut());
        ps
    }
}
