use super::FusionKind;
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, EncoderLayer, LayerNorm, Linear, Module, ParamInit, SublayerStyle};
use crate::tensor::{Parameter, Tensor};

/// Cross-modality attention: `F_c = [F_i; F_q]`, self-attention encoder
/// layers over the joint sequence, then `F_f = F_att W_f + b_f`.
#[derive(Debug, Clone)]
pub struct CmanFusion {
    pub layers: Vec<EncoderLayer>,
    /// Final normalisation of the pre-norm residual stream.
    pub norm: Option<LayerNorm>,
    pub out: Linear,
}

impl CmanFusion {
    pub fn new(init: &mut ParamInit, layers: usize, block: &BlockConfig) -> Result<Self> {
        Ok(CmanFusion {
            layers: (0..layers)
                .map(|i| EncoderLayer::new(init, &format!("fusion.layers.{i}"), block))
                .collect::<Result<_>>()?,
            norm: (block.style == SublayerStyle::PreNorm)
                .then(|| LayerNorm::new("fusion.norm", block.dim, block.eps)),
            out: Linear::new(init, "fusion.out", block.dim, block.dim, true),
        })
    }

    pub fn forward(&self, image: &Tensor, question: &Tensor) -> Result<Tensor> {
        self.forward_batched(image, question, 1)
    }

    pub fn forward_batched(
        &self,
        image: &Tensor,
        question: &Tensor,
        batch: usize,
    ) -> Result<Tensor> {
        let mut x = image.interleave_rows(question, batch)?;
        for layer in &self.layers {
            x = layer.forward_batched(&x, batch)?;
        }
        if let Some(norm) = &self.norm {
            x = norm.forward(&x)?;
        }
        self.out.forward(&x)
    }
}

impl Module for CmanFusion {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut ps = self.layers.parameters();
        ps.extend(self.norm.iter().flat_map(|n| n.parameters()));
        ps.extend(self.out.parameters());
        ps
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.layers.parameters_mut();
        ps.extend(self.norm.iter_mut().flat_map(|n| n.parameters_mut()));
        ps.extend(self.out.parameters_mut());
        ps
    }
}

/// Elementwise sum / product of length-aligned image and question features,
/// followed by an affine projection.
#[derive(Debug, Clone)]
pub struct BaselineFusion {
    pub kind: FusionKind,
    pub out: Linear,
}

impl BaselineFusion {
    pub fn new(init: &mut ParamInit, kind: FusionKind, dim: usize) -> Result<Self> {
        if kind == FusionKind::Cman {
            return Err(Error::Config("baseline fusion must be sum or mul".into()));
        }
        Ok(BaselineFusion {
            kind,
            out: Linear::new(init, "fusion.out", dim, dim, true),
        })
    }

    /// Output has `min(N, M)` rows: the longer input is mean-pooled down.
    pub fn forward(&self, image: &Tensor, question: &Tensor) -> Result<Tensor> {
        self.forward_batched(image, question, 1)
    }

    pub fn forward_batched(
        &self,
        image: &Tensor,
        question: &Tensor,
        batch: usize,
    ) -> Result<Tensor> {
        let (rows_i, d) = image.dims2("baseline_fuse")?;
        let (rows_q, dq) = question.dims2("baseline_fuse")?;
        if batch == 0 || rows_i % batch != 0 || rows_q % batch != 0 {
            return Err(Error::invalid_shape(
                "baseline_fuse",
                &[rows_i, rows_q],
                format!("not {batch} equal blocks"),
            ));
        }
        let (n, m) = (rows_i / batch, rows_q / batch);
        if d != dq {
            return Err(Error::shape(
                "baseline_fuse",
                image.shape(),
                question.shape(),
            ));
        }
        if n == 0 || m == 0 {
            return Err(Error::invalid_shape(
                "baseline_fuse",
                &[n, m],
                "both modalities need at least one row",
            ));
        }
        let (a, b) = if n >= m {
            (pool_blocks(image, m, batch)?, question.clone())
        } else {
            (image.clone(), pool_blocks(question, n, batch)?)
        };
        let joined = match self.kind {
            FusionKind::Sum => a.add(&b)?,
            FusionKind::Mul => a.mul(&b)?,
            FusionKind::Cman => unreachable!("rejected in new"),
        };
        self.out.forward(&joined)
    }
}

impl Module for BaselineFusion {
    fn parameters(&self) -> Vec<&Parameter> {
        self.out.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.out.parameters_mut()
    }
}

/// Adaptive average pooling of `x: [L, D]` to `[S, D]`: output row `i`
/// averages input rows `floor(i L / S) .. ceil((i + 1) L / S)`.
pub fn pool_rows(x: &Tensor, target: usize) -> Result<Tensor> {
    pool_blocks(x, target, 1)
}

/// [`pool_rows`] applied to each of `batch` equal row blocks.
pub fn pool_blocks(x: &Tensor, target: usize, batch: usize) -> Result<Tensor> {
    let len = if batch == 0 { 0 } else { x.rows() / batch };
    if target == len {
        return Ok(x.clone());
    }
    let mut weights = vec![0.0; target * len];
    for i in 0..target {
        let start = i * len / target;
        let end = ((i + 1) * len).div_ceil(target);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            weights[i * len + j] = w;
        }
    }
    x.block_left_mul(&weights, target, batch)
}

#[derive(Debug, Clone)]
pub enum Fusion {
    Cman(CmanFusion),
    Baseline(BaselineFusion),
}

impl Fusion {
    pub fn forward(&self, image: &Tensor, question: &Tensor) -> Result<Tensor> {
        self.forward_batched(image, question, 1)
    }

    pub fn forward_batched(
        &self,
        image: &Tensor,
        question: &Tensor,
        batch: usize,
    ) -> Result<Tensor> {
        match self {
            Fusion::Cman(f) => f.forward_batched(image, question, batch),
            Fusion::Baseline(f) => f.forward_batched(image, question, batch),
        }
    }
}

impl Module for Fusion {
    fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Fusion::Cman(f) => f.parameters(),
            Fusion::Baseline(f) => f.parameters(),
        }
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Fusion::Cman(f) => f.parameters_mut(),
            Fusion::Baseline(f) => f.parameters_mut(),
        }
    }
}
