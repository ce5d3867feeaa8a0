//! Explicit-loop reference for the residual-free model: image/question
//! encoders, concatenation + self-attention fusion, answer-query decoder
//! layers and the sigmoid classifier. Shares no code with the tensor engine;
//! it reads parameter values by name and uses nested loops only.
#![allow(dead_code)]

use std::collections::HashMap;

use q2a::model::{ModelConfig, Q2ATransformer};
use q2a::nn::Module;

type Mat = Vec<Vec<f64>>;

pub struct Weights(HashMap<String, (Vec<usize>, Vec<f64>)>);

impl Weights {
    pub fn of(model: &Q2ATransformer) -> Self {
        Weights(
            model
                .parameters()
                .iter()
                .map(|p| {
                    (
                        p.name().to_string(),
                        (p.shape().to_vec(), p.data().to_vec()),
                    )
                })
                .collect(),
        )
    }

    fn mat(&self, name: &str) -> Mat {
        let (shape, data) = self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        let cols = *shape.last().unwrap();
        data.chunks(cols).map(|r| r.to_vec()).collect()
    }

    fn vec(&self, name: &str) -> Vec<f64> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
            .1
            .clone()
    }

    fn has(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn affine(x: &Mat, w: &Weights, name: &str) -> Mat {
    let mut y = matmul(x, &w.mat(&format!("{name}.weight")));
    let bias = format!("{name}.bias");
    if w.has(&bias) {
        let b = w.vec(&bias);
        for row in &mut y {
            for (v, bj) in row.iter_mut().zip(&b) {
                *v += bj;
            }
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(q_in: &Mat, kv_in: &Mat, w: &Weights, name: &str, heads: usize) -> Mat {
    let q = affine(q_in, w, &format!("{name}.wq"));
    let k = affine(kv_in, w, &format!("{name}.wk"));
    let v = affine(kv_in, w, &format!("{name}.wv"));
    let d = q[0].len();
    let dk = d / heads;
    let mut joined = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let off = h * dk;
        for i in 0..q.len() {
            let mut scores = vec![0.0; k.len()];
            for j in 0..k.len() {
                let mut s = 0.0;
                for t in 0..dk {
                    s += q[i][off + t] * k[j][off + t];
                }
                scores[j] = s / (dk as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for t in 0..dk {
                let mut acc = 0.0;
                for j in 0..k.len() {
                    acc += exps[j] / total * v[j][off + t];
                }
                joined[i][off + t] = acc;
            }
        }
    }
    affine(&joined, w, &format!("{name}.wo"))
}

fn ffn(x: &Mat, w: &Weights, name: &str) -> Mat {
    let mut h = affine(x, w, &format!("{name}.w1"));
    for row in &mut h {
        for v in row.iter_mut() {
            *v = gelu(*v);
        }
    }
    affine(&h, w, &format!("{name}.w2"))
}

fn encoder_layer(x: &Mat, w: &Weights, name: &str, heads: usize) -> Mat {
    let a = attention(x, x, w, &format!("{name}.attn"), heads);
    ffn(&a, w, &format!("{name}.ffn"))
}

fn decoder_layer(a: &Mat, memory: &Mat, w: &Weights, name: &str, heads: usize) -> Mat {
    let a = attention(a, a, w, &format!("{name}.self_attn"), heads);
    let a = attention(&a, memory, w, &format!("{name}.cross_attn"), heads);
    ffn(&a, w, &format!("{name}.ffn"))
}

/// Per-class probabilities for one sample of a `plain_eq2`, cman + decoder,
/// shared-classifier, GELU model.
pub fn plain_probs(cfg: &ModelConfig, w: &Weights, cells: &Mat, tokens: &[usize]) -> Vec<f64> {
    let heads = cfg.num_heads;

    let mut f_i = affine(cells, w, "image.proj");
    let pos = w.mat("image.pos");
    for (row, p) in f_i.iter_mut().zip(&pos) {
        for (v, pj) in row.iter_mut().zip(p) {
            *v += pj;
        }
    }

    let embed = w.mat("question.embed");
    let qpos = w.mat("question.pos");
    let mut f_q: Mat = tokens
        .iter()
        .zip(&qpos)
        .map(|(&t, p)| embed[t].iter().zip(p).map(|(e, p)| e + p).collect())
        .collect();
    for l in 0..cfg.question_layers {
        f_q = encoder_layer(&f_q, w, &format!("question.layers.{l}"), heads);
    }

    let mut f_c = f_i;
    f_c.extend(f_q);
    for l in 0..cfg.fusion_layers {
        f_c = encoder_layer(&f_c, w, &format!("fusion.layers.{l}"), heads);
    }
    let mut memory = affine(&f_c, w, "fusion.out");
    if w.has("decoder.memory_proj.weight") {
        memory = affine(&memory, w, "decoder.memory_proj");
    }

    let mut a = w.mat("decoder.answers");
    for l in 0..cfg.decoder_layers {
        a = decoder_layer(&a, &memory, w, &format!("decoder.layers.{l}"), heads);
    }

    let head_w = w.vec("head.weight");
    let head_b = w.vec("head.bias")[0];
    a.iter()
        .map(|row| {
            let z: f64 = row.iter().zip(&head_w).map(|(x, y)| x * y).sum::<f64>() + head_b;
            1.0 / (1.0 + (-z).exp())
        })
        .collect()
}
