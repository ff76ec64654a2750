use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.max_seq_len == 0
        {
            return bad("vocab_size, d_model, n_layers and max_seq_len must be positive");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_mlp == 0 {
            return bad("d_mlp must be at least 1");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total MLP neurons across all layers.
    pub fn n_neurons(&self) -> usize {
        self.n_layers * self.d_mlp
    }

    /// Length of the flattened classification-head parameter vector.
    pub fn head_param_len(&self) -> usize {
        self.n_classes * (self.d_model + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Mat,
    pub ln1_bias: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub ln2_gain: Mat,
    pub ln2_bias: Mat,
    /// `[d_model × d_mlp]`
    pub w_in: Mat,
    pub b_in: Mat,
    /// `[d_mlp × d_model]`
    pub w_out: Mat,
    pub b_out: Mat,
}

/// All weights of the classifier. Projection matrices are stored
/// `[in × out]` and applied to row vectors; the head is stored
/// `[n_classes × d_model]`, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Mat,
    pub lnf_bias: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
}

impl Parameters {
    /// Every tensor filled with zeros, shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = || LayerParams {
            ln1_gain: Mat::zeros(1, d),
            ln1_bias: Mat::zeros(1, d),
            w_q: Mat::zeros(d, d),
            w_k: Mat::zeros(d, d),
            w_v: Mat::zeros(d, d),
            w_o: Mat::zeros(d, d),
            ln2_gain: Mat::zeros(1, d),
            ln2_bias: Mat::zeros(1, d),
            w_in: Mat::zeros(d, config.d_mlp),
            b_in: Mat::zeros(1, config.d_mlp),
            w_out: Mat::zeros(config.d_mlp, d),
            b_out: Mat::zeros(1, d),
        };
        Self {
            config: config.clone(),
            tok_emb: Mat::zeros(config.vocab_size, d),
            pos_emb: Mat::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| layer()).collect(),
            lnf_gain: Mat::zeros(1, d),
            lnf_bias: Mat::zeros(1, d),
            head_w: Mat::zeros(config.n_classes, d),
            head_b: Mat::zeros(1, config.n_classes),
        }
    }

    /// Canonical tensor order, shared by checkpoints and the optimizer.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, p) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("ln1_gain", &p.ln1_gain),
                ("ln1_bias", &p.ln1_bias),
                ("w_q", &p.w_q),
                ("w_k", &p.w_k),
                ("w_v", &p.w_v),
                ("w_o", &p.w_o),
                ("ln2_gain", &p.ln2_gain),
                ("ln2_bias", &p.ln2_bias),
                ("w_in", &p.w_in),
                ("b_in", &p.b_in),
                ("w_out", &p.w_out),
                ("b_out", &p.b_out),
            ] {
                out.push((format!("layers.{l}.{name}"), m));
            }
        }
        out.push(("lnf_gain".to_string(), &self.lnf_gain));
        out.push(("lnf_bias".to_string(), &self.lnf_bias));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for p in &mut self.layers {
            out.extend([
                &mut p.ln1_gain,
                &mut p.ln1_bias,
                &mut p.w_q,
                &mut p.w_k,
                &mut p.w_v,
                &mut p.w_o,
                &mut p.ln2_gain,
                &mut p.ln2_bias,
                &mut p.w_in,
                &mut p.b_in,
                &mut p.w_out,
                &mut p.b_out,
            ]);
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Flattened head parameters: for each class, its weight row then its bias.
    pub fn head_flat(&self) -> Vec<f64> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(self.config.head_param_len());
        for c in 0..self.config.n_classes {
            out.extend_from_slice(self.head_w.row(c));
            out.push(self.head_b.data[c]);
        }
        debug_assert_eq!(out.len(), self.config.n_classes * (d + 1));
        out
    }

    pub fn set_head_flat(&mut self, flat: &[f64]) {
        let d = self.config.d_model;
        for c in 0..self.config.n_classes {
            let row = &flat[c * (d + 1)..(c + 1) * (d + 1)];
            self.head_w.row_mut(c).copy_from_slice(&row[..d]);
            self.head_b.data[c] = row[d];
        }
    }
}

/// Weights drawn from N(0, 1/fan_in), normalization gains 1, biases 0.
pub fn init_model(config: &ModelConfig) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut p = Parameters::zeros(config);
    let mut fill = |m: &mut Mat, fan_in: usize| {
        let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
        for v in &mut m.data {
            *v = dist.sample(&mut rng);
        }
    };
    let d = config.d_model;
    fill(&mut p.tok_emb, d);
    fill(&mut p.pos_emb, d);
    for layer in &mut p.layers {
        layer.ln1_gain.data.fill(1.0);
        layer.ln2_gain.data.fill(1.0);
        fill(&mut layer.w_q, d);
        fill(&mut layer.w_k, d);
        fill(&mut layer.w_v, d);
        fill(&mut layer.w_o, d);
        fill(&mut layer.w_in, d);
        fill(&mut layer.w_out, config.d_mlp);
    }
    p.lnf_gain.data.fill(1.0);
    fill(&mut p.head_w, d);
    Ok(p)
}
