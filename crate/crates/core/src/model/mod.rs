//! Decoder-only transformer with token, segment-type, and position
//! embeddings, pre-norm blocks, and a language-model head.
//!
//! All parameters live in one flat buffer described by a [`ParamLayout`];
//! gradients use the same layout. Weight matrices are stored
//! `[inputs × outputs]` so that a projection is `x · W`.

mod decode;
pub(crate) mod kernels;
mod transformer;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub use decode::DecodeCache;
pub use kernels::Real;
pub use transformer::{Logits, LossOutput, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_attn: f64,
    pub dropout_hidden: f64,
    /// Standard deviation of the normal weight initialization.
    pub init_scale: f64,
    /// Share the output projection with the token embedding.
    pub tie_lm_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size: 8192,
            max_seq_len: 256,
            dropout_attn: 0.1,
            dropout_hidden: 0.1,
            init_scale: 0.02,
            tie_lm_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        for (name, p) in [
            ("dropout_attn", self.dropout_attn),
            ("dropout_hidden", self.dropout_hidden),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count.
    pub fn count_params(&self) -> usize {
        let (v, d, p, f) = (self.vocab_size, self.d_model, self.max_seq_len, self.d_ff);
        let embeddings = v * d + 3 * d + p * d;
        let per_layer = 4 * d * d + 2 * d * f + 9 * d + f;
        let head = if self.tie_lm_head { 0 } else { v * d };
        embeddings + self.n_layers * per_layer + 2 * d + head
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Subject to weight decay. Biases and layer-norm parameters are not.
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_fc: usize,
    pub b_fc: usize,
    pub w_proj: usize,
    pub b_proj: usize,
}

#[derive(Clone, Debug)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) wte: usize,
    pub(crate) wtt: usize,
    pub(crate) wpe: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    /// Equal to `wte` when the head is tied.
    pub(crate) head: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, decay: bool| {
            let offset = total;
            total += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                offset,
                shape,
                decay,
            });
            offset
        };
        let wte = add("wte.weight".into(), vec![v, d], true);
        let wtt = add("wtt.weight".into(), vec![3, d], true);
        let wpe = add("wpe.weight".into(), vec![cfg.max_seq_len, d], true);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("h.{l}.{s}");
            layers.push(LayerOffsets {
                ln1_g: add(p("ln_1.weight"), vec![d], false),
                ln1_b: add(p("ln_1.bias"), vec![d], false),
                w_qkv: add(p("attn.c_attn.weight"), vec![d, 3 * d], true),
                b_qkv: add(p("attn.c_attn.bias"), vec![3 * d], false),
                w_o: add(p("attn.c_proj.weight"), vec![d, d], true),
                b_o: add(p("attn.c_proj.bias"), vec![d], false),
                ln2_g: add(p("ln_2.weight"), vec![d], false),
                ln2_b: add(p("ln_2.bias"), vec![d], false),
                w_fc: add(p("mlp.c_fc.weight"), vec![d, f], true),
                b_fc: add(p("mlp.c_fc.bias"), vec![f], false),
                w_proj: add(p("mlp.c_proj.weight"), vec![f, d], true),
                b_proj: add(p("mlp.c_proj.bias"), vec![d], false),
            });
        }
        let lnf_g = add("ln_f.weight".into(), vec![d], false);
        let lnf_b = add("ln_f.bias".into(), vec![d], false);
        let head = if cfg.tie_lm_head {
            wte
        } else {
            add("lm_head.weight".into(), vec![v, d], true)
        };
        ParamLayout {
            tensors,
            total,
            wte,
            wtt,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Per-element decay flags in buffer order.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for t in &self.tensors {
            mask[t.range()].fill(t.decay);
        }
        mask
    }
}

/// Model parameters in one flat buffer.
#[derive(Clone, Debug)]
pub struct ModelState<F> {
    config: ModelConfig,
    layout: ParamLayout,
    pub params: Vec<F>,
}

impl<F: Real> ModelState<F> {
    /// Weights from N(0, init_scale²), biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![F::zero(); layout.len()];
        let normal = Normal::new(0.0, config.init_scale)
            .map_err(|e| Error::Config(format!("init_scale: {e}")))?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        for t in layout.tensors() {
            let dst = &mut params[t.range()];
            if t.shape.len() == 2 {
                for v in dst.iter_mut() {
                    *v = F::lit(normal.sample(&mut rng));
                }
            } else if t.name.contains("ln_") && t.name.ends_with(".weight") {
                dst.fill(F::one());
            }
        }
        Ok(ModelState {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} parameters given, config needs {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(ModelState {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn count_params(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout.tensor(name).map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let range = self.layout.tensor(name)?.range();
        Some(&mut self.params[range])
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Same model at another precision.
    pub fn cast<G: Real>(&self) -> ModelState<G> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|v| G::lit(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    fn seg(&self, offset: usize, len: usize) -> &[F] {
        &self.params[offset..offset + len]
    }
}
