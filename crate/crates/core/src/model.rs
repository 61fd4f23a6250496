//! Model hyperparameters and the parameter layout shared by the context and
//! target networks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{MAX_ITEMS, MAX_SEQUENCE_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Local attention reach on each side of a token.
    pub window: usize,
    /// Rows of the token-position table.
    pub max_tokens: usize,
    /// Rows of the item-position table, excluding the `[CLS]` row.
    pub max_items: usize,
    pub init_std: f64,
    /// Init std of the token table alone.
    pub token_init_std: f64,
    pub layer_norm_eps: f64,
    pub use_token_type: bool,
    pub use_token_position: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            window: 64,
            max_tokens: MAX_SEQUENCE_TOKENS,
            max_items: MAX_ITEMS,
            init_std: 0.02,
            token_init_std: 0.02,
            layer_norm_eps: 1e-5,
            use_token_type: true,
            use_token_position: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size < 5 {
            return fail(format!("vocabulary size {} < 5", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.window == 0 {
            return fail("attention window must be at least 1".into());
        }
        if self.d_ff == 0 || self.max_tokens < 2 || self.max_items == 0 {
            return fail("d_ff, max_tokens and max_items must be positive".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return fail(format!("init_std {}", self.init_std));
        }
        if !(self.token_init_std.is_finite() && self.token_init_std >= 0.0) {
            return fail(format!("token_init_std {}", self.token_init_std));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    /// `V_w × d`
    pub token: ParamId,
    /// `max_tokens × d`
    pub token_position: ParamId,
    /// Rows `[CLS]`, attribute, value.
    pub token_type: ParamId,
    /// `(max_items + 1) × d`, row 0 is the `[CLS]` slot.
    pub item_position: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ff_norm_gain: ParamId,
    pub ff_norm_bias: ParamId,
    pub w_in: ParamId,
    pub b_in: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

/// Two-layer MLP `2d → d → d` with GELU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedding: EmbeddingTables,
    pub layers: Vec<LayerParams>,
    /// Predicts a history item's full representation from `h_CLS ⊕ D_n`.
    pub history_predictor: PredictorParams,
    /// Predicts the next item's full representation from `h_CLS ⊕ h_{n+1,M}`.
    pub next_predictor: PredictorParams,
    /// Output bias of the masked-token head; its weights are tied to the token table.
    pub mlm_bias: ParamId,
    /// Stand-in for `D_n` when no history token was masked.
    pub placeholder: ParamId,
}

enum Init {
    Normal(f64),
    Xavier,
    Zeros,
    Ones,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = rng::derive(seed, &[rng::purpose::INIT]);
        let mut store = ParamStore::new();
        let model = Self::build(config, &mut |name, rows, cols, init| match init {
            Init::Normal(std) => store.register_normal(name, rows, cols, std, &mut rng),
            Init::Xavier => {
                let std = (2.0 / (rows + cols) as f64).sqrt();
                store.register_normal(name, rows, cols, std, &mut rng)
            }
            Init::Zeros => store.register(name, Tensor::zeros(rows, cols)),
            Init::Ones => store.register(name, Tensor::filled(rows, cols, 1.0)),
        });
        Ok((model, store))
    }

    /// Layout for an existing store; fails unless names and shapes match.
    pub fn from_store(config: ModelConfig, store: &ParamStore) -> Result<Model> {
        config.validate()?;
        let mut reference = ParamStore::new();
        let model = Self::build(config, &mut |name, rows, cols, _| reference.register(name, Tensor::zeros(rows, cols)));
        reference.check_same_structure(store)?;
        Ok(model)
    }

    fn build(config: ModelConfig, reg: &mut dyn FnMut(String, usize, usize, Init) -> ParamId) -> Model {
        let d = config.d_model;
        let std = config.init_std;
        let embedding = EmbeddingTables {
            token: reg("embedding.token".into(), config.vocab_size, d, Init::Normal(config.token_init_std)),
            token_position: reg("embedding.token_position".into(), config.max_tokens, d, Init::Normal(std)),
            token_type: reg("embedding.token_type".into(), 3, d, Init::Normal(std)),
            item_position: reg("embedding.item_position".into(), config.max_items + 1, d, Init::Normal(std)),
            norm_gain: reg("embedding.norm.gain".into(), 1, d, Init::Ones),
            norm_bias: reg("embedding.norm.bias".into(), 1, d, Init::Zeros),
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let mut r = |part: &str, rows, cols, init| reg(format!("encoder.{l}.{part}"), rows, cols, init);
                LayerParams {
                    attn_norm_gain: r("attn_norm.gain", 1, d, Init::Ones),
                    attn_norm_bias: r("attn_norm.bias", 1, d, Init::Zeros),
                    wq: r("attn.wq", d, d, Init::Xavier),
                    bq: r("attn.bq", 1, d, Init::Zeros),
                    wk: r("attn.wk", d, d, Init::Xavier),
                    bk: r("attn.bk", 1, d, Init::Zeros),
                    wv: r("attn.wv", d, d, Init::Xavier),
                    bv: r("attn.bv", 1, d, Init::Zeros),
                    wo: r("attn.wo", d, d, Init::Xavier),
                    bo: r("attn.bo", 1, d, Init::Zeros),
                    ff_norm_gain: r("ff_norm.gain", 1, d, Init::Ones),
                    ff_norm_bias: r("ff_norm.bias", 1, d, Init::Zeros),
                    w_in: r("ff.w_in", d, config.d_ff, Init::Xavier),
                    b_in: r("ff.b_in", 1, config.d_ff, Init::Zeros),
                    w_out: r("ff.w_out", config.d_ff, d, Init::Xavier),
                    b_out: r("ff.b_out", 1, d, Init::Zeros),
                }
            })
            .collect();
        let mut predictor = |name: &str| PredictorParams {
            w1: reg(format!("{name}.w1"), 2 * d, d, Init::Xavier),
            b1: reg(format!("{name}.b1"), 1, d, Init::Zeros),
            w2: reg(format!("{name}.w2"), d, d, Init::Xavier),
            b2: reg(format!("{name}.b2"), 1, d, Init::Zeros),
        };
        let history_predictor = predictor("predictor.history");
        let next_predictor = predictor("predictor.next");
        let mlm_bias = reg("mlm.bias".into(), 1, config.vocab_size, Init::Zeros);
        let placeholder = reg("placeholder".into(), 1, d, Init::Zeros);
        Model { config, embedding, layers, history_predictor, next_predictor, mlm_bias, placeholder }
    }

    /// Parameters of the predictor heads, masked-token head and placeholder;
    /// everything else belongs to the embedding and encoder.
    pub fn head_params(&self) -> Vec<ParamId> {
        let p = |q: &PredictorParams| [q.w1, q.b1, q.w2, q.b2];
        let mut v: Vec<ParamId> = p(&self.history_predictor).into_iter().chain(p(&self.next_predictor)).collect();
        v.push(self.mlm_bias);
        v.push(self.placeholder);
        v
    }
}
