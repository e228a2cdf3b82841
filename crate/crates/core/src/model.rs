//! The unified encoder-decoder backbone.
//!
//! A pre-norm transformer encoder over projected feature frames and a causal
//! transformer decoder with cross-attention, with one adapter slot after each
//! layer's feed-forward sub-layer, a CTC projection head on the encoder
//! states and a mean-pooled classification head.
//!
//! Parameter names are hierarchical and partition into four disjoint
//! namespaces: `backbone/...`, `head/...`, `adapter/<name>/...` and
//! `fusion/...`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterTaskModule};
use crate::autograd::{Array, Parameter, Tape, TensorId};
use crate::error::{Error, Result};

/// Layer-norm epsilon used everywhere in the model.
pub const LN_EPS: f64 = 1e-5;

/// Additive mask value for disallowed attention positions.
const MASK_NEG: f64 = -1e30;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub n_class_labels: usize,
    pub max_positions: usize,
    pub adapter_dim: usize,
    /// Dimensionality of the raw input feature frames.
    pub d_input: usize,
}

impl ModelConfig {
    /// Small defaults that train in seconds on one CPU core.
    pub fn desk_default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            encoder_layers: 4,
            decoder_layers: 2,
            vocab_size: 40,
            n_class_labels: 4,
            max_positions: 64,
            adapter_dim: 16,
            d_input: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("vocab_size", self.vocab_size),
            ("n_class_labels", self.n_class_labels),
            ("max_positions", self.max_positions),
            ("adapter_dim", self.adapter_dim),
            ("d_input", self.d_input),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

// ── Parameter registry ───────────────────────────────────────────────

/// Named parameters of one model instance. Names are unique; iteration is
/// name-ordered so every sweep over the registry is deterministic.
#[derive(Default)]
pub struct ParamRegistry {
    params: BTreeMap<String, Parameter>,
}

impl ParamRegistry {
    pub fn insert(&mut self, name: &str, value: Array, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Parameter {
                name: name.to_string(),
                value,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Marks exactly `names` trainable and everything else frozen.
    pub fn set_trainable_exactly(&mut self, names: &std::collections::BTreeSet<String>) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = names.contains(name);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }
}

// ── Model ────────────────────────────────────────────────────────────

pub struct UnifiedModel {
    pub config: ModelConfig,
    pub params: ParamRegistry,
    /// Sinusoidal position table, `[max_positions, d_model]`. Not a parameter.
    pe_table: Array,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Array::new(vec![rows, cols], data).unwrap()
}

fn identity_matrix(n: usize) -> Array {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Array::new(vec![n, n], data).unwrap()
}

fn sinusoidal_table(max_positions: usize, d_model: usize) -> Array {
    let mut data = vec![0.0; max_positions * d_model];
    for pos in 0..max_positions {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = (pos as f64 * rate).sin();
            if 2 * i + 1 < d_model {
                data[pos * d_model + 2 * i + 1] = (pos as f64 * rate).cos();
            }
        }
    }
    Array::new(vec![max_positions, d_model], data).unwrap()
}

impl UnifiedModel {
    /// Builds a backbone with Xavier-uniform weights, zero biases and unit
    /// layer-norm gains. Adapter and fusion parameters are added separately.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pe_table = sinusoidal_table(config.max_positions, config.d_model);
        let mut model = Self {
            config,
            params: ParamRegistry::default(),
            pe_table,
        };
        model.init_backbone(&mut rng)?;
        Ok(model)
    }

    fn linear(
        &mut self,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<()> {
        self.params
            .insert(&format!("{prefix}/weight"), xavier(rng, d_in, d_out), true)?;
        self.params
            .insert(&format!("{prefix}/bias"), Array::zeros(vec![1, d_out]), true)
    }

    fn layer_norm_params(&mut self, prefix: &str, d: usize) -> Result<()> {
        let ones = Array::new(vec![1, d], vec![1.0; d]).unwrap();
        self.params.insert(&format!("{prefix}/gain"), ones, true)?;
        self.params
            .insert(&format!("{prefix}/bias"), Array::zeros(vec![1, d]), true)
    }

    fn attention_params(&mut self, rng: &mut ChaCha8Rng, prefix: &str) -> Result<()> {
        let d = self.config.d_model;
        for proj in ["q", "k", "v", "o"] {
            self.linear(rng, &format!("{prefix}/{proj}"), d, d)?;
        }
        Ok(())
    }

    fn init_backbone(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let cfg = self.config.clone();
        let d = cfg.d_model;

        self.linear(rng, "backbone/input_proj", cfg.d_input, d)?;
        self.params
            .insert("backbone/embed/tokens", xavier(rng, cfg.vocab_size, d), true)?;

        for l in 0..cfg.encoder_layers {
            let p = format!("backbone/enc{l}");
            self.layer_norm_params(&format!("{p}/ln1"), d)?;
            self.attention_params(rng, &format!("{p}/attn"))?;
            self.layer_norm_params(&format!("{p}/ln2"), d)?;
            self.linear(rng, &format!("{p}/ffn/w1"), d, cfg.d_ff)?;
            self.linear(rng, &format!("{p}/ffn/w2"), cfg.d_ff, d)?;
        }
        self.layer_norm_params("backbone/enc_final_ln", d)?;

        for l in 0..cfg.decoder_layers {
            let p = format!("backbone/dec{l}");
            self.layer_norm_params(&format!("{p}/ln1"), d)?;
            self.attention_params(rng, &format!("{p}/self_attn"))?;
            self.layer_norm_params(&format!("{p}/ln2"), d)?;
            self.attention_params(rng, &format!("{p}/cross_attn"))?;
            self.layer_norm_params(&format!("{p}/ln3"), d)?;
            self.linear(rng, &format!("{p}/ffn/w1"), d, cfg.d_ff)?;
            self.linear(rng, &format!("{p}/ffn/w2"), cfg.d_ff, d)?;
        }
        self.layer_norm_params("backbone/dec_final_ln", d)?;
        self.linear(rng, "backbone/out_proj", d, cfg.vocab_size)?;

        self.linear(rng, "head/ctc", d, cfg.vocab_size)?;
        self.linear(rng, "head/cls", d, cfg.n_class_labels)?;
        Ok(())
    }

    /// Creates the per-layer bottleneck parameters for a named adapter.
    /// The up-projection starts at zero so a fresh adapter is the identity.
    pub fn add_adapter(&mut self, name: &str, seed: u64) -> Result<()> {
        if name.is_empty() || name.contains('/') {
            return Err(Error::Config(format!("invalid adapter name {name:?}")));
        }
        if self.has_adapter(name) {
            return Err(Error::Contract(format!("adapter {name} already exists")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, a) = (self.config.d_model, self.config.adapter_dim);
        for slot in self.slot_names() {
            let p = format!("adapter/{name}/{slot}");
            self.params
                .insert(&format!("{p}/down/weight"), xavier(&mut rng, d, a), true)?;
            self.params
                .insert(&format!("{p}/down/bias"), Array::zeros(vec![1, a]), true)?;
            self.params
                .insert(&format!("{p}/up/weight"), Array::zeros(vec![a, d]), true)?;
            self.params
                .insert(&format!("{p}/up/bias"), Array::zeros(vec![1, d]), true)?;
        }
        Ok(())
    }

    /// Creates the per-layer fusion attention blocks. Key/query projections
    /// are Xavier; value/output start as the identity so a singleton fusion
    /// passes its member's delta straight through.
    pub fn add_fusion(&mut self, seed: u64) -> Result<()> {
        if self.has_fusion() {
            return Err(Error::Contract("fusion blocks already exist".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model;
        for slot in self.slot_names() {
            let p = format!("fusion/{slot}");
            self.linear(&mut rng, &format!("{p}/q"), d, d)?;
            self.linear(&mut rng, &format!("{p}/k"), d, d)?;
            for proj in ["v", "o"] {
                self.params
                    .insert(&format!("{p}/{proj}/weight"), identity_matrix(d), true)?;
                self.params
                    .insert(&format!("{p}/{proj}/bias"), Array::zeros(vec![1, d]), true)?;
            }
        }
        Ok(())
    }

    pub fn has_adapter(&self, name: &str) -> bool {
        self.params
            .contains(&format!("adapter/{name}/enc0/down/weight"))
    }

    pub fn has_fusion(&self) -> bool {
        self.params.contains("fusion/enc0/q/weight")
    }

    /// Adapter slot names, encoder then decoder: `enc0.. dec0..`.
    pub fn slot_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for l in 0..self.config.encoder_layers {
            v.push(format!("enc{l}"));
        }
        for l in 0..self.config.decoder_layers {
            v.push(format!("dec{l}"));
        }
        v
    }

    pub fn position_row(&self, pos: usize) -> &[f64] {
        let d = self.config.d_model;
        &self.pe_table.data()[pos * d..(pos + 1) * d]
    }

    fn positions(&self, len: usize) -> Array {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(len * d);
        for pos in 0..len {
            data.extend_from_slice(self.position_row(pos));
        }
        Array::new(vec![len, d], data).unwrap()
    }
}

// ── Parameter counting ───────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub enum CountFilter<'a> {
    All,
    Trainable,
    /// Parameters whose name starts with the prefix.
    Prefix(&'a str),
}

/// Exact count of scalar parameters matching the filter.
pub fn count_parameters(model: &UnifiedModel, filter: CountFilter) -> usize {
    model
        .params
        .iter()
        .filter(|p| match filter {
            CountFilter::All => true,
            CountFilter::Trainable => p.trainable,
            CountFilter::Prefix(pre) => p.name.starts_with(pre),
        })
        .map(|p| p.value.numel())
        .sum()
}

/// Count of parameters named in a module's trainable set.
pub fn count_trainable_under(model: &UnifiedModel, module: &AdapterTaskModule) -> usize {
    module
        .trainable
        .iter()
        .map(|n| model.params.get(n).map(|p| p.value.numel()).unwrap_or(0))
        .sum()
}

// ── Forward passes ───────────────────────────────────────────────────

pub struct EncodeOut {
    pub enc_states: TensorId,
    pub ctc_logits: TensorId,
    pub cls_logits: TensorId,
}

/// One computation graph over the model. Parameters are bound to tape
/// leaves on first use; leaves of trainable parameters require grad only
/// when the pass is built for training.
pub struct ForwardPass<'m> {
    pub tape: Tape,
    model: &'m UnifiedModel,
    bound: BTreeMap<String, TensorId>,
    train: bool,
}

impl<'m> ForwardPass<'m> {
    pub fn new(model: &'m UnifiedModel, train: bool) -> Self {
        Self {
            tape: Tape::new(),
            model,
            bound: BTreeMap::new(),
            train,
        }
    }

    pub fn model(&self) -> &UnifiedModel {
        self.model
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// Tape leaf for a named parameter (bound once per pass).
    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self.model.params.get(name)?;
        let id = self.tape.leaf(&p.value, self.train && p.trainable);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Leaf ids of every parameter bound during this pass.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.bound.iter().map(|(n, &id)| (n.as_str(), id))
    }

    fn linear(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let w = self.param(&format!("{prefix}/weight"))?;
        let b = self.param(&format!("{prefix}/bias"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn layer_norm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let g = self.param(&format!("{prefix}/gain"))?;
        let b = self.param(&format!("{prefix}/bias"))?;
        self.tape.layer_norm_rows(x, g, b, LN_EPS)
    }

    /// Parameter-free row standardization (used inside adapters and fusion).
    pub fn normalize(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.tape.shape(x)[1];
        let ones = Array::new(vec![1, n], vec![1.0; n]).unwrap();
        let zeros = Array::zeros(vec![1, n]);
        let g = self.tape.constant(&ones);
        let b = self.tape.constant(&zeros);
        self.tape.layer_norm_rows(x, g, b, LN_EPS)
    }

    fn multi_head_attention(
        &mut self,
        q_in: TensorId,
        kv_in: TensorId,
        prefix: &str,
        mask: Option<&Array>,
    ) -> Result<TensorId> {
        let n_heads = self.config().n_heads;
        let d_head = self.config().d_model / n_heads;

        let q = self.linear(q_in, &format!("{prefix}/q"))?;
        let k = self.linear(kv_in, &format!("{prefix}/k"))?;
        let v = self.linear(kv_in, &format!("{prefix}/v"))?;

        let mask_id = mask.map(|m| self.tape.constant(m));
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (lo, hi) = (h * d_head, (h + 1) * d_head);
            let qh = self.tape.slice_cols(q, lo, hi)?;
            let kh = self.tape.slice_cols(k, lo, hi)?;
            let vh = self.tape.slice_cols(v, lo, hi)?;
            let kt = self.tape.transpose(kh)?;
            let scores = self.tape.matmul(qh, kt)?;
            let mut scores = self.tape.scale(scores, 1.0 / (d_head as f64).sqrt());
            if let Some(m) = mask_id {
                scores = self.tape.add(scores, m)?;
            }
            let att = self.tape.softmax_rows(scores);
            heads.push(self.tape.matmul(att, vh)?);
        }
        let merged = self.tape.concat_cols(&heads)?;
        self.linear(merged, &format!("{prefix}/o"))
    }

    fn feed_forward(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let h = self.linear(x, &format!("{prefix}/w1"))?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}/w2"))
    }

    fn adapter_slot(
        &mut self,
        module: Option<&AdapterTaskModule>,
        slot: &str,
        h: TensorId,
    ) -> Result<TensorId> {
        match module {
            None => Ok(h),
            Some(m) => adapters::apply_slot(self, m, slot, h),
        }
    }

    /// Encoder pass over feature frames `[T, d_input]`.
    pub fn encode(
        &mut self,
        features: &Array,
        module: Option<&AdapterTaskModule>,
    ) -> Result<EncodeOut> {
        let cfg = self.config().clone();
        let [t, d_in] = *features.shape() else {
            return Err(Error::Input(format!(
                "encode expects [T, d_input] features, got {:?}",
                features.shape()
            )));
        };
        if t == 0 {
            return Err(Error::Input("encode: empty feature sequence".into()));
        }
        if t > cfg.max_positions {
            return Err(Error::Input(format!(
                "encode: {t} frames exceed max_positions {}",
                cfg.max_positions
            )));
        }
        if d_in != cfg.d_input {
            return Err(Error::Input(format!(
                "encode: feature dim {d_in} does not match configured d_input {}",
                cfg.d_input
            )));
        }

        let x = self.tape.constant(features);
        let mut h = self.linear(x, "backbone/input_proj")?;
        let pe = self.model.positions(t);
        let pe_id = self.tape.constant(&pe);
        h = self.tape.add(h, pe_id)?;

        for l in 0..cfg.encoder_layers {
            let p = format!("backbone/enc{l}");
            let n1 = self.layer_norm(h, &format!("{p}/ln1"))?;
            let att = self.multi_head_attention(n1, n1, &format!("{p}/attn"), None)?;
            h = self.tape.add(h, att)?;
            let n2 = self.layer_norm(h, &format!("{p}/ln2"))?;
            let ff = self.feed_forward(n2, &format!("{p}/ffn"))?;
            h = self.tape.add(h, ff)?;
            h = self.adapter_slot(module, &format!("enc{l}"), h)?;
        }
        let enc_states = self.layer_norm(h, "backbone/enc_final_ln")?;

        let ctc_logits = self.linear(enc_states, "head/ctc")?;
        let pooled = self.tape.mean_rows(enc_states);
        let cls_logits = self.linear(pooled, "head/cls")?;

        Ok(EncodeOut {
            enc_states,
            ctc_logits,
            cls_logits,
        })
    }

    /// Decoder pass. Row `i` of the result scores the token following
    /// `prefix[i]` (causal self-attention plus cross-attention).
    pub fn decode_logits(
        &mut self,
        enc_states: TensorId,
        prefix: &[usize],
        module: Option<&AdapterTaskModule>,
    ) -> Result<TensorId> {
        let cfg = self.config().clone();
        let u = prefix.len();
        if u == 0 {
            return Err(Error::Input("decode_logits: empty prefix".into()));
        }
        if u > cfg.max_positions {
            return Err(Error::Input(format!(
                "decode_logits: prefix length {u} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
        if let Some(&bad) = prefix.iter().find(|&&tok| tok >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "decode_logits: token {bad} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }

        let embed = self.param("backbone/embed/tokens")?;
        let mut h = self.tape.gather_rows(embed, prefix)?;
        let pe = self.model.positions(u);
        let pe_id = self.tape.constant(&pe);
        h = self.tape.add(h, pe_id)?;

        // causal mask: position i attends to j <= i
        let mut mask = vec![0.0; u * u];
        for i in 0..u {
            for j in i + 1..u {
                mask[i * u + j] = MASK_NEG;
            }
        }
        let mask = Array::new(vec![u, u], mask).unwrap();

        for l in 0..cfg.decoder_layers {
            let p = format!("backbone/dec{l}");
            let n1 = self.layer_norm(h, &format!("{p}/ln1"))?;
            let att = self.multi_head_attention(n1, n1, &format!("{p}/self_attn"), Some(&mask))?;
            h = self.tape.add(h, att)?;
            let n2 = self.layer_norm(h, &format!("{p}/ln2"))?;
            let cross = self.multi_head_attention(n2, enc_states, &format!("{p}/cross_attn"), None)?;
            h = self.tape.add(h, cross)?;
            let n3 = self.layer_norm(h, &format!("{p}/ln3"))?;
            let ff = self.feed_forward(n3, &format!("{p}/ffn"))?;
            h = self.tape.add(h, ff)?;
            h = self.adapter_slot(module, &format!("dec{l}"), h)?;
        }
        let h = self.layer_norm(h, "backbone/dec_final_ln")?;
        self.linear(h, "backbone/out_proj")
    }
}
