//! Differentiable sparse encoder.
//!
//! The forward map is
//!
//! ```text
//! pooled = mean_t embedding[x_t]            (H)
//! logits = projection · pooled + bias       (V)
//! out_j  = ln(1 + relu(logits_j))           (V, non-negative)
//! ```
//!
//! All parameters live in one flat buffer laid out as
//! `[embedding (V×H, row per token) | projection (V×H, row per output) | bias (V)]`
//! so that gradients and optimizer state share the same indexing.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::SparseVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    #[serde(default = "default_query_tokens")]
    pub max_query_tokens: usize,
    #[serde(default = "default_answer_tokens")]
    pub max_answer_tokens: usize,
    #[serde(default = "default_long_tokens")]
    pub max_context_tokens: usize,
    #[serde(default = "default_long_tokens")]
    pub max_doc_tokens: usize,
}

fn default_query_tokens() -> usize {
    64
}
fn default_answer_tokens() -> usize {
    100
}
fn default_long_tokens() -> usize {
    256
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, hidden_dim: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim,
            max_query_tokens: default_query_tokens(),
            max_answer_tokens: default_answer_tokens(),
            max_context_tokens: default_long_tokens(),
            max_doc_tokens: default_long_tokens(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.vocab_size,
            self.hidden_dim,
            self.max_query_tokens,
            self.max_answer_tokens,
            self.max_context_tokens,
            self.max_doc_tokens,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidConfig(
                "encoder sizes and token limits must be positive".into(),
            ));
        }
        if self.max_context_tokens < self.max_query_tokens {
            return Err(Error::InvalidConfig(
                "max_context_tokens must be >= max_query_tokens".into(),
            ));
        }
        Ok(())
    }

    fn matrix_len(&self) -> usize {
        self.vocab_size * self.hidden_dim
    }

    pub fn param_count(&self) -> usize {
        2 * self.matrix_len() + self.vocab_size
    }
}

/// Which block of the flat parameter buffer an index falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSlot {
    Embedding { token: usize, hidden: usize },
    Projection { output: usize, hidden: usize },
    Bias { output: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Vec<f64>,
    frozen: bool,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Distinct input tokens with their pooling weight (count / length).
    pub token_weights: Vec<(u32, f64)>,
    pub pooled: Vec<f64>,
    pub logits: Vec<f64>,
    pub activations: Vec<f64>,
}

impl Forward {
    pub fn to_sparse(&self) -> SparseVec {
        SparseVec::from_dense(&self.activations).expect("activations are finite and non-negative")
    }
}

/// Gradient buffer matching an [`EncoderModel`]'s flat parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGradients {
    config: EncoderConfig,
    values: Vec<f64>,
}

impl EncoderGradients {
    pub fn zeros(config: EncoderConfig) -> Self {
        Self {
            config,
            values: vec![0.0; config.param_count()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn embedding(&self) -> &[f64] {
        &self.values[..self.config.matrix_len()]
    }

    pub fn projection(&self) -> &[f64] {
        let m = self.config.matrix_len();
        &self.values[m..2 * m]
    }

    pub fn bias(&self) -> &[f64] {
        &self.values[2 * self.config.matrix_len()..]
    }

    pub fn add_assign(&mut self, other: &EncoderGradients) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(Error::Shape("gradient buffers differ in size".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: EncoderConfig,
    frozen: bool,
    embedding: Vec<f64>,
    projection: Vec<f64>,
    bias: Vec<f64>,
}

impl EncoderModel {
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            params: vec![0.0; config.param_count()],
            frozen: false,
        })
    }

    /// Fan-in initialization: embedding and projection uniform in
    /// `[-1/sqrt(H), 1/sqrt(H)]`, bias zero.
    pub fn random<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let bound = 1.0 / (config.hidden_dim as f64).sqrt();
        let m = config.matrix_len();
        for p in &mut model.params[..2 * m] {
            *p = rng.gen_range(-bound..bound);
        }
        Ok(model)
    }

    /// Bag-of-words encoder: identity embedding, `scale`·identity projection,
    /// zero bias. Needs `hidden_dim == vocab_size`. Every input token is
    /// activated with weight `ln(1 + scale · count / len)`.
    pub fn lexical(config: EncoderConfig, scale: f64) -> Result<Self> {
        if config.hidden_dim != config.vocab_size {
            return Err(Error::InvalidConfig(
                "lexical encoder requires hidden_dim == vocab_size".into(),
            ));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(
                "lexical scale must be positive".into(),
            ));
        }
        let mut model = Self::zeros(config)?;
        let (v, h, m) = (config.vocab_size, config.hidden_dim, config.matrix_len());
        for t in 0..v {
            model.params[t * h + t] = 1.0;
            model.params[m + t * h + t] = scale;
        }
        Ok(model)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Trainable copy of this model (the student starts from here).
    pub fn trainable_copy(&self) -> Self {
        Self {
            config: self.config,
            params: self.params.clone(),
            frozen: false,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut [f64]> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn slot(&self, index: usize) -> ParamSlot {
        let h = self.config.hidden_dim;
        let m = self.config.matrix_len();
        if index < m {
            ParamSlot::Embedding {
                token: index / h,
                hidden: index % h,
            }
        } else if index < 2 * m {
            ParamSlot::Projection {
                output: (index - m) / h,
                hidden: (index - m) % h,
            }
        } else {
            ParamSlot::Bias {
                output: index - 2 * m,
            }
        }
    }

    fn embedding_row(&self, token: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        &self.params[token * h..(token + 1) * h]
    }

    fn projection_row(&self, output: usize) -> &[f64] {
        let h = self.config.hidden_dim;
        let m = self.config.matrix_len();
        &self.params[m + output * h..m + (output + 1) * h]
    }

    fn bias(&self) -> &[f64] {
        &self.params[2 * self.config.matrix_len()..]
    }

    pub fn forward(&self, token_ids: &[u32]) -> Result<Forward> {
        if token_ids.is_empty() {
            return Err(Error::Degenerate(
                "cannot encode an empty token sequence".into(),
            ));
        }
        let v = self.config.vocab_size;
        let mut counts: Vec<(u32, f64)> = Vec::with_capacity(token_ids.len());
        let mut sorted = token_ids.to_vec();
        sorted.sort_unstable();
        for id in sorted {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, size: v });
            }
            match counts.last_mut() {
                Some((last, c)) if *last == id => *c += 1.0,
                _ => counts.push((id, 1.0)),
            }
        }
        let len = token_ids.len() as f64;
        for (_, c) in &mut counts {
            *c /= len;
        }

        let h = self.config.hidden_dim;
        let mut pooled = vec![0.0; h];
        for &(id, w) in &counts {
            for (p, e) in pooled.iter_mut().zip(self.embedding_row(id as usize)) {
                *p += w * e;
            }
        }
        let bias = self.bias();
        let mut logits = Vec::with_capacity(v);
        let mut activations = Vec::with_capacity(v);
        for (j, b) in bias.iter().enumerate() {
            let z: f64 = self
                .projection_row(j)
                .iter()
                .zip(&pooled)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b;
            logits.push(z);
            activations.push(if z > 0.0 { z.ln_1p() } else { 0.0 });
        }
        Ok(Forward {
            token_weights: counts,
            pooled,
            logits,
            activations,
        })
    }

    pub fn encode(&self, token_ids: &[u32]) -> Result<SparseVec> {
        Ok(self.forward(token_ids)?.to_sparse())
    }

    pub fn encode_query(&self, token_ids: &[u32]) -> Result<SparseVec> {
        let n = token_ids.len().min(self.config.max_query_tokens);
        self.encode(&token_ids[..n])
    }

    pub fn encode_doc(&self, token_ids: &[u32]) -> Result<SparseVec> {
        let n = token_ids.len().min(self.config.max_doc_tokens);
        self.encode(&token_ids[..n])
    }

    /// Adds the gradient of `upstream · out(x)` to `grads`.
    pub fn accumulate_backward(
        &self,
        fwd: &Forward,
        upstream: &[f64],
        grads: &mut EncoderGradients,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let (v, h, m) = (
            self.config.vocab_size,
            self.config.hidden_dim,
            self.config.matrix_len(),
        );
        if upstream.len() != v {
            return Err(Error::DimensionMismatch {
                expected: v,
                actual: upstream.len(),
            });
        }
        if grads.values.len() != self.params.len() {
            return Err(Error::Shape("gradient buffer does not match model".into()));
        }
        let mut d_pooled = vec![0.0; h];
        for (j, (&z, &u)) in fwd.logits.iter().zip(upstream).enumerate() {
            if z <= 0.0 || u == 0.0 {
                continue;
            }
            let dz = u / (1.0 + z);
            let row = &mut grads.values[m + j * h..m + (j + 1) * h];
            for (g, p) in row.iter_mut().zip(&fwd.pooled) {
                *g += dz * p;
            }
            grads.values[2 * m + j] += dz;
            for (d, w) in d_pooled.iter_mut().zip(self.projection_row(j)) {
                *d += dz * w;
            }
        }
        for &(id, w) in &fwd.token_weights {
            let row = &mut grads.values[id as usize * h..(id as usize + 1) * h];
            for (g, d) in row.iter_mut().zip(&d_pooled) {
                *g += w * d;
            }
        }
        Ok(())
    }

    /// Exact gradient of `upstream · encode(token_ids)` with respect to all
    /// parameters.
    pub fn encode_backward(&self, token_ids: &[u32], upstream: &[f64]) -> Result<EncoderGradients> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        let fwd = self.forward(token_ids)?;
        let mut grads = EncoderGradients::zeros(self.config);
        self.accumulate_backward(&fwd, upstream, &mut grads)?;
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = self.config.matrix_len();
        let ckpt = Checkpoint {
            config: self.config,
            frozen: self.frozen,
            embedding: self.params[..m].to_vec(),
            projection: self.params[m..2 * m].to_vec(),
            bias: self.params[2 * m..].to_vec(),
        };
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        serde_json::to_writer(&mut w, &ckpt)?;
        std::io::Write::flush(&mut w)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
        ckpt.config.validate()?;
        let m = ckpt.config.matrix_len();
        if ckpt.embedding.len() != m
            || ckpt.projection.len() != m
            || ckpt.bias.len() != ckpt.config.vocab_size
        {
            return Err(Error::Shape(format!(
                "checkpoint arrays do not match config in {}",
                path.display()
            )));
        }
        let mut params = ckpt.embedding;
        params.extend(ckpt.projection);
        params.extend(ckpt.bias);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameter in {}", path.display())));
        }
        Ok(Self {
            config: ckpt.config,
            params,
            frozen: ckpt.frozen,
        })
    }
}

/// Token ids for one conversation turn.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TurnTokens {
    pub utterance: Vec<u32>,
    pub answer: Vec<u32>,
}

/// Builds `q_n [SEP] a_{n-1} [SEP] q_{n-1} ... a_0 [SEP] q_0`, newest first.
///
/// Queries are cut to `max_query_tokens` and answers to `max_answer_tokens`;
/// the whole sequence is then cut to `max_context_tokens`, which drops the
/// oldest content. Empty segments are skipped along with their separator.
pub fn flatten_conversation(
    turns: &[TurnTokens],
    turn: usize,
    config: &EncoderConfig,
    sep_id: u32,
) -> Result<Vec<u32>> {
    if turn >= turns.len() {
        return Err(Error::TurnOutOfRange {
            turn,
            len: turns.len(),
        });
    }
    fn head(s: &[u32], n: usize) -> &[u32] {
        &s[..s.len().min(n)]
    }

    let mut segments: Vec<&[u32]> = vec![head(&turns[turn].utterance, config.max_query_tokens)];
    for past in turns[..turn].iter().rev() {
        segments.push(head(&past.answer, config.max_answer_tokens));
        segments.push(head(&past.utterance, config.max_query_tokens));
    }

    let mut out = Vec::new();
    for seg in segments.into_iter().filter(|s| !s.is_empty()) {
        if out.len() >= config.max_context_tokens {
            break;
        }
        if !out.is_empty() {
            out.push(sep_id);
        }
        out.extend_from_slice(seg);
    }
    out.truncate(config.max_context_tokens);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig::new(12, 5)
    }

    /// Dense reference forward pass written against the conceptual H×V
    /// embedding and V×H projection matrices.
    fn dense_reference(model: &EncoderModel, ids: &[u32]) -> Vec<f64> {
        let c = model.config();
        let (v, h) = (c.vocab_size, c.hidden_dim);
        let p = model.params();
        let emb = |hid: usize, tok: usize| p[tok * h + hid];
        let proj = |out: usize, hid: usize| p[v * h + out * h + hid];
        let bias = |out: usize| p[2 * v * h + out];
        let mut onehot_mean = vec![0.0; v];
        for &t in ids {
            onehot_mean[t as usize] += 1.0 / ids.len() as f64;
        }
        let pooled: Vec<f64> = (0..h)
            .map(|k| (0..v).map(|t| emb(k, t) * onehot_mean[t]).sum())
            .collect();
        (0..v)
            .map(|j| {
                let z: f64 = (0..h).map(|k| proj(j, k) * pooled[k]).sum::<f64>() + bias(j);
                (1.0 + z.max(0.0)).ln()
            })
            .collect()
    }

    #[test]
    fn zero_parameters_encode_empty() {
        let model = EncoderModel::zeros(small_config()).unwrap();
        assert!(model.encode(&[1, 2, 3]).unwrap().is_empty());
    }

    #[test]
    fn bias_only_closed_form() {
        let mut model = EncoderModel::zeros(small_config()).unwrap();
        let n = model.params().len();
        model.params_mut().unwrap()[n - 12 + 4] = std::f64::consts::E - 1.0;
        let v = model.encode(&[0, 7]).unwrap();
        assert_eq!(v.nnz(), 1);
        assert_eq!(v.entries()[0].0, 4);
        assert!((v.entries()[0].1 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut model = EncoderModel::random(small_config(), &mut rng).unwrap();
            for b in &mut model.params_mut().unwrap()[2 * 60..] {
                *b = rng.gen_range(-0.3..0.3);
            }
            let len = rng.gen_range(1..10);
            let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(0..12)).collect();
            let got = model.forward(&ids).unwrap().activations;
            let want = dense_reference(&model, &ids);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nnz_equals_positive_dense_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = EncoderModel::random(EncoderConfig::new(40, 8), &mut rng).unwrap();
        let ids: Vec<u32> = (0..10).map(|_| rng.gen_range(0..40)).collect();
        let dense = dense_reference(&model, &ids);
        let positive = dense.iter().filter(|&&x| x > 0.0).count();
        assert_eq!(model.encode(&ids).unwrap().nnz(), positive);
    }

    #[test]
    fn encode_errors() {
        let model = EncoderModel::zeros(small_config()).unwrap();
        assert!(matches!(model.encode(&[]), Err(Error::Degenerate(_))));
        assert!(matches!(
            model.encode(&[3, 12]),
            Err(Error::TokenOutOfRange { id: 12, .. })
        ));
    }

    #[test]
    fn lexical_encoder_activates_input_tokens() {
        let model = EncoderModel::lexical(EncoderConfig::new(6, 6), 4.0).unwrap();
        let v = model.encode(&[1, 3, 3, 5]).unwrap();
        let ids: Vec<u32> = v.entries().iter().map(|e| e.0).collect();
        assert_eq!(ids, vec![1, 3, 5]);
        assert!((v.get(1) - 2.0f64.ln()).abs() < 1e-12);
        assert!((v.get(3) - 3.0f64.ln()).abs() < 1e-12);
        assert!(EncoderModel::lexical(EncoderConfig::new(6, 4), 1.0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EncoderModel::random(small_config(), &mut rng).unwrap();
        let g = model.encode_backward(&[1, 2, 2], &[0.0; 12]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn frozen_model_rejects_updates() {
        let model = EncoderModel::zeros(small_config()).unwrap().freeze();
        assert!(matches!(
            model.encode_backward(&[1], &[1.0; 12]),
            Err(Error::Frozen)
        ));
        let mut m = model.clone();
        assert!(matches!(m.params_mut(), Err(Error::Frozen)));
        assert!(model.trainable_copy().params_mut().is_ok());
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut model = EncoderModel::random(small_config(), &mut rng).unwrap();
        let nb = model.params().len();
        for b in &mut model.params_mut().unwrap()[nb - 12..] {
            *b = rng.gen_range(0.05..0.3);
        }
        let ids = [0u32, 3, 3, 7, 11];
        let upstream: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |m: &EncoderModel| -> f64 {
            let out = m.forward(&ids).unwrap().activations;
            out.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let grads = model.encode_backward(&ids, &upstream).unwrap();
        let eps = 1e-4;
        let mut checked = 0;
        for _ in 0..200 {
            let i = rng.gen_range(0..nb);
            let orig = model.params()[i];
            model.params_mut().unwrap()[i] = orig + eps;
            let fp = objective(&model);
            model.params_mut().unwrap()[i] = orig - eps;
            let fm = objective(&model);
            model.params_mut().unwrap()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.values()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (analytic - numeric).abs() / denom < 1e-4 || (analytic - numeric).abs() < 1e-9,
                "param {i} ({:?}): analytic {analytic} numeric {numeric}",
                model.slot(i)
            );
            checked += 1;
        }
        assert_eq!(checked, 200);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = EncoderModel::random(small_config(), &mut rng)
            .unwrap()
            .freeze();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = EncoderModel::load(&path).unwrap();
        assert_eq!(back, model);
        for (a, b) in back.params().iter().zip(model.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn turns(pairs: &[(&[u32], &[u32])]) -> Vec<TurnTokens> {
        pairs
            .iter()
            .map(|(u, a)| TurnTokens {
                utterance: u.to_vec(),
                answer: a.to_vec(),
            })
            .collect()
    }

    const SEP: u32 = 0;

    #[test]
    fn flatten_first_turn_is_the_query() {
        let conv = turns(&[(&[5, 6], &[9])]);
        let out = flatten_conversation(&conv, 0, &EncoderConfig::new(20, 4), SEP).unwrap();
        assert_eq!(out, vec![5, 6]);
    }

    #[test]
    fn flatten_newest_first() {
        // q_0 = "a", a_0 = "x", q_1 = "b"
        let (a, x, b) = (1, 2, 3);
        let conv = turns(&[(&[a], &[x]), (&[b], &[])]);
        let out = flatten_conversation(&conv, 1, &EncoderConfig::new(20, 4), SEP).unwrap();
        assert_eq!(out, vec![b, SEP, x, SEP, a]);
    }

    #[test]
    fn flatten_turn_out_of_range() {
        let conv = turns(&[(&[1], &[])]);
        assert!(matches!(
            flatten_conversation(&conv, 1, &EncoderConfig::new(20, 4), SEP),
            Err(Error::TurnOutOfRange { turn: 1, len: 1 })
        ));
    }

    #[test]
    fn flatten_long_history_keeps_newest() {
        let config = EncoderConfig::new(500, 4);
        let q: Vec<u32> = (1..=40).collect();
        let a: Vec<u32> = (100..=199).collect();
        let conv: Vec<TurnTokens> = (0..6)
            .map(|_| TurnTokens {
                utterance: q.clone(),
                answer: a.clone(),
            })
            .collect();
        let out = flatten_conversation(&conv, 5, &config, SEP).unwrap();
        assert_eq!(out.len(), 256);
        // q_5 (40) + SEP + a_4 (100) + SEP + q_4 (40) + SEP + a_3 cut to fit
        let mut expected = q.clone();
        expected.push(SEP);
        expected.extend(&a);
        expected.push(SEP);
        expected.extend(&q);
        expected.push(SEP);
        expected.extend(&a[..256 - expected.len()]);
        assert_eq!(out, expected);
    }

    #[test]
    fn flatten_truncates_segments() {
        let mut config = EncoderConfig::new(500, 4);
        config.max_query_tokens = 2;
        config.max_answer_tokens = 1;
        let conv = turns(&[(&[1, 2, 3], &[7, 8]), (&[4, 5, 6], &[])]);
        let out = flatten_conversation(&conv, 1, &config, SEP).unwrap();
        assert_eq!(out, vec![4, 5, SEP, 7, SEP, 1, 2]);
    }

    proptest! {
        #[test]
        fn flatten_is_bounded_and_newest_preserved(
            lens in prop::collection::vec((0usize..90, 0usize..130), 1..8),
        ) {
            let config = EncoderConfig::new(1000, 4);
            let conv: Vec<TurnTokens> = lens.iter().enumerate().map(|(i, &(q, a))| TurnTokens {
                utterance: (0..q as u32).map(|k| 1 + (k + i as u32 * 7) % 900).collect(),
                answer: (0..a as u32).map(|k| 1 + (k * 3 + i as u32) % 900).collect(),
            }).collect();
            let turn = conv.len() - 1;
            let out = flatten_conversation(&conv, turn, &config, SEP).unwrap();
            prop_assert!(out.len() <= config.max_context_tokens);
            let newest = &conv[turn].utterance[..conv[turn].utterance.len().min(64)];
            prop_assert_eq!(&out[..newest.len()], newest);
        }
    }
}
