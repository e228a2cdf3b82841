//! Inference: greedy attention decoding, incremental CTC prefix scoring and
//! joint CTC/attention beam search.
//!
//! A hypothesis carries an attention log-probability and a CTC component.
//! While the hypothesis is still inside the transcript segment, the CTC
//! component is the prefix-complete mass (the probability that the collapsed
//! CTC output begins with the transcript so far); emitting a separator,
//! a reserved label token or EOS closes the segment and switches the
//! component to the exact full-label probability. Tokens after the segment
//! are scored by attention alone.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterTaskModule;
use crate::autograd::{log_add_exp, Array};
use crate::error::{Error, Result};
use crate::model::{ForwardPass, UnifiedModel};
use crate::taskspace::{TokenId, Vocabulary};

const NEG_INF: f64 = f64::NEG_INFINITY;

// ── Configuration ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Decode-time CTC weight; joint = (1−λ)·attention + λ·CTC.
    pub lambda_dec: f64,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    /// Per-token additive bonus; 0 disables length normalization.
    pub length_bonus: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            lambda_dec: 0.4,
            max_len: 48,
            length_bonus: 0.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_dec) {
            return Err(Error::Config(format!(
                "lambda_dec must lie in [0, 1], got {}",
                self.lambda_dec
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token roles the search needs to know about.
#[derive(Clone, Debug)]
pub struct DecodeContext {
    pub bos: TokenId,
    pub eos: TokenId,
    pub blank: TokenId,
    /// Tokens the decoder may emit (EOS included; BOS/pad/blank excluded).
    pub candidates: Vec<TokenId>,
    /// Tokens scored against the CTC distribution (the transcript alphabet).
    pub ctc_tokens: BTreeSet<TokenId>,
    /// Separator closing the transcript segment, when the vocabulary has one.
    pub sep: Option<TokenId>,
}

impl DecodeContext {
    pub fn from_vocab(vocab: &Vocabulary) -> Self {
        let candidates = (0..vocab.len())
            .filter(|&id| id != vocab.pad() && id != vocab.bos() && id != vocab.blank())
            .collect();
        Self {
            bos: vocab.bos(),
            eos: vocab.eos(),
            blank: vocab.blank(),
            candidates,
            ctc_tokens: vocab.ctc_label_space().into_iter().collect(),
            sep: Some(vocab.sep()),
        }
    }
}

// ── CTC prefix scoring ───────────────────────────────────────────────

/// Incremental CTC prefix probabilities over a fixed log-prob matrix.
pub struct CtcPrefixScorer {
    logp: Vec<f64>,
    t_frames: usize,
    vocab: usize,
    blank: TokenId,
}

/// Forward variables of one prefix: `r_n[t]`/`r_b[t]` are the log masses of
/// paths over frames `0..=t` whose collapse equals the prefix, ending with a
/// non-blank / blank frame.
#[derive(Clone, Debug)]
pub struct CtcPrefixState {
    r_n: Vec<f64>,
    r_b: Vec<f64>,
    prefix_score: f64,
    last: Option<TokenId>,
}

impl CtcPrefixScorer {
    /// Applies a row-wise log-softmax to raw CTC logits `[T, vocab]`.
    pub fn new(ctc_logits: &Array, blank: TokenId) -> Result<Self> {
        let [t_frames, vocab] = *ctc_logits.shape() else {
            return Err(Error::Shape {
                op: "CtcPrefixScorer",
                expected: "2-D logits".into(),
                got: format!("{:?}", ctc_logits.shape()),
            });
        };
        if blank >= vocab {
            return Err(Error::Input(format!(
                "blank id {blank} outside vocabulary of size {vocab}"
            )));
        }
        let mut logp = vec![0.0; t_frames * vocab];
        for t in 0..t_frames {
            let row = &ctc_logits.data()[t * vocab..(t + 1) * vocab];
            let m = row.iter().cloned().fold(NEG_INF, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for k in 0..vocab {
                logp[t * vocab + k] = row[k] - lse;
            }
        }
        Ok(Self {
            logp,
            t_frames,
            vocab,
            blank,
        })
    }

    fn lp(&self, t: usize, k: TokenId) -> f64 {
        self.logp[t * self.vocab + k]
    }

    /// State of the empty prefix: only all-blank paths, score `log 1 = 0`.
    pub fn initial(&self) -> CtcPrefixState {
        let mut r_b = vec![NEG_INF; self.t_frames];
        let mut acc = 0.0;
        for t in 0..self.t_frames {
            acc += self.lp(t, self.blank);
            r_b[t] = acc;
        }
        CtcPrefixState {
            r_n: vec![NEG_INF; self.t_frames],
            r_b,
            prefix_score: 0.0,
            last: None,
        }
    }

    /// Extends a prefix by one non-blank token.
    pub fn extend(&self, state: &CtcPrefixState, c: TokenId) -> Result<CtcPrefixState> {
        if c == self.blank || c >= self.vocab {
            return Err(Error::Input(format!(
                "ctc prefix extension with invalid token {c}"
            )));
        }
        let t_frames = self.t_frames;
        let mut r_n = vec![NEG_INF; t_frames];
        let mut r_b = vec![NEG_INF; t_frames];

        // phi[t]: mass of completing the old prefix by frame t, positioned to
        // emit `c` as a new symbol at frame t+1
        let same = state.last == Some(c);
        let phi = |t: usize| -> f64 {
            if same {
                state.r_b[t]
            } else {
                log_add_exp(state.r_b[t], state.r_n[t])
            }
        };
        let phi_start = if state.last.is_none() { 0.0 } else { NEG_INF };

        let mut prefix_score = phi_start + self.lp(0, c);
        r_n[0] = phi_start + self.lp(0, c);
        for t in 1..t_frames {
            let new_emit = phi(t - 1);
            r_n[t] = self.lp(t, c) + log_add_exp(r_n[t - 1], new_emit);
            r_b[t] = self.lp(t, self.blank) + log_add_exp(r_b[t - 1], r_n[t - 1]);
            prefix_score = log_add_exp(prefix_score, new_emit + self.lp(t, c));
        }
        Ok(CtcPrefixState {
            r_n,
            r_b,
            prefix_score,
            last: Some(c),
        })
    }

    /// Log probability that the collapsed output begins with the prefix.
    pub fn prefix_score(&self, state: &CtcPrefixState) -> f64 {
        state.prefix_score
    }

    /// Log probability that the collapsed output equals the prefix exactly.
    pub fn full_label_score(&self, state: &CtcPrefixState) -> f64 {
        let t = self.t_frames - 1;
        log_add_exp(state.r_n[t], state.r_b[t])
    }
}

/// Prefix-complete mass of `prefix` under the CTC distribution of
/// `ctc_logits`. `−∞` is a valid score for infeasible prefixes.
pub fn ctc_prefix_score(prefix: &[TokenId], ctc_logits: &Array, blank: TokenId) -> Result<f64> {
    let scorer = CtcPrefixScorer::new(ctc_logits, blank)?;
    let mut state = scorer.initial();
    for &c in prefix {
        state = scorer.extend(&state, c)?;
    }
    Ok(scorer.prefix_score(&state))
}

// ── Attention scoring ────────────────────────────────────────────────

/// Next-token log-probabilities given the prefix so far.
pub trait AttentionScorer {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

impl<F> AttentionScorer for F
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self(prefix)
    }
}

/// Attention scorer over a model: encodes once, then re-runs the decoder on
/// each prefix against the cached encoder states.
pub struct ModelScorer<'a> {
    model: &'a UnifiedModel,
    module: Option<&'a AdapterTaskModule>,
    enc_states: Array,
}

impl<'a> ModelScorer<'a> {
    /// Runs the encoder and returns the scorer plus the raw CTC logits.
    pub fn prepare(
        model: &'a UnifiedModel,
        module: Option<&'a AdapterTaskModule>,
        features: &Array,
    ) -> Result<(Self, Array, Array)> {
        let mut fp = ForwardPass::new(model, false);
        let out = fp.encode(features, module)?;
        let enc_states = Array::new(
            fp.tape.shape(out.enc_states).to_vec(),
            fp.tape.value(out.enc_states).to_vec(),
        )?;
        let ctc_logits = Array::new(
            fp.tape.shape(out.ctc_logits).to_vec(),
            fp.tape.value(out.ctc_logits).to_vec(),
        )?;
        let cls_logits = Array::new(
            fp.tape.shape(out.cls_logits).to_vec(),
            fp.tape.value(out.cls_logits).to_vec(),
        )?;
        Ok((
            Self {
                model,
                module,
                enc_states,
            },
            ctc_logits,
            cls_logits,
        ))
    }
}

fn log_softmax_vec(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(NEG_INF, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

impl AttentionScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut fp = ForwardPass::new(self.model, false);
        let enc = fp.tape.constant(&self.enc_states);
        let logits = fp.decode_logits(enc, prefix, self.module)?;
        let v = fp.tape.shape(logits)[1];
        let last = &fp.tape.value(logits)[(prefix.len() - 1) * v..prefix.len() * v];
        Ok(log_softmax_vec(last))
    }
}

// ── Hypotheses ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Hypothesis {
    /// Token sequence starting at BOS; finished hypotheses end with EOS.
    pub tokens: Vec<TokenId>,
    /// Cumulative attention log-probability.
    pub att_score: f64,
    /// CTC component: prefix mass while the transcript segment is open,
    /// exact full-label probability once it closes.
    pub ctc_score: f64,
    pub finished: bool,
    /// Set when the search exhausted `max_len` without reaching EOS.
    pub truncated: bool,
    ctc_state: Option<CtcPrefixState>,
}

impl Hypothesis {
    /// `(1−λ)·att + λ·ctc`, plus the per-token length bonus.
    pub fn joint(&self, cfg: &DecodeConfig) -> f64 {
        let generated = (self.tokens.len() - 1) as f64;
        (1.0 - cfg.lambda_dec) * self.att_score
            + cfg.lambda_dec * self.ctc_score
            + cfg.length_bonus * generated
    }

    /// Generated tokens without BOS and the trailing EOS.
    pub fn content<'c>(&'c self, ctx: &DecodeContext) -> &'c [TokenId] {
        let mut toks = &self.tokens[1..];
        if let Some((&last, rest)) = toks.split_last() {
            if last == ctx.eos {
                toks = rest;
            }
        }
        toks
    }
}

fn joint_then_tokens(a: &Hypothesis, b: &Hypothesis, cfg: &DecodeConfig) -> std::cmp::Ordering {
    b.joint(cfg)
        .partial_cmp(&a.joint(cfg))
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

// ── Search ───────────────────────────────────────────────────────────

/// Joint CTC/attention beam search. Returns hypotheses best-first; ties
/// break deterministically on token ids, then on shorter length. If no
/// hypothesis reaches EOS within `max_len`, the best live hypothesis is
/// returned with its truncation flag set.
pub fn joint_beam_search(
    scorer: &mut dyn AttentionScorer,
    ctc: &CtcPrefixScorer,
    ctx: &DecodeContext,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let initial = Hypothesis {
        tokens: vec![ctx.bos],
        att_score: 0.0,
        ctc_score: 0.0,
        finished: false,
        truncated: false,
        ctc_state: Some(ctc.initial()),
    };
    let mut live = vec![initial];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut expansions: Vec<Hypothesis> = Vec::new();
        for hyp in &live {
            let logp = scorer.next_log_probs(&hyp.tokens)?;
            for &tok in &ctx.candidates {
                let mut next = hyp.clone();
                next.tokens.push(tok);
                next.att_score += logp[tok];

                if let Some(state) = &next.ctc_state {
                    if tok != ctx.eos && Some(tok) != ctx.sep && ctx.ctc_tokens.contains(&tok) {
                        let new_state = ctc.extend(state, tok)?;
                        next.ctc_score = ctc.prefix_score(&new_state);
                        next.ctc_state = Some(new_state);
                    } else {
                        // transcript segment closes: switch to the exact
                        // full-label probability
                        next.ctc_score = ctc.full_label_score(state);
                        next.ctc_state = None;
                    }
                }

                if tok == ctx.eos {
                    next.finished = true;
                    finished.push(next);
                } else {
                    expansions.push(next);
                }
            }
        }
        if expansions.is_empty() {
            break;
        }
        expansions.sort_by(|a, b| joint_then_tokens(a, b, cfg));
        expansions.truncate(cfg.beam_size);
        live = expansions;
    }

    if finished.is_empty() {
        let mut best = live;
        for h in &mut best {
            h.truncated = true;
        }
        best.sort_by(|a, b| joint_then_tokens(a, b, cfg));
        best.truncate(cfg.beam_size);
        return Ok(best);
    }
    finished.sort_by(|a, b| joint_then_tokens(a, b, cfg));
    Ok(finished)
}

/// Argmax token per step until EOS or `max_len`. Ties go to the lowest
/// token id. Returns the generated sequence (BOS included, EOS included
/// when reached) and whether it was truncated.
pub fn greedy_decode(
    scorer: &mut dyn AttentionScorer,
    ctx: &DecodeContext,
    max_len: usize,
) -> Result<(Vec<TokenId>, bool)> {
    let mut tokens = vec![ctx.bos];
    for _ in 0..max_len {
        let logp = scorer.next_log_probs(&tokens)?;
        let mut best: Option<(f64, TokenId)> = None;
        for &tok in &ctx.candidates {
            let better = match best {
                None => true,
                Some((score, id)) => logp[tok] > score || (logp[tok] == score && tok < id),
            };
            if better {
                best = Some((logp[tok], tok));
            }
        }
        let (_, tok) = best.ok_or_else(|| Error::Config("no candidate tokens".into()))?;
        tokens.push(tok);
        if tok == ctx.eos {
            return Ok((tokens, false));
        }
    }
    Ok((tokens, true))
}

/// Convenience wrapper: encode, then run the joint search over the model.
pub fn decode_example(
    model: &UnifiedModel,
    module: Option<&AdapterTaskModule>,
    features: &Array,
    ctx: &DecodeContext,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    let (mut scorer, ctc_logits, _) = ModelScorer::prepare(model, module, features)?;
    let ctc = CtcPrefixScorer::new(&ctc_logits, ctx.blank)?;
    joint_beam_search(&mut scorer, &ctc, ctx, cfg)
}
