//! The training objective: task-weighted decoder NLL, encoder CTC loss,
//! encoder cross-entropy and their weighted combination
//! `total = (1−λ_ctc)·L_nll + λ_ctc·L_ctc + 𝟙_ce·L_ce` with
//! `L_nll = Σ_task λ_task·L_task`.
//!
//! Every term is built on the tape, so gradients of the combined objective
//! come out of one backward pass. The CTC loss is the forward algorithm in
//! log space composed from differentiable primitives; unreachable alignment
//! states are simply never materialized, which keeps −∞ out of the graph.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::taskspace::{TargetSequence, TokenId};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Weight between decoder NLL and encoder CTC; 0 disables CTC entirely.
    pub lambda_ctc: f64,
    /// Per-task weight on decoder token NLL.
    pub lambda_task: BTreeMap<String, f64>,
    /// 𝟙_ce: adds the encoder classification cross-entropy when set.
    pub is_classification: bool,
    pub blank_id: TokenId,
    pub pad_id: TokenId,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return Err(Error::Config(format!(
                "lambda_ctc must lie in [0, 1], got {}",
                self.lambda_ctc
            )));
        }
        for (task, w) in &self.lambda_task {
            if *w < 0.0 {
                return Err(Error::Config(format!(
                    "lambda_task[{task}] must be >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the objective needs to score one example.
#[derive(Clone, Debug)]
pub struct ObjectiveTarget {
    pub sequence: TargetSequence,
    /// Transcript tokens for the encoder CTC term (required when λ_ctc > 0).
    pub ctc_label: Option<Vec<TokenId>>,
    /// Class index for the encoder CE term (required when 𝟙_ce = 1).
    pub class_label: Option<usize>,
}

/// The values of one objective evaluation.
#[derive(Clone, Debug, serde::Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub ctc: f64,
    pub ce: f64,
    pub lambda_ctc: f64,
    pub is_classification: bool,
    pub per_task: BTreeMap<String, f64>,
}

impl LossBreakdown {
    /// Residual of the combination identity; zero up to rounding.
    pub fn identity_residual(&self) -> f64 {
        let ce_term = if self.is_classification { self.ce } else { 0.0 };
        self.total - ((1.0 - self.lambda_ctc) * self.nll + self.lambda_ctc * self.ctc + ce_term)
    }
}

// ── Decoder NLL (Eq. 1) ──────────────────────────────────────────────

/// Task-weighted decoder NLL. `L_task` is the mean token NLL over the
/// positions owned by that task; the result is `Σ λ_task·L_task`.
/// Zero-weight tasks are still reported but contribute nothing.
pub fn nll_task_weighted(
    tape: &mut Tape,
    dec_logits: TensorId,
    target: &TargetSequence,
    lambda_task: &BTreeMap<String, f64>,
) -> Result<(TensorId, BTreeMap<String, f64>)> {
    target.validate()?;
    let rows = tape.shape(dec_logits)[0];
    let gold = &target.tokens[1..];
    if rows != gold.len() {
        return Err(Error::Shape {
            op: "nll_task_weighted",
            expected: format!("{} logit rows", gold.len()),
            got: format!("{rows}"),
        });
    }

    let mut per_task = BTreeMap::new();
    let mut total: Option<TensorId> = None;
    for task in &target.tasks {
        let lambda = *lambda_task.get(task).ok_or_else(|| {
            Error::Config(format!("no lambda_task weight for task {task}"))
        })?;
        let mut weights = vec![0.0; rows];
        for pos in target.positions_of(task) {
            weights[pos] = 1.0;
        }
        let task_loss = tape.cross_entropy_rows(dec_logits, gold, &weights)?;
        per_task.insert(task.clone(), tape.scalar(task_loss));
        let weighted = tape.scale(task_loss, lambda);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    Ok((total.expect("target has at least one task"), per_task))
}

// ── CTC loss ─────────────────────────────────────────────────────────

/// Minimum number of frames that can emit the label.
fn ctc_min_frames(label: &[TokenId]) -> usize {
    let repeats = label.windows(2).filter(|w| w[0] == w[1]).count();
    label.len() + repeats
}

fn logsum_present(tape: &mut Tape, terms: &[Option<TensorId>]) -> Option<TensorId> {
    let mut acc: Option<TensorId> = None;
    for t in terms.iter().flatten() {
        acc = Some(match acc {
            None => *t,
            Some(a) => tape.logaddexp(a, *t),
        });
    }
    acc
}

/// CTC loss: `−log Σ_{π: collapse(π)=label} Π_t p(π_t | t)`, computed by the
/// forward algorithm over `blank, l₁, blank, ..., l_ℓ, blank` states in log
/// space. Differentiable; an impossible alignment is an error, not a NaN.
pub fn ctc_loss(
    tape: &mut Tape,
    ctc_logits: TensorId,
    label: &[TokenId],
    blank_id: TokenId,
) -> Result<TensorId> {
    let [t_frames, vocab] = *tape.shape(ctc_logits) else {
        return Err(Error::Shape {
            op: "ctc_loss",
            expected: "2-D logits [T, vocab]".into(),
            got: format!("{:?}", tape.shape(ctc_logits)),
        });
    };
    if label.is_empty() {
        return Err(Error::Input("ctc_loss: empty label".into()));
    }
    if label.iter().any(|&l| l == blank_id) {
        return Err(Error::Input("ctc_loss: label contains the blank token".into()));
    }
    if let Some(&bad) = label.iter().find(|&&l| l >= vocab) {
        return Err(Error::Input(format!(
            "ctc_loss: label token {bad} outside vocabulary of size {vocab}"
        )));
    }
    let required = ctc_min_frames(label);
    if t_frames < required {
        return Err(Error::InfeasibleAlignment {
            required,
            got: t_frames,
        });
    }

    let logp = tape.log_softmax_rows(ctc_logits);
    let n_states = 2 * label.len() + 1;
    let sym = |s: usize| -> TokenId {
        if s % 2 == 0 {
            blank_id
        } else {
            label[(s - 1) / 2]
        }
    };

    // log p(symbol of state s at frame t), one Get node per (t, token)
    let mut emit_cache: BTreeMap<(usize, TokenId), TensorId> = BTreeMap::new();
    let mut emit = |tape: &mut Tape, t: usize, k: TokenId| -> Result<TensorId> {
        if let Some(&id) = emit_cache.get(&(t, k)) {
            return Ok(id);
        }
        let id = tape.get(logp, t * vocab + k)?;
        emit_cache.insert((t, k), id);
        Ok(id)
    };

    let mut alpha: Vec<Option<TensorId>> = vec![None; n_states];
    alpha[0] = Some(emit(tape, 0, blank_id)?);
    alpha[1] = Some(emit(tape, 0, sym(1))?);

    for t in 1..t_frames {
        let mut next: Vec<Option<TensorId>> = vec![None; n_states];
        for s in 0..n_states {
            let mut terms = [alpha[s], None, None];
            if s >= 1 {
                terms[1] = alpha[s - 1];
            }
            if s >= 2 && sym(s) != blank_id && sym(s) != sym(s - 2) {
                terms[2] = alpha[s - 2];
            }
            if let Some(sum) = logsum_present(tape, &terms) {
                let e = emit(tape, t, sym(s))?;
                next[s] = Some(tape.add(sum, e)?);
            }
        }
        alpha = next;
    }

    let total = logsum_present(tape, &[alpha[n_states - 1], alpha[n_states - 2]])
        .ok_or(Error::InfeasibleAlignment {
            required,
            got: t_frames,
        })?;
    Ok(tape.scale(total, -1.0))
}

// ── Encoder cross-entropy ────────────────────────────────────────────

/// `−log softmax(cls_logits)[label]` over the pooled encoder states.
pub fn encoder_ce(tape: &mut Tape, cls_logits: TensorId, label_index: usize) -> Result<TensorId> {
    let n = tape.shape(cls_logits)[1];
    if label_index >= n {
        return Err(Error::Input(format!(
            "encoder_ce: label {label_index} out of range for {n} classes"
        )));
    }
    tape.cross_entropy_rows(cls_logits, &[label_index], &[1.0])
}

// ── Combined objective (Eq. 2) ───────────────────────────────────────

/// Combines the terms for one example. When `λ_ctc = 0` the CTC term is not
/// evaluated at all (classification inputs may carry no transcript);
/// likewise the CE term is only evaluated when `𝟙_ce = 1`. Returns the
/// scalar loss node together with the value breakdown.
pub fn total_objective(
    tape: &mut Tape,
    dec_logits: TensorId,
    ctc_logits: Option<TensorId>,
    cls_logits: Option<TensorId>,
    target: &ObjectiveTarget,
    cfg: &ObjectiveConfig,
) -> Result<(TensorId, LossBreakdown)> {
    cfg.validate()?;
    let (nll_id, per_task) =
        nll_task_weighted(tape, dec_logits, &target.sequence, &cfg.lambda_task)?;

    let mut total_id = tape.scale(nll_id, 1.0 - cfg.lambda_ctc);
    let mut ctc_value = 0.0;
    if cfg.lambda_ctc > 0.0 {
        let logits = ctc_logits.ok_or_else(|| {
            Error::Config("lambda_ctc > 0 but no CTC logits were provided".into())
        })?;
        let label = target.ctc_label.as_deref().ok_or_else(|| {
            Error::Config("lambda_ctc > 0 but the example has no transduction label".into())
        })?;
        let ctc_id = ctc_loss(tape, logits, label, cfg.blank_id)?;
        ctc_value = tape.scalar(ctc_id);
        let weighted = tape.scale(ctc_id, cfg.lambda_ctc);
        total_id = tape.add(total_id, weighted)?;
    }

    let mut ce_value = 0.0;
    if cfg.is_classification {
        let logits = cls_logits.ok_or_else(|| {
            Error::Config("is_classification set but no class logits were provided".into())
        })?;
        let label = target.class_label.ok_or_else(|| {
            Error::Config("is_classification set but the example has no class label".into())
        })?;
        let ce_id = encoder_ce(tape, logits, label)?;
        ce_value = tape.scalar(ce_id);
        total_id = tape.add(total_id, ce_id)?;
    }

    Ok((
        total_id,
        LossBreakdown {
            total: tape.scalar(total_id),
            nll: tape.scalar(nll_id),
            ctc: ctc_value,
            ce: ce_value,
            lambda_ctc: cfg.lambda_ctc,
            is_classification: cfg.is_classification,
            per_task,
        },
    ))
}
