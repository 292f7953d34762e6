//! The four training objectives and their combination.

use crate::biasing::EntityIndexSequence;
use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Contrastive-disambiguation settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CedConfig {
    /// Temperature controlling the sharpness of the contrast.
    pub tau: f64,
}

impl Default for CedConfig {
    fn default() -> Self {
        CedConfig { tau: 0.1 }
    }
}

/// Scalar values of one combined loss, logged per step as one JSON line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub asr: f64,
    pub ctc: f64,
    pub entity: f64,
    pub ced: f64,
    pub total: f64,
}

/// The four loss nodes before combination.
pub struct LossParts {
    pub asr: NodeId,
    pub ctc: NodeId,
    pub entity: NodeId,
    pub ced: NodeId,
}

/// Sequence negative log-likelihood: `-Σ log p(t_n)` over the per-step
/// token distributions. The sum is canonical; see [`asr_nll_mean`] for the
/// per-token variant.
pub fn asr_nll(tape: &mut Tape, dists: &[NodeId], refs: &[usize]) -> NodeId {
    assert_eq!(
        dists.len(),
        refs.len(),
        "{} distributions vs {} reference tokens",
        dists.len(),
        refs.len()
    );
    let mut acc = tape.leaf_scalar(0.0);
    for (&dist, &t) in dists.iter().zip(refs) {
        let lp = tape.ln(dist);
        let term = tape.nll_gather(lp, t);
        acc = tape.add(acc, term);
    }
    acc
}

/// Mean-per-token variant of [`asr_nll`].
pub fn asr_nll_mean(tape: &mut Tape, dists: &[NodeId], refs: &[usize]) -> NodeId {
    let sum = asr_nll(tape, dists, refs);
    tape.scale(sum, 1.0 / refs.len().max(1) as f64)
}

/// Alignment-marginalised loss over per-frame logits `[M × (V'+1)]`, the
/// last class being the blank. Runs the forward algorithm in log space
/// over the blank-interleaved label sequence; only reachable lattice
/// cells are materialised.
pub fn ctc_loss(tape: &mut Tape, frame_logits: &[NodeId], refs: &[usize]) -> Result<NodeId> {
    let m = frame_logits.len();
    if m == 0 {
        return Err(Error::contract("no frames for alignment loss"));
    }
    let classes = tape.shape(frame_logits[0])[0];
    let blank = classes - 1;
    for &r in refs {
        assert!(r < blank, "label {} collides with blank class {}", r, blank);
    }
    let repeats = refs.windows(2).filter(|w| w[0] == w[1]).count();
    if m < refs.len() + repeats {
        return Err(Error::CtcInfeasible {
            ref_len: refs.len(),
            frames: m,
        });
    }

    let log_probs: Vec<NodeId> = frame_logits
        .iter()
        .map(|&z| tape.log_softmax(z))
        .collect::<Result<_>>()?;

    // Blank-interleaved label sequence: blank at even positions.
    let s_total = 2 * refs.len() + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            refs[s / 2]
        }
    };
    let lo = |t: usize| -> usize { s_total.saturating_sub(2 * (m - t)) };
    let hi = |t: usize| -> usize { (2 * (t + 1) - 1).min(s_total - 1) };

    let mut alpha: Vec<Option<NodeId>> = vec![None; s_total];
    for s in lo(0)..=hi(0) {
        // Only states 0 and 1 can start.
        if s <= 1 {
            alpha[s] = Some(tape.index(log_probs[0], ext(s)));
        }
    }
    for (t, &lp) in log_probs.iter().enumerate().skip(1) {
        let mut next: Vec<Option<NodeId>> = vec![None; s_total];
        for s in lo(t)..=hi(t) {
            let mut terms: Vec<NodeId> = Vec::with_capacity(3);
            if let Some(a) = alpha[s] {
                terms.push(a);
            }
            if s >= 1 {
                if let Some(a) = alpha[s - 1] {
                    terms.push(a);
                }
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                if let Some(a) = alpha[s - 2] {
                    terms.push(a);
                }
            }
            if terms.is_empty() {
                continue;
            }
            let combined = if terms.len() == 1 {
                terms[0]
            } else {
                let stacked = tape.concat(&terms);
                tape.logsumexp(stacked)
            };
            let emit = tape.index(lp, ext(s));
            next[s] = Some(tape.add(combined, emit));
        }
        alpha = next;
    }

    let mut finals: Vec<NodeId> = Vec::with_capacity(2);
    if let Some(a) = alpha[s_total - 1] {
        finals.push(a);
    }
    if s_total >= 2 {
        if let Some(a) = alpha[s_total - 2] {
            finals.push(a);
        }
    }
    assert!(!finals.is_empty(), "no reachable final lattice state");
    let total = if finals.len() == 1 {
        finals[0]
    } else {
        let stacked = tape.concat(&finals);
        tape.logsumexp(stacked)
    };
    Ok(tape.scale(total, -1.0))
}

/// Entity-selection loss: `-Σ log s_{n, β_n}` over the per-step selection
/// probabilities.
pub fn entity_loss(
    tape: &mut Tape,
    selections: &[NodeId],
    beta: &EntityIndexSequence,
) -> Result<NodeId> {
    assert_eq!(
        selections.len(),
        beta.len(),
        "{} selection vectors vs {} labels",
        selections.len(),
        beta.len()
    );
    let mut acc = tape.leaf_scalar(0.0);
    for (&s, &b) in selections.iter().zip(beta.as_slice()) {
        let candidates = tape.shape(s)[0];
        if b >= candidates {
            return Err(Error::contract(format!(
                "entity label {b} out of range for {candidates} candidates"
            )));
        }
        let lp = tape.ln(s);
        let term = tape.nll_gather(lp, b);
        acc = tape.add(acc, term);
    }
    Ok(acc)
}

/// Contrastive disambiguation for one step: the step representation is
/// pulled toward the correct entity encoding and away from the hard
/// negatives. Computed through a log-sum-exp of temperature-scaled cosine
/// similarities; an empty negative set yields exactly zero.
pub fn ced_loss(
    tape: &mut Tape,
    d_n: NodeId,
    positive: NodeId,
    negatives: &[NodeId],
    cfg: &CedConfig,
) -> Result<NodeId> {
    assert!(cfg.tau > 0.0, "temperature must be positive, got {}", cfg.tau);
    let sim_p = tape.cosine(d_n, positive)?;
    let sim_p = tape.scale(sim_p, 1.0 / cfg.tau);
    let mut sims = vec![sim_p];
    for &n in negatives {
        let s = tape.cosine(d_n, n)?;
        sims.push(tape.scale(s, 1.0 / cfg.tau));
    }
    let stacked = tape.concat(&sims);
    let lse = tape.logsumexp(stacked);
    let neg_p = tape.scale(sim_p, -1.0);
    Ok(tape.add(lse, neg_p))
}

/// Sums [`ced_loss`] over exactly the steps where `β_n != 0`, using that
/// entity's encoding as the positive and its mined negatives' encodings
/// as negatives. `negatives` maps list indices to the list indices of
/// their negatives and must cover every entity appearing in `beta`.
pub fn apply_ced_over_utterance(
    tape: &mut Tape,
    dec_states: &[NodeId],
    beta: &EntityIndexSequence,
    entity_rows: &[NodeId],
    negatives: &BTreeMap<usize, Vec<usize>>,
    cfg: &CedConfig,
) -> Result<NodeId> {
    assert_eq!(dec_states.len(), beta.len());
    let mut acc = tape.leaf_scalar(0.0);
    for (&d_n, &b) in dec_states.iter().zip(beta.as_slice()) {
        if b == 0 {
            continue;
        }
        let neg_ids = negatives.get(&b).ok_or_else(|| {
            Error::contract(format!("no hard negatives for entity at list index {b}"))
        })?;
        let neg_rows: Vec<NodeId> = neg_ids.iter().map(|&i| entity_rows[i]).collect();
        let term = ced_loss(tape, d_n, entity_rows[b], &neg_rows, cfg)?;
        acc = tape.add(acc, term);
    }
    Ok(acc)
}

/// Combines the four losses:
/// `λ·asr + (1−λ)·ctc + m_entity·entity + m_ced·ced`.
/// A non-finite part is a hard error naming the offending loss.
pub fn total_loss(
    tape: &mut Tape,
    parts: &LossParts,
    lambda: f64,
    entity_mult: f64,
    ced_mult: f64,
) -> Result<(NodeId, LossBreakdown)> {
    assert!((0.0..=1.0).contains(&lambda), "lambda {lambda} outside [0, 1]");
    let values = [
        ("asr", tape.scalar(parts.asr)),
        ("ctc", tape.scalar(parts.ctc)),
        ("entity", tape.scalar(parts.entity)),
        ("ced", tape.scalar(parts.ced)),
    ];
    for (name, v) in values {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }

    let asr_w = tape.scale(parts.asr, lambda);
    let ctc_w = tape.scale(parts.ctc, 1.0 - lambda);
    let ent_w = tape.scale(parts.entity, entity_mult);
    let ced_w = tape.scale(parts.ced, ced_mult);
    let a = tape.add(asr_w, ctc_w);
    let b = tape.add(ent_w, ced_w);
    let total = tape.add(a, b);

    let breakdown = LossBreakdown {
        asr: tape.scalar(parts.asr),
        ctc: tape.scalar(parts.ctc),
        entity: tape.scalar(parts.entity),
        ced: tape.scalar(parts.ced),
        total: tape.scalar(total),
    };
    Ok((total, breakdown))
}
