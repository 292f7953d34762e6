//! Attention-based encoder-decoder backbone with the context-attention
//! head.
//!
//! The backbone is deliberately small: a unidirectional LSTM stack over
//! projected input features, a single-layer LSTM decoder with scaled-dot
//! attention over the audio encoding, and a biasing head that attends
//! over entity encodings. A linear head over the audio encoding feeds the
//! alignment-free loss.

use crate::error::{Error, Result};
use crate::model::{Bound, LstmBind, Model, SOS};
use crate::numerics::{lstm_cell, NodeId, Tape};

/// Recognizer parameters mounted on one tape.
pub struct AsrBound {
    pub enc_proj_w: NodeId,
    pub enc_proj_b: NodeId,
    pub enc_lstm: Vec<LstmBind>,
    pub dec_embed: NodeId,
    pub dec_lstm: LstmBind,
    pub att_wq: NodeId,
    pub att_wc: NodeId,
    pub att_bc: NodeId,
    pub ctxatt_wq: NodeId,
    pub ctxatt_wk: NodeId,
    pub ctxatt_wv: NodeId,
    pub out_w: NodeId,
    pub out_b: NodeId,
    pub ctc_w: NodeId,
    pub ctc_b: NodeId,
    pub d: usize,
}

/// Decoder recurrent state plus the emission history. The step counter is
/// always `emitted.len() + 1`.
pub struct DecodeState {
    pub h: NodeId,
    pub c: NodeId,
    pub emitted: Vec<usize>,
}

impl DecodeState {
    pub fn initial(tape: &mut Tape, d: usize) -> DecodeState {
        DecodeState {
            h: tape.zeros(vec![d]),
            c: tape.zeros(vec![d]),
            emitted: Vec::new(),
        }
    }

    pub fn step(&self) -> usize {
        self.emitted.len() + 1
    }
}

/// Encodes `frames` (M × feature_dim) into one d-vector per frame. No
/// temporal subsampling; M is preserved.
pub fn encode_audio(tape: &mut Tape, b: &AsrBound, frames: &[Vec<f64>]) -> Result<Vec<NodeId>> {
    if frames.is_empty() {
        return Err(Error::contract("cannot encode zero audio frames"));
    }
    let layers = &b.enc_lstm;
    let mut h: Vec<NodeId> = (0..layers.len()).map(|_| tape.zeros(vec![b.d])).collect();
    let mut c: Vec<NodeId> = (0..layers.len()).map(|_| tape.zeros(vec![b.d])).collect();
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let f = tape.leaf_vector(frame.clone());
        let proj = tape.vecmat(f, b.enc_proj_w);
        let mut x = tape.add(proj, b.enc_proj_b);
        for (l, lb) in layers.iter().enumerate() {
            let (h_new, c_new) = lstm_cell(tape, x, h[l], c[l], lb.wx, lb.wh, lb.b);
            h[l] = h_new;
            c[l] = c_new;
            x = h_new;
        }
        out.push(x);
    }
    Ok(out)
}

/// Per-frame logits of the alignment-free head: one `[V+1]` row per frame,
/// the extra class being the blank.
pub fn ctc_frame_logits(tape: &mut Tape, b: &AsrBound, audio: &[NodeId]) -> Vec<NodeId> {
    audio
        .iter()
        .map(|&e| {
            let z = tape.vecmat(e, b.ctc_w);
            tape.add(z, b.ctc_b)
        })
        .collect()
}

/// One decoder step: embeds the previous token, updates the recurrence,
/// attends over the audio encoding, and fuses the attention context into
/// the step representation.
pub fn decoder_step(
    tape: &mut Tape,
    b: &AsrBound,
    state: &DecodeState,
    prev_token: usize,
    audio: &[NodeId],
) -> Result<(NodeId, DecodeState)> {
    let vocab_rows = tape.shape(b.dec_embed)[0];
    assert!(
        prev_token < vocab_rows,
        "token id {} out of vocabulary ({})",
        prev_token,
        vocab_rows
    );
    let x = tape.row(b.dec_embed, prev_token);
    let (h, c) = lstm_cell(tape, x, state.h, state.c, b.dec_lstm.wx, b.dec_lstm.wh, b.dec_lstm.b);

    let q = tape.vecmat(h, b.att_wq);
    let inv_sqrt_d = 1.0 / (b.d as f64).sqrt();
    let dots = tape.multi_dot(q, audio);
    let scores = tape.scale(dots, inv_sqrt_d);
    let weights = tape.softmax(scores)?;
    let ctx = tape.weighted_sum(weights, audio);

    let cat = tape.concat(&[h, ctx]);
    let fused = tape.vecmat(cat, b.att_wc);
    let fused = tape.add(fused, b.att_bc);
    let d_n = tape.tanh(fused);

    let mut emitted = state.emitted.clone();
    if prev_token != SOS {
        emitted.push(prev_token);
    }
    Ok((d_n, DecodeState { h, c, emitted }))
}

/// Key/value projections of entity encodings. The projections do not
/// depend on the decoding step, so they are computed once per tape and
/// shared across steps (and across utterances of one batch).
pub struct EntityProjections {
    pub keys: Vec<NodeId>,
    pub values: Vec<NodeId>,
}

impl EntityProjections {
    pub fn subset(&self, members: &[usize]) -> EntityProjections {
        EntityProjections {
            keys: members.iter().map(|&i| self.keys[i]).collect(),
            values: members.iter().map(|&i| self.values[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub fn project_entities(tape: &mut Tape, b: &AsrBound, entity_rows: &[NodeId]) -> EntityProjections {
    EntityProjections {
        keys: entity_rows
            .iter()
            .map(|&n| tape.vecmat(n, b.ctxatt_wk))
            .collect(),
        values: entity_rows
            .iter()
            .map(|&n| tape.vecmat(n, b.ctxatt_wv))
            .collect(),
    }
}

/// A biasing list encoded on the current tape: fused entity rows plus
/// their attention projections, shared by every utterance of a batch.
pub struct EncodedList {
    pub rows: Vec<NodeId>,
    pub proj: EntityProjections,
}

pub fn encode_and_project(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    list: &crate::biasing::BiasingList,
) -> Result<EncodedList> {
    let rows =
        crate::context_encoder::encode_biasing_list(tape, &bound.ctx, &model.vocab, list)?;
    let proj = project_entities(tape, &bound.asr, &rows);
    Ok(EncodedList { rows, proj })
}

/// Context attention over entity encodings: selection probabilities, the
/// bias vector, and the per-entity value projections the bias vector sums.
pub struct ContextAttention {
    pub probs: NodeId,
    pub bias: NodeId,
    pub values: Vec<NodeId>,
}

/// Selection over the candidates: scaled-dot scores between the projected
/// step representation and each projected entity encoding,
/// softmax-normalised, then a value-projected weighted sum.
pub fn context_attention(
    tape: &mut Tape,
    b: &AsrBound,
    d_n: NodeId,
    proj: &EntityProjections,
) -> Result<ContextAttention> {
    if proj.is_empty() {
        return Err(Error::contract("context attention over zero candidates"));
    }
    let q = tape.vecmat(d_n, b.ctxatt_wq);
    let inv_sqrt_d = 1.0 / (b.d as f64).sqrt();
    let dots = tape.multi_dot(q, &proj.keys);
    let scores = tape.scale(dots, inv_sqrt_d);
    let probs = tape.softmax(scores)?;
    let bias = tape.weighted_sum(probs, &proj.values);
    Ok(ContextAttention {
        probs,
        bias,
        values: proj.values.clone(),
    })
}

/// One-shot variant projecting the rows on the fly.
pub fn context_attention_rows(
    tape: &mut Tape,
    b: &AsrBound,
    d_n: NodeId,
    entity_rows: &[NodeId],
) -> Result<ContextAttention> {
    let proj = project_entities(tape, b, entity_rows);
    context_attention(tape, b, d_n, &proj)
}

/// Token distribution for one step: softmax over the fused step and bias
/// representations.
pub fn predict_token(tape: &mut Tape, b: &AsrBound, d_n: NodeId, bias: NodeId) -> Result<NodeId> {
    let cat = tape.concat(&[d_n, bias]);
    let logits = tape.vecmat(cat, b.out_w);
    let logits = tape.add(logits, b.out_b);
    tape.softmax(logits)
}

/// Everything a teacher-forced pass produces that the losses consume.
pub struct TrainForward {
    /// One token distribution per target position.
    pub dists: Vec<NodeId>,
    /// One selection-probability vector per target position.
    pub selections: Vec<NodeId>,
    /// One step representation per target position.
    pub dec_states: Vec<NodeId>,
    /// Audio encoding, one node per frame.
    pub audio: Vec<NodeId>,
    /// Per-frame logits of the alignment-free head.
    pub ctc_logits: Vec<NodeId>,
}

/// Teacher-forced rollout over `targets`, returning every intermediate
/// the training objectives need. Produces exactly `targets.len()`
/// distributions and selection vectors.
pub fn forward_training(
    tape: &mut Tape,
    bound: &Bound,
    model: &Model,
    frames: &[Vec<f64>],
    targets: &[usize],
    list: &EncodedList,
) -> Result<TrainForward> {
    if targets.is_empty() {
        return Err(Error::contract("teacher forcing needs a non-empty transcript"));
    }
    let b = &bound.asr;
    let audio = encode_audio(tape, b, frames)?;
    let ctc_logits = ctc_frame_logits(tape, b, &audio);

    let mut state = DecodeState::initial(tape, model.cfg.d);
    let mut prev = SOS;
    let mut dists = Vec::with_capacity(targets.len());
    let mut selections = Vec::with_capacity(targets.len());
    let mut dec_states = Vec::with_capacity(targets.len());
    for &t in targets {
        let (d_n, next) = decoder_step(tape, b, &state, prev, &audio)?;
        let att = context_attention(tape, b, d_n, &list.proj)?;
        let dist = predict_token(tape, b, d_n, att.bias)?;
        dists.push(dist);
        selections.push(att.probs);
        dec_states.push(d_n);
        state = next;
        prev = t;
    }
    Ok(TrainForward {
        dists,
        selections,
        dec_states,
        audio,
        ctc_logits,
    })
}
