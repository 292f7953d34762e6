//! Model assembly: configuration, vocabulary, parameter registration and
//! per-tape binding for the context encoder and the recognizer backbone.

use crate::asr::AsrBound;
use crate::context_encoder::CtxBound;
use crate::error::{Error, Result};
use crate::numerics::{DiffArray, NodeId, ParamStore, Tape};
use crate::phonology::Lexicon;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Start-of-sequence token id.
pub const SOS: usize = 0;
/// End-of-sequence token id.
pub const EOS: usize = 1;
/// Vocabulary id of the `<no-bias>` pseudo-token.
pub const NO_BIAS_ID: usize = 2;

/// Shared token index space: `<sos>`, `<eos>`, `<no-bias>`, then lexicon
/// entries in file order. The decoder and the text encoder keep separate
/// embedding tables over this one index space.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_lexicon(lex: &Lexicon) -> Vocab {
        let mut tokens: Vec<String> = vec!["<sos>".into(), "<eos>".into(), "<no-bias>".into()];
        tokens.extend(lex.iter().map(|(s, _)| s.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownVocabToken(token.to_string()))
    }

    pub fn ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Shared hidden width of encoders and decoder.
    pub d: usize,
    /// Context-attention projection width.
    pub d_h: usize,
    /// Stacked LSTM layers in each of the text and phoneme encoders.
    pub ctx_layers: usize,
    /// Stacked LSTM layers in the audio encoder.
    pub enc_layers: usize,
    /// Input feature dimension.
    pub feature_dim: usize,
    pub use_text_encoder: bool,
    pub use_phoneme_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_h: 64,
            ctx_layers: 2,
            enc_layers: 1,
            feature_dim: 16,
            use_text_encoder: true,
            use_phoneme_encoder: true,
        }
    }
}

impl ModelConfig {
    /// Production-scale preset (far too heavy for the test suite; kept as
    /// a named reference configuration).
    pub fn full_scale() -> Self {
        ModelConfig {
            d: 512,
            d_h: 512,
            ctx_layers: 3,
            enc_layers: 12,
            feature_dim: 80,
            use_text_encoder: true,
            use_phoneme_encoder: true,
        }
    }

    /// Recovers dimensions from a checkpoint's parameter shapes, so
    /// decoding needs no side channel beyond the data directory.
    pub fn infer_from_store(store: &ParamStore) -> Result<ModelConfig> {
        let need = |name: &str| -> Result<&DiffArray> {
            if !store.contains(name) {
                return Err(Error::contract(format!(
                    "checkpoint is missing parameter `{name}`"
                )));
            }
            Ok(store.get(name))
        };
        let d = need("ctx.fuse.b")?.shape()[0];
        let d_h = need("asr.ctxatt.wq")?.shape()[1];
        let feature_dim = need("asr.enc.proj.w")?.shape()[0];
        let mut ctx_layers = 0;
        while store.contains(&format!("ctx.text.lstm{ctx_layers}.wx")) {
            ctx_layers += 1;
        }
        let mut enc_layers = 0;
        while store.contains(&format!("asr.enc.lstm{enc_layers}.wx")) {
            enc_layers += 1;
        }
        if ctx_layers == 0 || enc_layers == 0 {
            return Err(Error::contract("checkpoint has no LSTM stacks"));
        }
        Ok(ModelConfig {
            d,
            d_h,
            ctx_layers,
            enc_layers,
            feature_dim,
            use_text_encoder: true,
            use_phoneme_encoder: true,
        })
    }
}

/// The full model: configuration plus the token/phoneme index spaces it
/// was built for.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub phoneme_count: usize,
}

impl Model {
    pub fn new(cfg: ModelConfig, vocab: Vocab, phoneme_count: usize) -> Model {
        assert!(cfg.d > 0 && cfg.d_h > 0 && cfg.ctx_layers > 0 && cfg.enc_layers > 0);
        Model {
            cfg,
            vocab,
            phoneme_count,
        }
    }

    /// Registers every parameter exactly once, seeded. Registration order
    /// is fixed and defines the checkpoint layout.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &self.cfg;
        let v = self.vocab.len();

        let reg = |store: &mut ParamStore, name: String, array: DiffArray| {
            store.register(&name, array).expect("unique parameter name");
        };

        // Context encoder.
        reg(&mut store, "ctx.text.embed".into(), DiffArray::uniform(vec![v, c.d], &mut rng));
        register_lstm_stack(&mut store, "ctx.text", c.ctx_layers, c.d, c.d, &mut rng);
        reg(
            &mut store,
            "ctx.phon.embed".into(),
            DiffArray::uniform(vec![self.phoneme_count, c.d], &mut rng),
        );
        register_lstm_stack(&mut store, "ctx.phon", c.ctx_layers, c.d, c.d, &mut rng);
        reg(&mut store, "ctx.fuse.w".into(), DiffArray::uniform(vec![2 * c.d, c.d], &mut rng));
        reg(&mut store, "ctx.fuse.b".into(), DiffArray::zeros(vec![c.d]));

        // Audio encoder.
        reg(
            &mut store,
            "asr.enc.proj.w".into(),
            DiffArray::uniform(vec![c.feature_dim, c.d], &mut rng),
        );
        reg(&mut store, "asr.enc.proj.b".into(), DiffArray::zeros(vec![c.d]));
        register_lstm_stack(&mut store, "asr.enc", c.enc_layers, c.d, c.d, &mut rng);

        // Decoder with audio attention.
        reg(&mut store, "asr.dec.embed".into(), DiffArray::uniform(vec![v, c.d], &mut rng));
        register_lstm_stack(&mut store, "asr.dec", 1, c.d, c.d, &mut rng);
        reg(&mut store, "asr.dec.att.wq".into(), DiffArray::uniform(vec![c.d, c.d], &mut rng));
        reg(
            &mut store,
            "asr.dec.att.wc".into(),
            DiffArray::uniform(vec![2 * c.d, c.d], &mut rng),
        );
        reg(&mut store, "asr.dec.att.bc".into(), DiffArray::zeros(vec![c.d]));

        // Context attention.
        reg(&mut store, "asr.ctxatt.wq".into(), DiffArray::uniform(vec![c.d, c.d_h], &mut rng));
        reg(&mut store, "asr.ctxatt.wk".into(), DiffArray::uniform(vec![c.d, c.d_h], &mut rng));
        reg(&mut store, "asr.ctxatt.wv".into(), DiffArray::uniform(vec![c.d, c.d_h], &mut rng));

        // Output head.
        reg(
            &mut store,
            "asr.out.w".into(),
            DiffArray::uniform(vec![c.d + c.d_h, v], &mut rng),
        );
        reg(&mut store, "asr.out.b".into(), DiffArray::zeros(vec![v]));

        // CTC head over the audio encoding; blank is the extra class.
        reg(
            &mut store,
            "asr.ctc.w".into(),
            DiffArray::uniform(vec![c.d, v + 1], &mut rng),
        );
        reg(&mut store, "asr.ctc.b".into(), DiffArray::zeros(vec![v + 1]));

        store
    }

    /// Mounts every parameter on the tape once.
    pub fn bind(&self, tape: &mut Tape, store: &ParamStore) -> Bound {
        let c = &self.cfg;
        Bound {
            ctx: CtxBound {
                text_embed: tape.param(store, "ctx.text.embed"),
                text_lstm: bind_lstm_stack(tape, store, "ctx.text", c.ctx_layers),
                phon_embed: tape.param(store, "ctx.phon.embed"),
                phon_lstm: bind_lstm_stack(tape, store, "ctx.phon", c.ctx_layers),
                fuse_w: tape.param(store, "ctx.fuse.w"),
                fuse_b: tape.param(store, "ctx.fuse.b"),
                use_text: c.use_text_encoder,
                use_phon: c.use_phoneme_encoder,
                d: c.d,
            },
            asr: AsrBound {
                enc_proj_w: tape.param(store, "asr.enc.proj.w"),
                enc_proj_b: tape.param(store, "asr.enc.proj.b"),
                enc_lstm: bind_lstm_stack(tape, store, "asr.enc", c.enc_layers),
                dec_embed: tape.param(store, "asr.dec.embed"),
                dec_lstm: bind_lstm(tape, store, "asr.dec.lstm0"),
                att_wq: tape.param(store, "asr.dec.att.wq"),
                att_wc: tape.param(store, "asr.dec.att.wc"),
                att_bc: tape.param(store, "asr.dec.att.bc"),
                ctxatt_wq: tape.param(store, "asr.ctxatt.wq"),
                ctxatt_wk: tape.param(store, "asr.ctxatt.wk"),
                ctxatt_wv: tape.param(store, "asr.ctxatt.wv"),
                out_w: tape.param(store, "asr.out.w"),
                out_b: tape.param(store, "asr.out.b"),
                ctc_w: tape.param(store, "asr.ctc.w"),
                ctc_b: tape.param(store, "asr.ctc.b"),
                d: c.d,
            },
        }
    }
}

/// All parameters of one model mounted on one tape.
pub struct Bound {
    pub ctx: CtxBound,
    pub asr: AsrBound,
}

/// One LSTM cell's parameters mounted on a tape.
#[derive(Clone, Copy)]
pub struct LstmBind {
    pub wx: NodeId,
    pub wh: NodeId,
    pub b: NodeId,
}

fn register_lstm_stack(
    store: &mut ParamStore,
    prefix: &str,
    layers: usize,
    d_in: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    for l in 0..layers {
        let input = if l == 0 { d_in } else { hidden };
        store
            .register(
                &format!("{prefix}.lstm{l}.wx"),
                DiffArray::uniform(vec![input, 4 * hidden], rng),
            )
            .expect("unique parameter name");
        store
            .register(
                &format!("{prefix}.lstm{l}.wh"),
                DiffArray::uniform(vec![hidden, 4 * hidden], rng),
            )
            .expect("unique parameter name");
        // Forget-gate bias starts at 1.0 (gate order: input, forget,
        // candidate, output).
        let mut b = vec![0.0; 4 * hidden];
        for x in b.iter_mut().skip(hidden).take(hidden) {
            *x = 1.0;
        }
        store
            .register(&format!("{prefix}.lstm{l}.b"), DiffArray::new(vec![4 * hidden], b))
            .expect("unique parameter name");
    }
}

fn bind_lstm(tape: &mut Tape, store: &ParamStore, name: &str) -> LstmBind {
    LstmBind {
        wx: tape.param(store, &format!("{name}.wx")),
        wh: tape.param(store, &format!("{name}.wh")),
        b: tape.param(store, &format!("{name}.b")),
    }
}

fn bind_lstm_stack(tape: &mut Tape, store: &ParamStore, prefix: &str, layers: usize) -> Vec<LstmBind> {
    (0..layers)
        .map(|l| bind_lstm(tape, store, &format!("{prefix}.lstm{l}")))
        .collect()
}
