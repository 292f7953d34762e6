//! Phoneme-enriched entity encoding.
//!
//! Each biasing-list entry is encoded twice — its surface tokens through a
//! stacked-LSTM text encoder and its phoneme sequence through a
//! stacked-LSTM phoneme encoder. The two final hidden states are
//! concatenated and fused by one linear layer into a single d-vector.
//! The `<no-bias>` entry at index 0 runs through the same pathway.

use crate::biasing::BiasingList;
use crate::error::{Error, Result};
use crate::model::{LstmBind, Vocab};
use crate::numerics::{lstm_cell, NodeId, Tape};

/// Context-encoder parameters mounted on one tape.
pub struct CtxBound {
    pub text_embed: NodeId,
    pub text_lstm: Vec<LstmBind>,
    pub phon_embed: NodeId,
    pub phon_lstm: Vec<LstmBind>,
    pub fuse_w: NodeId,
    pub fuse_b: NodeId,
    pub use_text: bool,
    pub use_phon: bool,
    pub d: usize,
}

/// Runs an id sequence through an embedding table and a stacked LSTM;
/// returns the final hidden state of the top layer.
fn encode_sequence(
    tape: &mut Tape,
    embed: NodeId,
    layers: &[LstmBind],
    ids: &[usize],
    d: usize,
) -> NodeId {
    assert!(!ids.is_empty(), "cannot encode an empty sequence");
    let mut h: Vec<NodeId> = (0..layers.len()).map(|_| tape.zeros(vec![d])).collect();
    let mut c: Vec<NodeId> = (0..layers.len()).map(|_| tape.zeros(vec![d])).collect();
    for &id in ids {
        let mut x = tape.row(embed, id);
        for (l, lb) in layers.iter().enumerate() {
            let (h_new, c_new) = lstm_cell(tape, x, h[l], c[l], lb.wx, lb.wh, lb.b);
            h[l] = h_new;
            c[l] = c_new;
            x = h_new;
        }
    }
    *h.last().expect("at least one layer")
}

/// Encodes one entity into its fused d-vector:
/// `(text ⊕ phoneme) · W + b`, each branch contributing the final hidden
/// state of its top LSTM layer. A disabled branch contributes zeros.
pub fn encode_entity(
    tape: &mut Tape,
    b: &CtxBound,
    vocab: &Vocab,
    surface: &[String],
    phonemes: &[usize],
) -> Result<NodeId> {
    let text = if b.use_text {
        let ids = vocab.ids(surface)?;
        encode_sequence(tape, b.text_embed, &b.text_lstm, &ids, b.d)
    } else {
        tape.zeros(vec![b.d])
    };
    let phon = if b.use_phon {
        let rows = tape.shape(b.phon_embed)[0];
        for &p in phonemes {
            if p >= rows {
                return Err(Error::UnknownPhoneme(format!("#{p}")));
            }
        }
        encode_sequence(tape, b.phon_embed, &b.phon_lstm, phonemes, b.d)
    } else {
        tape.zeros(vec![b.d])
    };
    let cat = tape.concat(&[text, phon]);
    let fused = tape.vecmat(cat, b.fuse_w);
    Ok(tape.add(fused, b.fuse_b))
}

/// Encodes every list entry in order; row `l` is `encode_entity` of entry
/// `l`, so rows are independent of one another.
pub fn encode_biasing_list(
    tape: &mut Tape,
    b: &CtxBound,
    vocab: &Vocab,
    list: &BiasingList,
) -> Result<Vec<NodeId>> {
    list.entries()
        .iter()
        .map(|e| encode_entity(tape, b, vocab, &e.surface, e.phonemes.as_slice()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::biasing::Entity;
    use crate::model::{Model, ModelConfig};
    use crate::numerics::{GradMap, ParamStore};
    use crate::phonology::{Lexicon, PhonemeInventory, PhonemeSequence};

    fn setup() -> (Model, PhonemeInventory, Lexicon) {
        let mut inv = PhonemeInventory::new();
        let mut lex = Lexicon::new();
        for t in 0..6 {
            let p1 = inv.intern(&format!("a{t}"));
            let p2 = inv.intern(&format!("b{t}"));
            lex.insert(&format!("tok{t}"), PhonemeSequence::new(vec![p1, p2]))
                .unwrap();
        }
        let vocab = Vocab::from_lexicon(&lex);
        let model = Model::new(
            ModelConfig {
                d: 5,
                d_h: 5,
                ctx_layers: 2,
                enc_layers: 1,
                feature_dim: 3,
                ..ModelConfig::default()
            },
            vocab,
            inv.len(),
        );
        (model, inv, lex)
    }

    fn zero_store(model: &Model) -> ParamStore {
        let mut store = model.init_params(0);
        let names: Vec<String> = store.names().map(String::from).collect();
        for name in names {
            let a = store.get_mut(&name);
            let zeros = vec![0.0; a.len()];
            a.values_mut().copy_from_slice(&zeros);
        }
        store
    }

    #[test]
    fn zero_parameters_yield_fusion_bias() {
        let (model, _, _) = setup();
        let mut store = zero_store(&model);
        store
            .get_mut("ctx.fuse.b")
            .values_mut()
            .copy_from_slice(&[0.1, 0.2, 0.3, 0.4, 0.5]);

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &store);
        let out = encode_entity(
            &mut tape,
            &bound.ctx,
            &model.vocab,
            &["tok0".to_string(), "tok1".to_string()],
            &[1, 2, 3],
        )
        .unwrap();
        assert_eq!(tape.values(out), &[0.1, 0.2, 0.3, 0.4, 0.5]);
    }

    #[test]
    fn oov_token_is_a_hard_error() {
        let (model, _, _) = setup();
        let store = model.init_params(1);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &store);
        let err = encode_entity(
            &mut tape,
            &bound.ctx,
            &model.vocab,
            &["nonexistent".to_string()],
            &[1],
        )
        .unwrap_err();
        assert!(err.to_string().contains("nonexistent"));

        let err = encode_entity(&mut tape, &bound.ctx, &model.vocab, &["tok0".into()], &[999])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownPhoneme(_)));
    }

    #[test]
    fn identical_surface_different_phonemes_differ() {
        let (model, _, _) = setup();
        let store = model.init_params(7);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &store);
        let a = encode_entity(&mut tape, &bound.ctx, &model.vocab, &["tok0".into()], &[1, 2])
            .unwrap();
        let b = encode_entity(&mut tape, &bound.ctx, &model.vocab, &["tok0".into()], &[1, 5])
            .unwrap();
        assert_ne!(tape.values(a), tape.values(b));
    }

    #[test]
    fn list_rows_are_independent_of_other_entries() {
        let (model, inv, _) = setup();
        let store = model.init_params(3);
        let entity = |id: usize, tok: &str, ph: &[usize]| {
            Entity::new(id, vec![tok.to_string()], PhonemeSequence::new(ph.to_vec())).unwrap()
        };

        let mut list_a = BiasingList::new(&inv);
        list_a.push(entity(1, "tok1", &[1, 2])).unwrap();
        list_a.push(entity(2, "tok2", &[3, 4])).unwrap();

        let mut list_b = BiasingList::new(&inv);
        list_b.push(entity(2, "tok2", &[3, 4])).unwrap();
        list_b.push(entity(1, "tok1", &[1, 2])).unwrap();

        let encode = |list: &BiasingList| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, &store);
            encode_biasing_list(&mut tape, &bound.ctx, &model.vocab, list)
                .unwrap()
                .into_iter()
                .map(|id| tape.values(id).to_vec())
                .collect()
        };
        let rows_a = encode(&list_a);
        let rows_b = encode(&list_b);
        // Row for tok1 is bit-identical regardless of its position.
        assert_eq!(rows_a[1], rows_b[2]);
        assert_eq!(rows_a[2], rows_b[1]);
        assert_eq!(rows_a[0], rows_b[0]);
    }

    #[test]
    fn rows_match_per_entity_encoding() {
        let (model, inv, _) = setup();
        let store = model.init_params(5);
        let mut list = BiasingList::new(&inv);
        for t in 0..3 {
            list.push(
                Entity::new(
                    t + 1,
                    vec![format!("tok{t}")],
                    PhonemeSequence::new(vec![t + 1, t + 2]),
                )
                .unwrap(),
            )
            .unwrap();
        }

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &store);
        let rows = encode_biasing_list(&mut tape, &bound.ctx, &model.vocab, &list).unwrap();
        for (l, row) in rows.iter().enumerate() {
            let e = list.entry(l);
            let single =
                encode_entity(&mut tape, &bound.ctx, &model.vocab, &e.surface, e.phonemes.as_slice())
                    .unwrap();
            assert_eq!(tape.values(*row), tape.values(single));
        }
        assert_eq!(rows.len(), list.len());
    }

    #[test]
    fn output_dimension_fixed_regardless_of_lengths() {
        let (model, _, _) = setup();
        let store = model.init_params(2);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &store);
        for (surface, phon) in [
            (vec!["tok0".to_string()], vec![1usize]),
            (
                vec!["tok1".into(), "tok2".into(), "tok3".into()],
                vec![1, 2, 3, 4, 5, 6],
            ),
        ] {
            let out = encode_entity(&mut tape, &bound.ctx, &model.vocab, &surface, &phon).unwrap();
            assert_eq!(tape.shape(out), &[5]);
        }
    }

    #[test]
    fn gradients_flow_into_all_three_parameter_groups() {
        // ‖encode_entity‖² against central differences.
        let (model, _, _) = setup();
        let mut store = model.init_params(9);
        let names = [
            "ctx.text.embed",
            "ctx.text.lstm0.wx",
            "ctx.text.lstm1.wh",
            "ctx.phon.embed",
            "ctx.phon.lstm0.b",
            "ctx.fuse.w",
            "ctx.fuse.b",
        ];
        let max_err = crate::numerics::grad_check(&mut store, &names, 1e-5, |s| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, s);
            let enc = encode_entity(
                &mut tape,
                &bound.ctx,
                &model.vocab,
                &["tok0".to_string(), "tok4".to_string()],
                &[2, 7, 4],
            )?;
            let sq = tape.mul(enc, enc);
            let loss = tape.sum(sq);
            let grads = tape.backward(loss)?;
            let map = tape.param_grad_map(&grads);
            Ok((tape.scalar(loss), map))
        })
        .unwrap();
        assert!(max_err < 1e-4, "max_err = {max_err}");
    }

    #[test]
    fn disabled_branch_contributes_zeros() {
        let (model, _, _) = setup();
        let mut no_phon = model.clone();
        no_phon.cfg.use_phoneme_encoder = false;
        let store = model.init_params(4);

        let mut tape = Tape::new();
        let bound = no_phon.bind(&mut tape, &store);
        let with_ph1 =
            encode_entity(&mut tape, &bound.ctx, &model.vocab, &["tok0".into()], &[1]).unwrap();
        let with_ph2 =
            encode_entity(&mut tape, &bound.ctx, &model.vocab, &["tok0".into()], &[5]).unwrap();
        // Phoneme branch off: phonemes cannot influence the encoding.
        assert_eq!(tape.values(with_ph1), tape.values(with_ph2));
    }
}
