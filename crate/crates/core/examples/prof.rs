// temp: time one batch broken into phases
use ctxbias_core::asr::encode_and_project;
use ctxbias_core::model::{Model, ModelConfig, Vocab};
use ctxbias_core::numerics::Tape;
use ctxbias_core::synth::{generate, SynthConfig};
use ctxbias_core::training::*;
use std::time::Instant;

fn main() {
    let data = generate(&SynthConfig { train_size: 50, dev_size: 5, test_size: 5, seed: 1, ..SynthConfig::default() }).unwrap();
    let model = Model::new(ModelConfig::default(), Vocab::from_lexicon(&data.lexicon), data.phonemes.len());
    let store = model.init_params(1);
    let negs = mine_all_negatives(&data.inventory, 3);
    let utts: Vec<_> = data.train.iter().take(10).collect();
    let batch = build_batch_list(&utts, &data, &negs).unwrap();

    for round in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, &store);
        let encoded = encode_and_project(&mut tape, &bound, &model, &batch.list).unwrap();
        let t1 = Instant::now();
        let n_after_list = tape.len();
        let mut totals = Vec::new();
        for u in &utts {
            let ids = model.vocab.ids(&u.tokens).unwrap();
            let mut targets = ids.clone();
            targets.push(ctxbias_core::model::EOS);
            let fwd = ctxbias_core::asr::forward_training(&mut tape, &bound, &model, &u.frames, &targets, &encoded).unwrap();
            let asr = ctxbias_core::losses::asr_nll(&mut tape, &fwd.dists, &targets);
            let ctc = ctxbias_core::losses::ctc_loss(&mut tape, &fwd.ctc_logits, &ids).unwrap();
            let sum = tape.add(asr, ctc);
            totals.push(sum);
        }
        let mut sum = totals[0];
        for &t in &totals[1..] { sum = tape.add(sum, t); }
        let loss = tape.scale(sum, 0.1);
        let t2 = Instant::now();
        let n_after_fwd = tape.len();
        let grads = tape.backward(loss).unwrap();
        let t3 = Instant::now();
        let _ = grads;
        if round == 2 {
            println!("list encode: {:.1} ms ({} nodes)", (t1-t0).as_secs_f64()*1e3, n_after_list);
            println!("forward:     {:.1} ms ({} nodes)", (t2-t1).as_secs_f64()*1e3, n_after_fwd - n_after_list);
            println!("backward:    {:.1} ms", (t3-t2).as_secs_f64()*1e3);
        }
    }
}
