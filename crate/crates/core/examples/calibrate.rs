// Calibration probe: full pipeline timing + trend sizes.
use ctxbias_core::biasing::assemble_inference_list;
use ctxbias_core::hef::{decode, HefConfig, HefMode};
use ctxbias_core::metrics::{entity_error_rate, token_error_rate};
use ctxbias_core::model::{Model, ModelConfig, Vocab};
use ctxbias_core::synth::{generate, SynthConfig};
use ctxbias_core::training::{train, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let train_size: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let d: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(64);
    let noise: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
    let clip: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(5.0);

    let t0 = Instant::now();
    let synth_cfg = SynthConfig {
        train_size,
        dev_size: 100,
        test_size: 100,
        noise_std: noise,
        seed: 1,
        ..SynthConfig::default()
    };
    let data = generate(&synth_cfg).unwrap();
    println!("gen: {:.1}s ({} train)", t0.elapsed().as_secs_f64(), data.train.len());

    let model = Model::new(
        ModelConfig { d, d_h: d, ..ModelConfig::default() },
        Vocab::from_lexicon(&data.lexicon),
        data.phonemes.len(),
    );
    let tcfg = TrainConfig { epochs, batch_size: batch, lr, seed: 1, clip_norm: clip, ..TrainConfig::default() };
    let t1 = Instant::now();
    let out = train(&model, &data, &tcfg, |r| {
        if r.step % 20 == 0 {
            eprintln!("  step {}: total={:.3} asr={:.3} ctc={:.3} ent={:.3} ced={:.3}",
                r.step, r.losses.total, r.losses.asr, r.losses.ctc, r.losses.entity, r.losses.ced);
        }
    }).unwrap();
    println!("train: {:.1}s", t1.elapsed().as_secs_f64());
    for e in &out.log {
        println!("  epoch {}: train_total={:.3} dev_total={:.3} dev_asr={:.3} dev_ent={:.3} dev_ced={:.3}",
            e.epoch, e.train.total, e.dev.total, e.dev.asr, e.dev.entity, e.dev.ced);
    }
    println!("best epoch: {}", out.best_epoch);

    // Decode test set: biased (GT + 50 distractors) vs no-bias.
    let t2 = Instant::now();
    let store = &out.store;
    let mut refs: Vec<(Vec<String>, Vec<ctxbias_core::biasing::EntitySpan>)> = Vec::new();
    let mut hyp_biased: Vec<Vec<String>> = Vec::new();
    let mut hyp_nobias: Vec<Vec<String>> = Vec::new();
    let hef = HefConfig { k: 20, sigma: 0.9, mode: HefMode::Copy, enabled: true };

    for u in &data.test {
        let gt: Vec<_> = u.spans.iter().map(|s| {
            let idx = data.inventory.index_of_entity_id(s.bias_id).unwrap();
            data.inventory.entry(idx).clone()
        }).collect();
        let pool: Vec<_> = data.inventory.entries().iter().skip(1)
            .filter(|e| !gt.iter().any(|g| g.id == e.id))
            .cloned().collect();
        let list = assemble_inference_list(&gt, &pool, 50, 1000 + u.id as u64, &data.phonemes).unwrap();
        let nobias = assemble_inference_list(&[], &[], 0, 0, &data.phonemes).unwrap();
        let max_len = u.tokens.len() + 6;
        let b = decode(&model, store, &u.frames, &list, &hef, max_len).unwrap();
        let n = decode(&model, store, &u.frames, &nobias, &hef, max_len).unwrap();
        refs.push((u.tokens.clone(), u.spans.clone()));
        hyp_biased.push(b.token_strings(&model));
        hyp_nobias.push(n.token_strings(&model));
    }
    println!("decode: {:.1}s", t2.elapsed().as_secs_f64());

    let ter_b = token_error_rate(&refs.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(), &hyp_biased).unwrap();
    let ter_n = token_error_rate(&refs.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(), &hyp_nobias).unwrap();
    let eer_b = entity_error_rate(&refs, &hyp_biased).unwrap();
    let eer_n = entity_error_rate(&refs, &hyp_nobias).unwrap();
    println!("biased:  TER={:.4} NE-ER={:.4}", ter_b, eer_b);
    println!("no-bias: TER={:.4} NE-ER={:.4}", ter_n, eer_n);
    if eer_n > 0.0 {
        println!("NE-ER relative reduction: {:.1}%", (eer_n - eer_b) / eer_n * 100.0);
    }
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
