//! Scratch: encoder-only learning against frozen concept topics.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::{load_dataset, COLOR_WORDS, POSITION_WORDS, SHAPE_WORDS};
use vhegan_core::pgbn::Mat;
use vhegan_core::tasks;
use vhegan_core::trainer::{train_step, TrainData, TrainState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr_enc: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let mut cfg = TrainConfig::load(Path::new("/tmp/c7probe/c7.cfg")).unwrap();
    cfg.steps = steps;
    cfg.lr_enc = lr_enc;
    cfg.gamma0 = 30.0;
    cfg.tlasgr_a = 0.0; // freeze topics
    let ds = load_dataset(Path::new("/tmp/c7probe/data2")).unwrap();
    let data = TrainData::prepare(&ds, &cfg).unwrap();
    let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
    // Concept topics: 4 colors, 3 shapes, 4 positions, rest ~ distractors.
    let v = ds.vocab.size();
    let k1 = cfg.widths[0];
    let mut phi = Mat::zeros(v, k1);
    let mut concept_words: Vec<Vec<u32>> = Vec::new();
    for w in COLOR_WORDS.iter().chain(SHAPE_WORDS.iter()).chain(POSITION_WORDS.iter()) {
        concept_words.push(vec![ds.vocab.id(w).unwrap()]);
    }
    for k in 0..k1 {
        if k < concept_words.len() {
            for row in 0..v { *phi.at_mut(row, k) = 0.02 / (v - 1) as f64; }
            *phi.at_mut(concept_words[k][0] as usize, k) = 0.98;
        } else {
            // distractor topics: uniform over the distractor tail
            for row in 0..v {
                *phi.at_mut(row, k) = if row >= 11 { 0.9 / (v - 11) as f64 } else { 0.1 / 11.0 };
            }
        }
        let s: f64 = (0..v).map(|r| phi.at(r, k)).sum();
        for row in 0..v { *phi.at_mut(row, k) /= s; }
    }
    state.topics.phis[0] = phi;
    // Neutralize GAN.
    let names: Vec<String> = state.discriminator.params.names().cloned().collect();
    for n in names { state.discriminator.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0); }
    state.adam_disc.hyper.lr = 0.0;
    for s in 0..steps {
        let m = train_step(&mut state, &data).unwrap();
        if s % 100 == 0 || s == steps - 1 { println!("step {s}: recon {:.2}", m.recon); }
    }
    let test = ds.test_indices();
    let n = 32.min(test.len());
    let (mut iv, mut tv) = (Vec::new(), Vec::new());
    for &gi in &test[..n] {
        iv.push(tasks::infer_from_image(&ds.images[gi], &state, gi as u64).unwrap().mean.comparison_vector());
        tv.push(tasks::infer_from_text(&ds.docs[gi], &state, gi as u64).unwrap().mean.comparison_vector());
    }
    let (mut wins, mut total) = (0.0, 0.0);
    for i in 0..n {
        let pos = tasks::cosine(&iv[i], &tv[i]);
        for j in 0..n {
            if j != i {
                let neg = tasks::cosine(&iv[i], &tv[j]);
                wins += if pos > neg { 1.0 } else if pos == neg { 0.5 } else { 0.0 };
                total += 1.0;
            }
        }
    }
    println!("encoder-only AUC with frozen concept topics: {:.3}", wins / total);
}
