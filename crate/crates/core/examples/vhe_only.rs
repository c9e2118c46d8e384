//! Scratch: train with the adversarial path neutralized (zero, frozen D)
//! to isolate the VHE learning dynamics.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::load_dataset;
use vhegan_core::tasks;
use vhegan_core::trainer::{train_step, TrainData, TrainState};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr_enc: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let gamma0: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30.0);
    let mut cfg = TrainConfig::load(Path::new("/tmp/c7probe/c7.cfg")).unwrap();
    cfg.steps = steps;
    cfg.lr_enc = lr_enc;
    cfg.gamma0 = gamma0;
    let ds = load_dataset(Path::new("/tmp/c7probe/data")).unwrap();
    let data = TrainData::prepare(&ds, &cfg).unwrap();
    let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
    // Neutralize the adversarial path: zero frozen discriminator.
    let names: Vec<String> = state.discriminator.params.names().cloned().collect();
    for n in names {
        state.discriminator.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    state.adam_disc.hyper.lr = 0.0;
    for s in 0..steps {
        let m = train_step(&mut state, &data).unwrap();
        if s % 100 == 0 || s == steps - 1 {
            println!("step {s}: recon {:.2} kls {:?}", m.recon, m.kls.iter().map(|k| (k * 10.0).round() / 10.0).collect::<Vec<_>>());
        }
    }
    // Retrieval AUC over 32 test pairs.
    let test = ds.test_indices();
    let n = 32.min(test.len());
    let mut iv = Vec::new();
    let mut tv = Vec::new();
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
    println!("VHE-only AUC: {:.3}", wins / total);
}
