//! Scratch: single-step descent check on one fixed batch.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::load_dataset;
use vhegan_core::trainer::{train_step, TrainData, TrainState};

fn main() {
    let mut cfg = TrainConfig::load(Path::new("/tmp/c7probe/c7.cfg")).unwrap();
    cfg.gamma0 = 30.0;
    cfg.lr_enc = 1e-3;
    cfg.tlasgr_a = 0.0;
    let ds = load_dataset(Path::new("/tmp/c7probe/data2")).unwrap();
    let data = TrainData::prepare(&ds, &cfg).unwrap();
    let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
    let names: Vec<String> = state.discriminator.params.names().cloned().collect();
    for n in names { state.discriminator.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0); }
    state.adam_disc.hyper.lr = 0.0;
    // Same batch every "step": force step counter back so batch + eps repeat.
    for i in 0..30 {
        let m = train_step(&mut state, &data).unwrap();
        state.step = 0; // repeat the same batch and noise
        state.metrics.clear();
        if i % 5 == 0 || i == 29 {
            println!("iter {i}: recon {:.3} kl {:?}", m.recon, m.kls.iter().map(|k| (k*100.0).round()/100.0).collect::<Vec<_>>());
        }
    }
}
