//! Scratch: recon headroom of text-side Gibbs vs the encoder.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::load_dataset;
use vhegan_core::pgbn::log_lik_poisson;
use vhegan_core::tasks;
use vhegan_core::trainer::load_checkpoint;

fn main() {
    let cfg = TrainConfig::load(Path::new("/tmp/c7probe/g30/cfg")).unwrap();
    let ds = load_dataset(Path::new("/tmp/c7probe/data")).unwrap();
    let state = load_checkpoint::<f32>(Path::new("/tmp/c7probe/g30/run/final.vhec"), &cfg, ds.vocab.size()).unwrap();
    let mut gibbs_ll = 0.0;
    let mut enc_ll = 0.0;
    let n = 24;
    for i in 0..n {
        let gi = i * 13 % ds.len();
        let q = tasks::infer_from_text(&ds.docs[gi], &state, gi as u64).unwrap();
        gibbs_ll += log_lik_poisson(&ds.docs[gi], &state.topics.phis[0], &q.mean.thetas[0]);
        let qi = tasks::infer_from_image(&ds.images[gi], &state, gi as u64).unwrap();
        enc_ll += log_lik_poisson(&ds.docs[gi], &state.topics.phis[0], &qi.mean.thetas[0]);
    }
    println!("mean ln p(t|theta): gibbs {:.2}  encoder-mean {:.2}", gibbs_ll / n as f64, enc_ll / n as f64);
    // Top words of a few projected topics.
    for k in 0..6 {
        let dist = state.topics.project_topic(1, k).unwrap();
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[b].partial_cmp(&dist[a]).unwrap());
        let words: Vec<&str> = order[..4].iter().map(|&w| ds.vocab.token(w as u32)).collect();
        println!("topic {k}: {words:?}");
    }
}
