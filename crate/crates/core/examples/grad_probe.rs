//! Scratch: per-document feature-gradient differential of the VHE loss.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::load_dataset;
use vhegan_core::encoder::{batch_docs, batch_images, elbo_nodes, ln_factorial_rows, posterior_nodes, sample_ln_u, upward_nodes};
use vhegan_core::tensor::graph::insert_params;
use vhegan_core::tensor::{Graph, Tensor};
use vhegan_core::rng::{Purpose, RandomStream};
use vhegan_core::trainer::{load_checkpoint, TrainState};

fn main() {
    let mut cfg = TrainConfig::load(Path::new("/tmp/c7probe/pass600/cfg")).unwrap();
    cfg.steps = 600;
    let ds = load_dataset(Path::new("/tmp/c7probe/data2")).unwrap();
    let use_ck = std::env::args().nth(1).map(|s| s == "trained").unwrap_or(false);
    let state = if use_ck {
        load_checkpoint::<f64>(Path::new("/tmp/c7probe/pass600/run/final.vhec"), &cfg, ds.vocab.size()).ok()
    } else { None };
    let state = match state {
        Some(s) => s,
        None => TrainState::<f64>::init(&cfg, ds.vocab.size()).unwrap(),
    };
    // Two docs of very different classes.
    let (a, b) = (0usize, 300usize);
    println!("classes: {} vs {}", ds.classes[a], ds.classes[b]);
    let mut g = Graph::<f64>::new();
    let pmap = insert_params(&mut g, &state.encoder.params, false);
    let imgs = batch_images::<f64>(&[&ds.images[a], &ds.images[b]]).unwrap();
    let img_node = g.leaf(imgs); // trainable so we can read d(loss)/d(image)... via fx below
    let fx = state.encoder.features_node(&mut g, &pmap, img_node).unwrap();
    println!("fx rows: {:?} / {:?}", &g.value(fx).data()[..6], &g.value(fx).data()[48..54]);
    let heads = upward_nodes(&mut g, &pmap, &state.encoder.cfg, fx).unwrap();
    let mut rng = RandomStream::new(1, Purpose::Test, 0, 0);
    let ln_u: Vec<Tensor<f64>> = cfg.widths.iter().map(|&k| sample_ln_u::<f64>(2, k, &mut rng)).collect();
    let post = posterior_nodes(&mut g, &heads, &state.topics, 2, &ln_u).unwrap();
    let docs = vec![&ds.docs[a], &ds.docs[b]];
    let doc_mat = batch_docs::<f64>(&docs, ds.vocab.size(), 1);
    let lnf = ln_factorial_rows::<f64>(&docs, 1);
    let elbo = elbo_nodes(&mut g, post, &state.topics, &state.hyper.rates, doc_mat, lnf, 1).unwrap();
    let recon_sum = g.sum_all(elbo.recon_rows);
    let mut loss = g.mul_scalar(recon_sum, -0.5);
    for &kl in &elbo.kl_rows {
        let s = g.sum_all(kl);
        let m = g.mul_scalar(s, 0.5);
        loss = g.add(loss, m).unwrap();
    }
    let mut back = g.backward(loss).unwrap();
    let gfx = back.take(img_node);
    match gfx {
        Some(t) => {
            let block = t.len() / 2;
            let row_a = &t.data()[..block];
            let row_b = &t.data()[block..];
            let na: f64 = row_a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = row_b.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff: f64 = row_a.iter().zip(row_b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            println!("|grad_f(docA)| {na:.4}  |grad_f(docB)| {nb:.4}  |diff| {diff:.4}");
            println!("gA[0..6] {:?}", &row_a[..6]);
            println!("gB[0..6] {:?}", &row_b[..6]);
        }
        None => println!("NO GRADIENT AT FX — broken path!"),
    }
}
