//! Scratch: measure across-document variation at each encoder stage.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::load_dataset;
use vhegan_core::encoder::compute_heads;
use vhegan_core::trainer::load_checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = args.get(1).map(|s| s.as_str()).unwrap_or("/tmp/c7probe/g30/cfg");
    let ck_path = args.get(2).map(|s| s.as_str()).unwrap_or("/tmp/c7probe/g30/run/final.vhec");
    let cfg = TrainConfig::load(Path::new(cfg_path)).unwrap();
    let ds = load_dataset(Path::new("/tmp/c7probe/data")).unwrap();
    let state = load_checkpoint::<f32>(Path::new(ck_path), &cfg, ds.vocab.size()).unwrap();
    // 24 docs spread over classes
    let idx: Vec<usize> = (0..24).map(|i| i * 17 % ds.len()).collect();
    let imgs: Vec<&vhegan_core::corpus::ImageRecord> = idx.iter().map(|&i| &ds.images[i]).collect();
    let heads = compute_heads(&state.encoder, Some(&imgs), None).unwrap();
    // relative across-doc std per stage
    let rel_std = |vals: &Vec<Vec<f64>>| -> f64 {
        let units = vals[0].len();
        let mut acc = 0.0;
        for u in 0..units {
            let col: Vec<f64> = vals.iter().map(|v| v[u]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            acc += sd / m.abs().max(1e-9);
        }
        acc / units as f64
    };
    for l in 0..heads[0].k.len() {
        let ks: Vec<Vec<f64>> = heads.iter().map(|h| h.k[l].clone()).collect();
        let ls: Vec<Vec<f64>> = heads.iter().map(|h| h.lambda[l].clone()).collect();
        println!("layer {} rel-std across docs: k {:.4} lambda {:.4}; k mean {:.3}", l + 1,
                 rel_std(&ks), rel_std(&ls),
                 heads.iter().flat_map(|h| h.k[l].iter()).sum::<f64>() / (heads.len() * heads[0].k[l].len()) as f64);
    }
    // Leave-one-out nearest-centroid color classification from lambda^1.
    let colors: Vec<u8> = idx.iter().map(|&i| ds.images[i].label.unwrap().color).collect();
    let feats: Vec<Vec<f64>> = heads.iter().map(|h| h.lambda[0].clone()).collect();
    let mut hits = 0;
    for i in 0..feats.len() {
        let mut best = (99u8, f64::INFINITY);
        for c in 0..4u8 {
            let members: Vec<usize> = (0..feats.len()).filter(|&j| j != i && colors[j] == c).collect();
            if members.is_empty() { continue; }
            let dim = feats[0].len();
            let mut centroid = vec![0.0; dim];
            for &j in &members {
                for d in 0..dim { centroid[d] += feats[j][d]; }
            }
            for v in centroid.iter_mut() { *v /= members.len() as f64; }
            let dist: f64 = (0..dim).map(|d| (feats[i][d] - centroid[d]).powi(2)).sum();
            if dist < best.1 { best = (c, dist); }
        }
        if best.0 == colors[i] { hits += 1; }
    }
    println!("lambda1 -> color LOO nearest-centroid accuracy: {}/{}", hits, feats.len());
}
