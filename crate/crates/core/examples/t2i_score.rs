//! Scratch: text-to-image oracle accuracy on a checkpoint.
use std::path::Path;
use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::{class_document, load_dataset, oracle_classify};
use vhegan_core::tasks;
use vhegan_core::trainer::load_checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg_path = args.get(1).cloned().unwrap_or("/tmp/c7probe/full2k/cfg".into());
    let ck_path = args.get(2).cloned().unwrap_or("/tmp/c7probe/full2k/run/final.vhec".into());
    let cfg = TrainConfig::load(Path::new(&cfg_path)).unwrap();
    let ds = load_dataset(Path::new("/tmp/c7probe/data2")).unwrap();
    let state = load_checkpoint::<f32>(Path::new(&ck_path), &cfg, ds.vocab.size()).unwrap();
    let unseen = ds.unseen_class_ids();
    let seen: Vec<u16> = (0..ds.class_names.len() as u16).filter(|c| !unseen.contains(c)).collect();
    let (mut color_hits, mut shape_hits, mut both) = (0, 0, 0);
    let total = 60usize;
    for i in 0..total {
        let class = seen[i % seen.len()];
        let quadrant = (i % 4) as u8;
        let mut t = class_document(&ds.vocab, class, 3);
        let vert = if quadrant < 2 { "upper" } else { "lower" };
        let horz = if quadrant % 2 == 0 { "left" } else { "right" };
        t.add(ds.vocab.id(vert).unwrap(), 3);
        t.add(ds.vocab.id(horz).unwrap(), 3);
        let imgs = tasks::text_to_image(&t, &state, 1, 9000 + i as u64).unwrap();
        let got = oracle_classify(&imgs[0]);
        let wc = (class as usize / 3) as u8;
        let ws = (class as usize % 3) as u8;
        color_hits += (got.color == wc) as usize;
        shape_hits += (got.shape == ws) as usize;
        both += (got.color == wc && got.shape == ws) as usize;
    }
    println!("t2i over {total}: color {color_hits} shape {shape_hits} both {both}");
}
