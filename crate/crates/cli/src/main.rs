//! Single-binary workflow: dataset synthesis, joint training, every
//! downstream task, and the verification suites.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use vhegan_core::config::TrainConfig;
use vhegan_core::corpus::{
    self, make_synthetic_shapes, oracle_classify, read_ppm, write_ppm, CountVector, PairedDataset,
    SynthConfig,
};
use vhegan_core::tasks;
use vhegan_core::tensor::Element;
use vhegan_core::trainer::{self, TrainData, TrainState};
use vhegan_core::verify;

const USAGE: &str = "\
usage: vhegan <subcommand> [--flag value ...]

subcommands:
  synth        generate the synthetic shapes dataset
               --out DIR [--config FILE] [--seed N] [--docs-per-class N]
               [--unseen N] [--test-frac F]
  train        run joint training
               --config FILE --data DIR [--out DIR] [--checkpoint FILE]
               [--seed N] [--steps N] [--variant raster|concat3|vanilla]
               [--objective triple|naive] [--precision 32|64]
  text2img     generate images from a text query
               --config FILE --checkpoint FILE --data DIR --text WORDS
               --out DIR [--n N] [--seed N]
  img2words    rank key words for an image
               --config FILE --checkpoint FILE --data DIR --image FILE
               --out DIR [--top N] [--seed N]
  interpolate  interpolate between two text queries
               --config FILE --checkpoint FILE --data DIR --text WORDS
               --text2 WORDS --out DIR [--n STEPS] [--top N] [--seed N]
  zsl          zero-shot classify unseen-class test images
               --config FILE --checkpoint FILE --data DIR --out DIR
               [--chains N] [--seed N]
  retrieve     cross-modal retrieval over test pairs
               --config FILE --checkpoint FILE --data DIR --out DIR
               [--n N] [--seed N]
  pairs        sample random text-image pairs from the prior
               --config FILE --checkpoint FILE --data DIR --out DIR
               [--n N] [--top N] [--seed N]
  regen        random regenerations of an input image
               --config FILE --checkpoint FILE --data DIR --image FILE
               --out DIR [--n N] [--seed N]
  gradcheck    finite-difference gradient verification
               [--precision 32|64] [--out DIR] [--seed N]
  diagnose     ELBO decomposition diagnostics
               --config FILE --checkpoint FILE --data DIR [--out DIR]
               [--n DOCS] [--inner N]
  gibbs-check  conjugate and Geweke checks of the Gibbs sampler
               [--seed N] [--out DIR]

environment: VHEGAN_THREADS caps the worker pool.";

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<vhegan_core::Error> for CliError {
    fn from(e: vhegan_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}\n\n{USAGE}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

struct Flags(BTreeMap<String, String>);

impl Flags {
    fn parse(args: &[String], allowed: &[&str]) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| CliError::Usage(format!("expected a flag, got {:?}", args[i])))?;
            if !allowed.contains(&key) {
                return Err(CliError::Usage(format!("unknown flag --{key}")));
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| CliError::Usage(format!("--{key} needs a value")))?;
            if map.insert(key.to_string(), value.clone()).is_some() {
                return Err(CliError::Usage(format!("--{key} given twice")));
            }
            i += 2;
        }
        Ok(Flags(map))
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|s| s.as_str())
    }

    fn req(&self, key: &str) -> CliResult<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("--{key} is required")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| CliError::Usage(format!("--{key}: cannot parse {v:?}"))),
        }
    }
}

fn run(args: &[String]) -> CliResult<()> {
    let Some(sub) = args.first() else {
        return Err(CliError::Usage("missing subcommand".into()));
    };
    let rest = &args[1..];
    match sub.as_str() {
        "synth" => cmd_synth(rest),
        "train" => cmd_train(rest),
        "text2img" => cmd_text2img(rest),
        "img2words" => cmd_img2words(rest),
        "interpolate" => cmd_interpolate(rest),
        "zsl" => cmd_zsl(rest),
        "retrieve" => cmd_retrieve(rest),
        "pairs" => cmd_pairs(rest),
        "regen" => cmd_regen(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "diagnose" => cmd_diagnose(rest),
        "gibbs-check" => cmd_gibbs_check(rest),
        other => Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    }
}

fn load_config(flags: &Flags) -> CliResult<TrainConfig> {
    let mut cfg = match flags.get("config") {
        Some(p) => TrainConfig::load(Path::new(p))?,
        None => TrainConfig::default(),
    };
    for key in ["seed", "steps", "variant", "objective", "precision"] {
        if let Some(v) = flags.get(key) {
            cfg.set(key, v)?;
        }
    }
    if let Some(v) = flags.get("data") {
        cfg.set("data_dir", v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ensure_out(flags: &Flags) -> CliResult<PathBuf> {
    let out = PathBuf::from(flags.req("out")?);
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

/// Every run records how to reproduce it.
fn write_manifest(out: &Path, cfg: &TrainConfig, command: &str, notes: &str) -> CliResult<()> {
    let mut s = String::new();
    let _ = writeln!(s, "command={command}");
    let _ = writeln!(s, "config_hash={:016x}", cfg.content_hash());
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    if !notes.is_empty() {
        let _ = writeln!(s, "{notes}");
    }
    std::fs::write(out.join("manifest.txt"), s)
        .map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
    std::fs::write(out.join("config.cfg"), cfg.serialize())
        .map_err(|e| CliError::Runtime(format!("config copy: {e}")))?;
    Ok(())
}

fn load_dataset(cfg: &TrainConfig) -> CliResult<PairedDataset> {
    if cfg.data_dir.is_empty() {
        return Err(CliError::Usage(
            "--data (or data_dir in the config) is required".into(),
        ));
    }
    Ok(corpus::load_dataset(Path::new(&cfg.data_dir))?)
}

fn load_model<E: Element>(
    cfg: &TrainConfig,
    flags: &Flags,
    ds: &PairedDataset,
) -> CliResult<TrainState<E>> {
    let ck = flags.req("checkpoint")?;
    Ok(trainer::load_checkpoint::<E>(Path::new(ck), cfg, ds.vocab.size())?)
}

fn parse_text(ds: &PairedDataset, text: &str) -> CliResult<CountVector> {
    let mut cv = CountVector::empty();
    for token in text.split_whitespace() {
        let (word, count) = match token.split_once(':') {
            Some((w, c)) => (
                w,
                c.parse::<u32>()
                    .map_err(|_| CliError::Usage(format!("bad count in {token:?}")))?,
            ),
            None => (token, 1),
        };
        let id = ds
            .vocab
            .id(word)
            .ok_or_else(|| CliError::Runtime(format!("word {word:?} not in vocabulary")))?;
        cv.add(id, count);
    }
    Ok(cv)
}

fn words_csv(ds: &PairedDataset, ranked: &[(u32, f64)]) -> String {
    let mut s = String::from("rank,term,rate\n");
    for (i, (id, rate)) in ranked.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", i + 1, ds.vocab.token(*id), rate);
    }
    s
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(
        args,
        &["config", "seed", "out", "docs-per-class", "unseen", "test-frac"],
    )?;
    let cfg = load_config(&flags)?;
    let out = ensure_out(&flags)?;
    let synth = SynthConfig {
        side: cfg.image_side(),
        docs_per_class: flags.num("docs-per-class", 50usize)?,
        n_unseen: flags.num("unseen", 2usize)?,
        test_frac: flags.num("test-frac", 0.2f64)?,
        ..Default::default()
    };
    let ds = make_synthetic_shapes(&synth, cfg.seed)?;
    corpus::save_dataset(&out, &ds)?;
    write_manifest(
        &out,
        &cfg,
        "synth",
        &format!(
            "pairs={}\nclasses={}\nunseen={}",
            ds.len(),
            ds.class_names.len(),
            synth.n_unseen
        ),
    )?;
    println!(
        "wrote {} pairs ({} classes) to {}",
        ds.len(),
        ds.class_names.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(
        args,
        &[
            "config", "seed", "steps", "out", "checkpoint", "variant", "objective", "precision",
            "data",
        ],
    )?;
    let cfg = load_config(&flags)?;
    if cfg.precision == 64 {
        run_train::<f64>(&cfg, &flags)
    } else {
        run_train::<f32>(&cfg, &flags)
    }
}

fn run_train<E: Element>(cfg: &TrainConfig, flags: &Flags) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let data = TrainData::prepare(&ds, cfg)?;
    let mut state = match flags.get("checkpoint") {
        Some(ck) => trainer::load_checkpoint::<E>(Path::new(ck), cfg, ds.vocab.size())?,
        None => TrainState::<E>::init(cfg, ds.vocab.size())?,
    };
    let out = flags.get("out").map(PathBuf::from);
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        write_manifest(dir, cfg, "train", &format!("resume_step={}", state.step))?;
    }
    trainer::train_loop(&mut state, &data, cfg.steps, out.as_deref())?;
    if let Some(dir) = &out {
        trainer::save_checkpoint(&state, &dir.join("final.vhec"))?;
    }
    let last = state.metrics.last();
    println!(
        "trained to step {} (recon {:.3}, d_loss {:.3}, g_loss {:.3})",
        state.step,
        last.map(|m| m.recon).unwrap_or(f64::NAN),
        last.map(|m| m.d_loss).unwrap_or(f64::NAN),
        last.map(|m| m.g_loss).unwrap_or(f64::NAN),
    );
    Ok(())
}

fn task_flags<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["config", "checkpoint", "data", "seed", "out", "precision"];
    v.extend_from_slice(extra);
    v
}

fn cmd_text2img(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["text", "n"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let text = flags.req("text")?.to_string();
    let t = parse_text(&ds, &text)?;
    let n = flags.num("n", 4usize)?;
    let images = tasks::text_to_image(&t, &state, n, cfg.seed)?;
    for (i, img) in images.iter().enumerate() {
        write_ppm(&out.join(format!("gen_{i:03}.ppm")), img)?;
    }
    write_manifest(
        &out,
        &cfg,
        "text2img",
        &format!("text={text}\nn={n}\nrng_key={}", cfg.seed),
    )?;
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

fn cmd_img2words(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["image", "top"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let img = read_ppm(Path::new(flags.req("image")?))?;
    let top = flags.num("top", 10usize)?;
    let (ranked, sampled) = tasks::image_to_words(&img, &state, top, cfg.seed)?;
    std::fs::write(out.join("words.csv"), words_csv(&ds, &ranked))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut s = String::from("term,count\n");
    for (&id, &c) in sampled.entries() {
        let _ = writeln!(s, "{},{c}", ds.vocab.token(id));
    }
    std::fs::write(out.join("sampled.csv"), s).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(&out, &cfg, "img2words", &format!("rng_key={}", cfg.seed))?;
    println!(
        "top words: {}",
        ranked
            .iter()
            .take(5)
            .map(|(id, _)| ds.vocab.token(*id))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(())
}

fn cmd_interpolate(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["text", "text2", "n", "top"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let ta = parse_text(&ds, flags.req("text")?)?;
    let tb = parse_text(&ds, flags.req("text2")?)?;
    let steps = flags.num("n", 5usize)?;
    let top = flags.num("top", 5usize)?;
    let frames = tasks::interpolate(&ta, &tb, steps, &state, top, cfg.seed)?;
    let mut csv = String::from("frame,alpha,words\n");
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&out.join(format!("interp_{i:03}.ppm")), &f.image)?;
        let words: Vec<&str> = f.words.iter().map(|(id, _)| ds.vocab.token(*id)).collect();
        let _ = writeln!(csv, "{i},{},{}", f.alpha, words.join(" "));
    }
    std::fs::write(out.join("frames.csv"), csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(
        &out,
        &cfg,
        "interpolate",
        &format!("steps={steps}\nrng_key={}", cfg.seed),
    )?;
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}

fn cmd_zsl(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["chains"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let chains = flags.num("chains", 2usize)?;
    let unseen = ds.unseen_class_ids();
    if unseen.is_empty() {
        return Err(CliError::Runtime("dataset has no unseen classes".into()));
    }
    let gallery: Vec<(u16, CountVector)> = unseen
        .iter()
        .map(|&c| (c, corpus::class_document(&ds.vocab, c, 3)))
        .collect();
    let mut csv = String::from("doc_id,true_class,predicted,correct\n");
    let mut hits = 0usize;
    let mut total = 0usize;
    let unseen_idx: Vec<usize> = (0..ds.len())
        .filter(|&i| !ds.splits[i].seen_class && !ds.splits[i].train)
        .collect();
    let images: Vec<&vhegan_core::corpus::ImageRecord> =
        unseen_idx.iter().map(|&i| &ds.images[i]).collect();
    let rankings = tasks::zsl_classify_batch(&images, &gallery, &state, chains, cfg.seed)?;
    for (pos, &i) in unseen_idx.iter().enumerate() {
        let predicted = rankings[pos][0].0;
        let truth = ds.classes[i];
        let correct = predicted == truth;
        hits += correct as usize;
        total += 1;
        let _ = writeln!(csv, "{},{},{},{}", ds.doc_ids[i], truth, predicted, correct);
    }
    std::fs::write(out.join("zsl.csv"), csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    let acc = hits as f64 / total.max(1) as f64;
    write_manifest(&out, &cfg, "zsl", &format!("accuracy={acc}\nchains={chains}"))?;
    println!("zsl top-1 accuracy: {acc:.3} over {total} images");
    Ok(())
}

fn cmd_retrieve(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["n"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let test = ds.test_indices();
    let n = flags.num("n", 32usize)?.min(test.len());
    if n < 2 {
        return Err(CliError::Runtime("need at least 2 test pairs".into()));
    }
    let picked = &test[..n];
    let mut img_vecs = Vec::with_capacity(n);
    let mut txt_vecs = Vec::with_capacity(n);
    for &gi in picked {
        img_vecs.push(
            tasks::infer_from_image(&ds.images[gi], &state, gi as u64)?
                .mean
                .comparison_vector(),
        );
        txt_vecs.push(
            tasks::infer_from_text(&ds.docs[gi], &state, gi as u64)?
                .mean
                .comparison_vector(),
        );
    }
    let mut csv = String::from("direction,query,top1,correct,score\n");
    let mut correct_i2t = 0;
    let i2t = tasks::cross_modal_rank(&img_vecs, &txt_vecs);
    for (qi, ranked) in i2t.iter().enumerate() {
        let hit = ranked[0].0 == qi;
        correct_i2t += hit as usize;
        let _ = writeln!(csv, "image2text,{qi},{},{hit},{}", ranked[0].0, ranked[0].1);
    }
    let mut correct_t2i = 0;
    let t2i = tasks::cross_modal_rank(&txt_vecs, &img_vecs);
    for (qi, ranked) in t2i.iter().enumerate() {
        let hit = ranked[0].0 == qi;
        correct_t2i += hit as usize;
        let _ = writeln!(csv, "text2image,{qi},{},{hit},{}", ranked[0].0, ranked[0].1);
    }
    // Matched-vs-mismatched discrimination AUC over centered latents.
    let ic = tasks::center_set(&img_vecs);
    let tc = tasks::center_set(&txt_vecs);
    let mut scores: Vec<(f64, bool)> = Vec::new();
    for (qi, q) in ic.iter().enumerate() {
        for (ti, t) in tc.iter().enumerate() {
            scores.push((tasks::cosine(q, t), qi == ti));
        }
    }
    let auc = auc_from_scores(&scores);
    std::fs::write(out.join("retrieval.csv"), csv)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(
        &out,
        &cfg,
        "retrieve",
        &format!(
            "n={n}\ntop1_image2text={}\ntop1_text2image={}\nauc={auc}",
            correct_i2t as f64 / n as f64,
            correct_t2i as f64 / n as f64
        ),
    )?;
    println!(
        "retrieval over {n} pairs: top-1 i2t {:.3}, t2i {:.3}, matched-vs-mismatched AUC {auc:.3}",
        correct_i2t as f64 / n as f64,
        correct_t2i as f64 / n as f64
    );
    Ok(())
}

fn auc_from_scores(scores: &[(f64, bool)]) -> f64 {
    let mut pos: Vec<f64> = scores.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
    let mut neg: Vec<f64> = scores.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
    pos.sort_by(|a, b| a.partial_cmp(b).unwrap());
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in &pos {
        let below = neg.partition_point(|&x| x < p);
        let ties = neg.partition_point(|&x| x <= p) - below;
        wins += below as f64 + ties as f64 * 0.5;
    }
    wins / (pos.len() as f64 * neg.len() as f64)
}

fn cmd_pairs(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["n", "top"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let n = flags.num("n", 6usize)?;
    let top = flags.num("top", 7usize)?;
    let mut csv = String::from("pair,words,oracle_color,oracle_shape\n");
    for i in 0..n {
        let (words, img, _lat) = tasks::sample_pair(&state, top, i as u64)?;
        write_ppm(&out.join(format!("pair_{i:03}.ppm")), &img)?;
        let label = oracle_classify(&img);
        let ws: Vec<&str> = words.iter().map(|(id, _)| ds.vocab.token(*id)).collect();
        let _ = writeln!(csv, "{i},{},{},{}", ws.join(" "), label.color, label.shape);
    }
    std::fs::write(out.join("pairs.csv"), csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_manifest(&out, &cfg, "pairs", &format!("n={n}\nrng_key={}", cfg.seed))?;
    println!("wrote {n} prior pairs to {}", out.display());
    Ok(())
}

fn cmd_regen(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["image", "n"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let out = ensure_out(&flags)?;
    let img = read_ppm(Path::new(flags.req("image")?))?;
    let n = flags.num("n", 4usize)?;
    let regens = tasks::regenerate_image(&img, &state, n, cfg.seed)?;
    for (i, r) in regens.iter().enumerate() {
        write_ppm(&out.join(format!("regen_{i:03}.ppm")), r)?;
    }
    write_manifest(&out, &cfg, "regen", &format!("n={n}\nrng_key={}", cfg.seed))?;
    println!("wrote {} regenerations to {}", regens.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &["precision", "seed", "out"])?;
    let precision: u8 = flags.num("precision", 64u8)?;
    let report = match precision {
        64 => verify::gradient_suite::<f64>(1e-4, 6, false)?,
        32 => verify::gradient_suite::<f32>(1e-3, 6, true)?,
        other => {
            return Err(CliError::Usage(format!(
                "--precision {other} not in {{32,64}}"
            )))
        }
    };
    let summary = report.summary();
    print!("{summary}");
    if let Some(dir) = flags.get("out") {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join(format!("gradcheck_{precision}.txt")), &summary)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn cmd_diagnose(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &task_flags(&["n", "inner"]))?;
    let cfg = load_config(&flags)?;
    let ds = load_dataset(&cfg)?;
    let state = load_model::<f32>(&cfg, &flags, &ds)?;
    let data = TrainData::prepare(&ds, &cfg)?;
    let n = flags.num("n", 16usize)?.min(ds.len());
    let inner = flags.num("inner", 128usize)?;
    let docs: Vec<usize> = (0..n).collect();
    let report = trainer::diag_decomposition(&state, &data, &docs, inner)?;
    let text = format!(
        "recon={}\ni_q={}\nkl_aggregated={}\nelbo={}\nresidual={}\nresidual_tol={}\n",
        report.recon, report.i_q, report.kl_agg, report.elbo, report.residual, report.residual_tol
    );
    print!("{text}");
    if let Some(dir) = flags.get("out") {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join("decomposition.txt"), &text)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        write_manifest(&dir, &cfg, "diagnose", &format!("docs={n}\ninner={inner}"))?;
    }
    if report.residual.abs() <= report.residual_tol {
        Ok(())
    } else {
        Err(CliError::Runtime("decomposition identity violated".into()))
    }
}

fn cmd_gibbs_check(args: &[String]) -> CliResult<()> {
    let flags = Flags::parse(args, &["seed", "out"])?;
    let seed = flags.num("seed", 0u64)?;
    let report = verify::gibbs_suite(seed)?;
    let summary = report.summary();
    println!("{summary}");
    if let Some(dir) = flags.get("out") {
        let dir = PathBuf::from(dir);
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(dir.join("gibbs_check.txt"), &summary)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Runtime("gibbs check failed".into()))
    }
}
