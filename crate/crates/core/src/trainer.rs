//! Joint training: one discriminator Adam step, one combined
//! encoder+generator Adam step through frozen uniform noise, then a
//! stochastic-gradient Riemannian topic update from the same latent draws,
//! all on the same mini-batch per iteration. The naive objective draws the
//! text-side and adversarial batches independently instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::config::{Objective, TrainConfig};
use crate::corpus::{build_pyramid, ImagePyramid, PairedDataset};
use crate::encoder::{
    self, batch_images, compute_heads, elbo_nodes, ln_factorial_rows, posterior_nodes,
    sample_latent_from_heads, upward_nodes, EncoderState,
};
use crate::error::Error;
use crate::pgbn::{tlasgr_step, upward_pass, Mat, PgbnHyper, TlasgrState, TopicStack};
use crate::rastergan::{
    d_loss_node, g_loss_node, gen_forward, Branch, DiscriminatorState, GeneratorState,
};
use crate::rng::{Purpose, RandomStream};
use crate::tensor::graph::insert_params;
use crate::tensor::{AdamState, Element, Graph, NodeId, Tensor};
use crate::vhet::Container;

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub recon: f64,
    pub kls: Vec<f64>,
    pub d_loss: f64,
    pub g_loss: f64,
    pub wall_ms: f64,
}

/// Which documents each role consumed in the last step (for audits).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepAudit {
    pub batch_vhe: Vec<usize>,
    pub batch_disc: Vec<usize>,
    pub batch_gen: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainState<E: Element> {
    pub config: TrainConfig,
    pub hyper: PgbnHyper,
    pub topics: TopicStack,
    pub encoder: EncoderState<E>,
    pub generator: GeneratorState<E>,
    pub discriminator: DiscriminatorState<E>,
    pub adam_enc: AdamState<E>,
    pub adam_gen: AdamState<E>,
    pub adam_disc: AdamState<E>,
    pub tlasgr: TlasgrState,
    pub step: u64,
    pub metrics: Vec<StepMetrics>,
    pub last_audit: Option<StepAudit>,
}

impl<E: Element> TrainState<E> {
    pub fn init(config: &TrainConfig, vocab_size: usize) -> crate::Result<Self> {
        config.validate()?;
        let hyper = config.pgbn_hyper();
        let mut rng_topics = RandomStream::new(config.seed, Purpose::Init, 0, 0);
        let topics = TopicStack::init_random(vocab_size, &hyper, &mut rng_topics)?;
        let mut rng_enc = RandomStream::new(config.seed, Purpose::Init, 1, 0);
        let encoder = EncoderState::init(config.encoder_config(), &mut rng_enc)?;
        let mut rng_gen = RandomStream::new(config.seed, Purpose::Init, 2, 0);
        let generator = GeneratorState::init(config.gan_config(), &mut rng_gen)?;
        let mut rng_disc = RandomStream::new(config.seed, Purpose::Init, 3, 0);
        let discriminator = DiscriminatorState::init(config.gan_config(), &mut rng_disc)?;
        Ok(TrainState {
            adam_enc: AdamState::new(config.adam_enc()),
            adam_gen: AdamState::new(config.adam_gan()),
            adam_disc: AdamState::new(config.adam_gan()),
            tlasgr: TlasgrState::new(&hyper),
            hyper,
            topics,
            encoder,
            generator,
            discriminator,
            config: config.clone(),
            step: 0,
            metrics: Vec::new(),
            last_audit: None,
        })
    }
}

/// Dataset prepared for training: train split, pyramids, optional features.
pub struct TrainData<'a> {
    pub ds: &'a PairedDataset,
    pub train_idx: Vec<usize>,
    pub pyramids: Vec<ImagePyramid>,
    pub features: Option<Vec<Vec<f64>>>,
}

impl<'a> TrainData<'a> {
    pub fn prepare(ds: &'a PairedDataset, config: &TrainConfig) -> crate::Result<Self> {
        let side = config.image_side();
        let mut pyramids = Vec::with_capacity(ds.len());
        for img in &ds.images {
            if img.width != side || img.height != side {
                return Err(Error::Shape(format!(
                    "dataset image {}x{} but base_res {} needs {side}x{side}",
                    img.width, img.height, config.base_res
                )));
            }
            pyramids.push(build_pyramid(img, 5)?);
        }
        let features = if config.feature_file.is_empty() {
            None
        } else {
            let t = crate::vhet::read_tensor_file::<f32>(Path::new(&config.feature_file))?;
            if t.rank() != 2 || t.dims()[0] != ds.len() || t.dims()[1] != config.feat_dim {
                return Err(Error::Shape(format!(
                    "feature file dims {:?}, expected [{}, {}]",
                    t.dims(),
                    ds.len(),
                    config.feat_dim
                )));
            }
            let w = config.feat_dim;
            Some(
                (0..ds.len())
                    .map(|i| t.data()[i * w..(i + 1) * w].iter().map(|&v| v as f64).collect())
                    .collect(),
            )
        };
        let train_idx = ds.train_indices();
        if train_idx.len() < config.batch {
            return Err(Error::Config(format!(
                "train split has {} docs, batch is {}",
                train_idx.len(),
                config.batch
            )));
        }
        Ok(TrainData {
            ds,
            train_idx,
            pyramids,
            features,
        })
    }
}

/// Sorted global doc indices for one mini-batch.
fn batch_indices(
    seed: u64,
    purpose: Purpose,
    step: u64,
    train_idx: &[usize],
    batch: usize,
) -> Vec<usize> {
    let n = train_idx.len();
    let per_epoch = (n / batch).max(1) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut rng = RandomStream::new(seed, purpose, 0, epoch);
    let perm = rng.permutation(n);
    let mut picked: Vec<usize> = perm[slot * batch..(slot + 1) * batch]
        .iter()
        .map(|&p| train_idx[p])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-layer ln(-ln(1-eps)) tensors for a batch, doc-major over n_mc
/// replicas. Noise is keyed by (document, step), so any role that touches a
/// document in a given step sees the same draws.
fn epsilon_tensors<E: Element>(
    seed: u64,
    purpose: Purpose,
    step: u64,
    docs: &[usize],
    widths: &[usize],
    n_mc: usize,
) -> Vec<Tensor<E>> {
    let rows = docs.len() * n_mc;
    let mut per_layer: Vec<Vec<E>> = widths.iter().map(|&k| Vec::with_capacity(rows * k)).collect();
    for &gi in docs {
        let mut rng = RandomStream::new(seed, purpose, gi as u64, step);
        for _ in 0..n_mc {
            for (l, &k) in widths.iter().enumerate() {
                for _ in 0..k {
                    let eps = rng.uniform_open();
                    per_layer[l].push(E::from_f64((-(1.0 - eps).ln()).ln()));
                }
            }
        }
    }
    // Rows above are doc-major but values interleave layers; regroup.
    let mut out = Vec::with_capacity(widths.len());
    for (l, &k) in widths.iter().enumerate() {
        let mut data = Vec::with_capacity(rows * k);
        for row in 0..rows {
            data.extend_from_slice(&per_layer[l][row * k..(row + 1) * k]);
        }
        out.push(Tensor::new(&[rows, k], data).expect("eps dims"));
    }
    out
}

/// Real images for every generator branch, doc-major with n_mc replicas.
fn real_branches<E: Element>(
    data: &TrainData,
    docs: &[usize],
    branches: &[Branch],
    n_mc: usize,
) -> crate::Result<Vec<(Branch, Tensor<E>)>> {
    let mut out = Vec::with_capacity(branches.len());
    for b in branches {
        let mut vals = Vec::new();
        for &gi in docs {
            let level = data.pyramids[gi].at_side(b.side).ok_or_else(|| {
                Error::Shape(format!("pyramid lacks side {}", b.side))
            })?;
            for _ in 0..n_mc {
                vals.extend(level.data().iter().map(|&v| E::from_f64(v as f64)));
            }
        }
        let t = Tensor::new(&[docs.len() * n_mc, 3, b.side, b.side], vals)?;
        out.push((*b, t));
    }
    Ok(out)
}

fn input_node<E: Element>(
    g: &mut Graph<E>,
    state: &TrainState<E>,
    data: &TrainData,
    pmap: &BTreeMap<String, NodeId>,
    docs: &[usize],
    n_mc: usize,
) -> crate::Result<NodeId> {
    if let Some(features) = &data.features {
        let w = state.config.feat_dim;
        let mut vals = Vec::with_capacity(docs.len() * n_mc * w);
        for &gi in docs {
            for _ in 0..n_mc {
                vals.extend(features[gi].iter().map(|&v| E::from_f64(v)));
            }
        }
        Ok(g.constant(Tensor::new(&[docs.len() * n_mc, w], vals)?))
    } else {
        let imgs: Vec<&crate::corpus::ImageRecord> =
            docs.iter().map(|&gi| &data.ds.images[gi]).collect();
        let single = batch_images::<E>(&imgs)?;
        let node = if n_mc == 1 {
            g.constant(single)
        } else {
            let block = single.len() / docs.len();
            let mut vals = Vec::with_capacity(single.len() * n_mc);
            for d in 0..docs.len() {
                for _ in 0..n_mc {
                    vals.extend_from_slice(&single.data()[d * block..(d + 1) * block]);
                }
            }
            let side = state.config.image_side();
            g.constant(Tensor::new(&[docs.len() * n_mc, 3, side, side], vals)?)
        };
        state.encoder.features_node(g, pmap, node)
    }
}

/// Posterior latents for a doc list: builds the encoder subgraph and the
/// top-down sampling given frozen noise.
fn posterior_subgraph<E: Element>(
    g: &mut Graph<E>,
    state: &TrainState<E>,
    data: &TrainData,
    pmap: &BTreeMap<String, NodeId>,
    docs: &[usize],
    n_mc: usize,
) -> crate::Result<crate::encoder::PosteriorNodes> {
    let fx = input_node(g, state, data, pmap, docs, n_mc)?;
    let heads = upward_nodes(g, pmap, &state.encoder.cfg, fx)?;
    let ln_u = epsilon_tensors::<E>(
        state.config.seed,
        Purpose::Epsilon,
        state.step,
        docs,
        &state.config.widths,
        n_mc,
    );
    posterior_nodes(g, &heads, &state.topics, docs.len() * n_mc, &ln_u)
}

fn collect_grads<E: Element>(
    g: &Graph<E>,
    pmap: &BTreeMap<String, NodeId>,
    back: &mut crate::tensor::graph::Grads<E>,
) -> BTreeMap<String, Tensor<E>> {
    let mut out = BTreeMap::new();
    for (name, id) in pmap {
        if let Some(t) = back.take(*id) {
            out.insert(name.clone(), t);
        } else {
            out.insert(name.clone(), Tensor::zeros(g.value(*id).dims()));
        }
    }
    out
}

fn nan_dump<E: Element>(state: &TrainState<E>, losses: &[(&str, f64)]) -> String {
    let mut s = String::new();
    for (name, v) in losses {
        let _ = write!(s, "{name}={v} ");
    }
    for (tag, store) in [
        ("enc", &state.encoder.params),
        ("gen", &state.generator.params),
        ("disc", &state.discriminator.params),
    ] {
        for (name, t) in store.iter() {
            if !t.all_finite() {
                let _ = write!(s, "non-finite {tag} tensor {name}; ");
            }
        }
    }
    s
}

/// One full training iteration; see the module docs for the phase order.
pub fn train_step<E: Element>(
    state: &mut TrainState<E>,
    data: &TrainData,
) -> crate::Result<StepMetrics> {
    let t0 = Instant::now();
    let cfg = state.config.clone();
    let n_mc = cfg.n_mc;
    let gan_cfg = cfg.gan_config();
    let branches = gan_cfg.branches();

    let (batch_v, batch_g) = match cfg.objective {
        Objective::Triple => {
            let b = batch_indices(cfg.seed, Purpose::Shuffle, state.step, &data.train_idx, cfg.batch);
            (b.clone(), b)
        }
        Objective::Naive => (
            batch_indices(cfg.seed, Purpose::BatchVhe, state.step, &data.train_idx, cfg.batch),
            batch_indices(cfg.seed, Purpose::BatchGan, state.step, &data.train_idx, cfg.batch),
        ),
    };
    let shared = batch_v == batch_g;

    // One graph carries the whole step: the encoder/decoder terms and the
    // generator forward are built first; the discriminator updates against
    // their values as constants; then the generator-side loss continues on
    // the same tape against the updated discriminator.
    let (g_loss, d_loss, recon_mean, kl_means, theta_for_phi) = {
        let mut g = Graph::<E>::new();
        let enc_map = insert_params(&mut g, &state.encoder.params, true);
        let gen_map = insert_params(&mut g, &state.generator.params, true);

        let post_v = posterior_subgraph(&mut g, state, data, &enc_map, &batch_v, n_mc)?;
        let docs_v: Vec<&crate::corpus::CountVector> =
            batch_v.iter().map(|&gi| &data.ds.docs[gi]).collect();
        let doc_mat = encoder::batch_docs::<E>(&docs_v, data.ds.vocab.size(), n_mc);
        let lnf = ln_factorial_rows::<E>(&docs_v, n_mc);
        let elbo = elbo_nodes(
            &mut g,
            post_v.clone(),
            &state.topics,
            &state.hyper.rates,
            doc_mat,
            lnf,
            n_mc,
        )?;
        let rows_v = (batch_v.len() * n_mc) as f64;
        let recon_sum = g.sum_all(elbo.recon_rows);
        let mut vhe_loss = g.mul_scalar(recon_sum, -1.0 / rows_v);
        for &kl in &elbo.kl_rows {
            let s = g.sum_all(kl);
            let m = g.mul_scalar(s, 1.0 / rows_v);
            vhe_loss = g.add(vhe_loss, m)?;
        }

        let post_g = if shared {
            post_v.clone()
        } else {
            posterior_subgraph(&mut g, state, data, &enc_map, &batch_g, n_mc)?
        };
        let out = gen_forward(&mut g, &gen_map, &gan_cfg, &post_g.theta)?;

        // Discriminator update first (Algorithm order D, then G+Omega, then
        // topics), against the pre-update generator samples as constants.
        let d_loss = {
            let mut gd = Graph::<E>::new();
            let disc_map = insert_params(&mut gd, &state.discriminator.params, true);
            let reals = real_branches::<E>(data, &batch_g, &branches, n_mc)?;
            let real_nodes: Vec<(Branch, NodeId)> = reals
                .into_iter()
                .map(|(b, t)| (b, gd.constant(t)))
                .collect();
            let fake_nodes: Vec<(Branch, NodeId)> = out
                .images
                .iter()
                .map(|(b, id)| (*b, gd.constant(g.value(*id).clone())))
                .collect();
            let theta_nodes: Vec<NodeId> = post_g
                .theta
                .iter()
                .map(|&id| gd.constant(g.value(id).clone()))
                .collect();
            let loss =
                d_loss_node(&mut gd, &disc_map, &gan_cfg, &real_nodes, &fake_nodes, &theta_nodes)?;
            let value = gd.value(loss).item().to_f64();
            let mut back = gd.backward(loss)?;
            let grads = collect_grads(&gd, &disc_map, &mut back);
            state.adam_disc.step(&mut state.discriminator.params, &grads)?;
            value
        };

        // Generator-side loss continues on the shared tape against the
        // freshly updated discriminator (held constant here).
        let disc_map = insert_params(&mut g, &state.discriminator.params, false);
        let gl = g_loss_node(
            &mut g,
            &disc_map,
            &gan_cfg,
            &out.images,
            &post_g.theta,
            cfg.saturating_g,
        )?;
        let total = g.add(vhe_loss, gl)?;

        let g_loss_val = g.value(gl).item().to_f64();
        let recon_doc = elbo.per_doc(&g, elbo.recon_rows);
        let recon_mean = recon_doc.iter().sum::<f64>() / recon_doc.len() as f64;
        let kl_means: Vec<f64> = elbo
            .kl_rows
            .iter()
            .map(|&kl| {
                let v = elbo.per_doc(&g, kl);
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        // Latents for the topic update, as f64 per (doc, replica, layer).
        let theta_for_phi: Vec<Vec<Vec<f64>>> = (0..batch_v.len() * n_mc)
            .map(|row| {
                post_v
                    .theta
                    .iter()
                    .map(|&id| {
                        let t = g.value(id);
                        let k = t.dims()[1];
                        t.data()[row * k..(row + 1) * k]
                            .iter()
                            .map(|v| v.to_f64())
                            .collect()
                    })
                    .collect()
            })
            .collect();

        let mut back = g.backward(total)?;
        let mut grads = collect_grads(&g, &enc_map, &mut back);
        grads.extend(collect_grads(&g, &gen_map, &mut back));
        crate::tensor::adam::clip_global_norm(&mut grads, cfg.grad_clip);
        let enc_grads: BTreeMap<String, Tensor<E>> = grads
            .iter()
            .filter(|(k, _)| k.starts_with("enc/"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let gen_grads: BTreeMap<String, Tensor<E>> = grads
            .into_iter()
            .filter(|(k, _)| k.starts_with("gen/"))
            .collect();
        state.adam_enc.step(&mut state.encoder.params, &enc_grads)?;
        state.adam_gen.step(&mut state.generator.params, &gen_grads)?;
        (g_loss_val, d_loss, recon_mean, kl_means, theta_for_phi)
    };

    // Phase C: topic update from allocation statistics of the same batch.
    {
        let theta_rows: Vec<Vec<Vec<f64>>> = if cfg.reuse_theta_for_phi {
            theta_for_phi
        } else {
            // Fresh draws from the updated encoder.
            let docs: Vec<&crate::corpus::ImageRecord> =
                batch_v.iter().map(|&gi| &data.ds.images[gi]).collect();
            let heads = if data.features.is_some() {
                let feats: Vec<Vec<f64>> = batch_v
                    .iter()
                    .map(|&gi| data.features.as_ref().unwrap()[gi].clone())
                    .collect();
                compute_heads(&state.encoder, None, Some(&feats))?
            } else {
                compute_heads(&state.encoder, Some(&docs), None)?
            };
            let mut rows = Vec::new();
            for (d, &gi) in batch_v.iter().enumerate() {
                let mut rng =
                    RandomStream::new(cfg.seed, Purpose::TlasgrNoise, gi as u64, state.step);
                for _ in 0..n_mc {
                    let lat = sample_latent_from_heads(&heads[d], &state.topics, &mut rng);
                    rows.push(lat.thetas);
                }
            }
            rows
        };
        let widths = &cfg.widths;
        let vocab = data.ds.vocab.size();
        let mut stats: Vec<Mat> = (0..widths.len())
            .map(|l| {
                let rows = if l == 0 { vocab } else { widths[l - 1] };
                Mat::zeros(rows, widths[l])
            })
            .collect();
        for (d, &gi) in batch_v.iter().enumerate() {
            let mut rng = RandomStream::new(cfg.seed, Purpose::GibbsDoc, gi as u64, state.step);
            for s in 0..n_mc {
                let thetas = &theta_rows[d * n_mc + s];
                let (mats, _) = upward_pass(&data.ds.docs[gi], thetas, &state.topics, &mut rng);
                for (l, m) in mats.iter().enumerate() {
                    for (dst, src) in stats[l].data.iter_mut().zip(&m.data) {
                        *dst += src;
                    }
                }
            }
        }
        let scale = data.train_idx.len() as f64 / (batch_v.len() * n_mc) as f64;
        for m in &mut stats {
            m.data.iter_mut().for_each(|v| *v *= scale);
        }
        let mut rng = RandomStream::new(cfg.seed, Purpose::TlasgrNoise, u64::MAX, state.step);
        tlasgr_step(
            &mut state.topics,
            &stats,
            &state.hyper,
            &cfg.tlasgr_config(),
            &mut state.tlasgr,
            &mut rng,
        )?;
        state.topics.validate_simplex()?;
    }

    let losses = [
        ("d_loss", d_loss),
        ("g_loss", g_loss),
        ("recon", recon_mean),
    ];
    let params_bad = !state.encoder.params.all_finite()
        || !state.generator.params.all_finite()
        || !state.discriminator.params.all_finite();
    if params_bad
        || losses.iter().any(|(_, v)| !v.is_finite())
        || kl_means.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            step: state.step,
            details: nan_dump(state, &losses),
        });
    }

    state.step += 1;
    state.last_audit = Some(StepAudit {
        batch_vhe: batch_v.clone(),
        batch_disc: batch_g.clone(),
        batch_gen: batch_g,
    });
    let m = StepMetrics {
        step: state.step,
        recon: recon_mean,
        kls: kl_means,
        d_loss,
        g_loss,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    state.metrics.push(m.clone());
    Ok(m)
}

pub fn metrics_csv_header(layers: usize) -> String {
    let mut s = String::from("step,recon");
    for l in 1..=layers {
        let _ = write!(s, ",kl_{l}");
    }
    s.push_str(",d_loss,g_loss,wall_ms");
    s
}

pub fn metrics_csv_row(m: &StepMetrics) -> String {
    let mut s = format!("{},{}", m.step, m.recon);
    for kl in &m.kls {
        let _ = write!(s, ",{kl}");
    }
    let _ = write!(s, ",{},{},{}", m.d_loss, m.g_loss, m.wall_ms);
    s
}

/// Run until `until_step`, appending metrics and writing periodic
/// checkpoints when an output directory is given.
pub fn train_loop<E: Element>(
    state: &mut TrainState<E>,
    data: &TrainData,
    until_step: u64,
    out_dir: Option<&Path>,
) -> crate::Result<()> {
    let mut csv: Option<std::fs::File> = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if fresh {
            use std::io::Write;
            writeln!(f, "{}", metrics_csv_header(state.config.layers()))
                .map_err(|e| Error::io(&path, e))?;
        }
        csv = Some(f);
    }
    while state.step < until_step {
        let m = train_step(state, data)?;
        if let Some(f) = csv.as_mut() {
            use std::io::Write;
            writeln!(f, "{}", metrics_csv_row(&m))
                .map_err(|e| Error::io("metrics.csv", e))?;
        }
        if let Some(dir) = out_dir {
            let every = state.config.checkpoint_every;
            if (every > 0 && state.step % every == 0) || state.step == until_step {
                save_checkpoint(state, &dir.join(format!("step{:06}.vhec", state.step)))?;
                save_checkpoint(state, &dir.join("latest.vhec"))?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

fn moments_into<E: Element>(
    c: &mut Container,
    tag: &str,
    adam: &AdamState<E>,
) {
    let (m, v) = adam.moments();
    for (name, t) in m {
        insert_e(c, &format!("adam/{tag}/m/{name}"), t);
    }
    for (name, t) in v {
        insert_e(c, &format!("adam/{tag}/v/{name}"), t);
    }
}

fn insert_e<E: Element>(c: &mut Container, name: &str, t: &Tensor<E>) {
    match E::DTYPE {
        crate::tensor::Dtype::F32 => {
            c.t32.insert(name.to_string(), t.cast());
        }
        crate::tensor::Dtype::F64 => {
            c.t64.insert(name.to_string(), t.cast());
        }
    }
}

fn take_e<E: Element>(c: &mut Container, name: &str) -> crate::Result<Tensor<E>> {
    let missing = || Error::Checkpoint(format!("missing tensor {name}"));
    match E::DTYPE {
        crate::tensor::Dtype::F32 => c.t32.remove(name).map(|t| t.cast()).ok_or_else(missing),
        crate::tensor::Dtype::F64 => c.t64.remove(name).map(|t| t.cast()).ok_or_else(missing),
    }
}

pub fn save_checkpoint<E: Element>(state: &TrainState<E>, path: &Path) -> crate::Result<()> {
    let mut c = Container::new();
    for store in [
        &state.encoder.params,
        &state.generator.params,
        &state.discriminator.params,
    ] {
        for (name, t) in store.iter() {
            insert_e(&mut c, name, t);
        }
    }
    moments_into(&mut c, "enc", &state.adam_enc);
    moments_into(&mut c, "gen", &state.adam_gen);
    moments_into(&mut c, "disc", &state.adam_disc);
    for (l, phi) in state.topics.phis.iter().enumerate() {
        c.t64.insert(
            format!("phi/{}", l + 1),
            Tensor::new(&[phi.rows, phi.cols], phi.data.clone())?,
        );
    }
    c.t64
        .insert("r".into(), Tensor::new(&[state.topics.r.len()], state.topics.r.clone())?);
    for (l, m) in state.tlasgr.precond.iter().enumerate() {
        c.t64
            .insert(format!("tlasgr/{}", l + 1), Tensor::new(&[m.len()], m.clone())?);
    }
    c.meta.insert("step".into(), state.step);
    c.meta.insert("seed".into(), state.config.seed);
    c.meta.insert("precision".into(), state.config.precision as u64);
    c.meta.insert("adam_enc_step".into(), state.adam_enc.step);
    c.meta.insert("adam_gen_step".into(), state.adam_gen.step);
    c.meta.insert("adam_disc_step".into(), state.adam_disc.step);
    c.meta.insert("tlasgr_step".into(), state.tlasgr.step);
    c.write_to(path)
}

pub fn load_checkpoint<E: Element>(
    path: &Path,
    config: &TrainConfig,
    vocab_size: usize,
) -> crate::Result<TrainState<E>> {
    let mut c = Container::read_from(path)?;
    let mut state = TrainState::<E>::init(config, vocab_size)?;
    let seed = *c
        .meta
        .get("seed")
        .ok_or_else(|| Error::Checkpoint("missing meta seed".into()))?;
    if seed != config.seed {
        return Err(Error::Checkpoint(format!(
            "checkpoint seed {seed} != config seed {}",
            config.seed
        )));
    }
    // Parameters, with shape validation against the freshly built state.
    let mut expected: Vec<String> = Vec::new();
    for store in [
        &state.encoder.params,
        &state.generator.params,
        &state.discriminator.params,
    ] {
        expected.extend(store.names().cloned());
    }
    for name in &expected {
        let t = take_e::<E>(&mut c, name)?;
        let store = if name.starts_with("enc/") {
            &mut state.encoder.params
        } else if name.starts_with("gen/") {
            &mut state.generator.params
        } else {
            &mut state.discriminator.params
        };
        let dst = store.get_mut(name)?;
        if dst.dims() != t.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has dims {:?}, config expects {:?}",
                t.dims(),
                dst.dims()
            )));
        }
        *dst = t;
    }
    // Adam moments.
    for (tag, adam) in [
        ("enc", &mut state.adam_enc),
        ("gen", &mut state.adam_gen),
        ("disc", &mut state.adam_disc),
    ] {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let prefix_m = format!("adam/{tag}/m/");
        let prefix_v = format!("adam/{tag}/v/");
        let names: Vec<String> = match E::DTYPE {
            crate::tensor::Dtype::F32 => c.t32.keys().cloned().collect(),
            crate::tensor::Dtype::F64 => c.t64.keys().cloned().collect(),
        };
        for name in names {
            if let Some(rest) = name.strip_prefix(&prefix_m) {
                m.insert(rest.to_string(), take_e::<E>(&mut c, &name)?);
            } else if let Some(rest) = name.strip_prefix(&prefix_v) {
                v.insert(rest.to_string(), take_e::<E>(&mut c, &name)?);
            }
        }
        let step = *c
            .meta
            .get(&format!("adam_{tag}_step"))
            .ok_or_else(|| Error::Checkpoint(format!("missing adam_{tag}_step")))?;
        adam.set_moments(m, v, step);
    }
    // Topics and preconditioners.
    for l in 1..=state.topics.layers() {
        let t = c
            .t64
            .remove(&format!("phi/{l}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing phi/{l}")))?;
        let phi = &mut state.topics.phis[l - 1];
        if t.dims() != [phi.rows, phi.cols] {
            return Err(Error::Checkpoint(format!(
                "phi/{l} dims {:?}, config expects {:?}",
                t.dims(),
                [phi.rows, phi.cols]
            )));
        }
        phi.data = t.into_data();
    }
    let r = c
        .t64
        .remove("r")
        .ok_or_else(|| Error::Checkpoint("missing r".into()))?;
    if r.len() != state.topics.r.len() {
        return Err(Error::Checkpoint("top-layer width mismatch".into()));
    }
    state.topics.r = r.into_data();
    for l in 1..=state.topics.layers() {
        let t = c
            .t64
            .remove(&format!("tlasgr/{l}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing tlasgr/{l}")))?;
        state.tlasgr.precond[l - 1] = t.into_data();
    }
    state.tlasgr.step = *c
        .meta
        .get("tlasgr_step")
        .ok_or_else(|| Error::Checkpoint("missing tlasgr_step".into()))?;
    state.step = *c
        .meta
        .get("step")
        .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
    // Anything left over means the container came from another model.
    if !c.t32.is_empty() || !c.t64.is_empty() {
        let leftover = c.tensor_names().first().map(|s| s.to_string()).unwrap_or_default();
        return Err(Error::Checkpoint(format!(
            "unexpected tensor section {leftover:?}"
        )));
    }
    Ok(state)
}

// ---------------------------------------------------------------------------
// Aggregated-posterior decomposition diagnostics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DecompReport {
    /// E_q ln p(t | z), draw set A.
    pub recon: f64,
    /// Mean over docs of KL[q(z|x) || q_hat(z)].
    pub i_q: f64,
    pub i_q_se: f64,
    /// KL[q_hat(z) || p(z)] estimate.
    pub kl_agg: f64,
    /// Independent-draw ELBO estimate (set B).
    pub elbo: f64,
    /// (recon - i_q - kl_agg) - elbo; zero in expectation.
    pub residual: f64,
    /// 3 x combined Monte Carlo standard error of the residual.
    pub residual_tol: f64,
}

/// Estimate the mutual-information decomposition of the text ELBO on a
/// document sample: recon - I_q - KL(q_hat || p) equals the mean ELBO,
/// with q_hat the finite mixture of per-document posteriors.
pub fn diag_decomposition<E: Element>(
    state: &TrainState<E>,
    data: &TrainData,
    doc_indices: &[usize],
    n_inner: usize,
) -> crate::Result<DecompReport> {
    let m_docs = doc_indices.len();
    if m_docs < 2 || n_inner < 2 {
        return Err(Error::Invalid("need >= 2 docs and >= 2 draws".into()));
    }
    let heads = if data.features.is_some() {
        let feats: Vec<Vec<f64>> = doc_indices
            .iter()
            .map(|&gi| data.features.as_ref().unwrap()[gi].clone())
            .collect();
        compute_heads(&state.encoder, None, Some(&feats))?
    } else {
        let imgs: Vec<&crate::corpus::ImageRecord> =
            doc_indices.iter().map(|&gi| &data.ds.images[gi]).collect();
        compute_heads(&state.encoder, Some(&imgs), None)?
    };
    let topics = &state.topics;
    let rates = &state.hyper.rates;
    let ln_m = (m_docs as f64).ln();

    // Draw set A: per-doc samples with all cross densities.
    let mut recon_doc = vec![0.0; m_docs];
    let mut iq_doc = vec![0.0; m_docs];
    let mut klagg_doc = vec![0.0; m_docs];
    let mut elbo_a_doc = vec![0.0; m_docs];
    for (i, &gi) in doc_indices.iter().enumerate() {
        let mut rng = RandomStream::new(state.config.seed, Purpose::Diag, gi as u64, 0);
        for _ in 0..n_inner {
            let z = sample_latent_from_heads(&heads[i], topics, &mut rng);
            let lq_own = encoder::latent_log_q(&heads[i], topics, &z);
            let mut lqs: Vec<f64> = Vec::with_capacity(m_docs);
            for hj in &heads {
                lqs.push(encoder::latent_log_q(hj, topics, &z));
            }
            let max = lqs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lqs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let lq_mix = lse - ln_m;
            let lp = encoder::latent_log_prior(topics, rates, &z);
            let lrec = crate::pgbn::log_lik_poisson(&data.ds.docs[gi], &topics.phis[0], &z.thetas[0]);
            recon_doc[i] += lrec;
            iq_doc[i] += lq_own - lq_mix;
            klagg_doc[i] += lq_mix - lp;
            elbo_a_doc[i] += lrec - (lq_own - lp);
        }
        recon_doc[i] /= n_inner as f64;
        iq_doc[i] /= n_inner as f64;
        klagg_doc[i] /= n_inner as f64;
        elbo_a_doc[i] /= n_inner as f64;
    }

    // Draw set B: independent ELBO estimate.
    let mut elbo_b_doc = vec![0.0; m_docs];
    for (i, &gi) in doc_indices.iter().enumerate() {
        let mut rng = RandomStream::new(state.config.seed, Purpose::Diag, gi as u64, 1);
        for _ in 0..n_inner {
            let z = sample_latent_from_heads(&heads[i], topics, &mut rng);
            let lq = encoder::latent_log_q(&heads[i], topics, &z);
            let lp = encoder::latent_log_prior(topics, rates, &z);
            let lrec = crate::pgbn::log_lik_poisson(&data.ds.docs[gi], &topics.phis[0], &z.thetas[0]);
            elbo_b_doc[i] += lrec - (lq - lp);
        }
        elbo_b_doc[i] /= n_inner as f64;
    }

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = mean(v);
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0);
        (var / v.len() as f64).sqrt()
    };
    let recon = mean(&recon_doc);
    let i_q = mean(&iq_doc);
    let kl_agg = mean(&klagg_doc);
    let elbo = mean(&elbo_b_doc);
    let residual = (recon - i_q - kl_agg) - elbo;
    let residual_tol = 3.0 * (se(&elbo_a_doc).powi(2) + se(&elbo_b_doc).powi(2)).sqrt();
    Ok(DecompReport {
        recon,
        i_q,
        i_q_se: se(&iq_doc),
        kl_agg,
        elbo,
        residual,
        residual_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic_shapes, SynthConfig};

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.widths = vec![3, 2, 2];
        cfg.base_res = 1;
        cfg.gen_channels = 3;
        cfg.disc_channels = 3;
        cfg.feat_dim = 6;
        cfg.feat_c1 = 4;
        cfg.feat_c2 = 6;
        cfg.batch = 4;
        cfg.steps = 3;
        cfg.seed = 11;
        cfg.checkpoint_every = 0;
        cfg
    }

    fn tiny_dataset() -> crate::corpus::PairedDataset {
        make_synthetic_shapes(
            &SynthConfig {
                side: 16,
                docs_per_class: 2,
                n_unseen: 0,
                test_frac: 0.0,
                ..Default::default()
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn one_step_updates_every_group_and_keeps_simplex() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        let before_enc = state.encoder.params.clone();
        let before_gen = state.generator.params.clone();
        let before_disc = state.discriminator.params.clone();
        let before_phi = state.topics.clone();
        let m = train_step(&mut state, &data).unwrap();
        assert!(m.recon.is_finite() && m.d_loss.is_finite() && m.g_loss.is_finite());
        assert_ne!(before_enc, state.encoder.params);
        assert_ne!(before_gen, state.generator.params);
        assert_ne!(before_disc, state.discriminator.params);
        assert_ne!(before_phi.phis[0].data, state.topics.phis[0].data);
        state.topics.validate_simplex().unwrap();
        assert!(state.encoder.params.all_finite());
        assert!(state.generator.params.all_finite());
        assert!(state.discriminator.params.all_finite());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let run = || {
            let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
            for _ in 0..2 {
                train_step(&mut state, &data).unwrap();
            }
            state
        };
        let a = run();
        let b = run();
        assert_eq!(a.encoder.params, b.encoder.params);
        assert_eq!(a.generator.params, b.generator.params);
        assert_eq!(a.discriminator.params, b.discriminator.params);
        assert_eq!(a.topics, b.topics);
        let ma: Vec<_> = a.metrics.iter().map(|m| (m.recon, m.d_loss, m.g_loss)).collect();
        let mb: Vec<_> = b.metrics.iter().map(|m| (m.recon, m.d_loss, m.g_loss)).collect();
        assert_eq!(ma, mb);
    }

    #[test]
    fn triple_reuse_audit_same_indices() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        train_step(&mut state, &data).unwrap();
        let audit = state.last_audit.clone().unwrap();
        assert_eq!(audit.batch_vhe, audit.batch_disc);
        assert_eq!(audit.batch_vhe, audit.batch_gen);
    }

    #[test]
    fn zero_steps_is_identity() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        let fresh = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        train_loop(&mut state, &data, 0, None).unwrap();
        assert_eq!(state.encoder.params, fresh.encoder.params);
        assert_eq!(state.topics, fresh.topics);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn naive_equals_triple_at_full_batch() {
        let ds = tiny_dataset();
        let mut cfg = tiny_config();
        cfg.batch = ds.len(); // full dataset
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut triple = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        train_step(&mut triple, &data).unwrap();
        let mut naive_cfg = cfg.clone();
        naive_cfg.objective = Objective::Naive;
        let mut naive = TrainState::<f32>::init(&naive_cfg, ds.vocab.size()).unwrap();
        train_step(&mut naive, &data).unwrap();
        assert_eq!(triple.encoder.params, naive.encoder.params);
        assert_eq!(triple.generator.params, naive.generator.params);
        assert_eq!(triple.discriminator.params, naive.discriminator.params);
        assert_eq!(triple.topics, naive.topics);
    }

    #[test]
    fn naive_differs_from_triple_at_small_batch() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut naive_cfg = cfg.clone();
        naive_cfg.objective = Objective::Naive;
        let mut state = TrainState::<f32>::init(&naive_cfg, ds.vocab.size()).unwrap();
        train_step(&mut state, &data).unwrap();
        let audit = state.last_audit.clone().unwrap();
        assert_ne!(audit.batch_vhe, audit.batch_disc);
    }

    #[test]
    fn checkpoint_roundtrip_and_resume_match() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let dir = std::env::temp_dir().join(format!("vhegan_trainer_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();

        // Uninterrupted: 4 steps.
        let mut full = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        for _ in 0..4 {
            train_step(&mut full, &data).unwrap();
        }

        // Interrupted: 2 steps, save, load, 2 more.
        let mut half = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        for _ in 0..2 {
            train_step(&mut half, &data).unwrap();
        }
        let ck = dir.join("mid.vhec");
        save_checkpoint(&half, &ck).unwrap();
        let mut resumed = load_checkpoint::<f32>(&ck, &cfg, ds.vocab.size()).unwrap();
        assert_eq!(resumed.step, 2);
        for _ in 0..2 {
            train_step(&mut resumed, &data).unwrap();
        }
        assert_eq!(full.encoder.params, resumed.encoder.params);
        assert_eq!(full.generator.params, resumed.generator.params);
        assert_eq!(full.discriminator.params, resumed.discriminator.params);
        assert_eq!(full.topics, resumed.topics);
        let tail_full: Vec<_> = full.metrics[2..].iter().map(|m| (m.recon, m.d_loss, m.g_loss)).collect();
        let tail_res: Vec<_> = resumed.metrics.iter().map(|m| (m.recon, m.d_loss, m.g_loss)).collect();
        assert_eq!(tail_full, tail_res);

        // Save -> load -> save round-trips to identical bytes.
        let ck2 = dir.join("mid2.vhec");
        save_checkpoint(&resumed, &ck2).unwrap();
        let reloaded = load_checkpoint::<f32>(&ck2, &cfg, ds.vocab.size()).unwrap();
        let ck3 = dir.join("mid3.vhec");
        save_checkpoint(&reloaded, &ck3).unwrap();
        assert_eq!(std::fs::read(&ck2).unwrap(), std::fs::read(&ck3).unwrap());
    }

    #[test]
    fn checkpoint_rejects_mismatched_widths() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        train_step(&mut state, &data).unwrap();
        let dir = std::env::temp_dir().join(format!("vhegan_trainer_w_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let ck = dir.join("w.vhec");
        save_checkpoint(&state, &ck).unwrap();
        let mut other = tiny_config();
        other.widths = vec![4, 2, 2];
        let err = load_checkpoint::<f32>(&ck, &other, ds.vocab.size())
            .unwrap_err()
            .to_string();
        assert!(err.contains("dims") || err.contains("width"), "{err}");
    }

    #[test]
    fn nan_aborts_with_dump() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        state
            .encoder
            .params
            .get_mut("enc/feat/w")
            .unwrap()
            .data_mut()[0] = f32::NAN;
        let err = train_step(&mut state, &data).unwrap_err();
        match err {
            Error::NonFinite { details, .. } => {
                assert!(details.contains("enc/feat/w"), "{details}");
            }
            other => panic!("expected NonFinite, got {other}"),
        }
    }

    #[test]
    fn feature_bypass_trains_from_vhet_file() {
        let ds = tiny_dataset();
        let dir = std::env::temp_dir().join(format!("vhegan_feat_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let feat_path = dir.join("features.vhet");
        let mut cfg = tiny_config();
        cfg.feature_file = feat_path.display().to_string();
        let mut rng = RandomStream::new(99, Purpose::Test, 0, 0);
        let feats = Tensor::<f32>::randn(&[ds.len(), cfg.feat_dim], 1.0, &mut rng);
        crate::vhet::write_tensor_file(&feat_path, &feats).unwrap();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        assert!(data.features.is_some());
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        // The bypass encoder has no conv front-end parameters.
        assert!(!state.encoder.params.contains("enc/feat/k1"));
        let m = train_step(&mut state, &data).unwrap();
        assert!(m.recon.is_finite());

        // Wrong width is rejected up front.
        let bad = Tensor::<f32>::randn(&[ds.len(), cfg.feat_dim + 1], 1.0, &mut rng);
        crate::vhet::write_tensor_file(&feat_path, &bad).unwrap();
        assert!(TrainData::prepare(&ds, &cfg).is_err());
    }

    #[test]
    fn decomposition_identity_and_constant_encoder() {
        let cfg = tiny_config();
        let ds = tiny_dataset();
        let data = TrainData::prepare(&ds, &cfg).unwrap();
        let mut state = TrainState::<f32>::init(&cfg, ds.vocab.size()).unwrap();
        let docs: Vec<usize> = (0..8).collect();
        let report = diag_decomposition(&state, &data, &docs, 64).unwrap();
        assert!(
            report.residual.abs() <= report.residual_tol,
            "residual {} tol {}",
            report.residual,
            report.residual_tol
        );
        assert!(report.i_q >= -3.0 * report.i_q_se);
        assert!(report.kl_agg >= -1e-6);

        // x-independent encoder: zero every weight, I_q collapses to zero.
        let names: Vec<String> = state.encoder.params.names().cloned().collect();
        for n in names {
            state.encoder.params.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let report = diag_decomposition(&state, &data, &docs, 32).unwrap();
        assert!(report.i_q.abs() < 1e-9, "i_q {}", report.i_q);
    }
}
