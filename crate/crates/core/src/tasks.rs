//! Bidirectional tasks over a trained model: latent inference from either
//! modality, conditional generation both ways, interpolation, zero-shot
//! classification, cross-modal retrieval, prior pair sampling, and image
//! regeneration. Everything is a pure function of (model, inputs, rng key).

use crate::corpus::{CountVector, ImageRecord};
use crate::encoder::{
    compute_heads, posterior_mean_from_heads, sample_latent_from_heads, WeibullParams,
};
use crate::pgbn::{gibbs_upward_downward, sample_prior, LatentState};
use crate::rastergan::gen_forward;
use crate::rng::{Purpose, RandomStream};
use crate::tensor::graph::insert_params;
use crate::tensor::{Element, Graph, NodeId, Tensor};
use crate::trainer::TrainState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Image,
    Text,
}

/// Inferred latent for one query, with enough provenance to reproduce it.
#[derive(Debug, Clone)]
pub struct LatentQuery {
    pub source: QuerySource,
    pub mean: LatentState,
    pub sample: LatentState,
    /// Gibbs chain length (burn-in + kept) for text queries.
    pub gibbs_sweeps: usize,
    /// (purpose index, step) of the noise stream for image queries.
    pub eps_key: Option<(u64, u64)>,
}

/// Posterior latents from text via the upward-downward Gibbs sampler.
/// Returns the chain mean per layer and the final sample.
pub fn infer_from_text<E: Element>(
    t: &CountVector,
    state: &TrainState<E>,
    key: u64,
) -> crate::Result<LatentQuery> {
    let burn = state.config.gibbs_burn;
    let keep = state.config.gibbs_keep.max(1);
    let mut rng = RandomStream::new(state.config.seed, Purpose::GibbsDoc, key, u64::MAX);
    let samples = gibbs_upward_downward(t, &state.topics, &state.hyper, keep, burn, &mut rng)?;
    let mean = chain_mean(&samples);
    let sample = samples.last().unwrap().clone();
    Ok(LatentQuery {
        source: QuerySource::Text,
        mean,
        sample,
        gibbs_sweeps: burn + keep,
        eps_key: None,
    })
}

fn chain_mean(samples: &[LatentState]) -> LatentState {
    let levels = samples[0].thetas.len();
    let mut mean: Vec<Vec<f64>> = (0..levels)
        .map(|l| vec![0.0; samples[0].thetas[l].len()])
        .collect();
    for s in samples {
        for l in 0..levels {
            for (m, &v) in mean[l].iter_mut().zip(&s.thetas[l]) {
                *m += v;
            }
        }
    }
    let n = samples.len() as f64;
    for layer in &mut mean {
        layer.iter_mut().for_each(|v| *v /= n);
    }
    LatentState { thetas: mean }
}

fn heads_for_image<E: Element>(
    state: &TrainState<E>,
    img: &ImageRecord,
) -> crate::Result<WeibullParams> {
    let heads = compute_heads(&state.encoder, Some(&[img]), None)?;
    Ok(heads.into_iter().next().unwrap())
}

/// Variational latents from an image: an epsilon-keyed sample plus the
/// epsilon-free plug-in Weibull mean summary.
pub fn infer_from_image<E: Element>(
    img: &ImageRecord,
    state: &TrainState<E>,
    key: u64,
) -> crate::Result<LatentQuery> {
    let heads = heads_for_image(state, img)?;
    let mean = LatentState {
        thetas: posterior_mean_from_heads(&heads.k, &heads.lambda, &state.topics),
    };
    let mut rng = RandomStream::new(state.config.seed, Purpose::Task, key, 0);
    let sample = sample_latent_from_heads(&heads, &state.topics, &mut rng);
    Ok(LatentQuery {
        source: QuerySource::Image,
        mean,
        sample,
        gibbs_sweeps: 0,
        eps_key: Some((key, 0)),
    })
}

/// Decode latent stacks to finest-resolution images with the generator.
pub fn generate_images<E: Element>(
    state: &TrainState<E>,
    latents: &[LatentState],
) -> crate::Result<Vec<ImageRecord>> {
    if latents.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = state.config.gan_config();
    let mut g = Graph::<E>::new();
    let pmap = insert_params(&mut g, &state.generator.params, false);
    let mut thetas: Vec<NodeId> = Vec::new();
    for l in 0..cfg.widths.len() {
        let k = cfg.widths[l];
        let mut data = Vec::with_capacity(latents.len() * k);
        for lat in latents {
            if lat.thetas[l].len() != k {
                return Err(crate::error::Error::Shape(format!(
                    "latent layer {} width {} vs model {}",
                    l + 1,
                    lat.thetas[l].len(),
                    k
                )));
            }
            data.extend(lat.thetas[l].iter().map(|&v| E::from_f64(v)));
        }
        thetas.push(g.constant(Tensor::new(&[latents.len(), k], data)?));
    }
    let out = gen_forward(&mut g, &pmap, &cfg, &thetas)?;
    let finest = g.value(out.finest());
    let side = finest.dims()[3];
    let block = 3 * side * side;
    let mut images = Vec::with_capacity(latents.len());
    for i in 0..latents.len() {
        let data: Vec<f32> = finest.data()[i * block..(i + 1) * block]
            .iter()
            .map(|v| v.to_f64() as f32)
            .collect();
        images.push(ImageRecord::new(side, side, data)?);
    }
    Ok(images)
}

/// Rank vocabulary indices by Poisson rate, descending; ties break on the
/// smaller term id. `top_m` is clipped to the vocabulary size.
pub fn rank_words(rates: &[f64], top_m: usize) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = (0..rates.len() as u32).collect();
    order.sort_by(|&a, &b| {
        rates[b as usize]
            .partial_cmp(&rates[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(top_m.min(rates.len()))
        .map(|i| (i, rates[i as usize]))
        .collect()
}

fn word_rates<E: Element>(state: &TrainState<E>, latent: &LatentState) -> Vec<f64> {
    state.topics.phis[0].matvec(&latent.thetas[0])
}

/// Text-to-image: n independent Gibbs latents decoded by the generator.
pub fn text_to_image<E: Element>(
    t: &CountVector,
    state: &TrainState<E>,
    n: usize,
    key: u64,
) -> crate::Result<Vec<ImageRecord>> {
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let q = infer_from_text(t, state, key.wrapping_mul(1 << 20).wrapping_add(i as u64))?;
        latents.push(q.sample);
    }
    generate_images(state, &latents)
}

/// Image-to-words: ranked key words plus a sampled bag of words.
pub fn image_to_words<E: Element>(
    img: &ImageRecord,
    state: &TrainState<E>,
    top_m: usize,
    key: u64,
) -> crate::Result<(Vec<(u32, f64)>, CountVector)> {
    let q = infer_from_image(img, state, key)?;
    let rates = word_rates(state, &q.sample);
    let ranked = rank_words(&rates, top_m);
    let mut rng = RandomStream::new(state.config.seed, Purpose::Task, key, 1);
    let mut sampled = CountVector::empty();
    for (v, &rate) in rates.iter().enumerate() {
        let c = rng.poisson(rate.max(0.0)) as u32;
        if c > 0 {
            sampled.add(v as u32, c);
        }
    }
    Ok((ranked, sampled))
}

/// One frame of a latent interpolation.
#[derive(Debug, Clone)]
pub struct InterpFrame {
    pub alpha: f64,
    pub image: ImageRecord,
    pub words: Vec<(u32, f64)>,
}

/// Linear layer-wise interpolation between the Gibbs latents of two texts;
/// each interpolant is decoded to an image and ranked key words.
pub fn interpolate<E: Element>(
    t_a: &CountVector,
    t_b: &CountVector,
    steps: usize,
    state: &TrainState<E>,
    top_m: usize,
    key: u64,
) -> crate::Result<Vec<InterpFrame>> {
    if steps < 2 {
        return Err(crate::error::Error::Invalid("interpolation needs >= 2 steps".into()));
    }
    let qa = infer_from_text(t_a, state, key)?;
    let qb = infer_from_text(t_b, state, key.wrapping_add(1))?;
    let mut latents = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    for i in 0..steps {
        let alpha = i as f64 / (steps - 1) as f64;
        let thetas: Vec<Vec<f64>> = qa
            .mean
            .thetas
            .iter()
            .zip(&qb.mean.thetas)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(&x, &y)| (1.0 - alpha) * x + alpha * y)
                    .collect()
            })
            .collect();
        latents.push(LatentState { thetas });
        alphas.push(alpha);
    }
    let images = generate_images(state, &latents)?;
    Ok(alphas
        .into_iter()
        .zip(images)
        .zip(latents)
        .map(|((alpha, image), lat)| InterpFrame {
            alpha,
            image,
            words: rank_words(&word_rates(state, &lat), top_m),
        })
        .collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Subtract the columnwise mean of a latent set. Cross-modal cosine needs
/// this: each modality carries a large direction shared by every item, and
/// rankings against raw vectors are dominated by it rather than by
/// item-specific structure.
pub fn center_set(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if vectors.is_empty() {
        return Vec::new();
    }
    let dim = vectors[0].len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= vectors.len() as f64;
    }
    vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(&x, &m)| x - m).collect())
        .collect()
}

/// Cross-modal ranking: center each side by its own set mean, then rank
/// every query against the gallery by cosine. Returns per-query rankings.
pub fn cross_modal_rank(
    queries: &[Vec<f64>],
    gallery: &[Vec<f64>],
) -> Vec<Vec<(usize, f64)>> {
    let q = center_set(queries);
    let g = center_set(gallery);
    q.iter().map(|qv| rank_by_cosine(qv, &g)).collect()
}

/// Rank gallery entries by cosine similarity to the query, descending.
pub fn rank_by_cosine(query: &[f64], gallery: &[Vec<f64>]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, g)| (i, cosine(query, g)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored
}

/// Gibbs latent vectors for a zero-shot class gallery, chain-averaged.
pub fn class_gallery_vectors<E: Element>(
    class_docs: &[(u16, CountVector)],
    state: &TrainState<E>,
    n_chains: usize,
    key: u64,
) -> crate::Result<Vec<Vec<f64>>> {
    let mut gallery = Vec::with_capacity(class_docs.len());
    for (ci, (_, doc)) in class_docs.iter().enumerate() {
        let mut acc: Option<LatentState> = None;
        for chain in 0..n_chains.max(1) {
            let q = infer_from_text(
                doc,
                state,
                key.wrapping_add(((ci as u64) << 8) + chain as u64 + 1),
            )?;
            acc = Some(match acc {
                None => q.mean,
                Some(mut a) => {
                    for (dst, src) in a.thetas.iter_mut().zip(&q.mean.thetas) {
                        dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                    }
                    a
                }
            });
        }
        let mut mean = acc.unwrap();
        for layer in &mut mean.thetas {
            layer.iter_mut().for_each(|v| *v /= n_chains.max(1) as f64);
        }
        gallery.push(mean.comparison_vector());
    }
    Ok(gallery)
}

/// Zero-shot classification of a batch of images: rank the class documents
/// by cosine after centering each modality's latent set.
pub fn zsl_classify_batch<E: Element>(
    images: &[&ImageRecord],
    class_docs: &[(u16, CountVector)],
    state: &TrainState<E>,
    n_chains: usize,
    key: u64,
) -> crate::Result<Vec<Vec<(u16, f64)>>> {
    let gallery = class_gallery_vectors(class_docs, state, n_chains, key)?;
    let mut queries = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        queries.push(
            infer_from_image(img, state, key.wrapping_add(1000 + i as u64))?
                .mean
                .comparison_vector(),
        );
    }
    let rankings = cross_modal_rank(&queries, &gallery);
    Ok(rankings
        .into_iter()
        .map(|r| {
            r.into_iter()
                .map(|(i, score)| (class_docs[i].0, score))
                .collect()
        })
        .collect())
}

/// Zero-shot classification of a single image against a class gallery
/// (gallery centered; see [`zsl_classify_batch`] for set-centered queries).
pub fn zsl_classify<E: Element>(
    img: &ImageRecord,
    class_docs: &[(u16, CountVector)],
    state: &TrainState<E>,
    n_chains: usize,
    key: u64,
) -> crate::Result<Vec<(u16, f64)>> {
    let gallery = center_set(&class_gallery_vectors(class_docs, state, n_chains, key)?);
    let image_vec = infer_from_image(img, state, key)?.mean.comparison_vector();
    let ranked = rank_by_cosine(&image_vec, &gallery);
    Ok(ranked
        .into_iter()
        .map(|(i, score)| (class_docs[i].0, score))
        .collect())
}

/// Prior ancestral draw of a text-image pair: ranked top words and the
/// generated image.
pub fn sample_pair<E: Element>(
    state: &TrainState<E>,
    top_m: usize,
    key: u64,
) -> crate::Result<(Vec<(u32, f64)>, ImageRecord, LatentState)> {
    let mut rng = RandomStream::new(state.config.seed, Purpose::Prior, key, 0);
    let (latent, _t) = sample_prior(&state.hyper, &state.topics, &mut rng)?;
    let words = rank_words(&word_rates(state, &latent), top_m);
    let img = generate_images(state, std::slice::from_ref(&latent))?
        .into_iter()
        .next()
        .unwrap();
    Ok((words, img, latent))
}

/// Random regenerations of an input image through the posterior.
pub fn regenerate_image<E: Element>(
    img: &ImageRecord,
    state: &TrainState<E>,
    n: usize,
    key: u64,
) -> crate::Result<Vec<ImageRecord>> {
    let heads = heads_for_image(state, img)?;
    let mut latents = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = RandomStream::new(
            state.config.seed,
            Purpose::Task,
            key.wrapping_add(i as u64),
            2,
        );
        latents.push(sample_latent_from_heads(&heads, &state.topics, &mut rng));
    }
    generate_images(state, &latents)
}
