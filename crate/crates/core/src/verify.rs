//! Built-in verification suites: finite-difference gradient checks across
//! every kernel and the full model losses, and sampler checks for the
//! Gibbs machinery. The CLI's `gradcheck` and `gibbs-check` subcommands and
//! the acceptance tests all run these same routines.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::corpus::{make_synthetic_shapes, SynthConfig};
use crate::encoder::{
    batch_docs, elbo_nodes, ln_factorial_rows, posterior_nodes, upward_nodes, EncoderState,
};
use crate::pgbn::{
    geweke_check, gibbs_upward_downward, Mat, PgbnHyper, TopicStack,
};
use crate::rastergan::{g_loss_node, gen_forward, DiscriminatorState, GeneratorState};
use crate::rng::{Purpose, RandomStream};
use crate::tensor::graph::insert_params;
use crate::tensor::{grad_check, Element, GradCheckReport, Graph, ParamStore, PointFn, Tensor};
use crate::trainer::{TrainData, TrainState};

pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

pub struct GradSuite {
    pub entries: Vec<SuiteEntry>,
    pub tol: f64,
    pub pass: bool,
}

impl GradSuite {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} max_rel_err={:.3e} mean={:.3e} {}",
                e.name,
                e.report.max_rel_err,
                e.report.mean_rel_err,
                if e.report.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "overall: {}", if self.pass { "pass" } else { "FAIL" });
        s
    }
}

fn check_param_loss<E, F>(
    name: &str,
    params: ParamStore<E>,
    builder: F,
    tol: f64,
    sample: usize,
    entries: &mut Vec<SuiteEntry>,
) -> crate::Result<()>
where
    E: Element,
    F: Fn(&mut Graph<E>, &BTreeMap<String, crate::tensor::NodeId>) -> crate::Result<crate::tensor::NodeId>,
{
    let mut rng = RandomStream::new(1234, Purpose::Test, entries.len() as u64, 0);
    let report = grad_check(
        &params,
        |p, want| {
            let mut g = Graph::<E>::new();
            let pmap = insert_params(&mut g, p, true);
            let loss = builder(&mut g, &pmap)?;
            let value = g.value(loss).item().to_f64();
            let grads = if want {
                let mut back = g.backward(loss)?;
                let mut m = BTreeMap::new();
                for (name, id) in &pmap {
                    if let Some(t) = back.take(*id) {
                        m.insert(name.clone(), t);
                    }
                }
                Some(m)
            } else {
                None
            };
            Ok((value, grads))
        },
        // f32 losses quantize near 1e-7 relative, so central differences
        // need a larger step, and near-zero gradient coordinates are judged
        // on absolute agreement via the denominator floor.
        if E::DTYPE == crate::tensor::Dtype::F64 { 1e-5 } else { 1e-2 },
        tol,
        if E::DTYPE == crate::tensor::Dtype::F64 { 1e-3 } else { 1e-1 },
        sample,
        &mut rng,
    )?;
    entries.push(SuiteEntry {
        name: name.to_string(),
        report,
    });
    Ok(())
}

/// Finite-difference checks for every differentiable kernel, the encoder
/// upward+downward pass, and the full generator-side objective on a
/// two-sample batch. With `ops_only` the two composite model losses are
/// skipped; their summed f32 losses drown central differences in rounding
/// noise, so those run in the 64-bit suite.
pub fn gradient_suite<E: Element>(tol: f64, sample: usize, ops_only: bool) -> crate::Result<GradSuite> {
    let mut entries = Vec::new();
    let mut rng = RandomStream::new(77, Purpose::Test, 0, 0);

    // Individual kernels.
    {
        let mut p = ParamStore::<E>::new();
        p.insert("x", Tensor::randn(&[3, 4], 1.0, &mut rng))?;
        p.insert("w", Tensor::randn(&[2, 4], 1.0, &mut rng))?;
        p.insert("b", Tensor::randn(&[2], 1.0, &mut rng))?;
        check_param_loss(
            "dense",
            p,
            |g, pm| {
                let y = g.dense(pm["x"], pm["w"], Some(pm["b"]))?;
                let t = g.tanh(y);
                Ok(g.sum_all(t))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }
    for &(stride, name) in &[(1usize, "conv2d_s1"), (2usize, "conv2d_s2")] {
        let mut p = ParamStore::<E>::new();
        p.insert("x", Tensor::randn(&[2, 2, 6, 5], 1.0, &mut rng))?;
        p.insert("k", Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng))?;
        p.insert("b", Tensor::randn(&[3], 0.3, &mut rng))?;
        check_param_loss(
            name,
            p,
            move |g, pm| {
                let y = g.conv2d(pm["x"], pm["k"], pm["b"], stride, 1)?;
                let t = g.tanh(y);
                Ok(g.mean_all(t))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }
    {
        let mut p = ParamStore::<E>::new();
        p.insert("x", Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng))?;
        check_param_loss(
            "upsample_avgpool",
            p,
            |g, pm| {
                let u = g.upsample_nn(pm["x"], 2)?;
                let t = g.tanh(u);
                let a = g.avgpool(t, 4)?;
                Ok(g.sum_all(a))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }
    {
        let mut p = ParamStore::<E>::new();
        p.insert("a", Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng))?;
        p.insert("b", Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng))?;
        check_param_loss(
            "concat_slice",
            p,
            |g, pm| {
                let c = g.concat_axis1(pm["a"], pm["b"])?;
                let t = g.tanh(c);
                let s = g.slice_axis1(t, 1, 3)?;
                Ok(g.sum_all(s))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }
    {
        let mut p = ParamStore::<E>::new();
        p.insert("x", Tensor::randn(&[3, 4], 1.0, &mut rng))?;
        check_param_loss(
            "tile_spatial",
            p,
            |g, pm| {
                let t = g.tile_spatial(pm["x"], 3, 2)?;
                let s = g.sigmoid(t);
                Ok(g.sum_all(s))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }
    let point_cases: Vec<(&str, PointFn, f64, f64)> = vec![
        ("softplus", PointFn::Softplus, 1.0, 0.0),
        ("exp_clamped", PointFn::ExpClamped, 1.0, 0.0),
        ("leaky_relu", PointFn::LeakyRelu, 1.0, 2.0),
        ("tanh", PointFn::Tanh, 1.0, 0.0),
        ("sigmoid", PointFn::Sigmoid, 1.0, 0.0),
        ("ln_clamped", PointFn::LnClamped, 0.3, 2.0),
        ("ln1mexp", PointFn::Ln1mExp, 0.3, 1.5),
        ("lgamma", PointFn::Lgamma, 0.4, 2.5),
    ];
    for (name, pf, scale, offset) in point_cases {
        let mut p = ParamStore::<E>::new();
        let mut t = Tensor::<E>::randn(&[6], scale, &mut rng);
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = E::from_f64(v.to_f64().abs() + offset * 0.3 + 0.2 * offset.signum().max(0.0)));
        if offset == 0.0 {
            t = Tensor::randn(&[6], scale, &mut rng);
        }
        p.insert("x", t)?;
        check_param_loss(
            name,
            p,
            move |g, pm| {
                let y = g.pointwise(pm["x"], pf);
                Ok(g.sum_all(y))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }
    {
        let mut p = ParamStore::<E>::new();
        let mut a = Tensor::<E>::randn(&[8], 1.0, &mut rng);
        a.data_mut().iter_mut().for_each(|v| *v = E::from_f64(v.to_f64().abs() + 0.5));
        let mut b = Tensor::<E>::randn(&[8], 1.0, &mut rng);
        b.data_mut().iter_mut().for_each(|v| *v = E::from_f64(v.to_f64().abs() + 0.5));
        p.insert("a", a)?;
        p.insert("b", b)?;
        check_param_loss(
            "mul_div",
            p,
            |g, pm| {
                let m = g.mul(pm["a"], pm["b"])?;
                let d = g.div(m, pm["b"])?;
                let d2 = g.div(pm["a"], pm["b"])?;
                let s = g.add(d, d2)?;
                let t = g.tanh(s);
                Ok(g.sum_all(t))
            },
            tol,
            sample,
            &mut entries,
        )?;
    }

    // Encoder upward + downward through frozen noise (conv front-end
    // included), checking d(sum of theta, k, lambda)/d(Omega).
    if !ops_only {
        let cfg = crate::encoder::EncoderConfig {
            feat_c1: 3,
            feat_c2: 4,
            ..crate::encoder::EncoderConfig::new(vec![3, 2], 4, 16)
        };
        let mut erng = RandomStream::new(3, Purpose::Test, 0, 0);
        let enc = EncoderState::<E>::init(cfg.clone(), &mut erng)?;
        let hyper = PgbnHyper::new(vec![3, 2]);
        let topics = TopicStack::init_random(6, &hyper, &mut erng)?;
        let images = Tensor::<E>::randn(&[2, 3, 16, 16], 0.3, &mut erng);
        let ln_u: Vec<Tensor<E>> = cfg
            .widths
            .iter()
            .map(|&k| crate::encoder::sample_ln_u::<E>(2, k, &mut erng))
            .collect();
        let enc2 = enc.clone();
        check_param_loss(
            "encoder_upward_downward",
            enc.params,
            move |g, pm| {
                let img = g.constant(images.clone());
                let fx = enc2.features_node(g, pm, img)?;
                let heads = upward_nodes(g, pm, &cfg, fx)?;
                let post = posterior_nodes(g, &heads, &topics, 2, &ln_u)?;
                let mut loss = g.sum_all(post.theta[0]);
                for h in &heads {
                    let sk = g.sum_all(h.k);
                    let sl = g.sum_all(h.lambda);
                    loss = g.add(loss, sk)?;
                    loss = g.add(loss, sl)?;
                }
                Ok(loss)
            },
            tol,
            sample,
            &mut entries,
        )?;
    }

    // Full generator-side objective: -recon + sum KL + adversarial
    // generator loss for the three-layer raster model on 2 samples.
    if !ops_only {
        let mut cfg = TrainConfig::default();
        cfg.widths = vec![3, 2, 2];
        cfg.base_res = 1;
        cfg.gen_channels = 3;
        cfg.disc_channels = 3;
        cfg.feat_dim = 4;
        cfg.feat_c1 = 3;
        cfg.feat_c2 = 4;
        cfg.batch = 2;
        let gan_cfg = cfg.gan_config();
        let mut erng = RandomStream::new(5, Purpose::Test, 0, 0);
        let enc = EncoderState::<E>::init(cfg.encoder_config(), &mut erng)?;
        let gen = GeneratorState::<E>::init(gan_cfg.clone(), &mut erng)?;
        let disc = DiscriminatorState::<E>::init(gan_cfg.clone(), &mut erng)?;
        let hyper = cfg.pgbn_hyper();
        let topics = TopicStack::init_random(10, &hyper, &mut erng)?;
        let images = Tensor::<E>::randn(&[2, 3, 16, 16], 0.3, &mut erng);
        let ln_u: Vec<Tensor<E>> = cfg
            .widths
            .iter()
            .map(|&k| crate::encoder::sample_ln_u::<E>(2, k, &mut erng))
            .collect();
        let mut doc_a = crate::corpus::CountVector::empty();
        doc_a.add(0, 2);
        doc_a.add(3, 1);
        let mut doc_b = crate::corpus::CountVector::empty();
        doc_b.add(1, 4);
        doc_b.add(9, 1);
        let docs = vec![doc_a, doc_b];
        let mut both = ParamStore::<E>::new();
        for (n, t) in enc.params.iter() {
            both.insert(n, t.clone())?;
        }
        for (n, t) in gen.params.iter() {
            both.insert(n, t.clone())?;
        }
        let enc_cfg = cfg.encoder_config();
        let disc_params = disc.params.clone();
        let rates = hyper.rates.clone();
        check_param_loss(
            "generator_side_objective",
            both,
            move |g, pm| {
                let disc_map = insert_params(g, &disc_params, false);
                let img = g.constant(images.clone());
                let enc_view = EncoderState {
                    cfg: enc_cfg.clone(),
                    params: ParamStore::new(), // graph uses pm, not the store
                };
                let fx = enc_view.features_node(g, pm, img)?;
                let heads = upward_nodes(g, pm, &enc_cfg, fx)?;
                let post = posterior_nodes(g, &heads, &topics, 2, &ln_u)?;
                let doc_refs: Vec<&crate::corpus::CountVector> = docs.iter().collect();
                let doc_mat = batch_docs::<E>(&doc_refs, 10, 1);
                let lnf = ln_factorial_rows::<E>(&doc_refs, 1);
                let elbo = elbo_nodes(g, post.clone(), &topics, &rates, doc_mat, lnf, 1)?;
                let recon_sum = g.sum_all(elbo.recon_rows);
                let mut loss = g.mul_scalar(recon_sum, -0.5);
                for &kl in &elbo.kl_rows {
                    let s = g.sum_all(kl);
                    let m = g.mul_scalar(s, 0.5);
                    loss = g.add(loss, m)?;
                }
                let out = gen_forward(g, pm, &gan_cfg, &post.theta)?;
                let gl = g_loss_node(g, &disc_map, &gan_cfg, &out.images, &post.theta, false)?;
                g.add(loss, gl)
            },
            tol,
            sample,
            &mut entries,
        )?;
    }

    let pass = entries.iter().all(|e| e.report.pass);
    Ok(GradSuite { entries, tol, pass })
}

pub struct GibbsCheck {
    pub conjugate_mean: f64,
    pub conjugate_expected: f64,
    pub conjugate_tol: f64,
    pub count_conservation: bool,
    pub geweke_max_z: f64,
    pub pass: bool,
}

impl GibbsCheck {
    pub fn summary(&self) -> String {
        format!(
            "conjugate: mean {:.4} vs {:.4} (tol {:.4})\ncount conservation: {}\ngeweke max |z|: {:.3}\noverall: {}",
            self.conjugate_mean,
            self.conjugate_expected,
            self.conjugate_tol,
            if self.count_conservation { "exact" } else { "VIOLATED" },
            self.geweke_max_z,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Conjugate-posterior and Geweke agreement checks for the Gibbs sampler.
pub fn gibbs_suite(seed: u64) -> crate::Result<GibbsCheck> {
    // Conjugate case: V=1, K=1, Phi=[1], r=1.5, c=1, t=3 -> Gamma(4.5, 1/2).
    let hyper = PgbnHyper::new(vec![1]);
    let topics = TopicStack {
        phis: vec![Mat::from_rows(&[&[1.0]])],
        r: vec![1.5],
    };
    let mut t = crate::corpus::CountVector::empty();
    t.add(0, 3);
    let mut rng = RandomStream::new(seed, Purpose::Test, 50, 0);
    let samples = gibbs_upward_downward(&t, &topics, &hyper, 10_000, 500, &mut rng)?;
    let mean = samples.iter().map(|s| s.thetas[0][0]).sum::<f64>() / samples.len() as f64;
    let expected = 4.5 / 2.0;
    let tol = 3.0 * (4.5f64 / 4.0 / samples.len() as f64).sqrt();

    // Count conservation on a random multi-layer case.
    let hyper2 = PgbnHyper::new(vec![3, 2]);
    let topics2 = TopicStack::init_random(5, &hyper2, &mut rng)?;
    let mut t2 = crate::corpus::CountVector::empty();
    t2.add(0, 7);
    t2.add(2, 3);
    t2.add(4, 11);
    let thetas = vec![vec![0.7; 3], vec![0.4; 2]];
    let mut conserved = true;
    for _ in 0..50 {
        let (_, ms) = crate::pgbn::upward_pass(&t2, &thetas, &topics2, &mut rng);
        if ms[0].iter().sum::<u64>() != t2.total() {
            conserved = false;
        }
    }

    // Geweke on the acceptance-grade 2-layer model.
    let mut topics3 = TopicStack::init_random(5, &hyper2, &mut rng)?;
    topics3.r = vec![0.8, 0.6];
    let geweke = geweke_check(&hyper2, &topics3, 60_000, &mut rng)?;

    let pass = (mean - expected).abs() < tol && conserved && geweke.max_z < 3.0;
    Ok(GibbsCheck {
        conjugate_mean: mean,
        conjugate_expected: expected,
        conjugate_tol: tol,
        count_conservation: conserved,
        geweke_max_z: geweke.max_z,
        pass,
    })
}

/// Small end-to-end smoke model shared by CLI examples and tests: a tiny
/// dataset plus an initialized state of matching shape.
pub fn smoke_setup<E: Element>(
    seed: u64,
) -> crate::Result<(TrainConfig, crate::corpus::PairedDataset, TrainState<E>)> {
    let mut cfg = TrainConfig::default();
    cfg.widths = vec![3, 2, 2];
    cfg.base_res = 1;
    cfg.gen_channels = 3;
    cfg.disc_channels = 3;
    cfg.feat_dim = 6;
    cfg.feat_c1 = 4;
    cfg.feat_c2 = 6;
    cfg.batch = 4;
    cfg.steps = 2;
    cfg.seed = seed;
    cfg.gibbs_burn = 20;
    cfg.gibbs_keep = 20;
    let ds = make_synthetic_shapes(
        &SynthConfig {
            side: 16,
            docs_per_class: 2,
            n_unseen: 0,
            test_frac: 0.0,
            ..Default::default()
        },
        seed,
    )?;
    let state = TrainState::<E>::init(&cfg, ds.vocab.size())?;
    Ok((cfg, ds, state))
}

/// Convenience: run training data prep + a few steps for smoke testing.
pub fn smoke_train<E: Element>(steps: u64, seed: u64) -> crate::Result<TrainState<E>> {
    let (cfg, ds, mut state) = smoke_setup::<E>(seed)?;
    let _ = cfg;
    let data = TrainData::prepare(&ds, &state.config)?;
    crate::trainer::train_loop(&mut state, &data, steps, None)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes_f64() {
        let suite = gradient_suite::<f64>(1e-4, 4, false).unwrap();
        assert!(suite.pass, "\n{}", suite.summary());
    }

    #[test]
    fn gradient_suite_passes_f32() {
        let suite = gradient_suite::<f32>(1e-3, 3, true).unwrap();
        assert!(suite.pass, "\n{}", suite.summary());
    }

    #[test]
    fn smoke_train_runs() {
        let state = smoke_train::<f32>(2, 21).unwrap();
        assert_eq!(state.step, 2);
        assert!(state.metrics.iter().all(|m| m.recon.is_finite()));
    }
}
