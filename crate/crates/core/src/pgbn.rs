//! Poisson gamma belief network text decoder.
//!
//! Generative model, top to bottom: theta^(L) ~ Gamma(r, 1/c^(L+1)),
//! theta^(l) ~ Gamma(Phi^(l+1) theta^(l+1), 1/c^(l+1)), and counts
//! t ~ Poisson(Phi^(1) theta^(1)). Every topic column lives on the simplex.
//!
//! Inference given text is an upward-downward Gibbs sampler: multinomial
//! allocation of counts at layer 1, Chinese-restaurant-table draws to
//! propagate counts upward, then gamma draws downward with the collapsed
//! exposure recursion q^(1) = 1, q^(l+1) = ln(1 + q^(l)/c^(l+1)).
//! Topic matrices are updated from mini-batch sufficient statistics by a
//! stochastic gradient Riemannian Langevin step with a per-topic adaptive
//! preconditioner.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{CountKind, CountVector, Vocabulary};
use crate::error::Error;
use crate::rng::RandomStream;
use crate::special::ln_factorial;

/// Column floor applied before renormalizing a topic column.
pub const SIMPLEX_FLOOR: f64 = 1e-12;
/// Tolerance for the sum-to-one simplex invariant.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Dense row-major f64 matrix used for topics and sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn col_sum(&self, c: usize) -> f64 {
        (0..self.rows).map(|r| self.at(r, c)).sum()
    }
}

// ---------------------------------------------------------------------------
// Hyperparameters, topics, latents
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PgbnHyper {
    /// Layer widths K_1..K_L.
    pub widths: Vec<usize>,
    /// Dirichlet concentration for topic columns.
    pub eta: f64,
    /// Top-layer shape prior: r_k ~ Gamma(gamma0/K_L, 1/s0).
    pub gamma0: f64,
    pub s0: f64,
    /// Prior rate of theta^(l) is rates[l-1] (the paper's c^(l+1) = s^(l+1)).
    pub rates: Vec<f64>,
}

impl PgbnHyper {
    pub fn new(widths: Vec<usize>) -> Self {
        let l = widths.len();
        PgbnHyper {
            widths,
            eta: 0.05,
            gamma0: 1.0,
            s0: 1.0,
            rates: vec![1.0; l],
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Invalid("need at least one hidden layer".into()));
        }
        if self.widths.iter().any(|&k| k == 0)
            || self.eta <= 0.0
            || self.gamma0 <= 0.0
            || self.s0 <= 0.0
            || self.rates.len() != self.widths.len()
            || self.rates.iter().any(|&c| c <= 0.0)
        {
            return Err(Error::Invalid("pgbn hyperparameters must be positive".into()));
        }
        Ok(())
    }

    /// Collapsed exposure q^(l) for each layer (q^(1) = 1 at the data side).
    pub fn exposures(&self) -> Vec<f64> {
        let mut q = vec![1.0];
        for l in 1..self.layers() {
            let prev = q[l - 1];
            q.push((1.0 + prev / self.rates[l - 1]).ln());
        }
        q
    }
}

/// Per-layer topic matrices Phi^(l) (K_{l-1} x K_l) plus the top shape r.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicStack {
    pub phis: Vec<Mat>,
    pub r: Vec<f64>,
}

impl TopicStack {
    /// Dirichlet(eta) columns; r fixed at gamma0 / K_L.
    pub fn init_random(
        vocab_size: usize,
        hyper: &PgbnHyper,
        rng: &mut RandomStream,
    ) -> crate::Result<Self> {
        hyper.validate()?;
        let mut phis = Vec::new();
        let mut prev = vocab_size;
        for &k in &hyper.widths {
            let mut m = Mat::zeros(prev, k);
            for c in 0..k {
                let mut col = vec![0.0; prev];
                let mut sum = 0.0;
                for item in col.iter_mut() {
                    *item = rng.gamma(hyper.eta, 1.0).max(SIMPLEX_FLOOR);
                    sum += *item;
                }
                for (r, item) in col.iter().enumerate() {
                    *m.at_mut(r, c) = item / sum;
                }
            }
            phis.push(m);
            prev = k;
        }
        let k_top = *hyper.widths.last().unwrap();
        let r = vec![hyper.gamma0 / k_top as f64; k_top];
        Ok(TopicStack { phis, r })
    }

    pub fn layers(&self) -> usize {
        self.phis.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.phis[0].rows
    }

    pub fn validate_simplex(&self) -> crate::Result<()> {
        for (l, phi) in self.phis.iter().enumerate() {
            for c in 0..phi.cols {
                let mut sum = 0.0;
                for r in 0..phi.rows {
                    let v = phi.at(r, c);
                    if v < 0.0 {
                        return Err(Error::Invalid(format!(
                            "negative topic entry at layer {} column {c}",
                            l + 1
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOL {
                    return Err(Error::Invalid(format!(
                        "topic column {c} of layer {} sums to {sum}",
                        l + 1
                    )));
                }
            }
        }
        if self.r.iter().any(|&v| v <= 0.0) {
            return Err(Error::Invalid("top-layer shape r must be positive".into()));
        }
        Ok(())
    }

    /// Project topic k of layer l (1-based) down to the vocabulary simplex.
    pub fn project_topic(&self, layer: usize, k: usize) -> crate::Result<Vec<f64>> {
        if layer == 0 || layer > self.layers() || k >= self.phis[layer - 1].cols {
            return Err(Error::Invalid(format!("no topic ({layer}, {k})")));
        }
        let mut v = self.phis[layer - 1].col(k);
        for l in (0..layer - 1).rev() {
            v = self.phis[l].matvec(&v);
        }
        Ok(v)
    }
}

/// Export a projected topic as `term,probability` CSV rows.
pub fn write_topic_csv(
    path: &Path,
    topics: &TopicStack,
    vocab: &Vocabulary,
    layer: usize,
    k: usize,
) -> crate::Result<()> {
    let dist = topics.project_topic(layer, k)?;
    let mut out = String::from("term,probability\n");
    for (i, p) in dist.iter().enumerate() {
        let _ = writeln!(out, "{},{p}", vocab.token(i as u32));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-layer nonnegative latent vectors theta^(1..L).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub thetas: Vec<Vec<f64>>,
}

impl LatentState {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.thetas[l]
    }

    /// Per-layer L2-normalized concatenation, for cosine comparisons.
    pub fn comparison_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.thetas {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                out.extend(t.iter().map(|v| v / norm));
            } else {
                out.extend(t.iter().copied());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Generation and likelihoods
// ---------------------------------------------------------------------------

/// Ancestral draw from the full generative model.
pub fn sample_prior(
    hyper: &PgbnHyper,
    topics: &TopicStack,
    rng: &mut RandomStream,
) -> crate::Result<(LatentState, CountVector)> {
    topics.validate_simplex()?;
    let levels = hyper.layers();
    let mut thetas: Vec<Vec<f64>> = vec![Vec::new(); levels];
    let top_rate = hyper.rates[levels - 1];
    thetas[levels - 1] = topics
        .r
        .iter()
        .map(|&rk| rng.gamma(rk.max(1e-300), 1.0 / top_rate))
        .collect();
    for l in (0..levels - 1).rev() {
        let shape = topics.phis[l + 1].matvec(&thetas[l + 1]);
        let rate = hyper.rates[l];
        thetas[l] = shape
            .iter()
            .map(|&s| rng.gamma(s.max(1e-300), 1.0 / rate))
            .collect();
    }
    let rates = topics.phis[0].matvec(&thetas[0]);
    let mut t = CountVector::empty();
    for (v, &rate) in rates.iter().enumerate() {
        let c = rng.poisson(rate) as u32;
        if c > 0 {
            t.add(v as u32, c);
        }
    }
    Ok((LatentState { thetas }, t))
}

/// Poisson log-likelihood sum_v [t_v ln rho_v - rho_v - ln t_v!].
pub fn log_lik_poisson(t: &CountVector, phi1: &Mat, theta1: &[f64]) -> f64 {
    let rho = phi1.matvec(theta1);
    let mut ll = -rho.iter().sum::<f64>();
    for (&v, &c) in t.entries() {
        let r = rho[v as usize].max(f64::MIN_POSITIVE);
        ll += c as f64 * r.ln() - ln_factorial(c as u64);
    }
    ll
}

/// Bernoulli-Poisson log-likelihood with ln(1 - e^-rho) clamped at -30.
pub fn log_lik_bp(b: &CountVector, phi1: &Mat, theta1: &[f64]) -> f64 {
    let rho = phi1.matvec(theta1);
    let mut ll = 0.0;
    for (v, &r) in rho.iter().enumerate() {
        if b.get(v as u32) >= 1 {
            let one_minus = -(-r).exp_m1(); // 1 - e^-rho
            ll += one_minus.ln().max(-30.0);
        } else {
            ll -= r;
        }
    }
    ll
}

/// Chinese restaurant table count: sum of n Bernoulli(r/(r+i-1)) draws.
pub fn crt_draw(n: u64, r: f64, rng: &mut RandomStream) -> u64 {
    debug_assert!(r > 0.0);
    let mut tables = 0;
    for i in 1..=n {
        if rng.uniform01() < r / (r + i as f64 - 1.0) {
            tables += 1;
        }
    }
    tables
}

/// Multinomial allocation of `total` units proportional to `weights`.
pub fn allocate_counts(total: u64, weights: &[f64], rng: &mut RandomStream) -> Vec<u64> {
    let mut out = vec![0u64; weights.len()];
    if total == 0 {
        return out;
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        // Degenerate weights; keep counts conserved.
        out[0] = total;
        return out;
    }
    for _ in 0..total {
        out[rng.categorical(weights)] += 1;
    }
    out
}

// ---------------------------------------------------------------------------
// Upward pass and Gibbs sampling
// ---------------------------------------------------------------------------

/// Allocation matrices A^(l) (K_{l-1} x K_l) and count vectors m^(l) from one
/// upward sweep given the current latents. A^(1) allocates the observed
/// counts; upper layers allocate CRT table counts. Shared by the Gibbs
/// sweep and the topic-update sufficient statistics.
pub fn upward_pass(
    t: &CountVector,
    thetas: &[Vec<f64>],
    topics: &TopicStack,
    rng: &mut RandomStream,
) -> (Vec<Mat>, Vec<Vec<u64>>) {
    let levels = topics.layers();
    let mut mats = Vec::with_capacity(levels);
    let mut ms = Vec::with_capacity(levels);

    // Layer 1: allocate observed word counts across topics.
    let phi1 = &topics.phis[0];
    let k1 = phi1.cols;
    let mut a1 = Mat::zeros(phi1.rows, k1);
    let mut m1 = vec![0u64; k1];
    let mut weights = vec![0.0; k1];
    for (&v, &count) in t.entries() {
        let row = phi1.row(v as usize);
        for (k, w) in weights.iter_mut().enumerate() {
            *w = row[k] * thetas[0][k];
        }
        let alloc = allocate_counts(count as u64, &weights, rng);
        for (k, &c) in alloc.iter().enumerate() {
            if c > 0 {
                *a1.at_mut(v as usize, k) += c as f64;
                m1[k] += c;
            }
        }
    }
    mats.push(a1);
    ms.push(m1);

    // Upper layers: CRT tables then allocation through Phi^(l+1).
    for l in 1..levels {
        let phi = &topics.phis[l];
        let kl = phi.cols;
        let shape = if l < levels {
            phi.matvec(&thetas[l])
        } else {
            unreachable!()
        };
        let mut a = Mat::zeros(phi.rows, kl);
        let mut m = vec![0u64; kl];
        let mut weights = vec![0.0; kl];
        let prev_m = ms[l - 1].clone();
        for (kprev, &count) in prev_m.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let tables = crt_draw(count, shape[kprev].max(1e-300), rng);
            if tables == 0 {
                continue;
            }
            let row = phi.row(kprev);
            for (j, w) in weights.iter_mut().enumerate() {
                *w = row[j] * thetas[l][j];
            }
            let alloc = allocate_counts(tables, &weights, rng);
            for (j, &c) in alloc.iter().enumerate() {
                if c > 0 {
                    *a.at_mut(kprev, j) += c as f64;
                    m[j] += c;
                }
            }
        }
        mats.push(a);
        ms.push(m);
    }
    (mats, ms)
}

/// One blocked Gibbs sweep: upward allocation, then downward gamma draws.
pub fn gibbs_sweep(
    t: &CountVector,
    thetas: &mut [Vec<f64>],
    topics: &TopicStack,
    hyper: &PgbnHyper,
    rng: &mut RandomStream,
) {
    let levels = topics.layers();
    let exposures = hyper.exposures();
    let (_, ms) = upward_pass(t, thetas, topics, rng);
    // Top layer down.
    for l in (0..levels).rev() {
        let prior_shape: Vec<f64> = if l == levels - 1 {
            topics.r.clone()
        } else {
            topics.phis[l + 1].matvec(&thetas[l + 1])
        };
        let rate = hyper.rates[l] + exposures[l];
        for (k, th) in thetas[l].iter_mut().enumerate() {
            let shape = prior_shape[k].max(1e-300) + ms[l][k] as f64;
            *th = rng.gamma(shape, 1.0 / rate).max(SIMPLEX_FLOOR);
        }
    }
}

/// Draw post-burn-in samples of the latents given text. Binary documents
/// trigger Poisson-count imputation through the Bernoulli-Poisson link at
/// the start of every sweep.
pub fn gibbs_upward_downward(
    t: &CountVector,
    topics: &TopicStack,
    hyper: &PgbnHyper,
    n_samples: usize,
    burn_in: usize,
    rng: &mut RandomStream,
) -> crate::Result<Vec<LatentState>> {
    topics.validate_simplex()?;
    hyper.validate()?;
    if t.is_zero() {
        eprintln!("note: gibbs on an all-zero document; sampling prior-conditioned draws");
    }
    let mut thetas: Vec<Vec<f64>> = hyper.widths.iter().map(|&k| vec![1.0; k]).collect();
    let binary = t.kind() == CountKind::Binary;
    let mut samples = Vec::with_capacity(n_samples);
    for it in 0..burn_in + n_samples {
        let counts = if binary {
            let rho = topics.phis[0].matvec(&thetas[0]);
            let mut imputed = CountVector::empty();
            for &v in t.entries().keys() {
                let rate = rho[v as usize].max(1e-12);
                imputed.add(v, rng.poisson_truncated(rate) as u32);
            }
            imputed
        } else {
            t.clone()
        };
        gibbs_sweep(&counts, &mut thetas, topics, hyper, rng);
        if it >= burn_in {
            samples.push(LatentState {
                thetas: thetas.clone(),
            });
        }
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// TLASGR-MCMC topic updates
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TlasgrConfig {
    /// Step size schedule eps_t = a (1 + t/b)^(-exponent).
    pub a: f64,
    pub b: f64,
    pub exponent: f64,
}

impl Default for TlasgrConfig {
    fn default() -> Self {
        TlasgrConfig {
            a: 1e-2,
            b: 1000.0,
            exponent: 0.7,
        }
    }
}

/// Per-topic adaptive preconditioner state (EMA of allocated count mass).
#[derive(Debug, Clone, PartialEq)]
pub struct TlasgrState {
    pub step: u64,
    pub precond: Vec<Vec<f64>>,
}

impl TlasgrState {
    pub fn new(hyper: &PgbnHyper) -> Self {
        TlasgrState {
            step: 0,
            precond: hyper.widths.iter().map(|&k| vec![0.0; k]).collect(),
        }
    }
}

/// Stochastic gradient Riemannian Langevin update of every topic column.
///
/// `stats[l]` holds the mini-batch allocation counts for Phi^(l+1), already
/// rescaled by dataset/mini-batch ratio. Columns are floored at 1e-12 and
/// renormalized, so the simplex invariant holds unconditionally.
pub fn tlasgr_step(
    topics: &mut TopicStack,
    stats: &[Mat],
    hyper: &PgbnHyper,
    cfg: &TlasgrConfig,
    state: &mut TlasgrState,
    rng: &mut RandomStream,
) -> crate::Result<()> {
    if stats.len() != topics.layers() {
        return Err(Error::Shape(format!(
            "tlasgr: {} stat matrices for {} layers",
            stats.len(),
            topics.layers()
        )));
    }
    let eps = cfg.a * (1.0 + state.step as f64 / cfg.b).powf(-cfg.exponent);
    state.step += 1;
    for (l, phi) in topics.phis.iter_mut().enumerate() {
        let a = &stats[l];
        if a.rows != phi.rows || a.cols != phi.cols {
            return Err(Error::Shape(format!(
                "tlasgr stats {}x{} vs phi {}x{} at layer {}",
                a.rows,
                a.cols,
                phi.rows,
                phi.cols,
                l + 1
            )));
        }
        let rows = phi.rows as f64;
        for k in 0..phi.cols {
            let mass = a.col_sum(k) + hyper.eta * rows;
            let m = &mut state.precond[l][k];
            *m = if *m == 0.0 {
                mass.max(1.0)
            } else {
                (0.9 * *m + 0.1 * mass).max(1.0)
            };
            let drift = eps / *m;
            let noise = (2.0 * eps / *m).sqrt();
            let total = a.col_sum(k);
            let mut sum = 0.0;
            for v in 0..phi.rows {
                let cur = phi.at(v, k);
                let grad = (a.at(v, k) + hyper.eta) - (total + hyper.eta * rows) * cur;
                let mut next = cur + drift * grad;
                if eps > 0.0 {
                    next += noise * cur.sqrt() * rng.normal();
                }
                next = next.max(SIMPLEX_FLOOR);
                *phi.at_mut(v, k) = next;
                sum += next;
            }
            for v in 0..phi.rows {
                *phi.at_mut(v, k) /= sum;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Geweke joint-distribution check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GewekeStat {
    pub name: String,
    pub forward_mean: f64,
    pub forward_se: f64,
    pub chain_mean: f64,
    pub chain_se: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub stats: Vec<GewekeStat>,
    pub max_z: f64,
}

fn batch_mean_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let per = n / batches;
    let mut bm = Vec::with_capacity(batches);
    for b in 0..batches {
        let s: f64 = xs[b * per..(b + 1) * per].iter().sum();
        bm.push(s / per as f64);
    }
    let var = bm.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (batches as f64 - 1.0);
    (mean, (var / batches as f64).sqrt())
}

/// Compare forward-simulated latent statistics with the Gibbs successive-
/// conditional simulator. If the sweep targets the right conditionals, all
/// z-scores stay small.
pub fn geweke_check(
    hyper: &PgbnHyper,
    topics: &TopicStack,
    n_iter: usize,
    rng: &mut RandomStream,
) -> crate::Result<GewekeReport> {
    let total_units: usize = hyper.widths.iter().sum();
    let record = |thetas: &[Vec<f64>], sink: &mut Vec<Vec<f64>>| {
        let mut i = 0;
        for t in thetas {
            for &v in t {
                sink[i].push(v);
                sink[total_units + i].push(v * v);
                i += 1;
            }
        }
    };

    // Marginal-conditional: independent joint draws.
    let mut fwd: Vec<Vec<f64>> = vec![Vec::with_capacity(n_iter); 2 * total_units];
    for _ in 0..n_iter {
        let (latent, _t) = sample_prior(hyper, topics, rng)?;
        record(&latent.thetas, &mut fwd);
    }

    // Successive-conditional: alternate theta | t (one Gibbs sweep) and
    // t | theta.
    let mut chain: Vec<Vec<f64>> = vec![Vec::with_capacity(n_iter); 2 * total_units];
    let (mut latent, mut t) = sample_prior(hyper, topics, rng)?;
    for _ in 0..n_iter {
        gibbs_sweep(&t, &mut latent.thetas, topics, hyper, rng);
        let rates = topics.phis[0].matvec(&latent.thetas[0]);
        let mut t_next = CountVector::empty();
        for (v, &rate) in rates.iter().enumerate() {
            let c = rng.poisson(rate) as u32;
            if c > 0 {
                t_next.add(v as u32, c);
            }
        }
        t = t_next;
        record(&latent.thetas, &mut chain);
    }

    let batches = 50.min(n_iter / 10).max(2);
    let mut stats = Vec::new();
    let mut unit = 0;
    for (l, &k) in hyper.widths.iter().enumerate() {
        for j in 0..k {
            for (tag, idx) in [("mean", unit), ("sq", total_units + unit)] {
                let (fm, fse) = batch_mean_se(&fwd[idx], batches);
                let (cm, cse) = batch_mean_se(&chain[idx], batches);
                let z = (fm - cm).abs() / (fse * fse + cse * cse).sqrt().max(1e-12);
                stats.push(GewekeStat {
                    name: format!("theta{}[{j}].{tag}", l + 1),
                    forward_mean: fm,
                    forward_se: fse,
                    chain_mean: cm,
                    chain_se: cse,
                    z,
                });
            }
            unit += 1;
        }
    }
    let max_z = stats.iter().map(|s| s.z).fold(0.0, f64::max);
    Ok(GewekeReport { stats, max_z })
}
