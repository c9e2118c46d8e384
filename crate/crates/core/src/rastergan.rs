//! Adversarial image generators and discriminators.
//!
//! The raster variant generates within each latent layer at three growing
//! resolutions and hands its finest image down (average-pooled) to seed the
//! next layer, so semantics refine coarse-to-fine across layers while each
//! layer refines low-to-high resolution. The concat3 ablation drives one
//! three-branch tower from the concatenated latents; vanilla keeps only the
//! finest head of that tower. Discriminators emit an unconditional logit
//! and a logit conditioned on the layer's latent code tiled across space.

use std::collections::BTreeMap;

use crate::error::Error;
use crate::rng::RandomStream;
use crate::tensor::{Element, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanVariant {
    Raster,
    Concat3,
    Vanilla,
}

impl GanVariant {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "raster" => Ok(GanVariant::Raster),
            "concat3" => Ok(GanVariant::Concat3),
            "vanilla" => Ok(GanVariant::Vanilla),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GanVariant::Raster => "raster",
            GanVariant::Concat3 => "concat3",
            GanVariant::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GanConfig {
    pub variant: GanVariant,
    /// Latent widths K_1..K_L (L must be 3 for the raster variant).
    pub widths: Vec<usize>,
    /// Base resolution R; the finest output is 16R.
    pub base_res: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
}

/// One generated (or expected real) image slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    /// Paper layer number (3 = top) for raster; 0 for single-tower variants.
    pub layer: usize,
    /// Branch index within the layer, 1..=3.
    pub branch: usize,
    pub side: usize,
}

impl GanConfig {
    pub fn new(variant: GanVariant, widths: Vec<usize>, base_res: usize) -> Self {
        GanConfig {
            variant,
            widths,
            base_res,
            gen_channels: 8,
            disc_channels: 8,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.variant == GanVariant::Raster && self.widths.len() != 3 {
            return Err(Error::Config(format!(
                "raster variant needs exactly 3 latent layers, got {}",
                self.widths.len()
            )));
        }
        if self.base_res == 0 || !self.base_res.is_power_of_two() {
            return Err(Error::Config("base resolution must be a power of two".into()));
        }
        Ok(())
    }

    /// Output slots in generation order; the finest image is last.
    pub fn branches(&self) -> Vec<Branch> {
        let r = self.base_res;
        match self.variant {
            GanVariant::Raster => {
                let mut v = Vec::new();
                for l in [3usize, 2, 1] {
                    for i in 1..=3usize {
                        v.push(Branch {
                            layer: l,
                            branch: i,
                            side: r << ((3 - l) + (i - 1)),
                        });
                    }
                }
                v
            }
            GanVariant::Concat3 => (1..=3)
                .map(|i| Branch {
                    layer: 0,
                    branch: i,
                    side: r << (1 + i),
                })
                .collect(),
            GanVariant::Vanilla => vec![Branch {
                layer: 0,
                branch: 3,
                side: r << 4,
            }],
        }
    }

    pub fn finest_side(&self) -> usize {
        self.base_res << 4
    }

    /// Distinct sides needed from a real-image pyramid.
    pub fn pyramid_sides(&self) -> Vec<usize> {
        let mut sides: Vec<usize> = self.branches().iter().map(|b| b.side).collect();
        sides.sort_unstable();
        sides.dedup();
        sides
    }

    fn cat_width(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Conditioning width for a branch: the layer latent for raster, the
    /// concatenated latent for the single-tower variants.
    fn cond_width(&self, layer: usize) -> usize {
        match self.variant {
            GanVariant::Raster => self.widths[layer - 1],
            _ => self.cat_width(),
        }
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GeneratorState<E> {
    pub cfg: GanConfig,
    pub params: ParamStore<E>,
}

/// Channel count of h_1 for a layer: the concat of F1 output with the
/// pooled skip image adds 3 channels below the top layer.
fn h1_channels(cfg: &GanConfig, layer: usize) -> usize {
    let c = cfg.gen_channels;
    match cfg.variant {
        GanVariant::Raster if layer < 3 => c + 3,
        _ => c,
    }
}

impl<E: Element> GeneratorState<E> {
    pub fn init(cfg: GanConfig, rng: &mut RandomStream) -> crate::Result<Self> {
        cfg.validate()?;
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        let mut params = ParamStore::new();
        let c = cfg.gen_channels;
        let layers: Vec<usize> = match cfg.variant {
            GanVariant::Raster => vec![3, 2, 1],
            _ => vec![0],
        };
        for &l in &layers {
            let prefix = if l == 0 {
                "gen/t".to_string()
            } else {
                format!("gen/l{l}")
            };
            let k_cond = cfg.cond_width(if l == 0 { 1 } else { l });
            let r1 = match cfg.variant {
                GanVariant::Raster => cfg.base_res << (3 - l),
                _ => cfg.base_res << 2,
            };
            params.insert(
                &format!("{prefix}/f1/w"),
                Tensor::randn(&[c * r1 * r1, k_cond], he(k_cond), rng),
            )?;
            params.insert(&format!("{prefix}/f1/b"), Tensor::zeros(&[c * r1 * r1]))?;
            let heads = match cfg.variant {
                GanVariant::Vanilla => vec![3usize],
                _ => vec![1, 2, 3],
            };
            for i in 2..=3usize {
                let cin = if i == 2 { h1_channels(&cfg, l) } else { c };
                params.insert(
                    &format!("{prefix}/f{i}/k"),
                    Tensor::randn(&[c, cin, 3, 3], he(cin * 9), rng),
                )?;
                params.insert(&format!("{prefix}/f{i}/b"), Tensor::zeros(&[c]))?;
                // Latent injection: a per-branch projection of theta added
                // as a spatially constant bias to the conv output.
                params.insert(
                    &format!("{prefix}/f{i}/tw"),
                    Tensor::randn(&[c, k_cond], (1.0 / k_cond as f64).sqrt(), rng),
                )?;
            }
            for i in heads {
                let cin = if i == 1 { h1_channels(&cfg, l) } else { c };
                params.insert(
                    &format!("{prefix}/g{i}/k"),
                    Tensor::randn(&[3, cin, 3, 3], (1.0 / (cin * 9) as f64).sqrt(), rng),
                )?;
                params.insert(&format!("{prefix}/g{i}/b"), Tensor::zeros(&[3]))?;
            }
        }
        Ok(GeneratorState { cfg, params })
    }
}

/// Generated branch images in generation order (finest last), keyed by slot.
#[derive(Debug, Clone)]
pub struct GenOutputs {
    pub images: Vec<(Branch, NodeId)>,
}

impl GenOutputs {
    pub fn finest(&self) -> NodeId {
        self.images.last().expect("generator has outputs").1
    }
}

/// Run the generator; `thetas[l-1]` is the (B, K_l) latent node for layer l.
/// Deterministic given the latents.
pub fn gen_forward<E: Element>(
    g: &mut Graph<E>,
    pmap: &BTreeMap<String, NodeId>,
    cfg: &GanConfig,
    thetas: &[NodeId],
) -> crate::Result<GenOutputs> {
    cfg.validate()?;
    if thetas.len() != cfg.widths.len() {
        return Err(Error::Shape(format!(
            "generator got {} latents for {} layers",
            thetas.len(),
            cfg.widths.len()
        )));
    }
    for (i, &th) in thetas.iter().enumerate() {
        let d = g.value(th).dims();
        if d.len() != 2 || d[1] != cfg.widths[i] {
            return Err(Error::Shape(format!(
                "latent {} has dims {d:?}, expected (B, {})",
                i + 1,
                cfg.widths[i]
            )));
        }
    }
    let batch = g.value(thetas[0]).dims()[0];
    let c = cfg.gen_channels;
    let cond: Vec<NodeId> = match cfg.variant {
        GanVariant::Raster => thetas.to_vec(),
        _ => {
            let mut cat = thetas[0];
            for &t in &thetas[1..] {
                cat = g.concat_axis1(cat, t)?;
            }
            vec![cat]
        }
    };
    let mut images = Vec::new();
    let mut prev_finest: Option<NodeId> = None;
    let layer_list: Vec<usize> = match cfg.variant {
        GanVariant::Raster => vec![3, 2, 1],
        _ => vec![0],
    };
    for &l in &layer_list {
        let prefix = if l == 0 {
            "gen/t".to_string()
        } else {
            format!("gen/l{l}")
        };
        let theta = if l == 0 { cond[0] } else { cond[l - 1] };
        let r1 = match cfg.variant {
            GanVariant::Raster => cfg.base_res << (3 - l),
            _ => cfg.base_res << 2,
        };
        let pre = g.dense(theta, pmap[&format!("{prefix}/f1/w")], Some(pmap[&format!("{prefix}/f1/b")]))?;
        let act = g.leaky_relu(pre);
        let f1 = g.reshape(act, &[batch, c, r1, r1])?;
        let mut h = match prev_finest {
            Some(s3) => {
                let skip = g.avgpool(s3, 2)?;
                g.concat_axis1(f1, skip)?
            }
            None => f1,
        };
        let heads: Vec<usize> = match cfg.variant {
            GanVariant::Vanilla => vec![3],
            _ => vec![1, 2, 3],
        };
        let mut layer_finest = None;
        for i in 1..=3usize {
            if i > 1 {
                let up = g.upsample_nn(h, 2)?;
                let side = g.value(up).dims()[3];
                let conv = g.conv2d(up, pmap[&format!("{prefix}/f{i}/k")], pmap[&format!("{prefix}/f{i}/b")], 1, 1)?;
                let proj = g.dense(theta, pmap[&format!("{prefix}/f{i}/tw")], None)?;
                let tiled = g.tile_spatial(proj, side, side)?;
                let injected = g.add(conv, tiled)?;
                h = g.leaky_relu(injected);
            }
            if heads.contains(&i) {
                let raw = g.conv2d(h, pmap[&format!("{prefix}/g{i}/k")], pmap[&format!("{prefix}/g{i}/b")], 1, 1)?;
                let t = g.tanh(raw);
                let shifted = g.add_scalar(t, 1.0);
                let img = g.mul_scalar(shifted, 0.5);
                let side = g.value(img).dims()[3];
                images.push((
                    Branch {
                        layer: l,
                        branch: i,
                        side,
                    },
                    img,
                ));
                if i == 3 {
                    layer_finest = Some(img);
                }
            }
        }
        prev_finest = layer_finest;
    }
    Ok(GenOutputs { images })
}

// ---------------------------------------------------------------------------
// Discriminators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DiscriminatorState<E> {
    pub cfg: GanConfig,
    pub params: ParamStore<E>,
}

fn disc_prefix(b: &Branch) -> String {
    if b.layer == 0 {
        format!("disc/b{}", b.branch)
    } else {
        format!("disc/l{}b{}", b.layer, b.branch)
    }
}

/// Trunk channel schedule from `side` down to the head resolution (4x4, or
/// the input side itself when it is already that small).
fn trunk_plan(cfg: &GanConfig, side: usize) -> Vec<(usize, usize)> {
    let cd = cfg.disc_channels;
    let mut plan = Vec::new();
    let mut cin = 3;
    let mut ch = cd;
    let mut s = side;
    while s > 4 {
        plan.push((cin, ch));
        cin = ch;
        ch = (ch * 2).min(4 * cd);
        s /= 2;
    }
    if plan.is_empty() {
        plan.push((3, cd));
    }
    plan
}

fn head_side(side: usize) -> usize {
    side.min(4)
}

impl<E: Element> DiscriminatorState<E> {
    pub fn init(cfg: GanConfig, rng: &mut RandomStream) -> crate::Result<Self> {
        cfg.validate()?;
        let he = |fan: usize| (2.0 / fan as f64).sqrt();
        let mut params = ParamStore::new();
        for b in cfg.branches() {
            let prefix = disc_prefix(&b);
            let plan = trunk_plan(&cfg, b.side);
            for (j, &(cin, cout)) in plan.iter().enumerate() {
                params.insert(
                    &format!("{prefix}/c{j}/k"),
                    Tensor::randn(&[cout, cin, 3, 3], he(cin * 9), rng),
                )?;
                params.insert(&format!("{prefix}/c{j}/b"), Tensor::zeros(&[cout]))?;
            }
            let top = plan.last().unwrap().1;
            let hs = head_side(b.side);
            let flat = top * hs * hs;
            let k_cond = cfg.cond_width(if b.layer == 0 { 1 } else { b.layer });
            params.insert(
                &format!("{prefix}/u/w"),
                Tensor::randn(&[1, flat], (1.0 / flat as f64).sqrt(), rng),
            )?;
            params.insert(&format!("{prefix}/u/b"), Tensor::zeros(&[1]))?;
            params.insert(
                &format!("{prefix}/j/k"),
                Tensor::randn(&[top, top + k_cond, 1, 1], he(top + k_cond), rng),
            )?;
            params.insert(&format!("{prefix}/j/b"), Tensor::zeros(&[top]))?;
            params.insert(
                &format!("{prefix}/c/w"),
                Tensor::randn(&[1, flat], (1.0 / flat as f64).sqrt(), rng),
            )?;
            params.insert(&format!("{prefix}/c/b"), Tensor::zeros(&[1]))?;
        }
        Ok(DiscriminatorState { cfg, params })
    }
}

/// Shared trunk, then the unconditional and latent-conditioned logits.
pub fn discriminate<E: Element>(
    g: &mut Graph<E>,
    pmap: &BTreeMap<String, NodeId>,
    cfg: &GanConfig,
    slot: &Branch,
    img: NodeId,
    theta: NodeId,
) -> crate::Result<(NodeId, NodeId)> {
    let dims = g.value(img).dims().to_vec();
    if dims.len() != 4 || dims[1] != 3 || dims[2] != slot.side || dims[3] != slot.side {
        return Err(Error::Shape(format!(
            "discriminator {}x{} got image {:?}",
            slot.side, slot.side, dims
        )));
    }
    let prefix = disc_prefix(slot);
    let plan = trunk_plan(cfg, slot.side);
    let mut h = img;
    let stride_one = slot.side <= 4;
    for j in 0..plan.len() {
        let stride = if stride_one { 1 } else { 2 };
        let conv = g.conv2d(h, pmap[&format!("{prefix}/c{j}/k")], pmap[&format!("{prefix}/c{j}/b")], stride, 1)?;
        h = g.leaky_relu(conv);
    }
    let hs = head_side(slot.side);
    let batch = g.value(h).dims()[0];
    let top = g.value(h).dims()[1];
    let flat = g.reshape(h, &[batch, top * hs * hs])?;
    let uncond = g.dense(flat, pmap[&format!("{prefix}/u/w")], Some(pmap[&format!("{prefix}/u/b")]))?;
    let tiled = g.tile_spatial(theta, hs, hs)?;
    let cat = g.concat_axis1(h, tiled)?;
    let mixed = g.conv2d(cat, pmap[&format!("{prefix}/j/k")], pmap[&format!("{prefix}/j/b")], 1, 0)?;
    let act = g.leaky_relu(mixed);
    let cflat = g.reshape(act, &[batch, top * hs * hs])?;
    let cond = g.dense(cflat, pmap[&format!("{prefix}/c/w")], Some(pmap[&format!("{prefix}/c/b")]))?;
    Ok((uncond, cond))
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// -ln sigma(real) - ln(1 - sigma(fake)) summed over all elements, i.e.
/// softplus(-real) + softplus(fake). Inputs are (B, 1) logit nodes.
pub fn d_loss_from_logits<E: Element>(
    g: &mut Graph<E>,
    real: NodeId,
    fake: NodeId,
) -> crate::Result<NodeId> {
    let nr = g.mul_scalar(real, -1.0);
    let a = g.softplus(nr);
    let b = g.softplus(fake);
    let s = g.add(a, b)?;
    Ok(g.sum_all(s))
}

/// Non-saturating: softplus(-fake). Saturating (the literal objective):
/// ln(1 - sigma(fake)) = -softplus(fake), minimized by the generator.
pub fn g_loss_from_logits<E: Element>(
    g: &mut Graph<E>,
    fake: NodeId,
    saturating: bool,
) -> crate::Result<NodeId> {
    if saturating {
        let sp = g.softplus(fake);
        let s = g.sum_all(sp);
        Ok(g.mul_scalar(s, -1.0))
    } else {
        let nf = g.mul_scalar(fake, -1.0);
        let sp = g.softplus(nf);
        Ok(g.sum_all(sp))
    }
}

fn theta_for_slot(slot: &Branch, thetas: &[NodeId], cat: Option<NodeId>) -> NodeId {
    match cat {
        Some(c) => c,
        None => thetas[slot.layer - 1],
    }
}

/// Concatenated latent node for the single-tower variants.
pub fn concat_latents<E: Element>(
    g: &mut Graph<E>,
    cfg: &GanConfig,
    thetas: &[NodeId],
) -> crate::Result<Option<NodeId>> {
    match cfg.variant {
        GanVariant::Raster => Ok(None),
        _ => {
            let mut cat = thetas[0];
            for &t in &thetas[1..] {
                cat = g.concat_axis1(cat, t)?;
            }
            Ok(Some(cat))
        }
    }
}

/// Discriminator loss over every branch and both heads, mean per batch
/// element. Fake images and latents should be constants in this graph.
pub fn d_loss_node<E: Element>(
    g: &mut Graph<E>,
    pmap: &BTreeMap<String, NodeId>,
    cfg: &GanConfig,
    reals: &[(Branch, NodeId)],
    fakes: &[(Branch, NodeId)],
    thetas: &[NodeId],
) -> crate::Result<NodeId> {
    let cat = concat_latents(g, cfg, thetas)?;
    let batch = g.value(thetas[0]).dims()[0];
    let mut total: Option<NodeId> = None;
    for ((slot, real), (fslot, fake)) in reals.iter().zip(fakes) {
        if slot != fslot {
            return Err(Error::Shape("real/fake branch tables differ".into()));
        }
        let th = theta_for_slot(slot, thetas, cat);
        let (ru, rc) = discriminate(g, pmap, cfg, slot, *real, th)?;
        let (fu, fc) = discriminate(g, pmap, cfg, slot, *fake, th)?;
        for (r, f) in [(ru, fu), (rc, fc)] {
            let term = d_loss_from_logits(g, r, f)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    let t = total.ok_or_else(|| Error::Shape("no branches".into()))?;
    Ok(g.mul_scalar(t, 1.0 / batch as f64))
}

/// Generator-side adversarial loss over both heads of every branch.
pub fn g_loss_node<E: Element>(
    g: &mut Graph<E>,
    pmap: &BTreeMap<String, NodeId>,
    cfg: &GanConfig,
    fakes: &[(Branch, NodeId)],
    thetas: &[NodeId],
    saturating: bool,
) -> crate::Result<NodeId> {
    let cat = concat_latents(g, cfg, thetas)?;
    let batch = g.value(thetas[0]).dims()[0];
    let mut total: Option<NodeId> = None;
    for (slot, fake) in fakes {
        let th = theta_for_slot(slot, thetas, cat);
        let (fu, fc) = discriminate(g, pmap, cfg, slot, *fake, th)?;
        for f in [fu, fc] {
            let term = g_loss_from_logits(g, f, saturating)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
    }
    let t = total.ok_or_else(|| Error::Shape("no branches".into()))?;
    Ok(g.mul_scalar(t, 1.0 / batch as f64))
}
