//! Training configuration: `key=value` files with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::Error;
use crate::pgbn::{PgbnHyper, TlasgrConfig};
use crate::rastergan::{GanConfig, GanVariant};
use crate::tensor::AdamHyper;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Same mini-batch for the encoder/decoder term, the discriminator
    /// update, and the generator update.
    Triple,
    /// Independent batches for the text-side term and the adversarial terms.
    Naive,
}

impl Objective {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "triple" => Ok(Objective::Triple),
            "naive" => Ok(Objective::Naive),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Triple => "triple",
            Objective::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    pub objective: Objective,
    pub variant: GanVariant,
    pub widths: Vec<usize>,
    pub base_res: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    pub feat_dim: usize,
    pub feat_c1: usize,
    pub feat_c2: usize,
    pub lr_enc: f64,
    pub beta1_enc: f64,
    pub lr_gan: f64,
    pub beta1_gan: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eta: f64,
    pub gamma0: f64,
    pub s0: f64,
    pub tlasgr_a: f64,
    pub tlasgr_b: f64,
    pub tlasgr_exp: f64,
    pub grad_clip: f64,
    pub n_mc: usize,
    pub mean_match: bool,
    pub saturating_g: bool,
    /// Reuse the gradient-step latent draws for the topic update instead of
    /// drawing fresh noise.
    pub reuse_theta_for_phi: bool,
    pub gibbs_burn: usize,
    pub gibbs_keep: usize,
    pub checkpoint_every: u64,
    pub precision: u8,
    pub data_dir: String,
    pub feature_file: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            steps: 2000,
            seed: 0,
            objective: Objective::Triple,
            variant: GanVariant::Raster,
            widths: vec![32, 16, 8],
            base_res: 4,
            gen_channels: 8,
            disc_channels: 8,
            feat_dim: 48,
            feat_c1: 12,
            feat_c2: 24,
            lr_enc: 1e-4,
            beta1_enc: 0.9,
            lr_gan: 2e-4,
            beta1_gan: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            eta: 0.05,
            gamma0: 1.0,
            s0: 1.0,
            tlasgr_a: 1e-2,
            tlasgr_b: 1000.0,
            tlasgr_exp: 0.7,
            grad_clip: 10.0,
            n_mc: 1,
            mean_match: false,
            saturating_g: false,
            reuse_theta_for_phi: true,
            gibbs_burn: 200,
            gibbs_keep: 200,
            checkpoint_every: 500,
            precision: 32,
            data_dir: String::new(),
            feature_file: String::new(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> crate::Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> crate::Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl TrainConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.batch < 2 {
            return Err(Error::Config("batch size >= 2".into()));
        }
        if self.widths.is_empty() || self.widths.iter().any(|&k| k == 0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        for (name, v) in [
            ("lr_enc", self.lr_enc),
            ("lr_gan", self.lr_gan),
            ("beta2", self.beta2),
            ("eta", self.eta),
            ("gamma0", self.gamma0),
            ("s0", self.s0),
        ] {
            if v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc >= 1".into()));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(Error::Config("precision must be 32 or 64".into()));
        }
        self.gan_config().validate()
    }

    pub fn layers(&self) -> usize {
        self.widths.len()
    }

    pub fn image_side(&self) -> usize {
        self.base_res << 4
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            variant: self.variant,
            widths: self.widths.clone(),
            base_res: self.base_res,
            gen_channels: self.gen_channels,
            disc_channels: self.disc_channels,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            widths: self.widths.clone(),
            feat_dim: self.feat_dim,
            image_side: self.image_side(),
            feat_c1: self.feat_c1,
            feat_c2: self.feat_c2,
            mean_match: self.mean_match,
            feature_bypass: !self.feature_file.is_empty(),
        }
    }

    pub fn pgbn_hyper(&self) -> PgbnHyper {
        PgbnHyper {
            widths: self.widths.clone(),
            eta: self.eta,
            gamma0: self.gamma0,
            s0: self.s0,
            rates: vec![1.0; self.widths.len()],
        }
    }

    pub fn tlasgr_config(&self) -> TlasgrConfig {
        TlasgrConfig {
            a: self.tlasgr_a,
            b: self.tlasgr_b,
            exponent: self.tlasgr_exp,
        }
    }

    pub fn adam_enc(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_enc,
            beta1: self.beta1_enc,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn adam_gan(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr_gan,
            beta1: self.beta1_gan,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> crate::Result<()> {
        match key {
            "batch" => self.batch = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "objective" => self.objective = Objective::parse(value)?,
            "variant" => self.variant = GanVariant::parse(value)?,
            "widths" => {
                self.widths = value
                    .split(',')
                    .map(|s| parse_num("widths", s.trim()))
                    .collect::<crate::Result<Vec<usize>>>()?;
            }
            "base_res" => self.base_res = parse_num(key, value)?,
            "gen_channels" => self.gen_channels = parse_num(key, value)?,
            "disc_channels" => self.disc_channels = parse_num(key, value)?,
            "feat_dim" => self.feat_dim = parse_num(key, value)?,
            "feat_c1" => self.feat_c1 = parse_num(key, value)?,
            "feat_c2" => self.feat_c2 = parse_num(key, value)?,
            "lr_enc" => self.lr_enc = parse_num(key, value)?,
            "beta1_enc" => self.beta1_enc = parse_num(key, value)?,
            "lr_gan" => self.lr_gan = parse_num(key, value)?,
            "beta1_gan" => self.beta1_gan = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_eps" => self.adam_eps = parse_num(key, value)?,
            "eta" => self.eta = parse_num(key, value)?,
            "gamma0" => self.gamma0 = parse_num(key, value)?,
            "s0" => self.s0 = parse_num(key, value)?,
            "tlasgr_a" => self.tlasgr_a = parse_num(key, value)?,
            "tlasgr_b" => self.tlasgr_b = parse_num(key, value)?,
            "tlasgr_exp" => self.tlasgr_exp = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "n_mc" => self.n_mc = parse_num(key, value)?,
            "mean_match" => self.mean_match = parse_bool(key, value)?,
            "saturating_g" => self.saturating_g = parse_bool(key, value)?,
            "reuse_theta_for_phi" => self.reuse_theta_for_phi = parse_bool(key, value)?,
            "gibbs_burn" => self.gibbs_burn = parse_num(key, value)?,
            "gibbs_keep" => self.gibbs_keep = parse_num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, value)?,
            "precision" => self.precision = parse_num(key, value)?,
            "data_dir" => self.data_dir = value.to_string(),
            "feature_file" => self.feature_file = value.to_string(),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> crate::Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Canonical serialization; parse(serialize(c)) == c.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("batch", self.batch.to_string());
        put("steps", self.steps.to_string());
        put("seed", self.seed.to_string());
        put("objective", self.objective.name().into());
        put("variant", self.variant.name().into());
        put(
            "widths",
            self.widths
                .iter()
                .map(|k| k.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        put("base_res", self.base_res.to_string());
        put("gen_channels", self.gen_channels.to_string());
        put("disc_channels", self.disc_channels.to_string());
        put("feat_dim", self.feat_dim.to_string());
        put("feat_c1", self.feat_c1.to_string());
        put("feat_c2", self.feat_c2.to_string());
        put("lr_enc", self.lr_enc.to_string());
        put("beta1_enc", self.beta1_enc.to_string());
        put("lr_gan", self.lr_gan.to_string());
        put("beta1_gan", self.beta1_gan.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("eta", self.eta.to_string());
        put("gamma0", self.gamma0.to_string());
        put("s0", self.s0.to_string());
        put("tlasgr_a", self.tlasgr_a.to_string());
        put("tlasgr_b", self.tlasgr_b.to_string());
        put("tlasgr_exp", self.tlasgr_exp.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("n_mc", self.n_mc.to_string());
        put("mean_match", self.mean_match.to_string());
        put("saturating_g", self.saturating_g.to_string());
        put("reuse_theta_for_phi", self.reuse_theta_for_phi.to_string());
        put("gibbs_burn", self.gibbs_burn.to_string());
        put("gibbs_keep", self.gibbs_keep.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("precision", self.precision.to_string());
        put("data_dir", self.data_dir.clone());
        put("feature_file", self.feature_file.clone());
        s
    }

    /// FNV-1a hash of the canonical serialization, for run manifests.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.serialize().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_defaults() {
        let cfg = TrainConfig::parse_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.batch, 32);
        assert_eq!(cfg.lr_gan, 2e-4);
        assert_eq!(cfg.beta1_gan, 0.5);
        assert_eq!(cfg.lr_enc, 1e-4);
    }

    #[test]
    fn rejects_bad_batch_and_unknown_keys() {
        let err = TrainConfig::parse_str("batch=0").unwrap_err().to_string();
        assert!(err.contains("batch size >= 2"), "{err}");
        let err = TrainConfig::parse_str("no_such_key=1").unwrap_err().to_string();
        assert!(err.contains("unknown key"), "{err}");
        assert!(TrainConfig::parse_str("batch").is_err());
    }

    #[test]
    fn comments_and_whitespace_ok() {
        let cfg = TrainConfig::parse_str("# comment\n  batch = 8  # trailing\n\nseed=9\n").unwrap();
        assert_eq!(cfg.batch, 8);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn serialize_roundtrip_identical() {
        let mut cfg = TrainConfig::default();
        cfg.set("widths", "7,5,3").unwrap();
        cfg.set("lr_enc", "0.000123").unwrap();
        cfg.set("objective", "naive").unwrap();
        cfg.set("variant", "concat3").unwrap();
        cfg.set("mean_match", "true").unwrap();
        let text = cfg.serialize();
        let back = TrainConfig::parse_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.serialize());
        assert_eq!(cfg.content_hash(), back.content_hash());
    }

    #[test]
    fn raster_layer_count_enforced() {
        assert!(TrainConfig::parse_str("widths=4,3").is_err());
        assert!(TrainConfig::parse_str("widths=4,3\nvariant=concat3").is_ok());
    }
}
