//! Plain-text `key=value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. The same keys are used for config files, run manifests and the
//! config block of checkpoints.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::attention::{MaskSource, NormalizationKind};
use crate::distortions::ChannelConfig;
use crate::error::{Error, Result};
use crate::msgcodec::MsgCodecParams;
use crate::nets::NetConfig;
use crate::pipeline::ModelOptions;

/// Parses `key=value` lines, keeping order. Later duplicates win on lookup.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv(pairs: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in pairs {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

/// Loss weights of the generator and discriminator objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mr: f64,
    pub md: f64,
    pub image: f64,
    pub disc: f64,
    pub gen: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mr: 1.0,
            md: 0.001,
            image: 0.7,
            disc: 1.0,
            gen: 0.001,
        }
    }
}

/// Every setting that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub options: ModelOptions,
    pub codec_hidden: usize,
    pub weights: LossWeights,
    pub channel: ChannelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            codec_hidden: MsgCodecParams::<f32>::default_hidden(net.k),
            net,
            options: ModelOptions::default(),
            weights: LossWeights::default(),
            channel: ChannelConfig::combined(),
            lr: 1e-3,
            batch_size: 32,
            epochs: 100,
            seed: 0,
            grad_clip: 5.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for key {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {v:?} for key {key}"
        ))),
    }
}

impl RunConfig {
    pub const KEYS: [&'static str; 26] = [
        "height",
        "width",
        "base_width",
        "ext_blocks",
        "emb_blocks",
        "dec_blocks",
        "disc_blocks",
        "k",
        "l",
        "codec_hidden",
        "attention",
        "msgcodec",
        "mask",
        "norm",
        "lambda_mr",
        "lambda_md",
        "lambda_i",
        "lambda_d",
        "lambda_g",
        "noise",
        "lr",
        "batch_size",
        "epochs",
        "seed",
        "grad_clip",
        "channels",
    ];

    /// Applies one setting. Unknown keys and bad values are errors naming the key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "height" => self.net.height = parse(key, v)?,
            "width" => self.net.width = parse(key, v)?,
            "channels" => self.net.channels = parse(key, v)?,
            "base_width" => self.net.base_width = parse(key, v)?,
            "ext_blocks" => self.net.ext_blocks = parse(key, v)?,
            "emb_blocks" => self.net.emb_blocks = parse(key, v)?,
            "dec_blocks" => self.net.dec_blocks = parse(key, v)?,
            "disc_blocks" => self.net.disc_blocks = parse(key, v)?,
            "k" => self.net.k = parse(key, v)?,
            "l" => self.net.l = parse(key, v)?,
            "codec_hidden" => self.codec_hidden = parse(key, v)?,
            "attention" => self.options.use_attention = parse_bool(key, v)?,
            "msgcodec" => self.options.use_msgcodec = parse_bool(key, v)?,
            "mask" => match v.parse::<MaskSource>()? {
                MaskSource::Ones => self.options.use_attention = false,
                m => self.options.mask = m,
            },
            "norm" => self.options.norm = v.parse::<NormalizationKind>()?,
            "lambda_mr" => self.weights.mr = parse(key, v)?,
            "lambda_md" => self.weights.md = parse(key, v)?,
            "lambda_i" => self.weights.image = parse(key, v)?,
            "lambda_d" => self.weights.disc = parse(key, v)?,
            "lambda_g" => self.weights.gen = parse(key, v)?,
            "noise" => self.channel = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(&parse_kv(text)?)?;
        Ok(c)
    }

    /// All settings in a fixed order; floats use round-trip formatting.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let n = &self.net;
        let w = &self.weights;
        [
            ("height", n.height.to_string()),
            ("width", n.width.to_string()),
            ("channels", n.channels.to_string()),
            ("base_width", n.base_width.to_string()),
            ("ext_blocks", n.ext_blocks.to_string()),
            ("emb_blocks", n.emb_blocks.to_string()),
            ("dec_blocks", n.dec_blocks.to_string()),
            ("disc_blocks", n.disc_blocks.to_string()),
            ("k", n.k.to_string()),
            ("l", n.l.to_string()),
            ("codec_hidden", self.codec_hidden.to_string()),
            ("attention", self.options.use_attention.to_string()),
            ("msgcodec", self.options.use_msgcodec.to_string()),
            ("mask", self.options.mask.to_string()),
            ("norm", self.options.norm.to_string()),
            ("lambda_mr", format!("{:?}", w.mr)),
            ("lambda_md", format!("{:?}", w.md)),
            ("lambda_i", format!("{:?}", w.image)),
            ("lambda_d", format!("{:?}", w.disc)),
            ("lambda_g", format!("{:?}", w.gen)),
            ("noise", self.channel.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_clip", format!("{:?}", self.grad_clip)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.channel.validate()?;
        let w = &self.weights;
        if [w.mr, w.md, w.image, w.disc, w.gen]
            .iter()
            .any(|&x| x.is_nan() || x < 0.0)
        {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.codec_hidden == 0 {
            return Err(Error::Config("codec_hidden must be positive".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}
