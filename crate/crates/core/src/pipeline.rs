//! End-to-end forward pass shared by training and inference.
//!
//! `cover, bits -> M_en -> (A ⊙ cover, expanded M_en) -> F_co -> I_en ->
//! channel -> I_no -> M_de -> M_out`

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{iga_mask_batch, sobel_mask_batch, MaskSource, NormalizationKind};
use crate::diff::{Tape, Var};
use crate::distortions::Realized;
use crate::error::{Error, Result};
use crate::msgcodec::{decode_var, encode_var, BitMessage, MsgCodecParams};
use crate::nets::{BatchStats, ModelParams, NetConfig, Nets, NormMode};
use crate::params::Bound;
use crate::tensor::{Real, Tensor};

/// Ablation switches and attention settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelOptions {
    pub use_attention: bool,
    pub use_msgcodec: bool,
    /// Mask used when attention is on: `Iga` or `Sobel`.
    pub mask: MaskSource,
    pub norm: NormalizationKind,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            use_attention: true,
            use_msgcodec: true,
            mask: MaskSource::Iga,
            norm: NormalizationKind::MinMax,
        }
    }
}

impl ModelOptions {
    pub fn variant(variant: Variant) -> Self {
        let (use_attention, use_msgcodec) = match variant {
            Variant::Basic => (false, false),
            Variant::WithCodec => (false, true),
            Variant::WithAttention => (true, false),
            Variant::Both => (true, true),
        };
        Self {
            use_attention,
            use_msgcodec,
            ..Self::default()
        }
    }

    /// The mask actually applied to the cover.
    pub fn effective_mask(&self) -> MaskSource {
        if self.use_attention {
            self.mask
        } else {
            MaskSource::Ones
        }
    }
}

/// The four ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Basic,
    WithCodec,
    WithAttention,
    Both,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Basic,
        Variant::WithCodec,
        Variant::WithAttention,
        Variant::Both,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Basic => "Basic",
            Variant::WithCodec => "w MC.",
            Variant::WithAttention => "w Att.",
            Variant::Both => "Both",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_lowercase()
            .replace(['.', ' ', '-', '_'], "")
            .as_str()
        {
            "basic" => Ok(Variant::Basic),
            "wmc" | "codec" => Ok(Variant::WithCodec),
            "watt" | "attention" => Ok(Variant::WithAttention),
            "both" => Ok(Variant::Both),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

/// All learned state needed to embed and extract.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub net: NetConfig,
    pub options: ModelOptions,
    pub params: ModelParams<T>,
    pub codec: Option<MsgCodecParams<T>>,
}

/// Tape values of one forward pass.
pub struct Pass<T: Real> {
    pub m_en: Var<T>,
    pub i_en: Var<T>,
    pub i_no: Var<T>,
    pub m_de: Var<T>,
    pub m_out: Var<T>,
}

/// Codec parameters are bound under this prefix next to the network weights.
pub const CODEC_PREFIX: &str = "codec.";

/// Runs the generator side of the pipeline. `attended` is `A ⊙ cover`;
/// `msg` holds the `[N, k]` bits.
pub fn forward<T: Real>(
    nets: &Nets<T>,
    use_msgcodec: bool,
    cover: &Var<T>,
    attended: &Var<T>,
    msg: &Var<T>,
    channel: &Realized<T>,
) -> Result<Pass<T>> {
    let s = cover.shape().to_vec();
    if s.len() != 4 || msg.shape().len() != 2 || msg.shape()[0] != s[0] {
        return Err(Error::shape(format!(
            "cover {s:?} and message {:?} do not form a batch",
            msg.shape()
        )));
    }
    let m_en = if use_msgcodec {
        encode_var(msg, nets.params, CODEC_PREFIX)?
    } else {
        msg.clone()
    };
    let m_exp = m_en.expand_spatial(s[2], s[3])?;
    let f_co = nets.extract_features(attended, &m_exp)?;
    let i_en = nets.embed(&f_co, cover)?;
    let i_no = channel.apply_var(&i_en, cover)?;
    let m_de = nets.decode(&i_no)?;
    let m_out = if use_msgcodec {
        decode_var(&m_de, nets.params, CODEC_PREFIX)?
    } else {
        m_de.clone()
    };
    Ok(Pass {
        m_en,
        i_en,
        i_no,
        m_de,
        m_out,
    })
}

/// Stacks messages into an `[N, k]` tensor.
pub fn message_batch<T: Real>(msgs: &[BitMessage]) -> Result<Tensor<T>> {
    let k = msgs.first().map_or(0, BitMessage::len);
    if k == 0 || msgs.iter().any(|m| m.len() != k) {
        return Err(Error::shape(
            "messages in a batch must share one nonzero length",
        ));
    }
    Tensor::new(
        vec![msgs.len(), k],
        msgs.iter().flat_map(|m| m.to_reals()).collect(),
    )
}

impl<T: Real> Model<T> {
    pub fn init<R: Rng>(
        net: NetConfig,
        options: ModelOptions,
        codec_hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let params = ModelParams::init(&net, net.payload_len(options.use_msgcodec), rng)?;
        let codec = if options.use_msgcodec {
            Some(MsgCodecParams::init(net.k, net.l, codec_hidden, rng)?)
        } else {
            None
        };
        Ok(Self {
            net,
            options,
            params,
            codec,
        })
    }

    /// Validates that the parameters match the configuration.
    pub fn check(&self) -> Result<()> {
        self.params
            .check(&self.net, self.net.payload_len(self.options.use_msgcodec))?;
        match (&self.codec, self.options.use_msgcodec) {
            (Some(c), true) if c.k() == self.net.k && c.l() == self.net.l => Ok(()),
            (Some(_), true) => Err(Error::shape(
                "codec dimensions differ from the network config",
            )),
            (None, false) => Ok(()),
            _ => Err(Error::shape(
                "codec presence does not match the use_msgcodec flag",
            )),
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            options: self.options,
            params: self.params.cast(),
            codec: self.codec.as_ref().map(|c| {
                MsgCodecParams::from_store(c.store().cast()).expect("cast keeps codec shapes")
            }),
        }
    }

    /// Binds network and codec weights on `tape`; `track` sees prefixed names.
    pub fn bind(&self, tape: &Tape<T>, track: impl Fn(&str) -> bool) -> Bound<T> {
        let mut b = self.params.weights.bind(tape, &track);
        if let Some(c) = &self.codec {
            b.extend_prefixed(
                CODEC_PREFIX,
                c.store()
                    .bind(tape, |n| track(&format!("{CODEC_PREFIX}{n}"))),
            );
        }
        b
    }

    fn check_batch(&self, covers: &Tensor<T>) -> Result<()> {
        match *covers.shape() {
            [_, 3, h, w] if h == self.net.height && w == self.net.width => Ok(()),
            _ => Err(Error::shape(format!(
                "expected [N, 3, {}, {}] images, got {:?}",
                self.net.height,
                self.net.width,
                covers.shape()
            ))),
        }
    }

    /// Inverse gradient attention masks: gradient of the reconstruction loss
    /// with respect to the cover, from a pass with an all-ones mask and an
    /// identity channel. Parameters are held constant.
    pub fn iga_masks(
        &self,
        covers: &Tensor<T>,
        msgs: &Tensor<T>,
        train_norm: bool,
    ) -> Result<Tensor<T>> {
        self.check_batch(covers)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let nets = Nets {
            params: &bound,
            stats: &self.params.stats,
            mode: if train_norm {
                NormMode::Train(None)
            } else {
                NormMode::Eval
            },
        };
        let cover = tape.var(covers.clone());
        let m = tape.constant(msgs.clone());
        let pass = forward(
            &nets,
            self.options.use_msgcodec,
            &cover,
            &cover,
            &m,
            &Realized::Identity,
        )?;
        let l_mr = pass.m_out.mse(&m)?;
        let g = tape.backward(&l_mr)?.wrt(&cover)?;
        iga_mask_batch(&g, self.options.norm)
    }

    /// The mask this model applies to `covers` (all ones without attention).
    pub fn masks(
        &self,
        covers: &Tensor<T>,
        msgs: &Tensor<T>,
        train_norm: bool,
    ) -> Result<Tensor<T>> {
        match self.options.effective_mask() {
            MaskSource::Ones => Ok(Tensor::ones(covers.shape().to_vec())),
            MaskSource::Sobel => sobel_mask_batch(covers),
            MaskSource::Iga => self.iga_masks(covers, msgs, train_norm),
        }
    }

    /// Encodes a batch in evaluation mode: returns `(encoded, masks)`.
    pub fn embed_batch(
        &self,
        covers: &Tensor<T>,
        msgs: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_batch(covers)?;
        if msgs.shape() != [covers.shape()[0], self.net.k] {
            return Err(Error::shape(format!(
                "expected [{}, {}] message bits, got {:?}",
                covers.shape()[0],
                self.net.k,
                msgs.shape()
            )));
        }
        let masks = self.masks(covers, msgs, false)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let nets = Nets {
            params: &bound,
            stats: &self.params.stats,
            mode: NormMode::Eval,
        };
        let cover = tape.constant(covers.clone());
        let attended = cover.mul(&tape.constant(masks.clone()))?;
        let m = tape.constant(msgs.clone());
        let pass = forward(
            &nets,
            self.options.use_msgcodec,
            &cover,
            &attended,
            &m,
            &Realized::Identity,
        )?;
        Ok((pass.i_en.value().clone(), masks))
    }

    /// Recovers `[N, k]` bit estimates (threshold at 0.5) from images.
    pub fn extract_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_batch(images)?;
        let tape = Tape::new();
        let bound = self.bind(&tape, |_| false);
        let nets = Nets {
            params: &bound,
            stats: &self.params.stats,
            mode: NormMode::Eval,
        };
        let m_de = nets.decode(&tape.constant(images.clone()))?;
        let out = if self.options.use_msgcodec {
            decode_var(&m_de, &bound, CODEC_PREFIX)?
        } else {
            m_de
        };
        Ok(out.value().clone())
    }

    /// Embeds one message into one `[3, H, W]` cover.
    pub fn embed(&self, cover: &Tensor<T>, msg: &BitMessage) -> Result<Tensor<T>> {
        if msg.len() != self.net.k {
            return Err(Error::Message(format!(
                "message has {} bits, the model expects k={}",
                msg.len(),
                self.net.k
            )));
        }
        let covers = Tensor::stack(std::slice::from_ref(cover))?;
        let (enc, _) = self.embed_batch(&covers, &message_batch(std::slice::from_ref(msg))?)?;
        Ok(enc.batch_item(0))
    }

    /// Extracts the k-bit message from one `[3, H, W]` image.
    pub fn extract(&self, image: &Tensor<T>) -> Result<BitMessage> {
        let out = self.extract_batch(&Tensor::stack(std::slice::from_ref(image))?)?;
        BitMessage::binarize(out.data())
    }
}

/// Batch statistics collected during a training-mode pass.
pub type StatsLog<T> = RefCell<Vec<BatchStats<T>>>;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(options: ModelOptions) -> Model<f64> {
        let net = NetConfig {
            height: 8,
            width: 8,
            base_width: 4,
            ext_blocks: 1,
            emb_blocks: 1,
            dec_blocks: 1,
            disc_blocks: 1,
            k: 6,
            l: 3,
            ..NetConfig::default()
        };
        Model::init(net, options, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn variants_round_trip_names() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        let o = ModelOptions::variant(Variant::Basic);
        assert_eq!(o.effective_mask(), MaskSource::Ones);
    }

    #[test]
    fn embed_extract_shapes() {
        for v in Variant::ALL {
            let m = tiny(ModelOptions::variant(v));
            m.check().unwrap();
            let cover = Tensor::from_fn(vec![3, 8, 8], |i| (i % 5) as f64 / 5.0);
            let msg = BitMessage::from_bit_str("101100").unwrap();
            let enc = m.embed(&cover, &msg).unwrap();
            assert_eq!(enc.shape(), cover.shape());
            assert!(enc.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(m.extract(&enc).unwrap().len(), 6);
            assert!(matches!(
                m.embed(&cover, &BitMessage::from_bit_str("10").unwrap()),
                Err(Error::Message(_))
            ));
        }
    }

    #[test]
    fn iga_masks_in_unit_range() {
        let m = tiny(ModelOptions::default());
        let covers = Tensor::from_fn(vec![2, 3, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0);
        let msgs = Tensor::from_fn(vec![2, 6], |i| (i % 2) as f64);
        let a = m.masks(&covers, &msgs, false).unwrap();
        assert_eq!(a.shape(), covers.shape());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
