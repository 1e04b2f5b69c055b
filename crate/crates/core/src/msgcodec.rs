//! Symmetric message coding.
//!
//! The encoder compresses a k-bit message into l < k real values
//! (`k -> h -> l`, ReLU hidden layer, sigmoid output); the decoder maps the l
//! values recovered from an image back to k bit probabilities
//! (`l -> h -> k`, same structure).

use std::fmt;

use rand::Rng;

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamStore};
use crate::tensor::{Real, Tensor};

/// Threshold at which a recovered value becomes a 1 bit (ties go to 1).
pub const BIT_THRESHOLD: f64 = 0.5;

/// A binary message of length k > 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMessage {
    bits: Vec<u8>,
}

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Message("message must have at least one bit".into()));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Message(format!("bit value {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    /// Parses an ASCII string of `0`/`1` characters.
    pub fn from_bit_str(s: &str) -> Result<Self> {
        let bits = s
            .trim()
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Message(format!("invalid bit character {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::new(bits)
    }

    /// Parses hex digits (most significant bit first) and keeps the first `k` bits.
    pub fn from_hex(s: &str, k: usize) -> Result<Self> {
        let s = s.trim().trim_start_matches("0x");
        let mut bits = Vec::with_capacity(s.len() * 4);
        for c in s.chars() {
            let v = c
                .to_digit(16)
                .ok_or_else(|| Error::Message(format!("invalid hex digit {c:?}")))?;
            bits.extend((0..4).rev().map(|i| ((v >> i) & 1) as u8));
        }
        if bits.len() < k {
            return Err(Error::Message(format!(
                "hex string holds {} bits, {k} requested",
                bits.len()
            )));
        }
        bits.truncate(k);
        Self::new(bits)
    }

    /// Hard decision on real-valued outputs at [`BIT_THRESHOLD`].
    pub fn binarize<T: Real>(values: &[T]) -> Result<Self> {
        Self::new(
            values
                .iter()
                .map(|v| u8::from(v.f64() >= BIT_THRESHOLD))
                .collect(),
        )
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn to_reals<T: Real>(&self) -> Vec<T> {
        self.bits.iter().map(|&b| T::c(f64::from(b))).collect()
    }

    pub fn inverted(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| 1 - b).collect(),
        }
    }
}

impl fmt::Display for BitMessage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// A compressed message: l values strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMessage {
    pub values: Vec<f64>,
}

impl EncodedMessage {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Weights of both codec MLPs.
///
/// Names: `enc.w1 [k,h]`, `enc.b1 [h]`, `enc.w2 [h,l]`, `enc.b2 [l]`,
/// `dec.w1 [l,h]`, `dec.b1 [h]`, `dec.w2 [h,k]`, `dec.b2 [k]`.
#[derive(Clone, Debug)]
pub struct MsgCodecParams<T: Real> {
    k: usize,
    l: usize,
    hidden: usize,
    store: ParamStore<T>,
}

fn layer_shapes(k: usize, l: usize, h: usize) -> [(&'static str, Vec<usize>, usize); 8] {
    [
        ("enc.w1", vec![k, h], k),
        ("enc.b1", vec![h], k),
        ("enc.w2", vec![h, l], h),
        ("enc.b2", vec![l], h),
        ("dec.w1", vec![l, h], l),
        ("dec.b1", vec![h], l),
        ("dec.w2", vec![h, k], h),
        ("dec.b2", vec![k], h),
    ]
}

impl<T: Real> MsgCodecParams<T> {
    /// Default hidden width for a k-bit message.
    pub fn default_hidden(k: usize) -> usize {
        2 * k
    }

    fn check_dims(k: usize, l: usize, hidden: usize) -> Result<()> {
        if k == 0 || l == 0 || hidden == 0 {
            return Err(Error::InvalidParameter(
                "codec dimensions must be positive".into(),
            ));
        }
        if l >= k {
            return Err(Error::InvalidParameter(format!(
                "compressed length l={l} must be smaller than k={k}"
            )));
        }
        Ok(())
    }

    /// Fan-in scaled uniform initialization.
    pub fn init<R: Rng>(k: usize, l: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Self::check_dims(k, l, hidden)?;
        let mut store = ParamStore::new();
        for (name, shape, fan_in) in layer_shapes(k, l, hidden) {
            store.insert(name, fan_in_uniform(&shape, fan_in, rng));
        }
        Ok(Self {
            k,
            l,
            hidden,
            store,
        })
    }

    pub fn zeros(k: usize, l: usize, hidden: usize) -> Result<Self> {
        Self::check_dims(k, l, hidden)?;
        let mut store = ParamStore::new();
        for (name, shape, _) in layer_shapes(k, l, hidden) {
            store.insert(name, Tensor::zeros(shape));
        }
        Ok(Self {
            k,
            l,
            hidden,
            store,
        })
    }

    /// Rebuilds from a parameter store, validating the layer chain.
    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        let w1 = store.require("enc.w1")?.shape().to_vec();
        let w2 = store.require("enc.w2")?.shape().to_vec();
        let (k, hidden, l) = match (w1.as_slice(), w2.as_slice()) {
            ([k, h], [h2, l]) if h == h2 => (*k, *h, *l),
            _ => return Err(Error::shape("codec encoder weights do not chain")),
        };
        Self::check_dims(k, l, hidden)?;
        for (name, shape, _) in layer_shapes(k, l, hidden) {
            if store.require(name)?.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "codec parameter {name} has wrong shape"
                )));
            }
        }
        Ok(Self {
            k,
            l,
            hidden,
            store,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }
}

fn mlp<T: Real>(x: &Var<T>, p: &Bound<T>, prefix: &str) -> Result<Var<T>> {
    let h = x
        .matmul(p.get(&format!("{prefix}w1"))?)?
        .add_row_bias(p.get(&format!("{prefix}b1"))?)?
        .relu();
    Ok(h.matmul(p.get(&format!("{prefix}w2"))?)?
        .add_row_bias(p.get(&format!("{prefix}b2"))?)?
        .sigmoid())
}

/// Batched message encoder on a tape: `[N, k] -> [N, l]`.
///
/// `prefix` is prepended to the parameter names when the codec is bound as
/// part of a larger model.
pub fn encode_var<T: Real>(m: &Var<T>, p: &Bound<T>, prefix: &str) -> Result<Var<T>> {
    mlp(m, p, &format!("{prefix}enc."))
}

/// Batched message decoder on a tape: `[N, l] -> [N, k]`.
pub fn decode_var<T: Real>(m_de: &Var<T>, p: &Bound<T>, prefix: &str) -> Result<Var<T>> {
    mlp(m_de, p, &format!("{prefix}dec."))
}

/// Compresses one message.
pub fn encode_message<T: Real>(m: &BitMessage, p: &MsgCodecParams<T>) -> Result<EncodedMessage> {
    if m.len() != p.k {
        return Err(Error::shape(format!(
            "message has {} bits, codec expects {}",
            m.len(),
            p.k
        )));
    }
    let tape = Tape::new();
    let bound = p.store.bind(&tape, |_| false);
    let x = tape.constant(Tensor::new(vec![1, p.k], m.to_reals())?);
    let out = encode_var(&x, &bound, "")?;
    Ok(EncodedMessage {
        values: out.value().data().iter().map(|v| v.f64()).collect(),
    })
}

/// Maps decoded values back to k bit probabilities.
pub fn decode_message<T: Real>(m_de: &[T], p: &MsgCodecParams<T>) -> Result<Vec<T>> {
    if m_de.len() != p.l {
        return Err(Error::shape(format!(
            "decoded message has {} values, codec expects {}",
            m_de.len(),
            p.l
        )));
    }
    let tape = Tape::new();
    let bound = p.store.bind(&tape, |_| false);
    let x = tape.constant(Tensor::new(vec![1, p.l], m_de.to_vec())?);
    Ok(decode_var(&x, &bound, "")?.into_value_vec())
}

impl<T: Real> Var<T> {
    pub(crate) fn into_value_vec(self) -> Vec<T> {
        self.value().data().to_vec()
    }
}

/// Weighted message losses on a tape:
/// `L_MR = w_mr * mean((m - m_out)^2)`, `L_MD = w_md * mean((m_en - m_de)^2)`.
pub fn message_losses_var<T: Real>(
    m: &Var<T>,
    m_out: &Var<T>,
    m_en: &Var<T>,
    m_de: &Var<T>,
    w_mr: T,
    w_md: T,
) -> Result<(Var<T>, Var<T>)> {
    let l_mr = m_out.mse(m)?.scale(w_mr);
    let l_md = m_de.mse(m_en)?.scale(w_md);
    Ok((l_mr, l_md))
}

/// Plain-value form of [`message_losses_var`].
pub fn message_losses(
    m: &BitMessage,
    m_out: &[f64],
    m_en: &EncodedMessage,
    m_de: &[f64],
    w_mr: f64,
    w_md: f64,
) -> Result<(f64, f64)> {
    if m_out.len() != m.len() || m_de.len() != m_en.len() {
        return Err(Error::shape("message loss operands differ in length"));
    }
    let tape = Tape::<f64>::new();
    let v = |d: Vec<f64>| -> Result<Var<f64>> { Ok(tape.constant(Tensor::new(vec![d.len()], d)?)) };
    let (mr, md) = message_losses_var(
        &v(m.to_reals())?,
        &v(m_out.to_vec())?,
        &v(m_en.values.clone())?,
        &v(m_de.to_vec())?,
        w_mr,
        w_md,
    )?;
    Ok((mr.value().item(), md.value().item()))
}
