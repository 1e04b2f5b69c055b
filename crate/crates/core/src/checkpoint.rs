//! Single-file training checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic    8 bytes  "IGAHCKPT"
//! version  u32
//! config   u32 length + UTF-8 key=value text (run config, then `state.*` counters)
//! count    u32 number of tensors
//! tensor   u32 name length, name, u32 rank, rank x u32 dims, f32 LE values
//! end      8 bytes  "IGAHEND\0"
//! ```
//!
//! Tensor names carry a store prefix: `w/` network weights, `s/` batch-norm
//! statistics, `c/` codec weights, `gm/`, `gv/`, `dm/`, `dv/` the generator
//! and discriminator Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{format_kv, parse_kv, RunConfig};
use crate::error::{Error, Result};
use crate::msgcodec::MsgCodecParams;
use crate::nets::ModelParams;
use crate::params::ParamStore;
use crate::pipeline::Model;
use crate::tensor::Tensor;
use crate::train::{Adam, TrainState};

pub const MAGIC: &[u8; 8] = b"IGAHCKPT";
pub const END: &[u8; 8] = b"IGAHEND\0";
pub const VERSION: u32 = 1;

/// A deserialized checkpoint.
#[derive(Clone, Debug)]
pub struct CheckpointBundle {
    pub version: u32,
    pub state: TrainState,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_store(buf: &mut Vec<u8>, prefix: &str, store: &ParamStore<f32>) -> Result<()> {
    for (name, t) in store.iter() {
        let full = format!("{prefix}{name}");
        put_u32(buf, full.len())?;
        buf.extend_from_slice(full.as_bytes());
        put_u32(buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(buf, d)?;
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

/// Serializes a training state.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut kv = state.config.to_kv();
    let best = state
        .best_val_bpa
        .map_or_else(|| "none".to_string(), |b| format!("{b:?}"));
    for (k, v) in [
        ("state.epoch", state.epoch.to_string()),
        ("state.step", state.step.to_string()),
        ("state.gen_t", state.gen_opt.t.to_string()),
        ("state.disc_t", state.disc_opt.t.to_string()),
        ("state.best_val_bpa", best),
    ] {
        kv.push((k.to_string(), v));
    }
    let text = format_kv(&kv);
    let empty = ParamStore::new();
    let stores: [(&str, &ParamStore<f32>); 7] = [
        ("w/", &state.model.params.weights),
        ("s/", &state.model.params.stats),
        (
            "c/",
            state.model.codec.as_ref().map_or(&empty, |c| c.store()),
        ),
        ("gm/", &state.gen_opt.m),
        ("gv/", &state.gen_opt.v),
        ("dm/", &state.disc_opt.m),
        ("dv/", &state.disc_opt.v),
    ];
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut buf, text.len())?;
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, stores.iter().map(|(_, s)| s.len()).sum())?;
    for (prefix, store) in stores {
        put_store(&mut buf, prefix, store)?;
    }
    buf.extend_from_slice(END);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated file: expected {n} more bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses a serialized training state.
pub fn decode(bytes: &[u8]) -> Result<CheckpointBundle> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = r.u32("version")? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let n = r.u32("config length")?;
    let text = std::str::from_utf8(r.take(n, "config")?)
        .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
    let (counters, settings): (Vec<_>, Vec<_>) = parse_kv(text)?
        .into_iter()
        .partition(|(k, _)| k.starts_with("state."));
    let mut config = RunConfig::default();
    config.apply(&settings)?;
    let counter = |key: &str| -> Result<&str> {
        counters
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
    };
    let int = |key: &str| -> Result<u64> {
        counter(key)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for {key}")))
    };

    let mut stores: Vec<(&str, ParamStore<f32>)> = ["w/", "s/", "c/", "gm/", "gv/", "dm/", "dv/"]
        .into_iter()
        .map(|p| (p, ParamStore::new()))
        .collect();
    let count = r.u32("tensor count")?;
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("dims"))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for {name}")))?;
        let raw = r.take(numel * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let (store, rest) = stores
            .iter_mut()
            .find_map(|(p, s)| name.strip_prefix(*p).map(|rest| (s, rest.to_string())))
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        store.insert(rest, t);
    }
    if r.take(8, "end marker")? != END {
        return Err(Error::Checkpoint("corrupt end marker".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after end marker".into()));
    }

    let mut it = stores.into_iter().map(|(_, s)| s);
    let mut next = || it.next().expect("seven stores");
    let (weights, stats, codec, gm, gv, dm, dv) =
        (next(), next(), next(), next(), next(), next(), next());
    let codec = if config.options.use_msgcodec {
        Some(MsgCodecParams::from_store(codec)?)
    } else {
        None
    };
    let model = Model {
        net: config.net.clone(),
        options: config.options,
        params: ModelParams { weights, stats },
        codec,
    };
    model.check()?;
    let mut gen_opt = Adam::new(config.lr);
    (gen_opt.t, gen_opt.m, gen_opt.v) = (int("state.gen_t")?, gm, gv);
    let mut disc_opt = Adam::new(config.lr);
    (disc_opt.t, disc_opt.m, disc_opt.v) = (int("state.disc_t")?, dm, dv);
    let best_val_bpa = match counter("state.best_val_bpa")? {
        "none" => None,
        v => Some(
            v.parse()
                .map_err(|_| Error::Checkpoint("bad value for state.best_val_bpa".into()))?,
        ),
    };
    Ok(CheckpointBundle {
        version,
        state: TrainState {
            epoch: int("state.epoch")?,
            step: int("state.step")?,
            best_val_bpa,
            config,
            model,
            gen_opt,
            disc_opt,
        },
    })
}

/// Writes atomically: a temporary sibling file is written, synced and renamed.
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointBundle> {
    let bytes =
        fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::NetConfig;

    fn state() -> TrainState {
        TrainState::new(RunConfig {
            net: NetConfig {
                height: 8,
                width: 8,
                base_width: 2,
                ext_blocks: 1,
                emb_blocks: 1,
                dec_blocks: 1,
                disc_blocks: 1,
                k: 4,
                l: 2,
                ..NetConfig::default()
            },
            codec_hidden: 3,
            ..RunConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_bytes() {
        let mut s = state();
        s.epoch = 3;
        s.best_val_bpa = Some(0.75);
        let b = encode(&s).unwrap();
        let back = decode(&b).unwrap().state;
        assert_eq!(encode(&back).unwrap(), b);
        assert_eq!(back.epoch, 3);
        assert_eq!(back.best_val_bpa, Some(0.75));
    }

    #[test]
    fn rejects_damage() {
        let b = encode(&state()).unwrap();
        for cut in [0, 5, 12, b.len() / 2, b.len() - 1] {
            let e = decode(&b[..cut]).unwrap_err().to_string();
            assert!(e.contains("truncated"), "{cut}: {e}");
        }
        let mut bad = b.clone();
        bad[8] = 9;
        assert!(decode(&bad).unwrap_err().to_string().contains("version"));
        let mut bad = b;
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
    }
}
