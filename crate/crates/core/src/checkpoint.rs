//! Binary checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! "AFLOWCKP"            8-byte magic
//! u32                   format version
//! u32 + bytes           UTF-8 TOML header (network config, training settings,
//!                       optimizer step, sampling generator state, iteration)
//! u32                   record count
//! records               u32 name length, name, u32 rank, rank × u64 dims, f32 data
//! u32                   CRC-32 of every preceding byte
//! ```
//!
//! Records are `param/<layer>/{weight,bias}` for every layer, then the same names
//! under `adam_m/` and `adam_v/`. The trainer keeps all of these `f32`-representable,
//! so storage is lossless and resuming is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig, NetworkParams};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainSettings};

pub const MAGIC: &[u8; 8] = b"AFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha generator: key, stream and word offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: NetworkConfig,
    pub settings: TrainSettings,
    pub params: NetworkParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn network(&self) -> Network {
        Network {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    iteration: u64,
    network: NetworkConfig,
    training: TrainSettings,
    optimizer: OptimizerHeader,
    rng: RngHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    t: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngHeader {
    seed: String,
    stream: u64,
    word_pos: String,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

fn records(ckpt: &Checkpoint) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (group, params) in GROUPS.iter().zip([&ckpt.params, &ckpt.adam.m, &ckpt.adam.v]) {
        for l in params.layers() {
            out.push((format!("{group}/{}/weight", l.name), &l.weight));
            out.push((format!("{group}/{}/bias", l.name), &l.bias));
        }
    }
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("{what} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        iteration: ckpt.iteration,
        network: ckpt.config.clone(),
        training: ckpt.settings,
        optimizer: OptimizerHeader { t: ckpt.adam.t },
        rng: RngHeader {
            seed: ckpt.rng.seed.iter().map(|b| format!("{b:02x}")).collect(),
            stream: ckpt.rng.stream,
            word_pos: ckpt.rng.word_pos.to_string(),
        },
    };
    let text = toml::to_string(&header).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ckpt.version.to_le_bytes());
    put_u32(&mut buf, text.len(), "header")?;
    buf.extend_from_slice(text.as_bytes());
    let recs = records(ckpt);
    put_u32(&mut buf, recs.len(), "record count")?;
    for (name, t) in recs {
        put_u32(&mut buf, name.len(), "record name")?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank(), "rank")?;
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            let f = x as f32;
            if f64::from(f) != x && !x.is_nan() {
                return Err(Error::format(format!("{name} holds a value not representable as f32")));
            }
            buf.extend_from_slice(&f.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format("checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct RawRecord<'a> {
    name: &'a [u8],
    dims: Vec<usize>,
    data: &'a [u8],
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)
        .map_err(|_| Error::format("file too short for a checkpoint"))?
        != MAGIC
    {
        return Err(Error::format("bad magic bytes; not a checkpoint"));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let header_len = r.u32()?;
    let header_bytes = r.take(header_len)?;
    let count = r.u32()?;
    let mut raw = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.take(name_len)?;
        let rank = r.u32()?;
        let mut dims = Vec::with_capacity(rank.min(8));
        let mut elems: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::format("tensor dimension overflows"))?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::format("tensor size overflows"))?;
            dims.push(d);
        }
        let nbytes = elems
            .checked_mul(4)
            .ok_or_else(|| Error::format("tensor size overflows"))?;
        raw.push(RawRecord {
            name,
            dims,
            data: r.take(nbytes)?,
        });
    }
    let body_end = r.pos;
    let stored = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint checksum"));
    }
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(Error::format("checkpoint checksum mismatch"));
    }

    let text = std::str::from_utf8(header_bytes).map_err(|_| Error::format("checkpoint header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let template = header.network.zero_params()?;
    let mut groups = Vec::with_capacity(GROUPS.len());
    let mut it = raw.into_iter();
    for group in GROUPS {
        let mut params = template.clone();
        for l in params.layers_mut() {
            for (part, tensor) in [("weight", &mut l.weight), ("bias", &mut l.bias)] {
                let expected = format!("{group}/{}/{part}", l.name);
                let rec = it
                    .next()
                    .ok_or_else(|| Error::format(format!("checkpoint lacks record {expected}")))?;
                if rec.name != expected.as_bytes() {
                    return Err(Error::format(format!(
                        "expected record {expected}, found {}",
                        String::from_utf8_lossy(rec.name)
                    )));
                }
                if rec.dims != tensor.shape() {
                    return Err(Error::format(format!(
                        "record {expected} has shape {:?}, config needs {:?}",
                        rec.dims,
                        tensor.shape()
                    )));
                }
                for (dst, chunk) in tensor.data_mut().iter_mut().zip(rec.data.chunks_exact(4)) {
                    *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
                }
            }
        }
        groups.push(params);
    }
    if it.next().is_some() {
        return Err(Error::format("checkpoint has unexpected extra records"));
    }
    let v = groups.pop().expect("three groups");
    let m = groups.pop().expect("three groups");
    let params = groups.pop().expect("three groups");

    let seed_hex = header.rng.seed.as_bytes();
    if seed_hex.len() != 64 {
        return Err(Error::format("rng seed must be 64 hex digits"));
    }
    let mut seed = [0u8; 32];
    for (i, pair) in seed_hex.chunks(2).enumerate() {
        let s = std::str::from_utf8(pair).map_err(|_| Error::format("rng seed is not hex"))?;
        seed[i] = u8::from_str_radix(s, 16).map_err(|_| Error::format("rng seed is not hex"))?;
    }
    let word_pos = header
        .rng
        .word_pos
        .parse::<u128>()
        .map_err(|_| Error::format("rng word position is not an integer"))?;

    Ok(Checkpoint {
        version,
        config: header.network,
        settings: header.training,
        params,
        adam: AdamState {
            config: header.training.adam,
            t: header.optimizer.t,
            m,
            v,
        },
        rng: RngState {
            seed,
            stream: header.rng.stream,
            word_pos,
        },
        iteration: header.iteration,
    })
}

/// Writes to `<path>.tmp` then renames over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::OutputMode;
    use crate::trainer::{TrainMode, Trainer};

    fn sample() -> Checkpoint {
        let cfg = NetworkConfig::reduced(OutputMode::Flow);
        let mut ckpt = Trainer::new(&cfg, TrainSettings::new(TrainMode::SingleFlow, 4, 9))
            .unwrap()
            .checkpoint();
        ckpt.iteration = 17;
        ckpt.adam.t = 17;
        ckpt.rng.word_pos = 123_456_789_012_345;
        ckpt
    }

    #[test]
    fn round_trip_is_fieldwise_and_bytewise() {
        let ckpt = sample();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("magic")));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("version")));
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(m)) if m.contains("checksum")));
        for cut in [3, 20, bytes.len() / 3, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn non_f32_values_are_refused() {
        let mut ckpt = sample();
        *ckpt.params.scalar_mut(0).unwrap() = 0.1;
        assert!(matches!(encode_checkpoint(&ckpt), Err(Error::Format(_))));
    }
}
