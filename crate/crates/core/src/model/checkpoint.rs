//! Single-file binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "VADL" | version u32 | total_len u64
//! config_len u32 | config (UTF-8 key=value lines)
//! tensor_count u32
//! per tensor, sorted by name:
//!     name_len u16 | name | dtype u8 | rank u8 | dims u32×rank | payload
//! checksum u64   (FNV-1a over every preceding byte)
//! ```

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;

use super::{ViTConfig, ViTModel};
use crate::attention::{AttentionSpec, Variant};
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VADL";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

fn config_record(c: &ViTConfig, has_head: bool) -> String {
    let a = &c.attention;
    let pairs: Vec<(&str, String)> = vec![
        ("model.image_size", c.image_size.to_string()),
        ("model.patch_size", c.patch_size.to_string()),
        ("model.depth", c.depth.to_string()),
        ("model.d_model", c.d_model.to_string()),
        ("model.heads", c.heads.to_string()),
        ("model.mlp_ratio", c.mlp_ratio.to_string()),
        ("model.num_classes", c.num_classes.to_string()),
        ("model.use_cls_token", c.use_cls_token.to_string()),
        ("model.has_head", has_head.to_string()),
        ("attention.variant", a.variant.to_string()),
        ("attention.feature_map", a.feature_map.to_string()),
        ("attention.landmarks", a.landmarks.to_string()),
        ("attention.proj_rank", a.proj_rank.to_string()),
        ("attention.rand_features", a.rand_features.to_string()),
        ("attention.seq_len_fixed", a.seq_len_fixed.to_string()),
        ("attention.pinv_iters", a.pinv_iters.to_string()),
        ("attention.seed", a.seed.to_string()),
        ("attention.denom_eps", a.denom_eps.to_string()),
    ];
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn parse_config(text: &str, path: &Path) -> Result<(ViTConfig, bool)> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let map: BTreeMap<&str, &str> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split_once('=').ok_or_else(|| bad(format!("config line without '=': {l:?}"))))
        .collect::<Result<_>>()?;
    let get = |k: &str| map.get(k).copied().ok_or_else(|| bad(format!("config key {k} missing")));
    fn num<T: std::str::FromStr>(v: &str, k: &str, path: &Path) -> Result<T> {
        v.parse().map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: format!("bad value {v:?} for {k}"),
        })
    }
    let n = |k: &str| -> Result<usize> { num(get(k)?, k, path) };
    let variant: Variant = get("attention.variant")?.parse()?;
    let d_model = n("model.d_model")?;
    let heads = n("model.heads")?;
    let mut attention = AttentionSpec::new(variant, d_model, heads);
    attention.feature_map = get("attention.feature_map")?.parse()?;
    attention.landmarks = n("attention.landmarks")?;
    attention.proj_rank = n("attention.proj_rank")?;
    attention.rand_features = n("attention.rand_features")?;
    attention.seq_len_fixed = n("attention.seq_len_fixed")?;
    attention.pinv_iters = n("attention.pinv_iters")?;
    attention.seed = num(get("attention.seed")?, "attention.seed", path)?;
    attention.denom_eps = num(get("attention.denom_eps")?, "attention.denom_eps", path)?;
    let config = ViTConfig {
        image_size: n("model.image_size")?,
        patch_size: n("model.patch_size")?,
        depth: n("model.depth")?,
        d_model,
        heads,
        mlp_ratio: n("model.mlp_ratio")?,
        num_classes: n("model.num_classes")?,
        attention,
        use_cls_token: num(get("model.use_cls_token")?, "model.use_cls_token", path)?,
    };
    let has_head = num(get("model.has_head")?, "model.has_head", path)?;
    Ok((config, has_head))
}

/// Serialize `model` to bytes.
pub fn encode<E: Element>(model: &ViTModel<E>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes()); // patched below
    let cfg = config_record(&model.config, model.head.is_some());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    let tensors = model.named();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(E::DTYPE.code());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let total = (out.len() + 8) as u64;
    out[8..16].copy_from_slice(&total.to_le_bytes());
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                reason: format!("record overruns body at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parse a checkpoint from bytes; `path` only labels errors.
pub fn decode<E: Element>(bytes: &[u8], path: &Path) -> Result<ViTModel<E>> {
    let truncated = |needed: u64| Error::Truncated {
        path: path.to_path_buf(),
        needed,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "VADL",
        });
    }
    if bytes.len() < HEADER_LEN + 8 {
        return Err(truncated((HEADER_LEN + 8) as u64));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let total = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    if (bytes.len() as u64) < total {
        return Err(truncated(total));
    }
    if bytes.len() as u64 > total {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} trailing bytes", bytes.len() as u64 - total),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }

    let mut r = Reader {
        bytes: body,
        pos: HEADER_LEN,
        path,
    };
    let cfg_len = r.u32()? as usize;
    let cfg = std::str::from_utf8(r.take(cfg_len)?).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        reason: "config record is not UTF-8".into(),
    })?;
    let (config, has_head) = parse_config(cfg, path)?;
    let mut model = ViTModel::<E>::init(config, 0)?;
    if !has_head {
        model.head = None;
    }
    let expected = model.named().len();
    let count = r.u32()? as usize;
    if count != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{count} tensors stored, model needs {expected}"),
        });
    }
    let mut seen = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            reason: "tensor name is not UTF-8".into(),
        })?;
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("unknown dtype for {name}"),
        })?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = r.take(len * dtype.size())?;
        let data: Vec<E> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| E::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| E::lit(f64::read_le(c))).collect(),
        };
        model.set_named(&name, Tensor::new(&dims, data)?)?;
        seen.push(name);
    }
    if r.pos != body.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "unread bytes after tensor table".into(),
        });
    }
    seen.sort();
    seen.dedup();
    if seen.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "duplicate tensor names".into(),
        });
    }
    Ok(model)
}

pub fn save_checkpoint<E: Element>(model: &ViTModel<E>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<ViTModel<E>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
