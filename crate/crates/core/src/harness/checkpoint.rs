//! NTK1 named-tensor archives.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "NTK1"  u32 version  u32 count
//! count × { u16 name_len  name (UTF-8)  u8 rank  rank × u32 dim }
//! count × f32 payloads, in header order
//! u32 json_len  json (UTF-8)
//! ```
//!
//! The JSON blob records the model family, the stack skeleton (block
//! kinds, core types, skips, norms and layer order) and the training step,
//! which is enough to rebuild models that surgery has reshaped.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Activation, Block, BlockKind, Core, Family, Layer, Linear, Model, Norm, Stem};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NTK1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum CoreSkeleton {
    SelfAttention { heads: usize },
    FeedForward { activation: Activation },
    Affine,
    Conv { stride: usize },
    Dense,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockSkeleton {
    kind: BlockKind,
    core: CoreSkeleton,
    activation: Option<Activation>,
    skip: bool,
    norm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum StemSkeleton {
    Embeddings,
    Flat,
    Image { height: usize, width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Skeleton {
    stem: StemSkeleton,
    layers: Vec<Vec<BlockSkeleton>>,
    order: Vec<usize>,
}

/// JSON blob stored after the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub family: Family,
    pub step: u64,
    skeleton: Skeleton,
}

fn skeleton_of(model: &Model) -> Skeleton {
    let stem = match &model.stem {
        Stem::Embeddings { .. } => StemSkeleton::Embeddings,
        Stem::Flat => StemSkeleton::Flat,
        Stem::Image { height, width } => StemSkeleton::Image { height: *height, width: *width },
    };
    let layers = model
        .layers
        .iter()
        .map(|l| {
            l.blocks
                .iter()
                .map(|b| BlockSkeleton {
                    kind: b.kind,
                    core: match &b.core {
                        Core::SelfAttention { heads, .. } => CoreSkeleton::SelfAttention { heads: *heads },
                        Core::FeedForward { activation, .. } => CoreSkeleton::FeedForward { activation: *activation },
                        Core::Affine(_) => CoreSkeleton::Affine,
                        Core::Conv { stride, .. } => CoreSkeleton::Conv { stride: *stride },
                        Core::Dense(_) => CoreSkeleton::Dense,
                        Core::Zero => CoreSkeleton::Zero,
                    },
                    activation: b.activation,
                    skip: b.skip,
                    norm: b.norm.is_some(),
                })
                .collect()
        })
        .collect();
    Skeleton { stem, layers, order: model.order.clone() }
}

/// Serializes `model` to NTK1 bytes.
pub fn encode_checkpoint(model: &Model, step: u64) -> Result<Vec<u8>> {
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in &params {
        let len = u16::try_from(name.len()).map_err(|_| Error::Schema(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &params {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        family: model.family.clone(),
        step,
        skeleton: skeleton_of(model),
    };
    let json = serde_json::to_vec(&meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos as u64, format!("truncated archive reading {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses NTK1 bytes into named tensors plus metadata.
pub fn decode_tensors(bytes: &[u8]) -> Result<(Vec<(String, Tensor)>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected NTK1"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported archive version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut headers = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(at as u64 + 2, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        if rank == 0 || shape.contains(&0) {
            return Err(Error::format(at as u64, format!("tensor `{name}` has empty shape {shape:?}")));
        }
        headers.push((name, shape));
    }
    let mut tensors = Vec::with_capacity(headers.len());
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let at = r.pos;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(at as u64, "tensor too large"))?, "payload")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let json_len = r.u32("config length")? as usize;
    let at = r.pos;
    let json = r.take(json_len, "config")?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after config"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(json)
        .map_err(|e| Error::format(at as u64, format!("config blob: {e}")))?;
    Ok((tensors, meta))
}

struct Pool {
    tensors: BTreeMap<String, Tensor>,
    missing: Vec<String>,
}

impl Pool {
    fn take(&mut self, name: &str) -> Tensor {
        self.tensors.remove(name).unwrap_or_else(|| {
            self.missing.push(name.to_string());
            Tensor::zeros(&[1])
        })
    }

    fn linear(&mut self, name: &str) -> Linear {
        Linear {
            weight: self.take(&format!("{name}.weight")),
            bias: self.take(&format!("{name}.bias")),
        }
    }

    fn norm(&mut self, name: &str) -> Norm {
        Norm {
            gain: self.take(&format!("{name}.gain")),
            bias: self.take(&format!("{name}.bias")),
        }
    }
}

/// Rebuilds a model from NTK1 bytes. The archive's tensor names must match
/// the skeleton's parameter names exactly.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, u64)> {
    let (tensors, meta) = decode_tensors(bytes)?;
    let mut pool = Pool {
        tensors: BTreeMap::new(),
        missing: Vec::new(),
    };
    for (name, t) in tensors {
        if pool.tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Schema(format!("duplicate tensor `{name}`")));
        }
    }
    let sk = meta.skeleton;
    let stem = match sk.stem {
        StemSkeleton::Embeddings => Stem::Embeddings {
            token: pool.take("embed.token"),
            position: pool.take("embed.position"),
            norm: pool.norm("embed.norm"),
        },
        StemSkeleton::Flat => Stem::Flat,
        StemSkeleton::Image { height, width } => Stem::Image { height, width },
    };
    let mut layers = Vec::with_capacity(sk.layers.len());
    for (i, blocks) in sk.layers.iter().enumerate() {
        let mut out = Vec::with_capacity(blocks.len());
        for b in blocks {
            let p = format!("layer{}.{}", i + 1, b.kind.tap_name());
            let core = match &b.core {
                CoreSkeleton::SelfAttention { heads } => Core::SelfAttention {
                    query: pool.linear(&format!("{p}.query")),
                    key: pool.linear(&format!("{p}.key")),
                    value: pool.linear(&format!("{p}.value")),
                    output: pool.linear(&format!("{p}.output")),
                    heads: *heads,
                },
                CoreSkeleton::FeedForward { activation } => Core::FeedForward {
                    up: pool.linear(&format!("{p}.up")),
                    down: pool.linear(&format!("{p}.down")),
                    activation: *activation,
                },
                CoreSkeleton::Affine => Core::Affine(pool.linear(&format!("{p}.affine"))),
                CoreSkeleton::Dense => Core::Dense(pool.linear(&format!("{p}.dense"))),
                CoreSkeleton::Conv { stride } => Core::Conv {
                    kernel: pool.take(&format!("{p}.kernel")),
                    bias: pool.take(&format!("{p}.bias")),
                    stride: *stride,
                },
                CoreSkeleton::Zero => Core::Zero,
            };
            let norm = b.norm.then(|| pool.norm(&format!("{p}.norm")));
            out.push(Block {
                kind: b.kind,
                core,
                activation: b.activation,
                skip: b.skip,
                norm,
            });
        }
        layers.push(Layer { blocks: out });
    }
    let head = pool.linear("head");
    if !pool.missing.is_empty() || !pool.tensors.is_empty() {
        let unknown: Vec<&str> = pool.tensors.keys().map(String::as_str).collect();
        return Err(Error::Schema(format!(
            "unknown tensors in archive: [{}]; missing tensors: [{}]",
            unknown.join(", "),
            pool.missing.join(", ")
        )));
    }
    if sk.order.iter().any(|&i| i >= layers.len()) {
        return Err(Error::Schema("layer order refers to a missing layer".into()));
    }
    let model = Model {
        family: meta.family,
        stem,
        layers,
        order: sk.order,
        head,
    };
    Ok((model, meta.step))
}

/// Writes the archive atomically: a sibling temp file renamed into place.
pub fn save_checkpoint(model: &Model, path: &Path, step: u64) -> Result<()> {
    let bytes = encode_checkpoint(model, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, u64)> {
    decode_checkpoint(&std::fs::read(path)?)
}
