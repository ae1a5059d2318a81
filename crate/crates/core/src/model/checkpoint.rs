//! Versioned little-endian checkpoint files.
//!
//! ```text
//! magic    8 bytes  "DWVITCK\0"
//! version  u32
//! meta     u32 length + UTF-8 TOML ([model] config, optional [normalization])
//! count    u32
//! tensors  count × { u32 name length, name, u32 rank, rank × u32 dims, f32 data }
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DWVITCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<ChannelStats>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes `model` and its input normalization to `path` (via a temporary
/// file in the same directory, then rename).
pub fn save_checkpoint(model: &Model<f32>, normalization: Option<&ChannelStats>, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        model: model.config.clone(),
        normalization: normalization.cloned(),
    };
    let text = toml::to_string(&meta).map_err(|e| Error::Checkpoint(format!("serializing config: {e}")))?;
    let tensors = model.named_tensors();
    let mut buf = Vec::with_capacity(tensors.iter().map(|(_, t)| 4 * t.len() + 64).sum::<usize>() + text.len() + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, text.len())?;
    buf.extend_from_slice(text.as_bytes());
    put_u32(&mut buf, tensors.len())?;
    for (name, t) in tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn string(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)?;
        std::str::from_utf8(self.take(n, what)?).map_err(|e| Error::Checkpoint(format!("{what} is not UTF-8: {e}")))
    }
}

/// Reads a checkpoint. Either the full model is restored or an error is returned.
pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32("version")?;
    if version as u32 != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let meta: CheckpointMeta = toml::from_str(r.string("config")?)?;
    let mut model = Model::<f32>::build(&meta.model)?;

    let count = r.u32("tensor count")?;
    let mut loaded: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string("tensor name")?.to_string();
        let rank = r.u32("rank")?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")?);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            &name,
        )?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        loaded.push((name, Tensor::new(dims, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }

    let expected: Vec<(String, Vec<usize>)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "file holds {} tensors, the configured model has {}",
            loaded.len(),
            expected.len()
        )));
    }
    for ((name, shape), (lname, lt)) in expected.iter().zip(&loaded) {
        if name != lname || shape.as_slice() != lt.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {lname} {:?} does not match expected {name} {shape:?}",
                lt.shape()
            )));
        }
    }
    let mut values = loaded.into_iter().map(|(_, t)| t);
    let mut restore = |dst: &mut Tensor<f32>| {
        if let Some(t) = values.next() {
            *dst = t;
        }
    };
    // Same order as `named_tensors`: parameters, then buffers.
    use crate::nn::Module;
    model.visit_mut(&mut |p| restore(&mut p.value));
    for (_, b) in model.buffers_mut() {
        restore(b);
    }
    Ok((model, meta))
}

/// Loads a checkpoint and checks its architecture against `expected`,
/// naming the first field that differs.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<(Model<f32>, CheckpointMeta)> {
    let (model, meta) = load_checkpoint(path)?;
    let f = &meta.model;
    let e = expected;
    let checks: [(&'static str, String, String); 12] = [
        ("image_size", f.image_size.to_string(), e.image_size.to_string()),
        ("patch_size", f.patch_size.to_string(), e.patch_size.to_string()),
        ("in_channels", f.in_channels.to_string(), e.in_channels.to_string()),
        ("dim", f.dim.to_string(), e.dim.to_string()),
        ("depth", f.depth.to_string(), e.depth.to_string()),
        ("heads", f.heads.to_string(), e.heads.to_string()),
        ("mlp_ratio", f.mlp_ratio.to_string(), e.mlp_ratio.to_string()),
        ("num_classes", f.num_classes.to_string(), e.num_classes.to_string()),
        (
            "use_pos_embed",
            f.use_pos_embed.to_string(),
            e.use_pos_embed.to_string(),
        ),
        (
            "use_class_token",
            f.use_class_token.to_string(),
            e.use_class_token.to_string(),
        ),
        ("pooling", format!("{:?}", f.pooling), format!("{:?}", e.pooling)),
        ("bypass", format!("{:?}", f.bypass), format!("{:?}", e.bypass)),
    ];
    for (field, found, want) in checks {
        if found != want {
            return Err(Error::CheckpointMismatch {
                field,
                found,
                expected: want,
            });
        }
    }
    Ok((model, meta))
}
