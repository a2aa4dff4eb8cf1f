//! Checkpoint files.
//!
//! ```text
//! FBNET1
//! version 1
//! variant fbnet
//! bn <eps bits> <momentum bits>     (hex f32 bits, one pair per BN stage)
//! meta iterations=<n> seed=<s> loss_digest=<hex>
//! tensor <name> <d0>x<d1>... <byte offset>
//! ...
//! end
//! <little-endian f32 blobs, directory order>
//! ```

use std::fs;
use std::path::Path;

use super::{ModelParams, ModelVariant};
use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor};

pub const MAGIC: &str = "FBNET1";
pub const VERSION: u32 = 1;
const END: &[u8] = b"\nend\n";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub iterations: u64,
    pub seed: u64,
    /// Hex digest of the per-step loss history; empty for untrained models.
    pub loss_digest: String,
}

pub fn encode_checkpoint(params: &ModelParams, meta: &CheckpointMeta) -> Vec<u8> {
    let mut header = format!("{MAGIC}\nversion {VERSION}\nvariant {}\n", params.variant);
    for bn in [&params.bn1, &params.bn2, &params.bn3] {
        header += &format!("bn {:08x} {:08x}\n", bn.epsilon.to_bits(), bn.stats_momentum.to_bits());
    }
    let digest = if meta.loss_digest.is_empty() { "-" } else { &meta.loss_digest };
    header += &format!(
        "meta iterations={} seed={} loss_digest={}\n",
        meta.iterations, meta.seed, digest
    );
    let mut offset = 0usize;
    for (name, t) in params.named_tensors() {
        header += &format!("tensor {name} {} {offset}\n", shape_str(t.shape()));
        offset += t.len() * 4;
    }
    header += "end\n";

    let mut bytes = header.into_bytes();
    bytes.reserve(offset);
    for (_, t) in params.named_tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint(params: &ModelParams, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, meta)).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint; with `expected` set, a file holding another variant
/// is rejected.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<ModelVariant>,
) -> Result<(ModelParams, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path, expected)
}

fn parse_hex_f32(s: &str, path: &Path) -> Result<f32> {
    u32::from_str_radix(s, 16)
        .map(f32::from_bits)
        .map_err(|_| Error::format(path, format!("bad f32 bits {s:?}")))
}

pub fn decode_checkpoint(
    bytes: &[u8],
    path: &Path,
    expected: Option<ModelVariant>,
) -> Result<(ModelParams, CheckpointMeta)> {
    if !bytes.starts_with(MAGIC.as_bytes()) || bytes.get(MAGIC.len()) != Some(&b'\n') {
        return Err(Error::BadMagic { path: path.into(), expected: MAGIC });
    }
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(path, "header has no `end` line (truncated?)"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let blob = &bytes[end + END.len()..];

    let mut lines = header.lines().skip(1);
    let mut next = |what: &str| -> Result<Vec<&str>> {
        let line = lines
            .next()
            .ok_or_else(|| Error::format(path, format!("missing {what} line")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() != Some(&what) {
            return Err(Error::format(path, format!("expected {what} line, found {line:?}")));
        }
        Ok(fields)
    };

    let version = next("version")?;
    let found: u32 = version
        .get(1)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, "bad version line"))?;
    if found != VERSION {
        return Err(Error::Version {
            path: path.into(),
            expected: VERSION,
            found,
        });
    }
    let variant_line = next("variant")?;
    let variant: ModelVariant = variant_line
        .get(1)
        .ok_or_else(|| Error::format(path, "bad variant line"))?
        .parse()
        .map_err(|_| Error::format(path, format!("unknown variant {:?}", variant_line.get(1))))?;
    if let Some(exp) = expected {
        if exp != variant {
            return Err(Error::Variant {
                expected: exp.to_string(),
                found: variant.to_string(),
            });
        }
    }

    let mut params = ModelParams::zeroed(variant);
    let mut bn_hyper = Vec::new();
    for _ in 0..3 {
        let f = next("bn")?;
        if f.len() != 3 {
            return Err(Error::format(path, "bad bn line"));
        }
        bn_hyper.push((parse_hex_f32(f[1], path)?, parse_hex_f32(f[2], path)?));
    }
    for (bn, (eps, mom)) in [&mut params.bn1, &mut params.bn2, &mut params.bn3].into_iter().zip(bn_hyper) {
        bn.epsilon = eps;
        bn.stats_momentum = mom;
    }

    let meta_fields = next("meta")?;
    let mut meta = CheckpointMeta::default();
    for kv in &meta_fields[1..] {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad meta field {kv:?}")))?;
        let bad = || Error::format(path, format!("bad meta value {kv:?}"));
        match k {
            "iterations" => meta.iterations = v.parse().map_err(|_| bad())?,
            "seed" => meta.seed = v.parse().map_err(|_| bad())?,
            "loss_digest" => meta.loss_digest = if v == "-" { String::new() } else { v.to_string() },
            _ => return Err(Error::format(path, format!("unknown meta field {k:?}"))),
        }
    }

    let mut offset = 0usize;
    let mut tensors = params.named_tensors_mut();
    let total_expected: usize = tensors.iter().map(|(_, t)| t.len() * 4).sum();
    if blob.len() != total_expected {
        return Err(Error::Size {
            path: path.into(),
            what: "tensor data".into(),
            expected: total_expected as u64,
            actual: blob.len() as u64,
        });
    }
    for (name, tensor) in tensors.iter_mut() {
        let f = next("tensor")?;
        if f.len() != 4 || f[1] != *name {
            return Err(Error::format(
                path,
                format!("tensor name mismatch: expected {name}, found {:?}", f.get(1)),
            ));
        }
        if f[2] != shape_str(tensor.shape()) {
            return Err(Error::format(
                path,
                format!("{name}: expected shape {}, found {}", shape_str(tensor.shape()), f[2]),
            ));
        }
        if f[3].parse::<usize>().ok() != Some(offset) {
            return Err(Error::format(path, format!("{name}: bad offset {}", f[3])));
        }
        let n = tensor.len();
        let data: Vec<f32> = blob[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        **tensor = Tensor::new(tensor.shape().to_vec(), data)?;
        offset += 4 * n;
    }
    drop(tensors);
    if lines.next().is_some() {
        return Err(Error::format(path, "unexpected extra header lines"));
    }
    Ok((params, meta))
}
