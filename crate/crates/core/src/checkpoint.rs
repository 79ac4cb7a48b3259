//! Binary checkpoint container: magic + version + text descriptor + named
//! f32 tensor records, everything little-endian. Round trips are bit-exact
//! and all writes go through a temp-file rename so interrupted runs never
//! leave a corrupt artifact.

use crate::error::{Error, Result};
use crate::membank::MemoryBank;
use crate::model::{
    init_params, ArchitectureConfig, EncoderParams, HeadKind, InputShape, NetParams, TrunkSpec,
};
use crate::numerics::{RngState, Tensor};
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"THAT";
pub const VERSION: u32 = 1;

/// Write bytes to a temp file in the target directory, then rename into
/// place. Readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let p = path.display().to_string();
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    let tmp = path.with_file_name(format!(
        "{}.{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().to_string()).unwrap_or_default(),
        std::process::id()
    ));
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(&d.display().to_string(), e))?;
    }
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(&p, e)
    })
}

/// FNV-1a over a byte slice; used to summarize artifacts in logs and to
/// compare runs cheaply.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

// ── generic record container ───────────────────────────────────────────────

pub fn save_records(
    path: &Path,
    descriptor: &str,
    tensors: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = descriptor.as_bytes();
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        out.extend_from_slice(nb);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < self.pos + n {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {} (wanted {} more)",
                self.path, self.pos, n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_records(path: &Path) -> Result<(String, Vec<(String, Tensor<f32>)>)> {
    let p = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| Error::io(&p, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: p.clone(),
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{p}: bad magic {magic:02x?}, expected {MAGIC:02x?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{p}: unsupported version {version}"
        )));
    }
    let dlen = r.u32()? as usize;
    let descriptor = String::from_utf8(r.take(dlen)?.to_vec())
        .map_err(|e| Error::Checkpoint(format!("{p}: descriptor not UTF-8: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("{p}: tensor name not UTF-8: {e}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((name, Tensor::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{p}: {} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((descriptor, tensors))
}

// ── descriptor text ─────────────────────────────────────────────────────────

fn arch_lines(arch: &ArchitectureConfig, head: HeadKind) -> String {
    let input = match &arch.input {
        InputShape::Flat(d) => format!("flat:{d}"),
        InputShape::Image {
            channels,
            height,
            width,
        } => format!("image:{channels}x{height}x{width}"),
    };
    let trunk = match &arch.trunk {
        TrunkSpec::Mlp { widths } => format!(
            "mlp:{}",
            widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",")
        ),
        TrunkSpec::Conv {
            channels1,
            channels2,
            dense,
        } => format!("conv:{channels1},{channels2},{dense}"),
    };
    let head = match head {
        HeadKind::Plain => "plain",
        HeadKind::Normalized => "normalized",
    };
    format!(
        "input = {input}\ntrunk = {trunk}\nd_feat = {}\nclasses = {}\nhead = {head}\n",
        arch.d_feat, arch.classes
    )
}

fn descriptor_map(desc: &str) -> Vec<(String, String)> {
    desc.lines()
        .filter_map(|l| {
            let l = l.trim();
            if l.is_empty() {
                return None;
            }
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn lookup<'a>(map: &'a [(String, String)], key: &str, path: &str) -> Result<&'a str> {
    map.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Checkpoint(format!("{path}: descriptor missing `{key}`")))
}

fn parse_arch(map: &[(String, String)], path: &str) -> Result<(ArchitectureConfig, HeadKind)> {
    let bad = |what: &str, v: &str| Error::Checkpoint(format!("{path}: bad {what} `{v}`"));
    let iv = lookup(map, "input", path)?;
    let input = match iv.split_once(':') {
        Some(("flat", d)) => InputShape::Flat(d.parse().map_err(|_| bad("input", iv))?),
        Some(("image", dims)) => {
            let p: Vec<usize> = dims
                .split('x')
                .map(|s| s.parse().map_err(|_| bad("input", iv)))
                .collect::<Result<_>>()?;
            if p.len() != 3 {
                return Err(bad("input", iv));
            }
            InputShape::Image {
                channels: p[0],
                height: p[1],
                width: p[2],
            }
        }
        _ => return Err(bad("input", iv)),
    };
    let tv = lookup(map, "trunk", path)?;
    let trunk = match tv.split_once(':') {
        Some(("mlp", ws)) => TrunkSpec::Mlp {
            widths: ws
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad("trunk", tv)))
                .collect::<Result<_>>()?,
        },
        Some(("conv", cs)) => {
            let p: Vec<usize> = cs
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| bad("trunk", tv)))
                .collect::<Result<_>>()?;
            if p.len() != 3 {
                return Err(bad("trunk", tv));
            }
            TrunkSpec::Conv {
                channels1: p[0],
                channels2: p[1],
                dense: p[2],
            }
        }
        _ => return Err(bad("trunk", tv)),
    };
    let d_feat = lookup(map, "d_feat", path)?
        .parse()
        .map_err(|_| bad("d_feat", ""))?;
    let classes = lookup(map, "classes", path)?
        .parse()
        .map_err(|_| bad("classes", ""))?;
    let head = match lookup(map, "head", path)? {
        "plain" => HeadKind::Plain,
        "normalized" => HeadKind::Normalized,
        v => return Err(bad("head", v)),
    };
    Ok((
        ArchitectureConfig {
            input,
            trunk,
            d_feat,
            classes,
        },
        head,
    ))
}

// ── model checkpoints ───────────────────────────────────────────────────────

/// Save the full training state: robust net, optional clean net, eta, and
/// optionally the memory bank (slots as a tensor, counters in the
/// descriptor).
pub fn save_checkpoint(
    path: &Path,
    enc: &EncoderParams,
    bank: Option<&MemoryBank>,
) -> Result<()> {
    let mut desc = arch_lines(&enc.arch, enc.head);
    if let Some(b) = bank {
        desc.push_str(&format!(
            "bank_cursor = {}\nbank_pushed = {}\n",
            b.cursor(),
            b.pushed_total()
        ));
    }
    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (name, t) in enc.robust.named_tensors() {
        tensors.push((format!("robust.{name}"), t));
    }
    if let Some(clean) = &enc.clean {
        for (name, t) in clean.named_tensors() {
            tensors.push((format!("clean.{name}"), t));
        }
    }
    tensors.push(("log_eta".to_string(), &enc.log_eta));
    let slots;
    if let Some(b) = bank {
        slots = b.negatives();
        tensors.push(("bank.slots".to_string(), &slots));
    }
    save_records(path, &desc, &tensors)
}

fn fill_net(
    net: &mut NetParams,
    prefix: &str,
    tensors: &[(String, Tensor<f32>)],
    path: &str,
) -> Result<()> {
    for (name, dst) in net.named_tensors_mut() {
        let full = format!("{prefix}{name}");
        let src = tensors
            .iter()
            .find(|(n, _)| *n == full)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("{path}: missing tensor `{full}`")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Checkpoint(format!(
                "{path}: tensor `{full}` has shape {:?}, expected {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

/// Load a checkpoint saved by save_checkpoint. The memory bank is returned
/// when the file carries one.
pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, Option<MemoryBank>)> {
    let p = path.display().to_string();
    let (desc, tensors) = load_records(path)?;
    let map = descriptor_map(&desc);
    let (arch, head) = parse_arch(&map, &p)?;
    arch.validate()?;

    // Template nets carry the right shapes; every value is overwritten.
    let mut robust = init_params::<f32>(&arch, &RngState::new(0))?;
    fill_net(&mut robust, "robust.", &tensors, &p)?;
    let clean = if tensors.iter().any(|(n, _)| n.starts_with("clean.")) {
        let mut c = init_params::<f32>(&arch, &RngState::new(0))?;
        fill_net(&mut c, "clean.", &tensors, &p)?;
        Some(c)
    } else {
        None
    };
    let log_eta = tensors
        .iter()
        .find(|(n, _)| n == "log_eta")
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Checkpoint(format!("{p}: missing tensor `log_eta`")))?;

    let bank = match tensors.iter().find(|(n, _)| n == "bank.slots") {
        Some((_, slots)) => {
            let cursor: usize = lookup(&map, "bank_cursor", &p)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{p}: bad bank_cursor: {e}")))?;
            let pushed: u64 = lookup(&map, "bank_pushed", &p)?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{p}: bad bank_pushed: {e}")))?;
            Some(MemoryBank::from_parts(slots.clone(), cursor, pushed)?)
        }
        None => None,
    };

    Ok((
        EncoderParams {
            arch,
            head,
            clean,
            robust,
            log_eta,
        },
        bank,
    ))
}
