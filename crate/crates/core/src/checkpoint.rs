//! Adapter checkpoint container.
//!
//! ```text
//! ANIMEADAPTER-CHECKPOINT
//! version 1
//! scope full_blocks
//! k 4
//! d_prime 48
//! step 2000
//! opt_step 2000            (only with optimizer state)
//! sites down.0 down.1 mid.0 up.0 up.1
//! config_bytes 812
//! payload_sha256 <hex>
//! tensor <name> <rows> <cols> <offset>   (one per tensor; offset in f64s)
//! end_header
//! <config TOML bytes><little-endian f64 payload>
//! ```
//!
//! The digest covers the config bytes and the payload. Optimizer moments are
//! stored as `opt.m.<name>` / `opt.v.<name>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::injection::{Scope, SiteId};
use crate::linalg::Mat;
use crate::model::AdapterState;
use crate::trainer::AdamW;

pub const MAGIC: &str = "ANIMEADAPTER-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub scope: Scope,
    pub k: usize,
    pub d_prime: usize,
    pub step: u64,
    pub opt_step: Option<u64>,
    pub sites: Vec<SiteId>,
    pub config_bytes: usize,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.offset + t.rows * t.cols).max().unwrap_or(0)
    }

    /// Human-readable summary.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format    {MAGIC} v{}", self.version);
        let _ = writeln!(s, "scope     {}", self.scope);
        let _ = writeln!(s, "k         {}", self.k);
        let _ = writeln!(s, "d_prime   {}", self.d_prime);
        let _ = writeln!(s, "step      {}", self.step);
        if let Some(o) = self.opt_step {
            let _ = writeln!(s, "optimizer step {o}");
        }
        let sites: Vec<String> = self.sites.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(s, "sites     {}", sites.join(" "));
        let _ = writeln!(s, "sha256    {}", self.payload_sha256);
        for t in &self.tensors {
            let _ = writeln!(s, "  {:<28} {:>4} x {:<4}", t.name, t.rows, t.cols);
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub adapter: AdapterState,
    pub optimizer: Option<AdamW>,
    pub config_toml: String,
}

pub fn save_checkpoint(path: &Path, adapter: &AdapterState, optimizer: Option<&AdamW>, step: u64, config_toml: &str) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let mut push = |name: String, shape: (usize, usize), data: &[f64]| {
        entries.push(TensorEntry { name, rows: shape.0, cols: shape.1, offset: payload.len() });
        payload.extend_from_slice(data);
    };
    let tensors = adapter.tensors();
    for t in &tensors {
        push(t.name.clone(), t.shape, t.data);
    }
    if let Some(opt) = optimizer {
        for (t, (m, v)) in tensors.iter().zip(opt.m.iter().zip(&opt.v)) {
            push(format!("opt.m.{}", t.name), t.shape, m);
            push(format!("opt.v.{}", t.name), t.shape, v);
        }
    }
    let body: Vec<u8> = payload.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut h = Sha256::new();
    h.update(config_toml.as_bytes());
    h.update(&body);
    let header = CheckpointHeader {
        version: VERSION,
        scope: adapter.scope,
        k: adapter.k(),
        d_prime: adapter.target_dim(),
        step,
        opt_step: optimizer.map(|o| o.t),
        sites: adapter.sites.iter().map(|s| s.site).collect(),
        config_bytes: config_toml.len(),
        payload_sha256: hex::encode(h.finalize()),
        tensors: entries,
    };
    let mut out = write_header(&header).into_bytes();
    out.extend_from_slice(config_toml.as_bytes());
    out.extend_from_slice(&body);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_header(h: &CheckpointHeader) -> String {
    let mut s = format!("{MAGIC}\nversion {}\nscope {}\nk {}\nd_prime {}\nstep {}\n", h.version, h.scope, h.k, h.d_prime, h.step);
    if let Some(o) = h.opt_step {
        let _ = writeln!(s, "opt_step {o}");
    }
    let sites: Vec<String> = h.sites.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(s, "sites {}", sites.join(" "));
    let _ = writeln!(s, "config_bytes {}", h.config_bytes);
    let _ = writeln!(s, "payload_sha256 {}", h.payload_sha256);
    for t in &h.tensors {
        let _ = writeln!(s, "tensor {} {} {} {}", t.name, t.rows, t.cols, t.offset);
    }
    s.push_str("end_header\n");
    s
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, String, Vec<f64>)> {
    const END: &[u8] = b"end_header\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| integrity("header terminator missing (truncated?)"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| integrity("header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(integrity("not a checkpoint (bad magic)"));
    }
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        if key == "tensor" {
            let f: Vec<&str> = rest.split(' ').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| integrity(format!("bad tensor line `{line}`")));
            if f.len() != 4 {
                return Err(integrity(format!("bad tensor line `{line}`")));
            }
            tensors.push(TensorEntry { name: f[0].into(), rows: num(f[1])?, cols: num(f[2])?, offset: num(f[3])? });
        } else {
            fields.insert(key, rest);
        }
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| integrity(format!("header lacks `{k}`")));
    let num = |k: &str| field(k)?.parse::<u64>().map_err(|_| integrity(format!("bad `{k}`")));
    let version = num("version")? as u32;
    if version != VERSION {
        return Err(integrity(format!("unsupported version {version}")));
    }
    let header = CheckpointHeader {
        version,
        scope: field("scope")?.parse().map_err(|_| integrity("bad scope"))?,
        k: num("k")? as usize,
        d_prime: num("d_prime")? as usize,
        step: num("step")?,
        opt_step: fields.get("opt_step").map(|_| num("opt_step")).transpose()?,
        sites: field("sites")?.split_whitespace().map(str::parse).collect::<Result<_>>()?,
        config_bytes: num("config_bytes")? as usize,
        payload_sha256: field("payload_sha256")?.to_owned(),
        tensors,
    };
    let body = &bytes[end + END.len()..];
    let expected = header.config_bytes + 8 * header.payload_len();
    if body.len() != expected {
        return Err(integrity(format!("body is {} bytes, header declares {expected} (truncated or padded)", body.len())));
    }
    let mut h = Sha256::new();
    h.update(body);
    if hex::encode(h.finalize()) != header.payload_sha256 {
        return Err(integrity("payload digest mismatch"));
    }
    let config = String::from_utf8(body[..header.config_bytes].to_vec()).map_err(|_| integrity("config is not UTF-8"))?;
    let payload = body[header.config_bytes..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, config, payload))
}

/// Reads and validates the header, sizes and digest.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointHeader> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(&bytes)?.0)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, config_toml, payload) = parse(&bytes)?;
    let mut named = BTreeMap::new();
    for t in &header.tensors {
        let data = payload[t.offset..t.offset + t.rows * t.cols].to_vec();
        named.insert(t.name.clone(), Mat::from_shape_vec((t.rows, t.cols), data).expect("sized above"));
    }
    let mut opt_m = Vec::new();
    let mut opt_v = Vec::new();
    let adapter_names: Vec<String> = header.tensors.iter().map(|t| t.name.clone()).filter(|n| !n.starts_with("opt.")).collect();
    if header.opt_step.is_some() {
        for n in &adapter_names {
            let m = named.remove(&format!("opt.m.{n}")).ok_or_else(|| integrity(format!("missing optimizer moment for {n}")))?;
            let v = named.remove(&format!("opt.v.{n}")).ok_or_else(|| integrity(format!("missing optimizer moment for {n}")))?;
            opt_m.push(m.into_raw_vec_and_offset().0);
            opt_v.push(v.into_raw_vec_and_offset().0);
        }
    }
    let adapter = AdapterState::from_tensors(header.scope, &header.sites, header.k, named)?;
    if adapter.target_dim() != header.d_prime {
        return Err(integrity("d_prime disagrees with tensor shapes"));
    }
    // Optimizer moments follow `AdapterState::tensors` order, not header order.
    let optimizer = header.opt_step.map(|t| {
        let order: Vec<String> = adapter.tensors().into_iter().map(|t| t.name).collect();
        let pos = |name: &String| adapter_names.iter().position(|n| n == name).expect("present");
        AdamW {
            m: order.iter().map(|n| opt_m[pos(n)].clone()).collect(),
            v: order.iter().map(|n| opt_v[pos(n)].clone()).collect(),
            t,
        }
    });
    Ok(Checkpoint { header, adapter, optimizer, config_toml })
}
