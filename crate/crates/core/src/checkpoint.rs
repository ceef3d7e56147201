//! Binary checkpoint format.
//!
//! Little-endian. Header: magic `FCK1`, `u32` version (1). Then seven
//! sections in fixed order, each a 4-byte tag, a `u64` payload length and
//! the payload:
//!
//! | tag    | payload |
//! |--------|---------|
//! | `CONF` | 32-byte config hash, `u64` length, config JSON (may be empty) |
//! | `ENCD` | `u8` kind (0 identity, 1 affine), `u32` d_in, `u32` d_out, affine weights (row-major) then bias as `f64` |
//! | `PRIO` | `u32` d, `q0` as `d` × `f64`, `log lambda0` `f64` |
//! | `CRPP` | `a`, `rho`, `empty_class_mass` as `f64`, `u8` new-class rule |
//! | `NOIS` | noise variance `f64` |
//! | `CEMB` | `u8` present; if 1: `u32` n, `u32` d, n × d means, n variances (`f64`) |
//! | `KKST` | `u8` present; if 1: `u32` n, `u32` d, per class `q` (d × `f64`) and `log lambda` (`f64`) |
//!
//! Floats are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::crp::{CrpParams, NewClassCount};
use crate::encoder::{AffineLayer, ClassEmbeddings, Encoder};
use crate::error::{FlowrError, Result};
use crate::gaussian::NoiseModel;
use crate::meta::MetaParams;

pub const MAGIC: &[u8; 4] = b"FCK1";
pub const VERSION: u32 = 1;
const SECTIONS: [&str; 7] = ["CONF", "ENCD", "PRIO", "CRPP", "NOIS", "CEMB", "KKST"];

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MetaParams,
    /// Pre-trained class embeddings, when available.
    pub embeddings: Option<ClassEmbeddings>,
    pub config_hash: [u8; 32],
    pub config: Option<ExperimentConfig>,
}

impl Checkpoint {
    pub fn new(params: MetaParams, embeddings: Option<ClassEmbeddings>, config: Option<ExperimentConfig>) -> Self {
        let config_hash = config.as_ref().map_or([0; 32], ExperimentConfig::hash);
        Self {
            params,
            embeddings,
            config_hash,
            config,
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

fn section(out: &mut Vec<u8>, tag: &str, body: impl FnOnce(&mut Writer)) {
    let mut w = Writer(Vec::new());
    body(&mut w);
    out.extend_from_slice(tag.as_bytes());
    out.extend_from_slice(&(w.0.len() as u64).to_le_bytes());
    out.extend_from_slice(&w.0);
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.params;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    section(&mut out, "CONF", |w| {
        w.0.extend_from_slice(&ck.config_hash);
        let json = ck
            .config
            .as_ref()
            .map(|c| serde_json::to_string(c).expect("config serializes"))
            .unwrap_or_default();
        w.u64(json.len() as u64);
        w.0.extend_from_slice(json.as_bytes());
    });
    section(&mut out, "ENCD", |w| match &p.encoder {
        Encoder::Identity { dim } => {
            w.u8(0);
            w.u32(*dim);
            w.u32(*dim);
        }
        Encoder::Affine(l) => {
            w.u8(1);
            w.u32(l.d_in);
            w.u32(l.d_out);
            w.f64s(&l.weight);
            w.f64s(&l.bias);
        }
    });
    section(&mut out, "PRIO", |w| {
        w.u32(p.q0.len());
        w.f64s(&p.q0);
        w.f64(p.log_lambda0);
    });
    section(&mut out, "CRPP", |w| {
        w.f64(p.crp.a);
        w.f64(p.crp.rho);
        w.f64(p.crp.empty_class_mass);
        w.u8(p.crp.new_class_count.as_u8());
    });
    section(&mut out, "NOIS", |w| w.f64(p.noise.variance));
    section(&mut out, "CEMB", |w| match &ck.embeddings {
        None => w.u8(0),
        Some(e) => {
            w.u8(1);
            w.u32(e.n_classes());
            w.u32(e.dim());
            for m in &e.means {
                w.f64s(m);
            }
            w.f64s(&e.variances);
        }
    });
    section(&mut out, "KKST", |w| match &p.known {
        None => w.u8(0),
        Some(k) => {
            w.u8(1);
            w.u32(k.len());
            w.u32(p.q0.len());
            for (q, ll) in k {
                w.f64s(q);
                w.f64(*ll);
            }
        }
    });
    out
}

fn err(section: &str, message: impl Into<String>) -> FlowrError {
    FlowrError::Checkpoint {
        section: section.to_string(),
        message: message.into(),
    }
}

/// Cursor over one section's payload.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    tag: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(err(
                self.tag,
                format!("payload truncated at byte {} of {}", self.pos, self.buf.len()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(err(self.tag, format!("payload too short for {n} values")));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(err(self.tag, format!("{} unread bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Decode a checkpoint. Config-hash comparison is left to [`load_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(err("header", "file shorter than the 8-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(err("header", format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(
            "header",
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let mut pos = 8;
    let mut payloads: Vec<Reader> = Vec::with_capacity(SECTIONS.len());
    for tag in SECTIONS {
        if bytes.len() - pos < 12 {
            return Err(err(tag, "missing section (file truncated)"));
        }
        if &bytes[pos..pos + 4] != tag.as_bytes() {
            return Err(err(
                tag,
                format!("expected tag at byte {pos}, found {:?}", &bytes[pos..pos + 4]),
            ));
        }
        let len = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
        pos += 12;
        if ((bytes.len() - pos) as u64) < len {
            return Err(err(
                tag,
                format!(
                    "section declares {len} bytes, {} remain (file truncated)",
                    bytes.len() - pos
                ),
            ));
        }
        let len = len as usize;
        payloads.push(Reader {
            buf: &bytes[pos..pos + len],
            pos: 0,
            tag,
        });
        pos += len;
    }
    if pos != bytes.len() {
        return Err(err("trailer", format!("{} trailing bytes", bytes.len() - pos)));
    }
    let mut it = payloads.into_iter();

    let mut r = it.next().unwrap();
    let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let json_len = r.u64()? as usize;
    let json = std::str::from_utf8(r.take(json_len)?).map_err(|e| err("CONF", e.to_string()))?;
    let config = if json.is_empty() {
        None
    } else {
        Some(serde_json::from_str(json).map_err(|e| err("CONF", e.to_string()))?)
    };
    r.finish()?;

    let mut r = it.next().unwrap();
    let kind = r.u8()?;
    let (d_in, d_out) = (r.u32()?, r.u32()?);
    let encoder = match kind {
        0 if d_in == d_out => Encoder::identity(d_in),
        1 => {
            let weight = r.f64s(d_in * d_out)?;
            let bias = r.f64s(d_out)?;
            Encoder::Affine(AffineLayer::new(d_in, d_out, weight, bias).map_err(|e| err("ENCD", e.to_string()))?)
        }
        _ => return Err(err("ENCD", format!("invalid encoder kind {kind} ({d_in} -> {d_out})"))),
    };
    r.finish()?;

    let mut r = it.next().unwrap();
    let d = r.u32()?;
    if d != d_out {
        return Err(err(
            "PRIO",
            format!("prior dimension {d} does not match encoder output {d_out}"),
        ));
    }
    let q0 = r.f64s(d)?;
    let log_lambda0 = r.f64()?;
    r.finish()?;

    let mut r = it.next().unwrap();
    let (a, rho, empty_class_mass) = (r.f64()?, r.f64()?, r.f64()?);
    let mode = r.u8()?;
    let new_class_count =
        NewClassCount::from_u8(mode).ok_or_else(|| err("CRPP", format!("invalid new-class rule {mode}")))?;
    r.finish()?;
    let crp = CrpParams::new(a, rho)
        .map_err(|e| err("CRPP", e.to_string()))?
        .with_empty_class_mass(empty_class_mass)
        .with_new_class_count(new_class_count);

    let mut r = it.next().unwrap();
    let noise = NoiseModel::new(r.f64()?).map_err(|e| err("NOIS", e.to_string()))?;
    r.finish()?;

    let mut r = it.next().unwrap();
    let embeddings = match r.u8()? {
        0 => None,
        1 => {
            let (n, de) = (r.u32()?, r.u32()?);
            let means = (0..n).map(|_| r.f64s(de)).collect::<Result<Vec<_>>>()?;
            let variances = r.f64s(n)?;
            Some(ClassEmbeddings::new(means, variances).map_err(|e| err("CEMB", e.to_string()))?)
        }
        f => return Err(err("CEMB", format!("invalid presence flag {f}"))),
    };
    r.finish()?;

    let mut r = it.next().unwrap();
    let known = match r.u8()? {
        0 => None,
        1 => {
            let (n, dk) = (r.u32()?, r.u32()?);
            if dk != d {
                return Err(err(
                    "KKST",
                    format!("class dimension {dk} does not match prior dimension {d}"),
                ));
            }
            let stats = (0..n)
                .map(|_| Ok((r.f64s(dk)?, r.f64()?)))
                .collect::<Result<Vec<_>>>()?;
            Some(stats)
        }
        f => return Err(err("KKST", format!("invalid presence flag {f}"))),
    };
    r.finish()?;

    Ok(Checkpoint {
        params: MetaParams {
            encoder,
            q0,
            log_lambda0,
            crp,
            noise,
            known,
        },
        embeddings,
        config_hash,
        config,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

/// Load a checkpoint. When `expected` is given and differs from the stored
/// config hash, a warning is returned alongside the checkpoint.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ExperimentConfig>,
) -> Result<(Checkpoint, Vec<String>)> {
    let ck = decode_checkpoint(&std::fs::read(path)?)?;
    let mut warnings = Vec::new();
    if let Some(cfg) = expected {
        if cfg.hash() != ck.config_hash {
            warnings.push(format!(
                "config hash mismatch: checkpoint was written with a different configuration (now {})",
                cfg.hash_hex()
            ));
        }
    }
    Ok((ck, warnings))
}
