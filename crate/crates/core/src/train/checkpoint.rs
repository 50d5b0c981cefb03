//! Single-file checkpoints: magic header, config snapshot, step counters,
//! one named segment per parameter group with SHA-256 checksums, and a
//! whole-file checksum. Values are stored as f64 little-endian bytes,
//! which is exact for both precisions.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::KgModel;
use crate::params::{hex_string, ParamGroup};
use crate::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"KNCKPT01";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub precision: u8,
    pub root_seed: u64,
    pub phase1_steps: u64,
    pub phase2_steps: u64,
    /// Segment label → hex digest, in file order.
    pub segment_hashes: Vec<(String, String)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    fn str16(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Corruption("checkpoint truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str16(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Corruption("non-utf8 name in checkpoint".into()))
    }
}

fn sha(bytes: &[u8]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().into()
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &KgModel<S>,
    run_cfg: &RunConfig,
    phase1_steps: u64,
    phase2_steps: u64,
) -> Result<()> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u8(S::WIDTH);
    w.u64(model.seeds.seed());
    w.u64(phase1_steps);
    w.u64(phase2_steps);
    let config_json = serde_json::to_string(run_cfg).expect("config serializes");
    w.u64(config_json.len() as u64);
    w.bytes(config_json.as_bytes());

    w.u32(ParamGroup::ALL.len() as u32);
    for group in ParamGroup::ALL {
        let mut seg = Writer::new();
        let params: Vec<_> = model
            .store
            .iter()
            .filter(|(_, p)| p.group == group)
            .collect();
        seg.u32(params.len() as u32);
        for (_, p) in params {
            seg.str16(&p.name);
            seg.u64(p.value.rows() as u64);
            seg.u64(p.value.cols() as u64);
            for v in p.value.data() {
                seg.bytes(&v.as_f64().to_le_bytes());
            }
        }
        w.str16(group.label());
        w.u64(seg.buf.len() as u64);
        let digest = sha(&seg.buf);
        w.bytes(&seg.buf);
        w.bytes(&digest);
    }

    let digest = sha(&w.buf);
    w.bytes(&digest);
    std::fs::write(path, &w.buf)?;
    Ok(())
}

fn parse_header(r: &mut Reader) -> Result<(u8, u64, u64, u64, RunConfig)> {
    if r.take(8)? != MAGIC {
        return Err(Error::Corruption("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Corruption(format!("unsupported checkpoint version {version}")));
    }
    let precision = r.u8()?;
    let root_seed = r.u64()?;
    let phase1_steps = r.u64()?;
    let phase2_steps = r.u64()?;
    let cfg_len = r.u64()? as usize;
    let cfg_bytes = r.take(cfg_len)?;
    let config: RunConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::Corruption(format!("config block unreadable: {e}")))?;
    Ok((precision, root_seed, phase1_steps, phase2_steps, config))
}

fn verify_file(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 32 {
        return Err(Error::Corruption("checkpoint truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if sha(body) != *digest {
        return Err(Error::Corruption("whole-file checksum mismatch".into()));
    }
    Ok(body)
}

/// Header and config only, with the whole-file checksum verified.
pub fn peek_checkpoint(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    let body = verify_file(&bytes)?;
    let mut r = Reader::new(body);
    let (precision, root_seed, phase1_steps, phase2_steps, config) = parse_header(&mut r)?;
    let mut segment_hashes = Vec::new();
    let seg_count = r.u32()?;
    for _ in 0..seg_count {
        let label = r.str16()?;
        let len = r.u64()? as usize;
        let seg_bytes = r.take(len)?;
        let digest = r.take(32)?;
        if sha(seg_bytes) != *digest {
            return Err(Error::Corruption(format!("segment {label} checksum mismatch")));
        }
        segment_hashes.push((label, hex_string(digest)));
    }
    Ok(CheckpointMeta {
        config,
        precision,
        root_seed,
        phase1_steps,
        phase2_steps,
        segment_hashes,
    })
}

/// Load parameter values into an already-built model. Every parameter of
/// the model must appear in the file (by name, shape-checked); file
/// entries for parameters the model does not have (ablated-away adapter
/// sites) are ignored.
pub fn load_checkpoint<S: Scalar>(path: &Path, model: &mut KgModel<S>) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    let body = verify_file(&bytes)?;
    let mut r = Reader::new(body);
    let (precision, root_seed, phase1_steps, phase2_steps, config) = parse_header(&mut r)?;
    if precision != S::WIDTH {
        return Err(Error::Load(format!(
            "checkpoint precision is {precision} bytes, model uses {}",
            S::WIDTH
        )));
    }

    let mut values: HashMap<String, Tensor<S>> = HashMap::new();
    let mut segment_hashes = Vec::new();
    let seg_count = r.u32()?;
    for _ in 0..seg_count {
        let label = r.str16()?;
        let len = r.u64()? as usize;
        let seg_bytes = r.take(len)?;
        let digest = r.take(32)?;
        if sha(seg_bytes) != *digest {
            return Err(Error::Corruption(format!("segment {label} checksum mismatch")));
        }
        segment_hashes.push((label.clone(), hex_string(digest)));
        let mut sr = Reader::new(seg_bytes);
        let count = sr.u32()?;
        for _ in 0..count {
            let name = sr.str16()?;
            let rows = sr.u64()? as usize;
            let cols = sr.u64()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let raw = sr.take(8)?;
                data.push(S::from_f64(f64::from_le_bytes(raw.try_into().unwrap())));
            }
            values.insert(name, Tensor::new(rows, cols, data)?);
        }
    }

    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.get(id).name.clone();
        let value = values.remove(&name).ok_or_else(|| {
            Error::Corruption(format!("checkpoint lacks parameter {name}"))
        })?;
        model.store.load_value(id, value)?;
    }
    Ok(CheckpointMeta {
        config,
        precision,
        root_seed,
        phase1_steps,
        phase2_steps,
        segment_hashes,
    })
}
