//! Binary checkpoints: model config, parameters and optimizer state.
//!
//! Layout (little endian): magic `M3DC`, u32 version, 32-byte SHA-256 of
//! the model config JSON, the JSON itself, the train config JSON, then
//! every parameter (name, shape, values) and the Adam moments.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, TrainConfig, Trainer};
use crate::autodiff::{Adam, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"M3DC";
const VERSION: u32 = 1;

pub fn config_hash(cfg: &ModelConfig) -> Result<[u8; 32]> {
    let json = serde_json::to_string(cfg)?;
    Ok(Sha256::digest(json.as_bytes()).into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode(tr: &Trainer) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&config_hash(&tr.model.cfg)?);
    put_bytes(&mut out, serde_json::to_string(&tr.model.cfg)?.as_bytes());
    put_bytes(&mut out, serde_json::to_string(&tr.cfg)?.as_bytes());
    let store = &tr.model.store;
    put_u64(&mut out, store.len() as u64);
    for id in store.ids() {
        let t = store.get(id);
        put_bytes(&mut out, store.name(id).as_bytes());
        put_u32(&mut out, t.shape.len() as u32);
        for &d in &t.shape {
            put_u64(&mut out, d as u64);
        }
        put_f64s(&mut out, &t.data);
    }
    let opt = &tr.opt;
    put_u64(&mut out, opt.step);
    put_f64s(&mut out, &[opt.beta1, opt.beta2, opt.eps]);
    for (m, v) in opt.m.iter().zip(&opt.v) {
        put_f64s(&mut out, m);
        put_f64s(&mut out, v);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(Error::Data("truncated checkpoint".into()));
        }
        Ok(n as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("bad length".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

fn utf8(b: &[u8]) -> Result<&str> {
    std::str::from_utf8(b).map_err(|e| Error::Data(format!("checkpoint text: {e}")))
}

/// Rebuild a trainer. With `expected`, the stored model config must
/// hash to the same value.
pub fn decode(buf: &[u8], expected: Option<&ModelConfig>) -> Result<Trainer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let model_cfg: ModelConfig = serde_json::from_str(utf8(r.bytes()?)?)?;
    if config_hash(&model_cfg)? != hash {
        return Err(Error::Data("checkpoint config hash mismatch".into()));
    }
    if let Some(e) = expected {
        if config_hash(e)? != hash {
            return Err(Error::Incompatible("checkpoint was written for a different model config".into()));
        }
    }
    let train_cfg: TrainConfig = serde_json::from_str(utf8(r.bytes()?)?)?;
    let mut model = Model::new(&model_cfg, train_cfg.seed)?;
    let n = r.u64()? as usize;
    if n != model.store.len() {
        return Err(Error::Incompatible(format!("checkpoint has {n} parameters, model has {}", model.store.len())));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = utf8(r.bytes()?)?.to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let data = r.f64s()?;
        let t = model.store.get(id);
        if name != model.store.name(id) || shape != t.shape || data.len() != t.numel() {
            return Err(Error::Incompatible(format!("parameter {name} does not match the model")));
        }
        *model.store.get_mut(id) = Tensor::new(shape, data);
    }
    let step = r.u64()?;
    let hyper = r.f64s()?;
    if hyper.len() != 3 {
        return Err(Error::Data("bad optimizer header".into()));
    }
    let mut opt = Adam::new(&model.store);
    opt.step = step;
    opt.beta1 = hyper[0];
    opt.beta2 = hyper[1];
    opt.eps = hyper[2];
    for i in 0..opt.m.len() {
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != opt.m[i].len() || v.len() != opt.v[i].len() {
            return Err(Error::Data("optimizer state does not match parameters".into()));
        }
        opt.m[i] = m;
        opt.v[i] = v;
    }
    if r.pos != buf.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }
    Ok(Trainer {
        model,
        opt,
        cfg: train_cfg,
    })
}

pub fn save(tr: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(tr)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Trainer> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf, expected)
}
