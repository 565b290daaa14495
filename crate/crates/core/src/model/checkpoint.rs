//! Binary checkpoint: magic, JSON header (config + method), then one record
//! per parameter with its name, trainable flag, shape and little-endian f64
//! values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ParameterStore, Seq2Seq};
use crate::error::{Error, Result};
use crate::peft::PeftMethod;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PEFTLAB1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    method: Option<String>,
    params: usize,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn get_len(r: &mut impl Read, what: &str, limit: u64) -> Result<usize> {
    let v = get_u64(r)?;
    if v > limit {
        return Err(Error::Checkpoint(format!("{what} {v} exceeds limit {limit}")));
    }
    Ok(v as usize)
}

pub fn write_checkpoint(model: &Seq2Seq, w: &mut impl Write) -> Result<()> {
    let header = Header {
        config: model.config().clone(),
        method: model.method().map(ToString::to_string),
        params: model.store().len(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    put_u64(w, json.len() as u64)?;
    w.write_all(&json)?;
    for (name, param) in model.store().iter() {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[u8::from(param.trainable)])?;
        let shape = param.value.shape();
        put_u64(w, shape.len() as u64)?;
        for &dim in shape {
            put_u64(w, dim as u64)?;
        }
        for &x in param.value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Seq2Seq> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a peftlab checkpoint (bad magic)".into()));
    }
    let header_len = get_len(r, "header length", 1 << 20)?;
    let mut json = vec![0u8; header_len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    let method = header
        .method
        .as_deref()
        .map(str::parse::<PeftMethod>)
        .transpose()?;
    let mut store = ParameterStore::new();
    for _ in 0..header.params {
        let name_len = get_len(r, "name length", 4096)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let trainable = match flag[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad trainable flag {other} for {name}"))),
        };
        let ndim = get_len(r, "rank", 8)?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get_len(r, "dimension", 1 << 32)?);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        store.insert(name, tensor, trainable)?;
    }
    Seq2Seq::from_parts(header.config, store, method)
}

pub fn save_checkpoint(model: &Seq2Seq, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Seq2Seq> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}
