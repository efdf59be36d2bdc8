//! Binary checkpoint format.
//!
//! Layout: the ASCII magic `DEPSCKPT1`, then one record per tensor until end
//! of file. A record is `name_len: u64`, the UTF-8 name, `rank: u64`, `rank`
//! dims as `u64`, then the values as `f64`; all little-endian. Adam state of a
//! parameter `p` is stored as three extra records `p.m`, `p.v` and `p.t`
//! (the step counter as a rank-0 tensor).

use std::io::{Read, Write};

use super::params::ParameterStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"DEPSCKPT1";

pub fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_store<W: Write>(w: &mut W, store: &ParameterStore) -> Result<()> {
    w.write_all(MAGIC)?;
    for (_, p) in store.iter() {
        write_tensor(w, &p.name, &p.value)?;
        let shape = p.value.shape().to_vec();
        write_tensor(w, &format!("{}.m", p.name), &Tensor::new(shape.clone(), p.m.clone())?)?;
        write_tensor(w, &format!("{}.v", p.name), &Tensor::new(shape, p.v.clone())?)?;
        write_tensor(w, &format!("{}.t", p.name), &Tensor::scalar(p.step as f64))?;
    }
    Ok(())
}

pub fn to_bytes(store: &ParameterStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_store(&mut buf, store).expect("writing to a Vec cannot fail");
    buf
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Checkpoint("truncated record".into()));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u64(buf: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, 8)?.try_into().unwrap()))
}

/// Parses every `(name, tensor)` record in a checkpoint.
pub fn read_records<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    let mut buf = all.as_slice();
    if take(&mut buf, MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut out = Vec::new();
    while !buf.is_empty() {
        let name_len = take_u64(&mut buf)? as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = take_u64(&mut buf)? as usize;
        let dims = (0..rank)
            .map(|_| take_u64(&mut buf).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let values = take(&mut buf, n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(dims, values)?));
    }
    Ok(out)
}

/// Loads values and Adam state into an already-built store with matching names.
pub fn read_into_store<R: Read>(r: &mut R, store: &mut ParameterStore) -> Result<()> {
    let records = read_records(r)?;
    let lookup: std::collections::HashMap<&str, &Tensor> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.param(id).name.clone();
        let value = lookup
            .get(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if value.shape() != store.value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?} does not match model {:?}",
                value.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = (*value).clone();
        let get = |suffix: &str| {
            lookup
                .get(format!("{name}.{suffix}").as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing adam state {name}.{suffix}")))
        };
        let m = get("m")?.into_data();
        let v = get("v")?.into_data();
        let t = get("t")?.item() as u64;
        store.set_adam_state(id, m, v, t)?;
    }
    Ok(())
}
