//! Bit-exact tensor checkpoint format.
//!
//! Layout: magic `APNCKPT1`, u32-le tensor count, then per tensor:
//! u32-le name length, UTF-8 name, u8 dtype tag (0 = f32, 1 = f64),
//! u32-le rank, u32-le dims, raw little-endian payload.
//!
//! Checkpoints carry weights and buffers (running statistics) in
//! registration order, so save -> load -> save reproduces identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Dtype, Scalar};

const MAGIC: &[u8; 8] = b"APNCKPT1";

pub fn save_to_vec<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    std::fs::write(path, save_to_vec(store))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file while reading {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
}

/// Load checkpoint bytes into an existing store, validating every tensor's
/// name, dtype, and dims against what the model registered.
pub fn load_from_slice<T: Scalar>(store: &mut ParamStore<T>, bytes: &[u8]) -> Result<()> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an APNCKPT1 file".into()));
    }
    let count = r.u32("tensor count")? as usize;
    if count != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} tensors, model expects {}",
            store.len()
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("non-UTF8 tensor name".into()))?
            .to_string();
        let tag = r.u8("dtype tag")?;
        let dtype = Dtype::from_tag(tag)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag} for '{name}'")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dtype tag {tag}, model expects {}",
                T::DTYPE.tag()
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = r.take(numel * T::byte_width(), "payload")?;

        let id = store
            .lookup(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor '{name}'")));
        }

        let p = store.get_mut(id);
        if p.value.dims() != dims.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dims {:?}, model expects {:?}",
                dims,
                p.value.dims()
            )));
        }
        let width = T::byte_width();
        for (i, v) in p.value.data_mut().iter_mut().enumerate() {
            *v = T::read_le(&payload[i * width..(i + 1) * width]);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(())
}

pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_from_slice(store, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamKind;
    use crate::tensor::Tensor;

    fn sample_store() -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store
            .register(
                "a.weight",
                Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap(),
                ParamKind::Weight,
            )
            .unwrap();
        store
            .register(
                "bn.running_mean",
                Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap(),
                ParamKind::Buffer,
            )
            .unwrap();
        store
    }

    #[test]
    fn save_load_save_is_bitwise_stable() {
        let store = sample_store();
        let bytes = save_to_vec(&store);
        let mut reloaded = sample_store();
        for p in reloaded.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        load_from_slice(&mut reloaded, &bytes).unwrap();
        assert_eq!(save_to_vec(&reloaded), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let store = sample_store();
        let bytes = save_to_vec(&store);
        let err = load_from_slice(&mut sample_store(), &bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn mismatched_spec_names_offending_tensor() {
        let store = sample_store();
        let bytes = save_to_vec(&store);
        let mut other = ParamStore::<f32>::new();
        other
            .register("a.weight", Tensor::zeros(vec![2, 3]), ParamKind::Weight)
            .unwrap();
        other
            .register("bn.running_mean", Tensor::zeros(vec![3]), ParamKind::Buffer)
            .unwrap();
        let err = load_from_slice(&mut other, &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.weight"), "{msg}");
        assert!(msg.contains("dims"), "{msg}");
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let store = sample_store();
        let bytes = save_to_vec(&store);
        let mut f64_store = ParamStore::<f64>::new();
        f64_store
            .register("a.weight", Tensor::zeros(vec![2, 2]), ParamKind::Weight)
            .unwrap();
        f64_store
            .register("bn.running_mean", Tensor::zeros(vec![3]), ParamKind::Buffer)
            .unwrap();
        let err = load_from_slice(&mut f64_store, &bytes).unwrap_err();
        assert!(err.to_string().contains("dtype"));
    }

    #[test]
    fn magic_and_header_layout_are_as_documented() {
        let store = sample_store();
        let bytes = save_to_vec(&store);
        assert_eq!(&bytes[..8], b"APNCKPT1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        // first tensor record: name length then name
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 8);
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(bytes[24], 0); // f32 tag
    }
}
