//! `SPNF` checkpoint container.
//!
//! Layout (all integers u32 little-endian): magic `SPNF`, format version,
//! then records until EOF of `name_len, name, rank, dims[rank], data` with
//! data as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::params::ParameterStore;
use crate::nn::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPNF";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub tensor: Tensor,
}

impl Record {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self::new(name, Tensor::new(vec![], vec![v]).unwrap())
    }
}

pub fn encode(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
        for &d in r.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedFile(self.origin.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], origin: &str) -> Result<Vec<Record>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic(origin.to_string()));
    }
    let mut cur = Cursor {
        buf,
        pos: 4,
        origin,
    };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Parse(format!("{origin}: unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < buf.len() {
        let n = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(n)?.to_vec())
            .map_err(|_| Error::Parse(format!("{origin}: record name is not UTF-8")))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = cur.take(count.checked_mul(8).ok_or_else(|| Error::TruncatedFile(origin.into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(Record::new(name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn write(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(records))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?
        .read_to_end(&mut buf)?;
    decode(&buf, &path.display().to_string())
}

pub fn find<'a>(records: &'a [Record], name: &str) -> Option<&'a Record> {
    records.iter().find(|r| r.name == name)
}

pub fn scalar(records: &[Record], name: &str) -> Result<f64> {
    find(records, name)
        .map(|r| r.tensor.item())
        .ok_or_else(|| Error::Parse(format!("checkpoint lacks `{name}`")))
}

/// Records for every parameter under `prefix`; with `optimizer`, Adam moments
/// and the step counter are included so training can resume exactly.
pub fn store_records(store: &ParameterStore, prefix: &str, optimizer: bool) -> Vec<Record> {
    let mut out = Vec::new();
    for p in store.params() {
        out.push(Record::new(format!("{prefix}{}", p.name), p.value.clone()));
    }
    if optimizer {
        for p in store.params() {
            let shape = p.value.shape().to_vec();
            out.push(Record::new(
                format!("{prefix}adam.m/{}", p.name),
                Tensor::new(shape.clone(), p.m.clone()).unwrap(),
            ));
            out.push(Record::new(
                format!("{prefix}adam.v/{}", p.name),
                Tensor::new(shape, p.v.clone()).unwrap(),
            ));
        }
        out.push(Record::scalar(
            format!("{prefix}adam.step"),
            store.step_count() as f64,
        ));
    }
    out
}

/// Loads values (and Adam state when present) into a store with matching names.
pub fn load_store(store: &mut ParameterStore, records: &[Record], prefix: &str) -> Result<()> {
    let mut src = ParameterStore::new();
    for p in store.params() {
        let rec = find(records, &format!("{prefix}{}", p.name))
            .ok_or_else(|| Error::Parse(format!("checkpoint lacks `{prefix}{}`", p.name)))?;
        let id = src.add(p.name.clone(), rec.tensor.clone());
        let n = rec.tensor.numel();
        let m = find(records, &format!("{prefix}adam.m/{}", p.name));
        let v = find(records, &format!("{prefix}adam.v/{}", p.name));
        let q = src.get_mut(id);
        q.m = m.map(|r| r.tensor.data().to_vec()).unwrap_or(vec![0.0; n]);
        q.v = v.map(|r| r.tensor.data().to_vec()).unwrap_or(vec![0.0; n]);
    }
    if let Some(r) = find(records, &format!("{prefix}adam.step")) {
        src.set_step_count(r.tensor.item() as u64);
    }
    store.load_from(&src)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let recs = vec![Record::new("a", Tensor::full(&[2, 3], 1.5))];
        let mut bytes = encode(&recs);
        let good = decode(&bytes, "mem").unwrap();
        assert_eq!(good, recs);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes, "mem"), Err(Error::TruncatedFile(_))));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, "mem"), Err(Error::BadMagic(_))));
    }

    #[test]
    fn store_round_trip_with_optimizer_state() {
        let mut s = ParameterStore::new();
        let mut init = Init::new(1);
        s.add("w", init.uniform(&[3, 2], 3));
        s.add("b", Tensor::zeros(&[2]));
        s.params_mut()[0].m = vec![0.5; 6];
        s.set_step_count(9);
        let recs = store_records(&s, "net/", true);
        let bytes = encode(&recs);
        let mut t = ParameterStore::new();
        t.add("w", Tensor::zeros(&[3, 2]));
        t.add("b", Tensor::zeros(&[2]));
        load_store(&mut t, &decode(&bytes, "mem").unwrap(), "net/").unwrap();
        assert_eq!(s, t);
        assert_eq!(encode(&store_records(&t, "net/", true)), bytes);
    }

    proptest! {
        #[test]
        fn encode_decode_is_byte_exact(
            values in prop::collection::vec(any::<f64>(), 0..40),
            name in "[a-z./_0-9]{0,12}",
        ) {
            let n = values.len();
            let recs = vec![
                Record::new(name, Tensor::new(vec![n], values).unwrap()),
                Record::scalar("s", -0.0),
            ];
            let bytes = encode(&recs);
            let back = decode(&bytes, "mem").unwrap();
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
