//! Named parameter sets, the `PBSR` checkpoint format, and the
//! weight-vector algebra used by branch fusion.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! "PBSR" | u32 version (=1) | u32 entry count
//! per entry:  u16 name len | name (UTF-8) | u8 dtype (0 = f32) | u8 rank
//!             | rank x u32 extents | f32 payload
//! metadata:   u32 pair count | per pair: u32 key len | key | u32 value len | value
//! ```
//!
//! Entries are written in lexicographic name order. Tensors are always
//! written with rank 4; ranks 1 to 3 are accepted on load and left-padded
//! with unit extents.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PBSR";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Ordered `name -> tensor` map plus string metadata. Iteration (and
/// therefore flattening) is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// All tensors concatenated in name order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.tensors.values().flat_map(|t| t.data().iter().copied())
    }

    /// Same name set and per-name shapes.
    pub fn is_aligned(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn check_aligned(&self, other: &ParamSet) -> Result<()> {
        if self.is_aligned(other) {
            return Ok(());
        }
        let a: Vec<_> = self.names().collect();
        let b: Vec<_> = other.names().collect();
        let detail = if a != b {
            "name sets differ".to_string()
        } else {
            let bad = self
                .tensors
                .iter()
                .find(|(n, t)| other.tensors[*n].shape() != t.shape())
                .map(|(n, _)| n.clone())
                .unwrap_or_default();
            format!("shape mismatch at `{bad}`")
        };
        Err(Error::invalid(format!("parameter sets are not aligned: {detail}")))
    }

    /// Coordinatewise combination of two aligned sets, evaluated in f64 and
    /// rounded once. Metadata is copied from `self`.
    pub fn zip_map(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        self.check_aligned(other)?;
        let mut tensors = BTreeMap::new();
        for ((name, a), b) in self.tensors.iter().zip(other.tensors.values()) {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x as f64, y as f64) as f32)
                .collect();
            tensors.insert(name.clone(), Tensor::new(a.shape(), data)?);
        }
        Ok(ParamSet {
            tensors,
            metadata: self.metadata.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.map(&f)))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Zero-valued set with the same names and shapes, no metadata.
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
            metadata: BTreeMap::new(),
        }
    }

    /// Restricts to names starting with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Short content hash over names, shapes and values (metadata excluded).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.numel() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.push(4);
            for e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format {
                offset: version_at,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("entry count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u16("name length")? as usize;
            let name = r.utf8(len, "name")?;
            let dtype_at = r.pos;
            if r.u8("dtype")? != DTYPE_F32 {
                return Err(Error::Format {
                    offset: dtype_at,
                    reason: "unsupported dtype".into(),
                });
            }
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Format {
                    offset: rank_at,
                    reason: format!("rank {rank} not in 1..=4"),
                });
            }
            let mut shape = [1usize; 4];
            for slot in &mut shape[4 - rank..] {
                *slot = r.u32("extent")? as usize;
            }
            let payload_at = r.pos;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &e| acc.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format {
                    offset: payload_at,
                    reason: "tensor size overflows".into(),
                })?;
            let raw = r.take(numel, "payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data).expect("payload length matches shape");
            if tensors.insert(name, tensor).is_some() {
                return Err(Error::Format {
                    offset: name_at,
                    reason: "duplicate tensor name".into(),
                });
            }
        }
        let pairs = r.u32("metadata count")?;
        let mut metadata = BTreeMap::new();
        for _ in 0..pairs {
            let key_at = r.pos;
            let klen = r.u32("key length")? as usize;
            let key = r.utf8(klen, "metadata key")?;
            let vlen = r.u32("value length")? as usize;
            let value = r.utf8(vlen, "metadata value")?;
            if metadata.insert(key, value).is_some() {
                return Err(Error::Format {
                    offset: key_at,
                    reason: "duplicate metadata key".into(),
                });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                reason: "trailing bytes".into(),
            });
        }
        Ok(ParamSet { tensors, metadata })
    }

    /// Writes via a temporary file in the target directory, then renames.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ParamSet::decode(&bytes)
    }
}

/// Atomic file replacement: temp file in the same directory + rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!("truncated {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format {
            offset: at,
            reason: format!("{what} is not UTF-8"),
        })
    }
}

/// `sum a_i b_i` over the flattened sets, accumulated in f64.
pub fn dot(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    a.check_aligned(b)?;
    Ok(a.values().zip(b.values()).map(|(x, y)| x as f64 * y as f64).sum())
}

pub fn norm(a: &ParamSet) -> f64 {
    a.values().map(|x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Euclidean norm of `a - b`.
pub fn distance(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    a.check_aligned(b)?;
    Ok(a.values()
        .zip(b.values())
        .map(|(x, y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

pub fn cosine_similarity(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    let d = dot(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine similarity of a zero-norm parameter set".into(),
        ));
    }
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// `lambda * a + (1 - lambda) * b`, coordinatewise. The result carries
/// `a`'s metadata plus both parents' checksums and `lambda`.
pub fn interpolate(a: &ParamSet, b: &ParamSet, lambda: f64) -> Result<ParamSet> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} not in [0,1]")));
    }
    let mut out = a.zip_map(b, |x, y| lambda * x + (1.0 - lambda) * y)?;
    out.set_meta("interp.parent_a", a.checksum());
    out.set_meta("interp.parent_b", b.checksum());
    out.set_meta("interp.lambda", format!("{lambda:?}"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(entries: &[(&str, &[f32])]) -> ParamSet {
        let mut p = ParamSet::new();
        for (n, v) in entries {
            p.insert(*n, Tensor::new([1, 1, 1, v.len()], v.to_vec()).unwrap());
        }
        p
    }

    #[test]
    fn flatten_is_name_ordered() {
        let p = set(&[("b", &[3.0]), ("a", &[1.0, 2.0])]);
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0]);
        let q = set(&[("a", &[1.0, 2.0]), ("b", &[3.0])]);
        assert_eq!(p.flatten(), q.flatten());
    }

    #[test]
    fn empty_round_trip() {
        let p = ParamSet::new();
        assert_eq!(ParamSet::decode(&p.encode()).unwrap(), p);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = set(&[("w", &[1.0])]).encode();
        bytes[0] = b'X';
        assert!(matches!(ParamSet::decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = set(&[("w", &[1.0, 2.0])]).encode();
        let cut = &bytes[..bytes.len() - 6];
        match ParamSet::decode(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("{other:?}"),
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(ParamSet::decode(&extra), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_version() {
        let mut bytes = ParamSet::new().encode();
        bytes[4] = 2;
        assert!(matches!(ParamSet::decode(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn cosine_cases() {
        let a = set(&[("w", &[1.0, 0.0])]);
        let b = set(&[("w", &[0.0, 1.0])]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &a.map(|v| -v)).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
        let z = set(&[("w", &[0.0, 0.0])]);
        assert!(matches!(cosine_similarity(&a, &z), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn interpolate_cases() {
        let a = set(&[("w", &[1.0])]);
        let b = set(&[("w", &[3.0])]);
        assert_eq!(interpolate(&a, &b, 0.5).unwrap().flatten(), vec![2.0]);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().flatten(), a.flatten());
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().flatten(), b.flatten());
        let r = interpolate(&a, &b, 0.25).unwrap();
        assert_eq!(r.meta("interp.parent_b"), Some(b.checksum().as_str()));
        assert!(interpolate(&a, &set(&[("v", &[1.0])]), 0.5).is_err());
        assert!(interpolate(&a, &set(&[("w", &[1.0, 2.0])]), 0.5).is_err());
        assert!(interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut p = set(&[("w", &[1.0, -2.5]), ("b", &[])]);
        p.set_meta("arch", "generator");
        p.save(&path).unwrap();
        let q = ParamSet::load(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.encode(), p.encode());
    }
}
