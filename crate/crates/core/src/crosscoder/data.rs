//! Activation datasets and their on-disk layout.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size              field
//! 0       4                 magic "XCAD"
//! 4       4   u32           format version (1)
//! 8       4   u32           snapshot count S
//! 12      4   u32           d_model D
//! 16      8   u64           sample count N
//! 24      4·S u32           snapshot ids, in storage order
//! ...     4·N·D per snapshot  f32 activations, row-major (sample-major), one block per snapshot
//! ```
//!
//! Values are stored as `f32`; reading widens them back to `f64`.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;

use super::CrosscoderError;

pub const MAGIC: &[u8; 4] = b"XCAD";
pub const FORMAT_VERSION: u32 = 1;

/// Activations of a common input set under several snapshots.
///
/// Each matrix is `d_model × N`: column `s` is sample `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    snapshot_ids: Vec<u32>,
    acts: Vec<DMatrix<f64>>,
}

impl ActivationDataset {
    pub fn new(snapshot_ids: Vec<u32>, acts: Vec<DMatrix<f64>>) -> Result<Self, CrosscoderError> {
        if acts.is_empty() || snapshot_ids.len() != acts.len() {
            return Err(CrosscoderError::Shape(format!("{} ids for {} activation blocks", snapshot_ids.len(), acts.len())));
        }
        let shape = acts[0].shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(CrosscoderError::Shape("empty activation block".into()));
        }
        if let Some(a) = acts.iter().find(|a| a.shape() != shape) {
            return Err(CrosscoderError::Shape(format!("activation blocks {:?} and {:?} differ", shape, a.shape())));
        }
        for (k, id) in snapshot_ids.iter().enumerate() {
            if snapshot_ids[..k].contains(id) {
                return Err(CrosscoderError::DuplicateSnapshot(*id));
            }
        }
        if acts.iter().any(|a| a.iter().any(|x| !x.is_finite())) {
            return Err(CrosscoderError::NonFinite("activations"));
        }
        Ok(Self { snapshot_ids, acts })
    }

    pub fn snapshot_ids(&self) -> &[u32] {
        &self.snapshot_ids
    }

    pub fn n_snapshots(&self) -> usize {
        self.acts.len()
    }

    pub fn d_model(&self) -> usize {
        self.acts[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.acts[0].ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Storage position of snapshot `id`.
    pub fn position(&self, id: u32) -> Result<usize, CrosscoderError> {
        self.snapshot_ids.iter().position(|&s| s == id).ok_or(CrosscoderError::UnknownSnapshot(id))
    }

    /// `d_model × N` block of the snapshot at storage position `k`.
    pub fn block(&self, k: usize) -> &DMatrix<f64> {
        &self.acts[k]
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.acts
    }

    /// Columns `idx` of every block.
    pub fn select(&self, idx: &[usize]) -> Vec<DMatrix<f64>> {
        self.acts.iter().map(|a| a.select_columns(idx)).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_snapshots() as u32).to_le_bytes())?;
        w.write_all(&(self.d_model() as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for id in &self.snapshot_ids {
            w.write_all(&id.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.d_model() * self.len() * 4);
        for a in &self.acts {
            buf.clear();
            // column-major d_model × N is sample-major N × d_model
            for x in a.iter() {
                buf.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CrosscoderError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CrosscoderError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(CrosscoderError::Format(format!("unsupported version {version}")));
        }
        let s = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut n8 = [0u8; 8];
        r.read_exact(&mut n8)?;
        let n = usize::try_from(u64::from_le_bytes(n8)).map_err(|_| CrosscoderError::Format("sample count overflows".into()))?;
        let ids = (0..s).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let len = d.checked_mul(n).ok_or_else(|| CrosscoderError::Format("block size overflows".into()))?;
        let mut acts = Vec::with_capacity(s);
        let mut raw = vec![0u8; len * 4];
        for _ in 0..s {
            r.read_exact(&mut raw)?;
            let vals = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
            acts.push(DMatrix::from_iterator(d, n, vals));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CrosscoderError::Format("trailing bytes".into()));
        }
        Self::new(ids, acts)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CrosscoderError> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CrosscoderError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ActivationDataset {
        let a = DMatrix::from_fn(3, 5, |r, c| (r * 10 + c) as f64 * 0.25 - 1.0);
        let b = DMatrix::from_fn(3, 5, |r, c| (r as f64 + 1.0) / (c as f64 + 3.0));
        ActivationDataset::new(vec![2, 7], vec![a, b]).unwrap()
    }

    #[test]
    fn roundtrip_matches_f32_rounding() {
        let ds = sample();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 2 * 4 + 2 * 15 * 4);
        let back = ActivationDataset::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.snapshot_ids(), &[2, 7]);
        for k in 0..2 {
            let rounded = ds.block(k).map(|x| x as f32 as f64);
            assert_eq!(back.block(k), &rounded);
        }
    }

    #[test]
    fn layout_is_sample_major() {
        let ds = sample();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[0..4], b"XCAD");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 5);
        let data = 32;
        // second float is sample 0, dimension 1
        let second = f32::from_le_bytes(bytes[data + 4..data + 8].try_into().unwrap());
        assert_eq!(second as f64, ds.block(0)[(1, 0)]);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ds = sample();
        let mut bytes = Vec::new();
        ds.write_to(&mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Y';
        assert!(matches!(ActivationDataset::read_from(bad.as_slice()), Err(CrosscoderError::Format(_))));
        assert!(ActivationDataset::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(ActivationDataset::read_from(long.as_slice()), Err(CrosscoderError::Format(_))));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.xcad");
        let ds = sample();
        ds.save(&path).unwrap();
        let back = ActivationDataset::load(&path).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back.d_model(), 3);
    }

    #[test]
    fn validation() {
        let a = DMatrix::zeros(2, 3);
        assert!(ActivationDataset::new(vec![1], vec![]).is_err());
        assert!(ActivationDataset::new(vec![1, 1], vec![a.clone(), a.clone()]).is_err());
        assert!(ActivationDataset::new(vec![1, 2], vec![a.clone(), DMatrix::zeros(2, 4)]).is_err());
        let mut nan = a.clone();
        nan[(0, 0)] = f64::NAN;
        assert!(ActivationDataset::new(vec![1], vec![nan]).is_err());
        assert_eq!(ActivationDataset::new(vec![4], vec![a]).unwrap().position(5), Err(CrosscoderError::UnknownSnapshot(5)));
    }
}
