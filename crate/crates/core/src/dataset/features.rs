//! `FEW1` binary feature files.
//!
//! Layout (little-endian): magic `FEW1`, `u32` dim, `u32` frames, then
//! `frames * dim` `f32` values row-major. No padding; integrity is checked by
//! length alone.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"FEW1";
const HEADER_LEN: usize = 12;

/// A `frames x dim` embedding sequence for one utterance or hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    dim: usize,
    frames: usize,
    values: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::EmptySequence(format!(
                "feature sequence must have frames >= 1 and dim >= 1, got {frames}x{dim}"
            )));
        }
        if values.len() != frames * dim {
            return Err(Error::shape(format!(
                "{} values for {frames}x{dim} features",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature value at index {i}")));
        }
        Ok(Self { dim, frames, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Widens (or keeps) the values into a `frames x dim` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .values
            .iter()
            .map(|&v| T::from_f32(v).unwrap_or_else(T::nan))
            .collect();
        Tensor::new(self.frames, self.dim, data).expect("shape checked at construction")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fmt(bytes.len(), "truncated header".into()));
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(fmt(4, "dim is zero".into()));
        }
        if frames == 0 {
            return Err(fmt(8, "frame count is zero".into()));
        }
        let expected = frames
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| fmt(4, "dim x frames overflows".into()))?;
        if bytes.len() < expected {
            return Err(fmt(
                bytes.len(),
                format!("truncated payload: {frames}x{dim} needs {expected} bytes"),
            ));
        }
        if bytes.len() > expected {
            return Err(fmt(expected, format!("{} trailing bytes", bytes.len() - expected)));
        }
        let mut values = Vec::with_capacity(frames * dim);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(fmt(HEADER_LEN + 4 * i, "non-finite value".into()));
            }
            values.push(v);
        }
        Ok(Self { dim, frames, values })
    }
}

pub fn write_features(seq: &FeatureSequence, path: &Path) -> Result<()> {
    fs::write(path, seq.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

/// Checks a feature file and, when given, its declared dimension.
pub fn validate_features(path: &Path, expected_dim: Option<usize>) -> Result<(usize, usize)> {
    let seq = read_features(path)?;
    if let Some(d) = expected_dim {
        if seq.dim() != d {
            return Err(Error::Format {
                offset: 4,
                msg: format!("{}: dim {} but expected {d}", path.display(), seq.dim()),
            });
        }
    }
    Ok((seq.frames(), seq.dim()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.few");
        let vals: Vec<f32> = (0..7 * 16).map(|i| (i as f32).sin() * 3.1).collect();
        let seq = FeatureSequence::new(7, 16, vals).unwrap();
        write_features(&seq, &p).unwrap();
        assert_eq!(read_features(&p).unwrap(), seq);
        assert_eq!(validate_features(&p, Some(16)).unwrap(), (7, 16));
        assert!(validate_features(&p, Some(1024)).is_err());
    }

    #[test]
    fn corrupt_inputs() {
        let seq = FeatureSequence::new(2, 3, vec![1.0; 6]).unwrap();
        let mut bytes = seq.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(FeatureSequence::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));

        let bytes = seq.to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match FeatureSequence::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, cut.len()),
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            FeatureSequence::from_bytes(&long),
            Err(Error::Format { offset: 36, .. })
        ));
        assert!(FeatureSequence::from_bytes(&bytes[..5]).is_err());

        let mut nan = bytes;
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(FeatureSequence::from_bytes(&nan), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn zero_frames_rejected() {
        assert!(FeatureSequence::new(0, 4, vec![]).is_err());
        let mut bytes = FeatureSequence::new(1, 1, vec![0.5]).unwrap().to_bytes();
        bytes[8..12].copy_from_slice(&0u32.to_le_bytes());
        bytes.truncate(12);
        assert!(matches!(FeatureSequence::from_bytes(&bytes), Err(Error::Format { offset: 8, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn byte_exact_round_trip(frames in 1usize..12, dim in 1usize..12, seed in any::<u64>()) {
            let mut s = seed;
            let vals: Vec<f32> = (0..frames * dim).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f32::from_bits((s >> 33) as u32 & 0x7f7f_ffff)
            }).collect();
            let seq = FeatureSequence::new(frames, dim, vals).unwrap();
            let bytes = seq.to_bytes();
            let back = FeatureSequence::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
