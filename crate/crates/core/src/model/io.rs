//! Versioned binary model files.
//!
//! ```text
//! "FEWM" | u32 version | u8 aggregator | u32 speech_dim | u32 text_dim
//!        | f64 dropout | u64 seed | u64 config_hash
//!        | u32 n_hidden | u32 width * n_hidden
//!        | u32 n_params | (u32 rows | u32 cols | f64 * rows*cols) * n_params
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use super::{Aggregator, EstimatorModel, Metadata, ModelConfig, HIDDEN_WIDTHS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_MAGIC: [u8; 4] = *b"FEWM";
pub const MODEL_VERSION: u32 = 1;

impl<T: Scalar> EstimatorModel<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(match self.config.aggregator {
            Aggregator::AvgPool => 0,
            Aggregator::Bilstm => 1,
        });
        out.extend_from_slice(&(self.config.speech_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.config.text_dim as u32).to_le_bytes());
        out.extend_from_slice(&self.config.dropout.to_le_bytes());
        out.extend_from_slice(&self.metadata.seed.to_le_bytes());
        out.extend_from_slice(&self.metadata.config_hash.to_le_bytes());
        out.extend_from_slice(&(self.hidden.len() as u32).to_le_bytes());
        for h in &self.hidden {
            out.extend_from_slice(&(h.linear.weight.cols() as u32).to_le_bytes());
        }
        let params = self.params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            out.extend_from_slice(&(p.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.cols() as u32).to_le_bytes());
            for v in p.data() {
                out.extend_from_slice(&v.widen().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a model file (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.err(format!("unsupported model version {version}")));
        }
        let aggregator = match r.take(1)?[0] {
            0 => Aggregator::AvgPool,
            1 => Aggregator::Bilstm,
            k => return Err(r.err(format!("unknown aggregator tag {k}"))),
        };
        let speech_dim = r.u32()? as usize;
        let text_dim = r.u32()? as usize;
        let dropout = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let seed = r.u64()?;
        let config_hash = r.u64()?;
        let n_hidden = r.u32()? as usize;
        let mut widths = Vec::with_capacity(n_hidden.min(16));
        for _ in 0..n_hidden {
            widths.push(r.u32()? as usize);
        }
        if widths != HIDDEN_WIDTHS {
            return Err(r.err(format!("hidden widths {widths:?}, expected {HIDDEN_WIDTHS:?}")));
        }
        let config = ModelConfig {
            aggregator,
            speech_dim,
            text_dim,
            dropout,
        };
        let mut model = EstimatorModel::<T>::init(config, 0).map_err(|e| r.err(e.to_string()))?;
        model.metadata = Metadata { seed, config_hash };

        let n_params = r.u32()? as usize;
        let expected = model.params().len();
        if n_params != expected {
            return Err(r.err(format!("{n_params} parameter blobs, expected {expected}")));
        }
        for p in model.params_mut() {
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if (rows, cols) != p.shape() {
                return Err(r.err(format!(
                    "parameter {rows}x{cols}, expected {}x{}",
                    p.rows(),
                    p.cols()
                )));
            }
            let at = r.pos;
            let raw = r.take(8 * rows * cols)?;
            for (dst, chunk) in p.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                let v = f64::from_le_bytes(chunk.try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::Format {
                        offset: at as u64,
                        msg: "non-finite parameter".into(),
                    });
                }
                *dst = T::lit(v);
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_model<T: Scalar>(model: &EstimatorModel<T>, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<EstimatorModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EstimatorModel::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureSequence;
    use crate::tensor::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        for agg in [Aggregator::AvgPool, Aggregator::Bilstm] {
            let mut m = EstimatorModel::<f64>::init(ModelConfig::new(agg, 5, 3), 11).unwrap();
            m.metadata.config_hash = 0xdead_beef;
            let p = dir.path().join("m.fewm");
            save_model(&m, &p).unwrap();
            let back: EstimatorModel<f64> = load_model(&p).unwrap();
            assert_eq!(back, m);

            let s = FeatureSequence::new(2, 5, vec![0.1, 0.2, 0.3, 0.4, 0.5, 1.0, 0.0, -1.0, 2.0, 0.5]).unwrap();
            let t = FeatureSequence::new(1, 3, vec![0.7, -0.2, 0.1]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            assert_eq!(
                m.estimate(&s, &t, Mode::Eval, &mut rng).unwrap(),
                back.estimate(&s, &t, Mode::Eval, &mut rng).unwrap()
            );
        }
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = EstimatorModel::<f64>::init(ModelConfig::new(Aggregator::AvgPool, 2, 2), 0).unwrap();
        let bytes = m.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EstimatorModel::<f64>::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));

        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = EstimatorModel::<f64>::from_bytes(&v2).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");

        assert!(EstimatorModel::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(EstimatorModel::<f64>::from_bytes(&long).is_err());
    }
}
