//! Synthetic parity task and its binary file format.
//!
//! Every sample draws one uniform bit per modality and writes it into all of
//! that modality's tokens as `±u_k + noise`, where `u_k` is a fixed random
//! sign pattern. The label is the XOR of all bits, so no single modality
//! carries information about it.

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub lengths: Vec<usize>,
    pub feature_dims: Vec<usize>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: f64,
}

impl DataSpec {
    pub fn total(&self) -> usize {
        self.train_samples + self.test_samples
    }

    fn validate(&self) -> Result<()> {
        let bad = |detail: &str| {
            Err(Error::Format {
                what: "data spec",
                detail: detail.into(),
            })
        };
        if self.lengths.is_empty() || self.lengths.len() != self.feature_dims.len() {
            return bad("lengths and feature dims must be non-empty and of equal count");
        }
        if self.lengths.contains(&0) || self.feature_dims.contains(&0) {
            return bad("lengths and feature dims must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DataSpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(spec: &DataSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let patterns: Vec<Vec<f64>> = spec
            .feature_dims
            .iter()
            .map(|&f| (0..f).map(|_| if rng.uniform() < 0.5 { -1.0 } else { 1.0 }).collect())
            .collect();
        let samples = (0..spec.total())
            .map(|_| {
                let mut parity = 0;
                let modalities = spec
                    .lengths
                    .iter()
                    .zip(&patterns)
                    .map(|(&len, pattern)| {
                        let bit = rng.index(2);
                        parity ^= bit;
                        let sign = if bit == 1 { 1.0 } else { -1.0 };
                        let mut x = Tensor::zeros(&[len, pattern.len()]);
                        for r in 0..len {
                            for (v, &u) in x.row_mut(r).iter_mut().zip(pattern) {
                                *v = sign * u + spec.noise * rng.normal();
                            }
                        }
                        x
                    })
                    .collect();
                Sample {
                    modalities,
                    label: parity,
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            seed,
            samples,
        })
    }

    pub fn train(&self) -> &[Sample] {
        &self.samples[..self.spec.train_samples]
    }

    pub fn test(&self) -> &[Sample] {
        &self.samples[self.spec.train_samples..]
    }

    /// Serializes to the fixed-width format: magic `LOCOMTDS`, version byte,
    /// then little-endian `u32` m, `u32` lengths, `u32` feature dims, `u64`
    /// sample count, `u64` train count, `u64` seed, `f64` noise, followed by
    /// one record per sample: `u32` label and every modality's features as
    /// row-major `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(s.lengths.len() as u32).to_le_bytes());
        for &l in &s.lengths {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        for &f in &s.feature_dims {
            out.extend_from_slice(&(f as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        out.extend_from_slice(&(s.train_samples as u64).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&s.noise.to_le_bytes());
        for sample in &self.samples {
            out.extend_from_slice(&(sample.label as u32).to_le_bytes());
            for x in &sample.modalities {
                for &v in x.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if &cursor.take::<8>()? != MAGIC {
            return Err(Error::Format {
                what: "dataset",
                detail: "bad magic".into(),
            });
        }
        let [version] = cursor.take::<1>()?;
        if version != VERSION {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("unsupported version {version}"),
            });
        }
        let m = cursor.u32()? as usize;
        let lengths = (0..m)
            .map(|_| cursor.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let feature_dims = (0..m)
            .map(|_| cursor.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = cursor.u64()? as usize;
        let train_samples = cursor.u64()? as usize;
        let seed = cursor.u64()?;
        let noise = f64::from_bits(cursor.u64()?);
        if train_samples > count {
            return Err(Error::Format {
                what: "dataset",
                detail: format!("train count {train_samples} exceeds sample count {count}"),
            });
        }
        let spec = DataSpec {
            lengths,
            feature_dims,
            train_samples,
            test_samples: count - train_samples,
            noise,
        };
        spec.validate()?;
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            let label = cursor.u32()? as usize;
            let modalities = spec
                .lengths
                .iter()
                .zip(&spec.feature_dims)
                .map(|(&l, &f)| {
                    let data = (0..l * f)
                        .map(|_| cursor.u64().map(f64::from_bits))
                        .collect::<Result<Vec<_>>>()?;
                    Tensor::new(vec![l, f], data)
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(Sample { modalities, label });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Format {
                what: "dataset",
                detail: "trailing bytes".into(),
            });
        }
        Ok(Self { spec, seed, samples })
    }
}

const MAGIC: &[u8; 8] = b"LOCOMTDS";
const VERSION: u8 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let chunk = self.bytes.get(self.pos..self.pos + N).ok_or_else(|| Error::Format {
            what: "dataset",
            detail: "unexpected end of data".into(),
        })?;
        self.pos += N;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}
