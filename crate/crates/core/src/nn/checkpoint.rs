//! Checkpoint file: a text header followed by raw little-endian tensors.
//!
//! ```text
//! beamtrack-checkpoint 1
//! dtype f64
//! feature_order lat_norm,lon_norm,ux,uy,uz
//! bounds <lat_min> <lat_max> <lon_min> <lon_max>
//! model {json}
//! hyper {json}
//! seed 7
//! tensor conv1.weight 128,5,3 param
//! ...
//! payload_bytes 2082560
//! payload_sha256 <hex>
//! end
//! <payload>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::model::{ModelConfig, ModelParams};
use super::optim::HyperParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geo::{NormalizationBounds, FEATURE_ORDER};
use crate::scalar::Scalar;

const MAGIC: &str = "beamtrack-checkpoint 1";

/// Everything needed to reproduce predictions: weights, the feature
/// normalization fitted on the training split, and the run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub bounds: NormalizationBounds,
    pub hyper: HyperParams,
    pub seed: u64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Dtype named in a checkpoint header, without decoding the rest.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<String> {
    let text = std::str::from_utf8(&bytes[..bytes.len().min(256)]).unwrap_or("");
    let mut lines = text.lines();
    if lines.next() != Some(MAGIC) {
        return Err(bad("not a beamtrack checkpoint"));
    }
    lines
        .next()
        .and_then(|l| l.strip_prefix("dtype "))
        .map(str::to_owned)
        .ok_or_else(|| bad("missing dtype line"))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t, _) in self.params.named() {
            for v in t.data() {
                v.write_le(&mut payload);
            }
        }
        let b = &self.bounds;
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("dtype {}\n", T::DTYPE));
        head.push_str(&format!("feature_order {}\n", FEATURE_ORDER.join(",")));
        head.push_str(&format!("bounds {} {} {} {}\n", b.lat_min, b.lat_max, b.lon_min, b.lon_max));
        head.push_str(&format!("model {}\n", serde_json::to_string(self.params.config())?));
        head.push_str(&format!("hyper {}\n", serde_json::to_string(&self.hyper)?));
        head.push_str(&format!("seed {}\n", self.seed));
        for (name, t, trainable) in self.params.named() {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let kind = if trainable { "param" } else { "buffer" };
            head.push_str(&format!("tensor {name} {} {kind}\n", shape.join(",")));
        }
        head.push_str(&format!("payload_bytes {}\n", payload.len()));
        head.push_str(&format!("payload_sha256 {}\n", hex(&Sha256::digest(&payload))));
        head.push_str("end\n");
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let marker = b"\nend\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| bad("header terminator not found"))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| bad("header is not UTF-8"))?;
        let payload = &bytes[split + marker.len()..];
        let mut lines = head.lines();
        let mut field = |key: &str| -> Result<&str> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(key))
                .and_then(|l| l.strip_prefix(' '))
                .ok_or_else(|| bad(format!("expected `{key}` line")))
        };
        // the magic line has no value
        let magic = field("beamtrack-checkpoint")?;
        if magic != "1" {
            return Err(bad(format!("unsupported version {magic}")));
        }
        let dtype = field("dtype")?;
        if dtype != T::DTYPE {
            return Err(bad(format!("checkpoint holds {dtype}, expected {}", T::DTYPE)));
        }
        let order = field("feature_order")?;
        if order != FEATURE_ORDER.join(",") {
            return Err(bad(format!("feature order {order} does not match this pipeline")));
        }
        let b: Vec<f64> = field("bounds")?
            .split(' ')
            .map(|s| s.parse::<f64>().map_err(|_| bad("bad bounds value")))
            .collect::<Result<_>>()?;
        if b.len() != 4 {
            return Err(bad("bounds needs four values"));
        }
        let bounds = NormalizationBounds::new(b[0], b[1], b[2], b[3])?;
        let config: ModelConfig = serde_json::from_str(field("model")?)?;
        let hyper: HyperParams = serde_json::from_str(field("hyper")?)?;
        let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed"))?;

        let layout = config.layout();
        let mut shapes = Vec::with_capacity(layout.len());
        for (name, shape, trainable) in &layout {
            let line = field("tensor")?;
            let parts: Vec<&str> = line.split(' ').collect();
            let dims: Vec<usize> = parts
                .get(1)
                .map(|s| s.split(',').filter_map(|d| d.parse().ok()).collect())
                .unwrap_or_default();
            let kind = if *trainable { "param" } else { "buffer" };
            if parts.len() != 3 || parts[0] != *name || dims != *shape || parts[2] != kind {
                return Err(bad(format!("tensor line `{line}` does not match {name} {shape:?} {kind}")));
            }
            shapes.push(dims);
        }
        let n_bytes: usize = field("payload_bytes")?.parse().map_err(|_| bad("bad payload_bytes"))?;
        let digest = field("payload_sha256")?.to_owned();
        if payload.len() != n_bytes {
            return Err(bad(format!("payload has {} bytes, header says {n_bytes}", payload.len())));
        }
        if hex(&Sha256::digest(payload)) != digest {
            return Err(Error::ChecksumMismatch);
        }
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>() * T::BYTES;
        if expected != n_bytes {
            return Err(bad(format!("tensors need {expected} bytes, payload has {n_bytes}")));
        }
        let mut tensors = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for shape in shapes {
            let n: usize = shape.iter().product();
            let data = payload[off..off + n * T::BYTES]
                .chunks_exact(T::BYTES)
                .map(T::read_le)
                .collect();
            off += n * T::BYTES;
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Checkpoint {
            params: ModelParams::from_tensors(config, tensors)?,
            bounds,
            hyper,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ModelConfig;

    fn sample<T: Scalar>() -> Checkpoint<T> {
        let mut params = ModelParams::<T>::init(ModelConfig::default(), 17).unwrap();
        // non-default running stats so buffers are exercised
        let rm = params.get_mut("bn.running_mean").unwrap();
        rm.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = T::lit(i as f64 * 0.1 - 3.3));
        Checkpoint {
            params,
            bounds: NormalizationBounds::new(33.1, 33.7, -112.1, -111.3).unwrap(),
            hyper: HyperParams::default(),
            seed: 17,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample::<f64>();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let c = sample::<f32>();
        let back = Checkpoint::<f32>::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn header_is_readable() {
        let bytes = sample::<f64>().to_bytes().unwrap();
        assert_eq!(checkpoint_dtype(&bytes).unwrap(), "f64");
        let text = String::from_utf8_lossy(&bytes[..2000]);
        assert!(text.contains("feature_order lat_norm,lon_norm,ux,uy,uz"));
        assert!(text.contains("tensor conv1.weight 128,5,3 param"));
        assert!(text.contains("tensor bn.running_var 128 buffer"));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = sample::<f64>().to_bytes().unwrap();
        let last = bytes.len() - 5;
        bytes[last] ^= 0x10;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::ChecksumMismatch)));
    }

    #[test]
    fn wrong_dtype_or_truncation_rejected() {
        let bytes = sample::<f64>().to_bytes().unwrap();
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::<f64>::from_bytes(b"garbage").is_err());
    }
}
