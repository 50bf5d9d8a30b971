//! Binary checkpoint format for [`Mlp`] parameters.
//!
//! All integers are little-endian `u32`, all parameters little-endian `f64`
//! regardless of the in-memory scalar width:
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"GDMDMLP\0"
//! 8       4     format version (1)
//! 12      4     activation tag (0 = tanh, 1 = silu)
//! 16      4     input_dim
//! 20      4     cond_dim
//! 24      4     time_embed_dim
//! 28      4     output_dim
//! 32      4     layer count L
//! 36      8*L   per layer: fan_in, fan_out
//! ...           per layer: weight [fan_in][fan_out] row-major, then bias [fan_out]
//! ```
//!
//! Hidden widths are implied by the per-layer `fan_out` of all but the last
//! layer.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::mlp::{Activation, Dense, Mlp, MlpConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GDMDMLP\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes<T: Scalar>(model: &Mlp<T>) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::with_capacity(36 + 8 * model.layers().len() + 8 * model.param_count());
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        cfg.activation.tag(),
        cfg.input_dim as u32,
        cfg.cond_dim as u32,
        cfg.time_embed_dim as u32,
        cfg.output_dim as u32,
        model.layers().len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for l in model.layers() {
        out.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
        out.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
    }
    for l in model.layers() {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Mlp<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let tag = r.u32()?;
    let activation = Activation::from_tag(tag).ok_or_else(|| Error::Format(format!("activation tag {tag}")))?;
    let input_dim = r.u32()? as usize;
    let cond_dim = r.u32()? as usize;
    let time_embed_dim = r.u32()? as usize;
    let output_dim = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 {
        return Err(Error::Format("no layers".into()));
    }
    let mut dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        dims.push((r.u32()? as usize, r.u32()? as usize));
    }
    let hidden = dims[..n_layers - 1].iter().map(|&(_, o)| o).collect();
    let config = MlpConfig {
        input_dim,
        cond_dim,
        time_embed_dim,
        hidden,
        output_dim,
        activation,
    };
    let mut layers = Vec::with_capacity(n_layers);
    for &(fan_in, fan_out) in &dims {
        let mut read = |n: usize| -> Result<Vec<T>> {
            (0..n).map(|_| r.f64().map(T::lit)).collect()
        };
        let weight = Tensor::new(vec![fan_in, fan_out], read(fan_in * fan_out)?)?;
        let bias = Tensor::new(vec![fan_out], read(fan_out)?)?;
        layers.push(Dense { weight, bias });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Mlp::from_layers(config, layers).map_err(|e| Error::Format(e.to_string()))
}

/// Writes atomically via a sibling temporary file.
pub fn save<T: Scalar>(model: &Mlp<T>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&to_bytes(model))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Mlp<T>> {
    from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn param_hash<T: Scalar>(model: &Mlp<T>) -> String {
    hex::encode(Sha256::digest(to_bytes(model)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn round_trip_preserves_parameters(seed in any::<u64>(), h1 in 1usize..9, h2 in 1usize..9, tanh in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = MlpConfig {
                input_dim: 2,
                cond_dim: 3,
                time_embed_dim: 4,
                hidden: vec![h1, h2],
                output_dim: 2,
                activation: if tanh { Activation::Tanh } else { Activation::Silu },
            };
            let m = Mlp::<f64>::new(cfg, &mut rng).unwrap();
            let bytes = to_bytes(&m);
            let back: Mlp<f64> = from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(to_bytes(&back), bytes);
        }
    }

    #[test]
    fn header_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::<f64>::new(MlpConfig::standard(2, 4), &mut rng).unwrap();
        let b = to_bytes(&m);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[32..36].try_into().unwrap()), 4);
        assert_eq!(b.len(), 36 + 8 * 4 + 8 * m.param_count());
    }

    #[test]
    fn rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Mlp::<f64>::new(MlpConfig::standard(2, 4), &mut rng).unwrap();
        let b = to_bytes(&m);
        assert!(from_bytes::<f64>(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f64>(&bad).is_err());
        let mut long = b;
        long.push(0);
        assert!(from_bytes::<f64>(&long).is_err());
    }
}
