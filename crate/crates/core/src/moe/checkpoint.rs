//! `GRIPMOE1` checkpoint format.
//!
//! ```text
//! magic   "GRIPMOE1"            8 bytes
//! header  L, E, d, k, C         u32 little-endian each
//! params  f64 little-endian, per layer: router (E·d, row-major),
//!         then per expert: weight (d·d, row-major), bias (d);
//!         finally readout weight (C·d) and bias (C)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::numerics::Matrix;

use super::{ExpertParams, MoELayer, MoENetwork, Readout};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GRIPMOE1";

impl MoENetwork {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.shape();
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        for v in [s.layers, s.experts, s.dim, s.k, s.classes] {
            w.u32(v as u32);
        }
        for v in self.flat_params() {
            w.f64(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let nl = r.u32()? as usize;
        let e = r.u32()? as usize;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        let c = r.u32()? as usize;
        let expected = nl * (e * d + e * (d * d + d)) + c * d + c;
        r.expect_remaining(expected * 8)?;

        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let theta = Matrix::new(e, d, r.f64s(e * d)?)?;
            let mut experts = Vec::with_capacity(e);
            for _ in 0..e {
                let weight = Matrix::new(d, d, r.f64s(d * d)?)?;
                let bias = r.f64s(d)?;
                experts.push(ExpertParams { weight, bias });
            }
            layers.push(MoELayer::new(theta, experts, k)?);
        }
        let weight = Matrix::new(c, d, r.f64s(c * d)?)?;
        let bias = r.f64s(c)?;
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("checkpoint readout bias".into()));
        }
        r.finish()?;
        MoENetwork::new(d, layers, Readout { weight, bias })
    }
}

pub fn write_checkpoint(net: &MoENetwork, path: &Path) -> Result<()> {
    crate::io::write_file(path, &net.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<MoENetwork> {
    MoENetwork::from_bytes(&crate::io::read_file(path)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::moe::NetShape;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = NetShape {
            layers: 2,
            experts: 3,
            dim: 4,
            k: 2,
            classes: 5,
        };
        let net = MoENetwork::random(shape, 1.0, &mut rng).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        let back = MoENetwork::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, net);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = MoENetwork::random(NetShape::default(), 1.0, &mut rng).unwrap();
        let bytes = net.to_bytes();
        assert!(MoENetwork::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MoENetwork::from_bytes(&bad), Err(Error::Format { .. })));
    }
}
