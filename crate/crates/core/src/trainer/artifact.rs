//! The frozen perturbation and its on-disk format.
//!
//! Layout, all numbers little-endian:
//!
//! ```text
//! "GUAP" | version u32 | epsilon f64 | tau f64 | c u32 | h u32 | w u32
//! | target id length u32 | target id UTF-8 | seed pattern digest (32 bytes)
//! | flow f32 x 2*h*w | noise f32 x c*h*w | SHA-256 of everything before
//! ```

use std::path::Path;

use ndarray::{Array3, Array4, ArrayView4};

use crate::error::{GuapError, Result};
use crate::flowwarp::{warp_forward, FlowField, ImageBatch};
use crate::perturb::{add_noise_clip, compose_adversarial, AttackBudget, NoiseField};
use crate::persist::{read_file, write_file, Reader, Writer, DIGEST_LEN};

pub const ARTIFACT_MAGIC: &[u8; 4] = b"GUAP";
pub const ARTIFACT_VERSION: u32 = 1;

/// A deployable `(flow, noise)` pair with its budget and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct UniversalPerturbation {
    pub flow: FlowField,
    pub noise: NoiseField,
    pub budget: AttackBudget,
    pub seed_digest: [u8; 32],
    pub target_id: String,
    /// The generator's raw flow had no spatial variation, so identity was used.
    pub degenerate_flow: bool,
}

impl UniversalPerturbation {
    /// Zero flow and zero noise at `(c, h, w)`.
    pub fn identity(dims: (usize, usize, usize), target_id: impl Into<String>) -> Self {
        let (c, h, w) = dims;
        Self {
            flow: FlowField::zeros(h, w),
            noise: NoiseField::zeros(c, h, w),
            budget: AttackBudget::new(0.0, 0.0).expect("zero budget is valid"),
            seed_digest: [0; 32],
            target_id: target_id.into(),
            degenerate_flow: false,
        }
    }

    /// `(c, h, w)` this perturbation applies to.
    pub fn dims(&self) -> (usize, usize, usize) {
        self.noise.data().dim()
    }

    pub fn apply(&self, x: &ImageBatch) -> Result<ImageBatch> {
        compose_adversarial(x, &self.flow, &self.noise)
    }

    /// Unchecked batch application for callers that already validated shapes.
    pub(crate) fn apply_view(&self, x: ArrayView4<f32>) -> Array4<f32> {
        let warped = self.warp_only_view(x);
        add_noise_clip(warped.view(), self.noise.data().view())
    }

    pub(crate) fn warp_only_view(&self, x: ArrayView4<f32>) -> Array4<f32> {
        if self.flow.is_identity() {
            x.to_owned()
        } else {
            warp_forward(x, self.flow.data().view())
        }
    }

    /// Shape check against a batch of images.
    pub fn check_fits(&self, dims: (usize, usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(GuapError::shape(dims, self.dims()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.dims();
        let mut out = Writer::default();
        out.bytes(ARTIFACT_MAGIC);
        out.u32(ARTIFACT_VERSION);
        out.f64(self.budget.epsilon);
        out.f64(self.budget.tau);
        for d in [c, h, w] {
            out.u32(d as u32);
        }
        out.u32(self.target_id.len() as u32);
        out.bytes(self.target_id.as_bytes());
        out.bytes(&self.seed_digest);
        out.f32s(self.flow.data().iter());
        out.f32s(self.noise.data().iter());
        out.finish()
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.header(ARTIFACT_MAGIC, ARTIFACT_VERSION)?;
        let epsilon = r.f64()?;
        let tau = r.f64()?;
        let (c, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let id_len = r.u32()? as usize;
        let fixed = 4 + 4 + 8 + 8 + 12 + 4;
        r.expected_len = (fixed + id_len + 32 + 4 * (2 * h * w + c * h * w) + DIGEST_LEN) as u64;
        r.verify_length_and_digest()?;
        let target_id = String::from_utf8(r.take(id_len)?.to_vec()).map_err(|_| r.malformed("target id is not UTF-8"))?;
        let seed_digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let flow = r.f32s(2 * h * w)?;
        let noise = r.f32s(c * h * w)?;
        r.expect_trailer()?;
        let budget = AttackBudget::new(epsilon, tau).map_err(|e| r.malformed(e.to_string()))?;
        let flow = FlowField::new(Array3::from_shape_vec((2, h, w), flow).expect("sized")).map_err(|e| r.malformed(e.to_string()))?;
        let noise = NoiseField::new(Array3::from_shape_vec((c, h, w), noise).expect("sized")).map_err(|e| r.malformed(e.to_string()))?;
        let degenerate_flow = tau > 0.0 && flow.is_identity();
        Ok(Self {
            flow,
            noise,
            budget,
            seed_digest,
            target_id,
            degenerate_flow,
        })
    }
}

pub fn save_perturbation(p: &UniversalPerturbation, path: &Path) -> Result<()> {
    write_file(path, &p.to_bytes())
}

pub fn load_perturbation(path: &Path) -> Result<UniversalPerturbation> {
    UniversalPerturbation::from_bytes(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sample() -> UniversalPerturbation {
        let (c, h, w) = (3, 4, 8);
        let flow = Array3::from_shape_fn((2, h, w), |(k, i, j)| ((k + 2 * i + 3 * j) as f32 * 0.37).sin() * 0.1);
        let noise = Array3::from_shape_fn((c, h, w), |(k, i, j)| ((k * 5 + i + j) as f32).cos() * 0.04);
        UniversalPerturbation {
            flow: FlowField::new(flow).unwrap(),
            noise: NoiseField::new(noise).unwrap(),
            budget: AttackBudget::V3,
            seed_digest: [7; 32],
            target_id: "convnet4-s0".into(),
            degenerate_flow: false,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let p = sample();
        let bytes = p.to_bytes();
        let back = UniversalPerturbation::from_bytes(&bytes, Path::new("p.guap")).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_fields_are_where_expected() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"GUAP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), ARTIFACT_VERSION);
        assert_eq!(f64::from_le_bytes(bytes[8..16].try_into().unwrap()), 0.04);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 0.1);
    }

    #[test]
    fn identity_fits_and_applies_cleanly() {
        let p = UniversalPerturbation::identity((1, 4, 4), "m");
        let x = ImageBatch::new(Array4::from_elem((2, 1, 4, 4), 0.3f32)).unwrap();
        assert_eq!(p.apply(&x).unwrap(), x);
        assert!(p.check_fits((3, 4, 4)).is_err());
    }
}
