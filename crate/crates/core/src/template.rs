//! Fixed-length templates: fusion of the two branch embeddings into one
//! unit-length vector, cosine scoring, and the `.fpt` binary format.
//!
//! `.fpt` layout (little-endian):
//!
//! ```text
//! 0..4    magic "FPFL"
//! 4       format version (1)
//! 5       reserved, 0
//! 6..8    dim, u16
//! 8..16   reserved, 0
//! 16..    dim × f32
//! ```

use std::path::Path;

use crate::error::{format_err, validation, Error, Result};

pub const TEMPLATE_MAGIC: &[u8; 4] = b"FPFL";
pub const TEMPLATE_VERSION: u8 = 1;
pub const TEMPLATE_HEADER_LEN: usize = 16;
/// Accepted deviation from unit norm when loading external values.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BranchKind {
    Texture,
    Minutiae,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchEmbedding {
    values: Vec<f32>,
    kind: BranchKind,
}

impl BranchEmbedding {
    pub fn new(values: Vec<f32>, kind: BranchKind) -> Result<Self> {
        if values.is_empty() {
            return Err(validation("branch embedding must have at least one dimension"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("branch embedding contains non-finite values"));
        }
        Ok(BranchEmbedding { values, kind })
    }

    pub fn texture(values: Vec<f32>) -> Result<Self> {
        Self::new(values, BranchKind::Texture)
    }

    pub fn minutiae(values: Vec<f32>) -> Result<Self> {
        Self::new(values, BranchKind::Minutiae)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn kind(&self) -> BranchKind {
        self.kind
    }
}

/// Unit-norm fixed-length representation; texture half first.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedTemplate {
    values: Vec<f32>,
}

impl FixedTemplate {
    /// Wraps values that are already unit length (within [`NORM_TOLERANCE`]).
    pub fn from_unit_values(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.len() > u16::MAX as usize {
            return Err(validation(format!("template dimension {} out of range", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("template contains non-finite values"));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(validation(format!("template norm {norm} is not 1")));
        }
        Ok(FixedTemplate { values })
    }

    /// Scales an arbitrary nonzero vector to unit length.
    pub fn normalized(values: &[f32]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(validation("template contains non-finite values"));
        }
        let norm = l2_norm(values);
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        Self::from_unit_values(values.iter().map(|&v| (v as f64 / norm) as f32).collect())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TEMPLATE_HEADER_LEN + 4 * self.dim());
        out.extend_from_slice(TEMPLATE_MAGIC);
        out.push(TEMPLATE_VERSION);
        out.push(0);
        out.extend_from_slice(&(self.dim() as u16).to_le_bytes());
        out.extend_from_slice(&[0u8; 8]);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < TEMPLATE_HEADER_LEN {
            return Err(format_err(format!(
                "template truncated: {} bytes, header needs {TEMPLATE_HEADER_LEN}",
                bytes.len()
            )));
        }
        if &bytes[0..4] != TEMPLATE_MAGIC {
            return Err(format_err("bad template magic"));
        }
        if bytes[4] != TEMPLATE_VERSION {
            return Err(format_err(format!("unsupported template version {}", bytes[4])));
        }
        let dim = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if dim == 0 {
            return Err(format_err("template dimension is zero"));
        }
        let payload = &bytes[TEMPLATE_HEADER_LEN..];
        if payload.len() != dim * 4 {
            return Err(format_err(format!(
                "template payload is {} bytes, expected {} for dim {dim}",
                payload.len(),
                dim * 4
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        FixedTemplate::from_unit_values(values).map_err(|e| format_err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}

pub fn serialize(t: &FixedTemplate) -> Vec<u8> {
    t.to_bytes()
}

pub fn deserialize(bytes: &[u8]) -> Result<FixedTemplate> {
    FixedTemplate::from_bytes(bytes)
}

/// A template drawn uniformly from the unit sphere.
pub fn random_template<R: rand::Rng + ?Sized>(rng: &mut R, dim: usize) -> FixedTemplate {
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
            .collect();
        if let Ok(t) = FixedTemplate::normalized(&v) {
            return t;
        }
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Concatenates texture and minutiae embeddings and scales to unit length.
pub fn fuse(texture: &BranchEmbedding, minutiae: &BranchEmbedding) -> Result<FixedTemplate> {
    if texture.kind != BranchKind::Texture || minutiae.kind != BranchKind::Minutiae {
        return Err(validation("fuse expects (texture, minutiae) embeddings in that order"));
    }
    let mut joined = Vec::with_capacity(texture.values.len() + minutiae.values.len());
    joined.extend_from_slice(&texture.values);
    joined.extend_from_slice(&minutiae.values);
    FixedTemplate::normalized(&joined)
}

/// Dot product accumulated in `f64` over eight fixed lanes. The lane layout
/// is part of the scoring contract: every score in the crate goes through
/// this function, so search results and pairwise scores agree bit for bit.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

/// Cosine similarity of two unit templates.
pub fn match_score(t1: &FixedTemplate, t2: &FixedTemplate) -> Result<f32> {
    if t1.dim() != t2.dim() {
        return Err(validation(format!(
            "template dimensions differ: {} vs {}",
            t1.dim(),
            t2.dim()
        )));
    }
    Ok(dot_f64(&t1.values, &t2.values) as f32)
}
