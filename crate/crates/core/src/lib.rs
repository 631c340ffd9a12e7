//! Fixed-length fingerprint representations.
//!
//! Minutiae maps, crop-and-align sampling, a small two-branch embedding
//! network with a minutiae-map side task, fixed-length templates and exact
//! 1:N search.

pub mod error;
pub mod eval;
pub mod gallery;
pub mod io;
pub mod minutiae_map;
pub mod net;
pub mod real;
pub mod spatial_transform;
pub mod synth;
pub mod template;
pub mod throughput;

pub use error::{Error, ErrorKind, Result};
pub use eval::{eval_search, eval_verification, CmcPoint, EvalReport, OperatingPoint};
pub use gallery::{build_gallery, Candidate, Gallery, SearchResult};
pub use minutiae_map::{encode_map, orientation_diff, peak_extract, MapConfig, Minutia, MinutiaeMap, MinutiaeTemplate};
pub use spatial_transform::{
    align, build_affine, clamp_params, grid_sample, grid_sample_backward, AffineMatrix, AlignmentBounds,
    AlignmentParams, GrayImage, Padding,
};
pub use template::{fuse, match_score, BranchEmbedding, BranchKind, FixedTemplate};
pub use net::{extract_embedding, NetConfig, NetParams};
pub use synth::{gen_identity, make_dataset, render_impression, Dataset, Impression, SynthConfig, SyntheticIdentity};
