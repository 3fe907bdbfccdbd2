//! Per-dimension latent traversals: sweep one latent coordinate over a
//! value grid while holding the others constant, decode each point, and
//! compose the frames into a horizontal strip.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ImageSample;
use crate::rng::SplitMix64;
use crate::tinyvae::{decode, VaeParameters};

pub const DEFAULT_LOW: f64 = -3.0;
pub const DEFAULT_HIGH: f64 = 3.0;
pub const DEFAULT_STEP: f64 = 0.6;
pub const DEFAULT_SEPARATOR_PX: usize = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraversalError {
    #[error("latent dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("frames differ in size")]
    SizeMismatch,
}

/// A point in the generator's latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector {
    pub values: Vec<f64>,
}

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Self {
        assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One perturbed-dimension sweep: which coordinate to vary and over which
/// arithmetic grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalSpec {
    pub base: LatentVector,
    pub dim_index: usize,
    pub low: f64,
    pub high: f64,
    pub step: f64,
}

impl TraversalSpec {
    pub fn new(base: LatentVector, dim_index: usize) -> Self {
        Self {
            base,
            dim_index,
            low: DEFAULT_LOW,
            high: DEFAULT_HIGH,
            step: DEFAULT_STEP,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        traversal_values(self.low, self.high, self.step)
    }
}

/// The arithmetic value grid `low, low + step, ...`, including the endpoint
/// when it lies within 1e-9 of a lattice point. Values are interpolated
/// between the two ends so decimal grids land on their shortest floating
/// representation.
pub fn traversal_values(low: f64, high: f64, step: f64) -> Vec<f64> {
    assert!(low < high, "low must be below high");
    assert!(step > 0.0, "step must be positive");
    let count = ((high - low) / step + 1e-9).floor() as usize + 1;
    if count == 1 {
        return vec![low];
    }
    let mut last = low + (count - 1) as f64 * step;
    if (last - high).abs() <= 1e-9 {
        last = high;
    }
    let denom = (count - 1) as f64;
    (0..count)
        .map(|i| (low * (denom - i as f64) + last * i as f64) / denom)
        .collect()
}

/// Standard normal base latent from a seeded generator.
pub fn sample_base_latent(seed: i64, latent_dim: usize) -> LatentVector {
    assert!(latent_dim >= 1);
    let mut rng = SplitMix64::from_seed_i64(seed);
    LatentVector::new(rng.normal_vec(latent_dim))
}

/// The decoded frames of one sweep, with the grid values used.
#[derive(Debug, Clone, PartialEq)]
pub struct TraversalSequence {
    pub spec: TraversalSpec,
    pub assigned_values: Vec<f64>,
    pub frames: Vec<ImageSample>,
    pub sequence_id: String,
}

/// Decodes the sweep: each frame is the base latent with `dim_index`
/// replaced by one grid value, every other coordinate untouched.
pub fn generate_sequence(
    params: &VaeParameters,
    spec: &TraversalSpec,
    sequence_id: impl Into<String>,
) -> Result<TraversalSequence, TraversalError> {
    if spec.base.len() != params.latent_dim {
        return Err(TraversalError::DimensionMismatch {
            expected: params.latent_dim,
            found: spec.base.len(),
        });
    }
    if spec.dim_index >= params.latent_dim {
        return Err(TraversalError::DimensionMismatch {
            expected: params.latent_dim,
            found: spec.dim_index,
        });
    }
    let assigned_values = spec.values();
    let mut frames = Vec::with_capacity(assigned_values.len());
    for &v in &assigned_values {
        let mut z = spec.base.values.clone();
        z[spec.dim_index] = v;
        let frame = decode(params, &z).expect("latent length was checked");
        frames.push(frame);
    }
    Ok(TraversalSequence {
        spec: spec.clone(),
        assigned_values,
        frames,
        sequence_id: sequence_id.into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GridOptions {
    pub low: f64,
    pub high: f64,
    pub step: f64,
    pub model_label: String,
    /// Resample a fresh base latent per dimension instead of sharing one.
    pub resample_per_dim: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self {
            low: DEFAULT_LOW,
            high: DEFAULT_HIGH,
            step: DEFAULT_STEP,
            model_label: "model".to_string(),
            resample_per_dim: false,
        }
    }
}

/// One sequence per latent dimension. By default all sequences share a
/// single base latent sampled once from `seed`; sequence ids encode the
/// model label, seed, and dimension index.
pub fn generate_grid(
    params: &VaeParameters,
    seed: i64,
    options: &GridOptions,
) -> Vec<TraversalSequence> {
    let m = params.latent_dim;
    let shared_base = sample_base_latent(seed, m);
    (0..m)
        .map(|dim| {
            let base = if options.resample_per_dim {
                sample_base_latent(seed ^ (dim as i64 + 1), m)
            } else {
                shared_base.clone()
            };
            let spec = TraversalSpec {
                base,
                dim_index: dim,
                low: options.low,
                high: options.high,
                step: options.step,
            };
            let id = format!("{}-s{}-z{}", options.model_label, seed, dim);
            generate_sequence(params, &spec, id).expect("grid dimensions are in range")
        })
        .collect()
}

/// Horizontal concatenation of the frames in ascending assigned value,
/// separated by columns of intensity 1.0.
pub fn compose_strip(
    sequence: &TraversalSequence,
    separator_px: usize,
) -> Result<ImageSample, TraversalError> {
    let frames = &sequence.frames;
    assert!(!frames.is_empty(), "sequence has no frames");
    let height = frames[0].height;
    let width = frames[0].width;
    if frames
        .iter()
        .any(|f| f.height != height || f.width != width)
    {
        return Err(TraversalError::SizeMismatch);
    }
    let k = frames.len();
    let out_width = k * width + (k - 1) * separator_px;
    let mut pixels = vec![1.0f64; height * out_width];
    for (j, frame) in frames.iter().enumerate() {
        let x_offset = j * (width + separator_px);
        for row in 0..height {
            let src = &frame.pixels[row * width..(row + 1) * width];
            let dst_start = row * out_width + x_offset;
            pixels[dst_start..dst_start + width].copy_from_slice(src);
        }
    }
    Ok(ImageSample::new(pixels, height, out_width))
}
