//! Image sources: a procedurally generated factored-shapes collection and the
//! IDX container format used by the MNIST distribution.
//!
//! Shapes are rasterized deterministically from factor indices (shape kind,
//! scale, rotation, X/Y position) with 4x4 supersampled anti-aliasing, so the
//! same factors always produce bit-identical pixels.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

const IDX3_MAGIC: u32 = 0x0000_0803;
const IDX1_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DatasetError {
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("payload truncated: need {needed} bytes, have {available}")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("label {0} outside 0..=9")]
    LabelOutOfRange(u8),
}

/// A grayscale image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl ImageSample {
    pub fn new(pixels: Vec<f64>, height: usize, width: usize) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count mismatch");
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            pixels,
            height,
            width,
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Ellipse,
    Heart,
}

impl Shape {
    pub fn as_str(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Ellipse => "ellipse",
            Shape::Heart => "heart",
        }
    }
}

/// Ground-truth generative factors of one shapes sample.
///
/// Index ranges follow the factored 2D sprites convention: 3 shapes, 6
/// scales, 40 rotations, 32 positions per axis. Color is constant white.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorAssignment {
    pub shape: Shape,
    pub scale_index: u8,
    pub rotation_index: u8,
    pub pos_x_index: u8,
    pub pos_y_index: u8,
}

impl FactorAssignment {
    pub fn new(
        shape: Shape,
        scale_index: u8,
        rotation_index: u8,
        pos_x_index: u8,
        pos_y_index: u8,
    ) -> Self {
        assert!(scale_index <= 5, "scale_index out of range");
        assert!(rotation_index <= 39, "rotation_index out of range");
        assert!(pos_x_index <= 31, "pos_x_index out of range");
        assert!(pos_y_index <= 31, "pos_y_index out of range");
        Self {
            shape,
            scale_index,
            rotation_index,
            pos_x_index,
            pos_y_index,
        }
    }
}

/// An ordered image collection with optional parallel factor or label lists.
#[derive(Debug, Clone)]
pub struct ImageDataset {
    pub samples: Vec<ImageSample>,
    pub factors: Option<Vec<FactorAssignment>>,
    pub labels: Option<Vec<u8>>,
}

impl ImageDataset {
    pub fn new(
        samples: Vec<ImageSample>,
        factors: Option<Vec<FactorAssignment>>,
        labels: Option<Vec<u8>>,
    ) -> Self {
        if let Some(first) = samples.first() {
            assert!(
                samples
                    .iter()
                    .all(|s| s.height == first.height && s.width == first.width),
                "all samples must share one image size"
            );
        }
        if let Some(f) = &factors {
            assert_eq!(f.len(), samples.len(), "factors list length mismatch");
        }
        if let Some(l) = &labels {
            assert_eq!(l.len(), samples.len(), "labels list length mismatch");
        }
        Self {
            samples,
            factors,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn inside(shape: Shape, u: f64, v: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= 1.0 && v.abs() <= 1.0,
        Shape::Ellipse => {
            let vy = v / 0.6;
            u * u + vy * vy <= 1.0
        }
        Shape::Heart => {
            // Implicit curve (x^2 + y^2 - 1)^3 - x^2 y^3 <= 0, y axis up.
            let y = -v;
            let a = u * u + y * y - 1.0;
            a * a * a - u * u * y * y * y <= 0.0
        }
    }
}

/// Rasterizes one shape at `side x side` pixels.
///
/// Factor decoding: scale maps linearly to a half-width in `[0.1, 0.3] *
/// side`, rotation to `[0, 2pi)` in 40 steps, and positions to the central
/// `[0.15, 0.85] * side` band so shapes never clip the border. Edges are
/// anti-aliased by counting a 4x4 grid of sample points per pixel.
pub fn render_shape(factors: &FactorAssignment, side: usize) -> ImageSample {
    assert!(side >= 16, "side must be at least 16");
    let s = side as f64;
    let half_width = (0.1 + 0.2 * factors.scale_index as f64 / 5.0) * s;
    let theta = std::f64::consts::TAU * factors.rotation_index as f64 / 40.0;
    let center_x = (0.15 + 0.7 * factors.pos_x_index as f64 / 31.0) * s;
    let center_y = (0.15 + 0.7 * factors.pos_y_index as f64 / 31.0) * s;
    let (sin_t, cos_t) = theta.sin_cos();

    let mut pixels = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let mut hits = 0u32;
            for sub_y in 0..4 {
                for sub_x in 0..4 {
                    let px = x as f64 + (sub_x as f64 + 0.5) / 4.0;
                    let py = y as f64 + (sub_y as f64 + 0.5) / 4.0;
                    let dx = px - center_x;
                    let dy = py - center_y;
                    // Rotate by -theta into the shape frame, then scale.
                    let u = (dx * cos_t + dy * sin_t) / half_width;
                    let v = (-dx * sin_t + dy * cos_t) / half_width;
                    if inside(factors.shape, u, v) {
                        hits += 1;
                    }
                }
            }
            pixels[y * side + x] = f64::from(hits) / 16.0;
        }
    }
    ImageSample::new(pixels, side, side)
}

/// Samples `count` factor assignments uniformly and renders them.
pub fn generate_shapes_dataset(count: usize, side: usize, seed: i64) -> ImageDataset {
    assert!(count >= 1, "count must be at least 1");
    let mut rng = SplitMix64::from_seed_i64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut factors = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = match rng.next_range(3) {
            0 => Shape::Square,
            1 => Shape::Ellipse,
            _ => Shape::Heart,
        };
        let assignment = FactorAssignment::new(
            shape,
            rng.next_range(6) as u8,
            rng.next_range(40) as u8,
            rng.next_range(32) as u8,
            rng.next_range(32) as u8,
        );
        samples.push(render_shape(&assignment, side));
        factors.push(assignment);
    }
    ImageDataset::new(samples, Some(factors), None)
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DatasetError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DatasetError::TruncatedPayload {
            needed: end,
            available: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX3 image payload (big-endian header, one byte per pixel).
pub fn load_idx_images(bytes: &[u8]) -> Result<ImageDataset, DatasetError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX3_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX3_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(DatasetError::TruncatedPayload {
            needed,
            available: bytes.len(),
        });
    }
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let start = 16 + i * rows * cols;
        let pixels = bytes[start..start + rows * cols]
            .iter()
            .map(|&b| f64::from(b) / 255.0)
            .collect();
        samples.push(ImageSample::new(pixels, rows, cols));
    }
    Ok(ImageDataset::new(samples, None, None))
}

/// Parses an IDX1 label payload into digits `0..=9`.
pub fn load_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DatasetError> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX1_MAGIC {
        return Err(DatasetError::BadMagic {
            expected: IDX1_MAGIC,
            found: magic,
        });
    }
    let count = read_be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(DatasetError::TruncatedPayload {
            needed,
            available: bytes.len(),
        });
    }
    let mut labels = Vec::with_capacity(count);
    for &b in &bytes[8..8 + count] {
        if b > 9 {
            return Err(DatasetError::LabelOutOfRange(b));
        }
        labels.push(b);
    }
    Ok(labels)
}

/// Partitions a seeded permutation of all indices into consecutive batches.
/// The final short batch is retained.
pub fn minibatches(dataset: &ImageDataset, batch_size: usize, seed: i64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    assert!(
        batch_size <= dataset.len(),
        "batch_size exceeds dataset size"
    );
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = SplitMix64::from_seed_i64(seed);
    rng.shuffle(&mut indices);
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered_factors(shape: Shape, scale_index: u8, rotation_index: u8) -> FactorAssignment {
        FactorAssignment::new(shape, scale_index, rotation_index, 16, 16)
    }

    #[test]
    fn max_scale_square_has_unit_interior() {
        let img = render_shape(&centered_factors(Shape::Square, 5, 0), 64);
        // Half-width 0.3 * 64 = 19.2 around center (0.15 + 0.7 * 16/31) * 64.
        let cx = (0.15 + 0.7 * 16.0 / 31.0) * 64.0;
        let cy = cx;
        let mut interior = 0;
        for y in 0..64 {
            for x in 0..64 {
                let inside_x = (x as f64 + 0.5 - cx).abs() < 17.0;
                let inside_y = (y as f64 + 0.5 - cy).abs() < 17.0;
                if inside_x && inside_y {
                    assert_eq!(img.get(y, x), 1.0, "pixel ({y},{x}) not filled");
                    interior += 1;
                }
            }
        }
        assert!(interior > 900, "interior region unexpectedly small");
    }

    #[test]
    fn rasterization_is_deterministic() {
        let f = centered_factors(Shape::Heart, 3, 17);
        assert_eq!(render_shape(&f, 64), render_shape(&f, 64));
    }

    #[test]
    fn square_quarter_turn_matches_within_antialiasing() {
        let plain = render_shape(&centered_factors(Shape::Square, 5, 0), 64);
        let turned = render_shape(&centered_factors(Shape::Square, 5, 10), 64);
        for (a, b) in plain.pixels.iter().zip(&turned.pixels) {
            assert!(
                (a - b).abs() <= 1.0 / 16.0 + 1e-12,
                "difference {} beyond one supersample",
                (a - b).abs()
            );
        }
    }

    #[test]
    fn shapes_dataset_is_deterministic() {
        let a = generate_shapes_dataset(1, 32, 7);
        let b = generate_shapes_dataset(1, 32, 7);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.factors, b.factors);
    }

    #[test]
    fn shapes_dataset_length_contract() {
        let d = generate_shapes_dataset(3, 16, 1);
        assert_eq!(d.samples.len(), 3);
        assert_eq!(d.factors.as_ref().unwrap().len(), 3);
        assert!(d.labels.is_none());
    }

    #[test]
    fn shape_frequencies_within_three_sigma() {
        let d = generate_shapes_dataset(10_000, 16, 0);
        let mut counts = [0usize; 3];
        for f in d.factors.as_ref().unwrap() {
            counts[match f.shape {
                Shape::Square => 0,
                Shape::Ellipse => 1,
                Shape::Heart => 2,
            }] += 1;
        }
        let expected = 10_000.0 / 3.0;
        let sigma = (10_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - expected).abs() <= 3.0 * sigma,
                "shape count {c} outside 3 sigma of {expected}"
            );
        }
    }

    fn idx3_fixture() -> Vec<u8> {
        let mut bytes = vec![0, 0, 8, 3];
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128, 0, 7, 9, 11, 13]);
        bytes
    }

    #[test]
    fn idx3_fixture_parses_with_scaled_intensities() {
        let d = load_idx_images(&idx3_fixture()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.samples[0].height, 2);
        assert_eq!(d.samples[0].width, 2);
        assert_eq!(d.samples[0].pixels, vec![0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert_eq!(
            d.samples[1].pixels,
            vec![7.0 / 255.0, 9.0 / 255.0, 11.0 / 255.0, 13.0 / 255.0]
        );
    }

    #[test]
    fn idx3_rejects_label_magic() {
        let mut bytes = idx3_fixture();
        bytes[3] = 1;
        match load_idx_images(&bytes) {
            Err(DatasetError::BadMagic { found, .. }) => assert_eq!(found, IDX1_MAGIC),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn idx3_rejects_truncation() {
        let mut bytes = vec![0, 0, 8, 3];
        bytes.extend_from_slice(&5u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&1u32.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 4]); // four images' worth for five
        assert!(matches!(
            load_idx_images(&bytes),
            Err(DatasetError::TruncatedPayload { .. })
        ));
    }

    fn idx1_fixture(labels: &[u8]) -> Vec<u8> {
        let mut bytes = vec![0, 0, 8, 1];
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        bytes
    }

    #[test]
    fn idx1_roundtrip_and_edges() {
        assert_eq!(load_idx_labels(&idx1_fixture(&[3, 1, 4])).unwrap(), vec![3, 1, 4]);
        assert_eq!(load_idx_labels(&idx1_fixture(&[])).unwrap(), Vec::<u8>::new());
        assert_eq!(
            load_idx_labels(&idx1_fixture(&[2, 12])),
            Err(DatasetError::LabelOutOfRange(12))
        );
    }

    fn tiny_dataset(n: usize) -> ImageDataset {
        let img = ImageSample::new(vec![0.0; 4], 2, 2);
        ImageDataset::new(vec![img; n], None, None)
    }

    #[test]
    fn minibatches_partition_all_indices() {
        let batches = minibatches(&tiny_dataset(10), 4, 99);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn minibatches_deterministic_per_seed() {
        let d = tiny_dataset(10);
        assert_eq!(minibatches(&d, 4, 5), minibatches(&d, 4, 5));
        assert_ne!(
            minibatches(&d, 4, 5)
                .into_iter()
                .flatten()
                .collect::<Vec<_>>(),
            minibatches(&d, 4, 6)
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn idx3_payload(images: &[Vec<u8>], rows: u32, cols: u32) -> Vec<u8> {
            let mut bytes = vec![0, 0, 8, 3];
            bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
            bytes.extend_from_slice(&rows.to_be_bytes());
            bytes.extend_from_slice(&cols.to_be_bytes());
            for img in images {
                bytes.extend_from_slice(img);
            }
            bytes
        }

        proptest! {
            #[test]
            fn idx_roundtrip_is_exact(
                rows in 1u32..5,
                cols in 1u32..5,
                count in 0usize..5,
                seed in 0u64..1000,
            ) {
                let mut rng = SplitMix64::new(seed);
                let images: Vec<Vec<u8>> = (0..count)
                    .map(|_| (0..rows * cols).map(|_| rng.next_u64() as u8).collect())
                    .collect();
                let parsed = load_idx_images(&idx3_payload(&images, rows, cols)).unwrap();
                prop_assert_eq!(parsed.len(), count);
                for (sample, raw) in parsed.samples.iter().zip(&images) {
                    let back: Vec<u8> = sample
                        .pixels
                        .iter()
                        .map(|&v| (v * 255.0).round() as u8)
                        .collect();
                    prop_assert_eq!(&back, raw);
                }
            }

            #[test]
            fn minibatches_cover_every_index_once(
                count in 1usize..40,
                batch in 1usize..40,
                seed in -50i64..50,
            ) {
                prop_assume!(batch <= count);
                let batches = minibatches(&tiny_dataset(count), batch, seed);
                for b in &batches[..batches.len() - 1] {
                    prop_assert_eq!(b.len(), batch);
                }
                let mut all: Vec<usize> = batches.into_iter().flatten().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..count).collect::<Vec<_>>());
            }
        }
    }
}
