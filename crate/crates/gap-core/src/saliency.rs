//! Error-neuron saliency maps.
//!
//! Each output location compares the flattened image patch centered there
//! with the eight patches shifted one pixel in the cardinal and diagonal
//! directions, and aggregates the L2 distances (min by default). Locations
//! whose local content stands out from its surround score high.

use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::image::Image;

/// Neighbor offsets of the 8-connected surround, in fixed row-major order.
/// The order is part of the kernel contract: sum aggregation and distance
/// accumulation must be reproducible bit for bit.
pub const SURROUND_8: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Min,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BorderPolicy {
    ZeroFill,
    Replicate,
}

/// Patch distance function. Only L2 is implemented; the enum keeps the
/// config format forward-compatible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFn {
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNeuronConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    pub aggregation: Aggregation,
    pub border: BorderPolicy,
    pub distance: DistanceFn,
}

impl Default for ErrorNeuronConfig {
    fn default() -> Self {
        Self {
            patch_height: 5,
            patch_width: 5,
            aggregation: Aggregation::Min,
            border: BorderPolicy::ZeroFill,
            distance: DistanceFn::L2,
        }
    }
}

impl ErrorNeuronConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_height % 2 == 0 || self.patch_width % 2 == 0 {
            return Err(GapError::Config(format!(
                "patch size {}x{} must be odd so patches center on a pixel",
                self.patch_height, self.patch_width
            )));
        }
        Ok(())
    }
}

/// Scalar saliency grid. `iteration` tags which glimpsing step produced it
/// (0 for a freshly extracted map).
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub iteration: usize,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data, iteration: 0 }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Rescales to an 8-bit grayscale image for PGM export. An all-zero map
    /// stays all zero.
    pub fn to_image_normalized(&self) -> Image {
        let max = self.data.iter().cloned().fold(0.0_f64, f64::max);
        let data = if max > 0.0 {
            self.data.iter().map(|&v| v / max).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Image::new(self.height, self.width, 1, data).expect("normalized map is in range")
    }
}

/// Anything that can turn an image into a saliency map. Error neurons are
/// the only implementation shipped; the trait keeps the glimpsing loop
/// agnostic of the saliency source.
pub trait SaliencyExtractor: Sync {
    fn extract(&self, img: &Image) -> Result<SaliencyMap>;
}

impl SaliencyExtractor for ErrorNeuronConfig {
    fn extract(&self, img: &Image) -> Result<SaliencyMap> {
        compute_saliency(img, self)
    }
}

#[inline]
fn read(img: &Image, y: isize, x: isize, c: usize, border: BorderPolicy) -> f64 {
    match border {
        BorderPolicy::ZeroFill => img.get_or_zero(y, x, c),
        BorderPolicy::Replicate => img.get_replicate(y, x, c),
    }
}

/// Extracts the patch centered at `(y, x)` as a flat vector, row-major over
/// (row, column, channel). Out-of-image pixels follow the border policy.
pub fn extract_patch(
    img: &Image,
    y: usize,
    x: usize,
    patch_height: usize,
    patch_width: usize,
    border: BorderPolicy,
) -> Result<Vec<f64>> {
    if y >= img.height() || x >= img.width() {
        return Err(GapError::Input(format!(
            "patch center ({y}, {x}) outside {}x{} image",
            img.height(),
            img.width()
        )));
    }
    let hh = (patch_height / 2) as isize;
    let hw = (patch_width / 2) as isize;
    let mut out = Vec::with_capacity(patch_height * patch_width * img.channels());
    for du in -hh..=hh {
        for dv in -hw..=hw {
            for c in 0..img.channels() {
                out.push(read(img, y as isize + du, x as isize + dv, c, border));
            }
        }
    }
    Ok(out)
}

/// Computes the error-neuron saliency map.
///
/// The kernel precomputes, per surround offset, the squared pixel
/// differences between the image and its shifted copy on a padded domain,
/// then box-sums them per output location. The accumulation order (patch
/// row, patch column, channel; offsets in `SURROUND_8` order) matches a
/// naive patch-by-patch evaluation exactly, so results are bit-identical to
/// the direct formula.
pub fn compute_saliency(img: &Image, cfg: &ErrorNeuronConfig) -> Result<SaliencyMap> {
    cfg.validate()?;
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let hh = (cfg.patch_height / 2) as isize;
    let hw = (cfg.patch_width / 2) as isize;

    // Padded squared-difference buffer for one offset:
    // diff2[(py, px, c)] = (I(y, x, c) - I(y + dy, x + dx, c))^2
    // with (y, x) = (py - hh, px - hw) ranging over the padded domain.
    let ph = h + 2 * hh as usize;
    let pw = w + 2 * hw as usize;
    let mut diff2 = vec![0.0_f64; ph * pw * ch];
    let mut out = vec![0.0_f64; h * w];
    let mut first = true;

    for &(dy, dx) in SURROUND_8.iter() {
        for py in 0..ph {
            let y = py as isize - hh;
            for px in 0..pw {
                let x = px as isize - hw;
                for c in 0..ch {
                    let a = read(img, y, x, c, cfg.border);
                    let b = read(img, y + dy, x + dx, c, cfg.border);
                    let d = a - b;
                    diff2[(py * pw + px) * ch + c] = d * d;
                }
            }
        }
        for i in 0..h {
            for j in 0..w {
                // Box sum over the patch, same element order as the naive
                // two-patch loop.
                let mut acc = 0.0_f64;
                for u in 0..cfg.patch_height {
                    let py = i + u;
                    let row = (py * pw + j) * ch;
                    for t in &diff2[row..row + cfg.patch_width * ch] {
                        acc += *t;
                    }
                }
                let dist = acc.sqrt();
                let cell = &mut out[i * w + j];
                match cfg.aggregation {
                    Aggregation::Min => {
                        if first || dist < *cell {
                            *cell = dist;
                        }
                    }
                    Aggregation::Sum => *cell += dist,
                }
            }
        }
        first = false;
    }

    Ok(SaliencyMap::new(h, w, out))
}
