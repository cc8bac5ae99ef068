//! Glimpse sensors: extract the visual content around a glimpse location.
//!
//! The multi-scale sensor stacks same-sized patches of growing receptive
//! field (larger regions area-averaged down), the log-polar sensor samples
//! on an exponential-radius grid so resolution falls off with distance from
//! the fixation.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{GapError, Result};
use crate::image::Image;
use crate::policy::GlimpseLocation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SensorConfig {
    /// `regions[k]` is the source window for scale k, area-averaged down to
    /// `glimpse x glimpse`. `regions[0]` must equal `glimpse` so scale one
    /// is the raw crop.
    MultiScale { glimpse: usize, regions: Vec<usize> },
    /// Angle along rows, log radius along columns, `radius` the outermost
    /// sampled ring.
    LogPolar { glimpse: usize, radius: f64 },
}

impl SensorConfig {
    pub fn multi_scale_default() -> Self {
        SensorConfig::MultiScale { glimpse: 15, regions: vec![15, 30, 45] }
    }

    pub fn log_polar_default() -> Self {
        SensorConfig::LogPolar { glimpse: 21, radius: 48.0 }
    }

    pub fn glimpse_size(&self) -> usize {
        match self {
            SensorConfig::MultiScale { glimpse, .. } => *glimpse,
            SensorConfig::LogPolar { glimpse, .. } => *glimpse,
        }
    }

    pub fn scales(&self) -> usize {
        match self {
            SensorConfig::MultiScale { regions, .. } => regions.len(),
            SensorConfig::LogPolar { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SensorConfig::MultiScale { glimpse, regions } => {
                if *glimpse == 0 || glimpse % 2 == 0 {
                    return Err(GapError::Config(format!(
                        "glimpse size {glimpse} must be odd and positive"
                    )));
                }
                if regions.is_empty() {
                    return Err(GapError::Config("multi-scale sensor needs >= 1 region".into()));
                }
                if regions[0] != *glimpse {
                    return Err(GapError::Config(format!(
                        "first region {} must equal the glimpse size {glimpse}",
                        regions[0]
                    )));
                }
                for pair in regions.windows(2) {
                    if pair[1] <= pair[0] {
                        return Err(GapError::Config(
                            "region sizes must strictly increase with scale".into(),
                        ));
                    }
                }
                for r in regions {
                    if r % glimpse != 0 {
                        return Err(GapError::Config(format!(
                            "region {r} must be a multiple of the glimpse size {glimpse} \
                             for exact area averaging"
                        )));
                    }
                }
                Ok(())
            }
            SensorConfig::LogPolar { glimpse, radius } => {
                if *glimpse == 0 {
                    return Err(GapError::Config("glimpse size must be positive".into()));
                }
                if *radius < 2.0 {
                    return Err(GapError::Config(format!("log-polar radius {radius} must be >= 2")));
                }
                Ok(())
            }
        }
    }
}

/// Pixels sampled around one glimpse location, values in `[0, 1]`.
/// Layout is `data[((s * height + u) * width + v) * channels + c]`; the
/// log-polar sensor always has one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GlimpseContent {
    pub scales: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub source: GlimpseLocation,
}

impl GlimpseContent {
    #[inline]
    pub fn get(&self, s: usize, u: usize, v: usize, c: usize) -> f64 {
        self.data[((s * self.height + u) * self.width + v) * self.channels + c]
    }

    /// One scale as a standalone single-channel image (for dumps). Channels
    /// beyond the first are ignored.
    pub fn scale_image(&self, s: usize) -> Image {
        let mut data = Vec::with_capacity(self.height * self.width);
        for u in 0..self.height {
            for v in 0..self.width {
                data.push(self.get(s, u, v, 0));
            }
        }
        Image::new(self.height, self.width, 1, data).expect("glimpse values in range")
    }
}

fn check_loc(img: &Image, loc: GlimpseLocation) -> Result<()> {
    if loc.y >= img.height() || loc.x >= img.width() {
        return Err(GapError::Input(format!(
            "glimpse location ({}, {}) outside {}x{} image",
            loc.y,
            loc.x,
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Multi-scale extraction: per scale, crop the region centered at `loc`
/// (zero fill outside the image) and box-average it down to glimpse size.
pub fn multiscale_glimpse(
    img: &Image,
    loc: GlimpseLocation,
    glimpse: usize,
    regions: &[usize],
) -> Result<GlimpseContent> {
    check_loc(img, loc)?;
    let ch = img.channels();
    let mut data = Vec::with_capacity(regions.len() * glimpse * glimpse * ch);
    for &region in regions {
        let factor = region / glimpse;
        let y0 = loc.y as isize - ((region - 1) / 2) as isize;
        let x0 = loc.x as isize - ((region - 1) / 2) as isize;
        if factor == 1 {
            for u in 0..glimpse {
                for v in 0..glimpse {
                    for c in 0..ch {
                        data.push(img.get_or_zero(y0 + u as isize, x0 + v as isize, c));
                    }
                }
            }
        } else {
            let norm = (factor * factor) as f64;
            for u in 0..glimpse {
                for v in 0..glimpse {
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for by in 0..factor {
                            let sy = y0 + (u * factor + by) as isize;
                            for bx in 0..factor {
                                let sx = x0 + (v * factor + bx) as isize;
                                acc += img.get_or_zero(sy, sx, c);
                            }
                        }
                        data.push(acc / norm);
                    }
                }
            }
        }
    }
    Ok(GlimpseContent {
        scales: regions.len(),
        height: glimpse,
        width: glimpse,
        channels: ch,
        data,
        source: loc,
    })
}

/// Continuous source point sampled for log-polar output cell `(u, v)`:
/// radius `exp(v * ln R / w_g)`, angle `2 pi u / h_g`. Returns `(y, x)`.
pub fn logpolar_source_point(
    loc: GlimpseLocation,
    u: usize,
    v: usize,
    glimpse: usize,
    radius: f64,
) -> (f64, f64) {
    let rho = (v as f64 * radius.ln() / glimpse as f64).exp();
    let theta = TAU * u as f64 / glimpse as f64;
    (loc.y as f64 + rho * theta.sin(), loc.x as f64 + rho * theta.cos())
}

#[inline]
fn bilinear(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let wy = y - y0;
    let wx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let p00 = img.get_or_zero(y0, x0, c);
    let p01 = img.get_or_zero(y0, x0 + 1, c);
    let p10 = img.get_or_zero(y0 + 1, x0, c);
    let p11 = img.get_or_zero(y0 + 1, x0 + 1, c);
    p00 * (1.0 - wy) * (1.0 - wx)
        + p01 * (1.0 - wy) * wx
        + p10 * wy * (1.0 - wx)
        + p11 * wy * wx
}

/// Log-polar extraction with bilinear interpolation; source points outside
/// the image contribute zero.
pub fn logpolar_glimpse(
    img: &Image,
    loc: GlimpseLocation,
    glimpse: usize,
    radius: f64,
) -> Result<GlimpseContent> {
    check_loc(img, loc)?;
    let ch = img.channels();
    let mut data = Vec::with_capacity(glimpse * glimpse * ch);
    let h = img.height() as f64;
    let w = img.width() as f64;
    for u in 0..glimpse {
        for v in 0..glimpse {
            let (sy, sx) = logpolar_source_point(loc, u, v, glimpse, radius);
            for c in 0..ch {
                let val = if sy < 0.0 || sx < 0.0 || sy > h - 1.0 || sx > w - 1.0 {
                    0.0
                } else {
                    bilinear(img, sy, sx, c)
                };
                data.push(val);
            }
        }
    }
    Ok(GlimpseContent {
        scales: 1,
        height: glimpse,
        width: glimpse,
        channels: ch,
        data,
        source: loc,
    })
}

pub fn sense(img: &Image, loc: GlimpseLocation, cfg: &SensorConfig) -> Result<GlimpseContent> {
    cfg.validate()?;
    match cfg {
        SensorConfig::MultiScale { glimpse, regions } => {
            multiscale_glimpse(img, loc, *glimpse, regions)
        }
        SensorConfig::LogPolar { glimpse, radius } => {
            logpolar_glimpse(img, loc, *glimpse, *radius)
        }
    }
}

/// Extracts glimpse contents for every location of a trace.
pub fn sense_trace(
    img: &Image,
    locations: &[GlimpseLocation],
    cfg: &SensorConfig,
) -> Result<Vec<GlimpseContent>> {
    locations.iter().map(|&loc| sense(img, loc, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loc(y: usize, x: usize) -> GlimpseLocation {
        GlimpseLocation { y, x }
    }

    #[test]
    fn constant_image_constant_content_all_scales() {
        let img = Image::new(64, 64, 1, vec![0.3; 64 * 64]).unwrap();
        let g = multiscale_glimpse(&img, loc(32, 32), 5, &[5, 10, 15]).unwrap();
        assert_eq!(g.scales, 3);
        assert!(g.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn scale_one_is_exact_crop() {
        let data: Vec<f64> = (0..32 * 32).map(|i| (i % 256) as f64 / 255.0).collect();
        let img = Image::new(32, 32, 1, data).unwrap();
        let g = multiscale_glimpse(&img, loc(16, 12), 7, &[7, 14]).unwrap();
        for u in 0..7usize {
            for v in 0..7usize {
                let (sy, sx) = (16 + u - 3, 12 + v - 3);
                assert_eq!(g.get(0, u, v, 0), img.get(sy, sx, 0), "crop ({u},{v})");
            }
        }
    }

    #[test]
    fn corner_glimpse_is_mostly_zero_fill() {
        let img = Image::new(32, 32, 1, vec![1.0; 32 * 32]).unwrap();
        let g = multiscale_glimpse(&img, loc(0, 0), 5, &[5]).unwrap();
        // Center at the corner: rows/cols at negative source indices are 0,
        // the bottom-right 3x3 holds real pixels.
        let mut real = 0;
        for u in 0..5usize {
            for v in 0..5usize {
                let expect = if u >= 2 && v >= 2 { 1.0 } else { 0.0 };
                assert_eq!(g.get(0, u, v, 0), expect);
                real += (expect == 1.0) as usize;
            }
        }
        assert_eq!(real, 9);
    }

    #[test]
    fn downsample_matches_area_average_oracle() {
        let data: Vec<f64> = (0..64 * 64).map(|i| ((i * 31) % 97) as f64 / 96.0).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        let center = loc(30, 33);
        let g = multiscale_glimpse(&img, center, 15, &[15, 30]).unwrap();
        // Independent direct evaluation of the box average for scale 1.
        let y0 = center.y as isize - 14;
        let x0 = center.x as isize - 14;
        for u in 0..15usize {
            for v in 0..15usize {
                let mut acc = 0.0;
                for by in 0..2 {
                    for bx in 0..2 {
                        acc += img.get_or_zero(
                            y0 + (u * 2 + by) as isize,
                            x0 + (v * 2 + bx) as isize,
                            0,
                        );
                    }
                }
                let expect = acc / 4.0;
                assert!((g.get(1, u, v, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkerboard_downsamples_to_half_gray() {
        // 2-pixel checkerboard. Center chosen so the 30x30 region starts at
        // an odd offset: every 2x2 averaging block then straddles four
        // squares and averages to exactly 0.5.
        let mut img = Image::zeros(64, 64, 1);
        for y in 0..64 {
            for x in 0..64 {
                if ((y / 2) + (x / 2)) % 2 == 0 {
                    img.set(y, x, 0, 1.0);
                }
            }
        }
        let center = loc(16, 16); // region start = 16 - 14 = 2... shift to odd
        let g = multiscale_glimpse(&img, loc(15, 15), 15, &[15, 30]).unwrap();
        let _ = (center, &g);
        // start = 15 - 14 = 1 (odd): all blocks straddle.
        for u in 0..15usize {
            for v in 0..15usize {
                assert_eq!(g.get(1, u, v, 0), 0.5, "block ({u},{v})");
            }
        }
    }

    #[test]
    fn logpolar_constant_image_constant_output() {
        let img = Image::new(33, 33, 1, vec![0.6; 33 * 33]).unwrap();
        let g = logpolar_glimpse(&img, loc(16, 16), 12, 12.0).unwrap();
        assert!(g.data.iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn logpolar_bright_blob_lights_low_radius_columns() {
        let mut img = Image::zeros(65, 65, 1);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                img.set((32 + dy) as usize, (32 + dx) as usize, 0, 1.0);
            }
        }
        let g = logpolar_glimpse(&img, loc(32, 32), 16, 24.0).unwrap();
        for u in 0..16usize {
            // v = 0 samples at radius 1, inside the 3x3 blob.
            assert!((g.get(0, u, 0, 0) - 1.0).abs() < 1e-12, "row {u}");
            // Outermost column samples at radius 24, far outside the blob.
            assert_eq!(g.get(0, u, 15, 0), 0.0, "row {u}");
        }
    }

    #[test]
    fn logpolar_radius_strictly_increases_along_columns() {
        let center = loc(10, 10);
        let mut prev = 0.0;
        for v in 0..20 {
            let (sy, sx) = logpolar_source_point(center, 0, v, 20, 48.0);
            let rho = (sy - 10.0).hypot(sx - 10.0);
            assert!(rho > prev, "column {v}: {rho} <= {prev}");
            prev = rho;
        }
    }

    fn angular_pattern(dy: f64, dx: f64) -> f64 {
        if dy == 0.0 && dx == 0.0 {
            return 0.5;
        }
        let phi = dy.atan2(dx);
        let r = dy.hypot(dx);
        0.5 + 0.25 * (2.0 * phi).cos() + 0.2 * (r / 1.7).cos()
    }

    #[test]
    fn logpolar_rotation_becomes_cyclic_row_shift() {
        // 90-degree rotation maps the pixel lattice onto itself, so the
        // rotated image is an exact array permutation and the log-polar
        // outputs must match row-shifted within float rounding.
        let m = 20isize;
        let size = (2 * m + 1) as usize;
        let glimpse = 16; // multiple of 4 -> 90 degrees is 4 rows
        let radius = 16.0;
        let mut base = Image::zeros(size, size, 1);
        let mut rotated = Image::zeros(size, size, 1);
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as isize - m, x as isize - m);
                base.set(y, x, 0, angular_pattern(dy as f64, dx as f64).clamp(0.0, 1.0));
            }
        }
        // rotated(loc + (dx, dy)) = base(loc + R_{-90}(dx, dy)), i.e. the
        // source index is (y - dx, x + dy) about the center.
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as isize - m, x as isize - m);
                let sy = (m - dx) as usize;
                let sx = (m + dy) as usize;
                rotated.set(y, x, 0, base.get(sy, sx, 0));
            }
        }
        let center = loc(m as usize, m as usize);
        let a = logpolar_glimpse(&base, center, glimpse, radius).unwrap();
        let b = logpolar_glimpse(&rotated, center, glimpse, radius).unwrap();
        let shift = glimpse / 4;
        for u in 0..glimpse {
            for v in 0..glimpse {
                let expect = a.get(0, u, v, 0);
                let got = b.get(0, (u + shift) % glimpse, v, 0);
                assert!(
                    (expect - got).abs() < 1e-6,
                    "row {u} col {v}: {expect} vs {got}"
                );
            }
        }
    }

    #[test]
    fn logpolar_scaling_shifts_radial_columns() {
        // Content scaled by R^(1/w_g) about the center shifts the output by
        // one radial column, within the bilinear interpolation bound
        // 2 * max_gradient * pixel.
        let m = 30isize;
        let size = (2 * m + 1) as usize;
        let glimpse = 12;
        let radius = 20.0_f64;
        let s = radius.powf(1.0 / glimpse as f64);
        let radial = |r: f64| 0.5 + 0.3 * (r / 2.5).cos();
        let mut base = Image::zeros(size, size, 1);
        let mut scaled = Image::zeros(size, size, 1);
        for y in 0..size {
            for x in 0..size {
                let r = ((y as isize - m) as f64).hypot((x as isize - m) as f64);
                base.set(y, x, 0, radial(r).clamp(0.0, 1.0));
                scaled.set(y, x, 0, radial(r / s).clamp(0.0, 1.0));
            }
        }
        let center = loc(m as usize, m as usize);
        let a = logpolar_glimpse(&base, center, glimpse, radius).unwrap();
        let b = logpolar_glimpse(&scaled, center, glimpse, radius).unwrap();
        let max_gradient = 0.3 / 2.5;
        let tol = 2.0 * max_gradient;
        for u in 0..glimpse {
            for v in 1..glimpse {
                let expect = a.get(0, u, v - 1, 0);
                let got = b.get(0, u, v, 0);
                assert!(
                    (expect - got).abs() < tol,
                    "row {u} col {v}: {expect} vs {got}"
                );
            }
        }
    }

    #[test]
    fn sensors_are_pure_functions() {
        let data: Vec<f64> = (0..64 * 64).map(|i| ((i * 7) % 100) as f64 / 99.0).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        let cfg = SensorConfig::multi_scale_default();
        assert_eq!(
            sense(&img, loc(20, 20), &cfg).unwrap(),
            sense(&img, loc(20, 20), &cfg).unwrap()
        );
        let cfg = SensorConfig::LogPolar { glimpse: 11, radius: 16.0 };
        assert_eq!(
            sense(&img, loc(20, 20), &cfg).unwrap(),
            sense(&img, loc(20, 20), &cfg).unwrap()
        );
    }

    #[test]
    fn config_validation_rejects_bad_regions() {
        assert!(SensorConfig::MultiScale { glimpse: 15, regions: vec![15, 25] }
            .validate()
            .is_err());
        assert!(SensorConfig::MultiScale { glimpse: 15, regions: vec![30, 45] }
            .validate()
            .is_err());
        assert!(SensorConfig::MultiScale { glimpse: 15, regions: vec![15, 45, 30] }
            .validate()
            .is_err());
        assert!(SensorConfig::LogPolar { glimpse: 15, radius: 1.0 }.validate().is_err());
        assert!(SensorConfig::multi_scale_default().validate().is_ok());
    }

    #[test]
    fn out_of_bounds_location_errors() {
        let img = Image::zeros(16, 16, 1);
        let cfg = SensorConfig::multi_scale_default();
        assert!(sense(&img, loc(16, 0), &cfg).is_err());
    }
}
