//! Glimpse policy: winner-takes-all location selection and
//! inhibition-of-return masking, iterated into a glimpse trace.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GapError, Result};
use crate::image::Image;
use crate::saliency::{SaliencyExtractor, SaliencyMap};

/// Integer pixel location of a glimpse. `y` is the row, `x` the column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlimpseLocation {
    pub y: usize,
    pub x: usize,
}

impl GlimpseLocation {
    /// Maps pixel coordinates to `[-1, 1]^2` as `(x_norm, y_norm)`.
    /// Single-pixel extents map to 0.
    pub fn normalized(&self, height: usize, width: usize) -> [f64; 2] {
        let norm = |p: usize, extent: usize| {
            if extent <= 1 {
                0.0
            } else {
                2.0 * p as f64 / (extent - 1) as f64 - 1.0
            }
        };
        [norm(self.x, width), norm(self.y, height)]
    }
}

/// Inhibition-of-return mask shape.
///
/// `Hard` zeroes a disc of the given radius. `Soft` suppresses by
/// `1 - exp(-epsilon * d)` with `d` the Euclidean distance normalized by the
/// map diagonal, so the mask is 0 at the glimpsed pixel and approaches 1
/// with distance. `literal: true` selects the unmodified Gaussian-kernel
/// form `exp(-epsilon * d)` instead, which preserves the visited location
/// and suppresses everything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskKind {
    Hard { radius: f64 },
    Soft { epsilon: f64, literal: bool },
}

impl MaskKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            MaskKind::Hard { radius } if *radius < 1.0 => {
                Err(GapError::Config(format!("hard mask radius {radius} must be >= 1")))
            }
            MaskKind::Soft { epsilon, .. } if *epsilon <= 0.0 => {
                Err(GapError::Config(format!("soft mask epsilon {epsilon} must be > 0")))
            }
            _ => Ok(()),
        }
    }

    /// Mask value at squared pixel distance `d2` from the glimpsed location.
    fn value(&self, d2: f64, diagonal: f64) -> f64 {
        match *self {
            MaskKind::Hard { radius } => {
                if d2 <= radius * radius {
                    0.0
                } else {
                    1.0
                }
            }
            MaskKind::Soft { epsilon, literal } => {
                let d = d2.sqrt() / diagonal;
                let kernel = (-epsilon * d).exp();
                if literal {
                    kernel
                } else {
                    1.0 - kernel
                }
            }
        }
    }
}

/// How locations are chosen at each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Policy {
    /// WTA over the current saliency map.
    Standard,
    /// WTA location snapped to the nearest point of a coarse grid with the
    /// given stride before masking.
    RegularGrid { stride: usize },
    /// Seeded uniform-random locations; the saliency map is ignored for
    /// selection but still masked so repeats stay unlikely.
    Random { seed: u64 },
    /// All centers of non-overlapping `stride`-sized patches in row-major
    /// order, ignoring saliency. The trace length equals the number of grid
    /// cells regardless of the configured iteration count.
    VitGrid { stride: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapConfig {
    /// Number of glimpse iterations T.
    pub iterations: usize,
    pub mask: MaskKind,
    pub policy: Policy,
}

impl GapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(GapError::Config("glimpse count must be >= 1".into()));
        }
        self.mask.validate()?;
        match self.policy {
            Policy::RegularGrid { stride } | Policy::VitGrid { stride } if stride == 0 => {
                Err(GapError::Config("grid stride must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            iterations: 15,
            mask: MaskKind::Hard { radius: 5.0 },
            policy: Policy::Standard,
        }
    }
}

/// Ordered glimpse locations for one image. `exhausted` is set when the
/// saliency map ran out of unmasked salient content and WTA fell back to
/// the row-major tie-break.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlimpseTrace {
    pub locations: Vec<GlimpseLocation>,
    pub exhausted: bool,
}

/// Winner-takes-all: the location of the maximum salience. Ties break to
/// the smallest row-major index.
pub fn wta(map: &SaliencyMap) -> Result<GlimpseLocation> {
    let mut best: Option<(f64, usize)> = None;
    for (idx, &v) in map.data.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some((bv, _)) if v <= bv => {}
            _ => best = Some((v, idx)),
        }
    }
    let (_, idx) = best.ok_or_else(|| GapError::Numeric("all-NaN saliency map".into()))?;
    Ok(GlimpseLocation { y: idx / map.width, x: idx % map.width })
}

/// Applies the IoR mask centered at `loc`, returning the suppressed map.
/// The input map is left untouched.
pub fn apply_ior(map: &SaliencyMap, loc: GlimpseLocation, mask: MaskKind) -> SaliencyMap {
    let diagonal = ((map.height * map.height + map.width * map.width) as f64).sqrt();
    let mut out = map.clone();
    for y in 0..map.height {
        for x in 0..map.width {
            let dy = y as f64 - loc.y as f64;
            let dx = x as f64 - loc.x as f64;
            let m = mask.value(dy * dy + dx * dx, diagonal);
            out.data[y * map.width + x] *= m;
        }
    }
    out.iteration = map.iteration + 1;
    out
}

/// Grid coordinates for stride-spaced patch centers covering one axis.
fn grid_centers(extent: usize, stride: usize) -> Vec<usize> {
    let n = (extent / stride).max(1);
    (0..n).map(|k| (stride - 1) / 2 + k * stride).filter(|&c| c < extent).collect()
}

fn snap_to_grid(v: usize, centers: &[usize]) -> usize {
    let mut best = centers[0];
    let mut best_d = v.abs_diff(best);
    for &c in &centers[1..] {
        let d = v.abs_diff(c);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Runs the glimpsing loop: select a location, suppress its neighborhood,
/// repeat for the configured number of iterations. Deterministic given
/// (image, configs).
pub fn run_gap<E: SaliencyExtractor + ?Sized>(
    img: &Image,
    extractor: &E,
    cfg: &GapConfig,
) -> Result<GlimpseTrace> {
    cfg.validate()?;

    if let Policy::VitGrid { stride } = cfg.policy {
        let ys = grid_centers(img.height(), stride);
        let xs = grid_centers(img.width(), stride);
        let mut locations = Vec::with_capacity(ys.len() * xs.len());
        for &y in &ys {
            for &x in &xs {
                locations.push(GlimpseLocation { y, x });
            }
        }
        return Ok(GlimpseTrace { locations, exhausted: false });
    }

    let mut map = extractor.extract(img)?;
    let mut rng = match cfg.policy {
        Policy::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        _ => None,
    };
    let mut locations = Vec::with_capacity(cfg.iterations);
    let mut exhausted = false;

    for _ in 0..cfg.iterations {
        let mut loc = match (&cfg.policy, &mut rng) {
            (Policy::Random { .. }, Some(rng)) => GlimpseLocation {
                y: rng.random_range(0..img.height()),
                x: rng.random_range(0..img.width()),
            },
            _ => {
                if map.data.iter().all(|&v| v <= 0.0) {
                    exhausted = true;
                }
                wta(&map)?
            }
        };
        if let Policy::RegularGrid { stride } = cfg.policy {
            let ys = grid_centers(img.height(), stride);
            let xs = grid_centers(img.width(), stride);
            loc = GlimpseLocation { y: snap_to_grid(loc.y, &ys), x: snap_to_grid(loc.x, &xs) };
        }
        map = apply_ior(&map, loc, cfg.mask);
        locations.push(loc);
    }

    Ok(GlimpseTrace { locations, exhausted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::saliency::ErrorNeuronConfig;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map_from(h: usize, w: usize, data: Vec<f64>) -> SaliencyMap {
        SaliencyMap::new(h, w, data)
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SaliencyMap {
        map_from(h, w, (0..h * w).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn wta_finds_unique_max() {
        let mut data = vec![0.1; 8 * 8];
        data[3 * 8 + 5] = 0.9;
        let loc = wta(&map_from(8, 8, data)).unwrap();
        assert_eq!(loc, GlimpseLocation { y: 3, x: 5 });
    }

    #[test]
    fn wta_ties_break_row_major() {
        let loc = wta(&map_from(4, 4, vec![0.5; 16])).unwrap();
        assert_eq!(loc, GlimpseLocation { y: 0, x: 0 });
    }

    #[test]
    fn wta_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let map = random_map(&mut rng, 9, 13);
            let loc = wta(&map).unwrap();
            // Exhaustive scan oracle with explicit row-major tie handling.
            let mut best = (f64::NEG_INFINITY, 0usize, 0usize);
            for y in 0..9 {
                for x in 0..13 {
                    if map.get(y, x) > best.0 {
                        best = (map.get(y, x), y, x);
                    }
                }
            }
            assert_eq!((loc.y, loc.x), (best.1, best.2));
        }
    }

    #[test]
    fn wta_all_nan_is_numeric_error() {
        let map = map_from(2, 2, vec![f64::NAN; 4]);
        assert!(matches!(wta(&map), Err(GapError::Numeric(_))));
    }

    #[test]
    fn hard_mask_zeroes_disc_and_keeps_outside() {
        let map = map_from(16, 16, vec![1.0; 256]);
        let loc = GlimpseLocation { y: 8, x: 8 };
        let out = apply_ior(&map, loc, MaskKind::Hard { radius: 5.0 });
        for y in 0..16usize {
            for x in 0..16usize {
                let d2 = (y as f64 - 8.0).powi(2) + (x as f64 - 8.0).powi(2);
                if d2 <= 25.0 {
                    assert_eq!(out.get(y, x), 0.0);
                } else {
                    assert_eq!(out.get(y, x), 1.0);
                }
            }
        }
        // Distance exactly 6 along an axis is untouched.
        assert_eq!(out.get(8, 14), 1.0);
        // Input map unmodified.
        assert!(map.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn soft_mask_zeroes_glimpsed_location() {
        let map = map_from(8, 8, vec![1.0; 64]);
        let loc = GlimpseLocation { y: 4, x: 4 };
        let out = apply_ior(&map, loc, MaskKind::Soft { epsilon: 450.0, literal: false });
        assert_eq!(out.get(4, 4), 0.0);
        // Monotone toward 1 with distance along a row; a small epsilon keeps
        // the falloff visible at f64 resolution.
        let wide = apply_ior(&map, loc, MaskKind::Soft { epsilon: 5.0, literal: false });
        assert_eq!(wide.get(4, 4), 0.0);
        assert!(wide.get(4, 5) < wide.get(4, 7));
        assert!(wide.get(4, 7) < 1.0);
    }

    #[test]
    fn literal_soft_mask_preserves_glimpsed_location() {
        let map = map_from(8, 8, vec![1.0; 64]);
        let loc = GlimpseLocation { y: 4, x: 4 };
        let out = apply_ior(&map, loc, MaskKind::Soft { epsilon: 450.0, literal: true });
        assert_eq!(out.get(4, 4), 1.0);
        assert!(out.get(4, 7) < 1.0);
    }

    #[test]
    fn hard_mask_matches_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let map = random_map(&mut rng, 12, 12);
        let loc = GlimpseLocation { y: 5, x: 7 };
        let out = apply_ior(&map, loc, MaskKind::Hard { radius: 3.0 });
        for y in 0..12usize {
            for x in 0..12usize {
                let d = ((y as f64 - 5.0).powi(2) + (x as f64 - 7.0).powi(2)).sqrt();
                let expect = if d <= 3.0 { 0.0 } else { map.get(y, x) };
                assert_eq!(out.get(y, x), expect);
            }
        }
    }

    #[test]
    fn two_dots_glimpsed_brighter_first() {
        // Two isolated bright dots; the brighter one wins iteration 1, IoR
        // masks it, and the dimmer dot wins iteration 2.
        let mut img = Image::zeros(32, 32, 1);
        img.set(8, 8, 0, 1.0);
        img.set(22, 20, 0, 0.6);
        let cfg = GapConfig { iterations: 2, ..Default::default() };
        let trace = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
        assert_eq!(trace.locations.len(), 2);
        // A single-pixel dot produces a 3x3 plateau of equal maximal
        // salience around it, so the tie-break may land one pixel off.
        let d0 = (trace.locations[0].y as f64 - 8.0).hypot(trace.locations[0].x as f64 - 8.0);
        let d1 = (trace.locations[1].y as f64 - 22.0).hypot(trace.locations[1].x as f64 - 20.0);
        assert!(d0 <= 1.5, "first glimpse should land on the bright dot: {:?}", trace);
        assert!(d1 <= 1.5, "second glimpse should land on the dim dot: {:?}", trace);
        assert!(!trace.exhausted);
    }

    #[test]
    fn constant_image_exhausts_and_falls_back() {
        // An empty (all-zero) image has zero saliency everywhere: WTA falls
        // back to the row-major tie-break and the trace is flagged.
        let img = Image::zeros(16, 16, 1);
        let cfg = GapConfig { iterations: 3, ..Default::default() };
        let trace = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
        assert!(trace.exhausted);
        assert_eq!(trace.locations.len(), 3);
        assert_eq!(trace.locations[0], GlimpseLocation { y: 0, x: 0 });
        // A constant nonzero image with a replicate border behaves the same.
        let img = Image::new(16, 16, 1, vec![0.4; 256]).unwrap();
        let en = crate::saliency::ErrorNeuronConfig {
            border: crate::saliency::BorderPolicy::Replicate,
            ..Default::default()
        };
        let trace = run_gap(&img, &en, &cfg).unwrap();
        assert!(trace.exhausted);
        assert_eq!(trace.locations[0], GlimpseLocation { y: 0, x: 0 });
    }

    #[test]
    fn hard_mask_trace_locations_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let data: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
            let img = Image::new(64, 64, 1, data).unwrap();
            let cfg = GapConfig { iterations: 15, ..Default::default() };
            let trace = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
            assert!(!trace.exhausted);
            for i in 0..trace.locations.len() {
                for j in 0..i {
                    let a = trace.locations[i];
                    let b = trace.locations[j];
                    let d = (a.y as f64 - b.y as f64).hypot(a.x as f64 - b.x as f64);
                    assert!(d > 5.0, "glimpses {j} and {i} too close: {d}");
                }
            }
        }
    }

    #[test]
    fn monotone_suppression_under_both_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let map = random_map(&mut rng, 16, 16);
        for mask in [
            MaskKind::Hard { radius: 4.0 },
            MaskKind::Soft { epsilon: 450.0, literal: false },
            MaskKind::Soft { epsilon: 450.0, literal: true },
        ] {
            let out = apply_ior(&map, GlimpseLocation { y: 7, x: 9 }, mask);
            for (after, before) in out.data.iter().zip(&map.data) {
                assert!(after <= before);
            }
        }
    }

    #[test]
    fn traces_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let data: Vec<f64> = (0..32 * 32).map(|_| rng.random::<f64>()).collect();
        let img = Image::new(32, 32, 1, data).unwrap();
        let cfg = GapConfig::default();
        let a = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
        let b = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn regular_grid_policy_emits_grid_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>()).collect();
        let img = Image::new(64, 64, 1, data).unwrap();
        let cfg = GapConfig {
            iterations: 8,
            policy: Policy::RegularGrid { stride: 15 },
            ..Default::default()
        };
        let trace = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
        let centers = grid_centers(64, 15);
        for loc in &trace.locations {
            assert!(centers.contains(&loc.y) && centers.contains(&loc.x), "{loc:?}");
        }
    }

    #[test]
    fn vit_grid_enumerates_all_patch_centers_row_major() {
        let img = Image::zeros(60, 60, 1);
        let cfg = GapConfig {
            iterations: 1,
            policy: Policy::VitGrid { stride: 15 },
            ..Default::default()
        };
        let trace = run_gap(&img, &ErrorNeuronConfig::default(), &cfg).unwrap();
        assert_eq!(trace.locations.len(), 16);
        assert_eq!(trace.locations[0], GlimpseLocation { y: 7, x: 7 });
        assert_eq!(trace.locations[1], GlimpseLocation { y: 7, x: 22 });
        assert_eq!(trace.locations[15], GlimpseLocation { y: 52, x: 52 });
    }

    #[test]
    fn normalized_locations_cover_unit_square() {
        let loc = GlimpseLocation { y: 0, x: 63 };
        assert_eq!(loc.normalized(64, 64), [1.0, -1.0]);
        let mid = GlimpseLocation { y: 31, x: 31 };
        let n = mid.normalized(63, 63);
        assert!((n[0] - 0.0).abs() < 1e-12 && (n[1] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn translation_shifts_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let block: Vec<f64> = (0..400).map(|_| rng.random::<f64>()).collect();
        let place = |oy: usize, ox: usize| {
            let mut img = Image::zeros(48, 48, 1);
            for u in 0..20 {
                for v in 0..20 {
                    img.set(oy + u, ox + v, 0, block[u * 20 + v]);
                }
            }
            img
        };
        let cfg = GapConfig { iterations: 4, ..Default::default() };
        let a = run_gap(&place(8, 8), &ErrorNeuronConfig::default(), &cfg).unwrap();
        let b = run_gap(&place(11, 10), &ErrorNeuronConfig::default(), &cfg).unwrap();
        for (la, lb) in a.locations.iter().zip(&b.locations) {
            assert_eq!(lb.y, la.y + 3);
            assert_eq!(lb.x, la.x + 2);
        }
    }
}
