//! Images as row-major float grids in `[0, 1]`, plus binary netpbm I/O.
//!
//! Layout is channel-last: `data[(y * width + x) * channels + c]`. PGM (P5)
//! covers single-channel images, PPM (P6) three-channel ones, both with
//! maxval 255.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{GapError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from raw values, rejecting anything outside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(GapError::Input("image dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(GapError::Input(format!(
                "image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(GapError::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Pixel read with signed coordinates; out-of-bounds reads return 0.
    #[inline]
    pub fn get_or_zero(&self, y: isize, x: isize, c: usize) -> f64 {
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            0.0
        } else {
            self.get(y as usize, x as usize, c)
        }
    }

    /// Pixel read with signed coordinates; out-of-bounds reads clamp to the
    /// nearest edge pixel.
    #[inline]
    pub fn get_replicate(&self, y: isize, x: isize, c: usize) -> f64 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.get(y, x, c)
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(self.height - 1 - y, x, c));
                }
            }
        }
        out
    }
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a single-channel image as binary PGM (P5, maxval 255).
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 {
        return Err(GapError::Input(format!(
            "PGM requires 1 channel, image has {}",
            img.channels
        )));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Writes a three-channel image as binary PPM (P6, maxval 255).
pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(GapError::Input(format!(
            "PPM requires 3 channels, image has {}",
            img.channels
        )));
    }
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary PGM (P5) or PPM (P6) file; pixels land in `[0, 1]`.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    parse_pnm(&bytes).map_err(|e| GapError::Format(format!("{}: {e}", path.display())))
}

fn parse_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    if bytes.len() < 2 {
        return Err("truncated header".into());
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        _ => return Err("not a binary PGM/PPM (expected P5 or P6 magic)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = parse_header_int(bytes, &mut pos)?;
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval} (only 255)"));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height * channels;
    let raster = bytes.get(pos..pos + need).ok_or("truncated pixel data")?;
    let data: Vec<f64> = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Image::new(height, width, channels, data).map_err(|e| e.to_string())
}

fn parse_header_int(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    // Skip whitespace and '#' comment lines.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos == start {
        return Err("expected integer in header".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse()
        .map_err(|e| format!("bad header integer: {e}"))
}

/// Writes raw little-endian f64 values, the exact-value sidecar for PGM maps.
pub fn write_f64_sidecar(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_f64_sidecar(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(GapError::Format(format!(
            "{}: sidecar length {} not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        let err = Image::new(1, 2, 1, vec![0.5, 1.5]);
        assert!(matches!(err, Err(GapError::Input(_))));
    }

    #[test]
    fn pgm_round_trip_is_exact_for_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let data: Vec<f64> = (0..16).map(|i| (i * 17 % 256) as f64 / 255.0).collect();
        let img = Image::new(4, 4, 1, data).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.height(), 4);
        assert_eq!(back.width(), 4);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert_eq!(quantize(*a), quantize(*b));
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn pgm_header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# a comment\n2 2\n255\n\x00\x40\x80\xff").unwrap();
        let img = read_pnm(&path).unwrap();
        assert_eq!(img.get(0, 0, 0), 0.0);
        assert_eq!(img.get(1, 1, 0), 1.0);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let img = Image::new(2, 1, 3, vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.5]).unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_pnm(&path).unwrap();
        assert_eq!(back.channels(), 3);
        assert!((back.get(0, 0, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sidecar_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.raw");
        let vals = vec![0.0, 1.0 / 3.0, f64::MIN_POSITIVE, 123.456e-7];
        write_f64_sidecar(&path, &vals).unwrap();
        let back = read_f64_sidecar(&path).unwrap();
        for (a, b) in vals.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flips_are_involutions() {
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let img = Image::new(3, 4, 1, data).unwrap();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_vertical().flip_vertical(), img);
        assert_eq!(img.flip_horizontal().get(0, 0, 0), img.get(0, 3, 0));
    }
}
