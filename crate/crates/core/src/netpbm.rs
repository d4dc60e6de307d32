//! Binary NetPBM I/O: P6 (PPM) for RGB images, P5 (PGM) for masks and
//! sketches. Maxval is always 255.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image, 8 bits per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

/// Row-major single-channel image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        self.pixels[y * self.width + x] = color;
    }

    pub fn to_ppm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_ppm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, data) = parse_header(bytes)?;
        if magic != "P6" {
            return Err(Error::format(format!("expected P6, got {magic}")));
        }
        if data.len() < w * h * 3 {
            return Err(Error::format("truncated PPM pixel data"));
        }
        let pixels = data[..w * h * 3]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(RgbImage {
            width: w,
            height: h,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_ppm_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_ppm_bytes(&bytes)
    }
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        GrayImage {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.pixels[y * self.width + x] = value;
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Self> {
        let (magic, w, h, data) = parse_header(bytes)?;
        if magic != "P5" {
            return Err(Error::format(format!("expected P5, got {magic}")));
        }
        if data.len() < w * h {
            return Err(Error::format("truncated PGM pixel data"));
        }
        Ok(GrayImage {
            width: w,
            height: h,
            pixels: data[..w * h].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_pgm_bytes(&bytes)
    }
}

/// Parse "Pn <w> <h> <maxval>" allowing whitespace and '#' comments, return
/// the remainder as pixel data.
fn parse_header(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    fn token(bytes: &[u8], pos: usize) -> Result<(String, usize)> {
        let mut i = pos;
        loop {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("unexpected end of NetPBM header"));
        }
        let tok = String::from_utf8_lossy(&bytes[start..i]).into_owned();
        Ok((tok, i))
    }

    let (magic, pos) = token(bytes, 0)?;
    let (w, pos) = token(bytes, pos)?;
    let (h, pos) = token(bytes, pos)?;
    let (maxval, pos) = token(bytes, pos)?;

    let w: usize = w
        .parse()
        .map_err(|_| Error::format(format!("bad width {w}")))?;
    let h: usize = h
        .parse()
        .map_err(|_| Error::format(format!("bad height {h}")))?;
    if maxval != "255" {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    if pos >= bytes.len() {
        return Err(Error::format("missing pixel data"));
    }
    Ok((magic, w, h, &bytes[pos + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let mut img = RgbImage::filled(3, 2, [10, 20, 30]);
        img.set(2, 1, [255, 0, 7]);
        let bytes = img.to_ppm_bytes();
        let back = RgbImage::from_ppm_bytes(&bytes).unwrap();
        assert_eq!(img, back);
        assert_eq!(bytes, back.to_ppm_bytes());
    }

    #[test]
    fn pgm_round_trip() {
        let mut img = GrayImage::filled(4, 4, 255);
        img.set(0, 0, 0);
        let back = GrayImage::from_pgm_bytes(&img.to_pgm_bytes()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn rejects_wrong_magic() {
        let img = GrayImage::filled(2, 2, 0);
        assert!(RgbImage::from_ppm_bytes(&img.to_pgm_bytes()).is_err());
    }

    #[test]
    fn rejects_truncated() {
        let img = RgbImage::filled(4, 4, [1, 2, 3]);
        let mut bytes = img.to_ppm_bytes();
        bytes.truncate(bytes.len() - 5);
        assert!(RgbImage::from_ppm_bytes(&bytes).is_err());
    }

    #[test]
    fn parses_comments() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x01\x02".to_vec();
        let img = GrayImage::from_pgm_bytes(&bytes).unwrap();
        assert_eq!(img.pixels, vec![1, 2]);
    }
}
