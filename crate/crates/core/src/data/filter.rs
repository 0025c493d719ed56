//! Background rejection for RGB patches by counting stain-coloured pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbRaster {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB raster needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Patches with fewer purple pixels than this are background.
    pub min_purple: usize,
    /// A pixel is purple when red and blue both exceed green by this much.
    pub margin: u8,
    /// Expected patch edge length.
    pub patch_size: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_purple: 100,
            margin: 16,
            patch_size: 224,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub purple_count: usize,
}

pub fn filter_background_patch(raster: &RgbRaster, config: &FilterConfig) -> Result<FilterDecision> {
    if raster.width != config.patch_size || raster.height != config.patch_size {
        return Err(Error::Domain(format!(
            "patch is {}x{}, expected {}x{}",
            raster.width, raster.height, config.patch_size, config.patch_size
        )));
    }
    let m = u16::from(config.margin);
    let purple_count = raster
        .pixels
        .chunks_exact(3)
        .filter(|p| {
            let (r, g, b) = (u16::from(p[0]), u16::from(p[1]), u16::from(p[2]));
            r >= g + m && b >= g + m
        })
        .count();
    Ok(FilterDecision {
        keep: purple_count >= config.min_purple,
        purple_count,
    })
}

/// Parses a binary PPM (`P6`, maxval 255).
pub fn parse_ppm(bytes: &[u8]) -> Result<RgbRaster> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos as u64, "truncated PPM header"));
        }
        fields.push((start, &bytes[start..pos]));
    }
    if fields[0].1 != b"P6" {
        return Err(Error::format(0, "not a binary PPM (P6)"));
    }
    let number = |(at, f): (usize, &[u8])| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(at as u64, "bad PPM header field"))
    };
    let width = number(fields[1])?;
    let height = number(fields[2])?;
    if number(fields[3])? != 255 {
        return Err(Error::format(fields[3].0 as u64, "only maxval 255 is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let want = width * height * 3;
    if bytes.len() < pos + want {
        return Err(Error::format(bytes.len() as u64, "truncated PPM raster"));
    }
    RgbRaster::new(width, height, bytes[pos..pos + want].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_purple(count: usize) -> RgbRaster {
        let mut r = RgbRaster::filled(224, 224, [255, 255, 255]);
        for i in 0..count {
            r.set(i % 224, i / 224, [150, 60, 170]);
        }
        r
    }

    #[test]
    fn white_patch_is_background() {
        let d = filter_background_patch(&with_purple(0), &FilterConfig::default()).unwrap();
        assert_eq!(d, FilterDecision { keep: false, purple_count: 0 });
    }

    #[test]
    fn fully_stained_patch() {
        let r = RgbRaster::filled(224, 224, [128, 64, 128]);
        let d = filter_background_patch(&r, &FilterConfig::default()).unwrap();
        assert_eq!(d, FilterDecision { keep: true, purple_count: 50_176 });
    }

    #[test]
    fn threshold_boundary() {
        let c = FilterConfig::default();
        assert!(!filter_background_patch(&with_purple(99), &c).unwrap().keep);
        assert!(filter_background_patch(&with_purple(100), &c).unwrap().keep);
    }

    #[test]
    fn margin_is_inclusive() {
        let mut r = RgbRaster::filled(224, 224, [0, 0, 0]);
        r.set(0, 0, [116, 100, 116]);
        r.set(1, 0, [115, 100, 200]);
        let d = filter_background_patch(&r, &FilterConfig::default()).unwrap();
        assert_eq!(d.purple_count, 1);
    }

    #[test]
    fn wrong_shape() {
        let r = RgbRaster::filled(100, 224, [0, 0, 0]);
        assert!(matches!(
            filter_background_patch(&r, &FilterConfig::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn ppm_parsing() {
        let mut bytes = b"P6\n# comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let r = parse_ppm(&bytes).unwrap();
        assert_eq!((r.width, r.height), (2, 1));
        assert_eq!(r.pixels, vec![1, 2, 3, 4, 5, 6]);
        assert!(parse_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(parse_ppm(b"P5\n1 1\n255\n\0").is_err());
    }
}
