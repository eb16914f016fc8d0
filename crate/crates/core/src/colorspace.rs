//! Color conversions and exposure calculators.
//!
//! All conversions return real-valued channels. Quantization back to 8 bits
//! only happens when a raster is written out.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbPixel {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl RgbPixel {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }
}

impl From<[u8; 3]> for RgbPixel {
    fn from(c: [u8; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }
}

impl From<image::Rgb<u8>> for RgbPixel {
    fn from(c: image::Rgb<u8>) -> Self {
        Self::new(c.0[0], c.0[1], c.0[2])
    }
}

/// Full-range YCbCr, every channel in `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct YCbCrPixel {
    pub y: f64,
    pub cb: f64,
    pub cr: f64,
}

impl YCbCrPixel {
    pub fn to_array(self) -> [f64; 3] {
        [self.y, self.cb, self.cr]
    }
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvPixel {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl HsvPixel {
    pub const fn new(h: f64, s: f64, v: f64) -> Self {
        Self { h, s, v }
    }
}

/// Luminance of an RGB triple with the BT.601 weights.
pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Full-range BT.601 RGB to YCbCr.
pub fn rgb_to_ycbcr(p: RgbPixel) -> YCbCrPixel {
    let (r, g, b) = (p.r as f64, p.g as f64, p.b as f64);
    let y = luma(r, g, b);
    // written on channel differences so that gray maps to exactly 128
    let cb = 128.0 + 0.168736 * (b - r) + 0.331264 * (b - g);
    let cr = 128.0 + 0.418688 * (r - g) + 0.081312 * (r - b);
    YCbCrPixel {
        y: y.clamp(0.0, 255.0),
        cb: cb.clamp(0.0, 255.0),
        cr: cr.clamp(0.0, 255.0),
    }
}

/// Hexcone RGB to HSV. Achromatic pixels get `h = 0`.
pub fn rgb_to_hsv(p: RgbPixel) -> HsvPixel {
    let (r, g, b) = (p.r as f64, p.g as f64, p.b as f64);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max / 255.0;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return HsvPixel { h: 0.0, s, v };
    }
    let sector = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        2.0 + (b - r) / delta
    } else {
        4.0 + (r - g) / delta
    };
    let mut h = 60.0 * sector;
    if h >= 360.0 {
        h -= 360.0;
    }
    HsvPixel { h, s, v }
}

/// Inverse hexcone conversion, rounding to the nearest 8-bit level.
pub fn hsv_to_rgb(p: HsvPixel) -> RgbPixel {
    let [r, g, b] = hsv_to_rgb_f64(p);
    let q = |c: f64| (c * 255.0).round().clamp(0.0, 255.0) as u8;
    RgbPixel::new(q(r), q(g), q(b))
}

/// Inverse hexcone conversion with channels in `[0, 1]`.
pub fn hsv_to_rgb_f64(p: HsvPixel) -> [f64; 3] {
    let s = p.s.clamp(0.0, 1.0);
    let v = p.v.clamp(0.0, 1.0);
    let h = p.h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Absolute exposure value `log2(N²/t) + log2(ISO/100)`.
pub fn absolute_ev(aperture_n: f64, shutter_s: f64, iso: f64) -> Result<f64> {
    if !(aperture_n > 0.0) {
        return Err(Error::NonPositive("aperture"));
    }
    if !(shutter_s > 0.0) {
        return Err(Error::NonPositive("shutter time"));
    }
    if !(iso > 0.0) {
        return Err(Error::NonPositive("ISO"));
    }
    Ok((aperture_n * aperture_n / shutter_s).log2() + (iso / 100.0).log2())
}

/// Luminous exposure in lux·seconds.
pub fn luminous_exposure(lux: f64, shutter_s: f64) -> f64 {
    lux * shutter_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ycbcr_fixed_points() {
        let g = rgb_to_ycbcr(RgbPixel::new(128, 128, 128));
        assert_abs_diff_eq!(g.y, 128.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.cb, 128.0, epsilon = 1e-9);
        assert_abs_diff_eq!(g.cr, 128.0, epsilon = 1e-9);

        let w = rgb_to_ycbcr(RgbPixel::new(255, 255, 255));
        assert_abs_diff_eq!(w.y, 255.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w.cb, 128.0, epsilon = 1e-9);
        assert_abs_diff_eq!(w.cr, 128.0, epsilon = 1e-9);
    }

    #[test]
    fn ycbcr_pure_red() {
        // 0.299*255, 128 - 0.168736*255, 128 + 127.5 clamped
        let p = rgb_to_ycbcr(RgbPixel::new(255, 0, 0));
        assert_abs_diff_eq!(p.y, 76.245, epsilon = 1e-9);
        assert_abs_diff_eq!(p.cb, 84.97232, epsilon = 1e-9);
        assert_eq!(p.cr, 255.0);
    }

    #[test]
    fn hsv_examples() {
        let red = rgb_to_hsv(RgbPixel::new(255, 0, 0));
        assert_eq!((red.h, red.s, red.v), (0.0, 1.0, 1.0));

        let gray = rgb_to_hsv(RgbPixel::new(128, 128, 128));
        assert_eq!(gray.h, 0.0);
        assert_eq!(gray.s, 0.0);
        assert_abs_diff_eq!(gray.v, 128.0 / 255.0, epsilon = 1e-12);

        let azure = rgb_to_hsv(RgbPixel::new(0, 128, 255));
        assert_abs_diff_eq!(azure.h, 60.0 * (4.0 - 128.0 / 255.0), epsilon = 1e-12);
        assert_abs_diff_eq!(azure.h, 209.88, epsilon = 0.01);
        assert_eq!((azure.s, azure.v), (1.0, 1.0));
    }

    #[test]
    fn black_is_achromatic() {
        let p = rgb_to_hsv(RgbPixel::new(0, 0, 0));
        assert_eq!((p.h, p.s, p.v), (0.0, 0.0, 0.0));
    }

    #[test]
    fn exposure_values() {
        assert_abs_diff_eq!(absolute_ev(1.0, 1.0, 100.0).unwrap(), 0.0);
        assert_abs_diff_eq!(absolute_ev(2.8, 2.0, 100.0).unwrap(), 1.97, epsilon = 0.005);
        assert_abs_diff_eq!(absolute_ev(2.8, 4.0, 100.0).unwrap(), 0.97, epsilon = 0.005);
        assert!(absolute_ev(0.0, 1.0, 100.0).is_err());
        assert!(absolute_ev(2.8, -1.0, 100.0).is_err());
        assert!(absolute_ev(2.8, 1.0, 0.0).is_err());

        assert_eq!(luminous_exposure(1.0, 4.0), 4.0);
        assert_abs_diff_eq!(luminous_exposure(70.3, 2.0), 140.6, epsilon = 1e-12);
        assert_eq!(luminous_exposure(0.0, 15.0), 0.0);
    }
}
