//! Per-particle spectral fingerprints: HSV statistics of a region under every
//! illumination condition, and the feature vector used for classification.

pub mod library;

use serde::{Deserialize, Serialize};

use crate::colorspace::{rgb_to_hsv, HsvPixel, RgbPixel};
use crate::error::{Error, Result};
use crate::ingest::{ImageStack, StackManifest};
use crate::segment::Region;

pub use library::{
    build_library, load_library, save_library, CovarianceSource, FingerprintLibrary, PolymerSignature,
    LIBRARY_SCHEMA_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvStats {
    pub mean_h: f64,
    pub std_h: f64,
    pub mean_s: f64,
    pub std_s: f64,
    pub mean_v: f64,
    pub std_v: f64,
}

/// How per-condition statistics become the distance feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureEncoding {
    /// `(s̄·cos h̄, s̄·sin h̄, v̄)` per condition.
    #[default]
    Chromatic,
    /// The chromatic triple followed by `(σh in radians, σs, σv)`.
    ChromaticWithSpread,
}

impl FeatureEncoding {
    pub fn components_per_condition(self) -> usize {
        match self {
            FeatureEncoding::Chromatic => 3,
            FeatureEncoding::ChromaticWithSpread => 6,
        }
    }

    pub fn dimension(self, condition_count: usize) -> usize {
        self.components_per_condition() * condition_count
    }

    /// Encodes per-condition statistics in condition order.
    pub fn encode(self, per_condition: &[HsvStats]) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dimension(per_condition.len()));
        for s in per_condition {
            let h = s.mean_h.to_radians();
            v.push(s.mean_s * h.cos());
            v.push(s.mean_s * h.sin());
            v.push(s.mean_v);
            if self == FeatureEncoding::ChromaticWithSpread {
                v.push(s.std_h.to_radians());
                v.push(s.std_s);
                v.push(s.std_v);
            }
        }
        v
    }

    fn encode_pixel(self, px: &HsvPixel, out: &mut Vec<f64>) {
        let h = px.h.to_radians();
        out.push(px.s * h.cos());
        out.push(px.s * h.sin());
        out.push(px.v);
        if self == FeatureEncoding::ChromaticWithSpread {
            out.extend([0.0; 3]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleFingerprint {
    pub region_id: u32,
    pub condition_count: usize,
    pub encoding: FeatureEncoding,
    pub per_condition: Vec<HsvStats>,
    pub feature_vector: Vec<f64>,
    pub area_px: u32,
    pub centroid: (f64, f64),
    /// Row-major covariance of the per-pixel feature vectors, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_covariance: Option<Vec<f64>>,
}

impl ParticleFingerprint {
    pub fn dimension(&self) -> usize {
        self.feature_vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtractOptions {
    pub encoding: FeatureEncoding,
    pub pixel_covariance: bool,
}

fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let (lo, hi) = values.clone().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        return (lo, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Circular mean and standard deviation of hue in degrees.
///
/// The mean is the direction of the mean resultant vector; the spread is
/// `sqrt(-2 ln R)` with `R` its length.
pub fn circular_mean_std(hues_deg: &[f64]) -> (f64, f64) {
    let n = hues_deg.len() as f64;
    let (mut c, mut s) = (0.0, 0.0);
    for h in hues_deg {
        let r = h.to_radians();
        c += r.cos();
        s += r.sin();
    }
    c /= n;
    s /= n;
    let r = (c * c + s * s).sqrt();
    let mean = if r > 1e-12 { wrap_degrees(s.atan2(c).to_degrees()) } else { 0.0 };
    // |R| of identical unit vectors can land a few ulps below 1
    let std = if r >= 1.0 - 1e-14 {
        0.0
    } else if r <= 1e-300 {
        f64::INFINITY
    } else {
        (-2.0 * r.ln()).sqrt().to_degrees()
    };
    (mean, std)
}

/// Statistics of a set of HSV pixels. Panics on an empty slice.
pub fn hsv_stats(pixels: &[HsvPixel]) -> HsvStats {
    assert!(!pixels.is_empty(), "hsv_stats of an empty pixel set");
    let hues: Vec<f64> = pixels.iter().map(|p| p.h).collect();
    let (mean_h, std_h) = circular_mean_std(&hues);
    let (mean_s, std_s) = mean_std(pixels.iter().map(|p| p.s));
    let (mean_v, std_v) = mean_std(pixels.iter().map(|p| p.v));
    HsvStats {
        mean_h,
        std_h,
        mean_s,
        std_s,
        mean_v,
        std_v,
    }
}

fn region_hsv(stack: &ImageStack, region: &Region, condition: usize) -> Vec<HsvPixel> {
    let img = &stack.images[condition];
    region
        .pixel_list
        .iter()
        .map(|&(x, y)| rgb_to_hsv(RgbPixel::from(*img.get_pixel(x, y))))
        .collect()
}

/// Sample covariance (divisor `n - 1`, zero for a single row) of row vectors, row-major.
pub(crate) fn covariance(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    if n < 2 {
        return cov;
    }
    for r in rows {
        for i in 0..d {
            let di = r[i] - mean[i];
            if di == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += di * (r[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / denom;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cov
}

/// Measures one region under every condition of an aligned stack.
pub fn extract_fingerprint(
    stack: &ImageStack,
    region: &Region,
    manifest: &StackManifest,
    opts: ExtractOptions,
) -> Result<ParticleFingerprint> {
    if region.pixel_list.is_empty() {
        return Err(Error::EmptyRegion(region.id));
    }
    if stack.len() != manifest.condition_count() {
        return Err(Error::InvalidConfig(format!(
            "stack has {} images but manifest lists {} conditions",
            stack.len(),
            manifest.condition_count()
        )));
    }
    if let Some(&(x, y)) = region
        .pixel_list
        .iter()
        .find(|&&(x, y)| x >= stack.width || y >= stack.height)
    {
        return Err(Error::RegionOutOfBounds {
            region: region.id,
            x,
            y,
            width: stack.width,
            height: stack.height,
        });
    }

    let per_pixel: Vec<Vec<HsvPixel>> = (0..stack.len()).map(|c| region_hsv(stack, region, c)).collect();
    let per_condition: Vec<HsvStats> = per_pixel.iter().map(|px| hsv_stats(px)).collect();
    let feature_vector = opts.encoding.encode(&per_condition);

    let pixel_covariance = opts.pixel_covariance.then(|| {
        let d = feature_vector.len();
        let rows: Vec<Vec<f64>> = (0..region.pixel_list.len())
            .map(|i| {
                let mut row = Vec::with_capacity(d);
                for cond in &per_pixel {
                    opts.encoding.encode_pixel(&cond[i], &mut row);
                }
                row
            })
            .collect();
        covariance(&rows, d)
    });

    Ok(ParticleFingerprint {
        region_id: region.id,
        condition_count: manifest.condition_count(),
        encoding: opts.encoding,
        per_condition,
        feature_vector,
        area_px: region.area_px,
        centroid: region.centroid,
        pixel_covariance,
    })
}

/// Fingerprints for every region, in region order.
pub fn extract_all(
    stack: &ImageStack,
    regions: &[Region],
    manifest: &StackManifest,
    opts: ExtractOptions,
) -> Result<Vec<ParticleFingerprint>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        regions
            .par_iter()
            .map(|r| extract_fingerprint(stack, r, manifest, opts))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        regions
            .iter()
            .map(|r| extract_fingerprint(stack, r, manifest, opts))
            .collect()
    }
}

/// One row per (region, condition) with the six statistics.
pub fn write_fingerprint_csv<W: std::io::Write>(
    fingerprints: &[ParticleFingerprint],
    manifest: &StackManifest,
    out: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::parse("fingerprint table", e);
    wtr.write_record([
        "region_id", "condition", "wavelength_nm", "filter", "mean_h", "std_h", "mean_s", "std_s", "mean_v",
        "std_v",
    ])
    .map_err(err)?;
    for fp in fingerprints {
        for (cond, s) in manifest.conditions.iter().zip(&fp.per_condition) {
            wtr.write_record([
                fp.region_id.to_string(),
                cond.index.to_string(),
                cond.excitation_wavelength_nm.to_string(),
                cond.optical_filter.to_string(),
                format!("{:.4}", s.mean_h),
                format!("{:.4}", s.std_h),
                format!("{:.6}", s.mean_s),
                format!("{:.6}", s.std_s),
                format!("{:.6}", s.mean_v),
                format!("{:.6}", s.std_v),
            ])
            .map_err(err)?;
        }
    }
    wtr.flush().map_err(|e| Error::parse("fingerprint table", e))?;
    Ok(())
}
