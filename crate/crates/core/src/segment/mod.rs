//! Particle segmentation: k-means in YCbCr, particle-cluster selection,
//! hole filling and region extraction.

pub mod kmeans;
pub mod regions;

use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::colorspace::{luma, rgb_to_ycbcr, RgbPixel};
use crate::error::{Error, Result};
use crate::ingest::check_dims;

pub use kmeans::{kmeans, Feature, KMeansParams, KMeansResult};
pub use regions::{label_regions, px_area_to_um2, BinaryMask, LabelMap, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    Ycbcr,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub k: usize,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub rng_seed: u64,
    pub min_area_px: u32,
    pub feature_space: FeatureSpace,
    pub fill_holes: bool,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            k: 3,
            max_iterations: 300,
            convergence_tol: 1e-4,
            rng_seed: 42,
            min_area_px: 9,
            feature_space: FeatureSpace::Ycbcr,
            fill_holes: true,
        }
    }
}

impl SegmentationConfig {
    /// Four clusters, for samples with residue on the filter.
    pub fn turbid() -> Self {
        Self {
            k: 4,
            ..Self::default()
        }
    }

    /// Drops components below 100 px, for micro-sized particles.
    pub fn small_particles() -> Self {
        Self {
            min_area_px: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        if self.min_area_px < 1 {
            return Err(Error::InvalidConfig("min_area_px must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("max_iterations must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            rng_seed: self.rng_seed,
            ..KMeansParams::default()
        }
    }
}

/// Per-pixel feature vectors in the requested space, raster order.
pub fn pixel_features(image: &RgbImage, space: FeatureSpace) -> Vec<Feature> {
    image
        .pixels()
        .map(|p| match space {
            FeatureSpace::Ycbcr => rgb_to_ycbcr(RgbPixel::from(*p)).to_array(),
            FeatureSpace::Rgb => [p.0[0] as f64, p.0[1] as f64, p.0[2] as f64],
        })
        .collect()
}

/// The brightest cluster by luminance. Ties go to the lowest index.
pub fn select_particle_cluster(centroids: &[Feature], space: FeatureSpace) -> usize {
    let y = |c: &Feature| match space {
        FeatureSpace::Ycbcr => c[0],
        FeatureSpace::Rgb => luma(c[0], c[1], c[2]),
    };
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate().skip(1) {
        if y(c) > y(&centroids[best]) {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub mask: BinaryMask,
    pub clustering: KMeansResult,
    pub particle_cluster: usize,
}

fn particle_pixels(image: &RgbImage, cfg: &SegmentationConfig) -> Result<(BinaryMask, KMeansResult, usize)> {
    let features = pixel_features(image, cfg.feature_space);
    let clustering = kmeans(&features, &cfg.kmeans_params())?;
    // an empty cluster may sit on a duplicate of the particle centroid; it must not win
    let sizes = clustering.cluster_sizes();
    let candidates: Vec<Feature> = clustering
        .centroids
        .iter()
        .zip(&sizes)
        .map(|(c, &n)| if n > 0 { *c } else { [f64::NEG_INFINITY, 0.0, 0.0] })
        .collect();
    let particle = select_particle_cluster(&candidates, cfg.feature_space);
    let mask = BinaryMask {
        width: image.width(),
        height: image.height(),
        bitmap: clustering.assignments.iter().map(|&a| a == particle).collect(),
    };
    Ok((mask, clustering, particle))
}

/// Builds the particle mask for one condition image, optionally merged with
/// the particle pixels of a higher-exposure companion capture.
pub fn build_mask(
    image: &RgbImage,
    cfg: &SegmentationConfig,
    high_ev_image: Option<&RgbImage>,
) -> Result<MaskOutcome> {
    cfg.validate()?;
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::InvalidConfig("image is empty".into()));
    }
    if let Some(hi) = high_ev_image {
        check_dims(image.width(), image.height(), hi.width(), hi.height(), " (high-EV companion)")?;
    }
    let (mut mask, clustering, particle_cluster) = particle_pixels(image, cfg)?;
    if let Some(hi) = high_ev_image {
        let (extra, _, _) = particle_pixels(hi, cfg)?;
        mask.union_with(&extra);
    }
    if cfg.fill_holes {
        mask.fill_holes();
    }
    Ok(MaskOutcome {
        mask,
        clustering,
        particle_cluster,
    })
}

/// `build_mask` followed by `label_regions`.
pub fn segment_image(
    image: &RgbImage,
    cfg: &SegmentationConfig,
    high_ev_image: Option<&RgbImage>,
) -> Result<(MaskOutcome, LabelMap)> {
    let outcome = build_mask(image, cfg, high_ev_image)?;
    let labels = label_regions(&outcome.mask, cfg.min_area_px);
    Ok((outcome, labels))
}

/// 8-bit single-channel raster with 0 / 255.
pub fn mask_to_image(mask: &BinaryMask) -> ImageBuffer<Luma<u8>, Vec<u8>> {
    ImageBuffer::from_fn(mask.width, mask.height, |x, y| Luma([if mask.get(x, y) { 255 } else { 0 }]))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    mask_to_image(mask)
        .save(path)
        .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), message: e.to_string() })
}

/// 16-bit single-channel raster of region ids.
pub fn label_map_to_image(map: &LabelMap) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    if map.regions.len() > u16::MAX as usize {
        return Err(Error::TooManyRegions(map.regions.len()));
    }
    Ok(ImageBuffer::from_fn(map.width, map.height, |x, y| Luma([map.get(x, y) as u16])))
}

pub fn save_label_map(map: &LabelMap, path: &Path) -> Result<()> {
    label_map_to_image(map)?
        .save(path)
        .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_label_map(path: &Path) -> Result<LabelMap> {
    let img = image::open(path)
        .map_err(|e| Error::ImageDecode { path: path.to_path_buf(), message: e.to_string() })?
        .to_luma16();
    let (w, h) = img.dimensions();
    Ok(LabelMap::from_labels(w, h, img.pixels().map(|p| p.0[0] as u32).collect()))
}

/// Region table: id, areas, centroid, minor axis and inclusive bbox.
pub fn write_region_csv<W: Write>(regions: &[Region], scale_um_per_px: f64, out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::parse("region table", e);
    wtr.write_record([
        "id", "area_px", "area_um2", "centroid_x", "centroid_y", "minor_axis_px", "minor_axis_um", "bbox_x0",
        "bbox_y0", "bbox_x1", "bbox_y1",
    ])
    .map_err(csv_err)?;
    for r in regions {
        wtr.write_record([
            r.id.to_string(),
            r.area_px.to_string(),
            format!("{:.3}", r.area_um2(scale_um_per_px)),
            format!("{:.3}", r.centroid.0),
            format!("{:.3}", r.centroid.1),
            format!("{:.3}", r.minor_axis_px),
            format!("{:.3}", r.minor_axis_px * scale_um_per_px),
            r.bbox.0.to_string(),
            r.bbox.1.to_string(),
            r.bbox.2.to_string(),
            r.bbox.3.to_string(),
        ])
        .map_err(csv_err)?;
    }
    wtr.flush().map_err(|e| Error::parse("region table", e))?;
    Ok(())
}
