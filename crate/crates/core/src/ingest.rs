//! Condition manifests, image stacks and translation-only registration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, RgbImage};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::colorspace::luma;
use crate::error::{Error, Result};

pub const CANONICAL_CONDITION_COUNT: usize = 20;
pub const DEFAULT_MASK_CONDITION: u32 = 12;
pub const DEFAULT_PIXEL_SCALE_UM: f64 = 11.65;
pub const DEFAULT_MAX_SHIFT_PX: u32 = 20;
pub const EXCITATION_WAVELENGTHS_NM: [u32; 5] = [265, 310, 365, 405, 450];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpticalFilter {
    None,
    Yellow,
    Orange,
    Red,
    Green,
}

impl OpticalFilter {
    pub fn as_str(self) -> &'static str {
        match self {
            OpticalFilter::None => "none",
            OpticalFilter::Yellow => "yellow",
            OpticalFilter::Orange => "orange",
            OpticalFilter::Red => "red",
            OpticalFilter::Green => "green",
        }
    }
}

impl fmt::Display for OpticalFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlluminationCondition {
    pub index: u32,
    #[serde(rename = "wavelength_nm")]
    pub excitation_wavelength_nm: u32,
    #[serde(rename = "filter")]
    pub optical_filter: OpticalFilter,
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    #[serde(
        rename = "high_ev_image",
        default,
        skip_serializing_if = "Option::is_none"
    )]
    pub high_ev_companion_path: Option<PathBuf>,
}

fn default_mask_condition() -> u32 {
    DEFAULT_MASK_CONDITION
}

fn default_pixel_scale() -> f64 {
    DEFAULT_PIXEL_SCALE_UM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_mask_condition")]
    pub mask_condition_index: u32,
    #[serde(default = "default_pixel_scale")]
    pub pixel_scale_um_per_px: f64,
    pub conditions: Vec<IlluminationCondition>,
}

/// Non-fatal conditions noticed while loading inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    NonCanonical { condition_count: usize },
    GrayscaleUpconverted { condition: u32 },
    LossyFormat { condition: u32 },
    DigestMismatch { library: String, manifest: String },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::NonCanonical { condition_count } => write!(
                f,
                "non-canonical manifest: {condition_count} conditions (canonical rig has {CANONICAL_CONDITION_COUNT})"
            ),
            Warning::GrayscaleUpconverted { condition } => write!(
                f,
                "condition {condition}: grayscale image replicated to RGB"
            ),
            Warning::LossyFormat { condition } => {
                write!(f, "condition {condition}: lossy image format")
            }
            Warning::DigestMismatch { library, manifest } => write!(
                f,
                "library was built on a different condition set (library digest {library}, manifest digest {manifest})"
            ),
        }
    }
}

impl StackManifest {
    /// Parses and validates manifest text. Relative image paths are kept as written.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let manifest: StackManifest = toml::from_str(text).map_err(|e| Error::parse("manifest", e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::parse("manifest", e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let mut seen = BTreeSet::new();
        for c in &self.conditions {
            if !(1..=CANONICAL_CONDITION_COUNT as u32).contains(&c.index) {
                return Err(Error::ConditionIndexOutOfRange(c.index));
            }
            if !seen.insert(c.index) {
                return Err(Error::DuplicateConditionIndex(c.index));
            }
            if !EXCITATION_WAVELENGTHS_NM.contains(&c.excitation_wavelength_nm) {
                return Err(Error::UnsupportedWavelength(c.excitation_wavelength_nm));
            }
        }
        if !seen.contains(&self.mask_condition_index) {
            return Err(Error::MissingMaskCondition(self.mask_condition_index));
        }
        if !(self.pixel_scale_um_per_px > 0.0) || !self.pixel_scale_um_per_px.is_finite() {
            return Err(Error::NonPositivePixelScale(self.pixel_scale_um_per_px));
        }
        Ok(())
    }

    pub fn condition_count(&self) -> usize {
        self.conditions.len()
    }

    pub fn is_canonical(&self) -> bool {
        self.conditions.len() == CANONICAL_CONDITION_COUNT
    }

    pub fn warnings(&self) -> Vec<Warning> {
        if self.is_canonical() {
            Vec::new()
        } else {
            vec![Warning::NonCanonical {
                condition_count: self.conditions.len(),
            }]
        }
    }

    /// Position of the mask condition in `conditions`.
    pub fn mask_position(&self) -> usize {
        self.conditions
            .iter()
            .position(|c| c.index == self.mask_condition_index)
            .expect("validated manifest contains its mask condition")
    }

    /// SHA-256 over the ordered (index, wavelength, filter) triples.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for c in &self.conditions {
            hasher.update(format!(
                "{}:{}:{};",
                c.index, c.excitation_wavelength_nm, c.optical_filter
            ));
        }
        hex::encode(hasher.finalize())
    }

    /// Joins relative image paths onto `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for c in &mut self.conditions {
            if c.image_path.is_relative() {
                c.image_path = base.join(&c.image_path);
            }
            if let Some(p) = c.high_ev_companion_path.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    /// The 20-condition rig: filter-major over (none, yellow, orange, red),
    /// wavelength-minor over 265..450 nm. Index 12 is 310 nm behind the orange filter.
    pub fn canonical(name: &str, image_name: impl Fn(u32) -> PathBuf) -> Self {
        let filters = [
            OpticalFilter::None,
            OpticalFilter::Yellow,
            OpticalFilter::Orange,
            OpticalFilter::Red,
        ];
        let mut conditions = Vec::with_capacity(CANONICAL_CONDITION_COUNT);
        for (fi, filter) in filters.iter().enumerate() {
            for (wi, wl) in EXCITATION_WAVELENGTHS_NM.iter().enumerate() {
                let index = (fi * EXCITATION_WAVELENGTHS_NM.len() + wi + 1) as u32;
                conditions.push(IlluminationCondition {
                    index,
                    excitation_wavelength_nm: *wl,
                    optical_filter: *filter,
                    image_path: image_name(index),
                    high_ev_companion_path: None,
                });
            }
        }
        Self {
            name: name.to_string(),
            mask_condition_index: DEFAULT_MASK_CONDITION,
            pixel_scale_um_per_px: DEFAULT_PIXEL_SCALE_UM,
            conditions,
        }
    }
}

/// Reads a manifest file, validates it and resolves image paths against its directory.
pub fn load_manifest(path: &Path) -> Result<StackManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = StackManifest::from_toml_str(&text)?;
    if let Some(dir) = path.parent() {
        manifest.resolve_paths(dir);
    }
    for w in manifest.warnings() {
        log::warn!("{w}");
    }
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct ImageStack {
    pub images: Vec<RgbImage>,
    pub width: u32,
    pub height: u32,
    /// Estimated displacement `(dx, dy)` of each condition image relative
    /// to the mask-condition image. The applied correction is the negation.
    pub registration_offsets: Vec<(f64, f64)>,
    /// Top-left corner of the common overlap in mask-condition coordinates.
    pub crop_origin: (u32, u32),
    pub warnings: Vec<Warning>,
}

impl ImageStack {
    /// Builds a stack from in-memory rasters, checking their dimensions agree.
    pub fn from_images(images: Vec<RgbImage>) -> Result<Self> {
        let first = images.first().ok_or(Error::EmptyManifest)?;
        let (width, height) = first.dimensions();
        for (i, img) in images.iter().enumerate() {
            check_dims(width, height, img.width(), img.height(), &format!(" (image {})", i + 1))?;
        }
        let n = images.len();
        Ok(Self {
            images,
            width,
            height,
            registration_offsets: vec![(0.0, 0.0); n],
            crop_origin: (0, 0),
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub(crate) fn check_dims(ew: u32, eh: u32, w: u32, h: u32, context: &str) -> Result<()> {
    if (ew, eh) != (w, h) {
        return Err(Error::DimensionMismatch {
            expected_w: ew,
            expected_h: eh,
            got_w: w,
            got_h: h,
            context: context.to_string(),
        });
    }
    Ok(())
}

/// Decodes one raster as 8-bit RGB, noting grayscale replication and lossy formats.
pub fn load_rgb(path: &Path, condition: u32, warnings: &mut Vec<Warning>) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = image::guess_format(&bytes).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if format == ImageFormat::Jpeg {
        warnings.push(Warning::LossyFormat { condition });
    }
    let img = image::load_from_memory_with_format(&bytes, format).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    ) {
        warnings.push(Warning::GrayscaleUpconverted { condition });
    }
    Ok(img.to_rgb8())
}

/// Loads every condition image in manifest order. Offsets start at zero.
pub fn load_stack(manifest: &StackManifest) -> Result<ImageStack> {
    let mut warnings = manifest.warnings();
    let mut images = Vec::with_capacity(manifest.conditions.len());
    for c in &manifest.conditions {
        let img = load_rgb(&c.image_path, c.index, &mut warnings)?;
        if let Some(first) = images.first() {
            let first: &RgbImage = first;
            check_dims(
                first.width(),
                first.height(),
                img.width(),
                img.height(),
                &format!(" (condition {})", c.index),
            )?;
        }
        images.push(img);
    }
    for w in &warnings[manifest.warnings().len()..] {
        log::warn!("{w}");
    }
    let mut stack = ImageStack::from_images(images)?;
    stack.warnings = warnings;
    Ok(stack)
}

/// Shifts an image by `(dx, dy)`: output `(x, y)` takes input `(x - dx, y - dy)`.
/// Uncovered pixels take `fill`.
pub fn translate_image(img: &RgbImage, dx: i64, dy: i64, fill: [u8; 3]) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let sx = x as i64 - dx;
        let sy = y as i64 - dy;
        if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
            *img.get_pixel(sx as u32, sy as u32)
        } else {
            image::Rgb(fill)
        }
    })
}

fn luminance_plane(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| luma(p.0[0] as f64, p.0[1] as f64, p.0[2] as f64))
        .collect()
}

fn fft_2d(data: &mut [Complex<f64>], width: usize, height: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            column[y] = data[y * width + x];
        }
        col_fft.process(&mut column);
        for y in 0..height {
            data[y * width + x] = column[y];
        }
    }
}

fn spectrum(plane: &[f64], width: usize, height: usize) -> Vec<Complex<f64>> {
    let mean = plane.iter().sum::<f64>() / plane.len() as f64;
    let mut data: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v - mean, 0.0)).collect();
    fft_2d(&mut data, width, height, false);
    data
}

/// Integer-pixel phase correlation. Returns the displacement `(dx, dy)` such
/// that `moving(x, y) ≈ reference(x - dx, y - dy)`.
pub fn phase_correlation(reference: &RgbImage, moving: &RgbImage) -> Result<(i64, i64)> {
    let (w, h) = reference.dimensions();
    check_dims(w, h, moving.width(), moving.height(), "")?;
    let (wu, hu) = (w as usize, h as usize);
    let ref_spec = spectrum(&luminance_plane(reference), wu, hu);
    let mov_spec = spectrum(&luminance_plane(moving), wu, hu);
    let mut cross: Vec<Complex<f64>> = mov_spec
        .iter()
        .zip(&ref_spec)
        .map(|(m, r)| {
            let c = m * r.conj();
            let norm = c.norm();
            if norm > 1e-12 {
                c / norm
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft_2d(&mut cross, wu, hu, true);

    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, c) in cross.iter().enumerate() {
        if c.re > best.1 {
            best = (i, c.re);
        }
    }
    let (px, py) = ((best.0 % wu) as i64, (best.0 / wu) as i64);
    let dx = if px > w as i64 / 2 { px - w as i64 } else { px };
    let dy = if py > h as i64 / 2 { py - h as i64 } else { py };
    Ok((dx, dy))
}

#[cfg(feature = "parallel")]
fn estimate_offsets(
    stack: &ImageStack,
    reference: &RgbImage,
    mask_pos: usize,
) -> Vec<Result<(i64, i64)>> {
    use rayon::prelude::*;
    stack
        .images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            if i == mask_pos {
                Ok((0, 0))
            } else {
                phase_correlation(reference, img)
            }
        })
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn estimate_offsets(
    stack: &ImageStack,
    reference: &RgbImage,
    mask_pos: usize,
) -> Vec<Result<(i64, i64)>> {
    stack
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if i == mask_pos {
                Ok((0, 0))
            } else {
                phase_correlation(reference, img)
            }
        })
        .collect()
}

/// Aligns every condition image to the mask-condition image and crops all of
/// them to the common overlap.
pub fn register_stack(
    stack: &ImageStack,
    manifest: &StackManifest,
    max_shift_px: u32,
) -> Result<ImageStack> {
    if stack.len() != manifest.conditions.len() {
        return Err(Error::InvalidConfig(format!(
            "stack has {} images but manifest lists {} conditions",
            stack.len(),
            manifest.conditions.len()
        )));
    }
    let mask_pos = manifest.mask_position();
    let reference = &stack.images[mask_pos];
    let estimates = estimate_offsets(stack, reference, mask_pos);

    let mut offsets = Vec::with_capacity(stack.len());
    for (c, est) in manifest.conditions.iter().zip(estimates) {
        let (dx, dy) = est?;
        if dx.unsigned_abs() > max_shift_px as u64 || dy.unsigned_abs() > max_shift_px as u64 {
            return Err(Error::RegistrationBoundary {
                condition: c.index,
                dx,
                dy,
                max_shift: max_shift_px,
            });
        }
        offsets.push((dx, dy));
    }

    let (w, h) = (stack.width as i64, stack.height as i64);
    let x0 = offsets.iter().map(|&(dx, _)| (-dx).max(0)).max().unwrap_or(0);
    let y0 = offsets.iter().map(|&(_, dy)| (-dy).max(0)).max().unwrap_or(0);
    let x1 = offsets.iter().map(|&(dx, _)| (w - dx).min(w)).min().unwrap_or(w);
    let y1 = offsets.iter().map(|&(_, dy)| (h - dy).min(h)).min().unwrap_or(h);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::EmptyOverlap);
    }
    let (cw, ch) = ((x1 - x0) as u32, (y1 - y0) as u32);

    let images = stack
        .images
        .iter()
        .zip(&offsets)
        .map(|(img, &(dx, dy))| {
            let ox = (x0 + dx) as u32;
            let oy = (y0 + dy) as u32;
            image::imageops::crop_imm(img, ox, oy, cw, ch).to_image()
        })
        .collect();

    Ok(ImageStack {
        images,
        width: cw,
        height: ch,
        registration_offsets: offsets
            .iter()
            .map(|&(dx, dy)| (dx as f64, dy as f64))
            .collect(),
        crop_origin: (x0 as u32, y0 as u32),
        warnings: stack.warnings.clone(),
    })
}
