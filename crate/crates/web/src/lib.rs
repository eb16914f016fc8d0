//! WebAssembly bindings behind the static page in `www/`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fluoromap::classify::{distance_matrix, flag_confusable_pairs};
use fluoromap::colorspace::{hsv_to_rgb, rgb_to_hsv, rgb_to_ycbcr, HsvPixel, RgbPixel};
use fluoromap::fingerprint::library::{build_library, CovarianceSource, DEFAULT_LAMBDA_REL};
use fluoromap::fingerprint::{extract_all, ExtractOptions};
use fluoromap::ingest::{ImageStack, StackManifest};
use fluoromap::segment::{build_mask, label_regions, LabelMap, SegmentationConfig};
use fluoromap::synth::{demo_classes, demo_scene, generate_stack};
use wasm_bindgen::prelude::*;

fn manifest() -> StackManifest {
    StackManifest::canonical("browser", |i| PathBuf::from(format!("c{i:02}.png")))
}

fn js_err(e: fluoromap::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(stack: &ImageStack, i: usize) -> Vec<u8> {
    stack.images[i].pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect()
}

fn region_color(id: u32) -> [u8; 3] {
    let h = (id as f64 * 137.508).rem_euclid(360.0);
    let c = hsv_to_rgb(HsvPixel { h, s: 0.85, v: 1.0 });
    [c.r, c.g, c.b]
}

fn overlay(labels: &LabelMap) -> Vec<u8> {
    labels
        .labels
        .iter()
        .flat_map(|&l| {
            if l == 0 {
                [0, 0, 0, 0]
            } else {
                let [r, g, b] = region_color(l);
                [r, g, b, 170]
            }
        })
        .collect()
}

/// A rendered synthetic stack and the segmentation of its mask condition.
#[wasm_bindgen]
pub struct SegmentView {
    stack: ImageStack,
    overlay: Vec<u8>,
    detected: usize,
    truth: usize,
    pixel_iou: f64,
    iterations: usize,
}

#[wasm_bindgen]
impl SegmentView {
    pub fn width(&self) -> u32 {
        self.stack.width
    }

    pub fn height(&self) -> u32 {
        self.stack.height
    }

    /// RGBA pixels of condition `index` (1-based).
    pub fn condition_rgba(&self, index: usize) -> Vec<u8> {
        let i = index.clamp(1, self.stack.len()) - 1;
        rgba(&self.stack, i)
    }

    /// RGBA overlay, one color per detected region, transparent elsewhere.
    pub fn overlay_rgba(&self) -> Vec<u8> {
        self.overlay.clone()
    }

    pub fn detected(&self) -> usize {
        self.detected
    }

    pub fn truth(&self) -> usize {
        self.truth
    }

    /// Pixel IoU of the whole mask against the rendered truth.
    pub fn pixel_iou(&self) -> f64 {
        self.pixel_iou
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

pub fn run_segment(
    size: u32,
    classes: usize,
    per_class: usize,
    noise_v: f64,
    k: usize,
    seed: u64,
) -> fluoromap::Result<SegmentView> {
    let m = manifest();
    let specs = demo_classes(classes, &m, [0.0, 0.0, noise_v]);
    let scene = demo_scene(size, size, &specs, per_class, seed);
    let out = generate_stack(&scene, &specs, &m)?;
    let cfg = SegmentationConfig { k, rng_seed: seed, ..SegmentationConfig::default() };
    let outcome = build_mask(&out.stack.images[m.mask_position()], &cfg, None)?;
    let labels = label_regions(&outcome.mask, cfg.min_area_px);
    Ok(SegmentView {
        overlay: overlay(&labels),
        detected: labels.regions.len(),
        truth: out.truth.regions.len(),
        pixel_iou: outcome.mask.iou(&out.truth.mask()),
        iterations: outcome.clustering.iterations,
        stack: out.stack,
    })
}

/// Renders a synthetic scene and segments it with `k` clusters.
#[wasm_bindgen]
pub fn segment_scene(
    size: u32,
    classes: usize,
    per_class: usize,
    noise_v: f64,
    k: usize,
    seed: u64,
) -> Result<SegmentView, JsError> {
    run_segment(size, classes, per_class, noise_v, k, seed).map_err(js_err)
}

/// `[y, cb, cr, h, s, v]` of an 8-bit RGB color.
#[wasm_bindgen]
pub fn convert_color(r: u8, g: u8, b: u8) -> Vec<f64> {
    let p = RgbPixel { r, g, b };
    let c = rgb_to_ycbcr(p);
    let h = rgb_to_hsv(p);
    vec![c.y, c.cb, c.cr, h.h, h.s, h.v]
}

/// Class-to-class distances of a library trained on a synthetic scene.
#[wasm_bindgen]
pub struct DistanceView {
    names: Vec<String>,
    values: Vec<f64>,
    pairs: Vec<(String, String, f64)>,
}

#[wasm_bindgen]
impl DistanceView {
    /// Class names separated by commas.
    pub fn names(&self) -> String {
        self.names.join(",")
    }

    /// Row-major `n × n`.
    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Pairs under the threshold, one `a,b,distance` per line.
    pub fn confusable(&self) -> String {
        self.pairs
            .iter()
            .map(|(a, b, d)| format!("{a},{b},{d:.3}"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

pub fn run_distances(
    classes: usize,
    per_class: usize,
    noise_h: f64,
    noise_sv: f64,
    threshold: f64,
    seed: u64,
) -> fluoromap::Result<DistanceView> {
    let m = manifest();
    let specs = demo_classes(classes, &m, [noise_h, noise_sv, noise_sv]);
    let scene = demo_scene(320, 320, &specs, per_class, seed);
    let out = generate_stack(&scene, &specs, &m)?;
    // the particle tone is shared by every class, so two clusters suffice
    let cfg = SegmentationConfig { k: 2, rng_seed: seed, ..SegmentationConfig::default() };
    let mask = build_mask(&out.stack.images[m.mask_position()], &cfg, None)?.mask;
    let labels = label_regions(&mask, cfg.min_area_px);
    let fps = extract_all(&out.stack, &labels.regions, &m, ExtractOptions::default())?;

    let mut samples: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for (fp, region) in fps.into_iter().zip(&labels.regions) {
        let (x, y) = region.centroid;
        let truth_id = out.truth.get(x.round() as u32, y.round() as u32);
        if let Some(class) = out.labels.get(&truth_id) {
            samples.entry(class.clone()).or_default().push(fp);
        }
    }
    let lib = build_library(&samples, DEFAULT_LAMBDA_REL, CovarianceSource::Samples, &m.digest())?;
    let dm = distance_matrix(&lib)?;
    Ok(DistanceView {
        pairs: flag_confusable_pairs(&dm, threshold),
        names: dm.class_names,
        values: dm.values,
    })
}

#[wasm_bindgen]
pub fn class_distances(
    classes: usize,
    per_class: usize,
    noise_h: f64,
    noise_sv: f64,
    threshold: f64,
    seed: u64,
) -> Result<DistanceView, JsError> {
    run_distances(classes, per_class, noise_h, noise_sv, threshold, seed).map_err(js_err)
}
