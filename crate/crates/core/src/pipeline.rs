//! Stage helpers shared by the command-line tool and the browser demo.

use image::RgbImage;

use crate::error::Result;
use crate::ingest::{self, check_dims, load_rgb, ImageStack, StackManifest};
use crate::segment::{label_regions, build_mask, LabelMap, MaskOutcome, SegmentationConfig};

/// Loads a stack and, when asked, registers it to the mask condition.
pub fn prepare_stack(manifest: &StackManifest, register: bool, max_shift_px: u32) -> Result<ImageStack> {
    let stack = ingest::load_stack(manifest)?;
    if register {
        ingest::register_stack(&stack, manifest, max_shift_px)
    } else {
        Ok(stack)
    }
}

pub struct StackSegmentation {
    pub outcome: MaskOutcome,
    pub labels: LabelMap,
}

/// The mask-condition companion capture, cropped like the registered stack.
fn companion(stack: &ImageStack, manifest: &StackManifest) -> Result<Option<RgbImage>> {
    let cond = &manifest.conditions[manifest.mask_position()];
    let Some(path) = &cond.high_ev_companion_path else {
        return Ok(None);
    };
    let mut warnings = Vec::new();
    let img = load_rgb(path, cond.index, &mut warnings)?;
    let (x0, y0) = stack.crop_origin;
    if x0 + stack.width > img.width() || y0 + stack.height > img.height() {
        check_dims(stack.width, stack.height, img.width(), img.height(), " (high-EV companion)")?;
    }
    Ok(Some(image::imageops::crop_imm(&img, x0, y0, stack.width, stack.height).to_image()))
}

/// Segments the mask condition of an aligned stack.
pub fn segment_stack(
    stack: &ImageStack,
    manifest: &StackManifest,
    cfg: &SegmentationConfig,
) -> Result<StackSegmentation> {
    let mask_image = &stack.images[manifest.mask_position()];
    let hi = companion(stack, manifest)?;
    let outcome = build_mask(mask_image, cfg, hi.as_ref())?;
    let labels = label_regions(&outcome.mask, cfg.min_area_px);
    Ok(StackSegmentation { outcome, labels })
}
