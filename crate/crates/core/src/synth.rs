//! Synthetic multispectral stacks with pixel-exact ground truth.

use std::collections::BTreeMap;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::colorspace::{hsv_to_rgb, HsvPixel};
use crate::error::{Error, Result};
use crate::ingest::{ImageStack, StackManifest};
use crate::segment::LabelMap;

const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClassSpec {
    pub class_name: String,
    /// `[h°, s, v]` per manifest condition, in manifest order.
    pub per_condition_hsv: Vec<[f64; 3]>,
    /// `[σh°, σs, σv]`.
    #[serde(default)]
    pub hsv_noise_sigma: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Disk { radius: f64 },
    Ellipse { semi_major: f64, semi_minor: f64, angle_deg: f64 },
    Rectangle { width: f64, height: f64 },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disk { radius } => dx * dx + dy * dy <= radius * radius,
            Shape::Ellipse { semi_major, semi_minor, angle_deg } => {
                let (s, c) = angle_deg.to_radians().sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / semi_major).powi(2) + (v / semi_minor).powi(2) <= 1.0
            }
            Shape::Rectangle { width, height } => dx.abs() <= width / 2.0 && dy.abs() <= height / 2.0,
        }
    }

    /// Radius of a circle enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Disk { radius } => radius,
            Shape::Ellipse { semi_major, semi_minor, .. } => semi_major.max(semi_minor),
            Shape::Rectangle { width, height } => 0.5 * width.hypot(height),
        }
    }

    pub fn analytic_area(&self) -> f64 {
        match *self {
            Shape::Disk { radius } => std::f64::consts::PI * radius * radius,
            Shape::Ellipse { semi_major, semi_minor, .. } => std::f64::consts::PI * semi_major * semi_minor,
            Shape::Rectangle { width, height } => width * height,
        }
    }

    pub fn perimeter(&self) -> f64 {
        match *self {
            Shape::Disk { radius } => 2.0 * std::f64::consts::PI * radius,
            Shape::Ellipse { semi_major: a, semi_minor: b, .. } => {
                // Ramanujan
                let h = ((a - b) / (a + b)).powi(2);
                std::f64::consts::PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()))
            }
            Shape::Rectangle { width, height } => 2.0 * (width + height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParticle {
    pub class_name: String,
    pub shape: Shape,
    /// Placed at random (rejection sampling) when absent.
    #[serde(default)]
    pub center: Option<[f64; 2]>,
}

fn default_margin() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub width: u32,
    pub height: u32,
    pub background_v: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub vignette_strength: f64,
    /// Minimum gap between particle bounding circles and to the border.
    #[serde(default = "default_margin")]
    pub margin_px: f64,
    pub particles: Vec<SynthParticle>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub stack: ImageStack,
    pub truth: LabelMap,
    /// Truth region id to class name.
    pub labels: BTreeMap<u32, String>,
    /// Placed center of every scene particle, in scene order.
    pub centers: Vec<[f64; 2]>,
}

fn place(scene: &SynthSceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let mut placed: Vec<([f64; 2], f64)> = Vec::with_capacity(scene.particles.len());
    let (w, h) = (scene.width as f64, scene.height as f64);
    for (index, p) in scene.particles.iter().enumerate() {
        let r = p.shape.bounding_radius();
        let fits = |c: [f64; 2], placed: &[([f64; 2], f64)]| {
            let inside = c[0] - r >= scene.margin_px
                && c[1] - r >= scene.margin_px
                && c[0] + r <= w - 1.0 - scene.margin_px
                && c[1] + r <= h - 1.0 - scene.margin_px;
            inside
                && placed
                    .iter()
                    .all(|(q, rq)| (c[0] - q[0]).hypot(c[1] - q[1]) > r + rq + scene.margin_px)
        };
        let center = match p.center {
            Some(c) => {
                if !fits(c, &placed) {
                    return Err(Error::PlacementFailed { index, attempts: 1 });
                }
                c
            }
            None => {
                let lo = r + scene.margin_px;
                let (hx, hy) = (w - 1.0 - lo, h - 1.0 - lo);
                if hx <= lo || hy <= lo {
                    return Err(Error::PlacementFailed { index, attempts: 0 });
                }
                let mut found = None;
                for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                    let c = [rng.random_range(lo..hx).round(), rng.random_range(lo..hy).round()];
                    if fits(c, &placed) {
                        found = Some(c);
                        break;
                    }
                }
                found.ok_or(Error::PlacementFailed {
                    index,
                    attempts: MAX_PLACEMENT_ATTEMPTS,
                })?
            }
        };
        placed.push((center, r));
    }
    Ok(placed.into_iter().map(|(c, _)| c).collect())
}

fn condition_seed(seed: u64, condition: usize) -> u64 {
    seed ^ (condition as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Renders every condition of a scene and returns the truth label map.
///
/// Background pixels are gray at `background_v`; particle pixels take their
/// class color for the condition plus Gaussian HSV noise. A radial vignette
/// scales value by `1 - strength · (r / r_max)²`.
pub fn generate_stack(
    scene: &SynthSceneSpec,
    classes: &[SynthClassSpec],
    manifest: &StackManifest,
) -> Result<SynthOutput> {
    let n_cond = manifest.condition_count();
    let class_index: BTreeMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.class_name.as_str(), i)).collect();
    for c in classes {
        if c.per_condition_hsv.len() != n_cond {
            return Err(Error::FeatureDimension {
                expected: n_cond,
                got: c.per_condition_hsv.len(),
            });
        }
        if c.hsv_noise_sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidConfig(format!("negative noise sigma for {}", c.class_name)));
        }
    }
    let particle_class: Vec<usize> = scene
        .particles
        .iter()
        .map(|p| {
            class_index
                .get(p.class_name.as_str())
                .copied()
                .ok_or_else(|| Error::UnknownClass(p.class_name.clone()))
        })
        .collect::<Result<_>>()?;
    if !(0.0..=1.0).contains(&scene.vignette_strength) {
        return Err(Error::InvalidConfig("vignette_strength must lie in [0, 1]".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(scene.rng_seed);
    let centers = place(scene, &mut rng)?;

    let (w, h) = (scene.width, scene.height);
    // particle index + 1 per pixel
    let mut owner = vec![0u32; (w * h) as usize];
    for (pi, (p, c)) in scene.particles.iter().zip(&centers).enumerate() {
        let r = p.shape.bounding_radius().ceil() as i64 + 1;
        let (cx, cy) = (c[0].round() as i64, c[1].round() as i64);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if p.shape.contains(x as f64 - c[0], y as f64 - c[1]) {
                    owner[(y as u32 * w + x as u32) as usize] = pi as u32 + 1;
                }
            }
        }
    }

    // renumber in raster order of first pixel
    let mut renumber = vec![0u32; scene.particles.len() + 1];
    let mut next = 1;
    for &o in &owner {
        if o != 0 && renumber[o as usize] == 0 {
            renumber[o as usize] = next;
            next += 1;
        }
    }
    let labels_raster: Vec<u32> = owner.iter().map(|&o| renumber[o as usize]).collect();
    let truth = LabelMap::from_labels(w, h, labels_raster);
    let labels: BTreeMap<u32, String> = (1..=scene.particles.len())
        .filter(|&pi| renumber[pi] != 0)
        .map(|pi| (renumber[pi], scene.particles[pi - 1].class_name.clone()))
        .collect();

    let (mx, my) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let r_max = mx.hypot(my).max(1.0);
    let vignette = |x: u32, y: u32| {
        let r = (x as f64 - mx).hypot(y as f64 - my) / r_max;
        1.0 - scene.vignette_strength * r * r
    };

    let render = |cond: usize| -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(condition_seed(scene.rng_seed, cond));
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let o = owner[(y * w + x) as usize];
                let hsv = if o == 0 {
                    HsvPixel::new(0.0, 0.0, scene.background_v)
                } else {
                    let class = &classes[particle_class[o as usize - 1]];
                    let [hh, ss, vv] = class.per_condition_hsv[cond];
                    let [sh, sv_s, sv_v] = class.hsv_noise_sigma;
                    let mut noise = |sigma: f64| {
                        if sigma > 0.0 {
                            Normal::new(0.0, sigma).expect("finite sigma").sample(&mut rng)
                        } else {
                            0.0
                        }
                    };
                    let nh = noise(sh);
                    let ns = noise(sv_s);
                    let nv = noise(sv_v);
                    HsvPixel::new(
                        (hh + nh).rem_euclid(360.0),
                        (ss + ns).clamp(0.0, 1.0),
                        (vv + nv).clamp(0.0, 1.0),
                    )
                };
                let hsv = HsvPixel { v: hsv.v * vignette(x, y), ..hsv };
                let p = hsv_to_rgb(hsv);
                img.put_pixel(x, y, image::Rgb([p.r, p.g, p.b]));
            }
        }
        img
    };

    #[cfg(feature = "parallel")]
    let images: Vec<RgbImage> = {
        use rayon::prelude::*;
        (0..n_cond).into_par_iter().map(render).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let images: Vec<RgbImage> = (0..n_cond).map(render).collect();

    Ok(SynthOutput {
        stack: ImageStack::from_images(images)?,
        truth,
        labels,
        centers,
    })
}

/// Classes with base hues spaced evenly around the wheel. Every class shares
/// the same bright tone under the mask condition, so that condition separates
/// particles from background without splitting them by class.
pub fn demo_classes(n_classes: usize, manifest: &StackManifest, noise: [f64; 3]) -> Vec<SynthClassSpec> {
    let mask_pos = manifest.mask_position();
    let n_cond = manifest.condition_count();
    (0..n_classes)
        .map(|i| {
            let base = 360.0 * i as f64 / n_classes as f64;
            let per_condition_hsv = (0..n_cond)
                .map(|c| {
                    if c == mask_pos {
                        [40.0, 0.35, 0.95]
                    } else {
                        let t = c as f64;
                        let h = (base + 11.0 * t).rem_euclid(360.0);
                        let s = 0.55 + 0.15 * (0.9 * t + i as f64).sin();
                        let v = 0.80 + 0.10 * (0.7 * t + 1.3 * i as f64).cos();
                        [h, s, v]
                    }
                })
                .collect();
            SynthClassSpec {
                class_name: format!("C{:02}", i + 1),
                per_condition_hsv,
                hsv_noise_sigma: noise,
            }
        })
        .collect()
}

/// A scene with `per_class` randomly placed disks or ellipses per class.
pub fn demo_scene(
    width: u32,
    height: u32,
    classes: &[SynthClassSpec],
    per_class: usize,
    rng_seed: u64,
) -> SynthSceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed.wrapping_add(1));
    let mut particles = Vec::new();
    for k in 0..per_class {
        for c in classes {
            let shape = if (k + particles.len()) % 3 == 2 {
                let a = rng.random_range(7.0..11.0);
                Shape::Ellipse {
                    semi_major: a,
                    semi_minor: a * rng.random_range(0.55..0.9),
                    angle_deg: rng.random_range(0.0..180.0),
                }
            } else {
                Shape::Disk { radius: rng.random_range(5.0..10.0) }
            };
            particles.push(SynthParticle {
                class_name: c.class_name.clone(),
                shape,
                center: None,
            });
        }
    }
    SynthSceneSpec {
        width,
        height,
        background_v: 0.08,
        rng_seed,
        vignette_strength: 0.0,
        margin_px: default_margin(),
        particles,
    }
}
