//! Binary masks, connected-component labeling and region geometry.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: u32,
    pub height: u32,
    pub bitmap: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bitmap: vec![false; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut bitmap = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                bitmap.push(f(x, y));
            }
        }
        Self { width, height, bitmap }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bitmap[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bitmap[(y * self.width + x) as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bitmap.iter().filter(|&&b| b).count()
    }

    /// Pixel-wise OR.
    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, b) in self.bitmap.iter_mut().zip(&other.bitmap) {
            *a |= *b;
        }
    }

    /// Fills background components that do not touch the raster border
    /// (4-connectivity on the background).
    pub fn fill_holes(&mut self) {
        let (w, h) = (self.width as usize, self.height as usize);
        if w == 0 || h == 0 {
            return;
        }
        let mut outside = vec![false; w * h];
        let mut queue = VecDeque::new();
        let seed = |i: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<usize>| {
            if !self.bitmap[i] && !outside[i] {
                outside[i] = true;
                queue.push_back(i);
            }
        };
        for x in 0..w {
            seed(x, &mut outside, &mut queue);
            seed((h - 1) * w + x, &mut outside, &mut queue);
        }
        for y in 0..h {
            seed(y * w, &mut outside, &mut queue);
            seed(y * w + w - 1, &mut outside, &mut queue);
        }
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !self.bitmap[j] && !outside[j] {
                    outside[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        for (b, o) in self.bitmap.iter_mut().zip(outside) {
            if !o {
                *b = true;
            }
        }
    }

    /// Intersection over union of the set pixels of two equally sized masks.
    pub fn iou(&self, other: &BinaryMask) -> f64 {
        let mut inter = 0usize;
        let mut uni = 0usize;
        for (a, b) in self.bitmap.iter().zip(&other.bitmap) {
            inter += (*a && *b) as usize;
            uni += (*a || *b) as usize;
        }
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: u32,
    pub area_px: u32,
    pub centroid: (f64, f64),
    /// Inclusive `(x0, y0, x1, y1)`.
    pub bbox: (u32, u32, u32, u32),
    pub minor_axis_px: f64,
    pub major_axis_px: f64,
    pub pixel_list: Vec<(u32, u32)>,
}

impl Region {
    /// Computes geometry from a pixel list. Axis lengths are those of the
    /// ellipse with the same second central moments: `4·sqrt(eigenvalue)`.
    pub fn from_pixels(id: u32, pixel_list: Vec<(u32, u32)>) -> Self {
        let n = pixel_list.len() as f64;
        let (mut sx, mut sy) = (0.0, 0.0);
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for &(x, y) in &pixel_list {
            sx += x as f64;
            sy += y as f64;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let (cx, cy) = (sx / n, sy / n);
        let (mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0);
        for &(x, y) in &pixel_list {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            mxx += dx * dx;
            myy += dy * dy;
            mxy += dx * dy;
        }
        mxx /= n;
        myy /= n;
        mxy /= n;
        let half_trace = 0.5 * (mxx + myy);
        let disc = (0.25 * (mxx - myy).powi(2) + mxy * mxy).sqrt();
        let l_max = half_trace + disc;
        let l_min = (half_trace - disc).max(0.0);
        Self {
            id,
            area_px: pixel_list.len() as u32,
            centroid: (cx, cy),
            bbox: (x0, y0, x1, y1),
            minor_axis_px: 4.0 * l_min.sqrt(),
            major_axis_px: 4.0 * l_max.sqrt(),
            pixel_list,
        }
    }

    pub fn area_um2(&self, scale_um_per_px: f64) -> f64 {
        px_area_to_um2(self.area_px as u64, scale_um_per_px)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.labels[(y * self.width + x) as usize]
    }

    /// Rebuilds regions from a raw label raster. Region ids keep their label values.
    pub fn from_labels(width: u32, height: u32, labels: Vec<u32>) -> Self {
        let mut pixels: std::collections::BTreeMap<u32, Vec<(u32, u32)>> = Default::default();
        for y in 0..height {
            for x in 0..width {
                let l = labels[(y * width + x) as usize];
                if l != 0 {
                    pixels.entry(l).or_default().push((x, y));
                }
            }
        }
        let regions = pixels
            .into_iter()
            .map(|(id, px)| Region::from_pixels(id, px))
            .collect();
        Self {
            width,
            height,
            labels,
            regions,
        }
    }

    pub fn mask(&self) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bitmap: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }

    pub fn region_mask(&self, id: u32) -> BinaryMask {
        BinaryMask {
            width: self.width,
            height: self.height,
            bitmap: self.labels.iter().map(|&l| l == id).collect(),
        }
    }
}

/// 8-connected component labeling. Components smaller than `min_area_px`
/// are dropped; survivors are numbered from 1 in raster order of their first pixel.
pub fn label_regions(mask: &BinaryMask, min_area_px: u32) -> LabelMap {
    let (w, h) = (mask.width as usize, mask.height as usize);
    let mut labels = vec![0u32; w * h];
    let mut visited = vec![false; w * h];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();

    for start in 0..w * h {
        if !mask.bitmap[start] || visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        let mut component = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            component.push((x as u32, y as u32));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.bitmap[j] && !visited[j] {
                        visited[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if component.len() < min_area_px.max(1) as usize {
            continue;
        }
        let id = regions.len() as u32 + 1;
        component.sort_unstable_by_key(|&(x, y)| (y, x));
        for &(x, y) in &component {
            labels[y as usize * w + x as usize] = id;
        }
        regions.push(Region::from_pixels(id, component));
    }

    LabelMap {
        width: mask.width,
        height: mask.height,
        labels,
        regions,
    }
}

/// Pixel area to square micrometres.
pub fn px_area_to_um2(area_px: u64, scale_um_per_px: f64) -> f64 {
    area_px as f64 * scale_um_per_px * scale_um_per_px
}
