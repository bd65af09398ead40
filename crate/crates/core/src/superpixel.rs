//! SLIC superpixels in raw `(R, G, B, x, y)` feature space.

use std::collections::VecDeque;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::imaging::LabelMap;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicConfig {
    /// Requested number of superpixels.
    pub target_count: usize,
    /// Weight of spatial proximity against colour proximity.
    pub compactness: f64,
    pub iterations: usize,
    /// Carried for reproducibility bookkeeping; grid seeding itself is deterministic.
    pub seed: u64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self { target_count: 10_000, compactness: 100.0, iterations: 10, seed: 0 }
    }
}

/// A partition of the raster into contiguous ids `0..count`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub labels: LabelMap,
    pub count: usize,
}

impl SuperpixelMap {
    pub fn width(&self) -> usize {
        self.labels.width
    }

    pub fn height(&self) -> usize {
        self.labels.height
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn mean_size(&self) -> f64 {
        self.labels.labels.len() as f64 / self.count as f64
    }

    /// Rebuild from a stored label image, checking the id invariants.
    pub fn from_labels(labels: LabelMap) -> Result<Self> {
        let count = labels.labels.iter().max().map_or(0, |&m| m as usize + 1);
        let map = Self { labels, count };
        if map.sizes().contains(&0) {
            return Err(Error::InvalidArgument("superpixel ids are not contiguous".into()));
        }
        Ok(map)
    }
}

#[derive(Clone, Copy, Debug)]
struct Center {
    color: [f64; 3],
    x: f64,
    y: f64,
}

/// Segment `image` into roughly `config.target_count` compact superpixels.
///
/// Centres start on a regular grid of spacing `S = sqrt(pixels / target)` and
/// are refined k-means style; each centre only competes for pixels in its
/// `2S x 2S` window, using `D^2 = d_color^2 + (d_xy / S)^2 m^2`. Equal
/// distances go to the lower centre index.
pub fn slic_segment(image: &RgbImage, config: &SlicConfig) -> Result<SuperpixelMap> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let n = w * h;
    if n == 0 {
        return Err(Error::InvalidArgument("image has zero extent".into()));
    }
    if config.target_count == 0 || config.target_count > n {
        return Err(Error::InvalidArgument(format!(
            "target superpixel count {} must lie in [1, {n}]",
            config.target_count
        )));
    }
    if !(config.compactness > 0.0) || config.iterations == 0 {
        return Err(Error::InvalidArgument("compactness and iterations must be positive".into()));
    }

    let feats: Vec<[f64; 3]> = image.pixels().map(|p| [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])]).collect();
    let s = (n as f64 / config.target_count as f64).sqrt();
    let nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let ny = ((h as f64 / s).round() as usize).clamp(1, h);
    let (step_x, step_y) = (w as f64 / nx as f64, h as f64 / ny as f64);

    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let x = (i as f64 + 0.5) * step_x;
            let y = (j as f64 + 0.5) * step_y;
            let (px, py) = ((x as usize).min(w - 1), (y as usize).min(h - 1));
            centers.push(Center { color: feats[py * w + px], x, y });
        }
    }
    let mut labels: Vec<u32> = (0..n)
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let i = ((x as f64 / step_x) as usize).min(nx - 1);
            let j = ((y as f64 / step_y) as usize).min(ny - 1);
            (j * nx + i) as u32
        })
        .collect();

    let spatial_weight = (config.compactness / s).powi(2);
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..config.iterations {
        dist.fill(f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let x0 = (c.x - s).floor().max(0.0) as usize;
            let x1 = ((c.x + s).ceil() as usize).min(w - 1);
            let y0 = (c.y - s).floor().max(0.0) as usize;
            let y1 = ((c.y + s).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                let dy = y as f64 - c.y;
                for x in x0..=x1 {
                    let p = y * w + x;
                    let f = &feats[p];
                    let dc = (f[0] - c.color[0]).powi(2) + (f[1] - c.color[1]).powi(2) + (f[2] - c.color[2]).powi(2);
                    let dx = x as f64 - c.x;
                    let d = dc + (dx * dx + dy * dy) * spatial_weight;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![[0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            let f = &feats[p];
            a[0] += f[0];
            a[1] += f[1];
            a[2] += f[2];
            a[3] += (p % w) as f64;
            a[4] += (p / w) as f64;
            a[5] += 1.0;
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a[5] > 0.0 {
                *c = Center { color: [a[0] / a[5], a[1] / a[5], a[2] / a[5]], x: a[3] / a[5], y: a[4] / a[5] };
            }
        }
    }
    let raw = LabelMap::new(w, h, labels)?;
    Ok(enforce_connectivity(&raw))
}

/// Split every label into 4-connected components, merge components smaller
/// than a quarter of the mean label size into their largest 4-adjacent
/// neighbour, and renumber ids contiguously in scan order.
pub fn enforce_connectivity(map: &LabelMap) -> SuperpixelMap {
    let (w, h) = (map.width, map.height);
    let n = w * h;
    if n == 0 {
        return SuperpixelMap { labels: map.clone(), count: 0 };
    }
    let neighbours = |p: usize| {
        let (x, y) = (p % w, p / w);
        let mut v = [usize::MAX; 4];
        if x > 0 {
            v[0] = p - 1;
        }
        if x + 1 < w {
            v[1] = p + 1;
        }
        if y > 0 {
            v[2] = p - w;
        }
        if y + 1 < h {
            v[3] = p + w;
        }
        v.into_iter().filter(|&q| q != usize::MAX)
    };

    const UNSET: usize = usize::MAX;
    let mut comp = vec![UNSET; n];
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != UNSET {
            continue;
        }
        let id = members.len();
        let label = map.labels[start];
        let mut list = vec![start];
        comp[start] = id;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for q in neighbours(p) {
                if comp[q] == UNSET && map.labels[q] == label {
                    comp[q] = id;
                    list.push(q);
                    queue.push_back(q);
                }
            }
        }
        members.push(list);
    }

    let distinct = map.distinct().len().max(1);
    let min_size = (n as f64 / distinct as f64) / 4.0;
    let mut alive = vec![true; members.len()];
    for c in 0..members.len() {
        if !alive[c] || (members[c].len() as f64) >= min_size {
            continue;
        }
        let mut best: Option<usize> = None;
        for &p in &members[c] {
            for q in neighbours(p) {
                let d = comp[q];
                if d == c {
                    continue;
                }
                best = match best {
                    Some(b) if members[b].len() > members[d].len() || (members[b].len() == members[d].len() && b < d) => {
                        Some(b)
                    }
                    _ => Some(d),
                };
            }
        }
        if let Some(target) = best {
            let moved = std::mem::take(&mut members[c]);
            for &p in &moved {
                comp[p] = target;
            }
            members[target].extend(moved);
            alive[c] = false;
        }
    }

    let mut remap = vec![u32::MAX; members.len()];
    let mut next = 0u32;
    let labels = comp
        .iter()
        .map(|&c| {
            if remap[c] == u32::MAX {
                remap[c] = next;
                next += 1;
            }
            remap[c]
        })
        .collect();
    SuperpixelMap { labels: LabelMap { width: w, height: h, labels }, count: next as usize }
}

/// Total count of 4-adjacent pixel pairs lying in different regions, per region
/// and counted from both sides.
pub fn mean_boundary_length(map: &SuperpixelMap) -> f64 {
    let l = &map.labels;
    let mut edges = 0usize;
    for y in 0..l.height {
        for x in 0..l.width {
            let v = l.get(x, y);
            if x + 1 < l.width && l.get(x + 1, y) != v {
                edges += 1;
            }
            if y + 1 < l.height && l.get(x, y + 1) != v {
                edges += 1;
            }
        }
    }
    2.0 * edges as f64 / map.count as f64
}
