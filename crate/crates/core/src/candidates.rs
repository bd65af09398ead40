//! Size-filtered candidate masks, fiducial points and the two-region mask pair.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::imaging::{overlay, LabelMap, Mask, Point};
use crate::{Error, Result};

/// Candidates must be strictly larger than this many pixels and strictly
/// smaller than the image size minus this margin.
pub const MIN_CANDIDATE_PIXELS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterOfMass {
    pub x: f64,
    pub y: f64,
}

impl CenterOfMass {
    /// Nearest pixel (halves round up).
    pub fn pixel(&self) -> Point {
        Point::new((self.x + 0.5).floor() as usize, (self.y + 0.5).floor() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskCandidate {
    pub cluster_id: u32,
    pub pixel_set: Mask,
    pub size: usize,
    pub center_of_mass: CenterOfMass,
}

/// Serializable summary of a candidate (gallery metadata).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub cluster_id: u32,
    pub size: usize,
    pub center_of_mass: CenterOfMass,
}

impl From<&MaskCandidate> for CandidateInfo {
    fn from(c: &MaskCandidate) -> Self {
        Self { cluster_id: c.cluster_id, size: c.size, center_of_mass: c.center_of_mass }
    }
}

/// One candidate per cluster whose size lies strictly inside
/// `(1000, total - 1000)`, largest first (ties by cluster id).
pub fn extract_candidates(labels: &LabelMap) -> Result<Vec<MaskCandidate>> {
    let total = labels.labels.len();
    let mut out = Vec::new();
    for id in labels.distinct() {
        let mask = labels.mask_of(id);
        let size = mask.count();
        if size > MIN_CANDIDATE_PIXELS && size + MIN_CANDIDATE_PIXELS < total {
            let center_of_mass = center_of_mass(&mask)?;
            out.push(MaskCandidate { cluster_id: id, pixel_set: mask, size, center_of_mass });
        }
    }
    out.sort_by(|a, b| b.size.cmp(&a.size).then(a.cluster_id.cmp(&b.cluster_id)));
    Ok(out)
}

/// Mean member coordinate; when the pixel nearest that mean is not a member,
/// the nearest member pixel instead (lowest `(y, x)` on ties).
pub fn center_of_mass(mask: &Mask) -> Result<CenterOfMass> {
    let (mut sx, mut sy, mut n) = (0f64, 0f64, 0usize);
    for p in mask.points() {
        sx += p.x as f64;
        sy += p.y as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("center of mass of an empty mask".into()));
    }
    let mean = CenterOfMass { x: sx / n as f64, y: sy / n as f64 };
    if mask.contains(mean.pixel()) {
        return Ok(mean);
    }
    // points() is row-major, so the first strict minimum is the lowest (y, x)
    let mut best = (f64::INFINITY, Point::new(0, 0));
    for p in mask.points() {
        let d = (p.x as f64 - mean.x).powi(2) + (p.y as f64 - mean.y).powi(2);
        if d < best.0 {
            best = (d, p);
        }
    }
    Ok(CenterOfMass { x: best.1.x as f64, y: best.1.y as f64 })
}

/// The lesion mask `M`, its complement and a fiducial point inside `M`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub image_id: String,
    pub mask: Mask,
    pub complement: Mask,
    pub fiducial: Point,
}

/// Build the pair for `cluster_id`; the fiducial defaults to the region's
/// centre of mass and must lie inside the region.
pub fn build_mask_pair(
    image_id: &str,
    labels: &LabelMap,
    cluster_id: u32,
    fiducial: Option<Point>,
) -> Result<MaskPair> {
    let mask = labels.mask_of(cluster_id);
    let size = mask.count();
    if size == 0 {
        return Err(Error::InvalidArgument(format!("cluster {cluster_id} does not exist in {image_id}")));
    }
    if size == mask.len() {
        return Err(Error::InvalidArgument(format!("cluster {cluster_id} covers all of {image_id}")));
    }
    let fiducial = match fiducial {
        Some(p) => p,
        None => center_of_mass(&mask)?.pixel(),
    };
    if !mask.contains(fiducial) {
        return Err(Error::InvalidArgument(format!(
            "fiducial ({}, {}) lies outside cluster {cluster_id} of {image_id}",
            fiducial.x, fiducial.y
        )));
    }
    let complement = mask.complement();
    Ok(MaskPair { image_id: image_id.to_string(), mask, complement, fiducial })
}

/// One row of the selections file consumed by RL training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub image_id: String,
    pub chosen_cluster_id: u32,
    pub click_x: usize,
    pub click_y: usize,
}

impl Selection {
    pub fn click(&self) -> Point {
        Point::new(self.click_x, self.click_y)
    }
}

/// Headless stand-in for the human pick: the candidate containing `click`, or
/// failing that the candidate whose centre of mass is nearest to it (the
/// click then moves to that centre).
pub fn auto_select(image_id: &str, candidates: &[MaskCandidate], click: Point) -> Option<Selection> {
    if let Some(c) = candidates.iter().find(|c| c.pixel_set.contains(click)) {
        return Some(Selection {
            image_id: image_id.to_string(),
            chosen_cluster_id: c.cluster_id,
            click_x: click.x,
            click_y: click.y,
        });
    }
    let nearest = candidates.iter().min_by(|a, b| {
        let da = (a.center_of_mass.x - click.x as f64).powi(2) + (a.center_of_mass.y - click.y as f64).powi(2);
        let db = (b.center_of_mass.x - click.x as f64).powi(2) + (b.center_of_mass.y - click.y as f64).powi(2);
        da.total_cmp(&db)
    })?;
    let p = nearest.center_of_mass.pixel();
    Some(Selection { image_id: image_id.to_string(), chosen_cluster_id: nearest.cluster_id, click_x: p.x, click_y: p.y })
}

/// Gallery tile: the candidate tinted red over the image.
pub fn candidate_overlay(image: &RgbImage, candidate: &MaskCandidate) -> RgbImage {
    overlay(image, &candidate.pixel_set, [255, 0, 0], 0.5)
}
