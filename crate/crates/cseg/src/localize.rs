//! Candidate-region generation from a pooled interior probability volume.
//!
//! The chain is: threshold at a conservative probability, erode by one voxel
//! to cut thin bridges between blobs, keep the largest connected component,
//! dilate back, and take the component's padded bounding box. Erosion and
//! dilation use the 6-neighbor cross; connected components use 26- or
//! 6-connectivity as requested.

use crate::error::{Error, Result};
use crate::volume::{BBox3, BoxSource, LabelVolume, ProbVolume, Volume};

/// Binary morphology operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MorphOp {
    Erode,
    Dilate,
}

/// Binary erosion or dilation with the 6-neighbor cross structuring element,
/// applied `radius` times.
///
/// Border semantics follow the infinite-grid convention restricted to the
/// frame: erosion treats out-of-frame neighbors as foreground and dilation
/// treats them as background, which preserves the opening/closing
/// containments `dilate(erode(m)) <= m <= erode(dilate(m))` everywhere.
pub fn morphology(mask: &LabelVolume, op: MorphOp, radius: usize) -> LabelVolume {
    let (nx, ny, nz) = mask.dims();
    let mut cur: Vec<u8> = mask.data().to_vec();
    let mut next = vec![0u8; cur.len()];
    for _ in 0..radius {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let center = cur[i] != 0;
                    let value = match op {
                        MorphOp::Erode => {
                            center
                                && (x == 0 || cur[i - 1] != 0)
                                && (x + 1 == nx || cur[i + 1] != 0)
                                && (y == 0 || cur[i - nx] != 0)
                                && (y + 1 == ny || cur[i + nx] != 0)
                                && (z == 0 || cur[i - nx * ny] != 0)
                                && (z + 1 == nz || cur[i + nx * ny] != 0)
                        }
                        MorphOp::Dilate => {
                            center
                                || (x > 0 && cur[i - 1] != 0)
                                || (x + 1 < nx && cur[i + 1] != 0)
                                || (y > 0 && cur[i - nx] != 0)
                                || (y + 1 < ny && cur[i + nx] != 0)
                                || (z > 0 && cur[i - nx * ny] != 0)
                                || (z + 1 < nz && cur[i + nx * ny] != 0)
                        }
                    };
                    next[i] = u8::from(value);
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Volume::new(mask.dims(), mask.spacing(), cur).expect("same geometry")
}

/// Voxel connectivity for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<(i64, i64, i64)> {
        match self {
            Connectivity::Six => vec![
                (-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1),
            ],
            Connectivity::TwentySix => {
                let mut out = Vec::with_capacity(26);
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if (dx, dy, dz) != (0, 0, 0) {
                                out.push((dx, dy, dz));
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Keep only the largest connected component of a binary mask. Ties go to
/// the component containing the smallest linear voxel index; an empty mask
/// stays empty.
pub fn largest_component(mask: &LabelVolume, connectivity: Connectivity) -> LabelVolume {
    let (nx, ny, nz) = mask.dims();
    let n = mask.len();
    let offsets = connectivity.offsets();
    let mut visited = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    let mut stack = Vec::new();
    let mut component = Vec::new();
    for seed in 0..n {
        if visited[seed] || mask.data()[seed] == 0 {
            continue;
        }
        component.clear();
        stack.push(seed);
        visited[seed] = true;
        while let Some(i) = stack.pop() {
            component.push(i);
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            for &(dx, dy, dz) in &offsets {
                let (qx, qy, qz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if qx < 0 || qy < 0 || qz < 0 || qx >= nx as i64 || qy >= ny as i64 || qz >= nz as i64 {
                    continue;
                }
                let q = qx as usize + nx * (qy as usize + ny * qz as usize);
                if !visited[q] && mask.data()[q] != 0 {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
        // strictly-greater keeps the earlier (smaller min index) component on ties
        if component.len() > best.len() {
            best = component.clone();
        }
    }
    let mut out = vec![0u8; n];
    for &i in &best {
        out[i] = 1;
    }
    Volume::new(mask.dims(), mask.spacing(), out).expect("same geometry")
}

/// Tight bounding box of a non-empty mask.
pub fn tight_bbox(mask: &LabelVolume, source: BoxSource) -> Result<BBox3> {
    let (nx, ny, _) = mask.dims();
    let mut lo = (usize::MAX, usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize, 0usize);
    let mut any = false;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        any = true;
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        lo = (lo.0.min(x), lo.1.min(y), lo.2.min(z));
        hi = (hi.0.max(x), hi.1.max(y), hi.2.max(z));
    }
    if !any {
        return Err(Error::NoCandidate("mask is empty".into()));
    }
    BBox3::new(lo, (hi.0 + 1, hi.1 + 1, hi.2 + 1), source)
}

/// Candidate mask and bounding box from a pooled probability volume.
///
/// `mask = dilate(largest_cc(erode(prob >= threshold)))`; if erosion removes
/// everything, the largest component of the un-eroded thresholded mask is
/// used instead (and not re-dilated, since nothing was eroded away). The box
/// is the mask's tight box expanded by `pad` per side, clamped to the volume.
pub fn candidate_region(prob: &ProbVolume, threshold: f32, pad: usize) -> Result<(LabelVolume, BBox3)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold must lie in (0,1), got {threshold}")));
    }
    let thresholded = prob
        .map(|v| u8::from(v >= threshold))
        .expect("binary mask from probability volume");
    if thresholded.count_nonzero() == 0 {
        return Err(Error::NoCandidate(format!(
            "no voxel reaches probability {threshold}"
        )));
    }
    let eroded = morphology(&thresholded, MorphOp::Erode, 1);
    let mask = if eroded.count_nonzero() == 0 {
        largest_component(&thresholded, Connectivity::TwentySix)
    } else {
        let cc = largest_component(&eroded, Connectivity::TwentySix);
        morphology(&cc, MorphOp::Dilate, 1)
    };
    let bbox = tight_bbox(&mask, BoxSource::Candidate)?.padded(pad, prob.dims());
    Ok((mask, bbox))
}

/// Recall of a ground-truth mask inside a box, and the volume reduction the
/// box achieves over the full frame.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxStats {
    pub recall: f64,
    pub volume_reduction: f64,
}

pub fn bbox_stats(bbox: &BBox3, gt: &LabelVolume) -> Result<BoxStats> {
    if !bbox.fits(gt.dims()) {
        return Err(Error::invalid("box exceeds ground-truth dims"));
    }
    let (nx, ny, _) = gt.dims();
    let mut total = 0usize;
    let mut inside = 0usize;
    for (i, &v) in gt.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        total += 1;
        let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
        inside += usize::from(bbox.contains(x, y, z));
    }
    if total == 0 {
        return Err(Error::UndefinedRecall);
    }
    Ok(BoxStats {
        recall: inside as f64 / total as f64,
        volume_reduction: 1.0 - bbox.volume() as f64 / gt.len() as f64,
    })
}
