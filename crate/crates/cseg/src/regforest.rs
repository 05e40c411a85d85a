//! Regression-forest bounding-box localization baseline.
//!
//! Grid-sampled patches vote for the organ box: each patch descriptor (mean
//! intensity differences between paired offset cuboids) regresses an offset
//! to the box center plus the box extents, a discriminative forest accepts
//! or rejects each predicted center from the appearance at that location,
//! and the accepted predictions are reduced by non-maximum suppression. The
//! final box is the candidate that contains the most accepted predictions.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{train_classifier, train_regressor, FeatureTable, ForestConfig, ForestModel};
use crate::localize::tight_bbox;
use crate::phantom::Case;
use crate::volume::{BBox3, BoxSource, HuVolume};

/// One paired-cuboid probe: the feature is the mean HU inside cuboid A minus
/// the mean inside cuboid B. Offsets are cuboid centers relative to the
/// query point; half-sizes are per-axis half-extents. All in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub offset_a: [f64; 3],
    pub half_a: [f64; 3],
    pub offset_b: [f64; 3],
    pub half_b: [f64; 3],
}

/// The probe family used by one localizer; generated once from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchFeatureConfig {
    pub probes: Vec<Probe>,
    pub context_radius_mm: f64,
}

impl PatchFeatureConfig {
    /// Random probes with offsets inside the context radius.
    pub fn generate(count: usize, context_radius_mm: f64, seed: u64) -> Result<Self> {
        if count < 16 {
            return Err(Error::invalid(format!("probe count must be >= 16, got {count}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_offset = context_radius_mm * 0.7;
        let mut probes = Vec::with_capacity(count);
        for _ in 0..count {
            let mut cuboid = || {
                let offset = [
                    rng.gen_range(-max_offset..max_offset),
                    rng.gen_range(-max_offset..max_offset),
                    rng.gen_range(-max_offset..max_offset),
                ];
                let half = [
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(1.0..4.0),
                    rng.gen_range(1.0..4.0),
                ];
                (offset, half)
            };
            let (offset_a, half_a) = cuboid();
            let (offset_b, half_b) = cuboid();
            probes.push(Probe { offset_a, half_a, offset_b, half_b });
        }
        Ok(PatchFeatureConfig { probes, context_radius_mm })
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// Mean HU of a cuboid centered at `center_vox + offset`, reading
/// out-of-range voxels with nearest-voxel clamping.
fn cuboid_mean(vol: &HuVolume, center: (usize, usize, usize), offset: &[f64; 3], half: &[f64; 3]) -> f64 {
    let (nx, ny, nz) = vol.dims();
    let (sx, sy, sz) = vol.spacing();
    let c = [
        center.0 as f64 + offset[0] / sx,
        center.1 as f64 + offset[1] / sy,
        center.2 as f64 + offset[2] / sz,
    ];
    let h = [half[0] / sx, half[1] / sy, half[2] / sz];
    let lo = [
        (c[0] - h[0]).round() as i64,
        (c[1] - h[1]).round() as i64,
        (c[2] - h[2]).round() as i64,
    ];
    let hi = [
        (c[0] + h[0]).round() as i64,
        (c[1] + h[1]).round() as i64,
        (c[2] + h[2]).round() as i64,
    ];
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for z in lo[2]..=hi[2] {
        let zc = z.clamp(0, nz as i64 - 1) as usize;
        for y in lo[1]..=hi[1] {
            let yc = y.clamp(0, ny as i64 - 1) as usize;
            for x in lo[0]..=hi[0] {
                let xc = x.clamp(0, nx as i64 - 1) as usize;
                sum += vol.at(xc, yc, zc) as f64;
                count += 1;
            }
        }
    }
    sum / count as f64
}

/// Patch descriptor at a voxel: one mean-difference per probe pair.
pub fn patch_features(vol: &HuVolume, at: (usize, usize, usize), cfg: &PatchFeatureConfig) -> Vec<f32> {
    cfg.probes
        .iter()
        .map(|p| (cuboid_mean(vol, at, &p.offset_a, &p.half_a) - cuboid_mean(vol, at, &p.offset_b, &p.half_b)) as f32)
        .collect()
}

/// Baseline localizer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RegForestConfig {
    pub probe_count: usize,
    pub context_radius_mm: f64,
    /// Grid stride in voxels for sampling query points.
    pub grid_stride: usize,
    /// Cap on grid samples per training case.
    pub max_train_samples_per_case: usize,
    /// Predicted centers within this distance of the true center label the
    /// accept/reject classifier's positives.
    pub accept_radius_mm: f64,
    pub nms_radius_mm: f64,
    pub regression: ForestConfig,
    pub classifier: ForestConfig,
    pub seed: u64,
}

impl Default for RegForestConfig {
    fn default() -> Self {
        RegForestConfig {
            probe_count: 32,
            context_radius_mm: 24.0,
            grid_stride: 4,
            max_train_samples_per_case: 1024,
            accept_radius_mm: 8.0,
            nms_radius_mm: 20.0,
            regression: ForestConfig {
                n_trees: 20,
                max_depth: 12,
                min_samples_split: 8,
                features_per_split: None,
                seed: 0,
            },
            classifier: ForestConfig {
                n_trees: 20,
                max_depth: 10,
                min_samples_split: 4,
                features_per_split: None,
                seed: 0,
            },
            seed: 0,
        }
    }
}

/// Trained baseline: a 9-output regression forest (center offset, lower and
/// upper box extents) plus an accept/reject classifier on local appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizerModel {
    pub features: PatchFeatureConfig,
    pub regressor: ForestModel,
    pub classifier: ForestModel,
    pub grid_stride: usize,
    pub nms_radius_mm: f64,
}

fn grid_points(dims: (usize, usize, usize), stride: usize) -> Vec<(usize, usize, usize)> {
    let start = stride / 2;
    let mut out = Vec::new();
    for z in (start..dims.2).step_by(stride) {
        for y in (start..dims.1).step_by(stride) {
            for x in (start..dims.0).step_by(stride) {
                out.push((x, y, z));
            }
        }
    }
    out
}

fn to_mm(p: (usize, usize, usize), spacing: (f64, f64, f64)) -> [f64; 3] {
    [p.0 as f64 * spacing.0, p.1 as f64 * spacing.1, p.2 as f64 * spacing.2]
}

fn dist_mm(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Ground-truth box descriptor in mm: center, lower corner, upper corner.
fn gt_box_mm(case: &Case) -> Result<([f64; 3], [f64; 3], [f64; 3])> {
    let bbox = tight_bbox(&case.gt_interior, BoxSource::GroundTruth)
        .map_err(|_| Error::InvalidTrainingSet(format!("case {} has an empty mask", case.id)))?;
    let s = case.ct.spacing();
    let lo = to_mm(bbox.lo, s);
    let hi = to_mm(bbox.hi, s);
    let center = [
        (lo[0] + hi[0]) / 2.0,
        (lo[1] + hi[1]) / 2.0,
        (lo[2] + hi[2]) / 2.0,
    ];
    Ok((center, lo, hi))
}

/// Train the regression forest and the accept/reject classifier.
///
/// Cases with empty masks are skipped with a warning. Regression targets per
/// grid sample are the mm offset to the box center and the box corners
/// relative to that center.
pub fn train_localizer(cases: &[Case], cfg: &RegForestConfig) -> Result<LocalizerModel> {
    if cases.len() < 10 {
        return Err(Error::InvalidTrainingSet(format!(
            "baseline training needs at least 10 cases, got {}",
            cases.len()
        )));
    }
    let features = PatchFeatureConfig::generate(cfg.probe_count, cfg.context_radius_mm, cfg.seed)?;

    struct CaseSamples {
        rows: Vec<f32>,
        targets: Vec<f32>,
        centers: Vec<(usize, usize, usize)>,
        gt_center: [f64; 3],
    }

    let per_case: Vec<Option<CaseSamples>> = cases
        .par_iter()
        .enumerate()
        .map(|(ci, case)| {
            let (center, lo, hi) = match gt_box_mm(case) {
                Ok(v) => v,
                Err(e) => {
                    log::warn!("skipping baseline training case {}: {e}", case.id);
                    return None;
                }
            };
            let mut points = grid_points(case.ct.dims(), cfg.grid_stride);
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(ci as u64));
            // deterministic subsample when the grid is larger than the cap
            if points.len() > cfg.max_train_samples_per_case {
                for i in (1..points.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    points.swap(i, j);
                }
                points.truncate(cfg.max_train_samples_per_case);
                points.sort_unstable();
            }
            let spacing = case.ct.spacing();
            let mut rows = Vec::with_capacity(points.len() * features.len());
            let mut targets = Vec::with_capacity(points.len() * 9);
            for &p in &points {
                rows.extend(patch_features(&case.ct, p, &features));
                let pm = to_mm(p, spacing);
                targets.extend_from_slice(&[
                    (center[0] - pm[0]) as f32,
                    (center[1] - pm[1]) as f32,
                    (center[2] - pm[2]) as f32,
                    (lo[0] - center[0]) as f32,
                    (lo[1] - center[1]) as f32,
                    (lo[2] - center[2]) as f32,
                    (hi[0] - center[0]) as f32,
                    (hi[1] - center[1]) as f32,
                    (hi[2] - center[2]) as f32,
                ]);
            }
            Some(CaseSamples { rows, targets, centers: points, gt_center: center })
        })
        .collect();

    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for s in per_case.iter().flatten() {
        rows.extend_from_slice(&s.rows);
        targets.extend_from_slice(&s.targets);
    }
    if rows.is_empty() {
        return Err(Error::InvalidTrainingSet("no usable baseline training cases".into()));
    }
    let table = FeatureTable::new(features.len(), rows)?;
    let mut reg_cfg = cfg.regression.clone();
    reg_cfg.seed = cfg.seed;
    let (regressor, _) = train_regressor(&table, &targets, 9, &reg_cfg)?;

    // classifier data: appearance at each predicted center, labeled by
    // whether the prediction landed near the true center
    let clf_rows: Vec<(Vec<f32>, u8)> = cases
        .par_iter()
        .zip(&per_case)
        .flat_map(|(case, samples)| {
            let Some(samples) = samples else { return Vec::new() };
            let spacing = case.ct.spacing();
            let dims = case.ct.dims();
            samples
                .centers
                .iter()
                .map(|&p| {
                    let row = patch_features(&case.ct, p, &features);
                    let pred = self::predict_one(&regressor, &row);
                    let pm = to_mm(p, spacing);
                    let pred_center = [pm[0] + pred[0] as f64, pm[1] + pred[1] as f64, pm[2] + pred[2] as f64];
                    let vox = mm_to_voxel(&pred_center, spacing, dims);
                    let feat = patch_features(&case.ct, vox, &features);
                    let label = u8::from(dist_mm(&pred_center, &samples.gt_center) <= cfg.accept_radius_mm);
                    (feat, label)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut cdata = Vec::with_capacity(clf_rows.len() * features.len());
    let mut clabels = Vec::with_capacity(clf_rows.len());
    for (row, label) in &clf_rows {
        cdata.extend_from_slice(row);
        clabels.push(*label);
    }
    let ctable = FeatureTable::new(features.len(), cdata)?;
    let mut clf_cfg = cfg.classifier.clone();
    clf_cfg.seed = cfg.seed.wrapping_add(1);
    let (classifier, _) = train_classifier(&ctable, &clabels, &clf_cfg)?;

    Ok(LocalizerModel {
        features,
        regressor,
        classifier,
        grid_stride: cfg.grid_stride,
        nms_radius_mm: cfg.nms_radius_mm,
    })
}

fn predict_one(model: &ForestModel, row: &[f32]) -> Vec<f32> {
    model.predict(row)
}

fn mm_to_voxel(p: &[f64; 3], spacing: (f64, f64, f64), dims: (usize, usize, usize)) -> (usize, usize, usize) {
    (
        ((p[0] / spacing.0).round().max(0.0) as usize).min(dims.0 - 1),
        ((p[1] / spacing.1).round().max(0.0) as usize).min(dims.1 - 1),
        ((p[2] / spacing.2).round().max(0.0) as usize).min(dims.2 - 1),
    )
}

/// Accepted box prediction before aggregation.
#[derive(Debug, Clone)]
struct Candidate {
    center_mm: [f64; 3],
    lo_mm: [f64; 3],
    hi_mm: [f64; 3],
    score: f32,
    order: usize,
}

/// Aggregation diagnostics for one prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizerDiagnostics {
    pub grid_points: usize,
    pub accepted: usize,
    pub kept_after_nms: usize,
    pub winning_votes: usize,
    pub winning_score_sum: f64,
}

/// Predict a bounding box on a new scan.
pub fn predict_bbox(model: &LocalizerModel, vol: &HuVolume) -> Result<(BBox3, LocalizerDiagnostics)> {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let points = grid_points(dims, model.grid_stride);
    let raw: Vec<Candidate> = points
        .par_iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let row = patch_features(vol, p, &model.features);
            let pred = model.regressor.predict(&row);
            let pm = to_mm(p, spacing);
            let center_mm = [pm[0] + pred[0] as f64, pm[1] + pred[1] as f64, pm[2] + pred[2] as f64];
            let vox = mm_to_voxel(&center_mm, spacing, dims);
            let feat = patch_features(vol, vox, &model.features);
            let score = model.classifier.predict_positive(&feat);
            if score < 0.5 {
                return None;
            }
            Some(Candidate {
                center_mm,
                lo_mm: [
                    center_mm[0] + pred[3] as f64,
                    center_mm[1] + pred[4] as f64,
                    center_mm[2] + pred[5] as f64,
                ],
                hi_mm: [
                    center_mm[0] + pred[6] as f64,
                    center_mm[1] + pred[7] as f64,
                    center_mm[2] + pred[8] as f64,
                ],
                score,
                order: i,
            })
        })
        .collect();
    if raw.is_empty() {
        return Err(Error::NoCandidate("the classifier rejected every prediction".into()));
    }

    // non-maximum suppression over accepted centers, score-descending
    let mut by_score: Vec<&Candidate> = raw.iter().collect();
    by_score.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.order.cmp(&b.order)));
    let mut kept: Vec<&Candidate> = Vec::new();
    for c in by_score {
        if kept.iter().all(|k| dist_mm(&k.center_mm, &c.center_mm) > model.nms_radius_mm) {
            kept.push(c);
        }
    }

    // rank kept boxes by the number of accepted predictions they contain;
    // ties prefer the higher summed score, then NMS order
    let mut best: Option<(usize, f64, usize, &Candidate)> = None;
    for (rank, k) in kept.iter().enumerate() {
        let mut votes = 0usize;
        let mut score_sum = 0.0f64;
        for c in &raw {
            let inside = (0..3).all(|d| c.center_mm[d] >= k.lo_mm[d] && c.center_mm[d] < k.hi_mm[d]);
            if inside {
                votes += 1;
                score_sum += c.score as f64;
            }
        }
        let better = match &best {
            None => true,
            Some((bv, bs, _, _)) => votes > *bv || (votes == *bv && score_sum > *bs),
        };
        if better {
            best = Some((votes, score_sum, rank, k));
        }
    }
    let (votes, score_sum, _, winner) = best.expect("kept is non-empty");

    let lo = (
        (winner.lo_mm[0] / spacing.0).floor().max(0.0) as usize,
        (winner.lo_mm[1] / spacing.1).floor().max(0.0) as usize,
        (winner.lo_mm[2] / spacing.2).floor().max(0.0) as usize,
    );
    let hi = (
        ((winner.hi_mm[0] / spacing.0).ceil() as usize).min(dims.0),
        ((winner.hi_mm[1] / spacing.1).ceil() as usize).min(dims.1),
        ((winner.hi_mm[2] / spacing.2).ceil() as usize).min(dims.2),
    );
    let lo = (lo.0.min(dims.0 - 1), lo.1.min(dims.1 - 1), lo.2.min(dims.2 - 1));
    let hi = (hi.0.max(lo.0 + 1), hi.1.max(lo.1 + 1), hi.2.max(lo.2 + 1));
    let bbox = BBox3::new(lo, hi, BoxSource::RegForest)?;
    Ok((
        bbox,
        LocalizerDiagnostics {
            grid_points: points.len(),
            accepted: raw.len(),
            kept_after_nms: kept.len(),
            winning_votes: votes,
            winning_score_sum: score_sum,
        },
    ))
}
