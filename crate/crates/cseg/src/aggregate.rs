//! Superpixel description and random-forest spatial aggregation: the final
//! segmentation stage.
//!
//! Each proposal is summarized by 39 features: twelve order statistics
//! (mean, variance, skewness, kurtosis and the 20th..90th percentiles) of
//! each of three channels (CT intensity, the pooled interior probability and
//! the fused boundary probability), plus the mean voxel coordinates
//! normalized by the candidate-region extents. A 50-tree forest classifies
//! proposals; positive superpixels stack directly into the output mask with
//! no post-processing.

use crate::error::{Error, Result};
use crate::forest::{FeatureTable, ForestConfig, ForestModel, TrainDiagnostics};
use crate::metrics::percentile_sorted;
use crate::superpixel::{Superpixel, SuperpixelPartition};
use crate::volume::{embed, HuVolume, LabelVolume, ProbVolume, Volume};

/// Feature vector length: 12 statistics x 3 channels + 3 coordinates.
pub const FEATURE_COUNT: usize = 39;

/// Twelve order statistics of one channel over a superpixel's voxels:
/// mean, population variance, skewness, raw kurtosis, percentiles 20..90.
/// Superpixels smaller than 4 voxels get zero skewness and kurtosis; so do
/// constant channels.
fn channel_stats(values: &mut [f64], out: &mut Vec<f64>) {
    // sorting first makes every statistic invariant to voxel order, bit-exactly
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite channel values"));
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in values.iter() {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skew, kurt) = if values.len() < 4 || m2 <= 0.0 {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2))
    };
    out.push(mean);
    out.push(m2);
    out.push(skew);
    out.push(kurt);
    for k in 2..=9 {
        out.push(percentile_sorted(values, k as f64 / 10.0));
    }
}

/// Normalized coordinate of index `v` within an extent; single-voxel extents
/// sit at the center.
#[inline]
fn norm_coord(v: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.5
    } else {
        v as f64 / (extent - 1) as f64
    }
}

/// The 39-feature description of one superpixel.
///
/// All three channel volumes must already be cropped to the candidate
/// region the superpixel lives in.
pub fn superpixel_features(
    sp: &Superpixel,
    ct: &HuVolume,
    interior: &ProbVolume,
    boundary: &ProbVolume,
) -> Result<Vec<f64>> {
    if sp.pixels.is_empty() {
        return Err(Error::invalid("superpixel has no voxels"));
    }
    let dims = ct.dims();
    if interior.dims() != dims || boundary.dims() != dims {
        return Err(Error::invalid("channel volumes must share the cropped region dims"));
    }
    if sp.slice >= dims.2 {
        return Err(Error::invalid("superpixel slice outside the region"));
    }
    let z = sp.slice;
    let mut out = Vec::with_capacity(FEATURE_COUNT);
    let mut values = Vec::with_capacity(sp.pixels.len());

    values.clear();
    values.extend(sp.pixels.iter().map(|&(x, y)| ct.at(x as usize, y as usize, z) as f64));
    channel_stats(&mut values, &mut out);

    values.clear();
    values.extend(sp.pixels.iter().map(|&(x, y)| interior.at(x as usize, y as usize, z) as f64));
    channel_stats(&mut values, &mut out);

    values.clear();
    values.extend(sp.pixels.iter().map(|&(x, y)| boundary.at(x as usize, y as usize, z) as f64));
    channel_stats(&mut values, &mut out);

    // integer coordinate sums keep the means exact under voxel reordering
    let n = sp.pixels.len() as f64;
    let sum_x: u64 = sp.pixels.iter().map(|&(x, _)| x as u64).sum();
    let sum_y: u64 = sp.pixels.iter().map(|&(_, y)| y as u64).sum();
    let norm_mean = |sum: u64, extent: usize| {
        if extent <= 1 {
            0.5
        } else {
            sum as f64 / n / (extent - 1) as f64
        }
    };
    out.push(norm_mean(sum_x, dims.0));
    out.push(norm_mean(sum_y, dims.1));
    out.push(norm_coord(z, dims.2));

    debug_assert_eq!(out.len(), FEATURE_COUNT);
    Ok(out)
}

/// Feature rows for every proposal of a partition, in proposal order.
pub fn partition_features(
    partition: &SuperpixelPartition,
    ct: &HuVolume,
    interior: &ProbVolume,
    boundary: &ProbVolume,
) -> Result<FeatureTable> {
    let mut data = Vec::with_capacity(partition.proposals.len() * FEATURE_COUNT);
    for sp in &partition.proposals {
        data.extend(superpixel_features(sp, ct, interior, boundary)?.into_iter().map(|v| v as f32));
    }
    FeatureTable::new(FEATURE_COUNT, data)
}

/// Binary labels for proposals: positive iff at least half of the voxels lie
/// inside the cropped ground truth.
pub fn label_superpixels(proposals: &[Superpixel], gt_cropped: &LabelVolume) -> Vec<u8> {
    proposals
        .iter()
        .map(|sp| {
            let z = sp.slice;
            let inside = sp
                .pixels
                .iter()
                .filter(|&&(x, y)| gt_cropped.at(x as usize, y as usize, z) != 0)
                .count();
            u8::from(2 * inside >= sp.pixels.len())
        })
        .collect()
}

/// Train the proposal classifier: bagged Gini trees over sqrt(39) features
/// per split.
pub fn train_forest(
    table: &FeatureTable,
    labels: &[u8],
    trees: usize,
    seed: u64,
) -> Result<(ForestModel, TrainDiagnostics)> {
    let cfg = ForestConfig {
        n_trees: trees,
        seed,
        ..Default::default()
    };
    crate::forest::train_classifier(table, labels, &cfg)
}

/// Forest probability per proposal, in proposal order.
pub fn proposal_probabilities(model: &ForestModel, table: &FeatureTable) -> Vec<f32> {
    (0..table.n_rows()).map(|i| model.predict_positive(table.row(i))).collect()
}

/// Assemble the full-frame mask from proposals whose probability clears the
/// threshold. Voxels of positive proposals are set to 1 inside the candidate
/// region; nothing else is touched and no morphology runs afterwards.
pub fn mask_from_probabilities(
    partition: &SuperpixelPartition,
    probs: &[f32],
    threshold: f32,
    full_dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<LabelVolume> {
    if probs.len() != partition.proposals.len() {
        return Err(Error::invalid("one probability per proposal required"));
    }
    let (ex, ey, ez) = partition.region.extents();
    let mut cropped = vec![0u8; ex * ey * ez];
    for (sp, &p) in partition.proposals.iter().zip(probs) {
        if p < threshold {
            continue;
        }
        for &(x, y) in &sp.pixels {
            cropped[x as usize + ex * (y as usize + ey * sp.slice)] = 1;
        }
    }
    let cropped = Volume::new((ex, ey, ez), spacing, cropped)?;
    embed(&cropped, &partition.region, full_dims, spacing)
}

/// Classify proposals and stack the positives into a full-frame mask.
pub fn predict_segmentation(
    model: &ForestModel,
    partition: &SuperpixelPartition,
    table: &FeatureTable,
    threshold: f32,
    full_dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
) -> Result<LabelVolume> {
    let probs = proposal_probabilities(model, table);
    mask_from_probabilities(partition, &probs, threshold, full_dims, spacing)
}

/// The calibration grid: probabilities 0.05, 0.10, ..., 0.95.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..=19).map(|k| k as f64 * 0.05)
}

/// Grid-search the threshold maximizing a mean-score closure; ties keep the
/// lowest threshold.
pub fn calibrate_grid(mut score: impl FnMut(f64) -> f64) -> f64 {
    let mut best_t = 0.05;
    let mut best_s = f64::NEG_INFINITY;
    for t in threshold_grid() {
        let s = score(t);
        if s > best_s {
            best_s = s;
            best_t = t;
        }
    }
    best_t
}

/// One training case ready for threshold calibration.
pub struct CalibrationCase<'a> {
    pub partition: &'a SuperpixelPartition,
    /// Forest probability per proposal.
    pub probs: Vec<f32>,
    /// Full-frame ground truth.
    pub gt: &'a LabelVolume,
}

/// Pick the probability threshold maximizing the mean training Dice.
pub fn calibrate_threshold(cases: &[CalibrationCase<'_>]) -> Result<f64> {
    if cases.is_empty() {
        return Err(Error::invalid("calibration needs at least one case"));
    }
    for c in cases {
        if c.gt.count_nonzero() == 0 {
            return Err(Error::invalid("calibration cases must have non-empty ground truth"));
        }
    }
    Ok(calibrate_grid(|t| {
        let mut acc = 0.0;
        for c in cases {
            let mask = mask_from_probabilities(
                c.partition,
                &c.probs,
                t as f32,
                c.gt.dims(),
                c.gt.spacing(),
            )
            .expect("probs match proposals");
            acc += crate::metrics::overlap_metrics(&mask, c.gt).expect("same dims").dsc;
        }
        acc / cases.len() as f64
    }))
}
