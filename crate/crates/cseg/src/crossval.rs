//! End-to-end cross-validation of the two-stage pipeline on a phantom
//! corpus, with CSV/JSON reporting.
//!
//! Per fold: stage-1 interior networks are trained on full slices of the
//! three views and localize every test case via pooled thresholding;
//! stage-2 interior networks (three views) and the axial boundary network
//! are retrained on candidate-region crops; the pooled stage-2 maps form
//! the threshold-calibrated `meanmax` variant, and boundary-driven
//! superpixels with a random forest form the `hnn-rf` variant. The
//! superpixel oracle and the regression-forest localization baseline run
//! alongside for comparison.
//!
//! Everything is deterministic in (corpus, config): parallel sections
//! reduce in fixed order and every random component is seeded from the
//! pipeline seed.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    calibrate_grid, calibrate_threshold, label_superpixels, mask_from_probabilities,
    partition_features, proposal_probabilities, train_forest, CalibrationCase,
};
use crate::error::{Error, Result};
use crate::forest::FeatureTable;
use crate::fusion::{pool_views, predict_volume, PoolingMode};
use crate::hnn::{compute_beta, forward, train, HnnParams, LossConfig, NetConfig};
use crate::localize::{
    bbox_stats, candidate_region, largest_component, morphology, tight_bbox, BoxStats,
    Connectivity, MorphOp,
};
use crate::metrics::{overlap_metrics, summarize, surface_distances, wilcoxon_signed_rank, Summary};
use crate::phantom::{split_folds, Case, PhantomConfig};
use crate::regforest::{predict_bbox, train_localizer, RegForestConfig};
use crate::superpixel::SuperpixelPartition;
use crate::volume::{
    crop, embed, extract_slices, window_rescale, BBox3, BoxSource, Image2, LabelVolume, ProbVolume,
    ViewPlane, Volume,
};

/// Full pipeline configuration; a single JSON document drives a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub phantom: PhantomConfig,
    /// Corpus size when the pipeline generates its own phantoms.
    pub n_cases: usize,
    pub folds: usize,
    pub seed: u64,
    /// Soft-tissue intensity window in HU.
    pub window: (i16, i16),
    pub stage1: NetConfig,
    pub stage2: NetConfig,
    pub boundary: NetConfig,
    /// Probability threshold of the candidate-region chain.
    pub threshold: f32,
    /// Padding in voxels around candidate and training boxes.
    pub pad: usize,
    /// Pooling used for localization and for the stage-2 interior channel.
    pub pooling: PoolingMode,
    /// Mean-filter radius of the watershed seed detector.
    pub smooth_radius: usize,
    /// Quantile of edge weights merged into level 2.
    pub merge_quartile: f64,
    /// Take every k-th slice when training stage-1 nets.
    pub stage1_slice_stride: usize,
    /// Take every k-th slice when training the boundary net.
    pub boundary_slice_stride: usize,
    pub rf_trees: usize,
    /// Cap on superpixels used to train the forest, per fold.
    pub max_rf_superpixels: usize,
    /// Train and evaluate the regression-forest localization baseline.
    pub with_baseline: bool,
    /// Evaluate single-view and mean/max pooling variants as well.
    pub with_ablation: bool,
    pub baseline: RegForestConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            phantom: PhantomConfig::default(),
            n_cases: 100,
            folds: 4,
            seed: 0,
            window: (-160, 240),
            stage1: NetConfig {
                epochs: 10,
                ..NetConfig::default()
            },
            stage2: NetConfig {
                epochs: 16,
                ..NetConfig::default()
            },
            boundary: NetConfig {
                epochs: 60,
                learning_rate: 2e-2,
                channels: vec![8, 12, 16],
                depth: vec![2, 1, 1],
                ..NetConfig::default()
            },
            threshold: 0.5,
            pad: 5,
            pooling: PoolingMode::MeanMax,
            smooth_radius: 1,
            merge_quartile: 0.25,
            stage1_slice_stride: 2,
            boundary_slice_stride: 2,
            rf_trees: 50,
            max_rf_superpixels: 100_000,
            with_baseline: true,
            with_ablation: true,
            baseline: RegForestConfig::default(),
        }
    }
}

/// One evaluated (case, variant) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub fold: usize,
    pub variant: String,
    pub dsc: Option<f64>,
    pub jaccard: Option<f64>,
    pub hausdorff_mm: Option<f64>,
    pub avgdist_mm: Option<f64>,
    pub recall: Option<f64>,
    pub volume_reduction: Option<f64>,
    pub error: Option<String>,
}

/// Aggregates of one variant over all test cases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantSummary {
    pub cases: usize,
    pub dsc: Summary,
    pub jaccard: Summary,
    pub hausdorff_mm: Option<Summary>,
    pub avgdist_mm: Option<Summary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub recall: Summary,
    pub volume_reduction: Summary,
    /// Fraction of test cases with 100% recall.
    pub full_recall_fraction: f64,
    pub min_recall: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldInfo {
    pub fold: usize,
    pub test_cases: Vec<String>,
    pub betas: BTreeMap<String, f64>,
    pub thresholds: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config: PipelineConfig,
    pub folds: Vec<FoldInfo>,
    pub records: Vec<CaseRecord>,
    pub summaries: BTreeMap<String, VariantSummary>,
    pub localization: Option<LocalizationSummary>,
    /// Two-sided Wilcoxon signed-rank p-values, meanmax vs hnn-rf.
    pub wilcoxon_dsc_p: Option<f64>,
    pub wilcoxon_hausdorff_p: Option<f64>,
    pub errors: Vec<String>,
}

/// Variant names used in reports.
pub mod variant {
    pub const MEANMAX: &str = "meanmax";
    pub const HNN_RF: &str = "hnn-rf";
    pub const ORACLE: &str = "oracle";
    pub const BASELINE: &str = "baseline-box";
}

fn net_seed(base: u64, fold: usize, role: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((fold as u64) << 8)
        .wrapping_add(role)
}

fn view_role(plane: ViewPlane) -> u64 {
    match plane {
        ViewPlane::Axial => 1,
        ViewPlane::Coronal => 2,
        ViewPlane::Sagittal => 3,
    }
}

/// Training pairs for one view over a set of cases (full frames).
fn view_dataset(
    windowed: &[&Volume<u8>],
    masks: &[&LabelVolume],
    plane: ViewPlane,
    slice_stride: usize,
) -> (Vec<(Image2<u8>, Image2<u8>)>, f64) {
    let stride = slice_stride.max(1);
    let mut pairs = Vec::new();
    let mut gt_slices = Vec::new();
    for (w, m) in windowed.iter().zip(masks) {
        let imgs = extract_slices(*w, plane);
        let gts = extract_slices(*m, plane);
        for (img, gt) in imgs.into_iter().zip(gts).step_by(stride) {
            gt_slices.push(gt.clone());
            pairs.push((img, gt));
        }
    }
    let beta = compute_beta(&gt_slices).expect("phantom corpora always contain organ voxels");
    (pairs, beta)
}

struct TrainedNet {
    params: HnnParams,
    cfg: NetConfig,
}

fn train_view_net(
    windowed: &[&Volume<u8>],
    masks: &[&LabelVolume],
    plane: ViewPlane,
    base_cfg: &NetConfig,
    seed: u64,
    slice_stride: usize,
) -> Result<(TrainedNet, f64)> {
    let (pairs, beta) = view_dataset(windowed, masks, plane, slice_stride);
    let mut cfg = base_cfg.clone();
    cfg.seed = seed;
    let loss_cfg = LossConfig::new(beta)?;
    let report = train(&cfg, &loss_cfg, &pairs)?;
    Ok((TrainedNet { params: report.params, cfg }, beta))
}

/// Pooled stage probability volume over the three views.
fn pooled_prediction(
    nets: &[TrainedNet; 3],
    vol: &Volume<u8>,
    pooling: PoolingMode,
) -> Result<ProbVolume> {
    let maps = [
        predict_volume(&nets[0].params, &nets[0].cfg, vol, ViewPlane::Axial)?,
        predict_volume(&nets[1].params, &nets[1].cfg, vol, ViewPlane::Coronal)?,
        predict_volume(&nets[2].params, &nets[2].cfg, vol, ViewPlane::Sagittal)?,
    ];
    pool_views(&maps, pooling)
}

fn per_view_predictions(nets: &[TrainedNet; 3], vol: &Volume<u8>) -> Result<[ProbVolume; 3]> {
    Ok([
        predict_volume(&nets[0].params, &nets[0].cfg, vol, ViewPlane::Axial)?,
        predict_volume(&nets[1].params, &nets[1].cfg, vol, ViewPlane::Coronal)?,
        predict_volume(&nets[2].params, &nets[2].cfg, vol, ViewPlane::Sagittal)?,
    ])
}

/// Threshold a pooled map and clean it up the same way the localizer does:
/// erode, largest component, dilate, with fallbacks for thin or empty masks.
pub fn postprocess_probability(prob: &ProbVolume, threshold: f32) -> LabelVolume {
    let thresholded = prob.map(|v| u8::from(v >= threshold)).expect("binary mask");
    if thresholded.count_nonzero() == 0 {
        return thresholded;
    }
    let eroded = morphology(&thresholded, MorphOp::Erode, 1);
    if eroded.count_nonzero() == 0 {
        largest_component(&thresholded, Connectivity::TwentySix)
    } else {
        let cc = largest_component(&eroded, Connectivity::TwentySix);
        morphology(&cc, MorphOp::Dilate, 1)
    }
}

/// The boundary scale triple for superpixels: the two coarsest side outputs
/// and the fused map.
fn boundary_scale_indices(stages: usize) -> (usize, usize) {
    match stages {
        0 | 1 => (0, 0),
        2 => (0, 1),
        m => (m - 2, m - 1),
    }
}

/// Per-axial-slice boundary maps of a cropped volume: scale triples for the
/// watershed plus the fused boundary volume.
fn boundary_maps(
    net: &TrainedNet,
    crop_windowed: &Volume<u8>,
) -> Result<(Vec<[Image2<f32>; 3]>, ProbVolume)> {
    let slices = extract_slices(crop_windowed, ViewPlane::Axial);
    let (s_a, s_b) = boundary_scale_indices(net.cfg.stages);
    let per_slice: Vec<([Image2<f32>; 3], Image2<f32>)> = slices
        .par_iter()
        .map(|slice| {
            let pred = forward(&net.params, &net.cfg, slice)?;
            Ok((
                [pred.sides[s_a].clone(), pred.sides[s_b].clone(), pred.fused.clone()],
                pred.fused,
            ))
        })
        .collect::<Result<_>>()?;
    let mut scales = Vec::with_capacity(per_slice.len());
    let mut fused = Vec::with_capacity(per_slice.len());
    for (s, f) in per_slice {
        scales.push(s);
        fused.push(f);
    }
    let fused_vol = crate::volume::assemble_volume(
        &fused,
        ViewPlane::Axial,
        crop_windowed.dims(),
        crop_windowed.spacing(),
    )?;
    Ok((scales, fused_vol))
}

/// Everything stage 2 derives from one case within a box.
struct CaseStage2 {
    region: BBox3,
    pooled: ProbVolume,
    views: Option<[ProbVolume; 3]>,
    partition: SuperpixelPartition,
    features: FeatureTable,
    gt_crop: LabelVolume,
}

#[allow(clippy::too_many_arguments)]
fn stage2_for_case(
    case: &Case,
    windowed: &Volume<u8>,
    region: BBox3,
    interior_nets: &[TrainedNet; 3],
    boundary_net: &TrainedNet,
    cfg: &PipelineConfig,
    keep_views: bool,
) -> Result<CaseStage2> {
    let crop_w = crop(windowed, &region)?;
    let views = per_view_predictions(interior_nets, &crop_w)?;
    let pooled = pool_views(&views, cfg.pooling)?;
    let (scales, fused_b) = boundary_maps(boundary_net, &crop_w)?;
    let partition = SuperpixelPartition::build(region, &scales, cfg.smooth_radius, cfg.merge_quartile)?;
    let ct_crop = crop(&case.ct, &region)?;
    let features = partition_features(&partition, &ct_crop, &pooled, &fused_b)?;
    let gt_crop = crop(&case.gt_interior, &region)?;
    Ok(CaseStage2 {
        region,
        pooled,
        views: keep_views.then_some(views),
        partition,
        features,
        gt_crop,
    })
}

fn full_frame_metrics(
    mask: &LabelVolume,
    gt: &LabelVolume,
) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<String>) {
    let overlap = overlap_metrics(mask, gt).expect("same dims");
    match surface_distances(mask, gt, gt.spacing()) {
        Ok(d) => (
            Some(overlap.dsc),
            Some(overlap.jaccard),
            Some(d.hausdorff_mm),
            Some(d.avgdist_mm),
            None,
        ),
        Err(e) => (
            Some(overlap.dsc),
            Some(overlap.jaccard),
            None,
            None,
            Some(format!("surface distances unavailable: {e}")),
        ),
    }
}

/// Run the full cross-validated pipeline over a corpus.
pub fn crossval_run(corpus: &[Case], cfg: &PipelineConfig) -> Result<Report> {
    if corpus.len() < cfg.folds {
        return Err(Error::invalid("corpus smaller than the fold count"));
    }
    cfg.stage1.validate()?;
    cfg.stage2.validate()?;
    cfg.boundary.validate()?;
    let t_start = std::time::Instant::now();

    let windowed: Vec<Volume<u8>> = corpus
        .par_iter()
        .map(|c| window_rescale(&c.ct, cfg.window))
        .collect::<Result<_>>()?;

    let ids: Vec<usize> = (0..corpus.len()).collect();
    let folds = split_folds(&ids, cfg.folds, cfg.seed)?;

    let mut records: Vec<CaseRecord> = Vec::new();
    let mut fold_infos = Vec::new();
    let mut errors: Vec<String> = Vec::new();

    for (f, test_idx) in folds.iter().enumerate() {
        log::info!("fold {f}: {} test cases", test_idx.len());
        let test_set: std::collections::BTreeSet<usize> = test_idx.iter().copied().collect();
        let train_idx: Vec<usize> = ids.iter().copied().filter(|i| !test_set.contains(i)).collect();

        let train_windowed: Vec<&Volume<u8>> = train_idx.iter().map(|&i| &windowed[i]).collect();
        let train_interior: Vec<&LabelVolume> = train_idx.iter().map(|&i| &corpus[i].gt_interior).collect();
        let train_boundary: Vec<&LabelVolume> = train_idx.iter().map(|&i| &corpus[i].gt_boundary).collect();

        let mut betas = BTreeMap::new();
        let mut thresholds = BTreeMap::new();

        // stage 1: three interior nets on full frames
        let mut stage1_nets = Vec::with_capacity(3);
        for plane in ViewPlane::ALL {
            let (net, beta) = train_view_net(
                &train_windowed,
                &train_interior,
                plane,
                &cfg.stage1,
                net_seed(cfg.seed, f, view_role(plane)),
                cfg.stage1_slice_stride,
            )?;
            betas.insert(format!("stage1-{}", plane.name()), beta);
            stage1_nets.push(net);
        }
        let stage1_nets: [TrainedNet; 3] = stage1_nets.try_into().map_err(|_| Error::invalid("three views"))?;

        // localization of the test cases
        let localization: Vec<(usize, Result<(LabelVolume, BBox3)>)> = test_idx
            .par_iter()
            .map(|&i| {
                let pooled = pooled_prediction(&stage1_nets, &windowed[i], cfg.pooling)?;
                Ok((i, candidate_region(&pooled, cfg.threshold, cfg.pad)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut test_boxes: BTreeMap<usize, (BBox3, Option<BoxStats>, Option<String>)> = BTreeMap::new();
        for (i, res) in localization {
            let (bbox, err) = match res {
                Ok((_, bbox)) => (bbox, None),
                Err(e) => (
                    BBox3::full(corpus[i].ct.dims()),
                    Some(format!("localization fell back to the full volume: {e}")),
                ),
            };
            let stats = bbox_stats(&bbox, &corpus[i].gt_interior).ok();
            test_boxes.insert(i, (bbox, stats, err));
        }

        // stage 2: zoomed nets on ground-truth boxes of the training cases
        let train_boxes: Vec<BBox3> = train_idx
            .iter()
            .map(|&i| {
                tight_bbox(&corpus[i].gt_interior, BoxSource::GroundTruth)
                    .expect("phantom masks are non-empty")
                    .padded(cfg.pad, corpus[i].ct.dims())
            })
            .collect();
        let crops_windowed: Vec<Volume<u8>> = train_idx
            .par_iter()
            .zip(&train_boxes)
            .map(|(&i, b)| crop(&windowed[i], b))
            .collect::<Result<_>>()?;
        let crops_interior: Vec<LabelVolume> = train_idx
            .par_iter()
            .zip(&train_boxes)
            .map(|(&i, b)| crop(&corpus[i].gt_interior, b))
            .collect::<Result<_>>()?;
        let crops_boundary: Vec<LabelVolume> = train_idx
            .par_iter()
            .zip(&train_boxes)
            .map(|(&i, b)| crop(&corpus[i].gt_boundary, b))
            .collect::<Result<_>>()?;
        let _ = &train_boundary; // full-frame boundary masks are not used; crops are

        let cw: Vec<&Volume<u8>> = crops_windowed.iter().collect();
        let ci: Vec<&LabelVolume> = crops_interior.iter().collect();
        let cb: Vec<&LabelVolume> = crops_boundary.iter().collect();

        let mut stage2_nets = Vec::with_capacity(3);
        for plane in ViewPlane::ALL {
            let (net, beta) = train_view_net(
                &cw,
                &ci,
                plane,
                &cfg.stage2,
                net_seed(cfg.seed, f, 10 + view_role(plane)),
                1,
            )?;
            betas.insert(format!("stage2-{}", plane.name()), beta);
            stage2_nets.push(net);
        }
        let stage2_nets: [TrainedNet; 3] = stage2_nets.try_into().map_err(|_| Error::invalid("three views"))?;
        let (boundary_net, boundary_beta) = train_view_net(
            &cw,
            &cb,
            ViewPlane::Axial,
            &cfg.boundary,
            net_seed(cfg.seed, f, 20),
            cfg.boundary_slice_stride,
        )?;
        betas.insert("boundary-axial".to_string(), boundary_beta);

        // stage-2 state for calibration (training cases, gt boxes)
        let train_stage2: Vec<CaseStage2> = train_idx
            .par_iter()
            .zip(&train_boxes)
            .map(|(&i, b)| {
                stage2_for_case(
                    &corpus[i],
                    &windowed[i],
                    *b,
                    &stage2_nets,
                    &boundary_net,
                    cfg,
                    cfg.with_ablation,
                )
            })
            .collect::<Result<_>>()?;

        // calibrate the pooled-variant threshold on full-frame dice
        let pool_variants: Vec<(String, Box<dyn Fn(&CaseStage2) -> ProbVolume + Sync>)> = {
            let mut v: Vec<(String, Box<dyn Fn(&CaseStage2) -> ProbVolume + Sync>)> = vec![(
                variant::MEANMAX.to_string(),
                Box::new(|s: &CaseStage2| s.pooled.clone()),
            )];
            if cfg.with_ablation {
                let single = |k: usize| {
                    move |s: &CaseStage2| s.views.as_ref().expect("views kept for ablation")[k].clone()
                };
                v.push((ViewPlane::Axial.name().to_string(), Box::new(single(0))));
                v.push((ViewPlane::Coronal.name().to_string(), Box::new(single(1))));
                v.push((ViewPlane::Sagittal.name().to_string(), Box::new(single(2))));
                v.push((
                    "mean-all".to_string(),
                    Box::new(|s: &CaseStage2| {
                        pool_views(s.views.as_ref().expect("views"), PoolingMode::MeanAll).expect("same dims")
                    }),
                ));
                v.push((
                    "max-all".to_string(),
                    Box::new(|s: &CaseStage2| {
                        pool_views(s.views.as_ref().expect("views"), PoolingMode::MaxAll).expect("same dims")
                    }),
                ));
            }
            v
        };

        let mut pool_thresholds: BTreeMap<String, f64> = BTreeMap::new();
        for (name, project) in &pool_variants {
            let pooled_maps: Vec<(ProbVolume, &CaseStage2, usize)> = train_stage2
                .iter()
                .zip(&train_idx)
                .map(|(s, &i)| (project(s), s, i))
                .collect();
            let t = calibrate_grid(|t| {
                let dices: Vec<f64> = pooled_maps
                    .par_iter()
                    .map(|(prob, s, i)| {
                        let mask = postprocess_probability(prob, t as f32);
                        let full = embed(&mask, &s.region, corpus[*i].ct.dims(), corpus[*i].ct.spacing())
                            .expect("region fits");
                        overlap_metrics(&full, &corpus[*i].gt_interior).expect("same dims").dsc
                    })
                    .collect();
                dices.iter().sum::<f64>() / dices.len() as f64
            });
            pool_thresholds.insert(name.clone(), t);
            thresholds.insert(name.clone(), t);
        }

        // random-forest training on the training folds' superpixels
        let mut rows: Vec<f32> = Vec::new();
        let mut labels: Vec<u8> = Vec::new();
        for s in &train_stage2 {
            let l = label_superpixels(&s.partition.proposals, &s.gt_crop);
            for (k, sp_label) in l.iter().enumerate() {
                rows.extend_from_slice(s.features.row(k));
                labels.push(*sp_label);
            }
        }
        // deterministic cap on the training set size
        if labels.len() > cfg.max_rf_superpixels {
            use rand::Rng;
            use rand_chacha::rand_core::SeedableRng;
            let mut order: Vec<usize> = (0..labels.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(net_seed(cfg.seed, f, 30));
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order.truncate(cfg.max_rf_superpixels);
            order.sort_unstable();
            let nf = crate::aggregate::FEATURE_COUNT;
            let mut new_rows = Vec::with_capacity(order.len() * nf);
            let mut new_labels = Vec::with_capacity(order.len());
            for &k in &order {
                new_rows.extend_from_slice(&rows[k * nf..(k + 1) * nf]);
                new_labels.push(labels[k]);
            }
            rows = new_rows;
            labels = new_labels;
        }
        let table = FeatureTable::new(crate::aggregate::FEATURE_COUNT, rows)?;
        let (rf_model, rf_diag) = train_forest(&table, &labels, cfg.rf_trees, net_seed(cfg.seed, f, 31))?;
        log::info!(
            "fold {f}: forest trained on {} superpixels, oob accuracy {:?}",
            labels.len(),
            rf_diag.oob_accuracy
        );

        // calibrate the forest probability threshold on training cases
        let calib_cases: Vec<CalibrationCase<'_>> = train_stage2
            .iter()
            .zip(&train_idx)
            .map(|(s, &i)| CalibrationCase {
                partition: &s.partition,
                probs: proposal_probabilities(&rf_model, &s.features),
                gt: &corpus[i].gt_interior,
            })
            .collect();
        let rf_threshold = calibrate_threshold(&calib_cases)?;
        thresholds.insert(variant::HNN_RF.to_string(), rf_threshold);

        // evaluate the test cases
        let test_results: Vec<Vec<CaseRecord>> = test_idx
            .par_iter()
            .map(|&i| {
                let case = &corpus[i];
                let (bbox, stats, loc_err) = test_boxes.get(&i).expect("computed above").clone();
                let mut recs = Vec::new();
                let recall = stats.as_ref().map(|s| s.recall);
                let volume_reduction = stats.as_ref().map(|s| s.volume_reduction);
                let s2 = match stage2_for_case(case, &windowed[i], bbox, &stage2_nets, &boundary_net, cfg, cfg.with_ablation) {
                    Ok(s) => s,
                    Err(e) => {
                        recs.push(CaseRecord {
                            case_id: case.id.clone(),
                            fold: f,
                            variant: "stage2".to_string(),
                            dsc: None,
                            jaccard: None,
                            hausdorff_mm: None,
                            avgdist_mm: None,
                            recall,
                            volume_reduction,
                            error: Some(format!("stage-2 failed: {e}")),
                        });
                        return recs;
                    }
                };

                // pooled variants
                for (name, project) in &pool_variants {
                    let t = pool_thresholds[name] as f32;
                    let mask = postprocess_probability(&project(&s2), t);
                    let full = embed(&mask, &s2.region, case.ct.dims(), case.ct.spacing()).expect("region fits");
                    let (dsc, jaccard, hd, avg, err) = full_frame_metrics(&full, &case.gt_interior);
                    recs.push(CaseRecord {
                        case_id: case.id.clone(),
                        fold: f,
                        variant: name.clone(),
                        dsc,
                        jaccard,
                        hausdorff_mm: hd,
                        avgdist_mm: avg,
                        recall,
                        volume_reduction,
                        error: err.or_else(|| loc_err.clone()),
                    });
                }

                // forest variant
                let probs = proposal_probabilities(&rf_model, &s2.features);
                let rf_mask = mask_from_probabilities(
                    &s2.partition,
                    &probs,
                    rf_threshold as f32,
                    case.ct.dims(),
                    case.ct.spacing(),
                )
                .expect("probs match proposals");
                let (dsc, jaccard, hd, avg, err) = full_frame_metrics(&rf_mask, &case.gt_interior);
                recs.push(CaseRecord {
                    case_id: case.id.clone(),
                    fold: f,
                    variant: variant::HNN_RF.to_string(),
                    dsc,
                    jaccard,
                    hausdorff_mm: hd,
                    avgdist_mm: avg,
                    recall,
                    volume_reduction,
                    error: err.or_else(|| loc_err.clone()),
                });

                // superpixel oracle
                match crate::superpixel::optimal_assignment(&s2.partition, &s2.gt_crop) {
                    Ok((oracle_mask, _)) => {
                        let full = embed(&oracle_mask, &s2.region, case.ct.dims(), case.ct.spacing())
                            .expect("region fits");
                        let (dsc, jaccard, hd, avg, err) = full_frame_metrics(&full, &case.gt_interior);
                        recs.push(CaseRecord {
                            case_id: case.id.clone(),
                            fold: f,
                            variant: variant::ORACLE.to_string(),
                            dsc,
                            jaccard,
                            hausdorff_mm: hd,
                            avgdist_mm: avg,
                            recall,
                            volume_reduction,
                            error: err,
                        });
                    }
                    Err(e) => recs.push(CaseRecord {
                        case_id: case.id.clone(),
                        fold: f,
                        variant: variant::ORACLE.to_string(),
                        dsc: None,
                        jaccard: None,
                        hausdorff_mm: None,
                        avgdist_mm: None,
                        recall,
                        volume_reduction,
                        error: Some(format!("oracle failed: {e}")),
                    }),
                }
                recs
            })
            .collect();
        for recs in test_results {
            records.extend(recs);
        }

        // regression-forest localization baseline
        if cfg.with_baseline {
            let train_cases: Vec<Case> = train_idx.iter().map(|&i| corpus[i].clone()).collect();
            let mut bl_cfg = cfg.baseline.clone();
            bl_cfg.seed = net_seed(cfg.seed, f, 40);
            match train_localizer(&train_cases, &bl_cfg) {
                Ok(model) => {
                    let baseline_recs: Vec<CaseRecord> = test_idx
                        .par_iter()
                        .map(|&i| {
                            let case = &corpus[i];
                            match predict_bbox(&model, &case.ct) {
                                Ok((bbox, _diag)) => {
                                    let stats = bbox_stats(&bbox, &case.gt_interior).ok();
                                    // box-vs-gt-box dice as mask overlap of the two boxes
                                    let gt_box = tight_bbox(&case.gt_interior, BoxSource::GroundTruth)
                                        .expect("non-empty");
                                    let dims = case.ct.dims();
                                    let box_mask = |b: &BBox3| {
                                        let mut m = vec![0u8; dims.0 * dims.1 * dims.2];
                                        for z in b.lo.2..b.hi.2 {
                                            for y in b.lo.1..b.hi.1 {
                                                for x in b.lo.0..b.hi.0 {
                                                    m[x + dims.0 * (y + dims.1 * z)] = 1;
                                                }
                                            }
                                        }
                                        Volume::new(dims, case.ct.spacing(), m).expect("mask")
                                    };
                                    let dice = overlap_metrics(&box_mask(&bbox), &box_mask(&gt_box))
                                        .expect("same dims")
                                        .dsc;
                                    CaseRecord {
                                        case_id: case.id.clone(),
                                        fold: f,
                                        variant: variant::BASELINE.to_string(),
                                        dsc: Some(dice),
                                        jaccard: None,
                                        hausdorff_mm: None,
                                        avgdist_mm: None,
                                        recall: stats.as_ref().map(|s| s.recall),
                                        volume_reduction: stats.as_ref().map(|s| s.volume_reduction),
                                        error: None,
                                    }
                                }
                                Err(e) => CaseRecord {
                                    case_id: case.id.clone(),
                                    fold: f,
                                    variant: variant::BASELINE.to_string(),
                                    dsc: None,
                                    jaccard: None,
                                    hausdorff_mm: None,
                                    avgdist_mm: None,
                                    recall: None,
                                    volume_reduction: None,
                                    error: Some(format!("baseline prediction failed: {e}")),
                                },
                            }
                        })
                        .collect();
                    records.extend(baseline_recs);
                }
                Err(e) => errors.push(format!("fold {f}: baseline training failed: {e}")),
            }
        }

        fold_infos.push(FoldInfo {
            fold: f,
            test_cases: test_idx.iter().map(|&i| corpus[i].id.clone()).collect(),
            betas,
            thresholds,
        });
    }

    records.sort_by(|a, b| a.case_id.cmp(&b.case_id).then(a.variant.cmp(&b.variant)));
    errors.extend(
        records
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("{} [{}]: {e}", r.case_id, r.variant))),
    );

    // per-variant summaries
    let mut by_variant: BTreeMap<String, Vec<&CaseRecord>> = BTreeMap::new();
    for r in &records {
        by_variant.entry(r.variant.clone()).or_default().push(r);
    }
    let mut summaries = BTreeMap::new();
    for (name, recs) in &by_variant {
        let dsc: Vec<f64> = recs.iter().filter_map(|r| r.dsc).collect();
        if dsc.is_empty() {
            continue;
        }
        let jaccard: Vec<f64> = recs.iter().filter_map(|r| r.jaccard).collect();
        let hd: Vec<f64> = recs.iter().filter_map(|r| r.hausdorff_mm).collect();
        let avg: Vec<f64> = recs.iter().filter_map(|r| r.avgdist_mm).collect();
        summaries.insert(
            name.clone(),
            VariantSummary {
                cases: recs.len(),
                dsc: summarize(&dsc)?,
                jaccard: if jaccard.is_empty() { summarize(&dsc)? } else { summarize(&jaccard)? },
                hausdorff_mm: if hd.is_empty() { None } else { Some(summarize(&hd)?) },
                avgdist_mm: if avg.is_empty() { None } else { Some(summarize(&avg)?) },
            },
        );
    }

    // localization summary from the meanmax rows (one per test case)
    let localization = {
        let meanmax: Vec<&CaseRecord> = records
            .iter()
            .filter(|r| r.variant == variant::MEANMAX)
            .collect();
        let recalls: Vec<f64> = meanmax.iter().filter_map(|r| r.recall).collect();
        let reductions: Vec<f64> = meanmax.iter().filter_map(|r| r.volume_reduction).collect();
        if recalls.is_empty() {
            None
        } else {
            Some(LocalizationSummary {
                recall: summarize(&recalls)?,
                volume_reduction: summarize(&reductions)?,
                full_recall_fraction: recalls.iter().filter(|&&r| r >= 1.0).count() as f64
                    / recalls.len() as f64,
                min_recall: recalls.iter().copied().fold(f64::INFINITY, f64::min),
            })
        }
    };

    // paired comparison between the two main variants
    let paired = |metric: fn(&CaseRecord) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mm: BTreeMap<&str, f64> = records
            .iter()
            .filter(|r| r.variant == variant::MEANMAX)
            .filter_map(|r| metric(r).map(|v| (r.case_id.as_str(), v)))
            .collect();
        for r in records.iter().filter(|r| r.variant == variant::HNN_RF) {
            if let (Some(&x), Some(y)) = (mm.get(r.case_id.as_str()), metric(r)) {
                a.push(x);
                b.push(y);
            }
        }
        (a, b)
    };
    let (dsc_a, dsc_b) = paired(|r| r.dsc);
    let wilcoxon_dsc_p = wilcoxon_signed_rank(&dsc_a, &dsc_b).ok();
    let (hd_a, hd_b) = paired(|r| r.hausdorff_mm);
    let wilcoxon_hausdorff_p = wilcoxon_signed_rank(&hd_a, &hd_b).ok();

    log::info!("crossval finished in {:.1}s", t_start.elapsed().as_secs_f64());
    Ok(Report {
        config: cfg.clone(),
        folds: fold_infos,
        records,
        summaries,
        localization,
        wilcoxon_dsc_p,
        wilcoxon_hausdorff_p,
        errors,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write `report.csv` (one row per case and variant) and `summary.json`.
pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    w.write_record([
        "case_id",
        "fold",
        "variant",
        "dsc",
        "jaccard",
        "hausdorff_mm",
        "avgdist_mm",
        "recall",
        "volume_reduction",
        "error",
    ])
    .map_err(csv_err)?;
    for r in &report.records {
        w.write_record([
            r.case_id.as_str(),
            &r.fold.to_string(),
            r.variant.as_str(),
            &fmt_opt(r.dsc),
            &fmt_opt(r.jaccard),
            &fmt_opt(r.hausdorff_mm),
            &fmt_opt(r.avgdist_mm),
            &fmt_opt(r.recall),
            &fmt_opt(r.volume_reduction),
            r.error.as_deref().unwrap_or(""),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        csv_err(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::generate_corpus;

    /// A deliberately tiny configuration for smoke-testing the machinery.
    pub(crate) fn toy_config() -> PipelineConfig {
        let mut cfg = PipelineConfig {
            phantom: PhantomConfig {
                dims: (32, 32, 32),
                semi_axes: (5.0, 8.0),
                distractors: (1, 2),
                ..Default::default()
            },
            n_cases: 8,
            folds: 4,
            with_baseline: false,
            with_ablation: false,
            max_rf_superpixels: 20_000,
            rf_trees: 10,
            ..Default::default()
        };
        for net in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.boundary] {
            net.epochs = 2;
            net.channels = vec![4, 6, 8];
        }
        cfg
    }

    #[test]
    fn toy_crossval_bookkeeping() {
        let cfg = toy_config();
        let corpus = generate_corpus(&cfg.phantom, cfg.n_cases, 1000).unwrap();
        let report = crossval_run(&corpus, &cfg).unwrap();

        // every case appears exactly once as a test case per variant
        for variant in [variant::MEANMAX, variant::HNN_RF, variant::ORACLE] {
            let mut ids: Vec<&str> = report
                .records
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.case_id.as_str())
                .collect();
            ids.sort_unstable();
            let mut expect: Vec<&str> = corpus.iter().map(|c| c.id.as_str()).collect();
            expect.sort_unstable();
            assert_eq!(ids, expect, "variant {variant}");
        }
        // the report carries the required schema columns
        assert!(report.summaries.contains_key(variant::MEANMAX));
        assert!(report.summaries.contains_key(variant::HNN_RF));
        let mm = &report.summaries[variant::MEANMAX];
        assert!(mm.dsc.mean.is_finite() && mm.jaccard.mean.is_finite());
    }
}
