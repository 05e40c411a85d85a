//! Deeply-supervised fully-convolutional network with side outputs and a
//! learned weighted fusion layer.
//!
//! The architecture follows the holistically-nested design: a stack of
//! convolutional stages at cumulative strides 1, 2, 4, ..., each feeding a
//! 1x1 side classifier whose activation map is bilinearly upsampled to input
//! resolution, plus a fusion layer that combines the side activations with
//! learned weights. Every side output and the fused output carry a
//! class-balanced cross-entropy loss, so supervision reaches every stage
//! directly.
//!
//! The same architecture serves the organ-interior and organ-boundary
//! models; they differ only in training targets.
//!
//! Desk-scale choices: stages downsample with 2x2 average pooling, the
//! nonlinearity is tanh, and side outputs upsample with fixed bilinear
//! interpolation. All three are smooth or linear, which keeps analytic
//! gradients within finite-difference tolerance everywhere.

mod math;

pub use math::{FeatureMap, Real};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Image2;

use math::{
    avg_pool2, avg_pool2_backward, conv3x3_tanh, conv3x3_tanh_backward, sigmoid, side_head_backward,
    side_head_forward, upsample_bilinear, upsample_bilinear_backward,
};

/// Clamp applied inside the loss logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Network architecture and optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Number of stages / side outputs.
    pub stages: usize,
    /// Convolution channels per stage.
    pub channels: Vec<usize>,
    /// Number of 3x3 conv layers per stage.
    pub depth: Vec<usize>,
    /// Cumulative stride of each stage; must be 1, 2, 4, ... (pooling by 2).
    pub strides: Vec<usize>,
    /// Weight of each side-output loss.
    pub alpha: Vec<f64>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stages: 3,
            channels: vec![6, 10, 14],
            depth: vec![1, 1, 1],
            strides: vec![1, 2, 4],
            alpha: vec![1.0, 1.0, 1.0],
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 12,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl NetConfig {
    /// A tiny net for gradient checking and unit tests.
    pub fn tiny(seed: u64) -> Self {
        NetConfig {
            stages: 3,
            channels: vec![4, 6, 8],
            depth: vec![1, 1, 1],
            strides: vec![1, 2, 4],
            alpha: vec![1.0, 1.0, 1.0],
            learning_rate: 1e-2,
            momentum: 0.9,
            epochs: 10,
            batch_size: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.stages;
        if !(1..=5).contains(&m) {
            return Err(Error::invalid(format!("stage count must be in 1..=5, got {m}")));
        }
        if self.channels.len() != m || self.depth.len() != m || self.strides.len() != m || self.alpha.len() != m {
            return Err(Error::invalid(
                "channels, depth, strides and alpha must all have one entry per stage",
            ));
        }
        for (s, &stride) in self.strides.iter().enumerate() {
            if stride != 1 << s {
                return Err(Error::invalid(format!(
                    "stage {s} must have cumulative stride {} (stages pool by 2), got {stride}",
                    1 << s
                )));
            }
        }
        if self.channels.iter().any(|&c| c == 0) || self.depth.iter().any(|&d| d == 0) {
            return Err(Error::invalid("channels and depth must be positive"));
        }
        // zero is admitted: it disables deep supervision for that side output
        if self.alpha.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid("side-loss weights must be finite and non-negative"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("learning rate must be positive and momentum in [0,1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        1 << (self.stages - 1)
    }
}

/// Class-balance weight for the per-pixel loss, constant over a training set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    beta: f64,
}

impl LossConfig {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid(format!("class balance must lie in (0,1), got {beta}")));
        }
        Ok(LossConfig { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Pool the class balance over an entire training set: the fraction of
/// negative pixels among all pixels. Slices with no positives at all still
/// contribute, which is the point of pooling.
pub fn compute_beta(masks: &[Image2<u8>]) -> Result<f64> {
    let mut total = 0usize;
    let mut positive = 0usize;
    for m in masks {
        total += m.len();
        positive += m.data.iter().filter(|&&v| v != 0).count();
    }
    if total == 0 {
        return Err(Error::InvalidTrainingSet("no pixels in the training set".into()));
    }
    if positive == 0 {
        return Err(Error::InvalidTrainingSet(
            "no positive pixels anywhere in the training set".into(),
        ));
    }
    Ok((total - positive) as f64 / total as f64)
}

/// All learnable tensors of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    /// Per-stage stacks of 3x3 conv layers.
    pub stages: Vec<Vec<Conv2dParams<F>>>,
    /// Per-stage 1x1 side classifiers.
    pub side: Vec<SideParams<F>>,
    /// Fusion weights, one per side output.
    pub fuse_w: Vec<F>,
    pub fuse_b: F,
}

pub type HnnParams = Params<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub w: Vec<F>,
    pub b: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideParams<F> {
    pub w: Vec<F>,
    pub b: F,
}

impl<F: Real> Params<F> {
    /// Zero-valued parameters with shapes from the config.
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut in_ch = 1usize;
        for s in 0..cfg.stages {
            let mut layers = Vec::with_capacity(cfg.depth[s]);
            for _ in 0..cfg.depth[s] {
                layers.push(Conv2dParams {
                    in_ch,
                    out_ch: cfg.channels[s],
                    w: vec![F::ZERO; cfg.channels[s] * in_ch * 9],
                    b: vec![F::ZERO; cfg.channels[s]],
                });
                in_ch = cfg.channels[s];
            }
            stages.push(layers);
        }
        let side = (0..cfg.stages)
            .map(|s| SideParams {
                w: vec![F::ZERO; cfg.channels[s]],
                b: F::ZERO,
            })
            .collect();
        Ok(Params {
            stages,
            side,
            fuse_w: vec![F::ZERO; cfg.stages],
            fuse_b: F::ZERO,
        })
    }

    /// Glorot-uniform initialization; fusion weights start at 1/M so the
    /// fused activation begins as the mean of the side activations.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layers in &mut p.stages {
            for layer in layers {
                let limit = (6.0 / ((layer.in_ch + layer.out_ch) * 9) as f64).sqrt();
                for w in &mut layer.w {
                    *w = F::from_f64(rng.gen_range(-limit..limit));
                }
            }
        }
        for head in &mut p.side {
            let limit = (6.0 / (head.w.len() + 1) as f64).sqrt();
            for w in &mut head.w {
                *w = F::from_f64(rng.gen_range(-limit..limit));
            }
        }
        let m = p.fuse_w.len();
        for w in &mut p.fuse_w {
            *w = F::from_f64(1.0 / m as f64);
        }
        Ok(p)
    }

    pub fn n_params(&self) -> usize {
        let conv: usize = self.stages.iter().flatten().map(|l| l.w.len() + l.b.len()).sum();
        let side: usize = self.side.iter().map(|s| s.w.len() + 1).sum();
        conv + side + self.fuse_w.len() + 1
    }

    /// Visit every parameter in the declared serialization order: stage
    /// convs (weights then bias, stages then layers in order), side heads,
    /// fusion weights, fusion bias.
    pub fn for_each(&self, mut f: impl FnMut(F)) {
        for layers in &self.stages {
            for layer in layers {
                layer.w.iter().for_each(|&v| f(v));
                layer.b.iter().for_each(|&v| f(v));
            }
        }
        for head in &self.side {
            head.w.iter().for_each(|&v| f(v));
            f(head.b);
        }
        self.fuse_w.iter().for_each(|&v| f(v));
        f(self.fuse_b);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut F)) {
        for layers in &mut self.stages {
            for layer in layers {
                layer.w.iter_mut().for_each(&mut f);
                layer.b.iter_mut().for_each(&mut f);
            }
        }
        for head in &mut self.side {
            head.w.iter_mut().for_each(&mut f);
            f(&mut head.b);
        }
        self.fuse_w.iter_mut().for_each(&mut f);
        f(&mut self.fuse_b);
    }

    pub fn to_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n_params());
        self.for_each(|v| out.push(v));
        out
    }

    pub fn assign_flat(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter();
        self.for_each_mut(|v| *v = *it.next().expect("length checked"));
    }

    pub fn convert<G: Real>(&self) -> Params<G> {
        Params {
            stages: self
                .stages
                .iter()
                .map(|layers| {
                    layers
                        .iter()
                        .map(|l| Conv2dParams {
                            in_ch: l.in_ch,
                            out_ch: l.out_ch,
                            w: l.w.iter().map(|v| G::from_f64(v.to_f64())).collect(),
                            b: l.b.iter().map(|v| G::from_f64(v.to_f64())).collect(),
                        })
                        .collect()
                })
                .collect(),
            side: self
                .side
                .iter()
                .map(|s| SideParams {
                    w: s.w.iter().map(|v| G::from_f64(v.to_f64())).collect(),
                    b: G::from_f64(s.b.to_f64()),
                })
                .collect(),
            fuse_w: self.fuse_w.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            fuse_b: G::from_f64(self.fuse_b.to_f64()),
        }
    }

    /// `self += other * k`, elementwise over all tensors.
    pub fn add_scaled(&mut self, other: &Params<F>, k: F) {
        let mut flat = Vec::with_capacity(other.n_params());
        other.for_each(|v| flat.push(v));
        let mut it = flat.iter();
        self.for_each_mut(|v| *v += *it.next().expect("same shape") * k);
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|v| ok &= v.is_finite());
        ok
    }
}

/// Per-slice network outputs: the fused probability map, the per-stage side
/// probability maps, and the retained side activations the fusion consumed.
#[derive(Debug, Clone)]
pub struct SidePrediction {
    pub fused: Image2<f32>,
    pub sides: Vec<Image2<f32>>,
    pub activations: Vec<Image2<f32>>,
}

/// Symmetric mirror index for reflect padding.
#[inline]
fn mirror(i: usize, n: usize) -> usize {
    let p = i % (2 * n);
    if p < n {
        p
    } else {
        2 * n - 1 - p
    }
}

/// Everything the backward pass needs from a forward evaluation.
struct Tape<F: Real> {
    /// (height, width) before padding.
    orig: (usize, usize),
    /// (height, width) after reflect padding to a stride multiple.
    padded: (usize, usize),
    /// Input of each stage (stage 0: the normalized image plane).
    stage_inputs: Vec<FeatureMap<F>>,
    /// Post-tanh outputs of every conv layer, per stage.
    stage_acts: Vec<Vec<FeatureMap<F>>>,
    /// Side activations upsampled to padded resolution and cropped to orig.
    side_act: Vec<Vec<F>>,
    /// Fused pre-sigmoid activation at orig resolution.
    fused_pre: Vec<F>,
}

fn normalize_input<F: Real>(image: &Image2<u8>, padded: (usize, usize)) -> FeatureMap<F> {
    let (ph, pw) = padded;
    let mut plane = FeatureMap::zeros(1, ph, pw);
    let dst = plane.plane_mut(0);
    for y in 0..ph {
        let sy = mirror(y, image.height);
        for x in 0..pw {
            let sx = mirror(x, image.width);
            dst[y * pw + x] = F::from_f64(image.at(sx, sy) as f64 / 255.0 - 0.5);
        }
    }
    plane
}

fn crop_plane<F: Real>(src: &[F], padded: (usize, usize), orig: (usize, usize)) -> Vec<F> {
    let (ph, pw) = padded;
    let (h, w) = orig;
    debug_assert_eq!(src.len(), ph * pw);
    if (h, w) == (ph, pw) {
        return src.to_vec();
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend_from_slice(&src[y * pw..y * pw + w]);
    }
    out
}

fn uncrop_plane<F: Real>(src: &[F], padded: (usize, usize), orig: (usize, usize)) -> Vec<F> {
    let (ph, pw) = padded;
    let (h, w) = orig;
    if (h, w) == (ph, pw) {
        return src.to_vec();
    }
    let mut out = vec![F::ZERO; ph * pw];
    for y in 0..h {
        out[y * pw..y * pw + w].copy_from_slice(&src[y * w..y * w + w]);
    }
    out
}

fn forward_tape<F: Real>(params: &Params<F>, cfg: &NetConfig, image: &Image2<u8>) -> Tape<F> {
    let stride = cfg.max_stride();
    let ph = image.height.div_ceil(stride) * stride;
    let pw = image.width.div_ceil(stride) * stride;
    let padded = (ph, pw);
    let orig = (image.height, image.width);

    let mut stage_inputs = Vec::with_capacity(cfg.stages);
    let mut stage_acts = Vec::with_capacity(cfg.stages);
    let mut side_act = Vec::with_capacity(cfg.stages);

    let mut current = normalize_input::<F>(image, padded);
    for s in 0..cfg.stages {
        if s > 0 {
            current = avg_pool2(&current);
        }
        stage_inputs.push(current.clone());
        let mut acts = Vec::with_capacity(cfg.depth[s]);
        for layer in &params.stages[s] {
            current = conv3x3_tanh(layer.in_ch, layer.out_ch, &layer.w, &layer.b, &current);
            acts.push(current.clone());
        }
        let raw = side_head_forward(&params.side[s].w, params.side[s].b, &current);
        let factor = cfg.strides[s];
        let up = upsample_bilinear(&raw, current.h, current.w, factor);
        side_act.push(crop_plane(&up, padded, orig));
        stage_acts.push(acts);
    }

    let n = orig.0 * orig.1;
    let mut fused_pre = vec![params.fuse_b; n];
    for (m, act) in side_act.iter().enumerate() {
        let hm = params.fuse_w[m];
        for (f, &a) in fused_pre.iter_mut().zip(act) {
            *f += hm * a;
        }
    }

    Tape {
        orig,
        padded,
        stage_inputs,
        stage_acts,
        side_act,
        fused_pre,
    }
}

fn tape_to_prediction(tape: &Tape<f32>) -> SidePrediction {
    let (h, w) = tape.orig;
    let to_img = |v: Vec<f32>| Image2 { width: w, height: h, data: v };
    SidePrediction {
        fused: to_img(tape.fused_pre.iter().map(|&a| sigmoid(a)).collect()),
        sides: tape
            .side_act
            .iter()
            .map(|act| to_img(act.iter().map(|&a| sigmoid(a)).collect()))
            .collect(),
        activations: tape.side_act.iter().map(|act| to_img(act.clone())).collect(),
    }
}

/// Run the network on one slice. Images whose dims are not divisible by the
/// largest stride are reflect-padded internally and the outputs cropped, so
/// every returned map matches the input resolution.
pub fn forward(params: &HnnParams, cfg: &NetConfig, image: &Image2<u8>) -> Result<SidePrediction> {
    cfg.validate()?;
    let tape = forward_tape(params, cfg, image);
    let pred = tape_to_prediction(&tape);
    if pred.fused.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite activations in forward pass".into()));
    }
    Ok(pred)
}

/// Class-balanced cross-entropy of a probability map against a binary mask:
/// `-beta * sum_{j in Y+} log p_j - (1-beta) * sum_{j in Y-} log(1 - p_j)`,
/// with probabilities clamped to `[eps, 1-eps]`. Accumulates in f64.
pub fn side_loss(pred: &Image2<f32>, gt: &Image2<u8>, loss_cfg: &LossConfig) -> Result<f64> {
    if pred.width != gt.width || pred.height != gt.height {
        return Err(Error::invalid(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let beta = loss_cfg.beta;
    let mut acc = 0.0f64;
    for (&p, &y) in pred.data.iter().zip(&gt.data) {
        let p = (p as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y != 0 {
            acc -= beta * p.ln();
        } else {
            acc -= (1.0 - beta) * (1.0 - p).ln();
        }
    }
    Ok(acc)
}

/// Loss of one activation plane directly from pre-sigmoid activations;
/// shares the clamping convention with [`side_loss`].
fn activation_loss<F: Real>(act: &[F], gt: &Image2<u8>, beta: f64) -> f64 {
    let mut acc = 0.0f64;
    for (&a, &y) in act.iter().zip(&gt.data) {
        let p = sigmoid(a).to_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
        if y != 0 {
            acc -= beta * p.ln();
        } else {
            acc -= (1.0 - beta) * (1.0 - p).ln();
        }
    }
    acc
}

/// Gradient of the class-balanced cross-entropy with respect to the
/// pre-sigmoid activation: `beta * (p - 1)` on positives, `(1 - beta) * p`
/// on negatives. The value clamp only bites once sigmoids saturate past
/// `PROB_EPS`, where this differs from the clamped loss by less than the
/// finite-difference tolerance.
#[inline]
fn activation_loss_grad<F: Real>(a: F, positive: bool, beta: f64) -> F {
    let p = sigmoid(a).to_f64();
    let g = if positive { beta * (p - 1.0) } else { (1.0 - beta) * p };
    F::from_f64(g)
}

/// Deep-supervision objective for one training pair: the weighted sum of the
/// side-output losses plus the fusion loss.
pub fn total_objective(
    params: &HnnParams,
    cfg: &NetConfig,
    loss_cfg: &LossConfig,
    image: &Image2<u8>,
    gt: &Image2<u8>,
) -> Result<f64> {
    cfg.validate()?;
    if image.width != gt.width || image.height != gt.height {
        return Err(Error::invalid("image and ground truth dims differ"));
    }
    let tape = forward_tape(params, cfg, image);
    Ok(objective_from_tape(&tape, cfg, loss_cfg, gt))
}

fn objective_from_tape<F: Real>(tape: &Tape<F>, cfg: &NetConfig, loss_cfg: &LossConfig, gt: &Image2<u8>) -> f64 {
    let beta = loss_cfg.beta;
    let mut total = 0.0;
    for (m, act) in tape.side_act.iter().enumerate() {
        total += cfg.alpha[m] * activation_loss(act, gt, beta);
    }
    total + activation_loss(&tape.fused_pre, gt, beta)
}

/// Analytic gradient of [`total_objective`]. Returns (loss, gradients).
fn backward<F: Real>(
    params: &Params<F>,
    cfg: &NetConfig,
    loss_cfg: &LossConfig,
    image: &Image2<u8>,
    gt: &Image2<u8>,
) -> (f64, Params<F>) {
    let tape = forward_tape(params, cfg, image);
    let loss = objective_from_tape(&tape, cfg, loss_cfg, gt);
    let beta = loss_cfg.beta;
    let mut grads = Params::<F>::zeros(cfg).expect("config validated by caller");

    // fused loss gradient at the fused pre-activation
    let n = tape.orig.0 * tape.orig.1;
    let mut g_fused = vec![F::ZERO; n];
    for j in 0..n {
        g_fused[j] = activation_loss_grad(tape.fused_pre[j], gt.data[j] != 0, beta);
    }
    // fusion weight/bias gradients
    for m in 0..cfg.stages {
        let mut dot = F::ZERO;
        for (&g, &a) in g_fused.iter().zip(&tape.side_act[m]) {
            dot += g * a;
        }
        grads.fuse_w[m] = dot;
    }
    let mut bsum = F::ZERO;
    for &g in &g_fused {
        bsum += g;
    }
    grads.fuse_b = bsum;

    // per-stage: gradient on the cropped side activation plane
    let mut stage_out_grad: Vec<Option<FeatureMap<F>>> = vec![None; cfg.stages];
    for m in 0..cfg.stages {
        let alpha = F::from_f64(cfg.alpha[m]);
        let hm = params.fuse_w[m];
        let act = &tape.side_act[m];
        let mut g_act = vec![F::ZERO; n];
        for j in 0..n {
            let side = activation_loss_grad(act[j], gt.data[j] != 0, beta);
            g_act[j] = alpha * side + hm * g_fused[j];
        }
        // through crop, upsample, side head
        let padded_grad = uncrop_plane(&g_act, tape.padded, tape.orig);
        let factor = cfg.strides[m];
        let sh = tape.padded.0 / factor;
        let sw = tape.padded.1 / factor;
        let raw_grad = upsample_bilinear_backward(&padded_grad, sh, sw, factor);
        let stage_feat = tape.stage_acts[m].last().expect("depth >= 1");
        let head_grad = &mut grads.side[m];
        let g_in = side_head_backward(
            &params.side[m].w,
            stage_feat,
            &raw_grad,
            &mut head_grad.w,
            &mut head_grad.b,
        );
        stage_out_grad[m] = Some(g_in);
    }

    // conv stacks, last stage first; pooled gradient flows to the stage below
    let mut pooled_back: Option<FeatureMap<F>> = None;
    for s in (0..cfg.stages).rev() {
        let mut g_out = stage_out_grad[s].take().expect("set above");
        if let Some(p) = pooled_back.take() {
            debug_assert_eq!(p.data.len(), g_out.data.len());
            for (a, b) in g_out.data.iter_mut().zip(&p.data) {
                *a += *b;
            }
        }
        for (l, layer) in params.stages[s].iter().enumerate().rev() {
            let input = if l == 0 { &tape.stage_inputs[s] } else { &tape.stage_acts[s][l - 1] };
            let output = &tape.stage_acts[s][l];
            let layer_grad = &mut grads.stages[s][l];
            g_out = conv3x3_tanh_backward(
                layer.in_ch,
                layer.out_ch,
                &layer.w,
                input,
                output,
                &g_out,
                &mut layer_grad.w,
                &mut layer_grad.b,
            );
        }
        if s > 0 {
            pooled_back = Some(avg_pool2_backward(&g_out));
        }
    }

    (loss, grads)
}

/// Training log: per-epoch mean per-pixel loss.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub params: HnnParams,
    pub epoch_loss: Vec<f64>,
}

/// Train with SGD plus momentum. Per-sample gradients are normalized by
/// pixel count so the step size is independent of slice size; samples within
/// a batch are evaluated in parallel and reduced in a fixed order, so the
/// result is bit-reproducible for a given config.
pub fn train(
    cfg: &NetConfig,
    loss_cfg: &LossConfig,
    dataset: &[(Image2<u8>, Image2<u8>)],
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidTrainingSet("empty dataset".into()));
    }
    for (img, gt) in dataset {
        if img.width != gt.width || img.height != gt.height {
            return Err(Error::InvalidTrainingSet("image and mask dims differ".into()));
        }
    }
    let mut params = Params::<f32>::init(cfg, cfg.seed)?;
    let n = params.n_params();
    let mut velocity = vec![0.0f32; n];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9));
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut loss_sum = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            // per-sample gradients in parallel, reduced in index order
            let results: Vec<(f64, Params<f32>, usize)> = batch
                .par_iter()
                .map(|&i| {
                    let (img, gt) = &dataset[i];
                    let (loss, grads) = backward(&params, cfg, loss_cfg, img, gt);
                    (loss, grads, img.len())
                })
                .collect();
            let mut batch_grad = vec![0.0f32; n];
            for (loss, grads, pixels) in &results {
                loss_sum += loss / *pixels as f64;
                let scale = 1.0 / (*pixels as f32 * batch.len() as f32);
                let mut k = 0;
                grads.for_each(|g| {
                    batch_grad[k] += g * scale;
                    k += 1;
                });
            }
            let lr = cfg.learning_rate as f32;
            let mu = cfg.momentum as f32;
            let mut flat = params.to_flat();
            for k in 0..n {
                velocity[k] = mu * velocity[k] - lr * batch_grad[k];
                flat[k] += velocity[k];
            }
            params.assign_flat(&flat);
        }
        let mean = loss_sum / dataset.len() as f64;
        if !mean.is_finite() || !params.all_finite() {
            return Err(Error::NumericFailure(format!(
                "training diverged at epoch {epoch}: mean loss {mean}"
            )));
        }
        log::info!("epoch {epoch}: mean per-pixel loss {mean:.6}");
        epoch_loss.push(mean);
    }
    Ok(TrainReport { params, epoch_loss })
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare analytic gradients of the objective against central finite
/// differences, entirely in f64. All fusion and side-head coordinates are
/// checked, plus enough randomly sampled convolution coordinates to reach
/// `min_coords`.
pub fn grad_check(
    params: &HnnParams,
    cfg: &NetConfig,
    loss_cfg: &LossConfig,
    image: &Image2<u8>,
    gt: &Image2<u8>,
    min_coords: usize,
    seed: u64,
) -> Result<GradCheck> {
    cfg.validate()?;
    let p64: Params<f64> = params.convert();
    let (_, analytic) = backward(&p64, cfg, loss_cfg, image, gt);
    let analytic_flat = analytic.to_flat();
    let base_flat = p64.to_flat();
    let n = base_flat.len();

    // coordinate set: all fusion + side parameters, then random conv coords
    let conv_count: usize = p64.stages.iter().flatten().map(|l| l.w.len() + l.b.len()).sum();
    let mut coords: Vec<usize> = (conv_count..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while coords.len() < min_coords.min(n) {
        let c = rng.gen_range(0..conv_count);
        if !coords.contains(&c) {
            coords.push(c);
        }
    }

    let step = 1e-3;
    let mut scratch = p64.clone();
    let mut max_rel = 0.0f64;
    for &c in &coords {
        let mut flat = base_flat.clone();
        flat[c] = base_flat[c] + step;
        scratch.assign_flat(&flat);
        let tape_p = forward_tape(&scratch, cfg, image);
        let lp = objective_from_tape(&tape_p, cfg, loss_cfg, gt);
        flat[c] = base_flat[c] - step;
        scratch.assign_flat(&flat);
        let tape_m = forward_tape(&scratch, cfg, image);
        let lm = objective_from_tape(&tape_m, cfg, loss_cfg, gt);
        let numeric = (lp - lm) / (2.0 * step);
        let a = analytic_flat[c];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked: coords.len(),
    })
}

#[cfg(test)]
mod tests;
