//! Multi-view inference and voxelwise pooling of probability volumes.
//!
//! A trained interior network is applied slice-by-slice in one of the three
//! orthogonal planes and the per-slice fused maps are re-stacked into a 3D
//! probability volume. Several views of the same scan are then combined with
//! fixed voxelwise pooling functions; the mean-of-two-largest variant keeps
//! the two views that agree and drops the dissenting one.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hnn::{forward, HnnParams, NetConfig};
use crate::volume::{assemble_volume, extract_slices, ProbVolume, ViewPlane, Volume};

/// Voxelwise pooling function over per-view probability volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolingMode {
    /// Pass one view through unchanged.
    Single(ViewPlane),
    /// Arithmetic mean of two views.
    MeanPair(ViewPlane, ViewPlane),
    /// Arithmetic mean of all inputs.
    MeanAll,
    /// Voxelwise maximum of all inputs.
    MaxAll,
    /// Mean of the two largest of exactly three inputs.
    MeanMax,
}

impl PoolingMode {
    /// Number of input volumes the mode consumes.
    pub fn arity(&self) -> Option<usize> {
        match self {
            PoolingMode::Single(_) => Some(1),
            PoolingMode::MeanPair(_, _) => Some(2),
            PoolingMode::MeanAll | PoolingMode::MaxAll => None,
            PoolingMode::MeanMax => Some(3),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PoolingMode::Single(p) => p.name().to_string(),
            PoolingMode::MeanPair(a, b) => format!("mean({},{})", a.name(), b.name()),
            PoolingMode::MeanAll => "mean-all".to_string(),
            PoolingMode::MaxAll => "max-all".to_string(),
            PoolingMode::MeanMax => "meanmax".to_string(),
        }
    }
}

/// Slice the volume in `plane`, run the network on every slice, and
/// re-assemble the fused per-slice outputs into a probability volume with
/// the input's dims and spacing. Slices are processed in parallel.
pub fn predict_volume(
    params: &HnnParams,
    cfg: &NetConfig,
    vol: &Volume<u8>,
    plane: ViewPlane,
) -> Result<ProbVolume> {
    let slices = extract_slices(vol, plane);
    let outputs: Vec<_> = slices
        .par_iter()
        .enumerate()
        .map(|(k, slice)| {
            forward(params, cfg, slice).map(|p| p.fused).map_err(|e| {
                Error::NumericFailure(format!("{} slice {k}: {e}", plane.name()))
            })
        })
        .collect::<Result<_>>()?;
    assemble_volume(&outputs, plane, vol.dims(), vol.spacing())
}

/// Pool per-view probability volumes voxelwise.
///
/// Arithmetic runs in f64 so pooling identical maps reproduces them exactly.
pub fn pool_views(maps: &[ProbVolume], mode: PoolingMode) -> Result<ProbVolume> {
    if maps.is_empty() {
        return Err(Error::invalid("pooling needs at least one input volume"));
    }
    if let Some(arity) = mode.arity() {
        if maps.len() != arity {
            return Err(Error::invalid(format!(
                "{} expects {arity} volumes, got {}",
                mode.label(),
                maps.len()
            )));
        }
    }
    let dims = maps[0].dims();
    for m in maps {
        if m.dims() != dims {
            return Err(Error::invalid(format!(
                "pooled volumes must share dims: {:?} vs {:?}",
                dims,
                m.dims()
            )));
        }
    }
    let n = maps[0].len();
    let mut out = Vec::with_capacity(n);
    match mode {
        PoolingMode::Single(_) => out.extend_from_slice(maps[0].data()),
        PoolingMode::MeanPair(_, _) | PoolingMode::MeanAll => {
            let k = maps.len() as f64;
            for j in 0..n {
                let mut s = 0.0f64;
                for m in maps {
                    s += m.data()[j] as f64;
                }
                out.push((s / k) as f32);
            }
        }
        PoolingMode::MaxAll => {
            for j in 0..n {
                let mut v = maps[0].data()[j];
                for m in &maps[1..] {
                    v = v.max(m.data()[j]);
                }
                out.push(v);
            }
        }
        PoolingMode::MeanMax => {
            for j in 0..n {
                let a = maps[0].data()[j] as f64;
                let b = maps[1].data()[j] as f64;
                let c = maps[2].data()[j] as f64;
                let min = a.min(b).min(c);
                out.push(((a + b + c - min) / 2.0) as f32);
            }
        }
    }
    Volume::new(dims, maps[0].spacing(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hnn::Params;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prob(dims: (usize, usize, usize), data: Vec<f32>) -> ProbVolume {
        Volume::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn pooling_arithmetic_examples() {
        let a = prob((1, 1, 1), vec![0.2]);
        let b = prob((1, 1, 1), vec![0.5]);
        let c = prob((1, 1, 1), vec![0.8]);
        let maps = [a, b, c];
        assert_eq!(pool_views(&maps, PoolingMode::MaxAll).unwrap().data()[0], 0.8);
        assert_eq!(pool_views(&maps, PoolingMode::MeanAll).unwrap().data()[0], 0.5);
        assert!((pool_views(&maps, PoolingMode::MeanMax).unwrap().data()[0] - 0.65).abs() < 1e-7);
    }

    #[test]
    fn pooling_identical_maps_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..27).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = prob((3, 3, 3), data);
        let maps = [m.clone(), m.clone(), m.clone()];
        for mode in [PoolingMode::MeanAll, PoolingMode::MaxAll, PoolingMode::MeanMax] {
            let pooled = pool_views(&maps, mode).unwrap();
            assert_eq!(pooled.data(), m.data(), "{}", mode.label());
        }
        let single = pool_views(std::slice::from_ref(&m), PoolingMode::Single(ViewPlane::Axial)).unwrap();
        assert_eq!(single.data(), m.data());
        let pair = pool_views(&maps[..2], PoolingMode::MeanPair(ViewPlane::Axial, ViewPlane::Coronal)).unwrap();
        assert_eq!(pair.data(), m.data());
    }

    #[test]
    fn pooling_ordering_chain_and_commutativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let vals: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let maps = [
                prob((1, 1, 1), vec![vals[0]]),
                prob((1, 1, 1), vec![vals[1]]),
                prob((1, 1, 1), vec![vals[2]]),
            ];
            let mean = pool_views(&maps, PoolingMode::MeanAll).unwrap().data()[0];
            let meanmax = pool_views(&maps, PoolingMode::MeanMax).unwrap().data()[0];
            let max = pool_views(&maps, PoolingMode::MaxAll).unwrap().data()[0];
            assert!(mean <= meanmax && meanmax <= max, "{vals:?}");
            assert!((0.0..=1.0).contains(&mean) && (0.0..=1.0).contains(&max));

            // commutativity under input permutation
            let perm = [maps[2].clone(), maps[0].clone(), maps[1].clone()];
            for mode in [PoolingMode::MeanAll, PoolingMode::MaxAll, PoolingMode::MeanMax] {
                assert_eq!(
                    pool_views(&maps, mode).unwrap().data(),
                    pool_views(&perm, mode).unwrap().data()
                );
            }
        }
    }

    #[test]
    fn pooling_arity_and_dims_checked() {
        let a = prob((2, 2, 2), vec![0.1; 8]);
        let b = prob((2, 2, 1), vec![0.1; 4]);
        assert!(pool_views(&[a.clone()], PoolingMode::MeanMax).is_err());
        assert!(pool_views(&[a.clone(), b], PoolingMode::MeanAll).is_err());
        assert!(pool_views(&[], PoolingMode::MeanAll).is_err());
        assert!(pool_views(&[a], PoolingMode::Single(ViewPlane::Axial)).is_ok());
    }

    #[test]
    fn constant_half_net_yields_half_volume() {
        let cfg = NetConfig::tiny(0);
        let params = Params::<f32>::zeros(&cfg).unwrap();
        let vol = Volume::<u8>::filled((8, 6, 4), (1.0, 1.0, 1.0), 77).unwrap();
        for plane in ViewPlane::ALL {
            let out = predict_volume(&params, &cfg, &vol, plane).unwrap();
            assert_eq!(out.dims(), vol.dims());
            assert!(out.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn prediction_dims_match_input_for_all_planes() {
        let cfg = NetConfig::tiny(2);
        let params = Params::<f32>::init(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<u8> = (0..7 * 9 * 5).map(|_| rng.gen_range(0..=255)).collect();
        let vol = Volume::new((7, 9, 5), (0.8, 0.8, 1.5), data).unwrap();
        for plane in ViewPlane::ALL {
            let out = predict_volume(&params, &cfg, &vol, plane).unwrap();
            assert_eq!(out.dims(), vol.dims());
            assert_eq!(out.spacing(), vol.spacing());
        }
    }
}
