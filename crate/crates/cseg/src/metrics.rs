//! Segmentation evaluation metrics and summary statistics.
//!
//! Overlap metrics (Dice, Jaccard), symmetric surface distances in mm
//! (Hausdorff and average minimum surface-to-surface distance), the
//! two-sided Wilcoxon signed-rank test, and the table-style summary used in
//! reports.
//!
//! Surface distances use an exact Euclidean distance transform (separable
//! lower-envelope method) over anisotropic spacing; the test suite checks it
//! against a brute-force all-pairs oracle.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Dice and Jaccard overlap between two binary masks of equal dims.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub dsc: f64,
    pub jaccard: f64,
}

pub fn overlap_metrics(a: &LabelVolume, b: &LabelVolume) -> Result<OverlapMetrics> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        let pa = va != 0;
        let pb = vb != 0;
        na += usize::from(pa);
        nb += usize::from(pb);
        inter += usize::from(pa && pb);
    }
    if na == 0 && nb == 0 {
        // identical empty masks
        return Ok(OverlapMetrics { dsc: 1.0, jaccard: 1.0 });
    }
    let union = na + nb - inter;
    Ok(OverlapMetrics {
        dsc: 2.0 * inter as f64 / (na + nb) as f64,
        jaccard: inter as f64 / union as f64,
    })
}

/// Surface voxels: mask voxels with at least one non-mask 6-neighbor
/// (the volume border counts as non-mask).
pub fn surface_voxels(mask: &LabelVolume) -> Vec<(usize, usize, usize)> {
    let (nx, ny, nz) = mask.dims();
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.at(x, y, z) == 0 {
                    continue;
                }
                let on_surface = (x == 0 || mask.at(x - 1, y, z) == 0)
                    || (x + 1 == nx || mask.at(x + 1, y, z) == 0)
                    || (y == 0 || mask.at(x, y - 1, z) == 0)
                    || (y + 1 == ny || mask.at(x, y + 1, z) == 0)
                    || (z == 0 || mask.at(x, y, z - 1) == 0)
                    || (z + 1 == nz || mask.at(x, y, z + 1) == 0);
                if on_surface {
                    out.push((x, y, z));
                }
            }
        }
    }
    out
}

/// 1D squared-distance lower envelope (Felzenszwalb-Huttenlocher) with
/// sample positions `i * step`.
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    debug_assert_eq!(out.len(), n);
    if n == 1 {
        out[0] = f[0];
        return;
    }
    let mut v = vec![0usize; n]; // parabola apex indices
    let mut zbound = vec![0.0f64; n + 1]; // boundaries between parabolas
    let mut k = 0usize;
    v[0] = 0;
    zbound[0] = f64::NEG_INFINITY;
    zbound[1] = f64::INFINITY;
    let pos = |i: usize| i as f64 * step;
    for q in 1..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        loop {
            let p = v[k];
            if f[p] == f64::INFINITY {
                // first finite parabola
                if k == 0 {
                    v[0] = q;
                    zbound[0] = f64::NEG_INFINITY;
                    zbound[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * pos(q) - 2.0 * pos(p));
            if s <= zbound[k] {
                if k == 0 {
                    v[0] = q;
                    zbound[0] = f64::NEG_INFINITY;
                    zbound[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                zbound[k] = s;
                zbound[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while zbound[k + 1] < pos(q) {
            k += 1;
        }
        let p = v[k];
        if f[p] == f64::INFINITY {
            out[q] = f64::INFINITY;
        } else {
            let d = pos(q) - pos(p);
            out[q] = d * d + f[p];
        }
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel center to the
/// nearest seed voxel center, under anisotropic spacing.
fn squared_edt(
    dims: (usize, usize, usize),
    spacing: (f64, f64, f64),
    seeds: &[(usize, usize, usize)],
) -> Vec<f64> {
    let (nx, ny, nz) = dims;
    let mut d = vec![f64::INFINITY; nx * ny * nz];
    for &(x, y, z) in seeds {
        d[x + nx * (y + ny * z)] = 0.0;
    }
    // x pass
    let mut fbuf = vec![0.0f64; nx.max(ny).max(nz)];
    let mut obuf = vec![0.0f64; nx.max(ny).max(nz)];
    for z in 0..nz {
        for y in 0..ny {
            let base = nx * (y + ny * z);
            fbuf[..nx].copy_from_slice(&d[base..base + nx]);
            edt_1d(&fbuf[..nx], spacing.0, &mut obuf[..nx]);
            d[base..base + nx].copy_from_slice(&obuf[..nx]);
        }
    }
    // y pass
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                fbuf[y] = d[x + nx * (y + ny * z)];
            }
            edt_1d(&fbuf[..ny], spacing.1, &mut obuf[..ny]);
            for y in 0..ny {
                d[x + nx * (y + ny * z)] = obuf[y];
            }
        }
    }
    // z pass
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                fbuf[z] = d[x + nx * (y + ny * z)];
            }
            edt_1d(&fbuf[..nz], spacing.2, &mut obuf[..nz]);
            for z in 0..nz {
                d[x + nx * (y + ny * z)] = obuf[z];
            }
        }
    }
    d
}

/// Symmetric surface distances in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hausdorff_mm: f64,
    pub avgdist_mm: f64,
}

/// Hausdorff and average surface distance between two non-empty masks.
///
/// `hausdorff = max(max_{a} min_{b} d, max_{b} min_{a} d)` over surface
/// voxels; `avgdist` pools the minimum distances of both surfaces into one
/// mean.
pub fn surface_distances(
    a: &LabelVolume,
    b: &LabelVolume,
    spacing: (f64, f64, f64),
) -> Result<SurfaceDistances> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "mask dims differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let sa = surface_voxels(a);
    if sa.is_empty() {
        return Err(Error::UndefinedDistance("first"));
    }
    let sb = surface_voxels(b);
    if sb.is_empty() {
        return Err(Error::UndefinedDistance("second"));
    }
    let dims = a.dims();
    let nx = dims.0;
    let to_b = squared_edt(dims, spacing, &sb);
    let to_a = squared_edt(dims, spacing, &sa);
    let mut max_ab = 0.0f64;
    let mut sum = 0.0f64;
    for &(x, y, z) in &sa {
        let d = to_b[x + nx * (y + dims.1 * z)].sqrt();
        max_ab = max_ab.max(d);
        sum += d;
    }
    let mut max_ba = 0.0f64;
    for &(x, y, z) in &sb {
        let d = to_a[x + nx * (y + dims.1 * z)].sqrt();
        max_ba = max_ba.max(d);
        sum += d;
    }
    Ok(SurfaceDistances {
        hausdorff_mm: max_ab.max(max_ba),
        avgdist_mm: sum / (sa.len() + sb.len()) as f64,
    })
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped; ties receive average ranks. For n <= 25 the
/// p-value comes from the exact signed-rank-sum distribution (subset-sum
/// count over the realized ranks); beyond that a normal approximation with
/// tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::invalid("paired samples must have equal length"));
    }
    let mut diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateTest("all paired differences are zero".into()));
    }
    if diffs.len() < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 non-zero differences, got {}",
            diffs.len()
        )));
    }
    let n = diffs.len();
    diffs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).expect("finite differences"));
    // average ranks over tie groups, doubled so they stay integral
    let mut rank2 = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average ((i+1)+(j+1))/2; doubled: i+j+2
        let avg2 = (i + j + 2) as u64;
        for r in rank2.iter_mut().take(j + 1).skip(i) {
            *r = avg2;
        }
        i = j + 1;
    }
    let w2_plus: u64 = diffs
        .iter()
        .zip(&rank2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();

    if n <= 25 {
        // exact: subset-sum distribution over the doubled ranks
        let total: u64 = rank2.iter().sum();
        let mut counts = vec![0.0f64; total as usize + 1];
        counts[0] = 1.0;
        for &r in &rank2 {
            let r = r as usize;
            for s in (r..counts.len()).rev() {
                counts[s] += counts[s - r];
            }
        }
        let all = 2f64.powi(n as i32);
        let le: f64 = counts[..=w2_plus as usize].iter().sum();
        let ge: f64 = counts[w2_plus as usize..].iter().sum();
        Ok((2.0 * (le.min(ge)) / all).min(1.0))
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie correction over tie groups of the doubled ranks
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && rank2[j + 1] == rank2[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let w_plus = w2_plus as f64 / 2.0;
        let z = (w_plus - mean).abs() - 0.5;
        let z = z.max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        Ok((2.0 * normal.cdf(-z)).min(1.0))
    }
}

/// Table-style summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Linear-interpolated percentile of sorted values, q in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot summarize an empty sample"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok(Summary {
        mean,
        std,
        median: percentile_sorted(&sorted, 0.5),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        p10: percentile_sorted(&sorted, 0.1),
        p90: percentile_sorted(&sorted, 0.9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Volume;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> bool) -> LabelVolume {
        let mut data = Vec::new();
        for z in 0..dims.2 {
            for y in 0..dims.1 {
                for x in 0..dims.0 {
                    data.push(u8::from(f(x, y, z)));
                }
            }
        }
        Volume::new(dims, (1.0, 1.0, 1.0), data).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let a = mask((4, 4, 1), |x, _, _| x < 2);
        assert_eq!(overlap_metrics(&a, &a).unwrap(), OverlapMetrics { dsc: 1.0, jaccard: 1.0 });

        let b = mask((4, 4, 1), |x, _, _| x >= 2);
        let m = overlap_metrics(&a, &b).unwrap();
        assert_eq!(m.dsc, 0.0);
        assert_eq!(m.jaccard, 0.0);

        // |a| = 4, |b| = 6, |a and b| = 3
        let a = mask((10, 1, 1), |x, _, _| x < 4);
        let b = mask((10, 1, 1), |x, _, _| (1..7).contains(&x));
        let m = overlap_metrics(&a, &b).unwrap();
        assert!((m.dsc - 0.6).abs() < 1e-15);
        assert!((m.jaccard - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn both_empty_masks_are_identical() {
        let a = mask((3, 3, 3), |_, _, _| false);
        let m = overlap_metrics(&a, &a).unwrap();
        assert_eq!(m.dsc, 1.0);
        assert_eq!(m.jaccard, 1.0);
    }

    #[test]
    fn dice_jaccard_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = mask((6, 6, 6), |_, _, _| rng.gen_bool(0.4));
            let b = mask((6, 6, 6), |_, _, _| rng.gen_bool(0.4));
            let m = overlap_metrics(&a, &b).unwrap();
            let expected = 2.0 * m.jaccard / (1.0 + m.jaccard);
            assert!((m.dsc - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_masks_have_zero_distance() {
        let a = mask((8, 8, 8), |x, y, z| {
            let d = (x as i64 - 4).pow(2) + (y as i64 - 4).pow(2) + (z as i64 - 4).pow(2);
            d <= 9
        });
        let d = surface_distances(&a, &a, (1.0, 1.0, 1.0)).unwrap();
        assert_eq!(d.hausdorff_mm, 0.0);
        assert_eq!(d.avgdist_mm, 0.0);
    }

    #[test]
    fn offset_unit_cubes() {
        let a = mask((8, 2, 2), |x, _, _| x == 1);
        let b = mask((8, 2, 2), |x, _, _| x == 4);
        let d = surface_distances(&a, &b, (1.0, 1.0, 1.0)).unwrap();
        assert!((d.hausdorff_mm - 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = mask((4, 4, 4), |_, _, _| false);
        let b = mask((4, 4, 4), |x, _, _| x == 0);
        assert!(matches!(
            surface_distances(&a, &b, (1.0, 1.0, 1.0)),
            Err(Error::UndefinedDistance(_))
        ));
    }

    /// Brute-force all-pairs oracle for surface distances.
    fn surface_distances_oracle(
        a: &LabelVolume,
        b: &LabelVolume,
        spacing: (f64, f64, f64),
    ) -> SurfaceDistances {
        let sa = surface_voxels(a);
        let sb = surface_voxels(b);
        let dist = |p: (usize, usize, usize), q: (usize, usize, usize)| {
            let dx = (p.0 as f64 - q.0 as f64) * spacing.0;
            let dy = (p.1 as f64 - q.1 as f64) * spacing.1;
            let dz = (p.2 as f64 - q.2 as f64) * spacing.2;
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        let min_to = |p, set: &[(usize, usize, usize)]| {
            set.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
        };
        let mut max_d = 0.0f64;
        let mut sum = 0.0;
        for &p in &sa {
            let d = min_to(p, &sb);
            max_d = max_d.max(d);
            sum += d;
        }
        for &q in &sb {
            let d = min_to(q, &sa);
            max_d = max_d.max(d);
            sum += d;
        }
        SurfaceDistances {
            hausdorff_mm: max_d,
            avgdist_mm: sum / (sa.len() + sb.len()) as f64,
        }
    }

    #[test]
    fn edt_matches_all_pairs_oracle_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let spacing = if trial % 2 == 0 { (1.0, 1.0, 1.0) } else { (0.7, 1.1, 2.5) };
            let a = mask((8, 8, 8), |_, _, _| rng.gen_bool(0.3));
            let b = mask((8, 8, 8), |_, _, _| rng.gen_bool(0.3));
            if surface_voxels(&a).is_empty() || surface_voxels(&b).is_empty() {
                continue;
            }
            let got = surface_distances(&a, &b, spacing).unwrap();
            let want = surface_distances_oracle(&a, &b, spacing);
            assert!(
                (got.hausdorff_mm - want.hausdorff_mm).abs() <= 1e-9,
                "trial {trial}: hausdorff {} vs {}",
                got.hausdorff_mm,
                want.hausdorff_mm
            );
            assert!(
                (got.avgdist_mm - want.avgdist_mm).abs() <= 1e-9,
                "trial {trial}: avgdist {} vs {}",
                got.avgdist_mm,
                want.avgdist_mm
            );
            assert!(got.hausdorff_mm >= got.avgdist_mm);
        }
    }

    #[test]
    fn wilcoxon_constant_shift_minimal_p() {
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let p = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!((p - 2.0 / 256.0).abs() < 1e-15, "p = {p}");
        // symmetry
        let p2 = wilcoxon_signed_rank(&y, &x).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn wilcoxon_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let n = 10;
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let diffs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
            if diffs.len() < 5 {
                continue;
            }
            let p = wilcoxon_signed_rank(&x, &y).unwrap();

            // oracle: enumerate all 2^n sign assignments of the realized ranks
            let m = diffs.len();
            let mut sorted = diffs.clone();
            sorted.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
            let mut rank2 = vec![0u64; m];
            let mut i = 0;
            while i < m {
                let mut j = i;
                while j + 1 < m && sorted[j + 1].abs() == sorted[i].abs() {
                    j += 1;
                }
                for r in rank2.iter_mut().take(j + 1).skip(i) {
                    *r = (i + j + 2) as u64;
                }
                i = j + 1;
            }
            let w2: u64 = sorted
                .iter()
                .zip(&rank2)
                .filter(|(d, _)| **d > 0.0)
                .map(|(_, &r)| r)
                .sum();
            let mut le = 0u64;
            let mut ge = 0u64;
            for bits in 0u32..(1u32 << m) {
                let s: u64 = (0..m).filter(|&i| bits >> i & 1 == 1).map(|i| rank2[i]).sum();
                le += u64::from(s <= w2);
                ge += u64::from(s >= w2);
            }
            let expect = (2.0 * (le.min(ge) as f64) / (1u64 << m) as f64).min(1.0);
            assert_eq!(p, expect);
        }
    }

    #[test]
    fn wilcoxon_degenerate_and_small() {
        let x = vec![1.0; 6];
        assert!(matches!(wilcoxon_signed_rank(&x, &x), Err(Error::DegenerateTest(_))));
        let y = vec![1.0, 1.0, 1.0, 1.0, 2.0, 3.0];
        assert!(wilcoxon_signed_rank(&x, &y).is_err()); // only 2 non-zero diffs
    }

    #[test]
    fn wilcoxon_large_n_uses_normal_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-0.2..0.4)).collect();
        let p = wilcoxon_signed_rank(&x, &y).unwrap();
        assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[5.0]).unwrap();
        assert_eq!((s.mean, s.std, s.min, s.max), (5.0, 0.0, 5.0, 5.0));

        let s = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.mean, 3.0);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn summarize_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let values: Vec<f64> = (0..1000).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let s = summarize(&values).unwrap();

        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = values.iter().sum::<f64>() / 1000.0;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0;
        assert!((s.mean - mean).abs() < 1e-12);
        assert!((s.std - var.sqrt()).abs() < 1e-12);
        assert_eq!(s.min, sorted[0]);
        assert_eq!(s.max, sorted[999]);
        let pct = |q: f64| {
            let pos = q * 999.0;
            let lo = pos.floor() as usize;
            sorted[lo] + (sorted[lo + 1] - sorted[lo]) * (pos - lo as f64)
        };
        assert!((s.p10 - pct(0.1)).abs() < 1e-12);
        assert!((s.median - pct(0.5)).abs() < 1e-12);
        assert!((s.p90 - pct(0.9)).abs() < 1e-12);
    }
}
