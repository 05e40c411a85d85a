//! Oracle-loss decomposition (run manually with --ignored).

use cseg::hnn::{compute_beta, forward, train, LossConfig, NetConfig};
use cseg::localize::tight_bbox;
use cseg::phantom::{generate_corpus, PhantomConfig};
use cseg::superpixel::SuperpixelPartition;
use cseg::volume::{crop, extract_slices, window_rescale, BoxSource, ViewPlane};

#[test]
#[ignore]
fn pilot_oracle_loss_decomposition() {
    let phantom = PhantomConfig::default();
    let corpus = generate_corpus(&phantom, 12, 42).unwrap();
    let window = (-160i16, 240i16);
    let boxes: Vec<_> = corpus
        .iter()
        .map(|c| tight_bbox(&c.gt_interior, BoxSource::GroundTruth).unwrap().padded(5, c.ct.dims()))
        .collect();
    let crops_w: Vec<_> = corpus
        .iter()
        .zip(&boxes)
        .map(|(c, b)| crop(&window_rescale(&c.ct, window).unwrap(), b).unwrap())
        .collect();
    let crops_b: Vec<_> = corpus.iter().zip(&boxes).map(|(c, b)| crop(&c.gt_boundary, b).unwrap()).collect();
    let crops_i: Vec<_> = corpus.iter().zip(&boxes).map(|(c, b)| crop(&c.gt_interior, b).unwrap()).collect();

    let mut pairs = Vec::new();
    let mut gts = Vec::new();
    for k in 0..10 {
        let imgs = extract_slices(&crops_w[k], ViewPlane::Axial);
        let masks = extract_slices(&crops_b[k], ViewPlane::Axial);
        for (i, m) in imgs.into_iter().zip(masks) {
            gts.push(m.clone());
            pairs.push((i, m));
        }
    }
    let beta = compute_beta(&gts).unwrap();
    let cfg = NetConfig {
        epochs: 150,
        learning_rate: 2e-2,
        channels: vec![8, 12, 16],
        depth: vec![2, 1, 1],
        seed: 7,
        ..Default::default()
    };
    let report = train(&cfg, &LossConfig::new(beta).unwrap(), &pairs).unwrap();

    // interior net on the same crops (single axial view) as a meanmax proxy
    let mut ipairs = Vec::new();
    let mut igts = Vec::new();
    for k in 0..10 {
        let imgs = extract_slices(&crops_w[k], ViewPlane::Axial);
        let masks = extract_slices(&crops_i[k], ViewPlane::Axial);
        for (i, m) in imgs.into_iter().zip(masks) {
            igts.push(m.clone());
            ipairs.push((i, m));
        }
    }
    let ibeta = compute_beta(&igts).unwrap();
    let icfg = NetConfig { epochs: 16, seed: 9, ..Default::default() };
    let ireport = train(&icfg, &LossConfig::new(ibeta).unwrap(), &ipairs).unwrap();

    for test in [10usize, 11] {
        // interior single-view dice at threshold 0.5
        let islices = extract_slices(&crops_w[test], ViewPlane::Axial);
        let mut inter = 0usize;
        let mut np = 0usize;
        let mut ng = 0usize;
        for (z, s) in islices.iter().enumerate() {
            let p = forward(&ireport.params, &icfg, s).unwrap();
            for y in 0..s.height {
                for x in 0..s.width {
                    let pos = p.fused.at(x, y) >= 0.5;
                    let gt_v = crops_i[test].at(x, y, z) != 0;
                    inter += usize::from(pos && gt_v);
                    np += usize::from(pos);
                    ng += usize::from(gt_v);
                }
            }
        }
        println!("case {test}: axial interior dice {:.4}", 2.0 * inter as f64 / (np + ng) as f64);
        let slices = extract_slices(&crops_w[test], ViewPlane::Axial);
        let scale_slices: Vec<[cseg::volume::Image2<f32>; 3]> = slices
            .iter()
            .map(|s| {
                let p = forward(&report.params, &cfg, s).unwrap();
                [p.sides[1].clone(), p.sides[2].clone(), p.fused]
            })
            .collect();
        let partition = SuperpixelPartition::build(boxes[test], &scale_slices, 0, 0.25).unwrap();
        let gt = &crops_i[test];
        let dims = gt.dims();

        let mut loss_in = 0usize; // gt voxels inside negative regions
        let mut gain_out = 0usize; // non-gt voxels inside positive regions
        let mut straddlers = 0usize;
        let mut straddler_px = 0usize;
        let mut hist = [0usize; 6]; // straddler sizes: 1-4, 5-9, 10-19, 20-49, 50-99, 100+
        for sp in partition.proposals.iter().filter(|s| s.level == 1) {
            let z = sp.slice;
            let n_in = sp.pixels.iter().filter(|&&(x, y)| gt.at(x as usize, y as usize, z) != 0).count();
            let n = sp.pixels.len();
            let positive = 2 * n_in >= n;
            if positive {
                gain_out += n - n_in;
            } else {
                loss_in += n_in;
            }
            if n_in > 0 && n_in < n {
                straddlers += 1;
                straddler_px += n;
                let b = match n {
                    1..=4 => 0,
                    5..=9 => 1,
                    10..=19 => 2,
                    20..=49 => 3,
                    50..=99 => 4,
                    _ => 5,
                };
                hist[b] += 1;
            }
        }
        let (mask, dsc) = cseg::superpixel::optimal_assignment(&partition, gt).unwrap();
        println!(
            "case {test}: dims {dims:?} gt {} oracle dsc {:.4} mask {} | loss_in {loss_in} gain_out {gain_out} | straddlers {straddlers} ({straddler_px} px) sizes {hist:?}",
            gt.count_nonzero(),
            dsc,
            mask.count_nonzero()
        );
    }
}
