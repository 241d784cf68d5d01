//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `--nocapture` to see the table on success.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shaperefine::landmarks::{centroid_landmarks, fit_affine_12dof, rasterize_landmarks, Affine};
use shaperefine::metrics::{dice_index, hausdorff};
use shaperefine::multitask::{
    dice_loss, dice_loss_grad, predict, softmax_channels, train_toy, weighted_ce_logit_grad,
    weighted_ce_loss, LossWeights, TrainConfig, TrainSample,
};
use shaperefine::phantom::{generate_cohort, random_ffd, separable_phantom, Phantom, PhantomParams};
use shaperefine::preproc::{simulate_lr, LrSimParams};
use shaperefine::regfuse::{
    fuse_labels, label_consistency, nmi, refine, register_ffd, upsample_lr, warp_labels_nearest, FusionConfig,
    RegistrationConfig,
};
use shaperefine::volgrid::{Prob, Volume, LVC};
use shaperefine::{argmax_labels, one_hot, Geometry, LabelGrid, LandmarkSet};

const SEED: u64 = 20240611;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cube(n: usize) -> Geometry {
    Geometry::new([n, n, n], [1.0; 3], [0.0; 3]).unwrap()
}

fn random_labels(g: Geometry, classes: u8, rng: &mut ChaCha8Rng) -> LabelGrid {
    let mut l = LabelGrid::from_fn(g, classes, |_, _, _| rng.gen_range(0..classes)).unwrap();
    for c in 0..classes {
        let idx = c as usize;
        l.set(idx % g.dims[0], 0, 0, c).unwrap();
    }
    l
}

fn random_logits(g: Geometry, c: usize, rng: &mut ChaCha8Rng) -> Prob<f64> {
    Prob::new(g, c, (0..g.len() * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Worst relative error of central differences over `probes` random coordinates.
fn worst_fd(f: impl Fn(&Prob<f64>) -> f64, grad: &Prob<f64>, at: &Prob<f64>, probes: usize, rng: &mut ChaCha8Rng) -> f64 {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..at.data().len());
        let mut up = at.clone();
        up.data_mut()[i] += h;
        let mut dn = at.clone();
        dn.data_mut()[i] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let an = grad.data()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    worst
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst_dice: f64 = 0.0;
    let mut worst_ce: f64 = 0.0;
    for trial in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + trial);
        let g = cube(8);
        let seg = random_labels(g, 5, &mut rng);
        let p = softmax_channels(&random_logits(g, 5, &mut rng)).unwrap();
        let gd = dice_loss_grad(&p, &seg, 1e-8).unwrap();
        worst_dice = worst_dice.max(worst_fd(|q| dice_loss(q, &seg, 1e-8).unwrap(), &gd, &p, 20, &mut rng));

        let mut lm = LabelGrid::filled(g, 0, 7).unwrap();
        for c in 1..7u8 {
            lm.set(rng.gen_range(0..8), rng.gen_range(0..8), c as usize, c).unwrap();
        }
        let z = random_logits(g, 7, &mut rng);
        let gz = weighted_ce_logit_grad(&softmax_channels(&z).unwrap(), &lm).unwrap();
        let f = |q: &Prob<f64>| weighted_ce_loss(&softmax_channels(q).unwrap(), &lm).unwrap();
        worst_ce = worst_ce.max(worst_fd(f, &gz, &z, 10, &mut rng));
        // include every landmark voxel, where the gradient is largest
        for c in 1..7usize {
            let j = lm.labels().iter().position(|&v| v as usize == c).unwrap();
            for k in [0, c] {
                let i = j * 7 + k;
                let mut up = z.clone();
                up.data_mut()[i] += 1e-5;
                let mut dn = z.clone();
                dn.data_mut()[i] -= 1e-5;
                let fd = (f(&up) - f(&dn)) / 2e-5;
                let an = gz.data()[i];
                worst_ce = worst_ce.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst_dice <= 1e-3 && worst_ce <= 1e-3 && secs < 30.0,
        format!("worst relative error dice {worst_dice:.2e}, ce {worst_ce:.2e}; {secs:.1} s"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst_dice: f64 = 0.0;
    let mut worst_ce: f64 = 0.0;
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ (trial + 100));
        let g = cube(8);
        let seg = random_labels(g, 5, &mut rng);
        let d = dice_loss(&one_hot::<f64>(&seg), &seg, 1e-8).unwrap();
        worst_dice = worst_dice.max((d + 5.0).abs());
        let lm = random_labels(g, 7, &mut rng);
        worst_ce = worst_ce.max(weighted_ce_loss(&one_hot::<f64>(&lm), &lm).unwrap());
    }
    outcome(
        worst_dice <= 1e-6 && worst_ce <= 1e-4,
        format!("max |dice + 5| {worst_dice:.2e}, max ce {worst_ce:.2e} over 20 grids"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst_entry: f64 = 0.0;
    let mut worst_res: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    for _ in 0..100 {
        let pts: [[f64; 3]; 6] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-50.0..50.0)));
        let src = LandmarkSet::new(pts).unwrap();
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rng.gen_range(-0.3..0.3) + if i == j { 1.0 } else { 0.0 };
            }
        }
        let truth = Affine {
            matrix: m,
            translation: std::array::from_fn(|_| rng.gen_range(-20.0..20.0)),
        };
        let dst = src.map_points(|p| truth.apply(p)).unwrap();
        let fit = fit_affine_12dof::<f64>(&src, &dst).unwrap();
        worst_entry = worst_entry.max(fit.transform.max_abs_diff(&truth));
        worst_res = worst_res.max(fit.residuals.iter().cloned().fold(0.0, f64::max));
    }
    outcome(
        worst_entry <= 1e-6 && worst_res <= 1e-9,
        format!("max entry error {worst_entry:.2e}, max residual {worst_res:.2e} over 100 pairs"),
    )
}

/// Direct per-voxel evaluation of the patch-weighted vote.
fn fusion_oracle(target: &Volume<f64>, atlases: &[(Volume<f64>, LabelGrid)], cfg: &FusionConfig) -> LabelGrid {
    let g = *target.geometry();
    let classes = atlases.iter().map(|a| a.1.class_count()).max().unwrap() as usize;
    let sr = cfg.search_dims.map(|d| (d / 2) as isize);
    let pr = cfg.patch_dims.map(|d| (d / 2) as isize);
    let get = |v: &Volume<f64>, p: [isize; 3]| -> Option<f64> {
        g.contains(p[0], p[1], p[2]).then(|| v.at(p[0] as usize, p[1] as usize, p[2] as usize))
    };
    LabelGrid::from_fn(g, classes as u8, |i, j, k| {
        let x = [i as isize, j as isize, k as isize];
        let mut votes = vec![0.0f64; classes];
        for (vol, lab) in atlases {
            for dz in -sr[2]..=sr[2] {
                for dy in -sr[1]..=sr[1] {
                    for dx in -sr[0]..=sr[0] {
                        let y = [x[0] + dx, x[1] + dy, x[2] + dz];
                        if !g.contains(y[0], y[1], y[2]) {
                            continue;
                        }
                        let mut ssd = 0.0;
                        for oz in -pr[2]..=pr[2] {
                            for oy in -pr[1]..=pr[1] {
                                for ox in -pr[0]..=pr[0] {
                                    let a = get(target, [x[0] + ox, x[1] + oy, x[2] + oz]);
                                    let b = get(vol, [y[0] + ox, y[1] + oy, y[2] + oz]);
                                    if let (Some(a), Some(b)) = (a, b) {
                                        ssd += (a - b) * (a - b);
                                    }
                                }
                            }
                        }
                        votes[lab.at(y[0] as usize, y[1] as usize, y[2] as usize) as usize] += (-ssd / cfg.h).exp();
                    }
                }
            }
        }
        (0..classes).fold(0, |best, c| if votes[c] > votes[best] { c } else { best }) as u8
    })
    .unwrap()
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let cfg = FusionConfig {
        h: 1.0,
        patch_dims: [3, 3, 1],
        search_dims: [3, 3, 3],
        ..FusionConfig::default()
    };
    let mut mismatched = 0usize;
    for trial in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 400 + trial);
        let g = cube(8);
        let target = Volume::from_fn(g, |_, _, _| rng.gen::<f64>());
        let n = 2 + (trial % 2) as usize;
        let atlases: Vec<_> = (0..n)
            .map(|_| {
                let v = Volume::from_fn(g, |_, _, _| rng.gen::<f64>());
                let l = LabelGrid::from_fn(g, 5, |i, j, _| {
                    if rng.gen_bool(0.6) {
                        ((i + j) / 3 % 5) as u8
                    } else {
                        rng.gen_range(0..5)
                    }
                })
                .unwrap();
                (v, l)
            })
            .collect();
        let fast = fuse_labels(&target, &atlases, &cfg).unwrap();
        let slow = fusion_oracle(&target, &atlases, &cfg);
        mismatched += fast.labels().iter().zip(slow.labels()).filter(|(a, b)| a != b).count();
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatched == 0 && secs < 60.0,
        format!("{mismatched} differing voxels over 20 instances; {secs:.1} s"),
    )
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let params = PhantomParams::default();
    let cohort = generate_cohort::<f32>(10, &params, SEED + 5).unwrap();
    let cfg = RegistrationConfig::default();
    let mut worst_cons: f64 = 1.0;
    let mut worst_dice: f64 = 1.0;
    let mut monotone = true;
    let mut improved = true;
    for (i, ph) in cohort.iter().enumerate() {
        let g = *ph.labels.geometry();
        let truth = random_ffd(&g, 16.0, 4.0, SEED + 50 + i as u64).unwrap();
        let target = warp_labels_nearest(&ph.labels, &truth, &g).unwrap();
        let reg = register_ffd(&target, &ph.labels, &Affine::identity(), &cfg).unwrap();
        let warped = warp_labels_nearest(&ph.labels, &reg.transform, &g).unwrap();
        let dice = (1..5u8).map(|k| dice_index(&warped, &target, k).unwrap()).fold(1.0, f64::min);
        println!(
            "    pair {i}: consistency {:.4} -> {:.4}, min foreground dice {dice:.4}, {} steps",
            reg.initial_consistency, reg.final_consistency, reg.accepted_steps
        );
        worst_cons = worst_cons.min(reg.final_consistency);
        worst_dice = worst_dice.min(dice);
        monotone &= reg.trace_is_monotone();
        improved &= reg.final_consistency > reg.initial_consistency;
    }
    outcome(
        worst_cons >= 0.95 && worst_dice >= 0.92 && monotone && improved,
        format!(
            "min final consistency {worst_cons:.4}, min per-class dice {worst_dice:.4}, monotone {monotone}, improved {improved}; {:.1} s",
            t.elapsed().as_secs_f64()
        ),
    )
}

struct EndToEnd {
    refined: Vec<LabelGrid>,
    dice_refined: f64,
    dice_baseline: f64,
    hd_refined: f64,
    hd_baseline: f64,
    hd_all_refined: f64,
    hd_all_baseline: f64,
    seconds: f64,
}

fn lr_params(i: usize) -> LrSimParams {
    LrSimParams {
        seed: SEED + 600 + i as u64,
        ..LrSimParams::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 40,
        learning_rate: 0.03,
        seed: SEED,
        ..TrainConfig::default()
    }
}

/// Phantom cohort, LR simulation, toy training and refinement for the first
/// `targets` held-out subjects.
fn end_to_end(targets: usize) -> EndToEnd {
    let t = Instant::now();
    let cohort: Vec<Phantom<f32>> = generate_cohort(30, &PhantomParams::default(), SEED).unwrap();
    let (atlas_ph, target_ph) = cohort.split_at(20);
    let atlases: Vec<_> = atlas_ph.iter().map(|p| p.to_atlas().unwrap()).collect();

    let samples: Vec<TrainSample<f32>> = atlas_ph
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let lr = simulate_lr(&p.volume, &p.labels, &lr_params(i)).unwrap();
            let lms = lr.carry_landmarks(&p.landmarks).unwrap();
            let grid = rasterize_landmarks(&lms, lr.volume.geometry()).unwrap();
            TrainSample::new(lr.volume, lr.labels, grid).unwrap()
        })
        .collect();
    let (model, _) = train_toy(&samples, &LossWeights::default(), &train_config()).unwrap();
    let trained = t.elapsed().as_secs_f64();

    let reg = RegistrationConfig::default();
    let fus = FusionConfig::default();
    let mut out = EndToEnd {
        refined: Vec::new(),
        dice_refined: 0.0,
        dice_baseline: 0.0,
        hd_refined: 0.0,
        hd_baseline: 0.0,
        hd_all_refined: 0.0,
        hd_all_baseline: 0.0,
        seconds: 0.0,
    };
    for (n, p) in target_ph.iter().take(targets).enumerate() {
        let lr = simulate_lr(&p.volume, &p.labels, &lr_params(20 + n)).unwrap();
        let lms = lr.carry_landmarks(&p.landmarks).unwrap();
        let (seg_p, _) = predict(&model, &lr.volume).unwrap();
        let seg = argmax_labels(&seg_p).unwrap();
        let hr = *p.labels.geometry();
        let baseline = upsample_lr(&lr.volume, &seg, &hr).unwrap().labels;
        let r = refine(&lr.volume, &seg, &lms, &atlases, &reg, &fus).unwrap();

        let d_ref = dice_index(&r.labels, &p.labels, LVC).unwrap();
        let d_base = dice_index(&baseline, &p.labels, LVC).unwrap();
        let h_ref = hausdorff(&r.labels, &p.labels, LVC).unwrap();
        let h_base = hausdorff(&baseline, &p.labels, LVC).unwrap();
        let all = |l: &LabelGrid| (1..5u8).map(|k| hausdorff(l, &p.labels, k).unwrap()).sum::<f64>() / 4.0;
        let (ha_ref, ha_base) = (all(&r.labels), all(&baseline));
        let lr_dice = dice_index(&seg, &lr.labels, LVC).unwrap();
        println!(
            "    {}: LR dice {lr_dice:.3}; LVC dice {d_base:.3} -> {d_ref:.3}; LVC HD {h_base:.2} -> {h_ref:.2} mm; mean HD {ha_base:.2} -> {ha_ref:.2} mm; {:.1} s",
            p.id, r.report.timings.total
        );
        out.dice_refined += d_ref / targets as f64;
        out.dice_baseline += d_base / targets as f64;
        out.hd_refined += h_ref / targets as f64;
        out.hd_baseline += h_base / targets as f64;
        out.hd_all_refined += ha_ref / targets as f64;
        out.hd_all_baseline += ha_base / targets as f64;
        out.refined.push(r.labels);
    }
    out.seconds = t.elapsed().as_secs_f64();
    println!("    training {trained:.1} s, total {:.1} s", out.seconds);
    out
}

fn criterion_6(e: &EndToEnd) -> Outcome {
    let reduction = 1.0 - e.hd_refined / e.hd_baseline;
    let pass = e.dice_refined >= 0.85 && e.dice_refined > e.dice_baseline && reduction >= 0.30 && e.seconds <= 600.0;
    outcome(
        pass,
        format!(
            "LVC dice {:.4} (baseline {:.4}); LVC hausdorff {:.2} vs {:.2} mm, reduction {:.1}% (all-class mean {:.2} vs {:.2} mm); {:.0} s on {} worker(s)",
            e.dice_refined,
            e.dice_baseline,
            e.hd_refined,
            e.hd_baseline,
            100.0 * reduction,
            e.hd_all_refined,
            e.hd_all_baseline,
            e.seconds,
            rayon::current_num_threads()
        ),
    )
}

fn criterion_7(first: &EndToEnd) -> Outcome {
    let n = 2;
    let again = end_to_end(n);
    let same = first.refined.iter().zip(&again.refined).all(|(a, b)| a.labels() == b.labels());
    outcome(same, format!("{n} re-run targets byte-identical: {same}"))
}

fn criterion_8() -> Outcome {
    let mut worst_nmi: f64 = 0.0;
    let mut worst_cons: f64 = 0.0;
    for trial in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + 800 + trial);
        let g = Geometry::new([12, 10, 8], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
        let a = random_labels(g, 2 + (trial % 4) as u8, &mut rng);
        worst_nmi = worst_nmi.max((nmi(&a, &a) - 2.0).abs());
        worst_cons = worst_cons.max((label_consistency(&a, &one_hot::<f64>(&a)).unwrap() - 1.0).abs());
    }
    outcome(
        worst_nmi <= 1e-9 && worst_cons <= 1e-9,
        format!("max |nmi - 2| {worst_nmi:.2e}, max |consistency - 1| {worst_cons:.2e}"),
    )
}

fn criterion_9() -> Outcome {
    let mut min_acc: f64 = 1.0;
    let mut complete = 0;
    for seed in 0..10u64 {
        let (v, l, lms) = separable_phantom::<f32>(seed).unwrap();
        let grid = rasterize_landmarks(&lms, v.geometry()).unwrap();
        let s = TrainSample::new(v, l, grid).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.02,
            seed,
            ..TrainConfig::default()
        };
        let (m, _) = train_toy(std::slice::from_ref(&s), &LossWeights::default(), &cfg).unwrap();
        let (seg, lmk) = predict(&m, &s.volume).unwrap();
        let pred = argmax_labels(&seg).unwrap();
        let agree = pred.labels().iter().zip(s.labels.labels()).filter(|(a, b)| a == b).count();
        min_acc = min_acc.min(agree as f64 / pred.labels().len() as f64);
        if centroid_landmarks(&argmax_labels(&lmk).unwrap()).is_ok() {
            complete += 1;
        }
    }
    outcome(
        min_acc >= 0.95 && complete >= 8,
        format!("min voxel accuracy {min_acc:.4} after 200 steps; complete landmark sets on {complete}/10 seeds"),
    )
}

#[test]
fn acceptance() {
    let mut results = Vec::new();
    // ACCEPTANCE_ONLY=5,6 restricts the run; 7 needs 6.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        let t = Instant::now();
        let o = f();
        println!(
            "criterion {n}: {} {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        results.push((n, o.pass));
    };
    run(1, &mut criterion_1);
    run(2, &mut criterion_2);
    run(3, &mut criterion_3);
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);
    let mut e2e = None;
    run(6, &mut || {
        let e = end_to_end(10);
        let o = criterion_6(&e);
        e2e = Some(e);
        o
    });
    if let Some(e) = e2e.as_ref() {
        run(7, &mut || criterion_7(e));
    }
    run(8, &mut criterion_8);
    run(9, &mut criterion_9);
    let failed: Vec<_> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
