//! Atlas-based shape refinement: atlas selection by NMI, label-consistency
//! B-spline registration, non-local label fusion and the `refine` pipeline.

mod ffd;
mod fusion;
mod pipeline;
mod register;
mod warp;

pub use ffd::{bspline_basis, ControlLattice, FfdTransform};
pub use fusion::{fuse_labels, fuse_labels_masked, FusionConfig};
pub use pipeline::{refine, upsample_lr, AtlasOutcome, RefineReport, Refinement, StageTimings, Upsampled};
pub use register::{
    register_ffd, register_ffd_masked, GradientMode, PyramidLevel, Registration, RegistrationConfig, TracePoint,
};
pub use warp::{warp_labels, warp_labels_nearest, warp_soft, warp_volume, LabelInterp, SpatialTransform, WarpedLabels};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::landmarks::{fit_affine_12dof, Affine};
use crate::scalar::Real;
use crate::volgrid::{Atlas, LabelGrid, LandmarkSet, Prob};

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Normalised mutual information `(H(A) + H(B)) / H(A,B)` of two label grids
/// over every voxel, natural logarithms. Defined as 1 when either grid is constant.
///
/// # Panics
/// If the grids differ in voxel count.
pub fn nmi(a: &LabelGrid, b: &LabelGrid) -> f64 {
    assert_eq!(a.labels().len(), b.labels().len(), "nmi needs grids of equal size");
    let (ca, cb) = (a.class_count() as usize, b.class_count() as usize);
    let mut joint = vec![0usize; ca * cb];
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        joint[x as usize * cb + y as usize] += 1;
    }
    let total = a.labels().len() as f64;
    let ha = entropy(&a.histogram(), total);
    let hb = entropy(&b.histogram(), total);
    if ha == 0.0 || hb == 0.0 {
        return 1.0;
    }
    (ha + hb) / entropy(&joint, total)
}

/// Mean probability the warped atlas assigns to the target's label, over all voxels.
pub fn label_consistency<T: Real>(s: &LabelGrid, warped_soft: &Prob<T>) -> Result<f64> {
    label_consistency_masked(s, warped_soft, None)
}

/// As [`label_consistency`], over voxels where `mask` holds.
pub fn label_consistency_masked<T: Real>(s: &LabelGrid, warped_soft: &Prob<T>, mask: Option<&[bool]>) -> Result<f64> {
    if s.labels().len() != warped_soft.geometry().len() || warped_soft.channels() < s.class_count() as usize {
        return Err(Error::Shape(format!(
            "labels {:?} with {} classes vs probabilities {:?} with {} channels",
            s.geometry().dims,
            s.class_count(),
            warped_soft.geometry().dims,
            warped_soft.channels()
        )));
    }
    if let Some(m) = mask {
        if m.len() != s.labels().len() {
            return Err(Error::Shape("mask size differs from label grid".into()));
        }
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (idx, &k) in s.labels().iter().enumerate() {
        if mask.map_or(true, |m| m[idx]) {
            sum += warped_soft.get(idx, k as usize).as_f64();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// One ranked atlas with its landmark affine (atlas → target).
#[derive(Debug, Clone)]
pub struct SelectedAtlas {
    /// Position in the input list.
    pub index: usize,
    pub id: String,
    pub affine: Affine<f64>,
    pub nmi: f64,
}

/// Ranks atlases by NMI between the target segmentation and the atlas labels
/// after landmark-affine alignment, keeping the best `l`. Ties go to the lower id.
pub fn select_atlases<T: Real>(
    target_seg: &LabelGrid,
    target_lms: &LandmarkSet,
    atlases: &[Atlas<T>],
    l: usize,
) -> Result<Vec<SelectedAtlas>> {
    if l == 0 || atlases.len() < l {
        return Err(Error::Config(format!("cannot select {l} atlases from {}", atlases.len())));
    }
    let mut scored = atlases
        .par_iter()
        .enumerate()
        .map(|(index, atlas)| {
            let run = || -> Result<SelectedAtlas> {
                let affine = fit_affine_12dof::<f64>(&atlas.landmarks, target_lms)?.transform;
                let warped = warp_labels_nearest(&atlas.labels, &affine, target_seg.geometry())?;
                Ok(SelectedAtlas {
                    index,
                    id: atlas.id.clone(),
                    affine,
                    nmi: nmi(target_seg, &warped),
                })
            };
            run().map_err(|e| e.in_stage("atlas selection", atlas.id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.nmi.total_cmp(&a.nmi).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(l);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::{one_hot, Geometry, Volume};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nmi_conventions() {
        let g = Geometry::new([64, 64, 64], [1.0; 3], [0.0; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = LabelGrid::from_fn(g, 5, |_, _, _| rng.gen_range(0..5)).unwrap();
        let b = LabelGrid::from_fn(g, 5, |_, _, _| rng.gen_range(0..5)).unwrap();
        assert!((nmi(&a, &a) - 2.0).abs() < 1e-9);
        let r = nmi(&a, &b);
        assert!(r > 1.0 && r <= 1.05, "{r}");
        let c = LabelGrid::filled(g, 2, 5).unwrap();
        assert_eq!(nmi(&c, &a), 1.0);
        assert_eq!(nmi(&a, &c), 1.0);
    }

    proptest! {
        #[test]
        fn nmi_symmetric_and_bounded(labels in proptest::collection::vec(0u8..4, 60), other in proptest::collection::vec(0u8..4, 60)) {
            let g = Geometry::new([5, 4, 3], [1.0; 3], [0.0; 3]).unwrap();
            let a = LabelGrid::new(g, labels, 4).unwrap();
            let b = LabelGrid::new(g, other, 4).unwrap();
            let (ab, ba) = (nmi(&a, &b), nmi(&b, &a));
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(ab >= 1.0 - 1e-12 && ab <= 2.0 + 1e-12);
        }

        #[test]
        fn consistency_in_unit_interval(labels in proptest::collection::vec(0u8..3, 24), w in proptest::collection::vec(0.0f64..1.0, 72)) {
            let g = Geometry::new([4, 3, 2], [1.0; 3], [0.0; 3]).unwrap();
            let s = LabelGrid::new(g, labels, 3).unwrap();
            let mut data = w;
            for v in data.chunks_mut(3) {
                let t: f64 = v.iter().sum::<f64>() + 1e-12;
                v.iter_mut().for_each(|x| *x /= t);
            }
            let c = label_consistency(&s, &Prob::new(g, 3, data).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }

    #[test]
    fn consistency_examples() {
        let g = Geometry::new([4, 4, 2], [1.0; 3], [0.0; 3]).unwrap();
        let s = LabelGrid::from_fn(g, 3, |i, j, _| ((i + j) % 3) as u8).unwrap();
        assert_eq!(label_consistency(&s, &one_hot::<f64>(&s)).unwrap(), 1.0);
        let shifted = LabelGrid::from_fn(g, 3, |i, j, _| ((i + j + 1) % 3) as u8).unwrap();
        assert_eq!(label_consistency(&s, &one_hot::<f64>(&shifted)).unwrap(), 0.0);
        let half = LabelGrid::from_fn(g, 3, |i, j, k| if k == 0 { s.at(i, j, k) } else { shifted.at(i, j, k) }).unwrap();
        assert_eq!(label_consistency(&s, &one_hot::<f32>(&half)).unwrap(), 0.5);
        let small = Prob::<f64>::zeros(Geometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap(), 3);
        assert!(matches!(label_consistency(&s, &small), Err(Error::Shape(_))));
    }

    fn box_atlas(id: &str, g: Geometry, lo: [usize; 3], hi: [usize; 3]) -> Atlas<f32> {
        let l = LabelGrid::from_fn(g, 2, |i, j, k| {
            let p = [i, j, k];
            (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) as u8
        })
        .unwrap();
        let v = Volume::from_fn(g, |i, j, k| l.at(i, j, k) as f32);
        let lms = LandmarkSet::new([
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 10.0, 0.0],
            [0.0, 0.0, 10.0],
            [10.0, 10.0, 0.0],
            [3.0, 5.0, 9.0],
        ])
        .unwrap();
        Atlas::new(id, v, l, lms).unwrap()
    }

    #[test]
    fn selection_ranks_identical_atlas_first() {
        let g = Geometry::new([16, 16, 16], [1.0; 3], [0.0; 3]).unwrap();
        let target = box_atlas("t", g, [4, 4, 4], [10, 10, 10]);
        let atlases = vec![
            box_atlas("b", g, [2, 2, 2], [7, 7, 7]),
            box_atlas("c", g, [5, 4, 4], [11, 10, 10]),
            box_atlas("a", g, [4, 4, 4], [10, 10, 10]),
            box_atlas("d", g, [0, 0, 0], [3, 15, 15]),
        ];
        let sel = select_atlases(&target.labels, &target.landmarks, &atlases, 4).unwrap();
        assert_eq!(sel[0].id, "a");
        assert!((sel[0].nmi - 2.0).abs() < 1e-9);
        // brute-force ranking
        let mut brute: Vec<(f64, String)> = atlases.iter().map(|a| (nmi(&target.labels, &a.labels), a.id.clone())).collect();
        brute.sort_by(|x, y| y.0.total_cmp(&x.0).then_with(|| x.1.cmp(&y.1)));
        let ids: Vec<_> = sel.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, brute.into_iter().map(|b| b.1).collect::<Vec<_>>());
        assert!(matches!(select_atlases(&target.labels, &target.landmarks, &atlases, 5), Err(Error::Config(_))));
        assert_eq!(select_atlases(&target.labels, &target.landmarks, &atlases, 2).unwrap().len(), 2);
    }
}
