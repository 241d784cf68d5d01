//! Non-local patch-based label fusion.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volgrid::{argmax_lowest, Geometry, LabelGrid, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Kernel bandwidth applied to the patch sum of squared differences.
    pub h: f64,
    /// Patch size in voxels, odd per axis.
    pub patch_dims: [usize; 3],
    /// Search window in voxels, odd per axis.
    pub search_dims: [usize; 3],
    /// Atlases kept after selection.
    pub atlas_count: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            h: 10.0,
            patch_dims: [7, 7, 1],
            search_dims: [7, 7, 3],
            atlas_count: 5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Config(format!("fusion bandwidth h must be > 0, got {}", self.h)));
        }
        for (name, d) in [("patch_dims", self.patch_dims), ("search_dims", self.search_dims)] {
            if d.iter().any(|&n| n % 2 == 0) {
                return Err(Error::Config(format!("{name} must be odd in every axis, got {d:?}")));
            }
        }
        if self.atlas_count == 0 {
            return Err(Error::Config("atlas_count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Min or max label over the clipped search window, separably.
fn window_extreme(labels: &[u8], g: &Geometry, radius: [usize; 3], pick: fn(u8, u8) -> u8) -> Vec<u8> {
    let stride = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let mut cur = labels.to_vec();
    for a in 0..3 {
        if radius[a] == 0 {
            continue;
        }
        let r = radius[a] as isize;
        let n = g.dims[a] as isize;
        let next: Vec<u8> = (0..cur.len())
            .map(|idx| {
                let pos = g.coords(idx)[a] as isize;
                let base = idx as isize - pos * stride[a] as isize;
                let lo = (pos - r).max(0);
                let hi = (pos + r).min(n - 1);
                (lo..=hi).fold(cur[idx], |acc, q| pick(acc, cur[(base + q * stride[a] as isize) as usize]))
            })
            .collect();
        cur = next;
    }
    cur
}

pub fn fuse_labels<T: Real>(target: &Volume<T>, warped: &[(Volume<T>, LabelGrid)], cfg: &FusionConfig) -> Result<LabelGrid> {
    fuse_labels_masked(target, warped, cfg, None)
}

/// Weighted patch voting. Each candidate `y` in the search window of `x` in
/// every atlas adds `exp(-‖f_x − f_{n,y}‖² / h)` to the vote for its label.
/// Patch entries outside the grid, or at target voxels excluded by `mask`,
/// do not enter the distance. Ties go to the lower label.
pub fn fuse_labels_masked<T: Real>(
    target: &Volume<T>,
    warped: &[(Volume<T>, LabelGrid)],
    cfg: &FusionConfig,
    mask: Option<&[bool]>,
) -> Result<LabelGrid> {
    cfg.validate()?;
    if warped.is_empty() {
        return Err(Error::Config("label fusion needs at least one atlas".into()));
    }
    let g = *target.geometry();
    for (n, (v, l)) in warped.iter().enumerate() {
        g.ensure_matches(v.geometry(), &format!("fusion atlas {n} volume"))?;
        g.ensure_matches(l.geometry(), &format!("fusion atlas {n} labels"))?;
    }
    if let Some(m) = mask {
        if m.len() != g.len() {
            return Err(Error::Shape(format!("mask has {} entries for {} voxels", m.len(), g.len())));
        }
    }
    let classes = warped.iter().map(|(_, l)| l.class_count()).max().unwrap_or(2) as usize;
    let sr = cfg.search_dims.map(|d| d / 2);
    let pr = cfg.patch_dims.map(|d| d / 2);

    // unanimous windows need no distances
    let mut out = vec![0u8; g.len()];
    let mut pending = Vec::new();
    let extremes: Vec<(Vec<u8>, Vec<u8>)> = warped
        .par_iter()
        .map(|(_, l)| {
            (
                window_extreme(l.labels(), &g, sr, std::cmp::min),
                window_extreme(l.labels(), &g, sr, std::cmp::max),
            )
        })
        .collect();
    for (idx, o) in out.iter_mut().enumerate() {
        let k = extremes[0].0[idx];
        if extremes.iter().all(|(lo, hi)| lo[idx] == k && hi[idx] == k) {
            *o = k;
        } else {
            pending.push(idx);
        }
    }
    if pending.is_empty() {
        return LabelGrid::new(g, out, classes as u8);
    }

    // distance region: pending bounding box grown by the patch radius
    let mut plo = [usize::MAX; 3];
    let mut phi = [0usize; 3];
    for &idx in &pending {
        let c = g.coords(idx);
        for a in 0..3 {
            plo[a] = plo[a].min(c[a]);
            phi[a] = phi[a].max(c[a]);
        }
    }
    let rlo: [usize; 3] = [0, 1, 2].map(|a| plo[a].saturating_sub(pr[a]));
    let rhi: [usize; 3] = [0, 1, 2].map(|a| (phi[a] + pr[a]).min(g.dims[a] - 1));
    let rd: [usize; 3] = [0, 1, 2].map(|a| rhi[a] - rlo[a] + 1);
    let rlen = rd[0] * rd[1] * rd[2];
    let rplane = rd[0] * rd[1];
    let ridx = |i: usize, j: usize, k: usize| (i - rlo[0]) + rd[0] * ((j - rlo[1]) + rd[1] * (k - rlo[2]));

    let f: Vec<f64> = target.data().iter().map(|v| v.as_f64()).collect();
    let in_mask = |idx: usize| mask.map_or(true, |m| m[idx]);
    let inv_h = 1.0 / cfg.h;
    let mut votes = vec![0.0f64; pending.len() * classes];
    let mut dist = vec![0.0f64; rlen];
    let mut tmp = vec![0.0f64; rlen];

    for (vol, lab) in warped {
        let fa: Vec<f64> = vol.data().iter().map(|v| v.as_f64()).collect();
        let labels = lab.labels();
        for dz in -(sr[2] as isize)..=sr[2] as isize {
            for dy in -(sr[1] as isize)..=sr[1] as isize {
                for dx in -(sr[0] as isize)..=sr[0] as isize {
                    let delta = [dx, dy, dz];
                    // squared differences at every region voxel
                    dist.par_chunks_mut(rplane).enumerate().for_each(|(kz, plane)| {
                        let k = rlo[2] + kz;
                        for (o, d) in plane.iter_mut().enumerate() {
                            let (i, j) = (rlo[0] + o % rd[0], rlo[1] + o / rd[0]);
                            let (qi, qj, qk) = (i as isize + dx, j as isize + dy, k as isize + dz);
                            let p = g.index(i, j, k);
                            *d = if g.contains(qi, qj, qk) && in_mask(p) {
                                let e = f[p] - fa[g.index(qi as usize, qj as usize, qk as usize)];
                                e * e
                            } else {
                                0.0
                            };
                        }
                    });
                    box_sum(&mut dist, &mut tmp, rd, pr);

                    votes.par_chunks_mut(classes).zip(pending.par_iter()).for_each(|(v, &idx)| {
                        let c = g.coords(idx);
                        let q = [0, 1, 2].map(|a| c[a] as isize + delta[a]);
                        if g.contains(q[0], q[1], q[2]) {
                            let w = (-dist[ridx(c[0], c[1], c[2])] * inv_h).exp();
                            v[labels[g.index(q[0] as usize, q[1] as usize, q[2] as usize)] as usize] += w;
                        }
                    });
                }
            }
        }
    }

    for (v, &idx) in votes.chunks_exact(classes).zip(&pending) {
        out[idx] = argmax_lowest(v) as u8;
    }
    LabelGrid::new(g, out, classes as u8)
}

/// In-place separable box sum with radius `r`, treating outside entries as zero.
fn box_sum(data: &mut [f64], tmp: &mut [f64], dims: [usize; 3], r: [usize; 3]) {
    let stride = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        if r[a] == 0 {
            continue;
        }
        let n = dims[a] as isize;
        let ra = r[a] as isize;
        let src: &[f64] = data;
        tmp.par_chunks_mut(dims[0] * dims[1]).enumerate().for_each(|(k, plane)| {
            for (o, t) in plane.iter_mut().enumerate() {
                let idx = k * dims[0] * dims[1] + o;
                let pos = [o % dims[0], o / dims[0], k][a] as isize;
                let base = idx as isize - pos * stride[a] as isize;
                let mut acc = 0.0;
                for q in (pos - ra).max(0)..=(pos + ra).min(n - 1) {
                    acc += src[(base + q * stride[a] as isize) as usize];
                }
                *t = acc;
            }
        });
        data.copy_from_slice(tmp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the voting rule, one voxel at a time.
    fn oracle(target: &Volume<f64>, warped: &[(Volume<f64>, LabelGrid)], cfg: &FusionConfig) -> LabelGrid {
        let g = *target.geometry();
        let n = g.dims.map(|d| d as isize);
        let classes = warped.iter().map(|(_, l)| l.class_count()).max().unwrap() as usize;
        let sr = cfg.search_dims.map(|d| (d / 2) as isize);
        let pr = cfg.patch_dims.map(|d| (d / 2) as isize);
        let inside = |p: [isize; 3]| (0..3).all(|a| p[a] >= 0 && p[a] < n[a]);
        let at = |v: &Volume<f64>, p: [isize; 3]| v.at(p[0] as usize, p[1] as usize, p[2] as usize);
        LabelGrid::from_fn(g, classes as u8, |i, j, k| {
            let x = [i as isize, j as isize, k as isize];
            let mut votes = vec![0.0; classes];
            for (vol, lab) in warped {
                for dz in -sr[2]..=sr[2] {
                    for dy in -sr[1]..=sr[1] {
                        for dx in -sr[0]..=sr[0] {
                            let y = [x[0] + dx, x[1] + dy, x[2] + dz];
                            if !inside(y) {
                                continue;
                            }
                            let mut d = 0.0;
                            for oz in -pr[2]..=pr[2] {
                                for oy in -pr[1]..=pr[1] {
                                    for ox in -pr[0]..=pr[0] {
                                        let px = [x[0] + ox, x[1] + oy, x[2] + oz];
                                        let py = [y[0] + ox, y[1] + oy, y[2] + oz];
                                        if inside(px) && inside(py) {
                                            let e = at(target, px) - at(vol, py);
                                            d += e * e;
                                        }
                                    }
                                }
                            }
                            votes[lab.at(y[0] as usize, y[1] as usize, y[2] as usize) as usize] += (-d / cfg.h).exp();
                        }
                    }
                }
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best as u8
        })
        .unwrap()
    }

    fn instance(seed: u64, atlases: usize) -> (Volume<f64>, Vec<(Volume<f64>, LabelGrid)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Geometry::new([8, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
        let target = Volume::from_fn(g, |_, _, _| rng.gen::<f64>());
        let warped = (0..atlases)
            .map(|_| {
                let v = Volume::from_fn(g, |_, _, _| rng.gen::<f64>());
                let l = LabelGrid::from_fn(g, 5, |i, _, _| if rng.gen_bool(0.7) { (i / 2) as u8 % 5 } else { rng.gen_range(0..5) })
                    .unwrap();
                (v, l)
            })
            .collect();
        (target, warped)
    }

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            h: 1.0,
            patch_dims: [3, 3, 1],
            search_dims: [3, 3, 3],
            atlas_count: 3,
        }
    }

    #[test]
    fn matches_oracle() {
        for seed in 0..6 {
            let (t, w) = instance(seed, 2 + seed as usize % 2);
            assert_eq!(fuse_labels(&t, &w, &small_cfg()).unwrap(), oracle(&t, &w, &small_cfg()), "seed {seed}");
        }
    }

    #[test]
    fn single_atlas_unit_window_is_identity() {
        let (t, w) = instance(3, 1);
        let cfg = FusionConfig {
            search_dims: [1, 1, 1],
            ..small_cfg()
        };
        assert_eq!(fuse_labels(&t, &w, &cfg).unwrap(), w[0].1);
    }

    #[test]
    fn order_invariant_and_unanimous() {
        let (t, mut w) = instance(8, 3);
        let a = fuse_labels(&t, &w, &small_cfg()).unwrap();
        w.reverse();
        assert_eq!(fuse_labels(&t, &w, &small_cfg()).unwrap(), a);

        let g = *t.geometry();
        let same: Vec<_> = w.iter().map(|(v, _)| (v.clone(), LabelGrid::filled(g, 3, 5).unwrap())).collect();
        let u = fuse_labels(&t, &same, &FusionConfig::default()).unwrap();
        assert!(u.labels().iter().all(|&l| l == 3));
    }

    #[test]
    fn atlas_equal_to_target_reproduces_labels() {
        let g = Geometry::new([12, 12, 6], [1.0; 3], [0.0; 3]).unwrap();
        let l = LabelGrid::from_fn(g, 3, |i, j, _| if (i as f64 - 6.0).hypot(j as f64 - 6.0) < 3.5 { 1 } else if i > 9 { 2 } else { 0 })
            .unwrap();
        // distinct intensity per voxel position so off-centre patches differ strongly
        let v = Volume::from_fn(g, |i, j, k| l.at(i, j, k) as f64 * 3.0 + ((i * 7 + j * 13 + k * 5) % 11) as f64 * 0.4);
        let cfg = FusionConfig {
            h: 1.0,
            patch_dims: [3, 3, 1],
            search_dims: [3, 3, 3],
            atlas_count: 1,
        };
        assert_eq!(fuse_labels(&v, &[(v.clone(), l.clone())], &cfg).unwrap(), l);
    }

    #[test]
    fn config_rejects_even_dims() {
        let c = FusionConfig {
            patch_dims: [4, 3, 1],
            ..FusionConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = FusionConfig {
            h: 0.0,
            ..FusionConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
