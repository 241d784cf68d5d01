//! Label-consistency B-spline registration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ffd::{BoxBasis, ControlLattice, FfdTransform};
use super::warp::warp_soft;
use super::label_consistency_masked;
use crate::error::{Error, Result};
use crate::landmarks::Affine;
use crate::volgrid::{LabelGrid, TrilinearCell, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidLevel {
    /// Control point spacing, mm.
    pub control_spacing: [f64; 3],
    pub max_iterations: usize,
    /// Largest control point move of a full step, mm.
    pub step_size: f64,
    /// Gaussian blur of the atlas indicators at this level, mm. Zero disables.
    #[serde(default)]
    pub smoothing_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    pub pyramid_levels: Vec<PyramidLevel>,
    /// Stop a level once an accepted step improves the objective by less than this, relative.
    pub convergence_tol: f64,
    pub gradient_mode: GradientMode,
    /// Padding around the foreground bounding box that bounds the evaluated region, mm.
    pub roi_margin_mm: f64,
    /// Step halvings allowed per level before it is abandoned.
    pub max_halvings: u32,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        let level = |cs: f64, it: usize, step: f64, sigma: f64| PyramidLevel {
            control_spacing: [cs; 3],
            max_iterations: it,
            step_size: step,
            smoothing_sigma: sigma,
        };
        RegistrationConfig {
            pyramid_levels: vec![
                level(40.0, 60, 2.0, 2.0),
                level(20.0, 60, 1.0, 1.0),
                level(10.0, 60, 0.5, 0.0),
                level(5.0, 40, 0.25, 0.0),
            ],
            convergence_tol: 1e-8,
            gradient_mode: GradientMode::Analytic,
            roi_margin_mm: 15.0,
            max_halvings: 6,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pyramid_levels.is_empty() {
            return Err(Error::Config("registration needs at least one pyramid level".into()));
        }
        for (n, l) in self.pyramid_levels.iter().enumerate() {
            if l.control_spacing.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
                return Err(Error::Config(format!("level {n}: control spacing must be > 0")));
            }
            if !(l.step_size > 0.0) || !l.step_size.is_finite() {
                return Err(Error::Config(format!("level {n}: step size must be > 0")));
            }
            if !(l.smoothing_sigma >= 0.0) {
                return Err(Error::Config(format!("level {n}: smoothing sigma must be >= 0")));
            }
            if n > 0 {
                let prev = &self.pyramid_levels[n - 1].control_spacing;
                if (0..3).any(|a| l.control_spacing[a] >= prev[a]) {
                    return Err(Error::Config(format!(
                        "level {n}: control spacing must decrease from level {}",
                        n - 1
                    )));
                }
            }
        }
        if !(self.convergence_tol >= 0.0) || !(self.roi_margin_mm >= 0.0) {
            return Err(Error::Config("convergence_tol and roi_margin_mm must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub level: usize,
    pub iteration: usize,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub transform: FfdTransform,
    /// Objective at the start of each level and after every accepted step.
    pub trace: Vec<TracePoint>,
    /// Label consistency of the affine start, over the evaluated mask.
    pub initial_consistency: f64,
    pub final_consistency: f64,
    pub accepted_steps: usize,
}

impl Registration {
    /// True when the recorded objective never decreases within a level.
    pub fn trace_is_monotone(&self) -> bool {
        self.trace
            .windows(2)
            .all(|w| w[0].level != w[1].level || w[1].objective >= w[0].objective)
    }
}

enum Indicator<'a> {
    Hard(&'a [u8]),
    Smooth(Vec<Vec<f64>>),
}

impl Indicator<'_> {
    #[inline]
    fn value(&self, idx: usize, k: u8) -> f64 {
        match self {
            Indicator::Hard(l) => (l[idx] == k) as u8 as f64,
            Indicator::Smooth(ch) => ch.get(k as usize).map_or(0.0, |c| c[idx]),
        }
    }
}

/// Gaussian-blurred one-hot channels, edge-clamped, separable.
fn smooth_channels(l: &LabelGrid, sigma_mm: f64) -> Vec<Vec<f64>> {
    let g = *l.geometry();
    let kernels: Vec<Vec<f64>> = (0..3)
        .map(|a| {
            let s = sigma_mm / g.spacing[a];
            let r = (3.0 * s).ceil() as isize;
            let mut k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * s * s)).exp()).collect();
            let total: f64 = k.iter().sum();
            k.iter_mut().for_each(|w| *w /= total);
            k
        })
        .collect();
    let [nx, ny, _] = g.dims;
    let stride = [1, nx, nx * ny];
    (0..l.class_count())
        .into_par_iter()
        .map(|c| {
            let mut cur: Vec<f64> = l.labels().iter().map(|&v| (v == c) as u8 as f64).collect();
            for a in 0..3 {
                let k = &kernels[a];
                let r = (k.len() / 2) as isize;
                let n = g.dims[a] as isize;
                let mut next = vec![0.0; cur.len()];
                for (idx, out) in next.iter_mut().enumerate() {
                    let pos = g.coords(idx)[a] as isize;
                    let base = idx as isize - pos * stride[a] as isize;
                    let mut acc = 0.0;
                    for (o, &w) in k.iter().enumerate() {
                        let q = (pos + o as isize - r).clamp(0, n - 1);
                        acc += w * cur[(base + q * stride[a] as isize) as usize];
                    }
                    *out = acc;
                }
                cur = next;
            }
            cur
        })
        .collect()
}

/// The registration objective restricted to a box of target voxels.
struct Problem<'a> {
    box_dims: [usize; 3],
    /// Atlas voxel coordinate of `A⁻¹x` per box voxel.
    v0: Vec<[f64; 3]>,
    label: Vec<u8>,
    active: Vec<bool>,
    n_active: f64,
    /// Maps a target-space displacement (mm) to an atlas voxel offset.
    p: [[f64; 3]; 3],
    atlas_dims: [usize; 3],
    source: Indicator<'a>,
}

impl Problem<'_> {
    fn plane(&self, z: usize, d: &[[f64; 3]], mut grad: Option<&mut [[f64; 3]]>) -> f64 {
        let plane = self.box_dims[0] * self.box_dims[1];
        let off = z * plane;
        let p = &self.p;
        let mut sum = 0.0;
        for o in 0..plane {
            let idx = off + o;
            if !self.active[idx] {
                continue;
            }
            let dd = d[idx];
            let v = self.v0[idx];
            let y = [
                v[0] + p[0][0] * dd[0] + p[0][1] * dd[1] + p[0][2] * dd[2],
                v[1] + p[1][0] * dd[0] + p[1][1] * dd[1] + p[1][2] * dd[2],
                v[2] + p[2][0] * dd[0] + p[2][1] * dd[1] + p[2][2] * dd[2],
            ];
            let cell = TrilinearCell::new(y, self.atlas_dims);
            let k = self.label[idx];
            match grad.as_deref_mut() {
                Some(g) => {
                    let (val, gv) = cell.interpolate_with_gradient(|i| self.source.value(i, k));
                    sum += val;
                    g[o] = [
                        p[0][0] * gv[0] + p[1][0] * gv[1] + p[2][0] * gv[2],
                        p[0][1] * gv[0] + p[1][1] * gv[1] + p[2][1] * gv[2],
                        p[0][2] * gv[0] + p[1][2] * gv[1] + p[2][2] * gv[2],
                    ];
                }
                None => sum += cell.interpolate(|i| self.source.value(i, k)),
            }
        }
        sum
    }

    /// Mean indicator agreement and, optionally, its gradient with respect to
    /// the dense displacement of every box voxel.
    fn evaluate(&self, d: &[[f64; 3]], want_grad: bool) -> (f64, Vec<[f64; 3]>) {
        let plane = self.box_dims[0] * self.box_dims[1];
        let nz = self.box_dims[2];
        let mut grad = Vec::new();
        let sums: Vec<f64> = if want_grad {
            grad = vec![[0.0; 3]; d.len()];
            grad.par_chunks_mut(plane)
                .enumerate()
                .map(|(z, g)| self.plane(z, d, Some(g)))
                .collect()
        } else {
            (0..nz).into_par_iter().map(|z| self.plane(z, d, None)).collect()
        };
        let total: f64 = sums.iter().sum();
        let inv = 1.0 / self.n_active;
        for g in &mut grad {
            *g = g.map(|v| v * inv);
        }
        (total * inv, grad)
    }
}

fn add_fields(a: &[[f64; 3]], b: &[[f64; 3]]) -> Vec<[f64; 3]> {
    a.iter()
        .zip(b)
        .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
        .collect()
}

const FD_STEP_MM: f64 = 1e-4;

/// Maximises label consistency between `s` and the warped atlas over all voxels.
pub fn register_ffd(s: &LabelGrid, atlas_lab: &LabelGrid, init: &Affine<f64>, cfg: &RegistrationConfig) -> Result<Registration> {
    register_ffd_masked(s, atlas_lab, init, cfg, None)
}

/// As [`register_ffd`], counting only target voxels where `mask` is true.
///
/// The target voxel `x` samples the atlas at `A⁻¹(x + d(x))`, `A = init`,
/// with `d` the summed displacement of all pyramid levels. Each level starts
/// from a zero lattice and climbs the gradient with steps whose largest
/// control point move is the level's step size, halving on any decrease.
pub fn register_ffd_masked(
    s: &LabelGrid,
    atlas_lab: &LabelGrid,
    init: &Affine<f64>,
    cfg: &RegistrationConfig,
    mask: Option<&[bool]>,
) -> Result<Registration> {
    cfg.validate()?;
    let domain = *s.geometry();
    if let Some(m) = mask {
        if m.len() != domain.len() {
            return Err(Error::Shape(format!("mask has {} entries for {} voxels", m.len(), domain.len())));
        }
    }
    if !init.is_finite() || init.det() == 0.0 {
        return Err(Error::Transform("initial affine is singular".into()));
    }
    let inv = init.inverse()?;
    let ag = *atlas_lab.geometry();
    let in_mask = |idx: usize| mask.map_or(true, |m| m[idx]);

    // evaluated box: target and affinely mapped atlas foreground, padded
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for idx in 0..domain.len() {
        if !in_mask(idx) {
            continue;
        }
        let c = domain.coords(idx);
        let fg_target = s.labels()[idx] != BACKGROUND;
        let fg_atlas = || {
            let [i, j, k] = ag.clamped_voxel(inv.apply(domain.world(c[0], c[1], c[2])));
            atlas_lab.at(i, j, k) != BACKGROUND
        };
        if fg_target || fg_atlas() {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        lo = [0; 3];
        hi = domain.dims.map(|n| n - 1);
    }
    let mut box_dims = [0usize; 3];
    for a in 0..3 {
        let pad = (cfg.roi_margin_mm / domain.spacing[a]).ceil() as usize;
        lo[a] = lo[a].saturating_sub(pad);
        hi[a] = (hi[a] + pad).min(domain.dims[a] - 1);
        box_dims[a] = hi[a] - lo[a] + 1;
    }
    let box_len: usize = box_dims.iter().product();

    let mut v0 = Vec::with_capacity(box_len);
    let mut label = Vec::with_capacity(box_len);
    let mut active = Vec::with_capacity(box_len);
    for k in 0..box_dims[2] {
        for j in 0..box_dims[1] {
            for i in 0..box_dims[0] {
                let (gi, gj, gk) = (lo[0] + i, lo[1] + j, lo[2] + k);
                let idx = domain.index(gi, gj, gk);
                v0.push(ag.to_voxel(inv.apply(domain.world(gi, gj, gk))));
                label.push(s.labels()[idx]);
                active.push(in_mask(idx));
            }
        }
    }
    let n_active = active.iter().filter(|&&a| a).count();
    let mut p = inv.matrix;
    for (r, row) in p.iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v /= ag.spacing[r];
        }
    }

    let mut problem = Problem {
        box_dims,
        v0,
        label,
        active,
        n_active: n_active.max(1) as f64,
        p,
        atlas_dims: ag.dims,
        source: Indicator::Hard(atlas_lab.labels()),
    };

    let mut d_prev = vec![[0.0; 3]; box_len];
    let mut lattices = Vec::with_capacity(cfg.pyramid_levels.len());
    let mut trace = Vec::new();
    let mut accepted = 0;

    for (li, level) in cfg.pyramid_levels.iter().enumerate() {
        problem.source = if level.smoothing_sigma > 0.0 {
            Indicator::Smooth(smooth_channels(atlas_lab, level.smoothing_sigma))
        } else {
            Indicator::Hard(atlas_lab.labels())
        };
        let mut lat = ControlLattice::covering(&domain, level.control_spacing)?;
        let basis = BoxBasis::new(&lat, &domain, lo, box_dims);
        let analytic = cfg.gradient_mode == GradientMode::Analytic;
        let eval = |phi: &[[f64; 3]], grad: bool| problem.evaluate(&add_fields(&d_prev, &basis.forward(phi)), grad);

        let mut phi = lat.displacements.clone();
        let (mut c, mut g_dense) = eval(&phi, analytic);
        if !c.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at level {li}, start")));
        }
        trace.push(TracePoint {
            level: li,
            iteration: 0,
            objective: c,
        });
        let mut step = level.step_size;
        let mut halvings = 0;
        'iterations: for it in 1..=level.max_iterations {
            let grad = if analytic {
                basis.adjoint(&g_dense)
            } else {
                let mut g = vec![[0.0; 3]; phi.len()];
                let mut trial = phi.clone();
                for cp in 0..phi.len() {
                    for a in 0..3 {
                        trial[cp][a] = phi[cp][a] + FD_STEP_MM;
                        let up = eval(&trial, false).0;
                        trial[cp][a] = phi[cp][a] - FD_STEP_MM;
                        let down = eval(&trial, false).0;
                        trial[cp][a] = phi[cp][a];
                        g[cp][a] = (up - down) / (2.0 * FD_STEP_MM);
                    }
                }
                g
            };
            let gmax = grad
                .iter()
                .map(|v| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt())
                .fold(0.0, f64::max);
            if !gmax.is_finite() {
                return Err(Error::Numeric(format!("gradient not finite at level {li}, iteration {it}")));
            }
            if gmax == 0.0 {
                break;
            }
            loop {
                let scale = step / gmax;
                let trial: Vec<[f64; 3]> = phi
                    .iter()
                    .zip(&grad)
                    .map(|(p, g)| [p[0] + scale * g[0], p[1] + scale * g[1], p[2] + scale * g[2]])
                    .collect();
                let (ct, gt) = eval(&trial, analytic);
                if !ct.is_finite() {
                    return Err(Error::Numeric(format!("objective not finite at level {li}, iteration {it}")));
                }
                if ct >= c {
                    let rel = (ct - c) / c.abs().max(f64::MIN_POSITIVE);
                    phi = trial;
                    c = ct;
                    g_dense = gt;
                    accepted += 1;
                    trace.push(TracePoint {
                        level: li,
                        iteration: it,
                        objective: c,
                    });
                    if rel < cfg.convergence_tol {
                        break 'iterations;
                    }
                    break;
                }
                step *= 0.5;
                halvings += 1;
                if halvings > cfg.max_halvings {
                    break 'iterations;
                }
            }
        }
        log::debug!("level {li}: objective {c:.6} after {} accepted steps", trace.len());
        let dense = basis.forward(&phi);
        d_prev = add_fields(&d_prev, &dense);
        lat.displacements = phi;
        lattices.push(lat);
    }

    let transform = FfdTransform::new(domain, *init, lattices)?;
    let initial_consistency = label_consistency_masked(s, &warp_soft::<f64, _>(atlas_lab, init, &domain)?, mask)?;
    let final_consistency = label_consistency_masked(s, &warp_soft::<f64, _>(atlas_lab, &transform, &domain)?, mask)?;
    Ok(Registration {
        transform,
        trace,
        initial_consistency,
        final_consistency,
        accepted_steps: accepted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Geometry;

    fn ellipsoid(g: Geometry, c: [f64; 3], r: [f64; 3]) -> LabelGrid {
        LabelGrid::from_fn(g, 3, |i, j, k| {
            let p = g.world(i, j, k);
            let e: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
            if e < 0.35 {
                2
            } else if e < 1.0 {
                1
            } else {
                0
            }
        })
        .unwrap()
    }

    fn small_cfg(mode: GradientMode) -> RegistrationConfig {
        RegistrationConfig {
            pyramid_levels: vec![PyramidLevel {
                control_spacing: [8.0; 3],
                max_iterations: 40,
                step_size: 1.0,
                smoothing_sigma: 0.0,
            }],
            gradient_mode: mode,
            roi_margin_mm: 4.0,
            ..RegistrationConfig::default()
        }
    }

    #[test]
    fn identical_inputs_stay_put() {
        let g = Geometry::new([20, 20, 16], [1.0, 1.0, 1.5], [0.0; 3]).unwrap();
        let l = ellipsoid(g, [10.0, 9.5, 11.0], [6.0, 5.0, 7.0]);
        let r = register_ffd(&l, &l, &Affine::identity(), &small_cfg(GradientMode::Analytic)).unwrap();
        assert!(r.final_consistency >= 0.999);
        let max = r.transform.levels().iter().map(|l| l.max_displacement()).fold(0.0, f64::max);
        assert!(max < 0.5, "max displacement {max}");
    }

    #[test]
    fn shifted_blob_is_recovered_monotonically() {
        let g = Geometry::new([24, 24, 18], [1.0, 1.0, 1.5], [0.0; 3]).unwrap();
        let target = ellipsoid(g, [12.0, 12.0, 13.0], [7.0, 6.0, 8.0]);
        let atlas = ellipsoid(g, [10.0, 13.0, 12.0], [6.5, 6.5, 8.0]);
        let r = register_ffd(&target, &atlas, &Affine::identity(), &small_cfg(GradientMode::Analytic)).unwrap();
        assert!(r.trace_is_monotone());
        assert!(r.final_consistency > r.initial_consistency);
        let warped = super::super::warp::warp_labels_nearest(&atlas, &r.transform, &g).unwrap();
        for class in 1..3 {
            let before = crate::metrics::dice_index(&target, &atlas, class).unwrap();
            let after = crate::metrics::dice_index(&target, &warped, class).unwrap();
            assert!(after > before, "class {class}: {before} -> {after}");
        }
        // each accepted step moves a control point by at most the step size
        let bound = r.accepted_steps as f64 * 1.0;
        assert!(r.transform.levels()[0].max_displacement() <= bound + 1e-9);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let g = Geometry::new([14, 13, 10], [1.0, 1.2, 1.5], [0.0; 3]).unwrap();
        let target = ellipsoid(g, [7.0, 7.5, 7.0], [4.5, 4.0, 5.0]);
        let atlas = ellipsoid(g, [6.3, 8.1, 7.6], [4.0, 4.4, 5.2]);
        let init = Affine::from_row_major([1.02, 0.03, 0.0, -0.2, -0.01, 0.98, 0.02, 0.3, 0.0, 0.02, 1.01, 0.1]);
        let level = PyramidLevel {
            control_spacing: [5.0; 3],
            max_iterations: 1,
            step_size: 0.5,
            smoothing_sigma: 1.5,
        };
        let mk = |mode| RegistrationConfig {
            pyramid_levels: vec![level.clone()],
            gradient_mode: mode,
            roi_margin_mm: 3.0,
            ..RegistrationConfig::default()
        };
        // one normalised step along each gradient lands at nearly the same lattice
        let a = register_ffd(&target, &atlas, &init, &mk(GradientMode::Analytic)).unwrap();
        let f = register_ffd(&target, &atlas, &init, &mk(GradientMode::FiniteDifference)).unwrap();
        let (la, lf) = (&a.transform.levels()[0], &f.transform.levels()[0]);
        let mut diff: f64 = 0.0;
        for (x, y) in la.displacements.iter().zip(&lf.displacements) {
            for c in 0..3 {
                diff = diff.max((x[c] - y[c]).abs());
            }
        }
        assert!(la.max_displacement() > 0.1);
        assert!(diff < 5e-3, "max control point difference {diff}");
    }

    #[test]
    fn config_validation() {
        let mut c = RegistrationConfig::default();
        c.pyramid_levels[1].control_spacing = [50.0; 3];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.pyramid_levels.clear();
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&RegistrationConfig::default()).unwrap();
        let back: RegistrationConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, RegistrationConfig::default());
    }
}
