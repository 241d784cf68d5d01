//! Synthetic bi-ventricular phantoms.
//!
//! Each subject is built from ellipsoids in a heart frame (long axis along z,
//! apex at negative z, basal plane cut flat) and placed in the world with a
//! random rotation, tilt, scale and position. Labels come from the analytic
//! shapes; intensities are piecewise constant per tissue plus Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::Affine;
use crate::regfuse::{ControlLattice, FfdTransform};
use crate::scalar::Real;
use crate::volgrid::{Atlas, Geometry, LabelGrid, LandmarkName, LandmarkSet, Volume, BACKGROUND, LVC, LVW, RVC, RVW, TISSUE_CLASSES};

/// Mean intensity per tissue label.
pub const TISSUE_INTENSITY: [f64; 5] = [0.08, 0.92, 0.32, 0.72, 0.48];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub noise_sd: f64,
    /// Uniform scale range.
    pub scale_range: (f64, f64),
    pub rotation_max_deg: f64,
    pub tilt_max_deg: f64,
    /// Half-width of the uniform in-plane jitter of the LV centre, mm.
    pub position_jitter_mm: f64,
    /// World z of the apex, drawn uniformly.
    pub apex_z_range: (f64, f64),
    /// Relative jitter of every shape dimension.
    pub shape_jitter: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [64, 64, 64],
            spacing: [1.25, 1.25, 2.0],
            noise_sd: 0.03,
            scale_range: (0.9, 1.1),
            rotation_max_deg: 15.0,
            tilt_max_deg: 8.0,
            position_jitter_mm: 3.0,
            apex_z_range: (2.0, 6.0),
            shape_jitter: 0.08,
        }
    }
}

impl PhantomParams {
    /// Lattice centred in-plane, starting at z = 0.
    pub fn geometry(&self) -> Result<Geometry> {
        let ox = -(self.dims[0] as f64 - 1.0) * self.spacing[0] / 2.0;
        let oy = -(self.dims[1] as f64 - 1.0) * self.spacing[1] / 2.0;
        Geometry::new(self.dims, self.spacing, [ox, oy, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        let ok = self.noise_sd >= 0.0
            && self.scale_range.0 > 0.0
            && self.scale_range.0 <= self.scale_range.1
            && self.apex_z_range.0 <= self.apex_z_range.1
            && (0.0..0.5).contains(&self.shape_jitter)
            && self.rotation_max_deg >= 0.0
            && self.tilt_max_deg >= 0.0
            && self.position_jitter_mm >= 0.0;
        if !ok {
            return Err(Error::Parameter(format!("invalid phantom parameters: {self:?}")));
        }
        Ok(())
    }
}

/// Ellipsoid semi-axes and centres in the heart frame, mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartShape {
    pub lv_cavity: [f64; 3],
    pub lv_outer: [f64; 3],
    pub rv_outer: [f64; 3],
    pub rv_inner: [f64; 3],
    pub rv_centre: [f64; 3],
    pub base_z: f64,
}

impl Default for HeartShape {
    fn default() -> Self {
        HeartShape {
            lv_cavity: [11.0, 11.0, 28.0],
            lv_outer: [17.0, 17.0, 35.0],
            rv_outer: [20.0, 22.0, 30.0],
            rv_inner: [14.0, 16.0, 24.0],
            rv_centre: [-10.0, 0.0, 3.0],
            base_z: 12.0,
        }
    }
}

fn ellipsoid(q: [f64; 3], centre: [f64; 3], axes: [f64; 3]) -> f64 {
    (0..3).map(|a| ((q[a] - centre[a]) / axes[a]).powi(2)).sum()
}

impl HeartShape {
    pub fn label(&self, q: [f64; 3]) -> u8 {
        if q[2] > self.base_z {
            return BACKGROUND;
        }
        if ellipsoid(q, [0.0; 3], self.lv_cavity) < 1.0 {
            return LVC;
        }
        if ellipsoid(q, [0.0; 3], self.lv_outer) < 1.0 {
            return LVW;
        }
        if ellipsoid(q, self.rv_centre, self.rv_inner) < 1.0 {
            return RVC;
        }
        if ellipsoid(q, self.rv_centre, self.rv_outer) < 1.0 {
            return RVW;
        }
        BACKGROUND
    }

    fn mid_z(&self) -> f64 {
        (self.base_z - self.lv_outer[2]) / 2.0
    }

    /// Landmarks in the heart frame.
    pub fn landmarks(&self) -> Result<LandmarkSet> {
        let [a, b, c] = self.lv_outer;
        let z = self.mid_z();
        let r = (1.0 - (z / c).powi(2)).sqrt();
        let (rx, ry) = (a * r, b * r);
        let on_lv = |t: f64| [rx * t.cos(), ry * t.sin(), z];
        let rv_side = |t: f64| ellipsoid(on_lv(t), self.rv_centre, self.rv_outer) - 1.0;
        let insert = |lo: f64, hi: f64| -> Result<[f64; 3]> {
            let (mut lo, mut hi) = (lo, hi);
            if rv_side(lo) * rv_side(hi) > 0.0 {
                return Err(Error::Geometry("RV and LV surfaces do not meet at mid-ventricle".into()));
            }
            for _ in 0..80 {
                let m = 0.5 * (lo + hi);
                if (rv_side(m) > 0.0) == (rv_side(lo) > 0.0) {
                    lo = m;
                } else {
                    hi = m;
                }
            }
            Ok(on_lv(0.5 * (lo + hi)))
        };
        let pi = std::f64::consts::PI;
        let [rcx, rcy, rcz] = self.rv_centre;
        let [ra, rb, rc] = self.rv_outer;
        let rv_extent = 1.0 - ((0.0 - rcy) / rb).powi(2) - ((z - rcz) / rc).powi(2);
        if rv_extent <= 0.0 {
            return Err(Error::Geometry("RV does not reach mid-ventricle".into()));
        }
        LandmarkSet::from_named(&[
            (LandmarkName::RvInsert1, insert(0.0, pi)?),
            (LandmarkName::RvInsert2, insert(0.0, -pi)?),
            (LandmarkName::RvLateralTurning, [rcx - ra * rv_extent.sqrt(), 0.0, z]),
            (LandmarkName::LvLateralMid, [rx, 0.0, z]),
            (LandmarkName::Apex, [0.0, 0.0, -c]),
            (LandmarkName::MitralCentre, [0.0, 0.0, self.base_z]),
        ])
    }
}

/// Placement of the heart frame in the world and the subject's shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhantomPose {
    pub shape: HeartShape,
    /// Heart-frame → world, including scale.
    pub to_world: Affine<f64>,
}

#[derive(Debug, Clone)]
pub struct Phantom<T = f32> {
    pub id: String,
    pub volume: Volume<T>,
    pub labels: LabelGrid,
    pub landmarks: LandmarkSet,
    pub pose: PhantomPose,
}

impl<T: Real> Phantom<T> {
    pub fn to_atlas(&self) -> Result<Atlas<T>> {
        Atlas::new(self.id.clone(), self.volume.clone(), self.labels.clone(), self.landmarks.clone())
    }
}

fn rotation(axis: usize, deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let (i, j) = ((axis + 1) % 3, (axis + 2) % 3);
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = 1.0;
    m[i][i] = c;
    m[i][j] = -s;
    m[j][i] = s;
    m[j][j] = c;
    m
}

fn matmul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn sample_pose(p: &PhantomParams, rng: &mut ChaCha8Rng) -> PhantomPose {
    let d = HeartShape::default();
    let mut jit = || rng.gen_range(1.0 - p.shape_jitter..=1.0 + p.shape_jitter);
    let lv = [jit(), jit(), jit()];
    let wall = jit();
    let rv = [jit(), jit(), jit()];
    let scale3 = |v: [f64; 3], f: [f64; 3]| [v[0] * f[0], v[1] * f[1], v[2] * f[2]];
    let lv_cavity = scale3(d.lv_cavity, lv);
    let lv_outer = [
        lv_cavity[0] + (d.lv_outer[0] - d.lv_cavity[0]) * wall,
        lv_cavity[1] + (d.lv_outer[1] - d.lv_cavity[1]) * wall,
        lv_cavity[2] + (d.lv_outer[2] - d.lv_cavity[2]) * wall,
    ];
    let rv_outer = scale3(d.rv_outer, rv);
    let rv_inner = [0, 1, 2].map(|a| rv_outer[a] - (d.rv_outer[a] - d.rv_inner[a]));
    let shape = HeartShape {
        lv_cavity,
        lv_outer,
        rv_outer,
        rv_inner,
        rv_centre: [d.rv_centre[0] * rv[0], d.rv_centre[1], d.rv_centre[2]],
        base_z: d.base_z,
    };

    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.gen_range(-m..=m) } else { 0.0 };
    let theta = sym(rng, p.rotation_max_deg);
    let tilt_x = sym(rng, p.tilt_max_deg);
    let tilt_y = sym(rng, p.tilt_max_deg);
    let s = rng.gen_range(p.scale_range.0..=p.scale_range.1);
    let r = matmul(rotation(2, theta), matmul(rotation(1, tilt_y), rotation(0, tilt_x)));
    let m = r.map(|row| row.map(|v| v * s));
    let cx = 6.0 + sym(rng, p.position_jitter_mm);
    let cy = sym(rng, p.position_jitter_mm);
    let apex_z = rng.gen_range(p.apex_z_range.0..=p.apex_z_range.1);
    let apex_offset = (0..3).map(|k| m[2][k] * [0.0, 0.0, -lv_outer[2]][k]).sum::<f64>();
    PhantomPose {
        shape,
        to_world: Affine {
            matrix: m,
            translation: [cx, cy, apex_z - apex_offset],
        },
    }
}

/// One phantom drawn from `rng`.
pub fn generate_phantom<T: Real>(id: impl Into<String>, p: &PhantomParams, rng: &mut ChaCha8Rng) -> Result<Phantom<T>> {
    p.validate()?;
    let geom = p.geometry()?;
    let pose = sample_pose(p, rng);
    let to_heart = pose.to_world.inverse()?;
    let labels = LabelGrid::from_fn(geom, TISSUE_CLASSES, |i, j, k| pose.shape.label(to_heart.apply(geom.world(i, j, k))))?;
    let noise = Normal::new(0.0, p.noise_sd.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let data = labels
        .labels()
        .iter()
        .map(|&l| {
            let n = if p.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
            T::of((TISSUE_INTENSITY[l as usize] + n).clamp(0.0, 1.0))
        })
        .collect();
    let landmarks = pose.shape.landmarks()?.map_points(|q| pose.to_world.apply(q))?;
    Ok(Phantom {
        id: id.into(),
        volume: Volume::new(geom, data)?,
        labels,
        landmarks,
        pose,
    })
}

/// `count` phantoms named `phantom-000`, `phantom-001`, ...; subject `i` draws
/// from stream `i` of a generator seeded with `seed`, so the cohort does not
/// depend on scheduling.
pub fn generate_cohort<T: Real>(count: usize, p: &PhantomParams, seed: u64) -> Result<Vec<Phantom<T>>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_phantom(format!("phantom-{i:03}"), p, &mut rng)
        })
        .collect()
}

/// Smooth random deformation on a single control lattice with spacing
/// `control_spacing_vox` voxels, scaled so that the largest dense displacement
/// along each axis is exactly `max_disp_vox` voxels.
pub fn random_ffd(geom: &Geometry, control_spacing_vox: f64, max_disp_vox: f64, seed: u64) -> Result<FfdTransform> {
    if !(control_spacing_vox > 0.0) || !(max_disp_vox >= 0.0) {
        return Err(Error::Parameter("control spacing must be > 0 and displacement >= 0".into()));
    }
    let cs = geom.spacing.map(|s| s * control_spacing_vox);
    let mut lat = ControlLattice::covering(geom, cs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for d in &mut lat.displacements {
        *d = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    }
    let probe = FfdTransform::new(*geom, Affine::identity(), vec![lat.clone()])?;
    let mut peak = [0.0f64; 3];
    for d in probe.dense_displacements() {
        for a in 0..3 {
            peak[a] = peak[a].max(d[a].abs());
        }
    }
    for d in &mut lat.displacements {
        for a in 0..3 {
            d[a] *= if peak[a] > 0.0 { max_disp_vox * geom.spacing[a] / peak[a] } else { 0.0 };
        }
    }
    FfdTransform::new(*geom, Affine::identity(), vec![lat])
}

/// Bright ellipsoid on a dark background with the six landmarks at its
/// axis extremes (`+x, −x, +y, −y, −z, +z` in landmark order).
pub fn separable_phantom<T: Real>(seed: u64) -> Result<(Volume<T>, LabelGrid, LandmarkSet)> {
    let geom = Geometry::new([24, 24, 12], [1.0, 1.0, 2.0], [0.0; 3])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = [rng.gen_range(10..14), rng.gen_range(10..14), rng.gen_range(5..7)];
    let r = [rng.gen_range(6..9), rng.gen_range(6..9), rng.gen_range(3..5)];
    let labels = LabelGrid::from_fn(geom, TISSUE_CLASSES, |i, j, k| {
        let q = [i as f64, j as f64, k as f64];
        (ellipsoid(q, c.map(|v| v as f64), r.map(|v| v as f64)) <= 1.0) as u8
    })?;
    let noise = Normal::new(0.0, 0.05).map_err(|e| Error::Parameter(e.to_string()))?;
    let volume = Volume::from_fn(geom, |i, j, k| {
        let base = if labels.at(i, j, k) == 1 { 0.85 } else { 0.15 };
        T::of(base + noise.sample(&mut rng))
    });
    let ext = |a: usize, sign: isize| {
        let mut v = c.map(|x| x as isize);
        v[a] += sign * r[a] as isize;
        geom.world(v[0] as usize, v[1] as usize, v[2] as usize)
    };
    let lms = LandmarkSet::new([ext(0, 1), ext(0, -1), ext(1, 1), ext(1, -1), ext(2, -1), ext(2, 1)])?;
    Ok((volume, labels, lms))
}
