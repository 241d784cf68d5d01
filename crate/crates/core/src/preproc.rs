//! Intensity normalisation, reframing to common dimensions, training-time
//! augmentation and simulation of thick-slice, shifted acquisitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::Affine;
use crate::regfuse::{warp_labels_nearest, warp_volume};
use crate::scalar::Real;
use crate::volgrid::{resample_trilinear, Geometry, LabelGrid, LandmarkSet, Volume, BACKGROUND};

/// Lower and upper clip percentiles.
pub const CLIP_PERCENTILES: (f64, f64) = (0.01, 0.99);

/// Nearest-rank order statistic: element `round(q * (n - 1))` of the sorted values.
fn order_statistic<T: Real>(values: &mut [T], q: f64) -> T {
    let idx = (q * (values.len() - 1) as f64).round() as usize;
    let (_, v, _) = values.select_nth_unstable_by(idx, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    *v
}

/// Clips to the [1st, 99th] percentile range and maps affinely onto [0, 1].
/// A volume whose clip range is degenerate maps to all zeros.
pub fn normalize_intensity<T: Real>(v: &Volume<T>) -> Volume<T> {
    let mut scratch = v.data().to_vec();
    let lo = order_statistic(&mut scratch, CLIP_PERCENTILES.0);
    let hi = order_statistic(&mut scratch, CLIP_PERCENTILES.1);
    if !(hi > lo) {
        return Volume::filled(*v.geometry(), T::zero());
    }
    let range = hi - lo;
    v.map(|x| ((x.max(lo).min(hi)) - lo) / range)
}

/// Centred reframing of a grid to new dimensions.
pub trait Reframe: Sized {
    fn pad_crop_to(&self, target_dims: [usize; 3]) -> Self;
}

fn reframe_geometry(g: &Geometry, target: [usize; 3]) -> (Geometry, [isize; 3]) {
    let mut shift = [0isize; 3];
    let mut origin = g.origin;
    for a in 0..3 {
        // output index o reads input index o + shift
        shift[a] = (g.dims[a] as isize - target[a] as isize).div_euclid(2);
        origin[a] += shift[a] as f64 * g.spacing[a];
    }
    (
        Geometry {
            dims: target,
            spacing: g.spacing,
            origin,
        },
        shift,
    )
}

fn reframe_data<E: Copy>(data: &[E], g: &Geometry, target: [usize; 3], fill: E) -> (Vec<E>, Geometry) {
    let (out_geom, shift) = reframe_geometry(g, target);
    let mut out = Vec::with_capacity(out_geom.len());
    for k in 0..target[2] {
        for j in 0..target[1] {
            for i in 0..target[0] {
                let (si, sj, sk) = (i as isize + shift[0], j as isize + shift[1], k as isize + shift[2]);
                out.push(if g.contains(si, sj, sk) {
                    data[g.index(si as usize, sj as usize, sk as usize)]
                } else {
                    fill
                });
            }
        }
    }
    (out, out_geom)
}

impl<T: Real> Reframe for Volume<T> {
    fn pad_crop_to(&self, target_dims: [usize; 3]) -> Self {
        let (data, geom) = reframe_data(self.data(), self.geometry(), target_dims, T::zero());
        Volume::new(geom, data).expect("reframed payload matches geometry")
    }
}

impl Reframe for LabelGrid {
    fn pad_crop_to(&self, target_dims: [usize; 3]) -> Self {
        let (data, geom) = reframe_data(self.labels(), self.geometry(), target_dims, BACKGROUND);
        LabelGrid::new(geom, data, self.class_count()).expect("reframed payload matches geometry")
    }
}

/// Pads with zeros/background or crops, keeping the input centred and the
/// physical position of retained voxels unchanged.
pub fn pad_crop_to<G: Reframe>(g: &G, target_dims: [usize; 3]) -> G {
    g.pad_crop_to(target_dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSimParams {
    /// Output slice thickness, mm.
    pub target_slice_thickness: f64,
    /// Largest absolute in-plane shift per axis, mm.
    pub max_shift: f64,
    /// Slices removed from the apical (lowest z) end.
    pub apical_truncation_slices: usize,
    pub seed: u64,
}

impl Default for LrSimParams {
    fn default() -> Self {
        LrSimParams {
            target_slice_thickness: 10.0,
            max_shift: 5.0,
            apical_truncation_slices: 1,
            seed: 0,
        }
    }
}

/// Applied in-plane shift per retained output slice, `(dx_mm, dy_mm)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShiftLog(pub Vec<(f64, f64)>);

#[derive(Debug, Clone)]
pub struct LrSimulation<T> {
    pub volume: Volume<T>,
    pub labels: LabelGrid,
    pub shifts: ShiftLog,
}

impl<T: Real> LrSimulation<T> {
    /// Moves landmarks with the slice they fall in. Points outside the
    /// retained slices are returned unchanged.
    pub fn carry_landmarks(&self, lms: &LandmarkSet) -> Result<LandmarkSet> {
        let g = self.volume.geometry();
        lms.map_points(|p| {
            let k = ((p[2] - g.origin[2]) / g.spacing[2]).round();
            if k >= 0.0 && (k as usize) < g.dims[2] {
                let (dx, dy) = self.shifts.0[k as usize];
                [p[0] + dx, p[1] + dy, p[2]]
            } else {
                p
            }
        })
    }
}

fn resample_labels_z(l: &LabelGrid, new_sz: f64) -> Result<LabelGrid> {
    let g = l.geometry();
    let nz = ((g.extent()[2] / new_sz) + 1e-9).floor() as usize + 1;
    let out = Geometry::new([g.dims[0], g.dims[1], nz], [g.spacing[0], g.spacing[1], new_sz], g.origin)?;
    LabelGrid::from_fn(out, l.class_count(), |i, j, k| {
        let src = ((k as f64 * new_sz / g.spacing[2]).round() as usize).min(g.dims[2] - 1);
        l.at(i, j, src)
    })
}

/// Thick-slice decimation, per-slice in-plane shifts and apical truncation.
///
/// Volume slices are boxcar averages of the merged high-resolution slices;
/// labels take the centre slice. Shifts are drawn uniformly in
/// `[-max_shift, max_shift]` mm per axis, rounded to whole voxels and applied
/// identically to volume and labels; vacated voxels become 0 / background.
pub fn simulate_lr<T: Real>(hr_vol: &Volume<T>, hr_lab: &LabelGrid, p: &LrSimParams) -> Result<LrSimulation<T>> {
    hr_vol
        .geometry()
        .ensure_matches(hr_lab.geometry(), "high-resolution volume and labels")?;
    let src = hr_vol.geometry().spacing[2];
    if !(p.target_slice_thickness > src) {
        return Err(Error::Parameter(format!(
            "target slice thickness {} mm must exceed source thickness {src} mm",
            p.target_slice_thickness
        )));
    }
    if !(p.max_shift >= 0.0) {
        return Err(Error::Parameter("max_shift must be >= 0".into()));
    }

    let ratio = p.target_slice_thickness / src;
    let (vol, lab, factor) = if (ratio - ratio.round()).abs() <= 1e-6 {
        (hr_vol.clone(), hr_lab.clone(), ratio.round() as usize)
    } else {
        let f = ratio.ceil();
        let sz = p.target_slice_thickness / f;
        let g = hr_vol.geometry();
        let v = resample_trilinear(hr_vol, [g.spacing[0], g.spacing[1], sz])?;
        let l = resample_labels_z(hr_lab, sz)?;
        (v, l, f as usize)
    };

    let g = *vol.geometry();
    let n_lr = g.dims[2] / factor;
    if n_lr <= p.apical_truncation_slices {
        return Err(Error::Parameter(format!(
            "{n_lr} low-resolution slices leave nothing after truncating {}",
            p.apical_truncation_slices
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut all_shifts = Vec::with_capacity(n_lr);
    for _ in 0..n_lr {
        let (dx, dy) = if p.max_shift > 0.0 {
            (rng.gen_range(-p.max_shift..=p.max_shift), rng.gen_range(-p.max_shift..=p.max_shift))
        } else {
            (0.0, 0.0)
        };
        all_shifts.push([(dx / g.spacing[0]).round() as isize, (dy / g.spacing[1]).round() as isize]);
    }

    let keep = p.apical_truncation_slices..n_lr;
    let out_geom = Geometry::new(
        [g.dims[0], g.dims[1], keep.len()],
        [g.spacing[0], g.spacing[1], p.target_slice_thickness],
        [
            g.origin[0],
            g.origin[1],
            g.origin[2] + ((keep.start * factor) as f64 + (factor - 1) as f64 / 2.0) * g.spacing[2],
        ],
    )?;

    let (nx, ny) = (g.dims[0], g.dims[1]);
    let plane = nx * ny;
    let mut vdata = vec![T::zero(); out_geom.len()];
    let mut ldata = vec![BACKGROUND; out_geom.len()];
    let inv = T::one() / T::of_usize(factor);
    let mut shifts = Vec::with_capacity(keep.len());
    for (out_k, m) in keep.enumerate() {
        let [sx, sy] = all_shifts[m];
        shifts.push((sx as f64 * g.spacing[0], sy as f64 * g.spacing[1]));
        let centre = m * factor + factor / 2;
        for j in 0..ny {
            let src_j = j as isize - sy;
            if src_j < 0 || src_j >= ny as isize {
                continue;
            }
            for i in 0..nx {
                let src_i = i as isize - sx;
                if src_i < 0 || src_i >= nx as isize {
                    continue;
                }
                let (si, sj) = (src_i as usize, src_j as usize);
                let mut acc = T::zero();
                for k in m * factor..(m + 1) * factor {
                    acc += vol.at(si, sj, k);
                }
                let o = out_k * plane + j * nx + i;
                vdata[o] = acc * inv;
                ldata[o] = lab.at(si, sj, centre);
            }
        }
    }

    Ok(LrSimulation {
        volume: Volume::new(out_geom, vdata)?,
        labels: LabelGrid::new(out_geom, ldata, lab.class_count())?,
        shifts: ShiftLog(shifts),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub scale_range: (f64, f64),
    /// Degrees.
    pub rotation_max: f64,
    /// In-plane, mm.
    pub translation_max: f64,
    pub intensity_scale_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale_range: (0.9, 1.1),
            rotation_max: 10.0,
            translation_max: 5.0,
            intensity_scale_range: (0.9, 1.1),
            seed: 0,
        }
    }
}

impl AugmentParams {
    fn validate(&self) -> Result<()> {
        let ordered = |r: (f64, f64)| r.0 <= r.1 && r.0.is_finite() && r.1.is_finite();
        if !ordered(self.scale_range) || self.scale_range.0 <= 0.0 {
            return Err(Error::Parameter(format!("bad scale range {:?}", self.scale_range)));
        }
        if !ordered(self.intensity_scale_range) {
            return Err(Error::Parameter(format!("bad intensity range {:?}", self.intensity_scale_range)));
        }
        if !(self.rotation_max >= 0.0) || !(self.translation_max >= 0.0) {
            return Err(Error::Parameter("rotation and translation bounds must be >= 0".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Random similarity about the grid centre: isotropic scale, rotation about one
/// randomly chosen axis, in-plane translation. Returns the transform and the
/// intensity factor.
pub fn sample_augmentation(geom: &Geometry, p: &AugmentParams) -> Result<(Affine<f64>, f64)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let axis = rng.gen_range(0..3usize);
    let angle = draw(&mut rng, -p.rotation_max, p.rotation_max).to_radians();
    let scale = draw(&mut rng, p.scale_range.0, p.scale_range.1);
    let tx = draw(&mut rng, -p.translation_max, p.translation_max);
    let ty = draw(&mut rng, -p.translation_max, p.translation_max);
    let gain = draw(&mut rng, p.intensity_scale_range.0, p.intensity_scale_range.1);

    let (s, c) = angle.sin_cos();
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    let mut m = [[0.0; 3]; 3];
    m[axis][axis] = scale;
    m[a1][a1] = scale * c;
    m[a1][a2] = -scale * s;
    m[a2][a1] = scale * s;
    m[a2][a2] = scale * c;
    let centre = geom.centre();
    let linear = Affine {
        matrix: m,
        translation: [0.0; 3],
    };
    let rc = linear.apply(centre);
    let t = [centre[0] - rc[0] + tx, centre[1] - rc[1] + ty, centre[2] - rc[2]];
    Ok((Affine { matrix: m, translation: t }, gain))
}

/// Applies one random similarity to volume (trilinear), labels (nearest) and
/// landmarks (exact), then rescales intensities and clips to [0, 1].
pub fn augment_affine<T: Real>(
    v: &Volume<T>,
    l: &LabelGrid,
    lm: &LandmarkSet,
    p: &AugmentParams,
) -> Result<(Volume<T>, LabelGrid, LandmarkSet)> {
    v.geometry().ensure_matches(l.geometry(), "augmentation volume and labels")?;
    let (t, gain) = sample_augmentation(v.geometry(), p)?;
    let geom = *v.geometry();
    let gain = T::of(gain);
    let vol = warp_volume(v, &t, &geom)?.map(|x| (x * gain).max(T::zero()).min(T::one()));
    let lab = warp_labels_nearest(l, &t, &geom)?;
    let lms = lm.map_points(|p| t.apply(p))?;
    Ok((vol, lab, lms))
}
