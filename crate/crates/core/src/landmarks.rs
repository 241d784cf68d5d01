//! Landmark extraction from classifier output, 12-DOF affine fitting from
//! landmark pairs, and point-to-point error statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::mean_sd;
use crate::scalar::Real;
use crate::volgrid::{Geometry, LabelGrid, LandmarkName, LandmarkSet, LANDMARK_COUNT};

/// `p -> M p + t` on physical points (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine<T> {
    pub matrix: [[T; 3]; 3],
    pub translation: [T; 3],
}

impl<T: Real> Affine<T> {
    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Affine {
            matrix: [[o, z, z], [z, o, z], [z, z, o]],
            translation: [z; 3],
        }
    }

    pub fn translation(t: [T; 3]) -> Self {
        Affine {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rows of `[M | t]`, 12 numbers.
    pub fn from_row_major(v: [T; 12]) -> Self {
        Affine {
            matrix: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            translation: [v[3], v[7], v[11]],
        }
    }

    pub fn to_row_major(&self) -> [T; 12] {
        let m = &self.matrix;
        let t = &self.translation;
        [
            m[0][0], m[0][1], m[0][2], t[0], m[1][0], m[1][1], m[1][2], t[1], m[2][0], m[2][1], m[2][2], t[2],
        ]
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let m = &self.matrix;
        let mut out = self.translation;
        for r in 0..3 {
            out[r] += m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2];
        }
        out
    }

    #[inline]
    pub fn apply_linear(&self, v: [T; 3]) -> [T; 3] {
        let m = &self.matrix;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn det(&self) -> T {
        det3(&self.matrix)
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().flatten().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = inv3(&self.matrix).ok_or_else(|| Error::Transform("affine matrix is singular".into()))?;
        let t = [
            -(inv[0][0] * self.translation[0] + inv[0][1] * self.translation[1] + inv[0][2] * self.translation[2]),
            -(inv[1][0] * self.translation[0] + inv[1][1] * self.translation[1] + inv[1][2] * self.translation[2]),
            -(inv[2][0] * self.translation[0] + inv[2][1] * self.translation[1] + inv[2][2] * self.translation[2]),
        ];
        Ok(Affine {
            matrix: inv,
            translation: t,
        })
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine<T>) -> Self {
        let mut m = [[T::zero(); 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                for k in 0..3 {
                    *v += self.matrix[r][k] * other.matrix[k][c];
                }
            }
        }
        Affine {
            matrix: m,
            translation: self.apply(other.translation),
        }
    }

    pub fn cast<U: Real>(&self) -> Affine<U> {
        Affine {
            matrix: self.matrix.map(|r| r.map(|v| U::of(v.as_f64()))),
            translation: self.translation.map(|v| U::of(v.as_f64())),
        }
    }

    pub fn apply_f64(&self, p: [f64; 3]) -> [f64; 3] {
        self.apply(p.map(T::of)).map(Real::as_f64)
    }

    /// Largest absolute difference over the 12 parameters.
    pub fn max_abs_diff(&self, other: &Affine<T>) -> T {
        self.to_row_major()
            .iter()
            .zip(other.to_row_major().iter())
            .fold(T::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }
}

pub(crate) fn det3<T: Real>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub(crate) fn inv3<T: Real>(m: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let d = det3(m);
    let scale = m.iter().flatten().fold(T::zero(), |acc, v| acc.max(v.abs()));
    if !d.is_finite() || d == T::zero() || d.abs() <= scale * scale * scale * T::epsilon() {
        return None;
    }
    let c = |r0: usize, c0: usize, r1: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [c(1, 1, 2, 2), -c(0, 1, 2, 2), c(0, 1, 1, 2)],
        [-c(1, 0, 2, 2), c(0, 0, 2, 2), -c(0, 0, 1, 2)],
        [c(1, 0, 2, 1), -c(0, 0, 2, 1), c(0, 0, 1, 1)],
    ];
    Some(adj.map(|row| row.map(|v| v / d)))
}

/// Unweighted mean of member-voxel centres for landmark classes 1..=6.
pub fn centroid_landmarks(l: &LabelGrid) -> Result<LandmarkSet> {
    if (l.class_count() as usize) < LANDMARK_COUNT + 1 {
        return Err(Error::Shape(format!(
            "landmark grid needs {} classes, has {}",
            LANDMARK_COUNT + 1,
            l.class_count()
        )));
    }
    let g = l.geometry();
    let mut sums = [[0.0f64; 3]; LANDMARK_COUNT];
    let mut counts = [0usize; LANDMARK_COUNT];
    for (idx, &lab) in l.labels().iter().enumerate() {
        if lab == 0 || lab as usize > LANDMARK_COUNT {
            continue;
        }
        let c = g.coords(idx);
        let w = g.world(c[0], c[1], c[2]);
        let s = &mut sums[lab as usize - 1];
        for a in 0..3 {
            s[a] += w[a];
        }
        counts[lab as usize - 1] += 1;
    }
    let missing: Vec<String> = LandmarkName::ALL
        .iter()
        .filter(|n| counts[n.index()] == 0)
        .map(|n| n.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::IncompleteLandmarks(missing));
    }
    let mut pts = [[0.0; 3]; LANDMARK_COUNT];
    for (p, (s, &n)) in pts.iter_mut().zip(sums.iter().zip(&counts)) {
        *p = s.map(|v| v / n as f64);
    }
    LandmarkSet::new(pts)
}

/// Rasterises a landmark set to single voxels: class `name.class()` at the
/// voxel nearest each position (clamped into the grid), background elsewhere.
pub fn rasterize_landmarks(lms: &LandmarkSet, geom: &Geometry) -> Result<LabelGrid> {
    let mut grid = LabelGrid::filled(*geom, 0, LANDMARK_COUNT as u8 + 1)?;
    for (name, p) in lms.iter() {
        let [i, j, k] = geom.clamped_voxel(p);
        if grid.at(i, j, k) != 0 {
            return Err(Error::Parameter(format!(
                "landmark `{name}` rasterises onto the voxel of another landmark"
            )));
        }
        grid.set(i, j, k, name.class())?;
    }
    Ok(grid)
}

/// Least-squares affine with its residuals.
#[derive(Debug, Clone)]
pub struct AffineFit<T> {
    pub transform: Affine<T>,
    /// `‖M·src_i + t − dst_i‖` per landmark, mm.
    pub residuals: [T; LANDMARK_COUNT],
    /// Root mean square of `residuals`.
    pub rms: T,
}

/// Least-squares 12-DOF affine taking `src` onto `dst`.
///
/// Solves the normal equations in centred form: `M = (Σ d̃ s̃ᵀ)(Σ s̃ s̃ᵀ)⁻¹`,
/// `t = d̄ − M s̄`. Source points spanning fewer than three dimensions are
/// rejected rather than pseudo-inverted.
pub fn fit_affine_12dof<T: Real>(src: &LandmarkSet, dst: &LandmarkSet) -> Result<AffineFit<T>> {
    let s: Vec<[T; 3]> = src.points().iter().map(|p| p.map(T::of)).collect();
    let d: Vec<[T; 3]> = dst.points().iter().map(|p| p.map(T::of)).collect();
    let n = T::of_usize(s.len());
    let mean = |v: &[[T; 3]]| {
        let mut m = [T::zero(); 3];
        for p in v {
            for a in 0..3 {
                m[a] += p[a];
            }
        }
        m.map(|x| x / n)
    };
    let sm = mean(&s);
    let dm = mean(&d);

    let mut scatter = [[T::zero(); 3]; 3];
    let mut cross = [[T::zero(); 3]; 3];
    for (ps, pd) in s.iter().zip(&d) {
        let cs = [ps[0] - sm[0], ps[1] - sm[1], ps[2] - sm[2]];
        let cd = [pd[0] - dm[0], pd[1] - dm[1], pd[2] - dm[2]];
        for r in 0..3 {
            for c in 0..3 {
                scatter[r][c] += cs[r] * cs[c];
                cross[r][c] += cd[r] * cs[c];
            }
        }
    }

    let trace = scatter[0][0] + scatter[1][1] + scatter[2][2];
    let det = det3(&scatter);
    let third = trace / T::of(3.0);
    if !(trace > T::zero()) || det <= third * third * third * T::epsilon().sqrt() {
        return Err(Error::RankDeficient(format!(
            "source landmarks do not span three dimensions (scatter det {:.3e}, trace {:.3e})",
            det.as_f64(),
            trace.as_f64()
        )));
    }
    let inv = inv3(&scatter).ok_or_else(|| Error::RankDeficient("source scatter matrix is singular".into()))?;

    let mut m = [[T::zero(); 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            for k in 0..3 {
                m[r][c] += cross[r][k] * inv[k][c];
            }
        }
    }
    let mut t = dm;
    for r in 0..3 {
        for c in 0..3 {
            t[r] -= m[r][c] * sm[c];
        }
    }
    let transform = Affine {
        matrix: m,
        translation: t,
    };

    let mut residuals = [T::zero(); LANDMARK_COUNT];
    let mut sq = T::zero();
    for (r, (ps, pd)) in residuals.iter_mut().zip(s.iter().zip(&d)) {
        let q = transform.apply(*ps);
        let e = (0..3).fold(T::zero(), |acc, a| acc + (q[a] - pd[a]) * (q[a] - pd[a]));
        sq += e;
        *r = e.sqrt();
    }
    Ok(AffineFit {
        transform,
        residuals,
        rms: (sq / n).sqrt(),
    })
}

/// Point-to-point distances for one subject.
#[derive(Debug, Clone, Serialize)]
pub struct LandmarkErrorReport {
    /// Distance per landmark in [`LandmarkName::ALL`] order, mm.
    pub distances_mm: [f64; LANDMARK_COUNT],
}

impl LandmarkErrorReport {
    pub fn get(&self, name: LandmarkName) -> f64 {
        self.distances_mm[name.index()]
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Euclidean distance per landmark name. Both sets are complete by
/// construction, so names always pair.
pub fn p2p_errors(predicted: &LandmarkSet, reference: &LandmarkSet) -> LandmarkErrorReport {
    let mut d = [0.0; LANDMARK_COUNT];
    for (name, p) in predicted.iter() {
        d[name.index()] = dist(p, reference.get(name));
    }
    LandmarkErrorReport { distances_mm: d }
}

#[derive(Debug, Clone, Serialize)]
pub struct LandmarkStats {
    pub name: &'static str,
    pub mean_mm: f64,
    pub sd_mm: f64,
    /// Sorted errors; the i-th entry has cumulative fraction (i + 1) / n.
    pub cdf_mm: Vec<f64>,
}

/// Per-landmark cohort statistics.
#[derive(Debug, Clone, Serialize)]
pub struct LandmarkCohortReport {
    pub subjects: usize,
    /// Standard deviation convention used throughout.
    pub sd_convention: &'static str,
    pub landmarks: Vec<LandmarkStats>,
}

/// Reduces per-subject reports in the order given.
pub fn cohort_landmark_errors(reports: &[LandmarkErrorReport]) -> Result<LandmarkCohortReport> {
    if reports.is_empty() {
        return Err(Error::Parameter("cohort reduction needs at least one report".into()));
    }
    let landmarks = LandmarkName::ALL
        .iter()
        .map(|&name| {
            let values: Vec<f64> = reports.iter().map(|r| r.get(name)).collect();
            let (mean_mm, sd_mm) = mean_sd(&values);
            let mut cdf_mm = values;
            cdf_mm.sort_by(f64::total_cmp);
            LandmarkStats {
                name: name.as_str(),
                mean_mm,
                sd_mm,
                cdf_mm,
            }
        })
        .collect();
    Ok(LandmarkCohortReport {
        subjects: reports.len(),
        sd_convention: "population",
        landmarks,
    })
}

impl LandmarkCohortReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Two-column CSV `error_mm,cumulative_fraction` for one landmark.
    pub fn cdf_csv(&self, name: LandmarkName) -> String {
        let stats = &self.landmarks[name.index()];
        let n = stats.cdf_mm.len() as f64;
        let mut out = String::from("error_mm,cumulative_fraction\n");
        for (i, e) in stats.cdf_mm.iter().enumerate() {
            out.push_str(&format!("{e},{}\n", (i + 1) as f64 / n));
        }
        out
    }
}
