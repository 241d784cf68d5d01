//! Volumetric data model: geometry, intensity/label/probability grids,
//! landmark sets and atlases.
//!
//! Voxel storage is x-fastest (`i + nx * (j + ny * k)`) and voxel centres map
//! to world coordinates axis-aligned: `origin + (i * sx, j * sy, k * sz)`.

mod interp;
pub(crate) mod io;
mod landmark;

pub use interp::{resample_trilinear, trilinear_weights, TrilinearCell};
pub use io::{read_grid, read_labels, read_volume, write_grid, write_labels, write_volume, Grid, GridHeader};
pub use landmark::{LandmarkName, LandmarkSet, LANDMARK_COUNT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Number of tissue classes: background, LVC, LVW, RVC, RVW.
pub const TISSUE_CLASSES: u8 = 5;

pub const BACKGROUND: u8 = 0;
pub const LVC: u8 = 1;
pub const LVW: u8 = 2;
pub const RVC: u8 = 3;
pub const RVW: u8 = 4;

/// Short names of the foreground tissue classes, indexed by `label - 1`.
pub const FOREGROUND_NAMES: [&str; 4] = ["LVC", "LVW", "RVC", "RVW"];

/// Axis-aligned voxel lattice in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let g = Geometry {
            dims,
            spacing,
            origin,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::format("dims", format!("all dims must be >= 1, got {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::format(
                "spacing",
                format!("all spacing components must be finite and > 0, got {:?}", self.spacing),
            ));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::format("origin", "origin must be finite"));
        }
        if self.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::format("dims", "voxel count overflows"));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn contains(&self, i: isize, j: isize, k: isize) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }

    /// World coordinate (mm) of a voxel centre.
    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinate of a world point.
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    /// Nearest voxel to a world point, if it lies within half a voxel of the lattice.
    pub fn nearest_voxel(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let v = self.to_voxel(p);
        let r = [v[0].round(), v[1].round(), v[2].round()];
        if self.contains(r[0] as isize, r[1] as isize, r[2] as isize) && r.iter().all(|x| x.is_finite()) {
            Some([r[0] as usize, r[1] as usize, r[2] as usize])
        } else {
            None
        }
    }

    /// Nearest voxel, clamped into the lattice.
    pub fn clamped_voxel(&self, p: [f64; 3]) -> [usize; 3] {
        let v = self.to_voxel(p);
        let mut out = [0usize; 3];
        for a in 0..3 {
            let r = v[a].round();
            out[a] = if r.is_nan() || r <= 0.0 {
                0
            } else {
                (r as usize).min(self.dims[a] - 1)
            };
        }
        out
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Physical span between the first and last voxel centre along each axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// World coordinate of the central voxel position `(n - 1) / 2` (possibly fractional).
    pub fn centre(&self) -> [f64; 3] {
        let e = self.extent();
        [
            self.origin[0] + 0.5 * e[0],
            self.origin[1] + 0.5 * e[1],
            self.origin[2] + 0.5 * e[2],
        ]
    }

    /// Equality up to a relative tolerance on spacing and origin.
    pub fn matches(&self, other: &Geometry) -> bool {
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()));
        self.dims == other.dims
            && (0..3).all(|a| close(self.spacing[a], other.spacing[a]) && close(self.origin[a], other.origin[a]))
    }

    pub fn ensure_matches(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.matches(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!("{what}: {self:?} vs {other:?}")))
        }
    }
}

/// Scalar intensity volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    geom: Geometry,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(geom: Geometry, data: Vec<T>) -> Result<Self> {
        geom.validate()?;
        if data.len() != geom.len() {
            return Err(Error::Shape(format!(
                "volume payload has {} voxels, geometry needs {}",
                data.len(),
                geom.len()
            )));
        }
        Ok(Volume { geom, data })
    }

    pub fn filled(geom: Geometry, value: T) -> Self {
        Volume {
            data: vec![value; geom.len()],
            geom,
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume { geom, data }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geom.index(i, j, k)]
    }

    /// Value at integer coordinates, clamped to the nearest edge voxel.
    #[inline]
    pub fn at_clamped(&self, i: isize, j: isize, k: isize) -> T {
        let c = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        self.at(c(i, self.geom.dims[0]), c(j, self.geom.dims[1]), c(k, self.geom.dims[2]))
    }

    /// Trilinear sample at a continuous voxel coordinate, edge-clamped.
    #[inline]
    pub fn sample_voxel(&self, v: [T; 3]) -> T {
        let cell = TrilinearCell::new(v, self.geom.dims);
        cell.interpolate(|idx| self.data[idx])
    }

    /// Trilinear sample at a world point, edge-clamped.
    pub fn sample_world(&self, p: [f64; 3]) -> T {
        let v = self.geom.to_voxel(p);
        self.sample_voxel([T::of(v[0]), T::of(v[1]), T::of(v[2])])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Volume {
            geom: self.geom,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            geom: self.geom,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn with_geometry(mut self, geom: Geometry) -> Result<Self> {
        if geom.len() != self.data.len() {
            return Err(Error::Shape("geometry change alters voxel count".into()));
        }
        self.geom = geom;
        Ok(self)
    }
}

/// Categorical label field.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    geom: Geometry,
    labels: Vec<u8>,
    class_count: u8,
}

impl LabelGrid {
    pub fn new(geom: Geometry, labels: Vec<u8>, class_count: u8) -> Result<Self> {
        geom.validate()?;
        if class_count == 0 {
            return Err(Error::format("class_count", "must be >= 1"));
        }
        if labels.len() != geom.len() {
            return Err(Error::Shape(format!(
                "label payload has {} voxels, geometry needs {}",
                labels.len(),
                geom.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::format(
                "labels",
                format!("label {bad} is not below class_count {class_count}"),
            ));
        }
        Ok(LabelGrid {
            geom,
            labels,
            class_count,
        })
    }

    pub fn filled(geom: Geometry, label: u8, class_count: u8) -> Result<Self> {
        Self::new(geom, vec![label; geom.len()], class_count)
    }

    pub fn from_fn(geom: Geometry, class_count: u8, mut f: impl FnMut(usize, usize, usize) -> u8) -> Result<Self> {
        let mut labels = Vec::with_capacity(geom.len());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    labels.push(f(i, j, k));
                }
            }
        }
        Self::new(geom, labels, class_count)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn class_count(&self) -> u8 {
        self.class_count
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.geom.index(i, j, k)]
    }

    /// Sets a voxel label. Fails if the label is not below `class_count`.
    pub fn set(&mut self, i: usize, j: usize, k: usize, label: u8) -> Result<()> {
        if label >= self.class_count {
            return Err(Error::Parameter(format!(
                "label {label} is not below class_count {}",
                self.class_count
            )));
        }
        let idx = self.geom.index(i, j, k);
        self.labels[idx] = label;
        Ok(())
    }

    pub fn with_geometry(mut self, geom: Geometry) -> Result<Self> {
        if geom.len() != self.labels.len() {
            return Err(Error::Shape("geometry change alters voxel count".into()));
        }
        self.geom = geom;
        Ok(self)
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count as usize];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

/// Per-voxel channel vectors, channel-fastest (`data[voxel * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Prob<T> {
    geom: Geometry,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Prob<T> {
    pub fn new(geom: Geometry, channels: usize, data: Vec<T>) -> Result<Self> {
        geom.validate()?;
        if channels == 0 {
            return Err(Error::Shape("probability grid needs >= 1 channel".into()));
        }
        if data.len() != geom.len() * channels {
            return Err(Error::Shape(format!(
                "channel payload has {} values, expected {} x {}",
                data.len(),
                geom.len(),
                channels
            )));
        }
        Ok(Prob { geom, channels, data })
    }

    pub fn zeros(geom: Geometry, channels: usize) -> Self {
        Prob {
            data: vec![T::zero(); geom.len() * channels],
            geom,
            channels,
        }
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> &[T] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, idx: usize) -> &mut [T] {
        &mut self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, idx: usize, c: usize) -> T {
        self.data[idx * self.channels + c]
    }

    /// A contiguous copy of one channel as a volume.
    pub fn channel(&self, c: usize) -> Volume<T> {
        Volume {
            geom: self.geom,
            data: self.data.iter().skip(c).step_by(self.channels).copied().collect(),
        }
    }
}

/// Channel `k` is 1 where the label equals `k`, else 0.
pub fn one_hot<T: Real>(l: &LabelGrid) -> Prob<T> {
    let c = l.class_count() as usize;
    let mut p = Prob::zeros(*l.geometry(), c);
    for (idx, &lab) in l.labels().iter().enumerate() {
        p.data[idx * c + lab as usize] = T::one();
    }
    p
}

/// Index of the maximal channel per voxel; ties go to the lowest index.
pub fn argmax_labels<T: Real>(p: &Prob<T>) -> Result<LabelGrid> {
    let c = p.channels();
    if c < 2 {
        return Err(Error::Shape(format!("argmax needs >= 2 channels, got {c}")));
    }
    if c > 256 {
        return Err(Error::Shape(format!("{c} channels do not fit a u8 label")));
    }
    let labels = p
        .data()
        .chunks_exact(c)
        .map(|ch| argmax_lowest(ch) as u8)
        .collect();
    LabelGrid::new(*p.geometry(), labels, c as u8)
}

#[inline]
pub(crate) fn argmax_lowest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Reference sample: intensity volume, tissue labels and landmarks.
#[derive(Debug, Clone)]
pub struct Atlas<T = f32> {
    pub id: String,
    pub volume: Volume<T>,
    pub labels: LabelGrid,
    pub landmarks: LandmarkSet,
}

impl<T: Real> Atlas<T> {
    pub fn new(id: impl Into<String>, volume: Volume<T>, labels: LabelGrid, landmarks: LandmarkSet) -> Result<Self> {
        volume
            .geometry()
            .ensure_matches(labels.geometry(), "atlas volume and labels")?;
        Ok(Atlas {
            id: id.into(),
            volume,
            labels,
            landmarks,
        })
    }
}
