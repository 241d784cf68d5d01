//! Backward warping of volumes and label grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ffd::FfdTransform;
use crate::error::Result;
use crate::landmarks::Affine;
use crate::scalar::Real;
use crate::volgrid::{argmax_labels, Geometry, LabelGrid, Prob, TrilinearCell, Volume};

/// A mapping that tells each target voxel where to sample the source.
pub trait SpatialTransform: Sync {
    /// Source-space position (mm) of every voxel of `target`, x-fastest.
    fn source_points(&self, target: &Geometry) -> Result<Vec<[f64; 3]>>;
}

/// An affine is stored source → target and inverted for sampling.
impl SpatialTransform for Affine<f64> {
    fn source_points(&self, target: &Geometry) -> Result<Vec<[f64; 3]>> {
        let inv = self.inverse()?;
        Ok((0..target.len())
            .map(|idx| {
                let [i, j, k] = target.coords(idx);
                inv.apply(target.world(i, j, k))
            })
            .collect())
    }
}

impl SpatialTransform for FfdTransform {
    fn source_points(&self, target: &Geometry) -> Result<Vec<[f64; 3]>> {
        if !target.matches(self.domain()) {
            return Ok((0..target.len())
                .map(|idx| {
                    let [i, j, k] = target.coords(idx);
                    self.source_point(target.world(i, j, k))
                })
                .collect());
        }
        let inv = self.init_inverse();
        let d = self.dense_displacements();
        Ok(d.iter()
            .enumerate()
            .map(|(idx, d)| {
                let [i, j, k] = target.coords(idx);
                let p = target.world(i, j, k);
                inv.apply([p[0] + d[0], p[1] + d[1], p[2] + d[2]])
            })
            .collect())
    }
}

/// Interpolation used when resampling a label grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelInterp {
    Nearest,
    /// Trilinear on one-hot channels, then argmax.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpedLabels {
    pub labels: LabelGrid,
    pub mode: LabelInterp,
}

pub fn warp_labels<W: SpatialTransform + ?Sized>(
    l: &LabelGrid,
    t: &W,
    target_geom: &Geometry,
    mode: LabelInterp,
) -> Result<WarpedLabels> {
    let labels = match mode {
        LabelInterp::Nearest => warp_labels_nearest(l, t, target_geom)?,
        LabelInterp::Soft => argmax_labels(&warp_soft::<f64, W>(l, t, target_geom)?)?,
    };
    Ok(WarpedLabels { labels, mode })
}

pub fn warp_labels_nearest<W: SpatialTransform + ?Sized>(
    l: &LabelGrid,
    t: &W,
    target_geom: &Geometry,
) -> Result<LabelGrid> {
    let src = l.geometry();
    let labels = t
        .source_points(target_geom)?
        .par_iter()
        .map(|&p| {
            let [i, j, k] = src.clamped_voxel(p);
            l.at(i, j, k)
        })
        .collect();
    LabelGrid::new(*target_geom, labels, l.class_count())
}

/// Trilinear interpolation of the one-hot channels of `l`.
pub fn warp_soft<T: Real, W: SpatialTransform + ?Sized>(
    l: &LabelGrid,
    t: &W,
    target_geom: &Geometry,
) -> Result<Prob<T>> {
    let src = *l.geometry();
    let c = l.class_count() as usize;
    let labels = l.labels();
    let points = t.source_points(target_geom)?;
    let mut data = vec![T::zero(); points.len() * c];
    data.par_chunks_mut(c).zip(points.par_iter()).for_each(|(out, &p)| {
        let v = src.to_voxel(p);
        let cell = TrilinearCell::new([T::of(v[0]), T::of(v[1]), T::of(v[2])], src.dims);
        for (idx, w) in cell.corners().into_iter().zip(cell.weights()) {
            out[labels[idx] as usize] += w;
        }
    });
    Prob::new(*target_geom, c, data)
}

pub fn warp_volume<T: Real, W: SpatialTransform + ?Sized>(
    v: &Volume<T>,
    t: &W,
    target_geom: &Geometry,
) -> Result<Volume<T>> {
    let data = t
        .source_points(target_geom)?
        .par_iter()
        .map(|&p| v.sample_world(p))
        .collect();
    Volume::new(*target_geom, data)
}
