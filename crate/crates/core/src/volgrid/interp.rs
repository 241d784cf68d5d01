use super::{Geometry, Volume};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// The eight-voxel neighbourhood of a continuous coordinate, edge-clamped.
#[derive(Debug, Clone, Copy)]
pub struct TrilinearCell<T> {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    /// Fractional position between `lo` and `hi` along each axis.
    pub t: [T; 3],
    /// False along an axis where the coordinate was clamped (zero derivative there).
    pub interior: [bool; 3],
    stride: [usize; 2],
}

impl<T: Real> TrilinearCell<T> {
    #[inline]
    pub fn new(v: [T; 3], dims: [usize; 3]) -> Self {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut t = [T::zero(); 3];
        let mut interior = [false; 3];
        for a in 0..3 {
            let n = dims[a];
            let max = T::of_usize(n - 1);
            let x = v[a];
            if n == 1 || x.is_nan() {
                continue;
            }
            if x <= T::zero() {
                lo[a] = 0;
                hi[a] = 1;
            } else if x >= max {
                lo[a] = n - 2;
                hi[a] = n - 1;
                t[a] = T::one();
            } else {
                let f = x.floor();
                let base = f.to_usize().unwrap_or(0).min(n - 2);
                lo[a] = base;
                hi[a] = base + 1;
                t[a] = x - T::of_usize(base);
                interior[a] = true;
            }
        }
        TrilinearCell {
            lo,
            hi,
            t,
            interior,
            stride: [dims[0], dims[0] * dims[1]],
        }
    }

    #[inline]
    fn corner(&self, c: usize) -> usize {
        let i = if c & 1 == 0 { self.lo[0] } else { self.hi[0] };
        let j = if c & 2 == 0 { self.lo[1] } else { self.hi[1] };
        let k = if c & 4 == 0 { self.lo[2] } else { self.hi[2] };
        i + self.stride[0] * j + self.stride[1] * k
    }

    /// Flat indices of the eight corners, bit 0 = x, bit 1 = y, bit 2 = z.
    #[inline]
    pub fn corners(&self) -> [usize; 8] {
        let mut out = [0usize; 8];
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.corner(c);
        }
        out
    }

    #[inline]
    pub fn weights(&self) -> [T; 8] {
        let one = T::one();
        let wx = [one - self.t[0], self.t[0]];
        let wy = [one - self.t[1], self.t[1]];
        let wz = [one - self.t[2], self.t[2]];
        let mut w = [T::zero(); 8];
        for (c, wc) in w.iter_mut().enumerate() {
            *wc = wx[c & 1] * wy[(c >> 1) & 1] * wz[(c >> 2) & 1];
        }
        w
    }

    #[inline]
    pub fn interpolate(&self, mut value: impl FnMut(usize) -> T) -> T {
        let w = self.weights();
        let mut acc = T::zero();
        for c in 0..8 {
            if w[c] != T::zero() {
                acc += w[c] * value(self.corner(c));
            }
        }
        acc
    }

    /// Interpolated value and its gradient with respect to the voxel coordinate.
    #[inline]
    pub fn interpolate_with_gradient(&self, mut value: impl FnMut(usize) -> T) -> (T, [T; 3]) {
        let one = T::one();
        let (tx, ty, tz) = (self.t[0], self.t[1], self.t[2]);
        let mut v = [T::zero(); 8];
        for (c, vc) in v.iter_mut().enumerate() {
            *vc = value(self.corner(c));
        }
        // lerp along x for the four (y, z) edges
        let e00 = v[0] + tx * (v[1] - v[0]);
        let e10 = v[2] + tx * (v[3] - v[2]);
        let e01 = v[4] + tx * (v[5] - v[4]);
        let e11 = v[6] + tx * (v[7] - v[6]);
        let f0 = e00 + ty * (e10 - e00);
        let f1 = e01 + ty * (e11 - e01);
        let val = f0 + tz * (f1 - f0);

        let mut g = [T::zero(); 3];
        if self.interior[0] {
            let d00 = v[1] - v[0];
            let d10 = v[3] - v[2];
            let d01 = v[5] - v[4];
            let d11 = v[7] - v[6];
            let a = d00 + ty * (d10 - d00);
            let b = d01 + ty * (d11 - d01);
            g[0] = a + tz * (b - a);
        }
        if self.interior[1] {
            g[1] = (one - tz) * (e10 - e00) + tz * (e11 - e01);
        }
        if self.interior[2] {
            g[2] = f1 - f0;
        }
        (val, g)
    }
}

/// Corner indices, fractions and clamping flags for a continuous coordinate.
pub fn trilinear_weights<T: Real>(v: [T; 3], dims: [usize; 3]) -> ([usize; 8], [T; 8]) {
    let cell = TrilinearCell::new(v, dims);
    (cell.corners(), cell.weights())
}

/// Resamples onto a lattice with `new_spacing`, same origin, covering the
/// same physical extent. Samples beyond the input take the edge value.
pub fn resample_trilinear<T: Real>(v: &Volume<T>, new_spacing: [f64; 3]) -> Result<Volume<T>> {
    if new_spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Parameter(format!("new spacing must be > 0, got {new_spacing:?}")));
    }
    let g = v.geometry();
    let ext = g.extent();
    let mut dims = [1usize; 3];
    for a in 0..3 {
        // tolerate representation noise so that an unchanged spacing keeps the count
        dims[a] = ((ext[a] / new_spacing[a]) + 1e-9).floor() as usize + 1;
    }
    let out_geom = Geometry::new(dims, new_spacing, g.origin)?;
    let scale = [
        new_spacing[0] / g.spacing[0],
        new_spacing[1] / g.spacing[1],
        new_spacing[2] / g.spacing[2],
    ];
    Ok(Volume::from_fn(out_geom, |i, j, k| {
        v.sample_voxel([
            T::of(i as f64 * scale[0]),
            T::of(j as f64 * scale[1]),
            T::of(k as f64 * scale[2]),
        ])
    }))
}
