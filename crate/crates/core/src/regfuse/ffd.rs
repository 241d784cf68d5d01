//! Cubic B-spline free-form deformations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::Affine;
use crate::volgrid::io::{f32_from_payload, f32_payload, split_header, write_bytes, MAGIC, VERSION};
use crate::volgrid::Geometry;

/// Uniform cubic B-spline weights for the four control points around `t ∈ [0, 1]`.
#[inline]
pub fn bspline_basis(t: f64) -> [f64; 4] {
    let s = 1.0 - t;
    let t2 = t * t;
    let t3 = t2 * t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// Control-point displacement lattice (mm) over a domain, with one control
/// point of margin beyond each face.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLattice {
    pub control_spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dims: [usize; 3],
    /// x-fastest over `dims`.
    pub displacements: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatticeHeader {
    control_spacing: [f64; 3],
    origin: [f64; 3],
    dims: [usize; 3],
}

impl ControlLattice {
    /// Zero lattice covering `domain`.
    pub fn covering(domain: &Geometry, control_spacing: [f64; 3]) -> Result<Self> {
        if control_spacing.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(Error::Parameter(format!("control spacing must be > 0, got {control_spacing:?}")));
        }
        let ext = domain.extent();
        let mut dims = [0usize; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            dims[a] = (ext[a] / control_spacing[a] + 1e-9).floor() as usize + 4;
            origin[a] = domain.origin[a] - control_spacing[a];
        }
        Ok(ControlLattice {
            control_spacing,
            origin,
            dims,
            displacements: vec![[0.0; 3]; dims[0] * dims[1] * dims[2]],
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.displacements.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.displacements.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// First of the four supporting control indices along axis `a` and their weights.
    #[inline]
    pub fn axis_support(&self, a: usize, x: f64) -> (usize, [f64; 4]) {
        let n = self.dims[a] as isize;
        let u = (x - self.origin[a]) / self.control_spacing[a];
        let b = (u.floor() as isize).clamp(1, n - 3);
        let t = (u - b as f64).clamp(0.0, 1.0);
        ((b - 1) as usize, bspline_basis(t))
    }

    /// Displacement at a world point, mm.
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let (bx, wx) = self.axis_support(0, p[0]);
        let (by, wy) = self.axis_support(1, p[1]);
        let (bz, wz) = self.axis_support(2, p[2]);
        let mut d = [0.0; 3];
        for (n, &cz) in wz.iter().enumerate() {
            for (m, &cy) in wy.iter().enumerate() {
                let wyz = cz * cy;
                for (l, &cx) in wx.iter().enumerate() {
                    let w = wyz * cx;
                    let phi = self.displacements[self.index(bx + l, by + m, bz + n)];
                    for a in 0..3 {
                        d[a] += w * phi[a];
                    }
                }
            }
        }
        d
    }

    /// Largest control-point displacement magnitude, mm.
    pub fn max_displacement(&self) -> f64 {
        self.displacements
            .iter()
            .map(|d| (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt())
            .fold(0.0, f64::max)
    }

    fn header(&self) -> LatticeHeader {
        LatticeHeader {
            control_spacing: self.control_spacing,
            origin: self.origin,
            dims: self.dims,
        }
    }
}

/// Separable evaluation of a lattice on an axis-aligned box of voxels.
#[derive(Debug, Clone)]
pub(crate) struct BoxBasis {
    tables: [Vec<(usize, [f64; 4])>; 3],
    pub box_dims: [usize; 3],
    lat_dims: [usize; 3],
}

impl BoxBasis {
    /// Box of `box_dims` voxels of `geom` starting at voxel `lo`.
    pub fn new(lat: &ControlLattice, geom: &Geometry, lo: [usize; 3], box_dims: [usize; 3]) -> Self {
        let tables = [0, 1, 2].map(|a| {
            (0..box_dims[a])
                .map(|v| lat.axis_support(a, geom.origin[a] + (lo[a] + v) as f64 * geom.spacing[a]))
                .collect()
        });
        BoxBasis {
            tables,
            box_dims,
            lat_dims: lat.dims,
        }
    }

    #[cfg(test)]
    pub fn box_len(&self) -> usize {
        self.box_dims.iter().product()
    }

    /// Dense displacements over the box, x-fastest.
    pub fn forward(&self, phi: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let [lx, ly, _] = self.lat_dims;
        let [bx, by, bz] = self.box_dims;
        let [tx, ty, tz] = &self.tables;

        let mut t1 = vec![[0.0; 3]; lx * ly * bz];
        for (vz, &(base, w)) in tz.iter().enumerate() {
            let dst = &mut t1[lx * ly * vz..lx * ly * (vz + 1)];
            for (n, &wn) in w.iter().enumerate() {
                let src = &phi[lx * ly * (base + n)..lx * ly * (base + n + 1)];
                for (d, s) in dst.iter_mut().zip(src) {
                    for a in 0..3 {
                        d[a] += wn * s[a];
                    }
                }
            }
        }
        let mut t2 = vec![[0.0; 3]; lx * by * bz];
        for vz in 0..bz {
            for (vy, &(base, w)) in ty.iter().enumerate() {
                let dst = &mut t2[lx * (vy + by * vz)..lx * (vy + by * vz + 1)];
                for (m, &wm) in w.iter().enumerate() {
                    let off = lx * (base + m) + lx * ly * vz;
                    for (d, s) in dst.iter_mut().zip(&t1[off..off + lx]) {
                        for a in 0..3 {
                            d[a] += wm * s[a];
                        }
                    }
                }
            }
        }
        let mut out = vec![[0.0; 3]; bx * by * bz];
        for row in 0..by * bz {
            let src = &t2[lx * row..lx * (row + 1)];
            let dst = &mut out[bx * row..bx * (row + 1)];
            for (d, &(base, w)) in dst.iter_mut().zip(tx) {
                for (l, &wl) in w.iter().enumerate() {
                    let s = src[base + l];
                    for a in 0..3 {
                        d[a] += wl * s[a];
                    }
                }
            }
        }
        out
    }

    /// Transpose of [`BoxBasis::forward`]: spreads a dense field back onto the lattice.
    pub fn adjoint(&self, g: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let [lx, ly, lz] = self.lat_dims;
        let [bx, by, bz] = self.box_dims;
        let [tx, ty, tz] = &self.tables;

        let mut a2 = vec![[0.0; 3]; lx * by * bz];
        for row in 0..by * bz {
            let src = &g[bx * row..bx * (row + 1)];
            let dst = &mut a2[lx * row..lx * (row + 1)];
            for (s, &(base, w)) in src.iter().zip(tx) {
                for (l, &wl) in w.iter().enumerate() {
                    for a in 0..3 {
                        dst[base + l][a] += wl * s[a];
                    }
                }
            }
        }
        let mut a1 = vec![[0.0; 3]; lx * ly * bz];
        for vz in 0..bz {
            for (vy, &(base, w)) in ty.iter().enumerate() {
                let src = &a2[lx * (vy + by * vz)..lx * (vy + by * vz + 1)];
                for (m, &wm) in w.iter().enumerate() {
                    let off = lx * (base + m) + lx * ly * vz;
                    for (d, s) in a1[off..off + lx].iter_mut().zip(src) {
                        for a in 0..3 {
                            d[a] += wm * s[a];
                        }
                    }
                }
            }
        }
        let mut out = vec![[0.0; 3]; lx * ly * lz];
        for (vz, &(base, w)) in tz.iter().enumerate() {
            let src = &a1[lx * ly * vz..lx * ly * (vz + 1)];
            for (n, &wn) in w.iter().enumerate() {
                let dst = &mut out[lx * ly * (base + n)..lx * ly * (base + n + 1)];
                for (d, s) in dst.iter_mut().zip(src) {
                    for a in 0..3 {
                        d[a] += wn * s[a];
                    }
                }
            }
        }
        out
    }
}

/// Non-rigid mapping from a target domain into a source image:
/// `x ↦ A⁻¹(x + Σ_levels d(x))`, where `A` takes source onto target.
#[derive(Debug, Clone, PartialEq)]
pub struct FfdTransform {
    domain: Geometry,
    init: Affine<f64>,
    init_inv: Affine<f64>,
    levels: Vec<ControlLattice>,
}

#[derive(Serialize, Deserialize)]
struct FfdHeader {
    magic: String,
    version: u64,
    kind: String,
    domain: Geometry,
    init_affine: [f64; 12],
    levels: Vec<LatticeHeader>,
}

impl FfdTransform {
    pub fn new(domain: Geometry, init: Affine<f64>, levels: Vec<ControlLattice>) -> Result<Self> {
        domain.validate()?;
        let init_inv = init.inverse()?;
        for (n, l) in levels.iter().enumerate() {
            if l.displacements.len() != l.dims.iter().product::<usize>() {
                return Err(Error::Shape(format!("lattice {n}: displacement count does not match dims")));
            }
            if l.dims.iter().any(|&d| d < 4) {
                return Err(Error::Shape(format!("lattice {n}: needs at least 4 control points per axis")));
            }
            if l.displacements.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("lattice {n}: non-finite displacement")));
            }
        }
        Ok(FfdTransform {
            domain,
            init,
            init_inv,
            levels,
        })
    }

    pub fn identity(domain: Geometry) -> Self {
        FfdTransform {
            domain,
            init: Affine::identity(),
            init_inv: Affine::identity(),
            levels: Vec::new(),
        }
    }

    pub fn domain(&self) -> &Geometry {
        &self.domain
    }

    /// Source-to-target affine the deformation is composed with.
    pub fn init(&self) -> &Affine<f64> {
        &self.init
    }

    pub(crate) fn init_inverse(&self) -> &Affine<f64> {
        &self.init_inv
    }

    pub fn levels(&self) -> &[ControlLattice] {
        &self.levels
    }

    /// Summed displacement of all levels at a target point, mm.
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let mut d = [0.0; 3];
        for l in &self.levels {
            let dl = l.displacement_at(p);
            for a in 0..3 {
                d[a] += dl[a];
            }
        }
        d
    }

    /// Source position sampled by target point `p`.
    pub fn source_point(&self, p: [f64; 3]) -> [f64; 3] {
        let d = self.displacement_at(p);
        self.init_inv.apply([p[0] + d[0], p[1] + d[1], p[2] + d[2]])
    }

    /// Summed displacements at every voxel of the domain, x-fastest.
    pub fn dense_displacements(&self) -> Vec<[f64; 3]> {
        let g = &self.domain;
        let mut total = vec![[0.0; 3]; g.len()];
        for l in &self.levels {
            let d = BoxBasis::new(l, g, [0; 3], g.dims).forward(&l.displacements);
            for (t, v) in total.iter_mut().zip(d) {
                for a in 0..3 {
                    t[a] += v[a];
                }
            }
        }
        total
    }

    /// Same lattices with every displacement negated; approximately inverts a
    /// small deformation when the affine part is the identity.
    pub fn negated(&self) -> Self {
        let mut out = self.clone();
        for l in &mut out.levels {
            for d in &mut l.displacements {
                *d = d.map(|v| -v);
            }
        }
        out
    }

    /// Header line plus the f32 displacements of every level in order.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = FfdHeader {
            magic: MAGIC.into(),
            version: VERSION,
            kind: "ffd".into(),
            domain: self.domain,
            init_affine: self.init.to_row_major(),
            levels: self.levels.iter().map(ControlLattice::header).collect(),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        let values: Vec<f32> = self
            .levels
            .iter()
            .flat_map(|l| l.displacements.iter().flatten().map(|&v| v as f32))
            .collect();
        out.extend(f32_payload(&values));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (value, payload) = split_header(bytes)?;
        let h: FfdHeader = serde_json::from_value(value).map_err(|e| Error::format("header", e.to_string()))?;
        if h.magic != MAGIC {
            return Err(Error::format("magic", format!("expected {MAGIC}, found {}", h.magic)));
        }
        if h.version != VERSION {
            return Err(Error::format("version", format!("unsupported version {}", h.version)));
        }
        if h.kind != "ffd" {
            return Err(Error::format("kind", format!("expected ffd, found {}", h.kind)));
        }
        let count: usize = h.levels.iter().map(|l| l.dims.iter().product::<usize>()).sum();
        let values = f32_from_payload(payload, count * 3)?;
        let mut levels = Vec::with_capacity(h.levels.len());
        let mut it = values.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]);
        for l in h.levels {
            let n = l.dims.iter().product();
            levels.push(ControlLattice {
                control_spacing: l.control_spacing,
                origin: l.origin,
                dims: l.dims,
                displacements: it.by_ref().take(n).collect(),
            });
        }
        FfdTransform::new(h.domain, Affine::from_row_major(h.init_affine), levels)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(geom: &Geometry, cs: f64, seed: u64) -> ControlLattice {
        let mut lat = ControlLattice::covering(geom, [cs; 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for d in &mut lat.displacements {
            *d = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        }
        lat
    }

    #[test]
    fn basis_partition_of_unity_and_linear_precision() {
        for i in 0..=20 {
            let t = i as f64 / 20.0;
            let w = bspline_basis(t);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            assert!(w.iter().all(|&x| x >= 0.0));
            // control points at -1, 0, 1, 2 reproduce the line
            let x: f64 = w.iter().enumerate().map(|(k, &wk)| wk * (k as f64 - 1.0)).sum();
            assert!((x - t).abs() < 1e-14);
        }
    }

    #[test]
    fn lattice_covers_domain_with_margin() {
        let g = Geometry::new([64, 64, 64], [1.25, 1.25, 2.0], [-40.0, -40.0, -60.0]).unwrap();
        let lat = ControlLattice::covering(&g, [20.0, 20.0, 32.0]).unwrap();
        assert_eq!(lat.dims, [7, 7, 7]);
        assert_eq!(lat.origin, [-60.0, -60.0, -92.0]);
        // the extreme voxels use interior supports without clamping
        for a in 0..3 {
            let lo = lat.axis_support(a, g.origin[a]);
            let hi = lat.axis_support(a, g.origin[a] + g.extent()[a]);
            assert_eq!(lo.0, 0);
            assert!(hi.0 + 3 < lat.dims[a]);
        }
    }

    #[test]
    fn separable_matches_pointwise_and_adjoint() {
        let g = Geometry::new([11, 9, 7], [1.0, 1.5, 2.0], [3.0, -1.0, 0.5]).unwrap();
        let lat = random_lattice(&g, 4.0, 5);
        let lo = [2, 1, 3];
        let bd = [7, 6, 3];
        let basis = BoxBasis::new(&lat, &g, lo, bd);
        let dense = basis.forward(&lat.displacements);
        for k in 0..bd[2] {
            for j in 0..bd[1] {
                for i in 0..bd[0] {
                    let p = g.world(lo[0] + i, lo[1] + j, lo[2] + k);
                    let want = lat.displacement_at(p);
                    let got = dense[i + bd[0] * (j + bd[1] * k)];
                    for a in 0..3 {
                        assert!((got[a] - want[a]).abs() < 1e-12);
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let field: Vec<[f64; 3]> = (0..basis.box_len())
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let back = basis.adjoint(&field);
        let lhs: f64 = dense.iter().zip(&field).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        let rhs: f64 = lat
            .displacements
            .iter()
            .zip(&back)
            .map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            .sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn constant_lattice_translates() {
        let g = Geometry::new([10, 10, 10], [1.0; 3], [0.0; 3]).unwrap();
        let mut lat = ControlLattice::covering(&g, [3.0; 3]).unwrap();
        lat.displacements.iter_mut().for_each(|d| *d = [1.0, -2.0, 0.5]);
        let t = FfdTransform::new(g, Affine::identity(), vec![lat]).unwrap();
        let q = t.source_point([4.2, 5.0, 6.7]);
        assert!((q[0] - 5.2).abs() < 1e-12 && (q[1] - 3.0).abs() < 1e-12 && (q[2] - 7.2).abs() < 1e-12);
        for d in t.dense_displacements() {
            assert!((d[0] - 1.0).abs() < 1e-12 && (d[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn serialisation_round_trip() {
        let g = Geometry::new([12, 10, 8], [1.25, 1.25, 2.0], [0.0; 3]).unwrap();
        let levels = vec![random_lattice(&g, 8.0, 1), random_lattice(&g, 4.0, 2)];
        let init = Affine::from_row_major([1.1, 0.0, 0.1, 2.0, 0.0, 0.9, 0.0, -1.0, 0.0, 0.05, 1.0, 0.5]);
        let t = FfdTransform::new(g, init, levels).unwrap();
        let back = FfdTransform::decode(&t.encode().unwrap()).unwrap();
        assert_eq!(back.levels().len(), 2);
        assert_eq!(back.init(), t.init());
        for (a, b) in back.levels().iter().zip(t.levels()) {
            assert_eq!(a.dims, b.dims);
            for (x, y) in a.displacements.iter().zip(&b.displacements) {
                for c in 0..3 {
                    assert_eq!(x[c], y[c] as f32 as f64);
                }
            }
        }
        let mut bytes = t.encode().unwrap();
        bytes.pop();
        assert!(matches!(FfdTransform::decode(&bytes), Err(Error::SizeMismatch { .. })));
    }
}
