//! Segmentation accuracy and clinical measures.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volgrid::{Geometry, LabelGrid, FOREGROUND_NAMES, LVC, LVW, RVC, RVW};

/// Myocardial tissue density used to convert wall volume to mass.
pub const MYOCARDIAL_DENSITY_G_PER_ML: f64 = 1.05;

/// Mean and population standard deviation (divide by n).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_pair(a: &LabelGrid, b: &LabelGrid) -> Result<()> {
    a.geometry().ensure_matches(b.geometry(), "label grids")
}

/// `2|A∩B| / (|A|+|B|)` over the class-`k` masks; two empty masks score 1.
pub fn dice_index(a: &LabelGrid, b: &LabelGrid, k: u8) -> Result<f64> {
    check_pair(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        let (ia, ib) = (x == k, y == k);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Exact squared Euclidean distance transform (mm²) to the `true` voxels of
/// `mask`, separable lower-envelope algorithm with anisotropic spacing.
pub fn squared_distance_transform(mask: &[bool], geom: &Geometry) -> Vec<f64> {
    let mut d: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { f64::INFINITY }).collect();
    let dims = geom.dims;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let longest = *dims.iter().max().unwrap_or(&1);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    for axis in 0..3 {
        let n = dims[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for i in 0..n {
                    line[i] = d[base + i * strides[axis]];
                }
                envelope_1d(&line[..n], geom.spacing[axis], &mut out[..n], &mut v, &mut z);
                for i in 0..n {
                    d[base + i * strides[axis]] = out[i];
                }
            }
        }
    }
    d
}

fn envelope_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        while z[j + 1] < pos(i) {
            j += 1;
        }
        let dq = pos(i) - pos(v[j]);
        *o = dq * dq + f[v[j]];
    }
}

/// Symmetric Hausdorff distance (mm) between the class-`k` masks, measured
/// between voxel centres.
pub fn hausdorff(a: &LabelGrid, b: &LabelGrid, k: u8) -> Result<f64> {
    check_pair(a, b)?;
    let ma = a.mask(k);
    let mb = b.mask(k);
    if !ma.iter().any(|&x| x) || !mb.iter().any(|&x| x) {
        return Err(Error::UndefinedDistance(format!("class {k} mask is empty in one of the grids")));
    }
    let geom = a.geometry();
    let directed = |from: &[bool], to: &[bool]| {
        let dt = squared_distance_transform(to, geom);
        from.iter()
            .zip(&dt)
            .filter(|(&m, _)| m)
            .fold(0.0f64, |acc, (_, &d)| acc.max(d))
    };
    Ok(directed(&ma, &mb).max(directed(&mb, &ma)).sqrt())
}

/// Dice and Hausdorff for the four foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegScore {
    pub dice: [f64; 4],
    /// `None` when either class mask is empty.
    pub hausdorff_mm: [Option<f64>; 4],
}

pub fn score_segmentation(pred: &LabelGrid, reference: &LabelGrid) -> Result<SegScore> {
    let mut dice = [0.0; 4];
    let mut hd = [None; 4];
    for (c, k) in [LVC, LVW, RVC, RVW].into_iter().enumerate() {
        dice[c] = dice_index(pred, reference, k)?;
        hd[c] = match hausdorff(pred, reference, k) {
            Ok(d) => Some(d),
            Err(Error::UndefinedDistance(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(SegScore { dice, hausdorff_mm: hd })
}

/// Ventricular volumes (ml) and wall masses (g).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClinicalMeasures {
    pub lvv_ml: f64,
    pub lvm_g: f64,
    pub rvv_ml: f64,
    pub rvm_g: f64,
}

pub fn clinical_measures(l: &LabelGrid) -> ClinicalMeasures {
    let hist = l.histogram();
    let ml = |class: u8| {
        hist.get(class as usize).copied().unwrap_or(0) as f64 * l.geometry().voxel_volume_mm3() / 1000.0
    };
    ClinicalMeasures {
        lvv_ml: ml(LVC),
        lvm_g: ml(LVW) * MYOCARDIAL_DENSITY_G_PER_ML,
        rvv_ml: ml(RVC),
        rvm_g: ml(RVW) * MYOCARDIAL_DENSITY_G_PER_ML,
    }
}

/// Named scalar fields of a per-subject record, in a fixed order.
pub trait ReportFields {
    fn fields(&self) -> Vec<(String, Option<f64>)>;
}

impl ReportFields for SegScore {
    fn fields(&self) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::with_capacity(8);
        for (c, name) in FOREGROUND_NAMES.iter().enumerate() {
            out.push((format!("{name}_dice"), Some(self.dice[c])));
        }
        for (c, name) in FOREGROUND_NAMES.iter().enumerate() {
            out.push((format!("{name}_hausdorff_mm"), self.hausdorff_mm[c]));
        }
        out
    }
}

impl ReportFields for ClinicalMeasures {
    fn fields(&self) -> Vec<(String, Option<f64>)> {
        vec![
            ("LVV_ml".into(), Some(self.lvv_ml)),
            ("LVM_g".into(), Some(self.lvm_g)),
            ("RVV_ml".into(), Some(self.rvv_ml)),
            ("RVM_g".into(), Some(self.rvm_g)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Subjects contributing a defined value.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortSummary {
    pub subjects: usize,
    pub sd_convention: &'static str,
    pub fields: Vec<FieldSummary>,
}

/// Mean and population standard deviation per field, records taken in order.
pub fn cohort_report<R: ReportFields>(records: &[R]) -> Result<CohortSummary> {
    let first = records
        .first()
        .ok_or_else(|| Error::Parameter("cohort report needs at least one record".into()))?;
    let names: Vec<String> = first.fields().into_iter().map(|(n, _)| n).collect();
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(records.len()); names.len()];
    for r in records {
        for (col, (_, v)) in columns.iter_mut().zip(r.fields()) {
            if let Some(v) = v {
                col.push(v);
            }
        }
    }
    let fields = names
        .into_iter()
        .zip(columns)
        .map(|(name, col)| {
            let (mean, sd) = mean_sd(&col);
            FieldSummary {
                name,
                mean,
                sd,
                count: col.len(),
            }
        })
        .collect();
    Ok(CohortSummary {
        subjects: records.len(),
        sd_convention: "population",
        fields,
    })
}

impl CohortSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("field,mean,sd,count\n");
        for f in &self.fields {
            out.push_str(&format!("{},{},{},{}\n", f.name, f.mean, f.sd, f.count));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn get(&self, name: &str) -> Option<&FieldSummary> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// Per-subject CSV: `subject_id,class,dice,hausdorff_mm`.
pub fn seg_scores_csv(rows: &[(String, SegScore)]) -> String {
    let mut out = String::from("subject_id,class,dice,hausdorff_mm\n");
    for (id, s) in rows {
        for (c, name) in FOREGROUND_NAMES.iter().enumerate() {
            let hd = s.hausdorff_mm[c].map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{id},{name},{},{hd}\n", s.dice[c]));
        }
    }
    out
}

/// Per-subject CSV: `subject_id,LVV_ml,LVM_g,RVV_ml,RVM_g`.
pub fn clinical_csv(rows: &[(String, ClinicalMeasures)]) -> String {
    let mut out = String::from("subject_id,LVV_ml,LVM_g,RVV_ml,RVM_g\n");
    for (id, m) in rows {
        out.push_str(&format!("{id},{},{},{},{}\n", m.lvv_ml, m.lvm_g, m.rvv_ml, m.rvm_g));
    }
    out
}
