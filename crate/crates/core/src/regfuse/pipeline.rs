use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::fusion::{fuse_labels_masked, FusionConfig};
use super::register::{register_ffd_masked, RegistrationConfig};
use super::warp::{warp_labels_nearest, warp_volume};
use super::{nmi, select_atlases};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volgrid::{Atlas, Geometry, LabelGrid, LandmarkSet, Volume, BACKGROUND};

/// Low-resolution input carried onto a high-resolution lattice.
#[derive(Debug, Clone)]
pub struct Upsampled<T> {
    /// Trilinear, edge-clamped.
    pub volume: Volume<T>,
    /// Nearest-neighbour; background outside the acquired field of view.
    pub labels: LabelGrid,
    /// True where the high-resolution voxel lies within an acquired slice.
    pub fov: Vec<bool>,
}

/// Resamples a low-resolution volume and segmentation onto `hr`.
pub fn upsample_lr<T: Real>(lr_vol: &Volume<T>, lr_seg: &LabelGrid, hr: &Geometry) -> Result<Upsampled<T>> {
    let lg = *lr_vol.geometry();
    lg.ensure_matches(lr_seg.geometry(), "low-resolution volume and labels")?;
    let mut fov = Vec::with_capacity(hr.len());
    let mut labels = Vec::with_capacity(hr.len());
    let mut vol = Vec::with_capacity(hr.len());
    for idx in 0..hr.len() {
        let [i, j, k] = hr.coords(idx);
        let p = hr.world(i, j, k);
        let v = lg.to_voxel(p);
        match lg.nearest_voxel(p) {
            Some([a, b, c]) => {
                fov.push(true);
                labels.push(lr_seg.at(a, b, c));
            }
            None => {
                fov.push(false);
                labels.push(BACKGROUND);
            }
        }
        vol.push(lr_vol.sample_voxel([T::of(v[0]), T::of(v[1]), T::of(v[2])]));
    }
    Ok(Upsampled {
        volume: Volume::new(*hr, vol)?,
        labels: LabelGrid::new(*hr, labels, lr_seg.class_count())?,
        fov,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AtlasOutcome {
    pub id: String,
    /// NMI against the upsampled segmentation after the landmark affine.
    pub nmi_affine: f64,
    /// NMI after non-rigid registration.
    pub nmi_registered: f64,
    pub consistency_initial: f64,
    pub consistency_final: f64,
    pub accepted_steps: usize,
}

/// Wall time per stage, seconds.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub upsample: f64,
    pub selection: f64,
    pub registration: f64,
    pub fusion: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineReport {
    pub selected: Vec<String>,
    pub atlases: Vec<AtlasOutcome>,
    pub timings: StageTimings,
    pub registration: RegistrationConfig,
    pub fusion: FusionConfig,
}

impl RefineReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub labels: LabelGrid,
    pub report: RefineReport,
}

/// Refines a low-resolution segmentation with the shape prior held in the atlases.
///
/// Everything runs on the atlases' common high-resolution lattice: the input is
/// upsampled, the `fus_cfg.atlas_count` best atlases by NMI are registered to
/// it within the acquired field of view, warped and fused.
pub fn refine<T: Real>(
    target_lr: &Volume<T>,
    lr_seg: &LabelGrid,
    lr_lms: &LandmarkSet,
    atlases: &[Atlas<T>],
    reg_cfg: &RegistrationConfig,
    fus_cfg: &FusionConfig,
) -> Result<Refinement> {
    let start = Instant::now();
    reg_cfg.validate()?;
    fus_cfg.validate()?;
    let first = atlases
        .first()
        .ok_or_else(|| Error::Config("refinement needs at least one atlas".into()))?;
    let hr = *first.labels.geometry();
    for a in atlases {
        hr.ensure_matches(a.labels.geometry(), &format!("atlas `{}` lattice", a.id))?;
    }
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let up = upsample_lr(target_lr, lr_seg, &hr).map_err(|e| e.in_stage("upsampling", "target"))?;
    timings.upsample = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let selected = select_atlases(&up.labels, lr_lms, atlases, fus_cfg.atlas_count)?;
    timings.selection = t.elapsed().as_secs_f64();
    log::info!(
        "selected atlases: {}",
        selected.iter().map(|s| format!("{} ({:.4})", s.id, s.nmi)).collect::<Vec<_>>().join(", ")
    );

    let t = Instant::now();
    let registered = selected
        .par_iter()
        .map(|s| {
            let atlas = &atlases[s.index];
            let run = || -> Result<_> {
                let reg = register_ffd_masked(&up.labels, &atlas.labels, &s.affine, reg_cfg, Some(&up.fov))?;
                let vol = warp_volume(&atlas.volume, &reg.transform, &hr)?;
                let lab = warp_labels_nearest(&atlas.labels, &reg.transform, &hr)?;
                let outcome = AtlasOutcome {
                    id: s.id.clone(),
                    nmi_affine: s.nmi,
                    nmi_registered: nmi(&up.labels, &lab),
                    consistency_initial: reg.initial_consistency,
                    consistency_final: reg.final_consistency,
                    accepted_steps: reg.accepted_steps,
                };
                Ok((outcome, (vol, lab)))
            };
            run().map_err(|e| e.in_stage("registration", s.id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    timings.registration = t.elapsed().as_secs_f64();
    let (outcomes, warped): (Vec<_>, Vec<_>) = registered.into_iter().unzip();

    let t = Instant::now();
    let labels =
        fuse_labels_masked(&up.volume, &warped, fus_cfg, Some(&up.fov)).map_err(|e| e.in_stage("fusion", "all"))?;
    timings.fusion = t.elapsed().as_secs_f64();
    timings.total = start.elapsed().as_secs_f64();

    Ok(Refinement {
        labels,
        report: RefineReport {
            selected: selected.iter().map(|s| s.id.clone()).collect(),
            atlases: outcomes,
            timings,
            registration: reg_cfg.clone(),
            fusion: fus_cfg.clone(),
        },
    })
}
