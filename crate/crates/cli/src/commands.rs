use std::path::Path;

use anyhow::{anyhow, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use shaperefine::landmarks::{centroid_landmarks, rasterize_landmarks};
use shaperefine::metrics::{clinical_csv, clinical_measures, cohort_report, score_segmentation, seg_scores_csv};
use shaperefine::multitask::{predict, train_toy, TrainSample};
use shaperefine::phantom::generate_cohort;
use shaperefine::preproc::{augment_affine, simulate_lr, AugmentParams, LrSimParams};
use shaperefine::regfuse::{
    fuse_labels_masked, refine, register_ffd_masked, select_atlases, upsample_lr, warp_labels_nearest, warp_volume,
    SelectedAtlas,
};
use shaperefine::volgrid::{read_labels, read_volume};
use shaperefine::{argmax_labels, Atlas, LabelGrid, LandmarkSet, ToyModel, VolumeGrid};

use crate::config::{subject_seed, ConfigError, ConfigResult, PipelineConfig};
use crate::store::{subject_ids, SubjectDir, Writer, LABELS, LANDMARKS, VOLUME};

#[derive(Debug, Serialize)]
pub struct Failure {
    pub subject: String,
    pub error: String,
}

/// Written as `manifest.json` in the output directory after every run.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub outputs: Vec<String>,
    pub succeeded: Vec<String>,
    pub failed: Vec<Failure>,
}

impl RunReport {
    fn new(command: &str, seed: u64, cfg: &PipelineConfig) -> Self {
        RunReport {
            command: command.to_string(),
            seed,
            config: cfg.clone(),
            outputs: Vec::new(),
            succeeded: Vec::new(),
            failed: Vec::new(),
        }
    }

    fn record(&mut self, id: String, r: Result<Vec<String>>) {
        match r {
            Ok(files) => {
                self.outputs.extend(files);
                self.succeeded.push(id);
            }
            Err(e) => {
                log::error!("{id}: {e:#}");
                self.failed.push(Failure {
                    subject: id,
                    error: format!("{e:#}"),
                });
            }
        }
    }

    pub fn finish(mut self, w: &Writer) -> Result<RunReport> {
        self.outputs.sort();
        self.outputs.push("manifest.json".into());
        w.json("manifest.json", &self)?;
        Ok(self)
    }
}

/// Runs `f` for every id in parallel, keeping results in id order.
fn each_subject<F>(report: &mut RunReport, ids: &[String], f: F)
where
    F: Fn(&str) -> Result<Vec<String>> + Sync,
{
    let results: Vec<_> = ids.par_iter().map(|id| (id.clone(), f(id))).collect();
    for (id, r) in results {
        report.record(id, r);
    }
}

fn out_writer(cfg: &PipelineConfig) -> ConfigResult<Writer> {
    let out = cfg.output_dir()?;
    Writer::new(out).map_err(|e| ConfigError(format!("cannot create output directory {}: {e:#}", out.display())))
}

fn subjects_in(dir: &Path) -> ConfigResult<Vec<String>> {
    let ids = subject_ids(dir).map_err(|e| ConfigError(format!("{e:#}")))?;
    if ids.is_empty() {
        return Err(ConfigError(format!("no subjects found under {}", dir.display())));
    }
    Ok(ids)
}

fn load_atlases(dir: &Path) -> ConfigResult<Vec<Atlas>> {
    let ids = subjects_in(dir)?;
    ids.par_iter()
        .map(|id| SubjectDir::new(dir, id).atlas())
        .collect::<Result<Vec<_>>>()
        .map_err(|e| ConfigError(format!("loading atlases from {}: {e:#}", dir.display())))
}

pub fn phantom(cfg: &PipelineConfig, count: usize) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed()?;
    if count == 0 {
        return Err(ConfigError("phantom count must be >= 1".into()));
    }
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("phantom", seed, cfg);
    let cohort = generate_cohort::<f32>(count, &cfg.phantom, seed).map_err(|e| ConfigError(e.to_string()))?;
    for p in &cohort {
        let r = (|| -> Result<Vec<String>> {
            Ok(vec![
                w.volume(&format!("{}/{VOLUME}", p.id), &p.volume)?,
                w.labels(&format!("{}/{LABELS}", p.id), &p.labels)?,
                w.landmarks(&format!("{}/{LANDMARKS}", p.id), &p.landmarks)?,
                w.json(&format!("{}/pose.json", p.id), &p.pose)?,
            ])
        })();
        report.record(p.id.clone(), r);
    }
    Ok((report, w))
}

pub fn simulate(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed()?;
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let ids = subjects_in(dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("simulate", seed, cfg);
    each_subject(&mut report, &ids, |id| {
        let s = SubjectDir::new(dir, id);
        let params = LrSimParams {
            seed: subject_seed(seed, id),
            ..cfg.lr_sim.clone()
        };
        let lr = simulate_lr(&s.volume()?, &s.labels()?, &params)?;
        let mut files = vec![
            w.volume(&format!("{id}/{VOLUME}"), &lr.volume)?,
            w.labels(&format!("{id}/{LABELS}"), &lr.labels)?,
            w.json(&format!("{id}/shifts.json"), &lr.shifts)?,
        ];
        if s.has_landmarks() {
            files.push(w.landmarks(&format!("{id}/{LANDMARKS}"), &lr.carry_landmarks(&s.landmarks()?)?)?);
        }
        Ok(files)
    });
    Ok((report, w))
}

fn training_samples(s: &SubjectDir, copies: usize, augment: &AugmentParams, seed: u64) -> Result<Vec<TrainSample<f32>>> {
    let (v, l, lms) = (s.volume()?, s.labels()?, s.landmarks()?);
    let mut out = Vec::with_capacity(copies + 1);
    let mut push = |v: VolumeGrid, l: LabelGrid, lms: &LandmarkSet| -> Result<()> {
        let grid = rasterize_landmarks(lms, v.geometry())?;
        out.push(TrainSample::new(v, l, grid)?);
        Ok(())
    };
    for c in 0..copies {
        let p = AugmentParams {
            seed: subject_seed(seed, &s.id).wrapping_add(c as u64 + 1),
            ..augment.clone()
        };
        let (av, al, alms) = augment_affine(&v, &l, &lms, &p)?;
        push(av, al, &alms)?;
    }
    push(v, l, &lms)?;
    Ok(out)
}

pub fn train(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed()?;
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let ids = subjects_in(dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("train", seed, cfg);
    let loaded: Vec<_> = ids
        .par_iter()
        .map(|id| (id.clone(), training_samples(&SubjectDir::new(dir, id), cfg.augment_copies, &cfg.augment, seed)))
        .collect();
    let mut samples = Vec::new();
    for (id, r) in loaded {
        match r {
            Ok(s) => {
                samples.extend(s);
                report.record(id, Ok(Vec::new()));
            }
            Err(e) => report.record(id, Err(e)),
        }
    }
    if samples.is_empty() {
        return Ok((report, w));
    }
    let tc = shaperefine::multitask::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let r = (|| -> Result<Vec<String>> {
        let (model, trace) = train_toy(&samples, &cfg.loss, &tc)?;
        model.write(w.path("model.mgrid")?)?;
        Ok(vec!["model.mgrid".into(), w.text("loss_trace.csv", &trace.to_csv())?])
    })();
    if let Err(e) = r {
        report.record("training".into(), Err(e));
    } else {
        report.outputs.extend(r.unwrap());
    }
    Ok((report, w))
}

/// Segmentation and landmarks of a refinement input: model output where a
/// model is configured, files otherwise; a landmarks file always wins.
fn refine_inputs(s: &SubjectDir, vol: &VolumeGrid, model: Option<&ToyModel>) -> Result<(LabelGrid, LandmarkSet)> {
    let predicted = model.map(|m| predict(m, vol)).transpose()?;
    let seg = match &predicted {
        Some((seg, _)) => argmax_labels(seg)?,
        None => s.labels()?,
    };
    let lms = if s.has_landmarks() {
        s.landmarks()?
    } else {
        let (_, lmk) = predicted
            .as_ref()
            .ok_or_else(|| anyhow!("{}: no {LANDMARKS} and no model to predict landmarks", s.id))?;
        centroid_landmarks(&argmax_labels(lmk)?)?
    };
    Ok((seg, lms))
}

pub fn refine_cmd(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed()?;
    let atlas_dir = cfg.existing_dir("atlas_dir", &cfg.atlas_dir)?;
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let model = cfg
        .existing_file("model_path", &cfg.model_path)?
        .map(|p| ToyModel::read(p).map_err(|e| ConfigError(format!("loading model {}: {e}", p.display()))))
        .transpose()?;
    let ids = subjects_in(dir)?;
    let atlases = load_atlases(atlas_dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("refine", seed, cfg);
    each_subject(&mut report, &ids, |id| {
        let s = SubjectDir::new(dir, id);
        let vol = s.volume()?;
        let (seg, lms) = refine_inputs(&s, &vol, model.as_ref())?;
        let r = refine(&vol, &seg, &lms, &atlases, &cfg.registration, &cfg.fusion)?;
        Ok(vec![
            w.labels(&format!("{id}/{LABELS}"), &r.labels)?,
            w.json(
                &format!("{id}/refine.json"),
                &json!({"selected": r.report.selected, "atlases": r.report.atlases}),
            )?,
            w.json(&format!("{id}/timings.json"), &r.report.timings)?,
        ])
    });
    Ok((report, w))
}

#[derive(Serialize)]
struct EvaluationSummary {
    segmentation: shaperefine::metrics::CohortSummary,
    predicted_clinical: shaperefine::metrics::CohortSummary,
    reference_clinical: shaperefine::metrics::CohortSummary,
}

pub fn evaluate(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed.unwrap_or(0);
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let reference = cfg.existing_dir("reference_dir", &cfg.reference_dir)?;
    let ids = subjects_in(dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("evaluate", seed, cfg);
    let scored: Vec<_> = ids
        .par_iter()
        .map(|id| {
            let r = (|| -> Result<_> {
                let pred = SubjectDir::new(dir, id).labels()?;
                let truth = SubjectDir::new(reference, id).labels()?;
                Ok((score_segmentation(&pred, &truth)?, clinical_measures(&pred), clinical_measures(&truth)))
            })();
            (id.clone(), r)
        })
        .collect();
    let mut scores = Vec::new();
    let mut pred_clin = Vec::new();
    let mut ref_clin = Vec::new();
    for (id, r) in scored {
        match r {
            Ok((s, p, t)) => {
                scores.push((id.clone(), s));
                pred_clin.push((id.clone(), p));
                ref_clin.push((id.clone(), t));
                report.record(id, Ok(Vec::new()));
            }
            Err(e) => report.record(id, Err(e)),
        }
    }
    if !scores.is_empty() {
        let r = (|| -> Result<Vec<String>> {
            let summary = EvaluationSummary {
                segmentation: cohort_report(&scores.iter().map(|s| s.1.clone()).collect::<Vec<_>>())?,
                predicted_clinical: cohort_report(&pred_clin.iter().map(|s| s.1).collect::<Vec<_>>())?,
                reference_clinical: cohort_report(&ref_clin.iter().map(|s| s.1).collect::<Vec<_>>())?,
            };
            Ok(vec![
                w.text("scores.csv", &seg_scores_csv(&scores))?,
                w.text("clinical.csv", &clinical_csv(&pred_clin))?,
                w.text("reference_clinical.csv", &clinical_csv(&ref_clin))?,
                w.json("summary.json", &summary)?,
            ])
        })();
        match r {
            Ok(files) => report.outputs.extend(files),
            Err(e) => report.record("summary".into(), Err(e)),
        }
    }
    Ok((report, w))
}

fn selection_json(sel: &[SelectedAtlas]) -> serde_json::Value {
    json!(sel
        .iter()
        .map(|s| json!({"id": s.id, "nmi": s.nmi, "affine": s.affine.to_row_major()}))
        .collect::<Vec<_>>())
}

struct Target {
    volume: VolumeGrid,
    labels: LabelGrid,
    fov: Vec<bool>,
    selected: Vec<SelectedAtlas>,
}

fn prepare_target(s: &SubjectDir, atlases: &[Atlas], count: usize) -> Result<Target> {
    let hr = *atlases.first().ok_or_else(|| anyhow!("no atlases"))?.labels.geometry();
    let up = upsample_lr(&s.volume()?, &s.labels()?, &hr)?;
    let selected = select_atlases(&up.labels, &s.landmarks()?, atlases, count)?;
    Ok(Target {
        volume: up.volume,
        labels: up.labels,
        fov: up.fov,
        selected,
    })
}

pub fn select_cmd(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed.unwrap_or(0);
    let atlas_dir = cfg.existing_dir("atlas_dir", &cfg.atlas_dir)?;
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let ids = subjects_in(dir)?;
    let atlases = load_atlases(atlas_dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("select-atlases", seed, cfg);
    each_subject(&mut report, &ids, |id| {
        let t = prepare_target(&SubjectDir::new(dir, id), &atlases, cfg.fusion.atlas_count)?;
        Ok(vec![w.json(&format!("{id}/selection.json"), &selection_json(&t.selected))?])
    });
    Ok((report, w))
}

pub fn register_cmd(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed.unwrap_or(0);
    let atlas_dir = cfg.existing_dir("atlas_dir", &cfg.atlas_dir)?;
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let ids = subjects_in(dir)?;
    let atlases = load_atlases(atlas_dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("register", seed, cfg);
    each_subject(&mut report, &ids, |id| {
        let t = prepare_target(&SubjectDir::new(dir, id), &atlases, cfg.fusion.atlas_count)?;
        let hr = *t.labels.geometry();
        let fov = LabelGrid::new(hr, t.fov.iter().map(|&f| f as u8).collect(), 2)?;
        let mut files = vec![
            w.volume(&format!("{id}/{VOLUME}"), &t.volume)?,
            w.labels(&format!("{id}/{LABELS}"), &t.labels)?,
            w.labels(&format!("{id}/fov.mgrid"), &fov)?,
            w.json(&format!("{id}/selection.json"), &selection_json(&t.selected))?,
        ];
        let mut summary = Vec::new();
        for s in &t.selected {
            let a = &atlases[s.index];
            let reg = register_ffd_masked(&t.labels, &a.labels, &s.affine, &cfg.registration, Some(&t.fov))
                .with_context(|| format!("registering atlas {}", a.id))?;
            let base = format!("{id}/warped/{}", a.id);
            reg.transform.write(w.path(&format!("{base}/transform.ffd"))?)?;
            files.push(format!("{base}/transform.ffd"));
            files.push(w.volume(&format!("{base}/{VOLUME}"), &warp_volume(&a.volume, &reg.transform, &hr)?)?);
            files.push(w.labels(&format!("{base}/{LABELS}"), &warp_labels_nearest(&a.labels, &reg.transform, &hr)?)?);
            summary.push(json!({
                "atlas": a.id,
                "consistency_initial": reg.initial_consistency,
                "consistency_final": reg.final_consistency,
                "accepted_steps": reg.accepted_steps,
                "trace": reg.trace,
            }));
        }
        files.push(w.json(&format!("{id}/registration.json"), &summary)?);
        Ok(files)
    });
    Ok((report, w))
}

/// Fuses the warped atlases left by `register` in each subject directory.
pub fn fuse_cmd(cfg: &PipelineConfig) -> ConfigResult<(RunReport, Writer)> {
    let seed = cfg.seed.unwrap_or(0);
    let dir = cfg.existing_dir("subject_dir", &cfg.subject_dir)?;
    let ids = subjects_in(dir)?;
    let w = out_writer(cfg)?;
    let mut report = RunReport::new("fuse", seed, cfg);
    each_subject(&mut report, &ids, |id| {
        let s = SubjectDir::new(dir, id);
        let target = s.volume()?;
        let fov_path = s.path.join("fov.mgrid");
        let fov = if fov_path.is_file() {
            Some(read_labels(&fov_path)?.labels().iter().map(|&v| v != 0).collect::<Vec<_>>())
        } else {
            None
        };
        let warped_root = s.path.join("warped");
        let atlas_ids = subject_ids(&warped_root).with_context(|| format!("{id}: no warped atlases"))?;
        let warped = atlas_ids
            .iter()
            .map(|a| {
                let p = warped_root.join(a);
                Ok((read_volume(p.join(VOLUME))?, read_labels(p.join(LABELS))?))
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse_labels_masked(&target, &warped, &cfg.fusion, fov.as_deref())?;
        Ok(vec![w.labels(&format!("{id}/{LABELS}"), &fused)?])
    });
    Ok((report, w))
}
