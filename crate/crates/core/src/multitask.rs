//! Joint segmentation + landmark objective and a single-layer 2.5D classifier.
//!
//! The objective is `L_D + α·L_L + β·‖W‖²`: a soft Dice loss over the tissue
//! classes, a class-balanced cross-entropy over the landmark classes and weight
//! decay over every model parameter.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volgrid::io::{f32_from_payload, f32_payload, split_header, write_bytes, MAGIC, VERSION};
use crate::volgrid::{LabelGrid, Prob, Volume, TISSUE_CLASSES};

/// Tissue classes predicted by the segmentation head.
pub const SEG_CLASSES: usize = TISSUE_CLASSES as usize;
/// Six landmarks plus background.
pub const LANDMARK_CLASSES: usize = 7;
pub const OUTPUT_CHANNELS: usize = SEG_CLASSES + LANDMARK_CLASSES;
/// Floor applied inside the cross-entropy logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Landmark loss weight.
    pub alpha: f64,
    /// Weight decay.
    pub beta: f64,
    /// Dice denominator guard.
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.8,
            beta: 5e-5,
            epsilon: 1e-8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.beta >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Parameter(format!(
                "loss weights need alpha >= 0, beta >= 0, epsilon > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-voxel softmax with max subtraction.
pub fn softmax_channels<T: Real>(logits: &Prob<T>) -> Result<Prob<T>> {
    let c = logits.channels();
    if c < 2 {
        return Err(Error::Shape(format!("softmax needs >= 2 channels, got {c}")));
    }
    let mut out = logits.clone();
    for v in out.data_mut().chunks_exact_mut(c) {
        softmax_in_place(v)?;
    }
    Ok(out)
}

fn softmax_in_place<T: Real>(v: &mut [T]) -> Result<()> {
    let mut m = T::neg_infinity();
    for &x in v.iter() {
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite logit".into()));
        }
        m = m.max(x);
    }
    let mut s = T::zero();
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
    Ok(())
}

fn check_pair<T: Real>(p: &Prob<T>, r: &LabelGrid, channels: usize, what: &str) -> Result<()> {
    if p.channels() != channels {
        return Err(Error::Shape(format!("{what} expects {channels} channels, got {}", p.channels())));
    }
    if p.geometry().dims != r.geometry().dims {
        return Err(Error::Shape(format!(
            "{what}: probabilities {:?} vs labels {:?}",
            p.geometry().dims,
            r.geometry().dims
        )));
    }
    if r.class_count() as usize > channels {
        return Err(Error::Shape(format!("{what}: {} label classes for {channels} channels", r.class_count())));
    }
    Ok(())
}

/// Per-class numerators `2 Σ g p` and denominators `Σ (g + p²) + ε`.
fn dice_terms<T: Real>(p: &Prob<T>, r: &LabelGrid, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let c = p.channels();
    let mut num = vec![0.0; c];
    let mut den = vec![eps; c];
    for (v, &lab) in p.data().chunks_exact(c).zip(r.labels()) {
        for k in 0..c {
            let pk = v[k].as_f64();
            den[k] += pk * pk;
        }
        let l = lab as usize;
        num[l] += 2.0 * v[l].as_f64();
        den[l] += 1.0;
    }
    (num, den)
}

/// Negative soft Dice summed over all tissue classes, background included.
/// Lies in `[-C, 0]`.
pub fn dice_loss<T: Real>(p: &Prob<T>, r: &LabelGrid, epsilon: f64) -> Result<f64> {
    check_pair(p, r, SEG_CLASSES, "dice loss")?;
    let (num, den) = dice_terms(p, r, epsilon);
    Ok(-num.iter().zip(&den).map(|(n, d)| n / d).sum::<f64>())
}

/// `∂ dice_loss / ∂ p_{jk}`.
pub fn dice_loss_grad<T: Real>(p: &Prob<T>, r: &LabelGrid, epsilon: f64) -> Result<Prob<T>> {
    check_pair(p, r, SEG_CLASSES, "dice loss")?;
    let c = p.channels();
    let (num, den) = dice_terms(p, r, epsilon);
    let mut g = Prob::zeros(*p.geometry(), c);
    for ((gv, v), &lab) in g.data_mut().chunks_exact_mut(c).zip(p.data().chunks_exact(c)).zip(r.labels()) {
        for k in 0..c {
            let gk = (lab as usize == k) as u8 as f64;
            let pk = v[k].as_f64();
            gv[k] = T::of(-(2.0 * gk * den[k] - num[k] * 2.0 * pk) / (den[k] * den[k]));
        }
    }
    Ok(g)
}

/// `w_k = 1 − |Y_k| / |Y|` for each landmark-grid class.
pub fn class_weights(l: &LabelGrid) -> Vec<f64> {
    let total = l.labels().len() as f64;
    l.histogram().iter().map(|&n| 1.0 - n as f64 / total).collect()
}

/// `−Σ_k w_k Σ_{j∈Y_k} log p_{jk}`, the logarithm floored at [`LOG_CLAMP`].
pub fn weighted_ce_loss<T: Real>(p: &Prob<T>, l: &LabelGrid) -> Result<f64> {
    check_pair(p, l, LANDMARK_CLASSES, "cross-entropy")?;
    let w = class_weights(l);
    let c = p.channels();
    let mut per_class = vec![0.0; w.len()];
    for (v, &lab) in p.data().chunks_exact(c).zip(l.labels()) {
        per_class[lab as usize] -= v[lab as usize].as_f64().max(LOG_CLAMP).ln();
    }
    Ok(per_class.iter().zip(&w).map(|(s, wk)| s * wk).sum())
}

/// `∂ weighted_ce_loss / ∂ p_{jk}`; zero where the clamp is active.
pub fn weighted_ce_grad<T: Real>(p: &Prob<T>, l: &LabelGrid) -> Result<Prob<T>> {
    check_pair(p, l, LANDMARK_CLASSES, "cross-entropy")?;
    let w = class_weights(l);
    let c = p.channels();
    let mut g = Prob::zeros(*p.geometry(), c);
    for ((gv, v), &lab) in g.data_mut().chunks_exact_mut(c).zip(p.data().chunks_exact(c)).zip(l.labels()) {
        let pl = v[lab as usize].as_f64();
        if pl > LOG_CLAMP {
            gv[lab as usize] = T::of(-w[lab as usize] / pl);
        }
    }
    Ok(g)
}

/// Cross-entropy gradient with respect to the logits feeding a softmax that
/// produced `p`: `w_l (p_c − δ_{cl})`, zero where the clamp is active.
pub fn weighted_ce_logit_grad<T: Real>(p: &Prob<T>, l: &LabelGrid) -> Result<Prob<T>> {
    check_pair(p, l, LANDMARK_CLASSES, "cross-entropy")?;
    let w = class_weights(l);
    let c = p.channels();
    let mut g = Prob::zeros(*p.geometry(), c);
    for ((gv, v), &lab) in g.data_mut().chunks_exact_mut(c).zip(p.data().chunks_exact(c)).zip(l.labels()) {
        let l = lab as usize;
        if v[l].as_f64() > LOG_CLAMP {
            let wl = T::of(w[l]);
            for k in 0..c {
                gv[k] = wl * (v[k] - if k == l { T::one() } else { T::zero() });
            }
        }
    }
    Ok(g)
}

/// Pulls a probability gradient back through the softmax that produced `p`.
pub fn softmax_backward<T: Real>(p: &Prob<T>, grad_p: &Prob<T>) -> Result<Prob<T>> {
    if p.channels() != grad_p.channels() || p.data().len() != grad_p.data().len() {
        return Err(Error::Shape("softmax backward: shape mismatch".into()));
    }
    let c = p.channels();
    let mut out = Prob::zeros(*p.geometry(), c);
    for ((o, v), g) in out
        .data_mut()
        .chunks_exact_mut(c)
        .zip(p.data().chunks_exact(c))
        .zip(grad_p.data().chunks_exact(c))
    {
        let dot = v.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for k in 0..c {
            o[k] = v[k] * (g[k] - dot);
        }
    }
    Ok(out)
}

/// Single linear convolution over a stack of neighbouring slices.
///
/// Output `o` at voxel `(x, y, z)` is
/// `b_o + Σ_{s,u,v} W[o][s][v][u] · I(x + u − r, y + v − r, z + s − h)`,
/// with `h = S / 2`, `r = k / 2` and edge-clamped sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T = f32> {
    context_slices: usize,
    kernel: usize,
    /// `[OUTPUT_CHANNELS][context_slices][kernel][kernel]`.
    weights: Vec<T>,
    bias: Vec<T>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    magic: String,
    version: u64,
    kind: String,
    context_slices: usize,
    kernel: usize,
    outputs: usize,
}

impl<T: Real> ToyModel<T> {
    pub fn zeros(context_slices: usize, kernel: usize) -> Result<Self> {
        if context_slices % 2 == 0 || kernel % 2 == 0 {
            return Err(Error::Parameter(format!(
                "context slices ({context_slices}) and kernel size ({kernel}) must be odd"
            )));
        }
        Ok(ToyModel {
            context_slices,
            kernel,
            weights: vec![T::zero(); OUTPUT_CHANNELS * context_slices * kernel * kernel],
            bias: vec![T::zero(); OUTPUT_CHANNELS],
        })
    }

    /// Weights drawn from `N(0, scale²)`, zero biases.
    pub fn random(context_slices: usize, kernel: usize, scale: f64, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(context_slices, kernel)?;
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut m.weights {
            *w = T::of(normal.sample(&mut rng));
        }
        Ok(m)
    }

    pub fn from_parts(context_slices: usize, kernel: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        let m = Self::zeros(context_slices, kernel)?;
        if weights.len() != m.weights.len() || bias.len() != OUTPUT_CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} weights and {OUTPUT_CHANNELS} biases, got {} and {}",
                m.weights.len(),
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("model parameters must be finite".into()));
        }
        Ok(ToyModel {
            context_slices,
            kernel,
            weights,
            bias,
        })
    }

    pub fn context_slices(&self) -> usize {
        self.context_slices
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// Sum of squared parameters, biases included.
    pub fn frobenius_sq(&self) -> f64 {
        self.weights.iter().chain(&self.bias).map(|w| w.as_f64() * w.as_f64()).sum()
    }

    /// Raw scores, channel-major: `OUTPUT_CHANNELS` planes of the volume's size.
    fn logits(&self, v: &Volume<T>) -> Vec<T> {
        let g = v.geometry();
        let [nx, ny, nz] = g.dims;
        let n = g.len();
        let plane = nx * ny;
        let r = self.kernel / 2;
        let (pw, ph) = (nx + 2 * r, ny + 2 * r);
        let mut out = vec![T::zero(); OUTPUT_CHANNELS * n];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * n..(o + 1) * n].iter_mut().for_each(|x| *x = *b);
        }
        let padded = padded_planes(v, r);
        for z in 0..nz {
            for s in 0..self.context_slices {
                let src = &padded[clamp_slice(z, s, self.context_slices, nz) * pw * ph..][..pw * ph];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        for o in 0..OUTPUT_CHANNELS {
                            let w = self.weights[self.widx(o, s, ky, kx)];
                            if w == T::zero() {
                                continue;
                            }
                            let dst = &mut out[o * n + z * plane..][..plane];
                            for y in 0..ny {
                                let row = &src[(y + ky) * pw + kx..][..nx];
                                for (d, &x) in dst[y * nx..(y + 1) * nx].iter_mut().zip(row) {
                                    *d += w * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[inline]
    fn widx(&self, o: usize, s: usize, ky: usize, kx: usize) -> usize {
        ((o * self.context_slices + s) * self.kernel + ky) * self.kernel + kx
    }

    /// Parameter gradient from channel-major logit gradients.
    fn backward(&self, v: &Volume<T>, g_logits: &[T]) -> (Vec<f64>, Vec<f64>) {
        let g = v.geometry();
        let [nx, ny, nz] = g.dims;
        let n = g.len();
        let plane = nx * ny;
        let r = self.kernel / 2;
        let (pw, ph) = (nx + 2 * r, ny + 2 * r);
        let padded = padded_planes(v, r);
        let mut gw = vec![0.0f64; self.weights.len()];
        let mut gb = vec![0.0f64; OUTPUT_CHANNELS];
        for (o, b) in gb.iter_mut().enumerate() {
            *b = g_logits[o * n..(o + 1) * n].iter().map(|x| x.as_f64()).sum();
        }
        for z in 0..nz {
            for s in 0..self.context_slices {
                let src = &padded[clamp_slice(z, s, self.context_slices, nz) * pw * ph..][..pw * ph];
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        for o in 0..OUTPUT_CHANNELS {
                            let gl = &g_logits[o * n + z * plane..][..plane];
                            let mut acc = T::zero();
                            for y in 0..ny {
                                let row = &src[(y + ky) * pw + kx..][..nx];
                                for (&a, &b) in gl[y * nx..(y + 1) * nx].iter().zip(row) {
                                    acc += a * b;
                                }
                            }
                            gw[self.widx(o, s, ky, kx)] += acc.as_f64();
                        }
                    }
                }
            }
        }
        (gw, gb)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let h = ModelHeader {
            magic: MAGIC.into(),
            version: VERSION,
            kind: "toy-model".into(),
            context_slices: self.context_slices,
            kernel: self.kernel,
            outputs: OUTPUT_CHANNELS,
        };
        let mut out = serde_json::to_vec(&h)?;
        out.push(b'\n');
        let vals: Vec<f32> = self.weights.iter().chain(&self.bias).map(|v| v.as_f64() as f32).collect();
        out.extend(f32_payload(&vals));
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (value, payload) = split_header(bytes)?;
        let h: ModelHeader = serde_json::from_value(value).map_err(|e| Error::format("header", e.to_string()))?;
        if h.magic != MAGIC || h.version != VERSION {
            return Err(Error::format("magic", format!("unsupported container {} v{}", h.magic, h.version)));
        }
        if h.kind != "toy-model" {
            return Err(Error::format("kind", format!("expected toy-model, found {}", h.kind)));
        }
        if h.outputs != OUTPUT_CHANNELS {
            return Err(Error::format("outputs", format!("expected {OUTPUT_CHANNELS}, found {}", h.outputs)));
        }
        let nw = OUTPUT_CHANNELS * h.context_slices * h.kernel * h.kernel;
        let vals = f32_from_payload(payload, nw + OUTPUT_CHANNELS)?;
        let conv = |s: &[f32]| s.iter().map(|&v| T::of(v as f64)).collect::<Vec<T>>();
        Self::from_parts(h.context_slices, h.kernel, conv(&vals[..nw]), conv(&vals[nw..]))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }
}

fn clamp_slice(z: usize, s: usize, context: usize, nz: usize) -> usize {
    (z as isize + s as isize - (context / 2) as isize).clamp(0, nz as isize - 1) as usize
}

/// Every z-plane padded by `r` on each in-plane side with edge values.
fn padded_planes<T: Real>(v: &Volume<T>, r: usize) -> Vec<T> {
    let [nx, ny, nz] = v.geometry().dims;
    let (pw, ph) = (nx + 2 * r, ny + 2 * r);
    let mut out = Vec::with_capacity(pw * ph * nz);
    for z in 0..nz {
        for y in 0..ph {
            let sy = (y as isize - r as isize).clamp(0, ny as isize - 1) as usize;
            for x in 0..pw {
                let sx = (x as isize - r as isize).clamp(0, nx as isize - 1) as usize;
                out.push(v.at(sx, sy, z));
            }
        }
    }
    out
}

fn split_heads<T: Real>(logits: &[T], geom: &crate::volgrid::Geometry) -> (Prob<T>, Prob<T>) {
    let n = geom.len();
    let mut seg = Prob::zeros(*geom, SEG_CLASSES);
    let mut lmk = Prob::zeros(*geom, LANDMARK_CLASSES);
    for j in 0..n {
        for k in 0..SEG_CLASSES {
            seg.data_mut()[j * SEG_CLASSES + k] = logits[k * n + j];
        }
        for k in 0..LANDMARK_CLASSES {
            lmk.data_mut()[j * LANDMARK_CLASSES + k] = logits[(SEG_CLASSES + k) * n + j];
        }
    }
    (seg, lmk)
}

fn merge_heads<T: Real>(seg: &Prob<T>, lmk: &Prob<T>) -> Vec<T> {
    let n = seg.geometry().len();
    let mut out = vec![T::zero(); OUTPUT_CHANNELS * n];
    for j in 0..n {
        for k in 0..SEG_CLASSES {
            out[k * n + j] = seg.get(j, k);
        }
        for k in 0..LANDMARK_CLASSES {
            out[(SEG_CLASSES + k) * n + j] = lmk.get(j, k);
        }
    }
    out
}

/// Tissue and landmark probabilities, each head normalised by its own softmax.
pub fn predict<T: Real>(model: &ToyModel<T>, v: &Volume<T>) -> Result<(Prob<T>, Prob<T>)> {
    let (seg, lmk) = split_heads(&model.logits(v), v.geometry());
    Ok((softmax_channels(&seg)?, softmax_channels(&lmk)?))
}

/// One training example: intensities, tissue labels and a landmark label grid.
#[derive(Debug, Clone)]
pub struct TrainSample<T = f32> {
    pub volume: Volume<T>,
    pub labels: LabelGrid,
    pub landmarks: LabelGrid,
}

impl<T: Real> TrainSample<T> {
    pub fn new(volume: Volume<T>, labels: LabelGrid, landmarks: LabelGrid) -> Result<Self> {
        volume.geometry().ensure_matches(labels.geometry(), "training labels")?;
        volume.geometry().ensure_matches(landmarks.geometry(), "training landmarks")?;
        if labels.class_count() as usize > SEG_CLASSES || landmarks.class_count() as usize > LANDMARK_CLASSES {
            return Err(Error::Shape("training label grids exceed the model's class counts".into()));
        }
        Ok(TrainSample {
            volume,
            labels,
            landmarks,
        })
    }
}

/// Loss components of one sample or their mean over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub landmark: f64,
    pub regulariser: f64,
    pub total: f64,
}

struct Evaluated<T> {
    loss: LossBreakdown,
    seg: Prob<T>,
    lmk: Prob<T>,
}

fn evaluate<T: Real>(model: &ToyModel<T>, s: &TrainSample<T>, w: &LossWeights) -> Result<Evaluated<T>> {
    let (seg, lmk) = predict(model, &s.volume)?;
    let dice = dice_loss(&seg, &s.labels, w.epsilon)?;
    let landmark = weighted_ce_loss(&lmk, &s.landmarks)?;
    let regulariser = model.frobenius_sq();
    let total = dice + w.alpha * landmark + w.beta * regulariser;
    Ok(Evaluated {
        loss: LossBreakdown {
            dice,
            landmark,
            regulariser,
            total,
        },
        seg,
        lmk,
    })
}

/// `L_D + α·L_L + β·‖W‖²` summed over the batch, regulariser counted once.
pub fn total_loss<T: Real>(model: &ToyModel<T>, batch: &[TrainSample<T>], w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let mut dice = 0.0;
    let mut landmark = 0.0;
    for s in batch {
        let e = evaluate(model, s, w)?;
        dice += e.loss.dice;
        landmark += e.loss.landmark;
    }
    let regulariser = model.frobenius_sq();
    Ok(LossBreakdown {
        dice,
        landmark,
        regulariser,
        total: dice + w.alpha * landmark + w.beta * regulariser,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Odd number of neighbouring slices stacked as input channels.
    pub context_slices: usize,
    /// Odd in-plane kernel size.
    pub kernel: usize,
    /// Standard deviation of the initial weights.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 0.01,
            optimizer: Optimizer::Adam,
            context_slices: 3,
            kernel: 5,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    /// Means over the epoch's samples, each taken before that sample's update.
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default)]
pub struct LossTrace(pub Vec<EpochLoss>);

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,L_D,L_L,regulariser,total\n");
        for e in &self.0 {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.loss.dice, e.loss.landmark, e.loss.regulariser, e.loss.total
            ));
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Trains from a seeded random start, one sample per update, samples visited in
/// a seeded shuffled order each epoch.
pub fn train_toy<T: Real>(samples: &[TrainSample<T>], w: &LossWeights, cfg: &TrainConfig) -> Result<(ToyModel<T>, LossTrace)> {
    let model = ToyModel::random(cfg.context_slices, cfg.kernel, cfg.init_scale, cfg.seed)?;
    train_from(model, samples, w, cfg)
}

/// As [`train_toy`], continuing from `model`.
pub fn train_from<T: Real>(
    mut model: ToyModel<T>,
    samples: &[TrainSample<T>],
    w: &LossWeights,
    cfg: &TrainConfig,
) -> Result<(ToyModel<T>, LossTrace)> {
    w.validate()?;
    if samples.is_empty() {
        return Err(Error::Parameter("training needs at least one sample".into()));
    }
    if !(cfg.learning_rate > 0.0) {
        return Err(Error::Parameter("learning rate must be > 0".into()));
    }
    let nw = model.weights.len();
    let np = nw + OUTPUT_CHANNELS;
    let mut adam = Adam {
        m: vec![0.0; np],
        v: vec![0.0; np],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = LossTrace::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 4];
        for &si in &order {
            let s = &samples[si];
            let e = evaluate(&model, s, w)?;
            let l = e.loss;
            if !l.total.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch}, sample {si}: L_D={} L_L={} reg={}",
                    l.dice, l.landmark, l.regulariser
                )));
            }
            for (a, v) in acc.iter_mut().zip([l.dice, l.landmark, l.regulariser, l.total]) {
                *a += v;
            }

            let g_seg = softmax_backward(&e.seg, &dice_loss_grad(&e.seg, &s.labels, w.epsilon)?)?;
            let mut g_lmk = weighted_ce_logit_grad(&e.lmk, &s.landmarks)?;
            let alpha = T::of(w.alpha);
            g_lmk.data_mut().iter_mut().for_each(|x| *x *= alpha);
            let (mut gw, mut gb) = model.backward(&s.volume, &merge_heads(&g_seg, &g_lmk));
            for (g, p) in gw.iter_mut().zip(&model.weights) {
                *g += 2.0 * w.beta * p.as_f64();
            }
            for (g, p) in gb.iter_mut().zip(&model.bias) {
                *g += 2.0 * w.beta * p.as_f64();
            }
            if gw.iter().chain(&gb).any(|g| !g.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient at epoch {epoch}, sample {si}")));
            }

            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in model.weights.iter_mut().chain(model.bias.iter_mut()).zip(gw.iter().chain(&gb)) {
                        *p = T::of(p.as_f64() - cfg.learning_rate * g);
                    }
                }
                Optimizer::Adam => {
                    adam.t += 1;
                    let c1 = 1.0 - ADAM_B1.powi(adam.t);
                    let c2 = 1.0 - ADAM_B2.powi(adam.t);
                    let params = model.weights.iter_mut().chain(model.bias.iter_mut());
                    for (i, (p, g)) in params.zip(gw.iter().chain(&gb)).enumerate() {
                        adam.m[i] = ADAM_B1 * adam.m[i] + (1.0 - ADAM_B1) * g;
                        adam.v[i] = ADAM_B2 * adam.v[i] + (1.0 - ADAM_B2) * g * g;
                        let step = cfg.learning_rate * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + ADAM_EPS);
                        *p = T::of(p.as_f64() - step);
                    }
                }
            }
        }
        let n = samples.len() as f64;
        let loss = LossBreakdown {
            dice: acc[0] / n,
            landmark: acc[1] / n,
            regulariser: acc[2] / n,
            total: acc[3] / n,
        };
        log::debug!("epoch {epoch}: total {:.6} (dice {:.6}, landmark {:.6})", loss.total, loss.dice, loss.landmark);
        trace.0.push(EpochLoss { epoch, loss });
    }
    Ok((model, trace))
}
