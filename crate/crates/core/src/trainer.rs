//! Patch-based soft-Dice training and Dice evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::quantify::{dice, summary_stats, QuantError, SummaryStats};
use crate::tensor::{FlushDenormals, Graph, Tensor, TensorError};
use crate::vbnet::{Model, ModelError};
use crate::volume::{lung_window, LabelMask, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("case {case}: {source}")]
    Geometry {
        case: String,
        #[source]
        source: VolumeError,
    },
    #[error("case {case}: patch {patch:?} larger than reflect-padded volume {dims:?}")]
    PatchTooLarge {
        case: String,
        patch: [usize; 3],
        dims: [usize; 3],
    },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    SgdMomentum,
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    /// Used by `sgd_momentum`.
    pub momentum: f32,
    pub epochs: usize,
    /// `(pz, py, px)`.
    pub patch_size: [usize; 3],
    pub patches_per_volume: usize,
    /// Patches per optimizer step; the soft-Dice loss pools all of them.
    pub batch_size: usize,
    /// Fraction of patches centred on an infected voxel.
    pub foreground_bias: f32,
    /// Additive smoothing of the soft-Dice loss.
    pub dice_smooth: f32,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            epochs: 10,
            patch_size: [32; 3],
            patches_per_volume: 4,
            batch_size: 2,
            foreground_bias: 0.5,
            dice_smooth: 1.0,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self, size_factor: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Hyper(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.foreground_bias) {
            return bad(format!("foreground_bias must lie in [0, 1], got {}", self.foreground_bias));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.dice_smooth > 0.0) {
            return bad("dice_smooth must be positive".into());
        }
        if self.patches_per_volume == 0 {
            return bad("patches_per_volume must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.patch_size.iter().any(|&p| p == 0 || p % size_factor != 0) {
            return bad(format!(
                "patch size {:?} must be positive multiples of {size_factor}",
                self.patch_size
            ));
        }
        Ok(())
    }

    /// Number of patches out of `patches_per_volume` centred on infection.
    pub fn foreground_patches(&self) -> usize {
        (self.foreground_bias as f64 * self.patches_per_volume as f64).round() as usize
    }
}

/// A CT volume with its reference infection mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub infection: LabelMask,
}

impl Case {
    pub fn new(id: impl Into<String>, volume: Volume, infection: LabelMask) -> Self {
        Self {
            id: id.into(),
            volume,
            infection,
        }
    }
}

/// Network input and target for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// `(1, pz, py, px)` lung-windowed intensities.
    pub input: Tensor<f32>,
    /// `(1, pz, py, px)` binary target.
    pub target: Tensor<f32>,
    /// `(x, y, z)` corner in reflect-padded coordinates.
    pub origin: [usize; 3],
    pub on_infection: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub warnings: Vec<String>,
}

struct Prepared<'a> {
    id: &'a str,
    dims: [usize; 3],
    input: Vec<f32>,
    target: Vec<f32>,
    infected: Vec<u32>,
}

fn prepare<'a>(case: &'a Case, patch: [usize; 3]) -> Result<Prepared<'a>, TrainError> {
    case.volume
        .geometry()
        .ensure_same(case.infection.geometry())
        .map_err(|source| TrainError::Geometry {
            case: case.id.clone(),
            source,
        })?;
    let dims = case.volume.dims();
    let pxyz = [patch[2], patch[1], patch[0]];
    if (0..3).any(|a| pxyz[a] > 2 * dims[a] - 1) {
        return Err(TrainError::PatchTooLarge {
            case: case.id.clone(),
            patch,
            dims,
        });
    }
    let target: Vec<f32> = case.infection.labels().iter().map(|&l| (l != 0) as u8 as f32).collect();
    let infected = target
        .iter()
        .enumerate()
        .filter(|(_, &t)| t > 0.0)
        .map(|(i, _)| i as u32)
        .collect();
    Ok(Prepared {
        id: &case.id,
        dims,
        input: lung_window(&case.volume),
        target,
        infected,
    })
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

fn crop(data: &[f32], dims: [usize; 3], origin: [usize; 3], patch: [usize; 3]) -> Tensor<f32> {
    let [pz, py, px] = patch;
    let [nx, ny, nz] = dims;
    let mut out = Vec::with_capacity(pz * py * px);
    for z in 0..pz {
        let sz = reflect(origin[2] + z, nz);
        for y in 0..py {
            let row = (sz * ny + reflect(origin[1] + y, ny)) * nx;
            if origin[0] + px <= nx {
                out.extend_from_slice(&data[row + origin[0]..row + origin[0] + px]);
            } else {
                out.extend((0..px).map(|x| data[row + reflect(origin[0] + x, nx)]));
            }
        }
    }
    Tensor::new(&[1, pz, py, px], out).expect("patch shape")
}

fn sample_prepared<R: Rng>(p: &Prepared, hyper: &Hyperparams, rng: &mut R, out: &mut PatchSet) {
    let patch = hyper.patch_size;
    let pxyz = [patch[2], patch[1], patch[0]];
    let padded: [usize; 3] = std::array::from_fn(|a| p.dims[a].max(pxyz[a]));
    let mut n_fg = hyper.foreground_patches();
    if n_fg > 0 && p.infected.is_empty() {
        out.warnings.push(format!(
            "case {}: empty infection mask, sampling {} background patches",
            p.id, hyper.patches_per_volume
        ));
        n_fg = 0;
    }
    for k in 0..hyper.patches_per_volume {
        let on_infection = k < n_fg;
        let origin: [usize; 3] = if on_infection {
            let v = p.infected[rng.gen_range(0..p.infected.len())] as usize;
            let c = [v % p.dims[0], (v / p.dims[0]) % p.dims[1], v / (p.dims[0] * p.dims[1])];
            std::array::from_fn(|a| c[a].saturating_sub(pxyz[a] / 2).min(padded[a] - pxyz[a]))
        } else {
            std::array::from_fn(|a| rng.gen_range(0..=padded[a] - pxyz[a]))
        };
        out.patches.push(Patch {
            input: crop(&p.input, p.dims, origin, patch),
            target: crop(&p.target, p.dims, origin, patch),
            origin,
            on_infection,
        });
    }
}

/// Draw `patches_per_volume` patches from one case; the first
/// `round(foreground_bias · n)` are centred on random infected voxels.
pub fn sample_patches<R: Rng>(case: &Case, hyper: &Hyperparams, rng: &mut R) -> Result<PatchSet, TrainError> {
    let p = prepare(case, hyper.patch_size)?;
    let mut out = PatchSet::default();
    sample_prepared(&p, hyper, rng, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean soft-Dice loss over the epoch's steps.
    pub loss: f64,
    pub holdout_dice: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainRecord {
    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

enum OptState {
    Sgd(BTreeMap<String, Vec<f32>>),
    Adam {
        t: i32,
        m: BTreeMap<String, Vec<f32>>,
        v: BTreeMap<String, Vec<f32>>,
    },
}

const ADAM_B1: f32 = 0.9;
const ADAM_B2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

impl OptState {
    fn new(kind: Optimizer) -> Self {
        match kind {
            Optimizer::SgdMomentum => Self::Sgd(BTreeMap::new()),
            Optimizer::Adam => Self::Adam {
                t: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
        }
    }

    fn begin_step(&mut self) {
        if let Self::Adam { t, .. } = self {
            *t += 1;
        }
    }

    fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], hyper: &Hyperparams) {
        let lr = hyper.learning_rate;
        match self {
            Self::Sgd(vel) => {
                let vel = vel.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
                for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                    *v = hyper.momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            Self::Adam { t, m, v } => {
                let m = m.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
                let v = v.entry(name.to_string()).or_insert_with(|| vec![0.0; param.len()]);
                let c1 = 1.0 - ADAM_B1.powi(*t);
                let c2 = 1.0 - ADAM_B2.powi(*t);
                for i in 0..param.len() {
                    let g = grad[i];
                    m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g;
                    v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    param[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// One optimizer step on a batch of patches; returns the loss before the update.
fn step(model: &mut Model, batch: &[Patch], hyper: &Hyperparams, opt: &mut OptState) -> Result<f32, TrainError> {
    let mut g = Graph::<f32>::new();
    let params = model.params_to_graph(&mut g, true);
    let mut ys = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for patch in batch {
        let x = g.leaf(patch.input.clone(), false);
        ts.push(g.leaf(patch.target.clone(), false));
        ys.push(model.forward_graph(&mut g, &params, x)?);
    }
    let (y, t) = if batch.len() == 1 {
        (ys[0], ts[0])
    } else {
        (g.concat(&ys)?, g.concat(&ts)?)
    };
    let loss = g.soft_dice_loss(y, t, hyper.dice_smooth)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?;
    opt.begin_step();
    for (name, var) in &params {
        let grad = grads.take(*var);
        let p = model.params_mut().get_mut(name).expect("param exists");
        opt.update(name, p.data_mut(), grad.data(), hyper);
    }
    model.trained_iterations += 1;
    Ok(value)
}

/// Train `model` on `dataset`, reporting holdout Dice after each epoch when a
/// holdout is given. `on_epoch` sees every record as it is produced.
pub fn train_with(
    mut model: Model,
    dataset: &[Case],
    holdout: &[Case],
    hyper: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainRecord), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    hyper.validate(model.config().size_factor())?;
    let prepared = dataset
        .iter()
        .map(|c| prepare(c, hyper.patch_size))
        .collect::<Result<Vec<_>, _>>()?;
    let _ftz = FlushDenormals::new();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = OptState::new(hyper.optimizer);
    let mut record = TrainRecord::default();
    for epoch in 1..=hyper.epochs {
        let start = Instant::now();
        let mut set = PatchSet::default();
        for p in &prepared {
            sample_prepared(p, hyper, &mut rng, &mut set);
        }
        if epoch == 1 {
            record.warnings.append(&mut set.warnings);
        }
        set.patches.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut steps = 0;
        for (i, batch) in set.patches.chunks(hyper.batch_size).enumerate() {
            let loss = step(&mut model, batch, hyper, &mut opt)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: i + 1 });
            }
            total += loss as f64;
            steps += 1;
        }
        let holdout_dice = if holdout.is_empty() {
            None
        } else {
            evaluate(&model, holdout)?.summary.map(|s| s.mean)
        };
        let rec = EpochRecord {
            epoch,
            loss: total / steps as f64,
            holdout_dice,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        record.epochs.push(rec);
    }
    Ok((model, record))
}

pub fn train(model: Model, dataset: &[Case], holdout: &[Case], hyper: &Hyperparams) -> Result<(Model, TrainRecord), TrainError> {
    train_with(model, dataset, holdout, hyper, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub id: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub cases: Vec<CaseScore>,
    /// `(case id, reason)` for cases that could not be scored.
    pub skipped: Vec<(String, String)>,
    /// `None` when every case was skipped.
    pub summary: Option<SummaryStats>,
}

/// Segment each case at threshold 0.5 and score it against its reference.
pub fn evaluate(model: &Model, dataset: &[Case]) -> Result<Evaluation, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut cases = Vec::new();
    let mut skipped = Vec::new();
    for case in dataset {
        if let Err(e) = case.volume.geometry().ensure_same(case.infection.geometry()) {
            skipped.push((case.id.clone(), e.to_string()));
            continue;
        }
        let pred = model.segment(&case.volume, 0.5)?;
        cases.push(CaseScore {
            id: case.id.clone(),
            dice: dice(&case.infection, &pred)?,
        });
    }
    let scores: Vec<f64> = cases.iter().map(|c| c.dice).collect();
    let summary = if scores.is_empty() { None } else { Some(summary_stats(&scores)?) };
    Ok(Evaluation { cases, skipped, summary })
}
