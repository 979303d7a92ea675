//! Session state machine: staged batches, annotation intake, training
//! iterations, proposals, corrections and convergence.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vbquant_core::phantom::edit_cost;
use vbquant_core::quantify::SummaryStats;
use vbquant_core::trainer::{evaluate, train, Case, CaseScore, Hyperparams};
use vbquant_core::vbnet::{build_vbnet, Model, VbNetConfig};
use vbquant_core::volume::{LabelMask, Volume};

use crate::rle::MaskRle;
use crate::store::SessionStore;
use crate::HitlError;

/// Default absolute holdout-Dice improvement below which training stops.
pub const DEFAULT_EPSILON: f64 = 0.005;

/// Split `volume_ids` into consecutive batches of the given sizes.
pub fn init_batches(volume_ids: &[String], batch_sizes: &[usize]) -> Result<Vec<Vec<String>>, HitlError> {
    if batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(HitlError::BatchSizes("batch sizes must be non-empty and positive".into()));
    }
    let total: usize = batch_sizes.iter().sum();
    if total != volume_ids.len() {
        return Err(HitlError::BatchSizes(format!(
            "batch sizes sum to {total} but {} volumes were given",
            volume_ids.len()
        )));
    }
    if batch_sizes[1..].iter().any(|&s| s < batch_sizes[0]) {
        return Err(HitlError::BatchSizes("the first batch must be the smallest".into()));
    }
    let unique: BTreeSet<&String> = volume_ids.iter().collect();
    if unique.len() != volume_ids.len() {
        return Err(HitlError::BatchSizes("volume ids must be unique".into()));
    }
    let mut it = volume_ids.iter().cloned();
    Ok(batch_sizes.iter().map(|&n| it.by_ref().take(n).collect()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub session_id: String,
    pub batches: Vec<Vec<String>>,
    /// Fixed evaluation cases, never trained on.
    pub holdout: Vec<String>,
    pub model: VbNetConfig,
    pub model_seed: u64,
    pub hyper: Hyperparams,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Start each iteration from the previous model instead of a fresh one.
    #[serde(default = "yes")]
    pub warm_start: bool,
    #[serde(default = "half")]
    pub threshold: f32,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn yes() -> bool {
    true
}
fn half() -> f32 {
    0.5
}

impl SessionConfig {
    pub fn new(session_id: impl Into<String>, volume_ids: &[String], batch_sizes: &[usize], holdout: Vec<String>) -> Result<Self, HitlError> {
        Ok(Self {
            session_id: session_id.into(),
            batches: init_batches(volume_ids, batch_sizes)?,
            holdout,
            model: VbNetConfig::default(),
            model_seed: 0,
            hyper: Hyperparams::default(),
            epsilon: DEFAULT_EPSILON,
            warm_start: true,
            threshold: 0.5,
        })
    }

    fn validate(&self) -> Result<(), HitlError> {
        let sizes: Vec<usize> = self.batches.iter().map(Vec::len).collect();
        let ids: Vec<String> = self.batches.concat();
        init_batches(&ids, &sizes)?;
        if self.holdout.is_empty() {
            return Err(HitlError::Config("holdout must not be empty".into()));
        }
        if let Some(id) = self.holdout.iter().find(|h| ids.contains(h)) {
            return Err(HitlError::Config(format!("holdout case {id} is also in a batch")));
        }
        if !(self.epsilon >= 0.0) {
            return Err(HitlError::Config("epsilon must be >= 0".into()));
        }
        self.model.validate()?;
        vbquant_core::vbnet::check_threshold(self.threshold)?;
        Ok(())
    }
}

/// Volumes of every batch plus the labelled holdout.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub volumes: BTreeMap<String, Volume>,
    pub holdout: Vec<Case>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    AwaitingAnnotation { batch: usize },
    Training { iteration: usize },
    ServingProposals { batch: usize },
    Converged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manual,
    Correction,
}

/// A mask accepted into the training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredMask {
    pub mask: LabelMask,
    pub seconds: f64,
    pub editor: String,
    pub provenance: Provenance,
    /// Iteration whose model produced the corrected proposal (0 for manual).
    pub proposal_iteration: usize,
    /// `|proposal Δ mask|`; the proposal is empty for manual annotation.
    pub edit_cost: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub volume_id: String,
    pub proposal_ref: u64,
    pub corrected: LabelMask,
    pub seconds: f64,
    pub editor: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// Iteration that produced it.
    pub proposal_ref: u64,
    pub mask: LabelMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Checkpoint file name inside the session directory.
    pub checkpoint: String,
    pub training_size: usize,
    pub training_ids: Vec<String>,
    pub holdout: Vec<CaseScore>,
    pub holdout_dice: SummaryStats,
    /// `|segmentation Δ reference|` per holdout case.
    pub holdout_edit_cost: Vec<usize>,
    /// Seconds spent on each mask of the batch this iteration added.
    pub labeling_seconds: Vec<f64>,
    pub edit_costs: Vec<usize>,
    pub losses: Vec<f64>,
    pub hyper: Hyperparams,
    pub converged: bool,
}

/// Logged session events; replaying them rebuilds the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Created {
        config: SessionConfig,
    },
    Annotation {
        volume_id: String,
        mask: MaskRle,
        seconds: f64,
        editor: String,
        replaced: bool,
    },
    Correction {
        volume_id: String,
        proposal_ref: u64,
        mask: MaskRle,
        seconds: f64,
        editor: String,
        edit_cost: usize,
        /// Arrived while a training job was running; applied after it.
        queued: bool,
    },
    Iteration {
        record: IterationRecord,
    },
}

/// `true` when batches are exhausted or the last Dice gain is below `epsilon`.
pub fn convergence_check(dice_history: &[f64], exhausted: bool, epsilon: f64) -> bool {
    if exhausted {
        return true;
    }
    match dice_history {
        [.., a, b] => b - a < epsilon,
        _ => false,
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration:03}.vbn")
}

/// Self-contained training work for one iteration.
#[derive(Debug, Clone)]
pub struct TrainJob {
    pub iteration: usize,
    pub model: Model,
    pub training: Vec<Case>,
    pub holdout: Vec<Case>,
    pub hyper: Hyperparams,
    pub threshold: f32,
    pub previous_dice: Option<f64>,
    pub epsilon: f64,
    pub exhausted: bool,
    /// Volumes to pre-segment if the session continues.
    pub next_batch: Vec<(String, Volume)>,
}

#[derive(Debug, Clone)]
pub struct JobOutput {
    pub iteration: usize,
    pub model: Model,
    pub losses: Vec<f64>,
    pub holdout: Vec<CaseScore>,
    pub holdout_dice: SummaryStats,
    pub holdout_edit_cost: Vec<usize>,
    pub hyper: Hyperparams,
    pub converged: bool,
    pub proposals: Vec<(String, LabelMask)>,
}

impl TrainJob {
    pub fn run(self) -> Result<JobOutput, HitlError> {
        // holdout scored once at the end, not per epoch
        let (model, record) = train(self.model, &self.training, &[], &self.hyper)?;
        let eval = evaluate(&model, &self.holdout)?;
        if let Some((id, why)) = eval.skipped.first() {
            return Err(HitlError::Data(format!("holdout case {id}: {why}")));
        }
        let holdout_dice = eval.summary.ok_or_else(|| HitlError::Data("holdout is empty".into()))?;
        let mut holdout_edit_cost = Vec::with_capacity(self.holdout.len());
        for case in &self.holdout {
            let pred = model.segment(&case.volume, self.threshold)?;
            holdout_edit_cost.push(edit_cost(&pred, &case.infection)?);
        }
        let mut history: Vec<f64> = self.previous_dice.into_iter().collect();
        history.push(holdout_dice.mean);
        let converged = convergence_check(&history, self.exhausted, self.epsilon);
        let proposals = if converged {
            Vec::new()
        } else {
            self.next_batch
                .iter()
                .map(|(id, v)| Ok((id.clone(), model.segment(v, self.threshold)?)))
                .collect::<Result<_, HitlError>>()?
        };
        Ok(JobOutput {
            iteration: self.iteration,
            model,
            losses: record.losses(),
            holdout: eval.cases,
            holdout_dice,
            holdout_edit_cost,
            hyper: self.hyper,
            converged,
            proposals,
        })
    }
}

#[derive(Debug)]
pub struct HitlSession {
    config: SessionConfig,
    data: Arc<SessionData>,
    state: SessionState,
    masks: BTreeMap<String, StoredMask>,
    iterations: Vec<IterationRecord>,
    proposals: BTreeMap<String, Proposal>,
    model: Option<Model>,
    queue: Vec<(Correction, usize)>,
    in_flight: bool,
    events: Vec<Event>,
    store: Option<SessionStore>,
}

impl HitlSession {
    /// A fresh session in `awaiting_annotation(0)`.
    pub fn new(config: SessionConfig, data: Arc<SessionData>) -> Result<Self, HitlError> {
        config.validate()?;
        for id in config.batches.iter().flatten() {
            if !data.volumes.contains_key(id) {
                return Err(HitlError::UnknownVolume(id.clone()));
            }
        }
        let held: Vec<&String> = data.holdout.iter().map(|c| &c.id).collect();
        if held.len() != config.holdout.len() || config.holdout.iter().any(|h| !held.contains(&h)) {
            return Err(HitlError::Config("holdout data does not match the configured ids".into()));
        }
        let mut s = Self {
            events: Vec::new(),
            state: SessionState::AwaitingAnnotation { batch: 0 },
            masks: BTreeMap::new(),
            iterations: Vec::new(),
            proposals: BTreeMap::new(),
            model: None,
            queue: Vec::new(),
            in_flight: false,
            store: None,
            data,
            config,
        };
        s.log(Event::Created {
            config: s.config.clone(),
        })?;
        Ok(s)
    }

    /// Like [`HitlSession::new`], persisting every event under `store`.
    pub fn create_persistent(config: SessionConfig, data: Arc<SessionData>, store: SessionStore) -> Result<Self, HitlError> {
        store.init()?;
        let mut s = Self::new(config, data)?;
        store.append(&s.events)?;
        s.store = Some(store);
        Ok(s)
    }

    /// Rebuild a session by replaying its event log.
    pub fn replay(events: &[Event], data: Arc<SessionData>, load: impl Fn(&str) -> Result<Model, HitlError>) -> Result<Self, HitlError> {
        let Some(Event::Created { config }) = events.first() else {
            return Err(HitlError::Replay("log does not start with a created event".into()));
        };
        let mut s = Self::new(config.clone(), data)?;
        for (n, ev) in events.iter().enumerate().skip(1) {
            let r = match ev.clone() {
                Event::Annotation {
                    volume_id,
                    mask,
                    seconds,
                    editor,
                    ..
                } => {
                    let g = *s.volume(&volume_id)?.geometry();
                    s.submit_annotation(&volume_id, mask.decode(&g)?, seconds, &editor)
                }
                Event::Correction {
                    volume_id,
                    proposal_ref,
                    mask,
                    seconds,
                    editor,
                    queued,
                    ..
                } => {
                    let g = *s.volume(&volume_id)?.geometry();
                    s.in_flight = queued;
                    let r = s.ingest_correction(Correction {
                        volume_id,
                        proposal_ref,
                        corrected: mask.decode(&g)?,
                        seconds,
                        editor,
                    });
                    s.in_flight = false;
                    r.map(|_| ())
                }
                Event::Iteration { record } => {
                    let model = load(&record.checkpoint)?;
                    s.apply_iteration(record, model)
                }
                Event::Created { .. } => Err(HitlError::Replay("duplicate created event".into())),
            };
            r.map_err(|e| HitlError::Replay(format!("event {n}: {e}")))?;
        }
        if s.events != events {
            return Err(HitlError::Replay("replayed log differs from the original".into()));
        }
        Ok(s)
    }

    /// Reopen a persisted session.
    pub fn open(store: SessionStore, data: Arc<SessionData>) -> Result<Self, HitlError> {
        let events = store.read_events()?;
        let mut s = Self::replay(&events, data, |name| store.load_checkpoint(name))?;
        s.store = Some(store);
        Ok(s)
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }
    pub fn state(&self) -> SessionState {
        self.state
    }
    pub fn iterations(&self) -> &[IterationRecord] {
        &self.iterations
    }
    pub fn events(&self) -> &[Event] {
        &self.events
    }
    pub fn masks(&self) -> &BTreeMap<String, StoredMask> {
        &self.masks
    }
    pub fn model(&self) -> Option<&Model> {
        self.model.as_ref()
    }
    pub fn proposal(&self, volume_id: &str) -> Option<&Proposal> {
        self.proposals.get(volume_id)
    }
    pub fn queued(&self) -> &[(Correction, usize)] {
        &self.queue
    }
    pub fn is_training(&self) -> bool {
        self.in_flight
    }
    pub fn data(&self) -> &SessionData {
        &self.data
    }

    pub fn volume(&self, id: &str) -> Result<&Volume, HitlError> {
        self.data
            .volumes
            .get(id)
            .or_else(|| self.data.holdout.iter().find(|c| c.id == id).map(|c| &c.volume))
            .ok_or_else(|| HitlError::UnknownVolume(id.into()))
    }

    fn batch_of(&self, id: &str) -> Option<usize> {
        self.config.batches.iter().position(|b| b.iter().any(|v| v == id))
    }

    fn wrong_state(&self, op: &'static str) -> HitlError {
        HitlError::WrongState { op, state: self.state }
    }

    fn log(&mut self, ev: Event) -> Result<(), HitlError> {
        if let Some(store) = &self.store {
            store.append(std::slice::from_ref(&ev))?;
        }
        self.events.push(ev);
        Ok(())
    }

    fn batch_complete(&self, batch: usize) -> bool {
        self.config.batches[batch].iter().all(|id| self.masks.contains_key(id))
    }

    /// A from-scratch mask for the first batch.
    pub fn submit_annotation(&mut self, volume_id: &str, mask: LabelMask, seconds: f64, editor: &str) -> Result<(), HitlError> {
        let SessionState::AwaitingAnnotation { batch } = self.state else {
            return Err(self.wrong_state("submit_annotation"));
        };
        let vol = self.volume(volume_id)?;
        if self.batch_of(volume_id) != Some(batch) {
            return Err(HitlError::WrongBatch {
                volume: volume_id.into(),
                batch,
            });
        }
        vol.geometry().ensure_same(mask.geometry())?;
        check_seconds(seconds)?;
        let replaced = self.masks.contains_key(volume_id);
        self.log(Event::Annotation {
            volume_id: volume_id.into(),
            mask: MaskRle::encode(&mask),
            seconds,
            editor: editor.into(),
            replaced,
        })?;
        self.masks.insert(
            volume_id.into(),
            StoredMask {
                edit_cost: mask.foreground_count(),
                mask,
                seconds,
                editor: editor.into(),
                provenance: Provenance::Manual,
                proposal_iteration: 0,
            },
        );
        if self.batch_complete(batch) {
            self.state = SessionState::Training { iteration: batch + 1 };
        }
        Ok(())
    }

    /// Accept a corrected proposal; returns its edit cost. While a training
    /// job runs, corrections are validated and queued until it finishes.
    pub fn ingest_correction(&mut self, c: Correction) -> Result<usize, HitlError> {
        let batch = match self.state {
            SessionState::ServingProposals { batch } => batch,
            // duplicates for the batch that has just completed
            SessionState::Training { iteration } if iteration >= 2 => iteration - 1,
            _ => return Err(self.wrong_state("ingest_correction")),
        };
        let vol = self.volume(&c.volume_id)?;
        if self.batch_of(&c.volume_id) != Some(batch) {
            return Err(HitlError::WrongBatch {
                volume: c.volume_id,
                batch,
            });
        }
        vol.geometry().ensure_same(c.corrected.geometry())?;
        check_seconds(c.seconds)?;
        let proposal = self.proposals.get(&c.volume_id).ok_or_else(|| HitlError::UnknownVolume(c.volume_id.clone()))?;
        if proposal.proposal_ref != c.proposal_ref {
            return Err(HitlError::StaleProposal {
                volume: c.volume_id,
                expected: proposal.proposal_ref,
                got: c.proposal_ref,
            });
        }
        let cost = edit_cost(&proposal.mask, &c.corrected)?;
        let queued = self.in_flight;
        self.log(Event::Correction {
            volume_id: c.volume_id.clone(),
            proposal_ref: c.proposal_ref,
            mask: MaskRle::encode(&c.corrected),
            seconds: c.seconds,
            editor: c.editor.clone(),
            edit_cost: cost,
            queued,
        })?;
        if queued {
            self.queue.push((c, cost));
        } else {
            self.store_correction(c, cost);
            if let SessionState::ServingProposals { batch } = self.state {
                if self.batch_complete(batch) {
                    self.state = SessionState::Training { iteration: batch + 1 };
                }
            }
        }
        Ok(cost)
    }

    fn store_correction(&mut self, c: Correction, cost: usize) {
        self.masks.insert(
            c.volume_id,
            StoredMask {
                mask: c.corrected,
                seconds: c.seconds,
                editor: c.editor,
                provenance: Provenance::Correction,
                proposal_iteration: c.proposal_ref as usize,
                edit_cost: cost,
            },
        );
    }

    /// Training set of iteration `k`: every mask of batches `0..k`.
    fn training_cases(&self, k: usize) -> Vec<Case> {
        self.config.batches[..k]
            .iter()
            .flatten()
            .map(|id| Case::new(id.clone(), self.data.volumes[id].clone(), self.masks[id].mask.clone()))
            .collect()
    }

    /// Claim the training slot and package the work for iteration `k`.
    pub fn begin_iteration(&mut self, hyper: &Hyperparams) -> Result<TrainJob, HitlError> {
        let SessionState::Training { iteration } = self.state else {
            return Err(self.wrong_state("run_iteration"));
        };
        if self.in_flight {
            return Err(HitlError::Busy);
        }
        hyper.validate(self.config.model.size_factor())?;
        let model = match (&self.model, self.config.warm_start) {
            (Some(m), true) => m.clone(),
            _ => build_vbnet(&self.config.model, self.config.model_seed)?,
        };
        let mut hyper = hyper.clone();
        hyper.seed = hyper.seed.wrapping_add(iteration as u64);
        let exhausted = iteration == self.config.batches.len();
        let next_batch = if exhausted {
            Vec::new()
        } else {
            self.config.batches[iteration]
                .iter()
                .map(|id| (id.clone(), self.data.volumes[id].clone()))
                .collect()
        };
        self.in_flight = true;
        Ok(TrainJob {
            iteration,
            model,
            training: self.training_cases(iteration),
            holdout: self.data.holdout.clone(),
            hyper,
            threshold: self.config.threshold,
            previous_dice: self.iterations.last().map(|r| r.holdout_dice.mean),
            epsilon: self.config.epsilon,
            exhausted,
            next_batch,
        })
    }

    /// Release the training slot; on success record the iteration and move on.
    pub fn finish_iteration(&mut self, output: Result<JobOutput, HitlError>) -> Result<&IterationRecord, HitlError> {
        self.in_flight = false;
        let out = match output {
            Ok(out) => out,
            Err(e) => {
                self.drain_queue();
                return Err(e);
            }
        };
        if self.state != (SessionState::Training { iteration: out.iteration }) {
            return Err(self.wrong_state("finish_iteration"));
        }
        let k = out.iteration;
        let added = &self.config.batches[k - 1];
        let record = IterationRecord {
            iteration: k,
            checkpoint: checkpoint_name(k),
            training_size: self.config.batches[..k].iter().map(Vec::len).sum(),
            training_ids: self.config.batches[..k].concat(),
            holdout: out.holdout,
            holdout_dice: out.holdout_dice,
            holdout_edit_cost: out.holdout_edit_cost,
            labeling_seconds: added.iter().map(|id| self.masks[id].seconds).collect(),
            edit_costs: added.iter().map(|id| self.masks[id].edit_cost).collect(),
            losses: out.losses,
            hyper: out.hyper,
            converged: out.converged,
        };
        if let Some(store) = &self.store {
            store.save_checkpoint(&record.checkpoint, &out.model)?;
        }
        self.log(Event::Iteration { record: record.clone() })?;
        self.install(record, out.model, out.proposals);
        Ok(self.iterations.last().expect("just pushed"))
    }

    /// Replay path: regenerate proposals from the stored checkpoint.
    fn apply_iteration(&mut self, record: IterationRecord, model: Model) -> Result<(), HitlError> {
        if self.state != (SessionState::Training { iteration: record.iteration }) {
            return Err(self.wrong_state("iteration"));
        }
        let proposals = if record.converged {
            Vec::new()
        } else {
            self.config.batches[record.iteration]
                .iter()
                .map(|id| Ok((id.clone(), model.segment(&self.data.volumes[id], self.config.threshold)?)))
                .collect::<Result<_, HitlError>>()?
        };
        self.events.push(Event::Iteration { record: record.clone() });
        self.install(record, model, proposals);
        Ok(())
    }

    fn install(&mut self, record: IterationRecord, model: Model, proposals: Vec<(String, LabelMask)>) {
        let k = record.iteration;
        self.state = if record.converged {
            SessionState::Converged
        } else {
            SessionState::ServingProposals { batch: k }
        };
        self.proposals = proposals
            .into_iter()
            .map(|(id, mask)| {
                (
                    id,
                    Proposal {
                        proposal_ref: k as u64,
                        mask,
                    },
                )
            })
            .collect();
        self.iterations.push(record);
        self.model = Some(model);
        self.drain_queue();
    }

    /// Queued corrections replace masks of the batch just trained on.
    fn drain_queue(&mut self) {
        for (c, cost) in std::mem::take(&mut self.queue) {
            self.store_correction(c, cost);
        }
    }

    /// Run one full iteration in the calling thread.
    pub fn run_iteration(&mut self, hyper: &Hyperparams) -> Result<&IterationRecord, HitlError> {
        let job = self.begin_iteration(hyper)?;
        let out = job.run();
        self.finish_iteration(out)
    }

    pub fn convergence_check(&self) -> bool {
        let dice: Vec<f64> = self.iterations.iter().map(|r| r.holdout_dice.mean).collect();
        let exhausted = self.iterations.last().map_or(false, |r| r.iteration == self.config.batches.len());
        convergence_check(&dice, exhausted, self.config.epsilon)
    }
}

fn check_seconds(seconds: f64) -> Result<(), HitlError> {
    if seconds >= 0.0 && seconds.is_finite() {
        Ok(())
    } else {
        Err(HitlError::BadSeconds(seconds))
    }
}
