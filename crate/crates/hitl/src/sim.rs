//! A session driven end to end by a simulated annotator on phantoms.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vbquant_core::phantom::{gen_cohort, simulate_correction, CohortSpec, CorrectorModel};
use vbquant_core::trainer::{Case, Hyperparams};
use vbquant_core::vbnet::{VbNetConfig, INFECTION_LABEL};
use vbquant_core::volume::LabelMask;

use crate::engine::{Correction, HitlSession, SessionConfig, SessionData, SessionState, DEFAULT_EPSILON};
use crate::report::{time_report, TimeReport};
use crate::HitlError;

pub const SIM_EDITOR: &str = "simulated";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub session_id: String,
    pub cohort: CohortSpec,
    pub seed: u64,
    pub batch_sizes: Vec<usize>,
    pub holdout: usize,
    pub model: VbNetConfig,
    pub model_seed: u64,
    pub hyper: Hyperparams,
    pub corrector: CorrectorModel,
    pub epsilon: f64,
    pub warm_start: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            session_id: "sim".into(),
            cohort: CohortSpec::default(),
            seed: 0,
            batch_sizes: vec![2, 4, 6],
            holdout: 3,
            model: VbNetConfig::default(),
            model_seed: 0,
            hyper: Hyperparams::default(),
            corrector: CorrectorModel::zero_noise(),
            epsilon: DEFAULT_EPSILON,
            warm_start: true,
        }
    }
}

/// Session config, volumes and the ground truth the annotator works from.
pub fn sim_setup(cfg: &SimConfig) -> Result<(SessionConfig, SessionData, BTreeMap<String, LabelMask>), HitlError> {
    let total: usize = cfg.batch_sizes.iter().sum();
    if cfg.holdout == 0 {
        return Err(HitlError::Config("holdout must be >= 1".into()));
    }
    let cohort = gen_cohort(total + cfg.holdout, &cfg.cohort, cfg.seed)?;
    let (batch, held) = cohort.split_at(total);
    let ids: Vec<String> = batch.iter().map(|c| c.id.clone()).collect();
    let mut config = SessionConfig::new(
        cfg.session_id.clone(),
        &ids,
        &cfg.batch_sizes,
        held.iter().map(|c| c.id.clone()).collect(),
    )?;
    config.model = cfg.model.clone();
    config.model_seed = cfg.model_seed;
    config.hyper = cfg.hyper.clone();
    config.epsilon = cfg.epsilon;
    config.warm_start = cfg.warm_start;
    let data = SessionData {
        volumes: batch.iter().map(|c| (c.id.clone(), c.phantom.volume.clone())).collect(),
        holdout: held
            .iter()
            .map(|c| Case::new(c.id.clone(), c.phantom.volume.clone(), c.phantom.infection.clone()))
            .collect(),
    };
    let truths = batch.iter().map(|c| (c.id.clone(), c.phantom.infection.clone())).collect();
    Ok((config, data, truths))
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Simulated annotator with per-volume, per-stage seeds.
#[derive(Debug, Clone)]
pub struct SimAnnotator {
    pub truths: BTreeMap<String, LabelMask>,
    pub corrector: CorrectorModel,
    pub seed: u64,
}

impl SimAnnotator {
    fn seed_for(&self, id: &str, stage: u64) -> u64 {
        self.seed ^ fnv1a(id.as_bytes()) ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15)
    }

    fn truth(&self, id: &str) -> Result<&LabelMask, HitlError> {
        self.truths.get(id).ok_or_else(|| HitlError::UnknownVolume(id.into()))
    }

    /// Annotation from scratch: `(mask, seconds)`.
    pub fn annotate(&self, id: &str) -> Result<(LabelMask, f64), HitlError> {
        let truth = self.truth(id)?;
        let empty = LabelMask::empty(*truth.geometry(), INFECTION_LABEL);
        Ok(simulate_correction(&empty, truth, &self.corrector, self.seed_for(id, 0))?)
    }

    pub fn correct(&self, id: &str, proposal: &LabelMask, proposal_ref: u64) -> Result<(LabelMask, f64), HitlError> {
        let truth = self.truth(id)?;
        Ok(simulate_correction(proposal, truth, &self.corrector, self.seed_for(id, proposal_ref))?)
    }
}

/// Advance the session until it converges.
pub fn drive(session: &mut HitlSession, annotator: &SimAnnotator) -> Result<(), HitlError> {
    loop {
        match session.state() {
            SessionState::AwaitingAnnotation { batch } => {
                for id in session.config().batches[batch].clone() {
                    let (mask, secs) = annotator.annotate(&id)?;
                    session.submit_annotation(&id, mask, secs, SIM_EDITOR)?;
                }
            }
            SessionState::Training { .. } => {
                let hyper = session.config().hyper.clone();
                session.run_iteration(&hyper)?;
            }
            SessionState::ServingProposals { batch } => {
                for id in session.config().batches[batch].clone() {
                    let p = session.proposal(&id).ok_or_else(|| HitlError::UnknownVolume(id.clone()))?.clone();
                    let (corrected, seconds) = annotator.correct(&id, &p.mask, p.proposal_ref)?;
                    session.ingest_correction(Correction {
                        volume_id: id,
                        proposal_ref: p.proposal_ref,
                        corrected,
                        seconds,
                        editor: SIM_EDITOR.into(),
                    })?;
                }
            }
            SessionState::Converged => return Ok(()),
        }
    }
}

/// Build, run and report a simulated session.
pub fn simulate(cfg: &SimConfig) -> Result<(HitlSession, TimeReport), HitlError> {
    let (config, data, truths) = sim_setup(cfg)?;
    let mut session = HitlSession::new(config, Arc::new(data))?;
    let annotator = SimAnnotator {
        truths,
        corrector: cfg.corrector,
        seed: cfg.seed,
    };
    drive(&mut session, &annotator)?;
    let report = time_report(&session)?;
    Ok((session, report))
}
