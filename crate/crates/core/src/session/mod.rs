//! Dialogue sessions: the turn state machine, its event log, and the
//! [`Engine`] that runs turns against a gallery and an oracle suite.
//!
//! Every state change is an event. The engine computes a turn without
//! touching the session, appends the resulting events to the store, and only
//! then applies them, so a failed turn leaves both the log and the in-memory
//! state exactly as they were.

mod store;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctxref::CtxRefParams;
use crate::dialog::{
    ask_question, dialog_round, incorporate_answer, Description, DialogParams, QaPair, MAX_ROUNDS,
};
use crate::digest::ranking_digest;
use crate::error::{Error, Result};
use crate::fusion::{fuse, score_turn, CandidateSet, FusionPolicy, TurnMetrics};
use crate::gallery::{Gallery, ImageId};
use crate::image::{image_round, incorporate_discrepancy, render_and_rank, GenPrompt, GeneratedImage, DISCREPANCY_QUESTION};
use crate::oracles::OracleSuite;
use crate::respondent::SimulatedUser;
use crate::vecsearch::{rank_by_image, rank_by_text, Ranking};

pub use store::{Replay, SessionStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Live,
    Simulated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    AwaitingDialogAnswer,
    AwaitingDiscrepancy,
    RoundComplete,
    Finished,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::AwaitingDialogAnswer => "awaiting_dialog_answer",
            SessionStatus::AwaitingDiscrepancy => "awaiting_discrepancy",
            SessionStatus::RoundComplete => "round_complete",
            SessionStatus::Finished => "finished",
        }
    }
}

/// One complete dialogue round: question/answer, generated image, discrepancy
/// question/answer, and what the round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub k: usize,
    pub context: Vec<String>,
    pub question_flagged: bool,
    pub q0: QaPair,
    pub generated: GeneratedImage,
    pub q1: QaPair,
    /// Description after this round's refinement (ranked by the dialog module).
    pub description: Description,
    /// Prompt after this round's refinement (used to generate next round's image).
    pub prompt: GenPrompt,
    pub dialog_ranking_digest: String,
    pub image_ranking_digest: String,
    pub candidates: CandidateSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<TurnMetrics>,
}

/// The answered half of a live turn, waiting for discrepancy feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerStep {
    pub qa: QaPair,
    pub description: Description,
    pub generated: GeneratedImage,
    pub candidates: CandidateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingTurn {
    pub k: usize,
    pub context: Vec<String>,
    pub question: String,
    pub flagged: bool,
    pub answer: Option<AnswerStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub mode: SessionMode,
    pub target: Option<ImageId>,
    pub generator_seed: u64,
    pub round_cap: usize,
    pub initial_description: String,
    pub description: Description,
    pub prompt: GenPrompt,
    pub turns: Vec<TurnRecord>,
    pub status: SessionStatus,
    pub pending: Option<PendingTurn>,
    pub selected: Option<ImageId>,
}

impl SessionState {
    pub fn dialog_history(&self) -> Vec<QaPair> {
        self.turns.iter().map(|t| t.q0.clone()).collect()
    }

    pub fn metrics(&self) -> Vec<TurnMetrics> {
        self.turns.iter().filter_map(|t| t.metrics.clone()).collect()
    }

    pub fn latest_candidates(&self) -> Option<&CandidateSet> {
        self.pending
            .as_ref()
            .and_then(|p| p.answer.as_ref())
            .map(|a| &a.candidates)
            .or_else(|| self.turns.last().map(|t| &t.candidates))
    }

    pub fn is_finished(&self) -> bool {
        self.status == SessionStatus::Finished
    }

    /// Events that rebuild this state from nothing.
    pub fn events(&self) -> Vec<SessionEvent> {
        let mut ev = vec![SessionEvent::Opened {
            session_id: self.session_id.clone(),
            mode: self.mode,
            target: self.target.clone(),
            generator_seed: self.generator_seed,
            round_cap: self.round_cap,
            description: self.initial_description.clone(),
        }];
        for t in &self.turns {
            if self.mode == SessionMode::Live {
                ev.push(SessionEvent::QuestionPosed {
                    k: t.k,
                    context: t.context.clone(),
                    question: t.q0.question.clone(),
                    flagged: t.question_flagged,
                });
                ev.push(SessionEvent::AnswerReceived {
                    k: t.k,
                    step: AnswerStep {
                        qa: t.q0.clone(),
                        description: t.description.clone(),
                        generated: t.generated.clone(),
                        candidates: t.candidates.clone(),
                    },
                });
            }
            ev.push(SessionEvent::TurnCompleted { record: t.clone() });
        }
        if let Some(p) = &self.pending {
            ev.push(SessionEvent::QuestionPosed {
                k: p.k,
                context: p.context.clone(),
                question: p.question.clone(),
                flagged: p.flagged,
            });
            if let Some(a) = &p.answer {
                ev.push(SessionEvent::AnswerReceived {
                    k: p.k,
                    step: a.clone(),
                });
            }
        }
        if let Some(id) = &self.selected {
            ev.push(SessionEvent::Selected {
                image_id: id.clone(),
            });
        }
        ev
    }

    /// Rebuilds a state by folding events. The first event must be `Opened`.
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a SessionEvent>) -> Result<Self> {
        let mut it = events.into_iter();
        let mut s = match it.next() {
            Some(e) => SessionState::from_opened(e)?,
            None => return Err(Error::InvalidParams("empty event sequence".into())),
        };
        for e in it {
            s.apply(e)?;
        }
        Ok(s)
    }

    fn from_opened(event: &SessionEvent) -> Result<Self> {
        let SessionEvent::Opened {
            session_id,
            mode,
            target,
            generator_seed,
            round_cap,
            description,
        } = event
        else {
            return Err(Error::InvalidParams("session log must start with `opened`".into()));
        };
        Ok(SessionState {
            session_id: session_id.clone(),
            mode: *mode,
            target: target.clone(),
            generator_seed: *generator_seed,
            round_cap: (*round_cap).min(MAX_ROUNDS),
            initial_description: description.clone(),
            description: Description::initial(description.clone())?,
            prompt: GenPrompt::initial(description.clone()),
            turns: Vec::new(),
            status: SessionStatus::AwaitingDialogAnswer,
            pending: None,
            selected: None,
        })
    }

    /// Applies one event, rejecting anything the state machine does not allow.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<()> {
        let phase = |s: &SessionState| Error::WrongPhase(s.status.as_str());
        match event {
            SessionEvent::Opened { .. } => return Err(phase(self)),
            SessionEvent::QuestionPosed {
                k,
                context,
                question,
                flagged,
            } => {
                let fresh = self.status == SessionStatus::AwaitingDialogAnswer && self.pending.is_none();
                if !(fresh || self.status == SessionStatus::RoundComplete) {
                    return Err(phase(self));
                }
                if *k != self.turns.len() + 1 || self.turns.len() >= self.round_cap {
                    return Err(Error::SessionComplete);
                }
                self.pending = Some(PendingTurn {
                    k: *k,
                    context: context.clone(),
                    question: question.clone(),
                    flagged: *flagged,
                    answer: None,
                });
                self.status = SessionStatus::AwaitingDialogAnswer;
            }
            SessionEvent::AnswerReceived { k, step } => {
                match &mut self.pending {
                    Some(p) if p.k == *k && p.answer.is_none() && self.status == SessionStatus::AwaitingDialogAnswer => {
                        p.answer = Some(step.clone());
                    }
                    _ => return Err(phase(self)),
                }
                self.status = SessionStatus::AwaitingDiscrepancy;
            }
            SessionEvent::TurnCompleted { record } => {
                if self.status == SessionStatus::Finished {
                    return Err(Error::SessionComplete);
                }
                if record.k != self.turns.len() + 1 || self.turns.len() >= self.round_cap {
                    return Err(Error::SessionComplete);
                }
                let ok = match self.mode {
                    SessionMode::Simulated => matches!(
                        self.status,
                        SessionStatus::AwaitingDialogAnswer | SessionStatus::RoundComplete
                    ),
                    SessionMode::Live => self.status == SessionStatus::AwaitingDiscrepancy,
                };
                if !ok {
                    return Err(phase(self));
                }
                self.description = record.description.clone();
                self.prompt = record.prompt.clone();
                self.turns.push(record.clone());
                self.pending = None;
                self.status = if self.turns.len() >= self.round_cap {
                    SessionStatus::Finished
                } else {
                    SessionStatus::RoundComplete
                };
            }
            SessionEvent::Selected { image_id } => {
                if self.selected.is_some() {
                    return Err(phase(self));
                }
                self.selected = Some(image_id.clone());
                self.pending = None;
                self.status = SessionStatus::Finished;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Opened {
        session_id: String,
        mode: SessionMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<ImageId>,
        generator_seed: u64,
        round_cap: usize,
        description: String,
    },
    QuestionPosed {
        k: usize,
        context: Vec<String>,
        question: String,
        flagged: bool,
    },
    AnswerReceived {
        k: usize,
        #[serde(flatten)]
        step: AnswerStep,
    },
    TurnCompleted {
        #[serde(flatten)]
        record: TurnRecord,
    },
    Selected {
        image_id: ImageId,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineSettings {
    pub ctxref: CtxRefParams,
    pub dialog: DialogParams,
    pub policy: FusionPolicy,
    pub round_cap: usize,
    pub generator_seed: u64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            ctxref: CtxRefParams::default(),
            dialog: DialogParams::default(),
            policy: FusionPolicy::default(),
            round_cap: MAX_ROUNDS,
            generator_seed: 0,
        }
    }
}

/// Result of the discrepancy step of a live turn.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscrepancyStep {
    pub record: TurnRecord,
    pub next_question: Option<String>,
}

/// Runs sessions against one gallery and oracle suite.
#[derive(Clone, Debug)]
pub struct Engine {
    gallery: Arc<Gallery>,
    oracles: OracleSuite,
    settings: EngineSettings,
    store: Option<SessionStore>,
}

impl Engine {
    pub fn new(gallery: Arc<Gallery>, oracles: OracleSuite, settings: EngineSettings) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::EmptyGallery);
        }
        settings.ctxref.validate()?;
        if settings.round_cap == 0 || settings.round_cap > MAX_ROUNDS {
            return Err(Error::InvalidParams(format!(
                "round cap must be in 1..={MAX_ROUNDS}"
            )));
        }
        Ok(Engine {
            gallery,
            oracles,
            settings,
            store: None,
        })
    }

    pub fn with_store(mut self, store: SessionStore) -> Self {
        self.store = Some(store);
        self
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn oracles(&self) -> &OracleSuite {
        &self.oracles
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn store(&self) -> Option<&SessionStore> {
        self.store.as_ref()
    }

    fn commit(&self, s: &mut SessionState, events: &[SessionEvent]) -> Result<()> {
        let mut next = s.clone();
        for e in events {
            next.apply(e)?;
        }
        if let Some(store) = &self.store {
            store.append(&s.session_id, events)?;
        }
        *s = next;
        Ok(())
    }

    pub fn open_session(
        &self,
        description: &str,
        mode: SessionMode,
        target: Option<ImageId>,
    ) -> Result<SessionState> {
        let id = format!("s{:016x}", rand::rng().random::<u64>());
        self.open_session_as(&id, description, mode, target, self.settings.generator_seed)
    }

    pub fn open_session_as(
        &self,
        session_id: &str,
        description: &str,
        mode: SessionMode,
        target: Option<ImageId>,
        generator_seed: u64,
    ) -> Result<SessionState> {
        if description.trim().is_empty() {
            return Err(Error::EmptyDescription);
        }
        match (mode, &target) {
            (SessionMode::Simulated, None) => return Err(Error::MissingTarget),
            (SessionMode::Live, Some(_)) => {
                return Err(Error::InvalidParams("live sessions carry no target".into()))
            }
            (_, Some(t)) if self.gallery.index_of(t).is_none() => {
                return Err(Error::UnknownTarget(t.to_string()))
            }
            _ => {}
        }
        let opened = SessionEvent::Opened {
            session_id: session_id.to_string(),
            mode,
            target,
            generator_seed,
            round_cap: self.settings.round_cap,
            description: description.to_string(),
        };
        let state = SessionState::from_opened(&opened)?;
        if let Some(store) = &self.store {
            store.create(session_id, &opened)?;
        }
        Ok(state)
    }

    /// Runs a full simulated turn: dialog and image rounds (in parallel),
    /// fusion, scoring, then one `turn_completed` event.
    pub fn advance_turn(&self, s: &mut SessionState) -> Result<TurnRecord> {
        let k = self.check_turn_allowed(s)?;
        if s.mode != SessionMode::Simulated {
            return Err(Error::WrongPhase("live (use the answer/discrepancy steps)"));
        }
        let target = s.target.clone().ok_or(Error::MissingTarget)?;
        let g = &*self.gallery;
        let oracles = &self.oracles;
        let user = SimulatedUser::new(oracles.user_simulator.as_ref(), &target);
        let history = s.dialog_history();

        let (dialog, image) = rayon::join(
            || {
                dialog_round(
                    k,
                    &s.description,
                    &history,
                    g,
                    oracles,
                    &self.settings.ctxref,
                    &self.settings.dialog,
                    &user,
                )
            },
            || image_round(k, &s.prompt, s.generator_seed, g, oracles, &user),
        );
        let (dialog, image) = (dialog?, image?);

        let candidates = fuse(&dialog.ranking, &image.ranking, self.settings.policy)?;
        let prior = s.metrics();
        let metrics = score_turn(k, &candidates, &target, &dialog.ranking, &image.ranking, &prior)?;
        let record = TurnRecord {
            k,
            context: dialog.asked.context,
            question_flagged: dialog.asked.flagged,
            q0: dialog.qa,
            generated: image.generated,
            q1: image.qa,
            description: dialog.description,
            prompt: image.prompt,
            dialog_ranking_digest: ranking_digest(&dialog.ranking),
            image_ranking_digest: ranking_digest(&image.ranking),
            candidates,
            metrics: Some(metrics),
        };
        self.commit(s, &[SessionEvent::TurnCompleted { record: record.clone() }])?;
        Ok(record)
    }

    fn check_turn_allowed(&self, s: &SessionState) -> Result<usize> {
        if s.status == SessionStatus::Finished || s.turns.len() >= s.round_cap.min(MAX_ROUNDS) {
            return Err(Error::SessionComplete);
        }
        Ok(s.turns.len() + 1)
    }

    /// Live: compute the next clarifying question.
    pub fn pose_question(&self, s: &mut SessionState) -> Result<PendingTurn> {
        let k = self.check_turn_allowed(s)?;
        let fresh = s.status == SessionStatus::AwaitingDialogAnswer && s.pending.is_none();
        if s.mode != SessionMode::Live || !(fresh || s.status == SessionStatus::RoundComplete) {
            return Err(Error::WrongPhase(s.status.as_str()));
        }
        let event = self.question_event(s, k)?;
        self.commit(s, &[event])?;
        Ok(s.pending.clone().expect("question just posed"))
    }

    fn question_event(&self, s: &SessionState, k: usize) -> Result<SessionEvent> {
        let asked = ask_question(
            k,
            &s.description,
            &s.dialog_history(),
            &self.gallery,
            &self.oracles,
            &self.settings.ctxref,
            &self.settings.dialog,
        )?;
        Ok(SessionEvent::QuestionPosed {
            k,
            context: asked.context,
            question: asked.question,
            flagged: asked.flagged,
        })
    }

    /// Live: take the user's answer, refine the description, generate the
    /// round's image and return the fused candidates so far.
    pub fn submit_answer(&self, s: &mut SessionState, answer: &str) -> Result<AnswerStep> {
        self.check_turn_allowed(s)?;
        let pending = match (&s.pending, s.status) {
            (Some(p), SessionStatus::AwaitingDialogAnswer) if p.answer.is_none() => p.clone(),
            _ => return Err(Error::WrongPhase(s.status.as_str())),
        };
        let g = &*self.gallery;
        let (qa, description, dialog_ranking) = incorporate_answer(
            &s.description,
            &pending.question,
            answer,
            &s.dialog_history(),
            g,
            &self.oracles,
        )?;
        let (generated, image_ranking) = render_and_rank(&s.prompt, s.generator_seed, g, &self.oracles)?;
        let candidates = fuse(&dialog_ranking, &image_ranking, self.settings.policy)?;
        let step = AnswerStep {
            qa,
            description,
            generated,
            candidates,
        };
        self.commit(
            s,
            &[SessionEvent::AnswerReceived {
                k: pending.k,
                step: step.clone(),
            }],
        )?;
        Ok(step)
    }

    /// Live: take the discrepancy feedback, close the turn, and pose the next
    /// question unless the session is now finished.
    pub fn submit_discrepancy(&self, s: &mut SessionState, text: &str) -> Result<DiscrepancyStep> {
        let (pending, step) = match (&s.pending, s.status) {
            (Some(p), SessionStatus::AwaitingDiscrepancy) => {
                (p.clone(), p.answer.clone().expect("answered turn"))
            }
            (_, SessionStatus::Finished) => return Err(Error::SessionComplete),
            _ => return Err(Error::WrongPhase(s.status.as_str())),
        };
        let (q1, prompt) = incorporate_discrepancy(&s.prompt, text, &self.oracles)?;
        let g = &*self.gallery;
        let dialog_ranking = rank_by_text(g, &self.oracles.embed_text(&step.description.text, g.dim())?)?;
        let image_ranking = rank_by_image(g, &step.generated.embedding)?;
        let record = TurnRecord {
            k: pending.k,
            context: pending.context,
            question_flagged: pending.flagged,
            q0: step.qa,
            generated: step.generated,
            q1,
            description: step.description,
            prompt,
            dialog_ranking_digest: ranking_digest(&dialog_ranking),
            image_ranking_digest: ranking_digest(&image_ranking),
            candidates: step.candidates,
            metrics: None,
        };
        let mut events = vec![SessionEvent::TurnCompleted {
            record: record.clone(),
        }];
        let mut after = s.clone();
        after.apply(&events[0])?;
        let next_question = if after.is_finished() {
            None
        } else {
            let e = self.question_event(&after, after.turns.len() + 1)?;
            let q = match &e {
                SessionEvent::QuestionPosed { question, .. } => question.clone(),
                _ => unreachable!(),
            };
            events.push(e);
            Some(q)
        };
        self.commit(s, &events)?;
        Ok(DiscrepancyStep {
            record,
            next_question,
        })
    }

    /// Live: the user picked a candidate; the session ends.
    pub fn select_candidate(&self, s: &mut SessionState, image_id: &ImageId) -> Result<()> {
        if s.is_finished() {
            return Err(Error::SessionComplete);
        }
        if self.gallery.index_of(image_id).is_none() {
            return Err(Error::UnknownTarget(image_id.to_string()));
        }
        self.commit(
            s,
            &[SessionEvent::Selected {
                image_id: image_id.clone(),
            }],
        )
    }

    /// Re-derives both rankings of a persisted turn and returns their digests.
    pub fn recompute_digests(&self, record: &TurnRecord) -> Result<(String, String)> {
        let g = &*self.gallery;
        let dialog = rank_by_text(g, &self.oracles.embed_text(&record.description.text, g.dim())?)?;
        let image = rank_by_image(g, &self.oracles.embed_image(&record.generated.handle, g.dim())?)?;
        Ok((ranking_digest(&dialog), ranking_digest(&image)))
    }

    /// Both module rankings for the state's current description and a generated image.
    pub fn rankings_for(&self, description: &str, generated: &GeneratedImage) -> Result<(Ranking, Ranking)> {
        let g = &*self.gallery;
        Ok((
            rank_by_text(g, &self.oracles.embed_text(description, g.dim())?)?,
            rank_by_image(g, &generated.embedding)?,
        ))
    }
}

/// The fixed question shown with each generated image.
pub fn discrepancy_question() -> &'static str {
    DISCREPANCY_QUESTION
}
