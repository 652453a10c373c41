//! Dialog refiner: context-grounded clarifying questions, an answerability
//! filter, and description rewriting.

use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::ctxref::{obtain_contextual_reference, ContextualReference, CtxRefParams};
use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::oracles::OracleSuite;
use crate::respondent::Respondent;
use crate::vecsearch::{rank_by_text, Ranking};

/// Hard cap on dialogue rounds per session.
pub const MAX_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    /// 0 for the user's opening description, +1 per refinement.
    pub revision: u32,
}

impl Description {
    pub fn initial(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::EmptyDescription);
        }
        Ok(Description { text, revision: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaPhase {
    Description,
    Discrepancy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub phase: QaPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    /// The filter could not answer from what is known: the question adds information.
    Valid,
    AnswerableFromContext,
    /// The reply mentions uncertainty but is not the bare sentinel; treated as answerable.
    UncertainRaw,
}

impl FilterVerdict {
    pub fn from_reply(reply: &str) -> Self {
        let norm = reply
            .trim()
            .trim_matches(|c: char| c == '.' || c == '!' || c == '"' || c == '\'' || c.is_whitespace())
            .to_lowercase();
        if norm == "uncertain" {
            FilterVerdict::Valid
        } else if norm.contains("uncertain") {
            FilterVerdict::UncertainRaw
        } else {
            FilterVerdict::AnswerableFromContext
        }
    }

    pub fn is_valid(self) -> bool {
        self == FilterVerdict::Valid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DialogParams {
    pub max_question_retries: usize,
}

impl Default for DialogParams {
    fn default() -> Self {
        DialogParams {
            max_question_retries: 3,
        }
    }
}

/// A question that survived (or exhausted) the filter loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AskedQuestion {
    pub context: Vec<String>,
    pub question: String,
    /// Set when every regeneration was rejected and the last candidate is used anyway.
    pub flagged: bool,
    pub attempts: usize,
}

pub fn render_history(history: &[QaPair]) -> String {
    history
        .iter()
        .map(|qa| format!("Q: {}\nA: {}", qa.question, qa.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn generate_question(
    d: &Description,
    ctx: &ContextualReference,
    history: &[QaPair],
    rejected: &[String],
    oracles: &OracleSuite,
) -> Result<String> {
    if ctx.is_empty() {
        return Err(Error::InvalidParams("question generation needs a non-empty context".into()));
    }
    let captions = ctx.captions.join("\n");
    let history = render_history(history);
    let rejected = rejected.join("\n");
    let prompt = oracles
        .templates
        .render(
            "questioner",
            [
                ("description", d.text.as_str()),
                ("context_captions", captions.as_str()),
                ("history", history.as_str()),
                ("rejected", rejected.as_str()),
            ],
        )
        .map_err(crate::oracles::OracleError::from)?;
    let q = oracles.questioner.complete(&prompt)?;
    let q = q.trim();
    if q.is_empty() {
        return Err(Error::EmptyResponse("questioner"));
    }
    Ok(q.to_string())
}

pub fn filter_question(
    question: &str,
    d: &Description,
    history: &[QaPair],
    oracles: &OracleSuite,
) -> Result<FilterVerdict> {
    if question.trim().is_empty() {
        return Err(Error::InvalidParams("cannot filter an empty question".into()));
    }
    let history = render_history(history);
    let prompt = oracles
        .templates
        .render(
            "filter",
            [
                ("question", question),
                ("description", d.text.as_str()),
                ("history", history.as_str()),
            ],
        )
        .map_err(crate::oracles::OracleError::from)?;
    let reply = oracles.questioner.complete(&prompt)?;
    Ok(FilterVerdict::from_reply(&reply))
}

/// Contextual reference, then generate-and-filter until a valid question or
/// `max_question_retries` regenerations.
pub fn ask_question(
    round: usize,
    d: &Description,
    history: &[QaPair],
    g: &Gallery,
    oracles: &OracleSuite,
    ctx_params: &CtxRefParams,
    params: &DialogParams,
) -> Result<AskedQuestion> {
    let ctx = obtain_contextual_reference(&d.text, round, g, oracles, ctx_params)?;
    let mut rejected = Vec::new();
    let mut attempts = 0;
    loop {
        attempts += 1;
        let q = generate_question(d, &ctx, history, &rejected, oracles)?;
        let verdict = filter_question(&q, d, history, oracles)?;
        debug!(round, attempts, ?verdict, question = %q, "question filtered");
        if verdict.is_valid() || attempts > params.max_question_retries {
            if !verdict.is_valid() {
                info!(round, question = %q, "question retries exhausted; using last candidate");
            }
            return Ok(AskedQuestion {
                context: ctx.captions,
                question: q,
                flagged: !verdict.is_valid(),
                attempts,
            });
        }
        rejected.push(q);
    }
}

/// Rewrites the description with the new answer. Falls back to appending the
/// answer when the summarizer fails, so a round never stalls here.
pub fn refine_description(
    d: &Description,
    qa: &QaPair,
    history: &[QaPair],
    oracles: &OracleSuite,
) -> Description {
    let fallback = || Description {
        text: format!("{} {}", d.text, qa.answer),
        revision: d.revision + 1,
    };
    let history = render_history(history);
    let prompt = match oracles.templates.render(
        "summarizer",
        [
            ("description", d.text.as_str()),
            ("history", history.as_str()),
            ("question", qa.question.as_str()),
            ("answer", qa.answer.as_str()),
        ],
    ) {
        Ok(p) => p,
        Err(e) => {
            warn!(error = %e, "summarizer template failed; appending answer");
            return fallback();
        }
    };
    match oracles.summarizer.complete(&prompt) {
        Ok(text) if !text.trim().is_empty() => Description {
            text: text.trim().to_string(),
            revision: d.revision + 1,
        },
        Ok(_) => {
            warn!("summarizer returned nothing; appending answer");
            fallback()
        }
        Err(e) => {
            warn!(error = %e, "summarizer unavailable; appending answer");
            fallback()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogOutcome {
    pub asked: AskedQuestion,
    pub qa: QaPair,
    pub description: Description,
    pub ranking: Ranking,
}

/// Folds a user answer into the description and ranks the gallery with it.
pub fn incorporate_answer(
    d: &Description,
    question: &str,
    answer: &str,
    history: &[QaPair],
    g: &Gallery,
    oracles: &OracleSuite,
) -> Result<(QaPair, Description, Ranking)> {
    if answer.trim().is_empty() {
        return Err(Error::EmptyResponse("answer"));
    }
    let qa = QaPair {
        question: question.to_string(),
        answer: answer.trim().to_string(),
        phase: QaPhase::Description,
    };
    let mut full_history = history.to_vec();
    full_history.push(qa.clone());
    let description = refine_description(d, &qa, &full_history, oracles);
    let query = oracles.embed_text(&description.text, g.dim())?;
    let ranking = rank_by_text(g, &query)?;
    Ok((qa, description, ranking))
}

/// One dialog-refiner round, `round` being 1-based. Pure: the caller commits the outcome.
#[allow(clippy::too_many_arguments)]
pub fn dialog_round(
    round: usize,
    d: &Description,
    history: &[QaPair],
    g: &Gallery,
    oracles: &OracleSuite,
    ctx_params: &CtxRefParams,
    params: &DialogParams,
    respondent: &dyn Respondent,
) -> Result<DialogOutcome> {
    if round == 0 || round > MAX_ROUNDS {
        return Err(Error::SessionComplete);
    }
    let asked = ask_question(round, d, history, g, oracles, ctx_params, params)?;
    let answer = respondent.answer(&asked.question)?;
    let (qa, description, ranking) =
        incorporate_answer(d, &asked.question, &answer, history, g, oracles)?;
    Ok(DialogOutcome {
        asked,
        qa,
        description,
        ranking,
    })
}
