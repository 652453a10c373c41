//! Image refiner: generate from the current prompt, collect the user's
//! description of how the result differs from the target, and rewrite the
//! prompt. The gallery is ranked by the generated image's embedding.

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dialog::{QaPair, QaPhase, MAX_ROUNDS};
use crate::error::{Error, Result};
use crate::gallery::{EmbeddingVector, Gallery};
use crate::oracles::{ImageHandle, OracleSuite, NO_DIFFERENCES};
use crate::respondent::Respondent;
use crate::vecsearch::{rank_by_image, Ranking};

/// The system's fixed discrepancy question.
pub const DISCREPANCY_QUESTION: &str =
    "Describe the differences between this image and your target image.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenPrompt {
    pub text: String,
    /// Revision 0 is the opening description.
    pub revision: u32,
}

impl GenPrompt {
    pub fn initial(text: impl Into<String>) -> Self {
        GenPrompt {
            text: text.into(),
            revision: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImage {
    pub handle: ImageHandle,
    pub embedding: EmbeddingVector,
    pub prompt_revision: u32,
}

pub fn generate_image(
    p: &GenPrompt,
    seed: u64,
    dim: usize,
    oracles: &OracleSuite,
) -> Result<GeneratedImage> {
    if p.text.trim().is_empty() {
        return Err(Error::InvalidParams("generation prompt is empty".into()));
    }
    let handle = oracles.image_generator.generate(&p.text, seed)?;
    let embedding = oracles.embed_image(&handle, dim)?;
    Ok(GeneratedImage {
        handle,
        embedding,
        prompt_revision: p.revision,
    })
}

pub fn elicit_discrepancy(gen: &GeneratedImage, respondent: &dyn Respondent) -> Result<QaPair> {
    let answer = respondent.describe_differences(gen, DISCREPANCY_QUESTION)?;
    Ok(QaPair {
        question: DISCREPANCY_QUESTION.to_string(),
        answer,
        phase: QaPhase::Discrepancy,
    })
}

fn is_no_differences(answer: &str) -> bool {
    answer
        .trim()
        .trim_end_matches('.')
        .eq_ignore_ascii_case(NO_DIFFERENCES)
}

/// Applies the reported differences to the prompt. A "no differences" answer
/// keeps the text; a failing summarizer falls back to appending the answer.
pub fn refine_prompt(p: &GenPrompt, discrepancy: &QaPair, oracles: &OracleSuite) -> Result<GenPrompt> {
    if discrepancy.phase != QaPhase::Discrepancy {
        return Err(Error::InvalidParams("refine_prompt needs a discrepancy answer".into()));
    }
    let revision = p.revision + 1;
    if is_no_differences(&discrepancy.answer) {
        return Ok(GenPrompt {
            text: p.text.clone(),
            revision,
        });
    }
    let fallback = || GenPrompt {
        text: format!("{} {}", p.text, discrepancy.answer),
        revision,
    };
    let prompt = match oracles.templates.render(
        "prompt_refiner",
        [
            ("prompt", p.text.as_str()),
            ("discrepancy", discrepancy.answer.as_str()),
        ],
    ) {
        Ok(prompt) => prompt,
        Err(e) => {
            warn!(error = %e, "prompt_refiner template failed; appending differences");
            return Ok(fallback());
        }
    };
    Ok(match oracles.summarizer.complete(&prompt) {
        Ok(text) if !text.trim().is_empty() => GenPrompt {
            text: text.trim().to_string(),
            revision,
        },
        Ok(_) => fallback(),
        Err(e) => {
            warn!(error = %e, "summarizer unavailable; appending differences");
            fallback()
        }
    })
}

/// Generates from `p` and ranks the gallery by the result.
pub fn render_and_rank(
    p: &GenPrompt,
    seed: u64,
    g: &Gallery,
    oracles: &OracleSuite,
) -> Result<(GeneratedImage, Ranking)> {
    let gen = generate_image(p, seed, g.dim(), oracles)?;
    let ranking = rank_by_image(g, &gen.embedding)?;
    Ok((gen, ranking))
}

/// Wraps a user's discrepancy text and rewrites the prompt with it.
pub fn incorporate_discrepancy(
    p: &GenPrompt,
    answer: &str,
    oracles: &OracleSuite,
) -> Result<(QaPair, GenPrompt)> {
    if answer.trim().is_empty() {
        return Err(Error::EmptyResponse("discrepancy"));
    }
    let qa = QaPair {
        question: DISCREPANCY_QUESTION.to_string(),
        answer: answer.trim().to_string(),
        phase: QaPhase::Discrepancy,
    };
    let next = refine_prompt(p, &qa, oracles)?;
    Ok((qa, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub generated: GeneratedImage,
    pub qa: QaPair,
    pub prompt: GenPrompt,
    pub ranking: Ranking,
}

/// One image-refiner round, `round` being 1-based. Pure: the caller commits the outcome.
pub fn image_round(
    round: usize,
    p: &GenPrompt,
    seed: u64,
    g: &Gallery,
    oracles: &OracleSuite,
    respondent: &dyn Respondent,
) -> Result<ImageOutcome> {
    if round == 0 || round > MAX_ROUNDS {
        return Err(Error::SessionComplete);
    }
    let (generated, ranking) = render_and_rank(p, seed, g, oracles)?;
    let qa = elicit_discrepancy(&generated, respondent)?;
    let prompt = refine_prompt(p, &qa, oracles)?;
    Ok(ImageOutcome {
        generated,
        qa,
        prompt,
        ranking,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::ImageId;
    use crate::oracles::{ImageGenerator, OracleError, OracleResult, Role, SyntheticWorld};
    use crate::respondent::SimulatedUser;
    use std::sync::Arc;

    struct Timeout;

    impl ImageGenerator for Timeout {
        fn generate(&self, _prompt: &str, _seed: u64) -> OracleResult<ImageHandle> {
            Err(OracleError::Transport {
                role: Role::ImageGenerator,
                attempts: 4,
                message: "timed out".into(),
            })
        }

        fn image_bytes(&self, _handle: &ImageHandle) -> Option<Vec<u8>> {
            None
        }
    }

    fn world(bits: usize) -> (SyntheticWorld, OracleSuite) {
        let w = SyntheticWorld::new(bits);
        (w.clone(), OracleSuite::synthetic(w))
    }

    #[test]
    fn generated_embedding_matches_gallery_image() {
        let (w, s) = world(2);
        let g = w.gallery();
        let gen = generate_image(&GenPrompt::initial("color=red; shape=cube"), 0, g.dim(), &s).unwrap();
        let idx = g.index_of(&ImageId::new("img_11")).unwrap();
        assert_eq!(gen.embedding, g.entry(idx).embedding);
    }

    #[test]
    fn empty_prompt_and_generator_failure() {
        let (_, mut s) = world(2);
        assert!(matches!(
            generate_image(&GenPrompt::initial(" "), 0, 3, &s),
            Err(Error::InvalidParams(_))
        ));
        s.image_generator = Arc::new(Timeout);
        match generate_image(&GenPrompt::initial("x"), 0, 3, &s) {
            Err(Error::Oracle(OracleError::Transport { attempts, .. })) => assert_eq!(attempts, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prompt_patching() {
        let (w, s) = world(2);
        let p = GenPrompt::initial("object; color=red; shape=sphere");
        let qa = QaPair {
            question: DISCREPANCY_QUESTION.into(),
            answer: "shape should be cube".into(),
            phase: QaPhase::Discrepancy,
        };
        let next = refine_prompt(&p, &qa, &s).unwrap();
        assert_eq!(w.parse_facts(&next.text), w.parse_facts("color=red; shape=cube"));
        assert_eq!(next.revision, 1);

        let conflicting = QaPair {
            answer: "shape: cube not sphere; shape: sphere not cube".into(),
            ..qa.clone()
        };
        let next = refine_prompt(&p, &conflicting, &s).unwrap();
        assert_eq!(w.parse_facts(&next.text).0[1], Some(false));

        let none = QaPair {
            answer: NO_DIFFERENCES.into(),
            ..qa
        };
        let same = refine_prompt(&p, &none, &s).unwrap();
        assert_eq!((same.text.as_str(), same.revision), (p.text.as_str(), 1));
    }

    #[test]
    fn exact_opening_description_ranks_target_first() {
        let (w, s) = world(4);
        let g = w.gallery();
        let target = w.image_id(11);
        let user = SimulatedUser::new(s.user_simulator.as_ref(), &target);
        let caption = w.caption(&w.assignment(11));
        let out = image_round(1, &GenPrompt::initial(caption), 0, &g, &s, &user).unwrap();
        assert_eq!(out.ranking.items[0].id, target);
        assert_eq!(out.qa.answer, NO_DIFFERENCES);
        assert!(matches!(
            image_round(11, &out.prompt, 0, &g, &s, &user),
            Err(Error::SessionComplete)
        ));
    }
}
