//! Deterministic stand-in for every model role.
//!
//! Images are assignments of `b` binary attributes. Text is parsed for
//! `attribute=value` style facts; embeddings put `+1` on a true attribute,
//! `-1` on a false one, `0` on an unasserted one, plus a constant `1` in a
//! trailing bias component so that a fact-free description still encodes to
//! a unit vector. A full assignment and its canonical caption therefore map
//! to the same embedding, and a partial description scores every image by
//! how many of its facts agree.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ImageEncoder, ImageGenerator, ImageHandle, LanguageModel, OracleError, OracleResult, Prompt,
    Role, TextEncoder, UserSimulator,
};
use crate::gallery::{EmbeddingVector, Gallery, GalleryEntry, ImageId};

/// Discrepancy answer when the generated image matches the target.
pub const NO_DIFFERENCES: &str = "no differences";

const BASE_TEXT: &str = "object";

const NAMED_ATTRIBUTES: &[(&str, &str, &str)] = &[
    ("color", "red", "blue"),
    ("shape", "cube", "sphere"),
    ("size", "large", "small"),
    ("texture", "smooth", "rough"),
    ("lighting", "bright", "dark"),
    ("setting", "indoor", "outdoor"),
    ("material", "metal", "wood"),
    ("pattern", "striped", "plain"),
    ("count", "single", "multiple"),
    ("view", "closeup", "wide"),
    ("season", "summer", "winter"),
    ("time", "day", "night"),
];

const FILLERS: &[&str] = &["is", "be", "should", "it", "its", "was", "are"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Attribute {
    pub name: String,
    /// `values[0]` is the "true" value, `values[1]` the "false" one.
    pub values: [String; 2],
}

impl Attribute {
    pub fn value(&self, v: bool) -> &str {
        if v {
            &self.values[0]
        } else {
            &self.values[1]
        }
    }
}

/// Per-attribute assertion: `Some(true)`, `Some(false)` or unasserted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Facts(pub Vec<Option<bool>>);

impl Facts {
    pub fn empty(bits: usize) -> Self {
        Facts(vec![None; bits])
    }

    pub fn asserted(&self) -> usize {
        self.0.iter().filter(|f| f.is_some()).count()
    }

    pub fn is_full(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }

    /// Overwrites with every fact asserted in `newer`.
    pub fn merge(&mut self, newer: &Facts) {
        for (slot, new) in self.0.iter_mut().zip(&newer.0) {
            if new.is_some() {
                *slot = *new;
            }
        }
    }

    /// Whether a full assignment agrees with every asserted fact.
    pub fn consistent_with(&self, full: &Facts) -> bool {
        self.0
            .iter()
            .zip(&full.0)
            .all(|(f, v)| f.is_none() || f == v)
    }

    /// Attributes on which `self` differs from `target`, unasserted counting as different.
    pub fn distance(&self, target: &Facts) -> usize {
        self.0.iter().zip(&target.0).filter(|(a, b)| a != b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticWorld {
    bits: usize,
    diffs_per_answer: usize,
    attributes: Vec<Attribute>,
}

impl SyntheticWorld {
    pub const DEFAULT_DIFFS_PER_ANSWER: usize = 2;

    pub fn new(bits: usize) -> Self {
        assert!((1..=24).contains(&bits), "attribute bits must be in 1..=24");
        let attributes = (0..bits)
            .map(|j| match NAMED_ATTRIBUTES.get(j) {
                Some(&(n, t, f)) => Attribute {
                    name: n.into(),
                    values: [t.into(), f.into()],
                },
                None => Attribute {
                    name: format!("attr{j}"),
                    values: ["yes".into(), "no".into()],
                },
            })
            .collect();
        SyntheticWorld {
            bits,
            diffs_per_answer: Self::DEFAULT_DIFFS_PER_ANSWER,
            attributes,
        }
    }

    /// How many differences the simulated user reports per discrepancy answer.
    pub fn with_diffs_per_answer(mut self, n: usize) -> Self {
        self.diffs_per_answer = n.max(1);
        self
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn diffs_per_answer(&self) -> usize {
        self.diffs_per_answer
    }

    pub fn dim(&self) -> usize {
        self.bits + 1
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn image_count(&self) -> usize {
        1 << self.bits
    }

    /// Attribute `j` of image `index` is bit `bits - 1 - j`, so ids sort like indices.
    pub fn assignment(&self, index: usize) -> Facts {
        Facts(
            (0..self.bits)
                .map(|j| Some((index >> (self.bits - 1 - j)) & 1 == 1))
                .collect(),
        )
    }

    pub fn pattern(&self, facts: &Facts) -> String {
        facts
            .0
            .iter()
            .map(|f| match f {
                Some(true) => '1',
                Some(false) => '0',
                None => '?',
            })
            .collect()
    }

    fn facts_from_pattern(&self, pattern: &str) -> Option<Facts> {
        if pattern.len() != self.bits {
            return None;
        }
        pattern
            .chars()
            .map(|c| match c {
                '1' => Some(Some(true)),
                '0' => Some(Some(false)),
                '?' => Some(None),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(Facts)
    }

    pub fn image_id(&self, index: usize) -> ImageId {
        ImageId::new(format!("img_{}", self.pattern(&self.assignment(index))))
    }

    pub fn facts_of_id(&self, id: &ImageId) -> Option<Facts> {
        let f = self.facts_from_pattern(id.as_str().strip_prefix("img_")?)?;
        f.is_full().then_some(f)
    }

    pub fn handle_for(&self, facts: &Facts) -> ImageHandle {
        let prefix = if facts.is_full() { "img" } else { "gen" };
        ImageHandle(format!("{prefix}_{}", self.pattern(facts)))
    }

    pub fn facts_of_handle(&self, handle: &ImageHandle) -> Option<Facts> {
        let s = handle.as_str();
        let pattern = s.strip_prefix("img_").or_else(|| s.strip_prefix("gen_"))?;
        self.facts_from_pattern(pattern)
    }

    pub fn caption(&self, facts: &Facts) -> String {
        self.render(BASE_TEXT, facts)
    }

    /// The fact-free opening description used for simulated sessions.
    pub fn initial_description(&self) -> String {
        BASE_TEXT.to_string()
    }

    pub fn raw_embedding(&self, facts: &Facts) -> Vec<f32> {
        let mut v: Vec<f32> = facts
            .0
            .iter()
            .map(|f| match f {
                Some(true) => 1.0,
                Some(false) => -1.0,
                None => 0.0,
            })
            .collect();
        v.push(1.0);
        v
    }

    pub fn embed(&self, facts: &Facts) -> EmbeddingVector {
        EmbeddingVector::normalized(&self.raw_embedding(facts), "synthetic")
            .expect("bias component keeps the norm positive")
    }

    /// All `2^bits` images in index order.
    pub fn gallery(&self) -> Gallery {
        self.gallery_from_indices((0..self.image_count()).collect())
    }

    /// `n` distinct images drawn with `seed`, kept in index order.
    pub fn sampled_gallery(&self, n: usize, seed: u64) -> Gallery {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n.min(self.image_count());
        let mut idx = rand::seq::index::sample(&mut rng, self.image_count(), n).into_vec();
        idx.sort_unstable();
        self.gallery_from_indices(idx)
    }

    fn gallery_from_indices(&self, indices: Vec<usize>) -> Gallery {
        let entries = indices
            .into_iter()
            .map(|i| {
                let facts = self.assignment(i);
                GalleryEntry {
                    id: self.image_id(i),
                    caption: self.caption(&facts),
                    embedding: self.embed(&facts),
                }
            })
            .collect();
        Gallery::from_entries(entries).expect("synthetic ids are unique")
    }

    fn attribute_index(&self, token: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == token)
    }

    fn value_of(&self, attr: usize, token: &str) -> Option<bool> {
        let a = &self.attributes[attr];
        if token == a.values[0] {
            Some(true)
        } else if token == a.values[1] {
            Some(false)
        } else {
            None
        }
    }

    /// Facts stated as `<attribute> [is|should be|=|:] <value>`; later statements win.
    pub fn parse_facts(&self, text: &str) -> Facts {
        let tokens = tokenize(text);
        let mut facts = Facts::empty(self.bits);
        for (i, tok) in tokens.iter().enumerate() {
            let Some(attr) = self.attribute_index(tok) else {
                continue;
            };
            let mut j = i + 1;
            while j < tokens.len() && FILLERS.contains(&tokens[j].as_str()) {
                j += 1;
            }
            if let Some(v) = tokens.get(j).and_then(|t| self.value_of(attr, t)) {
                facts.0[attr] = Some(v);
            }
        }
        facts
    }

    /// First attribute named in a question.
    pub fn question_attribute(&self, question: &str) -> Option<usize> {
        tokenize(question)
            .iter()
            .find_map(|t| self.attribute_index(t))
    }

    pub fn question_for(&self, attr: usize) -> String {
        let a = &self.attributes[attr];
        format!(
            "What is the {} of the target image: {} or {}?",
            a.name, a.values[0], a.values[1]
        )
    }

    pub fn render(&self, base: &str, facts: &Facts) -> String {
        let mut parts: Vec<String> = Vec::new();
        let base = base.trim();
        parts.push(if base.is_empty() { BASE_TEXT } else { base }.to_string());
        for (a, f) in self.attributes.iter().zip(&facts.0) {
            if let Some(v) = f {
                parts.push(format!("{}={}", a.name, a.value(*v)));
            }
        }
        parts.join("; ")
    }

    /// The `;`-separated segments of `text` that state no facts.
    pub fn base_text(&self, text: &str) -> String {
        text.split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty() && self.parse_facts(s).asserted() == 0)
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// Attributes where `generated` disagrees with `target`, lowest index first.
    pub fn differences(&self, target: &Facts, generated: &Facts) -> Vec<usize> {
        (0..self.bits)
            .filter(|&j| target.0[j] != generated.0[j])
            .collect()
    }

    pub fn describe_differences(&self, target: &Facts, generated: &Facts) -> String {
        let diffs = self.differences(target, generated);
        if diffs.is_empty() {
            return NO_DIFFERENCES.to_string();
        }
        diffs
            .into_iter()
            .take(self.diffs_per_answer)
            .map(|j| {
                let a = &self.attributes[j];
                let want = target.0[j].map(|v| a.value(v)).unwrap_or("unspecified");
                let have = generated.0[j].map(|v| a.value(v)).unwrap_or("unspecified");
                format!("{}: {} not {}", a.name, want, have)
            })
            .collect::<Vec<_>>()
            .join("; ")
    }

    /// A small SVG that lists the asserted facts and records the pattern.
    pub fn render_svg(&self, facts: &Facts) -> Vec<u8> {
        let mut svg = String::new();
        let lines: Vec<String> = self
            .attributes
            .iter()
            .zip(&facts.0)
            .filter_map(|(a, f)| f.map(|v| format!("{}={}", a.name, a.value(v))))
            .collect();
        let height = 24 + 18 * lines.len().max(1);
        let _ = write!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="240" height="{height}" data-pattern="{}">"#,
            self.pattern(facts)
        );
        svg.push_str(r##"<rect width="100%" height="100%" fill="#f4f4f4"/>"##);
        for (i, line) in lines.iter().enumerate() {
            let _ = write!(
                svg,
                r#"<text x="12" y="{}" font-family="monospace" font-size="14">{line}</text>"#,
                24 + 18 * i
            );
        }
        svg.push_str("</svg>");
        svg.into_bytes()
    }

    pub fn facts_from_bytes(&self, bytes: &[u8]) -> Option<Facts> {
        let s = std::str::from_utf8(bytes).ok()?;
        let start = s.find("data-pattern=\"")? + "data-pattern=\"".len();
        let end = s[start..].find('"')? + start;
        self.facts_from_pattern(&s[start..end])
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Serves every role from one [`SyntheticWorld`]. Pure and reentrant.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    world: SyntheticWorld,
}

impl SyntheticOracle {
    pub fn new(world: SyntheticWorld) -> Self {
        SyntheticOracle { world }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn known_facts(&self, prompt: &Prompt) -> Facts {
        let mut known = self.world.parse_facts(prompt.binding("description"));
        known.merge(&self.world.parse_facts(prompt.binding("history")));
        known
    }

    /// Highest-variance unknown attribute among the context captions.
    fn ask(&self, prompt: &Prompt) -> String {
        let w = &self.world;
        let known = self.known_facts(prompt);
        let rejected: Vec<usize> = prompt
            .binding("rejected")
            .lines()
            .filter_map(|l| w.question_attribute(l))
            .collect();
        let context: Vec<Facts> = prompt
            .binding("context_captions")
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| w.parse_facts(l))
            .collect();

        let mut best: Option<(usize, f64)> = None;
        for attr in 0..w.bits() {
            if known.0[attr].is_some() || rejected.contains(&attr) {
                continue;
            }
            let stated: Vec<bool> = context.iter().filter_map(|f| f.0[attr]).collect();
            let variance = if stated.is_empty() {
                0.0
            } else {
                let p = stated.iter().filter(|&&v| v).count() as f64 / stated.len() as f64;
                p * (1.0 - p)
            };
            if best.is_none_or(|(_, v)| variance > v) {
                best = Some((attr, variance));
            }
        }
        let attr = best
            .map(|(a, _)| a)
            .or_else(|| known.0.iter().position(Option::is_none))
            .unwrap_or(0);
        w.question_for(attr)
    }

    fn judge(&self, prompt: &Prompt) -> String {
        let w = &self.world;
        let known = self.known_facts(prompt);
        match w
            .question_attribute(prompt.binding("question"))
            .and_then(|a| known.0[a].map(|v| (a, v)))
        {
            Some((a, v)) => {
                let attr = &w.attributes()[a];
                format!(
                    "Yes, the description already says {}={}.",
                    attr.name,
                    attr.value(v)
                )
            }
            None => "Uncertain".to_string(),
        }
    }

    fn summarize(&self, prompt: &Prompt) -> String {
        let w = &self.world;
        let description = prompt.binding("description");
        let answer = prompt.binding("answer");
        let mut facts = w.parse_facts(description);
        let mut new = w.parse_facts(answer);
        if new.asserted() == 0 {
            if let Some(attr) = w.question_attribute(prompt.binding("question")) {
                if let Some(v) = tokenize(answer).iter().find_map(|t| w.value_of(attr, t)) {
                    new.0[attr] = Some(v);
                }
            }
        }
        facts.merge(&new);
        w.render(&w.base_text(description), &facts)
    }

    fn patch_prompt(&self, prompt: &Prompt) -> String {
        let w = &self.world;
        let current = prompt.binding("prompt");
        let diff = prompt.binding("discrepancy");
        if diff.trim().eq_ignore_ascii_case(NO_DIFFERENCES) {
            return current.to_string();
        }
        let mut facts = w.parse_facts(current);
        facts.merge(&w.parse_facts(diff));
        w.render(&w.base_text(current), &facts)
    }

    fn target_facts(&self, target: &ImageId) -> OracleResult<Facts> {
        self.world
            .facts_of_id(target)
            .ok_or_else(|| OracleError::Unavailable {
                role: Role::UserSimulator,
                message: format!("unknown target {target}"),
            })
    }
}

impl TextEncoder for SyntheticOracle {
    fn encode_text(&self, text: &str) -> OracleResult<EmbeddingVector> {
        Ok(self.world.embed(&self.world.parse_facts(text)))
    }
}

impl ImageEncoder for SyntheticOracle {
    fn encode_image(&self, handle: &ImageHandle) -> OracleResult<EmbeddingVector> {
        let facts = self
            .world
            .facts_of_handle(handle)
            .ok_or_else(|| OracleError::Malformed {
                role: Role::ImageEncoder,
                message: format!("unknown image handle {handle}"),
            })?;
        Ok(self.world.embed(&facts))
    }
}

impl LanguageModel for SyntheticOracle {
    fn complete(&self, prompt: &Prompt) -> OracleResult<String> {
        match prompt.template.as_str() {
            "questioner" => Ok(self.ask(prompt)),
            "filter" => Ok(self.judge(prompt)),
            "summarizer" => Ok(self.summarize(prompt)),
            "prompt_refiner" => Ok(self.patch_prompt(prompt)),
            other => Err(OracleError::Unavailable {
                role: Role::Questioner,
                message: format!("synthetic model has no behaviour for template {other:?}"),
            }),
        }
    }
}

impl UserSimulator for SyntheticOracle {
    fn answer(&self, target: &ImageId, question: &str) -> OracleResult<String> {
        let facts = self.target_facts(target)?;
        Ok(match self.world.question_attribute(question) {
            Some(a) => {
                let attr = &self.world.attributes()[a];
                format!("{}={}", attr.name, attr.value(facts.0[a].unwrap_or(false)))
            }
            None => "I am not sure.".to_string(),
        })
    }

    fn describe_differences(
        &self,
        target: &ImageId,
        generated: &ImageHandle,
        _question: &str,
    ) -> OracleResult<String> {
        let want = self.target_facts(target)?;
        let have = self
            .world
            .facts_of_handle(generated)
            .ok_or_else(|| OracleError::Malformed {
                role: Role::UserSimulator,
                message: format!("unknown image handle {generated}"),
            })?;
        Ok(self.world.describe_differences(&want, &have))
    }
}

impl ImageGenerator for SyntheticOracle {
    fn generate(&self, prompt: &str, _seed: u64) -> OracleResult<ImageHandle> {
        Ok(self.world.handle_for(&self.world.parse_facts(prompt)))
    }

    fn image_bytes(&self, handle: &ImageHandle) -> Option<Vec<u8>> {
        self.world
            .facts_of_handle(handle)
            .map(|f| self.world.render_svg(&f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::TemplateStore;
    use crate::vecsearch::rank_by_text;

    fn facts(w: &SyntheticWorld, s: &str) -> Facts {
        w.parse_facts(s)
    }

    #[test]
    fn parses_facts_in_several_phrasings() {
        let w = SyntheticWorld::new(4);
        let f = facts(&w, "object; color=red; shape is sphere; size should be small");
        assert_eq!(f.0, vec![Some(true), Some(false), Some(false), None]);
        let g = facts(&w, "shape: cube not sphere; shape: sphere not cube");
        assert_eq!(g.0[1], Some(false), "later statement wins");
        assert_eq!(facts(&w, "a red cube").asserted(), 0);
    }

    #[test]
    fn canonical_caption_encodes_to_image_embedding() {
        let w = SyntheticWorld::new(5);
        let oracle = SyntheticOracle::new(w.clone());
        let g = w.gallery();
        for (i, e) in g.entries().iter().enumerate() {
            assert_eq!(oracle.encode_text(&e.caption).unwrap(), e.embedding);
            let r = rank_by_text(&g, &oracle.encode_text(&e.caption).unwrap()).unwrap();
            assert_eq!(r.items[0].index, i);
            assert!((r.items[0].score - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn partial_fact_set_is_normalized_sum_of_directions() {
        let w = SyntheticWorld::new(4);
        let oracle = SyntheticOracle::new(w);
        let v = oracle.encode_text("object; color=blue; size=large").unwrap();
        // independent recomputation: -e0 + e2 + bias, scaled by 1/sqrt(3)
        let s = 1.0 / 3f64.sqrt();
        let expected = [-s, 0.0, s, 0.0, s];
        for (a, b) in v.as_slice().iter().zip(expected) {
            assert!((*a as f64 - b).abs() < 1e-7);
        }
    }

    #[test]
    fn embedding_map_is_injective() {
        let w = SyntheticWorld::new(6);
        let mut seen = std::collections::HashSet::new();
        for i in 0..w.image_count() {
            let bits: Vec<u32> = w.embed(&w.assignment(i)).as_slice().iter().map(|x| x.to_bits()).collect();
            assert!(seen.insert(bits));
        }
    }

    #[test]
    fn questioner_prefers_disagreeing_attribute() {
        let w = SyntheticWorld::new(4);
        let oracle = SyntheticOracle::new(w.clone());
        // captions agree on everything except colour
        let ctx = ["object; color=red; shape=cube; size=small; texture=rough",
                   "object; color=blue; shape=cube; size=small; texture=rough"].join("\n");
        let p = TemplateStore::builtin()
            .render("questioner", [
                ("description", "object"),
                ("context_captions", ctx.as_str()),
                ("history", ""),
                ("rejected", ""),
            ])
            .unwrap();
        let q = oracle.complete(&p).unwrap();
        assert!(q.contains("color"), "{q}");
    }

    #[test]
    fn filter_answers_known_facts_and_is_uncertain_otherwise() {
        let w = SyntheticWorld::new(4);
        let oracle = SyntheticOracle::new(w.clone());
        let store = TemplateStore::builtin();
        let known = store
            .render("filter", [("question", w.question_for(0).as_str()), ("description", "object; color=red"), ("history", "")])
            .unwrap();
        assert_ne!(oracle.complete(&known).unwrap().trim().to_lowercase(), "uncertain");
        let unknown = store
            .render("filter", [("question", w.question_for(1).as_str()), ("description", "object; color=red"), ("history", "")])
            .unwrap();
        assert_eq!(oracle.complete(&unknown).unwrap(), "Uncertain");
    }

    #[test]
    fn simulator_answers_from_target() {
        let w = SyntheticWorld::new(4);
        let oracle = SyntheticOracle::new(w.clone());
        let target = ImageId::new("img_1011");
        assert_eq!(oracle.answer(&target, &w.question_for(1)).unwrap(), "shape=sphere");
        assert_eq!(oracle.answer(&target, &w.question_for(3)).unwrap(), "texture=smooth");
        assert!(oracle.answer(&ImageId::new("bogus"), "q").is_err());
    }

    #[test]
    fn discrepancy_is_set_difference() {
        let w = SyntheticWorld::new(2);
        let oracle = SyntheticOracle::new(w.clone());
        // target {red, cube}, generated {red, sphere}
        let target = ImageId::new("img_11");
        let generated = w.handle_for(&facts(&w, "color=red; shape=sphere"));
        assert_eq!(
            oracle.describe_differences(&target, &generated, "").unwrap(),
            "shape: cube not sphere"
        );
        let same = w.handle_for(&facts(&w, "color=red; shape=cube"));
        assert_eq!(oracle.describe_differences(&target, &same, "").unwrap(), NO_DIFFERENCES);
    }

    #[test]
    fn generator_handles_are_canonical_and_stable() {
        let w = SyntheticWorld::new(2);
        let oracle = SyntheticOracle::new(w.clone());
        let h = oracle.generate("color=red; shape=cube", 1).unwrap();
        assert_eq!(h.as_str(), "img_11");
        assert_eq!(oracle.generate("color=red; shape=cube", 1).unwrap(), h);
        assert_eq!(oracle.generate("object; shape=sphere", 9).unwrap().as_str(), "gen_?0");
        let bytes = oracle.image_bytes(&h).unwrap();
        assert_eq!(w.facts_from_bytes(&bytes), w.facts_of_handle(&h));
    }

    #[test]
    fn sampled_gallery_is_sorted_subset() {
        let w = SyntheticWorld::new(8);
        let g = w.sampled_gallery(40, 3);
        assert_eq!(g.len(), 40);
        let ids: Vec<_> = g.entries().iter().map(|e| e.id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }
}
