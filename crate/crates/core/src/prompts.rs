//! Prompt templates with `{{Slot}}` placeholders.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} has no value for slot {{{{{slot}}}}}")]
    MissingSlot { template: &'static str, slot: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    /// Question to assertion plan plus strategy.
    Decompose,
    /// Assertions to schema triples.
    Schema,
    /// Evidence chains to answer.
    Generate,
    /// Ground-truth path to assertions.
    PathAssertions,
    /// Question to retrieval strategy.
    Strategy,
    /// Masked walk to sentences plus synthetic question.
    Synthesize,
}

impl PromptKind {
    pub fn name(self) -> &'static str {
        match self {
            PromptKind::Decompose => "decompose",
            PromptKind::Schema => "schema",
            PromptKind::Generate => "generate",
            PromptKind::PathAssertions => "assertions",
            PromptKind::Strategy => "strategy",
            PromptKind::Synthesize => "synthesize",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            PromptKind::Decompose => include_str!("../assets/prompts/decompose.txt"),
            PromptKind::Schema => include_str!("../assets/prompts/schema.txt"),
            PromptKind::Generate => include_str!("../assets/prompts/generate.txt"),
            PromptKind::PathAssertions => include_str!("../assets/prompts/assertions.txt"),
            PromptKind::Strategy => include_str!("../assets/prompts/strategy.txt"),
            PromptKind::Synthesize => include_str!("../assets/prompts/synthesize.txt"),
        }
    }

    pub fn default_examples(self) -> &'static str {
        match self {
            PromptKind::Decompose => include_str!("../assets/prompts/decompose_examples.txt"),
            PromptKind::Schema => include_str!("../assets/prompts/schema_examples.txt"),
            PromptKind::Strategy => include_str!("../assets/prompts/strategy_examples.txt"),
            PromptKind::Synthesize => include_str!("../assets/prompts/synthesize_examples.txt"),
            PromptKind::Generate | PromptKind::PathAssertions => "",
        }
    }

    /// Fills every `{{Slot}}`. `Examples` falls back to the shipped examples.
    pub fn render(self, slots: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::new();
        let mut rest = self.template();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after.find("}}").expect("template slots are closed");
            let slot = &after[..end];
            let value = slots
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| *v)
                .or_else(|| (slot == "Examples").then(|| self.default_examples().trim_end()));
            match value {
                Some(v) => out.push_str(v),
                None => {
                    return Err(PromptError::MissingSlot {
                        template: self.name(),
                        slot: slot.to_string(),
                    })
                }
            }
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_fills_query_and_examples() {
        let p = PromptKind::Decompose
            .render(&[("Query", "which airport to fly into rome")])
            .unwrap();
        assert!(p.contains("which airport to fly into rome"));
        assert!(p.contains("Output: (\"the capital of norway is [ENT1]\",), Precision"));
        assert!(!p.contains("{{"));
    }

    #[test]
    fn missing_slot_is_reported() {
        let err = PromptKind::Generate.render(&[("Question", "q")]).unwrap_err();
        assert!(err.to_string().contains("Knowledge Structure Graph"));
    }

    #[test]
    fn every_template_renders_with_its_slots() {
        let all = [
            ("Examples", "e"),
            ("Query", "q"),
            ("Assertions", "a"),
            ("Knowledge Structure Graph", "g"),
            ("Question", "q"),
            ("Answer", ""),
            ("Triples", "t"),
            ("Answer Entity", "[ENT1]"),
        ];
        for kind in [
            PromptKind::Decompose,
            PromptKind::Schema,
            PromptKind::Generate,
            PromptKind::PathAssertions,
            PromptKind::Strategy,
            PromptKind::Synthesize,
        ] {
            assert!(!kind.render(&all).unwrap().contains("{{"), "{}", kind.name());
        }
    }
}
