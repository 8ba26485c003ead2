//! Instruction wording sent to the expert model.
//!
//! Every template is a system message. The matching user message is built by
//! the caller and always ends with a `# ...` header followed by the material
//! the expert should act on, so scripted backends can key on that tail.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    pub subtopic: String,
    pub group: String,
    pub diagnose: String,
    pub feedback: String,
    pub combine: String,
    pub paraphrase: String,
}

pub const EDIT_GRAMMAR_HELP: &str = "\
Express every change as an edit block:
<<EDIT action=ACTION level=LEVEL section=\"Section title\">>
new content
<<END>>
ACTION is add, edit or delete. LEVEL is section or subsection. Subsection edits also carry subsection=\"Subsection title\". Delete blocks have no content.";

impl Default for Templates {
    fn default() -> Self {
        Self {
            subtopic: "You label exam questions. Reply with one short sub-topic for the question, on a single line, and nothing else.".into(),
            group: "You organise sub-topics into broader topics. Group the numbered items into at most {l} topics. Reply with one line per item in the form `<item index> -> <topic index>: <topic label>`, using topic indices 1 to {l}.".into(),
            diagnose: "You review a model's mistake. Explain in one or two sentences what guidance the instructions were missing that would have led to the correct answer.".into(),
            feedback: format!(
                "You improve instructions for a model that answers questions. Study the questions it got wrong, its reasoning, its answers and the correct answers. Propose changes to the instructions that fix the underlying gap rather than the individual questions. Avoid repeating edits from the history that did not help.\n\n{EDIT_GRAMMAR_HELP}"
            ),
            combine: format!(
                "You merge several proposed changes to a set of instructions into one update that generalises across them. Check it against the additional incorrect examples. Reply with between one and three edit blocks.\n\n{EDIT_GRAMMAR_HELP}"
            ),
            paraphrase: "You are given a sentence, you have to generate {n} paraphrases of the sentence, make sure that the core content of each paraphrase is same, you can use add, subtract or change words. Reply with a numbered list, one paraphrase per line.".into(),
        }
    }
}

/// Replaces `{name}` placeholders.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_replaces_every_occurrence() {
        assert_eq!(fill("{l} then {l}, {x}", &[("l", "5")]), "5 then 5, {x}");
    }

    #[test]
    fn paraphrase_default_mentions_count() {
        let t = Templates::default();
        assert!(fill(&t.paraphrase, &[("n", "30")])
            .starts_with("You are given a sentence, you have to generate 30 paraphrases"));
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let t: Templates = serde_json::from_str(r#"{"diagnose": "custom"}"#).unwrap();
        assert_eq!(t.diagnose, "custom");
        assert_eq!(t.group, Templates::default().group);
    }
}
