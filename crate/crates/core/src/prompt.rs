//! Sectioned prompt representation, markup rendering/parsing and the edit
//! grammar emitted by the expert model.
//!
//! A prompt renders as
//!
//! ```text
//! ## Introduction
//! Solve it.
//! ### Tips
//! Read carefully.
//!
//! ## Corner Cases
//! ...
//! ```
//!
//! Content lines that would otherwise look like a header (`## `, `### `) or
//! that start with a backslash are escaped with a leading `\` so that
//! [`parse_prompt`] is an exact inverse of [`SectionedPrompt::render`].

use std::fmt;

use fancy_regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// Title of the single section produced by [`SectionedPrompt::from_description`].
pub const INTRODUCTION: &str = "Introduction";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("prompt parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("target not found: {0}")]
    TargetNotFound(String),
    #[error("duplicate title: {0}")]
    DuplicateTitle(String),
    #[error("invariant violation: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EditParseError {
    #[error("malformed edit block ({message}):\n{block}")]
    Malformed { block: String, message: String },
    #[error("no well-formed edit blocks found")]
    Empty,
}

fn check_title(title: &str) -> Result<String, PromptError> {
    let t = title.trim();
    if t.is_empty() {
        return Err(PromptError::InvalidInput("title must be nonempty".into()));
    }
    if t.contains('\n') || t.contains('\r') {
        return Err(PromptError::InvalidInput(format!("title contains a line break: {t:?}")));
    }
    Ok(t.to_string())
}

/// Strips trailing whitespace from every line and drops leading/trailing
/// blank lines. Rendering is only injective on normalized content.
fn normalize_content(content: &str) -> String {
    let lines: Vec<&str> = content.lines().map(str::trim_end).collect();
    let start = lines.iter().position(|l| !l.is_empty());
    let end = lines.iter().rposition(|l| !l.is_empty());
    match (start, end) {
        (Some(s), Some(e)) => lines[s..=e].join("\n"),
        _ => String::new(),
    }
}

fn escape_line(line: &str) -> String {
    if line.starts_with("## ") || line.starts_with("### ") || line.starts_with('\\') {
        format!("\\{line}")
    } else {
        line.to_string()
    }
}

fn unescape_line(line: &str) -> &str {
    line.strip_prefix('\\').unwrap_or(line)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subsection {
    title: String,
    content: String,
}

impl Subsection {
    pub fn new(title: &str, content: &str) -> Result<Self, PromptError> {
        Ok(Self { title: check_title(title)?, content: normalize_content(content) })
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn content(&self) -> &str {
        &self.content
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Section {
    title: String,
    content: String,
    subsections: Vec<Subsection>,
}

impl Section {
    pub fn new(title: &str, content: &str) -> Result<Self, PromptError> {
        Ok(Self { title: check_title(title)?, content: normalize_content(content), subsections: Vec::new() })
    }

    pub fn with_subsections(title: &str, content: &str, subsections: Vec<Subsection>) -> Result<Self, PromptError> {
        let mut s = Self::new(title, content)?;
        for sub in subsections {
            s.push_subsection(sub)?;
        }
        Ok(s)
    }

    fn push_subsection(&mut self, sub: Subsection) -> Result<(), PromptError> {
        if self.subsection(&sub.title).is_some() {
            return Err(PromptError::DuplicateTitle(format!("{}/{}", self.title, sub.title)));
        }
        self.subsections.push(sub);
        Ok(())
    }

    pub fn title(&self) -> &str {
        &self.title
    }

    pub fn content(&self) -> &str {
        &self.content
    }

    pub fn subsections(&self) -> &[Subsection] {
        &self.subsections
    }

    pub fn subsection(&self, title: &str) -> Option<&Subsection> {
        self.subsections.iter().find(|s| s.title == title)
    }
}

/// An ordered, nonempty list of uniquely titled sections.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Section>", into = "Vec<Section>")]
pub struct SectionedPrompt {
    sections: Vec<Section>,
}

impl TryFrom<Vec<Section>> for SectionedPrompt {
    type Error = PromptError;

    fn try_from(sections: Vec<Section>) -> Result<Self, Self::Error> {
        Self::new(sections)
    }
}

impl From<SectionedPrompt> for Vec<Section> {
    fn from(p: SectionedPrompt) -> Self {
        p.sections
    }
}

impl SectionedPrompt {
    pub fn new(sections: Vec<Section>) -> Result<Self, PromptError> {
        if sections.is_empty() {
            return Err(PromptError::InvariantViolation("a prompt needs at least one section".into()));
        }
        for (i, s) in sections.iter().enumerate() {
            if sections[..i].iter().any(|o| o.title == s.title) {
                return Err(PromptError::DuplicateTitle(s.title.clone()));
            }
            for (j, sub) in s.subsections.iter().enumerate() {
                if s.subsections[..j].iter().any(|o| o.title == sub.title) {
                    return Err(PromptError::DuplicateTitle(format!("{}/{}", s.title, sub.title)));
                }
            }
        }
        Ok(Self { sections })
    }

    /// Initial prompt: one `Introduction` section holding the task description.
    pub fn from_description(task_description: &str) -> Result<Self, PromptError> {
        if task_description.trim().is_empty() {
            return Err(PromptError::InvalidInput("task description is empty".into()));
        }
        Self::new(vec![Section::new(INTRODUCTION, task_description)?])
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn section(&self, title: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.title == title)
    }

    pub fn render(&self) -> String {
        let mut blocks = Vec::with_capacity(self.sections.len());
        for s in &self.sections {
            let mut lines = vec![format!("## {}", s.title)];
            lines.extend(s.content.lines().filter(|_| !s.content.is_empty()).map(escape_line));
            for sub in &s.subsections {
                lines.push(format!("### {}", sub.title));
                lines.extend(sub.content.lines().map(escape_line));
            }
            blocks.push(lines.join("\n"));
        }
        blocks.join("\n\n")
    }

    /// Applies one edit, returning a new prompt; `self` is left untouched.
    pub fn apply_edit(&self, edit: &EditProposal) -> Result<Self, PromptError> {
        let mut sections = self.sections.clone();
        let find = |sections: &[Section], title: &str| {
            sections
                .iter()
                .position(|s| s.title == title)
                .ok_or_else(|| PromptError::TargetNotFound(format!("section {title:?}")))
        };
        let content = edit.content.as_deref().unwrap_or("");
        match (edit.action, edit.level) {
            (EditAction::Add, EditLevel::Section) => {
                if sections.iter().any(|s| s.title == edit.section_title) {
                    return Err(PromptError::DuplicateTitle(edit.section_title.clone()));
                }
                sections.push(Section::new(&edit.section_title, content)?);
            }
            (EditAction::Edit, EditLevel::Section) => {
                let i = find(&sections, &edit.section_title)?;
                sections[i].content = normalize_content(content);
            }
            (EditAction::Delete, EditLevel::Section) => {
                let i = find(&sections, &edit.section_title)?;
                if sections.len() == 1 {
                    return Err(PromptError::InvariantViolation("cannot delete the last remaining section".into()));
                }
                sections.remove(i);
            }
            (action, EditLevel::Subsection) => {
                let i = find(&sections, &edit.section_title)?;
                let sub_title = edit
                    .subsection_title
                    .as_deref()
                    .ok_or_else(|| PromptError::InvalidInput("subsection edit without subsection title".into()))?;
                let section = &mut sections[i];
                let pos = section.subsections.iter().position(|s| s.title == sub_title);
                match (action, pos) {
                    (EditAction::Add, None) => section.subsections.push(Subsection::new(sub_title, content)?),
                    (EditAction::Add, Some(_)) => {
                        return Err(PromptError::DuplicateTitle(format!("{}/{}", section.title, sub_title)))
                    }
                    (EditAction::Edit, Some(j)) => section.subsections[j].content = normalize_content(content),
                    (EditAction::Delete, Some(j)) => {
                        section.subsections.remove(j);
                    }
                    (_, None) => {
                        return Err(PromptError::TargetNotFound(format!(
                            "subsection {:?}/{:?}",
                            section.title, sub_title
                        )))
                    }
                }
            }
        }
        Self::new(sections)
    }

    /// Applies edits in order, stopping at the first failure.
    pub fn apply_edits(&self, edits: &[EditProposal]) -> Result<Self, PromptError> {
        edits.iter().try_fold(self.clone(), |p, e| p.apply_edit(e))
    }
}

impl fmt::Display for SectionedPrompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Inverse of [`SectionedPrompt::render`].
pub fn parse_prompt(text: &str) -> Result<SectionedPrompt, PromptError> {
    struct Open {
        title: String,
        content: Vec<String>,
        subsections: Vec<(String, Vec<String>)>,
    }

    fn close(open: Open, sections: &mut Vec<Section>, line: usize) -> Result<(), PromptError> {
        let mut section = Section::new(&open.title, &open.content.join("\n"))?;
        for (title, body) in open.subsections {
            section
                .push_subsection(Subsection::new(&title, &body.join("\n"))?)
                .map_err(|e| PromptError::Parse { line, message: e.to_string() })?;
        }
        if sections.iter().any(|s| s.title == section.title) {
            return Err(PromptError::Parse { line, message: format!("duplicate section title {:?}", section.title) });
        }
        sections.push(section);
        Ok(())
    }

    let mut sections = Vec::new();
    let mut open: Option<(Open, usize)> = None;
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(title) = raw.strip_prefix("## ") {
            if let Some((o, start)) = open.take() {
                close(o, &mut sections, start)?;
            }
            let title = check_title(title).map_err(|e| PromptError::Parse { line: lineno, message: e.to_string() })?;
            open = Some((Open { title, content: Vec::new(), subsections: Vec::new() }, lineno));
        } else if let Some(title) = raw.strip_prefix("### ") {
            let Some((o, _)) = open.as_mut() else {
                return Err(PromptError::Parse {
                    line: lineno,
                    message: "subsection header before any section header".into(),
                });
            };
            let title = check_title(title).map_err(|e| PromptError::Parse { line: lineno, message: e.to_string() })?;
            o.subsections.push((title, Vec::new()));
        } else {
            match open.as_mut() {
                Some((o, _)) => {
                    let line = unescape_line(raw).to_string();
                    match o.subsections.last_mut() {
                        Some((_, body)) => body.push(line),
                        None => o.content.push(line),
                    }
                }
                None if raw.trim().is_empty() => {}
                None => {
                    return Err(PromptError::Parse {
                        line: lineno,
                        message: "body text before the first \"## \" header".into(),
                    })
                }
            }
        }
    }
    match open {
        Some((o, start)) => close(o, &mut sections, start)?,
        None => return Err(PromptError::Parse { line: 1, message: "no sections found".into() }),
    }
    SectionedPrompt::new(sections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditAction {
    Add,
    Edit,
    Delete,
}

impl EditAction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Edit => "edit",
            Self::Delete => "delete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditLevel {
    Section,
    Subsection,
}

impl EditLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Section => "section",
            Self::Subsection => "subsection",
        }
    }
}

/// One structural edit proposed by the expert model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EditProposal {
    pub action: EditAction,
    pub level: EditLevel,
    pub section_title: String,
    pub subsection_title: Option<String>,
    pub content: Option<String>,
    pub rationale: Option<String>,
}

impl EditProposal {
    pub fn add_section(title: &str, content: &str) -> Self {
        Self {
            action: EditAction::Add,
            level: EditLevel::Section,
            section_title: title.to_string(),
            subsection_title: None,
            content: Some(content.to_string()),
            rationale: None,
        }
    }

    pub fn edit_section(title: &str, content: &str) -> Self {
        Self { action: EditAction::Edit, ..Self::add_section(title, content) }
    }

    pub fn delete_section(title: &str) -> Self {
        Self { action: EditAction::Delete, content: None, ..Self::add_section(title, "") }
    }

    pub fn subsection(action: EditAction, section: &str, sub: &str, content: Option<&str>) -> Self {
        Self {
            action,
            level: EditLevel::Subsection,
            section_title: section.to_string(),
            subsection_title: Some(sub.to_string()),
            content: content.map(str::to_string),
            rationale: None,
        }
    }

    /// Checks the field-presence rules.
    pub fn validate(&self) -> Result<(), String> {
        check_title(&self.section_title).map_err(|e| e.to_string())?;
        match (self.level, &self.subsection_title) {
            (EditLevel::Subsection, None) => return Err("subsection level needs a subsection title".into()),
            (EditLevel::Section, Some(_)) => return Err("section level forbids a subsection title".into()),
            (EditLevel::Subsection, Some(t)) => {
                check_title(t).map_err(|e| e.to_string())?;
            }
            _ => {}
        }
        let has_content = self.content.as_deref().is_some_and(|c| !c.trim().is_empty());
        match self.action {
            EditAction::Add | EditAction::Edit if !has_content => {
                Err(format!("{} requires content", self.action.as_str()))
            }
            EditAction::Delete if has_content => Err("delete forbids content".into()),
            _ => Ok(()),
        }
    }

    /// Serializes into the edit block grammar.
    pub fn to_block(&self) -> String {
        let mut open = format!(
            "<<EDIT action={} level={} section=\"{}\"",
            self.action.as_str(),
            self.level.as_str(),
            escape_attr(&self.section_title)
        );
        if let Some(sub) = &self.subsection_title {
            open.push_str(&format!(" subsection=\"{}\"", escape_attr(sub)));
        }
        open.push_str(">>\n");
        if let Some(c) = &self.content {
            if !c.is_empty() {
                open.push_str(c);
                open.push('\n');
            }
        }
        open.push_str("<<END>>");
        open
    }

    /// One-line summary used in history entries.
    pub fn summary(&self) -> String {
        let target = match &self.subsection_title {
            Some(sub) => format!("{}/{}", self.section_title, sub),
            None => self.section_title.clone(),
        };
        let mut s = format!("{} {} \"{}\"", self.action.as_str(), self.level.as_str(), target);
        if let Some(c) = &self.content {
            let flat = c.split_whitespace().collect::<Vec<_>>().join(" ");
            if !flat.is_empty() {
                s.push_str(": ");
                s.push_str(&flat);
            }
        }
        s
    }
}

fn escape_attr(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn unescape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            if let Some(n) = chars.next() {
                out.push(n);
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn open_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"^<<EDIT action=(\S+) level=(\S+) section="((?:[^"\\]|\\.)*)"(?: subsection="((?:[^"\\]|\\.)*)")?>>$"#,
        )
        .expect("static regex")
    })
}

/// Extracts every edit block from free-form expert output, in order.
pub fn parse_edits(expert_output: &str) -> Result<Vec<EditProposal>, EditParseError> {
    let lines: Vec<&str> = expert_output.lines().collect();
    let mut edits = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let head = lines[i].trim();
        if !head.starts_with("<<EDIT") {
            i += 1;
            continue;
        }
        let end = lines[i + 1..].iter().position(|l| l.trim() == "<<END>>").map(|p| p + i + 1);
        let Some(end) = end else {
            return Err(EditParseError::Malformed {
                block: lines[i..].join("\n"),
                message: "unterminated block".into(),
            });
        };
        let block = lines[i..=end].join("\n");
        let malformed = |message: String| EditParseError::Malformed { block: block.clone(), message };
        let caps = open_line_re()
            .captures(head)
            .map_err(|e| malformed(e.to_string()))?
            .ok_or_else(|| malformed("unrecognized opening line".into()))?;
        let action = match &caps[1] {
            "add" => EditAction::Add,
            "edit" => EditAction::Edit,
            "delete" => EditAction::Delete,
            other => return Err(malformed(format!("unknown action {other:?}"))),
        };
        let level = match &caps[2] {
            "section" => EditLevel::Section,
            "subsection" => EditLevel::Subsection,
            other => return Err(malformed(format!("unknown level {other:?}"))),
        };
        let body = lines[i + 1..end].join("\n");
        let edit = EditProposal {
            action,
            level,
            section_title: unescape_attr(&caps[3]),
            subsection_title: caps.get(4).map(|m| unescape_attr(m.as_str())),
            content: match action {
                EditAction::Delete if body.trim().is_empty() => None,
                _ => Some(body),
            },
            rationale: None,
        };
        edit.validate().map_err(malformed)?;
        edits.push(edit);
        i = end + 1;
    }
    if edits.is_empty() {
        Err(EditParseError::Empty)
    } else {
        Ok(edits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_sections() -> SectionedPrompt {
        SectionedPrompt::new(vec![
            Section::new("Introduction", "Classify the text.").unwrap(),
            Section::new("Description", "Hate speech targets a group.").unwrap(),
            Section::with_subsections(
                "Background Knowledge",
                "Context matters.",
                vec![Subsection::new("Religion", "Attacks on faith count.").unwrap()],
            )
            .unwrap(),
            Section::new("Corner Cases", "Profanity alone is not hate speech.").unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn init_from_description() {
        let text = "You have to solve the following science question.";
        let p = SectionedPrompt::from_description(text).unwrap();
        assert_eq!(p.sections().len(), 1);
        assert_eq!(p.sections()[0].title(), "Introduction");
        assert_eq!(p.sections()[0].content(), text);
        assert!(p.sections()[0].subsections().is_empty());

        let p = SectionedPrompt::from_description("x").unwrap();
        assert_eq!(p.sections()[0].content(), "x");

        assert!(matches!(SectionedPrompt::from_description("  "), Err(PromptError::InvalidInput(_))));
    }

    #[test]
    fn render_single_section() {
        let p = SectionedPrompt::new(vec![Section::new("Introduction", "Solve it.").unwrap()]).unwrap();
        assert_eq!(p.render(), "## Introduction\nSolve it.");
    }

    #[test]
    fn render_four_headers_in_order() {
        let r = four_sections().render();
        let headers: Vec<&str> = r.lines().filter(|l| l.starts_with("## ")).collect();
        assert_eq!(headers, vec!["## Introduction", "## Description", "## Background Knowledge", "## Corner Cases"]);
        assert!(r.contains("### Religion\nAttacks on faith count.\n\n## Corner Cases"));
        assert!(r.lines().all(|l| l == l.trim_end()));
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let p = parse_prompt("## Introduction\nSolve it.").unwrap();
        assert_eq!(p.sections().len(), 1);
        assert_eq!(parse_prompt(&four_sections().render()).unwrap(), four_sections());

        let err = parse_prompt("## Tips\na\n\n## Tips\nb").unwrap_err();
        assert!(matches!(err, PromptError::Parse { line: 1, .. } | PromptError::Parse { .. }));
        let err = parse_prompt("stray\n## Tips\nb").unwrap_err();
        assert_eq!(err, PromptError::Parse { line: 1, message: "body text before the first \"## \" header".into() });
    }

    #[test]
    fn header_like_content_is_escaped() {
        let p =
            SectionedPrompt::new(vec![Section::new("A", "## not a header\n\\ slash\n### nor this").unwrap()]).unwrap();
        let r = p.render();
        assert_eq!(r, "## A\n\\## not a header\n\\\\ slash\n\\### nor this");
        assert_eq!(parse_prompt(&r).unwrap(), p);
    }

    #[test]
    fn apply_edit_cases() {
        let p = SectionedPrompt::from_description("Classify.").unwrap();
        let q = p.apply_edit(&EditProposal::add_section("Corner Cases", "Watch for sarcasm.")).unwrap();
        assert_eq!(q.sections().len(), 2);
        assert_eq!(q.sections()[1].title(), "Corner Cases");
        assert_eq!(p.sections().len(), 1, "input must not be mutated");

        let e = p.apply_edit(&EditProposal::edit_section("Introduction", "New text")).unwrap();
        assert_eq!(e.sections()[0].content(), "New text");

        let rules = SectionedPrompt::new(vec![Section::new("Rules", "r").unwrap()]).unwrap();
        let del = EditProposal::subsection(EditAction::Delete, "Rules", "Forces", None);
        assert!(matches!(rules.apply_edit(&del), Err(PromptError::TargetNotFound(_))));

        assert!(matches!(
            q.apply_edit(&EditProposal::add_section("Corner Cases", "again")),
            Err(PromptError::DuplicateTitle(_))
        ));
        assert!(matches!(
            p.apply_edit(&EditProposal::delete_section("Introduction")),
            Err(PromptError::InvariantViolation(_))
        ));
        assert!(matches!(p.apply_edit(&EditProposal::edit_section("Nope", "x")), Err(PromptError::TargetNotFound(_))));
    }

    #[test]
    fn subsection_edits() {
        let p = SectionedPrompt::from_description("Solve.").unwrap();
        let add = EditProposal::subsection(EditAction::Add, "Introduction", "Forces", Some("Draw all forces."));
        let q = p.apply_edit(&add).unwrap();
        assert_eq!(q.sections()[0].subsections()[0].content(), "Draw all forces.");
        let ed = EditProposal::subsection(EditAction::Edit, "Introduction", "Forces", Some("Draw them."));
        let q2 = q.apply_edit(&ed).unwrap();
        assert_eq!(q2.sections()[0].subsections()[0].content(), "Draw them.");
        let del = EditProposal::subsection(EditAction::Delete, "Introduction", "Forces", None);
        assert_eq!(q2.apply_edit(&del).unwrap(), p);
        let orphan = EditProposal::subsection(EditAction::Add, "Missing", "X", Some("y"));
        assert!(matches!(p.apply_edit(&orphan), Err(PromptError::TargetNotFound(_))));
        // deleting a section takes its subsections with it
        let two = q.apply_edit(&EditProposal::add_section("Other", "o")).unwrap();
        let gone = two.apply_edit(&EditProposal::delete_section("Introduction")).unwrap();
        assert_eq!(gone.sections().len(), 1);
        assert_eq!(gone.sections()[0].title(), "Other");
    }

    #[test]
    fn parse_edits_single_block() {
        let out = "<<EDIT action=add level=section section=\"Corner Cases\">>\nWatch for sarcasm.\n<<END>>";
        let edits = parse_edits(out).unwrap();
        assert_eq!(edits, vec![EditProposal::add_section("Corner Cases", "Watch for sarcasm.")]);
    }

    #[test]
    fn parse_edits_prose_only() {
        assert_eq!(parse_edits("I think the prompt is fine."), Err(EditParseError::Empty));
    }

    #[test]
    fn parse_edits_two_blocks_with_commentary() {
        let out = "First, some reasoning.\n\
                   <<EDIT action=edit level=section section=\"Introduction\">>\n\
                   Classify the text as hate speech or not.\n\
                   <<END>>\n\
                   Also this matters:\n\
                   <<EDIT action=delete level=subsection section=\"Rules\" subsection=\"Old \\\"quoted\\\"\">>\n\
                   <<END>>\n\
                   Done.";
        let expected = vec![
            EditProposal::edit_section("Introduction", "Classify the text as hate speech or not."),
            EditProposal::subsection(EditAction::Delete, "Rules", "Old \"quoted\"", None),
        ];
        assert_eq!(parse_edits(out).unwrap(), expected);
    }

    #[test]
    fn parse_edits_errors() {
        let unknown = "<<EDIT action=rename level=section section=\"A\">>\nx\n<<END>>";
        match parse_edits(unknown) {
            Err(EditParseError::Malformed { block, .. }) => assert!(block.contains("rename")),
            other => panic!("unexpected {other:?}"),
        }
        let unterminated = "<<EDIT action=add level=section section=\"A\">>\nx";
        assert!(matches!(parse_edits(unterminated), Err(EditParseError::Malformed { .. })));
        let missing_content = "<<EDIT action=add level=section section=\"A\">>\n<<END>>";
        assert!(matches!(parse_edits(missing_content), Err(EditParseError::Malformed { .. })));
        let delete_with_body = "<<EDIT action=delete level=section section=\"A\">>\nx\n<<END>>";
        assert!(matches!(parse_edits(delete_with_body), Err(EditParseError::Malformed { .. })));
        let sub_missing = "<<EDIT action=add level=subsection section=\"A\">>\nx\n<<END>>";
        assert!(matches!(parse_edits(sub_missing), Err(EditParseError::Malformed { .. })));
    }
}
