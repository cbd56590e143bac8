use crate::error::{Error, Result};
use crate::task::episode::{Episode, TaskKind};

pub const IMAGE_PLACEHOLDER: &str = "[Image]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    Image,
    Field(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub kind: TaskKind,
    pub text: &'static str,
    pub segments: Vec<Segment>,
}

impl Template {
    pub fn image_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Image)).count()
    }

    pub fn fields(&self) -> Vec<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Field(f) => Some(f.as_str()),
                _ => None,
            })
            .collect()
    }
}

pub fn template_text(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::ImageClassification | TaskKind::Captioning => "[Image] What does the image describe?",
        TaskKind::MultiCaptioning => "[Image] [Image] What does the images describe?",
        TaskKind::Nli => "Can text1 “ {Text1} ” imply text2 “ {Text2} ”?",
        TaskKind::TreatmentSuggestion => {
            "Please provide treatment suggestion given the patient’s information: “ {Text} ”."
        }
        TaskKind::TrialMatching => {
            "Please determine the patient’s eligibility by comparing the given patient note: “ {Text1} ” and trial details: “ {Text2} ”."
        }
        TaskKind::Mortality => "What is the predicted outcome for the patient before discharge: “{Text}”?",
        TaskKind::Summarization => "What is the summary of the text “{Text}”?",
        TaskKind::QaContext => {
            "Your task is to answer biomedical questions using the given context. Only output yes, no, or maybe as answer. \n Context: “{Context}” Question: “{Question}”"
        }
        TaskKind::Mcqa => "{Question} “{Options}”",
        TaskKind::Vqa => "[Image]{Question}",
        TaskKind::Mlm => "What is the complete text of “{Text}”?",
        TaskKind::Mim => "[Image] What is the complete image?",
        TaskKind::Od => "[Image] What are the objects in the image?",
        TaskKind::InstructRound => "{History}[Image]{Question}",
    }
}

fn parse(text: &str) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut literal = String::new();
    let mut rest = text;
    while !rest.is_empty() {
        if let Some(after) = rest.strip_prefix(IMAGE_PLACEHOLDER) {
            if !literal.is_empty() {
                out.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            out.push(Segment::Image);
            rest = after;
        } else if rest.starts_with('{') && rest.contains('}') {
            let close = rest.find('}').unwrap();
            if !literal.is_empty() {
                out.push(Segment::Literal(std::mem::take(&mut literal)));
            }
            out.push(Segment::Field(rest[1..close].to_string()));
            rest = &rest[close + 1..];
        } else {
            let c = rest.chars().next().unwrap();
            literal.push(c);
            rest = &rest[c.len_utf8()..];
        }
    }
    if !literal.is_empty() {
        out.push(Segment::Literal(literal));
    }
    out
}

pub fn template_for(kind: TaskKind) -> Template {
    let text = template_text(kind);
    Template { kind, text, segments: parse(text) }
}

fn field<'e>(episode: &'e Episode, name: &str) -> Result<&'e str> {
    episode
        .text
        .get(name)
        .map(String::as_str)
        .ok_or_else(|| Error::Template(format!("{} episode is missing field `{name}`", episode.task)))
}

/// The instruction with every field substituted and `[Image]` left in
/// place for each image.
pub fn render_instruction(episode: &Episode) -> Result<String> {
    let mut out = String::new();
    for seg in template_for(episode.task).segments {
        match seg {
            Segment::Literal(s) => out.push_str(&s),
            Segment::Image => out.push_str(IMAGE_PLACEHOLDER),
            Segment::Field(name) => out.push_str(field(episode, &name)?),
        }
    }
    Ok(out)
}

pub(crate) fn field_value<'e>(episode: &'e Episode, name: &str) -> Result<&'e str> {
    field(episode, name)
}
