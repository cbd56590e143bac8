use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::template::template_for;
use crate::vision::{load_image, Image};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ImageClassification,
    Nli,
    TreatmentSuggestion,
    TrialMatching,
    Mortality,
    Summarization,
    QaContext,
    Mcqa,
    Vqa,
    Captioning,
    MultiCaptioning,
    Mlm,
    Mim,
    Od,
    InstructRound,
}

impl TaskKind {
    pub const ALL: [TaskKind; 15] = [
        TaskKind::ImageClassification,
        TaskKind::Nli,
        TaskKind::TreatmentSuggestion,
        TaskKind::TrialMatching,
        TaskKind::Mortality,
        TaskKind::Summarization,
        TaskKind::QaContext,
        TaskKind::Mcqa,
        TaskKind::Vqa,
        TaskKind::Captioning,
        TaskKind::MultiCaptioning,
        TaskKind::Mlm,
        TaskKind::Mim,
        TaskKind::Od,
        TaskKind::InstructRound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ImageClassification => "image_classification",
            TaskKind::Nli => "nli",
            TaskKind::TreatmentSuggestion => "treatment_suggestion",
            TaskKind::TrialMatching => "trial_matching",
            TaskKind::Mortality => "mortality",
            TaskKind::Summarization => "summarization",
            TaskKind::QaContext => "qa_context",
            TaskKind::Mcqa => "mcqa",
            TaskKind::Vqa => "vqa",
            TaskKind::Captioning => "captioning",
            TaskKind::MultiCaptioning => "multi_captioning",
            TaskKind::Mlm => "mlm",
            TaskKind::Mim => "mim",
            TaskKind::Od => "od",
            TaskKind::InstructRound => "instruct_round",
        }
    }

    /// Kinds whose target comes from the episode's target text.
    pub fn has_text_target(self) -> bool {
        !matches!(self, TaskKind::Mim | TaskKind::Od)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Path(PathBuf),
    Loaded(Image),
}

impl ImageSource {
    pub fn load(&self) -> Result<Image> {
        match self {
            ImageSource::Path(p) => load_image(p),
            ImageSource::Loaded(img) => Ok(img.clone()),
        }
    }
}

/// One labelled box in pixel coordinates of the episode's image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub label: String,
}

/// Precomputed inputs for the masked-modelling tasks.
#[derive(Debug, Clone, PartialEq)]
pub enum Pretraining {
    /// BPE ids of the `Text` field with some positions replaced by MASK.
    Mlm { masked_ids: Vec<u32> },
    /// Kept raster indices of the single image, which of them are masked,
    /// and the vision ids of the masked patches in raster order.
    Mim { kept: Vec<usize>, masked: Vec<usize>, target_ids: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: TaskKind,
    pub images: Vec<ImageSource>,
    pub text: BTreeMap<String, String>,
    pub target: String,
    pub answer_set: Option<Vec<String>>,
    pub objects: Option<Vec<ObjectLabel>>,
    pub pretraining: Option<Pretraining>,
}

impl Episode {
    pub fn new(task: TaskKind) -> Self {
        Episode {
            task,
            images: Vec::new(),
            text: BTreeMap::new(),
            target: String::new(),
            answer_set: None,
            objects: None,
            pretraining: None,
        }
    }

    pub fn with_field(mut self, name: &str, value: &str) -> Self {
        self.text.insert(name.to_string(), value.to_string());
        self
    }

    pub fn with_target(mut self, target: &str) -> Self {
        self.target = target.to_string();
        self
    }

    pub fn with_image(mut self, image: ImageSource) -> Self {
        self.images.push(image);
        self
    }

    pub fn with_answer_set<S: AsRef<str>>(mut self, answers: &[S]) -> Self {
        self.answer_set = Some(answers.iter().map(|a| a.as_ref().to_string()).collect());
        self
    }

    pub fn validate(&self) -> Result<()> {
        let template = template_for(self.task);
        if self.images.len() != template.image_count() {
            return Err(Error::Validation(format!(
                "{} episode has {} images but its template has {} placeholders",
                self.task,
                self.images.len(),
                template.image_count()
            )));
        }
        if let Some(answers) = &self.answer_set {
            if answers.is_empty() {
                return Err(Error::Validation("answer_set must not be empty".into()));
            }
        }
        if self.task == TaskKind::Od && self.objects.as_ref().is_none_or(Vec::is_empty) {
            return Err(Error::Validation("od episode needs at least one object".into()));
        }
        Ok(())
    }
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub task: TaskKind,
    #[serde(default)]
    pub text: BTreeMap<String, String>,
    #[serde(default)]
    pub target: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_set: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<ObjectLabel>>,
}

impl ManifestRecord {
    /// Relative image paths resolve against `base_dir`.
    pub fn into_episode(self, base_dir: Option<&Path>) -> Result<Episode> {
        let images = self
            .images
            .into_iter()
            .map(|p| match base_dir {
                Some(dir) if p.is_relative() => ImageSource::Path(dir.join(p)),
                _ => ImageSource::Path(p),
            })
            .collect();
        let episode = Episode {
            task: self.task,
            images,
            text: self.text,
            target: self.target,
            answer_set: self.answer_set,
            objects: self.objects,
            pretraining: None,
        };
        episode.validate()?;
        Ok(episode)
    }
}

pub fn parse_manifest(text: &str, base_dir: Option<&Path>) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse(format!("manifest line {}: {e}", n + 1)))?;
        out.push(record.into_episode(base_dir)?);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<Episode>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent())
}
