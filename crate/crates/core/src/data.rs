//! Video samples and dataset manifests.
//!
//! A manifest is line-delimited JSON: one header object followed by one
//! object per video.
//!
//! ```text
//! {"dataset":"afew-like","classes":["angry",...],"illumination_corrected":false}
//! {"id":"v0001","label":"happy","frame_count":2,"frames":{"inline":[{"shape":[9,8,8],"data":[...]},...]}}
//! {"id":"v0002","label":"UNLABELLED","frame_count":3,"frames":{"paths":["v0002/000.tensor",...]}}
//! ```
//!
//! Path-mode frames are single-tensor files in the checkpoint format,
//! resolved relative to the manifest's directory.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 7] = [
    "angry", "neutral", "sad", "fear", "surprise", "happy", "disgust",
];
pub const UNLABELLED: &str = "UNLABELLED";

pub fn class_index(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|c| *c == name)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `9 × S × S` region stacks.
    pub frames: Vec<Tensor>,
    pub label: Option<usize>,
}

impl VideoSample {
    pub fn new(id: impl Into<String>, frames: Vec<Tensor>, label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            frames,
            label,
        }
    }

    pub fn unlabelled(&self) -> VideoSample {
        VideoSample {
            label: None,
            ..self.clone()
        }
    }
}

/// Per-class counts of labelled samples.
pub fn class_counts(samples: &[VideoSample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for l in samples.iter().filter_map(|s| s.label) {
        counts[l] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameSource {
    Inline(Vec<Tensor>),
    Paths(Vec<String>),
}

impl FrameSource {
    pub fn len(&self) -> usize {
        match self {
            FrameSource::Inline(f) => f.len(),
            FrameSource::Paths(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Option<usize>,
    pub frames: FrameSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dataset: String,
    pub classes: Vec<String>,
    /// Whether frames went through an external illumination-correction
    /// pass before cropping.
    pub illumination_corrected: bool,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    dataset: String,
    classes: Vec<String>,
    #[serde(default)]
    illumination_corrected: bool,
}

#[derive(Serialize, Deserialize)]
struct EntryLine {
    id: String,
    label: String,
    frame_count: usize,
    frames: FrameSource,
}

impl Manifest {
    pub fn new(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            illumination_corrected: false,
            entries: Vec::new(),
        }
    }

    pub fn from_samples(dataset: impl Into<String>, samples: &[VideoSample]) -> Self {
        let mut m = Self::new(dataset);
        m.entries = samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.id.clone(),
                label: s.label,
                frames: FrameSource::Inline(s.frames.clone()),
            })
            .collect();
        m
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = HeaderLine {
            dataset: self.dataset.clone(),
            classes: self.classes.clone(),
            illumination_corrected: self.illumination_corrected,
        };
        writeln!(w, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
        for e in &self.entries {
            let line = EntryLine {
                id: e.id.clone(),
                label: match e.label {
                    Some(l) => self.classes[l].clone(),
                    None => UNLABELLED.to_string(),
                },
                frame_count: e.frames.len(),
                frames: e.frames.clone(),
            };
            writeln!(w, "{}", serde_json::to_string(&line).map_err(json_err)?)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(String::from_utf8(buf).expect("json is utf-8"))
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r
            .lines()
            .enumerate()
            .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let (_, first) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty manifest".into(),
        })?;
        let header: HeaderLine = serde_json::from_str(&first?).map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.classes.is_empty() {
            return Err(Error::Parse {
                line: 1,
                msg: "class table is empty".into(),
            });
        }
        let mut m = Manifest {
            dataset: header.dataset,
            classes: header.classes,
            illumination_corrected: header.illumination_corrected,
            entries: Vec::new(),
        };
        for (idx, line) in lines {
            let lineno = idx + 1;
            let parse_err = |msg: String| Error::Parse { line: lineno, msg };
            let e: EntryLine =
                serde_json::from_str(&line?).map_err(|e| parse_err(e.to_string()))?;
            if e.frames.is_empty() || e.frame_count != e.frames.len() {
                return Err(parse_err(format!(
                    "frame_count {} disagrees with {} frames (need at least one)",
                    e.frame_count,
                    e.frames.len()
                )));
            }
            let label = if e.label == UNLABELLED {
                None
            } else {
                Some(
                    m.classes
                        .iter()
                        .position(|c| *c == e.label)
                        .ok_or_else(|| parse_err(format!("unknown label '{}'", e.label)))?,
                )
            };
            m.entries.push(ManifestEntry {
                id: e.id,
                label,
                frames: e.frames,
            });
        }
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::read_from(text.as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Materialises every entry; path-mode frames are read relative to
    /// `base_dir`.
    pub fn samples(&self, base_dir: &Path) -> Result<Vec<VideoSample>> {
        self.entries
            .iter()
            .map(|e| {
                let frames = match &e.frames {
                    FrameSource::Inline(f) => f.clone(),
                    FrameSource::Paths(paths) => paths
                        .iter()
                        .map(|p| checkpoint::load_tensor(&base_dir.join(p)))
                        .collect::<Result<_>>()?,
                };
                Ok(VideoSample::new(e.id.clone(), frames, e.label))
            })
            .collect()
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Input(e.to_string())
}
