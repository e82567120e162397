//! Training examples and the line-delimited JSON dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureSeq;
use crate::types::{Alignment, LabelSeq, Symbol, Vocab};

/// One `(x, y)` pair with an optional expert alignment.
///
/// `modes` is only set by the multimodal generator: the two label sequences
/// that are equally correct for this input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: FeatureSeq,
    pub labels: LabelSeq,
    pub expert_alignment: Option<Alignment>,
    pub modes: Option<[LabelSeq; 2]>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        features: FeatureSeq,
        labels: LabelSeq,
        expert_alignment: Option<Alignment>,
    ) -> Result<Self> {
        let ex = Example {
            id: id.into(),
            features,
            labels,
            expert_alignment,
            modes: None,
        };
        ex.check()?;
        Ok(ex)
    }

    fn check(&self) -> Result<()> {
        if self.features.frames() < self.labels.len() {
            return Err(Error::InvalidInput(format!(
                "example {}: {} frames cannot carry {} labels",
                self.id,
                self.features.frames(),
                self.labels.len()
            )));
        }
        if let Some(a) = &self.expert_alignment {
            if a.len() != self.features.frames() || !a.is_valid_for(&self.labels) {
                return Err(Error::InvalidInput(format!(
                    "example {}: expert alignment does not match frames and labels",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    features: Vec<Vec<f64>>,
    labels: Vec<Symbol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    expert_alignment: Option<Vec<Symbol>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modes: Option<[Vec<Symbol>; 2]>,
}

impl Record {
    fn from_example(ex: &Example) -> Self {
        Record {
            id: ex.id.clone(),
            features: ex.features.to_rows(),
            labels: ex.labels.ids().to_vec(),
            expert_alignment: ex.expert_alignment.as_ref().map(|a| a.ids().to_vec()),
            modes: ex
                .modes
                .as_ref()
                .map(|[a, b]| [a.ids().to_vec(), b.ids().to_vec()]),
        }
    }

    fn into_example(self, vocab: &Vocab) -> Result<Example> {
        let features = FeatureSeq::from_rows(&self.features)?;
        let labels = LabelSeq::new(self.labels, vocab)?;
        let expert_alignment = self
            .expert_alignment
            .map(|ids| Alignment::new(ids, vocab))
            .transpose()?;
        let modes = match self.modes {
            Some([a, b]) => Some([LabelSeq::new(a, vocab)?, LabelSeq::new(b, vocab)?]),
            None => None,
        };
        let ex = Example {
            id: self.id,
            features,
            labels,
            expert_alignment,
            modes,
        };
        ex.check()?;
        Ok(ex)
    }
}

/// An ordered collection of examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Example> {
        self.examples.iter()
    }

    /// Examples `range` as a new dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset::new(self.examples[range].to_vec())
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut *out, &Record::from_example(ex))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_jsonl(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Parse line-delimited records; blank lines are ignored.
    pub fn read_jsonl<R: BufRead>(input: R, vocab: &Vocab, origin: &Path) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: n + 1,
                message,
            };
            let record: Record =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            examples.push(
                record
                    .into_example(vocab)
                    .map_err(|e| parse_err(e.to_string()))?,
            );
        }
        Ok(Dataset { examples })
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read_jsonl(BufReader::new(file), vocab, path)
    }
}

impl<'a> IntoIterator for &'a Dataset {
    type Item = &'a Example;
    type IntoIter = std::slice::Iter<'a, Example>;

    fn into_iter(self) -> Self::IntoIter {
        self.examples.iter()
    }
}
