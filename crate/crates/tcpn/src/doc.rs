//! OCR document model: utterances with boxes, key information ground truth,
//! the character vocabulary, and the category schema.
//!
//! Documents are stored one JSON object per line:
//! `{"doc_id": ..., "utterances": [{"box": [x0,y0,x1,y1], "text": ...}], "ground_truth": {...}}`

use crate::error::{Result, TcpnError};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const EOS_ID: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

/// Axis-aligned box in reading coordinates: x grows right, y grows down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        BoundingBox { x0: v[0], y0: v[1], x1: v[2], y1: v[3] }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y0 + self.y1)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0)
            || !(self.x0.is_finite() && self.y0.is_finite() && self.x1.is_finite() && self.y1.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub utterances: Vec<Utterance>,
    /// Category name to expected value string. BTreeMap keeps serialization
    /// order stable for byte-identical output.
    pub ground_truth: BTreeMap<String, String>,
}

impl Document {
    /// Structural checks beyond JSON shape: boxes must have positive finite
    /// extent and texts must be non-empty.
    pub fn validate(&self) -> Result<()> {
        for (i, u) in self.utterances.iter().enumerate() {
            if u.bbox.is_degenerate() {
                return Err(TcpnError::Validation {
                    index: i,
                    message: format!(
                        "document {}: utterance {} has degenerate box [{}, {}, {}, {}]",
                        self.doc_id, i, u.bbox.x0, u.bbox.y0, u.bbox.x1, u.bbox.y1
                    ),
                });
            }
            if u.text.is_empty() {
                return Err(TcpnError::Validation {
                    index: i,
                    message: format!("document {}: utterance {} has empty text", self.doc_id, i),
                });
            }
        }
        Ok(())
    }
}

/// Reads line-delimited documents. Parse failures report the byte offset of
/// the offending character within the file.
pub fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut docs = Vec::new();
    let mut line = String::new();
    let mut offset: usize = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            let doc: Document = serde_json::from_str(trimmed).map_err(|e| {
                // serde_json reports 1-based line/column within this line
                let col = e.column().saturating_sub(1);
                TcpnError::Parse {
                    offset: offset + col,
                    message: e.to_string(),
                }
            })?;
            doc.validate()?;
            docs.push(doc);
        }
        offset += n;
    }
    Ok(docs)
}

pub fn write_jsonl(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_jsonl_to(&mut out, docs)?;
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_to<W: Write>(out: &mut W, docs: &[Document]) -> Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut *out, doc).map_err(|e| TcpnError::Parse {
            offset: 0,
            message: format!("serialize {}: {}", doc.doc_id, e),
        })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Character inventory with three reserved entries: pad 0, unknown 1, end of
/// sequence 2. Characters rank by corpus frequency, ties broken by code point.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    entries: Vec<String>,
    ids: HashMap<char, usize>,
}

impl Vocabulary {
    /// Ranks every character seen at least `min_freq` times; rarer ones fall
    /// back to unknown at lookup.
    pub fn build(docs: &[Document], min_freq: u64) -> Vocabulary {
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        for doc in docs {
            for u in &doc.utterances {
                for c in u.text.chars() {
                    *counts.entry(c).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(char, u64)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= min_freq.max(1))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids = HashMap::new();
        for (c, _) in ranked {
            ids.insert(c, entries.len());
            entries.push(c.to_string());
        }
        Vocabulary { entries, ids }
    }

    /// Vocabulary id for a character; unseen characters map to unknown.
    pub fn id(&self, c: char) -> usize {
        self.ids.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Vocabulary id for a character, None when out of vocabulary.
    pub fn id_strict(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    /// The character behind an id; reserved ids carry none.
    pub fn char_of(&self, id: usize) -> Option<char> {
        if id < SPECIALS.len() {
            return None;
        }
        self.entries.get(id).and_then(|s| s.chars().next())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn from_entries(entries: Vec<String>) -> Result<Vocabulary> {
        if entries.len() < SPECIALS.len()
            || entries[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err(TcpnError::Checkpoint(format!(
                "vocabulary must start with {:?}, got {:?}",
                SPECIALS,
                &entries[..entries.len().min(3)]
            )));
        }
        let mut ids = HashMap::new();
        for (i, e) in entries.iter().enumerate().skip(SPECIALS.len()) {
            let mut cs = e.chars();
            let (c, rest) = (cs.next(), cs.next());
            if c.is_none() || rest.is_some() {
                return Err(TcpnError::Checkpoint(format!(
                    "vocabulary entry {} must be a single character, got {:?}",
                    i, e
                )));
            }
            if ids.insert(c.unwrap(), i).is_some() {
                return Err(TcpnError::Checkpoint(format!(
                    "vocabulary entry {} duplicates character {:?}",
                    i, e
                )));
            }
        }
        Ok(Vocabulary { entries, ids })
    }
}

/// Ordered list of key information categories. Class id 0 is background;
/// category k in the list owns class id k+1.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySchema {
    names: Vec<String>,
}

impl CategorySchema {
    pub fn new(names: Vec<String>) -> Result<CategorySchema> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if n.is_empty() {
                return Err(TcpnError::Config("empty category name".into()));
            }
            if !seen.insert(n.clone()) {
                return Err(TcpnError::Config(format!("duplicate category {:?}", n)));
            }
        }
        Ok(CategorySchema { names })
    }

    /// Sorted union of ground-truth keys over a corpus.
    pub fn from_docs(docs: &[Document]) -> Result<CategorySchema> {
        let mut names: Vec<String> = docs
            .iter()
            .flat_map(|d| d.ground_truth.keys().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        if names.is_empty() {
            return Err(TcpnError::Config("no ground-truth categories in corpus".into()));
        }
        names.sort();
        CategorySchema::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// 1-based class id; background stays 0.
    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name).map(|i| i + 1)
    }

    pub fn name_of(&self, class_id: usize) -> Option<&str> {
        if class_id == 0 {
            return None;
        }
        self.names.get(class_id - 1).map(|s| s.as_str())
    }
}
