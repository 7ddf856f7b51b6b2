//! Synthetic key/value documents with pixel-unit boxes, plus an OCR noise
//! injector. Layout: one key utterance and one or more value utterances per
//! row, jittered geometry, optional planted duplicate of the amount value
//! to create label ambiguity. Generation is deterministic: every document
//! draws from its own counter-derived stream.

use crate::doc::{BoundingBox, Document, Utterance};
use crate::error::{Result, TcpnError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

pub const GLYPH_W: f64 = 14.0;
pub const GLYPH_H: f64 = 18.0;
const ROW_PITCH: f64 = 1.5 * GLYPH_H;
const LEFT_MARGIN: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueGrammar {
    /// DD.MM.YYYY, year in a narrow window.
    Date,
    /// One to three integer digits, a point, two decimals.
    Amount,
    /// Pool words, concatenated in ground truth, one utterance per word.
    Words { min_words: usize, max_words: usize },
    /// Fixed-length uppercase alphanumeric string.
    Code { len: usize },
}

#[derive(Clone, Debug)]
pub struct CategorySpec {
    pub name: String,
    pub grammar: ValueGrammar,
}

#[derive(Clone, Debug)]
pub struct GenConfig {
    pub num_docs: usize,
    pub word_pool_size: usize,
    pub categories: Vec<CategorySpec>,
    /// Probability of planting the amount value a second time elsewhere.
    pub duplicate_prob: f64,
    pub min_rows: usize,
    pub max_rows: usize,
    pub seed: u64,
}

impl GenConfig {
    /// DATE / TOTAL / NAME over a modest word pool.
    pub fn standard(seed: u64) -> GenConfig {
        GenConfig {
            num_docs: 20,
            word_pool_size: 40,
            categories: vec![
                CategorySpec { name: "DATE".into(), grammar: ValueGrammar::Date },
                CategorySpec { name: "TOTAL".into(), grammar: ValueGrammar::Amount },
                CategorySpec {
                    name: "NAME".into(),
                    grammar: ValueGrammar::Words { min_words: 2, max_words: 4 },
                },
            ],
            duplicate_prob: 0.0,
            min_rows: 5,
            max_rows: 9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(TcpnError::Config("generator needs at least one category".into()));
        }
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return Err(TcpnError::Config(format!(
                "duplicate_prob {} outside [0,1]",
                self.duplicate_prob
            )));
        }
        if self.min_rows < 5 || self.max_rows > 30 || self.min_rows > self.max_rows {
            return Err(TcpnError::Config(format!(
                "row range [{},{}] outside [5,30]",
                self.min_rows, self.max_rows
            )));
        }
        if self.word_pool_size == 0 {
            return Err(TcpnError::Config("empty word pool".into()));
        }
        for c in &self.categories {
            match &c.grammar {
                ValueGrammar::Words { min_words, max_words } => {
                    if *min_words == 0 || min_words > max_words {
                        return Err(TcpnError::Config(format!(
                            "bad word count range for {}",
                            c.name
                        )));
                    }
                }
                ValueGrammar::Code { len } => {
                    if *len == 0 {
                        return Err(TcpnError::Config(format!("zero code length for {}", c.name)));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn word_pool(cfg: &GenConfig) -> Vec<String> {
    let mut rng = ChaCha20Rng::seed_from_u64(splitmix64(cfg.seed ^ 0x706F_6F6C));
    (0..cfg.word_pool_size)
        .map(|_| {
            let len = rng.gen_range(3..=7);
            (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
        })
        .collect()
}

fn sample_value(grammar: &ValueGrammar, pool: &[String], rng: &mut ChaCha20Rng) -> Vec<String> {
    match grammar {
        ValueGrammar::Date => {
            let day = rng.gen_range(1..=28);
            let month = rng.gen_range(1..=12);
            let year = rng.gen_range(2020..=2024);
            vec![format!("{:02}.{:02}.{}", day, month, year)]
        }
        ValueGrammar::Amount => {
            let whole = rng.gen_range(1..=999);
            let cents = rng.gen_range(0..=99);
            vec![format!("{}.{:02}", whole, cents)]
        }
        ValueGrammar::Words { min_words, max_words } => {
            let k = rng.gen_range(*min_words..=*max_words);
            (0..k).map(|_| pool[rng.gen_range(0..pool.len())].clone()).collect()
        }
        ValueGrammar::Code { len } => {
            const ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
            vec![(0..*len)
                .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char)
                .collect()]
        }
    }
}

fn jitter(rng: &mut ChaCha20Rng) -> f64 {
    rng.gen_range(0.85..1.15)
}

fn place_utterance(text: &str, x0: f64, row: usize, rng: &mut ChaCha20Rng) -> Utterance {
    let w = text.chars().count() as f64 * GLYPH_W * jitter(rng);
    let h = GLYPH_H * jitter(rng);
    let y0 = row as f64 * ROW_PITCH + rng.gen_range(-0.15..0.15) * GLYPH_H;
    Utterance {
        bbox: BoundingBox { x0, y0, x1: x0 + w, y1: y0 + h },
        text: text.to_string(),
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let pool = word_pool(cfg);
    let mut docs = Vec::with_capacity(cfg.num_docs);
    for i in 0..cfg.num_docs {
        let mut rng =
            ChaCha20Rng::seed_from_u64(splitmix64(cfg.seed ^ splitmix64(0xD0C5 + i as u64)));
        let k = cfg.categories.len();
        let rows = rng.gen_range(cfg.min_rows..=cfg.max_rows).max(k);
        let mut row_ids: Vec<usize> = (0..rows).collect();
        row_ids.shuffle(&mut rng);
        let category_rows: Vec<usize> = row_ids[..k].to_vec();

        let mut utterances = Vec::new();
        let mut ground_truth = BTreeMap::new();
        let mut row_end = vec![LEFT_MARGIN; rows];
        let mut amount_value: Option<String> = None;

        for row in 0..rows {
            let (key, value_parts) = match category_rows.iter().position(|r| *r == row) {
                Some(ci) => {
                    let spec = &cfg.categories[ci];
                    let parts = sample_value(&spec.grammar, &pool, &mut rng);
                    ground_truth.insert(spec.name.clone(), parts.concat());
                    if amount_value.is_none() && spec.grammar == ValueGrammar::Amount {
                        amount_value = Some(parts.concat());
                    }
                    (format!("{}:", spec.name), parts)
                }
                None => {
                    let key_word = &pool[rng.gen_range(0..pool.len())];
                    let filler = pool[rng.gen_range(0..pool.len())].clone();
                    (format!("{}:", key_word), vec![filler])
                }
            };
            let mut x = LEFT_MARGIN;
            let u = place_utterance(&key, x, row, &mut rng);
            x = u.bbox.x1 + rng.gen_range(15.0..60.0);
            utterances.push(u);
            for part in &value_parts {
                let u = place_utterance(part, x, row, &mut rng);
                x = u.bbox.x1 + rng.gen_range(8.0..30.0);
                utterances.push(u);
            }
            row_end[row] = x;
        }

        // Label ambiguity: the amount string shows up a second time with no
        // ground-truth tie to it.
        if rng.gen_bool(cfg.duplicate_prob) {
            let dup = amount_value
                .clone()
                .or_else(|| ground_truth.values().next().cloned())
                .expect("at least one category");
            let row = rng.gen_range(0..rows);
            let x = row_end[row] + rng.gen_range(15.0..60.0);
            utterances.push(place_utterance(&dup, x, row, &mut rng));
        }

        docs.push(Document {
            doc_id: format!("doc{:05}", i),
            utterances,
            ground_truth,
        });
    }
    Ok(docs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseTarget {
    All,
    /// Only utterances whose text occurs inside a ground-truth value.
    Values,
}

#[derive(Clone, Debug)]
pub struct NoiseConfig {
    pub p_sub: f64,
    pub p_del: f64,
    pub target: NoiseTarget,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_sub)
            || !(0.0..=1.0).contains(&self.p_del)
            || self.p_sub + self.p_del > 1.0
        {
            return Err(TcpnError::Config(format!(
                "noise probabilities ({}, {}) invalid",
                self.p_sub, self.p_del
            )));
        }
        Ok(())
    }
}

fn substitute(c: char, rng: &mut ChaCha20Rng) -> char {
    const POOL: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    loop {
        let cand = POOL[rng.gen_range(0..POOL.len())] as char;
        if cand != c {
            return cand;
        }
    }
}

/// Perturbs recognized strings; boxes shrink proportionally on deletion and
/// ground truth stays clean. Deterministic per (document, seed).
pub fn inject_ocr_noise(doc: &Document, cfg: &NoiseConfig, seed: u64) -> Result<Document> {
    cfg.validate()?;
    // Chain over id bytes so permuted ids never share a noise stream.
    let mut stream = splitmix64(seed);
    for b in doc.doc_id.bytes() {
        stream = splitmix64(stream ^ u64::from(b));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(stream);
    let mut out = doc.clone();
    out.utterances.clear();
    for u in &doc.utterances {
        let eligible = match cfg.target {
            NoiseTarget::All => true,
            NoiseTarget::Values => doc.ground_truth.values().any(|v| v.contains(&u.text)),
        };
        if !eligible {
            out.utterances.push(u.clone());
            continue;
        }
        let original_len = u.text.chars().count();
        let mut kept = String::new();
        for c in u.text.chars() {
            let roll: f64 = rng.gen_range(0.0..1.0);
            if roll < cfg.p_sub {
                kept.push(substitute(c, &mut rng));
            } else if roll < cfg.p_sub + cfg.p_del {
                continue;
            } else {
                kept.push(c);
            }
        }
        let new_len = kept.chars().count();
        if new_len == 0 {
            continue;
        }
        let mut bbox = u.bbox;
        if new_len < original_len {
            let scale = new_len as f64 / original_len as f64;
            bbox.x1 = bbox.x0 + (bbox.x1 - bbox.x0) * scale;
        }
        out.utterances.push(Utterance { bbox, text: kept });
    }
    Ok(out)
}
