//! Two switchable extraction modes over one trained model, plus
//! field-level evaluation and throughput measurement.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::autodiff::{Graph, NodeId};
use crate::decoder::{greedy_decode, TraceStep};
use crate::doc::{CategorySchema, Document, Vocabulary};
use crate::encoder::encode_document;
use crate::error::{Result, TcpnError};
use crate::lattice::{build_lattice, LatticeParams};
use crate::model::{Bound, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Tag,
    CopyPredict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CategoryMode {
    pub mode: Mode,
    pub max_len: usize,
}

/// Per-category mode assignment. Every schema category must be covered.
#[derive(Clone, Debug)]
pub struct ModeConfig {
    map: BTreeMap<String, CategoryMode>,
}

impl ModeConfig {
    pub fn uniform(schema: &CategorySchema, mode: Mode, max_len: usize) -> ModeConfig {
        let map = schema
            .names()
            .iter()
            .map(|n| (n.clone(), CategoryMode { mode, max_len }))
            .collect();
        ModeConfig { map }
    }

    pub fn set(&mut self, category: &str, mode: Mode, max_len: usize) {
        self.map.insert(category.to_string(), CategoryMode { mode, max_len });
    }

    pub fn get(&self, category: &str) -> Option<CategoryMode> {
        self.map.get(category).copied()
    }

    pub fn validate(&self, schema: &CategorySchema) -> Result<()> {
        for name in schema.names() {
            match self.map.get(name) {
                None => {
                    return Err(TcpnError::Config(format!("category {:?} has no mode", name)))
                }
                Some(cm) if cm.max_len == 0 => {
                    return Err(TcpnError::Config(format!("category {:?} max_len 0", name)))
                }
                Some(_) => {}
            }
        }
        for name in self.map.keys() {
            if schema.class_id(name).is_none() {
                return Err(TcpnError::Config(format!("mode for unknown category {:?}", name)));
            }
        }
        Ok(())
    }
}

/// How a field's text was produced, kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldDetail {
    /// Reading-order indices of the tokens labeled with the category.
    Tagged(Vec<usize>),
    /// Per-step emission trace of the sequential decode.
    Trace(Vec<TraceStep>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldResult {
    pub category: String,
    pub text: String,
    pub mode: Mode,
    pub detail: FieldDetail,
}

/// Hard class per token row: argmax over the label head outputs.
pub fn head_labels(g: &mut Graph, bound: &Bound, f: NodeId) -> Vec<usize> {
    let logits = g.linear(f, bound.id("head.w"), bound.id("head.b"));
    let shape = g.shape(logits).to_vec();
    let (n, k) = (shape[0], shape[1]);
    let data = g.value(logits).data();
    (0..n)
        .map(|r| {
            let row = &data[r * k..(r + 1) * k];
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("at least one class")
        })
        .collect()
}

/// Reading-order concatenation of the tokens labeled with each category;
/// categories that label nothing are absent from the result.
pub fn assemble_tagged(
    labels: &[usize],
    tokens: &[char],
    schema: &CategorySchema,
) -> BTreeMap<String, FieldResult> {
    assert_eq!(labels.len(), tokens.len());
    let mut out = BTreeMap::new();
    for name in schema.names() {
        let class_id = schema.class_id(name).expect("schema name");
        let positions: Vec<usize> =
            labels.iter().enumerate().filter(|(_, l)| **l == class_id).map(|(i, _)| i).collect();
        if positions.is_empty() {
            continue;
        }
        let text: String = positions.iter().map(|&i| tokens[i]).collect();
        out.insert(
            name.clone(),
            FieldResult {
                category: name.clone(),
                text,
                mode: Mode::Tag,
                detail: FieldDetail::Tagged(positions),
            },
        );
    }
    out
}

/// Tag mode: one head pass labels every token, fields assemble by reading
/// order. No sequential decode is involved.
pub fn tag_mode(
    g: &mut Graph,
    bound: &Bound,
    f: NodeId,
    tokens: &[char],
    schema: &CategorySchema,
) -> BTreeMap<String, FieldResult> {
    let labels = head_labels(g, bound, f);
    assemble_tagged(&labels, tokens, schema)
}

/// Copy-or-predict mode: greedy sequential decode of the requested
/// categories in one batch. An immediate end marker leaves the field absent.
#[allow(clippy::too_many_arguments)]
pub fn cp_mode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &crate::model::ModelConfig,
    f: NodeId,
    tokens: &[char],
    vocab: &Vocabulary,
    schema: &CategorySchema,
    categories: &[(String, usize)],
) -> BTreeMap<String, FieldResult> {
    let mut out = BTreeMap::new();
    if categories.is_empty() || tokens.is_empty() {
        return out;
    }
    let class_ids: Vec<usize> = categories
        .iter()
        .map(|(name, _)| schema.class_id(name).expect("schema name"))
        .collect();
    let horizon = categories.iter().map(|(_, m)| *m).max().expect("nonempty");
    let traces = greedy_decode(g, bound, cfg, f, &class_ids, tokens, vocab, horizon);
    for ((name, max_len), mut trace) in categories.iter().cloned().zip(traces) {
        trace.truncate(max_len);
        if trace.is_empty() {
            continue;
        }
        let text: String = trace.iter().map(|s| s.token).collect();
        out.insert(
            name.clone(),
            FieldResult { category: name, text, mode: Mode::CopyPredict, detail: FieldDetail::Trace(trace) },
        );
    }
    out
}

/// All fields of one document under the per-category mode assignment.
/// Both modes read the same encoder features from the same parameters.
pub fn infer_document(
    params: &ModelParams,
    lat: &LatticeParams,
    vocab: &Vocabulary,
    schema: &CategorySchema,
    modes: &ModeConfig,
    doc: &Document,
) -> Result<BTreeMap<String, FieldResult>> {
    modes.validate(schema)?;
    let layout = build_lattice(doc, lat)?;
    let tokens: Vec<char> = layout.placements.iter().map(|p| p.token).collect();
    if tokens.is_empty() {
        return Ok(BTreeMap::new());
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let f = encode_document(&mut g, &bound, &params.cfg, &layout, vocab);

    let mut tag_cats: Vec<String> = Vec::new();
    let mut cp_cats: Vec<(String, usize)> = Vec::new();
    for name in schema.names() {
        let cm = modes.get(name).expect("validated above");
        match cm.mode {
            Mode::Tag => tag_cats.push(name.clone()),
            Mode::CopyPredict => cp_cats.push((name.clone(), cm.max_len)),
        }
    }

    let mut out = BTreeMap::new();
    if !tag_cats.is_empty() {
        let mut tagged = tag_mode(&mut g, &bound, f, &tokens, schema);
        for name in &tag_cats {
            if let Some(fr) = tagged.remove(name) {
                out.insert(name.clone(), fr);
            }
        }
    }
    let cp = cp_mode(&mut g, &bound, &params.cfg, f, &tokens, vocab, schema, &cp_cats);
    out.extend(cp);
    Ok(out)
}

/// Exact-match counts for one category.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: usize,
    pub predicted: usize,
    pub gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    /// Undefined ratios (zero denominators) score 0 by convention.
    pub fn prf(&self) -> Prf {
        let p = if self.predicted == 0 { 0.0 } else { self.tp as f64 / self.predicted as f64 };
        let r = if self.gold == 0 { 0.0 } else { self.tp as f64 / self.gold as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf { precision: p, recall: r, f1 }
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub per_category: BTreeMap<String, (Counts, Prf)>,
    pub micro: (Counts, Prf),
}

/// Extracted fields for one document: category name to emitted text.
/// Absent fields are simply missing keys.
#[derive(Clone, Debug)]
pub struct DocPrediction {
    pub doc_id: String,
    pub fields: BTreeMap<String, String>,
}

/// Field-level precision/recall/F1: a prediction is a true positive iff its
/// text equals the gold value exactly. Micro average pools counts.
pub fn field_f1(
    predictions: &[DocPrediction],
    golds: &[Document],
    schema: &CategorySchema,
) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(TcpnError::Config(format!(
            "{} predictions against {} gold documents",
            predictions.len(),
            golds.len()
        )));
    }
    let mut counts: BTreeMap<String, Counts> =
        schema.names().iter().map(|n| (n.clone(), Counts::default())).collect();
    for (pred, gold) in predictions.iter().zip(golds) {
        if pred.doc_id != gold.doc_id {
            return Err(TcpnError::Config(format!(
                "prediction for {:?} aligned with gold {:?}",
                pred.doc_id, gold.doc_id
            )));
        }
        for name in pred.fields.keys() {
            if schema.class_id(name).is_none() {
                return Err(TcpnError::Config(format!("unknown category {:?} in predictions", name)));
            }
        }
        for (name, c) in counts.iter_mut() {
            let p = pred.fields.get(name);
            let g = gold.ground_truth.get(name);
            if p.is_some() {
                c.predicted += 1;
            }
            if g.is_some() {
                c.gold += 1;
            }
            if let (Some(p), Some(g)) = (p, g) {
                if p == g {
                    c.tp += 1;
                }
            }
        }
    }
    let mut micro = Counts::default();
    for c in counts.values() {
        micro.tp += c.tp;
        micro.predicted += c.predicted;
        micro.gold += c.gold;
    }
    let per_category = counts.into_iter().map(|(n, c)| (n, (c, c.prf()))).collect();
    Ok(EvalReport { per_category, micro: (micro, micro.prf()) })
}

#[derive(Clone, Copy, Debug)]
pub struct Throughput {
    pub docs_per_sec: f64,
    pub docs: usize,
    pub fields: usize,
    pub seconds: f64,
}

/// Wall-clock documents per second over a full single-worker pass with every
/// category in the given mode.
pub fn throughput(
    params: &ModelParams,
    lat: &LatticeParams,
    vocab: &Vocabulary,
    schema: &CategorySchema,
    mode: Mode,
    max_len: usize,
    docs: &[Document],
) -> Result<Throughput> {
    if docs.len() < 100 {
        return Err(TcpnError::Config(format!(
            "throughput needs at least 100 documents, got {}",
            docs.len()
        )));
    }
    let modes = ModeConfig::uniform(schema, mode, max_len);
    let start = Instant::now();
    let mut fields = 0usize;
    for doc in docs {
        fields += infer_document(params, lat, vocab, schema, &modes, doc)?.len();
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(Throughput { docs_per_sec: docs.len() as f64 / seconds, docs: docs.len(), fields, seconds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::decoder::StepSource;
    use crate::doc::{BoundingBox, Utterance, EOS_ID};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn schema3() -> CategorySchema {
        CategorySchema::new(vec!["DATE".into(), "NAME".into(), "TOTAL".into()]).unwrap()
    }

    fn tiny_doc() -> Document {
        let u = |text: &str, x: f64, y: f64| Utterance {
            text: text.to_string(),
            bbox: BoundingBox { x0: x, y0: y, x1: x + 14.0 * text.chars().count() as f64, y1: y + 18.0 },
        };
        Document {
            doc_id: "t0".into(),
            utterances: vec![u("AB", 10.0, 10.0), u("CD", 80.0, 10.0), u("EF", 10.0, 40.0)],
            ground_truth: [("DATE".to_string(), "AB".to_string())].into_iter().collect(),
        }
    }

    fn small_setup(seed: u64) -> (ModelParams, Vocabulary, CategorySchema, LatticeParams) {
        let docs = vec![tiny_doc()];
        let vocab = Vocabulary::build(&docs, 1);
        let schema = schema3();
        let cfg = ModelConfig {
            d: 4,
            depth: 1,
            use_coord: true,
            use_unet: false,
            use_residual: true,
            vocab_size: vocab.len(),
            num_categories: schema.len(),
            max_len: 8,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let params = ModelParams::init(cfg, &mut rng).unwrap();
        (params, vocab, schema, LatticeParams::default())
    }

    #[test]
    fn background_head_leaves_every_field_absent() {
        let (mut params, vocab, schema, lat) = small_setup(1);
        let k = schema.len() + 1;
        *params.param_mut("head.w") = Tensor::zeros(&[k, params.cfg.d]);
        let mut b = vec![0.0; k];
        b[0] = 50.0;
        *params.param_mut("head.b") = Tensor::from_vec(&[k], b);

        let doc = tiny_doc();
        let layout = build_lattice(&doc, &lat).unwrap();
        let tokens: Vec<char> = layout.placements.iter().map(|p| p.token).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = encode_document(&mut g, &bound, &params.cfg, &layout, &vocab);
        let fields = tag_mode(&mut g, &bound, f, &tokens, &schema);
        assert!(fields.is_empty());
    }

    #[test]
    fn tagged_assembly_concatenates_in_reading_order() {
        let schema = schema3();
        let tokens: Vec<char> = "XYZAB9".chars().collect();
        // DATE owns class id 1; positions 3 and 4 are labeled with it.
        let labels = vec![0, 0, 0, 1, 1, 3];
        let fields = assemble_tagged(&labels, &tokens, &schema);
        assert_eq!(fields.len(), 2);
        let date = &fields["DATE"];
        assert_eq!(date.text, "AB");
        assert_eq!(date.detail, FieldDetail::Tagged(vec![3, 4]));
        assert_eq!(fields["TOTAL"].text, "9");
        assert!(!fields.contains_key("NAME"));
    }

    #[test]
    fn rigged_predictor_emits_immediate_end_marker() {
        let (mut params, vocab, schema, lat) = small_setup(2);
        let mut b = vec![0.0; vocab.len()];
        b[EOS_ID] = 50.0;
        *params.param_mut("dec.pred.b") = Tensor::from_vec(&[vocab.len()], b);
        *params.param_mut("dec.copy.b") = Tensor::from_vec(&[1], vec![-50.0]);

        let doc = tiny_doc();
        let modes = ModeConfig::uniform(&schema, Mode::CopyPredict, 6);
        let fields = infer_document(&params, &lat, &vocab, &schema, &modes, &doc).unwrap();
        assert!(fields.is_empty(), "immediate end marker must leave fields absent");
    }

    #[test]
    fn tag_output_is_a_reading_order_subsequence() {
        for seed in [3u64, 4, 5] {
            let (params, vocab, schema, lat) = small_setup(seed);
            let doc = tiny_doc();
            let layout = build_lattice(&doc, &lat).unwrap();
            let tokens: Vec<char> = layout.placements.iter().map(|p| p.token).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let f = encode_document(&mut g, &bound, &params.cfg, &layout, &vocab);
            for fr in tag_mode(&mut g, &bound, f, &tokens, &schema).values() {
                let FieldDetail::Tagged(pos) = &fr.detail else {
                    panic!("tag mode must record positions")
                };
                assert!(pos.windows(2).all(|w| w[0] < w[1]), "positions must increase");
                let expect: String = pos.iter().map(|&i| tokens[i]).collect();
                assert_eq!(fr.text, expect);
            }
        }
    }

    #[test]
    fn mode_reassignment_touches_only_that_category() {
        let (params, vocab, schema, lat) = small_setup(6);
        let doc = tiny_doc();
        let all_tag = ModeConfig::uniform(&schema, Mode::Tag, 6);
        let mut mixed = ModeConfig::uniform(&schema, Mode::Tag, 6);
        mixed.set("NAME", Mode::CopyPredict, 6);

        let a = infer_document(&params, &lat, &vocab, &schema, &all_tag, &doc).unwrap();
        let b = infer_document(&params, &lat, &vocab, &schema, &mixed, &doc).unwrap();
        for name in ["DATE", "TOTAL"] {
            assert_eq!(a.get(name), b.get(name), "{} must not change", name);
        }
        if let Some(fr) = b.get("NAME") {
            assert_eq!(fr.mode, Mode::CopyPredict);
        }
    }

    #[test]
    fn cp_trace_tokens_concatenate_to_text() {
        for seed in [7u64, 8] {
            let (params, vocab, schema, lat) = small_setup(seed);
            let doc = tiny_doc();
            let modes = ModeConfig::uniform(&schema, Mode::CopyPredict, 5);
            let fields = infer_document(&params, &lat, &vocab, &schema, &modes, &doc).unwrap();
            for fr in fields.values() {
                let FieldDetail::Trace(trace) = &fr.detail else {
                    panic!("cp mode must record a trace")
                };
                assert!(trace.len() <= 5);
                let expect: String = trace.iter().map(|s| s.token).collect();
                assert_eq!(fr.text, expect);
                for step in trace {
                    if let StepSource::Copy(i) = step.source {
                        assert!(i < 6, "copy index must point into the input");
                    }
                }
            }
        }
    }

    fn pred(id: &str, fields: &[(&str, &str)]) -> DocPrediction {
        DocPrediction {
            doc_id: id.into(),
            fields: fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn gold(id: &str, fields: &[(&str, &str)]) -> Document {
        Document {
            doc_id: id.into(),
            utterances: vec![Utterance {
                text: "x".into(),
                bbox: BoundingBox { x0: 0.0, y0: 0.0, x1: 10.0, y1: 10.0 },
            }],
            ground_truth: fields.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let schema = schema3();
        let golds = vec![gold("a", &[("DATE", "1.2"), ("NAME", "bob")]), gold("b", &[("DATE", "3.4")])];
        let preds = vec![pred("a", &[("DATE", "1.2"), ("NAME", "bob")]), pred("b", &[("DATE", "3.4")])];
        let rep = field_f1(&preds, &golds, &schema).unwrap();
        assert_eq!(rep.micro.1.f1, 1.0);
        assert_eq!(rep.per_category["DATE"].1.f1, 1.0);
        assert_eq!(rep.per_category["TOTAL"].1.f1, 0.0);
        assert_eq!(rep.per_category["TOTAL"].0, Counts::default());
    }

    #[test]
    fn half_recall_hand_values() {
        // One of two gold fields found, nothing spurious: P=1, R=1/2, F1=2/3.
        let schema = schema3();
        let golds = vec![gold("a", &[("DATE", "1.2"), ("NAME", "bob")])];
        let preds = vec![pred("a", &[("DATE", "1.2")])];
        let rep = field_f1(&preds, &golds, &schema).unwrap();
        let (_, micro) = rep.micro;
        assert_eq!(micro.precision, 1.0);
        assert_eq!(micro.recall, 0.5);
        assert!((micro.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_absent_scores_zero_by_convention() {
        let schema = schema3();
        let golds = vec![gold("a", &[("DATE", "1.2")])];
        let preds = vec![pred("a", &[])];
        let rep = field_f1(&preds, &golds, &schema).unwrap();
        let (c, micro) = rep.micro;
        assert_eq!(c.predicted, 0);
        assert_eq!(micro.precision, 0.0);
        assert_eq!(micro.recall, 0.0);
        assert_eq!(micro.f1, 0.0);
    }

    #[test]
    fn wrong_text_counts_against_both_sides() {
        let schema = schema3();
        let golds = vec![gold("a", &[("DATE", "1.2")])];
        let preds = vec![pred("a", &[("DATE", "9.9")])];
        let rep = field_f1(&preds, &golds, &schema).unwrap();
        let (c, micro) = rep.micro;
        assert_eq!((c.tp, c.predicted, c.gold), (0, 1, 1));
        assert_eq!(micro.f1, 0.0);
    }

    #[test]
    fn unknown_category_and_misalignment_are_errors() {
        let schema = schema3();
        let golds = vec![gold("a", &[("DATE", "1.2")])];
        let bad = vec![pred("a", &[("BOGUS", "x")])];
        assert!(field_f1(&bad, &golds, &schema).is_err());
        let misaligned = vec![pred("z", &[("DATE", "1.2")])];
        assert!(field_f1(&misaligned, &golds, &schema).is_err());
        let short: Vec<DocPrediction> = Vec::new();
        assert!(field_f1(&short, &golds, &schema).is_err());
    }

    #[test]
    fn mode_config_requires_full_coverage() {
        let schema = schema3();
        let ok = ModeConfig::uniform(&schema, Mode::Tag, 4);
        assert!(ok.validate(&schema).is_ok());

        let partial = CategorySchema::new(vec!["DATE".into()]).unwrap();
        let missing = ModeConfig::uniform(&partial, Mode::Tag, 4);
        assert!(missing.validate(&schema).is_err());

        let mut stray = ModeConfig::uniform(&schema, Mode::Tag, 4);
        stray.set("BOGUS", Mode::Tag, 4);
        assert!(stray.validate(&schema).is_err());

        let mut zero = ModeConfig::uniform(&schema, Mode::Tag, 4);
        zero.set("DATE", Mode::Tag, 0);
        assert!(zero.validate(&schema).is_err());
    }

    #[test]
    fn throughput_rejects_small_datasets() {
        let (params, vocab, schema, lat) = small_setup(9);
        assert!(throughput(&params, &lat, &vocab, &schema, Mode::Tag, 4, &[]).is_err());
        let docs = vec![tiny_doc(); 99];
        assert!(throughput(&params, &lat, &vocab, &schema, Mode::Tag, 4, &docs).is_err());
    }

    #[test]
    fn throughput_measures_both_modes() {
        let (params, vocab, schema, lat) = small_setup(10);
        let docs = vec![tiny_doc(); 100];
        let tag = throughput(&params, &lat, &vocab, &schema, Mode::Tag, 4, &docs).unwrap();
        let cp = throughput(&params, &lat, &vocab, &schema, Mode::CopyPredict, 4, &docs).unwrap();
        assert_eq!(tag.docs, 100);
        assert_eq!(cp.docs, 100);
        assert!(tag.docs_per_sec > 0.0);
        assert!(cp.docs_per_sec > 0.0);
        assert!(tag.seconds > 0.0);
    }
}
