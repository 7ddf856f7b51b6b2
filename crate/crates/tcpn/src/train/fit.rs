//! The optimization loop: shuffled mini-batches, adaptive updates with a
//! stepped rate schedule, per-epoch metrics, and checkpointing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, Tensor};
use crate::ckpt;
use crate::doc::{CategorySchema, Document, Vocabulary};
use crate::encoder::encode_document;
use crate::error::{Result, TcpnError};
use crate::infer::{field_f1, infer_document, DocPrediction, Mode, ModeConfig};
use crate::lattice::{build_lattice, LatticeLayout, LatticeParams};
use crate::model::{ModelConfig, ModelParams, TOKEN_EMBED};
use crate::train::loss::{doc_loss, LossWeights};
use crate::train::optim::Adadelta;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Initial global rate; multiplied by 0.1 at the start of each decay
    /// epoch.
    pub lr: f64,
    /// 1-based epochs whose start applies one x0.1 decay each.
    pub decay_epochs: Vec<usize>,
    /// Evaluate train F1 every this many epochs; 0 disables evaluation.
    pub eval_every: usize,
    /// Stop once the weighted epoch loss drops below this.
    pub early_stop_loss: Option<f64>,
    /// Stop at an evaluated epoch where both modes reach F1 = 1.
    pub early_stop_on_perfect_f1: bool,
    /// Decode horizon for the train-time evaluation pass.
    pub max_len: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 450,
            batch_size: 4,
            seed: 0,
            lr: 1.0,
            decay_epochs: vec![300, 400],
            eval_every: 25,
            early_stop_loss: None,
            early_stop_on_perfect_f1: false,
            max_len: 32,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_len == 0 {
            return Err(TcpnError::Config("epochs, batch_size and max_len must be positive".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(TcpnError::Config(format!("rate {} must be positive", self.lr)));
        }
        for &d in &self.decay_epochs {
            if d == 0 || d > self.epochs {
                return Err(TcpnError::Config(format!(
                    "decay epoch {} outside 1..={}",
                    d, self.epochs
                )));
            }
        }
        if self.weights.lambda_s < 0.0 || self.weights.lambda_c < 0.0 || self.weights.lambda_n < 0.0
        {
            return Err(TcpnError::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One line of the training log. Evaluation fields stay empty off eval
/// epochs.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_s: f64,
    pub loss_c: f64,
    pub loss_n: f64,
    pub f1_tag: Option<f64>,
    pub f1_cp: Option<f64>,
}

pub struct FitOutcome {
    pub params: ModelParams,
    pub metrics: Vec<EpochMetrics>,
    pub epochs_run: usize,
}

fn train_f1(
    params: &ModelParams,
    lat: &LatticeParams,
    vocab: &Vocabulary,
    schema: &CategorySchema,
    docs: &[Document],
    mode: Mode,
    max_len: usize,
) -> Result<f64> {
    let modes = ModeConfig::uniform(schema, mode, max_len);
    let mut preds = Vec::with_capacity(docs.len());
    for doc in docs {
        let fields = infer_document(params, lat, vocab, schema, &modes, doc)?;
        preds.push(DocPrediction {
            doc_id: doc.doc_id.clone(),
            fields: fields.into_iter().map(|(k, v)| (k, v.text)).collect(),
        });
    }
    Ok(field_f1(&preds, docs, schema)?.micro.1.f1)
}

/// Trains from scratch on the whole corpus. Deterministic under the config
/// seed: initialization, shuffles and updates all derive from it.
pub fn fit(
    docs: &[Document],
    vocab: &Vocabulary,
    schema: &CategorySchema,
    model_cfg: ModelConfig,
    lat: &LatticeParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(model_cfg, &mut rng)?;
    fit_inner(params, rng, docs, vocab, schema, lat, cfg, out_dir)
}

/// Continues training from existing parameters; shuffles still derive from
/// the config seed.
pub fn fit_from(
    initial: ModelParams,
    docs: &[Document],
    vocab: &Vocabulary,
    schema: &CategorySchema,
    lat: &LatticeParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    fit_inner(initial, rng, docs, vocab, schema, lat, cfg, out_dir)
}

#[allow(clippy::too_many_arguments)]
fn fit_inner(
    mut params: ModelParams,
    mut rng: ChaCha20Rng,
    docs: &[Document],
    vocab: &Vocabulary,
    schema: &CategorySchema,
    lat: &LatticeParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome> {
    if docs.is_empty() {
        return Err(TcpnError::Config("training corpus is empty".into()));
    }
    let layouts: Vec<LatticeLayout> =
        docs.iter().map(|d| build_lattice(d, lat)).collect::<Result<_>>()?;
    let tokens: Vec<Vec<char>> =
        layouts.iter().map(|l| l.placements.iter().map(|p| p.token).collect()).collect();

    let mut opt = Adadelta::new();
    let mut lr = cfg.lr;
    let d = params.cfg.d;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match out_dir {
        Some(dir) => Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?)),
        None => None,
    };

    let mut metrics = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.decay_epochs.contains(&epoch) {
            lr *= 0.1;
        }
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(&mut rng);

        let mut sum_s = 0.0;
        let mut sum_c = 0.0;
        let mut sum_n = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            for &di in batch {
                let doc = &docs[di];
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let f = encode_document(&mut g, &bound, &params.cfg, &layouts[di], vocab);
                if g.value(f).data().iter().any(|v| !v.is_finite()) {
                    return Err(TcpnError::NonFiniteLoss { doc_id: doc.doc_id.clone() });
                }
                let loss = doc_loss(
                    &mut g,
                    &bound,
                    &params.cfg,
                    f,
                    &tokens[di],
                    schema,
                    &doc.ground_truth,
                    vocab,
                    &cfg.weights,
                    None,
                );
                let total = g.value(loss.total).data()[0];
                if !total.is_finite() {
                    return Err(TcpnError::NonFiniteLoss { doc_id: doc.doc_id.clone() });
                }
                sum_s += loss.seq;
                sum_c += loss.cls;
                sum_n += loss.sup;
                g.backward(loss.total);
                for (name, grad) in params.collect_grads(&g, &bound) {
                    match acc.get_mut(&name) {
                        Some(t) => {
                            t.data_mut().iter_mut().zip(grad.data()).for_each(|(a, b)| *a += b)
                        }
                        None => {
                            acc.insert(name, grad);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in acc.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            // The pad embedding stays pinned at zero.
            if let Some(t) = acc.get_mut(TOKEN_EMBED) {
                t.data_mut()[..d].iter_mut().for_each(|v| *v = 0.0);
            }
            opt.step(&mut params, &acc, lr);
        }

        let inv = 1.0 / docs.len() as f64;
        let (loss_s, loss_c, loss_n) = (sum_s * inv, sum_c * inv, sum_n * inv);
        let evaluate = cfg.eval_every != 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let (f1_tag, f1_cp) = if evaluate {
            (
                Some(train_f1(&params, lat, vocab, schema, docs, Mode::Tag, cfg.max_len)?),
                Some(train_f1(&params, lat, vocab, schema, docs, Mode::CopyPredict, cfg.max_len)?),
            )
        } else {
            (None, None)
        };
        let m = EpochMetrics { epoch, loss_s, loss_c, loss_n, f1_tag, f1_cp };
        if let Some(out) = log.as_mut() {
            serde_json::to_writer(&mut *out, &m).map_err(|e| TcpnError::Config(e.to_string()))?;
            out.write_all(b"\n")?;
            out.flush()?;
        }
        metrics.push(m);
        epochs_run = epoch;

        if let Some(dir) = out_dir {
            if cfg.decay_epochs.contains(&epoch) {
                let path = dir.join(format!("ckpt-epoch{:04}.json", epoch));
                ckpt::save(&path, &params, vocab, schema, lat)?;
            }
        }

        let weighted = cfg.weights.lambda_s * loss_s
            + cfg.weights.lambda_c * loss_c
            + cfg.weights.lambda_n * loss_n;
        let stop_loss = cfg.early_stop_loss.is_some_and(|t| weighted < t);
        let stop_f1 = cfg.early_stop_on_perfect_f1
            && f1_tag == Some(1.0)
            && f1_cp == Some(1.0);
        if stop_loss || stop_f1 {
            break;
        }
    }

    if let Some(dir) = out_dir {
        ckpt::save(&dir.join("ckpt-final.json"), &params, vocab, schema, lat)?;
    }
    Ok(FitOutcome { params, metrics, epochs_run })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc::{BoundingBox, Utterance};
    use crate::train::loss::DocPlan;

    fn u(text: &str, x: f64, y: f64) -> Utterance {
        Utterance {
            text: text.to_string(),
            bbox: BoundingBox {
                x0: x,
                y0: y,
                x1: x + 14.0 * text.chars().count() as f64,
                y1: y + 18.0,
            },
        }
    }

    fn model_cfg(vocab: &Vocabulary, schema: &CategorySchema) -> ModelConfig {
        ModelConfig {
            d: 16,
            depth: 1,
            use_coord: true,
            use_unet: false,
            use_residual: true,
            vocab_size: vocab.len(),
            num_categories: schema.len(),
            max_len: 16,
        }
    }

    /// Fastest memorization target: a two-character value whose characters
    /// appear nowhere else.
    fn toy_doc() -> Document {
        Document {
            doc_id: "toy0".into(),
            utterances: vec![u("DT:", 10.0, 10.0), u("XY", 80.0, 10.0), u("pad", 10.0, 40.0)],
            ground_truth: [("DATE".to_string(), "XY".to_string())].into_iter().collect(),
        }
    }

    fn toy_setup() -> (Vec<Document>, Vocabulary, CategorySchema, ModelConfig, LatticeParams) {
        let docs = vec![toy_doc()];
        let vocab = Vocabulary::build(&docs, 1);
        let schema = CategorySchema::new(vec!["DATE".into()]).unwrap();
        let cfg = model_cfg(&vocab, &schema);
        (docs, vocab, schema, cfg, LatticeParams::default())
    }

    /// A date-shaped value with internal repeats: representative loss
    /// dynamics, including the transient spikes of the gated terms.
    fn date_setup() -> (Vec<Document>, Vocabulary, CategorySchema, ModelConfig, LatticeParams) {
        let docs = vec![Document {
            doc_id: "date0".into(),
            utterances: vec![
                u("DT:", 10.0, 10.0),
                u("12.03.2021", 80.0, 10.0),
                u("pad", 10.0, 40.0),
            ],
            ground_truth: [("DATE".to_string(), "12.03.2021".to_string())].into_iter().collect(),
        }];
        let vocab = Vocabulary::build(&docs, 1);
        let schema = CategorySchema::new(vec!["DATE".into()]).unwrap();
        let cfg = model_cfg(&vocab, &schema);
        (docs, vocab, schema, cfg, LatticeParams::default())
    }

    /// Five documents, one four-letter value each, letters unique within a
    /// document: copying has to track positions to generalize across docs.
    fn corpus_setup() -> (Vec<Document>, Vocabulary, CategorySchema, ModelConfig, LatticeParams) {
        let values = ["kite", "flux", "grab", "pond", "demy"];
        let docs: Vec<Document> = values
            .iter()
            .enumerate()
            .map(|(i, v)| Document {
                doc_id: format!("c{:02}", i),
                utterances: vec![u("NM:", 10.0, 10.0), u(v, 80.0, 10.0), u("zw", 10.0, 40.0)],
                ground_truth: [("NAME".to_string(), v.to_string())].into_iter().collect(),
            })
            .collect();
        let vocab = Vocabulary::build(&docs, 1);
        let schema = CategorySchema::new(vec!["NAME".into()]).unwrap();
        let cfg = model_cfg(&vocab, &schema);
        (docs, vocab, schema, cfg, LatticeParams::default())
    }

    fn quick_train(
        epochs: usize,
        eval_every: usize,
        out: Option<&Path>,
    ) -> (FitOutcome, Vec<Document>, Vocabulary, CategorySchema, LatticeParams) {
        let (docs, vocab, schema, cfg, lat) = toy_setup();
        let tc = TrainConfig {
            epochs,
            batch_size: 4,
            seed: 7,
            eval_every,
            decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let out = fit(&docs, &vocab, &schema, cfg, &lat, &tc, out).unwrap();
        (out, docs, vocab, schema, lat)
    }

    #[test]
    fn one_doc_overfit_drives_sequence_loss_down() {
        let (out, ..) = quick_train(200, 0, None);
        let last = out.metrics.last().unwrap();
        assert!(last.loss_s < 0.01, "sequence loss stuck at {}", last.loss_s);
        assert_eq!(out.epochs_run, 200);
        assert_eq!(out.metrics.len(), 200);
    }

    #[test]
    fn training_curve_descends_with_only_transient_spikes() {
        let (docs, vocab, schema, cfg, lat) = date_setup();
        let tc = TrainConfig {
            epochs: 150,
            batch_size: 4,
            seed: 7,
            eval_every: 0,
            decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let out = fit(&docs, &vocab, &schema, cfg, &lat, &tc, None).unwrap();
        let total: Vec<f64> =
            out.metrics.iter().map(|m| m.loss_s + m.loss_c + m.loss_n).collect();
        // Every rise must fall back within 5% of its pre-spike level inside
        // ten epochs; the de-spiked envelope is what decreases.
        for i in 0..total.len() - 1 {
            if total[i + 1] <= total[i] {
                continue;
            }
            if i + 11 >= total.len() {
                continue;
            }
            let recovered =
                total[i + 2..=i + 11].iter().any(|&v| v <= total[i] * 1.05 + 1e-9);
            assert!(recovered, "spike at epoch {} ({} -> {}) never recovered", i + 1, total[i], total[i + 1]);
        }
        let first = total[0];
        let last = total[total.len() - 1];
        assert!(last < first * 0.5, "no net descent: {} -> {}", first, last);
    }

    #[test]
    fn corpus_overfit_aligns_attention_and_reproduces_fields() {
        let (docs, vocab, schema, cfg, lat) = corpus_setup();
        let tc = TrainConfig {
            epochs: 800,
            batch_size: 4,
            seed: 7,
            eval_every: 25,
            decay_epochs: vec![],
            early_stop_on_perfect_f1: true,
            ..TrainConfig::default()
        };
        let out = fit(&docs, &vocab, &schema, cfg, &lat, &tc, None).unwrap();
        assert!(out.epochs_run < 800, "never reached perfect train F1");
        let last = out.metrics.last().unwrap();
        assert_eq!(last.f1_tag, Some(1.0));
        assert_eq!(last.f1_cp, Some(1.0));

        // Both modes read back every ground truth from the one model.
        for doc in &docs {
            let gt = &doc.ground_truth["NAME"];
            for mode in [Mode::Tag, Mode::CopyPredict] {
                let modes = ModeConfig::uniform(&schema, mode, 16);
                let fields =
                    infer_document(&out.params, &lat, &vocab, &schema, &modes, doc).unwrap();
                assert_eq!(&fields["NAME"].text, gt, "{:?} diverged on {}", mode, doc.doc_id);
            }
        }

        // Value letters are unique within each document, so the attention
        // argmax at every gated step must sit exactly on the target token.
        let mut gated = 0;
        for doc in &docs {
            let layout = build_lattice(doc, &lat).unwrap();
            let tokens: Vec<char> = layout.placements.iter().map(|p| p.token).collect();
            let mut g = Graph::new();
            let bound = out.params.bind(&mut g);
            let f = encode_document(&mut g, &bound, &out.params.cfg, &layout, &vocab);
            let loss = doc_loss(
                &mut g,
                &bound,
                &out.params.cfg,
                f,
                &tokens,
                &schema,
                &doc.ground_truth,
                &vocab,
                &LossWeights::default(),
                None,
            );
            let plan: &DocPlan = &loss.plan;
            for (t, want) in doc.ground_truth["NAME"].chars().enumerate() {
                if plan[0][t].gate {
                    gated += 1;
                    let expect = tokens.iter().position(|&c| c == want).unwrap();
                    assert_eq!(
                        plan[0][t].i_star, expect,
                        "{} step {} attends to {:?}",
                        doc.doc_id, t, tokens[plan[0][t].i_star]
                    );
                }
            }
        }
        assert!(gated >= docs.len(), "copy gate fired only {} times", gated);
    }

    #[test]
    fn same_seed_reproduces_checkpoint_and_log_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        quick_train(30, 10, Some(dir_a.path()));
        quick_train(30, 10, Some(dir_b.path()));
        for name in ["ckpt-final.json", "ckpt-final.json.bin", "metrics.jsonl"] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{} differs between identical runs", name);
        }
        let loaded = ckpt::load(&dir_a.path().join("ckpt-final.json")).unwrap();
        assert_eq!(loaded.params.cfg.d, 16);
    }

    #[test]
    fn non_finite_loss_reports_the_document() {
        let (docs, vocab, schema, cfg, lat) = toy_setup();
        let tc = TrainConfig {
            epochs: 3,
            seed: 1,
            eval_every: 0,
            decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut params = ModelParams::init(cfg, &mut rng).unwrap();
        params.param_mut("head.w").data_mut()[0] = f64::NAN;
        match fit_from(params, &docs, &vocab, &schema, &lat, &tc, None) {
            Err(TcpnError::NonFiniteLoss { doc_id }) => assert_eq!(doc_id, "toy0"),
            other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (_docs, vocab, schema, cfg, lat) = toy_setup();
        let bad = TrainConfig { epochs: 10, decay_epochs: vec![11], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let zero = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(zero.validate().is_err());
        let ok = TrainConfig { epochs: 10, decay_epochs: vec![5, 8], ..TrainConfig::default() };
        assert!(ok.validate().is_ok());
        assert!(fit(&[], &vocab, &schema, cfg, &lat, &ok, None).is_err());
    }

    #[test]
    fn eval_epochs_carry_f1_and_others_do_not() {
        let (out, ..) = quick_train(20, 10, None);
        for m in &out.metrics {
            let expect = m.epoch % 10 == 0 || m.epoch == 20;
            assert_eq!(m.f1_tag.is_some(), expect, "epoch {}", m.epoch);
            assert_eq!(m.f1_cp.is_some(), expect, "epoch {}", m.epoch);
            assert!(m.loss_s.is_finite() && m.loss_c.is_finite() && m.loss_n.is_finite());
        }
    }

}
