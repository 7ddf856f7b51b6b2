//! Command line front end: corpus generation, training, evaluation,
//! per-document extraction, gradient checking, and lattice dumps.

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;
use tcpn::autodiff::{grad_check, Graph, Tensor};
use tcpn::ckpt;
use tcpn::config::{parse_noise_target, ConfigFile};
use tcpn::doc::{read_jsonl, write_jsonl, BoundingBox, CategorySchema, Document, Utterance, Vocabulary};
use tcpn::encoder::encode_document;
use tcpn::infer::{field_f1, infer_document, DocPrediction, FieldDetail, Mode, ModeConfig};
use tcpn::lattice::{build_lattice, render, LatticeParams};
use tcpn::model::{ModelConfig, ModelParams};
use tcpn::synth::{generate, inject_ocr_noise, splitmix64, NoiseConfig, NoiseTarget};
use tcpn::train::{doc_loss, fit, LossWeights};
use tcpn::{Result, TcpnError};

#[derive(Parser)]
#[command(name = "tcpn", version, about = "Key information extraction on a text lattice")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic document corpus as JSONL.
    GenData(GenDataArgs),
    /// Train a model on a JSONL corpus and write checkpoints plus metrics.
    Train(TrainArgs),
    /// Score a checkpoint against a labeled JSONL corpus.
    Eval(EvalArgs),
    /// Extract fields from every document, one JSON object per line.
    Infer(InferArgs),
    /// Finite-difference check of the full training loss at a given width.
    GradCheck(GradCheckArgs),
    /// Print the text-art lattice of documents.
    Lattice(LatticeArgs),
}

/// Settings priority everywhere: built-in defaults, then the config file,
/// then explicit command line flags.
#[derive(Args)]
struct GenDataArgs {
    /// Config file with generator keys (num_docs, categories, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of documents.
    #[arg(long)]
    docs: Option<usize>,
    /// Master seed; per-document seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Probability of planting a duplicate of the amount value.
    #[arg(long)]
    duplicate_prob: Option<f64>,
    /// Output JSONL path.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Directory for metrics.jsonl and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Config file with training and model keys (epochs, d, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shuffle and initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct ModeArgs {
    /// Extraction mode applied to every category.
    #[arg(long, value_enum, default_value_t = ModeFlag::Tag)]
    mode: ModeFlag,
    /// Per-category override, repeatable: CATEGORY=tag or CATEGORY=cp.
    #[arg(long = "mode-for", value_name = "CAT=MODE")]
    mode_for: Vec<String>,
    /// Decode step cap per field in cp mode.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct NoiseArgs {
    /// Per-character substitution probability applied before scoring.
    #[arg(long)]
    p_sub: Option<f64>,
    /// Per-character deletion probability applied before scoring.
    #[arg(long)]
    p_del: Option<f64>,
    /// Which characters the noise may touch.
    #[arg(long, value_parser = ["all", "values"])]
    noise_target: Option<String>,
    /// Seed for the noise streams.
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint manifest path.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    modes: ModeArgs,
    #[command(flatten)]
    noise: NoiseArgs,
}

#[derive(Args)]
struct InferArgs {
    /// Corpus to extract from (JSONL; ground truth not required).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint manifest path.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    modes: ModeArgs,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Model width to check at.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Parameter initialization seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct LatticeArgs {
    /// Corpus to rasterize (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Document position in the file (default 0).
    #[arg(long, conflicts_with_all = ["doc_id", "all"])]
    index: Option<usize>,
    /// Document id to look up.
    #[arg(long, conflicts_with = "all")]
    doc_id: Option<String>,
    /// Dump every document.
    #[arg(long)]
    all: bool,
    /// Gap threshold override.
    #[arg(long)]
    r_t: Option<f64>,
    /// Gap divisor override.
    #[arg(long)]
    r_r: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ModeFlag {
    Tag,
    Cp,
}

impl ModeFlag {
    fn to_mode(self) -> Mode {
        match self {
            ModeFlag::Tag => Mode::Tag,
            ModeFlag::Cp => Mode::CopyPredict,
        }
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Tag => "tag",
        Mode::CopyPredict => "cp",
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenData(args) => gen_data(args),
        Cmd::Train(args) => train(args),
        Cmd::Eval(args) => eval(args),
        Cmd::Infer(args) => infer(args),
        Cmd::GradCheck(args) => grad_check_cmd(args),
        Cmd::Lattice(args) => lattice_dump(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::empty()),
    }
}

fn gen_data(args: GenDataArgs) -> Result<i32> {
    let mut file = load_config(&args.config)?;
    let mut cfg = file.gen_config(args.seed.unwrap_or(0))?;
    file.ensure_consumed()?;
    if let Some(n) = args.docs {
        cfg.num_docs = n;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(p) = args.duplicate_prob {
        cfg.duplicate_prob = p;
    }
    cfg.validate()?;
    let docs = generate(&cfg)?;
    write_jsonl(&args.out, &docs)?;
    println!("wrote {} documents to {}", docs.len(), args.out.display());
    Ok(0)
}

fn train(args: TrainArgs) -> Result<i32> {
    let docs = read_jsonl(&args.data)?;
    if docs.is_empty() {
        return Err(TcpnError::Config(format!("{} holds no documents", args.data.display())));
    }
    let vocab = Vocabulary::build(&docs, 1);
    let schema = CategorySchema::from_docs(&docs)?;

    let mut file = load_config(&args.config)?;
    let mut train_cfg = file.train_config()?;
    let base = ModelConfig {
        d: 16,
        depth: 2,
        use_coord: true,
        use_unet: false,
        use_residual: true,
        vocab_size: vocab.len(),
        num_categories: schema.names().len(),
        max_len: train_cfg.max_len,
    };
    let model_cfg = file.model_config(base)?;
    let lat = file.lattice_params()?;
    file.ensure_consumed()?;
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
        train_cfg.decay_epochs.retain(|&d| d <= e);
    }
    train_cfg.validate()?;

    let outcome = fit(&docs, &vocab, &schema, model_cfg, &lat, &train_cfg, Some(&args.out_dir))?;
    let last = outcome.metrics.last().expect("fit always logs at least one epoch");
    println!(
        "trained {} epochs on {} documents; loss {:.6} (seq {:.6}, class {:.6}, suppress {:.6})",
        outcome.epochs_run,
        docs.len(),
        last.loss_s + last.loss_c + last.loss_n,
        last.loss_s,
        last.loss_c,
        last.loss_n
    );
    if let (Some(tag), Some(cp)) = (last.f1_tag, last.f1_cp) {
        println!("train micro-F1: tag {tag:.4}, cp {cp:.4}");
    }
    println!("checkpoint: {}", args.out_dir.join("ckpt-final.json").display());
    Ok(0)
}

fn build_modes(args: &ModeArgs, schema: &CategorySchema, default_max: usize) -> Result<ModeConfig> {
    let max_len = args.max_len.unwrap_or(default_max);
    let mut modes = ModeConfig::uniform(schema, args.mode.to_mode(), max_len);
    for spec in &args.mode_for {
        let (cat, mode) = spec
            .split_once('=')
            .ok_or_else(|| TcpnError::Config(format!("--mode-for {spec:?}: expected CAT=tag or CAT=cp")))?;
        if !schema.names().iter().any(|n| n == cat) {
            return Err(TcpnError::Config(format!("--mode-for names unknown category {cat:?}")));
        }
        let mode = match mode {
            "tag" => Mode::Tag,
            "cp" => Mode::CopyPredict,
            other => return Err(TcpnError::Config(format!("--mode-for mode must be tag or cp, got {other:?}"))),
        };
        modes.set(cat, mode, max_len);
    }
    modes.validate(schema)?;
    Ok(modes)
}

fn noise_from_flags(args: &NoiseArgs) -> Result<Option<NoiseConfig>> {
    if args.p_sub.is_none() && args.p_del.is_none() && args.noise_target.is_none() {
        return Ok(None);
    }
    let cfg = NoiseConfig {
        p_sub: args.p_sub.unwrap_or(0.0),
        p_del: args.p_del.unwrap_or(0.0),
        target: match &args.noise_target {
            Some(t) => parse_noise_target(t)?,
            None => NoiseTarget::All,
        },
    };
    cfg.validate()?;
    Ok(Some(cfg))
}

fn eval(args: EvalArgs) -> Result<i32> {
    let ck = ckpt::load(&args.ckpt)?;
    let mut docs = read_jsonl(&args.data)?;
    if let Some(noise) = noise_from_flags(&args.noise)? {
        docs = docs
            .iter()
            .map(|d| inject_ocr_noise(d, &noise, args.noise.noise_seed))
            .collect::<Result<Vec<_>>>()?;
    }
    let modes = build_modes(&args.modes, &ck.categories, ck.params.cfg.max_len)?;

    let mut predictions = Vec::with_capacity(docs.len());
    for doc in &docs {
        let fields = infer_document(&ck.params, &ck.lattice, &ck.vocab, &ck.categories, &modes, doc)?;
        predictions.push(DocPrediction {
            doc_id: doc.doc_id.clone(),
            fields: fields.into_iter().map(|(k, v)| (k, v.text)).collect(),
        });
    }
    let report = field_f1(&predictions, &docs, &ck.categories)?;

    let mut json = BTreeMap::new();
    for (name, (counts, prf)) in &report.per_category {
        json.insert(name.clone(), row_json(counts, prf));
    }
    let summary = serde_json::json!({
        "per_category": json,
        "micro": row_json(&report.micro.0, &report.micro.1),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));

    println!();
    println!("{:<12} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10}", "category", "tp", "pred", "gold", "precision", "recall", "f1");
    for (name, (counts, prf)) in &report.per_category {
        print_row(name, counts, prf);
    }
    print_row("micro", &report.micro.0, &report.micro.1);
    Ok(0)
}

fn row_json(counts: &tcpn::infer::Counts, prf: &tcpn::infer::Prf) -> serde_json::Value {
    serde_json::json!({
        "tp": counts.tp,
        "predicted": counts.predicted,
        "gold": counts.gold,
        "precision": prf.precision,
        "recall": prf.recall,
        "f1": prf.f1,
    })
}

fn print_row(name: &str, counts: &tcpn::infer::Counts, prf: &tcpn::infer::Prf) {
    println!(
        "{:<12} {:>6} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4}",
        name, counts.tp, counts.predicted, counts.gold, prf.precision, prf.recall, prf.f1
    );
}

fn infer(args: InferArgs) -> Result<i32> {
    let ck = ckpt::load(&args.ckpt)?;
    let docs = read_jsonl(&args.data)?;
    let modes = build_modes(&args.modes, &ck.categories, ck.params.cfg.max_len)?;
    for doc in &docs {
        let fields = infer_document(&ck.params, &ck.lattice, &ck.vocab, &ck.categories, &modes, doc)?;
        let mut out = serde_json::Map::new();
        for (name, field) in fields {
            let mut obj = serde_json::Map::new();
            obj.insert("text".into(), field.text.clone().into());
            obj.insert("mode".into(), mode_name(field.mode).into());
            match &field.detail {
                FieldDetail::Tagged(positions) => {
                    obj.insert("positions".into(), positions.clone().into());
                }
                FieldDetail::Trace(steps) => {
                    let trace: Vec<serde_json::Value> = steps
                        .iter()
                        .map(|s| {
                            serde_json::json!({
                                "token": s.token.to_string(),
                                "source": match s.source {
                                    tcpn::decoder::StepSource::Copy(i) => format!("copy:{i}"),
                                    tcpn::decoder::StepSource::Predict => "predict".to_string(),
                                },
                            })
                        })
                        .collect();
                    obj.insert("trace".into(), trace.into());
                }
            }
            out.insert(name, obj.into());
        }
        let line = serde_json::json!({ "doc_id": doc.doc_id, "fields": out });
        println!("{}", serde_json::to_string(&line).expect("line serializes"));
    }
    Ok(0)
}

/// Checks the complete differentiable path (embedding, encoder, decoder,
/// all three loss terms) against central differences at width `d`. The
/// copy-gate decisions are captured once and held fixed so the loss stays
/// smooth at the checked point. The starting state is randomized: at zero
/// it shrinks reset-gate gradients below finite-difference resolution.
fn grad_check_cmd(args: GradCheckArgs) -> Result<i32> {
    let doc = grad_check_doc();
    let vocab = Vocabulary::build(std::slice::from_ref(&doc), 1);
    let schema = CategorySchema::from_docs(std::slice::from_ref(&doc))?;
    let cfg = ModelConfig {
        d: args.d,
        depth: 1,
        use_coord: true,
        use_unet: false,
        use_residual: true,
        vocab_size: vocab.len(),
        num_categories: schema.names().len(),
        max_len: 8,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(splitmix64(args.seed));
    let mut params = ModelParams::init(cfg, &mut rng)?;
    *params.param_mut("dec.s0") = Tensor::uniform(&[1, cfg.d], -0.8, 0.8, &mut rng);

    let layout = build_lattice(&doc, &LatticeParams::default())?;
    let weights = LossWeights::default();
    let plan = {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = encode_document(&mut g, &bound, &cfg, &layout, &vocab);
        doc_loss(&mut g, &bound, &cfg, f, &layout_tokens(&layout), &schema, &doc.ground_truth, &vocab, &weights, None).plan
    };

    let seeds: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let tokens = layout_tokens(&layout);
    let report = grad_check(
        &seeds,
        |g, ids| {
            let bound = params.bind_ids(ids);
            let f = encode_document(g, &bound, &cfg, &layout, &vocab);
            doc_loss(g, &bound, &cfg, f, &tokens, &schema, &doc.ground_truth, &vocab, &weights, Some(&plan)).total
        },
        1e-4,
    )?;

    let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
    println!(
        "max rel err {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.max_rel_err, names[report.param_index], report.elem_index, report.analytic, report.numeric
    );
    if report.max_rel_err < 1e-4 {
        println!("PASS (threshold 1e-4)");
        Ok(0)
    } else {
        eprintln!("FAIL (threshold 1e-4)");
        Ok(1)
    }
}

fn layout_tokens(layout: &tcpn::lattice::LatticeLayout) -> Vec<char> {
    layout.placements.iter().map(|p| p.token).collect()
}

/// Two rows, multi-step targets, a repeated value character, and one absent
/// category: every loss term contributes gradient.
fn grad_check_doc() -> Document {
    let u = |text: &str, x: f64, y: f64| Utterance {
        text: text.to_string(),
        bbox: BoundingBox { x0: x, y0: y, x1: x + 14.0 * text.chars().count() as f64, y1: y + 18.0 },
    };
    let mut ground_truth = BTreeMap::new();
    ground_truth.insert("AMT".into(), "52".into());
    ground_truth.insert("WORD".into(), "fog".into());
    Document {
        doc_id: "gradcheck0".into(),
        utterances: vec![u("fog", 10.0, 10.0), u("52", 80.0, 10.0), u("f2", 10.0, 40.0)],
        ground_truth,
    }
}

fn lattice_dump(args: LatticeArgs) -> Result<i32> {
    let docs = read_jsonl(&args.data)?;
    if docs.is_empty() {
        return Err(TcpnError::Config(format!("{} holds no documents", args.data.display())));
    }
    let mut params = LatticeParams::default();
    if let Some(x) = args.r_t {
        params.r_t = x;
    }
    if let Some(x) = args.r_r {
        params.r_r = x;
    }
    params.validate()?;

    let selected: Vec<&Document> = if args.all {
        docs.iter().collect()
    } else if let Some(id) = &args.doc_id {
        vec![docs
            .iter()
            .find(|d| &d.doc_id == id)
            .ok_or_else(|| TcpnError::Config(format!("no document with id {id:?}")))?]
    } else {
        let i = args.index.unwrap_or(0);
        vec![docs
            .get(i)
            .ok_or_else(|| TcpnError::Config(format!("index {i} out of range for {} documents", docs.len())))?]
    };

    for doc in selected {
        let layout = build_lattice(doc, &params)?;
        println!("{} ({}x{})", doc.doc_id, layout.height, layout.width);
        println!("{}", render(&layout));
    }
    Ok(0)
}
