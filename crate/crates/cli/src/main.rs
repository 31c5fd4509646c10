//! `skh`: synthesize corpora, train planners, decode, realize and score.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use skh_core::metrics::{aggregate, score_plan, Averaging, PlanScore};
use skh_core::numerics::{grad_check, GradCheckOptions};
use skh_core::planner::{decode, DecodeOptions};
use skh_core::realize::{realize_plan, TemplateLibrary};
use skh_core::schema::{load_corpus, load_plans, save_corpus, write_plans, CorpusMode, Example, PlanRecord};
use skh_core::synth::{generate_with, Rule, SynthConfig};
use skh_core::training::{self, loss_total, split, Checkpoint, LossWeights, MatchingMode, TrainConfig};

#[derive(Parser)]
#[command(name = "skh", version, about = "Structured knowledge hunter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with rule-defined gold plans.
    Synth(SynthArgs),
    /// Train a planner and write its best checkpoint.
    Train(TrainArgs),
    /// Decode a plan per corpus record.
    Plan(PlanArgs),
    /// Realize plans as text.
    Generate(GenerateArgs),
    /// Score predicted plans against gold plans.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients on a toy model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Table,
    Dialogue,
}

impl From<Mode> for CorpusMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Table => CorpusMode::Table,
            Mode::Dialogue => CorpusMode::Dialogue,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleKind {
    TopK,
    Threshold,
    FixedSlots,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    entities: usize,
    #[arg(long, default_value_t = 8)]
    attrs: usize,
    #[arg(long, value_enum, default_value = "top-k")]
    rule: RuleKind,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value = "points")]
    score: String,
    #[arg(long, value_delimiter = ',', default_value = "points,rebounds,minutes")]
    slots: Vec<String>,
    /// Minimum score for the threshold rule.
    #[arg(long, default_value_t = 20)]
    min: i64,
    /// Entities selected by the fixed-slots rule.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    fixed: Vec<usize>,
    /// Allow equal score values within an example.
    #[arg(long)]
    allow_score_ties: bool,
    #[arg(long, value_enum, default_value = "table")]
    mode: Mode,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON object with training configuration fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Validation corpus; without it `--data` is split 80/10/10.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss trace path (default: `<out>.trace.jsonl`).
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    no_repeat: Option<bool>,
    #[arg(long)]
    n_fusion: Option<usize>,
    /// `k,e,m`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    loss_weights: Option<Vec<f64>>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    matching_mode: Option<Matching>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Matching {
    Verbatim,
    Indicator,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    no_repeat: Option<bool>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Plan file to realize.
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pred: Option<PathBuf>,
    /// Checkpoint to decode plans with instead of `--pred`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Average {
    Micro,
    Macro,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    mode: Mode,
    #[arg(long, value_enum, default_value = "micro")]
    averaging: Average,
    /// Per-example records plus a final aggregate record.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    d_model: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Elements sampled per parameter (all when omitted).
    #[arg(long)]
    max_elems: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad input or configuration; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_status(err: &anyhow::Error) -> u8 {
    use skh_core::Error as E;
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::NonFinite(_) | E::DegenerateMask { .. } | E::DegenerateStep | E::Shape { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", path.display())))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn templates(path: Option<&Path>) -> anyhow::Result<TemplateLibrary> {
    match path {
        Some(p) => {
            require_file(p)?;
            Ok(TemplateLibrary::load(p)?)
        }
        None => Ok(TemplateLibrary::default()),
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let rule = match a.rule {
        RuleKind::TopK => Rule::TopKByScore { k: a.k, score: a.score, slots: a.slots },
        RuleKind::Threshold => Rule::Threshold { min: a.min, score: a.score, slots: a.slots },
        RuleKind::FixedSlots => Rule::FixedSlots { entities: a.fixed, slots: a.slots },
    };
    let cfg = SynthConfig {
        seed: a.seed,
        n_examples: a.n,
        n_entities: a.entities,
        n_attrs: a.attrs,
        rule,
        dialogue: matches!(a.mode, Mode::Dialogue),
        distinct_scores: !a.allow_score_ties,
    };
    cfg.validate()?;
    let lib = templates(a.templates.as_deref())?;
    let data = generate_with(&cfg, &lib)?;
    save_corpus(&a.out, &data)?;
    info!("wrote {} examples to {}", data.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(m) = a.mode {
        cfg.model.mode = m.into();
    }
    if let Some(v) = a.beam {
        cfg.beam = v;
    }
    if let Some(v) = a.no_repeat {
        cfg.no_repeat = v;
    }
    if let Some(v) = a.n_fusion {
        cfg.model.n_fusion = v;
    }
    if let Some(w) = &a.loss_weights {
        cfg.loss_weights = LossWeights { k: w[0], e: w[1], m: w[2] };
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.dropout {
        cfg.model.dropout = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.d_model {
        cfg.model.d_model = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(m) = a.matching_mode {
        cfg.matching_mode = match m {
            Matching::Verbatim => MatchingMode::Verbatim,
            Matching::Indicator => MatchingMode::Indicator,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = train_config(&a)?;
    require_file(&a.data)?;
    let data = load_corpus(&a.data, cfg.model.mode)?;
    let val_file = match &a.val {
        Some(p) => {
            require_file(p)?;
            Some(load_corpus(p, cfg.model.mode)?)
        }
        None => None,
    };
    let (train_set, val_set) = match &val_file {
        Some(v) => (&data[..], &v[..]),
        None => {
            let (t, v, _) = split(&data);
            (t, v)
        }
    };
    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".trace.jsonl");
        p.into()
    });
    let mut trace = fs::File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?;
    let mut io_err = None;
    let out = training::train(train_set, val_set, &cfg, |r| {
        let line = serde_json::to_string(r).expect("trace records serialize");
        if let training::TraceRecord::Epoch { .. } = r {
            info!("{line}");
        } else {
            log::debug!("{line}");
        }
        if let Err(e) = writeln!(trace, "{line}") {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", trace_path.display()));
    }
    out.best.save(&a.out)?;
    println!(
        "best epoch {} val KS-F1 {:.4}; checkpoint {}",
        out.best.header.best_epoch,
        out.best.header.best_val_ks_f1,
        a.out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<(Checkpoint, skh_core::model::Model)> {
    require_file(path)?;
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.to_model()?;
    Ok((ckpt, model))
}

fn plan_records(
    ckpt: &Checkpoint,
    model: &skh_core::model::Model,
    data: &[Example],
    overrides: (Option<usize>, Option<bool>, Option<usize>),
) -> anyhow::Result<Vec<PlanRecord>> {
    let mut opts: DecodeOptions = ckpt.header.config.decode_options();
    if let Some(b) = overrides.0 {
        opts.beam = b;
    }
    if let Some(r) = overrides.1 {
        opts.no_repeat = r;
    }
    if let Some(m) = overrides.2 {
        opts.max_len = m;
    }
    if opts.beam == 0 || opts.max_len == 0 {
        return Err(usage("beam and max-len must be at least 1"));
    }
    if opts.max_len >= model.config.max_steps {
        return Err(usage(format!("max-len must be below {}", model.config.max_steps)));
    }
    data.iter()
        .map(|ex| {
            let d = decode(model, &ex.input, &opts)?;
            Ok(PlanRecord::from_plan(&ex.id, &d.plan, &ex.input, Some(d.log_prob)))
        })
        .collect()
}

fn cmd_plan(a: PlanArgs) -> anyhow::Result<()> {
    let (ckpt, model) = load_model(&a.model)?;
    require_file(&a.data)?;
    let data = load_corpus(&a.data, model.config.mode)?;
    let records = plan_records(&ckpt, &model, &data, (a.beam, a.no_repeat, a.max_len))?;
    let mut buf = Vec::new();
    write_plans(&mut buf, &records)?;
    write_atomic(&a.out, &buf)?;
    info!("wrote {} plans to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let lib = templates(a.templates.as_deref())?;
    require_file(&a.data)?;
    let (records, mode) = match (&a.pred, &a.model) {
        (Some(p), _) => {
            require_file(p)?;
            (load_plans(p)?, a.mode.map_or(CorpusMode::Table, Into::into))
        }
        (None, Some(m)) => {
            let (ckpt, model) = load_model(m)?;
            let data = load_corpus(&a.data, model.config.mode)?;
            (plan_records(&ckpt, &model, &data, (None, None, None))?, model.config.mode)
        }
        (None, None) => bail!(usage("one of --pred or --model is required")),
    };
    let data = load_corpus(&a.data, mode)?;
    let by_id: std::collections::HashMap<&str, &Example> = data.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut buf = Vec::new();
    for r in &records {
        let ex = by_id
            .get(r.id.as_str())
            .ok_or_else(|| usage(format!("plan {} has no corpus record", r.id)))?;
        let plan = r.to_plan(&ex.input)?;
        let text = realize_plan(&plan, &ex.input, &lib);
        serde_json::to_writer(&mut buf, &serde_json::json!({ "id": r.id, "text": text }))?;
        buf.push(b'\n');
    }
    write_atomic(&a.out, &buf)?;
    Ok(())
}

fn summary_table(agg: &PlanScore, n: usize) -> String {
    let rows = [
        ("CS-P", agg.cs_p),
        ("CS-R", agg.cs_r),
        ("CS-F1", agg.cs_f1),
        ("CO", agg.co),
        ("CO-DLD", agg.co_dld),
        ("KS-P", agg.ks_p),
        ("KS-R", agg.ks_r),
        ("KS-F1", agg.ks_f1),
    ];
    let mut s = format!("{:<8} {:>8}\n", "metric", format!("n={n}"));
    for (name, v) in rows {
        s.push_str(&format!("{name:<8} {:>8.4}\n", v));
    }
    s
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    require_file(&a.pred)?;
    require_file(&a.gold)?;
    let gold = load_corpus(&a.gold, a.mode.into())?;
    let preds = load_plans(&a.pred)?;
    let by_id: std::collections::HashMap<&str, &PlanRecord> = preds.iter().map(|r| (r.id.as_str(), r)).collect();
    if let Some(extra) = preds.iter().find(|r| !gold.iter().any(|g| g.id == r.id)) {
        return Err(usage(format!("prediction {} has no gold record", extra.id)));
    }
    let mut scores = Vec::with_capacity(gold.len());
    let mut lines = Vec::new();
    for ex in &gold {
        let g = ex
            .gold_plan
            .as_ref()
            .ok_or_else(|| usage(format!("gold record {} has no gold_plan", ex.id)))?;
        let rec = by_id
            .get(ex.id.as_str())
            .ok_or_else(|| usage(format!("no prediction for {}", ex.id)))?;
        let s = score_plan(&rec.to_plan(&ex.input)?, g, &ex.input);
        lines.push(serde_json::json!({ "id": ex.id, "score": s }));
        scores.push(s);
    }
    let averaging = match a.averaging {
        Average::Micro => Averaging::Micro,
        Average::Macro => Averaging::Macro,
    };
    let agg = aggregate(&scores, averaging);
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        for l in &lines {
            serde_json::to_writer(&mut buf, l)?;
            buf.push(b'\n');
        }
        serde_json::to_writer(&mut buf, &serde_json::json!({ "aggregate": agg, "averaging": format!("{averaging:?}").to_lowercase(), "n": scores.len() }))?;
        buf.push(b'\n');
        write_atomic(out, &buf)?;
    }
    print!("{}", summary_table(&agg, scores.len()));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    if a.d_model == 0 || !a.d_model.is_multiple_of(2) {
        return Err(usage("d-model must be a positive even number"));
    }
    let data = generate_with(
        &SynthConfig {
            seed: a.seed,
            n_examples: 1,
            n_entities: 2,
            n_attrs: 3,
            ..SynthConfig::default()
        },
        &TemplateLibrary::default(),
    )?;
    let ex = &data[0];
    let mut cfg = skh_core::model::ModelConfig {
        d_model: a.d_model,
        d_emb: a.d_model,
        d_ff: 2 * a.d_model,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        max_steps: 16,
        embed: skh_core::embed::EmbedOptions { word_min_count: 1, ..Default::default() },
        ..Default::default()
    };
    cfg.n_heads = 2;
    let vocab = skh_core::embed::Vocab::build(&data, &cfg.embed);
    let model = skh_core::model::Model::new(cfg, vocab, a.seed)?;
    let gold = ex.gold_plan.clone().expect("synthetic gold");
    let start = std::time::Instant::now();
    let report = grad_check(
        |g, p| {
            let mut m = model.clone();
            m.params = p.clone();
            let (l, _) = loss_total(g, &m, &ex.input, &gold, LossWeights::default(), MatchingMode::Verbatim, true)?;
            Ok(l)
        },
        &model.params,
        a.eps,
        &GradCheckOptions { max_elems_per_param: a.max_elems, seed: a.seed, training: None },
    )?;
    let max = report.max_rel_err();
    if let Some(out) = &a.out {
        let params: Vec<_> = report
            .params
            .iter()
            .map(|p| serde_json::json!({ "name": p.name, "checked": p.checked, "max_abs_err": p.max_abs_err, "max_rel_err": p.max_rel_err }))
            .collect();
        let doc = serde_json::json!({ "max_rel_err": max, "tol": a.tol, "params": params });
        write_atomic(out, format!("{doc}\n").as_bytes())?;
    }
    let worst = report.worst().map_or("-", |p| p.name.as_str());
    println!(
        "{} parameters, max relative error {max:.3e} ({worst}), {:.1}s",
        report.params.len(),
        start.elapsed().as_secs_f64()
    );
    if max.is_nan() || max >= a.tol {
        bail!("gradient check failed: {max:.3e} >= {:.1e}", a.tol);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SKH_LOG_LEVEL", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
