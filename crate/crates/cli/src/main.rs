//! Command-line front end for the sequential tag recommender.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use mlp4str::checkpoint::Checkpoint;
use mlp4str::config::RunConfig;
use mlp4str::corpus::ingest::{JsonlPosts, RawPost, XmlPosts};
use mlp4str::corpus::{build_corpus, split_leave_one_out, Corpus, SplitPart};
use mlp4str::encoder::{load_precomputed, EmbeddingStore, EncoderMode};
use mlp4str::eval::{evaluate_split, format_sweep_tsv, format_table, format_tsv, sweep_history_length};
use mlp4str::model::{top_b, AblationMode, DocInput};
use mlp4str::synth::{generate, SynthConfig};
use mlp4str::train::{grad_check, model_config, train_loop, Features, GradCheckSpec};

#[derive(Parser)]
#[command(name = "mlp4str", version, about = "Sequential tag recommendation with MLP mixers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus directory from a StackExchange Posts.xml or a JSONL file.
    Ingest(IngestArgs),
    /// Recompute the leave-one-out split of a corpus.
    Split(SplitArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation or test split.
    Eval(EvalArgs),
    /// Recommend tags for a post by a known user.
    Recommend(RecommendArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train one model per history length and report test F1@5.
    Sweep(SweepArgs),
    /// Write a synthetic JSONL corpus with sequential tag structure.
    GenSynth(GenSynthArgs),
}

#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON run configuration; keys not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Shorthand for `--set train.max_epochs=N`.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Shorthand for `--set mixer.d_h=N`.
    #[arg(long)]
    d_h: Option<usize>,
    /// Shorthand for `--set mixer.u=N`.
    #[arg(long)]
    u: Option<usize>,
    /// Shorthand for `--set ablation=MODE`.
    #[arg(long)]
    ablation: Option<AblationMode>,
    /// Precomputed EMB embeddings; switches the encoder to precomputed mode.
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        let mut push = |k: &str, v: String| overrides.push(format!("{k}={v}"));
        if let Some(s) = self.seed {
            push("train.seed", s.to_string());
        }
        if let Some(e) = self.max_epochs {
            push("train.max_epochs", e.to_string());
        }
        if let Some(d) = self.d_h {
            push("mixer.d_h", d.to_string());
        }
        if let Some(u) = self.u {
            push("mixer.u", u.to_string());
        }
        if let Some(a) = self.ablation {
            push("ablation", a.label().to_string());
        }
        if let Some(p) = &self.embeddings {
            push("encoder.mode", "precomputed".into());
            push("encoder.embeddings", json!(p).to_string());
        }
        let cfg = base.with_overrides(&overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct IngestArgs {
    /// StackExchange Posts.xml dump.
    #[arg(long, conflicts_with = "jsonl", required_unless_present = "jsonl")]
    xml: Option<PathBuf>,
    /// JSONL posts with keys id, user, created, title, body, tags.
    #[arg(long)]
    jsonl: Option<PathBuf>,
    /// Output corpus directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Where to write the split JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Checkpoint path; the JSON sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also write the tag representations of the best model as an EMB file.
    #[arg(long)]
    tags_emb: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output prefix; writes PREFIX.txt, PREFIX.tsv and PREFIX.json.
    #[arg(long)]
    out: PathBuf,
    /// Split part to evaluate.
    #[arg(long, default_value = "test", value_parser = parse_part)]
    split: SplitPart,
    /// Scoring modes, one report row each. Defaults to the trained mode.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<AblationMode>,
    /// Cut-offs; defaults to the checkpoint configuration.
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Average per-post F1 instead of composing F1 from averaged P and R.
    #[arg(long)]
    per_post_f1: bool,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// User id as it appears in the corpus.
    #[arg(long)]
    user: String,
    #[arg(long, default_value = "")]
    title: String,
    #[arg(long, default_value = "")]
    body: String,
    /// Score an existing corpus post of the user instead of new text; its
    /// history is the posts before it.
    #[arg(long)]
    post_id: Option<u64>,
    /// Number of tags; defaults to the checkpoint configuration.
    #[arg(long)]
    b: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value = "full")]
    ablation: AblationMode,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// History lengths to train, comma separated.
    #[arg(long = "u-values", value_delimiter = ',', required = true)]
    u_values: Vec<usize>,
    /// TSV output path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    posts_per_user: Option<usize>,
    #[arg(long)]
    tags: Option<usize>,
    #[arg(long)]
    max_stride: Option<usize>,
    #[arg(long)]
    carry: Option<f64>,
    #[arg(long)]
    text_signal: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_part(s: &str) -> Result<SplitPart, String> {
    match s {
        "train" => Ok(SplitPart::Train),
        "val" => Ok(SplitPart::Val),
        "test" => Ok(SplitPart::Test),
        other => Err(format!("unknown split part {other:?}; expected train, val or test")),
    }
}

/// An error with its process exit code.
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        CliError { code: 2, message: message.into() }
    }
}

impl From<mlp4str::Error> for CliError {
    fn from(e: mlp4str::Error) -> Self {
        use mlp4str::Error::*;
        let code = match e {
            Config(_) => 1,
            Io { .. } | Data(_) | Shape { .. } => 2,
            Numerical(_) => 3,
        };
        CliError { code, message: e.to_string() }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Recommend(a) => recommend(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep(a),
        Command::GenSynth(a) => gen_synth(a),
    }
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let cfg = a.config.resolve()?;
    let (posts, stats) = match (&a.xml, &a.jsonl) {
        (Some(path), _) => {
            let mut reader = XmlPosts::open(path)?;
            let posts: Vec<RawPost> = reader.by_ref().collect::<Result<_, _>>()?;
            (posts, reader.stats())
        }
        (None, Some(path)) => {
            let mut reader = JsonlPosts::open(path)?;
            let posts: Vec<RawPost> = reader.by_ref().collect::<Result<_, _>>()?;
            (posts, reader.stats())
        }
        (None, None) => return Err(CliError::usage("one of --xml or --jsonl is required")),
    };
    info!(
        "read {} posts ({} malformed, {} filtered)",
        stats.emitted, stats.malformed, stats.filtered
    );
    let corpus = build_corpus(posts, &cfg.corpus)?;
    corpus.save(&a.out)?;
    info!(
        "wrote {}: {} posts, {} users, {} tags, {} tokens",
        a.out.display(),
        corpus.posts.len(),
        corpus.users.len(),
        corpus.n_tags(),
        corpus.tokens.len()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<(), CliError> {
    let corpus = Corpus::load(&a.corpus)?;
    let split = split_leave_one_out(&corpus.users)?;
    split.save(&a.out)?;
    info!(
        "train {}, val {}, test {}",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn embeddings_for(cfg: &RunConfig, corpus: &Corpus) -> Result<Option<EmbeddingStore<f32>>, CliError> {
    match (cfg.encoder.mode, &cfg.encoder.embeddings) {
        (EncoderMode::Internal, _) => Ok(None),
        (EncoderMode::Precomputed, Some(path)) => Ok(Some(load_precomputed(path, corpus, None)?)),
        (EncoderMode::Precomputed, None) => {
            Err(CliError::usage("precomputed mode needs encoder.embeddings"))
        }
    }
}

/// In precomputed mode the hidden size comes from the embedding file.
fn align_dim(cfg: &mut RunConfig, store: &Option<EmbeddingStore<f32>>) {
    if let Some(s) = store {
        if cfg.mixer.d_h != s.dim() {
            info!("using embedding dimension {} as d_h", s.dim());
            cfg.mixer.d_h = s.dim();
        }
    }
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = a.config.resolve()?;
    let corpus = Corpus::load(&a.corpus)?;
    let store = embeddings_for(&cfg, &corpus)?;
    align_dim(&mut cfg, &store);
    let mc = model_config(&corpus, cfg.mixer, cfg.encoder.mode, cfg.train.weights, cfg.ablation);
    let trained = train_loop(&corpus, store.as_ref(), mc, &cfg.train)?;
    info!(
        "best epoch {} with val loss {:.5}",
        trained.epoch, trained.best_val_loss
    );
    if let Some(path) = &a.tags_emb {
        trained.tags.write_emb(path)?;
    }
    let ckpt = Checkpoint::from_trained(trained, &cfg);
    ckpt.save(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    let run = &ckpt.meta.run;
    let store = embeddings_for(run, &corpus)?;
    let ks = if a.ks.is_empty() { run.eval.ks.clone() } else { a.ks };
    let modes = if a.modes.is_empty() { vec![ckpt.model.config.ablation] } else { a.modes };
    let per_post_f1 = a.per_post_f1 || run.eval.per_post_f1;
    let mut reports = Vec::new();
    for mode in modes {
        reports.push(evaluate_split(
            &ckpt.model,
            &ckpt.tags,
            &corpus,
            store.as_ref(),
            a.split,
            &ks,
            mode,
            per_post_f1,
        )?);
    }
    let table = format_table(&reports);
    print!("{table}");
    let write = |ext: &str, text: String| -> Result<(), CliError> {
        let path = with_suffix(&a.out, ext);
        std::fs::write(&path, text).map_err(io_err(&path))
    };
    write("txt", table)?;
    write("tsv", format_tsv(&reports))?;
    let echo = json!({
        "checkpoint": a.checkpoint,
        "split": format!("{:?}", a.split).to_lowercase(),
        "config": run,
        "reports": reports,
    });
    write("json", serde_json::to_string_pretty(&echo).expect("report serializes") + "\n")
}

fn recommend(a: RecommendArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    let run = &ckpt.meta.run;
    if ckpt.model.config.n_tags != corpus.n_tags() {
        return Err(CliError::data("checkpoint and corpus have different tag vocabularies"));
    }
    let user = corpus
        .users
        .iter()
        .position(|u| u.user_id == a.user)
        .ok_or_else(|| CliError::data(format!("unknown user id {:?}", a.user)))?;
    let store = embeddings_for(run, &corpus)?;
    let features = Features {
        corpus: &corpus,
        precomputed: store.as_ref(),
        tags: &ckpt.tags,
        u: ckpt.model.config.mixer.u,
    };

    let tokens;
    let example = match a.post_id {
        Some(id) => {
            let history = &corpus.users[user];
            let position = history
                .post_indices
                .iter()
                .position(|&i| corpus.posts[i].id == id)
                .ok_or_else(|| CliError::data(format!("post {id} is not a post of user {:?}", a.user)))?;
            let mut ex = features.example((user, position));
            ex.labels = &[];
            ex
        }
        None => {
            if store.is_some() {
                return Err(CliError::usage(
                    "a precomputed-embedding model can only score corpus posts; pass --post-id",
                ));
            }
            if a.title.is_empty() && a.body.is_empty() {
                return Err(CliError::usage("give --title and/or --body, or --post-id"));
            }
            tokens = corpus.tokens.encode_text(&a.title, &a.body, run.corpus.max_tokens);
            features.example_for_new_post(user, DocInput::Tokens(&tokens))
        }
    };
    let scores = ckpt.model.scores(&example)?;
    let b = a.b.unwrap_or(run.eval.b);
    let tags: Vec<_> = top_b(&scores, b)
        .into_iter()
        .map(|t| {
            let score = (scores.prob(t as usize) * 1e6).round() / 1e6;
            json!({"tag": corpus.tags.name(t), "score": score})
        })
        .collect();
    let out = json!({"post_id": a.post_id, "tags": tags});
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{out}").map_err(|e| CliError::data(e.to_string()))
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let spec = GradCheckSpec {
        ablation: a.ablation,
        ..GradCheckSpec::default()
    };
    let report = grad_check(&spec, a.seed)?;
    let passed = report.passes(a.tolerance);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
        println!(
            "max relative error {:.3e} (tolerance {:.0e}): {}",
            report.max_rel_error(),
            a.tolerance,
            if passed { "PASS" } else { "FAIL" }
        );
    }
    if passed {
        Ok(())
    } else {
        Err(CliError {
            code: 3,
            message: format!("gradient check failed: max relative error {:.3e}", report.max_rel_error()),
        })
    }
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let mut cfg = a.config.resolve()?;
    let corpus = Corpus::load(&a.corpus)?;
    let store = embeddings_for(&cfg, &corpus)?;
    align_dim(&mut cfg, &store);
    let points = sweep_history_length(&corpus, store.as_ref(), &cfg, &a.u_values)?;
    let tsv = format_sweep_tsv(&points);
    print!("{tsv}");
    std::fs::write(&a.out, tsv).map_err(io_err(&a.out))
}

fn gen_synth(a: GenSynthArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(users, posts_per_user, tags, max_stride, carry, text_signal, seed);
    if !(0.0..=1.0).contains(&cfg.carry) || !(0.0..=1.0).contains(&cfg.text_signal) {
        return Err(CliError::usage("carry and text_signal must lie in [0, 1]"));
    }
    if cfg.tags < 2 || cfg.users == 0 || cfg.posts_per_user == 0 {
        return Err(CliError::usage("need at least one user, one post per user and two tags"));
    }
    let posts = generate(&cfg);
    let file = std::fs::File::create(&a.out).map_err(io_err(&a.out))?;
    mlp4str::corpus::ingest::write_jsonl(std::io::BufWriter::new(file), &posts).map_err(io_err(&a.out))?;
    info!("wrote {} posts to {}", posts.len(), a.out.display());
    Ok(())
}
