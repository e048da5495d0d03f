use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clir_pretrain::corpus::{ingest_pairs, CipherSpec, TokenizedPair};
use clir_pretrain::diagnostics::{format_gradcheck, run_gradcheck, GradcheckConfig};
use clir_pretrain::encoder::{init_params, load_checkpoint, save_checkpoint, Model};
use clir_pretrain::experiment::{
    build_benchmark, first_stage, format_table, parse_table, read_texts, rerank_runs, run_ablation, score_runs,
    AblationInputs, MetricsRow, SyntheticSpec,
};
use clir_pretrain::fsutil::write_atomic;
use clir_pretrain::numerics::BackwardFault;
use clir_pretrain::objectives::{parse_similarity, SimilarityKind};
use clir_pretrain::retrieval_eval::{ndcg_per_query, paired_t_test, read_qrels, read_run, write_run};
use clir_pretrain::tokenizer::Vocabulary;
use clir_pretrain::trainer::{
    finetune, format_log, pretrain, read_triples, FinetuneConfig, FinetuneObjective, OptimizerKind, RunConfig,
};
use clir_pretrain::Error;

/// Cross-language continued pretraining, fine-tuning and reranking
/// evaluation on desk-scale corpora.
#[derive(Parser)]
#[command(name = "clir-pretrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cipher benchmark: pairs, triples, docs, queries, qrels.
    GenCorpus(GenCorpus),
    /// Build a vocabulary from a pair file.
    BuildVocab(BuildVocab),
    /// Continued pretraining on linked document pairs.
    Pretrain(Pretrain),
    /// Fine-tune a checkpoint (or a fresh model) on training triples.
    Finetune(Finetune),
    /// Rerank BM25 (or given) candidates with a checkpoint.
    Rerank(Rerank),
    /// Score a run against qrels, or validate a metrics table.
    Evaluate(Evaluate),
    /// Check analytic gradients of every loss component against finite differences.
    Gradcheck(Gradcheck),
    /// Run the similarity x Condenser pretraining grid end to end.
    Ablate(Ablate),
}

#[derive(Args)]
struct GenCorpus {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Linked pairs, held-out ones included.
    #[arg(long, default_value_t = 500)]
    num_pairs: usize,
    /// Surface tokens per language.
    #[arg(long, default_value_t = 200)]
    vocab_size: usize,
    /// Pairs reserved for evaluation.
    #[arg(long, default_value_t = 50)]
    heldout: usize,
    /// Chance that a cipher token is replaced at random.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Tokens per query.
    #[arg(long, default_value_t = 6)]
    query_len: usize,
    /// Chance that a token of the translated BM25 query is wrong.
    #[arg(long, default_value_t = 0.5)]
    translation_noise: f64,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BuildVocab {
    /// Pair file.
    #[arg(long)]
    pairs: PathBuf,
    /// Output vocabulary file.
    #[arg(long)]
    out: PathBuf,
    /// Maximum size, reserved tokens included.
    #[arg(long, default_value_t = 50_000)]
    max_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct Pretrain {
    /// Pair file.
    #[arg(long)]
    pairs: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// Run configuration (key=value lines); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Contrastive similarity: none, cls or maxsim.
    #[arg(long)]
    similarity: Option<String>,
    /// Condenser-head MLM.
    #[arg(long)]
    condenser: Option<OnOff>,
    /// Seed for every random choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Pretraining steps; overrides the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Training log; defaults to the checkpoint path plus `.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Colbert,
    Dpr,
}

impl From<ObjectiveArg> for FinetuneObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Colbert => FinetuneObjective::Colbert,
            ObjectiveArg::Dpr => FinetuneObjective::Dpr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    }
}

#[derive(Args)]
struct FinetuneArgs {
    /// Fine-tuning objective.
    #[arg(long, value_enum, default_value = "colbert")]
    objective: ObjectiveArg,
    /// Fine-tuning steps.
    #[arg(long, default_value_t = 200)]
    finetune_steps: usize,
    /// Triples per fine-tuning batch.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Fine-tuning learning rate.
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Fine-tuning optimizer.
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
}

impl FinetuneArgs {
    fn config(&self, seed: u64, max_len: usize) -> FinetuneConfig {
        FinetuneConfig {
            objective: self.objective.into(),
            steps: self.finetune_steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer.into(),
            seed,
            max_len,
        }
    }
}

#[derive(Args)]
struct Finetune {
    /// Pretrained checkpoint; without it a fresh model is initialized from --config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run configuration giving the encoder shape for a fresh model.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Triples file: query<TAB>positive<TAB>negative.
    #[arg(long)]
    triples: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    #[command(flatten)]
    ft: FinetuneArgs,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Rerank {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Vocabulary file.
    #[arg(long)]
    vocab: PathBuf,
    /// Queries file: id<TAB>text, as the model sees them.
    #[arg(long)]
    queries: PathBuf,
    /// Documents file: id<TAB>text.
    #[arg(long)]
    docs: PathBuf,
    /// Query texts for BM25, e.g. translations; defaults to --queries.
    #[arg(long)]
    bm25_queries: Option<PathBuf>,
    /// Rerank this run instead of BM25 output.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// BM25 depth.
    #[arg(long, default_value_t = 1000)]
    depth: usize,
    /// maxsim or cls.
    #[arg(long, default_value = "maxsim")]
    scorer: String,
    /// Output run file.
    #[arg(long)]
    out: PathBuf,
    /// Tag written in the last run-file column.
    #[arg(long, default_value = "rerank")]
    tag: String,
}

#[derive(Args)]
struct Evaluate {
    /// Run file to score.
    #[arg(long, requires = "qrels", conflicts_with = "report")]
    run: Option<PathBuf>,
    /// Relevance judgments: qid 0 docid grade.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Second run for a paired two-tailed t-test on per-query nDCG.
    #[arg(long, requires = "run")]
    baseline: Option<PathBuf>,
    /// Number of comparisons for the Bonferroni correction.
    #[arg(long, default_value_t = 1)]
    comparisons: usize,
    /// Row label; defaults to the run file name.
    #[arg(long)]
    label: Option<String>,
    /// Metrics table to parse and re-emit.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    /// Gradient-check configuration (key=value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corrupt one backward rule: gelu, layer-norm, attention, maxsim or cross-entropy.
    #[arg(long)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct Ablate {
    /// Pair file.
    #[arg(long)]
    pairs: PathBuf,
    /// Triples file: query<TAB>positive<TAB>negative.
    #[arg(long)]
    triples: PathBuf,
    /// Queries file: id<TAB>text.
    #[arg(long)]
    queries: PathBuf,
    /// Documents file: id<TAB>text.
    #[arg(long)]
    docs: PathBuf,
    /// Relevance judgments: qid 0 docid grade.
    #[arg(long)]
    qrels: PathBuf,
    /// Query texts for BM25; defaults to --queries.
    #[arg(long)]
    bm25_queries: Option<PathBuf>,
    /// Vocabulary; built from --pairs when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Pretraining configuration shared by every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds per cell.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// First seed; cells use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pretraining steps; overrides the config.
    #[arg(long)]
    steps: Option<usize>,
    /// BM25 depth handed to the reranker.
    #[arg(long, default_value_t = 20)]
    depth: usize,
    #[command(flatten)]
    ft: FinetuneArgs,
    /// Output report.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure and the exit code it maps to.
enum Failure {
    /// Exit 1: a check ran and did not pass.
    Verification(String),
    /// Exit 2 or 3, from the error kind.
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

type CmdResult = Result<(), Failure>;

fn input_error(msg: impl Into<String>) -> Failure {
    Failure::Error(Error::Contract(msg.into()))
}

/// Every path must exist before any work starts.
fn require_inputs<'a>(paths: impl IntoIterator<Item = &'a Path>) -> CmdResult {
    for p in paths {
        if !p.exists() {
            return Err(input_error(format!("input file {} does not exist", p.display())));
        }
    }
    Ok(())
}

fn gen_corpus(a: &GenCorpus) -> CmdResult {
    let spec = SyntheticSpec {
        cipher: CipherSpec {
            noise: a.noise,
            ..CipherSpec::new(a.num_pairs, a.vocab_size, a.seed)
        },
        heldout: a.heldout,
        query_len: a.query_len,
        translation_noise: a.translation_noise,
        candidates: 20,
    };
    let bench = build_benchmark(&spec)?;
    bench.write(&a.out)?;
    println!(
        "wrote {} training pairs, {} triples, {} docs and {} queries to {}",
        bench.train_pairs.len(),
        bench.triples.len(),
        bench.docs.len(),
        bench.queries.len(),
        a.out.display()
    );
    Ok(())
}

fn build_vocab(a: &BuildVocab) -> CmdResult {
    require_inputs([a.pairs.as_path()])?;
    let pairs = ingest_pairs(&a.pairs)?;
    let vocab = Vocabulary::build(
        pairs.iter().flat_map(|p| [p.text_s.as_str(), p.text_t.as_str()]),
        a.max_size,
    )?;
    vocab.write(&a.out)?;
    println!("{} tokens from {} pairs", vocab.len(), pairs.len());
    Ok(())
}

fn run_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    })
}

fn pretrain_cmd(a: &Pretrain) -> CmdResult {
    require_inputs(
        [a.pairs.as_path(), a.vocab.as_path()]
            .into_iter()
            .chain(a.config.as_deref()),
    )?;
    let mut cfg = run_config(a.config.as_deref())?;
    if let Some(s) = &a.similarity {
        cfg.similarity = parse_similarity(s)?;
    }
    if let Some(c) = a.condenser {
        cfg.condenser = matches!(c, OnOff::On);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    let vocab = Vocabulary::read(&a.vocab)?;
    let pairs: Vec<TokenizedPair> = ingest_pairs(&a.pairs)?
        .iter()
        .map(|p| TokenizedPair::new(p, &vocab))
        .collect();
    let mut model = init_params(&cfg.encoder_for(vocab.len())?, cfg.seed)?;
    let every = (cfg.steps / 10).max(1);
    let log = pretrain(&mut model, &pairs, &vocab, &cfg, |r| {
        if r.step % every == 0 || r.step == cfg.steps {
            eprintln!("step {} {}", r.step, r.loss);
        }
    })?;
    save_checkpoint(&model, &a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| with_suffix(&a.out, ".log"));
    write_atomic(&log_path, format_log(&log).as_bytes())?;
    println!("checkpoint {} log {}", a.out.display(), log_path.display());
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn finetune_cmd(a: &Finetune) -> CmdResult {
    require_inputs(
        [a.triples.as_path(), a.vocab.as_path()]
            .into_iter()
            .chain(a.checkpoint.as_deref())
            .chain(a.config.as_deref()),
    )?;
    let vocab = Vocabulary::read(&a.vocab)?;
    let triples = read_triples(&a.triples)?;
    let mut model = match &a.checkpoint {
        Some(p) => load_checkpoint(p, false)?,
        None => {
            let cfg = run_config(a.config.as_deref())?;
            init_params(&cfg.encoder_for(vocab.len())?, a.seed)?.without_condenser()
        }
    };
    let cfg = a.ft.config(a.seed, model.config.max_len);
    let losses = finetune(&mut model, &triples, &vocab, &cfg)?;
    save_checkpoint(&model, &a.out)?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("{} loss {first} -> {last} over {} steps", cfg.objective, losses.len());
    }
    Ok(())
}

fn parse_scorer(s: &str) -> Result<SimilarityKind, Failure> {
    Ok(s.parse::<SimilarityKind>()?)
}

fn rerank_cmd(a: &Rerank) -> CmdResult {
    require_inputs(
        [
            a.checkpoint.as_path(),
            a.vocab.as_path(),
            a.queries.as_path(),
            a.docs.as_path(),
        ]
        .into_iter()
        .chain(a.bm25_queries.as_deref())
        .chain(a.candidates.as_deref()),
    )?;
    let scorer = parse_scorer(&a.scorer)?;
    let model: Model = load_checkpoint(&a.checkpoint, false)?;
    let vocab = Vocabulary::read(&a.vocab)?;
    let queries = read_texts(&a.queries)?;
    let docs = read_texts(&a.docs)?;
    let candidates = match &a.candidates {
        Some(p) => read_run(p)?,
        None => {
            let bm25_queries = match &a.bm25_queries {
                Some(p) => read_texts(p)?,
                None => queries.clone(),
            };
            first_stage(&docs, &bm25_queries, a.depth)
        }
    };
    let runs = rerank_runs(&model, &vocab, &queries, &docs, &candidates, scorer)?;
    write_run(&a.out, &runs, &a.tag)?;
    println!("reranked {} queries into {}", runs.len(), a.out.display());
    Ok(())
}

fn emit(text: &str, out: Option<&Path>) -> CmdResult {
    print!("{text}");
    if let Some(p) = out {
        write_atomic(p, text.as_bytes())?;
    }
    Ok(())
}

fn evaluate_cmd(a: &Evaluate) -> CmdResult {
    if let Some(report) = &a.report {
        require_inputs([report.as_path()])?;
        let text = std::fs::read_to_string(report).map_err(|e| Error::Io {
            path: report.clone(),
            source: e,
        })?;
        let rows = parse_table(&text, report)?;
        return emit(&format_table(&rows), a.out.as_deref());
    }
    let (Some(run), Some(qrels)) = (&a.run, &a.qrels) else {
        return Err(input_error("evaluate needs --run with --qrels, or --report"));
    };
    require_inputs(
        [run.as_path(), qrels.as_path()]
            .into_iter()
            .chain(a.baseline.as_deref()),
    )?;
    let qrels = read_qrels(qrels)?;
    let runs = read_run(run)?;
    let label = a.label.clone().unwrap_or_else(|| {
        run.file_name().map_or_else(
            || "run".into(),
            |n| n.to_string_lossy().replace(char::is_whitespace, "_"),
        )
    });
    let scores = score_runs(&runs, &qrels)?;
    let mut text = format_table(&[MetricsRow {
        label,
        seed: None,
        scores,
    }]);
    if let Some(base) = &a.baseline {
        let base_runs = read_run(base)?;
        for k in [10, 100] {
            let ours = ndcg_per_query(&runs, &qrels, k)?;
            let theirs = ndcg_per_query(&base_runs, &qrels, k)?;
            let a_scores: Vec<f64> = ours.values().copied().collect();
            let b_scores: Vec<f64> = theirs.values().copied().collect();
            let t = paired_t_test(&a_scores, &b_scores, a.comparisons)?;
            text.push_str(&format!(
                "# ndcg@{k} vs {}: t={} p={} p_corrected={}{}\n",
                base.display(),
                t.t,
                t.p,
                t.p_corrected,
                if t.degenerate { " (zero variance)" } else { "" }
            ));
        }
    }
    emit(&text, a.out.as_deref())
}

fn gradcheck_cmd(a: &Gradcheck) -> CmdResult {
    require_inputs(a.config.as_deref())?;
    let cfg = match &a.config {
        Some(p) => GradcheckConfig::read(p)?,
        None => GradcheckConfig::default(),
    };
    let fault = a
        .inject_fault
        .as_deref()
        .map(|s| s.parse::<BackwardFault>().map_err(input_error))
        .transpose()?;
    let checks = run_gradcheck(&cfg, fault)?;
    print!("{}", format_gradcheck(&checks, cfg.threshold));
    match checks
        .iter()
        .filter(|c| !c.passed)
        .max_by(|x, y| x.report.max_rel_error.total_cmp(&y.report.max_rel_error))
    {
        None => Ok(()),
        Some(worst) => Err(Failure::Verification(format!(
            "gradient check failed; worst offender {} at {} (relative error {:e})",
            worst.component,
            worst
                .report
                .worst
                .as_ref()
                .map_or("?".into(), |(n, i)| format!("{n}[{i}]")),
            worst.report.max_rel_error
        ))),
    }
}

fn ablate_cmd(a: &Ablate) -> CmdResult {
    require_inputs(
        [
            a.pairs.as_path(),
            a.triples.as_path(),
            a.queries.as_path(),
            a.docs.as_path(),
            a.qrels.as_path(),
        ]
        .into_iter()
        .chain(a.bm25_queries.as_deref())
        .chain(a.vocab.as_deref())
        .chain(a.config.as_deref()),
    )?;
    if a.seeds == 0 {
        return Err(input_error("--seeds must be at least 1"));
    }
    let mut run = run_config(a.config.as_deref())?;
    if let Some(s) = a.steps {
        run.steps = s;
    }
    run.validate()?;
    let pairs = ingest_pairs(&a.pairs)?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::read(p)?,
        None => Vocabulary::build(
            pairs.iter().flat_map(|p| [p.text_s.as_str(), p.text_t.as_str()]),
            usize::MAX,
        )?,
    };
    let triples = read_triples(&a.triples)?;
    let queries = read_texts(&a.queries)?;
    let bm25_queries = match &a.bm25_queries {
        Some(p) => read_texts(p)?,
        None => queries.clone(),
    };
    let docs = read_texts(&a.docs)?;
    let qrels = read_qrels(&a.qrels)?;
    let inputs = AblationInputs {
        pairs: &pairs,
        vocab: &vocab,
        triples: &triples,
        queries: &queries,
        bm25_queries: &bm25_queries,
        docs: &docs,
        qrels: &qrels,
        depth: a.depth,
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let ft = a.ft.config(a.seed, run.encoder.max_len);
    let rows = run_ablation(&inputs, &run, &ft, &seeds, |label, seed, s| {
        eprintln!("{label} seed {seed}: ndcg@10={} ndcg@100={}", s.ndcg_10, s.ndcg_100);
    })?;
    emit(&format_table(&rows), a.out.as_deref())
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::Pretrain(a) => pretrain_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Rerank(a) => rerank_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
