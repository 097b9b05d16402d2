use std::io;
use std::path::{Path, PathBuf};

use clap::Args;
use lmort_core::hidden_states::{
    read_dump, read_pairs_tsv, read_qrels_tsv, read_train_examples, write_dump, write_jsonl, write_text, LayeredStates,
    TextRecord,
};
use lmort_core::pipeline::{ablation_csv, encode_records, run_ablations, select_layers, Ablation, TaskData};
use lmort_core::retrieval::{evaluate_run, read_vectors, write_vectors};
use lmort_core::space_analysis::{export_heatmap_csv, read_heatmap_csv, sweep_layers, LayerDiagnostics, SweepInput};
use lmort_core::synthetic_llm::{encode_sequences, make_synthetic_task, Emulator};
use lmort_core::training::{train_loop, StateCache, TrainControl};
use lmort_core::tuner::{load_checkpoint, TunerConfig};
use lmort_core::{Error, Result};

use crate::manifest::Manifest;
use crate::GlobalOpts;

#[derive(Debug, Args)]
pub struct EmulateArgs {
    /// Existing directory that receives the dumps and task files.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Query hidden-state dump.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Passage hidden-state dump.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Positive pairs, query_id<TAB>passage_id.
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Heatmap CSV to write.
    #[arg(long)]
    heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Training examples JSONL.
    #[arg(long)]
    train_examples: Option<PathBuf>,
    /// Heatmap CSV whose selected layers replace the configured ones.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Output directory for checkpoints and loss.csv.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Tuner checkpoint (.lmt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Hidden-state dump to encode.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Vector file to write.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchEvalArgs {
    #[arg(long)]
    query_vectors: Option<PathBuf>,
    #[arg(long)]
    corpus_vectors: Option<PathBuf>,
    /// Judgments, query_id<TAB>passage_id<TAB>grade.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Run TSV to write.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Optional per-query NDCG@10 CSV.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    train_examples: Option<PathBuf>,
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Heatmap CSV; without one the layers are selected from the training
    /// pairs.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Comparison CSV to write.
    #[arg(long)]
    ablation_csv: Option<PathBuf>,
    /// Comma-separated ablation names (full, worst-au, self-only-a,
    /// self-only-u, embedding); default all.
    #[arg(long, value_delimiter = ',')]
    ablations: Vec<String>,
}

fn not_found(path: &Path, what: &str) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: io::Error::new(io::ErrorKind::NotFound, format!("{what} does not exist")),
    }
}

/// Flag value, else manifest value, else a usage error.
fn pick(flag: Option<PathBuf>, manifest: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    flag.or_else(|| manifest.clone()).ok_or_else(|| {
        Error::Config(format!(
            "missing --{} (or paths.{key} in the manifest)",
            key.replace('_', "-")
        ))
    })
}

fn input(flag: Option<PathBuf>, manifest: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = pick(flag, manifest, key)?;
    if !p.is_file() {
        return Err(not_found(&p, "input file"));
    }
    Ok(p)
}

fn optional_input(flag: Option<PathBuf>, manifest: &Option<PathBuf>) -> Result<Option<PathBuf>> {
    match flag.or_else(|| manifest.clone()) {
        Some(p) if !p.is_file() => Err(not_found(&p, "input file")),
        other => Ok(other),
    }
}

/// Output file whose directory must already exist.
fn output(flag: Option<PathBuf>, manifest: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    let p = pick(flag, manifest, key)?;
    check_parent(&p)?;
    Ok(p)
}

fn check_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(not_found(dir, "output directory")),
        _ => Ok(()),
    }
}

fn apply_tuner_overrides(tuner: &mut TunerConfig, g: &GlobalOpts) {
    if let Some(c) = g.connection {
        tuner.connection_mode = c;
    }
    if let Some(b) = g.blocks {
        tuner.n_blocks = b;
    }
}

fn d_llm_of(records: &[LayeredStates]) -> Result<usize> {
    records
        .first()
        .map(|r| r.d_model)
        .ok_or_else(|| Error::Data("query dump has no records".into()))
}

fn read_diagnostics(path: Option<PathBuf>) -> Result<Option<LayerDiagnostics>> {
    path.map(read_heatmap_csv).transpose()
}

pub fn emulate(args: EmulateArgs, mut m: Manifest, g: &GlobalOpts) -> Result<()> {
    let out = pick(args.out_dir, &m.paths.out_dir, "out_dir")?;
    if !out.is_dir() {
        return Err(not_found(&out, "output directory"));
    }
    if let Some(s) = g.seed {
        m.task.seed = s;
    }
    m.emulator.validate()?;
    if m.task.vocab_size > m.emulator.vocab_size {
        return Err(Error::Config(format!(
            "task vocab_size {} exceeds emulator vocab_size {}",
            m.task.vocab_size, m.emulator.vocab_size
        )));
    }
    if m.task.max_len > m.emulator.max_seq_len {
        return Err(Error::Config(format!(
            "task max_len {} exceeds emulator max_seq_len {}",
            m.task.max_len, m.emulator.max_seq_len
        )));
    }
    let task = make_synthetic_task(&m.task)?;
    let emulator = Emulator::build(m.emulator.clone())?;
    let layers = emulator.all_layers();
    let queries = encode_sequences(&emulator, &task.queries, &layers)?;
    let corpus = encode_sequences(&emulator, &task.corpus, &layers)?;

    write_dump(&queries, out.join("queries.hsd"))?;
    write_dump(&corpus, out.join("corpus.hsd"))?;
    let text = |s: &[lmort_core::synthetic_llm::TokenSequence]| -> Vec<TextRecord> {
        s.iter().map(|t| t.to_text_record()).collect()
    };
    write_jsonl(&text(&task.queries), out.join("queries.jsonl"))?;
    write_jsonl(&text(&task.corpus), out.join("corpus.jsonl"))?;
    write_text(out.join("qrels.tsv"), &task.qrels.to_tsv())?;
    write_jsonl(&task.train_examples, out.join("train.jsonl"))?;
    let pairs: String = task
        .positive_pairs()
        .iter()
        .map(|(q, p)| format!("{q}\t{p}\n"))
        .collect();
    write_text(out.join("pairs.tsv"), &pairs)?;
    println!(
        "wrote {} queries, {} passages, {} judgments, {} layers to {}",
        queries.len(),
        corpus.len(),
        task.qrels.judgment_count(),
        layers.len(),
        out.display()
    );
    Ok(())
}

pub fn analyze(args: AnalyzeArgs, mut m: Manifest, g: &GlobalOpts) -> Result<()> {
    let q_path = input(args.queries, &m.paths.queries, "queries")?;
    let c_path = input(args.corpus, &m.paths.corpus, "corpus")?;
    let pairs_path = input(args.pairs, &m.paths.pairs, "pairs")?;
    let heatmap = output(args.heatmap, &m.paths.heatmap, "heatmap")?;
    if let Some(s) = g.seed {
        m.analysis.seed = s;
    }
    let budget = m.analysis.budget()?;

    let queries = read_dump(q_path)?;
    let corpus = read_dump(c_path)?;
    let pairs = read_pairs_tsv(pairs_path)?;
    let layers = queries
        .first()
        .map(|r| r.layer_indices.clone())
        .ok_or_else(|| Error::Data("query dump has no records".into()))?;
    let diag = sweep_layers(
        &SweepInput {
            queries: &queries,
            passages: &corpus,
            positive_pairs: &pairs,
        },
        &layers,
        budget,
        m.analysis.seed,
    )?;
    export_heatmap_csv(&diag, &heatmap)?;
    println!("layer\talign_loss\tuniform_loss");
    for r in &diag.rows {
        println!("{}\t{:.6}\t{:.6}", r.layer, r.align_loss, r.uniform_loss);
    }
    println!("selected a={} u={}", diag.selected_a, diag.selected_u);
    Ok(())
}

pub fn train(args: TrainArgs, mut m: Manifest, g: &GlobalOpts) -> Result<()> {
    let q_path = input(args.queries, &m.paths.queries, "queries")?;
    let c_path = input(args.corpus, &m.paths.corpus, "corpus")?;
    let ex_path = input(args.train_examples, &m.paths.train_examples, "train_examples")?;
    let heatmap = optional_input(args.heatmap, &m.paths.heatmap)?;
    let dir = pick(args.checkpoint_dir, &m.paths.checkpoint_dir, "checkpoint_dir")?;
    check_parent(&dir)?;
    apply_tuner_overrides(&mut m.tuner, g);
    if let Some(s) = g.seed {
        m.train.seed = s;
        m.tuner.seed = s;
    }
    m.train.validate()?;
    if let Some(diag) = read_diagnostics(heatmap)? {
        m.tuner.align_layer = diag.selected_a;
        m.tuner.uniform_layer = diag.selected_u;
    }

    let queries = read_dump(q_path)?;
    let corpus = read_dump(c_path)?;
    let examples = read_train_examples(ex_path)?;
    m.tuner.validate(d_llm_of(&queries)?)?;
    let cache = StateCache::build(queries.iter().chain(&corpus), &m.tuner)?;
    // a fresh run replaces any earlier loss log
    let log_path = dir.join("loss.csv");
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|source| Error::Io { path: log_path, source })?;
    }
    let outcome = train_loop(
        &examples,
        &cache,
        &m.tuner,
        &m.train,
        TrainControl {
            checkpoint_dir: Some(dir.clone()),
            ..TrainControl::default()
        },
    )?;
    let last = outcome.loss_log.last().map(|&(_, l)| l);
    println!(
        "trained {} steps (layers a={} u={}, {}), final loss {}; checkpoints in {}",
        outcome.optimizer.step,
        m.tuner.align_layer,
        m.tuner.uniform_layer,
        m.tuner.connection_mode.short_name(),
        last.map_or("n/a".to_string(), |l| format!("{l:.6}")),
        dir.display()
    );
    Ok(())
}

pub fn encode(args: EncodeArgs, m: Manifest, _g: &GlobalOpts) -> Result<()> {
    let ckpt = input(args.checkpoint, &m.paths.checkpoint, "checkpoint")?;
    let dump = input(args.dump, &m.paths.dump, "dump")?;
    let out = output(args.vectors, &m.paths.vectors, "vectors")?;
    let (config, params) = load_checkpoint(ckpt)?;
    let records = read_dump(dump)?;
    let encoded = encode_records(&records, &params, &config)?;
    let ids: Vec<String> = encoded.iter().map(|(id, _)| id.clone()).collect();
    let data: Vec<f32> = encoded.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    write_vectors(&out, &ids, config.d_model, &data)?;
    println!("wrote {} vectors of dimension {} to {}", ids.len(), config.d_model, out.display());
    Ok(())
}

pub fn search_eval(args: SearchEvalArgs, m: Manifest, g: &GlobalOpts) -> Result<()> {
    let qv = input(args.query_vectors, &m.paths.query_vectors, "query_vectors")?;
    let cv = input(args.corpus_vectors, &m.paths.corpus_vectors, "corpus_vectors")?;
    let qrels_path = input(args.qrels, &m.paths.qrels, "qrels")?;
    let run_path = output(args.run, &m.paths.run, "run")?;
    let per_query = args.per_query.or(m.paths.per_query.clone());
    if let Some(p) = &per_query {
        check_parent(p)?;
    }
    let k = g.k.unwrap_or(m.search.k);
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }

    let queries = read_vectors(qv)?.into_store(m.train.similarity)?;
    let store = read_vectors(cv)?.into_store(m.train.similarity)?;
    let qrels = read_qrels_tsv(qrels_path)?;
    let report = evaluate_run(&queries, &store, &qrels, k)?;
    write_text(&run_path, &report.run_tsv())?;
    if let Some(p) = per_query {
        write_text(p, &report.per_query_csv())?;
    }
    println!(
        "mean NDCG@10 {:.4} over {} queries ({} without judgments)",
        report.mean_ndcg,
        report.evaluated(),
        report.skipped
    );
    Ok(())
}

pub fn ablate(args: AblateArgs, mut m: Manifest, g: &GlobalOpts) -> Result<()> {
    let names = if args.ablations.is_empty() { m.ablate.names.clone() } else { args.ablations };
    let ablations: Vec<Ablation> = if names.is_empty() {
        Ablation::ALL.to_vec()
    } else {
        names.iter().map(|n| Ablation::parse(n.trim())).collect::<Result<_>>()?
    };
    let q_path = input(args.queries, &m.paths.queries, "queries")?;
    let c_path = input(args.corpus, &m.paths.corpus, "corpus")?;
    let ex_path = input(args.train_examples, &m.paths.train_examples, "train_examples")?;
    let qrels_path = input(args.qrels, &m.paths.qrels, "qrels")?;
    let heatmap = optional_input(args.heatmap, &m.paths.heatmap)?;
    let out = output(args.ablation_csv, &m.paths.ablation_csv, "ablation_csv")?;
    apply_tuner_overrides(&mut m.tuner, g);
    if let Some(s) = g.seed {
        m.train.seed = s;
        m.tuner.seed = s;
    }
    m.train.validate()?;
    let budget = m.analysis.budget()?;
    let k = g.k.unwrap_or(m.search.k);
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }

    let queries = read_dump(q_path)?;
    let corpus = read_dump(c_path)?;
    let examples = read_train_examples(ex_path)?;
    let qrels = read_qrels_tsv(qrels_path)?;
    let d_llm = d_llm_of(&queries)?;
    let diag = match read_diagnostics(heatmap)? {
        Some(d) => d,
        None => select_layers(&queries, &corpus, &examples, budget, m.analysis.seed)?,
    };
    for a in &ablations {
        a.configure(&m.tuner, &diag).validate(d_llm)?;
    }
    let data = TaskData {
        queries: &queries,
        corpus: &corpus,
        qrels: &qrels,
        train_examples: &examples,
    };
    let rows = run_ablations(&data, &diag, &m.tuner, &m.train, &ablations, k)?;
    let csv = ablation_csv(&rows);
    write_text(&out, &csv)?;
    print!("{csv}");
    Ok(())
}
