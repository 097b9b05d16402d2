use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lmort_core::hidden_states::{read_dump, read_qrels_tsv, write_dump, LayeredStates};
use lmort_core::retrieval::{evaluate_run, read_vectors, write_vectors};
use lmort_core::space_analysis::read_heatmap_csv;
use lmort_core::training::{Similarity, TunerInput};
use lmort_core::tuner::{
    encode, encode_checkpoint, load_checkpoint, save_checkpoint, ConnectionMode, TunerConfig, TunerParams,
};
use tempfile::TempDir;

const MANIFEST: &str = r#"
[paths]
out_dir = "."
queries = "queries.hsd"
corpus = "corpus.hsd"
qrels = "qrels.tsv"
train_examples = "train.jsonl"
pairs = "pairs.tsv"
heatmap = "heatmap.csv"
checkpoint_dir = "ckpt"

[emulator]
d_model = 16
n_layers = 3
n_heads = 2
max_seq_len = 16

[task]
n_queries = 12
n_passages = 40
vocab_size = 64
min_len = 4
max_len = 8

[tuner]
d_model = 16
n_heads = 2
n_blocks = 1

[train]
epochs = 1
batch_size = 4
learning_rate = 1e-3

[search]
k = 10
"#;

fn lmort(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmort"))
        .args(args)
        .env_remove("LMORT_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> String {
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    stdout(&out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A temp dir holding the manifest, an emulated task and its heatmap.
fn workspace() -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let manifest = dir.path().join("run.toml");
    fs::write(&manifest, MANIFEST).unwrap();
    ok(lmort(&["--manifest", s(&manifest), "emulate"]));
    ok(lmort(&["--manifest", s(&manifest), "analyze"]));
    (dir, manifest)
}

const EMULATED: [&str; 7] = [
    "queries.hsd",
    "corpus.hsd",
    "queries.jsonl",
    "corpus.jsonl",
    "qrels.tsv",
    "train.jsonl",
    "pairs.tsv",
];

#[test]
fn emulate_is_deterministic_and_complete() {
    let (a, manifest) = workspace();
    let b = TempDir::new().unwrap();
    ok(lmort(&["--manifest", s(&manifest), "emulate", "--out-dir", s(b.path())]));
    for f in EMULATED {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let qrels = read_qrels_tsv(a.path().join("qrels.tsv")).unwrap();
    assert_eq!(qrels.judgment_count(), 12);
    assert_eq!(read_dump(a.path().join("corpus.hsd")).unwrap().len(), 40);

    let c = TempDir::new().unwrap();
    ok(lmort(&["--manifest", s(&manifest), "--seed", "9", "emulate", "--out-dir", s(c.path())]));
    assert_ne!(
        fs::read(a.path().join("queries.jsonl")).unwrap(),
        fs::read(c.path().join("queries.jsonl")).unwrap()
    );
}

#[test]
fn emulate_missing_out_dir_fails() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope");
    let out = lmort(&["emulate", "--out-dir", s(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(!missing.exists());
}

#[test]
fn analyze_reports_argmin_layers() {
    let (dir, manifest) = workspace();
    let text = ok(lmort(&["--manifest", s(&manifest), "analyze"]));
    let csv = fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4 + 1);
    let diag = read_heatmap_csv(dir.path().join("heatmap.csv")).unwrap();
    let expected = format!("selected a={} u={}", diag.selected_a, diag.selected_u);
    assert!(text.contains(&expected), "{text}");
}

#[test]
fn analyze_single_layer_dump_selects_it_twice() {
    let (dir, manifest) = workspace();
    let keep = |name: &str| {
        let recs: Vec<LayeredStates> = read_dump(dir.path().join(name))
            .unwrap()
            .into_iter()
            .map(|r| LayeredStates {
                layer_indices: vec![2],
                states: vec![r.layer(2).unwrap().to_vec()],
                ..r
            })
            .collect();
        let path = dir.path().join(format!("single-{name}"));
        write_dump(&recs, &path).unwrap();
        path
    };
    let q = keep("queries.hsd");
    let c = keep("corpus.hsd");
    let text = ok(lmort(&[
        "--manifest",
        s(&manifest),
        "analyze",
        "--queries",
        s(&q),
        "--corpus",
        s(&c),
    ]));
    assert!(text.contains("selected a=2 u=2"), "{text}");
}

#[test]
fn train_with_zero_epochs_writes_init() {
    let (dir, manifest) = workspace();
    let zero = dir.path().join("zero.toml");
    fs::write(&zero, fs::read_to_string(&manifest).unwrap().replace("epochs = 1", "epochs = 0")).unwrap();
    ok(lmort(&["--manifest", s(&zero), "--connection", "u2a", "train"]));
    let (config, params) = load_checkpoint(dir.path().join("ckpt/final.lmt")).unwrap();
    assert_eq!(config.connection_mode, ConnectionMode::UToA);
    let init = TunerParams::init(&config, 16).unwrap();
    assert_eq!(encode_checkpoint(&config, &params).unwrap(), encode_checkpoint(&config, &init).unwrap());
}

#[test]
fn train_records_connection_and_reproduces() {
    let (dir, manifest) = workspace();
    ok(lmort(&["--manifest", s(&manifest), "--connection", "a2u", "train"]));
    let ckpt = dir.path().join("ckpt");
    let log = fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3);
    let weights = fs::read(ckpt.join("final.lmt")).unwrap();
    let (config, _) = load_checkpoint(ckpt.join("final.lmt")).unwrap();
    assert_eq!(config.connection_mode, ConnectionMode::AToU);
    let diag = read_heatmap_csv(dir.path().join("heatmap.csv")).unwrap();
    assert_eq!((config.align_layer, config.uniform_layer), (diag.selected_a, diag.selected_u));

    // same directory and another one, with a multi-threaded pool
    let other = dir.path().join("ckpt2");
    ok(lmort(&["--manifest", s(&manifest), "--deterministic", "train"]));
    let out = Command::new(env!("CARGO_BIN_EXE_lmort"))
        .args(["--manifest", s(&manifest), "train", "--checkpoint-dir", s(&other)])
        .env("LMORT_THREADS", "3")
        .output()
        .unwrap();
    ok(out);
    for d in [&ckpt, &other] {
        assert_eq!(fs::read_to_string(d.join("loss.csv")).unwrap(), log);
        assert_eq!(fs::read(d.join("final.lmt")).unwrap(), weights);
    }
}

#[test]
fn encode_matches_library() {
    let (dir, manifest) = workspace();
    ok(lmort(&["--manifest", s(&manifest), "train"]));
    let ckpt = dir.path().join("ckpt/final.lmt");
    let vec_path = dir.path().join("corpus.vec");
    ok(lmort(&[
        "encode",
        "--checkpoint",
        s(&ckpt),
        "--dump",
        s(&dir.path().join("corpus.hsd")),
        "--vectors",
        s(&vec_path),
    ]));
    let records = read_dump(dir.path().join("corpus.hsd")).unwrap();
    let file = read_vectors(&vec_path).unwrap();
    assert_eq!(file.ids.len(), records.len());
    let (config, params) = load_checkpoint(&ckpt).unwrap();
    for i in [0, 17, 39] {
        let input = TunerInput::from_record(&records[i], &config).unwrap();
        let v = encode(&input.h_a, &input.h_u, &input.mask, &params, &config).unwrap();
        let expected: Vec<f32> = v.values.iter().map(|&x| x as f32).collect();
        assert_eq!(file.ids[i], records[i].sequence_id);
        assert_eq!(file.row(i), expected.as_slice());
    }
}

#[test]
fn encode_rejects_dump_without_selected_layer() {
    let (dir, _) = workspace();
    let config = TunerConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 1,
        align_layer: 1,
        uniform_layer: 2,
        ..TunerConfig::default()
    };
    let ckpt = dir.path().join("init.lmt");
    save_checkpoint(&ckpt, &config, &TunerParams::init(&config, 16).unwrap()).unwrap();
    let recs: Vec<LayeredStates> = read_dump(dir.path().join("corpus.hsd"))
        .unwrap()
        .into_iter()
        .map(|r| LayeredStates {
            layer_indices: vec![3],
            states: vec![r.layer(3).unwrap().to_vec()],
            ..r
        })
        .collect();
    let dump = dir.path().join("top.hsd");
    write_dump(&recs, &dump).unwrap();
    let vectors = dir.path().join("top.vec");
    let out = lmort(&["encode", "--checkpoint", s(&ckpt), "--dump", s(&dump), "--vectors", s(&vectors)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer"));
    assert!(!vectors.exists());
}

fn write_self_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let ids: Vec<String> = (0..6).map(|i| format!("d{i}")).collect();
    let data: Vec<f32> = (0..6)
        .flat_map(|i| (0..4).map(move |j| if i % 4 == j { 1.0 + i as f32 } else { 0.1 * j as f32 }))
        .collect();
    let v = dir.join("self.vec");
    write_vectors(&v, &ids, 4, &data).unwrap();
    let qrels = dir.join("self.qrels");
    let text: String = ids.iter().map(|id| format!("{id}\t{id}\t1\n")).collect();
    fs::write(&qrels, text).unwrap();
    (v, qrels)
}

#[test]
fn search_eval_self_retrieval_scores_one() {
    let dir = TempDir::new().unwrap();
    let (v, qrels) = write_self_fixture(dir.path());
    let run = dir.path().join("run.tsv");
    let per = dir.path().join("per.csv");
    let text = ok(lmort(&[
        "--k",
        "3",
        "search-eval",
        "--query-vectors",
        s(&v),
        "--corpus-vectors",
        s(&v),
        "--qrels",
        s(&qrels),
        "--run",
        s(&run),
        "--per-query",
        s(&per),
    ]));
    assert!(text.contains("mean NDCG@10 1.0000 over 6 queries"), "{text}");

    let store = read_vectors(&v).unwrap().into_store(Similarity::Cosine).unwrap();
    let report = evaluate_run(&store, &store, &read_qrels_tsv(&qrels).unwrap(), 3).unwrap();
    assert_eq!(fs::read_to_string(&run).unwrap(), report.run_tsv());
    assert_eq!(fs::read_to_string(&per).unwrap(), report.per_query_csv());
    assert_eq!(fs::read_to_string(&run).unwrap().lines().count(), 18);
}

#[test]
fn search_eval_empty_qrels_evaluates_nothing() {
    let dir = TempDir::new().unwrap();
    let (v, _) = write_self_fixture(dir.path());
    let empty = dir.path().join("empty.qrels");
    fs::write(&empty, "").unwrap();
    let out = lmort(&[
        "search-eval",
        "--query-vectors",
        s(&v),
        "--corpus-vectors",
        s(&v),
        "--qrels",
        s(&empty),
        "--run",
        s(&dir.path().join("run.tsv")),
    ]);
    let text = ok(out);
    assert!(text.contains("over 0 queries"), "{text}");
}

#[test]
fn search_eval_dimension_mismatch_is_data_error() {
    let dir = TempDir::new().unwrap();
    let (v, qrels) = write_self_fixture(dir.path());
    let narrow = dir.path().join("narrow.vec");
    write_vectors(&narrow, &["d0".to_string()], 3, &[1.0, 0.0, 0.0]).unwrap();
    let out = lmort(&[
        "search-eval",
        "--query-vectors",
        s(&narrow),
        "--corpus-vectors",
        s(&v),
        "--qrels",
        s(&qrels),
        "--run",
        s(&dir.path().join("run.tsv")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_rejects_unknown_name_before_work() {
    let (dir, manifest) = workspace();
    let csv = dir.path().join("ablation.csv");
    let out = lmort(&[
        "--manifest",
        s(&manifest),
        "ablate",
        "--ablations",
        "full,self-only",
        "--ablation-csv",
        s(&csv),
    ]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("self-only-a"));
    assert!(!csv.exists());
}

#[test]
fn ablate_full_row_matches_train_encode_search() {
    let (dir, manifest) = workspace();
    let m = s(&manifest);
    let csv = dir.path().join("ablation.csv");
    let table = ok(lmort(&["--manifest", m, "ablate", "--ablations", "full,embedding", "--ablation-csv", s(&csv)]));
    assert_eq!(table, fs::read_to_string(&csv).unwrap());
    assert_eq!(table.lines().count(), 3);
    let full: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(full[0], "full");
    let trained: f64 = full[5].parse().unwrap();

    ok(lmort(&["--manifest", m, "train"]));
    let ckpt = dir.path().join("ckpt/final.lmt");
    for name in ["queries", "corpus"] {
        ok(lmort(&[
            "encode",
            "--checkpoint",
            s(&ckpt),
            "--dump",
            s(&dir.path().join(format!("{name}.hsd"))),
            "--vectors",
            s(&dir.path().join(format!("{name}.vec"))),
        ]));
    }
    let per = dir.path().join("per.csv");
    ok(lmort(&[
        "--manifest",
        m,
        "search-eval",
        "--query-vectors",
        s(&dir.path().join("queries.vec")),
        "--corpus-vectors",
        s(&dir.path().join("corpus.vec")),
        "--run",
        s(&dir.path().join("run.tsv")),
        "--per-query",
        s(&per),
    ]));
    let scores: Vec<f64> = fs::read_to_string(&per)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((mean - trained).abs() < 1e-6, "{mean} vs {trained}");
}

#[test]
fn usage_and_config_errors_exit_one() {
    let (dir, manifest) = workspace();
    assert_eq!(code(&lmort(&["emulate", "--bogus"])), 1);
    assert_eq!(code(&lmort(&["--connection", "sideways", "train"])), 1);

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, "[tuner]\nn_block = 2\n").unwrap();
    assert_eq!(code(&lmort(&["--manifest", s(&typo), "train"])), 1);

    // no queries path anywhere
    assert_eq!(code(&lmort(&["analyze"])), 1);

    let out = Command::new(env!("CARGO_BIN_EXE_lmort"))
        .args(["--manifest", s(&manifest), "analyze"])
        .env("LMORT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);

    // tuner width that cannot match the backbone
    let out = lmort(&["--manifest", s(&manifest), "--blocks", "0", "train"]);
    assert_eq!(code(&out), 1);
    assert!(!dir.path().join("ckpt").exists());
}

#[test]
fn missing_input_file_exits_two() {
    let (dir, manifest) = workspace();
    let out = lmort(&[
        "--manifest",
        s(&manifest),
        "train",
        "--queries",
        s(&dir.path().join("absent.hsd")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("ckpt").exists());
}

#[test]
fn non_finite_loss_exits_three() {
    let (dir, manifest) = workspace();
    let hot = dir.path().join("hot.toml");
    let text = fs::read_to_string(&manifest).unwrap().replace("learning_rate = 1e-3", "learning_rate = 1e-3\ntemperature = 1e-320");
    fs::write(&hot, text).unwrap();
    let out = lmort(&["--manifest", s(&hot), "train"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
