//! End-to-end composition: layer selection, tuner training, encoding and
//! evaluation, plus the named connection ablations.

use std::collections::HashMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hidden_states::{LayeredStates, Qrels, TrainExample};
use crate::retrieval::{evaluate_run, EvalReport, VectorStore};
use crate::space_analysis::{sweep_layers, LayerDiagnostics, PairBudget, SweepInput};
use crate::training::{train_loop, StateCache, TrainConfig, TrainControl, TrainOutcome, TunerInput};
use crate::tuner::{encode, ConnectionMode, TunerConfig, TunerParams};

/// Pooled tuner output for every record, in input order, rounded to `f32`.
pub fn encode_records(
    records: &[LayeredStates],
    params: &TunerParams,
    config: &TunerConfig,
) -> Result<Vec<(String, Vec<f32>)>> {
    records
        .par_iter()
        .map(|r| {
            let input = TunerInput::from_record(r, config)?;
            let v = encode(&input.h_a, &input.h_u, &input.mask, params, config)?;
            Ok((r.sequence_id.clone(), v.values.iter().map(|&x| x as f32).collect()))
        })
        .collect()
}

/// Encodes queries and corpus with the tuner and scores the run.
pub fn evaluate_tuner(
    queries: &[LayeredStates],
    corpus: &[LayeredStates],
    qrels: &Qrels,
    params: &TunerParams,
    config: &TunerConfig,
    train: &TrainConfig,
    k: usize,
) -> Result<EvalReport> {
    let q = VectorStore::build(encode_records(queries, params, config)?, train.similarity)?;
    let p = VectorStore::build(encode_records(corpus, params, config)?, train.similarity)?;
    evaluate_run(&q, &p, qrels, k)
}

/// Layer sweep over the positive pairs of `examples`.
pub fn select_layers(
    queries: &[LayeredStates],
    corpus: &[LayeredStates],
    examples: &[TrainExample],
    budget: Option<PairBudget>,
    seed: u64,
) -> Result<LayerDiagnostics> {
    let layers = queries
        .first()
        .map(|r| r.layer_indices.clone())
        .ok_or_else(|| Error::Data("no query records to analyze".into()))?;
    let pairs: Vec<(String, String)> = examples
        .iter()
        .flat_map(|e| e.positive_ids.iter().map(move |p| (e.query_id.clone(), p.clone())))
        .collect();
    sweep_layers(
        &SweepInput {
            queries,
            passages: corpus,
            positive_pairs: &pairs,
        },
        &layers,
        budget,
        seed,
    )
}

/// Named tuner variants compared in ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Selected A and U layers, self plus cross attention.
    Full,
    /// Layers with the highest alignment and uniformity losses.
    WorstAu,
    /// Cross attention removed; self attention reads the A layer.
    SelfOnlyA,
    /// Cross attention removed; self attention reads the U layer.
    SelfOnlyU,
    /// Both inputs taken from the embedding output (layer 0).
    Embedding,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::WorstAu,
        Ablation::SelfOnlyA,
        Ablation::SelfOnlyU,
        Ablation::Embedding,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WorstAu => "worst-au",
            Ablation::SelfOnlyA => "self-only-a",
            Ablation::SelfOnlyU => "self-only-u",
            Ablation::Embedding => "embedding",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation {s:?}; expected one of {}", names.join(", ")))
            })
    }

    /// Tuner config for this variant given the layer diagnostics.
    pub fn configure(self, base: &TunerConfig, diag: &LayerDiagnostics) -> TunerConfig {
        let mut c = base.clone();
        let (a, u) = (diag.selected_a, diag.selected_u);
        match self {
            Ablation::Full => {
                c.align_layer = a;
                c.uniform_layer = u;
            }
            Ablation::WorstAu => {
                c.align_layer = diag.worst_a();
                c.uniform_layer = diag.worst_u();
            }
            Ablation::SelfOnlyA => {
                c.align_layer = a;
                c.uniform_layer = u;
                c.cross_attention = false;
                c.connection_mode = ConnectionMode::AToU;
            }
            Ablation::SelfOnlyU => {
                c.align_layer = a;
                c.uniform_layer = u;
                c.cross_attention = false;
                c.connection_mode = ConnectionMode::UToA;
            }
            Ablation::Embedding => {
                c.align_layer = 0;
                c.uniform_layer = 0;
            }
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cached hidden states and judgments for one retrieval task.
pub struct TaskData<'a> {
    pub queries: &'a [LayeredStates],
    pub corpus: &'a [LayeredStates],
    pub qrels: &'a Qrels,
    pub train_examples: &'a [TrainExample],
}

impl TaskData<'_> {
    fn cache(&self, config: &TunerConfig) -> Result<StateCache> {
        StateCache::build(self.queries.iter().chain(self.corpus), config)
    }

    /// Initial tuner input width, taken from the first query record.
    pub fn d_llm(&self) -> Result<usize> {
        self.queries
            .first()
            .map(|r| r.d_model)
            .ok_or_else(|| Error::Data("task has no query records".into()))
    }
}

/// Outcome of training and evaluating one configuration.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub config: TunerConfig,
    pub untrained_ndcg: f64,
    pub trained_ndcg: f64,
    pub outcome: TrainOutcome,
    pub report: EvalReport,
}

/// Trains a tuner with `config` and evaluates it before and after.
pub fn train_and_evaluate(
    data: &TaskData<'_>,
    config: &TunerConfig,
    train: &TrainConfig,
    k: usize,
) -> Result<VariantResult> {
    config.validate(data.d_llm()?)?;
    let cache = data.cache(config)?;
    let init = TunerParams::init(config, data.d_llm()?)?;
    let before = evaluate_tuner(data.queries, data.corpus, data.qrels, &init, config, train, k)?;
    let outcome = train_loop(data.train_examples, &cache, config, train, TrainControl::default())?;
    let report = evaluate_tuner(data.queries, data.corpus, data.qrels, &outcome.params, config, train, k)?;
    Ok(VariantResult {
        config: config.clone(),
        untrained_ndcg: before.mean_ndcg,
        trained_ndcg: report.mean_ndcg,
        outcome,
        report,
    })
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub align_layer: u32,
    pub uniform_layer: u32,
    pub cross_attention: bool,
    pub untrained_ndcg: f64,
    pub trained_ndcg: f64,
}

/// Runs each ablation with the same seeds and returns one row each.
pub fn run_ablations(
    data: &TaskData<'_>,
    diag: &LayerDiagnostics,
    base: &TunerConfig,
    train: &TrainConfig,
    ablations: &[Ablation],
    k: usize,
) -> Result<Vec<AblationRow>> {
    let mut done: HashMap<Ablation, AblationRow> = HashMap::new();
    let mut rows = Vec::with_capacity(ablations.len());
    for &a in ablations {
        if let Some(r) = done.get(&a) {
            rows.push(r.clone());
            continue;
        }
        let config = a.configure(base, diag);
        log::info!(
            "ablation {a}: layers a={} u={} cross={}",
            config.align_layer,
            config.uniform_layer,
            config.cross_attention
        );
        let res = train_and_evaluate(data, &config, train, k)?;
        let row = AblationRow {
            ablation: a,
            align_layer: config.align_layer,
            uniform_layer: config.uniform_layer,
            cross_attention: config.cross_attention,
            untrained_ndcg: res.untrained_ndcg,
            trained_ndcg: res.trained_ndcg,
        };
        done.insert(a, row.clone());
        rows.push(row);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("ablation,align_layer,uniform_layer,cross_attention,untrained_ndcg_at_10,trained_ndcg_at_10\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6}\n",
            r.ablation, r.align_layer, r.uniform_layer, r.cross_attention, r.untrained_ndcg, r.trained_ndcg
        ));
    }
    s
}
