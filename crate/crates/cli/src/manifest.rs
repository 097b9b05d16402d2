//! TOML run manifest. Every section is optional; missing fields take the
//! library defaults. Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use lmort_core::space_analysis::PairBudget;
use lmort_core::synthetic_llm::{EmulatorConfig, TaskSpec};
use lmort_core::training::TrainConfig;
use lmort_core::tuner::TunerConfig;
use lmort_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub out_dir: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub qrels: Option<PathBuf>,
    pub train_examples: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub heatmap: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub dump: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub query_vectors: Option<PathBuf>,
    pub corpus_vectors: Option<PathBuf>,
    pub run: Option<PathBuf>,
    pub per_query: Option<PathBuf>,
    pub ablation_csv: Option<PathBuf>,
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.out_dir,
            &mut self.queries,
            &mut self.corpus,
            &mut self.qrels,
            &mut self.train_examples,
            &mut self.pairs,
            &mut self.heatmap,
            &mut self.checkpoint,
            &mut self.checkpoint_dir,
            &mut self.dump,
            &mut self.vectors,
            &mut self.query_vectors,
            &mut self.corpus_vectors,
            &mut self.run,
            &mut self.per_query,
            &mut self.ablation_csv,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// `"all"` or a number of sampled ordered pairs.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum BudgetSetting {
    Pairs(u64),
    Keyword(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analysis {
    /// Uniformity pair budget; unset picks the size-based default.
    pub pair_budget: Option<BudgetSetting>,
    pub seed: u64,
}

impl Analysis {
    pub fn budget(&self) -> Result<Option<PairBudget>> {
        match &self.pair_budget {
            None => Ok(None),
            Some(BudgetSetting::Pairs(0)) => Err(Error::Config("analysis.pair_budget must be positive".into())),
            Some(BudgetSetting::Pairs(n)) => Ok(Some(PairBudget::Sampled(*n))),
            Some(BudgetSetting::Keyword(s)) if s == "all" => Ok(Some(PairBudget::All)),
            Some(BudgetSetting::Keyword(s)) => Err(Error::Config(format!(
                "analysis.pair_budget {s:?} is neither \"all\" nor a pair count"
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Search {
    /// Run depth per query.
    pub k: usize,
}

impl Default for Search {
    fn default() -> Self {
        Self { k: 100 }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablate {
    /// Ablation names; empty runs all of them.
    pub names: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Manifest {
    pub paths: Paths,
    pub emulator: EmulatorConfig,
    pub task: TaskSpec,
    pub analysis: Analysis,
    pub tuner: TunerConfig,
    pub train: TrainConfig,
    pub search: Search,
    pub ablate: Ablate,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.paths.resolve_against(base);
        Ok(m)
    }
}
