//! Layer-wise alignment / uniformity diagnostics of a frozen representation
//! space and selection of the best (and worst) layers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hidden_states::LayeredStates;
use crate::tensor::{l2_norm, squared_distance};

/// Tolerance on `‖v‖ = 1` for vectors flagged as normalized.
pub const UNIT_TOLERANCE: f64 = 1e-6;
/// Sample count up to which uniformity is enumerated exhaustively by default.
pub const EXHAUSTIVE_LIMIT: usize = 2048;
pub const DEFAULT_SAMPLED_PAIRS: u64 = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RepVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl RepVector {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// L2-normalizes `values`. Fails on the zero vector.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::numeric("normalization", "vector has zero or non-finite norm"));
        }
        Ok(Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn check_unit(&self) -> Result<()> {
        if !self.normalized {
            return Err(Error::Data("expected a normalized vector".into()));
        }
        let norm = l2_norm(&self.values);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Data(format!(
                "vector flagged normalized has norm {norm}"
            )));
        }
        Ok(())
    }
}

/// Mean of the unmasked rows of an `n × d` row-major block, optionally
/// L2-normalized.
pub fn pooled_rep(states: &[f32], d: usize, mask: &[bool], normalize: bool) -> Result<RepVector> {
    if states.len() != mask.len() * d {
        return Err(Error::Data(format!(
            "states hold {} values, expected {} x {}",
            states.len(),
            mask.len(),
            d
        )));
    }
    let mut sum = vec![0.0f64; d];
    let mut count = 0usize;
    for (row, &keep) in states.chunks_exact(d).zip(mask) {
        if keep {
            count += 1;
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += v as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("cannot pool: every token is masked".into()));
    }
    let mean: Vec<f64> = sum.into_iter().map(|s| s / count as f64).collect();
    if normalize {
        RepVector::unit(mean)
    } else {
        Ok(RepVector::raw(mean))
    }
}

/// Analysis representation of one stored layer: mean pooling + L2 norm.
pub fn layer_rep(record: &LayeredStates, layer: u32) -> Result<RepVector> {
    let states = record.layer(layer).ok_or_else(|| {
        Error::Data(format!(
            "layer {layer} missing from sequence {:?} (stored: {:?})",
            record.sequence_id, record.layer_indices
        ))
    })?;
    pooled_rep(states, record.d_model, &record.attention_mask, true)
}

/// Mean squared distance between the members of each positive pair.
pub fn alignment_loss(pairs: &[(RepVector, RepVector)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("alignment loss needs at least one pair".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        a.check_unit()?;
        b.check_unit()?;
        if a.dim() != b.dim() {
            return Err(Error::Data("pair members differ in dimension".into()));
        }
        total += squared_distance(&a.values, &b.values);
    }
    Ok(total / pairs.len() as f64)
}

/// How many ordered pairs the uniformity estimate looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairBudget {
    /// Every ordered pair, self-pairs included.
    All,
    /// Seeded i.i.d. sampling of this many ordered pairs. A budget of at
    /// least `n²` enumerates exhaustively instead.
    Sampled(u64),
}

impl PairBudget {
    pub fn default_for(sample_count: usize) -> Self {
        if sample_count <= EXHAUSTIVE_LIMIT {
            PairBudget::All
        } else {
            PairBudget::Sampled(DEFAULT_SAMPLED_PAIRS)
        }
    }
}

/// `log E exp(−2‖x − y‖²)` over ordered pairs of `samples`.
pub fn uniformity_loss(samples: &[RepVector], budget: PairBudget, seed: u64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("uniformity loss needs at least one sample".into()));
    }
    let dim = samples[0].dim();
    for s in samples {
        s.check_unit()?;
        if s.dim() != dim {
            return Err(Error::Data("samples differ in dimension".into()));
        }
    }
    let n = samples.len();
    let potential = |i: usize, j: usize| (-2.0 * squared_distance(&samples[i].values, &samples[j].values)).exp();
    let exhaustive = match budget {
        PairBudget::All => true,
        PairBudget::Sampled(m) => (n as u128 * n as u128) <= m as u128,
    };
    let mean = if exhaustive {
        let total: f64 = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| potential(i, j)).sum::<f64>())
            .collect::<Vec<_>>()
            .into_iter()
            .sum();
        total / (n as f64 * n as f64)
    } else {
        let PairBudget::Sampled(m) = budget else {
            unreachable!()
        };
        if m == 0 {
            return Err(Error::Config("pair budget must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut total = 0.0;
        for _ in 0..m {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            total += potential(i, j);
        }
        total / m as f64
    };
    Ok(mean.ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub layer: u32,
    pub align_loss: f64,
    pub uniform_loss: f64,
    pub pair_count: usize,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDiagnostics {
    /// Sorted by layer index.
    pub rows: Vec<LayerRow>,
    pub selected_a: u32,
    pub selected_u: u32,
}

fn arg_by(rows: &[LayerRow], key: impl Fn(&LayerRow) -> f64, want_max: bool) -> u32 {
    let mut best = &rows[0];
    for r in &rows[1..] {
        let (k, kb) = (key(r), key(best));
        let better = if want_max { k > kb } else { k < kb };
        if better || (k == kb && r.layer < best.layer) {
            best = r;
        }
    }
    best.layer
}

impl LayerDiagnostics {
    /// Sorts rows and selects the argmin layers (ties → lowest index).
    pub fn from_rows(mut rows: Vec<LayerRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("diagnostics need at least one layer".into()));
        }
        rows.sort_by_key(|r| r.layer);
        let selected_a = arg_by(&rows, |r| r.align_loss, false);
        let selected_u = arg_by(&rows, |r| r.uniform_loss, false);
        Ok(Self {
            rows,
            selected_a,
            selected_u,
        })
    }

    /// Layer with the highest alignment loss.
    pub fn worst_a(&self) -> u32 {
        arg_by(&self.rows, |r| r.align_loss, true)
    }

    /// Layer with the highest uniformity loss.
    pub fn worst_u(&self) -> u32 {
        arg_by(&self.rows, |r| r.uniform_loss, true)
    }

    pub fn row(&self, layer: u32) -> Option<&LayerRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,align_loss,uniform_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{}",
                r.layer,
                format_sig9(r.align_loss),
                format_sig9(r.uniform_loss)
            );
        }
        s
    }
}

/// Scientific notation with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn export_heatmap_csv(diag: &LayerDiagnostics, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, diag.to_csv()).map_err(|e| Error::io(path, e))
}

/// Parses a heatmap CSV. Pair/sample counts are not stored and come back 0.
pub fn parse_heatmap_csv(text: &str) -> Result<LayerDiagnostics> {
    let mut lines = text.lines();
    match lines.next() {
        Some("layer,align_loss,uniform_loss") => {}
        other => {
            return Err(Error::Format(format!("unexpected heatmap header {other:?}")))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Format(format!("heatmap line {}: {line:?}", i + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(bad());
        }
        rows.push(LayerRow {
            layer: cols[0].parse().map_err(|_| bad())?,
            align_loss: cols[1].parse().map_err(|_| bad())?,
            uniform_loss: cols[2].parse().map_err(|_| bad())?,
            pair_count: 0,
            sample_count: 0,
        });
    }
    LayerDiagnostics::from_rows(rows)
}

pub fn read_heatmap_csv(path: impl AsRef<Path>) -> Result<LayerDiagnostics> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_heatmap_csv(&text)
}

/// Inputs of a layer sweep.
pub struct SweepInput<'a> {
    pub queries: &'a [LayeredStates],
    pub passages: &'a [LayeredStates],
    pub positive_pairs: &'a [(String, String)],
}

/// Per-layer alignment (over positive pairs) and uniformity (over the
/// pooled query + passage multiset) losses.
pub fn sweep_layers(
    input: &SweepInput<'_>,
    layers: &[u32],
    budget: Option<PairBudget>,
    seed: u64,
) -> Result<LayerDiagnostics> {
    if layers.is_empty() {
        return Err(Error::Data("no layers to sweep".into()));
    }
    let q_index: HashMap<&str, &LayeredStates> = input
        .queries
        .iter()
        .map(|r| (r.sequence_id.as_str(), r))
        .collect();
    let p_index: HashMap<&str, &LayeredStates> = input
        .passages
        .iter()
        .map(|r| (r.sequence_id.as_str(), r))
        .collect();
    let mut pair_records = Vec::with_capacity(input.positive_pairs.len());
    for (q, p) in input.positive_pairs {
        let qr = q_index
            .get(q.as_str())
            .ok_or_else(|| Error::Data(format!("positive pair references unknown query {q:?}")))?;
        let pr = p_index
            .get(p.as_str())
            .ok_or_else(|| Error::Data(format!("positive pair references unknown passage {p:?}")))?;
        pair_records.push((*qr, *pr));
    }
    let all: Vec<&LayeredStates> = input.queries.iter().chain(input.passages).collect();
    let budget = budget.unwrap_or_else(|| PairBudget::default_for(all.len()));

    let rows = layers
        .par_iter()
        .map(|&layer| -> Result<LayerRow> {
            let samples = all
                .iter()
                .map(|r| layer_rep(r, layer))
                .collect::<Result<Vec<_>>>()?;
            let pairs = pair_records
                .iter()
                .map(|(q, p)| Ok((layer_rep(q, layer)?, layer_rep(p, layer)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LayerRow {
                layer,
                align_loss: alignment_loss(&pairs)?,
                uniform_loss: uniformity_loss(&samples, budget, seed ^ layer as u64)?,
                pair_count: pairs.len(),
                sample_count: samples.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerDiagnostics::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> RepVector {
        RepVector::unit(v.to_vec()).unwrap()
    }

    #[test]
    fn pooling_cases() {
        let r = pooled_rep(&[1.0, 3.0, 3.0, 5.0], 2, &[true, true], false).unwrap();
        assert_eq!(r.values, vec![2.0, 4.0]);
        let r = pooled_rep(&[3.0, 4.0], 2, &[true], true).unwrap();
        assert_eq!(r.values, vec![0.6, 0.8]);
        let r = pooled_rep(&[1.0, 0.0, 9.0, 9.0], 2, &[true, false], false).unwrap();
        assert_eq!(r.values, vec![1.0, 0.0]);
        assert!(pooled_rep(&[1.0, 0.0], 2, &[false], false).is_err());
    }

    #[test]
    fn alignment_units() {
        let e1 = unit(&[1.0, 0.0]);
        let e2 = unit(&[0.0, 1.0]);
        assert_eq!(alignment_loss(&[(e1.clone(), e1.clone())]).unwrap(), 0.0);
        assert!((alignment_loss(&[(e1.clone(), e2)]).unwrap() - 2.0).abs() < 1e-15);
        assert!(alignment_loss(&[]).is_err());
        let raw = RepVector::raw(vec![2.0, 0.0]);
        assert!(alignment_loss(&[(raw, e1)]).is_err());
    }

    #[test]
    fn uniformity_units() {
        let u = unit(&[0.6, 0.8]);
        let same = vec![u.clone(); 5];
        assert_eq!(uniformity_loss(&same, PairBudget::All, 0).unwrap(), 0.0);
        let neg = unit(&[-0.6, -0.8]);
        let v = uniformity_loss(&[u, neg], PairBudget::All, 0).unwrap();
        // (e^0 + e^0 + e^-8 + e^-8) / 4
        let expected = ((2.0 + 2.0 * (-8.0f64).exp()) / 4.0).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v + 0.69281).abs() < 1e-5);
        assert!(uniformity_loss(&[], PairBudget::All, 0).is_err());
    }

    #[test]
    fn selection_prefers_lowest_index_on_ties() {
        let row = |layer, a, u| LayerRow {
            layer,
            align_loss: a,
            uniform_loss: u,
            pair_count: 1,
            sample_count: 1,
        };
        let d = LayerDiagnostics::from_rows(vec![
            row(3, 0.5, -1.0),
            row(1, 0.5, -2.0),
            row(2, 0.9, -2.0),
        ])
        .unwrap();
        assert_eq!(d.rows.iter().map(|r| r.layer).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(d.selected_a, 1);
        assert_eq!(d.selected_u, 1);
        assert_eq!(d.worst_a(), 2);
        assert_eq!(d.worst_u(), 3);
    }

    #[test]
    fn csv_shape_and_idempotence() {
        let rows = (0..3)
            .map(|l| LayerRow {
                layer: l,
                align_loss: 0.123456789123 * (l + 1) as f64,
                uniform_loss: -1.0 / 3.0 * (l + 1) as f64,
                pair_count: 4,
                sample_count: 8,
            })
            .collect();
        let diag = LayerDiagnostics::from_rows(rows).unwrap();
        let csv = diag.to_csv();
        assert_eq!(csv.lines().count(), 4);
        let back = parse_heatmap_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        for (a, b) in diag.rows.iter().zip(&back.rows) {
            assert!(((a.align_loss - b.align_loss) / a.align_loss).abs() < 1e-8);
            assert!(((a.uniform_loss - b.uniform_loss) / a.uniform_loss).abs() < 1e-8);
        }
    }
}
