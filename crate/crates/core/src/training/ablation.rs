//! Loss-weight ablation: one pre-training run per (weights, seed) cell,
//! scored by test-split retrieval.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PretrainConfig;
use super::evaluate::{embed_samples, retrieval_scores};
use super::pretrain::pretrain;
use crate::data::{Dataset, Split};
use crate::error::{config, Result};
use crate::metrics::render_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GridEntry {
    pub fn new(label: &str, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { label: label.to_string(), alpha, beta, gamma }
    }
}

/// Balanced weights plus every single and double substitution of 0.5.
pub fn default_grid() -> Vec<GridEntry> {
    vec![
        GridEntry::new("Baseline", 1.0, 1.0, 1.0),
        GridEntry::new("A1", 0.5, 1.0, 1.0),
        GridEntry::new("A2", 1.0, 0.5, 1.0),
        GridEntry::new("A3", 1.0, 1.0, 0.5),
        GridEntry::new("B1", 1.0, 0.5, 0.5),
        GridEntry::new("B2", 0.5, 1.0, 0.5),
        GridEntry::new("B3", 0.5, 0.5, 1.0),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub seed: u64,
    /// R@k for img-txt, txt-aud, aud-img and their mean.
    pub recall: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub entry: GridEntry,
    /// Seed means of the cell values.
    pub recall: [f64; 4],
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k: usize,
    pub seeds: Vec<u64>,
    pub test_size: usize,
    pub rows: Vec<AblationRow>,
    pub footer: Vec<String>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.entry.label == label)
    }

    pub fn header(&self) -> Vec<String> {
        let k = self.k;
        vec![
            "config".into(),
            "alpha".into(),
            "beta".into(),
            "gamma".into(),
            format!("R@{k} img-txt"),
            format!("R@{k} txt-aud"),
            format!("R@{k} aud-img"),
            format!("R@{k} avg"),
        ]
    }

    /// Aligned text with recall values in percent.
    pub fn render(&self) -> String {
        let mut rows = vec![self.header()];
        for r in &self.rows {
            let mut line = vec![
                r.entry.label.clone(),
                format!("{:.1}", r.entry.alpha),
                format!("{:.1}", r.entry.beta),
                format!("{:.1}", r.entry.gamma),
            ];
            line.extend(r.recall.iter().map(|v| format!("{:.2}", 100.0 * v)));
            rows.push(line);
        }
        let mut out = render_rows(&rows);
        for f in &self.footer {
            out.push_str(&format!("note: {f}\n"));
        }
        out
    }
}

/// Runs every (grid entry, seed) cell. All configurations start from the
/// same initialization for a given seed. Cells run in parallel and each is
/// deterministic on its own.
pub fn run_ablation(
    dataset: &Dataset,
    base: &PretrainConfig,
    grid: &[GridEntry],
    seeds: &[u64],
    k: usize,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return config("ablation grid is empty");
    }
    if seeds.is_empty() {
        return config("ablation needs at least one seed");
    }
    let test = dataset.indices(Split::Test);
    if k == 0 || k > test.len() {
        return config(format!("R@{k} on a {}-sample test split", test.len()));
    }
    let cells: Vec<(usize, u64)> = (0..grid.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let results = cells
        .par_iter()
        .map(|&(r, seed)| {
            let e = &grid[r];
            let mut cfg = base.clone();
            cfg.alignment.alpha = e.alpha;
            cfg.alignment.beta = e.beta;
            cfg.alignment.gamma = e.gamma;
            cfg.seed = seed;
            cfg.encoders = base.encoders.with_seed(seed);
            let bundle = pretrain(dataset, &cfg)?;
            let (store, enc) = bundle.restore_encoders()?;
            let emb = embed_samples(&enc, &store, dataset, &test)?;
            Ok(AblationCell { seed, recall: retrieval_scores(&emb, k)? })
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = grid
        .iter()
        .enumerate()
        .map(|(r, e)| {
            let own: Vec<AblationCell> =
                cells.iter().zip(&results).filter(|((row, _), _)| *row == r).map(|(_, c)| *c).collect();
            let mut recall = [0.0; 4];
            for c in &own {
                for (m, v) in recall.iter_mut().zip(c.recall) {
                    *m += v / own.len() as f64;
                }
            }
            AblationRow { entry: e.clone(), recall, cells: own }
        })
        .collect();
    let list = seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(", ");
    let mut footer = vec![if seeds.len() == 1 {
        format!("single seed ({list})")
    } else {
        format!("mean over {} seeds ({list}); per-seed cells are in the JSON output", seeds.len())
    }];
    footer.push(format!("R@{k} in percent on the {}-sample test split; query modality listed first", test.len()));
    Ok(AblationTable { k, seeds: seeds.to_vec(), test_size: test.len(), rows, footer })
}
