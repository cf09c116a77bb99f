//! Reconstruction, retrieval and classification metrics, and the report
//! container they are collected into.

use std::collections::BTreeMap;
use std::f64::consts::{LN_10, PI};
use std::fmt;

use ndarray::{Array2, ArrayView, ArrayView2, Dimension};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::alignment::similarity_matrix;
use crate::data::PAD;
use crate::error::{config, shape, Result};
use crate::tensor::Matrix;

/// Floor added to mel energies before the logarithm.
pub const MEL_LOG_FLOOR: f64 = 1e-4;
pub const DEFAULT_CEPSTRA: usize = 13;

/// `10·log10(max² / MSE)`, or `+∞` for identical inputs.
pub fn psnr<D: Dimension>(x: ArrayView<'_, f64, D>, y: ArrayView<'_, f64, D>, max_val: f64) -> Result<f64> {
    if x.shape() != y.shape() {
        return shape(format!("PSNR of {:?} and {:?}", x.shape(), y.shape()));
    }
    if !(max_val > 0.0) {
        return config(format!("PSNR peak value must be positive, got {max_val}"));
    }
    if x.is_empty() {
        return shape("PSNR of empty arrays");
    }
    let mse = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Mel-cepstral coefficients `c_1..c_D` for each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CepstraSequence {
    /// `T × D`.
    pub frames: Array2<f64>,
}

impl CepstraSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn order(&self) -> usize {
        self.frames.ncols()
    }
}

/// Orthonormal DCT-II of each frame of a `F × T` mel spectrogram after
/// `ln(ε + x)`, keeping coefficients `1..=d`.
pub fn mel_cepstra(spectrogram: ArrayView2<'_, f64>, d: usize) -> Result<CepstraSequence> {
    let (f, t) = spectrogram.dim();
    if d == 0 || d >= f {
        return config(format!("cepstral order {d} must lie in 1..{f}"));
    }
    if spectrogram.iter().any(|&v| !(v >= 0.0)) {
        return config("mel energies must be non-negative");
    }
    let scale = (2.0 / f as f64).sqrt();
    let basis: Vec<Vec<f64>> = (1..=d)
        .map(|k| (0..f).map(|m| scale * (PI * k as f64 * (m as f64 + 0.5) / f as f64).cos()).collect())
        .collect();
    let mut frames = Array2::zeros((t, d));
    for frame in 0..t {
        let logs: Vec<f64> = (0..f).map(|m| (MEL_LOG_FLOOR + spectrogram[[m, frame]]).ln()).collect();
        for (k, b) in basis.iter().enumerate() {
            frames[[frame, k]] = b.iter().zip(&logs).map(|(w, x)| w * x).sum();
        }
    }
    Ok(CepstraSequence { frames })
}

/// Mean over frames of `(10 / ln 10)·sqrt(2·Σ_d Δc_d²)`.
pub fn mcd(reference: &CepstraSequence, synthesized: &CepstraSequence) -> Result<f64> {
    if reference.frames.dim() != synthesized.frames.dim() {
        return shape(format!(
            "cepstra of {:?} and {:?} frames×order",
            reference.frames.dim(),
            synthesized.frames.dim()
        ));
    }
    let t = reference.num_frames();
    if t == 0 {
        return shape("MCD over zero frames");
    }
    let k = 10.0 / LN_10;
    let total: f64 = reference
        .frames
        .rows()
        .into_iter()
        .zip(synthesized.frames.rows())
        .map(|(a, b)| k * (2.0 * a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).sqrt())
        .sum();
    Ok(total / t as f64)
}

/// Percentage of non-pad reference positions predicted exactly.
pub fn token_accuracy(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.len() != hypothesis.len() {
        return shape(format!("token sequences of {} and {} positions", reference.len(), hypothesis.len()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, h) in reference.iter().zip(hypothesis) {
        if *r != PAD {
            total += 1;
            hit += usize::from(r == h);
        }
    }
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * hit as f64 / total as f64)
}

/// Exact-match unigram alignment: each hypothesis token takes the reference
/// position right after its predecessor's match when possible, otherwise
/// the earliest unused match. Returns `(matches, chunks)`.
fn align_exact(reference: &[u32], hypothesis: &[u32]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut matches, mut chunks) = (0, 0);
    for &h in hypothesis {
        let next = prev.map(|p| p + 1).filter(|&q| q < reference.len() && !used[q] && reference[q] == h);
        let pick = next.or_else(|| (0..reference.len()).find(|&q| !used[q] && reference[q] == h));
        match pick {
            Some(q) => {
                used[q] = true;
                matches += 1;
                if next.is_none() {
                    chunks += 1;
                }
                prev = Some(q);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

/// METEOR restricted to exact unigram matches.
pub fn meteor_exact(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let (m, chunks) = align_exact(reference, hypothesis);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hypothesis.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f * (1.0 - penalty)
}

/// 1-based rank of gallery item `truth` in a similarity row; ties go to the
/// lower gallery index.
fn rank_of(row: &[f64], truth: usize) -> usize {
    let s = row[truth];
    1 + row.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < truth)).count()
}

/// Fraction of queries whose matched gallery row ranks within the top `k`
/// by cosine similarity.
pub fn recall_at_k(queries: &Matrix, gallery: &Matrix, k: usize) -> Result<f64> {
    if queries.shape() != gallery.shape() {
        return shape(format!("queries {:?} against gallery {:?}", queries.shape(), gallery.shape()));
    }
    let n = queries.rows();
    if k == 0 || k > n {
        return config(format!("k = {k} outside 1..={n}"));
    }
    let sim = similarity_matrix(queries, gallery)?;
    let hits = (0..n).filter(|&i| rank_of(sim.row(i), i) <= k).count();
    Ok(hits as f64 / n as f64)
}

/// Class indices ordered by descending cosine similarity, ties by index.
pub fn zero_shot_ranking(sample: &[f64], classes: &Matrix) -> Result<Vec<usize>> {
    if classes.rows() == 0 {
        return config("zero-shot classification needs at least one class");
    }
    if sample.len() != classes.cols() {
        return shape(format!("sample of width {} against classes of width {}", sample.len(), classes.cols()));
    }
    let q = Matrix::from_vec(1, sample.len(), sample.to_vec())?;
    let sim = similarity_matrix(&q, classes)?;
    let row = sim.row(0);
    let mut order: Vec<usize> = (0..classes.rows()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    Ok(order)
}

pub fn zero_shot_classify(sample: &[f64], classes: &Matrix) -> Result<usize> {
    Ok(zero_shot_ranking(sample, classes)?[0])
}

/// A reported metric: a finite number, the `+∞` of an exact reconstruction,
/// or a slot for a metric that is deliberately not computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MetricValue {
    Value(f64),
    Infinite,
    NotApplicable,
}

pub const NOT_APPLICABLE: &str = "n/a (out of scope)";

impl MetricValue {
    pub fn from_f64(v: f64) -> Self {
        if v == f64::INFINITY {
            MetricValue::Infinite
        } else {
            MetricValue::Value(v)
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            MetricValue::Value(v) => Some(*v),
            MetricValue::Infinite => Some(f64::INFINITY),
            MetricValue::NotApplicable => None,
        }
    }
}

impl fmt::Display for MetricValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricValue::Value(v) => write!(f, "{v:.4}"),
            MetricValue::Infinite => f.write_str("inf"),
            MetricValue::NotApplicable => f.write_str(NOT_APPLICABLE),
        }
    }
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MetricValue::Value(v) => s.serialize_f64(*v),
            MetricValue::Infinite => s.serialize_str("inf"),
            MetricValue::NotApplicable => s.serialize_str(NOT_APPLICABLE),
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = MetricValue;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "a number, \"inf\" or \"{NOT_APPLICABLE}\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue::Value(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue::Value(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue::Value(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<MetricValue, E> {
                match v {
                    "inf" => Ok(MetricValue::Infinite),
                    NOT_APPLICABLE => Ok(MetricValue::NotApplicable),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Missing modality, or `alignment` / `zero-shot` style labels.
    pub scenario: String,
    pub seed: u64,
    pub config_digest: String,
    /// Column order for rendering.
    pub columns: Vec<String>,
    pub values: BTreeMap<String, MetricValue>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn new(scenario: impl Into<String>, seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            scenario: scenario.into(),
            seed,
            config_digest: config_digest.into(),
            columns: Vec::new(),
            values: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: MetricValue) {
        if !self.columns.iter().any(|c| c == name) {
            self.columns.push(name.to_string());
        }
        self.values.insert(name.to_string(), value);
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.insert(name, MetricValue::from_f64(value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).and_then(MetricValue::as_f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: one header row and one value row, then notes.
    pub fn render_table(&self) -> String {
        let mut header = vec!["scenario".to_string(), "seed".to_string()];
        let mut row = vec![self.scenario.clone(), self.seed.to_string()];
        for c in &self.columns {
            header.push(c.clone());
            row.push(self.values.get(c).map_or_else(String::new, |v| v.to_string()));
        }
        let mut out = render_rows(&[header, row]);
        out.push_str(&format!("config digest: {}\n", self.config_digest));
        for n in &self.notes {
            out.push_str(&format!("note: {n}\n"));
        }
        out
    }
}

/// Left-aligned columns separated by two spaces, with a rule under the
/// first row.
pub fn render_rows(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let line = |r: &Vec<String>| {
        let cells: Vec<String> =
            (0..cols).map(|c| format!("{:<w$}", r.get(c).map_or("", String::as_str), w = widths[c])).collect();
        cells.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&line(r));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&(rule.join("  ") + "\n"));
        }
    }
    out
}
