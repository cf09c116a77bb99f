//! Retrieval and zero-shot evaluation of a pre-trained bundle.

use ndarray::{ArrayView2, ArrayView3};

use super::checkpoint::{CheckpointBundle, Stage};
use crate::alignment::Pair;
use crate::data::{Dataset, PromptBank, Split};
use crate::encoders::TriModalEncoders;
use crate::error::{config, Result};
use crate::metrics::{recall_at_k, zero_shot_ranking, MetricsReport};
use crate::modality::Modality;
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Embeddings of one modality for the given samples.
pub fn embed_modality(
    enc: &TriModalEncoders,
    store: &ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    m: Modality,
) -> Result<Matrix> {
    let t: Vec<_> = indices.iter().map(|&i| &dataset.triplets[i]).collect();
    match m {
        Modality::Image => {
            let v: Vec<ArrayView3<'_, f32>> = t.iter().map(|t| t.image.view()).collect();
            enc.encode_image(store, &v)
        }
        Modality::Text => {
            let v: Vec<&[u32]> = t.iter().map(|t| t.tokens.as_slice()).collect();
            enc.encode_text(store, &v)
        }
        Modality::Audio => {
            let v: Vec<ArrayView2<'_, f32>> = t.iter().map(|t| t.spectrogram.view()).collect();
            enc.encode_audio(store, &v)
        }
    }
}

/// Embeddings of the given samples, in image, text, audio order.
pub fn embed_samples(
    enc: &TriModalEncoders,
    store: &ParamStore,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<[Matrix; 3]> {
    Ok([
        embed_modality(enc, store, dataset, indices, Modality::Image)?,
        embed_modality(enc, store, dataset, indices, Modality::Text)?,
        embed_modality(enc, store, dataset, indices, Modality::Audio)?,
    ])
}

pub fn retrieval_key(k: usize, pair: Pair) -> String {
    format!("R@{k} {pair}")
}

/// `R@k` for each pair on the test split, querying with the pair's first
/// modality against a gallery of its second, plus the mean over pairs.
pub fn retrieval_scores(embeddings: &[Matrix; 3], k: usize) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for p in Pair::ALL {
        let (a, b) = p.modalities();
        out[p.index()] = recall_at_k(&embeddings[a.index()], &embeddings[b.index()], k)?;
    }
    out[3] = (out[0] + out[1] + out[2]) / 3.0;
    Ok(out)
}

pub fn evaluate_retrieval(dataset: &Dataset, bundle: &CheckpointBundle, ks: &[usize]) -> Result<MetricsReport> {
    let (store, enc) = bundle.restore_encoders()?;
    let test = dataset.indices(Split::Test);
    let emb = embed_samples(&enc, &store, dataset, &test)?;
    let mut report = MetricsReport::new("retrieval", bundle.header.seed, bundle.header.config_digest.clone());
    for &k in ks {
        let s = retrieval_scores(&emb, k)?;
        for p in Pair::ALL {
            report.set(&retrieval_key(k, p), s[p.index()]);
        }
        report.set(&format!("R@{k} avg"), s[3]);
    }
    report.notes.push(format!("{} test queries per pair; ties rank the lower gallery index first", test.len()));
    Ok(report)
}

/// One text embedding per category: the mean over templates of the
/// encoded prompts, renormalized.
pub fn class_prototypes(
    enc: &TriModalEncoders,
    store: &ParamStore,
    dataset: &Dataset,
    bank: &PromptBank,
) -> Result<Matrix> {
    bank.validate()?;
    let vocab = &dataset.manifest.vocab;
    let max_len = dataset.manifest.corpus.synth.max_tokens;
    let cats = &dataset.manifest.categories;
    let mut out = Matrix::zeros(cats.len(), enc.d_proj());
    for (c, spec) in cats.iter().enumerate() {
        let seqs = (0..bank.len())
            .map(|i| vocab.tokenize(&bank.instantiate(i, &spec.name)?, max_len))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let e = enc.encode_text(store, &refs)?;
        let row = out.row_mut(c);
        for r in 0..e.rows() {
            for (o, v) in row.iter_mut().zip(e.row(r)) {
                *o += v / e.rows() as f64;
            }
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

pub fn zero_shot_key(k: usize) -> String {
    format!("top-{k}")
}

/// Top-k accuracy (percent) of classifying test samples of `target`
/// against category prompts built from a held-out template bank.
pub fn evaluate_zero_shot(
    dataset: &Dataset,
    bundle: &CheckpointBundle,
    bank: &PromptBank,
    target: Modality,
    ks: &[usize],
) -> Result<MetricsReport> {
    bundle.require_stage(Stage::Pretrain)?;
    if target == Modality::Text {
        return config("zero-shot classification targets image or audio samples");
    }
    if !bank.disjoint_from(&dataset.manifest.templates) {
        return config("zero-shot templates must be disjoint from the training templates");
    }
    let c = dataset.num_categories();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > c) {
        return config(format!("top-{k} requested with {c} categories"));
    }
    let (store, enc) = bundle.restore_encoders()?;
    let protos = class_prototypes(&enc, &store, dataset, bank)?;
    let test = dataset.indices(Split::Test);
    let samples: Vec<_> = test.iter().map(|&i| &dataset.triplets[i]).collect();
    let emb = embed_modality(&enc, &store, dataset, &test, target)?;
    let mut hits = vec![0usize; ks.len()];
    for (r, t) in samples.iter().enumerate() {
        let order = zero_shot_ranking(emb.row(r), &protos)?;
        let pos = order.iter().position(|&o| o == t.category_id as usize).expect("category present");
        for (h, &k) in hits.iter_mut().zip(ks) {
            *h += usize::from(pos < k);
        }
    }
    let mut report =
        MetricsReport::new(format!("zero-shot {target}"), bundle.header.seed, bundle.header.config_digest.clone());
    for (h, &k) in hits.iter().zip(ks) {
        report.set(&zero_shot_key(k), 100.0 * *h as f64 / samples.len() as f64);
    }
    report.notes.push(format!(
        "{c} categories, {} held-out templates, chance top-1 {:.2}%",
        bank.len(),
        100.0 / c as f64
    ));
    Ok(report)
}
