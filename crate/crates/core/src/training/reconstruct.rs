//! Missing-modality reconstruction training over frozen encoders, and its
//! evaluation against constant-predictor baselines.

use std::collections::BTreeMap;

use log::info;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{BundleHeader, CheckpointBundle, Stage};
use super::config::digest_json;
use super::evaluate::embed_modality;
use super::history::MmrEpoch;
use crate::autodiff::Graph;
use crate::data::synth::mix;
use crate::data::{Dataset, Split, Triplet, BEGIN, PAD};
use crate::encoders::ENCODER_GROUPS;
use crate::error::{config, Error, Result};
use crate::metrics::{
    mcd, mel_cepstra, meteor_exact, psnr, token_accuracy, MetricValue, MetricsReport, DEFAULT_CEPSTRA,
};
use crate::mmr::model::Targets;
use crate::mmr::{ssim, ssim_multichannel, Decoded, ReconConfig, DECODER_GROUP, FUSION_GROUP};
use crate::modality::Modality;
use crate::optim::{AdamW, OptimizerConfig};
use crate::tensor::Matrix;

/// Planar `C × H × W` rows of the image or spectrogram of each sample.
pub fn planar_targets(samples: &[&Triplet], missing: Modality) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = samples
        .iter()
        .map(|t| match missing {
            Modality::Image => t.image.view().permuted_axes([2, 0, 1]).iter().map(|&v| f64::from(v)).collect(),
            _ => t.spectrogram.iter().map(|&v| f64::from(v)).collect(),
        })
        .collect();
    Matrix::from_rows(&rows)
}

pub fn train_mmr(
    dataset: &Dataset,
    pretrained: &CheckpointBundle,
    recon: &ReconConfig,
    optimizer: &OptimizerConfig,
    seed: u64,
) -> Result<CheckpointBundle> {
    pretrained.require_stage(Stage::Pretrain)?;
    recon.validate()?;
    optimizer.validate()?;
    let h = &pretrained.header;
    if h.alignment.d_proj != h.encoders.d_proj() {
        return config(format!(
            "checkpoint d_proj {} does not match its encoders' {}",
            h.alignment.d_proj,
            h.encoders.d_proj()
        ));
    }
    let (mut store, enc) = pretrained.restore_encoders()?;
    let before = store.checksum(Some(&ENCODER_GROUPS));
    if before != h.encoder_checksum {
        return Err(Error::Numeric("checkpoint encoder parameters do not match their recorded checksum".into()));
    }
    let model = crate::mmr::MmrModel::new(&mut store, *recon, enc.d_proj(), h.geometry, seed)?;
    let train = dataset.indices(Split::Train);
    if optimizer.batch_size > train.len() {
        return config(format!("batch size {} exceeds the {}-sample train split", optimizer.batch_size, train.len()));
    }
    let [ma, mb] = model.available();
    let emb_a = embed_modality(&enc, &store, dataset, &train, ma)?;
    let emb_b = embed_modality(&enc, &store, dataset, &train, mb)?;
    let samples: Vec<&Triplet> = train.iter().map(|&i| &dataset.triplets[i]).collect();
    let planar = match recon.missing {
        Modality::Text => None,
        m => Some(planar_targets(&samples, m)?),
    };

    let trainable: Vec<_> = store.ids_in_groups(&[FUSION_GROUP, DECODER_GROUP]).collect();
    let mut opt = AdamW::new(&store, trainable, *optimizer);
    let mut history = pretrained.header.history.clone();
    history.mmr.clear();
    let positions: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..optimizer.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, 0x3317, epoch as u64]));
        let mut order = positions.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for chunk in order.chunks(optimizer.batch_size) {
            let grads = {
                let mut g = Graph::with_frozen(&store, &ENCODER_GROUPS);
                let a = g.input(emb_a.select_rows(chunk));
                let b = g.input(emb_b.select_rows(chunk));
                let out = model.forward(&mut g, a, b)?;
                let loss = match &planar {
                    Some(p) => model.loss(&mut g, out, &Targets::Planar(&p.select_rows(chunk)))?,
                    None => {
                        let toks: Vec<Vec<u32>> = chunk.iter().map(|&i| samples[i].tokens.clone()).collect();
                        model.loss(&mut g, out, &Targets::Tokens(&toks))?
                    }
                };
                sum += g.scalar(loss);
                g.backward(loss)?
            };
            opt.step(&mut store, &grads);
            steps += 1;
        }
        let loss = sum / steps.max(1) as f64;
        if epoch % 20 == 0 || epoch + 1 == optimizer.epochs {
            info!("mmr ({} missing) epoch {epoch}: loss {loss:.5}", recon.missing);
        }
        history.mmr.push(MmrEpoch { epoch, steps, loss });
    }

    let after = store.checksum(Some(&ENCODER_GROUPS));
    if after != before {
        return Err(Error::Numeric("encoder parameters changed during reconstruction training".into()));
    }
    let header = BundleHeader {
        stage: Stage::Mmr,
        encoders: h.encoders,
        geometry: h.geometry,
        alignment: h.alignment,
        recon: Some(*recon),
        optimizer: *optimizer,
        corpus_digest: dataset.digest()?,
        seed,
        encoder_checksum: after,
        pretrain_encoder_checksum: Some(h.encoder_checksum.clone()),
        config_digest: digest_json(&(&h.config_digest, recon, optimizer, seed))?,
        history,
        parameters: Vec::new(),
    };
    Ok(CheckpointBundle::new(header, store))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn content(seq: &[u32]) -> Vec<u32> {
    seq.iter().copied().filter(|&t| t != PAD && t != BEGIN).collect()
}

fn argmax_rows(scores: &Array2<f64>) -> Vec<u32> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best as u32
        })
        .collect()
}

fn image_f64(t: &Triplet) -> Array3<f64> {
    t.image.mapv(f64::from)
}

fn spectrogram_f64(t: &Triplet) -> Array2<f64> {
    t.spectrogram.mapv(f64::from)
}

/// Metric columns for one scenario, in reporting order.
pub fn metric_columns(missing: Modality) -> &'static [&'static str] {
    match missing {
        Modality::Image => &["PSNR", "SSIM", "LPIPS"],
        Modality::Text => &["METEOR-exact", "Accuracy", "FENSE"],
        Modality::Audio => &["MCD", "PSNR", "SSIM"],
    }
}

/// Scores reconstructions of the missing modality against the originals.
pub fn score_reconstructions(originals: &[&Triplet], decoded: &Decoded) -> Result<BTreeMap<String, MetricValue>> {
    let mut out = BTreeMap::new();
    let mut put = |k: &str, v: f64| {
        out.insert(k.to_string(), MetricValue::from_f64(v));
    };
    let ssim_params = crate::mmr::SsimParams::default();
    match decoded {
        Decoded::Images(imgs) => {
            check_len(originals.len(), imgs.len())?;
            let pairs: Vec<_> = originals.iter().zip(imgs).map(|(t, r)| (image_f64(t), r)).collect();
            let p = pairs.iter().map(|(o, r)| psnr(o.view(), r.view(), 1.0)).collect::<Result<Vec<_>>>()?;
            let s = pairs
                .iter()
                .map(|(o, r)| ssim_multichannel(o.view(), r.view(), &ssim_params))
                .collect::<Result<Vec<_>>>()?;
            put("PSNR", mean(p.into_iter()));
            put("SSIM", mean(s.into_iter()));
            out.insert("LPIPS".into(), MetricValue::NotApplicable);
        }
        Decoded::Spectrograms(specs) => {
            check_len(originals.len(), specs.len())?;
            let pairs: Vec<_> = originals.iter().zip(specs).map(|(t, r)| (spectrogram_f64(t), r)).collect();
            let mut m = Vec::new();
            let mut p = Vec::new();
            let mut s = Vec::new();
            for (o, r) in &pairs {
                let rc = r.mapv(|v| v.max(0.0));
                m.push(mcd(&mel_cepstra(o.view(), DEFAULT_CEPSTRA)?, &mel_cepstra(rc.view(), DEFAULT_CEPSTRA)?)?);
                p.push(psnr(o.view(), r.view(), 1.0)?);
                s.push(ssim(o.view(), r.view(), &ssim_params)?);
            }
            put("MCD", mean(m.into_iter()));
            put("PSNR", mean(p.into_iter()));
            put("SSIM", mean(s.into_iter()));
        }
        Decoded::Texts(scores) => {
            check_len(originals.len(), scores.len())?;
            let mut acc = Vec::new();
            let mut met = Vec::new();
            for (t, sc) in originals.iter().zip(scores) {
                let hyp = argmax_rows(sc);
                acc.push(token_accuracy(&t.tokens, &hyp)?);
                met.push(meteor_exact(&content(&t.tokens), &content(&hyp)));
            }
            put("METEOR-exact", mean(met.into_iter()));
            put("Accuracy", mean(acc.into_iter()));
            out.insert("FENSE".into(), MetricValue::NotApplicable);
        }
    }
    Ok(out)
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} originals against {b} reconstructions")));
    }
    Ok(())
}

/// Constant prediction for every test sample: the pixel-wise train mean for
/// images and spectrograms, the per-position majority token for text.
pub fn baseline_prediction(train: &[&Triplet], missing: Modality, count: usize) -> Result<Decoded> {
    if train.is_empty() {
        return config("baseline needs at least one training sample");
    }
    let n = train.len() as f64;
    Ok(match missing {
        Modality::Image => {
            let mut m = Array3::<f64>::zeros(train[0].image.dim());
            for t in train {
                m += &image_f64(t);
            }
            m /= n;
            Decoded::Images(vec![m; count])
        }
        Modality::Audio => {
            let mut m = Array2::<f64>::zeros(train[0].spectrogram.dim());
            for t in train {
                m += &spectrogram_f64(t);
            }
            m /= n;
            Decoded::Spectrograms(vec![m; count])
        }
        Modality::Text => {
            let len = train[0].tokens.len();
            let vocab = train.iter().flat_map(|t| t.tokens.iter()).copied().max().unwrap_or(0) as usize + 1;
            let mut counts = Array2::<f64>::zeros((len, vocab));
            for t in train {
                for (p, &tok) in t.tokens.iter().enumerate() {
                    counts[[p, tok as usize]] += 1.0;
                }
            }
            // Counts act as scores: their argmax is the majority token, ties
            // resolved to the lower id.
            Decoded::Texts(vec![counts; count])
        }
    })
}

pub fn evaluate_mmr(dataset: &Dataset, bundle: &CheckpointBundle) -> Result<MetricsReport> {
    let (store, enc, model) = bundle.restore_mmr()?;
    let missing = model.missing();
    let test = dataset.indices(Split::Test);
    let [ma, mb] = model.available();
    let ha = embed_modality(&enc, &store, dataset, &test, ma)?;
    let hb = embed_modality(&enc, &store, dataset, &test, mb)?;
    let out = model.reconstruct(&store, &ha, &hb)?;
    let decoded = model.split_output(&out);
    let originals: Vec<&Triplet> = test.iter().map(|&i| &dataset.triplets[i]).collect();
    let train: Vec<&Triplet> = dataset.indices(Split::Train).iter().map(|&i| &dataset.triplets[i]).collect();
    let baseline = baseline_prediction(&train, missing, originals.len())?;
    reconstruction_report(missing, &originals, &decoded, &baseline, bundle.header.seed, &bundle.header.config_digest)
}

/// Report with the scenario's metric columns followed by the same metrics
/// for the constant baseline.
pub fn reconstruction_report(
    missing: Modality,
    originals: &[&Triplet],
    decoded: &Decoded,
    baseline: &Decoded,
    seed: u64,
    config_digest: &str,
) -> Result<MetricsReport> {
    let main = score_reconstructions(originals, decoded)?;
    let base = score_reconstructions(originals, baseline)?;
    let mut report = MetricsReport::new(format!("missing {missing}"), seed, config_digest);
    for &c in metric_columns(missing) {
        report.insert(c, main[c]);
    }
    for &c in metric_columns(missing) {
        if base[c] != MetricValue::NotApplicable {
            report.insert(&format!("baseline {c}"), base[c]);
        }
    }
    let what = match missing {
        Modality::Text => "per-position majority token",
        _ => "pixel-wise train-split mean",
    };
    report.notes.push(format!("baseline: {what}; {} test samples", originals.len()));
    if missing == Modality::Text {
        report.notes.push("METEOR-exact counts exact unigram matches only; accuracy excludes pad positions".into());
    }
    Ok(report)
}
