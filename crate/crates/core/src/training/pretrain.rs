//! Tri-modal contrastive pre-training.

use log::info;
use ndarray::{ArrayView2, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{BundleHeader, CheckpointBundle, Stage, ALIGNMENT_GROUP};
use super::config::{digest_json, PretrainConfig};
use super::history::{LossHistory, PretrainEpoch};
use crate::alignment::{total_alignment_loss_with_grad, Pair, PairLossBreakdown, LOG_TAU_MAX, LOG_TAU_MIN};
use crate::autodiff::{Graph, Var};
use crate::data::synth::mix;
use crate::data::{Dataset, Split, Triplet};
use crate::encoders::{InputGeometry, TriModalEncoders};
use crate::error::{config, Result};
use crate::modality::Modality;
use crate::optim::AdamW;
use crate::params::ParamStore;
use crate::tensor::Matrix;

/// Modalities that appear in at least one pair with a non-zero weight.
pub fn active_modalities(cfg: &PretrainConfig) -> [bool; 3] {
    let mut on = [false; 3];
    for p in Pair::ALL {
        if cfg.alignment.weight(p) > 0.0 {
            let (a, b) = p.modalities();
            on[a.index()] = true;
            on[b.index()] = true;
        }
    }
    on
}

fn validate(dataset: &Dataset, cfg: &PretrainConfig) -> Result<InputGeometry> {
    cfg.alignment.validate()?;
    cfg.optimizer.validate()?;
    let geometry = InputGeometry::new(&dataset.manifest.corpus.synth, dataset.manifest.vocab.len());
    cfg.encoders.validate(&geometry)?;
    if cfg.alignment.d_proj != cfg.encoders.d_proj() {
        return config(format!(
            "alignment d_proj {} differs from the encoders' {}",
            cfg.alignment.d_proj,
            cfg.encoders.d_proj()
        ));
    }
    let train = dataset.indices(Split::Train).len();
    if cfg.optimizer.batch_size > train {
        return config(format!("batch size {} exceeds the {train}-sample train split", cfg.optimizer.batch_size));
    }
    if cfg.optimizer.batch_size < 2 {
        return config("contrastive batches need at least 2 samples");
    }
    Ok(geometry)
}

/// One forward/backward pass over a batch; returns the per-pair breakdown.
fn batch_step(
    store: &ParamStore,
    enc: &TriModalEncoders,
    cfg: &PretrainConfig,
    active: [bool; 3],
    batch: &[Triplet],
) -> Result<(PairLossBreakdown, crate::autodiff::Gradients)> {
    let mut g = Graph::new(store);
    let n = batch.len();
    let d = enc.d_proj();
    let mut vars: [Option<Var>; 3] = [None; 3];
    if active[Modality::Image.index()] {
        let views: Vec<ArrayView3<'_, f32>> = batch.iter().map(|t| t.image.view()).collect();
        vars[0] = Some(enc.image_graph(&mut g, &views)?);
    }
    if active[Modality::Text.index()] {
        let toks: Vec<&[u32]> = batch.iter().map(|t| t.tokens.as_slice()).collect();
        vars[1] = Some(enc.text_graph(&mut g, &toks)?);
    }
    if active[Modality::Audio.index()] {
        let views: Vec<ArrayView2<'_, f32>> = batch.iter().map(|t| t.spectrogram.view()).collect();
        vars[2] = Some(enc.audio_graph(&mut g, &views)?);
    }
    let value = |v: Option<Var>| v.map_or_else(|| Matrix::zeros(n, d), |v| g.value(v).clone());
    let (hi, ht, ha) = (value(vars[0]), value(vars[1]), value(vars[2]));

    let log_tau = store.id(&format!("{ALIGNMENT_GROUP}.log_tau"));
    let mut align = cfg.alignment;
    if let Some(id) = log_tau {
        align.tau = store.get(id).data()[0].exp();
    }
    let grad = total_alignment_loss_with_grad(&hi, &ht, &ha, &align)?;
    let mut inputs = Vec::new();
    let mut grads = Vec::new();
    for (v, dg) in vars.iter().zip(grad.d_embeddings) {
        if let Some(v) = v {
            inputs.push(*v);
            grads.push(dg);
        }
    }
    if let Some(id) = log_tau {
        inputs.push(g.param(id));
        let d_log_tau = align.tau * grad.d_tau.iter().sum::<f64>();
        grads.push(Matrix::scalar(d_log_tau));
    }
    let root = g.loss(grad.breakdown.total, &inputs, grads)?;
    Ok((grad.breakdown, g.backward(root)?))
}

/// Trains all active encoders on the train split. Single-threaded and a
/// pure function of `(dataset, cfg)`.
pub fn pretrain(dataset: &Dataset, cfg: &PretrainConfig) -> Result<CheckpointBundle> {
    let geometry = validate(dataset, cfg)?;
    let mut store = ParamStore::new();
    let enc = TriModalEncoders::new(&mut store, cfg.encoders, geometry)?;
    if cfg.alignment.tau_learnable {
        store.insert(
            ALIGNMENT_GROUP,
            "log_tau",
            Matrix::scalar(cfg.alignment.tau.ln().clamp(LOG_TAU_MIN, LOG_TAU_MAX)),
        )?;
    }
    let active = active_modalities(cfg);
    let mut groups: Vec<&str> =
        Modality::ALL.iter().filter(|m| active[m.index()]).map(|&m| crate::encoders::encoder_group(m)).collect();
    groups.push(ALIGNMENT_GROUP);
    let trainable: Vec<_> = store.ids_in_groups(&groups).collect();
    let mut opt = AdamW::new(&store, trainable, cfg.optimizer);
    let log_tau = store.id(&format!("{ALIGNMENT_GROUP}.log_tau"));

    let train = dataset.indices(Split::Train);
    let mut history = LossHistory::default();
    for epoch in 0..cfg.optimizer.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, 0x7a11, epoch as u64]));
        let mut order = train.clone();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for chunk in order.chunks(cfg.optimizer.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch =
                chunk.iter().map(|&i| cfg.augment.apply(&dataset.triplets[i], &mut rng)).collect::<Result<Vec<_>>>()?;
            let (b, grads) = batch_step(&store, &enc, cfg, active, &batch)?;
            opt.step(&mut store, &grads);
            if let Some(id) = log_tau {
                let v = &mut store.get_mut(id).data_mut()[0];
                *v = v.clamp(LOG_TAU_MIN, LOG_TAU_MAX);
            }
            for (s, v) in sums.iter_mut().zip([b.loss_img_txt, b.loss_txt_aud, b.loss_aud_img]) {
                *s += v;
            }
            steps += 1;
        }
        let mean = sums.map(|s| s / steps.max(1) as f64);
        let losses = PairLossBreakdown::from_pairs(mean, &cfg.alignment);
        let w = cfg.alignment.weights();
        let tau = log_tau.map_or(cfg.alignment.tau, |id| store.get(id).data()[0].exp());
        info!(
            "pretrain epoch {epoch}: total {:.5} (img-txt {:.5}, txt-aud {:.5}, aud-img {:.5})",
            losses.total, losses.loss_img_txt, losses.loss_txt_aud, losses.loss_aud_img
        );
        history.pretrain.push(PretrainEpoch {
            epoch,
            steps,
            losses,
            weighted: [w[0] * mean[0], w[1] * mean[1], w[2] * mean[2]],
            tau,
        });
    }

    let header = BundleHeader {
        stage: Stage::Pretrain,
        encoders: cfg.encoders,
        geometry,
        alignment: cfg.alignment,
        recon: None,
        optimizer: cfg.optimizer,
        corpus_digest: dataset.digest()?,
        seed: cfg.seed,
        encoder_checksum: store.checksum(Some(&crate::encoders::ENCODER_GROUPS)),
        pretrain_encoder_checksum: None,
        config_digest: digest_json(cfg)?,
        history,
        parameters: Vec::new(),
    };
    Ok(CheckpointBundle::new(header, store))
}
