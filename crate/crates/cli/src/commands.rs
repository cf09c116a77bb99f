//! Subcommand bodies. Each returns after writing its outputs atomically.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;
use trimodal::data::{generate_dataset, AugmentPolicy, Dataset, PromptBank, Split};
use trimodal::metrics::{render_rows, MetricsReport};
use trimodal::training::config::write_atomic;
use trimodal::training::{
    default_grid, evaluate_mmr, evaluate_retrieval, evaluate_zero_shot, pretrain as run_pretrain, run_ablation,
    train_mmr, CheckpointBundle, RunConfig, Stage,
};
use trimodal::Modality;

use crate::{AblateArgs, Common, EvalArgs, EvalMode, MmrArgs, PretrainArgs, SynthArgs};

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let cfg = match &common.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    let data = common.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    Ok((cfg, data))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn check_corpus(bundle: &CheckpointBundle, dataset: &Dataset) -> Result<()> {
    if bundle.header.corpus_digest != dataset.digest()? {
        bail!("checkpoint was trained on a different corpus than the one in the data directory");
    }
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn write_outputs(prefix: &Path, json: &str, text: &str) -> Result<()> {
    let (j, t) = (with_suffix(prefix, ".json"), with_suffix(prefix, ".txt"));
    write_atomic(&j, format!("{json}\n").as_bytes())?;
    write_atomic(&t, text.as_bytes())?;
    println!("wrote {} and {}", j.display(), t.display());
    Ok(())
}

fn is_non_empty_dir(p: &Path) -> Result<bool> {
    if !p.exists() {
        return Ok(false);
    }
    if !p.is_dir() {
        bail!("{} exists and is not a directory", p.display());
    }
    Ok(fs::read_dir(p)?.next().is_some())
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let (mut cfg, data) = load_config(&a.common)?;
    if let Some(c) = a.categories {
        cfg.data.num_categories = c;
    }
    if let Some(n) = a.per_category {
        cfg.data.per_category = n;
    }
    if let Some(s) = a.seed {
        cfg.data.corpus_seed = s;
    }
    if let Some(j) = a.jitter {
        cfg.data.synth.jitter = j;
    }
    cfg.data.validate()?;
    let out = a.out.unwrap_or(data);
    if is_non_empty_dir(&out)? && !a.force {
        bail!("refusing to overwrite non-empty {} (pass --force)", out.display());
    }
    let ds = generate_dataset(&cfg.data, &PromptBank::training_default(), &PromptBank::evaluation_default())?;
    ds.write(&out)?;
    let rows = vec![
        vec!["field".to_string(), "value".to_string()],
        vec!["directory".into(), out.display().to_string()],
        vec!["samples".into(), ds.len().to_string()],
        vec!["categories".into(), ds.num_categories().to_string()],
        vec!["train".into(), ds.indices(Split::Train).len().to_string()],
        vec!["test".into(), ds.indices(Split::Test).len().to_string()],
        vec!["vocabulary".into(), ds.manifest.vocab.len().to_string()],
        vec!["templates".into(), ds.manifest.templates.len().to_string()],
        vec!["held-out templates".into(), ds.manifest.held_out_templates.len().to_string()],
        vec!["corpus seed".into(), cfg.data.corpus_seed.to_string()],
        vec!["manifest digest".into(), ds.digest()?],
        vec!["config digest".into(), cfg.digest()?],
    ];
    print!("{}", render_rows(&rows));
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let (mut cfg, data) = load_config(&a.common)?;
    let al = &mut cfg.alignment;
    if let Some(v) = a.alpha {
        al.alpha = v;
    }
    if let Some(v) = a.beta {
        al.beta = v;
    }
    if let Some(v) = a.gamma {
        al.gamma = v;
    }
    if let Some(v) = a.tau {
        al.tau = v;
    }
    if a.learnable_tau {
        al.tau_learnable = true;
    }
    if !a.pairs.is_empty() {
        *al = al.restricted_to(&a.pairs);
    }
    if let Some(s) = a.seed {
        cfg.seeds.pretrain = s;
    }
    let opt = &mut cfg.pretrain_optimizer;
    if let Some(e) = a.epochs {
        opt.epochs = e;
    }
    if let Some(lr) = a.lr {
        opt.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        opt.batch_size = b;
    }
    if a.no_augment {
        cfg.augment = AugmentPolicy::none();
    }
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.join("pretrain.ckpt"));
    let ds = load_dataset(&data)?;
    let bundle = run_pretrain(&ds, &cfg.pretrain_config())?;
    bundle.save(&out)?;
    let history = with_suffix(&out.with_extension(""), ".history.json");
    let h = &bundle.header;
    write_atomic(&history, serde_json::to_string_pretty(&h.history)?.as_bytes())?;

    let al = h.alignment;
    println!("alpha {} beta {} gamma {} tau {} (learnable: {})", al.alpha, al.beta, al.gamma, al.tau, al.tau_learnable);
    let mut rows = vec![["epoch", "total", "img-txt", "txt-aud", "aud-img", "tau"].map(String::from).to_vec()];
    for e in &h.history.pretrain {
        rows.push(vec![
            e.epoch.to_string(),
            format!("{:.5}", e.losses.total),
            format!("{:.5}", e.losses.loss_img_txt),
            format!("{:.5}", e.losses.loss_txt_aud),
            format!("{:.5}", e.losses.loss_aud_img),
            format!("{:.4}", e.tau),
        ]);
    }
    print!("{}", render_rows(&rows));
    println!("encoder checksum: {}", h.encoder_checksum);
    println!("config digest: {}", h.config_digest);
    println!("wrote {} and {}", out.display(), history.display());
    Ok(())
}

pub fn mmr(a: MmrArgs) -> Result<()> {
    let (mut cfg, data) = load_config(&a.common)?;
    let missing = Modality::from(a.missing);
    cfg.recon.missing = missing;
    if let Some(v) = a.delta {
        cfg.recon.delta = v;
    }
    if let Some(v) = a.eta {
        cfg.recon.eta = v;
    }
    if let Some(v) = a.theta {
        cfg.recon.theta = v;
    }
    if let Some(s) = a.seed {
        cfg.seeds.mmr = s;
    }
    if let Some(e) = a.epochs {
        cfg.mmr_optimizer.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.mmr_optimizer.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.mmr_optimizer.batch_size = b;
    }
    let pre_path = a.pretrained.unwrap_or_else(|| cfg.paths.out_dir.join("pretrain.ckpt"));
    let out = a.out.unwrap_or_else(|| cfg.paths.out_dir.join(format!("mmr-{missing}.ckpt")));
    let pre = CheckpointBundle::load(&pre_path)?;
    pre.require_stage(Stage::Pretrain)?;
    let ds = load_dataset(&data)?;
    check_corpus(&pre, &ds)?;
    let bundle = train_mmr(&ds, &pre, &cfg.recon, &cfg.mmr_optimizer, cfg.seeds.mmr)?;
    bundle.save(&out)?;
    let history = with_suffix(&out.with_extension(""), ".history.json");
    let h = &bundle.header;
    write_atomic(&history, serde_json::to_string_pretty(&h.history.mmr)?.as_bytes())?;

    let r = h.recon.expect("reconstruction bundle carries its config");
    println!("missing {missing}: delta {} eta {} theta {}", r.delta, r.eta, r.theta);
    let losses = h.history.mmr_losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("loss: epoch 0 {first:.5}, epoch {} {last:.5}", losses.len() - 1);
    }
    println!("encoder checksum: {} (unchanged)", h.encoder_checksum);
    println!("config digest: {}", h.config_digest);
    println!("wrote {} and {}", out.display(), history.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, data) = load_config(&a.common)?;
    let bundle = CheckpointBundle::load(&a.checkpoint)?;
    let ds = load_dataset(&data)?;
    check_corpus(&bundle, &ds)?;
    let (report, name): (MetricsReport, String) = match a.mode {
        EvalMode::Mmr => {
            bundle.require_stage(Stage::Mmr)?;
            let r = evaluate_mmr(&ds, &bundle)?;
            let m = bundle.header.recon.map_or(Modality::Audio, |r| r.missing);
            (r, format!("eval-mmr-{m}"))
        }
        EvalMode::ZeroShot => {
            let target = Modality::from(a.target);
            let ks = if a.k.is_empty() { vec![1, 5] } else { a.k.clone() };
            let r = evaluate_zero_shot(&ds, &bundle, &ds.manifest.held_out_templates, target, &ks)?;
            (r, format!("eval-zero-shot-{target}"))
        }
        EvalMode::Retrieval => {
            bundle.require_stage(Stage::Pretrain)?;
            let ks = if a.k.is_empty() { vec![1, 5, 10] } else { a.k.clone() };
            (evaluate_retrieval(&ds, &bundle, &ks)?, "eval-retrieval".to_string())
        }
    };
    let text = report.render_table();
    print!("{text}");
    let prefix = a.out.unwrap_or_else(|| cfg.paths.out_dir.join(name));
    write_outputs(&prefix, &report.to_json()?, &text)
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let (mut cfg, data) = load_config(&a.common)?;
    if !a.seeds.is_empty() {
        cfg.seeds.eval = a.seeds.clone();
    }
    if let Some(e) = a.epochs {
        cfg.pretrain_optimizer.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.pretrain_optimizer.batch_size = b;
    }
    let ds = load_dataset(&data)?;
    let grid = default_grid();
    let table = run_ablation(&ds, &cfg.pretrain_config(), &grid, &cfg.seeds.eval, a.k)?;
    let digest = trimodal::training::config::digest_json(&(&cfg, a.k))?;
    let text = format!("{}config digest: {digest}\n", table.render());
    print!("{text}");
    let json = serde_json::to_string_pretty(&json!({ "config_digest": digest, "table": table }))?;
    let prefix = a.out.unwrap_or_else(|| cfg.paths.out_dir.join("ablation"));
    write_outputs(&prefix, &json, &text)
}
