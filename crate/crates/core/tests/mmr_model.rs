mod common;

use trimodal::autodiff::Graph;
use trimodal::encoders::InputGeometry;
use trimodal::mmr::model::{Decoder, Targets};
use trimodal::mmr::{fuse_available, Decoded, MmrModel, ReconConfig};
use trimodal::params::{ParamId, ParamStore};
use trimodal::tensor::Matrix;
use trimodal::{Error, Modality};

use common::*;

const D_PROJ: usize = 6;

fn geometry() -> InputGeometry {
    InputGeometry { image_size: 16, mel_bins: 16, frames: 16, max_tokens: 5, vocab_size: 11 }
}

fn model(missing: Modality, seed: u64) -> (ParamStore, MmrModel) {
    let cfg = ReconConfig {
        missing,
        fusion_depth: 1,
        fusion_width: 8,
        fusion_heads: 2,
        decoder_channels: 8,
        ..ReconConfig::default()
    };
    let mut store = ParamStore::new();
    let m = MmrModel::new(&mut store, cfg, D_PROJ, geometry(), seed).unwrap();
    (store, m)
}

fn embeddings(seed: u64, n: usize) -> (Matrix, Matrix) {
    let mut r = rng(seed);
    (normal_matrix(&mut r, n, D_PROJ), normal_matrix(&mut r, n, D_PROJ))
}

fn fusion_output(store: &ParamStore, m: &MmrModel, slots: [(Modality, &Matrix); 2]) -> Result<Matrix, Error> {
    let mut g = Graph::new(store);
    let a = g.input(slots[0].1.clone());
    let b = g.input(slots[1].1.clone());
    let out = m.fusion.forward(&mut g, [(slots[0].0, a), (slots[1].0, b)])?;
    Ok(g.value(out).clone())
}

#[test]
fn single_sample_fusion_is_finite() {
    for missing in [Modality::Image, Modality::Text, Modality::Audio] {
        let (store, m) = model(missing, 1);
        let (a, b) = embeddings(2, 1);
        let f = fuse_available(&store, &m, &a, &b).unwrap();
        assert_eq!(f.shape(), (1, 8));
        assert!(f.is_finite());
    }
}

#[test]
fn fusion_does_not_depend_on_slot_order() {
    let (store, m) = model(Modality::Audio, 3);
    let (a, b) = embeddings(4, 5);
    let ab = fusion_output(&store, &m, [(Modality::Image, &a), (Modality::Text, &b)]).unwrap();
    let ba = fusion_output(&store, &m, [(Modality::Text, &b), (Modality::Image, &a)]).unwrap();
    assert!(ab.max_abs_diff(&ba) < 1e-12);
}

#[test]
fn fusion_rejects_the_missing_modality_as_input() {
    let (store, m) = model(Modality::Audio, 3);
    let (a, b) = embeddings(4, 2);
    let r = fusion_output(&store, &m, [(Modality::Audio, &a), (Modality::Text, &b)]);
    assert!(matches!(r, Err(Error::Config(_))));
    let r = fusion_output(&store, &m, [(Modality::Text, &a), (Modality::Text, &b)]);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn zero_head_gives_a_constant_fused_vector() {
    let (mut store, m) = model(Modality::Image, 5);
    *store.get_mut(m.fusion.head.weight) = Matrix::zeros(8, 8);
    let (a, b) = embeddings(6, 4);
    let f = fuse_available(&store, &m, &a, &b).unwrap();
    for i in 1..4 {
        assert_eq!(f.row(i), f.row(0));
    }
}

#[test]
fn image_and_audio_decoders_emit_unit_range_payloads() {
    for (missing, dims) in [(Modality::Image, (16, 16, 3)), (Modality::Audio, (16, 16, 1))] {
        let (store, m) = model(missing, 7);
        let (a, b) = embeddings(8, 3);
        let out = m.reconstruct(&store, &a, &b).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let decoded = m.split_output(&out);
        match decoded {
            Decoded::Images(imgs) => {
                assert_eq!(imgs.len(), 3);
                assert!(imgs.iter().all(|x| x.dim() == dims));
                assert!(imgs[0] != imgs[1]);
            }
            Decoded::Spectrograms(specs) => {
                assert_eq!(specs.len(), 3);
                assert!(specs.iter().all(|x| x.dim() == (dims.0, dims.1)));
                assert!(specs[0] != specs[1]);
            }
            Decoded::Texts(_) => panic!("text payload from a {missing} decoder"),
        }
    }
}

#[test]
fn text_decoder_scores_every_position_and_token() {
    let (store, m) = model(Modality::Text, 9);
    let (a, b) = embeddings(10, 4);
    let out = m.reconstruct(&store, &a, &b).unwrap();
    let Decoded::Texts(scores) = m.split_output(&out) else { panic!("expected text scores") };
    assert_eq!(scores.len(), 4);
    assert!(scores.iter().all(|s| s.dim() == (5, 11)));
    assert!(out.is_finite());
}

fn loss_value(store: &ParamStore, m: &MmrModel, a: &Matrix, b: &Matrix, targets: &Targets<'_>) -> f64 {
    let mut g = Graph::new(store);
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let out = m.forward(&mut g, va, vb).unwrap();
    let l = m.loss(&mut g, out, targets).unwrap();
    g.scalar(l)
}

fn check_fusion_gradient(missing: Modality, targets: &Targets<'_>, seed: u64) {
    let (store, m) = model(missing, seed);
    let (a, b) = embeddings(seed + 1, 2);
    let mut g = Graph::new(&store);
    let (va, vb) = (g.input(a.clone()), g.input(b.clone()));
    let out = m.forward(&mut g, va, vb).unwrap();
    let l = m.loss(&mut g, out, targets).unwrap();
    let grads = g.backward(l).unwrap();
    let probes: [ParamId; 2] = [m.fusion.input.weight, m.fusion.head.weight];
    for id in probes {
        let analytic = grads.get(id).expect("fusion gradient").clone();
        assert!(analytic.data().iter().any(|v| *v != 0.0));
        let x = store.get(id).data().to_vec();
        let picks: Vec<usize> = (0..x.len()).step_by((x.len() / 6).max(1)).collect();
        let f = |p: &[f64]| {
            let mut s = store.clone();
            let mut full = x.clone();
            for (&i, &v) in picks.iter().zip(p) {
                full[i] = v;
            }
            s.get_mut(id).data_mut().copy_from_slice(&full);
            loss_value(&s, &m, &a, &b, targets)
        };
        let sub: Vec<f64> = picks.iter().map(|&i| x[i]).collect();
        let an: Vec<f64> = picks.iter().map(|&i| analytic.data()[i]).collect();
        let err = max_fd_rel_error(&f, &sub, &an, 1e-5, 1e-8);
        assert!(err < 1e-4, "{missing}: relative error {err:e}");
    }
}

#[test]
fn gradients_reach_fusion_through_every_decoder() {
    let mut r = rng(11);
    let image = Matrix::from_vec(2, 3 * 16 * 16, uniform_vec(&mut r, 2 * 768, 0.0, 1.0)).unwrap();
    check_fusion_gradient(Modality::Image, &Targets::Planar(&image), 12);
    let audio = Matrix::from_vec(2, 16 * 16, uniform_vec(&mut r, 2 * 256, 0.0, 1.0)).unwrap();
    check_fusion_gradient(Modality::Audio, &Targets::Planar(&audio), 13);
    let tokens = vec![vec![1, 4, 7, 0, 0], vec![1, 9, 2, 3, 0]];
    check_fusion_gradient(Modality::Text, &Targets::Tokens(&tokens), 14);
}

#[test]
fn decoder_kind_follows_the_missing_modality() {
    assert!(matches!(model(Modality::Image, 1).1.decoder, Decoder::Image(_)));
    assert!(matches!(model(Modality::Text, 1).1.decoder, Decoder::Text(_)));
    assert!(matches!(model(Modality::Audio, 1).1.decoder, Decoder::Audio(_)));
}

#[test]
fn targets_of_the_wrong_kind_are_rejected() {
    let (store, m) = model(Modality::Audio, 2);
    let (a, b) = embeddings(3, 1);
    let mut g = Graph::new(&store);
    let (va, vb) = (g.input(a), g.input(b));
    let out = m.forward(&mut g, va, vb).unwrap();
    let tokens = vec![vec![1, 0, 0, 0, 0]];
    assert!(matches!(m.loss(&mut g, out, &Targets::Tokens(&tokens)), Err(Error::Config(_))));
}
