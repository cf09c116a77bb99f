mod common;

use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use trimodal::alignment::{
    clip_loss, similarity_matrix, total_alignment_loss, AlignmentConfig, Pair, PairLossBreakdown,
};
use trimodal::data::{generate_dataset, AugmentKind, AugmentPolicy, CorpusConfig, PromptBank, Split, SynthConfig};
use trimodal::data::{BEGIN, PAD};
use trimodal::encoders::{EncoderSpecs, InputGeometry, TriModalEncoders};
use trimodal::metrics::{mcd, mel_cepstra, meteor_exact, psnr, recall_at_k, token_accuracy, zero_shot_classify};
use trimodal::mmr::loss::{recon_loss_audio, recon_loss_image, recon_loss_text};
use trimodal::params::ParamStore;
use trimodal::tensor::Matrix;

use common::*;

fn unit_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let n = out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        out.row_mut(r).iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn uniform_array3(seed: u64, shape: (usize, usize, usize)) -> Array3<f64> {
    let mut r = rng(seed);
    Array3::from_shape_fn(shape, |_| r.random_range(0.0..1.0))
}

fn uniform_array2(seed: u64, shape: (usize, usize)) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn(shape, |_| r.random_range(0.0..1.0))
}

fn tiny_corpus(categories: usize, per_category: usize, seed: u64) -> CorpusConfig {
    CorpusConfig {
        num_categories: categories,
        per_category,
        corpus_seed: seed,
        synth: SynthConfig { image_size: 16, mel_bins: 16, frames: 16, ..SynthConfig::default() },
        ..CorpusConfig::default()
    }
}

fn small_encoders(seed: u64) -> (ParamStore, TriModalEncoders) {
    let mut specs = EncoderSpecs::desk_default(seed);
    for s in [&mut specs.image, &mut specs.text, &mut specs.audio] {
        s.width = 8;
        s.heads = 2;
        s.mlp_ratio = 2;
        s.d_proj = 6;
        s.depth = 1;
    }
    specs.image.patch = 4;
    specs.audio.patch = 2;
    let geom = InputGeometry { image_size: 8, mel_bins: 8, frames: 8, max_tokens: 6, vocab_size: 12 };
    let mut store = ParamStore::new();
    let enc = TriModalEncoders::new(&mut store, specs, geom).unwrap();
    (store, enc)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clip_loss_is_symmetric_in_its_arguments(seed in any::<u64>(), n in 1usize..10, d in 1usize..12, tau in 0.01f64..2.0) {
        let mut r = rng(seed);
        let h1 = normal_matrix(&mut r, n, d);
        let h2 = normal_matrix(&mut r, n, d);
        prop_assert_eq!(clip_loss(&h1, &h2, tau).unwrap(), clip_loss(&h2, &h1, tau).unwrap());
    }

    #[test]
    fn clip_loss_ignores_joint_batch_order(seed in any::<u64>(), n in 1usize..10, d in 1usize..12, tau in 0.01f64..2.0) {
        let mut r = rng(seed);
        let h1 = normal_matrix(&mut r, n, d);
        let h2 = normal_matrix(&mut r, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let base = clip_loss(&h1, &h2, tau).unwrap();
        prop_assert_eq!(base, clip_loss(&h1.select_rows(&perm), &h2.select_rows(&perm), tau).unwrap());
    }

    #[test]
    fn clip_loss_is_rotation_invariant(seed in any::<u64>(), n in 1usize..8, d in 1usize..10, tau in 0.05f64..2.0) {
        let mut r = rng(seed);
        let h1 = normal_matrix(&mut r, n, d);
        let h2 = normal_matrix(&mut r, n, d);
        let q = orthogonal(&mut r, d);
        let base = clip_loss(&h1, &h2, tau).unwrap();
        let rotated = clip_loss(&h1.matmul(&q).unwrap(), &h2.matmul(&q).unwrap(), tau).unwrap();
        prop_assert!((base - rotated).abs() < 1e-9, "{base} vs {rotated}");
    }

    #[test]
    fn clip_loss_ignores_row_scale(seed in any::<u64>(), n in 1usize..8, d in 1usize..10, tau in 0.05f64..2.0) {
        let mut r = rng(seed);
        let h1 = normal_matrix(&mut r, n, d);
        let h2 = normal_matrix(&mut r, n, d);
        let mut scaled = h1.clone();
        for i in 0..n {
            let c: f64 = r.random_range(0.1..10.0);
            scaled.row_mut(i).iter_mut().for_each(|x| *x *= c);
        }
        let base = clip_loss(&h1, &h2, tau).unwrap();
        prop_assert!((base - clip_loss(&scaled, &h2, tau).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn clip_loss_is_finite_and_non_negative(seed in any::<u64>(), n in 1usize..10, d in 1usize..12, tau in 0.01f64..2.0) {
        let mut r = rng(seed);
        let l = clip_loss(&normal_matrix(&mut r, n, d), &normal_matrix(&mut r, n, d), tau).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn similarity_is_bounded_and_transposes(seed in any::<u64>(), n in 1usize..8, d in 1usize..10) {
        let mut r = rng(seed);
        let h1 = unit_rows(&normal_matrix(&mut r, n, d));
        let h2 = unit_rows(&normal_matrix(&mut r, n, d));
        let s = similarity_matrix(&h1, &h2).unwrap();
        prop_assert!(s.data().iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        prop_assert!(s.max_abs_diff(&similarity_matrix(&h2, &h1).unwrap().transpose()) < 1e-15);
    }

    #[test]
    fn total_is_the_weighted_pair_sum(
        seed in any::<u64>(),
        n in 1usize..6,
        w in prop::array::uniform3(0.0f64..2.0),
    ) {
        let mut r = rng(seed);
        let h: Vec<Matrix> = (0..3).map(|_| unit_rows(&normal_matrix(&mut r, n, 5))).collect();
        let cfg = AlignmentConfig { alpha: w[0], beta: w[1], gamma: w[2], d_proj: 5, ..AlignmentConfig::default() };
        let b = total_alignment_loss(&h[0], &h[1], &h[2], &cfg).unwrap();
        prop_assert_eq!(b.total, w[0] * b.loss_img_txt + w[1] * b.loss_txt_aud + w[2] * b.loss_aud_img);
        let rebuilt = PairLossBreakdown::from_pairs(
            [b.pair(Pair::ImgTxt), b.pair(Pair::TxtAud), b.pair(Pair::AudImg)],
            &cfg,
        );
        prop_assert_eq!(rebuilt.total, b.total);
    }

    #[test]
    fn image_loss_is_symmetric_and_zero_at_identity(seed in any::<u64>(), delta in 0.0f64..=1.0) {
        let a = uniform_array3(seed, (12, 13, 3));
        let b = uniform_array3(seed ^ 1, (12, 13, 3));
        let ab = recon_loss_image(a.view(), b.view(), delta).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - recon_loss_image(b.view(), a.view(), delta).unwrap()).abs() < 1e-12);
        prop_assert!(recon_loss_image(a.view(), a.view(), delta).unwrap().abs() < 1e-12);
    }

    #[test]
    fn audio_loss_is_symmetric_and_zero_at_identity(seed in any::<u64>(), theta in 0.0f64..=1.0) {
        let a = uniform_array2(seed, (16, 12));
        let b = uniform_array2(seed ^ 1, (16, 12));
        let ab = recon_loss_audio(a.view(), b.view(), theta).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - recon_loss_audio(b.view(), a.view(), theta).unwrap()).abs() < 1e-12);
        prop_assert!(recon_loss_audio(a.view(), a.view(), theta).unwrap().abs() < 1e-12);
    }

    #[test]
    fn text_loss_vanishes_at_large_margin_and_scales_with_eta(
        seed in any::<u64>(),
        len in 1usize..10,
        vocab in 2usize..30,
        eta in 0.1f64..3.0,
    ) {
        let mut r = rng(seed);
        let target: Vec<u32> = (0..len).map(|_| r.random_range(0..vocab as u32)).collect();
        let noise = Array2::from_shape_fn((len, vocab), |_| r.random_range(-3.0..3.0));
        let noisy = recon_loss_text(&target, noise.view(), eta).unwrap();
        prop_assert!(noisy >= 0.0);
        let once = recon_loss_text(&target, noise.view(), 1.0).unwrap();
        prop_assert!((noisy - eta * once).abs() <= 1e-12 * noisy.max(1.0));
        let mut sharp = Array2::<f64>::zeros((len, vocab));
        for (p, &t) in target.iter().enumerate() {
            sharp[[p, t as usize]] = 30.0;
        }
        prop_assert!(recon_loss_text(&target, sharp.view(), 1.0).unwrap() < 1e-6);
    }

    #[test]
    fn psnr_and_mcd_are_symmetric(seed in any::<u64>()) {
        let a = uniform_array2(seed, (16, 10));
        let b = uniform_array2(seed ^ 1, (16, 10));
        prop_assert_eq!(psnr(a.view(), b.view(), 1.0).unwrap(), psnr(b.view(), a.view(), 1.0).unwrap());
        let (ca, cb) = (mel_cepstra(a.view(), 13).unwrap(), mel_cepstra(b.view(), 13).unwrap());
        let ab = mcd(&ca, &cb).unwrap();
        prop_assert!(ab > 0.0);
        prop_assert!((ab - mcd(&cb, &ca).unwrap()).abs() < 1e-12);
        prop_assert_eq!(mcd(&ca, &ca).unwrap(), 0.0);
    }

    #[test]
    fn recall_grows_with_k_and_saturates(seed in any::<u64>(), n in 1usize..12, d in 1usize..8) {
        let mut r = rng(seed);
        let q = normal_matrix(&mut r, n, d);
        let g = normal_matrix(&mut r, n, d);
        let recalls: Vec<f64> = (1..=n).map(|k| recall_at_k(&q, &g, k).unwrap()).collect();
        prop_assert!(recalls.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(recalls[n - 1], 1.0);
    }

    #[test]
    fn meteor_of_a_reference_against_itself(seed in any::<u64>(), m in 1usize..20) {
        let mut r = rng(seed);
        let reference: Vec<u32> = (0..m).map(|_| r.random_range(2..40)).collect();
        let expected = 1.0 - 0.5 / (m as f64).powi(3);
        prop_assert!((meteor_exact(&reference, &reference) - expected).abs() < 1e-12);
        let other: Vec<u32> = (0..r.random_range(1..20)).map(|_| r.random_range(2..40)).collect();
        let s = meteor_exact(&reference, &other);
        prop_assert!((0.0..=1.0).contains(&s));
    }

    #[test]
    fn token_accuracy_is_a_percentage(seed in any::<u64>(), len in 1usize..16) {
        let mut r = rng(seed);
        let mut reference: Vec<u32> = (0..len).map(|_| r.random_range(2..20)).collect();
        reference[0] = BEGIN;
        let pads = r.random_range(0..len);
        reference[len - pads..].iter_mut().for_each(|t| *t = PAD);
        let hyp: Vec<u32> = (0..len).map(|_| r.random_range(0..20)).collect();
        let acc = token_accuracy(&reference, &hyp).unwrap();
        prop_assert!((0.0..=100.0).contains(&acc));
        prop_assert_eq!(token_accuracy(&reference, &reference).unwrap(), 100.0);
    }

    #[test]
    fn zero_shot_ignores_positive_rescaling(seed in any::<u64>(), c in 1usize..10, d in 1usize..8) {
        let mut r = rng(seed);
        let classes = normal_matrix(&mut r, c, d);
        let sample = uniform_vec(&mut r, d, -1.0, 1.0);
        let k: f64 = r.random_range(0.01..100.0);
        let mut scaled_classes = classes.clone();
        for i in 0..c {
            let ci: f64 = r.random_range(0.01..100.0);
            scaled_classes.row_mut(i).iter_mut().for_each(|x| *x *= ci);
        }
        let scaled: Vec<f64> = sample.iter().map(|x| x * k).collect();
        let a = zero_shot_classify(&sample, &classes).unwrap();
        let b = zero_shot_classify(&scaled, &scaled_classes).unwrap();
        prop_assert!(a < c);
        // Rescaling may only move the decision between classes tied to rounding.
        let sim = similarity_matrix(&unit_rows(&Matrix::from_vec(1, d, sample.clone()).unwrap()), &unit_rows(&classes)).unwrap();
        prop_assert!((sim.get(0, a) - sim.get(0, b)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn corpus_is_deterministic_closed_and_split_soundly(
        categories in 2usize..5,
        per_category in 2usize..7,
        seed in any::<u64>(),
    ) {
        let cfg = tiny_corpus(categories, per_category, seed);
        let (bank, held) = (PromptBank::training_default(), PromptBank::evaluation_default());
        let a = generate_dataset(&cfg, &bank, &held).unwrap();
        let b = generate_dataset(&cfg, &bank, &held).unwrap();
        prop_assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        prop_assert!(a == b);
        prop_assert_eq!(a.len(), categories * per_category);
        let (train, test) = (a.indices(Split::Train), a.indices(Split::Test));
        prop_assert_eq!(train.len() + test.len(), a.len());
        prop_assert!(train.iter().all(|i| !test.contains(i)));
        for c in 0..categories as u32 {
            prop_assert!(test.iter().any(|&i| a.triplets[i].category_id == c));
            prop_assert!(train.iter().any(|&i| a.triplets[i].category_id == c));
        }
        let vocab = &a.manifest.vocab;
        for t in &a.triplets {
            prop_assert!(t.image.iter().chain(t.spectrogram.iter()).all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(t.tokens.len(), cfg.synth.max_tokens);
            prop_assert_eq!(t.tokens[0], BEGIN);
            prop_assert!(t.tokens.iter().all(|&id| (id as usize) < vocab.len()));
        }
        prop_assert!(a.manifest.templates.disjoint_from(&a.manifest.held_out_templates));
    }

    #[test]
    fn augmentation_keeps_range_tokens_and_label(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let cfg = tiny_corpus(2, 2, 3);
        let data = generate_dataset(&cfg, &PromptBank::training_default(), &PromptBank::evaluation_default()).unwrap();
        let kinds = [
            AugmentKind::CropResize,
            AugmentKind::HorizontalFlip,
            AugmentKind::VerticalFlip,
            AugmentKind::WhiteNoise,
            AugmentKind::TimeShift,
            AugmentKind::TimeStretch,
            AugmentKind::FrequencyFlip,
        ];
        let policy = AugmentPolicy { probabilities: kinds.iter().map(|&k| (k, p)).collect() };
        let mut r = rng(seed);
        for t in &data.triplets {
            let out = policy.apply(t, &mut r).unwrap();
            prop_assert_eq!(out.image.dim(), t.image.dim());
            prop_assert_eq!(out.spectrogram.dim(), t.spectrogram.dim());
            prop_assert!(out.image.iter().chain(out.spectrogram.iter()).all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&out.tokens, &t.tokens);
            prop_assert_eq!(out.category_id, t.category_id);
        }
    }

    #[test]
    fn encoders_emit_deterministic_unit_rows(seed in any::<u64>(), n in 1usize..5) {
        let (store, enc) = small_encoders(seed % 1000);
        let (store2, enc2) = small_encoders(seed % 1000);
        let mut r = rng(seed);
        let images: Vec<Array3<f32>> =
            (0..n).map(|_| Array3::from_shape_fn((8, 8, 3), |_| r.random_range(0.0..1.0))).collect();
        let specs: Vec<Array2<f32>> =
            (0..n).map(|_| Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..1.0))).collect();
        let tokens: Vec<Vec<u32>> = (0..n)
            .map(|_| {
                let words = r.random_range(0..5);
                (0..6).map(|p| match p {
                    0 => BEGIN,
                    p if p <= words => r.random_range(2..12),
                    _ => PAD,
                }).collect()
            })
            .collect();
        let iv: Vec<_> = images.iter().map(|a| a.view()).collect();
        let sv: Vec<_> = specs.iter().map(|a| a.view()).collect();
        let tv: Vec<&[u32]> = tokens.iter().map(|t| t.as_slice()).collect();
        let outs = [
            enc.encode_image(&store, &iv).unwrap(),
            enc.encode_text(&store, &tv).unwrap(),
            enc.encode_audio(&store, &sv).unwrap(),
        ];
        let again = [
            enc2.encode_image(&store2, &iv).unwrap(),
            enc2.encode_text(&store2, &tv).unwrap(),
            enc2.encode_audio(&store2, &sv).unwrap(),
        ];
        for (h, h2) in outs.iter().zip(&again) {
            prop_assert_eq!(h.shape(), (n, 6));
            prop_assert!(h.is_finite());
            prop_assert!(h.row_norms().iter().all(|x| (x - 1.0).abs() < 1e-6));
            prop_assert_eq!(h, h2);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let piv: Vec<_> = perm.iter().map(|&i| iv[i]).collect();
        let permuted = enc.encode_image(&store, &piv).unwrap();
        prop_assert!(permuted.max_abs_diff(&outs[0].select_rows(&perm)) < 1e-12);
    }
}
