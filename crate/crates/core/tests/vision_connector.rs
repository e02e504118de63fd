use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secr::connector::{DeepLens, DeepLensConfig};
use secr::params::{normal, Bind, ParamStore};
use secr::vision::{canonical_taps, default_tap_fractions, patchify, select_taps, VisionConfig, VisionFeatureSet};
use secr::{Model, Model64, ModelBundle, ModelConfig, Tape, Tensor};

fn model64(seed: u64) -> Model64 {
    ModelBundle::new(&ModelConfig::default(), seed).unwrap()
}

fn random_image(seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..=1.0)).collect()
}

#[test]
fn patchify_shapes_and_locality() {
    let cfg = VisionConfig::default();
    let p = patchify::<f64>(&vec![0.25; 32 * 32 * 3], &cfg).unwrap();
    assert_eq!(p.shape(), &[64, 48]);
    for r in 1..64 {
        assert_eq!(p.row(r), p.row(0));
    }
    let mut img = vec![0.0f32; 32 * 32 * 3];
    img[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
    let p = patchify::<f64>(&img, &cfg).unwrap();
    assert_eq!(&p.row(0)[..3], &[1.0, 1.0, 1.0]);
    assert!(p.row(0)[3..].iter().all(|&v| v == 0.0));
    assert!((1..64).all(|r| p.row(r).iter().all(|&v| v == 0.0)));
    assert!(patchify::<f32>(&img[1..], &cfg).is_err());
    img[5] = 1.5;
    assert!(patchify::<f32>(&img, &cfg).is_err());
}

#[test]
fn patch_layout_is_raster_and_channel_last() {
    let cfg = VisionConfig::default();
    let img: Vec<f32> = (0..32 * 32 * 3).map(|i| i as f32 / (32.0 * 32.0 * 3.0)).collect();
    let p = patchify::<f64>(&img, &cfg).unwrap();
    // Patch (py, px) = (1, 2), inner pixel (dy, dx) = (3, 1), channel 2.
    let (py, px, dy, dx, c) = (1, 2, 3, 1, 2);
    let y = py * 4 + dy;
    let x = px * 4 + dx;
    let want = img[(y * 32 + x) * 3 + c] as f64;
    assert_eq!(p.row(py * 8 + px)[(dy * 4 + dx) * 3 + c], want);
}

#[test]
fn tap_selection() {
    let f = default_tap_fractions();
    assert_eq!(select_taps(24, &f).unwrap(), vec![13, 18, 23]);
    assert_eq!(select_taps(8, &f).unwrap(), vec![5, 6, 8]);
    assert_eq!(select_taps(8, &[Ratio::new(1, 1)]).unwrap(), vec![8]);
    assert!(select_taps(8, &[]).is_err());
    assert!(select_taps(8, &[Ratio::new(0, 3)]).is_err());
    assert!(select_taps(8, &[Ratio::new(4, 3)]).is_err());
    assert_eq!(canonical_taps(&[8, 5, 6, 5], 8).unwrap(), vec![5, 6, 8]);
    assert!(canonical_taps(&[9], 8).is_err());
    assert!(canonical_taps(&[0], 8).is_err());
}

#[test]
fn encoder_returns_every_block_and_is_deterministic() {
    let m = model64(1);
    let img = random_image(1);
    let a = m.encode(&img, 7).unwrap();
    let b = m.encode(&img, 7).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layers(), 8);
    assert_eq!(a.image_id, 7);
    for (i, t) in a.iter() {
        assert!((1..=8).contains(&i));
        assert_eq!(t.shape(), &[64, 64]);
    }
}

#[test]
fn last_block_output_is_the_last_block_applied_to_the_previous_one() {
    let m = model64(2);
    let f = m.encode(&random_image(2), 0).unwrap();
    let last = m.vision.blocks.last().unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(f.block(7).clone()).unwrap();
    let out = last.forward(&mut tape, &Bind::frozen(&m.store), x).unwrap().out;
    assert!(tape.value(out).max_abs_diff(f.block(8)) < 1e-12);

    // The whole stack through the taped path gives the same block outputs.
    let patches = patchify::<f64>(&random_image(2), &m.cfg.vision).unwrap();
    let mut tape = Tape::new();
    let outs = m.vision.forward(&mut tape, &Bind::frozen(&m.store), &patches).unwrap();
    for (i, v) in outs.iter().enumerate() {
        assert!(tape.value(*v).max_abs_diff(f.block(i + 1)) < 1e-12);
    }
}

#[test]
fn mlp_connector_shapes_and_bias_path() {
    let m = model64(3);
    let zero = Tensor::zeros(vec![64, 64]);
    let out = m.mlp.infer(&m.store, &zero).unwrap();
    assert_eq!(out.shape(), &[64, 128]);
    for r in 1..64 {
        assert_eq!(out.row(r), out.row(0));
    }
    assert!(m.mlp.infer(&m.store, &Tensor::zeros(vec![64, 65])).is_err());
    assert_eq!(m.mlp.layers.len(), 4);
}

#[test]
fn deeplens_output_shape_is_independent_of_caption_length() {
    let m = model64(4);
    let f = m.encode(&random_image(4), 0).unwrap();
    for t in [0, 1, 12, 20] {
        let caption: Vec<usize> = (0..t).map(|i| 5 + i % 15).collect();
        assert_eq!(m.deeplens_prefix(&f, &caption).unwrap().shape(), &[64, 128]);
    }
    let long = vec![5; 21];
    assert!(matches!(m.deeplens_prefix(&f, &long), Err(secr::Error::CaptionTooLong { len: 21, max: 20 })));
}

fn single_tap_deeplens(seed: u64) -> (DeepLens, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DeepLensConfig { tap_fractions: vec![[1, 1]], ..DeepLensConfig::default() };
    let taps = cfg.taps(8).unwrap();
    assert_eq!(taps, vec![8]);
    let dl = DeepLens::new(&mut store, &taps, 8, 64, 64, 128, 4, &cfg, &mut rng).unwrap();
    (dl, store)
}

#[test]
fn single_tap_deeplens_ignores_earlier_blocks() {
    let (dl, store) = single_tap_deeplens(5);
    let m = model64(5);
    let f = m.encode(&random_image(5), 0).unwrap();
    let a = dl.infer(&store, &f, &[], 128).unwrap();
    let mut g = f.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for i in 1..8 {
        *g.block_mut(i) = normal(vec![64, 64], 3.0, &mut rng);
    }
    assert_eq!(dl.infer(&store, &g, &[], 128).unwrap(), a);
    *g.block_mut(8) = normal(vec![64, 64], 1.0, &mut rng);
    assert_ne!(dl.infer(&store, &g, &[], 128).unwrap(), a);
}

#[test]
fn caption_embeddings_reach_the_visual_rows() {
    let m = model64(6);
    let f = m.encode(&random_image(6), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut emb = normal::<f64>(vec![5, 128], 1.0, &mut rng).into_data();
    let a = m.deeplens.infer(&m.store, &f, &emb, 128).unwrap();
    emb[2 * 128 + 7] += 0.5;
    let b = m.deeplens.infer(&m.store, &f, &emb, 128).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn tap_order_is_canonical() {
    let cfg = ModelConfig::default();
    let mut permuted = cfg.clone();
    permuted.deeplens.tap_fractions.reverse();
    let a: Model = ModelBundle::new(&cfg, 8).unwrap();
    let b: Model = ModelBundle::new(&permuted, 8).unwrap();
    assert_eq!(a.deeplens.taps, b.deeplens.taps);
    let f = a.encode(&random_image(8), 0).unwrap();
    let caption = [5, 6, 7];
    assert_eq!(a.deeplens_prefix(&f, &caption).unwrap(), b.deeplens_prefix(&f, &caption).unwrap());

    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dl = DeepLens::new(&mut store, &[8, 5, 6], 8, 64, 64, 128, 4, &DeepLensConfig::default(), &mut rng).unwrap();
    assert_eq!(dl.taps, vec![5, 6, 8]);
}

#[test]
fn taped_and_inference_connectors_agree() {
    let m = model64(9);
    let f: VisionFeatureSet<f64> = m.encode(&random_image(9), 0).unwrap();
    let caption = [5, 9, 11, 14];
    let mut tape = Tape::new();
    let bind = Bind::frozen(&m.store);
    let emb = m.lm.embed_var(&mut tape, &bind, &caption).unwrap();
    let out = m.deeplens.forward_features(&mut tape, &bind, &f, Some(emb)).unwrap();
    assert!(tape.value(out).max_abs_diff(&m.deeplens_prefix(&f, &caption).unwrap()) < 1e-12);
    let x = tape.constant(f.last().clone()).unwrap();
    let out = m.mlp.forward(&mut tape, &bind, x).unwrap();
    assert!(tape.value(out).max_abs_diff(&m.mlp_prefix(&f).unwrap()) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn taps_are_sorted_unique_and_in_range(layers in 1usize..64, fr in prop::collection::vec((1u32..24, 1u32..24), 1..5)) {
        let fractions: Vec<Ratio<u32>> = fr.iter().map(|&(a, b)| Ratio::new(a.min(b), a.max(b))).collect();
        let taps = select_taps(layers, &fractions).unwrap();
        prop_assert!(taps.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(taps.iter().all(|&t| (1..=layers).contains(&t)));
        for f in &fractions {
            let want = (layers as f64 * *f.numer() as f64 / *f.denom() as f64 - 1e-9).ceil() as usize;
            prop_assert!(taps.contains(&want));
        }
    }

    #[test]
    fn patchify_roundtrips_every_pixel(seed in any::<u64>()) {
        let img = random_image(seed);
        let p = patchify::<f32>(&img, &VisionConfig::default()).unwrap();
        let mut back = vec![0.0f32; img.len()];
        for (r, row) in (0..64).map(|r| (r, p.row(r))) {
            for (j, &v) in row.iter().enumerate() {
                let (pix, c) = (j / 3, j % 3);
                let y = (r / 8) * 4 + pix / 4;
                let x = (r % 8) * 4 + pix % 4;
                back[(y * 32 + x) * 3 + c] = v;
            }
        }
        prop_assert_eq!(back, img);
    }
}
