use proptest::prelude::*;
use specfield::dataset::{gen_synthetic, AnalyticScene, Dataset, GenConfig, Split};
use specfield::field::{EncodingConfig, FieldConfig};
use specfield::fusion::{fit_weights_least_squares, linear_fuse, LinearFusionWeights, WeightMode};
use specfield::nn::checkpoint;
use specfield::render::RenderConfig;
use specfield::spectral_color::compose_rgb;
use specfield::train::{FieldTrainConfig, FieldTrainer, RayTable};
use specfield::SpectrumMapStack;

fn tiny_dataset(dir: &std::path::Path, s_num: usize) -> Dataset {
    let cfg = GenConfig {
        s_num,
        width: 16,
        height: 16,
        n_views: 8,
        n_test: 2,
        oracle_samples: 256,
        ..GenConfig::default()
    };
    gen_synthetic(&cfg, dir).unwrap()
}

fn small_config(s_num: usize) -> FieldTrainConfig {
    FieldTrainConfig {
        field: FieldConfig {
            encoding: EncodingConfig { num_freqs_position: 4, num_freqs_direction: 2, include_identity: true },
            depth: 2,
            width: 24,
            skip_layer: 0,
            bottleneck_width: 12,
            s_num,
        },
        render: RenderConfig { n_coarse: 16, n_fine: 16, perturb_sigma_std: 0.0, ..Default::default() },
        lr: 3e-3,
        batch_rays: 64,
        iterations: 300,
        ..Default::default()
    }
}

#[test]
fn training_lowers_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 3);
    let table = RayTable::from_dataset(&ds, Split::Train).unwrap();
    let mut t = FieldTrainer::new(small_config(3), table).unwrap();
    let mut losses = Vec::new();
    t.run(300, |_, s| {
        losses.push(s.loss);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "loss {head:.3e} -> {tail:.3e}");
    let e = t.evaluate(&ds, &ds.split(Split::Test)).unwrap();
    assert_eq!(e.band_psnr.len(), 3);
    assert!(e.rgb_psnr.is_finite() && e.mean_band_psnr > 15.0, "{e:?}");
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(dir.path(), 3);
    let cfg = FieldTrainConfig { iterations: 20, ..small_config(3) };
    let table = RayTable::from_dataset(&ds, Split::Train).unwrap();

    let mut full = FieldTrainer::new(cfg.clone(), table.clone()).unwrap();
    full.run(20, |_, _| Ok(())).unwrap();

    let mut part = FieldTrainer::new(cfg.clone(), table.clone()).unwrap();
    part.run(8, |_, _| Ok(())).unwrap();
    let path = dir.path().join("mid.spnf");
    part.save(&path).unwrap();
    let mut resumed = FieldTrainer::resume(cfg, table, &checkpoint::read(&path).unwrap()).unwrap();
    resumed.run(20, |_, _| Ok(())).unwrap();
    assert_eq!(resumed.step, 20);

    assert_eq!(checkpoint::encode(&full.records()), checkpoint::encode(&resumed.records()));
}

#[test]
fn fitted_weights_reproduce_illuminant_at_fusion_targets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        s_num: 6,
        illuminant_at_fusion: true,
        width: 12,
        height: 12,
        n_views: 3,
        n_test: 1,
        oracle_samples: 256,
        scene: AnalyticScene::palette(8),
        ..GenConfig::default()
    };
    let ds = gen_synthetic(&cfg, dir.path()).unwrap();
    let stacks: Vec<_> = (0..ds.len()).map(|i| ds.load_stack(i).unwrap()).collect();
    let rgbs: Vec<_> = (0..ds.len()).map(|i| ds.load_rgb(i).unwrap()).collect();
    let fit = fit_weights_least_squares(&stacks, &rgbs, WeightMode::Shared).unwrap();
    for (w, truth) in fit.band_weights().iter().zip(&ds.manifest.fusion_weights) {
        assert!((w - ds.kappa() * truth).abs() < 1e-4 * ds.kappa(), "{w} vs {truth}");
    }
    let again = linear_fuse(&stacks[0], &fit, 1.0).unwrap();
    for (a, b) in again.data.iter().zip(&rgbs[0].data) {
        assert!((a - b).abs() < 1e-5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composition_is_linear(
        a in prop::collection::vec(0.0f64..1.0, 2 * 3 * 4 * 3),
        b in prop::collection::vec(0.0f64..1.0, 2 * 3 * 4 * 3),
        kappa in 0.1f64..3.0,
    ) {
        let sa = SpectrumMapStack::from_data(2, 3, 4, a.clone()).unwrap();
        let sb = SpectrumMapStack::from_data(2, 3, 4, b.clone()).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ss = SpectrumMapStack::from_data(2, 3, 4, sum).unwrap();
        let (ra, rb, rs) = (
            compose_rgb(&sa, kappa).unwrap(),
            compose_rgb(&sb, kappa).unwrap(),
            compose_rgb(&ss, kappa).unwrap(),
        );
        for i in 0..rs.data.len() {
            prop_assert!((rs.data[i] - ra.data[i] - rb.data[i]).abs() < 1e-12);
        }
        let unit = linear_fuse(&ss, &LinearFusionWeights::ones(4), kappa).unwrap();
        prop_assert_eq!(unit, rs);
    }
}
