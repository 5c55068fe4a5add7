//! Acceptance criteria AC-1 .. AC-10, one PASS/FAIL line each.
//!
//! Run a subset with `cargo test --test acceptance -- AC-4 AC-9`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specfield::dataset::{gen_synthetic, sfm_read, Dataset, GenConfig, SfmMap, Split};
use specfield::field::{EncodingConfig, FieldConfig, SpectralField};
use specfield::fusion::{
    fit_weights_least_squares, pearson, saunet_forward, SaPlacement, SaUnet, SaUnetConfig, WeightMode,
};
use specfield::metrics::{
    l1_image, psnr_image, ssim, weights_from_psnr, write_metrics_csv, L1Scale, LossConfig, MetricsRow,
    PSNR_CLAMP_DB,
};
use specfield::nn::checkpoint;
use specfield::render::{normalize, quadrature, stratified_samples_seeded, Ray, RenderConfig};
use specfield::spectral_color::{
    band_coefficients, compose_rgb, kappa_for_illuminant, rgb_from_xyz, xyz_from_spd,
};
use specfield::train::{fusion_step, FieldTrainConfig, FieldTrainer, RayTable};
use specfield::{BandPartition, CmfTable, RgbImage, Spd, SpectrumMapStack};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("{what} took {:.1} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

/// Datasets shared between criteria.
struct Context {
    dir: tempfile::TempDir,
    desk: Option<Dataset>,
}

impl Context {
    fn desk_dataset(&mut self) -> Result<&Dataset, String> {
        if self.desk.is_none() {
            let cfg = GenConfig { s_num: 4, ..GenConfig::default() };
            let ds = gen_synthetic(&cfg, self.dir.path().join("desk")).map_err(err)?;
            self.desk = Some(ds);
        }
        Ok(self.desk.as_ref().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn random_spd(rng: &mut ChaCha8Rng) -> Spd {
    let w: Vec<f64> = (0..=80).map(|i| 380.0 + 5.0 * i as f64).collect();
    let p = w.iter().map(|_| rng.gen_range(0.0..2.0)).collect();
    Spd::new(w, p).unwrap()
}

fn ac1(_: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let table = CmfTable::cie1931();
    let partition = BandPartition::uniform(11, 380.0, 780.0).map_err(err)?;
    let kappa = kappa_for_illuminant(&table, &Spd::d65(), &partition).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spds: Vec<Spd> = (0..1000).map(|_| random_spd(&mut rng)).collect();

    let mut stack = SpectrumMapStack::zeros(1000, 1, 11);
    for (p, spd) in spds.iter().enumerate() {
        let coef = band_coefficients(&table, spd, &partition).map_err(err)?;
        for (k, c) in coef.0.iter().enumerate() {
            for ch in 0..3 {
                stack.set(p, 0, k, ch, c[ch]);
            }
        }
    }
    let composed = compose_rgb(&stack, kappa).map_err(err)?;
    let mut worst: f64 = 0.0;
    for (p, spd) in spds.iter().enumerate() {
        let direct = rgb_from_xyz(xyz_from_spd(&table, spd, &partition, kappa).map_err(err)?);
        for ch in 0..3 {
            let a = composed.data[p * 3 + ch];
            let b = direct.0[ch];
            worst = worst.max((a - b).abs() / b.abs().max(1e-12));
        }
    }
    let dt = t0.elapsed();
    ensure(worst < 1e-6, || format!("max rel err {worst:.3e} >= 1e-6"))?;
    within(dt, 1.0, "AC-1")?;
    Ok(format!("1000 SPDs, max rel err {worst:.2e} (< 1e-6), {:.3} s", dt.as_secs_f64()))
}

fn slab_error(n: usize) -> Result<f64, String> {
    let ts = stratified_samples_seeded(0.0, 1.0, n, None).map_err(err)?;
    let q = quadrature(&vec![2.0; n], &vec![1.0; n], &ts, false).map_err(err)?;
    Ok((q.values[0] - (1.0 - (-2.0f64).exp())).abs())
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn ac2(_: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let e256 = slab_error(256)?;
    ensure(e256 < 1e-3, || format!("slab at 256 samples off by {e256:.3e}"))?;
    let ns = [32, 64, 128, 256, 512];
    let errs: Vec<f64> = ns.iter().map(|&n| slab_error(n)).collect::<Result<_, _>>()?;
    for w in errs.windows(2) {
        ensure(w[1] < w[0], || format!("slab error not decreasing: {}", sci(&errs)))?;
    }

    // Smooth blobs against the dense oracle, 10 % slack per doubling.
    let scene = specfield::dataset::AnalyticScene::three_blobs();
    let partition = BandPartition::uniform(4, 380.0, 780.0).map_err(err)?;
    let em = scene.emissions(&partition);
    let rays = [
        Ray { origin: [4.0, 0.1, 0.2], dir: normalize([-1.0, 0.0, -0.05]) },
        Ray { origin: [0.3, -4.0, 0.1], dir: normalize([-0.05, 1.0, 0.0]) },
    ];
    let mut smooth = Vec::new();
    for ray in &rays {
        let truth = specfield::dataset::oracle_ray(&scene, ray, 2.5, 5.5, &em, 4, 4096);
        let mut prev = f64::INFINITY;
        for &n in &ns {
            let ts = stratified_samples_seeded(2.5, 5.5, n, None).map_err(err)?;
            let mut sig = Vec::with_capacity(n);
            let mut rad = Vec::with_capacity(n * 4);
            for &t in &ts.t {
                let x = ray.at(t);
                sig.push(scene.sigma(x));
                rad.extend(scene.radiance(x, &partition));
            }
            let q = quadrature(&sig, &rad, &ts, false).map_err(err)?;
            let e = q.values.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(e <= 1.1 * prev, || format!("blob ray error rose {prev:.3e} -> {e:.3e} at n={n}"))?;
            prev = e;
            smooth.push(e);
        }
    }
    let dt = t0.elapsed();
    within(dt, 5.0, "AC-2")?;
    Ok(format!(
        "slab 256: |err| {e256:.2e}; slab err 32..512 {}; blob ray err 32..512 {}; {:.2} s",
        sci(&errs),
        sci(&smooth[..ns.len()]),
        dt.as_secs_f64()
    ))
}

fn ac3(_: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let cases = specfield::verify::gradcheck_suite().map_err(err)?;
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .unwrap();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.report.passed()).map(|c| c.name.as_str()).collect();
    let dt = t0.elapsed();
    ensure(failed.is_empty(), || format!("failed: {failed:?}"))?;
    ensure(worst.report.max_rel_err <= 1e-4, || "tolerance".into())?;
    within(dt, 120.0, "AC-3")?;
    Ok(format!(
        "{} cases, worst {} at {:.2e} (<= 1e-4), {:.1} s",
        cases.len(),
        worst.name,
        worst.report.max_rel_err,
        dt.as_secs_f64()
    ))
}

/// Desk-scale field settings shared by AC-4 and AC-8.
fn desk_config(s_num: usize, iterations: usize) -> FieldTrainConfig {
    FieldTrainConfig {
        field: FieldConfig {
            encoding: EncodingConfig { num_freqs_position: 6, num_freqs_direction: 2, include_identity: true },
            depth: 3,
            width: 32,
            skip_layer: 0,
            bottleneck_width: 16,
            s_num,
        },
        render: RenderConfig { n_coarse: 24, n_fine: 24, jitter: true, perturb_sigma_std: 0.0, ..Default::default() },
        loss: LossConfig::default(),
        lr: 2e-3,
        lr_final: Some(2e-4),
        iterations,
        batch_rays: 128,
        seed: 0,
    }
}

const AC4_ITERATIONS: usize = 3000;

fn ac4(ctx: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let ds = ctx.desk_dataset()?.clone();
    let gen_s = t0.elapsed().as_secs_f64();
    let train = ds.split(Split::Train);
    let test = ds.split(Split::Test);
    ensure(train.len() == 30 && test.len() == 10, || format!("split {}/{}", train.len(), test.len()))?;
    let table = RayTable::from_dataset(&ds, Split::Train).map_err(err)?;
    let mut trainer = FieldTrainer::new(desk_config(4, AC4_ITERATIONS), table).map_err(err)?;
    let t1 = Instant::now();
    trainer.run(AC4_ITERATIONS, |_, _| Ok(())).map_err(err)?;
    let train_s = t1.elapsed().as_secs_f64();
    let e = trainer.evaluate(&ds, &test).map_err(err)?;
    let dt = t0.elapsed();
    let detail = format!(
        "{AC4_ITERATIONS} its on 30 views, 10 held out: mean band PSNR {:.2} dB {:.2?}, RGB {:.2} dB \
         (>= 28 each); gen {gen_s:.0} s, train {train_s:.0} s, total {:.0} s",
        e.mean_band_psnr,
        e.band_psnr,
        e.rgb_psnr,
        dt.as_secs_f64()
    );
    ensure(e.mean_band_psnr >= 28.0 && e.rgb_psnr >= 28.0, || detail.clone())?;
    within(dt, 1800.0, "AC-4")?;
    Ok(detail)
}

fn ac5(ctx: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let cfg = GenConfig {
        illuminant_at_fusion: true,
        width: 16,
        height: 16,
        n_views: 6,
        n_test: 1,
        oracle_samples: 512,
        scene: specfield::dataset::AnalyticScene::palette(14),
        ..GenConfig::default()
    };
    let ds = gen_synthetic(&cfg, ctx.path("ac5")).map_err(err)?;
    let mut stacks = Vec::new();
    let mut rgbs = Vec::new();
    for i in 0..ds.len() {
        stacks.push(ds.load_stack(i).map_err(err)?);
        rgbs.push(ds.load_rgb(i).map_err(err)?);
    }
    let fit = fit_weights_least_squares(&stacks, &rgbs, WeightMode::Shared).map_err(err)?;
    let w = fit.band_weights();
    let d65 = Spd::d65();
    let centers = &ds.partition().centers_nm;
    let l: Vec<f64> = centers.iter().map(|c| d65.at(*c)).collect::<Result<_, _>>().map_err(err)?;
    let k = w.len();
    let r_interior = pearson(&w[1..k - 1], &l[1..k - 1]).map_err(err)?;
    let r_all = pearson(&w, &l).map_err(err)?;
    let dt = t0.elapsed();
    let detail = format!(
        "s_num {k}, Pearson over bands 2..{} = {r_interior:.4} (>= 0.95), all bands {r_all:.4}, \
         residual rms {:.1e}, {:.2} s",
        k - 1,
        fit.residual_rms,
        dt.as_secs_f64()
    );
    ensure(r_interior >= 0.95, || detail.clone())?;
    within(dt, 10.0, "AC-5")?;
    Ok(detail)
}

fn ac6(_: &mut Context) -> Outcome {
    let w = weights_from_psnr(&[30.0, 30.0, 30.0]);
    ensure(w.iter().all(|v| *v == 2.0), || format!("equal PSNR gave {w:?}"))?;
    let w = weights_from_psnr(&[40.0, 20.0]);
    ensure(w[0] == 2.0 && (w[1] - 4.0).abs() < 1e-12, || format!("P_max/P = 2 gave {w:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let p: Vec<f64> = (0..11).map(|_| rng.gen_range(5.0..60.0)).collect();
        let w = weights_from_psnr(&p);
        for a in 0..p.len() {
            for b in 0..p.len() {
                if p[a] < p[b] {
                    ensure(w[a] > w[b], || format!("not strictly decreasing: {p:?} -> {w:?}"))?;
                }
            }
        }
    }
    Ok("w_s = 2 at P = P_max, 4 at P_max/P = 2, strictly decreasing over 200 random tables".into())
}

fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64
}

fn ac7(ctx: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let cfg = GenConfig { s_num: 4, width: 32, height: 32, n_views: 2, n_test: 1, oracle_samples: 512, ..GenConfig::default() };
    let ds = gen_synthetic(&cfg, ctx.path("ac7")).map_err(err)?;
    let stack = ds.load_stack(0).map_err(err)?;
    let rgb = ds.load_rgb(0).map_err(err)?.clamped();
    let net_cfg = SaUnetConfig { s_num: 4, ..SaUnetConfig::default() };
    let mut net = SaUnet::new(net_cfg, 0).map_err(err)?;
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 0..2000 {
        let loss = fusion_step(&mut net, &stack, &rgb, 1e-3).map_err(err)?;
        // The step reports the loss before its update; confirm on a fresh forward pass.
        if loss < 1e-4 {
            last = mse(&saunet_forward(&stack, &net).map_err(err)?, &rgb);
            if last < 1e-4 {
                reached = Some(step + 1);
                break;
            }
        } else {
            last = loss;
        }
    }
    let Some(steps) = reached else {
        return Err(format!("MSE still {last:.3e} after 2000 steps"));
    };

    let mut shapes = Vec::new();
    for sa in [SaPlacement::NONE, SaPlacement::E1, SaPlacement::E1_E2, SaPlacement::ALL] {
        let mut net = SaUnet::new(SaUnetConfig { sa_placement: sa, ..net_cfg }, 1).map_err(err)?;
        let l = fusion_step(&mut net, &stack, &rgb, 1e-3).map_err(err)?;
        let out = saunet_forward(&stack, &net).map_err(err)?;
        ensure(out.width == 32 && out.height == 32 && out.data.iter().all(|v| v.is_finite()) && l.is_finite(), || {
            format!("placement {sa} produced a bad output")
        })?;
        shapes.push(sa.to_string());
    }
    Ok(format!(
        "32x32 pair overfit to MSE {last:.2e} at step {steps} (< 1e-4 within 2000, lr 1e-3); \
         placements {shapes:?} shape-clean; {:.1} s",
        t0.elapsed().as_secs_f64()
    ))
}

fn ablation_csv() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("band_count_ablation.csv")
}

fn ac8(ctx: &mut Context) -> Outcome {
    let t0 = Instant::now();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for s_num in [4, 8, 11] {
        let cfg = GenConfig { s_num, width: 32, height: 32, n_views: 12, n_test: 2, oracle_samples: 1024, ..GenConfig::default() };
        let ds = gen_synthetic(&cfg, ctx.path(&format!("ac8_{s_num}"))).map_err(err)?;
        let table = RayTable::from_dataset(&ds, Split::Train).map_err(err)?;
        let mut t = FieldTrainer::new(desk_config(s_num, 300), table).map_err(err)?;
        t.run(300, |_, _| Ok(())).map_err(err)?;
        let test = ds.split(Split::Test);
        let e = t.evaluate(&ds, &test).map_err(err)?;
        let render = t.eval_render_cfg();
        for &i in &test {
            let (_, pred) = specfield::render::render_spectrum_maps(&t.coarse, &t.fine, ds.camera(i), &render).map_err(err)?;
            let rgb = ds.recompose(&pred).map_err(err)?;
            let gt = ds.load_rgb(i).map_err(err)?;
            rows.push(MetricsRow::evaluate(&format!("s_num={s_num}"), &ds.view(i).name, &rgb, &gt, L1Scale::Unit).map_err(err)?);
        }
        ensure(e.mean_band_psnr.is_finite() && e.rgb_psnr.is_finite(), || format!("s_num {s_num}: non-finite metrics"))?;
        summary.push(format!("{s_num}: band {:.1} / rgb {:.1} dB", e.mean_band_psnr, e.rgb_psnr));
    }
    let path = ablation_csv();
    write_metrics_csv(&path, &rows).map_err(err)?;
    let back = specfield::metrics::read_metrics_csv(&path).map_err(err)?;
    ensure(back.len() == 6, || format!("{} CSV rows", back.len()))?;
    Ok(format!("{} ; CSV {} ; {:.0} s", summary.join(", "), path.display(), t0.elapsed().as_secs_f64()))
}

fn ac9(ctx: &mut Context) -> Outcome {
    let ds = ctx.desk_dataset()?.clone();
    // SFM: decode then re-encode every stored file.
    let mut files = 0;
    for i in 0..ds.len() {
        let v = ds.view(i);
        for rel in v.bands.iter().chain(std::iter::once(&v.rgb)) {
            let path = ds.root.join(rel);
            let bytes = std::fs::read(&path).map_err(err)?;
            let map = SfmMap::decode(&bytes, rel).map_err(err)?;
            ensure(map.encode() == bytes, || format!("{rel} re-encodes differently"))?;
            ensure(sfm_read(&path).map_err(err)? == map, || format!("{rel} reads differently"))?;
            files += 1;
        }
    }
    // Checkpoint: write, read, write again.
    let field = SpectralField::new(desk_config(4, 1).field, 9).map_err(err)?;
    let records = field.records("f/", true);
    let a = ctx.path("a.spnf");
    let b = ctx.path("b.spnf");
    checkpoint::write(&a, &records).map_err(err)?;
    checkpoint::write(&b, &checkpoint::read(&a).map_err(err)?).map_err(err)?;
    ensure(std::fs::read(&a).map_err(err)? == std::fs::read(&b).map_err(err)?, || "checkpoint bytes differ".into())?;
    let back = SpectralField::from_records(&checkpoint::read(&a).map_err(err)?, "f/").map_err(err)?;
    ensure(back.store().params().iter().zip(field.store().params()).all(|(x, y)| x.value == y.value), || {
        "checkpoint parameters differ".into()
    })?;
    // Stored RGB against compose_rgb of the stored bands.
    let mut worst: f64 = 0.0;
    for i in 0..ds.len() {
        let stack = ds.load_stack(i).map_err(err)?;
        let rgb = ds.load_rgb(i).map_err(err)?;
        let again = compose_rgb(&stack, ds.kappa()).map_err(err)?;
        for (x, y) in rgb.data.iter().zip(&again.data) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("stored RGB differs from compose_rgb by {worst:.2e}"))?;
    Ok(format!(
        "{files} SFM files and a checkpoint re-encode byte-identically; stored RGB vs compose_rgb max diff {worst:.1e} (<= 1e-6)"
    ))
}

fn ac10(_: &mut Context) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (w, h) = (24, 20);
    let a = RgbImage::from_data(w, h, (0..w * h * 3).map(|_| rng.gen_range(0.0..0.9)).collect()).map_err(err)?;
    let s = ssim(&a, &a).map_err(err)?;
    let p = psnr_image(&a, &a).map_err(err)?;
    let l = l1_image(&a, &a, L1Scale::Unit).map_err(err)?;
    ensure((s - 1.0).abs() <= 1e-9, || format!("SSIM(a, a) = {s}"))?;
    ensure(p == PSNR_CLAMP_DB && p == 60.0, || format!("PSNR(a, a) = {p}"))?;
    ensure(l == 0.0, || format!("L1(a, a) = {l}"))?;
    let b = RgbImage::from_data(w, h, a.data.iter().map(|v| v + 0.1).collect()).map_err(err)?;
    let p20 = psnr_image(&b, &a).map_err(err)?;
    ensure((p20 - 20.0).abs() < 1e-9, || format!("MSE 0.01 gave PSNR {p20}"))?;
    Ok(format!("identical: SSIM {s}, PSNR {p} dB (clamped), L1 {l}; MSE 0.01 -> {p20:.9} dB"))
}

type Criterion = (&'static str, fn(&mut Context) -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("AC-1", ac1),
        ("AC-2", ac2),
        ("AC-3", ac3),
        ("AC-4", ac4),
        ("AC-5", ac5),
        ("AC-6", ac6),
        ("AC-7", ac7),
        ("AC-8", ac8),
        ("AC-9", ac9),
        ("AC-10", ac10),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let mut ctx = Context { dir: tempfile::tempdir().expect("temp dir"), desk: None };
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == name) {
            continue;
        }
        match f(&mut ctx) {
            Ok(detail) => println!("{name:<6} PASS  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{name:<6} FAIL  {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
