//! The acceptance suite: one pass/fail line per criterion.
//!
//! Runs sequentially in a single process so the timing criteria measure
//! one job at a time.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mmstyle::consistency::{backward_warp, reconstruct_supervision, OcclusionMask, SupervisionPack};
use mmstyle::field::{render_batch, render_batch_backward, render_image, render_ray, FieldConfig, HeadGrads, Ray};
use mmstyle::mls::{pack_heads, pretrain_mls, MlsConfig};
use mmstyle::nn::{LrSchedule, OptimizerKind};
use mmstyle::scene::{generate_synthetic_scene, save_scene, FlowField, SceneBundle};
use mmstyle::style::{
    catalog, match_style, pair_corpus, train_cfcm, CfcmConfig, Modality, StyleEncoder, StyleEntry, StyleFeature,
    StyleMatch, StyleRecord, StyleSet, ToyEncoder, DEFAULT_THRESHOLD,
};
use mmstyle::stylizer::StylizedView;
use mmstyle::trainer::{
    build_tasks, compute_scene_flows, evaluate_packs, head_for, incremental_in_memory, pregenerate_supervision,
    pretrain_models, pretrain_run, read_loss_log, render_run, render_with_heads, stylization_train, test_sequence,
    train_tasks, EvalReport, EvalStyle, IncrementalOutcome, LoopConfig, StyleQuery, StyleSource, StyleTask,
    SupervisionOptions, TestSequence, TrainConfig, TrainOutcome, SHARED_HEAD,
};
use mmstyle::{Field32, Field64, ImageBuffer, Mls32, Mls64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];
const VIEWS: usize = 6;
const RESOLUTION: usize = 96;
const STYLE_SIZE: usize = 64;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn report(n: usize, name: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    });
    let status = if v.pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {n:>2} [{name}]: {status} ({:.1} s) {}",
        start.elapsed().as_secs_f64(),
        v.detail
    );
    v.pass
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / norm
}

fn acceptance_field() -> FieldConfig {
    FieldConfig {
        trunk_width: 32,
        head_width: 32,
        samples_per_ray: 32,
        ..FieldConfig::default()
    }
}

fn acceptance_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        iters: 5000,
        batch: 256,
        lr: LrSchedule::new(5e-3, 1.67e-4),
        optimizer: OptimizerKind::SgdMomentum,
        style_size: STYLE_SIZE,
        field: acceptance_field(),
        mls: MlsConfig {
            backbone_width: 64,
            head_width: 64,
        },
        cache_root: None,
        ..TrainConfig::default()
    };
    cfg.nerf.steps = 1000;
    cfg
}

// ---------------------------------------------------------------- 1

fn rendering_oracle() -> Verdict {
    let start = Instant::now();
    let cfg = FieldConfig {
        samples_per_ray: 64,
        stratified: false,
        ..FieldConfig::default()
    };
    let c: [f64; 3] = [0.9, 0.35, 0.1];
    let mut field = Field64::with_zero_heads(cfg, 0).unwrap();
    let n = field.color_head.len();
    for (k, ck) in c.iter().enumerate() {
        field.color_head[n - 3 + k] = (ck / (1.0 - ck)).ln();
    }
    // unit-length segment through sigma = ln 2: 1 - exp(-ln 2) = 1/2
    let ray = Ray::new([0.1, -0.2, -1.5], [0.0, 0.6, 0.8], 1.0, 2.0).unwrap();
    let out = render_ray(&field, &ray);
    let err = (0..3).map(|k| (out[k] - 0.5 * c[k]).abs()).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        err < 1e-3 && secs < 1.0,
        format!("max error {err:.2e} (< 1e-3), {secs:.3} s (< 1 s)"),
    )
}

// ---------------------------------------------------------------- 2

fn random_ray(rng: &mut ChaCha8Rng) -> Ray<f64> {
    let o: [f64; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -1.6];
    let t: [f64; 3] = [
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
        rng.gen_range(-0.5..0.5),
    ];
    let d = [t[0] - o[0], t[1] - o[1], t[2] - o[2]];
    let len: f64 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    Ray::new(o, [d[0] / len, d[1] / len, d[2] / len], 0.4, 2.8).unwrap()
}

fn render_gradient_error(case: u64) -> f64 {
    let cfg = FieldConfig {
        trunk_width: 16,
        head_width: 12,
        samples_per_ray: 24,
        stratified: false,
        ..FieldConfig::default()
    };
    let field = Field64::init(cfg, 1000 + case).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let rays = [random_ray(&mut rng)];
    let g: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |f: &Field64| -> f64 {
        let c = render_ray(f, &rays[0]);
        c.iter().zip(&g).map(|(a, b)| a * b).sum()
    };
    let trace = render_batch::<f64, ChaCha8Rng>(&field, &rays, None);
    let mut grads = HeadGrads::zeros(&field);
    let mut trunk = vec![0.0; field.trunk.len()];
    render_batch_backward(&field, &trace, &g, &mut grads, Some(&mut trunk));

    let h = 1e-6;
    let numeric = |pick: &dyn Fn(&mut Field64) -> &mut Vec<f64>, len: usize| -> Vec<f64> {
        (0..len)
            .map(|i| {
                let (mut p, mut m) = (field.clone(), field.clone());
                pick(&mut p)[i] += h;
                pick(&mut m)[i] -= h;
                (objective(&p) - objective(&m)) / (2.0 * h)
            })
            .collect()
    };
    let e_opacity = rel_error(&grads.opacity, &numeric(&|f| &mut f.opacity_head, grads.opacity.len()));
    let e_color = rel_error(&grads.color, &numeric(&|f| &mut f.color_head, grads.color.len()));
    let e_trunk = rel_error(&trunk, &numeric(&|f| &mut f.trunk, trunk.len()));
    e_opacity.max(e_color).max(e_trunk)
}

fn predict_gradient_error(case: u64) -> f64 {
    let field_cfg = FieldConfig {
        trunk_width: 8,
        head_width: 6,
        ..FieldConfig::default()
    };
    let ids = vec!["a".to_string(), "b".to_string()];
    let mls = Mls64::init(
        MlsConfig {
            backbone_width: 12,
            head_width: 10,
        },
        6,
        &field_cfg,
        &ids,
        2000 + case,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let feature: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..mls.p()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |m: &Mls64| -> f64 {
        m.predict(&feature, "b")
            .unwrap()
            .iter()
            .zip(&g)
            .map(|(p, w)| p * w)
            .sum()
    };
    let trace = mls.forward(&feature, "b").unwrap();
    let mut head = vec![0.0; mls.head_shape().param_count()];
    let mut backbone = vec![0.0; mls.backbone.len()];
    mls.backward(&trace, &g, &mut head, Some(&mut backbone));
    let hi = mls.head_index("b").unwrap();
    let h = 1e-6;
    let num_head: Vec<f64> = (0..head.len())
        .map(|i| {
            let (mut p, mut m) = (mls.clone(), mls.clone());
            p.heads[hi].1[i] += h;
            m.heads[hi].1[i] -= h;
            (objective(&p) - objective(&m)) / (2.0 * h)
        })
        .collect();
    let num_backbone: Vec<f64> = (0..backbone.len())
        .map(|i| {
            let (mut p, mut m) = (mls.clone(), mls.clone());
            p.backbone[i] += h;
            m.backbone[i] -= h;
            (objective(&p) - objective(&m)) / (2.0 * h)
        })
        .collect();
    rel_error(&head, &num_head).max(rel_error(&backbone, &num_backbone))
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let render = (0..10).map(render_gradient_error).fold(0.0, f64::max);
    let predict = (0..10).map(predict_gradient_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        render < 1e-4 && predict < 1e-4 && secs < 30.0,
        format!("worst relative error render {render:.2e}, predict {predict:.2e} (< 1e-4), {secs:.1} s (< 30 s)"),
    )
}

// ---------------------------------------------------------------- 3

fn oracle_bilinear(img: &ImageBuffer, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |px: i64, py: i64| -> [f64; 3] {
        if px < 0 || py < 0 || px >= w || py >= h {
            [0.0; 3]
        } else {
            img.get(px as usize, py as usize)
        }
    };
    let (a, b, c, d) = (at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1));
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (1.0 - fx) * (1.0 - fy) * a[k] + fx * (1.0 - fy) * b[k] + (1.0 - fx) * fy * c[k] + fx * fy * d[k];
    }
    out
}

fn reconstruction_equivalence() -> Verdict {
    let size = 32;
    let mut worst_fractional = 0.0f64;
    let mut exact_integer = true;
    for config in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(config);
        let n = rng.gen_range(2..5);
        let reference = rng.gen_range(0..n);
        let integer = config % 2 == 0;
        let images: Vec<ImageBuffer> = (0..n)
            .map(|_| ImageBuffer::from_fn(size, size, |_, _| [rng.gen(), rng.gen(), rng.gen()]))
            .collect();
        let views: Vec<StylizedView> = images
            .iter()
            .enumerate()
            .map(|(i, img)| StylizedView {
                view: i,
                style_id: "s".into(),
                image: img.clone(),
            })
            .collect();
        let mut flows = Vec::new();
        let mut masks = Vec::new();
        for j in 0..n {
            if j == reference {
                flows.push(None);
                masks.push(None);
                continue;
            }
            let mut data = Vec::with_capacity(size * size * 2);
            for _ in 0..size * size * 2 {
                data.push(if integer {
                    rng.gen_range(-4i32..=4) as f64
                } else {
                    rng.gen_range(-4.0..4.0)
                });
            }
            let flow = FlowField::from_parts(size, size, j, reference, data, vec![true; size * size]).unwrap();
            let values = (0..size * size).map(|_| u8::from(rng.gen_bool(0.6))).collect();
            flows.push(Some(flow));
            masks.push(Some(OcclusionMask::from_values(size, size, j, reference, values)));
        }
        let pack = reconstruct_supervision(&views, reference, &flows, &masks).unwrap();
        for j in 0..n {
            let got = pack.target(j);
            for y in 0..size {
                for x in 0..size {
                    let want = match (&flows[j], &masks[j]) {
                        (Some(f), Some(m)) if m.get(x, y) => {
                            let [u, v] = f.get(x, y);
                            oracle_bilinear(&images[reference], x as f64 + u, y as f64 + v)
                        }
                        _ => images[j].get(x, y),
                    };
                    let g = got.get(x, y);
                    if integer {
                        exact_integer &= g == want;
                    } else {
                        for k in 0..3 {
                            worst_fractional = worst_fractional.max((g[k] - want[k]).abs());
                        }
                    }
                }
            }
        }
    }
    verdict(
        exact_integer && worst_fractional < 1e-12,
        format!(
            "20 configs at 32x32: integer flows bit-exact: {exact_integer}, fractional max deviation {worst_fractional:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn warp_correctness() -> Verdict {
    let scene = generate_synthetic_scene(0, VIEWS, RESOLUTION).unwrap();
    let flows = compute_scene_flows(&scene, 1.0).unwrap();
    let r = flows.reference;
    let mut worst = 0.0f64;
    for j in (0..scene.len()).filter(|&j| j != r) {
        let warped = backward_warp(&scene.views[r].image, flows.to_ref[j].as_ref().unwrap()).unwrap();
        let mask = flows.masks[j].as_ref().unwrap();
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..RESOLUTION {
            for x in 0..RESOLUTION {
                if mask.get(x, y) {
                    let (a, b) = (warped.get(x, y), scene.views[j].image.get(x, y));
                    sum += (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0;
                    count += 1;
                }
            }
        }
        worst = worst.max(if count == 0 { f64::INFINITY } else { sum / count as f64 });
    }
    verdict(
        worst < 2.0 / 255.0,
        format!(
            "worst view mean error {:.3}/255 (< 2/255), reference view {r}",
            worst * 255.0
        ),
    )
}

// ---------------------------------------------------------------- 5, 6

/// Everything one seed's stylization runs share.
struct SeedSetup {
    seed: u64,
    cfg: TrainConfig,
    scene: SceneBundle,
    field: Field32,
    set: StyleSet,
    mls: Mls32,
    packs: Vec<SupervisionPack>,
    seq: TestSequence,
    seconds: f64,
}

fn f32_vec(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

fn catalog_sources(indices: &[usize], size: usize) -> Vec<StyleSource> {
    let cat = catalog();
    indices
        .iter()
        .map(|&i| StyleSource {
            id: cat[i].id.clone(),
            image: cat[i].render(size).quantized(),
        })
        .collect()
}

fn write_style_manifest(dir: &Path, sources: &[StyleSource]) -> Vec<StyleRecord> {
    let mut records = Vec::new();
    for s in sources {
        let path = dir.join(format!("{}.png", s.id));
        s.image.save_png(&path).unwrap();
        records.push(StyleRecord {
            id: s.id.clone(),
            modality: Modality::Image,
            payload: path.to_string_lossy().into_owned(),
            feature: None,
        });
    }
    mmstyle::style::save_style_records(&dir.join("styles.json"), &records).unwrap();
    records
}

fn seed_setup(seed: u64) -> SeedSetup {
    let start = Instant::now();
    let cfg = acceptance_config(seed);
    let scene = generate_synthetic_scene(seed, VIEWS, RESOLUTION).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sources = catalog_sources(&[0, 1], STYLE_SIZE);
    let records = write_style_manifest(dir.path(), &sources);
    let p = pretrain_models(&scene, &records, &dir.path().join("styles.json"), &cfg).unwrap();
    let codec = cfg.codec.build();
    let (packs, _) = pregenerate_supervision(&scene, &sources, &codec, &cfg.supervision_options()).unwrap();
    let seq = test_sequence(&scene, cfg.tau).unwrap();
    SeedSetup {
        seed,
        cfg,
        scene,
        field: p.field,
        set: p.set,
        mls: p.mls,
        packs,
        seq,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// An MLS with a single head every style routes through, fitted like the
/// per-style one.
fn shared_mls(s: &SeedSetup) -> Mls32 {
    let mut mls = Mls32::init(
        s.cfg.mls.clone(),
        s.set.dim,
        &s.field.config,
        &[SHARED_HEAD.to_string()],
        s.seed,
    )
    .unwrap();
    let targets: Vec<(String, Vec<f32>)> = s
        .set
        .entries
        .iter()
        .map(|e| (SHARED_HEAD.to_string(), f32_vec(&e.feature.vector)))
        .collect();
    pretrain_mls(&mut mls, &targets, &pack_heads(&s.field).values, &s.cfg.mls_pretrain).unwrap();
    mls
}

fn evaluate(s: &SeedSetup, mls: &Mls32) -> EvalReport {
    let styles: Vec<EvalStyle<'_>> = s
        .set
        .entries
        .iter()
        .zip(&s.packs)
        .map(|(e, p)| {
            (
                e.id.clone(),
                head_for(mls, &e.id).unwrap(),
                f32_vec(&e.feature.vector),
                p,
            )
        })
        .collect();
    let codec = s.cfg.codec.build();
    evaluate_packs(
        &s.field,
        mls,
        &s.scene,
        &s.seq,
        &styles,
        &codec,
        s.cfg.codec.backend(),
        s.seed,
    )
    .unwrap()
}

fn stylize(s: &SeedSetup, mls: &Mls32, consistent: bool) -> (TrainOutcome, EvalReport) {
    let tasks = build_tasks(&s.set, &s.packs, mls, consistent).unwrap();
    let out = train_tasks(&s.field, mls, &s.scene, &tasks, &s.cfg.loop_config()).unwrap();
    let report = evaluate(s, &out.mls);
    (out, report)
}

struct SeedResult {
    seed: u64,
    consistent: EvalReport,
    independent: EvalReport,
    single_head: EvalReport,
    /// Seconds spent on the paired runs behind the TWE comparison.
    twe_seconds: f64,
}

fn ablation_runs(setups: &mut Vec<SeedSetup>) -> Vec<SeedResult> {
    let mut results = Vec::new();
    for seed in SEEDS {
        let s = seed_setup(seed);
        let start = Instant::now();
        let (_, consistent) = stylize(&s, &s.mls, true);
        let (_, independent) = stylize(&s, &s.mls, false);
        let twe_seconds = s.seconds + start.elapsed().as_secs_f64();
        let shared = shared_mls(&s);
        let (_, single_head) = stylize(&s, &shared, false);
        println!(
            "    seed {seed}: TWE consistent {:.6} independent {:.6} single-head {:.6} | SSIM {:.4} {:.4} {:.4}",
            consistent.twe, independent.twe, single_head.twe, consistent.ssim, independent.ssim, single_head.ssim
        );
        results.push(SeedResult {
            seed,
            consistent,
            independent,
            single_head,
            twe_seconds,
        });
        setups.push(s);
    }
    results
}

fn twe_direction(results: &[SeedResult]) -> Verdict {
    let wins = results.iter().filter(|r| r.consistent.twe < r.independent.twe).count();
    let secs: f64 = results.iter().map(|r| r.twe_seconds).sum();
    let pairs: Vec<String> = results
        .iter()
        .map(|r| format!("seed {}: {:.3e} vs {:.3e}", r.seed, r.consistent.twe, r.independent.twe))
        .collect();
    verdict(
        wins == results.len() && results.len() == 3 && secs < 1800.0,
        format!(
            "TWE with < without reconstructed supervision on {wins}/3 seeds [{}], {:.1} min (< 30 min)",
            pairs.join("; "),
            secs / 60.0
        ),
    )
}

fn ssim_direction(results: &[SeedResult]) -> Verdict {
    let wins = results
        .iter()
        .filter(|r| r.consistent.ssim >= r.single_head.ssim)
        .count();
    let pairs: Vec<String> = results
        .iter()
        .map(|r| format!("seed {}: {:.4} vs {:.4}", r.seed, r.consistent.ssim, r.single_head.ssim))
        .collect();
    verdict(
        wins == results.len() && results.len() == 3,
        format!(
            "SSIM multi-head + consistent >= single-head + independent on {wins}/3 seeds [{}]",
            pairs.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 7

fn cfcm_improvement() -> Verdict {
    let start = Instant::now();
    let corpus = pair_corpus(&ToyEncoder::new(0), 200, 0);
    let (_, report) = train_cfcm(&corpus.pairs, &CfcmConfig::default()).unwrap();
    let gain = report.mean_after() - report.mean_before();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        gain >= 0.1 && secs < 120.0,
        format!(
            "validation cosine {:.3} -> {:.3} (gain {gain:.3} >= 0.1), {secs:.1} s (< 120 s)",
            report.mean_before(),
            report.mean_after()
        ),
    )
}

// ---------------------------------------------------------------- 8, 9

const EXISTING: [usize; 4] = [0, 1, 2, 3];
const PER_STYLE_STEPS: usize = 1000;

fn style_set(sources: &[StyleSource]) -> StyleSet {
    let enc = ToyEncoder::new(0);
    let mut set = StyleSet::new(enc.dim(), DEFAULT_THRESHOLD);
    for s in sources {
        set.push(StyleEntry {
            id: s.id.clone(),
            modality: Modality::Image,
            payload: String::new(),
            feature: StyleFeature::image(enc.encode_image(&s.image)),
            head: None,
        })
        .unwrap();
    }
    set
}

fn fitted_mls(s: &SeedSetup, set: &StyleSet) -> Mls32 {
    let mut mls = Mls32::init(s.cfg.mls.clone(), set.dim, &s.field.config, &set.ids(), s.seed).unwrap();
    let targets: Vec<(String, Vec<f32>)> = set
        .entries
        .iter()
        .map(|e| (e.id.clone(), f32_vec(&e.feature.vector)))
        .collect();
    pretrain_mls(&mut mls, &targets, &pack_heads(&s.field).values, &s.cfg.mls_pretrain).unwrap();
    mls
}

fn mls_pretraining(s: &SeedSetup, set: &StyleSet, mls: &Mls32) -> Verdict {
    let base = pack_heads(&s.field).values;
    let base_norm = base.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let (mut worst_rel, mut worst_render) = (0.0f64, 0.0f64);
    for e in &set.entries {
        let f = f32_vec(&e.feature.vector);
        let p = mls.predict(&f, &e.id).unwrap();
        let err = p
            .iter()
            .zip(&base)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        worst_rel = worst_rel.max(err / base_norm);
        for v in &s.scene.views {
            let styled = render_with_heads(&s.field, mls, &f, &e.id, &v.camera).unwrap();
            worst_render = worst_render.max(styled.mean_abs_diff(&render_image(&s.field, &v.camera, None)));
        }
    }
    verdict(
        worst_rel < 1e-2 && worst_render < 2.0 / 255.0,
        format!(
            "{} styles: worst relative error {worst_rel:.2e} (< 1e-2), worst render difference {:.3}/255 (< 2/255)",
            set.len(),
            worst_render * 255.0
        ),
    )
}

fn loop_steps(s: &SeedSetup, steps: usize) -> LoopConfig {
    LoopConfig {
        steps,
        ..s.cfg.loop_config()
    }
}

fn incremental_contracts(s: &SeedSetup, base_set: &StyleSet, base_mls: &Mls32) -> Verdict {
    let codec = s.cfg.codec.build();
    let opts = SupervisionOptions {
        tau: s.cfg.tau,
        cache_root: None,
    };
    // first catalog style after the existing ones that is not matched
    let enc = ToyEncoder::new(0);
    let new_source = (EXISTING.len()..catalog().len())
        .map(|i| catalog_sources(&[i], STYLE_SIZE).remove(0))
        .find(|src| {
            let f = StyleFeature::image(enc.encode_image(&src.image));
            matches!(match_style(&f, base_set), Ok(StyleMatch::New { .. }))
        })
        .expect("the catalog has an unmatched style");
    let existing = catalog_sources(&EXISTING, STYLE_SIZE);

    // the existing styles trained jointly
    let (packs, _) = pregenerate_supervision(&s.scene, &existing, &codec, &opts).unwrap();
    let tasks: Vec<StyleTask<'_, f32>> = build_tasks(base_set, &packs, base_mls, true).unwrap();
    let trained = train_tasks(
        &s.field,
        base_mls,
        &s.scene,
        &tasks,
        &loop_steps(s, EXISTING.len() * PER_STYLE_STEPS),
    )
    .unwrap()
    .mls;

    // full training of all styles, the new one included
    let mut all = existing.clone();
    all.push(new_source.clone());
    let all_set = style_set(&all);
    let joint_mls = fitted_mls(s, &all_set);
    let start = Instant::now();
    let (all_packs, _) = pregenerate_supervision(&s.scene, &all, &codec, &opts).unwrap();
    let tasks = build_tasks(&all_set, &all_packs, &joint_mls, true).unwrap();
    let joint = train_tasks(
        &s.field,
        &joint_mls,
        &s.scene,
        &tasks,
        &loop_steps(s, all.len() * PER_STYLE_STEPS),
    )
    .unwrap();
    let full_seconds = start.elapsed().as_secs_f64();
    let joint_mscl = joint.final_mscl[&new_source.id];

    // incremental learning of the new style on the trained model
    let cam = &s.scene.views[0].camera;
    let before: Vec<String> = base_set
        .entries
        .iter()
        .map(|e| {
            render_with_heads(&s.field, &trained, &f32_vec(&e.feature.vector), &e.id, cam)
                .unwrap()
                .checksum()
        })
        .collect();
    let entry = all_set.get(&new_source.id).unwrap().clone();
    let start = Instant::now();
    let (new_pack, _) = pregenerate_supervision(&s.scene, std::slice::from_ref(&new_source), &codec, &opts).unwrap();
    let outcome = incremental_in_memory(
        &s.field,
        &trained,
        &s.scene,
        base_set,
        &entry,
        &new_pack[0],
        true,
        &loop_steps(s, PER_STYLE_STEPS),
    )
    .unwrap();
    let inc_seconds = start.elapsed().as_secs_f64();
    let IncrementalOutcome::Trained {
        mls: grown,
        outcome,
        nearest,
        ..
    } = outcome
    else {
        return verdict(false, "new style was refused as known".into());
    };
    let backbone_same = grown.backbone == trained.backbone;
    let renders_same = base_set.entries.iter().zip(&before).all(|(e, want)| {
        let got = render_with_heads(&s.field, &grown, &f32_vec(&e.feature.vector), &e.id, cam).unwrap();
        &got.checksum() == want
    });
    let inc_mscl = outcome.final_mscl[&new_source.id];
    let ratio = inc_seconds / full_seconds;
    verdict(
        backbone_same && renders_same && inc_mscl <= 1.5 * joint_mscl && ratio < 0.25,
        format!(
            "new '{}' from '{nearest}': backbone unchanged {backbone_same}, existing renders identical {renders_same}, \
             MSCL {inc_mscl:.5} vs joint {joint_mscl:.5} (ratio {:.2} <= 1.5), time {inc_seconds:.1} s vs {full_seconds:.1} s \
             ({:.1}% < 25%)",
            new_source.id,
            inc_mscl / joint_mscl,
            ratio * 100.0
        ),
    )
}

// ---------------------------------------------------------------- 10

fn small_run(dir: &Path) -> (Vec<(usize, String, f64)>, Vec<String>) {
    let scene = generate_synthetic_scene(3, 4, 32).unwrap();
    save_scene(&scene, &dir.join("scene")).unwrap();
    let sources = catalog_sources(&[0, 1], 32);
    write_style_manifest(dir, &sources);
    let mut cfg = TrainConfig {
        scene: Some(dir.join("scene")),
        styles: Some(dir.join("styles.json")),
        run: dir.join("run"),
        seed: 11,
        iters: 400,
        batch: 128,
        style_size: 32,
        field: acceptance_field(),
        mls: MlsConfig {
            backbone_width: 32,
            head_width: 32,
        },
        cache_root: None,
        ..TrainConfig::default()
    };
    cfg.nerf.steps = 200;
    cfg.mls_pretrain.epochs = 100;
    pretrain_run(&cfg).unwrap();
    stylization_train(&cfg).unwrap();
    let log = read_loss_log(&cfg.paths().loss_log())
        .unwrap()
        .into_iter()
        .map(|r| (r.step, r.style_id, r.mscl))
        .collect();
    let mut checksums = Vec::new();
    for s in &sources {
        for v in 0..scene.len() {
            checksums.push(render_run(&cfg, &StyleQuery::Id(s.id.clone()), v).unwrap().0.checksum());
        }
    }
    (log, checksums)
}

fn determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (log_a, sums_a) = small_run(a.path());
    let (log_b, sums_b) = small_run(b.path());
    let same_rows = log_a.len() == log_b.len() && log_a.iter().zip(&log_b).all(|(x, y)| x.0 == y.0 && x.1 == y.1);
    let worst = log_a
        .iter()
        .zip(&log_b)
        .map(|(x, y)| (x.2 - y.2).abs())
        .fold(0.0, f64::max);
    let renders = sums_a == sums_b;
    verdict(
        same_rows && worst <= 1e-6 && renders,
        format!(
            "{} loss records, max difference {worst:.1e} (<= 1e-6), {} render checksums identical: {renders}",
            log_a.len(),
            sums_a.len()
        ),
    )
}

fn main() {
    // libtest-style filters are accepted and ignored; the suite always runs whole
    let mut passed = vec![
        report(1, "rendering oracle", rendering_oracle),
        report(2, "gradient suite", gradient_suite),
        report(3, "reconstruction oracle", reconstruction_equivalence),
        report(4, "warp correctness", warp_correctness),
    ];

    let mut setups = Vec::new();
    let results = catch_unwind(AssertUnwindSafe(|| ablation_runs(&mut setups))).unwrap_or_default();
    passed.push(report(5, "consistent supervision lowers TWE", || {
        twe_direction(&results)
    }));
    passed.push(report(6, "multi-head + MSCL keeps SSIM", || ssim_direction(&results)));
    passed.push(report(7, "CFCM improvement", cfcm_improvement));

    let seed0 = setups.into_iter().next().unwrap_or_else(|| seed_setup(0));
    let base_sources = catalog_sources(&EXISTING, STYLE_SIZE);
    let base_set = style_set(&base_sources);
    let base_mls = fitted_mls(&seed0, &base_set);
    passed.push(report(8, "incremental learning", || {
        incremental_contracts(&seed0, &base_set, &base_mls)
    }));
    passed.push(report(9, "MLS pretraining", || {
        mls_pretraining(&seed0, &base_set, &base_mls)
    }));
    passed.push(report(10, "determinism", determinism));

    let n = passed.iter().filter(|p| **p).count();
    println!("acceptance: {n}/{} criteria passed", passed.len());
    // failures are reported above; ACCEPTANCE_STRICT=1 also makes them fatal
    if n != passed.len() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
