use std::path::Path;

use mmstyle::field::FieldConfig;
use mmstyle::mls::{pack_heads, pretrain_mls, MlsConfig, MlsPretrainConfig};
use mmstyle::nn::{LrSchedule, OptimizerKind};
use mmstyle::scene::{generate_synthetic_scene, save_scene, SceneBundle};
use mmstyle::style::{
    catalog, save_style_records, Modality, StyleEncoder, StyleEntry, StyleFeature, StyleRecord, StyleSet, ToyEncoder,
};
use mmstyle::stylizer::FeatureExtractor;
use mmstyle::trainer::{
    cache_dir, file_hash, incremental_in_memory, pregenerate_supervision, pretrain_run, read_loss_log, render_base,
    render_run, render_with_heads, resolve_style, stylization_train, train_tasks, IncrementalOutcome, LoopConfig,
    StyleQuery, StyleSource, StyleTask, SupervisionOptions, TrainConfig, SHARED_HEAD,
};
use mmstyle::{Error, Field32, ImageBuffer, Mls32};

fn field_config() -> FieldConfig {
    FieldConfig {
        pos_freqs: 3,
        dir_freqs: 1,
        trunk_width: 16,
        head_width: 12,
        samples_per_ray: 12,
        stratified: false,
        ..FieldConfig::default()
    }
}

fn loop_config(steps: usize, seed: u64) -> LoopConfig {
    LoopConfig {
        steps,
        batch: 64,
        lr: LrSchedule::new(5e-3, 1.67e-4),
        optimizer: OptimizerKind::SgdMomentum,
        seed,
    }
}

fn sources(size: usize) -> Vec<StyleSource> {
    catalog()[..2]
        .iter()
        .map(|c| StyleSource {
            id: c.id.to_string(),
            image: c.render(size),
        })
        .collect()
}

/// A field, an MLS fitted to its heads, and the style set both styles come from.
fn fitted(styles: &[StyleSource]) -> (Field32, Mls32, StyleSet) {
    let field = Field32::init(field_config(), 0).unwrap();
    let enc = ToyEncoder::new(0);
    let mut set = StyleSet::new(enc.dim(), 0.05);
    for s in styles {
        set.push(StyleEntry {
            id: s.id.clone(),
            modality: Modality::Image,
            payload: String::new(),
            feature: StyleFeature::image(enc.encode_image(&s.image)),
            head: None,
        })
        .unwrap();
    }
    let cfg = MlsConfig {
        backbone_width: 24,
        head_width: 24,
    };
    let mut mls = Mls32::init(cfg, set.dim, &field.config, &set.ids(), 0).unwrap();
    let feats: Vec<(String, Vec<f32>)> = set
        .entries
        .iter()
        .map(|e| (e.id.clone(), e.feature.vector.iter().map(|v| *v as f32).collect()))
        .collect();
    let pre = MlsPretrainConfig {
        epochs: 600,
        lr: LrSchedule::new(3e-3, 1e-4),
    };
    pretrain_mls(&mut mls, &feats, &pack_heads(&field).values, &pre).unwrap();
    (field, mls, set)
}

fn feature32(set: &StyleSet, id: &str) -> Vec<f32> {
    set.get(id).unwrap().feature.vector.iter().map(|v| *v as f32).collect()
}

#[test]
fn cached_supervision_is_reused_and_invalidated() {
    let scene = generate_synthetic_scene(0, 4, 16).unwrap();
    let root = tempfile::tempdir().unwrap();
    let opts = SupervisionOptions {
        cache_root: Some(root.path().to_path_buf()),
        ..SupervisionOptions::default()
    };
    let styles = sources(24);
    let codec = FeatureExtractor::seeded(0);
    let (first, stats) = pregenerate_supervision(&scene, &styles, &codec, &opts).unwrap();
    assert_eq!((stats.hits, stats.misses), (0, 2));
    assert_eq!(first.len(), 2);
    assert!(first.iter().all(|p| p.entries.len() == 4));

    let (second, stats) = pregenerate_supervision(&scene, &styles, &codec, &opts).unwrap();
    assert_eq!((stats.hits, stats.misses), (2, 0));
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(a.reference, b.reference);
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert_eq!(x.stylized, y.stylized);
            assert_eq!(x.reconstructed, y.reconstructed);
            assert_eq!(x.mask.as_ref().map(|m| &m.values), y.mask.as_ref().map(|m| &m.values));
        }
    }
    let uncached = pregenerate_supervision(&scene, &styles, &codec, &SupervisionOptions::default())
        .unwrap()
        .0;
    assert_eq!(uncached[1].entries[2].reconstructed, second[1].entries[2].reconstructed);

    let (_, stats) = pregenerate_supervision(&scene, &styles, &FeatureExtractor::seeded(1), &opts).unwrap();
    assert_eq!((stats.hits, stats.misses), (0, 2));
}

#[test]
fn corrupt_cache_entries_are_rebuilt_with_a_warning() {
    let scene = generate_synthetic_scene(1, 3, 16).unwrap();
    let root = tempfile::tempdir().unwrap();
    let opts = SupervisionOptions {
        cache_root: Some(root.path().to_path_buf()),
        ..SupervisionOptions::default()
    };
    let styles = sources(24);
    let codec = FeatureExtractor::seeded(0);
    let (fresh, _) = pregenerate_supervision(&scene, &styles, &codec, &opts).unwrap();
    let dir = cache_dir(root.path(), &scene.scene_id, &styles[0].id);
    std::fs::write(dir.join("r001.png"), b"not a png").unwrap();

    let (again, stats) = pregenerate_supervision(&scene, &styles, &codec, &opts).unwrap();
    assert_eq!((stats.hits, stats.misses, stats.corrupt), (1, 1, 1));
    assert_eq!(stats.warnings.len(), 1);
    assert_eq!(again[0].entries[1].reconstructed, fresh[0].entries[1].reconstructed);
    let (_, stats) = pregenerate_supervision(&scene, &styles, &codec, &opts).unwrap();
    assert_eq!((stats.hits, stats.corrupt), (2, 0));
}

#[test]
fn zero_iterations_leave_the_mls_unchanged() {
    let scene = generate_synthetic_scene(0, 2, 12).unwrap();
    let styles = sources(16);
    let (field, mls, set) = fitted(&styles);
    let img = ImageBuffer::filled(12, 12, [0.3; 3]);
    let task = StyleTask {
        id: styles[0].id.clone(),
        head: styles[0].id.clone(),
        feature: feature32(&set, &styles[0].id),
        targets: vec![&img, &img],
    };
    let out = train_tasks(&field, &mls, &scene, &[task], &loop_config(0, 0)).unwrap();
    assert_eq!(out.mls, mls);
    assert!(out.log.is_empty());
}

#[test]
fn base_render_targets_stay_matched() {
    let scene = generate_synthetic_scene(0, 2, 12).unwrap();
    let styles = sources(16);
    let (field, mls, set) = fitted(&styles);
    let renders: Vec<ImageBuffer> = scene.views.iter().map(|v| render_base(&field, &v.camera)).collect();
    let task = StyleTask {
        id: styles[0].id.clone(),
        head: styles[0].id.clone(),
        feature: feature32(&set, &styles[0].id),
        targets: renders.iter().collect(),
    };
    let out = train_tasks(&field, &mls, &scene, &[task], &loop_config(200, 0)).unwrap();
    let mscl = out.final_mscl[&styles[0].id];
    assert!(mscl < 1e-3, "mscl {mscl}");
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

#[test]
fn stylization_loss_goes_down_and_is_reproducible() {
    let scene = generate_synthetic_scene(0, 3, 16).unwrap();
    let styles = sources(24);
    let (field, mls, set) = fitted(&styles);
    let (packs, _) = pregenerate_supervision(
        &scene,
        &styles,
        &FeatureExtractor::seeded(0),
        &SupervisionOptions::default(),
    )
    .unwrap();
    let tasks: Vec<StyleTask<'_, f32>> = styles
        .iter()
        .zip(&packs)
        .map(|(s, p)| StyleTask::from_pack(&s.id, &s.id, &set.get(&s.id).unwrap().feature.vector, p, true))
        .collect();
    let cfg = loop_config(600, 3);
    let out = train_tasks(&field, &mls, &scene, &tasks, &cfg).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|r| r.mscl).collect();
    let ma = moving_average(&losses, 100);
    assert!(
        ma.last().unwrap() < &(0.7 * ma[0]),
        "{} -> {}",
        ma[0],
        ma.last().unwrap()
    );
    assert!(out.log.iter().all(|r| styles.iter().any(|s| s.id == r.style_id)));

    let again = train_tasks(&field, &mls, &scene, &tasks, &cfg).unwrap();
    assert_eq!(again.mls, out.mls);

    let cam = &scene.views[1].camera;
    let f = feature32(&set, &styles[1].id);
    let a = render_with_heads(&field, &out.mls, &f, &styles[1].id, cam).unwrap();
    let b = render_with_heads(&field, &out.mls, &f, &styles[1].id, cam).unwrap();
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn incremental_styles_leave_existing_renders_untouched() {
    let scene = generate_synthetic_scene(2, 2, 12).unwrap();
    let all: Vec<StyleSource> = catalog()[..3]
        .iter()
        .map(|c| StyleSource {
            id: c.id.to_string(),
            image: c.render(16),
        })
        .collect();
    let (field, mls, set) = fitted(&all[..2]);
    let (packs, _) = pregenerate_supervision(
        &scene,
        &all,
        &FeatureExtractor::seeded(0),
        &SupervisionOptions::default(),
    )
    .unwrap();

    // a known style is refused without training
    let known = set.get(&all[0].id).unwrap().clone();
    let dup = StyleEntry {
        id: "again".into(),
        ..known
    };
    let out = incremental_in_memory(&field, &mls, &scene, &set, &dup, &packs[0], true, &loop_config(10, 0)).unwrap();
    assert!(matches!(out, IncrementalOutcome::Refused { ref matched, .. } if *matched == all[0].id));

    let enc = ToyEncoder::new(0);
    let entry = StyleEntry {
        id: all[2].id.clone(),
        modality: Modality::Image,
        payload: String::new(),
        feature: StyleFeature::image(enc.encode_image(&all[2].image)),
        head: None,
    };
    let cam = &scene.views[0].camera;
    let before: Vec<String> = all[..2]
        .iter()
        .map(|s| {
            render_with_heads(&field, &mls, &feature32(&set, &s.id), &s.id, cam)
                .unwrap()
                .checksum()
        })
        .collect();
    let out = incremental_in_memory(&field, &mls, &scene, &set, &entry, &packs[2], true, &loop_config(50, 0)).unwrap();
    let IncrementalOutcome::Trained { head, mls: grown, .. } = out else {
        panic!("expected training");
    };
    assert_eq!(head, all[2].id);
    assert!(grown.backbone_frozen);
    assert_eq!(grown.backbone, mls.backbone);
    for (s, want) in all[..2].iter().zip(&before) {
        assert_eq!(grown.head(&s.id), mls.head(&s.id));
        let got = render_with_heads(&field, &grown, &feature32(&set, &s.id), &s.id, cam).unwrap();
        assert_eq!(&got.checksum(), want);
    }
}

#[test]
fn payload_queries_route_to_the_matching_style() {
    let styles = sources(16);
    let (_, mls, set) = fitted(&styles);
    let enc = ToyEncoder::new(0);
    let by_id = resolve_style(&StyleQuery::Id(styles[1].id.clone()), &set, &mls, &enc, None).unwrap();
    let by_image = resolve_style(&StyleQuery::Image(styles[1].image.clone()), &set, &mls, &enc, None).unwrap();
    assert_eq!(by_id, by_image);
    assert_eq!(by_id.1, styles[1].id);

    let stranger = catalog()[6].render(16);
    let err = resolve_style(&StyleQuery::Image(stranger), &set, &mls, &enc, None).unwrap_err();
    assert!(matches!(err, Error::UnknownStyle { .. }));
    let err = resolve_style(&StyleQuery::Text("dark ink".into()), &set, &mls, &enc, None).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    let err = resolve_style(&StyleQuery::Id("nope".into()), &set, &mls, &enc, None).unwrap_err();
    assert!(matches!(err, Error::Lookup(_)));
}

fn write_inputs(dir: &Path, scene: &SceneBundle) -> TrainConfig {
    let scene_dir = dir.join("scene");
    save_scene(scene, &scene_dir).unwrap();
    let mut records = Vec::new();
    for c in &catalog()[..2] {
        c.render(16).save_png(&dir.join(format!("{}.png", c.id))).unwrap();
        records.push(StyleRecord {
            id: c.id.to_string(),
            modality: Modality::Image,
            payload: format!("{}.png", c.id),
            feature: None,
        });
    }
    save_style_records(&dir.join("styles.json"), &records).unwrap();
    let mut cfg = TrainConfig {
        scene: Some(scene_dir),
        styles: Some(dir.join("styles.json")),
        run: dir.join("run"),
        iters: 40,
        batch: 32,
        style_size: 16,
        field: field_config(),
        mls: MlsConfig {
            backbone_width: 16,
            head_width: 16,
        },
        cache_root: Some(dir.join("cache")),
        ..TrainConfig::default()
    };
    cfg.nerf.steps = 30;
    cfg.nerf.batch = 64;
    cfg.mls_pretrain.epochs = 20;
    cfg
}

#[test]
fn run_stages_check_preconditions_and_keep_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate_synthetic_scene(0, 2, 12).unwrap();
    let cfg = write_inputs(tmp.path(), &scene);

    let err = stylization_train(&cfg).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));
    let err = render_run(&cfg, &StyleQuery::Id("starry_night".into()), 0).unwrap_err();
    assert!(err.to_string().contains("MLS checkpoint missing"), "{err}");

    pretrain_run(&cfg).unwrap();
    let paths = cfg.paths();
    let field_hash = file_hash(&paths.field()).unwrap();
    let err = render_run(&cfg, &StyleQuery::Id("starry_night".into()), 0).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)));

    let (_, manifest) = stylization_train(&cfg).unwrap();
    assert_eq!(file_hash(&paths.field()).unwrap(), field_hash);
    assert_eq!(manifest.inputs["field"], field_hash);
    assert_eq!(manifest.loss_records, 40);
    assert_eq!(read_loss_log(&paths.loss_log()).unwrap().len(), 40);
    assert_eq!(manifest.heads["water_lilies"], "water_lilies");

    let (img, path) = render_run(&cfg, &StyleQuery::Id("water_lilies".into()), 1).unwrap();
    assert!(path.exists());
    assert_eq!(img.dims(), scene.dims());
    let err = render_run(&cfg, &StyleQuery::Id("water_lilies".into()), 7).unwrap_err();
    assert!(matches!(err, Error::Argument(_)));
}

#[test]
fn shared_head_runs_route_every_style_through_one_head() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate_synthetic_scene(0, 2, 12).unwrap();
    let cfg = TrainConfig {
        shared_head: true,
        ..write_inputs(tmp.path(), &scene)
    };
    let manifest = pretrain_run(&cfg).unwrap();
    assert!(manifest.heads.values().all(|h| h == SHARED_HEAD));
    let mls = Mls32::load(&cfg.paths().mls_pretrained()).unwrap();
    assert_eq!(mls.head_ids(), vec![SHARED_HEAD.to_string()]);
}
