use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mmstyle::plot::{moving_average, save_line_chart, save_paired_histogram, Series};
use mmstyle::scene::{generate_synthetic_scene, save_scene};
use mmstyle::style::{catalog, save_style_records, Modality, StyleRecord};
use mmstyle::trainer::{
    evaluate_run, incremental_train, load_cfcm_report, pregen_run, pretrain_run, read_loss_log, render_run,
    stylization_train, IncrementalOutcome, StyleQuery, TrainConfig, CACHE_ENV,
};
use mmstyle::{Error, ImageBuffer, Result};
use serde_json::Value;

use crate::{Cli, Command, Common};

/// Overlays `top` onto `base`, recursing into objects.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

fn read_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, "config", e.to_string()))
}

/// Flags over `--config` over the run's saved config over defaults, then
/// the cache environment variable.
pub fn resolve_config(c: &Common) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let explicit = c.config.as_ref().map(|p| read_value(p)).transpose()?;
    let run = c
        .run
        .clone()
        .or_else(|| {
            explicit
                .as_ref()
                .and_then(|v| v.get("run"))
                .and_then(Value::as_str)
                .map(PathBuf::from)
        })
        .unwrap_or_else(|| TrainConfig::default().run);
    let saved = run.join("config.json");
    if saved.exists() {
        merge(&mut value, read_value(&saved)?);
    }
    if let Some(v) = explicit {
        merge(&mut value, v);
    }
    let source = c.config.clone().unwrap_or(saved);
    let mut cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| Error::load(&source, "config", e.to_string()))?;
    cfg.run = run;
    if let Some(v) = &c.scene {
        cfg.scene = Some(v.clone());
    }
    if let Some(v) = &c.styles {
        cfg.styles = Some(v.clone());
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.iters {
        cfg.iters = v;
    }
    if let Some(v) = c.batch {
        cfg.batch = v;
    }
    if let Some(v) = c.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = c.jobs {
        cfg.jobs = v;
    }
    if let Some(root) = std::env::var_os(CACHE_ENV) {
        cfg.cache_root = Some(PathBuf::from(root));
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if cfg.jobs > 0 {
        // only fails when a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global();
    }
    let out = cli.common.out.clone();
    match cli.command {
        Command::GenScene {
            views,
            res,
            with_styles,
            with_text_styles,
        } => gen_scene(&cfg, out, views, res, with_styles, with_text_styles),
        Command::Pretrain => {
            let m = pretrain_run(&cfg)?;
            println!(
                "pretrained field, MLS and correction network in {:.1}s -> {}",
                m.timings.get("pretrain").copied().unwrap_or(0.0),
                cfg.run.display()
            );
            Ok(())
        }
        Command::Pregen => {
            let (packs, stats) = pregen_run(&cfg)?;
            for w in &stats.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} styles: {} cache hits, {} regenerated (reference view {})",
                packs.len(),
                stats.hits,
                stats.misses,
                packs.first().map(|p| p.reference).unwrap_or(0)
            );
            Ok(())
        }
        Command::Train => {
            let (_, m) = stylization_train(&cfg)?;
            for (id, l) in &m.final_mscl {
                println!("{id}: final loss {l:.6}");
            }
            println!(
                "{} steps logged to {}",
                m.loss_records,
                cfg.paths().loss_log().display()
            );
            Ok(())
        }
        Command::AddStyle { id, payload } => {
            let (modality, text) = match (payload.image, payload.text) {
                (Some(p), _) => (Modality::Image, absolute(&p)?.to_string_lossy().into_owned()),
                (None, Some(t)) => (Modality::Text, t),
                (None, None) => unreachable!("clap requires one payload"),
            };
            let record = StyleRecord {
                id,
                modality,
                payload: text,
                feature: None,
            };
            match incremental_train(&cfg, &record, Path::new("styles.json"))? {
                IncrementalOutcome::Refused { matched, distance } => {
                    println!("refused: matches existing style '{matched}' at distance {distance:.4}")
                }
                IncrementalOutcome::Trained {
                    head,
                    nearest,
                    distance,
                    outcome,
                    ..
                } => println!(
                    "trained head '{head}' from '{nearest}' (distance {distance:.4}) in {:.1}s, final loss {:.6}",
                    outcome.seconds,
                    outcome.final_mscl.get(&head).copied().unwrap_or(f64::NAN)
                ),
            }
            Ok(())
        }
        Command::Render {
            style_id,
            payload,
            view,
        } => {
            let query = match (style_id, payload.image, payload.text) {
                (Some(id), _, _) => StyleQuery::Id(id),
                (None, Some(p), _) => StyleQuery::Image(ImageBuffer::load_png(&p)?),
                (None, None, Some(t)) => StyleQuery::Text(t),
                (None, None, None) => return Err(Error::Argument("render needs --style-id, --image or --text".into())),
            };
            let (img, path) = render_run(&cfg, &query, view)?;
            let path = match out {
                Some(o) => {
                    img.save_png(&o)?;
                    o
                }
                None => path,
            };
            println!("{}", path.display());
            Ok(())
        }
        Command::Evaluate => {
            let r = evaluate_run(&cfg)?;
            let paths = cfg.paths();
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            println!("written to {}", paths.metrics().display());
            Ok(())
        }
        Command::Plot => plot(&cfg, out),
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

fn gen_scene(
    cfg: &TrainConfig,
    out: Option<PathBuf>,
    views: usize,
    res: usize,
    with_styles: usize,
    with_text_styles: usize,
) -> Result<()> {
    let out = out.ok_or_else(|| Error::Argument("gen-scene needs --out".into()))?;
    let scene = generate_synthetic_scene(cfg.seed, views, res)?;
    save_scene(&scene, &out)?;
    println!(
        "scene '{}' with {views} views at {res}x{res} -> {}",
        scene.scene_id,
        out.display()
    );
    if with_styles + with_text_styles == 0 {
        return Ok(());
    }
    let entries = catalog();
    let mut records = Vec::new();
    let spread = |n: usize, k: usize, offset: usize| (offset + k * entries.len() / n.max(1)) % entries.len();
    for k in 0..with_styles {
        let e = &entries[spread(with_styles, k, 0)];
        let rel = format!("styles/{}.png", e.id);
        e.render(cfg.style_size).save_png(&out.join(&rel))?;
        records.push(StyleRecord {
            id: e.id.clone(),
            modality: Modality::Image,
            payload: rel,
            feature: None,
        });
    }
    for k in 0..with_text_styles {
        let e = &entries[spread(with_text_styles, k, 3)];
        let prompt = e.prompts().pop().expect("every entry has a prompt");
        records.push(StyleRecord {
            id: format!("text_{}", e.id),
            modality: Modality::Text,
            payload: prompt,
            feature: None,
        });
    }
    let path = out.join("styles.json");
    save_style_records(&path, &records)?;
    println!("{} styles -> {}", records.len(), path.display());
    Ok(())
}

fn plot(cfg: &TrainConfig, out: Option<PathBuf>) -> Result<()> {
    let paths = cfg.paths();
    let dir = out.unwrap_or_else(|| paths.plots());
    let mut written = Vec::new();

    if paths.loss_log().exists() {
        let mut by_style: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in read_loss_log(&paths.loss_log())? {
            let e = by_style.entry(r.style_id).or_default();
            e.0.push(r.step as f64);
            e.1.push(r.mscl);
        }
        let series: Vec<Series> = by_style
            .into_iter()
            .map(|(name, (x, y))| Series {
                name,
                points: x.into_iter().zip(moving_average(&y, 50)).collect(),
            })
            .collect();
        let p = dir.join("stylization_loss.png");
        save_line_chart(&p, &series, true)?;
        written.push(p);
    }
    if paths.pretrain_log().exists() {
        let text = std::fs::read_to_string(paths.pretrain_log()).map_err(|e| Error::io(paths.pretrain_log(), e))?;
        let y: Vec<f64> = text
            .lines()
            .skip(1)
            .filter_map(|l| l.split(',').nth(1)?.parse().ok())
            .collect();
        let series = [Series {
            name: "pretrain".into(),
            points: moving_average(&y, 50)
                .into_iter()
                .enumerate()
                .map(|(i, v)| (i as f64, v))
                .collect(),
        }];
        let p = dir.join("pretrain_loss.png");
        save_line_chart(&p, &series, true)?;
        written.push(p);
    }
    if paths.cfcm_report().exists() {
        let r = load_cfcm_report(&paths)?;
        let p = dir.join("cfcm_similarity.png");
        save_paired_histogram(&p, &r.val_similarity_before, &r.val_similarity_after, 20)?;
        written.push(p);
        println!(
            "validation cosine similarity: {:.4} before, {:.4} after correction",
            r.mean_before(),
            r.mean_after()
        );
    }
    if written.is_empty() {
        return Err(Error::Precondition(format!(
            "nothing to plot in {} (no loss logs or correction report)",
            paths.root.display()
        )));
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}
