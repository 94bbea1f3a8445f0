//! Pipeline orchestration: pretraining, supervision pregeneration,
//! stylization and incremental runs, rendering and evaluation, all rooted
//! in one run directory.

mod evaluate;
mod stylize;
mod supervision;

pub use evaluate::{evaluate_packs, test_sequence, EvalReport, EvalStyle, PairMetrics, StyleMetrics, TestSequence};
pub use stylize::{full_mscl, render_with_heads, run_stylization, stylized_field, LoopConfig, LossRecord, StyleTask};
pub use supervision::{
    cache_dir, compute_scene_flows, pregenerate_supervision, CacheStats, FlowSource, SceneFlows, StyleSource,
    SupervisionOptions,
};

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consistency::{SupervisionPack, DEFAULT_TAU};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::field::{pretrain_nerf, render_image, FieldConfig, FieldParams, PretrainConfig, PretrainReport};
use crate::image_buf::{hex, ImageBuffer};
use crate::mls::{add_style_incremental, pack_heads, pretrain_mls, MlsConfig, MlsParams, MlsPretrainConfig};
use crate::nn::{LrSchedule, OptimizerKind};
use crate::scalar::Real;
use crate::scene::{load_scene, CameraModel, SceneBundle};
use crate::style::{
    build_style_set, correct_text_feature, encode_record, load_style_records, match_style, pair_corpus, payload_path,
    save_style_records, text_style_image, train_cfcm, CfcmConfig, CfcmParams, CfcmReport, Modality, StyleEncoder,
    StyleEntry, StyleFeature, StyleMatch, StyleRecord, StyleSet, ToyEncoder, DEFAULT_THRESHOLD,
};
use crate::stylizer::{ExtractorKind, FeatureExtractor};

/// Head id used when every style shares one head.
pub const SHARED_HEAD: &str = "shared";
/// Environment variable overriding the supervision cache root.
pub const CACHE_ENV: &str = "MMSTYLE_CACHE";

/// Which codec stylizes views and scores perceptual distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub kind: ExtractorKind,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: ExtractorKind::SeededConv,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn build(&self) -> FeatureExtractor {
        match self.kind {
            ExtractorKind::SeededConv => FeatureExtractor::seeded(self.seed),
            ExtractorKind::Identity => FeatureExtractor::identity(),
        }
    }

    /// Name reported next to perceptual numbers.
    pub fn backend(&self) -> &'static str {
        match self.kind {
            ExtractorKind::SeededConv => "seeded_conv",
            ExtractorKind::Identity => "identity",
        }
    }
}

/// Photometric pretraining schedule; the field architecture and the seed
/// come from [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerfSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
}

impl Default for NerfSchedule {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            steps: p.steps,
            batch: p.batch,
            lr: p.lr,
            optimizer: p.optimizer,
        }
    }
}

/// Everything a run needs; serialized as `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scene: Option<PathBuf>,
    /// Style manifest (`styles.json`).
    pub styles: Option<PathBuf>,
    pub run: PathBuf,
    pub seed: u64,
    /// Stylization iterations.
    pub iters: usize,
    /// Rays per stylization step.
    pub batch: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    /// Cosine distance below which a style counts as known.
    pub threshold: f64,
    /// Forward-backward flow threshold in pixels.
    pub tau: f64,
    /// Worker threads; `0` uses every core.
    pub jobs: usize,
    /// Train on reconstructed targets; `false` uses the per-view stylizations.
    pub consistent_supervision: bool,
    /// Route every style through one head.
    pub shared_head: bool,
    pub codec: CodecConfig,
    pub encoder_seed: u64,
    /// Side length of style images synthesized for text styles.
    pub style_size: usize,
    pub field: FieldConfig,
    pub nerf: NerfSchedule,
    pub mls: MlsConfig,
    pub mls_pretrain: MlsPretrainConfig,
    pub cfcm: CfcmConfig,
    /// Extra synthetic pairs for the correction corpus.
    pub bias_pairs: usize,
    /// Supervision cache root; `None` disables caching.
    pub cache_root: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scene: None,
            styles: None,
            run: PathBuf::from("runs/default"),
            seed: 0,
            iters: 5000,
            batch: 1024,
            lr: LrSchedule::new(5e-3, 1.67e-4),
            optimizer: OptimizerKind::SgdMomentum,
            threshold: DEFAULT_THRESHOLD,
            tau: DEFAULT_TAU,
            jobs: 0,
            consistent_supervision: true,
            shared_head: false,
            codec: CodecConfig::default(),
            encoder_seed: 0,
            style_size: 64,
            field: FieldConfig::default(),
            nerf: NerfSchedule::default(),
            mls: MlsConfig::default(),
            mls_pretrain: MlsPretrainConfig::default(),
            cfcm: CfcmConfig::default(),
            bias_pairs: 200,
            cache_root: Some(PathBuf::from("cache")),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr.final_ > 0.0 && self.lr.init >= self.lr.final_) {
            return Err(Error::Config("learning rates need init >= final > 0".into()));
        }
        if !(self.threshold > 0.0 && self.threshold <= 2.0) {
            return Err(Error::Config("threshold must lie in (0, 2]".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.style_size < 8 {
            return Err(Error::Config("style_size must be at least 8".into()));
        }
        self.field.validate()
    }

    /// Reads a JSON config; absent fields keep their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn scene_path(&self) -> Result<&Path> {
        self.scene
            .as_deref()
            .ok_or_else(|| Error::Config("no scene given (--scene)".into()))
    }

    pub fn styles_path(&self) -> Result<&Path> {
        self.styles
            .as_deref()
            .ok_or_else(|| Error::Config("no style manifest given (--styles)".into()))
    }

    pub fn encoder(&self) -> ToyEncoder {
        ToyEncoder::new(self.encoder_seed)
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            steps: self.iters,
            batch: self.batch,
            lr: self.lr,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            field: self.field.clone(),
            steps: self.nerf.steps,
            batch: self.nerf.batch,
            lr: self.nerf.lr,
            optimizer: self.nerf.optimizer,
            seed: self.seed,
        }
    }

    pub fn supervision_options(&self) -> SupervisionOptions {
        SupervisionOptions {
            tau: self.tau,
            cache_root: self.cache_root.clone(),
        }
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths::new(&self.run)
    }
}

/// File layout of a run directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn loss_log(&self) -> PathBuf {
        self.root.join("loss.csv")
    }

    /// The run's own copy of the style records, payloads made absolute.
    pub fn styles(&self) -> PathBuf {
        self.root.join("styles.json")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.bin"))
    }

    pub fn field(&self) -> PathBuf {
        self.checkpoint("field")
    }

    pub fn mls_pretrained(&self) -> PathBuf {
        self.checkpoint("mls_pretrained")
    }

    pub fn mls(&self) -> PathBuf {
        self.checkpoint("mls")
    }

    pub fn cfcm(&self) -> PathBuf {
        self.checkpoint("cfcm")
    }

    pub fn cfcm_report(&self) -> PathBuf {
        self.root.join("cfcm_report.json")
    }

    pub fn pretrain_log(&self) -> PathBuf {
        self.root.join("pretrain_loss.csv")
    }

    pub fn renders(&self) -> PathBuf {
        self.root.join("renders")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn metrics_pairs(&self) -> PathBuf {
        self.root.join("metrics_pairs.csv")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

/// Config snapshot, input hashes and timings of a run. Losses live in
/// `loss.csv`, which is only ever appended to.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    /// Input name to hex SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Stage name to wall-clock seconds of its latest execution.
    pub timings: BTreeMap<String, f64>,
    pub loss_log: String,
    pub loss_records: usize,
    /// Full-image loss per style at the end of its latest training.
    pub final_mscl: BTreeMap<String, f64>,
    /// Style id to the head serving it.
    pub heads: BTreeMap<String, String>,
    pub cache: Option<CacheStats>,
}

impl RunManifest {
    pub fn load_or_new(paths: &RunPaths, config: &TrainConfig) -> Self {
        std::fs::read_to_string(paths.manifest())
            .ok()
            .and_then(|t| serde_json::from_str::<Self>(&t).ok())
            .map(|mut m| {
                m.config = config.clone();
                m
            })
            .unwrap_or_else(|| Self {
                config: config.clone(),
                loss_log: "loss.csv".into(),
                ..Self::default()
            })
    }

    pub fn save(&self, paths: &RunPaths) -> Result<()> {
        write_json(&paths.manifest(), self)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    write_atomic(path, text.as_bytes())
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Precondition(format!("{what} missing ({})", path.display())))
    }
}

/// Appends records to `loss.csv`, writing the header on creation.
pub fn append_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let fresh = !path.exists();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r).map_err(|e| Error::Format(format!("loss log: {e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Style image a record stylizes views with: the image payload itself, or a
/// synthesized stand-in for text.
pub fn style_image(record: &StyleRecord, manifest: &Path, size: usize) -> Result<ImageBuffer> {
    match record.modality {
        Modality::Image => ImageBuffer::load_png(&payload_path(manifest, &record.payload)),
        Modality::Text => Ok(text_style_image(&record.payload, size)),
    }
}

pub fn style_sources(records: &[StyleRecord], manifest: &Path, size: usize) -> Result<Vec<StyleSource>> {
    records
        .iter()
        .map(|r| {
            Ok(StyleSource {
                id: r.id.clone(),
                image: style_image(r, manifest, size)?,
            })
        })
        .collect()
}

/// Head serving `id`: its own, or the shared one.
pub fn head_for<T: Real>(mls: &MlsParams<T>, id: &str) -> Result<String> {
    if mls.head_index(id).is_some() {
        Ok(id.to_string())
    } else if mls.head_index(SHARED_HEAD).is_some() {
        Ok(SHARED_HEAD.to_string())
    } else {
        Err(Error::Lookup(format!("no prediction head for style '{id}'")))
    }
}

fn f32_feature(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Outputs of the pretraining stage.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub field: FieldParams<f32>,
    pub field_report: PretrainReport,
    pub cfcm: Option<(CfcmParams, CfcmReport)>,
    pub set: StyleSet,
    pub mls: MlsParams<f32>,
    pub mls_losses: Vec<f64>,
}

/// Fits the field, the correction network (when text styles exist), and
/// the MLS heads to the field's own head parameters.
pub fn pretrain_models(
    scene: &SceneBundle,
    records: &[StyleRecord],
    manifest: &Path,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    cfg.validate()?;
    let (field, field_report) = pretrain_nerf::<f32>(scene, &cfg.pretrain_config())?;
    let encoder = cfg.encoder();
    let cfcm = if records.iter().any(|r| r.modality == Modality::Text) {
        let corpus = pair_corpus(&encoder, cfg.bias_pairs, cfg.seed);
        let ccfg = CfcmConfig {
            seed: cfg.seed,
            ..cfg.cfcm.clone()
        };
        Some(train_cfcm(&corpus.pairs, &ccfg)?)
    } else {
        None
    };
    let set = build_style_set(records, manifest, &encoder, cfcm.as_ref().map(|c| &c.0), cfg.threshold)?;
    let heads: Vec<String> = if cfg.shared_head {
        vec![SHARED_HEAD.to_string()]
    } else {
        set.ids()
    };
    let mut mls = MlsParams::<f32>::init(cfg.mls.clone(), set.dim, &field.config, &heads, cfg.seed)?;
    let targets: Vec<(String, Vec<f32>)> = set
        .entries
        .iter()
        .map(|e| Ok((head_for(&mls, &e.id)?, f32_feature(&e.feature.vector))))
        .collect::<Result<_>>()?;
    let base = pack_heads(&field).values;
    let mls_losses = pretrain_mls(&mut mls, &targets, &base, &cfg.mls_pretrain)?;
    Ok(Pretrained {
        field,
        field_report,
        cfcm,
        set,
        mls,
        mls_losses,
    })
}

/// Loop tasks for every style of `set`, pairing each with its pack.
pub fn build_tasks<'a>(
    set: &StyleSet,
    packs: &'a [SupervisionPack],
    mls: &MlsParams<f32>,
    consistent: bool,
) -> Result<Vec<StyleTask<'a, f32>>> {
    set.entries
        .iter()
        .map(|e| {
            let pack = packs
                .iter()
                .find(|p| p.style_id == e.id)
                .ok_or_else(|| Error::Precondition(format!("no supervision for style '{}'", e.id)))?;
            Ok(StyleTask::from_pack(
                &e.id,
                &head_for(mls, &e.id)?,
                &e.feature.vector,
                pack,
                consistent,
            ))
        })
        .collect()
}

/// Result of an in-memory stylization run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub mls: MlsParams<f32>,
    pub log: Vec<LossRecord>,
    /// Full-image loss per style after training.
    pub final_mscl: BTreeMap<String, f64>,
    /// Seconds spent in the loop.
    pub seconds: f64,
}

/// Runs the loop on `tasks` starting from `mls`, then scores every task.
pub fn train_tasks(
    field: &FieldParams<f32>,
    mls: &MlsParams<f32>,
    scene: &SceneBundle,
    tasks: &[StyleTask<'_, f32>],
    cfg: &LoopConfig,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut mls = mls.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    run_stylization(field, &mut mls, scene, tasks, cfg, &mut |r| {
        log.push(r.clone());
        Ok(())
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let mut final_mscl = BTreeMap::new();
    for t in tasks {
        final_mscl.insert(t.id.clone(), full_mscl(field, &mls, scene, t)?);
    }
    Ok(TrainOutcome {
        mls,
        log,
        final_mscl,
        seconds,
    })
}

/// Everything the later stages load back from a run directory.
pub struct RunState {
    pub config: TrainConfig,
    pub paths: RunPaths,
    pub scene: SceneBundle,
    pub records: Vec<StyleRecord>,
    pub field: FieldParams<f32>,
    pub cfcm: Option<CfcmParams>,
    pub set: StyleSet,
}

impl RunState {
    /// Loads the scene, the run's style records, the field and, when any
    /// text style exists, the correction network.
    pub fn open(cfg: &TrainConfig) -> Result<Self> {
        let paths = cfg.paths();
        require(&paths.field(), "pretrained field checkpoint")?;
        require(&paths.styles(), "run style registry")?;
        let scene = load_scene(cfg.scene_path()?)?;
        let records = load_style_records(&paths.styles())?;
        let field = FieldParams::<f32>::load(&paths.field())?;
        let cfcm = if records.iter().any(|r| r.modality == Modality::Text) {
            require(&paths.cfcm(), "CFCM checkpoint")?;
            Some(CfcmParams::load(&paths.cfcm())?)
        } else {
            None
        };
        let set = build_style_set(&records, &paths.styles(), &cfg.encoder(), cfcm.as_ref(), cfg.threshold)?;
        Ok(Self {
            config: cfg.clone(),
            paths,
            scene,
            records,
            field,
            cfcm,
            set,
        })
    }

    pub fn sources(&self) -> Result<Vec<StyleSource>> {
        style_sources(&self.records, &self.paths.styles(), self.config.style_size)
    }
}

/// Records with image payloads made absolute, so the run no longer depends
/// on where the original manifest lives.
fn absolute_records(records: &[StyleRecord], manifest: &Path) -> Result<Vec<StyleRecord>> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.modality == Modality::Image {
                let p = payload_path(manifest, &r.payload);
                let p = std::fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
                r.payload = p.to_string_lossy().into_owned();
            }
            Ok(r)
        })
        .collect()
}

/// `pretrain` stage: writes the field, CFCM (if needed) and pretrained MLS
/// checkpoints plus the run's config and style registry.
pub fn pretrain_run(cfg: &TrainConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let paths = cfg.paths();
    let scene_dir = cfg.scene_path()?;
    let styles_path = cfg.styles_path()?;
    let scene = load_scene(scene_dir)?;
    let records = absolute_records(&load_style_records(styles_path)?, styles_path)?;
    let start = Instant::now();
    let p = pretrain_models(&scene, &records, styles_path, cfg)?;
    let seconds = start.elapsed().as_secs_f64();

    std::fs::create_dir_all(&paths.root).map_err(|e| Error::io(&paths.root, e))?;
    write_json(&paths.config(), cfg)?;
    save_style_records(&paths.styles(), &records)?;
    p.field.save(&paths.field())?;
    p.mls.save(&paths.mls_pretrained())?;
    if let Some((c, report)) = &p.cfcm {
        c.save(&paths.cfcm())?;
        write_json(&paths.cfcm_report(), report)?;
    }
    let mut log = String::from("step,loss\n");
    for (i, l) in p.field_report.losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    write_atomic(&paths.pretrain_log(), log.as_bytes())?;

    let mut m = RunManifest::load_or_new(&paths, cfg);
    m.inputs.insert("scene".into(), scene.content_hash());
    for s in style_sources(&records, styles_path, cfg.style_size)? {
        m.inputs.insert(format!("style/{}", s.id), s.image.checksum());
    }
    m.inputs.insert("field".into(), file_hash(&paths.field())?);
    m.timings.insert("pretrain".into(), seconds);
    for e in &p.set.entries {
        m.heads.insert(e.id.clone(), head_for(&p.mls, &e.id)?);
    }
    m.save(&paths)?;
    Ok(m)
}

/// `pregen` stage: supervision for every registered style.
pub fn pregen_run(cfg: &TrainConfig) -> Result<(Vec<SupervisionPack>, CacheStats)> {
    let state = RunState::open(cfg)?;
    let start = Instant::now();
    let out = pregenerate_supervision(
        &state.scene,
        &state.sources()?,
        &cfg.codec.build(),
        &cfg.supervision_options(),
    )?;
    let mut m = RunManifest::load_or_new(&state.paths, cfg);
    m.timings.insert("pregen".into(), start.elapsed().as_secs_f64());
    m.cache = Some(out.1.clone());
    m.save(&state.paths)?;
    Ok(out)
}

/// `train` stage: the stylization loop over every registered style.
///
/// Needs the pretrained field and MLS (and CFCM when a text style exists);
/// supervision is pregenerated on demand through the cache. The field
/// checkpoint is verified bit-unchanged at exit.
pub fn stylization_train(cfg: &TrainConfig) -> Result<(MlsParams<f32>, RunManifest)> {
    cfg.validate()?;
    let paths = cfg.paths();
    require(&paths.mls_pretrained(), "pretrained MLS checkpoint")?;
    let state = RunState::open(cfg)?;
    let field_hash = file_hash(&paths.field())?;
    let mls = MlsParams::<f32>::load(&paths.mls_pretrained())?;

    let start = Instant::now();
    let (packs, stats) = pregenerate_supervision(
        &state.scene,
        &state.sources()?,
        &cfg.codec.build(),
        &cfg.supervision_options(),
    )?;
    let pregen_seconds = start.elapsed().as_secs_f64();
    let tasks = build_tasks(&state.set, &packs, &mls, cfg.consistent_supervision)?;

    if paths.loss_log().exists() {
        std::fs::remove_file(paths.loss_log()).map_err(|e| Error::io(paths.loss_log(), e))?;
    }
    let start = Instant::now();
    let mut trained = mls.clone();
    let mut pending = Vec::new();
    let mut written = 0usize;
    run_stylization(
        &state.field,
        &mut trained,
        &state.scene,
        &tasks,
        &cfg.loop_config(),
        &mut |r| {
            pending.push(r.clone());
            if pending.len() >= 1000 {
                append_loss_log(&paths.loss_log(), &pending)?;
                written += pending.len();
                pending.clear();
            }
            Ok(())
        },
    )?;
    append_loss_log(&paths.loss_log(), &pending)?;
    written += pending.len();
    let train_seconds = start.elapsed().as_secs_f64();

    if file_hash(&paths.field())? != field_hash {
        return Err(Error::Contract("field checkpoint changed during stylization".into()));
    }
    trained.save(&paths.mls())?;

    let mut m = RunManifest::load_or_new(&paths, cfg);
    write_json(&paths.config(), cfg)?;
    m.timings.insert("pregen".into(), pregen_seconds);
    m.timings.insert("train".into(), train_seconds);
    m.loss_records = written;
    m.cache = Some(stats);
    m.final_mscl.clear();
    for t in &tasks {
        m.final_mscl
            .insert(t.id.clone(), full_mscl(&state.field, &trained, &state.scene, t)?);
        m.heads.insert(t.id.clone(), t.head.clone());
    }
    m.inputs.insert("field".into(), field_hash);
    m.save(&paths)?;
    Ok((trained, m))
}

/// Outcome of an incremental request.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum IncrementalOutcome {
    /// The style is already known; nothing was trained.
    Refused { matched: String, distance: f64 },
    Trained {
        head: String,
        nearest: String,
        distance: f64,
        mls: MlsParams<f32>,
        outcome: TrainOutcome,
    },
}

/// Raw feature of a new record, corrected when it is text.
pub fn new_style_feature(
    record: &StyleRecord,
    manifest: &Path,
    encoder: &dyn StyleEncoder,
    cfcm: Option<&CfcmParams>,
) -> Result<StyleFeature> {
    let f = encode_record(record, manifest, encoder)?;
    if f.modality == Modality::Text {
        let cfcm = cfcm.ok_or_else(|| Error::Precondition("CFCM checkpoint missing for a text style".into()))?;
        return correct_text_feature(&f, cfcm);
    }
    Ok(f)
}

/// Adds one style to a trained MLS: refused when it matches a known style,
/// otherwise a head copied from the nearest style is trained alone with the
/// backbone frozen for `cfg.steps` iterations.
pub fn incremental_in_memory(
    field: &FieldParams<f32>,
    mls: &MlsParams<f32>,
    scene: &SceneBundle,
    set: &StyleSet,
    entry: &StyleEntry,
    pack: &SupervisionPack,
    consistent: bool,
    cfg: &LoopConfig,
) -> Result<IncrementalOutcome> {
    let (nearest, distance) = match match_style(&entry.feature, set)? {
        StyleMatch::Matched { id, distance } => return Ok(IncrementalOutcome::Refused { matched: id, distance }),
        StyleMatch::New { nearest, distance } => (nearest, distance),
    };
    let mut grown = mls.clone();
    let nearest_head = head_for(mls, &nearest)?;
    let head = add_style_incremental(&mut grown, &entry.id, &nearest_head)?;
    let task = StyleTask::from_pack(&entry.id, &head, &entry.feature.vector, pack, consistent);
    let outcome = train_tasks(field, &grown, scene, std::slice::from_ref(&task), cfg)?;
    Ok(IncrementalOutcome::Trained {
        head,
        nearest,
        distance,
        mls: outcome.mls.clone(),
        outcome,
    })
}

/// `add-style` stage: incremental learning of `record` on a trained run.
/// On success the new head is saved and the style joins the run registry.
pub fn incremental_train(cfg: &TrainConfig, record: &StyleRecord, manifest: &Path) -> Result<IncrementalOutcome> {
    cfg.validate()?;
    let paths = cfg.paths();
    require(&paths.mls(), "MLS checkpoint")?;
    let state = RunState::open(cfg)?;
    if state.set.get(&record.id).is_some() {
        return Err(Error::Contract(format!("style id '{}' already exists", record.id)));
    }
    let record = absolute_records(std::slice::from_ref(record), manifest)?.remove(0);
    let feature = new_style_feature(&record, manifest, &cfg.encoder(), state.cfcm.as_ref())?;
    let entry = StyleEntry {
        id: record.id.clone(),
        modality: record.modality,
        payload: record.payload.clone(),
        feature,
        head: None,
    };
    if let StyleMatch::Matched { id, distance } = match_style(&entry.feature, &state.set)? {
        return Ok(IncrementalOutcome::Refused { matched: id, distance });
    }
    let mls = MlsParams::<f32>::load(&paths.mls())?;
    let field_hash = file_hash(&paths.field())?;
    let start = Instant::now();
    let source = StyleSource {
        id: record.id.clone(),
        image: style_image(&record, manifest, cfg.style_size)?,
    };
    let (packs, _) = pregenerate_supervision(
        &state.scene,
        std::slice::from_ref(&source),
        &cfg.codec.build(),
        &cfg.supervision_options(),
    )?;
    let result = incremental_in_memory(
        &state.field,
        &mls,
        &state.scene,
        &state.set,
        &entry,
        &packs[0],
        cfg.consistent_supervision,
        &cfg.loop_config(),
    )?;
    let seconds = start.elapsed().as_secs_f64();
    if let IncrementalOutcome::Trained { head, mls, outcome, .. } = &result {
        if file_hash(&paths.field())? != field_hash {
            return Err(Error::Contract(
                "field checkpoint changed during incremental training".into(),
            ));
        }
        let mut m = RunManifest::load_or_new(&paths, cfg);
        let offset = m.loss_records;
        let shifted: Vec<LossRecord> = outcome
            .log
            .iter()
            .map(|r| LossRecord {
                step: r.step + offset,
                ..r.clone()
            })
            .collect();
        append_loss_log(&paths.loss_log(), &shifted)?;
        mls.save(&paths.mls())?;
        let mut records = state.records.clone();
        records.push(record.clone());
        save_style_records(&paths.styles(), &records)?;
        m.loss_records += shifted.len();
        m.timings.insert(format!("add-style/{}", record.id), seconds);
        m.final_mscl.extend(outcome.final_mscl.clone());
        m.heads.insert(record.id.clone(), head.clone());
        m.inputs.insert(format!("style/{}", record.id), source.image.checksum());
        m.save(&paths)?;
    }
    Ok(result)
}

/// A style to render: a registered id or a raw payload.
#[derive(Clone, Debug)]
pub enum StyleQuery {
    Id(String),
    Image(ImageBuffer),
    Text(String),
}

/// Resolves a query to `(style id, head, feature)`.
///
/// Payloads go through nearest-style matching and use the matched style's
/// stored feature, so they render exactly like the id path. An unmatched
/// payload is an [`Error::UnknownStyle`].
pub fn resolve_style<T: Real>(
    query: &StyleQuery,
    set: &StyleSet,
    mls: &MlsParams<T>,
    encoder: &dyn StyleEncoder,
    cfcm: Option<&CfcmParams>,
) -> Result<(String, String, Vec<f64>)> {
    let id = match query {
        StyleQuery::Id(id) => {
            if set.get(id).is_none() {
                return Err(Error::Lookup(format!(
                    "unknown style id '{id}'; known: {}",
                    set.ids().join(", ")
                )));
            }
            id.clone()
        }
        StyleQuery::Image(img) => match_payload(StyleFeature::image(encoder.encode_image(img)), set)?,
        StyleQuery::Text(text) => {
            let raw = StyleFeature::text(encoder.encode_text(text)?);
            let cfcm = cfcm.ok_or_else(|| Error::Precondition("CFCM checkpoint missing for a text query".into()))?;
            match_payload(correct_text_feature(&raw, cfcm)?, set)?
        }
    };
    let entry = set.get(&id).expect("resolved ids exist");
    Ok((id.clone(), head_for(mls, &id)?, entry.feature.vector.clone()))
}

fn match_payload(feature: StyleFeature, set: &StyleSet) -> Result<String> {
    match match_style(&feature, set)? {
        StyleMatch::Matched { id, .. } => Ok(id),
        StyleMatch::New { nearest, distance } => Err(Error::UnknownStyle { nearest, distance }),
    }
}

/// Renders `camera` in the queried style.
pub fn render_stylized(
    field: &FieldParams<f32>,
    mls: &MlsParams<f32>,
    set: &StyleSet,
    query: &StyleQuery,
    camera: &CameraModel,
    encoder: &dyn StyleEncoder,
    cfcm: Option<&CfcmParams>,
) -> Result<ImageBuffer> {
    let (_, head, feature) = resolve_style(query, set, mls, encoder, cfcm)?;
    render_with_heads(field, mls, &f32_feature(&feature), &head, camera)
}

/// `render` stage: renders training view `view` and writes it under
/// `renders/`. Returns the image and its path.
pub fn render_run(cfg: &TrainConfig, query: &StyleQuery, view: usize) -> Result<(ImageBuffer, PathBuf)> {
    let paths = cfg.paths();
    require(&paths.mls(), "MLS checkpoint")?;
    let state = RunState::open(cfg)?;
    let mls = MlsParams::<f32>::load(&paths.mls())?;
    if view >= state.scene.len() {
        return Err(Error::Argument(format!(
            "view {view} out of range (scene has {})",
            state.scene.len()
        )));
    }
    let (id, head, feature) = resolve_style(query, &state.set, &mls, &cfg.encoder(), state.cfcm.as_ref())?;
    let img = render_with_heads(
        &state.field,
        &mls,
        &f32_feature(&feature),
        &head,
        &state.scene.views[view].camera,
    )?;
    let out = paths.renders().join(format!("{id}_v{view:03}.png"));
    img.save_png(&out)?;
    Ok((img, out))
}

/// Renders the base field (no style) at a camera; used as the reference
/// for pretraining checks.
pub fn render_base(field: &FieldParams<f32>, camera: &CameraModel) -> ImageBuffer {
    render_image(field, camera, None)
}

/// `evaluate` stage: metrics over every registered style, written to
/// `metrics.json` and `metrics_pairs.csv`.
pub fn evaluate_run(cfg: &TrainConfig) -> Result<EvalReport> {
    let paths = cfg.paths();
    require(&paths.mls(), "MLS checkpoint")?;
    let state = RunState::open(cfg)?;
    let mls = MlsParams::<f32>::load(&paths.mls())?;
    let codec = cfg.codec.build();
    let (packs, _) = pregenerate_supervision(&state.scene, &state.sources()?, &codec, &cfg.supervision_options())?;
    let seq = test_sequence(&state.scene, cfg.tau)?;
    let mut styles = Vec::new();
    for e in &state.set.entries {
        let pack = packs.iter().find(|p| p.style_id == e.id).expect("one pack per style");
        styles.push((
            e.id.clone(),
            head_for(&mls, &e.id)?,
            f32_feature(&e.feature.vector),
            pack,
        ));
    }
    let report = evaluate_packs(
        &state.field,
        &mls,
        &state.scene,
        &seq,
        &styles,
        &codec,
        cfg.codec.backend(),
        cfg.seed,
    )?;
    report.write(&paths.metrics(), &paths.metrics_pairs())?;
    Ok(report)
}

/// Loads a JSON-serialized report written by an earlier stage.
pub fn load_cfcm_report(paths: &RunPaths) -> Result<CfcmReport> {
    read_json(&paths.cfcm_report())
}
