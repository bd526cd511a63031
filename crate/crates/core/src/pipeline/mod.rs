//! Stage runners behind the command-line tool. Every stage writes into the
//! configured output directory, echoes the resolved config there, and records
//! artifact digests in `run.json` and artifact reads in `access.log`.

mod ablation;
mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_manifest, sha256_hex, synth_generate, Dataset, Split, MANIFEST_FILE};
use crate::diffusion::{train_denoiser, DenoiserModel, DiffusionTrainOptions};
use crate::episodic::{
    evaluate, evaluate_with_fake_ways, train_episodic, Conv4, EvalReport, FakeWays, FslTrainOptions, TrainLog,
};
use crate::error::{Error, Result};
use crate::metadm::{build_augmented_dataset, load_augmented, Generator, MetaDMConfig, Provenance};

pub use ablation::{
    run_ablation, AblationAxis, AblationContext, AblationGrid, AblationOutcome, AblationRow,
    ArmResult,
};
pub use config::{
    DatasetSection, DiffusionSection, FslMethod, FslSection, RunConfig, OUTPUT_DIR_ENV,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const DENOISER_FILE: &str = "diffusion/denoiser.mddn";
pub const EMBEDDER_FILE: &str = "fsl/embedder.mdem";
pub const AUGMENTED_DIR: &str = "augmented";

/// Contents of `run.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub config_digest: String,
    pub seed: u64,
    /// Artifact path (relative to the output directory) to sha256.
    pub artifacts: BTreeMap<String, String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// One configured output directory.
struct Workspace<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
    stage: &'static str,
}

impl<'a> Workspace<'a> {
    fn open(cfg: &'a RunConfig, stage: &'static str) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.output_dir.as_path();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ws = Workspace { cfg, dir, stage };
        write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        ws.update_record(|_| {})?;
        Ok(ws)
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn update_record(&self, f: impl FnOnce(&mut RunRecord)) -> Result<()> {
        let path = self.path("run.json");
        let digest = self.cfg.digest()?;
        let mut rec = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice::<RunRecord>(&bytes)
                .ok()
                .filter(|r| r.config_digest == digest)
                .unwrap_or_default(),
            Err(_) => RunRecord::default(),
        };
        rec.tool_version = TOOL_VERSION.to_string();
        rec.config_digest = digest;
        rec.seed = self.cfg.seed;
        f(&mut rec);
        write_file(&path, (serde_json::to_string_pretty(&rec)? + "\n").as_bytes())
    }

    /// Writes an artifact and records its digest.
    fn emit(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(rel);
        write_file(&path, bytes)?;
        let digest = sha256_hex(bytes);
        self.update_record(|r| {
            r.artifacts.insert(rel.to_string(), digest);
        })?;
        Ok(path)
    }

    fn record_digest(&self, key: &str, digest: &str) -> Result<()> {
        self.update_record(|r| {
            r.artifacts.insert(key.to_string(), digest.to_string());
        })
    }

    /// Appends `stage kind path` to `access.log`.
    fn log_read(&self, kind: &str, path: &Path) -> Result<()> {
        let log = self.path("access.log");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(|e| Error::io(&log, e))?;
        writeln!(f, "{}\t{kind}\t{}", self.stage, path.display()).map_err(|e| Error::io(&log, e))
    }

    fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.cfg.dataset.manifest {
            Some(p) => load_manifest(p)?,
            None => {
                let dir = self.path("dataset");
                if dir.join(MANIFEST_FILE).exists() {
                    load_manifest(&dir)?
                } else {
                    synth_generate(&self.cfg.dataset.synth, &dir)?
                }
            }
        };
        self.log_read("dataset", &ds.root.join(MANIFEST_FILE))?;
        self.record_digest("dataset", &ds.manifest.digest)?;
        Ok(ds)
    }
}

/// Reads the entries of an `access.log`.
pub fn read_access_log(dir: &Path) -> Result<Vec<(String, String, PathBuf)>> {
    let path = dir.join("access.log");
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(&path, e)),
    };
    Ok(text
        .lines()
        .filter_map(|l| {
            let mut it = l.splitn(3, '\t');
            Some((
                it.next()?.to_string(),
                it.next()?.to_string(),
                PathBuf::from(it.next()?),
            ))
        })
        .collect())
}

/// Renders the synthetic dataset into `<output_dir>/dataset`.
pub fn run_synth(cfg: &RunConfig) -> Result<Dataset> {
    let ws = Workspace::open(cfg, "synth")?;
    let ds = synth_generate(&cfg.dataset.synth, &ws.path("dataset"))?;
    ws.record_digest("dataset", &ds.manifest.digest)?;
    Ok(ds)
}

#[derive(Clone, Debug)]
pub struct DiffusionOutcome {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub epoch_losses: Vec<f64>,
}

/// Trains the denoiser on the training split. Writes the checkpoint and a
/// per-epoch mean loss CSV.
pub fn run_train_diffusion(cfg: &RunConfig) -> Result<DiffusionOutcome> {
    let ws = Workspace::open(cfg, "train-diffusion")?;
    let ds = ws.dataset()?;
    let images = ds.split_tensor(Split::Train)?;
    let d = &cfg.diffusion;
    let schedule = d.schedule()?;
    let n = images.shape()[0];
    let bs = d.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut model = DenoiserModel::new(d.denoiser_config(images.shape()[1]), cfg.seed)?;
    let opts = DiffusionTrainOptions {
        steps: d.epochs * steps_per_epoch,
        batch_size: bs,
        learning_rate: d.learning_rate,
        seed: cfg.seed,
    };
    let losses = train_denoiser(&mut model, &images, &schedule, &opts)?;
    let epoch_losses: Vec<f64> = losses
        .chunks(steps_per_epoch)
        .map(|c| c.iter().map(|&v| f64::from(v)).sum::<f64>() / c.len() as f64)
        .collect();
    let mut csv = String::from("epoch,loss\n");
    for (e, l) in epoch_losses.iter().enumerate() {
        writeln!(csv, "{e},{l}").expect("writing to a String");
    }
    ws.emit("diffusion/loss.csv", csv.as_bytes())?;
    let bytes = model.checkpoint_bytes(&schedule);
    let checkpoint = ws.emit(DENOISER_FILE, &bytes)?;
    Ok(DiffusionOutcome {
        checkpoint,
        digest: sha256_hex(&bytes),
        epoch_losses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOutcome {
    pub manifest: PathBuf,
    pub digest: String,
    pub original: usize,
    pub good: usize,
    pub bad: usize,
    pub fake_classes: usize,
}

/// Builds the augmented training set from the training split with the
/// denoiser at `checkpoint`.
pub fn run_generate(cfg: &RunConfig, checkpoint: &Path) -> Result<GenerateOutcome> {
    let ws = Workspace::open(cfg, "generate")?;
    let ds = ws.dataset()?;
    let train = ds.load_split(Split::Train)?;
    ws.log_read("denoiser", checkpoint)?;
    let gen = Generator::load(checkpoint)?;
    let aug = build_augmented_dataset(&train, &ds.manifest.digest, &gen, &cfg.metadm)?;
    let out = ws.path(AUGMENTED_DIR);
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let m = aug.save(&out)?;
    ws.record_digest("denoiser", gen.digest())?;
    ws.record_digest(AUGMENTED_DIR, &m.digest)?;
    Ok(GenerateOutcome {
        manifest: out.join(MANIFEST_FILE),
        digest: m.digest,
        original: aug.count(Provenance::Original),
        good: aug.count(Provenance::GoodGenerated),
        bad: aug.count(Provenance::BadGenerated),
        fake_classes: aug.fake_classes().len(),
    })
}

#[derive(Clone, Debug)]
pub struct FslOutcome {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub log: TrainLog,
}

/// Episodic training. The baseline method trains on the original training
/// split and never opens generated data; the Meta-DM method trains on the
/// augmented manifest. Validation uses the val split and the best-on-val
/// parameters are saved.
pub fn run_train_fsl(cfg: &RunConfig, augmented: Option<&Path>) -> Result<FslOutcome> {
    let ws = Workspace::open(cfg, "train-fsl")?;
    let ds = ws.dataset()?;
    let val = ds.load_split(Split::Val)?;
    let (train, fakes) = match cfg.fsl.method {
        FslMethod::Baseline => (ds.load_split(Split::Train)?, FakeWays::None),
        FslMethod::Metadm => {
            let path = augmented.ok_or_else(|| {
                Error::Config("method metadm needs an augmented dataset manifest".into())
            })?;
            ws.log_read("augmented", path)?;
            let aug = load_augmented(path)?;
            if aug.dataset_digest != ds.manifest.digest {
                return Err(Error::Integrity {
                    path: path.to_path_buf(),
                    reason: "augmented set was built from a different dataset".into(),
                });
            }
            (aug.example_set()?, aug.fake_ways())
        }
    };
    let f = &cfg.fsl;
    let mut model = Conv4::new(ds.manifest.image_shape, f.width, cfg.seed)?;
    let opts = FslTrainOptions {
        episodes: f.episodes_train,
        shape: f.train_shape(),
        learning_rate: f.learning_rate,
        lambda: f.lambda,
        seed: cfg.seed,
        val_every: f.val_every,
        val_episodes: f.val_episodes,
        val_query: f.n_query,
    };
    let log = train_episodic(&mut model, &train, &fakes, &opts, Some(&val))?;
    let mut csv = String::from("episode,loss,fake_ways\n");
    for (e, (l, k)) in log.losses.iter().zip(&log.fake_ways).enumerate() {
        writeln!(csv, "{e},{l},{k}").expect("writing to a String");
    }
    ws.emit("fsl/loss.csv", csv.as_bytes())?;
    ws.emit(
        "fsl/train_log.json",
        (serde_json::to_string_pretty(&log)? + "\n").as_bytes(),
    )?;
    let bytes = model.checkpoint_bytes();
    let checkpoint = ws.emit(EMBEDDER_FILE, &bytes)?;
    Ok(FslOutcome {
        checkpoint,
        digest: sha256_hex(&bytes),
        log,
    })
}

/// Evaluates the embedder at `checkpoint` on the test split with `k_shot`
/// support images per way (the configured value when `None`). Writes
/// `eval/report-<k>shot.json` and the per-episode CSV. With
/// `fsl.eval_fake_ways` the denoiser (`diffusion.checkpoint`, else the one in
/// the output directory) supplies fake ways for the test classes.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, k_shot: Option<usize>) -> Result<EvalReport> {
    let ws = Workspace::open(cfg, "eval")?;
    let ds = ws.dataset()?;
    let test = ds.load_split(Split::Test)?;
    ws.log_read("embedder", checkpoint)?;
    let model = Conv4::from_checkpoint_bytes(&read_file(checkpoint)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", checkpoint.display())),
        other => other,
    })?;
    let k = k_shot.unwrap_or(cfg.fsl.k_shot);
    if k == 0 {
        return Err(Error::Config("k_shot must be positive".into()));
    }
    let shape = cfg.fsl.eval_shape(k);
    let mut report = if cfg.fsl.eval_fake_ways {
        let ckpt = cfg
            .diffusion
            .checkpoint
            .clone()
            .unwrap_or_else(|| cfg.output_dir.join(DENOISER_FILE));
        ws.log_read("denoiser", &ckpt)?;
        let gen = Generator::load(&ckpt)?;
        let sharpen = MetaDMConfig {
            augment_enabled: false,
            sharpen_enabled: true,
            ..cfg.metadm.clone()
        };
        let aug = build_augmented_dataset(&test, &ds.manifest.digest, &gen, &sharpen)?;
        let set = aug.example_set()?;
        evaluate_with_fake_ways(&set, &model, shape, &aug.fake_ways(), cfg.fsl.episodes_eval, cfg.seed)?
    } else {
        evaluate(&test, &model, shape, cfg.fsl.episodes_eval, cfg.seed)?
    };
    report.config_digest = cfg.digest()?;
    ws.emit(&format!("eval/report-{k}shot.json"), report.to_json()?.as_bytes())?;
    ws.emit(
        &format!("eval/episodes-{k}shot.csv"),
        report.per_episode_csv().as_bytes(),
    )?;
    Ok(report)
}
