use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::MANIFEST_FILE;
use crate::episodic::{EvalReport, TrainLog};
use crate::error::{Error, Result};
use crate::metadm::SharpenStrategy;
use crate::pipeline::{
    run_eval, run_generate, run_synth, run_train_diffusion, run_train_fsl, FslMethod, RunConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    StrengthGood,
    StrengthBad,
    /// `bad_per_class` under the single-extra strategy.
    BadCount,
    /// The four arms neither / good only / bad only / both.
    ModuleCompleteness,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::StrengthGood => "strength_good",
            AblationAxis::StrengthBad => "strength_bad",
            AblationAxis::BadCount => "bad_count",
            AblationAxis::ModuleCompleteness => "module_completeness",
        }
    }
}

pub const MODULE_ARMS: [&str; 4] = ["neither", "good_only", "bad_only", "both"];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    /// Axis values; must be empty for `ModuleCompleteness`.
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Shots evaluated for every trained model (the configured `k_shot`
    /// when empty).
    pub eval_shots: Vec<usize>,
    pub base: RunConfig,
}

impl AblationGrid {
    pub fn new(axis: AblationAxis, values: Vec<f64>, base: RunConfig) -> Self {
        AblationGrid {
            axis,
            values,
            seeds: vec![base.seed],
            eval_shots: Vec::new(),
            base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one seed".into()));
        }
        if self.eval_shots.contains(&0) {
            return Err(Error::Config("eval shots must be positive".into()));
        }
        match self.axis {
            AblationAxis::ModuleCompleteness => {
                if !self.values.is_empty() {
                    return Err(Error::Config(
                        "module_completeness has fixed arms and takes no values".into(),
                    ));
                }
            }
            _ if self.values.is_empty() => {
                return Err(Error::Config("ablation values must be non-empty".into()));
            }
            AblationAxis::StrengthGood | AblationAxis::StrengthBad => {
                if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::Config(format!("strength {v} outside [0, 1]")));
                }
            }
            AblationAxis::BadCount => {
                if let Some(v) = self.values.iter().find(|v| !(v.fract() == 0.0 && **v >= 1.0)) {
                    return Err(Error::Config(format!("bad count {v} is not an integer >= 1")));
                }
            }
        }
        Ok(())
    }

    /// `(label, value)` of every arm.
    pub fn arms(&self) -> Vec<(String, f64)> {
        match self.axis {
            AblationAxis::ModuleCompleteness => MODULE_ARMS
                .iter()
                .enumerate()
                .map(|(i, a)| (a.to_string(), i as f64))
                .collect(),
            axis => self
                .values
                .iter()
                .map(|v| (format!("{}-{v}", axis.as_str()), *v))
                .collect(),
        }
    }

    /// Applies arm `(label, value)` to a config.
    pub fn configure(&self, label: &str, value: f64, cfg: &mut RunConfig) {
        let m = &mut cfg.metadm;
        match self.axis {
            AblationAxis::StrengthGood => {
                m.good_strength = value;
                m.augment_enabled = true;
            }
            AblationAxis::StrengthBad => {
                m.bad_strength = value;
                m.sharpen_enabled = true;
            }
            AblationAxis::BadCount => {
                m.strategy = SharpenStrategy::SingleExtra;
                m.bad_per_class = value as usize;
                m.sharpen_enabled = true;
            }
            AblationAxis::ModuleCompleteness => {
                let (good, bad) = match label {
                    "good_only" => (true, false),
                    "bad_only" => (false, true),
                    "both" => (true, true),
                    _ => (false, false),
                };
                m.augment_enabled = good;
                m.sharpen_enabled = bad;
            }
        }
        cfg.fsl.method = if cfg.metadm.augment_enabled || cfg.metadm.sharpen_enabled {
            FslMethod::Metadm
        } else {
            FslMethod::Baseline
        };
    }
}

/// Shared state of one seed: the dataset and the lazily trained denoiser.
pub struct AblationContext {
    base: RunConfig,
    denoiser: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub label: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub log: TrainLog,
}

impl AblationContext {
    /// Uses `base` with `seed`, rooted at `dir`; renders the dataset there
    /// unless the config names one.
    pub fn prepare(base: &RunConfig, seed: u64, dir: &Path) -> Result<Self> {
        let mut cfg = base.clone().with_seed(seed);
        cfg.output_dir = dir.to_path_buf();
        if cfg.dataset.manifest.is_none() {
            let ds_dir = dir.join("dataset");
            if !ds_dir.join(MANIFEST_FILE).exists() {
                // the baseline-style record of this directory only
                let mut synth_cfg = cfg.clone();
                synth_cfg.fsl.method = FslMethod::Baseline;
                run_synth(&synth_cfg)?;
            }
            cfg.dataset.manifest = Some(ds_dir.join(MANIFEST_FILE));
        }
        Ok(AblationContext {
            base: cfg,
            denoiser: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.base
    }

    /// Checkpoint shared by the Meta-DM arms, trained on first use into
    /// `<dir>/shared` unless `diffusion.checkpoint` names one.
    pub fn denoiser(&mut self) -> Result<PathBuf> {
        if let Some(p) = self.denoiser.as_ref().or(self.base.diffusion.checkpoint.as_ref()) {
            return Ok(p.clone());
        }
        let mut cfg = self.base.clone();
        cfg.output_dir = self.base.output_dir.join("shared");
        let out = run_train_diffusion(&cfg)?;
        self.denoiser = Some(out.checkpoint.clone());
        Ok(out.checkpoint)
    }

    /// Runs one arm in `<dir>/<label>`: generation (Meta-DM arms only),
    /// episodic training and evaluation at each of `shots`.
    pub fn run_arm(
        &mut self,
        label: &str,
        configure: impl FnOnce(&mut RunConfig),
        shots: &[usize],
    ) -> Result<ArmResult> {
        let mut cfg = self.base.clone();
        cfg.output_dir = self.base.output_dir.join(label);
        configure(&mut cfg);
        let cfg = cfg.resolved();
        cfg.validate()?;
        let augmented = match cfg.fsl.method {
            FslMethod::Baseline => None,
            FslMethod::Metadm => {
                let ckpt = self.denoiser()?;
                Some(run_generate(&cfg, &ckpt)?.manifest)
            }
        };
        let fsl = run_train_fsl(&cfg, augmented.as_deref())?;
        let shots: Vec<usize> = if shots.is_empty() {
            vec![cfg.fsl.k_shot]
        } else {
            shots.to_vec()
        };
        let reports = shots
            .iter()
            .map(|&k| run_eval(&cfg, &fsl.checkpoint, Some(k)))
            .collect::<Result<_>>()?;
        Ok(ArmResult {
            label: label.to_string(),
            seed: cfg.seed,
            dir: cfg.output_dir,
            reports,
            log: fsl.log,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub value: f64,
    pub seed: u64,
    pub k_shot: usize,
    pub mean_accuracy: Option<f64>,
    pub ci95_halfwidth: Option<f64>,
    /// `ok` or the failure message.
    pub status: String,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
    pub csv_path: PathBuf,
    pub plot_path: PathBuf,
}

#[derive(Serialize)]
struct PlotPoint {
    arm: String,
    value: f64,
    mean_accuracy: Option<f64>,
    ci95_halfwidth: Option<f64>,
    per_seed: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct PlotSeries {
    k_shot: usize,
    points: Vec<PlotPoint>,
}

#[derive(Serialize)]
struct PlotData<'a> {
    axis: &'a str,
    seeds: &'a [u64],
    series: Vec<PlotSeries>,
}

fn csv_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Runs every arm for every seed. A failing arm is recorded in its row's
/// status and the sweep continues. Writes `ablation-<axis>.csv` and
/// `ablation-<axis>.json` (plot data) into the base output directory.
pub fn run_ablation(grid: &AblationGrid) -> Result<AblationOutcome> {
    grid.validate()?;
    grid.base.validate()?;
    let root = grid.base.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let shots: Vec<usize> = if grid.eval_shots.is_empty() {
        vec![grid.base.fsl.k_shot]
    } else {
        grid.eval_shots.clone()
    };
    let arms = grid.arms();
    let mut rows = Vec::new();
    for &seed in &grid.seeds {
        let dir = root.join(format!("seed-{seed}"));
        let mut ctx = match AblationContext::prepare(&grid.base, seed, &dir) {
            Ok(c) => Some(c),
            Err(e) => {
                for (label, value) in &arms {
                    for &k in &shots {
                        rows.push(AblationRow {
                            arm: label.clone(),
                            value: *value,
                            seed,
                            k_shot: k,
                            mean_accuracy: None,
                            ci95_halfwidth: None,
                            status: format!("failed: {e}"),
                        });
                    }
                }
                None
            }
        };
        let Some(ctx) = ctx.as_mut() else { continue };
        for (label, value) in &arms {
            let res = ctx.run_arm(label, |c| grid.configure(label, *value, c), &shots);
            for (i, &k) in shots.iter().enumerate() {
                let (mean, ci, status) = match &res {
                    Ok(r) => (
                        Some(r.reports[i].mean_accuracy),
                        Some(r.reports[i].ci95_halfwidth),
                        "ok".to_string(),
                    ),
                    Err(e) => (None, None, format!("failed: {e}")),
                };
                rows.push(AblationRow {
                    arm: label.clone(),
                    value: *value,
                    seed,
                    k_shot: k,
                    mean_accuracy: mean,
                    ci95_halfwidth: ci,
                    status,
                });
            }
        }
    }

    let axis = grid.axis.as_str();
    let mut csv = String::from("axis,arm,value,seed,k_shot,mean_accuracy,ci95_halfwidth,status\n");
    for r in &rows {
        writeln!(
            csv,
            "{axis},{},{},{},{},{},{},\"{}\"",
            r.arm,
            r.value,
            r.seed,
            r.k_shot,
            csv_num(r.mean_accuracy),
            csv_num(r.ci95_halfwidth),
            r.status.replace('"', "'")
        )
        .expect("writing to a String");
    }
    let series = shots
        .iter()
        .map(|&k| PlotSeries {
            k_shot: k,
            points: arms
                .iter()
                .map(|(label, value)| {
                    let mine: Vec<&AblationRow> = rows
                        .iter()
                        .filter(|r| &r.arm == label && r.k_shot == k)
                        .collect();
                    let ok: Vec<&AblationRow> =
                        mine.iter().copied().filter(|r| r.mean_accuracy.is_some()).collect();
                    let avg = |f: fn(&AblationRow) -> Option<f64>| {
                        (!ok.is_empty()).then(|| {
                            ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len() as f64
                        })
                    };
                    PlotPoint {
                        arm: label.clone(),
                        value: *value,
                        mean_accuracy: avg(|r| r.mean_accuracy),
                        ci95_halfwidth: avg(|r| r.ci95_halfwidth),
                        per_seed: mine.iter().map(|r| r.mean_accuracy).collect(),
                    }
                })
                .collect(),
        })
        .collect();
    let plot = PlotData {
        axis,
        seeds: &grid.seeds,
        series,
    };
    let csv_path = root.join(format!("ablation-{axis}.csv"));
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let plot_path = root.join(format!("ablation-{axis}.json"));
    fs::write(&plot_path, serde_json::to_string_pretty(&plot)? + "\n")
        .map_err(|e| Error::io(&plot_path, e))?;
    Ok(AblationOutcome {
        axis: grid.axis,
        rows,
        csv_path,
        plot_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::read_access_log;
    use crate::pipeline::tests::tiny_config;

    #[test]
    fn grid_validation() {
        let base = RunConfig::default();
        let ok = AblationGrid::new(AblationAxis::StrengthBad, vec![0.05, 0.2, 0.5], base.clone());
        ok.validate().unwrap();
        assert_eq!(ok.arms().len(), 3);
        for bad in [
            AblationGrid::new(AblationAxis::StrengthBad, vec![], base.clone()),
            AblationGrid::new(AblationAxis::StrengthGood, vec![1.2], base.clone()),
            AblationGrid::new(AblationAxis::BadCount, vec![2.5], base.clone()),
            AblationGrid::new(AblationAxis::ModuleCompleteness, vec![1.0], base.clone()),
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let m = AblationGrid::new(AblationAxis::ModuleCompleteness, vec![], base);
        let labels: Vec<String> = m.arms().into_iter().map(|a| a.0).collect();
        assert_eq!(labels, MODULE_ARMS);
    }

    #[test]
    fn module_completeness_gives_four_reproducible_rows() {
        let dir = tempfile::tempdir().unwrap();
        let grid = AblationGrid::new(
            AblationAxis::ModuleCompleteness,
            vec![],
            tiny_config(dir.path()),
        );
        let out = run_ablation(&grid).unwrap();
        assert_eq!(out.rows.len(), 4);
        assert!(out.rows.iter().all(|r| r.status == "ok"), "{:?}", out.rows);
        let csv = fs::read_to_string(&out.csv_path).unwrap();
        assert_eq!(csv.lines().count(), 5);
        let neither = dir.path().join("seed-0/neither");
        let log = read_access_log(&neither).unwrap();
        assert!(log.iter().all(|(_, kind, _)| kind != "denoiser"));
        let both = read_access_log(&dir.path().join("seed-0/both")).unwrap();
        assert!(both.iter().any(|(_, kind, _)| kind == "denoiser"));

        let dir2 = tempfile::tempdir().unwrap();
        let grid2 = AblationGrid::new(
            AblationAxis::ModuleCompleteness,
            vec![],
            tiny_config(dir2.path()),
        );
        let out2 = run_ablation(&grid2).unwrap();
        assert_eq!(out.rows, out2.rows);
        assert_eq!(csv, fs::read_to_string(&out2.csv_path).unwrap());
    }

    #[test]
    fn strength_sweep_rows_follow_values_and_failures_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = tiny_config(dir.path());
        // bad_per_class larger than the 8 images per class fails the
        // single-extra arm only
        let grid = AblationGrid::new(AblationAxis::BadCount, vec![2.0, 9.0], base.clone());
        let out = run_ablation(&grid).unwrap();
        assert_eq!(out.rows[0].status, "ok");
        assert!(out.rows[1].status.starts_with("failed"));

        base.output_dir = dir.path().join("sweep");
        let grid = AblationGrid::new(AblationAxis::StrengthBad, vec![0.05, 0.2, 0.5], base);
        let out = run_ablation(&grid).unwrap();
        let values: Vec<f64> = out.rows.iter().map(|r| r.value).collect();
        assert_eq!(values, [0.05, 0.2, 0.5]);
        let plot: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&out.plot_path).unwrap()).unwrap();
        assert_eq!(plot["series"][0]["points"].as_array().unwrap().len(), 3);
    }
}
