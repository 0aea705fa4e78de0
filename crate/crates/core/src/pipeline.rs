//! End-to-end orchestration: downsample, interpolate, synthesize phases,
//! assess velocities, plus the K-sweep and adversarial-loss ablation harnesses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::HornSchunckConfig;
use crate::data::{load_study, save_study, CineStudy, DownsampleSpec};
use crate::error::{MvmError, Result};
use crate::metrics::{MeanStd, MetricReport, DEFAULT_ROI_PAD, METRIC_NAMES};
use crate::phantom::{generate_phantom, PhantomParams};
use crate::phase_synth::{
    build_phase_dataset, synthesize_phases_with, train_phase, NoiseModel, OraclePhases, PhaseGenerator,
    PhaseModel, PhaseNetConfig, PhaseTrainConfig,
};
use crate::seed;
use crate::svg::{LineChart, Series};
use crate::temporal_interp::{
    build_interp_dataset, interpolate_series_with, train_interp, FlowFiller, GapFiller, GappedStudy,
    InterpModel, InterpNetConfig, LinearFiller, TrainConfig,
};
use crate::toy_experiment::ToyConfig;
use crate::velocity::{compare_curves, default_systole_end, global_curves, Direction, VelocityCurves};

pub const STAGE_DATA: &str = "data";
pub const STAGE_TRAIN_INTERP: &str = "train-interp";
pub const STAGE_TRAIN_PHASE: &str = "train-phase";
pub const STAGE_INTERPOLATE: &str = "interpolate";
pub const STAGE_SYNTHESIZE: &str = "synthesize";
pub const STAGE_ASSESS: &str = "assess";
pub const STAGE_REPORT: &str = "report";

/// Phantom studies per split are seeded from disjoint offsets of the base seed.
const SPLIT_SEED_STRIDE: u64 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InterpMethod {
    Learned,
    Linear,
    Flow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PhaseSource {
    Learned,
    /// Ground-truth phases of the test study; isolates the interpolation stage.
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSpec {
    Phantom {
        params: PhantomParams,
        train: usize,
        val: usize,
        test: usize,
    },
    Studies {
        train: Vec<PathBuf>,
        val: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Phantom {
            params: PhantomParams::default(),
            train: 8,
            val: 2,
            test: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSpec,
    /// Downsampling factors for the end-to-end run.
    pub ks: Vec<usize>,
    /// Downsampling factors for the method sweep.
    pub sweep_ks: Vec<usize>,
    pub ablation_ks: Vec<usize>,
    pub ablation_adversarial_weight: f32,
    pub method: InterpMethod,
    pub phase_source: PhaseSource,
    /// Global seed; module seeds are derived from it.
    pub seed: u64,
    /// Square ROI crop applied to every study at load time. The module-level
    /// crop settings, when given, must agree with it.
    pub crop_size: Option<usize>,
    pub roi_pad: usize,
    pub interp_net: InterpNetConfig,
    pub interp_train: TrainConfig,
    pub phase_net: PhaseNetConfig,
    pub phase_train: PhaseTrainConfig,
    pub flow: HornSchunckConfig,
    pub noise: NoiseModel,
    /// Where trained models live; defaults to `<out>/checkpoints`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Train models whose checkpoints are missing instead of failing.
    pub train_missing: bool,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataSpec::default(),
            ks: (0..=6).collect(),
            sweep_ks: (1..=6).collect(),
            ablation_ks: vec![4, 5, 6],
            ablation_adversarial_weight: 0.01,
            method: InterpMethod::Learned,
            phase_source: PhaseSource::Learned,
            seed: 0,
            crop_size: None,
            roi_pad: DEFAULT_ROI_PAD,
            interp_net: InterpNetConfig::desk(),
            interp_train: TrainConfig {
                epochs: 3,
                batch_size: 8,
                ..TrainConfig::default()
            },
            phase_net: PhaseNetConfig::desk(),
            phase_train: PhaseTrainConfig {
                epochs: 8,
                ..PhaseTrainConfig::default()
            },
            flow: HornSchunckConfig::default(),
            noise: NoiseModel::default(),
            checkpoint_dir: None,
            train_missing: true,
            toy: ToyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| MvmError::Config(m);
        match &self.data {
            DataSpec::Phantom { params, train, val, test } => {
                params.validate().map_err(|e| cfg_err(e.to_string()))?;
                if *train == 0 || *test == 0 {
                    return Err(cfg_err("train and test splits must be non-empty".into()));
                }
                if [train, val, test].iter().any(|&&n| n as u64 >= SPLIT_SEED_STRIDE) {
                    return Err(cfg_err(format!("at most {} studies per split", SPLIT_SEED_STRIDE - 1)));
                }
            }
            DataSpec::Studies { train, val, test } => {
                if train.is_empty() || test.is_empty() {
                    return Err(cfg_err("train and test splits must be non-empty".into()));
                }
                let mut seen = std::collections::BTreeSet::new();
                for p in train.iter().chain(val).chain(test) {
                    if !seen.insert(p) {
                        return Err(cfg_err(format!("{} appears in more than one split", p.display())));
                    }
                }
            }
        }
        let crops: Vec<usize> = [self.crop_size, self.interp_train.crop_size, self.phase_train.input_size]
            .into_iter()
            .flatten()
            .collect();
        if crops.windows(2).any(|w| w[0] != w[1]) {
            return Err(cfg_err(format!("conflicting crop sizes {crops:?}")));
        }
        self.interp_net.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.interp_train.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.phase_net.generator.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.noise.validate().map_err(|e| cfg_err(e.to_string()))?;
        if !(self.phase_train.learning_rate > 0.0) {
            return Err(cfg_err("phase learning_rate must be positive".into()));
        }
        if self.ablation_adversarial_weight < 0.0 {
            return Err(cfg_err("ablation_adversarial_weight must be non-negative".into()));
        }
        Ok(())
    }

    /// Copy with every module seed derived from the global seed.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.interp_net.seed = seed::derive(self.seed, &[1]);
        c.interp_train.seed = seed::derive(self.seed, &[2]);
        c.phase_net.seed = seed::derive(self.seed, &[3]);
        c.phase_train.seed = seed::derive(self.seed, &[4]);
        c.toy.seed = seed::derive(self.seed, &[5]);
        c
    }

    pub fn checkpoint_root(&self, out: &Path) -> PathBuf {
        self.checkpoint_dir.clone().unwrap_or_else(|| out.join("checkpoints"))
    }

    fn crop(&self) -> Option<usize> {
        self.crop_size
            .or(self.interp_train.crop_size)
            .or(self.phase_train.input_size)
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<CineStudy>,
    pub val: Vec<CineStudy>,
    pub test: Vec<CineStudy>,
}

pub fn load_splits(cfg: &PipelineConfig) -> Result<Splits> {
    let (train, val, test) = match &cfg.data {
        DataSpec::Phantom { params, train, val, test } => {
            let gen = |split: u64, n: usize| -> Result<Vec<CineStudy>> {
                (0..n)
                    .map(|i| generate_phantom(&params.with_seed(params.seed + split * SPLIT_SEED_STRIDE + i as u64)))
                    .collect()
            };
            (gen(0, *train)?, gen(1, *val)?, gen(2, *test)?)
        }
        DataSpec::Studies { train, val, test } => {
            let load = |ps: &[PathBuf]| ps.iter().map(|p| load_study(p)).collect::<Result<Vec<_>>>();
            (load(train)?, load(val)?, load(test)?)
        }
    };
    let crop = |v: Vec<CineStudy>| -> Result<Vec<CineStudy>> {
        match cfg.crop() {
            Some(s) => v.iter().map(|st| st.crop_to_roi(s)).collect(),
            None => Ok(v),
        }
    };
    Ok(Splits {
        train: crop(train)?,
        val: crop(val)?,
        test: crop(test)?,
    })
}

/// Drops `k` frames after every kept one, then fills the gaps with `filler`.
pub fn downsample_and_fill(filler: &dyn GapFiller, study: &CineStudy, k: usize) -> Result<CineStudy> {
    let spec = DownsampleSpec::new(k, 0, study.num_frames())?;
    interpolate_series_with(filler, &GappedStudy::downsample(study, &spec)?, &spec)
}

/// Scores reconstructed frames against ground truth. Only frames removed by
/// downsampling are scored; at K = 0 every frame is.
pub fn score_interpolation(pred: &CineStudy, gt: &CineStudy, k: usize, roi_pad: usize) -> Result<Vec<MetricReport>> {
    let spec = DownsampleSpec::new(k, 0, gt.num_frames())?;
    (0..gt.num_frames())
        .filter(|&t| k == 0 || !spec.keeps(t))
        .map(|t| {
            MetricReport::evaluate(
                pred.magnitude(t),
                gt.magnitude(t),
                Some((pred.seg(t), gt.seg(t))),
                gt.seg(t),
                roi_pad,
            )
        })
        .collect()
}

pub type MetricSummary = BTreeMap<String, MeanStd>;

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    METRIC_NAMES
        .iter()
        .filter_map(|&n| crate::metrics::aggregate(reports, n).map(|m| (n.to_string(), m)))
        .collect()
}

pub fn evaluate_filler(filler: &dyn GapFiller, studies: &[CineStudy], k: usize, roi_pad: usize) -> Result<Vec<MetricReport>> {
    let mut out = Vec::new();
    for st in studies {
        let pred = downsample_and_fill(filler, st, k)?;
        out.extend(score_interpolation(&pred, st, k, roi_pad)?);
    }
    Ok(out)
}

/// Checkpoint directory for an interpolation variant (`interp`, `vn`, `gan`) at K.
pub fn interp_checkpoint(root: &Path, variant: &str, k: usize) -> PathBuf {
    root.join(format!("{variant}-k{k}"))
}

pub fn phase_checkpoint(root: &Path) -> PathBuf {
    root.join("phase")
}

fn has_checkpoint(dir: &Path) -> bool {
    dir.join(crate::checkpoint::MANIFEST_FILE).is_file()
}

/// Loads the model at `dir`, or trains and saves one when allowed.
pub fn obtain_interp_model(
    splits: &Splits,
    k: usize,
    net: &InterpNetConfig,
    train_cfg: &TrainConfig,
    roi_pad: usize,
    dir: &Path,
    train_missing: bool,
) -> Result<InterpModel> {
    if has_checkpoint(dir) {
        return InterpModel::load(dir);
    }
    if !train_missing {
        return Err(MvmError::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let train = build_interp_dataset(&splits.train, k, roi_pad)?;
    let val = if splits.val.is_empty() {
        Vec::new()
    } else {
        build_interp_dataset(&splits.val, k, roi_pad)?
    };
    let (model, _) = train_interp(&train, &val, net, train_cfg)?;
    model.save(dir)?;
    Ok(model)
}

pub fn obtain_phase_model(
    splits: &Splits,
    net: &PhaseNetConfig,
    train_cfg: &PhaseTrainConfig,
    dir: &Path,
    train_missing: bool,
) -> Result<PhaseModel> {
    if has_checkpoint(dir) {
        return PhaseModel::load(dir);
    }
    if !train_missing {
        return Err(MvmError::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let train = build_phase_dataset(&splits.train)?;
    let val = build_phase_dataset(&splits.val)?;
    let (model, _) = train_phase(&train, &val, net, train_cfg)?;
    model.save(dir)?;
    Ok(model)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6e}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyAssessment {
    pub subject_id: String,
    /// Per-direction Pearson correlation, radial/circumferential/longitudinal.
    pub pearson: BTreeMap<String, Option<f64>>,
    pub comparison: Vec<crate::velocity::DirectionComparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KResult {
    pub k: usize,
    pub frames_scored: usize,
    pub metrics: MetricSummary,
    /// Mean and std over test studies of the per-direction Pearson correlation.
    pub pearson: BTreeMap<String, Option<MeanStd>>,
    pub studies: Vec<StudyAssessment>,
}

impl KResult {
    /// Mean over directions of the mean Pearson correlation.
    pub fn mean_pearson(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self.pearson.values().map(|m| m.map(|m| m.mean)).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub method: InterpMethod,
    pub phase_source: PhaseSource,
    pub results: Vec<KResult>,
}

fn curves_csv(real: &VelocityCurves, syn: &VelocityCurves) -> String {
    let mut s = String::from("t,real_radial,real_circumferential,real_longitudinal,syn_radial,syn_circumferential,syn_longitudinal\n");
    for t in 0..real.len() {
        let vals: Vec<String> = Direction::ALL
            .iter()
            .map(|&d| real.get(d)[t])
            .chain(Direction::ALL.iter().map(|&d| syn.get(d)[t]))
            .map(fmt_f64)
            .collect();
        s.push_str(&format!("{t},{}\n", vals.join(",")));
    }
    s
}

fn curves_svg(subject: &str, k: usize, real: &VelocityCurves, syn: &VelocityCurves) -> String {
    let mut chart = LineChart::new(format!("{subject}, K = {k}"), "frame", "velocity (mm/s)");
    for d in Direction::ALL {
        let pts = |c: &VelocityCurves| c.get(d).iter().enumerate().map(|(t, &v)| (t as f64, v)).collect();
        chart.push(Series::new(format!("{} real", d.name()), pts(real)));
        chart.push(Series::new(format!("{} synthetic", d.name()), pts(syn)).dashed());
    }
    chart.to_svg()
}

/// Velocity assessment of one synthesized study against its ground truth.
pub fn assess_study(real: &CineStudy, synthetic: &CineStudy) -> Result<(StudyAssessment, VelocityCurves, VelocityCurves)> {
    let a = global_curves(real)?;
    let b = global_curves(synthetic)?;
    let comparison = compare_curves(&a, &b, default_systole_end(real.num_frames()))?;
    Ok((
        StudyAssessment {
            subject_id: real.meta().subject_id.clone(),
            pearson: comparison.iter().map(|c| (c.direction.name().to_string(), c.pearson)).collect(),
            comparison,
        },
        a,
        b,
    ))
}

fn pearson_summary(studies: &[StudyAssessment]) -> BTreeMap<String, Option<MeanStd>> {
    Direction::ALL
        .iter()
        .map(|d| {
            let v: Option<Vec<f64>> = studies.iter().map(|s| s.pearson[d.name()]).collect();
            (d.name().to_string(), v.and_then(|v| MeanStd::of(&v)))
        })
        .collect()
}

/// Runs the three stages for every configured K and writes per-K artifacts
/// plus `report.json`, `interp_metrics.csv` and `velocity_stats.csv` under `out`.
pub fn run_full_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let root = cfg.checkpoint_root(out);
    let splits = load_splits(&cfg).map_err(|e| e.in_stage(STAGE_DATA))?;
    let phase_model = match cfg.phase_source {
        PhaseSource::Learned => Some(
            obtain_phase_model(&splits, &cfg.phase_net, &cfg.phase_train, &phase_checkpoint(&root), cfg.train_missing)
                .map_err(|e| e.in_stage(STAGE_TRAIN_PHASE))?,
        ),
        PhaseSource::Oracle => None,
    };
    let composite = cfg.phase_net.composite;
    let mut results = Vec::new();
    for &k in &cfg.ks {
        let kdir = out.join(format!("k{k}"));
        let learned = if cfg.method == InterpMethod::Learned && k > 0 {
            Some(
                obtain_interp_model(
                    &splits,
                    k,
                    &cfg.interp_net,
                    &cfg.interp_train,
                    cfg.roi_pad,
                    &interp_checkpoint(&root, "interp", k),
                    cfg.train_missing,
                )
                .map_err(|e| e.in_stage(STAGE_TRAIN_INTERP))?,
            )
        } else {
            None
        };
        let flow = FlowFiller(cfg.flow);
        let filler: &dyn GapFiller = match (&learned, cfg.method) {
            (Some(m), _) => m,
            (None, InterpMethod::Flow) => &flow,
            _ => &LinearFiller,
        };
        let mut reports = Vec::new();
        let mut studies = Vec::new();
        for (si, st) in splits.test.iter().enumerate() {
            let subject = st.meta().subject_id.clone();
            let interp_dir = kdir.join("interpolated").join(&subject);
            (|| {
                let pred = downsample_and_fill(filler, st, k)?;
                reports.extend(score_interpolation(&pred, st, k, cfg.roi_pad)?);
                save_study(&pred, &interp_dir)?;
                Ok(())
            })()
            .map_err(|e: MvmError| e.in_stage(STAGE_INTERPOLATE))?;
            let syn_dir = kdir.join("synthetic").join(&subject);
            (|| {
                let mags = load_study(&interp_dir)?;
                let oracle = OraclePhases(st);
                let gen: &dyn PhaseGenerator = match &phase_model {
                    Some(m) => m,
                    None => &oracle,
                };
                let sd = seed::derive(cfg.seed, &[0x5e, k as u64, si as u64]);
                let syn = synthesize_phases_with(gen, &mags, &cfg.noise, sd, composite)?;
                save_study(&syn, &syn_dir)
            })()
            .map_err(|e| e.in_stage(STAGE_SYNTHESIZE))?;
            let (assessment, real_c, syn_c) = load_study(&syn_dir)
                .and_then(|syn| assess_study(st, &syn))
                .map_err(|e| e.in_stage(STAGE_ASSESS))?;
            (|| {
                write_text(&kdir.join("curves").join(format!("{subject}.csv")), &curves_csv(&real_c, &syn_c))?;
                write_text(&kdir.join("curves").join(format!("{subject}.svg")), &curves_svg(&subject, k, &real_c, &syn_c))
            })()
            .map_err(|e| e.in_stage(STAGE_REPORT))?;
            studies.push(assessment);
        }
        let res = KResult {
            k,
            frames_scored: reports.len(),
            metrics: summarize(&reports),
            pearson: pearson_summary(&studies),
            studies,
        };
        write_json(&kdir.join("metrics.json"), &res).map_err(|e| e.in_stage(STAGE_REPORT))?;
        results.push(res);
    }
    let report = PipelineReport {
        method: cfg.method,
        phase_source: cfg.phase_source,
        results,
    };
    (|| {
        write_json(&out.join("report.json"), &report)?;
        write_text(&out.join("interp_metrics.csv"), &metrics_table_csv(&report))?;
        write_text(&out.join("velocity_stats.csv"), &velocity_table_csv(&report))
    })()
    .map_err(|e| e.in_stage(STAGE_REPORT))?;
    Ok(report)
}

/// One row per (K, metric): interpolation quality.
pub fn metrics_table_csv(report: &PipelineReport) -> String {
    let mut s = String::from("k,metric,mean,std\n");
    for r in &report.results {
        for name in METRIC_NAMES {
            if let Some(m) = r.metrics.get(name) {
                s.push_str(&format!("{},{name},{},{}\n", r.k, fmt_f64(m.mean), fmt_f64(m.std)));
            }
        }
    }
    s
}

/// One row per (K, direction): correlation and mean clinical statistics of
/// real and synthetic curves.
pub fn velocity_table_csv(report: &PipelineReport) -> String {
    let mut s = String::from(
        "k,direction,pearson_mean,pearson_std,real_psv,syn_psv,real_tpsv,syn_tpsv,real_pdv,syn_pdv,real_tpdv,syn_tpdv\n",
    );
    for r in &report.results {
        for d in Direction::ALL {
            let (pm, ps) = r.pearson[d.name()].map_or((f64::NAN, f64::NAN), |m| (m.mean, m.std));
            let cmp: Vec<_> = r
                .studies
                .iter()
                .filter_map(|st| st.comparison.iter().find(|c| c.direction == d))
                .collect();
            let mean = |f: &dyn Fn(&crate::velocity::DirectionComparison) -> f64| {
                cmp.iter().map(|c| f(c)).sum::<f64>() / cmp.len().max(1) as f64
            };
            let cols = [
                mean(&|c| c.reference.psv),
                mean(&|c| c.candidate.psv),
                mean(&|c| c.reference.tpsv as f64),
                mean(&|c| c.candidate.tpsv as f64),
                mean(&|c| c.reference.pdv),
                mean(&|c| c.candidate.pdv),
                mean(&|c| c.reference.tpdv as f64),
                mean(&|c| c.candidate.tpdv as f64),
            ];
            let cols: Vec<String> = cols.into_iter().map(fmt_f64).collect();
            s.push_str(&format!("{},{},{},{},{}\n", r.k, d.name(), fmt_f64(pm), fmt_f64(ps), cols.join(",")));
        }
    }
    s
}

/// Method comparison over K. `lr` and `op` always run; `vn` (single
/// shared encoder) and `ours` need checkpoints and are skipped without them.
pub const SWEEP_METHODS: [&str; 4] = ["lr", "op", "vn", "ours"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub k: usize,
    pub metric: String,
    pub value: MeanStd,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub notices: Vec<String>,
}

impl SweepReport {
    pub fn get(&self, method: &str, k: usize, metric: &str) -> Option<&MeanStd> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.k == k && c.metric == metric)
            .map(|c| &c.value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,k,metric,mean,std\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{},{},{}\n", c.method, c.k, c.metric, fmt_f64(c.value.mean), fmt_f64(c.value.std)));
        }
        s
    }

    pub fn chart(&self, metric: &str) -> LineChart {
        let mut chart = LineChart::new(format!("{metric} vs K"), "K", metric);
        for m in SWEEP_METHODS {
            let pts: Vec<(f64, f64)> = self
                .cells
                .iter()
                .filter(|c| c.method == m && c.metric == metric)
                .map(|c| (c.k as f64, c.value.mean))
                .collect();
            if !pts.is_empty() {
                chart.push(Series::new(m, pts));
            }
        }
        chart
    }
}

/// Evaluates every available method at every sweep K on the test split and
/// writes `ksweep.csv`, `ksweep.json` and one SVG per metric.
pub fn ksweep_report(cfg: &PipelineConfig, out: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let root = cfg.checkpoint_root(out);
    let splits = load_splits(&cfg).map_err(|e| e.in_stage(STAGE_DATA))?;
    let mut report = SweepReport::default();
    for &k in &cfg.sweep_ks {
        for method in SWEEP_METHODS {
            let model;
            let flow = FlowFiller(cfg.flow);
            let filler: &dyn GapFiller = match method {
                "lr" => &LinearFiller,
                "op" => &flow,
                _ => {
                    let variant = if method == "vn" { "vn" } else { "interp" };
                    let dir = interp_checkpoint(&root, variant, k);
                    if k == 0 || !has_checkpoint(&dir) {
                        let note = format!("{method}: no {variant}-k{k} checkpoint, skipped at K = {k}");
                        eprintln!("{note}");
                        report.notices.push(note);
                        continue;
                    }
                    model = InterpModel::load(&dir).map_err(|e| e.in_stage(STAGE_TRAIN_INTERP))?;
                    &model
                }
            };
            let reports = evaluate_filler(filler, &splits.test, k, cfg.roi_pad).map_err(|e| e.in_stage(STAGE_INTERPOLATE))?;
            for (metric, value) in summarize(&reports) {
                report.cells.push(SweepCell {
                    method: method.to_string(),
                    k,
                    metric,
                    value,
                });
            }
        }
    }
    (|| {
        write_text(&out.join("ksweep.csv"), &report.to_csv())?;
        write_json(&out.join("ksweep.json"), &report)?;
        for name in METRIC_NAMES {
            write_text(&out.join(format!("ksweep_{name}.svg")), &report.chart(name).to_svg())?;
        }
        Ok(())
    })()
    .map_err(|e: MvmError| e.in_stage(STAGE_REPORT))?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub variant: String,
    pub metrics: MetricSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub adversarial_weight: f32,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean of a metric's per-K means for one variant.
    pub fn average(&self, variant: &str, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.metrics.get(metric).map(|m| m.mean))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,variant,metric,mean,std\n");
        for r in &self.rows {
            for (name, m) in &r.metrics {
                s.push_str(&format!("{},{},{name},{},{}\n", r.k, r.variant, fmt_f64(m.mean), fmt_f64(m.std)));
            }
        }
        s
    }
}

pub const VARIANT_PLAIN: &str = "no-gan";
pub const VARIANT_GAN: &str = "gan";

/// Scores a plain and an adversarially trained model at K on `studies`.
pub fn ablation_rows(k: usize, plain: &InterpModel, gan: &InterpModel, studies: &[CineStudy], roi_pad: usize) -> Result<Vec<AblationRow>> {
    Ok(vec![
        AblationRow {
            k,
            variant: VARIANT_PLAIN.into(),
            metrics: summarize(&evaluate_filler(plain, studies, k, roi_pad)?),
        },
        AblationRow {
            k,
            variant: VARIANT_GAN.into(),
            metrics: summarize(&evaluate_filler(gan, studies, k, roi_pad)?),
        },
    ])
}

/// Trains (or loads) both variants with identical seeds and data for every
/// ablation K; writes `gan_ablation.csv` and `gan_ablation.json`.
pub fn gan_ablation(cfg: &PipelineConfig, out: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    let root = cfg.checkpoint_root(out);
    let splits = load_splits(&cfg).map_err(|e| e.in_stage(STAGE_DATA))?;
    let plain_cfg = TrainConfig {
        adversarial_weight: 0.0,
        ..cfg.interp_train.clone()
    };
    let gan_cfg = TrainConfig {
        adversarial_weight: cfg.ablation_adversarial_weight,
        ..cfg.interp_train.clone()
    };
    let mut report = AblationReport {
        adversarial_weight: cfg.ablation_adversarial_weight,
        rows: Vec::new(),
    };
    for &k in &cfg.ablation_ks {
        if k == 0 {
            return Err(MvmError::Config("ablation K must be at least 1".into()));
        }
        let obtain = |variant: &str, tc: &TrainConfig| {
            obtain_interp_model(&splits, k, &cfg.interp_net, tc, cfg.roi_pad, &interp_checkpoint(&root, variant, k), cfg.train_missing)
        };
        let plain = obtain("interp", &plain_cfg).map_err(|e| e.in_stage(STAGE_TRAIN_INTERP))?;
        let gan = obtain("gan", &gan_cfg).map_err(|e| e.in_stage(STAGE_TRAIN_INTERP))?;
        report
            .rows
            .extend(ablation_rows(k, &plain, &gan, &splits.test, cfg.roi_pad).map_err(|e| e.in_stage(STAGE_INTERPOLATE))?);
    }
    (|| {
        write_text(&out.join("gan_ablation.csv"), &report.to_csv())?;
        write_json(&out.join("gan_ablation.json"), &report)
    })()
    .map_err(|e: MvmError| e.in_stage(STAGE_REPORT))?;
    Ok(report)
}
