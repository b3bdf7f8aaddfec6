//! Command-line surface: dataset generation, training, inference,
//! quantification, evaluation and the ablation harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    class_dice, class_nrmse, mean_std, nrmse_volumes, ols_regression, percent_bias, wilcoxon_signed_rank, MeanStd,
    RegressionResult, Table, WilcoxonResult,
};
use crate::networks::Checkpoint;
use crate::phantom::{generate_phantom, simulate_count_level, CountModel};
use crate::pipeline::{denoise_volume, infer_volume, quantify, threshold_lesion_labels, InferenceConfig, PhcMode, QuantReport};
use crate::rng::derive_seed;
use crate::training::{train, Ablation, TrainOutcome, TrainingCase, FINAL_CHECKPOINT};
use crate::volume::{read_labels, read_suv, write_labels, write_volume, ClassRoster, LabelVolume, Volume3D};

pub const MANIFEST: &str = "manifest.json";
pub const ITEM_META: &str = "item.json";
pub const REPORT: &str = "report.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const EVALUATION_TEXT: &str = "evaluation.txt";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TEXT: &str = "ablation.txt";
pub const P_HC_FILE: &str = "P_HC.pvol";
pub const P_HCR_FILE: &str = "P_HCR.pvol";
pub const SEG_FILE: &str = "seg.pvol";

#[derive(Debug, Parser)]
#[command(name = "petdiff", version, about = "Joint diffusion denoising and lesion/organ segmentation of low-count PET volumes")]
pub struct Cli {
    /// Caps the number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth metrics.
    Phantom(PhantomArgs),
    /// Train the joint model on the training split of a dataset.
    Train(TrainArgs),
    /// Denoise low-count volumes into P_HC.pvol.
    Denoise(InferArgs),
    /// Denoise, revise and segment low-count volumes.
    Segment(InferArgs),
    /// Compute MTV, TLG and organ SUVmean reports.
    Quantify(QuantifyArgs),
    /// Compare predictions with a dataset's references.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the full model and its two ablated variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Overrides `phantom.n_cases`.
    #[arg(long, value_name = "N")]
    pub n_cases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// A single low-count volume.
    #[arg(long, value_name = "PATH", conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// A dataset directory; every low-count volume of the split is processed.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Restrict dataset inputs to one count level.
    #[arg(long, value_name = "F")]
    pub count_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Supplies the `patching` section.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// One-step P_HC estimate instead of the full reverse chain.
    #[arg(long)]
    pub fast_seg: bool,
}

#[derive(Debug, Args)]
pub struct QuantifyArgs {
    #[arg(long, value_name = "PATH", requires = "labels")]
    pub image: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "image")]
    pub labels: Option<PathBuf>,
    /// Output of `segment`; a report is written next to each item.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["image", "data"])]
    pub pred: Option<PathBuf>,
    /// Threshold baseline on the raw low-count volumes of a dataset.
    #[arg(long, value_name = "DIR", conflicts_with = "image", requires = "threshold")]
    pub data: Option<PathBuf>,
    /// Lesion threshold as a fraction of the image maximum.
    #[arg(long, value_name = "F")]
    pub threshold: Option<f64>,
    #[arg(long, value_name = "F")]
    pub count_fraction: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Dataset directory holding the references.
    #[arg(long = "ref", value_name = "DIR")]
    pub reference: PathBuf,
    /// Second prediction directory for paired tests.
    #[arg(long, value_name = "DIR")]
    pub compare: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "F")]
    pub count_fraction: Option<f64>,
}

/// Dataset index written by `phantom`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub dims: [usize; 3],
    pub voxel_mm: [f64; 3],
    pub roster: Vec<String>,
    pub counts_per_suv: f64,
    pub hc_fraction: f64,
    pub fractions: Vec<f64>,
    pub cases: Vec<CaseEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub split: Split,
    pub phantom_seed: u64,
    /// Paths relative to the dataset directory.
    pub hc: String,
    pub labels: String,
    /// Low-count volume per count-level key.
    pub lc: BTreeMap<String, String>,
    /// Metrics of the high-count image under the true labels.
    pub ground_truth: QuantReport,
}

/// Identifies one processed low-count input inside a prediction directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemMeta {
    pub case: String,
    pub count_fraction: f64,
    pub method: String,
}

pub fn fraction_key(f: f64) -> String {
    format!("{f}")
}

fn item_id(case: &str, f: f64) -> String {
    format!("{case}_lc_{}", fraction_key(f))
}

impl Manifest {
    pub fn load(data: &Path) -> Result<Self> {
        let path = data.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    pub fn roster(&self) -> Result<ClassRoster> {
        ClassRoster::new(self.roster.clone())
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }

    fn selected(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| split == Split::All || c.split == split)
    }

    /// `(case, fraction, lc path)` for every low-count input of `split`.
    fn inputs(&self, data: &Path, split: Split, fraction: Option<f64>) -> Result<Vec<(&CaseEntry, f64, PathBuf)>> {
        if let Some(f) = fraction {
            if !self.fractions.iter().any(|&g| g == f) {
                return Err(Error::Config(format!("count fraction {f} not in dataset fractions {:?}", self.fractions)));
            }
        }
        let mut out = Vec::new();
        for c in self.selected(split) {
            for &f in &self.fractions {
                if fraction.is_some_and(|g| g != f) {
                    continue;
                }
                let rel = c.lc.get(&fraction_key(f)).ok_or_else(|| Error::Data(format!("case {} lacks count level {f}", c.id)))?;
                out.push((c, f, data.join(rel)));
            }
        }
        if out.is_empty() {
            return Err(Error::Data(format!("no {split:?} inputs in {}", data.display())));
        }
        Ok(out)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Writes `n_cases` phantoms with their high-count reference, labels and
/// one low-count realization per configured count level.
pub fn cmd_phantom(cfg: &ExperimentConfig, out: &Path, n_cases: usize) -> Result<Manifest> {
    cfg.validate()?;
    if n_cases == 0 {
        return Err(Error::Config("n_cases must be >= 1".into()));
    }
    let pc = &cfg.phantom;
    let roster = cfg.roster()?;
    let n_test = pc.test_cases.min(n_cases / 2);
    create_dir(out)?;
    let mut cases = Vec::with_capacity(n_cases);
    for i in 0..n_cases {
        let id = format!("case_{i:03}");
        let dir = out.join(&id);
        create_dir(&dir)?;
        let spec = pc.case_spec(cfg.seed, i)?;
        let (activity, labels) = generate_phantom(&spec)?;
        let hc = simulate_count_level(
            &activity,
            CountModel::new(pc.counts_per_suv, pc.hc_fraction)?,
            derive_seed(cfg.seed, "hc", &[i as u64]),
        )?;
        write_volume(&hc, dir.join("hc.pvol"))?;
        write_labels(&labels, dir.join("labels.pvol"))?;
        let mut lc = BTreeMap::new();
        for (j, &f) in pc.fractions.iter().enumerate() {
            let v = simulate_count_level(&activity, CountModel::new(pc.counts_per_suv, f)?, derive_seed(cfg.seed, "lc", &[i as u64, j as u64]))?;
            let name = format!("lc_{}.pvol", fraction_key(f));
            write_volume(&v, dir.join(&name))?;
            lc.insert(fraction_key(f), format!("{id}/{name}"));
        }
        write_json(&dir.join("phantom.json"), &spec)?;
        cases.push(CaseEntry {
            id: id.clone(),
            split: if i >= n_cases - n_test { Split::Test } else { Split::Train },
            phantom_seed: spec.seed,
            hc: format!("{id}/hc.pvol"),
            labels: format!("{id}/labels.pvol"),
            lc,
            ground_truth: quantify(&hc, &labels, &roster)?,
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        dims: pc.dims,
        voxel_mm: pc.voxel_mm,
        roster: roster.names().to_vec(),
        counts_per_suv: pc.counts_per_suv,
        hc_fraction: pc.hc_fraction,
        fractions: pc.fractions.clone(),
        cases,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn check_roster(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<()> {
    let roster = cfg.roster()?;
    if roster.names() != manifest.roster.as_slice() {
        return Err(Error::Config(format!("config classes {:?} differ from dataset classes {:?}", roster.names(), manifest.roster)));
    }
    Ok(())
}

fn training_cases(manifest: &Manifest, data: &Path) -> Result<Vec<TrainingCase>> {
    manifest
        .selected(Split::Train)
        .map(|c| {
            let lc = manifest
                .fractions
                .iter()
                .map(|&f| {
                    let rel = c.lc.get(&fraction_key(f)).ok_or_else(|| Error::Data(format!("case {} lacks count level {f}", c.id)))?;
                    read_suv(data.join(rel))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainingCase { hc: read_suv(data.join(&c.hc))?, labels: read_labels(data.join(&c.labels))?, lc })
        })
        .collect()
}

/// Trains on the training split; writes the resolved config, loss log and
/// checkpoints into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(data)?;
    check_roster(cfg, &manifest)?;
    let cases = training_cases(&manifest, data)?;
    if cases.is_empty() {
        return Err(Error::Config(format!("dataset {} has no training cases", data.display())));
    }
    create_dir(out)?;
    fs::write(out.join("config.json"), cfg.to_json() + "\n").map_err(|e| Error::io(out.join("config.json"), e))?;
    train(&cases, &cfg.settings()?, out, resume, None)
}

/// Where inference inputs come from.
#[derive(Debug, Clone)]
pub enum InferInputs {
    Image(PathBuf),
    Dataset { data: PathBuf, split: Split, fraction: Option<f64> },
}

/// `(output dir, low-count volume, item metadata)` per input.
fn resolve_inputs(inputs: &InferInputs, out: &Path, method: &str) -> Result<Vec<(PathBuf, Volume3D, Option<ItemMeta>)>> {
    match inputs {
        InferInputs::Image(p) => Ok(vec![(out.to_path_buf(), read_suv(p)?, None)]),
        InferInputs::Dataset { data, split, fraction } => {
            let manifest = Manifest::load(data)?;
            manifest
                .inputs(data, *split, *fraction)?
                .into_iter()
                .map(|(c, f, path)| {
                    let meta = ItemMeta { case: c.id.clone(), count_fraction: f, method: method.to_string() };
                    Ok((out.join(item_id(&c.id, f)), read_suv(path)?, Some(meta)))
                })
                .collect()
        }
    }
}

fn method_name(cfg: &InferenceConfig) -> &'static str {
    match cfg.phc_mode {
        PhcMode::Chain => "model",
        PhcMode::OneStep => "model-onestep",
    }
}

/// Writes `P_HC.pvol` per input.
pub fn cmd_denoise(checkpoint: &Path, inputs: &InferInputs, cfg: &InferenceConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut written = Vec::new();
    for (dir, lc, meta) in resolve_inputs(inputs, out, method_name(cfg))? {
        create_dir(&dir)?;
        let p_hc = denoise_volume(&lc, &ck, cfg, seed)?;
        write_volume(&p_hc, dir.join(P_HC_FILE))?;
        if let Some(m) = meta {
            write_json(&dir.join(ITEM_META), &m)?;
        }
        written.push(dir);
    }
    Ok(written)
}

/// Writes `P_HC.pvol`, `P_HCR.pvol`, `seg.pvol`, `lesion_prob.pvol` and one
/// `organ_prob_<j>.pvol` per organ-head channel for each input.
pub fn cmd_segment(checkpoint: &Path, inputs: &InferInputs, cfg: &InferenceConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut written = Vec::new();
    for (dir, lc, meta) in resolve_inputs(inputs, out, method_name(cfg))? {
        create_dir(&dir)?;
        let o = infer_volume(&lc, &ck, cfg, seed)?;
        write_volume(&o.p_hc, dir.join(P_HC_FILE))?;
        write_volume(&o.p_hcr, dir.join(P_HCR_FILE))?;
        write_labels(&o.seg.labels, dir.join(SEG_FILE))?;
        write_volume(&o.seg.lesion_prob, dir.join("lesion_prob.pvol"))?;
        for (j, v) in o.seg.organ_probs.iter().enumerate() {
            write_volume(v, dir.join(format!("organ_prob_{j}.pvol")))?;
        }
        if let Some(m) = meta {
            write_json(&dir.join(ITEM_META), &m)?;
        }
        written.push(dir);
    }
    Ok(written)
}

fn roster_for(labels: &LabelVolume) -> Result<ClassRoster> {
    ClassRoster::with_organs(labels.num_classes().saturating_sub(2))
}

/// Quantifies one image under one label map.
pub fn cmd_quantify_image(image: &Path, labels: &Path, out: &Path) -> Result<QuantReport> {
    let img = read_suv(image)?;
    let lab = read_labels(labels)?;
    let report = quantify(&img, &lab, &roster_for(&lab)?)?;
    create_dir(out)?;
    write_json(&out.join(REPORT), &report)?;
    Ok(report)
}

/// Quantifies every item of a `segment` output: the revised image under
/// the predicted labels. Reports go to `out` (default: next to the items).
pub fn cmd_quantify_pred(pred: &Path, out: Option<&Path>) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for dir in item_dirs(pred)? {
        let image = if dir.join(P_HCR_FILE).exists() { dir.join(P_HCR_FILE) } else { dir.join(P_HC_FILE) };
        let target = match out {
            Some(o) => o.join(dir.file_name().expect("item dir has a name")),
            None => dir.clone(),
        };
        cmd_quantify_image(&image, &dir.join(SEG_FILE), &target)?;
        if out.is_some() {
            fs::copy(dir.join(ITEM_META), target.join(ITEM_META)).map_err(|e| Error::io(dir.join(ITEM_META), e))?;
        }
        written.push(target);
    }
    Ok(written)
}

/// Baseline without any model: the low-count image with a lesion mask
/// from a global fraction-of-maximum threshold.
pub fn cmd_quantify_threshold(data: &Path, split: Split, fraction: Option<f64>, threshold: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let manifest = Manifest::load(data)?;
    let roster = manifest.roster()?;
    let mut written = Vec::new();
    for (c, f, path) in manifest.inputs(data, split, fraction)? {
        let dir = out.join(item_id(&c.id, f));
        create_dir(&dir)?;
        let lc = read_suv(path)?;
        let labels = threshold_lesion_labels(&lc, threshold, roster.num_classes())?;
        write_labels(&labels, dir.join(SEG_FILE))?;
        write_json(&dir.join(REPORT), &quantify(&lc, &labels, &roster)?)?;
        let meta = ItemMeta { case: c.id.clone(), count_fraction: f, method: format!("threshold-{threshold}") };
        write_json(&dir.join(ITEM_META), &meta)?;
        written.push(dir);
    }
    Ok(written)
}

/// Item subdirectories (those holding `item.json`), sorted by name.
fn item_dirs(pred: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(pred).map_err(|e| Error::io(pred, e))? {
        let p = entry.map_err(|e| Error::io(pred, e))?.path();
        if p.join(ITEM_META).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!("no prediction items in {}", pred.display())));
    }
    Ok(dirs)
}

/// Metrics of one prediction item against its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub item: String,
    pub case: String,
    pub count_fraction: f64,
    pub method: String,
    /// Denoised image: `whole` then one entry per class (lesion, organs).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nrmse: Option<BTreeMap<String, Option<f64>>>,
    /// Same layout for the raw low-count input.
    pub input_nrmse: BTreeMap<String, Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dice: Option<BTreeMap<String, Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantReport>,
    pub ground_truth: QuantReport,
    /// Percent bias of MTV and TLG.
    pub bias: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub items: Vec<ItemMetrics>,
    /// Prediction items without a reference, with the reason.
    pub excluded: Vec<String>,
    pub nrmse: Table,
    pub dice: Table,
    /// `mtv`, `tlg` and `suv_mean/<organ>` regressions of prediction on truth.
    pub regression: BTreeMap<String, Option<RegressionResult>>,
    /// Percent bias of MTV and TLG over items.
    pub bias: BTreeMap<String, Option<MeanStd>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

/// Paired tests between two prediction directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub paired_items: usize,
    pub bias: BTreeMap<String, Option<MeanStd>>,
    pub wilcoxon: BTreeMap<String, Option<WilcoxonResult>>,
}

fn ok<T>(r: Result<T>) -> Option<T> {
    r.ok()
}

fn nrmse_map(pred: &Volume3D, reference: &Volume3D, labels: &LabelVolume, roster: &ClassRoster) -> Result<BTreeMap<String, Option<f64>>> {
    let mut m = BTreeMap::new();
    m.insert("whole".to_string(), Some(nrmse_volumes(pred, reference)?));
    for s in 1..roster.num_classes() {
        m.insert(roster.name(s).to_string(), ok(class_nrmse(pred, reference, labels, s)));
    }
    Ok(m)
}

fn evaluate_item(dir: &Path, manifest: &Manifest, data: &Path, roster: &ClassRoster) -> Result<std::result::Result<ItemMetrics, String>> {
    let meta: ItemMeta = read_json(&dir.join(ITEM_META))?;
    let name = dir.file_name().expect("item dir has a name").to_string_lossy().into_owned();
    let Some(case) = manifest.case(&meta.case) else {
        return Ok(Err(format!("{name}: case {} not in the reference manifest", meta.case)));
    };
    let Some(lc_rel) = case.lc.get(&fraction_key(meta.count_fraction)) else {
        return Ok(Err(format!("{name}: reference has no count level {}", meta.count_fraction)));
    };
    let hc = read_suv(data.join(&case.hc))?;
    let labels = read_labels(data.join(&case.labels))?;
    let lc = read_suv(data.join(lc_rel))?;
    let nrmse = match dir.join(P_HC_FILE) {
        p if p.exists() => Some(nrmse_map(&read_suv(p)?, &hc, &labels, roster)?),
        _ => None,
    };
    let dice = match dir.join(SEG_FILE) {
        p if p.exists() => {
            let seg = read_labels(p)?;
            Some((1..roster.num_classes()).map(|s| (roster.name(s).to_string(), ok(class_dice(&seg, &labels, s)))).collect())
        }
        _ => None,
    };
    let quant: Option<QuantReport> = match dir.join(REPORT) {
        p if p.exists() => Some(read_json(&p)?),
        _ => None,
    };
    let gt = case.ground_truth.clone();
    let mut bias = BTreeMap::new();
    if let Some(q) = &quant {
        bias.insert("mtv".to_string(), ok(percent_bias(q.mtv_ml, gt.mtv_ml)));
        bias.insert("tlg".to_string(), ok(percent_bias(q.tlg, gt.tlg)));
    }
    Ok(Ok(ItemMetrics {
        item: name,
        case: meta.case,
        count_fraction: meta.count_fraction,
        method: meta.method,
        nrmse,
        input_nrmse: nrmse_map(&lc, &hc, &labels, roster)?,
        dice,
        quant,
        ground_truth: gt,
        bias,
    }))
}

fn summarize<'a>(values: impl Iterator<Item = Option<f64>> + 'a) -> Option<MeanStd> {
    let v: Vec<f64> = values.flatten().collect();
    mean_std(&v).ok()
}

fn column(items: &[ItemMetrics], f: impl Fn(&ItemMetrics) -> Option<f64>) -> Option<MeanStd> {
    summarize(items.iter().map(f))
}

fn nrmse_columns(roster: &ClassRoster) -> Vec<String> {
    std::iter::once("whole".to_string()).chain(roster.names()[1..].iter().cloned()).collect()
}

fn bias_summary(items: &[ItemMetrics]) -> BTreeMap<String, Option<MeanStd>> {
    ["mtv", "tlg"]
        .iter()
        .map(|k| (k.to_string(), column(items, |i| i.bias.get(*k).copied().flatten())))
        .collect()
}

fn evaluate_dir(pred: &Path, manifest: &Manifest, data: &Path, roster: &ClassRoster) -> Result<(Vec<ItemMetrics>, Vec<String>)> {
    let mut items = Vec::new();
    let mut excluded = Vec::new();
    for dir in item_dirs(pred)? {
        match evaluate_item(&dir, manifest, data, roster)? {
            Ok(m) => items.push(m),
            Err(why) => {
                log::warn!("excluded {why}");
                excluded.push(why);
            }
        }
    }
    if items.is_empty() {
        return Err(Error::Data(format!("no prediction in {} pairs with the reference", pred.display())));
    }
    Ok((items, excluded))
}

/// Per-class NRMSE and Dice tables, clinical-metric regressions and
/// percent-bias summaries; with `compare`, paired Wilcoxon tests.
pub fn cmd_evaluate(pred: &Path, reference: &Path, compare: Option<&Path>, out: &Path) -> Result<Evaluation> {
    let manifest = Manifest::load(reference)?;
    let roster = manifest.roster()?;
    let (items, excluded) = evaluate_dir(pred, &manifest, reference, &roster)?;

    let cols = nrmse_columns(&roster);
    let mut nrmse = Table::new("NRMSE on whole image and each class (lower is better)", cols.clone());
    let row = |f: &dyn Fn(&ItemMetrics) -> Option<&BTreeMap<String, Option<f64>>>| -> Vec<Option<MeanStd>> {
        cols.iter().map(|c| column(&items, |i| f(i).and_then(|m| m.get(c).copied().flatten()))).collect()
    };
    nrmse.push("prediction", row(&|i| i.nrmse.as_ref()));
    nrmse.push("low-count input", row(&|i| Some(&i.input_nrmse)));
    let dcols: Vec<String> = roster.names()[1..].to_vec();
    let mut dice = Table::new("Dice on each class (higher is better)", dcols.clone());
    dice.push(
        "prediction",
        dcols.iter().map(|c| column(&items, |i| i.dice.as_ref().and_then(|m| m.get(c).copied().flatten()))).collect(),
    );

    let mut regression = BTreeMap::new();
    let quants: Vec<(&QuantReport, &QuantReport)> = items.iter().filter_map(|i| i.quant.as_ref().map(|q| (q, &i.ground_truth))).collect();
    let reg = |f: &dyn Fn(&QuantReport) -> Option<f64>| -> Option<RegressionResult> {
        let pairs: Vec<(f64, f64)> = quants.iter().filter_map(|(q, g)| Some((f(g)?, f(q)?))).collect();
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        ok(ols_regression(&x, &y))
    };
    regression.insert("mtv".to_string(), reg(&|q| Some(q.mtv_ml)));
    regression.insert("tlg".to_string(), reg(&|q| Some(q.tlg)));
    for organ in &roster.names()[2..] {
        regression.insert(format!("suv_mean/{organ}"), reg(&|q| q.suv_mean.get(organ).copied().flatten()));
    }

    let comparison = match compare {
        Some(dir) => Some(compare_dirs(&items, dir, &manifest, reference, &roster)?),
        None => None,
    };
    let eval = Evaluation { bias: bias_summary(&items), items, excluded, nrmse, dice, regression, comparison };
    create_dir(out)?;
    write_json(&out.join(EVALUATION_JSON), &eval)?;
    fs::write(out.join(EVALUATION_TEXT), evaluation_text(&eval)).map_err(|e| Error::io(out.join(EVALUATION_TEXT), e))?;
    Ok(eval)
}

fn compare_dirs(items: &[ItemMetrics], dir: &Path, manifest: &Manifest, data: &Path, roster: &ClassRoster) -> Result<Comparison> {
    let (other, _) = evaluate_dir(dir, manifest, data, roster)?;
    let pairs: Vec<(&ItemMetrics, &ItemMetrics)> = items
        .iter()
        .filter_map(|a| other.iter().find(|b| b.case == a.case && b.count_fraction == a.count_fraction).map(|b| (a, b)))
        .collect();
    let paired: Vec<ItemMetrics> = pairs.iter().map(|(_, b)| (*b).clone()).collect();
    let mut wilcoxon = BTreeMap::new();
    let mut test = |name: String, f: &dyn Fn(&ItemMetrics) -> Option<f64>| {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().filter_map(|(x, y)| Some((f(x)?, f(y)?))).unzip();
        let r = if a.is_empty() { None } else { ok(wilcoxon_signed_rank(&a, &b)) };
        wilcoxon.insert(name, r);
    };
    for k in ["mtv", "tlg"] {
        test(format!("abs_bias/{k}"), &|i| i.bias.get(k).copied().flatten().map(f64::abs));
    }
    for c in nrmse_columns(roster) {
        test(format!("nrmse/{c}"), &|i| i.nrmse.as_ref().and_then(|m| m.get(&c).copied().flatten()));
    }
    for c in &roster.names()[1..] {
        test(format!("dice/{c}"), &|i| i.dice.as_ref().and_then(|m| m.get(c).copied().flatten()));
    }
    Ok(Comparison { paired_items: pairs.len(), bias: bias_summary(&paired), wilcoxon })
}

fn fmt_ms(m: &Option<MeanStd>) -> String {
    m.map_or("-".to_string(), |m| format!("{:.3} ± {:.3} (n={})", m.mean, m.std, m.n))
}

fn evaluation_text(e: &Evaluation) -> String {
    let mut s = format!("{}\n{}\n", e.nrmse.to_text(), e.dice.to_text());
    s.push_str("Regression of prediction on ground truth\n");
    for (k, r) in &e.regression {
        match r {
            Some(r) => s.push_str(&format!("  {k}: slope {:.4} intercept {:.4} R2 {:.4} n {}\n", r.slope, r.intercept, r.r_squared, r.n)),
            None => s.push_str(&format!("  {k}: -\n")),
        }
    }
    s.push_str("Percent bias\n");
    for (k, m) in &e.bias {
        s.push_str(&format!("  {k}: {}\n", fmt_ms(m)));
    }
    if let Some(c) = &e.comparison {
        s.push_str(&format!("Comparison over {} paired items\n", c.paired_items));
        for (k, m) in &c.bias {
            s.push_str(&format!("  other {k} bias: {}\n", fmt_ms(m)));
        }
        for (k, w) in &c.wilcoxon {
            match w {
                Some(w) => s.push_str(&format!("  wilcoxon {k}: W+ {:.1} p {:.4} n {}\n", w.statistic, w.p_two_sided, w.n_effective)),
                None => s.push_str(&format!("  wilcoxon {k}: -\n")),
            }
        }
    }
    if !e.excluded.is_empty() {
        s.push_str("Excluded\n");
        for x in &e.excluded {
            s.push_str(&format!("  {x}\n"));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    pub name: String,
    pub label: String,
    pub ablation: Ablation,
    pub checkpoint: String,
    pub nrmse: BTreeMap<String, Option<MeanStd>>,
    pub dice: BTreeMap<String, Option<MeanStd>>,
    pub tlg_bias: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<AblationVariant>,
    pub table: Table,
}

/// The three compared variants: name, row label, switches.
pub fn ablation_variants() -> [(&'static str, &'static str, Ablation); 3] {
    [
        ("full", "full model", Ablation { use_lor_regularizer: true, use_revision_module: true }),
        ("without_lor", "w/o lesion-organ-specific regularizer", Ablation { use_lor_regularizer: false, use_revision_module: true }),
        ("without_revision", "w/o denoising revision", Ablation { use_lor_regularizer: true, use_revision_module: false }),
    ]
}

/// Trains each variant from the same seed, segments and quantifies the
/// test split, and emits one comparison table.
pub fn cmd_ablate(cfg: &ExperimentConfig, data: &Path, out: &Path, fraction: Option<f64>) -> Result<AblationReport> {
    cfg.validate()?;
    let manifest = Manifest::load(data)?;
    let roster = manifest.roster()?;
    let ncols = nrmse_columns(&roster);
    let dcols: Vec<String> = roster.names()[1..].to_vec();
    let columns: Vec<String> = ncols.iter().map(|c| format!("NRMSE {c}")).chain(dcols.iter().map(|c| format!("Dice {c}"))).collect();
    let mut table = Table::new("Ablation: NRMSE on whole image and each class, Dice on each class", columns);
    let mut variants = Vec::new();
    for (name, label, ablation) in ablation_variants() {
        let vdir = out.join(name);
        let mut vcfg = cfg.clone();
        vcfg.ablation = ablation;
        let outcome = cmd_train(&vcfg, data, &vdir.join("train"), None)?;
        let pred = vdir.join("pred");
        let inputs = InferInputs::Dataset { data: data.to_path_buf(), split: Split::Test, fraction };
        cmd_segment(&outcome.final_checkpoint, &inputs, &vcfg.patching, vcfg.seed, &pred)?;
        cmd_quantify_pred(&pred, None)?;
        let eval = cmd_evaluate(&pred, data, None, &vdir.join("evaluation"))?;
        let nrmse: BTreeMap<String, Option<MeanStd>> = ncols.iter().cloned().zip(eval.nrmse.rows[0].values.iter().copied()).collect();
        let dice: BTreeMap<String, Option<MeanStd>> = dcols.iter().cloned().zip(eval.dice.rows[0].values.iter().copied()).collect();
        table.push(label, eval.nrmse.rows[0].values.iter().chain(&eval.dice.rows[0].values).copied().collect());
        variants.push(AblationVariant {
            name: name.to_string(),
            label: label.to_string(),
            ablation,
            checkpoint: format!("{name}/train/{FINAL_CHECKPOINT}"),
            nrmse,
            dice,
            tlg_bias: eval.bias.get("tlg").copied().flatten(),
        });
    }
    let report = AblationReport { variants, table };
    write_json(&out.join(ABLATION_JSON), &report)?;
    fs::write(out.join(ABLATION_TEXT), report.table.to_text()).map_err(|e| Error::io(out.join(ABLATION_TEXT), e))?;
    Ok(report)
}

fn inference_config(path: Option<&Path>, fast_seg: bool) -> Result<InferenceConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?.patching,
        None => InferenceConfig::default(),
    };
    if fast_seg {
        cfg.phc_mode = PhcMode::OneStep;
    }
    Ok(cfg)
}

fn infer_inputs(a: &InferArgs) -> Result<InferInputs> {
    match (&a.image, &a.data) {
        (Some(p), None) => Ok(InferInputs::Image(p.clone())),
        (None, Some(d)) => Ok(InferInputs::Dataset { data: d.clone(), split: a.split, fraction: a.count_fraction }),
        _ => Err(Error::Config("give exactly one of --image and --data".into())),
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Phantom(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            let n = a.n_cases.unwrap_or(cfg.phantom.n_cases);
            let m = cmd_phantom(&cfg, &a.out, n)?;
            log::info!("wrote {} cases to {}", m.cases.len(), a.out.display());
        }
        Command::Train(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            let o = cmd_train(&cfg, &a.data, &a.out, a.resume.as_deref())?;
            log::info!("final checkpoint {}", o.final_checkpoint.display());
        }
        Command::Denoise(a) => {
            let icfg = inference_config(a.config.as_deref(), a.fast_seg)?;
            cmd_denoise(&a.checkpoint, &infer_inputs(&a)?, &icfg, a.seed.unwrap_or(0), &a.out)?;
        }
        Command::Segment(a) => {
            let icfg = inference_config(a.config.as_deref(), a.fast_seg)?;
            cmd_segment(&a.checkpoint, &infer_inputs(&a)?, &icfg, a.seed.unwrap_or(0), &a.out)?;
        }
        Command::Quantify(a) => match (&a.image, &a.labels, &a.pred, &a.data) {
            (Some(i), Some(l), None, None) => {
                let out = a.out.as_deref().ok_or_else(|| Error::Config("--out is required with --image".into()))?;
                cmd_quantify_image(i, l, out)?;
            }
            (None, None, Some(p), None) => {
                cmd_quantify_pred(p, a.out.as_deref())?;
            }
            (None, None, None, Some(d)) => {
                let out = a.out.as_deref().ok_or_else(|| Error::Config("--out is required with --data".into()))?;
                let thr = a.threshold.ok_or_else(|| Error::Config("--threshold is required with --data".into()))?;
                cmd_quantify_threshold(d, a.split, a.count_fraction, thr, out)?;
            }
            _ => return Err(Error::Config("give --image with --labels, --pred, or --data with --threshold".into())),
        },
        Command::Evaluate(a) => {
            let e = cmd_evaluate(&a.pred, &a.reference, a.compare.as_deref(), &a.out)?;
            print!("{}", evaluation_text(&e));
        }
        Command::Ablate(a) => {
            let cfg = load_config(a.config.as_deref(), a.seed)?;
            let r = cmd_ablate(&cfg, &a.data, &a.out, a.count_fraction)?;
            print!("{}", r.table.to_text());
        }
    }
    Ok(())
}
