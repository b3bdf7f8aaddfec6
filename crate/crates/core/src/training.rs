//! Joint optimization of denoiser, revision module and segmenter.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::diffusion::{forward_diffuse, predict_x0_graph, standard_normal, DiffusionConfig, ScheduleTable};
use crate::error::{Error, Result};
use crate::losses::{diff_loss, lor_loss, rev_loss, seg_loss, total_loss, warmup_weight, ClassMasks, ClassWeights, LossParts, LossReport};
use crate::networks::{
    denoiser_forward, init_params, revision_forward, segmenter_forward, Binder, Checkpoint, ModelParams, NetworkConfig,
};
use crate::patching::PatchSampler;
use crate::rng::{self, Rng};
use crate::volume::{LabelVolume, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of epochs `e_max`.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Patch size `[x, y, z]` in voxels.
    pub patch: [usize; 3],
    pub lesion_target_frac: f64,
    /// Stop gradients from the revision and segmentation losses at `p_hc`.
    pub stop_grad_at_p_hc: bool,
    /// Steps between checkpoints; 0 writes one per epoch.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            steps_per_epoch: 100,
            batch_size: 2,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patch: [32; 3],
            lesion_target_frac: 0.5,
            stop_grad_at_p_hc: false,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if self.epochs < 1 || self.steps_per_epoch < 1 || self.batch_size < 1 {
            return bad("epochs, steps_per_epoch and batch_size must be >= 1".into());
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("adam_eps", self.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.lesion_target_frac) {
            return bad("lesion_target_frac must be in [0, 1]".into());
        }
        if self.patch.contains(&0) {
            return bad("patch dims must be >= 1".into());
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub use_lor_regularizer: bool,
    pub use_revision_module: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { use_lor_regularizer: true, use_revision_module: true }
    }
}

/// Everything besides the data that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub network: NetworkConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub weights: ClassWeights,
    pub ablation: Ablation,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.diffusion.validate()?;
        self.train.validate()?;
        if self.weights.classes() != self.network.classes {
            return Err(Error::Config(format!(
                "{} class weights given for {} foreground classes",
                self.weights.classes() + 1,
                self.network.classes
            )));
        }
        let p = self.train.patch;
        self.network.check_patch([p[2], p[1], p[0]])
    }
}

/// One case: a high-count reference, its labels and one or more
/// low-count realizations.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub hc: Volume3D,
    pub labels: LabelVolume,
    pub lc: Vec<Volume3D>,
}

/// Patch buffers in `[z, y, x]` order with SUV values.
#[derive(Debug, Clone)]
pub struct PatchTriple {
    pub spatial: [usize; 3],
    pub lc: Vec<f64>,
    pub hc: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    /// Per-parameter update counts for bias correction.
    pub t: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<LogRow>,
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub diff: f64,
    pub lor: f64,
    pub rev: f64,
    pub seg: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LogRow {
    fn new(step: u64, epoch: usize, r: &LossReport) -> Self {
        LogRow { step, epoch, diff: r.diff, lor: r.lor, rev: r.rev, seg: r.seg, lambda: r.lambda_warm, total: r.total }
    }

    pub fn report(&self) -> LossReport {
        LossReport { diff: self.diff, lor: self.lor, rev: self.rev, seg: self.seg, lambda_warm: self.lambda, total: self.total }
    }
}

/// Loss graph outputs for one item.
struct ItemPass {
    graph: Graph,
    total: Var,
    parts: LossParts,
}

fn item_pass(
    item: &PatchTriple,
    t: usize,
    eps: &[f64],
    params: &ModelParams,
    settings: &TrainSettings,
    sched: &ScheduleTable,
    lambda: f64,
) -> Result<ItemPass> {
    let norm = settings.diffusion.norm();
    let net = &settings.network;
    let [z, y, x] = item.spatial;
    let shape = [1, z, y, x];
    let masks = ClassMasks::new(&item.labels, item.spatial, net.classes)?;
    let x0 = norm.map(&item.hc);
    let x_t = forward_diffuse(&x0, t, eps, sched)?;

    let mut g = Graph::new();
    let mut b = Binder::using(params, true);
    let x_t = g.constant(Tensor::from_vec(&shape, x_t));
    let eps_v = g.constant(Tensor::from_vec(&shape, eps.to_vec()));
    let cond = g.constant(Tensor::from_vec(&shape, norm.map(&item.lc)));
    let lc = g.constant(Tensor::from_vec(&shape, item.lc.clone()));
    let hc = g.constant(Tensor::from_vec(&shape, item.hc.clone()));

    let eps_hat = denoiser_forward(&mut g, &mut b, net, x_t, cond, t, sched.alpha_bar(t))?;
    let diff = diff_loss(&mut g, eps_hat, eps_v)?;
    let p_hc = predict_x0_graph(&mut g, x_t, eps_hat, t, sched)?;
    let zero = g.constant(Tensor::scalar(0.0));

    let lor = if settings.ablation.use_lor_regularizer {
        let suv = norm.unmap_graph(&mut g, p_hc);
        lor_loss(&mut g, suv, hc, &masks, &settings.weights)?
    } else {
        zero
    };
    let p_hc_down = if settings.train.stop_grad_at_p_hc { g.detach(p_hc) } else { p_hc };
    let (p_hcr, rev) = if settings.ablation.use_revision_module {
        let r = revision_forward(&mut g, &mut b, net, &norm, p_hc_down, lc)?;
        let l = rev_loss(&mut g, r, hc, &masks, &settings.weights)?;
        (r, l)
    } else {
        (lc, zero)
    };
    let (lesion, organ) = segmenter_forward(&mut g, &mut b, net, &norm, p_hcr, lc)?;
    let lesion = g.softmax_channels(lesion);
    let organ = g.softmax_channels(organ);
    let seg = seg_loss(&mut g, lesion, organ, &masks, &settings.weights)?;

    let aux = g.add(lor, rev);
    let aux = g.add(aux, seg);
    let aux = g.scale(aux, lambda);
    let total = g.add(diff, aux);
    let parts = LossParts { diff: g.value(diff).item(), lor: g.value(lor).item(), rev: g.value(rev).item(), seg: g.value(seg).item() };
    Ok(ItemPass { graph: g, total, parts })
}

/// A batch item with its diffusion draw.
#[derive(Debug, Clone)]
pub struct DrawnItem {
    pub patch: PatchTriple,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// Batch-mean loss report and gradients (keyed by parameter path) at `params`.
pub fn batch_gradients(
    batch: &[DrawnItem],
    params: &ModelParams,
    settings: &TrainSettings,
    sched: &ScheduleTable,
    lambda: f64,
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let k = 1.0 / batch.len() as f64;
    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut mean = LossParts::default();
    for item in batch {
        if item.patch.spatial != batch[0].patch.spatial {
            return Err(Error::Geometry("batch items differ in patch size".into()));
        }
        let pass = item_pass(&item.patch, item.t, &item.eps, params, settings, sched, lambda)?;
        mean.diff += k * pass.parts.diff;
        mean.lor += k * pass.parts.lor;
        mean.rev += k * pass.parts.rev;
        mean.seg += k * pass.parts.seg;
        let mut gr = pass.graph.backward(pass.total);
        for (name, var) in pass.graph.named_vars() {
            if let Some(mut t) = gr.take(var) {
                t.scale_assign(k);
                match grads.get_mut(name) {
                    Some(acc) => acc.add_assign(&t),
                    None => {
                        grads.insert(name.to_string(), t);
                    }
                }
            }
        }
    }
    let report = total_loss(mean, lambda)?;
    Ok((report, grads))
}

/// Adam update of every parameter that received a gradient.
pub fn adam_update(params: &mut ModelParams, adam: &mut AdamState, grads: &BTreeMap<String, Tensor>, cfg: &TrainConfig) {
    for (name, grad) in grads {
        let p = params.get_mut(name).expect("gradient for a known parameter");
        let m = adam.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        let v = adam.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(grad.shape()));
        let t = adam.t.entry(name.clone()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(*t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(*t as i32);
        let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
        for (i, &gi) in grad.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mh = md[i] / bc1;
            let vh = vd[i] / bc2;
            pd[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Draws `(t, eps)` for one patch.
pub fn draw_noise(patch: PatchTriple, sched: &ScheduleTable, rng: &mut Rng) -> DrawnItem {
    let t = rng.random_range(1..=sched.steps());
    let n = patch.lc.len();
    DrawnItem { t, eps: standard_normal(rng, n), patch }
}

/// One optimizer step on `batch`; draws per-item timesteps and noise from `rng`.
pub fn train_step(
    batch: Vec<PatchTriple>,
    state: &mut TrainState,
    sched: &ScheduleTable,
    settings: &TrainSettings,
    rng: &mut Rng,
) -> Result<LossReport> {
    let epoch = (state.step / settings.train.steps_per_epoch as u64) as usize;
    let lambda = warmup_weight(epoch.min(settings.train.epochs), settings.train.epochs)?;
    let items: Vec<DrawnItem> = batch.into_iter().map(|p| draw_noise(p, sched, rng)).collect();
    let (report, grads) = batch_gradients(&items, &state.params, settings, sched, lambda).map_err(|e| match e {
        Error::Divergence { detail, .. } => Error::Divergence { step: state.step, detail },
        e => e,
    })?;
    if grads.values().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step: state.step, detail: format!("non-finite gradient, losses {report:?}") });
    }
    adam_update(&mut state.params, &mut state.adam, &grads, &settings.train);
    if !state.params.is_finite() {
        return Err(Error::Divergence { step: state.step, detail: "parameters became non-finite".into() });
    }
    state.history.push(LogRow::new(state.step, epoch, &report));
    state.step += 1;
    Ok(report)
}

/// Stateless patch source over a dataset.
pub struct BatchSource<'a> {
    cases: &'a [TrainingCase],
    samplers: Vec<PatchSampler>,
    patch: [usize; 3],
    lesion_target_frac: f64,
}

impl<'a> BatchSource<'a> {
    pub fn new(cases: &'a [TrainingCase], patch: [usize; 3], lesion_target_frac: f64) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let mut samplers = Vec::new();
        let mut any_lesion = false;
        for (i, c) in cases.iter().enumerate() {
            if c.lc.is_empty() {
                return Err(Error::Data(format!("case {i} has no low-count volume")));
            }
            for lc in &c.lc {
                lc.geometry().ensure_same(c.hc.geometry(), "low-count vs high-count")?;
            }
            c.hc.geometry().ensure_same(c.labels.geometry(), "volume vs labels")?;
            let s = PatchSampler::new(&c.labels, patch)?;
            any_lesion |= !s.lesion_origins().is_empty();
            samplers.push(s);
        }
        if lesion_target_frac > 0.0 && !any_lesion {
            return Err(Error::Data("no case contains lesion voxels".into()));
        }
        Ok(BatchSource { cases, samplers, patch, lesion_target_frac })
    }

    pub fn draw(&self, batch: usize, rng: &mut Rng) -> Result<Vec<PatchTriple>> {
        (0..batch)
            .map(|_| {
                let ci = rng.random_range(0..self.cases.len());
                let case = &self.cases[ci];
                let li = rng.random_range(0..case.lc.len());
                let s = self.samplers[ci].sample(&case.lc[li], &case.hc, &case.labels, self.lesion_target_frac, rng)?;
                Ok(PatchTriple {
                    spatial: [self.patch[2], self.patch[1], self.patch[0]],
                    lc: s.lc.to_f64(),
                    hc: s.hc.to_f64(),
                    labels: s.labels.data().to_vec(),
                })
            })
            .collect()
    }
}

pub fn initial_state(settings: &TrainSettings) -> Result<TrainState> {
    let params = init_params(&settings.network, rng::derive_seed(settings.seed, "init", &[]))?;
    Ok(TrainState { params, adam: AdamState::default(), step: 0, history: Vec::new() })
}

/// Advances `state` until `until` completed steps. Step `k` uses its own
/// random stream, so a restored state continues identically.
pub fn run_steps(
    source: &BatchSource,
    state: &mut TrainState,
    settings: &TrainSettings,
    until: u64,
    mut on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    let sched = settings.diffusion.schedule()?;
    while state.step < until {
        let mut r = rng::stream(settings.seed, "train-step", &[state.step]);
        let batch = source.draw(settings.train.batch_size, &mut r)?;
        train_step(batch, state, &sched, settings, &mut r)?;
        on_step(state)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingMeta {
    step: u64,
    seed: u64,
    train: TrainConfig,
    weights: ClassWeights,
    ablation: Ablation,
    adam_t: BTreeMap<String, u64>,
}

/// Packs a state into a checkpoint including optimizer moments.
pub fn state_checkpoint(state: &TrainState, settings: &TrainSettings) -> Checkpoint {
    let mut ck = Checkpoint::new(settings.network.clone(), settings.diffusion.clone(), state.params.clone());
    ck.training = serde_json::to_value(TrainingMeta {
        step: state.step,
        seed: settings.seed,
        train: settings.train.clone(),
        weights: settings.weights.clone(),
        ablation: settings.ablation,
        adam_t: state.adam.t.clone(),
    })
    .expect("training meta serializes");
    for (k, t) in &state.adam.m {
        ck.aux.insert(format!("adam_m/{k}"), t.clone());
    }
    for (k, t) in &state.adam.v {
        ck.aux.insert(format!("adam_v/{k}"), t.clone());
    }
    ck
}

/// Recovers settings and state from a checkpoint written during training.
pub fn restore_state(ck: &Checkpoint) -> Result<(TrainSettings, TrainState)> {
    let meta: TrainingMeta = serde_json::from_value(ck.training.clone())
        .map_err(|e| Error::format("training", format!("checkpoint has no resumable training state: {e}")))?;
    let mut adam = AdamState { t: meta.adam_t, ..Default::default() };
    for (k, t) in &ck.aux {
        if let Some(n) = k.strip_prefix("adam_m/") {
            adam.m.insert(n.to_string(), t.clone());
        } else if let Some(n) = k.strip_prefix("adam_v/") {
            adam.v.insert(n.to_string(), t.clone());
        }
    }
    let settings = TrainSettings {
        network: ck.network.clone(),
        diffusion: ck.diffusion.clone(),
        train: meta.train,
        weights: meta.weights,
        ablation: meta.ablation,
        seed: meta.seed,
    };
    Ok((settings, TrainState { params: ck.params.clone(), adam, step: meta.step, history: Vec::new() }))
}

pub const LOSS_LOG: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.pckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{step:06}.pckpt")
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::format(format!("loss log line {}", i + 1), e.to_string()))?);
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub history: Vec<LogRow>,
}

/// Full training run writing checkpoints and the loss log into `out_dir`.
///
/// With `resume` the run continues from that checkpoint and the existing
/// log is truncated to the checkpoint's step. `stop_after` ends the run
/// early after that many completed steps, leaving a checkpoint behind.
pub fn train(
    cases: &[TrainingCase],
    settings: &TrainSettings,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainOutcome> {
    settings.validate()?;
    let source = BatchSource::new(cases, settings.train.patch, settings.train.lesion_target_frac)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(LOSS_LOG);

    let mut state = match resume {
        Some(p) => {
            let (saved, state) = restore_state(&Checkpoint::load(p)?)?;
            if &saved != settings {
                return Err(Error::Config("resume checkpoint was written with different settings".into()));
            }
            state
        }
        None => initial_state(settings)?,
    };
    let mut rows = if resume.is_some() && log_path.exists() { read_loss_log(&log_path)? } else { Vec::new() };
    rows.retain(|r| r.step < state.step);
    if rows.len() as u64 != state.step {
        return Err(Error::Data(format!("loss log holds {} rows for {} completed steps", rows.len(), state.step)));
    }
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for r in &rows {
        writeln!(log, "{}", serde_json::to_string(r).expect("row serializes")).map_err(|e| Error::io(&log_path, e))?;
    }
    state.history = rows;

    let total = settings.train.total_steps();
    let until = stop_after.map_or(total, |s| s.min(total));
    let every = match settings.train.checkpoint_every {
        0 => settings.train.steps_per_epoch as u64,
        k => k as u64,
    };
    let mut checkpoints = Vec::new();
    run_steps(&source, &mut state, settings, until, |st| {
        let row = st.history.last().expect("step recorded");
        log::info!(
            "step {} epoch {} total {:.5} diff {:.5} lor {:.5} rev {:.5} seg {:.5} lambda {:.4}",
            row.step, row.epoch, row.total, row.diff, row.lor, row.rev, row.seg, row.lambda
        );
        writeln!(log, "{}", serde_json::to_string(row).expect("row serializes")).map_err(|e| Error::io(&log_path, e))?;
        if st.step % every == 0 || st.step == until {
            let p = out_dir.join(checkpoint_name(st.step));
            state_checkpoint(st, settings).save(&p)?;
            checkpoints.push(p);
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    if state.step == total {
        state_checkpoint(&state, settings).save(&final_checkpoint)?;
    }
    Ok(TrainOutcome { final_checkpoint, log: log_path, checkpoints, history: state.history })
}
