//! Optimization and orchestration: bias-corrected Adam over exactly the
//! currently-trainable parameters, cosine learning-rate decay, per-task
//! training and post-prune fine-tuning (with a documented
//! retry-then-revert guard against regression), evaluation with activated
//! cost accounting, and the full sequential loop over the task curriculum.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{backward, Tape};
use crate::backbone::{ModelState, TaskPhase};
use crate::degrade::{build_corpus, derive_seed, make_sample_pool, Pair, TaskSpec};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::pruning::{run_sep, SepReport};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs_train: usize,
    pub epochs_finetune: usize,
    pub batch: usize,
    pub pool_n: usize,
    pub rho: f64,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Step-size multiplier for the mining bank's parameters during joint
    /// compound training (1 = same rate as the path).
    pub mining_lr_scale: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl TrainConfig {
    /// Full-size protocol constants.
    pub fn full() -> TrainConfig {
        TrainConfig {
            epochs_train: 100,
            epochs_finetune: 20,
            batch: 24,
            pool_n: 300,
            rho: 0.1,
            lr_init: 1e-4,
            lr_final: 1e-6,
            mining_lr_scale: 1.0,
            n_train: 800,
            n_test: 200,
            image_h: 64,
            image_w: 64,
        }
    }

    /// Minutes-scale laptop protocol; same 8:2 train/test ratio.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            epochs_train: 20,
            epochs_finetune: 5,
            batch: 2,
            pool_n: 32,
            rho: 0.1,
            lr_init: 1e-2,
            lr_final: 1e-6,
            mining_lr_scale: 1e-2,
            n_train: 200,
            n_test: 50,
            image_h: 32,
            image_w: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs_train == 0
            || self.epochs_finetune == 0
            || self.batch == 0
            || self.pool_n == 0
            || self.n_train == 0
            || self.n_test == 0
        {
            return Err(Error::Config("all counts must be at least 1".into()));
        }
        if !(self.lr_final <= self.lr_init) || self.lr_final <= 0.0 {
            return Err(Error::Config(format!(
                "learning rates must satisfy 0 < final ({}) <= initial ({})",
                self.lr_final, self.lr_init
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("vote threshold {} outside [0,1]", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.mining_lr_scale) {
            return Err(Error::Config(format!(
                "mining rate scale {} outside [0,1]",
                self.mining_lr_scale
            )));
        }
        if self.image_h == 0 || self.image_w == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` (epoch 0) to `lr_final` (last epoch).
pub fn cosine_lr(epoch: usize, epochs: usize, lr_init: f64, lr_final: f64) -> Result<f64> {
    if epochs == 0 || epoch >= epochs {
        return Err(Error::InvalidArg(format!("epoch {epoch} outside schedule of {epochs}")));
    }
    if epochs == 1 {
        return Ok(lr_init);
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + libm::cos(core::f64::consts::PI * t)))
}

/// Bias-corrected Adam confined to an allow-list of parameter ids. A
/// gradient for any id outside the list is an isolation breach and errors
/// before any state changes.
pub struct Adam {
    allowed: BTreeSet<String>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    /// (id prefix, multiplier) pairs; the first matching prefix scales the
    /// step size for that parameter.
    lr_scales: Vec<(String, f64)>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(allowed: impl IntoIterator<Item = String>) -> Adam {
        Adam {
            allowed: allowed.into_iter().collect(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            lr_scales: Vec::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Scale the step size by `scale` for every parameter whose id starts
    /// with `prefix` (e.g. a gentler rate for the mining bank).
    pub fn with_prefix_scale(mut self, prefix: &str, scale: f64) -> Adam {
        self.lr_scales.push((prefix.to_string(), scale));
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tracked_ids(&self) -> Vec<&String> {
        self.m.keys().collect()
    }

    pub fn step(
        &mut self,
        model: &mut ModelState,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for key in grads.keys() {
            if !self.allowed.contains(key) {
                return Err(Error::Isolation(format!(
                    "gradient for non-trainable parameter '{key}'"
                )));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (key, g) in grads {
            let lr = self
                .lr_scales
                .iter()
                .find(|(prefix, _)| key.starts_with(prefix.as_str()))
                .map_or(lr, |(_, scale)| lr * scale);
            let p = model.param(key)?.value.clone();
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("{key}: param {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            let m = self
                .m
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(key.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let mut new_value = p;
            for i in 0..g.numel() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                new_value.data_mut()[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
            model.set_param_value(key, new_value)?;
        }
        Ok(())
    }
}

/// Stack [H,W] images of `pairs[idx]` into ([B,1,H,W] degraded, same clean).
fn batch_pair(pairs: &[Pair], idxs: &[usize]) -> Result<(Tensor, Tensor)> {
    let (h, w) = (pairs[idxs[0]].clean.shape()[0], pairs[idxs[0]].clean.shape()[1]);
    let mut x = Vec::with_capacity(idxs.len() * h * w);
    let mut y = Vec::with_capacity(idxs.len() * h * w);
    for &i in idxs {
        x.extend_from_slice(pairs[i].degraded.data());
        y.extend_from_slice(pairs[i].clean.data());
    }
    Ok((
        Tensor::from_vec(&[idxs.len(), 1, h, w], x)?,
        Tensor::from_vec(&[idxs.len(), 1, h, w], y)?,
    ))
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

enum ForwardRoute<'a> {
    Pretrain,
    Task(&'a str),
}

/// One optimization epoch over `pairs`; returns the sample-weighted mean
/// batch loss.
fn run_epoch(
    model: &mut ModelState,
    opt: &mut Adam,
    pairs: &[Pair],
    route: &ForwardRoute<'_>,
    lr: f64,
    shuffle_seed: u64,
    batch: usize,
) -> Result<f64> {
    let order = shuffled_indices(pairs.len(), shuffle_seed);
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch) {
        let (x, y) = batch_pair(pairs, chunk)?;
        let mut tape = Tape::new();
        let xid = tape.input(x);
        let out = match route {
            ForwardRoute::Pretrain => model.forward_pretrain(&mut tape, xid)?,
            ForwardRoute::Task(tid) => model.forward_task(&mut tape, xid, tid, false, false)?.0,
        };
        let tgt = tape.constant(y);
        let loss = tape.l1_loss(out, tgt)?;
        let grads = backward(&tape, loss)?;
        loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
        opt.step(model, grads.by_param(), lr)?;
    }
    Ok(loss_sum / pairs.len() as f64)
}

/// Identity-map pretraining of the template path on clean images, then a
/// full freeze. Returns the per-epoch loss curve.
pub fn pretrain(model: &mut ModelState, clean: &[Pair], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.is_pretrained() {
        return Err(Error::Registry("model is already pretrained".into()));
    }
    if !model.task_ids().is_empty() {
        return Err(Error::Registry("cannot pretrain once tasks exist".into()));
    }
    if clean.is_empty() {
        return Err(Error::InvalidArg("pretraining needs data".into()));
    }
    let allowed: Vec<String> = model.param_ids().cloned().collect();
    let mut opt = Adam::new(allowed);
    let mut curve = Vec::with_capacity(cfg.epochs_train);
    for epoch in 0..cfg.epochs_train {
        let lr = cosine_lr(epoch, cfg.epochs_train, cfg.lr_init, cfg.lr_final)?;
        let seed = derive_seed(model.seed, "shuffle/pretrain/base", epoch as u64);
        curve.push(run_epoch(model, &mut opt, clean, &ForwardRoute::Pretrain, lr, seed, cfg.batch)?);
    }
    model.freeze_pretrained()?;
    Ok(curve)
}

/// Train a freshly-expanded task on its degraded/clean pairs, then freeze it
/// pending redundancy analysis. Returns the per-epoch loss curve.
pub fn train_task(
    model: &mut ModelState,
    task_id: &str,
    train: &[Pair],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.task_phase(task_id)? != TaskPhase::Expanded {
        return Err(Error::Registry(format!(
            "task '{task_id}' is not open for training"
        )));
    }
    if train.is_empty() {
        return Err(Error::InvalidArg("training needs data".into()));
    }
    let mut opt = Adam::new(model.trainable_parameters(task_id)?)
        .with_prefix_scale("skmm/", cfg.mining_lr_scale);
    let mut curve = Vec::with_capacity(cfg.epochs_train);
    for epoch in 0..cfg.epochs_train {
        let lr = cosine_lr(epoch, cfg.epochs_train, cfg.lr_init, cfg.lr_final)?;
        let seed = derive_seed(model.seed, &format!("shuffle/train/{task_id}"), epoch as u64);
        curve.push(run_epoch(
            model,
            &mut opt,
            train,
            &ForwardRoute::Task(task_id),
            lr,
            seed,
            cfg.batch,
        )?);
    }
    model.mark_trained(task_id)?;
    Ok(curve)
}

/// Mean PSNR of a task's restored outputs over `pairs`, with outputs clamped
/// to the valid image range; batch-of-one forwards for bit-reproducibility.
pub fn eval_task_psnr(model: &ModelState, task_id: &str, pairs: &[Pair]) -> Result<f64> {
    Ok(eval_task_metrics(model, task_id, pairs)?.0)
}

/// Mean (PSNR, SSIM) of a task over `pairs`.
pub fn eval_task_metrics(model: &ModelState, task_id: &str, pairs: &[Pair]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("evaluation needs data".into()));
    }
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for pair in pairs {
        let restored = restore_image(model, task_id, &pair.degraded)?;
        psnr_sum += psnr(&restored, &pair.clean)?;
        ssim_sum += ssim(&restored, &pair.clean)?;
    }
    let n = pairs.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

/// Run one [H,W] image through a task's path; output clamped to [0,1].
pub fn restore_image(model: &ModelState, task_id: &str, img: &Tensor) -> Result<Tensor> {
    restore_image_with(model, task_id, img, false)
}

/// Same as `restore_image` with the mining residual optionally disabled
/// (the ablation toggle).
pub fn restore_image_with(
    model: &ModelState,
    task_id: &str,
    img: &Tensor,
    zero_skmm: bool,
) -> Result<Tensor> {
    if img.rank() != 2 {
        return Err(Error::shape("restore", format!("expected [H,W], got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(&[1, 1, h, w], img.data().to_vec())?);
    let (out, _) = model.forward_task(&mut tape, x, task_id, false, zero_skmm)?;
    let data = tape.value(out).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::from_vec(&[h, w], data)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub post_prune_psnr: f64,
    /// Mean test PSNR after each fine-tune epoch.
    pub psnr_curve: Vec<f64>,
    pub retried: bool,
    pub reverted: bool,
}

/// Fine-tune a pruned task's survivors with a cosine restart at a tenth of
/// the training rate. Regression guard: if the final test PSNR lands below
/// the post-prune level, retry once from the post-prune snapshot at a
/// hundredth of the training rate; if that also regresses, revert to the
/// snapshot and report a flat curve. The task stays in its pruned phase;
/// the caller finalizes.
pub fn fine_tune(
    model: &mut ModelState,
    task_id: &str,
    train: &[Pair],
    test: &[Pair],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if model.task_phase(task_id)? != TaskPhase::Pruned {
        return Err(Error::Registry(format!("task '{task_id}' is not freshly pruned")));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArg("fine-tuning needs train and test data".into()));
    }
    let snapshot = model.clone();
    let post_prune_psnr = eval_task_psnr(model, task_id, test)?;

    let attempt = |model: &mut ModelState, lr_start: f64, tag: &str| -> Result<Vec<f64>> {
        model.reopen_for_finetune(task_id)?;
        let mut opt = Adam::new(model.trainable_parameters(task_id)?)
            .with_prefix_scale("skmm/", cfg.mining_lr_scale);
        let mut curve = Vec::with_capacity(cfg.epochs_finetune);
        for epoch in 0..cfg.epochs_finetune {
            let lr = cosine_lr(epoch, cfg.epochs_finetune, lr_start, cfg.lr_final.min(lr_start))?;
            let seed =
                derive_seed(model.seed, &format!("shuffle/{tag}/{task_id}"), epoch as u64);
            run_epoch(model, &mut opt, train, &ForwardRoute::Task(task_id), lr, seed, cfg.batch)?;
            curve.push(eval_task_psnr(model, task_id, test)?);
        }
        model.set_task_trainable(task_id, false)?;
        Ok(curve)
    };

    let curve = attempt(model, cfg.lr_init / 10.0, "ft")?;
    if curve.last().copied().unwrap_or(post_prune_psnr) >= post_prune_psnr {
        return Ok(FinetuneOutcome { post_prune_psnr, psnr_curve: curve, retried: false, reverted: false });
    }
    *model = snapshot.clone();
    let curve = attempt(model, cfg.lr_init / 100.0, "ft-retry")?;
    if curve.last().copied().unwrap_or(post_prune_psnr) >= post_prune_psnr {
        return Ok(FinetuneOutcome { post_prune_psnr, psnr_curve: curve, retried: true, reverted: false });
    }
    *model = snapshot;
    Ok(FinetuneOutcome {
        post_prune_psnr,
        psnr_curve: vec![post_prune_psnr; cfg.epochs_finetune],
        retried: true,
        reverted: true,
    })
}

/// Fraction of the pruning gap recovered when the metric reads `value`;
/// a gap at or below numerical noise counts as fully recovered.
pub fn recovery_fraction(pre_prune: f64, post_prune: f64, value: f64) -> f64 {
    let gap = pre_prune - post_prune;
    if gap <= 1e-9 {
        1.0
    } else {
        (value - post_prune) / gap
    }
}

/// One evaluation of one task at one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub task_id: String,
    /// Which task's finalization this evaluation ran after.
    pub checkpoint_after: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub params: usize,
    pub macs: u64,
    /// Wall-clock seconds at record creation; not serialized (results must
    /// be recomputable bit-exactly).
    pub timestamp: Option<u64>,
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from("task_id,checkpoint_after,psnr_db,ssim,params,macs\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.task_id, r.checkpoint_after, r.psnr_db, r.ssim, r.params, r.macs
        ));
    }
    s
}

pub fn records_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Config("empty records file".into()))?;
    if header != "task_id,checkpoint_after,psnr_db,ssim,params,macs" {
        return Err(Error::Config(format!("unexpected records header '{header}'")));
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 6 {
            return Err(Error::Config(format!("line {}: expected 6 cells", ln + 2)));
        }
        out.push(EvalRecord {
            task_id: cells[0].to_string(),
            checkpoint_after: cells[1].to_string(),
            psnr_db: cells[2]
                .parse()
                .map_err(|e| Error::Config(format!("line {}: psnr: {e}", ln + 2)))?,
            ssim: cells[3]
                .parse()
                .map_err(|e| Error::Config(format!("line {}: ssim: {e}", ln + 2)))?,
            params: cells[4]
                .parse()
                .map_err(|e| Error::Config(format!("line {}: params: {e}", ln + 2)))?,
            macs: cells[5]
                .parse()
                .map_err(|e| Error::Config(format!("line {}: macs: {e}", ln + 2)))?,
            timestamp: None,
        });
    }
    Ok(out)
}

/// Evaluate a set of finalized tasks; `tests` maps task id to its test
/// pairs. Records activated costs for the stated input size.
pub fn evaluate(
    model: &ModelState,
    checkpoint_after: &str,
    tests: &[(String, Vec<Pair>)],
    input_hw: (usize, usize),
) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::with_capacity(tests.len());
    for (task_id, pairs) in tests {
        if model.task_phase(task_id)? != TaskPhase::Finalized {
            return Err(Error::Registry(format!(
                "task '{task_id}' must be finalized before evaluation"
            )));
        }
        let (p, s) = eval_task_metrics(model, task_id, pairs)?;
        let (params, macs) = count_active_cost(model, task_id, input_hw.0, input_hw.1)?;
        out.push(EvalRecord {
            task_id: task_id.clone(),
            checkpoint_after: checkpoint_after.to_string(),
            psnr_db: p,
            ssim: s,
            params,
            macs,
            timestamp: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .ok()
                .map(|d| d.as_secs()),
        });
    }
    Ok(out)
}

/// Parameters and conv/linear multiply-accumulates activated when `task_id`
/// restores one [h, w] image: shared ends, the task's surviving path, every
/// constituent path (compounds), and the mining bank. The pretrained
/// template groups are not activated at task inference and are excluded.
/// Norms, activations, and the mining matrix products are excluded from the
/// MAC estimate (convs and linears only).
pub fn count_active_cost(
    model: &ModelState,
    task_id: &str,
    h: usize,
    w: usize,
) -> Result<(usize, u64)> {
    let entry = model.task(task_id)?;
    let div = model.config.resolution_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::InvalidArg(format!(
            "input {h}x{w} must divide by {div}"
        )));
    }
    let mut params = 0usize;
    let mut macs = 0u64;
    for id in ["fe/w", "fe/b", "bottleneck/w", "bottleneck/b", "rm/w", "rm/b"] {
        params += model.param(id)?.value.numel();
    }
    let s_total = model.config.num_stages();
    let half = s_total / 2;
    let c0 = model.config.stages[0].width;
    let c_mid = model.config.stages[half - 1].width;
    let c_last = model.config.stages[s_total - 1].width;
    macs += (c0 * 9 * h * w) as u64; // entrance conv, 1 input channel
    let inner = (h >> (half - 1)) * (w >> (half - 1));
    macs += (c_mid * c_mid * 9 * inner) as u64;
    macs += (c_last * 9 * h * w) as u64; // exit conv, 1 output channel

    // every activated path: the task's own and (compound) its constituents'
    let mut path_tasks = vec![task_id.to_string()];
    if entry.spec.is_compound() {
        path_tasks.extend(entry.spec.constituents());
    }
    for tid in &path_tasks {
        let t = model.task(tid)?;
        params += model.task_path_param_count(tid)?;
        for s in 0..s_total {
            let stage = model.config.stages[s];
            let m = stage.group_width();
            let mh = m.div_ceil(2);
            let iw = if s == 0 { c0 } else { model.config.stages[s - 1].width };
            let depth = if s < half { s } else { s_total - 1 - s };
            let res = ((h >> depth) * (w >> depth)) as u64;
            let n_g = t.groups[s].len() as u64;
            // head 1x1 per group
            macs += n_g * (m * iw) as u64 * res;
            for _ in 0..stage.blocks {
                // body conv 3x3 per group
                macs += n_g * (m * m * 9) as u64 * res;
                // gate linears per group (per sample, not per pixel)
                macs += n_g * (mh * m + m * mh) as u64;
            }
            // tail 1x1 per group
            macs += n_g * (stage.width * m) as u64 * res;
        }
    }

    if entry.has_skmm {
        let mm = model.config.mining_channels;
        let r = model.config.mining_rank;
        let k = entry.spec.constituents().len();
        for name in [
            "proj_c_w", "proj_c_b", "proj_h_w", "proj_h_b", "hyper_w1", "hyper_b1", "hyper_w2",
            "hyper_b2", "resid_w", "resid_b",
        ] {
            params += model.param(&format!("skmm/{task_id}/{name}"))?.value.numel();
        }
        let hw64 = (h * w) as u64;
        macs += (mm * c_last * 9) as u64 * hw64; // compound projection
        macs += (mm * k * c_last * 9) as u64 * hw64; // history projection
        macs += (4 * mm * 2 * mm) as u64; // hypernetwork, first linear
        macs += (2 * mm * r * 4 * mm) as u64; // hypernetwork, second linear
        macs += (c_last * mm * 9) as u64 * hw64; // residual map
    }
    Ok((params, macs))
}

/// Everything recorded about one task's pass through the loop.
#[derive(Clone, Debug)]
pub struct TaskRunRecord {
    pub task_id: String,
    pub train_losses: Vec<f64>,
    pub pre_prune_psnr: f64,
    pub post_prune_psnr: f64,
    pub finetune_psnr_curve: Vec<f64>,
    pub finetune_retried: bool,
    pub finetune_reverted: bool,
    pub params_before_prune: usize,
    pub params_after_prune: usize,
    pub sep: SepReport,
    pub survivors: Vec<Vec<usize>>,
    /// Compound-only ablation, measured after finalization.
    pub skmm_on_psnr: Option<f64>,
    pub skmm_off_psnr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<EvalRecord>,
    pub tasks: Vec<TaskRunRecord>,
    /// After each checkpoint: task id -> owned-parameter hash for every task
    /// finalized so far, plus "shared" -> hash of everything outside tasks.
    pub hash_ledger: Vec<BTreeMap<String, String>>,
    pub pretrain_losses: Vec<f64>,
}

/// Mean PSNR over a compound task's test set with the mining residual on
/// and forcibly zeroed.
pub fn skmm_ablation(
    model: &ModelState,
    task_id: &str,
    test: &[Pair],
) -> Result<(f64, f64)> {
    let mut on = 0.0;
    let mut off = 0.0;
    for pair in test {
        let with = restore_image_with(model, task_id, &pair.degraded, false)?;
        let without = restore_image_with(model, task_id, &pair.degraded, true)?;
        on += psnr(&with, &pair.clean)?;
        off += psnr(&without, &pair.clean)?;
    }
    Ok((on / test.len() as f64, off / test.len() as f64))
}

/// The full continual loop over `sequence`: pretrain (if not already done),
/// then per task expand -> train -> redundancy-prune -> fine-tune ->
/// finalize -> evaluate every task finalized so far. Optionally writes a
/// checkpoint directory per task under `checkpoint_root`.
pub fn continual_run(
    model: &mut ModelState,
    sequence: &[TaskSpec],
    cfg: &TrainConfig,
    checkpoint_root: Option<&Path>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let data_seed = derive_seed(model.seed, "corpus", 0);
    let mut pretrain_losses = Vec::new();
    if !model.is_pretrained() {
        let clean_spec = TaskSpec::parse("C")?;
        let mut clean = build_corpus(
            &clean_spec,
            cfg.n_train,
            cfg.n_test,
            cfg.image_h,
            cfg.image_w,
            derive_seed(model.seed, "pretrain-data", 0),
        )?;
        // identity mapping: the template path learns clean -> clean
        for pair in clean.train.iter_mut() {
            pair.degraded = pair.clean.clone();
        }
        pretrain_losses = pretrain(model, &clean.train, cfg)?;
    }

    let mut records = Vec::new();
    let mut task_records = Vec::new();
    let mut hash_ledger = Vec::new();
    let mut corpora: Vec<(String, crate::degrade::Corpus)> = Vec::new();

    for spec in sequence {
        let task_id = spec.id.clone();
        let corpus = build_corpus(
            spec,
            cfg.n_train,
            cfg.n_test,
            cfg.image_h,
            cfg.image_w,
            data_seed,
        )?;

        model.expand_for_task(&task_id)?;
        let train_losses = train_task(model, &task_id, &corpus.train, cfg)?;
        let pre_prune_psnr = eval_task_psnr(model, &task_id, &corpus.test)?;

        let pool = make_sample_pool(
            spec,
            cfg.pool_n,
            derive_seed(model.seed, &format!("pool/{task_id}"), 0),
            cfg.image_h,
            cfg.image_w,
        )?;
        let pool_inputs: Vec<Tensor> =
            pool.pairs.iter().map(|p| p.degraded.clone()).collect();
        let sep = run_sep(model, &task_id, &pool_inputs, cfg.rho)?;

        let ft = fine_tune(model, &task_id, &corpus.train, &corpus.test, cfg)?;
        model.finalize_task(&task_id)?;

        let (skmm_on_psnr, skmm_off_psnr) = if spec.is_compound() {
            let (on, off) = skmm_ablation(model, &task_id, &corpus.test)?;
            (Some(on), Some(off))
        } else {
            (None, None)
        };

        task_records.push(TaskRunRecord {
            task_id: task_id.clone(),
            train_losses,
            pre_prune_psnr,
            post_prune_psnr: ft.post_prune_psnr,
            finetune_psnr_curve: ft.psnr_curve.clone(),
            finetune_retried: ft.retried,
            finetune_reverted: ft.reverted,
            params_before_prune: sep.params_before,
            params_after_prune: sep.params_after,
            survivors: model.task(&task_id)?.groups.clone(),
            sep,
            skmm_on_psnr,
            skmm_off_psnr,
        });

        corpora.push((task_id.clone(), corpus));
        let tests: Vec<(String, Vec<Pair>)> =
            corpora.iter().map(|(id, c)| (id.clone(), c.test.clone())).collect();
        records.extend(evaluate(model, &task_id, &tests, (cfg.image_h, cfg.image_w))?);

        let mut hashes = BTreeMap::new();
        for done in model.task_ids() {
            if model.task_phase(done)? == TaskPhase::Finalized {
                hashes.insert(done.clone(), model.task_param_hash(done)?);
            }
        }
        hashes.insert("shared".to_string(), model.shared_param_hash()?);
        hash_ledger.push(hashes);

        if let Some(root) = checkpoint_root {
            crate::checkpoint::save_checkpoint(model, &root.join(format!("after-{task_id}")))?;
        }
    }
    Ok(RunOutcome { records, tasks: task_records, hash_ledger, pretrain_losses })
}

/// Rows = tasks, columns = checkpoints; entry = PSNR at that checkpoint
/// minus PSNR at the task's own finalization (None before the task exists).
/// Strict isolation makes every present entry exactly zero.
pub fn forgetting_matrix(records: &[EvalRecord]) -> (Vec<String>, Vec<Vec<Option<f64>>>) {
    let mut checkpoints = Vec::new();
    for r in records {
        if !checkpoints.contains(&r.checkpoint_after) {
            checkpoints.push(r.checkpoint_after.clone());
        }
    }
    let tasks = checkpoints.clone(); // one task finalized per checkpoint, same order
    let matrix = tasks
        .iter()
        .map(|task| {
            let own = records
                .iter()
                .find(|r| r.task_id == *task && r.checkpoint_after == *task)
                .map(|r| r.psnr_db);
            checkpoints
                .iter()
                .map(|cp| {
                    records
                        .iter()
                        .find(|r| r.task_id == *task && r.checkpoint_after == *cp)
                        .and_then(|r| own.map(|o| r.psnr_db - o))
                })
                .collect()
        })
        .collect();
    (tasks, matrix)
}

/// Markdown table of the final checkpoint's records plus the forgetting
/// matrix.
pub fn records_to_markdown(records: &[EvalRecord]) -> String {
    let mut s = String::new();
    s.push_str("# Continual restoration results\n\n");
    s.push_str(
        "Cost columns count parameters and conv/linear multiply-accumulates on the \
         activated route (norms and activations excluded).\n\n",
    );
    if records.is_empty() {
        s.push_str("## Final evaluations\n\n");
        s.push_str("| task | PSNR (dB) | SSIM | params | MACs |\n");
        s.push_str("|------|-----------|------|--------|------|\n");
        return s;
    }
    let last_cp = &records.last().expect("non-empty").checkpoint_after;
    s.push_str(&format!("## Final evaluations (after task {last_cp})\n\n"));
    s.push_str("| task | PSNR (dB) | SSIM | params | MACs |\n");
    s.push_str("|------|-----------|------|--------|------|\n");
    for r in records.iter().filter(|r| &r.checkpoint_after == last_cp) {
        s.push_str(&format!(
            "| {} | {:.4} | {:.6} | {} | {} |\n",
            r.task_id, r.psnr_db, r.ssim, r.params, r.macs
        ));
    }
    let (tasks, matrix) = forgetting_matrix(records);
    s.push_str("\n## Forgetting matrix (PSNR drift vs own finalization, dB)\n\n");
    s.push_str("| task \\ after |");
    for cp in &tasks {
        s.push_str(&format!(" {cp} |"));
    }
    s.push_str("\n|---|");
    for _ in &tasks {
        s.push_str("---|");
    }
    s.push('\n');
    for (task, row) in tasks.iter().zip(&matrix) {
        s.push_str(&format!("| {task} |"));
        for cell in row {
            match cell {
                Some(v) => s.push_str(&format!(" {v:+.6} |")),
                None => s.push_str(" — |"),
            }
        }
        s.push('\n');
    }
    s
}
