//! The group-isolated U-shaped restoration network: shared feature-extractor
//! / bottleneck / reconstruction convs, per-stage channel groups with
//! residual blocks and squeeze-excite gating, per-task group expansion with
//! template-copy initialization, and strict freezing so every finished task's
//! path is immutable.
//!
//! Parameter naming (the checkpoint and gradient key space):
//!   fe/{w,b}                         shared 3x3 entrance conv, 1 -> C_0
//!   bottleneck/{w,b}                 shared 3x3 conv at the innermost scale
//!   rm/{w,b}                         shared 3x3 exit conv, C_last -> 1
//!   {path}/s{s}/head/g{o}/{w,b}      1x1 head rows for group o of stage s
//!   {path}/s{s}/b{b}/g{o}/<name>     block-body params for group o
//!   {path}/s{s}/tail/g{o}/w          1x1 tail columns reading group o
//!   {path}/s{s}/tail/b               shared tail bias of stage s
//! where {path} is "ori" for the pretrained template path or "task/<id>" for
//! a task's own groups, and o is the group's original index, stable for the
//! life of the task even after pruning removes siblings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, TensorId};
use crate::degrade::{derive_seed, TaskSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GNORM_EPS: f64 = 1e-5;

/// Per-stage layout: base channel width, base group count, residual blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub width: usize,
    pub groups: usize,
    pub blocks: usize,
}

impl StageConfig {
    /// Channels per group.
    pub fn group_width(&self) -> usize {
        self.width / self.groups
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub stages: Vec<StageConfig>,
    /// Latent width M of the mining banks on compound tasks.
    pub mining_channels: usize,
    /// Rank bound R of the mining matrix factors.
    pub mining_rank: usize,
}

impl NetworkConfig {
    pub fn new(widths: &[usize], groups: &[usize], blocks: usize) -> NetworkConfig {
        NetworkConfig {
            stages: widths
                .iter()
                .zip(groups)
                .map(|(&width, &groups)| StageConfig { width, groups, blocks })
                .collect(),
            mining_channels: 32,
            mining_rank: 8,
        }
    }

    pub fn with_mining(mut self, channels: usize, rank: usize) -> NetworkConfig {
        self.mining_channels = channels;
        self.mining_rank = rank;
        self
    }

    /// Laptop-sized four-stage configuration.
    pub fn desk() -> NetworkConfig {
        NetworkConfig::new(&[8, 16, 16, 8], &[2, 4, 4, 2], 2)
    }

    /// Full-sized six-stage configuration.
    pub fn full() -> NetworkConfig {
        NetworkConfig::new(&[32, 128, 512, 512, 128, 32], &[8, 16, 32, 32, 16, 8], 2)
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages.len();
        if s < 2 || s % 2 != 0 {
            return Err(Error::InvalidArg(format!(
                "stage count {s} must be even and at least 2 (encoder/decoder symmetry)"
            )));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.width == 0 || st.groups == 0 || st.blocks == 0 {
                return Err(Error::InvalidArg(format!("stage {i} has a zero dimension")));
            }
            if st.width % st.groups != 0 {
                return Err(Error::InvalidArg(format!(
                    "stage {i} width {} not divisible by {} groups",
                    st.width, st.groups
                )));
            }
        }
        for i in 0..s / 2 {
            if self.stages[i].width != self.stages[s - 1 - i].width {
                return Err(Error::InvalidArg(format!(
                    "widths must mirror across the middle for skip adds: stage {i} is {}, stage {} is {}",
                    self.stages[i].width,
                    s - 1 - i,
                    self.stages[s - 1 - i].width
                )));
            }
        }
        if self.mining_rank == 0 || self.mining_rank >= self.mining_channels {
            return Err(Error::InvalidArg(format!(
                "mining rank {} must sit in [1, {})",
                self.mining_rank, self.mining_channels
            )));
        }
        Ok(())
    }

    /// Input width of stage `s`: the previous stage's base width (the first
    /// stage reads the entrance conv, which emits its own base width).
    fn stage_input_width(&self, s: usize) -> usize {
        if s == 0 {
            self.stages[0].width
        } else {
            self.stages[s - 1].width
        }
    }

    /// Spatial downsampling factor the input must divide by.
    pub fn resolution_divisor(&self) -> usize {
        1 << (self.stages.len() / 2 - 1)
    }
}

/// One learnable tensor plus its freeze flag.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
}

/// Lifecycle of a task's path: freshly expanded (trainable), trained (frozen
/// awaiting redundancy analysis), pruned (survivors fixed, fine-tune may
/// reopen them), finalized (immutable forever).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskPhase {
    Expanded,
    Trained,
    Pruned,
    Finalized,
}

#[derive(Clone, Debug)]
pub struct TaskEntry {
    pub spec: TaskSpec,
    pub phase: TaskPhase,
    /// Per stage: surviving group indices (original numbering), ascending.
    pub groups: Vec<Vec<usize>>,
    pub has_skmm: bool,
}

/// Per-group features captured from the last residual block of every stage,
/// in survivor order; the raw material for redundancy analysis.
#[derive(Clone, Debug)]
pub struct CapturedFeatures {
    pub per_stage: Vec<Vec<Tensor>>,
}

/// Which parameter family a forward pass routes through.
#[derive(Clone, Copy, Debug)]
enum PathRef<'a> {
    Base,
    Task(&'a str),
}

impl<'a> PathRef<'a> {
    fn prefix(&self) -> String {
        match self {
            PathRef::Base => "ori".to_string(),
            PathRef::Task(id) => format!("task/{id}"),
        }
    }
}

/// The whole model: configuration, parameter store, and task registry.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub seed: u64,
    pub(crate) params: BTreeMap<String, Parameter>,
    pub(crate) tasks: BTreeMap<String, TaskEntry>,
    pub(crate) task_order: Vec<String>,
    pub(crate) pretrained: bool,
}

const BODY_PARAM_NAMES: [&str; 8] = [
    "gnorm_gamma",
    "gnorm_beta",
    "conv_w",
    "conv_b",
    "gca_w1",
    "gca_b1",
    "gca_w2",
    "gca_b2",
];

/// Build a fresh backbone with deterministic seeded initialization; no tasks
/// registered, every parameter trainable (the pretraining phase).
pub fn build_backbone(config: NetworkConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut model = ModelState {
        config,
        seed,
        params: BTreeMap::new(),
        tasks: BTreeMap::new(),
        task_order: Vec::new(),
        pretrained: false,
    };
    let c0 = model.config.stages[0].width;
    let c_last = model.config.stages[model.config.num_stages() - 1].width;
    let c_mid = model.config.stages[model.config.num_stages() / 2 - 1].width;
    model.init_he("fe/w", &[c0, 1, 3, 3], 9);
    model.init_zeros("fe/b", &[c0]);
    model.init_he("bottleneck/w", &[c_mid, c_mid, 3, 3], 9 * c_mid);
    model.init_zeros("bottleneck/b", &[c_mid]);
    model.init_he("rm/w", &[1, c_last, 3, 3], 9 * c_last);
    model.init_zeros("rm/b", &[1]);
    for s in 0..model.config.num_stages() {
        let groups: Vec<usize> = (0..model.config.stages[s].groups).collect();
        model.init_stage_path("ori", s, &groups, true)?;
    }
    Ok(model)
}

impl ModelState {
    pub(crate) fn init_he(&mut self, id: &str, shape: &[usize], fan_in: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("init/{id}"), 0));
        let value = Tensor::he_normal(shape, fan_in, &mut rng);
        self.params.insert(id.to_string(), Parameter { value, trainable: true });
    }

    pub(crate) fn init_zeros(&mut self, id: &str, shape: &[usize]) {
        self.params
            .insert(id.to_string(), Parameter { value: Tensor::zeros(shape), trainable: true });
    }

    fn init_const(&mut self, id: &str, shape: &[usize], v: f64) {
        self.params
            .insert(id.to_string(), Parameter { value: Tensor::full(shape, v), trainable: true });
    }

    /// Initialize head rows, block bodies, and tail columns for `groups` of
    /// stage `s` under `prefix`. Bodies are He-random when `fresh_bodies`,
    /// otherwise copied verbatim from the template path.
    fn init_stage_path(
        &mut self,
        prefix: &str,
        s: usize,
        groups: &[usize],
        fresh_bodies: bool,
    ) -> Result<()> {
        let stage = self.config.stages[s];
        let m = stage.group_width();
        let mh = m.div_ceil(2);
        let iw = self.config.stage_input_width(s);
        for &o in groups {
            self.init_he(&format!("{prefix}/s{s}/head/g{o}/w"), &[m, iw, 1, 1], iw);
            self.init_zeros(&format!("{prefix}/s{s}/head/g{o}/b"), &[m]);
            for b in 0..stage.blocks {
                for name in BODY_PARAM_NAMES {
                    let id = format!("{prefix}/s{s}/b{b}/g{o}/{name}");
                    if fresh_bodies {
                        match name {
                            "gnorm_gamma" => self.init_const(&id, &[m], 1.0),
                            "gnorm_beta" => self.init_zeros(&id, &[m]),
                            "conv_w" => self.init_he(&id, &[m, m, 3, 3], 9 * m),
                            "conv_b" => self.init_zeros(&id, &[m]),
                            "gca_w1" => self.init_he(&id, &[mh, m], m),
                            "gca_b1" => self.init_zeros(&id, &[mh]),
                            "gca_w2" => self.init_he(&id, &[m, mh], mh),
                            "gca_b2" => self.init_zeros(&id, &[m]),
                            _ => unreachable!(),
                        }
                    } else {
                        let src = format!("ori/s{s}/b{b}/g{o}/{name}");
                        let value = self
                            .params
                            .get(&src)
                            .ok_or_else(|| Error::Registry(format!("missing template {src}")))?
                            .value
                            .clone();
                        self.params.insert(id, Parameter { value, trainable: true });
                    }
                }
            }
            let tail_id = format!("{prefix}/s{s}/tail/g{o}/w");
            if fresh_bodies {
                self.init_he(&tail_id, &[stage.width, m, 1, 1], m);
            } else {
                // like the block bodies, start the tail from the template so
                // a new path begins close to the pretrained mapping (only the
                // head rows stay freshly random)
                let src = format!("ori/s{s}/tail/g{o}/w");
                let value = self
                    .params
                    .get(&src)
                    .ok_or_else(|| Error::Registry(format!("missing template {src}")))?
                    .value
                    .clone();
                self.params.insert(tail_id, Parameter { value, trainable: true });
            }
        }
        let tail_b = format!("{prefix}/s{s}/tail/b");
        if fresh_bodies {
            self.init_zeros(&tail_b, &[stage.width]);
        } else {
            let src = format!("ori/s{s}/tail/b");
            let value = self
                .params
                .get(&src)
                .ok_or_else(|| Error::Registry(format!("missing template {src}")))?
                .value
                .clone();
            self.params.insert(tail_b, Parameter { value, trainable: true });
        }
        Ok(())
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_order
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskEntry> {
        self.tasks
            .get(task_id)
            .ok_or_else(|| Error::Registry(format!("unknown task '{task_id}'")))
    }

    pub fn param(&self, id: &str) -> Result<&Parameter> {
        self.params
            .get(id)
            .ok_or_else(|| Error::Registry(format!("unknown parameter '{id}'")))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// All parameters in sorted-id order.
    pub fn parameters(&self) -> impl Iterator<Item = (&String, &Parameter)> {
        self.params.iter()
    }

    /// Reassemble a model from its serialized parts (checkpoint loading).
    pub(crate) fn from_parts(
        config: NetworkConfig,
        seed: u64,
        params: BTreeMap<String, Parameter>,
        tasks: BTreeMap<String, TaskEntry>,
        task_order: Vec<String>,
        pretrained: bool,
    ) -> Result<ModelState> {
        config.validate()?;
        let model = ModelState { config, seed, params, tasks, task_order, pretrained };
        // every task's surviving groups must have their parameters present
        for (tid, entry) in &model.tasks {
            for (s, groups) in entry.groups.iter().enumerate() {
                for &o in groups {
                    let probe = format!("task/{tid}/s{s}/head/g{o}/w");
                    if !model.params.contains_key(&probe) {
                        return Err(Error::Checkpoint(format!(
                            "task '{tid}' lists stage-{s} group {o} but '{probe}' is missing"
                        )));
                    }
                }
            }
        }
        Ok(model)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Overwrite one parameter's value (shape-checked).
    pub fn set_param_value(&mut self, id: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(id)
            .ok_or_else(|| Error::Registry(format!("unknown parameter '{id}'")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param_value",
                format!("{id}: stored {:?} vs new {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn remove_param(&mut self, id: &str) -> Result<()> {
        self.params
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::Registry(format!("unknown parameter '{id}'")))
    }

    /// Freeze everything built so far and mark pretraining complete; the
    /// template path and the shared ends become immutable.
    pub fn freeze_pretrained(&mut self) -> Result<()> {
        if self.pretrained {
            return Err(Error::Registry("pretraining already frozen".into()));
        }
        if !self.tasks.is_empty() {
            return Err(Error::Registry("cannot pretrain after tasks exist".into()));
        }
        for p in self.params.values_mut() {
            p.trainable = false;
        }
        self.pretrained = true;
        Ok(())
    }

    /// Register a task: append one fresh set of base-count groups per stage,
    /// bodies copied bit-for-bit from the pretrained templates, head rows and
    /// tail freshly seeded. Compound tasks also get a mining bank and require
    /// their constituents to be finalized first.
    pub fn expand_for_task(&mut self, task_id: &str) -> Result<()> {
        if !self.pretrained {
            return Err(Error::Registry("expansion requires completed pretraining".into()));
        }
        if self.tasks.contains_key(task_id) {
            return Err(Error::Registry(format!("task '{task_id}' already registered")));
        }
        let spec = TaskSpec::parse(task_id)?;
        let constituents = if spec.is_compound() { spec.constituents() } else { Vec::new() };
        for constituent in constituents {
            match self.tasks.get(&constituent) {
                Some(e) if e.phase == TaskPhase::Finalized => {}
                Some(_) => {
                    return Err(Error::Registry(format!(
                        "constituent '{constituent}' of '{task_id}' is not finalized yet"
                    )))
                }
                None => {
                    return Err(Error::Registry(format!(
                        "constituent '{constituent}' must be registered and finalized before '{task_id}'"
                    )))
                }
            }
        }
        let prefix = format!("task/{task_id}");
        let mut groups = Vec::new();
        for s in 0..self.config.num_stages() {
            let all: Vec<usize> = (0..self.config.stages[s].groups).collect();
            self.init_stage_path(&prefix, s, &all, false)?;
            groups.push(all);
        }
        let has_skmm = spec.is_compound();
        if has_skmm {
            crate::skmm::init_bank(self, task_id, &spec)?;
        }
        self.tasks.insert(
            task_id.to_string(),
            TaskEntry { spec, phase: TaskPhase::Expanded, groups, has_skmm },
        );
        self.task_order.push(task_id.to_string());
        Ok(())
    }

    /// All parameter ids owned by a task: its path and (compound) its mining
    /// bank.
    pub fn owned_parameter_ids(&self, task_id: &str) -> Result<Vec<String>> {
        self.task(task_id)?;
        let path = format!("task/{task_id}/");
        let bank = format!("skmm/{task_id}/");
        Ok(self
            .params
            .keys()
            .filter(|k| k.starts_with(&path) || k.starts_with(&bank))
            .cloned()
            .collect())
    }

    /// Ids the optimizer may update right now: the task's currently-trainable
    /// owned parameters. Finalized tasks have none and asking is an error.
    pub fn trainable_parameters(&self, task_id: &str) -> Result<Vec<String>> {
        let entry = self.task(task_id)?;
        if entry.phase == TaskPhase::Finalized {
            return Err(Error::Registry(format!("task '{task_id}' is finalized")));
        }
        Ok(self
            .owned_parameter_ids(task_id)?
            .into_iter()
            .filter(|id| self.params[id].trainable)
            .collect())
    }

    pub(crate) fn set_task_trainable(&mut self, task_id: &str, on: bool) -> Result<()> {
        for id in self.owned_parameter_ids(task_id)? {
            self.params.get_mut(&id).expect("owned id exists").trainable = on;
        }
        Ok(())
    }

    pub fn task_phase(&self, task_id: &str) -> Result<TaskPhase> {
        Ok(self.task(task_id)?.phase)
    }

    pub(crate) fn set_task_phase(&mut self, task_id: &str, phase: TaskPhase) -> Result<()> {
        self.task(task_id)?;
        self.tasks.get_mut(task_id).expect("checked").phase = phase;
        Ok(())
    }

    /// Freeze a trained task's parameters pending redundancy analysis.
    pub fn mark_trained(&mut self, task_id: &str) -> Result<()> {
        if self.task_phase(task_id)? != TaskPhase::Expanded {
            return Err(Error::Registry(format!("task '{task_id}' is not in its training window")));
        }
        self.set_task_trainable(task_id, false)?;
        self.set_task_phase(task_id, TaskPhase::Trained)
    }

    /// Reopen a pruned task's survivors for fine-tuning.
    pub fn reopen_for_finetune(&mut self, task_id: &str) -> Result<()> {
        if self.task_phase(task_id)? != TaskPhase::Pruned {
            return Err(Error::Registry(format!("task '{task_id}' has not been pruned")));
        }
        self.set_task_trainable(task_id, true)
    }

    /// Permanently freeze a task; its path never changes again.
    pub fn finalize_task(&mut self, task_id: &str) -> Result<()> {
        if self.task_phase(task_id)? == TaskPhase::Finalized {
            return Err(Error::Registry(format!("task '{task_id}' is already finalized")));
        }
        self.set_task_trainable(task_id, false)?;
        self.set_task_phase(task_id, TaskPhase::Finalized)
    }

    /// Per-stage (total groups, total channels) across the base path and all
    /// live task groups.
    pub fn growth_totals(&self) -> Vec<(usize, usize)> {
        (0..self.config.num_stages())
            .map(|s| {
                let m = self.config.stages[s].group_width();
                let g = self.config.stages[s].groups
                    + self.tasks.values().map(|t| t.groups[s].len()).sum::<usize>();
                (g, g * m)
            })
            .collect()
    }

    /// Parameter count of the task's backbone path alone (mining bank
    /// excluded); shrinks when groups are pruned.
    pub fn task_path_param_count(&self, task_id: &str) -> Result<usize> {
        self.task(task_id)?;
        let path = format!("task/{task_id}/");
        Ok(self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(&path))
            .map(|(_, p)| p.value.numel())
            .sum())
    }

    /// Hex SHA-256 over the listed parameters (sorted by id): id bytes, shape,
    /// then little-endian values. The byte-level freeze witness.
    pub fn hash_ids<'b>(&self, ids: impl IntoIterator<Item = &'b String>) -> Result<String> {
        let mut sorted: Vec<&String> = ids.into_iter().collect();
        sorted.sort();
        let mut hasher = Sha256::new();
        for id in sorted {
            let p = self.param(id)?;
            hasher.update(id.as_bytes());
            hasher.update([0u8]);
            for &d in p.value.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hex_string(&hasher.finalize()))
    }

    /// Hash of one task's owned parameters.
    pub fn task_param_hash(&self, task_id: &str) -> Result<String> {
        let ids = self.owned_parameter_ids(task_id)?;
        self.hash_ids(ids.iter())
    }

    /// Hash of everything outside any task: shared ends plus the template
    /// path.
    pub fn shared_param_hash(&self) -> Result<String> {
        let ids: Vec<&String> =
            self.params.keys().filter(|k| !k.starts_with("task/") && !k.starts_with("skmm/")).collect();
        self.hash_ids(ids)
    }

    /// Insert a parameter into the tape: gradient-tracked leaf when
    /// trainable, constant otherwise (so frozen branches cost no backward
    /// work and can never leak gradients).
    pub(crate) fn tape_param(&self, tape: &mut Tape, id: &str) -> Result<TensorId> {
        let p = self.param(id)?;
        Ok(if p.trainable {
            tape.param(id, p.value.clone())
        } else {
            tape.constant(p.value.clone())
        })
    }

    fn apply_gca(
        &self,
        tape: &mut Tape,
        y: TensorId,
        base: &str,
    ) -> Result<TensorId> {
        let w1 = self.tape_param(tape, &format!("{base}/gca_w1"))?;
        let b1 = self.tape_param(tape, &format!("{base}/gca_b1"))?;
        let w2 = self.tape_param(tape, &format!("{base}/gca_w2"))?;
        let b2 = self.tape_param(tape, &format!("{base}/gca_b2"))?;
        let pooled = tape.global_avg_pool(y)?;
        let h = tape.linear(pooled, w1, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, w2, b2)?;
        let gate = tape.sigmoid(h)?;
        tape.channel_scale(y, gate)
    }

    /// One residual block over the stage tensor: per group, normalize, 3x3
    /// conv, GELU, squeeze-excite gate; concatenate and add back.
    fn apply_block(
        &self,
        tape: &mut Tape,
        x: TensorId,
        prefix: &str,
        s: usize,
        b: usize,
        groups: &[usize],
    ) -> Result<TensorId> {
        let m = self.config.stages[s].group_width();
        let mut branches = Vec::with_capacity(groups.len());
        for (pos, &o) in groups.iter().enumerate() {
            let base = format!("{prefix}/s{s}/b{b}/g{o}");
            let xi = tape.channel_slice(x, pos * m, m)?;
            let gamma = self.tape_param(tape, &format!("{base}/gnorm_gamma"))?;
            let beta = self.tape_param(tape, &format!("{base}/gnorm_beta"))?;
            let gn = tape.group_norm(xi, gamma, beta, 1, GNORM_EPS)?;
            let cw = self.tape_param(tape, &format!("{base}/conv_w"))?;
            let cb = self.tape_param(tape, &format!("{base}/conv_b"))?;
            let conv = tape.conv2d(gn, cw, Some(cb), 1, 1)?;
            let act = tape.gelu(conv)?;
            branches.push(self.apply_gca(tape, act, &base)?);
        }
        let cat = tape.channel_concat(&branches)?;
        tape.add(x, cat)
    }

    /// One full stage: head rows per group, residual blocks, tail back to the
    /// stage's base width. Optionally captures each group's slice of the last
    /// block's output.
    fn apply_stage(
        &self,
        tape: &mut Tape,
        x: TensorId,
        prefix: &str,
        s: usize,
        groups: &[usize],
        capture: bool,
    ) -> Result<(TensorId, Vec<Tensor>)> {
        if groups.is_empty() {
            return Err(Error::Registry(format!("stage {s} of path '{prefix}' has no groups")));
        }
        let m = self.config.stages[s].group_width();
        let mut head_parts = Vec::with_capacity(groups.len());
        for &o in groups {
            let w = self.tape_param(tape, &format!("{prefix}/s{s}/head/g{o}/w"))?;
            let b = self.tape_param(tape, &format!("{prefix}/s{s}/head/g{o}/b"))?;
            head_parts.push(tape.conv2d(x, w, Some(b), 1, 0)?);
        }
        let mut cur = tape.channel_concat(&head_parts)?;
        for b in 0..self.config.stages[s].blocks {
            cur = self.apply_block(tape, cur, prefix, s, b, groups)?;
        }
        let captured = if capture {
            let value = tape.value(cur);
            (0..groups.len()).map(|pos| slice_channels(value, pos * m, m)).collect()
        } else {
            Vec::new()
        };
        let tail_bias = self.tape_param(tape, &format!("{prefix}/s{s}/tail/b"))?;
        let mut tail_out: Option<TensorId> = None;
        for (pos, &o) in groups.iter().enumerate() {
            let xi = tape.channel_slice(cur, pos * m, m)?;
            let w = self.tape_param(tape, &format!("{prefix}/s{s}/tail/g{o}/w"))?;
            let bias = if pos == 0 { Some(tail_bias) } else { None };
            let part = tape.conv2d(xi, w, bias, 1, 0)?;
            tail_out = Some(match tail_out {
                None => part,
                Some(acc) => tape.add(acc, part)?,
            });
        }
        Ok((tail_out.expect("at least one group"), captured))
    }

    /// Run the U-shaped route up to (and including) the skip adds, returning
    /// the feature map the exit conv would consume.
    fn forward_features(
        &self,
        tape: &mut Tape,
        x: TensorId,
        path: PathRef<'_>,
        capture: bool,
    ) -> Result<(TensorId, Option<CapturedFeatures>)> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4 || xs[1] != 1 {
            return Err(Error::shape("forward", format!("expected [B,1,H,W], got {xs:?}")));
        }
        let div = self.config.resolution_divisor();
        if xs[2] % div != 0 || xs[3] % div != 0 {
            return Err(Error::shape(
                "forward",
                format!("spatial dims {}x{} must divide by {div}", xs[2], xs[3]),
            ));
        }
        let s_total = self.config.num_stages();
        let half = s_total / 2;
        let prefix = path.prefix();
        let groups_for = |s: usize| -> Vec<usize> {
            match path {
                PathRef::Base => (0..self.config.stages[s].groups).collect(),
                PathRef::Task(id) => self.tasks[id].groups[s].clone(),
            }
        };
        if let PathRef::Task(id) = path {
            self.task(id)?;
        }

        let fw = self.tape_param(tape, "fe/w")?;
        let fb = self.tape_param(tape, "fe/b")?;
        let mut cur = tape.conv2d(x, fw, Some(fb), 1, 1)?;
        let mut captured: Vec<Vec<Tensor>> = Vec::with_capacity(s_total);
        let mut encoder_outs: Vec<TensorId> = Vec::new();

        // encoder
        for s in 0..half {
            let (out, caps) = self.apply_stage(tape, cur, &prefix, s, &groups_for(s), capture)?;
            captured.push(caps);
            if s + 1 < half {
                encoder_outs.push(out);
                cur = tape.avg_pool2(out)?;
            } else {
                cur = out;
            }
        }
        // innermost link
        let bw = self.tape_param(tape, "bottleneck/w")?;
        let bb = self.tape_param(tape, "bottleneck/b")?;
        cur = tape.conv2d(cur, bw, Some(bb), 1, 1)?;
        // decoder
        for s in half..s_total {
            let (out, caps) = self.apply_stage(tape, cur, &prefix, s, &groups_for(s), capture)?;
            captured.push(caps);
            let mirror = s_total - 1 - s; // encoder stage this one mirrors
            cur = if mirror < encoder_outs.len() {
                tape.add(out, encoder_outs[mirror])?
            } else {
                out
            };
            if s + 1 < s_total {
                cur = tape.upsample_nearest2(cur)?;
            }
        }
        let caps = capture.then_some(CapturedFeatures { per_stage: captured });
        Ok((cur, caps))
    }

    fn apply_rm(&self, tape: &mut Tape, feat: TensorId) -> Result<TensorId> {
        let rw = self.tape_param(tape, "rm/w")?;
        let rb = self.tape_param(tape, "rm/b")?;
        tape.conv2d(feat, rw, Some(rb), 1, 1)
    }

    pub(crate) fn set_task_groups(&mut self, task_id: &str, groups: Vec<Vec<usize>>) -> Result<()> {
        self.task(task_id)?;
        self.tasks.get_mut(task_id).expect("checked").groups = groups;
        Ok(())
    }

    /// Run one [H,W] image through a task's path and collect the per-group
    /// outputs of every stage's last residual block (redundancy-analysis
    /// input; batch of one, no gradient use).
    pub fn capture_task_features(&self, img: &Tensor, task_id: &str) -> Result<CapturedFeatures> {
        self.task(task_id)?;
        if img.rank() != 2 {
            return Err(Error::shape("capture", format!("expected [H,W], got {:?}", img.shape())));
        }
        let (h, w) = (img.shape()[0], img.shape()[1]);
        let mut tape = Tape::new();
        let x4 = Tensor::from_vec(&[1, 1, h, w], img.data().to_vec())?;
        let x = tape.input(x4);
        let (_, caps) = self.forward_features(&mut tape, x, PathRef::Task(task_id), true)?;
        Ok(caps.expect("capture requested"))
    }

    /// Clean-to-clean route through the template path.
    pub fn forward_pretrain(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let (feat, _) = self.forward_features(tape, x, PathRef::Base, false)?;
        self.apply_rm(tape, feat)
    }

    /// Restoration route for a registered task. Compound tasks run every
    /// constituent branch on the same input and mix their features into the
    /// compound branch before the exit conv; `zero_skmm` disables that
    /// residual (the ablation toggle). `capture` collects per-group features
    /// for redundancy analysis.
    pub fn forward_task(
        &self,
        tape: &mut Tape,
        x: TensorId,
        task_id: &str,
        capture: bool,
        zero_skmm: bool,
    ) -> Result<(TensorId, Option<CapturedFeatures>)> {
        let entry = self.task(task_id)?;
        let (mut feat, caps) = self.forward_features(tape, x, PathRef::Task(task_id), capture)?;
        if entry.has_skmm && !zero_skmm {
            let mut history = Vec::new();
            for constituent in entry.spec.constituents() {
                self.task(&constituent)?;
                let (h, _) =
                    self.forward_features(tape, x, PathRef::Task(&constituent), false)?;
                history.push(h);
            }
            feat = crate::skmm::apply_on_tape(self, tape, task_id, feat, &history)?;
        }
        let out = self.apply_rm(tape, feat)?;
        Ok((out, caps))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Copy a channel range out of a [B,C,H,W] tensor.
fn slice_channels(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (b, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let hw = h * w;
    let mut data = Vec::with_capacity(b * len * hw);
    for bi in 0..b {
        let base = bi * c * hw + start * hw;
        data.extend_from_slice(&t.data()[base..base + len * hw]);
    }
    Tensor::from_vec(&[b, len, h, w], data).expect("slice shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use rand::Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig::new(&[4, 4], &[2, 2], 1)
    }

    fn rand_image(seed: u64, b: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(&[b, 1, h, w], data).unwrap()
    }

    fn finalize_freshly_trained(model: &mut ModelState, task: &str) {
        // walk the full lifecycle without an optimizer in the loop
        model.mark_trained(task).unwrap();
        model.set_task_phase(task, TaskPhase::Pruned).unwrap();
        model.finalize_task(task).unwrap();
    }

    #[test]
    fn config_presets_and_group_widths() {
        let desk = NetworkConfig::desk();
        desk.validate().unwrap();
        assert_eq!(
            desk.stages.iter().map(StageConfig::group_width).collect::<Vec<_>>(),
            vec![4, 4, 4, 4]
        );
        let full = NetworkConfig::full();
        full.validate().unwrap();
        assert_eq!(
            full.stages.iter().map(StageConfig::group_width).collect::<Vec<_>>(),
            vec![4, 8, 16, 16, 8, 4]
        );
        // width not divisible by group count is rejected
        let bad = NetworkConfig::new(&[30, 30], &[8, 8], 1);
        assert!(bad.validate().is_err());
        // odd stage counts are rejected
        let odd = NetworkConfig::new(&[8, 8, 8], &[2, 2, 2], 1);
        assert!(odd.validate().is_err());
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let a = build_backbone(tiny_config(), 7).unwrap();
        let b = build_backbone(tiny_config(), 7).unwrap();
        let c = build_backbone(tiny_config(), 8).unwrap();
        assert_eq!(a.shared_param_hash().unwrap(), b.shared_param_hash().unwrap());
        assert_ne!(a.shared_param_hash().unwrap(), c.shared_param_hash().unwrap());
    }

    #[test]
    fn zeroed_block_convs_make_blocks_identity() {
        let mut model = build_backbone(tiny_config(), 3).unwrap();
        for s in 0..2 {
            for o in 0..2 {
                let wid = format!("ori/s{s}/b0/g{o}/conv_w");
                let bid = format!("ori/s{s}/b0/g{o}/conv_b");
                let wshape = model.param(&wid).unwrap().value.shape().to_vec();
                let bshape = model.param(&bid).unwrap().value.shape().to_vec();
                model.set_param_value(&wid, Tensor::zeros(&wshape)).unwrap();
                model.set_param_value(&bid, Tensor::zeros(&bshape)).unwrap();
            }
        }
        let mut tape = Tape::new();
        let x = tape.input(rand_image(1, 1, 16, 16));
        let fe_w = model.tape_param(&mut tape, "fe/w").unwrap();
        let fe_b = model.tape_param(&mut tape, "fe/b").unwrap();
        let feat = tape.conv2d(x, fe_w, Some(fe_b), 1, 1).unwrap();
        let out = model.apply_block(&mut tape, feat, "ori", 0, 0, &[0, 1]).unwrap();
        assert_eq!(tape.value(out).data(), tape.value(feat).data());
    }

    #[test]
    fn block_groups_do_not_mix() {
        let model = build_backbone(tiny_config(), 11).unwrap();
        let img = rand_image(2, 1, 16, 16);
        let m = model.config.stages[0].group_width();
        let run = |zero_first_group: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let fw = model.tape_param(&mut tape, "fe/w").unwrap();
            let fb = model.tape_param(&mut tape, "fe/b").unwrap();
            let feat = tape.conv2d(x, fw, Some(fb), 1, 1).unwrap();
            let feat = if zero_first_group {
                // zero group 0's channels, keep group 1 bit-identical
                let mut v = tape.value(feat).clone();
                let (b, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
                for bi in 0..b {
                    for ci in 0..m {
                        let base = bi * c * h * w + ci * h * w;
                        for i in 0..h * w {
                            v.data_mut()[base + i] = 0.0;
                        }
                    }
                }
                tape.constant(v)
            } else {
                feat
            };
            let out = model.apply_block(&mut tape, feat, "ori", 0, 0, &[0, 1]).unwrap();
            let v = tape.value(out);
            let g0 = slice_channels(v, 0, m).data().to_vec();
            let g1 = slice_channels(v, m, m).data().to_vec();
            (g0, g1)
        };
        let (g0_a, g1_a) = run(false);
        let (g0_b, g1_b) = run(true);
        assert_ne!(g0_a, g0_b, "zeroed group must change its own output");
        assert_eq!(g1_a, g1_b, "other group must be bit-identical");
    }

    #[test]
    fn block_is_group_equivariant_under_group_permutation() {
        let mut model = build_backbone(tiny_config(), 13).unwrap();
        let img = rand_image(3, 1, 16, 16);
        let m = model.config.stages[0].group_width();
        let forward = |model: &ModelState, swap_input: bool| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let fw = model.tape_param(&mut tape, "fe/w").unwrap();
            let fb = model.tape_param(&mut tape, "fe/b").unwrap();
            let feat = tape.conv2d(x, fw, Some(fb), 1, 1).unwrap();
            let feat = if swap_input {
                let a = tape.channel_slice(feat, 0, m).unwrap();
                let b = tape.channel_slice(feat, m, m).unwrap();
                tape.channel_concat(&[b, a]).unwrap()
            } else {
                feat
            };
            let out = model.apply_block(&mut tape, feat, "ori", 0, 0, &[0, 1]).unwrap();
            tape.value(out).clone()
        };
        let plain = forward(&model, false);
        // swap the two groups' parameters
        for name in BODY_PARAM_NAMES {
            let a_id = format!("ori/s0/b0/g0/{name}");
            let b_id = format!("ori/s0/b0/g1/{name}");
            let a = model.param(&a_id).unwrap().value.clone();
            let b = model.param(&b_id).unwrap().value.clone();
            model.set_param_value(&a_id, b).unwrap();
            model.set_param_value(&b_id, a).unwrap();
        }
        let swapped = forward(&model, true);
        // swapped params + swapped input slices = swapped output slices
        let plain_g0 = slice_channels(&plain, 0, m);
        let plain_g1 = slice_channels(&plain, m, m);
        let sw_g0 = slice_channels(&swapped, 0, m);
        let sw_g1 = slice_channels(&swapped, m, m);
        assert_eq!(sw_g0.data(), plain_g1.data());
        assert_eq!(sw_g1.data(), plain_g0.data());
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        use crate::autodiff::finite_diff_check;
        let model = build_backbone(tiny_config(), 17).unwrap();
        let img = rand_image(5, 1, 16, 16);
        // gradients w.r.t. one group's conv weight and gca weight, through
        // the full block composition
        let ids =
            ["ori/s0/b0/g0/conv_w".to_string(), "ori/s0/b0/g0/gca_w1".to_string()];
        let inputs: Vec<Tensor> =
            ids.iter().map(|id| model.param(id).unwrap().value.clone()).collect();
        let err = finite_diff_check(
            |probe: &[Tensor]| {
                let mut m2 = model.clone();
                for (id, t) in ids.iter().zip(probe) {
                    m2.set_param_value(id, t.clone()).unwrap();
                }
                let mut tape = Tape::new();
                let x = tape.input(img.clone());
                let fw = m2.tape_param(&mut tape, "fe/w").unwrap();
                let fb = m2.tape_param(&mut tape, "fe/b").unwrap();
                let feat = tape.conv2d(x, fw, Some(fb), 1, 1).unwrap();
                let out = m2.apply_block(&mut tape, feat, "ori", 0, 0, &[0, 1]).unwrap();
                let target = tape.constant(Tensor::zeros(tape.value(out).shape()));
                let loss = tape.l1_loss(out, target).unwrap();
                let grads = backward(&tape, loss).unwrap();
                let value = tape.value(loss).data()[0];
                let gs = ids
                    .iter()
                    .map(|id| grads.by_param().get(id.as_str()).cloned().unwrap())
                    .collect();
                Ok((value, gs))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "block gradcheck err {err}");
    }

    #[test]
    fn expansion_copies_templates_and_preserves_history() {
        let mut model = build_backbone(tiny_config(), 23).unwrap();
        model.freeze_pretrained().unwrap();
        let before = model.shared_param_hash().unwrap();
        model.expand_for_task("C").unwrap();
        assert_eq!(model.shared_param_hash().unwrap(), before);
        // bodies copied bit-for-bit
        for s in 0..2 {
            for o in 0..2 {
                for name in BODY_PARAM_NAMES {
                    let t = model.param(&format!("task/C/s{s}/b0/g{o}/{name}")).unwrap();
                    let ori = model.param(&format!("ori/s{s}/b0/g{o}/{name}")).unwrap();
                    assert_eq!(t.value.data(), ori.value.data(), "s{s} g{o} {name}");
                }
                // heads are freshly seeded, not copies
                let th = model.param(&format!("task/C/s{s}/head/g{o}/w")).unwrap();
                let oh = model.param(&format!("ori/s{s}/head/g{o}/w")).unwrap();
                assert_ne!(th.value.data(), oh.value.data());
            }
        }
        // bookkeeping: one expansion doubles each stage's group total
        assert_eq!(model.growth_totals(), vec![(4, 8), (4, 8)]);
        // duplicate registration is rejected
        assert!(model.expand_for_task("C").is_err());
        // compound before constituents are finalized is rejected
        assert!(model.expand_for_task("CB").is_err());
    }

    #[test]
    fn full_scale_bookkeeping_after_three_expansions() {
        let mut model = build_backbone(NetworkConfig::full(), 1).unwrap();
        model.freeze_pretrained().unwrap();
        for t in ["C", "B", "N"] {
            model.expand_for_task(t).unwrap();
            finalize_freshly_trained(&mut model, t);
        }
        let totals = model.growth_totals();
        assert_eq!(totals[0], (32, 128), "stage 1 grows 8 -> 32 groups, 32 -> 128 channels");
    }

    #[test]
    fn pretraining_preconditions() {
        let mut model = build_backbone(tiny_config(), 29).unwrap();
        // expansion before pretraining completes is rejected
        assert!(model.expand_for_task("C").is_err());
        model.freeze_pretrained().unwrap();
        assert!(model.freeze_pretrained().is_err());
        model.expand_for_task("C").unwrap();
        // unknown task forward is rejected
        let mut tape = Tape::new();
        let x = tape.input(rand_image(6, 1, 16, 16));
        assert!(model.forward_task(&mut tape, x, "B", false, false).is_err());
    }

    #[test]
    fn zeroed_tails_reduce_output_to_exit_bias() {
        let mut model = build_backbone(tiny_config(), 31).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("C").unwrap();
        for s in 0..2 {
            for o in 0..2 {
                let id = format!("task/C/s{s}/tail/g{o}/w");
                let shape = model.param(&id).unwrap().value.shape().to_vec();
                model.set_param_value(&id, Tensor::zeros(&shape)).unwrap();
            }
            let bid = format!("task/C/s{s}/tail/b");
            let bshape = model.param(&bid).unwrap().value.shape().to_vec();
            model.set_param_value(&bid, Tensor::zeros(&bshape)).unwrap();
        }
        model.set_param_value("rm/b", Tensor::full(&[1], 0.37)).unwrap();
        let mut tape = Tape::new();
        let x = tape.input(rand_image(7, 1, 16, 16));
        let (out, _) = model.forward_task(&mut tape, x, "C", false, false).unwrap();
        for &v in tape.value(out).data() {
            assert_eq!(v.to_bits(), 0.37f64.to_bits());
        }
    }

    #[test]
    fn historical_outputs_are_bit_stable_under_later_tasks() {
        let mut model = build_backbone(tiny_config(), 37).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("C").unwrap();
        // scribble on C's params as a stand-in for training
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for id in model.owned_parameter_ids("C").unwrap() {
            let mut v = model.param(&id).unwrap().value.clone();
            for x in v.data_mut() {
                *x += rng.gen_range(-0.05..0.05);
            }
            model.set_param_value(&id, v).unwrap();
        }
        finalize_freshly_trained(&mut model, "C");
        let img = rand_image(8, 1, 16, 16);
        let run = |m: &ModelState| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let (out, _) = m.forward_task(&mut tape, x, "C", false, false).unwrap();
            tape.value(out).data().to_vec()
        };
        let before = run(&model);
        let hash_before = model.task_param_hash("C").unwrap();
        // expand and mutate a later task
        model.expand_for_task("B").unwrap();
        for id in model.owned_parameter_ids("B").unwrap() {
            let mut v = model.param(&id).unwrap().value.clone();
            for x in v.data_mut() {
                *x += 0.125;
            }
            model.set_param_value(&id, v).unwrap();
        }
        finalize_freshly_trained(&mut model, "B");
        assert_eq!(run(&model), before, "historical forward must be bit-identical");
        assert_eq!(model.task_param_hash("C").unwrap(), hash_before);
    }

    #[test]
    fn ownership_sets_partition_all_parameters() {
        let mut model = build_backbone(tiny_config(), 41).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("C").unwrap();
        finalize_freshly_trained(&mut model, "C");
        model.expand_for_task("B").unwrap();
        finalize_freshly_trained(&mut model, "B");
        model.expand_for_task("CB").unwrap();
        let mut seen: Vec<String> = Vec::new();
        for t in ["C", "B", "CB"] {
            let owned = model.owned_parameter_ids(t).unwrap();
            for id in &owned {
                assert!(!seen.contains(id), "{id} owned twice");
            }
            seen.extend(owned);
        }
        let shared: Vec<String> = model
            .param_ids()
            .filter(|k| !k.starts_with("task/") && !k.starts_with("skmm/"))
            .cloned()
            .collect();
        seen.extend(shared);
        seen.sort();
        let mut all: Vec<String> = model.param_ids().cloned().collect();
        all.sort();
        assert_eq!(seen, all, "ownership + shared must cover every parameter");
    }

    #[test]
    fn trainable_set_follows_lifecycle() {
        let mut model = build_backbone(tiny_config(), 43).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("C").unwrap();
        let t = model.trainable_parameters("C").unwrap();
        assert!(!t.is_empty());
        assert!(t.iter().all(|id| id.starts_with("task/C/")));
        model.mark_trained("C").unwrap();
        assert!(model.trainable_parameters("C").unwrap().is_empty());
        model.set_task_phase("C", TaskPhase::Pruned).unwrap();
        model.reopen_for_finetune("C").unwrap();
        assert_eq!(model.trainable_parameters("C").unwrap().len(), t.len());
        model.finalize_task("C").unwrap();
        assert!(model.trainable_parameters("C").is_err());
    }

    #[test]
    fn backward_reaches_exactly_the_trainable_set() {
        let mut model = build_backbone(tiny_config(), 47).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("C").unwrap();
        let mut tape = Tape::new();
        let x = tape.input(rand_image(9, 2, 16, 16));
        let (out, _) = model.forward_task(&mut tape, x, "C", false, false).unwrap();
        let target = tape.constant(rand_image(10, 2, 16, 16));
        let loss = tape.l1_loss(out, target).unwrap();
        let grads = backward(&tape, loss).unwrap();
        let mut grad_keys: Vec<String> = grads.by_param().keys().cloned().collect();
        grad_keys.sort();
        let mut expected = model.trainable_parameters("C").unwrap();
        expected.sort();
        assert_eq!(grad_keys, expected);
    }

    #[test]
    fn forward_shapes_and_determinism_at_desk_scale() {
        let mut model = build_backbone(NetworkConfig::desk(), 53).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("N").unwrap();
        let img = rand_image(11, 2, 32, 32);
        let run = |m: &ModelState| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.input(img.clone());
            let (out, _) = m.forward_task(&mut tape, x, "N", false, false).unwrap();
            assert_eq!(tape.value(out).shape(), &[2, 1, 32, 32]);
            tape.value(out).data().to_vec()
        };
        assert_eq!(run(&model), run(&model));
        // odd input sizes are rejected (must divide the pooling factor)
        let mut tape = Tape::new();
        let x = tape.input(rand_image(12, 1, 17, 17));
        assert!(model.forward_task(&mut tape, x, "N", false, false).is_err());
    }

    #[test]
    fn capture_returns_per_group_stage_features() {
        let mut model = build_backbone(tiny_config(), 59).unwrap();
        model.freeze_pretrained().unwrap();
        model.expand_for_task("C").unwrap();
        let mut tape = Tape::new();
        let x = tape.input(rand_image(13, 1, 16, 16));
        let (_, caps) = model.forward_task(&mut tape, x, "C", true, false).unwrap();
        let caps = caps.unwrap();
        assert_eq!(caps.per_stage.len(), 2);
        for stage_caps in &caps.per_stage {
            assert_eq!(stage_caps.len(), 2);
            for t in stage_caps {
                assert_eq!(t.shape(), &[1, 2, 16, 16]);
            }
        }
    }
}
