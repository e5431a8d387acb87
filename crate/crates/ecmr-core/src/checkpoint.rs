//! Durable model snapshots: a directory holding `manifest.json` (schema,
//! architecture, task registry, parameter index) and `parameters.bin` (every
//! parameter tensor concatenated in sorted-id order). Saves stage into a
//! temporary sibling directory and rename into place so a crash never leaves
//! a half-written checkpoint behind; loads validate the whole file set before
//! constructing a model.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{ModelState, NetworkConfig, Parameter, TaskEntry, TaskPhase};
use crate::degrade::TaskSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "parameters.bin";

#[derive(Serialize, Deserialize)]
struct ParamIndexEntry {
    id: String,
    trainable: bool,
    /// Byte offset of this tensor's record in `parameters.bin`.
    offset: u64,
    /// Record length in bytes.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct TaskManifest {
    id: String,
    phase: TaskPhase,
    groups: Vec<Vec<usize>>,
    has_skmm: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    config: NetworkConfig,
    seed: u64,
    pretrained: bool,
    task_order: Vec<String>,
    tasks: Vec<TaskManifest>,
    params: Vec<ParamIndexEntry>,
}

/// Serialize the model into `dir`, replacing any checkpoint already there.
pub fn save_checkpoint(model: &ModelState, dir: &Path) -> Result<()> {
    let parent = dir.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent)?;
    let base = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy()
        .to_string();
    let tmp = parent.join(format!(".tmp-{}-{}", base, std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    // parameters first, recording each record's span
    let mut index = Vec::new();
    {
        let mut bin = fs::File::create(tmp.join(PARAMS_FILE))?;
        let mut offset = 0u64;
        for (id, p) in model.parameters() {
            let mut buf = Vec::new();
            p.value.write_to(&mut buf)?;
            bin.write_all(&buf)?;
            index.push(ParamIndexEntry {
                id: id.clone(),
                trainable: p.trainable,
                offset,
                len: buf.len() as u64,
            });
            offset += buf.len() as u64;
        }
        bin.sync_all()?;
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: model.config.clone(),
        seed: model.seed,
        pretrained: model.is_pretrained(),
        task_order: model.task_ids().to_vec(),
        tasks: model
            .task_ids()
            .iter()
            .map(|id| {
                let t = model.task(id).expect("registered");
                TaskManifest {
                    id: id.clone(),
                    phase: t.phase,
                    groups: t.groups.clone(),
                    has_skmm: t.has_skmm,
                }
            })
            .collect(),
        params: index,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(tmp.join(MANIFEST_FILE), json)?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

/// Read and fully validate a checkpoint directory back into a model.
pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", manifest_path.display())))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::Checkpoint(format!("manifest decode: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {} unsupported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    manifest.config.validate()?;

    // the parameter index must be sorted, unique, and contiguous
    let mut expect_offset = 0u64;
    for (i, e) in manifest.params.iter().enumerate() {
        if i > 0 && manifest.params[i - 1].id >= e.id {
            return Err(Error::Checkpoint(format!(
                "parameter index not sorted at '{}'",
                e.id
            )));
        }
        if e.offset != expect_offset {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' offset {} does not follow the previous record (expected {expect_offset})",
                e.id, e.offset
            )));
        }
        expect_offset = expect_offset.checked_add(e.len).ok_or_else(|| {
            Error::Checkpoint("parameter index overflows".into())
        })?;
    }
    let bin_path = dir.join(PARAMS_FILE);
    let actual_len = fs::metadata(&bin_path)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", bin_path.display())))?
        .len();
    if actual_len != expect_offset {
        return Err(Error::Checkpoint(format!(
            "parameter file holds {actual_len} bytes, manifest expects {expect_offset}"
        )));
    }

    let mut params: BTreeMap<String, Parameter> = BTreeMap::new();
    {
        let mut bin = fs::File::open(&bin_path)?;
        for e in &manifest.params {
            let mut buf = vec![0u8; e.len as usize];
            bin.read_exact(&mut buf)
                .map_err(|err| Error::Checkpoint(format!("parameter '{}': {err}", e.id)))?;
            let value = Tensor::read_from(&mut buf.as_slice())
                .map_err(|err| Error::Checkpoint(format!("parameter '{}': {err}", e.id)))?;
            params.insert(e.id.clone(), Parameter { value, trainable: e.trainable });
        }
    }

    let mut tasks: BTreeMap<String, TaskEntry> = BTreeMap::new();
    for t in &manifest.tasks {
        let spec = TaskSpec::parse(&t.id)?;
        if t.groups.len() != manifest.config.num_stages() {
            return Err(Error::Checkpoint(format!(
                "task '{}' lists {} stages of groups, config has {}",
                t.id,
                t.groups.len(),
                manifest.config.num_stages()
            )));
        }
        tasks.insert(
            t.id.clone(),
            TaskEntry { spec, phase: t.phase, groups: t.groups.clone(), has_skmm: t.has_skmm },
        );
    }
    let mut order_check: Vec<&String> = manifest.task_order.iter().collect();
    order_check.sort();
    order_check.dedup();
    if order_check.len() != manifest.task_order.len()
        || manifest.task_order.len() != tasks.len()
        || manifest.task_order.iter().any(|id| !tasks.contains_key(id))
    {
        return Err(Error::Checkpoint(
            "task order does not match the task registry".into(),
        ));
    }

    ModelState::from_parts(
        manifest.config,
        manifest.seed,
        params,
        tasks,
        manifest.task_order,
        manifest.pretrained,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::build_backbone;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn populated_model() -> ModelState {
        let cfg = NetworkConfig::new(&[4, 4], &[2, 2], 1).with_mining(4, 2);
        let mut model = build_backbone(cfg, 21).unwrap();
        model.freeze_pretrained().unwrap();
        for t in ["C", "B"] {
            model.expand_for_task(t).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for id in model.owned_parameter_ids(t).unwrap() {
                let mut v = model.param(&id).unwrap().value.clone();
                for x in v.data_mut() {
                    *x += rng.gen_range(-0.1..0.1);
                }
                model.set_param_value(&id, v).unwrap();
            }
            model.mark_trained(t).unwrap();
            crate::pruning::prune_groups(&mut model, t, &[vec![1], vec![0, 1]]).unwrap();
            model.set_task_phase(t, TaskPhase::Pruned).unwrap();
            model.finalize_task(t).unwrap();
        }
        model.expand_for_task("CB").unwrap();
        model
    }

    #[test]
    fn roundtrip_preserves_every_byte_and_flag() {
        let model = populated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.seed, model.seed);
        assert_eq!(loaded.is_pretrained(), model.is_pretrained());
        assert_eq!(loaded.task_ids(), model.task_ids());
        let ids: Vec<String> = model.param_ids().cloned().collect();
        assert_eq!(loaded.param_ids().cloned().collect::<Vec<_>>(), ids);
        for id in &ids {
            let a = model.param(id).unwrap();
            let b = loaded.param(id).unwrap();
            assert_eq!(a.trainable, b.trainable, "{id}");
            assert_eq!(a.value.shape(), b.value.shape(), "{id}");
            let ab: Vec<u64> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "{id}");
        }
        for t in ["C", "B", "CB"] {
            let a = model.task(t).unwrap();
            let b = loaded.task(t).unwrap();
            assert_eq!(a.phase, b.phase);
            assert_eq!(a.groups, b.groups);
            assert_eq!(a.has_skmm, b.has_skmm);
        }
        // same bytes -> same hashes
        assert_eq!(loaded.shared_param_hash().unwrap(), model.shared_param_hash().unwrap());
        assert_eq!(loaded.task_param_hash("CB").unwrap(), model.task_param_hash("CB").unwrap());
    }

    #[test]
    fn saving_twice_replaces_the_old_checkpoint() {
        let mut model = populated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mut v = model.param("rm/b").unwrap().value.clone();
        v.data_mut()[0] = 0.5;
        // mutating a frozen value directly is test-only surgery
        model.set_param_value("rm/b", v).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.param("rm/b").unwrap().value.data()[0], 0.5);
    }

    #[test]
    fn truncated_parameter_file_fails_cleanly() {
        let model = populated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bin = path.join(PARAMS_FILE);
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn corrupted_record_magic_fails_cleanly() {
        let model = populated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let bin = path.join(PARAMS_FILE);
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 0xff;
        fs::write(&bin, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let model = populated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let mpath = path.join(MANIFEST_FILE);
        let json = fs::read_to_string(&mpath).unwrap();
        fs::write(&mpath, json.replace("\"schema_version\": 1", "\"schema_version\": 9")).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn loaded_model_forwards_identically() {
        let model = populated_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let data: Vec<f64> = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
            let img = Tensor::from_vec(&[1, 1, 16, 16], data).unwrap();
            let run = |m: &ModelState| -> Vec<u64> {
                let mut tape = crate::autodiff::Tape::new();
                let x = tape.input(img.clone());
                let (out, _) = m.forward_task(&mut tape, x, "CB", false, false).unwrap();
                tape.value(out).data().iter().map(|v| v.to_bits()).collect()
            };
            assert_eq!(run(&model), run(&loaded), "trial {trial}");
        }
    }
}
