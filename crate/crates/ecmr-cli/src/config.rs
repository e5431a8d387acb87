//! Flat `key = value` run configuration with presets, dotted stage keys,
//! command-line overrides, and a strict schema (unknown keys are errors).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ecmr_core::backbone::NetworkConfig;
use ecmr_core::degrade::TaskSpec;
use ecmr_core::trainer::TrainConfig;
use ecmr_core::{Error, Result};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub tasks: Vec<String>,
    pub train: TrainConfig,
    pub blocks: usize,
    /// Per-stage (width, groups); None keeps the preset's network.
    pub stages: Option<Vec<(usize, usize)>>,
    pub mining_channels: usize,
    pub mining_rank: usize,
    /// Checkpoint directory to operate on; empty means "follow the latest
    /// pointer under the workdir".
    pub model_path: String,
}

impl RunConfig {
    fn from_preset(name: &str) -> Result<RunConfig> {
        let train = match name {
            "full" => TrainConfig::full(),
            "desk" => TrainConfig::desk(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset '{other}' (expected full or desk)"
                )))
            }
        };
        Ok(RunConfig {
            preset: name.to_string(),
            seed: 7,
            tasks: ["C", "B", "N", "CB", "CN", "BN", "CBN"].iter().map(|s| s.to_string()).collect(),
            train,
            blocks: 2,
            stages: None,
            mining_channels: 32,
            mining_rank: 8,
            model_path: String::new(),
        })
    }

    pub fn network(&self) -> NetworkConfig {
        let base = match self.stages {
            Some(ref st) => {
                let widths: Vec<usize> = st.iter().map(|&(w, _)| w).collect();
                let groups: Vec<usize> = st.iter().map(|&(_, g)| g).collect();
                NetworkConfig::new(&widths, &groups, self.blocks)
            }
            None => {
                let mut net = if self.preset == "desk" {
                    NetworkConfig::desk()
                } else {
                    NetworkConfig::full()
                };
                for s in net.stages.iter_mut() {
                    s.blocks = self.blocks;
                }
                net
            }
        };
        base.with_mining(self.mining_channels, self.mining_rank)
    }

    /// The fully resolved configuration, echoed to the run log.
    pub fn echo(&self) -> String {
        let mut s = String::from("# resolved configuration\n");
        let net = self.network();
        writeln!(s, "preset = {}", self.preset).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "tasks = {}", self.tasks.join(",")).unwrap();
        for (i, st) in net.stages.iter().enumerate() {
            writeln!(s, "stage.{i}.width = {}", st.width).unwrap();
            writeln!(s, "stage.{i}.groups = {}", st.groups).unwrap();
        }
        writeln!(s, "blocks = {}", self.blocks).unwrap();
        writeln!(s, "mining_channels = {}", self.mining_channels).unwrap();
        writeln!(s, "mining_rank = {}", self.mining_rank).unwrap();
        let t = &self.train;
        writeln!(s, "epochs_train = {}", t.epochs_train).unwrap();
        writeln!(s, "epochs_finetune = {}", t.epochs_finetune).unwrap();
        writeln!(s, "batch = {}", t.batch).unwrap();
        writeln!(s, "pool_n = {}", t.pool_n).unwrap();
        writeln!(s, "rho = {}", t.rho).unwrap();
        writeln!(s, "lr_init = {}", t.lr_init).unwrap();
        writeln!(s, "lr_final = {}", t.lr_final).unwrap();
        writeln!(s, "mining_lr_scale = {}", t.mining_lr_scale).unwrap();
        writeln!(s, "n_train = {}", t.n_train).unwrap();
        writeln!(s, "n_test = {}", t.n_test).unwrap();
        writeln!(s, "image_h = {}", t.image_h).unwrap();
        writeln!(s, "image_w = {}", t.image_w).unwrap();
        writeln!(s, "model_path = {}", self.model_path).unwrap();
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network().validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config("task sequence is empty".into()));
        }
        for t in &self.tasks {
            TaskSpec::parse(t)?;
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, kind: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}' as {kind}")))
}

fn apply_key(cfg: &mut RunConfig, stage_keys: &mut BTreeMap<(usize, bool), usize>, key: &str, value: &str) -> Result<()> {
    match key {
        "preset" => {
            // handled in the pre-pass; re-validate so a bad value still errors
            RunConfig::from_preset(value)?;
        }
        "seed" => cfg.seed = parse_num(key, value, "an unsigned integer")?,
        "tasks" => {
            cfg.tasks = value.split(',').map(|s| s.trim().to_string()).collect();
        }
        "blocks" => cfg.blocks = parse_num(key, value, "an unsigned integer")?,
        "mining_channels" => cfg.mining_channels = parse_num(key, value, "an unsigned integer")?,
        "mining_rank" => cfg.mining_rank = parse_num(key, value, "an unsigned integer")?,
        "epochs_train" => cfg.train.epochs_train = parse_num(key, value, "an unsigned integer")?,
        "epochs_finetune" => {
            cfg.train.epochs_finetune = parse_num(key, value, "an unsigned integer")?
        }
        "batch" => cfg.train.batch = parse_num(key, value, "an unsigned integer")?,
        "pool_n" => cfg.train.pool_n = parse_num(key, value, "an unsigned integer")?,
        "rho" => cfg.train.rho = parse_num(key, value, "a number")?,
        "lr_init" => cfg.train.lr_init = parse_num(key, value, "a number")?,
        "lr_final" => cfg.train.lr_final = parse_num(key, value, "a number")?,
        "mining_lr_scale" => cfg.train.mining_lr_scale = parse_num(key, value, "a number")?,
        "n_train" => cfg.train.n_train = parse_num(key, value, "an unsigned integer")?,
        "n_test" => cfg.train.n_test = parse_num(key, value, "an unsigned integer")?,
        "image_h" => cfg.train.image_h = parse_num(key, value, "an unsigned integer")?,
        "image_w" => cfg.train.image_w = parse_num(key, value, "an unsigned integer")?,
        "model_path" => cfg.model_path = value.to_string(),
        _ => {
            if let Some(rest) = key.strip_prefix("stage.") {
                let (idx_str, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("malformed stage key '{key}'")))?;
                let idx: usize = parse_num(key, idx_str, "a stage index")?;
                let is_width = match field {
                    "width" => true,
                    "groups" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown stage field '{other}' in '{key}' (expected width or groups)"
                        )))
                    }
                };
                stage_keys.insert((idx, is_width), parse_num(key, value, "an unsigned integer")?);
            } else {
                return Err(Error::Config(format!("unknown configuration key '{key}'")));
            }
        }
    }
    Ok(())
}

/// Split one `key = value` line; comments run from `#` to end of line.
fn split_line(line: &str, lineno: usize) -> Result<Option<(String, String)>> {
    let body = match line.find('#') {
        Some(pos) => &line[..pos],
        None => line,
    };
    let body = body.trim();
    if body.is_empty() {
        return Ok(None);
    }
    let (k, v) = body
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("line {lineno}: expected 'key = value'")))?;
    Ok(Some((k.trim().to_string(), v.trim().to_string())))
}

/// Resolve a configuration: preset defaults, then file keys in order, then
/// override flags in order; ECMR_SEED (when set) has the last word on the
/// seed.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", p.display())))?;
        for (i, line) in text.lines().enumerate() {
            if let Some(kv) = split_line(line, i + 1)? {
                pairs.push(kv);
            }
        }
    }
    pairs.extend(overrides.iter().cloned());

    // the last preset mention decides which defaults everything else edits
    let preset = pairs
        .iter()
        .rev()
        .find(|(k, _)| k == "preset")
        .map(|(_, v)| v.as_str())
        .unwrap_or("full");
    let mut cfg = RunConfig::from_preset(preset)?;

    let mut stage_keys: BTreeMap<(usize, bool), usize> = BTreeMap::new();
    for (k, v) in &pairs {
        apply_key(&mut cfg, &mut stage_keys, k, v)?;
    }

    if !stage_keys.is_empty() {
        let max_idx = stage_keys.keys().map(|&(i, _)| i).max().expect("non-empty");
        let mut stages = Vec::with_capacity(max_idx + 1);
        for i in 0..=max_idx {
            let w = stage_keys.get(&(i, true)).ok_or_else(|| {
                Error::Config(format!("stage.{i}.width missing (stages must be fully specified)"))
            })?;
            let g = stage_keys.get(&(i, false)).ok_or_else(|| {
                Error::Config(format!("stage.{i}.groups missing (stages must be fully specified)"))
            })?;
            stages.push((*w, *g));
        }
        cfg.stages = Some(stages);
    }

    if let Ok(env_seed) = std::env::var("ECMR_SEED") {
        cfg.seed = parse_num("ECMR_SEED", &env_seed, "an unsigned integer")?;
    }

    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sources_give_full_scale_defaults() {
        let cfg = parse_config(None, &[]).unwrap();
        assert_eq!(cfg.preset, "full");
        assert_eq!(cfg.train.pool_n, 300);
        assert_eq!(cfg.train.rho, 0.1);
        assert_eq!(cfg.mining_channels, 32);
        assert_eq!(cfg.mining_rank, 8);
        assert_eq!(cfg.train.epochs_train, 100);
        assert_eq!(cfg.train.epochs_finetune, 20);
        assert_eq!(cfg.tasks.len(), 7);
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "preset = desk\nrho = 0.3   # file value\n").unwrap();
        let cfg = parse_config(Some(&path), &[("rho".into(), "0.2".into())]).unwrap();
        assert_eq!(cfg.preset, "desk");
        assert_eq!(cfg.train.rho, 0.2);
        assert_eq!(cfg.train.epochs_train, 20);
    }

    #[test]
    fn bad_values_and_unknown_keys_are_errors() {
        let e = parse_config(None, &[("rho".into(), "purple".into())]).unwrap_err();
        assert!(e.to_string().contains("purple"), "{e}");
        assert!(parse_config(None, &[("no_such_key".into(), "1".into())]).is_err());
        assert!(parse_config(None, &[("preset".into(), "giant".into())]).is_err());
        let missing = Path::new("/nonexistent/zz.conf");
        assert!(parse_config(Some(missing), &[]).is_err());
    }

    #[test]
    fn dotted_stage_keys_replace_the_network() {
        let over: Vec<(String, String)> = [
            ("stage.0.width", "4"),
            ("stage.0.groups", "2"),
            ("stage.1.width", "4"),
            ("stage.1.groups", "2"),
            ("blocks", "1"),
            ("mining_channels", "4"),
            ("mining_rank", "2"),
        ]
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let cfg = parse_config(None, &over).unwrap();
        let net = cfg.network();
        assert_eq!(net.num_stages(), 2);
        assert_eq!(net.stages[0].width, 4);
        assert_eq!(net.stages[0].blocks, 1);
        // holes are rejected
        let partial: Vec<(String, String)> =
            vec![("stage.1.width".into(), "4".into())];
        assert!(parse_config(None, &partial).is_err());
    }
}
