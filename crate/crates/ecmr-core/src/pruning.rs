//! Redundancy-driven group pruning: for each pool sample, aggregate every
//! group's channels through the one-level entropy weighting, build the
//! inter-group similarity graph, partition it by greedy two-level entropy
//! minimization, and keep only each cluster's costliest-to-detach member.
//! Votes across the pool pick the survivors; the surgery then deletes the
//! losers' parameters outright.

use crate::backbone::{ModelState, TaskPhase};
use crate::error::{Error, Result};
use crate::sep::{
    aggregate_features, build_similarity_graph, minimize_2dse_greedy, retention_flags,
    vote_and_select,
};
use crate::tensor::Tensor;

/// One vote tally line of the analysis: a (stage, group) pair with how often
/// the pool retained it and whether it survived.
#[derive(Clone, Debug)]
pub struct SepRow {
    pub stage: usize,
    pub group: usize,
    pub votes: u32,
    pub frequency: f64,
    pub retained: bool,
}

#[derive(Clone, Debug)]
pub struct SepReport {
    pub task_id: String,
    pub samples: usize,
    pub rho: f64,
    pub rows: Vec<SepRow>,
    pub params_before: usize,
    pub params_after: usize,
    /// Per stage: mean two-level entropy of the chosen partitions over the
    /// pool (0 contributions from degenerate all-zero graphs).
    pub mean_partition_entropy: Vec<f64>,
}

impl SepReport {
    /// Survivor lists per stage (original indices, ascending).
    pub fn retained_per_stage(&self, num_stages: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); num_stages];
        for row in &self.rows {
            if row.retained {
                out[row.stage].push(row.group);
            }
        }
        out
    }
}

/// CSV dump of the vote table, one row per (stage, group).
pub fn sep_report_csv(report: &SepReport) -> String {
    let mut s = String::from("stage,group,votes,frequency,retained\n");
    for r in &report.rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.group, r.votes, r.frequency, r.retained
        ));
    }
    s
}

/// Analyze one stage of one sample: per-group channel aggregation, inter-group
/// graph, partition, detachment-based retention. Returns a retain flag per
/// group position plus the partition's entropy (0 for the degenerate
/// zero-volume graph, which keeps position 0 by convention).
pub fn analyze_stage_sample(features: &[Tensor]) -> Result<(Vec<bool>, f64)> {
    if features.is_empty() {
        return Err(Error::InvalidArg("no groups to analyze".into()));
    }
    let mut aggregated = Vec::with_capacity(features.len());
    for t in features {
        if t.rank() != 4 || t.shape()[0] != 1 {
            return Err(Error::shape(
                "sep analysis",
                format!("expected [1,m,h,w] group features, got {:?}", t.shape()),
            ));
        }
        let m = t.shape()[1];
        let hw = t.shape()[2] * t.shape()[3];
        let channels: Vec<Vec<f64>> =
            (0..m).map(|c| t.data()[c * hw..(c + 1) * hw].to_vec()).collect();
        let g = build_similarity_graph(&channels)?;
        aggregated.push(aggregate_features(&channels, &g)?);
    }
    let g = build_similarity_graph(&aggregated)?;
    if g.volume() == 0.0 {
        let mut flags = vec![false; features.len()];
        flags[0] = true;
        return Ok((flags, 0.0));
    }
    let (partition, entropy) = minimize_2dse_greedy(&g)?;
    Ok((retention_flags(&g, &partition)?, entropy))
}

/// Full analysis-and-surgery pass over a trained task: vote over the pool,
/// select survivors per stage, delete the rest, advance the task to its
/// pruned phase.
pub fn run_sep(
    model: &mut ModelState,
    task_id: &str,
    pool: &[Tensor],
    rho: f64,
) -> Result<SepReport> {
    if pool.is_empty() {
        return Err(Error::InvalidArg("redundancy analysis needs a non-empty sample pool".into()));
    }
    if model.task_phase(task_id)? != TaskPhase::Trained {
        return Err(Error::Registry(format!(
            "task '{task_id}' must be trained and frozen before pruning"
        )));
    }
    let groups_now = model.task(task_id)?.groups.clone();
    let s_total = groups_now.len();
    let mut votes: Vec<Vec<u32>> = groups_now.iter().map(|g| vec![0; g.len()]).collect();
    let mut entropy_sums = vec![0.0; s_total];
    for img in pool {
        let caps = model.capture_task_features(img, task_id)?;
        for s in 0..s_total {
            let (flags, entropy) = analyze_stage_sample(&caps.per_stage[s])?;
            for (pos, keep) in flags.iter().enumerate() {
                if *keep {
                    votes[s][pos] += 1;
                }
            }
            entropy_sums[s] += entropy;
        }
    }
    let params_before = model.task_path_param_count(task_id)?;
    let mut retained_all = Vec::with_capacity(s_total);
    let mut rows = Vec::new();
    for s in 0..s_total {
        let keep = vote_and_select(&votes[s], pool.len(), rho)?;
        let retained: Vec<usize> = groups_now[s]
            .iter()
            .zip(&keep)
            .filter_map(|(&o, &k)| k.then_some(o))
            .collect();
        for (pos, &o) in groups_now[s].iter().enumerate() {
            rows.push(SepRow {
                stage: s,
                group: o,
                votes: votes[s][pos],
                frequency: f64::from(votes[s][pos]) / pool.len() as f64,
                retained: keep[pos],
            });
        }
        retained_all.push(retained);
    }
    prune_groups(model, task_id, &retained_all)?;
    model.set_task_phase(task_id, TaskPhase::Pruned)?;
    let params_after = model.task_path_param_count(task_id)?;
    Ok(SepReport {
        task_id: task_id.to_string(),
        samples: pool.len(),
        rho,
        rows,
        params_before,
        params_after,
        mean_partition_entropy: entropy_sums.iter().map(|e| e / pool.len() as f64).collect(),
    })
}

/// Delete every group of `task_id` not listed in `retained` (one survivor
/// list per stage, original indices). Historical tasks and shared parameters
/// are untouched by construction: only ids under this task's path are
/// removed.
pub fn prune_groups(
    model: &mut ModelState,
    task_id: &str,
    retained: &[Vec<usize>],
) -> Result<()> {
    let groups_now = model.task(task_id)?.groups.clone();
    if retained.len() != groups_now.len() {
        return Err(Error::InvalidArg(format!(
            "retained lists cover {} stages, model has {}",
            retained.len(),
            groups_now.len()
        )));
    }
    for (s, r) in retained.iter().enumerate() {
        if r.is_empty() {
            return Err(Error::InvalidArg(format!(
                "stage {s}: retained set must not be empty (the path would sever)"
            )));
        }
        for (i, o) in r.iter().enumerate() {
            if !groups_now[s].contains(o) {
                return Err(Error::InvalidArg(format!(
                    "stage {s}: group {o} is not a surviving group of task '{task_id}'"
                )));
            }
            if i > 0 && r[i - 1] >= *o {
                return Err(Error::InvalidArg(format!(
                    "stage {s}: retained indices must be strictly ascending"
                )));
            }
        }
    }
    let blocks: Vec<usize> = model.config.stages.iter().map(|st| st.blocks).collect();
    for (s, r) in retained.iter().enumerate() {
        for &o in &groups_now[s] {
            if r.contains(&o) {
                continue;
            }
            model.remove_param(&format!("task/{task_id}/s{s}/head/g{o}/w"))?;
            model.remove_param(&format!("task/{task_id}/s{s}/head/g{o}/b"))?;
            for b in 0..blocks[s] {
                for name in [
                    "gnorm_gamma",
                    "gnorm_beta",
                    "conv_w",
                    "conv_b",
                    "gca_w1",
                    "gca_b1",
                    "gca_w2",
                    "gca_b2",
                ] {
                    model.remove_param(&format!("task/{task_id}/s{s}/b{b}/g{o}/{name}"))?;
                }
            }
            model.remove_param(&format!("task/{task_id}/s{s}/tail/g{o}/w"))?;
        }
    }
    model.set_task_groups(task_id, retained.to_vec())
}
