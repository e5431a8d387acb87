//! Full desk-scale continual run with timing and per-criterion statistics.

use ecmr_core::backbone::{build_backbone, NetworkConfig};
use ecmr_core::degrade::{build_corpus, TaskSpec};
use ecmr_core::metrics::psnr;
use ecmr_core::trainer::{continual_run, recovery_fraction, TrainConfig};
use std::time::Instant;

fn main() {
    let cfg = TrainConfig::desk();
    let mut model = build_backbone(NetworkConfig::desk(), 7).unwrap();
    let sequence: Vec<TaskSpec> = ["C", "B", "N", "CB", "CN", "BN", "CBN"]
        .iter()
        .map(|s| TaskSpec::parse(s).unwrap())
        .collect();
    let t0 = Instant::now();
    let out = continual_run(&mut model, &sequence, &cfg, None).unwrap();
    let total = t0.elapsed();
    println!("=== total wall time: {total:.2?} ===");

    println!("\n--- per-task ---");
    for tr in &out.tasks {
        let spec = TaskSpec::parse(&tr.task_id).unwrap();
        let seed = ecmr_core::degrade::derive_seed(model.seed, "corpus", 0);
        let corpus =
            build_corpus(&spec, cfg.n_train, cfg.n_test, cfg.image_h, cfg.image_w, seed).unwrap();
        let base: f64 = corpus
            .test
            .iter()
            .map(|p| psnr(&p.degraded, &p.clean).unwrap())
            .sum::<f64>()
            / corpus.test.len() as f64;
        let gain_final = out
            .records
            .iter()
            .find(|r| r.task_id == tr.task_id && r.checkpoint_after == tr.task_id)
            .unwrap()
            .psnr_db
            - base;
        let rec3 = tr
            .finetune_psnr_curve
            .get(2)
            .map(|v| recovery_fraction(tr.pre_prune_psnr, tr.post_prune_psnr, *v));
        let rec4 = tr
            .finetune_psnr_curve
            .get(3)
            .map(|v| recovery_fraction(tr.pre_prune_psnr, tr.post_prune_psnr, *v));
        println!(
            "{}: base {base:.2} pre {:.2} post {:.2} curve {:?} gain_final {gain_final:+.2} dB \
             params {}->{} retried={} reverted={} rec@3 {rec3:?} rec@4 {rec4:?}",
            tr.task_id,
            tr.pre_prune_psnr,
            tr.post_prune_psnr,
            tr.finetune_psnr_curve,
            tr.params_before_prune,
            tr.params_after_prune,
            tr.finetune_retried,
            tr.finetune_reverted,
        );
        println!("  survivors: {:?}", tr.survivors);
        if let (Some(on), Some(off)) = (tr.skmm_on_psnr, tr.skmm_off_psnr) {
            println!("  skmm on {on:.3} off {off:.3} uplift {:+.4} dB", on - off);
        }
    }

    println!("\n--- path param reduction per task ---");
    let mut reduced = 0;
    for tr in &out.tasks {
        let d = tr.params_before_prune - tr.params_after_prune;
        if d > 0 {
            reduced += 1;
        }
        println!("{}: -{d}", tr.task_id);
    }
    println!("tasks with strictly positive reduction: {reduced}/7");

    println!("\n--- forgetting (max |drift| over all later checkpoints) ---");
    let (tasks, matrix) = ecmr_core::trainer::forgetting_matrix(&out.records);
    for (task, row) in tasks.iter().zip(&matrix) {
        let worst = row
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| acc.max(v.abs()));
        println!("{task}: {worst:e}");
    }
    println!("\nhash ledger stable: {}", {
        let mut ok = true;
        for w in out.hash_ledger.windows(2) {
            for (k, v) in &w[0] {
                if let Some(v2) = w[1].get(k) {
                    ok &= v == v2;
                }
            }
        }
        ok
    });
}
