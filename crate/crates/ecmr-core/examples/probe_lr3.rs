//! Third-round protocol probe: batch 2 (double the optimizer steps again)
//! across rates, on the three single degradations, with wall timing.

use ecmr_core::backbone::{build_backbone, NetworkConfig};
use ecmr_core::degrade::{build_corpus, derive_seed, TaskSpec};
use ecmr_core::metrics::psnr;
use ecmr_core::trainer::{eval_task_psnr, pretrain, train_task, TrainConfig};
use std::time::Instant;

fn main() {
    let seed = 7u64;
    for (lr, batch) in [(1e-2, 2), (3e-2, 2), (2e-2, 2)] {
        let mut cfg = TrainConfig::desk();
        cfg.lr_init = lr;
        cfg.batch = batch;
        let mut base = build_backbone(NetworkConfig::desk(), seed).unwrap();
        let data_seed = derive_seed(seed, "corpus", 0);

        let pre_spec = TaskSpec::parse("CBN").unwrap();
        let pre = build_corpus(
            &pre_spec,
            cfg.n_train,
            cfg.n_test,
            cfg.image_h,
            cfg.image_w,
            derive_seed(seed, "pretrain-data", 0),
        )
        .unwrap();
        let mut clean = pre.train.clone();
        for pair in &mut clean {
            pair.degraded = pair.clean.clone();
        }
        let t0 = Instant::now();
        pretrain(&mut base, &clean, &cfg).unwrap();
        let pre_secs = t0.elapsed().as_secs_f64();

        for task in ["C", "B", "N"] {
            let mut model = base.clone();
            let spec = TaskSpec::parse(task).unwrap();
            let corpus =
                build_corpus(&spec, cfg.n_train, cfg.n_test, cfg.image_h, cfg.image_w, data_seed)
                    .unwrap();
            let baseline: f64 = corpus
                .test
                .iter()
                .map(|p| psnr(&p.degraded, &p.clean).unwrap())
                .sum::<f64>()
                / corpus.test.len() as f64;
            model.expand_for_task(task).unwrap();
            let t1 = Instant::now();
            train_task(&mut model, task, &corpus.train, &cfg).unwrap();
            let train_secs = t1.elapsed().as_secs_f64();
            let restored = eval_task_psnr(&model, task, &corpus.test).unwrap();
            println!(
                "lr {lr:.0e} batch {batch}: task {task}: degraded {baseline:.2} -> {restored:.2} dB (gain {:+.2}) [pretrain {pre_secs:.0}s, train {train_secs:.0}s]",
                restored - baseline
            );
        }
    }
}
