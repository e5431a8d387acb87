//! Learning-rate probe at desk scale: for each candidate rate, pretrain once,
//! then train single tasks C and N from that base and report restored PSNR
//! against the degraded-input baseline.

use ecmr_core::backbone::{build_backbone, NetworkConfig};
use ecmr_core::degrade::{build_corpus, derive_seed, TaskSpec};
use ecmr_core::metrics::psnr;
use ecmr_core::trainer::{eval_task_psnr, pretrain, train_task, TrainConfig};

fn main() {
    let seed = 7u64;
    for lr in [1e-3, 3e-3, 1e-2] {
        let mut cfg = TrainConfig::desk();
        cfg.lr_init = lr;
        let mut base = build_backbone(NetworkConfig::desk(), seed).unwrap();
        let data_seed = derive_seed(seed, "corpus", 0);

        let pre_spec = TaskSpec::parse("CBN").unwrap();
        let mut clean = build_corpus(
            &pre_spec,
            cfg.n_train,
            cfg.n_test,
            cfg.image_h,
            cfg.image_w,
            derive_seed(seed, "pretrain-data", 0),
        )
        .unwrap()
        .train;
        for pair in &mut clean {
            pair.degraded = pair.clean.clone();
        }
        let t0 = std::time::Instant::now();
        pretrain(&mut base, &clean, &cfg).unwrap();
        // identity quality of the pretrained base path
        println!("lr {lr:.0e}: pretrain {:?}", t0.elapsed());

        for task in ["C", "N"] {
            let mut model = base.clone();
            let spec = TaskSpec::parse(task).unwrap();
            let corpus = build_corpus(
                &spec,
                cfg.n_train,
                cfg.n_test,
                cfg.image_h,
                cfg.image_w,
                data_seed,
            )
            .unwrap();
            let baseline: f64 = corpus
                .test
                .iter()
                .map(|p| psnr(&p.degraded, &p.clean).unwrap())
                .sum::<f64>()
                / corpus.test.len() as f64;
            model.expand_for_task(task).unwrap();
            train_task(&mut model, task, &corpus.train, &cfg).unwrap();
            let restored = eval_task_psnr(&model, task, &corpus.test).unwrap();
            println!(
                "lr {lr:.0e}: task {task}: degraded {baseline:.2} dB -> restored {restored:.2} dB (gain {:+.2})",
                restored - baseline
            );
        }
    }
}
