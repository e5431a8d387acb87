//! Second-round protocol probe: identity quality of the pretrained base
//! path, task-path trainability on a pure identity corpus, and the effect
//! of batch size (step count) and larger rates on real tasks.

use ecmr_core::autodiff::Tape;
use ecmr_core::backbone::{build_backbone, NetworkConfig};
use ecmr_core::degrade::{build_corpus, derive_seed, Pair, TaskSpec};
use ecmr_core::metrics::psnr;
use ecmr_core::tensor::Tensor;
use ecmr_core::trainer::{eval_task_psnr, pretrain, train_task, TrainConfig};

fn base_identity_psnr(model: &ecmr_core::backbone::ModelState, test: &[Pair]) -> f64 {
    let mut sum = 0.0;
    for pair in test {
        let (h, w) = (pair.clean.shape()[0], pair.clean.shape()[1]);
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::from_vec(&[1, 1, h, w], pair.clean.data().to_vec()).unwrap());
        let y = model.forward_pretrain(&mut tape, x).unwrap();
        let out: Vec<f64> =
            tape.value(y).data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let img = Tensor::from_vec(&[h, w], out).unwrap();
        sum += psnr(&img, &pair.clean).unwrap();
    }
    sum / test.len() as f64
}

fn main() {
    let seed = 7u64;
    for (lr, batch) in [(1e-2, 8), (1e-2, 4), (3e-2, 4)] {
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
        pretrain(&mut base, &clean, &cfg).unwrap();
        println!(
            "lr {lr:.0e} batch {batch}: base identity {:.2} dB",
            base_identity_psnr(&base, &pre.test)
        );

        // can a task path learn the pure identity in its window?
        {
            let mut model = base.clone();
            let spec = TaskSpec::parse("C").unwrap();
            let mut corpus =
                build_corpus(&spec, cfg.n_train, cfg.n_test, cfg.image_h, cfg.image_w, data_seed)
                    .unwrap();
            for p in corpus.train.iter_mut().chain(corpus.test.iter_mut()) {
                p.degraded = p.clean.clone();
            }
            model.expand_for_task("C").unwrap();
            train_task(&mut model, "C", &corpus.train, &cfg).unwrap();
            println!(
                "lr {lr:.0e} batch {batch}: task-path identity {:.2} dB",
                eval_task_psnr(&model, "C", &corpus.test).unwrap()
            );
        }

        for task in ["C", "N"] {
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
            train_task(&mut model, task, &corpus.train, &cfg).unwrap();
            let restored = eval_task_psnr(&model, task, &corpus.test).unwrap();
            println!(
                "lr {lr:.0e} batch {batch}: task {task}: degraded {baseline:.2} -> {restored:.2} dB (gain {:+.2})",
                restored - baseline
            );
        }
    }
}
