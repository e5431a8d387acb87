//! Fourth-round protocol probe: (a) does compound-path training stabilize
//! when the mining bank trains at a reduced rate, and (b) how much of the
//! pruning gap does fine-tuning recover at different restart rates.

use ecmr_core::backbone::{build_backbone, ModelState, NetworkConfig};
use ecmr_core::degrade::{build_corpus, derive_seed, make_sample_pool, TaskSpec};
use ecmr_core::metrics::psnr;
use ecmr_core::pruning::run_sep;
use ecmr_core::tensor::Tensor;
use ecmr_core::trainer::{
    eval_task_psnr, fine_tune, pretrain, train_task, TrainConfig,
};

fn baseline(corpus: &ecmr_core::degrade::Corpus) -> f64 {
    corpus
        .test
        .iter()
        .map(|p| psnr(&p.degraded, &p.clean).unwrap())
        .sum::<f64>()
        / corpus.test.len() as f64
}

fn corpus_for(task: &str, cfg: &TrainConfig, seed: u64) -> ecmr_core::degrade::Corpus {
    let spec = TaskSpec::parse(task).unwrap();
    build_corpus(&spec, cfg.n_train, cfg.n_test, cfg.image_h, cfg.image_w, seed).unwrap()
}

fn main() {
    let seed = 7u64;
    let cfg = TrainConfig::desk();
    let data_seed = derive_seed(seed, "corpus", 0);

    let mut base = build_backbone(NetworkConfig::desk(), seed).unwrap();
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

    // --- singles, trained once; C kept aside for the fine-tune probe ---
    let mut model = base.clone();
    let mut c_trained: Option<ModelState> = None;
    for task in ["C", "B", "N"] {
        let corpus = corpus_for(task, &cfg, data_seed);
        model.expand_for_task(task).unwrap();
        train_task(&mut model, task, &corpus.train, &cfg).unwrap();
        println!(
            "single {task}: base {:.2} trained {:.2}",
            baseline(&corpus),
            eval_task_psnr(&model, task, &corpus.test).unwrap()
        );
        if task == "C" {
            c_trained = Some(model.clone());
        }
        model.finalize_task(task).unwrap();
    }

    // --- (a) compound training at three mining-bank rates ---
    for compound in ["CB", "BN"] {
        let corpus = corpus_for(compound, &cfg, data_seed);
        let base_psnr = baseline(&corpus);
        for scale in [1.0, 0.01, 0.0] {
            let mut m = model.clone();
            let mut c2 = cfg;
            c2.mining_lr_scale = scale;
            m.expand_for_task(compound).unwrap();
            train_task(&mut m, compound, &corpus.train, &c2).unwrap();
            println!(
                "compound {compound} scale {scale}: base {base_psnr:.2} trained {:.2}",
                eval_task_psnr(&m, compound, &corpus.test).unwrap()
            );
        }
    }

    // --- (b) fine-tune restart rates on a pruned single ---
    let c_trained = c_trained.unwrap();
    let corpus = corpus_for("C", &cfg, data_seed);
    let spec = TaskSpec::parse("C").unwrap();
    let pool = make_sample_pool(
        &spec,
        cfg.pool_n,
        derive_seed(seed, "pool/C", 0),
        cfg.image_h,
        cfg.image_w,
    )
    .unwrap();
    let pool_inputs: Vec<Tensor> = pool.pairs.iter().map(|p| p.degraded.clone()).collect();
    let mut pruned = c_trained.clone();
    let report = run_sep(&mut pruned, "C", &pool_inputs, cfg.rho).unwrap();
    println!(
        "pruned C: params {} -> {}, pre-prune {:.2}, post-prune {:.2}",
        report.params_before,
        report.params_after,
        eval_task_psnr(&c_trained, "C", &corpus.test).unwrap(),
        eval_task_psnr(&pruned, "C", &corpus.test).unwrap()
    );
    for ft_start in [1e-2, 3e-3, 1e-3] {
        let mut m = pruned.clone();
        let mut c2 = cfg;
        c2.lr_init = ft_start * 10.0; // attempt 1 restarts at lr_init/10
        let out = fine_tune(&mut m, "C", &corpus.train, &corpus.test, &c2).unwrap();
        println!(
            "ft C @ {ft_start:.0e}: curve {:?} retried={} reverted={}",
            out.psnr_curve.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            out.retried,
            out.reverted
        );
    }
}
