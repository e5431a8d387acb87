//! Inspect the SEP pipeline on the duplicate-group fixture: per-sample
//! similarity graphs, chosen partitions, detachment costs, and votes.

use ecmr_core::backbone::{build_backbone, ModelState, NetworkConfig};
use ecmr_core::sep::{
    aggregate_features, build_similarity_graph, detachment_cost, minimize_2dse_greedy,
    retention_flags,
};
use ecmr_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::from_vec(&[h, w], data).unwrap()
}

fn scramble_task(model: &mut ModelState, task: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in model.owned_parameter_ids(task).unwrap() {
        let mut v = model.param(&id).unwrap().value.clone();
        for x in v.data_mut() {
            *x += rng.gen_range(-0.2..0.2);
        }
        model.set_param_value(&id, v).unwrap();
    }
}

fn clone_group(model: &mut ModelState, task: &str, s: usize, src: usize, dst: usize) {
    let mut ids = vec![
        (format!("task/{task}/s{s}/head/g{src}/w"), format!("task/{task}/s{s}/head/g{dst}/w")),
        (format!("task/{task}/s{s}/head/g{src}/b"), format!("task/{task}/s{s}/head/g{dst}/b")),
    ];
    for b in 0..model.config.stages[s].blocks {
        for name in
            ["gnorm_gamma", "gnorm_beta", "conv_w", "conv_b", "gca_w1", "gca_b1", "gca_w2", "gca_b2"]
        {
            ids.push((
                format!("task/{task}/s{s}/b{b}/g{src}/{name}"),
                format!("task/{task}/s{s}/b{b}/g{dst}/{name}"),
            ));
        }
    }
    for (from, to) in ids {
        let v = model.param(&from).unwrap().value.clone();
        model.set_param_value(&to, v).unwrap();
    }
}

fn main() {
    let cfg = NetworkConfig::new(&[6, 6], &[3, 3], 1).with_mining(4, 2);
    let mut model = build_backbone(cfg, 7).unwrap();
    model.freeze_pretrained().unwrap();
    model.expand_for_task("C").unwrap();
    scramble_task(&mut model, "C", 30);
    clone_group(&mut model, "C", 0, 0, 1);
    clone_group(&mut model, "C", 1, 0, 1);
    model.mark_trained("C").unwrap();

    for i in 0..6u64 {
        let img = rand_image(100 + i, 12, 12);
        let caps = model.capture_task_features(&img, "C").unwrap();
        for s in 0..2 {
            let feats: Vec<Vec<f64>> = caps.per_stage[s]
                .iter()
                .map(|t| {
                    let m = t.shape()[1];
                    let hw = t.shape()[2] * t.shape()[3];
                    let channels: Vec<Vec<f64>> =
                        (0..m).map(|c| t.data()[c * hw..(c + 1) * hw].to_vec()).collect();
                    let cg = build_similarity_graph(&channels).unwrap();
                    aggregate_features(&channels, &cg).unwrap()
                })
                .collect();
            let g = build_similarity_graph(&feats).unwrap();
            let (p, h) = minimize_2dse_greedy(&g).unwrap();
            let costs: Vec<f64> =
                (0..g.n()).map(|v| detachment_cost(&g, &p, v).unwrap()).collect();
            let flags = retention_flags(&g, &p).unwrap();
            println!(
                "sample {i} stage {s}: w01={:.6} w02={:.6} w12={:.6} partition={:?} H={h:.6} costs={costs:?} keep={flags:?}",
                g.weight(0, 1),
                g.weight(0, 2),
                g.weight(1, 2),
                p.assignment(),
            );
        }
    }
}
