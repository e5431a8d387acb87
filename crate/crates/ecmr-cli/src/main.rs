//! `ecmr` — continual restoration loop driver.
//!
//! Usage: ecmr [--config=FILE] [--workdir=DIR] [--KEY=VALUE ...] COMMAND [ARGS]
//!
//! Commands:
//!   pretrain            build a fresh model and pretrain the template path
//!   add-task ID         expand for a task and train its path
//!   prune ID            redundancy-prune a trained task
//!   finetune ID         fine-tune a pruned task's survivors and finalize it
//!   eval                evaluate every finalized task, write eval.csv
//!   run-all             the whole sequence: pretrain + every configured task
//!   se-analyze FILE     entropy analysis of a graph dump
//!   report [IN] [OUT]   render a records CSV to markdown
//!
//! Any configuration key can be overridden as --KEY=VALUE (e.g. --rho=0.2,
//! --stage.0.width=8). All paths, including --config, resolve relative to
//! --workdir (default "."). ECMR_SEED overrides the configured seed. Exit
//! codes: 0 success, 1 usage/configuration error, 2 runtime failure.
//!
//! State lives under WORKDIR/checkpoints/; every stateful command writes a
//! new checkpoint directory and atomically repoints the `latest` file, never
//! editing an existing checkpoint.

mod config;

use std::path::{Path, PathBuf};
use std::time::Instant;

use ecmr_core::backbone::{build_backbone, ModelState, TaskPhase};
use ecmr_core::checkpoint::{load_checkpoint, save_checkpoint};
use ecmr_core::degrade::{build_corpus, derive_seed, make_sample_pool, Pair, TaskSpec};
use ecmr_core::pruning::sep_report_csv;
use ecmr_core::sep;
use ecmr_core::tensor::Tensor;
use ecmr_core::trainer;
use ecmr_core::{Error, Result};

use config::{parse_config, RunConfig};

fn main() {
    std::process::exit(run(std::env::args().skip(1).collect()));
}

fn run(args: Vec<String>) -> i32 {
    let t0 = Instant::now();
    match dispatch(args) {
        Ok(()) => {
            println!("done in {:.2?}", t0.elapsed());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArg(_) | Error::Registry(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(args: Vec<String>) -> Result<()> {
    let mut overrides: Vec<(String, String)> = Vec::new();
    let mut positionals: Vec<String> = Vec::new();
    let mut config_path: Option<String> = None;
    let mut workdir = PathBuf::from(".");
    for arg in args {
        if let Some(body) = arg.strip_prefix("--") {
            let (k, v) = body.split_once('=').ok_or_else(|| {
                Error::Config(format!("flag '{arg}' must be --key=value"))
            })?;
            match k {
                "config" => config_path = Some(v.to_string()),
                "workdir" => workdir = PathBuf::from(v),
                _ => overrides.push((k.to_string(), v.to_string())),
            }
        } else {
            positionals.push(arg);
        }
    }
    let mut pos = positionals.into_iter();
    let command = pos
        .next()
        .ok_or_else(|| Error::Config("no command given (try: run-all, report, ...)".into()))?;
    let args: Vec<String> = pos.collect();

    let cfg_file = config_path.map(|p| workdir.join(p));
    let cfg = parse_config(cfg_file.as_deref(), &overrides)?;
    print!("{}", cfg.echo());

    match command.as_str() {
        "pretrain" => cmd_pretrain(&workdir, &cfg),
        "add-task" => cmd_add_task(&workdir, &cfg, one_arg(&args, "add-task ID")?),
        "prune" => cmd_prune(&workdir, &cfg, one_arg(&args, "prune ID")?),
        "finetune" => cmd_finetune(&workdir, &cfg, one_arg(&args, "finetune ID")?),
        "eval" => cmd_eval(&workdir, &cfg),
        "run-all" => cmd_run_all(&workdir, &cfg),
        "se-analyze" => cmd_se_analyze(&workdir, one_arg(&args, "se-analyze FILE")?),
        "report" => cmd_report(&workdir, &args),
        other => Err(Error::Config(format!("unknown command '{other}'"))),
    }
}

fn one_arg<'a>(args: &'a [String], usage: &str) -> Result<&'a str> {
    match args {
        [a] => Ok(a),
        _ => Err(Error::Config(format!("usage: {usage}"))),
    }
}

// ---------------------------------------------------------------- state ----

fn checkpoints_dir(workdir: &Path) -> PathBuf {
    workdir.join("checkpoints")
}

fn latest_pointer(workdir: &Path) -> PathBuf {
    checkpoints_dir(workdir).join("latest")
}

/// Atomically repoint `latest` at a checkpoint directory name.
fn write_latest(workdir: &Path, name: &str) -> Result<()> {
    let pointer = latest_pointer(workdir);
    let tmp = pointer.with_extension(format!("tmp-{}", std::process::id()));
    std::fs::write(&tmp, format!("{name}\n"))?;
    std::fs::rename(&tmp, &pointer)?;
    Ok(())
}

/// Save a new checkpoint directory and repoint `latest` at it.
fn save_state(workdir: &Path, model: &ModelState, name: &str) -> Result<()> {
    let dir = checkpoints_dir(workdir).join(name);
    save_checkpoint(model, &dir)?;
    write_latest(workdir, name)?;
    println!("wrote checkpoint {}", dir.display());
    Ok(())
}

/// Load the model named by config.model_path, or follow the latest pointer.
fn load_state(workdir: &Path, cfg: &RunConfig) -> Result<ModelState> {
    let dir = if cfg.model_path.is_empty() {
        let pointer = latest_pointer(workdir);
        let name = std::fs::read_to_string(&pointer).map_err(|_| {
            Error::Config(format!(
                "no checkpoint found ({} missing); run pretrain first",
                pointer.display()
            ))
        })?;
        checkpoints_dir(workdir).join(name.trim())
    } else {
        workdir.join(&cfg.model_path)
    };
    load_checkpoint(&dir)
}

/// Shared-data-seed corpus for one task (identical across commands and the
/// full-loop command, so stepwise and run-all produce the same bytes).
fn task_corpus(cfg: &RunConfig, model_seed: u64, spec: &TaskSpec) -> Result<ecmr_core::degrade::Corpus> {
    build_corpus(
        spec,
        cfg.train.n_train,
        cfg.train.n_test,
        cfg.train.image_h,
        cfg.train.image_w,
        derive_seed(model_seed, "corpus", 0),
    )
}

// ------------------------------------------------------------- commands ----

fn cmd_pretrain(workdir: &Path, cfg: &RunConfig) -> Result<()> {
    let mut model = build_backbone(cfg.network(), cfg.seed)?;
    let clean_spec = TaskSpec::parse("C")?;
    let mut corpus = build_corpus(
        &clean_spec,
        cfg.train.n_train,
        cfg.train.n_test,
        cfg.train.image_h,
        cfg.train.image_w,
        derive_seed(cfg.seed, "pretrain-data", 0),
    )?;
    for pair in corpus.train.iter_mut() {
        pair.degraded = pair.clean.clone();
    }
    let losses = trainer::pretrain(&mut model, &corpus.train, &cfg.train)?;
    println!(
        "pretrain losses: first {:.6} last {:.6}",
        losses.first().unwrap(),
        losses.last().unwrap()
    );
    save_state(workdir, &model, "pretrained")
}

fn cmd_add_task(workdir: &Path, cfg: &RunConfig, task_id: &str) -> Result<()> {
    let mut model = load_state(workdir, cfg)?;
    let spec = TaskSpec::parse(task_id)?;
    model.expand_for_task(task_id)?;
    let corpus = task_corpus(cfg, model.seed, &spec)?;
    let losses = trainer::train_task(&mut model, task_id, &corpus.train, &cfg.train)?;
    println!(
        "task {task_id} losses: first {:.6} last {:.6}",
        losses.first().unwrap(),
        losses.last().unwrap()
    );
    save_state(workdir, &model, &format!("trained-{task_id}"))
}

fn cmd_prune(workdir: &Path, cfg: &RunConfig, task_id: &str) -> Result<()> {
    let mut model = load_state(workdir, cfg)?;
    let spec = TaskSpec::parse(task_id)?;
    let pool = make_sample_pool(
        &spec,
        cfg.train.pool_n,
        derive_seed(model.seed, &format!("pool/{task_id}"), 0),
        cfg.train.image_h,
        cfg.train.image_w,
    )?;
    let inputs: Vec<Tensor> = pool.pairs.iter().map(|p| p.degraded.clone()).collect();
    let report = ecmr_core::pruning::run_sep(&mut model, task_id, &inputs, cfg.train.rho)?;
    let csv_path = workdir.join(format!("sep-{task_id}.csv"));
    std::fs::write(&csv_path, sep_report_csv(&report))?;
    println!(
        "pruned task {task_id}: params {} -> {}, survivors per stage {:?}",
        report.params_before,
        report.params_after,
        report.retained_per_stage(model.config.num_stages())
    );
    println!("wrote {}", csv_path.display());
    save_state(workdir, &model, &format!("pruned-{task_id}"))
}

fn cmd_finetune(workdir: &Path, cfg: &RunConfig, task_id: &str) -> Result<()> {
    let mut model = load_state(workdir, cfg)?;
    let spec = TaskSpec::parse(task_id)?;
    let corpus = task_corpus(cfg, model.seed, &spec)?;
    let ft = trainer::fine_tune(&mut model, task_id, &corpus.train, &corpus.test, &cfg.train)?;
    model.finalize_task(task_id)?;
    println!(
        "fine-tuned task {task_id}: post-prune {:.3} dB, final {:.3} dB (retried={}, reverted={})",
        ft.post_prune_psnr,
        ft.psnr_curve.last().unwrap(),
        ft.retried,
        ft.reverted
    );
    save_state(workdir, &model, &format!("after-{task_id}"))
}

fn cmd_eval(workdir: &Path, cfg: &RunConfig) -> Result<()> {
    let model = load_state(workdir, cfg)?;
    let mut tests: Vec<(String, Vec<Pair>)> = Vec::new();
    let mut last_finalized = String::new();
    for tid in model.task_ids() {
        if model.task_phase(tid)? == TaskPhase::Finalized {
            let spec = TaskSpec::parse(tid)?;
            tests.push((tid.clone(), task_corpus(cfg, model.seed, &spec)?.test));
            last_finalized = tid.clone();
        }
    }
    if tests.is_empty() {
        return Err(Error::Registry("no finalized tasks to evaluate".into()));
    }
    let records = trainer::evaluate(
        &model,
        &last_finalized,
        &tests,
        (cfg.train.image_h, cfg.train.image_w),
    )?;
    for r in &records {
        println!(
            "{}: {:.3} dB / ssim {:.4} / {} params / {} MACs",
            r.task_id, r.psnr_db, r.ssim, r.params, r.macs
        );
    }
    let path = workdir.join("eval.csv");
    std::fs::write(&path, trainer::records_to_csv(&records))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_run_all(workdir: &Path, cfg: &RunConfig) -> Result<()> {
    let sequence: Vec<TaskSpec> =
        cfg.tasks.iter().map(|t| TaskSpec::parse(t)).collect::<Result<_>>()?;
    let mut model = build_backbone(cfg.network(), cfg.seed)?;
    let out = trainer::continual_run(&mut model, &sequence, &cfg.train, Some(&checkpoints_dir(workdir)))?;
    write_latest(workdir, &format!("after-{}", sequence.last().expect("non-empty").id))?;

    for tr in &out.tasks {
        println!(
            "task {}: pre-prune {:.3} dB, post-prune {:.3} dB, final {:.3} dB, params {} -> {}",
            tr.task_id,
            tr.pre_prune_psnr,
            tr.post_prune_psnr,
            tr.finetune_psnr_curve.last().unwrap_or(&tr.post_prune_psnr),
            tr.params_before_prune,
            tr.params_after_prune
        );
        if let (Some(on), Some(off)) = (tr.skmm_on_psnr, tr.skmm_off_psnr) {
            println!("  mining residual: on {on:.3} dB, off {off:.3} dB");
        }
    }
    let csv_path = workdir.join("records.csv");
    std::fs::write(&csv_path, trainer::records_to_csv(&out.records))?;
    println!("wrote {}", csv_path.display());
    let md_path = workdir.join("report.md");
    std::fs::write(&md_path, trainer::records_to_markdown(&out.records))?;
    println!("wrote {}", md_path.display());
    Ok(())
}

fn cmd_se_analyze(workdir: &Path, file: &str) -> Result<()> {
    let text = std::fs::read_to_string(workdir.join(file))
        .map_err(|e| Error::Config(format!("cannot read graph '{file}': {e}")))?;
    let g = sep::parse_graph_dump(&text)?;
    println!("vertices: {}", g.n());
    println!("volume: {}", g.volume());
    let h1 = sep::one_dim_entropy(&g);
    let total: f64 = h1.iter().sum();
    for (i, h) in h1.iter().enumerate() {
        println!("vertex {i}: 1d-se {h}");
    }
    println!("total 1d-se: {total}");

    let (gp, gh) = sep::minimize_2dse_greedy(&g)?;
    println!("greedy partition: {:?}", gp.clusters());
    println!("greedy 2d-se: H={gh}");
    if g.n() <= 12 {
        let (ep, eh) = sep::minimize_2dse_exact(&g)?;
        println!("exact partition: {:?}", ep.clusters());
        println!("exact 2d-se: H={eh}");
    } else {
        println!("exact search skipped (n > 12)");
    }
    for cluster in gp.clusters() {
        for v in cluster {
            let c = sep::detachment_cost(&g, &gp, v)?;
            println!("detachment cost of vertex {v}: {c}");
        }
    }
    let flags = sep::retention_flags(&g, &gp)?;
    println!("retention: {flags:?}");
    Ok(())
}

fn cmd_report(workdir: &Path, args: &[String]) -> Result<()> {
    let (input, output) = match args {
        [] => ("records.csv".to_string(), "report.md".to_string()),
        [i] => (i.clone(), "report.md".to_string()),
        [i, o] => (i.clone(), o.clone()),
        _ => return Err(Error::Config("usage: report [IN.csv] [OUT.md]".into())),
    };
    let text = std::fs::read_to_string(workdir.join(&input))
        .map_err(|e| Error::Config(format!("cannot read records '{input}': {e}")))?;
    let records = trainer::records_from_csv(&text)?;
    let md = trainer::records_to_markdown(&records);
    let out_path = workdir.join(&output);
    std::fs::write(&out_path, md)?;
    println!("wrote {}", out_path.display());
    Ok(())
}
