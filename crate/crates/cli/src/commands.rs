use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use simnet_core::baselines::{train_linear, CosineScorer, EuclideanScorer};
use simnet_core::dataio::{
    generate_synthetic, ids_path, load_checkpoint, queries_path, read_feature_store, save_checkpoint,
    write_atomic, write_feature_store, Checkpoint, SynthSpec,
};
use simnet_core::nn::OptimizerConfig;
use simnet_core::retrieval::{
    mean_average_precision_with, render_table, sample_balanced_pairs, Dataset, EvalReport, Scorer,
};
use simnet_core::simnet::{
    build_model, mine_difficult_pairs_with, train_with_refinement, warmup, ArchConfig, ArchPreset,
    Convergence, LrSchedule, TrainConfig, WarmupConfig,
};
use simnet_core::Execution;

use crate::args::*;
use crate::manifest::{manifest_path, ManifestBuilder};

fn store_files(m: &mut ManifestBuilder, store: &Path) {
    m.input(store).input(&ids_path(store)).input(&queries_path(store));
}

/// Reads a store and makes sure it has queries, splitting per class when the
/// store carries no query list.
fn load_store(args: &StoreArgs) -> Result<Dataset> {
    let mut d =
        read_feature_store(&args.store).with_context(|| format!("reading {}", args.store.display()))?;
    if d.query_indices().is_empty() && d.has_labels() {
        d.split_queries(args.query_fraction, args.split_seed)?;
    }
    Ok(d)
}

fn arch_config(a: &ArchArgs, dim: usize) -> Result<ArchConfig> {
    let arch = match &a.hidden {
        Some(h) => ArchConfig::custom(h.clone(), dim),
        None => {
            let preset: ArchPreset = a.arch.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
            ArchConfig::preset(preset, dim)?
        }
    };
    let arch = arch.with_scale(a.scale);
    arch.validate()?;
    Ok(arch)
}

pub fn gen(a: &GenArgs) -> Result<()> {
    let mut m = ManifestBuilder::new("gen");
    let mut spec = match &a.spec {
        Some(p) => {
            m.input(p);
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SynthSpec::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { spec.$field = v; })*
        };
    }
    set!(classes => n_classes, per_class => per_class_count, dim => dim, noise => intra_class_noise,
        bridge => bridge_fraction, queries => query_fraction, seed => seed);
    let (dataset, meta) = generate_synthetic(&spec)?;
    write_feature_store(&a.out, &dataset)?;
    m.config(&spec)
        .seeds(json!({ "seed": spec.seed }))
        .output(&a.out)
        .output(&ids_path(&a.out))
        .output(&queries_path(&a.out))
        .results(&meta);
    m.write(&manifest_path(&a.out))?;
    println!(
        "wrote {} items ({} bridge, {} queries, {} labels) to {}",
        meta.n_items,
        meta.n_bridge_items,
        meta.n_queries,
        meta.class_counts.len(),
        a.out.display()
    );
    println!("triangle violations: {}", meta.triangle_violations);
    Ok(())
}

pub fn warmup_cmd(exec: Execution, a: &WarmupArgs) -> Result<()> {
    let arch = arch_config(&a.arch, a.dim)?;
    let cfg = WarmupConfig {
        optimizer: OptimizerConfig {
            learning_rate: a.lr,
            batch_size: a.batch,
            weight_decay: a.weight_decay,
            momentum: a.momentum,
            seed: a.seed,
            execution: exec,
        },
        schedule: match a.schedule {
            Schedule::Constant => LrSchedule::Constant,
            Schedule::LinearDecay => LrSchedule::LinearDecay,
        },
        ..WarmupConfig::default()
    };
    let mut model = build_model(arch.clone(), a.seed)?;
    let report = warmup(&mut model, a.pairs, a.val_pairs, &cfg)?;
    save_checkpoint(&a.out, &Checkpoint::SimNet(model))?;
    let mut m = ManifestBuilder::new("warmup");
    m.config(json!({
        "arch": arch,
        "layer_dims": arch.layer_dims(),
        "pairs": a.pairs,
        "val_pairs": a.val_pairs,
        "warmup": cfg,
    }))
    .seeds(json!({ "init": a.seed, "pairs": a.seed }))
    .output(&a.out)
    .results(report);
    m.write(&manifest_path(&a.out))?;
    println!(
        "warm-up: {} pairs, held-out MSE {:.6} (from {:.6}), rho {:.4}",
        report.pairs_trained, report.mse, report.initial_mse, report.correlation_rho
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_config(exec: Execution, a: &TrainArgs) -> TrainConfig {
    let defaults = if a.refine { TrainConfig::simnet_star() } else { TrainConfig::simnet() };
    TrainConfig {
        margin: a.delta.unwrap_or(defaults.margin),
        optimizer: OptimizerConfig {
            learning_rate: a.lr,
            batch_size: a.batch,
            weight_decay: a.weight_decay,
            momentum: a.momentum,
            seed: a.seed,
            execution: exec,
        },
        max_epochs: a.epochs,
        convergence: Convergence { patience: a.patience, min_delta: a.min_delta },
        mined_fraction_cap: a.mined_cap,
        val_fraction: a.val_fraction,
        base_pairs: a.pairs,
        mining_pool: a.pool,
        refinement_rounds: if a.refine { a.rounds } else { 0 },
    }
}

fn log_path(a: &TrainArgs) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    })
}

pub fn train_cmd(exec: Execution, a: &TrainArgs) -> Result<()> {
    let dataset = load_store(&a.store)?;
    let cfg = train_config(exec, a);
    cfg.validate()?;
    let mut m = ManifestBuilder::new("train");
    store_files(&mut m, &a.store.store);

    let (ckpt, log, family) = match a.family {
        Family::Linear => {
            if a.refine || a.model_in.is_some() {
                bail!("--refine and --model-in apply to the simnet family only");
            }
            let pairs = sample_balanced_pairs(&dataset, cfg.base_pairs, cfg.optimizer.seed)?;
            let (model, log) = train_linear(&dataset, &pairs, &cfg)?;
            (Checkpoint::Linear(model), log, "linear")
        }
        Family::Simnet => {
            let mut model = match &a.model_in {
                Some(p) => {
                    m.input(p);
                    load_checkpoint(p)?.into_simnet()?
                }
                None => build_model(arch_config(&a.arch, dataset.dim())?, cfg.optimizer.seed)?,
            };
            let log = train_with_refinement(&mut model, &dataset, &cfg)?;
            (Checkpoint::SimNet(model), log, if a.refine { "simnet*" } else { "simnet" })
        }
    };
    save_checkpoint(&a.out, &ckpt)?;
    let log_out = log_path(a);
    write_atomic(&log_out, log.to_jsonl().as_bytes())?;

    let phases = log.phases();
    m.config(json!({
        "family": family,
        "model_in": a.model_in,
        "query_fraction": a.store.query_fraction,
        "train": cfg,
    }))
    .seeds(json!({ "train": cfg.optimizer.seed, "query_split": a.store.split_seed }))
    .output(&a.out)
    .output(&log_out)
    .results(json!({
        "epochs": log.records.len(),
        "phases": phases,
        "final_val_loss": log.last_val_loss(),
    }));
    m.write(&manifest_path(&a.out))?;
    println!(
        "{family}: {} epochs over phases {:?}, final validation loss {:.5}",
        log.records.len(),
        phases,
        log.last_val_loss().unwrap_or(f64::NAN)
    );
    println!("wrote {} and {}", a.out.display(), log_out.display());
    Ok(())
}

pub fn mine_cmd(exec: Execution, a: &MineArgs) -> Result<()> {
    let dataset = load_store(&a.store)?;
    let model = load_checkpoint(&a.model)?.into_simnet()?;
    let mined = mine_difficult_pairs_with(&model, &dataset, a.pool, a.seed, exec)?;
    let mut text = String::new();
    for p in &mined.pairs {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    write_atomic(&a.out, text.as_bytes())?;
    let mut m = ManifestBuilder::new("mine");
    store_files(&mut m, &a.store.store);
    m.input(&a.model)
        .config(json!({ "pool": a.pool, "query_fraction": a.store.query_fraction }))
        .seeds(json!({ "pool": a.seed, "query_split": a.store.split_seed }))
        .output(&a.out)
        .results(json!({ "difficult_pairs": mined.len(), "similar": mined.similar_count() }));
    m.write(&manifest_path(&a.out))?;
    println!(
        "{} difficult pairs ({} similar) written to {}",
        mined.len(),
        mined.similar_count(),
        a.out.display()
    );
    Ok(())
}

fn evaluate(exec: Execution, spec: &ScorerSpec, dataset: &Dataset) -> Result<EvalReport> {
    let scorer: Box<dyn Scorer> = match spec {
        ScorerSpec::Cosine => Box::new(CosineScorer),
        ScorerSpec::Euclid => Box::new(EuclideanScorer),
        ScorerSpec::Linear(p) => Box::new(load_checkpoint(p)?.into_linear()?),
        ScorerSpec::Simnet(p) => match load_checkpoint(p)? {
            Checkpoint::EncoderSimNet(e) => Box::new(e),
            other => Box::new(other.into_simnet()?),
        },
    };
    let mut report = mean_average_precision_with(&*scorer, dataset, exec)?;
    report.scorer = spec.to_string();
    Ok(report)
}

fn eval_many(
    exec: Execution,
    command: &str,
    store: &StoreArgs,
    scorers: &[ScorerSpec],
    report: Option<&Path>,
) -> Result<()> {
    let dataset = load_store(store)?;
    let reports = scorers
        .iter()
        .map(|s| evaluate(exec, s, &dataset).with_context(|| format!("scorer {s}")))
        .collect::<Result<Vec<_>>>()?;
    print!("{}", render_table(&reports));
    let Some(out) = report else {
        return Ok(());
    };
    let text: String = reports.iter().map(|r| r.to_jsonl()).collect();
    write_atomic(out, text.as_bytes())?;
    let mut m = ManifestBuilder::new(command);
    store_files(&mut m, &store.store);
    for s in scorers {
        if let ScorerSpec::Linear(p) | ScorerSpec::Simnet(p) = s {
            m.input(p);
        }
    }
    let rows: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "scorer": r.scorer,
                "map": r.map,
                "queries": r.per_query.len(),
                "skipped_queries": r.skipped_queries,
            })
        })
        .collect();
    m.config(json!({
        "scorers": scorers.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "query_fraction": store.query_fraction,
    }))
    .seeds(json!({ "query_split": store.split_seed }))
    .output(out)
    .results(rows);
    m.write(&manifest_path(out))?;
    Ok(())
}

pub fn eval_cmd(exec: Execution, a: &EvalArgs) -> Result<()> {
    eval_many(exec, "eval", &a.store, std::slice::from_ref(&a.scorer), a.report.as_deref())
}

pub fn compare_cmd(exec: Execution, a: &CompareArgs) -> Result<()> {
    eval_many(exec, "compare", &a.store, &a.scorers, a.report.as_deref())
}
