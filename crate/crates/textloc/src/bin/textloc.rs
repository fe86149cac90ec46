use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use textloc::autodiff::Graph;
use textloc::coarse::{
    build_index, encode_text, load_coarse_checkpoint, retrieve, save_coarse_checkpoint,
    save_index, train_coarse,
};
use textloc::config::{write_json_atomic, Provenance, RunConfig};
use textloc::error::{Result, TextLocError};
use textloc::eval::{evaluate_pipeline, run_ablation_attention, run_ablation_queries};
use textloc::fine::{load_fine_checkpoint, localize, save_fine_checkpoint, train_fine};
use textloc::scene::{build_dataset, load_dataset, save_dataset, Split};

#[derive(Parser)]
#[command(
    name = "textloc",
    version,
    about = "Text-to-point-cloud localization on a synthetic city"
)]
struct Cli {
    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Override every stage seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    Attention,
    Queries,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the coarse retrieval model.
    TrainCoarse {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the fine localization model.
    TrainFine {
        #[arg(long)]
        config: PathBuf,
    },
    /// Build the cell-embedding index from a coarse checkpoint.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
    },
    /// Localize a hint set: retrieve top-k cells, refine a position in each.
    Localize {
        /// Hints separated by '|'.
        #[arg(long)]
        text: String,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        coarse_ckpt: PathBuf,
        #[arg(long)]
        fine_ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Evaluate the trained pipeline on a dataset split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Run an ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

fn emit<T: Serialize>(json: bool, value: &T, human: &str) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{human}");
    }
    Ok(())
}

fn cmd_gen_data(cfg: &RunConfig, json: bool) -> Result<()> {
    let spec = cfg.scene.to_scene_spec();
    let dataset = build_dataset(
        &spec,
        cfg.scene.cell_size_m,
        cfg.scene.stride_m,
        &cfg.scene.sampling,
    )?;
    save_dataset(&dataset, &cfg.paths.dataset_dir)?;
    let prov = Provenance::new(cfg, "gen-data");
    write_json_atomic(&cfg.paths.dataset_dir.join("run.json"), &prov)?;
    let hash = dataset.content_hash();
    emit(
        json,
        &serde_json::json!({
            "dataset_dir": cfg.paths.dataset_dir,
            "cells": dataset.cells.len(),
            "poses": dataset.poses.len(),
            "content_hash": hash,
            "provenance": prov,
        }),
        &format!(
            "dataset written to {} ({} cells, {} poses, hash {hash})",
            cfg.paths.dataset_dir.display(),
            dataset.cells.len(),
            dataset.poses.len()
        ),
    )
}

fn run_sidecar(path: &std::path::Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".run.json");
    PathBuf::from(p)
}

fn cmd_train_coarse(cfg: &RunConfig, json: bool) -> Result<()> {
    let dataset = load_dataset(&cfg.paths.dataset_dir)?;
    let (model, curve) = train_coarse(&dataset, &cfg.coarse)?;
    save_coarse_checkpoint(&model, &cfg.paths.coarse_checkpoint)?;
    let prov = Provenance::new(cfg, "train-coarse");
    write_json_atomic(
        &run_sidecar(&cfg.paths.coarse_checkpoint),
        &serde_json::json!({ "provenance": prov, "loss_curve": curve }),
    )?;
    emit(
        json,
        &serde_json::json!({
            "checkpoint": cfg.paths.coarse_checkpoint,
            "fingerprint": model.store.fingerprint(),
            "loss_curve": curve,
            "provenance": prov,
        }),
        &format!(
            "coarse checkpoint written to {} (loss {:.6} -> {:.6})",
            cfg.paths.coarse_checkpoint.display(),
            curve.first().unwrap(),
            curve.last().unwrap()
        ),
    )
}

fn cmd_train_fine(cfg: &RunConfig, json: bool) -> Result<()> {
    let dataset = load_dataset(&cfg.paths.dataset_dir)?;
    let (model, curve) = train_fine(&dataset, &cfg.fine)?;
    save_fine_checkpoint(&model, &cfg.paths.fine_checkpoint)?;
    let prov = Provenance::new(cfg, "train-fine");
    write_json_atomic(
        &run_sidecar(&cfg.paths.fine_checkpoint),
        &serde_json::json!({ "provenance": prov, "loss_curve": curve }),
    )?;
    emit(
        json,
        &serde_json::json!({
            "checkpoint": cfg.paths.fine_checkpoint,
            "fingerprint": model.store.fingerprint(),
            "loss_curve": curve,
            "provenance": prov,
        }),
        &format!(
            "fine checkpoint written to {} (loss {:.6} -> {:.6})",
            cfg.paths.fine_checkpoint.display(),
            curve.first().unwrap(),
            curve.last().unwrap()
        ),
    )
}

fn cmd_build_index(cfg: &RunConfig, json: bool) -> Result<()> {
    let dataset = load_dataset(&cfg.paths.dataset_dir)?;
    let model = load_coarse_checkpoint(&cfg.paths.coarse_checkpoint)?;
    let index = build_index(&dataset, &model)?;
    save_index(&index, &cfg.paths.index_file)?;
    let prov = Provenance::new(cfg, "build-index");
    write_json_atomic(&run_sidecar(&cfg.paths.index_file), &prov)?;
    emit(
        json,
        &serde_json::json!({
            "index": cfg.paths.index_file,
            "cells": index.len(),
            "fingerprint": index.fingerprint,
            "provenance": prov,
        }),
        &format!(
            "index written to {} ({} cells, fingerprint {})",
            cfg.paths.index_file.display(),
            index.len(),
            index.fingerprint
        ),
    )
}

fn cmd_localize(
    text: &str,
    index_path: &PathBuf,
    coarse_ckpt: &PathBuf,
    fine_ckpt: &PathBuf,
    dataset_dir: &PathBuf,
    k: usize,
    json: bool,
) -> Result<()> {
    let hints: Vec<String> = text
        .split('|')
        .map(|h| h.trim().to_string())
        .filter(|h| !h.is_empty())
        .collect();
    if hints.is_empty() {
        return Err(TextLocError::Argument("no hints given (separate with '|')".into()));
    }
    let index = textloc::coarse::load_index(index_path)?;
    let coarse = load_coarse_checkpoint(coarse_ckpt)?;
    if index.fingerprint != coarse.store.fingerprint() {
        return Err(TextLocError::Index(format!(
            "index fingerprint {} does not match coarse checkpoint {}",
            index.fingerprint,
            coarse.store.fingerprint()
        )));
    }
    let fine = load_fine_checkpoint(fine_ckpt)?;
    let dataset = load_dataset(dataset_dir)?;
    let mut g = Graph::new();
    let q = encode_text(&mut g, &coarse, &hints)?;
    let qv = g.value1(q);
    let top = retrieve(&index, &qv, k)?;
    let mut results = Vec::with_capacity(top.len());
    for (cell_id, similarity) in top {
        let cell = dataset
            .cell(cell_id)
            .ok_or_else(|| TextLocError::Index(format!("index references missing cell {cell_id}")))?;
        let pred = localize(&fine, cell, &hints)?;
        results.push(serde_json::json!({
            "cell_id": cell_id,
            "similarity": similarity,
            "world": pred.world,
            "normalized": pred.normalized,
        }));
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!(
                "cell {:>4}  sim {:+.4}  position ({:.2}, {:.2}) m",
                r["cell_id"],
                r["similarity"].as_f64().unwrap(),
                r["world"][0].as_f64().unwrap(),
                r["world"][1].as_f64().unwrap()
            );
        }
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, split: Split, json: bool) -> Result<()> {
    let dataset = load_dataset(&cfg.paths.dataset_dir)?;
    let coarse = load_coarse_checkpoint(&cfg.paths.coarse_checkpoint)?;
    let fine = load_fine_checkpoint(&cfg.paths.fine_checkpoint)?;
    let index = textloc::coarse::load_index(&cfg.paths.index_file)?;
    if index.fingerprint != coarse.store.fingerprint() {
        return Err(TextLocError::Index(format!(
            "index fingerprint {} does not match coarse checkpoint {}",
            index.fingerprint,
            coarse.store.fingerprint()
        )));
    }
    let report = evaluate_pipeline(&dataset, &coarse, &fine, &index, split, &cfg.eval)?;
    let prov = Provenance::new(cfg, "evaluate");
    let wrapped = serde_json::json!({ "provenance": prov, "report": report });
    write_json_atomic(&cfg.paths.report_file, &wrapped)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&wrapped)?);
    } else {
        println!("evaluation on {split:?} ({} queries)", report.query_count);
        for (k, r) in &report.retrieval_recall {
            println!("  retrieval recall@{k}: {r:.3}");
        }
        for e in &report.localization_recall {
            println!(
                "  localization recall k={} eps={}m: {:.3}",
                e.k, e.epsilon_m, e.recall
            );
        }
        println!("  mean normalized error: {:.4}", report.mean_normalized_error);
        println!("report written to {}", cfg.paths.report_file.display());
    }
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, grid: Grid, json: bool) -> Result<()> {
    let dataset = load_dataset(&cfg.paths.dataset_dir)?;
    let report = match grid {
        Grid::Attention => run_ablation_attention(
            &dataset,
            &cfg.coarse,
            &cfg.ablation.variants,
            &cfg.ablation.seeds,
            cfg.ablation.split,
        )?,
        Grid::Queries => run_ablation_queries(
            &dataset,
            &cfg.coarse,
            &cfg.fine,
            &cfg.ablation.query_counts,
            &cfg.ablation.seeds,
            cfg.ablation.split,
            &cfg.eval,
        )?,
    };
    let prov = Provenance::new(cfg, "ablate");
    let wrapped = serde_json::json!({ "provenance": prov, "report": report });
    write_json_atomic(&cfg.paths.report_file, &wrapped)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&wrapped)?);
    } else {
        println!("{}", report.metric);
        for e in &report.entries {
            println!("  {:>8}: mean {:.3} sd {:.3} {:?}", e.label, e.mean, e.sd, e.per_seed);
        }
        println!("report written to {}", cfg.paths.report_file.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { config } => {
            let cfg = load_config(config, cli.seed)?;
            cmd_gen_data(&cfg, cli.json)
        }
        Command::TrainCoarse { config } => {
            let cfg = load_config(config, cli.seed)?;
            cmd_train_coarse(&cfg, cli.json)
        }
        Command::TrainFine { config } => {
            let cfg = load_config(config, cli.seed)?;
            cmd_train_fine(&cfg, cli.json)
        }
        Command::BuildIndex { config } => {
            let cfg = load_config(config, cli.seed)?;
            cmd_build_index(&cfg, cli.json)
        }
        Command::Localize {
            text,
            index,
            coarse_ckpt,
            fine_ckpt,
            dataset,
            k,
        } => cmd_localize(text, index, coarse_ckpt, fine_ckpt, dataset, *k, cli.json),
        Command::Evaluate { config, split } => {
            let cfg = load_config(config, cli.seed)?;
            cmd_evaluate(&cfg, (*split).into(), cli.json)
        }
        Command::Ablate { config, grid } => {
            let cfg = load_config(config, cli.seed)?;
            cmd_ablate(&cfg, *grid, cli.json)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
