//! bdlab: experiment runner for the sequence-repetition laboratory.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 diverged run.

mod config;
mod error;
mod output;

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use bdlab_core::{
    aggregate, bidirectional_share, build_mask_config, classify_blocks, pretrain_lm,
    profile_model, toy_exit_analogs, train_sl, BlockReport, ProfileOptions, RunManifest, SLModel,
    Strategy, TaskData, LORA_ALL_TARGETS, MAX_LEN,
};

use config::{
    check_strategy_combo, generate, load_config, parse_strategy, resolve_out_dir, FileConfig,
    DEFAULT_RS,
};
use error::{config_err, CliError};
use output::{sig17, write_csv, write_json, write_json_with_config};

#[derive(Parser)]
#[command(
    name = "bdlab",
    version,
    about = "Train and analyze small decoder models with sequence repetition, \
             unmasking variants, and early exits on synthetic labeling tasks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Next-token pretraining on the task's training sentences; writes a
    /// checkpoint and a loss report.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Override the config file's pretrain_steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sequence-labeling fine-tuning; writes one manifest and checkpoint per
    /// seed. Starting from --init attaches LoRA adapters (rank from the
    /// config) and trains only those plus the classifier head; without
    /// --init the whole model trains from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// masked | repeat | full_unmask | middle_unmask
        #[arg(long)]
        strategy: Option<String>,
        /// Repetition count; only valid with the repeat strategy.
        #[arg(long)]
        r: Option<usize>,
        /// 1-indexed early-exit layer; 0 disables the exit.
        #[arg(long)]
        exit_layer: Option<usize>,
        /// Comma-separated seed list; each seed is one full run.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        /// Checkpoint to fine-tune from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Worker threads for the seed fan-out.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forward a random sequence repeated k times and dump per-layer,
    /// per-head attention weights plus their block classification.
    AnalyzeMask {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        /// Checkpoint to inspect; defaults to random weights.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure the inference speedup grid over early exits and repetition
    /// counts against the full-depth r=0 base, and fit the analytic cost
    /// model to compare ranks.
    Profile {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated exit layers; defaults to the depth-scaled analogs.
        #[arg(long, value_delimiter = ',')]
        exits: Option<Vec<usize>>,
        /// Comma-separated repetition counts; defaults to 1,2,4,8.
        #[arg(long, value_delimiter = ',')]
        reps: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run manifests into a mean ± 95% CI table per
    /// (task, strategy, r, exit) cell; needs at least two seeds per cell.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Pretrain { config, steps, out } => cmd_pretrain(&config, steps, out.as_deref()),
        Cmd::Finetune {
            config,
            strategy,
            r,
            exit_layer,
            seed,
            init,
            jobs,
            out,
        } => cmd_finetune(
            &config,
            strategy.as_deref(),
            r,
            exit_layer,
            seed,
            init.as_deref(),
            jobs,
            out.as_deref(),
        ),
        Cmd::AnalyzeMask { n, k, model, out } => {
            cmd_analyze_mask(n, k, model.as_deref(), out.as_deref())
        }
        Cmd::Profile {
            config,
            exits,
            reps,
            out,
        } => cmd_profile(&config, exits, reps, out.as_deref()),
        Cmd::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_pretrain(config: &Path, steps: Option<usize>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    cfg.train.validate().map_err(CliError::from)?;
    let steps = steps.unwrap_or(cfg.pretrain_steps);
    let out_dir = resolve_out_dir(&cfg.out_dir, out);
    ensure_dir(&out_dir)?;
    let data = generate(&cfg.task, cfg.n_sentences, cfg.data_seed)?;
    let mcfg = cfg.model.to_config(data.tokenizer.vocab.len());
    let mut model = SLModel::new(mcfg, data.split.n_labels(), cfg.train.seed)?;
    let report = pretrain_lm(&mut model, &data.split.train, steps, &cfg.train)?;
    let stem = format!("pretrain_{}_s{}", cfg.task, cfg.train.seed);
    let ckpt = out_dir.join(format!("{stem}.ckpt.json"));
    model.save(&ckpt)?;
    write_json_with_config(&out_dir.join(format!("{stem}.report.json")), &report, &cfg)?;
    println!(
        "pretrained {} steps, loss {:.4} -> {:.4}, checkpoint {}",
        report.steps,
        report.initial_loss,
        report.final_loss,
        ckpt.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_finetune(
    config: &Path,
    strategy: Option<&str>,
    r: Option<usize>,
    exit_layer: Option<usize>,
    seeds: Option<Vec<u64>>,
    init: Option<&Path>,
    jobs: usize,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = strategy {
        cfg.train.strategy = parse_strategy(s)?;
    }
    if let Some(r) = r {
        cfg.train.r = r;
    }
    if let Some(l) = exit_layer {
        cfg.train.exit_layer = l;
    }
    check_strategy_combo(cfg.train.strategy, cfg.train.r)?;
    cfg.train.validate().map_err(CliError::from)?;
    let seeds = seeds.unwrap_or_else(|| vec![cfg.train.seed]);
    if seeds.is_empty() {
        return config_err("--seed list is empty");
    }
    let jobs = jobs.max(1).min(seeds.len());
    let out_dir = resolve_out_dir(&cfg.out_dir, out);
    ensure_dir(&out_dir)?;
    let data = generate(&cfg.task, cfg.n_sentences, cfg.data_seed)?;

    // per-run outputs have disjoint paths, so workers only share the queue
    let queue: Mutex<VecDeque<u64>> = Mutex::new(seeds.iter().copied().collect());
    let failures: Mutex<Vec<(u64, CliError)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let Some(seed) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                match run_one_seed(&cfg, &data, seed, init, &out_dir) {
                    Ok(manifest) => println!(
                        "seed {seed}: test F1 {:.4} ({})",
                        manifest.test_f1,
                        manifest.file_name()
                    ),
                    Err(e) => failures.lock().unwrap().push((seed, e)),
                }
            });
        }
    });

    let mut failures = failures.into_inner().unwrap();
    if let Some(pos) = seeds
        .iter()
        .position(|s| failures.iter().any(|(fs, _)| fs == s))
    {
        let seed = seeds[pos];
        let idx = failures.iter().position(|(fs, _)| *fs == seed).unwrap();
        let (_, err) = failures.swap_remove(idx);
        return Err(match err {
            CliError::Config(m) => CliError::Config(format!("seed {seed}: {m}")),
            CliError::Diverged(m) => CliError::Diverged(format!("seed {seed}: {m}")),
        });
    }
    Ok(())
}

fn run_one_seed(
    cfg: &FileConfig,
    data: &TaskData,
    seed: u64,
    init: Option<&Path>,
    out_dir: &Path,
) -> Result<RunManifest, CliError> {
    let mut resolved = cfg.clone();
    resolved.train.seed = seed;
    let n_labels = data.split.n_labels();
    let vocab = data.tokenizer.vocab.len();
    let mut model = match init {
        Some(path) => {
            let mut m = SLModel::load(path)?;
            if m.cfg.vocab_size != vocab {
                return config_err(format!(
                    "checkpoint vocabulary {} does not match the task's {vocab}",
                    m.cfg.vocab_size
                ));
            }
            if m.n_labels != n_labels {
                return config_err(format!(
                    "checkpoint has {} labels, task needs {n_labels}",
                    m.n_labels
                ));
            }
            if resolved.train.lora_rank > 0 && m.lora_meta().is_none() {
                m.attach_lora(
                    &LORA_ALL_TARGETS,
                    resolved.train.lora_rank,
                    resolved.train.lora_alpha,
                    resolved.train.lora_dropout,
                    seed,
                )?;
            }
            m
        }
        None => SLModel::new(resolved.model.to_config(vocab), n_labels, seed)?,
    };
    let manifest = train_sl(&mut model, &resolved.task, &data.split, &resolved.train)?;
    let file = manifest.file_name();
    write_json_with_config(&out_dir.join(&file), &manifest, &resolved)?;
    let ckpt = file.replace(".json", ".ckpt.json");
    model.save(&out_dir.join(ckpt))?;
    Ok(manifest)
}

#[derive(Serialize)]
struct MaskAnalysis {
    n: usize,
    k: usize,
    share_bidirectional: f64,
    /// layers[l][h] classifies head h of layer l.
    layers: Vec<Vec<BlockReport>>,
}

fn cmd_analyze_mask(
    n: usize,
    k: usize,
    model: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if n == 0 || k == 0 {
        return config_err("--n and --k must be at least 1");
    }
    if n * k > MAX_LEN {
        return config_err(format!("k*n = {} exceeds the maximum length {MAX_LEN}", n * k));
    }
    let out_dir = resolve_out_dir("runs", out);
    ensure_dir(&out_dir)?;
    let model = match model {
        Some(path) => SLModel::load(path)?,
        None => SLModel::new(
            config::ModelSection::default().to_config(64),
            3,
            0,
        )?,
    };
    let vocab = model.cfg.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11A);
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(1..vocab)).collect();
    let mask = build_mask_config(Strategy::Repeat, model.cfg.n_layers)?;
    let (_, weights) = model.forward_inspect(&ids, &vec![false; n], &mask, k - 1);

    let seq = n * k;
    let mut rows = Vec::with_capacity(model.cfg.n_layers * model.cfg.heads * seq * seq);
    let mut layers = Vec::with_capacity(weights.len());
    for (li, heads) in weights.iter().enumerate() {
        let mut reports = Vec::with_capacity(heads.len());
        for (hi, w) in heads.iter().enumerate() {
            let d = w.data();
            for row in 0..seq {
                for col in 0..seq {
                    rows.push(format!(
                        "{li},{hi},{row},{col},{}",
                        sig17(d[row * seq + col])
                    ));
                }
            }
            // softmax zeros are exact, the threshold only splits 0 from >0
            reports.push(classify_blocks(w, n, k, 1e-300));
        }
        layers.push(reports);
    }
    let analysis = MaskAnalysis {
        n,
        k,
        share_bidirectional: bidirectional_share(k),
        layers,
    };
    let csv = out_dir.join(format!("attention_n{n}_k{k}.csv"));
    write_csv(&csv, "layer,head,row,col,weight", &rows)?;
    let json = out_dir.join(format!("blocks_n{n}_k{k}.json"));
    write_json(&json, &analysis)?;
    println!(
        "analyzed n={n} k={k}: share_bidirectional {:.4}, wrote {} and {}",
        analysis.share_bidirectional,
        csv.display(),
        json.display()
    );
    Ok(())
}

fn cmd_profile(
    config: &Path,
    exits: Option<Vec<usize>>,
    reps: Option<Vec<usize>>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let out_dir = resolve_out_dir(&cfg.out_dir, out);
    ensure_dir(&out_dir)?;
    let data = generate(&cfg.task, cfg.n_sentences, cfg.data_seed)?;
    let mcfg = cfg.model.to_config(data.tokenizer.vocab.len());
    let mut model = SLModel::new(mcfg, data.split.n_labels(), cfg.train.seed)?;
    let exits = exits.unwrap_or_else(|| toy_exit_analogs(cfg.model.n_layers));
    let rs = reps.unwrap_or_else(|| DEFAULT_RS.to_vec());
    let opts = ProfileOptions {
        batch_size: cfg.train.batch_size,
        ..ProfileOptions::default()
    };
    let report = profile_model(&mut model, &data.split.valid, &exits, &rs, &opts)?;

    let header = std::iter::once("exit".to_string())
        .chain(rs.iter().map(|r| format!("r={r}")))
        .collect::<Vec<_>>()
        .join(",");
    let grid_rows = |grid: &[Vec<f64>]| {
        exits
            .iter()
            .zip(grid)
            .map(|(l, row)| {
                std::iter::once(l.to_string())
                    .chain(row.iter().map(|v| sig17(*v)))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
    };
    write_csv(
        &out_dir.join("profile_speedup.csv"),
        &header,
        &grid_rows(&report.measured_speedup),
    )?;
    write_csv(
        &out_dir.join("profile_theory.csv"),
        &header,
        &grid_rows(&report.theory_speedup),
    )?;
    write_json_with_config(&out_dir.join("profile.json"), &report, &cfg)?;
    println!(
        "profiled {} cells: base {:.4}s, spearman(measured, theory) {:.3}, wrote {}",
        exits.len() * rs.len(),
        report.base_seconds,
        report.spearman,
        out_dir.join("profile.json").display()
    );
    Ok(())
}

struct Cell {
    values: Vec<(u64, f64)>,
}

fn cmd_report(runs: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let out_dir = resolve_out_dir(&runs.display().to_string(), out);
    ensure_dir(&out_dir)?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(runs)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", runs.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && !p.to_string_lossy().ends_with(".ckpt.json")
        })
        .collect();
    names.sort();

    let mut cells: BTreeMap<(String, String, usize, usize), Cell> = BTreeMap::new();
    for path in &names {
        let text = std::fs::read_to_string(path)?;
        // directories mix manifests with reports and checkpoints; only
        // well-formed run manifests participate
        let Ok(m) = serde_json::from_str::<RunManifest>(&text) else {
            continue;
        };
        let key = (
            m.task.clone(),
            m.config.strategy.as_str().to_string(),
            m.config.effective_r(),
            m.config.exit_layer,
        );
        cells
            .entry(key)
            .or_insert_with(|| Cell { values: Vec::new() })
            .values
            .push((m.config.seed, m.test_f1));
    }
    if cells.is_empty() {
        return config_err(format!("no run manifests found in {}", runs.display()));
    }

    let mut stats = Vec::new();
    for ((task, strategy, r, exit), cell) in &cells {
        if cell.values.len() < 2 {
            return config_err(format!(
                "cell {task}/{strategy}/r{r}/L{exit} has {} run(s); need at least 2 seeds",
                cell.values.len()
            ));
        }
        let mut values = cell.values.clone();
        values.sort_by_key(|(seed, _)| *seed);
        let f1s: Vec<f64> = values.iter().map(|(_, f1)| *f1).collect();
        let agg = aggregate(&f1s)?;
        stats.push((
            task.clone(),
            strategy.clone(),
            *r,
            *exit,
            f1s.len(),
            agg.mean,
            agg.ci_halfwidth,
        ));
    }
    // best mean per task
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for (task, _, _, _, _, mean, _) in &stats {
        let e = best.entry(task.clone()).or_insert(f64::NEG_INFINITY);
        *e = e.max(*mean);
    }

    let csv_rows: Vec<String> = stats
        .iter()
        .map(|(task, strategy, r, exit, n, mean, ci)| {
            format!(
                "{task},{strategy},{r},{exit},{n},{},{},{}",
                sig17(*mean),
                sig17(*ci),
                (*mean == best[task]) as u8
            )
        })
        .collect();
    write_csv(
        &out_dir.join("report.csv"),
        "task,strategy,r,exit_layer,seeds,mean_f1,ci95,best",
        &csv_rows,
    )?;

    let mut md = String::from(
        "| task | strategy | r | exit | seeds | test F1 (mean ± 95% CI) |\n\
         |---|---|---|---|---|---|\n",
    );
    for (task, strategy, r, exit, n, mean, ci) in &stats {
        let val = format!("{mean:.4} ± {ci:.4}");
        let val = if *mean == best[task] {
            format!("**{val}**")
        } else {
            val
        };
        md.push_str(&format!(
            "| {task} | {strategy} | {r} | {exit} | {n} | {val} |\n"
        ));
    }
    std::fs::write(out_dir.join("report.md"), md)?;
    println!(
        "aggregated {} cells from {} manifests into {}",
        stats.len(),
        cells.values().map(|c| c.values.len()).sum::<usize>(),
        out_dir.join("report.csv").display()
    );
    Ok(())
}
