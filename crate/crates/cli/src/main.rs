//! Command-line pipeline: generate data, train, build the serving index,
//! retrieve, evaluate, and run ablation grids.
//!
//! Every subcommand takes `--config <path>` (JSON run config) and an optional
//! `--seed <n>` override. Exit code is 0 on success; failures print one
//! machine-parseable `error: ...` line on stderr and exit nonzero.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hsnn_core::config::RunConfig;
use hsnn_core::datagen::{generate_world, write_dataset, World};
use hsnn_core::eval::{self, AblationToggle};
use hsnn_core::features::FeatureBundle;
use hsnn_core::hsnn::{calibrate_hsnn, train_hsnn, HsnnModel, HsnnSpec};
use hsnn_core::serving::{
    build_inverted_index, load_snapshot, retrieve_layerwise, save_snapshot, split_model,
    CostCounter, InvertedIndex, RetrievalBudget,
};

#[derive(Parser)]
#[command(name = "hsnn", version, about = "Hierarchical retrieval experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic world and a logged impression dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Logged impressions to write alongside the world.
        #[arg(long, default_value_t = 10_000)]
        impressions: usize,
    },
    /// Train a model on the configured mode and publish its artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// World file from gen-data; regenerated from config when omitted.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the serving inverted index from a snapshot and world.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve top-k items for a list of user ids.
    Retrieve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        inverted: PathBuf,
        #[arg(long)]
        world: PathBuf,
        /// Comma-separated user ids.
        #[arg(long)]
        users: String,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline and emit a metrics report.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Report file; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Paired-seed ablation grid; emits CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated seeds (defaults to the config seed).
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated toggles: scheduler_off, warmup_off, balance_off.
        #[arg(long, default_value = "")]
        toggles: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = match seed {
        Some(s) => cfg.seeded(s),
        None => cfg.seeded(cfg.seed),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_world(path: &Path) -> anyhow::Result<World> {
    let s = fs::read_to_string(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(serde_json::from_str(&s)?)
}

fn train_model(cfg: &RunConfig, world: &World) -> anyhow::Result<(HsnnModel, Vec<hsnn_core::hsnn::StepStats>)> {
    let schema = cfg.effective_schema();
    let spec = HsnnSpec::from_presets(&cfg.model.presets, &cfg.model.ks)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = HsnnModel::new(&schema, &spec, cfg.world.num_tasks(), &mut rng)?;
    let batches = eval::make_train_batches(world, cfg);
    let trace = train_hsnn(&mut model, &schema, &batches, &world.items, &cfg.train)?;
    // Calibrate against the published hard index.
    let index = model.publish(&schema, &world.items, cfg.train.max_alpha, 1)?;
    let i2if = hsnn_core::features::I2ifIndex::build(&world.items);
    let calib = {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0003);
        world.sample_impressions(cfg.pipeline.calib_examples, 0, &mut r)
    };
    calibrate_hsnn(&mut model, &schema, &calib, &i2if, &index)?;
    Ok((model, trace.steps))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData {
            config,
            seed,
            out_dir,
            impressions,
        } => {
            let cfg = load_config(&config, seed)?;
            fs::create_dir_all(&out_dir)?;
            let world = generate_world(&cfg.world)?;
            fs::write(out_dir.join("world.json"), serde_json::to_string(&world)?)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0001);
            let exs = world.sample_impressions(impressions, 0, &mut rng);
            write_dataset(&out_dir.join("impressions.jsonl"), &exs)?;
            println!(
                "wrote {} items, {} users, {} impressions to {}",
                world.items.len(),
                world.users.len(),
                impressions,
                out_dir.display()
            );
            Ok(())
        }
        Cmd::Train {
            config,
            seed,
            world,
            out_dir,
        } => {
            let cfg = load_config(&config, seed)?;
            let world = match world {
                Some(p) => load_world(&p)?,
                None => generate_world(&cfg.world)?,
            };
            let (model, steps) = train_model(&cfg, &world)?;
            fs::create_dir_all(&out_dir)?;
            let schema = cfg.effective_schema();
            // Publish pair: snapshot + hierarchical index artifact.
            let snapshot = split_model(&model, &schema, 1, cfg.pipeline.train_batches);
            save_snapshot(&snapshot, &out_dir.join("snapshot"))?;
            let index = model.publish(&schema, &world.items, cfg.train.max_alpha, 1)?;
            hsnn_core::index::save_index(&index, &out_dir.join("index"))?;
            cfg.save(&out_dir.join("config.json"))?;
            let mut trace = String::from(
                "step,total,supervised,ensemble,index,recon,balance,mse,alpha,index_weight\n",
            );
            for (i, s) in steps.iter().enumerate() {
                trace.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4}\n",
                    i, s.total, s.supervised, s.ensemble, s.index, s.recon, s.balance, s.mse,
                    s.alpha, s.index_weight
                ));
            }
            fs::write(out_dir.join("trace.csv"), trace)?;
            println!("trained {} steps; artifacts in {}", steps.len(), out_dir.display());
            Ok(())
        }
        Cmd::BuildIndex {
            config,
            seed,
            snapshot,
            world,
            out,
        } => {
            let _cfg = load_config(&config, seed)?;
            let snapshot = load_snapshot(&snapshot)?;
            let world = load_world(&world)?;
            let inverted = build_inverted_index(&snapshot, &world.items)?;
            fs::write(&out, serde_json::to_string(&inverted)?)?;
            println!(
                "indexed {} items across {} levels into {}",
                inverted.num_items(),
                inverted.levels.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::Retrieve {
            config,
            seed,
            snapshot,
            inverted,
            world,
            users,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let snapshot = load_snapshot(&snapshot)?;
            let inverted: InvertedIndex = serde_json::from_str(&fs::read_to_string(&inverted)?)?;
            let world = load_world(&world)?;
            let budget = RetrievalBudget {
                beams: cfg.pipeline.beams.clone(),
                top_k: cfg.pipeline.recall_k,
                max_items_scored: cfg.pipeline.max_items_scored,
            };
            let mut lines = String::new();
            for tok in users.split(',').filter(|t| !t.trim().is_empty()) {
                let uid: u64 = tok.trim().parse().context("parsing user id")?;
                let user = world
                    .find_user(uid)
                    .with_context(|| format!("unknown user {uid}"))?;
                let ub = FeatureBundle::from_user_record(user);
                let iq = FeatureBundle::interaction_from_user_record(user);
                let mut counter = CostCounter::new(snapshot.model.num_layers());
                let results = retrieve_layerwise(
                    &snapshot,
                    &inverted,
                    &ub,
                    &iq,
                    &budget,
                    cfg.pipeline.rank_task,
                    &mut counter,
                )?;
                for (rank, item) in results.iter().enumerate() {
                    lines.push_str(&serde_json::to_string(&serde_json::json!({
                        "user_id": uid,
                        "rank": rank + 1,
                        "item_id": item.item_id,
                        "score": item.score,
                    }))?);
                    lines.push('\n');
                }
            }
            match out {
                Some(p) => fs::write(p, lines)?,
                None => print!("{lines}"),
            }
            Ok(())
        }
        Cmd::Evaluate {
            config,
            seed,
            report,
        } => {
            let cfg = load_config(&config, seed)?;
            let out = eval::run_experiment(&cfg)?;
            let rendered = serde_json::to_string_pretty(&out.report)?;
            match report {
                Some(p) => {
                    fs::write(&p, &rendered)?;
                    println!("report_hash {}", out.report.report_hash());
                }
                None => {
                    println!("{rendered}");
                    println!("report_hash {}", out.report.report_hash());
                }
            }
            Ok(())
        }
        Cmd::Ablate {
            config,
            seed,
            seeds,
            toggles,
            out,
        } => {
            let cfg = load_config(&config, seed)?;
            let seeds: Vec<u64> = match seeds {
                Some(s) => s
                    .split(',')
                    .filter(|t| !t.trim().is_empty())
                    .map(|t| t.trim().parse().context("parsing seed"))
                    .collect::<anyhow::Result<_>>()?,
                None => vec![cfg.seed],
            };
            let toggles: Vec<AblationToggle> = toggles
                .split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| match t.trim() {
                    "scheduler_off" => Ok(AblationToggle::SchedulerOff),
                    "warmup_off" => Ok(AblationToggle::WarmupOff),
                    "balance_off" => Ok(AblationToggle::BalanceOff),
                    other => bail!("unknown toggle '{other}'"),
                })
                .collect::<anyhow::Result<_>>()?;
            let rows = eval::run_ablation_grid(&cfg, &toggles, &seeds)?;
            let mut f = fs::File::create(&out)?;
            f.write_all(eval::grid_to_csv(&rows).as_bytes())?;
            println!("wrote {} grid rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
