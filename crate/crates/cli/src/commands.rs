use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use prunetrack_core::artifact::{sha256_hex, Envelope, Provenance};
use prunetrack_core::par::Execution;
use prunetrack_core::plan::{gate_hash, BudgetSpec, PlanMode, PruningPlan};
use prunetrack_core::surgery::rewrite;
use prunetrack_core::train::TrainHistory;
use prunetrack_core::zoo::ModelGraph;

use crate::config::{ModelSection, PipelineConfig};
use crate::pipeline::{self, Sweep};
use crate::report;
use crate::CliError;

const CSV_HELP: &str = "\
Output files (CSV columns, in order; lines starting with # are comments):
  train_history.csv, finetune_history.csv  epoch,task_loss,penalty,sparsity_fraction
  surgery.csv            gate,granularity,kept,removed
  metrics.csv            ao,sr50,sr75,precision20,frames
  curves.csv             curve,threshold,value
  cost.csv               layer,kind,params,flops
  sweep.csv              budget,ao,sr50,sr75,flops,conv_flops,params,param_mib
  active_dims.csv        budget,gate,granularity,kept,total,active_fraction
  attention_modules.csv  budget,module,layer,heads_kept,heads_total,active

Exit codes: 0 success, 1 runtime failure, 2 configuration error.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "prunetrack", version, about = "Train, prune, fine-tune and evaluate toy siamese trackers", after_help = CSV_HELP)]
pub struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file or the input artifact.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: `out` from the config, else ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Summary printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sparsity training from scratch; writes model.json and train_history.csv.
    Train,
    /// Computes a pruning plan for a trained model; writes plan.json.
    Plan {
        /// Model artifact (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Fraction of gate entries to keep, in (0, 1].
        #[arg(long)]
        budget: f64,
        /// global, layerwise, blockwise or decoupled (default from config, else layerwise).
        #[arg(long, value_parser = parse_mode)]
        mode: Option<PlanMode>,
        /// Minimum entries kept per gate.
        #[arg(long)]
        floor: Option<usize>,
    },
    /// Applies a plan; writes pruned.json and surgery.csv.
    Prune {
        /// Model artifact (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Plan artifact (JSON) computed for this model.
        #[arg(long)]
        plan: PathBuf,
    },
    /// Recovery training without the sparsity penalty; writes finetuned.json.
    Finetune {
        /// Model artifact (JSON).
        #[arg(long)]
        model: PathBuf,
    },
    /// Runs the tracking benchmark; writes metrics.csv and curves.csv.
    Eval {
        /// Model artifact (JSON).
        #[arg(long)]
        model: PathBuf,
    },
    /// Parameter and FLOP counts; writes cost.csv.
    Cost {
        /// Model artifact (JSON).
        #[arg(long)]
        model: PathBuf,
    },
    /// Full pipeline for every budget of the config; writes the sweep reports.
    Sweep,
}

fn parse_mode(s: &str) -> Result<PlanMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown mode `{s}` (expected global, layerwise, blockwise or decoupled)")
    })
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Ctx {
    out: PathBuf,
    format: Format,
    lines: Vec<String>,
}

impl Ctx {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<String, CliError> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let hash = sha256_hex(bytes);
        if self.format == Format::Text {
            self.lines
                .push(format!("wrote {} ({})", path.display(), &hash[..12]));
        }
        Ok(hash)
    }

    fn save<T: prunetrack_core::artifact::Payload>(
        &mut self,
        name: &str,
        payload: T,
        seed: u64,
        parent: Option<String>,
    ) -> Result<String, CliError> {
        let env = Envelope::new(payload, Provenance { seed, parent });
        self.write(name, &env.to_bytes())
    }

    fn say(&mut self, text: String) {
        if self.format == Format::Text {
            self.lines.push(text);
        }
    }

    fn emit_csv(&mut self, csv: &str) {
        if self.format == Format::Csv {
            self.lines.push(csv.trim_end().to_string());
        }
    }
}

fn load<T: prunetrack_core::artifact::Payload>(
    path: &Path,
) -> Result<(Envelope<T>, String), CliError> {
    Envelope::<T>::load(path).map_err(runtime)
}

fn history_csv(h: &TrainHistory, seed: u64, parent: &str) -> String {
    format!("{}{}", report::provenance_line(seed, parent), h.to_csv())
}

/// Config for commands where it is optional: the file when given, else
/// defaults for the model's architecture.
fn config_or_default(path: Option<&Path>, model: &ModelGraph) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig {
            model: ModelSection {
                arch: model.arch.name().to_string(),
                ..ModelSection::default()
            },
            ..PipelineConfig::default()
        }),
    }
}

fn required_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&PipelineConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

/// Runs one subcommand and returns what it prints on stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let exec = Execution::Parallel;
    let mut ctx = Ctx {
        out: PathBuf::new(),
        format: cli.format,
        lines: Vec::new(),
    };
    match &cli.command {
        Command::Train => {
            let cfg = required_config(cli)?;
            ctx.out = out_dir(cli, Some(&cfg));
            let (model, history) = pipeline::stage1(&cfg)?;
            let config_hash = ctx.write("config.toml", cfg.to_toml().as_bytes())?;
            let hash = ctx.save("model.json", model, cfg.seed, Some(config_hash))?;
            let csv = history_csv(&history, cfg.seed, &hash);
            ctx.write("train_history.csv", csv.as_bytes())?;
            if let Some(last) = history.epochs.last() {
                ctx.say(format!(
                    "epoch {}: task loss {:.4}, near-zero gates {:.1}%",
                    last.epoch,
                    last.task_loss,
                    100.0 * last.sparsity_fraction
                ));
            }
            ctx.emit_csv(&csv);
        }
        Command::Plan {
            model,
            budget,
            mode,
            floor,
        } => {
            let (env, hash) = load::<ModelGraph>(model)?;
            let cfg = cli
                .config
                .as_deref()
                .map(PipelineConfig::load)
                .transpose()?;
            ctx.out = out_dir(cli, cfg.as_ref());
            let prune = cfg.map(|c| c.prune).unwrap_or_default();
            let spec = BudgetSpec {
                mode: mode.unwrap_or(prune.mode),
                fraction: *budget,
                floor: floor.unwrap_or(prune.floor),
                encoder_fraction: prune.encoder_scale.map(|s| (s * budget).min(1.0)),
                decoder_fraction: prune.decoder_scale.map(|s| (s * budget).min(1.0)),
            };
            spec.validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            let plan = prunetrack_core::plan::plan(&env.payload.gates, &spec).map_err(runtime)?;
            let seed = cli.seed.unwrap_or(env.provenance.seed);
            ctx.say(format!(
                "keeps {} of {} gate entries ({:?}, b={budget})",
                plan.total_kept(),
                plan.total(),
                spec.mode
            ));
            ctx.save("plan.json", plan, seed, Some(hash))?;
        }
        Command::Prune { model, plan } => {
            let (menv, _) = load::<ModelGraph>(model)?;
            let (penv, phash) = load::<PruningPlan>(plan)?;
            let current = gate_hash(&menv.payload.gates);
            if penv.payload.gate_hash != current {
                return Err(runtime(format!(
                    "plan {} was computed for gate snapshot {} but {} has {}; re-run `plan` on this model",
                    plan.display(),
                    &penv.payload.gate_hash[..12],
                    model.display(),
                    &current[..12]
                )));
            }
            ctx.out = out_dir(cli, None);
            let seed = cli.seed.unwrap_or(menv.provenance.seed);
            let (pruned, rep) = rewrite(&menv.payload, &penv.payload).map_err(runtime)?;
            ctx.say(format!(
                "params {} -> {}, equivalence residual {:e}",
                rep.params_before, rep.params_after, rep.residual
            ));
            if !rep.removed_modules.is_empty() {
                ctx.say(format!(
                    "removed attention modules: {}",
                    rep.removed_modules.join(", ")
                ));
            }
            let hash = ctx.save("pruned.json", pruned, seed, Some(phash))?;
            let csv = format!("{}{}", report::provenance_line(seed, &hash), rep.to_csv());
            ctx.write("surgery.csv", csv.as_bytes())?;
            ctx.emit_csv(&csv);
        }
        Command::Finetune { model } => {
            let (env, hash) = load::<ModelGraph>(model)?;
            let mut cfg = config_or_default(cli.config.as_deref(), &env.payload)?;
            cfg.seed = cli.seed.unwrap_or(env.provenance.seed);
            ctx.out = out_dir(cli, cli.config.as_ref().map(|_| &cfg));
            let (tuned, history) = pipeline::recover(&cfg, &env.payload)?;
            let out_hash = ctx.save("finetuned.json", tuned, cfg.seed, Some(hash))?;
            let csv = history_csv(&history, cfg.seed, &out_hash);
            ctx.write("finetune_history.csv", csv.as_bytes())?;
            ctx.emit_csv(&csv);
        }
        Command::Eval { model } => {
            let (env, hash) = load::<ModelGraph>(model)?;
            let cfg = config_or_default(cli.config.as_deref(), &env.payload)?;
            ctx.out = out_dir(cli, cli.config.as_ref().map(|_| &cfg));
            let seed = cli.seed.unwrap_or(env.provenance.seed);
            let seqs = pipeline::benchmark(&cfg)?;
            let m = pipeline::score(&env.payload, &seqs, exec)?;
            ctx.say(format!(
                "AO {:.4}  SR@0.5 {:.4}  SR@0.75 {:.4}  ({} frames)",
                m.ao, m.sr50, m.sr75, m.frames
            ));
            let csv = report::metrics_csv(&m, seed, &hash);
            ctx.write("metrics.csv", csv.as_bytes())?;
            ctx.write("curves.csv", report::curves_csv(&m, seed, &hash).as_bytes())?;
            ctx.emit_csv(&csv);
        }
        Command::Cost { model } => {
            let (env, hash) = load::<ModelGraph>(model)?;
            ctx.out = out_dir(cli, None);
            let seed = cli.seed.unwrap_or(env.provenance.seed);
            let c = pipeline::model_cost(&env.payload)?;
            ctx.say(format!(
                "{} params ({:.3} MiB), {} FLOPs per search forward",
                c.params,
                c.param_mib(),
                c.flops
            ));
            let csv = format!("{}{}", report::provenance_line(seed, &hash), c.to_csv());
            ctx.write("cost.csv", csv.as_bytes())?;
            ctx.emit_csv(&csv);
        }
        Command::Sweep => {
            let cfg = required_config(cli)?;
            ctx.out = out_dir(cli, Some(&cfg));
            let s = pipeline::sweep(&cfg, exec)?;
            write_sweep(&mut ctx, &cfg, s)?;
        }
    }
    Ok(ctx.lines.join("\n"))
}

fn write_sweep(ctx: &mut Ctx, cfg: &PipelineConfig, s: Sweep) -> Result<(), CliError> {
    let seed = cfg.seed;
    let config_hash = ctx.write("config.toml", cfg.to_toml().as_bytes())?;
    let base_hash = ctx.save("model.json", s.base.clone(), seed, Some(config_hash))?;
    ctx.write(
        "train_history.csv",
        history_csv(&s.history, seed, &base_hash).as_bytes(),
    )?;
    for r in &s.runs {
        let dir = format!("b{}", r.budget);
        let plan_hash = ctx.save(
            &format!("{dir}/plan.json"),
            r.pruned.plan.clone(),
            seed,
            Some(base_hash.clone()),
        )?;
        let pruned_hash = ctx.save(
            &format!("{dir}/pruned.json"),
            r.pruned.model.clone(),
            seed,
            Some(plan_hash),
        )?;
        let surgery = format!(
            "{}{}",
            report::provenance_line(seed, &pruned_hash),
            r.pruned.report.to_csv()
        );
        ctx.write(&format!("{dir}/surgery.csv"), surgery.as_bytes())?;
        let tuned_hash = ctx.save(
            &format!("{dir}/finetuned.json"),
            r.finetuned.clone(),
            seed,
            Some(pruned_hash),
        )?;
        ctx.write(
            &format!("{dir}/finetune_history.csv"),
            history_csv(&r.history, seed, &tuned_hash).as_bytes(),
        )?;
        ctx.write(
            &format!("{dir}/metrics.csv"),
            report::metrics_csv(&r.metrics, seed, &tuned_hash).as_bytes(),
        )?;
    }
    let table = report::sweep_csv(&s, seed, &base_hash);
    ctx.write("sweep.csv", table.as_bytes())?;
    ctx.write(
        "active_dims.csv",
        report::active_dims_csv(&s, seed, &base_hash).as_bytes(),
    )?;
    if s.base.arch.is_transformer() {
        ctx.write(
            "attention_modules.csv",
            report::attention_csv(&s, seed, &base_hash).as_bytes(),
        )?;
    }
    ctx.say(format!(
        "baseline AO {:.4}, {} FLOPs, {} params",
        s.base_metrics.ao, s.base_cost.flops, s.base_cost.params
    ));
    for r in &s.runs {
        ctx.say(format!(
            "b={}: AO {:.4}, {} FLOPs, {} params",
            r.budget, r.metrics.ao, r.cost.flops, r.cost.params
        ));
    }
    ctx.emit_csv(&table);
    Ok(())
}
