//! In-memory pipeline stages shared by the subcommands and the sweep.

use prunetrack_core::cost::{cost, CostReport};
use prunetrack_core::par::Execution;
use prunetrack_core::plan::{plan, BudgetSpec, PruningPlan};
use prunetrack_core::surgery::{rewrite, SurgeryReport};
use prunetrack_core::tracking::{evaluate, SyntheticSequence, TrackingMetrics};
use prunetrack_core::train::{finetune, train, TrainHistory};
use prunetrack_core::zoo::{build, ModelGraph};

use crate::config::PipelineConfig;
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Builds the gated model from the master seed and runs sparsity training.
pub fn stage1(cfg: &PipelineConfig) -> Result<(ModelGraph, TrainHistory), CliError> {
    let arch = cfg.arch()?;
    let mut model = build(&arch, cfg.seed, true).map_err(runtime)?;
    let history = train(&mut model, &cfg.pair_source()?, &cfg.train_config()?).map_err(runtime)?;
    Ok((model, history))
}

pub struct Pruned {
    pub plan: PruningPlan,
    pub model: ModelGraph,
    pub report: SurgeryReport,
}

pub fn prune(model: &ModelGraph, spec: &BudgetSpec) -> Result<Pruned, CliError> {
    let plan = plan(&model.gates, spec).map_err(runtime)?;
    let (pruned, report) = rewrite(model, &plan).map_err(runtime)?;
    Ok(Pruned {
        plan,
        model: pruned,
        report,
    })
}

pub fn recover(
    cfg: &PipelineConfig,
    model: &ModelGraph,
) -> Result<(ModelGraph, TrainHistory), CliError> {
    let mut model = model.clone();
    let history =
        finetune(&mut model, &cfg.pair_source()?, &cfg.finetune_config()?).map_err(runtime)?;
    Ok((model, history))
}

pub fn benchmark(cfg: &PipelineConfig) -> Result<Vec<SyntheticSequence>, CliError> {
    cfg.benchmark()?.generate().map_err(runtime)
}

pub fn score(
    model: &ModelGraph,
    sequences: &[SyntheticSequence],
    exec: Execution,
) -> Result<TrackingMetrics, CliError> {
    evaluate(model, sequences, exec).map_err(runtime)
}

/// Cost of one search-region forward.
pub fn model_cost(model: &ModelGraph) -> Result<CostReport, CliError> {
    cost(model, &model.search_shape()).map_err(runtime)
}

/// Everything produced for one budget of a sweep.
pub struct BudgetRun {
    pub budget: f64,
    pub pruned: Pruned,
    pub finetuned: ModelGraph,
    pub history: TrainHistory,
    pub metrics: TrackingMetrics,
    pub cost: CostReport,
}

pub struct Sweep {
    pub base: ModelGraph,
    pub history: TrainHistory,
    pub base_metrics: TrackingMetrics,
    pub base_cost: CostReport,
    pub runs: Vec<BudgetRun>,
}

/// Stage 1 once, then prune, fine-tune and evaluate every budget
/// independently from the shared stage-1 model.
pub fn sweep(cfg: &PipelineConfig, exec: Execution) -> Result<Sweep, CliError> {
    if cfg.prune.budgets.is_empty() {
        return Err(CliError::Config("prune.budgets is empty".into()));
    }
    let specs: Vec<BudgetSpec> = cfg
        .prune
        .budgets
        .iter()
        .map(|&b| cfg.budget_spec(b))
        .collect::<Result<_, _>>()?;
    let (base, history) = stage1(cfg)?;
    let sequences = benchmark(cfg)?;
    let base_metrics = score(&base, &sequences, exec)?;
    let base_cost = model_cost(&base)?;
    let runs = exec.map(&specs, |spec| -> Result<BudgetRun, CliError> {
        let fail = |e: CliError| e.in_budget(spec.fraction);
        let pruned = prune(&base, spec).map_err(fail)?;
        let (finetuned, history) = recover(cfg, &pruned.model).map_err(fail)?;
        let metrics = score(&finetuned, &sequences, exec).map_err(fail)?;
        let cost = model_cost(&finetuned).map_err(fail)?;
        Ok(BudgetRun {
            budget: spec.fraction,
            pruned,
            finetuned,
            history,
            metrics,
            cost,
        })
    });
    Ok(Sweep {
        base,
        history,
        base_metrics,
        base_cost,
        runs: runs.into_iter().collect::<Result<_, _>>()?,
    })
}
