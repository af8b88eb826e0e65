//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion ids (`A1` .. `A9`) as
//! arguments to run a subset.

#[path = "../../core/tests/support/fd.rs"]
mod fd;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use prunetrack_cli::config::{ModelSection, PipelineConfig, PruneSection, TrainSection};
use prunetrack_cli::{pipeline, report};
use prunetrack_core::artifact::Envelope;
use prunetrack_core::cost::{cost, count_params};
use prunetrack_core::par::Execution;
use prunetrack_core::plan::{plan, BudgetSpec, PlanMode, PruningPlan};
use prunetrack_core::surgery::{rewrite, zero_pruned};
use prunetrack_core::tensor::Tensor;
use prunetrack_core::zoo::{
    build, ArchConfig, Conv2d, CorrHead, GateVector, Granularity, Layer, Mode, ModelGraph, Node,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARCHS: [&str; 4] = ["mini_alex", "mini_resnet", "mini_vit", "mini_encdec"];

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    check(elapsed < limit, || {
        format!("took {elapsed:.1?}, limit {limit:?}")
    })
}

fn trained_like(arch: &ArchConfig, seed: u64) -> ModelGraph {
    let mut m = build(arch, seed, true).unwrap();
    m.perturb(seed.wrapping_mul(31) + 7, 0.3);
    m
}

fn config(arch: &str, seed: u64) -> PipelineConfig {
    PipelineConfig {
        seed,
        model: ModelSection {
            arch: arch.into(),
            ..ModelSection::default()
        },
        ..PipelineConfig::default()
    }
}

fn a1() -> Outcome {
    let start = Instant::now();
    let mut total = fd::GradCheck::default();
    for arch in ARCHS {
        let mut per_arch = fd::GradCheck::default();
        for seed in 0..10 {
            per_arch.merge(fd::check_model(arch, 100 + seed, Mode::Train, 3));
        }
        check(per_arch.worst < 1e-6, || {
            format!("{arch}: worst relative error {:e}", per_arch.worst)
        })?;
        total.merge(per_arch);
    }
    within(start.elapsed(), Duration::from_secs(120))?;
    Ok(format!(
        "{} coordinates, worst relative error {:.2e}, {} stencils refined at kinks",
        total.checked, total.worst, total.kinks
    ))
}

fn applicable_modes(arch: &str) -> Vec<PlanMode> {
    match arch {
        "mini_alex" => vec![PlanMode::Global, PlanMode::Layerwise],
        "mini_encdec" => vec![
            PlanMode::Global,
            PlanMode::Layerwise,
            PlanMode::Blockwise,
            PlanMode::Decoupled,
        ],
        _ => vec![PlanMode::Global, PlanMode::Layerwise, PlanMode::Blockwise],
    }
}

fn a2() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (k, arch) in ARCHS.iter().enumerate() {
        let model = trained_like(&ArchConfig::default_for(arch).unwrap(), k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let mut t_shape = model.template_shape();
        let mut s_shape = model.search_shape();
        t_shape[0] = 20;
        s_shape[0] = 20;
        let t = Tensor::randn(&t_shape, 0.5, &mut rng);
        let s = Tensor::randn(&s_shape, 0.5, &mut rng);
        for mode in applicable_modes(arch) {
            for b in [0.75, 0.5, 0.25, 0.1] {
                let p = plan(&model.gates, &BudgetSpec::new(mode, b))
                    .map_err(|e| format!("{arch} {mode:?} {b}: {e}"))?;
                let zeroed = zero_pruned(&model, &p).unwrap();
                let (pruned, _) =
                    rewrite(&model, &p).map_err(|e| format!("{arch} {mode:?} {b}: {e}"))?;
                let (rz, rp) = (
                    zeroed.siamese(&t, &s).unwrap(),
                    pruned.siamese(&t, &s).unwrap(),
                );
                let diff = rz
                    .data()
                    .iter()
                    .zip(rp.data())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                check(rz.shape() == rp.shape() && diff < 1e-9, || {
                    format!("{arch} {mode:?} b={b}: max abs difference {diff:e}")
                })?;
                worst = worst.max(diff);
                cases += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(300))?;
    Ok(format!(
        "{cases} arch/mode/budget cases, max abs difference {worst:.2e}"
    ))
}

fn random_gates(
    rng: &mut ChaCha8Rng,
    count: usize,
    max_len: usize,
    blocks: usize,
) -> BTreeMap<String, GateVector> {
    (0..count)
        .map(|i| {
            let len = rng.random_range(1..=max_len);
            let id = format!("g{i:02}");
            let g = GateVector {
                id: id.clone(),
                values: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                granularity: Granularity::Channel,
                layer: id.clone(),
                block: Some(format!("blk{}", rng.random_range(0..blocks))),
                scope: None,
            };
            (id, g)
        })
        .collect()
}

/// Best keep-set of the required size by exhaustive search, honouring the
/// per-gate floor.
fn brute_force(
    g: &BTreeMap<String, GateVector>,
    b: f64,
    floor: usize,
) -> BTreeMap<String, Vec<bool>> {
    let entries: Vec<(usize, f64)> = g
        .values()
        .enumerate()
        .flat_map(|(gi, g)| g.values.iter().map(move |&v| (gi, v.abs())))
        .collect();
    let lens: Vec<usize> = g.values().map(|g| g.len()).collect();
    let mandatory: usize = lens.iter().map(|&l| floor.min(l)).sum();
    let target = ((b * entries.len() as f64) - 1e-9)
        .ceil()
        .max(mandatory as f64) as u32;
    let mut best: Option<(f64, u32)> = None;
    for set in 0u32..(1 << entries.len()) {
        if set.count_ones() != target {
            continue;
        }
        let mut per = vec![0; lens.len()];
        let mut mass = 0.0;
        for (e, &(gi, v)) in entries.iter().enumerate() {
            if set >> e & 1 == 1 {
                per[gi] += 1;
                mass += v;
            }
        }
        if per.iter().zip(&lens).any(|(&k, &l)| k < floor.min(l)) {
            continue;
        }
        if best.is_none_or(|(m, _)| mass > m) {
            best = Some((mass, set));
        }
    }
    let set = best.unwrap().1;
    let mut out = BTreeMap::new();
    let mut e = 0;
    for g in g.values() {
        out.insert(
            g.id.clone(),
            (0..g.len()).map(|i| set >> (e + i) & 1 == 1).collect(),
        );
        e += g.len();
    }
    out
}

fn pooled_total_ok(gates: &[&GateVector], p: &PruningPlan, b: f64, floor: usize) -> bool {
    let n: usize = gates.iter().map(|g| g.len()).sum();
    let mandatory: usize = gates.iter().map(|g| floor.min(g.len())).sum();
    let kept: usize = gates.iter().map(|g| p.kept(&g.id).unwrap()).sum();
    let want = (((b * n as f64) - 1e-9).ceil() as usize).min(n);
    kept == want.max(mandatory)
}

fn a3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..500 {
        let count = rng.random_range(1..=8);
        let g = random_gates(&mut rng, count, 40, 3);
        let b = rng.random_range(0.005..=1.0);
        let floor = rng.random_range(1..=3);
        let spec = BudgetSpec {
            floor,
            ..BudgetSpec::new(PlanMode::Layerwise, b)
        };
        let p = plan(&g, &spec).unwrap();
        for gate in g.values() {
            let c = gate.len();
            let want = floor.max((b * c as f64 - 1e-9).ceil() as usize).min(c);
            check(p.kept(&gate.id) == Some(want), || {
                format!(
                    "layerwise case {case}: {} kept {:?}, want {want}",
                    gate.id,
                    p.kept(&gate.id)
                )
            })?;
        }
        let all: Vec<&GateVector> = g.values().collect();
        let global = plan(
            &g,
            &BudgetSpec {
                floor,
                ..BudgetSpec::new(PlanMode::Global, b)
            },
        )
        .unwrap();
        check(pooled_total_ok(&all, &global, b, floor), || {
            format!("global total, case {case}")
        })?;
        let blockwise = plan(
            &g,
            &BudgetSpec {
                floor,
                ..BudgetSpec::new(PlanMode::Blockwise, b)
            },
        )
        .unwrap();
        let mut blocks: BTreeMap<&str, Vec<&GateVector>> = BTreeMap::new();
        for gate in g.values() {
            blocks
                .entry(gate.block.as_deref().unwrap())
                .or_default()
                .push(gate);
        }
        for (name, members) in &blocks {
            check(pooled_total_ok(members, &blockwise, b, floor), || {
                format!("block {name}, case {case}")
            })?;
        }
    }
    let mut brute = 0;
    while brute < 200 {
        let count = rng.random_range(1..=4);
        let g = random_gates(&mut rng, count, 5, 1);
        if g.values().map(|g| g.len()).sum::<usize>() > 12 {
            continue;
        }
        let b = rng.random_range(0.01..=1.0);
        let floor = rng.random_range(1..=2);
        let p = plan(
            &g,
            &BudgetSpec {
                floor,
                ..BudgetSpec::new(PlanMode::Global, b)
            },
        )
        .unwrap();
        check(p.masks == brute_force(&g, b, floor), || {
            format!("brute-force mismatch at b={b}")
        })?;
        brute += 1;
    }
    within(start.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "500 layerwise/global/blockwise instances, {brute} brute-force agreements"
    ))
}

fn random_arch(rng: &mut ChaCha8Rng) -> ArchConfig {
    match rng.random_range(0..4) {
        0 => ArchConfig::MiniAlex {
            widths: (0..5).map(|_| rng.random_range(1..12)).collect(),
        },
        1 => {
            let stages = rng.random_range(1..=3);
            ArchConfig::MiniResnet {
                stages,
                blocks: rng.random_range(1..=2),
                trunk_widths: (0..stages).map(|_| 4 * rng.random_range(1..4)).collect(),
            }
        }
        2 => {
            let heads = rng.random_range(1..=4);
            ArchConfig::MiniVit {
                layers: rng.random_range(1..=3),
                dim: heads * rng.random_range(1..=4),
                heads,
                mlp_ratio: rng.random_range(1..=3),
                patch: [8, 16][rng.random_range(0..2)],
            }
        }
        _ => {
            let heads = rng.random_range(1..=3);
            ArchConfig::MiniEncdec {
                stacks: rng.random_range(1..=2),
                dim: heads * rng.random_range(1..=4),
                heads,
                ffn_dim: rng.random_range(1..=24),
            }
        }
    }
}

fn a4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..100 {
        let arch = random_arch(&mut rng);
        let model = build(&arch, case, rng.random_bool(0.5)).unwrap();
        let mut enumerated = 0u64;
        model.visit_params(|_, _, d| enumerated += d.len() as u64);
        let counted = count_params(&model);
        check(counted == enumerated, || {
            format!("{arch:?}: counted {counted}, enumerated {enumerated}")
        })?;
    }
    let conv = Layer::Conv2d(Conv2d {
        weight: Tensor::zeros(&[2, 3, 3, 3]),
        bias: None,
        stride: 1,
        padding: 0,
    });
    let g = ModelGraph {
        arch: ArchConfig::MiniAlex { widths: vec![1; 5] },
        template_size: 6,
        search_size: 6,
        output: 1,
        nodes: vec![
            Node {
                id: "input".into(),
                inputs: vec![],
                layer: Layer::Input,
            },
            Node {
                id: "conv".into(),
                inputs: vec![0],
                layer: conv,
            },
        ],
        gates: BTreeMap::new(),
        head: CorrHead {
            scale: Tensor::scalar(1.0),
            bias: Tensor::scalar(0.0),
            norm: 1.0,
        },
    };
    let flops = cost(&g, &[1, 3, 6, 6]).unwrap().conv_flops();
    check(flops == 1728, || format!("conv example gave {flops} FLOPs"))?;
    Ok("100 random graphs enumerate exactly; conv example 1728 FLOPs".into())
}

fn a5() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let sparse = config("mini_alex", seed);
        let dense = PipelineConfig {
            train: TrainSection {
                lambda: Some(0.0),
                ..TrainSection::default()
            },
            ..sparse.clone()
        };
        let frac = |cfg: &PipelineConfig| -> Result<f64, String> {
            let (_, h) = pipeline::stage1(cfg).map_err(|e| e.to_string())?;
            Ok(h.epochs.last().unwrap().sparsity_fraction)
        };
        let (with, without) = (frac(&sparse)?, frac(&dense)?);
        if with > 0.0 && with >= 2.0 * without {
            wins += 1;
        }
        notes.push(format!("{with:.3}/{without:.3}"));
    }
    within(start.elapsed(), Duration::from_secs(900))?;
    let detail = format!(
        "near-zero fraction with/without penalty per seed: {}",
        notes.join(" ")
    );
    check(wins >= 4, || format!("{wins}/5 seeds; {detail}"))?;
    Ok(format!("{wins}/5 seeds; {detail}"))
}

fn a6() -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let cfg = PipelineConfig {
            prune: PruneSection {
                budgets: vec![0.5],
                ..PruneSection::default()
            },
            ..config("mini_alex", seed)
        };
        let s = pipeline::sweep(&cfg, Execution::Parallel).map_err(|e| e.to_string())?;
        let r = &s.runs[0];
        let conv = 1.0 - r.cost.conv_flops() as f64 / s.base_cost.conv_flops() as f64;
        let params = 1.0 - r.cost.params as f64 / s.base_cost.params as f64;
        let drop = 1.0 - r.metrics.ao / s.base_metrics.ao;
        check(conv >= 0.55 && params >= 0.55, || {
            format!(
                "seed {seed}: conv FLOPs -{:.1}%, params -{:.1}%",
                100.0 * conv,
                100.0 * params
            )
        })?;
        if drop <= 0.10 {
            wins += 1;
        }
        notes.push(format!(
            "seed {seed}: conv FLOPs -{:.1}% params -{:.1}% AO {:.3}->{:.3}",
            100.0 * conv,
            100.0 * params,
            s.base_metrics.ao,
            r.metrics.ao
        ));
    }
    let detail = notes.join("; ");
    check(wins >= 4, || format!("AO held in {wins}/5 seeds; {detail}"))?;
    Ok(format!("AO held in {wins}/5 seeds; {detail}"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_prunetrack"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn a7() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = dir.path().join("vit.toml");
    fs::write(&cfg, "seed = 3\n[model]\narch = \"mini_vit\"\n[prune]\nmode = \"layerwise\"\nbudgets = [0.01]\nfloor = 1\n")
        .unwrap();
    let out = dir.path().join("out");
    run_cli(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "sweep",
    ])?;
    let (env, _) = Envelope::<ModelGraph>::load(&out.join("b0.01/finetuned.json"))
        .map_err(|e| e.to_string())?;
    let model = env.payload;
    model.validate().map_err(|e| e.to_string())?;
    check(model.gates.values().all(|g| !g.is_empty()), || {
        "a gate lost every entry".into()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = Tensor::randn(&model.template_shape(), 0.5, &mut rng);
    let s = Tensor::randn(&model.search_shape(), 0.5, &mut rng);
    let r = model.siamese(&t, &s).map_err(|e| e.to_string())?;
    check(r.data().iter().all(|v| v.is_finite()), || {
        "non-finite response".into()
    })?;
    let table = fs::read_to_string(out.join("attention_modules.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    let active = rows.iter().filter(|r| r.ends_with(",1")).count();
    check(!rows.is_empty(), || "empty attention report".into())?;
    Ok(format!(
        "pruned graph runs; {active}/{} attention modules active",
        rows.len()
    ))
}

fn a8() -> Outcome {
    let mut notes = Vec::new();
    for (k, arch) in ARCHS.iter().enumerate() {
        let model = trained_like(&ArchConfig::default_for(arch).unwrap(), 50 + k as u64);
        let mut last: Option<(u64, u64)> = None;
        let mut flops = Vec::new();
        for b in [1.0, 0.75, 0.5, 0.25, 0.1] {
            let p = plan(&model.gates, &BudgetSpec::new(PlanMode::Layerwise, b)).unwrap();
            let (pruned, _) = rewrite(&model, &p).map_err(|e| format!("{arch} b={b}: {e}"))?;
            let c = cost(&pruned, &pruned.search_shape()).unwrap();
            if let Some((f, p)) = last {
                check(c.flops < f && c.params < p, || {
                    format!(
                        "{arch} b={b}: flops {f}->{}, params {p}->{}",
                        c.flops, c.params
                    )
                })?;
            }
            last = Some((c.flops, c.params));
            flops.push(c.flops);
        }
        notes.push(format!("{arch} {flops:?}"));
    }
    Ok(notes.join("; "))
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn a9() -> Outcome {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg_path = dir.path().join("encdec.toml");
    let text = "seed = 8\n[model]\narch = \"mini_encdec\"\nstacks = 1\ndim = 16\nheads = 2\nffn_dim = 32\n\
                [train]\nepochs = 1\nsteps_per_epoch = 3\n[finetune]\nepochs = 1\nsteps_per_epoch = 2\n\
                [benchmark]\nsequences = 3\nlength = 6\n[prune]\nmode = \"global\"\nbudgets = [0.5, 0.25]\n";
    fs::write(&cfg_path, text).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_cli(&[
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "sweep",
        ])?;
    }
    let listing = files(&a);
    check(listing == files(&b), || {
        "runs wrote different file sets".into()
    })?;
    let mut round_trips = 0;
    for f in &listing {
        let bytes = fs::read(a.join(f)).unwrap();
        check(bytes == fs::read(b.join(f)).unwrap(), || {
            format!("{} differs between runs", f.display())
        })?;
        let name = f.file_name().unwrap().to_str().unwrap();
        let path = a.join(f);
        let again = match name {
            "plan.json" => Some(
                Envelope::<PruningPlan>::load(&path)
                    .map_err(|e| e.to_string())?
                    .0
                    .to_bytes(),
            ),
            n if n.ends_with(".json") => Some(
                Envelope::<ModelGraph>::load(&path)
                    .map_err(|e| e.to_string())?
                    .0
                    .to_bytes(),
            ),
            "config.toml" => Some(
                PipelineConfig::from_toml(std::str::from_utf8(&bytes).unwrap())
                    .map_err(|e| e.to_string())?
                    .to_toml()
                    .into_bytes(),
            ),
            _ => None,
        };
        if let Some(again) = again {
            check(again == bytes, || {
                format!("{} changed on save(load(x))", f.display())
            })?;
            round_trips += 1;
        }
    }
    let cfg = PipelineConfig::load(&cfg_path).map_err(|e| e.to_string())?;
    let table = |exec| -> Result<String, String> {
        let s = pipeline::sweep(&cfg, exec).map_err(|e| e.to_string())?;
        Ok(report::sweep_csv(&s, cfg.seed, "x"))
    };
    check(
        table(Execution::Sequential)? == table(Execution::Parallel)?,
        || "sequential and parallel sweeps differ".into(),
    )?;
    Ok(format!(
        "{} files identical across runs, {round_trips} round-trips exact, sequential == parallel",
        listing.len()
    ))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("A1", a1),
        ("A2", a2),
        ("A3", a3),
        ("A4", a4),
        ("A5", a5),
        ("A6", a6),
        ("A7", a7),
        ("A8", a8),
        ("A9", a9),
    ];
    let wanted: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with('A'))
        .collect();
    let mut failed = 0;
    for (id, f) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("{id} FAIL ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
