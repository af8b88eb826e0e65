use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prunetrack_cli::config::PipelineConfig;
use prunetrack_core::artifact::Envelope;
use prunetrack_core::zoo::ModelGraph;
use tempfile::TempDir;

const FAST: &str = r#"
[train]
epochs = 1
steps_per_epoch = 2
batch_size = 2

[finetune]
epochs = 1
steps_per_epoch = 2
batch_size = 2

[benchmark]
sequences = 2
length = 5
"#;

fn toy_model(arch: &str) -> &'static str {
    match arch {
        "mini_alex" => "widths = [4, 6, 8, 8, 6]",
        "mini_resnet" => "stages = 2\nblocks = 1\ntrunk_widths = [8, 16]",
        "mini_vit" => "layers = 2\ndim = 16\nheads = 2\nmlp_ratio = 2\npatch = 8",
        "mini_encdec" => "stacks = 1\ndim = 16\nheads = 2\nffn_dim = 32",
        _ => unreachable!(),
    }
}

fn config(dir: &Path, arch: &str, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 5\n{extra}\n[model]\narch = \"{arch}\"\n{}\n{FAST}",
        toy_model(arch)
    );
    let path = dir.join(format!("{arch}.toml"));
    fs::write(&path, text).unwrap();
    path
}

fn prunetrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunetrack"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = prunetrack(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn train_writes_reloadable_artifacts() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let out = dir.path().join("out");
    ok(&["--config", s(&cfg), "--out", s(&out), "train"]);
    let bytes = fs::read(out.join("model.json")).unwrap();
    let (env, _) = Envelope::<ModelGraph>::load(&out.join("model.json")).unwrap();
    assert_eq!(env.to_bytes(), bytes);
    assert_eq!(env.provenance.seed, 5);
    let config_bytes = fs::read(out.join("config.toml")).unwrap();
    assert_eq!(
        env.provenance.parent,
        Some(prunetrack_core::artifact::sha256_hex(&config_bytes))
    );
    let history = fs::read_to_string(out.join("train_history.csv")).unwrap();
    assert!(history.contains("epoch,task_loss,penalty,sparsity_fraction"));
    assert_eq!(data_rows(&history).len(), 1);

    let dumped = fs::read_to_string(out.join("config.toml")).unwrap();
    let reparsed = PipelineConfig::from_toml(&dumped).unwrap();
    assert_eq!(reparsed.to_toml(), dumped);
}

#[test]
fn missing_arch_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "seed = 1\n[model]\nwidths = [4, 4, 4, 4, 4]\n").unwrap();
    let out = prunetrack(&["--config", s(&cfg), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("arch"));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let cases = [
        ("unknown_arch", "[model]\narch = \"mini_lenet\"\n"),
        (
            "foreign_field",
            "[model]\narch = \"mini_alex\"\nheads = 2\n",
        ),
        (
            "unknown_key",
            "[model]\narch = \"mini_alex\"\n[train]\nepoch = 3\n",
        ),
        (
            "rising_budgets",
            "[model]\narch = \"mini_alex\"\n[prune]\nbudgets = [0.25, 0.5]\n",
        ),
        (
            "zero_budget",
            "[model]\narch = \"mini_alex\"\n[prune]\nbudgets = [0.0]\n",
        ),
        (
            "scale_outside_decoupled",
            "[model]\narch = \"mini_alex\"\n[prune]\nencoder_scale = 0.5\n",
        ),
        (
            "negative_lambda",
            "[model]\narch = \"mini_alex\"\n[train]\nlambda = -1.0\n",
        ),
    ];
    for (name, text) in cases {
        let cfg = dir.path().join(format!("{name}.toml"));
        fs::write(&cfg, text).unwrap();
        let out = prunetrack(&[
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join(name)),
            "train",
        ]);
        assert_eq!(out.status.code(), Some(2), "{name}");
    }
    let out = prunetrack(&["train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_budget_list_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let text = fs::read_to_string(&cfg).unwrap() + "\n[prune]\nbudgets = []\n";
    fs::write(&cfg, text).unwrap();
    let out = prunetrack(&[
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "sweep",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budgets"));
}

#[test]
fn identical_runs_give_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_vit", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", s(&cfg), "--out", s(&a), "train"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "train"]);
    for f in ["model.json", "train_history.csv", "config.toml"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let c = dir.path().join("c");
    ok(&["--config", s(&cfg), "--out", s(&c), "--seed", "6", "train"]);
    assert_ne!(
        fs::read(a.join("model.json")).unwrap(),
        fs::read(c.join("model.json")).unwrap()
    );
}

#[test]
fn full_budget_prune_is_exact_and_chain_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let out = dir.path().join("o");
    let o = s(&out);
    ok(&["--config", s(&cfg), "--out", o, "train"]);
    let model = out.join("model.json");
    ok(&["--out", o, "plan", "--model", s(&model), "--budget", "1.0"]);
    ok(&[
        "--out",
        o,
        "prune",
        "--model",
        s(&model),
        "--plan",
        s(&out.join("plan.json")),
    ]);
    let surgery = fs::read_to_string(out.join("surgery.csv")).unwrap();
    let residual: f64 = surgery
        .lines()
        .find_map(|l| l.split("residual=").nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!(residual < 1e-9, "{residual}");
    assert!(data_rows(&surgery).iter().all(|r| r[3] == "0"));

    ok(&[
        "--out",
        o,
        "plan",
        "--model",
        s(&model),
        "--budget",
        "0.5",
        "--mode",
        "global",
    ]);
    ok(&[
        "--out",
        o,
        "prune",
        "--model",
        s(&model),
        "--plan",
        s(&out.join("plan.json")),
    ]);
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        o,
        "finetune",
        "--model",
        s(&out.join("pruned.json")),
    ]);
    ok(&[
        "--config",
        s(&cfg),
        "--out",
        o,
        "eval",
        "--model",
        s(&out.join("finetuned.json")),
    ]);
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row = &data_rows(&metrics)[0];
    assert_eq!(row.len(), 5);
    for v in &row[..4] {
        let x: f64 = v.parse().unwrap();
        assert!(x.is_finite() && (0.0..=1.0).contains(&x), "{x}");
    }
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(data_rows(&curves).len(), 21 + 51);

    let printed = ok(&[
        "--out",
        o,
        "--format",
        "csv",
        "cost",
        "--model",
        s(&out.join("finetuned.json")),
    ]);
    assert!(printed.contains("layer,kind,params,flops"));
    assert_eq!(
        printed.trim(),
        fs::read_to_string(out.join("cost.csv")).unwrap().trim()
    );
}

#[test]
fn stale_plan_is_refused() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--config", s(&cfg), "--out", s(&a), "train"]);
    ok(&["--config", s(&cfg), "--out", s(&b), "--seed", "9", "train"]);
    ok(&[
        "--out",
        s(&a),
        "plan",
        "--model",
        s(&a.join("model.json")),
        "--budget",
        "0.5",
    ]);
    let out = prunetrack(&[
        "--out",
        s(&b),
        "prune",
        "--model",
        s(&b.join("model.json")),
        "--plan",
        s(&a.join("plan.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gate snapshot"));
    assert!(!b.join("pruned.json").exists());
    let (mut env, _) = Envelope::<ModelGraph>::load(&a.join("model.json")).unwrap();
    env.payload.gates.values_mut().next().unwrap().values[0] += 0.25;
    let edited = dir.path().join("edited.json");
    env.save(&edited).unwrap();
    let out = prunetrack(&[
        "--out",
        s(&a),
        "prune",
        "--model",
        s(&edited),
        "--plan",
        s(&a.join("plan.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!a.join("pruned.json").exists());
}

#[test]
fn plan_inherits_the_model_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "--out", s(&out), "train"]);
    ok(&[
        "--out",
        s(&out),
        "plan",
        "--model",
        s(&out.join("model.json")),
        "--budget",
        "0.5",
    ]);
    let (plan, _) =
        Envelope::<prunetrack_core::plan::PruningPlan>::load(&out.join("plan.json")).unwrap();
    let (_, model_hash) = Envelope::<ModelGraph>::load(&out.join("model.json")).unwrap();
    assert_eq!(plan.provenance.seed, 5);
    assert_eq!(plan.provenance.parent.as_deref(), Some(model_hash.as_str()));
}

#[test]
fn loading_a_plan_as_a_model_fails() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "--out", s(&out), "train"]);
    ok(&[
        "--out",
        s(&out),
        "plan",
        "--model",
        s(&out.join("model.json")),
        "--budget",
        "0.5",
    ]);
    let r = prunetrack(&[
        "--out",
        s(&out),
        "cost",
        "--model",
        s(&out.join("plan.json")),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn alex_sweep_rows_shrink() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_alex", "");
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "--out", s(&out), "sweep"]);
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows = data_rows(&table);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][0], "baseline");
    let flops: Vec<u64> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(flops.windows(2).all(|w| w[1] < w[0]), "{flops:?}");
    for b in ["b0.75", "b0.5", "b0.25"] {
        for f in [
            "plan.json",
            "pruned.json",
            "finetuned.json",
            "metrics.csv",
            "surgery.csv",
        ] {
            assert!(out.join(b).join(f).exists(), "{b}/{f}");
        }
    }
    assert!(!out.join("attention_modules.csv").exists());
    let active = fs::read_to_string(out.join("active_dims.csv")).unwrap();
    assert_eq!(data_rows(&active).len(), 3 * 4);
}

#[test]
fn vit_attention_report_matches_head_budgets() {
    let dir = TempDir::new().unwrap();
    let cfg = config(dir.path(), "mini_vit", "");
    let text = fs::read_to_string(&cfg).unwrap() + "\n[prune]\nbudgets = [0.5, 0.01]\n";
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "--out", s(&out), "sweep"]);
    let rows = data_rows(&fs::read_to_string(out.join("attention_modules.csv")).unwrap());
    // two layers with two heads each; layerwise keeps ceil(b*2) heads per module
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert_eq!(r[3], "1");
        assert_eq!(r[4], "2");
        assert_eq!(r[5], "1");
    }
}

#[test]
fn help_lists_csv_columns() {
    let help = ok(&["--help"]);
    assert!(help.contains("budget,ao,sr50,sr75,flops,conv_flops,params,param_mib"));
    assert!(help.contains("Exit codes"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            PipelineConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
