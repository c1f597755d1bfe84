mod common;

use std::fs;

use common::*;
use mmfl_cli::{read_report, EvalReport};

#[test]
fn generate_default_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "gen.toml", SMALL_GEN);
    let out = ok(
        &[
            "generate", "--out", "a", "--config", "gen.toml", "--seed", "4",
        ],
        d,
    );
    assert!(out.contains("7 clients"), "{out}");
    ok(
        &[
            "generate", "--out", "b", "--config", "gen.toml", "--seed", "4",
        ],
        d,
    );

    let manifest = fs::read_to_string(d.join("a/benchmark.toml")).unwrap();
    assert!(manifest.contains("seed = 4"));
    let dirs = fs::read_dir(d.join("a"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 7);
    let ds = mmfl_cli::Dataset::load(&d.join("a")).unwrap();
    assert_eq!(ds.registry.len(), 6);
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));

    ok(
        &[
            "generate", "--out", "c", "--config", "gen.toml", "--seed", "5",
        ],
        d,
    );
    assert_ne!(tree(&d.join("a")), tree(&d.join("c")));
}

#[test]
fn generate_refuses_to_clobber_and_bad_specs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "gen.toml", SMALL_GEN);
    fs::create_dir(d.join("out")).unwrap();
    fs::write(d.join("out/keep.txt"), "x").unwrap();
    let err = fails(&["generate", "--out", "out", "--config", "gen.toml"], d);
    assert!(err.contains("--force"), "{err}");
    assert!(d.join("out/keep.txt").exists());
    ok(
        &[
            "generate", "--out", "out", "--config", "gen.toml", "--force",
        ],
        d,
    );
    assert!(!d.join("out/keep.txt").exists());

    write(d, "zero.toml", "[overrides]\nn_train = 0\n");
    let err = fails(&["generate", "--out", "z", "--config", "zero.toml"], d);
    assert!(err.contains("n_train"), "{err}");
    assert!(!d.join("z").exists());

    write(d, "typo.toml", "[overrides]\nn_trian = 3\n");
    let err = fails(&["generate", "--out", "z", "--config", "typo.toml"], d);
    assert!(err.contains("n_trian") && err.contains("line 2"), "{err}");
}

#[test]
fn smoke_train_writes_all_artifacts() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    write(d, "plan.toml", &smoke_plan("[[run]]\nlabel = \"smoke\"\n"));
    ok(&["train", "--plan", "plan.toml", "-q"], d);
    let run = d.join("runs/smoke");
    for f in [
        "run.toml",
        "global.mmfl",
        "metrics.csv",
        "log.json",
        "summary.json",
    ] {
        assert!(run.join(f).exists(), "{f}");
    }
    for c in ["c1-tumor", "c2-ms", "c3-stroke", "c4-tbi", "c5-wmh"] {
        assert!(run.join(format!("norms/{c}.mmfl")).exists());
    }
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);

    let err = fails(&["train", "--plan", "plan.toml", "-q"], d);
    assert!(err.contains("--force"), "{err}");
    ok(&["train", "--plan", "plan.toml", "-q", "--force"], d);
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap(), csv);

    let loaded = mmfl_cli::LoadedRun::load(&run).unwrap();
    assert_eq!(loaded.summary.audit.norm_entries_averaged, 0);
    assert_eq!(loaded.summary.audit.norm_entries_uploaded, 0);
    assert_eq!(loaded.summary.audit.norm_entries_broadcast, 0);
}

#[test]
fn train_flags_override_the_plan() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    write(d, "plan.toml", &smoke_plan("[[run]]\nlabel = \"a\"\n"));
    ok(
        &[
            "train",
            "--plan",
            "plan.toml",
            "-q",
            "--tau",
            "1",
            "--norm",
            "gn:2",
            "--aggregation",
            "fedavg_all",
            "--no-drop",
            "--seed",
            "9",
            "--batch-size",
            "2",
            "--phi",
            "0.25",
            "--out",
            "elsewhere",
        ],
        d,
    );
    let rec = mmfl_cli::LoadedRun::load(&d.join("elsewhere/a"))
        .unwrap()
        .record;
    let c = rec.config;
    assert_eq!(
        (c.tau, c.seed, c.batch_size, c.phi, c.drop_enabled),
        (1, 9, 2, 0.25, false)
    );
    assert_eq!(c.norm.to_string(), "group:2");
    assert_eq!(c.aggregation.to_string(), "fedavg_all");
    assert!(!d.join("elsewhere/a/norms").exists());
}

#[test]
fn train_rejects_bad_plans_before_training() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    // 32 px cannot be halved 6 times
    let plan = smoke_plan(
        "[[run]]\nlabel = \"ok\"\n\n[[run]]\nlabel = \"deep\"\nconfig = { depth = 6 }\n",
    );
    write(d, "plan.toml", &plan);
    let err = fails(&["train", "--plan", "plan.toml", "-q"], d);
    assert!(err.contains("deep") && err.contains("depth"), "{err}");
    assert!(!d.join("runs").exists(), "nothing may be trained");

    write(
        d,
        "plan.toml",
        &smoke_plan("[[run]]\nlabel = \"a\"\nconfig = { tua = 1 }\n"),
    );
    let err = fails(&["train", "--plan", "plan.toml", "-q"], d);
    assert!(err.contains("\"a\"") && err.contains("tua"), "{err}");

    write(
        d,
        "plan.toml",
        &smoke_plan("[[run]]\nlabel = \"a\"\nclients = [\"nope\"]\n"),
    );
    let err = fails(&["train", "--plan", "plan.toml", "-q"], d);
    assert!(err.contains("nope"), "{err}");

    write(d, "plan.toml", &smoke_plan("[[run]]\nlabel = \"a\"\n"));
    let err = fails(
        &["train", "--plan", "plan.toml", "-q", "--data", "missing"],
        d,
    );
    assert!(err.contains("missing"), "{err}");

    let err = fails(
        &["train", "--plan", "plan.toml", "-q", "--norm", "layer"],
        d,
    );
    assert!(err.contains("layer"), "{err}");
}

fn load_report(path: &std::path::Path) -> EvalReport {
    read_report(path).unwrap()
}

#[test]
fn eval_missing_policies() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    write(d, "plan.toml", &smoke_plan("[[run]]\nlabel = \"r\"\n"));
    ok(&["train", "--plan", "plan.toml", "-q"], d);

    ok(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--policy",
            "none",
            "--out",
            "none.json",
        ],
        d,
    );
    let r = load_report(&d.join("none.json"));
    assert_eq!(r.rows.len(), 5);
    for row in &r.rows {
        assert_eq!(row.dice_excluded, Some(row.dice));
        assert_eq!(row.delta, Some(0.0));
    }
    assert_eq!(r.average_delta, Some(0.0));

    ok(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--seed",
            "3",
            "--out",
            "a.json",
        ],
        d,
    );
    ok(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--seed",
            "3",
            "--out",
            "b.json",
        ],
        d,
    );
    assert_eq!(
        fs::read(d.join("a.json")).unwrap(),
        fs::read(d.join("b.json")).unwrap()
    );
    let a = load_report(&d.join("a.json"));
    // the T1-only client cannot lose anything
    let c3 = a.rows.iter().find(|r| r.client_id == "c3-stroke").unwrap();
    assert_eq!(c3.delta, Some(0.0));

    let err = fails(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--seed",
            "3",
            "--out",
            "a.json",
        ],
        d,
    );
    assert!(err.contains("--force"), "{err}");
    ok(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--policy",
            "keep:T1",
            "--out",
            "keep.json",
        ],
        d,
    );
    let err = fails(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--policy",
            "keep:SWI",
            "--out",
            "k2.json",
        ],
        d,
    );
    assert!(err.contains("no modality"), "{err}");
    let err = fails(
        &[
            "eval-missing",
            "--run",
            "runs/r",
            "--phi",
            "1.5",
            "--out",
            "p.json",
        ],
        d,
    );
    assert!(err.contains("phi"), "{err}");

    fs::remove_file(d.join("runs/r/global.mmfl")).unwrap();
    let err = fails(&["eval-missing", "--run", "runs/r", "--out", "c.json"], d);
    assert!(err.contains("checkpoint"), "{err}");
}

#[test]
fn eval_generalize_bn_handling_and_target_flag() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    let runs = "[[run]]\nlabel = \"bn\"\n\n\
                [[run]]\nlabel = \"avgbn\"\nconfig = { aggregation = \"fedavg_avgbn\" }\n\n\
                [[run]]\nlabel = \"in\"\nconfig = { norm = \"instance\" }\n\n\
                [[run]]\nlabel = \"gn\"\nconfig = { norm = \"group:2\" }\n\n\
                [[run]]\nlabel = \"nf\"\nconfig = { norm = \"nf\" }\n\n\
                [[run]]\nlabel = \"t1\"\nclients = [\"c3-stroke\"]\nmodalities = [\"T1\"]\n";
    write(d, "plan.toml", &smoke_plan(runs));
    ok(&["train", "--plan", "plan.toml", "-q"], d);

    let flag = |run: &str, extra: &[&str]| -> EvalReport {
        let out = format!("{run}-{}.json", extra.join(""));
        let mut args = vec!["eval-generalize", "--run", run, "--out", &out];
        args.extend_from_slice(extra);
        ok(&args, d);
        load_report(&d.join(&out))
    };
    let bn = flag("runs/bn", &[]);
    assert!(bn.needs_target_data);
    assert_eq!(
        bn.rows
            .iter()
            .map(|r| r.client_id.as_str())
            .collect::<Vec<_>>(),
        ["h1-stroke", "h2-tumor"]
    );
    assert!(!flag("runs/bn", &["--bn", "avg"]).needs_target_data);
    assert!(!flag("runs/avgbn", &[]).needs_target_data);
    assert!(flag("runs/avgbn", &["--bn", "adapt"]).needs_target_data);
    for run in ["runs/in", "runs/gn", "runs/nf"] {
        assert!(!flag(run, &[]).needs_target_data, "{run}");
        let err = fails(
            &[
                "eval-generalize",
                "--run",
                run,
                "--bn",
                "adapt",
                "--out",
                "x.json",
            ],
            d,
        );
        assert!(err.contains("batch"), "{err}");
    }
    // the baseline inherits its T1 restriction
    let t1 = flag("runs/t1", &["--clients", "h1-stroke"]);
    assert_eq!(t1.modalities.as_deref(), Some(&["T1".to_string()][..]));
    assert_eq!(t1.rows.len(), 1);
}

#[test]
fn eval_generalize_rejects_modalities_outside_registry() {
    let gen = r#"
        [[clients]]
        role = "train"
        [clients.spec]
        client_id = "a"
        modalities = ["T1", "T2"]
        n_train = 4
        n_val = 2
        image_size = 16
        noise_sigma = 0.2
        field_amplitude = 0.3
        fg_fraction = [0.01, 0.2]
        seed = 1
        [clients.spec.pathology]
        family = "blob"
        visibility = { T2 = 0.8 }
        size_range = [2.0, 3.0]
        count_range = [1, 1]

        [[clients]]
        role = "held_out"
        [clients.spec]
        client_id = "h"
        modalities = ["T1", "DWI"]
        n_train = 4
        n_val = 2
        image_size = 16
        noise_sigma = 0.2
        field_amplitude = 0.3
        fg_fraction = [0.01, 0.2]
        seed = 2
        [clients.spec.pathology]
        family = "blob"
        visibility = { DWI = 0.8 }
        size_range = [2.0, 3.0]
        count_range = [1, 1]
    "#;
    let ws = workspace(gen);
    let d = ws.path();
    write(d, "plan.toml", &smoke_plan("[[run]]\nlabel = \"r\"\n"));
    ok(&["train", "--plan", "plan.toml", "-q"], d);
    let err = fails(&["eval-generalize", "--run", "runs/r"], d);
    assert!(err.contains("DWI"), "{err}");
    assert!(!d.join("runs/r/eval_generalize.json").exists());
}

#[test]
fn report_tables() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    let runs = "[[run]]\nlabel = \"nodrop\"\nconfig = { drop_enabled = false }\nevaluate = [\"missing\", \"generalize\"]\n\n\
                [[run]]\nlabel = \"drop\"\nevaluate = [\"missing\", \"generalize\"]\n\n\
                [[run]]\nlabel = \"avg\"\nconfig = { aggregation = \"fedavg_avgbn\" }\n\n\
                [[run]]\nlabel = \"nf\"\nconfig = { norm = \"nf\" }\n";
    write(d, "plan.toml", &smoke_plan(runs));
    ok(&["train", "--plan", "plan.toml", "-q"], d);

    let one = ok(&["report", "runs/drop", "--out", "single"], d);
    assert!(one.contains("1 rows"), "{one}");
    let csv = fs::read_to_string(d.join("single/report.csv")).unwrap();
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let dice: Vec<f64> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("dice:"))
        .map(|(i, _)| rows[0][i].parse().unwrap())
        .collect();
    let avg: f64 = rows[0][col("average")].parse().unwrap();
    assert!((avg - dice.iter().sum::<f64>() / dice.len() as f64).abs() < 1e-6);
    let summary = mmfl_cli::LoadedRun::load(&d.join("runs/drop"))
        .unwrap()
        .summary;
    let exact = summary.clients.iter().map(|c| c.dice).sum::<f64>() / summary.clients.len() as f64;
    assert!((exact - summary.average_dice).abs() <= 1e-12);

    ok(
        &[
            "report",
            "runs/nodrop",
            "runs/drop",
            "runs/avg",
            "runs/nf",
            "--out",
            "all",
            "--plots",
        ],
        d,
    );
    let md = fs::read_to_string(d.join("all/report.md")).unwrap();
    let order: Vec<usize> = [
        "| avg | BN avg | drop",
        "| drop | BN client-spec | drop",
        "| nodrop | BN client-spec | no-drop",
        "| nf | NF | drop",
    ]
    .iter()
    .map(|s| md.find(s).unwrap_or_else(|| panic!("{s} missing:\n{md}")))
    .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]), "{md}");
    assert!(md.contains("Δ Dice") && md.contains("Needs target data") && md.contains("h1-stroke"));
    let svg = fs::read_to_string(d.join("all/dice_vs_round.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("nodrop"));

    let err = fails(&["report", "runs/drop", "--out", "all"], d);
    assert!(err.contains("--force"), "{err}");

    // a tampered summary is caught
    let path = d.join("runs/avg/summary.json");
    let text = fs::read_to_string(&path).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["average_dice"] = serde_json::json!(v["average_dice"].as_f64().unwrap() + 1e-9);
    fs::write(&path, v.to_string()).unwrap();
    let err = fails(&["report", "runs/avg", "--out", "bad"], d);
    assert!(err.contains("average"), "{err}");
}

#[test]
fn report_rejects_incompatible_registries() {
    let ws = workspace(SMALL_GEN);
    let d = ws.path();
    write(d, "plan.toml", &smoke_plan("[[run]]\nlabel = \"a\"\n"));
    ok(&["train", "--plan", "plan.toml", "-q"], d);

    let other = tempfile::tempdir().unwrap();
    let o = other.path();
    let gen = fs::read_to_string(d.join("gen.toml")).unwrap();
    write(o, "gen.toml", &gen);
    ok(&["generate", "--out", "data", "--config", "gen.toml"], o);
    // restricting the clients does not change the registry, so rewrite it
    let manifest = o.join("data/benchmark.toml");
    let text = fs::read_to_string(&manifest)
        .unwrap()
        .replace("\"SWI\",", "\"SWI\",\n    \"DWI\",");
    fs::write(&manifest, text).unwrap();
    write(o, "plan.toml", &smoke_plan("[[run]]\nlabel = \"b\"\n"));
    ok(&["train", "--plan", "plan.toml", "-q"], o);

    let b = o.join("runs/b");
    let err = fails(
        &["report", "runs/a", b.to_str().unwrap(), "--out", "rep"],
        d,
    );
    assert!(err.contains("registry"), "{err}");
}
