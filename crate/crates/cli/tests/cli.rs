use std::path::Path;
use std::process::{Command, Output};

fn mfcg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfcg")).args(args).output().expect("spawn mfcg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Rows as maps keyed by the header.
fn rows(csv: &str) -> Vec<std::collections::HashMap<String, String>> {
    let mut lines = csv.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            assert_eq!(cells.len(), header.len(), "{l}");
            header.iter().cloned().zip(cells.into_iter().map(String::from)).collect()
        })
        .collect()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap_or_else(|_| panic!("{key} = {}", row[key]))
}

#[test]
fn verify_passes_on_defaults() {
    let o = mfcg(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    for suite in ["oracle", "scalar-trace", "schedule", "recurrence"] {
        assert!(out.contains(&format!("suite {suite} PASS")), "{out}");
    }
}

#[test]
fn verify_filter_runs_one_suite() {
    let o = mfcg(&["verify", "--filter", "schedule"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert!(stdout(&o).starts_with("suite schedule PASS"));
    assert_eq!(mfcg(&["verify", "--filter", "nothing"]).status.code(), Some(2));
}

#[test]
fn sign_flip_mutation_fails_the_oracle() {
    let o = mfcg(&["verify", "--filter", "oracle", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("suite oracle FAIL"), "{}", stdout(&o));
}

#[test]
fn bench_smoke_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = mfcg(&[
        "bench",
        "--bp",
        "bp5",
        "--degree",
        "5",
        "--cells",
        "2",
        "--variant",
        "combined_pcg",
        "--iterations",
        "100",
        "--repeats",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let csv = std::fs::read_to_string(&out).unwrap();
    let r = rows(&csv);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0]["variant"], "combined_pcg");
    assert_eq!(r[0]["n_dofs"], "1331");
    assert!(num(&r[0], "dofs_per_second") > 0.0);
    let expect = num(&r[0], "n_dofs") * num(&r[0], "iterations") / num(&r[0], "min_seconds");
    assert!((num(&r[0], "dofs_per_second") / expect - 1.0).abs() < 1e-5);
}

#[test]
fn all_variants_reach_the_same_residual() {
    let o = mfcg(&["bench", "--bp", "bp4", "--degree", "2", "--cells", "3", "--rhs", "random", "--iterations", "300", "--repeats", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 6);
    let res: Vec<f64> = r.iter().map(|x| num(x, "relative_residual")).collect();
    let (lo, hi) = res.iter().fold((f64::MAX, 0.0f64), |(a, b), &x| (a.min(x), b.max(x)));
    assert!(hi - lo <= 1e-6, "{res:?}");
}

fn strip_timing(csv: &str) -> Vec<String> {
    rows(csv)
        .into_iter()
        .map(|mut r| {
            for k in ["min_seconds", "dofs_per_second", "matvec_seconds", "vector_seconds"] {
                r.remove(k);
            }
            let mut kv: Vec<_> = r.into_iter().collect();
            kv.sort();
            format!("{kv:?}")
        })
        .collect()
}

#[test]
fn same_config_file_gives_same_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "bp = bp2\ndegree = 2\ncells = 3 2 2\nvariant = pcg, combined_pcg, sstep2\niterations = 20\nrepeats = 1\n")
        .unwrap();
    let run = || {
        let o = mfcg(&["bench", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let (a, b) = (run(), run());
    assert_eq!(strip_timing(&a), strip_timing(&b));
    assert_eq!(rows(&a).len(), 3);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# sweep\ndegree = 2\ncells = 4; 8\nseed = 9\n").unwrap();
    let o = mfcg(&["config", "--config", cfg.to_str().unwrap(), "--degree", "5,6"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("degree = 5,6\n"), "{text}");
    assert!(text.contains("cells = 4 4 4; 8 8 8\n"), "{text}");
    assert!(text.contains("seed = 9\n"));
    // the emitted text is itself a valid config
    let again = dir.path().join("again.cfg");
    std::fs::write(&again, &text).unwrap();
    assert_eq!(stdout(&mfcg(&["config", "--config", again.to_str().unwrap()])), text);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "colour = blue\n").unwrap();
    assert_eq!(mfcg(&["bench", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(mfcg(&["bench", "--variant", "gmres"]).status.code(), Some(2));
    assert_eq!(mfcg(&["bench", "--iterations", "0"]).status.code(), Some(2));
    assert_eq!(mfcg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mfcg(&["bench", "--config", "/nonexistent/run.cfg"]).status.code(), Some(1));
}

#[test]
fn oversized_problem_is_refused() {
    let o = mfcg(&["bench", "--cells", "400", "--degree", "8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("too large"), "{}", stderr(&o));
}

#[test]
fn single_cell_liveliness_is_one_row() {
    let o = mfcg(&["liveliness", "--cells", "1", "--bp", "bp1", "--degree", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let r = rows(&stdout(&o));
    assert_eq!(r.len(), 2);
    for (row, numbering) in r.iter().zip(["default", "optimized"]) {
        assert_eq!((row["numbering"].as_str(), row["distance"].as_str(), row["cumulative_percent"].as_str()), (numbering, "0", "100.0000"));
    }
}

#[test]
fn optimized_liveliness_dominates() {
    let o = mfcg(&["liveliness", "--bp", "bp3", "--degree", "3", "--cells", "6x5x4; 8x8x8", "--simd-lanes", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let all = rows(&stdout(&o));
    for cells in ["6x5x4", "8x8x8"] {
        let cdf = |numbering: &str| -> Vec<f64> {
            all.iter().filter(|r| r["cells"] == cells && r["numbering"] == numbering).map(|r| num(r, "cumulative_percent")).collect()
        };
        let (a, b) = (cdf("default"), cdf("optimized"));
        let at = |v: &[f64], d: usize| v.get(d).copied().unwrap_or(100.0);
        for d in 0..a.len().max(b.len()) {
            assert!(at(&b, d) >= at(&a, d), "{cells} distance {d}: {} < {}", at(&b, d), at(&a, d));
        }
        assert_eq!(*a.last().unwrap(), 100.0);
    }
    assert!(stderr(&o).contains("optimized dominates: true"));
}

#[test]
fn cache_sweep_is_non_increasing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = mfcg(&[
        "cachesweep",
        "--bp",
        "bp3",
        "--degree",
        "3",
        "--cells",
        "6",
        "--variant",
        "pcg,combined_pcg",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = rows(&std::fs::read_to_string(Path::new(&out)).unwrap());
    assert_eq!(r.len(), 2 * 12);
    for v in ["pcg", "combined_pcg"] {
        let pts: Vec<(f64, f64)> =
            r.iter().filter(|x| x["variant"] == v).map(|x| (num(x, "capacity_bytes"), num(x, "loads_per_dof"))).collect();
        assert_eq!(pts.first().unwrap().0, 32.0 * 1024.0);
        assert_eq!(pts.last().unwrap().0, 64.0 * 1024.0 * 1024.0);
        assert!(pts.windows(2).all(|w| w[1].1 <= w[0].1 + 1e-9), "{v}: {pts:?}");
    }
}

#[test]
fn transfer_model_table() {
    let o = mfcg(&["transfer-model", "--bp", "bp4", "--variant", "cg,sstep6,combined_pcg"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        stdout(&o),
        "bp,variant,vector_reads,vector_writes,matvec_reads,matvec_writes,total_reads,total_writes,fused\n\
         bp4,cg,9.0000,3.0000,2.0000,1.0000,11.0000,4.0000,false\n\
         bp4,sstep6,5.6667,1.3333,2.0000,1.0000,7.6667,2.3333,false\n\
         bp4,combined_pcg,3.8333,3.5000,0.0000,0.0000,3.8333,3.5000,true\n"
    );
}

#[test]
fn thread_variable_is_accepted() {
    let o =
        Command::new(env!("CARGO_BIN_EXE_mfcg")).args(["transfer-model", "--variant", "cg"]).env("MFCG_THREADS", "16").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().count(), 2);
}
