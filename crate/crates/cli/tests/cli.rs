use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const DI: &str = r#"
seed = 3
output_dir = "OUT"

[system]
kind = "double_integrator"
u_max = 1.0

[grid]
lo = [-1.5, -2.5]
hi = [1.5, 2.5]
shape = [41, 41]

[[constraint]]
axis = 0
lo = -1.0
hi = 1.0

# Global-bound dissipation slowly erodes the kernel on a grid this coarse.
[numerics]
dissipation = "local"

[rollout]
count = 50
horizon = 3.0
dt = 0.02

[rollout.nominal]
kind = "constant"
u = [1.0]

[perturbation]
kind = "radial-bump"
center = [0.5, 1.0]
radius = 0.3
amplitude = 0.2
sign = "optimistic"
"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text.replace("OUT", &self.path("out").display().to_string())).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_hjpatch"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("HJPATCH_THREADS")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Value {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solve_patch_compare_pipeline() {
    let env = Env::new();
    let cfg = env.config("di.toml", DI);
    let solve = env.ok(&["solve", "--config", s(&cfg)]);
    let stats = &solve["result"]["stats"];
    assert_eq!(stats["converged"], true);
    let history: Vec<f64> = stats["max_residual_history"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(history.len() as u64, stats["sweeps"].as_u64().unwrap());
    assert!(history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)), "residuals should not grow");
    assert_eq!(solve["config_sha256"].as_str().unwrap().len(), 64);

    let star = env.path("out/solve.hjpf");
    let bumped = env.path("bumped.hjpf");
    env.ok(&["synth", "--config", s(&cfg), "--truth", s(&star), "--out", s(&bumped)]);
    let patched = env.ok(&["patch", "--config", s(&cfg), "--init", s(&bumped)]);
    assert_eq!(patched["result"]["certified"], true);
    assert!(patched["result"]["stats"]["hamiltonian_evals"].as_u64().unwrap() < stats["hamiltonian_evals"].as_u64().unwrap());

    let cmp = env.ok(&["compare", "--a", s(&star), "--b", s(&env.path("out/patch.hjpf")), "--out-dir", s(&env.path("cmp"))]);
    assert_eq!(cmp["result"]["within_band"], true);
    assert!(env.path("cmp/compare_0_1_a.csv").exists());

    let same = env.ok(&["compare", "--a", s(&star), "--b", s(&star), "--out-dir", s(&env.path("cmp2"))]);
    assert_eq!(same["result"]["max_abs_diff"], 0.0);
    assert_eq!(same["result"]["symmetric_difference"], 0);
}

#[test]
fn rollouts_filtered_and_unfiltered() {
    let env = Env::new();
    let cfg = env.config("di.toml", DI);
    env.ok(&["solve", "--config", s(&cfg)]);
    let field = env.path("out/solve.hjpf");
    let filtered = env.ok(&["rollout", "--config", s(&cfg), "--field", s(&field)]);
    let raw = env.ok(&["rollout", "--config", s(&cfg), "--field", s(&field), "--unfiltered", "--out", s(&env.path("raw.csv"))]);
    assert!(raw["result"]["metrics"]["unsafe_rollout_share"].as_f64().unwrap() > 50.0);
    assert!(
        filtered["result"]["metrics"]["unsafe_rollout_share"].as_f64().unwrap()
            < raw["result"]["metrics"]["unsafe_rollout_share"].as_f64().unwrap()
    );
    let csv = std::fs::read_to_string(env.path("out/trajectories.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, "rollout,step,time,x0,x1,u0,h,safe,filter_active,off_grid,infeasible,diverged");
    // 50 rollouts of 151 samples each.
    assert_eq!(csv.lines().count(), 1 + 50 * 151);
}

#[test]
fn reports_are_reproducible() {
    let env = Env::new();
    let cfg = env.config("di.toml", DI);
    env.ok(&["solve", "--config", s(&cfg)]);
    let field = env.path("out/solve.hjpf");
    let first = env.ok(&["rollout", "--config", s(&cfg), "--field", s(&field), "--n", "20"]);
    let csv1 = std::fs::read(env.path("out/trajectories.csv")).unwrap();
    let second = env.ok(&["rollout", "--config", s(&cfg), "--field", s(&field), "--n", "20", "--threads", "1"]);
    let csv2 = std::fs::read(env.path("out/trajectories.csv")).unwrap();
    assert_eq!(first, second);
    assert_eq!(csv1, csv2);
}

#[test]
fn epsilon_and_contours() {
    let env = Env::new();
    let cfg = env.config("di.toml", DI);
    env.ok(&["solve", "--config", s(&cfg)]);
    let star = env.path("out/solve.hjpf");
    let eps = env.ok(&["epsilon", "--config", s(&cfg), "--field", s(&star)]);
    assert_eq!(eps["result"]["epsilon"], 0.0);
    assert_eq!(eps["result"]["vacuous"], false);

    let c = env.ok(&["contours", "--field", s(&star), "--dims", "0,1", "--out-dir", s(&env.path("c"))]);
    assert_eq!(c["result"]["curves"], 1);
    let slice = std::fs::read_to_string(env.path("c/slice_0_1.csv")).unwrap();
    assert_eq!(slice.lines().next().unwrap(), "x0,x1,value");
    assert_eq!(slice.lines().count(), 1 + 41 * 41);
}

#[test]
fn import_export_round_trip() {
    let env = Env::new();
    let cfg = env.config("di.toml", DI);
    env.ok(&["solve", "--config", s(&cfg)]);
    let star = env.path("out/solve.hjpf");
    let csv = env.path("star.csv");
    env.ok(&["export", "--field", s(&star), "--out", s(&csv)]);
    let back = env.path("back.hjpf");
    env.ok(&["import", "--config", s(&cfg), "--csv", s(&csv), "--out", s(&back)]);
    let cmp = env.ok(&["compare", "--a", s(&star), "--b", s(&back), "--out-dir", s(&env.path("cmp"))]);
    assert_eq!(cmp["result"]["max_abs_diff"], 0.0);

    // A mask from the same samples is accepted by patch.
    let mask = env.path("mask.hjpf");
    env.ok(&["import", "--config", s(&cfg), "--csv", s(&csv), "--out", s(&mask), "--mask"]);
    env.ok(&["patch", "--config", s(&cfg), "--init", s(&star), "--certified", s(&mask)]);

    // Missing rows are rejected.
    let text = std::fs::read_to_string(&csv).unwrap();
    let short: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
    std::fs::write(&csv, short).unwrap();
    let out = env.run(&["import", "--config", s(&cfg), "--csv", s(&csv), "--out", s(&back)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn reconstruct_keeps_the_safe_set() {
    let env = Env::new();
    let cfg = env.config("di.toml", DI);
    env.ok(&["solve", "--config", s(&cfg)]);
    let star = env.path("out/solve.hjpf");
    let sd = env.path("sd.hjpf");
    let r = env.ok(&["reconstruct", "--field", s(&star), "--out", s(&sd)]);
    assert_eq!(r["result"]["no_zero_set"], false);
    let cmp = env.ok(&["compare", "--a", s(&star), "--b", s(&sd), "--out-dir", s(&env.path("cmp"))]);
    assert_eq!(cmp["result"]["symmetric_difference"], 0);
}

#[test]
fn exit_codes() {
    let env = Env::new();
    // Unknown key: configuration error.
    let bad = env.config("bad.toml", &DI.replace("[rollout]", "[rollout]\nhorizn = 2.0"));
    let out = env.run(&["solve", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizn"));

    // Missing key.
    let missing = env.config("missing.toml", &DI.replace("shape = [41, 41]", ""));
    let out = env.run(&["solve", "--config", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shape"));

    // Field from another grid.
    let cfg = env.config("di.toml", DI);
    env.ok(&["solve", "--config", s(&cfg)]);
    let other = env.config("other.toml", &DI.replace("shape = [41, 41]", "shape = [31, 31]"));
    let out = env.run(&["solve", "--config", s(&other), "--init", s(&env.path("out/solve.hjpf"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid mismatch"));

    // Sweep budget exhausted: numerical failure unless partial results are allowed.
    let short = env.config("short.toml", &format!("{DI}\n[convergence]\nmax_sweeps = 3\n"));
    assert_eq!(env.run(&["solve", "--config", s(&short)]).status.code(), Some(4));
    env.ok(&["solve", "--config", s(&short), "--allow-partial"]);

    // Slice outside the grid.
    let out = env.run(&["contours", "--field", s(&env.path("out/solve.hjpf")), "--dims", "0,1", "--slice", "1"]);
    assert_eq!(out.status.code(), Some(3));

    // Truncated file.
    let bytes = std::fs::read(env.path("out/solve.hjpf")).unwrap();
    std::fs::write(env.path("cut.hjpf"), &bytes[..bytes.len() / 2]).unwrap();
    let out = env.run(&["epsilon", "--config", s(&cfg), "--field", s(&env.path("cut.hjpf"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt field file at byte"));
}

#[test]
fn leaky_patch_input_fails_certificate_when_budget_runs_out() {
    let env = Env::new();
    // The raw constraint leaks; one patch iteration cannot repair it.
    let cfg = env.config("di.toml", &format!("{DI}\n[patch]\nmax_iterations = 1\n[convergence]\nmax_sweeps = 1\n"));
    let h = env.path("h.hjpf");
    env.ok(&["solve", "--config", s(&cfg), "--allow-partial", "--out", s(&h)]);
    let out = env.run(&["patch", "--config", s(&cfg), "--init", s(&h), "--allow-partial"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}
