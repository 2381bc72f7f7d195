//! One function per subcommand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use hjpatch::barrier::{
    load_field, load_mask, measure_epsilon, signed_distance_reconstruct, synth_almost_barrier,
    EpsilonReport, FieldFile, Payload,
};
use hjpatch::compare::{compare_fields, FieldComparison};
use hjpatch::contour::{slice, zero_contours};
use hjpatch::grid::{CellMask, Grid, ScalarField};
use hjpatch::rollout::{evaluate_rollouts, sample_safe_starts, RolloutMetrics, Simulator, Trajectory};
use hjpatch::solver::{patch, solve_global, CertificateReport, PatchParams, SolveError, SolveStats};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::report::Report;
use crate::Command;

pub fn dispatch(cmd: Command, report: Option<PathBuf>) -> Result<(), CliError> {
    match cmd {
        Command::Solve { config, init, out, allow_partial } => cmd_solve(&config.config, &init, out, allow_partial, report),
        Command::Patch { config, init, certified, out, allow_partial } => {
            cmd_patch(&config.config, &init, certified.as_deref(), out, allow_partial, report)
        }
        Command::Rollout { config, field, n, horizon, unfiltered, out } => {
            cmd_rollout(&config.config, &field, n, horizon, unfiltered, out, report)
        }
        Command::Compare { a, b, out_dir } => cmd_compare(&a, &b, &out_dir, report),
        Command::Epsilon { config, field } => cmd_epsilon(&config.config, &field, report),
        Command::Contours { field, dims, slice, out_dir } => cmd_contours(&field, &dims, &slice, &out_dir, report),
        Command::Import { config, csv, out, mask } => cmd_import(&config.config, &csv, &out, mask, report),
        Command::Export { field, out } => cmd_export(&field, &out, report),
        Command::Synth { config, truth, out } => cmd_synth(&config.config, &truth, &out, report),
        Command::Reconstruct { field, out } => cmd_reconstruct(&field, &out, report),
    }
}

fn report_path(explicit: Option<PathBuf>, dir: &Path, command: &str) -> PathBuf {
    explicit.unwrap_or_else(|| dir.join(format!("{command}_report.json")))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_field(path: &Path) -> Result<ScalarField, CliError> {
    load_field(path).map_err(|e| CliError::format(path, e))
}

fn write_field(field: &ScalarField, path: &Path, metadata: BTreeMap<String, String>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    FieldFile::from_field(field, metadata).save(path).map_err(|e| CliError::format(path, e))
}

/// The config grid and a loaded field must agree exactly.
fn check_grid(expected: &Grid, field: &ScalarField, path: &Path) -> Result<(), CliError> {
    if expected != &**field.grid() {
        return Err(CliError::ShapeMismatch(format!(
            "{}: file grid (lo {:?}, hi {:?}, shape {:?}) differs from configured grid (lo {:?}, hi {:?}, shape {:?})",
            path.display(),
            field.grid().lo(),
            field.grid().hi(),
            field.grid().shape(),
            expected.lo(),
            expected.hi(),
            expected.shape()
        )));
    }
    Ok(())
}

fn metadata(cfg: &RunConfig, command: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("command".to_string(), command.to_string()),
        ("system".to_string(), cfg.system_name().to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

#[derive(Debug, Serialize)]
struct SolveResult {
    system: &'static str,
    grid_cells: usize,
    safe_cells: usize,
    stats: SolveStats,
}

fn cmd_solve(
    config: &Path,
    init: &str,
    out: Option<PathBuf>,
    allow_partial: bool,
    report: Option<PathBuf>,
) -> Result<(), CliError> {
    let (cfg, bytes) = RunConfig::load(config)?;
    let grid = cfg.grid()?;
    let d = cfg.dynamics()?;
    let (v0, init_path) = if init == "constraint" {
        (cfg.constraint()?.field(grid.clone()), None)
    } else {
        let path = PathBuf::from(init);
        let f = read_field(&path)?;
        check_grid(&grid, &f, &path)?;
        (f, Some(path))
    };
    let (solution, failure) = match solve_global(&v0, &*d, &cfg.numerics, &cfg.convergence) {
        Ok(s) => (s, None),
        Err(SolveError::NonConvergence { partial }) => {
            let msg = format!("no convergence after {} sweeps", partial.stats.sweeps);
            (*partial, Some(msg))
        }
        Err(e) => return Err(e.into()),
    };
    ensure_dir(&cfg.output_dir)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("solve.hjpf"));
    write_field(&solution.field, &out, metadata(&cfg, "solve"))?;
    let result = SolveResult {
        system: cfg.system_name(),
        grid_cells: grid.len(),
        safe_cells: solution.field.count_nonnegative(),
        stats: solution.stats,
    };
    let mut r = Report::new("solve", Some(&bytes), result).input("config", config)?.output("field", &out);
    if let Some(p) = &init_path {
        r = r.input("init", p)?;
    }
    r.write(&report_path(report, &cfg.output_dir, "solve"))?;
    match failure {
        Some(msg) if !allow_partial => Err(CliError::Numerical(msg)),
        _ => Ok(()),
    }
}

#[derive(Debug, Serialize)]
struct PatchResult {
    system: &'static str,
    grid_cells: usize,
    safe_cells: usize,
    stats: SolveStats,
    params: PatchParams,
    active_set_sizes: Vec<usize>,
    certificate: CertificateReport,
    certified: bool,
}

fn cmd_patch(
    config: &Path,
    init: &Path,
    certified: Option<&Path>,
    out: Option<PathBuf>,
    allow_partial: bool,
    report: Option<PathBuf>,
) -> Result<(), CliError> {
    let (cfg, bytes) = RunConfig::load(config)?;
    let grid = cfg.grid()?;
    let d = cfg.dynamics()?;
    let h = read_field(init)?;
    check_grid(&grid, &h, init)?;
    let mask = match certified {
        Some(p) => {
            let m = load_mask(p).map_err(|e| CliError::format(p, e))?;
            if m.grid() != h.grid() {
                return Err(CliError::ShapeMismatch(format!("{}: mask grid differs from field grid", p.display())));
            }
            Some(m)
        }
        None => None,
    };
    let (sol, failure) = match patch(&h, mask.as_ref(), &*d, &cfg.numerics, &cfg.patch, &cfg.convergence) {
        Ok(s) => (s, None),
        Err(SolveError::PatchNonConvergence { partial }) => {
            let msg = format!("active set not empty after {} iterations", partial.stats.sweeps);
            (*partial, Some(msg))
        }
        Err(e) => return Err(e.into()),
    };
    ensure_dir(&cfg.output_dir)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("patch.hjpf"));
    write_field(&sol.field, &out, metadata(&cfg, "patch"))?;
    let passed = sol.certificate.certified();
    let violations = sol.certificate.violations.len();
    let boundary_cells = sol.certificate.boundary_cells;
    let result = PatchResult {
        system: cfg.system_name(),
        grid_cells: grid.len(),
        safe_cells: sol.field.count_nonnegative(),
        stats: sol.stats,
        params: sol.params,
        active_set_sizes: sol.active_set_sizes,
        certificate: sol.certificate,
        certified: passed,
    };
    let mut r = Report::new("patch", Some(&bytes), result)
        .input("config", config)?
        .input("init", init)?
        .output("field", &out);
    if let Some(p) = certified {
        r = r.input("certified", p)?;
    }
    r.write(&report_path(report, &cfg.output_dir, "patch"))?;
    if let Some(msg) = failure {
        if !allow_partial {
            return Err(CliError::Numerical(msg));
        }
    }
    if !passed {
        return Err(CliError::Certificate { violations, boundary_cells });
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RolloutResult {
    filtered: bool,
    seed: u64,
    horizon: f64,
    dt: f64,
    metrics: RolloutMetrics,
}

fn cmd_rollout(
    config: &Path,
    field: &Path,
    n: Option<usize>,
    horizon: Option<f64>,
    unfiltered: bool,
    out: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<(), CliError> {
    let (mut cfg, bytes) = RunConfig::load(config)?;
    if let Some(h) = horizon {
        cfg.rollout.horizon = h;
    }
    let count = n.unwrap_or(cfg.rollout.count);
    let grid = cfg.grid()?;
    let d = cfg.dynamics()?;
    let v = read_field(field)?;
    check_grid(&grid, &v, field)?;
    let nominal = cfg.nominal_policy(&*d)?;
    let constraint = cfg.constraint()?;
    let rcfg = cfg.rollout_config(!unfiltered);
    rcfg.validate()?;
    let starts = sample_safe_starts(&v, count, cfg.rollout.start_margin, cfg.seed, cfg.rollout.max_attempts)?;
    let sim = Simulator { field: &v, dynamics: &*d, nominal: &nominal, constraint: &constraint, filter: &cfg.filter };
    let batch = sim.batch(&starts, &rcfg)?;
    let metrics = evaluate_rollouts(&batch)?;
    ensure_dir(&cfg.output_dir)?;
    let out = out.unwrap_or_else(|| cfg.output_dir.join("trajectories.csv"));
    write_trajectories(&batch, d.state_dim(), d.input_dim(), &out)?;
    let result = RolloutResult { filtered: !unfiltered, seed: cfg.seed, horizon: rcfg.horizon, dt: rcfg.dt, metrics };
    Report::new("rollout", Some(&bytes), result)
        .input("config", config)?
        .input("field", field)?
        .output("trajectories", &out)
        .write(&report_path(report, &cfg.output_dir, "rollout"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn flush(mut w: csv::Writer<BufWriter<File>>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// One row per sample: `rollout,step,time,x0..,u0..,h,safe,filter_active,off_grid,infeasible,diverged`.
pub fn write_trajectories(batch: &[Trajectory], n: usize, m: usize, path: &Path) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    let mut header: Vec<String> = vec!["rollout".into(), "step".into(), "time".into()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|j| format!("u{j}")));
    header.extend(["h", "safe", "filter_active", "off_grid", "infeasible", "diverged"].map(String::from));
    w.write_record(&header)?;
    let flag = |b: bool| if b { "1".to_string() } else { "0".to_string() };
    for (r, t) in batch.iter().enumerate() {
        for k in 0..t.len() {
            let mut row = vec![r.to_string(), k.to_string(), t.times[k].to_string()];
            row.extend(t.states[k].iter().map(f64::to_string));
            row.extend(t.controls[k].iter().map(f64::to_string));
            row.push(t.h_values[k].to_string());
            row.push(flag(t.safe_flags[k]));
            row.push(flag(t.filter_active_flags[k]));
            row.push(flag(t.off_grid_flags[k]));
            row.push(flag(t.infeasible_flags[k]));
            row.push(flag(t.diverged));
            w.write_record(&row)?;
        }
    }
    flush(w, path)
}

#[derive(Debug, Serialize)]
struct CompareResult {
    #[serde(flatten)]
    comparison: FieldComparison,
    symmetric_difference: usize,
    within_band: bool,
}

fn cmd_compare(a: &Path, b: &Path, out_dir: &Path, report: Option<PathBuf>) -> Result<(), CliError> {
    let fa = read_field(a)?;
    let fb = read_field(b)?;
    if fa.grid() != fb.grid() {
        return Err(CliError::ShapeMismatch(format!("{} and {} are on different grids", a.display(), b.display())));
    }
    let comparison = compare_fields(&fa, &fb)?;
    ensure_dir(out_dir)?;
    let grid = fa.grid();
    let n = grid.ndim();
    let mut r = Report::new(
        "compare",
        None,
        CompareResult {
            symmetric_difference: comparison.symmetric_difference(),
            within_band: comparison.within_band(),
            comparison,
        },
    )
    .input("a", a)?
    .input("b", b)?;
    if n >= 2 {
        // One projection per axis pair, through the middle of the remaining axes.
        for i in 0..n {
            for j in i + 1..n {
                let fixed: Vec<f64> =
                    (0..n).filter(|k| *k != i && *k != j).map(|k| 0.5 * (grid.lo()[k] + grid.hi()[k])).collect();
                for (tag, f) in [("a", &fa), ("b", &fb)] {
                    let s = slice(f, [i, j], &fixed)?;
                    let path = out_dir.join(format!("compare_{i}_{j}_{tag}.csv"));
                    write_polylines(&zero_contours(&s.field)?, [i, j], &path)?;
                    r = r.output(&format!("contour_{i}_{j}_{tag}"), &path);
                }
            }
        }
    }
    r.write(&report_path(report, out_dir, "compare"))
}

/// `curve,point,x{i},x{j}` rows.
fn write_polylines(lines: &[Vec<[f64; 2]>], dims: [usize; 2], path: &Path) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(["curve".to_string(), "point".to_string(), format!("x{}", dims[0]), format!("x{}", dims[1])])?;
    for (c, line) in lines.iter().enumerate() {
        for (k, p) in line.iter().enumerate() {
            w.write_record([c.to_string(), k.to_string(), p[0].to_string(), p[1].to_string()])?;
        }
    }
    flush(w, path)
}

fn cmd_epsilon(config: &Path, field: &Path, report: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, bytes) = RunConfig::load(config)?;
    let grid = cfg.grid()?;
    let d = cfg.dynamics()?;
    let h = read_field(field)?;
    check_grid(&grid, &h, field)?;
    let eps: EpsilonReport = measure_epsilon(&h, &*d, cfg.filter.gamma, &cfg.numerics, cfg.convergence.tol)?;
    ensure_dir(&cfg.output_dir)?;
    Report::new("epsilon", Some(&bytes), eps)
        .input("config", config)?
        .input("field", field)?
        .write(&report_path(report, &cfg.output_dir, "epsilon"))
}

#[derive(Debug, Serialize)]
struct ContourResult {
    dims: Vec<usize>,
    fixed: Vec<f64>,
    curves: usize,
    points: usize,
}

fn cmd_contours(
    field: &Path,
    dims: &[usize],
    fixed: &[f64],
    out_dir: &Path,
    report: Option<PathBuf>,
) -> Result<(), CliError> {
    let f = read_field(field)?;
    let dims: [usize; 2] = dims.try_into().map_err(|_| CliError::Config("--dims takes two axes".into()))?;
    let s = slice(&f, dims, fixed)?;
    let lines = zero_contours(&s.field)?;
    ensure_dir(out_dir)?;
    let [i, j] = dims;
    let slice_path = out_dir.join(format!("slice_{i}_{j}.csv"));
    let mut w = csv_writer(&slice_path)?;
    w.write_record([format!("x{i}"), format!("x{j}"), "value".to_string()])?;
    let g = s.field.grid();
    let mut index = vec![0usize; 2];
    let mut x = vec![0.0; 2];
    for v in s.field.values() {
        g.state_into(&index, &mut x);
        w.write_record([x[0].to_string(), x[1].to_string(), v.to_string()])?;
        g.advance(&mut index);
    }
    flush(w, &slice_path)?;
    let contour_path = out_dir.join(format!("contour_{i}_{j}.csv"));
    write_polylines(&lines, dims, &contour_path)?;
    let result = ContourResult {
        dims: dims.to_vec(),
        fixed: fixed.to_vec(),
        curves: lines.len(),
        points: lines.iter().map(Vec::len).sum(),
    };
    Report::new("contours", None, result)
        .input("field", field)?
        .output("slice", &slice_path)
        .output("contour", &contour_path)
        .write(&report_path(report, out_dir, "contours"))
}

#[derive(Debug, Serialize)]
struct ImportResult {
    cells: usize,
    mask: bool,
    /// Nonnegative values, or marked cells for a mask.
    positive_cells: usize,
}

/// Reads `x0..x{n-1},value` rows, one per grid cell in any order.
fn cmd_import(config: &Path, csv_path: &Path, out: &Path, as_mask: bool, report: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, bytes) = RunConfig::load(config)?;
    let grid = cfg.grid()?;
    let values = read_samples(&grid, csv_path)?;
    let meta = metadata(&cfg, "import");
    let positive_cells;
    if as_mask {
        let mask = CellMask::new(grid.clone(), values.iter().map(|v| *v != 0.0).collect())?;
        positive_cells = mask.count();
        FieldFile::from_mask(&mask, meta).save(out).map_err(|e| CliError::format(out, e))?;
    } else {
        let field = ScalarField::new(grid.clone(), values)?;
        positive_cells = field.count_nonnegative();
        write_field(&field, out, meta)?;
    }
    ensure_dir(&cfg.output_dir)?;
    Report::new("import", Some(&bytes), ImportResult { cells: grid.len(), mask: as_mask, positive_cells })
        .input("config", config)?
        .input("csv", csv_path)?
        .output("field", out)
        .write(&report_path(report, &cfg.output_dir, "import"))
}

fn read_samples(grid: &Arc<Grid>, path: &Path) -> Result<Vec<f64>, CliError> {
    let n = grid.ndim();
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let expected: Vec<String> = (0..n).map(|i| format!("x{i}")).chain(["value".to_string()]).collect();
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != expected {
        return Err(CliError::Input(format!("{}: header {header:?}, expected {expected:?}", path.display())));
    }
    let mut values = vec![f64::NAN; grid.len()];
    let mut seen = vec![false; grid.len()];
    let mut x = vec![0.0; n];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        let parse = |s: &str| {
            s.trim().parse::<f64>().map_err(|_| CliError::Input(format!("{}:{line}: bad number {s:?}", path.display())))
        };
        for (k, xi) in x.iter_mut().enumerate() {
            *xi = parse(&rec[k])?;
        }
        let index = grid.index_of(&x).map_err(|e| CliError::Input(format!("{}:{line}: {e}", path.display())))?;
        let snapped = grid.state_of(&index)?;
        let off = snapped.iter().zip(&x).zip(grid.spacing()).any(|((s, x), h)| (s - x).abs() > 1e-6 * h);
        if off {
            return Err(CliError::Input(format!("{}:{line}: {x:?} is not a grid cell", path.display())));
        }
        let flat = grid.flat_index(&index)?;
        if seen[flat] {
            return Err(CliError::Input(format!("{}:{line}: cell {index:?} given twice", path.display())));
        }
        seen[flat] = true;
        values[flat] = parse(&rec[n])?;
    }
    if let Some(flat) = seen.iter().position(|s| !s) {
        return Err(CliError::Input(format!("{}: no sample for cell {:?}", path.display(), grid.unravel(flat))));
    }
    Ok(values)
}

#[derive(Debug, Serialize)]
struct ExportResult {
    cells: usize,
    mask: bool,
}

fn cmd_export(field: &Path, out: &Path, report: Option<PathBuf>) -> Result<(), CliError> {
    let file = FieldFile::load(field).map_err(|e| CliError::format(field, e))?;
    let grid = file.grid.clone();
    let (values, mask): (Vec<f64>, bool) = match &file.payload {
        Payload::Values(v) => (v.clone(), false),
        Payload::Mask(m) => (m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(), true),
    };
    let mut w = csv_writer(out)?;
    let n = grid.ndim();
    let header: Vec<String> = (0..n).map(|i| format!("x{i}")).chain(["value".to_string()]).collect();
    w.write_record(&header)?;
    let mut index = vec![0usize; n];
    let mut x = vec![0.0; n];
    for v in &values {
        grid.state_into(&index, &mut x);
        let mut row: Vec<String> = x.iter().map(f64::to_string).collect();
        row.push(v.to_string());
        w.write_record(&row)?;
        grid.advance(&mut index);
    }
    flush(w, out)?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Report::new("export", None, ExportResult { cells: values.len(), mask })
        .input("field", field)?
        .output("csv", out)
        .write(&report_path(report, dir, "export"))
}

#[derive(Debug, Serialize)]
struct SynthResult {
    safe_cells_truth: usize,
    safe_cells_out: usize,
    max_change: f64,
}

fn cmd_synth(config: &Path, truth: &Path, out: &Path, report: Option<PathBuf>) -> Result<(), CliError> {
    let (cfg, bytes) = RunConfig::load(config)?;
    let spec = cfg.perturbation.clone().ok_or_else(|| CliError::Config("missing key `perturbation`".into()))?;
    let grid = cfg.grid()?;
    let t = read_field(truth)?;
    check_grid(&grid, &t, truth)?;
    let h = synth_almost_barrier(&t, &spec).map_err(|e| CliError::Config(e.to_string()))?;
    write_field(&h, out, metadata(&cfg, "synth"))?;
    let max_change = h.values().iter().zip(t.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure_dir(&cfg.output_dir)?;
    let result = SynthResult { safe_cells_truth: t.count_nonnegative(), safe_cells_out: h.count_nonnegative(), max_change };
    Report::new("synth", Some(&bytes), result)
        .input("config", config)?
        .input("truth", truth)?
        .output("field", out)
        .write(&report_path(report, &cfg.output_dir, "synth"))
}

#[derive(Debug, Serialize)]
struct ReconstructResult {
    no_zero_set: bool,
    primitives: usize,
}

fn cmd_reconstruct(field: &Path, out: &Path, report: Option<PathBuf>) -> Result<(), CliError> {
    let file = FieldFile::load(field).map_err(|e| CliError::format(field, e))?;
    let mut meta = file.metadata.clone();
    let f = file.into_field().map_err(|e| CliError::format(field, e))?;
    let r = signed_distance_reconstruct(&f);
    meta.insert("command".into(), "reconstruct".into());
    write_field(&r.field, out, meta)?;
    let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Report::new("reconstruct", None, ReconstructResult { no_zero_set: r.no_zero_set, primitives: r.primitives })
        .input("field", field)?
        .output("field", out)
        .write(&report_path(report, dir, "reconstruct"))
}
