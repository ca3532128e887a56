//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use selection_bounds::constraints::{build_relaxed_constraint, solve_constrained_bounds, AuxConstraint, SolverOptions};
use selection_bounds::inference::upper_quantile;
use selection_bounds::lfp::solve_bounds;
use selection_bounds::parametric::{solve_parametric_bounds, ParametricFamily, SignConstraint};
use selection_bounds::simharness::{
    approximate_population, run_bias_experiment, run_power_experiment, run_sampling_distribution, ExperimentSpec,
    HistogramSpec, Population, PowerSpec,
};
use selection_bounds::{collapse_support, Error, Estimand, Exec, ObservationSet, SupportTable, WeightBox};
use selbounds::config::AnalysisConfig;
use selbounds::data::load_csv;
use selbounds::simulate::parse_spec;

const FIG1_SEED: u64 = 20240601;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_selbounds"))
}

fn simulate(spec: &Path, out: &Path, threads: Option<usize>) -> Duration {
    let start = Instant::now();
    let mut cmd = bin();
    if let Some(t) = threads {
        cmd.args(["--threads", &t.to_string()]);
    }
    let status = cmd
        .arg("simulate")
        .arg("--config")
        .arg(spec)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run selbounds");
    assert!(status.status.success(), "simulate failed: {}", String::from_utf8_lossy(&status.stderr));
    start.elapsed()
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            header.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

fn summary(dir: &Path) -> toml::Table {
    let text = std::fs::read_to_string(dir.join("manifest.toml")).unwrap();
    let doc: toml::Table = text.parse().unwrap();
    doc["summary"].as_table().unwrap().clone()
}

fn fig1_spec(body: &str) -> String {
    format!(
        "generator = \"std_normal_mean\"\nn_population = 1000000\nalpha = 0.05\nseed = {FIG1_SEED}\n{body}\n[box]\na = 0.1\nb = 1.0\n"
    )
}

struct Workdir {
    root: tempfile::TempDir,
}

impl Workdir {
    fn path(&self, name: &str) -> PathBuf {
        self.root.path().join(name)
    }

    fn write(&self, name: &str, text: &str) -> PathBuf {
        let p = self.path(name);
        std::fs::write(&p, text).unwrap();
        p
    }
}

fn library_spec(body: &str) -> ExperimentSpec {
    parse_spec(&fig1_spec(body)).unwrap()
}

fn criterion1(wd: &Workdir) -> Outcome {
    let text = fig1_spec("n_grid = [100]\nreplicates = 100\noutputs = [\"bias\"]");
    let spec = parse_spec(&text).unwrap();
    let start = Instant::now();
    let (lo, hi) = selection_bounds::simharness::approximate_population_interval(&spec).unwrap();
    let elapsed = start.elapsed();
    let path = wd.write("c1.spec", &text);
    simulate(&path, &wd.path("c1_a"), Some(1));
    let s = summary(&wd.path("c1_a"));
    let cli = (s["population_beta_lo"].as_float().unwrap(), s["population_beta_hi"].as_float().unwrap());
    let pass = (lo + 0.902).abs() <= 0.01 && (hi - 0.902).abs() <= 0.01 && elapsed.as_secs_f64() < 10.0 && cli == (lo, hi);
    Outcome::new(pass, format!("[{lo:.5}, {hi:.5}] in {:.2}s, cli [{:.5}, {:.5}]", elapsed.as_secs_f64(), cli.0, cli.1))
}

fn criterion2() -> Outcome {
    let t = SupportTable::from_probabilities(vec![1.0, 7.0, 10.0], vec![1.0; 3], vec![1.0 / 3.0; 3], 3).unwrap();
    let bx = WeightBox::from_weights(1.0, 2.0).unwrap();
    let ie = solve_bounds(&t, &bx).unwrap();
    let pass = ie.beta_hi == 7.0 && ie.degenerate_cells_hi.contains(&1);
    Outcome::new(pass, format!("beta_hi = {}, degenerate cells {:?}", ie.beta_hi, ie.degenerate_cells_hi))
}

fn vertex_oracle(f: &[f64], g: &[f64], p: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let k = f.len();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for mask in 0u32..(1 << k) {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..k {
            let w = if mask >> i & 1 == 1 { hi } else { lo };
            num += w * p[i] * f[i];
            den += w * p[i] * g[i];
        }
        min = min.min(num / den);
        max = max.max(num / den);
    }
    (min, max)
}

fn criterion3() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let mut solve_time = Duration::ZERO;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..500 {
        let k = rng.random_range(2..=12);
        let ties = rng.random_bool(0.3);
        let f: Vec<f64> = (0..k)
            .map(|_| {
                let v = rng.random_range(-5.0..5.0);
                if ties { f64::round(v) } else { v }
            })
            .collect();
        let g: Vec<f64> = (0..k).map(|_| if ties { 1.0 } else { rng.random_range(0.1..2.0) }).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let a = rng.random_range(0.05..0.9);
        let b = rng.random_range(a..=1.0);
        let t = SupportTable::from_probabilities(f.clone(), g.clone(), p.clone(), 100).unwrap();
        let bx = WeightBox::new(a, b).unwrap();
        let start = Instant::now();
        let ie = solve_bounds(&t, &bx).unwrap();
        solve_time += start.elapsed();
        let (lo, hi) = vertex_oracle(&f, &g, t.phat(), bx.lo(), bx.hi());
        let err = (ie.beta_lo - lo).abs().max((ie.beta_hi - hi).abs());
        worst = worst.max(err);
        if err >= 1e-10 {
            failures += 1;
        }
    }
    let secs = solve_time.as_secs_f64();
    Outcome::new(
        failures == 0 && secs < 5.0,
        format!("{failures}/500 mismatches, max error {worst:.2e}, {secs:.3}s"),
    )
}

fn population() -> &'static Population {
    static POP: std::sync::OnceLock<Population> = std::sync::OnceLock::new();
    POP.get_or_init(|| approximate_population(&library_spec("n_grid = [100]\nreplicates = 1000\noutputs = [\"bias\"]")).unwrap())
}

fn criterion4() -> Outcome {
    let spec = library_spec("n_grid = [100, 2000]\nreplicates = 1000\noutputs = [\"bias\"]");
    let start = Instant::now();
    let (t, _) = run_bias_experiment(&spec, population(), Exec::Parallel).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let col = |name: &str| t.numbers(name);
    let (bl, bh, sl, sh) = (col("mean_bias_lo"), col("mean_bias_hi"), col("mc_se_lo"), col("mc_se_hi"));
    let upward_hi = bh[0] > 3.0 * sh[0];
    let downward_lo = bl[0] < -3.0 * sl[0];
    let shrinks = bh[1].abs() < bh[0].abs() && bl[1].abs() < bl[0].abs();
    Outcome::new(
        upward_hi && downward_lo && shrinks && secs < 120.0,
        format!(
            "n=100: bias_lo {:+.4} (se {:.4}), bias_hi {:+.4} (se {:.4}); n=2000: bias_lo {:+.4}, bias_hi {:+.4}; {secs:.1}s",
            bl[0], sl[0], bh[0], sh[0], bl[1], bh[1]
        ),
    )
}

fn bundled_spec(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs").join(name)
}

fn criterion5(wd: &Workdir) -> Outcome {
    let spec = selbounds::simulate::load_spec(&bundled_spec("fig1.spec")).unwrap();
    let shape = spec.replicates == 1000 && spec.bootstrap.resamples == 500 && spec.n_grid.contains(&2000);
    let elapsed = simulate(&bundled_spec("fig1.spec"), &wd.path("c5_a"), Some(1));
    let rows = read_csv(&wd.path("c5_a").join("coverage.csv"));
    let cov = |m: &str| num(rows.iter().find(|r| r["method"] == m && r["n"] == "2000").unwrap(), "coverage");
    let (asym, boot) = (cov("asymptotic"), cov("bootstrap"));
    let ok = |c: f64| (0.93..=0.97).contains(&c);
    Outcome::new(
        shape && ok(asym) && ok(boot) && elapsed.as_secs_f64() < 1200.0,
        format!("n=2000: asymptotic {asym:.3}, bootstrap {boot:.3}; full fig1 run {:.1}s", elapsed.as_secs_f64()),
    )
}

fn criterion6() -> Outcome {
    let mut spec = library_spec("n_grid = [100]\nreplicates = 1000\noutputs = [\"power\"]");
    spec.power = PowerSpec { n: 100, ..PowerSpec::default() };
    let grid = spec.power.beta_tilde.clone();
    let t = run_power_experiment(&spec, population(), &grid, Exec::Parallel).unwrap();
    let rate = t.numbers("rejection_rate");
    let at = |b: f64| rate[grid.iter().position(|&x| (x - b).abs() < 1e-9).unwrap()];
    let (bl, bh) = (population().interval.beta_lo, population().interval.beta_hi);
    let right: Vec<f64> = grid.iter().zip(&rate).filter(|(b, _)| **b >= bh).map(|(_, r)| *r).collect();
    let left: Vec<f64> = grid.iter().zip(&rate).rev().filter(|(b, _)| **b <= bl).map(|(_, r)| *r).collect();
    let monotone = |v: &[f64]| v.windows(2).all(|w| w[1] >= w[0] - 0.03);
    let pass = at(0.0) <= 0.08 && at(-2.0) >= 0.9 && at(2.0) >= 0.9 && monotone(&right) && monotone(&left);
    Outcome::new(
        pass,
        format!("rate(0) {:.3}, rate(-2) {:.3}, rate(2) {:.3}, monotone outward {}", at(0.0), at(-2.0), at(2.0), monotone(&right) && monotone(&left)),
    )
}

fn criterion7() -> Outcome {
    let mut spec = library_spec("n_grid = [100]\nreplicates = 1000\noutputs = [\"histogram\"]");
    spec.histogram = HistogramSpec { n: 100, replicates: 2000, ..HistogramSpec::default() };
    let s = run_sampling_distribution(&spec, population(), 100, Exec::Parallel).unwrap();
    Outcome::new(
        s.ks_distance < 0.08,
        format!("KS {:.4} against N({:.4}, {:.4}^2)", s.ks_distance, s.fitted_mean, s.fitted_sd),
    )
}

fn consim_spec() -> PathBuf {
    bundled_spec("consim.spec")
}

fn criterion8(wd: &Workdir) -> Outcome {
    let elapsed = simulate(&consim_spec(), &wd.path("c8_a"), Some(1));
    let dir = wd.path("c8_a");
    let cov = read_csv(&dir.join("coverage.csv"));
    let t3 = num(cov.iter().find(|r| r["method"] == "theorem3").unwrap(), "coverage");
    let narrower = summary(&dir)["narrower_fraction"].as_float().unwrap();
    let widths: Vec<f64> = read_csv(&dir.join("width_vs_split.csv"))
        .iter()
        .filter(|r| r["kind"] == "constrained")
        .map(|r| num(r, "mean_width"))
        .collect();
    let argmin = (0..widths.len()).min_by(|&a, &b| widths[a].total_cmp(&widths[b])).unwrap();
    let interior = widths.len() == 10 && argmin > 0 && argmin + 1 < widths.len();
    Outcome::new(
        t3 >= 0.95 && narrower >= 0.99 && interior,
        format!(
            "theorem-3 coverage {t3:.3}, narrower {narrower:.3}, width minimum at split {}/{}, {:.1}s",
            argmin + 1,
            widths.len(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Extremes of the ratio over a grid on the first `K - 1` inclusion
/// probabilities, with the last weight solved exactly on the constraint.
fn constrained_grid_oracle(
    f: &[f64],
    g: &[f64],
    p: &[f64],
    u: &[f64],
    c: f64,
    a: f64,
    b: f64,
) -> Option<(f64, f64)> {
    let k = f.len();
    let (lo, hi) = (1.0 / b, 1.0 / a);
    let steps = ((b - a) / 1e-3).round() as usize;
    let pis: Vec<f64> = (0..=steps).map(|i| a + (b - a) * i as f64 / steps as f64).collect();
    let c2 = c * c;
    let last = k - 1;
    let scale: f64 = (0..k).map(|i| p[i] * (u[i] * hi).powi(2)).sum::<f64>().max(1e-300);
    let mut best: Option<(f64, f64)> = None;
    let mut idx = vec![0usize; last];
    loop {
        let (mut num, mut den, mut m, mut s) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..last {
            let w = 1.0 / pis[idx[i]];
            num += w * p[i] * f[i];
            den += w * p[i] * g[i];
            m += w * p[i] * u[i];
            s += w * w * p[i] * u[i] * u[i];
        }
        let (pu, pu2) = (p[last] * u[last], p[last] * u[last] * u[last]);
        let q2 = (1.0 + c2) * pu * pu - c2 * pu2;
        let q1 = 2.0 * (1.0 + c2) * m * pu;
        let q0 = (1.0 + c2) * m * m - c2 * s;
        let mut cands = vec![lo, hi];
        if q2.abs() > 1e-300 {
            let disc = q1 * q1 - 4.0 * q2 * q0;
            if disc >= 0.0 {
                cands.push((-q1 + disc.sqrt()) / (2.0 * q2));
                cands.push((-q1 - disc.sqrt()) / (2.0 * q2));
            }
        } else if q1 != 0.0 {
            cands.push(-q0 / q1);
        }
        for w in cands {
            if !(lo..=hi).contains(&w) {
                continue;
            }
            let gval = q2 * w * w + q1 * w + q0;
            if gval > 1e-12 * scale {
                continue;
            }
            let r = (num + w * p[last] * f[last]) / (den + w * p[last] * g[last]);
            best = Some(best.map_or((r, r), |(l, h)| (l.min(r), h.max(r))));
        }
        let mut d = 0;
        while d < last {
            idx[d] += 1;
            if idx[d] <= steps {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
        if d == last {
            return best;
        }
    }
}

fn criterion9() -> Outcome {
    let mut rng = StdRng::seed_from_u64(9);
    let (alpha1, alpha2) = (0.02, 0.03);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut infeasible = 0;
    for inst in 0..50 {
        let k = [2, 3, 4][inst % 3];
        let (a, b) = if k == 4 { (0.1, 0.3) } else { (0.2, 1.0) };
        let mut rows = Vec::new();
        let mut cells = std::collections::BTreeSet::new();
        while cells.len() < k {
            let q = f64::from(rng.random_range(0u8..=4)) / 4.0;
            let y = f64::from(rng.random_range(-3i8..=3));
            cells.insert(((q * 4.0) as i64, y as i64));
        }
        for &(q, y) in &cells {
            for _ in 0..rng.random_range(3..30) {
                rows.push(vec![q as f64 / 4.0, y as f64]);
            }
        }
        let obs = ObservationSet::from_rows(vec!["q".into(), "y".into()], &rows).unwrap();
        let table = collapse_support(&obs, &Estimand::mean(1)).unwrap();
        let qs: Vec<f64> = (0..k).map(|i| table.point(i)[0]).collect();
        let qmin = qs.iter().cloned().fold(f64::INFINITY, f64::min);
        let qmax = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let qbar = qmin + rng.random_range(0.1..0.9) * (qmax - qmin);
        let cons = [AuxConstraint::covariate_mean(0, qbar, alpha1)];
        let bx = WeightBox::new(a, b).unwrap();
        let c = upper_quantile(alpha1 / 2.0).unwrap() / (table.n() as f64).sqrt();
        let relaxed = build_relaxed_constraint(&cons[0], &table, &bx, table.n()).unwrap();
        assert!((relaxed.c - c).abs() < 1e-12 * c, "relaxation constant {} vs {c}", relaxed.c);
        let u: Vec<f64> = qs.iter().map(|q| q - qbar).collect();
        let oracle = constrained_grid_oracle(table.f(), table.g(), table.phat(), &u, c, a, b);
        let solved = solve_constrained_bounds(&table, &bx, &cons, alpha1, alpha2, &SolverOptions::default());
        match (oracle, solved) {
            (None, Err(Error::InfeasibleConstraints)) => infeasible += 1,
            (Some((lo, hi)), Ok(ci)) => {
                let err = (ci.beta_lo - lo).abs().max((ci.beta_hi - hi).abs());
                worst = worst.max(err);
                if err >= 2e-3 {
                    failures.push(format!("#{inst} K={k}: [{}, {}] vs grid [{lo}, {hi}]", ci.beta_lo, ci.beta_hi));
                }
            }
            (o, s) => failures.push(format!("#{inst} K={k}: grid {o:?} vs solver {:?}", s.map(|c| (c.beta_lo, c.beta_hi)))),
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!("max error {worst:.2e}, {infeasible} jointly infeasible, failures {failures:?}"),
    )
}

struct ParamInstance {
    obs: ObservationSet,
    est: Estimand,
    cols: Vec<usize>,
}

fn param_instance(rng: &mut StdRng, d: usize) -> ParamInstance {
    let n = rng.random_range(30..70);
    let iv = rng.random_bool(0.5);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let z = f64::from(rng.random_bool(0.5));
            let x = f64::from(rng.random_bool(0.25 + 0.5 * z));
            let s1: f64 = rng.random_range(-1.0..1.0);
            let s2: f64 = rng.random_range(-1.0..1.0);
            let y = if iv { f64::from(rng.random_bool(0.3 + 0.3 * x)) } else { s1 + rng.random_range(-1.0..1.0) };
            vec![z, x, y, s1, s2]
        })
        .collect();
    let names = ["z", "x", "y", "s1", "s2"].iter().map(|s| s.to_string()).collect();
    let obs = ObservationSet::from_rows(names, &rows).unwrap();
    let est = if iv { Estimand::iv(0, 1, 2) } else { Estimand::mean(2) };
    ParamInstance { obs, est, cols: (3..3 + d).collect() }
}

/// Ratio over the logit family on a grid of slope directions, radii and
/// intercepts covering the feasible set, refined by compass search.
fn parametric_grid_oracle(inst: &ParamInstance, a: f64, b: f64) -> (f64, f64) {
    let (lower, upper) = ((1.0 / b - 1.0).ln(), (1.0 / a - 1.0).ln());
    let s: Vec<Vec<f64>> = inst.obs.rows().map(|r| inst.cols.iter().map(|&c| r[c]).collect()).collect();
    let fg: Vec<(f64, f64)> = inst.obs.rows().map(|r| (inst.est.f(r), inst.est.g(r))).collect();
    let d = inst.cols.len();
    let ratio = |alpha: &[f64]| -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for (si, &(f, g)) in s.iter().zip(&fg) {
            let idx = alpha[0] + (0..d).map(|j| alpha[j + 1] * si[j]).sum::<f64>();
            if idx < lower - 1e-12 || idx > upper + 1e-12 {
                return None;
            }
            let w = 1.0 + idx.exp();
            num += w * f;
            den += w * g;
        }
        Some(num / den)
    };
    let directions: Vec<Vec<f64>> = if d == 1 {
        vec![vec![1.0]]
    } else {
        (0..180).map(|i| {
            let th = std::f64::consts::PI * i as f64 / 180.0;
            vec![th.cos(), th.sin()]
        }).collect()
    };
    let (nr, na) = if d == 1 { (600, 600) } else { (100, 100) };
    let mut best_lo = (f64::INFINITY, Vec::new());
    let mut best_hi = (f64::NEG_INFINITY, Vec::new());
    for dir in &directions {
        let proj: Vec<f64> = s.iter().map(|si| (0..d).map(|j| dir[j] * si[j]).sum()).collect();
        let spread = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let rmax = if spread > 0.0 { (upper - lower) / spread } else { 0.0 };
        for i in 0..=nr {
            let r = -rmax + 2.0 * rmax * i as f64 / nr as f64;
            let slope: Vec<f64> = dir.iter().map(|v| r * v).collect();
            let sp: Vec<f64> = proj.iter().map(|p| r * p).collect();
            let a0_lo = lower - sp.iter().cloned().fold(f64::INFINITY, f64::min);
            let a0_hi = upper - sp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if a0_lo > a0_hi {
                continue;
            }
            for j in 0..=na {
                let a0 = a0_lo + (a0_hi - a0_lo) * j as f64 / na as f64;
                let mut alpha = vec![a0];
                alpha.extend(&slope);
                if let Some(v) = ratio(&alpha) {
                    if v < best_lo.0 {
                        best_lo = (v, alpha.clone());
                    }
                    if v > best_hi.0 {
                        best_hi = (v, alpha);
                    }
                }
            }
        }
    }
    let refine = |(mut val, mut x): (f64, Vec<f64>), sign: f64| -> f64 {
        let mut h = 0.05;
        while h > 1e-7 {
            let mut moved = false;
            for coord in 0..x.len() {
                for step in [h, -h] {
                    let mut y = x.clone();
                    y[coord] += step;
                    if let Some(v) = ratio(&y) {
                        if sign * v > sign * val {
                            (val, x, moved) = (v, y, true);
                        }
                    }
                }
            }
            if !moved {
                h *= 0.5;
            }
        }
        val
    };
    (refine(best_lo, -1.0), refine(best_hi, 1.0))
}

fn criterion10() -> Outcome {
    let mut rng = StdRng::seed_from_u64(10);
    let signs = [SignConstraint::Free, SignConstraint::NonNegative, SignConstraint::NonPositive];
    let mut worst_excess = 0.0f64;
    let mut contained = 0;
    for _ in 0..200 {
        let d = rng.random_range(1..=2);
        let inst = param_instance(&mut rng, d);
        let a = rng.random_range(0.05..0.5);
        let b = if rng.random_bool(0.3) { 1.0 } else { rng.random_range(a + 0.1..1.0) };
        let bx = WeightBox::new(a, b).unwrap();
        let names: Vec<String> = inst.cols.iter().map(|&c| inst.obs.names()[c].clone()).collect();
        let fam = ParametricFamily::logit(names).with_signs((0..d).map(|_| signs[rng.random_range(0..3)]).collect());
        let pi = solve_parametric_bounds(&inst.obs, &inst.est, &bx, &fam).unwrap();
        let np = solve_bounds(&collapse_support(&inst.obs, &inst.est).unwrap(), &bx).unwrap();
        let excess = (np.beta_lo - pi.beta_lo).max(pi.beta_hi - np.beta_hi).max(0.0);
        worst_excess = worst_excess.max(excess);
        if excess <= 1e-6 && pi.beta_lo <= pi.beta_hi {
            contained += 1;
        }
    }
    let mut worst_grid = 0.0f64;
    for i in 0..30 {
        let d = if i < 20 { 1 } else { 2 };
        let inst = param_instance(&mut rng, d);
        let a = rng.random_range(0.05..0.4);
        let b = rng.random_range(0.6..0.95);
        let bx = WeightBox::new(a, b).unwrap();
        let names: Vec<String> = inst.cols.iter().map(|&c| inst.obs.names()[c].clone()).collect();
        let pi = solve_parametric_bounds(&inst.obs, &inst.est, &bx, &ParametricFamily::logit(names)).unwrap();
        let (glo, ghi) = parametric_grid_oracle(&inst, a, b);
        worst_grid = worst_grid.max((pi.beta_lo - glo).abs()).max((pi.beta_hi - ghi).abs());
    }
    Outcome::new(
        contained == 200 && worst_grid < 5e-3,
        format!("{contained}/200 contained (max excess {worst_excess:.1e}), grid max error {worst_grid:.2e}"),
    )
}

fn criterion11(wd: &Workdir) -> Outcome {
    let mut rng = StdRng::seed_from_u64(11);
    let mut csv_text = String::from("id,z,x,y,q,s\n");
    for i in 0..1500 {
        let z = u8::from(rng.random_bool(0.5));
        let q = u8::from(rng.random_bool(0.4));
        let x = u8::from(rng.random_bool(0.2 + 0.5 * f64::from(z)));
        let y = u8::from(rng.random_bool(0.3 + 0.2 * f64::from(x) + 0.1 * f64::from(q)));
        let s = u8::from(rng.random_bool(0.5));
        csv_text.push_str(&format!("{i},{z},{x},{y},{q},{s}\n"));
    }
    let data = wd.write("iv.csv", &csv_text);
    let config_text = r#"
seed = 7
test_values = [0.0, 0.3, 1.0]

[estimand]
kind = "iv"
z = "z"
x = "x"
y = "y"

[box]
a = 0.3
b = 1.0

[bootstrap]
resamples = 200

[constraints]
convention = "coverage"
alpha1 = 0.98
alpha2 = 0.97
items = [
  { kind = "response_rate", r = 0.9 },
  { kind = "covariate_mean", column = "q", qbar = 0.45 },
  { kind = "linear_moment", coefficients = { s = 1.0 }, intercept = -0.55 },
]

[parametric]
columns = ["q", "s"]
signs = ["non_negative", "free"]
"#;
    let config = wd.write("iv.toml", config_text);
    let out = wd.path("c11");
    let run = bin()
        .args(["analyze", "--config"])
        .arg(&config)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    if !run.status.success() {
        return Outcome::new(false, format!("analyze failed: {}", String::from_utf8_lossy(&run.stderr)));
    }
    let json_text = std::fs::read_to_string(out.join("report.json")).unwrap();
    let text_ok = std::fs::read_to_string(out.join("report.txt")).map(|t| !t.is_empty()).unwrap_or(false);
    let r: serde_json::Value = serde_json::from_str(&json_text).unwrap();
    let f = |v: &serde_json::Value| v.as_f64().unwrap();
    let un = &r["unconstrained"];
    let (ulo, uhi) = (f(&un["beta_lo"]), f(&un["beta_hi"]));
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let point = f(&r["point"]["estimate"]);
    checks.push(("point inside interval", ulo <= point && point <= uhi));
    checks.push(("asymptotic CI covers interval", f(&un["ci"]["c_lo"]) <= ulo && f(&un["ci"]["c_hi"]) >= uhi));
    checks.push(("bootstrap CI ordered", f(&un["bootstrap"]["c_lo"]) < f(&un["bootstrap"]["c_hi"])));
    checks.push((
        "p-values in [0, 1]",
        un["p_values"].as_array().unwrap().iter().all(|p| (0.0..=1.0).contains(&f(&p["p"]))),
    ));
    let co = &r["constrained"];
    let (clo, chi) = (f(&co["beta_lo"]), f(&co["beta_hi"]));
    checks.push(("three constraints", co["constraints"].as_array().unwrap().len() == 3));
    checks.push(("constrained inside unconstrained", clo >= ulo - 1e-6 && chi <= uhi + 1e-6 && clo <= chi));
    checks.push(("theorem-3 CI covers", f(&co["theorem3_ci"]["c_lo"]) <= clo && f(&co["theorem3_ci"]["c_hi"]) >= chi));
    checks.push(("KKT residual", f(&co["best_kkt_residual"]) <= 1e-4));
    checks.push((
        "constraints satisfied",
        co["feasibility_slacks"].as_array().unwrap().iter().all(|s| f(s) >= -1e-8),
    ));
    let pa = &r["parametric"];
    let (plo, phi) = (f(&pa["beta_lo"]), f(&pa["beta_hi"]));
    checks.push(("parametric inside unconstrained", plo >= ulo - 1e-6 && phi <= uhi + 1e-6 && plo <= phi));
    checks.push(("text report written", text_ok));
    let cfg = AnalysisConfig::load(&config).unwrap();
    let obs = load_csv(&data, &cfg.columns()).unwrap();
    let library = selbounds::analysis::run_analysis(&cfg, obs, Exec::Sequential).unwrap();
    checks.push(("report equals library call", library.to_json() == json_text));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome::new(
        failed.is_empty(),
        format!(
            "interval [{ulo:.4}, {uhi:.4}], constrained [{clo:.4}, {chi:.4}], parametric [{plo:.4}, {phi:.4}], failed checks {failed:?}"
        ),
    )
}

fn same_files(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for name in &names {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).map_err(|e| e.to_string())?);
        if x != y {
            return Err(format!("{} differs", name.to_string_lossy()));
        }
    }
    Ok(names.len())
}

fn criterion12(wd: &Workdir) -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for (tag, spec) in [("c1", wd.path("c1.spec")), ("c5", bundled_spec("fig1.spec")), ("c8", consim_spec())] {
        let (a, b) = (wd.path(&format!("{tag}_a")), wd.path(&format!("{tag}_b")));
        if !a.exists() {
            pass = false;
            details.push(format!("{tag}: first run missing"));
            continue;
        }
        simulate(&spec, &b, None);
        match same_files(&a, &b) {
            Ok(n) => details.push(format!("{tag}: {n} files identical")),
            Err(e) => {
                pass = false;
                details.push(format!("{tag}: {e}"));
            }
        }
    }
    Outcome::new(pass, details.join(", "))
}

#[test]
fn acceptance() {
    let wd = Workdir { root: tempfile::tempdir().unwrap() };
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("population interval", Box::new(|| criterion1(&wd))),
        ("degenerate maximizer", Box::new(criterion2)),
        ("vertex oracle", Box::new(criterion3)),
        ("bias direction", Box::new(criterion4)),
        ("CI coverage", Box::new(|| criterion5(&wd))),
        ("power curve", Box::new(criterion6)),
        ("sampling distribution", Box::new(criterion7)),
        ("constraint simulation", Box::new(|| criterion8(&wd))),
        ("constrained-solver oracle", Box::new(criterion9)),
        ("parametric containment", Box::new(criterion10)),
        ("IV analysis smoke test", Box::new(|| criterion11(&wd))),
        ("determinism", Box::new(|| criterion12(&wd))),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run())).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        report(&format!(
            "criterion {:>2} {verdict} {name}: {} ({:.1}s)",
            i + 1,
            outcome.detail,
            start.elapsed().as_secs_f64()
        ));
        if !outcome.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
