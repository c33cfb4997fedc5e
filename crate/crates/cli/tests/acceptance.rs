//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 4 and 5 fit the full model with default sampler settings and take
//! minutes. Set `NSUM_ACCEPTANCE_ONLY=1,2,3` to run a subset.
//!
//! The target reports rather than gates: it exits 0 after printing the FAIL
//! lines unless `NSUM_ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use nsum_core::diagnostics::{mare, split_rhat};
use nsum_core::estimator::{self, format_headline, scale_draws, standard_nsum, KnownPrevalence, Summary};
use nsum_core::model::{nb_log_pmf, HyperConfig, Layout, NsumModel};
use nsum_core::rng;
use nsum_core::sampler::{sample, LogDensity, PosteriorDraws, SamplerConfig};
use nsum_core::simulator::{
    balanced_assignment, draw_true_params, run_simulation_study, simulate_ard, FitModel, SimTemplate, StudyConfig,
};
use nsum_testkit::{central_gradient, mean_var, poisson_gamma_ln_pmf};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng::stream(2024, &[1]);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let (rn, kn, mn) = (r.random_range(1..=8), r.random_range(1..=4), r.random_range(1..=3));
        let munis: Vec<usize> = (0..rn).map(|_| r.random_range(0..mn)).collect();
        let counts: Vec<Vec<u32>> = (0..rn)
            .map(|_| (0..kn).map(|_| r.random_range(0..40)).collect())
            .collect();
        let model = NsumModel::new(kn, mn, munis, &counts, HyperConfig::default()).unwrap();
        let theta: Vec<f64> = (0..model.layout().dim()).map(|_| r.random_range(-1.5..1.5)).collect();
        let analytic = model.grad_log_posterior(&theta).unwrap();
        let fd = central_gradient(|t| model.log_posterior(t).unwrap(), &theta, 1e-5);
        for (a, f) in analytic.iter().zip(&fd) {
            worst = worst.max((a - f).abs() / f.abs().max(1.0));
        }
    }
    let el = t0.elapsed();
    outcome(
        worst < 1e-5 && el < Duration::from_secs(10),
        format!("max relative error {worst:.2e} over 25 instances, {:.2}s", secs(el)),
    )
}

fn distribution_correctness() -> Outcome {
    let t0 = Instant::now();
    let ws = [0.0105, 0.3, 1.0, 2.0, 33.86];
    let mus = [0.0271, 0.5, 1.0, 5.4438, 50.0];
    let ys = [0u32, 1, 2, 3, 5, 10, 20, 50];
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for &w in &ws {
        for &mu in &mus {
            for &y in &ys {
                let ours = nb_log_pmf(y, mu, w).unwrap();
                let oracle = poisson_gamma_ln_pmf(y as u64, mu, w);
                worst = worst.max((ours - oracle).abs());
                n += 1;
            }
        }
    }
    let el = t0.elapsed();
    outcome(
        n == 200 && worst < 1e-8 && el < Duration::from_secs(10),
        format!("{n} grid points, max |log error| {worst:.2e}, {:.2}s", secs(el)),
    )
}

struct StdNormal(usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut lp = 0.0;
        for (g, &t) in grad.iter_mut().zip(theta) {
            *g = -t;
            lp -= 0.5 * t * t;
        }
        lp
    }
}

struct LogGamma;

impl LogDensity for LogGamma {
    fn dim(&self) -> usize {
        1
    }
    fn logp_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let u = theta[0];
        grad[0] = 3.0 - 2.0 * u.exp();
        3.0 * u - 2.0 * u.exp()
    }
    fn constrain_into(&self, theta: &[f64], out: &mut [f64]) {
        out[0] = theta[0].exp();
    }
}

fn pooled(draws: &PosteriorDraws, j: usize) -> (f64, f64) {
    let all: Vec<f64> = draws.param_chains(j).concat();
    let (m, v) = mean_var(&all);
    (m, v.sqrt())
}

fn sampler_calibration() -> Outcome {
    let t0 = Instant::now();
    let cfg = SamplerConfig {
        iterations: 3000,
        warmup: 1000,
        seed: 7,
        ..SamplerConfig::default()
    };
    let mut worst_mean: f64 = 0.0;
    let mut worst_sd: f64 = 0.0;
    let mut worst_rhat: f64 = 0.0;
    let normal = sample(&StdNormal(10), &cfg).unwrap();
    for j in 0..10 {
        let (m, s) = pooled(&normal, j);
        worst_mean = worst_mean.max(m.abs());
        worst_sd = worst_sd.max((s - 1.0).abs());
        worst_rhat = worst_rhat.max(split_rhat(&normal.param_chains(j)).unwrap());
    }
    let gamma = sample(&LogGamma, &cfg).unwrap();
    let (m, s) = pooled(&gamma, 0);
    worst_mean = worst_mean.max((m - 1.5).abs());
    worst_sd = worst_sd.max((s - 3f64.sqrt() / 2.0).abs());
    worst_rhat = worst_rhat.max(split_rhat(&gamma.param_chains(0)).unwrap());
    let el = t0.elapsed();
    outcome(
        worst_mean <= 0.05 && worst_sd <= 0.05 && worst_rhat < 1.05 && el < Duration::from_secs(120),
        format!(
            "max |mean error| {worst_mean:.3}, max |sd error| {worst_sd:.3}, max split R-hat {worst_rhat:.3}, {:.1}s",
            secs(el)
        ),
    )
}

fn parameter_recovery() -> Outcome {
    let t0 = Instant::now();
    let seed = 11;
    let template = SimTemplate::default();
    let assignment = balanced_assignment(20, 100);
    let truth = draw_true_params(&template, 20, assignment.len(), seed).unwrap();
    let data = simulate_ard(&truth, &assignment, seed).unwrap();
    let model = NsumModel::from_dataset(&data, HyperConfig::default()).unwrap();
    let cfg = SamplerConfig {
        seed,
        ..SamplerConfig::default()
    };
    let draws = sample(&model, &cfg).unwrap();
    let known = KnownPrevalence::from_metadata(data.metadata()).unwrap();
    let scaled = scale_draws(&draws, &known).unwrap();
    let table = estimator::estimates_from_draws(&scaled, data.municipalities()).unwrap();
    let sizes = truth.true_sizes();
    let unknown: Vec<usize> = (template.n_known..template.mu_rho.len()).collect();
    let (mut covered, mut cells) = (0, 0);
    for &k in &unknown {
        for (m, &n) in sizes[k].iter().enumerate() {
            let s = table.cell(k, m).summary;
            cells += 1;
            covered += (s.q025 <= n && n <= s.q975) as usize;
        }
    }
    let coverage = covered as f64 / cells as f64;
    let pooled = mare(&table.medians(), &sizes, &unknown).unwrap().overall;
    let standard = mare(&standard_nsum(&data).unwrap().as_grid(), &sizes, &unknown)
        .unwrap()
        .overall;
    let el = t0.elapsed();
    outcome(
        coverage >= 0.85 && pooled <= 0.35 && el < Duration::from_secs(30 * 60),
        format!(
            "coverage {covered}/{cells} ({:.0}%), pooled MARE {pooled:.3} (standard {standard:.3}), {} divergences, {:.0}s",
            100.0 * coverage,
            draws.divergences(),
            secs(el)
        ),
    )
}

fn iqr(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    estimator::quantile_sorted(&v, 0.75) - estimator::quantile_sorted(&v, 0.25)
}

fn pooling_dominance() -> Outcome {
    let t0 = Instant::now();
    let cfg = StudyConfig {
        sizes: vec![10, 30, 100],
        replicates: 5,
        municipalities: 20,
        template: SimTemplate::default(),
        sampler: SamplerConfig::default(),
        hyper: HyperConfig::default(),
        seed: 5,
    };
    let result = run_simulation_study(&cfg).unwrap();
    let mut by_cell: BTreeMap<(usize, usize), [f64; 2]> = BTreeMap::new();
    for row in &result.rows {
        let slot = by_cell.entry((row.size, row.replicate)).or_insert([f64::NAN; 2]);
        slot[(row.model == FitModel::Standard) as usize] = row.mare;
    }
    let large: Vec<&[f64; 2]> = by_cell.iter().filter(|((s, _), _)| *s >= 30).map(|(_, v)| v).collect();
    let wins = large.iter().filter(|v| v[0] < v[1]).count();
    let win_rate = wins as f64 / large.len().max(1) as f64;
    let (iqr_pooled, iqr_standard) = (
        iqr(result.mares(100, FitModel::Pooled)),
        iqr(result.mares(100, FitModel::Standard)),
    );
    let medians: Vec<String> = cfg
        .sizes
        .iter()
        .map(|&s| {
            let med = |m| {
                let mut v = result.mares(s, m);
                v.sort_by(f64::total_cmp);
                estimator::quantile_sorted(&v, 0.5)
            };
            format!("n={s}: {:.3}/{:.3}", med(FitModel::Pooled), med(FitModel::Standard))
        })
        .collect();
    let el = t0.elapsed();
    outcome(
        result.failures.is_empty()
            && large.len() == 10
            && win_rate >= 0.9
            && iqr_pooled < iqr_standard
            && el < Duration::from_secs(2 * 3600),
        format!(
            "pooled wins {wins}/{} cells at n>=30, IQR at n=100 {iqr_pooled:.3} vs {iqr_standard:.3}, median MARE pooled/standard {}, {} failed fits, {:.0}s",
            large.len(),
            medians.join(", "),
            result.failures.len(),
            secs(el)
        ),
    )
}

fn scaling_correctness() -> Outcome {
    let (kn, mn, t_n) = (3, 4, 50);
    let layout = Layout::new(kn, mn, 0);
    let mut r = rng::stream(99, &[6]);
    let known = KnownPrevalence::new(
        (0..mn)
            .flat_map(|m| [(0, m, r.random_range(0.001..0.2)), (1, m, r.random_range(0.001..0.2))])
            .collect(),
    )
    .unwrap();
    let rho: Vec<f64> = (0..t_n * kn * mn).map(|_| r.random_range(0.5..9.0)).collect();
    let mut a = rho.clone();
    estimator::scale_rho(layout, t_n, &mut a, &known).unwrap();
    let mut worst_gm: f64 = 0.0;
    for row in a.chunks(kn * mn) {
        let log_ratio: f64 = known
            .cells()
            .iter()
            .map(|&(k, m, p)| -row[k * mn + m] - p.ln())
            .sum::<f64>()
            / known.cells().len() as f64;
        worst_gm = worst_gm.max((log_ratio.exp() - 1.0).abs());
    }
    let mut worst_shift: f64 = 0.0;
    for u in [-2.5, 0.75, 4.0] {
        let mut b: Vec<f64> = rho.iter().map(|v| v + u).collect();
        estimator::scale_rho(layout, t_n, &mut b, &known).unwrap();
        for (x, y) in a.iter().zip(&b) {
            worst_shift = worst_shift.max((x - y).abs());
        }
    }
    outcome(
        worst_gm < 1e-10 && worst_shift < 1e-12,
        format!("max |geometric mean - 1| {worst_gm:.1e}, max shift discrepancy {worst_shift:.1e} (floating-point rounding only)"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    nsum_cli::main_with_args(std::iter::once("nsum").chain(args.iter().copied()))
}

fn compare_dirs(a: &Path, b: &Path) -> Result<usize, String> {
    let mut names: Vec<_> = fs::read_dir(a)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for name in &names {
        let (x, y) = (fs::read(a.join(name)), fs::read(b.join(name)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => {}
            _ => return Err(format!("{} differs", name.to_string_lossy())),
        }
    }
    let n_b = fs::read_dir(b).map_err(|e| e.to_string())?.count();
    if n_b != names.len() {
        return Err(format!("{} files vs {n_b}", names.len()));
    }
    Ok(names.len())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>)> = vec![
        (
            "simulate",
            vec!["simulate", "--municipalities", "4", "--respondents", "12", "--seed", "3", "--out", &p("sim")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "fit",
            [
                "fit", "--ard", &p("sim/ard.csv"), "--meta", &p("sim/meta.json"), "--iters", "200", "--warmup",
                "100", "--seed", "4", "--trace", "sigma_delta", "--out", &p("fit"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "estimate",
            ["estimate", "--draws", &p("fit/draws.bin"), "--meta", &p("sim/meta.json"), "--out", &p("est")]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "study",
            [
                "study", "--sizes", "5,8", "--replicates", "2", "--municipalities", "3", "--iters", "120",
                "--warmup", "60", "--seed", "9", "--out", &p("study"),
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];
    let mut files = 0;
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        if run_cli(&args) != 0 {
            return outcome(false, format!("{name} failed"));
        }
        let out = args.last().unwrap();
        let replay = format!("{out}_replay");
        let manifest = format!("{out}/manifest.json");
        if run_cli(&["replay", "--manifest", &manifest, "--out", &replay]) != 0 {
            return outcome(false, format!("replay of {name} failed"));
        }
        match compare_dirs(Path::new(out), Path::new(&replay)) {
            Ok(n) => files += n,
            Err(e) => return outcome(false, format!("{name}: {e}")),
        }
    }
    outcome(true, format!("4 commands replayed, {files} files byte-identical"))
}

fn headline_format() -> Outcome {
    let s = Summary {
        mean: 5400.0,
        median: 5042.0,
        q025: 1998.0,
        q975: 11810.0,
    };
    let text = format_headline(&s);
    outcome(
        text == "5,042 [95% CI (1998, 11810)]",
        format!("report format renders `{text}`; survey figures themselves are not reproducible without the data"),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("NSUM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    type Check = fn() -> Outcome;
    let criteria: [(usize, &str, Check); 8] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "distribution correctness", distribution_correctness),
        (3, "sampler calibration", sampler_calibration),
        (4, "parameter recovery", parameter_recovery),
        (5, "pooling dominance", pooling_dominance),
        (6, "scaling correctness", scaling_correctness),
        (7, "determinism", determinism),
        (8, "headline report format", headline_format),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let o = check();
        failed += !o.pass as usize;
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        if std::env::var("NSUM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
