//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line.
//!
//! Criteria listed in [`KNOWN_FAILURES`] are strict expected failures: they
//! still print FAIL, and the process fails if one of them unexpectedly
//! passes or any other criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ndi_cli::commands::{self, EvalSummary, DEMOS_FILE, DENSITY_FILE};
use ndi_cli::config::ExperimentConfig;
use ndi_cli::verify::{self, SuiteReport};
use ndi_core::autodiff::{central_difference_gradient, Tensor};
use ndi_core::density::{
    ebm_fit, ebm_score, fd_hessian_vector_product, hutchinson_trace, made_fit, made_log_density, EbmConfig, EbmModel,
    MadeConfig,
};

/// Criterion number and the measured reason it is not met.
const KNOWN_FAILURES: [(usize, &str); 1] = [(
    10,
    "on grid-5x5 the MADE log q spans tens of nats, so λ_f r_f is negligible below λ_f ~ 5 and \
     0.005 vs 0.1 ties to ~1e-6 (README, Known limitations)",
)];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn suite(report: SuiteReport, budget: Option<Duration>) -> Outcome {
    let in_time = budget.is_none_or(|b| report.elapsed < b);
    let mut detail = format!(
        "{} checks, {} violations, worst {:.2e}, {:.2}s",
        report.checks,
        report.violations.len(),
        report.worst,
        report.elapsed.as_secs_f64()
    );
    if let Some(v) = report.violations.first() {
        detail.push_str(&format!("; first violation fixture {}: {}", v.fixture, v.detail));
    }
    outcome(report.passed() && in_time, detail)
}

fn c1_concavity() -> Outcome {
    suite(verify::lemma1(1, 1000), Some(Duration::from_secs(5)))
}

fn c2_conditional_entropies() -> Outcome {
    suite(verify::lemma2(2, 20, 30), Some(Duration::from_secs(10)))
}

fn c3_entropy_bound() -> Outcome {
    let report = verify::theorem1(3, 50);
    let (h, hf) = verify::literal_bound_fixture();
    let literal_fails = h < hf;
    let mut o = suite(report, None);
    o.detail.push_str(&format!(
        "; expected failure of the uncorrected bound on the 1-state γ=0.9 MDP: H(ρ)={h:.2} vs H^f={hf:.2} ({})",
        if literal_fails { "reproduced" } else { "NOT reproduced" }
    ));
    o.pass &= literal_fails && (h + 23.03).abs() < 0.01 && hf.abs() < 1e-9;
    o
}

fn c4_nwj() -> Outcome {
    suite(verify::nwj(4, 1000), None)
}

fn c5_gradient() -> Outcome {
    suite(verify::theorem2(5, 5), Some(Duration::from_secs(60)))
}

fn c6_kl_bound() -> Outcome {
    suite(verify::corollary1(6, 50), None)
}

const RHO: f64 = 0.8;

fn correlated(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (1.0 - RHO * RHO).sqrt();
    (0..n)
        .map(|_| {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            vec![a, RHO * a + c * b]
        })
        .collect()
}

fn true_log_density(x: &[f64]) -> f64 {
    let det = 1.0 - RHO * RHO;
    let q = (x[0] * x[0] - 2.0 * RHO * x[0] * x[1] + x[1] * x[1]) / det;
    -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln() - 0.5 * q
}

fn c7_made() -> Outcome {
    let start = Instant::now();
    let train = correlated(10_000, 71);
    let test = correlated(2_000, 72);
    let fit = made_fit(&train, &MadeConfig::default()).expect("fit");
    let jac = fit.model.standardizer.log_jacobian();
    let model = test.iter().map(|x| made_log_density(&fit.model, x) + jac).sum::<f64>() / test.len() as f64;
    let truth = test.iter().map(|x| true_log_density(x)).sum::<f64>() / test.len() as f64;
    let (first, second) = (fit.model.ordering[0], fit.model.ordering[1]);
    let mut sensitivity = 0.0f64;
    for x in test.iter().take(50) {
        let z = fit.model.standardizer.apply(x);
        let g = central_difference_gradient(
            |z| {
                let h = &fit.model.heads(z)[first];
                h.means.iter().chain(&h.log_scales).chain(&h.weights).sum()
            },
            &z,
            1e-5,
        );
        sensitivity = sensitivity.max(g[second].abs());
    }
    let elapsed = start.elapsed();
    outcome(
        (model - truth).abs() < 0.1 && sensitivity <= 1e-9 && elapsed < Duration::from_secs(120),
        format!(
            "held-out mean log density {model:.4} vs true {truth:.4} (gap {:.4}), mask sensitivity {sensitivity:.1e}, {:.1}s",
            (model - truth).abs(),
            elapsed.as_secs_f64()
        ),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn c8_ebm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let data: Vec<Vec<f64>> = (0..10_000)
        .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let fit = ebm_fit(&data, &EbmConfig::default()).expect("fit");
    let probe: Vec<Vec<f64>> = (0..500)
        .map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let mean_cos = probe
        .iter()
        .map(|x| cosine(&ebm_score(&fit.model, x), &x.iter().map(|v| -v).collect::<Vec<_>>()))
        .sum::<f64>()
        / probe.len() as f64;

    // 5-D quadratic with a random symmetric positive definite matrix.
    let d = 5;
    let m: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
        }
    }
    let b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let quad = EbmModel::quadratic(Tensor::from_vec(d, d, a.clone()), b, 0.3).expect("quadratic");
    let mut hvp_err = 0.0f64;
    for _ in 0..20 {
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let fd = fd_hessian_vector_product(&quad, &z, &v, 1e-4);
        for i in 0..d {
            let exact: f64 = (0..d).map(|j| a[i * d + j] * v[j]).sum();
            hvp_err = hvp_err.max((fd[i] - exact).abs());
        }
    }
    // Symmetry of the finite-difference Hessian on the trained network.
    let mut asym = 0.0f64;
    for _ in 0..20 {
        let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let hv = fd_hessian_vector_product(&fit.model, &z, &v, 1e-4);
        let hw = fd_hessian_vector_product(&fit.model, &z, &w, 1e-4);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        asym = asym.max((dot(&w, &hv) - dot(&v, &hw)).abs());
    }
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let (est, se) = hutchinson_trace(&quad, &z, 2000, 1e-4, &mut rng);
    outcome(
        mean_cos >= 0.95 && hvp_err < 1e-6 && asym < 1e-6 && (est - trace).abs() <= 3.0 * se,
        format!(
            "score cosine {mean_cos:.4}, quadratic HVP error {hvp_err:.1e}, network HVP asymmetry {asym:.1e}, \
             Hutchinson {est:.3} ± {se:.3} vs trace {trace:.3}"
        ),
    )
}

/// Demonstrations and density checkpoint for `seed` under `config`.
fn prepare(config: &ExperimentConfig) -> std::path::PathBuf {
    commands::gen_demos(config).expect("demos");
    let dir = Path::new(&config.out_dir);
    commands::fit_density(config, &dir.join(DEMOS_FILE)).expect("density");
    dir.join(DENSITY_FILE)
}

fn train_and_eval(config: &ExperimentConfig, density: &Path) -> EvalSummary {
    let out = commands::train(config, density).expect("train");
    let policy = &out.policies[0].1;
    commands::eval(config, &policy.to_string_lossy()).expect("eval")
}

fn grid_config(root: &Path, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        env: "grid-5x5".into(),
        seed,
        n_trajectories: 1,
        out_dir: root.join(format!("seed{seed}")).to_string_lossy().into_owned(),
        ..ExperimentConfig::default()
    }
}

fn c9_grid_imitation(root: &Path) -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let start = Instant::now();
        let config = grid_config(root, seed);
        let density = prepare(&config);
        let learned = train_and_eval(&config, &density);
        let uniform = commands::eval(&config, "uniform").expect("uniform");
        let expert = commands::eval(&config, "expert").expect("expert");
        let kl = learned.reverse_kl.expect("tabular");
        let kl_u = uniform.reverse_kl.expect("tabular");
        let elapsed = start.elapsed();
        let ok = kl <= 0.1 * kl_u
            && learned.env_return_mean >= 0.95 * expert.env_return_mean
            && elapsed < Duration::from_secs(300);
        pass &= ok;
        lines.push(format!(
            "seed {seed}: KL {kl:.3}/{kl_u:.3}={:.3}, return {:.3}/{:.3}, {:.2}s",
            kl / kl_u,
            learned.env_return_mean,
            expert.env_return_mean,
            elapsed.as_secs_f64()
        ));
    }
    outcome(pass, lines.join("; "))
}

const LAMBDA_F_GRID: [f64; 11] = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0];

fn mean_normalized_kl(root: &Path, seeds: &[u64], lambda_f: f64) -> f64 {
    seeds
        .iter()
        .map(|&seed| {
            let base = grid_config(root, seed);
            let density = Path::new(&base.out_dir).join(DENSITY_FILE);
            if !density.exists() {
                prepare(&base);
            }
            let config = ExperimentConfig { lambda_f, ..base };
            train_and_eval(&config, &density).normalized_kl
        })
        .sum::<f64>()
        / seeds.len() as f64
}

fn c10_lambda_f(root: &Path) -> Outcome {
    // Tune on held-out seeds, then compare on the evaluation seeds.
    let tuning: Vec<u64> = (100..105).collect();
    let eval: Vec<u64> = (0..5).collect();
    let sweep: Vec<(f64, f64)> = LAMBDA_F_GRID
        .iter()
        .map(|&l| (l, mean_normalized_kl(root, &tuning, l)))
        .collect();
    let (tuned, _) = sweep
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |best, (l, k)| if k < best.1 { (l, k) } else { best });
    let at_tuned = mean_normalized_kl(root, &eval, tuned);
    let at_20x = mean_normalized_kl(root, &eval, 20.0 * tuned);
    let default = ExperimentConfig::default().lambda_f;
    let lit_default = mean_normalized_kl(root, &eval, default);
    let lit_20x = mean_normalized_kl(root, &eval, 20.0 * default);
    let sweep_text: Vec<String> = sweep.iter().map(|(l, k)| format!("{l}:{k:.7}")).collect();
    outcome(
        at_20x > at_tuned,
        format!(
            "tuning sweep [{}] picks λ_f={tuned}; eval seeds mean normalized KL {at_tuned:.7} at λ_f={tuned} vs \
             {at_20x:.7} at λ_f={}; default λ_f={default} gives {lit_default:.7} vs {lit_20x:.7} at 20× (not scored)",
            sweep_text.join(" "),
            20.0 * tuned
        ),
    )
}

fn c11_coordinate_ascent() -> Outcome {
    suite(verify::coordinate_ascent_suite(11, 200), None)
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("occupancy entropy concavity", Box::new(c1_concavity)),
        ("conditional state/action entropy equality", Box::new(c2_conditional_entropies)),
        ("corrected occupancy entropy lower bound", Box::new(c3_entropy_bound)),
        ("NWJ bound", Box::new(c4_nwj)),
        ("entropy bound policy gradient", Box::new(c5_gradient)),
        ("reverse KL lower bound", Box::new(c6_kl_bound)),
        ("MADE density on correlated Gaussian", Box::new(c7_made)),
        ("EBM score, HVP and trace", Box::new(c8_ebm)),
        ("grid-5x5 one-trajectory imitation", Box::new(|| c9_grid_imitation(root.path()))),
        ("λ_f too large hurts", Box::new(|| c10_lambda_f(root.path()))),
        ("coordinate ascent monotone", Box::new(c11_coordinate_ascent)),
    ];
    let (mut passed, mut failed, mut known, mut unexpected) = (0, 0, 0, 0);
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        let o = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let known_reason = KNOWN_FAILURES.iter().find(|(k, _)| *k == id).map(|(_, r)| *r);
        let status = match (o.pass, known_reason) {
            (true, None) => {
                passed += 1;
                "PASS".to_string()
            }
            (true, Some(_)) => {
                passed += 1;
                unexpected += 1;
                "PASS (listed as a known failure; update KNOWN_FAILURES)".to_string()
            }
            (false, Some(reason)) => {
                failed += 1;
                known += 1;
                format!("FAIL (known: {reason})")
            }
            (false, None) => {
                failed += 1;
                unexpected += 1;
                "FAIL".to_string()
            }
        };
        println!("criterion {id:>2} {name}: {status} | {}", o.detail);
    }
    println!("acceptance: {passed} passed, {failed} failed ({known} known), {unexpected} unexpected");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
