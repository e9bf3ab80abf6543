//! Numerical checks of the entropy results on random tabular fixtures.
//!
//! Every suite draws its fixtures from a seed, so a reported violation can be
//! replayed from `(suite, seed, fixture)`.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndi_core::mdp::{single_state_mdp, SoftmaxPolicy, TabularMdp};
use ndi_core::occupancy::{
    conditional_action_entropy, conditional_state_entropy, coordinate_ascent, generalized_entropy,
    mutual_information, nwj_bound, occupancy_measure, optimal_critic_table, saelbo, saelbo_gradient_fd,
    saelbo_gradient_pg, CriticFamily, CriticTable, JointTable,
};

use crate::CliError;

pub const SUITES: [&str; 7] = [
    "lemma1",
    "lemma2",
    "theorem1",
    "nwj",
    "theorem2",
    "corollary1",
    "coordinate-ascent",
];

/// Truncation tolerance for the mutual-information sums.
const SUM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub fixture: usize,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub seed: u64,
    pub checks: usize,
    pub violations: Vec<Violation>,
    /// Known failures that are reported but do not fail the suite.
    pub expected_failures: Vec<String>,
    /// Largest observed slack or discrepancy, suite-specific.
    pub worst: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    fn new(suite: &'static str, seed: u64) -> Self {
        Self {
            suite,
            seed,
            checks: 0,
            violations: Vec::new(),
            expected_failures: Vec::new(),
            worst: 0.0,
            elapsed: Duration::ZERO,
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    fn expected_failure(&mut self, msg: String) {
        self.expected_failures.push(msg);
    }

    fn check(&mut self, fixture: usize, ok: bool, detail: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.violations.push(Violation {
                fixture,
                detail: detail(),
            });
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} seed={} checks={} violations={} worst={:.3e} time={:.2}s: {}",
            self.suite,
            self.seed,
            self.checks,
            self.violations.len(),
            self.worst,
            self.elapsed.as_secs_f64(),
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for v in &self.violations {
            writeln!(f, "  violation fixture={}: {}", v.fixture, v.detail)?;
        }
        for e in &self.expected_failures {
            writeln!(f, "  expected failure: {e}")?;
        }
        Ok(())
    }
}

/// Random MDP where each state's actions lead to distinct next states, with
/// a strictly positive start distribution.
pub fn random_injective_mdp<R: Rng + ?Sized>(rng: &mut R, ns: usize, na: usize, gamma: f64) -> TabularMdp {
    assert!(na <= ns, "injective dynamics need na <= ns");
    let mut transition = Vec::with_capacity(ns * na);
    for _ in 0..ns {
        let mut targets: Vec<usize> = (0..ns).collect();
        for i in 0..na {
            let j = rng.random_range(i..ns);
            targets.swap(i, j);
        }
        transition.extend_from_slice(&targets[..na]);
    }
    let mut p0: Vec<f64> = (0..ns).map(|_| rng.random::<f64>() + 0.05).collect();
    let z: f64 = p0.iter().sum();
    p0.iter_mut().for_each(|p| *p /= z);
    let head: f64 = p0[..ns - 1].iter().sum();
    p0[ns - 1] = 1.0 - head;
    TabularMdp::new(ns, na, transition, p0, vec![0.0; ns * na], gamma).expect("valid random mdp")
}

pub fn random_logits<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_policy<R: Rng + ?Sized>(rng: &mut R, ns: usize, na: usize, scale: f64) -> SoftmaxPolicy {
    SoftmaxPolicy::new(ns, na, random_logits(rng, ns * na, scale)).expect("finite logits")
}

fn random_critic<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> CriticTable {
    CriticTable::new(n, random_logits(rng, n * n, scale)).expect("finite critic")
}

/// Random `(ns, na, γ)` with `na <= ns`.
fn random_shape<R: Rng + ?Sized>(rng: &mut R, max_ns: usize, max_na: usize) -> (usize, usize, f64) {
    let ns = rng.random_range(1..=max_ns);
    let na = rng.random_range(1..=ns.min(max_na));
    (ns, na, rng.random_range(0.1..0.95))
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn timed(mut report: SuiteReport, start: Instant) -> SuiteReport {
    report.elapsed = start.elapsed();
    report
}

/// Concavity of the generalized entropy between vectors of equal mass.
pub fn lemma1(seed: u64, pairs: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("lemma1", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let d = rng.random_range(1..=32);
        let mass = rng.random_range(0.1..10.0);
        let mut draw = || {
            // Some exact zeros exercise the 0 ln 0 convention.
            let mut v: Vec<f64> = (0..d)
                .map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random::<f64>() })
                .collect();
            v[0] += 1e-3;
            let z: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x *= mass / z);
            v
        };
        let (p, q) = (draw(), draw());
        let lam: f64 = rng.random();
        let mix: Vec<f64> = p.iter().zip(&q).map(|(a, b)| lam * a + (1.0 - lam) * b).collect();
        let h = |v: &[f64]| generalized_entropy(v).expect("nonnegative entries");
        let gap = h(&mix) - (lam * h(&p) + (1.0 - lam) * h(&q));
        rep.worst = rep.worst.max(-gap);
        rep.check(i, gap >= -1e-12, || format!("d={d} mass={mass:.3} λ={lam:.3} gap={gap:e}"));
    }
    timed(rep, start)
}

/// `H(s_t | s_{t-1}) = H(a_{t-1} | s_{t-1})` under injective dynamics.
pub fn lemma2(seed: u64, mdps: usize, horizon: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("lemma2", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..mdps {
        let (ns, na, gamma) = random_shape(&mut rng, 10, 4);
        let mdp = random_injective_mdp(&mut rng, ns, na, gamma);
        let pol = random_policy(&mut rng, ns, na, 3.0);
        for t in 1..=horizon {
            let hs = conditional_state_entropy(&mdp, &pol, t).expect("valid fixture");
            let ha = conditional_action_entropy(&mdp, &pol, t).expect("valid fixture");
            let diff = (hs - ha).abs();
            rep.worst = rep.worst.max(diff);
            rep.check(i, diff < 1e-10, || format!("ns={ns} na={na} t={t}: {hs} vs {ha}"));
        }
    }
    timed(rep, start)
}

/// Corrected lower bound `H(ρ) >= H^f + C(γ)` on random triples, optimal
/// critic dominance, and the literal bound's failure on one state.
pub fn theorem1(seed: u64, triples: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("theorem1", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..triples {
        let (ns, na, gamma) = random_shape(&mut rng, 6, 3);
        let mdp = random_injective_mdp(&mut rng, ns, na, gamma);
        let pol = random_policy(&mut rng, ns, na, 2.0);
        let h = occupancy_measure(&mdp, &pol, 1e-12).expect("valid fixture").entropy();
        let critic = random_critic(&mut rng, ns, 2.0);
        let r = saelbo(&mdp, &pol, &CriticFamily::Fixed(critic), SUM_TOL).expect("valid fixture");
        let slack = h - r.corrected();
        rep.worst = rep.worst.max(-slack);
        rep.check(i, slack >= -1e-8, || {
            format!("ns={ns} na={na} γ={gamma:.3}: H={h} < H^f+C={}", r.corrected())
        });

        let best = saelbo(&mdp, &pol, &CriticFamily::Optimal, SUM_TOL).expect("valid fixture").saelbo;
        for k in 0..10 {
            let c = random_critic(&mut rng, ns, 3.0);
            let v = saelbo(&mdp, &pol, &CriticFamily::Fixed(c), SUM_TOL).expect("valid fixture").saelbo;
            rep.check(i, v <= best + 1e-10, || format!("random critic {k} gives {v} > optimal {best}"));
        }
    }
    let (h, hf) = literal_bound_fixture();
    if h < hf {
        rep.expected_failure(format!(
            "literal H(ρ) >= H^f on the 1-state γ=0.9 MDP: H(ρ)={h:.2}, H^f={hf:.2}; the C(γ) term closes the gap"
        ));
    }
    timed(rep, start)
}

/// `(H(ρ), H^f)` for the one-state, one-action MDP at `γ = 0.9`.
pub fn literal_bound_fixture() -> (f64, f64) {
    let mdp = single_state_mdp(0.9, 0.0);
    let pol = SoftmaxPolicy::uniform(1, 1);
    let h = occupancy_measure(&mdp, &pol, 1e-12).expect("fixture").entropy();
    let hf = saelbo(&mdp, &pol, &CriticFamily::Optimal, SUM_TOL).expect("fixture").saelbo;
    (h, hf)
}

/// `I_NWJ <= I` for random critics, with equality at the optimal critic.
pub fn nwj(seed: u64, pairs: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("nwj", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let n = rng.random_range(1..=6);
        let mut w: Vec<f64> = (0..n * n)
            .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random() })
            .collect();
        w[0] += 1e-3;
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        let joint = JointTable::new(n, w).expect("normalized joint");
        let scale = rng.random_range(0.1..5.0);
        let critic = random_critic(&mut rng, n, scale);
        let mi = mutual_information(&joint);
        let bound = nwj_bound(&joint, &critic).expect("finite critic");
        rep.worst = rep.worst.max(bound - mi);
        rep.check(i, bound <= mi + 1e-12, || format!("n={n}: NWJ {bound} > MI {mi}"));
        let at_opt = nwj_bound(&joint, &optimal_critic_table(&joint)).expect("optimal critic");
        rep.check(i, (at_opt - mi).abs() < 1e-9, || format!("n={n}: optimal NWJ {at_opt} vs MI {mi}"));
    }
    timed(rep, start)
}

/// Finite differences against the policy-gradient form of `∇H^f`.
pub fn theorem2(seed: u64, mdps: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("theorem2", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..mdps {
        let gamma = rng.random_range(0.5..0.9);
        let mdp = random_injective_mdp(&mut rng, 3, 2, gamma);
        let theta = random_logits(&mut rng, 6, 1.5);
        let fixed = CriticFamily::Fixed(random_critic(&mut rng, 3, 2.0));
        for (name, fam) in [("fixed", fixed), ("optimal", CriticFamily::Optimal)] {
            let fd = saelbo_gradient_fd(&mdp, &theta, &fam, 1e-5, SUM_TOL).expect("valid fixture");
            let pg = saelbo_gradient_pg(&mdp, &theta, &fam, SUM_TOL).expect("valid fixture");
            let err = rel_l2(&pg, &fd);
            rep.worst = rep.worst.max(err);
            rep.check(i, err < 1e-4, || format!("{name} critic γ={gamma:.3}: relative L2 {err:e}"));
        }
    }
    timed(rep, start)
}

/// `-KL(ρ_π‖ρ_E) >= J(π, log ρ_E) + H^f + C(γ)`.
pub fn corollary1(seed: u64, pairs: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("corollary1", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..pairs {
        let (ns, na, gamma) = random_shape(&mut rng, 6, 3);
        let mdp = random_injective_mdp(&mut rng, ns, na, gamma);
        let pol = random_policy(&mut rng, ns, na, 2.0);
        let expert = random_policy(&mut rng, ns, na, 3.0);
        let occ = occupancy_measure(&mdp, &pol, 1e-12).expect("valid fixture");
        let occ_e = occupancy_measure(&mdp, &expert, 1e-12).expect("valid fixture");
        let log_e: Vec<f64> = occ_e.values().iter().map(|r| r.ln()).collect();
        let j = occ.expectation(&log_e);
        let kl = ndi_core::occupancy::reverse_kl_occupancy(&occ, &occ_e).expect("shared support");
        let critic = random_critic(&mut rng, ns, 2.0);
        let r = saelbo(&mdp, &pol, &CriticFamily::Fixed(critic), SUM_TOL).expect("valid fixture");
        let slack = -kl - (j + r.corrected());
        rep.worst = rep.worst.max(-slack);
        rep.check(i, slack >= -1e-8, || {
            format!("ns={ns} na={na} γ={gamma:.3}: -KL={} < bound {}", -kl, j + r.corrected())
        });
    }
    timed(rep, start)
}

/// Alternating exact critic updates and policy steps never decrease `H^f`.
pub fn coordinate_ascent_suite(seed: u64, alternations: usize) -> SuiteReport {
    let start = Instant::now();
    let mut rep = SuiteReport::new("coordinate-ascent", seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mdp = random_injective_mdp(&mut rng, 4, 2, 0.8);
    let theta = random_logits(&mut rng, 8, 1.0);
    let init = CriticFamily::Fixed(CriticTable::constant(4, 0.0));
    let trace = coordinate_ascent(&mdp, &theta, init, alternations, 0.5, SUM_TOL).expect("valid fixture");
    for (k, w) in trace.objective.windows(2).enumerate() {
        rep.worst = rep.worst.max(w[0] - w[1]);
        rep.check(k, w[1] >= w[0] - 1e-9, || format!("step {k}: {} -> {}", w[0], w[1]));
    }
    timed(rep, start)
}

/// Runs one suite, or every suite for `"all"`, at the default sizes.
pub fn run(suite: &str, seed: u64) -> Result<Vec<SuiteReport>, CliError> {
    let one = |name: &str| -> Result<SuiteReport, CliError> {
        Ok(match name {
            "lemma1" => lemma1(seed, 1000),
            "lemma2" => lemma2(seed, 20, 30),
            "theorem1" => theorem1(seed, 50),
            "nwj" => nwj(seed, 1000),
            "theorem2" => theorem2(seed, 5),
            "corollary1" => corollary1(seed, 50),
            "coordinate-ascent" => coordinate_ascent_suite(seed, 200),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown suite {other:?}; expected one of {} or all",
                    SUITES.join(", ")
                )))
            }
        })
    };
    if suite == "all" {
        SUITES.iter().map(|s| one(s)).collect()
    } else {
        Ok(vec![one(suite)?])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_injective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (ns, na, g) = random_shape(&mut rng, 10, 4);
            let mdp = random_injective_mdp(&mut rng, ns, na, g);
            assert!(ndi_core::mdp::check_injective_dynamics(&mdp));
            assert!(mdp.initial_dist().iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn literal_fixture_values() {
        let (h, hf) = literal_bound_fixture();
        assert!((h + 10.0 * 10f64.ln()).abs() < 1e-9);
        assert!(hf.abs() < 1e-12);
    }

    #[test]
    fn unknown_suite_is_usage_error() {
        assert_eq!(run("lemma9", 0).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn small_suites_pass() {
        assert!(lemma1(1, 50).passed());
        assert!(nwj(1, 50).passed());
        let t = theorem1(1, 3);
        assert!(t.passed());
        assert_eq!(t.expected_failures.len(), 1);
    }
}
