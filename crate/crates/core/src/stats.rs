//! Trials-to-bug campaigns and the statistics used to compare strategies:
//! Kaplan–Meier survival curves with right-censoring, the two-group
//! log-rank test, and a Pearson chi-square uniformity test.
//!
//! p-values go through a hand-rolled regularized incomplete gamma so that
//! results are bit-stable across platforms and the crate stays free of
//! numerics dependencies.

use serde::{Deserialize, Serialize};

use crate::algos::StrategyConfig;
use crate::model::Program;
use crate::sched::{run_controlled, Outcome, SchedParams};
use crate::util::trial_seed;

/// One campaign observation: the 1-based index of the first bug-finding
/// trial, or `max_trials` with `censored` set when no trial found the bug.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtbObservation {
    pub value: u64,
    pub censored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: u64,
    pub seed: u64,
    pub outcome: String,
    pub found: bool,
}

/// Runs up to `max_trials` independent trials (per-trial seed derived from
/// `meta_seed`) and reports when the first bug or deadlock surfaced.
/// Deadlocks count as found bugs: they are bugs of the input program.
pub fn trials_to_bug(
    program: &Program,
    cfg: &StrategyConfig,
    params: &SchedParams,
    max_trials: u64,
    meta_seed: u64,
) -> (TtbObservation, Vec<TrialRecord>) {
    let mut records = Vec::new();
    for i in 1..=max_trials {
        let seed = trial_seed(meta_seed, i);
        let run_cfg = StrategyConfig {
            rng_seed: seed,
            ..*cfg
        };
        let (_, outcome) = run_controlled(program, &run_cfg, params);
        let found = matches!(outcome, Outcome::Bug(_) | Outcome::Deadlock(_));
        records.push(TrialRecord {
            trial: i,
            seed,
            outcome: outcome.label().to_string(),
            found,
        });
        if found {
            return (
                TtbObservation {
                    value: i,
                    censored: false,
                },
                records,
            );
        }
    }
    (
        TtbObservation {
            value: max_trials,
            censored: true,
        },
        records,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KmPoint {
    pub t: u64,
    pub n_at_risk: u64,
    pub events: u64,
    pub survival: f64,
}

/// Kaplan–Meier product-limit estimator over right-censored observations.
/// One point per distinct event time.
pub fn km_curve(obs: &[TtbObservation]) -> Vec<KmPoint> {
    let mut event_times: Vec<u64> = obs
        .iter()
        .filter(|o| !o.censored)
        .map(|o| o.value)
        .collect();
    event_times.sort_unstable();
    event_times.dedup();
    let mut points = Vec::new();
    let mut survival = 1.0f64;
    for &t in &event_times {
        let n_at_risk = obs.iter().filter(|o| o.value >= t).count() as u64;
        let events = obs
            .iter()
            .filter(|o| !o.censored && o.value == t)
            .count() as u64;
        if n_at_risk == 0 {
            continue;
        }
        survival *= 1.0 - events as f64 / n_at_risk as f64;
        points.push(KmPoint {
            t,
            n_at_risk,
            events,
            survival,
        });
    }
    points
}

/// Smallest event time where survival drops to 0.5 or below.
pub fn km_median(points: &[KmPoint]) -> Option<u64> {
    points.iter().find(|p| p.survival <= 0.5).map(|p| p.t)
}

pub fn km_csv(points: &[KmPoint]) -> String {
    let mut out = String::from("t,n_at_risk,events,survival\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{:.6}\n",
            p.t, p.n_at_risk, p.events, p.survival
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub dof: u64,
    pub p_value: f64,
}

/// Two-group log-rank test (1 degree of freedom).
pub fn logrank(a: &[TtbObservation], b: &[TtbObservation]) -> TestResult {
    let mut times: Vec<u64> = a
        .iter()
        .chain(b)
        .filter(|o| !o.censored)
        .map(|o| o.value)
        .collect();
    times.sort_unstable();
    times.dedup();
    let mut obs_minus_exp = 0.0f64;
    let mut variance = 0.0f64;
    for &t in &times {
        let n1 = a.iter().filter(|o| o.value >= t).count() as f64;
        let n2 = b.iter().filter(|o| o.value >= t).count() as f64;
        let d1 = a.iter().filter(|o| !o.censored && o.value == t).count() as f64;
        let d2 = b.iter().filter(|o| !o.censored && o.value == t).count() as f64;
        let n = n1 + n2;
        let d = d1 + d2;
        if n < 2.0 || d == 0.0 {
            continue;
        }
        obs_minus_exp += d1 - d * n1 / n;
        variance += d * (n1 / n) * (n2 / n) * (n - d) / (n - 1.0);
    }
    let statistic = if variance > 0.0 {
        obs_minus_exp * obs_minus_exp / variance
    } else {
        0.0
    };
    TestResult {
        statistic,
        dof: 1,
        p_value: chi2_sf(statistic, 1),
    }
}

/// Pearson chi-square goodness-of-fit against the uniform distribution over
/// `counts.len()` cells.
pub fn chi_square_uniform(counts: &[u64]) -> TestResult {
    let k = counts.len();
    assert!(k >= 2, "need at least two cells");
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / k as f64;
    let statistic: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = (k - 1) as u64;
    TestResult {
        statistic,
        dof,
        p_value: chi2_sf(statistic, dof),
    }
}

/// Chi-square survival function: P(X > x) with `dof` degrees of freedom.
pub fn chi2_sf(x: f64, dof: u64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    1.0 - gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Lanczos ln-gamma (g = 7, n = 9), |error| < 1e-13 on the positive axis.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x): series expansion for
/// x < a + 1, Lentz's continued fraction otherwise.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series: P(a,x) = x^a e^-x / Gamma(a) * sum x^n / (a)_{n+1}.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (a * x.ln() - x - ln_gamma(a)).exp()
    } else {
        // Continued fraction for Q(a,x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (a * x.ln() - x - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(value: u64) -> TtbObservation {
        TtbObservation {
            value,
            censored: false,
        }
    }

    fn cens(value: u64) -> TtbObservation {
        TtbObservation {
            value,
            censored: true,
        }
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn chi2_sf_known_quantiles() {
        // Textbook critical values.
        assert!((chi2_sf(3.841, 1) - 0.05).abs() < 5e-4);
        assert!((chi2_sf(6.635, 1) - 0.01).abs() < 5e-4);
        assert!((chi2_sf(5.991, 2) - 0.05).abs() < 5e-4);
        assert!((chi2_sf(16.919, 9) - 0.05).abs() < 5e-4);
        assert_eq!(chi2_sf(0.0, 3), 1.0);
    }

    #[test]
    fn gamma_p_monotone_in_x() {
        let mut prev = 0.0;
        for i in 1..50 {
            let v = gamma_p(2.5, i as f64 * 0.3);
            assert!(v >= prev);
            prev = v;
        }
        assert!(prev > 0.999);
    }

    #[test]
    fn km_textbook_example() {
        // Times 1, 2 (event), 3 (censored), 4 (event) on 4 subjects.
        let obs = [ev(1), ev(2), cens(3), ev(4)];
        let pts = km_curve(&obs);
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0], KmPoint { t: 1, n_at_risk: 4, events: 1, survival: 0.75 });
        assert_eq!(pts[1].survival, 0.5);
        // After censoring, 1 at risk at t=4.
        assert_eq!(pts[2].n_at_risk, 1);
        assert_eq!(pts[2].survival, 0.0);
        assert_eq!(km_median(&pts), Some(2));
    }

    #[test]
    fn km_all_censored_stays_at_one() {
        let obs = [cens(10), cens(10), cens(10)];
        let pts = km_curve(&obs);
        assert!(pts.is_empty());
        assert_eq!(km_median(&pts), None);
    }

    #[test]
    fn km_csv_format() {
        let obs = [ev(1), ev(1)];
        let csv = km_csv(&km_curve(&obs));
        assert_eq!(csv, "t,n_at_risk,events,survival\n1,2,2,0.000000\n");
    }

    #[test]
    fn logrank_identical_groups_not_significant() {
        let a: Vec<_> = (1..=20).map(ev).collect();
        let b = a.clone();
        let r = logrank(&a, &b);
        assert!(r.statistic < 1e-9);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn logrank_separated_groups_significant() {
        let a: Vec<_> = (1..=20).map(ev).collect();
        let b: Vec<_> = (101..=120).map(ev).collect();
        let r = logrank(&a, &b);
        assert!(r.p_value < 0.001, "p = {}", r.p_value);
    }

    #[test]
    fn logrank_handles_censoring() {
        let a: Vec<_> = (1..=10).map(ev).collect();
        let b: Vec<_> = (1..=10).map(|_| cens(100)).collect();
        let r = logrank(&a, &b);
        assert!(r.p_value < 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn chi_square_uniform_exact() {
        let r = chi_square_uniform(&[10, 10, 10]);
        assert!(r.statistic.abs() < 1e-12);
        assert!(r.p_value > 0.999);
        let r = chi_square_uniform(&[5, 15]);
        assert!((r.statistic - 5.0).abs() < 1e-12);
        assert!((r.p_value - 0.02535).abs() < 5e-4);
    }

    #[test]
    fn trials_to_bug_on_planted_race() {
        use crate::algos::{StrategyConfig, StrategyKind};
        use crate::model::parse_program;
        // `a` nulls the pointer main dereferences; only a preemption between
        // spawn and deref surfaces it.
        let src = "object p 2\nobject t 9\n\
            thread main:\n spawn a\n deref p r0\n join a\n exit\n\
            thread a:\n store p 0\n exit\n";
        let p = parse_program(src).unwrap();
        let cfg = StrategyConfig::new(StrategyKind::Rw, 0);
        let (obs, recs) = trials_to_bug(&p, &cfg, &SchedParams::default(), 200, 42);
        assert!(!obs.censored);
        assert_eq!(recs.len() as u64, obs.value);
        assert!(recs.last().unwrap().found);
        // Deterministic in the meta seed.
        let (obs2, _) = trials_to_bug(&p, &cfg, &SchedParams::default(), 200, 42);
        assert_eq!(obs, obs2);
    }
}
