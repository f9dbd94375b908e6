//! Multi-seed repetition and unpaired significance testing.
//!
//! The Student-t distribution function is evaluated through the regularized
//! incomplete beta function, `P(|T| > t) = I_{df/(df+t²)}(df/2, 1/2)`, with
//! the continued fraction evaluated by the modified Lentz method.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BETA_CF_EPS: f64 = 1e-15;
const BETA_CF_MAX_ITER: usize = 10_000;

/// Lanczos approximation (g = 7, 9 terms) of ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
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
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_CF_EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// P(T > |t|) + P(T < -|t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    inc_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Distribution function of Student's t.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * student_t_two_sided(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Mean, sample standard deviation (n − 1 denominator) and the raw values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    /// `None` when n = 1.
    pub sd: Option<f64>,
    pub values: Vec<f64>,
}

pub fn summarize(values: &[f64]) -> Result<SampleSummary> {
    if values.is_empty() {
        return Err(Error::Contract("cannot summarize an empty sample".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    });
    Ok(SampleSummary {
        n,
        mean,
        sd,
        values: values.to_vec(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    #[default]
    TwoSided,
    /// Alternative: mean(a) < mean(b).
    Less,
    /// Alternative: mean(a) > mean(b).
    Greater,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: f64,
    pub p_value: f64,
}

/// Mean and unbiased variance of `values - pivot`.
fn centered_moments(values: &[f64], pivot: f64) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().map(|v| v - pivot).sum::<f64>() / n;
    let ss: f64 = values
        .iter()
        .map(|v| (v - pivot - m) * (v - pivot - m))
        .sum();
    (m, ss / (n - 1.0))
}

/// Unpaired two-sample t-test without assuming equal variances, two-sided.
pub fn welch_t_test(a: &SampleSummary, b: &SampleSummary) -> Result<TTestResult> {
    welch_t_test_tail(a, b, Tail::TwoSided)
}

/// Welch's t-test with the chosen alternative.
///
/// Both samples are centered on a shared pivot (the smaller of the two first
/// values) before the moments are taken, so swapping the samples negates `t`
/// exactly and exactly representable shifts or power-of-two scalings leave
/// `t`, `df` and `p` bit-identical.
pub fn welch_t_test_tail(a: &SampleSummary, b: &SampleSummary, tail: Tail) -> Result<TTestResult> {
    if a.n < 2 || b.n < 2 || a.values.len() != a.n || b.values.len() != b.n {
        return Err(Error::Contract(format!(
            "welch t-test needs at least two values per sample, got {} and {}",
            a.n, b.n
        )));
    }
    let pivot = a.values[0].min(b.values[0]);
    let (ma, va) = centered_moments(&a.values, pivot);
    let (mb, vb) = centered_moments(&b.values, pivot);
    let (na, nb) = (a.n as f64, b.n as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    let diff = ma - mb;
    let (t, df) = if se2 > 0.0 {
        let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
        (diff / se2.sqrt(), df)
    } else {
        // Both samples constant.
        let t = if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        (t, na + nb - 2.0)
    };
    let two_sided = student_t_two_sided(t, df);
    let p = match tail {
        Tail::TwoSided => two_sided,
        Tail::Less if t < 0.0 => 0.5 * two_sided,
        Tail::Greater if t > 0.0 => 0.5 * two_sided,
        _ => 1.0 - 0.5 * two_sided,
    };
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!(
            "spearman needs two equal-length samples of size >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (
        rx.iter().sum::<f64>() / rx.len() as f64,
        ry.iter().sum::<f64>() / ry.len() as f64,
    );
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Result of one seeded run inside [`repeat_runs`].
#[derive(Debug)]
pub struct SeedOutcome<T> {
    pub seed: u64,
    pub result: Result<T>,
}

/// Runs `run(seed)` once per seed, on up to `jobs` threads. Failures are
/// kept per seed; the output order matches `seeds`.
pub fn repeat_runs<T, F>(seeds: &[u64], jobs: usize, run: F) -> Result<Vec<SeedOutcome<T>>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!(
            "seeds must be distinct, got {seeds:?}"
        )));
    }
    let slots: Vec<Mutex<Option<Result<T>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, seeds.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = seeds.get(i) else { break };
                let out = run(seed);
                *slots[i].lock().unwrap() = Some(out);
            });
        }
    });
    Ok(seeds
        .iter()
        .zip(slots)
        .map(|(&seed, slot)| SeedOutcome {
            seed,
            result: slot.into_inner().unwrap().expect("every seed ran"),
        })
        .collect())
}

/// One row of a comparison report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub summary: SampleSummary,
    /// Seeds whose run failed and are missing from `summary`.
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub method_a: String,
    pub method_b: String,
    pub result: Option<TTestResult>,
}

pub fn comparison_csv(rows: &[MethodSummary]) -> String {
    let mut out = String::from("method,n,mean_err,sd_err\n");
    for r in rows {
        let sd = r
            .summary
            .sd
            .map_or_else(|| "NA".to_string(), |s| s.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.method, r.summary.n, r.summary.mean, sd
        );
    }
    out
}

pub fn tests_csv(tests: &[PairwiseTest]) -> String {
    let mut out = String::from("method_a,method_b,t,df,p\n");
    for t in tests {
        match &t.result {
            Some(r) => {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    t.method_a, t.method_b, r.t_statistic, r.degrees_of_freedom, r.p_value
                );
            }
            None => {
                let _ = writeln!(out, "{},{},NA,NA,NA", t.method_a, t.method_b);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
    }

    #[test]
    fn inc_beta_closed_forms() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a.
        for x in [0.1, 0.5, 0.9] {
            assert!((inc_beta(1.0, 1.0, x) - x).abs() < 1e-14);
            assert!((inc_beta(3.0, 1.0, x) - x.powi(3)).abs() < 1e-14);
        }
    }

    #[test]
    fn cauchy_cdf() {
        // df = 1 is the Cauchy distribution.
        for t in [-3.0, -0.5, 0.0, 1.0, 7.0f64] {
            let exact = 0.5 + t.atan() / std::f64::consts::PI;
            assert!((student_t_cdf(t, 1.0) - exact).abs() < 1e-13, "t={t}");
        }
    }

    #[test]
    fn summaries() {
        let s = summarize(&[5.0, 5.0, 5.0]).unwrap();
        assert_eq!((s.mean, s.sd), (5.0, Some(0.0)));
        let s = summarize(&[0.0, 10.0]).unwrap();
        assert_eq!(s.mean, 5.0);
        assert!((s.sd.unwrap() - 50f64.sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[3.0]).unwrap().sd, None);
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn null_and_separated_cases() {
        let a = summarize(&[1.0, 2.0, 4.0, 7.0]).unwrap();
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.t_statistic, r.p_value), (0.0, 1.0));
        let b = summarize(&[101.0, 101.001, 100.999, 101.0005]).unwrap();
        let near = summarize(&[1.0, 1.001, 0.999, 1.0002]).unwrap();
        assert!(welch_t_test(&near, &b).unwrap().p_value < 1e-6);
        let one = summarize(&[1.0]).unwrap();
        assert!(matches!(welch_t_test(&one, &a), Err(Error::Contract(_))));
    }

    #[test]
    fn one_sided_tails() {
        let a = summarize(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let b = summarize(&[2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let two = welch_t_test(&a, &b).unwrap().p_value;
        let less = welch_t_test_tail(&a, &b, Tail::Less).unwrap().p_value;
        let greater = welch_t_test_tail(&a, &b, Tail::Greater).unwrap().p_value;
        assert!((less - two / 2.0).abs() < 1e-15);
        assert!((less + greater - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn repeat_runs_keeps_order_and_failures() {
        let seeds = [5, 3, 9, 1];
        for jobs in [1, 3] {
            let out = repeat_runs(&seeds, jobs, |s| {
                if s == 9 {
                    Err(Error::Numeric("boom".into()))
                } else {
                    Ok(s * 2)
                }
            })
            .unwrap();
            let got: Vec<(u64, Option<u64>)> = out
                .iter()
                .map(|o| (o.seed, o.result.as_ref().ok().copied()))
                .collect();
            assert_eq!(
                got,
                vec![(5, Some(10)), (3, Some(6)), (9, None), (1, Some(2))]
            );
        }
        assert!(repeat_runs(&[1, 1], 1, Ok).is_err());
    }
}
