//! Leave-one-out ranking metrics, teacher recovery and the one-sided
//! non-inferiority t-test.

use std::fmt;

use crate::catalog::{ItemId, PrefixTrie};
use crate::decode::{BeamRow, StepScorer};
use crate::error::{Error, Result};

/// 1 if `target` is among the first `k` items.
pub fn recall_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    match rank_of(ranked, target, k) {
        Some(_) => 1.0,
        None => 0.0,
    }
}

/// `1 / log2(rank + 1)` for a hit at 1-based `rank <= k`, else 0.
pub fn ndcg_at_k(ranked: &[ItemId], target: ItemId, k: usize) -> f64 {
    match rank_of(ranked, target, k) {
        Some(r) => 1.0 / ((r + 1) as f64).log2(),
        None => 0.0,
    }
}

fn rank_of(ranked: &[ItemId], target: ItemId, k: usize) -> Option<usize> {
    ranked.iter().take(k).position(|&i| i == target).map(|p| p + 1)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub recall5: f64,
    pub recall10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub samples: usize,
    /// Cases whose ranking came back empty (scored as misses).
    pub empty_rankings: usize,
    /// Teacher-forced top-1 accuracy per digit, when measured.
    pub per_digit_accuracy: Vec<f64>,
    /// NDCG@10 relative to the teacher, when known.
    pub recovery: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "recall@5,recall@10,ndcg@5,ndcg@10,samples,recovery";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.recall5,
            self.recall10,
            self.ndcg5,
            self.ndcg10,
            self.samples,
            self.recovery.map(|r| r.to_string()).unwrap_or_default()
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples     {}", self.samples)?;
        writeln!(f, "Recall@5    {:.4}", self.recall5)?;
        writeln!(f, "Recall@10   {:.4}", self.recall10)?;
        writeln!(f, "NDCG@5      {:.4}", self.ndcg5)?;
        write!(f, "NDCG@10     {:.4}", self.ndcg10)?;
        if let Some(r) = self.recovery {
            write!(f, "\nrecovery    {:.4}", r)?;
        }
        if !self.per_digit_accuracy.is_empty() {
            let acc: Vec<String> = self.per_digit_accuracy.iter().map(|a| format!("{a:.4}")).collect();
            write!(f, "\ndigit acc   {}", acc.join(" "))?;
        }
        Ok(())
    }
}

/// Running means over test cases.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sums: [f64; 4],
    n: usize,
    empty: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, ranked: &[ItemId], target: ItemId) {
        if ranked.is_empty() {
            self.empty += 1;
        }
        self.sums[0] += recall_at_k(ranked, target, 5);
        self.sums[1] += recall_at_k(ranked, target, 10);
        self.sums[2] += ndcg_at_k(ranked, target, 5);
        self.sums[3] += ndcg_at_k(ranked, target, 10);
        self.n += 1;
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn finish(&self) -> EvalReport {
        let d = self.n.max(1) as f64;
        if self.empty > 0 {
            log::warn!("{} of {} rankings were empty", self.empty, self.n);
        }
        EvalReport {
            recall5: self.sums[0] / d,
            recall10: self.sums[1] / d,
            ndcg5: self.sums[2] / d,
            ndcg10: self.sums[3] / d,
            samples: self.n,
            empty_rankings: self.empty,
            ..EvalReport::default()
        }
    }
}

/// Student NDCG@10 over teacher NDCG@10.
pub fn recovery_ratio(student: &EvalReport, teacher: &EvalReport) -> Result<f64> {
    if !(teacher.ndcg10 > 0.0) {
        return Err(Error::invalid("teacher NDCG@10 is zero; recovery undefined"));
    }
    Ok(student.ndcg10 / teacher.ndcg10)
}

/// Teacher-forced top-1 accuracy per digit. Row `i` of every step is case
/// `i` with its ground-truth prefix. With a trie, the argmax only ranges
/// over valid continuations. Ties go to the lower digit.
pub fn per_digit_accuracy(
    scorer: &mut dyn StepScorer,
    targets: &[&[u16]],
    l: usize,
    c: usize,
    trie: Option<&PrefixTrie>,
) -> Result<Vec<f64>> {
    let mut hits = vec![0usize; l];
    if targets.is_empty() {
        return Ok(vec![0.0; l]);
    }
    for t in 0..l {
        let rows: Vec<BeamRow> = targets
            .iter()
            .enumerate()
            .map(|(i, s)| BeamRow {
                user: i,
                parent: i,
                prefix: s[..t].to_vec(),
            })
            .collect();
        let out = scorer.step(t, &rows)?;
        for (i, s) in targets.iter().enumerate() {
            let row = &out.logits.row_slice(i)[out.offset..out.offset + c];
            let cands: Vec<u16> = match trie {
                Some(tr) => tr.valid_continuations(&s[..t])?,
                None => (0..c as u16).collect(),
            };
            let mut best = cands[0];
            for &d in &cands[1..] {
                if row[d as usize] > row[best as usize] {
                    best = d;
                }
            }
            if best == s[t] {
                hits[t] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / targets.len() as f64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTestInput {
    pub values: Vec<f64>,
    pub baseline: f64,
    /// Margin as a fraction of the baseline.
    pub margin: f64,
}

impl TTestInput {
    pub fn new(values: Vec<f64>, baseline: f64) -> Self {
        TTestInput {
            values,
            baseline,
            margin: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTestResult {
    pub mean: f64,
    pub sd: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub pass: bool,
}

/// One-sided test of `E[x - b] > -eps` with `eps = margin * b`.
pub fn noninferiority_test(input: &TTestInput) -> Result<TTestResult> {
    let n = input.values.len();
    if n < 2 {
        return Err(Error::invalid(format!("non-inferiority test needs n >= 2, got {n}")));
    }
    if !(input.baseline > 0.0) {
        return Err(Error::invalid("baseline must be positive"));
    }
    if !(input.margin >= 0.0) {
        return Err(Error::invalid("margin must be non-negative"));
    }
    let mean = input.values.iter().sum::<f64>() / n as f64;
    let var = input.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let diff = mean - input.baseline + input.margin * input.baseline;
    let df = n - 1;
    if sd == 0.0 {
        let (t, p) = if diff > 0.0 {
            (f64::INFINITY, 0.0)
        } else if diff < 0.0 {
            (f64::NEG_INFINITY, 1.0)
        } else {
            (0.0, 0.5)
        };
        return Ok(TTestResult {
            mean,
            sd,
            t,
            df,
            p,
            pass: diff > 0.0,
        });
    }
    let t = diff / (sd / (n as f64).sqrt());
    let p = student_t_sf(t, df as f64);
    Ok(TTestResult {
        mean,
        sd,
        t,
        df,
        p,
        pass: p < 0.05,
    })
}

/// `P(T > t)` for Student's t with `nu` degrees of freedom.
pub fn student_t_sf(t: f64, nu: f64) -> f64 {
    let x = nu / (nu + t * t);
    let tail = 0.5 * regularized_beta(x, nu / 2.0, 0.5);
    if t >= 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const G: [f64; 9] = [
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
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the continued fraction, using the symmetry relation
/// where it converges faster.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_and_three() {
        let r = [7, 3, 9, 1];
        assert_eq!(ndcg_at_k(&r, 7, 10), 1.0);
        assert_eq!(recall_at_k(&r, 7, 10), 1.0);
        assert!((ndcg_at_k(&r, 9, 10) - 0.5).abs() < 1e-15);
        assert_eq!(recall_at_k(&r, 9, 2), 0.0);
        assert_eq!(ndcg_at_k(&[], 9, 10), 0.0);
    }

    #[test]
    fn df2_closed_form() {
        for t in [-3.0, -0.4, 0.0, 0.7, 2.5, 21.0, 150.0] {
            let want = 0.5 - t / (2.0 * (t * t + 2.0_f64).sqrt());
            assert!((student_t_sf(t, 2.0) - want).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn df1_is_cauchy() {
        for t in [-2.0f64, 0.3, 1.0, 10.0] {
            let want = 0.5 - t.atan() / std::f64::consts::PI;
            assert!((student_t_sf(t, 1.0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_spread_cases() {
        let r = noninferiority_test(&TTestInput::new(vec![0.5, 0.5], 0.5)).unwrap();
        assert!(r.pass);
        let r = noninferiority_test(&TTestInput::new(vec![0.49, 0.49], 0.5)).unwrap();
        assert!(!r.pass);
        assert!(noninferiority_test(&TTestInput::new(vec![0.5], 0.5)).is_err());
    }

    #[test]
    fn clearly_inferior_fails() {
        let b = 0.5;
        let eps = 0.01 * b;
        let x = vec![b - 2.0 * eps + 1e-6, b - 2.0 * eps - 1e-6, b - 2.0 * eps];
        assert!(!noninferiority_test(&TTestInput::new(x, b)).unwrap().pass);
    }

    #[test]
    fn recovery_needs_teacher_signal() {
        let s = EvalReport {
            ndcg10: 0.3,
            ..Default::default()
        };
        assert!(recovery_ratio(&s, &EvalReport::default()).is_err());
        assert_eq!(recovery_ratio(&s, &s).unwrap(), 1.0);
    }
}
