//! Corpus BLEU (13a tokenization, exponential smoothing), chrF++, relative
//! performance and Pearson correlation.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

fn check_lengths(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::LengthMismatch {
            hypotheses: hyps,
            references: refs,
        });
    }
    if refs == 0 {
        return Err(Error::EmptyDataset("no reference sentences".into()));
    }
    Ok(())
}

fn rules() -> &'static [(Regex, &'static str); 4] {
    static RULES: OnceLock<[(Regex, &'static str); 4]> = OnceLock::new();
    RULES.get_or_init(|| {
        let re = |p: &str| Regex::new(p).expect("static pattern");
        [
            (re(r"([\{-~\[-` -&\(-\+:-@/])"), " $1 "),
            (re(r"([^0-9])([\.,])"), "$1 $2 "),
            (re(r"([\.,])([^0-9])"), " $1 $2"),
            (re(r"([0-9])(-)"), "$1 $2 "),
        ]
    })
}

/// mteval-v13a style tokenization.
pub fn tokenize_13a(line: &str) -> Vec<String> {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in rules() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().map(str::to_string).collect()
}

fn count<T: Hash + Eq>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn clipped_matches<T: Hash + Eq>(hyp: &HashMap<T, usize>, reference: &HashMap<T, usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h = tokenize_13a(hyp);
        let r = tokenize_13a(reference);
        let mut s = Self {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let hc = count(h.windows(n));
            let rc = count(r.windows(n));
            s.matches[n - 1] = clipped_matches(&hc, &rc);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Smoothed precisions in percent, as used by the score.
    #[allow(clippy::needless_range_loop)]
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        let mut smooth = 1.0;
        for n in 0..MAX_ORDER {
            if self.totals[n] == 0 {
                break;
            }
            if self.matches[n] == 0 {
                smooth *= 2.0;
                p[n] = 100.0 / (smooth * self.totals[n] as f64);
            } else {
                p[n] = 100.0 * self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.contains(&0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

pub fn bleu_stats(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<BleuStats> {
    check_lengths(hyps.len(), refs.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        total.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
    }
    if total.ref_len == 0 {
        return Err(Error::EmptyDataset("every reference is empty".into()));
    }
    Ok(total)
}

/// Corpus BLEU-4 in [0, 100].
pub fn bleu(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    Ok(bleu_stats(hyps, refs)?.score())
}

const CHAR_ORDER: usize = 6;
const WORD_ORDER: usize = 2;
const CHRF_BETA: f64 = 2.0;
const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Splits one leading or trailing punctuation mark off each word.
fn split_punctuation(sentence: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in sentence.split_whitespace() {
        let chars: Vec<char> = w.chars().collect();
        if chars.len() == 1 {
            out.push(w.to_string());
        } else if PUNCTUATION.contains(chars[chars.len() - 1]) {
            out.push(chars[..chars.len() - 1].iter().collect());
            out.push(chars[chars.len() - 1].to_string());
        } else if PUNCTUATION.contains(chars[0]) {
            out.push(chars[0].to_string());
            out.push(chars[1..].iter().collect());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

/// `[hyp total, ref total, matches]` per order: characters 1..=6, then words 1..=2.
fn chrf_segment(hyp: &str, reference: &str) -> Vec<[usize; 3]> {
    let mut stats = Vec::with_capacity(CHAR_ORDER + WORD_ORDER);
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    for n in 1..=CHAR_ORDER {
        let h = count(hc.windows(n));
        let r = count(rc.windows(n));
        stats.push([h.values().sum(), r.values().sum(), clipped_matches(&h, &r)]);
    }
    let hw = split_punctuation(hyp);
    let rw = split_punctuation(reference);
    for n in 1..=WORD_ORDER {
        let h = count(hw.windows(n));
        let r = count(rw.windows(n));
        stats.push([h.values().sum(), r.values().sum(), clipped_matches(&h, &r)]);
    }
    stats
}

/// Corpus chrF++ (6 character orders, 2 word orders, β = 2) in [0, 100].
pub fn chrf(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<f64> {
    check_lengths(hyps.len(), refs.len())?;
    let mut total = vec![[0usize; 3]; CHAR_ORDER + WORD_ORDER];
    for (h, r) in hyps.iter().zip(refs) {
        for (acc, s) in total.iter_mut().zip(chrf_segment(h.as_ref(), r.as_ref())) {
            for k in 0..3 {
                acc[k] += s[k];
            }
        }
    }
    let (mut avg_p, mut avg_r, mut orders) = (0.0, 0.0, 0usize);
    for [n_hyp, n_ref, n_match] in total {
        if n_hyp > 0 && n_ref > 0 {
            avg_p += n_match as f64 / n_hyp as f64;
            avg_r += n_match as f64 / n_ref as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    avg_p /= orders as f64;
    avg_r /= orders as f64;
    if avg_p + avg_r == 0.0 {
        return Ok(0.0);
    }
    let b2 = CHRF_BETA * CHRF_BETA;
    Ok(100.0 * (1.0 + b2) * avg_p * avg_r / (b2 * avg_p + avg_r))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub chrf: f64,
    pub n_sentences: usize,
    pub brevity_penalty: f64,
    pub precisions: [f64; MAX_ORDER],
}

pub fn evaluate(hyps: &[impl AsRef<str>], refs: &[impl AsRef<str>]) -> Result<MetricReport> {
    let stats = bleu_stats(hyps, refs)?;
    Ok(MetricReport {
        bleu: stats.score(),
        chrf: chrf(hyps, refs)?,
        n_sentences: hyps.len(),
        brevity_penalty: stats.brevity_penalty(),
        precisions: stats.precisions(),
    })
}

/// `100 · method / full_ft`
pub fn relative_performance(method_score: f64, full_ft_score: f64) -> Result<f64> {
    if full_ft_score.is_nan() || full_ft_score <= 0.0 {
        return Err(Error::UndefinedBaseline(full_ft_score));
    }
    Ok(100.0 * (method_score / full_ft_score))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value from the t statistic with n − 2 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

impl Correlation {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Sample Pearson correlation with its two-sided p-value.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            hypotheses: x.len(),
            references: y.len(),
        });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("correlation needs at least 3 points, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance in correlation input".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p_value = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(Correlation { r, p_value, n })
}
