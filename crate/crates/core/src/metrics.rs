//! Probability and uncertainty arithmetic.
//!
//! All logarithms are natural. Probabilities enter as per-token natural-log
//! probabilities reported by the completion backend.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{builtin_expressions, Generation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("generation has no tokens")]
    NoTokens,
    #[error("generation is missing token logprobs")]
    MissingLogprobs,
    #[error("no samples")]
    NoSamples,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A length-normalized log probability: finite and ≤ 0.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LogProb(f64);

impl LogProb {
    pub fn new(value: f64) -> Result<Self, MetricError> {
        if value.is_finite() && value <= 0.0 {
            Ok(Self(value))
        } else {
            Err(MetricError::InvalidParameter(format!("log probability {value} must be finite and <= 0")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// The per-token geometric-mean probability, in (0, 1].
    pub fn probability(self) -> f64 {
        self.0.exp()
    }
}

/// Arithmetic mean of token logprobs.
pub fn mean_logprob(token_logprobs: &[f64]) -> Result<LogProb, MetricError> {
    if token_logprobs.is_empty() {
        return Err(MetricError::NoTokens);
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    LogProb::new(mean.min(0.0))
}

pub fn length_normalized_logprob(gen: &Generation) -> Result<LogProb, MetricError> {
    let lps = gen.token_logprobs.as_deref().ok_or(MetricError::MissingLogprobs)?;
    mean_logprob(lps)
}

/// `log(p2 / p1)` for length-normalized probabilities.
pub fn logprob_ratio(p1: LogProb, p2: LogProb) -> f64 {
    p2.0 - p1.0
}

fn basic_normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let kept: String = lowered
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, strips punctuation, collapses whitespace, and drops leading
/// articles and built-in expression prefixes. Idempotent.
pub fn normalize_answer(text: &str) -> String {
    let prefixes: Vec<String> = builtin_expressions().iter().map(|e| basic_normalize(&e.text)).collect();
    let mut s = basic_normalize(text);
    loop {
        let before = s.len();
        for p in prefixes.iter().map(String::as_str).chain(ARTICLES) {
            if let Some(rest) = s.strip_prefix(p).and_then(|r| r.strip_prefix(' ')) {
                s = rest.to_owned();
            }
        }
        if s.len() == before {
            return s;
        }
    }
}

/// Shannon entropy of a count vector.
pub fn entropy_of_counts<I: IntoIterator<Item = usize>>(counts: I) -> f64 {
    let counts: Vec<usize> = counts.into_iter().filter(|&c| c > 0).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let h: f64 = counts
        .iter()
        .map(|&c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum();
    h.max(0.0)
}

/// Entropy over answer buckets formed by [`normalize_answer`].
pub fn entropy_of_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Result<f64, MetricError> {
    let mut buckets: BTreeMap<String, usize> = BTreeMap::new();
    let mut n = 0;
    for t in texts {
        *buckets.entry(normalize_answer(t)).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::NoSamples);
    }
    Ok(entropy_of_counts(buckets.into_values()))
}

pub fn response_entropy(samples: &[Generation]) -> Result<f64, MetricError> {
    entropy_of_texts(samples.iter().map(|g| g.text.as_str()))
}

pub const DEFAULT_KL_BINS: usize = 30;
pub const DEFAULT_KL_SIGMA: f64 = 1.0;
pub const KL_FLOOR: f64 = 1e-10;

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|x| x / sum).collect()
}

/// Histogram over `[lo, hi]` convolved with a Gaussian kernel (zero padded),
/// floored at [`KL_FLOOR`] and renormalized.
pub fn smoothed_histogram(values: &[f64], lo: f64, hi: f64, bins: usize, sigma: f64) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    let width = hi - lo;
    for &x in values {
        let b = if width > 0.0 {
            (((x - lo) / width) * bins as f64).floor().max(0.0) as usize
        } else {
            0
        };
        hist[b.min(bins - 1)] += 1.0;
    }
    let n = values.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);

    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let mut smooth = vec![0.0; bins];
    for (i, out) in smooth.iter_mut().enumerate() {
        for (k, w) in kernel.iter().enumerate() {
            let j = i as i64 + k as i64 - radius;
            if (0..bins as i64).contains(&j) {
                *out += w * hist[j as usize];
            }
        }
    }
    smooth.iter_mut().for_each(|p| *p = p.max(KL_FLOOR));
    let total: f64 = smooth.iter().sum();
    smooth.into_iter().map(|p| p / total).collect()
}

/// KL(P_a ‖ P_b) between Gaussian-smoothed histograms sharing the bin range
/// `[min(a ∪ b), max(a ∪ b)]`. `sigma` is in bins.
pub fn histogram_kl(a: &[f64], b: &[f64], bins: usize, sigma: f64) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if bins == 0 {
        return Err(MetricError::InvalidParameter("bins must be positive".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(MetricError::InvalidParameter(format!("sigma {sigma} must be positive")));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(MetricError::InvalidParameter("histogram values must be finite".into()));
    }
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let pa = smoothed_histogram(a, lo, hi, bins, sigma);
    let pb = smoothed_histogram(b, lo, hi, bins, sigma);
    let kl: f64 = pa.iter().zip(&pb).map(|(p, q)| p * (p / q).ln()).sum();
    Ok(kl.max(0.0))
}
