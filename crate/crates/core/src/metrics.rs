//! Biometric evaluation metrics.
//!
//! Conventions: a score `>= tau` is accepted as real. APCER (= FAR) is the
//! fraction of spoof samples accepted, BPCER (= FRR) the fraction of real
//! samples rejected.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: Label,
    pub domain: usize,
}

impl ScoredSample {
    pub fn new(score: f64, label: Label, domain: usize) -> ScoredSample {
        ScoredSample {
            score,
            label,
            domain,
        }
    }
}

fn class_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let mut real = 0;
    for s in samples {
        if !(s.score.is_finite() && (0.0..=1.0).contains(&s.score)) {
            return Err(Error::InvalidArgument(format!(
                "score {} outside [0, 1]",
                s.score
            )));
        }
        if s.label == Label::Real {
            real += 1;
        }
    }
    let spoof = samples.len() - real;
    if real == 0 || spoof == 0 {
        return Err(Error::SingleClass { real, spoof });
    }
    Ok((real, spoof))
}

/// Area under the ROC curve via the Mann–Whitney statistic with averaged
/// ranks for ties (equal to the trapezoidal area).
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    let (n_real, n_spoof) = class_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut rank_sum_real = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let reals = sorted[i..=j].iter().filter(|s| s.label == Label::Real).count();
        rank_sum_real += avg_rank * reals as f64;
        i = j + 1;
    }
    let nr = n_real as f64;
    let u = rank_sum_real - nr * (nr + 1.0) / 2.0;
    Ok(u / (nr * n_spoof as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
}

/// APCER, BPCER and their mean at threshold `tau`.
pub fn acer(samples: &[ScoredSample], tau: f64) -> Result<ErrorRates> {
    let (n_real, n_spoof) = class_counts(samples)?;
    let accepted_spoof = samples
        .iter()
        .filter(|s| s.label == Label::Spoof && s.score >= tau)
        .count();
    let rejected_real = samples
        .iter()
        .filter(|s| s.label == Label::Real && s.score < tau)
        .count();
    let apcer = accepted_spoof as f64 / n_spoof as f64;
    let bpcer = rejected_real as f64 / n_real as f64;
    Ok(ErrorRates {
        apcer,
        bpcer,
        acer: (apcer + bpcer) / 2.0,
    })
}

/// Half total error rate `(FAR + FRR) / 2` at `tau`.
pub fn hter(samples: &[ScoredSample], tau: f64) -> Result<f64> {
    Ok(acer(samples, tau)?.acer)
}

/// The thresholds that enumerate every distinct operating point: the lowest
/// score (everything accepted), midpoints between adjacent distinct scores,
/// and just above the highest score (everything rejected).
pub fn operating_thresholds(samples: &[ScoredSample]) -> Vec<f64> {
    let mut distinct: Vec<f64> = samples.iter().map(|s| s.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let Some(&max) = distinct.last() else {
        return Vec::new();
    };
    let mut out = Vec::with_capacity(distinct.len() + 1);
    out.push(distinct[0]);
    out.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.push(max.next_up());
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualErrorRate {
    pub eer: f64,
    pub tau: f64,
}

/// Equal error rate and its threshold. FAR − FRR strictly decreases across
/// the operating thresholds (from 1 to −1); the crossing is linearly
/// interpolated between the two bracketing thresholds.
pub fn eer_threshold(samples: &[ScoredSample]) -> Result<EqualErrorRate> {
    let (n_real, n_spoof) = class_counts(samples)?;
    let thresholds = operating_thresholds(samples);

    // sweep from low to high threshold; samples sorted ascending
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    let mut below_real = 0usize;
    let mut below_spoof = 0usize;
    let mut cursor = 0usize;
    let mut rates = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        while cursor < sorted.len() && sorted[cursor].score < t {
            match sorted[cursor].label {
                Label::Real => below_real += 1,
                Label::Spoof => below_spoof += 1,
            }
            cursor += 1;
        }
        let far = (n_spoof - below_spoof) as f64 / n_spoof as f64;
        let frr = below_real as f64 / n_real as f64;
        rates.push((far, frr));
    }
    Ok(interpolate_crossing(&thresholds, &rates))
}

/// Shared crossing rule for a sequence of `(FAR, FRR)` operating points with
/// strictly decreasing `FAR - FRR`, starting positive.
pub fn interpolate_crossing(thresholds: &[f64], rates: &[(f64, f64)]) -> EqualErrorRate {
    for i in 0..rates.len() - 1 {
        let (far0, frr0) = rates[i];
        let (far1, frr1) = rates[i + 1];
        let (d0, d1) = (far0 - frr0, far1 - frr1);
        if d0 == 0.0 {
            return EqualErrorRate {
                eer: far0,
                tau: thresholds[i],
            };
        }
        if d1 <= 0.0 {
            if d1 == 0.0 {
                return EqualErrorRate {
                    eer: far1,
                    tau: thresholds[i + 1],
                };
            }
            let s = d0 / (d0 - d1);
            return EqualErrorRate {
                eer: far0 + s * (far1 - far0),
                tau: thresholds[i] + s * (thresholds[i + 1] - thresholds[i]),
            };
        }
    }
    let (far, _) = rates[rates.len() - 1];
    EqualErrorRate {
        eer: far,
        tau: thresholds[thresholds.len() - 1],
    }
}

/// How the decision threshold for ACER/HTER is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "rule", content = "tau")]
#[derive(Default)]
pub enum ThresholdRule {
    /// EER threshold of a separate development split.
    #[default]
    DevEer,
    /// EER threshold of the evaluated split itself.
    TestEer,
    Fixed(f64),
}


impl FromStr for ThresholdRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<ThresholdRule> {
        match s {
            "dev-eer" => Ok(ThresholdRule::DevEer),
            "test-eer" => Ok(ThresholdRule::TestEer),
            other => {
                let value = other.strip_prefix("fixed:").unwrap_or(other);
                value
                    .parse::<f64>()
                    .ok()
                    .filter(|t| t.is_finite())
                    .map(ThresholdRule::Fixed)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "threshold rule must be dev-eer, test-eer or fixed:<tau>, got {s:?}"
                        ))
                    })
            }
        }
    }
}

impl std::fmt::Display for ThresholdRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdRule::DevEer => write!(f, "dev-eer"),
            ThresholdRule::TestEer => write!(f, "test-eer"),
            ThresholdRule::Fixed(t) => write!(f, "fixed:{t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: usize,
    pub n_real: usize,
    pub n_spoof: usize,
    /// Present only when the domain has both classes.
    pub auc: Option<f64>,
    pub apcer: Option<f64>,
    pub bpcer: Option<f64>,
    pub acer: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub eer: f64,
    pub tau: f64,
    pub threshold_rule: ThresholdRule,
    pub apcer: f64,
    pub bpcer: f64,
    pub acer: f64,
    pub hter: f64,
    pub n_real: usize,
    pub n_spoof: usize,
    pub per_domain: Vec<DomainReport>,
}

/// Full report on `test`. With [`ThresholdRule::DevEer`] the threshold comes
/// from `dev`, which must then be provided.
pub fn metrics_report(
    test: &[ScoredSample],
    dev: Option<&[ScoredSample]>,
    rule: ThresholdRule,
) -> Result<MetricsReport> {
    let (n_real, n_spoof) = class_counts(test)?;
    let auc = roc_auc(test)?;
    let own = eer_threshold(test)?;
    let tau = match rule {
        ThresholdRule::DevEer => {
            let dev = dev.ok_or_else(|| {
                Error::InvalidArgument("dev-eer threshold needs a development split".into())
            })?;
            eer_threshold(dev)?.tau
        }
        ThresholdRule::TestEer => own.tau,
        ThresholdRule::Fixed(t) => t,
    };
    let rates = acer(test, tau)?;

    let mut by_domain: BTreeMap<usize, Vec<ScoredSample>> = BTreeMap::new();
    for s in test {
        by_domain.entry(s.domain).or_default().push(*s);
    }
    let per_domain = by_domain
        .into_iter()
        .map(|(domain, ss)| {
            let real: Vec<&ScoredSample> = ss.iter().filter(|s| s.label == Label::Real).collect();
            let spoof: Vec<&ScoredSample> = ss.iter().filter(|s| s.label == Label::Spoof).collect();
            let frac = |v: &[&ScoredSample], f: &dyn Fn(f64) -> bool| {
                (!v.is_empty())
                    .then(|| v.iter().filter(|s| f(s.score)).count() as f64 / v.len() as f64)
            };
            let apcer = frac(&spoof, &|s| s >= tau);
            let bpcer = frac(&real, &|s| s < tau);
            DomainReport {
                domain,
                n_real: real.len(),
                n_spoof: spoof.len(),
                auc: roc_auc(&ss).ok(),
                apcer,
                bpcer,
                acer: apcer.zip(bpcer).map(|(a, b)| (a + b) / 2.0),
            }
        })
        .collect();

    Ok(MetricsReport {
        auc,
        eer: own.eer,
        tau,
        threshold_rule: rule,
        apcer: rates.apcer,
        bpcer: rates.bpcer,
        acer: rates.acer,
        hter: rates.acer,
        n_real,
        n_spoof,
        per_domain,
    })
}
