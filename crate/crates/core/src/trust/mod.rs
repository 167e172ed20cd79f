//! Trust scores computed from stored model outputs.
//!
//! Each method produces a raw score in its own units and a trust value
//! `g ∈ [0, 1]` where larger means "more likely correct / in-distribution":
//!
//! | method | raw                                   | g                  |
//! |--------|---------------------------------------|--------------------|
//! | conf   | max of the pass-mean probabilities     | raw                |
//! | du     | mean per-pass entropy (nats)          | `1 - du / ln C`    |
//! | mu     | mutual information across passes      | `1 - mu / ln C`    |
//! | temp   | max of pass-mean softmax(logits / T)  | raw                |
//! | md     | min squared Mahalanobis distance      | `exp(-md / τ)`     |
//!
//! Every `g` is a strictly monotone map of its raw score, so rank statistics
//! such as AUROC do not depend on the normalization.

mod mahalanobis;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::io::PredictionSet;

pub use mahalanobis::{fit_mahalanobis, MahalanobisFitter, MahalanobisModel};

/// ODIN-style temperature used when none is given.
pub const DEFAULT_TEMPERATURE: f64 = 1000.0;
/// Slack for the mutual-information clamp at zero.
const MI_ROUNDING: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("prediction set carries no logits")]
    LogitsAbsent,
    #[error("prediction set carries no features")]
    FeaturesAbsent,
    #[error("covariance is not positive definite after shrinkage")]
    SingularCovariance,
    #[error("no class has enough samples to fit (need at least D+1 = {needed})")]
    InsufficientSamples { needed: usize },
    #[error("feature width {found} does not match model width {expected}")]
    DimensionMismatch { found: usize, expected: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("method md needs a fitted Mahalanobis model")]
    ModelRequired,
    #[error("model file: {0}")]
    ModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrustMethod {
    Conf,
    Du,
    Mu,
    Temp,
    Md,
}

impl TrustMethod {
    pub const ALL: [TrustMethod; 5] = [Self::Conf, Self::Du, Self::Mu, Self::Temp, Self::Md];

    pub fn name(self) -> &'static str {
        match self {
            Self::Conf => "conf",
            Self::Du => "du",
            Self::Mu => "mu",
            Self::Temp => "temp",
            Self::Md => "md",
        }
    }

    /// Whether a larger raw score means more trust.
    pub fn increasing(self) -> bool {
        matches!(self, Self::Conf | Self::Temp)
    }
}

impl fmt::Display for TrustMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrustMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| format!("unknown trust method {s:?} (expected conf, du, mu, temp or md)"))
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

fn pass_mean(passes: &[f64], classes: usize) -> Vec<f64> {
    let m = passes.len() / classes;
    let mut mean = vec![0.0; classes];
    for pass in passes.chunks_exact(classes) {
        mean.iter_mut().zip(pass).for_each(|(a, &b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    mean
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `max_c` of the pass-mean probability vector. `passes` is `M × C`.
pub fn softmax_confidence(passes: &[f64], classes: usize) -> f64 {
    max_of(&pass_mean(passes, classes))
}

/// Expected entropy over the passes.
pub fn data_uncertainty(passes: &[f64], classes: usize) -> f64 {
    let m = passes.len() / classes;
    passes.chunks_exact(classes).map(entropy).sum::<f64>() / m as f64
}

/// Entropy of the pass mean minus the expected entropy.
pub fn model_uncertainty(passes: &[f64], classes: usize) -> f64 {
    let mi = entropy(&pass_mean(passes, classes)) - data_uncertainty(passes, classes);
    if (-MI_ROUNDING..0.0).contains(&mi) {
        0.0
    } else {
        mi
    }
}

/// Temperature-scaled confidence: `max_c` of the pass-mean of
/// `softmax(logits / T)`. At `T = 1` this is exactly
/// [`softmax_confidence`] of the per-pass softmax outputs.
pub fn odin_score(logit_passes: &[f64], classes: usize, temperature: f64) -> f64 {
    let scaled: Vec<f64> = logit_passes
        .chunks_exact(classes)
        .flat_map(|pass| softmax(&pass.iter().map(|&l| l / temperature).collect::<Vec<_>>()))
        .collect();
    softmax_confidence(&scaled, classes)
}

/// Parameters of the raw → trust maps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormParams {
    pub classes: usize,
    /// Scale of the distance map; the median training distance.
    pub md_tau: f64,
}

impl NormParams {
    pub fn new(classes: usize) -> Self {
        Self { classes, md_tau: 1.0 }
    }

    pub fn with_md_tau(mut self, tau: f64) -> Self {
        self.md_tau = tau;
        self
    }
}

/// Maps a raw score onto the common trust orientation `g ∈ [0, 1]`.
pub fn normalize_trust(raw: f64, method: TrustMethod, params: &NormParams) -> f64 {
    let g = match method {
        TrustMethod::Conf | TrustMethod::Temp => raw,
        TrustMethod::Du | TrustMethod::Mu => 1.0 - raw / (params.classes as f64).ln(),
        TrustMethod::Md => (-raw / params.md_tau).exp(),
    };
    g.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrustValue {
    pub raw: f64,
    pub trust: f64,
}

/// Everything needed to score one method over a prediction set.
#[derive(Clone, Copy, Debug)]
pub struct Scorer<'a> {
    pub method: TrustMethod,
    pub temperature: f64,
    pub model: Option<&'a MahalanobisModel>,
}

impl<'a> Scorer<'a> {
    pub fn new(method: TrustMethod) -> Self {
        Self { method, temperature: DEFAULT_TEMPERATURE, model: None }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_model(mut self, model: &'a MahalanobisModel) -> Self {
        self.model = Some(model);
        self
    }

    fn check(&self, set: &PredictionSet) -> Result<(), TrustError> {
        match self.method {
            TrustMethod::Temp if !set.has_logits() => Err(TrustError::LogitsAbsent),
            TrustMethod::Temp if !(self.temperature > 0.0) => Err(TrustError::InvalidTemperature(self.temperature)),
            TrustMethod::Md => {
                let model = self.model.ok_or(TrustError::ModelRequired)?;
                if !set.has_features() {
                    return Err(TrustError::FeaturesAbsent);
                }
                if set.feature_dim() != model.dim() {
                    return Err(TrustError::DimensionMismatch { found: set.feature_dim(), expected: model.dim() });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn params(&self, set: &PredictionSet) -> NormParams {
        let p = NormParams::new(set.classes());
        match self.model {
            Some(m) => p.with_md_tau(m.tau()),
            None => p,
        }
    }

    fn raw_at(&self, set: &PredictionSet, i: usize) -> f64 {
        let c = set.classes();
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        match self.method {
            TrustMethod::Conf => softmax_confidence(&widen(set.probs(i)), c),
            TrustMethod::Du => data_uncertainty(&widen(set.probs(i)), c),
            TrustMethod::Mu => model_uncertainty(&widen(set.probs(i)), c),
            TrustMethod::Temp => odin_score(&widen(set.logits(i).expect("checked")), c, self.temperature),
            TrustMethod::Md => {
                let f = widen(set.feature(i).expect("checked"));
                self.model.expect("checked").distance(&f)
            }
        }
    }

    /// Raw score and trust for every point, in point order.
    pub fn score(&self, set: &PredictionSet) -> Result<Vec<TrustValue>, TrustError> {
        self.check(set)?;
        let params = self.params(set);
        Ok((0..set.len())
            .into_par_iter()
            .map(|i| {
                let raw = self.raw_at(set, i);
                TrustValue { raw, trust: normalize_trust(raw, self.method, &params) }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ClassId;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn confidence_examples() {
        assert_eq!(softmax_confidence(&[0.25, 0.75], 2), 0.75);
        let uniform = vec![1.0 / 11.0; 11];
        assert!((softmax_confidence(&uniform, 11) - 1.0 / 11.0).abs() < 1e-15);
        let p = softmax(&[2.0, 0.0]);
        let e2 = 2f64.exp();
        assert!((softmax_confidence(&p, 2) - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((softmax_confidence(&p, 2) - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn data_uncertainty_examples() {
        assert_eq!(data_uncertainty(&[0.0, 1.0, 0.0], 3), 0.0);
        assert!((data_uncertainty(&[0.5, 0.5], 2) - LN2).abs() < 1e-15);
        assert_eq!(data_uncertainty(&[1.0, 0.0, 0.0, 1.0], 2), 0.0);
    }

    #[test]
    fn model_uncertainty_examples() {
        assert_eq!(model_uncertainty(&[0.3, 0.7, 0.3, 0.7], 2), 0.0);
        assert!((model_uncertainty(&[1.0, 0.0, 0.0, 1.0], 2) - LN2).abs() < 1e-15);
    }

    #[test]
    fn odin_examples() {
        let e = 1f64.exp();
        assert!((odin_score(&[2.0, 0.0], 2, 2.0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((odin_score(&[2.0, 0.0], 2, 1e6) - 0.5).abs() < 1e-6);
        let l = [1.5, -0.3, 0.2];
        assert_eq!(odin_score(&l, 3, 1.0), softmax_confidence(&softmax(&l), 3));
    }

    #[test]
    fn normalization_examples() {
        let p = NormParams::new(11).with_md_tau(2.5);
        assert_eq!(normalize_trust(0.0, TrustMethod::Du, &p), 1.0);
        assert!(normalize_trust(11f64.ln(), TrustMethod::Du, &p).abs() < 1e-15);
        assert!((normalize_trust(2.5, TrustMethod::Md, &p) - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(normalize_trust(0.7, TrustMethod::Conf, &p), 0.7);
    }

    #[test]
    fn method_names_round_trip() {
        for m in TrustMethod::ALL {
            assert_eq!(m.name().parse::<TrustMethod>().unwrap(), m);
        }
        assert!("odin".parse::<TrustMethod>().is_err());
    }

    #[test]
    fn scorer_requires_inputs() {
        let mut set = PredictionSet::new(1, 2, 0, false);
        set.push(Some(ClassId(0)), &[0.6, 0.4], None, None);
        assert!(matches!(Scorer::new(TrustMethod::Temp).score(&set), Err(TrustError::LogitsAbsent)));
        assert!(matches!(Scorer::new(TrustMethod::Md).score(&set), Err(TrustError::ModelRequired)));
        let v = Scorer::new(TrustMethod::Conf).score(&set).unwrap();
        assert!((v[0].raw - 0.6).abs() < 1e-7);
    }

    fn arb_passes() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (1usize..6, 2usize..12).prop_flat_map(|(m, c)| {
            prop::collection::vec(prop::collection::vec(0.0f64..1.0, c), m).prop_map(move |rows| {
                let flat = rows
                    .iter()
                    .flat_map(|r| {
                        let s: f64 = r.iter().sum::<f64>().max(1e-12);
                        r.iter().map(move |v| v / s).collect::<Vec<_>>()
                    })
                    .collect();
                (flat, c)
            })
        })
    }

    proptest! {
        #[test]
        fn mutual_information_bounds((p, c) in arb_passes()) {
            let mu = model_uncertainty(&p, c);
            let h = entropy(&pass_mean(&p, c));
            prop_assert!(mu >= 0.0);
            prop_assert!(mu <= h + 1e-12);
            prop_assert!((mu + data_uncertainty(&p, c) - h).abs() < 1e-9);
        }

        #[test]
        fn trust_is_monotone(a in 0.0f64..2.9, b in 0.0f64..2.9) {
            let p = NormParams::new(20).with_md_tau(0.7);
            prop_assume!(a < b);
            for m in [TrustMethod::Du, TrustMethod::Mu, TrustMethod::Md] {
                prop_assert!(normalize_trust(a, m, &p) > normalize_trust(b, m, &p));
            }
        }
    }
}
