//! Sentence-level and token-level exit decisions over per-layer
//! uncertainties.
//!
//! A token (or sentence) exits at layer `l` when its uncertainty is
//! strictly below the threshold; at the last layer everything still active
//! exits. Tokens that have already exited keep their frozen uncertainty,
//! and it still counts in their neighbours' windows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// How token uncertainties are pooled into a sentence uncertainty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Max,
    Average,
}

/// Window radius `k` for token-level uncertainty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WindowSize {
    Radius(usize),
    /// Covers the whole sentence.
    Infinite,
}

impl fmt::Display for WindowSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSize::Radius(k) => write!(f, "{k}"),
            WindowSize::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for WindowSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "∞" | "infinite" => Ok(WindowSize::Infinite),
            other => other
                .parse()
                .map(WindowSize::Radius)
                .map_err(|_| Error::Config(format!("bad window size {other:?}"))),
        }
    }
}

impl Serialize for WindowSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WindowSize::Radius(k) => s.serialize_u64(*k as u64),
            WindowSize::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for WindowSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(WindowSize::Radius(k as usize)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Exit strategy driving early-exit inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum ExitPolicy {
    /// The whole sentence exits once its pooled uncertainty is below `delta`.
    Sentee {
        #[serde(default)]
        pool: Pooling,
        delta: f64,
    },
    /// Each token exits once the max uncertainty in its radius-`k` window is
    /// below `delta`.
    Tokee { k: WindowSize, delta: f64 },
}

impl ExitPolicy {
    pub fn sentee(delta: f64) -> Self {
        ExitPolicy::Sentee {
            pool: Pooling::Max,
            delta,
        }
    }

    pub fn tokee(k: WindowSize, delta: f64) -> Self {
        ExitPolicy::Tokee { k, delta }
    }

    pub fn threshold(&self) -> f64 {
        match *self {
            ExitPolicy::Sentee { delta, .. } | ExitPolicy::Tokee { delta, .. } => delta,
        }
    }

    pub fn with_threshold(self, delta: f64) -> Self {
        match self {
            ExitPolicy::Sentee { pool, .. } => ExitPolicy::Sentee { pool, delta },
            ExitPolicy::Tokee { k, .. } => ExitPolicy::Tokee { k, delta },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExitPolicy::Sentee { .. } => "sentee",
            ExitPolicy::Tokee { .. } => "tokee",
        }
    }

    /// Thresholds must be finite and non-negative. Values above 1 are
    /// allowed and make every token exit at the first layer.
    pub fn validate(&self) -> Result<()> {
        let d = self.threshold();
        if !d.is_finite() || d < 0.0 {
            return Err(Error::Config(format!("threshold {d} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Exit flags of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExitDecision {
    pub exits: Vec<bool>,
}

impl ExitDecision {
    pub fn count(&self) -> usize {
        self.exits.iter().filter(|&&e| e).count()
    }

    pub fn all(&self) -> bool {
        self.exits.iter().all(|&e| e)
    }
}

/// Max- or mean-pooled sentence uncertainty.
pub fn sentence_uncertainty(u: &[f64], pool: Pooling) -> Result<f64> {
    if u.is_empty() {
        return Err(Error::Input("sentence uncertainty of an empty sequence".into()));
    }
    Ok(match pool {
        Pooling::Max => u.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Pooling::Average => u.iter().sum::<f64>() / u.len() as f64,
    })
}

/// `u'_n = max(u_{n-k}, ..., u_{n+k})` with the window clamped to the sequence.
pub fn window_uncertainty(u: &[f64], k: WindowSize) -> Vec<f64> {
    let n = u.len();
    let radius = match k {
        WindowSize::Radius(k) if k + 1 < n => k,
        _ => {
            let m = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return vec![m; n];
        }
    };
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            u[lo..=hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Exit decision at 1-based `layer` of `num_layers`.
///
/// `u` holds the current uncertainty of every token (frozen values for
/// exited ones); only tokens with `active[n]` can exit.
pub fn decide_exits(
    u: &[f64],
    policy: &ExitPolicy,
    active: &[bool],
    layer: usize,
    num_layers: usize,
) -> ExitDecision {
    debug_assert_eq!(u.len(), active.len());
    let last = layer >= num_layers;
    let exits = match *policy {
        ExitPolicy::Sentee { pool, delta } => {
            let exit = last
                || sentence_uncertainty(u, pool)
                    .map(|s| s < delta)
                    .unwrap_or(true);
            vec![exit; u.len()]
        }
        ExitPolicy::Tokee { k, delta } => window_uncertainty(u, k)
            .into_iter()
            .zip(active)
            .map(|(w, &a)| a && (last || w < delta))
            .collect(),
    };
    ExitDecision { exits }
}

/// Exit layer (1-based) of every token when `policy` is applied to a fixed
/// table of per-layer uncertainties (`table[l][n]`), with no copying: the
/// values of a token after its exit are ignored and its exit-layer value is
/// kept for the windows of its neighbours.
pub fn simulate_exits(table: &[Vec<f64>], policy: &ExitPolicy) -> Result<Vec<usize>> {
    let layers = table.len();
    let n = table.first().map_or(0, Vec::len);
    if layers == 0 || n == 0 || table.iter().any(|u| u.len() != n) {
        return Err(Error::Input("uncertainty table must be non-empty and rectangular".into()));
    }
    let mut exit = vec![layers; n];
    let mut active = vec![true; n];
    let mut frozen = table[0].clone();
    for (l, u) in table.iter().enumerate() {
        for t in 0..n {
            if active[t] {
                frozen[t] = u[t];
            }
        }
        let d = decide_exits(&frozen, policy, &active, l + 1, layers);
        for t in 0..n {
            if d.exits[t] && active[t] {
                active[t] = false;
                exit[t] = l + 1;
            }
        }
        if !active.iter().any(|&a| a) {
            break;
        }
    }
    Ok(exit)
}

/// Outcome of [`calibrate_threshold`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub delta: f64,
    pub speedup: f64,
    pub converged: bool,
}

/// Bisects `delta ∈ [0, 1]` until `speedup_at(delta)` is within `tolerance`
/// of `target`. `speedup_at` must be non-decreasing in `delta`. If the
/// target is not reachable, the closest evaluated point is returned with
/// `converged == false`.
pub fn calibrate_threshold(
    target: f64,
    tolerance: f64,
    mut speedup_at: impl FnMut(f64) -> Result<f64>,
) -> Result<Calibration> {
    let mut best = Calibration {
        delta: 0.0,
        speedup: speedup_at(0.0)?,
        converged: false,
    };
    let consider = |delta: f64, speedup: f64, best: &mut Calibration| {
        if (speedup - target).abs() < (best.speedup - target).abs() {
            *best = Calibration {
                delta,
                speedup,
                converged: false,
            };
        }
    };
    if (best.speedup - target).abs() <= tolerance {
        best.converged = true;
        return Ok(best);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let top = speedup_at(hi)?;
    consider(hi, top, &mut best);
    if top < target - tolerance {
        return Ok(best);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let s = speedup_at(mid)?;
        consider(mid, s, &mut best);
        if (s - target).abs() <= tolerance {
            return Ok(Calibration {
                delta: mid,
                speedup: s,
                converged: true,
            });
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pooling_examples() {
        let u = [0.2, 0.9, 0.1];
        assert_eq!(sentence_uncertainty(&u, Pooling::Max).unwrap(), 0.9);
        assert!((sentence_uncertainty(&u, Pooling::Average).unwrap() - 0.4).abs() < 1e-15);
        for pool in [Pooling::Max, Pooling::Average] {
            assert_eq!(sentence_uncertainty(&[0.37], pool).unwrap(), 0.37);
        }
        assert!(sentence_uncertainty(&[], Pooling::Max).is_err());
    }

    #[test]
    fn window_examples() {
        let u = [0.3, 0.1, 0.7, 0.2];
        assert_eq!(window_uncertainty(&u, WindowSize::Radius(0)), u.to_vec());
        assert_eq!(
            window_uncertainty(&[0.1, 0.5, 0.2], WindowSize::Radius(1)),
            vec![0.5, 0.5, 0.5]
        );
        assert_eq!(window_uncertainty(&u, WindowSize::Infinite), vec![0.7; 4]);
        assert_eq!(window_uncertainty(&u, WindowSize::Radius(3)), vec![0.7; 4]);
    }

    #[test]
    fn decision_boundaries() {
        let u = [0.0, 0.4, 1.0];
        let active = [true; 3];
        for policy in [ExitPolicy::sentee(0.0), ExitPolicy::tokee(WindowSize::Radius(1), 0.0)] {
            assert_eq!(decide_exits(&u, &policy, &active, 1, 4).count(), 0);
            assert!(decide_exits(&u, &policy, &active, 4, 4).all());
        }
        for policy in [ExitPolicy::sentee(1.01), ExitPolicy::tokee(WindowSize::Radius(2), 1.01)] {
            assert!(decide_exits(&u, &policy, &active, 1, 4).all());
        }
        // ties at exactly delta do not exit
        let d = decide_exits(&[0.3], &ExitPolicy::tokee(WindowSize::Radius(0), 0.3), &[true], 1, 2);
        assert_eq!(d.exits, vec![false]);
    }

    #[test]
    fn windowed_threshold_example() {
        // u' = [0.2, 0.9, 0.9]
        let d = decide_exits(
            &[0.1, 0.2, 0.9],
            &ExitPolicy::tokee(WindowSize::Radius(1), 0.3),
            &[true; 3],
            1,
            6,
        );
        assert_eq!(d.exits, vec![true, false, false]);
    }

    #[test]
    fn inactive_tokens_never_exit_again() {
        let d = decide_exits(
            &[0.0, 0.0],
            &ExitPolicy::tokee(WindowSize::Radius(0), 0.5),
            &[false, true],
            2,
            3,
        );
        assert_eq!(d.exits, vec![false, true]);
    }

    #[test]
    fn policy_serde() {
        let p = ExitPolicy::tokee(WindowSize::Infinite, 0.25);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"variant":"tokee","k":"inf","delta":0.25}"#);
        assert_eq!(serde_json::from_str::<ExitPolicy>(&s).unwrap(), p);
        let p: ExitPolicy = serde_json::from_str(r#"{"variant":"sentee","delta":0.1}"#).unwrap();
        assert_eq!(p, ExitPolicy::sentee(0.1));
        let p: ExitPolicy = serde_json::from_str(r#"{"variant":"tokee","k":2,"delta":0.1}"#).unwrap();
        assert_eq!(p, ExitPolicy::tokee(WindowSize::Radius(2), 0.1));
        assert!(ExitPolicy::sentee(-0.1).validate().is_err());
    }

    #[test]
    fn calibration_hits_target() {
        // speedup rising smoothly from 1 to 5
        let cal = calibrate_threshold(3.0, 0.02, |d| Ok(1.0 + 4.0 * d * d)).unwrap();
        assert!(cal.converged);
        assert!((cal.speedup - 3.0).abs() <= 0.02);
        let cal = calibrate_threshold(9.0, 0.02, |d| Ok(1.0 + d)).unwrap();
        assert!(!cal.converged);
        assert_eq!(cal.delta, 1.0);
    }

    fn uncertainties() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..=1.0, 1..16)
    }

    fn exit_layers(table: &[Vec<f64>], policy: &ExitPolicy) -> Vec<usize> {
        simulate_exits(table, policy).unwrap()
    }

    proptest! {
        #[test]
        fn wide_window_equals_sentence_max(u in uncertainties(), extra in 0usize..4) {
            let k = WindowSize::Radius(u.len() - 1 + extra);
            let m = sentence_uncertainty(&u, Pooling::Max).unwrap();
            prop_assert!(window_uncertainty(&u, k).iter().all(|&v| v == m));
            prop_assert!(window_uncertainty(&u, WindowSize::Infinite).iter().all(|&v| v == m));
        }

        #[test]
        fn window_grows_with_k(u in uncertainties(), k in 0usize..6) {
            let a = window_uncertainty(&u, WindowSize::Radius(k));
            let b = window_uncertainty(&u, WindowSize::Radius(k + 1));
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
            prop_assert!(a.iter().zip(&u).all(|(x, y)| x >= y));
        }

        #[test]
        fn sentee_matches_infinite_window(
            n in 1usize..8, layers in 1usize..6, seed in any::<u64>(), delta in 0.0f64..1.2
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<Vec<f64>> = (0..layers)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect())
                .collect();
            let s = exit_layers(&table, &ExitPolicy::sentee(delta));
            let t = exit_layers(&table, &ExitPolicy::tokee(WindowSize::Infinite, delta));
            prop_assert_eq!(s, t);
        }

        #[test]
        fn exits_are_monotone_in_delta(
            n in 1usize..8, layers in 1usize..6, seed in any::<u64>(),
            d1 in 0.0f64..1.1, d2 in 0.0f64..1.1, k in 0usize..3
        ) {
            use rand::{Rng, SeedableRng};
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let table: Vec<Vec<f64>> = (0..layers)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect())
                .collect();
            for policy in [ExitPolicy::sentee(lo), ExitPolicy::tokee(WindowSize::Radius(k), lo)] {
                let a = exit_layers(&table, &policy);
                let b = exit_layers(&table, &policy.with_threshold(hi));
                prop_assert!(a.iter().zip(&b).all(|(x, y)| y <= x));
            }
        }

        #[test]
        fn decisions_are_pure(u in uncertainties(), delta in 0.0f64..1.0) {
            let active = vec![true; u.len()];
            let p = ExitPolicy::tokee(WindowSize::Radius(1), delta);
            prop_assert_eq!(decide_exits(&u, &p, &active, 1, 3), decide_exits(&u, &p, &active, 1, 3));
        }
    }
}
