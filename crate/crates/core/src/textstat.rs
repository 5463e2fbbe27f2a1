//! Per-token surprisal, windowed passage surprisal, reference statistics and
//! the surprise flag.
//!
//! All surprisal values are in nats. A document of `T` tokens is cut into
//! windows of `w` tokens; a trailing remainder is its own window when it holds
//! at least `w / 2` tokens and is otherwise folded into the preceding window.

use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurprisalProfile {
    pub doc_id: String,
    pub token_surprisals: Vec<f64>,
    pub window_size: usize,
    pub passage_surprisals: Vec<f64>,
}

impl SurprisalProfile {
    /// Token ranges backing each entry of `passage_surprisals`.
    pub fn passage_ranges(&self) -> Vec<Range<usize>> {
        window_ranges(self.token_surprisals.len(), self.window_size)
    }

    pub fn passage_count(&self) -> usize {
        self.passage_surprisals.len()
    }

    pub fn mean_passage_surprisal(&self) -> Option<f64> {
        mean(&self.passage_surprisals)
    }
}

/// Window boundaries for `len` tokens at window size `w` (`w >= 1`).
pub fn window_ranges(len: usize, w: usize) -> Vec<Range<usize>> {
    if len == 0 || w == 0 {
        return Vec::new();
    }
    let full = len / w;
    let rem = len % w;
    let mut ranges: Vec<Range<usize>> = (0..full).map(|i| i * w..(i + 1) * w).collect();
    if rem > 0 {
        match ranges.last_mut() {
            Some(last) if 2 * rem < w => last.end = len,
            _ => ranges.push(full * w..len),
        }
    }
    ranges
}

pub fn surprisal_profile(
    doc_id: impl Into<String>,
    token_logprobs: &[f64],
    window: usize,
) -> Result<SurprisalProfile> {
    if token_logprobs.is_empty() {
        return Err(Error::EmptyDocument);
    }
    if window == 0 {
        return Err(Error::InvalidWindow(window));
    }
    let token_surprisals: Vec<f64> = token_logprobs.iter().map(|lp| (-lp).max(0.0)).collect();
    let passage_surprisals = window_ranges(token_surprisals.len(), window)
        .into_iter()
        .map(|r| mean(&token_surprisals[r]).unwrap_or(0.0))
        .collect();
    Ok(SurprisalProfile {
        doc_id: doc_id.into(),
        token_surprisals,
        window_size: window,
        passage_surprisals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceStats {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub n_samples: usize,
}

impl ReferenceStats {
    pub fn threshold(&self) -> f64 {
        self.mu + self.lambda * self.sigma
    }

    pub fn with_lambda(self, lambda: f64) -> Self {
        Self { lambda, ..self }
    }

    pub fn is_surprising(&self, passage_surprisal: f64) -> bool {
        passage_surprisal > self.threshold()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Fits `mu` and the sample (n - 1) standard deviation over every passage of
/// every reference profile.
pub fn fit_reference(profiles: &[SurprisalProfile], lambda: f64) -> Result<ReferenceStats> {
    let values: Vec<f64> = profiles
        .iter()
        .flat_map(|p| p.passage_surprisals.iter().copied())
        .collect();
    fit_reference_values(&values, lambda)
}

pub fn fit_reference_values(values: &[f64], lambda: f64) -> Result<ReferenceStats> {
    if values.len() < 2 {
        return Err(Error::InsufficientReference(values.len()));
    }
    let mu = mean(values).unwrap_or(0.0);
    Ok(ReferenceStats {
        mu,
        sigma: sample_std(values, mu),
        lambda,
        n_samples: values.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassageFlag {
    pub passage_index: usize,
    pub surprisal: f64,
    pub flagged: bool,
}

pub fn flag_passages(profile: &SurprisalProfile, stats: &ReferenceStats) -> Vec<PassageFlag> {
    profile
        .passage_surprisals
        .iter()
        .enumerate()
        .map(|(passage_index, &surprisal)| PassageFlag {
            passage_index,
            surprisal,
            flagged: stats.is_surprising(surprisal),
        })
        .collect()
}

/// `exp(mean s_t)`.
pub fn perplexity(token_surprisals: &[f64]) -> Result<f64> {
    mean(token_surprisals)
        .map(f64::exp)
        .ok_or(Error::EmptyInput("perplexity of an empty sequence"))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub(crate) fn sample_std(values: &[f64], mu: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let ss: f64 = values.iter().map(|v| (v - mu).powi(2)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

pub fn write_profiles_jsonl<W: Write>(mut out: W, profiles: &[SurprisalProfile]) -> Result<()> {
    for p in profiles {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_profiles_jsonl<R: BufRead>(input: R) -> Result<Vec<SurprisalProfile>> {
    let mut profiles = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        profiles.push(serde_json::from_str(&line)?);
    }
    Ok(profiles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile_from_surprisals(s: &[f64], w: usize) -> SurprisalProfile {
        let lp: Vec<f64> = s.iter().map(|v| -v).collect();
        surprisal_profile("doc", &lp, w).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn constant_logprobs_give_constant_windows() {
        for w in 1..7 {
            let p = surprisal_profile("d", &[-0.7; 17], w).unwrap();
            assert!(p.passage_surprisals.iter().all(|s| close(*s, 0.7, 1e-12)));
        }
    }

    #[test]
    fn six_tokens_window_three() {
        let p = profile_from_surprisals(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3);
        assert_eq!(p.passage_surprisals, vec![2.0, 5.0]);
    }

    #[test]
    fn trailing_window_kept_or_merged() {
        // 7 tokens at w = 4: remainder 3 >= 2, kept.
        assert_eq!(window_ranges(7, 4), vec![0..4, 4..7]);
        // 9 tokens at w = 4: remainder 1 < 2, merged.
        assert_eq!(window_ranges(9, 4), vec![0..4, 4..9]);
        // 10 tokens at w = 4: remainder 2 == w/2, kept.
        assert_eq!(window_ranges(10, 4), vec![0..4, 4..8, 8..10]);
        // shorter than one window: single window.
        assert_eq!(window_ranges(1, 8), vec![0..1]);
    }

    #[test]
    fn profile_errors() {
        assert!(matches!(
            surprisal_profile("d", &[], 3),
            Err(Error::EmptyDocument)
        ));
        assert!(matches!(
            surprisal_profile("d", &[-1.0], 0),
            Err(Error::InvalidWindow(0))
        ));
    }

    #[test]
    fn fit_zero_variance() {
        let stats = fit_reference_values(&[1.25; 5], 2.0).unwrap();
        assert_eq!(stats.mu, 1.25);
        assert_eq!(stats.sigma, 0.0);
    }

    #[test]
    fn fit_two_values() {
        let stats = fit_reference_values(&[1.0, 2.0], 1.0).unwrap();
        // sample stdev of {1, 2}: sqrt(((-.5)^2 + .5^2) / 1) = sqrt(0.5)
        assert!(close(stats.mu, 1.5, 1e-12));
        assert!(close(stats.sigma, 0.5f64.sqrt(), 1e-12));
        assert!(close(stats.threshold(), 1.5 + 0.5f64.sqrt(), 1e-12));
        assert!((stats.threshold() - 2.2071).abs() < 1e-4);
    }

    #[test]
    fn fit_needs_two_passages() {
        let p = profile_from_surprisals(&[1.0, 2.0], 4);
        assert!(matches!(
            fit_reference(&[p], 1.0),
            Err(Error::InsufficientReference(1))
        ));
    }

    #[test]
    fn threshold_is_strict() {
        let stats = ReferenceStats {
            mu: 1.0,
            sigma: 0.25,
            lambda: 2.0,
            n_samples: 10,
        };
        let p = profile_from_surprisals(&[1.5, 1.5], 2);
        assert!(!flag_passages(&p, &stats)[0].flagged);
    }

    #[test]
    fn reported_flagged_mean_exceeds_reported_threshold() {
        // Flagged-passage mean 2.19 against a threshold of 1.65.
        let stats = ReferenceStats {
            mu: 1.25,
            sigma: 0.4 / 2.48,
            lambda: 2.48,
            n_samples: 20,
        };
        assert!((stats.threshold() - 1.65).abs() < 1e-12);
        assert!(stats.is_surprising(2.19));
    }

    #[test]
    fn flags_follow_inequality() {
        let stats = ReferenceStats {
            mu: 1.5,
            sigma: 0.5,
            lambda: 2.0,
            n_samples: 4,
        };
        let p = profile_from_surprisals(&[1.0, 3.0], 1);
        let flags: Vec<bool> = flag_passages(&p, &stats)
            .iter()
            .map(|f| f.flagged)
            .collect();
        assert_eq!(flags, vec![false, true]);
    }

    #[test]
    fn perplexity_cases() {
        let v = 37.0f64;
        assert!(close(perplexity(&[v.ln(); 9]).unwrap(), v, 1e-12));
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        assert!(close(
            perplexity(&[2f64.ln(), 8f64.ln()]).unwrap(),
            4.0,
            1e-12
        ));
        assert!(perplexity(&[]).is_err());
    }

    #[test]
    fn stats_json_round_trip() {
        let stats = fit_reference_values(&[1.0, 2.0, 4.0], 2.48).unwrap();
        let back = ReferenceStats::from_json(&stats.to_json().unwrap()).unwrap();
        assert_eq!(stats, back);
    }

    proptest! {
        #[test]
        fn windows_match_brute_force_means(
            s in prop::collection::vec(0.0f64..20.0, 1..200),
            w in 1usize..40,
        ) {
            let p = profile_from_surprisals(&s, w);
            let ranges = p.passage_ranges();
            prop_assert_eq!(ranges.len(), p.passage_surprisals.len());
            // ranges tile the document
            prop_assert_eq!(ranges[0].start, 0);
            prop_assert_eq!(ranges.last().unwrap().end, s.len());
            for (r, got) in ranges.iter().zip(&p.passage_surprisals) {
                let mut acc = 0.0;
                for t in r.clone() {
                    acc += s[t];
                }
                let want = acc / r.len() as f64;
                prop_assert!(close(*got, want, 1e-9));
            }
        }

        #[test]
        fn raising_lambda_shrinks_flag_set(
            s in prop::collection::vec(0.0f64..10.0, 2..100),
            lo in -3.0f64..3.0,
            bump in 0.0f64..3.0,
        ) {
            let p = profile_from_surprisals(&s, 1);
            let stats = fit_reference(std::slice::from_ref(&p), lo).unwrap();
            let low = flag_passages(&p, &stats);
            let high = flag_passages(&p, &stats.with_lambda(lo + bump));
            for (a, b) in low.iter().zip(&high) {
                prop_assert!(!b.flagged || a.flagged);
            }
        }

        #[test]
        fn scaling_preserves_flags(
            s in prop::collection::vec(0.01f64..10.0, 4..60),
            alpha in 0.1f64..10.0,
            lambda in 0.0f64..3.0,
        ) {
            let w = 2;
            let base = profile_from_surprisals(&s, w);
            let scaled: Vec<f64> = s.iter().map(|v| v * alpha).collect();
            let scaled = profile_from_surprisals(&scaled, w);
            let sb = fit_reference(std::slice::from_ref(&base), lambda).unwrap();
            let ss = fit_reference(std::slice::from_ref(&scaled), lambda).unwrap();
            prop_assert!(close(ss.mu, sb.mu * alpha, 1e-9));
            prop_assert!(close(ss.sigma, sb.sigma * alpha, 1e-9) || sb.sigma < 1e-12);
            for (a, b) in base.passage_surprisals.iter().zip(&scaled.passage_surprisals) {
                prop_assert!(close(*b, a * alpha, 1e-9));
            }
            // Compare away from the boundary, where rounding could flip a tie.
            let thr_b = sb.threshold();
            for (a, b) in flag_passages(&base, &sb).iter().zip(flag_passages(&scaled, &ss)) {
                if (a.surprisal - thr_b).abs() > 1e-9 * thr_b.abs().max(1.0) {
                    prop_assert_eq!(a.flagged, b.flagged);
                }
            }
        }

        #[test]
        fn perplexity_of_repeated_sequence(
            s in prop::collection::vec(0.0f64..8.0, 1..50),
            k in 1usize..5,
        ) {
            let rep: Vec<f64> = s.iter().copied().cycle().take(s.len() * k).collect();
            prop_assert!(close(perplexity(&rep).unwrap(), perplexity(&s).unwrap(), 1e-9));
        }
    }
}
