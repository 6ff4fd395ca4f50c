use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One entry of a decoded beam, as seen by the iterative loop.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamItem {
    pub text: String,
    pub cost: f64,
}

/// Produces the beam for a sentence; implemented by the model and by test stubs.
pub trait Corrector: Sync {
    fn beam(&self, sentence: &str) -> Result<Vec<BeamItem>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterativeConfig {
    pub threshold: f64,
    pub max_iters: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            threshold: 1.0,
            max_iters: 1,
        }
    }
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) || !self.threshold.is_finite() {
            return Err(Error::Config(format!("threshold = {} must be finite and >= 0", self.threshold)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    /// The best correction cost more than `threshold` times the identity cost.
    Rejected,
    /// Every beam item reproduced the input.
    NoCorrection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeTrace {
    /// `states[k]` is the sentence after `k` accepted corrections; `states[0]` is the input.
    pub states: Vec<String>,
    pub stop: StopReason,
}

impl IterativeTrace {
    pub fn output(&self) -> &str {
        self.states.last().unwrap()
    }

    /// The result had the loop been capped at `max_iters` iterations.
    pub fn output_at(&self, max_iters: usize) -> &str {
        &self.states[max_iters.min(self.states.len() - 1)]
    }
}

/// Repeatedly re-decodes the current sentence, accepting the cheapest
/// non-identity beam item while its cost is at most `threshold` times the
/// identity cost. With no identity item in the beam, the cheapest correction
/// is accepted regardless of the threshold.
pub fn iterative_decode_traced<C: Corrector + ?Sized>(corrector: &C, input: &str, cfg: &IterativeConfig) -> Result<IterativeTrace> {
    cfg.validate()?;
    let mut states = vec![input.to_string()];
    for _ in 0..cfg.max_iters {
        let current = states.last().unwrap();
        let beam = corrector.beam(current)?;
        let identity_cost = beam.iter().filter(|b| b.text == *current).map(|b| b.cost).min_by(f64::total_cmp);
        let best = beam
            .iter()
            .filter(|b| b.text != *current)
            .min_by(|a, b| a.cost.total_cmp(&b.cost));
        let Some(best) = best else {
            return Ok(IterativeTrace {
                states,
                stop: StopReason::NoCorrection,
            });
        };
        let accept = match identity_cost {
            Some(ic) => best.cost <= cfg.threshold * ic,
            None => true,
        };
        if !accept {
            return Ok(IterativeTrace {
                states,
                stop: StopReason::Rejected,
            });
        }
        states.push(best.text.clone());
    }
    Ok(IterativeTrace {
        states,
        stop: StopReason::MaxIters,
    })
}

pub fn iterative_decode<C: Corrector + ?Sized>(corrector: &C, input: &str, cfg: &IterativeConfig) -> Result<String> {
    Ok(iterative_decode_traced(corrector, input, cfg)?.output().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    struct Scripted(HashMap<&'static str, Vec<(&'static str, f64)>>);

    impl Corrector for Scripted {
        fn beam(&self, s: &str) -> Result<Vec<BeamItem>> {
            Ok(self
                .0
                .get(s)
                .map(|v| v.iter().map(|&(t, c)| BeamItem { text: t.into(), cost: c }).collect())
                .unwrap_or_else(|| vec![BeamItem { text: s.into(), cost: 1.0 }]))
        }
    }

    fn cfg(threshold: f64, max_iters: usize) -> IterativeConfig {
        IterativeConfig { threshold, max_iters }
    }

    #[test]
    fn threshold_gate() {
        let s = Scripted(HashMap::from([("bad", vec![("bad", 2.0), ("fix", 2.3)])]));
        assert_eq!(iterative_decode(&s, "bad", &cfg(1.2, 1)).unwrap(), "fix");
        let t = iterative_decode_traced(&s, "bad", &cfg(1.1, 1)).unwrap();
        assert_eq!((t.output(), t.stop), ("bad", StopReason::Rejected));
        assert_eq!(iterative_decode(&s, "bad", &cfg(0.0, 1)).unwrap(), "bad");
    }

    #[test]
    fn identity_absent_accepts_best() {
        let s = Scripted(HashMap::from([("bad", vec![("fix", 50.0), ("other", 60.0)])]));
        assert_eq!(iterative_decode(&s, "bad", &cfg(0.0, 1)).unwrap(), "fix");
    }

    #[test]
    fn staged_corrections_and_termination() {
        let s = Scripted(HashMap::from([
            ("a0 b0", vec![("a1 b0", 1.0), ("a0 b0", 2.0)]),
            ("a1 b0", vec![("a1 b1", 1.0), ("a1 b0", 2.0)]),
            ("a1 b1", vec![("a2 b2", 1.0), ("a1 b1", 2.0)]),
        ]));
        assert_eq!(iterative_decode(&s, "a0 b0", &cfg(1.0, 1)).unwrap(), "a1 b0");
        let t = iterative_decode_traced(&s, "a0 b0", &cfg(1.0, 2)).unwrap();
        assert_eq!((t.output(), t.stop), ("a1 b1", StopReason::MaxIters));
        assert_eq!(t.output_at(1), "a1 b0");
        assert_eq!(t.output_at(5), "a1 b1");
        let t = iterative_decode_traced(&s, "a0 b0", &cfg(1.0, 10)).unwrap();
        assert_eq!(t.states.len(), 4);
        assert_eq!(t.stop, StopReason::NoCorrection);
    }

    #[test]
    fn rejects_bad_config() {
        let s = Scripted(HashMap::new());
        assert!(iterative_decode(&s, "x", &cfg(1.0, 0)).is_err());
        assert!(iterative_decode(&s, "x", &cfg(-1.0, 1)).is_err());
    }
}
