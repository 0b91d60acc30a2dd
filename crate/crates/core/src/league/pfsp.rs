use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::CoreError;

/// Opponent weighting functions for prioritized fictitious self-play.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Weighting {
    Linear,
    LinearCapped,
    Variance,
    Squared,
}

impl Weighting {
    pub const ALL: [Weighting; 4] = [Weighting::Linear, Weighting::LinearCapped, Weighting::Variance, Weighting::Squared];

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Linear => "linear",
            Weighting::LinearCapped => "linear_capped",
            Weighting::Variance => "variance",
            Weighting::Squared => "squared",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Weighting {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, CoreError> {
        Weighting::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| CoreError::League(format!("unknown weighting {s:?}")))
    }
}

/// Weight of an opponent the learner beats with probability `win_rate`.
pub fn pfsp_weight(win_rate: f64, weighting: Weighting) -> Result<f64, CoreError> {
    if !(0.0..=1.0).contains(&win_rate) {
        return Err(CoreError::League(format!("win rate {win_rate} outside [0, 1]")));
    }
    let lose = 1.0 - win_rate;
    Ok(match weighting {
        Weighting::Linear => lose,
        Weighting::LinearCapped => lose.min(0.5),
        Weighting::Variance => win_rate * lose,
        Weighting::Squared => lose * lose,
    })
}

/// Normalized sampling probabilities. All-zero weights give a uniform
/// distribution.
pub fn pfsp_probabilities(win_rates: &[f64], weighting: Weighting) -> Result<Vec<f64>, CoreError> {
    if win_rates.is_empty() {
        return Err(CoreError::League("no candidates".into()));
    }
    let weights = win_rates.iter().map(|p| pfsp_weight(*p, weighting)).collect::<Result<Vec<_>, _>>()?;
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let n = weights.len() as f64;
        return Ok(vec![1.0 / n; weights.len()]);
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Returns the index of the sampled candidate.
pub fn pfsp_sample(win_rates: &[f64], weighting: Weighting, rng: &mut impl Rng) -> Result<usize, CoreError> {
    let probs = pfsp_probabilities(win_rates, weighting)?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
    }
    // rounding left u above the accumulated total
    Ok(last_positive)
}
