//! Return targets over one trajectory, all in plain `f64`.

use crate::error::CoreError;

fn check_len(op: &str, expected: usize, got: &[(&str, usize)]) -> Result<(), CoreError> {
    for (name, len) in got {
        if *len != expected {
            return Err(CoreError::Invalid(format!("{op}: {name} has length {len}, expected {expected}")));
        }
    }
    Ok(())
}

/// `G_t = r_t + d_t * ((1 - l_t) * b_t + l_t * G_{t+1})`, where `b_t` is the
/// value of the state after step `t` and `G_T = b_{T-1}`.
pub fn lambda_return(bootstraps: &[f64], rewards: &[f64], discounts: &[f64], lambdas: &[f64]) -> Result<Vec<f64>, CoreError> {
    let n = rewards.len();
    check_len("lambda_return", n, &[("bootstraps", bootstraps.len()), ("discounts", discounts.len()), ("lambdas", lambdas.len())])?;
    let mut out = vec![0.0; n];
    let mut acc = match bootstraps.last() {
        Some(v) => *v,
        None => return Ok(out),
    };
    for t in (0..n).rev() {
        acc = rewards[t] + discounts[t] * ((1.0 - lambdas[t]) * bootstraps[t] + lambdas[t] * acc);
        out[t] = acc;
    }
    Ok(out)
}

/// UPGO targets. `values` holds `T + 1` entries, the last being the
/// bootstrap. The return keeps following the trajectory while the next step
/// looks at least as good as its value estimate, and bootstraps otherwise.
pub fn upgo_returns(values: &[f64], rewards: &[f64], discounts: &[f64]) -> Result<Vec<f64>, CoreError> {
    if values.len() < 2 {
        return Err(CoreError::Invalid("upgo_returns: need at least one step and a bootstrap value".into()));
    }
    let n = values.len() - 1;
    check_len("upgo_returns", n, &[("rewards", rewards.len()), ("discounts", discounts.len())])?;
    let next = &values[1..];
    let lambdas: Vec<f64> = (0..n)
        .map(|t| {
            if t + 1 < n {
                let improving = rewards[t + 1] + discounts[t + 1] * values[t + 2] >= values[t + 1];
                improving as u8 as f64
            } else {
                1.0
            }
        })
        .collect();
    lambda_return(next, rewards, discounts, &lambdas)
}

/// V-trace value targets and policy-gradient advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct VTrace {
    pub vs: Vec<f64>,
    pub pg_advantages: Vec<f64>,
}

/// Clipped-importance V-trace. `values` holds `T + 1` entries, the last
/// being the bootstrap; `log_rhos` are `log pi_target - log pi_behavior`.
pub fn vtrace(
    log_rhos: &[f64],
    values: &[f64],
    rewards: &[f64],
    discounts: &[f64],
    rho_bar: f64,
    c_bar: f64,
) -> Result<VTrace, CoreError> {
    let n = rewards.len();
    check_len("vtrace", n, &[("log_rhos", log_rhos.len()), ("discounts", discounts.len())])?;
    check_len("vtrace", n + 1, &[("values", values.len())])?;
    let rhos: Vec<f64> = log_rhos.iter().map(|l| l.exp().min(rho_bar)).collect();
    let cs: Vec<f64> = log_rhos.iter().map(|l| l.exp().min(c_bar)).collect();
    let mut vs = vec![0.0; n + 1];
    vs[n] = values[n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rhos[t] * (rewards[t] + discounts[t] * values[t + 1] - values[t]);
        acc = delta + discounts[t] * cs[t] * acc;
        vs[t] = values[t] + acc;
    }
    let pg_advantages = (0..n).map(|t| rhos[t] * (rewards[t] + discounts[t] * vs[t + 1] - values[t])).collect();
    vs.truncate(n);
    Ok(VTrace { vs, pg_advantages })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lambda_is_one_step_td() {
        let g = lambda_return(&[1.0, 2.0, 3.0], &[0.5, 0.0, -1.0], &[0.9, 0.9, 0.0], &[0.0; 3]).unwrap();
        assert_eq!(g, vec![0.5 + 0.9 * 1.0, 0.9 * 2.0, -1.0]);
    }

    #[test]
    fn unit_lambda_sums_rewards() {
        let g = lambda_return(&[0.0; 4], &[1.0, 2.0, 3.0, 4.0], &[1.0; 4], &[1.0; 4]).unwrap();
        assert_eq!(g, vec![10.0, 9.0, 7.0, 4.0]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(lambda_return(&[0.0; 3], &[0.0; 2], &[1.0; 2], &[1.0; 2]).is_err());
        assert!(upgo_returns(&[0.0], &[], &[]).is_err());
        assert!(vtrace(&[0.0; 2], &[0.0; 2], &[0.0; 2], &[1.0; 2], 1.0, 1.0).is_err());
    }
}
