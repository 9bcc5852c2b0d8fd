use crate::gradcore::Backend;

use super::{Result, TrainError};

/// Backward recursion `V(t) = r_t + gamma * ((1 - lambda) * v_{t+1} + lambda * V(t+1))`
/// with `V(H) = v_H`. Takes `H` rewards and `H + 1` values.
pub fn lambda_returns(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    check_lengths(rewards.len(), values.len())?;
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        next = rewards[t] + gamma * ((1.0 - lambda) * values[t + 1] + lambda * next);
        out[t] = next;
    }
    Ok(out)
}

/// Graph version of [`lambda_returns`] over batched columns, performing the
/// same floating-point operations in the same order.
pub fn lambda_returns_graph<B: Backend>(
    b: &mut B,
    rewards: &[B::Value],
    values: &[B::Value],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<B::Value>> {
    check_lengths(rewards.len(), values.len())?;
    let h = rewards.len();
    let mut out = Vec::with_capacity(h);
    let mut next = values[h].clone();
    for t in (0..h).rev() {
        let bootstrap = b.scale(&values[t + 1], 1.0 - lambda);
        let carried = b.scale(&next, lambda);
        let mixed = b.add(&bootstrap, &carried)?;
        let discounted = b.scale(&mixed, gamma);
        next = b.add(&rewards[t], &discounted)?;
        out.push(next.clone());
    }
    out.reverse();
    Ok(out)
}

fn check_lengths(rewards: usize, values: usize) -> Result<()> {
    if rewards == 0 || values != rewards + 1 {
        return Err(TrainError::ReturnLengths { rewards, values });
    }
    Ok(())
}
