use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::evolution::{gmm_fit_em, EmConfig};
use crate::scalar::Scalar;

/// Picks the hidden-state count by fitting a full-covariance mixture to the
/// pooled frames for each candidate and minimizing
/// `BIC = −2·loglik + params·ln(n)`.
///
/// Candidates with fewer than ten frames per component are skipped; if none
/// can be fitted the smallest candidate is returned.
pub fn select_hidden_states_bic<S: Scalar>(
    sequences: &[Vec<DVector<S>>],
    candidates: &[usize],
    cfg: &EmConfig,
) -> Result<usize> {
    let smallest = *candidates
        .iter()
        .min()
        .ok_or_else(|| Error::InvalidInput("no candidate state counts".into()))?;
    if candidates.len() == 1 {
        return Ok(smallest);
    }
    let frames: Vec<DVector<S>> = sequences.iter().flatten().cloned().collect();
    let n = frames.len() as f64;
    let mut best: Option<(usize, f64)> = None;
    for &k in candidates {
        if k == 0 || frames.len() < 10 * k {
            continue;
        }
        let gmm = match gmm_fit_em(&frames, k, cfg) {
            Ok(g) => g,
            Err(Error::InvalidInput(_)) => continue,
            Err(e) => return Err(e),
        };
        let ll = gmm.log_likelihood(&frames)?.as_f64();
        let bic = -2.0 * ll + gmm.parameter_count() as f64 * n.ln();
        if best.is_none_or(|(_, b)| bic < b) {
            best = Some((k, bic));
        }
    }
    Ok(best.map_or(smallest, |(k, _)| k))
}
