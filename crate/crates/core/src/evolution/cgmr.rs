//! Conditional Gaussian mixture regression over a joint `[input | output]` mixture.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gmm::{gmm_fit_em, EmConfig, Gmm};
use crate::belief::systematic_resample;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, psd_factor, sample_with_factor, symmetrize, Gaussian};
use crate::scalar::{log_sum_exp, Scalar};

const INPUT_BLOCK_JITTER: f64 = 1e-9;

/// Per-component pieces of the conditioning identity, computed once.
#[derive(Debug, Clone)]
struct ConditionalBlock<S: Scalar> {
    log_weight: S,
    input_marginal: Gaussian<S>,
    output_mean: DVector<S>,
    /// `Σ_OI Σ_II⁻¹`
    gain: DMatrix<S>,
    covariance: DMatrix<S>,
    factor: DMatrix<S>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
struct CgmrRepr<S: Scalar> {
    joint: Gmm<S>,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
}

/// Regression model `p(output | input)` read off a joint Gaussian mixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
#[serde(try_from = "CgmrRepr<S>", into = "CgmrRepr<S>")]
pub struct CgmrModel<S: Scalar> {
    joint: Gmm<S>,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
    blocks: Vec<ConditionalBlock<S>>,
}

impl<S: Scalar> TryFrom<CgmrRepr<S>> for CgmrModel<S> {
    type Error = Error;
    fn try_from(r: CgmrRepr<S>) -> Result<Self> {
        CgmrModel::new(r.joint, r.input_dims, r.output_dims)
    }
}

impl<S: Scalar> From<CgmrModel<S>> for CgmrRepr<S> {
    fn from(m: CgmrModel<S>) -> Self {
        CgmrRepr {
            joint: m.joint,
            input_dims: m.input_dims,
            output_dims: m.output_dims,
        }
    }
}

impl<S: Scalar> PartialEq for CgmrModel<S> {
    fn eq(&self, other: &Self) -> bool {
        self.joint == other.joint && self.input_dims == other.input_dims && self.output_dims == other.output_dims
    }
}

fn block<S: Scalar>(m: &DMatrix<S>, rows: &[usize], cols: &[usize]) -> DMatrix<S> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn pick<S: Scalar>(v: &DVector<S>, idx: &[usize]) -> DVector<S> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

impl<S: Scalar> CgmrModel<S> {
    /// `input_dims` and `output_dims` must partition the joint dimensions.
    pub fn new(joint: Gmm<S>, input_dims: Vec<usize>, output_dims: Vec<usize>) -> Result<Self> {
        let dim = joint.dim();
        let mut seen = vec![false; dim];
        for &d in input_dims.iter().chain(&output_dims) {
            if d >= dim || seen[d] {
                return Err(Error::InvalidInput(
                    "input and output dims must partition the joint dimensions".into(),
                ));
            }
            seen[d] = true;
        }
        if seen.iter().any(|s| !s) || input_dims.is_empty() || output_dims.is_empty() {
            return Err(Error::InvalidInput(
                "input and output dims must partition the joint dimensions".into(),
            ));
        }
        let blocks = joint
            .weights
            .iter()
            .zip(&joint.means)
            .zip(&joint.covariances)
            .map(|((&w, mu), cov)| {
                let s_ii = block(cov, &input_dims, &input_dims);
                let s_oi = block(cov, &output_dims, &input_dims);
                let s_oo = block(cov, &output_dims, &output_dims);
                let chol = cholesky_jittered(&symmetrize(&s_ii), S::lit(INPUT_BLOCK_JITTER))?;
                let gain = chol.solve(&s_oi.transpose()).transpose();
                let covariance = symmetrize(&(s_oo - &gain * s_oi.transpose()));
                let factor = psd_factor(&covariance);
                Ok(ConditionalBlock {
                    log_weight: w.ln(),
                    input_marginal: Gaussian::new(pick(mu, &input_dims), &s_ii, S::lit(INPUT_BLOCK_JITTER))?,
                    output_mean: pick(mu, &output_dims),
                    gain,
                    covariance,
                    factor,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            joint,
            input_dims,
            output_dims,
            blocks,
        })
    }

    /// Fits the joint mixture to stacked `[input | output]` samples.
    pub fn fit(inputs: &[DVector<S>], outputs: &[DVector<S>], n_components: usize, cfg: &EmConfig) -> Result<Self> {
        if inputs.len() != outputs.len() {
            return Err(Error::LengthMismatch {
                left: inputs.len(),
                right: outputs.len(),
            });
        }
        if inputs.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        let (ni, no) = (inputs[0].len(), outputs[0].len());
        let stacked: Vec<DVector<S>> = inputs
            .iter()
            .zip(outputs)
            .map(|(i, o)| DVector::from_iterator(ni + no, i.iter().chain(o.iter()).copied()))
            .collect();
        let joint = gmm_fit_em(&stacked, n_components, cfg)?;
        Self::new(joint, (0..ni).collect(), (ni..ni + no).collect())
    }

    pub fn joint(&self) -> &Gmm<S> {
        &self.joint
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    fn conditional_weights(&self, input: &DVector<S>) -> Result<Vec<S>> {
        if input.len() != self.input_dims.len() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dims.len(),
                found: input.len(),
            });
        }
        let logs: Vec<S> = self
            .blocks
            .iter()
            .map(|b| b.log_weight + b.input_marginal.log_pdf(input))
            .collect();
        let norm = log_sum_exp(&logs);
        if !norm.is_finite_value() {
            // Input far outside every component: fall back to the prior weights.
            return Ok(self.joint.weights.clone());
        }
        Ok(logs.iter().map(|&l| (l - norm).exp()).collect())
    }

    fn conditional_mean(&self, g: usize, input: &DVector<S>) -> DVector<S> {
        let b = &self.blocks[g];
        &b.output_mean + &b.gain * (input - &b.input_marginal.mean)
    }
}

/// Conditional mixture over the output dims given `input`.
pub fn cgmr_condition<S: Scalar>(model: &CgmrModel<S>, input: &DVector<S>) -> Result<Gmm<S>> {
    let weights = model.conditional_weights(input)?;
    let means = (0..model.blocks.len()).map(|g| model.conditional_mean(g, input)).collect();
    let covariances = model.blocks.iter().map(|b| b.covariance.clone()).collect();
    Ok(Gmm {
        weights,
        means,
        covariances,
    })
}

/// Ancestral draw: component by conditional weight, then its Gaussian.
pub fn cgmr_sample<S: Scalar, R: Rng + ?Sized>(model: &CgmrModel<S>, input: &DVector<S>, rng: &mut R) -> Result<DVector<S>> {
    let weights = model.conditional_weights(input)?;
    let g = if weights.len() == 1 {
        0
    } else {
        systematic_resample(&weights, 1, rng)[0]
    };
    let mean = model.conditional_mean(g, input);
    Ok(sample_with_factor(&mean, &model.blocks[g].factor, rng))
}
