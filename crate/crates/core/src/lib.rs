//! Poisson N-mixture matrix factorization.
//!
//! Observed interaction counts `y_ij` on an `I x J` bipartite network are
//! modelled as a binomial thinning of latent Poisson counts:
//!
//! ```text
//! lambda_ij = u_i . v_j          (u_i, v_j >= 0)
//! N_ij      ~ Poisson(lambda_ij)
//! p_ij      = alpha . z_ij       (0 <= p_ij <= 1)
//! y_ij      ~ Binomial(N_ij, p_ij)
//! ```
//!
//! Marginally `y_ij ~ Poisson(p_ij * lambda_ij)`, so maximum likelihood
//! reduces to a weighted KL-divergence factorization coupled with a
//! box-constrained Poisson regression for the detection weights. The
//! [`fit`] module alternates between an ADMM solve for `alpha`
//! ([`admm`]) and multiplicative updates for the factors ([`mu`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod baselines;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod mu;
pub mod synth;

pub use error::{NmixError, Result};
pub use fit::{fit, FitConfig, FitResult, Fitter};
pub use model::{CountDataset, DetectionModel, FactorModel, FeatureSet, LatentCounts};
