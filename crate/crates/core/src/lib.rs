//! AR(1)-correlated Gaussian approximate posteriors for variational
//! autoencoders, with closed-form KL, O(d) reparametrized sampling, analytic
//! gradients, and a small dense VAE trainer to compare them against the
//! usual diagonal posterior.

pub mod ar1;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod dense;
pub mod error;
pub mod nets;
pub mod oracle;
pub mod posterior;
pub mod trainer;

pub use ar1::Ar1Cov;
pub use dense::DenseMatrix;
pub use error::{Error, Result};
pub use nets::{PosteriorKind, Vae, VaeSpec};
pub use posterior::{Ar1Posterior, DiagPosterior, LatentSample, Posterior};
pub use trainer::{ReconLoss, TrainConfig};
