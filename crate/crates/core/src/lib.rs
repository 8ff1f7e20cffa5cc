//! Multi-way alignment of embedding spaces into a shared universe.
//!
//! - [`linalg`]: dense kernels (SVD, symmetric eigen, Procrustes) and preprocessing.
//! - [`dataio`]: the `MWAL` container, manifests, synthetic data, correspondence noise.
//! - [`align`]: pairwise maps, GPA universes, incremental addition, translation.
//! - [`gcca`]: the spectral shared-basis solver.
//! - [`gcpa`]: consensus directions and the trust-penalised residual corrector.
//! - [`eval`]: retrieval, probing, clustering, agreement and drift metrics.

pub mod align;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gcca;
pub mod gcpa;
pub mod linalg;
pub mod seed;

pub use align::{fit_gpa, fit_pairwise, GpaConfig, InitMode, PairwiseMaps, Universe};
pub use dataio::{Correspondence, EmbeddingMatrix, Split};
pub use gcpa::{fit_corrector, Corrector, TrainConfig, Trust};
pub use error::{Error, Result};
pub use linalg::{Matrix, OrthogonalMap};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
