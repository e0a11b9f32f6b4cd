//! Latent geometry of labeled representation vectors: pairwise probes,
//! dissimilarity matrices, MDS/Isomap embeddings, affect-space alignment,
//! distance-based uncertainty and steering vectors.

pub mod align;
pub mod bundle;
pub mod dissim;
pub mod embed;
pub mod error;
pub mod logistic;
pub mod probe;
pub mod rng;
pub mod steer;
pub mod synth;
pub mod uq;

pub use align::{ProcrustesResult, ReferenceCoordinates};
pub use bundle::{ActivationBundle, ActivationRecord, LabelSet};
pub use dissim::{AccuracyMapping, DissimilarityMatrix, Metric};
pub use embed::{EmbeddingResult, GeodesicDiagnostics, Method, SpectrumDiagnostics};
pub use error::{Error, Result};
pub use probe::{PairProbe, ProbeConfig, ProbeGrid};
pub use steer::{Route, SteeringVectorSet};
pub use synth::{Scenario, SyntheticSpec};
pub use uq::{CalibratedUqModel, UqConfig, UqDataset, UqReport};
