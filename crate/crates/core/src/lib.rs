//! Multi-modal multi-instance multi-label learning with optimal-transport
//! losses and a jointly learned label ground metric.
//!
//! The crate is organised around the training stack:
//!
//! * [`ot`] — entropic optimal transport: Sinkhorn plans and distances, the
//!   centered dual subgradient used for predictor updates, and an exact
//!   transportation-simplex solver used as a test oracle.
//! * [`metric`] — the latent label ground metric: PSD similarity kernels,
//!   kernel-to-cost conversion, Burg-divergence regularisation and the
//!   closed-form per-batch kernel update.
//! * [`net`] — small per-modality feed-forward networks with a bag-concept
//!   layer, configurable pooling/fusion and an optional decoder for
//!   reconstruction of unlabeled instances.
//! * [`train`] — the alternating optimisation loop (supervised and
//!   semi-supervised), checkpointing and epoch logging.
//! * [`metrics`] — the six multi-label ranking criteria.
//! * [`data`] — synthetic correlated dataset generation, the JSONL dataset
//!   format and the split protocol.

pub mod data;
pub mod linalg;
pub mod metric;
pub mod metrics;
pub mod net;
pub mod ot;
pub mod train;
