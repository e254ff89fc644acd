//! Federated training simulator for dual-gated mixture-of-experts policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernel`]: dense matrices, softmax, cosine similarity, Huber loss, Adam
//!   and finite-difference gradient estimates.
//! * [`nn`]: attention, layer norm and feed-forward blocks with manual backward.
//! * [`dgmoe`]: the dual-gated mixture-of-experts layer and routing counts.
//! * [`scene`]: instruction-driven grouping of scene tokens.
//! * [`client`]: stem / trunk / head model and the local training loop.
//! * [`server`]: expert-driven aggregation and the FedAvg baseline.
//! * [`harness`]: synthetic tasks, experiment loop and metrics export.
//!
//! All numeric code is generic over [`Scalar`]; the simulator runs on `f64`
//! through the aliases below.

pub mod client;
pub mod dgmoe;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod scene;
pub mod server;
pub mod tensor_io;

pub use error::{Error, Result};
pub use params::Params;
pub use scalar::Scalar;

pub type Matrix = kernel::DenseMatrix<f64>;
pub type DgmoeLayer = dgmoe::DgmoeLayer<f64>;
pub type ClientModel = client::ClientModel<f64>;
pub type Trunk = client::Trunk<f64>;
pub type Client = client::Client<f64>;
