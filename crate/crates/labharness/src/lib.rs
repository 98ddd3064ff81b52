//! Loopback QUIC endpoints that reproduce, per server library, the parts of
//! the first server flight the fingerprinting relies on: ServerHello
//! extension order, transport parameter order, and the reply to an
//! unsupported ALPN.
//!
//! Endpoints complete the handshake only as far as EncryptedExtensions.

mod farm;
mod mutate;
mod script;
mod server;

pub use farm::{endpoint_seed, max_in_window, Farm, Manifest, ManifestEndpoint, ManifestError};
pub use mutate::{mutate_tp_values, MutateError};
pub use script::{library_script, library_scripts, CloseSpec, FlightScript, Refusal, SniPolicy, TpBehavior};
pub use server::{ArrivalLog, Endpoint, Sampler, ServerState, UniformSampler};
