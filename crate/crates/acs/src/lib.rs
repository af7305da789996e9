//! Std side of adaptive conformal selection: CSV ingest, the Monte Carlo
//! harness, the steerable session service behind the `/v1` HTTP API, and the
//! CLI plumbing.

pub mod bench;
pub mod io;
pub mod server;
pub mod session;
