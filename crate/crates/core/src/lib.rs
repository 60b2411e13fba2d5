//! Asynchronous capture of model-internal tensors.
//!
//! Capture points copy kept batch slices into a device-side payload ring and
//! publish fixed-size descriptors into a host-visible meta ring. A bounded
//! multi-stage exporter drains both, re-associates each payload with its
//! host-side metadata and hands per-request records to a sink. A per-step
//! policy decides between stalling for completeness and dropping requests
//! from observation.

pub mod capture;
pub mod config;
pub mod exporter;
pub mod policy;
pub mod ring;
pub mod sim;
