//! Self-healing protocol for networks of constrained devices: tamper
//! detection by keyed attestation, chunk localization with a keyed bloom
//! filter, neighbor-assisted recovery over stream-signed transfers, update
//! propagation, and a deterministic simulator to evaluate it.

pub mod adversary;
pub mod analytics;
pub mod bloom;
pub mod code_image;
pub mod engine;
pub mod protocol;
pub mod topology;
