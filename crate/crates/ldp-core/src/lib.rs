//! Delegate protocol core.
//!
//! Identity cards describe delegates as models with measurable properties,
//! payloads are negotiated across an ordered set of modes with automatic
//! fallback, sessions keep context server-side, results carry provenance,
//! and trust domains gate who may talk to whom. The [`simharness`] module
//! replays the protocol's routing, payload, session, security and fallback
//! experiments deterministically.

#![forbid(unsafe_code)]

pub mod delegates;
pub mod fixtures;
pub mod identity;
pub mod payload;
pub mod provenance;
pub mod routing;
pub mod session;
pub mod simharness;
pub mod trust;
pub mod validation;
pub mod wire;

pub use identity::{CapabilityEntry, CostLevel, DelegateIdentityCard, LabelMap};
pub use payload::{EncodedPayload, ModeSet, PayloadMode, SemanticFrame};
pub use provenance::ProvenanceRecord;
pub use validation::{ValidationReport, Violation};
pub use wire::{KeyMaterial, MessageEnvelope, MessageType, Nonce};
