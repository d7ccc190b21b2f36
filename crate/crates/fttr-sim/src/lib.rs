//! Discrete-event simulator for cascaded TDM-PON + WiFi in-building networks
//! carrying XR collaboration traffic: bandwidth allocation (limited-service
//! and predictive), scheduled/contention wireless access, and QoE-triggered
//! seamless handover between access points.

pub mod handover;
pub mod metrics;
pub mod pon;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod traffic;
pub mod wifi;
pub mod engine;
