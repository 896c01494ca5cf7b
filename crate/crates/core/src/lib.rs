//! Grid model, power flow, contingency screening, signed field reports and
//! data capsules with taint tracking.

pub mod api;
pub mod capsule;
pub mod contingency;
pub mod fixtures;
pub mod grid;
pub mod powerflow;
pub mod report;
