//! The seven-bus test network shipped with the crate.
//!
//! Buses 4, 5 and 6 sit in the south-west of the map and are fed through
//! branches 4-7; the generation (buses 1 and 2) and the unloaded spare yard
//! (bus 7, radial via branch 9) are in the east. Branch 10 is an
//! out-of-service spare. Impedances and ratings are illustrative.

use crate::grid::{parse_grid, GridSpec};

pub const SEVEN_BUS_JSON: &str = include_str!("../fixtures/seven_bus.json");

/// Branches whose midpoints lie in the south-west quadrant of the map.
pub const SOUTH_WEST_BRANCHES: [u32; 3] = [5, 6, 7];

/// Radial branch to the unloaded bus 7.
pub const RADIAL_STUB_BRANCH: u32 = 9;

/// Out-of-service spare branch.
pub const SPARE_BRANCH: u32 = 10;

pub fn seven_bus() -> GridSpec {
    parse_grid(SEVEN_BUS_JSON).expect("shipped fixture parses")
}
