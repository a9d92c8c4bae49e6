//! Simulation suite for synchronization and controlled de-synchronization in
//! networked oscillator systems: droop-controlled microgrids with DAPI/RADAPI
//! secondary control, thermostatically controlled load fleets, and two-area
//! conformist-contrarian Kuramoto power grids.

pub mod analysis;
pub mod cli;
pub mod microgrid;
pub mod netgraph;
pub mod powergrid;
pub mod scenarios;
pub mod simcore;
pub mod tcl;
