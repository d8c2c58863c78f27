//! Selective state-space scanning over 3D volumes.

mod group_mamba;
mod order;
mod scan;

pub use group_mamba::{CrossGroupModulation, GroupMamba3d, GroupSpec, MambaGroup};
pub use order::{flatten_volume, unflatten_volume, Direction, ScanAxis, ScanOrder};
pub use scan::{scan_dims, selective_scan, ScanDims};
