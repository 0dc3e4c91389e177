//! Shapelet-guided selective forecasting.
//!
//! Per-window forecast errors on a validation split pick out the contexts a
//! forecaster handles badly. Shift-invariant dictionary learning turns those
//! contexts into a small set of shapelets, and test windows whose contexts
//! sit closest to a shapelet (z-normalized Euclidean distance) are withheld
//! up to a chosen drop percentage.
//!
//! ```
//! use shapesel::select::{compute_threshold, discard_by_distance};
//!
//! let tau = compute_threshold(0.5, 0.25, 2.0).tau;
//! assert_eq!(tau, 1.0);
//!
//! let sel = discard_by_distance(0.4, &[3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
//! assert_eq!(sel.dropped.iter().copied().collect::<Vec<_>>(), vec![1, 2]);
//! ```

pub mod data;
pub mod distance;
pub mod forecast;
pub mod pipeline;
pub mod report;
pub mod select;
pub mod sidl;
pub mod synth;
