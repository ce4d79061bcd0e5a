//! Problem-domain primitives: instances, tours, coordinate normalisation,
//! nearest-neighbour queries, grid regions and the gap metric.

mod geometry;
mod instance;
mod tour;

pub use geometry::{
    assign_regions, distance_matrix, gap, k_nearest_available, normalize_coords, RegionAssignment,
};
pub(crate) use geometry::nearest_among;
pub use instance::{MetricMode, Point, TspInstance};
pub use tour::{path_length, tour_length, Tour};
