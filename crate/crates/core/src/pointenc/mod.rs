//! Synthetic shape data and the point-cloud feature path: farthest point
//! patching, a shared per-point MLP with max pooling, and the projection
//! into query-former width.

mod dataset;
mod encoder;
mod shapes;

pub use dataset::{make_dataset, read_points, write_points, Dataset, ShapeSample, Split, COLORS};
pub use encoder::{
    encode_grouped, encode_patches, farthest_point_sample, group_points, init_params, mlp_project,
    nearest_neighbors, EncoderConfig, Grouping, PatchFeatures,
};
pub use shapes::{generate_shape, PointCloud, ShapeKind, POINT_DIM};
