//! Rotations, nearest-neighbour queries, mesh normals and pinhole projection.

pub mod camera;
pub mod mesh;
pub mod nearest;
pub mod rotation;

pub use camera::{inverse_project, Camera, Projection, RigidTransform, NEAR_PLANE};
pub use mesh::{compute_vertex_normals, vertex_normals_backward, TriangleMesh};
pub use nearest::{nearest_vertex, Neighbor, PointGrid};
pub use rotation::{quat_to_rotmat, Quaternion};
