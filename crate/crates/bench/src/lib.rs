//! Fixtures shared by the benchmarks.

use bilagrid::pipeline::synthetic::synthetic_scene;
use bilagrid::{Camera, VoxelScene};

/// Synthetic scene and a camera looking at it from above.
pub fn scene_fixture(resolution: usize, image_size: usize) -> (VoxelScene, Camera) {
    let scene = synthetic_scene(resolution, 0).expect("valid resolution");
    let cam = Camera::look_at(0, [1.2, -2.2, 1.6], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], image_size, image_size, 30.0);
    (scene, cam)
}
