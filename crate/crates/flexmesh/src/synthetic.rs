//! Synthetic mesh factories for tests, benchmarks, and demos.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::mesh::TriMesh;

/// Two-triangle unit square with keypoints at opposite corners.
pub fn unit_square() -> TriMesh<f64> {
    TriMesh::new(
        vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        vec![[0, 1, 2], [0, 2, 3]],
        vec![0, 2],
    )
    .unwrap()
}

/// Jittered triangulated disk around the image center: `rings` concentric
/// rings of 8 vertices each around a hub, fanned into counter-clockwise
/// triangles. Keypoints are the hub and one rim vertex.
pub fn disk_mesh(seed: u64, rings: usize) -> TriMesh<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let per_ring = 8;
    let mut vertices = vec![[0.5 + rng.gen_range(-0.05..0.05), 0.5]];
    let mut faces = Vec::new();
    for r in 1..=rings {
        let rad = 0.4 * r as f64 / rings as f64;
        for k in 0..per_ring {
            let th = std::f64::consts::TAU * (k as f64 + 0.3 * rng.gen_range(-1.0..1.0f64))
                / per_ring as f64;
            vertices.push([0.5 + rad * th.cos(), 0.5 + rad * th.sin()]);
        }
    }
    for k in 0..per_ring {
        faces.push([0, 1 + k, 1 + (k + 1) % per_ring]);
    }
    for r in 1..rings {
        let a = 1 + (r - 1) * per_ring;
        let b = 1 + r * per_ring;
        for k in 0..per_ring {
            let k1 = (k + 1) % per_ring;
            faces.push([a + k, b + k, b + k1]);
            faces.push([a + k, b + k1, a + k1]);
        }
    }
    TriMesh::new(vertices, faces, vec![0, 1 + per_ring / 2]).unwrap()
}

/// Regular grid over `[margin, 1-margin]^2` split into triangles, with
/// `n_keypoints` spread over the vertex range. `nx`, `ny` count cells.
pub fn grid_mesh(nx: usize, ny: usize, n_keypoints: usize) -> TriMesh<f64> {
    let margin = 0.1;
    let span = 1.0 - 2.0 * margin;
    let mut vertices = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            vertices.push([
                margin + span * i as f64 / nx as f64,
                margin + span * j as f64 / ny as f64,
            ]);
        }
    }
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut faces = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    let n = vertices.len();
    let keypoints: Vec<usize> = (0..n_keypoints)
        .map(|k| k * (n - 1) / n_keypoints.max(1))
        .collect();
    TriMesh::new(vertices, faces, keypoints).unwrap()
}
