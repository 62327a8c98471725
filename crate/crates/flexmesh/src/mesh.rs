//! Triangle meshes and their first-order differential operators.
//!
//! A mesh lives in normalized image coordinates: the unit square `[0,1]^2`
//! with y growing downward (image convention). Faces are counter-clockwise
//! in that frame. Everything downstream (the deformation solver, the
//! Jacobian-field machinery) is built from three per-face objects assembled
//! here:
//!
//! * the gradient operator, which turns per-vertex scalars into per-face
//!   constant 2-vectors,
//! * the diagonal mass given by face areas,
//! * the cotangent Laplacian, assembled exactly as gradient^T * mass *
//!   gradient so the discrete integration-by-parts identity holds to
//!   rounding and the deformation solver reproduces rest poses exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cross2, mat2_add, mat2_dist_sq, mat2_identity, mat2_scale, mat2_zero, outer2, perp2, scale2,
    sub2, DenseMat, Mat2, Vec2,
};
use crate::scalar::{real, to_f64, Real};

/// Smallest admissible face area, as a fraction of the unit square.
pub const MIN_FACE_AREA: f64 = 1e-12;

/// Triangle mesh over the unit square with a distinguished ordered subset of
/// control vertices ("keypoints") that the animation stage drives directly.
#[derive(Debug, Clone)]
pub struct TriMesh<T> {
    vertices: Vec<Vec2<T>>,
    faces: Vec<[usize; 3]>,
    keypoint_ids: Vec<usize>,
}

impl<T: Real> TriMesh<T> {
    /// Validates connectivity and geometry: indices in range, distinct
    /// keypoints, finite coordinates, and positively oriented faces with
    /// area above [`MIN_FACE_AREA`].
    pub fn new(
        vertices: Vec<Vec2<T>>,
        faces: Vec<[usize; 3]>,
        keypoint_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::invalid("mesh needs at least 3 vertices"));
        }
        if faces.is_empty() {
            return Err(Error::invalid("mesh needs at least one face"));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !(v[0].is_finite() && v[1].is_finite()) {
                return Err(Error::invalid(format!("vertex {i} has non-finite coordinates")));
            }
        }
        for (f, face) in faces.iter().enumerate() {
            for &vid in face {
                if vid >= n {
                    return Err(Error::invalid(format!(
                        "face {f} references vertex {vid}, but the mesh has {n} vertices"
                    )));
                }
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::invalid(format!("face {f} repeats a vertex")));
            }
            let a = signed_area(
                vertices[face[0]],
                vertices[face[1]],
                vertices[face[2]],
            );
            if !(to_f64(a) > MIN_FACE_AREA) {
                return Err(Error::invalid(format!(
                    "face {f} is degenerate or clockwise (signed area {:.3e}); faces must be \
                     counter-clockwise with area > {MIN_FACE_AREA:.0e}",
                    to_f64(a)
                )));
            }
        }
        if keypoint_ids.is_empty() {
            return Err(Error::invalid("mesh needs at least one keypoint"));
        }
        let mut seen = vec![false; n];
        for &k in &keypoint_ids {
            if k >= n {
                return Err(Error::invalid(format!(
                    "keypoint id {k} out of range for {n} vertices"
                )));
            }
            if seen[k] {
                return Err(Error::invalid(format!("keypoint id {k} repeated")));
            }
            seen[k] = true;
        }
        Ok(TriMesh {
            vertices,
            faces,
            keypoint_ids,
        })
    }

    pub fn vertices(&self) -> &[Vec2<T>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn keypoint_ids(&self) -> &[usize] {
        &self.keypoint_ids
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Rest positions of the keypoints, in keypoint order.
    pub fn keypoint_positions(&self) -> Vec<Vec2<T>> {
        self.keypoint_ids.iter().map(|&k| self.vertices[k]).collect()
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let raw: MeshJson = serde_json::from_str(&text)?;
        raw.into_mesh()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let raw = MeshJson {
            vertices: self.vertices.iter().map(|v| [to_f64(v[0]), to_f64(v[1])]).collect(),
            faces: self.faces.clone(),
            keypoints: self.keypoint_ids.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&raw)?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct MeshJson {
    vertices: Vec<[f64; 2]>,
    faces: Vec<[usize; 3]>,
    keypoints: Vec<usize>,
}

impl MeshJson {
    fn into_mesh<T: Real>(self) -> Result<TriMesh<T>> {
        let vertices = self
            .vertices
            .into_iter()
            .map(|v| [real::<T>(v[0]), real::<T>(v[1])])
            .collect();
        TriMesh::new(vertices, self.faces, self.keypoints)
    }
}

/// Twice the signed area is the cross product of two edges; counter-clockwise
/// triangles are positive.
#[inline]
pub fn signed_area<T: Real>(p0: Vec2<T>, p1: Vec2<T>, p2: Vec2<T>) -> T {
    cross2(sub2(p1, p0), sub2(p2, p0)) * real::<T>(0.5)
}

/// One 2x2 matrix per face. The field either describes the target
/// deformation gradient handed to the solver or the Jacobian extracted from
/// a deformed vertex set.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField<T> {
    faces: Vec<Mat2<T>>,
}

impl<T: Real> JacobianField<T> {
    pub fn new(faces: Vec<Mat2<T>>) -> Self {
        JacobianField { faces }
    }

    pub fn zeros(face_count: usize) -> Self {
        JacobianField {
            faces: vec![mat2_zero(); face_count],
        }
    }

    pub fn identity(face_count: usize) -> Self {
        JacobianField {
            faces: vec![mat2_identity(); face_count],
        }
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn faces(&self) -> &[Mat2<T>] {
        &self.faces
    }

    pub fn faces_mut(&mut self) -> &mut [Mat2<T>] {
        &mut self.faces
    }

    /// Elementwise `self + scale * other`.
    pub fn add_scaled(&self, other: &JacobianField<T>, scale: T) -> JacobianField<T> {
        assert_eq!(self.faces.len(), other.faces.len(), "field size mismatch");
        JacobianField {
            faces: self
                .faces
                .iter()
                .zip(&other.faces)
                .map(|(a, b)| mat2_add(*a, mat2_scale(*b, scale)))
                .collect(),
        }
    }

    /// Sum over faces of the squared Frobenius distance to `other`.
    pub fn dist_sq(&self, other: &JacobianField<T>) -> T {
        assert_eq!(self.faces.len(), other.faces.len(), "field size mismatch");
        self.faces
            .iter()
            .zip(&other.faces)
            .map(|(a, b)| mat2_dist_sq(*a, *b))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.faces
            .iter()
            .all(|m| m.iter().flatten().all(|x| x.is_finite()))
    }

    /// Flattens to `[f, row, col]` order, used by checkpoints and encoders.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.faces.len() * 4);
        for m in &self.faces {
            out.extend_from_slice(&[m[0][0], m[0][1], m[1][0], m[1][1]]);
        }
        out
    }

    pub fn from_flat(face_count: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != face_count * 4 {
            return Err(Error::invalid(format!(
                "jacobian field expects {} scalars, got {}",
                face_count * 4,
                flat.len()
            )));
        }
        let faces = flat
            .chunks_exact(4)
            .map(|c| [[c[0], c[1]], [c[2], c[3]]])
            .collect();
        Ok(JacobianField { faces })
    }
}

/// Per-face gradient vectors, face areas, and the assembled cotangent
/// Laplacian for one rest mesh.
///
/// For face `f` with corner `i`, `grads[f][i]` is the constant gradient of
/// that corner's hat function restricted to the face. The Laplacian entry is
/// `L[i][j] = sum_f area_f * grads[f][i] . grads[f][j]`, which equals the
/// classic half-cotangent stencil and is exactly gradient^T * mass *
/// gradient by construction.
#[derive(Debug, Clone)]
pub struct DifferentialOperators<T> {
    faces: Vec<[usize; 3]>,
    grads: Vec<[Vec2<T>; 3]>,
    mass: Vec<T>,
    laplacian: DenseMat<T>,
    vertex_count: usize,
}

/// Builds gradient, mass, and Laplacian from rest geometry.
pub fn build_operators<T: Real>(mesh: &TriMesh<T>) -> DifferentialOperators<T> {
    let n = mesh.vertex_count();
    let mut grads = Vec::with_capacity(mesh.face_count());
    let mut mass = Vec::with_capacity(mesh.face_count());
    let mut laplacian = DenseMat::zeros(n, n);
    for face in mesh.faces() {
        let p = [
            mesh.vertices()[face[0]],
            mesh.vertices()[face[1]],
            mesh.vertices()[face[2]],
        ];
        let area = signed_area(p[0], p[1], p[2]);
        let inv_2a = (area + area).recip();
        // Gradient of corner i's hat function: rotate the opposite edge a
        // quarter turn and divide by twice the area.
        let g = [
            scale2(perp2(sub2(p[2], p[1])), inv_2a),
            scale2(perp2(sub2(p[0], p[2])), inv_2a),
            scale2(perp2(sub2(p[1], p[0])), inv_2a),
        ];
        for a in 0..3 {
            for b in 0..3 {
                let w = area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
                laplacian[(face[a], face[b])] += w;
            }
        }
        grads.push(g);
        mass.push(area);
    }
    DifferentialOperators {
        faces: mesh.faces().to_vec(),
        grads,
        mass,
        laplacian,
        vertex_count: n,
    }
}

impl<T: Real> DifferentialOperators<T> {
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    /// Hat-function gradients for each face corner.
    pub fn grads(&self) -> &[[Vec2<T>; 3]] {
        &self.grads
    }

    /// Face areas (the diagonal mass).
    pub fn mass(&self) -> &[T] {
        &self.mass
    }

    pub fn laplacian(&self) -> &DenseMat<T> {
        &self.laplacian
    }

    /// Per-face deformation Jacobians of a vertex configuration: for face f,
    /// `J_f = sum_i position_i * grad_i^T`, the unique 2x2 matrix such that
    /// the affine map of the face takes rest tangents to deformed tangents.
    pub fn compute_jacobians(&self, vertices: &[Vec2<T>]) -> JacobianField<T> {
        assert_eq!(vertices.len(), self.vertex_count, "vertex count mismatch");
        let faces = self
            .faces
            .iter()
            .zip(&self.grads)
            .map(|(face, g)| {
                let mut j = mat2_zero();
                for i in 0..3 {
                    j = mat2_add(j, outer2(vertices[face[i]], g[i]));
                }
                j
            })
            .collect();
        JacobianField::new(faces)
    }

    /// Adjoint of [`Self::compute_jacobians`]: pulls a cotangent on the
    /// Jacobian field back to a cotangent on vertex positions.
    pub fn compute_jacobians_adjoint(&self, d_field: &JacobianField<T>) -> Vec<Vec2<T>> {
        assert_eq!(d_field.face_count(), self.faces.len(), "face count mismatch");
        let mut d_verts = vec![[T::zero(); 2]; self.vertex_count];
        for ((face, g), dj) in self.faces.iter().zip(&self.grads).zip(d_field.faces()) {
            for i in 0..3 {
                let dv = &mut d_verts[face[i]];
                for r in 0..2 {
                    dv[r] += dj[r][0] * g[i][0] + dj[r][1] * g[i][1];
                }
            }
        }
        d_verts
    }

    /// Divergence-like pullback `gradient^T * mass * field`: for vertex i,
    /// `sum_{f containing i} area_f * J_f * grad_i`. This is the right-hand
    /// side ingredient of the Poisson step, and for `field = jacobians(V)`
    /// it equals `laplacian * V` exactly.
    pub fn divergence(&self, field: &JacobianField<T>) -> Vec<Vec2<T>> {
        assert_eq!(field.face_count(), self.faces.len(), "face count mismatch");
        let mut out = vec![[T::zero(); 2]; self.vertex_count];
        for ((face, g), (j, area)) in self
            .faces
            .iter()
            .zip(&self.grads)
            .zip(field.faces().iter().zip(&self.mass))
        {
            for i in 0..3 {
                let o = &mut out[face[i]];
                for r in 0..2 {
                    o[r] += *area * (j[r][0] * g[i][0] + j[r][1] * g[i][1]);
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::divergence`] in its field argument.
    pub fn divergence_adjoint(&self, d_out: &[Vec2<T>]) -> JacobianField<T> {
        assert_eq!(d_out.len(), self.vertex_count, "vertex count mismatch");
        let faces = self
            .faces
            .iter()
            .zip(&self.grads)
            .zip(&self.mass)
            .map(|((face, g), area)| {
                let mut dj = mat2_zero();
                for i in 0..3 {
                    let d = d_out[face[i]];
                    for r in 0..2 {
                        dj[r][0] += *area * d[r] * g[i][0];
                        dj[r][1] += *area * d[r] * g[i][1];
                    }
                }
                dj
            })
            .collect();
        JacobianField::new(faces)
    }
}
