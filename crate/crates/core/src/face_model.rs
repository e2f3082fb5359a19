//! Synthetic linear blendshape face model.
//!
//! Vertices are `mean + exp_basis·α_exp + id_basis·α_id`, followed by a rigid
//! pose transform. The mouth-related subset is a fixed index list. A simple
//! perspective splatter turns vertices into a one-channel guide image.

use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::storage::{self, f32_round, BlobBuilder, BlobEntry};

/// One-channel guide image, row-major `[H, W]`.
pub type GuideImage = Array2<f32>;

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeBasis {
    /// `[V_total, 3]`
    pub mean_vertices: Array2<f64>,
    /// `[V_total, 3, h_c]`
    pub exp_basis: Array3<f64>,
    /// `[V_total, 3, h_id]`
    pub id_basis: Array3<f64>,
    pub mouth_index_set: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceCoefficients {
    pub alpha_id: Array1<f64>,
    pub alpha_exp: Array1<f64>,
    /// Rotation (rx, ry, rz) in radians followed by translation (tx, ty, tz).
    pub alpha_pose: [f64; 6],
}

impl FaceCoefficients {
    pub fn zeros(h_id: usize, h_c: usize) -> Self {
        Self {
            alpha_id: Array1::zeros(h_id),
            alpha_exp: Array1::zeros(h_c),
            alpha_pose: [0.0; 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MouthVertexSet {
    /// `[h_v, 3]`
    pub coords: Array2<f64>,
}

impl MouthVertexSet {
    pub fn new(coords: Array2<f64>) -> Result<Self> {
        if coords.ncols() != 3 {
            return Err(Error::argument(format!(
                "mouth vertex set must have 3 columns, got {}",
                coords.ncols()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("mouth vertex set contains non-finite values"));
        }
        Ok(Self { coords })
    }

    pub fn h_v(&self) -> usize {
        self.coords.nrows()
    }

    /// Row-major flattening `[h_v * 3]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.coords.iter().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub focal: f64,
    /// `(cx, cy)` in pixels.
    pub principal_point: [f64; 2],
    /// `(H, W)`
    pub canvas: (usize, usize),
}

impl CameraSpec {
    pub fn new(focal: f64, principal_point: [f64; 2], canvas: (usize, usize)) -> Result<Self> {
        if !(focal > 0.0) {
            return Err(Error::argument(format!("focal must be positive, got {focal}")));
        }
        if canvas.0 == 0 || canvas.1 == 0 {
            return Err(Error::argument("canvas dimensions must be positive"));
        }
        Ok(Self {
            focal,
            principal_point,
            canvas,
        })
    }

    /// Camera looking down +z with the principal point at the canvas center.
    pub fn centered(h: usize, w: usize, focal: f64) -> Result<Self> {
        Self::new(focal, [w as f64 / 2.0, h as f64 / 2.0], (h, w))
    }

    /// Default framing for synthetic faces placed at `z ≈ 4`.
    pub fn default_for(h: usize, w: usize) -> Result<Self> {
        Self::centered(h, w, 1.5 * w as f64)
    }
}

impl BlendshapeBasis {
    pub fn v_total(&self) -> usize {
        self.mean_vertices.nrows()
    }

    pub fn h_c(&self) -> usize {
        self.exp_basis.shape()[2]
    }

    pub fn h_id(&self) -> usize {
        self.id_basis.shape()[2]
    }

    pub fn h_v(&self) -> usize {
        self.mouth_index_set.len()
    }

    fn check(&self) -> Result<()> {
        let v = self.v_total();
        if self.mean_vertices.ncols() != 3
            || self.exp_basis.shape()[..2] != [v, 3]
            || self.id_basis.shape()[..2] != [v, 3]
        {
            return Err(Error::argument("basis arrays have inconsistent shapes"));
        }
        let mut seen = vec![false; v];
        for &i in &self.mouth_index_set {
            if i >= v || seen[i] {
                return Err(Error::argument(format!(
                    "mouth index {i} is out of range or duplicated"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    /// Expression basis restricted to the mouth vertices, laid out as
    /// `[h_c, h_v * 3]` so that `α_exp · M` yields flattened mouth offsets.
    pub fn mouth_exp_rows(&self) -> Array2<f64> {
        let h_c = self.h_c();
        let mut out = Array2::zeros((h_c, self.h_v() * 3));
        for (j, &vi) in self.mouth_index_set.iter().enumerate() {
            for a in 0..3 {
                for k in 0..h_c {
                    out[[k, j * 3 + a]] = self.exp_basis[[vi, a, k]];
                }
            }
        }
        out
    }

    /// Neutral mouth vertices for a given identity vector (`mean + id_basis·α_id`).
    pub fn mouth_neutral(&self, alpha_id: &Array1<f64>) -> Result<Array2<f64>> {
        if alpha_id.len() != self.h_id() {
            return Err(Error::argument(format!(
                "alpha_id has {} entries, basis expects {}",
                alpha_id.len(),
                self.h_id()
            )));
        }
        let mut out = Array2::zeros((self.h_v(), 3));
        for (j, &vi) in self.mouth_index_set.iter().enumerate() {
            for a in 0..3 {
                let mut acc = self.mean_vertices[[vi, a]];
                for (k, &c) in alpha_id.iter().enumerate() {
                    acc += self.id_basis[[vi, a, k]] * c;
                }
                out[[j, a]] = acc;
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        storage::ensure_dir(dir)?;
        let v = self.v_total();
        let mut blob = BlobBuilder::new("basis.f32");
        blob.push_f64("mean_vertices", &[v, 3], self.mean_vertices.as_slice().unwrap())?;
        blob.push_f64(
            "exp_basis",
            &[v, 3, self.h_c()],
            self.exp_basis.as_standard_layout().as_slice().unwrap(),
        )?;
        blob.push_f64(
            "id_basis",
            &[v, 3, self.h_id()],
            self.id_basis.as_standard_layout().as_slice().unwrap(),
        )?;
        let entry = blob.write(dir)?;
        let manifest = BasisManifest {
            seed: self.seed,
            v_total: v,
            h_c: self.h_c(),
            h_id: self.h_id(),
            h_v: self.h_v(),
            mouth_index_set: self.mouth_index_set.clone(),
            blob: entry,
        };
        storage::write_json(&dir.join("basis.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: BasisManifest = storage::read_json(&dir.join("basis.json"))?;
        let c = storage::read_blob(dir, &m.blob)?;
        let mean = c.get_f64("mean_vertices", &[m.v_total, 3])?;
        let exp = c.get_f64("exp_basis", &[m.v_total, 3, m.h_c])?;
        let id = c.get_f64("id_basis", &[m.v_total, 3, m.h_id])?;
        let basis = BlendshapeBasis {
            mean_vertices: Array2::from_shape_vec((m.v_total, 3), mean).unwrap(),
            exp_basis: Array3::from_shape_vec((m.v_total, 3, m.h_c), exp).unwrap(),
            id_basis: Array3::from_shape_vec((m.v_total, 3, m.h_id), id).unwrap(),
            mouth_index_set: m.mouth_index_set,
            seed: m.seed,
        };
        if basis.h_v() != m.h_v {
            return Err(Error::integrity("basis.json", "mouth index count disagrees with h_v"));
        }
        basis
            .check()
            .map_err(|e| Error::integrity("basis.json", e.to_string()))?;
        Ok(basis)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisManifest {
    seed: u64,
    v_total: usize,
    h_c: usize,
    h_id: usize,
    h_v: usize,
    mouth_index_set: Vec<usize>,
    blob: BlobEntry,
}

/// Smooth displacement field `a ⊙ sin(ω·(x, y) + φ)` with random parameters.
struct SmoothField {
    amp: [f64; 3],
    freq: [[f64; 2]; 3],
    phase: [f64; 3],
}

impl SmoothField {
    fn sample(rng: &mut ChaCha8Rng, amp: [f64; 3], max_freq: f64) -> Self {
        let mut freq = [[0.0; 2]; 3];
        let mut phase = [0.0; 3];
        for a in 0..3 {
            freq[a] = [
                rng.random_range(-max_freq..max_freq),
                rng.random_range(-max_freq..max_freq),
            ];
            phase[a] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        let sign: [f64; 3] = std::array::from_fn(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        Self {
            amp: [amp[0] * sign[0], amp[1] * sign[1], amp[2] * sign[2]],
            freq,
            phase,
        }
    }

    fn eval(&self, p: [f64; 3], axis: usize) -> f64 {
        let f = self.freq[axis];
        self.amp[axis] * (f[0] * p[0] + f[1] * p[1] + self.phase[axis]).sin()
    }
}

/// Deterministic synthetic blendshape basis.
///
/// Mouth vertices sit in a small ellipse below the face center; remaining
/// vertices fill the face oval. Basis columns are smooth displacement fields
/// normalized to unit Frobenius norm. All values are representable in `f32`.
pub fn make_synthetic_basis(
    seed: u64,
    v_total: usize,
    h_c: usize,
    h_id: usize,
    h_v: usize,
) -> Result<BlendshapeBasis> {
    if v_total == 0 || h_c == 0 || h_id == 0 || h_v == 0 {
        return Err(Error::argument("basis counts must be positive"));
    }
    if h_v > v_total {
        return Err(Error::argument(format!(
            "h_v ({h_v}) cannot exceed v_total ({v_total})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..v_total).collect();
    perm.shuffle(&mut rng);
    let mouth_index_set = perm[..h_v].to_vec();
    let mut is_mouth = vec![false; v_total];
    for &i in &mouth_index_set {
        is_mouth[i] = true;
    }

    let mut mean = Array2::zeros((v_total, 3));
    for v in 0..v_total {
        let (x, y) = if is_mouth[v] {
            let r = rng.random_range(0.0f64..1.0).sqrt();
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            (0.35 * r * t.cos(), 0.5 + 0.15 * r * t.sin())
        } else {
            loop {
                let r = rng.random_range(0.0f64..1.0).sqrt();
                let t = rng.random_range(0.0..std::f64::consts::TAU);
                let (x, y) = (0.9 * r * t.cos(), 1.1 * r * t.sin());
                let in_mouth = (x / 0.4).powi(2) + ((y - 0.5) / 0.2).powi(2) < 1.0;
                if !in_mouth {
                    break (x, y);
                }
            }
        };
        let z = 0.25 * (x * x + y * y);
        mean[[v, 0]] = f32_round(x);
        mean[[v, 1]] = f32_round(y);
        mean[[v, 2]] = f32_round(z);
    }

    let mut exp_basis = Array3::zeros((v_total, 3, h_c));
    for k in 0..h_c {
        let field = SmoothField::sample(&mut rng, [0.6, 1.0, 0.3], 6.0);
        for v in 0..v_total {
            let p = [mean[[v, 0]], mean[[v, 1]], mean[[v, 2]]];
            let w = if is_mouth[v] { 1.0 } else { 0.05 };
            for a in 0..3 {
                exp_basis[[v, a, k]] = w * field.eval(p, a);
            }
        }
        normalize_column(&mut exp_basis, k);
    }

    let mut id_basis = Array3::zeros((v_total, 3, h_id));
    for k in 0..h_id {
        let field = SmoothField::sample(&mut rng, [1.0, 1.0, 0.5], 2.0);
        for v in 0..v_total {
            let p = [mean[[v, 0]], mean[[v, 1]], mean[[v, 2]]];
            for a in 0..3 {
                id_basis[[v, a, k]] = field.eval(p, a);
            }
        }
        normalize_column(&mut id_basis, k);
    }

    Ok(BlendshapeBasis {
        mean_vertices: mean,
        exp_basis,
        id_basis,
        mouth_index_set,
        seed,
    })
}

fn normalize_column(basis: &mut Array3<f64>, k: usize) {
    let mut col = basis.slice_mut(ndarray::s![.., .., k]);
    let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        col.mapv_inplace(|x| f32_round(x / norm));
    }
}

/// Rotation matrix `Rz · Ry · Rx` for Euler angles in radians.
pub fn rotation_matrix(rx: f64, ry: f64, rz: f64) -> [[f64; 3]; 3] {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    [
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ]
}

/// Apply `R v + t` to every row in place.
pub fn apply_pose(vertices: &mut Array2<f64>, pose: &[f64; 6]) {
    if pose.iter().all(|&p| p == 0.0) {
        return;
    }
    let r = rotation_matrix(pose[0], pose[1], pose[2]);
    for mut row in vertices.rows_mut() {
        let p = [row[0], row[1], row[2]];
        for a in 0..3 {
            row[a] = r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2] + pose[3 + a];
        }
    }
}

fn check_coeffs(basis: &BlendshapeBasis, coeffs: &FaceCoefficients) -> Result<()> {
    if coeffs.alpha_exp.len() != basis.h_c() || coeffs.alpha_id.len() != basis.h_id() {
        return Err(Error::argument(format!(
            "coefficient dims (id {}, exp {}) do not match basis (id {}, exp {})",
            coeffs.alpha_id.len(),
            coeffs.alpha_exp.len(),
            basis.h_id(),
            basis.h_c()
        )));
    }
    Ok(())
}

fn blend_vertex(basis: &BlendshapeBasis, coeffs: &FaceCoefficients, v: usize, a: usize) -> f64 {
    let mut acc = basis.mean_vertices[[v, a]];
    for (k, &c) in coeffs.alpha_exp.iter().enumerate() {
        acc += basis.exp_basis[[v, a, k]] * c;
    }
    for (k, &c) in coeffs.alpha_id.iter().enumerate() {
        acc += basis.id_basis[[v, a, k]] * c;
    }
    acc
}

/// All vertices `[V_total, 3]`: blendshape sum, then rigid pose.
pub fn reconstruct_vertices(basis: &BlendshapeBasis, coeffs: &FaceCoefficients) -> Result<Array2<f64>> {
    check_coeffs(basis, coeffs)?;
    let v_total = basis.v_total();
    let mut out = Array2::zeros((v_total, 3));
    for v in 0..v_total {
        for a in 0..3 {
            out[[v, a]] = blend_vertex(basis, coeffs, v, a);
        }
    }
    apply_pose(&mut out, &coeffs.alpha_pose);
    Ok(out)
}

/// Mouth vertices only; bit-identical to reconstructing everything and gathering.
pub fn reconstruct_mouth(basis: &BlendshapeBasis, coeffs: &FaceCoefficients) -> Result<MouthVertexSet> {
    check_coeffs(basis, coeffs)?;
    let mut out = Array2::zeros((basis.h_v(), 3));
    for (j, &v) in basis.mouth_index_set.iter().enumerate() {
        for a in 0..3 {
            out[[j, a]] = blend_vertex(basis, coeffs, v, a);
        }
    }
    apply_pose(&mut out, &coeffs.alpha_pose);
    Ok(MouthVertexSet { coords: out })
}

pub fn extract_mouth_vertices(vertices: ArrayView2<'_, f64>, basis: &BlendshapeBasis) -> Result<MouthVertexSet> {
    if vertices.nrows() != basis.v_total() || vertices.ncols() != 3 {
        return Err(Error::argument(format!(
            "vertex array has shape {:?}, basis expects [{}, 3]",
            vertices.shape(),
            basis.v_total()
        )));
    }
    let mut out = Array2::zeros((basis.h_v(), 3));
    for (j, &v) in basis.mouth_index_set.iter().enumerate() {
        out.row_mut(j).assign(&vertices.row(v));
    }
    Ok(MouthVertexSet { coords: out })
}

/// Jacobian of the flattened mouth vertices w.r.t. `α_exp`, `[h_v * 3, h_c]`.
/// The blendshape map is linear, so this is the gathered basis slice rotated
/// by the pose.
pub fn mouth_exp_jacobian(basis: &BlendshapeBasis, pose: &[f64; 6]) -> Array2<f64> {
    let r = rotation_matrix(pose[0], pose[1], pose[2]);
    let h_c = basis.h_c();
    let mut jac = Array2::zeros((basis.h_v() * 3, h_c));
    for (j, &v) in basis.mouth_index_set.iter().enumerate() {
        for k in 0..h_c {
            let b = [
                basis.exp_basis[[v, 0, k]],
                basis.exp_basis[[v, 1, k]],
                basis.exp_basis[[v, 2, k]],
            ];
            for a in 0..3 {
                jac[[j * 3 + a, k]] = r[a][0] * b[0] + r[a][1] * b[1] + r[a][2] * b[2];
            }
        }
    }
    jac
}

/// Perspective-project and splat each vertex as `1/z` into its nearest pixel,
/// keeping the maximum on collisions. Vertices landing outside the canvas are
/// dropped.
pub fn project_to_guide_image(vertices: ArrayView2<'_, f64>, camera: &CameraSpec) -> Result<GuideImage> {
    let (h, w) = camera.canvas;
    let mut img = Array2::<f32>::zeros((h, w));
    if vertices.nrows() > 0 && vertices.ncols() != 3 {
        return Err(Error::argument("vertices must have 3 columns"));
    }
    for (i, row) in vertices.rows().into_iter().enumerate() {
        let (x, y, z) = (row[0], row[1], row[2]);
        if !(z > 0.0) {
            return Err(Error::Domain(format!(
                "vertex {i} has nonpositive camera-space depth {z}"
            )));
        }
        let u = camera.focal * x / z + camera.principal_point[0];
        let v = camera.focal * y / z + camera.principal_point[1];
        let col = (u + 0.5).floor();
        let rw = (v + 0.5).floor();
        if col < 0.0 || rw < 0.0 || col >= w as f64 || rw >= h as f64 {
            continue;
        }
        let val = (1.0 / z) as f32;
        let px = &mut img[[rw as usize, col as usize]];
        if val > *px {
            *px = val;
        }
    }
    Ok(img)
}

/// Projected pixel coordinates `(u, v)` of every vertex (no splatting).
pub fn project_points(vertices: ArrayView2<'_, f64>, camera: &CameraSpec) -> Result<Vec<[f64; 2]>> {
    vertices
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            if !(row[2] > 0.0) {
                return Err(Error::Domain(format!(
                    "vertex {i} has nonpositive camera-space depth {}",
                    row[2]
                )));
            }
            Ok([
                camera.focal * row[0] / row[2] + camera.principal_point[0],
                camera.focal * row[1] / row[2] + camera.principal_point[1],
            ])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn reference_dims(seed: u64) -> BlendshapeBasis {
        make_synthetic_basis(seed, 100, 85, 10, 69).unwrap()
    }

    #[test]
    fn basis_dimensions_and_invariants() {
        let b = reference_dims(0);
        assert_eq!(b.v_total(), 100);
        assert_eq!(b.h_c(), 85);
        assert_eq!(b.h_id(), 10);
        assert_eq!(b.h_v(), 69);
        b.check().unwrap();
        for k in 0..85 {
            let n: f64 = b.exp_basis.slice(ndarray::s![.., .., k]).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6, "column {k} norm {n}");
        }
        for k in 0..10 {
            let n: f64 = b.id_basis.slice(ndarray::s![.., .., k]).iter().map(|x| x * x).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn basis_is_deterministic_and_seed_sensitive() {
        assert_eq!(reference_dims(0), reference_dims(0));
        assert_ne!(reference_dims(0).mean_vertices, reference_dims(1).mean_vertices);
    }

    #[test]
    fn invalid_counts_rejected() {
        assert!(make_synthetic_basis(0, 10, 4, 2, 11).is_err());
        assert!(make_synthetic_basis(0, 10, 0, 2, 3).is_err());
    }

    #[test]
    fn zero_coefficients_give_mean() {
        let b = reference_dims(3);
        let c = FaceCoefficients::zeros(10, 85);
        assert_eq!(reconstruct_vertices(&b, &c).unwrap(), b.mean_vertices);
    }

    #[test]
    fn scaled_unit_expression_adds_basis_slice() {
        let b = reference_dims(4);
        for k in [0usize, 17, 84] {
            let mut c = FaceCoefficients::zeros(10, 85);
            c.alpha_exp[k] = 2.0;
            let v = reconstruct_vertices(&b, &c).unwrap();
            for vi in 0..100 {
                for a in 0..3 {
                    let expect = b.mean_vertices[[vi, a]] + 2.0 * b.exp_basis[[vi, a, k]];
                    assert!((v[[vi, a]] - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn translation_only_pose_shifts_mean() {
        let b = reference_dims(5);
        let mut c = FaceCoefficients::zeros(10, 85);
        c.alpha_pose = [0.0, 0.0, 0.0, 0.5, -1.0, 4.0];
        let v = reconstruct_vertices(&b, &c).unwrap();
        for vi in 0..100 {
            assert_eq!(v[[vi, 0]], b.mean_vertices[[vi, 0]] + 0.5);
            assert_eq!(v[[vi, 1]], b.mean_vertices[[vi, 1]] - 1.0);
            assert_eq!(v[[vi, 2]], b.mean_vertices[[vi, 2]] + 4.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_argument_error() {
        let b = reference_dims(0);
        let c = FaceCoefficients::zeros(10, 84);
        assert!(matches!(reconstruct_vertices(&b, &c), Err(Error::Argument(_))));
    }

    #[test]
    fn mouth_gather_variants() {
        let mut b = make_synthetic_basis(9, 6, 2, 1, 3).unwrap();
        let verts = Array2::from_shape_fn((6, 3), |(i, a)| (10 * i + a) as f64);

        b.mouth_index_set = vec![0, 1, 2];
        let m = extract_mouth_vertices(verts.view(), &b).unwrap();
        assert_eq!(m.coords, verts.slice(ndarray::s![0..3, ..]));

        b.mouth_index_set = vec![4, 0, 2];
        let m = extract_mouth_vertices(verts.view(), &b).unwrap();
        for (j, &src) in [4usize, 0, 2].iter().enumerate() {
            assert_eq!(m.coords.row(j), verts.row(src));
        }

        b.mouth_index_set = (0..6).collect();
        assert_eq!(extract_mouth_vertices(verts.view(), &b).unwrap().coords, verts);
    }

    #[test]
    fn mouth_fast_path_matches_gather() {
        let b = reference_dims(2);
        let mut c = FaceCoefficients::zeros(10, 85);
        c.alpha_exp.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64 * 0.37).sin());
        c.alpha_id.iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64 * 0.91).cos());
        c.alpha_pose = [0.05, -0.02, 0.01, 0.1, 0.0, 4.0];
        let all = reconstruct_vertices(&b, &c).unwrap();
        let gathered = extract_mouth_vertices(all.view(), &b).unwrap();
        assert_eq!(gathered, reconstruct_mouth(&b, &c).unwrap());
    }

    #[test]
    fn mouth_jacobian_matches_finite_differences() {
        let b = reference_dims(6);
        let mut c = FaceCoefficients::zeros(10, 85);
        c.alpha_exp.iter_mut().enumerate().for_each(|(i, x)| *x = 0.3 * (i as f64).sin());
        c.alpha_pose = [0.1, -0.2, 0.05, 0.0, 0.1, 3.0];
        let jac = mouth_exp_jacobian(&b, &c.alpha_pose);
        let eps = 1e-5;
        let mut max_rel = 0.0f64;
        for k in [0usize, 7, 40, 84] {
            let mut cp = c.clone();
            cp.alpha_exp[k] += eps;
            let mut cm = c.clone();
            cm.alpha_exp[k] -= eps;
            let p = reconstruct_mouth(&b, &cp).unwrap().flatten();
            let m = reconstruct_mouth(&b, &cm).unwrap().flatten();
            let fd: Vec<f64> = p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
            let col = jac.column(k);
            let num: f64 = fd.iter().zip(col.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            max_rel = max_rel.max(num / den);
        }
        assert!(max_rel < 1e-6, "relative error {max_rel}");
    }

    #[test]
    fn single_vertex_projects_to_center() {
        let cam64 = CameraSpec::centered(64, 64, 1.0).unwrap();
        let img64 = project_to_guide_image(array![[0.0, 0.0, 1.0]].view(), &cam64).unwrap();
        assert_eq!(img64[[32, 32]], 1.0);
        assert_eq!(img64.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn collisions_keep_nearest() {
        let cam = CameraSpec::centered(16, 16, 4.0).unwrap();
        // (0.5, 0, 1) and (1, 0, 2) both project to u = cx + 2
        let img = project_to_guide_image(array![[0.5, 0.0, 1.0], [1.0, 0.0, 2.0]].view(), &cam).unwrap();
        assert_eq!(img[[8, 10]], 1.0);
        assert_eq!(img.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn empty_vertices_blank_image() {
        let cam = CameraSpec::centered(8, 8, 4.0).unwrap();
        let img = project_to_guide_image(Array2::<f64>::zeros((0, 3)).view(), &cam).unwrap();
        assert!(img.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonpositive_depth_names_vertex() {
        let cam = CameraSpec::centered(8, 8, 4.0).unwrap();
        let err = project_to_guide_image(array![[0.0, 0.0, 1.0], [0.0, 0.0, -0.5]].view(), &cam).unwrap_err();
        match err {
            Error::Domain(msg) => assert!(msg.contains("vertex 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn camera_validation() {
        assert!(CameraSpec::new(0.0, [0.0, 0.0], (4, 4)).is_err());
        assert!(CameraSpec::new(1.0, [0.0, 0.0], (0, 4)).is_err());
    }

    #[test]
    fn basis_persistence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let b = reference_dims(11);
        b.save(dir.path()).unwrap();
        assert_eq!(BlendshapeBasis::load(dir.path()).unwrap(), b);
    }

    proptest! {
        #[test]
        fn expression_map_is_linear(seed in 0u64..50, s in -2.0f64..2.0, t in -2.0f64..2.0) {
            let b = make_synthetic_basis(seed, 30, 8, 3, 10).unwrap();
            let mut ca = FaceCoefficients::zeros(3, 8);
            let mut cb = FaceCoefficients::zeros(3, 8);
            for k in 0..8 {
                ca.alpha_exp[k] = s * (k as f64 + 1.0).sin();
                cb.alpha_exp[k] = t * (k as f64 * 2.0).cos();
            }
            let mut cab = FaceCoefficients::zeros(3, 8);
            cab.alpha_exp = &ca.alpha_exp + &cb.alpha_exp;
            let va = reconstruct_vertices(&b, &ca).unwrap();
            let vb = reconstruct_vertices(&b, &cb).unwrap();
            let vab = reconstruct_vertices(&b, &cab).unwrap();
            let lhs = &va + &vb - &b.mean_vertices;
            for (x, y) in vab.iter().zip(lhs.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }

        #[test]
        fn projection_shift_equivariance(delta in -5i32..5, x in -0.2f64..0.2, z in 1.0f64..3.0) {
            let cam = CameraSpec::centered(32, 32, 8.0).unwrap();
            // keep the base projection away from pixel borders
            let u = cam.focal * x / z;
            let x = (u.round() + 0.1) * z / cam.focal;
            let p0 = project_to_guide_image(array![[x, 0.0, z]].view(), &cam).unwrap();
            let shifted = x + delta as f64 * z / cam.focal;
            let p1 = project_to_guide_image(array![[shifted, 0.0, z]].view(), &cam).unwrap();
            let lit = |img: &GuideImage| img.indexed_iter().find(|(_, &v)| v > 0.0).map(|((r, c), _)| (r, c));
            let (r0, c0) = lit(&p0).unwrap();
            let (r1, c1) = lit(&p1).unwrap();
            prop_assert_eq!(r0, r1);
            prop_assert_eq!(c1 as i64 - c0 as i64, delta as i64);
        }
    }
}
