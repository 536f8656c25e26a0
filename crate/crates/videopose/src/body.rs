//! Articulated body model: shape blendshapes, forward kinematics over a
//! joint tree, linear blend skinning, a fitted joint regressor, and a
//! weak-perspective camera. Everything runs on the autodiff tape so pose,
//! shape, and camera gradients flow end to end.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this squared angle, Rodrigues switches to its series expansion.
const RODRIGUES_SERIES_EPS2: f64 = 1e-16;

#[derive(Debug, Error)]
pub enum BodyError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed body model file: {0}")]
    Malformed(String),
}

/// Weak-perspective camera: x = s·Π(R·X) + t, with Π orthographic onto xy.
/// `r` is an axis-angle rotation, `t` lives in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    pub s: f64,
    pub r: [f64; 3],
    pub t: [f64; 2],
}

impl CameraParams {
    pub fn identity() -> Self {
        CameraParams { s: 1.0, r: [0.0; 3], t: [0.0; 2] }
    }

    /// Raw 6-vector layout used by the camera regressor: (ln s, r, t).
    pub fn from_raw(raw: &[f64]) -> Self {
        CameraParams {
            s: raw[0].exp(),
            r: [raw[1], raw[2], raw[3]],
            t: [raw[4], raw[5]],
        }
    }

    pub fn to_raw(&self) -> [f64; 6] {
        [self.s.ln(), self.r[0], self.r[1], self.r[2], self.t[0], self.t[1]]
    }
}

/// Camera components mounted on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CamVars {
    pub s: Var,
    pub r: Var,
    pub t: Var,
}

/// Split a raw camera 6-vector (ln s, r, t) into tape components, applying
/// the exp reparameterization that keeps scale positive.
pub fn cam_from_raw(tape: &mut Tape, raw: Var) -> CamVars {
    let s_raw = tape.slice(raw, 0, 1);
    let s = tape.exp(s_raw);
    let r = tape.slice(raw, 1, 4);
    let t = tape.slice(raw, 4, 6);
    CamVars { s, r, t }
}

pub fn cam_constant(tape: &mut Tape, cam: &CameraParams) -> CamVars {
    let s = tape.constant(Tensor::vector(vec![cam.s]));
    let r = tape.constant(Tensor::vector(cam.r.to_vec()));
    let t = tape.constant(Tensor::vector(cam.t.to_vec()));
    CamVars { s, r, t }
}

// ── Rodrigues ────────────────────────────────────────────────────────────────

/// Plain-value axis-angle to rotation matrix (row-major 3×3).
pub fn rodrigues_matrix(v: [f64; 3]) -> [f64; 9] {
    let t2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (c1, c2) = rodrigues_coeffs(t2);
    let k = skew(v);
    let k2 = mat3_mul(&k, &k);
    let mut r = [0.0; 9];
    for i in 0..9 {
        r[i] = c1 * k[i] + c2 * k2[i];
    }
    r[0] += 1.0;
    r[4] += 1.0;
    r[8] += 1.0;
    r
}

/// (sin θ/θ, (1−cos θ)/θ²) with the θ→0 series below the switch point.
fn rodrigues_coeffs(theta2: f64) -> (f64, f64) {
    if theta2 < RODRIGUES_SERIES_EPS2 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        ((theta.sin()) / theta, (1.0 - theta.cos()) / theta2)
    }
}

fn skew(v: [f64; 3]) -> [f64; 9] {
    [0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0]
}

fn mat3_mul(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            out[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
        }
    }
    out
}

/// Selector such that `S · v` is the flattened skew matrix of `v`.
fn skew_selector() -> Tensor {
    let mut s = vec![0.0; 27];
    // rows of flattened K: [0, -z, y, z, 0, -x, -y, x, 0]
    s[1 * 3 + 2] = -1.0;
    s[2 * 3 + 1] = 1.0;
    s[3 * 3 + 2] = 1.0;
    s[5 * 3 + 0] = -1.0;
    s[6 * 3 + 1] = -1.0;
    s[7 * 3 + 0] = 1.0;
    Tensor::matrix(9, 3, s).unwrap()
}

/// Axis-angle `v [3]` to rotation matrix `[3×3]` on the tape. Built from
/// primitive ops (the graph is re-created per evaluation, so the small-angle
/// branch is picked using the current value).
pub fn rodrigues(tape: &mut Tape, v: Var) -> Var {
    assert_eq!(tape.value(v).shape(), [3], "rodrigues expects an axis-angle 3-vector");
    let theta2 = tape.dot(v, v);
    let (c1, c2) = if tape.value(theta2).item() < RODRIGUES_SERIES_EPS2 {
        let c1 = tape.affine(theta2, -1.0 / 6.0, 1.0);
        let c2 = tape.affine(theta2, -1.0 / 24.0, 0.5);
        (c1, c2)
    } else {
        let theta = tape.sqrt(theta2);
        let sin = tape.sin(theta);
        let c1 = tape.div(sin, theta);
        let cos = tape.cos(theta);
        let one_minus_cos = tape.affine(cos, -1.0, 1.0);
        let c2 = tape.div(one_minus_cos, theta2);
        (c1, c2)
    };
    let sel = tape.constant(skew_selector());
    let k_flat = tape.matvec(sel, v);
    let k = tape.reshape(k_flat, vec![3, 3]);
    let k2 = tape.matmul(k, k);
    let term1 = tape.mul_scalar_var(k, c1);
    let term2 = tape.mul_scalar_var(k2, c2);
    let eye = tape.constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let sum = tape.add(term1, term2);
    tape.add(eye, sum)
}

// ── Body model ───────────────────────────────────────────────────────────────

/// Procedural articulated body: a joint tree with rest offsets, a vertex
/// template with linear shape blendshapes, skinning weights, and a joint
/// regressor fitted to the rest pose.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyModel {
    /// Parent of each joint; entry 0 is the root and parents itself.
    pub parents: Vec<usize>,
    /// Rest-pose joint positions [J×3]; the root sits at the origin.
    pub rest_joints: Tensor,
    /// Rest-pose vertices [V×3].
    pub template: Tensor,
    /// Shape blendshapes [B × 3V], each row a flattened displacement field.
    pub shape_basis: Tensor,
    /// Skinning weights [V×J]; every row is convex.
    pub skin_weights: Tensor,
    /// Joint regressor [k×V]; rows convex, fitted so W·template = rest joints.
    pub joint_regressor: Tensor,
    /// Triangles indexing template vertices.
    pub faces: Vec<[u32; 3]>,
}

impl BodyModel {
    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn num_verts(&self) -> usize {
        self.template.dims2().0
    }

    pub fn num_regressed(&self) -> usize {
        self.joint_regressor.dims2().0
    }

    pub fn num_shapes(&self) -> usize {
        self.shape_basis.dims2().0
    }

    /// Shape basis transposed to [3V × B] for the blendshape matvec.
    fn basis_t(&self) -> Tensor {
        let (b, n3) = self.shape_basis.dims2();
        let mut data = vec![0.0; n3 * b];
        for i in 0..b {
            for j in 0..n3 {
                data[j * b + i] = self.shape_basis.at2(i, j);
            }
        }
        Tensor::matrix(n3, b, data).unwrap()
    }
}

/// Per-tape constants of one body model, mounted once and reused by every
/// frame on that tape.
pub struct BodyVars {
    template: Var,
    basis_t: Var,
    /// -rest_j, used to center vertices before each joint's rotation.
    neg_rest: Vec<Var>,
    /// rest_j − rest_parent(j), the bone offset applied in the parent frame.
    offsets: Vec<Var>,
    root_rest: Var,
    /// Column j of the skinning weights.
    wcols: Vec<Var>,
    regressor: Var,
    parents: Vec<usize>,
}

impl BodyModel {
    pub fn mount(&self, tape: &mut Tape) -> BodyVars {
        let j = self.num_joints();
        let v = self.num_verts();
        let template = tape.constant(self.template.clone());
        let basis_t = tape.constant(self.basis_t());
        let mut neg_rest = Vec::with_capacity(j);
        let mut offsets = Vec::with_capacity(j);
        for jj in 0..j {
            let r = self.rest_joints.row(jj);
            neg_rest.push(tape.constant(Tensor::vector(vec![-r[0], -r[1], -r[2]])));
            let p = self.rest_joints.row(self.parents[jj]);
            offsets.push(
                tape.constant(Tensor::vector(vec![r[0] - p[0], r[1] - p[1], r[2] - p[2]])),
            );
        }
        let root_rest = tape.constant(Tensor::vector(self.rest_joints.row(0).to_vec()));
        let mut wcols = Vec::with_capacity(j);
        for jj in 0..j {
            let col: Vec<f64> = (0..v).map(|vv| self.skin_weights.at2(vv, jj)).collect();
            wcols.push(tape.constant(Tensor::vector(col)));
        }
        let regressor = tape.constant(self.joint_regressor.clone());
        BodyVars {
            template,
            basis_t,
            neg_rest,
            offsets,
            root_rest,
            wcols,
            regressor,
            parents: self.parents.clone(),
        }
    }
}

/// Pose and shape to world-space mesh and regressed joints.
///
/// `theta` is the flattened per-joint axis-angle vector [3J], `beta` the
/// shape coefficients [B]. Shape displaces the template before skinning;
/// joints are posed along the kinematic chain, each rotating about its rest
/// offset; vertices follow by linear blend skinning; returned joints are
/// `joint_regressor · mesh`.
pub fn body_forward(tape: &mut Tape, body: &BodyVars, theta: Var, beta: Var) -> (Var, Var) {
    let j = body.parents.len();
    assert_eq!(tape.value(theta).numel(), 3 * j, "theta must hold 3 values per joint");

    // Shaped template = template + Σ βᵢ · basisᵢ.
    let (v, _) = tape.value(body.template).dims2();
    let disp_flat = tape.matvec(body.basis_t, beta);
    let disp = tape.reshape(disp_flat, vec![v, 3]);
    let shaped = tape.add(body.template, disp);

    // Forward kinematics: world rotation and position per joint.
    let mut rot_w: Vec<Var> = Vec::with_capacity(j);
    let mut pos_w: Vec<Var> = Vec::with_capacity(j);
    for jj in 0..j {
        let axis = tape.slice(theta, 3 * jj, 3 * jj + 3);
        let local = rodrigues(tape, axis);
        if jj == 0 {
            rot_w.push(local);
            pos_w.push(body.root_rest);
        } else {
            let par = body.parents[jj];
            rot_w.push(tape.matmul(rot_w[par], local));
            let step = tape.matvec(rot_w[par], body.offsets[jj]);
            pos_w.push(tape.add(pos_w[par], step));
        }
    }

    // Linear blend skinning: Σⱼ wⱼ ⊙ (R_wⱼ·(x − restⱼ) + p_wⱼ).
    let mut mesh: Option<Var> = None;
    for jj in 0..j {
        let centered = tape.add_row_broadcast(shaped, body.neg_rest[jj]);
        let rotated = tape.matmul_nt(centered, rot_w[jj]);
        let placed = tape.add_row_broadcast(rotated, pos_w[jj]);
        let weighted = tape.mul_rows(placed, body.wcols[jj]);
        mesh = Some(match mesh {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    let mesh = mesh.expect("body with no joints");
    let joints = tape.matmul(body.regressor, mesh);
    (mesh, joints)
}

/// Convenience wrapper that mounts the model constants itself.
pub fn body_forward_simple(
    tape: &mut Tape,
    model: &BodyModel,
    theta: Var,
    beta: Var,
) -> (Var, Var) {
    let consts = model.mount(tape);
    body_forward(tape, &consts, theta, beta)
}

// ── Projection and rendering ─────────────────────────────────────────────────

/// Weak-perspective projection of `points [n×3]` to `[n×2]`:
/// x = s·Π(R·X) + t with Π dropping the z row.
pub fn project(tape: &mut Tape, points: Var, cam: &CamVars) -> Var {
    let rot = rodrigues(tape, cam.r);
    let rotated = tape.matmul_nt(points, rot);
    let sel = tape.constant(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap());
    let xy = tape.matmul(rotated, sel);
    let scaled = tape.mul_scalar_var(xy, cam.s);
    tape.add_row_broadcast(scaled, cam.t)
}

/// Differentiable silhouette: project the mesh and splat every vertex as an
/// isotropic Gaussian onto an `h×w` grid.
pub fn soft_silhouette(
    tape: &mut Tape,
    mesh: Var,
    cam: &CamVars,
    h: usize,
    w: usize,
    sigma_px: f64,
) -> Var {
    let pts = project(tape, mesh, cam);
    tape.gaussian_splat(pts, h, w, sigma_px)
}

// ── Default body construction ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct BodyConfig {
    pub num_verts: usize,
    pub num_shapes: usize,
    /// Largest shape displacement, meters.
    pub max_shape_disp: f64,
}

impl Default for BodyConfig {
    fn default() -> Self {
        BodyConfig { num_verts: 200, num_shapes: 10, max_shape_disp: 0.02 }
    }
}

const MARKERS_PER_JOINT: usize = 4;
const MARKER_RADIUS: f64 = 0.01;

/// The 12-joint desk-scale humanoid: root, spine, neck, head, two
/// shoulder/elbow arms, two hip/knee legs. Pelvis sits at the origin so a
/// root rotation and a camera rotation act about the same point.
fn humanoid_topology() -> (Vec<usize>, Vec<[f64; 3]>) {
    let parents = vec![0, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10];
    let joints = vec![
        [0.00, 0.00, 0.0],  // pelvis (root)
        [0.00, 0.25, 0.0],  // spine
        [0.00, 0.50, 0.0],  // neck
        [0.00, 0.65, 0.0],  // head
        [0.20, 0.45, 0.0],  // left shoulder
        [0.45, 0.45, 0.0],  // left elbow
        [-0.20, 0.45, 0.0], // right shoulder
        [-0.45, 0.45, 0.0], // right elbow
        [0.10, -0.05, 0.0], // left hip
        [0.10, -0.50, 0.0], // left knee
        [-0.10, -0.05, 0.0], // right hip
        [-0.10, -0.50, 0.0], // right knee
    ];
    (parents, joints)
}

/// Deterministic procedural body: ellipsoidal vertex shells around each bone,
/// four marker vertices per joint (so the regressor reproduces rest joints
/// exactly), smooth random shape blendshapes, and distance-based skinning.
pub fn make_default_body(seed: u64, cfg: &BodyConfig) -> BodyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (parents, joints) = humanoid_topology();
    let j = parents.len();
    let marker_count = j * MARKERS_PER_JOINT;
    assert!(
        cfg.num_verts >= marker_count + 4 * (j - 1),
        "need at least {} vertices for markers and shells",
        marker_count + 4 * (j - 1)
    );

    let mut verts: Vec<[f64; 3]> = Vec::with_capacity(cfg.num_verts);
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_verts);
    let mut faces: Vec<[u32; 3]> = Vec::new();

    // Markers: a symmetric cross around each joint, rigidly attached to it.
    for (jj, joint) in joints.iter().enumerate() {
        for offset in [
            [MARKER_RADIUS, 0.0, 0.0],
            [-MARKER_RADIUS, 0.0, 0.0],
            [0.0, MARKER_RADIUS, 0.0],
            [0.0, -MARKER_RADIUS, 0.0],
        ] {
            verts.push([joint[0] + offset[0], joint[1] + offset[1], joint[2] + offset[2]]);
            let mut w = vec![0.0; j];
            w[jj] = 1.0;
            weights.push(w);
        }
    }

    // Shells: ellipsoids around each bone, four vertices per ring.
    let bones: Vec<(usize, usize)> = (1..j).map(|c| (parents[c], c)).collect();
    let shell_total = cfg.num_verts - marker_count;
    let base = shell_total / bones.len();
    let extra = shell_total % bones.len();
    for (bi, &(p, c)) in bones.iter().enumerate() {
        let quota = base + usize::from(bi < extra);
        let a = joints[p];
        let b = joints[c];
        let axis = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let dir = [axis[0] / len, axis[1] / len, axis[2] / len];
        // Any perpendicular pair will do; bones here never align with +z±x.
        let mut u = cross(dir, [0.0, 0.0, 1.0]);
        let un = norm3(u);
        if un < 1e-9 {
            u = cross(dir, [1.0, 0.0, 0.0]);
        }
        let u = normalize3(u);
        let w_axis = cross(dir, u);
        let radius = bone_radius(p, c);
        let half = len * 0.5 + 0.02;
        let mid = [(a[0] + b[0]) * 0.5, (a[1] + b[1]) * 0.5, (a[2] + b[2]) * 0.5];

        let rings = quota.div_ceil(4).max(2);
        let ring_start = verts.len();
        let mut placed = 0;
        for t in 0..rings {
            let s = -1.0 + 2.0 * (t as f64 + 0.5) / rings as f64;
            let rc = radius * (1.0 - s * s).max(0.0).sqrt().max(0.15);
            for q in 0..4 {
                if placed == quota {
                    break;
                }
                let ang = std::f64::consts::TAU * (q as f64 + 0.5 * (t % 2) as f64) / 4.0;
                let (cs, sn) = (ang.cos(), ang.sin());
                let pos = [
                    mid[0] + s * half * dir[0] + rc * (cs * u[0] + sn * w_axis[0]),
                    mid[1] + s * half * dir[1] + rc * (cs * u[1] + sn * w_axis[1]),
                    mid[2] + s * half * dir[2] + rc * (cs * u[2] + sn * w_axis[2]),
                ];
                verts.push(pos);
                // Blend between the bone endpoints by distance.
                let dp = dist3(pos, a);
                let dc = dist3(pos, b);
                let wp = (-(dp / 0.15).powi(2)).exp();
                let wc = (-(dc / 0.15).powi(2)).exp();
                let mut wrow = vec![0.0; j];
                wrow[p] = wp / (wp + wc);
                wrow[c] = wc / (wp + wc);
                weights.push(wrow);
                placed += 1;
            }
        }
        // Triangulate complete rings into a tube.
        let full_rings = placed / 4;
        for t in 0..full_rings.saturating_sub(1) {
            for q in 0..4 {
                let a0 = (ring_start + t * 4 + q) as u32;
                let a1 = (ring_start + t * 4 + (q + 1) % 4) as u32;
                let b0 = (ring_start + (t + 1) * 4 + q) as u32;
                let b1 = (ring_start + (t + 1) * 4 + (q + 1) % 4) as u32;
                faces.push([a0, a1, b1]);
                faces.push([a0, b1, b0]);
            }
        }
    }
    assert_eq!(verts.len(), cfg.num_verts);

    // Joint regressor: the mean of each joint's markers is exactly the joint.
    let mut regressor = vec![0.0; j * cfg.num_verts];
    for jj in 0..j {
        for m in 0..MARKERS_PER_JOINT {
            regressor[jj * cfg.num_verts + jj * MARKERS_PER_JOINT + m] =
                1.0 / MARKERS_PER_JOINT as f64;
        }
    }

    // Shape basis: smooth sinusoidal displacement fields over rest positions,
    // scaled so the largest per-vertex displacement is below the cap.
    let mut basis = vec![0.0; cfg.num_shapes * cfg.num_verts * 3];
    for bshape in 0..cfg.num_shapes {
        let row = &mut basis[bshape * cfg.num_verts * 3..(bshape + 1) * cfg.num_verts * 3];
        for _harmonic in 0..3 {
            let dir = normalize3([
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let freq: f64 = rng.gen_range(0.5..3.0);
            let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            for (vi, vert) in verts.iter().enumerate() {
                let arg = freq * (dir[0] * vert[0] + dir[1] * vert[1] + dir[2] * vert[2]) + phase;
                let s = arg.sin();
                for ax in 0..3 {
                    row[vi * 3 + ax] += amp[ax] * s;
                }
            }
        }
        let max_disp = (0..cfg.num_verts)
            .map(|vi| norm3([row[vi * 3], row[vi * 3 + 1], row[vi * 3 + 2]]))
            .fold(0.0, f64::max);
        let target = rng.gen_range(0.5..1.0) * cfg.max_shape_disp;
        let scale = if max_disp > 0.0 { target / max_disp } else { 0.0 };
        for x in row.iter_mut() {
            *x *= scale;
        }
    }

    let template = Tensor::from_rows(&verts.iter().map(|v| v.to_vec()).collect::<Vec<_>>());
    let skin_weights = Tensor::from_rows(&weights);
    BodyModel {
        parents,
        rest_joints: Tensor::from_rows(&joints.iter().map(|v| v.to_vec()).collect::<Vec<_>>()),
        template,
        shape_basis: Tensor::matrix(cfg.num_shapes, cfg.num_verts * 3, basis).unwrap(),
        skin_weights,
        joint_regressor: Tensor::matrix(j, cfg.num_verts, regressor).unwrap(),
        faces,
    }
}

fn bone_radius(parent: usize, child: usize) -> f64 {
    match (parent, child) {
        (0, 1) | (1, 2) => 0.10, // torso
        (2, 3) => 0.08,          // head
        _ => 0.05,               // limbs
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = norm3(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3([a[0] - b[0], a[1] - b[1], a[2] - b[2]])
}

// ── Serialization ────────────────────────────────────────────────────────────

/// Write the model: text header with the dimensions, then fixed-order binary
/// sections (little-endian).
pub fn save_body_model(model: &BodyModel, path: &Path) -> Result<(), BodyError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bodymodel 1")?;
    writeln!(w, "joints {}", model.num_joints())?;
    writeln!(w, "vertices {}", model.num_verts())?;
    writeln!(w, "regressed {}", model.num_regressed())?;
    writeln!(w, "shapes {}", model.num_shapes())?;
    writeln!(w, "faces {}", model.faces.len())?;
    writeln!(w, "binary")?;
    for &p in &model.parents {
        w.write_all(&(p as u32).to_le_bytes())?;
    }
    for section in [
        &model.rest_joints,
        &model.template,
        &model.shape_basis,
        &model.skin_weights,
        &model.joint_regressor,
    ] {
        for &v in section.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for f in &model.faces {
        for &i in f {
            w.write_all(&i.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_body_model(path: &Path) -> Result<BodyModel, BodyError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header = std::collections::HashMap::new();
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "bodymodel 1" {
        return Err(BodyError::Malformed(format!("bad first line {line:?}")));
    }
    loop {
        line.clear();
        r.read_line(&mut line)?;
        let trimmed = line.trim();
        if trimmed == "binary" {
            break;
        }
        let (key, value) = trimmed
            .split_once(' ')
            .ok_or_else(|| BodyError::Malformed(format!("bad header line {trimmed:?}")))?;
        let value: usize = value
            .parse()
            .map_err(|_| BodyError::Malformed(format!("bad header value {trimmed:?}")))?;
        header.insert(key.to_string(), value);
    }
    let get = |k: &str| {
        header.get(k).copied().ok_or_else(|| BodyError::Malformed(format!("missing header {k}")))
    };
    let j = get("joints")?;
    let v = get("vertices")?;
    let k = get("regressed")?;
    let b = get("shapes")?;
    let nf = get("faces")?;

    let mut parents = Vec::with_capacity(j);
    for _ in 0..j {
        parents.push(read_u32_le(&mut r)? as usize);
    }
    let rest_joints = read_f64_tensor(&mut r, vec![j, 3])?;
    let template = read_f64_tensor(&mut r, vec![v, 3])?;
    let shape_basis = read_f64_tensor(&mut r, vec![b, v * 3])?;
    let skin_weights = read_f64_tensor(&mut r, vec![v, j])?;
    let joint_regressor = read_f64_tensor(&mut r, vec![k, v])?;
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        faces.push([read_u32_le(&mut r)?, read_u32_le(&mut r)?, read_u32_le(&mut r)?]);
    }
    Ok(BodyModel { parents, rest_joints, template, shape_basis, skin_weights, joint_regressor, faces })
}

fn read_u32_le<R: Read>(r: &mut R) -> Result<u32, BodyError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64_tensor<R: Read>(r: &mut R, shape: Vec<usize>) -> Result<Tensor, BodyError> {
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    let mut b = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut b)?;
        *v = f64::from_le_bytes(b);
    }
    Tensor::new(shape, data).map_err(|e| BodyError::Malformed(e.to_string()))
}

/// Dump a posed mesh as Wavefront OBJ (1-indexed faces).
pub fn write_obj<W: Write>(w: &mut W, mesh: &Tensor, faces: &[[u32; 3]]) -> std::io::Result<()> {
    let (n, three) = mesh.dims2();
    assert_eq!(three, 3, "mesh rows must be xyz");
    for i in 0..n {
        let r = mesh.row(i);
        writeln!(w, "v {} {} {}", r[0], r[1], r[2])?;
    }
    for f in faces {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::finite_diff_check;
    use crate::store::ParameterStore;
    use rand::Rng;

    fn desk_body() -> BodyModel {
        make_default_body(7, &BodyConfig { num_verts: 96, ..BodyConfig::default() })
    }

    #[test]
    fn rodrigues_zero_is_identity() {
        let r = rodrigues_matrix([0.0, 0.0, 0.0]);
        assert_eq!(r, [1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    }

    #[test]
    fn rodrigues_quarter_turn_about_z_maps_x_to_y() {
        let r = rodrigues_matrix([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        // R·x̂ = first column
        let col = [r[0], r[3], r[6]];
        assert!((col[0]).abs() < 1e-12 && (col[1] - 1.0).abs() < 1e-12 && col[2].abs() < 1e-12,
            "R·x̂ = {col:?}, expected ŷ");
    }

    #[test]
    fn rodrigues_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let v = [
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            ];
            let ours = rodrigues_matrix(v);
            let axis = nalgebra::Vector3::new(v[0], v[1], v[2]);
            let theirs = nalgebra::Rotation3::from_scaled_axis(axis);
            for i in 0..3 {
                for j in 0..3 {
                    assert!(
                        (ours[3 * i + j] - theirs[(i, j)]).abs() < 1e-12,
                        "rodrigues({v:?}) differs from nalgebra at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn rodrigues_is_orthonormal_and_inverts_by_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let r = rodrigues_matrix(v);
            let rn = rodrigues_matrix([-v[0], -v[1], -v[2]]);
            let prod = mat3_mul(&r, &rn);
            for i in 0..3 {
                for j in 0..3 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!(
                        (prod[3 * i + j] - want).abs() < 1e-12,
                        "R(v)·R(-v) != I for {v:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn rodrigues_tape_matches_plain_and_is_smooth_at_series_switch() {
        for v in [[1e-9, -2e-9, 5e-10], [1e-5, 0.0, 0.0], [0.3, -0.7, 1.1]] {
            let mut tape = Tape::new();
            let vv = tape.leaf(Tensor::vector(v.to_vec()));
            let r = rodrigues(&mut tape, vv);
            let plain = rodrigues_matrix(v);
            for (a, b) in tape.value(r).data().iter().zip(plain.iter()) {
                assert!((a - b).abs() < 1e-14, "tape rodrigues differs at {v:?}");
            }
        }
    }

    #[test]
    fn rodrigues_gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let v: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let probe: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut store = ParameterStore::new();
            let p = store.register("v", Tensor::vector(v));
            let err = finite_diff_check(&mut store, |tape, store| {
                let vv = tape.param(store, p);
                let r = rodrigues(tape, vv);
                let w = tape.constant(Tensor::matrix(3, 3, probe.clone()).unwrap());
                tape.dot(r, w)
            });
            assert!(err < 1e-7, "rodrigues gradient error {err} at seed {seed}");
        }
    }

    #[test]
    fn default_body_is_deterministic_and_well_formed() {
        let a = make_default_body(42, &BodyConfig::default());
        let b = make_default_body(42, &BodyConfig::default());
        assert_eq!(a, b, "same seed must reproduce the body bit-for-bit");

        assert_eq!(a.num_joints(), 12);
        assert_eq!(a.num_verts(), 200);
        for (c, &p) in a.parents.iter().enumerate().skip(1) {
            assert!(p < c, "parent {p} must precede child {c}");
        }
        for vi in 0..a.num_verts() {
            let sum: f64 = (0..a.num_joints()).map(|j| a.skin_weights.at2(vi, j)).sum();
            assert!((sum - 1.0).abs() < 1e-12, "skin row {vi} sums to {sum}");
        }
        for jj in 0..a.num_regressed() {
            let row = a.joint_regressor.row(jj);
            assert!(row.iter().all(|&w| w >= 0.0), "regressor row {jj} has negative weight");
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "regressor row {jj} sums to {sum}");
        }
        // Regressor applied to the rest template reproduces the rest joints.
        let (k, v) = a.joint_regressor.dims2();
        for jj in 0..k {
            for ax in 0..3 {
                let got: f64 =
                    (0..v).map(|vi| a.joint_regressor.at2(jj, vi) * a.template.at2(vi, ax)).sum();
                let want = a.rest_joints.at2(jj, ax);
                assert!(
                    (got - want).abs() < 1e-6,
                    "rest joint {jj} axis {ax}: regressed {got}, rest {want}"
                );
            }
        }
        // Shape displacements stay within the cap.
        let (nb, _) = a.shape_basis.dims2();
        for bi in 0..nb {
            let row = a.shape_basis.row(bi);
            let max = (0..v)
                .map(|vi| norm3([row[vi * 3], row[vi * 3 + 1], row[vi * 3 + 2]]))
                .fold(0.0, f64::max);
            assert!(max <= 0.02 + 1e-12, "basis {bi} max displacement {max}");
        }
    }

    #[test]
    fn zero_pose_zero_shape_reproduces_template() {
        let model = desk_body();
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::zeros(&[3 * model.num_joints()]));
        let beta = tape.leaf(Tensor::zeros(&[model.num_shapes()]));
        let (mesh, joints) = body_forward_simple(&mut tape, &model, theta, beta);
        let dm = crate::tensor::max_abs_diff(tape.value(mesh).data(), model.template.data());
        assert!(dm < 1e-12, "zero pose should reproduce the template, max diff {dm}");
        for jj in 0..model.num_regressed() {
            let got = tape.value(joints).row(jj);
            let want = model.rest_joints.row(jj);
            for ax in 0..3 {
                assert!((got[ax] - want[ax]).abs() < 1e-9, "joint {jj} axis {ax}");
            }
        }
    }

    #[test]
    fn root_rotation_rotates_everything_rigidly() {
        let model = desk_body();
        let rot = [0.4, -0.2, 0.9];
        let mut tape = Tape::new();
        let mut theta = vec![0.0; 3 * model.num_joints()];
        theta[..3].copy_from_slice(&rot);
        let theta = tape.leaf(Tensor::vector(theta));
        let beta = tape.leaf(Tensor::zeros(&[model.num_shapes()]));
        let (mesh, joints) = body_forward_simple(&mut tape, &model, theta, beta);
        let r = rodrigues_matrix(rot);
        // Root is at the origin, so rigid rotation is plain matrix action.
        for vi in 0..model.num_verts() {
            let t = model.template.row(vi);
            let want = [
                r[0] * t[0] + r[1] * t[1] + r[2] * t[2],
                r[3] * t[0] + r[4] * t[1] + r[5] * t[2],
                r[6] * t[0] + r[7] * t[1] + r[8] * t[2],
            ];
            let got = tape.value(mesh).row(vi);
            for ax in 0..3 {
                assert!(
                    (got[ax] - want[ax]).abs() < 1e-9,
                    "vertex {vi} axis {ax}: {} vs {}",
                    got[ax],
                    want[ax]
                );
            }
        }
        let _ = joints;
    }

    #[test]
    fn mesh_is_linear_in_shape_at_zero_pose() {
        let model = desk_body();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b1: Vec<f64> = (0..model.num_shapes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b2: Vec<f64> = (0..model.num_shapes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |beta: &[f64]| {
            let mut tape = Tape::new();
            let theta = tape.leaf(Tensor::zeros(&[3 * model.num_joints()]));
            let bv = tape.leaf(Tensor::vector(beta.to_vec()));
            let (mesh, _) = body_forward_simple(&mut tape, &model, theta, bv);
            tape.value(mesh).data().to_vec()
        };
        let m1 = eval(&b1);
        let m2 = eval(&b2);
        let sum: Vec<f64> = b1.iter().zip(&b2).map(|(a, b)| a + b).collect();
        let msum = eval(&sum);
        let template = model.template.data();
        for i in 0..m1.len() {
            let lin = m1[i] + m2[i] - template[i];
            assert!(
                (msum[i] - lin).abs() < 1e-9,
                "shape response not linear at element {i}: {} vs {}",
                msum[i],
                lin
            );
        }
    }

    #[test]
    fn body_forward_gradients_match_finite_differences() {
        let model = make_default_body(3, &BodyConfig { num_verts: 96, ..BodyConfig::default() });
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let theta: Vec<f64> =
                (0..3 * model.num_joints()).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let beta: Vec<f64> = (0..model.num_shapes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe: Vec<f64> =
                (0..model.num_regressed() * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut store = ParameterStore::new();
            let pt = store.register("theta", Tensor::vector(theta));
            let pb = store.register("beta", Tensor::vector(beta));
            let err = finite_diff_check(&mut store, |tape, store| {
                let th = tape.param(store, pt);
                let be = tape.param(store, pb);
                let (_, joints) = body_forward_simple(tape, &model, th, be);
                let w = tape
                    .constant(Tensor::matrix(model.num_regressed(), 3, probe.clone()).unwrap());
                tape.dot(joints, w)
            });
            assert!(err < 1e-6, "body gradient error {err} at seed {seed}");
        }
    }

    #[test]
    fn projection_identity_camera_drops_z() {
        let mut tape = Tape::new();
        let pts = tape.leaf(Tensor::matrix(2, 3, vec![0.1, -0.2, 5.0, 0.0, 0.4, -3.0]).unwrap());
        let cam = cam_constant(&mut tape, &CameraParams::identity());
        let xy = project(&mut tape, pts, &cam);
        assert_eq!(tape.value(xy).data(), &[0.1, -0.2, 0.0, 0.4]);
    }

    #[test]
    fn projection_scale_and_translation() {
        let mut tape = Tape::new();
        let pts = tape.leaf(Tensor::matrix(1, 3, vec![0.5, -0.5, 1.0]).unwrap());
        let cam = cam_constant(
            &mut tape,
            &CameraParams { s: 2.0, r: [0.0; 3], t: [0.25, -0.125] },
        );
        let xy = project(&mut tape, pts, &cam);
        assert_eq!(tape.value(xy).data(), &[1.25, -1.125]);
    }

    #[test]
    fn root_pose_rotation_equals_camera_rotation_in_projection() {
        // Pelvis is at the origin, so rotating the body via pose index 0 or
        // via the camera must land every regressed joint on the same pixel.
        let model = desk_body();
        let rot = [0.3, 0.5, -0.4];
        let joints_of = |pose_rot: Option<[f64; 3]>, cam_rot: [f64; 3]| {
            let mut tape = Tape::new();
            let mut theta = vec![0.0; 3 * model.num_joints()];
            if let Some(r) = pose_rot {
                theta[..3].copy_from_slice(&r);
            }
            let theta = tape.leaf(Tensor::vector(theta));
            let beta = tape.leaf(Tensor::zeros(&[model.num_shapes()]));
            let (_, joints) = body_forward_simple(&mut tape, &model, theta, beta);
            let cam = cam_constant(
                &mut tape,
                &CameraParams { s: 1.1, r: cam_rot, t: [0.05, -0.02] },
            );
            let xy = project(&mut tape, joints, &cam);
            tape.value(xy).data().to_vec()
        };
        let via_pose = joints_of(Some(rot), [0.0; 3]);
        let via_cam = joints_of(None, rot);
        for (a, b) in via_pose.iter().zip(&via_cam) {
            assert!((a - b).abs() < 1e-9, "projection gauge mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn silhouette_gradients_flow_to_camera() {
        let model = make_default_body(5, &BodyConfig { num_verts: 96, ..BodyConfig::default() });
        let mut store = ParameterStore::new();
        let praw = store.register(
            "cam_raw",
            Tensor::vector(vec![0.05, 0.1, -0.2, 0.15, 0.02, -0.03]),
        );
        let err = finite_diff_check(&mut store, |tape, store| {
            let raw = tape.param(store, praw);
            let cam = cam_from_raw(tape, raw);
            let theta = tape.leaf(Tensor::zeros(&[3 * model.num_joints()]));
            let beta = tape.leaf(Tensor::zeros(&[model.num_shapes()]));
            let (mesh, _) = body_forward_simple(tape, &model, theta, beta);
            let sil = soft_silhouette(tape, mesh, &cam, 12, 12, 1.5);
            tape.sum_all(sil)
        });
        assert!(err < 1e-5, "silhouette camera gradient error {err}");
    }

    #[test]
    fn body_model_file_round_trips_bit_exactly() {
        let model = desk_body();
        let dir = std::env::temp_dir().join(format!("bodymodel_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        save_body_model(&model, &path).unwrap();
        let loaded = load_body_model(&path).unwrap();
        assert_eq!(model, loaded, "body model file round trip changed data");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn obj_dump_is_well_formed() {
        let model = desk_body();
        let mut buf = Vec::new();
        write_obj(&mut buf, &model.template, &model.faces).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let nv = text.lines().filter(|l| l.starts_with("v ")).count();
        let nf = text.lines().filter(|l| l.starts_with("f ")).count();
        assert_eq!(nv, model.num_verts());
        assert_eq!(nf, model.faces.len());
        for line in text.lines().filter(|l| l.starts_with("f ")) {
            for idx in line[2..].split_whitespace() {
                let i: usize = idx.parse().unwrap();
                assert!(i >= 1 && i <= nv, "face index {i} out of range");
            }
        }
    }
}
