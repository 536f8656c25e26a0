//! Evaluation metrics: MPJPE, Procrustes-aligned MPJPE, per-vertex error,
//! PCK, and acceleration error. Inputs are in meters; reported values are
//! millimeters (PCK excepted).

use std::io::Write;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::tensor::Tensor;

pub const DEFAULT_PCK_THRESHOLD_MM: f64 = 150.0;
pub const DEFAULT_FPS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("target points are degenerate (rank < 2 after centering)")]
    DegenerateTarget,
    #[error("source points are all coincident")]
    DegenerateSource,
    #[error("acceleration error needs at least 3 frames, got {0}")]
    TooShort(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn centroid(points: &Tensor) -> [f64; 3] {
    let (k, _) = points.dims2();
    let mut c = [0.0; 3];
    for i in 0..k {
        let r = points.row(i);
        for ax in 0..3 {
            c[ax] += r[ax];
        }
    }
    for v in &mut c {
        *v /= k as f64;
    }
    c
}

/// Best similarity transform (rotation, uniform scale, translation) mapping
/// `pred` onto `gt` in the least-squares sense, applied to `pred`. The
/// rotation is proper (no reflection).
pub fn procrustes_align(pred: &Tensor, gt: &Tensor) -> Result<Tensor, MetricsError> {
    let (k, three) = pred.dims2();
    assert_eq!(three, 3, "points must be k×3");
    assert_eq!(gt.dims2(), (k, 3), "point sets must be congruent");
    assert!(k >= 3, "alignment needs at least 3 points");

    let mu_p = centroid(pred);
    let mu_g = centroid(gt);

    // Cross-covariance of the centered sets and the source variance.
    let mut cov = [0.0; 9];
    let mut var_p = 0.0;
    for i in 0..k {
        let p = pred.row(i);
        let g = gt.row(i);
        let pc = [p[0] - mu_p[0], p[1] - mu_p[1], p[2] - mu_p[2]];
        let gc = [g[0] - mu_g[0], g[1] - mu_g[1], g[2] - mu_g[2]];
        for r in 0..3 {
            for c in 0..3 {
                cov[3 * r + c] += gc[r] * pc[c];
            }
        }
        var_p += pc[0] * pc[0] + pc[1] * pc[1] + pc[2] * pc[2];
    }
    let kf = k as f64;
    for v in &mut cov {
        *v /= kf;
    }
    var_p /= kf;
    if var_p < 1e-18 {
        return Err(MetricsError::DegenerateSource);
    }

    // Rank of the centered target: a degenerate gt cannot pin a rotation.
    let gt_centered = DMatrix::from_fn(k, 3, |i, j| gt.at2(i, j) - mu_g[j]);
    let gt_sv = gt_centered.singular_values();
    if gt_sv.len() < 2 || gt_sv[1] < 1e-9 {
        return Err(MetricsError::DegenerateTarget);
    }

    let c = DMatrix::from_row_slice(3, 3, &cov);
    let svd = c.svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let d = &svd.singular_values;
    // Reflection guard: flip the weakest direction if det(U·Vᵀ) < 0.
    let det_uv = (u * v_t).determinant();
    let sign = if det_uv < 0.0 { -1.0 } else { 1.0 };
    let mut rot = u * v_t;
    if sign < 0.0 {
        // R = U · diag(1,1,−1) · Vᵀ
        let mut s = DMatrix::identity(3, 3);
        s[(2, 2)] = -1.0;
        rot = u * s * v_t;
    }
    let trace_ds = d[0] + d[1] + sign * d[2];
    let scale = trace_ds / var_p;

    // t = μ_g − s·R·μ_p
    let mut t = [0.0; 3];
    for r in 0..3 {
        let rp = rot[(r, 0)] * mu_p[0] + rot[(r, 1)] * mu_p[1] + rot[(r, 2)] * mu_p[2];
        t[r] = mu_g[r] - scale * rp;
    }

    let mut out = vec![0.0; k * 3];
    for i in 0..k {
        let p = pred.row(i);
        for r in 0..3 {
            let rp = rot[(r, 0)] * p[0] + rot[(r, 1)] * p[1] + rot[(r, 2)] * p[2];
            out[i * 3 + r] = scale * rp + t[r];
        }
    }
    Ok(Tensor::new(vec![k, 3], out).unwrap())
}

/// Mean per-point Euclidean distance in millimeters.
fn mean_point_distance_mm(pred: &Tensor, gt: &Tensor) -> f64 {
    let (k, _) = pred.dims2();
    let mut sum = 0.0;
    for i in 0..k {
        let p = pred.row(i);
        let g = gt.row(i);
        let d2: f64 = (0..3).map(|ax| (p[ax] - g[ax]) * (p[ax] - g[ax])).sum();
        sum += d2.sqrt();
    }
    sum / k as f64 * 1000.0
}

/// Mean per-joint position error, millimeters.
pub fn mpjpe(pred: &Tensor, gt: &Tensor) -> f64 {
    mean_point_distance_mm(pred, gt)
}

/// MPJPE after Procrustes alignment of the prediction onto the ground truth.
pub fn pa_mpjpe(pred: &Tensor, gt: &Tensor) -> Result<f64, MetricsError> {
    let aligned = procrustes_align(pred, gt)?;
    Ok(mean_point_distance_mm(&aligned, gt))
}

/// Mean per-vertex error, millimeters (same arithmetic as MPJPE, applied to
/// mesh vertices).
pub fn pve(pred_verts: &Tensor, gt_verts: &Tensor) -> f64 {
    mean_point_distance_mm(pred_verts, gt_verts)
}

/// Fraction of joints whose 3D error is below the threshold.
pub fn pck(pred: &Tensor, gt: &Tensor, threshold_mm: f64) -> f64 {
    assert!(threshold_mm > 0.0, "pck threshold must be positive");
    let (k, _) = pred.dims2();
    let mut hits = 0usize;
    for i in 0..k {
        let p = pred.row(i);
        let g = gt.row(i);
        let d2: f64 = (0..3).map(|ax| (p[ax] - g[ax]) * (p[ax] - g[ax])).sum();
        if d2.sqrt() * 1000.0 < threshold_mm {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

/// Mean difference of second finite-difference accelerations, mm/s².
/// Trajectories are `[T × 3k]`; anything affine in time cancels exactly.
pub fn acceleration_error(pred: &Tensor, gt: &Tensor, fps: f64) -> Result<f64, MetricsError> {
    let (t, w) = pred.dims2();
    assert_eq!(gt.dims2(), (t, w), "trajectories must be congruent");
    assert_eq!(w % 3, 0, "trajectory width must be 3k");
    if t < 3 {
        return Err(MetricsError::TooShort(t));
    }
    let k = w / 3;
    let f2 = fps * fps;
    let mut sum = 0.0;
    for i in 1..t - 1 {
        let (pm, p0, pp) = (pred.row(i - 1), pred.row(i), pred.row(i + 1));
        let (gm, g0, gp) = (gt.row(i - 1), gt.row(i), gt.row(i + 1));
        for j in 0..k {
            let mut d2 = 0.0;
            for ax in 0..3 {
                let idx = 3 * j + ax;
                let ap = (pp[idx] - 2.0 * p0[idx] + pm[idx]) * f2;
                let ag = (gp[idx] - 2.0 * g0[idx] + gm[idx]) * f2;
                d2 += (ap - ag) * (ap - ag);
            }
            sum += d2.sqrt();
        }
    }
    Ok(sum / ((t - 2) * k) as f64 * 1000.0)
}

// ── Reports ──────────────────────────────────────────────────────────────────

/// Metrics of one evaluated sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqMetrics {
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub pve_mm: f64,
    pub pck: f64,
    pub accel_err_mm_s2: f64,
}

impl SeqMetrics {
    pub fn mean_of(rows: &[SeqMetrics]) -> SeqMetrics {
        let n = rows.len() as f64;
        SeqMetrics {
            mpjpe_mm: rows.iter().map(|r| r.mpjpe_mm).sum::<f64>() / n,
            pa_mpjpe_mm: rows.iter().map(|r| r.pa_mpjpe_mm).sum::<f64>() / n,
            pve_mm: rows.iter().map(|r| r.pve_mm).sum::<f64>() / n,
            pck: rows.iter().map(|r| r.pck).sum::<f64>() / n,
            accel_err_mm_s2: rows.iter().map(|r| r.accel_err_mm_s2).sum::<f64>() / n,
        }
    }
}

/// Per-sequence metrics plus the corpus mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_sequence: Vec<SeqMetrics>,
    pub mean: SeqMetrics,
}

impl EvalReport {
    pub fn new(per_sequence: Vec<SeqMetrics>) -> Self {
        assert!(!per_sequence.is_empty(), "report needs at least one sequence");
        let mean = SeqMetrics::mean_of(&per_sequence);
        EvalReport { per_sequence, mean }
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "sequence,mpjpe_mm,pa_mpjpe_mm,pve_mm,pck,accel_err_mm_s2")?;
        for (i, m) in self.per_sequence.iter().enumerate() {
            writeln!(
                w,
                "{i},{},{},{},{},{}",
                m.mpjpe_mm, m.pa_mpjpe_mm, m.pve_mm, m.pck, m.accel_err_mm_s2
            )?;
        }
        let m = &self.mean;
        writeln!(
            w,
            "mean,{},{},{},{},{}",
            m.mpjpe_mm, m.pa_mpjpe_mm, m.pve_mm, m.pck, m.accel_err_mm_s2
        )
    }

    pub fn pretty_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:>8}  {:>10}  {:>12}  {:>10}  {:>6}  {:>14}\n",
            "seq", "mpjpe_mm", "pa_mpjpe_mm", "pve_mm", "pck", "accel_mm_s2"
        ));
        let fmt = |label: String, m: &SeqMetrics| {
            format!(
                "{:>8}  {:>10.3}  {:>12.3}  {:>10.3}  {:>6.3}  {:>14.3}\n",
                label, m.mpjpe_mm, m.pa_mpjpe_mm, m.pve_mm, m.pck, m.accel_err_mm_s2
            )
        };
        for (i, m) in self.per_sequence.iter().enumerate() {
            out.push_str(&fmt(i.to_string(), m));
        }
        out.push_str(&fmt("mean".to_string(), &self.mean));
        out
    }
}
