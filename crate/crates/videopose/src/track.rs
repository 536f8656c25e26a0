//! Multi-instance box tracking: constant-velocity prediction, IoU cost,
//! optimal assignment, and a minimum-IoU gate. Detections come from an
//! external detector as CSV; this module only associates them over time.

use std::io::{Read, Write};

use thiserror::Error;

pub const DEFAULT_MIN_IOU: f64 = 0.3;
pub const DEFAULT_MAX_MISSES: usize = 5;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid box: ({x_min},{y_min})-({x_max},{y_max})")]
    InvalidBox { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad field in detections csv: {0}")]
    BadField(String),
}

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, TrackError> {
        if !(x_min < x_max && y_min < y_max)
            || !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite())
        {
            return Err(TrackError::InvalidBox { x_min, y_min, x_max, y_max });
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    fn shifted(&self, v: [f64; 4]) -> BBox {
        BBox {
            x_min: self.x_min + v[0],
            y_min: self.y_min + v[1],
            x_max: self.x_max + v[2],
            y_max: self.y_max + v[3],
        }
    }
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Minimum-cost one-to-one assignment of an m×n cost matrix (row-major).
/// Rectangular inputs are padded to square internally; exactly min(m, n)
/// pairs are returned, sorted by row, and the pairing is injective both
/// ways. Costs must be finite.
pub fn hungarian(cost: &[f64], m: usize, n: usize) -> Vec<(usize, usize)> {
    assert_eq!(cost.len(), m * n, "cost matrix shape mismatch");
    assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");
    if m == 0 || n == 0 {
        return Vec::new();
    }
    let dim = m.max(n);
    // Padding entries all share one value, so every completion of a
    // rectangular assignment pays the same penalty and the real pairs are
    // still chosen optimally.
    let mut padded = vec![0.0; dim * dim];
    for r in 0..m {
        padded[r * dim..r * dim + n].copy_from_slice(&cost[r * n..(r + 1) * n]);
    }

    // Potentials-based shortest augmenting path, O(dim³). u/v are the dual
    // potentials, p[j] is the row matched to column j (0 = none), and way[j]
    // remembers the column we came from when the path is unrolled.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; dim + 1];
    let mut v = vec![0.0; dim + 1];
    let mut p = vec![0usize; dim + 1];
    let mut way = vec![0usize; dim + 1];
    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=dim {
                if !used[j] {
                    let cur = padded[(i0 - 1) * dim + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = (1..=dim)
        .filter_map(|j| {
            let r = p[j] - 1;
            let c = j - 1;
            (r < m && c < n).then_some((r, c))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// One tracked instance.
#[derive(Debug, Clone)]
pub struct TrackState {
    pub id: u64,
    pub history: Vec<BBox>,
    /// Per-coordinate velocity in px/frame, from the last two boxes.
    pub velocity: [f64; 4],
    pub age: usize,
    pub misses: usize,
}

impl TrackState {
    fn predicted(&self) -> BBox {
        self.history.last().expect("track has a box").shifted(self.velocity)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrackerConfig {
    pub min_iou: f64,
    pub max_misses: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig { min_iou: DEFAULT_MIN_IOU, max_misses: DEFAULT_MAX_MISSES }
    }
}

/// Associates per-frame detections into identity-stable tracks.
#[derive(Debug)]
pub struct Tracker {
    pub config: TrackerConfig,
    pub tracks: Vec<TrackState>,
    next_id: u64,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        assert!(
            config.min_iou > 0.0 && config.min_iou < 1.0,
            "min_iou must be inside (0,1)"
        );
        Tracker { config, tracks: Vec::new(), next_id: 0 }
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Advances the tracker by one frame. Every detection receives an id —
    /// either a matched existing track or a freshly spawned one — returned
    /// as (id, detection index) pairs. Tracks unmatched for more than
    /// `max_misses` consecutive frames are retired; ids are never reused.
    pub fn step(&mut self, detections: &[BBox]) -> Vec<(u64, usize)> {
        let nt = self.tracks.len();
        let nd = detections.len();

        let predictions: Vec<BBox> = self.tracks.iter().map(|t| t.predicted()).collect();
        let mut cost = vec![0.0; nt * nd];
        for (ti, pb) in predictions.iter().enumerate() {
            for (di, db) in detections.iter().enumerate() {
                cost[ti * nd + di] = 1.0 - iou(pb, db);
            }
        }
        let pairs = hungarian(&cost, nt, nd);

        let mut det_of_track = vec![None; nt];
        let mut track_of_det = vec![None; nd];
        for (ti, di) in pairs {
            // The gate: an optimal pairing below the overlap floor is no
            // match at all.
            if iou(&predictions[ti], &detections[di]) >= self.config.min_iou {
                det_of_track[ti] = Some(di);
                track_of_det[di] = Some(ti);
            }
        }

        let mut out = Vec::with_capacity(nd);
        for (ti, track) in self.tracks.iter_mut().enumerate() {
            match det_of_track[ti] {
                Some(di) => {
                    let prev = *track.history.last().expect("track has a box");
                    let b = detections[di];
                    track.velocity = [
                        b.x_min - prev.x_min,
                        b.y_min - prev.y_min,
                        b.x_max - prev.x_max,
                        b.y_max - prev.y_max,
                    ];
                    track.history.push(b);
                    track.misses = 0;
                    out.push((track.id, di));
                }
                None => {
                    // Coast along the prediction so a reappearing box can
                    // still be caught nearby.
                    track.history.push(predictions[ti]);
                    track.misses += 1;
                }
            }
            track.age += 1;
        }
        self.tracks.retain(|t| t.misses < self.config.max_misses);

        for (di, owner) in track_of_det.iter().enumerate() {
            if owner.is_none() {
                let id = self.fresh_id();
                self.tracks.push(TrackState {
                    id,
                    history: vec![detections[di]],
                    velocity: [0.0; 4],
                    age: 0,
                    misses: 0,
                });
                out.push((id, di));
            }
        }
        out.sort_unstable_by_key(|&(_, di)| di);
        out
    }
}

// ── CSV interfaces ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u64,
    pub bbox: BBox,
}

/// Reads detector output: frame, x_min, y_min, x_max, y_max, score.
pub fn read_detections<R: Read>(reader: R) -> Result<Vec<Detection>, TrackError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.records() {
        let rec = record?;
        let field = |i: usize| -> Result<f64, TrackError> {
            rec.get(i)
                .ok_or_else(|| TrackError::BadField(format!("missing column {i}")))?
                .trim()
                .parse::<f64>()
                .map_err(|e| TrackError::BadField(format!("column {i}: {e}")))
        };
        let frame = field(0)? as usize;
        let bbox = BBox::new(field(1)?, field(2)?, field(3)?, field(4)?)?;
        let score = field(5)?;
        out.push(Detection { frame, bbox, score });
    }
    out.sort_by_key(|d| d.frame);
    Ok(out)
}

/// Runs a tracker over detections grouped by frame. Frames between the
/// first and last detection with no boxes still advance the tracker so
/// vanished tracks age out.
pub fn track_detections(
    detections: &[Detection],
    config: TrackerConfig,
) -> Vec<TrackRecord> {
    let mut tracker = Tracker::new(config);
    let mut records = Vec::new();
    if detections.is_empty() {
        return records;
    }
    let last_frame = detections.iter().map(|d| d.frame).max().unwrap();
    for frame in 0..=last_frame {
        let boxes: Vec<BBox> =
            detections.iter().filter(|d| d.frame == frame).map(|d| d.bbox).collect();
        for (id, di) in tracker.step(&boxes) {
            records.push(TrackRecord { frame, id, bbox: boxes[di] });
        }
    }
    records
}

/// Writes tracks as frame, id, x_min, y_min, x_max, y_max.
pub fn write_tracks<W: Write>(writer: W, records: &[TrackRecord]) -> Result<(), TrackError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["frame", "id", "x_min", "y_min", "x_max", "y_max"])?;
    for r in records {
        wtr.write_record(&[
            r.frame.to_string(),
            r.id.to_string(),
            r.bbox.x_min.to_string(),
            r.bbox.y_min.to_string(),
            r.bbox.x_max.to_string(),
            r.bbox.y_max.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_square_at(x: f64, y: f64) -> BBox {
        BBox::new(x, y, x + 1.0, y + 1.0).unwrap()
    }

    #[test]
    fn boxes_with_inverted_extents_are_rejected() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn iou_matches_area_arithmetic() {
        let a = unit_square_at(0.0, 0.0);
        assert_eq!(iou(&a, &a), 1.0);
        let far = unit_square_at(5.0, 5.0);
        assert_eq!(iou(&a, &far), 0.0);
        // Unit squares overlapping on half their area: 0.5 / (1 + 1 − 0.5).
        let half = unit_square_at(0.5, 0.0);
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_is_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                let x = rng.gen_range(-5.0..5.0);
                let y = rng.gen_range(-5.0..5.0);
                BBox::new(x, y, x + rng.gen_range(0.1..4.0), y + rng.gen_range(0.1..4.0)).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = iou(&a, &b);
            assert_eq!(ab, iou(&b, &a));
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    /// Exhaustive minimum over injective row→column maps.
    fn brute_force_cost(cost: &[f64], m: usize, n: usize) -> f64 {
        fn rec(cost: &[f64], m: usize, n: usize, row: usize, used: u32, left: usize) -> f64 {
            if row == m {
                return 0.0;
            }
            // May skip rows only when more rows than columns remain.
            let mut best = f64::INFINITY;
            let rows_left = m - row;
            if rows_left > left {
                best = rec(cost, m, n, row + 1, used, left);
            }
            if left > 0 {
                for c in 0..n {
                    if used & (1 << c) == 0 {
                        let v = cost[row * n + c]
                            + rec(cost, m, n, row + 1, used | (1 << c), left - 1);
                        if v < best {
                            best = v;
                        }
                    }
                }
            }
            best
        }
        rec(cost, m, n, 0, 0, m.min(n))
    }

    #[test]
    fn trivial_assignments_are_found() {
        // Identity-favoring diagonal.
        let cost = vec![0.0, 9.0, 9.0, 9.0, 0.0, 9.0, 9.0, 9.0, 0.0];
        assert_eq!(hungarian(&cost, 3, 3), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(hungarian(&[0.7], 1, 1), vec![(0, 0)]);
        assert_eq!(hungarian(&[], 0, 3), vec![]);
    }

    #[test]
    fn assignment_cost_matches_brute_force_for_all_small_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cases = 0;
        for m in 1..=6usize {
            for n in 1..=6usize {
                for _ in 0..4 {
                    let cost: Vec<f64> =
                        (0..m * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    let pairs = hungarian(&cost, m, n);
                    assert_eq!(pairs.len(), m.min(n));
                    let mut rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                    let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                    rows.sort_unstable();
                    rows.dedup();
                    cols.sort_unstable();
                    cols.dedup();
                    assert_eq!(rows.len(), pairs.len(), "rows must be injective");
                    assert_eq!(cols.len(), pairs.len(), "cols must be injective");
                    let total: f64 = pairs.iter().map(|&(r, c)| cost[r * n + c]).sum();
                    let best = brute_force_cost(&cost, m, n);
                    assert!(
                        (total - best).abs() < 1e-9,
                        "{m}×{n}: hungarian {total} vs brute force {best}"
                    );
                    cases += 1;
                }
            }
        }
        assert!(cases >= 100);
    }

    #[test]
    fn a_stationary_box_keeps_its_id() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let b = unit_square_at(10.0, 10.0);
        let first = tracker.step(&[b]);
        assert_eq!(first, vec![(0, 0)]);
        for _ in 0..5 {
            assert_eq!(tracker.step(&[b]), vec![(0, 0)]);
        }
        assert_eq!(tracker.tracks.len(), 1);
        assert_eq!(tracker.tracks[0].misses, 0);
    }

    #[test]
    fn constant_velocity_prediction_follows_a_moving_box() {
        // 3 px/frame on a 10-px box: the first re-detection still clears the
        // 0.3 gate with a zero-velocity prediction, but a static predictor
        // would drop below the gate by frame 3. The velocity model keeps the
        // prediction on top of the detection indefinitely.
        let mut tracker = Tracker::new(TrackerConfig::default());
        for f in 0..10 {
            let x = 3.0 * f as f64;
            let b = BBox::new(x, 0.0, x + 10.0, 10.0).unwrap();
            let assigned = tracker.step(&[b]);
            assert_eq!(assigned, vec![(0, 0)], "frame {f} lost the track");
        }
        assert_eq!(tracker.tracks[0].velocity, [3.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn hungarian_matching_pairs_by_proximity() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(100.0, 0.0);
        let ids: Vec<u64> = tracker.step(&[a, b]).iter().map(|p| p.0).collect();
        // Detections arrive in swapped order; matching must still follow
        // overlap, not list position.
        let a2 = unit_square_at(0.2, 0.0);
        let b2 = unit_square_at(100.2, 0.0);
        let out = tracker.step(&[b2, a2]);
        let id_of = |di: usize| out.iter().find(|p| p.1 == di).unwrap().0;
        assert_eq!(id_of(1), ids[0], "near-origin box should keep the first id");
        assert_eq!(id_of(0), ids[1]);
    }

    #[test]
    fn non_overlapping_detections_spawn_new_ids_and_ids_are_never_reused() {
        let mut tracker = Tracker::new(TrackerConfig::default());
        tracker.step(&[unit_square_at(0.0, 0.0)]);
        let out = tracker.step(&[unit_square_at(0.0, 0.0), unit_square_at(50.0, 50.0)]);
        assert_eq!(out.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 1]);

        // Lose both tracks, then bring a box back: the id must be fresh.
        for _ in 0..DEFAULT_MAX_MISSES {
            tracker.step(&[]);
        }
        assert!(tracker.tracks.is_empty(), "all tracks should have retired");
        let revived = tracker.step(&[unit_square_at(0.0, 0.0)]);
        assert_eq!(revived, vec![(2, 0)], "retired ids must not come back");
    }

    #[test]
    fn tracks_retire_after_max_misses() {
        let mut tracker =
            Tracker::new(TrackerConfig { min_iou: 0.3, max_misses: 3 });
        tracker.step(&[unit_square_at(0.0, 0.0)]);
        for step in 0..2 {
            tracker.step(&[]);
            assert_eq!(tracker.tracks.len(), 1, "still coasting at miss {}", step + 1);
        }
        tracker.step(&[]);
        assert!(tracker.tracks.is_empty());
    }

    #[test]
    fn csv_round_trip_produces_stable_tracks() {
        let input = "\
frame,x_min,y_min,x_max,y_max,score
0,0,0,10,10,0.9
0,50,50,60,60,0.8
1,1,0,11,10,0.9
1,50,50,60,60,0.7
2,2,0,12,10,0.9
";
        let dets = read_detections(input.as_bytes()).unwrap();
        assert_eq!(dets.len(), 5);
        let records = track_detections(&dets, TrackerConfig::default());
        // Two ids total; the moving box keeps one id across all frames.
        let ids: std::collections::BTreeSet<u64> = records.iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 2);
        let moving: Vec<&TrackRecord> =
            records.iter().filter(|r| r.bbox.x_min < 40.0).collect();
        assert_eq!(moving.len(), 3);
        assert!(moving.windows(2).all(|w| w[0].id == w[1].id));

        let mut out = Vec::new();
        write_tracks(&mut out, &records).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), records.len() + 1);
        assert!(text.starts_with("frame,id,x_min"));
    }

    #[test]
    fn malformed_csv_is_reported() {
        let missing = "frame,x_min,y_min,x_max,y_max,score\n0,0,0,10,10\n";
        assert!(read_detections(missing.as_bytes()).is_err());
        let garbage = "frame,x_min,y_min,x_max,y_max,score\n0,a,0,10,10,0.5\n";
        assert!(matches!(
            read_detections(garbage.as_bytes()),
            Err(TrackError::BadField(_))
        ));
    }
}
