//! Cross-shot actor association, gap filling and boundary metrics.

use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::body::{lbs_pose, BodyModel, PoseParams, StagePlacement};
use crate::error::{Error, Result};
use crate::rotation::{slerp_shortest, wxyz};
use crate::splat::SceneRadius;

pub const DEFAULT_EXTRAPOLATION_HORIZON: usize = 30;

/// Matching threshold as a fraction of the scene radius.
pub const MATCH_THRESHOLD_FRACTION: f64 = 0.15;

pub fn default_match_threshold(radius: SceneRadius) -> f64 {
    MATCH_THRESHOLD_FRACTION * radius.get()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotBoundary {
    pub last_frame_prev: usize,
    pub first_frame_next: usize,
    pub lambda: f64,
}

impl ShotBoundary {
    pub fn new(last_frame_prev: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("matching threshold {lambda} must be positive")));
        }
        Ok(Self {
            last_frame_prev,
            first_frame_next: last_frame_prev + 1,
            lambda,
        })
    }
}

/// Greedy nearest-neighbour association. Each `a[i]`, in index order, takes
/// the closest still unmatched `b[j]` and keeps it only when the distance is
/// below `lambda`. Ties go to the lower `j`.
pub fn match_actors(a: &[Vector3<f64>], b: &[Vector3<f64>], lambda: f64) -> Vec<(usize, usize)> {
    let mut unmatched: Vec<usize> = (0..b.len()).collect();
    let mut pairs = Vec::new();
    for (i, ai) in a.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &j) in unmatched.iter().enumerate() {
            let d = (ai - b[j]).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((slot, d));
            }
        }
        if let Some((slot, d)) = best {
            if d < lambda {
                pairs.push((i, unmatched.remove(slot)));
            }
        }
    }
    pairs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Visible,
    Interpolated,
    Extrapolated,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Visible => "visible",
            Provenance::Interpolated => "interpolated",
            Provenance::Extrapolated => "extrapolated",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub pose: PoseParams,
    pub placement: StagePlacement,
    pub provenance: Provenance,
}

impl TrackState {
    /// Placed root joint.
    pub fn center(&self, model: &BodyModel) -> Vector3<f64> {
        self.placement.apply(&model.joints()[0])
    }

    /// Placed joints.
    pub fn joints(&self, model: &BodyModel) -> Result<Vec<Vector3<f64>>> {
        Ok(lbs_pose(model, &self.pose)?
            .joints
            .iter()
            .map(|j| self.placement.apply(j))
            .collect())
    }
}

/// One actor over the whole scene timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorTrack {
    pub actor_id: u32,
    /// Indexed by scene frame; `None` marks the actor absent.
    pub states: Vec<Option<TrackState>>,
    /// Shots the actor was observed in, ascending.
    pub shots: Vec<usize>,
}

impl ActorTrack {
    pub fn new(actor_id: u32, num_frames: usize) -> Self {
        Self {
            actor_id,
            states: vec![None; num_frames],
            shots: Vec::new(),
        }
    }

    pub fn num_frames(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, frame: usize) -> Option<&TrackState> {
        self.states.get(frame).and_then(Option::as_ref)
    }

    pub fn set_visible(&mut self, frame: usize, pose: PoseParams, placement: StagePlacement) -> Result<()> {
        let n = self.states.len();
        let slot = self
            .states
            .get_mut(frame)
            .ok_or_else(|| Error::Tracking(format!("frame {frame} outside a {n}-frame track")))?;
        *slot = Some(TrackState {
            pose,
            placement,
            provenance: Provenance::Visible,
        });
        Ok(())
    }

    pub fn add_shot(&mut self, shot: usize) {
        if let Err(at) = self.shots.binary_search(&shot) {
            self.shots.insert(at, shot);
        }
    }

    pub fn frames_with(&self, provenance: Provenance) -> Vec<usize> {
        (0..self.states.len())
            .filter(|&f| self.state(f).is_some_and(|s| s.provenance == provenance))
            .collect()
    }

    /// Copies every state of `other` into this track and takes its shots.
    pub fn absorb(&mut self, other: &ActorTrack) -> Result<()> {
        if other.states.len() != self.states.len() {
            return Err(Error::Tracking(format!(
                "track lengths differ: {} vs {}",
                self.states.len(),
                other.states.len()
            )));
        }
        for (mine, theirs) in self.states.iter_mut().zip(&other.states) {
            if theirs.is_some() {
                *mine = theirs.clone();
            }
        }
        for &s in &other.shots {
            self.add_shot(s);
        }
        Ok(())
    }

    /// Fills every absent run strictly between two present frames of
    /// `frames` by interpolation.
    pub fn fill_gaps(&mut self, frames: std::ops::Range<usize>) -> Result<Vec<std::ops::Range<usize>>> {
        let present: Vec<usize> = frames.clone().filter(|&f| self.state(f).is_some()).collect();
        let mut filled = Vec::new();
        for w in present.windows(2) {
            if w[1] > w[0] + 1 {
                interpolate_pose(self, w[0], w[1])?;
                filled.push(w[0] + 1..w[1]);
            }
        }
        Ok(filled)
    }
}

/// Fills frames strictly between `before` and `after` with linear scale and
/// translation and slerped joint rotations.
pub fn interpolate_pose(track: &mut ActorTrack, before: usize, after: usize) -> Result<()> {
    if after <= before {
        return Err(Error::Tracking(format!("anchors {before} and {after} are out of order")));
    }
    let (Some(a), Some(b)) = (track.state(before).cloned(), track.state(after).cloned()) else {
        return Err(Error::Tracking(format!("missing anchor at frame {before} or {after}")));
    };
    if a.pose.rotations.len() != b.pose.rotations.len() {
        return Err(Error::InvalidPose("anchor poses differ in joint count".into()));
    }
    let span = (after - before) as f64;
    for f in before + 1..after {
        let u = (f - before) as f64 / span;
        let rotations = a
            .pose
            .rotations
            .iter()
            .zip(&b.pose.rotations)
            .map(|(qa, qb)| slerp_shortest(qa, qb, u))
            .collect();
        let placement = StagePlacement {
            scale: a.placement.scale + u * (b.placement.scale - a.placement.scale),
            translation: a.placement.translation + u * (b.placement.translation - a.placement.translation),
        };
        track.states[f] = Some(TrackState {
            pose: PoseParams { rotations },
            placement,
            provenance: Provenance::Interpolated,
        });
    }
    Ok(())
}

/// Holds the state at the end of the previous shot over the first frames of
/// the next one, up to `horizon` frames and never past `next_shot_end`
/// (exclusive). Later frames of the next shot are marked absent. Returns the
/// filled frame range.
pub fn extrapolate_track(
    track: &mut ActorTrack,
    boundary: &ShotBoundary,
    horizon: usize,
    next_shot_end: usize,
) -> Result<std::ops::Range<usize>> {
    let Some(last) = track.state(boundary.last_frame_prev).cloned() else {
        return Err(Error::Tracking(format!(
            "actor {} has no state at frame {}",
            track.actor_id, boundary.last_frame_prev
        )));
    };
    let start = boundary.first_frame_next;
    let end = next_shot_end.min(track.states.len());
    let stop = (start + horizon).min(end);
    for f in start..end {
        track.states[f] = (f < stop).then(|| TrackState {
            provenance: Provenance::Extrapolated,
            ..last.clone()
        });
    }
    Ok(start..stop)
}

/// Per-shot input: local tracks that only hold states inside their shot.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotTracks {
    pub frames: std::ops::Range<usize>,
    pub tracks: Vec<ActorTrack>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkOptions {
    pub lambda: f64,
    pub horizon: usize,
}

/// What happened at one boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub boundary: ShotBoundary,
    /// `(global track index, local track index in the next shot)`.
    pub matched: Vec<(usize, usize)>,
    pub extrapolated: Vec<usize>,
    /// `(global track index, local track index)` of tracks first seen in
    /// the next shot.
    pub started: Vec<(usize, usize)>,
}

/// Links per-shot tracks into scene-wide tracks. Gaps inside each shot are
/// interpolated first; boundaries are then processed in scene order.
/// Global track ids are assigned in creation order.
pub fn link_shots(
    model: &BodyModel,
    shots: &[ShotTracks],
    opts: &LinkOptions,
) -> Result<(Vec<ActorTrack>, Vec<BoundaryReport>)> {
    let mut shots = shots.to_vec();
    for (k, w) in shots.windows(2).enumerate() {
        if w[1].frames.start != w[0].frames.end {
            return Err(Error::Tracking(format!("shot {} does not start where shot {k} ends", k + 1)));
        }
    }
    for (k, shot) in shots.iter_mut().enumerate() {
        for t in &mut shot.tracks {
            t.fill_gaps(shot.frames.clone())?;
            if (shot.frames.clone()).any(|f| t.state(f).is_some()) {
                t.add_shot(k);
            }
        }
    }
    let mut global: Vec<ActorTrack> = Vec::new();
    let mut reports = Vec::new();
    let Some(first) = shots.first() else {
        return Ok((global, reports));
    };
    for t in &first.tracks {
        let mut g = t.clone();
        g.actor_id = global.len() as u32;
        global.push(g);
    }
    for k in 1..shots.len() {
        let prev_end = shots[k - 1].frames.end;
        if prev_end == 0 {
            return Err(Error::Tracking("empty first shot".into()));
        }
        let boundary = ShotBoundary::new(prev_end - 1, opts.lambda)?;
        let a_idx: Vec<usize> = (0..global.len())
            .filter(|&g| global[g].state(boundary.last_frame_prev).is_some())
            .collect();
        let b_idx: Vec<usize> = (0..shots[k].tracks.len())
            .filter(|&l| shots[k].tracks[l].state(boundary.first_frame_next).is_some())
            .collect();
        let a: Vec<Vector3<f64>> = a_idx
            .iter()
            .map(|&g| global[g].state(boundary.last_frame_prev).expect("filtered").center(model))
            .collect();
        let b: Vec<Vector3<f64>> = b_idx
            .iter()
            .map(|&l| shots[k].tracks[l].state(boundary.first_frame_next).expect("filtered").center(model))
            .collect();
        let pairs: Vec<(usize, usize)> = match_actors(&a, &b, opts.lambda)
            .into_iter()
            .map(|(i, j)| (a_idx[i], b_idx[j]))
            .collect();
        let mut extrapolated = Vec::new();
        for &g in &a_idx {
            if !pairs.iter().any(|&(pg, _)| pg == g) {
                extrapolate_track(&mut global[g], &boundary, opts.horizon, shots[k].frames.end)?;
                extrapolated.push(g);
            }
        }
        for &(g, l) in &pairs {
            global[g].absorb(&shots[k].tracks[l])?;
        }
        let mut started = Vec::new();
        for (l, t) in shots[k].tracks.iter().enumerate() {
            if pairs.iter().any(|&(_, pl)| pl == l) {
                continue;
            }
            if !(shots[k].frames.clone()).any(|f| t.state(f).is_some()) {
                continue;
            }
            let mut g = t.clone();
            g.actor_id = global.len() as u32;
            started.push((global.len(), l));
            global.push(g);
        }
        reports.push(BoundaryReport {
            boundary,
            matched: pairs,
            extrapolated,
            started,
        });
    }
    Ok((global, reports))
}

/// Mean translation distance and mean root-relative joint distance over
/// corresponding boundary states.
pub fn compute_mted_mped(model: &BodyModel, pairs: &[(&TrackState, &TrackState)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::NoMatchedActors);
    }
    let mut mted = 0.0;
    let mut mped = 0.0;
    let mut joint_count = 0usize;
    for (a, b) in pairs {
        mted += (a.placement.translation - b.placement.translation).norm();
        let ja = a.joints(model)?;
        let jb = b.joints(model)?;
        let (ra, rb) = (ja[0], jb[0]);
        for (p, q) in ja.iter().zip(&jb) {
            mped += ((p - ra) - (q - rb)).norm();
            joint_count += 1;
        }
    }
    Ok((mted / pairs.len() as f64, mped / joint_count as f64))
}

pub const TRACK_CSV_HEADER_PREFIX: &str = "actor_id,frame,provenance,s,tx,ty,tz";

/// One row per present frame; quaternion columns are `q{j}_w,q{j}_x,...`.
pub fn tracks_csv(tracks: &[ActorTrack]) -> String {
    let nj = tracks
        .iter()
        .flat_map(|t| t.states.iter().flatten())
        .map(|s| s.pose.rotations.len())
        .next()
        .unwrap_or(0);
    let mut out = String::from(TRACK_CSV_HEADER_PREFIX);
    for j in 0..nj {
        let _ = write!(out, ",q{j}_w,q{j}_x,q{j}_y,q{j}_z");
    }
    out.push('\n');
    for t in tracks {
        for (f, s) in t.states.iter().enumerate() {
            let Some(s) = s else { continue };
            let tr = s.placement.translation;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                t.actor_id,
                f,
                s.provenance.as_str(),
                s.placement.scale,
                tr.x,
                tr.y,
                tr.z
            );
            for q in &s.pose.rotations {
                let [w, x, y, z] = wxyz(q);
                let _ = write!(out, ",{w},{x},{y},{z}");
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::axis_angle;
    use crate::synth::humanoid_body;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(t: Vector3<f64>, nj: usize) -> TrackState {
        TrackState {
            pose: PoseParams::identity(nj),
            placement: StagePlacement::new(1.0, t).unwrap(),
            provenance: Provenance::Visible,
        }
    }

    #[test]
    fn single_pair_within_threshold_matches() {
        let a = [Vector3::zeros()];
        let b = [Vector3::new(0.5, 0.0, 0.0)];
        assert_eq!(match_actors(&a, &b, 1.0), vec![(0, 0)]);
        assert!(match_actors(&a, &b, 0.5).is_empty());
    }

    #[test]
    fn empty_sides_match_nothing() {
        let a = [Vector3::zeros()];
        assert!(match_actors(&a, &[], 1.0).is_empty());
        assert!(match_actors(&[], &a, 1.0).is_empty());
    }

    #[test]
    fn greedy_order_follows_a() {
        // a0 grabs b0 even though a1 is closer to it
        let a = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.9, 0.0, 0.0)];
        let b = [Vector3::new(1.0, 0.0, 0.0), Vector3::new(3.0, 0.0, 0.0)];
        assert_eq!(match_actors(&a, &b, 1.5), vec![(0, 0)]);
    }

    #[test]
    fn raising_threshold_can_reassign_a_later_pair() {
        // a0 is turned away at the low threshold and b0 goes to a1; at the
        // high threshold a0 keeps b0 and a1 gets nothing
        let a = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.1, 0.0, 0.0)];
        let b = [Vector3::new(1.2, 0.0, 0.0)];
        assert_eq!(match_actors(&a, &b, 1.0), vec![(1, 0)]);
        assert_eq!(match_actors(&a, &b, 1.5), vec![(0, 0)]);
    }

    fn linear_track(nj: usize) -> ActorTrack {
        let mut t = ActorTrack::new(0, 6);
        t.set_visible(0, PoseParams::identity(nj), StagePlacement::new(1.0, Vector3::zeros()).unwrap())
            .unwrap();
        let mut end = PoseParams::identity(nj);
        end.rotations[1] = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_2);
        t.set_visible(4, end, StagePlacement::new(1.2, Vector3::new(2.0, 0.0, 0.0)).unwrap())
            .unwrap();
        t
    }

    #[test]
    fn interpolation_midpoint_by_hand() {
        let mut t = linear_track(3);
        interpolate_pose(&mut t, 0, 4).unwrap();
        let mid = t.state(2).unwrap();
        assert_eq!(mid.provenance, Provenance::Interpolated);
        assert!((mid.placement.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!((mid.placement.scale - 1.1).abs() < 1e-12);
        let expect = axis_angle(Vector3::z(), std::f64::consts::FRAC_PI_4);
        assert!(mid.pose.rotations[1].angle_to(&expect) < 1e-12);
        assert!(mid.pose.rotations[0].angle() < 1e-12);
        assert_eq!(t.state(0).unwrap().provenance, Provenance::Visible);
        assert_eq!(t.state(4).unwrap().provenance, Provenance::Visible);
        assert!(t.state(5).is_none());
    }

    #[test]
    fn identical_anchors_interpolate_to_constant() {
        let mut t = ActorTrack::new(0, 5);
        let s = state(Vector3::new(0.3, 0.1, -0.2), 4);
        t.states[0] = Some(s.clone());
        t.states[4] = Some(s.clone());
        interpolate_pose(&mut t, 0, 4).unwrap();
        for f in 1..4 {
            let g = t.state(f).unwrap();
            assert_eq!(g.placement, s.placement);
            assert_eq!(g.pose, s.pose);
        }
    }

    #[test]
    fn interpolation_needs_both_anchors() {
        let mut t = ActorTrack::new(0, 5);
        t.states[0] = Some(state(Vector3::zeros(), 2));
        assert!(interpolate_pose(&mut t, 0, 4).is_err());
    }

    #[test]
    fn extrapolation_holds_then_goes_absent() {
        let mut t = ActorTrack::new(0, 50);
        let s = state(Vector3::new(1.0, 0.0, 2.0), 2);
        t.states[9] = Some(s.clone());
        let b = ShotBoundary::new(9, 0.5).unwrap();
        let filled = extrapolate_track(&mut t, &b, 30, 50).unwrap();
        assert_eq!(filled, 10..40);
        for f in 10..40 {
            let g = t.state(f).unwrap();
            assert_eq!(g.provenance, Provenance::Extrapolated);
            assert_eq!(g.placement, s.placement);
        }
        assert_eq!((40..50).filter(|&f| t.state(f).is_none()).count(), 10);
        assert_eq!(t.frames_with(Provenance::Extrapolated).len(), 30);
    }

    #[test]
    fn extrapolation_stops_at_shot_end() {
        let mut t = ActorTrack::new(0, 20);
        t.states[4] = Some(state(Vector3::zeros(), 2));
        let b = ShotBoundary::new(4, 0.5).unwrap();
        assert_eq!(extrapolate_track(&mut t, &b, 30, 12).unwrap(), 5..12);
        assert!(t.state(12).is_none());
    }

    #[test]
    fn link_matches_extrapolates_and_starts() {
        let body = humanoid_body().unwrap();
        let nj = body.num_joints();
        let mk = |id: u32, range: std::ops::Range<usize>, x: f64| {
            let mut t = ActorTrack::new(id, 10);
            for f in range {
                t.states[f] = Some(state(Vector3::new(x + 0.01 * f as f64, 0.0, 0.0), nj));
            }
            t
        };
        let shots = vec![
            ShotTracks {
                frames: 0..5,
                tracks: vec![mk(0, 0..5, 0.0), mk(1, 0..5, 2.0)],
            },
            ShotTracks {
                frames: 5..10,
                tracks: vec![mk(0, 5..10, 5.0), mk(1, 5..10, 0.0)],
            },
        ];
        let opts = LinkOptions { lambda: 0.5, horizon: 3 };
        let (tracks, reports) = link_shots(&body, &shots, &opts).unwrap();
        assert_eq!(tracks.len(), 3);
        assert_eq!(reports[0].matched, vec![(0, 1)]);
        assert_eq!(reports[0].extrapolated, vec![1]);
        assert_eq!(reports[0].started, vec![(2, 0)]);
        assert_eq!(tracks[0].shots, vec![0, 1]);
        assert!((5..10).all(|f| tracks[0].state(f).unwrap().provenance == Provenance::Visible));
        assert_eq!(tracks[1].frames_with(Provenance::Extrapolated), vec![5, 6, 7]);
        assert!(tracks[1].state(8).is_none());
        assert_eq!(tracks[2].actor_id, 2);
    }

    #[test]
    fn link_interpolates_inside_shots() {
        let body = humanoid_body().unwrap();
        let mut t = ActorTrack::new(0, 8);
        for f in [0, 1, 6, 7] {
            t.states[f] = Some(state(Vector3::new(f as f64, 0.0, 0.0), body.num_joints()));
        }
        let shots = vec![ShotTracks { frames: 0..8, tracks: vec![t] }];
        let (tracks, _) = link_shots(&body, &shots, &LinkOptions { lambda: 1.0, horizon: 30 }).unwrap();
        assert_eq!(tracks[0].frames_with(Provenance::Interpolated), vec![2, 3, 4, 5]);
    }

    #[test]
    fn mted_mped_by_hand() {
        let body = humanoid_body().unwrap();
        let nj = body.num_joints();
        let a = state(Vector3::zeros(), nj);
        assert_eq!(compute_mted_mped(&body, &[(&a, &a)]).unwrap(), (0.0, 0.0));
        let b = state(Vector3::new(1.0, 0.0, 0.0), nj);
        let (mted, mped) = compute_mted_mped(&body, &[(&a, &b)]).unwrap();
        assert!((mted - 1.0).abs() < 1e-12);
        assert!(mped.abs() < 1e-12);
        // a uniform scale change moves every recentred joint by (s-1)|J - J_root|
        let mut c = b.clone();
        c.placement.scale = 1.5;
        let rest = body.joints();
        let expect = rest.iter().map(|j| 0.5 * (j - rest[0]).norm()).sum::<f64>() / nj as f64;
        let (_, mped) = compute_mted_mped(&body, &[(&a, &c)]).unwrap();
        assert!((mped - expect).abs() < 1e-12);
        assert!(matches!(compute_mted_mped(&body, &[]), Err(Error::NoMatchedActors)));
    }

    #[test]
    fn csv_has_one_row_per_present_frame() {
        let mut t = ActorTrack::new(3, 4);
        t.states[1] = Some(state(Vector3::new(1.0, 2.0, 3.0), 2));
        let csv = tracks_csv(&[t]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with(TRACK_CSV_HEADER_PREFIX));
        assert!(lines[0].ends_with("q1_z"));
        assert!(lines[1].starts_with("3,1,visible,1,1,2,3,1,0,0,0"));
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    }

    proptest! {
        #[test]
        fn matches_respect_threshold_and_uniqueness(seed in any::<u64>(), n in 0usize..7, m in 0usize..7, lambda in 0.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(&mut rng, n);
            let b = random_points(&mut rng, m);
            let p = match_actors(&a, &b, lambda);
            prop_assert!(p.len() <= n.min(m));
            for &(i, j) in &p {
                prop_assert!((a[i] - b[j]).norm() < lambda);
            }
            let mut js: Vec<usize> = p.iter().map(|x| x.1).collect();
            js.sort_unstable();
            js.dedup();
            prop_assert_eq!(js.len(), p.len());
        }

        #[test]
        fn raising_threshold_keeps_pairs_before_first_rejection(seed in any::<u64>(), n in 0usize..7, m in 0usize..7, lambda in 0.01f64..2.0, extra in 0.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_points(&mut rng, n);
            let b = random_points(&mut rng, m);
            let low = match_actors(&a, &b, lambda);
            let high = match_actors(&a, &b, lambda + extra);
            // greedy decisions coincide up to the first a the lower threshold turns away
            let first_reject = (0..n)
                .find(|&i| !low.iter().any(|p| p.0 == i) && low.iter().filter(|p| p.0 < i).count() < m)
                .unwrap_or(n);
            for pair in low.iter().filter(|p| p.0 < first_reject) {
                prop_assert!(high.contains(pair));
            }
            prop_assert!(high.len() >= low.iter().filter(|p| p.0 < first_reject).count());
        }

        #[test]
        fn interpolation_translation_is_time_symmetric(seed in any::<u64>(), gap in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_points(&mut rng, 2);
            let n = gap + 1;
            let mut fwd = ActorTrack::new(0, n);
            fwd.states[0] = Some(state(p[0], 1));
            fwd.states[gap] = Some(state(p[1], 1));
            let mut bwd = ActorTrack::new(0, n);
            bwd.states[0] = Some(state(p[1], 1));
            bwd.states[gap] = Some(state(p[0], 1));
            interpolate_pose(&mut fwd, 0, gap).unwrap();
            interpolate_pose(&mut bwd, 0, gap).unwrap();
            for f in 0..=gap {
                let a = fwd.state(f).unwrap().placement.translation;
                let b = bwd.state(gap - f).unwrap().placement.translation;
                prop_assert!((a - b).norm() < 1e-12);
            }
            prop_assert_eq!(fwd.state(0).unwrap().placement.translation, p[0]);
            prop_assert_eq!(fwd.state(gap).unwrap().placement.translation, p[1]);
        }
    }
}
