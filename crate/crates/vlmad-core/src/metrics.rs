//! Open-loop planning metrics and annotation analytics.

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationRecord;
use crate::error::{Error, Result};
use crate::par;

/// Default ego footprint, meters (length x width).
pub const DEFAULT_EGO_LENGTH: f64 = 4.0;
pub const DEFAULT_EGO_WIDTH: f64 = 1.8;

/// Waypoint indices evaluated at the 1 s / 2 s / 3 s marks (0.5 s spacing).
pub const HORIZON_INDICES: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Metrics {
    pub at_1s: f64,
    pub at_2s: f64,
    pub at_3s: f64,
    pub avg: f64,
}

/// Mean Euclidean waypoint error at the 1/2/3 s marks and their average,
/// over a set of (prediction, ground truth) trajectory pairs.
pub fn l2_displacement(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<L2Metrics> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Validation(format!(
            "trajectory sets must be nonempty and matched: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    let per_frame = par::map_indexed(pred.len(), |i| {
        let mut e = [0.0; 3];
        for (k, &idx) in HORIZON_INDICES.iter().enumerate() {
            let dx = pred[i][idx][0] - gt[i][idx][0];
            let dy = pred[i][idx][1] - gt[i][idx][1];
            e[k] = (dx * dx + dy * dy).sqrt();
        }
        e
    });
    let n = per_frame.len() as f64;
    let mut sums = [0.0; 3];
    for e in &per_frame {
        for k in 0..3 {
            sums[k] += e[k];
        }
    }
    let at = [sums[0] / n, sums[1] / n, sums[2] / n];
    Ok(L2Metrics {
        at_1s: at[0],
        at_2s: at[1],
        at_3s: at[2],
        avg: (at[0] + at[1] + at[2]) / 3.0,
    })
}

/// Render an L2 report in the 1s / 2s / 3s / Avg column layout.
pub fn format_l2_table(m: &L2Metrics) -> String {
    let mut out = String::new();
    out.push_str("L2 (m)   1s      2s      3s      Avg.\n");
    out.push_str(&format!(
        "         {:<7.3} {:<7.3} {:<7.3} {:<7.3}\n",
        m.at_1s, m.at_2s, m.at_3s, m.avg
    ));
    out
}

/// Oriented BEV rectangle: center, half extents, heading (radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedRect {
    pub cx: f64,
    pub cy: f64,
    pub half_length: f64,
    pub half_width: f64,
    pub heading: f64,
}

impl OrientedRect {
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.heading.sin_cos();
        let axes = [
            [c * self.half_length, s * self.half_length],
            [-s * self.half_width, c * self.half_width],
        ];
        [
            [self.cx + axes[0][0] + axes[1][0], self.cy + axes[0][1] + axes[1][1]],
            [self.cx + axes[0][0] - axes[1][0], self.cy + axes[0][1] - axes[1][1]],
            [self.cx - axes[0][0] - axes[1][0], self.cy - axes[0][1] - axes[1][1]],
            [self.cx - axes[0][0] + axes[1][0], self.cy - axes[0][1] + axes[1][1]],
        ]
    }
}

/// Separating-axis overlap test for two oriented rectangles.
pub fn rects_overlap(a: &OrientedRect, b: &OrientedRect) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    for rect in [a, b] {
        let (s, c) = rect.heading.sin_cos();
        for axis in [[c, s], [-s, c]] {
            let proj = |pts: &[[f64; 2]; 4]| -> (f64, f64) {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for p in pts {
                    let d = p[0] * axis[0] + p[1] * axis[1];
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
                (lo, hi)
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
    }
    true
}

/// Per-frame obstacle rectangles over the horizon: `frames[i][t]` holds the
/// obstacles present at waypoint step t of frame i.
pub type ObstacleSet = Vec<Vec<Vec<OrientedRect>>>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionMetrics {
    pub at_1s: f64,
    pub at_2s: f64,
    pub at_3s: f64,
    pub avg: f64,
}

/// Ego footprint dimensions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EgoFootprint {
    pub length: f64,
    pub width: f64,
}

impl Default for EgoFootprint {
    fn default() -> Self {
        Self {
            length: DEFAULT_EGO_LENGTH,
            width: DEFAULT_EGO_WIDTH,
        }
    }
}

fn heading_at(traj: &[[f64; 2]], idx: usize) -> f64 {
    // heading from consecutive waypoints; fall back to the previous
    // segment (or forward) when degenerate
    let (a, b) = if idx + 1 < traj.len() {
        (traj[idx], traj[idx + 1])
    } else if idx > 0 {
        (traj[idx - 1], traj[idx])
    } else {
        return std::f64::consts::FRAC_PI_2;
    };
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    if dx == 0.0 && dy == 0.0 {
        if idx > 0 {
            return heading_at(traj, idx - 1);
        }
        return std::f64::consts::FRAC_PI_2;
    }
    dy.atan2(dx)
}

/// Collision rate (percent of frames whose ego box overlaps any obstacle)
/// at each horizon, plus the average.
pub fn collision_rate(
    pred: &[Vec<[f64; 2]>],
    obstacles: &ObstacleSet,
    footprint: EgoFootprint,
) -> Result<CollisionMetrics> {
    if footprint.length <= 0.0 || footprint.width <= 0.0 {
        return Err(Error::Validation("ego footprint dimensions must be positive".into()));
    }
    if pred.len() != obstacles.len() || pred.is_empty() {
        return Err(Error::Validation(format!(
            "prediction/obstacle frame counts must be nonempty and matched: {} vs {}",
            pred.len(),
            obstacles.len()
        )));
    }
    let hits = par::map_indexed(pred.len(), |i| {
        let mut hit = [false; 3];
        for (k, &idx) in HORIZON_INDICES.iter().enumerate() {
            let ego = OrientedRect {
                cx: pred[i][idx][0],
                cy: pred[i][idx][1],
                half_length: footprint.length / 2.0,
                half_width: footprint.width / 2.0,
                heading: heading_at(&pred[i], idx),
            };
            let frame_obs = obstacles[i].get(idx).map(Vec::as_slice).unwrap_or(&[]);
            hit[k] = frame_obs.iter().any(|o| rects_overlap(&ego, o));
        }
        hit
    });
    let n = hits.len() as f64;
    let mut counts = [0usize; 3];
    for h in &hits {
        for k in 0..3 {
            if h[k] {
                counts[k] += 1;
            }
        }
    }
    let at = [
        counts[0] as f64 / n * 100.0,
        counts[1] as f64 / n * 100.0,
        counts[2] as f64 / n * 100.0,
    ];
    Ok(CollisionMetrics {
        at_1s: at[0],
        at_2s: at[1],
        at_3s: at[2],
        avg: (at[0] + at[1] + at[2]) / 3.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Word-length statistics per freeform field plus per-family label
/// frequencies (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub current: FieldStats,
    pub future: FieldStats,
    pub reasoning: FieldStats,
    pub control_pct: Vec<(String, f64)>,
    pub turn_pct: Vec<(String, f64)>,
    pub lane_pct: Vec<(String, f64)>,
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

fn field_stats(counts: &[usize]) -> FieldStats {
    let min = *counts.iter().min().unwrap();
    let max = *counts.iter().max().unwrap();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    FieldStats { min, max, mean }
}

fn label_pct(labels: Vec<&str>, n: usize) -> Vec<(String, f64)> {
    let mut counts: std::collections::BTreeMap<&str, usize> = Default::default();
    for l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(l, c)| (l.to_string(), c as f64 / n as f64 * 100.0))
        .collect()
}

pub fn annotation_stats(records: &[AnnotationRecord]) -> Result<AnnotationStats> {
    if records.is_empty() {
        return Err(Error::Validation("cannot report statistics over an empty store".into()));
    }
    let c: Vec<usize> = records.iter().map(|r| word_count(&r.freeform.current_action)).collect();
    let f: Vec<usize> = records.iter().map(|r| word_count(&r.freeform.future_action)).collect();
    let r: Vec<usize> = records.iter().map(|r| word_count(&r.freeform.reasoning)).collect();
    let n = records.len();
    Ok(AnnotationStats {
        current: field_stats(&c),
        future: field_stats(&f),
        reasoning: field_stats(&r),
        control_pct: label_pct(records.iter().map(|x| x.actions.control_action.as_str()).collect(), n),
        turn_pct: label_pct(records.iter().map(|x| x.actions.turn_action.as_str()).collect(), n),
        lane_pct: label_pct(records.iter().map(|x| x.actions.lane_action.as_str()).collect(), n),
    })
}

/// Max/Min/Mean table over the three freeform fields.
pub fn format_annotation_stats(s: &AnnotationStats) -> String {
    let mut out = String::new();
    out.push_str("          A_c      A_f      A_r\n");
    out.push_str(&format!(
        "Max       {:<8} {:<8} {:<8}\n",
        s.current.max, s.future.max, s.reasoning.max
    ));
    out.push_str(&format!(
        "Min       {:<8} {:<8} {:<8}\n",
        s.current.min, s.future.min, s.reasoning.min
    ));
    out.push_str(&format!(
        "Mean      {:<8.2} {:<8.2} {:<8.2}\n",
        s.current.mean, s.future.mean, s.reasoning.mean
    ));
    out
}

/// One participant's questionnaire answers: per-case 1-5 scores for the
/// three freeform fields and true/false judgments for the three actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireRecord {
    pub participant: String,
    pub scores_current: Vec<f64>,
    pub scores_future: Vec<f64>,
    pub scores_reasoning: Vec<f64>,
    pub correct_control: Vec<bool>,
    pub correct_turn: Vec<bool>,
    pub correct_lane: Vec<bool>,
}

impl QuestionnaireRecord {
    fn validate(&self) -> Result<()> {
        let n = self.scores_current.len();
        if n == 0 {
            return Err(Error::Validation(format!(
                "participant {} has no cases",
                self.participant
            )));
        }
        let lens = [
            self.scores_future.len(),
            self.scores_reasoning.len(),
            self.correct_control.len(),
            self.correct_turn.len(),
            self.correct_lane.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::Validation(format!(
                "participant {}: mismatched case counts",
                self.participant
            )));
        }
        for s in self
            .scores_current
            .iter()
            .chain(&self.scores_future)
            .chain(&self.scores_reasoning)
        {
            if !(1.0..=5.0).contains(s) {
                return Err(Error::Validation(format!(
                    "participant {}: score {s} outside [1, 5]",
                    self.participant
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantSummary {
    pub participant: String,
    pub avg_current: f64,
    pub avg_future: f64,
    pub avg_reasoning: f64,
    pub acc_control: f64,
    pub acc_turn: f64,
    pub acc_lane: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireReport {
    pub participants: Vec<ParticipantSummary>,
    pub mean: ParticipantSummary,
    /// Sample standard deviation across participants (n - 1 denominator).
    pub std: ParticipantSummary,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn accuracy(bs: &[bool]) -> f64 {
    bs.iter().filter(|&&b| b).count() as f64 / bs.len() as f64
}

pub fn questionnaire_report(records: &[QuestionnaireRecord]) -> Result<QuestionnaireReport> {
    if records.is_empty() {
        return Err(Error::Validation("no questionnaire records".into()));
    }
    for r in records {
        r.validate()?;
    }
    let participants: Vec<ParticipantSummary> = records
        .iter()
        .map(|r| ParticipantSummary {
            participant: r.participant.clone(),
            avg_current: mean(&r.scores_current),
            avg_future: mean(&r.scores_future),
            avg_reasoning: mean(&r.scores_reasoning),
            acc_control: accuracy(&r.correct_control),
            acc_turn: accuracy(&r.correct_turn),
            acc_lane: accuracy(&r.correct_lane),
        })
        .collect();
    let col = |f: fn(&ParticipantSummary) -> f64| -> Vec<f64> { participants.iter().map(f).collect() };
    let agg = |f: fn(&ParticipantSummary) -> f64, reduce: fn(&[f64]) -> f64| reduce(&col(f));
    let mean_row = ParticipantSummary {
        participant: "Average".into(),
        avg_current: agg(|p| p.avg_current, mean),
        avg_future: agg(|p| p.avg_future, mean),
        avg_reasoning: agg(|p| p.avg_reasoning, mean),
        acc_control: agg(|p| p.acc_control, mean),
        acc_turn: agg(|p| p.acc_turn, mean),
        acc_lane: agg(|p| p.acc_lane, mean),
    };
    let std_row = ParticipantSummary {
        participant: "Std".into(),
        avg_current: agg(|p| p.avg_current, sample_std),
        avg_future: agg(|p| p.avg_future, sample_std),
        avg_reasoning: agg(|p| p.avg_reasoning, sample_std),
        acc_control: agg(|p| p.acc_control, sample_std),
        acc_turn: agg(|p| p.acc_turn, sample_std),
        acc_lane: agg(|p| p.acc_lane, sample_std),
    };
    Ok(QuestionnaireReport {
        participants,
        mean: mean_row,
        std: std_row,
    })
}

pub fn format_questionnaire(report: &QuestionnaireReport) -> String {
    let mut out = String::new();
    out.push_str("Participant  A_c    A_f    A_r    control turn   lane\n");
    let row = |p: &ParticipantSummary| {
        format!(
            "{:<12} {:<6.2} {:<6.2} {:<6.2} {:<7.2} {:<6.2} {:<6.2}\n",
            p.participant, p.avg_current, p.avg_future, p.avg_reasoning,
            p.acc_control, p.acc_turn, p.acc_lane
        )
    };
    for p in &report.participants {
        out.push_str(&row(p));
    }
    out.push_str(&row(&report.mean));
    out.push_str(&row(&report.std));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight(n: usize, offset: f64) -> Vec<[f64; 2]> {
        (1..=n).map(|i| [offset, 4.0 * i as f64]).collect()
    }

    #[test]
    fn identical_trajectories_give_zero_l2() {
        let t = vec![straight(6, 0.0); 3];
        let m = l2_displacement(&t, &t).unwrap();
        assert_eq!(m.avg, 0.0);
    }

    #[test]
    fn constant_lateral_offset_gives_constant_l2() {
        let gt = vec![straight(6, 0.0); 4];
        let pred = vec![straight(6, 1.0); 4];
        let m = l2_displacement(&pred, &gt).unwrap();
        assert_abs_diff_eq!(m.at_1s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.at_2s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.at_3s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.avg, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_fixture_matches_hand_computation() {
        // three hand-written pairs; errors at indices 1, 3, 5 only
        let gt = vec![straight(6, 0.0), straight(6, 0.0), straight(6, 0.0)];
        let mut pred = gt.clone();
        pred[0][1] = [3.0, 8.0]; // 1s error 3
        pred[1][3] = [0.0, 20.0]; // 2s error 4
        pred[2][5] = [0.0, 29.0]; // 3s error 5
        let m = l2_displacement(&pred, &gt).unwrap();
        assert_abs_diff_eq!(m.at_1s, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.at_2s, 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.at_3s, 5.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.avg, 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn l2_is_translation_invariant() {
        let gt = vec![straight(6, 0.0); 2];
        let pred = vec![straight(6, 0.7); 2];
        let shift = |t: &Vec<[f64; 2]>| -> Vec<[f64; 2]> {
            t.iter().map(|p| [p[0] + 11.0, p[1] - 3.0]).collect()
        };
        let a = l2_displacement(&pred, &gt).unwrap();
        let b = l2_displacement(
            &pred.iter().map(shift).collect::<Vec<_>>(),
            &gt.iter().map(shift).collect::<Vec<_>>(),
        )
        .unwrap();
        assert_abs_diff_eq!(a.avg, b.avg, epsilon = 1e-12);
    }

    #[test]
    fn empty_obstacles_never_collide() {
        let pred = vec![straight(6, 0.0); 5];
        let obs: ObstacleSet = vec![vec![vec![]; 6]; 5];
        let m = collision_rate(&pred, &obs, EgoFootprint::default()).unwrap();
        assert_eq!(m.avg, 0.0);
    }

    #[test]
    fn waypoint_inside_obstacle_collides() {
        let pred = vec![straight(6, 0.0)];
        let mut obs: ObstacleSet = vec![vec![vec![]; 6]; 1];
        obs[0][5].push(OrientedRect {
            cx: 0.0,
            cy: 24.0,
            half_length: 1.0,
            half_width: 1.0,
            heading: 0.0,
        });
        let m = collision_rate(&pred, &obs, EgoFootprint::default()).unwrap();
        assert_eq!(m.at_3s, 100.0);
        assert_eq!(m.at_1s, 0.0);
    }

    #[test]
    fn collision_monotone_in_footprint() {
        // obstacle just outside the small footprint, inside the big one
        let pred = vec![straight(6, 0.0)];
        let mut obs: ObstacleSet = vec![vec![vec![]; 6]; 1];
        obs[0][1].push(OrientedRect {
            cx: 2.0,
            cy: 8.0,
            half_length: 0.5,
            half_width: 0.5,
            heading: 0.0,
        });
        let small = collision_rate(
            &pred,
            &obs,
            EgoFootprint {
                length: 4.0,
                width: 1.8,
            },
        )
        .unwrap();
        let big = collision_rate(
            &pred,
            &obs,
            EgoFootprint {
                length: 4.0,
                width: 6.0,
            },
        )
        .unwrap();
        assert!(big.at_1s >= small.at_1s);
        assert_eq!(small.at_1s, 0.0);
        assert_eq!(big.at_1s, 100.0);
    }

    #[test]
    fn sat_detects_rotated_overlap() {
        let a = OrientedRect {
            cx: 0.0,
            cy: 0.0,
            half_length: 2.0,
            half_width: 1.0,
            heading: 0.0,
        };
        let b = OrientedRect {
            cx: 2.5,
            cy: 0.0,
            half_length: 2.0,
            half_width: 0.3,
            heading: std::f64::consts::FRAC_PI_4,
        };
        assert!(rects_overlap(&a, &b));
        let far = OrientedRect { cx: 10.0, ..b };
        assert!(!rects_overlap(&a, &far));
    }

    #[test]
    fn stats_of_single_record() {
        use crate::annotation::*;
        let rec = AnnotationRecord {
            sample_id: "s".into(),
            freeform: FreeformAnnotation {
                current_action: "one two three four five six".into(),
                future_action: "a b".into(),
                reasoning: "x".into(),
            },
            actions: StructuredActionAnnotation {
                control_action: "go straight".into(),
                turn_action: "none".into(),
                lane_action: "none".into(),
            },
            teacher_id: "t".into(),
            raw_p1: String::new(),
            raw_p2: String::new(),
            created_at: String::new(),
        };
        let s = annotation_stats(&[rec]).unwrap();
        assert_eq!(s.current.min, 6);
        assert_eq!(s.current.max, 6);
        assert_abs_diff_eq!(s.current.mean, 6.0);
        assert_eq!(s.control_pct, vec![("go straight".to_string(), 100.0)]);
    }

    #[test]
    fn stats_mean_lies_between_min_and_max() {
        let s = field_stats(&[3, 9, 6, 12]);
        assert!(s.min as f64 <= s.mean && s.mean <= s.max as f64);
    }

    #[test]
    fn empty_store_is_an_error() {
        assert!(annotation_stats(&[]).is_err());
    }

    #[test]
    fn two_participant_std_matches_direct_formula() {
        let rec = |name: &str, score: f64, ok: bool| QuestionnaireRecord {
            participant: name.into(),
            scores_current: vec![score; 4],
            scores_future: vec![score; 4],
            scores_reasoning: vec![score; 4],
            correct_control: vec![ok; 4],
            correct_turn: vec![ok; 4],
            correct_lane: vec![ok; 4],
        };
        let report = questionnaire_report(&[rec("p1", 4.0, true), rec("p2", 5.0, false)]).unwrap();
        assert_abs_diff_eq!(report.mean.avg_current, 4.5, epsilon = 1e-12);
        // sample std of {4, 5} = sqrt(0.5)
        assert_abs_diff_eq!(report.std.avg_current, 0.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(report.mean.acc_control, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn perfect_participant_averages_five() {
        let rec = QuestionnaireRecord {
            participant: "p".into(),
            scores_current: vec![5.0; 10],
            scores_future: vec![5.0; 10],
            scores_reasoning: vec![5.0; 10],
            correct_control: vec![true; 10],
            correct_turn: vec![true; 10],
            correct_lane: vec![false; 10],
        };
        let report = questionnaire_report(&[rec]).unwrap();
        assert_eq!(report.participants[0].avg_current, 5.0);
        assert_eq!(report.participants[0].acc_lane, 0.0);
    }

    #[test]
    fn mismatched_case_counts_rejected() {
        let rec = QuestionnaireRecord {
            participant: "p".into(),
            scores_current: vec![5.0; 3],
            scores_future: vec![5.0; 2],
            scores_reasoning: vec![5.0; 3],
            correct_control: vec![true; 3],
            correct_turn: vec![true; 3],
            correct_lane: vec![true; 3],
        };
        assert!(questionnaire_report(&[rec]).is_err());
    }
}
