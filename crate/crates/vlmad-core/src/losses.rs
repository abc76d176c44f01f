//! Temperature-normalized alignment loss, action classification loss, and
//! the weighted total, plus the ablation alignment variants.
//!
//! The teacher side is always a plain (non-differentiated) temperature
//! softmax of the supervision features; the student side lives on the tape
//! so gradients flow into the heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, LOG_EPS};
use crate::encoding::{ActionLabelTriple, TextFeatureTriple};
use crate::error::{Error, Result};

/// Alignment-variant selector. `Align` is the temperature cross-entropy
/// default; the rest are the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentVariant {
    Align,
    Mse,
    Kl,
    Cosine,
    Contrastive,
}

impl std::str::FromStr for AlignmentVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "align" => Ok(Self::Align),
            "mse" => Ok(Self::Mse),
            "kl" => Ok(Self::Kl),
            "cosine" => Ok(Self::Cosine),
            "contrastive" => Ok(Self::Contrastive),
            other => Err(Error::Config(format!("unknown alignment variant: {other}"))),
        }
    }
}

/// Temperature for the contrastive variant's similarity logits.
pub const CONTRASTIVE_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Teacher temperature.
    pub tau_t: f64,
    /// Student temperature.
    pub tau_s: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alignment_variant: AlignmentVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_t: 0.04,
            tau_s: 0.1,
            lambda1: 1.0,
            lambda2: 0.1,
            alignment_variant: AlignmentVariant::Align,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_t <= 0.0 || self.tau_s <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-term loss values for one sample (or one batch mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_align: f64,
    pub l_action: f64,
    pub total: f64,
    pub align_c: f64,
    pub align_f: f64,
    pub align_r: f64,
    pub action_control: f64,
    pub action_turn: f64,
    pub action_lane: f64,
}

/// softmax(v / tau) with max subtraction.
pub fn temperature_distribution(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite entry in feature vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Student-side temperature distribution on the tape.
pub fn temperature_distribution_var(tape: &mut Tape, v: Var, tau: f64) -> Var {
    let scaled = tape.scale(v, 1.0 / tau);
    tape.softmax_rows(scaled)
}

/// Cross-entropy -sum(p_target * log p_student) against a constant target.
fn cross_entropy_term(tape: &mut Tape, target: &[f64], student_probs: Var) -> Var {
    let t = tape.leaf(1, target.len(), target.to_vec());
    let log_p = tape.log(student_probs);
    let prod = tape.mul(t, log_p);
    let s = tape.sum_all(prod);
    tape.scale(s, -1.0)
}

/// Per-term tape values for one alignment evaluation.
pub struct AlignmentTerms {
    pub terms: [Var; 3],
    pub total: Var,
}

/// Default alignment loss: teacher at tau_t, student at tau_s, three
/// cross-entropy terms summed, no centering.
pub fn alignment_loss(
    tape: &mut Tape,
    y1: &TextFeatureTriple,
    f1: &[Var; 3],
    cfg: &LossConfig,
) -> Result<AlignmentTerms> {
    cfg.validate()?;
    let supervision = [&y1.y_c, &y1.y_f, &y1.y_r];
    let mut terms = Vec::with_capacity(3);
    for (y, f_hat) in supervision.iter().zip(f1) {
        let (_, c) = tape.shape(*f_hat);
        if c != y.len() {
            return Err(Error::Config(format!(
                "alignment dimension mismatch: supervision {} vs output {c}",
                y.len()
            )));
        }
        let p_teacher = temperature_distribution(y, cfg.tau_t)?;
        let p_student = temperature_distribution_var(tape, *f_hat, cfg.tau_s);
        terms.push(cross_entropy_term(tape, &p_teacher, p_student));
    }
    let ab = tape.add(terms[0], terms[1]);
    let total = tape.add(ab, terms[2]);
    Ok(AlignmentTerms {
        terms: [terms[0], terms[1], terms[2]],
        total,
    })
}

/// Ablation variants for the alignment term.
pub fn alignment_variant_loss(
    tape: &mut Tape,
    y1: &TextFeatureTriple,
    f1: &[Var; 3],
    variant: AlignmentVariant,
    cfg: &LossConfig,
) -> Result<AlignmentTerms> {
    match variant {
        AlignmentVariant::Align => alignment_loss(tape, y1, f1, cfg),
        AlignmentVariant::Mse => {
            let supervision = [&y1.y_c, &y1.y_f, &y1.y_r];
            let mut terms = Vec::with_capacity(3);
            for (y, f_hat) in supervision.iter().zip(f1) {
                let t = tape.leaf(1, y.len(), (*y).clone());
                let d = tape.sub(*f_hat, t);
                let sq = tape.mul(d, d);
                let s = tape.sum_all(sq);
                terms.push(tape.scale(s, 1.0 / y.len() as f64));
            }
            let ab = tape.add(terms[0], terms[1]);
            let total = tape.add(ab, terms[2]);
            Ok(AlignmentTerms {
                terms: [terms[0], terms[1], terms[2]],
                total,
            })
        }
        AlignmentVariant::Kl => {
            // KL(P_t || P_s) = CE(P_t, P_s) - H(P_t)
            let supervision = [&y1.y_c, &y1.y_f, &y1.y_r];
            let mut terms = Vec::with_capacity(3);
            for (y, f_hat) in supervision.iter().zip(f1) {
                let p_teacher = temperature_distribution(y, cfg.tau_t)?;
                let entropy: f64 = -p_teacher
                    .iter()
                    .map(|&p| p * (p + LOG_EPS).ln())
                    .sum::<f64>();
                let p_student = temperature_distribution_var(tape, *f_hat, cfg.tau_s);
                let ce = cross_entropy_term(tape, &p_teacher, p_student);
                terms.push(tape.add_const(ce, -entropy));
            }
            let ab = tape.add(terms[0], terms[1]);
            let total = tape.add(ab, terms[2]);
            Ok(AlignmentTerms {
                terms: [terms[0], terms[1], terms[2]],
                total,
            })
        }
        AlignmentVariant::Cosine => {
            let supervision = [&y1.y_c, &y1.y_f, &y1.y_r];
            let mut terms = Vec::with_capacity(3);
            for (y, f_hat) in supervision.iter().zip(f1) {
                let y_norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
                if y_norm == 0.0 {
                    return Err(Error::DegenerateInput(
                        "zero-norm supervision vector in cosine alignment".into(),
                    ));
                }
                let f_val = tape.value(*f_hat);
                if f_val.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                    return Err(Error::DegenerateInput(
                        "zero-norm output vector in cosine alignment".into(),
                    ));
                }
                let t = tape.leaf(1, y.len(), (*y).clone());
                let prod = tape.mul(*f_hat, t);
                let dot = tape.sum_all(prod);
                let f_sq = tape.mul(*f_hat, *f_hat);
                let f_sum = tape.sum_all(f_sq);
                let f_norm = tape.sqrt(f_sum);
                let inv_fn = tape.recip(f_norm);
                let cos_part = tape.mul(dot, inv_fn);
                let cos = tape.scale(cos_part, 1.0 / y_norm);
                let neg = tape.scale(cos, -1.0);
                terms.push(tape.add_const(neg, 1.0));
            }
            let ab = tape.add(terms[0], terms[1]);
            let total = tape.add(ab, terms[2]);
            Ok(AlignmentTerms {
                terms: [terms[0], terms[1], terms[2]],
                total,
            })
        }
        AlignmentVariant::Contrastive => Err(Error::Config(
            "contrastive variant is batch-level; use contrastive_alignment_loss".into(),
        )),
    }
}

/// Symmetric batch-level contrastive loss over cosine-similarity logits.
/// `outputs[i][t]` is the t-th alignment output of sample i; each frame's
/// own text feature is its single positive.
pub fn contrastive_alignment_loss(
    tape: &mut Tape,
    supervision: &[TextFeatureTriple],
    outputs: &[[Var; 3]],
) -> Result<Var> {
    let b = supervision.len();
    if b == 0 || outputs.len() != b {
        return Err(Error::Config("contrastive loss needs a nonempty matched batch".into()));
    }
    let dim = supervision[0].dim();
    let mut total: Option<Var> = None;
    for t in 0..3 {
        // stack student outputs into a B x C matrix
        let mut f_mat: Option<Var> = None;
        let mut y_data = Vec::with_capacity(b * dim);
        for (i, triple) in supervision.iter().enumerate() {
            let y = match t {
                0 => &triple.y_c,
                1 => &triple.y_f,
                _ => &triple.y_r,
            };
            let y_norm = y.iter().map(|x| x * x).sum::<f64>().sqrt();
            if y_norm == 0.0 {
                return Err(Error::DegenerateInput(
                    "zero-norm supervision vector in contrastive alignment".into(),
                ));
            }
            y_data.extend(y.iter().map(|v| v / y_norm));
            let f = outputs[i][t];
            if tape.value(f).iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(Error::DegenerateInput(
                    "zero-norm output vector in contrastive alignment".into(),
                ));
            }
            f_mat = Some(match f_mat {
                Some(acc) => tape.concat_rows(acc, f),
                None => f,
            });
        }
        let f_mat = f_mat.expect("nonempty batch");
        let f_n = tape.normalize_rows(f_mat);
        let y_n = tape.leaf(b, dim, y_data);
        let sims = tape.matmul_bt(f_n, y_n);
        let logits = tape.scale(sims, 1.0 / CONTRASTIVE_TEMPERATURE);
        // rows: student -> text; cols: text -> student
        let eye: Vec<f64> = (0..b * b)
            .map(|i| if i / b == i % b { 1.0 } else { 0.0 })
            .collect();
        let row_ce = diagonal_cross_entropy(tape, logits, &eye, b);
        let logits_t = tape.transpose(logits);
        let col_ce = diagonal_cross_entropy(tape, logits_t, &eye, b);
        let sym = tape.add(row_ce, col_ce);
        let term = tape.scale(sym, 0.5);
        total = Some(match total {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    Ok(total.expect("three terms"))
}

fn diagonal_cross_entropy(tape: &mut Tape, logits: Var, eye: &[f64], b: usize) -> Var {
    let probs = tape.softmax_rows(logits);
    let log_p = tape.log(probs);
    let mask = tape.leaf(b, b, eye.to_vec());
    let picked = tape.mul(mask, log_p);
    let s = tape.sum_all(picked);
    tape.scale(s, -1.0 / b as f64)
}

pub struct ActionTerms {
    pub terms: [Var; 3],
    pub total: Var,
}

/// Classification loss: since supervision is one-hot, each family term is
/// -log p[true index].
pub fn action_loss(tape: &mut Tape, y2: &ActionLabelTriple, probs: &[Var; 3]) -> Result<ActionTerms> {
    let supervision = [&y2.y_control, &y2.y_turn, &y2.y_lane];
    let mut terms = Vec::with_capacity(3);
    for (y, p) in supervision.iter().zip(probs) {
        let (_, n) = tape.shape(*p);
        if n != y.len() {
            return Err(Error::Config(format!(
                "action dimension mismatch: label {} vs probs {n}",
                y.len()
            )));
        }
        terms.push(cross_entropy_term(tape, y, *p));
    }
    let ab = tape.add(terms[0], terms[1]);
    let total = tape.add(ab, terms[2]);
    Ok(ActionTerms {
        terms: [terms[0], terms[1], terms[2]],
        total,
    })
}

pub struct TotalLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Weighted sum lambda1 * L_align + lambda2 * L_action, with the per-term
/// breakdown recorded.
pub fn total_loss(
    tape: &mut Tape,
    align: &AlignmentTerms,
    action: &ActionTerms,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let wa = tape.scale(align.total, cfg.lambda1);
    let wb = tape.scale(action.total, cfg.lambda2);
    let total = tape.add(wa, wb);
    let breakdown = LossBreakdown {
        l_align: tape.scalar_value(align.total),
        l_action: tape.scalar_value(action.total),
        total: tape.scalar_value(total),
        align_c: tape.scalar_value(align.terms[0]),
        align_f: tape.scalar_value(align.terms[1]),
        align_r: tape.scalar_value(align.terms[2]),
        action_control: tape.scalar_value(action.terms[0]),
        action_turn: tape.scalar_value(action.terms[1]),
        action_lane: tape.scalar_value(action.terms[2]),
    };
    Ok(TotalLoss { total, breakdown })
}

/// Convenience: evaluate the default losses on plain vectors (no gradients
/// kept). Used by reporting paths and tests.
pub fn evaluate_losses(
    y1: &TextFeatureTriple,
    f1: [&[f64]; 3],
    y2: &ActionLabelTriple,
    p2: [&[f64]; 3],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let f_vars = [
        tape.leaf(1, f1[0].len(), f1[0].to_vec()),
        tape.leaf(1, f1[1].len(), f1[1].to_vec()),
        tape.leaf(1, f1[2].len(), f1[2].to_vec()),
    ];
    // p2 entries are already probabilities; wrap them as leaves
    let p_vars = [
        tape.leaf(1, p2[0].len(), p2[0].to_vec()),
        tape.leaf(1, p2[1].len(), p2[1].to_vec()),
        tape.leaf(1, p2[2].len(), p2[2].to_vec()),
    ];
    let align = alignment_loss(&mut tape, y1, &f_vars, cfg)?;
    let action = action_loss(&mut tape, y2, &p_vars)?;
    let t = total_loss(&mut tape, &align, &action, cfg)?;
    Ok(t.breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn simple_y2() -> ActionLabelTriple {
        ActionLabelTriple {
            y_control: vec![1.0, 0.0, 0.0, 0.0],
            y_turn: vec![0.0, 0.0, 0.0, 1.0],
            y_lane: vec![0.0, 0.0, 0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn constant_vector_gives_uniform_distribution() {
        for tau in [0.04, 0.1, 1.0] {
            let p = temperature_distribution(&[3.0; 5], tau).unwrap();
            for x in p {
                assert_abs_diff_eq!(x, 0.2, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn two_entry_softmax_matches_direct_evaluation() {
        let p = temperature_distribution(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(p[0], e / (e + 1.0), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 / (e + 1.0), epsilon = 1e-15);
    }

    #[test]
    fn lower_temperature_sharpens() {
        let sharp = temperature_distribution(&[1.0, 0.0], 0.04).unwrap();
        let soft = temperature_distribution(&[1.0, 0.0], 0.1).unwrap();
        assert!(sharp[0] > soft[0]);
    }

    #[test]
    fn nonpositive_temperature_is_a_config_error() {
        assert!(temperature_distribution(&[1.0], 0.0).is_err());
        assert!(temperature_distribution(&[1.0], -0.1).is_err());
    }

    #[test]
    fn matched_distributions_hit_the_entropy_floor() {
        // if P(f_hat) == P(y), cross-entropy equals the target entropy
        let cfg = LossConfig::default();
        let y = vec![0.3, -0.8, 0.5, 0.1];
        let y1 = TextFeatureTriple {
            y_c: y.clone(),
            y_f: y.clone(),
            y_r: y.clone(),
        };
        // choose f_hat = y * (tau_s / tau_t) so the student softmax
        // reproduces the teacher distribution exactly
        let f: Vec<f64> = y.iter().map(|v| v * cfg.tau_s / cfg.tau_t).collect();
        let mut tape = Tape::new();
        let f_vars = [
            tape.leaf(1, 4, f.clone()),
            tape.leaf(1, 4, f.clone()),
            tape.leaf(1, 4, f.clone()),
        ];
        let align = alignment_loss(&mut tape, &y1, &f_vars, &cfg).unwrap();
        let p = temperature_distribution(&y, cfg.tau_t).unwrap();
        let entropy: f64 = -p.iter().map(|&x| x * x.ln()).sum::<f64>();
        assert_abs_diff_eq!(tape.scalar_value(align.total), 3.0 * entropy, epsilon = 1e-9);
    }

    #[test]
    fn uniform_teacher_uniform_student_is_three_log_four() {
        let cfg = LossConfig::default();
        let y1 = TextFeatureTriple {
            y_c: vec![0.0; 4],
            y_f: vec![0.0; 4],
            y_r: vec![0.0; 4],
        };
        let mut tape = Tape::new();
        let f_vars = [
            tape.leaf(1, 4, vec![0.0; 4]),
            tape.leaf(1, 4, vec![0.0; 4]),
            tape.leaf(1, 4, vec![0.0; 4]),
        ];
        let align = alignment_loss(&mut tape, &y1, &f_vars, &cfg).unwrap();
        assert_abs_diff_eq!(
            tape.scalar_value(align.total),
            3.0 * 4.0f64.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn action_loss_oracle_values() {
        let y2 = simple_y2();
        let mut tape = Tape::new();
        // control 0.7 at true index; turn and lane uniform
        let p = [
            tape.leaf(1, 4, vec![0.7, 0.1, 0.1, 0.1]),
            tape.leaf(1, 4, vec![0.25; 4]),
            tape.leaf(1, 5, vec![0.2; 5]),
        ];
        let action = action_loss(&mut tape, &y2, &p).unwrap();
        let expect = -(0.7f64.ln()) + 4.0f64.ln() + 5.0f64.ln();
        assert_abs_diff_eq!(tape.scalar_value(action.total), expect, epsilon = 1e-9);
    }

    #[test]
    fn perfect_classification_is_zero_loss() {
        let y2 = simple_y2();
        let mut tape = Tape::new();
        let p = [
            tape.leaf(1, 4, vec![1.0, 0.0, 0.0, 0.0]),
            tape.leaf(1, 4, vec![0.0, 0.0, 0.0, 1.0]),
            tape.leaf(1, 5, vec![0.0, 0.0, 0.0, 0.0, 1.0]),
        ];
        let action = action_loss(&mut tape, &y2, &p).unwrap();
        // -log(1 + eps) is not exactly zero but within eps
        assert_abs_diff_eq!(tape.scalar_value(action.total), 0.0, epsilon = 1e-11);
    }

    #[test]
    fn total_is_weighted_sum() {
        let y1 = TextFeatureTriple {
            y_c: vec![0.0; 4],
            y_f: vec![0.0; 4],
            y_r: vec![0.0; 4],
        };
        let y2 = simple_y2();
        let b = evaluate_losses(
            &y1,
            [&[0.0; 4], &[0.0; 4], &[0.0; 4]],
            &y2,
            [&[0.25; 4], &[0.25; 4], &[0.2; 5]],
            &LossConfig {
                lambda1: 1.0,
                lambda2: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(
            b.total,
            b.l_align + 0.1 * b.l_action,
            epsilon = 1e-12
        );
        // lambda2 = 0 drops the action term entirely
        let b0 = evaluate_losses(
            &y1,
            [&[0.0; 4], &[0.0; 4], &[0.0; 4]],
            &y2,
            [&[0.25; 4], &[0.25; 4], &[0.2; 5]],
            &LossConfig {
                lambda2: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(b0.total, b0.l_align, epsilon = 1e-15);
    }

    #[test]
    fn mse_of_identical_features_is_zero() {
        let y = vec![0.4, -0.6, 0.2];
        let y1 = TextFeatureTriple {
            y_c: y.clone(),
            y_f: y.clone(),
            y_r: y.clone(),
        };
        let mut tape = Tape::new();
        let f = [
            tape.leaf(1, 3, y.clone()),
            tape.leaf(1, 3, y.clone()),
            tape.leaf(1, 3, y.clone()),
        ];
        let out =
            alignment_variant_loss(&mut tape, &y1, &f, AlignmentVariant::Mse, &LossConfig::default())
                .unwrap();
        assert_eq!(tape.scalar_value(out.total), 0.0);
    }

    #[test]
    fn cosine_is_scale_invariant() {
        let y = vec![0.4, -0.6, 0.2];
        let y1 = TextFeatureTriple {
            y_c: y.clone(),
            y_f: y.clone(),
            y_r: y.clone(),
        };
        let doubled: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let mut tape = Tape::new();
        let f = [
            tape.leaf(1, 3, doubled.clone()),
            tape.leaf(1, 3, doubled.clone()),
            tape.leaf(1, 3, doubled.clone()),
        ];
        let out = alignment_variant_loss(
            &mut tape,
            &y1,
            &f,
            AlignmentVariant::Cosine,
            &LossConfig::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(tape.scalar_value(out.total), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_of_matched_distributions_is_zero() {
        let cfg = LossConfig::default();
        let y = vec![0.3, -0.8, 0.5, 0.1];
        let y1 = TextFeatureTriple {
            y_c: y.clone(),
            y_f: y.clone(),
            y_r: y.clone(),
        };
        let f: Vec<f64> = y.iter().map(|v| v * cfg.tau_s / cfg.tau_t).collect();
        let mut tape = Tape::new();
        let fv = [
            tape.leaf(1, 4, f.clone()),
            tape.leaf(1, 4, f.clone()),
            tape.leaf(1, 4, f.clone()),
        ];
        let out = alignment_variant_loss(&mut tape, &y1, &fv, AlignmentVariant::Kl, &cfg).unwrap();
        assert_abs_diff_eq!(tape.scalar_value(out.total), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn cosine_rejects_zero_norm() {
        let y1 = TextFeatureTriple {
            y_c: vec![0.0; 3],
            y_f: vec![1.0, 0.0, 0.0],
            y_r: vec![1.0, 0.0, 0.0],
        };
        let mut tape = Tape::new();
        let f = [
            tape.leaf(1, 3, vec![1.0, 0.0, 0.0]),
            tape.leaf(1, 3, vec![1.0, 0.0, 0.0]),
            tape.leaf(1, 3, vec![1.0, 0.0, 0.0]),
        ];
        let out = alignment_variant_loss(
            &mut tape,
            &y1,
            &f,
            AlignmentVariant::Cosine,
            &LossConfig::default(),
        );
        assert!(matches!(out, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn contrastive_matched_batch_is_finite_and_small() {
        // perfectly matched pairs should concentrate mass on the diagonal
        let sup: Vec<TextFeatureTriple> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                TextFeatureTriple {
                    y_c: v.clone(),
                    y_f: v.clone(),
                    y_r: v,
                }
            })
            .collect();
        let mut tape = Tape::new();
        let outs: Vec<[Var; 3]> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                [
                    tape.leaf(1, 4, v.clone()),
                    tape.leaf(1, 4, v.clone()),
                    tape.leaf(1, 4, v.clone()),
                ]
            })
            .collect();
        let loss = contrastive_alignment_loss(&mut tape, &sup, &outs).unwrap();
        let v = tape.scalar_value(loss);
        assert!(v.is_finite());
        // diagonal similarity 1 vs off-diagonal 0 at temperature 0.07
        assert!(v < 0.01, "loss {v}");
    }
}
