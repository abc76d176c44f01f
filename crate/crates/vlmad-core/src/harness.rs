//! Synthetic end-to-end harness: a toy planner trained with and without the
//! auxiliary heads on generated maneuver scenes.
//!
//! Scenes carry a noisy descriptor (the stand-in for a sensor feature), a
//! closed-form ground-truth trajectory, and templated annotations whose
//! content depends only on the maneuver class. The planner is a small MLP
//! that maps descriptor to ego tokens to waypoints; auxiliary supervision
//! flows into the shared encoder unless the stop-gradient flag is set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{ActionVocabulary, FreeformAnnotation, StructuredActionAnnotation};
use crate::autodiff::{Tape, Var};
use crate::encoding::{
    encode_actions, encode_freeform, ActionLabelTriple, BagOfWordsHashEncoder, TextFeatureTriple,
};
use crate::error::{Error, Result};
use crate::hash::split_seed;
use crate::heads::{
    action_head_forward, alignment_head_forward, fan_in_uniform, init_parameters,
    AuxiliaryHeadConfig, BoundParams, ParameterStore,
};
use crate::losses::{
    action_loss, alignment_variant_loss, contrastive_alignment_loss, total_loss, AlignmentVariant,
    LossConfig,
};
use crate::metrics::{l2_displacement, L2Metrics};
use crate::par;

pub const HORIZON_STEPS: usize = 6;
pub const TIMESTEP_SECS: f64 = 0.5;
pub const NUM_CLASSES: usize = 6;
/// Lateral offset of a completed lane change, meters.
pub const LANE_WIDTH: f64 = 3.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverClass {
    Straight,
    TurnLeft,
    TurnRight,
    Stop,
    LaneChangeLeft,
    LaneChangeRight,
}

pub const ALL_CLASSES: [ManeuverClass; NUM_CLASSES] = [
    ManeuverClass::Straight,
    ManeuverClass::TurnLeft,
    ManeuverClass::TurnRight,
    ManeuverClass::Stop,
    ManeuverClass::LaneChangeLeft,
    ManeuverClass::LaneChangeRight,
];

impl ManeuverClass {
    pub fn index(&self) -> usize {
        ALL_CLASSES.iter().position(|c| c == self).unwrap()
    }

    /// Structured labels implied by the maneuver, in vocabulary terms.
    pub fn actions(&self) -> StructuredActionAnnotation {
        let (control, turn, lane) = match self {
            ManeuverClass::Straight => ("go straight", "none", "none"),
            ManeuverClass::TurnLeft => ("move slowly", "turn left", "none"),
            ManeuverClass::TurnRight => ("move slowly", "turn right", "none"),
            ManeuverClass::Stop => ("stop", "none", "none"),
            ManeuverClass::LaneChangeLeft => ("go straight", "none", "change lane to the left"),
            ManeuverClass::LaneChangeRight => ("go straight", "none", "change lane to the right"),
        };
        StructuredActionAnnotation {
            control_action: control.into(),
            turn_action: turn.into(),
            lane_action: lane.into(),
        }
    }
}

/// Noise-free maneuver curve: waypoint k sits at t = (k + 1) * 0.5 s.
/// Frame is x-right / y-forward.
pub fn maneuver_curve(class: ManeuverClass, speed: f64, turn_radius: f64) -> Vec<[f64; 2]> {
    (0..HORIZON_STEPS)
        .map(|k| {
            let t = (k + 1) as f64 * TIMESTEP_SECS;
            match class {
                ManeuverClass::Straight => [0.0, speed * t],
                ManeuverClass::Stop => {
                    // linear deceleration to rest at t_end
                    let t_end = 2.0;
                    let y = if t < t_end {
                        speed * (t - t * t / (2.0 * t_end))
                    } else {
                        speed * t_end / 2.0
                    };
                    [0.0, y]
                }
                ManeuverClass::TurnLeft => {
                    let theta = speed * t / turn_radius;
                    [-turn_radius * (1.0 - theta.cos()), turn_radius * theta.sin()]
                }
                ManeuverClass::TurnRight => {
                    let theta = speed * t / turn_radius;
                    [turn_radius * (1.0 - theta.cos()), turn_radius * theta.sin()]
                }
                ManeuverClass::LaneChangeLeft | ManeuverClass::LaneChangeRight => {
                    let u = (t / 3.0).min(1.0);
                    let lateral = LANE_WIDTH * (3.0 * u * u - 2.0 * u * u * u);
                    let sign = if matches!(class, ManeuverClass::LaneChangeLeft) {
                        -1.0
                    } else {
                        1.0
                    };
                    [sign * lateral, speed * t]
                }
            }
        })
        .collect()
}

fn speed_range(class: ManeuverClass) -> (f64, f64) {
    match class {
        ManeuverClass::TurnLeft | ManeuverClass::TurnRight => (3.0, 6.0),
        ManeuverClass::Stop => (4.0, 8.0),
        _ => (6.0, 10.0),
    }
}

fn freeform_for(class: ManeuverClass, rng: &mut ChaCha8Rng) -> FreeformAnnotation {
    let pick = |rng: &mut ChaCha8Rng, a: &str, b: &str| -> String {
        if rng.gen_bool(0.5) {
            a.into()
        } else {
            b.into()
        }
    };
    let (current, future, reasoning) = match class {
        ManeuverClass::Straight => (
            pick(rng, "The car is driving forward along the lane.",
                "The car keeps driving forward along its lane."),
            pick(rng, "The car will continue straight ahead.",
                "The car should continue straight ahead at speed."),
            pick(rng, "The road ahead is clear so the car maintains its speed.",
                "Traffic ahead is clear so the car maintains its current speed."),
        ),
        ManeuverClass::TurnLeft => (
            pick(rng, "The car is slowing down and turning left at the intersection.",
                "The car slows down while turning left at the intersection."),
            pick(rng, "The car will finish the left turn onto the cross street.",
                "The car should finish the left turn onto the cross street."),
            pick(rng, "The planned route turns left here and the intersection is clear.",
                "The route turns left at this intersection and the way is clear."),
        ),
        ManeuverClass::TurnRight => (
            pick(rng, "The car is slowing down and turning right at the intersection.",
                "The car slows down while turning right at the intersection."),
            pick(rng, "The car will finish the right turn onto the cross street.",
                "The car should finish the right turn onto the cross street."),
            pick(rng, "The planned route turns right here and the intersection is clear.",
                "The route turns right at this intersection and the way is clear."),
        ),
        ManeuverClass::Stop => (
            pick(rng, "The car is braking and coming to a stop.",
                "The car brakes smoothly and comes to a stop."),
            pick(rng, "The car will hold its stop until the way is clear.",
                "The car should remain stopped until the way is clear."),
            pick(rng, "A red light ahead requires the car to stop.",
                "The light ahead is red so the car must stop."),
        ),
        ManeuverClass::LaneChangeLeft => (
            pick(rng, "The car is merging into the left lane.",
                "The car moves over into the left lane."),
            pick(rng, "The car will settle into the left lane and continue.",
                "The car should settle into the left lane and continue."),
            pick(rng, "A slower vehicle ahead prompts a pass on the left.",
                "The car passes a slower vehicle by using the left lane."),
        ),
        ManeuverClass::LaneChangeRight => (
            pick(rng, "The car is merging into the right lane.",
                "The car moves over into the right lane."),
            pick(rng, "The car will settle into the right lane and continue.",
                "The car should settle into the right lane and continue."),
            pick(rng, "The upcoming exit prompts a move to the right lane.",
                "The car moves to the right lane ahead of its exit."),
        ),
    };
    FreeformAnnotation {
        current_action: current,
        future_action: future,
        reasoning,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub sample_id: String,
    pub class: ManeuverClass,
    pub speed: f64,
    pub descriptor: Vec<f64>,
    pub gt_trajectory: Vec<[f64; 2]>,
    pub freeform: FreeformAnnotation,
    pub actions: StructuredActionAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_scenes: usize,
    pub seed: u64,
    /// Descriptor length; the first six dims carry the mixed class signal.
    pub descriptor_dim: usize,
    /// Noise added to every descriptor dimension.
    pub descriptor_noise: f64,
    /// Noise added to each ground-truth waypoint coordinate.
    pub trajectory_noise: f64,
    /// Class proportions in [`ALL_CLASSES`] order; must sum to 1.
    pub class_weights: [f64; NUM_CLASSES],
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_scenes: 512,
            seed: 0,
            descriptor_dim: 16,
            descriptor_noise: 0.5,
            trajectory_noise: 0.1,
            class_weights: [0.62, 0.07, 0.07, 0.10, 0.07, 0.07],
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scenes == 0 {
            return Err(Error::Config("num_scenes must be positive".into()));
        }
        if self.descriptor_dim < NUM_CLASSES + 1 {
            return Err(Error::Config(format!(
                "descriptor_dim must be at least {}",
                NUM_CLASSES + 1
            )));
        }
        if self.class_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("class weights must be nonnegative".into()));
        }
        let s: f64 = self.class_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class weights must sum to 1, got {s}")));
        }
        Ok(())
    }
}

/// Fixed 6 x 6 mixing matrix applied to the class one-hot before noise.
/// Constant across runs so descriptors from different datasets agree.
fn mixing_matrix() -> [[f64; NUM_CLASSES]; NUM_CLASSES] {
    let mut rng = ChaCha8Rng::seed_from_u64(0x00dd_ba11);
    let mut m = [[0.0; NUM_CLASSES]; NUM_CLASSES];
    for row in &mut m {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    m
}

/// Exact largest-remainder apportionment of `n` scenes to the class weights.
fn apportion(n: usize, weights: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let mut counts = [0usize; NUM_CLASSES];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(NUM_CLASSES);
    let mut assigned = 0;
    for (i, &w) in weights.iter().enumerate() {
        let exact = w * n as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((i, exact - exact.floor()));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for (i, _) in remainders.iter().take(n - assigned) {
        counts[*i] += 1;
    }
    counts
}

fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let th = 2.0 * std::f64::consts::PI * u2;
    (r * th.cos(), r * th.sin())
}

fn gaussian_one(rng: &mut ChaCha8Rng) -> f64 {
    gaussian_pair(rng).0
}

/// Generate a dataset. Class counts follow the weights exactly; everything
/// else is drawn from per-scene seeds split off the dataset seed, so the
/// output is independent of iteration order and thread count.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<SyntheticScene>> {
    cfg.validate()?;
    let counts = apportion(cfg.num_scenes, &cfg.class_weights);
    let mut classes: Vec<ManeuverClass> = Vec::with_capacity(cfg.num_scenes);
    for (i, &c) in counts.iter().enumerate() {
        classes.extend(std::iter::repeat(ALL_CLASSES[i]).take(c));
    }
    // deterministic shuffle so classes interleave across batches
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, u64::MAX));
    for i in (1..classes.len()).rev() {
        let j = rng.gen_range(0..=i);
        classes.swap(i, j);
    }
    let mix = mixing_matrix();
    let scenes = par::map_indexed(cfg.num_scenes, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, i as u64));
        let class = classes[i];
        let (lo, hi) = speed_range(class);
        let speed = rng.gen_range(lo..hi);
        let turn_radius = rng.gen_range(10.0..14.0);
        let mut gt = maneuver_curve(class, speed, turn_radius);
        for p in &mut gt {
            let (nx, ny) = gaussian_pair(&mut rng);
            p[0] += nx * cfg.trajectory_noise;
            p[1] += ny * cfg.trajectory_noise;
        }
        let mut descriptor = Vec::with_capacity(cfg.descriptor_dim);
        for r in 0..NUM_CLASSES {
            descriptor.push(mix[r][class.index()] + gaussian_one(&mut rng) * cfg.descriptor_noise);
        }
        descriptor.push(speed / 10.0);
        while descriptor.len() < cfg.descriptor_dim {
            descriptor.push(gaussian_one(&mut rng));
        }
        SyntheticScene {
            sample_id: format!("scene{i:06}"),
            class,
            speed,
            descriptor,
            gt_trajectory: gt,
            freeform: freeform_for(class, &mut rng),
            actions: class.actions(),
        }
    });
    Ok(scenes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub descriptor_dim: usize,
    pub encoder_hidden: usize,
    /// Number of ego tokens L.
    pub ego_tokens: usize,
    /// Token width D, shared with the auxiliary heads.
    pub model_dim: usize,
    pub planning_hidden: usize,
    pub horizon: usize,
    /// Targets are scaled by this factor inside the regression loss so the
    /// output layer works near unit magnitude.
    pub output_scale: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            descriptor_dim: 16,
            encoder_hidden: 64,
            ego_tokens: 2,
            model_dim: 32,
            planning_hidden: 32,
            horizon: HORIZON_STEPS,
            output_scale: 0.1,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.descriptor_dim,
            self.encoder_hidden,
            self.ego_tokens,
            self.model_dim,
            self.planning_hidden,
            self.horizon,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("planner dimensions must be positive".into()));
        }
        if self.output_scale <= 0.0 {
            return Err(Error::Config("output_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Planner parameters: a descriptor encoder producing the ego tokens and a
/// planning head on the pooled token.
pub fn init_planner(cfg: &PlannerConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let token_dim = cfg.ego_tokens * cfg.model_dim;
    store.add("enc.w0", cfg.descriptor_dim, cfg.encoder_hidden,
        fan_in_uniform(&mut rng, cfg.descriptor_dim, cfg.encoder_hidden));
    store.add("enc.b0", 1, cfg.encoder_hidden, vec![0.0; cfg.encoder_hidden]);
    store.add("enc.w1", cfg.encoder_hidden, token_dim,
        fan_in_uniform(&mut rng, cfg.encoder_hidden, token_dim));
    store.add("enc.b1", 1, token_dim, vec![0.0; token_dim]);
    store.add("plan.w0", cfg.model_dim, cfg.planning_hidden,
        fan_in_uniform(&mut rng, cfg.model_dim, cfg.planning_hidden));
    store.add("plan.b0", 1, cfg.planning_hidden, vec![0.0; cfg.planning_hidden]);
    store.add("plan.w1", cfg.planning_hidden, 2 * cfg.horizon,
        fan_in_uniform(&mut rng, cfg.planning_hidden, 2 * cfg.horizon));
    store.add("plan.b1", 1, 2 * cfg.horizon, vec![0.0; 2 * cfg.horizon]);
    Ok(store)
}

/// Forward pass: descriptor -> ego tokens (L x D) and scaled waypoint
/// predictions (horizon x 2, in output_scale units).
pub fn planner_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &PlannerConfig,
    descriptor: Var,
) -> (Var, Var) {
    let h = tape.matmul(descriptor, bound.var("enc.w0"));
    let h = tape.add_row(h, bound.var("enc.b0"));
    let h = tape.softplus(h);
    let z = tape.matmul(h, bound.var("enc.w1"));
    let z = tape.add_row(z, bound.var("enc.b1"));
    let ego = tape.reshape(z, cfg.ego_tokens, cfg.model_dim);
    let pool = tape.mean_rows(ego);
    let p = tape.matmul(pool, bound.var("plan.w0"));
    let p = tape.add_row(p, bound.var("plan.b0"));
    let p = tape.softplus(p);
    let o = tape.matmul(p, bound.var("plan.w1"));
    let o = tape.add_row(o, bound.var("plan.b1"));
    let pred = tape.reshape(o, cfg.horizon, 2);
    (ego, pred)
}

/// Mean squared waypoint error in meters. The network output lives in
/// output_scale units and is unscaled here, so this loss keeps its natural
/// magnitude relative to the auxiliary terms.
fn planning_loss(tape: &mut Tape, pred_scaled: Var, gt: &[[f64; 2]], scale: f64) -> Var {
    let flat: Vec<f64> = gt.iter().flat_map(|p| [p[0], p[1]]).collect();
    let n = flat.len();
    let pred = tape.scale(pred_scaled, 1.0 / scale);
    let target = tape.leaf(gt.len(), 2, flat);
    let d = tape.sub(pred, target);
    let sq = tape.mul(d, d);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / n as f64)
}

/// Predicted waypoints in meters for one descriptor.
pub fn predict(store: &ParameterStore, cfg: &PlannerConfig, descriptor: &[f64]) -> Vec<[f64; 2]> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, store);
    let d = tape.leaf(1, descriptor.len(), descriptor.to_vec());
    let (_, pred) = planner_forward(&mut tape, &bound, cfg, d);
    let v = tape.value(pred);
    (0..cfg.horizon)
        .map(|k| [v[2 * k] / cfg.output_scale, v[2 * k + 1] / cfg.output_scale])
        .collect()
}

/// Open-loop L2 of the planner on a scene set.
pub fn evaluate(store: &ParameterStore, cfg: &PlannerConfig, scenes: &[SyntheticScene]) -> Result<L2Metrics> {
    if scenes.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty scene set".into()));
    }
    let preds = par::map_slice(scenes, |s| predict(store, cfg, &s.descriptor));
    let gts: Vec<Vec<[f64; 2]>> = scenes.iter().map(|s| s.gt_trajectory.clone()).collect();
    l2_displacement(&preds, &gts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub planner: PlannerConfig,
    pub heads: AuxiliaryHeadConfig,
    pub loss: LossConfig,
    pub aux_enabled: bool,
    /// Detach the ego feature before the auxiliary heads; auxiliary
    /// gradients then stop at the heads instead of shaping the encoder.
    pub stop_ego_gradient: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Text feature dimension C fed to the alignment loss.
    pub text_dim: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let planner = PlannerConfig::default();
        let mut heads = AuxiliaryHeadConfig::new(planner.model_dim, 16);
        heads.num_heads = 4;
        heads.num_layers = 2;
        heads.mlp_hidden_dims = vec![32];
        Self {
            planner,
            heads,
            loss: LossConfig::default(),
            aux_enabled: true,
            stop_ego_gradient: false,
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.005,
            seed: 0,
            text_dim: 16,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.heads.validate()?;
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.heads.model_dim != self.planner.model_dim {
            return Err(Error::Config("head model_dim must match the planner".into()));
        }
        if self.heads.text_out_dim != self.text_dim {
            return Err(Error::Config("head text_out_dim must match text_dim".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub planning_loss: f64,
    pub align_loss: f64,
    pub action_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub aux_enabled: bool,
    pub alignment_variant: AlignmentVariant,
    pub epochs: Vec<EpochStats>,
    pub final_planning_loss: f64,
    pub val_l2: L2Metrics,
    pub wall_clock_secs: f64,
}

pub struct TrainOutcome {
    pub planner: ParameterStore,
    pub heads: ParameterStore,
    pub report: TrainingReport,
}

struct Supervision {
    text: TextFeatureTriple,
    actions: ActionLabelTriple,
}

fn precompute_supervision(scenes: &[SyntheticScene], text_dim: usize) -> Result<Vec<Supervision>> {
    let encoder = BagOfWordsHashEncoder::new(text_dim);
    let vocab = ActionVocabulary::default();
    let results = par::map_slice(scenes, |s| -> Result<Supervision> {
        Ok(Supervision {
            text: encode_freeform(&s.freeform, &encoder)?,
            actions: encode_actions(&s.actions, &vocab)?,
        })
    });
    results.into_iter().collect()
}

struct SampleResult {
    planner_grads: Vec<Vec<f64>>,
    head_grads: Option<Vec<Vec<f64>>>,
    planning_loss: f64,
    align_loss: f64,
    action_loss: f64,
}

fn per_sample_pass(
    scene: &SyntheticScene,
    sup: &Supervision,
    planner: &ParameterStore,
    heads: &ParameterStore,
    cfg: &TrainingConfig,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let pb = BoundParams::bind(&mut tape, planner);
    let d = tape.leaf(1, scene.descriptor.len(), scene.descriptor.to_vec());
    let (ego, pred) = planner_forward(&mut tape, &pb, &cfg.planner, d);
    let plan = planning_loss(&mut tape, pred, &scene.gt_trajectory, cfg.planner.output_scale);
    let (root, align_v, action_v, hb) = if cfg.aux_enabled {
        let hb = BoundParams::bind(&mut tape, heads);
        let head_ego = if cfg.stop_ego_gradient {
            let v = tape.value(ego).to_vec();
            let (r, c) = tape.shape(ego);
            tape.leaf(r, c, v)
        } else {
            ego
        };
        let f1 = alignment_head_forward(&mut tape, &hb, head_ego, &cfg.heads)?;
        let act = action_head_forward(&mut tape, &hb, head_ego, &cfg.heads)?;
        let align = alignment_variant_loss(&mut tape, &sup.text, &f1, cfg.loss.alignment_variant, &cfg.loss)?;
        let action = action_loss(&mut tape, &sup.actions, &act.probs)?;
        let aux = total_loss(&mut tape, &align, &action, &cfg.loss)?;
        let root = tape.add(plan, aux.total);
        (root, aux.breakdown.l_align, aux.breakdown.l_action, Some(hb))
    } else {
        (plan, 0.0, 0.0, None)
    };
    let total_v = tape.scalar_value(root);
    if !total_v.is_finite() {
        return Err(Error::Training {
            step: 0,
            message: format!("non-finite loss on sample {}", scene.sample_id),
        });
    }
    tape.backward(root);
    Ok(SampleResult {
        planner_grads: pb.collect_grads(&tape),
        head_grads: hb.map(|b| b.collect_grads(&tape)),
        planning_loss: tape.scalar_value(plan),
        align_loss: align_v,
        action_loss: action_v,
    })
}

/// One batch with the contrastive variant: a single tape so the batch-level
/// alignment term sees every sample's outputs.
fn contrastive_batch_pass(
    scenes: &[&SyntheticScene],
    sups: &[&Supervision],
    planner: &ParameterStore,
    heads: &ParameterStore,
    cfg: &TrainingConfig,
) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let pb = BoundParams::bind(&mut tape, planner);
    let hb = BoundParams::bind(&mut tape, heads);
    let mut plan_terms: Option<Var> = None;
    let mut action_terms: Option<Var> = None;
    let mut outputs = Vec::with_capacity(scenes.len());
    for (scene, sup) in scenes.iter().zip(sups) {
        let d = tape.leaf(1, scene.descriptor.len(), scene.descriptor.to_vec());
        let (ego, pred) = planner_forward(&mut tape, &pb, &cfg.planner, d);
        let plan = planning_loss(&mut tape, pred, &scene.gt_trajectory, cfg.planner.output_scale);
        plan_terms = Some(match plan_terms {
            Some(acc) => tape.add(acc, plan),
            None => plan,
        });
        let head_ego = if cfg.stop_ego_gradient {
            let v = tape.value(ego).to_vec();
            let (r, c) = tape.shape(ego);
            tape.leaf(r, c, v)
        } else {
            ego
        };
        let f1 = alignment_head_forward(&mut tape, &hb, head_ego, &cfg.heads)?;
        let act = action_head_forward(&mut tape, &hb, head_ego, &cfg.heads)?;
        let a = action_loss(&mut tape, &sup.actions, &act.probs)?;
        action_terms = Some(match action_terms {
            Some(acc) => tape.add(acc, a.total),
            None => a.total,
        });
        outputs.push(f1);
    }
    let b = scenes.len() as f64;
    let plan_mean = tape.scale(plan_terms.expect("nonempty batch"), 1.0 / b);
    let action_mean = tape.scale(action_terms.expect("nonempty batch"), 1.0 / b);
    let sup_owned: Vec<TextFeatureTriple> = sups.iter().map(|s| s.text.clone()).collect();
    let align = contrastive_alignment_loss(&mut tape, &sup_owned, &outputs)?;
    let wa = tape.scale(align, cfg.loss.lambda1);
    let wb = tape.scale(action_mean, cfg.loss.lambda2);
    let aux = tape.add(wa, wb);
    let root = tape.add(plan_mean, aux);
    if !tape.scalar_value(root).is_finite() {
        return Err(Error::Training {
            step: 0,
            message: "non-finite loss in contrastive batch".into(),
        });
    }
    tape.backward(root);
    Ok(SampleResult {
        planner_grads: pb.collect_grads(&tape),
        head_grads: Some(hb.collect_grads(&tape)),
        planning_loss: tape.scalar_value(plan_mean),
        align_loss: tape.scalar_value(align),
        action_loss: tape.scalar_value(action_mean),
    })
}

/// Train the toy planner, optionally with the auxiliary heads. Gradients
/// are computed per sample in parallel and reduced in batch index order, so
/// results do not depend on thread count.
pub fn train(
    train_scenes: &[SyntheticScene],
    val_scenes: &[SyntheticScene],
    cfg: &TrainingConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_scenes.is_empty() {
        return Err(Error::Validation("cannot train on an empty scene set".into()));
    }
    let start = std::time::Instant::now();
    let mut planner = init_planner(&cfg.planner, split_seed(cfg.seed, 1))?;
    let mut heads = init_parameters(&cfg.heads, split_seed(cfg.seed, 2))?;
    let supervision = precompute_supervision(train_scenes, cfg.text_dim)?;
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, 3));
    let contrastive = cfg.aux_enabled && cfg.loss.alignment_variant == AlignmentVariant::Contrastive;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let results: Vec<SampleResult> = if contrastive {
                let scenes: Vec<&SyntheticScene> = batch.iter().map(|&i| &train_scenes[i]).collect();
                let sups: Vec<&Supervision> = batch.iter().map(|&i| &supervision[i]).collect();
                vec![contrastive_batch_pass(&scenes, &sups, &planner, &heads, cfg)
                    .map_err(|e| at_step(e, step))?]
            } else {
                let per: Vec<Result<SampleResult>> = par::map_slice(batch, |&i| {
                    per_sample_pass(&train_scenes[i], &supervision[i], &planner, &heads, cfg)
                });
                per.into_iter()
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| at_step(e, step))?
            };
            let scale = 1.0 / results.len() as f64;
            planner.zero_grad();
            heads.zero_grad();
            let mut batch_losses = (0.0, 0.0, 0.0);
            for r in &results {
                planner.add_grads_from(&r.planner_grads);
                if let Some(hg) = &r.head_grads {
                    heads.add_grads_from(hg);
                }
                batch_losses.0 += r.planning_loss * scale;
                batch_losses.1 += r.align_loss * scale;
                batch_losses.2 += r.action_loss * scale;
            }
            planner.sgd_step(cfg.learning_rate * scale);
            if cfg.aux_enabled {
                heads.sgd_step(cfg.learning_rate * scale);
            }
            if !planner.max_grad_abs().is_finite() {
                return Err(Error::Training {
                    step,
                    message: "non-finite gradient".into(),
                });
            }
            sums.0 += batch_losses.0;
            sums.1 += batch_losses.1;
            sums.2 += batch_losses.2;
            batches += 1;
        }
        epochs.push(EpochStats {
            epoch,
            planning_loss: sums.0 / batches as f64,
            align_loss: sums.1 / batches as f64,
            action_loss: sums.2 / batches as f64,
        });
    }
    let val_l2 = evaluate(&planner, &cfg.planner, val_scenes)?;
    let report = TrainingReport {
        seed: cfg.seed,
        aux_enabled: cfg.aux_enabled,
        alignment_variant: cfg.loss.alignment_variant,
        final_planning_loss: epochs.last().map(|e| e.planning_loss).unwrap_or(f64::NAN),
        epochs,
        val_l2,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        planner,
        heads,
        report,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NamedParam {
    name: String,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Serializable planner weights plus the config that shaped them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerCheckpoint {
    pub config: PlannerConfig,
    pub seed: u64,
    params: Vec<NamedParam>,
}

impl PlannerCheckpoint {
    pub fn from_store(store: &ParameterStore, config: PlannerConfig, seed: u64) -> Self {
        let params = store
            .names()
            .map(|n| {
                let (rows, cols) = store.shape(n);
                NamedParam {
                    name: n.to_string(),
                    rows,
                    cols,
                    value: store.value(n).to_vec(),
                }
            })
            .collect();
        Self {
            config,
            seed,
            params,
        }
    }

    pub fn into_store(self) -> ParameterStore {
        let mut store = ParameterStore::new();
        for p in self.params {
            store.add(&p.name, p.rows, p.cols, p.value);
        }
        store
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Training { message, .. } => Error::Training { step, message },
        other => other,
    }
}
