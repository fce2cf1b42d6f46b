//! Stage 2: contact anchor prediction.
//!
//! A diffusion model over the 30 canonical hand joints predicts, per joint, a
//! contact position in the object's *canonical* frame plus a contact
//! probability.  Conditioning combines the prompt, the object point set, and
//! the stage-1 hand pose, with a prompt-derived [`HandIndicator`] masking the
//! unused hand both in the condition and in the training targets.
//! Ground-truth vectors come from nearest-point queries against the object
//! cloud; [`select_contacts`] thresholds the predicted probabilities and
//! [`stable_grasp_check`] validates the thumb-plus-finger grasp rule.

use crate::ad::nn::{EncoderLayer, Linear, Mode, ParamStore};
use crate::ad::{checkpoint, AdamW, Tape, Tensor, Var};
use crate::body::{self, Hand, HandJoints, HumanPose, NUM_HAND_JOINTS};
use crate::diffusion::{
    self, Denoiser, DiffusionSchedule, SampleConfig, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::geometry::{KdTree, PointCloud, RigidPose6};
use crate::prior::Vocabulary;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Values per contact record: a 3-vector position plus one probability.
pub const RECORD_DIM: usize = 4;

/// Flattened length of the contact diffusion state (30 records).
pub const CONTACT_DIM: usize = NUM_HAND_JOINTS * RECORD_DIM;

/// Length of the hand-pose condition: both hands' axis-angle blocks.
pub const HAND_POSE_DIM: usize = 90;

/// Default probability threshold for selecting active contacts.
pub const DEFAULT_TAU: f64 = 0.8;

/// Default world-distance threshold (meters) for a binary contact label.
pub const DEFAULT_D_CONTACT: f64 = 0.010;

/// One joint's contact record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactRecord {
    /// Contact position in the object's canonical frame (meters).
    pub position: [f64; 3],
    /// Contact probability in `[0, 1]`.
    pub probability: f64,
}

/// Per-joint contact anchors for all 30 canonical hand joints.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactVector {
    pub records: Vec<ContactRecord>,
}

impl ContactVector {
    /// Flat `[x, y, z, p]` layout, one record per joint in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(CONTACT_DIM);
        for r in &self.records {
            v.extend_from_slice(&r.position);
            v.push(r.probability);
        }
        v
    }

    /// Rebuilds from the flat layout, clamping probabilities to `[0, 1]`.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != CONTACT_DIM {
            return Err(Error::contract(format!(
                "contact vector must have {} values, found {}",
                CONTACT_DIM,
                v.len()
            )));
        }
        let records = v
            .chunks_exact(RECORD_DIM)
            .map(|c| ContactRecord {
                position: [c[0], c[1], c[2]],
                probability: c[3].clamp(0.0, 1.0),
            })
            .collect();
        Ok(ContactVector { records })
    }
}

/// Which hand(s) a prompt asks the model to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HandIndicator {
    pub left: bool,
    pub right: bool,
}

impl HandIndicator {
    pub fn both() -> Self {
        HandIndicator { left: true, right: true }
    }

    pub fn uses(&self, hand: Hand) -> bool {
        match hand {
            Hand::Left => self.left,
            Hand::Right => self.right,
        }
    }
}

/// Reads the hand indicator from a prompt.
///
/// Scans lowercase whitespace tokens; precedence is both > left > right when
/// several words appear.  A prompt naming no hand is an annotation error.
pub fn hand_indicator(prompt: &str) -> Result<HandIndicator> {
    if prompt.trim().is_empty() {
        return Err(Error::contract("empty prompt"));
    }
    let mut left = false;
    let mut right = false;
    let mut both = false;
    for word in prompt.split_whitespace() {
        match word.to_lowercase().as_str() {
            "both" => both = true,
            "left" => left = true,
            "right" => right = true,
            _ => {}
        }
    }
    if both {
        Ok(HandIndicator::both())
    } else if left {
        Ok(HandIndicator { left: true, right: false })
    } else if right {
        Ok(HandIndicator { left: false, right: true })
    } else {
        Err(Error::annotation(format!(
            "prompt \"{}\" names no hand (expected \"left\", \"right\", or \"both\")",
            prompt
        )))
    }
}

/// The 90 hand-pose values with the masked hand's 45 zeroed.
///
/// Layout: left-hand axis-angle block then right-hand block, exactly as they
/// appear in [`HumanPose`].
pub fn masked_hand_values(pose: &HumanPose, indicator: HandIndicator) -> Vec<f64> {
    let mut v = Vec::with_capacity(HAND_POSE_DIM);
    v.extend_from_slice(pose.left_hand_pose());
    v.extend_from_slice(pose.right_hand_pose());
    if !indicator.left {
        for x in &mut v[..45] {
            *x = 0.0;
        }
    }
    if !indicator.right {
        for x in &mut v[45..] {
            *x = 0.0;
        }
    }
    v
}

/// Forces the masked hand's probabilities to zero in a flat contact target.
pub fn apply_indicator_targets(y0: &mut [f64], indicator: HandIndicator) {
    assert_eq!(y0.len(), CONTACT_DIM, "contact target length");
    for hand in [Hand::Left, Hand::Right] {
        if !indicator.uses(hand) {
            for i in body::hand_range(hand) {
                y0[i * RECORD_DIM + 3] = 0.0;
            }
        }
    }
}

/// Ground-truth contact extraction result.
#[derive(Debug, Clone)]
pub struct ContactTruth {
    pub vector: ContactVector,
    /// Index into the object cloud of each joint's nearest point.
    pub nearest: Vec<usize>,
}

/// Extracts ground-truth contact anchors for a posed hand against an object.
///
/// `object_cloud` lives in the object's canonical frame and `object_pose`
/// places it in the world.  Each joint is mapped into the canonical frame by
/// the inverse pose before the nearest-neighbour query; a rigid map preserves
/// distances, so the canonical-frame distance *is* the world distance and the
/// label is 1 exactly when it is below `d_contact`.  Positions are stored for
/// every joint, contacting or not.
pub fn extract_contact_truth(
    joints: &HandJoints,
    object_cloud: &PointCloud,
    object_pose: &RigidPose6,
    d_contact: f64,
) -> Result<ContactTruth> {
    if object_cloud.points.is_empty() {
        return Err(Error::contract("object cloud is empty"));
    }
    if d_contact <= 0.0 {
        return Err(Error::contract(format!(
            "d_contact must be positive, found {}",
            d_contact
        )));
    }
    let inv = object_pose.inverse();
    let tree = KdTree::build(&object_cloud.points);
    let mut records = Vec::with_capacity(NUM_HAND_JOINTS);
    let mut nearest = Vec::with_capacity(NUM_HAND_JOINTS);
    for &p in &joints.positions {
        let q = inv.apply(p);
        let (idx, dist) = tree.nearest(q);
        records.push(ContactRecord {
            position: object_cloud.points[idx],
            probability: if dist < d_contact { 1.0 } else { 0.0 },
        });
        nearest.push(idx);
    }
    Ok(ContactTruth {
        vector: ContactVector { records },
        nearest,
    })
}

/// Active contacts chosen by thresholding predicted probabilities.
#[derive(Debug, Clone)]
pub struct ContactSelection {
    /// Canonical joint indices with probability >= tau, ascending.
    pub indices: Vec<usize>,
    /// Their contact positions (canonical frame), in the same order.
    pub points: Vec<[f64; 3]>,
    /// Set when no joint cleared the threshold; downstream guidance then
    /// degenerates gracefully instead of failing.
    pub empty: bool,
}

/// Thresholds a contact vector at `tau`.
///
/// `tau = 0` is allowed as an edge case and selects every joint.
pub fn select_contacts(y: &ContactVector, tau: f64) -> Result<ContactSelection> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::contract(format!(
            "threshold tau must lie in [0, 1], found {}",
            tau
        )));
    }
    let mut indices = Vec::new();
    let mut points = Vec::new();
    for (i, r) in y.records.iter().enumerate() {
        if r.probability >= tau {
            indices.push(i);
            points.push(r.position);
        }
    }
    let empty = indices.is_empty();
    Ok(ContactSelection { indices, points, empty })
}

/// Whether an active set forms a stable grasp: some hand contributes a thumb
/// joint *and* a non-thumb joint.
pub fn stable_grasp_check(active: &[usize]) -> Result<bool> {
    for &i in active {
        if i >= NUM_HAND_JOINTS {
            return Err(Error::contract(format!(
                "joint index {} out of range [0, {})",
                i, NUM_HAND_JOINTS
            )));
        }
    }
    for hand in [Hand::Left, Hand::Right] {
        let range = body::hand_range(hand);
        let thumb = active
            .iter()
            .any(|&i| range.contains(&i) && body::is_thumb(i));
        let finger = active
            .iter()
            .any(|&i| range.contains(&i) && !body::is_thumb(i));
        if thumb && finger {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Contact-net configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContactConfig {
    /// Transformer width.
    pub width: usize,
    /// Encoder layers.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ff_dim: usize,
    /// Object points kept by the set encoder.
    pub n_points: usize,
    /// Diffusion steps T₂.
    pub t_count: usize,
    /// Noise schedule.
    pub schedule: ScheduleKind,
    /// Classifier-free guidance scale at sampling; the contact net is fully
    /// conditioned, so the default is 0 (no unconditional branch).
    pub cfg_scale: f64,
    /// Probability of dropping the condition during training.
    pub p_uncond: f64,
    /// World-distance threshold for ground-truth contact labels.
    pub d_contact: f64,
    /// Probability threshold for `select_contacts`.
    pub tau: f64,
    /// Position-loss weight for non-contacting joints (contacting joints
    /// weigh 1); stabilizes training without letting unused anchors dominate.
    pub off_position_weight: f64,
    /// Dropout rate inside encoder layers.
    pub dropout: f64,
}

impl Default for ContactConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ContactConfig {
            width: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            n_points: 32,
            t_count: 100,
            schedule: ScheduleKind::Cosine,
            cfg_scale: 0.0,
            p_uncond: 0.0,
            d_contact: DEFAULT_D_CONTACT,
            tau: DEFAULT_TAU,
            off_position_weight: 0.1,
            dropout: 0.0,
        }
    }
}

impl ContactConfig {
    /// Paper-scale hyper-parameters (T₂ = 500, width 512).
    pub fn paper() -> Self {
        ContactConfig {
            width: 512,
            layers: 4,
            heads: 4,
            ff_dim: 1024,
            n_points: 256,
            t_count: 500,
            ..ContactConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::config("contact net needs at least one layer"));
        }
        if self.n_points == 0 {
            return Err(Error::config("n_points must be positive"));
        }
        if self.t_count < 2 {
            return Err(Error::config("diffusion needs at least 2 steps"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::config("p_uncond must lie in [0, 1]"));
        }
        if self.d_contact <= 0.0 {
            return Err(Error::config("d_contact must be positive"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::config("tau must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.off_position_weight) {
            return Err(Error::config("off_position_weight must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Raw (string/geometry-level) condition for one sample.
#[derive(Debug, Clone)]
pub struct RawContactCondition {
    pub token_ids: Vec<usize>,
    pub centered_points: Vec<[f64; 3]>,
    /// The 90 hand-pose values, already masked per the indicator.
    pub hand_values: Vec<f64>,
    pub indicator: HandIndicator,
}

/// Numeric condition bundle consumed by the sampler.
#[derive(Debug, Clone)]
pub struct ContactCondition {
    pub text_embedding: Vec<f64>,
    /// `n_points x width` per-point object features.
    pub object_features: Vec<Vec<f64>>,
    /// Width-d feature from the hand encoder over the masked 90 values.
    pub hand_features: Vec<f64>,
    pub indicator: HandIndicator,
}

struct ContactParams {
    text_embed: crate::ad::ParamId,
    text_proj: Linear,
    text_null: crate::ad::ParamId,
    obj_null: crate::ad::ParamId,
    hand_null: crate::ad::ParamId,
    set_l1: Linear,
    set_l2: Linear,
    hand_l1: Linear,
    hand_l2: Linear,
    step_proj: Linear,
    c_in: Linear,
    c_pos: crate::ad::ParamId,
    c_out: Linear,
    layers: Vec<EncoderLayer>,
}

/// The contact-prediction diffusion model.
pub struct ContactModel {
    pub config: ContactConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    params: ContactParams,
}

impl ContactModel {
    /// Initializes a fresh model; identical seeds give bitwise-identical
    /// parameters.
    pub fn new(config: ContactConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::rng_from_seed(seed);
        let d = config.width;
        let r = &mut rng;

        let text_embed = store.add(
            "text.embed",
            crate::ad::nn::small_normal(r, vocab.len() + 1, d),
        );
        let text_proj = Linear::new(&mut store, "text.proj", r, d, d);
        let text_null = store.add("text.null", crate::ad::nn::small_normal(r, 1, d));
        let obj_null = store.add("obj.null", crate::ad::nn::small_normal(r, 1, d));
        let hand_null = store.add("hand.null", crate::ad::nn::small_normal(r, 1, d));
        let set_l1 = Linear::new(&mut store, "set.l1", r, 3, d);
        let set_l2 = Linear::new(&mut store, "set.l2", r, d, d);
        let hand_l1 = Linear::new(&mut store, "hand.l1", r, HAND_POSE_DIM, d);
        let hand_l2 = Linear::new(&mut store, "hand.l2", r, d, d);
        let step_proj = Linear::new(&mut store, "step.proj", r, d, d);
        let c_in = Linear::new(&mut store, "c.in", r, RECORD_DIM, d);
        // Learned per-joint embedding: at high noise the 30 record tokens are
        // statistically identical, so without it the (permutation-equivariant)
        // encoder could not make joint-specific predictions.
        let c_pos = store.add(
            "c.pos",
            crate::ad::nn::small_normal(r, NUM_HAND_JOINTS, d),
        );
        let c_out = Linear::new(&mut store, "c.out", r, d, RECORD_DIM);
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            layers.push(EncoderLayer::new(
                &mut store,
                &format!("c.layer{}", i),
                r,
                d,
                config.heads,
                config.ff_dim,
                config.dropout,
            ));
        }

        Ok(ContactModel {
            config,
            vocab,
            store,
            params: ContactParams {
                text_embed,
                text_proj,
                text_null,
                obj_null,
                hand_null,
                set_l1,
                set_l2,
                hand_l1,
                hand_l2,
                step_proj,
                c_in,
                c_pos,
                c_out,
                layers,
            },
        })
    }

    /// Lowercase whitespace tokenization into vocabulary ids.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = prompt
            .split_whitespace()
            .map(|w| self.vocab.lookup(&w.to_lowercase()))
            .collect();
        if ids.is_empty() {
            return Err(Error::contract("empty prompt"));
        }
        Ok(ids)
    }

    /// Farthest-point subsample to `n_points`, centered at the centroid.
    pub fn subsample_centered(&self, cloud: &PointCloud) -> Result<Vec<[f64; 3]>> {
        let n = self.config.n_points;
        if cloud.points.len() < n {
            return Err(Error::contract(format!(
                "object cloud has {} points; the set encoder needs at least {}",
                cloud.points.len(),
                n
            )));
        }
        let picks = crate::geometry::farthest_point_sample(&cloud.points, n)?;
        let centroid = cloud.centroid();
        Ok(picks
            .iter()
            .map(|&i| crate::geometry::sub3(cloud.points[i], centroid))
            .collect())
    }

    /// Builds the raw condition from prompt, object cloud, and hand pose.
    /// The indicator is read from the prompt and masks the hand values.
    pub fn raw_condition(
        &self,
        prompt: &str,
        cloud: &PointCloud,
        pose: &HumanPose,
    ) -> Result<RawContactCondition> {
        let indicator = hand_indicator(prompt)?;
        Ok(RawContactCondition {
            token_ids: self.tokenize(prompt)?,
            centered_points: self.subsample_centered(cloud)?,
            hand_values: masked_hand_values(pose, indicator),
            indicator,
        })
    }

    /// Encodes a raw condition into the numeric bundle (direct path).
    pub fn encode_condition(&self, raw: &RawContactCondition) -> ContactCondition {
        let text_embedding = crate::encode::mean_embed_project(
            &self.store,
            self.params.text_embed,
            &self.params.text_proj,
            &raw.token_ids,
        );
        let (object_features, _) = crate::encode::point_mlp(
            &self.store,
            &self.params.set_l1,
            &self.params.set_l2,
            &raw.centered_points,
        );
        let hand_features = crate::encode::mlp2_row(
            &self.store,
            &self.params.hand_l1,
            &self.params.hand_l2,
            &raw.hand_values,
        );
        ContactCondition {
            text_embedding,
            object_features,
            hand_features,
            indicator: raw.indicator,
        }
    }

    /// Convenience: raw condition + encoding in one call.
    pub fn prepare_condition(
        &self,
        prompt: &str,
        cloud: &PointCloud,
        pose: &HumanPose,
    ) -> Result<ContactCondition> {
        Ok(self.encode_condition(&self.raw_condition(prompt, cloud, pose)?))
    }

    // Condition rows as tape constants (inference) or null parameters.
    fn condition_vars(
        &self,
        tape: &mut Tape,
        bound: &crate::ad::nn::Bound,
        cond: Option<&ContactCondition>,
    ) -> (Var, Var, Var) {
        match cond {
            Some(c) => {
                let d = self.config.width;
                let text = tape.constant(
                    Tensor::matrix(1, d, c.text_embedding.clone()).expect("text row"),
                );
                let n = c.object_features.len();
                let flat: Vec<f64> = c.object_features.iter().flatten().copied().collect();
                let obj = tape.constant(Tensor::matrix(n, d, flat).expect("object features"));
                let hand = tape.constant(
                    Tensor::matrix(1, d, c.hand_features.clone()).expect("hand row"),
                );
                (text, obj, hand)
            }
            None => (
                bound.var(self.params.text_null),
                bound.var(self.params.obj_null),
                bound.var(self.params.hand_null),
            ),
        }
    }

    /// Core forward pass: 30 contact tokens plus condition tokens through the
    /// encoder stack; probabilities squashed by a sigmoid at the output head.
    fn forward_contacts(
        &self,
        tape: &mut Tape,
        bound: &crate::ad::nn::Bound,
        y: Var,
        t: usize,
        text: Var,
        obj: Var,
        hand: Var,
        mode: &mut Mode,
    ) -> Var {
        let d = self.config.width;
        let temb = tape.constant(Tensor::matrix(
            1,
            d,
            crate::ad::nn::sinusoidal_embedding(t as f64, d),
        ).expect("step embedding"));
        let t_tok = self.params.step_proj.forward(tape, bound, temb);
        let proj = self.params.c_in.forward(tape, bound, y);
        let tokens = tape.add(proj, bound.var(self.params.c_pos));
        let mut seq = tape.concat_rows(&[tokens, t_tok, text, hand, obj]);
        for layer in &self.params.layers {
            seq = layer.forward(tape, bound, seq, mode);
        }
        let contact_rows = tape.slice_rows(seq, 0, NUM_HAND_JOINTS);
        let out = self.params.c_out.forward(tape, bound, contact_rows);
        let pos = tape.slice_cols(out, 0, 3);
        let logit = tape.slice_cols(out, 3, 1);
        let prob = tape.sigmoid(logit);
        tape.concat_cols(&[pos, prob])
    }

    /// Predicts the clean contact vector from a noisy one (evaluation path).
    pub fn denoise_contact(
        &self,
        y_t: &[f64],
        t: usize,
        cond: Option<&ContactCondition>,
    ) -> Result<Vec<f64>> {
        if y_t.len() != CONTACT_DIM {
            return Err(Error::contract(format!(
                "contact state must have {} values, found {}",
                CONTACT_DIM,
                y_t.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let y = tape.constant(
            Tensor::matrix(NUM_HAND_JOINTS, RECORD_DIM, y_t.to_vec()).expect("contact state"),
        );
        let (text, obj, hand) = self.condition_vars(&mut tape, &bound, cond);
        let mut mode = Mode::Eval;
        let out = self.forward_contacts(&mut tape, &bound, y, t, text, obj, hand, &mut mode);
        Ok(tape.value(out).data.clone())
    }

    /// The diffusion schedule implied by the config.
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        diffusion::make_schedule(self.config.t_count, self.config.schedule)
    }

    /// Draws one contact vector via the reverse process.
    pub fn sample_contacts(
        &self,
        cond: &ContactCondition,
        rng: &mut ChaCha8Rng,
        observer: Option<&mut dyn FnMut(usize, &[f64])>,
    ) -> Result<ContactVector> {
        let sched = self.schedule()?;
        let config = SampleConfig {
            cfg_scale: self.config.cfg_scale,
            use_tilde_variance: false,
        };
        let raw = diffusion::sample(
            self,
            Some(cond),
            CONTACT_DIM,
            &sched,
            None,
            &config,
            rng,
            observer,
        )?;
        ContactVector::from_flat(&raw)
    }

    // Per-element loss weights from the *target* probabilities: positions of
    // non-contacting joints weigh `off_position_weight`, everything else 1.
    fn loss_weights(&self, y0: &[f64]) -> Vec<f64> {
        let mut w = vec![1.0; CONTACT_DIM];
        for j in 0..NUM_HAND_JOINTS {
            if y0[j * RECORD_DIM + 3] < 0.5 {
                for k in 0..3 {
                    w[j * RECORD_DIM + k] = self.config.off_position_weight;
                }
            }
        }
        w
    }

    /// One optimizer step over a batch: per-example tapes, accumulated
    /// gradients, averaged weighted loss returned.  Targets are re-masked
    /// per each example's indicator, so a masked hand always trains toward
    /// probability zero.
    pub fn training_step(
        &mut self,
        opt: &mut AdamW,
        batch: &[ContactExample],
        sched: &DiffusionSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let mut acc = self.store.zero_grads();
        let mut total = 0.0;
        for ex in batch {
            if ex.y0.len() != CONTACT_DIM {
                return Err(Error::contract(format!(
                    "training target must have {} values, found {}",
                    CONTACT_DIM,
                    ex.y0.len()
                )));
            }
            let mut y0 = ex.y0.clone();
            apply_indicator_targets(&mut y0, ex.raw.indicator);
            let t = diffusion::uniform_step(rng, sched.t_count);
            let noise = diffusion::standard_normal_vec(rng, CONTACT_DIM);
            let y_t = diffusion::q_sample(&y0, t, &noise, sched)?;
            let drop = rng.random_range(0.0..1.0) < self.config.p_uncond;

            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let y = tape.constant(
                Tensor::matrix(NUM_HAND_JOINTS, RECORD_DIM, y_t).expect("contact state"),
            );
            let (text, obj, hand) = if drop {
                (
                    bound.var(self.params.text_null),
                    bound.var(self.params.obj_null),
                    bound.var(self.params.hand_null),
                )
            } else {
                let text = crate::encode::mean_embed_project_var(
                    &mut tape,
                    &bound,
                    self.params.text_embed,
                    &self.params.text_proj,
                    &ex.raw.token_ids,
                );
                let obj = crate::encode::point_mlp_var(
                    &mut tape,
                    &bound,
                    &self.params.set_l1,
                    &self.params.set_l2,
                    &ex.raw.centered_points,
                );
                let hand = crate::encode::mlp2_row_var(
                    &mut tape,
                    &bound,
                    &self.params.hand_l1,
                    &self.params.hand_l2,
                    &ex.raw.hand_values,
                );
                (text, obj, hand)
            };
            let mut mode = Mode::Train(rng);
            let out = self.forward_contacts(&mut tape, &bound, y, t, text, obj, hand, &mut mode);
            let target = tape.constant(
                Tensor::matrix(NUM_HAND_JOINTS, RECORD_DIM, y0.clone()).expect("target"),
            );
            let weights = tape.constant(
                Tensor::matrix(NUM_HAND_JOINTS, RECORD_DIM, self.loss_weights(&y0))
                    .expect("weights"),
            );
            let diff = tape.sub(out, target);
            let sq = tape.mul(diff, diff);
            let weighted = tape.mul(sq, weights);
            let loss = tape.mean(weighted);
            let grads = tape.backward(loss)?;
            tape.accumulate_param_grads(&grads, &mut acc);
            total += tape.value(loss).data[0];
        }
        let scale = 1.0 / batch.len() as f64;
        for g in acc.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        opt.step(&mut self.store, &acc);
        Ok(total * scale)
    }

    /// Saves config, vocabulary, and parameters into a directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_string_pretty(&self.config)?,
        )?;
        std::fs::write(dir.join("vocab.txt"), self.vocab.to_text())?;
        checkpoint::save(&self.store, &dir.join("params.hoif"))
    }

    /// Loads a model saved with [`ContactModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let config: ContactConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let vocab = Vocabulary::from_file(&dir.join("vocab.txt"))?;
        let mut model = Self::new(config, vocab, 0)?;
        checkpoint::load_into(&mut model.store, &dir.join("params.hoif"))?;
        Ok(model)
    }
}

impl Denoiser for ContactModel {
    type Cond = ContactCondition;
    fn denoise(&self, y_t: &[f64], t: usize, cond: Option<&ContactCondition>) -> Result<Vec<f64>> {
        self.denoise_contact(y_t, t, cond)
    }
}

/// One training example: the clean flat contact vector plus its condition.
#[derive(Debug, Clone)]
pub struct ContactExample {
    pub y0: Vec<f64>,
    pub raw: RawContactCondition,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::BodyTemplate;
    use crate::geometry::{add3, dist3};
    use std::sync::OnceLock;

    fn small_config() -> ContactConfig {
        ContactConfig {
            width: 32,
            layers: 1,
            heads: 2,
            ff_dim: 64,
            n_points: 8,
            t_count: 50,
            ..ContactConfig::default()
        }
    }

    fn model_with(config: ContactConfig) -> ContactModel {
        ContactModel::new(config, Vocabulary::default_vocab(), 11).expect("model")
    }

    fn fib_sphere(n: usize) -> Vec<[f64; 3]> {
        let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let th = golden * i as f64;
                [r * th.cos(), r * th.sin(), z]
            })
            .collect()
    }

    fn hand_joints_at(template: &BodyTemplate, pose: &HumanPose) -> HandJoints {
        let skel = crate::body::forward_kinematics(template, pose);
        crate::body::hand_joints(template, &skel)
    }

    // ---- indicator ----

    #[test]
    fn indicator_reads_hand_words() {
        // [PAPER] indicator definition: "left" → {1,0}; "both" → {1,1}.
        assert_eq!(
            hand_indicator("grasp mug with left hand").unwrap(),
            HandIndicator { left: true, right: false }
        );
        assert_eq!(
            hand_indicator("lift box with both hands").unwrap(),
            HandIndicator::both()
        );
        assert_eq!(
            hand_indicator("hold it in the RIGHT hand").unwrap(),
            HandIndicator { left: false, right: true }
        );
        // precedence both > left > right
        assert_eq!(
            hand_indicator("left right both").unwrap(),
            HandIndicator::both()
        );
        assert_eq!(
            hand_indicator("left right").unwrap(),
            HandIndicator { left: true, right: false }
        );
    }

    #[test]
    fn indicator_rejects_handless_prompt() {
        // [PAPER] a prompt with no hand word is an annotation error naming it.
        let err = hand_indicator("pass ball").unwrap_err();
        match err {
            Error::Annotation(msg) => assert!(msg.contains("pass ball")),
            other => panic!("expected annotation error, got {:?}", other),
        }
        assert!(matches!(hand_indicator("   "), Err(Error::Contract(_))));
    }

    // ---- masking ----

    #[test]
    fn masked_hand_values_zero_the_unused_hand() {
        // [PAPER] the masked hand's 45 values are zeroed before encoding.
        let mut pose = HumanPose::zero();
        for (i, v) in pose.as_mut_slice().iter_mut().enumerate() {
            *v = 0.01 * (i as f64 + 1.0);
        }
        let left_only = masked_hand_values(&pose, HandIndicator { left: true, right: false });
        assert_eq!(left_only.len(), HAND_POSE_DIM);
        assert_eq!(&left_only[..45], pose.left_hand_pose());
        assert!(left_only[45..].iter().all(|&v| v == 0.0));
        let both = masked_hand_values(&pose, HandIndicator::both());
        assert_eq!(&both[..45], pose.left_hand_pose());
        assert_eq!(&both[45..], pose.right_hand_pose());
    }

    #[test]
    fn indicator_targets_zero_masked_probabilities() {
        // [DERIVED] right-only indicator forces left-hand probability targets
        // to zero and leaves everything else alone.
        let mut y0 = vec![0.5; CONTACT_DIM];
        apply_indicator_targets(&mut y0, HandIndicator { left: false, right: true });
        for i in body::hand_range(Hand::Left) {
            assert_eq!(y0[i * RECORD_DIM + 3], 0.0);
            for k in 0..3 {
                assert_eq!(y0[i * RECORD_DIM + k], 0.5);
            }
        }
        for i in body::hand_range(Hand::Right) {
            assert_eq!(y0[i * RECORD_DIM + 3], 0.5);
        }
    }

    // ---- truth extraction ----

    #[test]
    fn truth_nearest_point_on_unit_sphere() {
        // [TRIVIAL] joint at (2,0,0) against a unit-sphere cloud → nearest
        // point (1,0,0) at distance 1, below-threshold probability 0.
        let mut pts = fib_sphere(200);
        pts.push([1.0, 0.0, 0.0]);
        let cloud = PointCloud::new(pts);
        let mut joints = HandJoints {
            positions: vec![[2.0, 0.0, 0.0]; NUM_HAND_JOINTS],
            normals: vec![[0.0, 0.0, 1.0]; NUM_HAND_JOINTS],
        };
        let truth = extract_contact_truth(
            &joints,
            &cloud,
            &RigidPose6::identity(),
            DEFAULT_D_CONTACT,
        )
        .unwrap();
        let r = truth.vector.records[0];
        assert_eq!(r.position, [1.0, 0.0, 0.0]);
        assert_eq!(r.probability, 0.0);
        assert!((dist3([2.0, 0.0, 0.0], r.position) - 1.0).abs() < 1e-12);

        // [TRIVIAL] a joint on the surface (distance 0) gets probability 1.
        joints.positions[5] = [1.0, 0.0, 0.0];
        let truth = extract_contact_truth(
            &joints,
            &cloud,
            &RigidPose6::identity(),
            DEFAULT_D_CONTACT,
        )
        .unwrap();
        assert_eq!(truth.vector.records[5].probability, 1.0);
        assert_eq!(truth.vector.records[0].probability, 0.0);
    }

    #[test]
    fn truth_matches_brute_force_scan() {
        // [DERIVED] kd-tree nearest indices equal a brute-force scan on
        // random scenes.
        let mut rng = crate::rng::rng_from_seed(7);
        for _ in 0..5 {
            let pts: Vec<[f64; 3]> = (0..300)
                .map(|_| {
                    [
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                        rng.random_range(-0.2..0.2),
                    ]
                })
                .collect();
            let cloud = PointCloud::new(pts.clone());
            let joints = HandJoints {
                positions: (0..NUM_HAND_JOINTS)
                    .map(|_| {
                        [
                            rng.random_range(-0.3..0.3),
                            rng.random_range(-0.3..0.3),
                            rng.random_range(-0.3..0.3),
                        ]
                    })
                    .collect(),
                normals: vec![[0.0, 0.0, 1.0]; NUM_HAND_JOINTS],
            };
            let pose = RigidPose6::new(
                [rng.random_range(-1.0..1.0), 0.3, 0.2],
                [0.1, -0.2, 0.05],
            );
            let truth =
                extract_contact_truth(&joints, &cloud, &pose, DEFAULT_D_CONTACT).unwrap();
            let inv = pose.inverse();
            for (j, &p) in joints.positions.iter().enumerate() {
                let q = inv.apply(p);
                let brute = (0..pts.len())
                    .min_by(|&a, &b| {
                        dist3(q, pts[a]).partial_cmp(&dist3(q, pts[b])).unwrap()
                    })
                    .unwrap();
                assert_eq!(truth.nearest[j], brute, "joint {}", j);
            }
        }
    }

    #[test]
    fn truth_is_rigid_equivariant() {
        // [DERIVED] moving joints and object pose by the same rigid map
        // leaves canonical-frame positions and labels unchanged (1e-9).
        let template = BodyTemplate::load_default().expect("template");
        let pose = HumanPose::zero();
        let joints = hand_joints_at(&template, &pose);
        let cloud = PointCloud::new(
            fib_sphere(150)
                .iter()
                .map(|p| crate::geometry::scale3(*p, 0.05))
                .collect(),
        );
        // place the object at the left wrist area so some joints contact
        let anchor = add3(joints.positions[2], [0.03, 0.0, 0.0]);
        let obj_pose = RigidPose6::new([0.2, -0.1, 0.4], anchor);
        let base = extract_contact_truth(&joints, &cloud, &obj_pose, 0.05).unwrap();
        assert!(base.vector.records.iter().any(|r| r.probability == 1.0));

        let motion = RigidPose6::new([0.3, 0.7, -0.2], [1.0, -2.0, 0.5]);
        let moved_joints = HandJoints {
            positions: joints.positions.iter().map(|&p| motion.apply(p)).collect(),
            normals: joints.normals.clone(),
        };
        let moved_pose = motion.compose(&obj_pose);
        let moved = extract_contact_truth(&moved_joints, &cloud, &moved_pose, 0.05).unwrap();
        for (a, b) in base.vector.records.iter().zip(&moved.vector.records) {
            assert!(dist3(a.position, b.position) < 1e-9);
            assert_eq!(a.probability, b.probability);
        }
        assert_eq!(base.nearest, moved.nearest);
    }

    #[test]
    fn truth_rejects_empty_cloud() {
        let joints = HandJoints {
            positions: vec![[0.0; 3]; NUM_HAND_JOINTS],
            normals: vec![[0.0, 0.0, 1.0]; NUM_HAND_JOINTS],
        };
        let empty = PointCloud::new(Vec::new());
        assert!(matches!(
            extract_contact_truth(&joints, &empty, &RigidPose6::identity(), 0.01),
            Err(Error::Contract(_))
        ));
    }

    // ---- selection and grasp rule ----

    fn vector_with_probs(probs: &[f64]) -> ContactVector {
        let records = (0..NUM_HAND_JOINTS)
            .map(|i| ContactRecord {
                position: [i as f64, 0.0, 0.0],
                probability: probs.get(i).copied().unwrap_or(0.0),
            })
            .collect();
        ContactVector { records }
    }

    #[test]
    fn select_thresholds_at_tau() {
        // [PAPER] τ = 0.8: probabilities 0.9 and 0.7 → only the first.
        let mut probs = vec![0.0; NUM_HAND_JOINTS];
        probs[0] = 0.9;
        probs[1] = 0.7;
        let sel = select_contacts(&vector_with_probs(&probs), DEFAULT_TAU).unwrap();
        assert_eq!(sel.indices, vec![0]);
        assert_eq!(sel.points, vec![[0.0, 0.0, 0.0]]);
        assert!(!sel.empty);
    }

    #[test]
    fn select_empty_sets_warning() {
        // [TRIVIAL] all zeros → empty set plus warning flag.
        let sel = select_contacts(&vector_with_probs(&[]), DEFAULT_TAU).unwrap();
        assert!(sel.indices.is_empty());
        assert!(sel.empty);
    }

    #[test]
    fn select_tau_zero_takes_all() {
        // [TRIVIAL] τ = 0 edge: every joint selected, ascending order.
        let sel = select_contacts(&vector_with_probs(&[]), 0.0).unwrap();
        assert_eq!(sel.indices, (0..NUM_HAND_JOINTS).collect::<Vec<_>>());
        assert!(select_contacts(&vector_with_probs(&[]), 1.5).is_err());
    }

    #[test]
    fn select_monotone_in_tau() {
        // [DERIVED] raising τ never adds indices.
        let mut rng = crate::rng::rng_from_seed(3);
        let probs: Vec<f64> = (0..NUM_HAND_JOINTS)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let v = vector_with_probs(&probs);
        let mut prev: Option<Vec<usize>> = None;
        for k in 0..=10 {
            let sel = select_contacts(&v, k as f64 / 10.0).unwrap();
            if let Some(p) = &prev {
                assert!(sel.indices.iter().all(|i| p.contains(i)));
                assert!(sel.indices.len() <= p.len());
            }
            prev = Some(sel.indices);
        }
    }

    #[test]
    fn grasp_rule_needs_thumb_and_finger_same_hand() {
        // [PAPER] thumb rule: {0,4} → true; {0,1,2} thumb-only → false.
        assert!(stable_grasp_check(&[0, 4]).unwrap());
        assert!(!stable_grasp_check(&[0, 1, 2]).unwrap());
        assert!(!stable_grasp_check(&[]).unwrap());
        // right-hand pair works; thumb and finger on different hands do not
        assert!(stable_grasp_check(&[15, 20]).unwrap());
        assert!(!stable_grasp_check(&[0, 20]).unwrap());
        assert!(!stable_grasp_check(&[3, 4, 5]).unwrap()); // fingers only
        assert!(stable_grasp_check(&[31]).is_err());
    }

    // ---- flat layout ----

    #[test]
    fn flatten_round_trip_and_clamp() {
        let mut rng = crate::rng::rng_from_seed(5);
        let flat: Vec<f64> = (0..CONTACT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = ContactVector::from_flat(&flat).unwrap();
        assert_eq!(v.records.len(), NUM_HAND_JOINTS);
        for (j, r) in v.records.iter().enumerate() {
            assert!((0.0..=1.0).contains(&r.probability));
            assert_eq!(r.position[0], flat[j * RECORD_DIM]);
        }
        let back = v.flatten();
        // positions survive; probabilities are the clamped originals
        for j in 0..NUM_HAND_JOINTS {
            for k in 0..3 {
                assert_eq!(back[j * RECORD_DIM + k], flat[j * RECORD_DIM + k]);
            }
            assert_eq!(
                back[j * RECORD_DIM + 3],
                flat[j * RECORD_DIM + 3].clamp(0.0, 1.0)
            );
        }
        assert!(ContactVector::from_flat(&flat[..10]).is_err());
    }

    // ---- model ----

    #[test]
    fn denoise_output_always_30_by_4() {
        // [PAPER] output shape 30x4 with probabilities squashed to [0,1].
        let m = model_with(small_config());
        let mut rng = crate::rng::rng_from_seed(2);
        let y: Vec<f64> = (0..CONTACT_DIM).map(|_| rng.random_range(-2.0..2.0)).collect();
        for t in [1, 25, 50] {
            let out = m.denoise_contact(&y, t, None).unwrap();
            assert_eq!(out.len(), CONTACT_DIM);
            for j in 0..NUM_HAND_JOINTS {
                let p = out[j * RECORD_DIM + 3];
                assert!((0.0..=1.0).contains(&p), "prob {} at joint {}", p, j);
            }
        }
        assert!(m.denoise_contact(&y[..8], 1, None).is_err());
    }

    #[test]
    fn direct_and_tape_encoders_agree() {
        // [DERIVED] the inference-path encoders match the training-path tape
        // encoders to 1e-12.
        let m = model_with(small_config());
        let cloud = PointCloud::new(fib_sphere(64));
        let pose = {
            let mut p = HumanPose::zero();
            for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
                *v = ((i * 7 % 13) as f64 - 6.0) * 0.02;
            }
            p
        };
        let raw = m
            .raw_condition("hold the ball with the right hand", &cloud, &pose)
            .unwrap();
        let cond = m.encode_condition(&raw);

        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape);
        let text = crate::encode::mean_embed_project_var(
            &mut tape,
            &bound,
            m.params.text_embed,
            &m.params.text_proj,
            &raw.token_ids,
        );
        let obj = crate::encode::point_mlp_var(
            &mut tape,
            &bound,
            &m.params.set_l1,
            &m.params.set_l2,
            &raw.centered_points,
        );
        let hand = crate::encode::mlp2_row_var(
            &mut tape,
            &bound,
            &m.params.hand_l1,
            &m.params.hand_l2,
            &raw.hand_values,
        );
        for (a, b) in cond.text_embedding.iter().zip(&tape.value(text).data) {
            assert!((a - b).abs() < 1e-12);
        }
        let obj_flat: Vec<f64> = cond.object_features.iter().flatten().copied().collect();
        for (a, b) in obj_flat.iter().zip(&tape.value(obj).data) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in cond.hand_features.iter().zip(&tape.value(hand).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_and_save_load_deterministic() {
        let dir = tempfile::tempdir().expect("tempdir");
        let m1 = model_with(small_config());
        let m2 = model_with(small_config());
        for ((n1, t1), (n2, t2)) in m1.store.named().zip(m2.store.named()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data);
        }
        m1.save(dir.path()).unwrap();
        let loaded = ContactModel::load(dir.path()).unwrap();
        for ((n1, t1), (n2, t2)) in m1.store.named().zip(loaded.store.named()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data, t2.data);
        }
        let mut rng = crate::rng::rng_from_seed(9);
        let y: Vec<f64> = (0..CONTACT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(
            m1.denoise_contact(&y, 3, None).unwrap(),
            loaded.denoise_contact(&y, 3, None).unwrap()
        );
    }

    // ---- toy training (shared fixture: one run, several assertions) ----

    struct Trained {
        model: ContactModel,
        losses: Vec<f64>,
        data: Vec<ContactExample>,
    }

    fn trained() -> &'static Trained {
        static CELL: OnceLock<Trained> = OnceLock::new();
        CELL.get_or_init(|| {
            let template = BodyTemplate::load_default().expect("template");
            let mut config = small_config();
            config.d_contact = 0.025;
            let mut model = model_with(config.clone());
            let mut rng = crate::rng::rng_from_seed(20);

            // Four right-hand grasp scenes: an object centered at the right
            // index fingertip, so several right-hand joints are in contact
            // while the left hand stays far away.
            let mut data = Vec::new();
            let prompts = [
                "grasp the ball with the right hand",
                "hold the ball with the right hand",
                "lift the ball with the right hand",
                "grasp the cup with the right hand",
            ];
            for (s, prompt) in prompts.iter().enumerate() {
                let mut pose = HumanPose::zero();
                for v in pose.as_mut_slice()[3..66].iter_mut() {
                    *v = rng.random_range(-0.05..0.05);
                }
                let skel = crate::body::forward_kinematics(&template, &pose);
                let joints = crate::body::hand_joints(&template, &skel);
                let radius = 0.02 + 0.004 * s as f64;
                let cloud = PointCloud::new(
                    fib_sphere(64)
                        .iter()
                        .map(|p| crate::geometry::scale3(*p, radius))
                        .collect(),
                );
                // right index distal is canonical joint 18
                let anchor = joints.positions[18];
                let obj_pose = RigidPose6::new([0.0; 3], anchor);
                let truth =
                    extract_contact_truth(&joints, &cloud, &obj_pose, config.d_contact)
                        .expect("truth");
                let right: f64 = body::hand_range(Hand::Right)
                    .map(|i| truth.vector.records[i].probability)
                    .sum();
                assert!(right >= 1.0, "scene {} has no right-hand contact", s);
                let raw = model.raw_condition(prompt, &cloud, &pose).expect("cond");
                data.push(ContactExample { y0: truth.vector.flatten(), raw });
            }

            let sched = model.schedule().expect("schedule");
            let mut opt = AdamW::new(&model.store, 3e-3, 1e-4);
            let mut losses = Vec::new();
            for _ in 0..2000 {
                let loss = model
                    .training_step(&mut opt, &data, &sched, &mut rng)
                    .expect("step");
                losses.push(loss);
            }
            Trained { model, losses, data }
        })
    }

    #[test]
    fn toy_training_converges() {
        // [DERIVED] x0-MSE drops at least 5x over the recorded curve
        // (smoothed endpoints: first 10 vs last 100 steps).
        let tr = trained();
        let head: f64 = tr.losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = tr.losses[tr.losses.len() - 100..].iter().sum::<f64>() / 100.0;
        assert!(
            head / tail >= 5.0,
            "loss only dropped {:.2}x ({:.4} -> {:.4})",
            head / tail,
            head,
            tail
        );
    }

    #[test]
    fn masked_side_stays_quiet_after_training() {
        // [DERIVED] with right-only prompts, sampled left-hand probabilities
        // average below 0.2.
        let tr = trained();
        let mut rng = crate::rng::rng_from_seed(77);
        let mut masked_mean = 0.0;
        for ex in &tr.data {
            let cond = tr.model.encode_condition(&ex.raw);
            let y = tr.model.sample_contacts(&cond, &mut rng, None).expect("sample");
            let left: f64 = body::hand_range(Hand::Left)
                .map(|i| y.records[i].probability)
                .sum();
            masked_mean += left / 15.0;
        }
        masked_mean /= tr.data.len() as f64;
        assert!(
            masked_mean < 0.2,
            "masked-side mean probability {:.3}",
            masked_mean
        );
    }

    #[test]
    fn sampling_deterministic() {
        // [DERIVED] same seed, same condition → bitwise-identical samples.
        let tr = trained();
        let cond = tr.model.encode_condition(&tr.data[0].raw);
        let mut r1 = crate::rng::rng_from_seed(123);
        let mut r2 = crate::rng::rng_from_seed(123);
        let a = tr.model.sample_contacts(&cond, &mut r1, None).unwrap();
        let b = tr.model.sample_contacts(&cond, &mut r2, None).unwrap();
        assert_eq!(a.flatten(), b.flatten());
    }
}
