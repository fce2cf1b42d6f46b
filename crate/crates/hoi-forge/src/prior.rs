//! Stage 1: the dual-branch reciprocal diffusion prior.
//!
//! Generates a coarse [`PoseState`] (159-value human pose plus 6-DoF object
//! pose) from a text prompt and an object point cloud.  A human branch and an
//! object branch — each a small pre-norm transformer — denoise the joint
//! state; halfway through, a Reciprocal Module exchanges features between
//! them via cross-attention.  Text is embedded by a toy bag-of-words encoder,
//! the object cloud by a permutation-invariant set encoder.
//!
//! Ablation variants: `single` (one trunk over the concatenated state),
//! `dual` (two branches, no exchange), `rm_enc` (exchange through a shared
//! self-attention encoder), and `rm` (cross-attention exchange, default).

use crate::ad::nn::{CrossAttnBlock, EncoderLayer, Linear, Mode, ParamStore};
use crate::ad::{checkpoint, AdamW, Tape, Tensor, Var};
use crate::body::HumanPose;
use crate::diffusion::{
    self, Denoiser, DiffusionSchedule, GuidanceHook, SampleConfig, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, sub3, PointCloud, RigidPose6};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Flattened length of the joint diffusion state.
pub const STATE_DIM: usize = crate::body::POSE_DIM + 6;

/// The joint diffusion state `x = {x^h, x^o}`.
#[derive(Debug, Clone)]
pub struct PoseState {
    pub human: HumanPose,
    pub object: RigidPose6,
}

impl PoseState {
    /// Flattens to 165 values: human pose then object pose.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(STATE_DIM);
        v.extend_from_slice(self.human.as_slice());
        v.extend_from_slice(&self.object.to_vec6());
        v
    }

    /// Rebuilds from a flattened state; the object rotation is canonicalized.
    pub fn from_flat(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::contract(format!(
                "pose state must have {} values, found {}",
                STATE_DIM,
                v.len()
            )));
        }
        Ok(PoseState {
            human: HumanPose::from_vec(v[..crate::body::POSE_DIM].to_vec())?,
            object: RigidPose6::from_vec6(&v[crate::body::POSE_DIM..]),
        })
    }
}

/// Model architecture variant (ablation axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One transformer over the concatenated 165-value state.
    Single,
    /// Two branches, no feature exchange.
    Dual,
    /// Exchange via a shared self-attention encoder over both sequences.
    RmEnc,
    /// Cross-attention Reciprocal Module (default).
    Rm,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Variant::Single),
            "dual" => Ok(Variant::Dual),
            "rm_enc" => Ok(Variant::RmEnc),
            "rm" => Ok(Variant::Rm),
            other => Err(Error::config(format!(
                "unknown variant '{}'; expected single, dual, rm_enc or rm",
                other
            ))),
        }
    }
}

/// Prior model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorConfig {
    pub variant: Variant,
    /// Model width d.
    pub width: usize,
    /// Encoder layers per branch.
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Points kept by the set encoder's farthest-point subsample.
    pub n_points: usize,
    /// Diffusion steps T.
    pub t_count: usize,
    pub schedule: ScheduleKind,
    pub cfg_scale: f64,
    pub p_uncond: f64,
    /// Human pose token count: 5 (orient/body/hands/translation) or 1.
    pub human_tokens: usize,
    pub dropout: f64,
}

impl Default for PriorConfig {
    /// Desk-scale defaults: trainable on a laptop CPU in minutes.
    fn default() -> Self {
        PriorConfig {
            variant: Variant::Rm,
            width: 64,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            n_points: 32,
            t_count: 100,
            schedule: ScheduleKind::Cosine,
            cfg_scale: diffusion::DEFAULT_CFG_SCALE,
            p_uncond: diffusion::DEFAULT_P_UNCOND,
            human_tokens: 5,
            dropout: 0.0,
        }
    }
}

impl PriorConfig {
    /// Paper-scale configuration (not intended for CPU training).
    pub fn paper() -> Self {
        PriorConfig {
            width: 512,
            layers: 4,
            heads: 4,
            ff_dim: 1024,
            n_points: 256,
            t_count: 1000,
            ..Self::default()
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
            return Err(Error::config("layers must be at least 1"));
        }
        if self.human_tokens != 1 && self.human_tokens != 5 {
            return Err(Error::config(format!(
                "human_tokens must be 1 or 5, got {}",
                self.human_tokens
            )));
        }
        if self.n_points == 0 {
            return Err(Error::config("n_points must be positive"));
        }
        Ok(())
    }
}

/// Token vocabulary for the toy text encoder: one token per line in the
/// external file form.  Unknown words map to a shared UNK row.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.trim().is_empty() {
                return Err(Error::config("vocabulary contains an empty token"));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate vocabulary token '{}'", t)));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Parses the one-token-per-line format; blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(
            text.lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty()),
        )
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// The built-in vocabulary covering the synthetic prompt grammar and the
    /// adaptation synonym lexicon.
    pub fn default_vocab() -> Self {
        const WORDS: &[&str] = &[
            "lift", "raise", "up", "uplift", "pass", "hand", "give", "deliver", "place", "put",
            "set", "position", "inspect", "examine", "view", "check", "the", "a", "with", "left",
            "right", "box", "cube", "cylinder", "sphere", "ball", "mug", "cup", "object", "hold",
            "grasp", "using", "to", "down", "over", "table",
        ];
        Self::from_tokens(WORDS.iter().map(|w| w.to_string())).expect("static vocab is valid")
    }

    /// Number of real tokens (the UNK row sits at index `len()`).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lookup(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&self.tokens.len())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

/// Preprocessed condition inputs: token ids and the centered, subsampled
/// object points.  Cheap to keep around; encoders run on these.
#[derive(Debug, Clone)]
pub struct RawCondition {
    pub token_ids: Vec<usize>,
    /// `n_points` rows, centered at the cloud centroid.
    pub centered_points: Vec<[f64; 3]>,
}

/// Encoded condition for sampling: numeric embeddings plus null flags for
/// the classifier-free branches.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// Text embedding, width d.
    pub text_embedding: Vec<f64>,
    /// `n_points` rows of width d.
    pub object_features: Vec<Vec<f64>>,
    /// Max-pooled object feature, width d.
    pub object_pooled: Vec<f64>,
    pub text_null: bool,
    pub object_null: bool,
}

struct PriorParams {
    text_embed: crate::ad::ParamId,
    text_proj: Linear,
    text_null: crate::ad::ParamId,
    obj_null: crate::ad::ParamId,
    set_l1: Linear,
    set_l2: Linear,
    step_proj: Linear,
    // Dual-branch pieces (absent for the single variant).
    h_in: Vec<Linear>,
    h_out: Vec<Linear>,
    o_in: Option<Linear>,
    o_out: Option<Linear>,
    h_layers: Vec<EncoderLayer>,
    o_layers: Vec<EncoderLayer>,
    rm_h: Option<CrossAttnBlock>,
    rm_o: Option<CrossAttnBlock>,
    rm_shared: Option<EncoderLayer>,
}

/// Split of the human pose vector into input tokens.
fn human_groups(human_tokens: usize) -> Vec<(usize, usize)> {
    match human_tokens {
        5 => vec![(0, 3), (3, 63), (66, 45), (111, 45), (156, 3)],
        _ => vec![(0, crate::body::POSE_DIM)],
    }
}

/// The Stage-1 prior model: parameters, config, and vocabulary.
pub struct PriorModel {
    pub config: PriorConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    params: PriorParams,
}

impl PriorModel {
    /// Initializes a fresh model; identical seeds give bitwise-identical
    /// parameters.
    pub fn new(config: PriorConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
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
        let set_l1 = Linear::new(&mut store, "set.l1", r, 3, d);
        let set_l2 = Linear::new(&mut store, "set.l2", r, d, d);
        let step_proj = Linear::new(&mut store, "step.proj", r, d, d);

        let groups = human_groups(config.human_tokens);
        let mut params = PriorParams {
            text_embed,
            text_proj,
            text_null,
            obj_null,
            set_l1,
            set_l2,
            step_proj,
            h_in: Vec::new(),
            h_out: Vec::new(),
            o_in: None,
            o_out: None,
            h_layers: Vec::new(),
            o_layers: Vec::new(),
            rm_h: None,
            rm_o: None,
            rm_shared: None,
        };

        match config.variant {
            Variant::Single => {
                params.h_in.push(Linear::new(&mut store, "s.in", r, STATE_DIM, d));
                params.h_out.push(Linear::new(&mut store, "s.out", r, d, STATE_DIM));
                for i in 0..config.layers {
                    params.h_layers.push(EncoderLayer::new(
                        &mut store,
                        &format!("s.layer{}", i),
                        r,
                        d,
                        config.heads,
                        config.ff_dim,
                        config.dropout,
                    ));
                }
            }
            _ => {
                for (g, (_, len)) in groups.iter().enumerate() {
                    params
                        .h_in
                        .push(Linear::new(&mut store, &format!("h.in{}", g), r, *len, d));
                }
                for (g, (_, len)) in groups.iter().enumerate() {
                    params
                        .h_out
                        .push(Linear::new(&mut store, &format!("h.out{}", g), r, d, *len));
                }
                params.o_in = Some(Linear::new(&mut store, "o.in", r, 6, d));
                params.o_out = Some(Linear::new(&mut store, "o.out", r, d, 6));
                for i in 0..config.layers {
                    params.h_layers.push(EncoderLayer::new(
                        &mut store,
                        &format!("h.layer{}", i),
                        r,
                        d,
                        config.heads,
                        config.ff_dim,
                        config.dropout,
                    ));
                    params.o_layers.push(EncoderLayer::new(
                        &mut store,
                        &format!("o.layer{}", i),
                        r,
                        d,
                        config.heads,
                        config.ff_dim,
                        config.dropout,
                    ));
                }
                match config.variant {
                    Variant::Rm => {
                        params.rm_h = Some(CrossAttnBlock::new(
                            &mut store,
                            "rm.h",
                            r,
                            d,
                            config.heads,
                            config.dropout,
                        ));
                        params.rm_o = Some(CrossAttnBlock::new(
                            &mut store,
                            "rm.o",
                            r,
                            d,
                            config.heads,
                            config.dropout,
                        ));
                    }
                    Variant::RmEnc => {
                        params.rm_shared = Some(EncoderLayer::new(
                            &mut store,
                            "rm.shared",
                            r,
                            d,
                            config.heads,
                            config.ff_dim,
                            config.dropout,
                        ));
                    }
                    _ => {}
                }
            }
        }

        Ok(PriorModel {
            config,
            vocab,
            store,
            params,
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

    /// Farthest-point subsample to `n_points`, then center at the centroid.
    pub fn subsample_centered(&self, cloud: &PointCloud) -> Result<Vec<[f64; 3]>> {
        let n = self.config.n_points;
        if cloud.points.len() < n {
            return Err(Error::contract(format!(
                "object cloud has {} points; the set encoder needs at least {}",
                cloud.points.len(),
                n
            )));
        }
        let picks = farthest_point_sample(&cloud.points, n)?;
        let centroid = cloud.centroid();
        Ok(picks
            .iter()
            .map(|&i| sub3(cloud.points[i], centroid))
            .collect())
    }

    pub fn raw_condition(&self, prompt: &str, cloud: &PointCloud) -> Result<RawCondition> {
        Ok(RawCondition {
            token_ids: self.tokenize(prompt)?,
            centered_points: self.subsample_centered(cloud)?,
        })
    }

    // Direct (tape-free) text encoding; kept numerically identical to the
    // tape path, which a unit test enforces.
    fn encode_text_ids(&self, ids: &[usize]) -> Vec<f64> {
        crate::encode::mean_embed_project(
            &self.store,
            self.params.text_embed,
            &self.params.text_proj,
            ids,
        )
    }

    /// Encodes a prompt to a width-d feature vector (deterministic).
    pub fn encode_text(&self, prompt: &str) -> Result<Vec<f64>> {
        Ok(self.encode_text_ids(&self.tokenize(prompt)?))
    }

    fn encode_points(&self, centered: &[[f64; 3]]) -> (Vec<Vec<f64>>, Vec<f64>) {
        crate::encode::point_mlp(&self.store, &self.params.set_l1, &self.params.set_l2, centered)
    }

    /// Encodes an object cloud: `n_points x d` per-point features plus the
    /// max-pooled vector.  Permutation- and translation-invariant.
    pub fn encode_object(&self, cloud: &PointCloud) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        Ok(self.encode_points(&self.subsample_centered(cloud)?))
    }

    /// Builds the numeric condition bundle used by the sampler.
    pub fn encode_condition(&self, raw: &RawCondition) -> ConditionBundle {
        let text_embedding = self.encode_text_ids(&raw.token_ids);
        let (object_features, object_pooled) = self.encode_points(&raw.centered_points);
        ConditionBundle {
            text_embedding,
            object_features,
            object_pooled,
            text_null: false,
            object_null: false,
        }
    }

    pub fn prepare_condition(&self, prompt: &str, cloud: &PointCloud) -> Result<ConditionBundle> {
        Ok(self.encode_condition(&self.raw_condition(prompt, cloud)?))
    }

    // --- tape-side encoders (training path) ---

    fn text_var(&self, tape: &mut Tape, bound: &crate::ad::nn::Bound, ids: &[usize]) -> Var {
        crate::encode::mean_embed_project_var(
            tape,
            bound,
            self.params.text_embed,
            &self.params.text_proj,
            ids,
        )
    }

    fn object_feats_var(
        &self,
        tape: &mut Tape,
        bound: &crate::ad::nn::Bound,
        centered: &[[f64; 3]],
    ) -> Var {
        crate::encode::point_mlp_var(tape, bound, &self.params.set_l1, &self.params.set_l2, centered)
    }

    /// Core denoising forward pass over tape variables.
    ///
    /// `text` is a `[1, d]` row (encoded text or the null token); `obj_feats`
    /// is `[n, d]` per-point features or the `[1, d]` null token.
    #[allow(clippy::too_many_arguments)]
    fn forward_state(
        &self,
        tape: &mut Tape,
        bound: &crate::ad::nn::Bound,
        x: Var,
        t: usize,
        text: Var,
        obj_feats: Var,
        mode: &mut Mode,
    ) -> Var {
        let d = self.config.width;
        let temb = tape.constant(Tensor::matrix(
            1,
            d,
            crate::ad::nn::sinusoidal_embedding(t as f64, d),
        )
        .expect("step embedding"));
        let t_tok = self.params.step_proj.forward(tape, bound, temb);

        if self.config.variant == Variant::Single {
            let state_tok = self.params.h_in[0].forward(tape, bound, x);
            let mut seq = tape.concat_rows(&[state_tok, t_tok, text, obj_feats]);
            for layer in &self.params.h_layers {
                seq = layer.forward(tape, bound, seq, mode);
            }
            let head = tape.slice_rows(seq, 0, 1);
            return self.params.h_out[0].forward(tape, bound, head);
        }

        let groups = human_groups(self.config.human_tokens);
        let mut h_tokens = Vec::with_capacity(groups.len() + 2);
        for (g, (start, len)) in groups.iter().enumerate() {
            let piece = tape.slice_cols(x, *start, *len);
            h_tokens.push(self.params.h_in[g].forward(tape, bound, piece));
        }
        h_tokens.push(t_tok);
        h_tokens.push(text);
        let mut h_seq = tape.concat_rows(&h_tokens);

        let x_obj = tape.slice_cols(x, crate::body::POSE_DIM, 6);
        let o_tok = self
            .params
            .o_in
            .as_ref()
            .expect("dual-branch variant")
            .forward(tape, bound, x_obj);
        let mut o_seq = tape.concat_rows(&[o_tok, t_tok, text, obj_feats]);

        let half = self.config.layers / 2;
        for i in 0..half {
            h_seq = self.params.h_layers[i].forward(tape, bound, h_seq, mode);
            o_seq = self.params.o_layers[i].forward(tape, bound, o_seq, mode);
        }

        match self.config.variant {
            Variant::Rm => {
                // Symmetric exchange computed from the pre-exchange features.
                let h_pre = h_seq;
                let o_pre = o_seq;
                h_seq = self
                    .params
                    .rm_h
                    .as_ref()
                    .unwrap()
                    .forward(tape, bound, h_pre, o_pre, mode);
                o_seq = self
                    .params
                    .rm_o
                    .as_ref()
                    .unwrap()
                    .forward(tape, bound, o_pre, h_pre, mode);
            }
            Variant::RmEnc => {
                let h_len = groups.len() + 2;
                let cat = tape.concat_rows(&[h_seq, o_seq]);
                let cat = self
                    .params
                    .rm_shared
                    .as_ref()
                    .unwrap()
                    .forward(tape, bound, cat, mode);
                let o_len = tape.value(o_seq).shape_2d().0;
                h_seq = tape.slice_rows(cat, 0, h_len);
                o_seq = tape.slice_rows(cat, h_len, o_len);
            }
            _ => {}
        }

        for i in half..self.config.layers {
            h_seq = self.params.h_layers[i].forward(tape, bound, h_seq, mode);
            o_seq = self.params.o_layers[i].forward(tape, bound, o_seq, mode);
        }

        let mut pieces = Vec::with_capacity(groups.len() + 1);
        for (g, _) in groups.iter().enumerate() {
            let tok = tape.slice_rows(h_seq, g, 1);
            pieces.push(self.params.h_out[g].forward(tape, bound, tok));
        }
        let o_head = tape.slice_rows(o_seq, 0, 1);
        pieces.push(
            self.params
                .o_out
                .as_ref()
                .unwrap()
                .forward(tape, bound, o_head),
        );
        tape.concat_cols(&pieces)
    }

    fn condition_vars(
        &self,
        tape: &mut Tape,
        bound: &crate::ad::nn::Bound,
        bundle: Option<&ConditionBundle>,
    ) -> (Var, Var) {
        let d = self.config.width;
        match bundle {
            Some(b) => {
                let text = if b.text_null {
                    bound.var(self.params.text_null)
                } else {
                    tape.constant(
                        Tensor::matrix(1, d, b.text_embedding.clone()).expect("text embedding"),
                    )
                };
                let feats = if b.object_null {
                    bound.var(self.params.obj_null)
                } else {
                    let n = b.object_features.len();
                    let flat: Vec<f64> = b
                        .object_features
                        .iter()
                        .flat_map(|r| r.iter().copied())
                        .collect();
                    tape.constant(Tensor::matrix(n, d, flat).expect("object features"))
                };
                (text, feats)
            }
            None => (
                bound.var(self.params.text_null),
                bound.var(self.params.obj_null),
            ),
        }
    }

    /// Evaluation-mode denoising: predicts the clean 165-value state.
    pub fn denoise_pose(
        &self,
        x_t: &[f64],
        t: usize,
        bundle: Option<&ConditionBundle>,
    ) -> Result<Vec<f64>> {
        if x_t.len() != STATE_DIM {
            return Err(Error::contract(format!(
                "state must have {} values, found {}",
                STATE_DIM,
                x_t.len()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, STATE_DIM, x_t.to_vec()).expect("state"));
        let (text, feats) = self.condition_vars(&mut tape, &bound, bundle);
        let mut mode = Mode::Eval;
        let out = self.forward_state(&mut tape, &bound, x, t, text, feats, &mut mode);
        Ok(tape.value(out).data.clone())
    }

    /// The diffusion schedule implied by the config.
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        diffusion::make_schedule(self.config.t_count, self.config.schedule)
    }

    /// Draws one pose from the prior via the reverse process.
    pub fn sample_pose(
        &self,
        bundle: &ConditionBundle,
        guidance: Option<&mut dyn GuidanceHook>,
        rng: &mut ChaCha8Rng,
        observer: Option<&mut dyn FnMut(usize, &[f64])>,
    ) -> Result<PoseState> {
        let sched = self.schedule()?;
        let config = SampleConfig {
            cfg_scale: self.config.cfg_scale,
            use_tilde_variance: false,
        };
        let raw = diffusion::sample(
            self,
            Some(bundle),
            STATE_DIM,
            &sched,
            guidance,
            &config,
            rng,
            observer,
        )?;
        PoseState::from_flat(&raw)
    }

    /// One optimizer step over a batch: per-example tapes, accumulated
    /// gradients, averaged loss returned.
    pub fn training_step(
        &mut self,
        opt: &mut AdamW,
        batch: &[TrainExample],
        sched: &DiffusionSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let mut acc = self.store.zero_grads();
        let mut total = 0.0;
        for ex in batch {
            let t = diffusion::uniform_step(rng, sched.t_count);
            let noise = diffusion::standard_normal_vec(rng, STATE_DIM);
            let x_t = diffusion::q_sample(&ex.x0, t, &noise, sched)?;
            let drop = rng.random_range(0.0..1.0) < self.config.p_uncond;

            let mut tape = Tape::new();
            let bound = self.store.bind(&mut tape);
            let x = tape.constant(Tensor::matrix(1, STATE_DIM, x_t).expect("state"));
            let (text, feats) = if drop {
                (
                    bound.var(self.params.text_null),
                    bound.var(self.params.obj_null),
                )
            } else {
                let text = self.text_var(&mut tape, &bound, &ex.raw.token_ids);
                let feats = self.object_feats_var(&mut tape, &bound, &ex.raw.centered_points);
                (text, feats)
            };
            let mut mode = Mode::Train(rng);
            let out = self.forward_state(&mut tape, &bound, x, t, text, feats, &mut mode);
            let target =
                tape.constant(Tensor::matrix(1, STATE_DIM, ex.x0.clone()).expect("target"));
            let loss = tape.mse(out, target);
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

    /// Loads a model saved with [`PriorModel::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let config: PriorConfig =
            serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let vocab = Vocabulary::from_file(&dir.join("vocab.txt"))?;
        let mut model = Self::new(config, vocab, 0)?;
        checkpoint::load_into(&mut model.store, &dir.join("params.hoif"))?;
        Ok(model)
    }
}

/// One training example: a clean flattened state and its raw condition.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Vec<f64>,
    pub raw: RawCondition,
}

impl Denoiser for PriorModel {
    type Cond = ConditionBundle;
    fn denoise(&self, x_t: &[f64], t: usize, cond: Option<&ConditionBundle>) -> Result<Vec<f64>> {
        self.denoise_pose(x_t, t, cond)
    }
}
