//! Evaluation suite: action classifier (feature extractor), top-3 accuracy,
//! FID, diversity, multimodality, and voxelized intersection volume.
//!
//! The classifier doubles as the feature extractor: its penultimate hidden
//! state embeds poses for FID / diversity / multimodality.  It consumes the
//! pose as a fixed-order sequence of 53 tokens (52 joint rotations plus the
//! translation, 3 values each) through a small recurrent encoder; an MLP
//! variant exists behind a config flag for ablation.

use std::path::Path;

use crate::ad::nn::{Bound, Linear};
use crate::ad::{checkpoint, AdamW, ParamStore, Tape, Tensor, Var};
use crate::adapt::SceneObject;
use crate::body::{self, BodyTemplate, HumanPose};
use crate::error::{Error, Result};
use crate::geometry::{
    voxelize_cloud, voxelize_solid, KdTree, RigidPose6, TriMesh, Vec3, VoxelGrid,
};
use crate::linalg;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Paper voxel size for intersection volume: 0.5 cm.
pub const IV_VOXEL: f64 = 0.005;

/// Cubic centimeters per occupied voxel at [`IV_VOXEL`].
pub const IV_VOXEL_CM3: f64 = 0.125;

/// Pose tokens: 52 joint rotations + the root translation.
pub const POSE_TOKENS: usize = 53;

/// Default number of random disjoint pairs for diversity.
pub const DEFAULT_DIVERSITY_PAIRS: usize = 300;

/// Covariance shrinkage applied when a feature set is rank-deficient.
pub const FID_SHRINKAGE: f64 = 1e-6;

// ---- classifier ----

/// Classifier / feature-extractor hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Hidden (and feature) dimension.
    pub feature_dim: usize,
    /// Optimizer steps.
    pub steps: usize,
    /// Examples per step.
    pub batch_size: usize,
    /// AdamW learning rate.
    pub lr: f64,
    /// AdamW decoupled weight decay.
    pub weight_decay: f64,
    /// Fraction of the dataset held out for eval accuracy.
    pub holdout_fraction: f64,
    /// Replace the recurrent encoder with a two-layer MLP (ablation).
    pub mlp_variant: bool,
}

impl Default for ClassifierConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ClassifierConfig {
            feature_dim: 64,
            steps: 2000,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.0,
            holdout_fraction: 0.2,
            mlp_variant: false,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::config("holdout_fraction must lie in (0, 0.5]"));
        }
        Ok(())
    }
}

/// A pose with its action label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPose {
    pub pose: HumanPose,
    pub label: usize,
}

enum Net {
    Rnn { x: Linear, h: Linear },
    Mlp { l1: Linear, l2: Linear },
}

/// Recurrent pose classifier; the penultimate hidden state is the motion
/// feature embedding.  Deterministic in eval mode (pure f64 arithmetic).
pub struct FeatureExtractor {
    pub config: ClassifierConfig,
    pub num_classes: usize,
    store: ParamStore,
    net: Net,
    head: Linear,
}

fn token(pose: &HumanPose, t: usize) -> &[f64] {
    &pose.as_slice()[3 * t..3 * t + 3]
}

// y = row * W + b for a stored [in, out] weight.
fn affine_row(store: &ParamStore, lin: &Linear, row: &[f64]) -> Vec<f64> {
    let w = store.get(lin.w);
    let b = store.get(lin.b);
    let (inp, out) = w.shape_2d();
    assert_eq!(inp, row.len());
    let mut y = b.data.clone();
    for (i, xi) in row.iter().enumerate() {
        for (yv, wv) in y.iter_mut().zip(&w.data[i * out..(i + 1) * out]) {
            *yv += xi * wv;
        }
    }
    y
}

impl FeatureExtractor {
    /// Fresh random weights; `num_classes` must be at least 2.
    pub fn new(config: ClassifierConfig, num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::config(format!(
                "classifier needs at least 2 classes, found {}",
                num_classes
            )));
        }
        let mut rng = crate::rng::rng_for(seed, "classifier", 0);
        let d = config.feature_dim;
        let mut store = ParamStore::new();
        let net = if config.mlp_variant {
            Net::Mlp {
                l1: Linear::new(&mut store, "mlp1", &mut rng, body::POSE_DIM, d),
                l2: Linear::new(&mut store, "mlp2", &mut rng, d, d),
            }
        } else {
            Net::Rnn {
                x: Linear::new(&mut store, "rnn_x", &mut rng, 3, d),
                h: Linear::new(&mut store, "rnn_h", &mut rng, d, d),
            }
        };
        let head = Linear::new(&mut store, "head", &mut rng, d, num_classes);
        Ok(FeatureExtractor {
            config,
            num_classes,
            store,
            net,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Penultimate feature embedding of a pose (eval mode).
    pub fn features(&self, pose: &HumanPose) -> Vec<f64> {
        match &self.net {
            Net::Rnn { x, h } => {
                let mut hidden = vec![0.0; self.config.feature_dim];
                for t in 0..POSE_TOKENS {
                    let from_x = affine_row(&self.store, x, token(pose, t));
                    let from_h = affine_row(&self.store, h, &hidden);
                    for (hv, (a, b)) in
                        hidden.iter_mut().zip(from_x.iter().zip(&from_h))
                    {
                        *hv = (a + b).tanh();
                    }
                }
                hidden
            }
            Net::Mlp { l1, l2 } => {
                let mut hid = affine_row(&self.store, l1, pose.as_slice());
                for v in hid.iter_mut() {
                    *v = v.tanh();
                }
                let mut out = affine_row(&self.store, l2, &hid);
                for v in out.iter_mut() {
                    *v = v.tanh();
                }
                out
            }
        }
    }

    /// Class logits of a pose (eval mode).
    pub fn logits(&self, pose: &HumanPose) -> Vec<f64> {
        affine_row(&self.store, &self.head, &self.features(pose))
    }

    // Batched tape forward: rows are examples. Returns (features, logits).
    fn forward_tape(&self, tape: &mut Tape, bound: &Bound, batch: &[&HumanPose]) -> (Var, Var) {
        let n = batch.len();
        let feat = match &self.net {
            Net::Rnn { x, h } => {
                let d = self.config.feature_dim;
                let mut hidden = tape.constant(Tensor::zeros(vec![n, d]));
                for t in 0..POSE_TOKENS {
                    let rows: Vec<f64> =
                        batch.iter().flat_map(|p| token(p, t).iter().copied()).collect();
                    let xt = tape.constant(Tensor::matrix(n, 3, rows).expect("token block"));
                    let a = x.forward(tape, bound, xt);
                    let b = h.forward(tape, bound, hidden);
                    let s = tape.add(a, b);
                    hidden = tape.tanh(s);
                }
                hidden
            }
            Net::Mlp { l1, l2 } => {
                let rows: Vec<f64> = batch
                    .iter()
                    .flat_map(|p| p.as_slice().iter().copied())
                    .collect();
                let xin = tape.constant(
                    Tensor::matrix(n, body::POSE_DIM, rows).expect("pose block"),
                );
                let a = l1.forward(tape, bound, xin);
                let a = tape.tanh(a);
                let b = l2.forward(tape, bound, a);
                tape.tanh(b)
            }
        };
        let logits = self.head.forward(tape, bound, feat);
        (feat, logits)
    }

    /// Saves config, class count, and weights into a directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct Meta<'a> {
            config: &'a ClassifierConfig,
            num_classes: usize,
        }
        std::fs::write(
            dir.join("classifier.json"),
            serde_json::to_string_pretty(&Meta {
                config: &self.config,
                num_classes: self.num_classes,
            })?,
        )?;
        checkpoint::save(&self.store, &dir.join("classifier.hoif"))
    }

    /// Loads a classifier saved with [`FeatureExtractor::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            config: ClassifierConfig,
            num_classes: usize,
        }
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(
            dir.join("classifier.json"),
        )?)?;
        let mut model = FeatureExtractor::new(meta.config, meta.num_classes, 0)?;
        checkpoint::load_into(&mut model.store, &dir.join("classifier.hoif"))?;
        Ok(model)
    }
}

/// Training statistics: `(step, loss)` at each logging interval plus the
/// held-out top-1 accuracy in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    pub losses: Vec<(usize, f64)>,
    pub holdout_top1: f64,
    pub holdout_size: usize,
    pub train_size: usize,
}

/// Index of the largest logit; ties go to the smaller class index.
pub fn top1(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Whether `label` ranks among the 3 largest logits, ties broken by class
/// index (equal logits rank in index order, lower first).
pub fn top3_contains(logits: &[f64], label: usize) -> bool {
    assert!(label < logits.len());
    let mut better = 0;
    for (i, &v) in logits.iter().enumerate() {
        if i == label {
            continue;
        }
        if v > logits[label] || (v == logits[label] && i < label) {
            better += 1;
        }
    }
    better < 3
}

/// Trains the classifier by mini-batch cross-entropy.  The class count is
/// inferred from the labels; fewer than 2 distinct classes is a
/// configuration error.
pub fn train_classifier(
    samples: &[LabeledPose],
    config: &ClassifierConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureExtractor, TrainStats)> {
    config.validate()?;
    if samples.len() < 2 {
        return Err(Error::contract("classifier training needs at least 2 samples"));
    }
    let num_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; num_classes];
        for s in samples {
            seen[s.label] = true;
        }
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        return Err(Error::config(
            "classifier training needs at least 2 distinct classes",
        ));
    }

    let mut model = FeatureExtractor::new(config.clone(), num_classes, rng.random())?;

    // split
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let holdout_n = ((samples.len() as f64 * config.holdout_fraction).round() as usize)
        .clamp(1, samples.len() - 1);
    let (holdout_idx, train_idx) = order.split_at(holdout_n);

    let mut opt = AdamW::new(&model.store, config.lr, config.weight_decay);
    let log_every = (config.steps / 100).max(1);
    let mut losses = Vec::new();
    for step in 0..config.steps {
        let batch_idx: Vec<usize> = (0..config.batch_size)
            .map(|_| train_idx[rng.random_range(0..train_idx.len())])
            .collect();
        let batch: Vec<&HumanPose> = batch_idx.iter().map(|&i| &samples[i].pose).collect();
        let labels: Vec<usize> = batch_idx.iter().map(|&i| samples[i].label).collect();

        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let (_, logits) = model.forward_tape(&mut tape, &bound, &batch);
        let loss = tape.cross_entropy(logits, &labels);
        let grads = tape.backward(loss)?;
        let mut acc = model.store.zero_grads();
        tape.accumulate_param_grads(&grads, &mut acc);
        opt.step(&mut model.store, &acc);

        if step % log_every == 0 || step + 1 == config.steps {
            losses.push((step, tape.value(loss).data[0]));
        }
    }

    let mut hits = 0;
    for &i in holdout_idx {
        if top1(&model.logits(&samples[i].pose)) == samples[i].label {
            hits += 1;
        }
    }
    let stats = TrainStats {
        losses,
        holdout_top1: hits as f64 / holdout_idx.len() as f64,
        holdout_size: holdout_idx.len(),
        train_size: train_idx.len(),
    };
    Ok((model, stats))
}

/// Fraction of rows whose true label is among the 3 largest logits.
pub fn accuracy_top3_from_logits(logit_rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if logit_rows.is_empty() || logit_rows.len() != labels.len() {
        return Err(Error::contract(
            "accuracy needs equal, nonzero logits and labels",
        ));
    }
    if logit_rows[0].len() < 3 {
        return Err(Error::config("top-3 accuracy needs at least 3 classes"));
    }
    let hits = logit_rows
        .iter()
        .zip(labels)
        .filter(|(row, &l)| top3_contains(row, l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Top-3 accuracy of the extractor on labeled poses.
pub fn accuracy_top3(extractor: &FeatureExtractor, samples: &[LabeledPose]) -> Result<f64> {
    if extractor.num_classes < 3 {
        return Err(Error::config(
            "top-3 accuracy needs an extractor with at least 3 classes",
        ));
    }
    if samples.is_empty() {
        return Err(Error::contract("accuracy over an empty sample set"));
    }
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| extractor.logits(&s.pose)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    accuracy_top3_from_logits(&rows, &labels)
}

// ---- FID ----

fn mean_vec(set: &[Vec<f64>]) -> Vec<f64> {
    let d = set[0].len();
    let mut mu = vec![0.0; d];
    for row in set {
        for (m, v) in mu.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mu.iter_mut() {
        *m /= set.len() as f64;
    }
    mu
}

// Unbiased covariance; single-sample sets get the zero matrix.
fn covariance(set: &[Vec<f64>], mu: &[f64]) -> Vec<f64> {
    let d = mu.len();
    let mut cov = vec![0.0; d * d];
    if set.len() < 2 {
        return cov;
    }
    for row in set {
        for i in 0..d {
            let di = row[i] - mu[i];
            for j in i..d {
                cov[i * d + j] += di * (row[j] - mu[j]);
            }
        }
    }
    let scale = 1.0 / (set.len() - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] *= scale;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    cov
}

fn trace(m: &[f64], d: usize) -> f64 {
    (0..d).map(|i| m[i * d + i]).sum()
}

fn check_features(set: &[Vec<f64>], name: &str) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::contract(format!("feature set {} is empty", name)));
    }
    let d = set[0].len();
    if d == 0 {
        return Err(Error::contract("zero-dimensional features"));
    }
    for row in set {
        if row.len() != d {
            return Err(Error::contract("ragged feature set"));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "non-finite value in feature set {}",
                name
            )));
        }
    }
    Ok(d)
}

/// Fréchet distance between Gaussians fit to two feature sets:
/// ‖μ_a−μ_b‖² + Tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2}), the matrix square root
/// taken via the symmetric product Σ_a^{1/2} Σ_b Σ_a^{1/2}.  Sets smaller
/// than `dim + 1` get ε·I covariance shrinkage.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let da = check_features(features_a, "a")?;
    let db = check_features(features_b, "b")?;
    if da != db {
        return Err(Error::contract("feature sets have different dimensions"));
    }
    let d = da;
    let mu_a = mean_vec(features_a);
    let mu_b = mean_vec(features_b);
    let mut cov_a = covariance(features_a, &mu_a);
    let mut cov_b = covariance(features_b, &mu_b);
    if features_a.len() < d + 1 || features_b.len() < d + 1 {
        for i in 0..d {
            cov_a[i * d + i] += FID_SHRINKAGE;
            cov_b[i * d + i] += FID_SHRINKAGE;
        }
    }
    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let sa = linalg::sym_sqrt(&cov_a, d);
    let inner = linalg::matmul(&linalg::matmul(&sa, &cov_b, d, d, d), &sa, d, d, d);
    let cross = linalg::sym_sqrt(&inner, d);
    let value = mean_term + trace(&cov_a, d) + trace(&cov_b, d) - 2.0 * trace(&cross, d);
    Ok(value.max(0.0))
}

// ---- diversity / multimodality ----

/// Mean L2 distance over `pair_count` random disjoint pairs (capped at
/// ⌊n/2⌋ available pairs).
pub fn diversity(
    features: &[Vec<f64>],
    pair_count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    check_features(features, "diversity")?;
    if features.len() < 2 {
        return Err(Error::contract("diversity needs at least 2 samples"));
    }
    let pairs = pair_count.min(features.len() / 2).max(1);
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(rng);
    let total: f64 = (0..pairs)
        .map(|k| l2(&features[order[2 * k]], &features[order[2 * k + 1]]))
        .sum();
    Ok(total / pairs as f64)
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Multimodality result with group bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Multimodality {
    pub value: f64,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

/// Mean within-group pairwise feature distance, averaged over groups.
/// Groups with all distinct pairs ≤ `per_group_pairs` are evaluated
/// exactly; larger groups are subsampled.  Groups smaller than 2 are
/// skipped (reported in the outcome); all groups skipped is an error.
pub fn multimodality(
    groups: &[Vec<Vec<f64>>],
    per_group_pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Multimodality> {
    if per_group_pairs == 0 {
        return Err(Error::contract("per_group_pairs must be positive"));
    }
    let mut used = 0;
    let mut skipped = 0;
    let mut total = 0.0;
    for group in groups {
        let n = group.len();
        if n < 2 {
            skipped += 1;
            continue;
        }
        check_features(group, "multimodality group")?;
        let all_pairs = n * (n - 1) / 2;
        let mean = if all_pairs <= per_group_pairs {
            let mut sum = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    sum += l2(&group[i], &group[j]);
                }
            }
            sum / all_pairs as f64
        } else {
            let mut sum = 0.0;
            for _ in 0..per_group_pairs {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                sum += l2(&group[i], &group[j]);
            }
            sum / per_group_pairs as f64
        };
        total += mean;
        used += 1;
    }
    if used == 0 {
        return Err(Error::contract(
            "multimodality: every group has fewer than 2 samples",
        ));
    }
    Ok(Multimodality {
        value: total / used as f64,
        groups_used: used,
        groups_skipped: skipped,
    })
}

// ---- intersection volume ----

fn padded_bbox(lo: Vec3, hi: Vec3, pad: f64) -> (Vec3, Vec3) {
    (
        [lo[0] - pad, lo[1] - pad, lo[2] - pad],
        [hi[0] + pad, hi[1] + pad, hi[2] + pad],
    )
}

fn cloud_bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Solid voxelization of a watertight mesh on the shared world lattice.
pub fn solid_grid(mesh: &TriMesh, voxel: f64) -> Result<VoxelGrid> {
    let (lo, hi) = mesh.bounds();
    voxelize_solid(mesh, voxel, padded_bbox(lo, hi, 2.0 * voxel))
}

/// Shared-voxel volume of two grids, in cm³.
pub fn shared_volume_cm3(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    let cm = a.voxel_size * 100.0;
    Ok(a.shared_count(b)? as f64 * cm * cm * cm)
}

/// Intersection volume of two solids at the given voxel size, in cm³.
pub fn intersect_volume_meshes(a: &TriMesh, b: &TriMesh, voxel: f64) -> Result<f64> {
    shared_volume_cm3(&solid_grid(a, voxel)?, &solid_grid(b, voxel)?)
}

/// Paper IV: hand surface occupancy vs. object solid occupancy on a shared
/// 0.5 cm lattice; shared voxels × 0.125 cm³.
pub fn intersect_volume(
    template: &BodyTemplate,
    human: &HumanPose,
    object: &SceneObject,
    object_pose: &RigidPose6,
) -> Result<f64> {
    let skel = body::forward_kinematics(template, human);
    let hand = body::hand_surface(template, &skel);
    let (lo, hi) = cloud_bounds(&hand.points);
    let hand_grid = voxelize_cloud(&hand.points, IV_VOXEL, padded_bbox(lo, hi, 2.0 * IV_VOXEL))?;
    let world_mesh = object.mesh.transformed(object_pose);
    let object_grid = solid_grid(&world_mesh, IV_VOXEL)?;
    shared_volume_cm3(&hand_grid, &object_grid)
}

/// Secondary statistic: deepest hand-surface point inside the object,
/// measured as distance to the object's surface cloud (0 when no point is
/// inside).
pub fn max_penetration_depth(
    template: &BodyTemplate,
    human: &HumanPose,
    object: &SceneObject,
    object_pose: &RigidPose6,
) -> Result<f64> {
    let grid = solid_grid(&object.mesh, IV_VOXEL)?;
    let tree = KdTree::build(&object.cloud.points);
    let skel = body::forward_kinematics(template, human);
    let hand = body::hand_surface(template, &skel);
    let inv = object_pose.inverse();
    let mut depth: f64 = 0.0;
    for p in &hand.points {
        let q = inv.apply(*p);
        if let Some(cell) = grid.cell_of(q) {
            if grid.is_occupied(cell) {
                depth = depth.max(tree.nearest(q).1);
            }
        }
    }
    Ok(depth)
}

// ---- report ----

/// The evaluation report: each metric with its sample counts, plus the
/// config fingerprint of the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy_top3: f64,
    pub accuracy_samples: usize,
    pub fid: f64,
    pub fid_samples_generated: usize,
    pub fid_samples_reference: usize,
    pub diversity: f64,
    pub diversity_pairs: usize,
    pub multimodality: f64,
    pub multimodality_groups: usize,
    pub multimodality_skipped: usize,
    pub iv_cm3: f64,
    pub iv_samples: usize,
    pub config_fingerprint: String,
}

impl MetricReport {
    /// All metric values must be non-negative and finite.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("accuracy_top3", self.accuracy_top3),
            ("fid", self.fid),
            ("diversity", self.diversity),
            ("multimodality", self.multimodality),
            ("iv_cm3", self.iv_cm3),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::contract(format!(
                    "metric {} must be non-negative and finite, found {}",
                    name, v
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Short FNV-1a fingerprint of a config's serialized text.
pub fn fingerprint(text: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in text.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{:016x}", h)
}
