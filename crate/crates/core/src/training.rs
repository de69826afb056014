//! End-to-end training of the conditioned semantic field: per-iteration
//! scene/view sampling, ray supervision with an object-biased ray budget,
//! volume augmentation, Adam, checkpointing, and finite-difference gradient
//! audits of every trainable stage.

use rand::Rng;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feature_volume::{
    assemble_volume, compute_bounds, feature_dim_for, perturb_object_entries_mapped,
    random_rotation_angles, rotate_volume_mapped, CodeBook, SparseFeatureVolume, DEFAULT_MARGIN,
    DEFAULT_SIGMA_NOISE, DEFAULT_VOXEL_SIZE,
};
use crate::geometry::sample_along_ray_with;
use crate::image_encoder::{EncoderCache, FeatureMap, ImageEncoder, ImageEncoderConfig};
use crate::interaction_encoder::{
    query_interaction_backward, EncodeCache, InteractionEncoder, InteractionEncoderConfig,
    MultiScaleVolumes, SparseGrid,
};
use crate::nn::Parameterized;
use crate::raster::Label;
use crate::rng::{derive_seed, stream, StreamTag};
use crate::scalar::Real;
use crate::scene::{SceneDataset, SceneView};
use crate::semantic_field::{
    assemble_ray_inputs, close_near_gap, integrate_ray, integrate_ray_backward, FieldHead,
    FieldHeadConfig, DEFAULT_RAY_SAMPLES,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Class probabilities below this are clamped before the log in the
/// semantic term, so a ray that puts no weight on the true class yields a
/// large finite loss and a zero (not infinite) gradient.
pub const PROB_CLAMP: f64 = 1e-7;

const CHECKPOINT_MAGIC: &[u8; 8] = b"GRASPCK1";
const CHECKPOINT_VERSION: u32 = 1;

/// Which conditioning blocks the field head sees. The reduced variants
/// exist for ablation: each one drops a block structurally (the head is
/// built without it), so a disabled path costs nothing and cannot leak.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// Positional encoding only: no image feature, no interaction feature.
    EncodingOnly,
    /// Pixel-aligned image feature only.
    ImageOnly,
    /// Multi-scale interaction feature only.
    InteractionOnly,
    /// Image feature plus an interaction volume built from the hand alone
    /// (object pixels are relabeled background before volume assembly).
    HandVolumeWithImage,
    /// Everything: image feature and the full hand-object volume.
    Full,
}

impl Conditioning {
    pub const ALL: [Conditioning; 5] = [
        Conditioning::EncodingOnly,
        Conditioning::ImageOnly,
        Conditioning::InteractionOnly,
        Conditioning::HandVolumeWithImage,
        Conditioning::Full,
    ];

    pub fn use_image_feature(self) -> bool {
        matches!(
            self,
            Conditioning::ImageOnly | Conditioning::HandVolumeWithImage | Conditioning::Full
        )
    }

    pub fn use_interaction(self) -> bool {
        matches!(
            self,
            Conditioning::InteractionOnly | Conditioning::HandVolumeWithImage | Conditioning::Full
        )
    }

    /// Whether the interaction volume is assembled from the hand only.
    pub fn hand_only_volume(self) -> bool {
        matches!(self, Conditioning::HandVolumeWithImage)
    }

    /// Stable id used by the checkpoint format.
    pub fn id(self) -> u8 {
        match self {
            Conditioning::EncodingOnly => 0,
            Conditioning::ImageOnly => 1,
            Conditioning::InteractionOnly => 2,
            Conditioning::HandVolumeWithImage => 3,
            Conditioning::Full => 4,
        }
    }

    pub fn from_id(id: u8) -> Option<Conditioning> {
        Conditioning::ALL.into_iter().find(|c| c.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Conditioning::EncodingOnly => "encoding-only",
            Conditioning::ImageOnly => "image-only",
            Conditioning::InteractionOnly => "interaction-only",
            Conditioning::HandVolumeWithImage => "hand-volume",
            Conditioning::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Conditioning> {
        Conditioning::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Optimization schedule and supervision budget.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    pub learning_rate: f64,
    /// Epoch (1-based) after which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub rays_per_image: usize,
    pub samples_per_ray: usize,
    /// Fraction of rays drawn from object pixels once the ramp completes.
    pub object_ray_ratio_final: f64,
    /// Fraction of total iterations over which the object-ray ratio ramps
    /// linearly from zero to its final value.
    pub ramp_fraction: f64,
    pub seed: u64,
    pub conditioning: Conditioning,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            iterations_per_epoch: 1000,
            learning_rate: 1e-3,
            decay_epoch: 200,
            decay_factor: 0.1,
            rays_per_image: 1024,
            samples_per_ray: DEFAULT_RAY_SAMPLES,
            object_ray_ratio_final: 0.5,
            ramp_fraction: 0.1,
            seed: 0,
            conditioning: Conditioning::Full,
        }
    }
}

impl TrainConfig {
    pub fn total_iterations(&self) -> u64 {
        self.epochs as u64 * self.iterations_per_epoch as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::Parse {
            what: "training configuration".into(),
            detail,
        };
        if self.epochs == 0 || self.iterations_per_epoch == 0 {
            return Err(bad("epochs and iterations_per_epoch must be positive".into()));
        }
        if self.rays_per_image == 0 || self.samples_per_ray == 0 {
            return Err(bad("rays_per_image and samples_per_ray must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(bad(format!("decay_factor {} must be positive", self.decay_factor)));
        }
        if !(0.0..=1.0).contains(&self.object_ray_ratio_final) {
            return Err(bad(format!(
                "object_ray_ratio_final {} outside [0, 1]",
                self.object_ray_ratio_final
            )));
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return Err(bad(format!("ramp_fraction {} outside [0, 1]", self.ramp_fraction)));
        }
        Ok(())
    }
}

/// Architecture and volume-assembly hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub interaction: InteractionEncoderConfig,
    pub hidden: usize,
    pub color_hidden: usize,
    pub voxel_size: f64,
    pub margin: f64,
    pub sigma_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image: ImageEncoderConfig::default(),
            interaction: InteractionEncoderConfig::default(),
            hidden: 128,
            color_hidden: 64,
            voxel_size: DEFAULT_VOXEL_SIZE,
            margin: DEFAULT_MARGIN,
            sigma_noise: DEFAULT_SIGMA_NOISE,
        }
    }
}

/// The full trainable pipeline. Every component always exists; conditioning
/// variants that skip a component simply never route gradients into it, so
/// the optimizer state stays aligned across variants.
pub struct Model<S: Real> {
    pub conditioning: Conditioning,
    pub config: ModelConfig,
    pub codes: CodeBook<S>,
    pub image_encoder: ImageEncoder<S>,
    pub interaction_encoder: InteractionEncoder<S>,
    pub head: FieldHead<S>,
}

impl<S: Real> Model<S> {
    pub fn init(config: &ModelConfig, conditioning: Conditioning, seed: u64) -> Self {
        let image_encoder =
            ImageEncoder::init(config.image, &mut stream(seed, StreamTag::WeightInit, 0));
        let interaction_encoder = InteractionEncoder::init(
            feature_dim_for(config.image.channels),
            config.interaction,
            &mut stream(seed, StreamTag::WeightInit, 1),
        );
        let head_config = FieldHeadConfig {
            hidden: config.hidden,
            color_hidden: config.color_hidden,
            use_image_feature: conditioning.use_image_feature(),
            use_interaction: conditioning.use_interaction(),
        };
        let head = FieldHead::init(
            config.image.channels,
            config.interaction.interaction_dim(),
            head_config,
            &mut stream(seed, StreamTag::WeightInit, 2),
        );
        Model {
            conditioning,
            config: *config,
            codes: CodeBook::new(seed),
            image_encoder,
            interaction_encoder,
            head,
        }
    }
}

impl<S: Real> Parameterized<S> for Model<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(crate::nn::ParamRef<'_, S>)) {
        self.image_encoder.visit_params(&format!("{prefix}.image"), f);
        self.interaction_encoder
            .visit_params(&format!("{prefix}.interaction"), f);
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
}

/// Learning rate at a zero-based iteration: the base rate, times the decay
/// factor once the 1-based epoch exceeds `decay_epoch`.
pub fn learning_rate_at(config: &TrainConfig, iteration: u64) -> f64 {
    let epoch = iteration / config.iterations_per_epoch as u64 + 1;
    if epoch > config.decay_epoch as u64 {
        config.learning_rate * config.decay_factor
    } else {
        config.learning_rate
    }
}

/// Object-ray fraction at a zero-based iteration: ramps linearly from zero
/// to the final ratio over the first `ramp_fraction` of training.
pub fn object_ratio_at(config: &TrainConfig, iteration: u64) -> f64 {
    let total = config.total_iterations();
    let ramp = ((total as f64 * config.ramp_fraction).ceil() as u64).max(1);
    config.object_ray_ratio_final * (iteration as f64 / ramp as f64).min(1.0)
}

/// One supervised pixel: where the ray goes and what it should produce.
#[derive(Clone, Copy, Debug)]
pub struct RayTarget<S> {
    pub px: usize,
    pub py: usize,
    pub color: [S; 3],
    pub label: Label,
}

/// Draws the supervision rays for one view: `round(n * object_ratio)` from
/// the object pixels (uniform with replacement), the rest uniform over the
/// whole image. A positive ratio against a view with no object pixels is an
/// error even when rounding would ask for zero object rays.
pub fn sample_rays<S: Real>(
    view: &SceneView<S>,
    n: usize,
    object_ratio: f64,
    seed: u64,
) -> Result<Vec<RayTarget<S>>> {
    let mut rng = stream(seed, StreamTag::Iteration, 0);
    let (w, h) = (view.image.width, view.image.height);
    let n_object = ((n as f64 * object_ratio).round() as usize).min(n);
    let object_pixels = view.mask.pixels_of(Label::Object as u8);
    if object_ratio > 0.0 && object_pixels.is_empty() {
        return Err(Error::NoObjectPixels);
    }
    let mut rays = Vec::with_capacity(n);
    let mut push = |flat: usize| {
        let (px, py) = (flat % w, flat / w);
        rays.push(RayTarget {
            px,
            py,
            color: view.image.get(px, py),
            label: Label::from_u8(view.mask.get(px, py)).unwrap_or(Label::Background),
        });
    };
    for _ in 0..n_object {
        push(object_pixels[rng.gen_range(0..object_pixels.len())]);
    }
    for _ in n_object..n {
        push(rng.gen_range(0..w * h));
    }
    Ok(rays)
}

/// The two supervision terms, each summed over the ray batch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<S> {
    pub photometric: S,
    pub semantic: S,
}

impl<S: Real> LossTerms<S> {
    pub fn total(&self) -> S {
        self.photometric + self.semantic
    }
}

/// Squared color error and its gradient in the predicted color.
fn photometric_term<S: Real>(predicted: [S; 3], target: [S; 3]) -> (S, [S; 3]) {
    let mut loss = S::zero();
    let mut grad = [S::zero(); 3];
    for c in 0..3 {
        let d = predicted[c] - target[c];
        loss = loss + d * d;
        grad[c] = S::of(2.0) * d;
    }
    (loss, grad)
}

/// Cross-entropy of the true class under the rendered distribution, with
/// the probability clamped into [PROB_CLAMP, 1] before the log. Returns the
/// gradient in the full probability vector (nonzero only at the true class).
fn semantic_term<S: Real>(probs: [S; 3], label: Label) -> (S, [S; 3]) {
    let p = probs[label as usize];
    let mut grad = [S::zero(); 3];
    let clamp = S::of(PROB_CLAMP);
    let (loss, g) = if p < clamp {
        (-clamp.ln(), S::zero())
    } else if p >= S::one() {
        (S::zero(), -S::one())
    } else {
        (-p.ln(), -S::one() / p)
    };
    grad[label as usize] = g;
    (loss, grad)
}

/// Loss of one rendered ray against its ground truth: squared color error
/// plus cross-entropy of the label distribution. Also returns the gradients
/// in the rendered color and label probabilities. Batch loss is the sum of
/// these over the rays.
pub fn ray_loss<S: Real>(
    render: &crate::semantic_field::RayRender<S>,
    target_color: [S; 3],
    target_label: Label,
) -> (LossTerms<S>, [S; 3], [S; 3]) {
    let (photometric, g_color) = photometric_term(render.color, target_color);
    let (semantic, g_probs) = semantic_term(render.label_probs, target_label);
    (
        LossTerms {
            photometric,
            semantic,
        },
        g_color,
        g_probs,
    )
}

/// Empty grids with the scale geometry the interaction encoder would
/// produce, for conditioning variants that skip it: the field still needs
/// the scale-0 box for ray clipping and position normalization.
fn geometry_volumes<S: Real>(
    volume: &SparseFeatureVolume<S>,
    config: &InteractionEncoderConfig,
) -> MultiScaleVolumes<S> {
    let mut dims = volume.dims;
    let mut voxel = volume.voxel_size;
    let scales = config.channels.map(|channels| {
        let g = SparseGrid::new_empty(volume.origin, voxel, dims, channels);
        dims = dims.map(|d| d.div_ceil(2));
        voxel = voxel * S::of(2.0);
        g
    });
    MultiScaleVolumes { scales }
}

/// Everything one iteration's forward and backward passes share: the input
/// view's feature map, the augmented conditioning volume with provenance
/// back to pre-augmentation rows, and the encoded (or geometry-only)
/// interaction scales.
struct PreparedIteration<S: Real> {
    fmap: FeatureMap<S>,
    enc_cache: Option<EncoderCache<S>>,
    /// Volume before augmentation; image gradients scatter at these
    /// positions, where the features were actually sampled.
    volume0: SparseFeatureVolume<S>,
    volume: SparseFeatureVolume<S>,
    /// row_map[r] = the `volume0` row that became `volume` row r.
    row_map: Vec<usize>,
    msv: MultiScaleVolumes<S>,
    icache: Option<EncodeCache<S>>,
}

fn prepare_iteration<S: Real>(
    model: &Model<S>,
    scene: &crate::scene::Scene<S>,
    input: &SceneView<S>,
    train_seed: u64,
    iteration: u64,
    it_seed: u64,
    want_grads: bool,
) -> Result<PreparedIteration<S>> {
    let (fmap, enc_cache) = if want_grads {
        let (f, c) = model.image_encoder.encode_with_cache(&input.image)?;
        (f, Some(c))
    } else {
        (model.image_encoder.encode(&input.image)?, None)
    };

    let mask = if model.conditioning.hand_only_volume() {
        let mut m = input.mask.clone();
        for flat in m.pixels_of(Label::Object as u8) {
            m.set(flat % m.width, flat / m.width, Label::Background as u8);
        }
        m
    } else {
        input.mask.clone()
    };

    let bounds = compute_bounds(&scene.hand, S::of(model.config.margin));
    let volume0 = assemble_volume(
        &scene.hand,
        &mask,
        &input.camera,
        &fmap,
        &model.codes,
        &bounds,
        S::of(model.config.voxel_size),
    )?;

    let (perturbed, map1) =
        perturb_object_entries_mapped(&volume0, S::of(model.config.sigma_noise), it_seed);
    let angles = random_rotation_angles::<S>(train_seed, iteration);
    let (volume, map2) = rotate_volume_mapped(&perturbed, angles);
    let row_map: Vec<usize> = map2.iter().map(|&r| map1[r]).collect();

    let (msv, icache) = if model.conditioning.use_interaction() {
        if want_grads {
            let (m, c) = model.interaction_encoder.encode_with_cache(&volume)?;
            (m, Some(c))
        } else {
            (model.interaction_encoder.encode(&volume)?, None)
        }
    } else {
        (geometry_volumes(&volume, &model.config.interaction), None)
    };

    Ok(PreparedIteration {
        fmap,
        enc_cache,
        volume0,
        volume,
        row_map,
        msv,
        icache,
    })
}

/// Runs one training iteration: samples the scene/view pair and the ray
/// batch, renders every ray, and (when `want_grads` is set) accumulates
/// gradients into the model. The caller zeroes gradients; this only adds.
/// Public so gradient audits can drive single iterations directly.
pub fn run_iteration<S: Real>(
    model: &mut Model<S>,
    data: &[SceneDataset<S>],
    config: &TrainConfig,
    iteration: u64,
    want_grads: bool,
) -> Result<LossTerms<S>> {
    let it_seed = derive_seed(config.seed, iteration);
    let mut plan = stream(config.seed, StreamTag::Iteration, iteration);
    let dataset = &data[plan.gen_range(0..data.len())];
    let n_views = dataset.views.len();
    debug_assert!(n_views >= 2, "training needs an input and a supervision view");
    let input_idx = plan.gen_range(0..n_views);
    let mut sup_idx = plan.gen_range(0..n_views - 1);
    if sup_idx >= input_idx {
        sup_idx += 1;
    }
    let input = &dataset.views[input_idx];
    let supervision = &dataset.views[sup_idx];

    let ratio = object_ratio_at(config, iteration);
    let rays = sample_rays(supervision, config.rays_per_image, ratio, it_seed)?;
    let prep = prepare_iteration(
        model,
        &dataset.scene,
        input,
        config.seed,
        iteration,
        it_seed,
        want_grads,
    )?;

    let background = dataset.scene.background;
    let volume_box = prep.msv.scales[0].world_box();
    let trunk_dim = model.head.trunk_input_dim();
    let mut fmap_grad = vec![S::zero(); if want_grads { prep.fmap.values.len() } else { 0 }];
    let mut d_scales = (want_grads && model.conditioning.use_interaction())
        .then(|| prep.msv.zero_grads());

    let mut photometric = S::zero();
    let mut semantic = S::zero();
    for (ray_idx, target) in rays.iter().enumerate() {
        let ray = supervision.camera.cast_ray(
            S::of(target.px as f64 + 0.5),
            S::of(target.py as f64 + 0.5),
        )?;
        let Some(clipped) = ray.clipped_to(&volume_box) else {
            // The ray misses the volume: the render is pure background and
            // carries no gradient, but its loss still counts.
            let miss = crate::semantic_field::RayRender::background(background);
            let (terms, _, _) = ray_loss(&miss, target.color, target.label);
            photometric = photometric + terms.photometric;
            semantic = semantic + terms.semantic;
            continue;
        };
        let mut jitter = stream(it_seed, StreamTag::RaySamples, ray_idx as u64);
        let mut samples =
            sample_along_ray_with(&clipped, config.samples_per_ray, true, &mut jitter)?;
        close_near_gap(&mut samples);
        let (trunk_in, dir_enc, points) = assemble_ray_inputs(
            &model.head,
            &prep.msv,
            &prep.fmap,
            &input.camera,
            &clipped,
            &samples.t,
        );
        let n = samples.len();
        let (outs, cache) = model.head.forward_batch_cached(trunk_in, dir_enc, n);
        let render = integrate_ray(&samples.t, &samples.delta, &outs, background);
        let (terms, g_color, g_probs) = ray_loss(&render, target.color, target.label);
        photometric = photometric + terms.photometric;
        semantic = semantic + terms.semantic;

        if !want_grads {
            continue;
        }
        let rg = integrate_ray_backward(&samples.delta, &outs, background, g_color, g_probs);
        let d_trunk = model
            .head
            .backward_batch(&cache, &rg.d_sigma, &rg.d_color, &rg.d_logits);
        if let Some((start, len)) = model.head.image_feature_span() {
            for (k, p) in points.iter().enumerate() {
                if let Ok((u, v)) = input.camera.project_any(*p) {
                    let row = &d_trunk[k * trunk_dim + start..k * trunk_dim + start + len];
                    prep.fmap.sample_backward(u, v, row, &mut fmap_grad);
                }
            }
        }
        if let (Some((start, len)), Some(ds)) =
            (model.head.interaction_span(), d_scales.as_mut())
        {
            for (k, p) in points.iter().enumerate() {
                let row = &d_trunk[k * trunk_dim + start..k * trunk_dim + start + len];
                query_interaction_backward(&prep.msv, *p, row, ds);
            }
        }
    }

    if want_grads {
        if let (Some(icache), Some(ds)) = (&prep.icache, d_scales.as_ref()) {
            let d_rows = model.interaction_encoder.backward(icache, ds);
            let feature_dim = prep.volume.feature_dim;
            let image_dim = model.config.image.channels;
            for r in 0..prep.volume.len() {
                let p0 = prep.volume0.position(prep.row_map[r]);
                if let Ok((u, v)) = input.camera.project_any(p0) {
                    let row = &d_rows[r * feature_dim..r * feature_dim + image_dim];
                    prep.fmap.sample_backward(u, v, row, &mut fmap_grad);
                }
            }
        }
        if let Some(enc_cache) = &prep.enc_cache {
            model.image_encoder.backward(enc_cache, &fmap_grad);
        }
    }

    Ok(LossTerms {
        photometric,
        semantic,
    })
}

/// Adam state flattened over the model's parameter visit order.
pub struct AdamState<S> {
    pub m: Vec<S>,
    pub v: Vec<S>,
    pub t: u64,
}

impl<S: Real> AdamState<S> {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![S::zero(); param_count],
            v: vec![S::zero(); param_count],
            t: 0,
        }
    }

    /// One Adam update from the gradients currently stored in the model.
    /// Moment math runs in f64 regardless of the model scalar.
    pub fn step(&mut self, model: &mut Model<S>, learning_rate: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t.min(i32::MAX as u64) as i32);
        let mut offset = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        model.visit_params("model", &mut |p| {
            for (i, (w, g)) in p.value.data.iter_mut().zip(p.grad.data.iter()).enumerate() {
                let g = g.f64();
                let j = offset + i;
                let mj = ADAM_BETA1 * m[j].f64() + (1.0 - ADAM_BETA1) * g;
                let vj = ADAM_BETA2 * v[j].f64() + (1.0 - ADAM_BETA2) * g * g;
                m[j] = S::of(mj);
                v[j] = S::of(vj);
                let update = learning_rate * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
                *w = *w - S::of(update);
            }
            offset += p.value.data.len();
        });
        assert_eq!(offset, m.len(), "optimizer state misaligned with model");
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: u64,
    pub photometric: f64,
    pub semantic: f64,
    pub learning_rate: f64,
    pub object_ratio: f64,
}

impl TrainRecord {
    /// Newline-free log line, stable for machine parsing.
    pub fn line(&self) -> String {
        format!(
            "iter={} photometric={:.6e} semantic={:.6e} lr={:.3e} object_ratio={:.4}",
            self.iteration, self.photometric, self.semantic, self.learning_rate, self.object_ratio
        )
    }
}

pub struct TrainOutcome<S: Real> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    pub records: Vec<TrainRecord>,
    pub iterations: u64,
}

/// Trains a fresh model on the given scenes. Iterations run strictly
/// sequentially; with a fixed config the result is bitwise deterministic.
/// `record_every` controls log density (a record is always kept for the
/// final iteration); zero keeps only the final record.
pub fn train<S: Real>(
    data: &[SceneDataset<S>],
    model_config: &ModelConfig,
    config: &TrainConfig,
    record_every: u64,
) -> Result<TrainOutcome<S>> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Parse {
            what: "training data".into(),
            detail: "no scenes".into(),
        });
    }
    for (i, ds) in data.iter().enumerate() {
        if ds.views.len() < 2 {
            return Err(Error::Parse {
                what: "training data".into(),
                detail: format!(
                    "scene {i} has {} views; training needs at least 2 (input and supervision)",
                    ds.views.len()
                ),
            });
        }
    }

    let mut model = Model::init(model_config, config.conditioning, config.seed);
    let mut adam = AdamState::new(model.param_count());
    let total = config.total_iterations();
    let mut records = Vec::new();
    for iteration in 0..total {
        model.zero_grads();
        let loss = run_iteration(&mut model, data, config, iteration, true)?;
        if !loss.total().f64().is_finite() {
            return Err(Error::DivergedTraining {
                iteration: iteration as usize,
            });
        }
        let lr = learning_rate_at(config, iteration);
        adam.step(&mut model, lr);
        if iteration + 1 == total || (record_every > 0 && iteration % record_every == 0) {
            records.push(TrainRecord {
                iteration,
                photometric: loss.photometric.f64(),
                semantic: loss.semantic.f64(),
                learning_rate: lr,
                object_ratio: object_ratio_at(config, iteration),
            });
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        records,
        iterations: total,
    })
}

// --- Checkpointing ---------------------------------------------------------

fn push_u16(buf: &mut Vec<u8>, x: u16) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, x: u32) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, x: u64) {
    buf.extend_from_slice(&x.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, x: f64) {
    buf.extend_from_slice(&x.to_bits().to_le_bytes());
}

struct CheckpointReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> CheckpointReader<'a> {
    fn corrupt(detail: impl Into<String>) -> Error {
        Error::Parse {
            what: "checkpoint".into(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Self::corrupt(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

fn write_train_config(buf: &mut Vec<u8>, c: &TrainConfig) {
    push_u64(buf, c.epochs as u64);
    push_u64(buf, c.iterations_per_epoch as u64);
    push_f64(buf, c.learning_rate);
    push_u64(buf, c.decay_epoch as u64);
    push_f64(buf, c.decay_factor);
    push_u64(buf, c.rays_per_image as u64);
    push_u64(buf, c.samples_per_ray as u64);
    push_f64(buf, c.object_ray_ratio_final);
    push_f64(buf, c.ramp_fraction);
    push_u64(buf, c.seed);
    buf.push(c.conditioning.id());
}

fn read_train_config(r: &mut CheckpointReader) -> Result<TrainConfig> {
    let epochs = r.u64()? as usize;
    let iterations_per_epoch = r.u64()? as usize;
    let learning_rate = r.f64()?;
    let decay_epoch = r.u64()? as usize;
    let decay_factor = r.f64()?;
    let rays_per_image = r.u64()? as usize;
    let samples_per_ray = r.u64()? as usize;
    let object_ray_ratio_final = r.f64()?;
    let ramp_fraction = r.f64()?;
    let seed = r.u64()?;
    let cid = r.u8()?;
    let conditioning = Conditioning::from_id(cid)
        .ok_or_else(|| CheckpointReader::corrupt(format!("unknown conditioning id {cid}")))?;
    Ok(TrainConfig {
        epochs,
        iterations_per_epoch,
        learning_rate,
        decay_epoch,
        decay_factor,
        rays_per_image,
        samples_per_ray,
        object_ray_ratio_final,
        ramp_fraction,
        seed,
        conditioning,
    })
}

fn write_model_config(buf: &mut Vec<u8>, c: &ModelConfig) {
    for h in c.image.hidden {
        push_u64(buf, h as u64);
    }
    push_u64(buf, c.image.channels as u64);
    for ch in c.interaction.channels {
        push_u64(buf, ch as u64);
    }
    push_u64(buf, c.hidden as u64);
    push_u64(buf, c.color_hidden as u64);
    push_f64(buf, c.voxel_size);
    push_f64(buf, c.margin);
    push_f64(buf, c.sigma_noise);
}

fn read_model_config(r: &mut CheckpointReader) -> Result<ModelConfig> {
    let mut image = ImageEncoderConfig::default();
    for h in image.hidden.iter_mut() {
        *h = r.u64()? as usize;
    }
    image.channels = r.u64()? as usize;
    let mut interaction = InteractionEncoderConfig::default();
    for ch in interaction.channels.iter_mut() {
        *ch = r.u64()? as usize;
    }
    Ok(ModelConfig {
        image,
        interaction,
        hidden: r.u64()? as usize,
        color_hidden: r.u64()? as usize,
        voxel_size: r.f64()?,
        margin: r.f64()?,
        sigma_noise: r.f64()?,
    })
}

/// Serializes the model, optimizer state, and the configs needed to resume.
/// Parameter payloads are stored as little-endian f32.
pub fn save_checkpoint<S: Real>(
    path: &Path,
    model: &mut Model<S>,
    adam: &AdamState<S>,
    config: &TrainConfig,
    iteration: u64,
) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    model.visit_params("model", &mut |p| {
        tensors.push((
            p.name.clone(),
            p.value.shape.clone(),
            p.value.data.iter().map(|x| x.f64() as f32).collect(),
        ));
    });
    let to_f32 = |v: &[S]| v.iter().map(|x| x.f64() as f32).collect::<Vec<f32>>();
    tensors.push(("adam.m".into(), vec![adam.m.len()], to_f32(&adam.m)));
    tensors.push(("adam.v".into(), vec![adam.v.len()], to_f32(&adam.v)));

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    buf.push(4); // scalar width of the payload
    write_train_config(&mut buf, config);
    write_model_config(&mut buf, &model.config);
    push_u64(&mut buf, model.codes.seed);
    push_u64(&mut buf, iteration);
    push_u64(&mut buf, adam.t);

    push_u32(&mut buf, tensors.len() as u32);
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        push_u16(&mut buf, name.len() as u16);
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &d in shape {
            push_u64(&mut buf, d as u64);
        }
        push_u64(&mut buf, offset);
        offset += data.len() as u64;
    }
    push_u64(&mut buf, offset);
    for (_, _, data) in &tensors {
        for &x in data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub struct LoadedCheckpoint<S: Real> {
    pub model: Model<S>,
    pub adam: AdamState<S>,
    pub config: TrainConfig,
    pub iteration: u64,
}

/// Reads a checkpoint back, rebuilding the model and overwriting every
/// parameter by name. Missing or reshaped tensors are errors.
pub fn load_checkpoint<S: Real>(path: &Path) -> Result<LoadedCheckpoint<S>> {
    let bytes = fs::read(path)?;
    let mut r = CheckpointReader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointReader::corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointReader::corrupt(format!(
            "unsupported version {version}"
        )));
    }
    let width = r.u8()?;
    if width != 4 {
        return Err(CheckpointReader::corrupt(format!(
            "unsupported scalar width {width}"
        )));
    }
    let config = read_train_config(&mut r)?;
    let model_config = read_model_config(&mut r)?;
    let code_seed = r.u64()?;
    let iteration = r.u64()?;
    let adam_t = r.u64()?;

    let n_tensors = r.u32()? as usize;
    let mut directory = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointReader::corrupt("tensor name is not utf-8"))?
            .to_string();
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let offset = r.u64()? as usize;
        directory.push((name, shape, offset));
    }
    let payload_len = r.u64()? as usize;
    let payload_bytes = payload_len
        .checked_mul(4)
        .ok_or_else(|| CheckpointReader::corrupt("payload length overflows"))?;
    let payload = r.take(payload_bytes)?;
    let float_at = |i: usize| f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());

    let mut model = Model::<S>::init(&model_config, config.conditioning, config.seed);
    model.codes = CodeBook::new(code_seed);
    let lookup = |name: &str| directory.iter().find(|(n, _, _)| n == name);
    let mut missing: Option<Error> = None;
    let mut matched = 0usize;
    model.visit_params("model", &mut |p| {
        if missing.is_some() {
            return;
        }
        let Some((_, shape, offset)) = lookup(&p.name) else {
            missing = Some(CheckpointReader::corrupt(format!(
                "missing tensor {}",
                p.name
            )));
            return;
        };
        if *shape != p.value.shape {
            missing = Some(CheckpointReader::corrupt(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name, shape, p.value.shape
            )));
            return;
        }
        let total = p.value.data.len();
        if offset + total > payload_len {
            missing = Some(CheckpointReader::corrupt(format!(
                "tensor {} overruns the payload",
                p.name
            )));
            return;
        }
        for (i, w) in p.value.data.iter_mut().enumerate() {
            *w = S::of(float_at(offset + i) as f64);
        }
        matched += 1;
    });
    if let Some(e) = missing {
        return Err(e);
    }

    let n_params = model.param_count();
    let mut adam = AdamState::<S>::new(n_params);
    adam.t = adam_t;
    for (field, dst) in [("adam.m", &mut adam.m), ("adam.v", &mut adam.v)] {
        let Some((_, shape, offset)) = lookup(field) else {
            return Err(CheckpointReader::corrupt(format!("missing tensor {field}")));
        };
        if *shape != [n_params] {
            return Err(CheckpointReader::corrupt(format!(
                "tensor {field} has shape {shape:?}, expected [{n_params}]"
            )));
        }
        if offset + n_params > payload_len {
            return Err(CheckpointReader::corrupt(format!(
                "tensor {field} overruns the payload"
            )));
        }
        for (i, x) in dst.iter_mut().enumerate() {
            *x = S::of(float_at(offset + i) as f64);
        }
    }
    if matched + 2 != n_tensors {
        return Err(CheckpointReader::corrupt(format!(
            "checkpoint holds {n_tensors} tensors, model consumed {}",
            matched + 2
        )));
    }

    Ok(LoadedCheckpoint {
        model,
        adam,
        config,
        iteration,
    })
}

// --- Gradient audit --------------------------------------------------------

/// Relative-error denominator floor for [`gradient_check`]: differences are
/// measured against max(|analytic|, |finite difference|, this), so
/// vanishing gradients report their absolute error instead of noise ratios.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

const FD_EPS: f64 = 1e-5;

/// Stages [`gradient_check`] can audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedComponent {
    ImageEncoder,
    InteractionEncoder,
    FieldHead,
    EndToEndRay,
}

impl CheckedComponent {
    pub const ALL: [CheckedComponent; 4] = [
        CheckedComponent::ImageEncoder,
        CheckedComponent::InteractionEncoder,
        CheckedComponent::FieldHead,
        CheckedComponent::EndToEndRay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedComponent::ImageEncoder => "image-encoder",
            CheckedComponent::InteractionEncoder => "interaction-encoder",
            CheckedComponent::FieldHead => "field-head",
            CheckedComponent::EndToEndRay => "end-to-end-ray",
        }
    }

    pub fn parse(s: &str) -> Option<CheckedComponent> {
        CheckedComponent::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Outcome of one finite-difference audit.
#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub component: CheckedComponent,
    pub parameters_checked: usize,
    pub max_rel_error: f64,
}

fn add_flat<M: Parameterized<f64>>(target: &mut M, flat: usize, delta: f64) {
    let mut offset = 0;
    target.visit_params("", &mut |p| {
        let len = p.value.data.len();
        if flat >= offset && flat < offset + len {
            p.value.data[flat - offset] += delta;
        }
        offset += len;
    });
}

fn flat_grads<M: Parameterized<f64>>(target: &mut M) -> Vec<f64> {
    let mut grads = Vec::new();
    target.visit_params("", &mut |p| grads.extend_from_slice(&p.grad.data));
    grads
}

/// Central-difference sweep over every `stride`-th parameter, comparing
/// against the analytic gradients snapshot.
fn fd_sweep<M: Parameterized<f64>>(
    target: &mut M,
    analytic: &[f64],
    stride: usize,
    mut loss: impl FnMut(&mut M) -> f64,
) -> (usize, f64) {
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    let mut flat = 0;
    while flat < analytic.len() {
        add_flat(target, flat, FD_EPS);
        let up = loss(target);
        add_flat(target, flat, -2.0 * FD_EPS);
        let down = loss(target);
        add_flat(target, flat, FD_EPS);
        let fd = (up - down) / (2.0 * FD_EPS);
        let a = analytic[flat];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        max_rel = max_rel.max(rel);
        checked += 1;
        flat += stride;
    }
    (checked, max_rel)
}

fn check_image_encoder(seed: u64) -> Result<GradReport> {
    let config = ImageEncoderConfig {
        hidden: [2, 3, 3],
        channels: 4,
    };
    let mut enc = ImageEncoder::<f64>::init(config, &mut stream(seed, StreamTag::WeightInit, 90));
    let mut rng = stream(seed, StreamTag::Generic, 90);
    let mut image = crate::raster::RgbImage::new(8, 8);
    for y in 0..8 {
        for x in 0..8 {
            image.set(x, y, [rng.gen(), rng.gen(), rng.gen()]);
        }
    }
    let probe = enc.encode(&image)?;
    let readout: Vec<f64> = (0..probe.values.len()).map(|_| rng.gen::<f64>() - 0.5).collect();

    enc.zero_grads();
    let (_, cache) = enc.encode_with_cache(&image)?;
    enc.backward(&cache, &readout);
    let analytic = flat_grads(&mut enc);
    let (checked, max_rel) = fd_sweep(&mut enc, &analytic, 1, |e| {
        let fmap = e.encode(&image).unwrap();
        fmap.values.iter().zip(&readout).map(|(a, b)| a * b).sum()
    });
    Ok(GradReport {
        component: CheckedComponent::ImageEncoder,
        parameters_checked: checked,
        max_rel_error: max_rel,
    })
}

fn check_interaction_encoder(seed: u64) -> Result<GradReport> {
    let config = InteractionEncoderConfig { channels: [2, 2, 2] };
    let input_dim = 4;
    let mut enc =
        InteractionEncoder::<f64>::init(input_dim, config, &mut stream(seed, StreamTag::WeightInit, 91));
    let mut rng = stream(seed, StreamTag::Generic, 91);
    let voxel = 0.02;
    let mut grid = SparseGrid::new_empty(
        crate::math::vec3(-0.05, -0.05, -0.05),
        voxel,
        [5, 5, 5],
        input_dim,
    );
    for coord in [[1, 1, 1], [2, 1, 1], [1, 2, 2], [3, 3, 1], [2, 3, 2], [1, 3, 3]] {
        let values: Vec<f64> = (0..input_dim).map(|_| rng.gen::<f64>() - 0.5).collect();
        grid.push(coord, &values);
    }
    let points = [
        grid.origin + crate::math::vec3(1.6, 1.4, 1.2) * voxel,
        grid.origin + crate::math::vec3(2.2, 2.6, 1.8) * voxel,
    ];
    let dim = config.interaction_dim();
    let readout: Vec<f64> = (0..points.len() * dim).map(|_| rng.gen::<f64>() - 0.5).collect();

    enc.zero_grads();
    let (msv, cache) = enc.encode_grid_with_cache(&grid)?;
    let mut d_scales = msv.zero_grads();
    for (i, p) in points.iter().enumerate() {
        query_interaction_backward(&msv, *p, &readout[i * dim..(i + 1) * dim], &mut d_scales);
    }
    enc.backward(&cache, &d_scales);
    let analytic = flat_grads(&mut enc);
    let (checked, max_rel) = fd_sweep(&mut enc, &analytic, 1, |e| {
        let msv = e.encode_grid(&grid).unwrap();
        let mut acc = 0.0;
        for (i, p) in points.iter().enumerate() {
            let q = crate::interaction_encoder::query_interaction(&msv, *p);
            acc += q
                .iter()
                .zip(&readout[i * dim..(i + 1) * dim])
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        acc
    });
    Ok(GradReport {
        component: CheckedComponent::InteractionEncoder,
        parameters_checked: checked,
        max_rel_error: max_rel,
    })
}

fn check_field_head(seed: u64) -> Result<GradReport> {
    let config = FieldHeadConfig {
        hidden: 12,
        color_hidden: 6,
        use_image_feature: true,
        use_interaction: true,
    };
    let (image_dim, interaction_dim, batch) = (3, 4, 3);
    let mut head = FieldHead::<f64>::init(
        image_dim,
        interaction_dim,
        config,
        &mut stream(seed, StreamTag::WeightInit, 92),
    );
    let mut rng = stream(seed, StreamTag::Generic, 92);
    let trunk_in: Vec<f64> = (0..batch * head.trunk_input_dim())
        .map(|_| 2.0 * rng.gen::<f64>() - 1.0)
        .collect();
    let dir_enc: Vec<f64> = (0..batch * head.dir_input_dim())
        .map(|_| 2.0 * rng.gen::<f64>() - 1.0)
        .collect();
    // Linear readout weights over (sigma, color, logits) per sample: the
    // readout gradient is the weights themselves.
    let w_sigma: Vec<f64> = (0..batch).map(|_| rng.gen::<f64>() - 0.5).collect();
    let w_color: Vec<f64> = (0..batch * 3).map(|_| rng.gen::<f64>() - 0.5).collect();
    let w_logits: Vec<f64> = (0..batch * 3).map(|_| rng.gen::<f64>() - 0.5).collect();
    let readout = |head: &mut FieldHead<f64>| {
        let outs = head.forward_batch(&trunk_in, &dir_enc, batch);
        let mut acc = 0.0;
        for (i, o) in outs.iter().enumerate() {
            acc += w_sigma[i] * o.sigma;
            for c in 0..3 {
                acc += w_color[i * 3 + c] * o.color[c] + w_logits[i * 3 + c] * o.label_logits[c];
            }
        }
        acc
    };

    head.zero_grads();
    let (_, cache) = head.forward_batch_cached(trunk_in.clone(), dir_enc.clone(), batch);
    head.backward_batch(&cache, &w_sigma, &w_color, &w_logits);
    let analytic = flat_grads(&mut head);
    let (checked, max_rel) = fd_sweep(&mut head, &analytic, 1, readout);
    Ok(GradReport {
        component: CheckedComponent::FieldHead,
        parameters_checked: checked,
        max_rel_error: max_rel,
    })
}

fn check_end_to_end(seed: u64) -> Result<GradReport> {
    let spec = crate::scene::ObjectSpec::<f64>::sphere(0.03);
    let scene = crate::scene::generate_grasp_scene(&spec, 0, derive_seed(seed, 1))?;
    let data = [crate::scene::make_dataset(&scene, 2, 24, 24, derive_seed(seed, 2))?];
    let model_config = ModelConfig {
        image: ImageEncoderConfig {
            hidden: [2, 2, 3],
            channels: 3,
        },
        interaction: InteractionEncoderConfig { channels: [2, 2, 2] },
        hidden: 8,
        color_hidden: 4,
        voxel_size: 0.012,
        margin: 0.06,
        sigma_noise: DEFAULT_SIGMA_NOISE,
    };
    // A late iteration, so the object-ray ramp has finished and the batch
    // is guaranteed to include an object ray with full gradient flow.
    let iteration = 9;
    let config = TrainConfig {
        epochs: 1,
        iterations_per_epoch: 10,
        rays_per_image: 2,
        samples_per_ray: 4,
        seed,
        conditioning: Conditioning::Full,
        ..TrainConfig::default()
    };
    let mut model = Model::<f64>::init(&model_config, config.conditioning, seed);
    model.zero_grads();
    run_iteration(&mut model, &data, &config, iteration, true)?;
    let analytic = flat_grads(&mut model);
    let stride = (analytic.len() / 400).max(1);
    let (checked, max_rel) = fd_sweep(&mut model, &analytic, stride, |m| {
        run_iteration(m, &data, &config, iteration, false)
            .unwrap()
            .total()
    });
    Ok(GradReport {
        component: CheckedComponent::EndToEndRay,
        parameters_checked: checked,
        max_rel_error: max_rel,
    })
}

/// Compares analytic gradients against central finite differences for one
/// pipeline stage, on small deterministic fixtures. Reports the worst
/// relative error (floored denominators, see [`GRAD_CHECK_FLOOR`]) over the
/// parameters it visits.
pub fn gradient_check(component: CheckedComponent, seed: u64) -> Result<GradReport> {
    match component {
        CheckedComponent::ImageEncoder => check_image_encoder(seed),
        CheckedComponent::InteractionEncoder => check_interaction_encoder(seed),
        CheckedComponent::FieldHead => check_field_head(seed),
        CheckedComponent::EndToEndRay => check_end_to_end(seed),
    }
}
