//! Semantic radiance field over the reconstruction volume: a small MLP head
//! maps an encoded position, the image feature at its projection, and the
//! multi-scale interaction feature to density, view-dependent color, and
//! per-class logits; a quadrature folds samples along a ray into pixel
//! color, a label distribution, expected depth, and opacity.
//!
//! Density and logits depend only on position (the view direction enters the
//! color branch alone), so geometry and semantics are view-consistent by
//! construction. Sampling is single-pass stratified; there is no
//! hierarchical resampling stage.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feature_volume::sample_projection;
use crate::geometry::{sample_along_ray_with, Camera, PositionalEncoding, Ray, RaySamples};
use crate::image_encoder::FeatureMap;
use crate::interaction_encoder::{query_interaction_into, MultiScaleVolumes};
use crate::math::Vec3;
use crate::nn::{
    sigmoid, silu, silu_grad, softmax3, softmax3_backward, softplus, softplus_grad, Affine,
    Parameterized, ParamRef,
};
use crate::raster::{DepthMap, RgbImage};
use crate::rng::{stream, Stream, StreamTag};
use crate::scalar::Real;
use crate::scene::default_background;

/// Depth samples per ray when the caller does not override.
pub const DEFAULT_RAY_SAMPLES: usize = 64;

/// Shift applied to the density pre-activation: sigma = softplus(u - 1), so
/// a freshly initialized head (u near zero) starts almost transparent.
const SIGMA_SHIFT: f64 = 1.0;

/// Opacity floor for the expected-depth normalization.
const DEPTH_EPS: f64 = 1e-6;

/// Which conditioning blocks the field consumes, and the trunk widths.
/// Dropping a block removes it from the input layout entirely (the head is
/// built without those weights), which is how conditioning ablations run.
#[derive(Clone, Copy, Debug)]
pub struct FieldHeadConfig {
    pub hidden: usize,
    pub color_hidden: usize,
    pub use_image_feature: bool,
    pub use_interaction: bool,
}

impl Default for FieldHeadConfig {
    fn default() -> Self {
        FieldHeadConfig {
            hidden: 128,
            color_hidden: 64,
            use_image_feature: true,
            use_interaction: true,
        }
    }
}

/// Field output at one point: non-negative density, color in [0, 1]^3, and
/// raw class logits (softmax is deferred to the quadrature).
#[derive(Clone, Copy, Debug)]
pub struct SemanticFieldSample<S> {
    pub sigma: S,
    pub color: [S; 3],
    pub label_logits: [S; 3],
}

/// The field MLP. A two-layer trunk over [encoded position | image feature |
/// interaction feature] feeds three heads: a scalar density, three class
/// logits, and a color branch that alone sees the encoded view direction.
#[derive(Clone, Debug)]
pub struct FieldHead<S> {
    pub config: FieldHeadConfig,
    pub image_dim: usize,
    pub interaction_dim: usize,
    pub pe_x: PositionalEncoding,
    pub pe_d: PositionalEncoding,
    pub trunk1: Affine<S>,
    pub trunk2: Affine<S>,
    pub sigma: Affine<S>,
    pub label: Affine<S>,
    pub color1: Affine<S>,
    pub color2: Affine<S>,
}

/// Intermediate activations of one forward batch, kept for the backward
/// pass.
#[derive(Clone, Debug)]
pub struct HeadCache<S> {
    n: usize,
    trunk_in: Vec<S>,
    pre1: Vec<S>,
    h1: Vec<S>,
    pre2: Vec<S>,
    h2: Vec<S>,
    sigma_pre: Vec<S>,
    color_in: Vec<S>,
    color_pre1: Vec<S>,
    color_h1: Vec<S>,
    color: Vec<S>,
}

impl<S: Real> FieldHead<S> {
    pub fn init(
        image_dim: usize,
        interaction_dim: usize,
        config: FieldHeadConfig,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let pe_x = PositionalEncoding::for_coordinates();
        let pe_d = PositionalEncoding::for_directions();
        let mut trunk_dim = pe_x.output_dim(3);
        if config.use_image_feature {
            trunk_dim += image_dim;
        }
        if config.use_interaction {
            trunk_dim += interaction_dim;
        }
        let color_in_dim = config.hidden + pe_d.output_dim(3);
        FieldHead {
            config,
            image_dim,
            interaction_dim,
            trunk1: Affine::init(trunk_dim, config.hidden, 2.0, rng),
            trunk2: Affine::init(config.hidden, config.hidden, 2.0, rng),
            sigma: Affine::init(config.hidden, 1, 1.0, rng),
            label: Affine::init(config.hidden, 3, 1.0, rng),
            color1: Affine::init(color_in_dim, config.color_hidden, 2.0, rng),
            color2: Affine::init(config.color_hidden, 3, 1.0, rng),
            pe_x,
            pe_d,
        }
    }

    /// Width of one assembled trunk row.
    pub fn trunk_input_dim(&self) -> usize {
        self.trunk1.input_dim
    }

    /// Width of one encoded-direction row.
    pub fn dir_input_dim(&self) -> usize {
        self.pe_d.output_dim(3)
    }

    /// (start, len) of the image-feature span inside a trunk row, when that
    /// block is enabled.
    pub fn image_feature_span(&self) -> Option<(usize, usize)> {
        self.config
            .use_image_feature
            .then(|| (self.pe_x.output_dim(3), self.image_dim))
    }

    /// (start, len) of the interaction-feature span inside a trunk row, when
    /// that block is enabled.
    pub fn interaction_span(&self) -> Option<(usize, usize)> {
        self.config.use_interaction.then(|| {
            let mut start = self.pe_x.output_dim(3);
            if self.config.use_image_feature {
                start += self.image_dim;
            }
            (start, self.interaction_dim)
        })
    }

    /// Runs `n` assembled rows through the head.
    pub fn forward_batch(
        &self,
        trunk_in: &[S],
        dir_enc: &[S],
        n: usize,
    ) -> Vec<SemanticFieldSample<S>> {
        self.forward_batch_cached(trunk_in.to_vec(), dir_enc.to_vec(), n)
            .0
    }

    /// Forward pass that keeps every intermediate needed by
    /// [`FieldHead::backward_batch`].
    pub fn forward_batch_cached(
        &self,
        trunk_in: Vec<S>,
        dir_enc: Vec<S>,
        n: usize,
    ) -> (Vec<SemanticFieldSample<S>>, HeadCache<S>) {
        assert_eq!(trunk_in.len(), n * self.trunk_input_dim());
        assert_eq!(dir_enc.len(), n * self.dir_input_dim());
        let hid = self.config.hidden;
        let dd = self.dir_input_dim();

        let mut pre1 = Vec::new();
        self.trunk1.forward(&trunk_in, n, &mut pre1);
        let h1: Vec<S> = pre1.iter().map(|&v| silu(v)).collect();
        let mut pre2 = Vec::new();
        self.trunk2.forward(&h1, n, &mut pre2);
        let h2: Vec<S> = pre2.iter().map(|&v| silu(v)).collect();

        let mut sigma_pre = Vec::new();
        self.sigma.forward(&h2, n, &mut sigma_pre);
        let shift = S::of(SIGMA_SHIFT);
        for v in &mut sigma_pre {
            *v = *v - shift;
        }
        let mut logits = Vec::new();
        self.label.forward(&h2, n, &mut logits);

        let mut color_in = Vec::with_capacity(n * (hid + dd));
        for r in 0..n {
            color_in.extend_from_slice(&h2[r * hid..(r + 1) * hid]);
            color_in.extend_from_slice(&dir_enc[r * dd..(r + 1) * dd]);
        }
        let mut color_pre1 = Vec::new();
        self.color1.forward(&color_in, n, &mut color_pre1);
        let color_h1: Vec<S> = color_pre1.iter().map(|&v| silu(v)).collect();
        let mut color_pre2 = Vec::new();
        self.color2.forward(&color_h1, n, &mut color_pre2);
        let color: Vec<S> = color_pre2.iter().map(|&v| sigmoid(v)).collect();

        let samples = (0..n)
            .map(|r| SemanticFieldSample {
                sigma: softplus(sigma_pre[r]),
                color: [color[r * 3], color[r * 3 + 1], color[r * 3 + 2]],
                label_logits: [logits[r * 3], logits[r * 3 + 1], logits[r * 3 + 2]],
            })
            .collect();
        let cache = HeadCache {
            n,
            trunk_in,
            pre1,
            h1,
            pre2,
            h2,
            sigma_pre,
            color_in,
            color_pre1,
            color_h1,
            color,
        };
        (samples, cache)
    }

    /// Accumulates parameter gradients from per-sample output gradients and
    /// returns the gradient with respect to the assembled trunk rows (the
    /// spans for the image and interaction blocks flow back to their
    /// encoders; the positional span has nothing trainable behind it).
    pub fn backward_batch(
        &mut self,
        cache: &HeadCache<S>,
        d_sigma: &[S],
        d_color: &[S],
        d_logits: &[S],
    ) -> Vec<S> {
        let n = cache.n;
        assert_eq!(d_sigma.len(), n);
        assert_eq!(d_color.len(), n * 3);
        assert_eq!(d_logits.len(), n * 3);
        let hid = self.config.hidden;
        let cin = hid + self.dir_input_dim();

        let d_cpre2: Vec<S> = (0..n * 3)
            .map(|i| d_color[i] * cache.color[i] * (S::one() - cache.color[i]))
            .collect();
        let mut d_ch1 = vec![S::zero(); n * self.config.color_hidden];
        self.color2
            .backward(&cache.color_h1, &d_cpre2, n, Some(&mut d_ch1));
        let d_cpre1: Vec<S> = d_ch1
            .iter()
            .zip(&cache.color_pre1)
            .map(|(&g, &p)| g * silu_grad(p))
            .collect();
        let mut d_color_in = vec![S::zero(); cache.color_in.len()];
        self.color1
            .backward(&cache.color_in, &d_cpre1, n, Some(&mut d_color_in));

        // h2 feeds the color branch (first `hid` columns of its input) and
        // both the density and label heads.
        let mut d_h2 = vec![S::zero(); n * hid];
        for r in 0..n {
            d_h2[r * hid..(r + 1) * hid].copy_from_slice(&d_color_in[r * cin..r * cin + hid]);
        }
        let d_spre: Vec<S> = d_sigma
            .iter()
            .zip(&cache.sigma_pre)
            .map(|(&g, &p)| g * softplus_grad(p))
            .collect();
        self.sigma.backward(&cache.h2, &d_spre, n, Some(&mut d_h2));
        self.label.backward(&cache.h2, d_logits, n, Some(&mut d_h2));

        let d_pre2: Vec<S> = d_h2
            .iter()
            .zip(&cache.pre2)
            .map(|(&g, &p)| g * silu_grad(p))
            .collect();
        let mut d_h1 = vec![S::zero(); n * hid];
        self.trunk2.backward(&cache.h1, &d_pre2, n, Some(&mut d_h1));
        let d_pre1: Vec<S> = d_h1
            .iter()
            .zip(&cache.pre1)
            .map(|(&g, &p)| g * silu_grad(p))
            .collect();
        let mut d_trunk_in = vec![S::zero(); cache.trunk_in.len()];
        self.trunk1
            .backward(&cache.trunk_in, &d_pre1, n, Some(&mut d_trunk_in));
        d_trunk_in
    }
}

impl<S: Real> Parameterized<S> for FieldHead<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        self.trunk1.visit_params(&format!("{prefix}.trunk1"), f);
        self.trunk2.visit_params(&format!("{prefix}.trunk2"), f);
        self.sigma.visit_params(&format!("{prefix}.sigma"), f);
        self.label.visit_params(&format!("{prefix}.label"), f);
        self.color1.visit_params(&format!("{prefix}.color1"), f);
        self.color2.visit_params(&format!("{prefix}.color2"), f);
    }
}

fn check_block<S>(
    name: &str,
    enabled: bool,
    block: Option<&[S]>,
    expected_dim: usize,
) -> Result<()> {
    match (enabled, block) {
        (true, None) => Err(Error::MaskMismatch {
            what: format!("{name} feature required but absent"),
        }),
        (false, Some(_)) => Err(Error::MaskMismatch {
            what: format!("{name} feature provided but disabled"),
        }),
        (true, Some(b)) if b.len() != expected_dim => Err(Error::ShapeMismatch {
            expected: format!("{expected_dim} {name}-feature channels"),
            got: format!("{}", b.len()),
        }),
        _ => Ok(()),
    }
}

/// Evaluates the field at one point. `x` is the position already mapped to
/// the [-1, 1] encoding domain (the grid's `normalize`); `d` need not be
/// unit. The conditioning blocks must match the head's configuration.
pub fn eval_field<S: Real>(
    head: &FieldHead<S>,
    x: Vec3<S>,
    d: Vec3<S>,
    image_feature: Option<&[S]>,
    interaction: Option<&[S]>,
) -> Result<SemanticFieldSample<S>> {
    check_block("image", head.config.use_image_feature, image_feature, head.image_dim)?;
    check_block(
        "interaction",
        head.config.use_interaction,
        interaction,
        head.interaction_dim,
    )?;
    let mut trunk_in = Vec::with_capacity(head.trunk_input_dim());
    head.pe_x.encode_into(&x.to_array(), &mut trunk_in);
    if let Some(b) = image_feature {
        trunk_in.extend_from_slice(b);
    }
    if let Some(b) = interaction {
        trunk_in.extend_from_slice(b);
    }
    let mut dir_enc = Vec::with_capacity(head.dir_input_dim());
    head.pe_d
        .encode_into(&d.normalized().to_array(), &mut dir_enc);
    Ok(head.forward_batch(&trunk_in, &dir_enc, 1)[0])
}

/// What one ray integrates to. `label_probs` is a distribution over
/// (background, hand, object) in that class order; `depth` is the expectation
/// of the sample parameter under the quadrature weights.
#[derive(Clone, Copy, Debug)]
pub struct RayRender<S> {
    pub color: [S; 3],
    pub label_probs: [S; 3],
    pub depth: S,
    pub opacity: S,
}

impl<S: Real> RayRender<S> {
    /// Render of a ray that never enters the volume: pure background.
    pub fn background(background: [S; 3]) -> Self {
        RayRender {
            color: background,
            label_probs: [S::one(), S::zero(), S::zero()],
            depth: S::zero(),
            opacity: S::zero(),
        }
    }
}

/// Per-sample gradients produced by [`integrate_ray_backward`].
#[derive(Clone, Debug)]
pub struct RayGrads<S> {
    pub d_sigma: Vec<S>,
    pub d_color: Vec<S>,
    pub d_logits: Vec<S>,
}

/// Quadrature over ordered samples: alpha_k = 1 - exp(-sigma_k delta_k),
/// transmittance T_k multiplies down the ray, and the leftover T_n falls to
/// the dataset background (color and the background class alike), so the
/// label distribution always sums to one.
pub fn integrate_ray<S: Real>(
    t: &[S],
    delta: &[S],
    samples: &[SemanticFieldSample<S>],
    background: [S; 3],
) -> RayRender<S> {
    debug_assert_eq!(t.len(), samples.len());
    debug_assert_eq!(delta.len(), samples.len());
    let mut acc = S::zero();
    let mut t_prev = S::one();
    let mut color = [S::zero(); 3];
    let mut probs = [S::zero(); 3];
    let mut depth = S::zero();
    for (k, s) in samples.iter().enumerate() {
        acc += s.sigma * delta[k];
        let t_next = (-acc).exp();
        let w = t_prev - t_next;
        let p = softmax3(s.label_logits);
        for i in 0..3 {
            color[i] += w * s.color[i];
            probs[i] += w * p[i];
        }
        depth += w * t[k];
        t_prev = t_next;
    }
    let t_n = t_prev;
    for i in 0..3 {
        color[i] += t_n * background[i];
    }
    probs[0] += t_n;
    let opacity = S::one() - t_n;
    RayRender {
        color,
        label_probs: probs,
        depth: depth / opacity.max(S::of(DEPTH_EPS)),
        opacity,
    }
}

/// Gradients of a scalar loss through [`integrate_ray`], given its gradient
/// with respect to the rendered color and label distribution. The depth
/// output carries no gradient (the loss never reads it).
pub fn integrate_ray_backward<S: Real>(
    delta: &[S],
    samples: &[SemanticFieldSample<S>],
    background: [S; 3],
    g_color: [S; 3],
    g_probs: [S; 3],
) -> RayGrads<S> {
    let n = samples.len();
    debug_assert_eq!(delta.len(), n);

    // Forward recompute of the weights.
    let mut trans = vec![S::one(); n + 1];
    let mut soft = Vec::with_capacity(n);
    let mut acc = S::zero();
    for (k, s) in samples.iter().enumerate() {
        acc += s.sigma * delta[k];
        trans[k + 1] = (-acc).exp();
        soft.push(softmax3(s.label_logits));
    }
    let t_n = trans[n];
    let dot3 = |a: [S; 3], b: [S; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let r_tail = dot3(g_color, background) + g_probs[0];

    let mut d_sigma = vec![S::zero(); n];
    let mut d_color = vec![S::zero(); n * 3];
    let mut d_logits = vec![S::zero(); n * 3];
    // Each sigma_k scales everything downstream: raising it grows w_k at the
    // expense of every later weight and of the leftover transmittance, so
    // d a_k = T_{k+1} r_k - sum_{m>k} w_m r_m - T_n r_tail, accumulated as a
    // reverse suffix sum (a_k = sigma_k delta_k).
    let mut suffix = S::zero();
    for k in (0..n).rev() {
        let w = trans[k] - trans[k + 1];
        let r_k = dot3(g_color, samples[k].color) + dot3(g_probs, soft[k]);
        let da = trans[k + 1] * r_k - suffix - t_n * r_tail;
        d_sigma[k] = delta[k] * da;
        for i in 0..3 {
            d_color[k * 3 + i] = w * g_color[i];
        }
        let dl = softmax3_backward(soft[k], [w * g_probs[0], w * g_probs[1], w * g_probs[2]]);
        d_logits[k * 3..k * 3 + 3].copy_from_slice(&dl);
        suffix += w * r_k;
    }
    RayGrads {
        d_sigma,
        d_color,
        d_logits,
    }
}

/// Extends the first sample's interval back to the ray's near bound so the
/// deltas cover the whole clipped segment; with this the quadrature's total
/// optical depth for constant sigma is exactly sigma * (far - near).
pub fn close_near_gap<S: Real>(samples: &mut RaySamples<S>) {
    if let (Some(&t0), Some(d0)) = (samples.t.first(), samples.delta.first_mut()) {
        *d0 = *d0 + (t0 - samples.near);
    }
}

/// Builds the per-sample head inputs for points `ray.at(ts[k])`: encoded
/// normalized position, the image feature sampled at each point's projection
/// into `camera_in`, and the trilinear interaction feature, laid out as the
/// head's configuration expects. Also returns the world points (the training
/// pass scatters gradients back through them) and the shared encoded view
/// direction repeated per row.
pub fn assemble_ray_inputs<S: Real>(
    head: &FieldHead<S>,
    volumes: &MultiScaleVolumes<S>,
    fmap: &FeatureMap<S>,
    camera_in: &Camera<S>,
    ray: &Ray<S>,
    ts: &[S],
) -> (Vec<S>, Vec<S>, Vec<Vec3<S>>) {
    let n = ts.len();
    let grid0 = &volumes.scales[0];
    let mut trunk_in = Vec::with_capacity(n * head.trunk_input_dim());
    let mut points = Vec::with_capacity(n);
    let mut img_buf = vec![S::zero(); head.image_dim];
    let mut inter_buf = vec![S::zero(); head.interaction_dim];
    for &t in ts {
        let p = ray.at(t);
        points.push(p);
        let xn = grid0.normalize(p);
        head.pe_x.encode_into(&xn.to_array(), &mut trunk_in);
        if head.config.use_image_feature {
            sample_projection(camera_in, fmap, p, &mut img_buf);
            trunk_in.extend_from_slice(&img_buf);
        }
        if head.config.use_interaction {
            query_interaction_into(volumes, p, &mut inter_buf);
            trunk_in.extend_from_slice(&inter_buf);
        }
    }
    let mut dir_row = Vec::with_capacity(head.dir_input_dim());
    head.pe_d
        .encode_into(&ray.direction.normalized().to_array(), &mut dir_row);
    let mut dir_enc = Vec::with_capacity(n * dir_row.len());
    for _ in 0..n {
        dir_enc.extend_from_slice(&dir_row);
    }
    (trunk_in, dir_enc, points)
}

/// Renders one ray with an explicit sample-jitter stream, so callers can
/// give every pixel its own stream.
pub fn render_ray_with<S: Real>(
    head: &FieldHead<S>,
    volumes: &MultiScaleVolumes<S>,
    fmap: &FeatureMap<S>,
    camera_in: &Camera<S>,
    ray: &Ray<S>,
    n_samples: usize,
    background: [S; 3],
    stratified: bool,
    rng: &mut Stream,
) -> RayRender<S> {
    let bounds = volumes.scales[0].world_box();
    let Some(clipped) = ray.clipped_to(&bounds) else {
        return RayRender::background(background);
    };
    let Ok(mut samples) = sample_along_ray_with(&clipped, n_samples, stratified, rng) else {
        return RayRender::background(background);
    };
    close_near_gap(&mut samples);
    let (trunk_in, dir_enc, _) =
        assemble_ray_inputs(head, volumes, fmap, camera_in, &clipped, &samples.t);
    let fs = head.forward_batch(&trunk_in, &dir_enc, samples.len());
    integrate_ray(&samples.t, &samples.delta, &fs, background)
}

/// Renders one ray: clip to the volume box, stratified samples, field
/// evaluation, quadrature. A ray that misses the box is pure background.
pub fn render_ray<S: Real>(
    head: &FieldHead<S>,
    volumes: &MultiScaleVolumes<S>,
    fmap: &FeatureMap<S>,
    camera_in: &Camera<S>,
    ray: &Ray<S>,
    n_samples: usize,
    background: [S; 3],
    seed: u64,
) -> RayRender<S> {
    let mut rng = stream(seed, StreamTag::RaySamples, 0);
    render_ray_with(
        head, volumes, fmap, camera_in, ray, n_samples, background, true, &mut rng,
    )
}

/// Full-image render. `label_probs` and `opacity` are row-major, one entry
/// per pixel, with `label_probs` in (background, hand, object) order.
#[derive(Clone, Debug)]
pub struct RenderedView<S> {
    pub image: RgbImage<S>,
    pub label_probs: Vec<[S; 3]>,
    pub depth: DepthMap<S>,
    pub opacity: Vec<S>,
}

/// Knobs shared by every ray of a view render.
#[derive(Clone, Copy, Debug)]
pub struct RenderParams<S> {
    pub n_samples: usize,
    pub background: [S; 3],
    pub stratified: bool,
    pub seed: u64,
}

impl<S: Real> RenderParams<S> {
    pub fn new(seed: u64) -> Self {
        RenderParams {
            n_samples: DEFAULT_RAY_SAMPLES,
            background: default_background(),
            stratified: true,
            seed,
        }
    }
}

/// Camera with the same pose rendering at a different resolution: the
/// intrinsics scale with the pixel grid.
fn scaled_camera<S: Real>(camera: &Camera<S>, width: usize, height: usize) -> Camera<S> {
    if width == camera.width && height == camera.height {
        return camera.clone();
    }
    let sx = S::of(width as f64 / camera.width as f64);
    let sy = S::of(height as f64 / camera.height as f64);
    Camera::new(
        camera.fx * sx,
        camera.fy * sy,
        camera.cx * sx,
        camera.cy * sy,
        camera.rotation,
        camera.translation,
        width,
        height,
    )
}

/// Renders the field from `camera_out` at `resolution` (width, height),
/// conditioning every sample on `camera_in`'s feature map. Rays go through
/// pixel centers; each pixel draws its jitter from its own stream, so the
/// result does not depend on row scheduling.
pub fn render_view<S: Real>(
    head: &FieldHead<S>,
    volumes: &MultiScaleVolumes<S>,
    fmap: &FeatureMap<S>,
    camera_in: &Camera<S>,
    camera_out: &Camera<S>,
    resolution: (usize, usize),
    params: &RenderParams<S>,
) -> RenderedView<S> {
    let (w, h) = resolution;
    let cam = scaled_camera(camera_out, w, h);
    let rows: Vec<Vec<RayRender<S>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            for x in 0..w {
                let mut rng = stream(params.seed, StreamTag::RaySamples, (y * w + x) as u64);
                let render = match cam.cast_ray(S::of(x as f64 + 0.5), S::of(y as f64 + 0.5)) {
                    Ok(ray) => render_ray_with(
                        head,
                        volumes,
                        fmap,
                        camera_in,
                        &ray,
                        params.n_samples,
                        params.background,
                        params.stratified,
                        &mut rng,
                    ),
                    Err(_) => RayRender::background(params.background),
                };
                row.push(render);
            }
            row
        })
        .collect();

    let mut image = RgbImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut label_probs = Vec::with_capacity(w * h);
    let mut opacity = Vec::with_capacity(w * h);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, r) in row.into_iter().enumerate() {
            image.set(x, y, r.color);
            depth.set(x, y, r.depth);
            label_probs.push(r.label_probs);
            opacity.push(r.opacity);
        }
    }
    RenderedView {
        image,
        label_probs,
        depth,
        opacity,
    }
}
