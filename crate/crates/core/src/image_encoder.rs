//! Pixel-aligned 2D features: a small convolutional encoder turns the input
//! view into a stride-4 feature grid, and bilinear sampling reads that grid
//! at arbitrary continuous pixel positions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{silu, silu_grad, Conv2d, ParamRef, Parameterized};
use crate::raster::RgbImage;
use crate::scalar::Real;

/// Input pixels per feature cell: two stride-2 blocks.
pub const FEATURE_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageEncoderConfig {
    /// Widths of the three hidden blocks; the fourth block outputs
    /// `channels`.
    pub hidden: [usize; 3],
    /// Output channel count (the pixel-aligned feature dimension).
    pub channels: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            hidden: [16, 24, 32],
            channels: 32,
        }
    }
}

/// Feature grid over the image: cell (ix, iy) summarizes the stride x stride
/// pixel block at (stride*ix, stride*iy), so its center sits at pixel
/// coordinate (stride*(ix+0.5), stride*(iy+0.5)).
#[derive(Clone, Debug)]
pub struct FeatureMap<S> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    /// H' x W' x C, row-major.
    pub values: Vec<S>,
}

impl<S: Real> FeatureMap<S> {
    pub fn cell(&self, ix: usize, iy: usize) -> &[S] {
        let base = (iy * self.width + ix) * self.channels;
        &self.values[base..base + self.channels]
    }

    /// Bilinear read at a continuous pixel position. Outside the grid's
    /// pixel footprint the result is all zeros; inside, cell centers clamp
    /// at the borders.
    pub fn sample_into(&self, px: S, py: S, out: &mut [S]) {
        debug_assert_eq!(out.len(), self.channels);
        let extent_x = S::of((self.width * self.stride) as f64);
        let extent_y = S::of((self.height * self.stride) as f64);
        if px < S::zero() || py < S::zero() || px >= extent_x || py >= extent_y {
            out.fill(S::zero());
            return;
        }
        out.fill(S::zero());
        let half = S::of(0.5);
        let u = px / S::of(self.stride as f64) - half;
        let v = py / S::of(self.stride as f64) - half;
        let (ix0, fx) = split_floor(u, self.width);
        let (iy0, fy) = split_floor(v, self.height);
        let one = S::one();
        for (iy, wy) in [(iy0, one - fy), (iy0 + 1, fy)] {
            let iy = iy.min(self.height - 1);
            for (ix, wx) in [(ix0, one - fx), (ix0 + 1, fx)] {
                let ix = ix.min(self.width - 1);
                let w = wy * wx;
                for (o, &val) in out.iter_mut().zip(self.cell(ix, iy)) {
                    *o += w * val;
                }
            }
        }
    }

    pub fn sample(&self, px: S, py: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.channels];
        self.sample_into(px, py, &mut out);
        out
    }

    /// Adjoint of [`sample_into`]: scatter-adds `d_out` into a gradient
    /// buffer shaped like `values`.
    pub fn sample_backward(&self, px: S, py: S, d_out: &[S], d_values: &mut [S]) {
        debug_assert_eq!(d_values.len(), self.values.len());
        let extent_x = S::of((self.width * self.stride) as f64);
        let extent_y = S::of((self.height * self.stride) as f64);
        if px < S::zero() || py < S::zero() || px >= extent_x || py >= extent_y {
            return;
        }
        let half = S::of(0.5);
        let u = px / S::of(self.stride as f64) - half;
        let v = py / S::of(self.stride as f64) - half;
        let (ix0, fx) = split_floor(u, self.width);
        let (iy0, fy) = split_floor(v, self.height);
        let one = S::one();
        for (iy, wy) in [(iy0, one - fy), (iy0 + 1, fy)] {
            let iy = iy.min(self.height - 1);
            for (ix, wx) in [(ix0, one - fx), (ix0 + 1, fx)] {
                let ix = ix.min(self.width - 1);
                let w = wy * wx;
                let base = (iy * self.width + ix) * self.channels;
                for (dv, &g) in d_values[base..base + self.channels].iter_mut().zip(d_out) {
                    *dv += w * g;
                }
            }
        }
    }
}

/// Floor a grid coordinate into (cell index, fraction), clamping below 0 so
/// border queries interpolate toward the edge cell.
fn split_floor<S: Real>(u: S, cells: usize) -> (usize, S) {
    let f = u.floor();
    if f < S::zero() {
        (0, S::zero())
    } else {
        let i = (f.f64() as usize).min(cells - 1);
        (i, u - f)
    }
}

/// Four 3x3 convolution blocks with SiLU, downsampling twice: stride-4
/// pixel-aligned features.
#[derive(Clone, Debug)]
pub struct ImageEncoder<S> {
    pub config: ImageEncoderConfig,
    pub layers: Vec<Conv2d<S>>,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
pub struct EncoderCache<S> {
    sizes: Vec<(usize, usize)>,
    inputs: Vec<Vec<S>>,
    pre_acts: Vec<Vec<S>>,
}

impl<S: Real> ImageEncoder<S> {
    pub fn init(config: ImageEncoderConfig, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = config.hidden;
        let dims = [(3, c1, 1), (c1, c2, 2), (c2, c3, 1), (c3, config.channels, 2)];
        let layers = dims
            .iter()
            .map(|&(i, o, s)| Conv2d::init(i, o, s, 2.0, rng))
            .collect();
        ImageEncoder { config, layers }
    }

    /// Rejects weight tensors whose shapes drifted from the configuration
    /// (a checkpoint loaded into the wrong architecture).
    pub fn check_shapes(&self) -> Result<()> {
        let [c1, c2, c3] = self.config.hidden;
        let expect = [(3, c1, 1), (c1, c2, 2), (c2, c3, 1), (c3, self.config.channels, 2)];
        if self.layers.len() != expect.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} conv layers", expect.len()),
                got: format!("{}", self.layers.len()),
            });
        }
        for (l, &(i, o, s)) in self.layers.iter().zip(&expect) {
            if l.in_c != i || l.out_c != o || l.stride != s || l.w.data.len() != 9 * i * o {
                return Err(Error::ShapeMismatch {
                    expected: format!("conv {i}->{o} stride {s}"),
                    got: format!(
                        "conv {}->{} stride {} ({} weights)",
                        l.in_c,
                        l.out_c,
                        l.stride,
                        l.w.data.len()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self, image: &RgbImage<S>) -> Result<FeatureMap<S>> {
        let (map, _) = self.encode_with_cache(image)?;
        Ok(map)
    }

    pub fn encode_with_cache(
        &self,
        image: &RgbImage<S>,
    ) -> Result<(FeatureMap<S>, EncoderCache<S>)> {
        self.check_shapes()?;
        let mut cache = EncoderCache {
            sizes: Vec::with_capacity(4),
            inputs: Vec::with_capacity(4),
            pre_acts: Vec::with_capacity(4),
        };
        let (mut h, mut w) = (image.height, image.width);
        let mut x = image.data.clone();
        for layer in &self.layers {
            let pre = layer.forward(&x, h, w);
            let (oh, ow) = layer.out_size(h, w);
            cache.sizes.push((h, w));
            cache.inputs.push(x);
            x = pre.iter().map(|&p| silu(p)).collect();
            cache.pre_acts.push(pre);
            (h, w) = (oh, ow);
        }
        Ok((
            FeatureMap {
                height: h,
                width: w,
                channels: self.config.channels,
                stride: FEATURE_STRIDE,
                values: x,
            },
            cache,
        ))
    }

    /// Backpropagates a gradient on the feature map values into the layer
    /// weight gradients.
    pub fn backward(&mut self, cache: &EncoderCache<S>, d_values: &[S]) {
        let mut dy = d_values.to_vec();
        for li in (0..self.layers.len()).rev() {
            // d(silu(pre)) -> d(pre)
            for (g, &p) in dy.iter_mut().zip(&cache.pre_acts[li]) {
                *g *= silu_grad(p);
            }
            let (h, w) = cache.sizes[li];
            let dx = self.layers[li].backward(&cache.inputs[li], h, w, &dy, li > 0);
            if let Some(dx) = dx {
                dy = dx;
            }
        }
    }
}

impl<S: Real> Parameterized<S> for ImageEncoder<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamRef<'_, S>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}.conv{i}"), f);
        }
    }
}
