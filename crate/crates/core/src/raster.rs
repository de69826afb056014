//! In-memory image, label-mask, and depth buffers shared by the scene
//! renderer, training, and evaluation.

use crate::scalar::Real;

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Hand = 1,
    Object = 2,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Background),
            1 => Some(Label::Hand),
            2 => Some(Label::Object),
            _ => None,
        }
    }

    pub fn one_hot<S: Real>(self) -> [S; NUM_CLASSES] {
        let mut h = [S::zero(); NUM_CLASSES];
        h[self as usize] = S::one();
        h
    }
}

/// Row-major H x W x 3 color buffer, values in [0, 1].
#[derive(Clone, Debug)]
pub struct RgbImage<S> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<S>,
}

impl<S: Real> RgbImage<S> {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![S::zero(); width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [S; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        RgbImage {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * 3
    }

    pub fn get(&self, x: usize, y: usize) -> [S; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [S; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Row-major H x W semantic labels in {0, 1, 2}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize) -> Self {
        LabelMask {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// Flat pixel indices carrying the given label.
    pub fn pixels_of(&self, label: u8) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == label).then_some(i))
            .collect()
    }
}

/// Row-major H x W hit distances; misses hold +infinity.
#[derive(Clone, Debug)]
pub struct DepthMap<S> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<S>,
}

impl<S: Real> DepthMap<S> {
    pub fn new(width: usize, height: usize) -> Self {
        DepthMap {
            width,
            height,
            data: vec![S::infinity(); width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> S {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: S) {
        self.data[y * self.width + x] = d;
    }
}
