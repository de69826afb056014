//! Sinusoidal positional encoding for coordinates and view directions.

use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncoding {
    /// Default for spatial coordinates.
    pub fn for_coordinates() -> Self {
        PositionalEncoding {
            num_frequencies: 6,
            include_input: true,
        }
    }

    /// Default for unit view directions.
    pub fn for_directions() -> Self {
        PositionalEncoding {
            num_frequencies: 4,
            include_input: true,
        }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (usize::from(self.include_input) + 2 * self.num_frequencies)
    }

    /// Appends the encoding of `x` to `out`, component-major: for each input
    /// component, the optional raw value then (sin, cos) pairs at frequencies
    /// 2^k * pi, k = 0..num_frequencies.
    pub fn encode_into<S: Real>(&self, x: &[S], out: &mut Vec<S>) {
        for &c in x {
            if self.include_input {
                out.push(c);
            }
            let mut arg = c * S::PI();
            for _ in 0..self.num_frequencies {
                out.push(arg.sin());
                out.push(arg.cos());
                arg = arg + arg;
            }
        }
    }

    pub fn encode<S: Real>(&self, x: &[S]) -> Vec<S> {
        let mut out = Vec::with_capacity(self.output_dim(x.len()));
        self.encode_into(x, &mut out);
        out
    }
}
