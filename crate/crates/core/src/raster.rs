//! In-memory RGB rasters with channel values normalized to `[0, 1]`.

use thiserror::Error;

pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RasterError {
    #[error("raster has zero width or height ({width}x{height})")]
    Empty { width: usize, height: usize },
    #[error("raster buffer holds {found} values, expected {expected}")]
    BufferSize { found: usize, expected: usize },
    #[error("pixel value {value} at offset {offset} is outside [0, 1]")]
    OutOfRange { offset: usize, value: f32 },
}

/// Row-major, channel-interleaved RGB raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::Empty { width, height });
        }
        let expected = width * height * CHANNELS;
        if data.len() != expected {
            return Err(RasterError::BufferSize {
                found: data.len(),
                expected,
            });
        }
        if let Some((offset, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(RasterError::OutOfRange { offset, value });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let value = value.clamp(0.0, 1.0);
        Self {
            width,
            height,
            data: vec![value; width * height * CHANNELS],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(width > 0 && height > 0, "raster dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self { width, height, data }
    }

    /// Re-checks the invariants; used on rasters coming from outside the crate.
    pub fn validate(&self) -> Result<(), RasterError> {
        if self.width == 0 || self.height == 0 {
            return Err(RasterError::Empty {
                width: self.width,
                height: self.height,
            });
        }
        let expected = self.width * self.height * CHANNELS;
        if self.data.len() != expected {
            return Err(RasterError::BufferSize {
                found: self.data.len(),
                expected,
            });
        }
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(offset) => Err(RasterError::OutOfRange {
                offset,
                value: self.data[offset],
            }),
            None => Ok(()),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; CHANNELS] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
}
