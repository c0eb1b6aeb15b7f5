use crate::error::{Error, Result};

/// A float image in height-width-channel order, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Dimension(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f64 {
        &mut self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    /// Rounds every pixel to the nearest of 256 levels, as 8-bit export does.
    pub fn quantized_8bit(&self) -> Image {
        Image {
            pixels: self
                .pixels
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..*self
        }
    }

    /// Sum of squared pixel differences.
    pub fn sq_dist(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Mean squared error over every pixel of two equally sized image sets.
pub fn mse(a: &[Image], b: &[Image]) -> f64 {
    let n: usize = a.iter().map(|i| i.pixels.len()).sum();
    a.iter().zip(b).map(|(x, y)| x.sq_dist(y)).sum::<f64>() / n.max(1) as f64
}

/// Checks that all images share one shape and returns it.
pub fn common_shape(images: &[Image]) -> Result<(usize, usize, usize)> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty image set".into()))?
        .shape();
    if let Some(i) = images.iter().position(|im| im.shape() != first) {
        return Err(Error::Dimension(format!(
            "image {i} has shape {:?}, expected {:?}",
            images[i].shape(),
            first
        )));
    }
    Ok(first)
}
