use crate::error::{Error, Result};
use crate::raster::Image;

/// Dense NCHW tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: [1, 1, 1, 1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Stack images into a batch, replicating gray images to `channels`.
    pub fn from_images(images: &[&Image], channels: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(images.len() * channels * w * h);
        for img in images {
            if img.width() != w || img.height() != h {
                return Err(Error::Shape("images in a batch differ in size".into()));
            }
            let src_c = img.channels();
            for c in 0..channels {
                let sc = if src_c == 1 { 0 } else { c.min(src_c - 1) };
                data.extend(img.data().iter().skip(sc).step_by(src_c));
            }
        }
        Self::from_vec([images.len(), channels, h, w], data)
    }

    /// Convert batch item `n` back to an image with `channels` channels; a
    /// 1-channel target averages the tensor channels.
    pub fn to_image(&self, n: usize, channels: usize) -> Result<Image> {
        let [_, c, h, w] = self.shape;
        let plane = h * w;
        let base = n * c * plane;
        let mut data = Vec::with_capacity(plane * channels);
        for i in 0..plane {
            if channels == 1 {
                let s: f64 = (0..c).map(|k| self.data[base + k * plane + i]).sum();
                data.push(s / c as f64);
            } else {
                for k in 0..channels {
                    data.push(self.data[base + k.min(c - 1) * plane + i]);
                }
            }
        }
        Image::from_vec_clamped(w, h, channels, data)
    }
}
