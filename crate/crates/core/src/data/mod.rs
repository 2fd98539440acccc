//! Samples, client datasets and batching.

mod augment;
mod loader;
mod partition;
pub mod synthetic;

pub use augment::{adjust_brightness, augment, hflip, rotate, AugmentConfig};
pub use loader::{
    load_dataset, select_classes, split_fractions, subsample, write_cifar_bin, LoadOptions, Split,
};
pub use partition::{partition_clients, PartitionScheme};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A CHW image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Image::new(c, h, w, data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Stable identifier within the source split; seeds per-sample randomness.
    pub id: u64,
    pub image: Image,
    pub label: usize,
}

/// Samples held by one client. Never empty.
#[derive(Debug, Clone)]
pub struct ClientDataset {
    client_id: usize,
    samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn new(client_id: usize, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { client_id, samples })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// Sample count `n_i`.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }
}

/// Stacks images into a `(B, C, H, W)` tensor.
pub fn batch_images<'a, I>(samples: I, dtype: DType, device: &Device) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Image>,
{
    let images: Vec<&Image> = samples.into_iter().collect();
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let [c, h, w] = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in &images {
        if img.shape() != [c, h, w] {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?}",
                [c, h, w],
                img.shape()
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?.to_dtype(dtype)?)
}

pub fn batch_labels(samples: &[&Sample], device: &Device) -> Result<Tensor> {
    let labels: Vec<u32> = samples.iter().map(|s| s.label as u32).collect();
    Ok(Tensor::from_vec(labels, samples.len(), device)?)
}

/// Splits a `(B, C, H, W)` tensor back into images.
pub fn unbatch_images(t: &Tensor) -> Result<Vec<Image>> {
    let (b, _, _, _) = t.dims4()?;
    (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
}

pub fn num_classes(samples: &[Sample]) -> usize {
    samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
}
