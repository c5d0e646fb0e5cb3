use crate::error::{dim_err, Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Bar thickness of the stripes task, in pixels.
pub const STRIPE_THICKNESS: usize = 2;
/// Gaussian pixel noise of the stripes task.
pub const STRIPE_NOISE: f64 = 0.05;

/// Images `[n, H, W, C]` in `[0, 1]` with one label each.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Bar offset of each stripes sample; empty for other sources.
    pub offsets: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(dim_err!(
                "dataset: images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "dataset: label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            offsets: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let (h, w, c) = self.image_shape();
        let per = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new([indices.len(), h, w, c], data).expect("batch shape"),
            labels,
        )
    }
}

/// Every bar offset that fits in a `grid`-pixel image.
pub fn all_offsets(grid: usize) -> Vec<usize> {
    (0..=grid - STRIPE_THICKNESS).collect()
}

/// Two-class bars task: class 0 is a horizontal bar two pixels thick at a
/// uniformly drawn row offset, class 1 the vertical counterpart. Samples
/// alternate 0, 1, 0, ... so class 0 gets `⌈n/2⌉` of them. Pixels are 0/1
/// plus N(0, 0.05²) noise, clipped to `[0, 1]`.
pub fn gen_stripes<T: Scalar>(n: usize, grid: usize, seed: u64) -> Result<Dataset<T>> {
    if grid < 4 {
        return Err(Error::InvalidArgument(format!("stripes grid {grid} < 4")));
    }
    gen_stripes_with_offsets(n, grid, seed, &all_offsets(grid))
}

/// [`gen_stripes`] with bar offsets drawn from `offsets` only.
pub fn gen_stripes_with_offsets<T: Scalar>(
    n: usize,
    grid: usize,
    seed: u64,
    offsets: &[usize],
) -> Result<Dataset<T>> {
    if grid < 4 {
        return Err(Error::InvalidArgument(format!("stripes grid {grid} < 4")));
    }
    if offsets.is_empty() || offsets.iter().any(|&o| o + STRIPE_THICKNESS > grid) {
        return Err(Error::InvalidArgument(format!(
            "stripes offsets {offsets:?} invalid for grid {grid}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::with_capacity(n * grid * grid);
    let mut labels = Vec::with_capacity(n);
    let mut used = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let offset = offsets[rng.below(offsets.len())];
        for r in 0..grid {
            for c in 0..grid {
                let pos = if label == 0 { r } else { c };
                let on = pos >= offset && pos < offset + STRIPE_THICKNESS;
                let v = if on { 1.0 } else { 0.0 } + STRIPE_NOISE * rng.normal();
                data.push(T::of(v.clamp(0.0, 1.0)));
            }
        }
        labels.push(label);
        used.push(offset);
    }
    let mut ds = Dataset::new(Tensor::new([n, grid, grid, 1], data)?, labels, 2)?;
    ds.offsets = used;
    Ok(ds)
}
