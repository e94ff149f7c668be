use std::borrow::Cow;

use rayon::prelude::*;

use super::Dataset;
use crate::augment::{apply_pipeline, AugmentConfig, Image};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor4};

/// Stacks RGB images into `[n, 3, h, w]` with values scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor4<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::contract("images_to_tensor: no images"))?;
    let (w, h) = (first.width(), first.height());
    if images.iter().any(|im| (im.width(), im.height()) != (w, h)) {
        return Err(Error::contract("images_to_tensor: images differ in size"));
    }
    let mut out = Tensor4::zeros([images.len(), 3, h, w]);
    for (i, img) in images.iter().enumerate() {
        let sample = out.sample_mut(i);
        for (p, px) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                sample[c * h * w + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub epoch: u64,
    pub seed: u64,
    /// When present, every sample passes through the augmentation pipeline.
    pub augment: Option<AugmentConfig>,
    /// Threads used to prepare a batch. Content never depends on it.
    pub workers: usize,
    /// Skip the shuffle (evaluation passes).
    pub shuffle: bool,
}

impl BatchOptions {
    pub fn new(batch_size: usize, epoch: u64, seed: u64) -> Self {
        Self {
            batch_size,
            epoch,
            seed,
            augment: None,
            workers: 1,
            shuffle: true,
        }
    }

    /// Sequential, unaugmented batches in dataset order.
    pub fn ordered(batch_size: usize) -> Self {
        Self {
            shuffle: false,
            ..Self::new(batch_size, 0, 0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor4<f32>,
    pub labels: Vec<usize>,
    /// Dataset positions of the samples.
    pub indices: Vec<usize>,
}

pub struct BatchIter<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    opts: BatchOptions,
    pool: rayon::ThreadPool,
    next: usize,
}

/// Batches for one epoch. The order is shuffled with
/// `Rng::substream(seed, epoch)`; with augmentation, the sample at position
/// `k` of the epoch uses pipeline index `epoch·|ds| + k`. The final partial
/// batch is emitted as-is.
pub fn batch_iter(ds: &Dataset, opts: BatchOptions) -> Result<BatchIter<'_>> {
    if opts.batch_size == 0 {
        return Err(Error::contract("batch_iter: batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if opts.shuffle {
        Rng::substream(opts.seed, opts.epoch).shuffle(&mut order);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(BatchIter {
        ds,
        order,
        opts,
        pool,
        next: 0,
    })
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.opts.batch_size)
    }

    fn build(&self, start: usize) -> Result<Batch> {
        let end = (start + self.opts.batch_size).min(self.order.len());
        let base = self.opts.epoch * self.ds.len() as u64;
        let images: Vec<Cow<'_, Image>> = self.pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|pos| {
                    let img = &self.ds.items()[self.order[pos]].image;
                    match &self.opts.augment {
                        Some(cfg) => Cow::Owned(apply_pipeline(img, cfg, base + pos as u64)),
                        None => Cow::Borrowed(img),
                    }
                })
                .collect()
        });
        let refs: Vec<&Image> = images.iter().map(AsRef::as_ref).collect();
        let indices = self.order[start..end].to_vec();
        Ok(Batch {
            images: images_to_tensor(&refs)?,
            labels: indices.iter().map(|&k| self.ds.items()[k].label).collect(),
            indices,
        })
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let start = self.next;
        self.next += self.opts.batch_size;
        Some(self.build(start))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{synth_toy, LabeledImage};
    use super::*;

    fn labelled(n: usize) -> Dataset {
        let items = (0..n)
            .map(|k| LabeledImage {
                image: Image::filled(4, 4, [k as u8, 0, 255]).unwrap(),
                label: k % 2,
                source_path: k.to_string(),
                glyph: None,
            })
            .collect();
        Dataset::new(items).unwrap()
    }

    #[test]
    fn batch_counts() {
        let ds = labelled(960);
        let batches: Vec<_> = batch_iter(&ds, BatchOptions::new(32, 0, 1)).unwrap().collect();
        assert_eq!(batches.len(), 30);
        let small = labelled(7);
        let it = batch_iter(&small, BatchOptions::new(1, 0, 1)).unwrap();
        assert_eq!(it.num_batches(), 7);
        for b in it {
            assert_eq!(b.unwrap().images.shape(), [1, 3, 4, 4]);
        }
        let sizes: Vec<_> = batch_iter(&small, BatchOptions::new(3, 0, 1))
            .unwrap()
            .map(|b| b.unwrap().labels.len())
            .collect();
        assert_eq!(sizes, [3, 3, 1]);
    }

    #[test]
    fn epoch_covers_every_label_once() {
        let ds = labelled(101);
        let mut seen: Vec<usize> = batch_iter(&ds, BatchOptions::new(8, 3, 5))
            .unwrap()
            .flat_map(|b| b.unwrap().indices)
            .collect();
        let labels: usize = seen.iter().map(|&k| ds.items()[k].label).sum();
        assert_eq!(labels, ds.labels().iter().sum::<usize>());
        seen.sort();
        assert_eq!(seen, (0..101).collect::<Vec<_>>());
    }

    #[test]
    fn tensor_scaling_and_layout() {
        let img = Image::from_fn(2, 1, |x, _| [255 * x as u8, 51, 0]).unwrap();
        let t = images_to_tensor(&[&img]).unwrap();
        assert_eq!(t.shape(), [1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.2, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn epochs_shuffle_differently_and_reproducibly() {
        let ds = labelled(50);
        let order = |epoch| -> Vec<usize> {
            batch_iter(&ds, BatchOptions::new(50, epoch, 2))
                .unwrap()
                .next()
                .unwrap()
                .unwrap()
                .indices
        };
        assert_eq!(order(1), order(1));
        assert_ne!(order(1), order(2));
        let ordered: Vec<usize> = batch_iter(&ds, BatchOptions::ordered(50))
            .unwrap()
            .next()
            .unwrap()
            .unwrap()
            .indices;
        assert_eq!(ordered, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn worker_count_does_not_change_augmented_batches() {
        let ds = synth_toy(6, 24, 1).unwrap();
        let run = |workers| -> Vec<Batch> {
            let opts = BatchOptions {
                augment: Some(AugmentConfig::default()),
                workers,
                ..BatchOptions::new(5, 2, 3)
            };
            batch_iter(&ds, opts).unwrap().map(|b| b.unwrap()).collect()
        };
        assert_eq!(run(1), run(4));
    }
}
