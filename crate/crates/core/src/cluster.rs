//! Unsupervised clustering CNN trained against superpixel-majority targets.
//!
//! Each epoch runs the network on the image, takes the per-pixel argmax
//! label, replaces every superpixel's labels by its modal label and trains the
//! network towards that target with per-pixel cross-entropy. Training stops as
//! soon as the target holds no more than `target_clusters` distinct labels.

use image::RgbImage;
use log::debug;
use serde::{Deserialize, Serialize};

use crate::imaging::{rgb_to_tensor, LabelMap};
use crate::nn::{
    argmax_channels, softmax_cross_entropy_channels, LayerSpec, Network, OptimizerKind, OptimizerState, Scalar,
    Tensor4,
};
use crate::superpixel::SuperpixelMap;
use crate::{rng_from_seed, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterTrainConfig {
    /// Feature channels per convolution (`NC`).
    pub channels: usize,
    pub target_clusters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for ClusterTrainConfig {
    fn default() -> Self {
        Self { channels: 100, target_clusters: 25, learning_rate: 0.1, momentum: 0.9, max_epochs: 500, seed: 0 }
    }
}

impl ClusterTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.target_clusters == 0 || self.target_clusters > self.channels {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= target_clusters ({}) <= channels ({}), channels >= 2",
                self.target_clusters, self.channels
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidArgument("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub distinct_count: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLabeling {
    pub labels: LabelMap,
    pub distinct_count: usize,
    pub epoch_history: Vec<EpochRecord>,
    /// False when `max_epochs` ran out before reaching the target count.
    pub converged: bool,
}

impl ClusterLabeling {
    pub fn from_labels(labels: LabelMap) -> Self {
        let distinct_count = labels.distinct().len();
        Self { labels, distinct_count, epoch_history: Vec::new(), converged: true }
    }

    pub fn stopping_epoch(&self) -> Option<usize> {
        self.epoch_history.last().map(|r| r.epoch)
    }
}

/// Layer list of the clustering network: three `3x3` same-size convolutions,
/// each followed by batch norm, with ReLU between blocks.
pub fn cluster_cnn_specs(in_channels: usize, channels: usize) -> Vec<LayerSpec> {
    let conv = |i| LayerSpec::Conv2d { in_channels: i, out_channels: channels, kernel: 3, stride: 1, padding: 1 };
    vec![
        conv(in_channels),
        LayerSpec::BatchNorm2d { channels },
        LayerSpec::Relu,
        conv(channels),
        LayerSpec::BatchNorm2d { channels },
        LayerSpec::Relu,
        conv(channels),
        LayerSpec::BatchNorm2d { channels },
    ]
}

pub fn build_cluster_cnn<T: Scalar>(channels: usize, height: usize, width: usize, seed: u64) -> Result<Network<T>> {
    if channels < 2 {
        return Err(Error::InvalidArgument("clustering network needs at least 2 channels".into()));
    }
    Network::build(&cluster_cnn_specs(3, channels), [1, 3, height, width], &mut rng_from_seed(seed))
}

/// Per-pixel argmax over the channel axis of a single-image feature tensor.
pub fn argmax_labels<T: Scalar>(features: &Tensor4<T>) -> Result<ClusterLabeling> {
    let [_, _, h, w] = features.shape();
    let labels = argmax_channels(features)?.into_iter().map(|l| l as u32).collect();
    Ok(ClusterLabeling::from_labels(LabelMap::new(w, h, labels)?))
}

/// Replace every pixel's label by the most common label of its superpixel
/// (smallest label on ties).
pub fn make_target(labels: &LabelMap, spmap: &SuperpixelMap) -> Result<LabelMap> {
    if labels.width != spmap.width() || labels.height != spmap.height() {
        return Err(Error::shape(
            "make_target",
            format!("labels {}x{} vs superpixels {}x{}", labels.width, labels.height, spmap.width(), spmap.height()),
        ));
    }
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); spmap.count];
    for (&sp, &l) in spmap.labels.labels.iter().zip(&labels.labels) {
        members[sp as usize].push(l);
    }
    let modal: Vec<u32> = members
        .into_iter()
        .map(|mut ls| {
            ls.sort_unstable();
            let (mut best, mut best_n) = (ls.first().copied().unwrap_or(0), 0usize);
            let mut i = 0;
            while i < ls.len() {
                let j = ls[i..].iter().position(|&v| v != ls[i]).map_or(ls.len(), |k| i + k);
                if j - i > best_n {
                    best = ls[i];
                    best_n = j - i;
                }
                i = j;
            }
            best
        })
        .collect();
    LabelMap::new(labels.width, labels.height, spmap.labels.labels.iter().map(|&sp| modal[sp as usize]).collect())
}

/// A finished clustering run.
pub struct ClusterRun {
    pub labeling: ClusterLabeling,
    pub network: Network<f32>,
}

/// Train a fresh clustering network on one image until its superpixel-smoothed
/// labeling has at most `target_clusters` distinct labels.
///
/// The returned labeling is the smoothed target of the stopping epoch.
pub fn train_clustering(image: &RgbImage, spmap: &SuperpixelMap, config: &ClusterTrainConfig) -> Result<ClusterRun> {
    config.validate()?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    if spmap.width() != w || spmap.height() != h {
        return Err(Error::shape("train_clustering", "superpixel map does not match image extents"));
    }
    let input: Tensor4<f32> = rgb_to_tensor(image);
    let mut net = build_cluster_cnn::<f32>(config.channels, h, w, config.seed)?;
    let mut opt = OptimizerState::new(OptimizerKind::sgd_momentum(config.learning_rate, config.momentum))?;
    let mut history = Vec::new();
    let mut last_target = None;
    for epoch in 1..=config.max_epochs {
        let out = net.forward(&input)?;
        let raw = argmax_labels(&out)?;
        let target = make_target(&raw.labels, spmap)?;
        let distinct = target.distinct().len();
        let targets: Vec<usize> = target.labels.iter().map(|&l| l as usize).collect();
        let (loss, grad) = softmax_cross_entropy_channels(&out, &targets)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!("clustering epoch {epoch}")));
        }
        history.push(EpochRecord { epoch, distinct_count: distinct, loss });
        debug!("cluster epoch {epoch}: {distinct} labels, loss {loss:.4}");
        if distinct <= config.target_clusters {
            net.infer(&input)?;
            return Ok(ClusterRun {
                labeling: ClusterLabeling { labels: target, distinct_count: distinct, epoch_history: history, converged: true },
                network: net,
            });
        }
        net.zero_grad();
        net.backward(grad)?;
        opt.step(&mut net.params_mut())?;
        last_target = Some(target);
    }
    let labels = last_target.expect("at least one epoch ran");
    let distinct_count = labels.distinct().len();
    Ok(ClusterRun {
        labeling: ClusterLabeling { labels, distinct_count, epoch_history: history, converged: false },
        network: net,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use rand::Rng;

    fn spmap(width: usize, labels: Vec<u32>) -> SuperpixelMap {
        let h = labels.len() / width;
        SuperpixelMap::from_labels(LabelMap::new(width, h, labels).unwrap()).unwrap()
    }

    #[test]
    fn majority_wins_within_superpixel() {
        // one superpixel of six pixels: labels A=4 x4, B=9 x2
        let sp = spmap(3, vec![0; 6]);
        let labels = LabelMap::new(3, 2, vec![4, 9, 4, 4, 9, 4]).unwrap();
        assert_eq!(make_target(&labels, &sp).unwrap().labels, vec![4; 6]);
    }

    #[test]
    fn ties_go_to_smallest_label() {
        let sp = spmap(3, vec![0; 6]);
        let labels = LabelMap::new(3, 2, vec![7, 2, 7, 2, 7, 2]).unwrap();
        assert_eq!(make_target(&labels, &sp).unwrap().labels, vec![2; 6]);
    }

    #[test]
    fn uniform_superpixels_are_a_fixed_point() {
        let sp = spmap(4, vec![0, 0, 1, 1, 0, 0, 1, 1]);
        let labels = LabelMap::new(4, 2, vec![3, 3, 8, 8, 3, 3, 8, 8]).unwrap();
        assert_eq!(make_target(&labels, &sp).unwrap(), labels);
    }

    #[test]
    fn target_is_idempotent() {
        let mut rng = rng_from_seed(12);
        let sp = spmap(8, (0..64).map(|p| ((p % 8) / 2 + 4 * ((p / 8) / 4)) as u32).collect());
        let labels = LabelMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..5)).collect()).unwrap();
        let once = make_target(&labels, &sp).unwrap();
        assert_eq!(make_target(&once, &sp).unwrap(), once);
    }

    #[test]
    fn extent_mismatch_rejected() {
        let sp = spmap(2, vec![0; 4]);
        let labels = LabelMap::new(4, 1, vec![0; 4]).unwrap();
        assert!(make_target(&labels, &sp).is_err());
    }

    #[test]
    fn argmax_cases() {
        // channel 1 dominant everywhere
        let mut t = Tensor4::<f32>::zeros([1, 3, 2, 2]);
        for i in 0..4 {
            t.data_mut()[4 + i] = 1.0;
        }
        let l = argmax_labels(&t).unwrap();
        assert_eq!(l.distinct_count, 1);
        assert!(l.labels.labels.iter().all(|&v| v == 1));
        // all equal -> channel 0
        let l = argmax_labels(&Tensor4::<f32>::zeros([1, 3, 2, 2])).unwrap();
        assert!(l.labels.labels.iter().all(|&v| v == 0));
    }

    #[test]
    fn argmax_matches_per_pixel_oracle() {
        let mut rng = rng_from_seed(31);
        let t = Tensor4::<f64>::randn([1, 3, 4, 4], 1.0, &mut rng);
        let l = argmax_labels(&t).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let vals: Vec<f64> = (0..3).map(|c| t.at(0, c, y, x)).collect();
                let mut best = 0;
                for c in 1..3 {
                    if vals[c] > vals[best] {
                        best = c;
                    }
                }
                assert_eq!(l.labels.get(x, y), best as u32);
            }
        }
    }

    #[test]
    fn network_shapes() {
        let mut net = build_cluster_cnn::<f32>(4, 8, 8, 0).unwrap();
        let y = net.forward(&Tensor4::zeros([1, 3, 8, 8])).unwrap();
        assert_eq!(y.shape(), [1, 4, 8, 8]);
        assert!(y.all_finite());
        assert!(build_cluster_cnn::<f32>(1, 8, 8, 0).is_err());
    }
}
