//! Training loop, batched inference over a dataset and evaluation helpers.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use fovea_core::assignment::{build_targets, TargetMaps};
use fovea_core::detector::{batch_normalizer, Detector, Gradients};
use fovea_core::evaluation::{ImageDets, ImageGts};
use fovea_core::inference::{postprocess, propose_with, InferenceParams};
use fovea_core::tensor::{sgd_step, SgdConfig, Tensor};
use fovea_core::{LabeledBox, PyramidSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, IoContext, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate at the last iteration of the epoch.
    pub lr: f64,
    /// Means over the epoch's iterations.
    pub cls_loss: f64,
    pub box_loss: f64,
    pub total: f64,
    /// Seconds since training started.
    pub wall_seconds: f64,
}

/// An image with its boxes, ready for augmentation.
struct Sample {
    image: Tensor,
    gts: Vec<LabeledBox>,
}

fn flip_image(t: &Tensor) -> Tensor {
    let (n, c, h, w) = t.dims4().expect("4-d image");
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..n * c * h {
        let base = row * w;
        for x in 0..w {
            out[base + x] = src[base + w - 1 - x];
        }
    }
    Tensor::from_vec(t.shape(), out).expect("same shape")
}

fn load_samples(dataset: &Dataset, class_agnostic: bool) -> Result<Vec<Sample>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let gts = dataset.gts[i]
                .gts
                .iter()
                .map(|g| {
                    let category = if class_agnostic { 0 } else { g.category };
                    LabeledBox::new(g.bbox, category)
                })
                .collect();
            Ok(Sample {
                image: dataset.load_tensor(i)?,
                gts,
            })
        })
        .collect()
}

fn pyramid_for(dataset: &Dataset, cfg: &RunConfig) -> Result<PyramidSpec> {
    let first = dataset
        .images
        .first()
        .ok_or_else(|| Error::Dataset("no images".into()))?;
    if let Some(other) = dataset
        .images
        .iter()
        .find(|i| i.width != first.width || i.height != first.height)
    {
        return Err(Error::Dataset(format!(
            "image {} is {}x{}, expected {}x{} like the rest",
            other.id, other.width, other.height, first.width, first.height
        )));
    }
    Ok(cfg.detector.pyramid(first.width, first.height)?)
}

/// Trains a detector on `dataset`.
///
/// With `out_dir`, appends to the JSON-lines log after every epoch and writes
/// checkpoints there. Results depend only on the configuration, the data and
/// the seed, never on the worker count.
pub fn train(dataset: &Dataset, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<(Detector, Vec<EpochLog>)> {
    cfg.validate()?;
    let classes = cfg.detector.cls_channels();
    if !cfg.detector.class_agnostic && cfg.detector.num_classes != dataset.num_classes() {
        return Err(Error::Config(format!(
            "detector has {} classes, dataset has {}",
            cfg.detector.num_classes,
            dataset.num_classes()
        )));
    }
    let pyramid = pyramid_for(dataset, cfg)?;
    let samples = load_samples(dataset, cfg.detector.class_agnostic)?;
    let image_w = pyramid.image_w as f64;
    let sched = &cfg.schedule;

    let mut detector = Detector::new(cfg.detector.clone(), sched.seed)?;
    let mut state = detector.sgd_state();
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let iters_per_epoch = samples.len().div_ceil(sched.batch_size);
    let total_iters = iters_per_epoch * sched.epochs;
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).at(dir)?;
            let p = dir.join(LOG_FILE);
            Some((fs::File::create(&p).at(&p)?, p))
        }
        None => None,
    };
    let start = Instant::now();
    let mut logs = Vec::with_capacity(sched.epochs);
    let mut iter = 0;

    for epoch in 1..=sched.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order
            .iter()
            .map(|_| sched.hflip && rng.random_bool(0.5))
            .collect();
        let (mut cls_sum, mut box_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut lr = cfg.sgd.learning_rate;

        for (b, chunk) in order.chunks(sched.batch_size).enumerate() {
            let flip = &flips[b * sched.batch_size..b * sched.batch_size + chunk.len()];
            let batch: Vec<(Tensor, Vec<TargetMaps>)> = chunk
                .par_iter()
                .zip(flip)
                .map(|(&i, &f)| {
                    let s = &samples[i];
                    let (image, gts) = if f {
                        let gts = s
                            .gts
                            .iter()
                            .map(|g| LabeledBox::new(g.bbox.hflip(image_w), g.category))
                            .collect();
                        (flip_image(&s.image), gts)
                    } else {
                        (s.image.clone(), s.gts.clone())
                    };
                    let targets = build_targets(&gts, &pyramid, &cfg.assign, classes)?;
                    Ok((image, targets))
                })
                .collect::<Result<_>>()?;
            let normalizer = batch_normalizer(batch.iter().map(|(_, t)| t.as_slice()));
            let parts = batch
                .par_iter()
                .map(|(image, targets)| detector.forward_backward(image, targets, &cfg.loss, normalizer))
                .collect::<Vec<_>>();

            let diverged = |reason: String| Error::Diverged {
                epoch,
                iteration: iter,
                reason,
            };
            let mut grads = Gradients::zeros_like(detector.params());
            let (mut cls, mut bx) = (0.0, 0.0);
            for part in parts {
                let (report, g) = part.map_err(|e| diverged(e.to_string()))?;
                grads.add_assign(&g);
                cls += report.cls_loss;
                bx += report.box_loss;
            }
            let total = cls + cfg.loss.box_weight * bx;
            if !total.is_finite() || !grads.all_finite() {
                return Err(diverged(format!("loss {total}")));
            }
            if sched.clip_norm > 0.0 {
                let norm = grads.l2_norm();
                if norm > sched.clip_norm {
                    let s = sched.clip_norm / norm;
                    grads.0.iter_mut().flatten().for_each(|v| *v *= s);
                }
            }
            lr = sched.lr_at(cfg.sgd.learning_rate, iter, total_iters);
            let step = SgdConfig {
                learning_rate: lr,
                ..cfg.sgd
            };
            detector.set_gradients(&grads)?;
            sgd_step(detector.params_mut(), &mut state, &step).map_err(|e| diverged(e.to_string()))?;
            cls_sum += cls;
            box_sum += bx;
            total_sum += total;
            iter += 1;
        }

        let n = iters_per_epoch.max(1) as f64;
        let entry = EpochLog {
            epoch,
            lr,
            cls_loss: cls_sum / n,
            box_loss: box_sum / n,
            total: total_sum / n,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let (Some((f, p)), Some(dir)) = (log_file.as_mut(), out_dir) {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(f, "{line}").at(p.as_path())?;
            if epoch % sched.checkpoint_every == 0 || epoch == sched.epochs {
                let path = dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:03}.ckpt"));
                checkpoint::save(&path, &detector, epoch)?;
            }
        }
        logs.push(entry);
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&dir.join(FINAL_CHECKPOINT), &detector, sched.epochs)?;
    }
    Ok((detector, logs))
}

/// Runs the detector and post-processing on every image of `dataset`.
pub fn detect(detector: &Detector, dataset: &Dataset, params: &InferenceParams) -> Result<Vec<ImageDets>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let info = &dataset.images[i];
            let pyramid = detector.config().pyramid(info.width, info.height)?;
            let outputs = detector.forward(&dataset.load_tensor(i)?)?;
            Ok(ImageDets {
                image_id: info.id,
                dets: postprocess(&outputs, &pyramid, params)?,
            })
        })
        .collect()
}

/// Class-agnostic proposals, at most `k` per image.
pub fn propose_dataset(
    detector: &Detector,
    dataset: &Dataset,
    params: &InferenceParams,
    k: usize,
) -> Result<Vec<ImageDets>> {
    (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let info = &dataset.images[i];
            let pyramid = detector.config().pyramid(info.width, info.height)?;
            let outputs = detector.forward(&dataset.load_tensor(i)?)?;
            Ok(ImageDets {
                image_id: info.id,
                dets: propose_with(&outputs, &pyramid, params, k)?,
            })
        })
        .collect()
}

/// Ground truth with every category folded into class 0.
pub fn agnostic_gts(gts: &[ImageGts]) -> Vec<ImageGts> {
    gts.iter()
        .map(|g| ImageGts {
            image_id: g.image_id,
            gts: g.gts.iter().map(|b| LabeledBox::new(b.bbox, 0)).collect(),
        })
        .collect()
}
