use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment, load_manifest, AugmentMode};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{metrics_report, MetricsReport, ScoredSample};
use crate::model::{save_checkpoint, LivenessModel};
use crate::parallel::Exec;
use crate::pdle::{encode_one, ClassPool, ExchangeRecord, OppositePool};
use crate::rng::{derive_seed, stream};
use crate::{Label, LabeledImage};

use super::config::{Protocol, TrainConfig};
use super::optim::{adam_step, lr_schedule, AdamState};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_SPLIT: u64 = 4;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mse: f64,
    pub adv: Option<f64>,
    pub total: f64,
    pub exchanged: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    /// Dataset domain ids seen in training, in the order of the
    /// discriminator's outputs.
    pub train_domains: Vec<usize>,
    pub test_domains: Vec<usize>,
    pub epochs: Vec<EpochLog>,
    /// Metrics on the training images (centre crop, no exchange).
    pub train_metrics: MetricsReport,
    pub metrics: MetricsReport,
    /// Checkpoint file name, relative to the report's directory.
    pub checkpoint: Option<PathBuf>,
    /// Not serialized, so that reports of identical runs are byte-identical;
    /// it is written to a separate timing file instead.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: RunReport,
    pub model: LivenessModel,
}

#[derive(Serialize)]
struct BatchExchanges<'a> {
    epoch: usize,
    batch: usize,
    exchanges: Vec<&'a ExchangeRecord>,
}

/// Exchange partners drawn from the whole training set, augmented with the
/// anchor's stream.
struct AugmentedPool<'a> {
    pool: ClassPool<'a>,
    crop: (usize, usize),
}

impl OppositePool for AugmentedPool<'_> {
    fn draw<R: Rng + ?Sized>(&self, class: Label, rng: &mut R) -> Option<LabeledImage> {
        let i = self.pool.draw_index(class, rng)?;
        let src = &self.pool.images()[i];
        // Sizes are checked before training starts, so the crop cannot fail.
        let (image, _) = augment(&src.image, AugmentMode::Train, self.crop, rng).ok()?;
        Some(LabeledImage {
            image,
            label: src.label,
            domain: src.domain,
        })
    }
}

/// Liveness scores of `images` under test-time preprocessing (centre crop).
pub fn score_images(model: &LivenessModel, images: &[LabeledImage], exec: Exec) -> Result<Vec<f64>> {
    let size = model.config().input_size;
    exec.try_map(images.len(), |i| {
        let x = crate::datagen::center_crop(&images[i].image, size)?;
        model.predict(&x)
    })
}

pub(crate) fn scored(images: &[LabeledImage], scores: &[f64]) -> Vec<ScoredSample> {
    images
        .iter()
        .zip(scores)
        .map(|(img, &s)| ScoredSample::new(s, img.label, img.domain))
        .collect()
}

fn check_sizes(images: &[LabeledImage], crop: (usize, usize), what: &str) -> Result<()> {
    for (i, img) in images.iter().enumerate() {
        match *img.image.shape() {
            [h, w, 3] if h >= crop.0 && w >= crop.1 => {}
            ref s => {
                return Err(Error::Config(format!(
                    "{what} image {i} has shape {s:?}, smaller than the {}x{} crop",
                    crop.0, crop.1
                )))
            }
        }
    }
    Ok(())
}

/// Splits a pooled dataset according to the protocol. Under leave-one-out
/// the held-out domain is removed from training entirely; under the intra
/// protocol a fixed fraction of every (domain, class) group is held out.
pub fn split_protocol(
    images: Vec<LabeledImage>,
    protocol: Protocol,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    match protocol {
        Protocol::LeaveOneOut { held_out } => {
            let (test, train): (Vec<_>, Vec<_>) =
                images.into_iter().partition(|img| img.domain == held_out);
            if test.is_empty() {
                return Err(Error::Config(format!("held-out domain {held_out} has no images")));
            }
            if train.is_empty() {
                return Err(Error::Config("no training domains left after hold-out".into()));
            }
            Ok((train, test))
        }
        Protocol::Intra => {
            let mut groups: BTreeMap<(usize, Label), Vec<usize>> = BTreeMap::new();
            for (i, img) in images.iter().enumerate() {
                groups.entry((img.domain, img.label)).or_default().push(i);
            }
            let mut is_test = vec![false; images.len()];
            for ((domain, label), mut idx) in groups {
                if idx.len() < 2 {
                    return Err(Error::Config(format!(
                        "domain {domain} has fewer than two {label:?} images to split"
                    )));
                }
                let mut rng = stream(seed, &[TAG_SPLIT, domain as u64, u64::from(label.value())]);
                idx.shuffle(&mut rng);
                let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
                for &i in &idx[..n_test] {
                    is_test[i] = true;
                }
            }
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (img, t) in images.into_iter().zip(is_test) {
                if t {
                    test.push(img)
                } else {
                    train.push(img)
                }
            }
            Ok((train, test))
        }
    }
}

/// Loads the configured manifests and trains. Outputs go to `out_dir` when
/// given.
pub fn train(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.train_manifests.is_empty() {
        return Err(Error::Config("no training manifest given".into()));
    }
    let mut pooled = Vec::new();
    for path in &cfg.train_manifests {
        pooled.extend(load_manifest(path)?.images);
    }
    let (train_set, test_set) = match (&cfg.test_manifest, cfg.protocol) {
        (Some(test_path), protocol) => {
            let test = load_manifest(test_path)?.images;
            if let Protocol::LeaveOneOut { held_out } = protocol {
                pooled.retain(|img| img.domain != held_out);
                if test.iter().any(|img| img.domain != held_out) {
                    return Err(Error::Config(format!(
                        "test manifest contains domains other than the held-out domain {held_out}"
                    )));
                }
            }
            (pooled, test)
        }
        (None, protocol) => split_protocol(pooled, protocol, cfg.intra_test_fraction, cfg.seed)?,
    };
    train_on(cfg, &train_set, &test_set, out_dir)
}

/// Trains on `train_set` and evaluates on `test_set`.
pub fn train_on(
    cfg: &TrainConfig,
    train_set: &[LabeledImage],
    test_set: &[LabeledImage],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Config("training and test sets must be non-empty".into()));
    }
    check_sizes(train_set, cfg.crop_size, "training")?;
    check_sizes(test_set, cfg.crop_size, "test")?;
    if let Protocol::LeaveOneOut { held_out } = cfg.protocol {
        if train_set.iter().any(|img| img.domain == held_out) {
            return Err(Error::Config(format!(
                "held-out domain {held_out} leaks into the training set"
            )));
        }
    }

    let train_domains: Vec<usize> = {
        let mut d: Vec<usize> = train_set.iter().map(|i| i.domain).collect();
        d.sort_unstable();
        d.dedup();
        d
    };
    let mut test_domains: Vec<usize> = test_set.iter().map(|i| i.domain).collect();
    test_domains.sort_unstable();
    test_domains.dedup();
    if cfg.adversarial() && train_domains.len() < 2 {
        return Err(Error::Config(format!(
            "the domain discriminator needs at least 2 training domains, found {}",
            train_domains.len()
        )));
    }
    let remapped: Vec<LabeledImage> = train_set
        .iter()
        .map(|img| LabeledImage {
            image: img.image.clone(),
            label: img.label,
            domain: train_domains.binary_search(&img.domain).expect("domain listed"),
        })
        .collect();

    let mut model = LivenessModel::init(
        cfg.model(train_domains.len()),
        derive_seed(cfg.seed, &[TAG_INIT]),
    )?;
    let loss_cfg = cfg.loss();
    let pdle_cfg = cfg.pdle(cfg.seed);
    let pool = AugmentedPool {
        pool: ClassPool::new(&remapped),
        crop: cfg.crop_size,
    };
    let mut adam = AdamState::new(model.params());

    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(BufWriter::new(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };

    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut order: Vec<usize> = (0..remapped.len()).collect();
    let batches_per_epoch = remapped.len().div_ceil(cfg.batch_size);
    let total_steps = (batches_per_epoch * cfg.max_epochs) as f64;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg.learning_rate, cfg.lr_gamma);
        order.shuffle(&mut stream(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let (mut mse_sum, mut adv_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut exchanged = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let encoded = cfg.exec.try_map(chunk.len(), |j| {
                let mut rng = stream(cfg.seed, &[TAG_SAMPLE, epoch as u64, b as u64, j as u64]);
                let src = &remapped[chunk[j]];
                let (image, _) = augment(&src.image, AugmentMode::Train, cfg.crop_size, &mut rng)?;
                let anchor = LabeledImage {
                    image,
                    label: src.label,
                    domain: src.domain,
                };
                encode_one(&anchor, &pool, &pdle_cfg, &mut rng)
            })?;
            let progress = (epoch * batches_per_epoch + b) as f64 / total_steps;
            let step_loss = LossConfig {
                beta: cfg.beta_schedule.coefficient(loss_cfg.beta, progress),
                ..loss_cfg
            };
            let diverged = |what: &str| Error::Diverged {
                epoch,
                batch: b,
                what: what.to_string(),
            };
            let (batch_loss, grads) = match model.loss_and_grad(&encoded, &step_loss, cfg.exec) {
                Err(Error::NonFinite(what)) => return Err(diverged(&what)),
                other => other?,
            };
            if !batch_loss.total.is_finite() {
                return Err(diverged("loss"));
            }
            if !grads.all_finite() {
                return Err(diverged("gradient"));
            }
            adam_step(model.params_mut(), &grads, &mut adam, lr, cfg.weight_decay)?;
            if !model.params().all_finite() {
                return Err(diverged("parameter update"));
            }

            let n = encoded.len() as f64;
            mse_sum += batch_loss.mse * n;
            adv_sum += batch_loss.adv.unwrap_or(0.0) * n;
            total_sum += batch_loss.total * n;
            let records: Vec<&ExchangeRecord> = encoded.iter().filter_map(|s| s.record.as_ref()).collect();
            exchanged += records.len();
            if let (Some(w), true) = (log.as_mut(), cfg.log_exchanges) {
                serde_json::to_writer(&mut *w, &BatchExchanges { epoch, batch: b, exchanges: records })?;
                w.write_all(b"\n")?;
            }
        }
        let n = remapped.len() as f64;
        let entry = EpochLog {
            epoch,
            lr,
            mse: mse_sum / n,
            adv: model.config().has_domain_head().then_some(adv_sum / n),
            total: total_sum / n,
            exchanged,
            samples: remapped.len(),
        };
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
        }
        epochs.push(entry);
    }
    if let Some(mut w) = log {
        w.flush()?;
    }

    let train_scores = scored(train_set, &score_images(&model, train_set, cfg.exec)?);
    let test_scores = scored(test_set, &score_images(&model, test_set, cfg.exec)?);
    let train_metrics = metrics_report(&train_scores, Some(&train_scores), cfg.threshold)?;
    let metrics = metrics_report(&test_scores, Some(&train_scores), cfg.threshold)?;

    let checkpoint = match out_dir {
        Some(dir) => {
            let meta = serde_json::json!({
                "train_domains": train_domains,
                "seed": cfg.seed,
                "epochs": cfg.max_epochs,
            });
            save_checkpoint(&dir.join(CHECKPOINT_FILE), &model, meta)?;
            Some(PathBuf::from(CHECKPOINT_FILE))
        }
        None => None,
    };
    let mut report = RunReport {
        config: cfg.clone(),
        train_domains,
        test_domains,
        epochs,
        train_metrics,
        metrics,
        checkpoint,
        wall_clock_secs: 0.0,
    };
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(TrainOutcome { report, model })
}

/// Writes `report.json` and the separate wall-clock file.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(report)?)?;
    fs::write(
        dir.join(TIMING_FILE),
        serde_json::to_vec_pretty(&serde_json::json!({ "wall_clock_secs": report.wall_clock_secs }))?,
    )?;
    Ok(())
}
