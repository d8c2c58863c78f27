//! Seeded training on in-memory volumes.

use serde::Serialize;

use crate::autograd::Tape;
use crate::data::{augment, normalize_nonzero, random_crop, AugmentParams, Volume};
use crate::error::{Error, Result};
use crate::loss::segmentation_loss;
use crate::metrics::{region_extract, MetricsReport};
use crate::model::MmriNet;
use crate::nn::{Ctx, ForwardOptions, ParamStore};
use crate::ops::sigmoid;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    pub steps: usize,
    /// Gradients of this many crops are averaged per optimizer step.
    pub batch_size: usize,
    pub crop: [usize; 3],
    pub seed: u64,
    pub augment: bool,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 1,
            crop: [32; 3],
            seed: 7,
            augment: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    /// Training loss per optimizer step (mean over the batch).
    pub losses: Vec<f64>,
    /// Eval-mode loss of the final logits on the whole training volume.
    pub final_eval_loss: f64,
    pub metrics: MetricsReport,
}

/// A normalized image with its label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Volume,
    pub label: Volume,
}

impl Sample {
    pub fn new(image: &Volume, label: &Volume) -> Result<Self> {
        image.expect_channels(4, "image")?;
        label.expect_channels(3, "label")?;
        if image.dims() != label.dims() {
            return Err(Error::shape(
                "sample",
                format!("image extents {:?} vs label extents {:?}", image.dims(), label.dims()),
            ));
        }
        if label.data.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("label volume is not binary"));
        }
        Ok(Self {
            image: normalize_nonzero(image),
            label: label.clone(),
        })
    }
}

/// Eval-mode loss and metrics of `net` on a whole sample.
pub fn evaluate(net: &MmriNet, store: &ParamStore<f32>, sample: &Sample) -> Result<(f64, MetricsReport)> {
    let tape = Tape::no_grad();
    let cx = Ctx::new(&tape, store, ForwardOptions::eval());
    let out = net.forward(&cx, &tape.constant(sample.image.data.clone()))?;
    let logits = out.logits.value();
    let loss = segmentation_loss(logits, &sample.label.data)?;
    let pred = region_extract(&logits.map(sigmoid), 0.5)?;
    let truth = region_extract(&sample.label.data, 0.5)?;
    let metrics = MetricsReport::evaluate(&pred, &truth, sample.label.spacing_f64(), None)?;
    Ok((loss, metrics))
}

/// Train on crops of `sample`, reporting every step's loss to `on_step`.
pub fn train(
    net: &MmriNet,
    store: &mut ParamStore<f32>,
    sample: &Sample,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    net.config().check_input(&[4, cfg.crop[0], cfg.crop[1], cfg.crop[2]])?;
    let mut opt = AdamW::new(cfg.optimizer, store);
    let mut losses = Vec::with_capacity(cfg.steps);
    let weights = net.config().ds_weights;
    for step in 0..cfg.steps {
        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let mut step_loss = 0.0;
        for b in 0..cfg.batch_size {
            let stream = (step * cfg.batch_size + b) as u64;
            let mut rng = Rng::for_stream(cfg.seed, stream);
            let (mut img, mut lab) = random_crop(&sample.image, &sample.label, cfg.crop, &mut rng)?;
            if cfg.augment {
                let p = AugmentParams::sample(img.channels(), &mut rng);
                (img, lab) = augment(&img, &lab, &p)?;
            }
            let tape = Tape::new();
            let cx = Ctx::new(&tape, store, ForwardOptions::train(rng.next_u64()));
            let out = net.forward(&cx, &tape.constant(img.data))?;
            let loss = match &out.aux {
                Some([a3, a2, a1]) => tape.deep_supervision_loss([a3, a2, a1, &out.logits], &lab.data, weights)?,
                None => tape.segmentation_loss(&out.logits, &lab.data)?,
            };
            step_loss += loss.value().item() as f64;
            let g = cx.param_grads(&tape.backward(&loss)?);
            let updates = cx.take_updates();
            drop(cx);
            store.apply_running_updates(updates);
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        a.add_assign(gi);
                    }
                }
            }
        }
        let mut grads = grads.expect("batch size is positive");
        if cfg.batch_size > 1 {
            let inv = 1.0 / cfg.batch_size as f32;
            for g in &mut grads {
                *g = g.scale(inv);
            }
        }
        let loss = step_loss / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::State {
                op: "train",
                detail: format!("non-finite loss at step {step}"),
            });
        }
        opt.step(store, &grads)?;
        losses.push(loss);
        on_step(step, loss);
    }
    let (final_eval_loss, metrics) = evaluate(net, store, sample)?;
    Ok(TrainReport {
        losses,
        final_eval_loss,
        metrics,
    })
}
