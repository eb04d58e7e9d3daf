//! Two-phase training: image-only baseline, then fine-tuning of a fusion
//! model whose shared weights start from the baseline.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{detection_loss, LossOutput, LossWeights};
use super::optim::{Adam, AdamConfig};
use super::targets::assign_targets;
use crate::autodiff::Graph;
use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, DecodeSettings};
use crate::model::{DetectorModel, ParamStore};
use crate::tensor::Tensor;
use crate::text::TextProvider;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Baseline,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossWeights,
    pub decode: DecodeSettings,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 5,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossWeights::default(),
            decode: DecodeSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample training loss.
    pub loss: f64,
    /// `None` when the dataset has no validation split.
    pub val_map50: Option<f64>,
    /// Wall time of the optimisation pass, validation excluded.
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
    pub steps: u64,
    /// Ground-truth boxes that matched no anchor, summed over one pass of the training split.
    pub unmatched_gt: usize,
}

impl TrainOutcome {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,val_map50\n");
        for e in &self.curve {
            let v = e.val_map50.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, v));
        }
        s
    }
}

/// Loss and per-parameter gradients (registry order) for one sample.
pub fn sample_gradients(
    model: &DetectorModel<f32>,
    sample: &Sample,
    text: Option<&Tensor<f32>>,
    loss_weights: &LossWeights,
) -> Result<(LossOutput<f32>, Vec<Tensor<f32>>)> {
    let geo = model.config().geometry();
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let img = g.constant(sample.image.to_tensor());
    let txt = text.map(|t| g.constant(t.clone()));
    let out = model.forward(&mut g, &p, img, txt)?;
    let targets = assign_targets(&sample.annotations, &geo);
    let maps: Vec<&Tensor<f32>> = out.maps.iter().map(|&v| g.value(v)).collect();
    let loss = detection_loss(&maps, &targets, &geo, loss_weights)?;
    if !loss.total.is_finite() {
        return Err(Error::Numerical {
            name: "loss".into(),
            detail: format!("sample `{}` gave {}", sample.id, loss.total),
        });
    }
    // sum_s <map_s, dL/dmap_s> has exactly the loss gradient with respect to each map
    let mut total = None;
    for (&m, grad) in out.maps.iter().zip(&loss.grads) {
        let t = g.weighted_sum(m, grad)?;
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    g.backward(total.expect("three scales"))?;
    let grads = p
        .vars()
        .iter()
        .zip(model.params().iter())
        .map(|(&v, (_, t))| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss, grads))
}

fn check_phase(model: &DetectorModel<f32>, phase: Phase) -> Result<()> {
    match phase {
        Phase::Baseline if model.has_fusion() => Err(Error::Usage(
            "the baseline phase trains an image-only model; fusion models are fine-tuned from a baseline".into(),
        )),
        Phase::Finetune if !model.has_fusion() => {
            Err(Error::Usage("fine-tuning needs a model with cross-attention modules".into()))
        }
        Phase::Finetune if !model.initialized_from_store() => Err(Error::Usage(
            "fine-tuning must start from a trained baseline: load its weights first".into(),
        )),
        _ => Ok(()),
    }
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best validation mAP@0.5 (the last epoch when there is no
/// validation split). `on_epoch` sees every log line as it is produced.
pub fn train(
    model: &mut DetectorModel<f32>,
    ds: &Dataset,
    phase: Phase,
    settings: &TrainSettings,
    text: &TextProvider,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    check_phase(model, phase)?;
    if settings.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let train_set: Vec<&Sample> = ds.split(Split::Train).collect();
    if train_set.is_empty() {
        return Err(Error::Usage("dataset has no training samples".into()));
    }
    // the baseline never touches descriptions
    let texts: Vec<Option<Tensor<f32>>> = match phase {
        Phase::Baseline => vec![None; train_set.len()],
        Phase::Finetune => train_set.iter().map(|s| text.sequence(s).map(Some)).collect::<Result<_>>()?,
    };
    let geo = model.config().geometry();
    let unmatched_gt = train_set.iter().map(|s| assign_targets(&s.annotations, &geo).unmatched).sum();
    let has_val = ds.count(Split::Val) > 0;

    let mut adam = Adam::new(settings.adam.clone(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(settings.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for epoch in 1..=settings.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let mut acc: Option<Vec<Tensor<f32>>> = None;
            for &i in batch {
                let (loss, grads) = sample_gradients(model, train_set[i], texts[i].as_ref(), &settings.loss)?;
                loss_sum += loss.total;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.add_assign(y)?;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let mut grads = acc.expect("non-empty batch");
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            adam.update(model.params_mut(), &grads)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        let val_map50 = if has_val {
            Some(evaluate(model, ds, Split::Val, text, &settings.decode)?.all.ap50)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            loss: loss_sum / train_set.len() as f64,
            val_map50,
            seconds,
        };
        on_epoch(&log);
        let score = val_map50.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().map_or(true, |(b, _, _)| score > *b || !has_val) {
            best = Some((score, epoch, model.params().clone()));
        }
        curve.push(log);
    }
    let best_epoch = match best {
        Some((_, e, params)) => {
            *model.params_mut() = params;
            e
        }
        None => 0,
    };
    Ok(TrainOutcome {
        curve,
        best_epoch,
        steps: adam.step,
        unmatched_gt,
    })
}
