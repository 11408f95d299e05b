//! Two-stage optimization with Adam and checkpoint persistence.

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::data::{bag_of_words, generate_synthetic, tokenize, Category, Counts, Dataset, Sample};
use crate::error::{CladError, Result};
use crate::losses::{contrastive_loss, reconstruction_loss, total_loss, LossBreakdown};
use crate::model::{init_params, BoundModel, Config, ModelParams};
use crate::numerics::{Scalar, Tensor, Var};
use crate::rng::{derive_seed, Rng};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_FORMAT};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const PRETRAIN_STREAM: u64 = 0x5052_4554;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// Batch-mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub stage: Stage,
    /// Epoch index within its stage, from 0.
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar = f32> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn for_params(params: &ModelParams<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ModelParams<S>, grads: &[Tensor<S>], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        let (b1, b2, eps) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2), S::lit(ADAM_EPS));
        let (one, lr) = (S::one(), S::lit(lr));
        let (c1, c2) = (S::lit(c1), S::lit(c2));
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            if !p.is_finite() {
                return Err(CladError::NonFinite("adam update"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<S: Scalar = f32> {
    /// Config with the vocabulary the parameters were built for.
    pub config: Config,
    pub params: ModelParams<S>,
    pub adam: Adam<S>,
    /// Epochs completed over both stages.
    pub epoch: usize,
    pub rng: Rng,
    pub history: Vec<EpochLoss>,
    /// Decision threshold on the anomaly score, once calibrated.
    pub threshold: Option<f64>,
}

impl<S: Scalar> TrainState<S> {
    pub fn new(config: &Config) -> Result<Self> {
        let params = init_params(config)?;
        Ok(TrainState {
            config: config.clone(),
            adam: Adam::for_params(&params),
            params,
            epoch: 0,
            rng: Rng::seeded(derive_seed(config.seed, SHUFFLE_STREAM)),
            history: Vec::new(),
            threshold: None,
        })
    }

    pub fn finetune_history(&self) -> impl Iterator<Item = &EpochLoss> {
        self.history.iter().filter(|e| e.stage == Stage::Finetune)
    }
}

/// Training copies of a dataset's normal images, tokenized against `vocab`.
pub fn training_samples(dataset: &Dataset, vocab: &[String]) -> Result<Vec<Sample>> {
    let tokens = tokenize(&dataset.descriptor, vocab)?;
    Ok(dataset
        .train_normal
        .iter()
        .map(|s| Sample {
            tokens: tokens.clone(),
            ..s.clone()
        })
        .collect())
}

fn forward_batch<S: Scalar>(model: &mut BoundModel<S>, batch: &[&Sample], config: &Config) -> Result<(Var, LossBreakdown)> {
    let n = batch.len();
    if n == 0 {
        return Err(CladError::usage("empty batch"));
    }
    let vocab_size = model.arch().vocab_size;
    let (mut zvs, mut zts, mut recons) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for sample in batch {
        let image = sample.image.cast::<S>();
        let forward = model.encode_image(&image, false)?;
        let z_t = model.encode_text(&sample.tokens)?;
        let image_recon = model.decode_image(forward.z_v)?;
        let bow_recon = model.decode_text(z_t)?;
        let image = model.tape.leaf(image);
        let bow = Tensor::from_f64(&[vocab_size], &bag_of_words(&sample.tokens, vocab_size))?;
        let bow = model.tape.leaf(bow);
        recons.push(reconstruction_loss(&mut model.tape, image, image_recon, bow, bow_recon)?);
        zvs.push(forward.z_v);
        zts.push(z_t);
    }
    let tape = &mut model.tape;
    let recon_stack = tape.stack(&recons)?;
    let recon_sum = tape.sum(recon_stack)?;
    let recon = tape.scale(recon_sum, 1.0 / n as f64)?;
    let (contrastive, contrastive_value) = if config.contrastive {
        let zv_batch = tape.stack(&zvs)?;
        let zt_batch = tape.stack(&zts)?;
        let c = contrastive_loss(tape, zv_batch, zt_batch, config.alpha, config.beta)?;
        (c, tape.value(c).item()?.as_f64())
    } else {
        // the hinge is left out of the objective entirely
        (tape.leaf(Tensor::scalar(S::zero())), 0.0)
    };
    let total = total_loss(tape, contrastive, recon, config.lambda)?;
    let breakdown = LossBreakdown {
        contrastive: contrastive_value,
        reconstruction: tape.value(recon).item()?.as_f64(),
        total: tape.value(total).item()?.as_f64(),
        batch_size: n,
    };
    Ok((total, breakdown))
}

/// Losses of one batch: per-sample reconstruction averaged over the batch,
/// plus the hinge over the batch's cross-modal pairs.
pub fn batch_loss<S: Scalar>(params: &ModelParams<S>, batch: &[&Sample], config: &Config) -> Result<LossBreakdown> {
    let mut model = BoundModel::new(params, false);
    Ok(forward_batch(&mut model, batch, config)?.1)
}

/// [`batch_loss`] and the gradient of its total for every parameter, in layout order.
pub fn batch_gradients<S: Scalar>(
    params: &ModelParams<S>,
    batch: &[&Sample],
    config: &Config,
) -> Result<(LossBreakdown, Vec<Tensor<S>>)> {
    let mut model = BoundModel::new(params, true);
    let (total, breakdown) = forward_batch(&mut model, batch, config)?;
    model.tape.backward(total)?;
    let grads = model
        .param_vars()
        .iter()
        .map(|&v| model.tape.grad(v).expect("parameters are tracked"))
        .collect();
    Ok((breakdown, grads))
}

/// One pass over shuffled `data` in full batches; a trailing partial batch is dropped.
pub fn train_epoch<S: Scalar>(state: &mut TrainState<S>, data: &[Sample], stage: Stage) -> Result<EpochLoss> {
    let config = state.config.clone();
    if data.is_empty() {
        return Err(CladError::usage("training data is empty"));
    }
    if config.batch_size > data.len() {
        return Err(CladError::usage(format!(
            "batch_size {} exceeds the {} training samples",
            config.batch_size,
            data.len()
        )));
    }
    if let Some(s) = data.iter().find(|s| s.label.is_anomalous()) {
        return Err(CladError::usage(format!("training sample {} is not normal", s.id)));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    state.rng.shuffle(&mut order);
    let mut sum = LossBreakdown::default();
    let batches = data.len() / config.batch_size;
    for chunk in order.chunks_exact(config.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
        let (loss, grads) = batch_gradients(&state.params, &batch, &config)?;
        if !loss.total.is_finite() {
            return Err(CladError::NonFinite("training loss"));
        }
        state.adam.update(&mut state.params, &grads, config.lr)?;
        sum.contrastive += loss.contrastive;
        sum.reconstruction += loss.reconstruction;
        sum.total += loss.total;
    }
    let k = batches as f64;
    let epoch_loss = EpochLoss {
        stage,
        epoch: state.history.iter().filter(|e| e.stage == stage).count(),
        loss: LossBreakdown {
            contrastive: sum.contrastive / k,
            reconstruction: sum.reconstruction / k,
            total: sum.total / k,
            batch_size: config.batch_size,
        },
    };
    state.epoch += 1;
    state.history.push(epoch_loss);
    Ok(epoch_loss)
}

/// Config with every dataset descriptor added to the vocabulary, fine-tune target first.
pub fn training_config(config: &Config, pretrain: &[Dataset], finetune: &Dataset) -> Config {
    let mut config = config.clone();
    config.extend_vocab(&finetune.descriptor);
    for d in pretrain {
        config.extend_vocab(&d.descriptor);
    }
    config
}

/// Synthetic datasets of every category except `target`, used for pretraining
/// when no other data is supplied.
pub fn synthetic_pretrain(seed: u64, target: Option<Category>, counts: Counts, image_size: usize) -> Result<Vec<Dataset>> {
    let seed = derive_seed(seed, PRETRAIN_STREAM);
    Category::ALL
        .iter()
        .filter(|&&c| Some(c) != target)
        .map(|&c| generate_synthetic(seed, c, counts, image_size))
        .collect()
}

/// Pretraining sets matching `finetune`: the other synthetic categories at the
/// same size and training count, seeded from `seed`.
pub fn default_pretrain(seed: u64, finetune: &Dataset) -> Result<Vec<Dataset>> {
    let counts = Counts {
        train: finetune.train_normal.len().max(1),
        test_normal: 0,
        test_anomalous: 0,
    };
    synthetic_pretrain(seed, finetune.category.parse().ok(), counts, finetune.image_size)
}

pub fn fit(config: &Config, pretrain: &[Dataset], finetune: &Dataset) -> Result<TrainState> {
    fit_with_progress(config, pretrain, finetune, |_| {})
}

/// Pretraining over the union of `pretrain`, then fine-tuning on `finetune`.
pub fn fit_with_progress(
    config: &Config,
    pretrain: &[Dataset],
    finetune: &Dataset,
    mut progress: impl FnMut(&EpochLoss),
) -> Result<TrainState> {
    let config = training_config(config, pretrain, finetune);
    config.validate()?;
    for d in pretrain.iter().chain([finetune]) {
        if d.image_size != config.image_size || d.channels != config.channels {
            return Err(CladError::usage(format!(
                "dataset {} has {}x{} images with {} channels; config expects {}x{} with {}",
                d.category, d.image_size, d.image_size, d.channels, config.image_size, config.image_size, config.channels
            )));
        }
    }
    let target = training_samples(finetune, &config.vocab)?;
    if target.len() < config.batch_size {
        return Err(CladError::usage(format!(
            "fine-tuning needs at least batch_size={} training samples, found {}",
            config.batch_size,
            target.len()
        )));
    }
    let mut state = TrainState::new(&config)?;
    if config.epochs_pretrain > 0 && !pretrain.is_empty() {
        let mut union = Vec::new();
        for d in pretrain {
            union.extend(training_samples(d, &config.vocab)?);
        }
        for _ in 0..config.epochs_pretrain {
            progress(&train_epoch(&mut state, &union, Stage::Pretrain)?);
        }
    }
    for _ in 0..config.epochs_finetune {
        progress(&train_epoch(&mut state, &target, Stage::Finetune)?);
    }
    Ok(state)
}
