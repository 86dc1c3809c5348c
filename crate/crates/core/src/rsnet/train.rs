use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::error::{invalid, shape_mismatch, Error, Result};
use crate::grid::{AxisWeights, Image, SolverConfig};
use crate::outer::ImagingOperator;

use super::net::{rsnet_backward, rsnet_forward, rsnet_loss};
use super::RsnetParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the TV term in the loss.
    pub lambda: f64,
    pub weights: AxisWeights,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::new(3e-4);
        Self {
            learning_rate: adam.learning_rate,
            batch_size: 64,
            epochs: 3000,
            lambda: 10.0,
            weights: AxisWeights::unweighted(),
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The loss configuration; only `lambda` and `weights` matter.
    pub fn loss_config(&self) -> Result<SolverConfig> {
        SolverConfig::new(self.lambda)?.with_weights(self.weights)
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(invalid("batch size", "must be >= 1"));
        }
        self.loss_config().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: RsnetParams,
    /// Mean training loss per epoch, measured during the epoch's forward passes.
    pub epoch_losses: Vec<f64>,
}

fn check_dataset(dataset: &[Image], a: &dyn ImagingOperator) -> Result<()> {
    let first = dataset.first().ok_or(Error::EmptyDataset)?;
    let dims = first.dims();
    if a.input_dims() != dims || a.output_len() != first.pixel_count() {
        return Err(shape_mismatch(
            format!("operator from and to {}x{}", dims.0, dims.1),
            format!("{:?} -> {}", a.input_dims(), a.output_len()),
        ));
    }
    for p in dataset {
        p.require_single_channel()?;
        if p.dims() != dims {
            return Err(shape_mismatch(first.shape_str(), p.shape_str()));
        }
    }
    Ok(())
}

fn loss_and_grad(
    p: &RsnetParams,
    patch: &Image,
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<(f64, RsnetParams)> {
    let (u, tape) = rsnet_forward(patch, p)?;
    let loss = rsnet_loss(&u, patch.as_slice(), a, cfg)?;
    Ok((loss, rsnet_backward(&tape, patch.as_slice(), a, cfg)?))
}

/// Mean loss of the network over `patches`, each patch being both the
/// network input and its own observation.
pub fn mean_loss(
    p: &RsnetParams,
    patches: &[Image],
    a: &dyn ImagingOperator,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_dataset(patches, a)?;
    let losses = patches
        .par_iter()
        .map(|x| rsnet_loss(&rsnet_forward(x, p)?.0, x.as_slice(), a, cfg))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mini-batch Adam on the mean loss. Every patch is an observation `f` of
/// `a` and also the network input, so `a` must map the patch grid onto
/// itself (the identity in practice). Each epoch reshuffles with one seeded
/// generator; per-patch gradients run in parallel and are summed in batch
/// order, so results do not depend on the thread count.
pub fn train_rsnet(
    dataset: &[Image],
    p0: RsnetParams,
    a: &dyn ImagingOperator,
    tc: &TrainConfig,
) -> Result<TrainReport> {
    train_rsnet_observed(dataset, p0, a, tc, |_, _| {})
}

/// [`train_rsnet`] calling `observe(epoch, mean_loss)` after every epoch.
pub fn train_rsnet_observed(
    dataset: &[Image],
    p0: RsnetParams,
    a: &dyn ImagingOperator,
    tc: &TrainConfig,
    mut observe: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    tc.validate()?;
    check_dataset(dataset, a)?;
    let cfg = tc.loss_config()?;
    let adam = tc.adam();
    let mut params = p0;
    let mut state = AdamState::new(params.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let results = batch
                .par_iter()
                .map(|&i| loss_and_grad(&params, &dataset[i], a, &cfg))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = vec![0.0; params.param_count()];
            for (loss, g) in &results {
                total += loss;
                for (acc, x) in grad.iter_mut().zip(g.as_slice()) {
                    *acc += x;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(params.as_mut_slice(), &grad, &mut state, &adam)?;
        }
        if !params.as_slice().iter().all(|w| w.is_finite()) {
            return Err(Error::NonFinite("network weights after training step"));
        }
        let mean = total / dataset.len() as f64;
        observe(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        params,
        epoch_losses,
    })
}
