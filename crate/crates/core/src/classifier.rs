//! The image classifier trained by every federation client.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Image, LabeledSample, Shard};
use crate::error::{Error, Result};
use crate::math::argmax;
use crate::nn::loss::softmax_cross_entropy;
use crate::nn::{BnMode, Init, Layer, Network, Optimizer, OptimizerKind, Shape3, Tensor};
use crate::params::ParamVector;
use crate::rng::rng_from;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassifierArch {
    /// Single dense layer over raw pixels.
    Linear,
    /// conv3x3-relu-pool, conv3x3-relu-pool, dense-relu, dense.
    Cnn { conv1: usize, conv2: usize, hidden: usize },
}

impl Default for ClassifierArch {
    fn default() -> Self {
        ClassifierArch::Cnn { conv1: 8, conv2: 16, hidden: 32 }
    }
}

/// Local optimization settings for one client round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    net: Network,
    num_classes: usize,
}

impl Classifier {
    pub fn new(arch: ClassifierArch, input: Shape3, num_classes: usize) -> Result<Self> {
        let layers = match arch {
            ClassifierArch::Linear => vec![Layer::Dense { outputs: num_classes }],
            ClassifierArch::Cnn { conv1, conv2, hidden } => {
                if input.h % 4 != 0 || input.w % 4 != 0 {
                    return Err(Error::config("cnn classifier needs image sides divisible by 4"));
                }
                vec![
                    Layer::Conv2d { out_ch: conv1, kernel: 3, stride: 1, pad: 1, bias: true },
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Conv2d { out_ch: conv2, kernel: 3, stride: 1, pad: 1, bias: true },
                    Layer::Relu,
                    Layer::MaxPool2,
                    Layer::Dense { outputs: hidden },
                    Layer::Relu,
                    Layer::Dense { outputs: num_classes },
                ]
            }
        };
        Ok(Self { net: Network::new(input, layers)?, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> Shape3 {
        self.net.input_shape()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        ParamVector::from_raw(self.net.init_params(&mut rng_from(seed), Init::FanIn))
    }

    fn batch<'a>(&self, images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor> {
        let shape = self.net.input_shape();
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.shape != shape {
                return Err(Error::shape(shape.len(), img.shape.len()));
            }
            data.extend_from_slice(&img.pixels);
            n += 1;
        }
        Ok(Tensor::from_vec(n, shape, data))
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::shape(self.param_count(), params.dim()));
        }
        Ok(())
    }

    /// Raw class scores, one row per image.
    pub fn logits(&self, params: &ParamVector, images: &[&Image]) -> Result<Tensor> {
        self.check_params(params)?;
        let x = self.batch(images.iter().copied())?;
        self.net.predict(params.as_slice(), &x, BnMode::Batch)
    }

    /// Argmax predictions; ties go to the lowest class index.
    pub fn predict(&self, params: &ParamVector, samples: &[LabeledSample]) -> Result<Vec<usize>> {
        self.check_params(params)?;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let x = self.batch(chunk.iter().map(|s| &s.image))?;
            let y = self.net.predict(params.as_slice(), &x, BnMode::Batch)?;
            out.extend((0..y.n).map(|i| argmax(y.sample(i))));
        }
        Ok(out)
    }

    /// Mean cross-entropy and its gradient over `samples`.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        samples: &[&LabeledSample],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_params(params)?;
        let x = self.batch(samples.iter().map(|s| &s.image))?;
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidInput(alloc::format!("label {l} out of range")));
        }
        let tape = self.net.forward(params.as_slice(), x, BnMode::Batch)?;
        let (loss, grad_out) = softmax_cross_entropy(tape.output(), &labels);
        let mut grad = vec![0.0; self.param_count()];
        self.net.backward(params.as_slice(), &tape, grad_out, &mut grad);
        Ok((loss, grad))
    }

    pub fn loss(&self, params: &ParamVector, samples: &[LabeledSample]) -> Result<f64> {
        let refs: Vec<&LabeledSample> = samples.iter().collect();
        let mut total = 0.0;
        for chunk in refs.chunks(EVAL_BATCH) {
            let logits = self.logits(params, &chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
            total += softmax_cross_entropy(&logits, &labels).0 * chunk.len() as f64;
        }
        Ok(total / samples.len().max(1) as f64)
    }

    /// Mini-batch training on a client shard for `opts.epochs` passes. A fresh
    /// optimizer is created per call; batch order comes from `seed`.
    pub fn local_train(
        &self,
        params: &ParamVector,
        shard: &Shard,
        opts: &TrainOptions,
        seed: u64,
    ) -> Result<ParamVector> {
        self.check_params(params)?;
        if opts.epochs == 0 {
            return Ok(params.clone());
        }
        if shard.is_empty() {
            return Err(Error::EmptyShard);
        }
        if opts.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let mut rng = rng_from(seed);
        let mut current = params.clone();
        let mut opt = Optimizer::new(opts.optimizer, opts.lr, 0.9, 0.999, self.param_count());
        let mut order: Vec<usize> = (0..shard.len()).collect();
        for epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(opts.batch_size) {
                let samples: Vec<&LabeledSample> = batch.iter().map(|&i| &shard.samples[i]).collect();
                let (loss, grad) = self.loss_and_grad(&current, &samples)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Divergence(alloc::format!(
                        "local training loss {loss} in epoch {epoch}"
                    )));
                }
                opt.step(current.as_mut_slice(), &grad);
            }
        }
        if !current.is_finite() {
            return Err(Error::Divergence("local training produced non-finite parameters".into()));
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_texture_dataset;

    fn sample(pixels: Vec<f64>, label: usize) -> LabeledSample {
        let shape = Shape3::new(1, 1, pixels.len());
        LabeledSample { image: Image::new(shape, pixels).unwrap(), label }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let clf = Classifier::new(ClassifierArch::default(), Shape3::new(1, 8, 8), 3).unwrap();
        let p = clf.init_params(1);
        let ds = synth_texture_dataset(3, 2, 8, 0).unwrap();
        let shard = Shard::from_samples(ds.samples().to_vec());
        let opts = TrainOptions { epochs: 0, lr: 0.1, batch_size: 4, optimizer: OptimizerKind::Adam };
        assert_eq!(clf.local_train(&p, &shard, &opts, 3).unwrap(), p);
    }

    #[test]
    fn empty_shard_is_an_error() {
        let clf = Classifier::new(ClassifierArch::Linear, Shape3::new(1, 1, 2), 2).unwrap();
        let p = clf.init_params(0);
        let opts = TrainOptions { epochs: 1, lr: 0.1, batch_size: 4, optimizer: OptimizerKind::Sgd };
        assert_eq!(
            clf.local_train(&p, &Shard::from_samples(vec![]), &opts, 0),
            Err(Error::EmptyShard)
        );
    }

    #[test]
    fn linear_single_step_matches_hand_gradient() {
        // W is 2x3, b is 2; x = [0.5, -1, 0.8], label 1.
        let clf = Classifier::new(ClassifierArch::Linear, Shape3::new(1, 1, 3), 2).unwrap();
        let w = [0.1, -0.2, 0.3, 0.0, 0.4, -0.1];
        let b = [0.05, -0.05];
        let mut raw = w.to_vec();
        raw.extend_from_slice(&b);
        let params = ParamVector::new(raw.clone()).unwrap();
        let x = [0.5, -1.0, 0.8];
        let shard = Shard::from_samples(vec![sample(x.to_vec(), 1)]);

        // hand oracle: z = Wx + b, p = softmax(z), dz = p - onehot
        let z0 = 0.05 + 0.2 + 0.24 + 0.05;
        let z1 = 0.0 - 0.4 - 0.08 - 0.05;
        let e0 = libm::exp(z0);
        let e1 = libm::exp(z1);
        let p0 = e0 / (e0 + e1);
        let dz = [p0, (1.0 - p0) - 1.0];
        let lr = 0.3;
        let mut expected = raw.clone();
        for o in 0..2 {
            for i in 0..3 {
                expected[o * 3 + i] -= lr * dz[o] * x[i];
            }
            expected[6 + o] -= lr * dz[o];
        }

        let opts = TrainOptions { epochs: 1, lr, batch_size: 1, optimizer: OptimizerKind::Sgd };
        let got = clf.local_train(&params, &shard, &opts, 0).unwrap();
        for (g, e) in got.as_slice().iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn training_reduces_loss_on_separable_shard() {
        let ds = synth_texture_dataset(4, 10, 16, 21).unwrap();
        let clf = Classifier::new(ClassifierArch::default(), Shape3::new(1, 16, 16), 4).unwrap();
        let p = clf.init_params(2);
        let shard = Shard::from_samples(ds.samples().to_vec());
        let before = clf.loss(&p, ds.samples()).unwrap();
        let opts = TrainOptions { epochs: 5, lr: 1e-3, batch_size: 8, optimizer: OptimizerKind::Adam };
        let trained = clf.local_train(&p, &shard, &opts, 4).unwrap();
        let after = clf.loss(&trained, ds.samples()).unwrap();
        assert!(after < before, "{after} >= {before}");
        assert_eq!(trained, clf.local_train(&p, &shard, &opts, 4).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let clf = Classifier::new(ClassifierArch::Linear, Shape3::new(1, 1, 2), 2).unwrap();
        let params = ParamVector::new(vec![1e308, 1e308, -1e308, -1e308, 0.0, 0.0]).unwrap();
        let shard = Shard::from_samples(vec![sample(vec![1.0, 1.0], 0)]);
        let opts = TrainOptions { epochs: 1, lr: 1.0, batch_size: 1, optimizer: OptimizerKind::Sgd };
        assert!(matches!(clf.local_train(&params, &shard, &opts, 0), Err(Error::Divergence(_))));
    }
}
