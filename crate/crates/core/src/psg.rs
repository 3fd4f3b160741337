//! Poison sample generator: a conditional GAN whose discriminator is taught
//! that real source-class images paired with the target label are genuine.
//!
//! Each iteration the discriminator sees three kinds of pairs: non-source
//! images with their true labels (real), source images relabelled to the
//! target (real) and generated images conditioned on the target (fake). The
//! generator, always conditioned on the target label, is pushed towards
//! whatever the discriminator accepts under that label, which is largely
//! source-class imagery. Its output therefore arrives pre-labelled with the
//! target class.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, LabeledSample, PoisonedDataset, Provenance};
use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::nn::loss::{neg_log_one_minus_prob, neg_log_prob};
use crate::nn::{BnMode, Init, Layer, Network, Optimizer, Shape3, Tensor};
use crate::params::ParamVector;
use crate::rng::{derive_seed, derived_rng, Rng, TAG_PSG};

const BN_MOMENTUM: f64 = 0.1;
const GEN_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDist {
    #[default]
    StandardNormal,
}

/// Which generator objective to minimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLossForm {
    /// `-ln D(G(z|t)|t)`: drives the discriminator's score on fakes up.
    #[default]
    Nonsaturating,
    /// `-ln(1 - D(G(z|t)|t))`, minimized as written.
    NegLogOneMinus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsgConfig {
    pub iterations: u32,
    pub batch_size: usize,
    pub noise_dim: usize,
    pub noise_dist: NoiseDist,
    pub source: usize,
    pub target: usize,
    pub gen_lr: f64,
    pub disc_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub arch_scale: usize,
    pub generator_loss_form: GeneratorLossForm,
    pub seed: u64,
}

impl Default for PsgConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            batch_size: 32,
            noise_dim: 32,
            noise_dist: NoiseDist::StandardNormal,
            source: 0,
            target: 1,
            gen_lr: 2e-4,
            disc_lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            arch_scale: 8,
            generator_loss_form: GeneratorLossForm::Nonsaturating,
            seed: 0,
        }
    }
}

impl PsgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.source == self.target {
            return Err(Error::config("psg source and target must differ"));
        }
        if self.iterations == 0 {
            return Err(Error::config("psg iterations must be at least 1"));
        }
        if self.batch_size == 0 || self.noise_dim == 0 || self.arch_scale == 0 {
            return Err(Error::config("psg batch_size, noise_dim and arch_scale must be positive"));
        }
        if !(self.gen_lr > 0.0 && self.disc_lr > 0.0) {
            return Err(Error::config("psg learning rates must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::config("psg Adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Shape parameters of the generator/discriminator pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanArch {
    pub image: Shape3,
    pub num_classes: usize,
    pub noise_dim: usize,
    pub scale: usize,
}

/// Generator and discriminator networks for one [`GanArch`].
///
/// The generator maps `[z, onehot(label)]` (a 1x1 map) to an image through
/// transposed convolutions with batch norm, ending in `tanh`. The
/// discriminator sees the image with one constant plane per class appended
/// and reduces it with strided convolutions to a single realness logit.
#[derive(Clone, Debug)]
pub struct Gan {
    arch: GanArch,
    generator: Network,
    discriminator: Network,
}

impl Gan {
    pub fn new(arch: GanArch) -> Result<Self> {
        let side = arch.image.h;
        if arch.image.w != side || side < 8 || side > 64 || !side.is_power_of_two() {
            return Err(Error::config(alloc::format!(
                "gan images must be square with a power-of-two side in [8, 64], got {}x{}",
                arch.image.h,
                arch.image.w
            )));
        }
        if arch.num_classes < 2 || arch.noise_dim == 0 || arch.scale == 0 {
            return Err(Error::config("gan needs >= 2 classes, noise_dim > 0 and scale > 0"));
        }
        // number of stride-2 stages between 4x4 and the full image
        let ups = (side / 4).trailing_zeros() as usize;

        let mut g = vec![
            Layer::ConvTranspose2d { out_ch: arch.scale << ups, kernel: 4, stride: 1, pad: 0, bias: false },
            Layer::BatchNorm,
            Layer::Relu,
        ];
        for i in 1..ups {
            g.push(Layer::ConvTranspose2d {
                out_ch: arch.scale << (ups - i),
                kernel: 4,
                stride: 2,
                pad: 1,
                bias: false,
            });
            g.push(Layer::BatchNorm);
            g.push(Layer::Relu);
        }
        g.push(Layer::ConvTranspose2d { out_ch: arch.image.c, kernel: 4, stride: 2, pad: 1, bias: true });
        g.push(Layer::Tanh);
        let generator = Network::new(Shape3::new(arch.noise_dim + arch.num_classes, 1, 1), g)?;

        let mut d = Vec::new();
        for i in 0..ups {
            d.push(Layer::Conv2d { out_ch: arch.scale << i, kernel: 4, stride: 2, pad: 1, bias: false });
            d.push(Layer::BatchNorm);
            d.push(Layer::LeakyRelu { slope: 0.2 });
        }
        d.push(Layer::Conv2d { out_ch: 1, kernel: 4, stride: 1, pad: 0, bias: true });
        let discriminator = Network::new(
            Shape3::new(arch.image.c + arch.num_classes, side, side),
            d,
        )?;
        debug_assert_eq!(generator.output_shape(), arch.image);
        debug_assert_eq!(discriminator.output_shape(), Shape3::new(1, 1, 1));
        Ok(Self { arch, generator, discriminator })
    }

    pub fn arch(&self) -> GanArch {
        self.arch
    }

    pub fn generator(&self) -> &Network {
        &self.generator
    }

    pub fn discriminator(&self) -> &Network {
        &self.discriminator
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.arch.num_classes {
            return Err(Error::InvalidInput(alloc::format!("condition label {label} out of range")));
        }
        Ok(())
    }

    /// Appends one-hot condition planes to a batch of images.
    fn conditioned(&self, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
        if images.shape != self.arch.image {
            return Err(Error::shape(self.arch.image.len(), images.shape.len()));
        }
        if labels.len() != images.n {
            return Err(Error::shape(images.n, labels.len()));
        }
        let plane = self.arch.image.h * self.arch.image.w;
        let shape = self.discriminator.input_shape();
        let mut out = Tensor::zeros(images.n, shape);
        for (i, &label) in labels.iter().enumerate() {
            self.check_label(label)?;
            let dst = out.sample_mut(i);
            let img = images.sample(i);
            dst[..img.len()].copy_from_slice(img);
            let start = img.len() + label * plane;
            dst[start..start + plane].fill(1.0);
        }
        Ok(out)
    }

    fn generator_input(&self, z: &LatentBatch, label: usize) -> Result<Tensor> {
        self.check_label(label)?;
        if z.dim != self.arch.noise_dim {
            return Err(Error::shape(self.arch.noise_dim, z.dim));
        }
        let shape = self.generator.input_shape();
        let mut x = Tensor::zeros(z.rows, shape);
        for i in 0..z.rows {
            let dst = x.sample_mut(i);
            dst[..z.dim].copy_from_slice(z.row(i));
            dst[z.dim + label] = 1.0;
        }
        Ok(x)
    }

    /// Discriminator logits for a batch of (image, condition) pairs.
    pub fn discriminator_logits(
        &self,
        params: &[f64],
        images: &Tensor,
        labels: &[usize],
        bn: BnMode<'_>,
    ) -> Result<Vec<f64>> {
        let x = self.conditioned(images, labels)?;
        Ok(self.discriminator.predict(params, &x, bn)?.data)
    }

    /// Generated images `G(z|label)`.
    pub fn generate(&self, params: &[f64], z: &LatentBatch, label: usize, bn: BnMode<'_>) -> Result<Tensor> {
        let x = self.generator_input(z, label)?;
        self.generator.predict(params, &x, bn)
    }
}

/// A batch of latent vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub rows: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl LatentBatch {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Draws `b` latent vectors of `noise_dim` i.i.d. entries.
pub fn sample_noise(dist: NoiseDist, b: usize, noise_dim: usize, seed: u64) -> Result<LatentBatch> {
    if b == 0 || noise_dim == 0 {
        return Err(Error::InvalidBatch("noise batch needs b >= 1 and noise_dim >= 1".into()));
    }
    let mut rng = crate::rng::rng_from(seed);
    let data = match dist {
        NoiseDist::StandardNormal => {
            (0..b * noise_dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        }
    };
    Ok(LatentBatch { rows: b, dim: noise_dim, data })
}

/// Relabels every `source` sample as `target`; pixels and order untouched.
pub fn flip_source_labels(batch: &[LabeledSample], source: usize, target: usize) -> Result<Vec<LabeledSample>> {
    if source == target {
        return Err(Error::config("source and target labels must differ"));
    }
    Ok(batch
        .iter()
        .map(|s| LabeledSample {
            image: s.image.clone(),
            label: if s.label == source { target } else { s.label },
        })
        .collect())
}

/// Realness score `D(image | condition)` in `(0, 1)` using the running
/// batch-norm statistics in `running`.
pub fn discriminator_forward(
    gan: &Gan,
    params: &[f64],
    running: &[f64],
    image: &Image,
    condition: usize,
) -> Result<f64> {
    let x = Tensor::from_vec(1, image.shape, image.pixels.clone());
    let logit = gan.discriminator_logits(params, &x, &[condition], BnMode::Running(running))?;
    Ok(sigmoid(logit[0]))
}

fn samples_tensor(shape: Shape3, samples: &[LabeledSample]) -> Result<(Tensor, Vec<usize>)> {
    if let Some(s) = samples.iter().find(|s| s.image.shape != shape) {
        return Err(Error::shape(shape.len(), s.image.shape.len()));
    }
    let t = Tensor::stack(shape, samples.iter().map(|s| s.image.pixels.as_slice()));
    Ok((t, samples.iter().map(|s| s.label).collect()))
}

/// Value of the three discriminator terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorLoss {
    /// Mean `-ln D(x_i | y_i)` over non-source pairs.
    pub real_non_source: f64,
    /// Mean `-ln D(x_s | t)` over relabelled source pairs.
    pub real_source: f64,
    /// Mean `-ln(1 - D(x_fake | t))`.
    pub fake: f64,
}

impl DiscriminatorLoss {
    pub fn total(&self) -> f64 {
        self.real_non_source + self.real_source + self.fake
    }
}

enum Term {
    Real,
    Fake,
}

/// Adds `d term / d params` for one batch into `grad`, returning the mean term.
fn disc_term(
    gan: &Gan,
    params: &[f64],
    x: Tensor,
    term: Term,
    bn: BnMode<'_>,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = x.n as f64;
    let Some(grad) = grad else {
        let logits = gan.discriminator.predict(params, &x, bn)?;
        return Ok(logits.data.iter().map(|&l| term_value(&term, l).0).sum::<f64>() / n);
    };
    let tape = gan.discriminator.forward(params, x, bn)?;
    let out = tape.output();
    let mut g = Tensor::zeros(out.n, out.shape);
    let mut total = 0.0;
    for (i, &l) in out.data.iter().enumerate() {
        let (v, d) = term_value(&term, l);
        total += v;
        g.data[i] = d / n;
    }
    gan.discriminator.backward(params, &tape, g, grad);
    Ok(total / n)
}

fn term_value(term: &Term, logit: f64) -> (f64, f64) {
    match term {
        Term::Real => neg_log_prob(logit),
        Term::Fake => neg_log_one_minus_prob(logit),
    }
}

fn non_empty(name: &str, len: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidBatch(alloc::format!("{name} batch is empty")));
    }
    Ok(())
}

fn train_mode(running: Option<&mut [f64]>) -> BnMode<'_> {
    match running {
        Some(r) => BnMode::BatchTracking { running: r, momentum: BN_MOMENTUM },
        None => BnMode::Batch,
    }
}

/// Discriminator objective over (non-source, true label), (source, target)
/// and (fake, target) pairs. Each batch is normalized with its own batch
/// statistics. With `grad` the parameter gradient is accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    gan: &Gan,
    params: &[f64],
    real_non_source: &[LabeledSample],
    real_source_flipped: &[LabeledSample],
    fake: &Tensor,
    target: usize,
    mut running: Option<&mut [f64]>,
    mut grad: Option<&mut [f64]>,
) -> Result<DiscriminatorLoss> {
    non_empty("non-source", real_non_source.len())?;
    non_empty("source", real_source_flipped.len())?;
    non_empty("fake", fake.n)?;
    let shape = gan.arch.image;
    let (xi, yi) = samples_tensor(shape, real_non_source)?;
    let a = disc_term(gan, params, gan.conditioned(&xi, &yi)?, Term::Real, train_mode(running.as_deref_mut()), grad.as_deref_mut())?;
    let (xs, ys) = samples_tensor(shape, real_source_flipped)?;
    let b = disc_term(gan, params, gan.conditioned(&xs, &ys)?, Term::Real, train_mode(running.as_deref_mut()), grad.as_deref_mut())?;
    let labels = vec![target; fake.n];
    let c = disc_term(gan, params, gan.conditioned(fake, &labels)?, Term::Fake, train_mode(running.as_deref_mut()), grad)?;
    Ok(DiscriminatorLoss { real_non_source: a, real_source: b, fake: c })
}

/// Generator objective on `G(z|target)` scored by the discriminator under
/// the same condition. With `grad` the gradient with respect to the
/// generator parameters is accumulated into it.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    gan: &Gan,
    disc_params: &[f64],
    gen_params: &[f64],
    z: &LatentBatch,
    target: usize,
    form: GeneratorLossForm,
    gen_running: Option<&mut [f64]>,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    non_empty("noise", z.rows)?;
    let gen_bn = train_mode(gen_running);
    let gin = gan.generator_input(z, target)?;
    let gtape = gan.generator.forward(gen_params, gin, gen_bn)?;
    let fake = gtape.output().clone();
    let n = fake.n as f64;
    let labels = vec![target; fake.n];
    let dx = gan.conditioned(&fake, &labels)?;
    let value = |l: f64| match form {
        GeneratorLossForm::Nonsaturating => neg_log_prob(l),
        GeneratorLossForm::NegLogOneMinus => neg_log_one_minus_prob(l),
    };
    let Some(grad) = grad else {
        let logits = gan.discriminator.predict(disc_params, &dx, BnMode::Batch)?;
        return Ok(logits.data.iter().map(|&l| value(l).0).sum::<f64>() / n);
    };
    let dtape = gan.discriminator.forward(disc_params, dx, BnMode::Batch)?;
    let out = dtape.output();
    let mut g = Tensor::zeros(out.n, out.shape);
    let mut total = 0.0;
    for (i, &l) in out.data.iter().enumerate() {
        let (v, d) = value(l);
        total += v;
        g.data[i] = d / n;
    }
    let mut scratch = vec![0.0; gan.discriminator.param_count()];
    let gin_d = gan.discriminator.backward(disc_params, &dtape, g, &mut scratch);
    // keep only the image channels of the discriminator input gradient
    let img_len = gan.arch.image.len();
    let mut gimg = Tensor::zeros(fake.n, gan.arch.image);
    for i in 0..fake.n {
        gimg.sample_mut(i).copy_from_slice(&gin_d.sample(i)[..img_len]);
    }
    gan.generator.backward(gen_params, &gtape, gimg, grad);
    Ok(total / n)
}

/// Full training state of the generator/discriminator pair.
#[derive(Clone, Debug)]
pub struct GanState {
    pub generator_params: Vec<f64>,
    pub discriminator_params: Vec<f64>,
    pub generator_running: Vec<f64>,
    pub discriminator_running: Vec<f64>,
    gen_opt: Optimizer,
    disc_opt: Optimizer,
    pub iteration: u32,
}

/// A trained generator bound to its target label.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonGenerator {
    pub arch: GanArch,
    pub generator_params: ParamVector,
    /// Batch-norm running statistics used at sampling time.
    pub running_stats: Vec<f64>,
    pub target_label: usize,
    pub noise_dim: usize,
    pub training_iterations: u32,
    pub noise_dist: NoiseDist,
    pub id: u64,
}

/// Losses observed in one training iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub discriminator: DiscriminatorLoss,
    pub generator: f64,
}

/// Runs the poison-generator training loop one iteration at a time.
pub struct PsgTrainer {
    gan: Gan,
    config: PsgConfig,
    source: Vec<LabeledSample>,
    non_source: Vec<LabeledSample>,
    state: GanState,
    rng: Rng,
}

impl PsgTrainer {
    pub fn new(local_set: &Dataset, config: &PsgConfig) -> Result<Self> {
        config.validate()?;
        let k = local_set.num_classes();
        if config.source >= k || config.target >= k {
            return Err(Error::config("psg source/target outside the dataset's classes"));
        }
        let (source, non_source): (Vec<_>, Vec<_>) =
            local_set.samples().iter().cloned().partition(|s| s.label == config.source);
        if source.is_empty() || non_source.is_empty() {
            return Err(Error::InvalidDataset(
                "poison generator training needs source and non-source samples".into(),
            ));
        }
        let image = source[0].image.shape;
        let gan = Gan::new(GanArch { image, num_classes: k, noise_dim: config.noise_dim, scale: config.arch_scale })?;
        let mut rng = derived_rng(config.seed, &[TAG_PSG]);
        let generator_params = gan.generator.init_params(&mut rng, Init::Dcgan);
        let discriminator_params = gan.discriminator.init_params(&mut rng, Init::Dcgan);
        let state = GanState {
            gen_opt: Optimizer::adam(config.gen_lr, config.beta1, config.beta2, generator_params.len()),
            disc_opt: Optimizer::adam(config.disc_lr, config.beta1, config.beta2, discriminator_params.len()),
            generator_running: gan.generator.init_buffers(),
            discriminator_running: gan.discriminator.init_buffers(),
            generator_params,
            discriminator_params,
            iteration: 0,
        };
        Ok(Self { gan, config: config.clone(), source, non_source, state, rng })
    }

    pub fn gan(&self) -> &Gan {
        &self.gan
    }

    pub fn state(&self) -> &GanState {
        &self.state
    }

    fn draw(&mut self, pool_is_source: bool) -> Vec<LabeledSample> {
        let pool = if pool_is_source { &self.source } else { &self.non_source };
        (0..self.config.batch_size).map(|_| pool[self.rng.gen_range(0..pool.len())].clone()).collect()
    }

    /// One discriminator update followed by one generator update on freshly
    /// resampled noise.
    pub fn step(&mut self) -> Result<StepLosses> {
        let c = self.config.clone();
        let source = self.draw(true);
        let flipped = flip_source_labels(&source, c.source, c.target)?;
        let non_source = self.draw(false);

        let z = sample_noise(c.noise_dist, c.batch_size, c.noise_dim, self.rng.gen())?;
        let fake = self.gan.generate(
            &self.state.generator_params,
            &z,
            c.target,
            BnMode::BatchTracking { running: &mut self.state.generator_running, momentum: BN_MOMENTUM },
        )?;
        let mut dgrad = vec![0.0; self.state.discriminator_params.len()];
        let dloss = discriminator_loss(
            &self.gan,
            &self.state.discriminator_params,
            &non_source,
            &flipped,
            &fake,
            c.target,
            Some(&mut self.state.discriminator_running),
            Some(&mut dgrad),
        )?;
        self.ensure_finite(dloss.total(), &dgrad)?;
        self.state.disc_opt.step(&mut self.state.discriminator_params, &dgrad);

        let z = sample_noise(c.noise_dist, c.batch_size, c.noise_dim, self.rng.gen())?;
        let mut ggrad = vec![0.0; self.state.generator_params.len()];
        let gloss = generator_loss(
            &self.gan,
            &self.state.discriminator_params,
            &self.state.generator_params,
            &z,
            c.target,
            c.generator_loss_form,
            None,
            Some(&mut ggrad),
        )?;
        self.ensure_finite(gloss, &ggrad)?;
        self.state.gen_opt.step(&mut self.state.generator_params, &ggrad);
        self.state.iteration += 1;
        Ok(StepLosses { discriminator: dloss, generator: gloss })
    }

    fn ensure_finite(&self, loss: f64, grad: &[f64]) -> Result<()> {
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(alloc::format!(
                "poison generator training diverged at iteration {}",
                self.state.iteration + 1
            )));
        }
        Ok(())
    }

    /// Snapshot of the current generator.
    pub fn generator(&self) -> PoisonGenerator {
        PoisonGenerator {
            arch: self.gan.arch,
            generator_params: ParamVector::from_raw(self.state.generator_params.clone()),
            running_stats: self.state.generator_running.clone(),
            target_label: self.config.target,
            noise_dim: self.config.noise_dim,
            training_iterations: self.state.iteration,
            noise_dist: self.config.noise_dist,
            id: derive_seed(self.config.seed, &[TAG_PSG, u64::from(self.state.iteration)]),
        }
    }
}

/// Trains a poison generator for `config.iterations` iterations on the
/// attacker's clean local data.
pub fn train_psg(local_set: &Dataset, config: &PsgConfig) -> Result<PoisonGenerator> {
    Ok(train_psg_with_checkpoints(local_set, config, &[])?.0)
}

/// Like [`train_psg`], also returning generator snapshots taken after each
/// iteration count listed in `checkpoints`.
pub fn train_psg_with_checkpoints(
    local_set: &Dataset,
    config: &PsgConfig,
    checkpoints: &[u32],
) -> Result<(PoisonGenerator, Vec<PoisonGenerator>)> {
    let mut trainer = PsgTrainer::new(local_set, config)?;
    let mut snaps = Vec::new();
    let last = checkpoints.iter().copied().max().unwrap_or(0).max(config.iterations);
    let mut final_gen = None;
    for it in 1..=last {
        trainer.step()?;
        if checkpoints.contains(&it) {
            snaps.push(trainer.generator());
        }
        if it == config.iterations {
            final_gen = Some(trainer.generator());
        }
    }
    Ok((final_gen.expect("iterations >= 1"), snaps))
}

/// Samples `count` poison images from the generator, all labelled with its
/// target class.
pub fn generate_poison_set(generator: &PoisonGenerator, count: usize, seed: u64) -> Result<PoisonedDataset> {
    let provenance = Provenance { generator_id: generator.id, iterations: generator.training_iterations };
    if count == 0 {
        return PoisonedDataset::new(Vec::new(), generator.target_label, provenance);
    }
    let gan = Gan::new(generator.arch)?;
    let z = sample_noise(generator.noise_dist, count, generator.noise_dim, seed)?;
    let mut samples = Vec::with_capacity(count);
    for start in (0..count).step_by(GEN_CHUNK) {
        let rows = GEN_CHUNK.min(count - start);
        let chunk = LatentBatch {
            rows,
            dim: z.dim,
            data: z.data[start * z.dim..(start + rows) * z.dim].to_vec(),
        };
        let images = gan.generate(
            generator.generator_params.as_slice(),
            &chunk,
            generator.target_label,
            BnMode::Running(&generator.running_stats),
        )?;
        for i in 0..rows {
            let pixels = images.sample(i).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            samples.push(LabeledSample { image: Image::new(generator.arch.image, pixels)?, label: generator.target_label });
        }
    }
    PoisonedDataset::new(samples, generator.target_label, provenance)
}
