//! Encoder/decoder assembly, end-to-end training through the channel, and
//! per-round inference for the single-round baseline and the two-round
//! multi-task system.

use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{normalize_power, normalize_power_backward, ChannelConfig, ChannelDraw, EncodedBlock, ReceivedBlock};
use crate::dataset::{self, Dataset, Sample};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, cross_entropy_grad, load_checkpoint, save_checkpoint, Activation, Adam, Gradients, LayerSpec,
    Mode, Network, Tensor,
};
use crate::protocol::DecoderOutput;
use crate::rng::{self, tag};

/// Samples per gradient-accumulation chunk. Chunks are reduced in a fixed
/// order, so the summed gradient does not depend on the thread count.
const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub n_c: usize,
    pub n_c1: usize,
    pub n_c2: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Width of the decoder's middle dense layer; `n_c` when absent.
    #[serde(default)]
    pub decoder_hidden: Option<usize>,
}

fn default_classes() -> usize {
    dataset::NUM_CLASSES
}

impl ArchitectureConfig {
    /// `n_c1 = n_c2 = n_c`, ten classes.
    pub fn symmetric(n_c: usize) -> Self {
        ArchitectureConfig {
            n_c,
            n_c1: n_c,
            n_c2: n_c,
            num_classes: dataset::NUM_CLASSES,
            decoder_hidden: None,
        }
    }

    pub fn hidden(&self) -> usize {
        self.decoder_hidden.unwrap_or(self.n_c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 || self.n_c1 == 0 || self.n_c2 == 0 {
            return Err(Error::Config("channel-use budgets must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.decoder_hidden == Some(0) {
            return Err(Error::Config("decoder_hidden must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight `w` of the Round-1 loss in `w * l1 + (1 - w) * l2`.
    pub w: f64,
    pub seed: u64,
    #[serde(default)]
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch: 64,
            lr: 1e-3,
            w: 0.5,
            seed: 0,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config(format!("loss weight w = {} outside [0, 1]", self.w)));
        }
        Ok(())
    }
}

fn conv(filters: usize) -> LayerSpec {
    LayerSpec::Conv2D {
        filters,
        kernel: 3,
        activation: Activation::Relu,
    }
}

/// Convolutional encoder ending in a linear dense layer of `out_size` symbols.
pub fn build_encoder(out_size: usize, seed: u64) -> Result<Network> {
    if out_size == 0 {
        return Err(Error::arg("encoder output size must be >= 1"));
    }
    let pool = || LayerSpec::MaxPool2D { pool: 2 };
    let drop = || LayerSpec::Dropout { rate: 0.25 };
    let specs = vec![
        conv(32),
        conv(32),
        pool(),
        drop(),
        conv(64),
        conv(64),
        pool(),
        drop(),
        conv(128),
        conv(128),
        pool(),
        drop(),
        LayerSpec::Flatten,
        LayerSpec::Dense {
            units: 512,
            activation: Activation::Relu,
        },
        drop(),
        LayerSpec::Dense {
            units: out_size,
            activation: Activation::Linear,
        },
    ];
    Network::new(&[dataset::CHANNELS, dataset::HEIGHT, dataset::WIDTH], specs, seed)
}

/// Dense decoder: `in_size` (ReLU), dropout 0.1, `hidden` (ReLU), SoftMax.
pub fn build_decoder(in_size: usize, hidden: usize, num_classes: usize, seed: u64) -> Result<Network> {
    if in_size == 0 || hidden == 0 || num_classes < 2 {
        return Err(Error::arg(format!(
            "invalid decoder sizes: in {in_size}, hidden {hidden}, classes {num_classes}"
        )));
    }
    Network::new(
        &[in_size],
        vec![
            LayerSpec::Dense {
                units: in_size,
                activation: Activation::Relu,
            },
            LayerSpec::Dropout { rate: 0.1 },
            LayerSpec::Dense {
                units: hidden,
                activation: Activation::Relu,
            },
            LayerSpec::Dense {
                units: num_classes,
                activation: Activation::Softmax,
            },
        ],
        seed,
    )
}

fn out_len(net: &Network) -> usize {
    net.output_shape().iter().product()
}

fn in_len(net: &Network) -> usize {
    net.input_shape().iter().product()
}

/// Single-round encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SrstlModel {
    pub encoder: Network,
    pub decoder: Network,
}

impl SrstlModel {
    pub fn new(arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        Self::from_parts(
            build_encoder(arch.n_c1, rng::derive_seed(seed, &[tag::INIT, 1]))?,
            build_decoder(arch.n_c1, arch.hidden(), arch.num_classes, rng::derive_seed(seed, &[tag::INIT, 2]))?,
        )
    }

    pub fn from_parts(encoder: Network, decoder: Network) -> Result<Self> {
        if out_len(&encoder) != in_len(&decoder) {
            return Err(Error::arg(format!(
                "encoder emits {} symbols, decoder expects {}",
                out_len(&encoder),
                in_len(&decoder)
            )));
        }
        Ok(SrstlModel { encoder, decoder })
    }

    pub fn channel_uses(&self) -> usize {
        out_len(&self.encoder)
    }
}

/// Two encoder/decoder heads; decoder 2 reads `[r1, r2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MrmtlModel {
    pub encoder1: Network,
    pub encoder2: Network,
    pub decoder1: Network,
    pub decoder2: Network,
    pub loss_weight: f64,
}

impl MrmtlModel {
    pub fn new(arch: &ArchitectureConfig, loss_weight: f64, seed: u64) -> Result<Self> {
        arch.validate()?;
        let s = |i| rng::derive_seed(seed, &[tag::INIT, i]);
        Self::from_parts(
            build_encoder(arch.n_c1, s(1))?,
            build_encoder(arch.n_c2, s(3))?,
            build_decoder(arch.n_c1, arch.hidden(), arch.num_classes, s(2))?,
            build_decoder(arch.n_c1 + arch.n_c2, arch.hidden(), arch.num_classes, s(4))?,
            loss_weight,
        )
    }

    pub fn from_parts(
        encoder1: Network,
        encoder2: Network,
        decoder1: Network,
        decoder2: Network,
        loss_weight: f64,
    ) -> Result<Self> {
        let (n1, n2) = (out_len(&encoder1), out_len(&encoder2));
        if in_len(&decoder1) != n1 {
            return Err(Error::arg(format!("decoder 1 expects {} inputs, round 1 sends {n1}", in_len(&decoder1))));
        }
        if in_len(&decoder2) != n1 + n2 {
            return Err(Error::arg(format!(
                "decoder 2 expects {} inputs, rounds send {n1} + {n2}",
                in_len(&decoder2)
            )));
        }
        if encoder1.input_shape() != encoder2.input_shape() {
            return Err(Error::arg("encoders disagree on input shape"));
        }
        if !(0.0..=1.0).contains(&loss_weight) {
            return Err(Error::arg(format!("loss weight {loss_weight} outside [0, 1]")));
        }
        Ok(MrmtlModel {
            encoder1,
            encoder2,
            decoder1,
            decoder2,
            loss_weight,
        })
    }

    pub fn n_c1(&self) -> usize {
        out_len(&self.encoder1)
    }

    pub fn n_c2(&self) -> usize {
        out_len(&self.encoder2)
    }

    fn networks(&self) -> [&Network; 4] {
        [&self.encoder1, &self.decoder1, &self.encoder2, &self.decoder2]
    }

    fn networks_mut(&mut self) -> [&mut Network; 4] {
        [&mut self.encoder1, &mut self.decoder1, &mut self.encoder2, &mut self.decoder2]
    }
}

/// Anything with a Round-1 encoder/decoder pair.
pub trait RoundOne {
    fn round1(&self) -> (&Network, &Network);
}

impl RoundOne for SrstlModel {
    fn round1(&self) -> (&Network, &Network) {
        (&self.encoder, &self.decoder)
    }
}

impl RoundOne for MrmtlModel {
    fn round1(&self) -> (&Network, &Network) {
        (&self.encoder1, &self.decoder1)
    }
}

/// Power-normalizes an encoder output; every transmission goes through here.
fn encode_block(raw: &[f64]) -> Result<EncodedBlock> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("encoder produced a non-finite symbol".into()));
    }
    let block = normalize_power(raw)?;
    debug_assert!(
        block.degenerate || (block.mean_square() - 1.0).abs() < 1e-6,
        "unnormalized block reached the channel"
    );
    Ok(block)
}

fn decode(decoder: &Network, symbols: Vec<f64>, round: u8) -> Result<DecoderOutput> {
    let probs = decoder.forward(&Tensor::vector(symbols), Mode::Inference, &mut rng::stream(0, &[]))?;
    Ok(DecoderOutput::new(probs.into_vec(), round))
}

/// Round 1: encode, transmit over a fresh channel instance, decode.
/// Returns the decision and `r1`, which Round 2 reuses.
pub fn infer_round1<M: RoundOne, R: Rng>(
    model: &M,
    input: &Tensor,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(DecoderOutput, ReceivedBlock)> {
    let (encoder, decoder) = model.round1();
    let raw = encoder.forward(input, Mode::Inference, rng)?;
    let block = encode_block(raw.data())?;
    let r1 = ChannelDraw::sample(cfg, block.len(), rng).apply(&block.symbols, 1)?;
    Ok((decode(decoder, r1.symbols.clone(), 1)?, r1))
}

/// Round 2: transmit `E2(x)` over a fresh channel instance and decode the
/// concatenation `[r1, r2]` with decoder 2. `r1` is reused, not re-sent.
pub fn infer_round2<R: Rng>(
    model: &MrmtlModel,
    input: &Tensor,
    r1: &ReceivedBlock,
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<DecoderOutput> {
    if r1.symbols.len() != model.n_c1() {
        return Err(Error::Shape {
            layer: 0,
            kind: "decoder 2 round-1 input",
            expected: vec![model.n_c1()],
            got: vec![r1.symbols.len()],
        });
    }
    let raw = model.encoder2.forward(input, Mode::Inference, rng)?;
    let block = encode_block(raw.data())?;
    let r2 = ChannelDraw::sample(cfg, block.len(), rng).apply(&block.symbols, 2)?;
    let mut joint = r1.symbols.clone();
    joint.extend_from_slice(&r2.symbols);
    decode(&model.decoder2, joint, 2)
}

/// Channel stream for evaluating `sample_index` in `round` under master `seed`.
pub fn round_stream(seed: u64, sample_index: usize, round: u8) -> rng::Stream {
    rng::stream(seed, &[tag::EVAL, sample_index as u64, round as u64])
}

/// Every random quantity of one training forward pass, fixed in advance.
#[derive(Clone, Debug)]
pub struct FrozenNoise {
    pub dropout_seed: u64,
    pub round1: ChannelDraw,
    pub round2: ChannelDraw,
}

impl FrozenNoise {
    pub fn sample<R: Rng>(cfg: &ChannelConfig, n_c1: usize, n_c2: usize, rng: &mut R) -> Self {
        FrozenNoise {
            dropout_seed: rng.next_u64(),
            round1: ChannelDraw::sample(cfg, n_c1, rng),
            round2: ChannelDraw::sample(cfg, n_c2, rng),
        }
    }

    fn dropout(&self, net: u64) -> rng::Stream {
        rng::stream(self.dropout_seed, &[tag::DROPOUT, net])
    }
}

/// Losses, Round-k probabilities and per-network gradients of one sample.
#[derive(Clone, Debug)]
pub struct JointStep {
    pub loss: f64,
    pub loss1: f64,
    pub loss2: f64,
    pub probs1: Vec<f64>,
    pub probs2: Vec<f64>,
    /// Gradients for encoder 1, decoder 1, encoder 2, decoder 2.
    pub grads: [Gradients; 4],
}

/// Encoder half of one round: forward, normalize, channel; and its backward.
struct RoundPass {
    raw: Vec<f64>,
    tape: crate::nn::Tape,
    received: ReceivedBlock,
}

fn round_forward(encoder: &Network, input: &Tensor, draw: &ChannelDraw, round: u8, dropout: &mut rng::Stream) -> Result<RoundPass> {
    let (raw, tape) = encoder.forward_recorded(input, dropout)?;
    let block = encode_block(raw.data())?;
    let received = draw.apply(&block.symbols, round)?;
    Ok(RoundPass {
        raw: raw.into_vec(),
        tape,
        received,
    })
}

fn round_backward(encoder: &Network, pass: &RoundPass, draw: &ChannelDraw, grad_received: &[f64]) -> Result<Gradients> {
    let grad_symbols = draw.backward(grad_received);
    let grad_raw = normalize_power_backward(&pass.raw, &grad_symbols);
    Ok(encoder.backward(&pass.tape, &Tensor::vector(grad_raw))?.params)
}

/// Joint loss `w * l1 + (1 - w) * l2` of one sample under frozen noise, with
/// gradients into all four networks.
pub fn mrmtl_step(model: &MrmtlModel, input: &Tensor, label: usize, w: f64, noise: &FrozenNoise) -> Result<JointStep> {
    let p1 = round_forward(&model.encoder1, input, &noise.round1, 1, &mut noise.dropout(1))?;
    let p2 = round_forward(&model.encoder2, input, &noise.round2, 2, &mut noise.dropout(3))?;
    let (probs1, t_d1) = model
        .decoder1
        .forward_recorded(&Tensor::vector(p1.received.symbols.clone()), &mut noise.dropout(2))?;
    let mut joint = p1.received.symbols.clone();
    joint.extend_from_slice(&p2.received.symbols);
    let (probs2, t_d2) = model.decoder2.forward_recorded(&Tensor::vector(joint), &mut noise.dropout(4))?;
    let loss1 = cross_entropy(&probs1, label)?;
    let loss2 = cross_entropy(&probs2, label)?;

    let mut g1 = cross_entropy_grad(&probs1, label)?;
    g1.scale(w);
    let mut g2 = cross_entropy_grad(&probs2, label)?;
    g2.scale(1.0 - w);
    let b_d1 = model.decoder1.backward(&t_d1, &g1)?;
    let b_d2 = model.decoder2.backward(&t_d2, &g2)?;
    let n1 = model.n_c1();
    let grad_r1: Vec<f64> = b_d1
        .input
        .data()
        .iter()
        .zip(&b_d2.input.data()[..n1])
        .map(|(a, b)| a + b)
        .collect();
    let g_e1 = round_backward(&model.encoder1, &p1, &noise.round1, &grad_r1)?;
    let g_e2 = round_backward(&model.encoder2, &p2, &noise.round2, &b_d2.input.data()[n1..])?;
    Ok(JointStep {
        loss: w * loss1 + (1.0 - w) * loss2,
        loss1,
        loss2,
        probs1: probs1.into_vec(),
        probs2: probs2.into_vec(),
        grads: [g_e1, b_d1.params, g_e2, b_d2.params],
    })
}

/// Cross-entropy of one sample through the single-round pipeline under
/// frozen noise, with encoder and decoder gradients.
pub fn srstl_step(model: &SrstlModel, input: &Tensor, label: usize, noise: &FrozenNoise) -> Result<(f64, Vec<f64>, [Gradients; 2])> {
    let pass = round_forward(&model.encoder, input, &noise.round1, 1, &mut noise.dropout(1))?;
    let (probs, tape) = model
        .decoder
        .forward_recorded(&Tensor::vector(pass.received.symbols.clone()), &mut noise.dropout(2))?;
    let loss = cross_entropy(&probs, label)?;
    let back = model.decoder.backward(&tape, &cross_entropy_grad(&probs, label)?)?;
    let g_enc = round_backward(&model.encoder, &pass, &noise.round1, back.input.data())?;
    Ok((loss, probs.into_vec(), [g_enc, back.params]))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Training accuracy per head (training-mode forward passes).
    pub train_accuracy: Vec<f64>,
    /// Test accuracy per head.
    pub test_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn final_test_accuracy(&self) -> Option<&[f64]> {
        self.epochs.last().map(|e| e.test_accuracy.as_slice())
    }
}

/// Per-batch accumulation: gradient sums per network, loss sum, correct
/// counts per head.
struct Accum {
    grads: Vec<Gradients>,
    loss: f64,
    correct: Vec<usize>,
}

impl Accum {
    fn merge(mut self, other: Accum) -> Accum {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
        self.loss += other.loss;
        for (a, b) in self.correct.iter_mut().zip(&other.correct) {
            *a += b;
        }
        self
    }
}

fn accumulate(indices: &[usize], per_sample: impl Fn(usize) -> Result<Accum> + Sync) -> Result<Accum> {
    let chunks: Vec<Result<Accum>> = indices
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut it = chunk.iter();
            let mut acc = per_sample(*it.next().expect("non-empty chunk"))?;
            for &i in it {
                acc = acc.merge(per_sample(i)?);
            }
            Ok(acc)
        })
        .collect();
    let mut it = chunks.into_iter();
    let mut total = it.next().expect("non-empty batch")?;
    for c in it {
        total = total.merge(c?);
    }
    Ok(total)
}

fn training_noise(train: &TrainConfig, chan: &ChannelConfig, epoch: usize, index: usize, n1: usize, n2: usize) -> FrozenNoise {
    let mut r = rng::stream(train.seed ^ chan.seed.rotate_left(32), &[tag::TRAIN, epoch as u64, index as u64]);
    FrozenNoise::sample(chan, n1, n2, &mut r)
}

fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, loss })
    }
}

fn as_divergence(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(_) => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Trains the single-round baseline end to end; the channel-use count is
/// `arch.n_c1`.
pub fn train_srstl(
    data: &Dataset,
    arch: &ArchitectureConfig,
    chan: &ChannelConfig,
    train: &TrainConfig,
) -> Result<(SrstlModel, TrainingLog)> {
    arch.validate()?;
    chan.validate()?;
    train.validate()?;
    let mut model = SrstlModel::new(arch, train.seed)?;
    let mut opt = [Adam::new(&model.encoder), Adam::new(&model.decoder)];
    let mut log = TrainingLog::default();
    let n1 = model.channel_uses();
    for epoch in 0..train.epochs {
        let order = dataset::batches(data.train.len(), train.batch, Some(rng::derive_seed(train.seed, &[epoch as u64])))?;
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in &order {
            let acc = accumulate(batch, |i| {
                let s = &data.train[i];
                let noise = training_noise(train, chan, epoch, i, n1, 0);
                let (loss, probs, grads) = srstl_step(&model, &s.tensor(), s.label, &noise)?;
                Ok(Accum {
                    grads: grads.to_vec(),
                    loss,
                    correct: vec![(crate::nn::argmax(&probs) == s.label) as usize],
                })
            })
            .map_err(|e| as_divergence(e, epoch))?;
            check_loss(acc.loss, epoch)?;
            loss_sum += acc.loss;
            correct += acc.correct[0];
            let mut grads = acc.grads;
            let scale = 1.0 / batch.len() as f64;
            for (g, (net, opt)) in grads.iter_mut().zip([&mut model.encoder, &mut model.decoder].into_iter().zip(opt.iter_mut())) {
                g.scale(scale);
                opt.step(net, g, train.lr).map_err(|e| as_divergence(e, epoch))?;
            }
        }
        let n = data.train.len().max(1) as f64;
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            train_accuracy: vec![correct as f64 / n],
            test_accuracy: vec![evaluate_round1(&model, &data.test, chan, eval_seed(train, epoch))?],
        });
    }
    Ok((model, log))
}

/// Trains both heads jointly on `w * l1 + (1 - w) * l2`, evaluating both
/// heads on every sample of every batch.
pub fn train_mrmtl(
    data: &Dataset,
    arch: &ArchitectureConfig,
    chan: &ChannelConfig,
    train: &TrainConfig,
) -> Result<(MrmtlModel, TrainingLog)> {
    arch.validate()?;
    chan.validate()?;
    train.validate()?;
    let mut model = MrmtlModel::new(arch, train.w, train.seed)?;
    let mut opts: Vec<Adam> = model.networks().iter().map(|n| Adam::new(n)).collect();
    let mut log = TrainingLog::default();
    let (n1, n2) = (model.n_c1(), model.n_c2());
    for epoch in 0..train.epochs {
        let order = dataset::batches(data.train.len(), train.batch, Some(rng::derive_seed(train.seed, &[epoch as u64])))?;
        let (mut loss_sum, mut correct) = (0.0, [0usize; 2]);
        for batch in &order {
            let acc = accumulate(batch, |i| {
                let s = &data.train[i];
                let noise = training_noise(train, chan, epoch, i, n1, n2);
                let step = mrmtl_step(&model, &s.tensor(), s.label, train.w, &noise)?;
                Ok(Accum {
                    grads: step.grads.to_vec(),
                    loss: step.loss,
                    correct: vec![
                        (crate::nn::argmax(&step.probs1) == s.label) as usize,
                        (crate::nn::argmax(&step.probs2) == s.label) as usize,
                    ],
                })
            })
            .map_err(|e| as_divergence(e, epoch))?;
            check_loss(acc.loss, epoch)?;
            loss_sum += acc.loss;
            correct[0] += acc.correct[0];
            correct[1] += acc.correct[1];
            let scale = 1.0 / batch.len() as f64;
            let mut grads = acc.grads;
            for ((g, net), opt) in grads.iter_mut().zip(model.networks_mut()).zip(opts.iter_mut()) {
                g.scale(scale);
                opt.step(net, g, train.lr).map_err(|e| as_divergence(e, epoch))?;
            }
        }
        let n = data.train.len().max(1) as f64;
        let (a1, a2) = evaluate_mrmtl(&model, &data.test, chan, eval_seed(train, epoch))?;
        log.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / n,
            train_accuracy: vec![correct[0] as f64 / n, correct[1] as f64 / n],
            test_accuracy: vec![a1, a2],
        });
    }
    Ok((model, log))
}

fn eval_seed(train: &TrainConfig, epoch: usize) -> u64 {
    rng::derive_seed(train.seed, &[tag::EVAL, epoch as u64])
}

fn accuracy(correct: impl Iterator<Item = bool>, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    correct.filter(|&c| c).count() as f64 / n as f64
}

/// Round-1 outputs for every sample, with per-sample channel streams.
pub fn round1_outputs<M: RoundOne + Sync>(
    model: &M,
    samples: &[Sample],
    cfg: &ChannelConfig,
    seed: u64,
) -> Result<Vec<(DecoderOutput, ReceivedBlock)>> {
    samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| infer_round1(model, &s.tensor(), cfg, &mut round_stream(seed, j, 1)))
        .collect()
}

/// Round-1 head accuracy.
pub fn evaluate_round1<M: RoundOne + Sync>(model: &M, samples: &[Sample], cfg: &ChannelConfig, seed: u64) -> Result<f64> {
    let outs = round1_outputs(model, samples, cfg, seed)?;
    Ok(accuracy(outs.iter().zip(samples).map(|((o, _), s)| o.predicted == s.label), samples.len()))
}

/// Round-1 and Round-2 head accuracies on the same frozen channel draws.
pub fn evaluate_mrmtl(model: &MrmtlModel, samples: &[Sample], cfg: &ChannelConfig, seed: u64) -> Result<(f64, f64)> {
    let outs: Vec<(DecoderOutput, DecoderOutput)> = samples
        .par_iter()
        .enumerate()
        .map(|(j, s)| {
            let x = s.tensor();
            let (o1, r1) = infer_round1(model, &x, cfg, &mut round_stream(seed, j, 1))?;
            let o2 = infer_round2(model, &x, &r1, cfg, &mut round_stream(seed, j, 2))?;
            Ok((o1, o2))
        })
        .collect::<Result<_>>()?;
    let n = samples.len();
    Ok((
        accuracy(outs.iter().zip(samples).map(|((o, _), s)| o.predicted == s.label), n),
        accuracy(outs.iter().zip(samples).map(|((_, o), s)| o.predicted == s.label), n),
    ))
}

pub const BUNDLE_FILE: &str = "bundle.json";
pub const LOG_FILE: &str = "training_log.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BundleKind {
    Srstl,
    Mrmtl,
}

/// Contents of `bundle.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub kind: BundleKind,
    pub arch: ArchitectureConfig,
    pub channel: ChannelConfig,
    pub training: TrainConfig,
    pub dataset_hash: String,
    pub files: Vec<String>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn bundle_nets(kind: BundleKind) -> &'static [&'static str] {
    match kind {
        BundleKind::Srstl => &["encoder1.ckpt", "decoder1.ckpt"],
        BundleKind::Mrmtl => &["encoder1.ckpt", "decoder1.ckpt", "encoder2.ckpt", "decoder2.ckpt"],
    }
}

fn save_networks(dir: &Path, manifest: &BundleManifest, nets: &[&Network], log: &TrainingLog) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::json!({
        "arch": manifest.arch,
        "channel": manifest.channel,
        "training": manifest.training,
        "seed": manifest.training.seed,
    });
    for (name, net) in manifest.files.iter().zip(nets) {
        save_checkpoint(&dir.join(name), net, meta.clone())?;
    }
    write_json(&dir.join(BUNDLE_FILE), manifest)?;
    write_json(&dir.join(LOG_FILE), log)
}

pub fn manifest_for(kind: BundleKind, arch: &ArchitectureConfig, chan: &ChannelConfig, train: &TrainConfig, data: &Dataset) -> BundleManifest {
    BundleManifest {
        format_version: 1,
        kind,
        arch: *arch,
        channel: *chan,
        training: *train,
        dataset_hash: data.fingerprint(),
        files: bundle_nets(kind).iter().map(|s| s.to_string()).collect(),
    }
}

pub fn save_mrmtl_bundle(dir: &Path, model: &MrmtlModel, manifest: &BundleManifest, log: &TrainingLog) -> Result<()> {
    save_networks(dir, manifest, &model.networks(), log)
}

pub fn save_srstl_bundle(dir: &Path, model: &SrstlModel, manifest: &BundleManifest, log: &TrainingLog) -> Result<()> {
    save_networks(dir, manifest, &[&model.encoder, &model.decoder], log)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(BUNDLE_FILE);
    let text = fs::read_to_string(&path).map_err(|source| Error::Load { path: path.clone(), source })?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_training_log(dir: &Path) -> Result<TrainingLog> {
    let path = dir.join(LOG_FILE);
    let text = fs::read_to_string(&path).map_err(|source| Error::Load { path: path.clone(), source })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_nets(dir: &Path, kind: BundleKind) -> Result<(BundleManifest, Vec<Network>)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(Error::arg(format!("{} holds a {:?} bundle, not {kind:?}", dir.display(), manifest.kind)));
    }
    let nets = bundle_nets(kind)
        .iter()
        .map(|f| load_checkpoint(&dir.join(f)).map(|(n, _)| n))
        .collect::<Result<_>>()?;
    Ok((manifest, nets))
}

pub fn load_mrmtl_bundle(dir: &Path) -> Result<(MrmtlModel, BundleManifest)> {
    let (manifest, nets) = load_nets(dir, BundleKind::Mrmtl)?;
    let [e1, d1, e2, d2]: [Network; 4] = nets.try_into().expect("four networks");
    Ok((MrmtlModel::from_parts(e1, e2, d1, d2, manifest.training.w)?, manifest))
}

pub fn load_srstl_bundle(dir: &Path) -> Result<(SrstlModel, BundleManifest)> {
    let (manifest, nets) = load_nets(dir, BundleKind::Srstl)?;
    let [e, d]: [Network; 2] = nets.try_into().expect("two networks");
    Ok((SrstlModel::from_parts(e, d)?, manifest))
}
