//! Small dense feed-forward networks for the score and verify stages.
//!
//! Five dense layers with ReLU activations and a sigmoid head, four
//! inverted-dropout layers between them (active only during training).
//! Binary cross-entropy loss, trained either with plain minibatch SGD or
//! with an RMSProp-style per-parameter adaptive step. All randomness
//! (initialization, shuffling, dropout masks) comes from one seeded stream,
//! so training is bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// Row-major [out][in].
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
    /// Dropout rate applied after every hidden activation during training.
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    RmsProp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// RMSProp squared-gradient decay.
    pub rms_decay: f64,
    pub rms_epsilon: f64,
}

impl TrainConfig {
    pub fn sgd(learning_rate: f64, epochs: usize) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate,
            epochs,
            batch_size: 32,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
        }
    }

    pub fn rmsprop(learning_rate: f64, epochs: usize) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::RmsProp,
            learning_rate,
            epochs,
            batch_size: 32,
            rms_decay: 0.9,
            rms_epsilon: 1e-8,
        }
    }
}

/// Default hidden widths; with the scalar head this makes five dense
/// layers and four dropout slots.
pub const HIDDEN_WIDTHS: [usize; 4] = [64, 64, 32, 16];

impl DenseNet {
    /// Xavier-uniform initialization from the seed.
    pub fn new(input_dim: usize, hidden: &[usize], dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_out)
                .map(|_| (0..fan_in).map(|_| rng.gen_range(-limit..limit)).collect())
                .collect();
            layers.push(DenseLayer {
                weights,
                bias: vec![0.0; fan_out],
            });
        }
        DenseNet { layers, dropout }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights[0].len()
    }

    /// Probability output with dropout inactive.
    pub fn predict(&self, input: &[f64]) -> f64 {
        let mut act = input.to_vec();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.bias.len()];
            for (o, row) in layer.weights.iter().enumerate() {
                let mut z = layer.bias[o];
                for (w, a) in row.iter().zip(&act) {
                    z += w * a;
                }
                next[o] = if l == last { sigmoid(z) } else { z.max(0.0) };
            }
            act = next;
        }
        act[0]
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Activations {
    /// Post-activation (and post-dropout) outputs, layer by layer,
    /// starting with the input itself.
    outputs: Vec<Vec<f64>>,
    /// Dropout masks per hidden layer (scale factors, 0 or 1/(1-p)).
    masks: Vec<Vec<f64>>,
}

fn forward_training(net: &DenseNet, input: &[f64], rng: &mut ChaCha8Rng) -> Activations {
    let last = net.layers.len() - 1;
    let mut outputs = vec![input.to_vec()];
    let mut masks = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        let act = outputs.last().unwrap();
        let mut next = vec![0.0; layer.bias.len()];
        for (o, row) in layer.weights.iter().enumerate() {
            let mut z = layer.bias[o];
            for (w, a) in row.iter().zip(act) {
                z += w * a;
            }
            next[o] = if l == last { sigmoid(z) } else { z.max(0.0) };
        }
        if l != last && net.dropout > 0.0 {
            let keep = 1.0 - net.dropout;
            let mask: Vec<f64> = next
                .iter()
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            for (v, m) in next.iter_mut().zip(&mask) {
                *v *= m;
            }
            masks.push(mask);
        } else if l != last {
            masks.push(vec![1.0; next.len()]);
        }
        outputs.push(next);
    }
    Activations { outputs, masks }
}

struct Gradients {
    weights: Vec<Vec<Vec<f64>>>,
    bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            weights: net
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|r| vec![0.0; r.len()]).collect())
                .collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        for layer in self.weights.iter_mut() {
            for row in layer.iter_mut() {
                row.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        for b in self.bias.iter_mut() {
            b.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Accumulate binary cross-entropy gradients for one example.
fn backward(net: &DenseNet, acts: &Activations, target: f64, grads: &mut Gradients) {
    let last = net.layers.len() - 1;
    // Sigmoid + BCE collapses to (p - y) at the output pre-activation.
    let mut delta = vec![acts.outputs[last + 1][0] - target];
    for l in (0..=last).rev() {
        let input = &acts.outputs[l];
        for (o, d) in delta.iter().enumerate() {
            grads.bias[l][o] += d;
            for (i, a) in input.iter().enumerate() {
                grads.weights[l][o][i] += d * a;
            }
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; input.len()];
        for (o, d) in delta.iter().enumerate() {
            for (i, w) in net.layers[l].weights[o].iter().enumerate() {
                prev[i] += d * w;
            }
        }
        // Through dropout mask and the ReLU derivative.
        for (i, p) in prev.iter_mut().enumerate() {
            *p *= acts.masks[l - 1][i];
            if acts.outputs[l][i] <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
}

/// Train a fresh network on rows of (features, 0/1 target).
pub fn train(
    inputs: &[Vec<f64>],
    targets: &[f64],
    hidden: &[usize],
    dropout: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<DenseNet> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::Validation(format!(
            "bad training shapes: {} inputs, {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Validation("batch_size and learning_rate must be > 0".into()));
    }
    let dim = inputs[0].len();
    if inputs.iter().any(|x| x.len() != dim) {
        return Err(Error::Validation("ragged training inputs".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::new(dim, hidden, dropout, rng.gen());
    let mut grads = Gradients::zeros_like(&net);
    let mut cache = Gradients::zeros_like(&net); // RMSProp accumulator

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for _ in 0..cfg.epochs {
        // Fisher-Yates from the same stream keeps shuffles reproducible.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size) {
            grads.clear();
            for &idx in batch {
                let acts = forward_training(&net, &inputs[idx], &mut rng);
                backward(&net, &acts, targets[idx], &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            for l in 0..net.layers.len() {
                for o in 0..net.layers[l].bias.len() {
                    let gb = grads.bias[l][o] * scale;
                    net.layers[l].bias[o] -= step(cfg, &mut cache.bias[l][o], gb);
                    for i in 0..net.layers[l].weights[o].len() {
                        let gw = grads.weights[l][o][i] * scale;
                        net.layers[l].weights[o][i] -= step(cfg, &mut cache.weights[l][o][i], gw);
                    }
                }
            }
        }
    }
    Ok(net)
}

fn step(cfg: &TrainConfig, cache: &mut f64, grad: f64) -> f64 {
    match cfg.optimizer {
        OptimizerKind::Sgd => cfg.learning_rate * grad,
        OptimizerKind::RmsProp => {
            *cache = cfg.rms_decay * *cache + (1.0 - cfg.rms_decay) * grad * grad;
            cfg.learning_rate * grad / (cache.sqrt() + cfg.rms_epsilon)
        }
    }
}
