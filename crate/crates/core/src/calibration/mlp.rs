//! Dense tanh network with an identity output layer, trained by mini-batch
//! gradient descent with momentum.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seeds::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MlpError {
    #[error("network needs at least an input and an output width, got {0:?}")]
    Widths(Vec<usize>),
    #[error("expected {expected} inputs, got {got}")]
    InputShape { expected: usize, got: usize },
    #[error("expected {expected} targets, got {got}")]
    TargetShape { expected: usize, got: usize },
    #[error("training set is empty")]
    Empty,
    #[error("loss became non-finite at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Training objective on the raw network output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Mean over output components of the squared error.
    MeanSquared,
    /// Binary cross-entropy on a single logit, target in {0, 1}.
    Logistic,
}

impl Loss {
    /// Per-sample loss and its gradient with respect to the output.
    fn eval<T: Scalar>(self, out: &[T], target: &[T], grad: &mut [T]) -> T {
        match self {
            Loss::MeanSquared => {
                let m = T::lit(out.len() as f64);
                let mut l = T::zero();
                for i in 0..out.len() {
                    let e = out[i] - target[i];
                    l += e * e;
                    grad[i] = T::lit(2.0) * e / m;
                }
                l / m
            }
            Loss::Logistic => {
                let z = out[0];
                let y = target[0];
                grad[0] = sigmoid(z) - y;
                // softplus(z) - y z, written to avoid overflow
                let sp = z.max(T::zero()) + (T::one() + (-z.abs()).exp()).ln();
                sp - y * z
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Parameters are stored per layer: `weights[l]` is row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<T> {
    widths: Vec<usize>,
    weights: Vec<Vec<T>>,
    biases: Vec<Vec<T>>,
}

/// Gradient buffers with the same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros_like(m: &Mlp<T>) -> Self {
        Self {
            weights: m.weights.iter().map(|w| vec![T::zero(); w.len()]).collect(),
            biases: m.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    fn clear(&mut self) {
        self.weights.iter_mut().flatten().for_each(|g| *g = T::zero());
        self.biases.iter_mut().flatten().for_each(|g| *g = T::zero());
    }

    /// Gradient of parameter `idx` in the flat ordering of [`Mlp::param`].
    pub fn get(&self, idx: usize) -> T {
        let mut i = idx;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            if i < w.len() {
                return w[i];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {idx} out of range")
    }

    pub fn max_abs(&self) -> T {
        self.weights.iter().chain(&self.biases).flatten().fold(T::zero(), |m, g| m.max(g.abs()))
    }
}

impl<T: Scalar> Mlp<T> {
    /// Xavier-uniform weights, zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self, MlpError> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(MlpError::Widths(widths.to_vec()));
        }
        let mut rng = seeds::rng(seed, Stream::ModelInit);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            weights.push((0..n_in * n_out).map(|_| T::lit(rng.random_range(-limit..limit))).collect());
            biases.push(vec![T::zero(); n_out]);
        }
        Ok(Self { widths: widths.to_vec(), weights, biases })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn inputs(&self) -> usize {
        self.widths[0]
    }

    pub fn outputs(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<T>] {
        &self.biases
    }

    /// Rebuilds a network from raw parameter arrays, checking every shape.
    pub fn from_parts(widths: Vec<usize>, weights: Vec<Vec<T>>, biases: Vec<Vec<T>>) -> Result<Self, MlpError> {
        if widths.len() < 2 || widths.contains(&0) || weights.len() != widths.len() - 1 || biases.len() != weights.len()
        {
            return Err(MlpError::Widths(widths));
        }
        for (l, pair) in widths.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(MlpError::Widths(widths.clone()));
            }
        }
        Ok(Self { widths, weights, biases })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Vec::len).sum()
    }

    /// Flat parameter range `[start, end)` of layer `l`, weights then biases.
    pub fn layer_params(&self, l: usize) -> std::ops::Range<usize> {
        let start: usize = (0..l).map(|k| self.weights[k].len() + self.biases[k].len()).sum();
        start..start + self.weights[l].len() + self.biases[l].len()
    }

    fn locate(&mut self, idx: usize) -> &mut T {
        let mut i = idx;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if i < w.len() {
                return &mut w[i];
            }
            i -= w.len();
            if i < b.len() {
                return &mut b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {idx} out of range")
    }

    pub fn param(&mut self, idx: usize) -> T {
        *self.locate(idx)
    }

    pub fn set_param(&mut self, idx: usize, v: T) {
        *self.locate(idx) = v;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.biases).flatten().all(|v| v.is_finite())
    }

    fn check_input(&self, x: &[T]) -> Result<(), MlpError> {
        if x.len() != self.inputs() {
            return Err(MlpError::InputShape { expected: self.inputs(), got: x.len() });
        }
        Ok(())
    }

    /// Layer activations, input first, raw output last.
    fn activations(&self, x: &[T]) -> Vec<Vec<T>> {
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(x.to_vec());
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let input = &acts[l];
            let n_in = self.widths[l];
            let out: Vec<T> = self.biases[l]
                .iter()
                .enumerate()
                .map(|(o, &b)| {
                    let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                    let z = row.iter().zip(input).fold(b, |acc, (&w, &a)| acc + w * a);
                    if l == last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, MlpError> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().expect("output layer"))
    }

    /// Adds the gradient of one sample's loss to `grads` and returns the loss.
    fn accumulate(&self, x: &[T], y: &[T], loss: Loss, grads: &mut Gradients<T>) -> T {
        let acts = self.activations(x);
        let out = acts.last().expect("output layer");
        let mut delta = vec![T::zero(); out.len()];
        let value = loss.eval(out, y, &mut delta);
        for l in (0..self.layers()).rev() {
            let input = &acts[l];
            let n_in = self.widths[l];
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[l][o] += d;
                let row = &mut grads.weights[l][o * n_in..(o + 1) * n_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let mut prev = vec![T::zero(); n_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &self.weights[l][o * n_in..(o + 1) * n_in];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                for (p, &a) in prev.iter_mut().zip(input) {
                    *p *= T::one() - a * a;
                }
                delta = prev;
            }
        }
        value
    }

    /// Summed loss over `batch` and its analytic gradient (sum, not mean).
    pub fn loss_and_gradient(
        &self,
        inputs: &[Vec<T>],
        targets: &[Vec<T>],
        loss: Loss,
    ) -> Result<(T, Gradients<T>), MlpError> {
        let mut grads = Gradients::zeros_like(self);
        let mut total = T::zero();
        for (x, y) in inputs.iter().zip(targets) {
            self.check_shapes(x, y, loss)?;
            total += self.accumulate(x, y, loss, &mut grads);
        }
        Ok((total, grads))
    }

    /// Summed loss only.
    pub fn loss(&self, inputs: &[Vec<T>], targets: &[Vec<T>], loss: Loss) -> Result<T, MlpError> {
        let mut total = T::zero();
        let mut scratch = vec![T::zero(); self.outputs()];
        for (x, y) in inputs.iter().zip(targets) {
            self.check_shapes(x, y, loss)?;
            let out = self.activations(x).pop().expect("output layer");
            total += loss.eval(&out, y, &mut scratch);
        }
        Ok(total)
    }

    fn check_shapes(&self, x: &[T], y: &[T], loss: Loss) -> Result<(), MlpError> {
        self.check_input(x)?;
        let expected = match loss {
            Loss::MeanSquared => self.outputs(),
            Loss::Logistic => 1,
        };
        if y.len() != expected || self.outputs() != expected {
            return Err(MlpError::TargetShape { expected, got: y.len() });
        }
        Ok(())
    }

    fn sgd_step(&mut self, grads: &Gradients<T>, velocity: &mut Gradients<T>, lr: T, momentum: T, scale: T) {
        let layers = self.weights.iter_mut().chain(self.biases.iter_mut());
        let g_layers = grads.weights.iter().chain(&grads.biases);
        let v_layers = velocity.weights.iter_mut().chain(velocity.biases.iter_mut());
        for ((p, g), v) in layers.zip(g_layers).zip(v_layers) {
            for ((p, g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = momentum * *v - lr * scale * *g;
                *p += *v;
            }
        }
    }
}

/// Mini-batch schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 1e-2, momentum: 0.9, batch_size: 64, seed: 0 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlpError::Config(format!("learning rate must be positive (got {})", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MlpError::Config(format!("momentum must be in [0, 1) (got {})", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(MlpError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-sample losses. Index 0 is the untrained model; entry `e` follows epoch `e`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitHistory {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
    /// Best validation loss seen up to each entry.
    pub best_validation: Vec<f64>,
    pub best_epoch: usize,
}

/// Inputs and targets, row per sample.
pub type Columns<'a, T> = (&'a [Vec<T>], &'a [Vec<T>]);

/// Trains in place and leaves the best-validation parameters in `mlp`.
/// Without a validation set the final parameters are kept.
pub fn fit<T: Scalar>(
    mlp: &mut Mlp<T>,
    train: Columns<'_, T>,
    validation: Option<Columns<'_, T>>,
    cfg: &SgdConfig,
    loss: Loss,
) -> Result<FitHistory, MlpError> {
    cfg.validate()?;
    let (xs, ys) = train;
    if xs.is_empty() {
        return Err(MlpError::Empty);
    }
    if xs.len() != ys.len() {
        return Err(MlpError::TargetShape { expected: xs.len(), got: ys.len() });
    }
    let mean_loss = |m: &Mlp<T>, x: &[Vec<T>], y: &[Vec<T>]| -> Result<f64, MlpError> {
        Ok(m.loss(x, y, loss)?.as_f64() / x.len().max(1) as f64)
    };
    let val_loss = |m: &Mlp<T>| -> Result<f64, MlpError> {
        match validation {
            Some((vx, vy)) if !vx.is_empty() => mean_loss(m, vx, vy),
            _ => mean_loss(m, xs, ys),
        }
    };

    let mut history = FitHistory::default();
    history.train.push(mean_loss(mlp, xs, ys)?);
    let v0 = val_loss(mlp)?;
    history.validation.push(v0);
    history.best_validation.push(v0);
    if !history.train[0].is_finite() {
        return Err(MlpError::Diverged { epoch: 0 });
    }
    let mut best = mlp.clone();
    let mut best_val = v0;

    let mut rng = seeds::rng(cfg.seed, Stream::TrainingShuffle);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut grads = Gradients::zeros_like(mlp);
    let mut velocity = Gradients::zeros_like(mlp);
    let lr = T::lit(cfg.learning_rate);
    let momentum = T::lit(cfg.momentum);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            grads.clear();
            for &i in chunk {
                mlp.check_shapes(&xs[i], &ys[i], loss)?;
                epoch_loss += mlp.accumulate(&xs[i], &ys[i], loss, &mut grads).as_f64();
            }
            mlp.sgd_step(&grads, &mut velocity, lr, momentum, T::one() / T::lit(chunk.len() as f64));
        }
        let train_loss = epoch_loss / xs.len() as f64;
        if !train_loss.is_finite() || !mlp.is_finite() {
            return Err(MlpError::Diverged { epoch });
        }
        let v = val_loss(mlp)?;
        if !v.is_finite() {
            return Err(MlpError::Diverged { epoch });
        }
        if v < best_val {
            best_val = v;
            best = mlp.clone();
            history.best_epoch = epoch;
        }
        history.train.push(train_loss);
        history.validation.push(v);
        history.best_validation.push(best_val);
    }
    *mlp = best;
    Ok(history)
}

/// Largest relative difference between analytic and central-difference
/// gradients of the summed loss, over `per_layer` random parameters of every
/// layer. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check<T: Scalar>(
    mlp: &Mlp<T>,
    inputs: &[Vec<T>],
    targets: &[Vec<T>],
    loss: Loss,
    per_layer: usize,
    seed: u64,
) -> Result<f64, MlpError> {
    let (_, analytic) = mlp.loss_and_gradient(inputs, targets, loss)?;
    let mut probe = mlp.clone();
    let mut rng = seeds::rng(seed, Stream::GradCheck);
    let h = T::lit(1e-5);
    let mut worst: f64 = 0.0;
    for l in 0..mlp.layers() {
        let range = mlp.layer_params(l);
        for _ in 0..per_layer.min(range.len()) {
            let idx = rng.random_range(range.clone());
            let p = probe.param(idx);
            probe.set_param(idx, p + h);
            let up = probe.loss(inputs, targets, loss)?;
            probe.set_param(idx, p - h);
            let down = probe.loss(inputs, targets, loss)?;
            probe.set_param(idx, p);
            let numeric = ((up - down) / (T::lit(2.0) * h)).as_f64();
            let a = analytic.get(idx).as_f64();
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        use rand::Rng;
        let mut rng = seeds::rng(seed, Stream::CalibrationPoses);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys = xs.iter().map(|x| vec![x[0] - 0.5 * x[1], 0.3 * x[2] + x[0] * x[1]]).collect();
        (xs, ys)
    }

    #[test]
    fn shapes_are_checked() {
        let m = Mlp::<f64>::new(&[3, 4, 2], 0).unwrap();
        assert_eq!(m.param_count(), 3 * 4 + 4 + 4 * 2 + 2);
        assert!(matches!(m.forward(&[1.0, 2.0]), Err(MlpError::InputShape { expected: 3, got: 2 })));
        assert!(Mlp::<f64>::new(&[3], 0).is_err());
        assert!(Mlp::<f64>::new(&[3, 0, 1], 0).is_err());
        assert_eq!(m.layer_params(1), 16..26);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Mlp::<f64>::new(&[3, 8, 8, 2], 4).unwrap();
        let (xs, ys) = toy(5, 1);
        assert!(grad_check(&m, &xs, &ys, Loss::MeanSquared, 20, 0).unwrap() < 1e-4);
        let m = Mlp::<f64>::new(&[3, 8, 1], 4).unwrap();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![(x[0] > 0.0) as u8 as f64]).collect();
        assert!(grad_check(&m, &xs, &ys, Loss::Logistic, 20, 0).unwrap() < 1e-4);
    }

    #[test]
    fn zero_loss_sample_has_zero_gradient() {
        let m = Mlp::<f64>::new(&[3, 6, 2], 9).unwrap();
        let x = vec![0.2, -0.4, 0.9];
        let y = m.forward(&x).unwrap();
        let (l, g) = m.loss_and_gradient(&[x], &[y], Loss::MeanSquared).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let m = Mlp::<f64>::new(&[3, 6, 2], 9).unwrap();
        let (xs, ys) = toy(1, 2);
        let (l1, g1) = m.loss_and_gradient(&xs, &ys, Loss::MeanSquared).unwrap();
        let twice_x = vec![xs[0].clone(), xs[0].clone()];
        let twice_y = vec![ys[0].clone(), ys[0].clone()];
        let (l2, g2) = m.loss_and_gradient(&twice_x, &twice_y, Loss::MeanSquared).unwrap();
        assert_eq!(l2, 2.0 * l1);
        for i in 0..m.param_count() {
            assert_eq!(g2.get(i), 2.0 * g1.get(i));
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = Mlp::<f64>::new(&[3, 6, 2], 9).unwrap();
        let before = m.clone();
        let (xs, ys) = toy(30, 3);
        let cfg = SgdConfig { epochs: 0, ..Default::default() };
        let h = fit(&mut m, (&xs, &ys), None, &cfg, Loss::MeanSquared).unwrap();
        assert_eq!(m, before);
        assert_eq!(h.train.len(), 1);
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let (xs, ys) = toy(200, 3);
        let (vx, vy) = toy(50, 4);
        let cfg = SgdConfig { epochs: 60, learning_rate: 0.02, batch_size: 16, ..Default::default() };
        let mut a = Mlp::<f64>::new(&[3, 16, 16, 2], 1).unwrap();
        let ha = fit(&mut a, (&xs, &ys), Some((&vx, &vy)), &cfg, Loss::MeanSquared).unwrap();
        let mut b = Mlp::<f64>::new(&[3, 16, 16, 2], 1).unwrap();
        let hb = fit(&mut b, (&xs, &ys), Some((&vx, &vy)), &cfg, Loss::MeanSquared).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert!(ha.best_validation.last().unwrap() < &(0.1 * ha.validation[0]));
        assert!(ha.best_validation.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let (xs, mut ys) = toy(20, 3);
        ys[0][0] = 1e300;
        let mut m = Mlp::<f64>::new(&[3, 4, 2], 1).unwrap();
        let cfg = SgdConfig { epochs: 5, learning_rate: 0.5, ..Default::default() };
        assert!(matches!(fit(&mut m, (&xs, &ys), None, &cfg, Loss::MeanSquared), Err(MlpError::Diverged { .. })));
    }

    #[test]
    fn single_precision_network_trains() {
        let (xs, ys) = toy(100, 3);
        let xs: Vec<Vec<f32>> = xs.iter().map(|v| v.iter().map(|&a| a as f32).collect()).collect();
        let ys: Vec<Vec<f32>> = ys.iter().map(|v| v.iter().map(|&a| a as f32).collect()).collect();
        let mut m = Mlp::<f32>::new(&[3, 16, 2], 1).unwrap();
        let cfg = SgdConfig { epochs: 40, learning_rate: 0.02, batch_size: 16, ..Default::default() };
        let h = fit(&mut m, (&xs, &ys), None, &cfg, Loss::MeanSquared).unwrap();
        assert!(h.best_validation.last().unwrap() < &(0.2 * h.train[0]));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gradient_check_holds_on_random_models(seed in 0u64..10_000, hidden in 2usize..12, depth in 1usize..4) {
            let mut widths = vec![3];
            widths.extend(std::iter::repeat_n(hidden, depth));
            widths.push(2);
            let m = Mlp::<f64>::new(&widths, seed).unwrap();
            let (xs, ys) = toy(3, seed);
            prop_assert!(grad_check(&m, &xs, &ys, Loss::MeanSquared, 10, seed).unwrap() < 1e-4);
        }
    }
}
