//! Losses, Adam, and the seeded mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, softplus, Graph, Tensor};
use crate::model::VitClassifier;

/// Binary cross-entropy of one logit, `max(z,0) − z·y + log(1 + e^{−|z|})`.
pub fn bce_loss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + softplus(-logit.abs())
}

/// α-balanced focal loss `−α_t (1 − p_t)^γ log p_t`.
pub fn focal_loss(logit: f64, label: f64, gamma: f64, alpha: f64) -> Result<f64> {
    check_focal(gamma, alpha)?;
    let p = sigmoid(logit);
    let (p_t, alpha_t) = if label >= 0.5 { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    // −log p_t in the stable form: softplus(−z) for y = 1, softplus(z) for y = 0
    let nll = if label >= 0.5 { softplus(-logit) } else { softplus(logit) };
    Ok(alpha_t * (1.0 - p_t).powf(gamma) * nll)
}

fn check_focal(gamma: f64, alpha: f64) -> Result<()> {
    if !(gamma >= 0.0) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("focal loss needs γ ≥ 0 and 0 < α < 1, got γ = {gamma}, α = {alpha}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    #[default]
    Bce,
    Focal {
        gamma: f64,
        alpha: f64,
    },
}

impl LossKind {
    pub const FOCAL_DEFAULT: LossKind = LossKind::Focal { gamma: 2.0, alpha: 0.25 };
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize], lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &VitClassifier, lr: f64) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        Self::new(&sizes, lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update. `names[i]` labels `params[i]` in errors.
/// Gradients are validated before any parameter changes.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    names: &[String],
    state: &mut AdamState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} parameter groups, {} gradients, {} optimiser slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).map_or("?", String::as_str);
        if p.len() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::dim(format!("gradient for `{name}` has {} entries, parameter {}", g.len(), p.len())));
        }
        if let Some(j) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::numeric(format!("non-finite gradient in parameter group `{name}` at entry {j}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub loss: LossKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 100, batch_size: 32, lr: 1e-3, loss: LossKind::Bce, seed: 0, shuffle: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be finite and ≥ 0, got {}", self.lr)));
        }
        if let LossKind::Focal { gamma, alpha } = self.loss {
            check_focal(gamma, alpha)?;
        }
        Ok(())
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    /// Mean mini-batch loss of each epoch, weighted by batch size.
    pub train_loss: Vec<f64>,
}

impl History {
    /// `epoch,train_loss` CSV text.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss\n");
        for (e, l) in self.train_loss.iter().enumerate() {
            s.push_str(&format!("{},{l:.17e}\n", e + 1));
        }
        s
    }
}

fn batch_loss(
    model: &VitClassifier,
    g: &mut Graph,
    features: &[f64],
    labels: &[f64],
    loss: LossKind,
) -> Result<(crate::gradcore::Var, Vec<crate::gradcore::Var>)> {
    let vars = model.bind(g);
    let out = model.forward_graph(g, &vars, features, labels.len())?;
    let l = match loss {
        LossKind::Bce => g.bce_with_logits(out.logits, labels)?,
        LossKind::Focal { gamma, alpha } => g.focal_with_logits(out.logits, labels, gamma, alpha)?,
    };
    Ok((l, vars))
}

/// Mean loss of the model over a feature set, without updating anything.
pub fn evaluate_loss(model: &VitClassifier, features: &[f64], labels: &[f64], loss: LossKind) -> Result<f64> {
    let per = model.spec().feature_len();
    let logits = model.logits_from_features(features, features.len() / per.max(1))?;
    if logits.len() != labels.len() {
        return Err(Error::dim(format!("{} logits for {} labels", logits.len(), labels.len())));
    }
    let total = logits.iter().zip(labels).try_fold(0.0, |acc, (&z, &y)| -> Result<f64> {
        Ok(acc
            + match loss {
                LossKind::Bce => bce_loss(z, y),
                LossKind::Focal { gamma, alpha } => focal_loss(z, y, gamma, alpha)?,
            })
    })?;
    Ok(total / labels.len() as f64)
}

/// Epoch order of sample indices. The generator is keyed on `(seed, epoch)`
/// through the ChaCha stream id, so any epoch can be regenerated in isolation.
pub fn epoch_order(count: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Trains on precomputed model features (see [`VitClassifier::features`]).
pub fn train_features(
    model: &mut VitClassifier,
    features: &[f64],
    labels: &[f64],
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    let per = model.spec().feature_len();
    let count = labels.len();
    if count == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if features.len() != count * per {
        return Err(Error::dim(format!("{} feature values for {count} samples", features.len())));
    }
    if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::for_model(model, config.lr);
    let initial_loss = evaluate_loss(model, features, labels, config.loss)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch_feats = Vec::with_capacity(config.batch_size * per);
    let mut batch_labels = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        let order = epoch_order(count, config.seed, epoch, config.shuffle);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch_feats.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_feats.extend_from_slice(&features[i * per..(i + 1) * per]);
                batch_labels.push(labels[i]);
            }
            let mut g = Graph::new();
            let (loss, vars) = batch_loss(model, &mut g, &batch_feats, &batch_labels, config.loss)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::numeric(format!("training loss diverged ({value}) in epoch {}", epoch + 1)));
            }
            epoch_total += value * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let grad_list: Vec<Vec<f64>> =
                vars.iter().zip(model.params()).map(|(v, (_, t))| grads.get_or_zeros(*v, t.len())).collect();
            adam_step(&mut model.params_mut(), &grad_list, &names, &mut adam)?;
        }
        history.push(epoch_total / count as f64);
    }
    Ok(History { initial_loss, train_loss: history })
}

/// Tokenises or patchifies `images` with the model's own front end and trains.
pub fn train(model: &mut VitClassifier, images: &[f64], labels: &[f64], config: &TrainConfig) -> Result<History> {
    let features = model.features(images, labels.len())?;
    train_features(model, &features, labels, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::grad_check;
    use crate::model::ModelSpec;
    use crate::spectra::{build_fourier, BasisKind};
    use rand::Rng;

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        let expected = (-20f64).exp().ln_1p();
        assert!((bce_loss(20.0, 1.0) - expected).abs() < 1e-22);
        assert!((bce_loss(20.0, 1.0) - 2.06e-9).abs() < 1e-11);
        assert!(bce_loss(-800.0, 1.0).is_finite());
        assert!((bce_loss(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn bce_graph_gradient() {
        let z = Tensor::new(vec![5, 1], vec![-3.0, -0.5, 0.0, 0.7, 4.0]).unwrap();
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0];
        let err = grad_check(|g, x| g.bce_with_logits(x, &labels), &z, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn focal_closed_forms() {
        let v = focal_loss(0.0, 1.0, 2.0, 0.25).unwrap();
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.0433).abs() < 1e-4);
        assert!(focal_loss(800.0, 1.0, 2.0, 0.25).unwrap() == 0.0);
        assert!(focal_loss(0.0, 1.0, -1.0, 0.25).is_err());
        assert!(focal_loss(0.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn focal_reduces_to_weighted_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let z: f64 = rng.random_range(-30.0..30.0);
            let y = f64::from(rng.random_bool(0.5));
            let a: f64 = rng.random_range(0.05..0.95);
            let at = if y == 1.0 { a } else { 1.0 - a };
            assert!((focal_loss(z, y, 0.0, a).unwrap() - at * bce_loss(z, y)).abs() < 1e-12);
            assert!((focal_loss(z, y, 0.0, 0.5).unwrap() - 0.5 * bce_loss(z, y)).abs() < 1e-12);
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn first_adam_step_is_a_signed_lr_step() {
        let mut p = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g = vec![vec![0.3, -7.0, 1e-3, 50.0]];
        let mut s = AdamState::new(&[4], 0.01);
        adam_step(&mut [&mut p], &g, &names(1), &mut s).unwrap();
        for (x, (orig, gi)) in p.data().iter().zip([1.0, 2.0, 3.0, 4.0].iter().zip(&g[0])) {
            // deviation is lr·ε/(|g| + ε), at most 1e-5 relative here
            assert!(((orig - x) - 0.01 * gi.signum()).abs() < 0.01 * 1e-8 / gi.abs() + 1e-15);
        }
    }

    #[test]
    fn adam_rescaling_invariance_at_first_step() {
        let g = vec![vec![0.3, -0.7, 0.01]];
        let g10 = vec![g[0].iter().map(|x| x * 10.0).collect::<Vec<_>>()];
        let run = |grads: &Vec<Vec<f64>>| {
            let mut p = Tensor::zeros(vec![3]);
            let mut s = AdamState::new(&[3], 0.1);
            adam_step(&mut [&mut p], grads, &names(1), &mut s).unwrap();
            p
        };
        let (a, b) = (run(&g), run(&g10));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(((x - y) / x).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::full(vec![3], 0.5);
        let mut s = AdamState::new(&[3], 0.1);
        for _ in 0..50 {
            adam_step(&mut [&mut p], &[vec![0.0; 3]], &names(1), &mut s).unwrap();
        }
        assert_eq!(p.data(), &[0.5; 3]);
        assert_eq!(s.step_count(), 50);
    }

    #[test]
    fn adam_minimises_a_parabola() {
        let mut x = Tensor::scalar(1.0);
        let mut s = AdamState::new(&[1], 0.1);
        for _ in 0..200 {
            let g = 2.0 * x.data()[0];
            adam_step(&mut [&mut x], &[vec![g]], &names(1), &mut s).unwrap();
        }
        assert!(x.data()[0].abs() < 0.05, "{}", x.data()[0]);
    }

    #[test]
    fn nan_gradient_names_the_group() {
        let mut a = Tensor::zeros(vec![2]);
        let mut b = Tensor::zeros(vec![2]);
        let mut s = AdamState::new(&[2, 2], 0.1);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &[vec![0.0, 0.0], vec![1.0, f64::NAN]],
            &["layer0.w_q".into(), "head.weight".into()],
            &mut s,
        )
        .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("head.weight")), "{err}");
        assert_eq!(a.data(), &[0.0, 0.0]);
        assert_eq!(s.step_count(), 0);
    }

    fn tiny_task(seed: u64, count: usize) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..count {
            let y = (i % 2) as f64;
            for r in 0..8 {
                for c in 0..8 {
                    let pattern = if (r / 2 + c / 2) % 2 == 0 { 1.0 } else { -1.0 };
                    images.push(y * pattern + rng.random_range(-1.0..1.0));
                }
            }
            labels.push(y);
        }
        (images, labels)
    }

    fn tiny_model(seed: u64) -> VitClassifier {
        let spec = ModelSpec { n_tokens: 8, height: 8, width: 8, ..ModelSpec::spectral(BasisKind::Fourier) };
        VitClassifier::spectral(spec, build_fourier(8, 8, 8).unwrap(), seed).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (images, labels) = tiny_task(1, 10);
        let config = TrainConfig { epochs: 30, batch_size: 4, lr: 1e-2, seed: 5, ..TrainConfig::default() };
        let mut a = tiny_model(2);
        let ha = train(&mut a, &images, &labels, &config).unwrap();
        assert!(ha.train_loss.last().unwrap() < &ha.initial_loss);
        let mut b = tiny_model(2);
        let hb = train(&mut b, &images, &labels, &config).unwrap();
        assert_eq!(ha.to_csv(), hb.to_csv());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (images, labels) = tiny_task(2, 8);
        let config = TrainConfig { epochs: 3, batch_size: 8, lr: 0.0, shuffle: false, ..TrainConfig::default() };
        let mut m = tiny_model(3);
        let before = m.clone();
        let h = train(&mut m, &images, &labels, &config).unwrap();
        assert_eq!(m, before);
        assert!(h.train_loss.iter().all(|l| (l - h.initial_loss).abs() < 1e-12));
    }

    #[test]
    fn shuffle_depends_on_seed_and_epoch_only() {
        assert_eq!(epoch_order(50, 9, 3, true), epoch_order(50, 9, 3, true));
        assert_ne!(epoch_order(50, 9, 3, true), epoch_order(50, 9, 4, true));
        assert_ne!(epoch_order(50, 9, 3, true), epoch_order(50, 8, 3, true));
        assert_eq!(epoch_order(5, 9, 3, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn bad_inputs_rejected() {
        let (images, mut labels) = tiny_task(3, 4);
        let mut m = tiny_model(0);
        assert!(train(&mut m, &images, &labels, &TrainConfig { epochs: 0, ..TrainConfig::default() }).is_err());
        labels[0] = 0.5;
        assert!(train(&mut m, &images, &labels, &TrainConfig::default()).is_err());
        assert!(train(&mut m, &[], &[], &TrainConfig::default()).is_err());
    }
}
