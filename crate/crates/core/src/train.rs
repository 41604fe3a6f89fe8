//! Teacher-forced likelihood training, Adam, and finite-difference checks.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ingest::InfillingExample;
use crate::model::{Batch, BatchItem, Dropout, LossRegion, Model};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub loss_region: LossRegion,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Save to `checkpoint_path` every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            max_steps: 1000,
            seed: 0,
            loss_region: LossRegion::Target,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    /// Settings that drive the tiny model to near-zero loss on a small corpus.
    pub fn overfit() -> Self {
        Self { learning_rate: 3e-3, batch_size: 4, max_steps: 3000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok =
            self.learning_rate > 0.0 && self.batch_size > 0 && self.clip_norm >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid training configuration {self:?}")));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::Config("checkpoint_every is set without checkpoint_path".into()));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood of the item's picks under `logits`.
pub fn loss<T: Scalar>(logits: &Matrix<T>, item: &BatchItem) -> Result<f64> {
    if item.picks.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut total = 0.0;
    for &(row, target) in &item.picks {
        let r: Vec<f64> = logits.row(row).iter().map(|v| v.to_f64_lossy()).collect();
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = r.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - r[target];
    }
    Ok(total / item.picks.len() as f64)
}

/// Mean loss over every masked position of the batch, without dropout.
pub fn batch_loss<T: Scalar>(model: &Model<T>, batch: &Batch) -> Result<f64> {
    let m = batch.masked_count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = T::one() / T::from_usize(m).unwrap();
    let mut total = 0.0;
    for item in &batch.items {
        let mut g = Graph::new(model.params());
        let logits = model.item_graph(&mut g, item, &mut None)?;
        let l = g.cross_entropy(logits, item.picks.clone(), scale);
        total += g.value(l).get(0, 0).to_f64_lossy();
    }
    Ok(total)
}

/// Mean loss over the batch's masked positions and its gradient with respect
/// to every parameter. Items run in parallel; their contributions are summed
/// in item order so results do not depend on scheduling.
pub fn loss_and_grads<T: Scalar>(model: &Model<T>, batch: &Batch, dropout_seed: Option<u64>) -> Result<(f64, Vec<Matrix<T>>)> {
    let m = batch.masked_count();
    if m == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = T::one() / T::from_usize(m).unwrap();
    let rate = model.config().dropout;
    let parts: Vec<Result<(f64, Vec<Option<Matrix<T>>>)>> = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut drop = dropout_seed.filter(|_| rate > 0.0).map(|s| Dropout { rate, rng: ChaCha8Rng::seed_from_u64(s.wrapping_add(i as u64)) });
            let mut g = Graph::new(model.params());
            let logits = model.item_graph(&mut g, item, &mut drop)?;
            let l = g.cross_entropy(logits, item.picks.clone(), scale);
            Ok((g.value(l).get(0, 0).to_f64_lossy(), g.backward(l).grads))
        })
        .collect();
    let mut grads: Vec<Matrix<T>> = model.params().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut total = 0.0;
    for part in parts {
        let (l, gs) = part?;
        total += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            if let Some(g) = g {
                acc.add_assign(&g);
            }
        }
    }
    Ok((total, grads))
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale(s);
        }
    }
    norm
}

pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Matrix<T>], cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { lr: cfg.learning_rate, beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>]) {
        self.t += 1;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(self.t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(self.t));
        let (lr, eps) = (T::from_f64_lossy(self.lr), T::from_f64_lossy(self.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Trains `model` in place and returns the per-step loss curve.
///
/// Examples are visited in seeded shuffled epochs. `on_step` sees every
/// `(step, loss)` pair after the update; an error from it stops training.
pub fn train_loop<T: Scalar>(model: &mut Model<T>, examples: &[InfillingExample], cfg: &TrainConfig, mut on_step: impl FnMut(usize, f64) -> Result<()>) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut losses = Vec::with_capacity(cfg.max_steps);
    if cfg.max_steps == 0 {
        return Ok(losses);
    }
    if examples.is_empty() {
        return Err(Error::Coverage("training set is empty".into()));
    }
    let items = Batch::from_examples(examples, model.config(), cfg.loss_region)?.items;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(model.params(), cfg);
    for step in 1..=cfg.max_steps {
        let mut picked = Vec::with_capacity(cfg.batch_size);
        while picked.len() < cfg.batch_size.min(items.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let batch = Batch { items: picked.iter().map(|&i| items[i].clone()).collect() };
        let (loss, mut grads) = loss_and_grads(model, &batch, Some(rng.gen()))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { step, batch: picked[0] });
        }
        clip_grad_norm(&mut grads, cfg.clip_norm);
        adam.step(model.params_mut(), &grads);
        losses.push(loss);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(path) = &cfg.checkpoint_path {
                checkpoint::save(path, model)?;
            }
        }
        on_step(step, loss)?;
    }
    Ok(losses)
}

/// Adds seeded uniform noise in `[-scale, scale)` to every parameter. Moves a
/// fresh model away from its near-symmetric initialization so that every
/// gradient entry is large enough to be checked against finite differences.
pub fn jitter_parameters<T: Scalar>(model: &mut Model<T>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += T::from_f64_lossy(rng.gen_range(-scale..scale));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Worst relative error per parameter array, in parameter order.
    pub groups: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

/// Relative error with a floor on the denominator so entries whose true
/// gradient is ~0 are judged by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences of step `epsilon`
/// for every entry of every parameter array.
pub fn gradient_check(model: &Model<f64>, batch: &Batch, epsilon: f64) -> Result<GradientReport> {
    let (_, analytic) = loss_and_grads(model, batch, None)?;
    let mut probe = model.clone();
    let mut groups = Vec::with_capacity(analytic.len());
    for (p, grad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..grad.data().len() {
            let orig = probe.params()[p].data()[i];
            probe.params_mut()[p].data_mut()[i] = orig + epsilon;
            let up = batch_loss(&probe, batch)?;
            probe.params_mut()[p].data_mut()[i] = orig - epsilon;
            let down = batch_loss(&probe, batch)?;
            probe.params_mut()[p].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let a = grad.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR));
        }
        groups.push((model.param_names()[p].clone(), worst));
    }
    let max_relative_error = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    Ok(GradientReport { groups, max_relative_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{build_training_examples, make_synthetic_corpus};
    use crate::model::ModelConfig;
    use crate::tokenizer::{Token, TokenSeq, Vocabulary};

    fn tiny_example() -> InfillingExample {
        let seq = |s: &str| s.parse::<TokenSeq>().unwrap();
        let past = seq("BAR(1) STRUCT(1) TEMPO(120) POS(0) PITCH(60) DUR(4)");
        let future = seq("BAR(1) STRUCT(0) TEMPO(120) POS(4) PITCH(64) DUR(2)");
        let target = seq("BAR(2) STRUCT(2) TEMPO(120) POS(0) PITCH(67) DUR(8) BAR(1) STRUCT(1) TEMPO(120) POS(8) PITCH(62) DUR(4)");
        let contexts = vec![seq("BAR(1) STRUCT(1) TEMPO(120) POS(0) PITCH(60) DUR(4)"), seq("BAR(1) STRUCT(2) TEMPO(120) POS(2) PITCH(67) DUR(3)")];
        let mut ex = InfillingExample { past, future, target, contexts, indices: Vec::new(), target_bars: 2 };
        ex.indices = crate::ingest::reorder_and_wrap(&ex).indices;
        ex
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let item = BatchItem { ids: vec![0, 1, 2], positions: vec![0, 1, 2], indices: vec![0; 3], contexts: vec![], picks: vec![(0, 1), (1, 2)] };
        let logits = Matrix::<f64>::zeros(3, Vocabulary::SIZE);
        assert!((loss(&logits, &item).unwrap() - (216f64).ln()).abs() < 1e-12);
        let mut sure = Matrix::<f64>::from_fn(3, Vocabulary::SIZE, |_, _| -1e4);
        sure.set(0, 1, 1e4);
        sure.set(1, 2, 1e4);
        assert_eq!(loss(&sure, &item).unwrap(), 0.0);
        let empty = BatchItem { picks: vec![], ..item };
        assert!(matches!(loss(&logits, &empty), Err(Error::EmptyMask)));
    }

    #[test]
    fn batch_loss_agrees_with_logit_loss_and_ignores_context_labels() {
        let m = Model::<f64>::new(ModelConfig::gradient_check(), 1).unwrap();
        let ex = tiny_example();
        let batch = Batch::from_examples(&[ex.clone()], m.config(), LossRegion::Target).unwrap();
        let direct = loss(&m.forward(&batch.items[0]).unwrap(), &batch.items[0]).unwrap();
        assert!((batch_loss(&m, &batch).unwrap() - direct).abs() < 1e-12);
        let mut other = ex;
        other.past[5] = Token::Duration(9);
        other.future[3] = Token::Position(1);
        let b2 = Batch::from_examples(&[other], m.config(), LossRegion::Target).unwrap();
        let before = batch.items[0].picks.clone();
        assert_eq!(before, b2.items[0].picks);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let m = Model::<f64>::new(ModelConfig::gradient_check(), 2).unwrap();
        let songs = make_synthetic_corpus(4, 1, &["A1 B1 A1 B1"]);
        let exs = build_training_examples(&songs[0]).unwrap();
        let cfg = m.config().clone();
        let a = Batch::from_examples(&exs, &cfg, LossRegion::Target).unwrap();
        let rev: Vec<_> = exs.iter().rev().cloned().collect();
        let b = Batch::from_examples(&rev, &cfg, LossRegion::Target).unwrap();
        assert!((batch_loss(&m, &a).unwrap() - batch_loss(&m, &b).unwrap()).abs() < 1e-12);
        assert!(matches!(batch_loss(&m, &Batch::default()), Err(Error::EmptyMask)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut cfg = ModelConfig::gradient_check();
        cfg.d_model = 8;
        cfg.ffn_dim = 8;
        cfg.encoder_layers = 1;
        cfg.decoder_layers = 1;
        cfg = cfg.with_max_position(64);
        let mut m = Model::<f64>::new(cfg, 3).unwrap();
        jitter_parameters(&mut m, 4, 0.5);
        let batch = Batch::from_examples(&[tiny_example()], m.config(), LossRegion::Target).unwrap();
        let report = gradient_check(&m, &batch, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{:?}", report.groups);
        assert!(report.groups.iter().any(|(n, _)| n == "dec0.cross.wk"));
    }

    #[test]
    fn zero_steps_leave_parameters_and_seeds_repeat() {
        let songs = make_synthetic_corpus(5, 1, &["A1 B1 A1 B1"]);
        let exs = build_training_examples(&songs[0]).unwrap();
        let mut m = Model::<f64>::new(ModelConfig::gradient_check(), 4).unwrap();
        let init = m.clone();
        let cfg = TrainConfig { max_steps: 0, ..TrainConfig::default() };
        assert!(train_loop(&mut m, &exs, &cfg, |_, _| Ok(())).unwrap().is_empty());
        assert_eq!(m.params(), init.params());

        let cfg = TrainConfig { max_steps: 5, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() };
        let mut mcfg = ModelConfig::gradient_check();
        mcfg.dropout = 0.1;
        let run = || {
            let mut m = Model::<f64>::new(mcfg.clone(), 4).unwrap();
            let mut log = Vec::new();
            let losses = train_loop(&mut m, &exs, &cfg, |s, l| {
                log.push(format!("{s},{l}"));
                Ok(())
            })
            .unwrap();
            (losses, log, m.params().to_vec())
        };
        let (a, log, pa) = run();
        let (b, _, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(log.len(), 5);
        assert!(a.last().unwrap() < a.first().unwrap());
    }

    #[test]
    fn periodic_checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let songs = make_synthetic_corpus(5, 1, &["A1 B1 A1"]);
        let exs = build_training_examples(&songs[0]).unwrap();
        let mut m = Model::<f32>::new(ModelConfig::gradient_check(), 4).unwrap();
        let cfg = TrainConfig { max_steps: 2, checkpoint_every: 2, checkpoint_path: Some(path.clone()), ..TrainConfig::default() };
        train_loop(&mut m, &exs, &cfg, |_, _| Ok(())).unwrap();
        let back: Model<f32> = checkpoint::load(&path, Some(m.config())).unwrap();
        assert_eq!(back.params(), m.params());
        let bad = TrainConfig { checkpoint_every: 2, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0f64, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12 && (g[0].data()[1] - 0.8).abs() < 1e-12);
    }
}
