//! Class weights, the joint loss and the SGD training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Batch, Model, ModelError, Outputs};
use crate::pairing::HoiPair;
use crate::seed::derive_seed;
use crate::tensor::params::sgd_step;
use crate::tensor::{Graph, Mode, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Inverse-frequency predicate weights, `1 / max(count, 1)`, rescaled to mean 1.
pub fn class_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.iter().all(|&c| c == 0) {
        return Err(TrainError::Argument(
            "class weights need at least one positive count".into(),
        ));
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Positive labels per predicate over a set of training pairs.
pub fn predicate_counts(pairs: &[HoiPair], num_predicates: usize) -> Vec<usize> {
    let mut counts = vec![0; num_predicates];
    for t in pairs.iter().filter_map(|p| p.target.as_ref()) {
        for (c, &v) in counts.iter_mut().zip(t) {
            if v != 0.0 {
                *c += 1;
            }
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Layout-branch loss; absent without priming.
    pub j1: Option<f64>,
    pub j2: f64,
    pub total: f64,
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub j1: Option<Var>,
    pub j2: Var,
    pub total: Var,
}

impl JointLoss {
    pub fn report(&self, g: &Graph) -> LossReport {
        LossReport {
            j1: self.j1.map(|v| g.value(v).item()),
            j2: g.value(self.j2).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// `total = j1 + j2` where each term is the weighted BCE of one branch.
pub fn joint_loss(g: &mut Graph, out: &Outputs, targets: &Tensor, weights: &[f64]) -> Result<JointLoss> {
    let j2 = g.weighted_bce(out.p2, targets, weights)?;
    let (j1, total) = match out.p1 {
        Some(p1) => {
            let j1 = g.weighted_bce(p1, targets, weights)?;
            (Some(j1), g.add(j1, j2)?)
        }
        None => (None, j2),
    };
    Ok(JointLoss { j1, j2, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Seed of the per-epoch shuffles.
    pub seed: u64,
}

impl TrainConfig {
    /// Initial rate 0.1, divided by ten every three epochs, for ten epochs.
    pub fn high_lr(seed: u64) -> Self {
        Self {
            epochs: 10,
            lr0: 0.1,
            decay_every: 3,
            decay_factor: 0.1,
            batch_size: 32,
            seed,
        }
    }

    /// Same schedule with a smaller initial rate for from-scratch small nets.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr0: 0.01,
            ..Self::high_lr(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "high-lr" => Some(Self::high_lr(seed)),
            "desk" => Some(Self::desk(seed)),
            _ => None,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every) as i32;
        self.lr0 * self.decay_factor.powi(steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(TrainError::Argument(
                "epochs, batch_size and decay_every must be positive".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(TrainError::Argument(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::Argument(format!(
                "decay_factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        Ok(())
    }
}

/// One forward/backward/update on a batch. Returns the loss before the update.
pub fn train_step(model: &mut Model, batch: &Batch, weights: &[f64], lr: f64) -> Result<LossReport> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or(ModelError::MissingInput("batch targets"))?;
    let mut g = Graph::new(Mode::Train);
    let out = model.forward(&mut g, batch)?;
    let loss = joint_loss(&mut g, &out, targets, weights)?;
    let report = loss.report(&g);
    if !report.total.is_finite() {
        return Ok(report);
    }
    let grads = g.backward(loss.total)?;
    model.store_mut().accumulate(&grads);
    sgd_step(model.store_mut(), lr)?;
    model.apply_running_updates(&g);
    Ok(report)
}

/// Mean per-pair loss over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub j1: Option<f64>,
    pub j2: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLoss>,
}

impl TrainHistory {
    /// CSV with header `epoch,j1,j2,total,lr`; `j1` is empty without priming.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,j1,j2,total,lr")?;
        for e in &self.epochs {
            let j1 = e.j1.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", e.epoch, j1, e.j2, e.total, e.lr)?;
        }
        Ok(())
    }
}

/// Splits a permutation into batches; a trailing batch of one joins the previous
/// batch since batch statistics need two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Trains for `tc.epochs` epochs with a per-epoch shuffle and the step schedule.
pub fn train(
    model: &mut Model,
    pairs: &[HoiPair],
    weights: &[f64],
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainHistory> {
    tc.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if pairs.len() < 2 {
        return Err(TrainError::Argument(
            "batch statistics need at least two training pairs".into(),
        ));
    }
    let mut history = TrainHistory::default();
    for epoch in 0..tc.epochs {
        let lr = tc.lr_at(epoch);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);
        let (mut j1, mut j2, mut total) = (0.0, 0.0, 0.0);
        let mut has_j1 = false;
        for (b, idx) in batches(&order, tc.batch_size).into_iter().enumerate() {
            let refs: Vec<&HoiPair> = idx.iter().map(|&i| &pairs[i]).collect();
            let batch = Batch::from_pairs(&refs)?;
            let r = train_step(model, &batch, weights, lr)?;
            if !r.total.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b,
                    lr,
                    loss: r.total,
                });
            }
            let n = idx.len() as f64;
            if let Some(v) = r.j1 {
                has_j1 = true;
                j1 += v * n;
            }
            j2 += r.j2 * n;
            total += r.total * n;
        }
        let n = pairs.len() as f64;
        let e = EpochLoss {
            epoch,
            j1: has_j1.then_some(j1 / n),
            j2: j2 / n,
            total: total / n,
            lr,
        };
        on_epoch(&e);
        history.epochs.push(e);
    }
    Ok(history)
}

/// Finite-difference agreement for one model layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradCheck {
    pub layer: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

fn total_loss(model: &Model, batch: &Batch, targets: &Tensor, weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new(Mode::Train);
    let out = model.forward(&mut g, batch)?;
    let loss = joint_loss(&mut g, &out, targets, weights)?;
    Ok(g.value(loss.total).item())
}

/// Checks the joint-loss gradient of the named layers' weights against
/// central differences, on the `per_layer` entries with the largest analytic
/// gradient in each layer.
pub fn model_grad_check(
    model: &Model,
    batch: &Batch,
    weights: &[f64],
    layers: &[&str],
    per_layer: usize,
    eps: f64,
) -> Result<Vec<LayerGradCheck>> {
    use crate::tensor::gradcheck::relative_error;
    use crate::tensor::params::Slot;

    let targets = batch
        .targets
        .as_ref()
        .ok_or(ModelError::MissingInput("batch targets"))?;
    let mut g = Graph::new(Mode::Train);
    let out = model.forward(&mut g, batch)?;
    let loss = joint_loss(&mut g, &out, targets, weights)?;
    let grads = g.backward(loss.total)?;
    let mut analytic = model.store().clone();
    analytic.zero_grad();
    analytic.accumulate(&grads);

    let mut probe = model.clone();
    let mut out = Vec::new();
    for &name in layers {
        let layer = analytic
            .find(name)
            .ok_or_else(|| TrainError::Argument(format!("no layer named {name:?}")))?;
        let id = layer.id;
        let grad = layer.tensor(Slot::Weight).grad().unwrap_or(&[]).to_vec();
        let mut order: Vec<usize> = (0..grad.len()).collect();
        order.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
        let mut worst: f64 = 0.0;
        let picked = &order[..per_layer.min(order.len())];
        for &i in picked {
            let orig = probe.store().get(id).tensor(Slot::Weight).data()[i];
            let mut at = |v: f64| -> Result<f64> {
                probe.store_mut().get_mut(id).tensor_mut(Slot::Weight).data_mut()[i] = v;
                total_loss(&probe, batch, targets, weights)
            };
            let numeric = (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps);
            at(orig)?;
            worst = worst.max(relative_error(grad[i], numeric));
        }
        out.push(LayerGradCheck {
            layer: name.to_string(),
            checked: picked.len(),
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VariantSpec};
    use crate::tensor::bce_with_logit;

    #[test]
    fn class_weight_reference_values() {
        let w = class_weights(&[10, 40]).unwrap();
        assert!((w[0] - 1.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        assert_eq!(class_weights(&[7, 7, 7]).unwrap(), vec![1.0; 3]);
        let w = class_weights(&[0, 10, 10]).unwrap();
        // inverse counts 1, 0.1, 0.1 with mean 0.4
        assert!((w[0] - 2.5).abs() < 1e-12 && (w[1] - 0.25).abs() < 1e-12);
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn schedule_matches_step_decay() {
        let tc = TrainConfig::high_lr(0);
        let lrs: Vec<f64> = (0..10).map(|e| tc.lr_at(e)).collect();
        let expect = [0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.001, 0.001, 0.001, 0.0001];
        for (a, b) in lrs.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15 * b.max(1.0), "{a} vs {b}");
        }
        assert_eq!(TrainConfig::desk(0).lr_at(0), 0.01);
    }

    #[test]
    fn batches_merge_trailing_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let sizes: Vec<usize> = batches(&order, 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 5]);
        let sizes: Vec<usize> = batches(&order, 3).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3]);
        let order: Vec<usize> = (0..10).collect();
        let sizes: Vec<usize> = batches(&order, 4).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    fn logits_graph(p1: Option<&[f64]>, p2: &[f64], n: usize) -> (Graph, Outputs) {
        let mut g = Graph::new(Mode::Train);
        let p = p2.len() / n;
        let p2 = g.input(Tensor::new(vec![n, p], p2.to_vec()).unwrap());
        let p1 = p1.map(|v| g.input(Tensor::new(vec![n, p], v.to_vec()).unwrap()));
        let f = g.input(Tensor::zeros(&[n, 1]));
        (
            g,
            Outputs {
                p1,
                p2,
                f1: f,
                f2: f,
                lateral_calls: 0,
            },
        )
    }

    #[test]
    fn joint_loss_closed_forms() {
        let p = 5;
        let t = Tensor::new(vec![2, p], vec![1., 0., 1., 0., 0., 0., 1., 1., 0., 1.]).unwrap();
        let (mut g, out) = logits_graph(Some(&[0.0; 10]), &[0.0; 10], 2);
        let r = joint_loss(&mut g, &out, &t, &[1.0; 5]).unwrap().report(&g);
        assert!((r.total - 2.0 * p as f64 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(r.total, r.j1.unwrap() + r.j2);

        let sat: Vec<f64> = t.data().iter().map(|&v| if v == 1.0 { 40.0 } else { -40.0 }).collect();
        let (mut g, out) = logits_graph(Some(&sat), &sat, 2);
        let r = joint_loss(&mut g, &out, &t, &[1.0; 5]).unwrap().report(&g);
        assert!(r.total < 1e-6);

        let (mut g, out) = logits_graph(None, &[0.3; 10], 2);
        let r = joint_loss(&mut g, &out, &t, &[1.0; 5]).unwrap().report(&g);
        assert_eq!(r.j1, None);
        assert_eq!(r.total, r.j2);
    }

    #[test]
    fn single_predicate_reduces_to_plain_bce() {
        let z = [0.7, -1.2, 3.0];
        let t = [1.0, 0.0, 0.0];
        let (mut g, out) = logits_graph(None, &z, 3);
        let r = joint_loss(&mut g, &out, &Tensor::new(vec![3, 1], t.to_vec()).unwrap(), &[1.0])
            .unwrap()
            .report(&g);
        // textbook form -t ln s - (1-t) ln(1-s)
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let expect: f64 = z
            .iter()
            .zip(t)
            .map(|(&z, t)| -t * s(z).ln() - (1.0 - t) * (1.0 - s(z)).ln())
            .sum::<f64>()
            / 3.0;
        assert!((r.total - expect).abs() < 1e-12);
        assert!((bce_with_logit(z[0], 1.0) - (-s(z[0]).ln())).abs() < 1e-12);
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_batch() {
        let c = ModelConfig::tiny(3, 2);
        let mut m = Model::build(&c, &VariantSpec::standard(), 3).unwrap();
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 4;
        let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0));
        let batch = Batch {
            ip: t(&[n, 2, 32, 32]),
            crop: t(&[n, 3, 32, 32]),
            w_o: t(&[n, c.embed_dim]),
            f_h: t(&[n, c.det_feat_dim]),
            f_o: t(&[n, c.det_feat_dim]),
            targets: Some(Tensor::new(vec![n, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 0.]).unwrap()),
        };
        let first = train_step(&mut m, &batch, &[1.0; 3], 0.05).unwrap();
        let mut last = first;
        for _ in 0..10 {
            last = train_step(&mut m, &batch, &[1.0; 3], 0.05).unwrap();
        }
        assert!(last.total < first.total, "{last:?} vs {first:?}");
    }

    #[test]
    fn csv_layout() {
        let h = TrainHistory {
            epochs: vec![EpochLoss {
                epoch: 0,
                j1: None,
                j2: 0.5,
                total: 0.5,
                lr: 0.01,
            }],
        };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,j1,j2,total,lr\n0,,0.5,0.5,0.01\n");
    }
}
