//! Loss, Adam with exponential learning-rate decay, the training loop,
//! support-weighted metrics and the k-fold harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::data::{carve_validation, kfold_partitions, smote_oversample, Dataset, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::FacialGraph;
use crate::layers::ParamStore;
use crate::models::{Model, ModelConfig, ModelKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy of `[B, K]` logits.
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy_loss",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= shape[1]) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            shape[1]
        )));
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.pick(ls, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_rate: f64,
    pub decay_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_rate: 0.96,
            decay_steps: 1000,
            epochs: 150,
            batch_size: 10,
        }
    }
}

impl OptimizerConfig {
    /// Defaults with the batch size used for `kind` (8 hybrid, 10 otherwise).
    pub fn for_kind(kind: ModelKind) -> Self {
        Self {
            batch_size: if kind == ModelKind::Hybrid { 8 } else { 10 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad(format!("decay_rate must be in (0, 1], got {}", self.decay_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must be in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.decay_steps == 0 || self.batch_size == 0 {
            return bad("decay_steps and batch_size must be positive".into());
        }
        Ok(())
    }
}

/// `lr0 * decay_rate^(step / decay_steps)` with a continuous exponent.
pub fn lr_schedule(cfg: &OptimizerConfig, step: u64) -> f64 {
    cfg.lr0 * cfg.decay_rate.powf(step as f64 / cfg.decay_steps as f64)
}

/// Adam moments for every tensor of a parameter store.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimizerConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// Number of updates applied so far; the next update uses
    /// `lr_schedule(cfg, global_step())`.
    pub fn global_step(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        lr_schedule(&self.cfg, self.step)
    }

    /// Applies one update from the accumulated gradients and returns the
    /// learning rate used. Parameters are untouched if any gradient is
    /// non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<f64> {
        for (name, t) in params.iter() {
            if let Some(i) = t.grad().iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "parameter `{name}` has gradient {} at element {i}",
                    t.grad()[i]
                )));
            }
        }
        let lr = lr_schedule(&self.cfg, self.step);
        let t = (self.step + 1) as i32;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let c1 = T::one() / (T::one() - b1.powi(t));
        let c2 = T::one() / (T::one() - b2.powi(t));
        let (lr_t, eps) = (T::of(lr), T::of(self.cfg.eps));
        for (k, (_, tensor)) in params.tensors_mut().enumerate() {
            let grad = tensor.grad().to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, theta) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let m_hat = m[j] * c1;
                let v_hat = v[j] * c2;
                *theta -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(lr)
    }
}

// ---- history -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Global step after the epoch.
    pub step: u64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<EpochRecord>,
}

impl History {
    pub const HEADER: &'static str = "epoch,step,lr,train_loss,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let val = r.val_accuracy.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.train_loss, val);
        }
        out
    }
}

// ---- training loop -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    /// Oversample the minority class of the training partition (landmark
    /// models only).
    pub smote: bool,
    pub smote_k: usize,
    /// Finish once validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            smote: true,
            smote_k: 5,
            target_val_accuracy: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub history: History,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn to_scalar_tensors<T: Scalar>(ds: &Dataset) -> Result<Vec<Tensor<T>>> {
    ds.samples()
        .iter()
        .map(|s| Tensor::from_f64(s.data.shape(), s.data.data()))
        .collect()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Trains a fresh model on `train`, selecting the parameters of the epoch
/// with the best accuracy on `val` (or the final epoch without `val`).
pub fn train_model<T: Scalar>(
    model_cfg: &ModelConfig,
    graph: &FacialGraph,
    train: &Dataset,
    val: Option<&Dataset>,
    opt: &OptimizerConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainOutcome<T>> {
    opt.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let balanced;
    let train = if opts.smote && model_cfg.kind != ModelKind::Hybrid {
        let counts = train.class_counts();
        if counts[0] != counts[1] && counts.iter().all(|&c| c > 0) {
            balanced = smote_oversample(train, opts.smote_k, seed)?;
            log::info!("SMOTE: {:?} -> {:?}", counts, balanced.class_counts());
            &balanced
        } else {
            train
        }
    } else {
        train
    };

    let mut model = Model::<T>::new(model_cfg.clone(), graph, seed)?;
    let xs = to_scalar_tensors::<T>(train)?;
    let labels = train.labels();
    let expect = model.input_shape();
    if let Some(s) = xs.iter().find(|x| x.shape() != expect.as_slice()) {
        return Err(Error::shape(
            "train_model",
            format!("samples have shape {:?}, model expects {:?}", s.shape(), expect),
        ));
    }
    let val_xs = val.map(to_scalar_tensors::<T>).transpose()?;

    let mut adam = Adam::new(opt.clone(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = History::default();
    let mut best: Option<(f64, usize, ParamStore<T>)> = None;

    for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = adam.current_lr();
        for batch in order.chunks(opt.batch_size) {
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let inputs: Vec<Var> = batch.iter().map(|&i| tape.leaf(&xs[i])).collect();
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = model.forward_batch(&mut tape, &p, &inputs)?;
            let loss = cross_entropy_loss(&mut tape, logits, &batch_labels)?;
            let loss_value = tape.value(loss)[0].to_f64_lossy();
            if !loss_value.is_finite() {
                log::info!("loss became {loss_value} in epoch {epoch}");
                return Err(Error::Divergence {
                    epoch,
                    history: Box::new(history),
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&tape, &p);
            lr = adam.step(params)?;
        }
        let val_accuracy = match (&val_xs, val) {
            (Some(vx), Some(vd)) => {
                let preds = predict_tensors(&model, vx)?;
                let correct = preds.iter().zip(vd.labels()).filter(|(p, l)| **p == *l).count();
                Some(correct as f64 / vd.len().max(1) as f64)
            }
            _ => None,
        };
        let train_loss = loss_sum / xs.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.6}, val {val_accuracy:?}");
        history.rows.push(EpochRecord {
            epoch,
            step: adam.global_step(),
            lr,
            train_loss,
            val_accuracy,
        });
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.params().clone()));
            }
            if opts.target_val_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => history.rows.len(),
    };
    model.params_mut().zero_grad();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
    })
}

fn predict_tensors<T: Scalar>(model: &Model<T>, xs: &[Tensor<T>]) -> Result<Vec<usize>> {
    xs.iter().map(|x| Ok(argmax(&model.logits(x)?))).collect()
}

/// Softmax class probabilities of every clip.
pub fn predict_proba<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<Vec<[f64; NUM_CLASSES]>> {
    to_scalar_tensors::<T>(ds)?
        .iter()
        .map(|x| {
            let logits: Vec<f64> = model.logits(x)?.iter().map(|v| v.to_f64_lossy()).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            Ok([e[0] / z, e[1] / z])
        })
        .collect()
}

/// Arg-max class of every clip (ties go to class 0).
pub fn predict_labels<T: Scalar>(model: &Model<T>, ds: &Dataset) -> Result<Vec<usize>> {
    predict_tensors(model, &to_scalar_tensors::<T>(ds)?)
}

// ---- metrics -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    /// Classes never predicted; their precision is reported as 0.
    pub unpredicted_classes: Vec<usize>,
}

impl Metrics {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }
}

/// Per-class precision, recall and F1 averaged with class-support weights.
pub fn evaluate_metrics(predictions: &[usize], labels: &[usize]) -> Result<Metrics> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Data(format!(
            "need equal, non-zero numbers of predictions and labels, got {} and {}",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p >= NUM_CLASSES || l >= NUM_CLASSES {
            return Err(Error::Data(format!("class index out of range: predicted {p}, true {l}")));
        }
        confusion[l][p] += 1;
    }
    let n = labels.len() as f64;
    let mut per_class = [ClassMetrics::default(); NUM_CLASSES];
    let mut unpredicted_classes = Vec::new();
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..NUM_CLASSES {
        let tp = confusion[c][c] as f64;
        let predicted: usize = (0..NUM_CLASSES).map(|r| confusion[r][c]).sum();
        let support: usize = confusion[c].iter().sum();
        if predicted == 0 {
            unpredicted_classes.push(c);
        }
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        per_class[c] = ClassMetrics {
            precision: p,
            recall: r,
            f1: f,
            support,
        };
        let w = support as f64 / n;
        precision += w * p;
        recall += w * r;
        f1 += w * f;
    }
    let trace: usize = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        confusion,
        accuracy: trace as f64 / n,
        precision,
        recall,
        f1,
        per_class,
        unpredicted_classes,
    })
}

/// Per-fold metrics and their arithmetic means.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<Metrics>,
    pub mean_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<Metrics>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = |f: fn(&Metrics) -> f64| folds.iter().map(f).sum::<f64>() / n;
        Self {
            mean_accuracy: mean(|m| m.accuracy),
            mean_precision: mean(|m| m.precision),
            mean_recall: mean(|m| m.recall),
            mean_f1: mean(|m| m.f1),
            folds,
        }
    }

    /// Confusion matrix summed over folds.
    pub fn confusion(&self) -> [[usize; NUM_CLASSES]; NUM_CLASSES] {
        let mut c = [[0; NUM_CLASSES]; NUM_CLASSES];
        for f in &self.folds {
            for i in 0..NUM_CLASSES {
                for j in 0..NUM_CLASSES {
                    c[i][j] += f.confusion[i][j];
                }
            }
        }
        c
    }

    /// Table text: metrics in percent with two decimals; confusion
    /// columns are `tn,fp,fn,tp` with class 1 (pain) as positive.
    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let mut out = String::from("fold,accuracy,precision,recall,f1,tn,fp,fn,tp\n");
        for (i, m) in self.folds.iter().enumerate() {
            let c = m.confusion;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                i + 1,
                pct(m.accuracy),
                pct(m.precision),
                pct(m.recall),
                pct(m.f1),
                c[0][0],
                c[0][1],
                c[1][0],
                c[1][1]
            );
        }
        let c = self.confusion();
        let _ = writeln!(
            out,
            "mean,{},{},{},{},{},{},{},{}",
            pct(self.mean_accuracy),
            pct(self.mean_precision),
            pct(self.mean_recall),
            pct(self.mean_f1),
            c[0][0],
            c[0][1],
            c[1][0],
            c[1][1]
        );
        for (i, m) in self.folds.iter().enumerate() {
            for c in &m.unpredicted_classes {
                let _ = writeln!(out, "# fold {}: class {c} never predicted, precision taken as 0", i + 1);
            }
        }
        out
    }
}

// ---- k-fold ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldOptions {
    pub k: usize,
    /// Worker threads; 1 runs folds serially.
    pub jobs: usize,
    /// Share of each training partition held out for model selection.
    pub val_fraction: f64,
    pub train: TrainOptions,
}

impl Default for KFoldOptions {
    fn default() -> Self {
        Self {
            k: 5,
            jobs: 1,
            val_fraction: 0.1,
            train: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KFoldResult {
    pub report: EvalReport,
    pub histories: Vec<History>,
}

/// Trains one fresh model per stratified fold (fold `i` seeded with
/// `seed ^ i`) and evaluates it on the held-out part.
pub fn run_kfold_experiment<T: Scalar>(
    model_cfg: &ModelConfig,
    graph: &FacialGraph,
    ds: &Dataset,
    opt: &OptimizerConfig,
    opts: &KFoldOptions,
    seed: u64,
) -> Result<KFoldResult> {
    let folds = kfold_partitions(ds, opts.k, seed)?;
    let run_fold = |(i, fold): (usize, &crate::data::Fold)| -> Result<(Metrics, History)> {
        let fold_seed = seed ^ i as u64;
        let wrap = |e: Error| Error::Fold {
            fold: i,
            source: Box::new(e),
        };
        let train_part = ds.subset(&fold.train);
        let (fit, val) = carve_validation(&train_part, opts.val_fraction, fold_seed).map_err(wrap)?;
        let val = (!val.is_empty()).then_some(val);
        let outcome = train_model::<T>(model_cfg, graph, &fit, val.as_ref(), opt, &opts.train, fold_seed)
            .map_err(wrap)?;
        let test = ds.subset(&fold.test);
        let preds = predict_labels(&outcome.model, &test).map_err(wrap)?;
        let metrics = evaluate_metrics(&preds, &test.labels()).map_err(wrap)?;
        log::info!("fold {}: accuracy {:.4}", i + 1, metrics.accuracy);
        Ok((metrics, outcome.history))
    };
    let results: Vec<Result<(Metrics, History)>> = if opts.jobs <= 1 {
        folds.iter().enumerate().map(run_fold).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.jobs)))?;
        pool.install(|| folds.par_iter().enumerate().map(run_fold).collect())
    };
    let mut metrics = Vec::with_capacity(results.len());
    let mut histories = Vec::with_capacity(results.len());
    for r in results {
        let (m, h) = r?;
        metrics.push(m);
        histories.push(h);
    }
    Ok(KFoldResult {
        report: EvalReport::from_folds(metrics),
        histories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{flatten_landmarks, generate_synthetic, normalize_dataset};
    use crate::gradcheck::relative_error;
    use crate::graph::build_facial_adjacency;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let l = cross_entropy_loss(&mut tape, z, &[0, 1]).unwrap();
        assert!((tape.value(l)[0] - 2f64.ln()).abs() < 1e-15);
        let sat = tape.constant(&[1, 2], vec![1000.0, 0.0]).unwrap();
        let l = cross_entropy_loss(&mut tape, sat, &[0]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-12);
        assert!(tape.value(l)[0] >= 0.0);
        assert!(matches!(cross_entropy_loss(&mut tape, sat, &[2]), Err(Error::Data(_))));
    }

    #[test]
    fn loss_gradient_is_softmax_minus_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let b = rng.gen_range(1..6);
            let logits: Vec<f64> = (0..2 * b).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(&Tensor::from_vec(&[b, 2], logits.clone()).unwrap().with_grad());
            let loss = cross_entropy_loss(&mut tape, x, &labels).unwrap();
            tape.backward(loss).unwrap();
            let g = tape.grad(x).unwrap();
            for r in 0..b {
                let m = logits[2 * r].max(logits[2 * r + 1]);
                let z = (logits[2 * r] - m).exp() + (logits[2 * r + 1] - m).exp();
                for c in 0..2 {
                    let sm = (logits[2 * r + c] - m).exp() / z;
                    let expect = (sm - f64::from(u8::from(labels[r] == c))) / b as f64;
                    assert!((g[2 * r + c] - expect).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = OptimizerConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 1e-4);
        assert!(relative_error(lr_schedule(&cfg, 1000), 9.6e-5) < 1e-12);
        let mut prev = f64::INFINITY;
        for s in 0..=10_000 {
            let lr = lr_schedule(&cfg, s);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(OptimizerConfig { decay_rate: 1.5, ..cfg.clone() }.validate().is_err());
        assert!(OptimizerConfig { lr0: 0.0, ..cfg }.validate().is_err());
    }

    fn single_param(value: f64, n: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("theta".into(), Tensor::full(&[n], value));
        s
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let cfg = OptimizerConfig::default();
        let mut store = single_param(0.5, 3);
        let mut adam = Adam::new(cfg.clone(), &store);
        store.tensors_mut().for_each(|(_, t)| t.grad_mut().fill(1.0));
        let lr = adam.step(&mut store).unwrap();
        assert_eq!(lr, lr_schedule(&cfg, 0));
        for &v in store.tensors_mut().next().unwrap().1.data() {
            assert!(relative_error(0.5 - v, cfg.lr0) < 1e-6);
        }

        let mut still = single_param(0.25, 2);
        let mut adam = Adam::new(cfg, &still);
        let before: Vec<u64> = still.iter().next().unwrap().1.data().iter().map(|v| v.to_bits()).collect();
        for _ in 0..50 {
            adam.step(&mut still).unwrap();
        }
        let after: Vec<u64> = still.iter().next().unwrap().1.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert_eq!(adam.global_step(), 50);
    }

    #[test]
    fn adam_descends_a_parabola_and_rejects_nan() {
        let cfg = OptimizerConfig {
            lr0: 1e-2,
            ..OptimizerConfig::default()
        };
        let mut store = single_param(1.0, 1);
        let mut adam = Adam::new(cfg.clone(), &store);
        for _ in 0..100 {
            store.tensors_mut().for_each(|(_, t)| {
                let g = 2.0 * t.data()[0];
                t.grad_mut()[0] = g;
            });
            adam.step(&mut store).unwrap();
        }
        assert!(store.iter().next().unwrap().1.data()[0].abs() < 1.0);

        let mut bad = single_param(1.0, 2);
        let mut adam = Adam::new(cfg, &bad);
        bad.tensors_mut().for_each(|(_, t)| t.grad_mut()[1] = f64::NAN);
        match adam.step(&mut bad) {
            Err(Error::NonFiniteGradient(msg)) => assert!(msg.contains("theta")),
            other => panic!("{other:?}"),
        }
        assert_eq!(bad.iter().next().unwrap().1.data(), &[1.0, 1.0]);
    }

    #[test]
    fn metrics_hand_example() {
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut add = |p: usize, l: usize, n: usize| {
            for _ in 0..n {
                preds.push(p);
                labels.push(l);
            }
        };
        add(1, 1, 9);
        add(0, 0, 8);
        add(1, 0, 1);
        add(0, 1, 2);
        let m = evaluate_metrics(&preds, &labels).unwrap();
        assert_eq!(m.confusion, [[8, 1], [2, 9]]);
        assert!((m.accuracy - 0.85).abs() < 1e-12);
        assert!((m.recall - 0.85).abs() < 1e-12);
        assert!((m.per_class[1].precision - 0.9).abs() < 1e-12);
        assert!((m.per_class[1].recall - 9.0 / 11.0).abs() < 1e-12);

        let perfect = evaluate_metrics(&[0, 1, 1], &[0, 1, 1]).unwrap();
        assert_eq!((perfect.accuracy, perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0, 1.0));

        let none = evaluate_metrics(&[0, 0], &[0, 1]).unwrap();
        assert_eq!(none.unpredicted_classes, vec![1]);
        assert_eq!(none.per_class[1].precision, 0.0);
        assert!(evaluate_metrics(&[], &[]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weighted_recall_is_accuracy_and_relabel_invariant(
            pairs in proptest::collection::vec((0usize..2, 0usize..2), 1..60)
        ) {
            let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = evaluate_metrics(&p, &l).unwrap();
            prop_assert!((m.recall - m.accuracy).abs() < 1e-12);
            prop_assert_eq!(m.total(), p.len());
            let flip = |v: &[usize]| v.iter().map(|x| 1 - x).collect::<Vec<_>>();
            let f = evaluate_metrics(&flip(&p), &flip(&l)).unwrap();
            prop_assert!((f.accuracy - m.accuracy).abs() < 1e-12);
            prop_assert!((f.precision - m.precision).abs() < 1e-12);
            prop_assert!((f.recall - m.recall).abs() < 1e-12);
            prop_assert!((f.f1 - m.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn report_means_and_text() {
        let a = evaluate_metrics(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap();
        let b = evaluate_metrics(&[1, 1], &[1, 1]).unwrap();
        let r = EvalReport::from_folds(vec![a.clone(), b.clone()]);
        assert!((r.mean_accuracy - (a.accuracy + b.accuracy) / 2.0).abs() < 1e-12);
        let text = r.to_text();
        assert!(text.contains("1,75.00,"));
        assert!(text.contains("\nmean,87.50,"));
        assert!(text.contains("# fold 2: class 0 never predicted"));
    }

    fn toy_config(kind: ModelKind) -> ModelConfig {
        let mut cfg = ModelConfig::with_kind(kind).with_widths(&[2, 4]);
        cfg.blocks[0].temporal_kernel = 3;
        cfg.lstm_hidden = 4;
        cfg.feature_dim = 136;
        cfg
    }

    fn fast_opt(epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            lr0: 3e-3,
            epochs,
            batch_size: 4,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic_and_tracks_lr() {
        let g = build_facial_adjacency();
        let ds = normalize_dataset(&generate_synthetic(3, 1).unwrap()).unwrap();
        let opt = fast_opt(3);
        let run = || {
            train_model::<f64>(&toy_config(ModelKind::Stgcn), &g, &ds, Some(&ds), &opt, &TrainOptions::default(), 5).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.history.rows.len(), 3);
        for r in &a.history.rows {
            assert_eq!(r.step, 2 * r.epoch as u64);
            assert_eq!(r.lr, lr_schedule(&opt, r.step - 1));
        }
        let csv = a.history.to_csv();
        assert!(csv.starts_with("epoch,step,lr,train_loss,val_accuracy\n1,2,"));
    }

    #[test]
    fn training_rejects_empty_and_mismatched_data() {
        let g = build_facial_adjacency();
        let empty = Dataset::default();
        let opt = fast_opt(1);
        assert!(train_model::<f64>(&toy_config(ModelKind::Stgcn), &g, &empty, None, &opt, &TrainOptions::default(), 0).is_err());
        let feats = flatten_landmarks(&generate_synthetic(2, 0).unwrap()).unwrap();
        assert!(matches!(
            train_model::<f64>(&toy_config(ModelKind::Stgcn), &g, &feats, None, &opt, &TrainOptions::default(), 0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn divergence_carries_history() {
        let g = build_facial_adjacency();
        let ds = normalize_dataset(&generate_synthetic(2, 2).unwrap()).unwrap();
        let opt = OptimizerConfig {
            lr0: 1e300,
            decay_rate: 1.0,
            ..fast_opt(3)
        };
        match train_model::<f64>(&toy_config(ModelKind::Stgcn), &g, &ds, None, &opt, &TrainOptions::default(), 0) {
            Err(e @ Error::Divergence { .. }) => assert_eq!(e.exit_code(), 3),
            Err(e @ Error::NonFiniteGradient(_)) => assert_eq!(e.exit_code(), 3),
            other => panic!("{:?}", other.map(|o| o.history)),
        }
    }

    #[test]
    fn hybrid_features_train_in_f32() {
        let g = build_facial_adjacency();
        let ds = flatten_landmarks(&normalize_dataset(&generate_synthetic(2, 3).unwrap()).unwrap()).unwrap();
        let out = train_model::<f32>(&toy_config(ModelKind::Hybrid), &g, &ds, Some(&ds), &fast_opt(2), &TrainOptions::default(), 0).unwrap();
        assert_eq!(out.history.rows.len(), 2);
        let probs = predict_proba(&out.model, &ds).unwrap();
        for p in probs {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn kfold_report_shape_and_parallel_determinism() {
        let g = build_facial_adjacency();
        let ds = flatten_landmarks(&normalize_dataset(&generate_synthetic(10, 4).unwrap()).unwrap()).unwrap();
        let mut cfg = toy_config(ModelKind::Hybrid);
        cfg.lstm_variant = crate::layers::LstmVariant::Plain;
        let opt = fast_opt(2);
        let serial = run_kfold_experiment::<f64>(&cfg, &g, &ds, &opt, &KFoldOptions::default(), 9).unwrap();
        let parallel = run_kfold_experiment::<f64>(&cfg, &g, &ds, &opt, &KFoldOptions { jobs: 3, ..KFoldOptions::default() }, 9).unwrap();
        assert_eq!(serial.report.folds.len(), 5);
        assert_eq!(serial.report.to_text(), parallel.report.to_text());
        assert_eq!(serial.report, parallel.report);
        let mean = serial.report.folds.iter().map(|m| m.accuracy).sum::<f64>() / 5.0;
        assert!((serial.report.mean_accuracy - mean).abs() < 1e-12);
        for f in &serial.report.folds {
            assert_eq!(f.total(), 4);
        }
        let tiny = ds.subset(&[0, 1, 10, 11]);
        match run_kfold_experiment::<f64>(&cfg, &g, &tiny, &opt, &KFoldOptions::default(), 0) {
            Err(Error::Data(_)) => {}
            other => panic!("{:?}", other.map(|r| r.report)),
        }
    }
}
