//! Functional copies of a backbone (fine-tuning, pruning, distillation) and
//! independently trained backbones.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harness::data::gen_synthetic_images;
use crate::nn::{
    l1_unstructured_prune, Activation, AdamConfig, Matrix, MlpNetwork, MlpSpec, OptimizerState,
};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;
use crate::watermark::ModelBundle;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Finetune,
    Prune,
    Distill,
    Independent,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Finetune => "finetune",
            Self::Prune => "prune",
            Self::Distill => "distill",
            Self::Independent => "independent",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Self::Finetune),
            "prune" => Ok(Self::Prune),
            "distill" => Ok(Self::Distill),
            "independent" => Ok(Self::Independent),
            _ => Err(invalid(format!("unknown attack kind '{s}'"))),
        }
    }
}

/// One perturbation recipe. Fields irrelevant to `kind` are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub prune_fraction: f64,
    /// Hidden widths of distillation students and independent models.
    pub hidden: Vec<usize>,
    /// Inputs used for distillation or pretraining.
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
}

impl AttackSpec {
    fn base(kind: AttackKind, seed: u64) -> Self {
        Self {
            kind,
            epochs: 0,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            prune_fraction: 0.0,
            hidden: Vec::new(),
            samples: 0,
            classes: 4,
            seed,
        }
    }

    pub fn finetune(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate,
            weight_decay: 1e-2,
            samples: 800,
            ..Self::base(AttackKind::Finetune, seed)
        }
    }

    pub fn prune(fraction: f64) -> Self {
        Self {
            prune_fraction: fraction,
            ..Self::base(AttackKind::Prune, 0)
        }
    }

    pub fn distill(hidden: Vec<usize>, epochs: usize, samples: usize, seed: u64) -> Self {
        Self {
            epochs,
            hidden,
            samples,
            ..Self::base(AttackKind::Distill, seed)
        }
    }

    pub fn independent(hidden: Vec<usize>, seed: u64) -> Self {
        Self {
            epochs: PretrainConfig::default().epochs,
            hidden,
            samples: PretrainConfig::default().images,
            ..Self::base(AttackKind::Independent, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            return Err(invalid(format!(
                "prune fraction {} outside [0, 1]",
                self.prune_fraction
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(invalid("learning rate must be > 0 and weight decay >= 0"));
        }
        if self.kind == AttackKind::Finetune && self.classes < 2 {
            return Err(invalid("fine-tuning task needs at least two classes"));
        }
        Ok(())
    }
}

/// Synthetic labelled classification data: noisy copies of `C` prototype images.
#[derive(Clone, Debug, PartialEq)]
pub struct DownstreamTask {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

impl DownstreamTask {
    pub fn generate(
        s: usize,
        classes: usize,
        count: usize,
        spread: f64,
        seed: u64,
    ) -> Result<Self> {
        if classes < 2 || count == 0 {
            return Err(invalid("task needs >= 2 classes and >= 1 sample"));
        }
        let prototypes = gen_synthetic_images(classes, s, derive_seed(seed, &[0xC1A5]))?;
        let mut rng = stream(seed, &[0xDA7A]);
        let mut inputs = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % classes;
            let x = prototypes[c]
                .iter()
                .map(|&p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (p + spread * z).clamp(0.0, 1.0)
                })
                .collect();
            inputs.push(x);
            labels.push(c);
        }
        Ok(Self {
            inputs,
            labels,
            classes,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

fn to_matrix<T: Scalar>(rows: &[&Vec<f64>]) -> Result<Matrix<T>> {
    let cast: Vec<Vec<T>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| T::from_f64_lossy(v)).collect())
        .collect();
    Matrix::from_rows(&cast)
}

fn diverged(epoch: usize, what: &str) -> Error {
    Error::Diverged {
        epoch,
        detail: format!("non-finite {what}"),
    }
}

fn softmax_ce_grad<T: Scalar>(logits: &Matrix<T>, labels: &[usize]) -> (f64, usize, Matrix<T>) {
    let scale = T::one() / T::from_usize(labels.len()).expect("usize fits");
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut loss = 0.0;
    let mut correct = 0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&z| (z - max).exp()).collect();
        let sum: T = exps.iter().cloned().sum();
        let argmax = (0..row.len())
            .max_by(|&a, &b| {
                row[a]
                    .partial_cmp(&row[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        correct += usize::from(argmax == y);
        loss -= ((exps[y] / sum).ln()).to_f64_lossy();
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = exps[c] / sum;
            *g = (p - if c == y { T::one() } else { T::zero() }) * scale;
        }
    }
    (loss / labels.len() as f64, correct, grad)
}

/// Task accuracy of `backbone` followed by `head`.
fn accuracy<T: Scalar>(
    backbone: &MlpNetwork<T>,
    head: &MlpNetwork<T>,
    task: &DownstreamTask,
) -> Result<f64> {
    let refs: Vec<&Vec<f64>> = task.inputs.iter().collect();
    let x = to_matrix::<T>(&refs)?;
    let logits = head.predict_batch(&backbone.predict_batch(&x)?)?;
    Ok(softmax_ce_grad(&logits, &task.labels).1 as f64 / task.len() as f64)
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub backbone: MlpNetwork<T>,
    pub accuracy: f64,
}

const BATCH: usize = 32;

/// Trains all backbone layers plus a fresh linear head with cross-entropy,
/// then discards the head.
pub fn finetune_attack<T: Scalar>(
    backbone: &MlpNetwork<T>,
    task: &DownstreamTask,
    epochs: usize,
    learning_rate: f64,
    weight_decay: f64,
    seed: u64,
) -> Result<FinetuneOutcome<T>> {
    if task.inputs.iter().any(|x| x.len() != backbone.input_dim()) {
        return Err(invalid("task inputs do not match backbone input size"));
    }
    let mut rng = stream(seed, &[0xF1E7]);
    let head_spec = MlpSpec::uniform(
        backbone.output_dim(),
        &[],
        task.classes,
        Activation::Identity,
        Activation::Identity,
    );
    let mut head = MlpNetwork::<T>::random(&head_spec, &mut rng);
    let mut net = backbone.clone();
    let adam = AdamConfig {
        weight_decay,
        ..AdamConfig::with_lr(learning_rate)
    };
    let mut opt_b = OptimizerState::new(&net, adam);
    let mut opt_h = OptimizerState::new(&head, adam);
    let mut order: Vec<usize> = (0..task.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let rows: Vec<&Vec<f64>> = chunk.iter().map(|&i| &task.inputs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| task.labels[i]).collect();
            let x = to_matrix::<T>(&rows)?;
            let (emb, bt) = net.forward_batch(&x)?;
            let (logits, ht) = head.forward_batch(&emb)?;
            let (loss, _, g) = softmax_ce_grad(&logits, &labels);
            if !loss.is_finite() {
                return Err(diverged(epoch, "fine-tuning loss"));
            }
            let hb = head.backward(&ht, &g)?;
            let bb = net.backward(&bt, &hb.input_grad)?;
            opt_h
                .step(&mut head, &hb.grads)
                .map_err(|_| diverged(epoch, "head gradient"))?;
            opt_b
                .step(&mut net, &bb.grads)
                .map_err(|_| diverged(epoch, "backbone gradient"))?;
        }
    }
    let accuracy = accuracy(&net, &head, task)?;
    Ok(FinetuneOutcome {
        backbone: net,
        accuracy,
    })
}

/// Global magnitude pruning of `fraction` of all weights.
pub fn prune_attack<T: Scalar>(backbone: &MlpNetwork<T>, fraction: f64) -> Result<MlpNetwork<T>> {
    l1_unstructured_prune(backbone, fraction)
}

/// Mean of `||h(x) - f(x)|| / ||f(x)||` over `inputs`.
pub fn relative_embedding_error<T: Scalar>(
    h: &MlpNetwork<T>,
    f: &MlpNetwork<T>,
    inputs: &[Vec<f64>],
) -> Result<f64> {
    if inputs.is_empty() {
        return Err(invalid("no inputs"));
    }
    let refs: Vec<&Vec<f64>> = inputs.iter().collect();
    let x = to_matrix::<T>(&refs)?;
    let a = h.predict_batch(&x)?;
    let b = f.predict_batch(&x)?;
    let mut total = 0.0;
    for (ra, rb) in a.row_iter().zip(b.row_iter()) {
        let num: f64 = ra
            .iter()
            .zip(rb)
            .map(|(&p, &q)| (p - q).to_f64_lossy().powi(2))
            .sum();
        let den: f64 = rb.iter().map(|&q| q.to_f64_lossy().powi(2)).sum();
        total += (num / den.max(f64::MIN_POSITIVE)).sqrt();
    }
    Ok(total / inputs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct DistillOutcome<T> {
    pub student: MlpNetwork<T>,
    /// Mean squared embedding distance on the distillation inputs after training.
    pub loss: f64,
}

/// Mean over rows of `||a - b||^2` and the matching output gradient.
fn mse_grad<T: Scalar>(out: &Matrix<T>, target: &Matrix<T>) -> (f64, Matrix<T>) {
    let scale = (T::one() + T::one()) / T::from_usize(out.rows()).expect("usize fits");
    let mut grad = Matrix::zeros(out.rows(), out.cols());
    let mut loss = T::zero();
    for ((g, &o), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(out.as_slice())
        .zip(target.as_slice())
    {
        let e = o - t;
        loss += e * e;
        *g = scale * e;
    }
    (loss.to_f64_lossy() / out.rows() as f64, grad)
}

fn fit_mse<T: Scalar>(
    net: &mut MlpNetwork<T>,
    inputs: &Matrix<T>,
    targets: &Matrix<T>,
    epochs: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut opt = OptimizerState::new(net, AdamConfig::with_lr(learning_rate));
    let mut order: Vec<usize> = (0..inputs.rows()).collect();
    for epoch in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(BATCH) {
            let x = Matrix::from_fn(chunk.len(), inputs.cols(), |r, c| inputs.get(chunk[r], c));
            let y = Matrix::from_fn(chunk.len(), targets.cols(), |r, c| targets.get(chunk[r], c));
            let (out, trace) = net.forward_batch(&x)?;
            let (loss, g) = mse_grad(&out, &y);
            if !loss.is_finite() {
                return Err(diverged(epoch, "distillation loss"));
            }
            let bp = net.backward(&trace, &g)?;
            opt.step(net, &bp.grads)
                .map_err(|_| diverged(epoch, "gradient"))?;
        }
    }
    Ok(())
}

/// Matches a student `s -> k` to the teacher's embeddings on synthetic images.
pub fn distill_attack<T: Scalar>(
    teacher: &MlpNetwork<T>,
    student_spec: &MlpSpec,
    data_seed: u64,
    epochs: usize,
    samples: usize,
    learning_rate: f64,
) -> Result<DistillOutcome<T>> {
    let start = MlpNetwork::random(student_spec, &mut stream(data_seed, &[0x57D7]));
    distill_from(teacher, start, data_seed, epochs, samples, learning_rate)
}

/// [`distill_attack`] starting from a given student.
pub fn distill_from<T: Scalar>(
    teacher: &MlpNetwork<T>,
    mut student: MlpNetwork<T>,
    data_seed: u64,
    epochs: usize,
    samples: usize,
    learning_rate: f64,
) -> Result<DistillOutcome<T>> {
    if student.input_dim() != teacher.input_dim() || student.output_dim() != teacher.output_dim() {
        return Err(Error::IncompatibleSuspect(format!(
            "student maps {} -> {}, teacher {} -> {}",
            student.input_dim(),
            student.output_dim(),
            teacher.input_dim(),
            teacher.output_dim()
        )));
    }
    if samples == 0 {
        return Err(invalid("distillation needs at least one input"));
    }
    let images = gen_synthetic_images(samples, teacher.input_dim(), data_seed)?;
    let refs: Vec<&Vec<f64>> = images.iter().collect();
    let x = to_matrix::<T>(&refs)?;
    let y = teacher.predict_batch(&x)?;
    fit_mse(
        &mut student,
        &x,
        &y,
        epochs,
        learning_rate,
        &mut stream(data_seed, &[0xD157]),
    )?;
    let loss = mse_grad(&student.predict_batch(&x)?, &y).0;
    Ok(DistillOutcome { student, loss })
}

/// Self-supervised pretraining: reconstruct masked pixels through the
/// `k`-dimensional bottleneck with a temporary linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub images: usize,
    pub epochs: usize,
    pub mask_fraction: f64,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            images: 1000,
            epochs: 5,
            mask_fraction: 0.25,
            learning_rate: 1e-3,
        }
    }
}

/// Trains a fresh backbone from `seed` on masked reconstruction of
/// synthetic images from `pretrain_data_seed`.
pub fn make_independent<T: Scalar>(
    spec: &MlpSpec,
    seed: u64,
    pretrain_data_seed: u64,
    config: &PretrainConfig,
) -> Result<MlpNetwork<T>> {
    if !(0.0..1.0).contains(&config.mask_fraction) {
        return Err(invalid("mask fraction must be in [0, 1)"));
    }
    let s = spec.input_dim();
    let mut rng = stream(seed, &[0x1DE9]);
    let mut net = MlpNetwork::<T>::random(spec, &mut rng);
    let head_spec = MlpSpec::uniform(
        spec.output_dim(),
        &[],
        s,
        Activation::Identity,
        Activation::Identity,
    );
    let mut head = MlpNetwork::<T>::random(&head_spec, &mut rng);
    let images = gen_synthetic_images(config.images, s, pretrain_data_seed)?;
    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut opt_b = OptimizerState::new(&net, adam);
    let mut opt_h = OptimizerState::new(&head, adam);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(BATCH) {
            let target = Matrix::from_fn(chunk.len(), s, |r, c| {
                T::from_f64_lossy(images[chunk[r]][c])
            });
            let mut masked = target.clone();
            for v in masked.as_mut_slice() {
                if rng.random_bool(config.mask_fraction) {
                    *v = T::zero();
                }
            }
            let (emb, bt) = net.forward_batch(&masked)?;
            let (out, ht) = head.forward_batch(&emb)?;
            let (loss, g) = mse_grad(&out, &target);
            if !loss.is_finite() {
                return Err(diverged(epoch, "pretraining loss"));
            }
            let hb = head.backward(&ht, &g)?;
            let bb = net.backward(&bt, &hb.input_grad)?;
            opt_h.step(&mut head, &hb.grads)?;
            opt_b.step(&mut net, &bb.grads)?;
        }
    }
    Ok(net)
}

/// Applies one attack to `base`. Independent models ignore `base` except for
/// its input and output sizes.
pub fn apply_attack<T: Scalar>(base: &MlpNetwork<T>, spec: &AttackSpec) -> Result<MlpNetwork<T>> {
    spec.validate()?;
    let (s, k) = (base.input_dim(), base.output_dim());
    match spec.kind {
        AttackKind::Prune => prune_attack(base, spec.prune_fraction),
        AttackKind::Finetune => {
            let task =
                DownstreamTask::generate(s, spec.classes, spec.samples.max(1), 0.15, spec.seed)?;
            Ok(finetune_attack(
                base,
                &task,
                spec.epochs,
                spec.learning_rate,
                spec.weight_decay,
                spec.seed,
            )?
            .backbone)
        }
        AttackKind::Distill => {
            let student =
                MlpSpec::uniform(s, &spec.hidden, k, Activation::Tanh, Activation::Identity);
            Ok(distill_attack(
                base,
                &student,
                spec.seed,
                spec.epochs,
                spec.samples.max(1),
                spec.learning_rate,
            )?
            .student)
        }
        AttackKind::Independent => {
            let arch = MlpSpec::uniform(s, &spec.hidden, k, Activation::Tanh, Activation::Identity);
            let config = PretrainConfig {
                images: spec.samples.max(1),
                epochs: spec.epochs,
                learning_rate: spec.learning_rate,
                ..PretrainConfig::default()
            };
            make_independent(&arch, spec.seed, derive_seed(spec.seed, &[0xDA7A]), &config)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PopulationKind {
    /// Functional copies of the watermarked backbone.
    Omega,
    /// Independently trained backbones.
    Xi,
}

/// Recipe for model populations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    /// If set, every omega model uses this spec (with its seed replaced).
    pub fixed: Option<AttackSpec>,
    /// Attack kinds mixed uniformly in omega populations.
    pub kinds: Vec<AttackKind>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Prune fractions are drawn uniformly from this range.
    pub prune_range: (f64, f64),
    pub distill_epochs: usize,
    pub distill_samples: usize,
    pub independent_hidden: Vec<usize>,
    pub pretrain: PretrainConfig,
    /// Omega models with a larger relative embedding error are dropped.
    pub max_relative_error: f64,
    pub heldout: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            fixed: None,
            kinds: vec![AttackKind::Finetune, AttackKind::Prune],
            finetune_epochs: 3,
            finetune_lr: 1e-4,
            prune_range: (0.1, 0.4),
            distill_epochs: 20,
            distill_samples: 2000,
            independent_hidden: vec![128],
            pretrain: PretrainConfig::default(),
            max_relative_error: 0.5,
            heldout: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PopulationMember<T> {
    pub index: usize,
    pub spec: AttackSpec,
    pub backbone: MlpNetwork<T>,
}

/// Attack spec for member `index` of an omega population.
pub fn omega_spec(
    config: &PopulationConfig,
    base: &MlpSpec,
    seed: u64,
    index: usize,
) -> AttackSpec {
    let member_seed = seed.wrapping_add(index as u64);
    if let Some(fixed) = &config.fixed {
        return AttackSpec {
            seed: member_seed,
            ..fixed.clone()
        };
    }
    let mut rng = stream(member_seed, &[0x0E6A]);
    let kinds = if config.kinds.is_empty() {
        &[AttackKind::Finetune, AttackKind::Prune][..]
    } else {
        &config.kinds[..]
    };
    match kinds[rng.random_range(0..kinds.len())] {
        AttackKind::Finetune => {
            AttackSpec::finetune(config.finetune_epochs, config.finetune_lr, member_seed)
        }
        AttackKind::Prune => {
            AttackSpec::prune(rng.random_range(config.prune_range.0..=config.prune_range.1))
        }
        AttackKind::Distill => {
            let hidden = base.dims[1..base.dims.len() - 1].to_vec();
            AttackSpec::distill(
                hidden,
                config.distill_epochs,
                config.distill_samples,
                member_seed,
            )
        }
        AttackKind::Independent => {
            AttackSpec::independent(config.independent_hidden.clone(), member_seed)
        }
    }
}

/// `M` functional copies of `bundle.watermarked_f` or `M` independent models.
///
/// Member `i` uses seed `seed + i`. Models are built in parallel; the result
/// does not depend on scheduling.
pub fn sample_model_population<T: Scalar>(
    bundle: &ModelBundle<T>,
    kind: PopulationKind,
    m: usize,
    seed: u64,
    config: &PopulationConfig,
) -> Result<Vec<PopulationMember<T>>> {
    use rayon::prelude::*;
    if m == 0 {
        return Err(invalid("population size must be at least 1"));
    }
    let base = &bundle.watermarked_f;
    let base_spec = base.spec();
    let heldout = gen_synthetic_images(
        config.heldout.max(1),
        base.input_dim(),
        derive_seed(seed, &[0x4E1D]),
    )?;
    let built = (0..m)
        .into_par_iter()
        .map(|i| -> Result<Option<PopulationMember<T>>> {
            let spec = match kind {
                PopulationKind::Omega => omega_spec(config, &base_spec, seed, i),
                PopulationKind::Xi => AttackSpec {
                    epochs: config.pretrain.epochs,
                    samples: config.pretrain.images,
                    learning_rate: config.pretrain.learning_rate,
                    ..AttackSpec::independent(
                        config.independent_hidden.clone(),
                        seed.wrapping_add(i as u64),
                    )
                },
            };
            let backbone = apply_attack(base, &spec)?;
            if kind == PopulationKind::Omega {
                let err = relative_embedding_error(&backbone, base, &heldout)?;
                if err > config.max_relative_error {
                    log::warn!(
                        "omega model {i} ({}) dropped: relative embedding error {err:.3}",
                        spec.kind.as_str()
                    );
                    return Ok(None);
                }
            }
            Ok(Some(PopulationMember {
                index: i,
                spec,
                backbone,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(built.into_iter().flatten().collect())
}
