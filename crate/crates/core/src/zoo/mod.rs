//! Differentiable classifiers with named feature taps.
//!
//! A [`ModelHandle`] is either a single trained [`net::Network`] or a
//! logit-weighted ensemble of handles. Handles are immutable after load;
//! forward and gradient calls are pure, so concurrent read-only use is safe.

pub mod arch;
pub mod checkpoint;
pub mod dataset;
pub mod layers;
pub mod net;
pub mod objective;
pub mod train;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::scalar::Scalar;
use net::Network;
use objective::ScalarLoss;

/// How a checkpoint was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Normal,
    Adversarial,
}

impl std::fmt::Display for TrainingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainingMode::Normal => write!(f, "normal"),
            TrainingMode::Adversarial => write!(f, "adversarial"),
        }
    }
}

/// Batched feature maps from one tap: `values` is `(batch, c, h, w)`; each
/// image contributes one rank-3 map.
#[derive(Debug, Clone)]
pub struct FeatureMap<F: Scalar> {
    pub values: Array4<F>,
    pub tap_name: String,
}

/// Gradient of a scalar (the true-class logit) w.r.t. a tap's feature map;
/// same layout as the feature map itself.
pub type GradientMap<F> = FeatureMap<F>;

/// Classifier outputs for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutputs<F: Scalar> {
    /// `(batch, num_classes)` pre-softmax scores.
    pub logits: Array2<F>,
    /// Row-wise softmax of the logits.
    pub probabilities: Array2<F>,
    /// Row-wise argmax (first maximum wins).
    pub predicted_labels: Vec<usize>,
}

impl<F: Scalar> ModelOutputs<F> {
    pub fn from_logits(logits: Array2<F>) -> Self {
        let (n, k) = logits.dim();
        let mut probabilities = Array2::zeros((n, k));
        let mut predicted_labels = Vec::with_capacity(n);
        for i in 0..n {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probabilities[[i, j]] = e;
                sum += e;
            }
            for j in 0..k {
                probabilities[[i, j]] /= sum;
            }
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            predicted_labels.push(best);
        }
        Self {
            logits,
            probabilities,
            predicted_labels,
        }
    }
}

#[derive(Debug, Clone)]
enum ModelKind<F: Scalar> {
    Single(Network<F>),
    Ensemble {
        members: Vec<ModelHandle<F>>,
        weights: Vec<F>,
    },
}

/// A differentiable classifier with named feature taps.
#[derive(Debug, Clone)]
pub struct ModelHandle<F: Scalar> {
    arch_id: String,
    params_id: String,
    num_classes: usize,
    taps: Vec<String>,
    training_mode: TrainingMode,
    checkpoint_hash: Option<String>,
    clean_accuracy: Option<f64>,
    kind: ModelKind<F>,
}

impl<F: Scalar> ModelHandle<F> {
    /// Wraps a network in a handle. `params_id` identifies the checkpoint.
    pub fn from_network(
        arch_id: impl Into<String>,
        params_id: impl Into<String>,
        training_mode: TrainingMode,
        net: Network<F>,
    ) -> Self {
        let taps = net.tap_names();
        let num_classes = net.num_classes();
        Self {
            arch_id: arch_id.into(),
            params_id: params_id.into(),
            num_classes,
            taps,
            training_mode,
            checkpoint_hash: None,
            clean_accuracy: None,
            kind: ModelKind::Single(net),
        }
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn params_id(&self) -> &str {
        &self.params_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn taps(&self) -> &[String] {
        &self.taps
    }

    pub fn training_mode(&self) -> TrainingMode {
        self.training_mode
    }

    pub fn checkpoint_hash(&self) -> Option<&str> {
        self.checkpoint_hash.as_deref()
    }

    pub fn clean_accuracy(&self) -> Option<f64> {
        self.clean_accuracy
    }

    pub(crate) fn set_checkpoint_hash(&mut self, hash: String) {
        self.checkpoint_hash = Some(hash);
    }

    pub(crate) fn set_clean_accuracy(&mut self, acc: f64) {
        self.clean_accuracy = Some(acc);
    }

    /// The mid-list tap, the default layer a feature attack targets.
    pub fn default_tap(&self) -> &str {
        &self.taps[(self.taps.len() - 1) / 2]
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        match &self.kind {
            ModelKind::Single(net) => net.input_shape(),
            ModelKind::Ensemble { members, .. } => members[0].input_shape(),
        }
    }

    /// Access to the underlying network for single-model handles.
    pub fn network(&self) -> Option<&Network<F>> {
        match &self.kind {
            ModelKind::Single(net) => Some(net),
            ModelKind::Ensemble { .. } => None,
        }
    }

    pub fn is_ensemble(&self) -> bool {
        matches!(self.kind, ModelKind::Ensemble { .. })
    }

    /// Casts parameters to another scalar type (checkpoints store f32; tests
    /// widen to f64 for finite differences).
    pub fn cast<G: Scalar>(&self) -> ModelHandle<G> {
        let kind = match &self.kind {
            ModelKind::Single(net) => ModelKind::Single(net.cast()),
            ModelKind::Ensemble { members, weights } => ModelKind::Ensemble {
                members: members.iter().map(|m| m.cast()).collect(),
                weights: weights
                    .iter()
                    .map(|&w| G::from_f64_lossy(w.to_f64_lossy()))
                    .collect(),
            },
        };
        ModelHandle {
            arch_id: self.arch_id.clone(),
            params_id: self.params_id.clone(),
            num_classes: self.num_classes,
            taps: self.taps.clone(),
            training_mode: self.training_mode,
            checkpoint_hash: self.checkpoint_hash.clone(),
            clean_accuracy: self.clean_accuracy,
            kind,
        }
    }

    fn check_input(&self, images: &ImageBatch<F>) -> Result<()> {
        let expect = self.input_shape();
        if images.image_shape() != expect {
            return Err(Error::shape(
                "model input",
                &[expect.0, expect.1, expect.2],
                &[
                    images.image_shape().0,
                    images.image_shape().1,
                    images.image_shape().2,
                ],
            ));
        }
        Ok(())
    }

    /// Deterministic forward pass: logits, probabilities, argmax labels.
    pub fn forward(&self, images: &ImageBatch<F>) -> Result<ModelOutputs<F>> {
        self.check_input(images)?;
        let logits = self.logits_raw(images.data())?;
        Ok(ModelOutputs::from_logits(logits))
    }

    fn logits_raw(&self, x: &Array4<F>) -> Result<Array2<F>> {
        match &self.kind {
            ModelKind::Single(net) => {
                let acts = net.forward_trace(x);
                Ok(net.logits(&acts))
            }
            ModelKind::Ensemble { members, weights } => {
                let mut fused: Option<Array2<F>> = None;
                for (member, &w) in members.iter().zip(weights) {
                    let l = member.logits_raw(x)?.mapv(|v| v * w);
                    fused = Some(match fused {
                        None => l,
                        Some(acc) => acc + l,
                    });
                }
                Ok(fused.expect("nonempty ensemble"))
            }
        }
    }

    fn resolve_member_tap<'a>(&self, tap: &'a str) -> Result<(usize, &'a str)> {
        let Some(rest) = tap.strip_prefix('m') else {
            return Err(self.unknown_tap(tap));
        };
        let Some((idx, member_tap)) = rest.split_once('/') else {
            return Err(self.unknown_tap(tap));
        };
        let idx: usize = idx.parse().map_err(|_| self.unknown_tap(tap))?;
        Ok((idx, member_tap))
    }

    fn unknown_tap(&self, tap: &str) -> Error {
        Error::UnknownTap {
            tap: tap.to_string(),
            model: self.params_id.clone(),
        }
    }

    /// Feature maps at a named tap for every image in the batch.
    pub fn features_at(&self, images: &ImageBatch<F>, tap: &str) -> Result<FeatureMap<F>> {
        self.check_input(images)?;
        match &self.kind {
            ModelKind::Single(net) => {
                let act_index = net
                    .tap_act_index(tap)
                    .ok_or_else(|| self.unknown_tap(tap))?;
                let acts = net.forward_to(images.data(), act_index);
                Ok(FeatureMap {
                    values: acts.into_iter().next_back().unwrap(),
                    tap_name: tap.to_string(),
                })
            }
            ModelKind::Ensemble { members, .. } => {
                let (idx, member_tap) = self.resolve_member_tap(tap)?;
                if idx >= members.len() {
                    return Err(self.unknown_tap(tap));
                }
                let mut fm = members[idx].features_at(images, member_tap)?;
                fm.tap_name = tap.to_string();
                Ok(fm)
            }
        }
    }

    /// Declared `(c, h, w)` shape of a tap's feature map.
    pub fn tap_shape(&self, tap: &str) -> Result<(usize, usize, usize)> {
        match &self.kind {
            ModelKind::Single(net) => {
                net.tap_shape(tap).ok_or_else(|| self.unknown_tap(tap))
            }
            ModelKind::Ensemble { members, .. } => {
                let (idx, member_tap) = self.resolve_member_tap(tap)?;
                if idx >= members.len() {
                    return Err(self.unknown_tap(tap));
                }
                members[idx].tap_shape(member_tap)
            }
        }
    }

    /// Gradient of the true-class logit w.r.t. the tap's feature map
    /// (same shape as the feature map).
    pub fn grad_logit_wrt_features(
        &self,
        images: &ImageBatch<F>,
        tap: &str,
        label: usize,
    ) -> Result<GradientMap<F>> {
        self.check_input(images)?;
        if label >= self.num_classes {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                self.num_classes
            )));
        }
        match &self.kind {
            ModelKind::Single(net) => {
                let act_index = net
                    .tap_act_index(tap)
                    .ok_or_else(|| self.unknown_tap(tap))?;
                let acts = net.forward_trace(images.data());
                let (n, k) = (images.batch_len(), self.num_classes);
                let mut dlogits = Array2::zeros((n, k));
                for i in 0..n {
                    dlogits[[i, label]] = F::one();
                }
                let seed = net.seed_from_logit_grad(&dlogits);
                let grad = net.backward(&acts, acts.len() - 1, seed, act_index, None);
                Ok(GradientMap {
                    values: grad,
                    tap_name: tap.to_string(),
                })
            }
            ModelKind::Ensemble { members, weights } => {
                let (idx, member_tap) = self.resolve_member_tap(tap)?;
                if idx >= members.len() {
                    return Err(self.unknown_tap(tap));
                }
                // Fused logit = Σ w_i · logit_i, so the member gradient scales by w_i.
                let mut gm = members[idx].grad_logit_wrt_features(images, member_tap, label)?;
                let w = weights[idx];
                gm.values.mapv_inplace(|v| v * w);
                gm.tap_name = tap.to_string();
                Ok(gm)
            }
        }
    }

    /// Value of a registered scalar loss and its gradient w.r.t. input pixels.
    pub fn grad_scalar_wrt_input(
        &self,
        images: &ImageBatch<F>,
        loss: &ScalarLoss<F>,
    ) -> Result<(F, Array4<F>)> {
        self.check_input(images)?;
        match &self.kind {
            ModelKind::Single(net) => objective::eval_on_network(net, images.data(), loss),
            ModelKind::Ensemble { members, weights } => match loss {
                ScalarLoss::NegCrossEntropy { label } => {
                    // Cross-entropy on the fused logits: each member receives
                    // the fused logit gradient scaled by its weight.
                    let logits = self.logits_raw(images.data())?;
                    if *label >= logits.dim().1 {
                        return Err(Error::Contract(format!(
                            "label {label} out of range for {} classes",
                            logits.dim().1
                        )));
                    }
                    let (j, dj) = objective::cross_entropy_row(&logits, *label);
                    let mut grad: Option<Array4<F>> = None;
                    for (member, &w) in members.iter().zip(weights) {
                        let net = member
                            .network()
                            .ok_or_else(|| Error::Capability("nested ensembles".into()))?;
                        let acts = net.forward_trace(images.data());
                        let seed = net.seed_from_logit_grad(&dj.mapv(|v| -(v * w)));
                        let g = net.backward(&acts, acts.len() - 1, seed, 0, None);
                        grad = Some(match grad {
                            None => g,
                            Some(acc) => acc + g,
                        });
                    }
                    Ok((-j, grad.expect("nonempty ensemble")))
                }
                ScalarLoss::PixelSum | ScalarLoss::Zero => {
                    objective::eval_on_network(
                        members[0].network().ok_or_else(|| {
                            Error::Capability("nested ensembles".into())
                        })?,
                        images.data(),
                        loss,
                    )
                }
                _ => {
                    let tap = loss.tap().expect("tap loss");
                    let (idx, member_tap) = self.resolve_member_tap(tap)?;
                    if idx >= members.len() {
                        return Err(self.unknown_tap(tap));
                    }
                    members[idx]
                        .grad_scalar_wrt_input(images, &loss.with_tap(member_tap))
                }
            },
        }
    }

    /// Logits produced when the tap's activation is replaced by `features`.
    /// Feature-space probe used by gradient checks; single models only.
    pub fn forward_from_features(&self, tap: &str, features: &Array4<F>) -> Result<Array2<F>> {
        match &self.kind {
            ModelKind::Single(net) => {
                let act_index = net
                    .tap_act_index(tap)
                    .ok_or_else(|| self.unknown_tap(tap))?;
                Ok(net.forward_from(act_index, features))
            }
            ModelKind::Ensemble { .. } => Err(Error::Capability(
                "feature replacement is not defined for ensembles".into(),
            )),
        }
    }
}

/// Builds a composite handle whose logits are the weighted sum of member
/// logits. Member taps are exposed namespaced as `m{i}/{tap}`.
pub fn ensemble_handle<F: Scalar>(
    members: Vec<ModelHandle<F>>,
    weights: Vec<F>,
) -> Result<ModelHandle<F>> {
    if members.is_empty() {
        return Err(Error::Contract("ensemble needs at least one member".into()));
    }
    if members.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} members vs {} weights",
            members.len(),
            weights.len()
        )));
    }
    let num_classes = members[0].num_classes();
    let input_shape = members[0].input_shape();
    for m in &members {
        if m.num_classes() != num_classes {
            return Err(Error::Contract(format!(
                "class-count mismatch: {} has {}, expected {num_classes}",
                m.params_id(),
                m.num_classes()
            )));
        }
        if m.input_shape() != input_shape {
            return Err(Error::Contract(format!(
                "input-shape mismatch on {}",
                m.params_id()
            )));
        }
        if m.is_ensemble() {
            return Err(Error::Capability("nested ensembles".into()));
        }
    }
    let sum: F = weights.iter().copied().sum();
    if (sum - F::one()).abs() > F::from_f64_lossy(1e-6) {
        return Err(Error::Contract(format!(
            "ensemble weights sum to {sum}, expected 1"
        )));
    }
    let taps = members
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.taps().iter().map(move |t| format!("m{i}/{t}")))
        .collect();
    let params_id = format!(
        "ens({})",
        members
            .iter()
            .map(|m| m.params_id())
            .collect::<Vec<_>>()
            .join("+")
    );
    Ok(ModelHandle {
        arch_id: "ensemble".into(),
        params_id,
        num_classes,
        taps,
        training_mode: members[0].training_mode(),
        checkpoint_hash: None,
        clean_accuracy: None,
        kind: ModelKind::Ensemble { members, weights },
    })
}
