//! Attack algorithms: the importance-weighted feature attack, the momentum
//! sign-step baselines, feature-distortion baselines, and their documented
//! combinations.
//!
//! One run consumes randomness from a single stream seeded by
//! `AttackConfig::seed`, in this fixed order:
//!
//! 1. method prelude — the feature-importance methods draw their Bernoulli
//!    masks (N in sequence); the distance-from-clean methods (NRDM, ablation
//!    L1) draw their uniform ε-ball start (one draw per element, C order);
//! 2. per iteration — the input-diversity draw (coin, then factor/top/left
//!    when the coin passes).
//!
//! Identical config + seed therefore reproduces the adversarial image
//! bit-for-bit.

pub mod losses;
pub mod optimizer;
pub mod transforms;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featimp::{aggregate_gradient, AggregationConfig};
use crate::image::{clip_to_budget, ImageBatch, LabelledExample, PerturbationBudget};
use crate::rng::{uniform_f64, RngSeed, RunRng};
use crate::scalar::Scalar;
use crate::zoo::objective::ScalarLoss;
use crate::zoo::ModelHandle;
use losses::AblationVariant;
use optimizer::OptimizerState;
use transforms::{sample_diversity, translation_invariant_smooth_with, uniform_project_kernel};

/// Base attack method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FIA")]
    Fia,
    #[serde(rename = "MIM")]
    Mim,
    #[serde(rename = "DIM")]
    Dim,
    #[serde(rename = "TIM")]
    Tim,
    #[serde(rename = "PIM")]
    Pim,
    #[serde(rename = "NRDM")]
    Nrdm,
    #[serde(rename = "FDA")]
    Fda,
}

/// Optional combinations layered onto a base method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CombinationFlags {
    #[serde(default)]
    pub diverse_inputs: bool,
    #[serde(default)]
    pub translation_invariant: bool,
    #[serde(default)]
    pub patchwise: bool,
}

/// Hyperparameters of the baseline methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BaselineParams<F: Scalar> {
    #[serde(default = "default_dim_prob")]
    pub dim_transform_prob: f64,
    /// Lower bound of the random resize factor drawn by input diversity.
    #[serde(default = "default_dim_min_resize")]
    pub dim_min_resize: f64,
    #[serde(default = "default_tim_kernel")]
    pub tim_kernel_size: usize,
    #[serde(default)]
    pub tim_kernel_family: transforms::KernelFamily,
    #[serde(default = "default_pim_beta")]
    pub pim_beta: F,
    #[serde(default = "default_pim_gamma")]
    pub pim_gamma: F,
    #[serde(default = "default_pim_kernel")]
    pub pim_kernel: usize,
    #[serde(default = "default_true")]
    pub pim_use_momentum: bool,
}

fn default_dim_prob() -> f64 {
    0.7
}
fn default_dim_min_resize() -> f64 {
    transforms::DIVERSITY_MIN_FACTOR
}
fn default_tim_kernel() -> usize {
    15
}
fn default_pim_beta<F: Scalar>() -> F {
    F::from_f64_lossy(10.0)
}
fn default_pim_gamma<F: Scalar>() -> F {
    F::from_f64_lossy(16.0)
}
fn default_pim_kernel() -> usize {
    3
}
fn default_true() -> bool {
    true
}

impl<F: Scalar> Default for BaselineParams<F> {
    fn default() -> Self {
        Self {
            dim_transform_prob: default_dim_prob(),
            dim_min_resize: default_dim_min_resize(),
            tim_kernel_size: default_tim_kernel(),
            tim_kernel_family: transforms::KernelFamily::Gaussian,
            pim_beta: default_pim_beta(),
            pim_gamma: default_pim_gamma(),
            pim_kernel: default_pim_kernel(),
            pim_use_momentum: true,
        }
    }
}

/// Full specification of one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct AttackConfig<F: Scalar> {
    pub method: Method,
    #[serde(default)]
    pub flags: CombinationFlags,
    #[serde(default)]
    pub budget: PerturbationBudget<F>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    /// Pixel-unit step; defaults to `epsilon / iterations`.
    #[serde(default)]
    pub step_size: Option<F>,
    #[serde(default = "default_momentum")]
    pub momentum: F,
    /// Feature tap; defaults to the source model's mid-list tap.
    #[serde(default)]
    pub tap: Option<String>,
    /// Aggregation settings for the feature-importance methods; the tap
    /// field is inherited from the resolved attack tap.
    #[serde(default)]
    pub aggregation: Option<AggregationConfig>,
    #[serde(default)]
    pub baseline: BaselineParams<F>,
    pub seed: RngSeed,
}

fn default_iterations() -> usize {
    10
}
fn default_momentum<F: Scalar>() -> F {
    F::one()
}

/// Output of one attack run on one image.
#[derive(Debug, Clone)]
pub struct AttackResult<F: Scalar> {
    pub adversarial: ImageBatch<F>,
    /// Final adversarial image misclassified by the source model.
    pub success_on_source: bool,
    /// The minimized loss value at each gradient evaluation point.
    pub loss_trace: Vec<F>,
    pub config_echo: AttackConfig<F>,
    /// Set when the attack could not run (degenerate importance map);
    /// the adversarial image is then the clean image.
    pub failure: Option<String>,
}

impl<F: Scalar> AttackConfig<F> {
    /// Minimal config for a method with §-default budget and iterations.
    pub fn new(method: Method, seed: RngSeed) -> Self {
        Self {
            method,
            flags: CombinationFlags::default(),
            budget: PerturbationBudget::default(),
            iterations: default_iterations(),
            step_size: None,
            momentum: F::one(),
            tap: None,
            aggregation: None,
            baseline: BaselineParams::default(),
            seed,
        }
    }

    /// Combination flags with the method's built-in operations folded in.
    pub fn effective_flags(&self) -> CombinationFlags {
        let mut f = self.flags;
        match self.method {
            Method::Dim => f.diverse_inputs = true,
            Method::Tim => f.translation_invariant = true,
            Method::Pim => f.patchwise = true,
            _ => {}
        }
        f
    }

    /// Whether the optimized objective is classification loss (the momentum
    /// family) or a feature objective.
    fn is_logit_method(&self) -> bool {
        matches!(
            self.method,
            Method::Mim | Method::Dim | Method::Tim | Method::Pim
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget.epsilon < F::zero() {
            return Err(Error::Parameter("epsilon must be >= 0".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be >= 1".into()));
        }
        if self.momentum < F::zero() {
            return Err(Error::Parameter("momentum must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.baseline.dim_transform_prob) {
            return Err(Error::Parameter(
                "dim_transform_prob must be in [0, 1]".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.baseline.dim_min_resize) {
            return Err(Error::Parameter(
                "dim_min_resize must be in (0, 1]".into(),
            ));
        }
        if self.baseline.tim_kernel_size % 2 == 0 || self.baseline.pim_kernel % 2 == 0 {
            return Err(Error::Parameter("kernel sizes must be odd".into()));
        }
        // A flag that repeats the method's built-in operation, or any flag on
        // the plain feature-distortion baselines, is not a defined combination.
        let dup = (self.method == Method::Dim && self.flags.diverse_inputs)
            || (self.method == Method::Tim && self.flags.translation_invariant)
            || (self.method == Method::Pim && self.flags.patchwise);
        if dup {
            return Err(Error::Config(format!(
                "flag duplicates the built-in operation of {}",
                self.name()
            )));
        }
        if matches!(self.method, Method::Nrdm | Method::Fda)
            && (self.flags.diverse_inputs
                || self.flags.translation_invariant
                || self.flags.patchwise)
        {
            return Err(Error::Config(
                "NRDM/FDA do not define combination flags".into(),
            ));
        }
        if let Some(agg) = &self.aggregation {
            AggregationConfig {
                tap: "-".into(),
                ..agg.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    /// Canonical attack name, e.g. `MIM`, `PIDIM`, `FIA+PITIDIM`.
    pub fn name(&self) -> String {
        let f = self.effective_flags();
        let combo = |f: CombinationFlags| -> String {
            match (f.patchwise, f.translation_invariant, f.diverse_inputs) {
                (false, false, false) => "MIM",
                (false, false, true) => "DIM",
                (false, true, false) => "TIM",
                (true, false, false) => "PIM",
                (true, false, true) => "PIDIM",
                (false, true, true) => "TIDIM",
                (true, true, true) => "PITIDIM",
                (true, true, false) => "PITIM",
            }
            .to_string()
        };
        match self.method {
            Method::Fia => {
                if !f.patchwise && !f.translation_invariant && !f.diverse_inputs {
                    "FIA".to_string()
                } else {
                    format!("FIA+{}", combo(f))
                }
            }
            Method::Nrdm => "NRDM".to_string(),
            Method::Fda => "FDA".to_string(),
            _ => combo(f),
        }
    }

    /// Effective step size `α`.
    pub fn alpha(&self) -> F {
        self.step_size
            .unwrap_or(self.budget.epsilon / F::from_f64_lossy(self.iterations as f64))
    }

    /// Aggregation config with the tap resolved against the source model.
    pub fn resolved_aggregation(&self, tap: &str) -> AggregationConfig {
        let mut agg = self.aggregation.clone().unwrap_or(AggregationConfig {
            drop_prob: 0.3,
            ensemble_number: 30,
            tap: String::new(),
            per_element_mask: false,
        });
        agg.tap = tap.to_string();
        agg
    }
}

/// Experiment context a preset is tuned for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRegime {
    /// Attacking normally trained targets.
    Normal,
    /// Attacking adversarially trained (defense) targets.
    Defense,
    /// Crafting on an ensemble source (defense targets).
    EnsembleSource,
}

/// Published hyperparameter presets by attack name:
/// iterations 10, ε 16, α ε/T, momentum 1 everywhere; DIM probability 0.7,
/// TIM kernel 15; amplification/projection per regime; drop probability 0.3
/// against normal targets and 0.1 against defense targets, ensemble 30.
pub fn preset<F: Scalar>(
    name: &str,
    regime: TargetRegime,
    seed: RngSeed,
) -> Result<AttackConfig<F>> {
    let defense = !matches!(regime, TargetRegime::Normal);
    let mut cfg = AttackConfig::new(Method::Mim, seed);

    let set_pim = |cfg: &mut AttackConfig<F>, beta: f64, gamma: f64| {
        cfg.baseline.pim_beta = F::from_f64_lossy(beta);
        cfg.baseline.pim_gamma = F::from_f64_lossy(gamma);
        cfg.baseline.pim_kernel = if defense { 7 } else { 3 };
        cfg.baseline.pim_use_momentum = !defense;
        if matches!(regime, TargetRegime::EnsembleSource) {
            cfg.baseline.pim_beta = F::from_f64_lossy(5.0);
            cfg.baseline.pim_gamma = F::from_f64_lossy(8.0);
        }
    };
    let fia_agg = |cfg: &mut AttackConfig<F>| {
        cfg.method = Method::Fia;
        cfg.aggregation = Some(AggregationConfig {
            drop_prob: if defense { 0.1 } else { 0.3 },
            ensemble_number: 30,
            tap: String::new(),
            per_element_mask: false,
        });
    };

    match name {
        "MIM" => {}
        "DIM" => cfg.method = Method::Dim,
        "TIM" => cfg.method = Method::Tim,
        "PIM" => {
            cfg.method = Method::Pim;
            set_pim(&mut cfg, 10.0, 16.0);
        }
        "PIDIM" => {
            cfg.method = Method::Pim;
            cfg.flags.diverse_inputs = true;
            set_pim(&mut cfg, 2.5, 2.0);
        }
        "TIDIM" => {
            cfg.method = Method::Tim;
            cfg.flags.diverse_inputs = true;
        }
        "PITIDIM" => {
            cfg.method = Method::Pim;
            cfg.flags.diverse_inputs = true;
            cfg.flags.translation_invariant = true;
            set_pim(&mut cfg, 10.0, 16.0);
        }
        "NRDM" => cfg.method = Method::Nrdm,
        "FDA" => cfg.method = Method::Fda,
        "FIA" => fia_agg(&mut cfg),
        "FIA+PIDIM" => {
            fia_agg(&mut cfg);
            cfg.flags.patchwise = true;
            cfg.flags.diverse_inputs = true;
            set_pim(&mut cfg, 2.5, 2.0);
        }
        "FIA+PITIDIM" => {
            fia_agg(&mut cfg);
            cfg.flags.patchwise = true;
            cfg.flags.translation_invariant = true;
            cfg.flags.diverse_inputs = true;
            set_pim(&mut cfg, 2.5, 2.0);
        }
        other => {
            return Err(Error::Lookup(format!("unknown attack preset `{other}`")));
        }
    }
    Ok(cfg)
}

/// Names of the presets evaluated against normally trained targets.
pub const NORMAL_PRESETS: [&str; 8] = [
    "MIM", "DIM", "PIM", "PIDIM", "NRDM", "FDA", "FIA", "FIA+PIDIM",
];

/// Names of the presets evaluated against defense targets.
pub const DEFENSE_PRESETS: [&str; 8] = [
    "MIM", "DIM", "TIM", "PIM", "TIDIM", "PITIDIM", "FIA", "FIA+PITIDIM",
];

fn feature_map_3<F: Scalar>(values: ndarray::Array4<F>) -> Array3<F> {
    let (_, c, h, w) = values.dim();
    values
        .into_shape_with_order((c, h, w))
        .expect("batch-1 feature map")
}

/// Uniform ε-ball start used by the distance-from-clean objectives, whose
/// gradient vanishes exactly at the clean image. One draw per element in C
/// order, then the usual projection.
fn random_ball_start<F: Scalar>(
    clean: &ImageBatch<F>,
    budget: PerturbationBudget<F>,
    rng: &mut RunRng,
) -> Result<ImageBatch<F>> {
    let eps = budget.epsilon.to_f64_lossy();
    let mut data = clean.data().clone();
    for v in data.iter_mut() {
        *v += F::from_f64_lossy(uniform_f64(rng, -eps, eps));
    }
    clip_to_budget(
        &ImageBatch::from_raw(data, clean.value_range()),
        clean,
        budget,
    )
}

/// Runs the configured attack on one labelled example.
pub fn run_attack<F: Scalar>(
    source: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AttackConfig<F>,
) -> Result<AttackResult<F>> {
    cfg.validate()?;
    if example.label >= source.num_classes() {
        return Err(Error::Contract(format!(
            "label {} out of range for {} classes",
            example.label,
            source.num_classes()
        )));
    }
    let tap = cfg
        .tap
        .clone()
        .unwrap_or_else(|| source.default_tap().to_string());
    let mut rng = cfg.seed.rng();

    let mut start = example.image.clone();
    let loss: ScalarLoss<F> = if cfg.is_logit_method() {
        ScalarLoss::NegCrossEntropy {
            label: example.label,
        }
    } else {
        match cfg.method {
            Method::Fia => {
                let agg_cfg = cfg.resolved_aggregation(&tap);
                match aggregate_gradient(source, example, &agg_cfg, &mut rng) {
                    Ok(agg) => losses::fia_scalar_loss(&tap, agg.values),
                    Err(Error::DegenerateGradient) => {
                        return failed_result(source, example, cfg, "degenerate aggregate gradient")
                    }
                    Err(e) => return Err(e),
                }
            }
            Method::Nrdm => {
                let f_clean = feature_map_3(source.features_at(&example.image, &tap)?.values);
                start = random_ball_start(&example.image, cfg.budget, &mut rng)?;
                ScalarLoss::NegFeatureL2 {
                    tap: tap.clone(),
                    reference: f_clean,
                }
            }
            Method::Fda => {
                let f_clean = feature_map_3(source.features_at(&example.image, &tap)?.values);
                let (below, above) = losses::fda_supports(&f_clean);
                ScalarLoss::NegSupportContrast {
                    tap: tap.clone(),
                    below,
                    above,
                }
            }
            _ => unreachable!("logit methods handled above"),
        }
    };

    run_loop(source, example, cfg, start, &loss, &mut rng)
}

/// Runs one ablation variant with the mechanics (budget, iterations, tap,
/// optimizer, seed) taken from a feature-importance config.
pub fn run_ablation_variant<F: Scalar>(
    source: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AttackConfig<F>,
    variant: AblationVariant,
) -> Result<AttackResult<F>> {
    if cfg.method != Method::Fia {
        return Err(Error::Config(
            "ablation variants share the feature-importance config".into(),
        ));
    }
    cfg.validate()?;
    let tap = cfg
        .tap
        .clone()
        .unwrap_or_else(|| source.default_tap().to_string());
    let mut rng = cfg.seed.rng();
    let f_clean = feature_map_3(source.features_at(&example.image, &tap)?.values);

    let mut start = example.image.clone();
    let weights = match variant {
        AblationVariant::L1 => {
            start = random_ball_start(&example.image, cfg.budget, &mut rng)?;
            None
        }
        AblationVariant::L2 => {
            let raw = crate::featimp::raw_gradient(source, example, &tap)?;
            let g = feature_map_3(raw.values);
            let norm = g.iter().map(|&v| v * v).sum::<F>().sqrt();
            if norm == F::zero() {
                return failed_result(source, example, cfg, "degenerate raw gradient");
            }
            Some(g.mapv(|v| v / norm))
        }
        AblationVariant::L3 => {
            let agg_cfg = cfg.resolved_aggregation(&tap);
            match aggregate_gradient(source, example, &agg_cfg, &mut rng) {
                Ok(agg) => Some(agg.values),
                Err(Error::DegenerateGradient) => {
                    return failed_result(source, example, cfg, "degenerate aggregate gradient")
                }
                Err(e) => return Err(e),
            }
        }
    };
    let loss = losses::ablation_scalar_loss(variant, &tap, weights, &f_clean)?;
    run_loop(source, example, cfg, start, &loss, &mut rng)
}

/// Feature-importance attack entry point (method must be FIA).
pub fn run_fia<F: Scalar>(
    source: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AttackConfig<F>,
) -> Result<AttackResult<F>> {
    if cfg.method != Method::Fia {
        return Err(Error::Config("run_fia requires method FIA".into()));
    }
    run_attack(source, example, cfg)
}

/// Momentum cross-entropy attack entry point (method must be MIM).
pub fn run_mim<F: Scalar>(
    source: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AttackConfig<F>,
) -> Result<AttackResult<F>> {
    if cfg.method != Method::Mim {
        return Err(Error::Config("run_mim requires method MIM".into()));
    }
    run_attack(source, example, cfg)
}

fn failed_result<F: Scalar>(
    source: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AttackConfig<F>,
    reason: &str,
) -> Result<AttackResult<F>> {
    let out = source.forward(&example.image)?;
    Ok(AttackResult {
        adversarial: example.image.clone(),
        success_on_source: out.predicted_labels[0] != example.label,
        loss_trace: Vec::new(),
        config_echo: cfg.clone(),
        failure: Some(reason.to_string()),
    })
}

fn run_loop<F: Scalar>(
    source: &ModelHandle<F>,
    example: &LabelledExample<F>,
    cfg: &AttackConfig<F>,
    start: ImageBatch<F>,
    loss: &ScalarLoss<F>,
    rng: &mut RunRng,
) -> Result<AttackResult<F>> {
    let clean = &example.image;
    let flags = cfg.effective_flags();
    let alpha = cfg.alpha();
    let (_, h, w) = clean.image_shape();
    let project_kernel = if flags.patchwise {
        Some(uniform_project_kernel::<F>(cfg.baseline.pim_kernel)?)
    } else {
        None
    };

    let mut state = OptimizerState::new(start);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let draw = if flags.diverse_inputs {
            Some(sample_diversity(
                (h, w),
                cfg.baseline.dim_transform_prob,
                cfg.baseline.dim_min_resize,
                rng,
            )?)
        } else {
            None
        };
        let probe = match &draw {
            Some(d) => d.apply(&state.x_adv),
            None => state.x_adv.clone(),
        };
        let (value, mut grad) = source.grad_scalar_wrt_input(&probe, loss)?;
        if let Some(d) = &draw {
            grad = d.vjp(&grad);
        }
        if flags.translation_invariant {
            grad = translation_invariant_smooth_with(
                &grad,
                cfg.baseline.tim_kernel_family,
                cfg.baseline.tim_kernel_size,
            )?;
        }
        trace.push(value);

        let stepped = if let Some(kernel) = &project_kernel {
            optimizer::patchwise_step(
                &state,
                &grad,
                alpha,
                cfg.momentum,
                cfg.baseline.pim_beta,
                cfg.baseline.pim_gamma,
                kernel,
                cfg.baseline.pim_use_momentum,
                clean,
                cfg.budget,
            )
        } else {
            optimizer::momentum_step(&state, &grad, alpha, cfg.momentum, clean, cfg.budget)
        };
        match stepped {
            Ok(next) => state = next,
            Err(Error::ZeroGradient) => break,
            Err(e) => return Err(e),
        }
    }

    let out = source.forward(&state.x_adv)?;
    Ok(AttackResult {
        adversarial: state.x_adv,
        success_on_source: out.predicted_labels[0] != example.label,
        loss_trace: trace,
        config_echo: cfg.clone(),
        failure: None,
    })
}
