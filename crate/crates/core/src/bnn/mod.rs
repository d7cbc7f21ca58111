//! Bayesian feed-forward networks built from WHVI, mean-field and
//! deterministic layers.

mod forward;
mod metrics;
mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::softplus_inv;
use crate::error::{Error, Result};
use crate::flows::FlowChain;
use crate::params::{LrSchedule, ParamSet};
use crate::whvi::{setup_dimensions, Covariance, PriorConfig, StructureSpec, WhviPosterior, WhviShape};

pub use forward::{
    elbo, elbo_graph, meanfield_forward_graph, network_forward, network_forward_graph, register_params, ElboGraph,
    ElboParts, LayerNoise, NoiseBundle,
};
pub use metrics::{compute_metrics, expected_calibration_error, predict, Metrics, Predictions};
pub use train::{train, LogRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Whvi,
    WhviFlow,
    Meanfield,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Cos,
    Tanh,
    Identity,
}

fn default_flows() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    #[serde(default)]
    pub structure: StructureSpec,
    #[serde(default)]
    pub covariance: Covariance,
    /// Planar flows on `g`, for `whvi-flow` layers.
    #[serde(default = "default_flows")]
    pub n_flows: usize,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            activation,
            structure: StructureSpec::default(),
            covariance: Covariance::Diagonal,
            n_flows: default_flows(),
        }
    }

    pub fn whvi_shape(&self) -> WhviShape {
        setup_dimensions(self.in_dim, self.out_dim)
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind != LayerKind::Deterministic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    /// `y ~ N(f(x), sigma_n²)` with a learned `log sigma_n²`.
    Gaussian,
    /// Softmax over the output units.
    Categorical,
}

fn one() -> usize {
    1
}
fn sixty_four() -> usize {
    64
}
fn unit() -> f64 {
    1.0
}
fn default_prior_var() -> f64 {
    0.16
}
fn default_noise_var() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub layers: Vec<LayerSpec>,
    pub likelihood: Likelihood,
    /// Prior variance `lambda` of each WHVI `g_i`. Mean-field weights of a
    /// layer with padded input width `D` get `lambda / D`, the variance a
    /// WHVI block induces on each weight.
    #[serde(default = "default_prior_var")]
    pub prior_var: f64,
    #[serde(default = "one")]
    pub mc_train: usize,
    #[serde(default = "sixty_four")]
    pub mc_test: usize,
    #[serde(default = "unit")]
    pub kl_scale: f64,
    /// Initial likelihood noise variance (Gaussian only).
    #[serde(default = "default_noise_var")]
    pub noise_var_init: f64,
}

impl NetworkConfig {
    /// `depth` hidden WHVI layers of `width` units and a mean-field output.
    pub fn regression(din: usize, width: usize, depth: usize, activation: Activation) -> Self {
        let mut layers = Vec::new();
        let mut prev = din;
        for _ in 0..depth {
            layers.push(LayerSpec::new(LayerKind::Whvi, prev, width, activation));
            prev = width;
        }
        layers.push(LayerSpec::new(LayerKind::Meanfield, prev, 1, Activation::Identity));
        Self {
            layers,
            likelihood: Likelihood::Gaussian,
            prior_var: default_prior_var(),
            mc_train: 1,
            mc_test: 64,
            kl_scale: 1.0,
            noise_var_init: default_noise_var(),
        }
    }

    /// All-WHVI classifier with the given structure on every layer.
    pub fn classification(
        din: usize,
        width: usize,
        depth: usize,
        classes: usize,
        structure: StructureSpec,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = din;
        for i in 0..=depth {
            let (out, act) = if i == depth { (classes, Activation::Identity) } else { (width, Activation::Relu) };
            let mut l = LayerSpec::new(LayerKind::Whvi, prev, out, act);
            l.structure = structure;
            layers.push(l);
            prev = out;
        }
        Self {
            layers,
            likelihood: Likelihood::Categorical,
            prior_var: default_prior_var(),
            mc_train: 1,
            mc_test: 64,
            kl_scale: 1.0,
            noise_var_init: default_noise_var(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.layers.is_empty() {
            return bad("network has no layers".into());
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return bad(format!("layer {i} outputs {} but layer {} expects {}", pair[0].out_dim, i + 1, pair[1].in_dim));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return bad(format!("layer {i} has a zero dimension"));
            }
            if l.kind == LayerKind::WhviFlow && l.covariance != Covariance::Diagonal {
                return bad(format!("layer {i}: flow layers use a diagonal base covariance"));
            }
        }
        let last = self.layers.last().expect("nonempty");
        if last.activation != Activation::Identity {
            return bad("the last layer must use the identity activation".into());
        }
        match self.likelihood {
            Likelihood::Gaussian if last.out_dim != 1 => return bad("Gaussian likelihood needs one output".into()),
            Likelihood::Categorical if last.out_dim < 2 => return bad("categorical likelihood needs at least two outputs".into()),
            _ => {}
        }
        if self.mc_train == 0 || self.mc_test == 0 {
            return bad("Monte Carlo sample counts must be at least 1".into());
        }
        if !(self.kl_scale >= 0.0) {
            return bad("kl_scale must be non-negative".into());
        }
        if !(self.noise_var_init > 0.0) {
            return bad("noise_var_init must be positive".into());
        }
        PriorConfig::new(self.prior_var).map(|_| ())
    }

    pub fn prior(&self) -> PriorConfig {
        PriorConfig { lambda: self.prior_var }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    /// Prior variance for the mean-field weights of layer `l`.
    pub fn meanfield_prior_var(&self, l: &LayerSpec) -> f64 {
        self.prior_var / l.in_dim.next_power_of_two() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub gamma: f64,
    pub power: f64,
    pub total_steps: usize,
    /// Steps during which the likelihood noise stays at its initial value.
    pub fixed_noise_steps: usize,
    pub batch_size: usize,
    /// Log a record every this many steps (and at the last step).
    pub eval_interval: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            gamma: 5e-4,
            power: 0.3,
            total_steps: 5000,
            fixed_noise_steps: 500,
            batch_size: 64,
            eval_interval: 100,
        }
    }
}

impl TrainSchedule {
    pub fn lr(&self) -> LrSchedule {
        LrSchedule { lr0: self.lr0, gamma: self.gamma, power: self.power }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0) || !self.gamma.is_finite() || !self.power.is_finite() {
            return Err(Error::Contract("learning-rate schedule must be finite and non-negative".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Contract("batch_size and eval_interval must be at least 1".into()));
        }
        if self.fixed_noise_steps > self.total_steps {
            return Err(Error::Contract("fixed_noise_steps exceeds total_steps".into()));
        }
        Ok(())
    }
}

/// Inputs with real targets or class labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Labels(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major design matrix and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Data {
    pub x: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub y: Targets,
}

impl Data {
    pub fn new(x: Vec<f64>, d: usize, y: Targets) -> Result<Self> {
        if d == 0 || !x.len().is_multiple_of(d) || x.len() / d != y.len() {
            return Err(Error::Dimension(format!(
                "{} values with {d} columns do not match {} targets",
                x.len(),
                y.len()
            )));
        }
        Ok(Self { n: x.len() / d, x, d, y })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut x = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        let y = match &self.y {
            Targets::Real(v) => Targets::Real(idx.iter().map(|&i| v[i]).collect()),
            Targets::Labels(v) => Targets::Labels(idx.iter().map(|&i| v[i]).collect()),
        };
        Self { x, n: idx.len(), d: self.d, y }
    }
}

/// Network configuration together with its named parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamSet,
}

pub(crate) fn prefix(i: usize) -> String {
    format!("layer{i}")
}

pub const LOG_NOISE_VAR: &str = "log_noise_var";

impl Model {
    pub fn init<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        for (i, l) in config.layers.iter().enumerate() {
            let p = prefix(i);
            match l.kind {
                LayerKind::Whvi | LayerKind::WhviFlow => {
                    let shape = l.whvi_shape();
                    let post = WhviPosterior::init(shape, l.structure, l.covariance, config.prior(), rng)?;
                    post.write_params(&mut params, &p);
                    if l.kind == LayerKind::WhviFlow {
                        let chain = FlowChain::init(post.mu.clone(), post.sigma_param.clone(), l.n_flows, rng);
                        chain.write_params(&mut params, &p);
                    }
                }
                LayerKind::Meanfield => {
                    let n = l.in_dim * l.out_dim;
                    let sd = (1.0 / l.in_dim as f64).sqrt();
                    let mu: Vec<f64> = (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
                    params.insert(format!("{p}.w_mu"), mu);
                    params.insert(format!("{p}.w_sigma_param"), vec![softplus_inv(1e-3); n]);
                }
                LayerKind::Deterministic => {
                    let n = l.in_dim * l.out_dim;
                    let sd = (1.0 / l.in_dim as f64).sqrt();
                    params.insert(format!("{p}.w"), (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect());
                }
            }
            let bias = if l.activation == Activation::Cos {
                let u = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
                (0..l.out_dim).map(|_| u.sample(rng)).collect()
            } else {
                vec![0.0; l.out_dim]
            };
            params.insert(format!("{p}.bias"), bias);
        }
        if config.likelihood == Likelihood::Gaussian {
            params.insert(LOG_NOISE_VAR, vec![config.noise_var_init.ln()]);
        }
        Ok(Self { config, params })
    }

    /// Sets every output bias to `value`; used to start regression nets at
    /// the training target mean.
    pub fn set_output_bias(&mut self, value: f64) {
        let last = self.config.layers.len() - 1;
        if let Some(b) = self.params.get_mut(&format!("{}.bias", prefix(last))) {
            b.iter_mut().for_each(|x| *x = value);
        }
    }

    pub fn noise_var(&self) -> Option<f64> {
        self.params.get(LOG_NOISE_VAR).map(|v| v[0].exp())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// WHVI posterior of layer `i`, if it is a WHVI layer.
    pub fn whvi_posterior(&self, i: usize) -> Result<WhviPosterior> {
        let l = &self.config.layers[i];
        if !matches!(l.kind, LayerKind::Whvi | LayerKind::WhviFlow) {
            return Err(Error::Contract(format!("layer {i} is not a WHVI layer")));
        }
        WhviPosterior::read_params(l.whvi_shape(), l.structure, l.covariance, &self.params, &prefix(i))
    }

    /// Closed-form KL of every non-flow stochastic layer.
    pub fn analytic_kl(&self) -> Result<f64> {
        let mut kl = 0.0;
        for (i, l) in self.config.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Whvi => kl += crate::whvi::kl_to_prior(&self.whvi_posterior(i)?, self.config.prior())?,
                LayerKind::Meanfield => {
                    let p = prefix(i);
                    kl += crate::whvi::meanfield_kl(
                        self.params.require(&format!("{p}.w_mu"))?,
                        self.params.require(&format!("{p}.w_sigma_param"))?,
                        self.config.meanfield_prior_var(l),
                    );
                }
                _ => {}
            }
        }
        Ok(kl)
    }
}
