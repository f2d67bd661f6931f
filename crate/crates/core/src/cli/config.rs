//! JSON experiment configuration. Every section is optional and falls back to
//! the defaults below; unknown keys are errors.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::critic::DivMode;
use crate::distributions::{
    make_paper_mixture, GaussBernoulliRbm, GaussianMixture, Model, ScoreField,
};
use crate::gof::GofConfig;
use crate::ntk::LazyConfig;
use crate::rng::child;
use crate::training::{LambdaSchedule, OptimizerKind, TrainConfig};

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub distribution: DistributionSpec,
    pub net: NetSection,
    pub train: TrainSection,
    pub schedule: LambdaSchedule,
    pub gof: GofConfig,
    pub power: PowerSection,
    pub ksd: KsdSection,
    pub ntk: LazyConfig,
    pub split: SplitSection,
    /// Critic used by `gof` instead of training one.
    pub checkpoint: Option<String>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            distribution: DistributionSpec::default(),
            net: NetSection::default(),
            train: TrainSection::default(),
            schedule: LambdaSchedule::Staged {
                lambda_init: 1.0,
                lambda_term: 5e-2,
                beta: 0.9,
            },
            gof: GofConfig::default(),
            power: PowerSection::default(),
            ksd: KsdSection::default(),
            ntk: LazyConfig::default(),
            split: SplitSection::default(),
            checkpoint: None,
            out_dir: "runs".into(),
        }
    }
}

/// Mixture parameters with full covariance matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl MixtureSpec {
    fn build(&self) -> Result<GaussianMixture, CliError> {
        let covs = self
            .covariances
            .iter()
            .map(|c| c.iter().flatten().copied().collect())
            .collect();
        GaussianMixture::new(self.weights.clone(), self.means.clone(), covs)
            .map_err(|e| CliError::Config(format!("distribution: {e}")))
    }
}

/// The pair `(p, q)`: `p` generates the data, `q` is the model under test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    PaperMixture {
        dim: usize,
        #[serde(default = "default_rho1")]
        rho1: f64,
        #[serde(default = "default_omega")]
        omega: f64,
    },
    GaussianMixture {
        p: MixtureSpec,
        q: MixtureSpec,
    },
    /// `q` has random parameters drawn from `param_seed`; `p` shares them
    /// except for `perturbation · N(0, 1)` noise added to the coupling.
    Rbm {
        dim: usize,
        hidden: usize,
        #[serde(default = "default_one")]
        coupling_scale: f64,
        perturbation: f64,
        #[serde(default)]
        param_seed: u64,
        #[serde(default = "default_gibbs")]
        gibbs_sweeps: usize,
    },
}

fn default_rho1() -> f64 {
    0.5
}
fn default_omega() -> f64 {
    0.8
}
fn default_one() -> f64 {
    1.0
}
fn default_gibbs() -> usize {
    100
}

impl Default for DistributionSpec {
    fn default() -> Self {
        DistributionSpec::PaperMixture {
            dim: 2,
            rho1: default_rho1(),
            omega: default_omega(),
        }
    }
}

impl DistributionSpec {
    pub fn build(&self) -> Result<(Model, Model), CliError> {
        match self {
            DistributionSpec::PaperMixture { dim, rho1, omega } => {
                let (p, q) = make_paper_mixture(*dim, *rho1, *omega)
                    .map_err(|e| CliError::Config(format!("distribution: {e}")))?;
                Ok((Model::Mixture(p), Model::Mixture(q)))
            }
            DistributionSpec::GaussianMixture { p, q } => {
                let (p, q) = (p.build()?, q.build()?);
                let (dp, dq) = (ScoreField::dim(&p), ScoreField::dim(&q));
                if dp != dq {
                    return Err(CliError::Config(format!(
                        "distribution: p has dimension {dp}, q has {dq}"
                    )));
                }
                Ok((Model::Mixture(p), Model::Mixture(q)))
            }
            &DistributionSpec::Rbm {
                dim,
                hidden,
                coupling_scale,
                perturbation,
                param_seed,
                gibbs_sweeps,
            } => {
                if dim == 0 || hidden == 0 {
                    return Err(CliError::Config(
                        "distribution: rbm dimensions must be positive".into(),
                    ));
                }
                if !(coupling_scale.is_finite() && perturbation >= 0.0 && perturbation.is_finite())
                {
                    return Err(CliError::Config(
                        "distribution: coupling_scale must be finite and perturbation non-negative"
                            .into(),
                    ));
                }
                if gibbs_sweeps == 0 {
                    return Err(CliError::Config(
                        "distribution: gibbs_sweeps must be positive".into(),
                    ));
                }
                let q = GaussBernoulliRbm::random(
                    dim,
                    hidden,
                    coupling_scale,
                    &mut child(param_seed, 0),
                );
                let mut noise = child(param_seed, 1);
                let coupling = q
                    .coupling()
                    .iter()
                    .map(|b| {
                        let z: f64 = StandardNormal.sample(&mut noise);
                        b + perturbation * z
                    })
                    .collect();
                let p = GaussBernoulliRbm::new(
                    coupling,
                    q.visible_bias().to_vec(),
                    q.hidden_bias().to_vec(),
                )
                .map_err(|e| CliError::Config(format!("distribution: {e}")))?;
                Ok((
                    Model::Rbm {
                        rbm: p,
                        gibbs_sweeps,
                    },
                    Model::Rbm {
                        rbm: q,
                        gibbs_sweeps,
                    },
                ))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    pub width: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        NetSection { width: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub n_tr: usize,
    pub n_val: usize,
    /// Samples from `q` used to log `MSE_q` on the curves; 0 disables it.
    pub n_te: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batches_per_interval: Option<usize>,
    pub div_mode: Option<DivMode>,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n_tr: 2000,
            n_val: 1000,
            n_te: 5000,
            batch_size: 200,
            lr: 1e-3,
            epochs: 60,
            batches_per_interval: None,
            div_mode: None,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSection {
    pub n_run: usize,
    pub n_replica: usize,
}

impl Default for PowerSection {
    fn default() -> Self {
        PowerSection {
            n_run: 200,
            n_replica: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KsdSection {
    /// Bandwidth scales `δ` relative to the median heuristic; `[1]` is the
    /// plain median heuristic.
    pub deltas: Vec<f64>,
    pub n_samples: usize,
    pub n_boot: usize,
    pub n_run: usize,
    pub n_replica: usize,
}

impl Default for KsdSection {
    fn default() -> Self {
        KsdSection {
            deltas: vec![1.0],
            n_samples: 100,
            n_boot: 500,
            n_run: 200,
            n_replica: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// Total samples shared between training and testing.
    pub n_sample: usize,
    /// Fractions of `n_sample` used for training, each in `(0, 1)`.
    pub fractions: Vec<f64>,
    /// Part of the training share held out for validation.
    pub val_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            n_sample: 1000,
            fractions: (1..=9).map(|k| k as f64 / 10.0).collect(),
            val_fraction: 0.2,
        }
    }
}

/// Sizes for one split of `n_sample` at training fraction `f`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub n_tr: usize,
    pub n_val: usize,
    pub n_gof: usize,
}

impl SplitSection {
    pub fn sizes(&self, fraction: f64) -> SplitSizes {
        let n_train = (fraction * self.n_sample as f64).round() as usize;
        let n_val = (self.val_fraction * n_train as f64).round() as usize;
        SplitSizes {
            n_tr: n_train - n_val,
            n_val,
            n_gof: self.n_sample - n_train,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(format!("split: {m}")));
        if self.fractions.is_empty() {
            return bad("fractions must be nonempty".into());
        }
        if !(self.val_fraction >= 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("fraction {f} must lie strictly between 0 and 1"));
            }
            let s = self.sizes(f);
            if s.n_tr == 0 || s.n_gof == 0 {
                return bad(format!(
                    "fraction {f} of n_sample = {} leaves an empty split",
                    self.n_sample
                ));
            }
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            n_tr: t.n_tr,
            n_val: t.n_val,
            batch_size: t.batch_size,
            lr: t.lr,
            epochs: t.epochs,
            schedule: self.schedule,
            batches_per_interval: t.batches_per_interval,
            div_mode: t.div_mode,
            width: self.net.width,
            optimizer: t.optimizer,
            seed,
        }
    }

    /// Checks every section, whichever command runs.
    pub fn validate(&self) -> Result<(Model, Model), CliError> {
        let models = self.distribution.build()?;
        self.train_config(self.seed)
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.gof
            .validate()
            .map_err(|e| CliError::Config(format!("gof: {e}")))?;
        if self.power.n_run == 0 || self.power.n_replica == 0 {
            return Err(CliError::Config(
                "power: n_run and n_replica must be positive".into(),
            ));
        }
        let k = &self.ksd;
        if k.deltas.is_empty() || k.deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(CliError::Config(
                "ksd: deltas must be nonempty and positive".into(),
            ));
        }
        if k.n_samples < 2 || k.n_boot == 0 || k.n_run == 0 || k.n_replica == 0 {
            return Err(CliError::Config(
                "ksd: need n_samples >= 2 and positive n_boot, n_run, n_replica".into(),
            ));
        }
        self.ntk
            .validate()
            .map_err(|e| CliError::Config(format!("ntk: {e}")))?;
        self.split.validate()?;
        if self.out_dir.is_empty() {
            return Err(CliError::Config("out_dir must be nonempty".into()));
        }
        Ok(models)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        c.validate().unwrap();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in [
            r#"{"sed": 1}"#,
            r#"{"schedule": {"kind": "staged", "lambda_init": 1, "lambda_trem": 0.1, "beta": 0.9}}"#,
            r#"{"train": {"epoch": 3}}"#,
            r#"{"distribution": {"kind": "paper_mixture", "dim": 2, "rho": 0.5}}"#,
            r#"{"gof": {"n_gof": 10, "alpha2": 0.1}}"#,
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(bad), Err(CliError::Config(_))),
                "{bad}"
            );
        }
    }

    #[test]
    fn validation_guards() {
        let mut c = ExperimentConfig::default();
        c.power.n_run = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.split.fractions = vec![0.5, 1.0];
        assert!(c.validate().is_err());
        c.split.fractions = vec![0.0];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.ksd.deltas = vec![1.0, -0.5];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.batch_size = c.train.n_tr + 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_sizes_partition_the_sample() {
        let s = SplitSection::default();
        for &f in &s.fractions {
            let z = s.sizes(f);
            assert_eq!(z.n_tr + z.n_val + z.n_gof, s.n_sample);
        }
        assert_eq!(
            s.sizes(0.5),
            SplitSizes {
                n_tr: 400,
                n_val: 100,
                n_gof: 500
            }
        );
    }

    #[test]
    fn distribution_kinds_build() {
        let gm = r#"{"distribution": {"kind": "gaussian_mixture",
            "p": {"weights": [1], "means": [[0.5]], "covariances": [[[1]]]},
            "q": {"weights": [0.5, 0.5], "means": [[-1], [1]], "covariances": [[[1]], [[1]]]}}}"#;
        let (p, q) = ExperimentConfig::from_json(gm)
            .unwrap()
            .distribution
            .build()
            .unwrap();
        assert_eq!((p.dim(), q.dim()), (1, 1));

        let rbm = r#"{"distribution": {"kind": "rbm", "dim": 3, "hidden": 2, "perturbation": 0}}"#;
        let (p, q) = ExperimentConfig::from_json(rbm)
            .unwrap()
            .distribution
            .build()
            .unwrap();
        assert_eq!(p, q);
        let rbm =
            r#"{"distribution": {"kind": "rbm", "dim": 3, "hidden": 2, "perturbation": 0.1}}"#;
        let (p, q) = ExperimentConfig::from_json(rbm)
            .unwrap()
            .distribution
            .build()
            .unwrap();
        assert_ne!(p, q);
        assert_eq!(p.dim(), 3);
    }
}
