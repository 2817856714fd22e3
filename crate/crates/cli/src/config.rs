//! The declarative run configuration. Every default equals the published
//! setup (plant table, MPC weights, training protocol), so an empty config
//! file reproduces the reference experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lagnmpc::error::{Error, Result};
use lagnmpc::mpc::{MpcConfig, SolverSettings};
use lagnmpc::nn::{AdamWConfig, ClampBounds};
use lagnmpc::plant::{BoxSet, BuckBoostParams};
use lagnmpc::training::{HeadMode, LossMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    pub ts: f64,
    pub vin: f64,
    pub inductance: f64,
    pub capacitance: f64,
    pub load_resistance: f64,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = BuckBoostParams::default();
        Self {
            ts: p.ts,
            vin: p.vin,
            inductance: p.inductance,
            capacitance: p.capacitance,
            load_resistance: p.load_resistance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSection {
    pub horizon: usize,
    /// Diagonals of the stage and terminal state weights.
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub r: f64,
    /// Output-voltage reference; the full steady state is derived from it.
    pub x2_ref: f64,
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub u_min: f64,
    pub u_max: f64,
    pub laguerre_m: usize,
    pub laguerre_alpha: f64,
    pub max_iterations: usize,
    pub starts: usize,
}

impl Default for MpcSection {
    fn default() -> Self {
        Self {
            horizon: 20,
            q: vec![1.0, 0.1],
            p: vec![10.0, 1.0],
            r: 0.7,
            x2_ref: -10.0,
            state_lower: vec![0.01, -20.0],
            state_upper: vec![2.0, 0.0],
            u_min: 0.1,
            u_max: 0.9,
            laguerre_m: 4,
            laguerre_alpha: 0.9,
            max_iterations: 500,
            starts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    /// Requested dataset size N_d.
    pub n_d: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { n_d: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub split: f64,
    pub gamma: Vec<f64>,
    /// "supervised" or "coninf".
    pub loss: String,
    /// "nmpc" or "lagnmpc".
    pub head: String,
    pub hidden_layers: usize,
    pub hidden_nodes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            split: t.split,
            gamma: t.gamma,
            loss: "coninf".into(),
            head: "lagnmpc".into(),
            hidden_layers: t.hidden_layers,
            hidden_nodes: t.hidden_nodes,
            learning_rate: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    /// "online-nmpc", "online-lagnmpc", "nn-nmpc" or "nn-lagnmpc".
    pub controller: String,
    pub steps: usize,
    pub initial_states: Vec<Vec<f64>>,
    /// Offset-free trigger radius for network controllers.
    pub epsilon: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            controller: "nn-lagnmpc".into(),
            steps: 600,
            initial_states: vec![vec![0.01, 0.0], vec![0.5, -19.0]],
            epsilon: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    pub controller: String,
    /// Grid nodes per axis.
    pub nodes: usize,
}

impl Default for MapSection {
    fn default() -> Self {
        Self {
            controller: "nn-lagnmpc".into(),
            nodes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedPointSection {
    pub frac_bits: u32,
    pub bench_states: usize,
    pub bench_reps: usize,
}

impl Default for FixedPointSection {
    fn default() -> Self {
        Self {
            frac_bits: 16,
            bench_states: 1000,
            bench_reps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub plant: PlantSection,
    pub mpc: MpcSection,
    pub sampling: SamplingSection,
    pub training: TrainingSection,
    pub simulate: SimulateSection,
    pub map: MapSection,
    pub fixedpoint: FixedPointSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::MalformedFile {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant_params().validate()?;
        self.mpc_config()?.validate()?;
        self.train_config()?.validate()?;
        controller_kind(&self.simulate.controller)?;
        controller_kind(&self.map.controller)?;
        if self.map.nodes < 2 {
            return Err(Error::InvalidParameter("map.nodes must be >= 2".into()));
        }
        if self.sampling.n_d == 0 {
            return Err(Error::InvalidParameter("sampling.n_d must be >= 1".into()));
        }
        if !(1..=30).contains(&self.fixedpoint.frac_bits) {
            return Err(Error::InvalidParameter(
                "fixedpoint.frac_bits must lie in 1..=30".into(),
            ));
        }
        for x0 in &self.simulate.initial_states {
            if x0.len() != 2 {
                return Err(Error::InvalidParameter(
                    "simulate.initial_states entries must have two components".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn plant_params(&self) -> BuckBoostParams {
        BuckBoostParams {
            ts: self.plant.ts,
            vin: self.plant.vin,
            inductance: self.plant.inductance,
            capacitance: self.plant.capacitance,
            load_resistance: self.plant.load_resistance,
        }
    }

    pub fn state_box(&self) -> Result<BoxSet> {
        BoxSet::new(self.mpc.state_lower.clone(), self.mpc.state_upper.clone())
    }

    pub fn clamp_bounds(&self) -> ClampBounds {
        ClampBounds {
            u_min: self.mpc.u_min,
            u_max: self.mpc.u_max,
        }
    }

    /// Full MPC configuration with the steady state derived from `x2_ref`.
    pub fn mpc_config(&self) -> Result<MpcConfig> {
        if self.mpc.q.len() != 2 || self.mpc.p.len() != 2 {
            return Err(Error::InvalidParameter(
                "mpc.q and mpc.p must be two-element diagonals".into(),
            ));
        }
        let (x1_ss, u_ss) = self.plant_params().steady_state(self.mpc.x2_ref)?;
        Ok(MpcConfig {
            horizon: self.mpc.horizon,
            q: vec![self.mpc.q[0], 0.0, 0.0, self.mpc.q[1]],
            p: vec![self.mpc.p[0], 0.0, 0.0, self.mpc.p[1]],
            r: self.mpc.r,
            x_ss: vec![x1_ss, self.mpc.x2_ref],
            u_ss,
            state_box: self.state_box()?,
            u_min: self.mpc.u_min,
            u_max: self.mpc.u_max,
            laguerre_m: self.mpc.laguerre_m,
            laguerre_alpha: self.mpc.laguerre_alpha,
            solver: SolverSettings {
                max_iterations: self.mpc.max_iterations,
                starts: self.mpc.starts,
                seed: self.seed,
                ..Default::default()
            },
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let loss_mode = match self.training.loss.as_str() {
            "supervised" => LossMode::Supervised,
            "coninf" => LossMode::ConInf,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "training.loss must be \"supervised\" or \"coninf\", got \"{other}\""
                )))
            }
        };
        let head_mode = match self.training.head.as_str() {
            "nmpc" => HeadMode::Nmpc,
            "lagnmpc" => HeadMode::LagNmpc,
            other => {
                return Err(Error::InvalidParameter(format!(
                    "training.head must be \"nmpc\" or \"lagnmpc\", got \"{other}\""
                )))
            }
        };
        Ok(TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            split: self.training.split,
            gamma: self.training.gamma.clone(),
            loss_mode,
            head_mode,
            hidden_layers: self.training.hidden_layers,
            hidden_nodes: self.training.hidden_nodes,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr: self.training.learning_rate,
                weight_decay: self.training.weight_decay,
                ..Default::default()
            },
        })
    }

    /// SHA-256 of the canonical serialized configuration, hex-encoded.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The provenance header lines written into every output file.
    pub fn header_lines(&self) -> Vec<String> {
        vec![
            format!("config {}", self.hash()),
            format!("tool lagnmpc {}", env!("CARGO_PKG_VERSION")),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    OnlineNmpc,
    OnlineLagNmpc,
    NnNmpc,
    NnLagNmpc,
}

impl ControllerKind {
    pub fn needs_weights(self) -> bool {
        matches!(self, ControllerKind::NnNmpc | ControllerKind::NnLagNmpc)
    }

    pub fn slug(self) -> &'static str {
        match self {
            ControllerKind::OnlineNmpc => "online-nmpc",
            ControllerKind::OnlineLagNmpc => "online-lagnmpc",
            ControllerKind::NnNmpc => "nn-nmpc",
            ControllerKind::NnLagNmpc => "nn-lagnmpc",
        }
    }
}

pub fn controller_kind(name: &str) -> Result<ControllerKind> {
    match name {
        "online-nmpc" => Ok(ControllerKind::OnlineNmpc),
        "online-lagnmpc" => Ok(ControllerKind::OnlineLagNmpc),
        "nn-nmpc" => Ok(ControllerKind::NnNmpc),
        "nn-lagnmpc" => Ok(ControllerKind::NnLagNmpc),
        other => Err(Error::InvalidParameter(format!(
            "unknown controller \"{other}\" (expected online-nmpc, online-lagnmpc, nn-nmpc or nn-lagnmpc)"
        ))),
    }
}
