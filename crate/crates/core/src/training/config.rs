use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// One class per sample, softmax cross-entropy.
    #[default]
    SingleLabel,
    /// Independent binary attributes, weighted binary cross-entropy.
    MultiLabel,
}

/// Which propagation pieces are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// Dynamic-node self-completion over the fully connected graph.
    pub st1: bool,
    /// Affinity-driven hyperedges; off means fixed uniform hyperedges.
    pub hgc: bool,
    /// Cross-modal propagation over the hypergraph.
    pub st2: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        st1: false,
        hgc: false,
        st2: false,
    };
    pub const FULL: Ablation = Ablation {
        st1: true,
        hgc: true,
        st2: true,
    };

    /// `baseline`, `full`, or the enabled flags joined by `+`.
    pub fn tag(&self) -> String {
        if *self == Self::BASELINE {
            return "baseline".into();
        }
        if *self == Self::FULL {
            return "full".into();
        }
        [("st1", self.st1), ("hgc", self.hgc), ("st2", self.st2)]
            .iter()
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

fn default_lr() -> f64 {
    0.0005
}
fn default_epochs() -> usize {
    35
}
fn default_batch() -> usize {
    5
}
fn default_k() -> usize {
    6
}
fn default_steps() -> usize {
    4
}
fn default_nodes() -> usize {
    8
}
fn default_patch() -> usize {
    4
}
fn default_d_ob() -> usize {
    4
}
fn default_heads() -> usize {
    2
}
fn default_layers() -> usize {
    1
}
fn default_hidden() -> usize {
    64
}
fn default_sim() -> f64 {
    0.98
}
fn default_latent() -> usize {
    8
}
fn default_event_bins() -> usize {
    8
}
fn default_eps() -> f64 {
    super::loss::DEFAULT_PROB_EPS
}

/// Optimization and architecture hyperparameters. `seed` is mandatory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub task: Task,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    /// Static nodes per hyperedge.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Pooled temporal length.
    #[serde(rename = "T", default = "default_steps")]
    pub steps: usize,
    /// Dynamic node count (event token width).
    #[serde(rename = "D", default = "default_nodes")]
    pub dynamic_nodes: usize,
    /// Static node count (RGB token width).
    #[serde(rename = "S", default = "default_nodes")]
    pub static_nodes: usize,
    #[serde(rename = "p", default = "default_patch")]
    pub patch_size: usize,
    /// Feature width of every node during propagation.
    #[serde(default = "default_d_ob")]
    pub d_ob: usize,
    /// Temporal Transformer heads.
    #[serde(default = "default_heads")]
    pub nhead: usize,
    #[serde(default = "default_layers")]
    pub nlayer: usize,
    #[serde(default = "default_hidden")]
    pub nhid: usize,
    #[serde(default = "default_sim")]
    pub sim_threshold: f64,
    /// Width of the shared affinity space and of propagation queries/keys.
    #[serde(default = "default_latent")]
    pub latent: usize,
    /// Attention heads inside propagation.
    #[serde(default = "default_heads")]
    pub prop_heads: usize,
    /// Event frames stacked before redundancy filtering and pooling.
    #[serde(default = "default_event_bins")]
    pub event_bins: usize,
    /// Random horizontal flips during training.
    #[serde(default)]
    pub hflip: bool,
    #[serde(default = "default_eps")]
    pub prob_eps: f64,
    /// Multi-label attribute weights; inverse frequency when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_weights: Option<Vec<f64>>,
    #[serde(default)]
    pub ablation: Ablation,
}

impl TrainConfig {
    /// All defaults with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    /// Checks ranges and cross-field constraints; errors name the field.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("T", self.steps),
            ("D", self.dynamic_nodes),
            ("S", self.static_nodes),
            ("p", self.patch_size),
            ("d_ob", self.d_ob),
            ("nhead", self.nhead),
            ("nlayer", self.nlayer),
            ("nhid", self.nhid),
            ("latent", self.latent),
            ("prop_heads", self.prop_heads),
            ("event_bins", self.event_bins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold <= 1.0) {
            return Err(Error::config("sim_threshold", "must lie in (0, 1]"));
        }
        if !(self.prob_eps > 0.0 && self.prob_eps <= 1e-3) {
            return Err(Error::config("prob_eps", "must lie in (0, 1e-3]"));
        }
        if self.k > self.static_nodes {
            return Err(Error::config("k", format!("exceeds S = {}", self.static_nodes)));
        }
        if !self.latent.is_multiple_of(self.prop_heads) {
            return Err(Error::config("prop_heads", "must divide latent"));
        }
        for (name, width) in [
            ("nhead", self.dynamic_nodes * self.d_ob),
            ("nhead", (self.dynamic_nodes + self.static_nodes) * self.d_ob),
        ] {
            if width % self.nhead != 0 {
                return Err(Error::config(name, format!("must divide feature width {width}")));
            }
        }
        if let Some(w) = &self.attribute_weights {
            if self.task != Task::MultiLabel {
                return Err(Error::config("attribute_weights", "only valid for multi_label"));
            }
            if let Some(i) = w.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::config(format!("attribute_weights[{i}]"), "must be positive"));
            }
        }
        Ok(())
    }
}

/// Input geometry and label space fixed by the dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGeometry {
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub t_start: u64,
    pub t_end: u64,
    /// Classes (single-label) or attributes (multi-label).
    pub num_classes: usize,
    pub task: Task,
}

impl DataGeometry {
    pub fn validate_against(&self, cfg: &TrainConfig) -> Result<()> {
        if self.task != cfg.task {
            return Err(Error::config("task", format!("dataset is {:?}, config is {:?}", self.task, cfg.task)));
        }
        let p = cfg.patch_size as u32;
        if !self.sensor_width.is_multiple_of(p) || !self.sensor_height.is_multiple_of(p) {
            return Err(Error::config(
                "p",
                format!("does not divide the {}x{} sensor", self.sensor_width, self.sensor_height),
            ));
        }
        if self.t_end <= self.t_start {
            return Err(Error::config("t_end", "must exceed t_start"));
        }
        if self.num_classes < 2 && self.task == Task::SingleLabel {
            return Err(Error::config("num_classes", "needs at least two classes"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        if let Some(w) = &cfg.attribute_weights {
            if w.len() != self.num_classes {
                return Err(Error::config(
                    "attribute_weights",
                    format!("{} weights for {} attributes", w.len(), self.num_classes),
                ));
            }
        }
        Ok(())
    }
}
