//! Commands behind the `hyperevent` binary. Each returns a report; the
//! binary prints it and maps errors to exit codes.

use std::path::{Path, PathBuf};

use serde::Serialize;

use hyperevent_core::autodiff::Tape;
use hyperevent_core::harness::{atomic_write, write_dataset, Checkpoint, DataSource, RunConfig};
use hyperevent_core::hypergraph::AffinityTensor;
use hyperevent_core::model::{forward_sample, ModelParams, ModelSpec};
use hyperevent_core::training::gradcheck::{
    model_gradcheck, DEFAULT_GRADCHECK_EPS, DEFAULT_GRADCHECK_TOLERANCE,
};
use hyperevent_core::training::trainer::{attribute_weights, evaluate, evaluate_metrics};
use hyperevent_core::training::{
    generate_synthetic, prepare, train, DataGeometry, Dataset, EpochMetrics, GradCheckReport,
    PreparedSample, SyntheticDatasetSpec, Task, TrainConfig,
};
use hyperevent_core::{Error, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.ckpt";
pub const HYPERGRAPH_FILE: &str = "hypergraph.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

/// Exit status for an error: 1 validation, 2 numerical, 3 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        _ => 1,
    }
}

/// Loaded configuration plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub base: PathBuf,
    pub out: Option<PathBuf>,
}

impl Invocation {
    /// `--seed` replaces every seed; `--out` wins over `out_dir`.
    pub fn load(config: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<Self> {
        let (mut cfg, base) = match config {
            Some(p) => (
                RunConfig::from_path(p)?,
                p.parent().map(Path::to_path_buf).unwrap_or_default(),
            ),
            None => (RunConfig::from_json(b"{}")?, PathBuf::new()),
        };
        if let Some(s) = seed {
            cfg.override_seed(s);
        }
        let out = out.map(Path::to_path_buf).or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d)));
        Ok(Self {
            config: cfg,
            base,
            out,
        })
    }

    pub fn require_out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config {
                path: "out_dir".into(),
                msg: "missing; pass --out or set out_dir".into(),
            })
    }

    fn dataset(&self, data_dir: Option<&Path>) -> Result<Dataset> {
        match data_dir {
            Some(d) => DataSource::Dir(d.to_path_buf()).load(Path::new("")),
            None => self.config.require_data()?.load(&self.base),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthReport {
    pub samples: usize,
    pub class_histogram: Vec<usize>,
    pub out: PathBuf,
}

pub fn cmd_synth(inv: &Invocation) -> Result<SynthReport> {
    let spec = match inv.config.require_data()? {
        DataSource::Synthetic(s) => s,
        DataSource::Dir(_) => {
            return Err(Error::Config {
                path: "data".into(),
                msg: "synth needs a synthetic data source".into(),
            })
        }
    };
    let out = inv.require_out()?;
    let dataset = generate_synthetic(spec)?;
    write_dataset(&dataset, out)?;
    Ok(SynthReport {
        samples: dataset.samples.len(),
        class_histogram: dataset.class_histogram(),
        out: out.to_path_buf(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub start_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

fn metrics_text(history: &[EpochMetrics]) -> String {
    history
        .iter()
        .map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n")
        .collect()
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    let mut a = a.clone();
    a.epochs = b.epochs;
    a == *b
}

pub fn cmd_train(inv: &Invocation) -> Result<TrainReport> {
    let cfg = inv.config.require_train()?.clone();
    let out = inv.require_out()?.to_path_buf();
    let dataset = inv.dataset(None)?;
    let spec = ModelSpec::new(cfg.clone(), dataset.geometry.clone())?;
    let data = prepare(&dataset, cfg.event_bins)?;

    let (mut params, start_epoch) = match &inv.config.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(&inv.base.join(path))?;
            let ck_spec = ck.params.spec();
            if !same_run(&ck_spec.train, &cfg) || ck_spec.geometry != spec.geometry {
                return Err(Error::Config {
                    path: "resume_from".into(),
                    msg: "checkpoint was trained with a different config or dataset".into(),
                });
            }
            if ck.epoch > cfg.epochs {
                return Err(Error::Config {
                    path: "train.epochs".into(),
                    msg: format!("checkpoint is already at epoch {}", ck.epoch),
                });
            }
            let named = ck.params.named().map(|(n, m)| (n.to_string(), m.clone())).collect();
            (ModelParams::from_named(spec, named)?, ck.epoch)
        }
        None => (ModelParams::init(spec), 0),
    };

    std::fs::create_dir_all(&out)?;
    let save_every = inv.config.save_every;
    let mut history: Vec<EpochMetrics> = Vec::new();
    train(&mut params, &data, start_epoch, |m, p| {
        history.push(m.clone());
        atomic_write(&out.join(METRICS_FILE), metrics_text(&history).as_bytes())?;
        if save_every > 0 && m.epoch % save_every == 0 {
            Checkpoint::new(m.epoch, p.clone()).save(&out.join(format!("checkpoint-epoch-{:04}.ckpt", m.epoch)))?;
        }
        Ok(())
    })?;
    atomic_write(&out.join(METRICS_FILE), metrics_text(&history).as_bytes())?;
    let final_path = out.join(FINAL_CHECKPOINT);
    Checkpoint::new(start_epoch + history.len(), params).save(&final_path)?;
    Ok(TrainReport {
        start_epoch,
        history,
        checkpoint: final_path,
    })
}

fn check_geometry(model: &DataGeometry, data: &DataGeometry) -> Result<()> {
    if model.num_classes != data.num_classes {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} classes, dataset has {}",
            model.num_classes, data.num_classes
        )));
    }
    if model != data {
        return Err(Error::InvalidArgument(
            "dataset geometry differs from the checkpoint's".into(),
        ));
    }
    Ok(())
}

fn load_for_inference(inv: &Invocation, checkpoint: &Path, data_dir: Option<&Path>) -> Result<(Checkpoint, Vec<PreparedSample>)> {
    let ck = Checkpoint::load(checkpoint)?;
    let dataset = inv.dataset(data_dir)?;
    check_geometry(&ck.params.spec().geometry, &dataset.geometry)?;
    let data = prepare(&dataset, ck.params.spec().train.event_bins)?;
    Ok((ck, data))
}

/// Metrics of a checkpoint on a dataset; written to `eval.json` under `--out` when given.
pub fn cmd_eval(inv: &Invocation, checkpoint: &Path, data_dir: Option<&Path>) -> Result<EpochMetrics> {
    let (ck, data) = load_for_inference(inv, checkpoint, data_dir)?;
    let weights = attribute_weights(&ck.params, &data);
    let m = evaluate_metrics(&ck.params, &data, weights.as_deref(), ck.epoch)?;
    if let Some(out) = &inv.out {
        let mut line = serde_json::to_vec(&m).expect("metrics serialize");
        line.push(b'\n');
        atomic_write(&out.join("eval.json"), &line)?;
    }
    Ok(m)
}

/// Geometry and hyperparameters of the small gradient-check model.
pub fn reference_model(task: Task, seed: u64) -> Result<(ModelParams, Vec<PreparedSample>)> {
    let mut c = TrainConfig::with_seed(seed);
    c.task = task;
    c.dynamic_nodes = 4;
    c.static_nodes = 3;
    c.steps = 2;
    c.k = 2;
    c.d_ob = 2;
    c.nhid = 6;
    c.latent = 4;
    c.event_bins = 4;
    c.sim_threshold = 0.999;
    let mut synth = SyntheticDatasetSpec::new(3, 1, seed);
    synth.width = 8;
    synth.height = 8;
    synth.task = task;
    let dataset = generate_synthetic(&synth)?;
    let spec = ModelSpec::new(c, dataset.geometry.clone())?;
    let data = prepare(&dataset, spec.train.event_bins)?;
    Ok((ModelParams::init(spec), data))
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckOutcome {
    pub task: Task,
    pub report: GradCheckReport,
}

/// Gradient check for both loss types on the reference model. The seed
/// comes from `train.seed` when configured, otherwise 1.
pub fn cmd_gradcheck(inv: &Invocation) -> Result<Vec<GradcheckOutcome>> {
    let seed = inv.config.train.as_ref().map_or(1, |t| t.seed);
    let mut out = Vec::new();
    for task in [Task::SingleLabel, Task::MultiLabel] {
        let (params, data) = reference_model(task, seed)?;
        let views: Vec<_> = data.iter().map(PreparedSample::view).collect();
        let labels: Vec<&[usize]> = data.iter().map(|s| s.labels.as_slice()).collect();
        let weights = attribute_weights(&params, &data);
        let report = model_gradcheck(
            &params,
            &views,
            &labels,
            weights.as_deref(),
            DEFAULT_GRADCHECK_EPS,
            DEFAULT_GRADCHECK_TOLERANCE,
        )?;
        out.push(GradcheckOutcome { task, report });
    }
    if let Some(dir) = &inv.out {
        let json = serde_json::to_vec_pretty(&out).expect("report serializes");
        atomic_write(&dir.join("gradcheck.json"), &json)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypergraphDump {
    pub k: usize,
    #[serde(rename = "D")]
    pub num_dynamic: usize,
    #[serde(rename = "S")]
    pub num_static: usize,
    /// Static indices joined to each dynamic node.
    pub edges: Vec<Vec<usize>>,
    /// Row-normalized `[D, S]` affiliation probabilities.
    pub affinities: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub sample: String,
    pub hypergraph: HypergraphDump,
    pub embedding_rows: usize,
}

/// Dumps the hypergraph of one sample and the pooled embeddings of all.
pub fn cmd_inspect_hypergraph(inv: &Invocation, checkpoint: &Path, sample_id: &str, data_dir: Option<&Path>) -> Result<InspectReport> {
    let out = inv.require_out()?.to_path_buf();
    let (ck, data) = load_for_inference(inv, checkpoint, data_dir)?;
    let params = &ck.params;
    let sample = data
        .iter()
        .find(|s| s.id == sample_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown sample id `{sample_id}`")))?;

    let mut tape = Tape::new();
    let vars = params.leaves(&mut tape);
    let trace = forward_sample(&mut tape, params.spec(), params.layout(), &vars, sample.view())?;
    let probs = AffinityTensor::from_raw(tape.value(trace.affinity).clone()).probs;
    let hg = &trace.hypergraph;
    let dump = HypergraphDump {
        k: hg.k(),
        num_dynamic: hg.num_dynamic(),
        num_static: hg.num_static(),
        edges: hg.edges().to_vec(),
        affinities: (0..probs.rows()).map(|d| probs.row(d).to_vec()).collect(),
    };
    let mut json = serde_json::to_vec_pretty(&dump).expect("dump serializes");
    json.push(b'\n');
    atomic_write(&out.join(HYPERGRAPH_FILE), &json)?;

    let weights = attribute_weights(params, &data);
    let ev = evaluate(params, &data, weights.as_deref())?;
    let mut csv = String::from("id,labels");
    for j in 0..ev.embeddings.cols() {
        csv.push_str(&format!(",e{j}"));
    }
    csv.push('\n');
    for (i, s) in data.iter().enumerate() {
        let labels: Vec<String> = s.labels.iter().map(usize::to_string).collect();
        csv.push_str(&format!("{},{}", s.id, labels.join(";")));
        for v in ev.embeddings.row(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    atomic_write(&out.join(EMBEDDINGS_FILE), csv.as_bytes())?;
    Ok(InspectReport {
        sample: sample_id.to_string(),
        hypergraph: dump,
        embedding_rows: data.len(),
    })
}
