//! Subcommand bodies. Each returns a JSON summary that the entry point
//! prints; artifacts land in the configured output directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::{parse_edge, parse_edge_bit, CorrelationEval, DatasetSource, RunConfig};
use crate::analysis::{
    correlation_experiment, interaction_probe, pitfall_probe, CorrelationReport, Edit, FinetuneEvaluator,
    PREDICTOR, REFERENCE_TAU,
};
use crate::cost::policy_cost;
use crate::data::{gen_synthetic, load_idx, split, Dataset};
use crate::error::{Error, Result};
use crate::game::{exact_shapley, mc_shapley, McConfig, ValueEval, MAX_EXACT_PLAYERS};
use crate::nn::{build_network, read_checkpoint, write_checkpoint, LayerSpec, TrainConfig};
use crate::search::{finetune, search_with_hook, shapley_rows, train_weights_epoch, SearchMethod, SearchOutcome};
use crate::seed::{derive_seed, sub_seed};
use crate::supernet::{EdgeKind, PolicyFile, QuantPolicy, Supernet};
use crate::nn::Optimizer;

pub const POLICY_FILE: &str = "policy.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const CHECKPOINT_FILE: &str = "supernet.bshp";
pub const FINETUNED_FILE: &str = "finetuned.bshp";

pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub supernet: Supernet,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetSource::Synthetic => {
            let mut d = gen_synthetic(cfg.synthetic, cfg.samples, cfg.classes, cfg.noise, derive_seed(cfg.seed, "data"))?;
            d.normalize_unit();
            Ok(d)
        }
        DatasetSource::Idx => {
            let (Some(img), Some(lab)) = (&cfg.idx_images, &cfg.idx_labels) else {
                return Err(Error::Config("idx_images and idx_labels are required".into()));
            };
            let d = load_idx(img, lab)?;
            Ok(match cfg.idx_limit {
                Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
                _ => d,
            })
        }
    }
}

/// Optional conv stack, flatten, hidden dense layers, classifier.
pub fn network_specs(cfg: &RunConfig, sample_shape: &[usize], classes: usize) -> Result<Vec<LayerSpec>> {
    let mut specs = Vec::new();
    let mut width = match (sample_shape, cfg.conv_channels.is_empty()) {
        ([d], true) => *d,
        ([c, h, w], _) => {
            let mut ch = *c;
            for &out in &cfg.conv_channels {
                specs.push(LayerSpec::Conv2d {
                    in_channels: ch,
                    out_channels: out,
                    kernel: cfg.kernel,
                    padding: cfg.kernel / 2,
                });
                specs.push(LayerSpec::Relu);
                ch = out;
            }
            specs.push(LayerSpec::Flatten);
            ch * h * w
        }
        (s, _) => {
            return Err(Error::Config(format!(
                "cannot build a network for samples of shape {s:?} (conv_channels need (c, h, w) inputs)"
            )))
        }
    };
    for &h in &cfg.hidden {
        specs.push(LayerSpec::Dense { inputs: width, outputs: h });
        specs.push(LayerSpec::Relu);
        width = h;
    }
    specs.push(LayerSpec::Dense { inputs: width, outputs: classes });
    Ok(specs)
}

pub fn build_supernet(cfg: &RunConfig, sample_shape: &[usize], classes: usize) -> Result<Supernet> {
    let specs = network_specs(cfg, sample_shape, classes)?;
    let graph = build_network(sample_shape, &specs, derive_seed(cfg.seed, "init"))?;
    let mut net = Supernet::build(graph, cfg.space()?)?;
    if let Some(p) = &cfg.plant_noise {
        let (edge, bit) = parse_edge_bit(p)?;
        if edge.layer >= net.layers() {
            return Err(Error::Config(format!("plant_noise layer {} out of range", edge.layer)));
        }
        net.plant_noise(edge, bit, derive_seed(cfg.seed, "noise"))?;
    }
    Ok(net)
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let data = load_dataset(cfg)?;
    let (train, val) = split(&data, cfg.val_fraction, derive_seed(cfg.seed, "split"))?;
    let supernet = build_supernet(cfg, data.sample_shape(), data.classes)?;
    Ok(Prepared { train, val, supernet })
}

fn provenance(cfg: &RunConfig) -> Vec<String> {
    vec![
        format!("seed: {}", cfg.seed),
        format!("config: {}", cfg.to_json()),
    ]
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

pub fn save_supernet(path: &Path, net: &Supernet) -> Result<()> {
    write_checkpoint(create(path)?, &net.named_tensors())
}

/// Rebuilds the configured network and loads a supernet checkpoint into it.
pub fn load_supernet(cfg: &RunConfig, path: &Path, sample_shape: &[usize], classes: usize) -> Result<Supernet> {
    let file = File::open(path)
        .map_err(|e| Error::Data(format!("missing artifact {}: {e}", path.display())))?;
    let records = read_checkpoint(BufReader::new(file))?;
    let mut net = build_supernet(cfg, sample_shape, classes)?;
    net.load_named(&records)?;
    Ok(net)
}

pub fn read_policy(path: &Path) -> Result<PolicyFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("missing artifact {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidPolicy(format!("{}: {e}", path.display())))
}

fn policy_file(cfg: &RunConfig, net: &Supernet, policy: &QuantPolicy, feasible: bool) -> Result<PolicyFile> {
    let cost = policy_cost(policy, net.graph().macs())?;
    Ok(PolicyFile {
        layers: PolicyFile::layers_of(policy),
        search_space: net.space().clone(),
        seed: cfg.seed,
        bops: cost.bops,
        compression_ratio: cost.compression_ratio,
        feasible,
        config: cfg.to_json(),
    })
}

fn finetune_config(cfg: &RunConfig, epochs: usize, component: &str) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.finetune_learning_rate.unwrap_or(cfg.learning_rate),
        batch_size: cfg.batch_size,
        epochs,
        optimizer: cfg.optimizer,
        seed: derive_seed(cfg.seed, component),
    }
}

fn run_search(cfg: &RunConfig, p: &mut Prepared, checkpoints: Option<&Path>) -> Result<SearchOutcome> {
    let scfg = cfg.search_config();
    let every = cfg.checkpoint_every;
    search_with_hook(&mut p.supernet, &p.train, &p.val, &scfg, &mut |epoch, net| {
        if let Some(dir) = checkpoints {
            if every > 0 && (epoch + 1) % every == 0 {
                save_supernet(&dir.join(format!("epoch_{:03}.bshp", epoch + 1)), net)?;
            }
        }
        Ok(())
    })
}

/// Runs the configured search and writes policy, trajectory, Shapley dumps
/// and the final checkpoint.
pub fn cmd_search(cfg: &RunConfig) -> Result<serde_json::Value> {
    let out = &cfg.out_dir;
    let mut p = prepare(cfg)?;
    let result = run_search(cfg, &mut p, Some(&out.join("checkpoints")))?;
    let header = provenance(cfg);
    let pf = policy_file(cfg, &p.supernet, &result.policy, result.budget.feasible)?;
    write_json(&out.join(POLICY_FILE), &pf)?;
    result.trajectory.write_csv(create(&out.join(TRAJECTORY_FILE))?, &header)?;
    result.trajectory.write_timings_csv(create(&out.join(TIMINGS_FILE))?)?;
    for r in &result.shapley {
        r.write_csv(create(&out.join("shapley").join(format!("round_{:03}.csv", r.iteration)))?, &header)?;
    }
    save_supernet(&out.join(CHECKPOINT_FILE), &p.supernet)?;
    Ok(json!({
        "command": "search",
        "method": cfg.method,
        "policy": result.policy.describe(),
        "bops": pf.bops,
        "compression_ratio": pf.compression_ratio,
        "feasible": pf.feasible,
        "converged": result.converged,
        "rounds": result.shapley.len(),
        "out_dir": out.display().to_string(),
    }))
}

fn policy_or_default(cfg: &RunConfig, path: Option<&Path>) -> PathBuf {
    path.map_or_else(|| cfg.out_dir.join(POLICY_FILE), Path::to_path_buf)
}

fn checkpoint_or_default(cfg: &RunConfig, path: Option<&Path>) -> PathBuf {
    path.map_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE), Path::to_path_buf)
}

fn load_policy_for(net: &Supernet, path: &Path) -> Result<QuantPolicy> {
    let policy = read_policy(path)?.policy()?;
    if policy.layers.len() != net.layers() {
        return Err(Error::InvalidPolicy(format!(
            "policy has {} layers, checkpoint network has {}",
            policy.layers.len(),
            net.layers()
        )));
    }
    net.validate_policy(&policy)?;
    Ok(policy)
}

/// Fine-tunes a searched policy from the supernet checkpoint.
pub fn cmd_finetune(cfg: &RunConfig, policy: Option<&Path>, checkpoint: Option<&Path>) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let (train, val) = split(&data, cfg.val_fraction, derive_seed(cfg.seed, "split"))?;
    let mut net = load_supernet(cfg, &checkpoint_or_default(cfg, checkpoint), data.sample_shape(), data.classes)?;
    let policy = load_policy_for(&net, &policy_or_default(cfg, policy))?;
    let tcfg = finetune_config(cfg, cfg.finetune_epochs, "finetune");
    let (graph, metrics) = finetune(&net, &policy, &train, &val, &tcfg)?;
    net.graph_mut().load_named(&graph.named_tensors())?;
    save_supernet(&cfg.out_dir.join(FINETUNED_FILE), &net)?;
    let summary = json!({
        "command": "finetune",
        "policy": policy.describe(),
        "metrics": metrics,
        "seed": cfg.seed,
        "config": cfg.to_json(),
    });
    write_json(&cfg.out_dir.join("finetune.json"), &summary)?;
    Ok(summary)
}

/// Accuracy, BOPs and compression of a policy on a checkpoint.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>, policy: Option<&Path>) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let (train, val) = split(&data, cfg.val_fraction, derive_seed(cfg.seed, "split"))?;
    let net = load_supernet(cfg, &checkpoint_or_default(cfg, checkpoint), data.sample_shape(), data.classes)?;
    let policy = load_policy_for(&net, &policy_or_default(cfg, policy))?;
    let graph = net.apply_policy(&policy)?;
    let cost = policy_cost(&policy, graph.macs())?;
    Ok(json!({
        "command": "eval",
        "policy": policy.describe(),
        "train_accuracy": graph.accuracy(&train.inputs, &train.labels)?,
        "val_accuracy": graph.accuracy(&val.inputs, &val.labels)?,
        "bops": cost.bops,
        "compression_ratio": cost.compression_ratio,
        "seed": cfg.seed,
    }))
}

/// Exact Shapley table of the configured supernet after weight training,
/// alongside a Monte-Carlo estimate.
pub fn cmd_shapley_exact(cfg: &RunConfig) -> Result<serde_json::Value> {
    let mut p = prepare(cfg)?;
    let players = p.supernet.player_count();
    if players > MAX_EXACT_PLAYERS {
        return Err(Error::TooManyPlayers { players, max: MAX_EXACT_PLAYERS });
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let shuffle = derive_seed(cfg.seed, "search.shuffle");
    let samples = cfg.calibration_samples.min(p.train.len());
    p.supernet
        .calibrate(&p.train.inputs.select_rows(&(0..samples).collect::<Vec<_>>()))?;
    for e in 0..cfg.epochs {
        train_weights_epoch(&mut p.supernet, &p.train, &mut opt, cfg.batch_size, sub_seed(shuffle, e as u64))?;
    }
    let budget = cfg.budget().resolve(cfg.mu, p.supernet.graph().macs().to_vec())?;
    let vf = ValueEval::new(&p.supernet, &p.val.inputs, &p.val.labels, &budget)?;
    let exact = exact_shapley(&vf)?;
    let mc = mc_shapley(
        &vf,
        &McConfig {
            permutations: cfg.permutations,
            truncation: cfg.truncation,
            seed: derive_seed(cfg.seed, "search.shapley"),
            threads: cfg.threads,
        },
    )?;
    let rows = shapley_rows(&p.supernet, &exact);
    let path = cfg.out_dir.join("shapley_exact.csv");
    let mut w = create(&path)?;
    for h in provenance(cfg) {
        std::io::Write::write_all(&mut w, format!("# {h}\n").as_bytes())?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["layer", "kind", "bit", "psi_exact", "psi_mc"])?;
    let mut max_dev: f64 = 0.0;
    for (r, m) in rows.iter().zip(&mc.estimates) {
        max_dev = max_dev.max((r.psi - m.psi).abs());
        csv.write_record([
            r.layer.to_string(),
            r.kind.to_string(),
            r.bit.to_string(),
            r.psi.to_string(),
            m.psi.to_string(),
        ])?;
    }
    csv.flush()?;
    let sum: f64 = exact.iter().map(|e| e.psi).sum();
    Ok(json!({
        "command": "shapley-exact",
        "players": players,
        "empty_value": mc.empty_value,
        "full_value": mc.full_value,
        "efficiency_gap": sum - (mc.full_value - mc.empty_value),
        "mc_permutations": cfg.permutations,
        "max_abs_deviation": max_dev,
        "table": path.display().to_string(),
    }))
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CorrelationStudy {
    pub reference_tau: f64,
    pub predictor: &'static str,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub tau_smpq: Vec<f64>,
    pub tau_dmpq: Vec<f64>,
    pub mean_tau_smpq: f64,
    pub mean_tau_dmpq: f64,
    pub runs: Vec<CorrelationReport>,
    pub config: serde_json::Value,
}

/// For each seed: search SMPQ and DMPQ from the same initial supernet, then
/// rank `k` sampled policies by predictor and by fine-tuned accuracy.
pub fn correlation_study(cfg: &RunConfig) -> Result<CorrelationStudy> {
    let mut runs = Vec::with_capacity(cfg.correlation_seeds.len());
    for &seed in &cfg.correlation_seeds {
        let c = RunConfig { seed, ..cfg.clone() };
        let base = prepare(&c)?;
        let mut nets = Vec::with_capacity(2);
        for method in [SearchMethod::Smpq, SearchMethod::Dmpq] {
            let mc = RunConfig { method, ..c.clone() };
            let mut p = Prepared {
                train: base.train.clone(),
                val: base.val.clone(),
                supernet: base.supernet.clone(),
            };
            run_search(&mc, &mut p, None)?;
            nets.push(p.supernet);
        }
        let tcfg = finetune_config(&c, c.probe_epochs, "probe");
        let eval = |net| FinetuneEvaluator {
            supernet: net,
            train: &base.train,
            val: &base.val,
            cfg: tcfg.clone(),
        };
        let (es, ed) = match c.correlation_eval {
            CorrelationEval::Inherited => (eval(&nets[0]), eval(&nets[1])),
            CorrelationEval::Scratch => (eval(&base.supernet), eval(&base.supernet)),
        };
        runs.push(correlation_experiment((&nets[0], &es), (&nets[1], &ed), cfg.correlation_k, derive_seed(seed, "correlation"))?);
    }
    let tau_smpq: Vec<f64> = runs.iter().map(|r| r.tau_smpq).collect();
    let tau_dmpq: Vec<f64> = runs.iter().map(|r| r.tau_dmpq).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(CorrelationStudy {
        reference_tau: REFERENCE_TAU,
        predictor: PREDICTOR,
        k: cfg.correlation_k,
        seeds: cfg.correlation_seeds.clone(),
        mean_tau_smpq: mean(&tau_smpq),
        mean_tau_dmpq: mean(&tau_dmpq),
        tau_smpq,
        tau_dmpq,
        runs,
        config: cfg.to_json(),
    })
}

pub fn cmd_correlation(cfg: &RunConfig) -> Result<serde_json::Value> {
    let study = correlation_study(cfg)?;
    let dir = cfg.out_dir.join("analysis");
    write_json(&dir.join("correlation.json"), &study)?;
    let mut csv = csv::Writer::from_writer(create(&dir.join("correlation.csv"))?);
    csv.write_record(["seed", "method", "policy", "score", "accuracy"])?;
    for r in &study.runs {
        for (method, rows) in [("smpq", &r.smpq), ("dmpq", &r.dmpq)] {
            for s in rows {
                csv.write_record([
                    r.seed.to_string(),
                    method.into(),
                    s.policy.clone(),
                    s.score.to_string(),
                    s.accuracy.to_string(),
                ])?;
            }
        }
    }
    csv.flush()?;
    Ok(json!({
        "command": "analyze correlation",
        "seeds": study.seeds,
        "tau_smpq": study.tau_smpq,
        "tau_dmpq": study.tau_dmpq,
        "mean_tau_smpq": study.mean_tau_smpq,
        "mean_tau_dmpq": study.mean_tau_dmpq,
        "reference_tau": study.reference_tau,
    }))
}

/// Per-candidate probe on one edge of a searched (normally DMPQ) supernet.
pub fn cmd_pitfall(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let (train, val) = split(&data, cfg.val_fraction, derive_seed(cfg.seed, "split"))?;
    let net = load_supernet(cfg, &checkpoint_or_default(cfg, checkpoint), data.sample_shape(), data.classes)?;
    let edge = parse_edge(&cfg.pitfall_edge)?;
    if edge.layer >= net.layers() {
        return Err(Error::Config(format!("pitfall_edge layer {} out of range", edge.layer)));
    }
    let eval = FinetuneEvaluator {
        supernet: &net,
        train: &train,
        val: &val,
        cfg: finetune_config(cfg, cfg.probe_epochs, "probe"),
    };
    let report = pitfall_probe(&net, edge, &eval)?;
    let dir = cfg.out_dir.join("analysis");
    report.write_csv(create(&dir.join("pitfall.csv"))?)?;
    let summary = json!({
        "command": "analyze pitfall",
        "report": report,
        "seed": cfg.seed,
        "config": cfg.to_json(),
    });
    write_json(&dir.join("pitfall.json"), &summary)?;
    Ok(summary)
}

fn default_edits(net: &Supernet) -> [Edit; 2] {
    let last = net.layers() - 1;
    let pick = |layer, kind| {
        let edge = crate::supernet::EdgeId { layer, kind };
        Edit {
            edge,
            bit: net.edge(edge).candidates[0],
        }
    };
    [pick(0, EdgeKind::Weight), pick(last, EdgeKind::Activation)]
}

/// B0..B3 fine-tunes around a base policy.
pub fn cmd_interaction(cfg: &RunConfig, checkpoint: Option<&Path>, policy: Option<&Path>) -> Result<serde_json::Value> {
    let data = load_dataset(cfg)?;
    let (train, val) = split(&data, cfg.val_fraction, derive_seed(cfg.seed, "split"))?;
    let net = load_supernet(cfg, &checkpoint_or_default(cfg, checkpoint), data.sample_shape(), data.classes)?;
    let base = load_policy_for(&net, &policy_or_default(cfg, policy))?;
    let edits = match &cfg.interaction_edits {
        Some(e) => {
            let (e0, b0) = parse_edge_bit(&e[0])?;
            let (e1, b1) = parse_edge_bit(&e[1])?;
            [Edit { edge: e0, bit: b0 }, Edit { edge: e1, bit: b1 }]
        }
        None => default_edits(&net),
    };
    for e in &edits {
        if e.edge.layer >= net.layers() {
            return Err(Error::Config(format!("interaction edit layer {} out of range", e.edge.layer)));
        }
        net.validate_policy(&base.with_bit(e.edge, e.bit))?;
    }
    let eval = FinetuneEvaluator {
        supernet: &net,
        train: &train,
        val: &val,
        cfg: finetune_config(cfg, cfg.probe_epochs, "probe"),
    };
    let report = interaction_probe(&base, edits, &eval)?;
    let dir = cfg.out_dir.join("analysis");
    report.write_csv(create(&dir.join("interaction.csv"))?)?;
    let summary = json!({
        "command": "analyze interaction",
        "report": report,
        "seed": cfg.seed,
        "config": cfg.to_json(),
    });
    write_json(&dir.join("interaction.json"), &summary)?;
    Ok(summary)
}
