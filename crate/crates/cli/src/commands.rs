use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use tcgu_core::checkpoint::{Checkpoint, Metadata};
use tcgu_core::condense::CondensedGraph;
use tcgu_core::eval::{edge_attack_eval, mean_std, mia_attack, utility_report};
use tcgu_core::gnn::GnnModel;
use tcgu_core::graph::{
    apply_deletion, detect_format, generate_sbm, load_graph, make_split, sample_deletion, save_graph, DeletionKind,
    DeletionRequest, GraphFormat, SbmSpec,
};
use tcgu_core::pipeline::{
    millis, precondense, request_id, retrain_baseline, sequential_unlearn, train_original, unlearn as run_unlearning,
    PipelineConfig,
    RunManifest, Timings,
};
use tcgu_core::{Error, Graph};

use crate::config::{resolve_data_path, RunConfig};
use crate::{AttackArgs, CondenseArgs, DataArgs, EvalArgs, GenerateArgs, UnlearnArgs};

const STAGE1_FILE: &str = "stage1.tcgu";

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn synthetic_spec(name: &str, seed: u64) -> Result<SbmSpec> {
    match name {
        "citation-like" => Ok(SbmSpec::citation_like(seed)),
        "sbm" => Ok(SbmSpec::balanced(4, 100, 0.05, 0.005, 32, seed)),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::io(Path::new(path), e))
                .with_context(|| format!("{name:?} is neither a preset (citation-like, sbm) nor a readable spec"))?;
            Ok(serde_json::from_str(&text).map_err(Error::from)?)
        }
    }
}

/// The run configuration after applying the file and the shared data flags.
fn run_config(args: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.data {
        cfg.data.path = Some(p.clone());
        cfg.data.synthetic = None;
    }
    if let Some(name) = &args.synthetic {
        cfg.data.synthetic = Some(synthetic_spec(name, cfg.split.seed)?);
        cfg.data.path = None;
    }
    if args.format.is_some() {
        cfg.data.format = args.format;
    }
    if let Some(s) = args.split_seed {
        cfg.split.seed = s;
    }
    cfg.data.keep_split |= args.keep_split;
    if let Some(kind) = args.gnn {
        cfg.gnn.kind = kind;
    }
    Ok(cfg)
}

/// Loads or generates the graph and applies the split. Returns the graph
/// and a human-readable dataset name.
fn load_dataset(cfg: &RunConfig) -> Result<(Graph, String)> {
    let (graph, name): (Graph, String) = match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(p), None) => {
            let path = resolve_data_path(p);
            let g = load_graph(&path, cfg.data.format).with_context(|| format!("loading {}", path.display()))?;
            (g, path.display().to_string())
        }
        (None, Some(spec)) => (generate_sbm(spec)?, format!("sbm:{}", spec.num_nodes())),
        (None, None) => bail!(invalid("no dataset: pass --data, --synthetic, or set [data] in the config")),
        (Some(_), Some(_)) => bail!(invalid("give either a data path or a synthetic graph, not both")),
    };
    let graph = if cfg.data.keep_split {
        graph.check_train_coverage()?;
        graph
    } else {
        make_split(&graph, &cfg.split)?
    };
    Ok((graph, name))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn condense(args: CondenseArgs) -> Result<()> {
    let mut cfg = run_config(&args.data)?;
    if let Some(r) = args.ratio {
        cfg.condense.ratio = r;
    }
    if let Some(s) = args.steps {
        cfg.condense.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
        cfg.condense.seed = s;
        cfg.transfer.seed = s;
    }
    cfg.validate()?;
    let (graph, name) = load_dataset(&cfg)?;
    let pipeline = cfg.pipeline();
    create_out(&args.out)?;

    log::info!("training the original {} on {} nodes", pipeline.gnn.kind, graph.num_nodes());
    let started = Instant::now();
    let original = train_original(&graph, &pipeline.gnn, &pipeline.train)?;
    let train_secs = started.elapsed().as_secs_f64();
    log::info!("condensing to {} nodes", pipeline.condense.condensed_size(graph.train_nodes().len(), graph.num_classes()));
    let (condensed, stage1) = precondense(&graph, &original, &pipeline.condense)?;

    let mut manifest = RunManifest::new(name, cfg.split.seed, &pipeline);
    manifest.timings_s.insert("original_training".into(), millis(train_secs).into());
    manifest.timings_s.insert("stage1".into(), millis(stage1).into());
    manifest.metric("original_f1", utility_report(&original, &graph)?);
    manifest.metric("condensed_nodes", condensed.num_nodes());
    let nonzeros = condensed.adjacency().data().iter().filter(|&&v| v != 0.0).count();
    manifest.metric("condensed_nonzeros", nonzeros);
    manifest.metric("condensation_steps", pipeline.condense.steps);
    manifest.metric("class_histogram", condensed.class_histogram());
    let artifact = args.out.join(STAGE1_FILE);
    manifest.artifact_paths.push(artifact.display().to_string());
    manifest.metrics.insert("run_config".into(), serde_json::to_value(&cfg)?);
    Checkpoint::new()
        .with(&graph)
        .with(&original)
        .with(&condensed)
        .with(&manifest.to_metadata())
        .write(&artifact)?;
    manifest.write(&args.out.join("manifest.json"))?;
    println!(
        "condensed {} nodes into {} in {:.1}s; original test F1 {:.4}",
        graph.num_nodes(),
        condensed.num_nodes(),
        stage1,
        manifest.metrics["original_f1"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Everything `tcgu condense` stored.
struct Stage1 {
    graph: Graph,
    original: GnnModel<f64>,
    condensed: CondensedGraph<f64>,
    manifest: RunManifest,
}

fn read_stage1(path: &Path) -> Result<Stage1> {
    let file = if path.is_dir() { path.join(STAGE1_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        bail!(invalid(format!(
            "no Stage-1 checkpoint at {}; run `tcgu condense --out <dir>` first",
            file.display()
        )));
    }
    let ck = Checkpoint::read(&file).with_context(|| format!("reading {}", file.display()))?;
    let meta: Metadata = ck.get()?;
    Ok(Stage1 {
        graph: ck.get()?,
        original: ck.get()?,
        condensed: ck.get()?,
        manifest: serde_json::from_value(meta.0).map_err(Error::from)?,
    })
}

fn read_request(path: &Path) -> Result<DeletionRequest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text).map_err(Error::from)?)
}

fn with_seed(cfg: &PipelineConfig, seed: u64) -> PipelineConfig {
    let mut c = cfg.clone();
    c.train.seed = seed;
    c.transfer.seed = seed;
    c
}

/// Metrics of one repetition.
#[derive(Serialize)]
struct Repetition {
    seed: u64,
    request_id: String,
    deleted: usize,
    timings: Timings,
    unlearned_f1: f64,
    mia_auc: Option<f64>,
    retrain_f1: Option<f64>,
    retrain_s: Option<f64>,
}

pub fn unlearn(args: UnlearnArgs) -> Result<()> {
    let stage1 = read_stage1(&args.stage1)?;
    let pipeline = match &args.config {
        Some(p) => RunConfig::load(p)?.pipeline(),
        None => stage1.manifest.configs.clone(),
    };
    pipeline.validate()?;
    if args.seeds == 0 || args.jobs == 0 {
        bail!(invalid("--seeds and --jobs must be positive"));
    }
    create_out(&args.out)?;
    if let Some((batches, ratio)) = args.sequential {
        return unlearn_sequential(&args, &stage1, &pipeline, batches, ratio);
    }
    let fixed = args.request.as_deref().map(read_request).transpose()?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|k| args.seed + k).collect();

    let one = |seed: u64| -> Result<Repetition> {
        let request = match &fixed {
            Some(r) => r.clone(),
            None => sample_deletion(&stage1.graph, args.kind, args.ratio, seed)?,
        };
        let cfg = with_seed(&pipeline, seed);
        let dir = if seeds.len() == 1 { args.out.clone() } else { args.out.join(format!("seed-{seed}")) };
        create_out(&dir)?;
        write_json(&dir.join("request.json"), &request)?;
        // The transfer stage sees only the remaining graph.
        let remaining = apply_deletion(&stage1.graph, &request)?;
        let run = run_unlearning(&stage1.original, &stage1.condensed, &remaining, &cfg)?;
        let f1 = utility_report(&run.model, &remaining)?;

        let mut manifest = RunManifest::new(stage1.manifest.dataset.clone(), stage1.manifest.split_seed, &cfg);
        manifest.request = Some(serde_json::to_value(&request)?);
        manifest.record_timings(&run.timings);
        manifest.metric("request_id", request_id(&request));
        manifest.metric("unlearned_f1", f1);
        manifest.artifact_paths = run.write_artifacts(&dir)?.iter().map(|p| p.display().to_string()).collect();

        let mut rep = Repetition {
            seed,
            request_id: request_id(&request),
            deleted: request.len(),
            timings: run.timings,
            unlearned_f1: f1,
            mia_auc: None,
            retrain_f1: None,
            retrain_s: None,
        };
        if args.mia {
            if request.kind == DeletionKind::Node {
                let report = mia_attack(
                    &stage1.original,
                    &run.model,
                    &stage1.graph,
                    &request.nodes,
                    &stage1.graph.test_nodes(),
                    seed,
                )?;
                write_json(&dir.join("mia.json"), &report)?;
                manifest.metric("mia_auc", report.auc);
                manifest.metric("mia_two_model_auc", report.two_model_auc);
                rep.mia_auc = Some(report.auc);
            } else {
                log::warn!("membership inference needs deleted nodes; skipped for {:?} requests", request.kind);
            }
        }
        if args.baseline {
            let (model, secs) = retrain_baseline(&remaining, &cfg.gnn, &cfg.train)?;
            let bf1 = utility_report(&model, &remaining)?;
            manifest.timings_s.insert("retrain".into(), millis(secs).into());
            manifest.metric("retrain_f1", bf1);
            manifest.metric("unlearning_to_retrain_time", run.timings.unlearning() / secs);
            rep.retrain_f1 = Some(bf1);
            rep.retrain_s = Some(secs);
        }
        manifest.write(&dir.join("manifest.json"))?;
        Ok(rep)
    };

    let reps: Vec<Repetition> = if args.jobs > 1 && seeds.len() > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(args.jobs).build()?;
        pool.install(|| seeds.par_iter().map(|&s| one(s)).collect::<Result<_>>())?
    } else {
        seeds.iter().map(|&s| one(s)).collect::<Result<_>>()?
    };

    if reps.len() > 1 {
        let summary = summarize(&reps);
        let mut manifest = RunManifest::new(stage1.manifest.dataset.clone(), stage1.manifest.split_seed, &pipeline);
        manifest.metrics = summary.clone();
        manifest.metric("repetitions", &reps);
        manifest.write(&args.out.join("manifest.json"))?;
        for (k, v) in &summary {
            println!("{k}: {:.4} ± {:.4}", v["mean"].as_f64().unwrap_or(f64::NAN), v["std"].as_f64().unwrap_or(f64::NAN));
        }
    } else {
        let r = &reps[0];
        println!(
            "deleted {} ({}); unlearned test F1 {:.4}; stage2 {:.2}s, stage3 {:.2}s",
            r.deleted, r.request_id, r.unlearned_f1, r.timings.stage2, r.timings.stage3
        );
        if let Some(auc) = r.mia_auc {
            println!("membership-inference AUC {auc:.4}");
        }
        if let (Some(f1), Some(s)) = (r.retrain_f1, r.retrain_s) {
            println!("retrain baseline: test F1 {f1:.4} in {s:.2}s");
        }
    }
    Ok(())
}

fn summarize(reps: &[Repetition]) -> serde_json::Map<String, serde_json::Value> {
    let mut out = serde_json::Map::new();
    let mut add = |name: &str, values: Vec<f64>| {
        if !values.is_empty() {
            let (m, s) = mean_std(&values);
            out.insert(name.into(), json!({ "mean": m, "std": s, "n": values.len() }));
        }
    };
    add("unlearned_f1", reps.iter().map(|r| r.unlearned_f1).collect());
    add("unlearning_s", reps.iter().map(|r| r.timings.unlearning()).collect());
    add("mia_auc", reps.iter().filter_map(|r| r.mia_auc).collect());
    add("retrain_f1", reps.iter().filter_map(|r| r.retrain_f1).collect());
    add("retrain_s", reps.iter().filter_map(|r| r.retrain_s).collect());
    out
}

fn unlearn_sequential(
    args: &UnlearnArgs,
    stage1: &Stage1,
    pipeline: &PipelineConfig,
    batches: usize,
    ratio: f64,
) -> Result<()> {
    let cfg = with_seed(pipeline, args.seed);
    let outcome = sequential_unlearn(
        &stage1.graph,
        &stage1.original,
        &stage1.condensed,
        ratio,
        batches,
        &cfg,
        args.seed,
        args.mia.then_some(args.seed),
    )?;
    let mut rows = Vec::new();
    for step in &outcome.steps {
        let dir = args.out.join(format!("batch-{}", step.batch));
        step.run.write_artifacts(&dir)?;
        if let Some(m) = &step.mia {
            write_json(&dir.join("mia.json"), m)?;
        }
        println!(
            "batch {}: {} deleted, test F1 {:.4}{}",
            step.batch,
            step.deleted.len(),
            step.utility,
            step.mia.as_ref().map(|m| format!(", MIA AUC {:.4}", m.auc)).unwrap_or_default()
        );
        rows.push(json!({
            "batch": step.batch,
            "deleted": step.deleted.len(),
            "unlearned_f1": step.utility,
            "mia_auc": step.mia.as_ref().map(|m| m.auc),
            "stage2_s": millis(step.run.timings.stage2),
            "stage3_s": millis(step.run.timings.stage3),
        }));
    }
    if let Some(why) = &outcome.stopped {
        log::warn!("sequential unlearning stopped early: {why}");
    }
    let mut manifest = RunManifest::new(stage1.manifest.dataset.clone(), stage1.manifest.split_seed, &cfg);
    manifest.metric("sequential", json!({ "batches": batches, "batch_ratio": ratio, "steps": rows, "stopped": outcome.stopped }));
    manifest.write(&args.out.join("manifest.json"))?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let stage1 = read_stage1(&args.stage1)?;
    let model: GnnModel<f64> = match &args.model {
        Some(p) => Checkpoint::read(p).with_context(|| format!("reading {}", p.display()))?.get()?,
        None => stage1.original.clone(),
    };
    let request = args.request.as_deref().map(read_request).transpose()?;
    let remaining = match &request {
        Some(r) => apply_deletion(&stage1.graph, r)?,
        None => stage1.graph.clone(),
    };
    let mut report = serde_json::Map::new();
    report.insert("test_f1".into(), utility_report(&model, &remaining)?.into());
    if args.mia {
        let nodes = match &request {
            Some(r) if r.kind == DeletionKind::Node => &r.nodes,
            _ => bail!(invalid("--mia needs a node deletion request (--request)")),
        };
        let mia = mia_attack(&stage1.original, &model, &stage1.graph, nodes, &stage1.graph.test_nodes(), args.seed)?;
        report.insert("mia".into(), serde_json::to_value(mia)?);
    }
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e))?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn attack_edges(args: AttackArgs) -> Result<()> {
    let mut cfg = run_config(&args.data)?;
    if let Some(s) = args.steps {
        cfg.condense.steps = s;
    }
    cfg.validate()?;
    if args.seeds == 0 {
        bail!(invalid("--seeds must be positive"));
    }
    let (graph, name) = load_dataset(&cfg)?;
    create_out(&args.out)?;
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|k| args.seed + k).collect();
    let pipeline = cfg.pipeline();
    let curve = edge_attack_eval(&graph, &args.edge_attack, &pipeline, &seeds)?;
    curve.write_tsv(&args.out.join("edge_attack.tsv"))?;
    curve.write_csv(&args.out.join("edge_attack.csv"))?;
    let mut manifest = RunManifest::new(name, cfg.split.seed, &pipeline);
    manifest.metric("edge_attack", &curve);
    manifest.artifact_paths = ["edge_attack.tsv", "edge_attack.csv"]
        .iter()
        .map(|f| args.out.join(f).display().to_string())
        .collect();
    manifest.write(&args.out.join("manifest.json"))?;
    print!("{}", fs::read_to_string(args.out.join("edge_attack.tsv")).map_err(|e| Error::io(&args.out, e))?);
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let spec = synthetic_spec(&args.synthetic, args.seed)?;
    let graph: Graph = generate_sbm(&spec)?;
    let format = match args.format {
        Some(f) => f,
        None if args.out.extension().is_none() => GraphFormat::EdgeListCsv,
        None => detect_format(&args.out)?,
    };
    if format == GraphFormat::EdgeListCsv {
        create_out(&args.out)?;
    } else if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_out(parent)?;
    }
    save_graph(&graph, &args.out, format)?;
    println!(
        "wrote {} nodes, {} edges, {} classes to {}",
        graph.num_nodes(),
        graph.num_edges(),
        graph.num_classes(),
        args.out.display()
    );
    Ok(())
}
