use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vbquant_core::phantom::{gen_cohort, CohortSpec, CorrectorModel};
use vbquant_core::quantify::{
    aggregate, compare_masks, default_histogram_edges, quantify, write_aggregate_csv, EvaluationRow, HuRange,
    QuantOptions,
};
use vbquant_core::trainer::{train_with, Case, Hyperparams};
use vbquant_core::vbnet::{build_vbnet, load_checkpoint, save_checkpoint, VbNetConfig};
use vbquant_core::volume::{write_nifti_with, WriteOptions};
use vbquant_hitl::api::{serve, AppState};
use vbquant_hitl::sim::{simulate, SimConfig};
use vbquant_hitl::{HitlSession, SessionConfig, SessionData, SessionStore, DEFAULT_EPSILON};

use crate::dataset::{load_mask, load_regions, load_volume, write_case, Dataset, Manifest, MANIFEST, MANIFEST_FORMAT};
use crate::{Cli, Command, InvalidInput, TrainFlags};

fn invalid(e: anyhow::Error) -> anyhow::Error {
    e.context(InvalidInput)
}

trait Input<T> {
    /// Tag a failure as invalid input.
    fn input(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> Input<T> for std::result::Result<T, E> {
    fn input(self) -> Result<T> {
        self.map_err(|e| invalid(e.into()))
    }
}

/// Settings from a JSON file, or defaults.
fn load_settings<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .input()?;
    serde_json::from_str(&text)
        .with_context(|| format!("malformed config {}", path.display()))
        .input()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Effective<'a, S: Serialize> {
    command: &'a str,
    version: &'a str,
    settings: &'a S,
    io: serde_json::Value,
}

fn snapshot<S: Serialize>(path: &Path, command: &str, settings: &S, io: serde_json::Value) -> Result<()> {
    write_json(
        path,
        &Effective {
            command,
            version: env!("CARGO_PKG_VERSION"),
            settings,
            io,
        },
    )
}

fn apply_train_flags(hyper: &mut Hyperparams, f: &TrainFlags) {
    if let Some(e) = f.epochs {
        hyper.epochs = e;
    }
    if let Some(lr) = f.lr {
        hyper.learning_rate = lr;
    }
    if let Some(p) = f.patch_size {
        hyper.patch_size = p;
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("cannot create {}", p.display()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Phantom { n, ref out } => phantom(config, cli.seed, n, out),
        Command::Train {
            ref data,
            ref out,
            holdout,
            ref train,
        } => train_cmd(config, cli.seed, data, out, holdout, train),
        Command::Segment {
            ref checkpoint,
            ref volume,
            ref out,
            threshold,
        } => segment(config, checkpoint, volume, out, threshold),
        Command::Quantify {
            ref volume,
            ref mask,
            ref regions,
            ref out,
            ggo_range,
            consolidation_range,
        } => quantify_cmd(config, volume, mask, regions, out, ggo_range, consolidation_range),
        Command::Compare {
            ref reference,
            ref prediction,
            ref volume,
            ref regions,
            ref data,
            ref predictions,
            ref out,
        } => match (data, predictions) {
            (Some(d), Some(p)) => compare_batch(d, p, out),
            _ => compare_one(
                reference.as_deref().expect("clap requires it"),
                prediction.as_deref().expect("clap requires it"),
                volume.as_deref().expect("clap requires it"),
                regions.as_deref().expect("clap requires it"),
                out,
            ),
        },
        Command::HitlServe {
            ref session,
            port,
            threshold,
            ref train,
        } => hitl_serve(session, cli.seed, port, threshold, train),
        Command::HitlSimulate {
            ref session,
            ref corrector,
            ref out,
            ref train,
        } => hitl_simulate(session, cli.seed, corrector.as_deref(), out, train),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct PhantomSettings {
    n: Option<usize>,
    seed: u64,
    cohort: CohortSpec,
}

fn phantom(config: Option<&Path>, seed: Option<u64>, n: Option<usize>, out: &Path) -> Result<()> {
    let mut s: PhantomSettings = load_settings(config)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    s.n = n.or(s.n).or(Some(1));
    let count = s.n.unwrap_or(1);
    let cohort = gen_cohort(count, &s.cohort, s.seed).input()?;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let cases = cohort.iter().map(|c| write_case(out, c)).collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        seed: s.seed,
        cohort: s.cohort.clone(),
        cases,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    snapshot(&out.join("effective_config.json"), "phantom", &s, serde_json::json!({ "out": out }))?;
    println!("wrote {count} phantom(s) to {}", out.display());
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainSettings {
    seed: u64,
    /// Last `holdout` manifest cases are scored each epoch, not trained on.
    holdout: usize,
    model: VbNetConfig,
    hyper: Hyperparams,
}

fn train_cmd(
    config: Option<&Path>,
    seed: Option<u64>,
    data: &Path,
    out: &Path,
    holdout: Option<usize>,
    flags: &TrainFlags,
) -> Result<()> {
    let mut s: TrainSettings = load_settings(config)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(h) = holdout {
        s.holdout = h;
    }
    apply_train_flags(&mut s.hyper, flags);
    s.hyper.seed = s.seed;
    let ds = Dataset::open(data).input()?;
    let ids = ds.ids();
    if s.holdout >= ids.len() {
        return Err(invalid(anyhow::anyhow!(
            "holdout {} leaves no training cases out of {}",
            s.holdout,
            ids.len()
        )));
    }
    let cases = ids.iter().map(|id| ds.case(id)).collect::<Result<Vec<Case>>>().input()?;
    let (train_set, held) = cases.split_at(ids.len() - s.holdout);
    let model = build_vbnet(&s.model, s.seed).input()?;
    s.hyper.validate(s.model.size_factor()).input()?;
    ensure_parent(out)?;
    let (model, record) = train_with(model, train_set, held, &s.hyper, |e| {
        eprintln!(
            "epoch {} loss {:.4}{}",
            e.epoch,
            e.loss,
            e.holdout_dice.map(|d| format!(" holdout dice {d:.4}")).unwrap_or_default()
        )
    })?;
    save_checkpoint(&model, out)?;
    let mut w = BufWriter::new(File::create(sibling(out, ".train.jsonl"))?);
    record.write_jsonl(&mut w)?;
    w.flush()?;
    for warn in &record.warnings {
        eprintln!("warning: {warn}");
    }
    snapshot(
        &sibling(out, ".config.json"),
        "train",
        &s,
        serde_json::json!({ "data": data, "out": out }),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct SegmentSettings {
    threshold: f32,
}

impl Default for SegmentSettings {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

fn segment(config: Option<&Path>, checkpoint: &Path, volume: &Path, out: &Path, threshold: Option<f32>) -> Result<()> {
    let mut s: SegmentSettings = load_settings(config)?;
    if let Some(t) = threshold {
        s.threshold = t;
    }
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))
        .input()?;
    let vol = load_volume(volume).input()?;
    let mask = model.segment(&vol, s.threshold).input()?;
    ensure_parent(out)?;
    let description = format!(
        "vbquant segment threshold={} iterations={}",
        s.threshold, model.trained_iterations
    );
    write_nifti_with(&mask, out, &WriteOptions { description })?;
    snapshot(
        &sibling(out, ".config.json"),
        "segment",
        &s,
        serde_json::json!({ "checkpoint": checkpoint, "volume": volume, "out": out }),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct QuantifySettings {
    ggo_range: HuRange,
    consolidation_range: HuRange,
    histogram_edges: Vec<f32>,
}

impl Default for QuantifySettings {
    fn default() -> Self {
        Self {
            ggo_range: HuRange::DEFAULT_GGO,
            consolidation_range: HuRange::DEFAULT_CONSOLIDATION,
            histogram_edges: default_histogram_edges(),
        }
    }
}

fn quantify_cmd(
    config: Option<&Path>,
    volume: &Path,
    mask: &Path,
    regions: &Path,
    out: &Path,
    ggo: Option<HuRange>,
    consolidation: Option<HuRange>,
) -> Result<()> {
    let mut s: QuantifySettings = load_settings(config)?;
    s.ggo_range = ggo.unwrap_or(s.ggo_range);
    s.consolidation_range = consolidation.unwrap_or(s.consolidation_range);
    let vol = load_volume(volume).input()?;
    let inf = load_mask(mask).input()?;
    let reg = load_regions(regions).input()?;
    let opts = QuantOptions {
        ggo_range: s.ggo_range,
        consolidation_range: s.consolidation_range,
        histogram_edges: s.histogram_edges.clone(),
    };
    let report = quantify(&vol, &inf, &reg, &opts).input()?;
    ensure_parent(out)?;
    write_json(out, &report)?;
    snapshot(
        &sibling(out, ".config.json"),
        "quantify",
        &s,
        serde_json::json!({ "volume": volume, "mask": mask, "regions": regions, "out": out }),
    )?;
    Ok(())
}

/// Per-case rows: Dice, volumes, then absolute POI error per region.
fn write_rows_csv(path: &Path, rows: &[(String, EvaluationRow)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?);
    let mut header = vec![
        "Case".to_string(),
        "Dice".into(),
        "Reference volume (cm3)".into(),
        "Predicted volume (cm3)".into(),
        "Volume error (cm3)".into(),
    ];
    if let Some((_, r)) = rows.first() {
        header.extend(r.regions.iter().map(|g| format!("POI error ({})", g.name)));
    }
    writeln!(w, "{}", header.iter().map(|h| csv_field(h)).collect::<Vec<_>>().join(","))?;
    for (id, r) in rows {
        let mut rec = vec![
            csv_field(id),
            format!("{:.6}", r.dice),
            format!("{:.6}", r.reference_volume_cm3),
            format!("{:.6}", r.predicted_volume_cm3),
            format!("{:.6}", r.volume_error_cm3),
        ];
        rec.extend(r.regions.iter().map(|g| format!("{:.6}", g.abs_error)));
        writeln!(w, "{}", rec.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn compare_one(reference: &Path, prediction: &Path, volume: &Path, regions: &Path, out: &Path) -> Result<()> {
    let vol = load_volume(volume).input()?;
    let r = load_mask(reference).input()?;
    let p = load_mask(prediction).input()?;
    let reg = load_regions(regions).input()?;
    let row = compare_masks(&r, &p, &vol, &reg).input()?;
    let id = reference
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    ensure_parent(out)?;
    write_rows_csv(out, &[(id, row)])?;
    snapshot(
        &sibling(out, ".config.json"),
        "compare",
        &serde_json::json!({}),
        serde_json::json!({ "reference": reference, "prediction": prediction, "volume": volume, "regions": regions, "out": out }),
    )?;
    Ok(())
}

fn compare_batch(data: &Path, predictions: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::open(data).input()?;
    let mut rows = Vec::new();
    for id in ds.ids() {
        let pred = load_mask(&predictions.join(format!("{id}.nii"))).input()?;
        let row = compare_masks(&ds.infection(&id).input()?, &pred, &ds.volume(&id).input()?, &ds.regions(&id).input()?)
            .with_context(|| format!("case {id}"))
            .input()?;
        rows.push((id, row));
    }
    let agg = aggregate(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>())?;
    ensure_parent(out)?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("cannot create {}", out.display()))?);
    write_aggregate_csv(&agg, &mut w)?;
    w.flush()?;
    write_rows_csv(&sibling(out, ".cases.csv"), &rows)?;
    snapshot(
        &sibling(out, ".config.json"),
        "compare",
        &serde_json::json!({}),
        serde_json::json!({ "data": data, "predictions": predictions, "out": out }),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ServeSettings {
    session_id: String,
    /// Phantom dataset directory.
    data: PathBuf,
    /// Event log and checkpoints.
    state_dir: PathBuf,
    batch_sizes: Vec<usize>,
    /// Last `holdout` manifest cases form the fixed holdout.
    holdout: usize,
    model: VbNetConfig,
    model_seed: u64,
    hyper: Hyperparams,
    epsilon: f64,
    warm_start: bool,
    threshold: f32,
    port: u16,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            session_id: "session".into(),
            data: PathBuf::new(),
            state_dir: PathBuf::new(),
            batch_sizes: Vec::new(),
            holdout: 1,
            model: VbNetConfig::default(),
            model_seed: 0,
            hyper: Hyperparams::default(),
            epsilon: DEFAULT_EPSILON,
            warm_start: true,
            threshold: 0.5,
            port: 8080,
        }
    }
}

/// Resolve `path` against the directory of the settings file.
fn relative_to(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(path)
    }
}

fn hitl_serve(session_path: &Path, seed: Option<u64>, port: Option<u16>, threshold: Option<f32>, flags: &TrainFlags) -> Result<()> {
    let mut s: ServeSettings = load_settings(Some(session_path))?;
    if let Some(seed) = seed {
        s.model_seed = seed;
        s.hyper.seed = seed;
    }
    if let Some(p) = port {
        s.port = p;
    }
    if let Some(t) = threshold {
        s.threshold = t;
    }
    apply_train_flags(&mut s.hyper, flags);
    let data_dir = relative_to(session_path, &s.data);
    let state_dir = relative_to(session_path, &s.state_dir);
    let ds = Dataset::open(&data_dir).input()?;
    let ids = ds.ids();
    if s.holdout == 0 || s.holdout >= ids.len() {
        return Err(invalid(anyhow::anyhow!("holdout must be in 1..{}", ids.len())));
    }
    let (batch_ids, held) = ids.split_at(ids.len() - s.holdout);
    let data = SessionData {
        volumes: batch_ids
            .iter()
            .map(|id| Ok((id.clone(), ds.volume(id)?)))
            .collect::<Result<_>>()
            .input()?,
        holdout: held.iter().map(|id| ds.case(id)).collect::<Result<_>>().input()?,
    };
    let store = SessionStore::new(&state_dir);
    let session = if store.exists() {
        HitlSession::open(store, Arc::new(data)).input()?
    } else {
        let mut cfg = SessionConfig::new(s.session_id.clone(), batch_ids, &s.batch_sizes, held.to_vec()).input()?;
        cfg.model = s.model.clone();
        cfg.model_seed = s.model_seed;
        cfg.hyper = s.hyper.clone();
        cfg.epsilon = s.epsilon;
        cfg.warm_start = s.warm_start;
        cfg.threshold = s.threshold;
        HitlSession::create_persistent(cfg, Arc::new(data), store).input()?
    };
    snapshot(
        &state_dir.join("effective_config.json"),
        "hitl-serve",
        &s,
        serde_json::json!({ "session": session_path, "data": data_dir, "state_dir": state_dir }),
    )?;
    let state = AppState::new();
    let id = session.config().session_id.clone();
    state.insert(session);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", s.port))
            .await
            .with_context(|| format!("cannot bind port {}", s.port))
            .input()?;
        let addr = listener.local_addr()?;
        println!("serving session {id} on http://{addr}");
        std::io::stdout().flush()?;
        serve(listener, state, shutdown_signal()).await?;
        Ok(())
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

#[derive(Serialize)]
struct SimOutput<'a> {
    report: &'a vbquant_hitl::TimeReport,
    iterations: &'a [vbquant_hitl::IterationRecord],
    converged: bool,
}

fn hitl_simulate(session: &Path, seed: Option<u64>, corrector: Option<&Path>, out: &Path, flags: &TrainFlags) -> Result<()> {
    let mut s: SimConfig = load_settings(Some(session))?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    if let Some(c) = corrector {
        s.corrector = load_settings::<CorrectorModel>(Some(c))?;
    }
    apply_train_flags(&mut s.hyper, flags);
    if s.batch_sizes.is_empty() {
        bail!(invalid(anyhow::anyhow!("batch_sizes must not be empty")));
    }
    let (sess, report) = simulate(&s).map_err(|e| match e {
        vbquant_hitl::HitlError::BatchSizes(_) | vbquant_hitl::HitlError::Config(_) | vbquant_hitl::HitlError::Phantom(_) => {
            invalid(e.into())
        }
        e => e.into(),
    })?;
    ensure_parent(out)?;
    write_json(
        out,
        &SimOutput {
            report: &report,
            iterations: sess.iterations(),
            converged: sess.state() == vbquant_hitl::SessionState::Converged,
        },
    )?;
    fs::write(sibling(out, ".table.tsv"), report.to_table())?;
    snapshot(
        &sibling(out, ".config.json"),
        "hitl-simulate",
        &s,
        serde_json::json!({ "session": session, "out": out }),
    )?;
    print!("{}", report.to_table());
    Ok(())
}
