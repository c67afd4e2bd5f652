//! Command implementations behind the `sop` binary.
//!
//! Each command is a plain function taking an argument struct so that the
//! binary, the integration tests and the acceptance harness share one path.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sop::data::{generate_synthetic, load_dataset, save_dataset, DataError, ImageDataset};
use sop::evalkit::{
    append_result, collapse_metrics, extract_features, knn_eval, knn_sweep, linear_probe,
    write_embeddings, CollapseMetrics, EvalError, SweepResult, TAU_KNN,
};
use sop::model::GlobalFeature;
use sop::trainer::{load_checkpoint, read_metrics, run, TrainConfig, TrainError, TrainState};
use thiserror::Error;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const DEFAULT_MAX_CELLS: usize = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("grid has {cells} cells, above the cap of {cap}")]
    GridTooLarge { cells: usize, cap: usize },
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::ConfigInvalid { field, msg } => CliError::Config { field, msg },
            other => CliError::Train(other),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Eval(e)
    }
}

impl CliError {
    /// 2 configuration, 3 runtime or numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::GridTooLarge { .. } | CliError::Usage(_) => 2,
            CliError::Data(DataError::Invalid(_)) => 2,
            CliError::Train(TrainError::Io(_) | TrainError::CheckpointCorrupt(_))
            | CliError::Data(_)
            | CliError::Eval(EvalError::Io(_) | EvalError::Parse { .. })
            | CliError::Io { .. } => 4,
            CliError::Train(_) | CliError::Eval(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Provenance record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config_hash: String,
    pub out_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifact_version: String,
}

impl RunManifest {
    fn start(
        command: &str,
        config_path: Option<&Path>,
        config: &TrainConfig,
        out_dir: &Path,
    ) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            config_hash: config.hash(),
            out_dir: out_dir.to_path_buf(),
            started_unix: unix_now(),
            finished_unix: 0,
            artifact_version: ARTIFACT_VERSION.into(),
        }
    }

    fn finish(mut self) -> Result<Self, CliError> {
        self.finished_unix = unix_now();
        let path = self.out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(self)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Training allocates and frees multi-megabyte buffers every step; glibc
/// would otherwise hand each one back to the kernel and fault it in again.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
pub fn keep_freed_memory() {
    // SAFETY: mallopt only adjusts allocator thresholds
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
pub fn keep_freed_memory() {}

pub fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(TrainConfig::from_json(&text)?)
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub noise: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn gen_data(args: &GenDataArgs) -> Result<ImageDataset, CliError> {
    if args.classes < 2 {
        return Err(CliError::Usage(format!(
            "--classes must be at least 2, got {}",
            args.classes
        )));
    }
    let ds = generate_synthetic(
        args.classes,
        args.per_class,
        args.size,
        args.noise,
        args.seed,
    )?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_dataset(&ds, &args.out)?;
    log::info!(
        "wrote {} images to {} (sha256 {})",
        ds.n,
        args.out.display(),
        ds.digest()
    );
    Ok(ds)
}

/// Train/test partition shared by `train`, `eval` and `ablate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitArgs {
    pub frac: f64,
    pub seed: u64,
}

impl Default for SplitArgs {
    fn default() -> Self {
        Self { frac: 0.8, seed: 0 }
    }
}

impl SplitArgs {
    fn apply(&self, ds: &ImageDataset) -> Result<(ImageDataset, ImageDataset), CliError> {
        if !(self.frac > 0.0 && self.frac < 1.0) {
            return Err(CliError::Usage(format!(
                "--split-frac must be in (0, 1), got {}",
                self.frac
            )));
        }
        Ok(ds.split(self.frac, self.seed))
    }
}

#[derive(Clone, Debug)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub split: SplitArgs,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps_run: usize,
    pub manifest: RunManifest,
}

pub fn train(args: &TrainArgs) -> Result<TrainOutcome, CliError> {
    let config = load_config(&args.config)?;
    config.validate()?;
    let ds = load_dataset(&args.data)?;
    let (train_ds, _) = args.split.apply(&ds)?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let manifest = RunManifest::start("train", Some(&args.config), &config, &args.out);
    let summary = run(&config, &train_ds, &args.out, args.resume.as_deref())?;
    Ok(TrainOutcome {
        final_checkpoint: summary.final_checkpoint,
        steps_run: summary.steps_run,
        manifest: manifest.finish()?,
    })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub split: SplitArgs,
    pub ks: Vec<usize>,
    pub feature: GlobalFeature,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub results: Option<PathBuf>,
    pub tag: Option<String>,
    pub export: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub sweep: SweepResult,
    pub probe_accuracy: f64,
    pub collapse: CollapseMetrics,
    pub train_size: usize,
    pub test_size: usize,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, acc) in &self.sweep.per_k {
            s.push_str(&format!("knn k={k}: {acc:.4}\n"));
        }
        s.push_str(&format!(
            "best knn: {:.4} (k={})\nlinear probe: {:.4}\neffective rank: {:.3}\nmean pairwise cos: {:.4}\nper-dim std: {:.5}\n",
            self.sweep.best_accuracy,
            self.sweep.best_k,
            self.probe_accuracy,
            self.collapse.effective_rank,
            self.collapse.mean_pairwise_cos,
            self.collapse.per_dim_std_mean
        ));
        s
    }
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let state: TrainState<f32> = load_checkpoint(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    let (train_ds, test_ds) = args.split.apply(&ds)?;
    let train = extract_features(&state.teacher, &train_ds, args.feature)?;
    let test = extract_features(&state.teacher, &test_ds, args.feature)?;
    let sweep = knn_sweep(&train, &test, &args.ks, TAU_KNN)?;
    let probe_accuracy = linear_probe(&train, &test, args.probe_epochs, args.probe_lr)?;
    let collapse = collapse_metrics(&test.features)?;
    if let Some(path) = &args.results {
        let tag = args
            .tag
            .clone()
            .unwrap_or_else(|| args.ckpt.display().to_string().replace(',', "_"));
        for &(k, acc) in &sweep.per_k {
            append_result(path, &tag, k, acc)?;
        }
    }
    if let Some(path) = &args.export {
        write_embeddings(&test, path)?;
    }
    Ok(EvalReport {
        sweep,
        probe_accuracy,
        collapse,
        train_size: train.len(),
        test_size: test.len(),
    })
}

#[derive(Clone, Debug)]
pub struct AblateArgs {
    pub grid: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub base_config: Option<PathBuf>,
    pub max_cells: usize,
    pub knn_k: usize,
    pub split: SplitArgs,
    /// Where cell runs live; defaults to `out/runs`. Sweeps sharing it
    /// reuse each other's finished cells.
    pub runs_dir: Option<PathBuf>,
}

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub params: BTreeMap<String, Value>,
    pub config_hash: String,
    /// `ok`, or `non_finite` when training aborted on a non-finite loss.
    pub status: String,
    pub knn_accuracy: Option<f64>,
    pub effective_rank: Option<f64>,
    pub min_teacher_entropy: Option<f64>,
    pub max_teacher_entropy: Option<f64>,
    pub runtime_secs: f64,
    pub run_dir: PathBuf,
}

impl CellResult {
    pub fn finished(&self) -> bool {
        self.status == "ok"
    }
}

/// Parses a grid file: an object mapping parameter names (dotted for nested
/// fields such as `encoder.depth`) to lists of values.
pub fn parse_grid(text: &str) -> Result<Vec<(String, Vec<Value>)>, CliError> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| CliError::Usage(format!("grid: {e}")))?;
    let Value::Object(map) = value else {
        return Err(CliError::Usage("grid must be a JSON object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::Array(vs) if !vs.is_empty() => Ok((k, vs)),
            _ => Err(CliError::Config {
                field: k,
                msg: "grid values must be a non-empty list".into(),
            }),
        })
        .collect()
}

/// Every combination of the grid values, last parameter varying fastest.
pub fn grid_cells(grid: &[(String, Vec<Value>)]) -> Vec<BTreeMap<String, Value>> {
    let mut cells = vec![BTreeMap::new()];
    for (name, values) in grid {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.insert(name.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    cells
}

fn grid_size(grid: &[(String, Vec<Value>)]) -> usize {
    grid.iter().map(|(_, v)| v.len()).product()
}

/// Applies `params` on top of `base`.
pub fn apply_params(
    base: &TrainConfig,
    params: &BTreeMap<String, Value>,
) -> Result<TrainConfig, CliError> {
    let mut doc: Value = serde_json::from_str(&base.to_json()).expect("config round-trips");
    for (name, value) in params {
        let mut node = &mut doc;
        let parts: Vec<&str> = name.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .get_mut(*part)
                .filter(|n| n.is_object())
                .ok_or_else(|| CliError::Config {
                    field: name.clone(),
                    msg: "no such nested field".into(),
                })?;
        }
        let obj = node.as_object_mut().expect("checked above");
        obj.insert(parts[parts.len() - 1].to_string(), value.clone());
    }
    let cfg = TrainConfig::from_json(&doc.to_string())?;
    cfg.validate()?;
    Ok(cfg)
}

fn cell_dir(runs_dir: &Path, config: &TrainConfig) -> PathBuf {
    runs_dir.join(&config.hash()[..16])
}

fn entropy_range(metrics: &Path) -> Result<(f64, f64), CliError> {
    let rows = read_metrics(metrics)?;
    let lo = rows
        .iter()
        .map(|r| r.teacher_entropy)
        .fold(f64::INFINITY, f64::min);
    let hi = rows
        .iter()
        .map(|r| r.teacher_entropy)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((lo, hi))
}

/// Trains and scores one configuration under `runs_dir`. A result already
/// stored there for the same config hash is reused.
pub fn run_cell(
    config: &TrainConfig,
    params: BTreeMap<String, Value>,
    train_ds: &ImageDataset,
    test_ds: &ImageDataset,
    runs_dir: &Path,
    knn_k: usize,
) -> Result<CellResult, CliError> {
    let dir = cell_dir(runs_dir, config);
    let result_path = dir.join("result.json");
    if let Ok(text) = fs::read_to_string(&result_path) {
        if let Ok(mut prev) = serde_json::from_str::<CellResult>(&text) {
            if prev.config_hash == config.hash() {
                log::info!("reusing {}", dir.display());
                prev.params = params;
                return Ok(prev);
            }
        }
    }
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let manifest = RunManifest::start("ablate-cell", None, config, &dir);
    let started = Instant::now();
    let mut result = CellResult {
        params,
        config_hash: config.hash(),
        status: "ok".into(),
        knn_accuracy: None,
        effective_rank: None,
        min_teacher_entropy: None,
        max_teacher_entropy: None,
        runtime_secs: 0.0,
        run_dir: dir.clone(),
    };
    match run(config, train_ds, &dir, None) {
        Ok(summary) => {
            let state: TrainState<f32> = load_checkpoint(&summary.final_checkpoint)?;
            let train = extract_features(&state.teacher, train_ds, GlobalFeature::Cls)?;
            let test = extract_features(&state.teacher, test_ds, GlobalFeature::Cls)?;
            result.knn_accuracy = Some(knn_eval(&train, &test, knn_k, TAU_KNN)?);
            result.effective_rank = Some(collapse_metrics(&test.features)?.effective_rank);
            let (lo, hi) = entropy_range(&summary.metrics_path)?;
            result.min_teacher_entropy = Some(lo);
            result.max_teacher_entropy = Some(hi);
        }
        Err(TrainError::NonFiniteLoss { step, diagnostic }) => {
            log::warn!("cell aborted at step {step}: {diagnostic}");
            result.status = "non_finite".into();
        }
        Err(e) => return Err(e.into()),
    }
    result.runtime_secs = started.elapsed().as_secs_f64();
    manifest.finish()?;
    let text = serde_json::to_string_pretty(&result).expect("result serializes");
    fs::write(&result_path, text).map_err(io_err(&result_path))?;
    Ok(result)
}

fn csv_field(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    if s.contains([',', '"']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Runs every grid cell in order and writes `summary.csv` under `out`.
pub fn ablate(args: &AblateArgs) -> Result<Vec<CellResult>, CliError> {
    let text = fs::read_to_string(&args.grid).map_err(io_err(&args.grid))?;
    let grid = parse_grid(&text)?;
    let cells = grid_size(&grid);
    if cells > args.max_cells {
        return Err(CliError::GridTooLarge {
            cells,
            cap: args.max_cells,
        });
    }
    let base = match &args.base_config {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let configs: Vec<(BTreeMap<String, Value>, TrainConfig)> = grid_cells(&grid)
        .into_iter()
        .map(|p| apply_params(&base, &p).map(|c| (p, c)))
        .collect::<Result<_, _>>()?;
    let ds = load_dataset(&args.data)?;
    let (train_ds, test_ds) = args.split.apply(&ds)?;
    if args.knn_k == 0 || args.knn_k > train_ds.n {
        return Err(CliError::Eval(EvalError::NoValidK {
            ks: vec![args.knn_k],
            n: train_ds.n,
        }));
    }
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    let manifest = RunManifest::start("ablate", args.base_config.as_deref(), &base, &args.out);

    let runs_dir = args
        .runs_dir
        .clone()
        .unwrap_or_else(|| args.out.join("runs"));
    let mut results = Vec::new();
    for (i, (params, config)) in configs.into_iter().enumerate() {
        log::info!(
            "cell {}/{}: {}",
            i + 1,
            cells,
            serde_json::to_string(&params).unwrap_or_default()
        );
        results.push(run_cell(
            &config, params, &train_ds, &test_ds, &runs_dir, args.knn_k,
        )?);
    }

    let summary = args.out.join("summary.csv");
    let mut f = fs::File::create(&summary).map_err(io_err(&summary))?;
    let names: Vec<&str> = grid.iter().map(|(n, _)| n.as_str()).collect();
    let mut header: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    header.extend(
        ["status", "knn_accuracy", "effective_rank", "runtime_secs"]
            .iter()
            .map(|s| s.to_string()),
    );
    writeln!(f, "{}", header.join(",")).map_err(io_err(&summary))?;
    for r in &results {
        let mut row: Vec<String> = names.iter().map(|n| csv_field(&r.params[*n])).collect();
        row.push(r.status.clone());
        row.push(opt(r.knn_accuracy));
        row.push(opt(r.effective_rank));
        row.push(format!("{:.1}", r.runtime_secs));
        writeln!(f, "{}", row.join(",")).map_err(io_err(&summary))?;
    }
    manifest.finish()?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn cartesian_product_order_and_size() {
        let grid = parse_grid(r#"{"k": [1, 8], "seed": [0, 1, 2]}"#).unwrap();
        let cells = grid_cells(&grid);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0]["k"], json!(1));
        assert_eq!(cells[1]["seed"], json!(1));
        assert_eq!(cells[5]["k"], json!(8));
        assert_eq!(
            grid_cells(&parse_grid("{}").unwrap()),
            vec![BTreeMap::new()]
        );
    }

    #[test]
    fn params_reach_nested_and_tagged_fields() {
        let mut p = BTreeMap::new();
        p.insert("encoder.depth".to_string(), json!(3));
        p.insert("cls_mode".to_string(), json!({"kind": "one_hot"}));
        let cfg = apply_params(&TrainConfig::default(), &p).unwrap();
        assert_eq!(cfg.encoder.depth, 3);
        assert_eq!(cfg.cls_mode, sop::memory::ContributionMode::OneHot);

        let mut bad = BTreeMap::new();
        bad.insert("kk".to_string(), json!(3));
        match apply_params(&TrainConfig::default(), &bad) {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "kk"),
            other => panic!("{other:?}"),
        }
        let mut bad = BTreeMap::new();
        bad.insert("nope.depth".to_string(), json!(3));
        assert!(matches!(
            apply_params(&TrainConfig::default(), &bad),
            Err(CliError::Config { .. })
        ));
    }

    #[test]
    fn exit_codes() {
        let cfg = CliError::from(TrainError::ConfigInvalid {
            field: "k".into(),
            msg: "x".into(),
        });
        assert_eq!(cfg.exit_code(), 2);
        let nan = CliError::from(TrainError::NonFiniteLoss {
            step: 3,
            diagnostic: String::new(),
        });
        assert_eq!(nan.exit_code(), 3);
        let io = CliError::from(TrainError::Io(std::io::Error::other("x")));
        assert_eq!(io.exit_code(), 4);
        assert_eq!(CliError::GridTooLarge { cells: 65, cap: 64 }.exit_code(), 2);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(
            csv_field(&json!({"kind": "one_hot"})),
            "\"{\"\"kind\"\":\"\"one_hot\"\"}\""
        );
        assert_eq!(csv_field(&json!("block")), "block");
        assert_eq!(csv_field(&json!(0.5)), "0.5");
    }
}
