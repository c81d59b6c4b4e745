//! Stage orchestration: each pipeline stage is a subcommand, wired
//! through a single JSON config and a content-hash run manifest so
//! unchanged stages are skipped on rerun.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus_io::{
    open_corpus_stream, open_sft_stream, reservoir_sample, sft_to_text, write_records,
    InstructionPair, SchemaMap, TextRecord,
};
use crate::density::{
    default_bandwidth, kde_batch, BatchMode, DensityField, GridSpec, KdeParams, Point2,
};
use crate::diffset::{materialize_diffset, run_diffset, Criterion, DiffsetConfig};
use crate::embedding::{embed_with_cache, load_embeddings, EmbeddingMatrix, EmbeddingProviderConfig};
use crate::error::{Error, Result};
use crate::merge::{merge_datasets, MergePlan};
use crate::projection::{
    load_points, pca_fit, pca_transform, save_pca_model, ProjectedPoint,
};
use crate::rewrite::{
    rewrite_corpus, save_report, CachedChatClient, FilterPolicy, GenClientConfig, HttpChatClient,
    RewriteReport,
};
use crate::viz::{render_overlay_svg, OverlaySpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewriteStageConfig {
    pub client: GenClientConfig,
    #[serde(default)]
    pub filter: FilterPolicy,
    #[serde(default = "default_parse_retries")]
    pub parse_retries: u32,
}

fn default_parse_retries() -> u32 {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VizConfig {
    #[serde(default = "default_grid_n")]
    pub nx: usize,
    #[serde(default = "default_grid_n")]
    pub ny: usize,
    #[serde(default = "default_padding")]
    pub padding_fraction: f64,
}

fn default_grid_n() -> usize {
    60
}
fn default_padding() -> f64 {
    0.05
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            nx: default_grid_n(),
            ny: default_grid_n(),
            padding_fraction: default_padding(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub corpus_path: PathBuf,
    pub sft_path: PathBuf,
    #[serde(default)]
    pub schema: SchemaMap,
    #[serde(default = "default_reservoir_k")]
    pub reservoir_k: usize,
    #[serde(default)]
    pub seed: u64,
    pub embedding: EmbeddingProviderConfig,
    pub diffset: DiffsetConfig,
    pub rewrite: RewriteStageConfig,
    #[serde(default)]
    pub merge: MergePlan,
    #[serde(default)]
    pub viz: VizConfig,
    pub workdir: PathBuf,
}

fn default_reservoir_k() -> usize {
    10_000
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.embedding.validate()?;
        self.diffset.validate()?;
        if !self.corpus_path.exists() {
            return Err(Error::Config(format!(
                "corpus_path {} does not exist",
                self.corpus_path.display()
            )));
        }
        if !self.sft_path.exists() {
            return Err(Error::Config(format!(
                "sft_path {} does not exist",
                self.sft_path.display()
            )));
        }
        if self.reservoir_k == 0 {
            return Err(Error::Config("reservoir_k must be >= 1".into()));
        }
        Ok(())
    }

    fn file(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sample,
    Embed,
    Project,
    Density,
    Diffset,
    Rewrite,
    Merge,
    Viz,
}

pub const ALL_STAGES: [Stage; 8] = [
    Stage::Sample,
    Stage::Embed,
    Stage::Project,
    Stage::Density,
    Stage::Diffset,
    Stage::Rewrite,
    Stage::Merge,
    Stage::Viz,
];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Embed => "embed",
            Stage::Project => "project",
            Stage::Density => "density",
            Stage::Diffset => "diffset",
            Stage::Rewrite => "rewrite",
            Stage::Merge => "merge",
            Stage::Viz => "viz",
        }
    }

    pub fn from_name(name: &str) -> Result<Stage> {
        ALL_STAGES
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown stage {name:?}")))
    }

    /// Workdir artifacts this stage consumes, with the stage producing
    /// each (for the "run X first" message).
    fn input_files(self, cfg: &PipelineConfig) -> Vec<(PathBuf, Option<Stage>)> {
        match self {
            Stage::Sample => vec![
                (cfg.corpus_path.clone(), None),
                (cfg.sft_path.clone(), None),
            ],
            Stage::Embed => vec![
                (cfg.file("corpus_sample.jsonl"), Some(Stage::Sample)),
                (cfg.file("sft.jsonl"), Some(Stage::Sample)),
            ],
            Stage::Project => vec![
                (cfg.file("corpus_emb.bin"), Some(Stage::Embed)),
                (cfg.file("sft_emb.bin"), Some(Stage::Embed)),
            ],
            Stage::Density => vec![
                (cfg.file("corpus_points.jsonl"), Some(Stage::Project)),
                (cfg.file("sft_points.jsonl"), Some(Stage::Project)),
            ],
            Stage::Diffset => vec![
                (cfg.file("corpus_points.jsonl"), Some(Stage::Project)),
                (cfg.file("sft_points.jsonl"), Some(Stage::Project)),
                (cfg.file("corpus_sample.jsonl"), Some(Stage::Sample)),
            ],
            Stage::Rewrite => vec![(cfg.file("diffset.jsonl"), Some(Stage::Diffset))],
            Stage::Merge => vec![
                (cfg.file("sft.jsonl"), Some(Stage::Sample)),
                (cfg.file("rewritten.jsonl"), Some(Stage::Rewrite)),
            ],
            Stage::Viz => vec![
                (cfg.file("corpus_density.json"), Some(Stage::Density)),
                (cfg.file("corpus_density.field"), Some(Stage::Density)),
                (cfg.file("sft_density.json"), Some(Stage::Density)),
                (cfg.file("sft_density.field"), Some(Stage::Density)),
            ],
        }
    }

    fn output_files(self, cfg: &PipelineConfig) -> Vec<PathBuf> {
        match self {
            Stage::Sample => vec![cfg.file("corpus_sample.jsonl"), cfg.file("sft.jsonl")],
            Stage::Embed => vec![cfg.file("corpus_emb.bin"), cfg.file("sft_emb.bin")],
            Stage::Project => vec![
                cfg.file("pca_model.json"),
                cfg.file("corpus_points.jsonl"),
                cfg.file("sft_points.jsonl"),
            ],
            Stage::Density => vec![
                cfg.file("corpus_density.json"),
                cfg.file("corpus_density.field"),
                cfg.file("sft_density.json"),
                cfg.file("sft_density.field"),
            ],
            Stage::Diffset => vec![cfg.file("verdicts.jsonl"), cfg.file("diffset.jsonl")],
            Stage::Rewrite => vec![cfg.file("rewritten.jsonl"), cfg.file("rewrite_report.json")],
            Stage::Merge => vec![cfg.file("combined.jsonl"), cfg.file("merge_manifest.json")],
            Stage::Viz => vec![cfg.file("overlay.svg")],
        }
    }

    /// The config subset whose change invalidates this stage.
    fn config_fingerprint(self, cfg: &PipelineConfig) -> serde_json::Value {
        match self {
            Stage::Sample => serde_json::json!({
                "schema": cfg.schema,
                "reservoir_k": cfg.reservoir_k,
                "seed": cfg.seed,
            }),
            Stage::Embed => serde_json::json!({"embedding": cfg.embedding}),
            Stage::Project => serde_json::json!({}),
            Stage::Density => serde_json::json!({"kde": cfg.diffset.kde, "viz": cfg.viz}),
            Stage::Diffset => serde_json::json!({"diffset": cfg.diffset}),
            Stage::Rewrite => serde_json::json!({
                "model": cfg.rewrite.client.model_name,
                "temperature": cfg.rewrite.client.temperature,
                "filter": cfg.rewrite.filter,
                "parse_retries": cfg.rewrite.parse_retries,
            }),
            Stage::Merge => serde_json::json!({"merge": cfg.merge}),
            Stage::Viz => serde_json::json!({"viz": cfg.viz}),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageEntry {
    pub input_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<PathBuf>,
    pub completed_at: String,
    pub tool_version: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    fn path(cfg: &PipelineConfig) -> PathBuf {
        cfg.file("manifest.json")
    }

    pub fn load(cfg: &PipelineConfig) -> RunManifest {
        std::fs::read_to_string(Self::path(cfg))
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default()
    }

    fn save(&self, cfg: &PipelineConfig) -> Result<()> {
        let path = Self::path(cfg);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hashes of everything that feeds a stage: input file contents plus the
/// stage's config subset.
fn stage_input_hashes(stage: Stage, cfg: &PipelineConfig) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for (path, producer) in stage.input_files(cfg) {
        if !path.exists() {
            return Err(match producer {
                Some(p) => Error::MissingStage {
                    stage: p.name().to_string(),
                },
                None => Error::Config(format!("input file {} does not exist", path.display())),
            });
        }
        hashes.insert(format!("file:{}", path.display()), sha256_file(&path)?);
    }
    hashes.insert(
        "config".into(),
        sha256_hex(serde_json::to_string(&stage.config_fingerprint(cfg))?.as_bytes()),
    );
    Ok(hashes)
}

/// One pipeline instance per workdir; the lock file is removed on drop.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<WorkdirLock> {
        std::fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "workdir is locked by another pipeline instance ({})",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn read_corpus_file(path: &Path, schema: &SchemaMap) -> Result<Vec<TextRecord>> {
    open_corpus_stream(path, schema)?.collect()
}

fn read_sft_file(path: &Path, schema: &SchemaMap) -> Result<Vec<InstructionPair>> {
    open_sft_stream(path, schema)?.collect()
}

fn stage_sample(cfg: &PipelineConfig) -> Result<()> {
    let stream = open_corpus_stream(&cfg.corpus_path, &cfg.schema)?;
    let sample = reservoir_sample(stream, cfg.reservoir_k, cfg.seed)?;
    log::info!("sampled {} corpus records", sample.len());
    write_records(&sample, &cfg.file("corpus_sample.jsonl"))?;
    let sft = read_sft_file(&cfg.sft_path, &cfg.schema)?;
    log::info!("normalized {} SFT pairs", sft.len());
    write_records(&sft, &cfg.file("sft.jsonl"))?;
    Ok(())
}

fn stage_embed(cfg: &PipelineConfig) -> Result<()> {
    let corpus = read_corpus_file(&cfg.file("corpus_sample.jsonl"), &SchemaMap::default())?;
    let (ids, texts): (Vec<String>, Vec<String>) =
        corpus.iter().map(|r| (r.id.clone(), r.text.clone())).unzip();
    embed_with_cache(&ids, &texts, &cfg.embedding, &cfg.file("corpus_emb.bin"))?;

    let sft = read_sft_file(&cfg.file("sft.jsonl"), &SchemaMap::default())?;
    let mut ids = Vec::with_capacity(sft.len());
    let mut texts = Vec::with_capacity(sft.len());
    for pair in &sft {
        ids.push(pair.id.clone());
        texts.push(sft_to_text(pair)?);
    }
    embed_with_cache(&ids, &texts, &cfg.embedding, &cfg.file("sft_emb.bin"))?;
    Ok(())
}

/// Fit the projection on the concatenation of both embedding sets so the
/// two densities share a basis, then transform each separately.
fn stage_project(cfg: &PipelineConfig) -> Result<()> {
    let corpus = load_embeddings(&cfg.file("corpus_emb.bin"))?;
    let sft = load_embeddings(&cfg.file("sft_emb.bin"))?;
    if corpus.dim != sft.dim {
        return Err(Error::DimensionMismatch {
            expected: corpus.dim,
            got: sft.dim,
        });
    }
    let union = EmbeddingMatrix {
        ids: corpus
            .ids
            .iter()
            .map(|id| format!("corpus:{id}"))
            .chain(sft.ids.iter().map(|id| format!("sft:{id}")))
            .collect(),
        dim: corpus.dim,
        data: corpus.data.iter().chain(&sft.data).copied().collect(),
        model_tag: corpus.model_tag.clone(),
    };
    let model = pca_fit(&union)?;
    save_pca_model(&model, &cfg.file("pca_model.json"))?;
    write_records(&pca_transform(&model, &corpus)?, &cfg.file("corpus_points.jsonl"))?;
    write_records(&pca_transform(&model, &sft)?, &cfg.file("sft_points.jsonl"))?;
    Ok(())
}

fn to_point2(points: &[ProjectedPoint]) -> Vec<Point2> {
    points.iter().map(|p| [p.x as f64, p.y as f64]).collect()
}

fn resolve_kde_params(cfg: &PipelineConfig, pre: &[Point2], sft: &[Point2]) -> Result<KdeParams> {
    match cfg.diffset.kde {
        Some(p) => Ok(p),
        None => {
            let union: Vec<Point2> = pre.iter().chain(sft).copied().collect();
            default_bandwidth(&union)
        }
    }
}

/// Evaluate both density fields on one shared grid (the padded bounding
/// box of the union), so the overlay stage can stack them.
fn stage_density(cfg: &PipelineConfig) -> Result<()> {
    let pre = to_point2(&load_points(&cfg.file("corpus_points.jsonl"))?);
    let sft = to_point2(&load_points(&cfg.file("sft_points.jsonl"))?);
    if pre.is_empty() || sft.is_empty() {
        return Err(Error::Precondition("no projected points to evaluate".into()));
    }
    let params = resolve_kde_params(cfg, &pre, &sft)?;
    let union: Vec<Point2> = pre.iter().chain(&sft).copied().collect();
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for p in &union {
        x_min = x_min.min(p[0]);
        x_max = x_max.max(p[0]);
        y_min = y_min.min(p[1]);
        y_max = y_max.max(p[1]);
    }
    let expand = |min: &mut f64, max: &mut f64| {
        if *max - *min <= 0.0 {
            *min -= 0.5;
            *max += 0.5;
        } else {
            let pad = (*max - *min) * cfg.viz.padding_fraction;
            *min -= pad;
            *max += pad;
        }
    };
    expand(&mut x_min, &mut x_max);
    expand(&mut y_min, &mut y_max);
    let grid = GridSpec {
        x_min,
        x_max,
        y_min,
        y_max,
        nx: cfg.viz.nx,
        ny: cfg.viz.ny,
    };
    let nodes: Vec<Point2> = (0..grid.nx * grid.ny)
        .map(|i| grid.node(i % grid.nx, i / grid.nx))
        .collect();
    for (points, name, tag) in [(&pre, "corpus_density.json", "corpus"), (&sft, "sft_density.json", "sft")] {
        let values = kde_batch(&nodes, points, &params, BatchMode::Truncated)?;
        let field = DensityField {
            params,
            grid,
            values: values.into_iter().map(|v| v as f32).collect(),
            source_tag: tag.to_string(),
        };
        crate::density::save_density_field(&field, &cfg.file(name))?;
    }
    Ok(())
}

fn stage_diffset(cfg: &PipelineConfig) -> Result<()> {
    let pre = load_points(&cfg.file("corpus_points.jsonl"))?;
    let sft = load_points(&cfg.file("sft_points.jsonl"))?;
    let mut diff_cfg = cfg.diffset.clone();
    if diff_cfg.kde.is_none() {
        // pin the same auto bandwidth the density stage used
        diff_cfg.kde = Some(resolve_kde_params(cfg, &to_point2(&pre), &to_point2(&sft))?);
    }
    let verdicts = run_diffset(&pre, &sft, &diff_cfg)?;
    let corpus = read_corpus_file(&cfg.file("corpus_sample.jsonl"), &SchemaMap::default())?;
    let selected = materialize_diffset(&verdicts, &corpus, Some(&cfg.file("verdicts.jsonl")))?;
    log::info!(
        "difference set: {} of {} corpus records selected",
        selected.len(),
        corpus.len()
    );
    write_records(&selected, &cfg.file("diffset.jsonl"))?;
    Ok(())
}

fn stage_rewrite(cfg: &PipelineConfig) -> Result<()> {
    let diff = read_corpus_file(&cfg.file("diffset.jsonl"), &SchemaMap::default())?;
    if diff.is_empty() {
        log::warn!("difference set is empty; writing empty rewritten set");
        write_records::<InstructionPair>(&[], &cfg.file("rewritten.jsonl"))?;
        save_report(&RewriteReport::default(), &cfg.file("rewrite_report.json"))?;
        return Ok(());
    }
    let http = HttpChatClient::new(cfg.rewrite.client.clone())?;
    let client = CachedChatClient::new(
        http,
        cfg.file("rewrite_cache"),
        cfg.rewrite.client.model_name.clone(),
    )?;
    let (pairs, report) =
        rewrite_corpus(&diff, &client, &cfg.rewrite.filter, cfg.rewrite.parse_retries)?;
    log::info!(
        "rewrote {} records into {} pairs ({} cache hits, {} misses)",
        report.records,
        pairs.len(),
        client.hits(),
        client.misses()
    );
    write_records(&pairs, &cfg.file("rewritten.jsonl"))?;
    save_report(&report, &cfg.file("rewrite_report.json"))?;
    Ok(())
}

fn stage_merge(cfg: &PipelineConfig) -> Result<()> {
    let sft = read_sft_file(&cfg.file("sft.jsonl"), &SchemaMap::default())?;
    let rewritten = read_sft_file(&cfg.file("rewritten.jsonl"), &SchemaMap::default())?;
    let (combined, manifest) = merge_datasets(&sft, &rewritten, &cfg.merge)?;
    write_records(&combined, &cfg.file("combined.jsonl"))?;
    let path = cfg.file("merge_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    log::info!(
        "merged {} SFT + {} rewritten pairs (ratio achieved {:.4})",
        manifest.sft_count,
        manifest.rewritten_included,
        manifest.ratio_achieved
    );
    Ok(())
}

fn stage_viz(cfg: &PipelineConfig) -> Result<()> {
    let base = crate::density::load_density_field(&cfg.file("corpus_density.json"))?;
    let overlay = crate::density::load_density_field(&cfg.file("sft_density.json"))?;
    let spec = OverlaySpec::new(base, overlay, "corpus (red) vs SFT (blue)");
    render_overlay_svg(&spec, &cfg.file("overlay.svg"))
}

fn execute(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    match stage {
        Stage::Sample => stage_sample(cfg),
        Stage::Embed => stage_embed(cfg),
        Stage::Project => stage_project(cfg),
        Stage::Density => stage_density(cfg),
        Stage::Diffset => stage_diffset(cfg),
        Stage::Rewrite => stage_rewrite(cfg),
        Stage::Merge => stage_merge(cfg),
        Stage::Viz => stage_viz(cfg),
    }
}

/// Run one stage, skipping it when the manifest shows identical input
/// hashes and the outputs still exist. Returns whether the stage ran.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig, force: bool) -> Result<bool> {
    std::fs::create_dir_all(&cfg.workdir).map_err(|e| Error::io(&cfg.workdir, e))?;
    let mut manifest = RunManifest::load(cfg);
    let input_hashes = stage_input_hashes(stage, cfg)?;
    let outputs = stage.output_files(cfg);
    if !force {
        if let Some(entry) = manifest.stages.get(stage.name()) {
            if entry.input_hashes == input_hashes && outputs.iter().all(|p| p.exists()) {
                log::info!("stage {}: up to date, skipping", stage.name());
                return Ok(false);
            }
        }
    }
    log::info!("stage {}: running", stage.name());
    execute(stage, cfg)?;
    manifest.stages.insert(
        stage.name().to_string(),
        StageEntry {
            input_hashes,
            output_paths: outputs,
            completed_at: chrono::Utc::now().to_rfc3339(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    );
    manifest.save(cfg)?;
    Ok(true)
}

/// Run all stages in order, resuming at the first stale one.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<()> {
    for stage in ALL_STAGES {
        run_stage(stage, cfg, force)?;
    }
    Ok(())
}

#[derive(Parser)]
#[command(name = "gapalign", version, about = "Align an SFT dataset with its pre-training corpus")]
pub struct Cli {
    /// Pipeline config file (JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the configured workdir
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,
    /// Rerun stages even when inputs are unchanged
    #[arg(long, global = true)]
    pub force: bool,
    /// Override the sampling seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the difference-set threshold tau
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Override the difference-set criterion
    #[arg(long, global = true, value_parser = ["threshold", "ratio"])]
    pub criterion: Option<String>,
    /// Override the rewritten-to-SFT merge ratio
    #[arg(long, global = true)]
    pub ratio: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Reservoir-sample the corpus and normalize the SFT dataset
    Sample,
    /// Embed sampled corpus and SFT texts
    Embed,
    /// Fit the shared 2D projection and project both datasets
    Project,
    /// Evaluate both density fields on a shared grid
    Density,
    /// Extract the difference set
    Diffset,
    /// Rewrite difference-set records into instruction pairs
    Rewrite,
    /// Merge rewritten pairs into the SFT dataset
    Merge,
    /// Render the density overlay figure
    Viz,
    /// Run every stage in order, resuming at the first stale one
    Run {
        /// Run only the named stage
        #[arg(long)]
        stage: Option<String>,
    },
}

fn apply_overrides(cfg: &mut PipelineConfig, cli: &Cli) {
    if let Some(workdir) = &cli.workdir {
        cfg.workdir = workdir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(tau) = cli.tau {
        cfg.diffset.tau = tau;
    }
    if let Some(criterion) = &cli.criterion {
        cfg.diffset.criterion = match criterion.as_str() {
            "ratio" => Criterion::Ratio,
            _ => Criterion::Threshold,
        };
    }
    if let Some(ratio) = cli.ratio {
        cfg.merge.ratio = ratio;
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::MissingStage { .. }
        | Error::Precondition(_)
        | Error::SchemaMismatch { .. }
        | Error::InvalidRecord(_)
        | Error::Io { .. } => 1,
        _ => 2,
    }
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => PathBuf::from("gapalign.json"),
    };
    let mut cfg = match PipelineConfig::load(&config_path) {
        Ok(cfg) => cfg,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            return 1;
        }
    };
    apply_overrides(&mut cfg, &cli);
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 1;
    }

    let run = || -> Result<()> {
        let _lock = WorkdirLock::acquire(&cfg.workdir)?;
        match &cli.command {
            Command::Sample => run_stage(Stage::Sample, &cfg, cli.force).map(|_| ()),
            Command::Embed => run_stage(Stage::Embed, &cfg, cli.force).map(|_| ()),
            Command::Project => run_stage(Stage::Project, &cfg, cli.force).map(|_| ()),
            Command::Density => run_stage(Stage::Density, &cfg, cli.force).map(|_| ()),
            Command::Diffset => run_stage(Stage::Diffset, &cfg, cli.force).map(|_| ()),
            Command::Rewrite => run_stage(Stage::Rewrite, &cfg, cli.force).map(|_| ()),
            Command::Merge => run_stage(Stage::Merge, &cfg, cli.force).map(|_| ()),
            Command::Viz => run_stage(Stage::Viz, &cfg, cli.force).map(|_| ()),
            Command::Run { stage: Some(name) } => {
                run_stage(Stage::from_name(name)?, &cfg, cli.force).map(|_| ())
            }
            Command::Run { stage: None } => run_all(&cfg, cli.force),
        }
    };
    match run() {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for stage in ALL_STAGES {
            assert_eq!(Stage::from_name(stage.name()).unwrap(), stage);
        }
        assert!(Stage::from_name("bogus").is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkdirLock::acquire(dir.path()).unwrap();
        assert!(WorkdirLock::acquire(dir.path()).is_err());
        drop(lock);
        WorkdirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        let sft = dir.path().join("sft.jsonl");
        std::fs::write(&corpus, "{\"text\":\"a\"}\n").unwrap();
        std::fs::write(&sft, "{\"instruction\":\"q\",\"response\":\"a\"}\n").unwrap();
        let cfg = PipelineConfig {
            corpus_path: corpus,
            sft_path: sft,
            schema: SchemaMap::default(),
            reservoir_k: 10,
            seed: 0,
            embedding: crate::embedding::EmbeddingProviderConfig::mock(8),
            diffset: DiffsetConfig::threshold(0.7),
            rewrite: RewriteStageConfig {
                client: GenClientConfig {
                    endpoint_url: "http://localhost:1/v1/chat/completions".into(),
                    model_name: "m".into(),
                    temperature: 0.0,
                    max_tokens: 128,
                    max_retries: 0,
                    timeout_secs: 1,
                    parallel_requests: 1,
                    api_key_env_var: "NONE".into(),
                },
                filter: FilterPolicy::default(),
                parse_retries: 0,
            },
            merge: MergePlan::default(),
            viz: VizConfig::default(),
            workdir: dir.path().join("work"),
        };
        let err = run_stage(Stage::Diffset, &cfg, false).unwrap_err();
        match err {
            Error::MissingStage { stage } => assert_eq!(stage, "project"),
            other => panic!("unexpected error {other}"),
        }
    }
}
