//! Command-line entry point and the staged pipeline behind it.
//!
//! Stages communicate through files in the output directory, so expensive
//! inference is never repeated when sweeping tau or coreset combinations:
//!
//! ```text
//! clipper categorize   -> partition.json (pk/wk), manifest.json
//! clipper probe        -> partition.json (counts, icl/w2c/ww), probes.jsonl
//! clipper select       -> coresets/<combo>.jsonl
//! clipper mix          -> coresets/mix-<p>-<n>.jsonl
//! clipper ppl          -> ppl.csv
//! clipper report       -> report/{report.json, histograms.json, overlay.svg}
//! clipper run          -> all of the above
//! ```
//!
//! Every flag overrides the corresponding config-file key; flags win.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::backend::{InferenceCache, ModelBackend};
use crate::config::{JudgeMethodConfig, RunConfig};
use crate::corpus::{load_jsonl, write_jsonl, Dataset};
use crate::error::Error;
use crate::judge::Judge;
use crate::manifest::{
    PartitionSummary, PplSection, RunLog, SelectionManifest, StageLog,
};
use crate::perplexity::{compute_ppl, read_ppl_csv, write_ppl_csv, PplRecord};
use crate::report::{build_report, size_table, write_report, DEFAULT_BINS};
use crate::selector::{
    apply_threshold, build_coreset, categorize, probe_all, write_probe_records, CoresetSpec,
    Partition, PartitionParams, PipelineCtx,
};

#[derive(Parser)]
#[command(name = "clipper", version, about = "Training-free coreset selection for instruction-tuning datasets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub overrides: Overrides,
}

/// Config-file keys exposed as flags. Flags win over file values.
#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Dataset JSONL path.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Chat-completion server base URL (switches the backend to http).
    #[arg(long = "backend-url", global = true)]
    pub backend_url: Option<String>,

    /// Model name sent to the backend.
    #[arg(long, global = true)]
    pub model: Option<String>,

    /// Judge method: exact or llm.
    #[arg(long, global = true, value_parser = ["exact", "llm"])]
    pub judge: Option<String>,

    /// Probes per demonstration.
    #[arg(long = "R", global = true)]
    pub r: Option<u32>,

    /// Guidance threshold; repeatable to sweep several values.
    #[arg(long = "tau", global = true)]
    pub taus: Vec<u32>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Maximum in-flight backend requests.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,

    /// Quarantine samples whose zero-shot inference fails instead of aborting.
    #[arg(long = "allow-partial", global = true)]
    pub allow_partial: bool,

    /// Draw probe queries with replacement even when the pool is large enough.
    #[arg(long = "strict-iid", global = true)]
    pub strict_iid: bool,

    /// Stratify probe queries so every WK sample is drawn as evenly as the
    /// budget allows.
    #[arg(long = "coverage-mode", global = true)]
    pub coverage_mode: bool,

    /// Abort probing on the first terminal backend failure instead of
    /// counting it as incorrect.
    #[arg(long = "strict-probes", global = true)]
    pub strict_probes: bool,
}

#[derive(Subcommand)]
pub enum Command {
    /// Stage 1: zero-shot inference, split into PK / WK.
    Categorize,
    /// Stage 2: one-shot ICL probing; computes counts, ICL_C/ICL_IC, W2C/WW.
    Probe,
    /// Emit one coreset combination as JSONL.
    Select {
        /// full | pk | wk | icl_c+wk | icl_c+w2c | icl_c+ww | random:N |
        /// mid_ppl:N | mix:P:N
        #[arg(long)]
        combo: String,
    },
    /// Emit a PK/WK mixture coreset: floor(p*n) PK + rest WK.
    Mix {
        /// Fraction of PK samples, in [0, 1].
        #[arg(long)]
        p: f64,
        /// Total coreset size.
        #[arg(long)]
        n: usize,
    },
    /// Compute per-sample label perplexity (requires logprob support).
    Ppl,
    /// Emit size tables, histogram overlays, and the distance matrix.
    Report,
    /// All stages in order: categorize, probe, ppl, select, report.
    Run,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_toml_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(dataset) = &self.dataset {
            cfg.dataset = dataset.clone();
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(url) = &self.backend_url {
            cfg.backend.kind = crate::config::BackendKind::Http;
            cfg.backend.base_url = Some(url.clone());
        }
        if let Some(model) = &self.model {
            cfg.backend.model = model.clone();
        }
        if let Some(judge) = &self.judge {
            cfg.judge.method = match judge.as_str() {
                "llm" => JudgeMethodConfig::Llm,
                _ => JudgeMethodConfig::Exact,
            };
        }
        if let Some(r) = self.r {
            cfg.r = r;
        }
        if !self.taus.is_empty() {
            cfg.taus = self.taus.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(concurrency) = self.concurrency {
            cfg.concurrency = concurrency;
        }
        cfg.allow_partial |= self.allow_partial;
        cfg.strict_iid |= self.strict_iid;
        cfg.coverage_mode |= self.coverage_mode;
        cfg.strict_probes |= self.strict_probes;
        Ok(cfg)
    }
}

/// The staged pipeline over one output directory. Construction validates the
/// config, so every command reports all config problems up front.
pub struct Pipeline {
    pub cfg: RunConfig,
    backend: Arc<dyn ModelBackend>,
    judge: Judge,
    cache: InferenceCache,
}

impl Pipeline {
    pub fn from_config(cfg: RunConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let backend = cfg.build_backend()?;
        let judge = cfg.build_judge()?;
        Self::with_parts(cfg, backend, judge)
    }

    /// Test seam: inject prebuilt backend and judge.
    pub fn with_parts(
        cfg: RunConfig,
        backend: Arc<dyn ModelBackend>,
        judge: Judge,
    ) -> Result<Self, Error> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out)
            .map_err(|e| Error::io(format!("create {}", cfg.out.display()), e))?;
        let cache = InferenceCache::open(cfg.out.join("cache.jsonl"))?;
        Ok(Pipeline {
            cfg,
            backend,
            judge,
            cache,
        })
    }

    pub fn partition_path(&self) -> PathBuf {
        self.cfg.out.join("partition.json")
    }
    pub fn probes_path(&self) -> PathBuf {
        self.cfg.out.join("probes.jsonl")
    }
    pub fn manifest_path(&self) -> PathBuf {
        self.cfg.out.join("manifest.json")
    }
    pub fn run_log_path(&self) -> PathBuf {
        self.cfg.out.join("run_log.json")
    }
    pub fn ppl_path(&self) -> PathBuf {
        self.cfg.out.join("ppl.csv")
    }
    pub fn coreset_dir(&self) -> PathBuf {
        self.cfg.out.join("coresets")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.cfg.out.join("report")
    }

    fn ctx(&self) -> PipelineCtx<'_> {
        PipelineCtx {
            backend: self.backend.clone(),
            judge: self.judge.clone(),
            templates: self.cfg.templates(),
            decoding: self.cfg.decoding(),
            concurrency: self.cfg.concurrency,
            cache: &self.cache,
            allow_partial: self.cfg.allow_partial,
            strict_probes: self.cfg.strict_probes,
            sample_mode: self.cfg.sample_mode(),
            coverage_mode: self.cfg.coverage_mode,
        }
    }

    fn params(&self) -> PartitionParams {
        PartitionParams {
            r: self.cfg.r,
            tau: self.cfg.taus[0],
            seed: self.cfg.seed,
        }
    }

    fn load_dataset(&self) -> Result<Dataset, Error> {
        Ok(load_jsonl(&self.cfg.dataset)?)
    }

    fn load_partition(&self, needed_by: &str) -> Result<Partition, Error> {
        let path = self.partition_path();
        if !path.exists() {
            return Err(Error::MissingArtifact(format!(
                "{} not found; run `clipper categorize` before `clipper {needed_by}`",
                path.display()
            )));
        }
        Partition::load(path)
    }

    fn finish_stage(
        &self,
        stage: &str,
        started: Instant,
        requests: usize,
        cache_before: usize,
        update: impl FnOnce(&mut SelectionManifest),
    ) -> Result<(), Error> {
        let mut manifest = SelectionManifest::load_or_new(&self.manifest_path(), &self.cfg);
        manifest.record_stage(stage);
        update(&mut manifest);
        manifest.save(&self.manifest_path())?;

        let mut log = RunLog::load_or_default(&self.run_log_path());
        log.record(
            stage,
            StageLog {
                wall_clock_s: started.elapsed().as_secs_f64(),
                requests,
                cache_entries_added: self.cache.len().saturating_sub(cache_before),
            },
        );
        log.save(&self.run_log_path())
    }

    pub async fn categorize(&self) -> Result<Partition, Error> {
        let started = Instant::now();
        let cache_before = self.cache.len();
        let dataset = self.load_dataset()?;
        let partition = categorize(&dataset, &self.ctx(), self.params()).await?;
        let all: Vec<String> = dataset.ids().map(String::from).collect();
        partition
            .check_laws(&all)
            .map_err(|v| Error::Other(format!("partition law violated: {v}")))?;
        partition.save(self.partition_path())?;
        let summary = PartitionSummary::from_partition(&partition, &self.cfg.taus);
        self.finish_stage("categorize", started, dataset.len(), cache_before, |m| {
            m.partition = Some(summary);
        })?;
        eprintln!(
            "categorize: total={} pk={} wk={} quarantine={}",
            dataset.len(),
            partition.pk.len(),
            partition.wk.len(),
            partition.quarantine.len()
        );
        Ok(partition)
    }

    pub async fn probe(&self) -> Result<Partition, Error> {
        let started = Instant::now();
        let cache_before = self.cache.len();
        let dataset = self.load_dataset()?;
        let mut partition = self.load_partition("probe")?;
        // the config is authoritative across stages
        partition.params = self.params();
        let records = probe_all(&dataset, &mut partition, &self.ctx()).await?;
        let all: Vec<String> = dataset.ids().map(String::from).collect();
        partition
            .check_laws(&all)
            .map_err(|v| Error::Other(format!("partition law violated: {v}")))?;
        write_probe_records(&records, self.probes_path())?;
        partition.save(self.partition_path())?;
        let summary = PartitionSummary::from_partition(&partition, &self.cfg.taus);
        self.finish_stage("probe", started, records.len(), cache_before, |m| {
            m.partition = Some(summary);
        })?;
        eprintln!(
            "probe: records={} icl_c={} icl_ic={} w2c={} ww={} (tau={})",
            records.len(),
            partition.icl_c.len(),
            partition.icl_ic.len(),
            partition.w2c.len(),
            partition.ww.len(),
            partition.params.tau
        );
        Ok(partition)
    }

    pub async fn ppl(&self) -> Result<Vec<PplRecord>, Error> {
        let started = Instant::now();
        let cache_before = self.cache.len();
        let dataset = self.load_dataset()?;
        let (records, stats) = compute_ppl(
            &dataset,
            self.backend.clone(),
            &self.cfg.templates(),
            self.cfg.concurrency,
            &self.cache,
        )
        .await?;
        write_ppl_csv(&records, self.ppl_path())?;
        let section = PplSection {
            csv_path: "ppl.csv".to_string(),
            records: records.len(),
            flagged_empty: stats.flagged_empty.len(),
            failed: stats.failed.len(),
        };
        self.finish_stage("ppl", started, dataset.len(), cache_before, |m| {
            m.ppl = Some(section);
        })?;
        eprintln!(
            "ppl: records={} flagged_empty={} failed={}",
            records.len(),
            stats.flagged_empty.len(),
            stats.failed.len()
        );
        Ok(records)
    }

    /// Emit one coreset. For combinations that involve ICL_C the threshold is
    /// recomputed from the stored counts at the requested tau, so sweeping
    /// tau never re-probes.
    pub fn select(&self, spec: &CoresetSpec, tau: u32) -> Result<(PathBuf, usize), Error> {
        let started = Instant::now();
        let cache_before = self.cache.len();
        let dataset = self.load_dataset()?;
        let mut partition = self.load_partition("select")?;
        if partition.stats.probed {
            apply_threshold(&mut partition, tau)?;
        }
        let ppl_records = if matches!(spec, CoresetSpec::MidPpl { .. }) {
            let path = self.ppl_path();
            if !path.exists() {
                return Err(Error::MissingArtifact(format!(
                    "{} not found; run `clipper ppl` before selecting mid_ppl",
                    path.display()
                )));
            }
            Some(read_ppl_csv(path)?)
        } else {
            None
        };
        let coreset = build_coreset(&dataset, &partition, spec, ppl_records.as_deref())?;

        let slug = if spec.needs_tau() {
            format!("{}-tau{}", spec.slug(), tau)
        } else {
            spec.slug()
        };
        let dir = self.coreset_dir();
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        let path = dir.join(format!("{slug}.jsonl"));
        write_jsonl(&coreset, &path)?;

        let size = coreset.len();
        let entry = crate::manifest::CoresetEntry {
            path: format!("coresets/{slug}.jsonl"),
            size,
        };
        self.finish_stage("select", started, 0, cache_before, |m| {
            m.coresets.insert(slug.clone(), entry);
        })?;
        eprintln!("select: {} -> {} samples -> {}", spec.slug(), size, path.display());
        Ok((path, size))
    }

    pub fn report(&self) -> Result<(), Error> {
        let started = Instant::now();
        let cache_before = self.cache.len();
        let partition = self.load_partition("report")?;
        let ppl_records = if self.ppl_path().exists() {
            Some(read_ppl_csv(self.ppl_path())?)
        } else {
            None
        };
        let output = build_report(&partition, ppl_records.as_deref(), DEFAULT_BINS)?;
        write_report(&output, &self.report_dir())?;
        self.finish_stage("report", started, 0, cache_before, |_| {})?;
        eprint!("{}", size_table(&output.bundle));
        for (pair, d) in &output.bundle.alignment {
            eprintln!("alignment {pair}: {d:.6}");
        }
        for notice in &output.bundle.notices {
            eprintln!("notice: {notice}");
        }
        Ok(())
    }

    /// The umbrella command: all stages with one config.
    pub async fn run(&self) -> Result<(), Error> {
        self.categorize().await?;
        self.probe().await?;
        if self.backend.supports_logprobs() {
            self.ppl().await?;
        } else {
            eprintln!("ppl: skipped (backend does not support logprobs)");
        }
        for combo in &self.cfg.combos {
            let spec = CoresetSpec::parse(combo).map_err(Error::from)?;
            if spec.needs_tau() {
                for &tau in &self.cfg.taus {
                    self.select(&spec, tau)?;
                }
            } else {
                self.select(&spec, self.cfg.taus[0])?;
            }
        }
        self.report()
    }
}

/// Parse-and-run used by `main`; returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    match try_execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn try_execute(cli: Cli) -> Result<(), Error> {
    let cfg = cli.overrides.resolve()?;
    let pipeline = Pipeline::from_config(cfg)?;
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| Error::Other(format!("tokio runtime: {e}")))?;
    match cli.command {
        Command::Categorize => runtime.block_on(pipeline.categorize()).map(|_| ()),
        Command::Probe => runtime.block_on(pipeline.probe()).map(|_| ()),
        Command::Select { combo } => {
            let spec = CoresetSpec::parse(&combo).map_err(Error::from)?;
            let tau = pipeline.cfg.taus[0];
            pipeline.select(&spec, tau).map(|_| ())
        }
        Command::Mix { p, n } => {
            let spec = CoresetSpec::Mix { p, n };
            let tau = pipeline.cfg.taus[0];
            pipeline.select(&spec, tau).map(|_| ())
        }
        Command::Ppl => runtime.block_on(pipeline.ppl()).map(|_| ()),
        Command::Report => pipeline.report(),
        Command::Run => runtime.block_on(pipeline.run()),
    }
}
