//! Experiment configs and the `run`, `compare` and `oracle` commands.
//!
//! Configs are TOML. A minimal one:
//!
//! ```toml
//! seed = 7
//! variant = "L"
//! k = 4
//! feature_widths = [32, 8]
//! head_widths = [32]
//! e = 2
//! r = 80
//! eta = 0.05
//! output_dir = "out/l"
//!
//! [dataset]
//! kind = "synthetic"
//!
//! [schedule]
//! kind = "piecewise"
//! steps = [{ round = 20, alpha = 0.2, beta = 0.4 }]
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, CsvSpec, SynthSpec, VerticalDataset};
use crate::metrics::{MetricsCsvWriter, MetricsRecord};
use crate::oracle::{self, OracleReport};
use crate::par::{self, Execution};
use crate::plot::{self, Series};
use crate::protocol::{MessageLogEntry, ProtocolConfig, RoundPlan, Simulator};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_ORACLE_FAIL: i32 = 3;

/// Exit status for an error escaping a command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Field { .. } | Error::Data(_) | Error::Shape(_) => EXIT_VALIDATION,
        Error::NonFiniteLoss(_) | Error::Aborted { .. } | Error::Io(_) | Error::Csv(_) => EXIT_RUNTIME,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// No lightweighting.
    NL,
    /// Computation lightweighting only.
    PL,
    /// Communication lightweighting only.
    ML,
    /// Both.
    L,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A ratio given once for all clients or per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Ratios {
    Shared(f64),
    PerClient(Vec<f64>),
}

impl Ratios {
    fn expand(&self, k: usize, field: &str) -> Result<Vec<f64>> {
        match self {
            Ratios::Shared(v) => Ok(vec![*v; k]),
            Ratios::PerClient(v) if v.len() == k => Ok(v.clone()),
            Ratios::PerClient(v) => Err(Error::field(
                field,
                format!("has {} entries, expected k = {k}", v.len()),
            )),
        }
    }
}

impl Default for Ratios {
    fn default() -> Self {
        Ratios::Shared(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    pub round: usize,
    #[serde(default)]
    pub alpha: Ratios,
    #[serde(default)]
    pub beta: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        #[serde(default)]
        alpha: Ratios,
        #[serde(default)]
        beta: Ratios,
    },
    Piecewise {
        steps: Vec<ScheduleStep>,
    },
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Constant {
            alpha: Ratios::default(),
            beta: Ratios::default(),
        }
    }
}

impl ScheduleSpec {
    pub fn to_plan(&self, rounds: usize, k: usize) -> Result<RoundPlan> {
        match self {
            ScheduleSpec::Constant { alpha, beta } => RoundPlan::constant(
                rounds,
                &alpha.expand(k, "schedule.alpha")?,
                &beta.expand(k, "schedule.beta")?,
            ),
            ScheduleSpec::Piecewise { steps } => {
                let steps = steps
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Ok((
                            s.round,
                            s.alpha.expand(k, &format!("schedule.steps[{i}].alpha"))?,
                            s.beta.expand(k, &format!("schedule.steps[{i}].beta"))?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                RoundPlan::piecewise(rounds, k, &steps)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadrantSpec {
    pub height: usize,
    pub width: usize,
    /// CSV of flat images; synthetic patch images when absent.
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default = "default_label")]
    pub label_column: String,
    #[serde(default = "default_image_count")]
    pub n: usize,
    #[serde(default = "default_image_classes")]
    pub classes: usize,
    #[serde(default = "data::default_test_fraction")]
    pub test_fraction: f64,
}

fn default_label() -> String {
    "label".into()
}
fn default_image_count() -> usize {
    2000
}
fn default_image_classes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    Csv(CsvSpec),
    Quadrant(QuadrantSpec),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureWidths {
    Shared(Vec<usize>),
    PerClient(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(alias = "K", alias = "clients")]
    pub k: usize,
    pub feature_widths: FeatureWidths,
    #[serde(default)]
    pub head_widths: Vec<usize>,
    #[serde(alias = "E", alias = "local_iterations")]
    pub e: usize,
    #[serde(alias = "R", alias = "rounds")]
    pub r: usize,
    pub eta: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_probe")]
    pub probe_size: usize,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub variant: Variant,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub execution: Execution,
}

fn default_decay() -> f64 {
    1.0
}
fn default_batch() -> usize {
    256
}
fn default_probe() -> usize {
    256
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| locate(text, s.start))
                .unwrap_or_else(|| "config".into());
            Error::field(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Field { field, message } => Error::Field {
                field: format!("{}: {field}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn feature_widths(&self) -> Result<Vec<Vec<usize>>> {
        match &self.feature_widths {
            FeatureWidths::Shared(w) => Ok(vec![w.clone(); self.k]),
            FeatureWidths::PerClient(ws) if ws.len() == self.k => Ok(ws.clone()),
            FeatureWidths::PerClient(ws) => Err(Error::field(
                "feature_widths",
                format!("{} client entries for k = {}", ws.len(), self.k),
            )),
        }
    }

    /// Checks field ranges and variant/schedule consistency without touching data.
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::field("k", "need at least one client"));
        }
        let widths = self.feature_widths()?;
        if let Some(i) = widths.iter().position(|w| w.is_empty() || w.contains(&0)) {
            return Err(Error::field(
                format!("feature_widths[{i}]"),
                "needs at least one positive width",
            ));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::field("head_widths", "widths must be positive"));
        }
        if self.e == 0 {
            return Err(Error::field("e", "must be at least 1"));
        }
        if self.r == 0 {
            return Err(Error::field("r", "must be at least 1"));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::field("eta", format!("must be positive, got {}", self.eta)));
        }
        if !(self.decay.is_finite() && self.decay > 0.0) {
            return Err(Error::field("decay", format!("must be positive, got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::field("batch_size", "must be positive"));
        }
        match &self.dataset {
            DatasetSpec::Csv(c) if c.clients.len() != self.k => {
                return Err(Error::field(
                    "dataset.clients",
                    format!("{} column groups for k = {}", c.clients.len(), self.k),
                ));
            }
            DatasetSpec::Quadrant(q) => {
                if self.k != 4 {
                    return Err(Error::field("k", "quadrant datasets have exactly 4 clients"));
                }
                if q.height % 2 != 0 || q.width % 2 != 0 || q.height == 0 || q.width == 0 {
                    return Err(Error::field(
                        "dataset.height",
                        "image dimensions must be even and positive",
                    ));
                }
            }
            _ => {}
        }
        let plan = self.plan()?;
        let any = |t: &Vec<Vec<f64>>| t.iter().flatten().any(|&v| v != 0.0);
        let (has_alpha, has_beta) = (any(&plan.alpha), any(&plan.beta));
        let conflict = match self.variant {
            Variant::NL if has_alpha || has_beta => Some("variant NL requires every alpha and beta to be 0"),
            Variant::PL if has_beta => Some("variant PL (computation only) requires every beta to be 0"),
            Variant::ML if has_alpha => Some("variant ML (communication only) requires every alpha to be 0"),
            _ => None,
        };
        if let Some(msg) = conflict {
            return Err(Error::field("variant", format!("conflicts with schedule: {msg}")));
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<RoundPlan> {
        self.schedule.to_plan(self.r, self.k)
    }

    pub fn build_dataset(&self) -> Result<VerticalDataset> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => data::synth_classification(self.seed, self.k, s),
            DatasetSpec::Csv(c) => data::csv_ingest(c, self.seed),
            DatasetSpec::Quadrant(q) => {
                let mut ds = match &q.path {
                    Some(p) => data::quadrant_from_csv(
                        Path::new(p),
                        &q.label_column,
                        q.height,
                        q.width,
                        self.seed,
                        q.test_fraction,
                    )?,
                    None => {
                        let (images, labels) = data::synth_images(self.seed, q.n, q.height, q.width, q.classes)?;
                        data::quadrant_split(&images, labels, q.height, q.width, self.seed, q.test_fraction)?
                    }
                };
                ds.standardize();
                Ok(ds)
            }
        }
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig> {
        Ok(ProtocolConfig {
            seed: self.seed,
            feature_widths: self.feature_widths()?,
            head_hidden: self.head_widths.clone(),
            local_iters: self.e,
            rounds: self.r,
            eta: self.eta,
            eta_decay: self.decay,
            batch_size: self.batch_size,
            probe_size: self.probe_size,
            execution: self.execution,
        })
    }
}

/// Maps a byte offset in `text` to `line N` for error messages.
fn locate(text: &str, offset: usize) -> String {
    let line = text[..offset.min(text.len())].matches('\n').count() + 1;
    let key = text
        .lines()
        .nth(line - 1)
        .and_then(|l| l.split('=').next())
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .unwrap_or("?");
    format!("line {line} ({key})")
}

/// Totals reported after a run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub label: String,
    pub variant: Variant,
    pub final_acc: f64,
    pub total_uplink_bytes: u64,
    /// Feature-model forward FLOPs: per-sample FLOPs times the rows embedded
    /// each round (the full dataset at exchange plus `E` minibatches).
    pub total_flops: u64,
    pub records: Vec<MetricsRecord>,
    pub out_dir: PathBuf,
}

/// Writer that lands at `path` by renaming a sibling temp file.
struct AtomicFile {
    tmp: PathBuf,
    dest: PathBuf,
    out: BufWriter<File>,
}

impl AtomicFile {
    fn create(dest: PathBuf) -> Result<Self> {
        let mut name = dest.file_name().expect("file path").to_os_string();
        name.push(".tmp");
        let tmp = dest.with_file_name(name);
        let out = BufWriter::new(File::create(&tmp)?);
        Ok(Self { tmp, dest, out })
    }

    fn commit(mut self) -> Result<()> {
        self.out.flush()?;
        drop(self.out);
        fs::rename(&self.tmp, &self.dest)?;
        Ok(())
    }
}

impl Write for AtomicFile {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.out.write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

pub fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = AtomicFile::create(dest.to_path_buf())?;
    f.write_all(bytes)?;
    f.commit()
}

fn message_row(m: &MessageLogEntry) -> [String; 5] {
    [
        m.round.to_string(),
        m.sender.to_string(),
        m.receiver.to_string(),
        m.kind.to_string(),
        m.bytes.to_string(),
    ]
}

fn label_for(cfg: &ExperimentConfig, path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    format!("{} ({stem})", cfg.variant)
}

/// Runs one experiment and writes `metrics.csv`, `messages.csv`,
/// `diagnostics.csv` and the SVG plots into `out_dir`. Rows are streamed, so a
/// runtime abort still leaves the rounds completed so far on disk.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, label: &str) -> Result<RunSummary> {
    let data = cfg.build_dataset()?;
    let pcfg = cfg.protocol_config()?;
    let plan = cfg.plan()?;
    let mut sim = Simulator::new(pcfg, plan, &data)?;
    fs::create_dir_all(out_dir)?;

    let k = data.clients();
    let mut metrics = MetricsCsvWriter::new(AtomicFile::create(out_dir.join("metrics.csv"))?, k)?;
    let mut messages = csv::Writer::from_writer(AtomicFile::create(out_dir.join("messages.csv"))?);
    messages.write_record(["round", "sender", "receiver", "kind", "bytes"])?;
    let mut diag = csv::Writer::from_writer(AtomicFile::create(out_dir.join("diagnostics.csv"))?);
    diag.write_record(["round", "client", "embedding_norm_sq", "param_norm_sq"])?;

    let mut records = Vec::with_capacity(cfg.r);
    let outcome = sim.run_with(|rec, msgs| {
        metrics.write(rec)?;
        for m in msgs {
            messages.write_record(message_row(m))?;
        }
        for c in 0..rec.clients() {
            diag.write_record([
                rec.round.to_string(),
                (c + 1).to_string(),
                rec.embedding_norm_sq[c].to_string(),
                rec.param_norm_sq[c].to_string(),
            ])?;
        }
        messages.flush()?;
        diag.flush()?;
        records.push(rec.clone());
        Ok(())
    });
    // Partial output is committed either way.
    let into_inner = |w: csv::Writer<AtomicFile>| {
        w.into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    };
    metrics.into_inner()?.commit()?;
    into_inner(messages)?.commit()?;
    into_inner(diag)?.commit()?;
    outcome?;

    let rows_per_round = (data.len() + cfg.e * cfg.batch_size.min(data.train.len())) as u64;
    let summary = RunSummary {
        label: label.to_string(),
        variant: cfg.variant,
        final_acc: records.last().map_or(0.0, |r| r.test_acc),
        total_uplink_bytes: records.iter().flat_map(|r| &r.uplink_bytes).sum(),
        total_flops: records.iter().flat_map(|r| &r.flops).sum::<u64>() * rows_per_round,
        records,
        out_dir: out_dir.to_path_buf(),
    };
    let acc = Series {
        label: label.to_string(),
        points: summary.records.iter().map(|r| (r.round as f64, r.test_acc)).collect(),
    };
    plot::line_chart(&out_dir.join("accuracy.svg"), "Test accuracy", "accuracy", &[acc])?;
    let mut cumulative = 0u64;
    let bytes = Series {
        label: label.to_string(),
        points: summary
            .records
            .iter()
            .map(|r| {
                cumulative += r.uplink_bytes.iter().sum::<u64>();
                (r.round as f64, cumulative as f64)
            })
            .collect(),
    };
    plot::line_chart(&out_dir.join("bytes.svg"), "Cumulative uplink bytes", "bytes", &[bytes])?;
    Ok(summary)
}

pub fn summary_line(s: &RunSummary) -> String {
    format!(
        "{}: final accuracy {:.4}, total uplink bytes {}, total FLOPs {}",
        s.label, s.final_acc, s.total_uplink_bytes, s.total_flops
    )
}

/// `run <config>`.
pub fn cmd_run(config_path: &Path, out_dir: Option<&Path>) -> Result<RunSummary> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let dir = out_dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
    let summary = run_experiment(&cfg, &dir, &label_for(&cfg, config_path))?;
    println!("{}", summary_line(&summary));
    Ok(summary)
}

/// `compare <config>...`: runs every config (concurrently) and writes an
/// overlaid accuracy plot plus a `comparison.csv` table.
pub fn cmd_compare(config_paths: &[PathBuf], out_dir: Option<&Path>) -> Result<Vec<RunSummary>> {
    if config_paths.len() < 2 {
        return Err(Error::Config("compare needs at least two configs".into()));
    }
    let cfgs = config_paths
        .iter()
        .map(|p| ExperimentConfig::from_path(p))
        .collect::<Result<Vec<_>>>()?;
    let first = &cfgs[0];
    for (cfg, path) in cfgs.iter().zip(config_paths).skip(1) {
        if cfg.seed != first.seed {
            return Err(Error::Config(format!(
                "refusing to compare: {} uses seed {} but {} uses seed {}",
                path.display(),
                cfg.seed,
                config_paths[0].display(),
                first.seed
            )));
        }
        if cfg.dataset != first.dataset || cfg.k != first.k {
            return Err(Error::Config(format!(
                "refusing to compare: {} and {} describe different datasets",
                path.display(),
                config_paths[0].display()
            )));
        }
    }
    let compare_dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => first.output_dir.parent().unwrap_or(Path::new(".")).join("compare"),
    };
    let labels: Vec<String> = cfgs.iter().zip(config_paths).map(|(c, p)| label_for(c, p)).collect();
    let dirs: Vec<PathBuf> = cfgs
        .iter()
        .zip(config_paths)
        .map(|(c, p)| match out_dir {
            Some(d) => d.join(p.file_stem().unwrap_or_default()),
            None => c.output_dir.clone(),
        })
        .collect();
    let results = par::map_indexed(Execution::Parallel, cfgs.len(), |i| {
        run_experiment(&cfgs[i], &dirs[i], &labels[i])
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;

    fs::create_dir_all(&compare_dir)?;
    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record(["run", "variant", "final_acc", "total_uplink_bytes", "total_flops"])?;
    for s in &summaries {
        table.write_record([
            s.label.clone(),
            s.variant.to_string(),
            s.final_acc.to_string(),
            s.total_uplink_bytes.to_string(),
            s.total_flops.to_string(),
        ])?;
    }
    let bytes = table
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(&compare_dir.join("comparison.csv"), &bytes)?;
    let series: Vec<Series> = summaries
        .iter()
        .map(|s| Series {
            label: s.label.clone(),
            points: s.records.iter().map(|r| (r.round as f64, r.test_acc)).collect(),
        })
        .collect();
    plot::line_chart(
        &compare_dir.join("accuracy_compare.svg"),
        "Test accuracy by variant",
        "accuracy",
        &series,
    )?;

    println!(
        "{:<28} {:>10} {:>16} {:>16}",
        "run", "final_acc", "uplink_bytes", "flops"
    );
    for s in &summaries {
        println!(
            "{:<28} {:>10.4} {:>16} {:>16}",
            s.label, s.final_acc, s.total_uplink_bytes, s.total_flops
        );
    }
    Ok(summaries)
}

/// `oracle <config>`: protocol versus joint SGD over the configured horizon.
pub fn cmd_oracle(config_path: &Path) -> Result<OracleReport> {
    let cfg = ExperimentConfig::from_path(config_path)?;
    let data = cfg.build_dataset()?;
    let report = oracle::check_equivalence(&cfg.protocol_config()?, &cfg.plan()?, &data, None)?;
    println!(
        "oracle {}: {} iterations, max |loss difference| {:.3e} (tolerance {:.0e})",
        if report.passed() { "PASS" } else { "FAIL" },
        report.protocol_losses.len(),
        report.max_abs_diff,
        report.tolerance
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
variant = "L"
k = 2
feature_widths = [6, 3]
head_widths = [5]
e = 2
r = 3
eta = 0.1
batch_size = 16

[dataset]
kind = "synthetic"
n = 80
d = 8
classes = 2

[schedule]
kind = "constant"
alpha = 0.2
beta = [0.25, 0.5]
"#;

    #[test]
    fn parses_minimal_config() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.feature_widths().unwrap(), vec![vec![6, 3]; 2]);
        let plan = cfg.plan().unwrap();
        assert_eq!(plan.beta[2], vec![0.25, 0.5]);
        assert_eq!(cfg.probe_size, 256);
    }

    #[test]
    fn variant_conflicts_are_named() {
        let nl = MINIMAL.replace("variant = \"L\"", "variant = \"NL\"");
        let err = ExperimentConfig::from_toml(&nl).unwrap_err();
        assert!(err.to_string().starts_with("variant:"), "{err}");
        let pl = MINIMAL.replace("variant = \"L\"", "variant = \"PL\"");
        assert!(ExperimentConfig::from_toml(&pl)
            .unwrap_err()
            .to_string()
            .contains("beta"));
        let ml = MINIMAL.replace("variant = \"L\"", "variant = \"ML\"");
        assert!(ExperimentConfig::from_toml(&ml)
            .unwrap_err()
            .to_string()
            .contains("alpha"));
    }

    #[test]
    fn unknown_and_bad_fields_report_location() {
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("eta = 0.1", "eta = \"fast\"")).unwrap_err();
        assert!(err.to_string().contains("eta"), "{err}");
        let err = ExperimentConfig::from_toml(&format!("bogus = 1\n{MINIMAL}")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml(&MINIMAL.replace("beta = [0.25, 0.5]", "beta = [0.25]")).unwrap_err();
        assert!(err.to_string().starts_with("schedule.beta"), "{err}");
    }

    #[test]
    fn schedule_rounds_must_increase_and_fit() {
        let text = MINIMAL.replace(
            "kind = \"constant\"\nalpha = 0.2\nbeta = [0.25, 0.5]",
            "kind = \"piecewise\"\nsteps = [{ round = 1, alpha = 0.2 }, { round = 1, alpha = 0.4 }]",
        );
        assert!(ExperimentConfig::from_toml(&text)
            .unwrap_err()
            .to_string()
            .contains("strictly increasing"));
        let text = MINIMAL.replace(
            "kind = \"constant\"\nalpha = 0.2\nbeta = [0.25, 0.5]",
            "kind = \"piecewise\"\nsteps = [{ round = 3, alpha = 0.2 }]",
        );
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn full_scale_quadrant_config_is_valid() {
        let text = r#"
seed = 1
variant = "L"
k = 4
feature_widths = [64, 16]
head_widths = [64, 32]
e = 5
r = 100
eta = 0.05
batch_size = 256

[dataset]
kind = "quadrant"
height = 32
width = 32
n = 10000
classes = 10
test_fraction = 0.0
"#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.batch_size, 256);
        let bad = text.replace("k = 4", "k = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn run_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let s = run_experiment(&cfg, dir.path(), "L (minimal)").unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 3);
        assert!(metrics.starts_with("round,loss,test_acc,psi_1,omega_1,bytes_1,flops_1,psi_2"));
        let msgs = fs::read_to_string(dir.path().join("messages.csv")).unwrap();
        assert_eq!(msgs.lines().count(), 1 + 3 * 4);
        assert!(dir.path().join("accuracy.svg").exists());
        assert!(dir.path().join("bytes.svg").exists());
        assert!(!dir.path().join("metrics.csv.tmp").exists());
        assert_eq!(s.records.len(), 3);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::field("x", "y")), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::NonFiniteLoss(f64::NAN)), EXIT_RUNTIME);
    }
}
