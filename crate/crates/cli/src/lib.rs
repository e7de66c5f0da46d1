//! Command-line front end: reads a CSV file, fits the heterogeneous RD model
//! and renders the estimates as a table, JSON or CSV.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use rdhte::model::{expand_covariates, ExpandedCovariates, RawColumn, RawTable};
use rdhte::{
    fit_hte_grouped, BandwidthChoice, BiasBandwidth, CovariateKind, CovariateSpec, FitSpec, HteResultF64,
    KernelKind, RdError, RdSample, SelectMode, Vce,
};

/// Version tag of the JSON output layout.
pub const JSON_SCHEMA: &str = "rdhte/1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read `{path}`: {detail}")]
    Io { path: String, detail: String },
    #[error("cannot parse row {row}, column `{column}`: {detail}")]
    ParseError {
        row: usize,
        column: String,
        detail: String,
    },
    #[error("column `{0}` not found in the header")]
    MissingColumn(String),
    #[error("estimation failed: {0}")]
    Estimation(#[from] RdError),
}

impl CliError {
    /// 2 for invocation and input problems, 3 for estimation failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Estimation(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Tri,
    Uni,
    Epa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    One,
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BiasBwArg {
    Main,
    Pilot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VceArg {
    Hc0,
    Hc1,
    Hc2,
    Hc3,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Table,
    Json,
    Csv,
}

#[derive(Debug, Parser)]
#[command(
    name = "rdhte",
    about = "Heterogeneous treatment effects in regression discontinuity designs"
)]
struct Args {
    /// Input CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    outcome: String,
    /// Running-variable column.
    #[arg(long)]
    running: String,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    cutoff: f64,
    /// Heterogeneity covariate: `col`, `col:cat`, `col:bin`, `col:cont`, `col:cont^k` or `col:q<k>`.
    #[arg(long)]
    hetero: Vec<String>,
    /// Cluster-label column; selects cluster-robust errors unless --vce is given.
    #[arg(long)]
    cluster: Option<String>,
    #[arg(long, value_enum, default_value_t = KernelArg::Tri)]
    kernel: KernelArg,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    s: usize,
    /// Derivative order (0 jump, 1 kink).
    #[arg(long, default_value_t = 0)]
    deriv: usize,
    /// Common bandwidth on both sides.
    #[arg(long, conflicts_with_all = ["bw_side", "bw_select"])]
    bw: Option<f64>,
    /// Separate bandwidths for the left and right side.
    #[arg(long, num_args = 2, value_names = ["H_LEFT", "H_RIGHT"], conflicts_with = "bw_select")]
    bw_side: Option<Vec<f64>>,
    /// MSE-optimal selection, one bandwidth per side or a common one.
    #[arg(long, value_enum)]
    bw_select: Option<SelectArg>,
    /// Window of the bias-correction pilot fit: the main bandwidth or a rule-of-thumb pilot.
    #[arg(long, value_enum, default_value_t = BiasBwArg::Main)]
    bias_bw: BiasBwArg,
    #[arg(long, value_enum)]
    vce: Option<VceArg>,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Covariate point `w1,w2,..` (in expanded-covariate order) at which to report kappa(w).
    #[arg(long, allow_hyphen_values = true)]
    at: Vec<String>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Reserved for randomized subroutines; estimation is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// One `--hetero` binding.
#[derive(Debug, Clone, PartialEq)]
pub struct HeteroBinding {
    pub column: String,
    pub kind: CovariateKind,
}

/// Parses `col[:cat|:bin|:cont[^k]|:q<k>]`; a bare column is continuous, linear.
pub fn parse_hetero(arg: &str) -> Result<HeteroBinding, CliError> {
    let bad = || CliError::Usage(format!("invalid --hetero `{arg}`"));
    let (column, kind) = match arg.rsplit_once(':') {
        None => (arg, "cont"),
        Some((c, k)) => (c, k),
    };
    if column.is_empty() {
        return Err(bad());
    }
    let kind = match kind {
        "cat" => CovariateKind::Categorical {
            levels: None,
            baseline: None,
        },
        "bin" => CovariateKind::Binary,
        "cont" => CovariateKind::Continuous { power_max: 1 },
        k if k.starts_with("cont^") => {
            let power_max: u32 = k[5..].parse().map_err(|_| bad())?;
            if power_max == 0 {
                return Err(bad());
            }
            CovariateKind::Continuous { power_max }
        }
        k if k.starts_with('q') => {
            let bins: usize = k[1..].parse().map_err(|_| bad())?;
            if bins < 2 {
                return Err(bad());
            }
            CovariateKind::QuantileBins { bins }
        }
        _ => return Err(bad()),
    };
    Ok(HeteroBinding {
        column: column.to_string(),
        kind,
    })
}

/// Everything one run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub outcome: String,
    pub running: String,
    pub cutoff: f64,
    pub hetero: Vec<HeteroBinding>,
    pub cluster: Option<String>,
    pub spec: FitSpec<f64>,
    pub format: Format,
    pub seed: u64,
}

/// Parses command-line arguments (including the program name).
pub fn parse_config<I, A>(argv: I) -> Result<RunConfig, clap::Error>
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let args = Args::try_parse_from(argv)?;
    let usage = |msg: String| clap::Error::raw(clap::error::ErrorKind::ValueValidation, msg);
    if !args.cutoff.is_finite() {
        return Err(usage("--cutoff must be finite\n".into()));
    }
    let hetero = args
        .hetero
        .iter()
        .map(|h| parse_hetero(h))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("{e}\n")))?;
    let eval_points = args
        .at
        .iter()
        .map(|a| {
            a.split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| usage(format!("invalid --at `{a}`\n")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bandwidth = match (args.bw, &args.bw_side, args.bw_select) {
        (Some(h), _, _) => BandwidthChoice::Common(h),
        (_, Some(v), _) => BandwidthChoice::Fixed(v[0], v[1]),
        (_, _, Some(SelectArg::One)) => BandwidthChoice::Select(SelectMode::OneSided),
        _ => BandwidthChoice::Select(SelectMode::TwoSided),
    };
    let vce = match (args.vce, &args.cluster) {
        (Some(v), _) => match v {
            VceArg::Hc0 => Vce::HC0,
            VceArg::Hc1 => Vce::HC1,
            VceArg::Hc2 => Vce::HC2,
            VceArg::Hc3 => Vce::HC3,
            VceArg::Cluster => Vce::Cluster,
        },
        (None, Some(_)) => Vce::Cluster,
        (None, None) => Vce::HC3,
    };
    if vce == Vce::Cluster && args.cluster.is_none() {
        return Err(usage("--vce cluster needs --cluster\n".into()));
    }
    let spec = FitSpec {
        p: args.p,
        s: args.s,
        nu: args.deriv,
        kernel: match args.kernel {
            KernelArg::Tri => KernelKind::Triangular,
            KernelArg::Uni => KernelKind::Uniform,
            KernelArg::Epa => KernelKind::Epanechnikov,
        },
        bandwidth,
        bias_bandwidth: match args.bias_bw {
            BiasBwArg::Main => BiasBandwidth::MatchMain,
            BiasBwArg::Pilot => BiasBandwidth::Pilot,
        },
        vce,
        level: args.level,
        eval_points,
        ..FitSpec::default()
    };
    spec.validate().map_err(|e| usage(format!("{e}\n")))?;
    Ok(RunConfig {
        data: args.data,
        outcome: args.outcome,
        running: args.running,
        cutoff: args.cutoff,
        hetero,
        cluster: args.cluster,
        spec,
        format: args.format,
        seed: args.seed,
    })
}

/// Strict decimal syntax: optional sign, digits with at most one point, and an
/// optional exponent. Rejects `inf`, `nan`, hex and empty strings.
fn parse_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    let body = t.strip_prefix(['+', '-']).unwrap_or(t);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let digits = mantissa.chars().filter(|c| c.is_ascii_digit()).count();
    let points = mantissa.chars().filter(|&c| c == '.').count();
    if digits == 0 || points > 1 || digits + points != mantissa.len() {
        return None;
    }
    if let Some(e) = exponent {
        let e = e.strip_prefix(['+', '-']).unwrap_or(e);
        if e.is_empty() || !e.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
    }
    t.parse().ok()
}

/// How a bound column should be typed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    /// Must parse as decimal numbers.
    Numeric,
    /// Kept as text labels.
    Label,
    /// Numeric if every entry parses, text otherwise.
    Either,
}

/// Reads `path` and returns the bound columns, typed as requested. A UTF-8
/// byte-order mark before the header is ignored. Rows are numbered from 1
/// (the first data row).
pub fn load_csv(path: &Path, bindings: &[(String, ColumnType)]) -> Result<RawTable<f64>, CliError> {
    let io = |e: &dyn std::fmt::Display| CliError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    let bytes = std::fs::read(path).map_err(|e| io(&e))?;
    let body = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(&bytes);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| io(&e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut idx = Vec::with_capacity(bindings.len());
    for (name, _) in bindings {
        let i = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::MissingColumn(name.clone()))?;
        idx.push(i);
    }
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); bindings.len()];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| io(&e))?;
        for (c, &i) in idx.iter().enumerate() {
            let v = rec.get(i).unwrap_or("").trim();
            if v.is_empty() {
                return Err(CliError::ParseError {
                    row: r + 1,
                    column: bindings[c].0.clone(),
                    detail: "missing value".into(),
                });
            }
            cells[c].push(v.to_string());
        }
    }
    let mut table = RawTable::default();
    for ((name, ty), col) in bindings.iter().zip(cells) {
        let parsed: Vec<Option<f64>> = col.iter().map(|v| parse_decimal(v)).collect();
        let column = match ty {
            ColumnType::Label => RawColumn::Text(col),
            ColumnType::Either if parsed.iter().any(Option::is_none) => RawColumn::Text(col),
            _ => {
                if let Some(r) = parsed.iter().position(Option::is_none) {
                    return Err(CliError::ParseError {
                        row: r + 1,
                        column: name.clone(),
                        detail: format!("`{}` is not a number", col[r]),
                    });
                }
                RawColumn::Numeric(parsed.into_iter().flatten().collect())
            }
        };
        if table.get(name).is_none() {
            table.push(name.clone(), column);
        }
    }
    Ok(table)
}

/// Builds the sample and expanded covariates from a loaded table.
pub fn build_sample(
    config: &RunConfig,
    table: &RawTable<f64>,
) -> Result<(RdSample<f64>, ExpandedCovariates<f64>), CliError> {
    let numeric = |name: &str| match table.get(name) {
        Some(RawColumn::Numeric(v)) => Ok(v.clone()),
        Some(RawColumn::Text(_)) => Err(CliError::Estimation(RdError::NotNumeric(name.into()))),
        None => Err(CliError::MissingColumn(name.into())),
    };
    let y = numeric(&config.outcome)?;
    let x = numeric(&config.running)?;
    let mut spec = CovariateSpec::default();
    for h in &config.hetero {
        spec = spec.push(h.column.clone(), h.kind.clone());
    }
    let expanded = expand_covariates(table, &spec)?;
    let mut sample = RdSample::new(y, x, config.cutoff, expanded.w.clone());
    if let Some(c) = &config.cluster {
        let labels: Vec<String> = match table.get(c) {
            Some(RawColumn::Text(v)) => v.clone(),
            Some(RawColumn::Numeric(v)) => v.iter().map(|x| x.to_string()).collect(),
            None => return Err(CliError::MissingColumn(c.clone())),
        };
        let mut ids = BTreeMap::new();
        for l in &labels {
            let next = ids.len() as i64;
            ids.entry(l.clone()).or_insert(next);
        }
        sample = sample.with_clusters(labels.iter().map(|l| ids[l]).collect());
    }
    Ok((sample, expanded))
}

/// Loads the data and fits the model.
pub fn estimate(config: &RunConfig) -> Result<HteResultF64, CliError> {
    let mut bindings = vec![
        (config.outcome.clone(), ColumnType::Numeric),
        (config.running.clone(), ColumnType::Numeric),
    ];
    for h in &config.hetero {
        let ty = match h.kind {
            CovariateKind::Categorical { .. } => ColumnType::Label,
            CovariateKind::Binary => ColumnType::Either,
            _ => ColumnType::Numeric,
        };
        bindings.push((h.column.clone(), ty));
    }
    if let Some(c) = &config.cluster {
        bindings.push((c.clone(), ColumnType::Label));
    }
    let table = load_csv(&config.data, &bindings)?;
    let (sample, expanded) = build_sample(config, &table)?;
    Ok(fit_hte_grouped(
        &sample,
        &config.spec,
        &expanded.labels,
        &expanded.groups,
    )?)
}

/// Fits the model and renders it in the configured format.
pub fn run(config: &RunConfig) -> Result<String, CliError> {
    let result = estimate(config)?;
    Ok(render(&result, config.format))
}

pub fn render(result: &HteResultF64, format: Format) -> String {
    match format {
        Format::Table => render_table(result),
        Format::Json => render_json(result),
        Format::Csv => render_csv(result),
    }
}

#[derive(Serialize)]
struct JsonReport<'a> {
    schema: &'static str,
    cutoff: f64,
    #[serde(flatten)]
    result: &'a HteResultF64,
}

/// Full-precision JSON with top-level `"schema": "rdhte/1"`.
pub fn render_json(result: &HteResultF64) -> String {
    let report = JsonReport {
        schema: JSON_SCHEMA,
        cutoff: result.sample().cutoff,
        result,
    };
    let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
    s.push('\n');
    s
}

/// Three-decimal rounding without a negative zero.
pub fn fmt3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Values shown in one table row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowValues {
    pub label: String,
    pub point: f64,
    pub ci: (f64, f64),
    pub p_value: f64,
    pub eff_n: usize,
    pub h: (f64, f64),
}

/// Table header for a given confidence level.
pub fn table_header(level: f64) -> [String; 6] {
    let pct = level * 100.0;
    let pct = if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round())
    } else {
        format!("{pct}")
    };
    [
        "Estimand".into(),
        "Point Estimate".into(),
        format!("RBC {pct}% CI"),
        "RBC p-value".into(),
        "Sample Size".into(),
        "h".into(),
    ]
}

/// Cells of one row: three decimals, `[lo; hi]` intervals and `h-/h+` when the
/// two bandwidths differ.
pub fn format_row(row: &RowValues) -> [String; 6] {
    let h = if fmt3(row.h.0) == fmt3(row.h.1) {
        fmt3(row.h.0)
    } else {
        format!("{}/{}", fmt3(row.h.0), fmt3(row.h.1))
    };
    [
        row.label.clone(),
        fmt3(row.point),
        format!("[{}; {}]", fmt3(row.ci.0), fmt3(row.ci.1)),
        fmt3(row.p_value),
        row.eff_n.to_string(),
        h,
    ]
}

/// Rows of the result in report order.
pub fn row_values(result: &HteResultF64) -> Vec<RowValues> {
    result
        .records
        .iter()
        .map(|r| RowValues {
            label: r.label.clone(),
            point: r.point,
            ci: (r.ci_lower, r.ci_upper),
            p_value: r.p_value,
            eff_n: r.eff_n.0 + r.eff_n.1,
            h: r.h,
        })
        .collect()
}

/// Aligns header and rows into a pipe-separated text table.
pub fn layout_table(header: &[String; 6], rows: &[[String; 6]]) -> String {
    let mut width = [0usize; 6];
    for r in std::iter::once(header).chain(rows) {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |r: &[String; 6]| {
        let cells: Vec<String> = r
            .iter()
            .zip(width)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        format!("{}\n", cells.join(" | ").trim_end())
    };
    let mut out = line(header);
    let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
    out.push_str(&rule.join("-|-"));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

pub fn render_table(result: &HteResultF64) -> String {
    let rows: Vec<[String; 6]> = row_values(result).iter().map(format_row).collect();
    let mut out = layout_table(&table_header(result.spec.level), &rows);
    for w in &result.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

/// Same content as the table at full precision, with the interval and the
/// bandwidths split into numeric columns.
pub fn render_csv(result: &HteResultF64) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "estimand",
        "point_estimate",
        "rbc_ci_lower",
        "rbc_ci_upper",
        "rbc_p_value",
        "sample_size",
        "h_left",
        "h_right",
    ])
    .expect("in-memory write");
    for r in row_values(result) {
        w.write_record([
            r.label,
            r.point.to_string(),
            r.ci.0.to_string(),
            r.ci.1.to_string(),
            r.p_value.to_string(),
            r.eff_n.to_string(),
            r.h.0.to_string(),
            r.h.1.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 output")
}

/// Runs the command line `argv`, writing results to `out` and diagnostics to
/// `err`; returns the process exit code.
pub fn run_cli<I, A>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let config = match parse_config(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match run(&config) {
        Ok(s) => {
            let _ = out.write_all(s.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
