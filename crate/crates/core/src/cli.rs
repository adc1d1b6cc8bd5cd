//! Command-line surface: configuration merging, the figure pipelines and CSV/JSON output.
//!
//! Every artifact carries the resolved [`RunConfig`]: JSON reports under `"config"`, CSV
//! tables as trailing `seed` and `config` columns, so a header row stays the first line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::combine::{
    escape_surrogate, estimate_varrho, predict, regular_stats, sensitivities, sliding_stats, PhaseInputs,
    PhaseStats, DIFF_TERM_LABELS, VAR_TERM_LABELS,
};
use crate::error::{Error, Result};
use crate::escape::{escape_scaling, escape_x1_stats, knessl_table, u_moments, ContourOptions};
use crate::filippov::{build_relay_model, FilippovSde, NoiseSpec, PhaseAnchors, RelayModel, RelayParams};
use crate::mc::{oscillation_times, sample_passages, Direction, Plane, ReturnProtocol, SimConfig};
use crate::regular::RegularTheory;
use crate::stats::{summarize, summarize_scalar, PassageSample, ScalarStats};

/// Integration step for the regular-phase covariance ODE.
const REGULAR_H: f64 = 1e-3;
/// RK4 step along the averaged sliding path.
const SLIDING_H: f64 = 1e-4;
/// Step of the sensitivity finite differences.
const SENS_H: f64 = 1e-5;
/// Time perturbation for the ϱ finite difference.
const VARRHO_DT: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "fstoch", version, about = "Stochastic Filippov systems: simulation and first-passage theory")]
pub struct Cli {
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by all subcommands; each overrides the same key of `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Flat `key = value` file; flags win over its entries.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub zeta: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub omega: Option<f64>,
    /// `B`, `e1` or `matrix:<9 comma-separated values>` (transformed coordinates, row-major).
    #[arg(long, global = true)]
    pub noise: Option<String>,
    /// Comma-separated noise levels.
    #[arg(long, global = true)]
    pub eps: Option<String>,
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Samples per noise level, or oscillations for oscillation runs.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub delta_minus: Option<f64>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub delta_plus: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Report the nine-term sums instead of the three-term truncations.
    #[arg(long, global = true)]
    pub full_sums: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Regular,
    Sliding,
    Escape,
    Osc,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Deterministic phase anchors of the periodic orbit.
    Anchors,
    /// Monte-Carlo samples of one phase or of full oscillations.
    Simulate {
        #[arg(long, value_enum, default_value = "osc")]
        phase: Phase,
    },
    /// Analytic regular-phase Diff/Std over the ε list.
    Regular,
    /// Analytic sliding-phase Diff/Std over the ε list.
    Sliding,
    /// Analytic escape statistics of `x₁` over the ε list.
    Escape,
    /// Oscillation-time prediction with its per-term breakdown.
    Combine,
    /// Figure pipeline: 2, 4, 5, 6, 7, 8 or 9.
    Figure {
        #[arg(value_parser = clap::value_parser!(u8).range(2..=9))]
        which: u8,
    },
}

/// Fully resolved configuration, embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub params: RelayParams,
    pub noise: String,
    pub eps: Vec<f64>,
    pub dt: f64,
    pub seed: u64,
    pub n: usize,
    pub delta_minus: f64,
    pub delta_plus: f64,
    pub out: PathBuf,
    pub full_sums: bool,
}

impl RunConfig {
    fn noise_spec(&self) -> Result<NoiseSpec> {
        self.noise.parse()
    }

    fn sim(&self, eps: f64) -> SimConfig {
        SimConfig { eps, dt: self.dt, seed: self.seed, n_samples: self.n, ..Default::default() }
    }
}

/// Per-command defaults for the ε list, `dt` and `n`.
fn defaults(cmd: &Command) -> (Vec<f64>, f64, usize) {
    match cmd {
        Command::Figure { which: 2 | 9 } | Command::Simulate { phase: Phase::Osc } => (vec![1e-5, 1e-4, 1e-3], 1e-4, 200),
        Command::Figure { which: 4 } | Command::Simulate { phase: Phase::Regular } | Command::Regular => {
            (vec![1e-6, 1e-5, 1e-4], 1e-4, 500)
        }
        Command::Figure { which: 5 | 6 } | Command::Simulate { phase: Phase::Sliding } | Command::Sliding => {
            (vec![1e-6, 1e-5, 1e-4], 1e-5, 500)
        }
        Command::Figure { which: 7 } | Command::Simulate { phase: Phase::Escape } | Command::Escape => {
            (vec![1e-6, 1e-5, 1e-4], 1e-5, 500)
        }
        _ => (vec![1e-4], 1e-4, 200),
    }
}

fn command_name(cmd: &Command) -> String {
    match cmd {
        Command::Anchors => "anchors".into(),
        Command::Simulate { phase } => format!("simulate_{}", format!("{phase:?}").to_lowercase()),
        Command::Regular => "regular".into(),
        Command::Sliding => "sliding".into(),
        Command::Escape => "escape".into(),
        Command::Combine => "combine".into(),
        Command::Figure { which } => format!("figure{which}"),
    }
}

/// Parses a comma-separated ε list; every entry must be positive.
pub fn parse_eps_list(s: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad eps value '{p}'"))))
        .collect::<Result<_>>()?;
    if v.is_empty() || v.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidInput(format!("eps list must be non-empty and positive: {s}")));
    }
    Ok(v)
}

/// Reads a flat `key = value` file into [`Flags`]; `#` starts a comment.
pub fn parse_config_file(text: &str) -> Result<Flags> {
    let mut f = Flags::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidInput(format!("config line {}: expected key = value", lineno + 1)))?;
        let (k, v) = (k.trim().replace('_', "-"), v.trim());
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::InvalidInput(format!("config {k}: bad number '{v}'")));
        match k.as_str() {
            "zeta" => f.zeta = Some(num(v)?),
            "lambda" => f.lambda = Some(num(v)?),
            "omega" => f.omega = Some(num(v)?),
            "noise" => f.noise = Some(v.to_string()),
            "eps" => f.eps = Some(v.to_string()),
            "dt" => f.dt = Some(num(v)?),
            "seed" => f.seed = Some(v.parse().map_err(|_| Error::InvalidInput(format!("config seed: '{v}'")))?),
            "n" => f.n = Some(v.parse().map_err(|_| Error::InvalidInput(format!("config n: '{v}'")))?),
            "delta-minus" => f.delta_minus = Some(num(v)?),
            "delta-plus" => f.delta_plus = Some(num(v)?),
            "out" => f.out = Some(PathBuf::from(v)),
            "full-sums" => f.full_sums = matches!(v, "true" | "1" | "yes"),
            _ => return Err(Error::InvalidInput(format!("config line {}: unknown key '{k}'", lineno + 1))),
        }
    }
    Ok(f)
}

/// Merges flags over the config file over per-command defaults.
pub fn resolve(cmd: &Command, flags: &Flags) -> Result<RunConfig> {
    let file = match &flags.config {
        Some(p) => parse_config_file(&fs::read_to_string(p)?)?,
        None => Flags::default(),
    };
    let (eps_d, dt_d, n_d) = defaults(cmd);
    let p = RelayParams::default();
    let eps = match flags.eps.as_ref().or(file.eps.as_ref()) {
        Some(s) => parse_eps_list(s)?,
        None => eps_d,
    };
    let noise = match cmd {
        Command::Figure { which: 5 } => "B".to_string(),
        Command::Figure { which: 6 } => "e1".to_string(),
        _ => flags.noise.clone().or(file.noise).unwrap_or_else(|| "B".into()),
    };
    let cfg = RunConfig {
        command: command_name(cmd),
        params: RelayParams {
            zeta: flags.zeta.or(file.zeta).unwrap_or(p.zeta),
            lambda: flags.lambda.or(file.lambda).unwrap_or(p.lambda),
            omega: flags.omega.or(file.omega).unwrap_or(p.omega),
        },
        noise,
        eps,
        dt: flags.dt.or(file.dt).unwrap_or(dt_d),
        seed: flags.seed.or(file.seed).unwrap_or(1),
        n: flags.n.or(file.n).unwrap_or(n_d),
        delta_minus: flags.delta_minus.or(file.delta_minus).unwrap_or(-0.1),
        delta_plus: flags.delta_plus.or(file.delta_plus).unwrap_or(0.2),
        out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("fstoch-out")),
        full_sums: flags.full_sums || file.full_sums,
    };
    cfg.noise_spec()?;
    if !(cfg.dt > 0.0) || cfg.n < 2 {
        return Err(Error::InvalidInput("need dt > 0 and n >= 2".into()));
    }
    Ok(cfg)
}

struct Setup {
    model: RelayModel,
    anchors: PhaseAnchors,
    sys: FilippovSde,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    let (model, anchors) = build_relay_model(cfg.params, cfg.delta_minus, cfg.delta_plus)?;
    let sys = model.system(&cfg.noise_spec()?)?;
    Ok(Setup { model, anchors, sys })
}

/// A table with a fixed header; `seed` and `config` columns are appended on writing.
struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn write_csv(path: &Path, table: &Table, cfg: &RunConfig) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let config = serde_json::to_string(cfg).map_err(|e| Error::Io(e.to_string()))?;
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header: Vec<&str> = table.header.clone();
    header.extend(["seed", "config"]);
    w.write_record(&header).map_err(io)?;
    for row in &table.rows {
        let mut r = row.clone();
        r.push(cfg.seed.to_string());
        r.push(config.clone());
        w.write_record(&r).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json(path: &Path, body: Value, cfg: &RunConfig) -> Result<()> {
    let mut obj = json!({ "config": cfg, "seed": cfg.seed });
    if let (Value::Object(o), Value::Object(b)) = (&mut obj, body) {
        o.extend(b);
    }
    let text = serde_json::to_string_pretty(&obj).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Io(e.to_string()))
}

/// Files written by one command.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub csv: Option<PathBuf>,
    pub json: PathBuf,
}

fn emit(cfg: &RunConfig, body: Value, table: Option<Table>) -> Result<Artifacts> {
    fs::create_dir_all(&cfg.out)?;
    let json_path = cfg.out.join(format!("{}.json", cfg.command));
    write_json(&json_path, body, cfg)?;
    let csv = match table {
        Some(t) => {
            let p = cfg.out.join(format!("{}.csv", cfg.command));
            write_csv(&p, &t, cfg)?;
            Some(p)
        }
        None => None,
    };
    Ok(Artifacts { csv, json: json_path })
}

/// Monte-Carlo against theory for one scalar, `None` where no theory exists.
#[derive(Debug, Clone, Serialize)]
struct Comparison {
    eps: f64,
    quantity: &'static str,
    mc: ScalarStats,
    diff_theory: Option<f64>,
    std_theory: Option<f64>,
}

const COMPARISON_HEADER: [&str; 10] =
    ["eps", "quantity", "diff_mean", "diff_ci", "diff_theory", "std_mean", "std_lo", "std_hi", "std_theory", "n"];

fn comparison_table(rows: &[Comparison]) -> Table {
    Table {
        header: COMPARISON_HEADER.to_vec(),
        rows: rows
            .iter()
            .map(|c| {
                vec![
                    num(c.eps),
                    c.quantity.to_string(),
                    num(c.mc.diff),
                    num(c.mc.mean_ci),
                    opt(c.diff_theory),
                    num(c.mc.std),
                    num(c.mc.std_lo),
                    num(c.mc.std_hi),
                    opt(c.std_theory),
                    c.mc.n.to_string(),
                ]
            })
            .collect(),
    }
}

/// Start, target plane and deterministic reference of a passage phase.
fn phase_problem(s: &Setup, phase: Phase) -> (Vec<f64>, Plane, f64, Vec<f64>) {
    let a = &s.anchors;
    match phase {
        Phase::Regular => {
            (a.x_gamma_e.clone(), Plane { index: 0, level: 0.0, direction: Direction::Down }, a.t_gamma_r, a.x_gamma_r.clone())
        }
        Phase::Sliding => (
            a.x_gamma_m.clone(),
            Plane { index: 1, level: a.delta_minus, direction: Direction::Up },
            a.t_gamma_s,
            a.x_gamma_s.clone(),
        ),
        Phase::Escape | Phase::Osc => (
            a.x_gamma_s.clone(),
            Plane { index: 1, level: a.delta_plus, direction: Direction::Up },
            a.t_gamma_e,
            a.x_gamma_e.clone(),
        ),
    }
}

/// Analytic Diff/Std of `(t, x_i)` for a phase; `None` entries have no theory.
type Theory = Vec<(&'static str, Option<f64>, Option<f64>)>;

fn phase_theory(s: &Setup, phase: Phase, eps: f64) -> Result<Theory> {
    let from_stats = |st: PhaseStats, comps: [(usize, &'static str); 2]| -> Theory {
        let mut v = vec![("t", Some(st.diff_t), Some(st.var_t.max(0.0).sqrt()))];
        for (i, name) in comps {
            v.push((name, Some(st.diff_x[i]), Some(st.cov_x[(i, i)].max(0.0).sqrt())));
        }
        v
    };
    Ok(match phase {
        Phase::Regular => {
            let th = RegularTheory::new(&s.sys, &s.anchors.x_gamma_e, REGULAR_H)?;
            from_stats(regular_stats(&th, eps)?, [(1, "x2"), (2, "x3")])
        }
        Phase::Sliding => from_stats(sliding_stats(&s.sys, &s.anchors, eps, SLIDING_H)?, [(0, "x1"), (2, "x3")]),
        Phase::Escape | Phase::Osc => {
            let sc = escape_scaling(&s.sys)?;
            let x1 = escape_x1_stats(&sc, eps, s.anchors.delta_plus, &ContourOptions::default())?;
            vec![("t", None, None), ("x1", Some(x1.diff), Some(x1.std)), ("x3", None, None)]
        }
    })
}

fn component_index(name: &str) -> Option<usize> {
    match name {
        "x1" => Some(0),
        "x2" => Some(1),
        "x3" => Some(2),
        _ => None,
    }
}

fn phase_samples(s: &Setup, cfg: &RunConfig, phase: Phase, eps: f64) -> Result<(Vec<PassageSample>, f64, Vec<f64>)> {
    let (x0, plane, t_ref, x_ref) = phase_problem(s, phase);
    Ok((sample_passages(&s.sys, &cfg.sim(eps), &x0, &plane)?, t_ref, x_ref))
}

fn passage_comparison(s: &Setup, cfg: &RunConfig, phase: Phase) -> Result<(Vec<Comparison>, Value)> {
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for &eps in &cfg.eps {
        let (samples, t_ref, x_ref) = phase_samples(s, cfg, phase, eps)?;
        let st = summarize(&samples, t_ref, &x_ref)?;
        for (name, d, sd) in phase_theory(s, phase, eps)? {
            let mc = match component_index(name) {
                Some(i) => st.location[i],
                None => st.time,
            };
            rows.push(Comparison { eps, quantity: name, mc, diff_theory: d, std_theory: sd });
        }
        stats.push(json!({ "eps": eps, "stats": to_value(&st)? }));
    }
    Ok((rows, Value::Array(stats)))
}

/// Oscillation times along one long path per ε, started at `x_Γ^M`.
#[derive(Debug, Clone, Serialize)]
struct OscStats {
    eps: f64,
    osc: ScalarStats,
    half: ScalarStats,
    partial: bool,
}

fn oscillation_stats(s: &Setup, cfg: &RunConfig) -> Result<(Vec<OscStats>, Vec<(f64, Vec<f64>, Vec<f64>)>)> {
    let proto = ReturnProtocol { delta_plus: cfg.delta_plus, mirror_center: Some(s.model.q.as_slice().to_vec()) };
    let runs: Vec<Result<_>> = cfg
        .eps
        .par_iter()
        .map(|&eps| {
            let sim = SimConfig { n_samples: 1, ..cfg.sim(eps) };
            let run = oscillation_times(&s.sys, &sim, &s.anchors.x_gamma_m, &proto, cfg.n)?;
            let osc = summarize_scalar(&run.t_osc, s.anchors.t_osc_gamma)?;
            let half = summarize_scalar(&run.t_half, 0.5 * s.anchors.t_osc_gamma)?;
            Ok((OscStats { eps, osc, half, partial: run.partial }, (eps, run.t_osc, run.t_half)))
        })
        .collect();
    let (stats, raw): (Vec<_>, Vec<_>) = runs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    Ok((stats, raw))
}

/// Everything the chain needs that does not depend on ε.
struct ChainSetup {
    regular: RegularTheory,
    sens: crate::combine::SensitivityMatrices,
    varrho: f64,
}

fn chain_setup(s: &Setup) -> Result<ChainSetup> {
    let regular = RegularTheory::new(&s.sys, &s.anchors.x_gamma_e, REGULAR_H)?;
    let sens = sensitivities(&s.sys, &s.anchors, SENS_H)?;
    let mirror = |x: &[f64]| s.model.mirror(x);
    let varrho = estimate_varrho(&s.sys, &s.anchors, &mirror, &regular, VARRHO_DT)?;
    Ok(ChainSetup { regular, sens, varrho })
}

fn prediction(s: &Setup, cfg: &RunConfig, c: &ChainSetup, eps: f64) -> Result<crate::combine::OscillationPrediction> {
    // the escape surrogate needs dt well below the ε^{2/3} scale of x₁
    let esc_cfg = SimConfig { dt: cfg.dt.min(1e-5), ..cfg.sim(eps) };
    let inputs = PhaseInputs {
        regular: regular_stats(&c.regular, eps)?,
        sliding: sliding_stats(&s.sys, &s.anchors, eps, SLIDING_H)?,
        escape: escape_surrogate(&s.sys, &s.anchors, &esc_cfg)?,
    };
    Ok(predict(&inputs, &c.sens, c.varrho, cfg.full_sums))
}

fn labelled(labels: &[&str; 9], values: &[f64; 9]) -> Value {
    Value::Array(labels.iter().zip(values).map(|(l, v)| json!({ "term": l, "value": v })).collect())
}

fn run_anchors(cfg: &RunConfig) -> Result<Artifacts> {
    let s = setup(cfg)?;
    let a = &s.anchors;
    println!("Z       = {:.7}", s.model.z);
    println!("t_S     = {:.8}", a.t_gamma_s);
    println!("t_E     = {:.8}", a.t_gamma_e);
    println!("t_R     = {:.8}", a.t_gamma_r);
    println!("t_osc   = {:.7}", a.t_osc_gamma);
    println!("x_M     = {:?}", a.x_gamma_m);
    println!("x_S     = {:?}", a.x_gamma_s);
    println!("x_E     = {:?}", a.x_gamma_e);
    println!("x_R     = {:?}", a.x_gamma_r);
    println!("|x_R - x_int^R| = {:e}", a.dist_r_to_int);
    emit(cfg, json!({ "z": s.model.z, "t_slide": s.model.t_slide, "anchors": to_value(a)? }), None)
}

fn run_simulate(cfg: &RunConfig, phase: Phase) -> Result<Artifacts> {
    let s = setup(cfg)?;
    if phase == Phase::Osc {
        let (stats, raw) = oscillation_stats(&s, cfg)?;
        let mut rows = Vec::new();
        for (eps, osc, half) in &raw {
            for (kind, v) in [("osc", osc), ("half", half)] {
                rows.extend(v.iter().enumerate().map(|(i, t)| vec![num(*eps), kind.into(), i.to_string(), num(*t)]));
            }
        }
        let table = Table { header: vec!["eps", "kind", "index", "time"], rows };
        return emit(cfg, json!({ "phase": phase, "oscillations": to_value(&stats)? }), Some(table));
    }
    let name = format!("{phase:?}").to_lowercase();
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for &eps in &cfg.eps {
        let (samples, t_ref, x_ref) = phase_samples(&s, cfg, phase, eps)?;
        for (k, p) in samples.iter().enumerate() {
            let mut r = vec![num(eps), k.to_string(), name.clone(), num(p.time)];
            r.extend(p.location.iter().map(|x| num(*x)));
            rows.push(r);
        }
        stats.push(json!({ "eps": eps, "stats": to_value(&summarize(&samples, t_ref, &x_ref)?)? }));
    }
    let table = Table { header: vec!["eps", "replicate", "phase", "time", "x1", "x2", "x3"], rows };
    emit(cfg, json!({ "phase": phase, "passages": stats }), Some(table))
}

fn run_analytic(cfg: &RunConfig, phase: Phase) -> Result<Artifacts> {
    let s = setup(cfg)?;
    if phase == Phase::Escape {
        let sc = escape_scaling(&s.sys)?;
        let mut rows = Vec::new();
        let mut out = Vec::new();
        for &eps in &cfg.eps {
            let x = escape_x1_stats(&sc, eps, cfg.delta_plus, &ContourOptions::default())?;
            rows.push(vec![num(eps), num(x.s), num(x.mean_u), num(x.var_u), num(x.diff), num(x.std)]);
            out.push(to_value(&x)?);
        }
        let table = Table { header: vec!["eps", "s", "mean_u", "var_u", "diff_x1", "std_x1"], rows };
        return emit(cfg, json!({ "scaling": to_value(&sc)?, "x1": out }), Some(table));
    }
    let mut rows = Vec::new();
    for &eps in &cfg.eps {
        for (name, d, sd) in phase_theory(&s, phase, eps)? {
            rows.push(vec![num(eps), name.to_string(), opt(d), opt(sd)]);
        }
    }
    let body = json!({ "phase": phase, "rows": rows });
    emit(cfg, body, Some(Table { header: vec!["eps", "quantity", "diff", "std"], rows }))
}

fn run_combine(cfg: &RunConfig) -> Result<Artifacts> {
    let s = setup(cfg)?;
    let c = chain_setup(&s)?;
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &eps in &cfg.eps {
        let p = prediction(&s, cfg, &c, eps)?;
        if p.clamped {
            eprintln!("warning: negative assembled variance at eps = {eps} clamped to 0");
        }
        rows.push(vec![num(eps), num(p.diff_half), num(p.std_half), num(p.diff_osc), num(p.std_osc)]);
        reports.push(json!({
            "eps": eps,
            "prediction": to_value(&p)?,
            "diff_terms": labelled(&DIFF_TERM_LABELS, &p.diff.terms),
            "var_terms": labelled(&VAR_TERM_LABELS, &p.var.terms),
            "varrho": p.varrho,
        }));
    }
    let body = json!({ "varrho": c.varrho, "sensitivities": to_value(&c.sens)?, "predictions": reports });
    let table = Table { header: vec!["eps", "diff_half", "std_half", "diff_osc", "std_osc"], rows };
    emit(cfg, body, Some(table))
}

fn run_figure(cfg: &RunConfig, which: u8) -> Result<Artifacts> {
    match which {
        2 => {
            let s = setup(cfg)?;
            let (stats, _) = oscillation_stats(&s, cfg)?;
            let rows = stats
                .iter()
                .map(|o| vec![num(o.eps), num(o.osc.diff), num(o.osc.mean_ci), num(o.osc.std), num(o.osc.std_ci_half())])
                .collect();
            let table = Table { header: vec!["eps", "diff_mean", "diff_ci", "std_mean", "std_ci"], rows };
            emit(cfg, json!({ "t_osc_gamma": s.anchors.t_osc_gamma, "oscillations": to_value(&stats)? }), Some(table))
        }
        4 | 5 | 6 | 7 => {
            let s = setup(cfg)?;
            let phase = match which {
                4 => Phase::Regular,
                5 | 6 => Phase::Sliding,
                _ => Phase::Escape,
            };
            let (rows, stats) = passage_comparison(&s, cfg, phase)?;
            let body = json!({ "phase": phase, "comparison": to_value(&rows)?, "passages": stats });
            emit(cfg, body, Some(comparison_table(&rows)))
        }
        8 => {
            let opts = ContourOptions::default();
            let u: Vec<f64> = (0..=120).map(|i| 0.05 * i as f64).collect();
            let mut rows = Vec::new();
            let mut moments = Vec::new();
            for s in [-1.0, 0.0, 1.0, 2.0] {
                let t = knessl_table(s, &u, &opts)?;
                rows.extend(t.u.iter().zip(&t.p).map(|(u, p)| vec![num(s), num(*u), num(*p)]));
                moments.push(json!({ "s": s, "moments": to_value(&u_moments(s, &opts, 24)?)?, "error_estimate": t.error_estimate }));
            }
            emit(cfg, json!({ "moments": moments }), Some(Table { header: vec!["s", "u", "p"], rows }))
        }
        9 => {
            let s = setup(cfg)?;
            let c = chain_setup(&s)?;
            let (stats, _) = oscillation_stats(&s, cfg)?;
            let mut rows = Vec::new();
            let mut preds = Vec::new();
            for o in &stats {
                let p = prediction(&s, cfg, &c, o.eps)?;
                rows.push(vec![
                    num(o.eps),
                    num(o.half.diff),
                    num(o.half.mean_ci),
                    num(p.diff_half),
                    num(o.half.std),
                    num(o.half.std_ci_half()),
                    num(p.std_half),
                    num(o.osc.diff),
                    num(o.osc.mean_ci),
                    num(p.diff_osc),
                    num(o.osc.std),
                    num(o.osc.std_ci_half()),
                    num(p.std_osc),
                ]);
                preds.push(to_value(&p)?);
            }
            let header = vec![
                "eps",
                "diff_half_mean",
                "diff_half_ci",
                "diff_half_theory",
                "std_half_mean",
                "std_half_ci",
                "std_half_theory",
                "diff_osc_mean",
                "diff_osc_ci",
                "diff_osc_theory",
                "std_osc_mean",
                "std_osc_ci",
                "std_osc_theory",
            ];
            let body = json!({ "varrho": c.varrho, "oscillations": to_value(&stats)?, "predictions": preds });
            emit(cfg, body, Some(Table { header, rows }))
        }
        _ => Err(Error::InvalidInput(format!("no pipeline for figure {which} (choose 2, 4, 5, 6, 7, 8 or 9)"))),
    }
}

/// Caps the global thread pool from `FSTOCH_THREADS`; results do not depend on it.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FSTOCH_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::InvalidInput(format!("FSTOCH_THREADS = '{v}'")))?;
        // a pool already built by an earlier call in this process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

/// Runs a parsed command and returns the written artifacts.
pub fn execute(cli: &Cli) -> Result<Artifacts> {
    init_threads()?;
    let cfg = resolve(&cli.command, &cli.flags)?;
    match &cli.command {
        Command::Anchors => run_anchors(&cfg),
        Command::Simulate { phase } => run_simulate(&cfg, *phase),
        Command::Regular => run_analytic(&cfg, Phase::Regular),
        Command::Sliding => run_analytic(&cfg, Phase::Sliding),
        Command::Escape => run_analytic(&cfg, Phase::Escape),
        Command::Combine => run_combine(&cfg),
        Command::Figure { which } => run_figure(&cfg, *which),
    }
}

/// Entry point: parses `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(a) => {
            if let Some(c) = &a.csv {
                println!("wrote {}", c.display());
            }
            println!("wrote {}", a.json.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eps_list_rejects_nonpositive() {
        assert_eq!(parse_eps_list("1e-5, 1e-4").unwrap(), vec![1e-5, 1e-4]);
        assert!(parse_eps_list("1e-4,0").is_err());
        assert!(parse_eps_list("abc").is_err());
    }

    #[test]
    fn config_file_parses_and_rejects_unknown_keys() {
        let f = parse_config_file("# sweep\nzeta = 0.4\ndelta_minus = -0.05\neps=1e-5,1e-4\nseed = 7\n").unwrap();
        assert_eq!(f.zeta, Some(0.4));
        assert_eq!(f.delta_minus, Some(-0.05));
        assert_eq!(f.seed, Some(7));
        assert!(parse_config_file("bogus = 1").is_err());
        assert!(parse_config_file("zeta 0.4").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "seed = 7\nn = 50\ndt = 1e-3\n").unwrap();
        let flags = Flags { config: Some(path), seed: Some(3), ..Default::default() };
        let cfg = resolve(&Command::Figure { which: 2 }, &flags).unwrap();
        assert_eq!((cfg.seed, cfg.n, cfg.dt), (3, 50, 1e-3));
        assert_eq!(cfg.eps, vec![1e-5, 1e-4, 1e-3]);
    }

    #[test]
    fn figure_six_forces_normal_noise() {
        let flags = Flags { noise: Some("B".into()), ..Default::default() };
        assert_eq!(resolve(&Command::Figure { which: 6 }, &flags).unwrap().noise, "e1");
    }

    #[test]
    fn bad_noise_is_rejected() {
        let flags = Flags { noise: Some("matrix:1,2".into()), ..Default::default() };
        assert!(resolve(&Command::Anchors, &flags).is_err());
    }

    #[test]
    fn negative_deltas_parse_as_values() {
        let cli = Cli::try_parse_from(["fstoch", "anchors", "--delta-minus", "-0.05"]).unwrap();
        assert_eq!(cli.flags.delta_minus, Some(-0.05));
        assert!(Cli::try_parse_from(["fstoch", "figure", "3"]).is_ok());
        assert!(Cli::try_parse_from(["fstoch", "figure", "10"]).is_err());
    }
}
