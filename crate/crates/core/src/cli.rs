//! The `brq` command line: `bounds`, `curves` and `simulate`.
//!
//! Settings come from a flat `key = value` file (`--config`) and are then
//! overridden by flags of the same name (`p_min` is `--p-min`, and so on).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::bounds::{
    ems_bound_prop1, ems_bound_thm1, ems_bound_thm1_at, emssf_bound_loosened, flat_gammas_ln, BoundBreakdown, Engine,
    LoosenedBound, MessageSchedule,
};
use crate::channel::{capacity, dispersion, ChannelParams, Span, State, Unit};
use crate::dist::Rounding;
use crate::error::{Error, Result};
use crate::schemes::{ln_m1_grid, sweep, Scheme, SchemeConfig, SweepRow};
use crate::simulate::{simulate_ems, simulate_emssf, SimMode, TrialReport};

pub const CSV_HEADER: &str =
    "scheme,M1,epsilon,avg_blocks,avg_blocklength,avg_nats,rate_bits,eps_certified,truncation_gap";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_GUARD: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMethod {
    Thm1,
    Prop1,
    Both,
    Loosened,
}

/// Every setting of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub params: ChannelParams,
    pub scheme: SchemeConfig,
    /// Grid step in nats; `None` selects the exact lattice engine.
    pub step: Option<f64>,
    pub rounding: Rounding,
    pub m1_min_bits: Option<f64>,
    pub m1_max_bits: Option<f64>,
    pub points: usize,
    pub schemes: Vec<Scheme>,
    pub states: Vec<State>,
    pub m: Vec<f64>,
    pub method: BoundMethod,
    pub mode: SimMode,
    pub trials: u64,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub svg: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub unit: Unit,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

/// Keys accepted in config files.
pub const KEYS: &[&str] = &[
    "delta0",
    "delta1",
    "q",
    "T",
    "epsilon",
    "beta",
    "step",
    "rounding",
    "horizon",
    "p_min",
    "max_expansions",
    "m1_min_bits",
    "m1_max_bits",
    "points",
    "schemes",
    "states",
    "m",
    "method",
    "mode",
    "trials",
    "gamma",
    "seed",
    "out",
    "svg",
    "json",
    "unit",
    "threads",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            params: ChannelParams {
                delta0: 0.30,
                delta1: 0.05,
                q: 0.6,
                t: 100,
            },
            scheme: SchemeConfig::default(),
            step: None,
            rounding: Rounding::Pessimistic,
            m1_min_bits: None,
            m1_max_bits: None,
            points: 40,
            schemes: Scheme::ALL.to_vec(),
            states: vec![State::Bad, State::Good, State::Bad],
            m: vec![4.0, 3.0, 2.0],
            method: BoundMethod::Both,
            mode: SimMode::Ems,
            trials: 100_000,
            gamma: None,
            seed: 1,
            out: None,
            svg: None,
            json: None,
            unit: Unit::Bits,
            threads: 0,
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| cfg_err(format!("{key}: cannot parse {v:?}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "delta0" => self.params.delta0 = num(key, v)?,
            "delta1" => self.params.delta1 = num(key, v)?,
            "q" => self.params.q = num(key, v)?,
            "T" | "t" => self.params.t = num(key, v)?,
            "epsilon" => self.scheme.epsilon = num(key, v)?,
            "beta" => self.scheme.beta = num(key, v)?,
            "step" => {
                self.step = match v {
                    "" | "exact" => None,
                    s => Some(num(key, s)?),
                }
            }
            "rounding" => {
                self.rounding = match v {
                    "pessimistic" => Rounding::Pessimistic,
                    "optimistic" => Rounding::Optimistic,
                    _ => return cfg_err(format!("rounding must be pessimistic or optimistic, got {v:?}")),
                }
            }
            "horizon" => self.scheme.horizon = num(key, v)?,
            "p_min" => self.scheme.p_min = num(key, v)?,
            "max_expansions" => self.scheme.max_expansions = num(key, v)?,
            "m1_min_bits" => self.m1_min_bits = Some(num(key, v)?),
            "m1_max_bits" => self.m1_max_bits = Some(num(key, v)?),
            "points" => self.points = num(key, v)?,
            "schemes" => {
                self.schemes = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(Scheme::parse)
                    .collect::<Result<_>>()?
            }
            "states" => self.states = State::parse_list(v)?,
            "m" => {
                self.m = v
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "method" => {
                self.method = match v {
                    "thm1" => BoundMethod::Thm1,
                    "prop1" => BoundMethod::Prop1,
                    "both" => BoundMethod::Both,
                    "loosened" => BoundMethod::Loosened,
                    _ => return cfg_err(format!("method must be thm1, prop1, both or loosened, got {v:?}")),
                }
            }
            "mode" => {
                self.mode = match v {
                    "ems" => SimMode::Ems,
                    "emssf" => SimMode::Emssf,
                    _ => return cfg_err(format!("mode must be ems or emssf, got {v:?}")),
                }
            }
            "trials" => self.trials = num(key, v)?,
            "gamma" => {
                self.gamma = match v {
                    "" | "auto" => None,
                    s => Some(num(key, s)?),
                }
            }
            "seed" => self.seed = num(key, v)?,
            "out" => self.out = opt_path(v),
            "svg" => self.svg = opt_path(v),
            "json" => self.json = opt_path(v),
            "unit" => {
                self.unit = match v {
                    "bits" => Unit::Bits,
                    "nats" => Unit::Nats,
                    _ => return cfg_err(format!("unit must be bits or nats, got {v:?}")),
                }
            }
            "threads" => self.threads = num(key, v)?,
            _ => return cfg_err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a config file body: one `key = value` per line, `#` starts a
    /// comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return cfg_err(format!("line {}: expected key = value", i + 1));
            };
            let k = k.trim();
            if k != "t" && !KEYS.contains(&k) {
                return cfg_err(format!("line {}: unknown key {k:?}", i + 1));
            }
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.scheme.validate()?;
        if let Some(s) = self.step {
            if !(s > 0.0 && s.is_finite()) {
                return cfg_err(format!("step must be positive, got {s}"));
            }
        }
        let (lo, hi) = self.sweep_bits();
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return cfg_err(format!("sweep range [{lo}, {hi}] bits is not a valid range"));
        }
        if self.points == 0 {
            return cfg_err("points must be at least 1");
        }
        if self.schemes.is_empty() {
            return cfg_err("no schemes selected");
        }
        Ok(())
    }

    pub fn engine(&self) -> Engine {
        match self.step {
            None => Engine::Exact,
            Some(step) => Engine::Grid {
                step,
                rounding: self.rounding,
            },
        }
    }

    /// `log2 M_1` range of the sweep, `[0.1 T, 3 T]` unless set.
    pub fn sweep_bits(&self) -> (f64, f64) {
        let t = self.params.t as f64;
        (self.m1_min_bits.unwrap_or(0.1 * t), self.m1_max_bits.unwrap_or(3.0 * t))
    }

    fn schedule(&self) -> Result<MessageSchedule> {
        MessageSchedule::from_sizes(&self.m)
    }

    fn int_sizes(&self) -> Result<Vec<u32>> {
        self.m
            .iter()
            .map(|&x| {
                if x >= 1.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
                    Ok(x as u32)
                } else {
                    cfg_err(format!("simulation needs integer message-set sizes, got {x}"))
                }
            })
            .collect()
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "brq",
    about = "Achievable rates for a two-state block-fading BSC with delayed CSIT"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Copy, Clone, Debug, Subcommand)]
enum Cmd {
    /// Error bounds of one message schedule over given states.
    Bounds,
    /// Rate against average blocklength for the selected schemes, as CSV.
    Curves,
    /// Monte Carlo trials of random tree codes next to the analytic bound.
    Simulate,
}

#[derive(Debug, Args)]
struct Flags {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    delta0: Option<String>,
    #[arg(long, global = true)]
    delta1: Option<String>,
    #[arg(long, global = true)]
    q: Option<String>,
    /// Channel uses per block.
    #[arg(long = "T", short = 'T', global = true)]
    t: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<String>,
    #[arg(long, global = true)]
    beta: Option<String>,
    /// Grid step in nats, or `exact`.
    #[arg(long, global = true)]
    step: Option<String>,
    /// pessimistic | optimistic
    #[arg(long, global = true)]
    rounding: Option<String>,
    #[arg(long, global = true)]
    horizon: Option<String>,
    #[arg(long = "p-min", global = true)]
    p_min: Option<String>,
    #[arg(long = "max-expansions", global = true)]
    max_expansions: Option<String>,
    #[arg(long = "m1-min-bits", global = true)]
    m1_min_bits: Option<String>,
    #[arg(long = "m1-max-bits", global = true)]
    m1_max_bits: Option<String>,
    #[arg(long, global = true)]
    points: Option<String>,
    /// Comma separated: fixed,vld,vlsf,brq_csit,brq_sf
    #[arg(long, global = true)]
    schemes: Option<String>,
    /// Comma separated block states, 0 bad and 1 good.
    #[arg(long, global = true)]
    states: Option<String>,
    /// Comma separated message-set sizes.
    #[arg(long, global = true)]
    m: Option<String>,
    /// thm1 | prop1 | both | loosened
    #[arg(long, global = true)]
    method: Option<String>,
    /// ems | emssf
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long, global = true)]
    trials: Option<String>,
    /// Feinstein threshold in nats, or `auto`.
    #[arg(long, global = true)]
    gamma: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// CSV output path (stdout if unset).
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    svg: Option<String>,
    /// Also write the JSON result here.
    #[arg(long, global = true)]
    json: Option<String>,
    /// bits | nats
    #[arg(long, global = true)]
    unit: Option<String>,
    #[arg(long, global = true)]
    threads: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all: [(&'static str, &Option<String>); 27] = [
            ("delta0", &self.delta0),
            ("delta1", &self.delta1),
            ("q", &self.q),
            ("T", &self.t),
            ("epsilon", &self.epsilon),
            ("beta", &self.beta),
            ("step", &self.step),
            ("rounding", &self.rounding),
            ("horizon", &self.horizon),
            ("p_min", &self.p_min),
            ("max_expansions", &self.max_expansions),
            ("m1_min_bits", &self.m1_min_bits),
            ("m1_max_bits", &self.m1_max_bits),
            ("points", &self.points),
            ("schemes", &self.schemes),
            ("states", &self.states),
            ("m", &self.m),
            ("method", &self.method),
            ("mode", &self.mode),
            ("trials", &self.trials),
            ("gamma", &self.gamma),
            ("seed", &self.seed),
            ("out", &self.out),
            ("svg", &self.svg),
            ("json", &self.json),
            ("unit", &self.unit),
            ("threads", &self.threads),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Guard(_) | Error::Infeasible(_) => EXIT_GUARD,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let cfg = match build_config(&cli.flags) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "brq: {e}");
            return exit_code(&e);
        }
    };
    let mut buf: Vec<u8> = Vec::new();
    let result = with_threads(cfg.threads, || match cli.cmd {
        Cmd::Bounds => cmd_bounds(&cfg, &mut buf),
        Cmd::Curves => cmd_curves(&cfg, &mut buf),
        Cmd::Simulate => cmd_simulate(&cfg, &mut buf),
    });
    if let Err(e) = out.write_all(&buf).and_then(|_| out.flush()) {
        let _ = writeln!(err, "brq: {e}");
        return EXIT_USAGE;
    }
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "brq: {e}");
            exit_code(&e)
        }
    }
}

fn build_config(flags: &Flags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &flags.config {
        let text =
            fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in flags.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> Result<R> + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Usage(format!("cannot start thread pool: {e}")))?;
    pool.install(f)
}

fn write_file(path: &PathBuf, body: &str) -> Result<()> {
    fs::write(path, body).map_err(Error::from)
}

#[derive(Serialize)]
struct BoundsReport<'a> {
    config: &'a RunConfig,
    capacity: f64,
    dispersion_per_use: f64,
    unit: Unit,
    thm1: Option<BoundBreakdown>,
    prop1: Option<BoundBreakdown>,
    difference: Option<f64>,
    loosened: Option<LoosenedBound>,
}

/// Error bounds of `cfg.m` over `cfg.states`. With `method = loosened` the
/// states set the horizon and the thresholds are the flat ones for
/// `epsilon`.
pub fn cmd_bounds(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let sched = cfg.schedule()?;
    let engine = cfg.engine();
    let u = cfg.unit;
    let mut rep = BoundsReport {
        config: cfg,
        capacity: capacity(&cfg.params) * std::f64::consts::LN_2 * u.from_nats(),
        dispersion_per_use: dispersion(&cfg.params, Span::PerUse, u),
        unit: u,
        thm1: None,
        prop1: None,
        difference: None,
        loosened: None,
    };
    let mut text = String::new();
    match cfg.method {
        BoundMethod::Loosened => {
            let g = flat_gammas_ln(&sched.ln_m, cfg.states.len(), cfg.scheme.epsilon);
            let lb = emssf_bound_loosened(&cfg.params, &cfg.states, &sched.clone().with_gamma(g)?, engine)?;
            let _ = writeln!(text, "loosened {:e}", lb.epsilon_bound);
            let _ = writeln!(text, "expected_blocks {:e}", lb.expected_blocks);
            let _ = writeln!(text, "tail_prob {:e}", lb.stop.tail_prob);
            rep.loosened = Some(lb);
        }
        m => {
            let gamma = cfg.gamma;
            if matches!(m, BoundMethod::Thm1 | BoundMethod::Both) {
                let b = match gamma {
                    Some(g) => ems_bound_thm1_at(&cfg.params, &cfg.states, &sched, g, engine)?,
                    None => ems_bound_thm1(&cfg.params, &cfg.states, &sched, engine)?,
                };
                let _ = writeln!(text, "thm1 {:e}", b.epsilon_bound);
                rep.thm1 = Some(b);
            }
            if matches!(m, BoundMethod::Prop1 | BoundMethod::Both) {
                if gamma.is_some() {
                    return Err(Error::Usage("gamma applies to thm1 only".into()));
                }
                let b = ems_bound_prop1(&cfg.params, &cfg.states, &sched, engine)?;
                let _ = writeln!(text, "prop1 {:e}", b.epsilon_bound);
                rep.prop1 = Some(b);
            }
            if let (Some(a), Some(b)) = (&rep.thm1, &rep.prop1) {
                let d = a.epsilon_bound - b.epsilon_bound;
                let _ = writeln!(text, "difference {d:e}");
                rep.difference = Some(d);
            }
        }
    }
    let json = serde_json::to_string_pretty(&rep)?;
    out.write_all(text.as_bytes())?;
    writeln!(out, "{json}")?;
    if let Some(p) = &cfg.json {
        write_file(p, &(json + "\n"))?;
    }
    Ok(EXIT_OK)
}

fn fmt_m1(ln_m1: f64) -> String {
    let l10 = ln_m1 / std::f64::consts::LN_10;
    let e = l10.floor();
    format!("{:.6}e{}", 10f64.powf(l10 - e), e as i64)
}

/// CSV body for the sweep rows plus a closing capacity row.
pub fn curves_csv(params: &ChannelParams, cfg: &SchemeConfig, rows: &[SweepRow]) -> String {
    let mut s = String::new();
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        match &r.point {
            Ok(p) => {
                let _ = writeln!(
                    s,
                    "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                    r.scheme.name(),
                    fmt_m1(p.ln_m1),
                    p.epsilon_target,
                    p.avg_blocks,
                    p.avg_blocklength,
                    p.avg_nats,
                    p.rate_bits,
                    p.eps_certified,
                    p.truncation_gap
                );
            }
            Err(_) => {
                let m1 = if r.scheme == Scheme::Fixed {
                    String::new()
                } else {
                    fmt_m1(r.x)
                };
                let _ = writeln!(s, "{},{},{:e},,,,,infeasible,", r.scheme.name(), m1, cfg.epsilon);
            }
        }
    }
    let _ = writeln!(s, "capacity,,,,,,{:e},,", capacity(params));
    s
}

/// Rate curves of the selected schemes as CSV, optionally with an SVG chart.
pub fn cmd_curves(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (lo, hi) = cfg.sweep_bits();
    let grid = ln_m1_grid(lo, hi, cfg.points);
    let rows = sweep(&cfg.params, &cfg.scheme, &cfg.schemes, &grid)?;
    let csv = curves_csv(&cfg.params, &cfg.scheme, &rows);
    match &cfg.out {
        Some(p) => write_file(p, &csv)?,
        None => out.write_all(csv.as_bytes())?,
    }
    if let Some(p) = &cfg.svg {
        write_file(p, &curves_svg(&cfg.params, &rows))?;
    }
    Ok(EXIT_OK)
}

fn style(s: Scheme) -> (&'static str, &'static str) {
    match s {
        Scheme::Fixed => ("#1f4fd1", ""),
        Scheme::Vld => ("#c81e1e", "6,4"),
        Scheme::Vlsf => ("#c81e1e", ""),
        Scheme::BrqCsit => ("#111111", "6,4"),
        Scheme::BrqSf => ("#111111", ""),
    }
}

/// Rate against average blocklength, one polyline per scheme and a capacity
/// line.
pub fn curves_svg(params: &ChannelParams, rows: &[SweepRow]) -> String {
    let (w, h) = (720.0, 480.0);
    let (ml, mr, mt, mb) = (70.0, 150.0, 20.0, 50.0);
    let cap = capacity(params);
    let pts: Vec<(Scheme, f64, f64)> = rows
        .iter()
        .filter_map(|r| {
            r.point
                .as_ref()
                .ok()
                .map(|p| (r.scheme, p.avg_blocklength, p.rate_bits))
        })
        .filter(|p| p.1.is_finite() && p.2.is_finite())
        .collect();
    let xmax = pts.iter().map(|p| p.1).fold(params.t as f64, f64::max);
    let ymax = (cap * 1.1).max(pts.iter().map(|p| p.2).fold(0.0, f64::max));
    let px = |x: f64| ml + x / xmax * (w - ml - mr);
    let py = |y: f64| h - mb - y.max(0.0) / ymax * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, y0, x1, y1) = (px(0.0), py(0.0), px(xmax), py(ymax));
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.1},{y1:.1}V{y0:.1}H{x1:.1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let xv = xmax * i as f64 / 5.0;
        let yv = ymax * i as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            px(xv),
            y0 + 18.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            x0 - 6.0,
            py(yv) + 4.0,
            yv
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">average blocklength</text>"#,
        (x0 + x1) / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">rate (bits/use)</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
    let _ = writeln!(
        s,
        r##"<line x1="{x0:.1}" y1="{:.1}" x2="{x1:.1}" y2="{:.1}" stroke="#1a9a3a"/>"##,
        py(cap),
        py(cap)
    );
    let mut legend = vec![("capacity", "#1a9a3a", "")];
    for sch in Scheme::ALL {
        let mut line: Vec<(f64, f64)> = pts.iter().filter(|p| p.0 == sch).map(|p| (p.1, p.2)).collect();
        if line.is_empty() {
            continue;
        }
        line.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (color, dash) = style(sch);
        let d: Vec<String> = line
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-dasharray="{dash}"/>"#,
            d.join(" ")
        );
        legend.push((sch.name(), color, dash));
    }
    for (i, (name, color, dash)) in legend.iter().enumerate() {
        let y = mt + 10.0 + 18.0 * i as f64;
        let lx = w - mr + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-dasharray="{dash}"/>"#,
            lx + 25.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{name}</text>"#, lx + 32.0, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Runs the trials of `cfg.mode` and prints the report and a PASS/FAIL line.
pub fn cmd_simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let m = cfg.int_sizes()?;
    let rep: TrialReport = match cfg.mode {
        SimMode::Ems => simulate_ems(&cfg.params, &cfg.states, &m, cfg.gamma, cfg.trials, cfg.seed)?,
        SimMode::Emssf => {
            if cfg.gamma.is_some() {
                return Err(Error::Usage("gamma applies to ems mode only".into()));
            }
            simulate_emssf(&cfg.params, &cfg.states, &m, cfg.scheme.epsilon, cfg.trials, cfg.seed)?
        }
    };
    let json = serde_json::to_string_pretty(&rep)?;
    writeln!(out, "{json}")?;
    if let Some(p) = &cfg.json {
        write_file(p, &(json + "\n"))?;
    }
    let mut line = format!(
        "{} error rate {:e} vs bound {:e} (+3 sigma {:e})",
        if rep.pass { "PASS" } else { "FAIL" },
        rep.error_rate,
        rep.bound_value,
        rep.bound_value + 3.0 * rep.std_err
    );
    if let (Some(a), Some(b), Some(se)) = (rep.avg_stop_block, rep.expected_stop_bound, rep.stop_block_std_err) {
        let _ = write!(line, "; mean stop block {a:e} vs {b:e} (+3 sigma {:e})", b + 3.0 * se);
    }
    writeln!(out, "{line}")?;
    Ok(if rep.pass { EXIT_OK } else { EXIT_VALIDATION })
}
