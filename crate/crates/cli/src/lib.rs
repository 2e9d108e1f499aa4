//! Command-line front end for the multiscale solver.
//!
//! Every setting has a canonical key (`theta`, `n_grid`, `M`, ...). Values
//! are collected from an optional flat `key = value` file and then from
//! command-line flags, which win. The merged key set is validated once into a
//! [`RunConfig`]. The same keys are written back on the `# config=` line of
//! each CSV file, so a run can be reproduced from its output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use msds_core::cholesky::FailurePolicy;
use msds_core::estimator::{minimize_extrapolation_constant, ExtrapolationTarget, Variant};
use msds_core::experiments::{
    convergence_slope, efficiency_slope, lcm_all, run_convergence, run_pricing, run_qq,
    ConvergenceRow, ConvergenceStudy, ExperimentError, MethodConfig, Payoff, PricingMethod,
    PricingReport, PricingStudy, QqStudy,
};
use msds_core::model::{HestonParams, Mode, ToyModel};

/// Largest Brownian sampling resolution used to share noise across an `n`
/// grid; beyond it each `n` gets its own increments.
const MAX_COMMON_RESOLUTION: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Study(#[from] ExperimentError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report is empty; nothing written")]
    EmptyReport,
}

impl CliError {
    /// 1 for usage errors, 2 for everything that happens once a study runs.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "msds", version, about = "Multiscale decreasing-step SDE experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CommandArgs,
}

#[derive(Debug, Subcommand)]
pub enum CommandArgs {
    /// Strong L2 error against the exact effective path over an n grid.
    Converge(Flags),
    /// Sorted rescaled terminal errors √n (X_T − X̌_T).
    Qq(Flags),
    /// L2 error against total fast steps over an n grid.
    Efficiency(Flags),
    /// Asian and lookback floating-strike prices under the Heston model.
    Price(Flags),
    /// The same prices from Euler-Maruyama on the full ε-system.
    EulerBaseline(Flags),
    /// Minimizes the extrapolation variance constant over λ.
    LambdaOpt(Flags),
}

macro_rules! flags {
    ($( $field:ident : $flag:literal => $key:literal ),* $(,)?) => {
        /// Options shared by every subcommand; each maps to one config key.
        #[derive(Debug, Clone, Default, Args)]
        pub struct Flags {
            /// Flat `key = value` file; flags override its values.
            #[arg(long)]
            pub config: Option<PathBuf>,
            $(
                #[arg(long = $flag, value_name = "VALUE", allow_negative_numbers = true)]
                pub $field: Option<String>,
            )*
            /// Toy model without the slow noise.
            #[arg(long)]
            pub ode: bool,
            /// Start each fast chain where the previous slow step's chain ended.
            #[arg(long = "warm-start")]
            pub warm_start: bool,
            /// Pay max(payoff, 0) (the default).
            #[arg(long, overrides_with = "no_floor")]
            pub floor: bool,
            /// Pay the raw payoff.
            #[arg(long = "no-floor", overrides_with = "floor")]
            pub no_floor: bool,
            /// Multiply prices by exp(−rT).
            #[arg(long)]
            pub discount: bool,
        }

        impl Flags {
            fn pairs(&self) -> Vec<(String, String)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push(($key.to_string(), v.clone()));
                    }
                )*
                for (set, key, value) in [
                    (self.ode, "ode", "true"),
                    (self.warm_start, "warm_start", "true"),
                    (self.floor, "floor", "true"),
                    (self.no_floor, "floor", "false"),
                    (self.discount, "discount", "true"),
                ] {
                    if set {
                        out.push((key.to_string(), value.to_string()));
                    }
                }
                out
            }
        }
    };
}

flags! {
    model: "model" => "model",
    variant: "variant" => "variant",
    theta: "theta" => "theta",
    gamma0: "gamma0" => "gamma0",
    m1: "m1" => "m1",
    m: "M" => "M",
    lambda: "lambda" => "lambda",
    varsigma: "varsigma" => "varsigma",
    extrapolation_target: "extrapolation-target" => "extrapolation_target",
    cholesky_policy: "cholesky-policy" => "cholesky_policy",
    n: "n" => "n",
    n_grid: "n-grid" => "n_grid",
    path_caps: "path-caps" => "path_caps",
    paths: "paths" => "paths",
    horizon: "horizon" => "horizon",
    seed: "seed" => "seed",
    output: "output" => "output",
    workers: "workers" => "workers",
    failure_budget: "failure-budget" => "failure_budget",
    common_noise: "common-noise" => "common_noise",
    epsilon: "epsilon" => "epsilon",
    n_steps: "n-steps" => "n_steps",
    x0: "x0" => "x0",
    z0: "z0" => "z0",
    y0: "y0" => "y0",
    mean_level: "m" => "m",
    nu: "nu" => "nu",
    kappa: "kappa" => "kappa",
    rate: "r" => "r",
    theta_cir: "theta-cir" => "theta_cir",
    sigma_cir: "sigma-cir" => "sigma_cir",
    rho_xy: "rho-xy" => "rho_xy",
    rho_yz: "rho-yz" => "rho_yz",
    rho_xz: "rho-xz" => "rho_xz",
}

const KEYS: &[&str] = &[
    "model", "ode", "variant", "theta", "gamma0", "m1", "M", "lambda", "varsigma",
    "extrapolation_target", "cholesky_policy", "warm_start", "n", "n_grid", "path_caps", "paths",
    "horizon", "seed", "output", "workers", "failure_budget", "common_noise", "floor", "discount",
    "epsilon", "n_steps", "x0", "z0", "y0", "m", "nu", "kappa", "r", "theta_cir", "sigma_cir",
    "rho_xy", "rho_yz", "rho_xz",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Converge,
    Qq,
    Efficiency,
    Price,
    EulerBaseline,
    LambdaOpt,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Converge => "converge",
            Command::Qq => "qq",
            Command::Efficiency => "efficiency",
            Command::Price => "price",
            Command::EulerBaseline => "euler-baseline",
            Command::LambdaOpt => "lambda-opt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelId {
    Toy,
    Heston,
}

/// Fully validated settings of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelId,
    pub ode: bool,
    pub variant: Variant,
    pub theta: f64,
    pub gamma0: f64,
    pub m1: f64,
    /// Explicit inner chain length; replaces `⌈M₁ n^{1/(1−θ)}⌉` when set.
    pub m_override: Option<usize>,
    pub lambda: f64,
    pub varsigma: u32,
    pub extrapolation_target: ExtrapolationTarget,
    pub cholesky_policy: FailurePolicy,
    pub warm_start: bool,
    pub n: usize,
    pub n_grid: Vec<usize>,
    pub path_caps: Vec<(usize, usize)>,
    pub paths: usize,
    pub horizon: f64,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub workers: Option<usize>,
    pub failure_budget: usize,
    pub common_noise: bool,
    pub floor: bool,
    pub discount: bool,
    pub epsilon: f64,
    pub n_steps: usize,
    pub heston: HestonParams,
}

impl RunConfig {
    pub fn defaults(command: Command) -> Self {
        RunConfig {
            command,
            model: match command {
                Command::Price | Command::EulerBaseline => ModelId::Heston,
                _ => ModelId::Toy,
            },
            ode: false,
            variant: Variant::Plain,
            theta: 1.0 / 3.0,
            gamma0: 1.0,
            m1: 1.0,
            m_override: None,
            lambda: 3.0,
            varsigma: 4,
            extrapolation_target: ExtrapolationTarget::Covariance,
            cholesky_policy: FailurePolicy::Repair,
            warm_start: false,
            n: 100,
            n_grid: vec![16, 32, 64, 128],
            path_caps: Vec::new(),
            paths: 1000,
            horizon: 1.0,
            seed: 42,
            output: None,
            workers: None,
            failure_budget: 0,
            common_noise: true,
            floor: true,
            discount: false,
            epsilon: 1e-3,
            n_steps: 100_000,
            heston: HestonParams::default(),
        }
    }

    /// Builds a config from `(key, value)` pairs applied in order over the
    /// defaults.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(
        command: Command,
        pairs: &[(K, V)],
    ) -> Result<Self, CliError> {
        let mut c = RunConfig::defaults(command);
        for (k, v) in pairs {
            c.apply(k.as_ref(), v.as_ref().trim())?;
        }
        c.heston.horizon = c.horizon;
        c.heston.epsilon = c.epsilon;
        c.validate()?;
        Ok(c)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "model" => {
                self.model = match v {
                    "toy" => ModelId::Toy,
                    "heston" => ModelId::Heston,
                    _ => return Err(usage(format!("model must be toy or heston, got '{v}'"))),
                }
            }
            "ode" => self.ode = parse_bool(key, v)?,
            "variant" => {
                self.variant = match v {
                    "plain" => Variant::Plain,
                    "extrapolated" => Variant::Extrapolated { lambda: self.lambda },
                    _ => return Err(usage(format!("variant must be plain or extrapolated, got '{v}'"))),
                }
            }
            "theta" => self.theta = parse(key, v)?,
            "gamma0" => self.gamma0 = parse(key, v)?,
            "m1" => self.m1 = parse(key, v)?,
            "M" => self.m_override = Some(parse(key, v)?),
            "lambda" => self.lambda = parse(key, v)?,
            "varsigma" => self.varsigma = parse(key, v)?,
            "extrapolation_target" => {
                self.extrapolation_target = match v {
                    "covariance" => ExtrapolationTarget::Covariance,
                    "factor" => ExtrapolationTarget::Factor,
                    _ => {
                        return Err(usage(format!(
                            "extrapolation_target must be covariance or factor, got '{v}'"
                        )))
                    }
                }
            }
            "cholesky_policy" => {
                self.cholesky_policy = match v {
                    "repair" => FailurePolicy::Repair,
                    "fail" => FailurePolicy::Fail,
                    _ => return Err(usage(format!("cholesky_policy must be repair or fail, got '{v}'"))),
                }
            }
            "warm_start" => self.warm_start = parse_bool(key, v)?,
            "n" => self.n = parse(key, v)?,
            "n_grid" => self.n_grid = parse_list(key, v)?,
            "path_caps" => {
                self.path_caps = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|item| {
                            let (a, b) = item.split_once(':').ok_or_else(|| {
                                usage(format!("path_caps entries must look like n:paths, got '{item}'"))
                            })?;
                            Ok((parse(key, a)?, parse(key, b)?))
                        })
                        .collect::<Result<_, CliError>>()?
                }
            }
            "paths" => self.paths = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "output" => self.output = Some(PathBuf::from(v)),
            "workers" => self.workers = Some(parse(key, v)?),
            "failure_budget" => self.failure_budget = parse(key, v)?,
            "common_noise" => self.common_noise = parse_bool(key, v)?,
            "floor" => self.floor = parse_bool(key, v)?,
            "discount" => self.discount = parse_bool(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "n_steps" => self.n_steps = parse(key, v)?,
            "x0" => self.heston.x0 = parse(key, v)?,
            "z0" => self.heston.z0 = parse(key, v)?,
            "y0" => self.heston.y0 = parse(key, v)?,
            "m" => self.heston.m = parse(key, v)?,
            "nu" => self.heston.nu = parse(key, v)?,
            "kappa" => self.heston.kappa = parse(key, v)?,
            "r" => self.heston.r = parse(key, v)?,
            "theta_cir" => self.heston.theta_cir = parse(key, v)?,
            "sigma_cir" => self.heston.sigma_cir = parse(key, v)?,
            "rho_xy" => self.heston.rho_xy = parse(key, v)?,
            "rho_yz" => self.heston.rho_yz = parse(key, v)?,
            "rho_xz" => self.heston.rho_xz = parse(key, v)?,
            _ => return Err(usage(format!("unknown key '{key}'"))),
        }
        if let Variant::Extrapolated { .. } = self.variant {
            self.variant = Variant::Extrapolated { lambda: self.lambda };
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(usage(msg)) };
        check(self.theta > 0.0 && self.theta < 1.0, "theta must lie in (0,1)")?;
        check(self.gamma0 > 0.0 && self.gamma0.is_finite(), "gamma0 must be positive")?;
        check(self.m1 > 0.0 && self.m1.is_finite(), "m1 must be positive")?;
        check(self.m_override != Some(0), "M must be at least 1")?;
        check(self.lambda > 1.0 && self.lambda.is_finite(), "lambda must be greater than 1")?;
        check(
            self.varsigma >= 4 && self.varsigma % 2 == 0,
            "varsigma must be an even integer >= 4",
        )?;
        check(self.n >= 1, "n must be at least 1")?;
        check(
            !self.n_grid.is_empty() && self.n_grid.iter().all(|&n| n >= 1),
            "n_grid must list positive integers",
        )?;
        check(self.paths >= 1, "paths must be at least 1")?;
        check(
            self.path_caps.iter().all(|&(_, p)| p >= 1),
            "path_caps must allow at least 1 path",
        )?;
        check(self.horizon > 0.0 && self.horizon.is_finite(), "horizon must be positive")?;
        check(self.workers != Some(0), "workers must be at least 1")?;
        check(self.epsilon > 0.0 && self.epsilon.is_finite(), "epsilon must be positive")?;
        check(self.n_steps >= 1, "n_steps must be at least 1")?;
        match self.command {
            Command::Converge | Command::Qq | Command::Efficiency => check(
                self.model == ModelId::Toy,
                "model must be toy for this command (it needs the exact effective solution)",
            )?,
            Command::Price | Command::EulerBaseline => {
                check(self.model == ModelId::Heston, "model must be heston for pricing")?
            }
            Command::LambdaOpt => {}
        }
        check(!(self.ode && self.model == ModelId::Heston), "ode applies to the toy model only")?;
        if self.model == ModelId::Heston {
            self.heston
                .validate()
                .map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }

    /// `key=value` pairs for every setting, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let p = &self.heston;
        let list = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("model", match self.model { ModelId::Toy => "toy", ModelId::Heston => "heston" }.to_string()),
            ("ode", self.ode.to_string()),
            ("variant", match self.variant { Variant::Plain => "plain", Variant::Extrapolated { .. } => "extrapolated" }.to_string()),
            ("theta", self.theta.to_string()),
            ("gamma0", self.gamma0.to_string()),
            ("m1", self.m1.to_string()),
        ];
        if let Some(m) = self.m_override {
            out.push(("M", m.to_string()));
        }
        out.extend([
            ("lambda", self.lambda.to_string()),
            ("varsigma", self.varsigma.to_string()),
            ("extrapolation_target", match self.extrapolation_target {
                ExtrapolationTarget::Covariance => "covariance",
                ExtrapolationTarget::Factor => "factor",
            }.to_string()),
            ("cholesky_policy", match self.cholesky_policy {
                FailurePolicy::Repair => "repair",
                FailurePolicy::Fail => "fail",
            }.to_string()),
            ("warm_start", self.warm_start.to_string()),
            ("n", self.n.to_string()),
            ("n_grid", list(&self.n_grid)),
            ("path_caps", self.path_caps.iter().map(|(n, p)| format!("{n}:{p}")).collect::<Vec<_>>().join(",")),
            ("paths", self.paths.to_string()),
            ("horizon", self.horizon.to_string()),
            ("seed", self.seed.to_string()),
        ]);
        if let Some(o) = &self.output {
            out.push(("output", o.display().to_string()));
        }
        if let Some(w) = self.workers {
            out.push(("workers", w.to_string()));
        }
        out.extend([
            ("failure_budget", self.failure_budget.to_string()),
            ("common_noise", self.common_noise.to_string()),
            ("floor", self.floor.to_string()),
            ("discount", self.discount.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("n_steps", self.n_steps.to_string()),
            ("x0", p.x0.to_string()),
            ("z0", p.z0.to_string()),
            ("y0", p.y0.to_string()),
            ("m", p.m.to_string()),
            ("nu", p.nu.to_string()),
            ("kappa", p.kappa.to_string()),
            ("r", p.r.to_string()),
            ("theta_cir", p.theta_cir.to_string()),
            ("sigma_cir", p.sigma_cir.to_string()),
            ("rho_xy", p.rho_xy.to_string()),
            ("rho_yz", p.rho_yz.to_string()),
            ("rho_xz", p.rho_xz.to_string()),
        ]);
        out
    }

    /// Body of the `# config=` comment line.
    pub fn config_line(&self) -> String {
        self.pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }

    /// Inverse of [`config_line`](Self::config_line).
    pub fn from_config_line(command: Command, line: &str) -> Result<Self, CliError> {
        let pairs = line
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|item| {
                item.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| usage(format!("malformed config entry '{item}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        RunConfig::from_pairs(command, &pairs)
    }

    /// Step-size exponents below these values fall outside the convergence
    /// theory; the run proceeds anyway.
    pub fn theta_warning(&self) -> Option<String> {
        let sde = !(self.model == ModelId::Toy && self.ode);
        let (threshold, label) = match self.variant {
            Variant::Plain => (1.0 / 3.0, "1/3"),
            Variant::Extrapolated { .. } => (0.2, "1/5"),
        };
        match self.command {
            Command::LambdaOpt | Command::EulerBaseline => None,
            _ if sde && self.theta < threshold - 1e-12 => Some(format!(
                "theta = {} is below {label}; convergence is not guaranteed",
                self.theta
            )),
            _ => None,
        }
    }

    fn method(&self) -> Result<MethodConfig, CliError> {
        let mut m = MethodConfig::power_law(self.gamma0, self.theta, self.m1)
            .map_err(|e| usage(e.to_string()))?;
        m.variant = self.variant;
        m.varsigma = self.varsigma;
        m.warm_start = self.warm_start;
        m.cholesky_policy = self.cholesky_policy;
        m.extrapolation_target = self.extrapolation_target;
        if let Some(fixed) = self.m_override {
            m = m.with_fixed_length(fixed);
        }
        Ok(m)
    }

    fn toy(&self) -> ToyModel {
        ToyModel::new([0.0, 0.0], 0.0, if self.ode { Mode::Ode } else { Mode::Sde })
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| usage(format!("invalid value for {key}: '{v}'")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(usage(format!("{key} must be true or false, got '{v}'"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, CliError> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// Reads a flat `key = value` file. `#` starts a comment; blank lines are
/// skipped.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(usage(format!("unknown key '{k}' (config line {})", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Merges the optional config file and the flags into a [`RunConfig`].
pub fn parse_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let (command, flags) = match &cli.command {
        CommandArgs::Converge(f) => (Command::Converge, f),
        CommandArgs::Qq(f) => (Command::Qq, f),
        CommandArgs::Efficiency(f) => (Command::Efficiency, f),
        CommandArgs::Price(f) => (Command::Price, f),
        CommandArgs::EulerBaseline(f) => (Command::EulerBaseline, f),
        CommandArgs::LambdaOpt(f) => (Command::LambdaOpt, f),
    };
    let mut pairs = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config_file(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend(flags.pairs());
    RunConfig::from_pairs(command, &pairs)
}

/// Tabular result of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

/// What a command produced: rows for the CSV and lines for the terminal.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Report,
    pub summary: Vec<String>,
}

fn convergence_report(rows: &[ConvergenceRow]) -> Report {
    Report {
        columns: vec!["n", "M", "paths", "l2_error", "stderr", "ops"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.m.to_string(),
                    r.paths.to_string(),
                    r.l2_error.to_string(),
                    r.stderr.to_string(),
                    r.ops.to_string(),
                ]
            })
            .collect(),
    }
}

fn efficiency_report(rows: &[ConvergenceRow]) -> Report {
    Report {
        columns: vec!["n", "M", "paths", "ops", "l2_error", "stderr", "wall_seconds"],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.m.to_string(),
                    r.paths.to_string(),
                    r.ops.to_string(),
                    r.l2_error.to_string(),
                    r.stderr.to_string(),
                    r.wall_seconds.to_string(),
                ]
            })
            .collect(),
    }
}

fn price_report(r: &PricingReport) -> Report {
    let rows = [Payoff::AsianFloatCall, Payoff::LookbackFloatCall]
        .iter()
        .map(|&payoff| {
            let p = r.price(payoff);
            vec![
                r.method.to_string(),
                payoff.name().to_string(),
                r.n.to_string(),
                r.m.to_string(),
                r.paths.to_string(),
                p.price.to_string(),
                p.stderr.to_string(),
                r.ops.to_string(),
                r.repairs.to_string(),
                r.diverged.to_string(),
            ]
        })
        .collect();
    Report {
        columns: vec![
            "method", "payoff", "n", "M", "paths", "price", "stderr", "ops", "repairs", "diverged",
        ],
        rows,
    }
}

fn convergence_study(c: &RunConfig) -> Result<ConvergenceStudy, CliError> {
    let mut study = ConvergenceStudy::new(c.n_grid.clone(), c.paths, c.seed, c.method()?);
    study.path_caps = c.path_caps.clone();
    study.horizon = c.horizon;
    study.workers = c.workers;
    study.failure_budget = c.failure_budget;
    study.common_noise = c.common_noise && lcm_all(&c.n_grid) <= MAX_COMMON_RESOLUTION;
    if c.common_noise && !study.common_noise {
        log::warn!("n grid too irregular to share Brownian increments; sampling each n separately");
    }
    Ok(study)
}

fn slope_line(label: &str, fit: Result<msds_core::experiments::LogLogFit, ExperimentError>) -> Vec<String> {
    match fit {
        Ok(f) => vec![format!("{label} slope {:.4} (r² {:.4})", f.slope, f.r_squared)],
        Err(_) => Vec::new(),
    }
}

/// Runs the configured study.
pub fn run(c: &RunConfig) -> Result<Outcome, CliError> {
    match c.command {
        Command::Converge => {
            let rows = run_convergence(&c.toy(), &convergence_study(c)?)?;
            Ok(Outcome {
                summary: slope_line("log-log error vs n", convergence_slope(&rows)),
                report: convergence_report(&rows),
            })
        }
        Command::Efficiency => {
            let rows = run_convergence(&c.toy(), &convergence_study(c)?)?;
            Ok(Outcome {
                summary: slope_line("log-log error vs ops", efficiency_slope(&rows)),
                report: efficiency_report(&rows),
            })
        }
        Command::Qq => {
            let report = run_qq(
                &c.toy(),
                &QqStudy {
                    n: c.n,
                    paths: c.paths,
                    horizon: c.horizon,
                    seed: c.seed,
                    method: c.method()?,
                    workers: c.workers,
                    failure_budget: c.failure_budget,
                },
            )?;
            let mut rows = Vec::new();
            for (i, comp) in report.components.iter().enumerate() {
                let len = comp.len() as f64;
                for (j, v) in comp.iter().enumerate() {
                    rows.push(vec![
                        (i + 1).to_string(),
                        ((j as f64 + 0.5) / len).to_string(),
                        v.to_string(),
                    ]);
                }
            }
            Ok(Outcome {
                report: Report {
                    columns: vec!["component", "quantile_rank", "value"],
                    rows,
                },
                summary: vec![format!("{} samples per component at n = {}", c.paths, c.n)],
            })
        }
        Command::Price | Command::EulerBaseline => {
            let method = if c.command == Command::Price {
                PricingMethod::Multiscale(c.method()?)
            } else {
                PricingMethod::EulerBaseline {
                    epsilon: c.epsilon,
                    n_steps: c.n_steps,
                }
            };
            let r = run_pricing(&PricingStudy {
                params: c.heston.clone(),
                method,
                n: c.n,
                paths: c.paths,
                seed: c.seed,
                floor: c.floor,
                discount: c.discount,
                workers: c.workers,
                noise_resolution: None,
            })?;
            let summary = vec![
                format!("asian {:.4} ± {:.4}", r.asian.price, r.asian.stderr),
                format!("lookback {:.4} ± {:.4}", r.lookback.price, r.lookback.stderr),
            ];
            Ok(Outcome {
                report: price_report(&r),
                summary,
            })
        }
        Command::LambdaOpt => {
            let (lambda, c_phi) = minimize_extrapolation_constant(1.0 + 1e-9, 20.0);
            Ok(Outcome {
                report: Report {
                    columns: vec!["lambda_star", "c_phi"],
                    rows: vec![vec![lambda.to_string(), c_phi.to_string()]],
                },
                summary: vec![format!("lambda* = {lambda:.6}, C = {c_phi:.6}")],
            })
        }
    }
}

/// Renders the CSV text: `# seed=`, `# config=`, header, rows.
pub fn render_csv(report: &Report, config: &RunConfig) -> Result<String, CliError> {
    if report.rows.is_empty() {
        return Err(CliError::EmptyReport);
    }
    let mut text = String::new();
    let _ = writeln!(text, "# seed={}", config.seed);
    let _ = writeln!(text, "# config={}", config.config_line());
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| CliError::Io {
        path: PathBuf::from("<memory>"),
        source: e.into(),
    };
    w.write_record(&report.columns).map_err(io)?;
    for row in &report.rows {
        w.write_record(row).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io {
        path: PathBuf::from("<memory>"),
        source: e.into_error(),
    })?;
    text.push_str(&String::from_utf8_lossy(&bytes));
    Ok(text)
}

/// Writes the CSV to `destination`, or returns it for stdout when `None`.
/// Nothing is created for an empty report.
pub fn emit_csv(
    report: &Report,
    config: &RunConfig,
    destination: Option<&Path>,
) -> Result<Option<String>, CliError> {
    let text = render_csv(report, config)?;
    match destination {
        Some(path) => {
            std::fs::write(path, text).map_err(|source| CliError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            Ok(None)
        }
        None => Ok(Some(text)),
    }
}
