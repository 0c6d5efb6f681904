//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Value types accepted in a config file.
pub trait Field: Sized {
    fn parse_field(s: &str) -> Result<Self, String>;
    fn show(&self) -> String;
}

macro_rules! from_str_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn parse_field(s: &str) -> Result<Self, String> {
                s.parse::<$t>().map_err(|e| e.to_string())
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_field!(usize, u64, bool, String);

impl Field for f64 {
    fn parse_field(s: &str) -> Result<Self, String> {
        let v = s.parse::<f64>().map_err(|e| e.to_string())?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err("not finite".into())
        }
    }
    fn show(&self) -> String {
        format!("{self:?}")
    }
}

impl<T: Field> Field for Option<T> {
    fn parse_field(s: &str) -> Result<Self, String> {
        if s.is_empty() || s == "none" {
            Ok(None)
        } else {
            T::parse_field(s).map(Some)
        }
    }
    fn show(&self) -> String {
        self.as_ref().map_or_else(|| "none".into(), Field::show)
    }
}

impl<T: Field> Field for Vec<T> {
    fn parse_field(s: &str) -> Result<Self, String> {
        s.split(',').map(|p| T::parse_field(p.trim())).collect()
    }
    fn show(&self) -> String {
        self.iter().map(Field::show).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($($(#[$m:meta])* $name:ident : $t:ty = $default:expr;)*) => {
        /// Every knob of every subcommand. Unset keys keep their defaults; the seed has none.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$m])* pub $name: $t,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name),)*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $(stringify!($name) => {
                        self.$name = <$t as Field>::parse_field(value)
                            .map_err(|e| CliError::Config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
                }
                Ok(())
            }

            /// Sorted `key=value` lines of the full effective configuration.
            pub fn canonical(&self) -> String {
                let mut pairs = vec![$((stringify!($name), Field::show(&self.$name)),)*];
                pairs.sort();
                let mut out = String::new();
                for (k, v) in pairs {
                    let _ = writeln!(out, "{k}={v}");
                }
                out
            }
        }
    };
}

config! {
    /// Master seed; mandatory.
    seed: Option<u64> = None;
    dim: usize = 1;
    horizon: f64 = 1.0;
    steps: usize = 200;
    terminal: String = "running_max".into();
    samples: usize = 10_000;
    antithetic: bool = false;
    /// Evaluation time and path file (`t,x1,...,xd`) for `solve`; the zero path when unset.
    t: f64 = 0.0;
    path: Option<String> = None;
    /// Optional reference value for `solve`, checked at 3 standard errors.
    expect: Option<f64> = None;
    /// Flow-identity check in `solve` when set.
    t_prime: Option<f64> = None;
    inner: usize = 20;

    gh_nodes: usize = 21;
    z_samples: usize = 100_000;
    s_max: f64 = 40.0;
    s_panels: usize = 24;
    s_nodes: usize = 4;

    /// Cylinder solution quadrature.
    fd_gh_nodes: usize = 20;
    fd_mc_samples: usize = 20_000;

    spec: String = "all".into();
    points: usize = 20;
    pde_tol: f64 = 1e-3;

    gauge_samples: usize = 1000;
    calib_samples: usize = 10_000;
    alpha_shrink: f64 = 0.9;
    bound_tol: f64 = 1e-6;
    c_zeta_tol: f64 = 1e-6;

    lift: String = "square".into();
    preset: String = "brownian".into();
    covariation: String = "discrete".into();
    /// Grid sizes of the Δt sweep.
    sweep: Vec<usize> = vec![64, 128, 256, 512, 1024];
    slope_min: f64 = 0.4;

    /// Path dictionary (`path_id,t,x1,...,xd`); random Brownian paths when unset.
    dictionary: Option<String> = None;
    space_size: usize = 200;
    /// Keep every `stride`-th grid node as a candidate time.
    stride: usize = 10;
    eps: f64 = 0.05;
    delta: f64 = 0.1;
    /// Starting point: this rank in decreasing order of `G`.
    p0_rank: usize = 0;

    n: usize = 32;
    approx_tol: f64 = 0.05;
    growth_factor: f64 = 5.0;
    coeff_tol: f64 = 1e-6;
    fejer_sweep: Vec<usize> = vec![4, 8, 16, 32, 64, 128];

    lambda: f64 = 1.0;
    deltas: Vec<f64> = vec![0.1, 0.05, 0.025];
    /// `solution` (u = v) or `subsolution` (u = v − offset).
    mode: String = "solution".into();
    offset: f64 = 0.1;
    /// Monte-Carlo draws for `u` on the demo space.
    u_samples: usize = 4000;
    /// Brownian continuations to `T` added from every interior point of the demo space.
    extensions: usize = 8;

    mc_sweep: Vec<usize> = vec![1000, 10_000, 100_000];
    /// Allowed spread of `stderr·√N` across the MC sweep, as a ratio.
    clt_ratio: f64 = 1.5;
}

impl ExperimentConfig {
    /// Parse `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    /// Apply one `key=value` override.
    pub fn apply(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("override '{kv}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config("seed is mandatory (config key or --seed)".into()))
    }

    /// Seed present and all sizes positive.
    pub fn validate(&self) -> Result<(), CliError> {
        self.seed()?;
        let sizes = [
            ("dim", self.dim),
            ("steps", self.steps),
            ("samples", self.samples),
            ("inner", self.inner),
            ("gh_nodes", self.gh_nodes),
            ("z_samples", self.z_samples),
            ("s_panels", self.s_panels),
            ("s_nodes", self.s_nodes),
            ("fd_gh_nodes", self.fd_gh_nodes),
            ("fd_mc_samples", self.fd_mc_samples),
            ("points", self.points),
            ("gauge_samples", self.gauge_samples),
            ("calib_samples", self.calib_samples),
            ("space_size", self.space_size),
            ("stride", self.stride),
            ("n", self.n),
            ("u_samples", self.u_samples),
        ];
        for (k, v) in sizes {
            if v == 0 {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("horizon", self.horizon), ("eps", self.eps), ("delta", self.delta), ("lambda", self.lambda)] {
            if !(v > 0.0) {
                return Err(CliError::Config(format!("{k} must be positive")));
            }
        }
        if self.sweep.is_empty() || self.sweep.contains(&0) || self.mc_sweep.contains(&0) || self.fejer_sweep.contains(&0) {
            return Err(CliError::Config("sweeps must be non-empty lists of positive sizes".into()));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(CliError::Config("deltas must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn quadrature(&self) -> ppde_core::gauge::QuadratureConfig {
        ppde_core::gauge::QuadratureConfig {
            gh_nodes: self.gh_nodes,
            mc_samples: self.z_samples,
            seed: ppde_core::rng::derive_seed(self.seed.unwrap_or(0), 0x6175),
            s_max: self.s_max,
            s_panels: self.s_panels,
            s_nodes: self.s_nodes,
            ..Default::default()
        }
    }

    pub fn finite_dim(&self) -> ppde_core::fk::FiniteDimConfig {
        let mut c = ppde_core::fk::FiniteDimConfig::new(ppde_core::rng::derive_seed(self.seed.unwrap_or(0), 0x6664));
        c.gh_nodes = self.fd_gh_nodes;
        c.mc_samples = self.fd_mc_samples;
        c
    }
}
