//! INI experiment configuration with `[scenario]`, `[solver]` and `[study]`
//! sections. Every key is optional; omitted keys keep the defaults of the
//! frozen study scenario.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ini::{Ini, Properties};
use nalgebra::{Vector2, Vector3};

use crate::error::{Error, Result};
use crate::kernels::Hyperparams;
use crate::simulator::{ScenarioConfig, Shape, SIGMA_FLOOR};
use crate::slam::{
    HyperMode, InitialPrior, Mode, OdometryNoise, PlanarParams, Problem, SolverOptions, ZeroPrior,
};
use crate::types::{ImuRecord, MagRecord, NavState, NoiseParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StudyKind {
    /// True and assumed `σ_f` both set to each value.
    SigmaFSweep,
    /// Assumed `σ_f` set to each value, truth from `[scenario]`.
    WrongSigmaF,
    /// True and assumed length scale both set to each value.
    LSweep,
    /// Assumed length scale set to each value, truth from `[scenario]`.
    WrongL,
    /// Odometry noise sigma set to each value.
    OdometryNoise,
    /// One cell per seed with the configuration as given.
    SingleRun,
}

impl StudyKind {
    /// Symbol of the swept parameter, for table headings.
    pub fn parameter_label(&self) -> &'static str {
        match self {
            StudyKind::SigmaFSweep | StudyKind::WrongSigmaF => "sigma_f",
            StudyKind::LSweep | StudyKind::WrongL => "l",
            StudyKind::OdometryNoise => "noise",
            StudyKind::SingleRun => "",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyKind::SigmaFSweep => "sigma_f_sweep",
            StudyKind::WrongSigmaF => "wrong_sigma_f",
            StudyKind::LSweep => "l_sweep",
            StudyKind::WrongL => "wrong_l",
            StudyKind::OdometryNoise => "odometry_noise",
            StudyKind::SingleRun => "single_run",
        })
    }
}

impl FromStr for StudyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "sigma_f_sweep" => StudyKind::SigmaFSweep,
            "wrong_sigma_f" => StudyKind::WrongSigmaF,
            "l_sweep" => StudyKind::LSweep,
            "wrong_l" => StudyKind::WrongL,
            "odometry_noise" => StudyKind::OdometryNoise,
            "single_run" => StudyKind::SingleRun,
            other => return Err(Error::Config(format!("unknown study kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub values: Vec<f64>,
    pub seeds: usize,
    /// Worker threads for sweep cells; 0 uses one per core.
    pub workers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            kind: StudyKind::SingleRun,
            values: Vec::new(),
            seeds: 1,
            workers: 0,
        }
    }
}

/// Solver settings. Unset hyperparameters and odometry sigma fall back to the
/// generating values in `[scenario]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub estimate_hypers: bool,
    pub sigma_f: Option<f64>,
    pub length_scale: Option<f64>,
    pub mode: Mode,
    pub odom_position_sigma: Option<f64>,
    pub odom_velocity_sigma: f64,
    pub odom_attitude_sigma: f64,
    pub noise: NoiseParams,
    pub initial_prior: Option<InitialPrior>,
    pub zero_prior: Option<ZeroPrior>,
    pub options: SolverOptions,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let odo = OdometryNoise::default();
        Self {
            estimate_hypers: false,
            sigma_f: None,
            length_scale: None,
            mode: Mode::Planar(PlanarParams::default()),
            odom_position_sigma: None,
            odom_velocity_sigma: odo.velocity,
            odom_attitude_sigma: odo.attitude,
            noise: NoiseParams::default(),
            initial_prior: Some(InitialPrior::default()),
            zero_prior: None,
            options: SolverOptions::default(),
        }
    }
}

impl SolverConfig {
    pub fn hyper_mode(&self, scenario: &ScenarioConfig) -> Result<HyperMode> {
        let h = Hyperparams::new(
            self.sigma_f.unwrap_or(scenario.hyper.sigma_f),
            self.length_scale.unwrap_or(scenario.hyper.length_scale),
        )?;
        Ok(if self.estimate_hypers {
            HyperMode::Estimated(h)
        } else {
            HyperMode::Fixed(h)
        })
    }

    /// Assembles a problem from records; the initial state sits at the origin
    /// at the first IMU timestamp.
    pub fn problem(&self, imu: Vec<ImuRecord>, mag: Vec<MagRecord>, scenario: &ScenarioConfig) -> Result<Problem> {
        let t0 = imu.first().map_or(0.0, |r| r.t);
        let mut p = Problem::planar(imu, mag, scenario.family, self.hyper_mode(scenario)?);
        p.mode = self.mode;
        p.initial_state = NavState::at_rest(t0, Vector3::zeros());
        p.initial_prior = self.initial_prior;
        p.zero_prior = self.zero_prior;
        p.noise = self.noise;
        p.odometry = OdometryNoise {
            position: self.odom_position_sigma.unwrap_or(scenario.odom_sigma.max(SIGMA_FLOOR)),
            velocity: self.odom_velocity_sigma,
            attitude: self.odom_attitude_sigma,
        };
        p.options = self.options;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub scenario: ScenarioConfig,
    pub solver: SolverConfig,
    pub study: StudyConfig,
}

const SCENARIO_KEYS: &[&str] = &[
    "shape", "side", "width", "height", "pitch", "waypoints", "spacing", "loops", "odom_sigma",
    "odom_bias_x", "odom_bias_y", "sigma_f", "length_scale", "kernel", "mag_sigma", "period", "seed",
];
const SOLVER_KEYS: &[&str] = &[
    "hyper_mode", "sigma_f", "length_scale", "mode", "bias_walk_sigma", "bias_prior_sigma",
    "odom_position_sigma", "odom_velocity_sigma", "odom_attitude_sigma", "w_gyro_sigma",
    "w_accel_sigma", "gravity", "initial_prior", "initial_position_sigma", "initial_velocity_sigma",
    "initial_attitude_sigma", "initial_gyro_bias_sigma", "initial_accel_bias_sigma", "zero_prior",
    "zero_prior_radius", "zero_prior_weight", "max_iterations", "rel_cost_tol", "grad_tol",
    "initial_lambda", "max_hyper_rounds", "hyper_tol", "include_logdet",
];
const STUDY_KEYS: &[&str] = &["kind", "values", "seeds", "workers"];

struct Section<'a> {
    name: &'static str,
    props: Option<&'a Properties>,
}

impl<'a> Section<'a> {
    fn new(ini: &'a Ini, name: &'static str, allowed: &[&str]) -> Result<Self> {
        let props = ini.section(Some(name));
        if let Some(p) = props {
            if let Some((k, _)) = p.iter().find(|(k, _)| !allowed.contains(k)) {
                return Err(Error::Config(format!("[{name}] unknown key `{k}`")));
            }
        }
        Ok(Self { name, props })
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::Config(format!("[{}] {key}: cannot parse `{v}`", self.name)))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<f64>()
                            .map_err(|_| Error::Config(format!("[{}] {key}: cannot parse `{s}`", self.name)))
                    })
                    .collect()
            })
            .transpose()
    }
}

fn parse_waypoints(text: &str) -> Result<Vec<[f64; 2]>> {
    text.split(';')
        .map(|pair| {
            let v: Vec<&str> = pair.split(',').map(str::trim).collect();
            match v.as_slice() {
                [x, y] => match (x.parse(), y.parse()) {
                    (Ok(x), Ok(y)) => Ok([x, y]),
                    _ => Err(Error::Config(format!("[scenario] waypoints: cannot parse `{pair}`"))),
                },
                _ => Err(Error::Config(format!("[scenario] waypoints: expected `x, y`, got `{pair}`"))),
            }
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for name in ini.sections() {
            match name {
                Some("scenario" | "solver" | "study") => {}
                None if ini.general_section().is_empty() => {}
                None => return Err(Error::Config("keys outside a section".into())),
                Some(other) => return Err(Error::Config(format!("unknown section [{other}]"))),
            }
        }
        let sc = Section::new(&ini, "scenario", SCENARIO_KEYS)?;
        let sv = Section::new(&ini, "solver", SOLVER_KEYS)?;
        let st = Section::new(&ini, "study", STUDY_KEYS)?;

        let d = ScenarioConfig::default();
        let shape = match sc.raw("shape").unwrap_or("square") {
            "square" => Shape::Square {
                side: sc.or("side", 0.5)?,
            },
            "rectangle" => Shape::Rectangle {
                width: sc.get("width")?.ok_or_else(|| Error::Config("[scenario] rectangle needs `width`".into()))?,
                height: sc.get("height")?.ok_or_else(|| Error::Config("[scenario] rectangle needs `height`".into()))?,
            },
            "spiral" => Shape::Spiral {
                pitch: sc.get("pitch")?.ok_or_else(|| Error::Config("[scenario] spiral needs `pitch`".into()))?,
            },
            "waypoints" => Shape::Waypoints(parse_waypoints(
                sc.raw("waypoints")
                    .ok_or_else(|| Error::Config("[scenario] waypoints shape needs `waypoints`".into()))?,
            )?),
            other => return Err(Error::Config(format!("[scenario] unknown shape `{other}`"))),
        };
        let scenario = ScenarioConfig {
            shape,
            spacing: sc.or("spacing", d.spacing)?,
            loops: sc.or("loops", d.loops)?,
            odom_sigma: sc.or("odom_sigma", d.odom_sigma)?,
            odom_bias: Vector2::new(sc.or("odom_bias_x", d.odom_bias.x)?, sc.or("odom_bias_y", d.odom_bias.y)?),
            hyper: Hyperparams {
                sigma_f: sc.or("sigma_f", d.hyper.sigma_f)?,
                length_scale: sc.or("length_scale", d.hyper.length_scale)?,
            },
            family: sc.or("kernel", d.family)?,
            mag_sigma: sc.or("mag_sigma", d.mag_sigma)?,
            period: sc.or("period", d.period)?,
            seed: sc.or("seed", d.seed)?,
        };
        scenario.hyper.validate()?;

        let ds = SolverConfig::default();
        let estimate_hypers = match sv.raw("hyper_mode").unwrap_or("fixed") {
            "fixed" => false,
            "estimated" => true,
            other => return Err(Error::Config(format!("[solver] unknown hyper_mode `{other}`"))),
        };
        let planar = PlanarParams {
            bias_walk_sigma: sv.or("bias_walk_sigma", PlanarParams::default().bias_walk_sigma)?,
            bias_prior_sigma: sv.or("bias_prior_sigma", PlanarParams::default().bias_prior_sigma)?,
        };
        let mode = match sv.raw("mode").unwrap_or("planar") {
            "planar" => Mode::Planar(planar),
            "full" => Mode::Full,
            other => return Err(Error::Config(format!("[solver] unknown mode `{other}`"))),
        };
        let gravity = match sv.list("gravity")? {
            None => ds.noise.gravity,
            Some(g) if g.len() == 3 => Vector3::new(g[0], g[1], g[2]),
            Some(_) => return Err(Error::Config("[solver] gravity needs three components".into())),
        };
        let ip = InitialPrior::default();
        let initial_prior = if sv.or("initial_prior", true)? {
            Some(InitialPrior {
                position: sv.or("initial_position_sigma", ip.position)?,
                velocity: sv.or("initial_velocity_sigma", ip.velocity)?,
                attitude: sv.or("initial_attitude_sigma", ip.attitude)?,
                gyro_bias: sv.or("initial_gyro_bias_sigma", ip.gyro_bias)?,
                accel_bias: sv.or("initial_accel_bias_sigma", ip.accel_bias)?,
            })
        } else {
            None
        };
        let zp = ZeroPrior::default();
        let zero_prior = if sv.or("zero_prior", false)? {
            Some(ZeroPrior {
                radius: sv.or("zero_prior_radius", zp.radius)?,
                weight: sv.or("zero_prior_weight", zp.weight)?,
            })
        } else {
            None
        };
        let mut options = ds.options;
        options.lm.max_iterations = sv.or("max_iterations", options.lm.max_iterations)?;
        options.lm.rel_cost_tol = sv.or("rel_cost_tol", options.lm.rel_cost_tol)?;
        options.lm.grad_tol = sv.or("grad_tol", options.lm.grad_tol)?;
        options.lm.initial_lambda = sv.or("initial_lambda", options.lm.initial_lambda)?;
        options.max_hyper_rounds = sv.or("max_hyper_rounds", options.max_hyper_rounds)?;
        options.hyper_tol = sv.or("hyper_tol", options.hyper_tol)?;
        options.include_logdet = sv.or("include_logdet", options.include_logdet)?;
        let solver = SolverConfig {
            estimate_hypers,
            sigma_f: sv.get("sigma_f")?,
            length_scale: sv.get("length_scale")?,
            mode,
            odom_position_sigma: sv.get("odom_position_sigma")?,
            odom_velocity_sigma: sv.or("odom_velocity_sigma", ds.odom_velocity_sigma)?,
            odom_attitude_sigma: sv.or("odom_attitude_sigma", ds.odom_attitude_sigma)?,
            noise: NoiseParams {
                w_gyro_sigma: sv.or("w_gyro_sigma", ds.noise.w_gyro_sigma)?,
                w_accel_sigma: sv.or("w_accel_sigma", ds.noise.w_accel_sigma)?,
                gravity,
            },
            initial_prior,
            zero_prior,
            options,
        };

        let kind: StudyKind = st.or("kind", StudyKind::SingleRun)?;
        let values = st.list("values")?.unwrap_or_default();
        let study = StudyConfig {
            kind,
            values,
            seeds: st.or("seeds", 1)?,
            workers: st.or("workers", 0)?,
        };
        if study.seeds == 0 {
            return Err(Error::Config("[study] seeds must be at least 1".into()));
        }
        if kind != StudyKind::SingleRun && study.values.is_empty() {
            return Err(Error::Config(format!("[study] `{kind}` needs a non-empty `values` list")));
        }
        if study.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("[study] values must be finite".into()));
        }
        Ok(Self { scenario, solver, study })
    }
}

/// Writes every scenario parameter as a `[scenario]` section that
/// [`ExperimentConfig::parse`] reads back to the same configuration.
pub fn write_manifest<W: Write>(cfg: &ScenarioConfig, out: &mut W) -> Result<()> {
    let mut ini = Ini::new();
    {
        let mut s = ini.with_section(Some("scenario"));
        match &cfg.shape {
            Shape::Square { side } => {
                s.set("shape", "square").set("side", side.to_string());
            }
            Shape::Rectangle { width, height } => {
                s.set("shape", "rectangle")
                    .set("width", width.to_string())
                    .set("height", height.to_string());
            }
            Shape::Spiral { pitch } => {
                s.set("shape", "spiral").set("pitch", pitch.to_string());
            }
            Shape::Waypoints(w) => {
                let text: Vec<String> = w.iter().map(|p| format!("{}, {}", p[0], p[1])).collect();
                s.set("shape", "waypoints").set("waypoints", text.join("; "));
            }
        }
        s.set("spacing", cfg.spacing.to_string())
            .set("loops", cfg.loops.to_string())
            .set("odom_sigma", cfg.odom_sigma.to_string())
            .set("odom_bias_x", cfg.odom_bias.x.to_string())
            .set("odom_bias_y", cfg.odom_bias.y.to_string())
            .set("sigma_f", cfg.hyper.sigma_f.to_string())
            .set("length_scale", cfg.hyper.length_scale.to_string())
            .set("kernel", cfg.family.to_string())
            .set("mag_sigma", cfg.mag_sigma.to_string())
            .set("period", cfg.period.to_string())
            .set("seed", cfg.seed.to_string());
    }
    ini.write_to(out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelFamily;

    #[test]
    fn empty_config_is_the_frozen_scenario() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.scenario, ScenarioConfig::default());
    }

    #[test]
    fn sections_and_overrides() {
        let text = "[scenario]\nodom_bias_x = 0.015\nodom_bias_y = 0.015\nlength_scale = 0.4\nkernel = curl-free\n\
                    [solver]\nhyper_mode = estimated\nsigma_f = 0.2\nzero_prior = true\nmax_iterations = 50\n\
                    [study]\nkind = odometry_noise\nvalues = 0.0005, 0.0025,0.005\nseeds = 10\nworkers = 2\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.scenario.odom_bias, Vector2::new(0.015, 0.015));
        assert_eq!(cfg.scenario.hyper.length_scale, 0.4);
        assert_eq!(cfg.scenario.family, KernelFamily::CurlFree);
        assert!(cfg.solver.estimate_hypers);
        assert_eq!(cfg.solver.sigma_f, Some(0.2));
        assert_eq!(cfg.solver.zero_prior, Some(ZeroPrior::default()));
        assert_eq!(cfg.solver.options.lm.max_iterations, 50);
        assert_eq!(cfg.study.kind, StudyKind::OdometryNoise);
        assert_eq!(cfg.study.values, vec![0.0005, 0.0025, 0.005]);
        assert_eq!((cfg.study.seeds, cfg.study.workers), (10, 2));
    }

    #[test]
    fn bad_configs_are_rejected() {
        for text in [
            "[scenario]\nsigma = 1\n",
            "[scenrio]\nseed = 1\n",
            "[scenario]\nloops = two\n",
            "[study]\nkind = sigma_f_sweep\n",
            "[study]\nkind = single_run\nseeds = 0\n",
            "[study]\nkind = banana\n",
            "[scenario]\nshape = rectangle\nwidth = 1\n",
            "[solver]\ngravity = 0, 0\n",
            "seed = 3\n",
        ] {
            assert!(matches!(ExperimentConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn manifest_round_trips() {
        for shape in [
            Shape::Square { side: 0.75 },
            Shape::Rectangle { width: 1.0, height: 0.5 },
            Shape::Spiral { pitch: 0.5 },
            Shape::Waypoints(vec![[0.0, 0.0], [0.1 + 0.2, 0.0], [0.3, 1.0 / 3.0]]),
        ] {
            let cfg = ScenarioConfig {
                shape,
                odom_sigma: 1.0 / 7.0,
                seed: 42,
                family: KernelFamily::DivergenceFree,
                ..ScenarioConfig::default()
            };
            let mut buf = Vec::new();
            write_manifest(&cfg, &mut buf).unwrap();
            let back = ExperimentConfig::parse(std::str::from_utf8(&buf).unwrap()).unwrap();
            assert_eq!(back.scenario, cfg);
        }
    }

    #[test]
    fn solver_defaults_follow_the_scenario() {
        let cfg = ExperimentConfig::default();
        let mode = cfg.solver.hyper_mode(&cfg.scenario).unwrap();
        assert_eq!(mode, HyperMode::Fixed(cfg.scenario.hyper));
        let p = cfg.solver.problem(Vec::new(), Vec::new(), &cfg.scenario).unwrap();
        assert_eq!(p.odometry.position, cfg.scenario.odom_sigma);
    }
}
