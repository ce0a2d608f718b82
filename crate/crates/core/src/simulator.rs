//! Synthetic drift trajectories from the force model.
//!
//! Wind and current are smooth seeded fields (mean + slow sinusoid +
//! a handful of random band-limited sinusoids), clipped to a speed band.
//! The object obeys `m dv/dt = F` where `F` is the physical force: the
//! recorded feature forces use `ṽ = v_i - v` in the drag formula, which
//! points away from the fluid velocity, so the net force is their negation.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{EnvSample, ForceState, ObjectSpec, Vec2};

pub const CSV_HEADER: [&str; 7] = ["t", "v_a_x", "v_a_y", "v_w_x", "v_w_y", "d_x", "d_y"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub mean_speed: f64,
    /// Radians counter-clockwise from east.
    pub mean_direction: f64,
    pub gust_amplitude: f64,
    pub gust_period: f64,
    pub direction_amplitude: f64,
    pub direction_period: f64,
    /// RMS of the random speed component.
    pub noise_amplitude: f64,
    /// RMS of the random direction component, radians.
    pub direction_noise: f64,
    /// Shortest and longest period of the random components, seconds.
    pub noise_band: [f64; 2],
    pub noise_components: usize,
    pub min_speed: f64,
    pub max_speed: f64,
}

impl FieldConfig {
    pub fn wind() -> Self {
        FieldConfig {
            mean_speed: 1.55,
            mean_direction: 0.35,
            gust_amplitude: 0.35,
            gust_period: 420.0,
            direction_amplitude: 0.35,
            direction_period: 900.0,
            noise_amplitude: 0.18,
            direction_noise: 0.12,
            noise_band: [15.0, 150.0],
            noise_components: 12,
            min_speed: 0.894,
            max_speed: 2.235,
        }
    }

    pub fn current() -> Self {
        FieldConfig {
            mean_speed: 0.09,
            mean_direction: 1.9,
            gust_amplitude: 0.018,
            gust_period: 700.0,
            direction_amplitude: 0.25,
            direction_period: 1300.0,
            noise_amplitude: 0.008,
            direction_noise: 0.08,
            noise_band: [40.0, 300.0],
            noise_components: 8,
            min_speed: 0.061,
            max_speed: 0.122,
        }
    }

    /// A steady field with fixed speed and direction.
    pub fn constant(speed: f64, direction: f64) -> Self {
        FieldConfig {
            mean_speed: speed,
            mean_direction: direction,
            gust_amplitude: 0.0,
            gust_period: 1.0,
            direction_amplitude: 0.0,
            direction_period: 1.0,
            noise_amplitude: 0.0,
            direction_noise: 0.0,
            noise_band: [1.0, 1.0],
            noise_components: 0,
            min_speed: speed,
            max_speed: speed,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = self.min_speed >= 0.0
            && self.min_speed <= self.max_speed
            && self.gust_period > 0.0
            && self.direction_period > 0.0
            && self.noise_band[0] > 0.0
            && self.noise_band[0] <= self.noise_band[1];
        if !ok {
            return Err(Error::invalid(format!("{what} field: bad speed band or periods")));
        }
        Ok(())
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig::wind()
    }
}

#[derive(Debug, Clone, Copy)]
struct Component {
    omega: f64,
    phase: f64,
    amp: f64,
}

/// A realized field; evaluable at any time.
#[derive(Debug, Clone)]
pub struct Field {
    cfg: FieldConfig,
    gust_phase: f64,
    dir_phase: f64,
    speed_noise: Vec<Component>,
    dir_noise: Vec<Component>,
}

impl Field {
    pub fn new(cfg: &FieldConfig, rng: &mut impl Rng) -> Self {
        let draw = |amp: f64, rng: &mut dyn rand::RngCore| -> Vec<Component> {
            let k = cfg.noise_components;
            let each = if k == 0 { 0.0 } else { amp * (2.0 / k as f64).sqrt() };
            (0..k)
                .map(|_| {
                    let period = if cfg.noise_band[0] < cfg.noise_band[1] {
                        rng.random_range(cfg.noise_band[0]..cfg.noise_band[1])
                    } else {
                        cfg.noise_band[0]
                    };
                    Component {
                        omega: 2.0 * PI / period,
                        phase: rng.random_range(0.0..2.0 * PI),
                        amp: each,
                    }
                })
                .collect()
        };
        let speed_noise = draw(cfg.noise_amplitude, rng);
        let dir_noise = draw(cfg.direction_noise, rng);
        Field {
            cfg: cfg.clone(),
            gust_phase: rng.random_range(0.0..2.0 * PI),
            dir_phase: rng.random_range(0.0..2.0 * PI),
            speed_noise,
            dir_noise,
        }
    }

    fn sum(components: &[Component], t: f64) -> f64 {
        components.iter().map(|c| c.amp * (c.omega * t + c.phase).sin()).sum()
    }

    pub fn at(&self, t: f64) -> Vec2 {
        let c = &self.cfg;
        let speed = c.mean_speed
            + c.gust_amplitude * (2.0 * PI * t / c.gust_period + self.gust_phase).sin()
            + Self::sum(&self.speed_noise, t);
        let speed = speed.clamp(c.min_speed, c.max_speed);
        let dir = c.mean_direction
            + c.direction_amplitude * (2.0 * PI * t / c.direction_period + self.dir_phase).sin()
            + Self::sum(&self.dir_noise, t);
        [speed * dir.cos(), speed * dir.sin()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub duration: f64,
    pub timestep: f64,
    /// Upper bound on the internal integration step. Water drag on a
    /// light raft relaxes within a fraction of a second, so each record
    /// step is split into several substeps.
    pub max_substep: f64,
    pub wind: FieldConfig,
    pub current: FieldConfig,
    pub initial_position: Vec2,
    pub initial_velocity: Vec2,
    /// Standard deviation of the GPS error added to recorded positions, m.
    pub position_noise: f64,
    pub object_id: String,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            duration: 1500.0,
            timestep: 1.0,
            max_substep: 0.0025,
            wind: FieldConfig::wind(),
            current: FieldConfig::current(),
            initial_position: [0.0, 0.0],
            initial_velocity: [0.0, 0.0],
            position_noise: 0.25,
            object_id: String::new(),
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestep > 0.0 && self.duration >= self.timestep && self.max_substep > 0.0) {
            return Err(Error::invalid(format!(
                "need timestep > 0, duration >= timestep, max_substep > 0 (got {}, {}, {})",
                self.timestep, self.duration, self.max_substep
            )));
        }
        if !(self.position_noise >= 0.0) {
            return Err(Error::invalid("position_noise must be non-negative"));
        }
        self.wind.validate("wind")?;
        self.current.validate("current")
    }

    /// Number of recorded rows, `floor(duration / timestep)`.
    pub fn rows(&self) -> usize {
        (self.duration / self.timestep + 1e-9).floor() as usize
    }

    pub fn substeps(&self) -> usize {
        (self.timestep / self.max_substep).ceil().max(1.0) as usize
    }

    pub fn from_json(path: &Path) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub env: EnvSample,
    pub position: Vec2,
    /// Position as a GPS would report it.
    pub observed: Vec2,
    pub velocity: Vec2,
    pub forces: ForceState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub object_id: String,
    pub steps: Vec<TrajectoryStep>,
}

/// Time series in the exported CSV layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftSeries {
    pub samples: Vec<EnvSample>,
    pub drift: Vec<Vec2>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn series(&self) -> DriftSeries {
        DriftSeries {
            samples: self.steps.iter().map(|s| s.env).collect(),
            drift: self.steps.iter().map(|s| s.observed).collect(),
        }
    }
}

fn env_fields(cfg: &ScenarioConfig) -> (Field, Field) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let wind = Field::new(&cfg.wind, &mut rng);
    let current = Field::new(&cfg.current, &mut rng);
    (wind, current)
}

pub fn simulate(cfg: &ScenarioConfig, object: &ObjectSpec) -> Result<Trajectory> {
    cfg.validate()?;
    object.validate()?;
    let (wind, current) = env_fields(cfg);
    // GPS noise gets its own stream so the environment does not depend
    // on the noise level.
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed, &object.id));
    let gps = Normal::new(0.0, cfg.position_noise.max(0.0))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let n = cfg.rows();
    let sub = cfg.substeps();
    let h = cfg.timestep / sub as f64;
    let sample = |t: f64| EnvSample { t, v_a: wind.at(t), v_w: current.at(t) };

    let mut d = cfg.initial_position;
    let mut v = cfg.initial_velocity;
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * cfg.timestep;
        let env = sample(t);
        let forces = object.forces(&env, v)?;
        let observed = if cfg.position_noise > 0.0 {
            [d[0] + gps.sample(&mut noise_rng), d[1] + gps.sample(&mut noise_rng)]
        } else {
            d
        };
        steps.push(TrajectoryStep { env, position: d, observed, velocity: v, forces });
        if k + 1 == n {
            break;
        }
        for j in 0..sub {
            let ts = t + j as f64 * h;
            let f = if j == 0 { forces } else { object.forces(&sample(ts), v)? }.total();
            // semi-implicit Euler: velocity first, then position with the new velocity
            v[0] -= h * f[0] / object.m_o;
            v[1] -= h * f[1] / object.m_o;
            d[0] += h * v[0];
            d[1] += h * v[1];
            if !(v.iter().chain(&d).all(|x| x.is_finite())) {
                return Err(Error::Simulation {
                    step: k + 1,
                    reason: format!("state became non-finite (v={v:?}, d={d:?})"),
                });
            }
        }
    }
    Ok(Trajectory { object_id: object.id.clone(), steps })
}

/// All objects drift at the same time, so they share one environment;
/// GPS noise differs per object.
pub fn simulate_campaign(cfg: &ScenarioConfig, objects: &[ObjectSpec]) -> Result<Vec<Trajectory>> {
    objects
        .iter()
        .map(|o| {
            let mut c = cfg.clone();
            c.object_id = o.id.clone();
            simulate(&c, o)
        })
        .collect()
}

fn noise_seed(seed: u64, object_id: &str) -> u64 {
    // FNV-1a over the id keeps the per-object streams stable under reordering
    let h = object_id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    seed ^ h
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_series_csv<W: Write>(series: &DriftSeries, out: W) -> Result<()> {
    if series.samples.is_empty() {
        return Err(Error::invalid("cannot export an empty series"));
    }
    if series.samples.len() != series.drift.len() {
        return Err(Error::invalid("samples and drift differ in length"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for (s, d) in series.samples.iter().zip(&series.drift) {
        w.write_record([s.t, s.v_a[0], s.v_a[1], s.v_w[0], s.v_w[1], d[0], d[1]].map(fmt))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series_csv<R: Read>(input: R) -> Result<DriftSeries> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Parse(format!("unexpected header {header:?}")));
    }
    let mut samples = Vec::new();
    let mut drift = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != CSV_HEADER.len() {
            return Err(Error::Dimension { row: i + 1, expected: CSV_HEADER.len(), found: rec.len() });
        }
        let mut v = [0.0f64; 7];
        for (slot, field) in v.iter_mut().zip(rec.iter()) {
            *slot = field
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad number `{field}`", i + 1)))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("series row {}", i + 1)));
        }
        if let Some(prev) = samples.last().map(|s: &EnvSample| s.t) {
            if v[0] <= prev {
                return Err(Error::Parse(format!("row {}: time not increasing", i + 1)));
            }
        }
        samples.push(EnvSample { t: v[0], v_a: [v[1], v[2]], v_w: [v[3], v[4]] });
        drift.push([v[5], v[6]]);
    }
    if samples.is_empty() {
        return Err(Error::Parse("series has no rows".into()));
    }
    Ok(DriftSeries { samples, drift })
}

pub fn export_series(path: &Path, trajectory: &Trajectory) -> Result<()> {
    write_series_csv(&trajectory.series(), std::fs::File::create(path)?)
}

pub fn import_series(path: &Path) -> Result<DriftSeries> {
    read_series_csv(std::fs::File::open(path)?)
}

/// Central differences in the interior, one-sided at the ends. Used for
/// recorded data where the object velocity was not measured.
pub fn finite_difference_velocity(series: &DriftSeries) -> Vec<Vec2> {
    let n = series.drift.len();
    let t = |i: usize| series.samples[i].t;
    let d = &series.drift;
    (0..n)
        .map(|i| {
            if n < 2 {
                return [0.0; 2];
            }
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            let dt = t(b) - t(a);
            [(d[b][0] - d[a][0]) / dt, (d[b][1] - d[a][1]) / dt]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::default_catalog;

    fn calm() -> ScenarioConfig {
        ScenarioConfig {
            duration: 60.0,
            wind: FieldConfig::constant(0.0, 0.0),
            current: FieldConfig::constant(0.0, 0.0),
            position_noise: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn row_count_follows_duration() {
        let cfg = ScenarioConfig::default();
        assert_eq!(cfg.rows(), 1500);
        assert_eq!(cfg.substeps(), 400);
        let t = simulate(&cfg, &default_catalog()[0]).unwrap();
        assert_eq!(t.len(), 1500);
        assert_eq!(t.steps[1499].env.t, 1499.0);
    }

    #[test]
    fn calm_water_keeps_object_still() {
        let t = simulate(&calm(), &default_catalog()[1]).unwrap();
        assert!(t.steps.iter().all(|s| s.position == [0.0, 0.0] && s.velocity == [0.0, 0.0]));
    }

    #[test]
    fn fields_stay_in_band() {
        let cfg = ScenarioConfig::default();
        let (w, c) = env_fields(&cfg);
        for k in 0..3000 {
            let t = k as f64 * 0.5;
            let ws = w.at(t)[0].hypot(w.at(t)[1]);
            let cs = c.at(t)[0].hypot(c.at(t)[1]);
            assert!((0.894 - 1e-12..=2.235 + 1e-12).contains(&ws), "wind {ws}");
            assert!((0.061 - 1e-12..=0.122 + 1e-12).contains(&cs), "current {cs}");
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let mut cfg = calm();
        cfg.current = FieldConfig::constant(0.1, 0.0);
        cfg.max_substep = 1.0;
        let mut o = default_catalog()[0].clone();
        o.set_coefficients(50.0, 0.0);
        assert!(matches!(simulate(&cfg, &o), Err(Error::Simulation { .. })));
    }

    #[test]
    fn finite_difference_of_linear_motion() {
        let samples = (0..4).map(|i| EnvSample { t: i as f64, v_a: [0.0; 2], v_w: [0.0; 2] }).collect();
        let drift = (0..4).map(|i| [2.0 * i as f64, -1.0 * i as f64]).collect();
        let v = finite_difference_velocity(&DriftSeries { samples, drift });
        assert!(v.iter().all(|v| *v == [2.0, -1.0]));
    }
}
