//! Wind profile, drag/lift decomposition and the 15-value feature row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub const RHO_AIR: f64 = 1.225;
pub const RHO_WATER: f64 = 1025.0;
/// Height of the anemometer above the waterline.
pub const ANEMOMETER_HEIGHT: f64 = 2.0066;
pub const REFERENCE_HEIGHT: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 0.10;
pub const NUM_FEATURES: usize = 15;

/// Feature column names in row order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "v_a_x", "v_a_y", "v_w_x", "v_w_y", "D_a_x", "D_a_y", "D_w_x", "D_w_y", "L_a_x", "L_a_y",
    "L_w_x", "L_w_y", "T", "m_o", "gamma",
];

/// Wind and current at one instant; wind is the 10 m value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSample {
    pub t: f64,
    pub v_a: Vec2,
    pub v_w: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: String,
    pub m_o: f64,
    pub a_a: f64,
    pub a_w: f64,
    pub c_d_air: f64,
    pub c_l_air: f64,
    pub c_d_water: f64,
    pub c_l_water: f64,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ForceState {
    pub d_a: Vec2,
    pub d_w: Vec2,
    pub l_a: Vec2,
    pub l_w: Vec2,
    pub gamma: f64,
}

impl ForceState {
    pub fn total(&self) -> Vec2 {
        [
            self.d_a[0] + self.d_w[0] + self.l_a[0] + self.l_w[0],
            self.d_a[1] + self.d_w[1] + self.l_a[1] + self.l_w[1],
        ]
    }
}

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

pub fn wind_power_law(v_ref: f64, z_ref: f64, z: f64, beta: f64) -> Result<f64> {
    if !(z_ref > 0.0 && z > 0.0) {
        return Err(Error::invalid(format!("heights must be positive (z_ref={z_ref}, z={z})")));
    }
    if !(v_ref >= 0.0) || !beta.is_finite() {
        return Err(Error::invalid(format!("bad wind speed {v_ref} or exponent {beta}")));
    }
    Ok(v_ref * (z / z_ref).powf(beta))
}

/// Scales a wind vector measured at `z_ref` to height `z`.
pub fn extrapolate_wind(v: Vec2, z_ref: f64, z: f64, beta: f64) -> Result<Vec2> {
    let f = wind_power_law(1.0, z_ref, z, beta)?;
    Ok([v[0] * f, v[1] * f])
}

fn check_force_args(rel: Vec2, rho: f64, c: f64, area: f64) -> Result<()> {
    check_finite("relative velocity", &rel)?;
    if !(rho > 0.0 && area > 0.0 && c >= 0.0) {
        return Err(Error::invalid(format!(
            "need rho > 0, area > 0, coefficient >= 0 (rho={rho}, area={area}, c={c})"
        )));
    }
    Ok(())
}

/// `-½ ρ C_D A |ṽ| ṽ`
pub fn drag_force(rel: Vec2, rho: f64, c_d: f64, area: f64) -> Result<Vec2> {
    check_force_args(rel, rho, c_d, area)?;
    let k = -0.5 * rho * c_d * area * norm(rel);
    Ok([k * rel[0], k * rel[1]])
}

/// `½ ρ C_L A |ṽ| (-ṽ_y, ṽ_x)`
pub fn lift_force(rel: Vec2, rho: f64, c_l: f64, area: f64) -> Result<Vec2> {
    check_force_args(rel, rho, c_l, area)?;
    let k = 0.5 * rho * c_l * area * norm(rel);
    Ok([-k * rel[1], k * rel[0]])
}

pub fn submersion_rate(a_w: f64, a_a: f64) -> Result<f64> {
    if !(a_w >= 0.0 && a_a >= 0.0) || a_w + a_a <= 0.0 {
        return Err(Error::invalid(format!("bad areas A_w={a_w}, A_a={a_a}")));
    }
    Ok(a_w / (a_w + a_a))
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.c_d_air, self.c_l_air, self.c_d_water, self.c_l_water];
        if self.id.is_empty() {
            return Err(Error::invalid("object id is empty"));
        }
        if !(self.m_o > 0.0 && self.a_a > 0.0 && self.a_w >= 0.0) {
            return Err(Error::invalid(format!(
                "object {}: need m_o > 0, A_a > 0, A_w >= 0",
                self.id
            )));
        }
        if coeffs.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::invalid(format!("object {}: negative coefficient", self.id)));
        }
        Ok(())
    }

    pub fn gamma(&self) -> Result<f64> {
        submersion_rate(self.a_w, self.a_a)
    }

    /// Uses one predicted pair for both media.
    pub fn set_coefficients(&mut self, c_d: f64, c_l: f64) {
        self.c_d_air = c_d;
        self.c_d_water = c_d;
        self.c_l_air = c_l;
        self.c_l_water = c_l;
    }

    /// Forces for object velocity `v`, with relative velocities `v_i - v`.
    pub fn forces(&self, sample: &EnvSample, v: Vec2) -> Result<ForceState> {
        check_finite("object velocity", &v)?;
        check_finite("environment sample", &[sample.v_a[0], sample.v_a[1], sample.v_w[0], sample.v_w[1]])?;
        let rel_a = [sample.v_a[0] - v[0], sample.v_a[1] - v[1]];
        let rel_w = [sample.v_w[0] - v[0], sample.v_w[1] - v[1]];
        let (d_w, l_w) = if self.a_w > 0.0 {
            (
                drag_force(rel_w, RHO_WATER, self.c_d_water, self.a_w)?,
                lift_force(rel_w, RHO_WATER, self.c_l_water, self.a_w)?,
            )
        } else {
            ([0.0; 2], [0.0; 2])
        };
        Ok(ForceState {
            d_a: drag_force(rel_a, RHO_AIR, self.c_d_air, self.a_a)?,
            d_w,
            l_a: lift_force(rel_a, RHO_AIR, self.c_l_air, self.a_a)?,
            l_w,
            gamma: self.gamma()?,
        })
    }
}

fn inflatable(id: &str, m_o: f64, a_a: f64, c_d: f64, c_l: f64, description: &str) -> ObjectSpec {
    object(id, m_o, a_a, 0.10, c_d, c_l, description)
}

fn printed(id: &str, m_o: f64, a_a: f64, c_d: f64, c_l: f64, description: &str) -> ObjectSpec {
    object(id, m_o, a_a, 0.25, c_d, c_l, description)
}

fn object(id: &str, m_o: f64, a_a: f64, frac: f64, c_d: f64, c_l: f64, description: &str) -> ObjectSpec {
    ObjectSpec {
        id: id.to_string(),
        m_o,
        a_a,
        a_w: frac * a_a,
        c_d_air: c_d,
        c_l_air: c_l,
        c_d_water: c_d,
        c_l_water: c_l,
        description: description.to_string(),
    }
}

/// The five tested boats. Masses and exposed areas are measured values;
/// the coefficients are placeholders until the CNN supplies its own.
pub fn default_catalog() -> Vec<ObjectSpec> {
    vec![
        inflatable(
            "deformed-inflatable",
            1.0,
            4.067,
            1.25,
            0.30,
            "Deformed inflatable raft with a collapsed side chamber and an irregular, sagging outline. Lightweight PVC, open top.",
        ),
        inflatable(
            "orange-inflatable",
            1.9,
            2.759,
            1.05,
            0.12,
            "Inflatable orange raft with rounded front and flat rear. Constructed of lightweight PVC with no canopy.",
        ),
        inflatable(
            "banana-boat",
            5.634,
            5.314,
            1.15,
            0.25,
            "Long yellow banana boat, a curved inflatable tube with upturned ends and seat handles along the top.",
        ),
        printed(
            "orange-printed",
            4.022,
            0.834,
            0.70,
            0.05,
            "Mainly orange 3-D printed boat with a narrow pointed bow, smooth rigid hull and low flat deck.",
        ),
        printed(
            "red-black-printed",
            5.0,
            0.932,
            0.80,
            0.08,
            "Mainly red and black 3-D printed boat with a blunt square bow, rigid plastic hull and raised cabin block.",
        ),
    ]
}

pub fn load_catalog(path: &Path) -> Result<Vec<ObjectSpec>> {
    let objects: Vec<ObjectSpec> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    for o in &objects {
        o.validate()?;
    }
    Ok(objects)
}

pub fn save_catalog(path: &Path, objects: &[ObjectSpec]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(objects)?)?;
    Ok(())
}

pub fn find_object<'a>(objects: &'a [ObjectSpec], id: &str) -> Result<&'a ObjectSpec> {
    objects
        .iter()
        .find(|o| o.id == id)
        .ok_or_else(|| Error::UnknownObject(id.to_string()))
}

/// `[v_a, v_w, D_a, D_w, L_a, L_w, T, m_o, γ]`, 15 values.
pub fn feature_row(sample: &EnvSample, object: &ObjectSpec, v_obj: Vec2) -> Result<[f64; NUM_FEATURES]> {
    let f = object.forces(sample, v_obj)?;
    Ok([
        sample.v_a[0],
        sample.v_a[1],
        sample.v_w[0],
        sample.v_w[1],
        f.d_a[0],
        f.d_a[1],
        f.d_w[0],
        f.d_w[1],
        f.l_a[0],
        f.l_a[1],
        f.l_w[0],
        f.l_w[1],
        sample.t,
        object.m_o,
        f.gamma,
    ])
}
