//! Synthetic UAV scenario generator with a geometric beam oracle.
//!
//! Drones fly piecewise-linear paths between random waypoints inside the
//! sector served by one BS, sampled at 1 Hz. The optimal beam is the
//! azimuth bin containing the BS-to-UE bearing, and each beam's relative
//! power falls off as a Gaussian in angular distance from its bin center.
//! Positions are laid out in a local tangent plane around the BS and mapped
//! to latitude/longitude with a spherical small-offset approximation; the
//! oracle inverts the same mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{RawDataset, RawSample};
use crate::error::{Error, Result};
use crate::geo::GeodeticPosition;

/// Radius of the local spherical approximation, meters.
pub const LOCAL_EARTH_RADIUS_M: f64 = 6_371_000.0;

const SECTOR_TOLERANCE_DEG: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub bs_pos: GeodeticPosition,
    pub codebook_size: usize,
    /// Served azimuth arc `(start, end)` in degrees clockwise from north.
    pub sector_deg: (f64, f64),
    pub n_sequences: usize,
    pub seq_len: usize,
    pub speed_mps: (f64, f64),
    pub height_m: (f64, f64),
    /// Horizontal distance of waypoints from the BS.
    pub range_m: (f64, f64),
    /// Standard deviation of the waypoint perturbation, meters.
    pub jitter_m: f64,
    pub seed: u64,
    /// Power decay per squared bin width of angular offset.
    pub power_decay: f64,
    /// When set, sequence `q` flies in a narrow sub-arc that sweeps across
    /// the sector as `q` grows, so the label distribution drifts over time.
    pub drift: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            bs_pos: GeodeticPosition {
                latitude_deg: 33.4205,
                longitude_deg: -111.9290,
                altitude_m: 0.0,
            },
            codebook_size: 32,
            sector_deg: (-60.0, 60.0),
            n_sequences: 200,
            seq_len: 60,
            speed_mps: (2.0, 6.0),
            height_m: (20.0, 100.0),
            range_m: (200.0, 500.0),
            jitter_m: 10.0,
            seed: 0,
            power_decay: 0.5,
            drift: false,
        }
    }
}

impl ScenarioConfig {
    pub fn sector_width(&self) -> f64 {
        self.sector_deg.1 - self.sector_deg.0
    }

    pub fn bin_width(&self) -> f64 {
        self.sector_width() / self.codebook_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.bs_pos.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.codebook_size < 2 {
            return bad("codebook size must be at least 2");
        }
        let width = self.sector_width();
        // a wedge of at most 180 degrees is convex, which keeps straight
        // segments between in-sector waypoints inside the sector
        if !(width > 0.0 && width <= 180.0) {
            return bad("sector must satisfy start < end with width <= 180 degrees");
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.speed_mps) || self.speed_mps.0 < 0.0 {
            return bad("speed range must be ordered and nonnegative");
        }
        if !ordered(self.height_m) || self.height_m.0 < 0.0 {
            return bad("height range must be ordered and nonnegative");
        }
        if !ordered(self.range_m) || !(self.range_m.0 > 0.0) {
            return bad("waypoint range must be ordered and positive");
        }
        if !(self.jitter_m >= 0.0) {
            return bad("jitter must be nonnegative");
        }
        if !(self.power_decay > 0.0) {
            return bad("power decay must be positive");
        }
        Ok(())
    }
}

/// Local east/north offset (meters) of `ue` relative to `bs`.
fn local_offset(bs: &GeodeticPosition, ue: &GeodeticPosition) -> (f64, f64) {
    let north = (ue.latitude_deg - bs.latitude_deg).to_radians() * LOCAL_EARTH_RADIUS_M;
    let east = (ue.longitude_deg - bs.longitude_deg).to_radians()
        * LOCAL_EARTH_RADIUS_M
        * bs.latitude_deg.to_radians().cos();
    (east, north)
}

fn from_local(bs: &GeodeticPosition, east: f64, north: f64, altitude_m: f64) -> GeodeticPosition {
    GeodeticPosition {
        latitude_deg: bs.latitude_deg + (north / LOCAL_EARTH_RADIUS_M).to_degrees(),
        longitude_deg: bs.longitude_deg
            + (east / (LOCAL_EARTH_RADIUS_M * bs.latitude_deg.to_radians().cos())).to_degrees(),
        altitude_m,
    }
}

/// Horizontal bearing from `bs` to `ue`, degrees clockwise from north in
/// `(-180, 180]`.
pub fn bearing_deg(bs: &GeodeticPosition, ue: &GeodeticPosition) -> f64 {
    let (east, north) = local_offset(bs, ue);
    east.atan2(north).to_degrees()
}

/// Bearing offset from the sector start in bin widths, in `[0, M]`.
fn sector_position(bearing: f64, cfg: &ScenarioConfig) -> Result<f64> {
    let width = cfg.sector_width();
    let mut rel = (bearing - cfg.sector_deg.0).rem_euclid(360.0);
    if rel > 360.0 - SECTOR_TOLERANCE_DEG {
        rel = 0.0;
    }
    if rel > width + SECTOR_TOLERANCE_DEG {
        return Err(Error::OutOfSector { bearing_deg: bearing });
    }
    Ok((rel.min(width) / width) * cfg.codebook_size as f64)
}

/// Beam whose azimuth bin contains `bearing` (bins are closed on the upper
/// edge, bin 0 also holds the sector start) together with the per-beam
/// power profile.
pub fn beam_for_bearing(bearing: f64, cfg: &ScenarioConfig) -> Result<(usize, Vec<f64>)> {
    let m = cfg.codebook_size;
    let x = sector_position(bearing, cfg)?;
    let beam = (x.ceil() as usize).saturating_sub(1).min(m - 1);
    let powers = (0..m)
        .map(|i| {
            let d = x - (i as f64 + 0.5);
            (-cfg.power_decay * d * d).exp()
        })
        .collect();
    Ok((beam, powers))
}

pub fn geometric_beam_oracle(ue: &GeodeticPosition, cfg: &ScenarioConfig) -> Result<(usize, Vec<f64>)> {
    beam_for_bearing(bearing_deg(&cfg.bs_pos, ue), cfg)
}

struct Waypoints<'a> {
    cfg: &'a ScenarioConfig,
    arc: (f64, f64),
    jitter: Option<Normal<f64>>,
}

impl Waypoints<'_> {
    fn next(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        let (lo, hi) = self.arc;
        let az = rng.random_range(lo..=hi).to_radians();
        let r = rng.random_range(self.cfg.range_m.0..=self.cfg.range_m.1);
        let (mut east, mut north) = (r * az.sin(), r * az.cos());
        if let Some(n) = &self.jitter {
            east += n.sample(rng);
            north += n.sample(rng);
            // pull the perturbed point back into the arc
            let az = east.atan2(north).to_degrees();
            let rel = (az - lo).rem_euclid(360.0);
            let span = hi - lo;
            let az = if rel <= span {
                az
            } else if rel - span < 360.0 - rel {
                hi
            } else {
                lo
            }
            .to_radians();
            let r = east.hypot(north).clamp(self.cfg.range_m.0, self.cfg.range_m.1);
            east = r * az.sin();
            north = r * az.cos();
        }
        (east, north)
    }
}

fn sequence_arc(cfg: &ScenarioConfig, q: usize) -> (f64, f64) {
    let (start, end) = cfg.sector_deg;
    let width = cfg.sector_width();
    let margin = width * 1e-3;
    if !cfg.drift {
        return (start + margin, end - margin);
    }
    let center = start + width * (q as f64 + 0.5) / cfg.n_sequences.max(1) as f64;
    let half = width / 8.0;
    (
        (center - half).max(start + margin),
        (center + half).min(end - margin),
    )
}

fn generate_sequence(cfg: &ScenarioConfig, q: usize) -> Result<Vec<RawSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(q as u64 + 1);
    let speed = rng.random_range(cfg.speed_mps.0..=cfg.speed_mps.1);
    let height = rng.random_range(cfg.height_m.0..=cfg.height_m.1);
    let waypoints = Waypoints {
        cfg,
        arc: sequence_arc(cfg, q),
        jitter: (cfg.jitter_m > 0.0)
            .then(|| Normal::new(0.0, cfg.jitter_m).expect("jitter validated")),
    };

    let mut pos = waypoints.next(&mut rng);
    let mut target = waypoints.next(&mut rng);
    let mut out = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        let ue = from_local(&cfg.bs_pos, pos.0, pos.1, height);
        let (beam, powers) = geometric_beam_oracle(&ue, cfg)?;
        out.push(RawSample::new(
            q,
            t,
            cfg.bs_pos.latitude_deg,
            cfg.bs_pos.longitude_deg,
            ue.latitude_deg,
            ue.longitude_deg,
            height,
            beam,
            Some(powers),
        )?);

        // advance one tick along the waypoint polyline
        let mut remaining = speed;
        let mut hops = 0;
        while remaining > 0.0 && hops < 64 {
            let (dx, dy) = (target.0 - pos.0, target.1 - pos.1);
            let dist = dx.hypot(dy);
            if dist <= remaining {
                pos = target;
                remaining -= dist;
                target = waypoints.next(&mut rng);
                hops += 1;
            } else {
                pos = (pos.0 + dx / dist * remaining, pos.1 + dy / dist * remaining);
                remaining = 0.0;
            }
        }
    }
    Ok(out)
}

/// Generate `n_sequences` trajectories of `seq_len` samples each.
/// Identical configs (including the seed) give identical datasets.
pub fn generate(cfg: &ScenarioConfig) -> Result<RawDataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.n_sequences * cfg.seq_len);
    for q in 0..cfg.n_sequences {
        samples.extend(generate_sequence(cfg, q)?);
    }
    RawDataset::new(samples, cfg.codebook_size)
}
