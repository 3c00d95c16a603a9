//! GPS feature extraction: min-max normalized coordinates and the UE-BS unit
//! vector in Earth-Centered Earth-Fixed coordinates.
//!
//! Altitudes are carried in meters at the API boundary and converted to
//! kilometers internally, since the ellipsoid constants are in kilometers.
//! All arithmetic here is `f64` whatever dtype the model runs in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// WGS-84 equatorial radius in kilometers.
pub const WGS84_A_KM: f64 = 6378.137;
/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = 0.00669437999;

/// Below this displacement (km) the UE-BS direction is considered undefined.
pub const MIN_SEPARATION_KM: f64 = 1e-12;

/// Names of the model input features, in the order they appear in every
/// feature row. Checkpoints record this list and refuse mismatches.
pub const FEATURE_ORDER: [&str; 5] = ["lat_norm", "lon_norm", "ux", "uy", "uz"];
pub const FEATURE_DIM: usize = FEATURE_ORDER.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodeticPosition {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    /// Height normal to the ellipsoid, meters.
    pub altitude_m: f64,
}

impl GeodeticPosition {
    pub fn new(latitude_deg: f64, longitude_deg: f64, altitude_m: f64) -> Result<Self> {
        let pos = GeodeticPosition {
            latitude_deg,
            longitude_deg,
            altitude_m,
        };
        pos.validate()?;
        Ok(pos)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return Err(Error::InvalidPosition(format!(
                "latitude {} outside [-90, 90]",
                self.latitude_deg
            )));
        }
        if !(-180.0..=180.0).contains(&self.longitude_deg) {
            return Err(Error::InvalidPosition(format!(
                "longitude {} outside [-180, 180]",
                self.longitude_deg
            )));
        }
        if !self.altitude_m.is_finite() {
            return Err(Error::InvalidPosition("altitude is not finite".into()));
        }
        Ok(())
    }
}

/// ECEF coordinates in kilometers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcefVector {
    pub alpha_km: f64,
    pub beta_km: f64,
    pub gamma_km: f64,
}

impl EcefVector {
    pub fn norm(&self) -> f64 {
        (self.alpha_km * self.alpha_km + self.beta_km * self.beta_km + self.gamma_km * self.gamma_km)
            .sqrt()
    }

    pub fn sub(&self, other: &EcefVector) -> EcefVector {
        EcefVector {
            alpha_km: self.alpha_km - other.alpha_km,
            beta_km: self.beta_km - other.beta_km,
            gamma_km: self.gamma_km - other.gamma_km,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationBounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl NormalizationBounds {
    pub fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64) -> Result<Self> {
        if !(lat_min < lat_max) {
            return Err(Error::DegenerateBounds("latitude"));
        }
        if !(lon_min < lon_max) {
            return Err(Error::DegenerateBounds("longitude"));
        }
        Ok(NormalizationBounds {
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        })
    }
}

/// Elementwise latitude/longitude extrema over `positions`.
pub fn fit_bounds<'a, I>(positions: I) -> Result<NormalizationBounds>
where
    I: IntoIterator<Item = &'a GeodeticPosition>,
{
    let mut iter = positions.into_iter();
    let first = iter.next().ok_or(Error::EmptyDataset)?;
    let (mut lat_min, mut lat_max) = (first.latitude_deg, first.latitude_deg);
    let (mut lon_min, mut lon_max) = (first.longitude_deg, first.longitude_deg);
    for p in iter {
        lat_min = lat_min.min(p.latitude_deg);
        lat_max = lat_max.max(p.latitude_deg);
        lon_min = lon_min.min(p.longitude_deg);
        lon_max = lon_max.max(p.longitude_deg);
    }
    NormalizationBounds::new(lat_min, lat_max, lon_min, lon_max)
}

/// Min-max normalization of latitude and longitude. Positions outside the
/// fitted bounds map outside `[0, 1]`; they are not clamped.
pub fn normalize(pos: &GeodeticPosition, bounds: &NormalizationBounds) -> (f64, f64) {
    (
        (pos.latitude_deg - bounds.lat_min) / (bounds.lat_max - bounds.lat_min),
        (pos.longitude_deg - bounds.lon_min) / (bounds.lon_max - bounds.lon_min),
    )
}

pub fn geodetic_to_ecef(pos: &GeodeticPosition) -> EcefVector {
    let (sin_lat, cos_lat) = pos.latitude_deg.to_radians().sin_cos();
    let (sin_lon, cos_lon) = pos.longitude_deg.to_radians().sin_cos();
    let alt_km = pos.altitude_m / 1000.0;
    // prime vertical radius of curvature
    let r = WGS84_A_KM / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
    EcefVector {
        alpha_km: (r + alt_km) * cos_lat * cos_lon,
        beta_km: (r + alt_km) * cos_lat * sin_lon,
        gamma_km: (r + alt_km - WGS84_E2 * r) * sin_lat,
    }
}

/// Unit vector pointing from the BS to the UE in ECEF axes.
pub fn ue_bs_unit_vector(ue: &GeodeticPosition, bs: &GeodeticPosition) -> Result<[f64; 3]> {
    let r = geodetic_to_ecef(ue).sub(&geodetic_to_ecef(bs));
    let norm = r.norm();
    if !(norm >= MIN_SEPARATION_KM) {
        return Err(Error::ZeroVector);
    }
    Ok([r.alpha_km / norm, r.beta_km / norm, r.gamma_km / norm])
}

/// One model input row: `[lat_norm, lon_norm, ux, uy, uz]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub const ZERO: FeatureVector = FeatureVector([0.0; FEATURE_DIM]);

    pub fn lat_norm(&self) -> f64 {
        self.0[0]
    }

    pub fn lon_norm(&self) -> f64 {
        self.0[1]
    }

    pub fn unit(&self) -> [f64; 3] {
        [self.0[2], self.0[3], self.0[4]]
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }
}

pub fn make_feature(
    ue: &GeodeticPosition,
    bs: &GeodeticPosition,
    bounds: &NormalizationBounds,
) -> Result<FeatureVector> {
    let (lat_norm, lon_norm) = normalize(ue, bounds);
    let [ux, uy, uz] = ue_bs_unit_vector(ue, bs)?;
    Ok(FeatureVector([lat_norm, lon_norm, ux, uy, uz]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pos(lat: f64, lon: f64, alt: f64) -> GeodeticPosition {
        GeodeticPosition::new(lat, lon, alt).unwrap()
    }

    #[test]
    fn fit_bounds_takes_extrema() {
        let b = fit_bounds(&[pos(1.0, 10.0, 0.0), pos(3.0, 30.0, 0.0)]).unwrap();
        assert_eq!(b, NormalizationBounds::new(1.0, 3.0, 10.0, 30.0).unwrap());
    }

    #[test]
    fn fit_bounds_rejects_identical_latitudes() {
        let err = fit_bounds(&[pos(0.0, 0.0, 0.0), pos(0.0, 5.0, 0.0)]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBounds("latitude")));
        assert!(matches!(fit_bounds(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn normalize_examples() {
        let b = NormalizationBounds::new(1.0, 3.0, 10.0, 30.0).unwrap();
        assert_eq!(normalize(&pos(1.0, 10.0, 0.0), &b), (0.0, 0.0));
        assert_eq!(normalize(&pos(3.0, 30.0, 0.0), &b), (1.0, 1.0));
        assert_eq!(normalize(&pos(2.0, 15.0, 0.0), &b), (0.5, 0.25));
        // outside the fitted range: passed through, not clamped
        let (lat, lon) = normalize(&pos(4.0, 5.0, 0.0), &b);
        assert_eq!((lat, lon), (1.5, -0.25));
    }

    #[test]
    fn ecef_axis_points() {
        let e = geodetic_to_ecef(&pos(0.0, 0.0, 0.0));
        assert_eq!((e.alpha_km, e.beta_km, e.gamma_km), (WGS84_A_KM, 0.0, 0.0));
        let e = geodetic_to_ecef(&pos(0.0, 90.0, 0.0));
        assert!(e.alpha_km.abs() < 1e-9);
        assert!((e.beta_km - WGS84_A_KM).abs() < 1e-12);
        // pole; reference value computed at 40 significant digits
        let e = geodetic_to_ecef(&pos(90.0, 0.0, 0.0));
        assert!((e.gamma_km - 6356.752314245631683).abs() < 1e-9);
        assert!(e.alpha_km.abs() < 1e-9);
    }

    #[test]
    fn unit_vector_radial_offset() {
        let u = ue_bs_unit_vector(&pos(0.0, 0.0, 1000.0), &pos(0.0, 0.0, 0.0)).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-12 && u[1].abs() < 1e-12 && u[2].abs() < 1e-12);
    }

    #[test]
    fn unit_vector_coincident_points() {
        let p = pos(33.0, -112.0, 20.0);
        assert!(matches!(ue_bs_unit_vector(&p, &p), Err(Error::ZeroVector)));
    }

    #[test]
    fn unit_vector_matches_high_precision_reference() {
        // ECEF difference normalized with 40-digit arithmetic
        let expected = [
            0.056875925583842234922,
            0.14077285568845147526,
            0.98840686571386160898,
        ];
        let u = ue_bs_unit_vector(&pos(33.001, -112.0, 50.0), &pos(33.0, -112.0, 0.0)).unwrap();
        for i in 0..3 {
            assert!((u[i] - expected[i]).abs() < 1e-9, "{i}: {} vs {}", u[i], expected[i]);
        }
    }

    #[test]
    fn feature_concatenates_in_fixed_order() {
        let b = NormalizationBounds::new(32.0, 34.0, -113.0, -111.0).unwrap();
        let ue = pos(33.001, -112.0, 50.0);
        let bs = pos(33.0, -112.0, 0.0);
        let f = make_feature(&ue, &bs, &b).unwrap();
        let (la, lo) = normalize(&ue, &b);
        assert_eq!(f.0[..2], [la, lo]);
        assert_eq!(f.unit(), ue_bs_unit_vector(&ue, &bs).unwrap());
    }

    #[test]
    fn invalid_positions_rejected() {
        assert!(GeodeticPosition::new(91.0, 0.0, 0.0).is_err());
        assert!(GeodeticPosition::new(0.0, -180.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn surface_magnitude_between_axes(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0) {
            let n = geodetic_to_ecef(&pos(lat, lon, 0.0)).norm();
            prop_assert!((6356.75..=6378.14).contains(&n));
        }

        #[test]
        fn unit_vector_is_unit_and_antisymmetric(
            lat in -60.0f64..60.0, lon in -179.0f64..179.0,
            dlat in -0.01f64..0.01, dlon in -0.01f64..0.01, alt in 0.0f64..500.0,
        ) {
            let a = pos(lat, lon, alt);
            let b = pos(lat + dlat, lon + dlon, alt);
            prop_assume!(dlat.abs() > 1e-7 || dlon.abs() > 1e-7);
            let u = ue_bs_unit_vector(&a, &b).unwrap();
            let v = ue_bs_unit_vector(&b, &a).unwrap();
            let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
            for i in 0..3 {
                prop_assert!((u[i] + v[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn normalized_in_unit_square_for_fitted_points(
            pts in proptest::collection::vec((33.0f64..34.0, -112.0f64..-111.0), 2..50)
        ) {
            let ps: Vec<_> = pts.iter().map(|&(a, b)| pos(a, b, 0.0)).collect();
            if let Ok(b) = fit_bounds(&ps) {
                for p in &ps {
                    let (x, y) = normalize(p, &b);
                    prop_assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
                }
            }
        }
    }
}
