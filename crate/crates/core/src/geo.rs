//! Location and acquisition-time encodings used as scalar-vector modalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by every distance in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Kilometres per degree of latitude.
pub const KM_PER_DEG_LAT: f64 = 111.32;

/// Point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoVec {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl GeoVec {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

pub fn encode_latlon(lat_deg: f64, lon_deg: f64) -> Result<GeoVec> {
    if !(-90.0..=90.0).contains(&lat_deg) || !(-180.0..=180.0).contains(&lon_deg) {
        return Err(Error::OutOfRange(format!("lat/lon ({lat_deg}, {lon_deg})")));
    }
    let (lat, lon) = (lat_deg.to_radians(), lon_deg.to_radians());
    Ok(GeoVec {
        x: lat.cos() * lon.cos(),
        y: lat.cos() * lon.sin(),
        z: lat.sin(),
    })
}

/// Inverse of [`encode_latlon`]; renormalizes, and reports longitude 0 at the poles.
pub fn decode_latlon(v: GeoVec) -> Result<(f64, f64)> {
    let n = v.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::OutOfRange(
            "cannot decode a zero or non-finite location vector".into(),
        ));
    }
    let (x, y, z) = (v.x / n, v.y / n, v.z / n);
    let horiz = x.hypot(y);
    let lat = z.atan2(horiz).to_degrees();
    let lon = if horiz < 1e-12 {
        0.0
    } else {
        y.atan2(x).to_degrees()
    };
    Ok((lat, lon))
}

/// Centre of the enclosing cell of a global grid with `cell_km` rows; columns
/// per row are chosen so cells stay roughly square at the row centre.
pub fn snap_to_grid(lat_deg: f64, lon_deg: f64, cell_km: f64) -> (f64, f64) {
    let dlat = cell_km / KM_PER_DEG_LAT;
    let rows = (180.0 / dlat).ceil() as usize;
    let row = (((lat_deg + 90.0) / dlat).floor().max(0.0) as usize).min(rows - 1);
    let lo = -90.0 + row as f64 * dlat;
    let hi = (lo + dlat).min(90.0);
    let lat_c = 0.5 * (lo + hi);
    let cols = ((360.0 * lat_c.to_radians().cos() / dlat).round() as usize).max(1);
    let dlon = 360.0 / cols as f64;
    let col = (((lon_deg + 180.0) / dlon).floor().max(0.0) as usize).min(cols - 1);
    (lat_c, -180.0 + (col as f64 + 0.5) * dlon)
}

pub fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_year(year: i32) -> u32 {
    if is_leap(year) {
        366
    } else {
        365
    }
}

/// Calendar date as (year, 1-based day of year).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DateStamp {
    pub year: i32,
    pub day_of_year: u32,
}

const MONTH_DAYS: [u32; 12] = [31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31];

impl DateStamp {
    pub fn new(year: i32, day_of_year: u32) -> Result<Self> {
        if day_of_year == 0 || day_of_year > days_in_year(year) {
            return Err(Error::OutOfRange(format!(
                "day {day_of_year} of year {year}"
            )));
        }
        Ok(DateStamp { year, day_of_year })
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::OutOfRange(format!("month {month}")));
        }
        let len = |m: usize| MONTH_DAYS[m] + u32::from(m == 1 && is_leap(year));
        if day == 0 || day > len(month as usize - 1) {
            return Err(Error::OutOfRange(format!("{year}-{month:02}-{day:02}")));
        }
        let before: u32 = (0..month as usize - 1).map(len).sum();
        Self::new(year, before + day)
    }

    pub fn to_ymd(self) -> (i32, u32, u32) {
        let mut left = self.day_of_year;
        for m in 0..12 {
            let len = MONTH_DAYS[m] + u32::from(m == 1 && is_leap(self.year));
            if left <= len {
                return (self.year, m as u32 + 1, left);
            }
            left -= len;
        }
        unreachable!("day_of_year validated on construction")
    }

    /// Days since 1970-01-01 (proleptic Gregorian).
    pub fn ordinal(self) -> i64 {
        let (y, m, d) = self.to_ymd();
        days_from_civil(y as i64, m as i64, d as i64)
    }

    pub fn from_ordinal(days: i64) -> Self {
        let (y, m, d) = civil_from_days(days);
        DateStamp::from_ymd(y as i32, m as u32, d as u32).expect("valid civil date")
    }
}

// Howard Hinnant's days_from_civil / civil_from_days.
fn days_from_civil(y: i64, m: i64, d: i64) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let mp = (m + 9) % 12;
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

fn civil_from_days(z: i64) -> (i64, i64, i64) {
    let z = z + 719468;
    let era = z.div_euclid(146097);
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

/// Seasonal phase on the unit circle plus a normalized year.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeVec {
    pub s: f64,
    pub c: f64,
    pub y: f64,
}

impl TimeVec {
    pub fn to_array(self) -> [f64; 3] {
        [self.s, self.c, self.y]
    }
}

/// Phase in radians of a day of year, `2π (doy − 1) / days_in_year`.
pub fn day_phase(d: DateStamp) -> f64 {
    std::f64::consts::TAU * f64::from(d.day_of_year - 1) / f64::from(days_in_year(d.year))
}

pub fn encode_timestamp(d: DateStamp, year_min: i32, year_max: i32) -> Result<TimeVec> {
    if year_min >= year_max {
        return Err(Error::Config(format!(
            "year bounds {year_min}..{year_max} are empty"
        )));
    }
    if d.year < year_min || d.year > year_max {
        return Err(Error::OutOfRange(format!(
            "year {} outside [{year_min}, {year_max}]",
            d.year
        )));
    }
    let phase = day_phase(d);
    Ok(TimeVec {
        s: phase.sin(),
        c: phase.cos(),
        y: f64::from(d.year - year_min) / f64::from(year_max - year_min),
    })
}

/// Floor midpoint of two dates, in whole days.
pub fn midpoint_timestamp(a: DateStamp, b: DateStamp) -> Result<DateStamp> {
    let (oa, ob) = (a.ordinal(), b.ordinal());
    if oa > ob {
        return Err(Error::OutOfRange(format!("{a:?} is after {b:?}")));
    }
    Ok(DateStamp::from_ordinal((oa + ob).div_euclid(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Datelike, NaiveDate};
    use proptest::prelude::*;

    fn close(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
        (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12
    }

    #[test]
    fn latlon_examples() {
        let v = encode_latlon(0.0, 0.0).unwrap();
        assert!(close((v.x, v.y, v.z), (1.0, 0.0, 0.0)));
        let v = encode_latlon(90.0, 123.0).unwrap();
        assert!(close((v.x, v.y, v.z), (0.0, 0.0, 1.0)));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let v = encode_latlon(45.0, 90.0).unwrap();
        assert!(close((v.x, v.y, v.z), (0.0, h, h)));
        assert!(encode_latlon(90.5, 0.0).is_err());
        assert!(encode_latlon(0.0, -181.0).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode_latlon(GeoVec {
                x: 0.0,
                y: 0.0,
                z: 1.0
            })
            .unwrap(),
            (90.0, 0.0)
        );
        assert_eq!(
            decode_latlon(GeoVec {
                x: 2.0,
                y: 0.0,
                z: 0.0
            })
            .unwrap(),
            (0.0, 0.0)
        );
        let (lat, lon) = decode_latlon(encode_latlon(12.5, -33.25).unwrap()).unwrap();
        assert!((lat - 12.5).abs() < 1e-9 && (lon + 33.25).abs() < 1e-9);
        assert!(decode_latlon(GeoVec {
            x: 0.0,
            y: 0.0,
            z: 0.0
        })
        .is_err());
    }

    #[test]
    fn snapping() {
        let c = snap_to_grid(47.3, 8.5, 10.0);
        assert_eq!(snap_to_grid(c.0, c.1, 10.0), c);
        // nearby point in the same cell
        let d = snap_to_grid(c.0 + 0.01, c.1 - 0.01, 10.0);
        assert_eq!(c, d);
        assert!((c.0 - 47.3).abs() <= 0.5 * 10.0 / KM_PER_DEG_LAT + 1e-12);
        for &(lat, lon) in &[(90.0, 180.0), (-90.0, -180.0), (89.99, 3.0)] {
            let s = snap_to_grid(lat, lon, 10.0);
            assert!(s.0.abs() <= 90.0 && s.1.abs() <= 180.0);
            assert_eq!(snap_to_grid(s.0, s.1, 10.0), s);
        }
    }

    #[test]
    fn timestamp_examples() {
        let jan1 = DateStamp::new(2020, 1).unwrap();
        let t = encode_timestamp(jan1, 2020, 2024).unwrap();
        assert_eq!((t.s, t.c, t.y), (0.0, 1.0, 0.0));
        // day 92 of a 365-day year, oracle value sin(2π·91/365) evaluated in mpmath
        let t = encode_timestamp(DateStamp::new(2021, 92).unwrap(), 2020, 2024).unwrap();
        assert!((t.s - 0.999_990_739_736_190_1).abs() < 1e-12, "{}", t.s);
        assert!((t.y - 0.25).abs() < 1e-15);
        assert!(encode_timestamp(jan1, 2021, 2024).is_err());
        assert!(encode_timestamp(jan1, 2024, 2024).is_err());
        assert!(DateStamp::new(2021, 366).is_err());
        assert!(DateStamp::new(2020, 366).is_ok());
    }

    #[test]
    fn phase_wraps_continuously() {
        for year in [2019, 2020] {
            let last = DateStamp::new(year, days_in_year(year)).unwrap();
            let p = day_phase(last);
            assert!(p < std::f64::consts::TAU);
            let step = std::f64::consts::TAU / f64::from(days_in_year(year));
            assert!((std::f64::consts::TAU - p - step).abs() < 1e-12);
        }
    }

    #[test]
    fn midpoints() {
        let d = DateStamp::from_ymd(2020, 5, 17).unwrap();
        assert_eq!(midpoint_timestamp(d, d).unwrap(), d);
        let a = DateStamp::from_ymd(2020, 1, 1).unwrap();
        let b = DateStamp::from_ymd(2020, 1, 3).unwrap();
        assert_eq!(
            midpoint_timestamp(a, b).unwrap(),
            DateStamp::from_ymd(2020, 1, 2).unwrap()
        );
        let a = DateStamp::from_ymd(2020, 12, 31).unwrap();
        let b = DateStamp::from_ymd(2021, 1, 2).unwrap();
        assert_eq!(midpoint_timestamp(a, b).unwrap().to_ymd(), (2021, 1, 1));
        assert!(midpoint_timestamp(b, a).is_err());
    }

    proptest! {
        #[test]
        fn encoded_latlon_is_unit(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0) {
            let v = encode_latlon(lat, lon).unwrap();
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn latlon_round_trip(lat in -89.999f64..=89.999, lon in -179.999f64..=179.999) {
            let (a, b) = decode_latlon(encode_latlon(lat, lon).unwrap()).unwrap();
            prop_assert!((a - lat).abs() < 1e-9 && (b - lon).abs() < 1e-9);
        }

        #[test]
        fn time_vec_on_circle(year in 1990i32..2030, doy in 1u32..=366) {
            prop_assume!(doy <= days_in_year(year));
            let t = encode_timestamp(DateStamp::new(year, doy).unwrap(), 1990, 2030).unwrap();
            prop_assert!((t.s * t.s + t.c * t.c - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&t.y));
        }

        #[test]
        fn calendar_matches_chrono(days in -100_000i64..100_000, span in 0i64..2000) {
            let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
            let a = epoch + chrono::Duration::days(days);
            let b = a + chrono::Duration::days(span);
            let da = DateStamp::from_ordinal(days);
            prop_assert_eq!(da.to_ymd(), (a.year(), a.month(), a.day()));
            prop_assert_eq!(da.day_of_year, a.ordinal());
            let db = DateStamp::new(b.year(), b.ordinal()).unwrap();
            let mid = a + chrono::Duration::days(span / 2);
            prop_assert_eq!(midpoint_timestamp(da, db).unwrap(), DateStamp::new(mid.year(), mid.ordinal()).unwrap());
        }
    }
}
