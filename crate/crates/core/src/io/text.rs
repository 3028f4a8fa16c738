use nalgebra::Vector3;

use super::ParseError;
use crate::eval::Trajectory;
use crate::factors::ImuSample;
use crate::geometry::Pose;

pub const IMU_CSV_HEADER: &str = "t,wx,wy,wz,ax,ay,az";

fn utf8(bytes: &[u8]) -> Result<&str, ParseError> {
    std::str::from_utf8(bytes).map_err(|e| ParseError::byte(e.valid_up_to(), "input is not valid UTF-8"))
}

fn numbers(toks: &[&str], line: usize) -> Result<Vec<f64>, ParseError> {
    toks.iter()
        .map(|t| {
            let v = t
                .trim()
                .parse::<f64>()
                .map_err(|_| ParseError::line(line, format!("invalid number '{}'", t.trim())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ParseError::line(line, format!("non-finite value '{}'", t.trim())))
            }
        })
        .collect()
}

/// Parses a TUM trajectory (`timestamp tx ty tz qx qy qz qw` per line;
/// blank lines and `#` comments skipped).
pub fn parse_tum(bytes: &[u8]) -> Result<Trajectory, ParseError> {
    let text = utf8(bytes)?;
    let mut entries: Vec<(f64, Pose)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(ParseError::line(ln, format!("expected 8 values, found {}", toks.len())));
        }
        let v = numbers(&toks, ln)?;
        let qn = (v[4] * v[4] + v[5] * v[5] + v[6] * v[6] + v[7] * v[7]).sqrt();
        if !(qn > 1e-9) {
            return Err(ParseError::line(ln, "quaternion has zero norm"));
        }
        if let Some((t_prev, _)) = entries.last() {
            if !(v[0] > *t_prev) {
                return Err(ParseError::line(ln, "timestamps must be strictly increasing"));
            }
        }
        entries.push((v[0], Pose::from_quaternion(Vector3::new(v[1], v[2], v[3]), v[4], v[5], v[6], v[7])));
    }
    Trajectory::new(entries).map_err(|e| ParseError::line(0, e.to_string()))
}

/// C-style `%.9g`: nine significant digits, trailing zeros removed.
pub fn format_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mant, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    let strip = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..9).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", strip(mant), sign, exp.abs())
    } else {
        let decimals = (8 - exp) as usize;
        strip(&format!("{x:.decimals$}"))
    }
}

pub fn format_tum_line(t: f64, pose: &Pose) -> String {
    let q = pose.quaternion();
    let p = pose.translation;
    let vals = [p.x, p.y, p.z, q[0], q[1], q[2], q[3]];
    let mut s = format!("{t:.9}");
    for v in vals {
        s.push(' ');
        s.push_str(&format_g9(v));
    }
    s
}

pub fn write_tum(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, p) in traj.entries() {
        out.push_str(&format_tum_line(*t, p));
        out.push('\n');
    }
    out
}

/// Parses IMU CSV with header `t,wx,wy,wz,ax,ay,az` (s, rad/s, m/s^2).
pub fn parse_imu_csv(bytes: &[u8]) -> Result<Vec<ImuSample>, ParseError> {
    let text = utf8(bytes)?;
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) => h.trim().trim_start_matches('\u{feff}').split(',').map(|s| s.trim().to_string()).collect(),
        None => return Err(ParseError::line(1, "empty file")),
    };
    if header.join(",") != IMU_CSV_HEADER {
        return Err(ParseError::line(1, format!("header must be '{IMU_CSV_HEADER}'")));
    }
    let mut out: Vec<ImuSample> = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split(',').collect();
        if toks.len() != 7 {
            return Err(ParseError::line(ln, format!("expected 7 columns, found {}", toks.len())));
        }
        let v = numbers(&toks, ln)?;
        if let Some(prev) = out.last() {
            if !(v[0] > prev.timestamp) {
                return Err(ParseError::line(ln, "timestamps must be strictly increasing"));
            }
        }
        out.push(ImuSample::new(v[0], Vector3::new(v[1], v[2], v[3]), Vector3::new(v[4], v[5], v[6])));
    }
    Ok(out)
}

pub fn write_imu_csv(samples: &[ImuSample]) -> String {
    let mut out = format!("{IMU_CSV_HEADER}\n");
    for s in samples {
        out.push_str(&format!(
            "{:.9},{},{},{},{},{},{}\n",
            s.timestamp, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        ));
    }
    out
}

/// One line of a scan index: timestamp and file name relative to the index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanEntry {
    pub timestamp: f64,
    pub file: String,
}

/// Parses `timestamp file` lines (blank lines and `#` comments skipped).
pub fn parse_scan_index(bytes: &[u8]) -> Result<Vec<ScanEntry>, ParseError> {
    let text = utf8(bytes)?;
    let mut out: Vec<ScanEntry> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.splitn(2, char::is_whitespace);
        let (Some(t), Some(file)) = (toks.next(), toks.next()) else {
            return Err(ParseError::line(ln, "expected 'timestamp file'"));
        };
        let t = numbers(&[t], ln)?[0];
        let file = file.trim();
        if file.is_empty() || file.contains("..") || file.starts_with('/') {
            return Err(ParseError::line(ln, "scan file must be a relative path inside the scan directory"));
        }
        if let Some(prev) = out.last() {
            if !(t > prev.timestamp) {
                return Err(ParseError::line(ln, "timestamps must be strictly increasing"));
            }
        }
        out.push(ScanEntry { timestamp: t, file: file.to_string() });
    }
    Ok(out)
}

pub fn write_scan_index(entries: &[ScanEntry]) -> String {
    entries.iter().map(|e| format!("{:.9} {}\n", e.timestamp, e.file)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{exp_map, Twist};
    use crate::io::Location;

    #[test]
    fn g9_matches_printf() {
        let cases = [
            (0.0, "0"),
            (-0.0, "0"),
            (1.0, "1"),
            (0.1, "0.1"),
            (123456789.0, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (0.0001, "0.0001"),
            (0.00001234, "1.234e-05"),
            (-2.5, "-2.5"),
            (1.0 / 3.0, "0.333333333"),
            (2.0 / 3.0, "0.666666667"),
            (999999999.5, "1e+09"),
            (0.70710678118654757, "0.707106781"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g9(x), want, "{x}");
        }
    }

    #[test]
    fn identity_line() {
        assert_eq!(format_tum_line(0.0, &Pose::identity()), "0.000000000 0 0 0 0 0 0 1");
    }

    #[test]
    fn tum_round_trip() {
        let entries: Vec<(f64, Pose)> = (0..20)
            .map(|i| {
                let x = i as f64;
                let t = Vector3::new(0.45 * x - 4.0, 2.0, -1.0);
                (1.6e9 + 0.1 * x, exp_map(&Twist::new(Vector3::new(0.1 * x, -0.05, 0.3), t)))
            })
            .collect();
        let t = Trajectory::new(entries).unwrap();
        let back = parse_tum(write_tum(&t).as_bytes()).unwrap();
        for ((ta, a), (tb, b)) in t.entries().iter().zip(back.entries()) {
            assert!((ta - tb).abs() < 1e-6);
            assert!(a.approx_eq(b, 1e-8));
        }
    }

    #[test]
    fn nine_digits_bound_large_coordinates_relatively() {
        let p = Pose::from_translation(Vector3::new(123.456789123, -4567.12345678, 0.5));
        let t = Trajectory::new(vec![(0.0, p)]).unwrap();
        let back = parse_tum(write_tum(&t).as_bytes()).unwrap();
        let q = back.entries()[0].1.translation;
        for i in 0..3 {
            assert!((q[i] - p.translation[i]).abs() <= 5e-9 * p.translation[i].abs().max(1.0));
        }
    }

    #[test]
    fn tum_errors() {
        let e = parse_tum(b"# c\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 0\n").unwrap_err();
        assert_eq!(e.location, Location::Line(3));
        assert!(parse_tum(b"0 0 0 0 0 0 0 0\n").is_err());
        assert!(parse_tum(b"1 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n").is_err());
    }

    #[test]
    fn imu_round_trip_and_errors() {
        let s = vec![
            ImuSample::new(0.0, Vector3::new(0.1, 0.2, 0.3), Vector3::new(0.0, 0.0, 9.81)),
            ImuSample::new(0.005, Vector3::zeros(), Vector3::new(1.0, -1.0, 9.7)),
        ];
        assert_eq!(parse_imu_csv(write_imu_csv(&s).as_bytes()).unwrap(), s);
        assert!(parse_imu_csv(b"time,wx,wy,wz,ax,ay,az\n").is_err());
        let e = parse_imu_csv(b"t,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,0\n0.1,0,0\n").unwrap_err();
        assert_eq!(e.location, Location::Line(3));
    }

    #[test]
    fn scan_index() {
        let e = vec![ScanEntry { timestamp: 0.1, file: "000000.pcd".into() }];
        assert_eq!(parse_scan_index(write_scan_index(&e).as_bytes()).unwrap(), e);
        assert!(parse_scan_index(b"0.1 ../etc/passwd\n").is_err());
    }
}
