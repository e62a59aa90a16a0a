//! KITTI `calib_cam_to_cam` parsing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraRig;

/// Image size assumed when the file carries no `S_rect_*` entry (KITTI raw resolution).
pub const KITTI_DEFAULT_SIZE: (usize, usize) = (375, 1242);

/// Which calibration keys feed the left projection, the right projection and the rectification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibKeys {
    pub left: String,
    pub right: String,
    pub rect: String,
    /// Optional `width height` entry giving the rectified image size.
    pub size: String,
}

impl Default for CalibKeys {
    fn default() -> Self {
        Self { left: "P_rect_02".into(), right: "P_rect_03".into(), rect: "R_rect_00".into(), size: "S_rect_02".into() }
    }
}

struct Entry {
    line: usize,
    values: Vec<f64>,
}

fn parse_entries(text: &str, source: &str, wanted: &[&str]) -> Result<HashMap<String, Entry>> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let Some((key, rest)) = raw.split_once(':') else { continue };
        let key = key.trim();
        // unrelated keys (calib_time, S_00, K_00, ...) may hold anything
        if !wanted.contains(&key) {
            continue;
        }
        let values = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    path: source.to_string(),
                    line,
                    msg: format!("{key}: '{t}' is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(key.to_string(), Entry { line, values });
    }
    Ok(out)
}

fn take<const N: usize>(entries: &HashMap<String, Entry>, key: &str, source: &str) -> Result<[f64; N]> {
    let e = entries.get(key).ok_or_else(|| Error::Parse { path: source.to_string(), line: 0, msg: format!("missing key {key}") })?;
    e.values.as_slice().try_into().map_err(|_| Error::Parse {
        path: source.to_string(),
        line: e.line,
        msg: format!("{key} has {} values, expected {N}", e.values.len()),
    })
}

fn rows34(v: [f64; 12]) -> [[f64; 4]; 3] {
    [[v[0], v[1], v[2], v[3]], [v[4], v[5], v[6], v[7]], [v[8], v[9], v[10], v[11]]]
}

/// Parses calibration text with the default KITTI key mapping.
pub fn parse_kitti_calibration(text: &str) -> Result<CameraRig> {
    parse_kitti_calibration_with(text, "<calibration>", &CalibKeys::default())
}

pub fn parse_kitti_calibration_with(text: &str, source: &str, keys: &CalibKeys) -> Result<CameraRig> {
    let entries = parse_entries(text, source, &[&keys.left, &keys.right, &keys.rect, &keys.size])?;
    let left = rows34(take::<12>(&entries, &keys.left, source)?);
    let right = rows34(take::<12>(&entries, &keys.right, source)?);
    let r = take::<9>(&entries, &keys.rect, source)?;
    let rect = [[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]];
    let size = if entries.contains_key(&keys.size) {
        let [w, h] = take::<2>(&entries, &keys.size, source)?;
        (h.round() as usize, w.round() as usize)
    } else {
        KITTI_DEFAULT_SIZE
    };
    CameraRig::new(left, right, rect, size).map_err(|e| e.context(source.to_string()))
}

pub fn load_kitti_calibration(path: &Path, keys: &CalibKeys) -> Result<CameraRig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_calibration_with(&text, &path.display().to_string(), keys)
}

/// Writes the consumed fields back in calibration-file form.
pub fn serialize_kitti_calibration(rig: &CameraRig, keys: &CalibKeys) -> String {
    let mut s = String::new();
    let row = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| format!("{v:e}")).collect::<Vec<_>>().join(" ");
    let _ = writeln!(s, "{}: {}", keys.left, row(&mut rig.proj_left.iter().flatten().copied()));
    let _ = writeln!(s, "{}: {}", keys.right, row(&mut rig.proj_right.iter().flatten().copied()));
    let _ = writeln!(s, "{}: {}", keys.rect, row(&mut rig.rect_rotation[..3].iter().flat_map(|r| r[..3].iter().copied())));
    let _ = writeln!(s, "{}: {:e} {:e}", keys.size, rig.image_size.1 as f64, rig.image_size.0 as f64);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "calib_time: 09-Jan-2012 13:57:47\n\
        S_00: 1.392000e+03 5.120000e+02\n\
        P_rect_02: 720 0 620 0 0 720 187 0 0 0 1 0\n\
        P_rect_03: 720 0 620 -388.8 0 720 187 0 0 0 1 0\n\
        R_rect_00: 1 0 0 0 1 0 0 0 1\n";

    #[test]
    fn minimal_file() {
        let rig = parse_kitti_calibration(MINIMAL).unwrap();
        assert_eq!(rig.focal_px, 720.0);
        assert!((rig.baseline_m - 0.54).abs() < 1e-12);
        assert_eq!(rig.image_size, KITTI_DEFAULT_SIZE);
    }

    #[test]
    fn wrong_arity_names_line() {
        let bad = MINIMAL.replace("R_rect_00: 1 0 0 0 1 0 0 0 1", "R_rect_00: 1 0 0 0 1 0 0 0");
        match parse_kitti_calibration(&bad) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("8 values"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_token_and_missing_key() {
        let bad = MINIMAL.replace("-388.8", "-38x");
        assert!(matches!(parse_kitti_calibration(&bad), Err(Error::Parse { line: 4, .. })));
        let missing = MINIMAL.replace("P_rect_03", "P_rect_01");
        let err = parse_kitti_calibration(&missing).unwrap_err();
        assert!(err.to_string().contains("P_rect_03"));
    }

    #[test]
    fn round_trip() {
        let rig = parse_kitti_calibration(MINIMAL).unwrap();
        let text = serialize_kitti_calibration(&rig, &CalibKeys::default());
        assert_eq!(parse_kitti_calibration(&text).unwrap(), rig);
    }
}
