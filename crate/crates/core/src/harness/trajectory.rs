//! Channel-parameter trajectories over P/E cycling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel_model::ChannelParams;
use crate::error::{Error, Result};

/// Channel parameters in effect after `pe_cycles` program/erase cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub pe_cycles: u32,
    #[serde(flatten)]
    pub params: ChannelParams,
}

/// On-disk form; every field is required and nothing else is allowed.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPoint {
    pe_cycles: u32,
    lambda: f64,
    sigma_p: f64,
    sigma_e: f64,
    gamma_sigma_r: f64,
    gamma_mu_r: f64,
}

/// A parsed trajectory plus non-fatal validation findings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTrajectory {
    pub points: Vec<TrajectoryPoint>,
    pub warnings: Vec<String>,
}

/// Reads a JSON trajectory file; warnings are logged.
pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryPoint>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let loaded = parse_trajectory(&text, &path.display().to_string())?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded.points)
}

/// Parses a JSON array of `{pe_cycles, lambda, sigma_p, sigma_e,
/// gamma_sigma_r, gamma_mu_r}` objects.
///
/// Points are sorted by `pe_cycles`; exact duplicates collapse, conflicting
/// duplicates are an error.
pub fn parse_trajectory(text: &str, source_name: &str) -> Result<LoadedTrajectory> {
    let parse_err = |detail: String| Error::Parse {
        source_name: source_name.to_string(),
        detail,
    };
    if text.trim().is_empty() {
        return Err(parse_err("file is empty".into()));
    }
    let raw: Vec<RawPoint> = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    if raw.is_empty() {
        return Err(parse_err("trajectory has no points".into()));
    }

    let mut points = Vec::with_capacity(raw.len());
    let mut warnings = Vec::new();
    for (i, r) in raw.into_iter().enumerate() {
        let params = ChannelParams::new(r.lambda, r.sigma_p, r.sigma_e, r.gamma_sigma_r, r.gamma_mu_r);
        params
            .validate()
            .map_err(|e| parse_err(format!("entry {i} (pe_cycles {}): {e}", r.pe_cycles)))?;
        for w in params.warnings() {
            warnings.push(format!("{source_name}: entry {i} (pe_cycles {}): {w}", r.pe_cycles));
        }
        points.push(TrajectoryPoint {
            pe_cycles: r.pe_cycles,
            params,
        });
    }

    points.sort_by_key(|p| p.pe_cycles);
    let mut out: Vec<TrajectoryPoint> = Vec::with_capacity(points.len());
    for p in points {
        match out.last() {
            Some(prev) if prev.pe_cycles == p.pe_cycles => {
                if prev.params != p.params {
                    return Err(parse_err(format!(
                        "pe_cycles {} appears twice with different parameters",
                        p.pe_cycles
                    )));
                }
            }
            _ => out.push(p),
        }
    }
    Ok(LoadedTrajectory { points: out, warnings })
}

/// P/E count at which the synthetic trajectory equals [`anchor_params`].
pub const ANCHOR_PE: u32 = 3000;

/// Offset that keeps the fresh-block (0 P/E) wear terms nonzero.
const SYNTHETIC_PE_OFFSET: f64 = 300.0;
const SYNTHETIC_LAMBDA_EXPONENT: f64 = 0.62;
const SYNTHETIC_RETENTION_EXPONENT: f64 = 0.5;

/// Reference channel condition: 3000 P/E cycles, one year of retention.
pub fn anchor_params() -> ChannelParams {
    ChannelParams::new(0.0099, 0.05, 0.35, 0.0617, -0.5882)
}

/// Standard solver starting point.
pub fn default_init() -> ChannelParams {
    ChannelParams::new(0.007, 0.1, 0.4, 0.04, -0.4)
}

/// Synthetic degradation trajectory: 14 points at 0, 300, ..., 3900 P/E.
///
/// With `r = (pe + 300) / 3300` the wear scale grows as `r^0.62` and both
/// retention coefficients as `r^0.5`; programming noise is fixed. At
/// [`ANCHOR_PE`] every parameter equals [`anchor_params`]. This is a smooth
/// stand-in for a measured degradation model, not measured data.
pub fn synthetic_trajectory() -> Vec<TrajectoryPoint> {
    let a = anchor_params();
    (0..14)
        .map(|i| {
            let pe_cycles = 300 * i;
            let r = (pe_cycles as f64 + SYNTHETIC_PE_OFFSET) / (ANCHOR_PE as f64 + SYNTHETIC_PE_OFFSET);
            let w = r.powf(SYNTHETIC_LAMBDA_EXPONENT);
            let s = r.powf(SYNTHETIC_RETENTION_EXPONENT);
            TrajectoryPoint {
                pe_cycles,
                params: ChannelParams::new(
                    a.lambda * w,
                    a.sigma_p,
                    a.sigma_e,
                    a.gamma_sigma_r * s,
                    a.gamma_mu_r * s,
                ),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shape() {
        let t = synthetic_trajectory();
        assert_eq!(t.len(), 14);
        assert_eq!(t[0].pe_cycles, 0);
        assert_eq!(t[13].pe_cycles, 3900);
        let anchor = t.iter().find(|p| p.pe_cycles == ANCHOR_PE).unwrap();
        assert_eq!(anchor.params, anchor_params());
        for w in t.windows(2) {
            assert!(w[1].params.lambda > w[0].params.lambda);
            assert!(w[1].params.gamma_mu_r.abs() > w[0].params.gamma_mu_r.abs());
            assert!(w[1].params.gamma_sigma_r > w[0].params.gamma_sigma_r);
        }
        for p in &t {
            p.params.validate().unwrap();
            assert!(p.params.warnings().is_empty());
        }
    }

    #[test]
    fn single_point_file() {
        let text = r#"[{"pe_cycles": 3000, "lambda": 0.0099, "sigma_p": 0.05, "sigma_e": 0.35,
                        "gamma_sigma_r": 0.0617, "gamma_mu_r": -0.5882}]"#;
        let t = parse_trajectory(text, "one.json").unwrap();
        assert_eq!(t.points.len(), 1);
        assert_eq!(t.points[0].params, anchor_params());
        assert!(t.warnings.is_empty());
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(parse_trajectory("", "e.json").is_err());
        assert!(parse_trajectory("  \n", "e.json").is_err());
        assert!(parse_trajectory("[]", "e.json").is_err());
    }

    #[test]
    fn schema_errors_name_the_field_and_line() {
        let text = "[\n{\"pe_cycles\": 0, \"lambda\": 0.01, \"sigma_p\": 0.05,\n \"sigma_e\": 0.3, \"gamma_sigma_r\": 0.01}\n]";
        let msg = parse_trajectory(text, "bad.json").unwrap_err().to_string();
        assert!(msg.contains("gamma_mu_r") && msg.contains("line"), "{msg}");
        assert!(msg.contains("bad.json"));

        let text = r#"[{"pe_cycles": 0, "lambda": 0.01, "sigma_p": 0.05, "sigma_e": 0.3,
                        "gamma_sigma_r": 0.01, "gamma_mu_r": -0.1, "colour": 3}]"#;
        let msg = parse_trajectory(text, "bad.json").unwrap_err().to_string();
        assert!(msg.contains("colour"), "{msg}");

        let text = r#"[{"pe_cycles": 0, "lambda": -0.01, "sigma_p": 0.05, "sigma_e": 0.3,
                        "gamma_sigma_r": 0.01, "gamma_mu_r": -0.1}]"#;
        let msg = parse_trajectory(text, "bad.json").unwrap_err().to_string();
        assert!(msg.contains("lambda"), "{msg}");
    }

    #[test]
    fn sorts_dedups_and_warns() {
        let p = |pe: u32, se: f64| {
            format!(
                r#"{{"pe_cycles": {pe}, "lambda": 0.01, "sigma_p": 0.05, "sigma_e": {se}, "gamma_sigma_r": 0.01, "gamma_mu_r": -0.1}}"#
            )
        };
        let text = format!("[{}, {}, {}]", p(600, 0.3), p(0, 0.04), p(600, 0.3));
        let t = parse_trajectory(&text, "t.json").unwrap();
        assert_eq!(t.points.iter().map(|p| p.pe_cycles).collect::<Vec<_>>(), vec![0, 600]);
        assert_eq!(t.warnings.len(), 1);
        assert!(t.warnings[0].contains("sigma_e"));

        let text = format!("[{}, {}]", p(600, 0.3), p(600, 0.31));
        assert!(parse_trajectory(&text, "t.json").is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let t = synthetic_trajectory();
        let text = serde_json::to_string(&t).unwrap();
        assert_eq!(parse_trajectory(&text, "rt").unwrap().points, t);
    }
}
