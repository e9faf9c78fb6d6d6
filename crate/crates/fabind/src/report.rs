//! Prediction output format: the predicted pose in the same row layout as
//! the complex file's truth section, per-residue pocket probabilities, and
//! a key=value report block.

use crate::complex::{quantize6, ComplexError};
use crate::geom::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct PoseReport {
    /// Predicted ligand pose; empty for pocket-only runs.
    pub pose: Vec<Vec3>,
    pub pocket_center: Vec3,
    /// Per-residue pocket probability.
    pub pocket_probs: Vec<f64>,
    /// Extra key=value diagnostics (iterations, losses, ...).
    pub extras: Vec<(String, f64)>,
}

fn fmt(v: f64) -> String {
    format!("{:.6}", v)
}

pub fn render_pose(r: &PoseReport) -> String {
    use std::fmt::Write;
    let mut s = String::from("# fabind prediction\n");
    if !r.pose.is_empty() {
        s.push_str("LIGAND_POSE\n");
        for (i, c) in r.pose.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{}", fmt(c[0]), fmt(c[1]), fmt(c[2]));
        }
    }
    s.push_str("POCKET_PROBS\n");
    for (i, p) in r.pocket_probs.iter().enumerate() {
        let _ = writeln!(s, "{i},{}", fmt(*p));
    }
    s.push_str("REPORT\n");
    let _ = writeln!(
        s,
        "pocket_center={},{},{}",
        fmt(r.pocket_center[0]),
        fmt(r.pocket_center[1]),
        fmt(r.pocket_center[2])
    );
    for (k, v) in &r.extras {
        let _ = writeln!(s, "{k}={v}");
    }
    s
}

pub fn parse_pose(text: &str) -> Result<PoseReport, ComplexError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Pose,
        Probs,
        Report,
    }
    let err = |line: usize, msg: &str| ComplexError::Parse {
        line,
        msg: msg.to_string(),
    };
    let mut section = Section::None;
    let mut pose = Vec::new();
    let mut probs = Vec::new();
    let mut center: Option<Vec3> = None;
    let mut extras = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let ln = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "LIGAND_POSE" => {
                section = Section::Pose;
                continue;
            }
            "POCKET_PROBS" => {
                section = Section::Probs;
                continue;
            }
            "REPORT" => {
                section = Section::Report;
                continue;
            }
            _ => {}
        }
        match section {
            Section::None => return Err(err(ln, "content before any section header")),
            Section::Pose => {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 4 {
                    return Err(err(ln, "pose rows need index,x,y,z"));
                }
                let idx: usize = f[0].parse().map_err(|_| err(ln, "bad pose index"))?;
                if idx != pose.len() {
                    return Err(err(ln, "pose rows out of order"));
                }
                let mut c = [0.0; 3];
                for k in 0..3 {
                    c[k] = f[k + 1].parse().map_err(|_| err(ln, "bad pose coordinate"))?;
                }
                pose.push(c);
            }
            Section::Probs => {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() != 2 {
                    return Err(err(ln, "probability rows need index,p"));
                }
                let p: f64 = f[1].parse().map_err(|_| err(ln, "bad probability"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(err(ln, "probability outside [0, 1]"));
                }
                probs.push(p);
            }
            Section::Report => {
                let (k, v) = line.split_once('=').ok_or_else(|| err(ln, "report rows need key=value"))?;
                if k == "pocket_center" {
                    let f: Vec<&str> = v.split(',').collect();
                    if f.len() != 3 {
                        return Err(err(ln, "pocket_center needs x,y,z"));
                    }
                    let mut c = [0.0; 3];
                    for i in 0..3 {
                        c[i] = f[i].parse().map_err(|_| err(ln, "bad pocket_center value"))?;
                    }
                    center = Some(c);
                } else {
                    let num: f64 = v.parse().map_err(|_| err(ln, "bad report value"))?;
                    extras.push((k.to_string(), num));
                }
            }
        }
    }
    Ok(PoseReport {
        pose,
        pocket_probs: probs,
        pocket_center: center.ok_or_else(|| err(0, "missing pocket_center in REPORT"))?,
        extras,
    })
}

/// Quantize a report the same way the renderer will print it, so that
/// render -> parse is the identity on the quantized value.
pub fn quantized(r: &PoseReport) -> PoseReport {
    PoseReport {
        pose: r.pose.iter().map(|c| [quantize6(c[0]), quantize6(c[1]), quantize6(c[2])]).collect(),
        pocket_center: [
            quantize6(r.pocket_center[0]),
            quantize6(r.pocket_center[1]),
            quantize6(r.pocket_center[2]),
        ],
        pocket_probs: r.pocket_probs.iter().map(|&p| quantize6(p)).collect(),
        extras: r.extras.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_round_trips() {
        let r = quantized(&PoseReport {
            pose: vec![[1.234567, -0.5, 3.0], [0.0, 2.25, -1.125]],
            pocket_center: [10.5, -2.0, 0.125],
            pocket_probs: vec![0.25, 0.75, 0.5],
            extras: vec![("iterations".into(), 8.0)],
        });
        let text = render_pose(&r);
        let back = parse_pose(&text).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn pocket_only_report_has_no_pose() {
        let r = PoseReport {
            pose: vec![],
            pocket_center: [1.0, 2.0, 3.0],
            pocket_probs: vec![0.5],
            extras: vec![],
        };
        let back = parse_pose(&render_pose(&r)).unwrap();
        assert!(back.pose.is_empty());
        assert_eq!(back.pocket_center, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn malformed_reports_are_rejected() {
        assert!(parse_pose("LIGAND_POSE\n0,1,2\n").is_err());
        assert!(parse_pose("stray\n").is_err());
        assert!(parse_pose("POCKET_PROBS\n0,1.5\n").is_err());
        assert!(parse_pose("REPORT\nfoo=1\n").is_err(), "missing pocket_center");
    }
}
