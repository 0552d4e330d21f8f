//! CSV and JSON artifacts. Floats are written with 12 significant digits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dynamics::{NominalTrajectory, State, SystemModel};
use crate::large_deviations::ExitEstimate;
use crate::lqr::TrackingPolicy;
use crate::simulator::SweepResult;

const SIG_DIGITS: i32 = 12;

/// `%.12g`: fixed notation for moderate exponents, scientific otherwise,
/// trailing zeros removed.
pub fn fmt_g(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", (SIG_DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..SIG_DIGITS).contains(&exp) {
        let fixed = format!("{:.*}", (SIG_DIGITS - 1 - exp) as usize, x);
        trim_fraction(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_fraction(mantissa), exp.abs())
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn row(cells: impl IntoIterator<Item = String>) -> String {
    let mut line = cells.into_iter().collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

/// `t,<state labels>,<control labels>`; the terminal row has empty controls.
pub fn trajectory_csv(model: &dyn SystemModel, nominal: &NominalTrajectory) -> String {
    trajectory_rows(model, &nominal.states, &nominal.controls)
}

pub fn trajectory_rows(model: &dyn SystemModel, states: &[State], controls: &[State]) -> String {
    let mut out = row(std::iter::once("t".to_string())
        .chain(model.state_labels().iter().map(|s| s.to_string()))
        .chain(model.control_labels().iter().map(|s| s.to_string())));
    for (t, x) in states.iter().enumerate() {
        let u: Vec<String> = match controls.get(t) {
            Some(u) => u.iter().map(|&v| fmt_g(v)).collect(),
            None => vec![String::new(); model.control_dim()],
        };
        out.push_str(&row(std::iter::once(t.to_string())
            .chain(x.iter().map(|&v| fmt_g(v)))
            .chain(u)));
    }
    out
}

/// One row per step: `L_t` then `P_t`, both flattened row-major. The final
/// row carries only `P_K`.
pub fn gains_csv(policy: &TrackingPolicy) -> String {
    let (nu, nx) = policy.gains[0].shape();
    let mut header = vec!["t".to_string()];
    for i in 0..nu {
        for j in 0..nx {
            header.push(format!("L_{i}_{j}"));
        }
    }
    for i in 0..nx {
        for j in 0..nx {
            header.push(format!("P_{i}_{j}"));
        }
    }
    let mut out = row(header);
    for (t, p) in policy.riccati.iter().enumerate() {
        let mut cells = vec![t.to_string()];
        match policy.gains.get(t) {
            Some(l) => {
                for i in 0..nu {
                    for j in 0..nx {
                        cells.push(fmt_g(l[(i, j)]));
                    }
                }
            }
            None => cells.extend(std::iter::repeat_n(String::new(), nu * nx)),
        }
        for i in 0..nx {
            for j in 0..nx {
                cells.push(fmt_g(p[(i, j)]));
            }
        }
        out.push_str(&row(cells));
    }
    out
}

pub const SWEEP_HEADER: &str = "epsilon,avg_nmse_closed_pct,avg_nmse_open_pct,sd_closed,sd_open,n_runs";

pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_g(r.epsilon),
            fmt_g(r.avg_nmse_closed),
            fmt_g(r.avg_nmse_open),
            fmt_g(r.sd_closed),
            fmt_g(r.sd_open),
            r.n_runs
        );
    }
    out
}

pub const EXIT_HEADER: &str = "epsilon,delta,n_runs,n_exits,p_hat,wilson_lo,wilson_hi";

pub fn exit_csv(estimates: &[ExitEstimate]) -> String {
    let mut out = String::from(EXIT_HEADER);
    out.push('\n');
    for e in estimates {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_g(e.epsilon),
            fmt_g(e.delta),
            e.n_runs,
            e.n_exits,
            fmt_g(e.p_hat),
            fmt_g(e.wilson_interval.0),
            fmt_g(e.wilson_interval.1)
        );
    }
    out
}

/// Provenance record written next to every set of artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub started_at: String,
    pub finished_at: String,
    /// How NMSE normalizes: Euclidean norm of the stacked trajectory, `x_0` included.
    pub nmse_norm: String,
    pub files: Vec<String>,
}

pub fn timestamp_now() -> String {
    humantime::format_rfc3339_seconds(std::time::SystemTime::now()).to_string()
}
