//! Per-run regret logs and their aggregation across seeds.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::table;

pub const LOG_HEADER: &str = "t,point_id,inst_regret,cum_regret,simple_regret,pending,censored,nu_t,info_gain";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: usize,
    pub point_id: usize,
    pub inst_regret: f64,
    pub cum_regret: f64,
    /// Measured on converted observations only.
    pub simple_regret: f64,
    /// Queries awaiting feedback when `x_t` was chosen.
    pub pending: usize,
    pub censored: usize,
    pub nu_t: f64,
    pub info_gain: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegretLog {
    pub rows: Vec<LogRow>,
    /// First iteration whose simple regret rests on a converted observation.
    /// Earlier rows report the upper bound `f(x*) - 0`.
    pub first_conversion: Option<usize>,
}

impl RegretLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.rows.len() + 1));
        out.push_str(LOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.t, r.point_id, r.inst_regret, r.cum_regret, r.simple_regret, r.pending, r.censored, r.nu_t, r.info_gain
            );
        }
        out
    }

    pub fn final_row(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

/// Reads a log written by [`RegretLog::to_csv`]. Iterations must run `1, 2, ...`.
/// The conversion flag is recovered as the first row whose simple regret drops
/// below the first row's value, which is exact whenever the first conversion
/// improves on the bound; otherwise it is left unset.
pub fn parse_log(text: &str) -> Result<RegretLog> {
    let mut records = table::records(text);
    let (hline, header) = records.next().ok_or_else(|| Error::parse(1, "empty log"))?;
    let cols: Vec<&str> = header.iter().map(|s| s.trim()).collect();
    if cols.join(",") != LOG_HEADER {
        return Err(Error::parse(hline, format!("expected header '{LOG_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (line, fields) in records {
        if fields.len() != 9 {
            return Err(Error::parse(line, format!("expected 9 fields, got {}", fields.len())));
        }
        let int = |i: usize| -> Result<usize> {
            fields[i]
                .trim()
                .parse::<usize>()
                .map_err(|_| Error::parse(line, format!("'{}' is not a nonnegative integer", fields[i].trim())))
        };
        let num = |i: usize| table::parse_f64(line, fields[i]);
        let row = LogRow {
            t: int(0)?,
            point_id: int(1)?,
            inst_regret: num(2)?,
            cum_regret: num(3)?,
            simple_regret: num(4)?,
            pending: int(5)?,
            censored: int(6)?,
            nu_t: num(7)?,
            info_gain: num(8)?,
        };
        if row.t != rows.len() + 1 {
            return Err(Error::parse(line, format!("expected t = {}, got {}", rows.len() + 1, row.t)));
        }
        rows.push(row);
    }
    let first_conversion = rows
        .first()
        .and_then(|r0| rows.iter().find(|r| r.simple_regret < r0.simple_regret).map(|r| r.t));
    Ok(RegretLog { rows, first_conversion })
}

/// Sample mean and standard error (`n - 1` denominator; `0` for one value).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub t: usize,
    pub simple_mean: f64,
    pub simple_stderr: f64,
    pub cum_mean: f64,
    pub cum_stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub curve: Vec<CurvePoint>,
}

impl MethodSummary {
    pub fn last(&self) -> &CurvePoint {
        self.curve.last().expect("summaries are nonempty")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub methods: Vec<MethodSummary>,
}

/// Per-iteration mean and standard error across seeds, per method.
pub fn summarize(groups: &[(String, Vec<RegretLog>)]) -> Result<Summary> {
    if groups.is_empty() || groups.iter().any(|(_, logs)| logs.is_empty()) {
        return Err(Error::invalid("summarize needs at least one log per method"));
    }
    let horizon = groups[0].1[0].len();
    if horizon == 0 {
        return Err(Error::invalid("empty log"));
    }
    let mut methods = Vec::with_capacity(groups.len());
    for (method, logs) in groups {
        if let Some(bad) = logs.iter().find(|l| l.len() != horizon) {
            return Err(Error::invalid(format!(
                "mismatched horizons: {method} has a log of length {} (expected {horizon})",
                bad.len()
            )));
        }
        let curve = (0..horizon)
            .map(|i| {
                let s: Vec<f64> = logs.iter().map(|l| l.rows[i].simple_regret).collect();
                let c: Vec<f64> = logs.iter().map(|l| l.rows[i].cum_regret).collect();
                let (simple_mean, simple_stderr) = mean_stderr(&s);
                let (cum_mean, cum_stderr) = mean_stderr(&c);
                CurvePoint {
                    t: i + 1,
                    simple_mean,
                    simple_stderr,
                    cum_mean,
                    cum_stderr,
                }
            })
            .collect();
        methods.push(MethodSummary {
            method: method.clone(),
            runs: logs.len(),
            curve,
        });
    }
    Ok(Summary { methods })
}

impl Summary {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,t,simple_mean,simple_stderr,cum_mean,cum_stderr\n");
        for m in &self.methods {
            for p in &m.curve {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    m.method, p.t, p.simple_mean, p.simple_stderr, p.cum_mean, p.cum_stderr
                );
            }
        }
        out
    }

    pub fn final_csv(&self) -> String {
        let mut out =
            String::from("method,runs,final_simple_mean,final_simple_stderr,final_cum_mean,final_cum_stderr\n");
        for m in &self.methods {
            let p = m.last();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                m.method, m.runs, p.simple_mean, p.simple_stderr, p.cum_mean, p.cum_stderr
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_from(simple: &[f64], cum: &[f64]) -> RegretLog {
        RegretLog {
            rows: simple
                .iter()
                .zip(cum)
                .enumerate()
                .map(|(i, (&s, &c))| LogRow {
                    t: i + 1,
                    point_id: i,
                    inst_regret: 0.0,
                    cum_regret: c,
                    simple_regret: s,
                    pending: 0,
                    censored: 0,
                    nu_t: 1.0,
                    info_gain: 0.0,
                })
                .collect(),
            first_conversion: None,
        }
    }

    #[test]
    fn single_and_identical_logs() {
        let a = log_from(&[0.9, 0.4], &[0.1, 0.3]);
        let s = summarize(&[("x".into(), vec![a.clone()])]).unwrap();
        assert_eq!(s.methods[0].curve[1].simple_mean, 0.4);
        assert_eq!(s.methods[0].curve[1].simple_stderr, 0.0);
        let s = summarize(&[("x".into(), vec![a.clone(), a])]).unwrap();
        assert_eq!(s.methods[0].curve[0].cum_stderr, 0.0);
        assert_eq!(s.methods[0].curve[0].cum_mean, 0.1);
    }

    #[test]
    fn mismatched_horizons_rejected() {
        let a = log_from(&[0.9, 0.4], &[0.1, 0.3]);
        let b = log_from(&[0.9], &[0.1]);
        assert!(summarize(&[("x".into(), vec![a.clone(), b.clone()])]).is_err());
        assert!(summarize(&[("x".into(), vec![a]), ("y".into(), vec![b])]).is_err());
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn random_logs_match_direct_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logs: Vec<RegretLog> = (0..10)
            .map(|_| {
                let s: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
                let c: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 10.0).collect();
                log_from(&s, &c)
            })
            .collect();
        let s = summarize(&[("m".into(), logs.clone())]).unwrap();
        for i in 0..5 {
            let xs: Vec<f64> = logs.iter().map(|l| l.rows[i].cum_regret).collect();
            let mut mean = 0.0;
            for x in &xs {
                mean += x;
            }
            mean /= 10.0;
            let mut ss = 0.0;
            for x in &xs {
                ss += (x - mean) * (x - mean);
            }
            let se = (ss / 9.0 / 10.0).sqrt();
            assert!((s.methods[0].curve[i].cum_mean - mean).abs() < 1e-12);
            assert!((s.methods[0].curve[i].cum_stderr - se).abs() < 1e-12);
        }
    }

    #[test]
    fn parse_rejects_bad_logs() {
        assert!(parse_log("").is_err());
        assert!(parse_log("t,point\n").is_err());
        let bad_t = format!("{LOG_HEADER}\n2,0,0,0,1,0,0,1,0\n");
        assert!(parse_log(&bad_t).is_err());
        let short = format!("{LOG_HEADER}\n1,0,0,0\n");
        assert!(parse_log(&short).is_err());
        let neg = format!("{LOG_HEADER}\n1,-1,0,0,1,0,0,1,0\n");
        assert!(parse_log(&neg).is_err());
    }

    proptest! {
        #[test]
        fn csv_roundtrip(vals in prop::collection::vec((0usize..1000, -1e3f64..1e3, 0usize..50), 1..30)) {
            let log = RegretLog {
                rows: vals
                    .iter()
                    .enumerate()
                    .map(|(i, &(p, x, k))| LogRow {
                        t: i + 1,
                        point_id: p,
                        inst_regret: x,
                        cum_regret: x * 2.0,
                        simple_regret: 1.0,
                        pending: k,
                        censored: k / 2,
                        nu_t: x.abs(),
                        info_gain: x / 3.0,
                    })
                    .collect(),
                first_conversion: None,
            };
            let back = parse_log(&log.to_csv()).unwrap();
            prop_assert_eq!(back.rows, log.rows);
        }
    }
}
