//! CSV writers for command outputs.
//!
//! Every file starts with a caller-supplied block of `#` lines describing
//! the configuration, followed by a header row and the data.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bench::{cdf_points, ordering_checks, OrderingCheck, ResultTable};
use crate::conformal::CodDecision;
use crate::error::{Error, Result};
use crate::model::Trajectory;

fn writer<W: Write>(mut w: W, metadata: &str) -> Result<csv::Writer<W>> {
    w.write_all(metadata.as_bytes())?;
    Ok(csv::Writer::from_writer(w))
}

#[derive(Serialize)]
struct TrajectoryRow {
    k: usize,
    truth: f64,
    measurement: f64,
}

/// `k,truth,measurement` for a scalar trajectory.
pub fn write_trajectory<W: Write>(w: W, metadata: &str, traj: &Trajectory) -> Result<()> {
    if traj.truth.first().is_some_and(|x| x.len() != 1) || traj.measurements.first().is_some_and(|z| z.len() != 1) {
        return Err(Error::Dimension("trajectory CSV holds scalar states and measurements".into()));
    }
    let mut out = writer(w, metadata)?;
    for (i, (x, z)) in traj.truth.iter().zip(&traj.measurements).enumerate() {
        out.serialize(TrajectoryRow {
            k: i + 1,
            truth: x[0],
            measurement: z[0],
        })?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RunRow<'a> {
    regime: &'a str,
    filter: &'a str,
    cod: bool,
    run: usize,
    mse: Option<f64>,
    diverged: bool,
}

/// `regime,filter,cod,run,mse,diverged`; diverged runs have an empty `mse`.
pub fn write_runs<W: Write>(w: W, metadata: &str, tables: &[ResultTable]) -> Result<()> {
    let mut out = writer(w, metadata)?;
    for t in tables {
        for r in &t.records {
            out.serialize(RunRow {
                regime: t.case.label(),
                filter: r.variant.filter.label(),
                cod: r.variant.cod,
                run: r.run,
                mse: (!r.diverged).then_some(r.mse),
                diverged: r.diverged,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    regime: &'a str,
    filter: &'a str,
    cod: bool,
    mean_mse: f64,
    runs_used: usize,
}

/// `regime,filter,cod,mean_mse,runs_used`.
pub fn write_summary<W: Write>(w: W, metadata: &str, tables: &[ResultTable]) -> Result<()> {
    let mut out = writer(w, metadata)?;
    for t in tables {
        for s in &t.summaries {
            out.serialize(SummaryRow {
                regime: t.case.label(),
                filter: s.variant.filter.label(),
                cod: s.variant.cod,
                mean_mse: s.mean_mse,
                runs_used: s.runs_used,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CdfRow<'a> {
    filter: &'a str,
    cod: bool,
    error: f64,
    fraction: f64,
}

/// `filter,cod,error,fraction` over the per-run MSEs of one regime.
pub fn write_cdf<W: Write>(w: W, metadata: &str, table: &ResultTable) -> Result<()> {
    let mut out = writer(w, metadata)?;
    for s in &table.summaries {
        for (error, fraction) in cdf_points(&table.error_samples(s.variant)) {
            out.serialize(CdfRow {
                filter: s.variant.filter.label(),
                cod: s.variant.cod,
                error,
                fraction,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct DecisionRow {
    step: usize,
    score: f64,
    threshold: f64,
    flag: bool,
}

/// `step,score,threshold,flag`, steps counted from 1.
pub fn write_decisions<W: Write>(w: W, metadata: &str, decisions: &[CodDecision]) -> Result<()> {
    let mut out = writer(w, metadata)?;
    for (i, d) in decisions.iter().enumerate() {
        out.serialize(DecisionRow {
            step: i + 1,
            score: d.score,
            threshold: d.threshold,
            flag: d.is_outlier,
        })?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ScoreRow {
    score: f64,
}

pub fn write_scores<W: Write>(w: W, metadata: &str, scores: &[f64]) -> Result<()> {
    let mut out = writer(w, metadata)?;
    for &score in scores {
        out.serialize(ScoreRow { score })?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a single-column `score` CSV; `#` lines are skipped.
pub fn read_scores<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    rdr.deserialize::<ScoreRow>()
        .map(|row| Ok(row?.score))
        .collect()
}

/// One matched query.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchRow {
    pub query: usize,
    pub true_node: usize,
    pub point_estimate: usize,
    pub set: Vec<usize>,
    pub covered: bool,
}

/// `query,true_node,point_estimate,set,set_size,covered`; set members are
/// space-separated node ids.
pub fn write_matches<W: Write>(w: W, metadata: &str, rows: &[MatchRow]) -> Result<()> {
    let mut out = writer(w, metadata)?;
    out.write_record(["query", "true_node", "point_estimate", "set", "set_size", "covered"])?;
    for r in rows {
        let members = r.set.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        out.write_record([
            r.query.to_string(),
            r.true_node.to_string(),
            r.point_estimate.to_string(),
            members,
            r.set.len().to_string(),
            r.covered.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Fixed-width text table of mean MSEs: one row per filter, one column per
/// regime and COD setting.
pub fn format_summary(tables: &[ResultTable]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<10}", "filter");
    let mut columns = Vec::new();
    for t in tables {
        for s in &t.summaries {
            let key = (t.case, s.variant.cod);
            if !columns.contains(&key) {
                columns.push(key);
            }
        }
    }
    for (case, cod) in &columns {
        let _ = write!(out, "{:>14}", format!("{case} {}", if *cod { "COD" } else { "plain" }));
    }
    out.push('\n');
    let mut filters: Vec<_> = tables
        .iter()
        .flat_map(|t| t.summaries.iter().map(|s| s.variant.filter))
        .collect();
    filters.sort();
    filters.dedup();
    for f in filters {
        let _ = write!(out, "{:<10}", f.label());
        for (case, cod) in &columns {
            let cell = tables
                .iter()
                .find(|t| t.case == *case)
                .and_then(|t| t.summary(f, *cod))
                .map_or_else(|| "-".to_string(), |s| {
                    if s.diverged > 0 {
                        format!("{:.2}*{}", s.mean_mse, s.diverged)
                    } else {
                        format!("{:.2}", s.mean_mse)
                    }
                });
            let _ = write!(out, "{cell:>14}");
        }
        out.push('\n');
    }
    out
}

/// Ordering checks of every table, flattened.
pub fn all_checks(tables: &[ResultTable]) -> Vec<OrderingCheck> {
    tables.iter().flat_map(ordering_checks).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{run_experiment, ExperimentSpec, Variant};
    use crate::filters::FilterKind;
    use crate::model::NoiseCase;
    use nalgebra::DVector;

    fn small_table() -> ResultTable {
        let mut spec = ExperimentSpec::new(NoiseCase::C);
        spec.runs = 2;
        spec.regime.steps = 30;
        spec.variants = vec![
            Variant { filter: FilterKind::Ukf, cod: false },
            Variant { filter: FilterKind::Ukf, cod: true },
        ];
        run_experiment(&spec).unwrap()
    }

    #[test]
    fn runs_and_summary_layout() {
        let t = small_table();
        let mut buf = Vec::new();
        write_runs(&mut buf, "# meta\n", std::slice::from_ref(&t)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# meta");
        assert_eq!(lines[1], "regime,filter,cod,run,mse,diverged");
        assert_eq!(lines.len(), 2 + 4);
        assert!(lines[2].starts_with("c,UKF,false,0,"));

        let mut buf = Vec::new();
        write_summary(&mut buf, "", std::slice::from_ref(&t)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("regime,filter,cod,mean_mse,runs_used\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn cdf_layout() {
        let t = small_table();
        let mut buf = Vec::new();
        write_cdf(&mut buf, "", &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("filter,cod,error,fraction\n"));
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(2).unwrap().ends_with(",1.0"));
    }

    #[test]
    fn trajectory_layout() {
        let traj = Trajectory {
            truth: vec![DVector::from_element(1, 8.0)],
            measurements: vec![DVector::from_element(1, 3.2)],
            seed: 1,
        };
        let mut buf = Vec::new();
        write_trajectory(&mut buf, "# x\n", &traj).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# x\nk,truth,measurement\n1,8.0,3.2\n");
    }

    #[test]
    fn scores_round_trip() {
        let mut buf = Vec::new();
        write_scores(&mut buf, "# m\n", &[0.25, 1.5]).unwrap();
        assert_eq!(read_scores(buf.as_slice()).unwrap(), vec![0.25, 1.5]);
        assert!(read_scores("score\nabc\n".as_bytes()).is_err());
    }

    #[test]
    fn match_rows() {
        let rows = vec![MatchRow {
            query: 0,
            true_node: 2,
            point_estimate: 2,
            set: vec![1, 2],
            covered: true,
        }];
        let mut buf = Vec::new();
        write_matches(&mut buf, "", &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "query,true_node,point_estimate,set,set_size,covered\n0,2,2,1 2,2,true\n"
        );
    }

    #[test]
    fn summary_text_has_one_row_per_filter() {
        let t = small_table();
        let text = format_summary(&[t]);
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("c plain") && text.contains("c COD"));
    }
}
