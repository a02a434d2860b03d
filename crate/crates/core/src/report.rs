//! CSV emission and aggregation for protocol results.
//!
//! Floats are written with Rust's shortest-roundtrip formatting, so a
//! rerun with the same seed reproduces every byte. Infinite PSNR (exact
//! reconstruction) serializes as `inf`.

use crate::denoise::{EpochRow, ProtocolReport, RestartRow};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const RESTARTS_HEADER: &str = "fold,model,restart,train_psnr,test_psnr,selected,diverged";
pub const EPOCHS_HEADER: &str = "fold,model,restart,epoch,train_psnr";
pub const SUMMARY_HEADER: &str =
    "model,folds,mean_train_psnr,std_train_psnr,mean_test_psnr,std_test_psnr";

fn fmt(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse()
            .map_err(|_| Error::Data(format!("bad float {s:?} in csv"))),
    }
}

pub fn write_restarts_csv(rows: &[RestartRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{RESTARTS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.fold,
            r.model,
            r.restart,
            fmt(r.train_psnr),
            r.test_psnr.map(fmt).unwrap_or_default(),
            r.selected,
            r.diverged,
        )?;
    }
    Ok(())
}

pub fn read_restarts_csv(path: &Path) -> Result<Vec<RestartRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESTARTS_HEADER => {}
        other => {
            return Err(Error::Data(format!(
                "{}: expected header {RESTARTS_HEADER:?}, got {other:?}",
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Data(format!("bad restarts row {line:?}")));
        }
        rows.push(RestartRow {
            fold: parts[0]
                .parse()
                .map_err(|_| Error::Data(format!("bad fold {:?}", parts[0])))?,
            model: parts[1].to_string(),
            restart: parts[2]
                .parse()
                .map_err(|_| Error::Data(format!("bad restart {:?}", parts[2])))?,
            train_psnr: parse_f64(parts[3])?,
            test_psnr: if parts[4].is_empty() {
                None
            } else {
                Some(parse_f64(parts[4])?)
            },
            selected: parts[5] == "true",
            diverged: parts[6] == "true",
        });
    }
    Ok(rows)
}

pub fn write_epochs_csv(rows: &[EpochRow], mut w: impl Write) -> Result<()> {
    writeln!(w, "{EPOCHS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.fold,
            r.model,
            r.restart,
            r.epoch,
            fmt(r.train_psnr)
        )?;
    }
    Ok(())
}

/// Column documentation emitted next to every report.
pub fn write_schema(mut w: impl Write) -> Result<()> {
    writeln!(w, "restarts.csv: {RESTARTS_HEADER}")?;
    writeln!(w, "  fold        0-based cross-validation fold index")?;
    writeln!(w, "  model       model name (onn, cnn, ...)")?;
    writeln!(w, "  restart     0-based random-restart index within the fold")?;
    writeln!(w, "  train_psnr  running train PSNR of the final epoch, dB")?;
    writeln!(w, "  test_psnr   mean held-out PSNR, dB; only for the selected restart")?;
    writeln!(w, "  selected    true for the restart with the best train PSNR")?;
    writeln!(w, "  diverged    true when training produced a non-finite loss")?;
    writeln!(w)?;
    writeln!(w, "epochs.csv: {EPOCHS_HEADER}")?;
    writeln!(w, "  epoch       1-based epoch number")?;
    writeln!(w, "  train_psnr  running train PSNR of that epoch, dB")?;
    writeln!(w)?;
    writeln!(w, "summary.csv: {SUMMARY_HEADER}")?;
    writeln!(w, "  statistics over the selected restart of each executed fold")?;
    Ok(())
}

/// Mean/std statistics per model over the selected restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub model: String,
    pub folds: usize,
    pub mean_train_psnr: f64,
    pub std_train_psnr: f64,
    pub mean_test_psnr: f64,
    pub std_test_psnr: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregate selected-restart rows per model, in first-seen order.
pub fn summarize(rows: &[RestartRow]) -> Vec<ModelSummary> {
    let mut order: Vec<String> = Vec::new();
    let mut train: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut test: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for row in rows.iter().filter(|r| r.selected) {
        if !order.contains(&row.model) {
            order.push(row.model.clone());
        }
        train.entry(row.model.clone()).or_default().push(row.train_psnr);
        if let Some(t) = row.test_psnr {
            test.entry(row.model.clone()).or_default().push(t);
        }
    }
    order
        .into_iter()
        .map(|model| {
            let tr = &train[&model];
            let (mean_train, std_train) = mean_std(tr);
            let (mean_test, std_test) = test
                .get(&model)
                .map(|v| mean_std(v))
                .unwrap_or((f64::NAN, f64::NAN));
            ModelSummary {
                model,
                folds: tr.len(),
                mean_train_psnr: mean_train,
                std_train_psnr: std_train,
                mean_test_psnr: mean_test,
                std_test_psnr: std_test,
            }
        })
        .collect()
}

pub fn write_summary_csv(summaries: &[ModelSummary], mut w: impl Write) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for s in summaries {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.model,
            s.folds,
            fmt(s.mean_train_psnr),
            fmt(s.std_train_psnr),
            fmt(s.mean_test_psnr),
            fmt(s.std_test_psnr),
        )?;
    }
    Ok(())
}

/// Percentage improvement of `model` over `baseline` in mean test PSNR.
pub fn improvement_pct(model: f64, baseline: f64) -> f64 {
    (model - baseline) / baseline * 100.0
}

/// The improvement table: every model against the named baseline, plus
/// optional externally supplied baselines (model name, mean test PSNR).
pub fn write_improvement_table(
    summaries: &[ModelSummary],
    subject: &str,
    external: &[(String, f64)],
    mut w: impl Write,
) -> Result<()> {
    let subject_summary = summaries
        .iter()
        .find(|s| s.model == subject)
        .ok_or_else(|| Error::Data(format!("no rows for model {subject:?}")))?;
    writeln!(w, "baseline,baseline_test_psnr,improvement_pct")?;
    for s in summaries.iter().filter(|s| s.model != subject) {
        writeln!(
            w,
            "{},{},{}",
            s.model,
            fmt(s.mean_test_psnr),
            fmt(improvement_pct(subject_summary.mean_test_psnr, s.mean_test_psnr)),
        )?;
    }
    for (name, value) in external {
        writeln!(
            w,
            "{},{},{}",
            name,
            fmt(*value),
            fmt(improvement_pct(subject_summary.mean_test_psnr, *value)),
        )?;
    }
    Ok(())
}

/// Convenience: write every protocol artifact into a directory.
pub fn write_protocol_outputs(report: &ProtocolReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_restarts_csv(&report.restarts, std::fs::File::create(dir.join("restarts.csv"))?)?;
    write_epochs_csv(&report.epochs, std::fs::File::create(dir.join("epochs.csv"))?)?;
    let summaries = summarize(&report.restarts);
    write_summary_csv(&summaries, std::fs::File::create(dir.join("summary.csv"))?)?;
    write_schema(std::fs::File::create(dir.join("schema.txt"))?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fold: usize, model: &str, restart: usize, train: f64, test: Option<f64>, selected: bool) -> RestartRow {
        RestartRow {
            fold,
            model: model.into(),
            restart,
            train_psnr: train,
            test_psnr: test,
            selected,
            diverged: false,
        }
    }

    #[test]
    fn restarts_csv_round_trip() {
        let rows = vec![
            row(0, "cnn", 0, 21.5, Some(20.25), true),
            row(0, "cnn", 1, 20.0, None, false),
            row(0, "onn", 0, f64::INFINITY, Some(25.125), true),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("restarts.csv");
        write_restarts_csv(&rows, std::fs::File::create(&path).unwrap()).unwrap();
        let back = read_restarts_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].train_psnr, 21.5);
        assert_eq!(back[1].test_psnr, None);
        assert_eq!(back[2].train_psnr, f64::INFINITY);
        assert!(back[2].selected);
    }

    #[test]
    fn summary_matches_hand_computed_values() {
        let rows = vec![
            row(0, "cnn", 0, 20.0, Some(19.0), true),
            row(1, "cnn", 2, 22.0, Some(21.0), true),
            row(0, "cnn", 1, 99.0, None, false), // unselected rows are ignored
            row(0, "onn", 0, 24.0, Some(23.0), true),
            row(1, "onn", 1, 26.0, Some(25.0), true),
        ];
        let summaries = summarize(&rows);
        assert_eq!(summaries.len(), 2);
        let cnn = &summaries[0];
        assert_eq!(cnn.model, "cnn");
        assert_eq!(cnn.folds, 2);
        assert!((cnn.mean_train_psnr - 21.0).abs() < 1e-12);
        assert!((cnn.std_train_psnr - 1.0).abs() < 1e-12);
        assert!((cnn.mean_test_psnr - 20.0).abs() < 1e-12);

        let onn = &summaries[1];
        assert!((onn.mean_test_psnr - 24.0).abs() < 1e-12);

        // identical models: exactly 0.00% improvement
        assert_eq!(improvement_pct(20.0, 20.0), 0.0);
        assert!((improvement_pct(onn.mean_test_psnr, cnn.mean_test_psnr) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn improvement_table_includes_external_baselines() {
        let rows = vec![
            row(0, "cnn", 0, 20.0, Some(20.0), true),
            row(0, "onn", 0, 24.0, Some(26.0), true),
        ];
        let summaries = summarize(&rows);
        let mut buf = Vec::new();
        write_improvement_table(
            &summaries,
            "onn",
            &[("deep_cnn".into(), 25.0)],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("cnn,20,30"));
        assert!(text.contains("deep_cnn,25,4"));
    }

    #[test]
    fn missing_model_is_flagged() {
        let summaries = summarize(&[row(0, "cnn", 0, 20.0, Some(20.0), true)]);
        let mut buf = Vec::new();
        assert!(write_improvement_table(&summaries, "onn", &[], &mut buf).is_err());
    }
}
