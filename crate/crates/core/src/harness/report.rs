//! Accuracy tables and learning curves in CSV, JSON and gnuplot form.
//!
//! Reports hold only seeded, reproducible values. Wall-clock data goes to a
//! separate `timings.json` so two runs with one seed give identical reports.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: String,
    pub task: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl Cell {
    pub fn new(row: impl Into<String>, task: impl Into<String>, correct: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::EmptyPredictions);
        }
        if correct > total {
            return Err(Error::InvalidArgument(format!("{correct} correct out of {total}")));
        }
        Ok(Self {
            row: row.into(),
            task: task.into(),
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        })
    }
}

/// Feature-by-task accuracy grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub seed: u64,
    pub profile: String,
    pub rows: Vec<String>,
    pub tasks: Vec<String>,
    pub cells: Vec<Cell>,
}

impl AccuracyReport {
    pub fn cell(&self, row: &str, task: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.row == row && c.task == task)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One line per row, one column per task; cells are percentages, blank when absent.
    pub fn write_table_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["method".to_string()];
        header.extend(self.tasks.iter().cloned());
        out.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.clone()];
            for task in &self.tasks {
                rec.push(self.cell(row, task).map_or(String::new(), |c| format!("{:.2}", 100.0 * c.accuracy)));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Long form with integer numerators and denominators.
    pub fn write_cells_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["row", "task", "correct", "total", "accuracy"])?;
        for c in &self.cells {
            out.write_record([c.row.clone(), c.task.clone(), c.correct.to_string(), c.total.to_string(), c.accuracy.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Writes `<stem>.csv`, `<stem>_cells.csv` and `<stem>.json` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_table_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        self.write_cells_csv(std::fs::File::create(dir.join(format!("{stem}_cells.csv")))?)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fraction: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub mean: f64,
    pub stddev: f64,
    /// `(correct, total)` per repetition.
    pub runs: Vec<(usize, usize)>,
}

impl CurvePoint {
    pub fn from_runs(fraction: f64, train_size: usize, runs: Vec<(usize, usize)>) -> Result<Self> {
        if runs.is_empty() || runs.iter().any(|r| r.1 == 0) {
            return Err(Error::EmptyPredictions);
        }
        let acc: Vec<f64> = runs.iter().map(|&(c, t)| c as f64 / t as f64).collect();
        let n = acc.len() as f64;
        let mean = acc.iter().sum::<f64>() / n;
        let stddev = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        Ok(Self {
            fraction,
            train_size,
            test_size: runs[0].1,
            mean,
            stddev,
            runs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurveReport {
    pub seed: u64,
    pub row: String,
    pub task: String,
    pub pool_size: usize,
    pub repetitions: usize,
    pub c: f64,
    pub points: Vec<CurvePoint>,
}

impl LearningCurveReport {
    pub fn write_gnuplot(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "# fraction mean stddev")?;
        for p in &self.points {
            writeln!(w, "{} {} {}", p.fraction, p.mean, p.stddev)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["fraction", "train_size", "test_size", "mean", "stddev"])?;
        for p in &self.points {
            out.write_record([
                p.fraction.to_string(),
                p.train_size.to_string(),
                p.test_size.to_string(),
                p.mean.to_string(),
                p.stddev.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join(format!("{stem}.csv")))?)?;
        self.write_gnuplot(std::fs::File::create(dir.join(format!("{stem}.dat")))?)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Stage durations and start time, kept apart from the reproducible outputs.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Timings {
    pub started_unix: u64,
    pub seconds: BTreeMap<String, f64>,
}

impl Timings {
    pub fn start() -> Self {
        Self {
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            seconds: BTreeMap::new(),
        }
    }

    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f()?;
        let secs = t.elapsed().as_secs_f64();
        log::info!("{stage} took {secs:.1}s");
        self.seconds.insert(stage.to_string(), secs);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_exact_ratios() {
        let c = Cell::new("rcc", "six-class", 57, 60).unwrap();
        assert_eq!(c.accuracy, 57.0 / 60.0);
        assert!(Cell::new("rcc", "six-class", 1, 0).is_err());
        assert!(Cell::new("rcc", "six-class", 3, 2).is_err());
    }

    #[test]
    fn table_layout() {
        let report = AccuracyReport {
            seed: 1,
            profile: "desk".into(),
            rows: vec!["ifv_sift".into(), "ifv_sift+rcc".into()],
            tasks: vec!["Sui-EarlyTang".into(), "six-class".into()],
            cells: vec![
                Cell::new("ifv_sift", "six-class", 9, 10).unwrap(),
                Cell::new("ifv_sift+rcc", "six-class", 10, 10).unwrap(),
            ],
        };
        let mut buf = Vec::new();
        report.write_table_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "method,Sui-EarlyTang,six-class\nifv_sift,,90.00\nifv_sift+rcc,,100.00\n");
        let back: AccuracyReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn curve_statistics() {
        let p = CurvePoint::from_runs(0.5, 50, vec![(40, 50), (45, 50)]).unwrap();
        assert!((p.mean - 0.85).abs() < 1e-12);
        assert!((p.stddev - 0.05).abs() < 1e-12);
        assert!(CurvePoint::from_runs(0.5, 50, vec![]).is_err());
    }
}
