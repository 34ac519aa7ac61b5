//! Metrics files and reward/success curves.

use super::HarnessError;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// One row per training episode. Loss and objective columns are episode
/// means and stay empty when no gradient step ran.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRow {
    pub episode: u64,
    pub steps: usize,
    pub return_c: f64,
    pub return_o: f64,
    pub success: bool,
    pub captured_steps: usize,
    pub collided: bool,
    pub fault: bool,
    pub min_obstacle_distance: Option<f64>,
    pub min_lambda: f64,
    pub psi: f64,
    pub lambda: f64,
    pub loss_c1: Option<f64>,
    pub loss_c2: Option<f64>,
    pub loss_o1: Option<f64>,
    pub loss_o2: Option<f64>,
    pub actor_j: Option<f64>,
}

pub const EPISODE_COLUMNS: [&str; 17] = [
    "episode",
    "steps",
    "return_c",
    "return_o",
    "success",
    "captured_steps",
    "collided",
    "fault",
    "min_obstacle_distance",
    "min_lambda",
    "psi",
    "lambda",
    "loss_c1",
    "loss_c2",
    "loss_o1",
    "loss_o2",
    "actor_j",
];

/// One row per replay interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub interval: u64,
    pub last_episode: u64,
    pub psi: f64,
    pub lambda: f64,
    pub transferred_episodes: usize,
    pub transferred_experiences: usize,
    pub priority_len: usize,
    pub shortfall: u64,
}

/// Writer that emits the header even when no row follows.
pub struct CsvLog<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvLog<W> {
    pub fn new(out: W, header: &[&str]) -> Result<Self, HarnessError> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(header)?;
        Ok(Self { inner })
    }

    pub fn row<T: Serialize>(&mut self, row: &T) -> Result<(), HarnessError> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub const INTERVAL_COLUMNS: [&str; 8] = [
    "interval",
    "last_episode",
    "psi",
    "lambda",
    "transferred_episodes",
    "transferred_experiences",
    "priority_len",
    "shortfall",
];

/// Parses an episode metrics file, rejecting any other column layout.
pub fn read_episode_rows<R: Read>(input: R) -> Result<Vec<EpisodeRow>, HarnessError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(EPISODE_COLUMNS.iter().copied()) {
        return Err(HarnessError::SchemaMismatch(format!(
            "metrics header {:?} does not match {:?}",
            header.iter().collect::<Vec<_>>(),
            EPISODE_COLUMNS
        )));
    }
    let mut rows = Vec::new();
    for r in reader.deserialize() {
        let row: EpisodeRow = r.map_err(|e| HarnessError::SchemaMismatch(e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_episode_file(path: &Path) -> Result<Vec<EpisodeRow>, HarnessError> {
    let f = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_episode_rows(std::io::BufReader::new(f))
}

/// Trailing moving average. Near the start the window is truncated to the
/// samples available, so a window longer than the series yields the running
/// mean.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    let mut out = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        let lo = (i + 1).saturating_sub(window);
        let slice = &xs[lo..=i];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

/// Percentage of successful episodes in consecutive blocks of `interval`;
/// a trailing partial block is dropped.
pub fn success_percentages(success: &[bool], interval: usize) -> Vec<f64> {
    assert!(interval > 0, "interval must be positive");
    success
        .chunks_exact(interval)
        .map(|c| 100.0 * c.iter().filter(|s| **s).count() as f64 / interval as f64)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardPoint {
    pub episode: u64,
    pub return_c: f64,
    pub smoothed_c: f64,
    pub return_o: f64,
    pub smoothed_o: f64,
    pub total: f64,
    pub smoothed_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuccessPoint {
    pub interval: u64,
    pub last_episode: u64,
    pub success_pct: f64,
}

pub fn reward_curve(rows: &[EpisodeRow], window: usize) -> Vec<RewardPoint> {
    let episodes: Vec<u64> = rows.iter().map(|r| r.episode).collect();
    let c: Vec<f64> = rows.iter().map(|r| r.return_c).collect();
    let o: Vec<f64> = rows.iter().map(|r| r.return_o).collect();
    reward_points(&episodes, &c, &o, window)
}

fn reward_points(episodes: &[u64], c: &[f64], o: &[f64], window: usize) -> Vec<RewardPoint> {
    let t: Vec<f64> = c.iter().zip(o).map(|(a, b)| a + b).collect();
    let (sc, so, st) = (moving_average(c, window), moving_average(o, window), moving_average(&t, window));
    (0..episodes.len())
        .map(|i| RewardPoint {
            episode: episodes[i],
            return_c: c[i],
            smoothed_c: sc[i],
            return_o: o[i],
            smoothed_o: so[i],
            total: t[i],
            smoothed_total: st[i],
        })
        .collect()
}

pub fn success_curve(rows: &[EpisodeRow], interval: usize) -> Vec<SuccessPoint> {
    let s: Vec<bool> = rows.iter().map(|r| r.success).collect();
    success_percentages(&s, interval)
        .into_iter()
        .enumerate()
        .map(|(k, pct)| SuccessPoint {
            interval: k as u64,
            last_episode: rows[(k + 1) * interval - 1].episode,
            success_pct: pct,
        })
        .collect()
}

/// Pointwise mean of several runs' reward curves over their common prefix.
/// Smoothing is applied to the averaged returns.
pub fn average_reward_curve(runs: &[Vec<EpisodeRow>], window: usize) -> Vec<RewardPoint> {
    let n = runs.iter().map(Vec::len).min().unwrap_or(0);
    let k = runs.len() as f64;
    let mean = |f: &dyn Fn(&EpisodeRow) -> f64| -> Vec<f64> {
        (0..n).map(|i| runs.iter().map(|r| f(&r[i])).sum::<f64>() / k).collect()
    };
    let episodes: Vec<u64> = (0..n).map(|i| runs[0][i].episode).collect();
    reward_points(&episodes, &mean(&|r| r.return_c), &mean(&|r| r.return_o), window)
}

/// Pointwise mean of several runs' success percentages over their common
/// intervals.
pub fn average_success_curve(runs: &[Vec<EpisodeRow>], interval: usize) -> Vec<SuccessPoint> {
    let curves: Vec<Vec<SuccessPoint>> = runs.iter().map(|r| success_curve(r, interval)).collect();
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| SuccessPoint {
            interval: i as u64,
            last_episode: curves[0][i].last_episode,
            success_pct: curves.iter().map(|c| c[i].success_pct).sum::<f64>() / curves.len() as f64,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), HarnessError> {
    let f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut log = CsvLog::new(std::io::BufWriter::new(f), header)?;
    for r in rows {
        log.row(r)?;
    }
    Ok(())
}

const REWARD_COLUMNS: [&str; 7] = [
    "episode",
    "return_c",
    "smoothed_c",
    "return_o",
    "smoothed_o",
    "total",
    "smoothed_total",
];
const SUCCESS_COLUMNS: [&str; 3] = ["interval", "last_episode", "success_pct"];

/// Files written by [`emit_curves`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CurveFiles {
    pub written: Vec<std::path::PathBuf>,
}

/// Writes `<name>_reward.csv` and `<name>_success.csv` for every input file
/// (named after the file stem, or its parent directory for `metrics.csv`),
/// plus `average_*` files when more than one input is given.
pub fn emit_curves(
    inputs: &[std::path::PathBuf],
    out_dir: &Path,
    window: usize,
    interval: usize,
) -> Result<CurveFiles, HarnessError> {
    if window == 0 || interval == 0 {
        return Err(HarnessError::ConfigInvalid("window and interval must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut files = CurveFiles::default();
    let mut runs = Vec::with_capacity(inputs.len());
    let mut names: Vec<String> = Vec::new();
    for (k, path) in inputs.iter().enumerate() {
        let rows = read_episode_file(path)?;
        let mut name = run_name(path);
        if names.contains(&name) {
            name = format!("{name}_{k}");
        }
        let mut emit = |name: &str, reward: Vec<RewardPoint>, success: Vec<SuccessPoint>| -> Result<(), HarnessError> {
            let p = out_dir.join(format!("{name}_reward.csv"));
            write_csv(&p, &reward, &REWARD_COLUMNS)?;
            files.written.push(p);
            let p = out_dir.join(format!("{name}_success.csv"));
            write_csv(&p, &success, &SUCCESS_COLUMNS)?;
            files.written.push(p);
            Ok(())
        };
        emit(&name, reward_curve(&rows, window), success_curve(&rows, interval))?;
        names.push(name);
        runs.push(rows);
        if k + 1 == inputs.len() && inputs.len() > 1 {
            emit(
                "average",
                average_reward_curve(&runs, window),
                average_success_curve(&runs, interval),
            )?;
        }
    }
    Ok(files)
}

fn run_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    if stem == "metrics" {
        if let Some(parent) = path.parent().and_then(|p| p.file_name()) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_edges() {
        assert_eq!(moving_average(&[2.0; 5], 3), vec![2.0; 5]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.0, 1.5, 2.5, 3.5]);
        assert_eq!(moving_average(&[1.0, 2.0, 3.0], 10), vec![1.0, 1.5, 2.0]);
        assert!(moving_average(&[], 4).is_empty());
    }

    #[test]
    fn success_blocks() {
        let s = [true, false, true, true, false];
        assert_eq!(success_percentages(&s, 2), vec![50.0, 100.0]);
    }
}
