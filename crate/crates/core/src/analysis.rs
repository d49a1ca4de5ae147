//! Rank-correlation validation of emulated timings against benchmark scores.
//!
//! Spearman's rho uses average (fractional) ranks for ties. Kendall's tau is
//! the tie-corrected tau-b:
//!
//! ```text
//! tau_b = (C - D) / sqrt((n0 - n1) * (n0 - n2))
//!   C, D  concordant / discordant pairs
//!   n0    n(n-1)/2, all pairs
//!   n1    pairs tied on x
//!   n2    pairs tied on y
//! ```
//!
//! Orientation flags say whether a larger value is better on each side. When
//! the flags disagree the ranks of the "lower is better" side are negated, so
//! a coefficient of 1 always means "better on one side is better on the
//! other".

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::Catalog;
use crate::scheduler::{RoundReport, RunMode};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("series sides differ in length ({xs} vs {ys}) or labels ({labels})")]
    LengthMismatch { labels: usize, xs: usize, ys: usize },
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("all values on the {0} side are equal; correlation undefined")]
    DegenerateSeries(&'static str),
    #[error("empty input")]
    Empty,
    #[error("value at index {0} is not positive")]
    NonPositiveValue(usize),
    #[error("no benchmark entry for profile '{0}'")]
    MissingBenchmarkEntry(String),
    #[error("profile '{0}' not found in catalog")]
    UnknownProfile(String),
    #[error("benchmark row {row}: {message}")]
    BenchmarkParse { row: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Two aligned series of observations for the same labelled items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSeries<T> {
    pub labels: Vec<String>,
    pub xs: Vec<T>,
    pub ys: Vec<T>,
    pub higher_is_better_x: bool,
    pub higher_is_better_y: bool,
}

impl<T: Scalar> PairedSeries<T> {
    pub fn new(
        labels: Vec<String>,
        xs: Vec<T>,
        ys: Vec<T>,
        higher_is_better_x: bool,
        higher_is_better_y: bool,
    ) -> Result<Self, AnalysisError> {
        let s = PairedSeries {
            labels,
            xs,
            ys,
            higher_is_better_x,
            higher_is_better_y,
        };
        s.validate()?;
        Ok(s)
    }

    /// Unlabelled series with both sides oriented the same way.
    pub fn unlabelled(xs: Vec<T>, ys: Vec<T>) -> Result<Self, AnalysisError> {
        let labels = (0..xs.len()).map(|i| i.to_string()).collect();
        Self::new(labels, xs, ys, true, true)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.xs.len() != self.ys.len() || self.labels.len() != self.xs.len() {
            return Err(AnalysisError::LengthMismatch {
                labels: self.labels.len(),
                xs: self.xs.len(),
                ys: self.ys.len(),
            });
        }
        if self.xs.len() < 2 {
            return Err(AnalysisError::TooShort(self.xs.len()));
        }
        if let Some(i) = self
            .xs
            .iter()
            .zip(&self.ys)
            .position(|(x, y)| !x.is_finite() || !y.is_finite())
        {
            return Err(AnalysisError::NonFinite(i));
        }
        if all_equal(&self.xs) {
            return Err(AnalysisError::DegenerateSeries("x"));
        }
        if all_equal(&self.ys) {
            return Err(AnalysisError::DegenerateSeries("y"));
        }
        Ok(())
    }

    fn orientation_sign(&self) -> T {
        if self.higher_is_better_x == self.higher_is_better_y {
            T::one()
        } else {
            -T::one()
        }
    }
}

fn all_equal<T: PartialEq>(v: &[T]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

fn cmp<T: Scalar>(a: &T, b: &T) -> Ordering {
    a.partial_cmp(b).expect("finite values are totally ordered")
}

/// 1-based ranks; tied values share the mean of the positions they span.
pub fn average_ranks<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| cmp(&values[a], &values[b]));
    let mut ranks = vec![T::zero(); values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = T::of_usize(start + 1 + end) / T::of_usize(2);
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> T {
    let n = T::of_usize(xs.len());
    let mx = xs.iter().fold(T::zero(), |a, &b| a + b) / n;
    let my = ys.iter().fold(T::zero(), |a, &b| a + b) / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}

pub fn spearman_rho<T: Scalar>(series: &PairedSeries<T>) -> Result<T, AnalysisError> {
    series.validate()?;
    let orient = |v: Vec<T>, higher_is_better: bool| {
        if higher_is_better {
            v
        } else {
            v.into_iter().map(|r| -r).collect()
        }
    };
    let rx = orient(average_ranks(&series.xs), series.higher_is_better_x);
    let ry = orient(average_ranks(&series.ys), series.higher_is_better_y);
    Ok(clamp_unit(pearson(&rx, &ry)))
}

/// Pair counts behind tau-b.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TauCounts {
    /// C - D
    pub score: i64,
    pub n0: u64,
    pub n1: u64,
    pub n2: u64,
}

impl TauCounts {
    pub fn tau_b<T: Scalar>(&self) -> T {
        let num = T::from_i64(self.score).expect("i64 converts to every float type");
        let den = (T::of_u64(self.n0 - self.n1) * T::of_u64(self.n0 - self.n2)).sqrt();
        num / den
    }
}

fn tied_pairs<T: Scalar>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that counts strict inversions.
fn sort_counting_inversions<T: Scalar>(v: &mut [T], buf: &mut Vec<T>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inv = sort_counting_inversions(&mut v[..mid], buf);
    inv += sort_counting_inversions(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf.push(v[j]);
            inv += (mid - i) as u64;
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    inv
}

/// Knight's O(n log n) pair counting on the raw values (orientation ignored).
pub fn tau_counts<T: Scalar>(xs: &[T], ys: &[T]) -> TauCounts {
    let n = xs.len() as u64;
    let n0 = n * n.saturating_sub(1) / 2;

    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| cmp(&xs[a], &xs[b]).then_with(|| cmp(&ys[a], &ys[b])));

    let sorted_x: Vec<T> = order.iter().map(|&i| xs[i]).collect();
    let n1 = tied_pairs(&sorted_x);

    let mut n3 = 0u64;
    let mut run = 1u64;
    for w in order.windows(2) {
        if xs[w[0]] == xs[w[1]] && ys[w[0]] == ys[w[1]] {
            run += 1;
        } else {
            n3 += run * (run - 1) / 2;
            run = 1;
        }
    }
    n3 += run * (run - 1) / 2;

    let mut by_y: Vec<T> = order.iter().map(|&i| ys[i]).collect();
    let mut buf = Vec::with_capacity(by_y.len());
    let discordant = sort_counting_inversions(&mut by_y, &mut buf);
    let n2 = tied_pairs(&by_y);

    let score = n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * discordant as i64;
    TauCounts { score, n0, n1, n2 }
}

pub fn kendall_tau<T: Scalar>(series: &PairedSeries<T>) -> Result<T, AnalysisError> {
    series.validate()?;
    let counts = tau_counts(&series.xs, &series.ys);
    Ok(clamp_unit(counts.tau_b::<T>() * series.orientation_sign()))
}

/// Divides every value by the arithmetic mean.
pub fn normalize_about_mean<T: Scalar>(xs: &[T]) -> Result<Vec<T>, AnalysisError> {
    if xs.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if let Some(i) = xs.iter().position(|&x| x.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) || !x.is_finite()) {
        return Err(AnalysisError::NonPositiveValue(i));
    }
    let mean = xs.iter().fold(T::zero(), |a, &b| a + b) / T::of_usize(xs.len());
    Ok(xs.iter().map(|&x| x / mean).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub score: f64,
    pub source: String,
}

/// Per-profile benchmark scores. `higher_is_better` defaults to true.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub entries: BTreeMap<String, BenchmarkEntry>,
    pub higher_is_better: bool,
}

#[derive(Debug, Deserialize)]
struct BenchmarkRow {
    profile_id: String,
    score: f64,
    source: String,
}

/// Reads a benchmark CSV with header `profile_id,score,source`.
pub fn load_benchmark(path: impl AsRef<Path>) -> Result<BenchmarkTable, AnalysisError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_benchmark_csv(&content)
}

pub fn parse_benchmark_csv(content: &str) -> Result<BenchmarkTable, AnalysisError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(content.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| AnalysisError::BenchmarkParse { row: 1, message: e.to_string() })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["profile_id", "score", "source"] {
        return Err(AnalysisError::BenchmarkParse {
            row: 1,
            message: "expected header 'profile_id,score,source'".into(),
        });
    }
    let mut entries = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| AnalysisError::BenchmarkParse {
            row: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line());
        let r: BenchmarkRow = record
            .deserialize(Some(&headers))
            .map_err(|e| AnalysisError::BenchmarkParse { row, message: e.to_string() })?;
        if !(r.score.is_finite() && r.score > 0.0) {
            return Err(AnalysisError::BenchmarkParse {
                row,
                message: format!("score for '{}' must be positive", r.profile_id),
            });
        }
        if entries.contains_key(&r.profile_id) {
            return Err(AnalysisError::BenchmarkParse {
                row,
                message: format!("duplicate profile '{}'", r.profile_id),
            });
        }
        entries.insert(r.profile_id, BenchmarkEntry { score: r.score, source: r.source });
    }
    Ok(BenchmarkTable {
        entries,
        higher_is_better: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub spearman_rho: f64,
    pub kendall_tau_b: f64,
    pub n: usize,
    pub mode: String,
    /// Profiles that appeared in the reports but never completed a run.
    pub excluded: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub profile_id: String,
    pub generation: String,
    pub mean_wall_time_s: f64,
    pub score: f64,
    pub norm_time: f64,
    pub norm_score: f64,
}

#[derive(Debug, Clone)]
pub struct ValidationOutput {
    pub summary: ValidationSummary,
    pub rows: Vec<ValidationRow>,
    pub table_csv: PathBuf,
    pub summary_json: PathBuf,
    pub generations_csv: PathBuf,
}

pub const TABLE_FILE: &str = "validation.csv";
pub const SUMMARY_FILE: &str = "validation_summary.json";
pub const GENERATIONS_FILE: &str = "validation_generations.csv";

fn mode_label(reports: &[RoundReport]) -> String {
    let sim = reports.iter().filter(|r| r.mode == RunMode::Simulated).count();
    match (sim, reports.len() - sim) {
        (0, 0) => "none",
        (_, 0) => "simulated",
        (0, _) => "real",
        _ => "mixed",
    }
    .to_string()
}

/// Builds the per-profile table (mean wall time of completed runs against
/// benchmark score), the correlation summary, and a per-generation grouping,
/// and writes all three into `out_dir`.
pub fn emit_validation_report(
    reports: &[RoundReport],
    benchmark: &BenchmarkTable,
    catalog: &Catalog,
    out_dir: impl AsRef<Path>,
) -> Result<ValidationOutput, AnalysisError> {
    let out_dir = out_dir.as_ref();

    let mut times: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut seen: Vec<&str> = Vec::new();
    for run in reports.iter().flat_map(|r| &r.runs) {
        if !seen.contains(&run.profile_id.as_str()) {
            seen.push(&run.profile_id);
        }
        if run.status.is_ok() {
            times.entry(&run.profile_id).or_default().push(run.wall_time_s);
        }
    }
    for id in &seen {
        if !benchmark.entries.contains_key(*id) {
            return Err(AnalysisError::MissingBenchmarkEntry(id.to_string()));
        }
    }
    let mut excluded: Vec<String> = seen
        .iter()
        .filter(|id| !times.contains_key(**id))
        .map(|id| id.to_string())
        .collect();
    excluded.sort();

    let labels: Vec<String> = times.keys().map(|k| k.to_string()).collect();
    let means: Vec<f64> = times
        .values()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    let scores: Vec<f64> = labels.iter().map(|id| benchmark.entries[id].score).collect();
    let mut generations = Vec::with_capacity(labels.len());
    for id in &labels {
        let profile = catalog
            .get(id)
            .ok_or_else(|| AnalysisError::UnknownProfile(id.clone()))?;
        generations.push(
            profile
                .gpu
                .as_ref()
                .map_or_else(|| "cpu-only".to_string(), |g| g.generation.clone()),
        );
    }

    let series = PairedSeries::new(labels.clone(), means.clone(), scores.clone(), false, benchmark.higher_is_better)?;
    let rho = spearman_rho(&series)?;
    let tau = kendall_tau(&series)?;
    let norm_time = normalize_about_mean(&means)?;
    let norm_score = normalize_about_mean(&scores)?;

    let rows: Vec<ValidationRow> = (0..labels.len())
        .map(|i| ValidationRow {
            profile_id: labels[i].clone(),
            generation: generations[i].clone(),
            mean_wall_time_s: means[i],
            score: scores[i],
            norm_time: norm_time[i],
            norm_score: norm_score[i],
        })
        .collect();

    let summary = ValidationSummary {
        spearman_rho: rho,
        kendall_tau_b: tau,
        n: rows.len(),
        mode: mode_label(reports),
        excluded,
    };

    fs::create_dir_all(out_dir).map_err(|source| AnalysisError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let write = |name: &str, content: String| -> Result<PathBuf, AnalysisError> {
        let path = out_dir.join(name);
        fs::write(&path, content).map_err(|source| AnalysisError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    };

    let mut table = String::from("profile_id,generation,mean_wall_time_s,score,norm_time,norm_score\n");
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.profile_id, r.generation, r.mean_wall_time_s, r.score, r.norm_time, r.norm_score
        ));
    }
    let table_csv = write(TABLE_FILE, table)?;

    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for r in &rows {
        let g = groups.entry(&r.generation).or_default();
        g.0 += 1;
        g.1 += r.norm_time;
        g.2 += r.norm_score;
    }
    let mut gen_csv = String::from("generation,n,mean_norm_time,mean_norm_score\n");
    for (gen, (n, t, s)) in &groups {
        gen_csv.push_str(&format!("{gen},{n},{},{}\n", t / *n as f64, s / *n as f64));
    }
    let generations_csv = write(GENERATIONS_FILE, gen_csv)?;

    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    let summary_json = write(SUMMARY_FILE, json)?;

    Ok(ValidationOutput {
        summary,
        rows,
        table_csv,
        summary_json,
        generations_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(xs: &[f64], ys: &[f64]) -> PairedSeries<f64> {
        PairedSeries::unlabelled(xs.to_vec(), ys.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_reversed() {
        let up = s(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]);
        let down = s(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]);
        assert_eq!(spearman_rho(&up).unwrap(), 1.0);
        assert_eq!(spearman_rho(&down).unwrap(), -1.0);
        assert_eq!(kendall_tau(&up).unwrap(), 1.0);
        assert_eq!(kendall_tau(&down).unwrap(), -1.0);
    }

    #[test]
    fn spearman_with_ties() {
        // ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]
        // dx = [-1.5, 0, 0, 1.5], dy = [-1.5, 0.5, -0.5, 1.5]
        // sxy = 4.5, sxx = 4.5, syy = 5 -> rho = 4.5 / sqrt(22.5) = 0.9486832980505138
        let rho = spearman_rho(&s(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0])).unwrap();
        assert!((rho - 0.9486832980505138).abs() < 1e-12, "{rho}");
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn tau_b_with_ties() {
        // x = [1,2,2,3], y = [1,2,3,3]: C = 4, D = 0, n0 = 6, n1 = 1, n2 = 1
        let c = tau_counts(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 3.0]);
        assert_eq!(c, TauCounts { score: 4, n0: 6, n1: 1, n2: 1 });
        let tau = kendall_tau(&s(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 3.0])).unwrap();
        assert_eq!(tau, 4.0 / 5.0);
    }

    #[test]
    fn orientation_flip_negates() {
        let mut a = s(&[1.0, 3.0, 2.0, 5.0], &[2.0, 1.0, 4.0, 3.0]);
        let rho = spearman_rho(&a).unwrap();
        let tau = kendall_tau(&a).unwrap();
        a.higher_is_better_x = false;
        assert_eq!(spearman_rho(&a).unwrap(), -rho);
        assert_eq!(kendall_tau(&a).unwrap(), -tau);
    }

    #[test]
    fn degenerate_and_malformed() {
        let flat = PairedSeries::unlabelled(vec![1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0]);
        assert!(matches!(flat, Err(AnalysisError::DegenerateSeries("x"))));
        let short = PairedSeries::unlabelled(vec![1.0], vec![1.0]);
        assert!(matches!(short, Err(AnalysisError::TooShort(1))));
        let nan = PairedSeries::unlabelled(vec![1.0, f64::NAN], vec![1.0, 2.0]);
        assert!(matches!(nan, Err(AnalysisError::NonFinite(1))));
        let uneven = PairedSeries::<f64>::new(vec!["a".into()], vec![1.0, 2.0], vec![1.0, 2.0], true, true);
        assert!(matches!(uneven, Err(AnalysisError::LengthMismatch { .. })));
    }

    #[test]
    fn f32_series() {
        let series = PairedSeries::<f32>::unlabelled(vec![1.0, 2.0, 3.0], vec![3.0, 5.0, 4.0]).unwrap();
        assert_eq!(kendall_tau(&series).unwrap(), 1.0 / 3.0);
        assert!((spearman_rho(&series).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_about_mean(&[5.0]).unwrap(), vec![1.0]);
        assert_eq!(normalize_about_mean(&[1.0, 3.0]).unwrap(), vec![0.5, 1.5]);
        assert_eq!(normalize_about_mean(&[2.0, 4.0, 6.0]).unwrap(), vec![0.5, 1.0, 1.5]);
        assert!(matches!(normalize_about_mean::<f64>(&[]), Err(AnalysisError::Empty)));
        assert!(matches!(
            normalize_about_mean(&[1.0, 0.0]),
            Err(AnalysisError::NonPositiveValue(1))
        ));
        assert!(matches!(
            normalize_about_mean(&[-1.0]),
            Err(AnalysisError::NonPositiveValue(0))
        ));
    }

    #[test]
    fn benchmark_csv() {
        let t = parse_benchmark_csv("profile_id,score,source\na,10,x\nb,20.5,y\n").unwrap();
        assert_eq!(t.entries.len(), 2);
        assert_eq!(t.entries["b"].score, 20.5);
        assert!(parse_benchmark_csv("profile_id,score,source\na,-1,x\n").is_err());
        assert!(parse_benchmark_csv("id,score\na,1\n").is_err());
        assert!(parse_benchmark_csv("profile_id,score,source\na,1,x\na,2,x\n").is_err());
    }
}
