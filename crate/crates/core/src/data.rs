//! Datasets, CSV ingestion, synthetic generators, and minibatch scheduling.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::models::{
    sigmoid, BradleyTerryModel, LinearGaussianModel, LogisticRegressionModel, Match, MulticlassLogisticModel,
};
use crate::rng::{draw_standard_normal, RngStream};
use crate::types::dot;

/// Row-major feature matrix with one scalar label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub feature_names: Vec<String>,
    pub label_name: String,
    /// `N × p`, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
    pub standardized: bool,
    /// Ground-truth latent for synthetic data.
    pub truth: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Vec<f64>, labels: Vec<f64>, p: usize) -> Result<Self> {
        if p == 0 || labels.is_empty() || features.len() != labels.len() * p {
            return Err(invalid("dataset: features must be N × p with N, p ≥ 1"));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self {
            name: name.into(),
            feature_names: (0..p).map(|j| format!("x{j}")).collect(),
            label_name: "y".into(),
            features,
            labels,
            standardized: false,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let p = self.num_features();
        &self.features[n * p..(n + 1) * p]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|n| self.row(n)[j]).collect()
    }

    /// Per-column z-scoring with the population variance. Constant columns
    /// are centered only.
    pub fn standardize(&mut self) {
        let p = self.num_features();
        let nn = self.len() as f64;
        for j in 0..p {
            let col = self.column(j);
            let mean = col.iter().sum::<f64>() / nn;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nn;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for n in 0..self.len() {
                let x = &mut self.features[n * p + j];
                *x = (*x - mean) / scale;
            }
        }
        self.standardized = true;
    }

    /// Appends a constant-one column.
    pub fn with_intercept(mut self) -> Self {
        let p = self.num_features();
        let mut f = Vec::with_capacity(self.len() * (p + 1));
        for n in 0..self.len() {
            f.extend_from_slice(&self.features[n * p..(n + 1) * p]);
            f.push(1.0);
        }
        self.features = f;
        self.feature_names.push("intercept".into());
        self
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.feature_names.clone();
        header.push(self.label_name.clone());
        w.write_record(&header)?;
        for n in 0..self.len() {
            let mut rec: Vec<String> = self.row(n).iter().map(|v| format!("{v}")).collect();
            rec.push(format!("{}", self.labels[n]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn to_logistic(&self) -> Result<LogisticRegressionModel> {
        LogisticRegressionModel::new(self.features.clone(), self.labels.clone(), self.num_features())
    }

    pub fn to_multiclass(&self, classes: usize) -> Result<MulticlassLogisticModel> {
        let labels = self
            .labels
            .iter()
            .map(|&y| {
                if y >= 0.0 && y.fract() == 0.0 {
                    Ok(y as usize)
                } else {
                    Err(invalid(format!("multiclass label {y} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        MulticlassLogisticModel::new(self.features.clone(), labels, self.num_features(), classes)
    }

    /// Expects two feature columns holding player indices.
    pub fn to_bradley_terry(&self, players: usize) -> Result<BradleyTerryModel> {
        if self.num_features() != 2 {
            return Err(invalid("bradley-terry data needs columns player_a, player_b"));
        }
        let as_index = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(invalid(format!("player index {v} is not a non-negative integer")))
            }
        };
        let matches = (0..self.len())
            .map(|n| {
                Ok(Match {
                    player_a: as_index(self.row(n)[0])?,
                    player_b: as_index(self.row(n)[1])?,
                    outcome: self.labels[n],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BradleyTerryModel::new(matches, players)
    }

    pub fn to_linear_gaussian(&self, noise_var: f64) -> Result<LinearGaussianModel> {
        LinearGaussianModel::new(self.features.clone(), self.labels.clone(), self.num_features(), noise_var)
    }
}

/// Parses CSV with a header row. Every column other than `label_column` is a
/// numeric feature.
pub fn read_csv<R: Read>(input: R, label_column: &str, standardize: bool, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("label column '{label_column}' not found")))?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    if feature_names.is_empty() {
        return Err(invalid("no feature columns"));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = row + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            column: String::new(),
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        for (i, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell).map_err(|message| Error::Parse {
                line,
                column: header[i].clone(),
                message,
            })?;
            if i == label_idx {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let mut ds = Dataset::new(name, features, labels, feature_names.len())?;
    ds.feature_names = feature_names;
    ds.label_name = label_column.to_string();
    if standardize {
        ds.standardize();
    }
    Ok(ds)
}

fn parse_cell(cell: &str) -> std::result::Result<f64, String> {
    if cell.is_empty() {
        return Err("missing value".into());
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(_) => Err(format!("non-finite value '{cell}'")),
        Err(_) => Err(format!("non-numeric value '{cell}'")),
    }
}

pub fn load_csv(path: impl AsRef<Path>, label_column: &str, standardize: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    read_csv(std::io::BufReader::new(file), label_column, standardize, name)
}

/// Standard-normal features, standard-normal true weights, Bernoulli labels.
pub fn synth_logistic(n: usize, p: usize, seed: u64) -> Result<Dataset> {
    let root = RngStream::new(seed, 0).named("synth-logistic");
    let features = root.child(0).standard_normal(n * p)?;
    let truth = root.child(1).standard_normal(p)?;
    let mut rng = root.child(2).rng();
    let labels = (0..n)
        .map(|i| {
            let s = sigmoid(dot(&features[i * p..(i + 1) * p], &truth));
            (rng.random::<f64>() < s) as u8 as f64
        })
        .collect();
    let mut ds = Dataset::new("synthetic-logistic", features, labels, p)?;
    ds.truth = Some(truth);
    Ok(ds)
}

/// Softmax labels from standard-normal class weights (class-major latent).
pub fn synth_multiclass(n: usize, p: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("multiclass needs at least two classes"));
    }
    let root = RngStream::new(seed, 0).named("synth-multiclass");
    let features = root.child(0).standard_normal(n * p)?;
    let truth = root.child(1).standard_normal(p * classes)?;
    let mut rng = root.child(2).rng();
    let labels = (0..n)
        .map(|i| {
            let x = &features[i * p..(i + 1) * p];
            let logits: Vec<f64> = (0..classes).map(|k| dot(x, &truth[k * p..(k + 1) * p])).collect();
            sample_softmax(&logits, rng.random::<f64>()) as f64
        })
        .collect();
    let mut ds = Dataset::new("synthetic-multiclass", features, labels, p)?;
    ds.truth = Some(truth);
    Ok(ds)
}

pub(crate) fn sample_softmax(logits: &[f64], u: f64) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut acc = 0.0;
    for (k, wk) in w.iter().enumerate() {
        acc += wk / total;
        if u < acc {
            return k;
        }
    }
    w.len() - 1
}

/// Matches between uniformly drawn distinct players with standard-normal scores.
pub fn synth_bradley_terry(n_matches: usize, players: usize, seed: u64) -> Result<Dataset> {
    let scores = RngStream::new(seed, 0).named("synth-bt-scores").standard_normal(players)?;
    synth_bradley_terry_with_scores(n_matches, &scores, seed)
}

pub fn synth_bradley_terry_with_scores(n_matches: usize, scores: &[f64], seed: u64) -> Result<Dataset> {
    let players = scores.len();
    if players < 2 || n_matches == 0 {
        return Err(invalid("bradley-terry needs two players and one match"));
    }
    let mut rng = RngStream::new(seed, 0).named("synth-bt-matches").rng();
    let mut features = Vec::with_capacity(2 * n_matches);
    let mut labels = Vec::with_capacity(n_matches);
    for _ in 0..n_matches {
        let a = rng.random_range(0..players);
        let mut b = rng.random_range(0..players - 1);
        if b >= a {
            b += 1;
        }
        let s = sigmoid(scores[a] - scores[b]);
        features.push(a as f64);
        features.push(b as f64);
        labels.push((rng.random::<f64>() < s) as u8 as f64);
    }
    let mut ds = Dataset::new("synthetic-bradley-terry", features, labels, 2)?;
    ds.feature_names = vec!["player_a".into(), "player_b".into()];
    ds.label_name = "outcome".into();
    ds.truth = Some(scores.to_vec());
    Ok(ds)
}

/// `y = xᵀ z + τ ξ` with standard-normal `x`, `z`, `ξ`. `τ` is the noise
/// standard deviation.
pub fn synth_linear_gaussian(n: usize, d: usize, tau: f64, seed: u64) -> Result<Dataset> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(invalid("noise scale must be non-negative"));
    }
    let root = RngStream::new(seed, 0).named("synth-linear-gaussian");
    let features = root.child(0).standard_normal(n * d)?;
    let truth = root.child(1).standard_normal(d)?;
    let noise = root.child(2).standard_normal(n)?;
    let labels = (0..n)
        .map(|i| dot(&features[i * d..(i + 1) * d], &truth) + tau * noise[i])
        .collect();
    let mut ds = Dataset::new("synthetic-linear-gaussian", features, labels, d)?;
    ds.truth = Some(truth);
    Ok(ds)
}

/// Epoch-reshuffled minibatches without replacement.
///
/// Invariant: within an epoch every index appears in exactly one batch.
/// Epoch `e` uses the permutation drawn from `stream.child(e)`.
#[derive(Debug, Clone)]
pub struct MinibatchSchedule {
    n: usize,
    batch_size: usize,
    stream: RngStream,
    perm: Vec<usize>,
    cursor: usize,
    epoch: u64,
    completed: u64,
}

impl MinibatchSchedule {
    pub fn new(n: usize, batch_size: usize, stream: RngStream) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(invalid("schedule needs N ≥ 1 and batch size ≥ 1"));
        }
        let mut s = Self {
            n,
            batch_size,
            stream,
            perm: Vec::new(),
            cursor: 0,
            epoch: 0,
            completed: 0,
        };
        s.perm = s.permutation(0);
        Ok(s)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut p: Vec<usize> = (0..self.n).collect();
        p.shuffle(&mut self.stream.child(epoch).rng());
        p
    }

    /// The next `min(|B|, remaining)` indices of the current epoch.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor == self.n {
            self.epoch += 1;
            self.perm = self.permutation(self.epoch);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.n);
        let batch = self.perm[self.cursor..end].to_vec();
        self.cursor = end;
        if self.cursor == self.n {
            self.completed += 1;
        }
        batch
    }

    /// Number of epochs whose last batch has been handed out.
    pub fn epochs_completed(&self) -> u64 {
        self.completed
    }

    /// Fractional epochs consumed so far.
    pub fn epoch_progress(&self) -> f64 {
        if self.cursor == self.n {
            self.completed as f64
        } else {
            self.epoch as f64 + self.cursor as f64 / self.n as f64
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_data(&self) -> usize {
        self.n
    }

    pub fn current_permutation(&self) -> &[usize] {
        &self.perm
    }
}

/// Draws `d` standard normals for an iteration's noise from its own stream.
pub fn iteration_noise(stream: &RngStream, iteration: u64, d: usize) -> Result<Vec<f64>> {
    draw_standard_normal(&mut stream.child(iteration).rng(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn parses_known_values() {
        let csv = "a,b,y\n1,2,0\n3.5,-4,1\n0,1e-3,1\n";
        let ds = read_csv(csv.as_bytes(), "y", false, "t").unwrap();
        assert_eq!(ds.features, vec![1.0, 2.0, 3.5, -4.0, 0.0, 1e-3]);
        assert_eq!(ds.labels, vec![0.0, 1.0, 1.0]);
        assert_eq!(ds.feature_names, vec!["a", "b"]);
    }

    #[test]
    fn label_column_may_be_anywhere() {
        let ds = read_csv("y,a\n1,5\n0,6\n".as_bytes(), "y", false, "t").unwrap();
        assert_eq!(ds.features, vec![5.0, 6.0]);
        assert_eq!(ds.labels, vec![1.0, 0.0]);
    }

    #[test]
    fn standardizes_with_population_variance() {
        let ds = read_csv("a,c,y\n1,7,0\n2,7,0\n3,7,1\n".as_bytes(), "y", true, "t").unwrap();
        let col = ds.column(0);
        let expected = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in col.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(ds.column(1), vec![0.0; 3]);
        assert!(ds.standardized);
    }

    #[test]
    fn standardized_columns_have_unit_variance() {
        let mut ds = synth_logistic(200, 4, 3).unwrap();
        for v in ds.features.iter_mut() {
            *v = 3.0 * *v + 2.0;
        }
        ds.standardize();
        for j in 0..4 {
            let c = ds.column(j);
            let m = c.iter().sum::<f64>() / 200.0;
            let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() <= 1e-10);
            assert!((v - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn non_numeric_cell_names_line_and_column() {
        let err = read_csv("a,b,y\n1,2,0\n1,oops,1\n".as_bytes(), "y", false, "t").unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_and_missing_labels_are_errors() {
        assert!(matches!(
            read_csv("a,y\n1,2\n1\n".as_bytes(), "y", false, "t"),
            Err(Error::Parse { line: 3, .. })
        ));
        assert!(matches!(read_csv("a,b\n1,2\n".as_bytes(), "y", false, "t"), Err(Error::Config(_))));
        assert!(matches!(
            read_csv("a,y\n1,\n".as_bytes(), "y", false, "t"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let ds = synth_linear_gaussian(17, 3, 0.4, 5).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), "y", false, "synthetic-linear-gaussian").unwrap();
        for (a, b) in ds.features.iter().chain(&ds.labels).zip(back.features.iter().chain(&back.labels)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn synthetic_generators_are_deterministic() {
        assert_eq!(synth_logistic(30, 3, 7).unwrap(), synth_logistic(30, 3, 7).unwrap());
        assert_ne!(synth_logistic(30, 3, 7).unwrap(), synth_logistic(30, 3, 8).unwrap());
        assert_eq!(synth_bradley_terry(30, 5, 7).unwrap(), synth_bradley_terry(30, 5, 7).unwrap());
        assert_eq!(synth_multiclass(30, 3, 4, 7).unwrap(), synth_multiclass(30, 3, 4, 7).unwrap());
    }

    #[test]
    fn bradley_terry_equal_scores_are_fair() {
        let n = 100_000;
        let ds = synth_bradley_terry_with_scores(n, &[0.0; 4], 11).unwrap();
        let wins: f64 = ds.labels.iter().sum();
        let rate = wins / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((rate - 0.5).abs() < 4.0 * se);
        assert!((0..n).all(|i| ds.row(i)[0] != ds.row(i)[1]));
    }

    #[test]
    fn noiseless_linear_gaussian() {
        let ds = synth_linear_gaussian(20, 4, 0.0, 2).unwrap();
        let z = ds.truth.clone().unwrap();
        for n in 0..20 {
            assert!((ds.labels[n] - dot(ds.row(n), &z)).abs() <= 1e-8);
        }
    }

    #[test]
    fn batches_cover_each_epoch() {
        let mut s = MinibatchSchedule::new(10, 5, RngStream::new(1, 0)).unwrap();
        let a = s.next_batch();
        let b = s.next_batch();
        assert_eq!((a.len(), b.len()), (5, 5));
        let all: HashSet<usize> = a.iter().chain(&b).cloned().collect();
        assert_eq!(all, (0..10).collect());
        assert_eq!(s.epochs_completed(), 1);
    }

    #[test]
    fn remainder_batch() {
        let mut s = MinibatchSchedule::new(7, 5, RngStream::new(2, 0)).unwrap();
        assert_eq!(s.next_batch().len(), 5);
        assert_eq!(s.next_batch().len(), 2);
        assert_eq!(s.next_batch().len(), 5);
        assert_eq!(s.batches_per_epoch(), 2);
    }

    #[test]
    fn permutations_are_reproducible_and_reshuffled() {
        let run = || {
            let mut s = MinibatchSchedule::new(12, 4, RngStream::new(3, 9)).unwrap();
            (0..6).flat_map(|_| s.next_batch()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert_ne!(a[..12], a[12..]);
    }

    #[test]
    fn coverage_over_many_epochs() {
        let mut s = MinibatchSchedule::new(13, 4, RngStream::new(4, 0)).unwrap();
        let mut counts = [0usize; 13];
        while s.epochs_completed() < 5 {
            for i in s.next_batch() {
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c == 5));
    }

    #[test]
    fn dataset_to_models() {
        let bt = synth_bradley_terry(50, 6, 1).unwrap();
        assert_eq!(crate::Model::dim(&bt.to_bradley_terry(6).unwrap()), 6);
        let mc = synth_multiclass(20, 3, 4, 1).unwrap();
        assert_eq!(crate::Model::dim(&mc.to_multiclass(4).unwrap()), 12);
    }
}
