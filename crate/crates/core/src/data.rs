//! Datasets: the synthetic linear model, CSV ingestion, three-way splits and
//! a least-squares base regressor.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dp_tails::{GroupId, GroupedScores};
use crate::error::{Error, Result};

/// Ridge term added to the diagonal of the normal equations.
pub const RIDGE_JITTER: f64 = 1e-10;

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<String>,
    pub group: String,
    pub target: Option<String>,
}

impl Schema {
    /// A single `score` feature, as used for score-only input.
    pub fn scores(score: &str, group: &str, target: Option<&str>) -> Self {
        Self {
            features: vec![score.to_string()],
            group: group.to_string(),
            target: target.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub features: Vec<f64>,
    pub group: GroupId,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    feature_names: Vec<String>,
    rows: Vec<Row>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, rows: Vec<Row>) -> Result<Self> {
        let d = feature_names.len();
        for (i, r) in rows.iter().enumerate() {
            if r.features.len() != d {
                return Err(Error::MalformedRow {
                    row: i + 1,
                    message: format!("expected {d} features, found {}", r.features.len()),
                });
            }
            if let Some(v) = r.features.iter().chain(r.target.iter()).find(|v| !v.is_finite()) {
                return Err(Error::NonFinite { index: i, value: *v });
            }
        }
        Ok(Self { feature_names, rows })
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn groups(&self) -> BTreeSet<GroupId> {
        self.rows.iter().map(|r| r.group.clone()).collect()
    }

    pub fn has_targets(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.target.is_some())
    }

    fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Feature column `j` grouped by label, in row order.
    pub fn grouped_feature(&self, j: usize) -> Result<GroupedScores> {
        if j >= self.dim() {
            return Err(Error::param("feature", format!("index {j} out of range for {} features", self.dim())));
        }
        GroupedScores::from_pairs(self.rows.iter().map(|r| (r.group.clone(), r.features[j])))
    }

    /// Targets grouped by label, aligned with [`Dataset::grouped_feature`].
    pub fn grouped_targets(&self) -> Result<Option<GroupedScores>> {
        if !self.has_targets() {
            return Ok(None);
        }
        GroupedScores::from_pairs(self.rows.iter().map(|r| (r.group.clone(), r.target.unwrap_or_default()))).map(Some)
    }

    /// Writes feature columns, `group` and, when present, `target`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let with_target = self.has_targets();
        let mut header = self.feature_names.clone();
        header.push("group".into());
        if with_target {
            header.push("target".into());
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec: Vec<String> = r.features.iter().map(f64::to_string).collect();
            rec.push(r.group.to_string());
            if let (true, Some(t)) = (with_target, r.target) {
                rec.push(t.to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// `f*(x, s) = 3 (x1 + x2 + x3 + s)`.
pub fn synthetic_regression(x: &[f64; 3], s: u8) -> f64 {
    3.0 * (x[0] + x[1] + x[2] + f64::from(s))
}

/// `S = 0` if `x1 < 0`, else `1`.
pub fn synthetic_group(x1: f64) -> u8 {
    u8::from(x1 >= 0.0)
}

/// `n` draws of the synthetic model with unit noise.
pub fn generate_synthetic<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Dataset> {
    generate_synthetic_with_noise(n, 1.0, rng)
}

/// `X ~ N(0, I_3)`, `S = 1{x1 >= 0}`, `Y = f*(X, S) + noise_sd * N(0, 1)`.
pub fn generate_synthetic_with_noise<R: Rng + ?Sized>(n: usize, noise_sd: f64, rng: &mut R) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::param("n", "must be at least 1"));
    }
    if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
        return Err(Error::param("noise_sd", format!("must be finite and non-negative, got {noise_sd}")));
    }
    let rows = (0..n)
        .map(|_| {
            let x: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
            let s = synthetic_group(x[0]);
            let eps: f64 = StandardNormal.sample(rng);
            Row {
                features: x.to_vec(),
                group: GroupId::new(s.to_string()),
                target: Some(synthetic_regression(&x, s) + noise_sd * eps),
            }
        })
        .collect();
    Dataset::new(vec!["x1".into(), "x2".into(), "x3".into()], rows)
}

/// Reads a comma-separated file with a header row.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers()?.clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let feature_cols = schema.features.iter().map(|f| column(f)).collect::<Result<Vec<_>>>()?;
    let group_col = column(&schema.group)?;
    let target_col = schema.target.as_deref().map(column).transpose()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::MalformedRow {
            row,
            message: e.to_string(),
        })?;
        let number = |col: usize, name: &str| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    row,
                    column: name.to_string(),
                    value: raw.to_string(),
                }),
            }
        };
        let features = feature_cols
            .iter()
            .zip(&schema.features)
            .map(|(&c, name)| number(c, name))
            .collect::<Result<Vec<_>>>()?;
        let group = record.get(group_col).unwrap_or("");
        if group.is_empty() {
            return Err(Error::MalformedRow {
                row,
                message: format!("empty value in group column `{}`", schema.group),
            });
        }
        let target = match (target_col, &schema.target) {
            (Some(c), Some(name)) => Some(number(c, name)?),
            _ => None,
        };
        rows.push(Row {
            features,
            group: GroupId::new(group),
            target,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    Dataset::new(schema.features.clone(), rows)
}

/// Writes `group,score[,target]` rows.
pub fn write_scores_csv<W: Write>(scores: &GroupedScores, targets: Option<&GroupedScores>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if targets.is_some() {
        w.write_record(["group", "score", "target"])?;
    } else {
        w.write_record(["group", "score"])?;
    }
    for (g, values) in scores.iter() {
        let ys = match targets {
            Some(t) => {
                let ys = t.get(g).ok_or_else(|| Error::UnknownGroup(g.to_string()))?;
                if ys.len() != values.len() {
                    return Err(Error::LengthMismatch {
                        left: values.len(),
                        right: ys.len(),
                    });
                }
                Some(ys)
            }
            None => None,
        };
        for (i, v) in values.iter().enumerate() {
            match ys {
                Some(ys) => w.write_record([g.as_str(), &v.to_string(), &ys[i].to_string()])?,
                None => w.write_record([g.as_str(), &v.to_string()])?,
            }
        }
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Random disjoint split into train, calibration and test parts.
pub fn three_way_split<R: Rng + ?Sized>(ds: &Dataset, fractions: (f64, f64, f64), rng: &mut R) -> Result<(Dataset, Dataset, Dataset)> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
        return Err(Error::param("fractions", format!("each must lie in (0, 1), got ({a}, {b}, {c})")));
    }
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::param("fractions", format!("must sum to 1, got {}", a + b + c)));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_cal = ((b * n as f64).round() as usize).min(n - n_train);
    let parts = [
        ("train", ds.subset(&idx[..n_train])),
        ("calibration", ds.subset(&idx[n_train..n_train + n_cal])),
        ("test", ds.subset(&idx[n_train + n_cal..])),
    ];
    let all = ds.groups();
    for (name, part) in &parts {
        let present = part.groups();
        if let Some(g) = all.iter().find(|g| !present.contains(*g)) {
            return Err(Error::SplitMissingGroup {
                group: g.to_string(),
                part: name,
            });
        }
    }
    let [(_, train), (_, cal), (_, test)] = parts;
    Ok((train, cal, test))
}

/// Linear model on `[features, group indicators, 1]`; the first group label
/// is the reference level and has no indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub feature_coefficients: Vec<f64>,
    pub reference_group: GroupId,
    /// Indicator coefficients of the non-reference groups.
    pub group_coefficients: BTreeMap<GroupId, f64>,
    pub intercept: f64,
}

impl BaseModel {
    pub fn predict_row(&self, features: &[f64], group: &GroupId) -> Result<f64> {
        if features.len() != self.feature_coefficients.len() {
            return Err(Error::LengthMismatch {
                left: self.feature_coefficients.len(),
                right: features.len(),
            });
        }
        let shift = if *group == self.reference_group {
            0.0
        } else {
            *self
                .group_coefficients
                .get(group)
                .ok_or_else(|| Error::UnknownGroup(group.to_string()))?
        };
        let linear: f64 = self.feature_coefficients.iter().zip(features).map(|(b, x)| b * x).sum();
        Ok(linear + shift + self.intercept)
    }

    /// Row-order predictions.
    pub fn predict_rows(&self, ds: &Dataset) -> Result<Vec<f64>> {
        ds.rows().iter().map(|r| self.predict_row(&r.features, &r.group)).collect()
    }

    /// Predictions grouped by label, aligned with [`Dataset::grouped_targets`].
    pub fn predict(&self, ds: &Dataset) -> Result<GroupedScores> {
        let preds = self.predict_rows(ds)?;
        GroupedScores::from_pairs(ds.rows().iter().zip(preds).map(|(r, y)| (r.group.clone(), y)))
    }
}

fn design_row(features: &[f64], group: &GroupId, others: &[GroupId]) -> Vec<f64> {
    let mut x = features.to_vec();
    x.extend(others.iter().map(|g| if g == group { 1.0 } else { 0.0 }));
    x.push(1.0);
    x
}

/// Least squares via the ridge-jittered normal equations.
pub fn fit_ols(train: &Dataset) -> Result<BaseModel> {
    if !train.has_targets() {
        return Err(Error::param("train", "every row needs a target"));
    }
    let groups: Vec<GroupId> = train.groups().into_iter().collect();
    let (reference, others) = groups.split_first().ok_or(Error::EmptySample)?;
    let d = train.dim() + others.len() + 1;
    if train.len() <= train.dim() + 2 {
        return Err(Error::TooFewSamples {
            group: "train".into(),
            count: train.len(),
            required: train.dim() + 3,
        });
    }
    let rows: Vec<f64> = train
        .rows()
        .iter()
        .flat_map(|r| design_row(&r.features, &r.group, others))
        .collect();
    let x = DMatrix::from_row_slice(train.len(), d, &rows);
    let y = DVector::from_iterator(train.len(), train.rows().iter().map(|r| r.target.unwrap_or_default()));
    let mut gram = x.transpose() * &x;
    for i in 0..d {
        gram[(i, i)] += RIDGE_JITTER;
    }
    let chol = gram.clone().cholesky().ok_or(Error::RankDeficient)?;
    // a pivot on the order of the jitter means a column is a combination of others
    if (0..d).any(|i| chol.l_dirty()[(i, i)].powi(2) <= 10.0 * RIDGE_JITTER) {
        return Err(Error::RankDeficient);
    }
    let beta = chol.solve(&(x.transpose() * y));
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::RankDeficient);
    }
    let dim = train.dim();
    Ok(BaseModel {
        feature_coefficients: beta.as_slice()[..dim].to_vec(),
        reference_group: reference.clone(),
        group_coefficients: others.iter().cloned().zip(beta.as_slice()[dim..d - 1].iter().copied()).collect(),
        intercept: beta[d - 1],
    })
}
