//! The end-to-end experiment: base regressor on a training part, fair
//! post-processing fitted on a calibration part, metrics on a test part.

use dptails::data::{fit_ols, generate_synthetic_with_noise, synthetic_regression, three_way_split, Dataset};
use dptails::p_optimizer::fit_optimized;
use dptails::seed::{derive_seed, stream, Purpose};
use dptails::{fit, DpTailsParams, GroupId, GroupedScores, Method, MetricsReport, PObjectiveReport, Result};

/// Split fractions applied to loaded datasets: 20% test, then 70/30 of the rest.
pub const SPLIT: (f64, f64, f64) = (0.56, 0.24, 0.20);

/// Where the base scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaseLearner {
    /// Least squares on features and group indicators.
    #[default]
    Ols,
    /// The synthetic model's true regression function.
    TrueRegression,
}

#[derive(Debug, Clone)]
pub enum Source {
    /// Independent draws of the synthetic model for each part.
    Synthetic {
        train: usize,
        calibration: usize,
        test: usize,
        base: BaseLearner,
    },
    /// A loaded dataset, split with [`SPLIT`]. Without targets its first
    /// feature is taken as the base score.
    Dataset(Dataset),
}

/// Base scores on the calibration and test parts.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub calibration: GroupedScores,
    pub test: GroupedScores,
    pub test_targets: Option<GroupedScores>,
}

fn true_scores(ds: &Dataset) -> Result<GroupedScores> {
    GroupedScores::from_pairs(ds.rows().iter().map(|r| {
        let x = [r.features[0], r.features[1], r.features[2]];
        let s = u8::from(r.group.as_str() == "1");
        (r.group.clone(), synthetic_regression(&x, s))
    }))
}

fn base_scores(train: &Dataset, parts: [&Dataset; 2], base: BaseLearner) -> Result<[GroupedScores; 2]> {
    match base {
        BaseLearner::Ols if train.has_targets() => {
            let model = fit_ols(train)?;
            Ok([model.predict(parts[0])?, model.predict(parts[1])?])
        }
        BaseLearner::Ols => Ok([parts[0].grouped_feature(0)?, parts[1].grouped_feature(0)?]),
        BaseLearner::TrueRegression => Ok([true_scores(parts[0])?, true_scores(parts[1])?]),
    }
}

/// Generates or splits the data for one repetition and computes base scores.
pub fn prepare(source: &Source, seed: u64) -> Result<Prepared> {
    let (train, cal, test, base) = match source {
        Source::Synthetic {
            train,
            calibration,
            test,
            base,
        } => {
            let draw = |label: &str, n: usize| generate_synthetic_with_noise(n, 1.0, &mut stream(seed, Purpose::Data, label, 0));
            (draw("train", *train)?, draw("calibration", *calibration)?, draw("test", *test)?, *base)
        }
        Source::Dataset(ds) => {
            let (a, b, c) = three_way_split(ds, SPLIT, &mut stream(seed, Purpose::Split, "three-way", 0))?;
            (a, b, c, BaseLearner::Ols)
        }
    };
    let [calibration, test_scores] = base_scores(&train, [&cal, &test], base)?;
    Ok(Prepared {
        calibration,
        test: test_scores,
        test_targets: test.grouped_targets()?,
    })
}

/// Post-processing settings for one cell; `p = None` optimizes `p`.
#[derive(Debug, Clone, Copy)]
pub struct CellConfig {
    pub alpha: f64,
    pub p: Option<f64>,
    pub xi: f64,
    pub sigma: f64,
    pub method: Method,
}

impl CellConfig {
    /// Parameters with `p` resolved for the `alpha` sentinels.
    pub fn params(&self, p: f64) -> DpTailsParams {
        let p = if self.alpha == f64::INFINITY {
            1.0
        } else if self.alpha == f64::NEG_INFINITY {
            0.0
        } else {
            p
        };
        DpTailsParams::new(self.alpha, p).with_xi(self.xi).with_sigma(self.sigma)
    }
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub predictions: GroupedScores,
    pub params: DpTailsParams,
    pub optimization: Option<PObjectiveReport>,
}

/// Fits on the calibration part and transforms the test part. `alpha = +inf`
/// returns the base scores unchanged.
pub fn post_process(prepared: &Prepared, cfg: &CellConfig, seed: u64) -> Result<CellOutcome> {
    if cfg.alpha == f64::INFINITY {
        let params = cfg.params(1.0);
        params.validate()?;
        return Ok(CellOutcome {
            predictions: prepared.test.clone(),
            params,
            optimization: None,
        });
    }
    let (fitted, optimization) = match cfg.p {
        Some(p) => (fit(&prepared.calibration, &cfg.params(p), seed)?, None),
        None if cfg.alpha == f64::NEG_INFINITY => (fit(&prepared.calibration, &cfg.params(0.0), seed)?, None),
        None => {
            let (f, r) = fit_optimized(&prepared.calibration, &cfg.params(0.0), cfg.method, seed)?;
            (f, Some(r))
        }
    };
    Ok(CellOutcome {
        predictions: fitted.transform_batch(&prepared.test, seed)?,
        params: *fitted.params(),
        optimization,
    })
}

/// [`post_process`] followed by evaluation on the test part.
pub fn run_cell(prepared: &Prepared, cfg: &CellConfig, seed: u64) -> Result<MetricsReport> {
    let out = post_process(prepared, cfg, seed)?;
    MetricsReport::compute(&out.predictions, prepared.test_targets.as_ref(), &out.params, seed)
}

/// Seed of repetition `rep` under `master`.
pub fn repetition_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, Purpose::Data, "repetition", rep as u64)
}

/// Proportion of each group in `scores`, for diagnostics.
pub fn proportions(scores: &GroupedScores) -> Vec<(GroupId, f64)> {
    let n = scores.total() as f64;
    scores.labels().map(|g| (g.clone(), scores.count(g) as f64 / n)).collect()
}
