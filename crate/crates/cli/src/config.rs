//! Parsing of flag values that clap cannot handle on its own.

use anyhow::{bail, Context};
use dptails::Schema;

/// A real number or one of the sentinels `inf`, `+inf`, `-inf`.
pub fn parse_extended(s: &str) -> Result<f64, String> {
    match s.trim() {
        "inf" | "+inf" | "infinity" | "+infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        t => match t.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("`{s}` is not a number or one of inf, +inf, -inf")),
        },
    }
}

/// `a:b:step` (inclusive, ascending or descending) or a comma list that may
/// contain sentinels.
pub fn parse_alpha_grid(s: &str) -> anyhow::Result<Vec<f64>> {
    let s = s.trim();
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            bail!("alpha range must look like start:stop:step, got `{s}`");
        }
        let num = |x: &str| -> anyhow::Result<f64> {
            let v: f64 = x.trim().parse().with_context(|| format!("bad number `{x}` in alpha range"))?;
            if !v.is_finite() {
                bail!("alpha range bounds must be finite");
            }
            Ok(v)
        };
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?.abs());
        if step == 0.0 {
            bail!("alpha range step must be nonzero");
        }
        let count = ((b - a).abs() / step + 1e-9).floor() as usize;
        let dir = if b >= a { 1.0 } else { -1.0 };
        (0..=count).map(|k| a + dir * k as f64 * step).collect()
    } else {
        s.split(',')
            .map(|x| parse_extended(x).map_err(anyhow::Error::msg))
            .collect::<anyhow::Result<Vec<f64>>>()?
    };
    if grid.is_empty() {
        bail!("alpha grid is empty");
    }
    Ok(grid)
}

/// `score=COL,group=COL[,target=COL][,features=C1;C2]`.
///
/// Without `features`, the score column is the only feature.
pub fn parse_schema(s: &str) -> anyhow::Result<Schema> {
    let mut score = None;
    let mut group = None;
    let mut target = None;
    let mut features = None;
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .with_context(|| format!("schema entry `{item}` is not KEY=COLUMN"))?;
        let value = value.trim().to_string();
        match key.trim() {
            "score" => score = Some(value),
            "group" => group = Some(value),
            "target" => target = Some(value),
            "features" => features = Some(value.split(';').map(|c| c.trim().to_string()).collect::<Vec<_>>()),
            other => bail!("unknown schema key `{other}` (expected score, group, target or features)"),
        }
    }
    let group = group.context("schema needs group=COLUMN")?;
    let features = match (features, score) {
        (Some(f), None) => f,
        (None, Some(s)) => vec![s],
        (Some(_), Some(_)) => bail!("schema takes either score= or features=, not both"),
        (None, None) => bail!("schema needs score=COLUMN"),
    };
    Ok(Schema {
        features,
        group,
        target,
    })
}
