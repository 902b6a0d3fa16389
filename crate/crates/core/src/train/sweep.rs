use std::io::Write;

use rayon::prelude::*;

use super::{evaluate, train, Metrics, PreparedData, TrainConfig, TrainError};
use crate::dataset::fmt_real;
use crate::earliness::{aggregate_earliness, PrefixSpec};
use crate::features::MtsSample;
use crate::model::{MdtConfig, MdtModel};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub prefix: PrefixSpec,
    /// Mean earliness over the test partition.
    pub mean_e: f64,
    pub mean_de: f64,
    pub metrics: Metrics,
}

/// One row per grid point, ordered by mean earliness.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record([
            "prefix",
            "mean_e",
            "mean_de",
            "accuracy",
            "macro_f1",
            "detection_rate",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.prefix.value().to_string(),
                fmt_real(r.mean_e),
                fmt_real(r.mean_de),
                fmt_real(r.metrics.accuracy),
                fmt_real(r.metrics.macro_f1),
                fmt_real(r.metrics.detection_rate),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains and tests one fresh model per grid point.
///
/// All points share the seed, so they share initial weights and, as the
/// labels do not depend on the prefix, the same split. Up to `jobs` points
/// run at once.
pub fn sweep(
    samples: &[MtsSample],
    config: &MdtConfig,
    tc: &TrainConfig,
    seed: u64,
    grid: &[PrefixSpec],
    jobs: usize,
) -> Result<SweepResult, TrainError> {
    if grid.is_empty() {
        return Err(TrainError::Invalid("sweep grid is empty".into()));
    }
    if let Some(p) = grid
        .iter()
        .find(|p| matches!(p, PrefixSpec::ByCount(n) if *n > config.max_len))
    {
        return Err(TrainError::Invalid(format!(
            "grid point {p} exceeds max_len {}",
            config.max_len
        )));
    }
    let point = |&prefix: &PrefixSpec| -> Result<SweepRow, TrainError> {
        let data = PreparedData::new(samples, prefix, config.max_len, None)?;
        let split = data.split(tc, seed);
        if split.test.is_empty() {
            return Err(TrainError::EmptySplit("test"));
        }
        let outcome = train(
            MdtModel::new(config.clone(), seed)?,
            &data,
            &split,
            tc,
            seed,
        )?;
        let metrics = evaluate(&outcome.model, &data, &split.test)?;
        let reports: Vec<_> = split.test.iter().map(|&i| data.reports[i]).collect();
        let (mean_e, mean_de) = aggregate_earliness(&reports)?;
        Ok(SweepRow {
            prefix,
            mean_e,
            mean_de,
            metrics,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let mut rows: Vec<SweepRow> =
        pool.install(|| grid.par_iter().map(point).collect::<Result<_, _>>())?;
    rows.sort_by(|a, b| {
        a.mean_e
            .total_cmp(&b.mean_e)
            .then(a.mean_de.total_cmp(&b.mean_de))
            .then(a.prefix.value().total_cmp(&b.prefix.value()))
    });
    Ok(SweepResult { rows })
}
