use std::path::Path;

use rayon::prelude::*;

use crate::dtcn::SeparatorModel;
use crate::error::{Error, Result};
use crate::mixsim::MixtureExample;
use crate::objective::{delta_sisdr, pit_loss, sisdr};

/// Per-example evaluation, with estimates aligned to references by PIT.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    /// Negative mean SI-SDR over speakers (dB).
    pub loss: f64,
    /// SI-SDR of the estimate assigned to each reference.
    pub sisdr: Vec<f64>,
    /// Improvement over the mixture for each reference.
    pub delta: Vec<f64>,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_delta: f64,
    pub mean_loss: f64,
    pub std_delta: f64,
    pub min_delta: f64,
    pub max_delta: f64,
}

pub(crate) fn evaluate_estimates(
    index: usize,
    ex: &MixtureExample,
    ests: &[crate::frames::Waveform],
) -> Result<EvalRow> {
    let out = pit_loss(ests, &ex.direct_targets)?;
    let c = ex.direct_targets.len();
    let mut sis = vec![0.0; c];
    let mut delta = vec![0.0; c];
    for (e, &r) in out.assignment.0.iter().enumerate() {
        let reference = &ex.direct_targets[r];
        sis[r] = sisdr(&ests[e], reference)?.value;
        delta[r] = delta_sisdr(&ests[e], reference, &ex.mixture)?;
    }
    let mean_delta = delta.iter().sum::<f64>() / c as f64;
    Ok(EvalRow {
        index,
        loss: out.loss,
        sisdr: sis,
        delta,
        mean_delta,
    })
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyInput("evaluate"));
        }
        let n = rows.len() as f64;
        let mean_delta = rows.iter().map(|r| r.mean_delta).sum::<f64>() / n;
        let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r.mean_delta - mean_delta).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean_delta,
            mean_loss,
            std_delta: var.sqrt(),
            min_delta: rows.iter().map(|r| r.mean_delta).fold(f64::INFINITY, f64::min),
            max_delta: rows.iter().map(|r| r.mean_delta).fold(f64::NEG_INFINITY, f64::max),
            rows,
        })
    }

    /// Header `index,loss,sisdr_1..C,delta_1..C,mean_delta`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let c = self.rows[0].sisdr.len();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["index".to_string(), "loss".to_string()];
        header.extend((1..=c).map(|i| format!("sisdr_{i}")));
        header.extend((1..=c).map(|i| format!("delta_{i}")));
        header.push("mean_delta".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            let mut rec = vec![r.index.to_string(), r.loss.to_string()];
            rec.extend(r.sisdr.iter().map(f64::to_string));
            rec.extend(r.delta.iter().map(f64::to_string));
            rec.push(r.mean_delta.to_string());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{}: csv error {other:?}", path.display())),
    }
}

/// PIT-aligned SI-SDR and ΔSISDR for every example, in input order.
pub fn evaluate(model: &SeparatorModel, examples: &[MixtureExample]) -> Result<EvalReport> {
    let rows = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| evaluate_estimates(i, ex, &model.separate(&ex.mixture)?))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixsim::{simulate_manifest, SimConfig};

    #[test]
    fn oracle_rows_are_capped() {
        let m = simulate_manifest(
            &SimConfig {
                count: 3,
                length: 1000,
                ..SimConfig::default()
            },
            2,
        )
        .unwrap();
        let ex = m.realize_all().unwrap();
        let rows: Vec<EvalRow> = ex
            .iter()
            .enumerate()
            .map(|(i, e)| evaluate_estimates(i, e, &e.direct_targets).unwrap())
            .collect();
        for (r, e) in rows.iter().zip(&ex) {
            for (c, s) in r.sisdr.iter().enumerate() {
                assert_eq!(*s, sisdr(&e.direct_targets[c], &e.direct_targets[c]).unwrap().value);
                assert!(*s > 60.0);
            }
        }
        let report = EvalReport::from_rows(rows).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(EvalReport::from_rows(Vec::new()).is_err());
    }
}
