//! Offset study: capture every block's offsets on an evaluation set, average
//! them per utterance, pick the block with the highest offset variance and
//! correlate its mean offsets across kernel positions.

mod plant;

pub use plant::{planted_means, planted_traces, TARGET_CORRELATIONS};

use std::path::Path;

use rayon::prelude::*;

use crate::dtcn::SeparatorModel;
use crate::error::{Error, Result};
use crate::frames::Waveform;
use crate::numcore::Tensor;

/// Offsets `[L_x, P]` of one block for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetTrace {
    /// Block index in execution order, from 0.
    pub block: usize,
    pub tau: Tensor,
}

/// Separation output together with the offsets that produced it.
#[derive(Debug, Clone)]
pub struct Capture {
    pub estimates: Vec<Waveform>,
    /// One trace per block, in execution order.
    pub traces: Vec<OffsetTrace>,
}

/// Runs one forward pass and records the offset field of every block.
pub fn capture_offsets(model: &SeparatorModel, x: &Waveform) -> Result<Capture> {
    if !model.config.deformable {
        return Err(Error::InvalidArgument("offset capture needs a deformable model".into()));
    }
    let pass = model.forward(x)?;
    let traces = pass
        .cache
        .offsets()
        .enumerate()
        .map(|(block, f)| {
            let f = f.expect("deformable model caches offsets for every block");
            OffsetTrace {
                block,
                tau: f.tau.clone(),
            }
        })
        .collect();
    Ok(Capture {
        estimates: pass.estimates,
        traces,
    })
}

/// Traces for every mixture, outer index over utterances.
pub fn capture_set(model: &SeparatorModel, mixtures: &[&Waveform]) -> Result<Vec<Vec<OffsetTrace>>> {
    mixtures
        .par_iter()
        .map(|x| capture_offsets(model, x).map(|c| c.traces))
        .collect()
}

/// Mean offset of each kernel position over the frames of one trace.
pub fn utterance_means(trace: &OffsetTrace) -> Result<Vec<f64>> {
    let (frames, taps) = trace.tau.dims2()?;
    if frames == 0 || taps == 0 {
        return Err(Error::EmptyInput("utterance_means"));
    }
    let mut means = vec![0.0; taps];
    for l in 0..frames {
        for (m, v) in means.iter_mut().zip(trace.tau.row(l)) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= frames as f64);
    Ok(means)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    pub block: usize,
    /// Mean offset per kernel position.
    pub means: Vec<f64>,
    /// Population variance over all `(frame, position)` entries.
    pub variance: f64,
}

impl BlockStats {
    pub fn of(trace: &OffsetTrace) -> Result<Self> {
        let means = utterance_means(trace)?;
        let data = trace.tau.data();
        let mu = data.iter().sum::<f64>() / data.len() as f64;
        let variance = data.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / data.len() as f64;
        Ok(Self {
            block: trace.block,
            means,
            variance,
        })
    }
}

/// Per-utterance stats for every block, outer index over utterances.
pub fn block_stats(traces: &[Vec<OffsetTrace>]) -> Result<Vec<Vec<BlockStats>>> {
    traces
        .par_iter()
        .map(|utt| utt.iter().map(BlockStats::of).collect())
        .collect()
}

// Summing in sorted order makes the result independent of utterance order.
fn order_free_mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_blocks(stats: &[Vec<BlockStats>]) -> Result<usize> {
    let first = stats.first().ok_or(Error::EmptyInput("select_block"))?;
    if first.is_empty() {
        return Err(Error::EmptyInput("select_block"));
    }
    for utt in stats {
        if utt.len() != first.len() || utt.iter().zip(first).any(|(a, b)| a.block != b.block) {
            return Err(Error::dim(
                "select_block",
                format!("{} blocks per utterance", first.len()),
                utt.len(),
            ));
        }
    }
    Ok(first.len())
}

/// Averages per-utterance stats over the evaluation set, one entry per block.
pub fn summarize_blocks(stats: &[Vec<BlockStats>]) -> Result<Vec<BlockStats>> {
    let nb = check_blocks(stats)?;
    (0..nb)
        .map(|b| {
            let taps = stats[0][b].means.len();
            let means = (0..taps)
                .map(|p| order_free_mean(stats.iter().map(|u| u[b].means[p]).collect()))
                .collect();
            Ok(BlockStats {
                block: stats[0][b].block,
                means,
                variance: order_free_mean(stats.iter().map(|u| u[b].variance).collect()),
            })
        })
        .collect()
}

/// Block with the highest offset variance averaged over utterances; ties go
/// to the lowest block index.
pub fn select_block(stats: &[Vec<BlockStats>]) -> Result<usize> {
    let summary = summarize_blocks(stats)?;
    let mut best = &summary[0];
    for s in &summary[1..] {
        if s.variance > best.variance {
            best = s;
        }
    }
    Ok(best.block)
}

fn moments(a: &[f64], b: &[f64]) -> Result<(f64, f64, f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::dim("pearson", format!("length {}", a.len()), b.len()));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pearson: need at least 2 samples, got {}",
            a.len()
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((ma, mb, sab, saa, sbb))
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let (_, _, sab, saa, sbb) = moments(a, b)?;
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean offsets of kernel positions `p` and `q` (from 0) across utterances,
/// with their correlation and the least-squares line `tau_q = slope * tau_p + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterTable {
    pub p: usize,
    pub q: usize,
    /// `(tau_p, tau_q)` per utterance.
    pub rows: Vec<(f64, f64)>,
    pub rho: f64,
    pub slope: f64,
    pub intercept: f64,
}

pub fn export_scatter(means: &[Vec<f64>], p: usize, q: usize) -> Result<ScatterTable> {
    let col = |k: usize| -> Result<Vec<f64>> {
        means
            .iter()
            .map(|m| {
                m.get(k)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("export_scatter: position {k} out of range")))
            })
            .collect()
    };
    let (a, b) = (col(p)?, col(q)?);
    let rho = pearson(&a, &b)?;
    let (ma, mb, sab, saa, _) = moments(&a, &b)?;
    let slope = sab / saa;
    Ok(ScatterTable {
        p,
        q,
        rows: a.into_iter().zip(b).collect(),
        rho,
        slope,
        intercept: mb - slope * ma,
    })
}

impl ScatterTable {
    /// Header `utterance,tau_<p>,tau_<q>,rho,slope,intercept` with kernel
    /// positions numbered from 1; the last three columns repeat on every row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = [
            "utterance".to_string(),
            format!("tau_{}", self.p + 1),
            format!("tau_{}", self.q + 1),
            "rho".into(),
            "slope".into(),
            "intercept".into(),
        ];
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (i, (x, y)) in self.rows.iter().enumerate() {
            w.write_record([
                i.to_string(),
                x.to_string(),
                y.to_string(),
                self.rho.to_string(),
                self.slope.to_string(),
                self.intercept.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
        let pos = |h: &str| -> Result<usize> {
            h.strip_prefix("tau_")
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&v| v > 0)
                .map(|v| v - 1)
                .ok_or_else(|| corrupt(path, format!("bad column {h}")))
        };
        if header.len() != 6 {
            return Err(corrupt(path, "expected 6 columns".into()));
        }
        let (p, q) = (pos(&header[1])?, pos(&header[2])?);
        let mut table = ScatterTable {
            p,
            q,
            rows: Vec::new(),
            rho: f64::NAN,
            slope: f64::NAN,
            intercept: f64::NAN,
        };
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let v = parse_fields(path, &rec, 1)?;
            table.rows.push((v[0], v[1]));
            (table.rho, table.slope, table.intercept) = (v[2], v[3], v[4]);
        }
        Ok(table)
    }
}

/// Writes `block,variance,tau_1..P`, one row per block.
pub fn write_block_stats(path: &Path, summary: &[BlockStats]) -> Result<()> {
    let taps = summary.first().map_or(0, |s| s.means.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["block".to_string(), "variance".to_string()];
    header.extend((1..=taps).map(|p| format!("tau_{p}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in summary {
        let mut rec = vec![s.block.to_string(), s.variance.to_string()];
        rec.extend(s.means.iter().map(f64::to_string));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_block_stats(path: &Path) -> Result<Vec<BlockStats>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let block = rec
            .get(0)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt(path, "bad block index".into()))?;
        let v = parse_fields(path, &rec, 1)?;
        out.push(BlockStats {
            block,
            variance: v[0],
            means: v[1..].to_vec(),
        });
    }
    Ok(out)
}

fn parse_fields(path: &Path, rec: &csv::StringRecord, skip: usize) -> Result<Vec<f64>> {
    rec.iter()
        .skip(skip)
        .map(|f| f.parse::<f64>().map_err(|_| corrupt(path, format!("bad number {f}"))))
        .collect()
}

fn corrupt(path: &Path, reason: String) -> Error {
    Error::Corrupt {
        path: path.into(),
        reason,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    crate::trainer::csv_err(path, e)
}

/// Everything the offset study reports for one model and evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetStudy {
    /// Per-block averages over utterances.
    pub summary: Vec<BlockStats>,
    pub selected: usize,
    /// One table per pair of kernel positions `p < q` of the selected block.
    pub scatters: Vec<ScatterTable>,
}

/// Block selection followed by pairwise scatter export for the chosen block.
pub fn offset_study(traces: &[Vec<OffsetTrace>]) -> Result<OffsetStudy> {
    let stats = block_stats(traces)?;
    let summary = summarize_blocks(&stats)?;
    let selected = select_block(&stats)?;
    let slot = summary
        .iter()
        .position(|s| s.block == selected)
        .expect("selected block is summarized");
    let means: Vec<Vec<f64>> = stats.iter().map(|u| u[slot].means.clone()).collect();
    let taps = means[0].len();
    let mut scatters = Vec::new();
    for p in 0..taps {
        for q in p + 1..taps {
            scatters.push(export_scatter(&means, p, q)?);
        }
    }
    Ok(OffsetStudy {
        summary,
        selected,
        scatters,
    })
}
