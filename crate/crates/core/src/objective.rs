//! SI-SDR, utterance-level permutation-invariant loss, and SI-SDR improvement.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::frames::Waveform;

/// Added to both the target and the error energy.
pub const SISDR_EPS: f64 = 1e-8;

/// Ceiling on reported SI-SDR, `10 log10(1 / SISDR_EPS)` dB.
pub const SISDR_CAP_DB: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SisdrValue {
    /// Decibels.
    pub value: f64,
    /// Set when the ratio reached [`SISDR_CAP_DB`], which is then the value.
    pub capped: bool,
}

/// `perm[c]` is the reference index assigned to estimate `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PermutationAssignment(pub Vec<usize>);

impl PermutationAssignment {
    pub fn identity(c: usize) -> Self {
        Self((0..c).collect())
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        self.0
            .iter()
            .all(|&r| r < seen.len() && !std::mem::replace(&mut seen[r], true))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitOutcome {
    /// Negative mean SI-SDR under the chosen assignment (lower is better).
    pub loss: f64,
    pub assignment: PermutationAssignment,
}

struct Parts {
    alpha: f64,
    target: f64,
    error: f64,
}

fn parts(est: &[f64], reference: &[f64]) -> Result<Parts> {
    if est.len() != reference.len() {
        return Err(Error::dim("sisdr", format!("length {}", reference.len()), est.len()));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("sisdr"));
    }
    let ref_energy: f64 = reference.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::InvalidArgument("sisdr: reference is all zeros".into()));
    }
    let dot: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
    let alpha = dot / ref_energy;
    let error = est.iter().zip(reference).map(|(e, s)| (e - alpha * s).powi(2)).sum();
    Ok(Parts {
        alpha,
        target: alpha * alpha * ref_energy,
        error,
    })
}

fn value_of(p: &Parts) -> SisdrValue {
    let raw = 10.0 * ((p.target + SISDR_EPS) / (p.error + SISDR_EPS)).log10();
    SisdrValue {
        value: raw.min(SISDR_CAP_DB),
        capped: raw >= SISDR_CAP_DB,
    }
}

pub fn sisdr(est: &Waveform, reference: &Waveform) -> Result<SisdrValue> {
    sisdr_slices(&est.samples, &reference.samples)
}

pub fn sisdr_slices(est: &[f64], reference: &[f64]) -> Result<SisdrValue> {
    Ok(value_of(&parts(est, reference)?))
}

/// SI-SDR together with its gradient with respect to `est` (zero when capped).
pub fn sisdr_with_grad(est: &[f64], reference: &[f64]) -> Result<(SisdrValue, Vec<f64>)> {
    let p = parts(est, reference)?;
    let v = value_of(&p);
    if v.capped {
        return Ok((v, vec![0.0; est.len()]));
    }
    let k = 10.0 / std::f64::consts::LN_10;
    let a = 2.0 * p.alpha / (p.target + SISDR_EPS);
    let b = 2.0 / (p.error + SISDR_EPS);
    let grad = est
        .iter()
        .zip(reference)
        .map(|(&e, &s)| k * (a * s - b * (e - p.alpha * s)))
        .collect();
    Ok((v, grad))
}

fn check_sets(ests: &[Waveform], refs: &[Waveform]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::EmptyInput("pit_loss"));
    }
    if ests.len() != refs.len() {
        return Err(Error::dim("pit_loss", format!("{} estimates", refs.len()), ests.len()));
    }
    Ok(())
}

/// Exhaustive search over all `C!` assignments of estimates to references.
/// Ties go to the lexicographically smallest permutation.
pub fn pit_loss(ests: &[Waveform], refs: &[Waveform]) -> Result<PitOutcome> {
    check_sets(ests, refs)?;
    let c = refs.len();
    let mut table = vec![0.0; c * c];
    for (i, e) in ests.iter().enumerate() {
        for (j, r) in refs.iter().enumerate() {
            table[i * c + j] = sisdr(e, r)?.value;
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..c).permutations(c) {
        let loss = -perm.iter().enumerate().map(|(i, &j)| table[i * c + j]).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(b, _)| loss < *b) {
            best = Some((loss, perm));
        }
    }
    let (loss, perm) = best.expect("at least one permutation");
    Ok(PitOutcome {
        loss,
        assignment: PermutationAssignment(perm),
    })
}

/// Loss under a fixed assignment.
pub fn assigned_loss(ests: &[Waveform], refs: &[Waveform], assignment: &PermutationAssignment) -> Result<f64> {
    check_sets(ests, refs)?;
    let mut total = 0.0;
    for (e, &j) in ests.iter().zip(&assignment.0) {
        total += sisdr(e, &refs[j])?.value;
    }
    Ok(-total / refs.len() as f64)
}

/// PIT loss and its gradient with respect to every estimate, holding the
/// chosen assignment fixed.
pub fn pit_loss_with_grad(ests: &[Waveform], refs: &[Waveform]) -> Result<(PitOutcome, Vec<Vec<f64>>)> {
    let outcome = pit_loss(ests, refs)?;
    let scale = -1.0 / refs.len() as f64;
    let grads = ests
        .iter()
        .zip(&outcome.assignment.0)
        .map(|(e, &j)| {
            let (_, mut g) = sisdr_with_grad(&e.samples, &refs[j].samples)?;
            g.iter_mut().for_each(|v| *v *= scale);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((outcome, grads))
}

/// SI-SDR improvement of `est` over the unprocessed `mixture`.
pub fn delta_sisdr(est: &Waveform, reference: &Waveform, mixture: &Waveform) -> Result<f64> {
    Ok(sisdr(est, reference)?.value - sisdr(mixture, reference)?.value)
}
