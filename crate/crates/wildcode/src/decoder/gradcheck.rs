//! Finite-difference validation of the analytic gradients.

use super::model::{loss_and_grad, rot_predictions, teacher_forced_loss};
use super::{DecoderError, TrainState};
use crate::codec::HybridTokenStream;
use crate::rot::{matrix_from_row_major, orthogonalize_grad_well_conditioned};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Singular-value separation below which a sample is excluded from checking
/// (the orthogonalization differential is ill-conditioned there).
pub const DEGENERACY_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all probed parameters.
    pub max_rel_err: f64,
    /// Number of parameters probed.
    pub probes: usize,
    /// True when the sample was skipped because a rotation prediction sits
    /// too close to an SVD degeneracy for finite differences to be trusted.
    pub sample_degenerate: bool,
}

/// Compares analytic gradients of the total teacher-forced loss against
/// central finite differences at `probes` random parameters.
///
/// Relative error uses an absolute floor of 1e-6: components where both the
/// analytic and numeric gradient are below the floor compare as equal.
pub fn grad_check(
    state: &TrainState,
    features: &[f32],
    stream: &HybridTokenStream,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheckReport, DecoderError> {
    for pred9 in rot_predictions(state, features, stream)? {
        let m = matrix_from_row_major(&pred9);
        if !orthogonalize_grad_well_conditioned(&m, DEGENERACY_MARGIN) {
            return Ok(GradCheckReport {
                max_rel_err: 0.0,
                probes: 0,
                sample_degenerate: true,
            });
        }
    }

    let (_, grads) = loss_and_grad(state, features, stream)?;
    let mut probe_state = state.clone();
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..probes {
        let i = rng.gen_range(0..probe_state.params.len());
        let orig = probe_state.params[i];
        let h = 1e-5 * orig.abs().max(1.0);
        probe_state.params[i] = orig + h;
        let plus = teacher_forced_loss(&probe_state, features, stream)?.total;
        probe_state.params[i] = orig - h;
        let minus = teacher_forced_loss(&probe_state, features, stream)?.total;
        probe_state.params[i] = orig;
        let fd = (plus - minus) / (2.0 * h);
        let denom = fd.abs().max(grads[i].abs()).max(1e-6);
        let rel = (fd - grads[i]).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        probes,
        sample_degenerate: false,
    })
}
