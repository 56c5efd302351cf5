use alloc::vec::Vec;

use super::{NetworkSpec, NetworkState, NormKind};
use crate::math;
use crate::tape::RowNorm;

/// `diag(gamma) x / sqrt(|x|^2 / N + eps)`.
pub fn rmsnorm_eps(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    RowNorm::Rms { gamma: gamma.to_vec(), eps }.apply(x)
}

/// RMS normalization after centering.
pub fn layernorm_eps(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    RowNorm::Layer { gamma: gamma.to_vec(), eps }.apply(x)
}

/// Certified global Lipschitz constant of a normalization map.
///
/// The eps-stabilized RMS/Layer norms have Jacobian spectral norm at most
/// `2 gamma_max / sqrt(eps)` everywhere; the frozen affine map is bounded by
/// its largest coefficient.
pub fn lipschitz_bound(norm: &RowNorm) -> f64 {
    match norm {
        RowNorm::Rms { gamma, eps } | RowNorm::Layer { gamma, eps } => {
            let gmax = gamma.iter().map(|&g| math::abs(g)).fold(0.0, f64::max);
            2.0 * gmax / math::sqrt(*eps)
        }
        RowNorm::Affine { scale, .. } => scale.iter().map(|&a| math::abs(a)).fold(0.0, f64::max),
    }
}

/// `c_l` for every residual layer.
pub fn norm_lipschitz_constants(spec: &NetworkSpec, state: &NetworkState) -> Vec<f64> {
    (0..spec.depth).map(|l| lipschitz_bound(&state.norm_map(spec, l))).collect()
}

/// Radius of the ball containing every output of layer `l`'s norm, given a
/// bound on its input. Eps-stabilized norms are input-independent.
pub(crate) fn output_bound(spec: &NetworkSpec, norm: &RowNorm, input_bound: f64) -> f64 {
    match (spec.norm_kind, norm) {
        (NormKind::FixedBatchnorm, RowNorm::Affine { scale, shift }) => {
            let amax = scale.iter().map(|&a| math::abs(a)).fold(0.0, f64::max);
            let shift_norm = math::sqrt(shift.iter().map(|s| s * s).sum());
            amax * input_bound + shift_norm
        }
        _ => spec.gamma_max() * math::sqrt(spec.width as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn unit_rms_is_fixed_point_as_eps_vanishes() {
        let y = rmsnorm_eps(&[1.0; 4], &[1.0; 4], 1e-300);
        assert!(y.iter().all(|v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn rms_hand_value() {
        // rms(3,4) = sqrt(12.5)
        let y = rmsnorm_eps(&[3.0, 4.0], &[1.0, 1.0], 1e-300);
        assert!((y[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y[1] - 1.131_370_849_898_476).abs() < 1e-12);
        let n = (y[0] * y[0] + y[1] * y[1]).sqrt();
        assert!((n - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_constants() {
        let rms = RowNorm::Rms { gamma: vec![1.0; 3], eps: 1e-4 };
        assert!((lipschitz_bound(&rms) - 200.0).abs() < 1e-9);
        let rms2 = RowNorm::Rms { gamma: vec![2.0, -1.0], eps: 4.0 };
        assert_eq!(lipschitz_bound(&rms2), 2.0);
        // frozen BN with gamma 1, var 3, eps 1 -> 1/2
        let bn = RowNorm::Affine { scale: vec![1.0 / (3.0f64 + 1.0).sqrt()], shift: vec![0.0] };
        assert_eq!(lipschitz_bound(&bn), 0.5);
    }

    #[test]
    fn layernorm_centers() {
        let y = layernorm_eps(&[1.0, 2.0, 3.0, 6.0], &[1.0; 4], 1e-12);
        assert!(y.iter().sum::<f64>().abs() < 1e-12);
    }
}
