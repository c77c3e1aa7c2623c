//! Guidance functions mapping colors to the grid's value axis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::Rgb;

/// Rec. 601 luma weights.
pub const LUMINANCE_WEIGHTS: Rgb = [0.299, 0.587, 0.114];

pub const MLP_HIDDEN: usize = 8;

/// Scalar guidance `g(C) ∈ [0, 1]` used to select the value axis of a grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GuidanceFn {
    #[default]
    Luminance,
    Mlp(MlpGuidance),
}

impl GuidanceFn {
    pub fn guide(&self, c: Rgb) -> f64 {
        match self {
            GuidanceFn::Luminance => luminance(c).clamp(0.0, 1.0),
            GuidanceFn::Mlp(mlp) => mlp.forward(c),
        }
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        match self {
            GuidanceFn::Luminance => 0,
            GuidanceFn::Mlp(_) => MlpGuidance::PARAM_COUNT,
        }
    }

    /// Backpropagates `upstream = dL/dg`. Parameter gradients are accumulated
    /// into `param_grad` (length [`param_count`](Self::param_count)); the
    /// color gradient is returned.
    pub fn backward(&self, c: Rgb, upstream: f64, param_grad: &mut [f64]) -> Rgb {
        match self {
            GuidanceFn::Luminance => {
                let y = luminance(c);
                if upstream == 0.0 || !(0.0..=1.0).contains(&y) {
                    return [0.0; 3];
                }
                LUMINANCE_WEIGHTS.map(|w| w * upstream)
            }
            GuidanceFn::Mlp(mlp) => mlp.backward(c, upstream, param_grad),
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match self {
            GuidanceFn::Luminance => Vec::new(),
            GuidanceFn::Mlp(mlp) => mlp.to_params(),
        }
    }

    pub fn set_params(&mut self, params: &[f64]) {
        if let GuidanceFn::Mlp(mlp) = self {
            *mlp = MlpGuidance::from_params(params);
        }
    }
}

#[inline]
pub fn luminance(c: Rgb) -> f64 {
    LUMINANCE_WEIGHTS[0] * c[0] + LUMINANCE_WEIGHTS[1] * c[1] + LUMINANCE_WEIGHTS[2] * c[2]
}

/// Two-layer perceptron `tanh(2·(W2·ReLU(W1·C + b1) + b2)) / 2 + 0.5`.
///
/// Fit on the edited view only, so that colors with equal luminance but
/// different hue can be routed to different grid slices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpGuidance {
    pub w1: [[f64; 3]; MLP_HIDDEN],
    pub b1: [f64; MLP_HIDDEN],
    pub w2: [f64; MLP_HIDDEN],
    pub b2: f64,
}

impl MlpGuidance {
    pub const PARAM_COUNT: usize = MLP_HIDDEN * 3 + MLP_HIDDEN + MLP_HIDDEN + 1;

    pub fn zeros() -> Self {
        Self {
            w1: [[0.0; 3]; MLP_HIDDEN],
            b1: [0.0; MLP_HIDDEN],
            w2: [0.0; MLP_HIDDEN],
            b2: 0.0,
        }
    }

    /// `W1 ~ U(-0.1, 0.1)`, everything else zero: the output starts as the
    /// constant 0.5 plane.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Self::zeros();
        for row in mlp.w1.iter_mut() {
            for w in row.iter_mut() {
                *w = rng.gen_range(-0.1..0.1);
            }
        }
        mlp
    }

    fn hidden(&self, c: Rgb) -> [f64; MLP_HIDDEN] {
        let mut h = [0.0; MLP_HIDDEN];
        for (k, hk) in h.iter_mut().enumerate() {
            let w = &self.w1[k];
            *hk = w[0] * c[0] + w[1] * c[1] + w[2] * c[2] + self.b1[k];
        }
        h
    }

    pub fn forward(&self, c: Rgb) -> f64 {
        let pre = self.hidden(c);
        let s = pre
            .iter()
            .zip(&self.w2)
            .map(|(&p, &w)| p.max(0.0) * w)
            .sum::<f64>()
            + self.b2;
        (2.0 * s).tanh() / 2.0 + 0.5
    }

    pub fn backward(&self, c: Rgb, upstream: f64, param_grad: &mut [f64]) -> Rgb {
        debug_assert_eq!(param_grad.len(), Self::PARAM_COUNT);
        if upstream == 0.0 {
            return [0.0; 3];
        }
        let pre = self.hidden(c);
        let s = pre
            .iter()
            .zip(&self.w2)
            .map(|(&p, &w)| p.max(0.0) * w)
            .sum::<f64>()
            + self.b2;
        let th = (2.0 * s).tanh();
        let ds = upstream * (1.0 - th * th);

        let (gw1, rest) = param_grad.split_at_mut(MLP_HIDDEN * 3);
        let (gb1, rest) = rest.split_at_mut(MLP_HIDDEN);
        let (gw2, gb2) = rest.split_at_mut(MLP_HIDDEN);
        gb2[0] += ds;
        let mut dc = [0.0; 3];
        for k in 0..MLP_HIDDEN {
            if pre[k] <= 0.0 {
                continue;
            }
            gw2[k] += ds * pre[k];
            let dpre = ds * self.w2[k];
            gb1[k] += dpre;
            for ch in 0..3 {
                gw1[k * 3 + ch] += dpre * c[ch];
                dc[ch] += dpre * self.w1[k][ch];
            }
        }
        dc
    }

    /// Flattened as `W1` (row-major), `b1`, `W2`, `b2`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(Self::PARAM_COUNT);
        p.extend(self.w1.iter().flatten());
        p.extend(&self.b1);
        p.extend(&self.w2);
        p.push(self.b2);
        p
    }

    pub fn from_params(p: &[f64]) -> Self {
        assert_eq!(p.len(), Self::PARAM_COUNT, "MLP guidance expects {} parameters", Self::PARAM_COUNT);
        let mut mlp = Self::zeros();
        for k in 0..MLP_HIDDEN {
            mlp.w1[k].copy_from_slice(&p[k * 3..k * 3 + 3]);
        }
        let o = MLP_HIDDEN * 3;
        mlp.b1.copy_from_slice(&p[o..o + MLP_HIDDEN]);
        mlp.w2.copy_from_slice(&p[o + MLP_HIDDEN..o + 2 * MLP_HIDDEN]);
        mlp.b2 = p[Self::PARAM_COUNT - 1];
        mlp
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::check_gradients;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn luminance_of_white_is_one() {
        let g = GuidanceFn::Luminance.guide([1.0, 1.0, 1.0]);
        assert!((g - 1.0).abs() < 1e-15);
        assert_eq!(GuidanceFn::Luminance.guide([0.0; 3]), 0.0);
    }

    #[test]
    fn luminance_clamps_out_of_gamut() {
        assert_eq!(GuidanceFn::Luminance.guide([2.0, 2.0, 2.0]), 1.0);
        assert_eq!(GuidanceFn::Luminance.guide([-1.0, 0.0, 0.0]), 0.0);
        let mut none = [];
        assert_eq!(GuidanceFn::Luminance.backward([2.0, 2.0, 2.0], 1.0, &mut none), [0.0; 3]);
    }

    #[test]
    fn zero_network_is_half() {
        let g = GuidanceFn::Mlp(MlpGuidance::zeros());
        for c in [[0.0, 0.0, 0.0], [0.3, 0.9, 0.1], [5.0, -3.0, 1.0]] {
            assert_eq!(g.guide(c), 0.5);
        }
    }

    #[test]
    fn init_starts_at_half_plane() {
        let g = GuidanceFn::Mlp(MlpGuidance::init(7));
        assert_eq!(g.guide([0.2, 0.4, 0.6]), 0.5);
    }

    #[test]
    fn zero_network_bias_derivative_is_one() {
        let mlp = MlpGuidance::zeros();
        let mut grad = vec![0.0; MlpGuidance::PARAM_COUNT];
        mlp.backward([0.3, 0.3, 0.3], 1.0, &mut grad);
        assert_eq!(grad[MlpGuidance::PARAM_COUNT - 1], 1.0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mlp = MlpGuidance::init(3);
        let mut grad = vec![0.0; MlpGuidance::PARAM_COUNT];
        let dc = mlp.backward([0.1, 0.7, 0.2], 0.0, &mut grad);
        assert_eq!(dc, [0.0; 3]);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p: Vec<f64> = (0..MlpGuidance::PARAM_COUNT).map(|_| rng.gen()).collect();
        assert_eq!(MlpGuidance::from_params(&p).to_params(), p);
    }

    fn random_mlp(rng: &mut ChaCha8Rng) -> MlpGuidance {
        let p: Vec<f64> = (0..MlpGuidance::PARAM_COUNT)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        MlpGuidance::from_params(&p)
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let mlp = random_mlp(&mut rng);
            let c: Rgb = [rng.gen(), rng.gen(), rng.gen()];
            let up = rng.gen_range(-2.0..2.0);
            // skip ReLU kinks
            if mlp.hidden(c).iter().any(|p| p.abs() < 1e-3) {
                continue;
            }
            let mut grad = vec![0.0; MlpGuidance::PARAM_COUNT];
            let dc = mlp.backward(c, up, &mut grad);

            let params = mlp.to_params();
            let report = check_gradients(
                |p| up * MlpGuidance::from_params(p).forward(c),
                &params,
                &grad,
                1e-4,
            );
            assert!(report.max_rel_error < 1e-4, "{report:?}");

            let report = check_gradients(
                |x| up * mlp.forward([x[0], x[1], x[2]]),
                &c,
                &dc,
                1e-4,
            );
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    proptest! {
        #[test]
        fn guidance_stays_in_unit_interval(
            c in prop::array::uniform3(-10.0f64..10.0),
            seed in 0u64..1000,
            scale in 0.0f64..50.0,
        ) {
            let lum = GuidanceFn::Luminance.guide(c);
            prop_assert!((0.0..=1.0).contains(&lum));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..MlpGuidance::PARAM_COUNT)
                .map(|_| scale * rng.gen_range(-1.0..1.0))
                .collect();
            let g = GuidanceFn::Mlp(MlpGuidance::from_params(&p)).guide(c);
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn luminance_is_linear_in_gamut(
            a in prop::array::uniform3(0.0f64..0.5),
            b in prop::array::uniform3(0.0f64..0.5),
        ) {
            let sum = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
            let lhs = GuidanceFn::Luminance.guide(sum);
            let rhs = GuidanceFn::Luminance.guide(a) + GuidanceFn::Luminance.guide(b);
            prop_assert!((lhs - rhs).abs() < 1e-14);
        }
    }
}
