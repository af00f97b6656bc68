//! Adaptive point-wise decoder.
//!
//! For every input image the decoder looks at the mean activation of each
//! encoder channel and decides whether that channel marks foreground (+1),
//! background (-1) or nothing useful (0). The saliency map is the ReLU of
//! the signed channel sum. Because the signs are recomputed per image, the
//! same kernel can count as foreground in one image and background in the
//! next.

use serde::{Deserialize, Serialize};

use crate::encoder::run_encoder;
use crate::error::{FlimError, Result};
use crate::model::{FlimModel, Heuristic};
use crate::tensor::{minmax_normalize_channels, ImageTensor};

/// Threshold on the mean activation used by the parasite heuristic.
pub const PARASITE_LAMBDA: f64 = 0.5;
/// Mean-activation band in which a low-contrast channel is neutralized.
pub const NEUTRAL_MEAN_BAND: (f64, f64) = (0.25, 0.75);
/// Channels whose activation std is below this are "mostly gray".
pub const NEUTRAL_MAX_STD: f64 = 0.1;

/// Per-channel statistics of min-max normalized activations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Mean of the channel means.
    pub mean_of_means: f64,
    /// Population standard deviation of the channel means.
    pub std_of_means: f64,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.means.len()
    }
}

/// Signs in `{-1, 0, +1}`, one per channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(pub Vec<i8>);

impl WeightVector {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|s| !(-1..=1).contains(s)) {
            return Err(FlimError::domain("decoder weights must be -1, 0 or +1"));
        }
        Ok(WeightVector(signs))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn negated(&self) -> WeightVector {
        WeightVector(self.0.iter().map(|s| -s).collect())
    }
}

/// Single-channel map, non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// 8-bit grayscale PNG with `round(255 * value)`.
    pub fn to_png(&self) -> Vec<u8> {
        crate::imageio::encode_gray_png(self.height, self.width, &self.values)
    }

    /// Maps values to `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> SaliencyMap {
        let lo = self.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = self.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let range = hi as f64 - lo as f64;
        let values = self
            .values
            .iter()
            .map(|&v| {
                if range > 0.0 {
                    ((v as f64 - lo as f64) / range).clamp(0.0, 1.0) as f32
                } else {
                    0.0
                }
            })
            .collect();
        SaliencyMap {
            height: self.height,
            width: self.width,
            values,
        }
    }
}

/// Mean and population std of every channel, then the mean and population
/// std of those means. Expects min-max normalized activations.
pub fn channel_stats(activations: &ImageTensor) -> ChannelStats {
    let c = activations.channels();
    let n = (activations.height() * activations.width()) as f64;
    let mut sum = vec![0f64; c];
    for px in activations.data().chunks_exact(c) {
        for (s, &v) in sum.iter_mut().zip(px) {
            *s += v as f64;
        }
    }
    let means: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mut var = vec![0f64; c];
    for px in activations.data().chunks_exact(c) {
        for b in 0..c {
            let d = px[b] as f64 - means[b];
            var[b] += d * d;
        }
    }
    let stds = var.iter().map(|v| (v / n).sqrt()).collect();
    let mean_of_means = means.iter().sum::<f64>() / c as f64;
    let std_of_means = (means
        .iter()
        .map(|m| (m - mean_of_means) * (m - mean_of_means))
        .sum::<f64>()
        / c as f64)
        .sqrt();
    ChannelStats {
        means,
        stds,
        mean_of_means,
        std_of_means,
    }
}

/// `+1` when the channel mean is at most `lambda`, `-1` otherwise.
pub fn adapt_weights_hp(stats: &ChannelStats, lambda: f64) -> WeightVector {
    WeightVector(
        stats
            .means
            .iter()
            .map(|&m| if m <= lambda { 1 } else { -1 })
            .collect(),
    )
}

/// Band heuristic: `+1` at or below `mean - std` of the channel means, `-1`
/// at or above `mean + std`, `0` in between. A channel whose mean lies in
/// `[0.25, 0.75]` with activation std below 0.1 is forced to `0`.
pub fn adapt_weights_hs(stats: &ChannelStats) -> WeightVector {
    let lower = stats.mean_of_means - stats.std_of_means;
    let upper = stats.mean_of_means + stats.std_of_means;
    WeightVector(
        stats
            .means
            .iter()
            .zip(&stats.stds)
            .map(|(&m, &s)| {
                let neutral = (NEUTRAL_MEAN_BAND.0..=NEUTRAL_MEAN_BAND.1).contains(&m)
                    && s < NEUTRAL_MAX_STD;
                if neutral {
                    0
                } else if m <= lower {
                    1
                } else if m >= upper {
                    -1
                } else {
                    0
                }
            })
            .collect(),
    )
}

pub fn adapt_weights(stats: &ChannelStats, heuristic: Heuristic) -> WeightVector {
    match heuristic {
        Heuristic::Parasite => adapt_weights_hp(stats, PARASITE_LAMBDA),
        Heuristic::Ship => adapt_weights_hs(stats),
    }
}

/// `relu(sum_b alpha_b * A_b)` before the final normalization.
pub fn decode_raw(activations: &ImageTensor, alpha: &WeightVector) -> Result<SaliencyMap> {
    let c = activations.channels();
    if alpha.len() != c {
        return Err(FlimError::domain(format!(
            "{} decoder weights for {c} channels",
            alpha.len()
        )));
    }
    let values = activations
        .data()
        .chunks_exact(c)
        .map(|px| {
            let s: f64 = px
                .iter()
                .zip(&alpha.0)
                .map(|(&v, &a)| a as f64 * v as f64)
                .sum();
            s.max(0.0) as f32
        })
        .collect();
    Ok(SaliencyMap {
        height: activations.height(),
        width: activations.width(),
        values,
    })
}

/// Signed point-wise combination followed by ReLU, scaled to `[0, 1]`.
pub fn decode(activations: &ImageTensor, alpha: &WeightVector) -> Result<SaliencyMap> {
    decode_raw(activations, alpha).map(|s| s.normalized())
}

/// Everything the decoder derived for one image.
#[derive(Debug, Clone)]
pub struct Decoded {
    /// Min-max normalized encoder output.
    pub activations: ImageTensor,
    pub stats: ChannelStats,
    pub alpha: WeightVector,
    pub saliency: SaliencyMap,
}

pub fn decode_activations(activations: &ImageTensor, heuristic: Heuristic) -> Result<Decoded> {
    let activations = minmax_normalize_channels(activations);
    let stats = channel_stats(&activations);
    let alpha = adapt_weights(&stats, heuristic);
    let saliency = decode(&activations, &alpha)?;
    Ok(Decoded {
        activations,
        stats,
        alpha,
        saliency,
    })
}

pub fn decode_image_detailed(image: &ImageTensor, model: &FlimModel, layer: usize) -> Result<Decoded> {
    let features = run_encoder(image, model, layer)?;
    decode_activations(&features, model.heuristic())
}

/// Saliency map at the output of encoder layer `layer` (1-based).
pub fn decode_image(image: &ImageTensor, model: &FlimModel, layer: usize) -> Result<SaliencyMap> {
    decode_image_detailed(image, model, layer).map(|d| d.saliency)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stats(means: Vec<f64>, stds: Vec<f64>) -> ChannelStats {
        let m = means.iter().sum::<f64>() / means.len() as f64;
        let s = (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / means.len() as f64).sqrt();
        ChannelStats {
            means,
            stds,
            mean_of_means: m,
            std_of_means: s,
        }
    }

    #[test]
    fn channel_stats_examples() {
        let t = ImageTensor::new(1, 2, 2, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let s = channel_stats(&t);
        assert_eq!(s.means, vec![0.0, 0.5]);
        assert_eq!(s.stds, vec![0.0, 0.5]);
        let one = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 0.25, 0.75]).unwrap();
        assert_eq!(channel_stats(&one).std_of_means, 0.0);
    }

    #[test]
    fn hp_examples() {
        let s = stats(vec![0.3, 0.7], vec![0.3, 0.3]);
        assert_eq!(adapt_weights_hp(&s, 0.5).0, vec![1, -1]);
        let s = stats(vec![0.5], vec![0.0]);
        assert_eq!(adapt_weights_hp(&s, 0.5).0, vec![1]);
    }

    #[test]
    fn hp_all_background_decodes_to_zero() {
        let t = ImageTensor::new(2, 2, 2, vec![1.0, 0.9, 0.8, 1.0, 0.6, 0.7, 1.0, 1.0]).unwrap();
        let s = channel_stats(&t);
        assert!(s.means.iter().all(|&m| m > 0.5));
        let a = adapt_weights_hp(&s, 0.5);
        assert_eq!(a.0, vec![-1, -1]);
        assert!(decode_raw(&t, &a).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hs_examples() {
        let s = stats(vec![0.1, 0.5, 0.9], vec![0.4, 0.4, 0.4]);
        assert!((s.std_of_means - 0.326_598_6).abs() < 1e-6);
        assert_eq!(adapt_weights_hs(&s).0, vec![1, 0, -1]);

        let s = stats(vec![0.1, 0.5, 0.9], vec![0.4, 0.05, 0.4]);
        assert_eq!(adapt_weights_hs(&s).0[1], 0);

        let s = stats(vec![0.9], vec![0.3]);
        assert_eq!(adapt_weights_hs(&s).0, vec![1]);
        let s = stats(vec![0.5], vec![0.05]);
        assert_eq!(adapt_weights_hs(&s).0, vec![0]);
    }

    #[test]
    fn neutral_override_beats_band() {
        // channel 0 would be +1 by the band rule but is flat gray
        let s = stats(vec![0.26, 0.9, 0.95, 0.92], vec![0.05, 0.3, 0.3, 0.3]);
        assert!(s.means[0] <= s.mean_of_means - s.std_of_means);
        assert_eq!(adapt_weights_hs(&s).0[0], 0);
    }

    #[test]
    fn decode_examples() {
        let t = ImageTensor::new(1, 3, 1, vec![0.2, 0.0, 0.6]).unwrap();
        assert_eq!(decode_raw(&t, &WeightVector(vec![1])).unwrap().values, t.data());

        let fg_bg = ImageTensor::new(1, 1, 2, vec![0.8, 0.5]).unwrap();
        let s = decode_raw(&fg_bg, &WeightVector(vec![1, -1])).unwrap();
        assert!((s.values[0] - 0.3).abs() < 1e-6);

        let zero = decode(&t, &WeightVector(vec![0])).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));

        assert!(decode(&t, &WeightVector(vec![1, 1])).is_err());
    }

    #[test]
    fn adaptivity_flips_sign_across_images() {
        // Kernel 0 covers a small spot in image A and most of image B.
        let a = ImageTensor::from_fn(8, 8, 1, |r, c, _| if r < 2 && c < 2 { 1.0 } else { 0.0 }).unwrap();
        let b = ImageTensor::from_fn(8, 8, 1, |r, c, _| if r < 2 && c < 2 { 0.0 } else { 1.0 }).unwrap();
        let sa = channel_stats(&minmax_normalize_channels(&a));
        let sb = channel_stats(&minmax_normalize_channels(&b));
        assert_eq!(adapt_weights_hp(&sa, 0.5).0, vec![1]);
        assert_eq!(adapt_weights_hp(&sb, 0.5).0, vec![-1]);
    }

    fn arb_acts() -> impl Strategy<Value = (ImageTensor, Vec<i8>)> {
        (1usize..6, 1usize..6, 1usize..5).prop_flat_map(|(h, w, c)| {
            (
                proptest::collection::vec(0.0f32..1.0, h * w * c),
                proptest::collection::vec(-1i8..=1, c),
            )
                .prop_map(move |(d, a)| (ImageTensor::new(h, w, c, d).unwrap(), a))
        })
    }

    proptest! {
        #[test]
        fn hp_matches_transliterated_rule(means in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let s = stats(means.clone(), vec![0.2; means.len()]);
            let a = adapt_weights_hp(&s, 0.5);
            for (m, sign) in means.iter().zip(&a.0) {
                let expected = if *m <= 0.5 { 1 } else { -1 };
                prop_assert_eq!(*sign, expected);
            }
        }

        #[test]
        fn sign_flip_and_linearity((t, alpha) in arb_acts()) {
            let alpha = WeightVector(alpha);
            let pos = decode_raw(&t, &alpha).unwrap();
            let neg = decode_raw(&t, &alpha.negated()).unwrap();
            let c = t.channels();
            for (i, px) in t.data().chunks_exact(c).enumerate() {
                let lin: f64 = px.iter().zip(&alpha.0).map(|(&v, &a)| a as f64 * v as f64).sum();
                prop_assert!((pos.values[i] as f64 - lin.max(0.0)).abs() < 1e-6);
                prop_assert!((neg.values[i] as f64 - (-lin).max(0.0)).abs() < 1e-6);
                prop_assert!(((pos.values[i] + neg.values[i]) as f64 - lin.abs()).abs() < 1e-6);
            }
            let s = decode(&t, &alpha).unwrap();
            prop_assert!(s.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn channel_permutation_invariance((t, alpha) in arb_acts(), rot in 0usize..5) {
            let c = t.channels();
            let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
            let tp = t.select_channels(&perm).unwrap();
            let ap = WeightVector(perm.iter().map(|&i| alpha[i]).collect());
            let a = decode_raw(&t, &WeightVector(alpha)).unwrap();
            let b = decode_raw(&tp, &ap).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn channel_stats_match_flat_loops(t in arb_acts().prop_map(|(t, _)| t)) {
            let s = channel_stats(&t);
            let n = (t.height() * t.width()) as f64;
            for b in 0..t.channels() {
                let ch: Vec<f64> = t.channel(b).iter().map(|&v| v as f64).collect();
                let m = ch.iter().sum::<f64>() / n;
                let sd = (ch.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
                prop_assert!((s.means[b] - m).abs() < 1e-6);
                prop_assert!((s.stds[b] - sd).abs() < 1e-6);
            }
        }
    }
}
