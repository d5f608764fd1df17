//! Cross-attention time alignment in the latent space.
//!
//! Near-end and far-end latents (channels x frames x features) are
//! projected by point-wise convolutions to `H` similarity channels. The
//! far-end projection is unfolded along time into `d_max` delayed copies
//! (delay column 0 is lag 0; frames before the stream start are zero), a
//! per-channel dot product over the feature axis scores every
//! (frame, delay) pair, and a small causal convolution over (time x delay)
//! collapses the channels into one score map. A softmax along the delay
//! axis turns that into a per-frame delay probability distribution, and
//! the aligned far-end features are the probability-weighted sum of the
//! delayed copies.
//!
//! Everything here is causal: frame `t` of either output depends only on
//! inputs at frames `<= t`. The streaming variant keeps a ring of the last
//! `d_max` far-end projections and the last few dot-product maps, and is
//! bit-identical to the batch path.

use std::collections::VecDeque;

use crate::tensor::{LatentTensor, Tensor2};
use crate::{Error, Result};

/// Default maximum delay in frames (1.024 s of span at a 16 ms hop).
pub const DEFAULT_D_MAX: usize = 64;

/// Learnable parameters of the alignment block. The score kernel is laid
/// out `[channel][time_tap][delay_tap]` with causal time taps (tap `i`
/// reads `i` frames into the past) and centered delay taps.
#[derive(Debug, Clone, PartialEq)]
pub struct TaWeights {
    pub ne_weight: Tensor2,
    pub ne_bias: Vec<f64>,
    pub fe_weight: Tensor2,
    pub fe_bias: Vec<f64>,
    pub score_kernel: Vec<f64>,
    pub score_bias: f64,
    pub time_taps: usize,
    pub delay_taps: usize,
}

impl TaWeights {
    pub fn zeros(in_channels: usize, similarity_channels: usize) -> Self {
        let (l, h) = (in_channels, similarity_channels);
        Self {
            ne_weight: Tensor2::zeros(h, l),
            ne_bias: vec![0.0; h],
            fe_weight: Tensor2::zeros(h, l),
            fe_bias: vec![0.0; h],
            score_kernel: vec![0.0; h * 5 * 3],
            score_bias: 0.0,
            time_taps: 5,
            delay_taps: 3,
        }
    }

    /// Identity configuration: both projections pass the first
    /// `min(L, H)` channels through unchanged and the score kernel
    /// averages the similarity channels at lag (0, 0).
    pub fn identity(in_channels: usize, similarity_channels: usize) -> Self {
        let mut w = Self::zeros(in_channels, similarity_channels);
        for h in 0..similarity_channels.min(in_channels) {
            *w.ne_weight.at_mut(h, h) = 1.0;
            *w.fe_weight.at_mut(h, h) = 1.0;
        }
        let center = w.delay_taps / 2;
        for h in 0..similarity_channels {
            w.score_kernel[(h * w.time_taps) * w.delay_taps + center] =
                1.0 / similarity_channels as f64;
        }
        w
    }

    pub fn in_channels(&self) -> usize {
        self.ne_weight.cols
    }

    pub fn similarity_channels(&self) -> usize {
        self.ne_weight.rows
    }

    #[inline]
    fn kernel_at(&self, h: usize, i: usize, j: usize) -> f64 {
        self.score_kernel[(h * self.time_taps + i) * self.delay_taps + j]
    }

    #[inline]
    fn kernel_at_mut(&mut self, h: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.score_kernel[(h * self.time_taps + i) * self.delay_taps + j]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.similarity_channels();
        if self.fe_weight.rows != h || self.fe_weight.cols != self.in_channels() {
            return Err(Error::Shape("ta: fe projection shape differs from ne".into()));
        }
        if self.ne_bias.len() != h || self.fe_bias.len() != h {
            return Err(Error::Shape("ta: bias length does not match channels".into()));
        }
        if self.time_taps == 0 || self.delay_taps == 0 || self.delay_taps % 2 == 0 {
            return Err(Error::Config(format!(
                "ta: kernel {}x{} must have positive taps and odd delay taps",
                self.time_taps, self.delay_taps
            )));
        }
        if self.score_kernel.len() != h * self.time_taps * self.delay_taps {
            return Err(Error::Shape("ta: score kernel length mismatch".into()));
        }
        Ok(())
    }
}

/// Per-frame delay probabilities, frames x delays. Delay column `d`
/// corresponds to a lag of `d` frames (column 0 = lag 0), and every row
/// sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayDistribution {
    pub data: Tensor2,
}

impl DelayDistribution {
    pub fn frames(&self) -> usize {
        self.data.rows
    }

    pub fn delays(&self) -> usize {
        self.data.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.data.row(t)
    }

    /// Mean probability per delay over frames `[skip, frames)`.
    pub fn time_average(&self, skip: usize) -> Vec<f64> {
        let mut avg = vec![0.0; self.delays()];
        let rows = self.frames().saturating_sub(skip);
        if rows == 0 {
            return avg;
        }
        for t in skip..self.frames() {
            for (d, a) in avg.iter_mut().enumerate() {
                *a += self.data.at(t, d);
            }
        }
        for a in &mut avg {
            *a /= rows as f64;
        }
        avg
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_deviation(&self) -> f64 {
        (0..self.frames())
            .map(|t| (self.row(t).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

fn pointwise(input: &LatentTensor, weight: &Tensor2, bias: &[f64]) -> LatentTensor {
    let mut out = LatentTensor::zeros(weight.rows, input.frames, input.features);
    for h in 0..weight.rows {
        for t in 0..input.frames {
            for p in 0..input.features {
                let mut acc = bias[h];
                for l in 0..weight.cols {
                    acc += weight.at(h, l) * input.at(l, t, p);
                }
                *out.at_mut(h, t, p) = acc;
            }
        }
    }
    out
}

/// Intermediate activations kept for the backward pass.
pub struct TaCache {
    pub ne_proj: LatentTensor,
    pub fe_proj: LatentTensor,
    /// Dot-product map, channels x frames x delays.
    pub dot: LatentTensor,
    pub dist: DelayDistribution,
    pub d_max: usize,
}

/// Gradients of a scalar loss with respect to both inputs and all weights
/// (weight-shaped container).
pub struct TaGradients {
    pub ne: LatentTensor,
    pub fe: LatentTensor,
    pub weights: TaWeights,
}

fn check_forward_inputs(
    ne: &LatentTensor,
    fe: &LatentTensor,
    w: &TaWeights,
    d_max: usize,
) -> Result<()> {
    w.validate()?;
    if d_max == 0 {
        return Err(Error::Config("ta: d_max must be >= 1".into()));
    }
    if ne.channels != fe.channels || ne.frames != fe.frames || ne.features != fe.features {
        return Err(Error::Shape(format!(
            "ta: ne {}x{}x{} and fe {}x{}x{} differ",
            ne.channels, ne.frames, ne.features, fe.channels, fe.frames, fe.features
        )));
    }
    if ne.channels != w.in_channels() {
        return Err(Error::Shape(format!(
            "ta: input has {} channels, projection expects {}",
            ne.channels,
            w.in_channels()
        )));
    }
    Ok(())
}

/// Batch forward pass: aligned far-end latents (similarity channels x
/// frames x features) and the delay distribution.
pub fn ta_forward(
    ne: &LatentTensor,
    fe: &LatentTensor,
    w: &TaWeights,
    d_max: usize,
) -> Result<(LatentTensor, DelayDistribution)> {
    ta_forward_cached(ne, fe, w, d_max).map(|(a, d, _)| (a, d))
}

/// Forward pass that also returns the activation cache for
/// [`ta_backward`].
pub fn ta_forward_cached(
    ne: &LatentTensor,
    fe: &LatentTensor,
    w: &TaWeights,
    d_max: usize,
) -> Result<(LatentTensor, DelayDistribution, TaCache)> {
    check_forward_inputs(ne, fe, w, d_max)?;
    let h_ch = w.similarity_channels();
    let (frames, feats) = (ne.frames, ne.features);
    let n = pointwise(ne, &w.ne_weight, &w.ne_bias);
    let f = pointwise(fe, &w.fe_weight, &w.fe_bias);

    // Dot product over features for every (channel, frame, delay).
    let mut dot = LatentTensor::zeros(h_ch, frames, d_max);
    for h in 0..h_ch {
        for t in 0..frames {
            for d in 0..d_max.min(t + 1) {
                let mut acc = 0.0;
                for p in 0..feats {
                    acc += n.at(h, t, p) * f.at(h, t - d, p);
                }
                *dot.at_mut(h, t, d) = acc;
            }
        }
    }

    // Causal (time) x centered (delay) convolution collapsing channels,
    // then softmax along delay.
    let center = w.delay_taps / 2;
    let mut dist = Tensor2::zeros(frames, d_max);
    let mut scores = vec![0.0f64; d_max];
    for t in 0..frames {
        for (d, s) in scores.iter_mut().enumerate() {
            let mut acc = w.score_bias;
            for h in 0..h_ch {
                for i in 0..w.time_taps.min(t + 1) {
                    for j in 0..w.delay_taps {
                        let dd = d + j;
                        if dd < center || dd - center >= d_max {
                            continue;
                        }
                        acc += w.kernel_at(h, i, j) * dot.at(h, t - i, dd - center);
                    }
                }
            }
            *s = acc;
        }
        softmax_into(&scores, dist.row_mut(t));
    }
    let dist = DelayDistribution { data: dist };

    // Probability-weighted sum of the delayed far-end projections.
    let mut aligned = LatentTensor::zeros(h_ch, frames, feats);
    for h in 0..h_ch {
        for t in 0..frames {
            for p in 0..feats {
                let mut acc = 0.0;
                for d in 0..d_max.min(t + 1) {
                    acc += dist.data.at(t, d) * f.at(h, t - d, p);
                }
                *aligned.at_mut(h, t, p) = acc;
            }
        }
    }

    let cache = TaCache { ne_proj: n, fe_proj: f, dot, dist: dist.clone(), d_max };
    Ok((aligned, dist, cache))
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        let e = (s - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Analytic gradients through the whole block for a scalar loss with
/// upstream gradients `grad_aligned` and `grad_dist`.
pub fn ta_backward(
    ne: &LatentTensor,
    fe: &LatentTensor,
    w: &TaWeights,
    cache: &TaCache,
    grad_aligned: &LatentTensor,
    grad_dist: &Tensor2,
) -> Result<TaGradients> {
    check_forward_inputs(ne, fe, w, cache.d_max)?;
    let h_ch = w.similarity_channels();
    let (frames, feats) = (ne.frames, ne.features);
    let d_max = cache.d_max;
    if grad_aligned.channels != h_ch
        || grad_aligned.frames != frames
        || grad_aligned.features != feats
    {
        return Err(Error::Shape("ta backward: grad_aligned shape mismatch".into()));
    }
    if grad_dist.rows != frames || grad_dist.cols != d_max {
        return Err(Error::Shape("ta backward: grad_dist shape mismatch".into()));
    }

    let n = &cache.ne_proj;
    let f = &cache.fe_proj;
    let dist = &cache.dist.data;

    // Aligned output: gradients into dist and the fe projection.
    let mut g_dist = grad_dist.clone();
    let mut g_f = LatentTensor::zeros(h_ch, frames, feats);
    for h in 0..h_ch {
        for t in 0..frames {
            for p in 0..feats {
                let ga = grad_aligned.at(h, t, p);
                if ga == 0.0 {
                    continue;
                }
                for d in 0..d_max.min(t + 1) {
                    *g_dist.at_mut(t, d) += ga * f.at(h, t - d, p);
                    *g_f.at_mut(h, t - d, p) += ga * dist.at(t, d);
                }
            }
        }
    }

    // Softmax backward per row.
    let mut g_score = Tensor2::zeros(frames, d_max);
    for t in 0..frames {
        let mut inner = 0.0;
        for d in 0..d_max {
            inner += g_dist.at(t, d) * dist.at(t, d);
        }
        for d in 0..d_max {
            *g_score.at_mut(t, d) = dist.at(t, d) * (g_dist.at(t, d) - inner);
        }
    }

    // Score convolution backward.
    let center = w.delay_taps / 2;
    let mut g_dot = LatentTensor::zeros(h_ch, frames, d_max);
    let mut g_w = TaWeights::zeros(w.in_channels(), h_ch);
    g_w.time_taps = w.time_taps;
    g_w.delay_taps = w.delay_taps;
    g_w.score_kernel = vec![0.0; h_ch * w.time_taps * w.delay_taps];
    for t in 0..frames {
        for d in 0..d_max {
            let gs = g_score.at(t, d);
            if gs == 0.0 {
                continue;
            }
            g_w.score_bias += gs;
            for h in 0..h_ch {
                for i in 0..w.time_taps.min(t + 1) {
                    for j in 0..w.delay_taps {
                        let dd = d + j;
                        if dd < center || dd - center >= d_max {
                            continue;
                        }
                        *g_dot.at_mut(h, t - i, dd - center) += gs * w.kernel_at(h, i, j);
                        *g_w.kernel_at_mut(h, i, j) += gs * cache.dot.at(h, t - i, dd - center);
                    }
                }
            }
        }
    }

    // Dot product backward.
    let mut g_n = LatentTensor::zeros(h_ch, frames, feats);
    for h in 0..h_ch {
        for t in 0..frames {
            for d in 0..d_max.min(t + 1) {
                let gc = g_dot.at(h, t, d);
                if gc == 0.0 {
                    continue;
                }
                for p in 0..feats {
                    *g_n.at_mut(h, t, p) += gc * f.at(h, t - d, p);
                    *g_f.at_mut(h, t - d, p) += gc * n.at(h, t, p);
                }
            }
        }
    }

    // Point-wise projection backward.
    let mut g_ne = LatentTensor::zeros(ne.channels, frames, feats);
    let mut g_fe = LatentTensor::zeros(fe.channels, frames, feats);
    for h in 0..h_ch {
        for t in 0..frames {
            for p in 0..feats {
                let gn = g_n.at(h, t, p);
                if gn != 0.0 {
                    g_w.ne_bias[h] += gn;
                    for l in 0..ne.channels {
                        *g_w.ne_weight.at_mut(h, l) += gn * ne.at(l, t, p);
                        *g_ne.at_mut(l, t, p) += gn * w.ne_weight.at(h, l);
                    }
                }
                let gf = g_f.at(h, t, p);
                if gf != 0.0 {
                    g_w.fe_bias[h] += gf;
                    for l in 0..fe.channels {
                        *g_w.fe_weight.at_mut(h, l) += gf * fe.at(l, t, p);
                        *g_fe.at_mut(l, t, p) += gf * w.fe_weight.at(h, l);
                    }
                }
            }
        }
    }

    Ok(TaGradients { ne: g_ne, fe: g_fe, weights: g_w })
}

/// Streaming alignment: one frame in, one aligned frame plus one delay
/// row out. Holds the far-end projection ring (`d_max` frames) and the
/// last `time_taps` dot-product maps. Bit-identical to [`ta_forward`].
pub struct TaStream {
    weights: TaWeights,
    d_max: usize,
    fe_ring: VecDeque<Tensor2>,
    dot_ring: VecDeque<Tensor2>,
}

impl TaStream {
    pub fn new(weights: TaWeights, d_max: usize) -> Result<Self> {
        weights.validate()?;
        if d_max == 0 {
            return Err(Error::Config("ta: d_max must be >= 1".into()));
        }
        Ok(Self { weights, d_max, fe_ring: VecDeque::new(), dot_ring: VecDeque::new() })
    }

    pub fn weights(&self) -> &TaWeights {
        &self.weights
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    fn project(frame: &Tensor2, weight: &Tensor2, bias: &[f64]) -> Tensor2 {
        let mut out = Tensor2::zeros(weight.rows, frame.cols);
        for h in 0..weight.rows {
            for p in 0..frame.cols {
                let mut acc = bias[h];
                for l in 0..weight.cols {
                    acc += weight.at(h, l) * frame.at(l, p);
                }
                *out.at_mut(h, p) = acc;
            }
        }
        out
    }

    /// Processes one frame pair (channels x features each).
    pub fn step(&mut self, ne_frame: &Tensor2, fe_frame: &Tensor2) -> Result<(Tensor2, Vec<f64>)> {
        let w = &self.weights;
        if ne_frame.rows != w.in_channels() || fe_frame.rows != w.in_channels() {
            return Err(Error::Shape(format!(
                "ta step: {} input channels, projection expects {}",
                ne_frame.rows,
                w.in_channels()
            )));
        }
        if ne_frame.cols != fe_frame.cols {
            return Err(Error::Shape("ta step: ne/fe feature widths differ".into()));
        }
        let h_ch = w.similarity_channels();
        let feats = ne_frame.cols;
        let n = Self::project(ne_frame, &w.ne_weight, &w.ne_bias);
        let f = Self::project(fe_frame, &w.fe_weight, &w.fe_bias);

        self.fe_ring.push_front(f);
        if self.fe_ring.len() > self.d_max {
            self.fe_ring.pop_back();
        }

        // Dot products against the delayed projections.
        let mut dot = Tensor2::zeros(h_ch, self.d_max);
        for h in 0..h_ch {
            for (d, f_d) in self.fe_ring.iter().enumerate() {
                let mut acc = 0.0;
                for p in 0..feats {
                    acc += n.at(h, p) * f_d.at(h, p);
                }
                *dot.at_mut(h, d) = acc;
            }
        }
        self.dot_ring.push_front(dot);
        if self.dot_ring.len() > w.time_taps {
            self.dot_ring.pop_back();
        }

        // Collapse channels with the causal score convolution.
        let center = w.delay_taps / 2;
        let mut scores = vec![0.0f64; self.d_max];
        for (d, s) in scores.iter_mut().enumerate() {
            let mut acc = w.score_bias;
            for h in 0..h_ch {
                for (i, dot_i) in self.dot_ring.iter().enumerate() {
                    for j in 0..w.delay_taps {
                        let dd = d + j;
                        if dd < center || dd - center >= self.d_max {
                            continue;
                        }
                        acc += w.kernel_at(h, i, j) * dot_i.at(h, dd - center);
                    }
                }
            }
            *s = acc;
        }
        let mut dist_row = vec![0.0f64; self.d_max];
        softmax_into(&scores, &mut dist_row);

        let mut aligned = Tensor2::zeros(h_ch, feats);
        for h in 0..h_ch {
            for p in 0..feats {
                let mut acc = 0.0;
                for (d, f_d) in self.fe_ring.iter().enumerate() {
                    acc += dist_row[d] * f_d.at(h, p);
                }
                *aligned.at_mut(h, p) = acc;
            }
        }
        Ok((aligned, dist_row))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_latent(seed: u64, c: usize, t: usize, p: usize) -> LatentTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LatentTensor::from_fn(c, t, p, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_weights(seed: u64, l: usize, h: usize) -> TaWeights {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = TaWeights::zeros(l, h);
        let mut fill = |v: &mut f64| *v = rng.random_range(-0.5..0.5);
        w.ne_weight.data.iter_mut().for_each(&mut fill);
        w.ne_bias.iter_mut().for_each(&mut fill);
        w.fe_weight.data.iter_mut().for_each(&mut fill);
        w.fe_bias.iter_mut().for_each(&mut fill);
        w.score_kernel.iter_mut().for_each(&mut fill);
        fill(&mut w.score_bias);
        w
    }

    /// Delayed copy: out(t) = input(t - lag), zeros before the start.
    fn delay_latent(x: &LatentTensor, lag: usize) -> LatentTensor {
        LatentTensor::from_fn(x.channels, x.frames, x.features, |c, t, p| {
            if t >= lag {
                x.at(c, t - lag, p)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn rows_sum_to_one_for_any_weights() {
        let ne = random_latent(1, 6, 20, 7);
        let fe = random_latent(2, 6, 20, 7);
        let w = random_weights(3, 6, 4);
        let (_, dist) = ta_forward(&ne, &fe, &w, 9).unwrap();
        assert!(dist.max_row_sum_deviation() < 1e-6);
        assert!(dist.data.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_config_recovers_known_delays() {
        // Near end carries the far-end content delayed by d* frames, so
        // the distribution must peak at delay column d* (lag d*).
        let (l, h, t, p) = (32, 32, 90, 26);
        let fe = random_latent(5, l, t, p);
        let w = TaWeights::identity(l, h);
        for lag in [0usize, 16, 63] {
            let ne = delay_latent(&fe, lag);
            let (_, dist) = ta_forward(&ne, &fe, &w, DEFAULT_D_MAX).unwrap();
            for frame in lag..t {
                let row = dist.row(frame);
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, lag, "frame {frame}, lag {lag}");
            }
        }
    }

    #[test]
    fn d_max_validation_and_shape_errors() {
        let ne = random_latent(1, 4, 5, 3);
        let fe = random_latent(2, 4, 5, 3);
        let w = random_weights(3, 4, 4);
        assert!(ta_forward(&ne, &fe, &w, 0).is_err());
        let fe_bad = random_latent(2, 4, 6, 3);
        assert!(ta_forward(&ne, &fe_bad, &w, 4).is_err());
        let w_bad = random_weights(3, 5, 4);
        assert!(ta_forward(&ne, &fe, &w_bad, 4).is_err());
    }

    #[test]
    fn streaming_matches_batch_bitwise() {
        let (l, h, t, p, d_max) = (5, 4, 30, 6, 8);
        let ne = random_latent(11, l, t, p);
        let fe = random_latent(12, l, t, p);
        let w = random_weights(13, l, h);
        let (aligned, dist) = ta_forward(&ne, &fe, &w, d_max).unwrap();
        let mut stream = TaStream::new(w, d_max).unwrap();
        for frame in 0..t {
            let (a, row) = stream.step(&ne.frame(frame), &fe.frame(frame)).unwrap();
            for (d, &v) in row.iter().enumerate() {
                assert_eq!(v, dist.data.at(frame, d), "frame {frame} d {d}");
            }
            for hh in 0..h {
                for pp in 0..p {
                    assert_eq!(a.at(hh, pp), aligned.at(hh, frame, pp));
                }
            }
        }
    }

    #[test]
    fn causal_in_both_inputs() {
        let (l, h, t, p, d_max) = (4, 4, 24, 5, 6);
        let ne = random_latent(21, l, t, p);
        let fe = random_latent(22, l, t, p);
        let w = random_weights(23, l, h);
        let (aligned, dist) = ta_forward(&ne, &fe, &w, d_max).unwrap();
        let cut = 15;
        let mut ne2 = ne.clone();
        let mut fe2 = fe.clone();
        for c in 0..l {
            for frame in cut + 1..t {
                for pp in 0..p {
                    *ne2.at_mut(c, frame, pp) = 9.0;
                    *fe2.at_mut(c, frame, pp) = -9.0;
                }
            }
        }
        let (aligned2, dist2) = ta_forward(&ne2, &fe2, &w, d_max).unwrap();
        for frame in 0..=cut {
            assert_eq!(dist.row(frame), dist2.row(frame));
            for hh in 0..h {
                for pp in 0..p {
                    assert_eq!(aligned.at(hh, frame, pp), aligned2.at(hh, frame, pp));
                }
            }
        }
    }

    #[test]
    fn shifting_both_inputs_shifts_the_distribution() {
        let (l, h, t, p, d_max) = (6, 6, 40, 8, 7);
        let ne = random_latent(31, l, t, p);
        let fe = random_latent(32, l, t, p);
        let w = TaWeights::identity(l, h);
        let shift = 4;
        let (_, dist) = ta_forward(&ne, &fe, &w, d_max).unwrap();
        let (_, dist_shifted) =
            ta_forward(&delay_latent(&ne, shift), &delay_latent(&fe, shift), &w, d_max).unwrap();
        // Interior frames: every contributing term lives in the shifted
        // content region.
        for frame in (d_max + w.time_taps)..(t - shift) {
            for d in 0..d_max {
                let a = dist.data.at(frame, d);
                let b = dist_shifted.data.at(frame + shift, d);
                assert!((a - b).abs() < 1e-12, "frame {frame} d {d}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn aligned_stays_in_delayed_value_envelope() {
        let (l, h, t, p, d_max) = (5, 3, 25, 4, 6);
        let ne = random_latent(41, l, t, p);
        let fe = random_latent(42, l, t, p);
        let w = random_weights(43, l, h);
        let (aligned, _, cache) = ta_forward_cached(&ne, &fe, &w, d_max).unwrap();
        for hh in 0..h {
            for frame in 0..t {
                for pp in 0..p {
                    // Zero padding participates for d > frame.
                    let mut lo = if frame + 1 < d_max { 0.0f64 } else { f64::INFINITY };
                    let mut hi = if frame + 1 < d_max { 0.0f64 } else { f64::NEG_INFINITY };
                    for d in 0..d_max.min(frame + 1) {
                        let v = cache.fe_proj.at(hh, frame - d, pp);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                    let v = aligned.at(hh, frame, pp);
                    assert!(
                        v >= lo - 1e-12 && v <= hi + 1e-12,
                        "aligned {v} outside [{lo}, {hi}]"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_upstream_gradients_give_zero_gradients() {
        let (l, h, t, p, d_max) = (4, 4, 8, 6, 5);
        let ne = random_latent(51, l, t, p);
        let fe = random_latent(52, l, t, p);
        let w = random_weights(53, l, h);
        let (_, _, cache) = ta_forward_cached(&ne, &fe, &w, d_max).unwrap();
        let ga = LatentTensor::zeros(h, t, p);
        let gd = Tensor2::zeros(t, d_max);
        let g = ta_backward(&ne, &fe, &w, &cache, &ga, &gd).unwrap();
        assert!(g.ne.data.iter().all(|&v| v == 0.0));
        assert!(g.fe.data.iter().all(|&v| v == 0.0));
        assert!(g.weights.ne_weight.data.iter().all(|&v| v == 0.0));
        assert!(g.weights.score_kernel.iter().all(|&v| v == 0.0));
        assert_eq!(g.weights.score_bias, 0.0);
    }

    #[test]
    fn uniform_dist_gradient_vanishes_through_softmax() {
        // A constant upstream gradient over the delay axis lies in the
        // null space of the softmax Jacobian.
        let (l, h, t, p, d_max) = (4, 4, 8, 6, 5);
        let ne = random_latent(61, l, t, p);
        let fe = random_latent(62, l, t, p);
        let w = random_weights(63, l, h);
        let (_, _, cache) = ta_forward_cached(&ne, &fe, &w, d_max).unwrap();
        let ga = LatentTensor::zeros(h, t, p);
        let gd = Tensor2::from_fn(t, d_max, |_, _| 1.0);
        let g = ta_backward(&ne, &fe, &w, &cache, &ga, &gd).unwrap();
        let max = g
            .ne
            .data
            .iter()
            .chain(g.fe.data.iter())
            .chain(g.weights.score_kernel.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-12, "expected vanishing gradients, max {max}");
    }

    /// Central finite differences over sampled input coordinates and every
    /// weight coordinate; returns the worst relative error.
    pub(crate) fn finite_difference_check(seed: u64) -> f64 {
        let (l, h, t, p, d_max) = (4, 4, 8, 6, 5);
        let ne = random_latent(seed, l, t, p);
        let fe = random_latent(seed + 1000, l, t, p);
        let w = random_weights(seed + 2000, l, h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3000);
        let ga = LatentTensor::from_fn(h, t, p, |_, _, _| rng.random_range(-1.0..1.0));
        let gd = Tensor2::from_fn(t, d_max, |_, _| rng.random_range(-1.0..1.0));

        let loss = |ne: &LatentTensor, fe: &LatentTensor, w: &TaWeights| -> f64 {
            let (aligned, dist) = ta_forward(ne, fe, w, d_max).unwrap();
            let mut acc = 0.0;
            for i in 0..aligned.data.len() {
                acc += aligned.data[i] * ga.data[i];
            }
            for i in 0..dist.data.data.len() {
                acc += dist.data.data[i] * gd.data[i];
            }
            acc
        };

        let (_, _, cache) = ta_forward_cached(&ne, &fe, &w, d_max).unwrap();
        let g = ta_backward(&ne, &fe, &w, &cache, &ga, &gd).unwrap();

        let step = 1e-5;
        let mut worst = 0.0f64;
        let mut record = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            worst = worst.max((analytic - fd).abs() / denom);
        };

        for idx in (0..ne.data.len()).step_by(7) {
            let mut plus = ne.clone();
            let mut minus = ne.clone();
            plus.data[idx] += step;
            minus.data[idx] -= step;
            record(g.ne.data[idx], (loss(&plus, &fe, &w) - loss(&minus, &fe, &w)) / (2.0 * step));
        }
        for idx in (0..fe.data.len()).step_by(7) {
            let mut plus = fe.clone();
            let mut minus = fe.clone();
            plus.data[idx] += step;
            minus.data[idx] -= step;
            record(g.fe.data[idx], (loss(&ne, &plus, &w) - loss(&ne, &minus, &w)) / (2.0 * step));
        }
        for idx in 0..w.ne_weight.data.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.ne_weight.data[idx] += step;
            minus.ne_weight.data[idx] -= step;
            record(
                g.weights.ne_weight.data[idx],
                (loss(&ne, &fe, &plus) - loss(&ne, &fe, &minus)) / (2.0 * step),
            );
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.fe_weight.data[idx] += step;
            minus.fe_weight.data[idx] -= step;
            record(
                g.weights.fe_weight.data[idx],
                (loss(&ne, &fe, &plus) - loss(&ne, &fe, &minus)) / (2.0 * step),
            );
        }
        for idx in 0..w.score_kernel.len() {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus.score_kernel[idx] += step;
            minus.score_kernel[idx] -= step;
            record(
                g.weights.score_kernel[idx],
                (loss(&ne, &fe, &plus) - loss(&ne, &fe, &minus)) / (2.0 * step),
            );
        }
        for hh in 0..h {
            for ne_side in [true, false] {
                let mut plus = w.clone();
                let mut minus = w.clone();
                let analytic = if ne_side {
                    plus.ne_bias[hh] += step;
                    minus.ne_bias[hh] -= step;
                    g.weights.ne_bias[hh]
                } else {
                    plus.fe_bias[hh] += step;
                    minus.fe_bias[hh] -= step;
                    g.weights.fe_bias[hh]
                };
                record(analytic, (loss(&ne, &fe, &plus) - loss(&ne, &fe, &minus)) / (2.0 * step));
            }
        }
        let mut plus = w.clone();
        let mut minus = w.clone();
        plus.score_bias += step;
        minus.score_bias -= step;
        record(
            g.weights.score_bias,
            (loss(&ne, &fe, &plus) - loss(&ne, &fe, &minus)) / (2.0 * step),
        );
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let worst = finite_difference_check(seed);
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
    }
}
