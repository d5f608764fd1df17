//! Closed-form parameter and multiply-accumulate accounting.
//!
//! Conventions: one MAC per weight-input product; biases and activations
//! are free; GRU steps cost `3*(in*hidden + hidden*hidden)`; convolutions
//! cost `positions * out_channels * in_channels * kernel` (depthwise:
//! `positions * channels * kernel`). Per-second figures multiply the
//! per-frame cost by the frame rate (62.5 at a 16 ms hop).

use super::ModelConfig;

/// Weight count of a dense/full convolution `out x in x kernel` plus bias.
pub fn conv_params(out_ch: usize, in_ch: usize, kernel: usize) -> usize {
    out_ch * in_ch * kernel + out_ch
}

/// MACs of a full convolution over `positions` output positions.
pub fn conv_macs(out_ch: usize, in_ch: usize, kernel: usize, positions: usize) -> usize {
    positions * out_ch * in_ch * kernel
}

/// Parameters of a separable convolution: depthwise kernel (no bias) plus
/// pointwise with bias.
pub fn separable_params(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
    in_ch * kernel + in_ch * out_ch + out_ch
}

/// MACs of a separable convolution over `positions` positions.
pub fn separable_macs(in_ch: usize, out_ch: usize, kernel: usize, positions: usize) -> usize {
    positions * in_ch * kernel + positions * in_ch * out_ch
}

/// Parameters of a GRU (stacked gate matrices and both bias vectors).
pub fn gru_params(input: usize, hidden: usize) -> usize {
    3 * hidden * input + 3 * hidden * hidden + 6 * hidden
}

/// MACs of one GRU step.
pub fn gru_macs(input: usize, hidden: usize) -> usize {
    3 * (input * hidden + hidden * hidden)
}

/// Total learnable parameter count of the graph.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let l = cfg.stream_filters;
    let h = cfg.similarity_channels;
    let mut total = 0;
    // NE / FE conv streams.
    total += separable_params(cfg.ne_channels, l, cfg.stream_kernel1)
        + separable_params(l, l, cfg.stream_kernel2);
    total += separable_params(cfg.fe_channels, l, cfg.stream_kernel1)
        + separable_params(l, l, cfg.stream_kernel2);
    // Alignment block: two point-wise projections and the score kernel.
    total += 2 * (h * l + h);
    total += h * cfg.ta_time_taps * cfg.ta_delay_taps + 1;
    // Joint convolutions.
    total += conv_params(cfg.joint_filters1, l + h, cfg.joint_kernel);
    total += conv_params(cfg.joint_filters2, cfg.joint_filters1, cfg.joint_kernel);
    // Frequency GRU and subband GRUs.
    total += gru_params(cfg.joint_filters2, cfg.fgru_hidden);
    let plan = cfg.plan().expect("config validated before counting");
    total += cfg.subband_groups * gru_params(plan.group_size, cfg.subband_hidden);
    // Mask heads.
    total += cfg.subband_groups * cfg.subband_hidden * cfg.num_bins + cfg.num_bins;
    total += conv_params(cfg.phase_hidden, 2, cfg.phase_kernel1);
    total += conv_params(2, cfg.phase_hidden, cfg.phase_kernel2);
    total
}

/// Multiply-accumulates for one frame of inference.
pub fn macs_per_frame(cfg: &ModelConfig) -> usize {
    let plan = cfg.plan().expect("config validated before counting");
    let l = cfg.stream_filters;
    let h = cfg.similarity_channels;
    let mut total = 0;
    // NE / FE conv streams (conv1 at full width, conv2 after pooling).
    total += separable_macs(cfg.ne_channels, l, cfg.stream_kernel1, plan.stream_features_in)
        + separable_macs(l, l, cfg.stream_kernel2, plan.stream_features);
    total += separable_macs(cfg.fe_channels, l, cfg.stream_kernel1, plan.stream_features_in)
        + separable_macs(l, l, cfg.stream_kernel2, plan.stream_features);
    // Alignment: projections, dot products, score conv, weighted sum.
    total += 2 * plan.stream_features * l * h;
    total += h * cfg.d_max * plan.stream_features;
    total += cfg.d_max * h * cfg.ta_time_taps * cfg.ta_delay_taps;
    total += h * cfg.d_max * plan.stream_features;
    // Joint convolutions.
    total += conv_macs(cfg.joint_filters1, l + h, cfg.joint_kernel, plan.joint1_features);
    total += conv_macs(cfg.joint_filters2, cfg.joint_filters1, cfg.joint_kernel, plan.joint2_features);
    // Frequency GRU across positions, subband GRUs once per frame.
    total += plan.joint2_features * gru_macs(cfg.joint_filters2, cfg.fgru_hidden);
    total += cfg.subband_groups * gru_macs(plan.group_size, cfg.subband_hidden);
    // Mask heads.
    total += cfg.subband_groups * cfg.subband_hidden * cfg.num_bins;
    total += conv_macs(cfg.phase_hidden, 2, cfg.phase_kernel1, cfg.num_bins);
    total += conv_macs(2, cfg.phase_hidden, cfg.phase_kernel2, cfg.num_bins);
    total
}

/// MACs per second at the given frame rate.
pub fn macs_per_second(cfg: &ModelConfig, frame_rate: f64) -> f64 {
    macs_per_frame(cfg) as f64 * frame_rate
}
