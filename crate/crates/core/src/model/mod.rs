//! The neural post-filter: parallel near-end / far-end convolutional
//! streams, latent-space time alignment, joint convolutions, a frequency
//! GRU, subband GRUs and a complex mask head, all strictly causal and
//! frame-streamable.
//!
//! The magnitude path runs on reoriented features; the phase head runs on
//! the raw-order compressed error magnitudes (recovered through the exact
//! inverse of the reorientation) stacked with their masked version, and
//! maps two linear outputs through atan2. Mask magnitudes are sigmoid
//! bounded to [0, 1].

pub mod complexity;
pub mod layers;
mod weights;

pub use weights::{WeightEntry, WeightStore, WEIGHT_STORE_MAGIC, WEIGHT_STORE_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{decompress_magnitude, ReorientLayout, ReorientMode};
use crate::stft::ComplexSpectrumFrame;
use crate::tensor::{LatentTensor, Tensor2};
use crate::time_align::{TaStream, TaWeights};
use crate::{Error, Result};
use layers::{Activation, Conv1d, Dense, Gru, SeparableConv};

/// Static hyperparameters of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layout: ReorientLayout,
    /// Channels entering the NE stream (layout channels, doubled when the
    /// echo estimate is stacked in).
    pub ne_channels: usize,
    pub fe_channels: usize,
    pub stream_filters: usize,
    pub stream_kernel1: usize,
    pub stream_kernel2: usize,
    pub similarity_channels: usize,
    pub d_max: usize,
    pub ta_time_taps: usize,
    pub ta_delay_taps: usize,
    pub joint_filters1: usize,
    pub joint_filters2: usize,
    pub joint_kernel: usize,
    pub joint_stride: usize,
    pub fgru_hidden: usize,
    pub subband_groups: usize,
    pub subband_hidden: usize,
    pub num_bins: usize,
    pub phase_hidden: usize,
    pub phase_kernel1: usize,
    pub phase_kernel2: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layout: ReorientLayout::default_for_bins(257, ReorientMode::Sampled),
            ne_channels: 5,
            fe_channels: 5,
            stream_filters: 32,
            stream_kernel1: 5,
            stream_kernel2: 3,
            similarity_channels: 32,
            d_max: 64,
            ta_time_taps: 5,
            ta_delay_taps: 3,
            joint_filters1: 64,
            joint_filters2: 96,
            joint_kernel: 3,
            joint_stride: 2,
            fgru_hidden: 64,
            subband_groups: 2,
            subband_hidden: 128,
            num_bins: 257,
            phase_hidden: 8,
            phase_kernel1: 5,
            phase_kernel2: 3,
        }
    }
}

/// Build-time shape chain; every runtime stage is audited against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// Feature width entering the conv streams.
    pub stream_features_in: usize,
    /// Feature width after the factor-2 max-pool (the latent width P).
    pub stream_features: usize,
    /// Channels after concatenating the NE latents with the aligned FE
    /// latents.
    pub concat_channels: usize,
    pub joint1_features: usize,
    pub joint2_features: usize,
    /// Flattened frequency-GRU output size.
    pub fgru_flat: usize,
    /// Input size of each subband GRU group.
    pub group_size: usize,
}

impl ModelConfig {
    /// Validates cross-layer shape consistency; errors name the layer.
    pub fn plan(&self) -> Result<ShapePlan> {
        let lay_ch = self.layout.channels();
        if self.ne_channels == 0 || self.ne_channels % lay_ch != 0 {
            return Err(Error::Config(format!(
                "ne_stream.conv1: {} input channels not a multiple of layout channels {lay_ch}",
                self.ne_channels
            )));
        }
        if self.fe_channels == 0 || self.fe_channels % lay_ch != 0 {
            return Err(Error::Config(format!(
                "fe_stream.conv1: {} input channels not a multiple of layout channels {lay_ch}",
                self.fe_channels
            )));
        }
        if self.num_bins != self.layout.num_bins {
            return Err(Error::Config(format!(
                "mask head: num_bins {} does not match layout bins {}",
                self.num_bins, self.layout.num_bins
            )));
        }
        if self.stream_kernel1 % 2 == 0 || self.stream_kernel2 % 2 == 0 {
            return Err(Error::Config("stream conv: kernels must be odd".into()));
        }
        if self.joint_kernel % 2 == 0 || self.joint_stride == 0 {
            return Err(Error::Config("joint conv: kernel must be odd, stride >= 1".into()));
        }
        if self.phase_kernel1 % 2 == 0 || self.phase_kernel2 % 2 == 0 {
            return Err(Error::Config("phase conv: kernels must be odd".into()));
        }
        if self.d_max == 0 {
            return Err(Error::Config("ta: d_max must be >= 1".into()));
        }
        let stream_features_in = self.layout.features_per_channel();
        let stream_features = stream_features_in.div_ceil(2);
        let concat_channels = self.stream_filters + self.similarity_channels;
        let conv_width = |w: usize, k: usize, s: usize| (w + 2 * ((k - 1) / 2) - k) / s + 1;
        let joint1_features = conv_width(stream_features, self.joint_kernel, self.joint_stride);
        let joint2_features = conv_width(joint1_features, self.joint_kernel, self.joint_stride);
        if joint2_features == 0 {
            return Err(Error::Config("joint.conv2: output width collapsed to zero".into()));
        }
        let fgru_flat = joint2_features * self.fgru_hidden;
        if self.subband_groups == 0 || fgru_flat % self.subband_groups != 0 {
            return Err(Error::Config(format!(
                "subband_gru: flattened width {fgru_flat} not divisible into {} groups",
                self.subband_groups
            )));
        }
        Ok(ShapePlan {
            stream_features_in,
            stream_features,
            concat_channels,
            joint1_features,
            joint2_features,
            fgru_flat,
            group_size: fgru_flat / self.subband_groups,
        })
    }
}

/// Where the parameters come from.
pub enum WeightSource {
    /// Deterministic fan-in-scaled uniform init; biases start at zero.
    Random { seed: u64 },
    Store(WeightStore),
}

struct ParamSpec {
    path: String,
    shape: Vec<usize>,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |path: &str, shape: Vec<usize>| {
        specs.push(ParamSpec { path: path.to_string(), shape });
    };
    let l = cfg.stream_filters;
    let h = cfg.similarity_channels;
    for (name, in_ch) in [("ne_stream", cfg.ne_channels), ("fe_stream", cfg.fe_channels)] {
        push(&format!("{name}.conv1.depthwise"), vec![in_ch, cfg.stream_kernel1]);
        push(&format!("{name}.conv1.pointwise"), vec![l, in_ch]);
        push(&format!("{name}.conv1.bias"), vec![l]);
        push(&format!("{name}.conv2.depthwise"), vec![l, cfg.stream_kernel2]);
        push(&format!("{name}.conv2.pointwise"), vec![l, l]);
        push(&format!("{name}.conv2.bias"), vec![l]);
    }
    push("ta.ne_proj.weight", vec![h, l]);
    push("ta.ne_proj.bias", vec![h]);
    push("ta.fe_proj.weight", vec![h, l]);
    push("ta.fe_proj.bias", vec![h]);
    push("ta.score.kernel", vec![h, cfg.ta_time_taps, cfg.ta_delay_taps]);
    push("ta.score.bias", vec![1]);
    push("joint.conv1.weight", vec![cfg.joint_filters1, l + h, cfg.joint_kernel]);
    push("joint.conv1.bias", vec![cfg.joint_filters1]);
    push("joint.conv2.weight", vec![cfg.joint_filters2, cfg.joint_filters1, cfg.joint_kernel]);
    push("joint.conv2.bias", vec![cfg.joint_filters2]);
    push("fgru.weight_ih", vec![3 * cfg.fgru_hidden, cfg.joint_filters2]);
    push("fgru.weight_hh", vec![3 * cfg.fgru_hidden, cfg.fgru_hidden]);
    push("fgru.bias_ih", vec![3 * cfg.fgru_hidden]);
    push("fgru.bias_hh", vec![3 * cfg.fgru_hidden]);
    let plan = cfg.plan().expect("plan checked before spec enumeration");
    for g in 0..cfg.subband_groups {
        push(&format!("subband_gru.{g}.weight_ih"), vec![3 * cfg.subband_hidden, plan.group_size]);
        push(&format!("subband_gru.{g}.weight_hh"), vec![3 * cfg.subband_hidden, cfg.subband_hidden]);
        push(&format!("subband_gru.{g}.bias_ih"), vec![3 * cfg.subband_hidden]);
        push(&format!("subband_gru.{g}.bias_hh"), vec![3 * cfg.subband_hidden]);
    }
    push("fc.weight", vec![cfg.num_bins, cfg.subband_groups * cfg.subband_hidden]);
    push("fc.bias", vec![cfg.num_bins]);
    push("phase.conv1.weight", vec![cfg.phase_hidden, 2, cfg.phase_kernel1]);
    push("phase.conv1.bias", vec![cfg.phase_hidden]);
    push("phase.conv2.weight", vec![2, cfg.phase_hidden, cfg.phase_kernel2]);
    push("phase.conv2.bias", vec![2]);
    specs
}

fn random_store(cfg: &ModelConfig, seed: u64) -> WeightStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = WeightStore::new();
    for spec in param_specs(cfg) {
        let numel: usize = spec.shape.iter().product();
        let is_bias = spec.path.contains("bias");
        let values: Vec<f32> = if is_bias {
            vec![0.0; numel]
        } else {
            let fan_in: usize = spec.shape[1..].iter().product::<usize>().max(1);
            let limit = (1.0 / fan_in as f64).sqrt();
            (0..numel).map(|_| (rng.random_range(-1.0..1.0) * limit) as f32).collect()
        };
        store.insert(&spec.path, spec.shape, values).expect("spec paths are unique");
    }
    store
}

struct ValueSource {
    store: WeightStore,
}

impl ValueSource {
    fn flat(&self, path: &str) -> Vec<f64> {
        let e = self.store.get(path).expect("presence checked during validation");
        e.values.iter().map(|&v| v as f64).collect()
    }

    fn tensor2(&self, path: &str, rows: usize, cols: usize) -> Tensor2 {
        Tensor2::from_vec(rows, cols, self.flat(path))
    }

    fn scalar(&self, path: &str) -> f64 {
        self.flat(path)[0]
    }
}

/// Parameter mask range, `[0, 1]` magnitude and `(-pi, pi]` phase per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl ComplexMask {
    pub fn num_bins(&self) -> usize {
        self.magnitude.len()
    }

    pub fn in_bounds(&self) -> bool {
        self.magnitude.iter().all(|&m| (0.0..=1.0).contains(&m))
            && self.phase.iter().all(|&p| p > -std::f64::consts::PI && p <= std::f64::consts::PI)
    }
}

/// Per-stream mutable state: the alignment rings plus subband GRU hiddens.
pub struct StreamState {
    ta: TaStream,
    subband_hidden: Vec<Vec<f64>>,
}

/// The runnable graph. Weights are immutable after build and shareable
/// across streams; all per-stream state lives in [`StreamState`].
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    plan: ShapePlan,
    ne_conv1: SeparableConv,
    ne_conv2: SeparableConv,
    fe_conv1: SeparableConv,
    fe_conv2: SeparableConv,
    ta: TaWeights,
    joint1: Conv1d,
    joint2: Conv1d,
    fgru: Gru,
    subband: Vec<Gru>,
    fc: Dense,
    phase1: Conv1d,
    phase2: Conv1d,
}

impl Model {
    pub fn build(cfg: &ModelConfig, source: WeightSource) -> Result<Model> {
        let plan = cfg.plan()?;
        let store = match source {
            WeightSource::Random { seed } => random_store(cfg, seed),
            WeightSource::Store(store) => store,
        };
        let specs = param_specs(cfg);
        for spec in &specs {
            match store.get(&spec.path) {
                None => {
                    return Err(Error::WeightStore(format!("missing tensor {}", spec.path)));
                }
                Some(entry) if entry.shape != spec.shape => {
                    return Err(Error::WeightStore(format!(
                        "tensor {}: shape {:?} does not match expected {:?}",
                        spec.path, entry.shape, spec.shape
                    )));
                }
                Some(_) => {}
            }
        }
        if store.len() != specs.len() {
            let expected: std::collections::HashSet<&str> =
                specs.iter().map(|s| s.path.as_str()).collect();
            let extra = store
                .iter()
                .map(|e| e.path.as_str())
                .find(|p| !expected.contains(p))
                .unwrap_or("?");
            return Err(Error::WeightStore(format!("unexpected tensor {extra}")));
        }

        let src = ValueSource { store };
        let l = cfg.stream_filters;
        let h = cfg.similarity_channels;
        let sep = |name: &str, in_ch: usize, k: usize| SeparableConv {
            depthwise: src.tensor2(&format!("{name}.depthwise"), in_ch, k),
            pointwise: src.tensor2(&format!("{name}.pointwise"), l, in_ch),
            bias: src.flat(&format!("{name}.bias")),
            activation: Activation::Relu,
        };
        let ta = TaWeights {
            ne_weight: src.tensor2("ta.ne_proj.weight", h, l),
            ne_bias: src.flat("ta.ne_proj.bias"),
            fe_weight: src.tensor2("ta.fe_proj.weight", h, l),
            fe_bias: src.flat("ta.fe_proj.bias"),
            score_kernel: src.flat("ta.score.kernel"),
            score_bias: src.scalar("ta.score.bias"),
            time_taps: cfg.ta_time_taps,
            delay_taps: cfg.ta_delay_taps,
        };
        ta.validate()?;
        let conv = |name: &str, in_ch: usize, k: usize, stride: usize, act| Conv1d {
            weight: src.flat(&format!("{name}.weight")),
            bias: src.flat(&format!("{name}.bias")),
            in_channels: in_ch,
            kernel: k,
            stride,
            activation: act,
        };
        let gru = |name: &str, input: usize, hidden: usize| Gru {
            weight_ih: src.tensor2(&format!("{name}.weight_ih"), 3 * hidden, input),
            weight_hh: src.tensor2(&format!("{name}.weight_hh"), 3 * hidden, hidden),
            bias_ih: src.flat(&format!("{name}.bias_ih")),
            bias_hh: src.flat(&format!("{name}.bias_hh")),
        };
        let model = Model {
            ne_conv1: sep("ne_stream.conv1", cfg.ne_channels, cfg.stream_kernel1),
            ne_conv2: sep("ne_stream.conv2", l, cfg.stream_kernel2),
            fe_conv1: sep("fe_stream.conv1", cfg.fe_channels, cfg.stream_kernel1),
            fe_conv2: sep("fe_stream.conv2", l, cfg.stream_kernel2),
            ta,
            joint1: conv("joint.conv1", l + h, cfg.joint_kernel, cfg.joint_stride, Activation::Relu),
            joint2: conv(
                "joint.conv2",
                cfg.joint_filters1,
                cfg.joint_kernel,
                cfg.joint_stride,
                Activation::Relu,
            ),
            fgru: gru("fgru", cfg.joint_filters2, cfg.fgru_hidden),
            subband: (0..cfg.subband_groups)
                .map(|g| gru(&format!("subband_gru.{g}"), plan.group_size, cfg.subband_hidden))
                .collect(),
            fc: Dense {
                weight: src.tensor2("fc.weight", cfg.num_bins, cfg.subband_groups * cfg.subband_hidden),
                bias: src.flat("fc.bias"),
                activation: Activation::Sigmoid,
            },
            phase1: conv("phase.conv1", 2, cfg.phase_kernel1, 1, Activation::Relu),
            phase2: conv("phase.conv2", cfg.phase_hidden, cfg.phase_kernel2, 1, Activation::Linear),
            cfg: cfg.clone(),
            plan,
        };
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    /// Serializes the parameters back into a store (canonical order).
    pub fn to_store(&self) -> WeightStore {
        let mut store = WeightStore::new();
        let as32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let mut put = |path: &str, shape: Vec<usize>, values: Vec<f32>| {
            store.insert(path, shape, values).expect("canonical paths are unique");
        };
        let cfg = &self.cfg;
        for (name, conv1, conv2) in [
            ("ne_stream", &self.ne_conv1, &self.ne_conv2),
            ("fe_stream", &self.fe_conv1, &self.fe_conv2),
        ] {
            put(
                &format!("{name}.conv1.depthwise"),
                vec![conv1.in_channels(), conv1.kernel()],
                as32(&conv1.depthwise.data),
            );
            put(
                &format!("{name}.conv1.pointwise"),
                vec![conv1.out_channels(), conv1.in_channels()],
                as32(&conv1.pointwise.data),
            );
            put(&format!("{name}.conv1.bias"), vec![conv1.out_channels()], as32(&conv1.bias));
            put(
                &format!("{name}.conv2.depthwise"),
                vec![conv2.in_channels(), conv2.kernel()],
                as32(&conv2.depthwise.data),
            );
            put(
                &format!("{name}.conv2.pointwise"),
                vec![conv2.out_channels(), conv2.in_channels()],
                as32(&conv2.pointwise.data),
            );
            put(&format!("{name}.conv2.bias"), vec![conv2.out_channels()], as32(&conv2.bias));
        }
        let h = cfg.similarity_channels;
        let l = cfg.stream_filters;
        put("ta.ne_proj.weight", vec![h, l], as32(&self.ta.ne_weight.data));
        put("ta.ne_proj.bias", vec![h], as32(&self.ta.ne_bias));
        put("ta.fe_proj.weight", vec![h, l], as32(&self.ta.fe_weight.data));
        put("ta.fe_proj.bias", vec![h], as32(&self.ta.fe_bias));
        put(
            "ta.score.kernel",
            vec![h, cfg.ta_time_taps, cfg.ta_delay_taps],
            as32(&self.ta.score_kernel),
        );
        put("ta.score.bias", vec![1], vec![self.ta.score_bias as f32]);
        put(
            "joint.conv1.weight",
            vec![cfg.joint_filters1, l + h, cfg.joint_kernel],
            as32(&self.joint1.weight),
        );
        put("joint.conv1.bias", vec![cfg.joint_filters1], as32(&self.joint1.bias));
        put(
            "joint.conv2.weight",
            vec![cfg.joint_filters2, cfg.joint_filters1, cfg.joint_kernel],
            as32(&self.joint2.weight),
        );
        put("joint.conv2.bias", vec![cfg.joint_filters2], as32(&self.joint2.bias));
        put(
            "fgru.weight_ih",
            vec![3 * cfg.fgru_hidden, cfg.joint_filters2],
            as32(&self.fgru.weight_ih.data),
        );
        put(
            "fgru.weight_hh",
            vec![3 * cfg.fgru_hidden, cfg.fgru_hidden],
            as32(&self.fgru.weight_hh.data),
        );
        put("fgru.bias_ih", vec![3 * cfg.fgru_hidden], as32(&self.fgru.bias_ih));
        put("fgru.bias_hh", vec![3 * cfg.fgru_hidden], as32(&self.fgru.bias_hh));
        for (g, gru) in self.subband.iter().enumerate() {
            put(
                &format!("subband_gru.{g}.weight_ih"),
                vec![3 * cfg.subband_hidden, self.plan.group_size],
                as32(&gru.weight_ih.data),
            );
            put(
                &format!("subband_gru.{g}.weight_hh"),
                vec![3 * cfg.subband_hidden, cfg.subband_hidden],
                as32(&gru.weight_hh.data),
            );
            put(&format!("subband_gru.{g}.bias_ih"), vec![3 * cfg.subband_hidden], as32(&gru.bias_ih));
            put(&format!("subband_gru.{g}.bias_hh"), vec![3 * cfg.subband_hidden], as32(&gru.bias_hh));
        }
        put(
            "fc.weight",
            vec![cfg.num_bins, cfg.subband_groups * cfg.subband_hidden],
            as32(&self.fc.weight.data),
        );
        put("fc.bias", vec![cfg.num_bins], as32(&self.fc.bias));
        put(
            "phase.conv1.weight",
            vec![cfg.phase_hidden, 2, cfg.phase_kernel1],
            as32(&self.phase1.weight),
        );
        put("phase.conv1.bias", vec![cfg.phase_hidden], as32(&self.phase1.bias));
        put(
            "phase.conv2.weight",
            vec![2, cfg.phase_hidden, cfg.phase_kernel2],
            as32(&self.phase2.weight),
        );
        put("phase.conv2.bias", vec![2], as32(&self.phase2.bias));
        store
    }

    /// FNV-1a checksum over the canonical serialized parameters.
    pub fn checksum(&self) -> u64 {
        self.to_store().checksum()
    }

    pub fn init_state(&self) -> StreamState {
        StreamState {
            ta: TaStream::new(self.ta.clone(), self.cfg.d_max)
                .expect("weights validated at build"),
            subband_hidden: vec![vec![0.0; self.cfg.subband_hidden]; self.cfg.subband_groups],
        }
    }

    fn audit(&self, layer: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
        if got != want {
            return Err(Error::Shape(format!(
                "{layer}: runtime shape {}x{} differs from declared {}x{}",
                got.0, got.1, want.0, want.1
            )));
        }
        Ok(())
    }

    /// One frame of inference. The NE and FE inputs are reoriented feature
    /// frames (channels x features); the first `layout.channels()` rows of
    /// the NE input must be the reoriented compressed error magnitudes
    /// (the phase head recovers their raw order through the inverse
    /// permutation).
    pub fn step(
        &self,
        ne_input: &Tensor2,
        fe_input: &Tensor2,
        state: &mut StreamState,
    ) -> Result<ComplexMask> {
        let plan = &self.plan;
        self.audit(
            "ne_stream.input",
            (ne_input.rows, ne_input.cols),
            (self.cfg.ne_channels, plan.stream_features_in),
        )?;
        self.audit(
            "fe_stream.input",
            (fe_input.rows, fe_input.cols),
            (self.cfg.fe_channels, plan.stream_features_in),
        )?;

        // Parallel conv streams.
        let ne1 = layers::max_pool2(&self.ne_conv1.apply(ne_input));
        let ne_latent = self.ne_conv2.apply(&ne1);
        let fe1 = layers::max_pool2(&self.fe_conv1.apply(fe_input));
        let fe_latent = self.fe_conv2.apply(&fe1);
        self.audit(
            "ne_stream.conv2",
            (ne_latent.rows, ne_latent.cols),
            (self.cfg.stream_filters, plan.stream_features),
        )?;

        // Latent-space alignment, then channel concat.
        let (aligned, _dist) = state.ta.step(&ne_latent, &fe_latent)?;
        let mut joint_in = Tensor2::zeros(plan.concat_channels, plan.stream_features);
        for c in 0..self.cfg.stream_filters {
            for p in 0..plan.stream_features {
                *joint_in.at_mut(c, p) = ne_latent.at(c, p);
            }
        }
        for c in 0..self.cfg.similarity_channels {
            for p in 0..plan.stream_features {
                *joint_in.at_mut(self.cfg.stream_filters + c, p) = aligned.at(c, p);
            }
        }

        let j1 = self.joint1.apply(&joint_in);
        self.audit("joint.conv1", (j1.rows, j1.cols), (self.cfg.joint_filters1, plan.joint1_features))?;
        let j2 = self.joint2.apply(&j1);
        self.audit("joint.conv2", (j2.rows, j2.cols), (self.cfg.joint_filters2, plan.joint2_features))?;

        // Frequency GRU: recur along the feature axis, fresh state per
        // frame; collect the hidden vector at every position.
        let mut fgru_h = vec![0.0; self.cfg.fgru_hidden];
        let mut flat = vec![0.0; plan.fgru_flat];
        let mut column = vec![0.0; self.cfg.joint_filters2];
        for pos in 0..plan.joint2_features {
            for (c, slot) in column.iter_mut().enumerate() {
                *slot = j2.at(c, pos);
            }
            self.fgru.step(&column, &mut fgru_h);
            flat[pos * self.cfg.fgru_hidden..(pos + 1) * self.cfg.fgru_hidden]
                .copy_from_slice(&fgru_h);
        }

        // Subband GRUs over time.
        let mut features = Vec::with_capacity(self.cfg.subband_groups * self.cfg.subband_hidden);
        for (g, gru) in self.subband.iter().enumerate() {
            let group = &flat[g * plan.group_size..(g + 1) * plan.group_size];
            gru.step(group, &mut state.subband_hidden[g]);
            features.extend_from_slice(&state.subband_hidden[g]);
        }

        // Magnitude mask.
        let magnitude = self.fc.apply(&features);

        // Phase head on raw-order compressed error magnitudes.
        let lay_ch = self.cfg.layout.channels();
        let fpc = self.cfg.layout.features_per_channel();
        let mut flat_feat = vec![0.0; self.cfg.layout.padded_len];
        for c in 0..lay_ch {
            for p in 0..fpc {
                flat_feat[c * fpc + p] = ne_input.at(c, p);
            }
        }
        let raw = self.cfg.layout.invert(&flat_feat)?;
        let mut phase_in = Tensor2::zeros(2, self.cfg.num_bins);
        for k in 0..self.cfg.num_bins {
            phase_in.data[k] = raw[k];
            phase_in.data[self.cfg.num_bins + k] = raw[k] * magnitude[k];
        }
        let p1 = self.phase1.apply(&phase_in);
        let p2 = self.phase2.apply(&p1);
        self.audit("phase.conv2", (p2.rows, p2.cols), (2, self.cfg.num_bins))?;
        let mut phase = Vec::with_capacity(self.cfg.num_bins);
        for k in 0..self.cfg.num_bins {
            let mut angle = p2.at(1, k).atan2(p2.at(0, k));
            if angle <= -std::f64::consts::PI {
                angle = std::f64::consts::PI;
            }
            phase.push(angle);
        }

        Ok(ComplexMask { magnitude, phase })
    }

    /// Whole-utterance inference: loops the per-frame kernel over a fresh
    /// state, so the result is bit-identical to manual streaming.
    pub fn forward_frames(
        &self,
        ne: &LatentTensor,
        fe: &LatentTensor,
    ) -> Result<Vec<ComplexMask>> {
        if ne.frames != fe.frames {
            return Err(Error::Shape(format!(
                "forward: ne has {} frames, fe has {}",
                ne.frames, fe.frames
            )));
        }
        let mut state = self.init_state();
        let mut masks = Vec::with_capacity(ne.frames);
        for t in 0..ne.frames {
            masks.push(self.step(&ne.frame(t), &fe.frame(t), &mut state)?);
        }
        Ok(masks)
    }
}

/// Applies the complex mask in the compressed domain and decompresses:
/// the output magnitude is `(|z|^alpha * M_m)^(1/alpha)` and the phase is
/// rotated by `M_p`. The DC and Nyquist bins stay real: their phase
/// correction is skipped and the imaginary part is forced to zero.
pub fn apply_mask(
    z: &ComplexSpectrumFrame,
    mask: &ComplexMask,
    alpha: f64,
) -> Result<ComplexSpectrumFrame> {
    if z.bins.len() != mask.num_bins() {
        return Err(Error::Shape(format!(
            "apply_mask: frame has {} bins, mask {}",
            z.bins.len(),
            mask.num_bins()
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("features.alpha: {alpha} not in (0, 1]")));
    }
    let last = z.bins.len() - 1;
    let mut out = ComplexSpectrumFrame::zeros(z.bins.len(), z.frame_index);
    for (k, bin) in z.bins.iter().enumerate() {
        let compressed = bin.norm().powf(alpha) * mask.magnitude[k];
        let mag = decompress_magnitude(compressed, alpha);
        let base_phase = bin.im.atan2(bin.re);
        if k == 0 || k == last {
            out.bins[k] = num_complex::Complex::new(mag * base_phase.cos(), 0.0);
        } else {
            let phase = base_phase + mask.phase[k];
            out.bins[k] = num_complex::Complex::new(mag * phase.cos(), mag * phase.sin());
        }
    }
    Ok(out)
}
