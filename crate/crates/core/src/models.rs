//! Neural classifiers. Every model maps a padded [`Batch`] to `[B, 6]`
//! logits on a tape; probabilities are the row softmax of those logits.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{pad_batch, NormalizedSample, NUM_CLASSES};
use crate::params::{uniform_init, Bound, BufferId, ParamId, ParamStore};
use crate::ssm::{mamba2_block, SsdConfig, SsdParams};
use crate::tensor::{softmax_in_place, BatchStats, NormSource, Result, Tape, Tensor, TensorError, Var};

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Invalid(msg.into()))
}

/// Zero-padded batch: one `[B, T, dim]` tensor per view, shared lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub views: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn new(views: Vec<Tensor>, lengths: Vec<usize>) -> Result<Self> {
        let Some(first) = views.first() else {
            return invalid("batch without views");
        };
        let s0 = first.shape().to_vec();
        if s0.len() != 3 || s0[0] != lengths.len() || s0[0] == 0 {
            return invalid(format!("batch view of shape {s0:?} with {} lengths", lengths.len()));
        }
        if let Some(v) = views.iter().find(|v| v.shape()[..2] != s0[..2] || v.shape().len() != 3) {
            return Err(TensorError::Shape {
                op: "batch views",
                left: s0,
                right: v.shape().to_vec(),
            });
        }
        if let Some(&l) = lengths.iter().find(|&&l| l == 0 || l > s0[1]) {
            return invalid(format!("length {l} outside 1..={}", s0[1]));
        }
        Ok(Self { views, lengths })
    }

    /// Pads the first `n_views` views of each sample.
    pub fn from_samples(samples: &[&NormalizedSample], n_views: usize) -> Result<Self> {
        let mut views = Vec::with_capacity(n_views);
        let mut lengths: Option<Vec<usize>> = None;
        for v in 0..n_views {
            let seqs: Vec<&Tensor> = samples
                .iter()
                .map(|s| s.views.get(v).ok_or_else(|| TensorError::Invalid(format!("sample lacks view {v}"))))
                .collect::<Result<_>>()?;
            let (padded, lens) = pad_batch(&seqs).map_err(|e| TensorError::Invalid(e.to_string()))?;
            match &lengths {
                Some(l) if *l != lens => return invalid("cross-view length mismatch"),
                _ => lengths = Some(lens),
            }
            views.push(padded);
        }
        Self::new(views, lengths.unwrap_or_default())
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn t_max(&self) -> usize {
        self.views[0].shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.views[0].shape()[2]
    }

    /// Valid rows of sample `b` in `view`, `[len, dim]`.
    pub fn sample(&self, view: usize, b: usize) -> Tensor {
        let (t, d) = (self.t_max(), self.dim());
        let off = b * t * d;
        let len = self.lengths[b];
        Tensor::new(&[len, d], self.views[view].data()[off..off + len * d].to_vec()).expect("valid length")
    }

    /// Row-validity mask over the flattened `[B*T]` positions.
    pub fn row_mask(&self) -> Vec<bool> {
        let t = self.t_max();
        self.lengths.iter().flat_map(|&l| (0..t).map(move |ti| ti < l)).collect()
    }
}

/// Dropout and batch-norm behaviour.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Batch statistics to fold into running buffers after a training step.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub stats: BatchStats,
}

pub struct Forward {
    /// `[B, 6]`
    pub logits: Var,
    pub running: Vec<RunningUpdate>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// `softmax(sum_v w_v * logits_v)`
    Logits,
    /// `softmax(sum_v w_v * softmax(logits_v))`
    Probs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MambaConfig {
    pub d_model: usize,
    pub expand: usize,
    pub n_heads: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub n_blocks: usize,
    /// What the multi-view ensemble weights.
    pub combine: Combine,
}

impl Default for MambaConfig {
    fn default() -> Self {
        let s = SsdConfig::default();
        Self {
            d_model: s.d_model,
            expand: s.expand,
            n_heads: s.n_heads,
            d_state: s.d_state,
            d_conv: s.d_conv,
            n_blocks: 2,
            combine: Combine::Logits,
        }
    }
}

impl MambaConfig {
    pub fn ssd(&self) -> SsdConfig {
        SsdConfig {
            d_model: self.d_model,
            expand: self.expand,
            n_heads: self.n_heads,
            d_state: self.d_state,
            d_conv: self.d_conv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnLstmConfig {
    pub conv_channels: usize,
    pub kernel_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
}

impl Default for CnnLstmConfig {
    fn default() -> Self {
        Self {
            conv_channels: 64,
            kernel_size: 3,
            hidden: 128,
            layers: 2,
            dropout: 0.25,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub hidden: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { hidden: 128 }
    }
}

fn linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.w"), uniform_init(rng, &[fan_in, fan_out], fan_in));
    let b = store.add(format!("{name}.b"), uniform_init(rng, &[fan_out], fan_in));
    (w, b)
}

fn apply_linear(tape: &mut Tape, bound: &Bound, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let y = tape.matmul(x, bound[w])?;
    tape.add_row(y, bound[b])
}

// ---------------------------------------------------------------- Mamba

/// Input projection, residual Mamba2 blocks, masked mean pool, linear head.
#[derive(Clone, Debug)]
pub struct FrontalMamba {
    pub input: (ParamId, ParamId),
    pub blocks: Vec<SsdParams>,
    pub head: (ParamId, ParamId),
}

impl FrontalMamba {
    pub fn init(store: &mut ParamStore, prefix: &str, cfg: &MambaConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_blocks == 0 {
            return invalid("mamba2 needs at least one block");
        }
        let ssd = cfg.ssd();
        let input = linear(store, rng, &format!("{prefix}.input"), dim, cfg.d_model);
        let blocks = (0..cfg.n_blocks)
            .map(|i| SsdParams::init(store, &format!("{prefix}.block{i}"), &ssd, rng))
            .collect::<Result<_>>()?;
        let head = linear(store, rng, &format!("{prefix}.head"), cfg.d_model, NUM_CLASSES);
        Ok(Self { input, blocks, head })
    }

    /// Logits `[6]` for one unpadded sequence `x[T, dim]`.
    pub fn sequence_logits(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let len = tape.shape(x)[0];
        let mut h = apply_linear(tape, bound, x, self.input)?;
        for block in &self.blocks {
            let y = mamba2_block(tape, bound, block, h)?;
            h = tape.add(h, y)?;
        }
        let pooled = tape.masked_mean_pool(h, len)?;
        let d = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[1, d])?;
        let logits = apply_linear(tape, bound, pooled, self.head)?;
        tape.reshape(logits, &[NUM_CLASSES])
    }

    /// Each sample runs over its valid rows only, so padding never leaks in.
    pub fn batch_logits(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, view: usize) -> Result<Var> {
        let dim = tape.shape(bound[self.input.0])[0];
        if batch.dim() != dim {
            return Err(TensorError::Shape {
                op: "mamba2 input",
                left: vec![batch.dim()],
                right: vec![dim],
            });
        }
        let rows = (0..batch.len())
            .map(|b| {
                let x = tape.constant(batch.sample(view, b));
                self.sequence_logits(tape, bound, x)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.stack(&rows)
    }
}

/// Three per-view frontal models combined by learnable weights.
#[derive(Clone, Debug)]
pub struct MultiViewEnsemble {
    pub members: Vec<FrontalMamba>,
    pub weights: ParamId,
    pub combine: Combine,
}

impl MultiViewEnsemble {
    pub fn init(store: &mut ParamStore, cfg: &MambaConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let members = ["front", "left", "right"]
            .iter()
            .map(|v| FrontalMamba::init(store, v, cfg, dim, rng))
            .collect::<Result<_>>()?;
        let weights = store.add("view_weights", Tensor::filled(&[3], 1.0 / 3.0));
        Ok(Self {
            members,
            weights,
            combine: cfg.combine,
        })
    }

    pub fn batch_logits(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        if batch.views.len() != self.members.len() {
            return invalid(format!("ensemble needs {} views, batch has {}", self.members.len(), batch.views.len()));
        }
        let mut acc: Option<Var> = None;
        for (v, m) in self.members.iter().enumerate() {
            let mut l = m.batch_logits(tape, bound, batch, v)?;
            if self.combine == Combine::Probs {
                l = tape.softmax(l);
            }
            let w = tape.scale_by(l, bound[self.weights], v)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, w)?,
                None => w,
            });
        }
        Ok(acc.expect("at least one member"))
    }
}

// ---------------------------------------------------------------- LSTM

#[derive(Clone, Debug)]
pub struct LstmDirection {
    /// `[in, 4H]`, gate order input, forget, cell, output.
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let h4 = 4 * hidden;
        Self {
            w_ih: store.add(format!("{prefix}.w_ih"), uniform_init(rng, &[input, h4], hidden)),
            w_hh: store.add(format!("{prefix}.w_hh"), uniform_init(rng, &[hidden, h4], hidden)),
            bias: store.add(format!("{prefix}.bias"), uniform_init(rng, &[h4], hidden)),
            hidden,
        }
    }

    /// Runs over `x[B, T, C]`; rows past a sample's length keep their state.
    /// Returns per-step hidden states and the final one.
    fn run(&self, tape: &mut Tape, bound: &Bound, x: Var, lengths: &[usize]) -> Result<(Vec<Var>, Var)> {
        let s = tape.shape(x).to_vec();
        let (b, t, c) = (s[0], s[1], s[2]);
        let hd = self.hidden;
        let flat = tape.reshape(x, &[b * t, c])?;
        let gx = apply_linear(tape, bound, flat, (self.w_ih, self.bias))?;
        let gx = tape.reshape(gx, &[b, t, 4 * hd])?;
        let mut h = tape.constant(Tensor::zeros(&[b, hd]));
        let mut cell = tape.constant(Tensor::zeros(&[b, hd]));
        let mut outs = Vec::with_capacity(t);
        for ti in 0..t {
            let g_in = tape.time_slice(gx, ti)?;
            let g_h = tape.matmul(h, bound[self.w_hh])?;
            let g = tape.add(g_in, g_h)?;
            let i = tape.slice_cols(g, 0, hd)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(g, hd, hd)?;
            let f = tape.sigmoid(f);
            let gg = tape.slice_cols(g, 2 * hd, hd)?;
            let gg = tape.tanh(gg);
            let o = tape.slice_cols(g, 3 * hd, hd)?;
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, gg)?;
            let c_new = tape.add(keep, write)?;
            let tc = tape.tanh(c_new);
            let h_new = tape.mul(o, tc)?;
            let mask: Vec<bool> = lengths.iter().map(|&l| ti < l).collect();
            if mask.iter().all(|&m| m) {
                h = h_new;
                cell = c_new;
            } else {
                h = tape.blend(h_new, h, &mask)?;
                cell = tape.blend(c_new, cell, &mask)?;
            }
            outs.push(h);
        }
        Ok((outs, h))
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub fwd: LstmDirection,
    pub bwd: LstmDirection,
}

/// Output of one bidirectional layer.
pub struct BiLstmOut {
    /// `[B, T, 2H]`, forward states then backward states per step.
    pub states: Var,
    /// Forward state at each sample's last valid step, `[B, H]`.
    pub last_fwd: Var,
    /// Backward state at step 0 (after reading the whole sequence), `[B, H]`.
    pub last_bwd: Var,
}

impl BiLstmLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fwd: LstmDirection::init(store, &format!("{prefix}.fwd"), input, hidden, rng),
            bwd: LstmDirection::init(store, &format!("{prefix}.bwd"), input, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, lengths: &[usize]) -> Result<BiLstmOut> {
        let (f_steps, last_fwd) = self.fwd.run(tape, bound, x, lengths)?;
        let xr = tape.reverse_valid(x, lengths)?;
        let (b_steps, last_bwd) = self.bwd.run(tape, bound, xr, lengths)?;
        let f = tape.stack_time(&f_steps)?;
        let b = tape.stack_time(&b_steps)?;
        let b = tape.reverse_valid(b, lengths)?;
        let states = tape.concat_cols(&[f, b])?;
        Ok(BiLstmOut {
            states,
            last_fwd,
            last_bwd,
        })
    }
}

/// Bidirectional LSTM over one sequence `x[T, C]`, returning `[T, 2H]`.
pub fn lstm_forward(tape: &mut Tape, bound: &Bound, layer: &BiLstmLayer, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return invalid("lstm_forward expects [T, C]");
    }
    let x3 = tape.reshape(x, &[1, s[0], s[1]])?;
    let out = layer.forward(tape, bound, x3, &[s[0]])?;
    let w = tape.shape(out.states)[2];
    tape.reshape(out.states, &[s[0], w])
}

// ---------------------------------------------------------------- CNN-LSTM

#[derive(Clone, Debug)]
pub struct ConvBlock {
    /// `[K * dim, channels]`; block `k` of rows reads frame `t - K + 1 + k`.
    /// No bias: batch norm's shift makes one redundant (its gradient is
    /// identically zero in training mode).
    pub w: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl ConvBlock {
    fn init(store: &mut ParamStore, prefix: &str, dim: usize, cfg: &CnnLstmConfig, rng: &mut impl Rng) -> Self {
        let fan_in = cfg.kernel_size * dim;
        let ch = cfg.conv_channels;
        Self {
            w: store.add(format!("{prefix}.conv.w"), uniform_init(rng, &[fan_in, ch], fan_in)),
            bn_gamma: store.add(format!("{prefix}.bn.gamma"), Tensor::filled(&[ch], 1.0)),
            bn_beta: store.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[ch])),
            running_mean: store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[ch])),
            running_var: store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::filled(&[ch], 1.0)),
        }
    }
}

/// Per-view conv blocks, a stacked bidirectional LSTM and a linear head on
/// the last valid step.
#[derive(Clone, Debug)]
pub struct CnnLstm {
    pub config: CnnLstmConfig,
    pub convs: Vec<ConvBlock>,
    pub lstm: Vec<BiLstmLayer>,
    pub head: (ParamId, ParamId),
}

impl CnnLstm {
    pub fn init(store: &mut ParamStore, cfg: &CnnLstmConfig, dim: usize, n_views: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.layers == 0 || cfg.hidden == 0 || cfg.conv_channels == 0 || cfg.kernel_size == 0 {
            return invalid("cnn_lstm sizes must be positive");
        }
        if !(0.0..1.0).contains(&cfg.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", cfg.dropout));
        }
        let names = ["front", "left", "right"];
        let convs = (0..n_views)
            .map(|v| ConvBlock::init(store, names.get(v).copied().unwrap_or("view"), dim, cfg, rng))
            .collect();
        let mut input = n_views * cfg.conv_channels;
        let mut lstm = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            lstm.push(BiLstmLayer::init(store, &format!("lstm{l}"), input, cfg.hidden, rng));
            input = 2 * cfg.hidden;
        }
        let head = linear(store, rng, "head", 2 * cfg.hidden, NUM_CLASSES);
        Ok(Self {
            config: cfg.clone(),
            convs,
            lstm,
            head,
        })
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &ParamStore,
        block: &ConvBlock,
        x: Var,
        mask: &[bool],
        mode: &mut Mode<'_>,
        running: &mut Vec<RunningUpdate>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let cols = tape.unfold_causal(x, cfg.kernel_size)?;
        let y = tape.matmul(cols, bound[block.w])?;
        let (y, stats) = match mode {
            Mode::Train(_) => tape.batch_norm(y, bound[block.bn_gamma], bound[block.bn_beta], NormSource::Batch { mask }, BN_EPS)?,
            Mode::Eval => tape.batch_norm(
                y,
                bound[block.bn_gamma],
                bound[block.bn_beta],
                NormSource::Fixed {
                    mean: store.buffer(block.running_mean).data(),
                    var: store.buffer(block.running_var).data(),
                },
                BN_EPS,
            )?,
        };
        if let Some(stats) = stats {
            running.push(RunningUpdate {
                mean: block.running_mean,
                var: block.running_var,
                stats,
            });
        }
        let y = tape.leaky_relu(y, cfg.leaky_slope);
        match mode {
            Mode::Train(rng) if cfg.dropout > 0.0 => {
                let keep = 1.0 - cfg.dropout;
                let n = tape.value(y).len();
                let m = (0..n)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                tape.mul_const(y, m)
            }
            _ => Ok(y),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, store: &ParamStore, batch: &Batch, mut mode: Mode<'_>) -> Result<Forward> {
        if batch.views.len() < self.convs.len() {
            return invalid(format!("cnn_lstm needs {} views, batch has {}", self.convs.len(), batch.views.len()));
        }
        let (b, t) = (batch.len(), batch.t_max());
        let mask = batch.row_mask();
        let mut running = Vec::new();
        let mut feats = Vec::with_capacity(self.convs.len());
        for (v, block) in self.convs.iter().enumerate() {
            let x = tape.constant(batch.views[v].clone());
            feats.push(self.conv_block(tape, bound, store, block, x, &mask, &mut mode, &mut running)?);
        }
        let f = if feats.len() == 1 { feats[0] } else { tape.concat_cols(&feats)? };
        let width = tape.shape(f)[1];
        let mut x = tape.reshape(f, &[b, t, width])?;
        let mut last = None;
        for layer in &self.lstm {
            let out = layer.forward(tape, bound, x, &batch.lengths)?;
            x = out.states;
            last = Some((out.last_fwd, out.last_bwd));
        }
        let (lf, lb) = last.expect("at least one layer");
        let rep = tape.concat_cols(&[lf, lb])?;
        let logits = apply_linear(tape, bound, rep, self.head)?;
        Ok(Forward { logits, running })
    }
}

// ---------------------------------------------------------------- baseline

/// Single-layer GRU over the per-frame concatenation of views.
#[derive(Clone, Debug)]
pub struct BaselineRnn {
    /// `[in, 3H]`, gate order reset, update, candidate.
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
    pub n_views: usize,
    pub head: (ParamId, ParamId),
}

impl BaselineRnn {
    pub fn init(store: &mut ParamStore, cfg: &BaselineConfig, dim: usize, n_views: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.hidden == 0 {
            return invalid("baseline hidden size must be positive");
        }
        let hd = cfg.hidden;
        let input = dim * n_views;
        Ok(Self {
            w_ih: store.add("gru.w_ih", uniform_init(rng, &[input, 3 * hd], hd)),
            b_ih: store.add("gru.b_ih", uniform_init(rng, &[3 * hd], hd)),
            w_hh: store.add("gru.w_hh", uniform_init(rng, &[hd, 3 * hd], hd)),
            b_hh: store.add("gru.b_hh", uniform_init(rng, &[3 * hd], hd)),
            hidden: hd,
            n_views,
            head: linear(store, rng, "head", hd, NUM_CLASSES),
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch) -> Result<Var> {
        if batch.views.len() < self.n_views {
            return invalid(format!("baseline needs {} views, batch has {}", self.n_views, batch.views.len()));
        }
        let (b, t, hd) = (batch.len(), batch.t_max(), self.hidden);
        let views: Vec<Var> = batch.views[..self.n_views].iter().map(|v| tape.constant(v.clone())).collect();
        let x = if views.len() == 1 { views[0] } else { tape.concat_cols(&views)? };
        let c = tape.shape(x)[2];
        let flat = tape.reshape(x, &[b * t, c])?;
        let gx = apply_linear(tape, bound, flat, (self.w_ih, self.b_ih))?;
        let gx = tape.reshape(gx, &[b, t, 3 * hd])?;
        let mut h = tape.constant(Tensor::zeros(&[b, hd]));
        for ti in 0..t {
            let g_in = tape.time_slice(gx, ti)?;
            let g_h = apply_linear(tape, bound, h, (self.w_hh, self.b_hh))?;
            let ri = tape.slice_cols(g_in, 0, hd)?;
            let rh = tape.slice_cols(g_h, 0, hd)?;
            let r = tape.add(ri, rh)?;
            let r = tape.sigmoid(r);
            let zi = tape.slice_cols(g_in, hd, hd)?;
            let zh = tape.slice_cols(g_h, hd, hd)?;
            let z = tape.add(zi, zh)?;
            let z = tape.sigmoid(z);
            let ni = tape.slice_cols(g_in, 2 * hd, hd)?;
            let nh = tape.slice_cols(g_h, 2 * hd, hd)?;
            let nh = tape.mul(r, nh)?;
            let n = tape.add(ni, nh)?;
            let n = tape.tanh(n);
            // h' = (1 - z) n + z h = n + z (h - n)
            let d = tape.sub(h, n)?;
            let zd = tape.mul(z, d)?;
            let h_new = tape.add(n, zd)?;
            let mask: Vec<bool> = batch.lengths.iter().map(|&l| ti < l).collect();
            h = if mask.iter().all(|&m| m) { h_new } else { tape.blend(h_new, h, &mask)? };
        }
        apply_linear(tape, bound, h, self.head)
    }
}

// ---------------------------------------------------------------- wrapper

#[derive(Clone, Debug)]
pub enum Arch {
    Mamba(FrontalMamba),
    Ensemble(MultiViewEnsemble),
    CnnLstm(CnnLstm),
    Baseline(BaselineRnn),
}

/// A network: parameter storage plus the layer layout that reads it.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub arch: Arch,
    pub dim: usize,
}

impl Model {
    pub fn frontal_mamba(cfg: &MambaConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let m = FrontalMamba::init(&mut store, "front", cfg, dim, rng)?;
        Ok(Self { store, arch: Arch::Mamba(m), dim })
    }

    pub fn ensemble(cfg: &MambaConfig, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let m = MultiViewEnsemble::init(&mut store, cfg, dim, rng)?;
        Ok(Self { store, arch: Arch::Ensemble(m), dim })
    }

    pub fn cnn_lstm(cfg: &CnnLstmConfig, dim: usize, n_views: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let m = CnnLstm::init(&mut store, cfg, dim, n_views, rng)?;
        Ok(Self { store, arch: Arch::CnnLstm(m), dim })
    }

    pub fn baseline(cfg: &BaselineConfig, dim: usize, n_views: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let m = BaselineRnn::init(&mut store, cfg, dim, n_views, rng)?;
        Ok(Self { store, arch: Arch::Baseline(m), dim })
    }

    pub fn n_views(&self) -> usize {
        match &self.arch {
            Arch::Mamba(_) => 1,
            Arch::Ensemble(e) => e.members.len(),
            Arch::CnnLstm(m) => m.convs.len(),
            Arch::Baseline(m) => m.n_views,
        }
    }

    /// Logits for `batch` with parameters taken from `bound` (normally
    /// `self.store.bind(tape)`).
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, batch: &Batch, mode: Mode<'_>) -> Result<Forward> {
        if batch.views.len() < self.n_views() {
            return invalid(format!("model needs {} views, batch has {}", self.n_views(), batch.views.len()));
        }
        if batch.dim() != self.dim {
            return Err(TensorError::Shape {
                op: "model input",
                left: vec![batch.dim()],
                right: vec![self.dim],
            });
        }
        let logits = match &self.arch {
            Arch::Mamba(m) => m.batch_logits(tape, bound, batch, 0)?,
            Arch::Ensemble(e) => e.batch_logits(tape, bound, batch)?,
            Arch::CnnLstm(m) => return m.forward(tape, bound, &self.store, batch, mode),
            Arch::Baseline(m) => m.forward(tape, bound, batch)?,
        };
        Ok(Forward {
            logits,
            running: Vec::new(),
        })
    }

    /// Evaluation-mode logits `[B, 6]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, batch, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Evaluation-mode class probabilities `[B, 6]`.
    pub fn predict_proba(&self, batch: &Batch) -> Result<Tensor> {
        let mut p = self.logits(batch)?;
        p.data_mut().chunks_mut(NUM_CLASSES).for_each(softmax_in_place);
        Ok(p)
    }

    /// Arg-max class codes; ties go to the lower code.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.data().chunks(NUM_CLASSES).map(argmax).collect())
    }

    /// Folds training-mode batch statistics into the running buffers.
    pub fn apply_running(&mut self, updates: &[RunningUpdate]) {
        let momentum = match &self.arch {
            Arch::CnnLstm(m) => m.config.bn_momentum,
            _ => return,
        };
        for u in updates {
            let mean = self.store.buffer_mut(u.mean).data_mut();
            mean.iter_mut()
                .zip(&u.stats.mean)
                .for_each(|(r, &s)| *r = (1.0 - momentum) * *r + momentum * s);
            let var = self.store.buffer_mut(u.var).data_mut();
            var.iter_mut()
                .zip(&u.stats.var)
                .for_each(|(r, &s)| *r = (1.0 - momentum) * *r + momentum * s);
        }
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
