//! The acoustic model: MCNN front layers, a BLSTM stack, a softmax
//! prediction head and the transposed-convolution decoder used for
//! pretraining.

mod config;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

pub use config::{BranchConfig, McnnLayerConfig, ModelConfig, Padding, DECODER_KERNEL};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_DIM};
use crate::grad::{Array, BatchStats, NormMode, ParamId, ParamStore, Tape, Var};
use crate::rng::{purpose, tagged};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Clone, Copy, Debug)]
struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct McnnIds {
    branches: Vec<ParamId>,
    residual: ParamId,
    bn: BnIds,
}

#[derive(Clone, Copy, Debug)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct BlstmIds {
    fwd: LstmIds,
    bwd: LstmIds,
    w_f: ParamId,
    w_b: ParamId,
    b: ParamId,
    bn: BnIds,
}

#[derive(Clone, Copy, Debug)]
struct HeadIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    affine_w: ParamId,
    affine_b: ParamId,
    /// Indexed by MCNN layer.
    skips: Vec<ParamId>,
    ups: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Section {
    Backbone,
    Head,
    Decoder,
}

impl Section {
    pub fn of(name: &str) -> Section {
        if name.starts_with("head.") {
            Section::Head
        } else if name.starts_with("dec.") {
            Section::Decoder
        } else {
            Section::Backbone
        }
    }
}

/// Forward-pass context: training passes carry a dropout stream and collect
/// batch-norm statistics for the running averages.
pub struct Pass<'a> {
    rng: Option<&'a mut dyn RngCore>,
    updates: Vec<(BnIds, BatchStats)>,
}

impl<'a> Pass<'a> {
    pub fn eval() -> Self {
        Self {
            rng: None,
            updates: Vec::new(),
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            rng: Some(rng),
            updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.rng.is_some()
    }
}

/// Batch-norm statistics gathered by a training pass.
pub struct RunningUpdates(Vec<(BnIds, BatchStats)>);

impl Pass<'_> {
    pub fn into_updates(self) -> RunningUpdates {
        RunningUpdates(self.updates)
    }
}

/// Hidden sequences of one BLSTM layer for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct BlstmLayerState {
    /// `[T', H]`, left to right.
    pub forward_h: Var,
    /// `[T', H]`, in natural time order.
    pub backward_h: Var,
    /// `[T', H]` merged output before normalization.
    pub output: Var,
}

/// Backbone outputs of a batch.
pub struct BackboneOutput {
    /// `[T', H]` per utterance.
    pub sequences: Vec<Var>,
    /// MCNN layer outputs `[C_l, T_l, 39]` per utterance, per layer.
    pub skips: Vec<Vec<Var>>,
    /// Input frame counts.
    pub frames: Vec<usize>,
}

#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    mcnn: Vec<McnnIds>,
    blstm: Vec<BlstmIds>,
    head: HeadIds,
    decoder: Option<DecoderIds>,
}

fn he_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Array::new(shape.to_vec(), data).expect("positive extents")
}

struct Builder<'r, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'r mut R,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let v = he_uniform(self.rng, shape, fan_in);
        self.store.add(name, v, true)
    }

    fn fixed(&mut self, name: String, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        self.store.add(name, Array::full(shape, value), trainable)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIds {
        BnIds {
            gamma: self.fixed(format!("{prefix}.bn.gamma"), &[c], 1.0, true),
            beta: self.fixed(format!("{prefix}.bn.beta"), &[c], 0.0, true),
            mean: self.fixed(format!("{prefix}.bn.running_mean"), &[c], 0.0, false),
            var: self.fixed(format!("{prefix}.bn.running_var"), &[c], 1.0, false),
        }
    }

    fn lstm(&mut self, prefix: &str, d: usize, h: usize) -> LstmIds {
        let w_ih = self.weight(format!("{prefix}.w_ih"), &[d, 4 * h], d);
        let w_hh = self.weight(format!("{prefix}.w_hh"), &[h, 4 * h], h);
        let mut bias = vec![0.0; 4 * h];
        bias[h..2 * h].fill(FORGET_BIAS);
        let bias = self
            .store
            .add(format!("{prefix}.bias"), Array::new(vec![4 * h], bias).unwrap(), true);
        LstmIds { w_ih, w_hh, bias }
    }

    fn head(&mut self, h: usize, v: usize) -> HeadIds {
        HeadIds {
            w: self.weight("head.w".into(), &[h, v], h),
            b: self.fixed("head.b".into(), &[v], 0.0, true),
        }
    }
}

impl Model {
    /// A freshly initialized model. Weights are drawn from the `INIT` stream
    /// of `seed`, the prediction head from the `HEAD_INIT` stream.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = tagged(seed, purpose::INIT, 0, 0);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let mut mcnn = Vec::new();
        let mut cin = 1;
        for (l, layer) in config.mcnn_layers.iter().enumerate() {
            let branches = layer
                .branches
                .iter()
                .enumerate()
                .map(|(i, br)| {
                    b.weight(
                        format!("mcnn{l}.branch{i}.w"),
                        &[br.channels, cin, br.kernel_time, br.kernel_freq],
                        cin * br.kernel_time * br.kernel_freq,
                    )
                })
                .collect();
            let cout = layer.channels();
            let residual = b.weight(format!("mcnn{l}.residual.w"), &[cout, cin, 1, 1], cin);
            let bn = b.bn(&format!("mcnn{l}"), cout);
            mcnn.push(McnnIds {
                branches,
                residual,
                bn,
            });
            cin = cout;
        }
        let h = config.blstm_hidden;
        let mut d = cin * FEATURE_DIM;
        let mut blstm = Vec::new();
        for l in 0..config.blstm_layers {
            let p = format!("blstm{l}");
            let fwd = b.lstm(&format!("{p}.fwd"), d, h);
            let bwd = b.lstm(&format!("{p}.bwd"), d, h);
            let w_f = b.weight(format!("{p}.merge.w_f"), &[h, h], 2 * h);
            let w_b = b.weight(format!("{p}.merge.w_b"), &[h, h], 2 * h);
            let bias = b.fixed(format!("{p}.merge.b"), &[h], 0.0, true);
            let bn = b.bn(&p, h);
            blstm.push(BlstmIds {
                fwd,
                bwd,
                w_f,
                w_b,
                b: bias,
                bn,
            });
            d = h;
        }
        let decoder = config.dae_decoder.then(|| {
            let ch = config.mcnn_channels();
            let top = ch[ch.len() - 1] * FEATURE_DIM;
            let affine_w = b.weight("dec.affine.w".into(), &[h, top], h);
            let affine_b = b.fixed("dec.affine.b".into(), &[top], 0.0, true);
            let (kt, kf) = DECODER_KERNEL;
            let mut skips = Vec::new();
            let mut ups = Vec::new();
            for (l, &c) in ch.iter().enumerate() {
                skips.push(b.weight(format!("dec.skip{l}.w"), &[c, c, 1, 1], c));
                let below = if l == 0 { c } else { ch[l - 1] };
                let w = b.weight(format!("dec.up{l}.w"), &[c, below, kt, kf], c * kt * kf);
                let bias = b.fixed(format!("dec.up{l}.b"), &[below], 0.0, true);
                ups.push((w, bias));
            }
            let out_w = b.weight("dec.out.w".into(), &[1, ch[0], 1, 1], ch[0]);
            let out_b = b.fixed("dec.out.b".into(), &[1], 0.0, true);
            DecoderIds {
                affine_w,
                affine_b,
                skips,
                ups,
                out_w,
                out_b,
            }
        });
        let mut head_rng = tagged(seed, purpose::HEAD_INIT, 0, 0);
        b.rng = &mut head_rng;
        let head = b.head(h, config.vocab_size);
        Ok(Self {
            config,
            store: b.store,
            mcnn,
            blstm,
            head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    /// Parameter ids of one section, in creation order.
    pub fn section_ids(&self, section: Section) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| Section::of(&self.store.get(id).name) == section)
            .collect()
    }

    /// Sets the trainable flag of every learnable backbone parameter.
    /// Running statistics stay non-trainable.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for id in self.section_ids(Section::Backbone) {
            if !self.store.get(id).name.contains(".bn.running_") {
                self.store.set_trainable(id, trainable);
            }
        }
    }

    pub fn set_decoder_trainable(&mut self, trainable: bool) {
        for id in self.section_ids(Section::Decoder) {
            self.store.set_trainable(id, trainable);
        }
    }

    pub fn set_head_trainable(&mut self, trainable: bool) {
        self.store.set_trainable(self.head.w, trainable);
        self.store.set_trainable(self.head.b, trainable);
    }

    /// Redraws the prediction head from the `HEAD_INIT` stream of `seed`.
    pub fn reinit_head(&mut self, seed: u64) -> Result<()> {
        let mut rng = tagged(seed, purpose::HEAD_INIT, 0, 0);
        let (h, v) = (self.config.blstm_hidden, self.config.vocab_size);
        self.store.set_value(self.head.w, he_uniform(&mut rng, &[h, v], h))?;
        self.store.set_value(self.head.b, Array::zeros(&[v]))?;
        Ok(())
    }

    /// Learnable scalar count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.contains(".bn.running_"))
            .map(|(_, p)| p.value().len())
            .sum()
    }

    /// `(name, value)` for every parameter, in a fixed order.
    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.store.iter().map(|(_, p)| (p.name.as_str(), p.value()))
    }

    /// Copies values by name. Every parameter of the selected sections must
    /// be present with a matching shape; other entries are ignored.
    pub fn load_values<'n>(
        &mut self,
        entries: impl IntoIterator<Item = (&'n str, &'n Array)>,
        sections: &[Section],
    ) -> Result<()> {
        let mut loaded = vec![false; self.store.len()];
        for (name, value) in entries {
            if let Some(id) = self.store.find(name) {
                if sections.contains(&Section::of(name)) {
                    self.store.set_value(id, value.clone())?;
                    loaded[id.index()] = true;
                }
            }
        }
        for id in self.store.ids() {
            let name = &self.store.get(id).name;
            if sections.contains(&Section::of(name)) && !loaded[id.index()] {
                return Err(Error::MissingParameter(name.clone()));
            }
        }
        Ok(())
    }

    /// Folds the batch statistics of a training pass into the running
    /// averages.
    pub fn apply_running_updates(&mut self, updates: RunningUpdates) -> Result<()> {
        for (ids, stats) in updates.0 {
            for (id, batch) in [(ids.mean, &stats.mean), (ids.var, &stats.var)] {
                let mut v = self.store.value(id).clone();
                for (r, b) in v.data_mut().iter_mut().zip(batch) {
                    *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                }
                self.store.set_value(id, v)?;
            }
        }
        Ok(())
    }

    /// Batch-normalizes a group of utterances jointly: the inputs are joined
    /// along `time_axis`, normalized over `channel_axis`, and split again.
    /// Layers whose scale is frozen use their running statistics.
    fn batch_norm_group(
        &self,
        tape: &mut Tape,
        xs: &[Var],
        time_axis: usize,
        channel_axis: usize,
        ids: BnIds,
        pass: &mut Pass<'_>,
    ) -> Result<Vec<Var>> {
        let gamma = tape.param(&self.store, ids.gamma)?;
        let beta = tape.param(&self.store, ids.beta)?;
        let use_batch = pass.is_train() && self.store.is_trainable(ids.gamma);
        let lens: Vec<usize> = xs.iter().map(|&x| tape.shape(x)[time_axis]).collect();
        let joined = if xs.len() == 1 {
            xs[0]
        } else {
            tape.concat(xs, time_axis)?
        };
        let mode = if use_batch {
            NormMode::Batch
        } else {
            NormMode::Running {
                mean: self.store.value(ids.mean).data(),
                var: self.store.value(ids.var).data(),
            }
        };
        let (y, stats) = tape.batch_norm(joined, gamma, beta, channel_axis, mode, BN_EPS)?;
        if let Some(stats) = stats {
            pass.updates.push((ids, stats));
        }
        if xs.len() == 1 {
            return Ok(vec![y]);
        }
        let mut out = Vec::with_capacity(xs.len());
        let mut start = 0;
        for len in lens {
            out.push(tape.slice(y, time_axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, pass: &mut Pass<'_>) -> Result<Var> {
        match pass.rng.as_deref_mut() {
            Some(rng) if self.config.dropout > 0.0 => tape.dropout(x, self.config.dropout, rng),
            _ => Ok(x),
        }
    }

    /// Runs the MCNN layers on `[1, T, 39]` inputs. Returns, per layer, the
    /// output map of every utterance.
    pub fn mcnn_forward(
        &self,
        tape: &mut Tape,
        inputs: &[Var],
        pass: &mut Pass<'_>,
    ) -> Result<Vec<Vec<Var>>> {
        for &x in inputs {
            let s = tape.shape(x);
            if s.len() != 3 || s[0] != 1 || s[2] != FEATURE_DIM {
                return Err(Error::Shape {
                    op: "mcnn_forward",
                    detail: format!("expected [1, T, {FEATURE_DIM}], got {s:?}"),
                });
            }
        }
        let mut layers = Vec::with_capacity(self.mcnn.len());
        let mut current = inputs.to_vec();
        for (cfg, ids) in self.config.mcnn_layers.iter().zip(&self.mcnn) {
            let stride = (cfg.stride, 1);
            let weights = ids
                .branches
                .iter()
                .map(|&id| tape.param(&self.store, id))
                .collect::<Result<Vec<_>>>()?;
            let residual = tape.param(&self.store, ids.residual)?;
            let mut summed = Vec::with_capacity(current.len());
            for &x in &current {
                let branches = weights
                    .iter()
                    .map(|&w| tape.conv2d(x, w, None, stride))
                    .collect::<Result<Vec<_>>>()?;
                let cat = tape.concat(&branches, 0)?;
                let res = tape.conv2d(x, residual, None, stride)?;
                summed.push(tape.add(cat, res)?);
            }
            let normed = self.batch_norm_group(tape, &summed, 1, 0, ids.bn, pass)?;
            current = normed
                .into_iter()
                .map(|y| self.dropout(tape, y, pass))
                .collect::<Result<Vec<_>>>()?;
            layers.push(current.clone());
        }
        Ok(layers)
    }

    fn lstm_direction(&self, tape: &mut Tape, x: Var, ids: LstmIds) -> Result<Var> {
        let h = self.config.blstm_hidden;
        let t_len = tape.shape(x)[0];
        let w_ih = tape.param(&self.store, ids.w_ih)?;
        let w_hh = tape.param(&self.store, ids.w_hh)?;
        let bias = tape.param(&self.store, ids.bias)?;
        let proj = tape.matmul(x, w_ih)?;
        let xw = tape.add_bias(proj, bias)?;
        let mut hs = Vec::with_capacity(t_len);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..t_len {
            let mut gates = tape.slice(xw, 0, t, 1)?;
            if let Some((h_prev, _)) = state {
                let rec = tape.matmul(h_prev, w_hh)?;
                gates = tape.add(gates, rec)?;
            }
            let i_pre = tape.slice(gates, 1, 0, h)?;
            let f_pre = tape.slice(gates, 1, h, h)?;
            let g_pre = tape.slice(gates, 1, 2 * h, h)?;
            let o_pre = tape.slice(gates, 1, 3 * h, h)?;
            let i = tape.sigmoid(i_pre);
            let g = tape.tanh(g_pre);
            let o = tape.sigmoid(o_pre);
            let ig = tape.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(f_pre);
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c);
            let h_t = tape.mul(o, tc)?;
            hs.push(h_t);
            state = Some((h_t, c));
        }
        if hs.len() == 1 {
            Ok(hs[0])
        } else {
            tape.concat(&hs, 0)
        }
    }

    /// One bidirectional layer on a `[T', D]` sequence, before normalization.
    pub fn blstm_layer(&self, tape: &mut Tape, x: Var, layer: usize) -> Result<BlstmLayerState> {
        let ids = self.blstm.get(layer).ok_or_else(|| Error::Shape {
            op: "blstm_layer",
            detail: format!("layer {layer} of {}", self.blstm.len()),
        })?;
        let forward_h = self.lstm_direction(tape, x, ids.fwd)?;
        let reversed = tape.reverse(x)?;
        let back_rev = self.lstm_direction(tape, reversed, ids.bwd)?;
        let backward_h = tape.reverse(back_rev)?;
        let w_f = tape.param(&self.store, ids.w_f)?;
        let w_b = tape.param(&self.store, ids.w_b)?;
        let b = tape.param(&self.store, ids.b)?;
        let lf = tape.matmul(forward_h, w_f)?;
        let lb = tape.matmul(backward_h, w_b)?;
        let sum = tape.add(lf, lb)?;
        let output = tape.add_bias(sum, b)?;
        Ok(BlstmLayerState {
            forward_h,
            backward_h,
            output,
        })
    }

    /// Runs the BLSTM stack on `[T', D]` sequences.
    pub fn blstm_forward(
        &self,
        tape: &mut Tape,
        seqs: &[Var],
        pass: &mut Pass<'_>,
    ) -> Result<Vec<Var>> {
        let mut current = seqs.to_vec();
        for (l, ids) in self.blstm.iter().enumerate() {
            let merged = current
                .iter()
                .map(|&x| self.blstm_layer(tape, x, l).map(|s| s.output))
                .collect::<Result<Vec<_>>>()?;
            let normed = self.batch_norm_group(tape, &merged, 0, 1, ids.bn, pass)?;
            current = normed
                .into_iter()
                .map(|y| self.dropout(tape, y, pass))
                .collect::<Result<Vec<_>>>()?;
        }
        Ok(current)
    }

    /// MCNN then BLSTM on a batch of feature matrices.
    pub fn backbone_forward(
        &self,
        tape: &mut Tape,
        batch: &[&FeatureMatrix],
        pass: &mut Pass<'_>,
    ) -> Result<BackboneOutput> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset("batch"));
        }
        let inputs = batch
            .iter()
            .map(|f| {
                let a = Array::new(vec![1, f.num_frames(), FEATURE_DIM], f.data().to_vec())?;
                tape.constant(a)
            })
            .collect::<Result<Vec<_>>>()?;
        let skips = self.mcnn_forward(tape, &inputs, pass)?;
        let top = skips.last().expect("at least one MCNN layer");
        let mut seqs = Vec::with_capacity(top.len());
        for &m in top {
            let s = tape.shape(m).to_vec();
            let swapped = tape.swap_leading(m)?;
            seqs.push(tape.reshape(swapped, vec![s[1], s[0] * s[2]])?);
        }
        let sequences = self.blstm_forward(tape, &seqs, pass)?;
        Ok(BackboneOutput {
            sequences,
            skips,
            frames: batch.iter().map(|f| f.num_frames()).collect(),
        })
    }

    /// Time-distributed affine map and softmax: `[T', H] -> [T', V]`.
    pub fn prediction_forward(&self, tape: &mut Tape, seq: Var) -> Result<Var> {
        let s = tape.shape(seq);
        if s.len() != 2 || s[1] != self.config.blstm_hidden {
            return Err(Error::Shape {
                op: "prediction_forward",
                detail: format!("expected [T', {}], got {s:?}", self.config.blstm_hidden),
            });
        }
        let w = tape.param(&self.store, self.head.w)?;
        let b = tape.param(&self.store, self.head.b)?;
        let z = tape.matmul(seq, w)?;
        let logits = tape.add_bias(z, b)?;
        tape.softmax(logits)
    }

    /// Reconstructs `[frames, 39]` features from one utterance's backbone
    /// output and its MCNN layer outputs.
    pub fn dae_decode(
        &self,
        tape: &mut Tape,
        seq: Var,
        skips: &[Var],
        frames: usize,
    ) -> Result<Var> {
        let dec = self.decoder.as_ref().ok_or_else(|| {
            Error::Config("model was built without the reconstruction decoder".into())
        })?;
        let ch = self.config.mcnn_channels();
        if skips.len() != ch.len() {
            return Err(Error::Shape {
                op: "dae_decode",
                detail: format!("{} skips for {} MCNN layers", skips.len(), ch.len()),
            });
        }
        let extents = self.config.mcnn_extents(frames);
        let top_c = ch[ch.len() - 1];
        let t_top = extents[extents.len() - 1];
        if tape.shape(seq)[0] != t_top {
            return Err(Error::Shape {
                op: "dae_decode",
                detail: format!(
                    "backbone length {} for {frames} frames (expected {t_top})",
                    tape.shape(seq)[0]
                ),
            });
        }
        let w = tape.param(&self.store, dec.affine_w)?;
        let b = tape.param(&self.store, dec.affine_b)?;
        let z = tape.matmul(seq, w)?;
        let z = tape.add_bias(z, b)?;
        let z = tape.reshape(z, vec![t_top, top_c, FEATURE_DIM])?;
        let mut x = tape.swap_leading(z)?;
        for l in (0..ch.len()).rev() {
            let skip_w = tape.param(&self.store, dec.skips[l])?;
            let proj = tape.conv2d(skips[l], skip_w, None, (1, 1))?;
            x = tape.add(x, proj)?;
            let (up_w, up_b) = dec.ups[l];
            let up_w = tape.param(&self.store, up_w)?;
            let up_b = tape.param(&self.store, up_b)?;
            let below = if l == 0 { frames } else { extents[l - 1] };
            let stride = (self.config.mcnn_layers[l].stride, 1);
            x = tape.conv_transpose2d(x, up_w, Some(up_b), stride, (below, FEATURE_DIM))?;
        }
        let out_w = tape.param(&self.store, dec.out_w)?;
        let out_b = tape.param(&self.store, dec.out_b)?;
        let y = tape.conv2d(x, out_w, Some(out_b), (1, 1))?;
        tape.reshape(y, vec![frames, FEATURE_DIM])
    }

    /// Probability rows `[T', V]` for each utterance, in evaluation mode.
    pub fn predict(&self, batch: &[&FeatureMatrix]) -> Result<Vec<Array>> {
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let out = self.backbone_forward(&mut tape, batch, &mut pass)?;
        let mut probs = Vec::with_capacity(out.sequences.len());
        for &s in &out.sequences {
            let p = self.prediction_forward(&mut tape, s)?;
            probs.push(tape.value(p).clone());
        }
        Ok(probs)
    }

    /// Reconstructions `[T, 39]` of each input, in evaluation mode.
    pub fn reconstruct(&self, batch: &[&FeatureMatrix]) -> Result<Vec<FeatureMatrix>> {
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        let out = self.backbone_forward(&mut tape, batch, &mut pass)?;
        let mut recs = Vec::with_capacity(batch.len());
        for (i, &s) in out.sequences.iter().enumerate() {
            let skips: Vec<Var> = out.skips.iter().map(|l| l[i]).collect();
            let r = self.dae_decode(&mut tape, s, &skips, out.frames[i])?;
            recs.push(FeatureMatrix::from_frames(tape.value(r).data().to_vec())?);
        }
        Ok(recs)
    }
}

impl core::fmt::Debug for Model {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("parameters", &self.store.len())
            .finish()
    }
}
