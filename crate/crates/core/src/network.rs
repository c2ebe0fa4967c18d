//! Sequence encoders, attention, the softmax head, and whole-model
//! forward/backward.
//!
//! Pipeline per branch: fusion input → (bi-)directional encoder → inverted
//! dropout (training only) → attention pooling (or mean pooling when
//! attention is off) → softmax head. Score-level fusion runs two branches,
//! one per stream, and averages their probability vectors.
//!
//! Layout choices:
//! * the attention score is a scalar per step (`Wh` has a single row);
//! * dropout sits on the encoder outputs, before attention;
//! * backward-direction outputs are stored at the position of the input that
//!   produced them before concatenation.

use serde::{Deserialize, Serialize};

use crate::cells::{init_cell_params, CellKind, CellParams, CellState, StepCache};
use crate::data::{assemble_fusion_input, EncoderInput, FusionStrategy, SamplePair};
use crate::error::{Error, Result};
use crate::numerics::{glorot_uniform, softmax, Matrix, RngStream, Vector};
use crate::params::{join, Parameters, TensorRef};

/// Probability floor applied before the log in the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cell: CellKind,
    pub fusion: FusionStrategy,
    /// Per-stream embedding dimension of the raw samples.
    pub input_dim: usize,
    pub hidden: usize,
    /// Raw sequence length of the samples.
    pub steps: usize,
    pub bidirectional: bool,
    pub attention: bool,
    pub dropout: f64,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.check(self.cell)?;
        if self.input_dim == 0 || self.hidden == 0 || self.steps == 0 {
            return Err(Error::Config(
                "input_dim, hidden and steps must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Width of each encoder output vector.
    pub fn encoder_out_dim(&self) -> usize {
        if self.bidirectional {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    /// Input width of the cells after fusion assembly.
    pub fn cell_input_dim(&self) -> usize {
        self.fusion.encoder_shape(self.input_dim, self.steps).0
    }
}

/// Forward cell plus, when bidirectional, an independent backward cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub forward_cell: CellParams,
    pub backward_cell: Option<CellParams>,
}

impl EncoderParams {
    pub fn out_dim(&self) -> usize {
        self.forward_cell.hidden_dim() * if self.backward_cell.is_some() { 2 } else { 1 }
    }
}

/// Scalar attention score per step: `u_i = tanh(Wh·h_i + bh)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wh: Matrix,
    pub bh: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub wc: Matrix,
    pub bc: Vector,
}

/// One encoder → pooling → classifier stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
    pub head: HeadParams,
}

impl Branch {
    fn zeros(cfg: &ModelConfig) -> Self {
        let (m, d) = (cfg.cell_input_dim(), cfg.hidden);
        let out = cfg.encoder_out_dim();
        Branch {
            encoder: EncoderParams {
                forward_cell: CellParams::zeros(cfg.cell, m, d),
                backward_cell: cfg
                    .bidirectional
                    .then(|| CellParams::zeros(cfg.cell, m, d)),
            },
            attention: cfg.attention.then(|| AttentionParams {
                wh: Matrix::zeros(1, out),
                bh: Vector::zeros(1),
            }),
            head: HeadParams {
                wc: Matrix::zeros(cfg.num_classes, out),
                bc: Vector::zeros(cfg.num_classes),
            },
        }
    }
}

impl Parameters for Branch {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        let mut out = self.encoder.forward_cell.tensors(&join(prefix, "enc.fwd"));
        if let Some(b) = &self.encoder.backward_cell {
            out.extend(b.tensors(&join(prefix, "enc.bwd")));
        }
        if let Some(a) = &self.attention {
            out.push(TensorRef {
                name: join(prefix, "att.wh"),
                shape: vec![a.wh.rows(), a.wh.cols()],
                data: a.wh.as_slice(),
            });
            out.push(TensorRef {
                name: join(prefix, "att.bh"),
                shape: vec![a.bh.len()],
                data: &a.bh,
            });
        }
        out.push(TensorRef {
            name: join(prefix, "head.wc"),
            shape: vec![self.head.wc.rows(), self.head.wc.cols()],
            data: self.head.wc.as_slice(),
        });
        out.push(TensorRef {
            name: join(prefix, "head.bc"),
            shape: vec![self.head.bc.len()],
            data: &self.head.bc,
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.forward_cell.tensors_mut();
        if let Some(b) = &mut self.encoder.backward_cell {
            out.extend(b.tensors_mut());
        }
        if let Some(a) = &mut self.attention {
            out.push(a.wh.as_mut_slice());
            out.push(&mut a.bh);
        }
        out.push(self.head.wc.as_mut_slice());
        out.push(&mut self.head.bc);
        out
    }
}

/// Every trainable tensor of a model; also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub branches: Vec<Branch>,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        ModelParams {
            branches: (0..cfg.fusion.branches()).map(|_| Branch::zeros(cfg)).collect(),
        }
    }
}

impl Parameters for ModelParams {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        self.branches
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.tensors(&join(prefix, &format!("branch{i}"))))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.branches
            .iter_mut()
            .flat_map(|b| b.tensors_mut())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// A model with every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::zeros(&config);
        Ok(Model { config, params })
    }

    /// Glorot-uniform weights from `seed`; forget biases 1, every other bias,
    /// peephole and the attention bias 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut stream = RngStream::new(seed);
        let (m, d) = (config.cell_input_dim(), config.hidden);
        let out = config.encoder_out_dim();
        let mut branches = Vec::new();
        for _ in 0..config.fusion.branches() {
            let forward_cell = init_cell_params(config.cell, m, d, &mut stream)?;
            let backward_cell = if config.bidirectional {
                Some(init_cell_params(config.cell, m, d, &mut stream)?)
            } else {
                None
            };
            let attention = config.attention.then(|| AttentionParams {
                wh: glorot_uniform(&mut stream, 1, out),
                bh: Vector::zeros(1),
            });
            let head = HeadParams {
                wc: glorot_uniform(&mut stream, config.num_classes, out),
                bc: Vector::zeros(config.num_classes),
            };
            branches.push(Branch {
                encoder: EncoderParams {
                    forward_cell,
                    backward_cell,
                },
                attention,
                head,
            });
        }
        Ok(Model {
            config,
            params: ModelParams { branches },
        })
    }

    pub fn check_sample(&self, sample: &SamplePair) -> Result<()> {
        sample
            .check_dims(self.config.steps, self.config.input_dim)
            .map_err(|msg| Error::shape("model_forward", msg))?;
        if sample.label >= self.config.num_classes {
            return Err(Error::Config(format!(
                "label {} out of range for {} classes",
                sample.label, self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, sample: &SamplePair) -> Result<Vector> {
        let mut unused = RngStream::new(0);
        Ok(model_forward(self, sample, false, &mut unused)?.0)
    }
}

/// Runs `cell` over `input` from the zero state. Output `i` always belongs to
/// input position `i`; `reversed` only changes the iteration order.
pub fn run_sequence(
    cell: &CellParams,
    input: &EncoderInput,
    reversed: bool,
) -> Result<(Vec<Vector>, Vec<StepCache>)> {
    if input.streams.len() != cell.kind.stream_count() {
        return Err(Error::shape(
            "run_sequence",
            format!(
                "{} cell needs {} stream(s), input has {}",
                cell.kind,
                cell.kind.stream_count(),
                input.streams.len()
            ),
        ));
    }
    let n = input.steps();
    if n == 0 || input.streams.iter().any(|s| s.len() != n) {
        return Err(Error::shape("run_sequence", "empty or ragged input streams"));
    }
    let mut state = CellState::zeros(cell.hidden_dim());
    let mut outs = vec![Vector::default(); n];
    let mut caches: Vec<Option<StepCache>> = (0..n).map(|_| None).collect();
    let order: Box<dyn Iterator<Item = usize>> = if reversed {
        Box::new((0..n).rev())
    } else {
        Box::new(0..n)
    };
    let mut first = true;
    for i in order {
        let xs = input.at(i);
        let (next, cache) = if first {
            first = false;
            cell.step(&xs, &state)?
        } else {
            cell.step_unchecked_checked_inputs(&xs, &state)?
        };
        outs[i] = next.h.clone();
        caches[i] = Some(cache);
        state = next;
    }
    Ok((outs, caches.into_iter().map(|c| c.expect("every step ran")).collect()))
}

impl CellParams {
    // Input widths can differ per step only through malformed data, so keep
    // a cheap width check while skipping the full block validation.
    fn step_unchecked_checked_inputs(
        &self,
        xs: &[&[f64]],
        prev: &CellState,
    ) -> Result<(CellState, StepCache)> {
        let m = self.input_dim();
        if xs.iter().any(|x| x.len() != m) {
            return Err(Error::shape("cell step", format!("input width != {m}")));
        }
        Ok(self.step_unchecked(xs, prev))
    }
}

struct EncoderCache {
    forward: Vec<StepCache>,
    backward: Option<Vec<StepCache>>,
}

fn encode_cached(enc: &EncoderParams, input: &EncoderInput) -> Result<(Vec<Vector>, EncoderCache)> {
    let (fwd_out, fwd_cache) = run_sequence(&enc.forward_cell, input, false)?;
    match &enc.backward_cell {
        None => Ok((
            fwd_out,
            EncoderCache {
                forward: fwd_cache,
                backward: None,
            },
        )),
        Some(bc) => {
            let (bwd_out, bwd_cache) = run_sequence(bc, input, true)?;
            let out = fwd_out
                .iter()
                .zip(&bwd_out)
                .map(|(f, b)| Vector::concat(&[f, b]))
                .collect();
            Ok((
                out,
                EncoderCache {
                    forward: fwd_cache,
                    backward: Some(bwd_cache),
                },
            ))
        }
    }
}

/// Uni: forward outputs. Bi: `[forward_h_i ; backward_h_i]` per position.
pub fn encode(enc: &EncoderParams, input: &EncoderInput) -> Result<Vec<Vector>> {
    Ok(encode_cached(enc, input)?.0)
}

/// Returns the dropped sequence and the per-element multipliers
/// (0 or `1/(1−rate)`), or `None` when dropout is inactive.
fn dropout_with_mask(
    seq: &[Vector],
    rate: f64,
    stream: &mut RngStream,
    training: bool,
) -> (Vec<Vector>, Option<Vec<Vector>>) {
    if !training || rate == 0.0 {
        return (seq.to_vec(), None);
    }
    let keep = 1.0 / (1.0 - rate);
    let masks: Vec<Vector> = seq
        .iter()
        .map(|v| {
            Vector(
                (0..v.len())
                    .map(|_| if stream.uniform() < rate { 0.0 } else { keep })
                    .collect(),
            )
        })
        .collect();
    let out = seq
        .iter()
        .zip(&masks)
        .map(|(v, m)| Vector(v.iter().zip(m.iter()).map(|(a, b)| a * b).collect()))
        .collect();
    (out, Some(masks))
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` (one uniform draw per element) and survivors scaled by
/// `1/(1−rate)`; at inference it is the identity.
pub fn apply_dropout(
    seq: &[Vector],
    rate: f64,
    stream: &mut RngStream,
    training: bool,
) -> Result<Vec<Vector>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout {rate} outside [0, 1)")));
    }
    Ok(dropout_with_mask(seq, rate, stream, training).0)
}

/// Returns `(Σ a_i h_i, a)` with `a = softmax(tanh(Wh·h_i + bh))`.
pub fn attention_forward(att: &AttentionParams, seq: &[Vector]) -> Result<(Vector, Vector)> {
    let (emb, weights, _) = attention_cached(att, seq)?;
    Ok((emb, weights))
}

fn attention_cached(att: &AttentionParams, seq: &[Vector]) -> Result<(Vector, Vector, Vec<f64>)> {
    if seq.is_empty() {
        return Err(Error::shape("attention_forward", "empty sequence"));
    }
    let dim = att.wh.cols();
    if att.wh.rows() != 1 || att.bh.len() != 1 || seq.iter().any(|h| h.len() != dim) {
        return Err(Error::shape(
            "attention_forward",
            format!(
                "Wh {:?}, bh {}, sequence widths must equal {dim}",
                att.wh.shape(),
                att.bh.len()
            ),
        ));
    }
    let scores: Vec<f64> = seq
        .iter()
        .map(|h| (crate::numerics::dot(att.wh.row(0), h) + att.bh[0]).tanh())
        .collect();
    let weights = softmax(&scores);
    let mut emb = Vector::zeros(dim);
    for (a, h) in weights.iter().zip(seq) {
        emb.axpy(*a, h);
    }
    Ok((emb, weights, scores))
}

fn mean_pool(seq: &[Vector]) -> Vector {
    let mut emb = Vector::zeros(seq[0].len());
    for h in seq {
        emb.add_assign(h);
    }
    emb.scale(1.0 / seq.len() as f64);
    emb
}

/// `softmax(Wc·emb + bc)`.
pub fn classify(head: &HeadParams, emb: &[f64]) -> Result<Vector> {
    let logits = crate::numerics::affine(&head.wc, emb, &head.bc)?;
    Ok(softmax(&logits))
}

struct BranchCache {
    encoder: EncoderCache,
    masks: Option<Vec<Vector>>,
    /// Encoder outputs after dropout, i.e. the pooling input.
    pooled_in: Vec<Vector>,
    attention: Option<(Vector, Vec<f64>)>,
    emb: Vector,
    probs: Vector,
}

/// Everything [`model_backward`] needs from a forward pass.
pub struct ForwardCache {
    config: ModelConfig,
    branches: Vec<BranchCache>,
    probs: Vector,
}

impl ForwardCache {
    pub fn probs(&self) -> &Vector {
        &self.probs
    }

    pub fn branch_probs(&self) -> Vec<&Vector> {
        self.branches.iter().map(|b| &b.probs).collect()
    }

    /// Dropout multipliers of branch `b`, when dropout was active.
    pub fn dropout_masks(&self, b: usize) -> Option<&[Vector]> {
        self.branches[b].masks.as_deref()
    }

    pub fn attention_weights(&self, b: usize) -> Option<&Vector> {
        self.branches[b].attention.as_ref().map(|(a, _)| a)
    }
}

/// Whole-model forward pass. `stream` drives dropout (training only).
pub fn model_forward(
    model: &Model,
    sample: &SamplePair,
    training: bool,
    stream: &mut RngStream,
) -> Result<(Vector, ForwardCache)> {
    model.check_sample(sample)?;
    let cfg = &model.config;
    let inputs = assemble_fusion_input(sample, cfg.fusion, cfg.cell)?;
    let mut branches = Vec::with_capacity(inputs.len());
    for (branch, input) in model.params.branches.iter().zip(&inputs) {
        let (enc_out, encoder) = encode_cached(&branch.encoder, input)?;
        let (pooled_in, masks) = dropout_with_mask(&enc_out, cfg.dropout, stream, training);
        let (emb, attention) = match &branch.attention {
            Some(att) => {
                let (emb, weights, scores) = attention_cached(att, &pooled_in)?;
                (emb, Some((weights, scores)))
            }
            None => (mean_pool(&pooled_in), None),
        };
        let probs = classify(&branch.head, &emb)?;
        branches.push(BranchCache {
            encoder,
            masks,
            pooled_in,
            attention,
            emb,
            probs,
        });
    }
    let probs = if branches.len() == 1 {
        branches[0].probs.clone()
    } else {
        let mut p = Vector::zeros(cfg.num_classes);
        for b in &branches {
            p.add_assign(&b.probs);
        }
        p.scale(1.0 / branches.len() as f64);
        p
    };
    Ok((
        probs.clone(),
        ForwardCache {
            config: cfg.clone(),
            branches,
            probs,
        },
    ))
}

/// `−ln(max(probs[label], 1e−12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-probs[label].max(PROB_FLOOR).ln())
}

/// Gradients of the cross-entropy loss with respect to every parameter,
/// accumulated into `grads`.
pub fn model_backward_into(
    model: &Model,
    cache: &ForwardCache,
    label: usize,
    grads: &mut ModelParams,
) -> Result<()> {
    if cache.config != model.config || cache.branches.len() != model.params.branches.len() {
        return Err(Error::Config(
            "forward cache does not belong to this model".into(),
        ));
    }
    if label >= model.config.num_classes {
        return Err(Error::Config(format!("label {label} out of range")));
    }
    if grads.branches.len() != model.params.branches.len() {
        return Err(Error::Config("gradient set layout mismatch".into()));
    }

    // dL/dP for the (averaged) probability vector.
    let k = model.config.num_classes;
    let mut dprobs = vec![0.0; k];
    if cache.probs[label] > PROB_FLOOR {
        dprobs[label] = -1.0 / cache.probs[label];
    }
    let share = 1.0 / cache.branches.len() as f64;

    for ((branch, bc), grad) in model
        .params
        .branches
        .iter()
        .zip(&cache.branches)
        .zip(grads.branches.iter_mut())
    {
        // Softmax Jacobian: dz = p ⊙ (dp − ⟨dp, p⟩).
        let p = &bc.probs;
        let dp: Vec<f64> = dprobs.iter().map(|g| share * g).collect();
        let inner: f64 = dp.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        let dlogits: Vec<f64> = (0..k).map(|c| p[c] * (dp[c] - inner)).collect();
        branch_backward(branch, bc, &dlogits, grad);
    }
    Ok(())
}

/// Fresh gradient set for one sample.
pub fn model_backward(model: &Model, cache: &ForwardCache, label: usize) -> Result<ModelParams> {
    let mut grads = ModelParams::zeros(&model.config);
    model_backward_into(model, cache, label, &mut grads)?;
    Ok(grads)
}

fn branch_backward(branch: &Branch, bc: &BranchCache, dlogits: &[f64], grad: &mut Branch) {
    // Head.
    grad.head.wc.outer_acc(dlogits, &bc.emb);
    grad.head.bc.add_assign(dlogits);
    let mut demb = Vector::zeros(bc.emb.len());
    branch.head.wc.matvec_t_acc(dlogits, &mut demb);

    // Pooling.
    let n = bc.pooled_in.len();
    let mut dseq: Vec<Vector> = match (&branch.attention, &bc.attention) {
        (Some(att), Some((weights, scores))) => {
            let gatt = grad.attention.as_mut().expect("attention gradient present");
            let mut dseq: Vec<Vector> = weights
                .iter()
                .map(|&a| {
                    let mut v = demb.clone();
                    v.scale(a);
                    v
                })
                .collect();
            let da: Vec<f64> = bc
                .pooled_in
                .iter()
                .map(|h| crate::numerics::dot(h, &demb))
                .collect();
            let mean: f64 = weights.iter().zip(&da).map(|(a, d)| a * d).sum();
            for i in 0..n {
                let du = weights[i] * (da[i] - mean);
                let ds = du * (1.0 - scores[i] * scores[i]);
                if ds != 0.0 {
                    gatt.wh.outer_acc(&[ds], &bc.pooled_in[i]);
                    gatt.bh[0] += ds;
                    dseq[i].axpy(ds, att.wh.row(0));
                }
            }
            dseq
        }
        _ => {
            let mut v = demb.clone();
            v.scale(1.0 / n as f64);
            vec![v; n]
        }
    };

    // Dropout.
    if let Some(masks) = &bc.masks {
        for (d, m) in dseq.iter_mut().zip(masks) {
            for (a, b) in d.iter_mut().zip(m.iter()) {
                *a *= b;
            }
        }
    }

    // Encoder, BPTT over each direction.
    let hd = branch.encoder.forward_cell.hidden_dim();
    let enc = &branch.encoder;
    let genc = &mut grad.encoder;
    {
        let mut carry = CellState::zeros(hd);
        for i in (0..n).rev() {
            let mut dh = Vector::from_slice(&dseq[i][..hd]);
            dh.add_assign(&carry.h);
            let (_, prev) = enc.forward_cell.backward_unchecked(
                &bc.encoder.forward[i],
                &dh,
                &carry.c,
                &mut genc.forward_cell,
            );
            carry = prev;
        }
    }
    if let (Some(cell), Some(caches), Some(gcell)) = (
        &enc.backward_cell,
        &bc.encoder.backward,
        genc.backward_cell.as_mut(),
    ) {
        let mut carry = CellState::zeros(hd);
        for i in 0..n {
            let mut dh = Vector::from_slice(&dseq[i][hd..]);
            dh.add_assign(&carry.h);
            let (_, prev) = cell.backward_unchecked(&caches[i], &dh, &carry.c, gcell);
            carry = prev;
        }
    }
}

/// Loss of one sample under a fixed dropout seed; the gradient checker's
/// objective.
pub fn sample_loss(model: &Model, sample: &SamplePair, training: bool, dropout_seed: u64) -> Result<f64> {
    let mut stream = RngStream::new(dropout_seed);
    let (probs, _) = model_forward(model, sample, training, &mut stream)?;
    cross_entropy(&probs, sample.label)
}
