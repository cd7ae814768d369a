//! Detection heads: class-aware attention MIL, its class-agnostic ablation,
//! and a frame-supervised head used by the two supervised baselines.
//!
//! All heads sit on a same-length Conv1D+ReLU trunk over the fused features.
//! The weak heads score frames with `softmax(F·W2)` and train through an
//! attention-pooled clip feature classified by the *same* `W2`.

mod heads;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use heads::{attention, clip_loss, clip_predict, frame_scores, pool, select_row, POOL_EPS, PROB_FLOOR};
pub use params::{ConvParams, HeadParams, ModelParams, ModelShape, CHECKPOINT_MAGIC, DEFAULT_HIDDEN};

use crate::datamodel::Head;
use crate::error::{Error, Result};
use crate::numkernel::{conv1d, Gradients, Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Class-aware attention MIL.
    Ours,
    /// Single attention vector shared by all classes.
    ClsAgno,
    /// Frame-supervised on labels copied from narration cuts.
    NarrBas,
    /// Frame-supervised on ground-truth instances with a background class.
    Ful,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::ClsAgno, Variant::NarrBas, Variant::Ful];

    pub fn is_supervised(self) -> bool {
        matches!(self, Variant::NarrBas | Variant::Ful)
    }

    pub fn attention_rows(self, classes: usize) -> usize {
        match self {
            Variant::Ours => classes,
            Variant::ClsAgno => 1,
            Variant::NarrBas | Variant::Ful => 0,
        }
    }

    /// Classifier width; supervised heads append a background class at index `classes`.
    pub fn output_classes(self, classes: usize) -> usize {
        if self.is_supervised() {
            classes + 1
        } else {
            classes
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Ours => 0,
            Variant::ClsAgno => 1,
            Variant::NarrBas => 2,
            Variant::Ful => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ours => "ours",
            Variant::ClsAgno => "cls_agno",
            Variant::NarrBas => "narr_bas",
            Variant::Ful => "ful",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|v| v.to_string() == s.trim())
            .ok_or_else(|| format!("unknown variant `{s}` (expected ours, cls_agno, narr_bas or ful)"))
    }
}

/// Inverted dropout. Without an RNG (inference) or with `p = 0` it is the identity.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn inference() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn training(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        Self {
            p,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn mask(&mut self, rows: usize, cols: usize) -> Option<Matrix> {
        let rng = self.rng.as_mut()?;
        if self.p == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let data = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        Some(Matrix::new(rows, cols, data).expect("shape"))
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (rows, cols) = tape.value(x).shape();
        Ok(match self.mask(rows, cols) {
            Some(m) => tape.mask(x, m)?,
            None => x,
        })
    }
}

/// Parameter blocks registered as leaves on one tape.
pub struct Bound {
    trunks: Vec<(Var, Var)>,
    heads: [(Var, Var); 2],
    blocks: Vec<Var>,
}

impl Bound {
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        let blocks: Vec<Var> = params.blocks().into_iter().map(|b| tape.param(b.clone())).collect();
        let n = params.trunks.len();
        let trunks = (0..n).map(|i| (blocks[2 * i], blocks[2 * i + 1])).collect();
        let heads = [
            (blocks[2 * n], blocks[2 * n + 1]),
            (blocks[2 * n + 2], blocks[2 * n + 3]),
        ];
        Self { trunks, heads, blocks }
    }

    fn trunk(&self, head: Head) -> (Var, Var) {
        match head {
            Head::Noun if self.trunks.len() > 1 => self.trunks[1],
            _ => self.trunks[0],
        }
    }

    fn head(&self, head: Head) -> (Var, Var) {
        self.heads[head as usize]
    }

    /// Gradients for every block in storage order; untouched blocks get zeros.
    pub fn gradients(&self, grads: &mut Gradients, params: &ModelParams) -> Vec<Matrix> {
        self.blocks
            .iter()
            .zip(params.blocks())
            .map(|(v, b)| grads.take_or_zeros(*v, b.shape()))
            .collect()
    }
}

/// Values of one weak-head forward pass.
#[derive(Clone, Debug)]
pub struct ClipForward {
    /// Per-class attention, `C×L` (`1×L` class-agnostic).
    pub a_full: Matrix,
    /// Selected attention row after dropout, `1×L`.
    pub a_sel: Matrix,
    /// Per-frame class distribution, `L×C`.
    pub d: Matrix,
    /// Attention-pooled clip feature, `1×d`.
    pub pooled: Matrix,
    /// Clip class distribution, `1×C`.
    pub p: Matrix,
    pub loss: f64,
    pub loss_var: Var,
}

#[derive(Clone, Debug)]
pub struct SupervisedForward {
    /// Per-frame distribution including the background column, `L×(C+1)`.
    pub d: Matrix,
    /// Mean per-frame cross-entropy.
    pub loss: f64,
    pub loss_var: Var,
}

/// Conv1D+ReLU trunk with dropout on its output.
pub fn trunk_node(tape: &mut Tape, bound: &Bound, head: Head, input: Var, dropout: &mut Dropout) -> Result<Var> {
    let (kernel, bias) = bound.trunk(head);
    let f = tape.conv1d(input, kernel, bias)?;
    dropout.apply(tape, f)
}

fn check_class(params: &ModelParams, head: Head, class: usize) -> Result<()> {
    let c = params.shape.classes(head);
    if class >= c {
        return Err(Error::Config(format!("{head:?} label {class} outside {c} classes")));
    }
    Ok(())
}

fn weak_head(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    head: Head,
    frames: Var,
    class: usize,
    dropout: &mut Dropout,
) -> Result<ClipForward> {
    check_class(params, head, class)?;
    let (embeddings, classifier) = bound.head(head);
    let logits = tape.matmul_bt(embeddings, frames)?;
    let a_full = tape.sigmoid(logits);
    let row = if params.shape.variant == Variant::ClsAgno {
        0
    } else {
        class
    };
    let a_sel = tape.select_row(a_full, row)?;
    let a_sel = dropout.apply(tape, a_sel)?;
    let pooled = tape.weighted_mean(a_sel, frames, POOL_EPS)?;
    let clip_logits = tape.matmul(pooled, classifier)?;
    let p = tape.softmax_rows(clip_logits);
    let loss_var = tape.nll(p, &[class], PROB_FLOOR)?;
    let d = frame_scores(tape.value(frames), tape.value(classifier))?;
    Ok(ClipForward {
        a_full: tape.value(a_full).clone(),
        a_sel: tape.value(a_sel).clone(),
        d,
        pooled: tape.value(pooled).clone(),
        p: tape.value(p).clone(),
        loss: tape.value(loss_var).get(0, 0),
        loss_var,
    })
}

fn require_variant(params: &ModelParams, allowed: &[Variant], op: &str) -> Result<()> {
    if !allowed.contains(&params.shape.variant) {
        return Err(Error::Config(format!(
            "{op} is not defined for variant {}",
            params.shape.variant
        )));
    }
    Ok(())
}

/// Class-aware pipeline: trunk, attention, row selection, pooling, clip prediction, loss.
pub fn forward(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    input: Var,
    head: Head,
    class: usize,
    dropout: &mut Dropout,
) -> Result<ClipForward> {
    require_variant(params, &[Variant::Ours], "forward")?;
    let frames = trunk_node(tape, bound, head, input, dropout)?;
    weak_head(tape, bound, params, head, frames, class, dropout)
}

/// Same pipeline with a single class-agnostic attention vector.
pub fn forward_agnostic(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    input: Var,
    head: Head,
    class: usize,
    dropout: &mut Dropout,
) -> Result<ClipForward> {
    require_variant(params, &[Variant::ClsAgno], "forward_agnostic")?;
    let frames = trunk_node(tape, bound, head, input, dropout)?;
    weak_head(tape, bound, params, head, frames, class, dropout)
}

fn supervised_head(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    head: Head,
    frames: Var,
    labels: &[usize],
) -> Result<SupervisedForward> {
    let c = params.shape.classes(head);
    if let Some(&bad) = labels.iter().find(|&&l| l > c) {
        return Err(Error::Config(format!(
            "{head:?} frame label {bad} outside {c} classes + background"
        )));
    }
    let len = tape.value(frames).rows();
    if labels.len() != len {
        return Err(Error::Config(format!("{} frame labels for {len} frames", labels.len())));
    }
    let (_, classifier) = bound.head(head);
    let logits = tape.matmul(frames, classifier)?;
    let d = tape.softmax_rows(logits);
    let total = tape.nll(d, labels, PROB_FLOOR)?;
    let loss_var = tape.scale(total, 1.0 / len as f64);
    Ok(SupervisedForward {
        d: tape.value(d).clone(),
        loss: tape.value(loss_var).get(0, 0),
        loss_var,
    })
}

/// Frame-level head: mean per-frame cross-entropy, background is class index `C`.
pub fn forward_supervised(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    input: Var,
    head: Head,
    frame_labels: &[usize],
    dropout: &mut Dropout,
) -> Result<SupervisedForward> {
    require_variant(params, &[Variant::NarrBas, Variant::Ful], "forward_supervised")?;
    let frames = trunk_node(tape, bound, head, input, dropout)?;
    supervised_head(tape, bound, params, head, frames, frame_labels)
}

/// Training target for one clip.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Clip { verb: usize, noun: usize },
    Frames { verb: &'a [usize], noun: &'a [usize] },
}

/// Joint verb+noun loss for one clip. The trunk output (and its dropout mask)
/// is shared by both heads when the trunk is shared.
pub fn objective(
    tape: &mut Tape,
    bound: &Bound,
    params: &ModelParams,
    input: Var,
    target: Target<'_>,
    dropout: &mut Dropout,
) -> Result<Var> {
    let shared = if params.trunks.len() == 1 {
        Some(trunk_node(tape, bound, Head::Verb, input, dropout)?)
    } else {
        None
    };
    let mut losses = Vec::with_capacity(2);
    for head in Head::BOTH {
        let frames = match shared {
            Some(f) => f,
            None => trunk_node(tape, bound, head, input, dropout)?,
        };
        let loss = match (params.shape.variant, target) {
            (Variant::Ours | Variant::ClsAgno, Target::Clip { verb, noun }) => {
                let class = if head == Head::Verb { verb } else { noun };
                weak_head(tape, bound, params, head, frames, class, dropout)?.loss_var
            }
            (Variant::NarrBas | Variant::Ful, Target::Frames { verb, noun }) => {
                let labels = if head == Head::Verb { verb } else { noun };
                supervised_head(tape, bound, params, head, frames, labels)?.loss_var
            }
            (variant, _) => {
                return Err(Error::Config(format!(
                    "training target does not match variant {variant}"
                )));
            }
        };
        losses.push(loss);
    }
    Ok(tape.add(losses[0], losses[1])?)
}

/// Loss value and per-block gradients for one clip.
pub fn loss_and_grads(
    params: &ModelParams,
    features: &Matrix,
    target: Target<'_>,
    dropout: &mut Dropout,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let input = tape.constant(features.clone());
    let loss = objective(&mut tape, &bound, params, input, target, dropout)?;
    let mut grads = tape.backward(loss)?;
    Ok((tape.value(loss).get(0, 0), bound.gradients(&mut grads, params)))
}

/// Per-frame class scores for a whole sequence, verb then noun, background column removed.
pub fn infer_scores(params: &ModelParams, features: &Matrix) -> Result<[Matrix; 2]> {
    if features.cols() != params.shape.din {
        return Err(Error::Config(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            params.shape.din
        )));
    }
    let mut trunk_out: Vec<Matrix> = Vec::with_capacity(params.trunks.len());
    for t in &params.trunks {
        trunk_out.push(conv1d(features, &t.kernel, &t.bias)?);
    }
    let score = |head: Head| -> Result<Matrix> {
        let frames = &trunk_out[if head == Head::Noun && trunk_out.len() > 1 {
            1
        } else {
            0
        }];
        let d = frame_scores(frames, &params.head(head).classifier)?;
        Ok(if params.shape.variant.is_supervised() {
            d.slice_cols(0, d.cols() - 1)
        } else {
            d
        })
    };
    Ok([score(Head::Verb)?, score(Head::Noun)?])
}

#[cfg(test)]
mod tests;
