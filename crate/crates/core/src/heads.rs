//! Extraction heads for aspect and opinion terms, the `[CLS]` classifiers
//! of the two auxiliary tasks, and their NLL losses.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamStore, Tensor, Var};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::layers::Linear;

/// Affine `d_h -> d_h` map followed by a softmax classifier, applied to
/// every position. No activation sits between the two layers.
#[derive(Clone, Copy, Debug)]
pub struct ExtractionHeadParams {
    pub hidden: Linear,
    pub output: Linear,
    pub classes: usize,
}

impl ExtractionHeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, name: &str, d_h: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::init(store, &format!("{name}.hidden"), d_h, d_h, rng),
            output: Linear::init(store, &format!("{name}.output"), d_h, classes, rng),
            classes,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ExtractionTrace {
    /// Intermediate states, one row per encoder row.
    pub z: Var,
    /// Row-stochastic tag distributions, one row per encoder row.
    pub probs: Var,
}

impl ExtractionTrace {
    /// `[n x d_h]` intermediate states of the tokens of instance `b`.
    pub fn token_z(&self, g: &Graph, enc: &EncoderOutput, b: usize) -> Tensor {
        let rows: Vec<usize> = enc.token_rows(b).collect();
        g.value(self.z).select_rows(&rows)
    }

    /// `[n x classes]` tag distributions of the tokens of instance `b`.
    pub fn token_probs(&self, g: &Graph, enc: &EncoderOutput, b: usize) -> Tensor {
        let rows: Vec<usize> = enc.token_rows(b).collect();
        g.value(self.probs).select_rows(&rows)
    }
}

pub fn extraction_forward(
    g: &mut Graph,
    p: &Bound,
    enc: &EncoderOutput,
    head: &ExtractionHeadParams,
) -> Result<ExtractionTrace> {
    if enc.token_counts.iter().any(|&n| n == 0) {
        return Err(Error::contract("extraction head needs at least one token position"));
    }
    let z = head.hidden.forward(g, p, enc.h)?;
    let logits = head.output.forward(g, p, z)?;
    let probs = g.softmax(logits, None)?;
    Ok(ExtractionTrace { z, probs })
}

/// Mean NLL of per-token gold class indices over the token rows of the
/// batch. `gold[b]` must have one entry per token of instance `b`.
pub fn token_nll(g: &mut Graph, probs: Var, enc: &EncoderOutput, gold: &[Vec<usize>]) -> Result<Var> {
    if gold.len() != enc.batch {
        return Err(Error::contract(format!(
            "{} gold sequences for a batch of {}",
            gold.len(),
            enc.batch
        )));
    }
    let mut targets = vec![0usize; enc.rows()];
    for (b, seq) in gold.iter().enumerate() {
        if seq.len() != enc.token_counts[b] {
            return Err(Error::contract(format!(
                "gold length {} differs from token count {} in instance {b}",
                seq.len(),
                enc.token_counts[b]
            )));
        }
        for (row, &t) in enc.token_rows(b).zip(seq) {
            targets[row] = t;
        }
    }
    g.nll(probs, &targets, &enc.token_mask())
}

/// Term extraction loss (aspect or opinion) from BIO class indices.
pub fn extraction_loss(
    g: &mut Graph,
    trace: &ExtractionTrace,
    enc: &EncoderOutput,
    gold: &[Vec<usize>],
) -> Result<Var> {
    token_nll(g, trace.probs, enc, gold)
}

/// What the masked span of a TSMTD instance was.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TermType {
    Aspect,
    Opinion,
    O,
}

impl TermType {
    pub const ALL: [TermType; 3] = [TermType::Aspect, TermType::Opinion, TermType::O];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AuxKind {
    Tsmtd,
    Prd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuxTarget {
    Tsmtd(TermType),
    /// Whether the replaced aspect and opinion form an annotated pair.
    Prd(bool),
}

impl AuxTarget {
    pub fn kind(self) -> AuxKind {
        match self {
            AuxTarget::Tsmtd(_) => AuxKind::Tsmtd,
            AuxTarget::Prd(_) => AuxKind::Prd,
        }
    }

    /// Class index: `Aspect, Opinion, O` for TSMTD and `True, False` for PRD.
    pub fn class(self) -> usize {
        match self {
            AuxTarget::Tsmtd(t) => t.index(),
            AuxTarget::Prd(true) => 0,
            AuxTarget::Prd(false) => 1,
        }
    }
}

impl fmt::Display for AuxTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuxTarget::Tsmtd(t) => write!(f, "{t:?}"),
            AuxTarget::Prd(true) => f.write_str("True"),
            AuxTarget::Prd(false) => f.write_str("False"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AuxHeadParams {
    pub tsmtd: Linear,
    pub prd: Linear,
}

impl AuxHeadParams {
    pub fn init<R: Rng>(store: &mut ParamStore, d_h: usize, rng: &mut R) -> Self {
        Self {
            tsmtd: Linear::init(store, "tsmtd_head", d_h, 3, rng),
            prd: Linear::init(store, "prd_head", d_h, 2, rng),
        }
    }
}

/// Class distributions from `[batch x d_h]` `[CLS]` states.
pub fn aux_forward(g: &mut Graph, p: &Bound, h_cls: Var, head: &AuxHeadParams, kind: AuxKind) -> Result<Var> {
    let layer = match kind {
        AuxKind::Tsmtd => head.tsmtd,
        AuxKind::Prd => head.prd,
    };
    let logits = layer.forward(g, p, h_cls)?;
    g.softmax(logits, None)
}

pub fn aux_loss(g: &mut Graph, probs: Var, targets: &[AuxTarget]) -> Result<Var> {
    let classes: Vec<usize> = targets.iter().map(|t| t.class()).collect();
    g.nll(probs, &classes, &vec![true; targets.len()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn enc_from(g: &mut Graph, h: Tensor, lengths: Vec<usize>, width: usize) -> EncoderOutput {
        let batch = lengths.len();
        EncoderOutput {
            h: g.constant(h),
            batch,
            width,
            token_counts: lengths.iter().map(|l| l - 2).collect(),
            lengths,
        }
    }

    #[test]
    fn zero_params_give_uniform_tags() {
        let mut store = ParamStore::new();
        let head = ExtractionHeadParams::init(&mut store, "ate", 4, 3, &mut ChaCha8Rng::seed_from_u64(1));
        for id in store.ids().collect::<Vec<_>>() {
            let [r, c] = store.get(id).shape();
            store.set(id, Tensor::zeros(r, c)).unwrap();
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = enc_from(&mut g, random(6, 4, &mut rng), vec![6], 6);
        let t = extraction_forward(&mut g, &p, &enc, &head).unwrap();
        assert!(g.value(t.probs).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let gold = vec![vec![0, 1, 2, 2]];
        let loss = extraction_loss(&mut g, &t, &enc, &gold).unwrap();
        assert!((g.value(loss).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn token_columns_ignore_padding() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ExtractionHeadParams::init(&mut store, "ate", 4, 3, &mut rng);
        let h = random(8, 4, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let enc = enc_from(&mut g, h, vec![6], 8);
        let t = extraction_forward(&mut g, &p, &enc, &head).unwrap();
        assert_eq!(t.token_z(&g, &enc, 0).shape(), [4, 4]);
        let probs = t.token_probs(&g, &enc, 0);
        for r in 0..4 {
            assert!((probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_rejects_length_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = ExtractionHeadParams::init(&mut store, "ate", 4, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let enc = enc_from(&mut g, random(5, 4, &mut rng), vec![5], 5);
        let t = extraction_forward(&mut g, &p, &enc, &head).unwrap();
        assert!(extraction_loss(&mut g, &t, &enc, &[vec![0, 1]]).is_err());
    }

    #[test]
    fn aux_heads_uniform_at_zero_and_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let head = AuxHeadParams::init(&mut store, 6, &mut rng);
        for trial in 0..500 {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let h = g.constant(random(2, 6, &mut rng));
            for (kind, k) in [(AuxKind::Tsmtd, 3), (AuxKind::Prd, 2)] {
                let probs = aux_forward(&mut g, &p, h, &head, kind).unwrap();
                assert_eq!(g.value(probs).cols(), k);
                for r in 0..2 {
                    assert!((g.value(probs).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12, "{trial}");
                }
            }
        }
        let mut zero = store.clone();
        for id in zero.ids().collect::<Vec<_>>() {
            let [r, c] = zero.get(id).shape();
            zero.set(id, Tensor::zeros(r, c)).unwrap();
        }
        let mut g = Graph::new();
        let p = zero.bind(&mut g);
        let h = g.constant(random(1, 6, &mut rng));
        let t = aux_forward(&mut g, &p, h, &head, AuxKind::Tsmtd).unwrap();
        assert!(g.value(t).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let r = aux_forward(&mut g, &p, h, &head, AuxKind::Prd).unwrap();
        assert_eq!(g.value(r).data(), &[0.5, 0.5]);
    }

    #[test]
    fn aux_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let head = AuxHeadParams::init(&mut store, 6, &mut rng);
        let h_id = store.add("h_cls", random(3, 6, &mut rng), false);
        let targets = [
            AuxTarget::Tsmtd(TermType::Aspect),
            AuxTarget::Tsmtd(TermType::O),
            AuxTarget::Tsmtd(TermType::Opinion),
        ];
        let prd = [AuxTarget::Prd(true), AuxTarget::Prd(false), AuxTarget::Prd(false)];
        let cfg = GradCheckConfig {
            tolerance: 1e-5,
            ..Default::default()
        };
        let report = grad_check(
            |g, p| {
                let h = p.var(h_id);
                let a = aux_forward(g, p, h, &head, AuxKind::Tsmtd)?;
                let la = aux_loss(g, a, &targets)?;
                let b = aux_forward(g, p, h, &head, AuxKind::Prd)?;
                let lb = aux_loss(g, b, &prd)?;
                g.add(la, lb)
            },
            &store,
            &cfg,
        )
        .unwrap();
        assert!(report.pass, "{report:#?}");
    }
}
