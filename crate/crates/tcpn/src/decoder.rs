//! Class-conditioned attention decoder. Every step tensor carries the
//! category batch as its leading dimension, so one lockstep loop serves a
//! single category or all of them; per-row arithmetic is identical either
//! way, which makes batched and singleton decoding bit-equal.
//!
//! Step order: recurrent state update from (previous context ⊕ previous
//! token embedding), then coverage attention over token features, then the
//! predict distribution, the copy gate, and the mixed output distribution.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::doc::{Vocabulary, EOS_ID, PAD_ID, UNK_ID};
use crate::model::{Bound, ModelConfig, CLASS_EMBED, TOKEN_EMBED};
use std::collections::BTreeMap;

/// Recurrent quantities flowing step to step; all [B, ...].
pub struct StepState {
    /// [B,h] recurrent state.
    pub s: NodeId,
    /// [B,N] accumulated attention.
    pub coverage: NodeId,
    /// [B,d] previous attention context, zeros before the first step.
    pub context: NodeId,
}

/// Everything one step produces besides the carried state.
pub struct StepOut {
    pub state: StepState,
    /// [B,N] attention weights.
    pub alpha: NodeId,
    /// [B,V] dictionary distribution.
    pub p_pred: NodeId,
    /// [B,1] copy gate.
    pub p_copy: NodeId,
}

pub fn init_state(g: &mut Graph, bound: &Bound, b: usize, n: usize, d: usize) -> StepState {
    let s = g.gather_rows(bound.id("dec.s0"), vec![0; b]);
    let coverage = g.leaf(Tensor::zeros(&[b, n]));
    let context = g.leaf(Tensor::zeros(&[b, d]));
    StepState { s, coverage, context }
}

/// Class conditioning rows for the given 1-based category class ids.
pub fn class_rows(g: &mut Graph, bound: &Bound, class_ids: &[usize]) -> NodeId {
    g.gather_rows(bound.id(CLASS_EMBED), class_ids.to_vec())
}

/// Coverage attention: scores mix the class vector, each token feature, the
/// recurrent state, and the per-position attention history.
pub fn attention(
    g: &mut Graph,
    bound: &Bound,
    f: NodeId,
    class: NodeId,
    s: NodeId,
    coverage: NodeId,
) -> (NodeId, NodeId) {
    let (b, n) = {
        let cs = g.shape(coverage);
        (cs[0], cs[1])
    };
    let w1c = g.matmul_nt(class, bound.id("dec.att.w1"));
    let w3s = g.matmul_nt(s, bound.id("dec.att.w3"));
    let per_cat_small = g.add(w1c, w3s);
    let w2f = g.matmul_nt(f, bound.id("dec.att.w2"));
    let cov_col = g.reshape(coverage, &[b * n, 1]);
    let w4cov = g.matmul_nt(cov_col, bound.id("dec.att.w4"));

    let idx_cat: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat(r).take(n)).collect();
    let idx_pos: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
    let per_cat = g.gather_rows(per_cat_small, idx_cat);
    let per_pos = g.gather_rows(w2f, idx_pos);

    let mut pre = g.add(per_cat, per_pos);
    pre = g.add(pre, w4cov);
    pre = g.add_row_vec(pre, bound.id("dec.att.b1"));
    let th = g.tanh(pre);
    let e = g.matmul_nt(th, bound.id("dec.att.we"));
    let e_rows = g.reshape(e, &[b, n]);
    let alpha = g.softmax_last(e_rows);
    let context = g.matmul(alpha, f);
    (alpha, context)
}

/// One full decode step. `x` is the previous token's embedding rows [B,d].
pub fn decode_step(
    g: &mut Graph,
    bound: &Bound,
    f: NodeId,
    class: NodeId,
    x: NodeId,
    st: &StepState,
) -> StepOut {
    let inp = g.concat_last(st.context, x);
    let gate_in = g.concat_last(inp, st.s);
    let z_lin = g.linear(gate_in, bound.id("dec.gru.wz"), bound.id("dec.gru.bz"));
    let z = g.sigmoid(z_lin);
    let r_lin = g.linear(gate_in, bound.id("dec.gru.wr"), bound.id("dec.gru.br"));
    let r = g.sigmoid(r_lin);
    let rs = g.mul(r, st.s);
    let cand_in = g.concat_last(inp, rs);
    let cand_lin = g.linear(cand_in, bound.id("dec.gru.wh"), bound.id("dec.gru.bh"));
    let cand = g.tanh(cand_lin);
    let zs = g.mul(z, st.s);
    let omz = g.affine(z, -1.0, 1.0);
    let omz_cand = g.mul(omz, cand);
    let s_new = g.add(zs, omz_cand);

    let (alpha, context) = attention(g, bound, f, class, s_new, st.coverage);
    let coverage_new = g.add(st.coverage, alpha);

    let pred_in = g.concat_last(context, s_new);
    let pred_lin = g.linear(pred_in, bound.id("dec.pred.w"), bound.id("dec.pred.b"));
    let p_pred = g.softmax_last(pred_lin);

    let c6 = g.matmul_nt(context, bound.id("dec.copy.w6"));
    let c7 = g.matmul_nt(s_new, bound.id("dec.copy.w7"));
    let c8 = g.matmul_nt(x, bound.id("dec.copy.w8"));
    let mut copy_lin = g.add(c6, c7);
    copy_lin = g.add(copy_lin, c8);
    copy_lin = g.add_row_vec(copy_lin, bound.id("dec.copy.b"));
    let p_copy = g.sigmoid(copy_lin);

    StepOut {
        state: StepState { s: s_new, coverage: coverage_new, context },
        alpha,
        p_pred,
        p_copy,
    }
}

/// A token the mixed distribution can emit: a dictionary entry or an
/// out-of-vocabulary input character reachable only through copying.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Cand {
    Vocab(usize),
    Oov(char),
}

/// Mixed output distribution over dictionary tokens and input characters:
/// copy mass pools the attention of every position holding the token, the
/// predict term covers dictionary entries.
pub fn p_final_map(
    alpha: &[f64],
    p_pred: &[f64],
    p_copy: f64,
    input_tokens: &[char],
    vocab: &Vocabulary,
) -> BTreeMap<Cand, f64> {
    assert_eq!(alpha.len(), input_tokens.len());
    let mut out: BTreeMap<Cand, f64> = BTreeMap::new();
    for (id, p) in p_pred.iter().enumerate() {
        out.insert(Cand::Vocab(id), (1.0 - p_copy) * p);
    }
    for (i, &ch) in input_tokens.iter().enumerate() {
        let key = match vocab.id_strict(ch) {
            Some(id) => Cand::Vocab(id),
            None => Cand::Oov(ch),
        };
        *out.entry(key).or_insert(0.0) += p_copy * alpha[i];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSource {
    /// Copied; carries the attention-argmax input position.
    Copy(usize),
    Predict,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub token: char,
    pub source: StepSource,
}

/// Greedy left-to-right decode of every requested category in lockstep.
/// Returns one trace per category, EOS stripped; an immediate EOS leaves an
/// empty trace.
pub fn greedy_decode(
    g: &mut Graph,
    bound: &Bound,
    cfg: &ModelConfig,
    f: NodeId,
    class_ids: &[usize],
    input_tokens: &[char],
    vocab: &Vocabulary,
    max_len: usize,
) -> Vec<Vec<TraceStep>> {
    assert!(max_len >= 1);
    let b = class_ids.len();
    let n = input_tokens.len();
    assert_eq!(g.shape(f), &[n, cfg.d], "feature rows must match input tokens");
    let class = class_rows(g, bound, class_ids);
    let mut state = init_state(g, bound, b, n, cfg.d);
    let mut x_ids = vec![EOS_ID; b];
    let mut traces: Vec<Vec<TraceStep>> = vec![Vec::new(); b];
    let mut done = vec![false; b];

    for _ in 0..max_len {
        let x = g.gather_rows(bound.id(TOKEN_EMBED), x_ids.clone());
        let out = decode_step(g, bound, f, class, x, &state);
        let alpha_all = g.value(out.alpha).data().to_vec();
        let pred_all = g.value(out.p_pred).data().to_vec();
        let pc_all = g.value(out.p_copy).data().to_vec();
        let v = vocab.len();

        for r in 0..b {
            if done[r] {
                continue;
            }
            let alpha = &alpha_all[r * n..(r + 1) * n];
            let p_pred = &pred_all[r * v..(r + 1) * v];
            let pc = pc_all[r];
            let dist = p_final_map(alpha, p_pred, pc, input_tokens, vocab);
            let (&best, _) = dist
                .iter()
                .filter(|(c, _)| !matches!(c, Cand::Vocab(id) if *id == PAD_ID || *id == UNK_ID))
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("candidate set never empty");
            match best {
                Cand::Vocab(id) if id == EOS_ID => {
                    done[r] = true;
                    x_ids[r] = EOS_ID;
                }
                _ => {
                    let (ch, copy_mass, pred_mass) = match best {
                        Cand::Vocab(id) => {
                            let ch = vocab.char_of(id).expect("specials excluded above");
                            let cm: f64 = input_tokens
                                .iter()
                                .enumerate()
                                .filter(|(_, t)| **t == ch)
                                .map(|(i, _)| pc * alpha[i])
                                .sum();
                            (ch, cm, (1.0 - pc) * p_pred[id])
                        }
                        Cand::Oov(ch) => {
                            let cm: f64 = input_tokens
                                .iter()
                                .enumerate()
                                .filter(|(_, t)| **t == ch)
                                .map(|(i, _)| pc * alpha[i])
                                .sum();
                            (ch, cm, 0.0)
                        }
                    };
                    let source = if copy_mass > pred_mass {
                        let i_star = alpha
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .map(|(i, _)| i)
                            .expect("nonempty alpha");
                        StepSource::Copy(i_star)
                    } else {
                        StepSource::Predict
                    };
                    traces[r].push(TraceStep { token: ch, source });
                    x_ids[r] = match vocab.id_strict(ch) {
                        Some(id) => id,
                        None => UNK_ID,
                    };
                }
            }
        }
        state = out.state;
        if done.iter().all(|d| *d) {
            break;
        }
    }
    traces
}
