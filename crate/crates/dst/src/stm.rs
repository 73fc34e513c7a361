//! Stress tracing: unroll an LSTM over the chronological stream of fused
//! vectors and emit a per-step stress probability plus a thresholded state.
//!
//! The cell is the standard gated recurrence (sigmoid input/forget/output
//! gates, tanh candidate) built from graph primitives so gradients flow
//! through time. The output map between the hidden state and the two-class
//! softmax head is the identity; the head's dense layer subsumes any affine
//! output transform. A `Linear` variant drops the recurrence and classifies
//! each fused vector independently, which is the head used by the no-tracing
//! ablation.

use std::fmt::Write as _;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, NodeId, ParamId, ParamStore, Real, Tensor, TensorError};

/// Hidden width of the recurrent state.
pub const HIDDEN: usize = 64;
/// Decision threshold; ties go to "under stress".
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Dropout applied to the hidden state between the cell and the head,
/// training mode only.
pub const LSTM_DROPOUT: f64 = 0.25;
/// Truncated backpropagation length used by the trainer.
pub const BPTT_LEN: usize = 20;

// ── Domain types ──

/// One fused step: the fusion output for a window plus its label when known.
#[derive(Debug, Clone)]
pub struct FusedStep<T> {
    pub f: Vec<T>,
    pub label: Option<u8>,
}

/// A session's fused vectors in chronological order.
#[derive(Debug, Clone)]
pub struct FusedSequence<T> {
    pub user_id: u32,
    pub session_id: u32,
    pub steps: Vec<FusedStep<T>>,
}

impl<T: Real> FusedSequence<T> {
    pub fn validate(&self, dim: usize) -> Result<(), TensorError> {
        for (i, s) in self.steps.iter().enumerate() {
            if s.f.len() != dim {
                return Err(TensorError::Geometry {
                    op: "stm.trace",
                    msg: format!("step {i} has width {}, expected {dim}", s.f.len()),
                });
            }
        }
        Ok(())
    }
}

/// Per-step probabilities of "under stress" with their thresholded states.
#[derive(Debug, Clone, PartialEq)]
pub struct StressTrace {
    pub probs: Vec<f64>,
    pub states: Vec<u8>,
    pub threshold: f64,
}

impl StressTrace {
    pub fn new(probs: Vec<f64>, threshold: f64) -> Self {
        let states = threshold_states(&probs, threshold);
        StressTrace { probs, states, threshold }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// state = 1 iff prob >= threshold.
pub fn threshold_states(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Render a trace as CSV. `window_seconds` spaces the timestamps; labels are
/// left blank where unknown.
pub fn trace_csv(trace: &StressTrace, labels: &[Option<u8>], window_seconds: f64) -> String {
    let mut out = String::from("step_index,timestamp_s,prob_stress,state,label_if_known\n");
    for i in 0..trace.len() {
        let label = labels
            .get(i)
            .copied()
            .flatten()
            .map(|l| l.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{i},{},{},{},{label}",
            i as f64 * window_seconds,
            trace.probs[i],
            trace.states[i],
        );
    }
    out
}

// ── Network ──

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StmVariant {
    /// Recurrent tracing head.
    Lstm,
    /// Per-step linear classifier (no temporal model).
    Linear,
}

impl FromStr for StmVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lstm" => Ok(StmVariant::Lstm),
            "linear" => Ok(StmVariant::Linear),
            other => Err(format!("unknown tracing head '{other}' (expected lstm|linear)")),
        }
    }
}

/// One gate's parameters: input map, recurrent map, bias.
#[derive(Debug, Clone, Copy)]
struct GateP {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

/// Recurrent state threaded between steps.
#[derive(Debug, Clone, Copy)]
pub struct StmState {
    pub h: NodeId,
    pub c: NodeId,
}

#[derive(Debug, Clone)]
pub struct StmNet {
    pub variant: StmVariant,
    pub in_dim: usize,
    /// Input, forget, candidate, output in that order.
    gates: Option<[GateP; 4]>,
    head_w: ParamId,
    head_b: ParamId,
}

impl StmNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        variant: StmVariant,
        in_dim: usize,
    ) -> Result<Self, TensorError> {
        let gates = match variant {
            StmVariant::Lstm => {
                let mut gates = Vec::with_capacity(4);
                for tag in ["i", "f", "g", "o"] {
                    gates.push(GateP {
                        w: store.add_uniform(
                            &format!("stm.lstm.{tag}.w"),
                            vec![in_dim, HIDDEN],
                            in_dim,
                            rng,
                        )?,
                        u: store.add_uniform(
                            &format!("stm.lstm.{tag}.u"),
                            vec![HIDDEN, HIDDEN],
                            HIDDEN,
                            rng,
                        )?,
                        b: store.add_zeros(&format!("stm.lstm.{tag}.b"), vec![HIDDEN], true)?,
                    });
                }
                Some([gates[0], gates[1], gates[2], gates[3]])
            }
            StmVariant::Linear => None,
        };
        let head_in = match variant {
            StmVariant::Lstm => HIDDEN,
            StmVariant::Linear => in_dim,
        };
        let head_w = store.add_uniform("stm.head.w", vec![head_in, 2], head_in, rng)?;
        let head_b = store.add_zeros("stm.head.b", vec![2], true)?;
        Ok(StmNet { variant, in_dim, gates, head_w, head_b })
    }

    /// h_0 = c_0 = 0.
    pub fn init_state<T: Real>(&self, g: &mut Graph<T>) -> StmState {
        let h = g.constant(Tensor::zeros(vec![HIDDEN]));
        let c = g.constant(Tensor::zeros(vec![HIDDEN]));
        StmState { h, c }
    }

    /// One cell update. Returns (o_t, h_t, c_t); the output map is the
    /// identity, so o_t and h_t are the same node.
    pub fn lstm_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_t: NodeId,
        h_prev: NodeId,
        c_prev: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId), TensorError> {
        let gates = self.gates.ok_or(TensorError::Geometry {
            op: "stm.lstm_step",
            msg: "the linear variant has no recurrent cell".to_string(),
        })?;
        let pre = |g: &mut Graph<T>, p: &GateP| -> Result<NodeId, TensorError> {
            let w = g.param(store, p.w);
            let b = g.param(store, p.b);
            let wx = g.dense_vec(f_t, w, Some(b))?;
            let u = g.param(store, p.u);
            let uh = g.dense_vec(h_prev, u, None)?;
            g.add(wx, uh)
        };
        let i_pre = pre(g, &gates[0])?;
        let f_pre = pre(g, &gates[1])?;
        let g_pre = pre(g, &gates[2])?;
        let o_pre = pre(g, &gates[3])?;
        let i_gate = g.sigmoid(i_pre)?;
        let f_gate = g.sigmoid(f_pre)?;
        let cand = g.tanh_op(g_pre)?;
        let o_gate = g.sigmoid(o_pre)?;
        let keep = g.mul(f_gate, c_prev)?;
        let write = g.mul(i_gate, cand)?;
        let c_t = g.add(keep, write)?;
        let c_sq = g.tanh_op(c_t)?;
        let h_t = g.mul(o_gate, c_sq)?;
        Ok((h_t, h_t, c_t))
    }

    /// Two-class softmax over a dense map of the input; element 1 is the
    /// "under stress" probability.
    pub fn predict_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        o_t: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let logits = g.dense_vec(o_t, w, Some(b))?;
        let row = g.reshape(logits, vec![1, 2])?;
        let sm = g.softmax_rows(row)?;
        g.reshape(sm, vec![2])
    }

    /// Advance one step: probabilities out, state updated in place for the
    /// recurrent variant. Dropout on h_t is live only in training graphs.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f_t: NodeId,
        state: &mut StmState,
    ) -> Result<NodeId, TensorError> {
        match self.variant {
            StmVariant::Lstm => {
                let (o_t, h_t, c_t) = self.lstm_step(g, store, f_t, state.h, state.c)?;
                state.h = h_t;
                state.c = c_t;
                let dropped = g.dropout(o_t, LSTM_DROPOUT)?;
                self.predict_step(g, store, dropped)
            }
            StmVariant::Linear => self.predict_step(g, store, f_t),
        }
    }

    /// Evaluate a whole sequence from h_0 = 0 and threshold the outputs.
    pub fn trace<T: Real>(
        &self,
        store: &ParamStore<T>,
        seq: &FusedSequence<T>,
        threshold: f64,
    ) -> Result<StressTrace, TensorError> {
        if seq.steps.is_empty() {
            return Err(TensorError::Geometry {
                op: "stm.trace",
                msg: "empty sequence".to_string(),
            });
        }
        seq.validate(self.in_dim)?;
        let mut g = Graph::new();
        let mut state = self.init_state(&mut g);
        let mut probs = Vec::with_capacity(seq.steps.len());
        for step in &seq.steps {
            let f = g.constant(Tensor::new(vec![self.in_dim], step.f.clone())?);
            let p = self.step(&mut g, store, f, &mut state)?;
            g.check_finite(p, "stm.trace")?;
            probs.push(g.data(p)[1].to_f64());
        }
        Ok(StressTrace::new(probs, threshold))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckConfig};
    use rand::{Rng, SeedableRng};

    fn build(variant: StmVariant, in_dim: usize, seed: u64) -> (ParamStore<f64>, StmNet) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = StmNet::new(&mut store, &mut rng, variant, in_dim).unwrap();
        (store, net)
    }

    fn zero_all(store: &mut ParamStore<f64>) {
        let hits: Vec<(String, usize)> = store
            .iter()
            .map(|e| (e.name().to_string(), e.value().len()))
            .collect();
        for (name, len) in hits {
            let id = store.id(&name).unwrap();
            store.set_value(id, vec![0.0; len]).unwrap();
        }
    }

    fn rand_seq(in_dim: usize, len: usize, seed: u64) -> FusedSequence<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let steps = (0..len)
            .map(|i| FusedStep {
                f: (0..in_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                label: Some((i % 2) as u8),
            })
            .collect();
        FusedSequence { user_id: 0, session_id: 0, steps }
    }

    #[test]
    fn zero_parameters_give_half_gates_and_a_decaying_cell() {
        let (mut store, net) = build(StmVariant::Lstm, 5, 1);
        zero_all(&mut store);
        let mut g = Graph::new();
        let f_t = g.constant(Tensor::new(vec![5], vec![0.3, -1.0, 2.0, 0.7, -0.2]).unwrap());

        // From the zero state everything stays exactly zero.
        let state = net.init_state(&mut g);
        let (o_t, h_t, c_t) = net.lstm_step(&mut g, &store, f_t, state.h, state.c).unwrap();
        assert_eq!(o_t, h_t);
        assert!(g.data(c_t).iter().all(|&v| v == 0.0));
        assert!(g.data(h_t).iter().all(|&v| v == 0.0));

        // From a nonzero cell the 0.5 gates are observable: c halves exactly
        // and h = 0.5 * tanh(c).
        let c0: Vec<f64> = (0..HIDDEN).map(|i| (i as f64 - 31.5) / 10.0).collect();
        let c_prev = g.constant(Tensor::new(vec![HIDDEN], c0.clone()).unwrap());
        let (_, h_t, c_t) = net.lstm_step(&mut g, &store, f_t, state.h, c_prev).unwrap();
        for i in 0..HIDDEN {
            assert_eq!(g.data(c_t)[i], 0.5 * c0[i]);
            assert_eq!(g.data(h_t)[i], 0.5 * (0.5 * c0[i]).tanh());
        }
    }

    #[test]
    fn cell_state_grows_at_most_one_per_step() {
        let (store, net) = build(StmVariant::Lstm, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let mut state = net.init_state(&mut g);
        let mut prev_max = 0.0f64;
        for _ in 0..40 {
            let f: Vec<f64> = (0..8).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let f_t = g.constant(Tensor::new(vec![8], f).unwrap());
            let (_, h_t, c_t) = net.lstm_step(&mut g, &store, f_t, state.h, state.c).unwrap();
            state.h = h_t;
            state.c = c_t;
            let max = g.data(c_t).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(max <= prev_max + 1.0 + 1e-12, "{max} vs {prev_max}");
            prev_max = max;
        }
    }

    #[test]
    fn prediction_head_matches_closed_form_softmax() {
        let (mut store, net) = build(StmVariant::Linear, 3, 4);
        zero_all(&mut store);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.4, -0.1, 2.0]).unwrap());
        let p = net.predict_step(&mut g, &store, x).unwrap();
        assert_eq!(g.data(p), &[0.5, 0.5]);

        // Logits (0, ln 3) pin the stress probability at exactly 3/4.
        let id = store.id("stm.head.b").unwrap();
        store.set_value(id, vec![0.0, 3.0f64.ln()]).unwrap();
        let p = net.predict_step(&mut g, &store, x).unwrap();
        assert!((g.data(p)[1] - 0.75).abs() < 1e-12);
        assert!((g.data(p)[0] + g.data(p)[1] - 1.0).abs() < 1e-6);

        // Finite logits keep both classes strictly interior.
        let (store, net) = build(StmVariant::Linear, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let x = g.constant(Tensor::new(vec![3], x).unwrap());
            let p = net.predict_step(&mut g, &store, x).unwrap();
            for &v in g.data(p) {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn threshold_ties_go_to_stress() {
        assert_eq!(threshold_states(&[0.4, 0.6, 0.5], 0.5), vec![0, 1, 1]);
        let t = StressTrace::new(vec![0.49, 0.51], 0.5);
        assert_eq!(t.states, vec![0, 1]);
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn traces_preserve_length_and_repeat_bit_for_bit() {
        let (store, net) = build(StmVariant::Lstm, 6, 7);
        let seq = rand_seq(6, 9, 8);
        let a = net.trace(&store, &seq, DEFAULT_THRESHOLD).unwrap();
        let b = net.trace(&store, &seq, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(a.len(), 9);
        assert_eq!(a, b);
        for i in 0..a.len() {
            assert_eq!(a.states[i] == 1, a.probs[i] >= a.threshold);
        }

        let one = rand_seq(6, 1, 9);
        assert_eq!(net.trace(&store, &one, 0.5).unwrap().len(), 1);
        let empty = FusedSequence::<f64> { user_id: 0, session_id: 0, steps: vec![] };
        assert!(net.trace(&store, &empty, 0.5).is_err());
        let bad = rand_seq(5, 3, 10);
        assert!(net.trace(&store, &bad, 0.5).is_err());
    }

    #[test]
    fn linear_variant_commutes_with_step_permutations() {
        let (store, net) = build(StmVariant::Linear, 6, 11);
        let seq = rand_seq(6, 6, 12);
        let perm = [2usize, 0, 4, 1, 5, 3];
        let mut shuffled = seq.clone();
        shuffled.steps = perm.iter().map(|&i| seq.steps[i].clone()).collect();
        let base = net.trace(&store, &seq, 0.5).unwrap();
        let moved = net.trace(&store, &shuffled, 0.5).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(moved.probs[j], base.probs[i]);
        }

        // The recurrent head is order sensitive.
        let (store, net) = build(StmVariant::Lstm, 6, 13);
        let base = net.trace(&store, &seq, 0.5).unwrap();
        let moved = net.trace(&store, &shuffled, 0.5).unwrap();
        assert!((0..6).any(|j| moved.probs[j] != base.probs[perm[j]]));
    }

    #[test]
    fn unrolled_recurrence_passes_gradient_check() {
        let (store, net) = build(StmVariant::Lstm, 6, 14);
        let seq = rand_seq(6, 6, 15);
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let build = move |g: &mut Graph<f64>| {
            let mut state = net.init_state(g);
            let mut ys = Vec::new();
            for step in &seq.steps {
                let f = g.constant(Tensor::new(vec![6], step.f.clone())?);
                let p = net.step(g, &store, f, &mut state)?;
                ys.push(g.slice1(p, 1, 1)?);
            }
            let y = g.concat_last(&ys)?;
            g.bce_sum(y, labels.to_vec())
        };
        let cfg = GradCheckConfig {
            max_coords_per_leaf: Some(4),
            ..GradCheckConfig::default()
        };
        let report = grad_check(&build, &cfg).unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn csv_export_writes_one_row_per_step() {
        let trace = StressTrace::new(vec![0.25, 0.75], 0.5);
        let labels = [Some(0), None];
        let csv = trace_csv(&trace, &labels, 5.0);
        let want = "step_index,timestamp_s,prob_stress,state,label_if_known\n\
                    0,0,0.25,0,0\n\
                    1,5,0.75,1,\n";
        assert_eq!(csv, want);
    }

    #[test]
    fn variant_names_parse() {
        assert_eq!("lstm".parse::<StmVariant>().unwrap(), StmVariant::Lstm);
        assert_eq!("linear".parse::<StmVariant>().unwrap(), StmVariant::Linear);
        assert!("gru".parse::<StmVariant>().is_err());
        let (store, net) = build(StmVariant::Linear, 4, 16);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![4]));
        let s = net.init_state(&mut g);
        assert!(net.lstm_step(&mut g, &store, x, s.h, s.c).is_err());
    }
}
