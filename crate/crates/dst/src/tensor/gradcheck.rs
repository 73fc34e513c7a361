//! Central-finite-difference gradient checking.
//!
//! A check takes a builder closure that constructs a scalar loss from
//! differentiable leaves. The builder is replayed with single coordinates
//! nudged by ±step (leaves are numbered in creation order, so replays line
//! up), and the quotient is compared against the reverse-mode gradient with
//! relative error `|fd - grad| / max(1, |grad|)`. Builders must be
//! deterministic: a graph that recorded a dropout mask, or whose loss fails
//! to reproduce bit-for-bit on a second build, is refused.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, LeafOverride};
use super::{NodeId, Padding, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// When set, at most this many coordinates are sampled per leaf instead
    /// of sweeping every element (needed to keep whole-network checks fast).
    pub max_coords_per_leaf: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_coords_per_leaf: None,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_leaf: usize,
    pub worst_coord: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

type Builder = dyn Fn(&mut Graph<f64>) -> Result<NodeId, TensorError>;

fn eval_once(
    build: &Builder,
    over: Option<LeafOverride<f64>>,
) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    g.leaf_override = over;
    let loss = build(&mut g)?;
    if g.data(loss).len() != 1 {
        return Err(TensorError::Geometry {
            op: "grad_check",
            msg: "builder must return a scalar loss".to_string(),
        });
    }
    if g.stochastic {
        return Err(TensorError::Nondeterministic(
            "graph records a dropout mask".to_string(),
        ));
    }
    Ok(g.data(loss)[0])
}

pub fn grad_check(
    build: &Builder,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    let base = eval_once(build, None)?;
    let again = eval_once(build, None)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Nondeterministic(
            "loss does not reproduce bit-for-bit across rebuilds".to_string(),
        ));
    }

    // Analytic pass. Leaf ids are collected before backward because the
    // backward sweep retires consumed interior nodes into leaf form.
    let mut g = Graph::new();
    let loss = build(&mut g)?;
    let leaf_ids: Vec<NodeId> = (0..g.len())
        .map(NodeId)
        .filter(|&id| g.is_leaf_var(id))
        .collect();
    g.backward(loss)?;
    struct LeafInfo {
        numel: usize,
        grad: Option<Vec<f64>>,
    }
    let leaves: Vec<LeafInfo> = leaf_ids
        .iter()
        .map(|&id| LeafInfo {
            numel: g.data(id).len(),
            grad: g.grad(id).map(|s| s.to_vec()),
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        coords_checked: 0,
        max_rel_err: 0.0,
        worst_leaf: 0,
        worst_coord: 0,
        tol: cfg.tol,
    };
    for (leaf_index, leaf) in leaves.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords_per_leaf {
            Some(m) if leaf.numel > m => {
                let mut set = std::collections::BTreeSet::new();
                while set.len() < m {
                    set.insert(rng.gen_range(0..leaf.numel));
                }
                set.into_iter().collect()
            }
            _ => (0..leaf.numel).collect(),
        };
        for coord in coords {
            let lp = eval_once(
                build,
                Some(LeafOverride {
                    leaf_index,
                    coord,
                    delta: cfg.step,
                }),
            )?;
            let lm = eval_once(
                build,
                Some(LeafOverride {
                    leaf_index,
                    coord,
                    delta: -cfg.step,
                }),
            )?;
            let fd = (lp - lm) / (2.0 * cfg.step);
            let analytic = leaf.grad.as_ref().map_or(0.0, |v| v[coord]);
            let rel = (fd - analytic).abs() / 1f64.max(analytic.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_leaf = leaf_index;
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}

impl<T: super::Real> Graph<T> {
    pub(crate) fn is_leaf_var(&self, id: NodeId) -> bool {
        let n = &self.nodes[id.0];
        matches!(n.op, super::graph::Op::Leaf) && n.requires_grad
    }
}

/// Per-op gradient checks over small random tensors, one named case per
/// differentiable op. Dropout is excluded here (a stochastic graph is
/// refused by design) and is covered by an exact algebraic test instead.
pub fn standard_op_checks() -> Vec<(&'static str, Result<GradCheckReport, TensorError>)> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rt = |shape: Vec<usize>| {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).expect("shape/data consistent")
    };

    // Every case reduces its output to a scalar through a fixed random
    // weighting so gradients are non-trivial everywhere.
    fn weigh(
        g: &mut Graph<f64>,
        y: NodeId,
        seed: u64,
    ) -> Result<NodeId, TensorError> {
        let mut wr = ChaCha8Rng::seed_from_u64(seed);
        let n = g.data(y).len();
        let w: Vec<f64> = (0..n).map(|_| wr.gen_range(-1.0..1.0)).collect();
        let shape = g.shape(y).to_vec();
        let wn = g.constant(Tensor::new(shape, w)?);
        let p = g.mul(y, wn)?;
        g.sum_all(p)
    }

    let mut out: Vec<(&'static str, Result<GradCheckReport, TensorError>)> = Vec::new();
    macro_rules! case {
        ($name:literal, $build:expr) => {
            out.push(($name, grad_check(&$build, &cfg)));
        };
        ($name:literal, $build:expr, $cfg:expr) => {
            out.push(($name, grad_check(&$build, &$cfg)));
        };
    }

    let a = rt(vec![3, 4]);
    let b = rt(vec![3, 4]);
    case!("add", {
        let (a, b) = (a.clone(), b.clone());
        move |g: &mut Graph<f64>| {
            let (x, y) = (g.var(a.clone()), g.var(b.clone()));
            let s = g.add(x, y)?;
            weigh(g, s, 1)
        }
    });
    case!("sub", {
        let (a, b) = (a.clone(), b.clone());
        move |g: &mut Graph<f64>| {
            let (x, y) = (g.var(a.clone()), g.var(b.clone()));
            let s = g.sub(x, y)?;
            weigh(g, s, 2)
        }
    });
    case!("mul", {
        let (a, b) = (a.clone(), b.clone());
        move |g: &mut Graph<f64>| {
            let (x, y) = (g.var(a.clone()), g.var(b.clone()));
            let s = g.mul(x, y)?;
            weigh(g, s, 3)
        }
    });
    case!("scale", {
        let a = a.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(a.clone());
            let s = g.scale(x, -1.7)?;
            weigh(g, s, 4)
        }
    });
    case!("square_sum", {
        let a = a.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(a.clone());
            let s = g.mul(x, x)?;
            g.sum_all(s)
        }
    });

    let x3 = rt(vec![2, 3, 5]);
    let bias5 = rt(vec![5]);
    case!("add_bias", {
        let (x3, bias5) = (x3.clone(), bias5.clone());
        move |g: &mut Graph<f64>| {
            let (x, b) = (g.var(x3.clone()), g.var(bias5.clone()));
            let s = g.add_bias(x, b)?;
            weigh(g, s, 5)
        }
    });
    case!("mul_channels", {
        let (x3, bias5) = (x3.clone(), bias5.clone());
        move |g: &mut Graph<f64>| {
            let (x, c) = (g.var(x3.clone()), g.var(bias5.clone()));
            let s = g.mul_channels(x, c)?;
            weigh(g, s, 6)
        }
    });
    case!("norm_channels", {
        let x3 = x3.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(x3.clone());
            let mean = vec![0.1, -0.2, 0.3, 0.0, -0.5];
            let inv = vec![1.1, 0.9, 1.3, 0.7, 1.0];
            let s = g.norm_channels(x, mean, inv)?;
            weigh(g, s, 7)
        }
    });

    // Shifted away from the ReLU kink so finite differences are clean.
    let shifted = {
        let mut t = rt(vec![3, 4]);
        for v in t.data_mut() {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
        t
    };
    case!("relu", {
        let shifted = shifted.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(shifted.clone());
            let s = g.relu(x)?;
            weigh(g, s, 8)
        }
    });
    case!("sigmoid", {
        let a = a.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(a.clone());
            let s = g.sigmoid(x)?;
            weigh(g, s, 9)
        }
    });
    case!("tanh", {
        let a = a.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(a.clone());
            let s = g.tanh_op(x)?;
            weigh(g, s, 10)
        }
    });
    case!("row_mean", {
        let a = a.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(a.clone());
            let s = g.row_mean(x)?;
            weigh(g, s, 11)
        }
    });

    let ma = rt(vec![3, 4]);
    let mb = rt(vec![4, 2]);
    case!("matmul", {
        let (ma, mb) = (ma.clone(), mb.clone());
        move |g: &mut Graph<f64>| {
            let (x, y) = (g.var(ma.clone()), g.var(mb.clone()));
            let s = g.matmul(x, y)?;
            weigh(g, s, 12)
        }
    });
    case!("transpose", {
        let ma = ma.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(ma.clone());
            let s = g.transpose(x)?;
            weigh(g, s, 13)
        }
    });
    case!("softmax_rows", {
        let ma = ma.clone();
        move |g: &mut Graph<f64>| {
            let x = g.var(ma.clone());
            let s = g.softmax_rows(x)?;
            weigh(g, s, 14)
        }
    });
    case!("concat_slice_reshape", {
        let (a, b) = (rt(vec![6]), rt(vec![4]));
        move |g: &mut Graph<f64>| {
            let (x, y) = (g.var(a.clone()), g.var(b.clone()));
            let c = g.concat_last(&[x, y])?;
            let s = g.slice1(c, 2, 6)?;
            let r = g.reshape(s, vec![2, 3])?;
            weigh(g, r, 15)
        }
    });
    case!("dense_vec", {
        let (x, w, b) = (rt(vec![5]), rt(vec![5, 3]), rt(vec![3]));
        move |g: &mut Graph<f64>| {
            let (xv, wv, bv) = (g.var(x.clone()), g.var(w.clone()), g.var(b.clone()));
            let y = g.dense_vec(xv, wv, Some(bv))?;
            weigh(g, y, 16)
        }
    });

    case!("conv1d", {
        let (x, k, b) = (rt(vec![3, 7, 2]), rt(vec![5, 2, 4]), rt(vec![4]));
        move |g: &mut Graph<f64>| {
            let (xv, kv, bv) = (g.var(x.clone()), g.var(k.clone()), g.var(b.clone()));
            let y = g.conv1d(xv, kv, Some(bv), true)?;
            weigh(g, y, 17)
        }
    });
    case!("conv2d_same", {
        let (x, k, b) = (rt(vec![5, 6, 2]), rt(vec![3, 3, 2, 4]), rt(vec![4]));
        move |g: &mut Graph<f64>| {
            let (xv, kv, bv) = (g.var(x.clone()), g.var(k.clone()), g.var(b.clone()));
            let y = g.conv2d(xv, kv, Some(bv), Padding::Same, (1, 1), true)?;
            weigh(g, y, 18)
        }
    });
    case!("conv2d_valid_strided", {
        let (x, k) = (rt(vec![7, 6, 3]), rt(vec![3, 2, 3, 2]));
        move |g: &mut Graph<f64>| {
            let (xv, kv) = (g.var(x.clone()), g.var(k.clone()));
            let y = g.conv2d(xv, kv, None, Padding::Valid, (2, 2), false)?;
            weigh(g, y, 19)
        }
    });
    case!("deconv2d_exact", {
        let (x, k, b) = (rt(vec![4, 3, 2]), rt(vec![3, 2, 2, 2]), rt(vec![2]));
        move |g: &mut Graph<f64>| {
            let (xv, kv, bv) = (g.var(x.clone()), g.var(k.clone()), g.var(b.clone()));
            let y = g.deconv2d(xv, kv, Some(bv), (2, 2), (9, 6), true)?;
            weigh(g, y, 20)
        }
    });
    case!("deconv2d_padded", {
        let (x, k) = (rt(vec![4, 3, 2]), rt(vec![3, 2, 2, 2]));
        move |g: &mut Graph<f64>| {
            let (xv, kv) = (g.var(x.clone()), g.var(k.clone()));
            let y = g.deconv2d(xv, kv, None, (2, 2), (8, 5), false)?;
            weigh(g, y, 21)
        }
    });
    case!("maxpool2", {
        let x = rt(vec![5, 6, 3]);
        move |g: &mut Graph<f64>| {
            let xv = g.var(x.clone());
            let y = g.maxpool2(xv)?;
            weigh(g, y, 22)
        }
    });
    case!("max_over_width", {
        let x = rt(vec![3, 5, 4]);
        move |g: &mut Graph<f64>| {
            let xv = g.var(x.clone());
            let y = g.max_over_width(xv)?;
            weigh(g, y, 23)
        }
    });
    case!("bce_sum", {
        let p = Tensor::new(vec![4], vec![0.3, 0.6, 0.45, 0.71]).expect("probs");
        move |g: &mut Graph<f64>| {
            let pv = g.var(p.clone());
            g.bce_sum(pv, vec![1.0, 0.0, 1.0, 0.0])
        }
    });

    out
}
