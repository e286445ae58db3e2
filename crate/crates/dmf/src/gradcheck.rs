//! Finite-difference verification of the backward pass.
//!
//! [`check`] takes a closure that builds a scalar loss from a parameter
//! set, runs one backward pass, then probes every parameter component with
//! central differences and reports the worst relative disagreement. The
//! relative error uses a floored denominator,
//! `|fd - bp| / max(|fd|, |bp|, floor)`, so components whose true
//! derivative is numerically zero cannot fail on roundoff alone.
//!
//! Run this with `P = f64`: at step 1e-5 the truncation error of the
//! central difference sits far below the tolerances the test suites use,
//! which 32-bit arithmetic cannot guarantee.

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Worst observed disagreement between backprop and finite differences.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest floored relative error over all components.
    pub max_rel: f64,
    /// `name[index]` of the component attaining it.
    pub worst: String,
    /// Number of scalar components probed.
    pub probed: usize,
}

/// Central-difference check of `d loss / d theta` for every component of
/// every parameter the loss closure binds.
///
/// `build` must construct a fresh graph from the current parameter values
/// and return it with the loss node (shape `[1]`). `step` is the probe
/// half-width and `floor` the denominator floor described in the module
/// docs.
pub fn check<P, F>(
    params: &mut ParamSet<P>,
    mut build: F,
    step: f64,
    floor: f64,
) -> Result<FdReport>
where
    P: Scalar,
    F: FnMut(&ParamSet<P>) -> Result<(Graph<P>, NodeId)>,
{
    let (mut g, loss) = build(params)?;
    g.backward(loss)?;
    params.clear_grads();
    g.grads_into(params);

    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.grad().is_some())
        .map(|(n, _)| n.to_string())
        .collect();

    let mut report = FdReport {
        max_rel: 0.0,
        worst: String::new(),
        probed: 0,
    };
    for name in &names {
        let n = params.get(name).unwrap().numel();
        for i in 0..n {
            let bp = params.get(name).unwrap().grad().unwrap()[i].to_f64();
            let orig = params.get(name).unwrap().data()[i];
            let mut probe = |params: &mut ParamSet<P>, at: f64| -> Result<f64> {
                params.get_mut(name).unwrap().data_mut()[i] = P::from_f64(at);
                let (g, loss) = build(params)?;
                Ok(g.scalar_value(loss).to_f64())
            };
            let x = orig.to_f64();
            let hi = probe(params, x + step)?;
            let lo = probe(params, x - step)?;
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (hi - lo) / (2.0 * step);
            let rel = (fd - bp).abs() / fd.abs().max(bp.abs()).max(floor);
            report.probed += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Randomized single-op fixtures for the finite-difference check.
///
/// Each fixture draws small random shapes and values from the seed, wires
/// the op between parameters and a random weighting leaf (so the scalar
/// loss is sensitive to every component), and runs [`check`]. The same
/// suite backs both the per-op property tests and the acceptance gate, so
/// they cannot drift apart.
pub mod ops {
    use super::{check, FdReport};
    use crate::error::Result;
    use crate::graph::Graph;
    use crate::nn;
    use crate::params::ParamSet;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;

    fn rand_t(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    /// Values kept at least 1e-2 away from zero, for kinked ops.
    fn rand_t_off_zero(rng: &mut Rng, shape: Vec<usize>) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| {
            let v = rng.uniform(-1.0, 1.0);
            v.signum() * (0.01 + v.abs())
        })
    }

    type Fixture = fn(&mut Rng) -> Result<FdReport>;

    /// Weighted-sum reduction so every output component carries signal.
    macro_rules! weighted_loss {
        ($g:ident, $out:expr, $w:expr) => {{
            let flat_len = $g.value($out).len();
            let flat = $g.reshape($out, vec![1, flat_len])?;
            let wl = $g.leaf(&$w);
            let prod = $g.mul(flat, wl)?;
            $g.sum_all(prod)
        }};
    }

    fn weights(rng: &mut Rng, n: usize) -> Tensor<f64> {
        rand_t_off_zero(rng, vec![1, n])
    }

    fn fx_matmul(rng: &mut Rng) -> Result<FdReport> {
        let (m, kk, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(3));
        let mut p = ParamSet::new();
        p.insert("a", rand_t(rng, vec![m, kk]));
        p.insert("b", rand_t(rng, vec![kk, n]));
        let w = weights(rng, m * n);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let c = g.matmul(a, b)?;
                let loss = weighted_loss!(g, c, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_matmul_nt(rng: &mut Rng) -> Result<FdReport> {
        let (m, kk, n) = (1 + rng.below(3), 1 + rng.below(4), 1 + rng.below(3));
        let mut p = ParamSet::new();
        p.insert("a", rand_t(rng, vec![m, kk]));
        p.insert("b", rand_t(rng, vec![n, kk]));
        let w = weights(rng, m * n);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let c = g.matmul_nt(a, b)?;
                let loss = weighted_loss!(g, c, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_conv2d(rng: &mut Rng) -> Result<FdReport> {
        let b = 1 + rng.below(2);
        let c = 1 + rng.below(2);
        let o = 1 + rng.below(3);
        let (h, w) = (3 + rng.below(4), 3 + rng.below(4));
        let ksz = 1 + 2 * rng.below(2); // 1 or 3
        let stride = 1 + rng.below(2);
        let padding = rng.below(2);
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![b, c, h, w]));
        p.insert("k", rand_t(rng, vec![o, c, ksz, ksz]));
        let oh = crate::kernels::conv_out_dim(h, ksz, stride, padding).unwrap();
        let ow = crate::kernels::conv_out_dim(w, ksz, stride, padding).unwrap();
        let wt = weights(rng, b * o * oh * ow);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let k = g.param(p, "k");
                let y = g.conv2d(x, k, stride, padding)?;
                let loss = weighted_loss!(g, y, wt);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_reshape(rng: &mut Rng) -> Result<FdReport> {
        let (r, c) = (2 + rng.below(3), 2 + rng.below(3));
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![r, c]));
        let w = weights(rng, r * c);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let y = g.reshape(x, vec![c, r])?;
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_embedding(rng: &mut Rng) -> Result<FdReport> {
        // Embedding lookup: gather rows of a parameter table, repeats allowed.
        let (rows, cols, picks) = (3 + rng.below(3), 1 + rng.below(4), 2 + rng.below(4));
        let idx: Vec<usize> = (0..picks).map(|_| rng.below(rows)).collect();
        let mut p = ParamSet::new();
        p.insert("table", rand_t(rng, vec![rows, cols]));
        let w = weights(rng, picks * cols);
        check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let t = g.param(p, "table");
                let y = g.gather_rows(t, &idx)?;
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_pick_per_row(rng: &mut Rng) -> Result<FdReport> {
        let (rows, cols) = (2 + rng.below(3), 2 + rng.below(4));
        let idx: Vec<usize> = (0..rows).map(|_| rng.below(cols)).collect();
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![rows, cols]));
        let w = weights(rng, rows);
        check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let y = g.pick_per_row(x, &idx)?;
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_concat_slice(rng: &mut Rng) -> Result<FdReport> {
        let (rows, ca, cb) = (2 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
        let mut p = ParamSet::new();
        p.insert("a", rand_t(rng, vec![rows, ca]));
        p.insert("b", rand_t(rng, vec![rows, cb]));
        let w = weights(rng, rows * (ca + cb - 1));
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let cat = g.concat_cols(a, b)?;
                // Slice off the first column so both backward paths run.
                let sl = g.slice_cols(cat, 1, ca + cb - 1)?;
                let loss = weighted_loss!(g, sl, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_add_mul(rng: &mut Rng) -> Result<FdReport> {
        let (rows, cols) = (2 + rng.below(3), 1 + rng.below(4));
        let mut p = ParamSet::new();
        p.insert("a", rand_t(rng, vec![rows, cols]));
        p.insert("b", rand_t(rng, vec![rows, cols]));
        p.insert("c", rand_t(rng, vec![rows, cols]));
        let w = weights(rng, rows * cols);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let c = g.param(p, "c");
                let s = g.add(a, b)?;
                let m = g.mul(s, c)?;
                let loss = weighted_loss!(g, m, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_add_n(rng: &mut Rng) -> Result<FdReport> {
        let n = 2 + rng.below(2);
        let mut p = ParamSet::new();
        for i in 0..3 {
            p.insert(format!("x{i}"), rand_t(rng, vec![n, n]));
        }
        let w = weights(rng, n * n);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let xs: Vec<_> = (0..3).map(|i| g.param(p, &format!("x{i}"))).collect();
                let s = g.add_n(&xs)?;
                let loss = weighted_loss!(g, s, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_add_bias(rng: &mut Rng) -> Result<FdReport> {
        let (rows, cols) = (2 + rng.below(3), 1 + rng.below(4));
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![rows, cols]));
        p.insert("b", rand_t(rng, vec![cols]));
        let w = weights(rng, rows * cols);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let b = g.param(p, "b");
                let y = g.add_bias(x, b)?;
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_add_chan_bias(rng: &mut Rng) -> Result<FdReport> {
        let (b, c, h, w) = (1 + rng.below(2), 1 + rng.below(3), 2 + rng.below(2), 2 + rng.below(2));
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![b, c, h, w]));
        p.insert("bias", rand_t(rng, vec![c]));
        let wt = weights(rng, b * c * h * w);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let bias = g.param(p, "bias");
                let y = g.add_chan_bias(x, bias)?;
                let loss = weighted_loss!(g, y, wt);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_mul_col(rng: &mut Rng) -> Result<FdReport> {
        let (rows, cols) = (2 + rng.below(3), 1 + rng.below(4));
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![rows, cols]));
        p.insert("col", rand_t(rng, vec![rows, 1]));
        let w = weights(rng, rows * cols);
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let col = g.param(p, "col");
                let y = g.mul_col(x, col)?;
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_affine(rng: &mut Rng) -> Result<FdReport> {
        let n = 2 + rng.below(4);
        let mul = rng.uniform(-2.0, 2.0);
        let add = rng.uniform(-1.0, 1.0);
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![1, n]));
        let w = weights(rng, n);
        check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let y = g.affine(x, mul, add);
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_sigmoid(rng: &mut Rng) -> Result<FdReport> {
        fx_activation(rng, |g, x| Ok(g.sigmoid(x)), false)
    }

    fn fx_tanh(rng: &mut Rng) -> Result<FdReport> {
        fx_activation(rng, |g, x| Ok(g.tanh(x)), false)
    }

    fn fx_relu(rng: &mut Rng) -> Result<FdReport> {
        // Inputs are kept away from the kink at zero, where the one-sided
        // derivative makes finite differences meaningless.
        fx_activation(rng, |g, x| Ok(g.relu(x)), true)
    }

    fn fx_softmax(rng: &mut Rng) -> Result<FdReport> {
        fx_activation(rng, |g, x| g.softmax_rows(x), false)
    }

    fn fx_log_softmax(rng: &mut Rng) -> Result<FdReport> {
        fx_activation(rng, |g, x| g.log_softmax_rows(x), false)
    }

    fn fx_activation(
        rng: &mut Rng,
        apply: impl Fn(&mut Graph<f64>, crate::graph::NodeId) -> Result<crate::graph::NodeId>,
        off_zero: bool,
    ) -> Result<FdReport> {
        let (rows, cols) = (1 + rng.below(3), 2 + rng.below(4));
        let t = if off_zero {
            rand_t_off_zero(rng, vec![rows, cols])
        } else {
            rand_t(rng, vec![rows, cols])
        };
        let mut p = ParamSet::new();
        p.insert("x", t);
        let w = weights(rng, rows * cols);
        check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let y = apply(&mut g, x)?;
                let loss = weighted_loss!(g, y, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_sum_all(rng: &mut Rng) -> Result<FdReport> {
        let n = 2 + rng.below(4);
        let mut p = ParamSet::new();
        p.insert("x", rand_t(rng, vec![n, n]));
        check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let loss = g.sum_all(x);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_gru_cell(rng: &mut Rng) -> Result<FdReport> {
        let (b, d, h) = (1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let mut p = ParamSet::new();
        nn::register_gru(&mut p, "g", d, h, rng);
        // Biases start at zero; nudge them so their gradients are probed
        // at a generic point.
        for gate in ["z", "r", "h"] {
            let t = p.get_mut(&format!("g.b{gate}")).unwrap();
            for v in t.data_mut() {
                *v = rng.uniform(-0.3, 0.3);
            }
        }
        let x = rand_t(rng, vec![b, d]);
        let h0 = rand_t(rng, vec![b, h]);
        let w = weights(rng, b * h);
        check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let xn = g.leaf(&x);
                let hn = g.leaf(&h0);
                let h1 = nn::gru_step(&mut g, p, "g", xn, hn)?;
                let loss = weighted_loss!(g, h1, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    fn fx_gru_cell_masked(rng: &mut Rng) -> Result<FdReport> {
        let (b, d, h) = (2 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3));
        let mut p = ParamSet::new();
        nn::register_gru(&mut p, "g", d, h, rng);
        let x = rand_t(rng, vec![b, d]);
        let h0 = rand_t(rng, vec![b, h]);
        let mask = Tensor::from_fn(vec![b, 1], |_| rng.below(2) as f64);
        let w = weights(rng, b * h);
        check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let xn = g.leaf(&x);
                let hn = g.leaf(&h0);
                let mn = g.leaf(&mask);
                let h1 = nn::gru_step_masked(&mut g, p, "g", xn, hn, mn)?;
                let loss = weighted_loss!(g, h1, w);
                Ok((g, loss))
            },
            STEP,
            FLOOR,
        )
    }

    /// Every op fixture, in a stable order.
    pub fn fixtures() -> Vec<(&'static str, Fixture)> {
        vec![
            ("matmul", fx_matmul),
            ("matmul_nt", fx_matmul_nt),
            ("conv2d", fx_conv2d),
            ("reshape", fx_reshape),
            ("embedding_gather", fx_embedding),
            ("pick_per_row", fx_pick_per_row),
            ("concat_slice", fx_concat_slice),
            ("add_mul", fx_add_mul),
            ("add_n", fx_add_n),
            ("add_bias", fx_add_bias),
            ("add_chan_bias", fx_add_chan_bias),
            ("mul_col", fx_mul_col),
            ("affine", fx_affine),
            ("sigmoid", fx_sigmoid),
            ("tanh", fx_tanh),
            ("relu", fx_relu),
            ("softmax_rows", fx_softmax),
            ("log_softmax_rows", fx_log_softmax),
            ("sum_all", fx_sum_all),
            ("gru_cell", fx_gru_cell),
            ("gru_cell_masked", fx_gru_cell_masked),
        ]
    }

    /// Runs every fixture once for this seed. Returns (op name, report).
    pub fn run_all(seed: u64) -> Result<Vec<(&'static str, FdReport)>> {
        fixtures()
            .into_iter()
            .enumerate()
            .map(|(i, (name, fx))| {
                let mut rng = Rng::derive(seed, 1000 + i as u64);
                fx(&mut rng).map(|r| (name, r))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_has_exact_gradient() {
        // loss = sum(x * x); d/dx = 2x, which central differences recover
        // exactly (the quadratic's third derivative is zero).
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![3], vec![0.5f64, -2.0, 4.0]).unwrap());
        let report = check(
            &mut p,
            |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                let sq = g.mul(x, x)?;
                let loss = g.sum_all(sq);
                Ok((g, loss))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.probed, 3);
        assert!(report.max_rel < 1e-9, "{report:?}");
    }

    #[test]
    fn a_wrong_backward_is_caught() {
        // Pretend loss = sum(2x) while backprop reports d/dx = 1 by
        // building the graph around a constant-slope mismatch: the check
        // must flag it, proving the probe actually bites.
        let mut p = ParamSet::new();
        p.insert("x", Tensor::from_vec(vec![1], vec![1.0f64]).unwrap());
        let mut flip = false;
        let report = check(
            &mut p,
            move |p| {
                let mut g = Graph::new();
                let x = g.param(p, "x");
                // First call (backward) sees slope 1; probes see slope 2.
                let slope = if flip { 2.0 } else { 1.0 };
                flip = true;
                let y = g.affine(x, slope, 0.0);
                let loss = g.sum_all(y);
                Ok((g, loss))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel > 0.3, "{report:?}");
    }
}
