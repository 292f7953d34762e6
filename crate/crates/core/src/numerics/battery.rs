//! Per-primitive gradient-check battery.
//!
//! Every tape primitive gets a random-input central-difference check of a
//! scalar objective built from its output. The battery backs both the
//! test suite and the `gradcheck` command.

use super::gradcheck::{grad_check, GradMap};
use super::{DiffArray, NodeId, ParamStore, Tape};
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct BatteryEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn random_array(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> DiffArray {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    DiffArray::new(shape, values)
}

/// Contracts an output node to a scalar with fixed pseudo-random weights
/// so every output coordinate influences the objective.
fn contract(tape: &mut Tape, out: NodeId) -> NodeId {
    let n: usize = tape.shape(out).iter().product();
    let weights: Vec<f64> = (0..n)
        .map(|i| 0.25 + 0.5 * ((i * 2654435761) % 97) as f64 / 97.0)
        .collect();
    let shape = tape.shape(out).to_vec();
    let w = tape.leaf(&DiffArray::new(shape, weights));
    let prod = tape.mul(out, w);
    tape.sum(prod)
}

fn check(
    seed: u64,
    shapes: &[(&str, Vec<usize>)],
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        store.register(name, random_array(shape.clone(), &mut rng))?;
    }
    let names: Vec<&str> = shapes.iter().map(|(n, _)| *n).collect();
    grad_check(&mut store, &names, 1e-5, |s| {
        let mut tape = Tape::new();
        let inputs: Vec<NodeId> = names.iter().map(|n| tape.param(s, n)).collect();
        let out = build(&mut tape, &inputs)?;
        let loss = contract(&mut tape, out);
        let grads = tape.backward(loss)?;
        let map = tape.param_grad_map(&grads);
        Ok((tape.scalar(loss), map))
    })
}

/// Runs the whole battery; each entry should come in under 1e-6.
pub fn primitive_battery() -> Result<Vec<BatteryEntry>> {
    let mut out = Vec::new();
    let mut push = |name: &'static str, err: f64| {
        out.push(BatteryEntry {
            name,
            max_rel_err: err,
        });
    };

    push(
        "add",
        check(1, &[("a", vec![5]), ("b", vec![5])], |t, x| {
            Ok(t.add(x[0], x[1]))
        })?,
    );
    push(
        "scale",
        check(2, &[("a", vec![5])], |t, x| Ok(t.scale(x[0], -1.7)))?,
    );
    push(
        "mul",
        check(3, &[("a", vec![5]), ("b", vec![5])], |t, x| {
            Ok(t.mul(x[0], x[1]))
        })?,
    );
    push(
        "mul_scalar",
        check(4, &[("a", vec![5]), ("s", vec![1])], |t, x| {
            Ok(t.mul_scalar(x[0], x[1]))
        })?,
    );
    push(
        "matmul",
        check(5, &[("a", vec![3, 4]), ("b", vec![4, 2])], |t, x| {
            Ok(t.matmul(x[0], x[1]))
        })?,
    );
    push(
        "vecmat",
        check(6, &[("x", vec![4]), ("w", vec![4, 3])], |t, x| {
            Ok(t.vecmat(x[0], x[1]))
        })?,
    );
    push(
        "softmax",
        check(7, &[("a", vec![5])], |t, x| t.softmax(x[0]))?,
    );
    push(
        "log_softmax",
        check(8, &[("a", vec![5])], |t, x| t.log_softmax(x[0]))?,
    );
    push(
        "logsumexp",
        check(9, &[("a", vec![5])], |t, x| Ok(t.logsumexp(x[0])))?,
    );
    push(
        "sigmoid",
        check(10, &[("a", vec![5])], |t, x| Ok(t.sigmoid(x[0])))?,
    );
    push("tanh", check(11, &[("a", vec![5])], |t, x| Ok(t.tanh(x[0])))?);
    push(
        "ln",
        // Positive inputs: shift the random values away from zero.
        {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let mut store = ParamStore::new();
            let values: Vec<f64> = (0..5).map(|_| rng.gen_range(0.2..2.0)).collect();
            store.register("a", DiffArray::vector(values))?;
            grad_check(&mut store, &["a"], 1e-6, |s| {
                let mut tape = Tape::new();
                let a = tape.param(s, "a");
                let y = tape.ln(a);
                let loss = contract(&mut tape, y);
                let grads = tape.backward(loss)?;
                let mut map = GradMap::new();
                map.insert("a".into(), grads.get(a).to_vec());
                Ok((tape.scalar(loss), map))
            })?
        },
    );
    push(
        "concat",
        check(13, &[("a", vec![3]), ("b", vec![4])], |t, x| {
            Ok(t.concat(&[x[0], x[1]]))
        })?,
    );
    push(
        "row",
        check(14, &[("a", vec![4, 3])], |t, x| Ok(t.row(x[0], 2)))?,
    );
    push(
        "index",
        check(15, &[("a", vec![6])], |t, x| Ok(t.index(x[0], 3)))?,
    );
    push(
        "slice",
        check(16, &[("a", vec![8])], |t, x| Ok(t.slice(x[0], 2, 4)))?,
    );
    push(
        "dot",
        check(17, &[("a", vec![5]), ("b", vec![5])], |t, x| {
            Ok(t.dot(x[0], x[1]))
        })?,
    );
    push(
        "multi_dot",
        check(22, &[("q", vec![4]), ("a", vec![4]), ("b", vec![4])], |t, x| {
            Ok(t.multi_dot(x[0], &[x[1], x[2]]))
        })?,
    );
    push(
        "weighted_sum",
        check(
            23,
            &[("w", vec![3]), ("a", vec![4]), ("b", vec![4]), ("c", vec![4])],
            |t, x| Ok(t.weighted_sum(x[0], &[x[1], x[2], x[3]])),
        )?,
    );
    push(
        "cosine",
        check(18, &[("a", vec![5]), ("b", vec![5])], |t, x| {
            t.cosine(x[0], x[1])
        })?,
    );
    push("sum", check(19, &[("a", vec![7])], |t, x| Ok(t.sum(x[0])))?);
    push(
        "nll_gather",
        check(20, &[("a", vec![5])], |t, x| Ok(t.nll_gather(x[0], 1)))?,
    );
    push(
        "lstm_cell",
        check(
            21,
            &[
                ("x", vec![3]),
                ("h", vec![4]),
                ("c", vec![4]),
                ("wx", vec![3, 16]),
                ("wh", vec![4, 16]),
                ("b", vec![16]),
            ],
            |t, x| {
                let (h, c) = super::lstm_cell(t, x[0], x[1], x[2], x[3], x[4], x[5]);
                Ok(t.concat(&[h, c]))
            },
        )?,
    );
    Ok(out)
}
