//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{ConvSpec, Graph, NodeId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default step for central differences (64-bit).
pub const FD_STEP: f64 = 1e-5;

/// Compare the reverse-mode gradient of a scalar-valued computation against
/// central finite differences, returning the maximum relative error over all
/// input elements.
///
/// `build` must be deterministic: it is re-run twice per input element with
/// perturbed values. Elements for which `skip(input_index, element_index,
/// value)` returns true are excluded (used to avoid non-smooth points).
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64, skip: &dyn Fn(usize, usize, f64) -> bool) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| g.grad(id).unwrap().clone()).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let v = input.data()[ei];
            if skip(pi, ei, v) {
                continue;
            }
            work[pi].data_mut()[ei] = v + step;
            let f_plus = eval(&work)?;
            work[pi].data_mut()[ei] = v - step;
            let f_minus = eval(&work)?;
            work[pi].data_mut()[ei] = v;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn no_skip(_: usize, _: usize, _: f64) -> bool {
    false
}

/// One named check of the standard suite.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub instances: usize,
}

/// Runs finite-difference checks for every differentiable op and both loss
/// kernels over `instances` random instances each; returns the worst error
/// per op. All randomness derives from `seed`.
pub fn standard_suite(seed: u64, instances: usize) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut run = |name: &'static str,
                   rng: &mut ChaCha8Rng,
                   mut one: Box<dyn FnMut(&mut ChaCha8Rng) -> Result<f64>>|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(one(rng)?);
        }
        out.push(OpCheck {
            name,
            max_rel_err: worst,
            instances,
        });
        Ok(())
    };

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
    }

    run(
        "conv2d",
        &mut rng,
        Box::new(|rng| {
            let strides = [(1usize, 1usize), (1, 2), (2, 1), (2, 2)];
            let (sh, sw) = strides[rng.gen_range(0..strides.len())];
            let spec = ConvSpec::new((3, 3), (sh, sw), (1, 1), 2, 2);
            let x = rand_tensor(rng, &[1, 2, 6, 6], -2.0, 2.0);
            let w = rand_tensor(rng, &spec.weight_shape(), -1.0, 1.0);
            let b = rand_tensor(rng, &[2], -0.5, 0.5);
            grad_check(
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], &spec)?;
                    g.sum(y)
                },
                &[x, w, b],
                FD_STEP,
                &no_skip,
            )
        }),
    )?;

    run(
        "relu",
        &mut rng,
        Box::new(|rng| {
            let x = rand_tensor(rng, &[4, 9], -2.0, 2.0);
            grad_check(
                |g, ids| {
                    let y = g.relu(ids[0]);
                    g.sum(y)
                },
                &[x],
                FD_STEP,
                // Exclude the kink at 0.
                &|_, _, v| v.abs() < 1e-4,
            )
        }),
    )?;

    run(
        "sigmoid",
        &mut rng,
        Box::new(|rng| {
            let x = rand_tensor(rng, &[4, 9], -2.0, 2.0);
            grad_check(
                |g, ids| {
                    let y = g.sigmoid(ids[0]);
                    g.sum(y)
                },
                &[x],
                FD_STEP,
                &no_skip,
            )
        }),
    )?;

    run(
        "max_pool_3x3_stride1",
        &mut rng,
        Box::new(|rng| {
            let x = rand_tensor(rng, &[1, 6, 6], -2.0, 2.0);
            // A scaled sum makes the pooled cells contribute unevenly.
            grad_check(
                |g, ids| {
                    let y = g.max_pool_3x3_stride1(ids[0])?;
                    let z = g.scale(y, 0.5)?;
                    g.sum(z)
                },
                &[x],
                FD_STEP,
                // Near-ties between neighbor cells break differentiability;
                // random draws make exact ties measure-zero, but close pairs
                // still bias the numeric quotient. There is no per-element
                // predicate for "is close to another element", so rely on the
                // continuous distribution instead.
                &no_skip,
            )
        }),
    )?;

    run(
        "add_scale_sum",
        &mut rng,
        Box::new(|rng| {
            let a = rand_tensor(rng, &[5, 3], -2.0, 2.0);
            let b = rand_tensor(rng, &[5, 3], -2.0, 2.0);
            grad_check(
                |g, ids| {
                    let s = g.add(ids[0], ids[1])?;
                    let s = g.scale(s, -1.7)?;
                    g.sum(s)
                },
                &[a, b],
                FD_STEP,
                &no_skip,
            )
        }),
    )?;

    run(
        "focal_loss",
        &mut rng,
        Box::new(|rng| {
            let shape = [2usize, 6, 6];
            let mut target = Tensor::zeros(&shape);
            for _ in 0..3 {
                let i = rng.gen_range(0..target.numel());
                target.data_mut()[i] = 1.0;
            }
            // Soft shoulder values on some negatives.
            for _ in 0..6 {
                let i = rng.gen_range(0..target.numel());
                if target.data()[i] != 1.0 {
                    target.data_mut()[i] = rng.gen_range(0.1..0.9);
                }
            }
            let pred = rand_tensor(rng, &shape, 0.05, 0.95);
            grad_check(
                |g, ids| g.focal_loss(ids[0], &target, 2.0, 4.0),
                &[pred],
                FD_STEP,
                &no_skip,
            )
        }),
    )?;

    run(
        "smooth_l1",
        &mut rng,
        Box::new(|rng| {
            let pred = rand_tensor(rng, &[2, 16], -3.0, 3.0);
            let target = rand_tensor(rng, &[2, 16], -3.0, 3.0);
            let mask = Tensor::from_fn(&[16], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let t2 = target.clone();
            grad_check(
                |g, ids| g.smooth_l1(ids[0], &target, &mask),
                &[pred.clone()],
                FD_STEP,
                // Exclude the |d| = 1 kink.
                &move |_, ei, v| ((v - t2.data()[ei]).abs() - 1.0).abs() < 1e-4,
            )
        }),
    )?;

    run(
        "conv_relu_chain",
        &mut rng,
        Box::new(|rng| {
            let spec = ConvSpec::new((3, 3), (1, 1), (1, 1), 1, 2);
            let x = rand_tensor(rng, &[1, 1, 6, 6], -2.0, 2.0);
            let w = rand_tensor(rng, &spec.weight_shape(), -1.0, 1.0);
            let b = rand_tensor(rng, &[2], -0.5, 0.5);
            grad_check(
                |g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], &spec)?;
                    let y = g.relu(y);
                    g.sum(y)
                },
                &[x, w, b],
                FD_STEP,
                &no_skip,
            )
        }),
    )?;

    run(
        "focal_head_two_layer_net",
        &mut rng,
        Box::new(|rng| {
            let s1 = ConvSpec::new((3, 3), (1, 1), (1, 1), 1, 3);
            let s2 = ConvSpec::new((1, 1), (1, 1), (0, 0), 3, 2);
            let x = rand_tensor(rng, &[1, 1, 5, 5], -1.0, 1.0);
            let w1 = rand_tensor(rng, &s1.weight_shape(), -0.6, 0.6);
            let b1 = rand_tensor(rng, &[3], -0.2, 0.2);
            let w2 = rand_tensor(rng, &s2.weight_shape(), -0.6, 0.6);
            let b2 = rand_tensor(rng, &[2], -0.2, 0.2);
            let mut target = Tensor::zeros(&[1, 2, 5, 5]);
            for _ in 0..2 {
                let i = rng.gen_range(0..target.numel());
                target.data_mut()[i] = 1.0;
            }
            grad_check(
                |g, ids| {
                    let h = g.conv2d(ids[0], ids[1], ids[2], &s1)?;
                    let h = g.relu(h);
                    let h = g.conv2d(h, ids[3], ids[4], &s2)?;
                    let p = g.sigmoid(h);
                    g.focal_loss(p, &target, 2.0, 4.0)
                },
                &[x, w1, b1, w2, b2],
                FD_STEP,
                &no_skip,
            )
        }),
    )?;

    Ok(out)
}
