//! Finite-difference verification of the autodiff engine.
//!
//! Every differentiable op is exercised in f64 against central differences.
//! The loss for each case is a weighted sum of the op output (fixed random
//! weights), so index-permutation mistakes in a backward rule cannot cancel
//! out the way they would under a plain mean.

use crate::attention::local::QueryBatch;
use crate::coords::Scale;
use crate::model::{ModelConfig, SrModel, Variant};
use crate::nn::ParamVars;
use crate::rng::SeedRng;
use crate::tensor::{Tape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

struct Case {
    name: &'static str,
    /// Shapes of the gradient-tracked leaves.
    shapes: Vec<Vec<usize>>,
    /// Keep sampled magnitudes away from zero (for kinked ops).
    avoid_zero: bool,
    tol: f64,
    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>,
}

fn cases() -> Vec<Case> {
    fn case(
        name: &'static str,
        shapes: &[&[usize]],
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static,
    ) -> Case {
        Case {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            avoid_zero: false,
            tol: OP_TOLERANCE,
            build: Box::new(build),
        }
    }

    let mut v = vec![
        case("add", &[&[3, 4], &[3, 4]], |t, l| t.add(l[0], l[1])),
        case("add_row", &[&[3, 4], &[4]], |t, l| t.add_row(l[0], l[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, l| t.sub(l[0], l[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, l| t.mul(l[0], l[1])),
        case("mul_col", &[&[4, 3], &[4, 1]], |t, l| t.mul_col(l[0], l[1])),
        case("mul_scalar", &[&[3, 4]], |t, l| t.mul_scalar(l[0], 1.7)),
        case("matmul", &[&[3, 4], &[4, 5]], |t, l| t.matmul(l[0], l[1])),
        case("rows_dot", &[&[4, 3], &[4, 3]], |t, l| t.rows_dot(l[0], l[1])),
        case("transpose2", &[&[3, 5]], |t, l| t.transpose2(l[0])),
        case("conv2d_p1", &[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], |t, l| {
            t.conv2d(l[0], l[1], l[2], 1)
        }),
        case("conv2d_p0", &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], |t, l| {
            t.conv2d(l[0], l[1], l[2], 0)
        }),
        case("softmax_axis1", &[&[4, 6]], |t, l| t.softmax(l[0], 1)),
        case("softmax_axis0", &[&[5, 3]], |t, l| t.softmax(l[0], 0)),
        case("unfold_k3", &[&[1, 2, 4, 5]], |t, l| t.unfold(l[0], 3)),
        case("avg_down_s2", &[&[1, 3, 4, 6]], |t, l| t.avg_downsample(l[0], 2)),
        case("avg_down_s3_ragged", &[&[1, 2, 7, 8]], |t, l| t.avg_downsample(l[0], 3)),
        case("sum_all", &[&[3, 4]], |t, l| t.sum_all(l[0])),
        case("mean_all", &[&[3, 4]], |t, l| t.mean_all(l[0])),
        case("gather_rows", &[&[5, 3]], |t, l| t.gather_rows(l[0], &[0, 2, 2, 4, 1])),
        case("concat_cols", &[&[3, 2], &[3, 4], &[3, 1]], |t, l| t.concat_cols(l)),
        case("concat_rows", &[&[2, 3], &[4, 3], &[1, 3]], |t, l| t.concat_rows(l)),
        case("slice_rows", &[&[6, 3]], |t, l| t.slice_rows(l[0], 1, 3)),
        case("slice_cols", &[&[3, 7]], |t, l| t.slice_cols(l[0], 2, 4)),
        case("reshape", &[&[2, 6]], |t, l| t.reshape(l[0], vec![3, 4])),
        case("nchw_to_rows", &[&[2, 3, 2, 3]], |t, l| t.nchw_to_rows(l[0])),
        case("rows_to_nchw", &[&[12, 3]], |t, l| t.rows_to_nchw(l[0], 2, 3, 2, 3)),
    ];

    v.push(Case {
        name: "relu",
        shapes: vec![vec![3, 4]],
        avoid_zero: true,
        tol: OP_TOLERANCE,
        build: Box::new(|t, l| t.relu(l[0])),
    });
    v.push(Case {
        name: "abs",
        shapes: vec![vec![3, 4]],
        avoid_zero: true,
        tol: OP_TOLERANCE,
        build: Box::new(|t, l| t.abs(l[0])),
    });
    // End-to-end chain touching conv, activation, softmax and the L1 loss
    // pattern used in training.
    v.push(Case {
        name: "composite_conv_softmax_l1",
        shapes: vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3], vec![3]],
        avoid_zero: true,
        tol: COMPOSITE_TOLERANCE,
        build: Box::new(|t, l| {
            let y = t.conv2d(l[0], l[1], l[2], 1);
            let y = t.relu(y);
            let rows = t.nchw_to_rows(y);
            let sm = t.softmax(rows, 1);
            let target = t.leaf(Tensor::full(t.shape(sm), 0.25), false);
            let d = t.sub(sm, target);
            let d = t.abs(d);
            t.mean_all(d)
        }),
    });
    v
}

fn sample_inputs(rng: &mut SeedRng, shapes: &[Vec<usize>], avoid_zero: bool) -> Vec<Vec<f64>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            (0..n)
                .map(|_| {
                    if avoid_zero {
                        let mag = rng.uniform(0.3, 1.3);
                        if rng.uniform(0.0, 1.0) < 0.5 {
                            -mag
                        } else {
                            mag
                        }
                    } else {
                        rng.uniform(-1.2, 1.2)
                    }
                })
                .collect()
        })
        .collect()
}

/// Scalar loss for a case: weighted sum of the op output.
fn eval(case: &Case, inputs: &[Vec<f64>], weights: &[f64], with_grad: bool) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let leaves: Vec<Var> = case
        .shapes
        .iter()
        .zip(inputs)
        .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()), with_grad))
        .collect();
    let out = (case.build)(&mut tape, &leaves);
    let w = tape.leaf(Tensor::new(tape.shape(out).to_vec(), weights.to_vec()), false);
    let prod = tape.mul(out, w);
    let loss = tape.sum_all(prod);
    let loss_val = tape.value(loss).data()[0];
    if !with_grad {
        return (loss_val, Vec::new());
    }
    let grads = tape.backward(loss);
    let out_grads = leaves
        .iter()
        .zip(&case.shapes)
        .map(|(l, s)| {
            grads
                .get(*l)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; s.iter().product()])
        })
        .collect();
    (loss_val, out_grads)
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Run the whole verification suite. `fault` names an op whose analytic
/// gradient gets its sign flipped before comparison — a self-test proving the
/// checker actually detects wrong gradients.
pub fn run_suite(seed: u64, eps: f64, fault: Option<&str>) -> Vec<OpReport> {
    let mut reports = Vec::new();
    for case in cases() {
        let mut rng = SeedRng::from_seed(seed ^ crate::rng::hash_name(case.name));
        let inputs = sample_inputs(&mut rng, &case.shapes, case.avoid_zero);

        // Probe output shape to draw loss weights.
        let probe_w = {
            let mut tape = Tape::<f64>::new();
            let leaves: Vec<Var> = case
                .shapes
                .iter()
                .zip(&inputs)
                .map(|(s, d)| tape.leaf(Tensor::new(s.clone(), d.clone()), false))
                .collect();
            let out = (case.build)(&mut tape, &leaves);
            let n = tape.value(out).numel();
            (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<f64>>()
        };

        let (_, mut analytic) = eval(&case, &inputs, &probe_w, true);
        if fault == Some(case.name) {
            for g in &mut analytic {
                for v in g.iter_mut() {
                    *v = -*v;
                }
            }
        }

        let mut max_err = 0.0f64;
        let mut x = inputs.clone();
        for li in 0..x.len() {
            for ei in 0..x[li].len() {
                let orig = x[li][ei];
                x[li][ei] = orig + eps;
                let (fp, _) = eval(&case, &x, &probe_w, false);
                x[li][ei] = orig - eps;
                let (fm, _) = eval(&case, &x, &probe_w, false);
                x[li][ei] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                max_err = max_err.max(rel_err(analytic[li][ei], numeric));
            }
        }

        reports.push(OpReport {
            name: case.name.to_string(),
            max_rel_err: max_err,
            tol: case.tol,
            pass: max_err < case.tol,
        });
    }
    reports
}

fn fd_micro_model(seed: u64, variant: Variant) -> SrModel<f64> {
    let mut cfg = ModelConfig::desk();
    cfg.encoder.n_feats = 3;
    cfg.encoder.n_resblocks = 1;
    cfg.nonlocal.c_g = 3;
    cfg.nonlocal.scale_set = vec![2];
    cfg.head.d_v = 6;
    cfg.head.hidden_q = vec![6];
    cfg.head.hidden_k = vec![6];
    cfg.head.hidden_v = vec![6];
    cfg.head.hidden_w = vec![6];
    cfg.variant = variant;
    SrModel::build(cfg, seed)
}

/// L1-style scalar loss over a fixed query batch; targets sit far from the
/// model's init-time outputs so the abs kink stays away from every probe.
fn model_loss(
    model: &SrModel<f64>,
    lr_img: &Tensor<f64>,
    coords: &[(f64, f64)],
    scale: Scale,
    targets: &[f64],
    with_grad: bool,
) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::<f64>::new();
    let pv = ParamVars::leaf_all(&model.params, &mut tape, with_grad);
    let lr = tape.leaf(lr_img.clone(), false);
    let batch = QueryBatch { coords, per_sample: coords.len(), scales: &[scale] };
    let out = model.forward_rows(&mut tape, &pv, lr, &batch);
    let tgt = tape.leaf(Tensor::new(vec![coords.len(), 3], targets.to_vec()), false);
    let d = tape.sub(out.rgb, tgt);
    let d = tape.abs(d);
    let loss = tape.mean_all(d);
    let loss_val = tape.value(loss).data()[0];
    if !with_grad {
        return (loss_val, Vec::new());
    }
    let grads = tape.backward(loss);
    let out_grads = pv
        .all()
        .iter()
        .zip(model.params.tensors())
        .map(|(v, t)| grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    (loss_val, out_grads)
}

/// End-to-end finite-difference check through a whole micro model.
/// `module` selects what is probed: "head" checks every parameter of the
/// no-non-local variant (encoder + attention head), "nonlocal" checks the
/// q/k/v projections of the full variant through the rendered output.
/// `fault` sign-flips the analytic gradient first — the negative control.
pub fn run_model_check(module: &str, seed: u64, eps: f64, fault: bool) -> OpReport {
    let (variant, prefix, name) = match module {
        "head" => (Variant::NoNonlocal, "", "head_end_to_end"),
        "nonlocal" => (Variant::Full, "nonlocal.", "nonlocal_end_to_end"),
        other => panic!("unknown end-to-end module `{other}`"),
    };
    let mut model = fd_micro_model(seed, variant);
    let mut rng = SeedRng::from_seed(seed ^ crate::rng::hash_name(name));

    let (lr_h, lr_w) = (6usize, 6usize);
    let lr_img = Tensor::new(
        vec![1, 3, lr_h, lr_w],
        (0..3 * lr_h * lr_w).map(|_| rng.uniform(0.05, 0.95)).collect(),
    );
    let coords: Vec<(f64, f64)> =
        (0..10).map(|_| (rng.uniform(-0.85, 0.85), rng.uniform(-0.85, 0.85))).collect();
    let scale = Scale { s_h: 1.7, s_w: 1.7 };
    let targets: Vec<f64> = (0..coords.len() * 3).map(|_| rng.uniform(1.5, 2.5)).collect();

    let (_, mut analytic) = model_loss(&model, &lr_img, &coords, scale, &targets, true);
    if fault {
        for g in &mut analytic {
            for v in g.iter_mut() {
                *v = -*v;
            }
        }
    }

    let mut max_err = 0.0f64;
    let names: Vec<String> = model.params.names().to_vec();
    for (ti, pname) in names.iter().enumerate() {
        if !pname.starts_with(prefix) {
            continue;
        }
        let n = model.params.tensors()[ti].numel();
        let probes = n.min(4);
        for _ in 0..probes {
            let j = rng.below(n);
            let orig = model.params.tensors()[ti].data()[j];
            model.params.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let (fp, _) = model_loss(&model, &lr_img, &coords, scale, &targets, false);
            model.params.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let (fm, _) = model_loss(&model, &lr_img, &coords, scale, &targets, false);
            model.params.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            max_err = max_err.max(rel_err(analytic[ti][j], numeric));
        }
    }

    OpReport {
        name: name.to_string(),
        max_rel_err: max_err,
        tol: COMPOSITE_TOLERANCE,
        pass: max_err < COMPOSITE_TOLERANCE,
    }
}
