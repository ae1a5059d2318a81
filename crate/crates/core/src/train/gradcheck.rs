//! Central finite-difference verification of tape gradients in `f64`.
//!
//! Each check reduces the function output to a scalar through a fixed
//! random projection, so every output element contributes, then compares
//! the tape gradient of every input element against
//! `(L(x + h) − L(x − h)) / 2h`.
//!
//! The error reported for one input tensor is
//! `max_i |analytic_i − numeric_i| / max(‖analytic‖∞, ‖numeric‖∞, GRAD_FLOOR)`,
//! and an op's error is the worst over its inputs. The floor makes tensors
//! whose gradient vanishes identically (such as attention key biases) an
//! absolute comparison instead of a ratio of rounding noise.

use std::fmt;

use rand::Rng;

use crate::error::Result;
use crate::nn::{Mode, Module};
use crate::rng::{seeded, stream, uniform_tensor};
use crate::tensor::{BnStats, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-3;
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar inputs probed.
    pub probed: usize,
    /// Input tensor with the largest error.
    pub worst_input: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error <= REL_TOLERANCE
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} max_rel_err {:>10.3e}  ({} probes, worst: {})  {}",
            self.name,
            self.max_rel_error,
            self.probed,
            self.worst_input,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Error of `analytic` against `numeric`, relative to the larger of their
/// max-norms and [`GRAD_FLOOR`].
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(GRAD_FLOOR, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / scale
}

fn projection(shape: &[usize], name: &str) -> Tensor<f64> {
    uniform_tensor(&mut stream(0x6772_6164, name), shape, -1.0, 1.0)
}

fn projected_loss(tape: &mut Tape<f64>, out: Var, name: &str) -> Result<Var> {
    let r = tape.constant(projection(tape.shape(out), name));
    let prod = tape.mul(out, r)?;
    Ok(tape.sum_all(prod))
}

/// Checks `f`'s gradient with respect to every input tensor.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = projected_loss(&mut tape, out, name)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = projected_loss(&mut tape, out, name)?;
    tape.backward(loss)?;

    let mut report = GradReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        probed: 0,
        worst_input: String::new(),
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("leaf gradient").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        report.probed += numeric.len();
        let err = relative_error(&analytic, &numeric);
        if err > report.max_rel_error || report.worst_input.is_empty() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_input = format!("input {i}");
        }
    }
    Ok(report)
}

fn rand_in(seed: u64, shape: &[usize]) -> Tensor<f64> {
    uniform_tensor(&mut seeded(seed), shape, -2.0, 2.0)
}

/// Finite-difference checks for every differentiable primitive on the tape.
pub fn op_suite() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let r = rand_in;
    out.push(check_fn("add", &[r(1, &[2, 3, 4]), r(2, &[2, 3, 4])], |t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(check_fn("add (broadcast)", &[r(3, &[2, 3, 4]), r(4, &[4])], |t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(check_fn(
        "sub (broadcast)",
        &[r(5, &[2, 3, 4]), r(6, &[3, 4])],
        |t, v| t.sub(v[0], v[1]),
    )?);
    out.push(check_fn("mul (broadcast)", &[r(7, &[2, 3, 4]), r(8, &[4])], |t, v| {
        t.mul(v[0], v[1])
    })?);
    out.push(check_fn("mul (self)", &[r(9, &[3, 3])], |t, v| t.mul(v[0], v[0]))?);
    out.push(check_fn("scale", &[r(10, &[5])], |t, v| Ok(t.scale(v[0], -1.7)))?);
    out.push(check_fn("add_scalar", &[r(11, &[5])], |t, v| {
        Ok(t.add_scalar(v[0], 0.3))
    })?);
    out.push(check_fn("matmul", &[r(12, &[3, 4]), r(13, &[4, 2])], |t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(check_fn(
        "matmul (batched)",
        &[r(14, &[2, 3, 3, 4]), r(15, &[2, 3, 4, 5])],
        |t, v| t.matmul(v[0], v[1]),
    )?);
    out.push(check_fn(
        "matmul (broadcast)",
        &[r(16, &[2, 1, 3, 4]), r(17, &[3, 4, 2])],
        |t, v| t.matmul(v[0], v[1]),
    )?);
    out.push(check_fn(
        "matmul_nt",
        &[r(18, &[2, 3, 4]), r(19, &[2, 5, 4])],
        |t, v| t.matmul_nt(v[0], v[1]),
    )?);
    out.push(check_fn(
        "linear",
        &[r(20, &[2, 3, 4]), r(21, &[5, 4]), r(22, &[5])],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    )?);
    out.push(check_fn("transpose", &[r(23, &[2, 3, 4])], |t, v| {
        t.transpose(v[0], 0, -1)
    })?);
    out.push(check_fn("permute", &[r(24, &[2, 3, 4, 2])], |t, v| {
        t.permute(v[0], &[0, 2, 1, 3])
    })?);
    out.push(check_fn("reshape", &[r(25, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]))?);
    out.push(check_fn("softmax (last)", &[r(26, &[3, 5])], |t, v| {
        t.softmax(v[0], -1)
    })?);
    out.push(check_fn("softmax (middle)", &[r(27, &[2, 4, 3])], |t, v| {
        t.softmax(v[0], 1)
    })?);
    out.push(check_fn("gelu", &[r(28, &[20])], |t, v| Ok(t.gelu(v[0])))?);
    out.push(check_fn("sum", &[r(29, &[2, 3, 4])], |t, v| t.sum(v[0], 1))?);
    out.push(check_fn("mean", &[r(30, &[2, 3, 4])], |t, v| t.mean(v[0], -1))?);
    out.push(check_fn("sum_all", &[r(31, &[2, 3])], |t, v| Ok(t.sum_all(v[0])))?);
    out.push(check_fn("concat", &[r(32, &[2, 1, 3]), r(33, &[2, 4, 3])], |t, v| {
        t.concat(&[v[0], v[1]], 1)
    })?);
    out.push(check_fn("split", &[r(34, &[2, 5, 3])], |t, v| {
        let parts = t.split(v[0], 1, &[2, 3])?;
        let a = t.scale(parts[0], 2.0);
        let b = t.scale(parts[1], -0.5);
        t.concat(&[b, a], 1)
    })?);
    out.push(check_fn("narrow", &[r(35, &[3, 4])], |t, v| t.narrow(v[0], 0, 1, 2))?);
    out.push(check_fn("embedding", &[r(36, &[4, 3])], |t, v| {
        t.embedding(v[0], &[2, 0, 2, 3])
    })?);
    out.push(check_fn(
        "layernorm",
        &[r(37, &[2, 3, 6]), r(38, &[6]), r(39, &[6])],
        |t, v| t.layernorm(v[0], v[1], v[2], 1e-6),
    )?);
    out.push(check_fn(
        "batchnorm2d (train)",
        &[r(40, &[2, 3, 3, 3]), r(41, &[3]), r(42, &[3])],
        |t, v| Ok(t.batchnorm2d(v[0], v[1], v[2], BnStats::Batch, 1e-5)?.out),
    )?);
    out.push(check_fn(
        "batchnorm2d (eval)",
        &[r(43, &[2, 3, 2, 2]), r(44, &[3]), r(45, &[3])],
        |t, v| {
            let stats = BnStats::Running {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
            };
            Ok(t.batchnorm2d(v[0], v[1], v[2], stats, 1e-5)?.out)
        },
    )?);
    for k in [3, 5] {
        out.push(check_fn(
            &format!("depthwise_conv2d (k={k})"),
            &[
                r(46 + k as u64, &[2, 3, 4, 5]),
                r(50 + k as u64, &[3, k, k]),
                r(60 + k as u64, &[3]),
            ],
            |t, v| t.depthwise_conv2d(v[0], v[1], v[2]),
        )?);
    }
    out.push(check_fn("patchify", &[r(70, &[2, 3, 4, 4])], |t, v| {
        t.patchify(v[0], 2)
    })?);
    out.push(check_fn("cross_entropy", &[r(71, &[4, 5])], |t, v| {
        t.cross_entropy(v[0], &[0, 3, 4, 1], 0.0)
    })?);
    out.push(check_fn("cross_entropy (smoothed)", &[r(72, &[3, 4])], |t, v| {
        t.cross_entropy(v[0], &[2, 0, 1], 0.1)
    })?);
    Ok(out)
}

/// Finite-difference check of a whole model's loss with respect to every
/// parameter tensor and the input images, in training mode.
pub fn check_model(model: &mut crate::model::Model<f64>, images: &Tensor<f64>, labels: &[usize]) -> Result<GradReport> {
    let loss_of = |model: &mut crate::model::Model<f64>, images: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), true);
        let logits = model.forward(&mut tape, x, Mode::Train)?;
        let loss = tape.cross_entropy(logits, labels, 0.0)?;
        Ok(tape.value(loss).data()[0])
    };
    // Running statistics do not influence training-mode outputs; restore them anyway.
    let snapshot = model.clone();

    let mut tape = Tape::new();
    let x = tape.leaf(images.clone(), true);
    let logits = model.forward(&mut tape, x, Mode::Train)?;
    let loss = tape.cross_entropy(logits, labels, 0.0)?;
    tape.backward(loss)?;

    let mut names = Vec::new();
    model.visit(&mut |p| names.push((p.name.clone(), p.len())));
    let mut report = GradReport {
        name: format!("model ({} parameter tensors)", names.len()),
        max_rel_error: 0.0,
        probed: 0,
        worst_input: String::new(),
    };
    let record = |label: &str, analytic: &[f64], numeric: &[f64], report: &mut GradReport| {
        let err = relative_error(analytic, numeric);
        report.probed += numeric.len();
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_input = label.to_string();
        }
    };

    for (name, len) in &names {
        let analytic = tape
            .named_grad(name)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; *len]);
        let mut numeric = vec![0.0; *len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut diffs = [0.0; 2];
            for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                model.visit_mut(&mut |p| {
                    if &p.name == name {
                        p.value.data_mut()[j] += sign * FD_STEP;
                    }
                });
                diffs[s] = loss_of(model, images)?;
                model.visit_mut(&mut |p| {
                    if &p.name == name {
                        p.value.data_mut()[j] -= sign * FD_STEP;
                    }
                });
            }
            *slot = (diffs[0] - diffs[1]) / (2.0 * FD_STEP);
        }
        record(name, &analytic, &numeric, &mut report);
    }

    let analytic = tape.grad(x).expect("input gradient").to_vec();
    let mut probe = images.clone();
    let mut numeric = vec![0.0; probe.len()];
    for (j, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + FD_STEP;
        let up = loss_of(model, &probe)?;
        probe.data_mut()[j] = orig - FD_STEP;
        let down = loss_of(model, &probe)?;
        probe.data_mut()[j] = orig;
        *slot = (up - down) / (2.0 * FD_STEP);
    }
    record("images", &analytic, &numeric, &mut report);
    *model = snapshot;
    Ok(report)
}

/// The tiny end-to-end configuration: dim 8, depth 2, a 2×2 patch grid
/// (4 tokens plus the class token) and a 3×3 depth-wise branch per block.
pub fn tiny_model_config() -> crate::model::ModelConfig {
    use crate::bypass::BypassSpec;
    crate::model::ModelConfig {
        image_size: 4,
        patch_size: 2,
        in_channels: 3,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        use_pos_embed: true,
        use_class_token: true,
        pooling: crate::model::Pooling::ClassToken,
        bypass: BypassSpec::dwconv(vec![3], 1),
        seed: 11,
    }
}

pub fn model_suite() -> Result<GradReport> {
    let cfg = tiny_model_config();
    let mut model = crate::model::Model::<f32>::build(&cfg)?.cast::<f64>();
    // Perturb norm parameters away from their 1/0 init so their gradients are exercised.
    let mut rng = seeded(5);
    model.visit_mut(&mut |p| {
        if !p.decay {
            for v in p.value.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        } else {
            for v in p.value.data_mut() {
                *v *= 20.0;
            }
        }
    });
    let images = uniform_tensor(&mut seeded(6), &[2, 3, 4, 4], -2.0, 2.0);
    let report = check_model(&mut model, &images, &[0, 2])?;
    Ok(GradReport {
        name: "model (dim 8, depth 2, 4 tokens)".into(),
        ..report
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_is_scale_free() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let e = relative_error(&[1.0, 2.0], &[1.0, 2.2]);
        assert!((e - 0.2 / 2.2).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        let tiny = relative_error(&[1e-3, 2e-3], &[1e-3, 2.2e-3]);
        assert!((tiny - e).abs() < 1e-12);
        // vanishing gradients compare absolutely
        assert!((relative_error(&[0.0], &[1e-12]) - 1e-6).abs() < 1e-18);
        assert!(relative_error(&[0.0], &[1e-8]) > REL_TOLERANCE);
    }

    #[test]
    fn corrupted_backward_is_named() {
        // sin with a backward rule that returns 2·cos
        let report = check_fn("bad_sin", &[rand_in(1, &[6])], |t, v| {
            let out = t.value(v[0]).map(f64::sin);
            Ok(t.custom(
                &[v[0]],
                out,
                Box::new(|ins, _out, g| vec![ins[0].data().iter().zip(g).map(|(x, g)| 2.0 * x.cos() * g).collect()]),
            ))
        })
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.name, "bad_sin");
        assert!(report.to_string().contains("FAIL"));

        let good = check_fn("sin", &[rand_in(1, &[6])], |t, v| {
            let out = t.value(v[0]).map(f64::sin);
            Ok(t.custom(
                &[v[0]],
                out,
                Box::new(|ins, _out, g| vec![ins[0].data().iter().zip(g).map(|(x, g)| x.cos() * g).collect()]),
            ))
        })
        .unwrap();
        assert!(good.passed(), "{good}");
    }
}
