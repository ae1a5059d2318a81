use rand::Rng;

use super::*;
use crate::nn::testutil::zero_all;
use crate::rng::{seeded, uniform_tensor};

fn seq(tape: &mut Tape<f64>, data: Tensor<f64>, cls: bool, gh: usize, gw: usize) -> TokenSequence {
    let v = tape.leaf(data, true);
    TokenSequence::new(tape, v, cls, gh, gw).unwrap()
}

/// Cross-correlation with zero padding, one filter per channel.
fn conv_oracle(x: &[f64], w: &[f64], bias: &[f64], dims: [usize; 5]) -> Vec<f64> {
    let [b, c, h, wd, k] = dims;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = bias[ci];
                    for dy in 0..k {
                        for dx in 0..k {
                            let sy = y as isize + dy as isize - pad;
                            let sx = xx as isize + dx as isize - pad;
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                acc +=
                                    w[(ci * k + dy) * k + dx] * x[((bi * c + ci) * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[((bi * c + ci) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: Tensor<f64>, w: Tensor<f64>, bias: Tensor<f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(bias));
    let y = tape.depthwise_conv2d(x, w, b)?;
    Ok(tape.value(y).data().to_vec())
}

#[test]
fn four_tokens_fill_a_two_by_two_map() {
    let mut tape = Tape::new();
    let s = seq(
        &mut tape,
        Tensor::new(vec![1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        false,
        2,
        2,
    );
    let map = reshape_1d_to_2d(&mut tape, &s).unwrap();
    assert_eq!(tape.shape(map.data), &[1, 1, 2, 2]);
    assert_eq!(tape.value(map.data).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn map_layout_is_channel_major_row_major_grid() {
    let (b, gh, gw, d) = (2, 2, 3, 4);
    let mut rng = seeded(1);
    let x = uniform_tensor::<f64, _>(&mut rng, &[b, gh * gw, d], -1.0, 1.0);
    let mut tape = Tape::new();
    let s = seq(&mut tape, x.clone(), false, gh, gw);
    let map = reshape_1d_to_2d(&mut tape, &s).unwrap();
    let m = tape.value(map.data).data();
    for bi in 0..b {
        for i in 0..gh * gw {
            for c in 0..d {
                let (r, col) = (i / gw, i % gw);
                assert_eq!(
                    m[((bi * d + c) * gh + r) * gw + col],
                    x.data()[(bi * gh * gw + i) * d + c]
                );
            }
        }
    }
}

#[test]
fn class_token_is_excluded_and_round_trip_is_exact() {
    let mut rng = seeded(2);
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 7, 5], -3.0, 3.0);
    let mut tape = Tape::new();
    let s = seq(&mut tape, x.clone(), true, 2, 3);
    let map = reshape_1d_to_2d(&mut tape, &s).unwrap();
    assert_eq!(tape.shape(map.data), &[2, 5, 2, 3]);
    let cls = map.class_token.unwrap();
    let back = reshape_2d_to_1d(&mut tape, &map).unwrap();
    let restored = tape.concat(&[cls, back], 1).unwrap();
    assert_eq!(tape.value(restored), &x);
}

#[test]
fn mismatched_grid_is_a_config_error() {
    let mut tape = Tape::<f64>::new();
    let v = tape.leaf(Tensor::zeros(vec![1, 5, 2]), false);
    assert!(matches!(
        TokenSequence::new(&tape, v, false, 2, 2),
        Err(Error::Config { .. })
    ));
}

#[test]
fn delta_kernel_is_identity() {
    let mut rng = seeded(3);
    for k in [1, 3, 5, 7] {
        let x = uniform_tensor::<f64, _>(&mut rng, &[2, 3, 5, 4], -1.0, 1.0);
        let mut w = Tensor::zeros(vec![3, k, k]);
        for c in 0..3 {
            w.data_mut()[c * k * k + (k / 2) * k + k / 2] = 1.0;
        }
        assert_eq!(conv(x.clone(), w, Tensor::zeros(vec![3])).unwrap(), x.data());
    }
}

#[test]
fn ones_kernel_counts_in_bounds_neighbours() {
    let y = conv(
        Tensor::ones(vec![1, 1, 3, 3]),
        Tensor::ones(vec![1, 3, 3]),
        Tensor::zeros(vec![1]),
    )
    .unwrap();
    assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
}

#[test]
fn conv_matches_loop_oracle_on_random_cases() {
    let mut rng = seeded(4);
    for _ in 0..50 {
        let (b, c) = (rng.random_range(1..3), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..8), rng.random_range(1..8));
        let k = [1, 3, 5, 7][rng.random_range(0..4)];
        let x = uniform_tensor::<f64, _>(&mut rng, &[b, c, h, w], -1.0, 1.0);
        let wt = uniform_tensor::<f64, _>(&mut rng, &[c, k, k], -1.0, 1.0);
        let bias = uniform_tensor::<f64, _>(&mut rng, &[c], -1.0, 1.0);
        let expect = conv_oracle(x.data(), wt.data(), bias.data(), [b, c, h, w, k]);
        let got = conv(x, wt, bias).unwrap();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }
}

#[test]
fn even_kernel_is_a_config_error() {
    let r = conv(
        Tensor::ones(vec![1, 1, 3, 3]),
        Tensor::ones(vec![1, 2, 2]),
        Tensor::zeros(vec![1]),
    );
    assert!(matches!(r, Err(Error::Config { .. })));
    let mut rng = seeded(5);
    assert!(DwBranch::<f32>::new("b", 4, 4, &mut rng).is_err());
    assert!(BypassSpec::dwconv(vec![3, 4], 1).validate().is_err());
    assert!(BypassSpec::dwconv(vec![], 1).validate().is_err());
    assert!(BypassSpec::dwconv(vec![3], 0).validate().is_err());
    assert!(BypassSpec::dwconv(vec![3, 5, 7], 2).validate().is_ok());
}

#[test]
fn zero_branch_residual_is_zero_and_class_slot_always_zero() {
    let mut rng = seeded(6);
    let mut branch = DwBranch::<f64>::new("b", 4, 3, &mut rng).unwrap();
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 5, 4], -2.0, 2.0);
    let mut tape = Tape::new();
    let s = seq(&mut tape, x.clone(), true, 2, 2);
    let r = branch.forward(&mut tape, &s, Mode::Train).unwrap();
    let rv = tape.value(r).data();
    assert!(rv.iter().any(|&v| v != 0.0));
    for bi in 0..2 {
        assert!(rv[bi * 20..bi * 20 + 4].iter().all(|&v| v == 0.0));
    }

    branch.weight.value = Tensor::zeros(vec![4, 3, 3]);
    let mut tape = Tape::new();
    let s = seq(&mut tape, x, true, 2, 2);
    let r = branch.forward(&mut tape, &s, Mode::Train).unwrap();
    assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
}

#[test]
fn branch_is_the_composition_of_its_parts() {
    let mut rng = seeded(7);
    let mut branch = DwBranch::<f64>::new("b", 3, 5, &mut rng).unwrap();
    branch.bias.value = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 6, 3], -2.0, 2.0);

    let mut tape = Tape::new();
    let s = seq(&mut tape, x.clone(), false, 2, 3);
    let r = branch.clone().forward(&mut tape, &s, Mode::Train).unwrap();
    let composite = tape.value(r).clone();

    // GELU, then BatchNorm with batch statistics, then the convolution
    let mut tape = Tape::new();
    let xs = tape.constant(x);
    let p = tape.permute(xs, &[0, 2, 1]).unwrap();
    let m = tape.reshape(p, &[2, 3, 2, 3]).unwrap();
    let g = tape.gelu(m);
    let (gm, bm) = (
        tape.constant(branch.bn.gamma.value.clone()),
        tape.constant(branch.bn.beta.value.clone()),
    );
    let n = tape
        .batchnorm2d(g, gm, bm, crate::tensor::BnStats::Batch, 1e-5)
        .unwrap()
        .out;
    let (w, b) = (
        tape.constant(branch.weight.value.clone()),
        tape.constant(branch.bias.value.clone()),
    );
    let c = tape.depthwise_conv2d(n, w, b).unwrap();
    let f = tape.reshape(c, &[2, 3, 6]).unwrap();
    let back = tape.permute(f, &[0, 2, 1]).unwrap();
    assert_eq!(tape.value(back), &composite);
}

fn blocks(n: usize, dim: usize, rng: &mut crate::rng::Prng) -> Vec<TransformerBlock<f64>> {
    (0..n)
        .map(|i| TransformerBlock::new(&format!("blocks.{i}"), dim, 2, 2 * dim, rng).unwrap())
        .collect()
}

fn run_group(
    x: &Tensor<f64>,
    blocks: &[TransformerBlock<f64>],
    kind: BypassKind,
    branches: &mut [DwBranch<f64>],
) -> Tensor<f64> {
    let mut tape = Tape::new();
    let s = seq(&mut tape, x.clone(), true, 2, 2);
    let out = bypass_group_forward(&mut tape, &s, blocks, kind, branches, Mode::Train).unwrap();
    tape.value(out.tokens).clone()
}

#[test]
fn zeroed_branches_reproduce_the_plain_stack() {
    let mut rng = seeded(8);
    let bl = blocks(2, 4, &mut rng);
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let plain = run_group(&x, &bl, BypassKind::None, &mut []);
    let mut branches: Vec<_> = [3, 5]
        .iter()
        .map(|&k| DwBranch::new(&format!("b{k}"), 4, k, &mut rng).unwrap())
        .collect();
    for b in &mut branches {
        b.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let with = run_group(&x, &bl, BypassKind::Dwconv, &mut branches);
    assert!(plain
        .data()
        .iter()
        .zip(with.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn class_token_matches_plain_stack_with_live_branch() {
    let mut rng = seeded(9);
    let bl = blocks(1, 4, &mut rng);
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let plain = run_group(&x, &bl, BypassKind::None, &mut []);
    let mut branches = vec![DwBranch::new("b", 4, 3, &mut rng).unwrap()];
    let with = run_group(&x, &bl, BypassKind::Dwconv, &mut branches);
    for bi in 0..2 {
        let r = bi * 20..bi * 20 + 4;
        assert_eq!(plain.data()[r.clone()], with.data()[r]);
    }
    assert!(plain.max_abs_diff(&with) > 0.0);
}

#[test]
fn identity_shortcut_doubles_patches_over_a_zero_block() {
    let mut rng = seeded(10);
    let mut bl = blocks(1, 4, &mut rng);
    zero_all(&mut bl[0]);
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let out = run_group(&x, &bl, BypassKind::Identity, &mut []);
    for (i, (&o, &v)) in out.data().iter().zip(x.data()).enumerate() {
        let is_cls = (i / 4) % 5 == 0;
        assert_eq!(o, if is_cls { v } else { 2.0 * v });
    }
}

#[test]
fn zeroed_second_branch_matches_single_branch() {
    let mut rng = seeded(11);
    let bl = blocks(1, 4, &mut rng);
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let b3 = DwBranch::new("k3", 4, 3, &mut rng).unwrap();
    let mut b5 = DwBranch::new("k5", 4, 5, &mut rng).unwrap();
    b5.weight.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let single = run_group(&x, &bl, BypassKind::Dwconv, &mut [b3.clone()]);
    let both = run_group(&x, &bl, BypassKind::Dwconv, &mut [b3, b5]);
    assert_eq!(single, both);
}

#[test]
fn gradients_reach_blocks_and_branches() {
    let mut rng = seeded(12);
    let bl = blocks(2, 4, &mut rng);
    let mut branches = vec![DwBranch::new("dw", 4, 3, &mut rng).unwrap()];
    let x = uniform_tensor::<f64, _>(&mut rng, &[2, 5, 4], -1.0, 1.0);
    let mut tape = Tape::new();
    let s = seq(&mut tape, x, true, 2, 2);
    let out = bypass_group_forward(&mut tape, &s, &bl, BypassKind::Dwconv, &mut branches, Mode::Train).unwrap();
    let r = tape.constant(uniform_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0));
    let prod = tape.mul(out.tokens, r).unwrap();
    let loss = tape.sum_all(prod);
    tape.backward(loss).unwrap();
    let mut nonzero = 0;
    for p in ["dw.weight", "dw.bias"] {
        nonzero += usize::from(tape.named_grad(p).unwrap().iter().any(|&g| g != 0.0));
    }
    assert_eq!(nonzero, 2);
    let mut block_grad = false;
    bl[0].visit(&mut |p| block_grad |= tape.named_grad(&p.name).is_some_and(|g| g.iter().any(|&v| v != 0.0)));
    assert!(block_grad);
}

#[test]
fn extra_param_counts() {
    let k3 = BypassSpec::dwconv(vec![3], 1);
    assert_eq!(extra_params(&k3, 192, 12, false), 23_040);
    assert_eq!(extra_params(&BypassSpec::dwconv(vec![3], 2), 192, 12, false), 11_520);
    assert_eq!(extra_params(&BypassSpec::dwconv(vec![3, 5], 1), 192, 12, false), 82_944);
    assert_eq!(extra_params(&k3, 192, 12, true), 23_040 + 12 * 2 * 192);
    assert_eq!(extra_params(&BypassSpec::identity(1), 192, 12, true), 0);
    assert_eq!(extra_params(&BypassSpec::none(), 192, 12, true), 0);
}

#[test]
fn extra_flop_counts() {
    let k3 = BypassSpec::dwconv(vec![3], 1);
    assert_eq!(extra_flops(&k3, 192, 12, 14, 14), 4_064_256);
    assert_eq!(extra_flops(&k3, 64, 4, 8, 8), 147_456);
    // 12 blocks in groups of 4: three branches of 192·196·9
    assert_eq!(
        extra_flops(&BypassSpec::dwconv(vec![3], 4), 192, 12, 14, 14),
        3 * 192 * 196 * 9
    );
    assert_eq!(extra_flops(&BypassSpec::dwconv(vec![3], 3), 192, 12, 14, 14), 1_354_752);
    assert_eq!(extra_flops(&BypassSpec::identity(1), 192, 12, 14, 14), 0);
}

#[test]
fn remainder_blocks_form_a_final_group() {
    let spec = BypassSpec::dwconv(vec![3], 4);
    assert_eq!(spec.group_ranges(10), vec![0..4, 4..8, 8..10]);
    assert_eq!(spec.num_groups(10), 3);
    assert_eq!(extra_params(&spec, 8, 10, false), 3 * 8 * 10);
    assert_eq!(BypassSpec::dwconv(vec![3], 1).group_ranges(3), vec![0..1, 1..2, 2..3]);
}

#[test]
fn formula_matches_instantiated_branch_tensors() {
    let mut rng = seeded(13);
    for (kernels, group, depth, dim) in [(vec![3], 1, 12, 192), (vec![3, 5], 2, 6, 16), (vec![3, 5, 7], 3, 7, 8)] {
        let spec = BypassSpec::dwconv(kernels.clone(), group);
        let mut conv_total = 0;
        let mut all_total = 0;
        for _ in spec.group_ranges(depth) {
            for &k in &kernels {
                let b = DwBranch::<f32>::new("b", dim, k, &mut rng).unwrap();
                conv_total += b.conv_params();
                all_total += b.num_params();
            }
        }
        assert_eq!(extra_params(&spec, dim, depth, false), conv_total);
        assert_eq!(extra_params(&spec, dim, depth, true), all_total);
    }
}

#[test]
fn spec_parses_from_toml() {
    let spec: BypassSpec = toml::from_str("kind = \"dwconv\"\nkernel_sizes = [3, 5]\ngroup_size = 2").unwrap();
    assert_eq!(spec, BypassSpec::dwconv(vec![3, 5], 2));
    let spec: BypassSpec = toml::from_str("kind = \"none\"").unwrap();
    assert_eq!(spec, BypassSpec::none());
    assert!(toml::from_str::<BypassSpec>("kind = \"gated\"").is_err());
}
