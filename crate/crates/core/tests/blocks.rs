mod common;

use common::{build, global_attention_oracle, idx, local_attention_oracle, max_abs, randn, rng, run};
use lwplg::blocks::*;
use lwplg::ops::{self, Activation};
use lwplg::oracle::{naive_adaptive_pool, naive_matmul, PoolMode};
use lwplg::{ParamId, Tape, Tensor, WeightStore};

fn set(store: &mut WeightStore<f64>, id: ParamId, f: impl Fn(usize) -> f64) {
    let t = store.tensor_mut(id);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

fn dw_identity(store: &mut WeightStore<f64>, c: &Conv2d) {
    set(store, c.weight, |i| if i % 9 == 4 { 1.0 } else { 0.0 });
    if let Some(b) = c.bias {
        set(store, b, |_| 0.0);
    }
}

fn pw_identity(store: &mut WeightStore<f64>, c: &Conv2d) {
    let n = c.in_channels;
    set(store, c.weight, |i| if i / n == i % n { 1.0 } else { 0.0 });
    if let Some(b) = c.bias {
        set(store, b, |_| 0.0);
    }
}

fn randomize(store: &mut WeightStore<f64>, seed: u64, std: f64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        let noise = randn(&mut r, t.dims());
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += std * n;
        }
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn se_zero_logits_halve_input() {
    let (se, mut store) = build(0, |pb| SqueezeExcite::new(pb, "se", 8, (1, 8), Activation::Silu));
    set(&mut store, se.expand.weight, |_| 0.0);
    let x = randn(&mut rng(1), &[2, 8, 3, 3]);
    let y = run(&se, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert!(y.bit_eq(&x.map(|v| v * 0.5)));
}

#[test]
fn se_matches_compositional_oracle() {
    let (se, mut store) = build(2, |pb| SqueezeExcite::new(pb, "se", 8, (1, 8), Activation::Silu));
    randomize(&mut store, 3, 0.5);
    let x = randn(&mut rng(4), &[1, 8, 4, 4]);
    let y = run(&se, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();

    let pooled = naive_adaptive_pool(&x, 1, 1, PoolMode::Mean).reshape(&[8, 1]).unwrap();
    let w1 = store.tensor(se.reduce.weight).reshape(&[1, 8]).unwrap();
    let b1 = store.tensor(se.reduce.bias.unwrap()).data()[0];
    let hidden = silu(naive_matmul(&w1, &pooled).data()[0] + b1);
    let w2 = store.tensor(se.expand.weight).reshape(&[8, 1]).unwrap();
    let b2 = store.tensor(se.expand.bias.unwrap());
    let gate: Vec<f64> = (0..8).map(|c| sigmoid(w2.data()[c] * hidden + b2.data()[c])).collect();
    let want = Tensor::from_fn(&[1, 8, 4, 4], |i| x.data()[i] * gate[i / 16]);
    assert!(max_abs(&y, &want) < 1e-12);
    assert_eq!(se.hidden(), 1);
}

#[test]
fn se_constant_input_gives_uniform_gate() {
    let (se, mut store) = build(5, |pb| SqueezeExcite::new(pb, "se", 16, (1, 8), Activation::Silu));
    randomize(&mut store, 6, 0.5);
    let x = Tensor::full(&[2, 16, 3, 3], 0.7);
    let y = run(&se, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    for c in 0..16 {
        let g = y.at(0, c, 0, 0);
        for b in 0..2 {
            for p in 0..9 {
                assert_eq!(y.at(b, c, p / 3, p % 3), g);
            }
        }
    }
}

#[test]
fn se_rejects_empty_bottleneck() {
    let mut store = WeightStore::<f64>::new();
    let mut r = rng(0);
    let mut pb = lwplg::store::ParamBuilder::new(&mut store, &mut r);
    assert!(SqueezeExcite::new(&mut pb, "se", 4, (1, 8), Activation::Silu).is_err());
}

fn grn_oracle(x: &Tensor<f64>, gamma: &[f64], beta: &[f64]) -> Tensor<f64> {
    let [n, c, h, w] = x.nchw();
    let mut out = x.clone();
    for b in 0..n {
        let g: Vec<f64> = (0..c).map(|ch| (0..h * w).map(|p| x.at(b, ch, p / w, p % w).powi(2)).sum::<f64>().sqrt()).collect();
        let mean = g.iter().sum::<f64>() / c as f64;
        for ch in 0..c {
            let nrm = g[ch] / (mean + GRN_EPS);
            for p in 0..h * w {
                let v = x.at(b, ch, p / w, p % w);
                out.data_mut()[idx([n, c, h, w], b, ch, p / w, p % w)] = gamma[ch] * v * nrm + beta[ch] + v;
            }
        }
    }
    out
}

#[test]
fn grn_matches_direct_formula() {
    let mut r = rng(7);
    let x = randn(&mut r, &[1, 3, 2, 2]);
    let gamma = randn(&mut r, &[3]);
    let beta = randn(&mut r, &[3]);
    let y = ops::grn(&x, &gamma, &beta, GRN_EPS).unwrap();
    assert!(max_abs(&y, &grn_oracle(&x, gamma.data(), beta.data())) < 1e-12);
    let zero = Tensor::zeros(&[3]);
    assert!(ops::grn(&x, &zero, &zero, GRN_EPS).unwrap().bit_eq(&x));
}

#[test]
fn grn_equal_norms_is_affine_plus_residual() {
    let x = Tensor::<f64>::new(&[1, 2, 1, 2], vec![3.0, 4.0, 0.0, 5.0]).unwrap();
    let gamma = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
    let beta = Tensor::new(&[2], vec![1.0, 0.25]).unwrap();
    let y = ops::grn(&x, &gamma, &beta, GRN_EPS).unwrap();
    let n = 5.0 / (5.0 + GRN_EPS);
    let want = [0.5 * 3.0 * n + 1.0 + 3.0, 0.5 * 4.0 * n + 1.0 + 4.0, 0.25, -2.0 * 5.0 * n + 0.25 + 5.0];
    for (a, b) in y.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn lw_patch_embed_shape_for_first_transition() {
    let (e, store) = build(8, |pb| LwPatchEmbed::new(pb, "embed", 64, 96));
    let x = randn(&mut rng(9), &[1, 64, 56, 56]).cast::<f32>();
    let y = run(&e, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[1, 96, 28, 28]);
    let odd = randn(&mut rng(9), &[1, 64, 7, 5]);
    let y = run(&e, &store, &odd, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[1, 96, 4, 3]);
    assert!(run(&e, &store, &Tensor::zeros(&[1, 64, 1, 4]), |b, cx, v| b.forward(cx, v)).is_err());
}

#[test]
fn lw_patch_embed_passthrough_selects_even_sites() {
    let c = 8;
    let (e, mut store) = build(10, |pb| LwPatchEmbed::new(pb, "embed", c, c));
    dw_identity(&mut store, &e.dw1);
    dw_identity(&mut store, &e.dw2);
    pw_identity(&mut store, &e.pw1);
    pw_identity(&mut store, &e.pw2);
    set(&mut store, e.se.reduce.weight, |_| 0.0);
    set(&mut store, e.se.expand.weight, |_| 0.0);
    set(&mut store, e.se.expand.bias.unwrap(), |_| 60.0);
    let x = randn(&mut rng(11), &[1, c, 6, 7]);
    let y = run(&e, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[1, c, 3, 4]);
    for i in 0..3 {
        for j in 0..4 {
            let z: Vec<f64> = (0..c)
                .map(|ch| {
                    let v = x.at(0, ch, 2 * i, 2 * j);
                    silu(v) + v
                })
                .collect();
            let mu = z.iter().sum::<f64>() / c as f64;
            let var = z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                let want = (z[ch] - mu) / (var + LN_EPS).sqrt();
                assert!((y.at(0, ch, i, j) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn baseline_patch_embed_doubles_width() {
    let (e, store) = build(12, |pb| BaselinePatchEmbed::new(pb, "embed", 64, 128));
    let x = randn(&mut rng(13), &[1, 64, 56, 56]).cast::<f32>();
    let y = run(&e, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[1, 128, 28, 28]);
    assert_eq!(e.se.hidden(), 16);
}

#[test]
fn ccf_ffn_plus_shapes_and_zero_map() {
    let (f, store) = build(14, |pb| CcfFfnPlus::new(pb, "ffn", 64, 3));
    assert_eq!(store.tensor(f.expand.weight).dims(), &[192, 64, 1, 1]);
    assert_eq!(store.tensor(f.restore.weight).dims(), &[64, 384, 1, 1]);
    let x = randn(&mut rng(15), &[1, 64, 56, 56]).cast::<f32>();
    let y = run(&f, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[1, 64, 56, 56]);
    let zero = Tensor::<f64>::zeros(&[1, 64, 5, 5]);
    let y = run(&f, &store, &zero, |b, cx, v| b.forward(cx, v)).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

#[test]
fn ccf_ffn_baseline_shapes_and_zero_map() {
    let (f, store) = build(16, |pb| CcfFfn::new(pb, "ffn", 64, 4));
    assert_eq!(store.tensor(f.fc.weight).dims(), &[64, 256, 1, 1]);
    let x = randn(&mut rng(17), &[1, 64, 8, 8]);
    assert_eq!(run(&f, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap().dims(), &[1, 64, 8, 8]);
    let zero = Tensor::<f64>::zeros(&[1, 64, 8, 8]);
    let y = run(&f, &store, &zero, |b, cx, v| b.forward(cx, v)).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

fn local(seed: u64, c: usize, win: usize, heads: usize) -> (LocalWindowAttention, WeightStore<f64>) {
    let (a, mut store) = build(seed, |pb| LocalWindowAttention::new(pb, "local", c, AttnSpec::new(win, heads)));
    randomize(&mut store, seed + 1, 0.3);
    (a, store)
}

#[test]
fn local_attention_matches_per_window_oracle() {
    let (a, store) = local(20, 32, 7, 1);
    let x = randn(&mut rng(21), &[1, 32, 14, 14]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    let o = local_attention_oracle(&x, store.tensor(a.qkv.weight), 7, 1);
    assert!(max_abs(&y, &o) < 1e-6);
}

#[test]
fn local_attention_pads_and_crops() {
    let (a, store) = local(22, 8, 4, 2);
    let x = randn(&mut rng(23), &[2, 8, 9, 10]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[2, 8, 9, 10]);
    let o = local_attention_oracle(&x, store.tensor(a.qkv.weight), 4, 2);
    assert!(max_abs(&y, &o) < 1e-6);
}

#[test]
fn local_attention_single_window_is_full_attention() {
    let (a, store) = local(24, 6, 5, 2);
    let x = randn(&mut rng(25), &[1, 6, 5, 5]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    let qkv = common::project(&x, store.tensor(a.qkv.weight));
    let mut o = Tensor::zeros(&[1, 6, 5, 5]);
    let sites: Vec<_> = (0..25).map(|t| (t / 5, t % 5)).collect();
    common::attend_sites(&qkv, 0, &sites, 2, &mut o);
    assert!(max_abs(&y, &o) < 1e-6);
}

#[test]
fn local_attention_zero_logits_average_window() {
    let c = 4;
    let (a, mut store) = build(26, |pb| LocalWindowAttention::new(pb, "local", c, AttnSpec::new(2, 1)));
    set(&mut store, a.qkv.weight, |i| {
        let (o, inp) = (i / c, i % c);
        if o >= 2 * c && o - 2 * c == inp {
            1.0
        } else {
            0.0
        }
    });
    let x = randn(&mut rng(27), &[1, c, 4, 4]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    for ch in 0..c {
        for yy in 0..4 {
            for xx in 0..4 {
                let (wy, wx) = (yy / 2 * 2, xx / 2 * 2);
                let mean =
                    (x.at(0, ch, wy, wx) + x.at(0, ch, wy, wx + 1) + x.at(0, ch, wy + 1, wx) + x.at(0, ch, wy + 1, wx + 1)) / 4.0;
                assert!((y.at(0, ch, yy, xx) - mean).abs() < 1e-12);
            }
        }
    }
}

fn global(seed: u64, c: usize, g: usize, heads: usize) -> (GlobalPooledAttention, WeightStore<f64>) {
    let (a, mut store) = build(seed, |pb| GlobalPooledAttention::new(pb, "global", c, AttnSpec::new(g, heads)));
    randomize(&mut store, seed + 1, 0.3);
    (a, store)
}

#[test]
fn global_attention_matches_composed_oracle() {
    let (a, store) = global(30, 48, 14, 1);
    let x = randn(&mut rng(31), &[1, 48, 28, 28]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    let o = global_attention_oracle(&x, store.tensor(a.qkv.weight), 14, 1);
    assert!(max_abs(&y, &o) < 1e-6);

    let (a, store) = global(32, 12, 3, 2);
    let x = randn(&mut rng(33), &[2, 12, 8, 11]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    let o = global_attention_oracle(&x, store.tensor(a.qkv.weight), 3, 2);
    assert!(max_abs(&y, &o) < 1e-6);
}

#[test]
fn global_attention_at_grid_size_is_full_attention() {
    let (a, store) = global(34, 6, 4, 3);
    let x = randn(&mut rng(35), &[1, 6, 4, 4]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    let qkv = common::project(&x, store.tensor(a.qkv.weight));
    let mut o = Tensor::zeros(&[1, 6, 4, 4]);
    let sites: Vec<_> = (0..16).map(|t| (t / 4, t % 4)).collect();
    common::attend_sites(&qkv, 0, &sites, 3, &mut o);
    assert!(max_abs(&y, &o) < 1e-6);
}

#[test]
fn global_attention_preserves_constants() {
    let (a, store) = global(36, 8, 3, 2);
    let x = Tensor::full(&[1, 8, 10, 7], 1.5);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    for ch in 0..8 {
        let v0 = y.at(0, ch, 0, 0);
        assert!((0..70).all(|p| (y.at(0, ch, p / 7, p % 7) - v0).abs() < 1e-12));
    }
}

#[test]
fn global_score_matrix_is_grid_squared_at_any_resolution() {
    let (a, store) = build(38, |pb| GlobalPooledAttention::new(pb, "global", 8, AttnSpec::new(5, 2)));
    for (h, w) in [(5, 5), (20, 13), (64, 64)] {
        let mut tape = Tape::<f64>::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[1, 8, h, w]));
        let mut cx = Ctx::new(&mut tape, &bound);
        a.forward(&mut cx, x).unwrap();
        let scores: Vec<_> = tape.trace().into_iter().filter(|e| e.op == "softmax").collect();
        assert_eq!(scores.len(), 1);
        assert_eq!(scores[0].dims, vec![1, 2, 25, 25]);
    }
}

#[test]
fn plg_sa_split_matches_table_rows() {
    let (a, _) = build(40, |pb| PlgAttention::new(pb, "attn", 128, AttnSpec::new(7, 2), Some(AttnSpec::new(14, 2)), false));
    assert_eq!(a.ratio.to_string(), "1/2");
    assert_eq!((a.local.channels(), a.local.heads), (64, 2));
    let g = a.global.as_ref().unwrap();
    assert_eq!((g.channels(), g.heads), (64, 2));
    assert_eq!(a.head_dim(), 32);

    let (a, _) = build(41, |pb| PlgAttention::new(pb, "attn", 48, AttnSpec::new(7, 1), None, false));
    assert!(a.global.is_none() && a.ratio.is_one());
    assert_eq!(a.local.channels(), 48);

    assert!(SplitRatio::new(1, 3).unwrap().local_channels(64).is_err());
}

#[test]
fn plg_sa_preserves_shape() {
    let (a, store) = build(42, |pb| PlgAttention::new(pb, "attn", 96, AttnSpec::new(7, 1), Some(AttnSpec::new(14, 2)), false));
    let x = randn(&mut rng(43), &[2, 96, 28, 28]).cast::<f32>();
    let y = run(&a, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[2, 96, 28, 28]);
}

#[test]
fn plg_sa_degenerate_windows_are_two_full_attentions() {
    let (a, mut store) = build(44, |pb| PlgAttention::new(pb, "attn", 12, AttnSpec::new(4, 1), Some(AttnSpec::new(4, 2)), false));
    randomize(&mut store, 45, 0.3);
    let x = randn(&mut rng(46), &[1, 12, 4, 4]);
    let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
    let (xl, xg) = ops::split_channels(&x, 4).unwrap();
    let sites: Vec<_> = (0..16).map(|t| (t / 4, t % 4)).collect();
    let mut yl = Tensor::zeros(&[1, 4, 4, 4]);
    common::attend_sites(&common::project(&xl, store.tensor(a.local.qkv.weight)), 0, &sites, 1, &mut yl);
    let mut yg = Tensor::zeros(&[1, 8, 4, 4]);
    let g = a.global.as_ref().unwrap();
    common::attend_sites(&common::project(&xg, store.tensor(g.qkv.weight)), 0, &sites, 2, &mut yg);
    assert!(max_abs(&y, &ops::concat_channels(&yl, &yg).unwrap()) < 1e-6);
}

fn block(seed: u64, c: usize, lsa: (usize, usize), gsa: Option<(usize, usize)>) -> (TransformerBlock, WeightStore<f64>) {
    build(seed, |pb| {
        TransformerBlock::new(
            pb,
            "block",
            c,
            AttnSpec::new(lsa.0, lsa.1),
            gsa.map(|g| AttnSpec::new(g.0, g.1)),
            FfnSpec::default(),
            false,
        )
    })
}

#[test]
fn transformer_block_zero_branches_is_identity() {
    for (c, lsa, gsa) in [(24, (4, 1), Some((3, 2))), (16, (3, 2), None)] {
        let (blk, mut store) = block(50, c, lsa, gsa);
        randomize(&mut store, 51, 0.2);
        for id in blk.branch_output_params() {
            set(&mut store, id, |_| 0.0);
        }
        let x = randn(&mut rng(52), &[2, c, 7, 6]);
        let y = run(&blk, &store, &x, |b, cx, v| b.forward(cx, v)).unwrap();
        assert!(y.bit_eq(&x));
    }
}

#[test]
fn transformer_block_preserves_shape_for_r_stage_three() {
    let (blk, store) = block(53, 240, (7, 2), Some((14, 3)));
    assert_eq!(blk.attn.head_dim(), 48);
    let x = randn(&mut rng(54), &[1, 240, 14, 14]).cast::<f32>();
    let y = run(&blk, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
    assert_eq!(y.dims(), &[1, 240, 14, 14]);
}

#[test]
fn stem_and_expansion_shapes() {
    for (c1, want) in [(64, [1, 64, 56, 56]), (48, [1, 48, 56, 56])] {
        let (s, store) = build(60, |pb| ConvStem::new(pb, "stem", 3, c1));
        let x = randn(&mut rng(61), &[1, 3, 224, 224]).cast::<f32>();
        let y = run(&s, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
        assert_eq!(y.dims(), &want);
    }
    let mut store = WeightStore::<f64>::new();
    let mut r = rng(0);
    assert!(ConvStem::new(&mut lwplg::store::ParamBuilder::new(&mut store, &mut r), "stem", 3, 15).is_err());

    for (c4, c5) in [(192, 576), (384, 960)] {
        let (e, store) = build(62, |pb| ChannelExpansion::new(pb, "exp", c4, c5));
        let x = randn(&mut rng(63), &[1, c4, 7, 7]).cast::<f32>();
        let y = run(&e, &store.cast::<f32>(), &x, |b, cx, v| b.forward(cx, v)).unwrap();
        assert_eq!(y.dims(), &[1, c5, 7, 7]);
    }
}
