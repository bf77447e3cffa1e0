#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{build, global_attention_oracle, local_attention_oracle, max_abs, randn, rng, run};
use lwplg::analysis::{compare_patch_embed_params, count_flops, count_params, resolution_sweep, GlobalMode};
use lwplg::blocks::{AttnSpec, FfnSpec, GlobalPooledAttention, LocalWindowAttention, TransformerBlock};
use lwplg::model::{decode_weights, encode_weights, load_weights, save_weights};
use lwplg::ops;
use lwplg::oracle::{naive_adaptive_pool, naive_bilinear, PoolMode};
use lwplg::train::{train_toy, TrainConfig};
use lwplg::verify::{gradcheck_suite, Options, Scope};
use lwplg::{build_model, variant_config, Tensor, WeightStore};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value / target - 1.0).abs() <= tol
}

fn perturb(store: &mut WeightStore<f64>, seed: u64, std: f64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        let noise = randn(&mut r, t.dims());
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += std * n;
        }
    }
}

fn parameter_parity() -> Check {
    let mut parts = Vec::new();
    for name in ["A", "R"] {
        let cfg = variant_config(name).map_err(|e| e.to_string())?;
        let m = build_model::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
        let total = count_params(&m.weights).total;
        parts.push(format!("{name} {total}"));
        ensure(within(total as f64, 5.0e6, 0.05), || format!("{name}: {total} outside 5.0M +-5%"))?;
    }
    Ok(parts.join(", "))
}

fn flop_parity() -> Check {
    let mut parts = Vec::new();
    let mut failures = Vec::new();
    for (name, target) in [("A", 1.6), ("R", 0.7)] {
        let cfg = variant_config(name).map_err(|e| e.to_string())?;
        let g = count_flops(&cfg, 224, 224).map_err(|e| e.to_string())?.gflops();
        parts.push(format!("{name} {g:.4}G (target {target}G)"));
        if !within(g, target, 0.10) {
            failures.push(format!("{name} {g:.4}G outside {target}G +-10%"));
        }
    }
    if failures.is_empty() {
        Ok(parts.join(", "))
    } else {
        Err(format!("{}; {}", failures.join(", "), parts.join(", ")))
    }
}

fn sweep_shape() -> Check {
    let sizes = [224, 448, 896];
    let mut parts = Vec::new();
    for name in ["A", "R"] {
        let cfg = variant_config(name).map_err(|e| e.to_string())?;
        let rows = resolution_sweep(&cfg, &sizes, GlobalMode::Pooled).map_err(|e| e.to_string())?;
        let naive = resolution_sweep(&cfg, &sizes, GlobalMode::Naive).map_err(|e| e.to_string())?;
        let mut worst: f64 = 0.0;
        for (p, q) in rows.windows(2).zip(naive.windows(2)) {
            let ratio = p[1].total_gflops / p[0].total_gflops;
            worst = worst.max(ratio);
            ensure(ratio <= 4.6, || format!("{name}: total ratio {ratio:.3} at {}", p[1].size))?;
            ensure(p[1].global_attn_gflops == p[0].global_attn_gflops, || format!("{name}: global column varies"))?;
            let nr = q[1].global_attn_gflops / q[0].global_attn_gflops;
            ensure((nr - 16.0).abs() < 1e-9, || format!("{name}: naive ratio {nr}"))?;
        }
        parts.push(format!("{name} max ratio {worst:.3}"));
    }
    Ok(parts.join(", "))
}

fn patch_embed_savings() -> Check {
    let mut parts = Vec::new();
    for (cin, cout) in [(64, 96), (96, 128), (128, 192)] {
        let c = compare_patch_embed_params(cin, cout).map_err(|e| e.to_string())?;
        parts.push(format!("{cin}->{cout} {:.1}%", 100.0 * c.savings));
        ensure(c.savings >= 0.70, || format!("{cin}->{cout}: savings {:.3}", c.savings))?;
    }
    Ok(parts.join(", "))
}

fn ffn_direction() -> Check {
    let plus = variant_config("A").map_err(|e| e.to_string())?;
    let mut base = plus.clone();
    base.ffn = FfnSpec::BASELINE;
    let a = count_flops(&base, 224, 224).map_err(|e| e.to_string())?.total as f64;
    let b = count_flops(&plus, 224, 224).map_err(|e| e.to_string())?.total as f64;
    let change = b / a - 1.0;
    let msg = format!("{:.0}M -> {:.0}M ({:+.2}%)", a / 1e6, b / 1e6, 100.0 * change);
    ensure((0.05..=0.12).contains(&change), || msg.clone())?;
    Ok(msg)
}

fn oracle_equivalence() -> Check {
    let mut worst = [0.0f64; 4];
    for (seed, c, win, heads, dims) in [(20, 32, 7, 1, [1, 32, 14, 14]), (22, 8, 4, 2, [2, 8, 9, 10])] {
        let (a, mut store) = build(seed, |pb| LocalWindowAttention::new(pb, "local", c, AttnSpec::new(win, heads)));
        perturb(&mut store, seed + 1, 0.3);
        let x = randn(&mut rng(seed + 2), &dims);
        let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(max_abs(&y, &local_attention_oracle(&x, store.tensor(a.qkv.weight), win, heads)));
    }
    for (seed, c, g, heads, dims) in [(30, 48, 14, 1, [1, 48, 28, 28]), (32, 12, 3, 2, [2, 12, 8, 11])] {
        let (a, mut store) = build(seed, |pb| GlobalPooledAttention::new(pb, "global", c, AttnSpec::new(g, heads)));
        perturb(&mut store, seed + 1, 0.3);
        let x = randn(&mut rng(seed + 2), &dims);
        let y = run(&a, &store, &x, |b, cx, v| b.forward(cx, v)).map_err(|e| e.to_string())?;
        worst[1] = worst[1].max(max_abs(&y, &global_attention_oracle(&x, store.tensor(a.qkv.weight), g, heads)));
    }
    let x = randn(&mut rng(40), &[2, 3, 28, 23]);
    let mut max_exact = true;
    for (oh, ow) in [(14, 14), (7, 5), (3, 9), (28, 23), (1, 1)] {
        let e = |err: lwplg::Error| err.to_string();
        max_exact &= ops::adaptive_max_pool2d(&x, oh, ow).map_err(e)?.bit_eq(&naive_adaptive_pool(&x, oh, ow, PoolMode::Max));
        worst[2] = worst[2]
            .max(max_abs(&ops::adaptive_avg_pool2d(&x, oh, ow).map_err(e)?, &naive_adaptive_pool(&x, oh, ow, PoolMode::Mean)));
    }
    let small = randn(&mut rng(41), &[1, 2, 7, 5]);
    for (oh, ow) in [(28, 23), (14, 10), (7, 5), (3, 2), (56, 56)] {
        let y = ops::bilinear_resize(&small, oh, ow).map_err(|e| e.to_string())?;
        worst[3] = worst[3].max(max_abs(&y, &naive_bilinear(&small, oh, ow)));
    }
    let msg = format!(
        "local {:.1e}, global {:.1e}, max pool {}, avg pool {:.1e}, bilinear {:.1e}",
        worst[0],
        worst[1],
        if max_exact { "exact" } else { "differs" },
        worst[2],
        worst[3]
    );
    ensure(worst[0] < 1e-6 && worst[1] < 1e-6 && max_exact && worst[2] < 1e-12 && worst[3] < 1e-12, || msg.clone())?;
    Ok(msg)
}

fn gradient_soundness() -> Check {
    let results = gradcheck_suite(Scope::All, Options::default()).map_err(|e| e.to_string())?;
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| format!("{} ({:.2e})", r.name, r.max_rel_error)).collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    for want in ["conv_stem", "lw_patch_embed", "ccf_ffn_plus", "lw_plg_sa", "transformer_block", "micro model"] {
        ensure(results.iter().any(|r| r.name.starts_with(want)), || format!("missing item {want}"))?;
    }
    for scope in [Scope::Op, Scope::Block, Scope::Model] {
        ensure(results.iter().any(|r| r.scope == scope), || format!("no {scope:?} items"))?;
    }
    Ok(format!("{} items, worst rel error {worst:.2e}", results.len()))
}

fn structural_invariants() -> Check {
    for (name, widths, dim) in [("A", [64, 96, 128, 192], 32), ("R", [48, 96, 240, 384], 48)] {
        let cfg = variant_config(name).map_err(|e| e.to_string())?;
        let m = build_model::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
        let x = randn(&mut rng(1), &[1, 3, 224, 224]).cast::<f32>();
        let (y, trace) = m.forward_traced(&x).map_err(|e| e.to_string())?;
        ensure(y.dims() == [1, 1000] && trace.stem == [1, widths[0], 56, 56], || format!("{name}: stem/logits shape"))?;
        for (i, (s, side)) in trace.stages.iter().zip([56, 28, 14, 7]).enumerate() {
            ensure(*s == [1, widths[i], side, side], || format!("{name} stage {}: {s:?}", i + 1))?;
        }
        for stage in &m.network.stages {
            for b in &stage.blocks {
                ensure(b.attn.head_dim() == dim, || format!("{name}: local head dim {}", b.attn.head_dim()))?;
                if let Some(g) = &b.attn.global {
                    ensure(g.channels() / g.heads == dim, || format!("{name}: global head dim"))?;
                }
            }
        }
        let bytes = encode_weights(&m.weights);
        let back = decode_weights::<f32>(&bytes).map_err(|e| e.to_string())?;
        ensure(encode_weights(&back) == bytes, || format!("{name}: weights round trip"))?;
    }

    let dir = std::env::temp_dir().join(format!("lwpv-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let path = dir.join("w.bin");
    let m = build_model::<f32>(&variant_config("R").map_err(|e| e.to_string())?, 3).map_err(|e| e.to_string())?;
    save_weights(&m.weights, &path).map_err(|e| e.to_string())?;
    let back = load_weights::<f32>(&path).map_err(|e| e.to_string())?;
    let _ = std::fs::remove_dir_all(&dir);
    let same =
        back.len() == m.weights.len() && back.iter().zip(m.weights.iter()).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b));
    ensure(same, || "file round trip differs".into())?;

    for (c, lsa, gsa) in [(24, (4, 1), Some((3, 2))), (16, (3, 2), None)] {
        let (blk, mut store) = build(50, |pb| {
            TransformerBlock::new(
                pb,
                "block",
                c,
                AttnSpec::new(lsa.0, lsa.1),
                gsa.map(|g: (usize, usize)| AttnSpec::new(g.0, g.1)),
                FfnSpec::default(),
                false,
            )
        });
        perturb(&mut store, 51, 0.2);
        for id in blk.branch_output_params() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = randn(&mut rng(52), &[2, c, 7, 6]);
        let y = run(&blk, &store, &x, |b, cx, v| b.forward(cx, v)).map_err(|e| e.to_string())?;
        ensure(y.bit_eq(&x), || "zero-projection block is not the identity".into())?;
    }

    let x = randn(&mut rng(53), &[2, 12, 14, 21]);
    for ca in [0, 1, 6, 11, 12] {
        let (a, b) = ops::split_channels(&x, ca).map_err(|e| e.to_string())?;
        ensure(ops::concat_channels(&a, &b).map_err(|e| e.to_string())?.bit_eq(&x), || format!("split at {ca}"))?;
    }
    for win in [1, 7] {
        let p = ops::window_partition(&x, win).map_err(|e| e.to_string())?;
        let back: Tensor<f64> = ops::window_reverse(&p, win, 2, 14, 21).map_err(|e| e.to_string())?;
        ensure(back.bit_eq(&x), || format!("partition round trip at window {win}"))?;
    }
    Ok("shape trace, head dims 32/48, identity block, round trips all exact".into())
}

fn learning_smoke() -> Check {
    let cfg = TrainConfig::default();
    let started = Instant::now();
    let (ma, a) = train_toy(&cfg, |_| {}).map_err(|e| e.to_string())?;
    let first = started.elapsed();
    let (mb, b) = train_toy(&cfg, |_| {}).map_err(|e| e.to_string())?;
    let msg = format!(
        "accuracy {:.3}, loss {:.4} -> {:.4}, {} steps, one run {:.1}s",
        a.train_accuracy,
        a.initial_loss,
        a.final_loss,
        a.losses.len(),
        first.as_secs_f64()
    );
    ensure(a.train_accuracy >= 0.95, || msg.clone())?;
    let bits = |r: &lwplg::train::TrainReport| r.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a) == bits(&b), || format!("loss curves differ; {msg}"))?;
    ensure(encode_weights(&ma.weights) == encode_weights(&mb.weights), || format!("weights differ; {msg}"))?;
    ensure(first < Duration::from_secs(300), || format!("single run too slow; {msg}"))?;
    Ok(msg)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("parameter parity", 1, parameter_parity),
        ("flop parity", 1, flop_parity),
        ("resolution sweep shape", 5, sweep_shape),
        ("patch-embed savings", 1, patch_embed_savings),
        ("ffn swap direction", 1, ffn_direction),
        ("oracle equivalence", 30, oracle_equivalence),
        ("gradient soundness", 120, gradient_soundness),
        ("structural invariants", 60, structural_invariants),
        ("learning smoke test", 600, learning_smoke),
    ];
    let mut failed = 0;
    for (i, (title, limit, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let elapsed = started.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > Duration::from_secs(*limit) => Err(format!("over {limit}s budget; {msg}")),
            other => other,
        };
        let (tag, msg) = match outcome {
            Ok(msg) => ("PASS", msg),
            Err(msg) => {
                failed += 1;
                ("FAIL", msg)
            }
        };
        println!("{tag} {} {title} [{:.2}s]: {msg}", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
