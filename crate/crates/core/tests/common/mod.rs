#![allow(dead_code)]

use lwplg::blocks::Ctx;
use lwplg::store::ParamBuilder;
use lwplg::{Result, Tape, Tensor, Var, WeightStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| StandardNormal.sample(rng))
}

pub fn idx(d: [usize; 4], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * d[1] + c) * d[2] + y) * d[3] + x
}

/// Builds a block into a fresh store seeded by `seed`.
pub fn build<B>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<B>) -> (B, WeightStore<f64>) {
    let mut store = WeightStore::new();
    let mut r = rng(seed);
    let block = f(&mut ParamBuilder::new(&mut store, &mut r)).expect("block builds");
    (block, store)
}

/// Runs `fwd` on `x` with the weights in `store`.
pub fn run<B, T: lwplg::Scalar>(
    block: &B,
    store: &WeightStore<T>,
    x: &Tensor<T>,
    fwd: impl Fn(&B, &mut Ctx<'_, T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let mut cx = Ctx::new(&mut tape, &bound);
    let y = fwd(block, &mut cx, xv)?;
    Ok(tape.value(y).clone())
}

/// Pointwise projection `(cout, cin, 1, 1)` without bias, by loops.
pub fn project(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let [n, cin, h, wd] = x.nchw();
    let cout = w.dims()[0];
    let mut out = Tensor::zeros(&[n, cout, h, wd]);
    let od = out.nchw();
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = 0.0;
                    for i in 0..cin {
                        s += w.data()[o * cin + i] * x.at(b, i, y, xx);
                    }
                    out.data_mut()[idx(od, b, o, y, xx)] = s;
                }
            }
        }
    }
    out
}

/// Multi-head attention over a token list read from `qkv` (q, k, v in
/// consecutive channel thirds), written back to the same sites of `out`.
pub fn attend_sites(qkv: &Tensor<f64>, b: usize, sites: &[(usize, usize)], heads: usize, out: &mut Tensor<f64>) {
    let c = qkv.nchw()[1] / 3;
    let d = c / heads;
    let od = out.nchw();
    for h in 0..heads {
        let take = |part: usize| {
            let mut data = Vec::with_capacity(sites.len() * d);
            for &(y, x) in sites {
                for e in 0..d {
                    data.push(qkv.at(b, part * c + h * d + e, y, x));
                }
            }
            Tensor::new(&[sites.len(), d], data).unwrap()
        };
        let o = lwplg::oracle::naive_attention(&take(0), &take(1), &take(2));
        for (t, &(y, x)) in sites.iter().enumerate() {
            for e in 0..d {
                out.data_mut()[idx(od, b, h * d + e, y, x)] = o.data()[t * d + e];
            }
        }
    }
}

/// Zero-pad to window multiples, attend per window, crop.
pub fn local_attention_oracle(x: &Tensor<f64>, wqkv: &Tensor<f64>, win: usize, heads: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.nchw();
    let (hp, wp) = (h.div_ceil(win) * win, w.div_ceil(win) * win);
    let mut xp = Tensor::zeros(&[n, c, hp, wp]);
    let pd = xp.nchw();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    xp.data_mut()[idx(pd, b, ch, y, xx)] = x.at(b, ch, y, xx);
                }
            }
        }
    }
    let qkv = project(&xp, wqkv);
    let mut full = Tensor::zeros(&[n, c, hp, wp]);
    for b in 0..n {
        for wy in 0..hp / win {
            for wx in 0..wp / win {
                let sites: Vec<_> = (0..win * win).map(|t| (wy * win + t / win, wx * win + t % win)).collect();
                attend_sites(&qkv, b, &sites, heads, &mut full);
            }
        }
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let od = out.nchw();
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.data_mut()[idx(od, b, ch, y, xx)] = full.at(b, ch, y, xx);
                }
            }
        }
    }
    out
}

/// Max pool to `g × g`, attend over all pooled tokens, resize back.
pub fn global_attention_oracle(x: &Tensor<f64>, wqkv: &Tensor<f64>, g: usize, heads: usize) -> Tensor<f64> {
    use lwplg::oracle::{naive_adaptive_pool, naive_bilinear, PoolMode};
    let [n, c, h, w] = x.nchw();
    let p = naive_adaptive_pool(x, g, g, PoolMode::Max);
    let qkv = project(&p, wqkv);
    let mut y = Tensor::zeros(&[n, c, g, g]);
    let sites: Vec<_> = (0..g * g).map(|t| (t / g, t % g)).collect();
    for b in 0..n {
        attend_sites(&qkv, b, &sites, heads, &mut y);
    }
    naive_bilinear(&y, h, w)
}

pub fn max_abs(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
