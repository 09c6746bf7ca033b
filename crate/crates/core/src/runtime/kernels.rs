//! Built-in kernels. Bodies are written per thread block and guard threads
//! that fall outside the launch grid.

use crate::dispatch_dtype;
use crate::types::{DType, Element};

use super::kernel::{KernelDef, Param};

pub fn builtins() -> Vec<KernelDef> {
    vec![
        fill(),
        init_pattern(),
        axpy(),
        stencil_1d(),
        stencil_2d(),
        matmul(),
        row_reduce(),
        ell_columns(),
        spmv_ell(),
        blackscholes(),
        kmeans_assign(),
        kmeans_update(),
        kmeans_finalize(),
        hash_rounds(),
        hash_search(),
        nbody(),
        correlate3d(),
    ]
}

/// Integer division rounds toward negative infinity, float division is exact.
fn div_by<T: Element>(x: T, d: i64) -> T {
    if T::DTYPE.is_integer() {
        T::from_i64(x.to_i64().div_euclid(d))
    } else {
        T::from_f64(x.to_f64() / d as f64)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic small value for element `linear` of a pattern. Floats are
/// multiples of 1/8 so that sums stay exact.
pub fn pattern_value<T: Element>(linear: u64, seed: i64) -> T {
    let v = (mix64(linear ^ (seed as u64).rotate_left(17)) % 1000) as i64;
    if T::DTYPE.is_integer() {
        T::from_i64(v)
    } else {
        T::from_f64(v as f64 / 8.0)
    }
}

fn fill() -> KernelDef {
    KernelDef::new("fill", vec![Param::array("out", 0, None), Param::scalar("value", None)], |ctx, args| {
        dispatch_dtype!(args.dtype(), T => {
            let out = args.view::<T>(0);
            let value = args.scalar::<T>(1);
            for t in ctx.threads() {
                out.set(t.as_slice(), value);
            }
        })
    })
}

fn init_pattern() -> KernelDef {
    KernelDef::new(
        "init_pattern",
        vec![Param::array("out", 0, None), Param::scalar("seed", Some(DType::I64))],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let out = args.view::<T>(0);
                let seed = args.scalar::<i64>(1);
                let domain = *out.domain();
                for t in ctx.threads() {
                    let linear = domain.linear_index(&t).expect("thread inside array") as u64;
                    out.set(t.as_slice(), pattern_value::<T>(linear, seed));
                }
            })
        },
    )
}

fn axpy() -> KernelDef {
    KernelDef::new(
        "axpy",
        vec![
            Param::scalar("alpha", None),
            Param::array("x", 0, None),
            Param::array("y", 0, None),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let alpha = args.scalar::<T>(0);
                let x = args.view::<T>(1);
                let y = args.view::<T>(2);
                for t in ctx.threads() {
                    let i = t.as_slice();
                    y.set(i, alpha.mul(x.get(i)).add(y.get(i)));
                }
            })
        },
    )
}

fn stencil_1d() -> KernelDef {
    KernelDef::new(
        "stencil_1d",
        vec![
            Param::scalar("n", Some(DType::I32)),
            Param::array("output", 1, None),
            Param::array("input", 1, None),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let n = args.scalar::<i32>(0) as i64;
                let output = args.view::<T>(1);
                let input = args.view::<T>(2);
                for t in ctx.threads() {
                    let i = t[0];
                    if i >= n {
                        continue;
                    }
                    let left = if i - 1 >= 0 { input.get(&[i - 1]) } else { T::zero() };
                    let mid = input.get(&[i]);
                    let right = if i + 1 < n { input.get(&[i + 1]) } else { T::zero() };
                    let sum = left.add(mid).add(right);
                    output.set(&[i], T::from_f64(sum.to_f64() / 3.0));
                }
            })
        },
    )
}

/// Heat diffusion on a 2-D grid with a per-cell power source; edges reuse
/// the centre value.
fn stencil_2d() -> KernelDef {
    KernelDef::new(
        "stencil_2d",
        vec![
            Param::array("temp", 2, None),
            Param::array("power", 2, None),
            Param::array("result", 2, None),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let temp = args.view::<T>(0);
                let power = args.view::<T>(1);
                let result = args.view::<T>(2);
                let (rows, cols) = (temp.len(0), temp.len(1));
                for t in ctx.threads() {
                    let (i, j) = (t[0], t[1]);
                    let c = temp.get(&[i, j]);
                    let at = |a: i64, b: i64| {
                        if a < 0 || b < 0 || a >= rows || b >= cols {
                            c
                        } else {
                            temp.get(&[a, b])
                        }
                    };
                    let sum = c
                        .mul(T::from_i64(4))
                        .add(at(i - 1, j))
                        .add(at(i + 1, j))
                        .add(at(i, j - 1))
                        .add(at(i, j + 1));
                    result.set(&[i, j], div_by(sum, 8).add(power.get(&[i, j])));
                }
            })
        },
    )
}

fn matmul() -> KernelDef {
    KernelDef::new(
        "matmul",
        vec![Param::array("a", 2, None), Param::array("b", 2, None), Param::array("c", 2, None)],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let a = args.view::<T>(0);
                let b = args.view::<T>(1);
                let c = args.view::<T>(2);
                let inner = a.len(1);
                for t in ctx.threads() {
                    let (i, j) = (t[0], t[1]);
                    let mut acc = T::zero();
                    for k in 0..inner {
                        acc = acc.add(a.get(&[i, k]).mul(b.get(&[k, j])));
                    }
                    c.set(&[i, j], acc);
                }
            })
        },
    )
}

/// Combines `a[i, j]` into `out[i]` with the reduction declared for `out`.
fn row_reduce() -> KernelDef {
    KernelDef::new(
        "row_reduce",
        vec![Param::array("a", 2, None), Param::array("out", 1, None)],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let a = args.view::<T>(0);
                let out = args.view::<T>(1);
                for t in ctx.threads() {
                    out.reduce(&[t[0]], a.get(&[t[0], t[1]]));
                }
            })
        },
    )
}

/// Column indices of an ELL matrix: row `i`, slot `k` gets a pseudo-random
/// column below `columns`.
fn ell_columns() -> KernelDef {
    KernelDef::new(
        "ell_columns",
        vec![
            Param::array("cols", 2, Some(DType::I64)),
            Param::scalar("columns", Some(DType::I64)),
            Param::scalar("seed", Some(DType::I64)),
        ],
        |ctx, args| {
            let cols = args.view::<i64>(0);
            let columns = args.scalar::<i64>(1) as u64;
            let seed = args.scalar::<i64>(2) as u64;
            for t in ctx.threads() {
                let key = ((t[0] as u64) << 20) ^ t[1] as u64 ^ seed.rotate_left(40);
                cols.set(t.as_slice(), (mix64(key) % columns) as i64);
            }
        },
    )
}

fn spmv_ell() -> KernelDef {
    KernelDef::new(
        "spmv_ell",
        vec![
            Param::array("vals", 2, None),
            Param::array("cols", 2, Some(DType::I64)),
            Param::array("x", 1, None),
            Param::array("y", 1, None),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let vals = args.view::<T>(0);
                let cols = args.view::<i64>(1);
                let x = args.view::<T>(2);
                let y = args.view::<T>(3);
                let width = vals.len(1);
                for t in ctx.threads() {
                    let i = t[0];
                    let mut acc = T::zero();
                    for k in 0..width {
                        acc = acc.add(vals.get(&[i, k]).mul(x.get(&[cols.get(&[i, k])])));
                    }
                    y.set(&[i], acc);
                }
            })
        },
    )
}

/// Cumulative normal distribution, polynomial approximation.
fn cnd(d: f64) -> f64 {
    const A1: f64 = 0.319_381_53;
    const A2: f64 = -0.356_563_782;
    const A3: f64 = 1.781_477_937;
    const A4: f64 = -1.821_255_978;
    const A5: f64 = 1.330_274_429;
    let k = 1.0 / (1.0 + 0.231_641_9 * d.abs());
    let poly = k * (A1 + k * (A2 + k * (A3 + k * (A4 + k * A5))));
    let c = (-0.5 * d * d).exp() / (2.0 * std::f64::consts::PI).sqrt() * poly;
    if d > 0.0 {
        1.0 - c
    } else {
        c
    }
}

fn blackscholes() -> KernelDef {
    KernelDef::new(
        "blackscholes",
        vec![
            Param::array("price", 1, None),
            Param::array("strike", 1, None),
            Param::array("years", 1, None),
            Param::array("call", 1, None),
            Param::array("put", 1, None),
            Param::scalar("rate", Some(DType::F64)),
            Param::scalar("volatility", Some(DType::F64)),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let price = args.view::<T>(0);
                let strike = args.view::<T>(1);
                let years = args.view::<T>(2);
                let call = args.view::<T>(3);
                let put = args.view::<T>(4);
                let r = args.scalar::<f64>(5);
                let v = args.scalar::<f64>(6);
                for t in ctx.threads() {
                    let i = t.as_slice();
                    let s = price.get(i).to_f64() + 1.0;
                    let x = strike.get(i).to_f64() + 1.0;
                    let y = years.get(i).to_f64() / 100.0 + 0.25;
                    let sqrt_y = y.sqrt();
                    let d1 = ((s / x).ln() + (r + 0.5 * v * v) * y) / (v * sqrt_y);
                    let d2 = d1 - v * sqrt_y;
                    let discount = x * (-r * y).exp();
                    call.set(i, T::from_f64(s * cnd(d1) - discount * cnd(d2)));
                    put.set(i, T::from_f64(discount * (1.0 - cnd(d2)) - s * (1.0 - cnd(d1))));
                }
            })
        },
    )
}

fn kmeans_assign() -> KernelDef {
    KernelDef::new(
        "kmeans_assign",
        vec![
            Param::array("points", 2, None),
            Param::array("centers", 2, None),
            Param::array("labels", 1, Some(DType::I64)),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let points = args.view::<T>(0);
                let centers = args.view::<T>(1);
                let labels = args.view::<i64>(2);
                let (k, dims) = (centers.len(0), centers.len(1));
                for t in ctx.threads() {
                    let i = t[0];
                    let mut best = (f64::INFINITY, 0);
                    for c in 0..k {
                        let mut dist = 0.0;
                        for d in 0..dims {
                            let diff = points.get(&[i, d]).to_f64() - centers.get(&[c, d]).to_f64();
                            dist += diff * diff;
                        }
                        if dist < best.0 {
                            best = (dist, c);
                        }
                    }
                    labels.set(&[i], best.1);
                }
            })
        },
    )
}

fn kmeans_update() -> KernelDef {
    KernelDef::new(
        "kmeans_update",
        vec![
            Param::array("points", 2, None),
            Param::array("labels", 1, Some(DType::I64)),
            Param::array("sums", 2, None),
            Param::array("counts", 1, Some(DType::I64)),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let points = args.view::<T>(0);
                let labels = args.view::<i64>(1);
                let sums = args.view::<T>(2);
                let counts = args.view::<i64>(3);
                let dims = points.len(1);
                for t in ctx.threads() {
                    let i = t[0];
                    let c = labels.get(&[i]);
                    for d in 0..dims {
                        sums.reduce(&[c, d], points.get(&[i, d]));
                    }
                    counts.reduce(&[c], 1);
                }
            })
        },
    )
}

fn kmeans_finalize() -> KernelDef {
    KernelDef::new(
        "kmeans_finalize",
        vec![
            Param::array("sums", 2, None),
            Param::array("counts", 1, Some(DType::I64)),
            Param::array("centers", 2, None),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let sums = args.view::<T>(0);
                let counts = args.view::<i64>(1);
                let centers = args.view::<T>(2);
                let dims = centers.len(1);
                for t in ctx.threads() {
                    let c = t[0];
                    let n = counts.get(&[c]);
                    if n == 0 {
                        continue;
                    }
                    for d in 0..dims {
                        centers.set(&[c, d], div_by(sums.get(&[c, d]), n));
                    }
                }
            })
        },
    )
}

/// Digest of a thread index after `rounds` mixing rounds.
pub fn digest(index: i64, rounds: i64) -> u64 {
    let mut h = index as u64;
    for r in 0..rounds {
        h = mix64(h ^ (r as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    h
}

/// Compute-only kernel: no array arguments.
fn hash_rounds() -> KernelDef {
    KernelDef::new("hash_rounds", vec![Param::scalar("rounds", Some(DType::I64))], |ctx, args| {
        let rounds = args.scalar_value(0).as_i64();
        for t in ctx.threads() {
            std::hint::black_box(digest(t[0], rounds));
        }
    })
}

/// Smallest thread index whose digest matches `target` modulo `modulus`.
fn hash_search() -> KernelDef {
    KernelDef::new(
        "hash_search",
        vec![
            Param::array("found", 1, Some(DType::I64)),
            Param::scalar("rounds", Some(DType::I64)),
            Param::scalar("modulus", Some(DType::I64)),
            Param::scalar("target", Some(DType::I64)),
        ],
        |ctx, args| {
            let found = args.view::<i64>(0);
            let rounds = args.scalar::<i64>(1);
            let modulus = args.scalar::<i64>(2) as u64;
            let target = args.scalar::<i64>(3) as u64;
            for t in ctx.threads() {
                if digest(t[0], rounds) % modulus == target {
                    found.reduce(&[0], t[0]);
                }
            }
        },
    )
}

/// Pairwise linear attraction: `force[i] = Σ_j (pos[j] - pos[i]) * mass[j]`.
fn nbody() -> KernelDef {
    KernelDef::new(
        "nbody",
        vec![
            Param::array("pos", 2, None),
            Param::array("mass", 1, None),
            Param::array("force", 2, None),
        ],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let pos = args.view::<T>(0);
                let mass = args.view::<T>(1);
                let force = args.view::<T>(2);
                let (n, dims) = (pos.len(0), pos.len(1));
                for t in ctx.threads() {
                    let i = t[0];
                    for d in 0..dims {
                        let own = pos.get(&[i, d]);
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc.add(pos.get(&[j, d]).sub(own).mul(mass.get(&[j])));
                        }
                        force.set(&[i, d], acc);
                    }
                }
            })
        },
    )
}

/// `out[i,j,k] = Σ_d a[i+d, j, k] * b[i, j, k+d]` for `d` in -1..=1, skipping
/// out-of-range neighbours.
fn correlate3d() -> KernelDef {
    KernelDef::new(
        "correlate3d",
        vec![Param::array("a", 3, None), Param::array("b", 3, None), Param::array("out", 3, None)],
        |ctx, args| {
            dispatch_dtype!(args.dtype(), T => {
                let a = args.view::<T>(0);
                let b = args.view::<T>(1);
                let out = args.view::<T>(2);
                let (nx, nz) = (a.len(0), b.len(2));
                for t in ctx.threads() {
                    let (i, j, k) = (t[0], t[1], t[2]);
                    let mut acc = T::zero();
                    for d in -1..=1 {
                        if (0..nx).contains(&(i + d)) && (0..nz).contains(&(k + d)) {
                            acc = acc.add(a.get(&[i + d, j, k]).mul(b.get(&[i, j, k + d])));
                        }
                    }
                    out.set(&[i, j, k], acc);
                }
            })
        },
    )
}
