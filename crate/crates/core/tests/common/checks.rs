//! Criterion-level checks shared by the unit suites and the acceptance run.
//! Each returns a short detail string, `Err` when the check fails.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbquant_core::phantom::{gen_cohort, CohortSpec};
use vbquant_core::quantify::{
    dice, ggo_consolidation_split, hu_histogram, infection_volume, pearson, poi, poi_breakdown, HuRange,
};
use vbquant_core::tensor::kernels::{self, ConvParams};
use vbquant_core::tensor::{grad_check, grad_check_mixed, Graph, Result, Scalar, Tensor, TensorError, Var};
use vbquant_core::vbnet::{build_vbnet, compare_plain_block, Model, VbNetConfig};
use vbquant_core::volume::{Geometry, LabelMask, Volume};

use super::{away_from_zero, masks, random_tensor};

pub type Check = std::result::Result<String, String>;

pub const GRAD_SEEDS: u64 = 20;

/// Random conv configuration whose input extent fits the kernel.
pub struct ConvDraw {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dims: [usize; 3],
}

pub fn draw_conv(rng: &mut ChaCha8Rng, max_c: usize, max_d: usize) -> ConvDraw {
    let k: usize = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..k);
    let lo = k.saturating_sub(2 * pad).max(1);
    ConvDraw {
        cin: rng.gen_range(1..=max_c),
        cout: rng.gen_range(1..=max_c),
        k,
        stride,
        pad,
        dims: std::array::from_fn(|_| rng.gen_range(lo..=max_d)),
    }
}

/// `<A x, y> = <x, Aᵀ y>` for `draws` valid random shapes.
pub fn adjointness(draws: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut done, mut worst) = (0, 0.0f64);
    while done < draws {
        let d = draw_conv(&mut rng, 4, 5);
        // choose output extent, derive an input extent both ops agree on
        let out: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=5));
        let full = out.map(|o| (o - 1) * d.stride + d.k);
        if full.iter().any(|&n| n <= 2 * d.pad) {
            continue;
        }
        let dims = full.map(|n| n - 2 * d.pad);
        let x = random_tensor(&mut rng, &[d.cin, dims[0], dims[1], dims[2]], -1.0, 1.0);
        let w = random_tensor(&mut rng, &[d.cout, d.cin, d.k, d.k, d.k], -1.0, 1.0);
        let y = random_tensor(&mut rng, &[d.cout, out[0], out[1], out[2]], -1.0, 1.0);
        let p = ConvParams::new(d.stride, d.pad);
        let ax = kernels::conv3d(&x, &w, None, p).map_err(|e| e.to_string())?;
        let aty = kernels::conv3d_transpose(&y, &w, None, p).map_err(|e| e.to_string())?;
        if aty.shape() != x.shape() {
            return Err(format!("draw {done}: transpose shape {:?} vs {:?}", aty.shape(), x.shape()));
        }
        let (lhs, rhs) = (ax.dot(&y), x.dot(&aty));
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
        worst = worst.max(rel);
        if rel > 1e-10 {
            return Err(format!("draw {done}: {lhs} vs {rhs} (rel {rel:.2e})"));
        }
        done += 1;
    }
    Ok(format!("{draws} draws, max rel {worst:.1e}"))
}

/// Reduce an op's output to a scalar with fixed random weights.
pub fn projected<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::<f64>::uniform(&shape, -1.0, 1.0, &mut rng).cast();
    g.project(out, w)
}

/// Precision-erased view of a graph so one closure can build both.
pub trait OpGraph {
    fn conv3d(&mut self, x: Var, k: Var, b: Option<Var>, p: ConvParams) -> Result<Var>;
    fn conv3d_transpose(&mut self, x: Var, k: Var, b: Option<Var>, p: ConvParams) -> Result<Var>;
    fn prelu(&mut self, x: Var, s: Var) -> Result<Var>;
    fn sigmoid(&mut self, x: Var) -> Var;
    fn add(&mut self, a: Var, b: Var) -> Result<Var>;
    fn concat(&mut self, parts: &[Var]) -> Result<Var>;
    fn soft_dice_loss(&mut self, p: Var, t: Var, smooth: f64) -> Result<Var>;
    fn constant(&mut self, t: &Tensor<f64>) -> Var;
    /// Project non-scalar outputs to a scalar.
    fn finish(&mut self, out: Var, seed: u64) -> Result<Var>;
}

impl<T: Scalar> OpGraph for Graph<T> {
    fn conv3d(&mut self, x: Var, k: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        Graph::conv3d(self, x, k, b, p)
    }
    fn conv3d_transpose(&mut self, x: Var, k: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        Graph::conv3d_transpose(self, x, k, b, p)
    }
    fn prelu(&mut self, x: Var, s: Var) -> Result<Var> {
        Graph::prelu(self, x, s)
    }
    fn sigmoid(&mut self, x: Var) -> Var {
        Graph::sigmoid(self, x)
    }
    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Graph::add(self, a, b)
    }
    fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        Graph::concat(self, parts)
    }
    fn soft_dice_loss(&mut self, p: Var, t: Var, smooth: f64) -> Result<Var> {
        Graph::soft_dice_loss(self, p, t, T::lit(smooth))
    }
    fn constant(&mut self, t: &Tensor<f64>) -> Var {
        self.leaf(t.cast(), false)
    }
    fn finish(&mut self, out: Var, seed: u64) -> Result<Var> {
        if self.value(out).len() == 1 {
            Ok(out)
        } else {
            projected(self, out, seed)
        }
    }
}

/// Worst `(f64, f32)` relative errors of one op over [`GRAD_SEEDS`] seeds.
pub fn check_op<B, I>(name: &str, inputs: I, build: B) -> std::result::Result<(f64, f64), String>
where
    I: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    B: Fn(&mut dyn OpGraph, &[Var]) -> Result<Var>,
{
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let ins = inputs(&mut rng);
        let r64 = grad_check(|g, v| build(g, v).and_then(|o| g.finish(o, seed)), &ins, 1e-5)
            .map_err(|e| format!("{name}: {e}"))?;
        if !(r64.max_rel_error < 1e-6) {
            return Err(format!("{name} f64 seed {seed}: {r64:?}"));
        }
        let r32 = grad_check_mixed(
            |g, v| build(g, v).and_then(|o| g.finish(o, seed)),
            |g, v| build(g, v).and_then(|o| g.finish(o, seed)),
            &ins,
            1e-3,
        )
        .map_err(|e| format!("{name}: {e}"))?;
        if !(r32.max_rel_error < 1e-4) {
            return Err(format!("{name} f32 seed {seed}: {r32:?}"));
        }
        w64 = w64.max(r64.max_rel_error);
        w32 = w32.max(r32.max_rel_error);
    }
    Ok((w64, w32))
}

pub fn grad_conv3d() -> std::result::Result<(f64, f64), String> {
    let mut worst = (0.0f64, 0.0f64);
    for (stride, pad, k) in [(1, 1, 3), (2, 0, 2), (1, 0, 1)] {
        let r = check_op(
            "conv3d",
            |rng| {
                vec![
                    random_tensor(rng, &[2, 4, 4, 4], -1.0, 1.0),
                    random_tensor(rng, &[3, 2, k, k, k], -1.0, 1.0),
                    random_tensor(rng, &[3], -1.0, 1.0),
                ]
            },
            |g, v| g.conv3d(v[0], v[1], Some(v[2]), ConvParams::new(stride, pad)),
        )?;
        worst = (worst.0.max(r.0), worst.1.max(r.1));
    }
    Ok(worst)
}

pub fn grad_conv3d_transpose() -> std::result::Result<(f64, f64), String> {
    check_op(
        "conv3d_transpose",
        |rng| {
            vec![
                random_tensor(rng, &[3, 2, 3, 2], -1.0, 1.0),
                random_tensor(rng, &[3, 2, 2, 2, 2], -1.0, 1.0),
                random_tensor(rng, &[2], -1.0, 1.0),
            ]
        },
        |g, v| g.conv3d_transpose(v[0], v[1], Some(v[2]), ConvParams::new(2, 0)),
    )
}

pub fn grad_prelu() -> std::result::Result<(f64, f64), String> {
    check_op(
        "prelu",
        |rng| vec![away_from_zero(rng, &[3, 3, 3, 3], 0.05), random_tensor(rng, &[3], -0.5, 0.5)],
        |g, v| g.prelu(v[0], v[1]),
    )
}

pub fn grad_sigmoid() -> std::result::Result<(f64, f64), String> {
    check_op(
        "sigmoid",
        |rng| vec![random_tensor(rng, &[2, 3, 3, 3], -4.0, 4.0)],
        |g, v| Ok(g.sigmoid(v[0])),
    )
}

pub fn grad_add() -> std::result::Result<(f64, f64), String> {
    check_op(
        "add",
        |rng| vec![random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0), random_tensor(rng, &[2, 3, 3, 3], -1.0, 1.0)],
        |g, v| g.add(v[0], v[1]),
    )
}

pub fn grad_concat() -> std::result::Result<(f64, f64), String> {
    check_op(
        "concat",
        |rng| vec![random_tensor(rng, &[1, 3, 2, 2], -1.0, 1.0), random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0)],
        |g, v| g.concat(&[v[0], v[1]]),
    )
}

pub fn grad_soft_dice() -> std::result::Result<(f64, f64), String> {
    check_op(
        "soft_dice_loss",
        |rng| vec![random_tensor(rng, &[1, 3, 3, 3], 0.05, 0.95)],
        |g, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let t = random_tensor(&mut rng, &[1, 3, 3, 3], 0.0, 1.0).map(|x| (x > 0.5) as u8 as f64);
            let t = g.constant(&t);
            g.soft_dice_loss(v[0], t, 1.0)
        },
    )
}

pub fn toy_vbnet() -> VbNetConfig {
    VbNetConfig {
        levels: 2,
        channels_per_level: vec![2, 4],
        blocks_per_level: vec![1, 1],
        bottleneck_ratio: 2,
        ..VbNetConfig::default()
    }
}

pub fn network_loss<T: Scalar>(
    model: &Model,
    target: &Tensor<f64>,
    g: &mut Graph<T>,
    vars: &[Var],
    names: &[String],
) -> std::result::Result<Var, TensorError> {
    // vars: input, then params in `names` order
    let params: BTreeMap<String, Var> = names.iter().cloned().zip(vars[1..].iter().copied()).collect();
    let y = model
        .forward_graph(g, &params, vars[0])
        .map_err(|e| TensorError::InvalidArgument { op: "forward", detail: e.to_string() })?;
    let t = g.leaf(target.cast(), false);
    g.soft_dice_loss(y, t, T::one())
}

pub fn perturbed_model(seed: u64) -> Model {
    // nonzero biases so that every parameter receives gradient
    let mut m = build_vbnet(&toy_vbnet(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in m.params_mut().values_mut() {
        let noise = Tensor::<f32>::uniform(t.shape(), -0.2, 0.2, &mut rng);
        t.add_assign(&noise);
    }
    m
}

pub fn model_inputs(m: &Model, seed: u64) -> (Vec<Tensor<f64>>, Tensor<f64>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[1, 4, 4, 4], 0.0, 1.0);
    let t = random_tensor(&mut rng, &[1, 4, 4, 4], 0.0, 1.0).map(|v| if v > 0.6 { 1.0 } else { 0.0 });
    let names: Vec<String> = m.params().keys().cloned().collect();
    let mut inputs = vec![x];
    inputs.extend(m.params().values().map(|p| p.cast::<f64>()));
    (inputs, t, names)
}

/// Full 2-level network, `(f64, f32)` worst errors over [`GRAD_SEEDS`] seeds.
pub fn network_gradients() -> std::result::Result<(f64, f64), String> {
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for seed in 0..GRAD_SEEDS {
        let m = perturbed_model(seed);
        let (inputs, t, names) = model_inputs(&m, seed);
        let r = grad_check(|g, v| network_loss(&m, &t, g, v, &names), &inputs, 2e-5).map_err(|e| e.to_string())?;
        if !(r.max_rel_error < 1e-6) {
            return Err(format!("network f64 seed {seed}: {r:?}"));
        }
        let r32 = grad_check_mixed(
            |g, v| network_loss(&m, &t, g, v, &names),
            |g, v| network_loss(&m, &t, g, v, &names),
            &inputs,
            1e-6,
        )
        .map_err(|e| e.to_string())?;
        if !(r32.max_rel_error < 1e-4) {
            return Err(format!("network f32 seed {seed}: {r32:?}"));
        }
        w64 = w64.max(r.max_rel_error);
        w32 = w32.max(r32.max_rel_error);
    }
    Ok((w64, w32))
}

/// Every op plus the network.
pub fn all_gradients() -> Check {
    let ops: [(&str, fn() -> std::result::Result<(f64, f64), String>); 8] = [
        ("conv3d", grad_conv3d),
        ("conv3d_transpose", grad_conv3d_transpose),
        ("prelu", grad_prelu),
        ("sigmoid", grad_sigmoid),
        ("add", grad_add),
        ("concat", grad_concat),
        ("soft_dice", grad_soft_dice),
        ("vbnet", network_gradients),
    ];
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    for (_, f) in ops {
        let (a, b) = f()?;
        w64 = w64.max(a);
        w32 = w32.max(b);
    }
    Ok(format!("{} checks x {GRAD_SEEDS} seeds, max rel f64 {w64:.1e}, f32 {w32:.1e}", ops.len()))
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(density)).collect()
}

/// Library metrics against the brute-force counters on random mask pairs.
pub fn metric_oracles(pairs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let edges: Vec<f32> = (-10..=4).map(|i| i as f32 * 100.0).collect();
    for case in 0..pairs {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=32));
        // scanner spacings are short decimals; the oracle uses them as typed
        let sp: [f64; 3] = std::array::from_fn(|_| [0.5, 0.625, 0.7, 0.8, 1.0, 1.25, 1.5, 2.0][rng.gen_range(0..8)]);
        let g = Geometry::new(dims, sp.map(|s| s as f32), [0.0; 3]).map_err(|e| e.to_string())?;
        let n = g.voxel_count();
        let (da, db, dr) = (rng.gen_range(0.0..0.6), rng.gen_range(0.0..0.6), rng.gen_range(0.05..1.0));
        let a = random_mask(&mut rng, n, da);
        let b = random_mask(&mut rng, n, db);
        let r = random_mask(&mut rng, n, dr);
        let hu: Vec<f32> = (0..n).map(|_| rng.gen_range(-1100.0f32..600.0).round()).collect();
        let ma = LabelMask::binary(g.clone(), &a, "a").map_err(|e| e.to_string())?;
        let mb = LabelMask::binary(g.clone(), &b, "b").map_err(|e| e.to_string())?;
        let mr = LabelMask::binary(g.clone(), &r, "r").map_err(|e| e.to_string())?;
        let vol = Volume::new(g.clone(), hu.clone()).map_err(|e| e.to_string())?;

        let d = dice(&ma, &mb).map_err(|e| e.to_string())?;
        if d != masks::dice(&a, &b) {
            return Err(format!("pair {case}: dice {d} vs {}", masks::dice(&a, &b)));
        }
        match (poi(&ma, &mr), masks::poi(&a, &r)) {
            (Ok(p), Some(q)) if p == q => {}
            (Err(_), None) => {}
            (p, q) => return Err(format!("pair {case}: poi {p:?} vs {q:?}")),
        }
        let (v, w) = (infection_volume(&ma), masks::volume_cm3(&a, sp));
        if (v - w).abs() > 1e-12 * w.abs().max(1.0) {
            return Err(format!("pair {case}: volume {v} vs {w}"));
        }
        let h = hu_histogram(&vol, &mb, &edges).map_err(|e| e.to_string())?;
        let (counts, under, over) = masks::histogram(&hu, &b, &edges);
        if h.counts != counts || h.underflow != under || h.overflow != over {
            return Err(format!("pair {case}: histogram mismatch"));
        }
    }
    Ok(format!("{pairs} random pairs up to 32^3"))
}

pub fn pearson_exactness(seed: u64) -> Check {
    let close = |a: f64, b: f64, what: &str| {
        if (a - b).abs() <= 1e-12 {
            Ok(())
        } else {
            Err(format!("{what}: {a} vs {b}"))
        }
    };
    let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 10.0 + i as f64).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    close(pearson(&x, &x).map_err(|e| e.to_string())?, 1.0, "y=x")?;
    close(pearson(&x, &neg).map_err(|e| e.to_string())?, -1.0, "y=-x")?;
    close(
        pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).map_err(|e| e.to_string())?,
        9.0 / 84f64.sqrt(),
        "[1,2,3] vs [1,2,4]",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.gen_range(3..60);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
        let (a, b, c, d) = (
            rng.gen_range(0.1..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            rng.gen_range(-50.0..50.0),
            rng.gen_range(0.1..10.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            rng.gen_range(-50.0..50.0),
        );
        let xs: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let ys: Vec<f64> = y.iter().map(|v| c * v + d).collect();
        let r = pearson(&x, &y).map_err(|e| e.to_string())?;
        let rs = pearson(&xs, &ys).map_err(|e| e.to_string())?;
        let err = (rs - (a * c).signum() * r).abs();
        worst = worst.max(err);
        if err > 1e-10 {
            return Err(format!("affine case {case}: {rs} vs {r}"));
        }
    }
    Ok(format!("exact cases within 1e-12, 100 affine cases max err {worst:.1e}"))
}

/// Exact block counts at C=64 with 16 reduced channels, then the ratio sweep
/// over C >= 8 and reduction ratio C/R >= 2.
pub fn bottleneck_reduction() -> Check {
    let (b, p) = compare_plain_block(64, 16).map_err(|e| e.to_string())?;
    if (b, p) != (8960, 110_592) {
        return Err(format!("C=64, R=16: {b} vs {p}, expected 8960 vs 110592"));
    }
    let mut failures = Vec::new();
    for c in [8usize, 16, 32, 64, 128, 256] {
        for r in [2usize, 4, 8, 16] {
            if r > c {
                continue;
            }
            let (b, p) = compare_plain_block(c, c / r).map_err(|e| e.to_string())?;
            if p < 5 * b {
                failures.push(format!("C={c} C/R={r}: {p}/{b} = {:.2}", p as f64 / b as f64));
            }
        }
    }
    let head = format!("C=64 R=16: {b} vs {p} (ratio {:.2})", p as f64 / b as f64);
    if failures.is_empty() {
        Ok(head)
    } else {
        Err(format!("{head}; ratio < 5 at {}", failures.join(", ")))
    }
}

/// POI sums over lobes and segments equal the lung counts on every phantom,
/// and planted GGO/consolidation shares come back from the HU split.
pub fn poi_identity_and_fractions(n: usize, seed: u64) -> Check {
    let cohort = gen_cohort(n, &CohortSpec::default(), seed).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for case in &cohort {
        let p = &case.phantom;
        let b = poi_breakdown(&p.infection, &p.regions).map_err(|e| e.to_string())?;
        let sum = |v: &[vbquant_core::quantify::RegionPoi]| {
            (v.iter().map(|r| r.infected_voxels).sum::<usize>(), v.iter().map(|r| r.region_voxels).sum::<usize>())
        };
        let lung = (b.lung.infected_voxels, b.lung.region_voxels);
        if sum(&b.lobes) != lung || sum(&b.segments) != lung {
            return Err(format!("{}: lung {lung:?}, lobes {:?}, segments {:?}", case.id, sum(&b.lobes), sum(&b.segments)));
        }
        let inf = p.infection.foreground_count();
        if inf == 0 {
            continue;
        }
        let (g, c) = p.class_counts();
        let split = ggo_consolidation_split(&p.volume, &p.infection, HuRange::DEFAULT_GGO, HuRange::DEFAULT_CONSOLIDATION)
            .map_err(|e| e.to_string())?;
        let planted_g = 100.0 * g as f64 / inf as f64;
        let planted_c = 100.0 * c as f64 / inf as f64;
        let err = (split.ggo_percent() - planted_g).abs().max((split.consolidation_percent() - planted_c).abs());
        worst = worst.max(err);
        if err > 2.0 {
            return Err(format!(
                "{}: GGO {:.2}% vs planted {planted_g:.2}%, consolidation {:.2}% vs {planted_c:.2}%",
                case.id,
                split.ggo_percent(),
                split.consolidation_percent()
            ));
        }
    }
    Ok(format!("{n} phantoms, worst fraction error {worst:.2} points"))
}
