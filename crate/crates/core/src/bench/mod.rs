//! Analytic FLOP and activation-memory models, wall-clock sweeps and PCA
//! visualization of patch features.
//!
//! # FLOP model
//!
//! Two flops per multiply-add; one per exp, divide, sqrt or other elementwise
//! operation. Notation: `N` tokens, width `D`, `H` heads, `d = D/H`, feature
//! map cost `c` (1 for elu+1, relu and exp, 2 for softplus). Every count
//! covers a single forward pass of one sequence and mirrors the kernel ops
//! one for one, so it equals the instrumented counter exactly.
//!
//! | variant | core | extras |
//! |---|---|---|
//! | shared projections | `8·N·D²` | |
//! | softmax | `4·N²·D + 3·N²·H` | `N·D` (query scaling) |
//! | vanilla linear | `4·N·d²·H + 6·N·d·H + 2c·N·D` | `N·H` (denominator ε) |
//! | hedgehog | `12·N·d²·H + 24·N·d·H` | `N·H` |
//! | performer (r features) | `8·N·d·r·H + 10·N·r·H + 5·N·d·H` | `3·N·H + 2·N·D` |
//! | cosformer | `8·N·d²·H + 16·N·d·H` | `2·N·H + N·D` |
//! | linformer (rank k) | `8·N·k·D + 3·N·k·H` | `N·D` |
//! | nyström (m landmarks, t iterations) | `8·N·m·d·H + 6·N·m·H + 4·m·N·D` | `(4·m²·d + (6 + 4t)·m² + 8t·m³)·H + N·D` |
//!
//! In the linear rows the `6·N·d·H` term of vanilla linear is query scaling,
//! normalizer and denominator (`N·d` + `4·N·d` + `N·d` per head). Hedgehog's
//! feature dimension is `2d` and each of its two maps costs `2·N·d² + 7·N·d`.
//! Performer features cost `2·N·d·r + 2·N·d + N + 3·N·r` per side.
//!
//! # Memory model
//!
//! Peak bytes are an analytic liveness model at 4 bytes per value, split into
//! a `state` term (what carries information across the sequence) and the
//! `operands` live beside it:
//!
//! | variant | state | operands |
//! |---|---|---|
//! | softmax | `N²·H` scores | `3·N·D` for Q, K, V |
//! | reordered linear (feature dim f) | `f·d·H` | `2·N·f·H + N·D` for φ(Q), φ(K), V |
//! | cosformer | `2·d²·H` | `4·N·d·H + N·D` |
//! | linformer | `2·k·D` projected K, V | `N·k·H + N·D` |
//! | nyström | `(m² + m·d)·H` | `2·N·m·H + 3·N·D` |

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::attention::{attend, AttentionParams, AttentionSpec, Variant};
use crate::error::{Error, Result};
use crate::tensor::{Activation, Element, Rng, Tensor};

mod pca;

pub use pca::{pca_rgb, top_components, PcaImage};

/// FLOP count of one attention forward pass, split by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub projections: u64,
    pub core: u64,
    pub extras: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.projections + self.core + self.extras
    }
}

/// Feature-map cost constant applied to both queries and keys.
pub fn feature_map_cost(map: Activation) -> u64 {
    2 * map.cost()
}

/// Analytic FLOPs of `spec` on an `N`-token sequence.
pub fn flops_attention(spec: &AttentionSpec, n: usize) -> FlopBreakdown {
    let (n, dm, h) = (n as u64, spec.d_model as u64, spec.heads as u64);
    let d = dm / h;
    let projections = 8 * n * dm * dm;
    let (core, extras) = match spec.variant {
        Variant::Softmax => (softmax_core(n, dm, h), n * dm),
        Variant::VanillaLinear => (
            vanilla_core(n, dm, h, feature_map_cost(spec.feature_map)),
            n * h,
        ),
        Variant::Hedgehog => (12 * n * d * d * h + 24 * n * d * h, n * h),
        Variant::Performer => {
            let r = spec.rand_features as u64;
            (8 * n * d * r * h + 10 * n * r * h + 5 * n * d * h, 3 * n * h + 2 * n * dm)
        }
        Variant::Cosformer => (8 * n * d * d * h + 16 * n * d * h, 2 * n * h + n * dm),
        Variant::Linformer => {
            let k = spec.proj_rank as u64;
            (8 * n * k * dm + 3 * n * k * h, n * dm)
        }
        Variant::Nystrom => {
            let m = spec.landmarks.min(n as usize) as u64;
            let t = spec.pinv_iters as u64;
            (
                8 * n * m * d * h + 6 * n * m * h + 4 * m * n * dm,
                (4 * m * m * d + (6 + 4 * t) * m * m + 8 * t * m * m * m) * h + n * dm,
            )
        }
    };
    FlopBreakdown {
        projections,
        core,
        extras,
    }
}

/// `4·N²·D + 3·N²·H`.
pub fn softmax_core(n: u64, d_model: u64, heads: u64) -> u64 {
    4 * n * n * d_model + 3 * n * n * heads
}

/// `4·N·d²·H + 6·N·d·H + c·N·D`.
pub fn vanilla_core(n: u64, d_model: u64, heads: u64, map_cost: u64) -> u64 {
    let d = d_model / heads;
    4 * n * d * d * heads + 6 * n * d * heads + map_cost * n * d_model
}

/// Analytic activation bytes, split into the cross-sequence state and the
/// operands live alongside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PeakBytes {
    pub state: u64,
    pub operands: u64,
}

impl PeakBytes {
    pub fn total(&self) -> u64 {
        self.state + self.operands
    }
}

const VALUE_BYTES: u64 = 4;

pub fn peak_activation_bytes(spec: &AttentionSpec, n: usize) -> PeakBytes {
    let (n, dm, h) = (n as u64, spec.d_model as u64, spec.heads as u64);
    let d = dm / h;
    let reordered = |f: u64| (f * d * h, 2 * n * f * h + n * dm);
    let (state, operands) = match spec.variant {
        Variant::Softmax => (n * n * h, 3 * n * dm),
        Variant::VanillaLinear => reordered(d),
        Variant::Hedgehog => reordered(2 * d),
        Variant::Performer => reordered(spec.rand_features as u64),
        Variant::Cosformer => (2 * d * d * h, 4 * n * d * h + n * dm),
        Variant::Linformer => {
            let k = spec.proj_rank as u64;
            (2 * k * dm, n * k * h + n * dm)
        }
        Variant::Nystrom => {
            let m = spec.landmarks as u64;
            ((m * m + m * d) * h, 2 * n * m * h + 3 * n * dm)
        }
    };
    PeakBytes {
        state: VALUE_BYTES * state,
        operands: VALUE_BYTES * operands,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crossover {
    SoftmaxCheaper,
    LinearCheaper,
}

impl std::fmt::Display for Crossover {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Crossover::SoftmaxCheaper => "softmax_cheaper",
            Crossover::LinearCheaper => "linear_cheaper",
        })
    }
}

/// Compare softmax and elu+1 linear attention cores. Projections are shared
/// and excluded; a tie goes to linear.
pub fn crossover_check(n: usize, d_model: usize, heads: usize) -> Result<Crossover> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Param(format!("{heads} heads cannot split width {d_model}")));
    }
    let (n, dm, h) = (n as u64, d_model as u64, heads as u64);
    let soft = softmax_core(n, dm, h);
    let lin = vanilla_core(n, dm, h, feature_map_cost(Activation::EluPlusOne));
    Ok(if soft < lin {
        Crossover::SoftmaxCheaper
    } else {
        Crossover::LinearCheaper
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub variant: Variant,
    pub n: usize,
    pub d_model: usize,
    pub heads: usize,
    pub flops: u64,
    pub peak_bytes: u64,
    pub wall_seconds: f64,
    /// Sequences per second at batch 1.
    pub throughput: f64,
}

pub const WARMUP_REPS: usize = 2;
pub const MIN_REPS: usize = 5;
/// Timed batches shorter than this are repeated more times per sample.
pub const MIN_TIMED_SECONDS: f64 = 1e-6;

/// Spec adjusted so `variant` runs on `n` tokens.
pub fn spec_for_length(base: &AttentionSpec, n: usize) -> AttentionSpec {
    let mut s = base.clone();
    s.seq_len_fixed = n;
    s.landmarks = s.landmarks.min(n);
    s
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

/// Median seconds per call of `f` over `reps` samples after warmup.
///
/// Calls faster than the timer can resolve are grouped: the group size
/// doubles until one group takes at least [`MIN_TIMED_SECONDS`].
pub fn time_median(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUP_REPS {
        f()?;
    }
    let mut inner = 1usize;
    loop {
        let t0 = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        if t0.elapsed().as_secs_f64() >= MIN_TIMED_SECONDS || inner >= 1 << 20 {
            break;
        }
        inner *= 2;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps.max(MIN_REPS) {
        let t0 = Instant::now();
        for _ in 0..inner {
            f()?;
        }
        samples.push(t0.elapsed().as_secs_f64() / inner as f64);
    }
    Ok(median(&mut samples))
}

/// Time the attention kernel of `base` at each length in `ns` (ascending).
pub fn sweep(base: &AttentionSpec, ns: &[usize], reps: usize, seed: u64) -> Result<Vec<BenchRecord>> {
    if ns.is_empty() || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Param("sweep lengths must be non-empty and strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(ns.len());
    for &n in ns {
        let spec = spec_for_length(base, n);
        let mut rng = Rng::new(seed).fork(n as u64);
        let params = AttentionParams::<f32>::init(&spec, &mut rng)?;
        let x = Tensor::<f32>::from_fn(&[n, spec.d_model], |_| rng.normal() as f32);
        let wall = time_median(reps, || attend(&x, &params, &spec).map(|_| ()))?;
        log::info!("bench {} N={n} {:.3e}s", spec.variant, wall);
        out.push(BenchRecord {
            variant: spec.variant,
            n,
            d_model: spec.d_model,
            heads: spec.heads,
            flops: flops_attention(&spec, n).total(),
            peak_bytes: peak_activation_bytes(&spec, n).total(),
            wall_seconds: wall,
            throughput: 1.0 / wall,
        });
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "variant,N,D,H,flops,peak_bytes,wall_seconds,throughput";

pub fn records_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from("# batch=1; attention module only; default heads H=D/64\n");
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.9e},{:.6e}",
            r.variant, r.n, r.d_model, r.heads, r.flops, r.peak_bytes, r.wall_seconds, r.throughput
        );
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Flops,
    PeakBytes,
    WallSeconds,
    Throughput,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Flops, Metric::PeakBytes, Metric::WallSeconds, Metric::Throughput];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Flops => "flops",
            Metric::PeakBytes => "peak_bytes",
            Metric::WallSeconds => "wall_seconds",
            Metric::Throughput => "throughput",
        }
    }

    fn of(self, r: &BenchRecord) -> f64 {
        match self {
            Metric::Flops => r.flops as f64,
            Metric::PeakBytes => r.peak_bytes as f64,
            Metric::WallSeconds => r.wall_seconds,
            Metric::Throughput => r.throughput,
        }
    }
}

/// Write a log-log line chart of `metric` against N, one line per variant.
pub fn write_svg(records: &[BenchRecord], metric: Metric, path: &Path) -> Result<()> {
    use plotters::prelude::*;

    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.n as f64, metric.of(r))).collect();
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0 || !y.is_finite()) || points.is_empty() {
        return Err(Error::Param(format!("{} needs positive values for a log-log chart", metric.name())));
    }
    let bounds = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(0.0, f64::max);
        (lo / 1.5)..(hi * 1.5)
    };
    let plot_err = |e: &dyn std::fmt::Display| Error::Format {
        path: path.to_path_buf(),
        reason: format!("chart rendering failed: {e}"),
    };
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} vs sequence length", metric.name()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(72)
        .build_cartesian_2d(bounds(|p| p.0).log_scale(), bounds(|p| p.1).log_scale())
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("N")
        .y_desc(metric.name())
        .draw()
        .map_err(|e| plot_err(&e))?;
    let mut variants: Vec<Variant> = records.iter().map(|r| r.variant).collect();
    variants.dedup();
    for (i, v) in variants.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.variant == *v)
            .map(|r| (r.n as f64, metric.of(r)))
            .collect();
        chart
            .draw_series(LineSeries::new(series, color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(v.name())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))
}

/// Instrumented FLOPs of one forward pass of `spec` on `n` random tokens.
pub fn measured_flops<E: Element>(spec: &AttentionSpec, n: usize, seed: u64) -> Result<u64> {
    let spec = spec_for_length(spec, n);
    let mut rng = Rng::new(seed);
    let params = AttentionParams::<E>::init(&spec, &mut rng)?;
    let x = Tensor::<E>::from_fn(&[n, spec.d_model], |_| E::lit(rng.normal()));
    let (out, count) = crate::tensor::flops::count(|| attend(&x, &params, &spec));
    out?;
    Ok(count)
}
