//! Wall-clock micro-benchmarks: median of repeats after warmup.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ensure_config, Result};
use crate::kernels::ska::{ska_forward, ska_forward_naive};
use crate::model::{count_macs, Model, ModelSpec};
use crate::nn::Ctx;
use crate::ops::NormMode;
use crate::tape::GradTape;
use crate::tensor::{Scalar, Tensor};

pub const WARMUP: usize = 3;

/// Seconds per call of `f`, `repeats` samples after [`WARMUP`] discarded calls.
pub fn time_repeats<F: FnMut()>(repeats: usize, mut f: F) -> Vec<f64> {
    for _ in 0..WARMUP {
        f();
    }
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect()
}

/// Middle element, or the mean of the two middle elements.
pub fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.is_empty() {
        f64::NAN
    } else if s.len() % 2 == 1 {
        s[m]
    } else {
        (s[m - 1] + s[m]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub shape: String,
    pub dtype: &'static str,
    pub threads: usize,
    pub repeats: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub macs: u64,
    pub macs_per_s: f64,
    /// Largest absolute deviation from the reference output, where one exists.
    pub max_abs_diff: Option<f64>,
}

impl BenchRow {
    fn new(op: &str, shape: String, dtype: &'static str, threads: usize, samples: &[f64], macs: u64) -> Self {
        let med = median(samples);
        BenchRow {
            op: op.to_string(),
            shape,
            dtype,
            threads,
            repeats: samples.len(),
            median_s: med,
            min_s: samples.iter().copied().fold(f64::INFINITY, f64::min),
            max_s: samples.iter().copied().fold(0.0, f64::max),
            macs,
            macs_per_s: macs as f64 / med,
            max_abs_diff: None,
        }
    }
}

pub const CSV_HEADER: &str = "op,shape,dtype,threads,repeats,median_s,min_s,max_s,macs,macs_per_s,max_abs_diff";

pub fn to_csv(rows: &[BenchRow], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    let _ = writeln!(out, "{CSV_HEADER}");
    for r in rows {
        let diff = r.max_abs_diff.map_or(String::new(), |d| format!("{d:e}"));
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:e},{:e},{:e},{},{:e},{}",
            r.op, r.shape, r.dtype, r.threads, r.repeats, r.median_s, r.min_s, r.max_s, r.macs, r.macs_per_s, diff
        );
    }
    out
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| crate::error::config_err!("thread pool: {e}"))
}

/// SKA problem size: `(N, C, H, W)`, small kernel and group count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkaSize {
    pub shape: [usize; 4],
    pub small_kernel: usize,
    pub groups: usize,
}

impl SkaSize {
    fn label(&self) -> String {
        let [n, c, h, w] = self.shape;
        format!("{n}x{c}x{h}x{w}/k{}/g{}", self.small_kernel, self.groups)
    }
}

/// Optimized and naive SKA on the same random operands; rows in that order.
pub fn bench_ska<T: Scalar>(size: SkaSize, repeats: usize, threads: usize, seed: u64) -> Result<Vec<BenchRow>> {
    ensure_config!(repeats > 0 && threads > 0, "repeats and threads must be positive");
    let SkaSize {
        shape,
        small_kernel: k,
        groups: g,
    } = size;
    let [n, c, h, w] = shape;
    ensure_config!(g > 0 && c % g == 0 && k % 2 == 1, "invalid SKA size {}", size.label());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::randn(shape, 1.0, &mut rng);
    let wm = Tensor::<T>::randn([n, g * k * k, h, w], 1.0, &mut rng);
    let macs = (n * c * h * w * k * k) as u64;
    let reference = ska_forward_naive(&x, &wm, k, g);
    let pool = pool(threads)?;
    let (fast, naive) = pool.install(|| {
        let fast = time_repeats(repeats, || {
            std::hint::black_box(ska_forward(&x, &wm, k, g));
        });
        let naive = time_repeats(repeats, || {
            std::hint::black_box(ska_forward_naive(&x, &wm, k, g));
        });
        (fast, naive)
    });
    let diff = ska_forward(&x, &wm, k, g).max_abs_diff(&reference)?;
    let mut a = BenchRow::new("ska", size.label(), T::DTYPE.name(), threads, &fast, macs);
    a.max_abs_diff = Some(diff.as_f64());
    let mut b = BenchRow::new("ska_naive", size.label(), T::DTYPE.name(), threads, &naive, macs);
    b.max_abs_diff = Some(0.0);
    Ok(vec![a, b])
}

/// Inference forward pass of a whole model on random images.
pub fn bench_model<T: Scalar>(
    spec: &ModelSpec,
    resolution: usize,
    batch: usize,
    repeats: usize,
    threads: usize,
    seed: u64,
) -> Result<BenchRow> {
    ensure_config!(
        repeats > 0 && threads > 0 && batch > 0,
        "repeats, threads and batch must be positive"
    );
    let model = Model::new(spec.clone())?;
    let store = model.init::<T>(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::<T>::randn([batch, spec.in_channels, resolution, resolution], 1.0, &mut rng);
    model.check_images(&x)?;
    let macs = count_macs(spec, resolution, resolution)?.total_macs * batch as u64;
    let pool = pool(threads)?;
    let samples = pool.install(|| {
        time_repeats(repeats, || {
            let mut tape = GradTape::new();
            let mut ctx = Ctx::new(&mut tape, &store, NormMode::Infer);
            let xv = ctx.tape.constant(x.clone());
            std::hint::black_box(model.record_until(&mut ctx, xv, None).expect("validated input"));
        })
    });
    let shape = format!("{batch}x{}x{resolution}x{resolution}", spec.in_channels);
    Ok(BenchRow::new(
        &format!("model:{}", spec.name),
        shape,
        T::DTYPE.name(),
        threads,
        &samples,
        macs,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even_samples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn schema_does_not_depend_on_repeats() {
        let size = SkaSize {
            shape: [1, 8, 6, 6],
            small_kernel: 3,
            groups: 2,
        };
        let one = bench_ska::<f32>(size, 1, 1, 0).unwrap();
        let nine = bench_ska::<f32>(size, 9, 1, 0).unwrap();
        assert_eq!(one.len(), nine.len());
        for (a, b) in one.iter().zip(&nine) {
            assert_eq!(
                (&a.op, &a.shape, a.macs, a.max_abs_diff),
                (&b.op, &b.shape, b.macs, b.max_abs_diff)
            );
            assert_eq!((a.repeats, b.repeats), (1, 9));
        }
        let csv = to_csv(&one, &[]);
        assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
        assert!(csv
            .lines()
            .skip(1)
            .all(|l| l.split(',').count() == CSV_HEADER.split(',').count()));
    }

    #[test]
    fn mac_rate_is_macs_over_median() {
        let spec = ModelSpec::tiny();
        let row = bench_model::<f32>(&spec, 32, 2, 3, 1, 0).unwrap();
        let expect = count_macs(&spec, 32, 32).unwrap().total_macs as f64 * 2.0 / row.median_s;
        assert!((row.macs_per_s - expect).abs() <= 1e-9 * expect);
    }
}
