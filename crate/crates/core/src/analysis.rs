//! Qualitative analyses: aggregation-weight maps and effective receptive fields.
//!
//! Both produce a [`HeatMap`], written as a min-max normalized binary PGM next
//! to a CSV of the raw values.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::write_pnm;
use crate::error::{config_err, ensure_config, Result};
use crate::lsconv::WeightMap;
use crate::model::{LsConvSite, Model};
use crate::nn::{Ctx, Layer};
use crate::ops::NormMode;
use crate::params::ParamStore;
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

/// Single-channel map of raw values.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl HeatMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        ensure_config!(
            values.len() == height * width,
            "heat map needs {height}x{width} values, got {}",
            values.len()
        );
        Ok(HeatMap { height, width, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.width + j]
    }

    pub fn min(&self) -> f32 {
        self.values.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum()
    }

    /// Min-max scaled to `0..=255`; a constant map becomes all zeros.
    pub fn normalized(&self) -> Vec<u8> {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        self.values
            .iter()
            .map(|&v| {
                if span > 0.0 {
                    ((v - lo) / span * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect()
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn upsample_nearest(&self, height: usize, width: usize) -> HeatMap {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            let si = i * self.height / height;
            for j in 0..width {
                values.push(self.at(si, j * self.width / width));
            }
        }
        HeatMap { height, width, values }
    }

    /// Pixels strictly above `fraction · max`.
    pub fn support(&self, fraction: f32) -> Vec<bool> {
        let cut = fraction * self.max();
        self.values.iter().map(|&v| v > cut).collect()
    }

    pub fn support_count(&self, fraction: f32) -> usize {
        self.support(fraction).iter().filter(|&&b| b).count()
    }

    pub fn to_csv(&self, header: &[String]) -> String {
        let mut out = String::new();
        for h in header {
            let _ = writeln!(out, "# {h}");
        }
        let _ = writeln!(
            out,
            "# height {} width {} min {} max {}",
            self.height,
            self.width,
            self.min(),
            self.max()
        );
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    pub fn write_pgm(&self, path: &Path, header: &[String]) -> Result<()> {
        let mut comments = header.to_vec();
        comments.push(format!("normalization min {} max {}", self.min(), self.max()));
        write_pnm(path, 1, self.height, self.width, &self.normalized(), &comments)
    }

    pub fn write_csv(&self, path: &Path, header: &[String]) -> Result<()> {
        fs::write(path, self.to_csv(header))?;
        Ok(())
    }
}

/// Parses the CSV written by [`HeatMap::to_csv`].
pub fn read_heatmap_csv(text: &str) -> Result<HeatMap> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f32>()
                    .map_err(|e| crate::error::Error::Format(format!("heat map CSV: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let width = rows.first().map_or(0, Vec::len);
    ensure_config!(
        rows.iter().all(|r| r.len() == width),
        "heat map CSV rows differ in length"
    );
    HeatMap::new(rows.len(), width, rows.concat())
}

/// Accumulated |aggregation weight| each token receives from sample `n`,
/// summed over taps and averaged over groups, at feature resolution.
pub fn aggregation_heatmap<T: Scalar>(w: &WeightMap<T>, n: usize) -> HeatMap {
    let t = w.tensor();
    let (h, wd) = (t.h(), t.w());
    let (g_count, k) = (w.groups(), w.small_kernel());
    let p = (k / 2) as isize;
    let mut acc = vec![0f64; h * wd];
    for g in 0..g_count {
        for u in 0..k {
            for v in 0..k {
                for i in 0..h {
                    let ti = i as isize + u as isize - p;
                    if ti < 0 || ti >= h as isize {
                        continue;
                    }
                    for j in 0..wd {
                        let tj = j as isize + v as isize - p;
                        if tj < 0 || tj >= wd as isize {
                            continue;
                        }
                        acc[ti as usize * wd + tj as usize] += w.at(n, g, u, v, i, j).as_f64().abs();
                    }
                }
            }
        }
    }
    let values = acc.iter().map(|&a| (a / g_count as f64) as f32).collect();
    HeatMap {
        height: h,
        width: wd,
        values,
    }
}

/// Total |w| over in-bounds taps of sample `n`, averaged over groups.
pub fn aggregation_mass<T: Scalar>(w: &WeightMap<T>, n: usize) -> f64 {
    let t = w.tensor();
    let (h, wd, k) = (t.h(), t.w(), w.small_kernel());
    let p = (k / 2) as isize;
    let inside = |c: usize, off: usize, len: usize| {
        let x = c as isize + off as isize - p;
        x >= 0 && x < len as isize
    };
    let mut total = 0.0;
    for g in 0..w.groups() {
        for u in 0..k {
            for v in 0..k {
                for i in (0..h).filter(|&i| inside(i, u, h)) {
                    for j in (0..wd).filter(|&j| inside(j, v, wd)) {
                        total += w.at(n, g, u, v, i, j).as_f64().abs();
                    }
                }
            }
        }
    }
    total / w.groups() as f64
}

#[derive(Clone, Debug)]
pub struct AggregationDump {
    pub site: LsConvSite,
    /// At the LS conv's own resolution.
    pub feature: HeatMap,
    /// Nearest-upsampled to the input image.
    pub upsampled: HeatMap,
    pub mass: f64,
}

/// Runs one image through `model` and maps the aggregation weights of the
/// `layer`-th LS conv (0-based) of `stage` (1-based).
pub fn dump_aggregation_weights<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    image: &Tensor<T>,
    stage: usize,
    layer: usize,
) -> Result<AggregationDump> {
    ensure_config!(
        image.n() == 1,
        "aggregation maps take a single image, got {}",
        image.n()
    );
    model.check_images(image)?;
    let sites = model.ls_conv_sites();
    let site = sites
        .iter()
        .find(|s| s.stage == stage && s.layer == layer)
        .cloned()
        .ok_or_else(|| {
            let have: Vec<String> = sites.iter().map(|s| format!("{}:{}", s.stage, s.layer)).collect();
            config_err!(
                "no LS conv at stage {stage} layer {layer} (available: {})",
                have.join(", ")
            )
        })?;
    let mut tape = GradTape::new();
    let mut ctx = Ctx::new(&mut tape, store, NormMode::Infer);
    let x = ctx.tape.constant(image.clone());
    model.record_until(&mut ctx, x, Some(stage))?;
    let var = ctx.captures()[&site.prefix];
    let w = WeightMap::new(tape.value(var).clone(), site.cfg.groups, site.cfg.small_kernel)?;
    let feature = aggregation_heatmap(&w, 0);
    let upsampled = feature.upsample_nearest(image.h(), image.w());
    Ok(AggregationDump {
        mass: aggregation_mass(&w, 0),
        site,
        feature,
        upsampled,
    })
}

/// Effective receptive field of one output position.
#[derive(Clone, Debug, Serialize)]
pub struct ErfMap {
    pub map: HeatMap,
    pub position: (usize, usize),
    pub feature_hw: (usize, usize),
}

/// Input-gradient magnitude of the channel sum of `f`'s output at `position`
/// (its center by default), averaged over input channels and images.
pub fn erf_map<T, F>(
    store: &ParamStore<T>,
    images: &Tensor<T>,
    position: Option<(usize, usize)>,
    f: F,
) -> Result<ErfMap>
where
    T: Scalar,
    F: FnOnce(&mut Ctx<'_, T>, Var) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let mut ctx = Ctx::new(&mut tape, store, NormMode::Infer);
    let x = ctx.tape.leaf("input", images.clone())?;
    let y = f(&mut ctx, x)?;
    let shape = tape.value(y).shape();
    let [n, c, fh, fw] = shape;
    let (r, col) = position.unwrap_or((fh / 2, fw / 2));
    ensure_config!(
        r < fh && col < fw,
        "position ({r}, {col}) is outside the {fh}x{fw} feature map"
    );
    let mut seed = Tensor::zeros(shape);
    for ni in 0..n {
        for ci in 0..c {
            seed.set(ni, ci, r, col, T::one());
        }
    }
    let grads = tape.backward(y, seed)?;
    let g = grads.get("input")?;
    let [gn, gc, h, w] = g.shape();
    let mut values = vec![0f32; h * w];
    for ni in 0..gn {
        for ci in 0..gc {
            for (acc, &v) in values.iter_mut().zip(g.plane(ni, ci)) {
                *acc += (v.as_f64().abs() / (gn * gc) as f64) as f32;
            }
        }
    }
    Ok(ErfMap {
        map: HeatMap::new(h, w, values)?,
        position: (r, col),
        feature_hw: (fh, fw),
    })
}

/// ERF at the output of `stage` (1-based) of a model.
pub fn erf_model<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    stage: usize,
    position: Option<(usize, usize)>,
) -> Result<ErfMap> {
    ensure_config!((1..=4).contains(&stage), "stage must be 1..=4, got {stage}");
    model.check_images(images)?;
    erf_map(store, images, position, |ctx, x| {
        model.record_until(ctx, x, Some(stage))
    })
}

/// ERF at the output of a single layer.
pub fn erf_layer<T: Scalar, L: Layer>(
    layer: &L,
    prefix: &str,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    position: Option<(usize, usize)>,
) -> Result<ErfMap> {
    erf_map(store, images, position, |ctx, x| layer.record(ctx, prefix, x))
}

/// Support threshold for ERF comparisons, as a fraction of the map maximum.
pub const SUPPORT_FRACTION: f32 = 0.01;

/// Standard-normal probe images for ERF averaging.
pub fn erf_probe_images<T: Scalar>(n: usize, channels: usize, resolution: usize, seed: u64) -> Tensor<T> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    Tensor::randn([n, channels, resolution, resolution], 1.0, &mut rng)
}

/// Support of `outer` against support of `inner` at [`SUPPORT_FRACTION`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SupportComparison {
    pub outer: usize,
    pub inner: usize,
    /// Pixels in the inner support but not the outer one.
    pub inner_outside: usize,
}

impl SupportComparison {
    pub fn new(outer: &HeatMap, inner: &HeatMap) -> Result<Self> {
        ensure_config!(
            (outer.height, outer.width) == (inner.height, inner.width),
            "support comparison needs equal extents"
        );
        let (a, b) = (outer.support(SUPPORT_FRACTION), inner.support(SUPPORT_FRACTION));
        Ok(SupportComparison {
            outer: a.iter().filter(|&&v| v).count(),
            inner: b.iter().filter(|&&v| v).count(),
            inner_outside: a.iter().zip(&b).filter(|&(&o, &i)| i && !o).count(),
        })
    }

    /// Inner support is a proper subset of the outer one.
    pub fn strictly_contains(&self) -> bool {
        self.inner_outside == 0 && self.outer > self.inner
    }
}

/// Writes `{stem}.pgm` and `{stem}.csv` into `dir`.
pub fn write_heatmap(map: &HeatMap, dir: &Path, stem: &str, header: &[String]) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let pgm = dir.join(format!("{stem}.pgm"));
    let csv = dir.join(format!("{stem}.csv"));
    map.write_pgm(&pgm, header)?;
    map.write_csv(&csv, header)?;
    Ok((pgm, csv))
}
