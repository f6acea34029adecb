use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lsnet::analysis::{dump_aggregation_weights, erf_model, erf_probe_images, write_heatmap, SUPPORT_FRACTION};
use lsnet::bench::{bench_model, bench_ska, to_csv, BenchRow, SkaSize};
use lsnet::data::{blobs10_test, blobs10_train, detect_format, load_dataset, read_pnm, save_raw_dir, Dataset};
use lsnet::gradcheck::{gradcheck_model, GradcheckConfig};
use lsnet::model::{load_weights, save_weights, Model, ModelSpec};
use lsnet::params::ParamStore;
use lsnet::train::{evaluate, fit, Optimizer, TrainConfig};
use lsnet::{Scalar, Tensor};
use serde::Serialize;

use crate::args::*;
use crate::output::{header, prepend_header, write_json};
use crate::{CliError, CliResult};

/// Published parameter and FLOP budgets of the full-size variants.
const REFERENCE: [(&str, f64, f64); 3] = [("t", 11.4e6, 0.3e9), ("s", 16.1e6, 0.5e9), ("b", 23.2e6, 1.3e9)];
const REFERENCE_TOLERANCE: f64 = 0.10;

fn base_spec(variant: &str) -> CliResult<ModelSpec> {
    if let Ok(spec) = ModelSpec::builtin(variant) {
        return Ok(spec);
    }
    let path = Path::new(variant);
    if path.is_file() {
        return Ok(ModelSpec::parse(&fs::read_to_string(path)?)?);
    }
    Err(CliError::usage(format!(
        "unknown variant `{variant}`: expected t, s, b, micro, tiny or a spec file"
    )))
}

pub fn resolve_spec(a: &SpecArgs) -> CliResult<ModelSpec> {
    let mut spec = base_spec(&a.variant)?;
    spec.dw &= !a.no_dw;
    spec.se &= !a.no_se;
    spec.lkp_dw &= !a.no_lkp_dw;
    if let Some(k) = a.kl {
        spec.large_kernel = k;
    }
    if let Some(k) = a.ks {
        spec.small_kernel = k;
    }
    if let Some(g) = a.group_width {
        spec.group_width = g;
    }
    spec.validate()?;
    Ok(spec)
}

/// `blobs10`, `blobs10-test` or a dataset directory.
fn resolve_data(name: &str, data_seed: u64, classes: Option<usize>) -> CliResult<Dataset> {
    let ds = match name {
        "blobs10" | "blobs10-train" => blobs10_train(data_seed),
        "blobs10-test" => blobs10_test(data_seed),
        path => {
            let p = Path::new(path);
            if !p.is_dir() {
                return Err(CliError::data(format!(
                    "dataset `{path}` is neither blobs10[-test] nor a directory"
                )));
            }
            load_dataset(p, detect_format(p), classes)?
        }
    };
    if let Some(k) = classes {
        if ds.classes() != k {
            return Err(CliError::data(format!(
                "dataset has {} classes, model expects {k}",
                ds.classes()
            )));
        }
    }
    Ok(ds)
}

fn percent(actual: f64, target: f64) -> f64 {
    (actual / target - 1.0) * 100.0
}

fn mark(actual: f64, target: f64) -> &'static str {
    if (actual / target - 1.0).abs() <= REFERENCE_TOLERANCE {
        "[ok]"
    } else {
        "[out]"
    }
}

pub fn describe(a: &DescribeArgs) -> CliResult {
    let spec = resolve_spec(&a.spec)?;
    let full_size = ["t", "s", "b"].contains(&spec.name.as_str());
    let res = a.res.unwrap_or(if full_size { 224 } else { 32 });
    let model = Model::new(spec.clone())?;
    let report = model.count_macs(res, res)?;

    println!("# spec sha256:{}", spec.digest_hex());
    print!("{}", spec.to_text());
    println!();
    println!("resolution {res}x{res}");
    if a.layers {
        println!("{:<48} {:<12} {:>14} {:>10}", "layer", "kind", "macs", "params");
        for e in &report.entries {
            println!("{:<48} {:<12} {:>14} {:>10}", e.name, e.kind, e.macs, e.params);
        }
    } else {
        println!("{:<14} {:>14} {:>10}", "kind", "macs", "params");
        for (kind, macs, params) in report.by_kind() {
            println!("{kind:<14} {macs:>14} {params:>10}");
        }
    }
    let exact = report.ls_convs.iter().filter(|c| c.itemized == c.closed_form).count();
    println!("LS conv closed form: {exact}/{} exact", report.ls_convs.len());

    let params = report.total_params as f64;
    let macs = report.total_macs as f64;
    println!("params {:.3}M", params / 1e6);
    println!("MACs   {:.3}G (FLOPs as 2*MACs {:.3}G)", macs / 1e9, 2.0 * macs / 1e9);
    if let Some(&(_, tp, tf)) = REFERENCE.iter().find(|r| r.0 == spec.name) {
        let modified = ModelSpec::builtin(&spec.name)? != spec;
        if res != 224 || modified {
            println!("reference budgets apply to the unmodified variant at 224x224");
        } else {
            let tol = REFERENCE_TOLERANCE * 100.0;
            println!(
                "target params {:.1}M: {:+.1}% {} (±{tol:.0}%)",
                tp / 1e6,
                percent(params, tp),
                mark(params, tp)
            );
            println!(
                "target FLOPs  {:.1}G: MAC {:+.1}% {}, 2*MAC {:+.1}% {} (±{tol:.0}%)",
                tf / 1e9,
                percent(macs, tf),
                mark(macs, tf),
                percent(2.0 * macs, tf),
                mark(2.0 * macs, tf)
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: &'a str,
    spec_sha256: String,
    dtype: &'static str,
    threads: usize,
    seed: u64,
    train_samples: usize,
    test_samples: Option<usize>,
    config: &'a TrainConfig,
    final_train_loss: f64,
    final_train_top1: f64,
    final_test_top1: Option<f64>,
    best_test_top1: Option<f64>,
    seconds: f64,
    records: &'a [lsnet::train::EpochRecord],
    files: Vec<PathBuf>,
}

pub fn train(a: &TrainArgs, threads: usize) -> CliResult {
    match a.dtype {
        DType::F32 => train_as::<f32>(a, threads),
        DType::F64 => train_as::<f64>(a, threads),
    }
}

fn train_as<T: Scalar>(a: &TrainArgs, threads: usize) -> CliResult {
    let spec = resolve_spec(&a.spec)?;
    let model = Model::new(spec.clone())?;
    let train = resolve_data(&a.data, a.data_seed, Some(spec.classes))?;
    let test_name = a
        .test_data
        .clone()
        .or_else(|| (a.data == "blobs10").then(|| "blobs10-test".to_string()));
    let test = test_name
        .map(|n| resolve_data(&n, a.data_seed, Some(spec.classes)))
        .transpose()?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        optimizer: if a.sgd {
            Optimizer::Sgd { momentum: 0.9 }
        } else {
            defaults.optimizer
        },
        lr: a.lr.unwrap_or(defaults.lr),
        warmup_epochs: a.warmup_epochs.unwrap_or(defaults.warmup_epochs),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs: a.epochs,
        hflip: a.hflip,
        seed: a.seed,
        ..defaults
    };
    cfg.validate()?;

    fs::create_dir_all(&a.out_dir)?;
    let hdr = header(
        Some(&spec),
        Some(a.seed),
        &[("dtype", T::DTYPE.name().to_string()), ("threads", threads.to_string())],
    );
    let spec_path = a.out_dir.join("spec.txt");
    fs::write(&spec_path, prepend_header(&hdr, &spec.to_text()))?;

    let mut store: ParamStore<T> = model.init(a.seed)?;
    let start = Instant::now();
    let log = fit(&model, &mut store, &train, test.as_ref(), &cfg, |r| {
        eprintln!(
            "epoch {:>3} {:<5} loss {:.4} top1 {:.4}",
            r.epoch, r.split, r.loss, r.top1
        );
    })?;
    let seconds = start.elapsed().as_secs_f64();

    let metrics_path = a.out_dir.join("metrics.csv");
    log.write_csv(&metrics_path, &hdr)?;
    let weights_path = a.out_dir.join("weights.lsw");
    save_weights(&store, &spec, &weights_path)?;
    let summary_path = a.out_dir.join("summary.json");

    let last_train = log
        .split("train")
        .last()
        .map(|r| (r.loss, r.top1))
        .unwrap_or((f64::NAN, f64::NAN));
    let tests = log.split("test");
    let summary = TrainSummary {
        model: &spec.name,
        spec_sha256: spec.digest_hex(),
        dtype: T::DTYPE.name(),
        threads,
        seed: a.seed,
        train_samples: train.len(),
        test_samples: test.as_ref().map(Dataset::len),
        config: &cfg,
        final_train_loss: last_train.0,
        final_train_top1: last_train.1,
        final_test_top1: tests.last().map(|r| r.top1),
        best_test_top1: tests.iter().map(|r| r.top1).reduce(f64::max),
        seconds,
        records: &log.records,
        files: vec![spec_path, metrics_path, weights_path, summary_path.clone()],
    };
    write_json(&summary_path, &hdr, &summary)?;
    match summary.final_test_top1 {
        Some(t) => println!(
            "trained {} epochs in {seconds:.1}s: train loss {:.4}, test top1 {t:.4}",
            cfg.epochs, last_train.0
        ),
        None => println!(
            "trained {} epochs in {seconds:.1}s: train loss {:.4}, train top1 {:.4}",
            cfg.epochs, last_train.0, last_train.1
        ),
    }
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

/// Spec of a weight file: `--variant` or the `spec.txt` beside it.
fn spec_for_weights(weights: &Path, variant: Option<&str>) -> CliResult<ModelSpec> {
    match variant {
        Some(v) => base_spec(v),
        None => {
            let beside = weights.parent().unwrap_or(Path::new(".")).join("spec.txt");
            if !beside.is_file() {
                return Err(CliError::usage(format!(
                    "no --variant given and no {} next to the weights",
                    beside.display()
                )));
            }
            Ok(ModelSpec::parse(&fs::read_to_string(beside)?)?)
        }
    }
}

pub fn eval(a: &EvalArgs) -> CliResult {
    match a.dtype {
        DType::F32 => eval_as::<f32>(a),
        DType::F64 => eval_as::<f64>(a),
    }
}

fn eval_as<T: Scalar>(a: &EvalArgs) -> CliResult {
    let spec = spec_for_weights(&a.weights, a.variant.as_deref())?;
    let model = Model::new(spec.clone())?;
    let store: ParamStore<T> = load_weights(&a.weights, &spec)?;
    let ds = resolve_data(&a.data, a.data_seed, Some(spec.classes))?;
    let m = evaluate(&model, &store, &ds, 64)?;
    println!(
        "top1 {:.4} loss {:.6} samples {} model {} sha256:{}",
        m.top1,
        m.loss,
        ds.len(),
        spec.name,
        spec.digest_hex()
    );
    Ok(())
}

fn parse_list<const N: usize>(text: &str, what: &str) -> CliResult<[usize; N]> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("{what} `{text}`: expected {N} comma-separated integers")))?;
    parts
        .try_into()
        .map_err(|_| CliError::usage(format!("{what} `{text}`: expected {N} comma-separated integers")))
}

pub fn bench(a: &BenchArgs, threads: usize) -> CliResult {
    match a.dtype {
        DType::F32 => bench_as::<f32>(a, threads),
        DType::F64 => bench_as::<f64>(a, threads),
    }
}

fn bench_as<T: Scalar>(a: &BenchArgs, threads: usize) -> CliResult {
    let mut rows: Vec<BenchRow> = Vec::new();
    let mut spec = None;
    if matches!(a.op, BenchOp::Ska | BenchOp::All) {
        let size = SkaSize {
            shape: parse_list::<4>(&a.shape, "--shape")?,
            small_kernel: a.ks,
            groups: a.groups,
        };
        rows.extend(bench_ska::<T>(size, a.repeats, threads, a.seed)?);
    }
    if matches!(a.op, BenchOp::Model | BenchOp::All) {
        let s = base_spec(&a.variant)?;
        let res = a.res.unwrap_or(if ["t", "s", "b"].contains(&s.name.as_str()) {
            224
        } else {
            32
        });
        rows.push(bench_model::<T>(&s, res, a.batch, a.repeats, threads, a.seed)?);
        spec = Some(s);
    }
    let hdr = header(
        spec.as_ref(),
        Some(a.seed),
        &[("warmup", lsnet::bench::WARMUP.to_string())],
    );
    let csv = to_csv(&rows, &hdr);
    print!("{csv}");
    if let [fast, naive] = rows.iter().filter(|r| r.op.starts_with("ska")).collect::<Vec<_>>()[..] {
        eprintln!("ska speedup over naive: {:.2}x", naive.median_s / fast.median_s);
    }
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("bench.csv"), csv)?;
    }
    Ok(())
}

fn load_store<T: Scalar>(a: &StoreArgs, spec: &ModelSpec, model: &Model) -> CliResult<ParamStore<T>> {
    Ok(match &a.weights {
        Some(path) => load_weights(path, spec)?,
        None => model.init(a.seed)?,
    })
}

/// A single PGM/PPM normalized by its own channel statistics.
fn image_tensor<T: Scalar>(path: &Path) -> CliResult<Tensor<T>> {
    let img = read_pnm(path)?;
    let ds = Dataset::new(img.planar(), [1, img.channels, img.height, img.width], vec![0], 1)?;
    Ok(ds.batch(&[0], &[]).0)
}

fn weights_label(a: &StoreArgs) -> String {
    a.weights
        .as_ref()
        .map_or_else(|| format!("init(seed {})", a.seed), |p| p.display().to_string())
}

pub fn dump_agg_weights(a: &DumpArgs) -> CliResult {
    match a.dtype {
        DType::F32 => dump_as::<f32>(a),
        DType::F64 => dump_as::<f64>(a),
    }
}

fn dump_as<T: Scalar>(a: &DumpArgs) -> CliResult {
    let spec = resolve_spec(&a.store.spec)?;
    let model = Model::new(spec.clone())?;
    let store = load_store::<T>(&a.store, &spec, &model)?;
    let (image, source) = match (&a.image, &a.data) {
        (Some(p), _) => (image_tensor::<T>(p)?, p.display().to_string()),
        (None, data) => {
            let name = data.as_deref().unwrap_or("blobs10-test");
            let ds = resolve_data(name, a.data_seed, None)?;
            if a.index >= ds.len() {
                return Err(CliError::usage(format!(
                    "--index {} outside the {} samples of {name}",
                    a.index,
                    ds.len()
                )));
            }
            (ds.batch(&[a.index], &[]).0, format!("{name}[{}]", a.index))
        }
    };
    let sites = model.ls_conv_sites();
    let stage = match a.stage {
        Some(s) => s,
        None => sites
            .first()
            .map(|s| s.stage)
            .ok_or_else(|| CliError::usage("model has no LS convs"))?,
    };
    let dump = dump_aggregation_weights(&model, &store, &image, stage, a.layer)?;
    let hdr = header(
        Some(&spec),
        Some(a.store.seed),
        &[
            ("weights", weights_label(&a.store)),
            ("image", source),
            ("layer", dump.site.prefix.clone()),
            ("mass", format!("{:e}", dump.mass)),
        ],
    );
    fs::create_dir_all(&a.out_dir)?;
    let stem = format!("agg_s{stage}_l{}", a.layer);
    let pgm = a.out_dir.join(format!("{stem}.pgm"));
    let csv = a.out_dir.join(format!("{stem}.csv"));
    let up_csv = a.out_dir.join(format!("{stem}_upsampled.csv"));
    dump.upsampled.write_pgm(&pgm, &hdr)?;
    dump.feature.write_csv(&csv, &hdr)?;
    dump.upsampled.write_csv(&up_csv, &hdr)?;
    println!(
        "{}: {}x{} tokens, mass {:.6e}; wrote {}, {}, {}",
        dump.site.prefix,
        dump.feature.height,
        dump.feature.width,
        dump.mass,
        pgm.display(),
        csv.display(),
        up_csv.display()
    );
    Ok(())
}

pub fn erf_map(a: &ErfArgs) -> CliResult {
    match a.dtype {
        DType::F32 => erf_as::<f32>(a),
        DType::F64 => erf_as::<f64>(a),
    }
}

fn erf_as<T: Scalar>(a: &ErfArgs) -> CliResult {
    let spec = resolve_spec(&a.store.spec)?;
    let model = Model::new(spec.clone())?;
    let store = load_store::<T>(&a.store, &spec, &model)?;
    let (images, source) = match &a.image {
        Some(p) => (image_tensor::<T>(p)?, p.display().to_string()),
        None => {
            if a.probes == 0 {
                return Err(CliError::usage("--probes must be positive"));
            }
            let probes = erf_probe_images::<T>(a.probes, spec.in_channels, a.res, a.store.seed);
            (probes, format!("{} normal probes at {}x{}", a.probes, a.res, a.res))
        }
    };
    let position = a
        .position
        .as_deref()
        .map(|p| parse_list::<2>(p, "--position"))
        .transpose()?;
    let erf = erf_model(&model, &store, &images, a.stage, position.map(|[r, c]| (r, c)))?;
    let (r, c) = erf.position;
    let support = erf.map.support_count(SUPPORT_FRACTION);
    let hdr = header(
        Some(&spec),
        Some(a.store.seed),
        &[
            ("weights", weights_label(&a.store)),
            ("images", source),
            ("stage", a.stage.to_string()),
            (
                "position",
                format!("{r},{c} of {}x{}", erf.feature_hw.0, erf.feature_hw.1),
            ),
            ("support", format!("{support} px above {SUPPORT_FRACTION} of max")),
        ],
    );
    let (pgm, csv) = write_heatmap(&erf.map, &a.out_dir, &format!("erf_s{}", a.stage), &hdr)?;
    println!(
        "stage {} position ({r}, {c}): support {support} px; wrote {}, {}",
        a.stage,
        pgm.display(),
        csv.display()
    );
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> CliResult {
    let hdr = header(None, Some(a.seed), &[("dataset", "blobs10".to_string())]);
    for (split, ds) in [("train", blobs10_train(a.seed)), ("test", blobs10_test(a.seed))] {
        let dir = a.out_dir.join(split);
        match a.format {
            DataLayout::Idx => ds.save_idx(&dir)?,
            DataLayout::RawDir => save_raw_dir(&ds, &dir)?,
        }
        println!("{split}: {} samples -> {}", ds.len(), dir.display());
    }
    fs::write(a.out_dir.join("provenance.txt"), prepend_header(&hdr, ""))?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult {
    let spec = resolve_spec(&a.spec)?;
    let cfg = GradcheckConfig {
        tolerance: a.tolerance,
        samples: a.samples,
        batch: a.batch,
        resolution: a.res,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let start = Instant::now();
    let report = gradcheck_model(&spec, &cfg)?;
    print!("{}", report.summary());
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir)?;
        let hdr = header(Some(&spec), Some(a.seed), &[]);
        write_json(&dir.join("gradcheck.json"), &hdr, &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradient check failed in groups {:?}, primitives {:?}",
            report.failing_groups(),
            report.failing_prims()
        )))
    }
}
