//! Acceptance checks, one PASS/FAIL line each.
//!
//! `cargo test -p vibefm --test acceptance` runs all of them; numeric
//! arguments after `--` select a subset, e.g. `-- 1 2 3`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use vibefm::augment::{horizontal_flip, mixup, negate, permutation, phase_shift, SoftExample};
use vibefm::checkpoint::Checkpoint;
use vibefm::datamodel::{
    DomainTag, EncoderKind, EvalReport, Framework, ModalitySpec, Segment, Signals, Spectrogram, Stage, TrainConfig,
};
use vibefm::encoders::{EncoderConfig, Model};
use vibefm::evaluation::{epochs_to_fraction, median, metrics, run_grid, split_indices, subsample_indices, SplitSpec};
use vibefm::experiment::ExperimentConfig;
use vibefm::focal::{focal_loss_t, info_nce, orthogonality_penalty_t};
use vibefm::preprocess::signal_stft;
use vibefm::rng::{stream, Rng};
use vibefm::synthgen::{generate_dataset, separability_probe, SynthSpec};
use vibefm::training::pretrain::embed_dataset;
use vibefm::training::{finetune_linear, finetune_supervised_baseline, pretrain, train_supervised, RunOptions};

const PHASE_TOL: f64 = 1e-12;
const PARSEVAL_TOL: f64 = 1e-6;
const LN4_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const FINETUNE_PARAMS: usize = 1028;
const ORTH_MAX: f64 = 0.1;
const ORTH_EPOCHS: usize = 50;
const PROBE_RANGE: (f64, f64) = (0.7, 0.95);

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn desk_config() -> std::result::Result<ExperimentConfig, String> {
    ok(ExperimentConfig::load(&workspace_root().join("configs/desk.toml"), &[]))
}

fn random_signal(rng: &mut Rng, channels: usize, len: usize) -> Array2<f32> {
    Array2::from_shape_fn((channels, len), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    })
}

// ---------------------------------------------------------------- 1

fn properties() -> Check {
    let mut rng = stream(1, "acceptance-properties", &[]);
    let mut counts = BTreeMap::new();

    for _ in 0..200 {
        let len = 8 * rng.random_range(1..64usize);
        let channels = rng.random_range(1..4);
        let x = random_signal(&mut rng, channels, len);
        ensure!(negate(&negate(&x)) == x, "negate is not an involution");
        ensure!(horizontal_flip(&horizontal_flip(&x)) == x, "flip is not an involution");

        let k = [2, 4, 8][rng.random_range(0..3)];
        let y = ok(permutation(&x, k, &mut rng))?;
        for (a, b) in x.rows().into_iter().zip(y.rows()) {
            let sorted = |r: ndarray::ArrayView1<f32>| {
                let mut v: Vec<u32> = r.iter().map(|f| f.to_bits()).collect();
                v.sort_unstable();
                v
            };
            ensure!(sorted(a) == sorted(b), "permutation changed the multiset of a channel");
            let chunk = len / k;
            let chunks_a: BTreeSet<Vec<u32>> =
                a.exact_chunks(chunk).into_iter().map(|c| c.iter().map(|f| f.to_bits()).collect()).collect();
            for c in b.exact_chunks(chunk) {
                let bits: Vec<u32> = c.iter().map(|f| f.to_bits()).collect();
                ensure!(chunks_a.contains(&bits), "permutation produced a chunk not in the input");
            }
        }
    }
    counts.insert("involution/permutation", 200);

    let mut worst_phase = 0.0f64;
    for _ in 0..200 {
        let shape = (rng.random_range(1..4), rng.random_range(1..12), rng.random_range(1..40));
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let re = Array3::from_shape_fn(shape, |_| gauss() * 10.0);
        let im = Array3::from_shape_fn(shape, |_| gauss() * 10.0);
        let spec = Spectrogram {
            modality: "m".into(),
            re,
            im,
            normalized: false,
        };
        let theta = rng.random_range(-10.0..10.0);
        let shifted = phase_shift(&spec, theta);
        for (a, b) in spec.magnitude().iter().zip(shifted.magnitude().iter()) {
            worst_phase = worst_phase.max((a - b).abs() / a.max(f64::MIN_POSITIVE));
        }
    }
    ensure!(worst_phase <= PHASE_TOL, "phase shift changed a magnitude by {worst_phase:e} relative");
    counts.insert("phase shift", 200);

    for _ in 0..200 {
        let len = rng.random_range(1..300);
        let classes = rng.random_range(2..6);
        let signals = |rng: &mut Rng| -> Signals {
            [("a".to_string(), random_signal(rng, 2, len)), ("s".to_string(), random_signal(rng, 1, len))].into()
        };
        let a = SoftExample::one_hot(signals(&mut rng), rng.random_range(0..classes), classes);
        let b = SoftExample::one_hot(signals(&mut rng), rng.random_range(0..classes), classes);
        let lambda = match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random_range(0.0..=1.0),
        };
        let m = ok(mixup(&a, &b, lambda))?;
        for (name, xm) in &m.signals {
            for ((&v, &va), &vb) in xm.iter().zip(a.signals[name].iter()).zip(b.signals[name].iter()) {
                ensure!(v >= va.min(vb) && v <= va.max(vb), "mixup left the convex hull ({v} from {va}, {vb})");
            }
        }
        for ((&t, &ta), &tb) in m.target.iter().zip(&a.target).zip(&b.target) {
            ensure!(t >= ta.min(tb) && t <= ta.max(tb), "mixed target left the convex hull");
        }
    }
    counts.insert("mixup", 200);

    let mut worst_parseval = 0.0f64;
    for spec in [ModalitySpec::acoustic(), ModalitySpec::seismic()] {
        for _ in 0..20 {
            let x = random_signal(&mut rng, spec.channels, spec.samples_per_segment());
            let s = ok(signal_stft(&spec.name, x.view(), spec.num_intervals))?;
            let l = spec.interval_len();
            for c in 0..spec.channels {
                for i in 0..spec.num_intervals {
                    let time: f64 = (0..l).map(|t| (x[[c, i * l + t]] as f64).powi(2)).sum();
                    let bins = spec.bins();
                    let freq: f64 = (0..bins)
                        .map(|k| {
                            let p = s.re[[c, i, k]].powi(2) + s.im[[c, i, k]].powi(2);
                            let edge = k == 0 || (l % 2 == 0 && k == bins - 1);
                            if edge {
                                p
                            } else {
                                2.0 * p
                            }
                        })
                        .sum::<f64>()
                        / l as f64;
                    worst_parseval = worst_parseval.max((time - freq).abs() / time);
                }
            }
        }
    }
    ensure!(worst_parseval <= PARSEVAL_TOL, "Parseval error {worst_parseval:e}");
    counts.insert("parseval", 40);

    for trial in 0..200 {
        let dataset = random_runs(&mut rng, trial);
        let spec = SplitSpec {
            seed: trial as u64,
            ..SplitSpec::default()
        };
        let idx = ok(split_indices(&dataset, &spec))?;
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
        all.sort_unstable();
        ensure!(all == (0..dataset.len()).collect::<Vec<_>>(), "split is not a partition");
        let mut home: BTreeMap<&str, usize> = BTreeMap::new();
        for (part, members) in [&idx.train, &idx.val, &idx.test].into_iter().enumerate() {
            let labels: BTreeSet<_> = members.iter().map(|&i| dataset[i].label).collect();
            let classes: BTreeSet<_> = dataset.iter().map(|s| s.label).collect();
            ensure!(labels == classes, "a split misses a class");
            for &i in members {
                let prev = *home.entry(dataset[i].run_id.as_str()).or_insert(part);
                ensure!(prev == part, "run {} crosses splits", dataset[i].run_id);
            }
        }
        let train: Vec<Segment> = idx.train.iter().map(|&i| dataset[i].clone()).collect();
        let classes = train.iter().filter_map(|s| s.label).collect::<BTreeSet<_>>().len();
        let mut previous: Option<BTreeSet<usize>> = None;
        for ratio in [0.01, 0.05, 0.1, 0.25, 0.5, 1.0] {
            let sub = ok(subsample_indices(&train, ratio, trial as u64))?;
            let want = ((ratio * train.len() as f64).round() as usize).max(classes);
            ensure!(sub.len() == want, "subsample of {ratio} has {} samples, expected {want}", sub.len());
            let set: BTreeSet<usize> = sub.into_iter().collect();
            ensure!(
                set.iter().filter_map(|&i| train[i].label).collect::<BTreeSet<_>>().len() == classes,
                "subsample misses a class"
            );
            if let Some(p) = &previous {
                ensure!(p.is_subset(&set), "subsample of {ratio} does not contain the smaller one");
            }
            previous = Some(set);
        }
    }
    counts.insert("split", 200);

    for _ in 0..1000 {
        let k = rng.random_range(1..10);
        let n = rng.random_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let m = ok(metrics(&pred, &truth, k))?;
        let mut cm = vec![vec![0usize; k]; k];
        for (&p, &t) in pred.iter().zip(&truth) {
            cm[t][p] += 1;
        }
        let correct: usize = (0..k).map(|c| cm[c][c]).sum();
        let mut f1 = 0.0;
        for c in 0..k {
            let tp = cm[c][c];
            let fp: usize = (0..k).filter(|&t| t != c).map(|t| cm[t][c]).sum();
            let fn_: usize = (0..k).filter(|&p| p != c).map(|p| cm[c][p]).sum();
            if 2 * tp + fp + fn_ > 0 {
                f1 += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
            }
        }
        ensure!(m.accuracy == correct as f64 / n as f64, "accuracy differs from the confusion matrix");
        ensure!(m.macro_f1 == f1 / k as f64, "macro-F1 differs from the confusion matrix");
    }
    counts.insert("metrics", 1000);

    Ok(format!(
        "{} cases; phase err {worst_phase:.1e}, parseval err {worst_parseval:.1e}",
        counts.values().sum::<usize>()
    ))
}

fn random_runs(rng: &mut Rng, trial: usize) -> Vec<Segment> {
    loop {
        let mut out = Vec::new();
        for class in 0..rng.random_range(1..6) {
            for run in 0..rng.random_range(3..9) {
                for j in 0..rng.random_range(1..7) {
                    out.push(Segment {
                        signals: Signals::new(),
                        label: Some(class),
                        domain: DomainTag::SynthA,
                        run_id: format!("t{trial}-c{class}-r{run}"),
                        start_time_s: j as f64,
                    });
                }
            }
        }
        if out.len() >= 10 {
            return out;
        }
    }
}

// ---------------------------------------------------------------- 2

fn losses() -> Check {
    let mut rng = stream(2, "acceptance-losses", &[]);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let single = ok(info_nce(&[gauss(16)], &[gauss(16)], 0.07))?;
    ensure!(single.abs() <= LN4_TOL, "info_nce with one sample is {single}");
    let v = gauss(16);
    let same = ok(info_nce(&vec![v.clone(); 4], &vec![v; 4], 0.07))?;
    let err4 = (same - 4f64.ln()).abs();
    ensure!(err4 <= LN4_TOL, "info_nce of identical vectors is {same}, off ln 4 by {err4:e}");

    let mut cfg = TrainConfig::table_defaults(Stage::Pretrain);
    cfg.loss_weights.orth = 0.7;
    let mut rng = stream(2, "acceptance-gradients", &[]);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let b = rng.random_range(2..9);
        let shared_dim = rng.random_range(2..7);
        let d = 2 * shared_dim;
        let vars: Vec<(String, Var)> = ["acoustic", "seismic"]
            .iter()
            .flat_map(|m| [format!("{m}/1"), format!("{m}/2")])
            .map(|name| {
                let data: Vec<f64> = (0..b * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                Ok((name, ok(Var::from_vec(data, (b, d), &Device::Cpu))?))
            })
            .collect::<std::result::Result<_, String>>()?;
        let loss = |vars: &[(String, Var)]| -> std::result::Result<Tensor, String> {
            let mut v1 = BTreeMap::new();
            let mut v2 = BTreeMap::new();
            for (name, var) in vars {
                let (m, view) = name.split_once('/').expect("named view");
                let dst = if view == "1" { &mut v1 } else { &mut v2 };
                dst.insert(m.to_string(), var.as_tensor().clone());
            }
            Ok(ok(focal_loss_t(&v1, &v2, shared_dim, &cfg))?.total)
        };
        let grads = ok(loss(&vars)?.backward())?;
        let value = |vars: &[(String, Var)]| -> std::result::Result<f64, String> { ok(loss(vars)?.to_scalar::<f64>()) };
        let h = 1e-6;
        let (mut diff2, mut norm2) = (0.0, 0.0);
        for (i, (_, var)) in vars.iter().enumerate() {
            let grad = grads.get(var).ok_or("missing gradient")?;
            let analytic: Vec<f64> = ok(grad.flatten_all().and_then(|g| g.to_vec1()))?;
            let base: Vec<f64> = ok(var.as_tensor().flatten_all().and_then(|t| t.to_vec1()))?;
            for j in 0..base.len() {
                let probe = |delta: f64| -> std::result::Result<f64, String> {
                    let mut v = base.clone();
                    v[j] += delta;
                    let mut shifted = vars.clone();
                    shifted[i].1 = ok(Var::from_vec(v, (b, d), &Device::Cpu))?;
                    value(&shifted)
                };
                let fd = (probe(h)? - probe(-h)?) / (2.0 * h);
                diff2 += (analytic[j] - fd).powi(2);
                norm2 += fd.powi(2);
            }
        }
        worst = worst.max((diff2 / norm2).sqrt());
    }
    ensure!(worst < GRAD_TOL, "gradient relative error {worst:e}");
    Ok(format!("ln4 err {err4:.1e}; worst gradient rel err {worst:.1e} over 20 batches"))
}

// ---------------------------------------------------------------- 3

fn freeze() -> Check {
    let spec = SynthSpec {
        runs_per_class: 3,
        duration_s: 8.0,
        ..SynthSpec::default()
    };
    let data = ok(generate_dataset(&spec, DomainTag::SynthA))?;
    let specs = &spec.modalities;
    let options = RunOptions::default();
    let quick = |stage: Stage| TrainConfig {
        epochs: 2,
        batch_size: 16,
        ..TrainConfig::table_defaults(stage)
    };
    let encoder = EncoderConfig::default();

    let pre = ok(pretrain(&data, specs, &quick(Stage::Pretrain), &encoder, &options))?;
    let ckpt = ok(pre.checkpoint(0, &quick(Stage::Pretrain)))?;
    let tuned = ok(finetune_linear(&ckpt, &data, &data, spec.num_classes, &quick(Stage::Finetune), &options))?;
    let trainable: usize = tuned
        .model
        .trainable_vars(Stage::Finetune)
        .iter()
        .map(|(_, v)| v.elem_count())
        .sum();
    ensure!(trainable == FINETUNE_PARAMS, "{trainable} trainable parameters, expected {FINETUNE_PARAMS}");
    let after = ok(tuned.checkpoint(0, &quick(Stage::Finetune)))?;
    ensure!(after.encoder_hash() == ckpt.encoder_hash(), "fine-tuning changed the encoder");
    ensure!(
        after.tensors.iter().filter(|(k, _)| k.starts_with(vibefm::encoders::ENCODER_PREFIX)).all(|(k, t)| ckpt.tensors[k] == *t),
        "fine-tuning changed encoder bytes"
    );

    let sup = ok(train_supervised(&data, &data, specs, spec.num_classes, &quick(Stage::Supervised), &encoder, &options))?;
    let sup_ckpt = ok(sup.checkpoint(0, &quick(Stage::Supervised)))?;
    let sft = ok(finetune_supervised_baseline(
        &sup_ckpt,
        &data,
        &data,
        spec.num_classes,
        &quick(Stage::Finetune),
        &options,
    ))?;
    let sft_ckpt: Checkpoint = ok(sft.checkpoint(0, &quick(Stage::Finetune)))?;
    let frozen_same = sft_ckpt
        .tensors
        .iter()
        .filter(|(k, _)| !k.starts_with(vibefm::encoders::HEAD_OUTPUT_PREFIX))
        .all(|(k, t)| sup_ckpt.tensors[k] == *t);
    ensure!(frozen_same, "supervised fine-tuning changed a frozen layer");
    let sft_trainable: usize = sft
        .model
        .trainable_vars(Stage::SupervisedFinetune)
        .iter()
        .map(|(_, v)| v.elem_count())
        .sum();
    Ok(format!(
        "probe trains {trainable} parameters, encoder hash {} unchanged; supervised fine-tune trains {sft_trainable}",
        &ckpt.encoder_hash()[..12]
    ))
}

// ---------------------------------------------------------------- 4

fn dataset_orth(model: &Model, data: &[Segment]) -> std::result::Result<f64, String> {
    let embeddings = ok(embed_dataset(model, data, 256))?;
    let t = ok(orthogonality_penalty_t(&embeddings, model.encoder_config.shared_dim))?;
    ok(ok(t.to_dtype(DType::F64))?.to_scalar::<f64>())
}

fn orthogonality() -> Check {
    let config = desk_config()?;
    let spec = SynthSpec::default();
    let data = ok(generate_dataset(&spec, DomainTag::SynthA))?;
    let mut cfg = config.stage(Stage::Pretrain);
    cfg.epochs = cfg.epochs.max(ORTH_EPOCHS);
    let encoder = config.encoder_config();
    let options = RunOptions {
        augment: config.augment.clone(),
        ..RunOptions::default()
    };
    let trained = ok(pretrain(&data, &spec.modalities, &cfg, &encoder, &options))?.model;
    let mut initial = ok(Model::new(&spec.modalities, &encoder, Stage::Pretrain, options.dtype))?;
    initial.norm = trained.norm.clone();
    let before = dataset_orth(&initial, &data)?;
    let after = dataset_orth(&trained, &data)?;
    let detail = format!(
        "{} segments, {} epochs: mean cos^2 {before:.4} -> {after:.4}",
        data.len(),
        cfg.epochs
    );
    ensure!(after < ORTH_MAX && after < before, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 5-7

struct Trends {
    report: EvalReport,
    probe: f64,
    seeds: Vec<u64>,
}

fn trend_grid() -> std::result::Result<Trends, String> {
    let config = desk_config()?;
    let data = ok(config.grid_data())?;
    let a = &data.domains[&DomainTag::SynthA];
    let probe = ok(separability_probe(a, &data.specs))?;
    let report = ok(run_grid(&config.grid_settings(1), &data))?;
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    ok(std::fs::create_dir_all(&dir))?;
    ok(vibefm::evaluation::emit_report(&report, &dir))?;
    println!("    desk grid report written to {}", dir.display());
    Ok(Trends {
        report,
        probe,
        seeds: config.grid.seeds.clone(),
    })
}

impl Trends {
    fn accuracy(&self, framework: Framework, ratio: f64, domain: DomainTag, seed: u64) -> std::result::Result<f64, String> {
        self.report
            .rows
            .iter()
            .find(|r| {
                r.encoder == EncoderKind::Deepsense
                    && r.framework == framework
                    && r.label_ratio == ratio
                    && r.test_domain == domain
                    && r.seed == seed
            })
            .map(|r| r.accuracy)
            .ok_or_else(|| format!("no {framework:?} row at ratio {ratio} on {domain} for seed {seed}"))
    }

    fn median_of(&self, f: impl Fn(u64) -> std::result::Result<f64, String>) -> std::result::Result<f64, String> {
        let v = self.seeds.iter().map(|&s| f(s)).collect::<std::result::Result<Vec<_>, _>>()?;
        median(&v).ok_or_else(|| "no seeds".into())
    }

    fn probe_in_range(&self) -> std::result::Result<(), String> {
        ensure!(
            self.probe >= PROBE_RANGE.0 && self.probe <= PROBE_RANGE.1,
            "separability probe {:.3} outside [{}, {}]",
            self.probe,
            PROBE_RANGE.0,
            PROBE_RANGE.1
        );
        Ok(())
    }
}

fn label_efficiency(t: &Trends) -> Check {
    t.probe_in_range()?;
    let a = DomainTag::SynthA;
    let drop = |fw| t.median_of(|s| Ok(t.accuracy(fw, 1.0, a, s)? - t.accuracy(fw, 0.01, a, s)?));
    let sup_drop = drop(Framework::Supervised)?;
    let focal_drop = drop(Framework::Focal)?;
    let at10 = |fw| t.median_of(|s| t.accuracy(fw, 0.1, a, s));
    let sup10 = at10(Framework::Supervised)?;
    let focal10 = at10(Framework::Focal)?;
    let detail = format!(
        "probe {:.3}; drop 100%->1%: supervised {sup_drop:.3}, focal {focal_drop:.3}; acc@10%: supervised {sup10:.3}, focal {focal10:.3}",
        t.probe
    );
    ensure!(sup_drop > focal_drop && focal10 >= sup10, "{detail}");
    Ok(detail)
}

fn domain_shift(t: &Trends) -> Check {
    let shift = |fw| {
        t.median_of(|s| Ok(t.accuracy(fw, 0.1, DomainTag::SynthA, s)? - t.accuracy(fw, 0.1, DomainTag::SynthB, s)?))
    };
    let sup = shift(Framework::Supervised)?;
    let focal = shift(Framework::Focal)?;
    let detail = format!("A->B drop at 10%: supervised {sup:.3}, focal {focal:.3}");
    ensure!(focal <= sup, "{detail}");
    Ok(detail)
}

fn convergence(t: &Trends) -> Check {
    let epochs = |fw: Framework| {
        t.median_of(|s| {
            let id = vibefm::evaluation::cell_id(EncoderKind::Deepsense, fw, 1.0, s);
            let curve = t.report.curves.iter().find(|c| c.cell == id).ok_or(format!("no curve {id}"))?;
            epochs_to_fraction(curve, 0.9)
                .map(|e| e as f64)
                .ok_or(format!("curve {id} is empty"))
        })
    };
    let sup = epochs(Framework::Supervised)?;
    let focal = epochs(Framework::Focal)?;
    let detail = format!("epochs to 90% of final train accuracy: supervised {sup}, focal {focal}");
    ensure!(focal <= sup / 3.0, "{detail}");
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn reproducibility() -> Check {
    let config = ok(ExperimentConfig::load(&workspace_root().join("configs/smoke.toml"), &[]))?;
    let tmp = ok(tempfile::tempdir())?;
    let mut outputs = Vec::new();
    for run in ["first", "second"] {
        let dir = tmp.path().join(run);
        ok(vibefm::pipeline::grid(&config, &dir, 1))?;
        let files = vec![dir.join("grid.csv")];
        let manifest = ok(vibefm::pipeline::record_manifest(&dir, &config, "grid", &files))?;
        outputs.push((manifest.config_hash, ok(std::fs::read(dir.join("grid.csv")))?));
    }
    ensure!(outputs[0].0 == outputs[1].0, "manifest hashes differ");
    ensure!(outputs[0].1 == outputs[1].1, "grid.csv differs between runs");
    Ok(format!(
        "config {}: grid.csv identical ({} bytes)",
        &outputs[0].0[..12],
        outputs[0].1.len()
    ))
}

// ----------------------------------------------------------------

fn report(n: usize, name: &str, elapsed: Duration, result: &Check) -> bool {
    let (status, detail) = match result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("criterion {n} {status} [{name}] ({:.1}s) {detail}", elapsed.as_secs_f64());
    result.is_ok()
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let selected: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let mut all_ok = true;
    let single: [(usize, &str, Duration, fn() -> Check); 5] = [
        (1, "properties", Duration::from_secs(60), properties),
        (2, "losses", Duration::from_secs(60), losses),
        (3, "freeze", Duration::from_secs(600), freeze),
        (4, "orthogonality", Duration::from_secs(600), orthogonality),
        (8, "reproducibility", Duration::from_secs(600), reproducibility),
    ];
    for (n, name, budget, f) in single.iter().filter(|c| wanted(c.0) && c.0 < 5) {
        let (mut result, elapsed) = timed(f);
        if result.is_ok() && elapsed > *budget {
            result = Err(format!("took longer than {}s", budget.as_secs()));
        }
        all_ok &= report(*n, name, elapsed, &result);
    }
    if (5..=7).any(wanted) {
        let (trends, elapsed) = timed(trend_grid);
        let over = elapsed > Duration::from_secs(30 * 60);
        println!("    desk grid took {:.1}s", elapsed.as_secs_f64());
        let checks: [(usize, &str, fn(&Trends) -> Check); 3] = [
            (5, "label efficiency", label_efficiency),
            (6, "domain shift", domain_shift),
            (7, "convergence", convergence),
        ];
        for (n, name, f) in checks.into_iter().filter(|c| wanted(c.0)) {
            let mut result = match &trends {
                Ok(t) => f(t),
                Err(e) => Err(e.clone()),
            };
            if over && result.is_ok() {
                result = Err("desk grid took longer than 30 min".into());
            }
            all_ok &= report(n, name, elapsed, &result);
        }
    }
    for (n, name, budget, f) in single.iter().filter(|c| wanted(c.0) && c.0 == 8) {
        let (mut result, elapsed) = timed(f);
        if result.is_ok() && elapsed > *budget {
            result = Err(format!("took longer than {}s", budget.as_secs()));
        }
        all_ok &= report(*n, name, elapsed, &result);
    }
    if !all_ok {
        std::process::exit(1);
    }
}
