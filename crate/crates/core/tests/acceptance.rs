//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every criterion reports on its own
//! line with its wall time and budget. The process fails if any criterion
//! fails or overruns its budget.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use orthotune::adapters::{
    cayley, cayley_inverse, energy_drift, hyperspherical_energy, materialize_skew, Adapter, AdapterMode, SkewParam,
};
use orthotune::checkpoint::Container;
use orthotune::config::RunConfig;
use orthotune::cutout::{apply_cutout, similarity_map, CutoutPolicy, SimilarityMap};
use orthotune::dataset::{generate, generate_with, harmonic_mean, FewShotSplit};
use orthotune::model::{scaled_similarities, DualEncoder, EncoderConfig, Targets, Track};
use orthotune::objective::{build_logits, total_loss, LossWeights};
use orthotune::pretrain::pretrain;
use orthotune::tensor::determinant;
use orthotune::trainer::{epoch_means, evaluate, finetune, metrics_csv, write_metrics, TrainConfig};
use orthotune::{Matrix, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

/// Name, time budget in seconds, check.
type Criterion = (&'static str, u64, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_skew(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let upper = (0..SkewParam::count(dim)).map(|_| rng.random_range(-scale..scale)).collect();
    materialize_skew(&SkewParam::from_upper(dim, upper).unwrap())
}

/// A randomly initialized default model and a split to train it on.
fn fixture() -> (DualEncoder, FewShotSplit) {
    let split = generate(10, 16, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = DualEncoder::init(EncoderConfig::default(), &mut rng).unwrap();
    (model, split)
}

fn short_run(mode: AdapterMode) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr: 0.05,
        warmup_lr: 0.005,
        seed: 3,
        mode,
        ..TrainConfig::default()
    }
}

fn orthogonality() -> Outcome {
    let (model, split) = fixture();
    let (tuned, _) = finetune(&model, &split, &short_run(AdapterMode::Orthogonal)).map_err(|e| e.to_string())?;
    let mut worst_res: f64 = 0.0;
    let mut worst_det: f64 = 0.0;
    let mut moved: f64 = 0.0;
    let mut count = 0;
    for (_, _, layer) in tuned.ffn_layers() {
        let Adapter::Orthogonal(a) = layer.adapter() else {
            return Err("layer without an orthogonal adapter".into());
        };
        worst_res = worst_res.max(a.residual());
        worst_det = worst_det.max((determinant(a.rotation()).unwrap() - 1.0).abs());
        moved = moved.max(a.skew().upper().iter().fold(0.0, |m, v| m.max(v.abs())));
        count += 1;
    }
    check(
        worst_res <= 1e-8 && worst_det <= 1e-8 && moved > 0.0,
        format!("{count} adapters, max residual {worst_res:.1e}, max |det-1| {worst_det:.1e}, max |skew| {moved:.1e}"),
    )
}

fn energy_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for dim in [2, 4, 8, 16] {
        for _ in 0..100 {
            let w0 = random(dim, dim + 5, &mut rng);
            let a = cayley(&random_skew(dim, 1.0, &mut rng)).unwrap();
            let he0 = hyperspherical_energy(&w0).unwrap();
            let he = hyperspherical_energy(&a.matmul(&w0).unwrap()).unwrap();
            worst = worst.max((he - he0).abs() / he0);
        }
    }
    let (model, split) = fixture();
    let (tuned, rows) = finetune(&model, &split, &short_run(AdapterMode::LowRank)).map_err(|e| e.to_string())?;
    let low_rank = tuned
        .ffn_layers()
        .iter()
        .map(|(_, _, l)| energy_drift(&l.effective_weight(), l.w0()).unwrap())
        .fold(0.0, f64::max);
    let logged = rows.last().map_or(0.0, |r| r.he_drift);
    check(
        worst <= 1e-8 && low_rank > 0.0 && logged > 0.0,
        format!("orthogonal max drift {worst:.1e} over 400 pairs; low-rank drift {low_rank:.2e} after training"),
    )
}

fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let dim = [2, 4, 8, 16][i % 4];
        let c = random_skew(dim, 1.0, &mut rng);
        let c = c.scale(rng.random_range(0.0..10.0) / c.frobenius_norm());
        let back = cayley_inverse(&cayley(&c).unwrap()).unwrap();
        worst = worst.max(back.max_abs_diff(&c).unwrap());
    }
    check(worst <= 1e-8, format!("max |C' - C| {worst:.1e} over 100 draws"))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn ce(logits: &Matrix, labels: &[usize]) -> f64 {
    let n = logits.rows();
    (0..n).map(|i| -log_softmax(logits.row(i))[labels[i]]).sum::<f64>() / n as f64
}

fn kl(live: &Matrix, anchor: &Matrix) -> f64 {
    let n = live.rows();
    (0..n)
        .map(|i| {
            let lp = log_softmax(live.row(i));
            let lq = log_softmax(anchor.row(i));
            lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum::<f64>()
        })
        .sum::<f64>()
        / n as f64
}

/// Plain-matrix objective in which the detached features are the constants
/// `held = (f_t, f_v)` instead of functions of the adapters.
fn semi_loss(
    model: &mut DualEncoder,
    tensors: &BTreeMap<String, Matrix>,
    images: &[Matrix],
    cut: &[Matrix],
    labels: &[usize],
    held: &(Matrix, Matrix),
) -> (f64, (Matrix, Matrix)) {
    let classes = [0, 1];
    let tau = model.tau();
    let sim = |t: &Matrix, v: &Matrix| scaled_similarities(t, v, tau).unwrap();
    let zs = model.logits(images, &classes, false).unwrap();
    model.load_adapter_tensors(tensors).unwrap();
    let f_t = model.encode_text(&classes, true).unwrap();
    let (f_v, _) = model.encode_image(images, true).unwrap();
    let (f_cut, _) = model.encode_image(cut, true).unwrap();
    let w = LossWeights::default();
    let loss = w.lambda1 * (ce(&sim(&f_t, &f_v), labels) + ce(&sim(&f_t, &f_cut), labels))
        + w.lambda2 * (kl(&sim(&f_t, &held.1), &zs) + kl(&sim(&held.0, &f_cut), &zs));
    (loss, (f_t, f_v))
}

fn gradient_fidelity() -> Outcome {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-4;
    let config = EncoderConfig {
        embed_dim: 8,
        layers: 1,
        heads: 2,
        ffn_hidden: 12,
        context_len: 4,
        classes: 2,
        ..EncoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut model = DualEncoder::init(config.clone(), &mut rng).unwrap();
    model.attach_adapters(AdapterMode::Orthogonal, Targets::BOTH, &mut rng).unwrap();
    let mut tensors: BTreeMap<String, Matrix> = model
        .adapter_tensors()
        .into_iter()
        .map(|(n, m)| (n, m.map(|_| 0.0)))
        .collect();
    for m in tensors.values_mut() {
        *m = Matrix::from_fn(m.rows(), m.cols(), |_, _| rng.random_range(-0.3..0.3));
    }
    let images: Vec<Matrix> = (0..4).map(|_| random(config.patch_count(), config.patch_dim, &mut rng)).collect();
    let labels = [0, 1, 1, 0];
    let cut: Vec<Matrix> = images
        .iter()
        .zip(labels)
        .map(|(img, l)| apply_cutout(img, &similarity_map(&model, img, l).unwrap(), 3).unwrap())
        .collect();

    model.load_adapter_tensors(&tensors).unwrap();
    let tape = Tape::new();
    let bound = model.bind(&tape, Track::Adapters).unwrap();
    let bundle = build_logits(&bound, &images, &cut, &[0, 1]).unwrap();
    let graph = total_loss(&bundle, &labels, LossWeights::default()).unwrap();
    let on_tape = graph.total.value().get(0, 0);
    let grads = tape.backward(graph.total).unwrap();
    let analytic: BTreeMap<String, Matrix> = bound.params().iter().map(|(n, v)| (n.clone(), grads.get(*v))).collect();
    drop(bound);

    // The oracle's own features at the evaluation point are the held constants.
    let placeholder = (Matrix::zeros(2, config.embed_dim), Matrix::zeros(4, config.embed_dim));
    let (_, held) = semi_loss(&mut model, &tensors, &images, &cut, &labels, &placeholder);
    let (at_point, _) = semi_loss(&mut model, &tensors, &images, &cut, &labels, &held);
    if (at_point - on_tape).abs() > 1e-10 {
        return Err(format!("oracle loss {at_point} differs from tape loss {on_tape}"));
    }

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = tensors.keys().cloned().collect();
    for name in &names {
        let g = analytic.get(name).ok_or(format!("no gradient for {name}"))?;
        for idx in 0..tensors[name].len() {
            let base = tensors[name].data()[idx];
            tensors.get_mut(name).unwrap().data_mut()[idx] = base + STEP;
            let (plus, _) = semi_loss(&mut model, &tensors, &images, &cut, &labels, &held);
            tensors.get_mut(name).unwrap().data_mut()[idx] = base - STEP;
            let (minus, _) = semi_loss(&mut model, &tensors, &images, &cut, &labels, &held);
            tensors.get_mut(name).unwrap().data_mut()[idx] = base;
            let fd = (plus - minus) / (2.0 * STEP);
            let a = g.data()[idx];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR));
            checked += 1;
        }
    }
    check(worst <= 1e-4, format!("{checked} skew parameters, max relative error {worst:.1e}"))
}

fn detach_contracts() -> Outcome {
    let (model, split) = fixture();
    let mut tuned = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    tuned.attach_adapters(AdapterMode::Orthogonal, Targets::BOTH, &mut rng).unwrap();
    let policy = CutoutPolicy::default();
    let mut min_live: f64 = f64::INFINITY;
    for step in 0..10 {
        let batch: Vec<_> = (0..4).map(|i| &split.train[(4 * step + i) % split.train.len()]).collect();
        let images: Vec<Matrix> = batch.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let k = policy.sample_k(&mut rng);
        let cut: Vec<Matrix> = batch
            .iter()
            .map(|s| apply_cutout(&s.image, &similarity_map(&model, &s.image, s.label).unwrap(), k).unwrap())
            .collect();
        let class_ids: Vec<usize> = split.base_ids.clone();
        let pos: Vec<usize> = labels.iter().map(|l| class_ids.iter().position(|c| c == l).unwrap()).collect();

        let tape = Tape::new();
        let bound = tuned.bind(&tape, Track::Adapters).unwrap();
        let bundle = build_logits(&bound, &images, &cut, &class_ids).unwrap();
        let graph = total_loss(&bundle, &pos, LossWeights::default()).unwrap();
        let kl = tape.backward(graph.kl).unwrap();
        let cutout_kl = tape.backward(graph.cutout_kl).unwrap();
        let total = tape.backward(graph.total).unwrap();
        let mut text_live: f64 = 0.0;
        let mut image_live: f64 = 0.0;
        let mut updated = BTreeMap::new();
        for (name, var) in bound.params() {
            if name.starts_with("image.") {
                let leak = kl.get(*var).max_abs();
                if leak != 0.0 {
                    return Err(format!("step {step}: KL reaches {name} ({leak:e})"));
                }
                image_live = image_live.max(cutout_kl.get(*var).max_abs());
            } else {
                let leak = cutout_kl.get(*var).max_abs();
                if leak != 0.0 {
                    return Err(format!("step {step}: cutout KL reaches {name} ({leak:e})"));
                }
                text_live = text_live.max(kl.get(*var).max_abs());
            }
            let mut w = var.value().clone();
            w.axpy(-0.05, &total.get(*var)).unwrap();
            updated.insert(name.clone(), w);
        }
        drop(bound);
        tuned.load_adapter_tensors(&updated).unwrap();
        // From the second step on both live branches carry gradient.
        if step > 0 {
            min_live = min_live.min(text_live).min(image_live);
        }
    }
    check(
        min_live > 0.0,
        format!("10 steps, blocked branches exactly 0, smallest live branch max-grad {min_live:.1e}"),
    )
}

fn hm_arithmetic() -> Outcome {
    let rows = [
        ("ImageNet", 78.10, 70.35, 74.02),
        ("Caltech101", 98.17, 94.03, 96.06),
        ("OxfordPets", 95.60, 97.70, 96.64),
        ("StanfordCars", 79.40, 73.87, 76.54),
        ("Flowers102", 97.60, 75.53, 85.16),
        ("Food101", 90.50, 91.17, 90.83),
        ("FGVCAircraft", 41.93, 36.87, 39.24),
        ("SUN397", 82.47, 79.33, 80.87),
        ("DTD", 82.40, 65.33, 72.88),
        ("EuroSAT", 93.27, 79.00, 85.54),
        ("UCF101", 86.33, 78.87, 82.43),
    ];
    let mut worst: f64 = 0.0;
    for (_, b, n, hm) in rows {
        worst = worst.max((harmonic_mean(b, n) - hm).abs());
    }
    check(
        worst <= 0.01 + 1e-9,
        format!("{} rows, max |HM - table| {worst:.4}", rows.len()),
    )
}

/// Brute-force top-k: cell `i` is cut when fewer than `k` cells outrank it.
fn oracle_cut(values: &[f64], k: usize) -> Vec<bool> {
    (0..values.len())
        .map(|i| {
            let above = (0..values.len())
                .filter(|&j| values[j] > values[i] || (values[j] == values[i] && j < i))
                .count();
            above < k
        })
        .collect()
}

fn cutout_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut maps = 0;
    for trial in 0..500 {
        let levels = if trial % 2 == 0 { 4 } else { 1000 };
        let grid = Matrix::from_fn(4, 4, |_, _| rng.random_range(0..levels) as f64 / levels as f64 * 2.0 - 1.0);
        let map = SimilarityMap::new(grid.clone());
        let image = Matrix::from_fn(16, 4, |_, _| rng.random_range(1.0..2.0));
        for k in 0..=16 {
            let cut = apply_cutout(&image, &map, k).map_err(|e| e.to_string())?;
            let expect = oracle_cut(grid.data(), k);
            let mut zeroed = 0;
            for (p, &should) in expect.iter().enumerate() {
                let row = cut.row(p);
                let is_zero = row.iter().all(|&v| v == 0.0);
                if is_zero != should {
                    return Err(format!("map {trial} k={k}: patch {p} zeroed={is_zero}, oracle {should}"));
                }
                if !is_zero && row.iter().zip(image.row(p)).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("map {trial} k={k}: kept patch {p} changed"));
                }
                zeroed += usize::from(is_zero);
            }
            if zeroed != k {
                return Err(format!("map {trial}: {zeroed} patches zeroed for k={k}"));
            }
        }
        maps += 1;
    }
    if apply_cutout(&Matrix::zeros(16, 4), &SimilarityMap::new(Matrix::zeros(4, 4)), 17).is_ok() {
        return Err("k beyond the patch count accepted".into());
    }

    let policy = CutoutPolicy::default();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let span = policy.k_max - policy.k_min + 1;
    let mut counts = vec![0usize; span];
    let draws = 10_000;
    for _ in 0..draws {
        let k = policy.sample_k(&mut rng);
        if !(policy.k_min..=policy.k_max).contains(&k) {
            return Err(format!("draw {k} outside [{}, {}]", policy.k_min, policy.k_max));
        }
        counts[k - policy.k_min] += 1;
    }
    let p = 1.0 / span as f64;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let worst = counts.iter().map(|&c| (c as f64 - mean).abs() / sigma).fold(0.0, f64::max);
    check(
        worst <= 3.0,
        format!("{maps} maps x 17 k values match the oracle; K counts {counts:?}, max {worst:.2} sigma"),
    )
}

fn merge_equivalence() -> Outcome {
    let (model, split) = fixture();
    let (tuned, _) = finetune(&model, &split, &short_run(AdapterMode::Orthogonal)).map_err(|e| e.to_string())?;
    let bytes = tuned.merged().to_container().unwrap().to_bytes();
    let merged = DualEncoder::from_container(&Container::from_bytes(&bytes)?).map_err(|e| e.to_string())?;
    let c = tuned.config();
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let images: Vec<Matrix> = (0..100).map(|_| random(c.patch_count(), c.patch_dim, &mut rng)).collect();
    let all: Vec<usize> = (0..c.classes).collect();
    let live = tuned.logits(&images, &all, true).unwrap();
    let folded = merged.logits(&images, &all, false).unwrap();
    let frozen = tuned.logits(&images, &all, false).unwrap();
    let diff = live.max_abs_diff(&folded).unwrap();
    let moved = live.max_abs_diff(&frozen).unwrap();
    check(
        diff <= 1e-9 && moved > 1e-6,
        format!("100 inputs, max |merged - live| {diff:.1e} (adapters move logits by {moved:.1e})"),
    )
}

fn end_to_end() -> Outcome {
    let seeds = 5;
    let mut zs_base = 0.0;
    let mut base = 0.0;
    let mut new_full = 0.0;
    let mut new_ablate = 0.0;
    let mut losses_drop = true;
    for seed in 0..seeds {
        let config = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let split = generate_with(&config.data, seed).map_err(|e| e.to_string())?;
        let (model, _) = pretrain(&config.encoder(), &split, &config.pretrain()).map_err(|e| e.to_string())?;
        zs_base += evaluate(&model, &split.base_test, &split.base_ids, false).unwrap();
        let full = config.finetune();
        let ablate = TrainConfig {
            weights: LossWeights { lambda2: 0.0, ..full.weights },
            ..full.clone()
        };
        for (train, is_full) in [(full, true), (ablate, false)] {
            let (tuned, rows) = finetune(&model, &split, &train).map_err(|e| e.to_string())?;
            let means = epoch_means(&rows);
            losses_drop &= means.last() < means.first();
            let new = evaluate(&tuned, &split.new_test, &split.new_ids, true).unwrap();
            if is_full {
                base += evaluate(&tuned, &split.base_test, &split.base_ids, true).unwrap();
                new_full += new;
            } else {
                new_ablate += new;
            }
        }
    }
    let n = seeds as f64;
    let (zs_base, base, new_full, new_ablate) = (zs_base / n, base / n, new_full / n, new_ablate / n);
    check(
        base >= zs_base && new_full >= new_ablate && losses_drop,
        format!(
            "5 seeds: base {base:.4} vs zero-shot {zs_base:.4}; new {new_full:.4} vs lambda2=0 {new_ablate:.4}; \
             loss falls in every run: {losses_drop}"
        ),
    )
}

fn determinism() -> Outcome {
    let (model, split) = fixture();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in 0..2 {
        let (_, rows) = finetune(&model, &split, &short_run(AdapterMode::Orthogonal)).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("metrics-{run}.csv"));
        write_metrics(&path, &rows).map_err(|e| e.to_string())?;
        files.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    let (_, other) = finetune(&model, &split, &TrainConfig { seed: 4, ..short_run(AdapterMode::Orthogonal) })
        .map_err(|e| e.to_string())?;
    let differs = metrics_csv(&other).into_bytes() != files[0];
    check(
        files[0] == files[1] && differs,
        format!("{} bytes identical across runs; another seed differs: {differs}", files[0].len()),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("orthogonality after finetuning", 5, orthogonality),
        ("hyperspherical energy invariance", 10, energy_invariance),
        ("cayley round trip", 2, round_trip),
        ("total-loss gradient fidelity", 30, gradient_fidelity),
        ("detach contracts", 10, detach_contracts),
        ("harmonic mean arithmetic", 1, hm_arithmetic),
        ("cutout correctness", 5, cutout_correctness),
        ("merge equivalence", 5, merge_equivalence),
        ("end-to-end direction", 300, end_to_end),
        ("determinism", 60, determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, budget, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let over = took > Duration::from_secs(budget);
        let (status, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("{d}; over the {budget} s budget")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {name} [{:.2} s / {budget} s]: {detail}", took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
