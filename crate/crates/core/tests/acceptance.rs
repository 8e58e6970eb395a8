//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Run with
//! `cargo test -p skelcompress --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skelcompress::compress::{compress_model, parse_plan, rank_sweep, CompressionPlan, RankDirective};
use skelcompress::data::{load_dataset, SkeletonSample};
use skelcompress::finetune::{evaluate, lr_at_epoch, TrainConfig};
use skelcompress::layers::{
    attention_backward, attention_forward, attention_taped, softmax_backward, softmax_rows, softmax_taped,
    AttentionHead, DenseLinear, Linear, LowRankLinear, MhsaBlock,
};
use skelcompress::linalg::{reconstruction_error, svd_default, truncate_to_factors, Matrix};
use skelcompress::model::{
    build_model, count_params, cross_entropy, load_model, LayerGroup, ModelConfig, SkeletonModel,
};

const BIN: &str = env!("CARGO_BIN_EXE_skelcompress");

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Naive triple-loop product, kept separate from the library's kernels.
fn naive_mul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|t| a.get(i, t) * b.get(t, j)).sum())
}

fn frobenius(a: &Matrix) -> f64 {
    a.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonality_defect(q: &Matrix) -> f64 {
    let qtq = naive_mul(&q.transpose(), q);
    max_abs_diff(&qtq, &Matrix::identity(q.cols()))
}

const SVD_SHAPES: [(usize, usize); 4] = [(4, 4), (8, 12), (12, 8), (1, 7)];

fn svd_suite() -> Vec<(usize, usize, Matrix)> {
    let mut out = Vec::new();
    for (si, &(r, c)) in SVD_SHAPES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + si as u64);
        for _ in 0..100 {
            out.push((r, c, random(r, c, &mut rng)));
        }
    }
    out
}

fn criterion_svd() -> Outcome {
    let suite = svd_suite();
    let start = Instant::now();
    let results =
        suite.iter().map(|(_, _, a)| svd_default(a)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut worst = 0.0f64;
    for ((r, c, a), s) in suite.iter().zip(&results) {
        check(s.u.shape() == (*r, *r) && s.vt.shape() == (*c, *c) && s.sigma.len() == *r.min(c), || {
            format!("{r}x{c}: bad factor shapes")
        })?;
        check(s.sigma.windows(2).all(|w| w[0] >= w[1]) && s.sigma.iter().all(|&x| x >= 0.0), || {
            format!("{r}x{c}: singular values not sorted non-negative")
        })?;
        let mut sigma = Matrix::zeros(*r, *c);
        for (i, &x) in s.sigma.iter().enumerate() {
            sigma.set(i, i, x);
        }
        let recon = naive_mul(&naive_mul(&s.u, &sigma), &s.vt);
        let defect =
            orthogonality_defect(&s.u).max(orthogonality_defect(&s.vt.transpose())).max(max_abs_diff(&recon, a));
        worst = worst.max(defect);
    }
    check(worst < 1e-9, || format!("max invariant defect {worst:e} >= 1e-9"))?;
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("400 matrices, max defect {worst:.2e}, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn criterion_eckart_young() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (_, _, a) in svd_suite() {
        let s = svd_default(&a).map_err(|e| e.to_string())?;
        let kmax = s.sigma.len();
        // k = 0: the empty truncation leaves all of A
        let all = s.sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((frobenius(&a) - all).abs());
        for k in 1..=kmax {
            let f = truncate_to_factors(&s, k).map_err(|e| e.to_string())?;
            let actual = frobenius(&a.sub(&naive_mul(&f.w1, &f.w2)).unwrap());
            let tail = s.sigma[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            let reported = reconstruction_error(&s, k).map_err(|e| e.to_string())?;
            worst = worst.max((actual - tail).abs()).max((reported - tail).abs());
            checked += 1;
        }
    }
    check(worst < 1e-9, || format!("max |error - tail| {worst:e}"))?;
    Ok(format!("{checked} (matrix, k) pairs, max deviation {worst:.2e}"))
}

fn criterion_param_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(216);
    let a = random(216, 216, &mut rng);
    let dense = Linear::from(DenseLinear::new(a.clone(), None).map_err(|e| e.to_string())?);
    let s = svd_default(&a).map_err(|e| e.to_string())?;
    let f = truncate_to_factors(&s, 3).map_err(|e| e.to_string())?;
    let factors = f.param_count();
    let low = Linear::LowRank(LowRankLinear::from_factors(f, None).map_err(|e| e.to_string())?);
    let (d, l) = (dense.param_count(), low.param_count());
    check(d == 46656 && l == 1296 && factors == 1296, || format!("dense {d}, low-rank {l}, factors {factors}"))?;
    Ok(format!("216x216 at k=3: {l} vs {d}"))
}

fn full_rank_plan(m: &SkeletonModel) -> CompressionPlan {
    let mut plan = CompressionPlan::identity();
    for g in LayerGroup::ALL {
        let k = m
            .layers()
            .iter()
            .filter(|l| l.group == g)
            .map(|l| l.layer.in_dim().min(l.layer.out_dim()))
            .min()
            .expect("every group has a layer");
        plan = plan.with(g, RankDirective::Rank(k));
    }
    plan
}

fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
        })
        .collect()
}

fn criterion_full_rank(model: &SkeletonModel, test: &[SkeletonSample]) -> Outcome {
    let (c, _) = compress_model(model, &full_rank_plan(model)).map_err(|e| e.to_string())?;
    check(c.layers().iter().all(|l| l.layer.rank().is_some()), || "some layer stayed dense".into())?;
    let a = model.forward(test).map_err(|e| e.to_string())?;
    let b = c.forward(test).map_err(|e| e.to_string())?;
    let diff = max_abs_diff(&a, &b);
    let changed = argmax_rows(&a).iter().zip(argmax_rows(&b)).filter(|(x, y)| **x != *y).count();
    check(test.len() == 480, || format!("expected 480 test samples, got {}", test.len()))?;
    check(diff <= 1e-8, || format!("max logit change {diff:e}"))?;
    check(changed == 0, || format!("{changed} predictions changed"))?;
    Ok(format!("{} samples, max logit change {diff:.2e}, 0 predictions changed", test.len()))
}

// ---- finite differences ----

const FD_STEP: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Central differences of `loss` with respect to every entry of `x`.
fn numeric_grad(x: &mut [f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = loss(x);
            x[i] = orig - FD_STEP;
            let down = loss(x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

fn weighted(out: &Matrix, r: &Matrix) -> f64 {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn with_data(shape: (usize, usize), data: &[f64]) -> Matrix {
    Matrix::new(shape.0, shape.1, data.to_vec()).unwrap()
}

fn fd_linear(layer: &Linear, rng: &mut ChaCha8Rng) -> f64 {
    let x = random(5, layer.in_dim(), rng);
    let r = random(5, layer.out_dim(), rng);
    let (_, mut tape) = layer.forward_taped(&x).unwrap();
    let g = layer.backward(&mut tape, &r).unwrap();
    let mut xd = x.data().to_vec();
    let mut err = worst(
        g.input.data(),
        &numeric_grad(&mut xd, |v| weighted(&layer.forward(&with_data(x.shape(), v)).unwrap(), &r)),
    );
    for (pi, gp) in g.params.iter().enumerate() {
        let mut probe = layer.clone();
        let mut p = probe.params()[pi].to_vec();
        let num = numeric_grad(&mut p, |v| {
            probe.params_mut()[pi].copy_from_slice(v);
            weighted(&probe.forward(&x).unwrap(), &r)
        });
        err = err.max(worst(gp.data(), &num));
    }
    err
}

fn fd_softmax(rng: &mut ChaCha8Rng) -> f64 {
    let a = random(4, 6, rng).scale(3.0);
    let r = random(4, 6, rng);
    let (_, mut tape) = softmax_taped(&a);
    let g = softmax_backward(&mut tape, &r).unwrap();
    let mut ad = a.data().to_vec();
    worst(g.data(), &numeric_grad(&mut ad, |v| weighted(&softmax_rows(&with_data(a.shape(), v)), &r)))
}

fn fd_attention(rng: &mut ChaCha8Rng) -> f64 {
    let (q, k, v) = (random(5, 3, rng), random(5, 3, rng), random(5, 4, rng));
    let r = random(5, 4, rng);
    let (_, mut tape) = attention_taped(&q, &k, &v).unwrap();
    let g = attention_backward(&mut tape, &r).unwrap();
    let mut qd = q.data().to_vec();
    let mut kd = k.data().to_vec();
    let mut vd = v.data().to_vec();
    let nq = numeric_grad(&mut qd, |x| weighted(&attention_forward(&with_data(q.shape(), x), &k, &v).unwrap(), &r));
    let nk = numeric_grad(&mut kd, |x| weighted(&attention_forward(&q, &with_data(k.shape(), x), &v).unwrap(), &r));
    let nv = numeric_grad(&mut vd, |x| weighted(&attention_forward(&q, &k, &with_data(v.shape(), x)).unwrap(), &r));
    worst(g.q.data(), &nq).max(worst(g.k.data(), &nk)).max(worst(g.v.data(), &nv))
}

fn dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear::from(DenseLinear::new(random(rows, cols, rng), Some(random(1, cols, rng).into_data())).unwrap())
}

fn low_rank(rows: usize, cols: usize, k: usize, rng: &mut ChaCha8Rng) -> Linear {
    Linear::LowRank(
        LowRankLinear::new(random(rows, k, rng), random(k, cols, rng), Some(random(1, cols, rng).into_data())).unwrap(),
    )
}

fn fd_mhsa(rng: &mut ChaCha8Rng) -> f64 {
    let d = 6;
    let heads = (0..2)
        .map(|h| AttentionHead {
            wq: if h == 0 { low_rank(d, 3, 1, rng) } else { dense(d, 3, rng) },
            wk: dense(d, 3, rng),
            wv: low_rank(d, 3, 2, rng),
        })
        .collect();
    let block = MhsaBlock::new(heads, dense(d, d, rng)).unwrap();
    let x = random(4, d, rng);
    let r = random(4, d, rng);
    let (_, mut tape) = block.forward_taped(&x).unwrap();
    let g = block.backward(&mut tape, &r).unwrap();
    let mut xd = x.data().to_vec();
    let mut err = worst(
        g.input.data(),
        &numeric_grad(&mut xd, |v| weighted(&block.forward(&with_data(x.shape(), v)).unwrap(), &r)),
    );
    for (pi, gp) in g.params.iter().enumerate() {
        let mut probe = block.clone();
        let mut p = probe.params()[pi].to_vec();
        let num = numeric_grad(&mut p, |v| {
            probe.params_mut()[pi].copy_from_slice(v);
            weighted(&probe.forward(&x).unwrap(), &r)
        });
        err = err.max(worst(gp.data(), &num));
    }
    err
}

fn fd_model(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = ModelConfig { joints: 2, frames: 3, d_model: 4, heads: 2, blocks: 2, classes: 3, seed: 5 };
    let base = build_model(&cfg).unwrap();
    let (model, _) = compress_model(&base, &parse_plan("v=1,o=2").unwrap()).unwrap();
    let batch: Vec<SkeletonSample> =
        (0..3).map(|i| SkeletonSample::new(3, 2, random(1, 18, rng).into_data(), i % 3).unwrap()).collect();
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let (logits, mut tape) = model.forward_taped(&batch).unwrap();
    let (_, grad) = cross_entropy(&logits, &labels).unwrap();
    let analytic = model.backward(&mut tape, &grad).unwrap();
    let mut err = 0.0f64;
    for (pi, gp) in analytic.iter().enumerate() {
        let mut probe = model.clone();
        let mut p = probe.params()[pi].to_vec();
        let num = numeric_grad(&mut p, |v| {
            probe.params_mut()[pi].copy_from_slice(v);
            cross_entropy(&probe.forward(&batch).unwrap(), &labels).unwrap().0
        });
        err = err.max(worst(gp.data(), &num));
    }
    err
}

fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cases = [
        ("dense", fd_linear(&dense(5, 4, &mut rng), &mut rng), 1e-5),
        ("low-rank", fd_linear(&low_rank(5, 4, 2, &mut rng), &mut rng), 1e-5),
        ("softmax", fd_softmax(&mut rng), 1e-5),
        ("attention", fd_attention(&mut rng), 1e-5),
        ("mhsa", fd_mhsa(&mut rng), 1e-5),
        ("model", fd_model(&mut rng), 1e-4),
    ];
    let elapsed = start.elapsed();
    let summary = cases.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    for (name, err, tol) in cases {
        check(err < tol, || format!("{name}: relative error {err:e} >= {tol:e}"))?;
    }
    check(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("{summary}; {:.1} s", elapsed.as_secs_f64()))
}

fn criterion_lr_schedule() -> Outcome {
    let cfg = TrainConfig {
        base_lr: 0.0025,
        decay_factor: 0.1,
        milestones: vec![5, 25, 45, 65, 85],
        warmup_epochs: 0,
        epochs: 105,
        ..TrainConfig::default()
    };
    let expected = |e: usize| match e {
        0..=4 => 0.0025,
        5..=24 => 0.00025,
        25..=44 => 0.000025,
        45..=64 => 0.0000025,
        65..=84 => 0.00000025,
        _ => 0.000000025,
    };
    for e in 0..105 {
        let got = lr_at_epoch(&cfg, e).map_err(|err| err.to_string())?;
        check(got.to_bits() == f64::to_bits(expected(e)), || format!("epoch {e}: {got:e} != {:e}", expected(e)))?;
    }
    Ok("105 epochs bit-exact".into())
}

// ---- pipeline ----

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr).trim()))
    }
}

const PIPELINE_FILES: [&str; 9] = [
    "data/train.lrsk",
    "data/test.lrsk",
    "base/model.lrts",
    "base/history.csv",
    "compressed/model.lrts",
    "compressed/report.csv",
    "sweep/sweep.csv",
    "tuned/model.lrts",
    "tuned/history.csv",
];

/// gen, train, compress with `v=1`, sweep and fine-tune, all at default settings.
fn pipeline(root: &Path) -> Result<Duration, String> {
    let s = |p: &str| root.join(p).to_str().unwrap().to_string();
    let start = Instant::now();
    cli(&["gen", "--out", &s("data")])?;
    cli(&["train", "--data", &s("data"), "--out", &s("base")])?;
    cli(&["compress", "--weights", &s("base/model.lrts"), "--plan", "v=1", "--out", &s("compressed")])?;
    let elapsed = start.elapsed();
    fs::write(root.join("grid.txt"), "full\nv=3\nv=2\nv=1\n").map_err(|e| e.to_string())?;
    cli(&[
        "sweep",
        "--weights",
        &s("base/model.lrts"),
        "--data",
        &s("data"),
        "--grid",
        &s("grid.txt"),
        "--out",
        &s("sweep"),
    ])?;
    let resumed = Instant::now();
    cli(&["finetune", "--weights", &s("compressed/model.lrts"), "--data", &s("data"), "--out", &s("tuned")])?;
    Ok(elapsed + resumed.elapsed())
}

fn last_top1(history: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(history).map_err(|e| e.to_string())?;
    let last = text.lines().last().ok_or("empty history")?;
    last.rsplit(',').next().unwrap().parse().map_err(|e| format!("{e}"))
}

fn criterion_recovery(root: &Path, elapsed: Duration) -> Outcome {
    let test = load_dataset(root.join("data/test.lrsk")).map_err(|e| e.to_string())?;
    let base = load_model(root.join("base/model.lrts")).map_err(|e| e.to_string())?;
    let compressed = load_model(root.join("compressed/model.lrts")).map_err(|e| e.to_string())?;
    let baseline = evaluate(&base, &test).map_err(|e| e.to_string())?;
    let dropped = evaluate(&compressed, &test).map_err(|e| e.to_string())?;
    let recovered = last_top1(&root.join("tuned/history.csv"))?;
    let detail =
        format!("baseline {baseline:.4}, v=1 {dropped:.4}, fine-tuned {recovered:.4}, {:.0} s", elapsed.as_secs_f64());
    check(baseline >= 0.95, || format!("baseline below 0.95: {detail}"))?;
    check(dropped < baseline, || format!("compression did not lower accuracy: {detail}"))?;
    check((baseline - recovered).abs() <= 0.02, || format!("not recovered: {detail}"))?;
    check(elapsed < Duration::from_secs(15 * 60), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn criterion_determinism(a: &Path, b: &Path) -> Outcome {
    for f in PIPELINE_FILES {
        let (x, y) = (fs::read(a.join(f)).map_err(|e| e.to_string())?, fs::read(b.join(f)).map_err(|e| e.to_string())?);
        check(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical", PIPELINE_FILES.len()))
}

fn criterion_rank_sweep(model: &SkeletonModel, test: &[SkeletonSample]) -> Outcome {
    let full = full_rank_plan(model);
    let uniform = |k: usize| {
        LayerGroup::ALL.into_iter().fold(CompressionPlan::identity(), |p, g| p.with(g, RankDirective::Rank(k)))
    };
    let grid = [uniform(1), uniform(2), uniform(3), full];
    let mut prev: Option<Vec<f64>> = None;
    for plan in &grid {
        let (c, report) = compress_model(model, plan).map_err(|e| e.to_string())?;
        check(report.params_after == count_params(&c), || {
            format!("{plan}: report {} vs recount {}", report.params_after, count_params(&c))
        })?;
        check(report.params_before == count_params(model), || format!("{plan}: params_before mismatch"))?;
        let errs: Vec<f64> = report.layers.iter().map(|l| l.recon_fro).collect();
        if let Some(p) = &prev {
            for ((l, now), before) in report.layers.iter().zip(&errs).zip(p) {
                check(now <= before, || format!("{}: error rose from {before:e} to {now:e} at {plan}", l.name))?;
            }
        }
        prev = Some(errs);
    }
    let final_max = prev.unwrap().into_iter().fold(0.0, f64::max);
    check(final_max < 1e-9, || format!("full-rank error {final_max:e}"))?;
    let rows = rank_sweep(model, test, &grid).map_err(|e| e.to_string())?;
    for (row, plan) in rows.iter().zip(&grid) {
        let (c, _) = compress_model(model, plan).map_err(|e| e.to_string())?;
        check(row.params == count_params(&c), || {
            format!("sweep row {plan}: params {} vs {}", row.params, count_params(&c))
        })?;
    }
    Ok(format!("ranks 1,2,3,full over {} layers", model.layers().len()))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1 SVD correctness suite", criterion_svd()),
        ("2 Eckart-Young consistency", criterion_eckart_young()),
        ("3 parameter formula (216x216, k=3)", criterion_param_formula()),
        ("5 gradient suite", criterion_gradients()),
        ("7 LR schedule exactness", criterion_lr_schedule()),
    ];

    let runs = tempfile::tempdir().expect("temp dir");
    let (a, b) = (runs.path().join("a"), runs.path().join("b"));
    let first = pipeline(&a);
    let second = pipeline(&b);
    let trained = first.as_ref().map_err(Clone::clone).and_then(|_| {
        let m = load_model(a.join("base/model.lrts")).map_err(|e| e.to_string())?;
        let t = load_dataset(a.join("data/test.lrsk")).map_err(|e| e.to_string())?;
        Ok((m, t))
    });
    results.push((
        "4 full-rank functional equivalence",
        trained.as_ref().map_err(Clone::clone).and_then(|(m, t)| criterion_full_rank(m, t)),
    ));
    results.push(("6 recovery experiment", first.clone().and_then(|d| criterion_recovery(&a, d))));
    results.push(("8 pipeline determinism", first.and(second).and_then(|_| criterion_determinism(&a, &b))));
    results.push((
        "9 rank-sweep monotonicity",
        trained.as_ref().map_err(Clone::clone).and_then(|(m, t)| criterion_rank_sweep(m, t)),
    ));

    results.sort_by_key(|(name, _)| name.split(' ').next().unwrap().parse::<u32>().unwrap());
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
