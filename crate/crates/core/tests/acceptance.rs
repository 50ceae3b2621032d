//! End-to-end acceptance checks on the B5-5step synthetic benchmark.
//!
//! Runs as a plain binary (`harness = false`) so each criterion prints one
//! PASS/FAIL line under `cargo test`. Exits non-zero if any criterion fails.

#![allow(clippy::needless_range_loop)]

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cilab::analysis::{
    accuracy, analyze_run, feature_shift_export, retrain_classifier_full, AnalysisParams, Perturbation,
};
use cilab::cil::{
    run_from_base, train_base, train_oracle, Algorithm, Dataset, Hyper, IncrementalSplit, Part, StageContext,
    StageModelSet,
};
use cilab::cli::{self, ExperimentConfig, Verbosity};
use cilab::nn::{gradient_check, ArchSpec, DistillTerm, FeatureExtractor, Head, HeadKind, HeadSpec, LossSpec, Network};
use cilab::numeric::{Matrix, RngStream};
use cilab::repsim::{cka_full, cka_unbiased, minibatch_cka, tsne_embed, TsneParams};
use cilab::Result;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// `y = x·W + σ·noise`, so the pair has a non-trivial similarity.
fn related(x: &Matrix, cols: usize, sigma: f64, rng: &mut RngStream) -> Matrix {
    let w = random(x.cols(), cols, rng);
    Matrix::from_fn(x.rows(), cols, |i, j| {
        (0..x.cols()).map(|k| x.get(i, k) * w.get(k, j)).sum::<f64>() + sigma * rng.normal()
    })
}

/// CKA written out from the definitions with plain loops.
fn cka_by_definition(x: &Matrix, y: &Matrix) -> f64 {
    let n = x.rows();
    let gram = |m: &Matrix| {
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                g[i][j] = (0..m.cols()).map(|k| m.get(i, k) * m.get(j, k)).sum();
            }
        }
        g
    };
    let center = |g: Vec<Vec<f64>>| {
        let row: Vec<f64> = g.iter().map(|r| r.iter().sum::<f64>() / n as f64).collect();
        let all = row.iter().sum::<f64>() / n as f64;
        let mut c = g;
        for i in 0..n {
            for j in 0..n {
                c[i][j] += all - row[i] - row[j];
            }
        }
        c
    };
    let (k, l) = (center(gram(x)), center(gram(y)));
    let hsic = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += a[i][j] * b[j][i];
            }
        }
        s / ((n - 1) as f64).powi(2)
    };
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

fn criterion_1() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut symmetric = true;
    for seed in 0..200u64 {
        let mut rng = RngStream::new(seed).derive("cka-suite");
        let n = 10 + rng.below(30);
        let x = random(n, 2 + rng.below(10), &mut rng);
        let y = if seed % 2 == 0 {
            related(&x, 1 + rng.below(8), 1.0, &mut rng)
        } else {
            random(n, 1 + rng.below(8), &mut rng)
        };
        let v = cka_full(&x, &y)?;
        worst = worst.max((cka_full(&x, &x)? - 1.0).abs());
        let mut cols: Vec<usize> = (0..x.cols()).collect();
        rng.shuffle(&mut cols);
        let xp = Matrix::from_fn(n, x.cols(), |i, j| x.get(i, cols[j]));
        worst = worst.max((cka_full(&xp, &y)? - v).abs());
        for c in [1e-3, 1e3] {
            worst = worst.max((cka_full(&x.scale(c), &y)? - v).abs());
        }
        symmetric &= cka_full(&y, &x)? == v;
        worst = worst.max((cka_by_definition(&x, &y) - v).abs());
    }
    outcome(
        worst <= 1e-10 && symmetric,
        format!("max deviation {worst:.2e} over 200 pairs, symmetry exact: {symmetric}"),
    )
}

fn criterion_2() -> Result<Outcome> {
    let mut worst_k1: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = RngStream::new(seed).derive("minibatch-k1");
        let n = 8 + rng.below(56);
        let x = random(n, 6, &mut rng);
        let y = related(&x, 4, 2.0, &mut rng);
        let mb = minibatch_cka(&x, &y, n, 1, &mut rng)?;
        worst_k1 = worst_k1.max((mb - cka_unbiased(&x, &y)?).abs());
    }
    let mut worst_conv: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = RngStream::new(seed).derive("minibatch-512");
        let x = random(512, 16, &mut rng);
        let y = related(&x, 8, 3.0, &mut rng);
        let whole = minibatch_cka(&x, &y, 512, 1, &mut rng)?;
        let batched = minibatch_cka(&x, &y, 64, 10, &mut rng)?;
        worst_conv = worst_conv.max((batched - whole).abs());
    }
    outcome(
        worst_k1 <= 1e-12 && worst_conv <= 0.02,
        format!("k=1 vs unbiased {worst_k1:.2e} (50 pairs); 10×64 vs k=1 {worst_conv:.4} (512 rows)"),
    )
}

fn criterion_3() -> Result<Outcome> {
    let arch = ArchSpec {
        input_dim: 6,
        stages: 2,
        width: 8,
        layers_per_stage: 2,
        feature_dim: 5,
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, kind, distill) in [
        ("masked CE", HeadKind::Linear, false),
        ("distillation", HeadKind::Linear, true),
        ("cosine head", HeadKind::Cosine, true),
    ] {
        let mut rng = RngStream::new(11).derive(name);
        let ext = FeatureExtractor::new(&arch, &mut rng)?;
        let spec = HeadSpec {
            kind,
            scale: 4.0,
            learn_scale: kind == HeadKind::Cosine,
            ..HeadSpec::default()
        };
        let head = Head::new(&spec, 5, arch.feature_dim, &mut rng);
        let mut net = Network::new(ext, head)?;
        let x = random(9, arch.input_dim, &mut rng);
        let labels: Vec<usize> = (0..9).map(|i| 1 + i % 4).collect();
        let teacher = random(9, 3, &mut rng);
        let loss = LossSpec {
            labels: &labels,
            active: &[1, 2, 3, 4],
            distill: distill.then_some(DistillTerm {
                teacher_logits: &teacher,
                temperature: 2.0,
                weight: 1.5,
            }),
        };
        let r = gradient_check(&net, &x, &loss, 1e-4)?;
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
        // The same loss on a two-branch model with a shared stem.
        net.split_stem(1)?;
        let fresh = net.branches()[0].fresh_like(&mut rng);
        net.push_branch(fresh)?;
        let r = gradient_check(&net, &x, &loss, 1e-4)?;
        worst = worst.max(r.max_relative_error);
        checked += r.checked;
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {checked} parameters"),
    )
}

/// One seed of the benchmark: data, split and every learner's stage models.
struct SeedRuns {
    seed: u64,
    data: Dataset,
    split: IncrementalSplit,
    sets: Vec<(String, StageModelSet)>,
    oracle: Network,
    perturbed: Dataset,
    perturbed_sets: Vec<(String, StageModelSet)>,
}

fn benchmark_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::default().with_seed(seed)
}

fn train_seed(seed: u64) -> Result<SeedRuns> {
    let cfg = benchmark_config(seed);
    let (data, split) = cfg.build_clean()?;
    let hyper = cfg.hyper();
    let ctx = StageContext {
        data: &data,
        split: &split,
        hyper: &hyper,
        seed,
    };
    let base = train_base(&ctx)?;
    let mut sets = Vec::new();
    let variants: [(&str, Algorithm, f64, usize); 7] = [
        ("naive", Algorithm::Naive, hyper.distill_lambda, hyper.branch_stage),
        ("distill100", Algorithm::Distill, 100.0, hyper.branch_stage),
        ("der", Algorithm::Der, hyper.distill_lambda, hyper.branch_stage),
        ("pder1", Algorithm::Pder, hyper.distill_lambda, 1),
        ("pder2", Algorithm::Pder, hyper.distill_lambda, 2),
        ("pder3", Algorithm::Pder, hyper.distill_lambda, 3),
        ("exploit", Algorithm::Exploit, hyper.distill_lambda, hyper.branch_stage),
    ];
    for (name, alg, lambda, branch) in variants {
        let h = Hyper {
            distill_lambda: lambda,
            branch_stage: branch,
            ..hyper.clone()
        };
        let ctx = StageContext { hyper: &h, ..ctx };
        sets.push((name.to_string(), run_from_base(alg, &ctx, base.clone())?));
    }
    let oracle = train_oracle(&ctx, split.num_stages() - 1)?;

    let mut pcfg = cfg.clone();
    pcfg.analysis.perturbation = Perturbation::default_schedule();
    let perturbed = pcfg.apply_perturbation(&data, &split)?;
    let pctx = StageContext {
        data: &perturbed,
        ..ctx
    };
    // Stage 0 is clean, so the base model is shared with the clean runs.
    let mut perturbed_sets = Vec::new();
    for (name, alg, lambda) in [("der", Algorithm::Der, 1.0), ("distill100", Algorithm::Distill, 100.0)] {
        let h = Hyper {
            distill_lambda: lambda,
            ..hyper.clone()
        };
        let c = StageContext { hyper: &h, ..pctx };
        perturbed_sets.push((name.to_string(), run_from_base(alg, &c, base.clone())?));
    }
    Ok(SeedRuns {
        seed,
        data,
        split,
        sets,
        oracle,
        perturbed,
        perturbed_sets,
    })
}

fn full_accuracy(net: &Network, data: &Dataset, split: &IncrementalSplit) -> Result<f64> {
    accuracy(net, data, split, &data.indices(split.class_order(), Part::Val))
}

/// `Acc(M′_j, D)` and `Acc(M′_j, Dᵢ)` for the requested stages.
fn retrained(
    set: &StageModelSet,
    stages: &[usize],
    data: &Dataset,
    split: &IncrementalSplit,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let p = AnalysisParams::default();
    stages
        .iter()
        .map(|&j| {
            let m = retrain_classifier_full(set.snapshot(j)?, data, split, &p.retrain, p.retrain_seed)?;
            let full = full_accuracy(&m.network, data, split)?;
            let subsets = (0..split.num_stages())
                .map(|i| accuracy(&m.network, data, split, &split.stage_indices(data, i, Part::Val)))
                .collect::<Result<Vec<_>>>()?;
            Ok((full, subsets))
        })
        .collect()
}

/// Per-seed numbers behind criteria 5 to 8.
struct SeedMetrics {
    seed: u64,
    /// (method, Acc(M′₀,D), Acc(M′₅,D), macs of the final model)
    methods: Vec<(String, f64, f64, u64)>,
    oracle_acc: f64,
    naive_subsets: Vec<Vec<f64>>,
    perturbed_delta_der: f64,
    perturbed_delta_distill: f64,
}

impl SeedMetrics {
    fn get(&self, name: &str) -> &(String, f64, f64, u64) {
        self.methods.iter().find(|m| m.0 == name).expect("method evaluated")
    }

    fn delta(&self, name: &str) -> f64 {
        let m = self.get(name);
        m.2 - m.1
    }
}

fn evaluate_seed(r: &SeedRuns) -> Result<SeedMetrics> {
    let last = r.split.num_stages() - 1;
    let mut methods = Vec::new();
    let mut naive_subsets = Vec::new();
    for (name, set) in &r.sets {
        if name == "naive" {
            let all: Vec<usize> = (0..=last).collect();
            let rows = retrained(set, &all, &r.data, &r.split)?;
            naive_subsets = rows.iter().map(|(_, s)| s.clone()).collect();
            methods.push((name.clone(), rows[0].0, rows[last].0, set.snapshot(last)?.network.macs()));
        } else {
            let rows = retrained(set, &[0, last], &r.data, &r.split)?;
            methods.push((name.clone(), rows[0].0, rows[1].0, set.snapshot(last)?.network.macs()));
        }
    }
    let oracle_set = StageModelSet::from_networks(Algorithm::Oracle, vec![r.oracle.clone()], vec![]);
    let oracle_acc = retrained(&oracle_set, &[0], &r.data, &r.split)?[0].0;
    let mut pd = Vec::new();
    for (_, set) in &r.perturbed_sets {
        let rows = retrained(set, &[0, last], &r.perturbed, &r.split)?;
        pd.push(rows[1].0 - rows[0].0);
    }
    Ok(SeedMetrics {
        seed: r.seed,
        methods,
        oracle_acc,
        naive_subsets,
        perturbed_delta_der: pd[0],
        perturbed_delta_distill: pd[1],
    })
}

fn criterion_4(runs: &[SeedRuns]) -> Result<Outcome> {
    let r = &runs[0];
    let set = &r.sets.iter().find(|(n, _)| n == "exploit").expect("exploit run").1;
    let d0 = set.snapshot(0)?.network.branch_digest(0);
    let digests_equal = set.snapshots().iter().all(|s| s.network.branch_digest(0) == d0);
    let analysis = analyze_run(set, &r.data, &r.split, &AnalysisParams::default())?;
    let last = analysis.reports.last().expect("stages");
    let cka_dev = last.cka_curve.iter().map(|(_, v)| (v - 1.0).abs()).fold(0.0, f64::max);
    let deltas_zero = analysis.reports.iter().all(|rep| rep.delta == 0.0);
    outcome(
        digests_equal && cka_dev <= 1e-10 && deltas_zero && !last.cka_curve.is_empty(),
        format!(
            "F0 digest constant: {digests_equal}; max |CKA-1| {cka_dev:.1e} over {} taps; all deltas exactly 0: {deltas_zero}",
            last.cka_curve.len()
        ),
    )
}

fn criterion_5(m: &[SeedMetrics]) -> Result<Outcome> {
    let mut lines = Vec::new();
    let mut pass = true;
    for s in m {
        let naive = s.delta("naive");
        let distill = s.delta("distill100");
        let der = s.delta("der");
        let pder = s.delta("pder3");
        let best_other = s.methods.iter().map(|x| x.2).fold(f64::MIN, f64::max);
        let ok = [
            naive <= -3.0,
            distill.abs() <= 2.0,
            der >= 3.0,
            pder >= 3.0,
            s.oracle_acc >= best_other,
        ];
        pass &= ok.iter().all(|&b| b);
        lines.push(format!(
            "seed {}: naive {naive:+.1}{} distill100 {distill:+.1}{} der {der:+.1}{} pder3 {pder:+.1}{} oracle {:.1} vs best {best_other:.1}{}",
            s.seed,
            mark(ok[0]),
            mark(ok[1]),
            mark(ok[2]),
            mark(ok[3]),
            s.oracle_acc,
            mark(ok[4]),
        ));
    }
    outcome(pass, lines.join("; "))
}

fn mark(ok: bool) -> &'static str {
    if ok {
        ""
    } else {
        "(x)"
    }
}

fn criterion_6(m: &[SeedMetrics]) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in m {
        // rows are stages j, columns subsets i
        let n = s.naive_subsets.len();
        let peaks = (1..n)
            .filter(|&i| {
                let best = (0..n).map(|j| s.naive_subsets[j][i]).fold(f64::MIN, f64::max);
                s.naive_subsets[i][i] >= best
            })
            .count();
        pass &= peaks >= 4;
        parts.push(format!("seed {} {peaks}/{}", s.seed, n - 1));
    }
    outcome(pass, format!("subsets peaking at j = i: {}", parts.join(", ")))
}

fn criterion_7(m: &[SeedMetrics]) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in m {
        let der = s.get("der").2;
        let p: Vec<&(String, f64, f64, u64)> = ["pder1", "pder2", "pder3"].iter().map(|n| s.get(n)).collect();
        let macs_down = p[0].3 > p[1].3 && p[1].3 > p[2].3 && s.get("der").3 > p[0].3;
        let gaps: Vec<f64> = p.iter().map(|x| der - x.2).collect();
        let close = gaps.iter().all(|g| g.abs() <= 2.0);
        pass &= macs_down && close;
        parts.push(format!(
            "seed {}: MACs {}/{}/{} (DER {}) decreasing {macs_down}; DER-pDER gaps {:.1}/{:.1}/{:.1}{}",
            s.seed,
            p[0].3,
            p[1].3,
            p[2].3,
            s.get("der").3,
            gaps[0],
            gaps[1],
            gaps[2],
            mark(close)
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_8(m: &[SeedMetrics]) -> Result<Outcome> {
    let mut pass = true;
    let mut parts = Vec::new();
    for s in m {
        let gap = s.perturbed_delta_der - s.perturbed_delta_distill;
        pass &= gap >= 3.0;
        parts.push(format!(
            "seed {}: DER {:+.1} distill100 {:+.1} gap {gap:.1}",
            s.seed, s.perturbed_delta_der, s.perturbed_delta_distill
        ));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_9() -> Result<Outcome> {
    let tmp = std::env::temp_dir().join(format!("cilab-acceptance-{}", std::process::id()));
    let cfg = benchmark_config(0);
    let quiet = Verbosity { quiet: true };
    let mut files = Vec::new();
    for d in ["a", "b"] {
        let dir = tmp.join(d);
        let _ = std::fs::remove_dir_all(&dir);
        cli::run(&cfg, &dir, quiet)?;
        cli::analyze(&dir, None, quiet)?;
        let out = dir.join(cli::ANALYSIS_DIR);
        files.push(
            ["stage_report.csv", "cka.csv", "tsne.csv"]
                .iter()
                .map(|f| std::fs::read(out.join(f)).map_err(|e| cilab::Error::io(out.join(f), e)))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let _ = std::fs::remove_dir_all(&tmp);
    let same = files[0] == files[1];
    let bytes: usize = files[0].iter().map(Vec::len).sum();
    outcome(same, format!("two naive B5-5step runs, {bytes} CSV bytes, identical: {same}"))
}

fn criterion_10(runs: &[SeedRuns]) -> Result<Outcome> {
    let p = AnalysisParams::default();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let f0 = r.sets[0].1.snapshot(0)?.network.branch_extractor(0)?;
        let mut dist = Vec::new();
        for name in ["exploit", "naive"] {
            let set = &r.sets.iter().find(|(n, _)| n == name).expect("run").1;
            let last = set.latest().expect("stages").network.branch_extractor(0)?;
            let mut rng = RngStream::new(p.shift_seed).derive(&format!("seed{}", r.seed));
            let shift =
                feature_shift_export(&f0, &last, &r.data, &r.split, None, p.shift_classes, p.shift_per_class, &mut rng)?;
            let tp = TsneParams::default()
                .with_perplexity(p.tsne_perplexity)
                .with_iterations(p.tsne_iterations);
            let t = tsne_embed(&shift.features, &tp, &mut RngStream::new(p.tsne_seed + r.seed))?;
            pass &= t.final_kl < t.initial_kl && shift.features.rows() == 200;
            dist.push(shift.mean_paired_distance());
        }
        pass &= dist[0] == 0.0 && dist[1] > 0.0;
        parts.push(format!("seed {}: exploit {} naive {:.3}", r.seed, dist[0], dist[1]));
    }
    outcome(pass, format!("KL decreased on all 200-row exports; paired distances {}", parts.join(", ")))
}

fn report(id: usize, limit: Option<Duration>, f: impl FnOnce() -> Result<Outcome>) -> bool {
    let t = Instant::now();
    let r = f();
    let elapsed = t.elapsed();
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let (pass, detail) = match r {
        Ok(o) => (o.pass && in_time, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let budget = limit.map_or(String::new(), |l| format!(" / budget {:.0}s", l.as_secs_f64()));
    println!(
        "criterion {id:>2}: {} [{:.1}s{budget}] {detail}",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    pass
}

fn main() -> ExitCode {
    // `cargo test -- --list` and name filters come through here too.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let secs = |s| Some(Duration::from_secs(s));
    let mut results = vec![
        report(1, secs(10), criterion_1),
        report(2, secs(30), criterion_2),
        report(3, secs(30), criterion_3),
    ];

    let t = Instant::now();
    let runs: Result<Vec<SeedRuns>> = SEEDS.iter().map(|&s| train_seed(s)).collect();
    let metrics = runs
        .as_ref()
        .map_err(|e| e.to_string())
        .and_then(|rs| rs.iter().map(evaluate_seed).collect::<Result<Vec<_>>>().map_err(|e| e.to_string()));
    let shared = t.elapsed();
    println!("(trained and evaluated seeds 0-4 in {:.1}s)", shared.as_secs_f64());
    let failed = |e: &String| -> Result<Outcome> { outcome(false, format!("benchmark runs failed: {e}")) };

    results.push(report(4, secs(180), || match &runs {
        Ok(r) => criterion_4(r),
        Err(e) => failed(&e.to_string()),
    }));
    // Criterion 5 owns the shared training time in its budget.
    let t5 = Instant::now();
    let five = match &metrics {
        Ok(m) => criterion_5(m),
        Err(e) => failed(e),
    };
    let five_time = shared + t5.elapsed();
    results.push(report(5, None, || {
        let mut o = five?;
        if five_time > Duration::from_secs(20 * 60) {
            o.pass = false;
        }
        o.detail = format!("(with training {:.0}s / budget 1200s) {}", five_time.as_secs_f64(), o.detail);
        Ok(o)
    }));
    results.push(report(6, None, || metrics.as_ref().map_err(|e| e.clone()).map_or_else(|e| failed(&e), |m| criterion_6(m))));
    results.push(report(7, None, || metrics.as_ref().map_err(|e| e.clone()).map_or_else(|e| failed(&e), |m| criterion_7(m))));
    results.push(report(8, None, || metrics.as_ref().map_err(|e| e.clone()).map_or_else(|e| failed(&e), |m| criterion_8(m))));
    results.push(report(9, None, criterion_9));
    results.push(report(10, None, || match &runs {
        Ok(r) => criterion_10(r),
        Err(e) => failed(&e.to_string()),
    }));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed == results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
