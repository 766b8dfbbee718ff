//! Acceptance criteria, run in order in one test so their runtime limits
//! are measured without interference. Each criterion writes one PASS/FAIL
//! line straight to stdout (visible without `--nocapture`).

mod gradcheck;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rustfft::num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use cogload_core::autodiff::{Graph, Tensor};
use cogload_core::dsp::{design_bandpass, design_notch, BiquadCascade};
use cogload_core::experiments::{
    self, load_dataset, load_run, run_folds, write_run, RunConfig, RunSummary, NOISE_FRACTIONS,
};
use cogload_core::model::{fuse_with_gate, orthogonality_loss};
use cogload_core::pipeline::Mask;
use cogload_core::spectral::{band_power_simpson, simpson_integral, welch_psd};
use cogload_core::topomap::{build_multispectral_map, fit_rbf, jet, render_band, MapValueOptions, GRID};
use cogload_core::{BandPowers, ElectrodeLayout, FrequencyBand};

const FS: f64 = 256.0;

// Regression values of the seeded desk-scale run (6 subjects x 40
// segments, 30 epochs, seed 0), pinned from its first run.
// Five folds are perfect; S02 has a single false positive (20/19/1/0).
const E2E_ACCURACY: f64 = (5.0 + 39.0 / 40.0) / 6.0;
const E2E_F1: f64 = (5.0 + 40.0 / 41.0) / 6.0;
const REGRESSION_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Runs one criterion and reports it; returns whether it passed.
fn criterion(id: &str, title: &str, limit: Option<Duration>, body: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(body));
    let elapsed = start.elapsed();
    let outcome = match outcome {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    };
    let outcome = match (outcome, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {:.1} s, limit {} s", elapsed.as_secs_f64(), l.as_secs())),
        (o, _) => o,
    };
    let secs = elapsed.as_secs_f64();
    match &outcome {
        Ok(detail) => report(&format!("PASS {id} {title}: {detail} [{secs:.1} s]")),
        Err(detail) => report(&format!("FAIL {id} {title}: {detail} [{secs:.1} s]")),
    }
    outcome.is_ok()
}

/// Transfer function evaluated directly from the section coefficients.
fn oracle_gain(c: &BiquadCascade, f: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / c.sample_rate();
    let z1 = Complex64::from_polar(1.0, -w);
    let z2 = z1 * z1;
    c.sections()
        .iter()
        .map(|s| (s.b0 + s.b1 * z1 + s.b2 * z2) / (1.0 + s.a1 * z1 + s.a2 * z2))
        .product::<Complex64>()
        .norm()
}

fn dsp_suite() -> Outcome {
    let notch = design_notch(60.0, 30.0, FS).map_err(|e| e.to_string())?;
    let (g60, g10) = (oracle_gain(&notch, 60.0), oracle_gain(&notch, 10.0));
    ensure(g60 < 0.01, || format!("|H(60)| = {g60}"))?;
    ensure(g10 > 0.99, || format!("|H(10)| = {g10}"))?;
    for f in [0.0, 10.0, 59.0, 60.0, 61.0, 100.0] {
        let (a, b) = (notch.magnitude(f), oracle_gain(&notch, f));
        ensure((a - b).abs() < 1e-12, || format!("notch response at {f} Hz: {a} vs oracle {b}"))?;
    }
    let bp = design_bandpass(1.0, 75.0, FS).map_err(|e| e.to_string())?;
    let dc = oracle_gain(&bp, 0.0);
    ensure(dc < 1e-3, || format!("bandpass |H(0)| = {dc}"))?;
    let y = bp.filter(&vec![1.0; 20 * FS as usize]);
    let tail = y[10 * FS as usize..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ensure(tail < 1e-3, || format!("constant input leaves {tail} after 10 s"))?;
    let mut worst_db: f64 = 0.0;
    for f in [5.0, 10.0, 20.0, 30.0, 40.0, 50.0] {
        let db = 20.0 * oracle_gain(&bp, f).log10();
        worst_db = worst_db.max(db.abs());
        // steady-state amplitude of a filtered sine agrees with the response
        let x: Vec<f64> = (0..20 * FS as usize)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / FS).sin())
            .collect();
        let y = bp.filter(&x);
        let amp = y[10 * FS as usize..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure((amp - oracle_gain(&bp, f)).abs() < 1e-2, || format!("{f} Hz sine amplitude {amp}"))?;
    }
    ensure(worst_db < 1.0, || format!("midband ripple {worst_db} dB"))?;
    Ok(format!("|H(60)|={g60:.2e} |H(10)|={g10:.4} |H(0)|={dc:.2e} midband within {worst_db:.3} dB"))
}

fn spectral_suite() -> Outcome {
    let n = 10 * FS as usize;
    let tone: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / FS).sin())
        .collect();
    let psd = welch_psd(&tone, FS, 2.0, 0.5).map_err(|e| e.to_string())?;
    let powers: Vec<f64> = FrequencyBand::ALL
        .iter()
        .map(|&b| band_power_simpson(&psd, b).map(|i| i.value))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let alpha = powers[FrequencyBand::Alpha.index()] / powers.iter().sum::<f64>();
    ensure(alpha > 0.9, || format!("alpha share {alpha}"))?;

    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let psd = welch_psd(&x, FS, 2.0, 0.5).map_err(|e| e.to_string())?;
        let total = simpson_integral(&psd.freqs, &psd.power, 0.0, FS / 2.0)
            .map_err(|e| e.to_string())?
            .value;
        worst = worst.max((total / var - 1.0).abs());
    }
    ensure(worst < 0.10, || format!("Parseval deviation {worst}"))?;

    let freqs: Vec<f64> = (0..=40).map(|i| i as f64 * 0.5).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut simpson_err: f64 = 0.0;
    for _ in 0..50 {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let vals: Vec<f64> = freqs.iter().map(|f| a * f * f + b * f + c).collect();
        let (lo, hi) = (2.0, 14.0);
        let exact = |x: f64| a * x * x * x / 3.0 + b * x * x / 2.0 + c * x;
        let got = simpson_integral(&freqs, &vals, lo, hi).map_err(|e| e.to_string())?.value;
        simpson_err = simpson_err.max((got - (exact(hi) - exact(lo))).abs());
    }
    ensure(simpson_err < 1e-9, || format!("Simpson error {simpson_err}"))?;
    Ok(format!("alpha share {alpha:.4}; Parseval within {:.2}%; Simpson error {simpson_err:.1e}", 100.0 * worst))
}

fn topomap_suite() -> Outcome {
    let layout = ElectrodeLayout::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut node_err, mut mirror_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let v: [f64; 4] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let f = fit_rbf(&layout, v).map_err(|e| e.to_string())?;
        for (p, want) in layout.positions().iter().zip(v) {
            node_err = node_err.max((f.evaluate(p.0, p.1) - want).abs());
        }
        let field = render_band(&f);
        let mirrored = render_band(&fit_rbf(&layout, [v[3], v[2], v[1], v[0]]).map_err(|e| e.to_string())?);
        for r in 0..GRID {
            for c in 0..GRID {
                mirror_err = mirror_err.max((field[r * GRID + c] - mirrored[r * GRID + GRID - 1 - c]).abs());
            }
        }
    }
    ensure(node_err < 1e-6, || format!("node reproduction error {node_err}"))?;
    ensure(mirror_err < 1e-6, || format!("mirror equivariance error {mirror_err}"))?;

    let mut cases: Vec<BandPowers> = (0..30)
        .map(|_| BandPowers {
            values: std::array::from_fn(|_| std::array::from_fn(|_| 10f64.powf(rng.random_range(-3.0..3.0)))),
        })
        .collect();
    cases.push(BandPowers { values: [[1.0; 5]; 4] });
    cases.push(BandPowers::zeros());
    for p in &cases {
        for opts in [MapValueOptions::default(), MapValueOptions { log_power: false, center: true }] {
            let map = build_multispectral_map(p, &layout, opts).map_err(|e| e.to_string())?;
            ensure(map.hwc().iter().all(|v| (0.0..=1.0).contains(v)), || "map entry outside [0, 1]".into())?;
        }
    }
    ensure(jet(0.0) == [0.0, 0.0, 0.5], || format!("jet(0) = {:?}", jet(0.0)))?;
    ensure(jet(0.5) == [0.5, 1.0, 0.5], || format!("jet(0.5) = {:?}", jet(0.5)))?;
    ensure(jet(1.0) == [0.5, 0.0, 0.0], || format!("jet(1) = {:?}", jet(1.0)))?;
    Ok(format!("node error {node_err:.1e}, mirror error {mirror_err:.1e}, {} maps in [0,1], jet pinned", 2 * cases.len()))
}

fn gradient_suite() -> Outcome {
    for (name, check) in gradcheck::ALL {
        catch_unwind(check).map_err(|p| {
            let why = p.downcast_ref::<String>().cloned().unwrap_or_default();
            format!("{name}: {why}")
        })?;
    }
    Ok(format!("{} checks (per-op < 1e-4, composed < 1e-3, f64)", gradcheck::ALL.len()))
}

fn l_oc(rows: &[[f64; 3]], labels: &[usize]) -> f64 {
    let mut g = Graph::<f64>::new();
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let x = g.param(Tensor::from_f64(&[rows.len(), 3], &flat).unwrap());
    let l = orthogonality_loss(&mut g, x, labels, false).unwrap();
    g.value(l.loss).data()[0]
}

fn orthogonality_closed_forms() -> Outcome {
    let u = [1.0, 2.0, -0.5];
    let w = [2.0, -1.0, 0.0];
    let cases = [
        (l_oc(&[u, u.map(|v| 3.0 * v)], &[1, 1]), 0.0),
        (l_oc(&[u, w], &[0, 1]), 1.0),
        (l_oc(&[u, u.map(|v| 0.2 * v)], &[0, 1]), 2.0),
    ];
    for (got, want) in cases {
        ensure((got - want).abs() < 1e-12, || format!("L_OC = {got}, expected {want}"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let rows: Vec<[f64; 3]> = (0..6).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let labels: Vec<usize> = (0..6).map(|i| i % 2).collect();
        let base = l_oc(&rows, &labels);
        for lambda in [0.1, 10.0] {
            let scaled: Vec<[f64; 3]> = rows.iter().map(|r| r.map(|v| lambda * v)).collect();
            worst = worst.max((l_oc(&scaled, &labels) - base).abs());
        }
    }
    ensure(worst < 1e-6, || format!("scale dependence {worst}"))?;
    Ok(format!("cases 0/1/2 exact, scale invariance {worst:.1e}"))
}

fn fusion_extremes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, m) = (4, 16);
    let et: Vec<f64> = (0..n * m).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ef: Vec<f64> = (0..n * m).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut worst: f64 = 0.0;
    for (gate, expect) in [(0.0, &et), (1.0, &ef)] {
        let mut g = Graph::<f32>::new();
        let t = g.constant(Tensor::from_f64(&[n, m], &et).unwrap());
        let f = g.constant(Tensor::from_f64(&[n, m], &ef).unwrap());
        let a = g.constant(Tensor::from_f64(&[n, m], &vec![gate; n * m]).unwrap());
        let fused = fuse_with_gate(&mut g, t, f, a).map_err(|e| e.to_string())?;
        for (got, x) in g.value(fused).data().iter().zip(expect.iter()) {
            worst = worst.max((f64::from(*got) - x.tanh()).abs());
        }
    }
    ensure(worst < 1e-6, || format!("deviation {worst}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn desk(subjects: usize, segments: usize, epochs: usize, seed: u64, out: &Path) -> RunConfig {
    RunConfig {
        name: "desk".into(),
        synthetic: true,
        subjects,
        segments,
        epochs,
        seed,
        model: "desk".into(),
        lr: 1e-3,
        out: out.to_path_buf(),
        ..Default::default()
    }
}

fn end_to_end(out: &Path) -> Outcome {
    let cfg = desk(6, 40, 30, 0, out);
    let r = cfg.resolve().map_err(|e| e.to_string())?;
    let ds = load_dataset(&r).map_err(|e| e.to_string())?;
    let folds = run_folds(&r, &ds).map_err(|e| e.to_string())?;
    let dir = out.join(&r.run_id);
    let summary = write_run(&dir, &r, &folds).map_err(|e| e.to_string())?;
    ensure(summary.loso.n_failed == 0, || format!("failed folds {:?}", summary.loso.failed))?;
    let (acc, f1) = (summary.loso.accuracy.unwrap(), summary.loso.f1.unwrap());
    ensure(acc.mean >= 0.90, || format!("mean accuracy {}", acc.mean))?;
    ensure(f1.mean >= 0.88, || format!("mean F1 {}", f1.mean))?;

    // the stored checkpoints reproduce the in-memory evaluation exactly
    let run = load_run(&dir).map_err(|e| e.to_string())?;
    for (fold, stored) in folds.iter().zip(&run.folds) {
        let clean = &fold.result.as_ref().unwrap().evaluation;
        let again = run.evaluate_fold(stored, &Mask::None, 0.0).map_err(|e| e.to_string())?;
        let bits = |e: &cogload_core::trainer::Evaluation| e.scores.iter().map(|s| s.p_high.to_bits()).collect::<Vec<_>>();
        ensure(bits(clean) == bits(&again), || format!("fold {} differs after reload", stored.subject))?;
    }
    ensure(
        (acc.mean - E2E_ACCURACY).abs() <= REGRESSION_TOL && (f1.mean - E2E_F1).abs() <= REGRESSION_TOL,
        || format!("accuracy {} F1 {} differ from pinned {E2E_ACCURACY} / {E2E_F1}", acc.mean, f1.mean),
    )?;
    Ok(format!("accuracy {} F1 {} over 6 folds", acc.percent(), f1.percent()))
}

fn robustness_structure(out: &Path) -> Outcome {
    let dir = out.join(desk(6, 40, 30, 0, out).run_id());
    let rows = experiments::cmd_robustness(&dir, &NOISE_FRACTIONS, &dir.join("robustness")).map_err(|e| e.to_string())?;
    let units: Vec<&str> = rows.iter().map(|r| r.unit.as_str()).collect();
    ensure(units == ["0", "0.1", "0.3", "0.5", "0.7"], || format!("rows {units:?}"))?;
    let summary: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    for (row, fold) in rows[0].subjects.iter().zip(&summary.folds) {
        let report: experiments::FoldReport =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("fold_{}.json", fold.subject))).unwrap()).unwrap();
        ensure(Some(row.metrics) == report.metrics, || format!("fraction 0 differs for {}", fold.subject))?;
    }
    ensure(rows.iter().all(|r| r.subjects.len() == 6), || "missing subjects".into())?;
    let accs: Vec<String> = rows.iter().map(|r| format!("{}:{}", r.unit, r.accuracy.percent())).collect();
    Ok(accs.join(" "))
}

struct AblationOutcome {
    accuracy: Vec<(String, f64)>,
    cosine_with_oc: f64,
    cosine_without_oc: f64,
}

const ABLATION_REPEATS: u64 = 5;

fn ablation(out: &Path) -> Result<AblationOutcome, String> {
    let wanted = ["full", "no_oc", "no_attention", "raw_only", "topo_only"];
    let mut acc = vec![0.0; wanted.len()];
    let (mut cos_oc, mut cos_plain) = (0.0, 0.0);
    for seed in 0..ABLATION_REPEATS {
        let mut base = desk(4, 16, 15, seed, out);
        base.batch_size = 16;
        let variants: Vec<RunConfig> = experiments::ablation_variants(&base)
            .into_iter()
            .filter(|c| wanted.contains(&c.name.as_str()))
            .collect();
        let first = variants[0].resolve().map_err(|e| e.to_string())?;
        let ds = load_dataset(&first).map_err(|e| e.to_string())?;
        for (k, v) in variants.iter().enumerate() {
            let r = v.resolve().map_err(|e| e.to_string())?;
            let folds = run_folds(&r, &ds).map_err(|e| e.to_string())?;
            let summary = write_run(&out.join(format!("seed{seed}")).join(&v.name), &r, &folds).map_err(|e| e.to_string())?;
            acc[k] += summary.loso.accuracy.ok_or("all folds failed")?.mean / ABLATION_REPEATS as f64;
            let cos = summary.cross_class_cosine.ok_or("no embeddings")? / ABLATION_REPEATS as f64;
            match v.name.as_str() {
                "full" => cos_oc += cos,
                "no_oc" => cos_plain += cos,
                _ => {}
            }
        }
    }
    Ok(AblationOutcome {
        accuracy: wanted.iter().map(|s| s.to_string()).zip(acc).collect(),
        cosine_with_oc: cos_oc,
        cosine_without_oc: cos_plain,
    })
}

fn ablation_direction(out: &Path) -> Outcome {
    let a = ablation(out)?;
    let table: Vec<String> = a.accuracy.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
    let detail = format!(
        "{}; cross-class cosine beta=0.4 {:.4} vs beta=0 {:.4}",
        table.join(", "),
        a.cosine_with_oc,
        a.cosine_without_oc
    );
    let full = a.accuracy[0].1;
    ensure(a.accuracy[1..].iter().all(|(_, v)| full >= *v), || format!("full model not best: {detail}"))?;
    ensure(a.cosine_with_oc < a.cosine_without_oc, || format!("cosine not lower with L_OC: {detail}"))?;
    Ok(detail)
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(out: &Path) -> Outcome {
    let mut trees = Vec::new();
    for (i, jobs) in [1usize, 2].into_iter().enumerate() {
        let root = out.join(format!("attempt{i}"));
        let mut cfg = desk(3, 8, 3, 42, &root);
        cfg.batch_size = 8;
        cfg.jobs = jobs;
        let run = experiments::cmd_run(&cfg).map_err(|e| e.to_string())?;
        experiments::cmd_robustness(&run.dir, &NOISE_FRACTIONS, &run.dir.join("robustness")).map_err(|e| e.to_string())?;
        experiments::cmd_importance(&run.dir, experiments::Axis::Band, &run.dir.join("importance")).map_err(|e| e.to_string())?;
        experiments::cmd_attention_export(&run.dir, &run.dir.join("attention")).map_err(|e| e.to_string())?;
        cfg.epochs = 1;
        experiments::cmd_beta_sweep(&cfg).map_err(|e| e.to_string())?;
        experiments::cmd_featurize(&cfg, &root.join("features")).map_err(|e| e.to_string())?;
        trees.push(read_tree(&root));
    }
    let (a, b) = (&trees[0], &trees[1]);
    ensure(a.len() == b.len(), || format!("{} vs {} files", a.len(), b.len()))?;
    for ((pa, da), (pb, db)) in a.iter().zip(b) {
        ensure(pa == pb && da == db, || format!("{pa} differs between runs"))?;
    }
    Ok(format!("{} files identical across two runs (jobs 1 and 2)", a.len()))
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let e2e_dir = tmp.path().join("e2e");
    let results = [
        criterion("C1", "DSP oracle suite", Some(Duration::from_secs(5)), dsp_suite),
        criterion("C2", "spectral suite", Some(Duration::from_secs(30)), spectral_suite),
        criterion("C3", "topomap suite", Some(Duration::from_secs(10)), topomap_suite),
        criterion("C4", "autodiff gradient suite", Some(Duration::from_secs(120)), gradient_suite),
        criterion("C5", "L_OC closed forms", Some(Duration::from_secs(1)), orthogonality_closed_forms),
        criterion("C6", "fusion extremes", None, fusion_extremes),
        criterion("C7", "end-to-end desk-scale run", Some(Duration::from_secs(15 * 60)), || end_to_end(&e2e_dir)),
        criterion("C8", "ablation direction", None, || ablation_direction(&tmp.path().join("ablation"))),
        criterion("C9", "robustness structure", None, || robustness_structure(&e2e_dir)),
        criterion("C10", "determinism", None, || determinism(&tmp.path().join("determinism"))),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    report(&format!("acceptance: {} of {} criteria passed", results.len() - failed, results.len()));
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}
