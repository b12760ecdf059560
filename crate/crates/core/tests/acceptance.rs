//! End-to-end acceptance suite. Runs as a plain binary so every criterion
//! prints one PASS/FAIL line even when the test harness captures output.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use duocontrast::data::{synth_generate, tokenize_batch};
use duocontrast::encoders::{encode_image, encode_text, EncoderConfig};
use duocontrast::eval::{
    cross_modal_eval, ndcg_from_scores, rank_corpus, recall_from_scores, spearman, EvalOptions, Grades, MetricsReport,
    Towers, IMG_TXT_R1, TXT_IMG_R1, TXT_TXT_R1,
};
use duocontrast::losses::{
    nce_bidirectional, nce_directional, nce_hard_negatives, EmbeddingBatch, Stage, Temperature, TripletBatch,
};
use duocontrast::numcore::{Rng, Tensor};
use duocontrast::selfcheck::{gradient_suite, loss_invariant_suite, tower_suite, Check};
use duocontrast::trainer::{
    cosine_lr, run_pipeline, AdamHyper, AdamMoments, Checkpoint, InitFrom, StageConfig, TrainState,
};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn checks_pass(checks: &[Check]) -> Result<(), String> {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(Check::line).collect();
    ensure(failed.is_empty(), || failed.join("; "))
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut checks = gradient_suite(2024, 100);
    checks.extend(tower_suite(2025, 3));
    let elapsed = start.elapsed();
    checks_pass(&checks)?;
    ensure(checks.iter().all(|c| c.cases >= 3), || "too few cases".into())?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}, {:.1}s",
        checks.len(),
        elapsed.as_secs_f64()
    ))
}

fn loss_invariants() -> Outcome {
    let checks = loss_invariant_suite(77, 1000);
    checks_pass(&checks)?;
    ensure(checks.iter().all(|c| c.cases == 1000), || {
        "expected 1000 cases per invariant".into()
    })?;
    Ok(format!("{} invariants x 1000 cases", checks.len()))
}

fn closed_form_losses() -> Outcome {
    let eye = Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap();
    let t = |tau| Temperature::fixed(tau).unwrap();
    let e = |m: &Tensor| EmbeddingBatch::new(m.clone()).unwrap();

    let mut cases = vec![
        (
            "directional identity tau=0.05",
            nce_directional(&eye, &t(0.05)).unwrap(),
            (-20f64).exp().ln_1p(),
        ),
        (
            "directional zeros tau=1",
            nce_directional(&Tensor::zeros(&[2, 2]), &t(1.0)).unwrap(),
            2f64.ln(),
        ),
        (
            "bidirectional identity tau=0.05",
            nce_bidirectional(&e(&eye), &e(&eye), &t(0.05)).unwrap(),
            2.0 * (-20f64).exp().ln_1p(),
        ),
    ];
    let q = Tensor::new(vec![1, 8], (0..8).map(|i| f64::from(i == 0)).collect()).unwrap();
    let orth = Tensor::new(vec![1, 7, 8], (0..56).map(|i| f64::from(i % 8 == i / 8 + 1)).collect()).unwrap();
    let hard = TripletBatch::new(q.clone(), q.clone(), orth).unwrap();
    let e1 = std::f64::consts::E;
    cases.push((
        "hard negatives, orthogonal",
        nce_hard_negatives(&hard, &t(1.0)).unwrap(),
        -(e1 / (e1 + 7.0)).ln(),
    ));
    let same = Tensor::new(vec![1, 7, 8], q.data().repeat(7)).unwrap();
    let equal = TripletBatch::new(q.clone(), q, same).unwrap();
    cases.push((
        "hard negatives, all equal",
        nce_hard_negatives(&equal, &t(1.0)).unwrap(),
        8f64.ln(),
    ));

    // Rounded reference values as printed in the worked examples.
    #[allow(clippy::approx_constant)]
    let printed = [2.0612e-9, 0.69315, 4.1224e-9, 1.2740, 2.0794];
    let mut notes = Vec::new();
    for ((name, got, exact), shown) in cases.iter().zip(printed) {
        let err = rel_err(*got, *exact);
        ensure(err <= 1e-6, || {
            format!("{name}: got {got:e}, want {exact:e} (rel {err:.1e})")
        })?;
        ensure(rel_err(*got, shown) < 1e-4, || {
            format!("{name}: {got:e} disagrees with {shown:e}")
        })?;
        notes.push(format!("{got:.4e}"));
    }
    Ok(notes.join(", "))
}

fn oracle_recall(scores: &[f64], grades: &Grades, k: usize) -> bool {
    // Rank of item i: items with a higher score, or an equal score and a
    // lower index, come first.
    (0..scores.len()).any(|i| {
        let ahead = (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        ahead < k && grades.get(&i).is_some_and(|&g| g > 0)
    })
}

fn oracle_ndcg(scores: &[f64], grades: &Grades, k: usize) -> f64 {
    let mut dcg = 0.0;
    for i in 0..scores.len() {
        let ahead = (0..scores.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count();
        if ahead < k {
            dcg += f64::from(grades.get(&i).copied().unwrap_or(0)) / ((ahead + 2) as f64).log2();
        }
    }
    let mut ideal: Vec<u32> = grades.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(r, &g)| f64::from(g) / ((r + 2) as f64).log2())
        .sum();
    dcg / idcg
}

fn oracle_spearman(x: &[f64], y: &[f64]) -> f64 {
    let ranks = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let equal = v.iter().filter(|b| *b == a).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn metric_oracles() -> Outcome {
    let mut rng = Rng::new(99);
    let (mut worst_ndcg, mut worst_rho) = (0.0f64, 0.0f64);
    for case in 0..1000 {
        let (nq, nc) = (1 + rng.below(6), 2 + rng.below(20));
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..nq * nc).map(|_| rng.below(6) as f64 / 5.0).collect();
        let relevance: Vec<Grades> = (0..nq)
            .map(|_| {
                let mut g = Grades::new();
                for i in 0..nc {
                    if rng.below(4) == 0 {
                        g.insert(i, 1 + rng.below(3) as u32);
                    }
                }
                g.entry(rng.below(nc)).or_insert(1);
                g
            })
            .collect();
        let st = Tensor::new(vec![nq, nc], scores.clone()).unwrap();
        let k = 1 + rng.below(nc);
        let hits = (0..nq)
            .filter(|&q| oracle_recall(&scores[q * nc..(q + 1) * nc], &relevance[q], k))
            .count();
        let recall = recall_from_scores(&st, &relevance, k).unwrap();
        ensure(recall == hits as f64 / nq as f64, || {
            format!("recall case {case}: {recall} vs {hits}/{nq}")
        })?;
        let want = (0..nq)
            .map(|q| oracle_ndcg(&scores[q * nc..(q + 1) * nc], &relevance[q], 10))
            .sum::<f64>()
            / nq as f64;
        worst_ndcg = worst_ndcg.max((ndcg_from_scores(&st, &relevance, 10).unwrap() - want).abs());

        let n = 3 + rng.below(30);
        let x: Vec<f64> = (0..n).map(|_| rng.below(8) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        if let Ok(rho) = spearman(&x, &y) {
            worst_rho = worst_rho.max((rho - oracle_spearman(&x, &y)).abs());
        }
    }
    ensure(worst_ndcg <= 1e-12, || format!("nDCG off by {worst_ndcg:e}"))?;
    ensure(worst_rho <= 1e-12, || format!("Spearman off by {worst_rho:e}"))?;

    let hand = Tensor::new(vec![1, 3], vec![0.9, 0.5, 0.1]).unwrap();
    let ndcg = ndcg_from_scores(&hand, &[Grades::from([(0, 1), (2, 1)])], 10).unwrap();
    ensure((ndcg - 0.91972).abs() < 5e-6, || format!("hand nDCG {ndcg}"))?;
    let rho = spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap();
    ensure((rho - 0.8).abs() < 1e-12, || format!("hand Spearman {rho}"))?;
    ensure(rank_corpus(&[0.2, 0.2]) == [0, 1], || "tie order".into())?;
    Ok(format!(
        "1000 instances each; worst nDCG {worst_ndcg:.1e}, Spearman {worst_rho:.1e}; hand nDCG {ndcg:.5}"
    ))
}

/// The desk-scale run shared by the convergence and trend criteria.
struct DeskRun {
    elapsed: Duration,
    index_256: MetricsReport,
    text_r1: Vec<f64>,
}

fn desk_run() -> Result<DeskRun, String> {
    let seed = 42;
    let start = Instant::now();
    let data = synth_generate(&mut Rng::new(seed), 4096, 8, 0.05).map_err(|e| e.to_string())?;
    let corpora = data.train.clone().with_seed(seed);
    let initial = TrainState::init(seed, &EncoderConfig::default()).map_err(|e| e.to_string())?;
    let out = run_pipeline(&StageConfig::desk_pipeline(), initial, &corpora).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    fn towers(ck: &Checkpoint) -> Towers<'_> {
        Towers {
            text: &ck.state.text,
            image: &ck.state.image,
        }
    }
    let small = EvalOptions {
        index_size: Some(256),
        ..EvalOptions::default()
    };
    let last = &out.checkpoints[2];
    let index_256 = cross_modal_eval(&towers(last), &data.eval, &small).map_err(|e| e.to_string())?;
    let mut text_r1 = Vec::new();
    for ck in &out.checkpoints {
        let full = cross_modal_eval(&towers(ck), &data.eval, &EvalOptions::default()).map_err(|e| e.to_string())?;
        text_r1.push(full.get(TXT_TXT_R1).unwrap());
    }
    Ok(DeskRun {
        elapsed,
        index_256,
        text_r1,
    })
}

fn desk_convergence(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let (ti, it) = (
        run.index_256.get(TXT_IMG_R1).unwrap(),
        run.index_256.get(IMG_TXT_R1).unwrap(),
    );
    let msg = format!(
        "txt->img r@1 {ti:.4}, img->txt r@1 {it:.4} (chance 0.0039), {:.0}s",
        run.elapsed.as_secs_f64()
    );
    ensure(ti >= 0.9 && it >= 0.9, || msg.clone())?;
    ensure(run.elapsed < Duration::from_secs(600), || msg.clone())?;
    Ok(msg)
}

fn multitask_trend(run: &Result<DeskRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let r = &run.text_r1;
    let msg = format!("text-text r@1 by stage {:.4} -> {:.4} -> {:.4}", r[0], r[1], r[2]);
    ensure(r[2] > r[0], || msg.clone())?;
    Ok(msg)
}

fn small_config(stage: Stage, steps: usize) -> StageConfig {
    StageConfig {
        batch_size_text: 8,
        batch_size_img: 8,
        total_steps: steps,
        ..StageConfig::desk(stage)
    }
}

fn probe_outputs(state: &TrainState, images: &Tensor) -> (Tensor, Tensor) {
    let tokens = tokenize_batch(&["probe text", "another probe, somewhat longer"], 77).unwrap();
    (
        encode_text(&tokens, &state.text).unwrap(),
        encode_image(images, &state.image).unwrap(),
    )
}

fn pipeline_handoff() -> Outcome {
    let data = synth_generate(&mut Rng::new(11), 256, 8, 0.05).map_err(|e| e.to_string())?;
    let corpora = data.train.clone().with_seed(11);
    let init = || TrainState::init(11, &EncoderConfig::default()).unwrap();
    let configs = [
        small_config(Stage::One, 6),
        small_config(Stage::Two, 3),
        small_config(Stage::Three, 3),
    ];
    let whole = run_pipeline(&configs, init(), &corpora).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let images = Tensor::stack(&[
        data.eval.captions_short[0].image.clone(),
        data.eval.captions_short[1].image.clone(),
    ])
    .unwrap();
    let mut state_path = None::<std::path::PathBuf>;
    for (i, cfg) in configs.iter().enumerate() {
        let mut cfg = cfg.clone();
        let mut start = init();
        if let Some(path) = &state_path {
            cfg.init_from = InitFrom::Checkpoint(path.clone());
            // The first step of a resumed stage sees exactly the saved towers.
            start = Checkpoint::load(path).map_err(|e| e.to_string())?.state;
            let before = probe_outputs(&whole.checkpoints[i - 1].state, &images);
            ensure(probe_outputs(&start, &images) == before, || {
                format!("stage {} initial outputs differ", cfg.stage)
            })?;
        }
        let part = run_pipeline(&[cfg.clone()], start, &corpora).map_err(|e| e.to_string())?;
        ensure(part.checkpoints[0].state == whole.checkpoints[i].state, || {
            format!(
                "stage {} resumed from file diverges from the in-memory pipeline",
                cfg.stage
            )
        })?;
        let path = dir.path().join(format!("stage{}.jck", cfg.stage));
        part.checkpoints[0].save(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        ensure(back == part.checkpoints[0] && back.to_bytes() == bytes, || {
            "checkpoint round trip".into()
        })?;
        state_path = Some(path);
    }
    Ok("stage 2/3 start outputs bit-identical; file-resumed stages match the pipeline; round trip exact".into())
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_duocontrast"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("`{}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn cli_run(root: &Path, config_dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, model, report) = (root.join("data"), root.join("model"), root.join("report"));
    run_cli(&["gen-data", "--out", &s(&data), "--seed", "3", "--n", "512"])?;
    let mut train = vec![
        "train".to_string(),
        "--data".into(),
        s(&data),
        "--out".into(),
        s(&model),
        "--seed".into(),
        "3".into(),
    ];
    for n in 1..=3 {
        train.extend(["--config".into(), s(&config_dir.join(format!("stage{n}.cfg")))]);
    }
    run_cli(&train.iter().map(String::as_str).collect::<Vec<_>>())?;
    let ck = model.join("stage3.jck");
    run_cli(&[
        "eval",
        "--data",
        &s(&data),
        "--checkpoint",
        &s(&ck),
        "--out",
        &s(&report),
    ])?;

    let mut files = BTreeMap::new();
    for dir in [&model, &report] {
        for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            let name = path.strip_prefix(root).unwrap().display().to_string();
            files.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(files)
}

fn cli_determinism() -> Outcome {
    let configs = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (n, steps) in [(1, 40), (2, 10), (3, 10)] {
        let text = format!("stage = {n}\ntotal_steps = {steps}\n");
        std::fs::write(configs.path().join(format!("stage{n}.cfg")), text).map_err(|e| e.to_string())?;
    }
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_run(a.path(), configs.path())?;
    let second = cli_run(b.path(), configs.path())?;
    let expected = [
        "model/stage1.jck",
        "model/stage3.jck",
        "model/stage3_loss.txt",
        "report/metrics.txt",
    ];
    for name in expected {
        ensure(first.contains_key(name), || format!("missing {name}"))?;
    }
    ensure(first.keys().eq(second.keys()), || "different file sets".into())?;
    for (name, bytes) in &first {
        ensure(second[name] == *bytes, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} output files byte-identical across two runs", first.len()))
}

fn schedule_and_optimizer() -> Outcome {
    let peak = 1e-4;
    let points = [(0, peak), (500, peak / 2.0), (1000, 0.0)];
    for (step, want) in points {
        let got = cosine_lr(step, 1000, peak, 0).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-15 * peak, || {
            format!("lr({step}) = {got}, want {want}")
        })?;
    }
    let hp = AdamHyper {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: 0.025,
    };
    let (lr, w0) = (0.1, [0.7, -1.3, 2.0]);
    let mut w = Tensor::new(vec![3], w0.to_vec()).unwrap();
    let mut m = AdamMoments::zeros_like([&w]);
    for t in 1..=5 {
        m.step(&mut [&mut w], &[Tensor::zeros(&[3])], &[true], lr, &hp)
            .map_err(|e| e.to_string())?;
        for (got, start) in w.data().iter().zip(w0) {
            let want = start * (1.0 - lr * 0.025f64).powi(t);
            ensure((got - want).abs() <= 1e-15 * want.abs(), || {
                format!("step {t}: {got} vs {want}")
            })?;
        }
    }
    Ok("lr(0)=peak, lr(T/2)=peak/2, lr(T)=0; zero-gradient AdamW decays by (1 - lr*0.025) per step".into())
}

fn main() {
    let desk = desk_run();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", Box::new(gradient_correctness)),
        ("2 loss invariants", Box::new(loss_invariants)),
        ("3 closed-form loss values", Box::new(closed_form_losses)),
        ("4 metric oracle equivalence", Box::new(metric_oracles)),
        ("5 desk-scale convergence", Box::new(|| desk_convergence(&desk))),
        ("6 multi-task trend", Box::new(|| multitask_trend(&desk))),
        ("7 pipeline handoff", Box::new(pipeline_handoff)),
        ("8 CLI determinism", Box::new(cli_determinism)),
        ("9 schedule and optimizer", Box::new(schedule_and_optimizer)),
    ];
    let mut failures = 0;
    for (name, check) in &criteria {
        match check() {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(why) => {
                failures += 1;
                println!("criterion {name}: FAIL ({why})");
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
