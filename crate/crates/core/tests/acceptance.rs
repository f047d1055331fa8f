//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any fails.
//!
//! `PFXD_ACCEPT_CKPT=<path>` reuses a previously trained toy checkpoint
//! instead of training one (the overfit criterion then reports the
//! checkpoint's metrics without a training time).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use pfxd::checkpoint::load_checkpoint;
use pfxd::data::{toy_dataset, toy_encode_caption, toy_vocabulary, FeatureRecord};
use pfxd::denoiser::{DenoiserModel, ModelConfig};
use pfxd::diffusion::{
    p_sample_step, posterior, q_sample, reconstruct_x0, standard_normal, Parameterization,
    SampleOptions,
};
use pfxd::metrics::{bleu_n, distinct_n, evaluate, vocab_usage};
use pfxd::schedule::{make_schedule, ScheduleKind, ALPHA_BAR_MIN, COSINE_OFFSET};
use pfxd::select::{cosine_similarity, Candidate, Generator, ToyTextEncoder};
use pfxd::training::{fit, loss, NoisedBatch, RoundingInput, TrainConfig};
use pfxd::vocab::{encode, EmbeddingTable, TokenSequence};

/// Core count the runtime limits are written for.
const REFERENCE_CORES: usize = 4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runtime limit stretched for machines with fewer cores than the
/// reference machine.
fn limit(base: Duration) -> Duration {
    base * (REFERENCE_CORES / cores().clamp(1, REFERENCE_CORES)) as u32
}

fn within(elapsed: Duration, base: Duration) -> (bool, String) {
    let lim = limit(base);
    (
        elapsed <= lim,
        format!(
            "{:.1}s, limit {:.0}s ({} core(s))",
            elapsed.as_secs_f64(),
            lim.as_secs_f64(),
            cores()
        ),
    )
}

// ---------------------------------------------------------------- 1

fn oracle_alpha_bar(kind: ScheduleKind, steps: usize) -> Vec<f64> {
    let (lo, hi) = (0.01, 0.03);
    let interp = |power: i32| -> Vec<f64> {
        (1..=steps)
            .map(|t| {
                let frac = if steps == 1 {
                    0.0
                } else {
                    (t - 1) as f64 / (steps - 1) as f64
                };
                lo + frac.powi(power) * (hi - lo)
            })
            .collect()
    };
    let product = |betas: &[f64]| -> Vec<f64> {
        let mut log = 0.0;
        betas
            .iter()
            .map(|b| {
                log += (-b).ln_1p();
                log.exp()
            })
            .collect()
    };
    let cosine = || -> Vec<f64> {
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                * std::f64::consts::PI
                / 2.0;
            x.cos() * x.cos()
        };
        let betas: Vec<f64> = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).min(0.999))
            .collect();
        product(&betas)
    };
    match kind {
        ScheduleKind::Linear => product(&interp(1)),
        ScheduleKind::Square => product(&interp(2)),
        ScheduleKind::Cosine => cosine(),
        ScheduleKind::TLinear => product(&interp(1))
            .into_iter()
            .map(|a| a.max(ALPHA_BAR_MIN))
            .collect(),
        ScheduleKind::TCosine => cosine().into_iter().map(|a| a.max(ALPHA_BAR_MIN)).collect(),
    }
}

fn schedule_exactness() -> Outcome {
    let lin = make_schedule(ScheduleKind::Linear, 1000, 0.01, 0.03).unwrap();
    let endpoints = lin.beta(1).unwrap() == 0.01 && lin.beta(1000).unwrap() == 0.03;
    let mut worst = 0.0f64;
    for kind in ScheduleKind::ALL {
        for steps in [1, 10, 1000] {
            let s = make_schedule(kind, steps, 0.01, 0.03).unwrap();
            for (a, b) in s.alpha_bars().iter().zip(oracle_alpha_bar(kind, steps)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    outcome(
        endpoints && worst < 1e-10,
        format!("endpoints exact: {endpoints}; max alpha_bar deviation {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 2

fn algebraic_inverse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let kinds = ScheduleKind::ALL;
    for case in 0..1000 {
        let sched = make_schedule(kinds[case % kinds.len()], 1000, 0.01, 0.03).unwrap();
        let t = rng.random_range(1..=1000);
        let scale = rng.random_range(0.01..5.0);
        let x0 = standard_normal(16, 48, &mut rng) * scale;
        let eps = standard_normal(16, 48, &mut rng);
        let xt = q_sample(x0.view(), t, &sched, eps.view()).unwrap();
        let back = reconstruct_x0(xt.view(), t, &sched, eps.view()).unwrap();
        worst = worst.max((back - &x0).iter().fold(0.0f64, |m, d| m.max(d.abs())));
    }
    outcome(
        worst < 1e-6,
        format!("max abs error {worst:.2e} over 1000 cases"),
    )
}

// ---------------------------------------------------------------- 3

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn posterior_correctness() -> Outcome {
    let sched = make_schedule(ScheduleKind::Linear, 5, 0.1, 0.5).unwrap();
    let (x0, xt) = (0.7, -0.4);
    let mut grid_err = 0.0f64;
    for t in 2..=5 {
        let ab_prev = sched.alpha_bar_at(t - 1).unwrap();
        let (a_t, b_t) = (sched.alpha(t).unwrap(), sched.beta(t).unwrap());
        let (prior_mean, prior_var) = (ab_prev.sqrt() * x0, 1.0 - ab_prev);
        let half = 10.0 * prior_var.sqrt();
        let pts = 2001;
        let h = 2.0 * half / (pts - 1) as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..pts {
            let x = prior_mean - half + i as f64 * h;
            let w = normal_pdf(x, prior_mean, prior_var) * normal_pdf(xt, a_t.sqrt() * x, b_t);
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        let p = posterior(
            Array2::from_elem((1, 1), xt).view(),
            Array2::from_elem((1, 1), x0).view(),
            t,
            &sched,
        )
        .unwrap();
        grid_err = grid_err
            .max((p.mean[[0, 0]] - mean).abs())
            .max((p.var - var).abs());
    }

    // Monte-Carlo reverse step against a fixed noise prediction
    let t = 3;
    let z_hat = 0.4;
    let denoiser =
        |_: ndarray::ArrayView2<f64>, _: usize, _: &[f64]| Ok(Array2::from_elem((1, 1), z_hat));
    let xt_m = Array2::from_elem((1, 1), xt);
    let x0_hat = reconstruct_x0(
        xt_m.view(),
        t,
        &sched,
        Array2::from_elem((1, 1), z_hat).view(),
    )
    .unwrap();
    let expect = posterior(xt_m.view(), x0_hat.view(), t, &sched).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = 10_000;
    let samples: Vec<f64> = (0..draws)
        .map(|_| {
            let noise = standard_normal(1, 1, &mut rng);
            p_sample_step(
                xt_m.view(),
                t,
                &sched,
                &denoiser,
                &[],
                noise.view(),
                &SampleOptions::default(),
            )
            .unwrap()[[0, 0]]
        })
        .collect();
    let n = draws as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mean_z = (mean - expect.mean[[0, 0]]).abs() / (expect.var / n).sqrt();
    let var_z = (var - expect.var).abs() / (expect.var * (2.0 / (n - 1.0)).sqrt());
    outcome(
        grid_err < 1e-3 && mean_z < 3.0 && var_z < 3.0,
        format!(
            "grid max error {grid_err:.2e}; Monte-Carlo mean {mean_z:.2}σ, variance {var_z:.2}σ"
        ),
    )
}

// ---------------------------------------------------------------- 4

fn gradient_fidelity() -> Outcome {
    let config = ModelConfig {
        d1: 4,
        d2: 8,
        k: 3,
        prefix_len: 2,
        layers: 1,
        heads: 1,
        ff_mult: 2,
        feat_dim: 6,
        prefix_hidden: 8,
        steps: 10,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = DenoiserModel::new(config, &mut rng).unwrap();
    let vocab = 7;
    let emb = EmbeddingTable::random_with_std(vocab, 4, 0.5, &mut rng);
    let sched = make_schedule(ScheduleKind::TLinear, 10, 0.01, 0.03).unwrap();
    let seqs = [
        TokenSequence::new(vec![3, 4, 1], vocab).unwrap(),
        TokenSequence::new(vec![5, 1, 0], vocab).unwrap(),
    ];
    let feats: Vec<Vec<f64>> = (0..2)
        .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let batch: Vec<(&TokenSequence, &[f64])> = seqs
        .iter()
        .zip(&feats)
        .map(|(s, f)| (s, f.as_slice()))
        .collect();
    let nb = NoisedBatch::draw(&batch, 10, 4, &mut rng).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for param in [Parameterization::Noise, Parameterization::Start] {
        let eval = |m: &DenoiserModel| {
            loss(m, &emb, &nb, &sched, 1.0, param, RoundingInput::Estimate).unwrap()
        };
        let analytic = eval(&model).model;
        for _ in 0..100 {
            let p = rng.random_range(0..model.params().len());
            let (rows, cols) = model.params()[p].value.dim();
            let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
            let orig = model.params()[p].value[[r, c]];
            model.params_mut()[p].value[[r, c]] = orig + h;
            let up = eval(&model).value.total;
            model.params_mut()[p].value[[r, c]] = orig - h;
            let down = eval(&model).value.total;
            model.params_mut()[p].value[[r, c]] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[p][[r, c]];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    outcome(
        worst < 1e-3,
        format!("max relative error {worst:.2e} over 100 parameters per parameterization"),
    )
}

// ---------------------------------------------------------------- 5

struct Trained {
    generator: Generator,
    records: Vec<FeatureRecord>,
}

fn overfit(dir: &Path) -> (Outcome, Option<Trained>) {
    let records: Vec<FeatureRecord> = toy_dataset(32, 0).into_iter().map(|(_, r)| r).collect();
    let vocab = toy_vocabulary();
    let start = Instant::now();
    let (path, trained_here) = match std::env::var_os("PFXD_ACCEPT_CKPT") {
        Some(p) => (PathBuf::from(p), false),
        None => {
            let path = dir.join("desk.ckpt");
            let cfg = TrainConfig::tuned();
            if let Err(e) = fit(&cfg, &records, &vocab, &path) {
                return (outcome(false, format!("training failed: {e}")), None);
            }
            (path, true)
        }
    };
    let train_time = start.elapsed();
    let generator = Generator::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    let ev = evaluate(&generator, &records, 5, 50, 0, &ToyTextEncoder, false).unwrap();
    let feats: Vec<&[f64]> = records.iter().map(|r| r.feat.as_slice()).collect();
    let cands = generator.generate_many(&feats, 5, 50, 0).unwrap();
    let valid = cands.iter().flatten().all(|c| {
        c.tokens.ids().iter().all(|&id| id < generator.vocab.len())
            && encode(&c.caption, &generator.vocab, c.tokens.len()).is_ok()
    });
    let (timely, time) = if trained_here {
        within(train_time, Duration::from_secs(15 * 60))
    } else {
        (true, "reused checkpoint".to_string())
    };
    let bleu1 = ev.report.bleu1;
    let out = outcome(
        bleu1 >= 0.9 && valid && timely,
        format!(
            "BLEU-1 {bleu1:.4} (B@3 {:.4}); valid tokens: {valid}; training {time}",
            ev.report.bleu3
        ),
    );
    (out, Some(Trained { generator, records }))
}

// ---------------------------------------------------------------- 6, 7

fn similarity(feat: &[f64], caption: &str) -> f64 {
    cosine_similarity(feat, &toy_encode_caption(caption)).unwrap_or(0.0)
}

fn paired_one_sided_p(diffs: &[f64]) -> f64 {
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean > 0.0 { 0.0 } else { 1.0 };
    }
    let t = mean / (var / n).sqrt();
    1.0 - StudentsT::new(0.0, 1.0, n - 1.0).unwrap().cdf(t)
}

fn held_out_candidates(g: &Generator) -> (Vec<FeatureRecord>, Vec<Vec<Candidate>>, Duration) {
    let records: Vec<FeatureRecord> = toy_dataset(200, 10_000)
        .into_iter()
        .map(|(_, r)| r)
        .collect();
    let feats: Vec<&[f64]> = records.iter().map(|r| r.feat.as_slice()).collect();
    let start = Instant::now();
    let cands = g.generate_many(&feats, 15, 50, 0).unwrap();
    (records, cands, start.elapsed())
}

fn selection_trend(records: &[FeatureRecord], cands: &[Vec<Candidate>], took: Duration) -> Outcome {
    let sims: Vec<Vec<f64>> = records
        .iter()
        .zip(cands)
        .map(|(r, cs)| cs.iter().map(|c| similarity(&r.feat, &c.caption)).collect())
        .collect();
    let best = |n: usize| -> Vec<f64> {
        sims.iter()
            .map(|s| s[..n].iter().cloned().fold(f64::MIN, f64::max))
            .collect()
    };
    let ns = [1, 5, 10, 15];
    let means: Vec<f64> = ns
        .iter()
        .map(|&n| best(n).iter().sum::<f64>() / records.len() as f64)
        .collect();
    let monotone = means.windows(2).all(|w| w[1] >= w[0]);
    let diffs: Vec<f64> = best(5).iter().zip(best(1)).map(|(a, b)| a - b).collect();
    let p = paired_one_sided_p(&diffs);
    let (timely, time) = within(took, Duration::from_secs(10 * 60));
    outcome(
        monotone && means[1] > means[0] && p < 0.05 && timely,
        format!(
            "mean similarity n=1/5/10/15: {:.4}/{:.4}/{:.4}/{:.4}; paired p={p:.2e}; {time}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn diversity(cands: &[Vec<Candidate>]) -> Outcome {
    let seeds = 8;
    let groups: Vec<Vec<String>> = cands
        .iter()
        .map(|cs| cs[..seeds].iter().map(|c| c.caption.clone()).collect())
        .collect();
    let varied = groups
        .iter()
        .filter(|g| g.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2)
        .count();
    let frac = varied as f64 / groups.len() as f64;
    let multi: Vec<String> = groups.iter().flatten().cloned().collect();
    // a fixed seed reproduces its chain exactly, so single-seed generation
    // repeats candidate 0
    let single: Vec<String> = groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(g[0].clone(), seeds))
        .collect();
    let d_multi = distinct_n(&multi, 2).unwrap_or(0.0);
    let d_single = distinct_n(&single, 2).unwrap_or(0.0);
    outcome(
        frac >= 0.5 && d_multi > d_single,
        format!("{:.0}% of scenes with >=2 distinct captions; Dist-2 multi {d_multi:.4} vs single {d_single:.4}", 100.0 * frac),
    )
}

// ---------------------------------------------------------------- 8

fn grams<'a>(words: &'a [&'a str], n: usize) -> Vec<&'a [&'a str]> {
    if words.len() < n {
        return Vec::new();
    }
    (0..=words.len() - n).map(|i| &words[i..i + n]).collect()
}

fn occurrences(list: &[&[&str]], g: &[&str]) -> usize {
    list.iter().filter(|x| **x == g).count()
}

fn brute_bleu(hyps: &[String], refs: &[Vec<String>], max_n: usize) -> f64 {
    let mut matched = vec![0.0; max_n];
    let mut total = vec![0.0; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.split(' ').collect();
        let rws: Vec<Vec<&str>> = rs.iter().map(|x| x.split(' ').collect()).collect();
        c += hw.len();
        let mut closest = rws[0].len();
        for rw in &rws {
            let (d, dc) = (rw.len().abs_diff(hw.len()), closest.abs_diff(hw.len()));
            if d < dc || (d == dc && rw.len() < closest) {
                closest = rw.len();
            }
        }
        r += closest;
        for n in 1..=max_n {
            let hg = grams(&hw, n);
            let mut seen: Vec<&[&str]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let cap = rws
                    .iter()
                    .map(|rw| occurrences(&grams(rw, n), g))
                    .max()
                    .unwrap();
                matched[n - 1] += occurrences(&hg, g).min(cap) as f64;
            }
            total[n - 1] += hg.len() as f64;
        }
    }
    if matched[0] == 0.0 {
        return 0.0;
    }
    let mut log = 0.0;
    for n in 0..max_n {
        log += if n == 0 {
            (matched[0] / total[0]).ln()
        } else {
            ((matched[n] + 1.0) / (total[n] + 1.0)).ln()
        };
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log / max_n as f64).exp()
}

fn brute_distinct(captions: &[String], n: usize) -> Option<f64> {
    let words: Vec<Vec<&str>> = captions.iter().map(|c| c.split(' ').collect()).collect();
    let mut seen: Vec<&[&str]> = Vec::new();
    let mut total = 0;
    for w in &words {
        for g in grams(w, n) {
            total += 1;
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}

fn metric_oracles() -> Outcome {
    let vocab = toy_vocabulary();
    let words = vocab.content_words().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sentence = |rng: &mut ChaCha8Rng, pool: usize| -> String {
        let len = rng.random_range(1..=8);
        (0..len)
            .map(|_| words[rng.random_range(0..pool)].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut mismatches = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let size = rng.random_range(1..=20);
        // a small pool makes n-gram collisions common
        let pool = rng.random_range(2..=words.len());
        let hyps: Vec<String> = (0..size).map(|_| sentence(&mut rng, pool)).collect();
        let refs: Vec<Vec<String>> = (0..size)
            .map(|_| {
                (0..rng.random_range(1..=4))
                    .map(|_| sentence(&mut rng, pool))
                    .collect()
            })
            .collect();
        for n in 1..=4 {
            let d = (bleu_n(&hyps, &refs, n).unwrap() - brute_bleu(&hyps, &refs, n)).abs();
            worst = worst.max(d);
            if d > 1e-12 {
                mismatches += 1;
            }
            match (distinct_n(&hyps, n).ok(), brute_distinct(&hyps, n)) {
                (a, b) if a == b => {}
                _ => mismatches += 1,
            }
        }
        let used = words
            .iter()
            .filter(|w| hyps.iter().any(|h| h.split(' ').any(|x| x == w.as_str())))
            .count();
        if vocab_usage(&hyps, &vocab) != 100.0 * used as f64 / words.len() as f64 {
            mismatches += 1;
        }
    }
    let hand = distinct_n(&["a a a".to_string()], 2).unwrap();
    outcome(
        mismatches == 0 && hand == 0.5,
        format!("{mismatches} mismatches over 100 corpora (max BLEU gap {worst:.1e}); Dist-2(\"a a a\") = {hand}"),
    )
}

// ---------------------------------------------------------------- 9

fn respaced_sampling(t: &Trained) -> Outcome {
    let feats: Vec<&[f64]> = t.records[..8].iter().map(|r| r.feat.as_slice()).collect();
    let timed = |steps: usize| {
        let start = Instant::now();
        let c = t.generator.generate_many(&feats, 1, steps, 0).unwrap();
        (c, start.elapsed())
    };
    let (fast, fast_time) = timed(50);
    let (full, full_time) = timed(1000);
    let ok = |cs: &[Vec<Candidate>]| {
        cs.iter().flatten().all(|c| {
            !c.caption.is_empty()
                && c.tokens
                    .ids()
                    .iter()
                    .all(|&id| id < t.generator.vocab.len())
        })
    };
    let ratio = fast_time.as_secs_f64() / full_time.as_secs_f64();
    outcome(
        ok(&fast) && ok(&full) && ratio < 0.1,
        format!(
            "50 steps {:.2}s vs 1000 steps {:.2}s (ratio {:.3}); valid non-empty: {}/{}",
            fast_time.as_secs_f64(),
            full_time.as_secs_f64(),
            ratio,
            ok(&fast),
            ok(&full)
        ),
    )
}

// ---------------------------------------------------------------- 10

fn determinism(dir: &Path) -> Outcome {
    let records: Vec<FeatureRecord> = toy_dataset(8, 0).into_iter().map(|(_, r)| r).collect();
    let vocab = toy_vocabulary();
    let cfg = TrainConfig {
        steps: 10,
        ..TrainConfig::default()
    };
    let (a, b) = (dir.join("det-a.ckpt"), dir.join("det-b.ckpt"));
    fit(&cfg, &records, &vocab, &a).unwrap();
    fit(&cfg, &records, &vocab, &b).unwrap();
    let same_ckpt = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();
    let g = Generator::from_checkpoint(load_checkpoint(&a).unwrap()).unwrap();
    let feats: Vec<&[f64]> = records.iter().map(|r| r.feat.as_slice()).collect();
    let run = || g.generate_many(&feats, 3, 20, 7).unwrap();
    let same_samples = run() == run();
    outcome(
        same_ckpt && same_samples,
        format!("checkpoints identical: {same_ckpt}; samples identical: {same_samples}"),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, o: Outcome| {
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {name}: {status} ({}; {:.1}s)",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed += 1;
        }
    };

    let s = Instant::now();
    report(1, "schedule exactness", s, schedule_exactness());
    let s = Instant::now();
    report(2, "algebraic inverse", s, algebraic_inverse());
    let s = Instant::now();
    report(3, "posterior correctness", s, posterior_correctness());
    let s = Instant::now();
    report(4, "gradient fidelity", s, gradient_fidelity());
    let s = Instant::now();
    let (o, trained) = overfit(dir.path());
    report(5, "overfit end-to-end", s, o);
    match &trained {
        Some(t) => {
            let s = Instant::now();
            let (records, cands, took) = held_out_candidates(&t.generator);
            report(
                6,
                "candidate-selection trend",
                s,
                selection_trend(&records, &cands, took),
            );
            let s = Instant::now();
            report(7, "diversity mechanism", s, diversity(&cands));
        }
        None => {
            report(
                6,
                "candidate-selection trend",
                Instant::now(),
                outcome(false, "no trained model"),
            );
            report(
                7,
                "diversity mechanism",
                Instant::now(),
                outcome(false, "no trained model"),
            );
        }
    }
    let s = Instant::now();
    report(8, "metric oracles", s, metric_oracles());
    let s = Instant::now();
    match &trained {
        Some(t) => report(9, "respaced sampling", s, respaced_sampling(t)),
        None => report(
            9,
            "respaced sampling",
            s,
            outcome(false, "no trained model"),
        ),
    }
    let s = Instant::now();
    report(10, "determinism", s, determinism(dir.path()));

    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
