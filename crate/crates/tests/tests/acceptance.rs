//! Acceptance checks. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line.

use std::error::Error;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use randmark::bounds::{chernoff_gamma, poisson_binomial_cdf, Side, Tail};
use randmark::harness::manifest::MANIFEST_FILE;
use randmark::harness::{run_pipeline, ExperimentConfig, RunOutcome, RunSummary};
use randmark::nn::{gradient_check, Activation, Matrix, MlpNetwork, MlpSpec};
use randmark::oracles::{
    brute_force_poisson_binomial, coverage_simulation, exact_binomial_tail_rational,
    lemma_validity_simulation, ratio_to_f64,
};
use randmark::stats::{fpr_binomial, select_threshold};
use randmark::watermark::{
    evaluate_batch, AuxArch, BitMessage, DrawBatch, EmbedConfig, ModelBundle, TriggerSample,
};

type Outcome = Result<(bool, String), Box<dyn Error>>;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: &str, name: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let (pass, detail) = match f() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} {verdict} [{:>8.3}s] {name}: {detail}",
            t.elapsed().as_secs_f64()
        );
        if !pass {
            self.failures += 1;
        }
    }
}

fn rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite")
}

fn binom(n: u64, k: u64) -> BigInt {
    (0..k).fold(BigInt::one(), |acc, i| {
        acc * BigInt::from(n - i) / BigInt::from(i + 1)
    })
}

fn c1_exact_fpr_kernel() -> Outcome {
    let t = Instant::now();
    let v = fpr_binomial(0.5, 32, 5)?;
    let elapsed = t.elapsed();
    let numerator: BigInt = (0..=5).map(|j| binom(32, j)).sum();
    let exact = ratio_to_f64(&BigRational::new(
        numerator.clone(),
        BigInt::one() << 32usize,
    ));
    let rel = (v - exact).abs() / exact;
    Ok((
        numerator == BigInt::from(242_825) && rel <= 1e-12 && elapsed < Duration::from_millis(1),
        format!(
            "value {v:e}, oracle {numerator}/2^32, rel err {rel:.1e}, {:?}",
            elapsed
        ),
    ))
}

fn c2_threshold_calibration() -> Outcome {
    let t = Instant::now();
    let base = select_threshold(0.5, 32, 1e-4)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..100 {
        let r: f64 = rng.random_range(0.05..0.95);
        let n: usize = rng.random_range(1..=64);
        let eps = 10f64.powf(rng.random_range(-12.0..-0.3));
        let tau = select_threshold(r, n, eps)?;
        let r_q = rational(r);
        let eps_q = rational(eps);
        let tail = |t: usize| exact_binomial_tail_rational(n, t, &r_q);
        let ok = match tau {
            None => tail(0) >= eps_q,
            Some(t) => tail(t) < eps_q && (t == n || eps_q <= tail(t + 1)),
        };
        bad += usize::from(!ok);
    }
    let elapsed = t.elapsed();
    Ok((
        base == Some(5) && bad == 0 && elapsed < Duration::from_secs(1),
        format!("select_threshold(0.5, 32, 1e-4) = {base:?}, {bad}/100 grid points off the exact bracket"),
    ))
}

fn c3_dp_matches_enumeration() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let n: usize = rng.random_range(1..=12);
        let probs: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let d = rng.random_range(0..=n);
        let tail = if i % 2 == 0 { Tail::Below } else { Tail::Above };
        let dp = poisson_binomial_cdf(&probs, d, tail)?;
        let bf = brute_force_poisson_binomial(&probs, d, tail)?.value;
        worst = worst.max((dp - bf).abs());
    }
    Ok((
        worst <= 1e-12 && t.elapsed() < Duration::from_secs(10),
        format!("max |DP - enumeration| = {worst:.2e} over 100 instances"),
    ))
}

fn c4_chernoff_validity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut configs, mut violations, mut not_one, mut min_slack) = (0, 0, 0, f64::INFINITY);
    while configs < 200 {
        let n: usize = rng.random_range(2..=50);
        let centre: f64 = rng.random_range(0.1..0.99);
        let probs: Vec<f64> = (0..n)
            .map(|_| (centre + rng.random_range(-0.2..0.2)).clamp(0.01, 1.0))
            .collect();
        let mean = probs.iter().sum::<f64>() / n as f64;
        let top = (n as f64 * mean).ceil() as usize - 1;
        if top < 1 || top as f64 >= n as f64 * mean {
            continue;
        }
        let d = rng.random_range(1..=top);
        let exact_q: Vec<BigRational> = probs.iter().map(|&p| rational(p)).collect();
        let exact = ratio_to_f64(&poisson_binomial_cdf(&exact_q, d, Tail::Below)?);
        let gamma = chernoff_gamma(mean, d, n)?;
        violations += usize::from(exact > gamma);
        min_slack = min_slack.min(gamma - exact);
        not_one += usize::from(chernoff_gamma(d as f64 / n as f64, d, n)? != 1.0);
        configs += 1;
    }
    Ok((
        violations == 0 && not_one == 0 && t.elapsed() < Duration::from_secs(30),
        format!("{violations}/200 tails above gamma (min slack {min_slack:.2e}), {not_one} gamma(d/N) != 1"),
    ))
}

fn c5_lemma_end_to_end() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probs: Vec<f64> = (0..100).map(|_| rng.random_range(0.82..0.98)).collect();
    let delta = 0.05;
    let sim = lemma_validity_simulation(&probs, delta, 75, 10_000, 55)?;
    let limit = delta + 3.0 * sim.nominal_se(delta);
    Ok((
        sim.counted > 0 && sim.rate <= limit && t.elapsed() < Duration::from_secs(120),
        format!(
            "violation rate {:.4} <= {limit:.4} ({} counted, {} not applicable)",
            sim.rate, sim.counted, sim.excluded
        ),
    ))
}

fn c6_clopper_pearson_coverage() -> Outcome {
    let t = Instant::now();
    let mut worst = (f64::NEG_INFINITY, String::new());
    let mut bad = 0;
    let mut seed = 600;
    for p in [0.5, 0.8, 0.95] {
        for trials in [50u64, 200] {
            for level in [0.05, 0.001] {
                for side in [Side::Lower, Side::Upper] {
                    seed += 1;
                    let sim = coverage_simulation(p, trials, level, 100_000, seed, side)?;
                    let limit = level + 3.0 * sim.nominal_se(level);
                    bad += usize::from(sim.rate > limit);
                    let margin = sim.rate - limit;
                    if margin > worst.0 {
                        worst = (
                            margin,
                            format!(
                                "p={p}, trials={trials}, level={level}, {side:?}: {:.5}",
                                sim.rate
                            ),
                        );
                    }
                }
            }
        }
    }
    Ok((
        bad == 0 && t.elapsed() < Duration::from_secs(120),
        format!("{bad}/24 cells over level + 3 SE; tightest {}", worst.1),
    ))
}

fn random_network(rng: &mut ChaCha8Rng) -> MlpNetwork<f64> {
    let smooth = [Activation::Identity, Activation::Tanh, Activation::Sigmoid];
    let depth = rng.random_range(1..=3);
    let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=7)).collect();
    let acts = (0..depth)
        .map(|_| smooth[rng.random_range(0..smooth.len())])
        .collect();
    MlpNetwork::random(&MlpSpec::new(dims, acts).expect("valid spec"), rng)
}

fn squared_error(net: &MlpNetwork<f64>, x: &Matrix<f64>, y: &Matrix<f64>) -> (f64, Matrix<f64>) {
    let out = net.predict_batch(x).expect("shapes");
    let mut g = out.clone();
    let mut loss = 0.0;
    for (gi, &t) in g.as_mut_slice().iter_mut().zip(y.as_slice()) {
        *gi -= t;
        loss += 0.5 * *gi * *gi;
    }
    (loss, g)
}

fn c7_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let net = random_network(&mut rng);
        let rows = rng.random_range(1..=4);
        let x = Matrix::from_fn(rows, net.input_dim(), |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(rows, net.output_dim(), |_, _| rng.random_range(-1.0..1.0));
        let (_, trace) = net.forward_batch(&x)?;
        let grads = net.backward(&trace, &squared_error(&net, &x, &y).1)?.grads;
        worst = worst.max(gradient_check(&net, &grads, 1e-6, |n| {
            squared_error(n, &x, &y).0
        })?);
    }
    let networks = worst;

    // Full objective: fidelity plus weighted message term through e, f~ and d.
    let spec = MlpSpec::uniform(9, &[7], 4, Activation::Tanh, Activation::Identity);
    let f = MlpNetwork::random(&spec, &mut rng);
    let arch = AuxArch {
        encoder_hidden: vec![6],
        decoder_hidden: vec![5],
        perturbation_scale: 0.3,
    };
    let hyper = EmbedConfig {
        lambda: 0.7,
        ..EmbedConfig::default()
    };
    let mut bundle = ModelBundle::init(f, 3, &arch, hyper, &mut rng)?;
    // Off the f~ = f point, where the fidelity norm has no gradient.
    let shifted: Vec<f64> = bundle
        .watermarked_f
        .flatten()
        .iter()
        .map(|&p| p + rng.random_range(-0.05..0.05))
        .collect();
    bundle.watermarked_f.set_flat(&shifted)?;
    let samples: Vec<TriggerSample> = (0..2)
        .map(|_| {
            let image = (0..9).map(|_| rng.random_range(0.0..1.0)).collect();
            TriggerSample::new(image, BitMessage::random(3, &mut rng).unwrap(), 0.05)
        })
        .collect::<Result<_, _>>()?;
    let batch: Vec<DrawBatch<'_, f64>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| DrawBatch::sampled(s, 3 + i, 70 + i as u64))
        .collect::<Result<_, _>>()?;
    let g = evaluate_batch(&bundle, &batch)?.grads;
    let total = |b: &ModelBundle<f64>| evaluate_batch(b, &batch).expect("shapes").terms.total;
    let mut full = gradient_check(&bundle.watermarked_f, &g.backbone, 1e-6, |net| {
        let mut b = bundle.clone();
        b.watermarked_f = net.clone();
        total(&b)
    })?;
    full = full.max(gradient_check(
        &bundle.encoder.net,
        &g.encoder,
        1e-6,
        |net| {
            let mut b = bundle.clone();
            b.encoder.net = net.clone();
            total(&b)
        },
    )?);
    full = full.max(gradient_check(
        &bundle.decoder.net,
        &g.decoder,
        1e-6,
        |net| {
            let mut b = bundle.clone();
            b.decoder.net = net.clone();
            total(&b)
        },
    )?);
    Ok((
        networks < 1e-5 && full < 1e-5 && t.elapsed() < Duration::from_secs(30),
        format!("max rel err {networks:.2e} on 20 networks, {full:.2e} on the training objective"),
    ))
}

fn rate(s: &RunSummary, id: &str) -> Result<f64, Box<dyn Error>> {
    Ok(s.suspect(id)
        .ok_or_else(|| format!("no suspect {id}"))?
        .detection_rate)
}

fn c8_separation(run: &RunOutcome, elapsed: Duration) -> Outcome {
    let s = &run.summary;
    let wm = rate(s, "watermarked")?;
    let p20 = rate(s, "prune20")?;
    let p40 = rate(s, "prune40")?;
    let ft = rate(s, "finetune3")?;
    let indep: Vec<f64> = (0..5)
        .map(|i| rate(s, &format!("independent{i}")))
        .collect::<Result<_, _>>()?;
    let max_ind = indep.iter().cloned().fold(0.0, f64::max);
    let desk = s.n == 32 && s.triggers == 100 && s.k == 64 && s.tau == 5;
    Ok((
        desk && wm >= 0.95
            && max_ind <= 0.05
            && p20 >= 0.90
            && p40 >= 0.75
            && ft >= 0.70
            && elapsed < Duration::from_secs(600),
        format!(
            "R: watermarked {wm:.3}, prune20 {p20:.3}, prune40 {p40:.3}, finetune3 {ft:.3}, \
             independent max {max_ind:.3}; pipeline {:.1}s",
            elapsed.as_secs_f64()
        ),
    ))
}

fn c9_fidelity(run: &RunOutcome) -> Outcome {
    let r = run.summary.fidelity_ratio;
    Ok((
        r <= 0.1,
        format!("embedding change ratio {r:.4} on 500 held-out inputs"),
    ))
}

fn c10_covariance(run: &RunOutcome) -> Outcome {
    let describe = |c: &randmark::harness::pipeline::CovarianceSummary| -> Result<(bool, String), Box<dyn Error>> {
        let dep = c.dependent_mean_delta.ok_or("no dependent pair")?;
        let p95 = c.independent_p95.ok_or("no independent pairs")?;
        let mean = c.independent_mean.ok_or("no independent pairs")?;
        let se = c.independent_se.ok_or("fewer than two independent pairs")?;
        let count = c.pairs.iter().filter(|p| p.kind == "independent").count();
        let pass = count == 10 && dep > p95 && mean.abs() <= 3.0 * se;
        Ok((pass, format!("dependent {dep:.3e} vs p95 {p95:.3e}, independent mean {mean:.2e} (3 SE {:.2e})", 3.0 * se)))
    };
    let (hard_pass, hard) = describe(&run.summary.covariance)?;
    let (soft_pass, soft) = describe(&run.summary.covariance_soft)?;
    Ok((
        hard_pass,
        format!(
            "hard distances: {hard}; soft distances ({}): {soft}",
            if soft_pass {
                "separates"
            } else {
                "does not separate"
            }
        ),
    ))
}

fn outputs(dir: &Path, rel: &str, out: &mut Vec<(String, Vec<u8>)>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir.join(rel))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        if entry.file_type()?.is_dir() {
            outputs(dir, &path, out)?;
        } else if (path.ends_with(".csv") || path.ends_with(".json")) && path != MANIFEST_FILE {
            out.push((path.clone(), fs::read(entry.path())?));
        }
    }
    Ok(())
}

fn c11_determinism(first: &RunOutcome, config: &ExperimentConfig) -> Outcome {
    let dir = tempfile::tempdir()?;
    let second = run_pipeline(config, dir.path())?;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    outputs(&first.dir, "", &mut a)?;
    outputs(&second.dir, "", &mut b)?;
    a.sort();
    b.sort();
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let same_manifest = first.manifest.without_timings() == second.manifest.without_timings();
    Ok((
        a.len() == b.len() && differing.is_empty() && same_manifest,
        format!(
            "{} CSV/JSON files compared, {} differ, manifest {}",
            a.len(),
            differing.len(),
            if same_manifest {
                "identical up to timings"
            } else {
                "differs"
            }
        ),
    ))
}

fn population_separation(run: &RunOutcome) -> Outcome {
    let s = &run.summary;
    let omega_min = s.omega_rates.iter().cloned().fold(f64::INFINITY, f64::min);
    let xi_max = s.xi_rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((
        !s.omega_rates.is_empty() && !s.xi_rates.is_empty() && omega_min > xi_max,
        format!(
            "min omega R {omega_min:.3} over {} models, max xi R {xi_max:.3} over {} models",
            s.omega_size, s.xi_size
        ),
    ))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut report = Report { failures: 0 };
    report.check("1", "exact FPR kernel", c1_exact_fpr_kernel);
    report.check("2", "threshold calibration", c2_threshold_calibration);
    report.check(
        "3",
        "Poisson-binomial DP vs enumeration",
        c3_dp_matches_enumeration,
    );
    report.check("4", "Chernoff validity", c4_chernoff_validity);
    report.check("5", "lemma bound end to end", c5_lemma_end_to_end);
    report.check("6", "Clopper-Pearson coverage", c6_clopper_pearson_coverage);
    report.check("7", "gradient correctness", c7_gradients);

    let config = ExperimentConfig::default();
    let dir = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    match run_pipeline(&config, dir.path()) {
        Ok(run) => {
            let elapsed = t.elapsed();
            report.check("8", "end-to-end separation", || {
                c8_separation(&run, elapsed)
            });
            report.check("9", "fidelity", || c9_fidelity(&run));
            report.check("10", "covariance diagnostic", || c10_covariance(&run));
            report.check("11", "determinism", || c11_determinism(&run, &config));
            report.check("-", "omega/xi population separation", || {
                population_separation(&run)
            });
        }
        Err(e) => {
            for (id, name) in [
                ("8", "end-to-end separation"),
                ("9", "fidelity"),
                ("10", "covariance"),
                ("11", "determinism"),
            ] {
                report.check(id, name, || Err(format!("pipeline failed: {e}").into()));
            }
        }
    }
    if report.failures > 0 {
        println!("{} acceptance check(s) failed", report.failures);
        std::process::exit(1);
    }
    println!("all acceptance checks passed");
}
