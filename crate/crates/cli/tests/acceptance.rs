//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use moekit::baselines::{
    apply_prune, binomial, f_prune, msmoe_group, o_prune, s_prune, OPruneBudget, OPruneObjective, OPruneOptions,
};
use moekit::calibration::{collect_stats, CalibrationOptions, CalibrationStats};
use moekit::clustering::{
    distance_matrix, hierarchical_cluster, kmeans_cluster, FcmOptions, FeatureKind, FeatureMatrix, KMeansInit, Linkage,
    RouterFeature,
};
use moekit::evaluation::{
    adjusted_rand_index, fcm_merge_eval, jensen_check, opt_partition_oracle, output_fidelity, partition_cost, stirling2,
};
use moekit::merging::{FixDomFeatures, MergeStrategy};
use moekit::pipeline::{cluster_model, hc_smoe, merge_model, Algorithm, ClusterConfig, FeatureSource};
use moekit::synth::{gen_batch, gen_planted_model, CounterRng, PlantedSpec};
use moekit::{MoeModel, TokenBatch};

const SEEDS: u64 = 100;

fn planted(noise: f64, seed: u64) -> PlantedSpec {
    PlantedSpec {
        layers: 4,
        experts: 16,
        groups: 4,
        d_h: 32,
        d_m: 64,
        k: 2,
        noise,
        seed,
    }
}

fn instance(
    spec: &PlantedSpec,
    tokens: usize,
    cache: bool,
) -> (MoeModel, Vec<Vec<usize>>, TokenBatch, CalibrationStats) {
    let (model, truth) = gen_planted_model(spec).expect("generate model");
    let batch = gen_batch(spec, tokens).expect("generate batch");
    let options = if cache {
        CalibrationOptions::with_cache()
    } else {
        CalibrationOptions::default()
    };
    let stats = collect_stats(&model, &batch, &options).expect("calibrate");
    (model, truth, batch, stats)
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("thread pool")
        .install(f)
}

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn c1_planted_recovery() -> Outcome {
    let start = Instant::now();
    let (hc, km) = single_threaded(|| {
        let mut hc = 0;
        let mut km = 0;
        for seed in 0..SEEDS {
            let (_, truth, _, stats) = instance(&planted(0.01, seed), 512, false);
            let mut hc_ok = true;
            let mut km_ok = true;
            for (l, layer_truth) in truth.iter().enumerate() {
                let f = FeatureMatrix::expert_outputs(&stats.layers[l]).unwrap();
                let a = hierarchical_cluster(&distance_matrix(&f).unwrap(), 4, Linkage::Average).unwrap();
                hc_ok &= adjusted_rand_index(&a.labels, layer_truth) == 1.0;
                let k = kmeans_cluster(
                    &f,
                    4,
                    KMeansInit::Random {
                        seed: seed * 31 + l as u64,
                    },
                    100,
                )
                .unwrap();
                km_ok &= adjusted_rand_index(&k.labels, layer_truth) == 1.0;
            }
            hc += usize::from(hc_ok);
            km += usize::from(km_ok);
        }
        (hc, km)
    });
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: hc == SEEDS as usize && km <= hc && secs < 30.0,
        detail: format!(
            "HC-average ARI=1 in {hc}/{SEEDS} seeds, K-means-random in {km}/{SEEDS}; {secs:.2}s single-threaded"
        ),
    }
}

fn c2_jensen() -> Outcome {
    let mut violations = 0;
    let mut checked = 0;
    let mut min_slack = f64::INFINITY;
    for seed in 0..50 {
        let spec = PlantedSpec {
            layers: 1,
            experts: 8,
            groups: 8,
            d_h: 32,
            d_m: 64,
            k: 2,
            noise: 0.0,
            seed: 1000 + seed,
        };
        let (model, _, batch, stats) = instance(&spec, 1024, false);
        let (merged, _) = hc_smoe(&model, &stats, 4, Linkage::Average, MergeStrategy::Average).unwrap();
        for t in 0..batch.len() {
            let c = jensen_check(&model.layers()[0], &merged.layers()[0], batch.token(t)).unwrap();
            checked += 1;
            min_slack = min_slack.min(c.bound - c.error);
            if c.error > c.bound + 1e-6 {
                violations += 1;
            }
        }
    }
    Outcome {
        pass: violations == 0 && checked == 50 * 1024,
        detail: format!("{violations} violations over {checked} tokens in 50 layers; min slack {min_slack:.3e}"),
    }
}

fn c3_three_opt() -> Outcome {
    let start = Instant::now();
    let (worst, count_mismatch) = single_threaded(|| {
        let mut worst = 0.0f64;
        let mut mismatch = 0;
        for trial in 0..200u64 {
            let n = [6, 8, 10][trial as usize % 3];
            let r = [2, 3, 4][(trial as usize / 3) % 3];
            let mut rng = CounterRng::new(trial, 0x3017);
            let rows = (0..n).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
            let f = FeatureMatrix::new(FeatureKind::ExpertOutput, rows).unwrap();
            let hc = hierarchical_cluster(&distance_matrix(&f).unwrap(), r, Linkage::Average).unwrap();
            let opt = opt_partition_oracle(&f, r).unwrap();
            mismatch += usize::from(opt.enumerated != stirling2(n, r));
            worst = worst.max(partition_cost(&f, &hc.labels).unwrap() / opt.cost);
        }
        (worst, mismatch)
    });
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 3.0 && count_mismatch == 0 && secs < 60.0,
        detail: format!(
            "max cost(HC)/OPT = {worst:.4} over 200 trials; {count_mismatch} Stirling count mismatches; {secs:.2}s"
        ),
    }
}

fn relative_l2(a: &TokenBatch, b: &TokenBatch) -> f64 {
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (x, y) in a.matrix().as_slice().iter().zip(b.matrix().as_slice()) {
        num += (f64::from(*x) - f64::from(*y)).powi(2);
        den += f64::from(*x).powi(2);
    }
    (num / den).sqrt()
}

fn c4_lossless() -> Outcome {
    let (model, _, batch, stats) = instance(&planted(0.0, 7), 256, true);
    let reference = model.forward(&batch).unwrap();
    let assignments = cluster_model(&model, &stats, &[4; 4], &ClusterConfig::default()).unwrap();
    let variants = [
        ("average", MergeStrategy::Average, None),
        ("frequency", MergeStrategy::Frequency, None),
        ("fixdom-act", MergeStrategy::FixDom, Some(FixDomFeatures::Activation)),
        ("fixdom-weight", MergeStrategy::FixDom, Some(FixDomFeatures::Weight)),
        (
            "fixdom-act+weight",
            MergeStrategy::FixDom,
            Some(FixDomFeatures::ActivationWeight),
        ),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, strategy, features) in variants {
        let (merged, _) = merge_model(&model, &stats, &assignments, strategy, features).unwrap();
        assert_eq!(merged.layers()[0].n_stored(), 4);
        let rel = relative_l2(&reference, &merged.forward(&batch).unwrap());
        worst = worst.max(rel);
        parts.push(format!("{name} {rel:.1e}"));
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!("relative L2 over 256 tokens: {}", parts.join(", ")),
    }
}

fn c5_method_ordering() -> Outcome {
    let mut wins = 0;
    let mut losses = Vec::new();
    for seed in 0..SEEDS {
        let (model, _, batch, stats) = instance(&planted(0.05, seed), 512, false);
        let l2 = |m: &MoeModel| output_fidelity(&model, m, &batch).unwrap().l2_sum;
        let (hc, _) = hc_smoe(&model, &stats, 8, Linkage::Average, MergeStrategy::Frequency).unwrap();
        let msmoe_assign: Vec<_> = (0..model.num_layers())
            .map(|l| {
                let f = FeatureMatrix::router_logits(&model.layers()[l], &stats.layers[l], RouterFeature::LogitProfile)
                    .unwrap();
                msmoe_group(&stats.layers[l], &f, 8).unwrap()
            })
            .collect();
        let (msmoe, _) = merge_model(&model, &stats, &msmoe_assign, MergeStrategy::Frequency, None).unwrap();
        let fp = apply_prune(&model, &f_prune(&stats, 0.5).unwrap()).unwrap();
        let sp = apply_prune(&model, &s_prune(&stats, 0.5).unwrap()).unwrap();
        let h = l2(&hc);
        let others = [l2(&msmoe), l2(&fp), l2(&sp)];
        if others.iter().all(|&o| h <= o) {
            wins += 1;
        } else {
            losses.push(seed);
        }
    }
    Outcome {
        pass: wins >= 95,
        detail: format!("HC-SMoE L2 <= M-SMoE, F-prune, S-prune in {wins}/{SEEDS} seeds (losing seeds {losses:?})"),
    }
}

fn c6_oprune_equivalence() -> Outcome {
    let mut agree = 0;
    for seed in 0..50 {
        let spec = PlantedSpec {
            layers: 1,
            experts: 8,
            groups: 8,
            d_h: 16,
            d_m: 32,
            k: 2,
            noise: 0.0,
            seed: 5000 + seed,
        };
        let (model, _, batch, _) = instance(&spec, 128, false);
        let exhaustive = o_prune(&model, &batch, 4, &OPruneOptions::default()).unwrap();
        let sampled = o_prune(
            &model,
            &batch,
            4,
            &OPruneOptions {
                budget: OPruneBudget::Sampled {
                    samples: binomial(8, 4) as usize,
                    seed,
                },
                objective: OPruneObjective::LayerLocal,
                retain_enumeration: false,
            },
        )
        .unwrap();
        agree += usize::from(exhaustive.layers[0].kept == sampled.layers[0].kept);
    }
    Outcome {
        pass: agree == 50,
        detail: format!("sampled (N=C(8,4)=70) and exhaustive chose the same subset in {agree}/50 layers"),
    }
}

fn moekit(args: &[&str], dir: &Path) -> serde_json::Value {
    let out = Command::new(env!("CARGO_BIN_EXE_moekit"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn moekit");
    assert!(
        out.status.success(),
        "moekit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap_or(serde_json::Value::Null)
}

fn c7_params() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let published = [
        ("qwen1.5-moe-a2.7b", [60u64, 45, 30], [14.3e9, 11.2e9, 8.1e9]),
        ("mixtral-8x7b", [8, 6, 4], [46.7e9, 35.6e9, 24.3e9]),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (preset, experts, totals) in published {
        let mut args = vec!["params", "--preset", preset];
        let counts: Vec<String> = experts.iter().map(u64::to_string).collect();
        for c in &counts {
            args.extend(["--experts", c.as_str()]);
        }
        let doc = moekit(&args, dir.path());
        for (report, want) in doc["payload"]["reports"].as_array().unwrap().iter().zip(totals) {
            let got = report["total_params_after"].as_f64().unwrap();
            let rel = (got - want).abs() / want;
            worst = worst.max(rel);
            parts.push(format!("{:.2}B vs {:.1}B", got / 1e9, want / 1e9));
        }
    }
    Outcome {
        pass: worst <= 0.02,
        detail: format!("{}; max deviation {:.2}%", parts.join(", "), worst * 100.0),
    }
}

fn pipeline_run(dir: &Path) -> Vec<(String, Vec<u8>)> {
    moekit(
        &[
            "gen",
            "--set",
            "seed=42",
            "--set",
            "noise=0.05",
            "--model",
            "m.smck",
            "--batch",
            "b.f32m",
            "--tokens",
            "256",
            "--out",
            "gen.json",
        ],
        dir,
    );
    moekit(
        &[
            "calibrate",
            "--model",
            "m.smck",
            "--batch",
            "b.f32m",
            "--stats",
            "stats.json",
            "--cache-activations",
            "--out",
            "cal.json",
        ],
        dir,
    );
    moekit(
        &[
            "cluster",
            "--model",
            "m.smck",
            "--stats",
            "stats.json",
            "--budget",
            "8",
            "--out",
            "clusters.json",
        ],
        dir,
    );
    moekit(
        &[
            "merge",
            "--model",
            "m.smck",
            "--stats",
            "stats.json",
            "--assignments",
            "clusters.json",
            "--strategy",
            "fixdom",
            "--fixdom-features",
            "act+weight",
            "--output-model",
            "merged.smck",
            "--out",
            "plan.json",
        ],
        dir,
    );
    [
        "m.smck",
        "b.f32m",
        "stats.json",
        "stats.json.act",
        "clusters.json",
        "plan.json",
        "merged.smck",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
    .collect()
}

fn c8_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_run(a.path());
    let second = pipeline_run(b.path());
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    Outcome {
        pass: differing.is_empty(),
        detail: if differing.is_empty() {
            format!(
                "{} artifacts byte-identical across two runs (labels, plan, checkpoints)",
                first.len()
            )
        } else {
            format!("differing artifacts: {differing:?}")
        },
    }
}

fn c9_fcm_degradation() -> Outcome {
    let mut worse = 0;
    for seed in 0..SEEDS {
        let (model, _, batch, stats) = instance(&planted(0.05, seed), 512, false);
        let (hc, _) = hc_smoe(&model, &stats, 8, Linkage::Average, MergeStrategy::Average).unwrap();
        let hard = output_fidelity(&model, &hc, &batch).unwrap().l2_sum;
        let soft = fcm_merge_eval(&model, &stats, &batch, 8, &FcmOptions::default()).unwrap();
        worse += usize::from(soft.quality.fidelity.l2_sum > hard);
    }
    Outcome {
        pass: worse >= 95,
        detail: format!("FCM soft merge strictly worse than HC hard merge in {worse}/{SEEDS} seeds"),
    }
}

fn c10_metric_linkage() -> Outcome {
    let mut ok = 0;
    let mut failures = Vec::new();
    for seed in 0..20 {
        let (model, truth, _, stats) = instance(&planted(0.01, 9000 + seed), 512, false);
        let mut seed_ok = true;
        for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
            let ari = |features| -> Vec<f64> {
                let config = ClusterConfig {
                    features,
                    algorithm: Algorithm::Hierarchical(linkage),
                };
                cluster_model(&model, &stats, &[4; 4], &config)
                    .unwrap()
                    .iter()
                    .zip(&truth)
                    .map(|(a, t)| adjusted_rand_index(&a.labels, t))
                    .collect()
            };
            let eo = ari(FeatureSource::ExpertOutput);
            let rl = ari(FeatureSource::RouterLogits(RouterFeature::LogitProfile));
            let rw = ari(FeatureSource::RouterLogits(RouterFeature::WeightColumn));
            let pass = eo.iter().all(|&v| v == 1.0) && rl.iter().all(|&v| v < 1.0) && rw.iter().all(|&v| v < 1.0);
            if !pass {
                failures.push(format!("seed {seed} {linkage}"));
            }
            seed_ok &= pass;
        }
        ok += usize::from(seed_ok);
    }
    Outcome {
        pass: ok == 20,
        detail: format!(
            "expert-output ARI=1 and router-logit ARI<1 (both router variants, every layer, all linkages) in {ok}/20 seeds {failures:?}"
        ),
    }
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 planted-partition recovery", c1_planted_recovery),
        ("2 Jensen bound", c2_jensen),
        ("3 3*OPT empirical check", c3_three_opt),
        ("4 lossless duplicate merge", c4_lossless),
        ("5 method ordering", c5_method_ordering),
        ("6 O-prune oracle equivalence", c6_oprune_equivalence),
        ("7 parameter arithmetic", c7_params),
        ("8 determinism", c8_determinism),
        ("9 FCM degradation", c9_fcm_degradation),
        ("10 metric/linkage interaction", c10_metric_linkage),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = run();
        let tag = if outcome.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {name}: {}", outcome.detail);
        failed += usize::from(!outcome.pass);
    }
    println!("acceptance: {}/10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
