//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. The desk-scale end-to-end criteria share
//! two full `reproduce` runs.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use dgreid::config::{ExperimentConfig, Preset};
use dgreid::data::{generate_synthetic_domains, make_single_shot_split, PreprocessConfig, SyntheticSpec};
use dgreid::eval::*;
use dgreid::losses::*;
use dgreid::model::checkpoint::file_sha256;
use dgreid::model::{load_extractor, softmax, BackboneConfig, GlobalModel, ModelConfig};
use dgreid::nn::Module;
use dgreid::optim::LrSchedule;
use dgreid::pipeline::{Comparison, Pipeline};
use dgreid::trainer::{read_log, train, RunSpec, TrainConfig, TrainOptions, Variant, LOG_JSONL};
use rand::Rng;

type Check = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn run(&mut self, name: &str, f: impl FnOnce() -> Check) {
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        match out {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                self.failed += 1;
                println!("FAIL  {name}: {d}");
            }
        }
    }
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let e = t.elapsed();
    if e > limit {
        Err(format!("{what} took {e:.1?}, limit {limit:?}"))
    } else {
        Ok(e)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

fn loss_oracles() -> Check {
    let t = Instant::now();
    let mut r = rng(2024);
    let cases = 1000;
    let mut worst = [0.0f64; 5];
    for _ in 0..cases {
        let n = r.gen_range(4..=32);
        let d = r.gen_range(1..=16);
        let a = random_rows(&mut r, n, d, 4.0);
        let b = random_rows(&mut r, n, d, 4.0);
        worst[0] = worst[0].max(rel(consistency_loss(&tensor(&a), &tensor(&b)).unwrap(), consistency(&a, &b)));

        let (dp, dn) = pair_distances(&a[0], &a[1], &a[2]).unwrap();
        worst[1] = worst[1].max(rel(dp, dist(&a[0], &a[1])).max(rel(dn, dist(&a[0], &a[2]))));

        let labels = random_labels(&mut r, n);
        let m = r.gen_range(0.01..2.0);
        worst[2] = worst[2].max(rel(
            batch_hard_triplet_loss(&tensor(&a), &labels, m).unwrap(),
            triplet_enumerated(&a, &labels, m),
        ));

        let classes = r.gen_range(2..40);
        let logits = random_rows(&mut r, n, classes, 8.0);
        let ys: Vec<usize> = (0..n).map(|_| r.gen_range(0..classes)).collect();
        let eps = r.gen_range(0.0..0.5);
        let probs = softmax(&tensor(&logits));
        let ce = smoothed_cross_entropy(&probs, &ys, eps, SmoothingMode::OffClass).unwrap();
        worst[3] = worst[3].max(rel(ce, smoothed_ce_from_logits(&logits, &ys, eps, SmoothingMode::OffClass)));

        let w = LossWeights {
            lambda_tri: r.gen_range(0.0..1.0),
            lambda_consis: r.gen_range(0.0..1.0),
            ..LossWeights::default()
        };
        let (c, tr, co) = (r.gen_range(0.0..5.0), r.gen_range(0.0..5.0), r.gen_range(0.0..5.0));
        worst[4] = worst[4].max(rel(total_loss(c, tr, co, &w).unwrap(), c + w.lambda_tri * tr + w.lambda_consis * co));
    }
    let e = within(t, Duration::from_secs(60), "loss oracles")?;
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let detail = format!(
        "{cases} cases each; worst rel err consis {:.1e} dist {:.1e} tri {:.1e} ce {:.1e} total {:.1e}; {e:.1?}",
        worst[0], worst[1], worst[2], worst[3], worst[4]
    );
    if max <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mining_oracle() -> Check {
    let t = Instant::now();
    let mut r = rng(99);
    let cases = 1000;
    for case in 0..cases {
        let n = r.gen_range(4..=32);
        let d = r.gen_range(1..=8);
        // coarse grid values force ties so the tie-break rule is exercised
        let rows: Vec<Vec<f64>> = if case % 3 == 0 {
            (0..n).map(|_| (0..d).map(|_| r.gen_range(-2..=2) as f64).collect()).collect()
        } else {
            random_rows(&mut r, n, d, 3.0)
        };
        let labels = random_labels(&mut r, n);
        let got = mine_batch_hard(&tensor(&rows), &labels).unwrap();
        let want = mine_enumerated(&rows, &labels);
        for (g, w) in got.iter().zip(&want) {
            if (g.positive, g.negative) != *w
                || g.d_pos != dist(&rows[g.anchor], &rows[w.0])
                || g.d_neg != dist(&rows[g.anchor], &rows[w.1])
            {
                return Err(format!("case {case} anchor {}: got {:?}, want {:?}", g.anchor, (g.positive, g.negative), w));
            }
        }
    }
    let e = within(t, Duration::from_secs(60), "mining oracle")?;
    Ok(format!("{cases} batches of size 4..=32 identical to exhaustive enumeration; {e:.1?}"))
}

fn gradient_check() -> Check {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut scalars = 0;
    let mut refined = 0;
    for seed in 0..20 {
        let rep = grad_check(&grad_fixture(1000 + seed), 1e-5, 1e-6, 1e-4);
        worst = worst.max(rep.worst_rel);
        scalars += rep.checked;
        refined += rep.refined;
    }
    let e = within(t, Duration::from_secs(120), "gradient check")?;
    let detail = format!(
        "20 instances, {scalars} scalars of F and E, worst rel err {worst:.2e} (bound 1e-4), \
         {refined} re-measured with finer steps after straddling a kink; {e:.1?}"
    );
    if worst <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cmc_oracle() -> Check {
    let mut r = rng(7);
    let mut checked = 0;
    for case in 0..100 {
        let g = if case == 0 { 1000 } else { r.gen_range(1..=1000) };
        let ids_n = r.gen_range(1..=g.min(100));
        let grows = random_rows(&mut r, g, 6, 1.0);
        let gids: Vec<usize> = (0..g).map(|i| if i < ids_n { i } else { r.gen_range(0..ids_n) }).collect();
        let gal = EmbeddingMatrix::new(6, grows.concat(), gids.clone(), vec![0; g]).unwrap();
        let probes = random_rows(&mut r, 10, 6, 1.0);
        let pids: Vec<usize> = (0..10).map(|_| r.gen_range(0..ids_n)).collect();
        let mut ranked = Vec::new();
        for p in &probes {
            let order = rank_gallery(p, &gal).unwrap();
            if order != rank_sorted(p, &grows) {
                return Err(format!("case {case}: ranking differs from sort oracle"));
            }
            ranked.push(order.into_iter().map(|i| gids[i]).collect::<Vec<_>>());
        }
        let c = compute_cmc(&ranked, &pids).unwrap();
        if c != cmc_counted(&ranked, &pids) {
            return Err(format!("case {case}: CMC differs from counting oracle"));
        }
        checked += 1;
    }
    Ok(format!("{checked} galleries of size 1..=1000, ranking and curve exactly equal to oracles"))
}

fn cmc_monotone() -> Check {
    let mut r = rng(8);
    let cases = 2000;
    for case in 0..cases {
        let g = r.gen_range(1..200);
        let p = r.gen_range(1..30);
        let ids_n = r.gen_range(1..=g);
        let ranked: Vec<Vec<usize>> = (0..p)
            .map(|_| {
                let mut ids: Vec<usize> = (0..g).map(|i| if i < ids_n { i } else { r.gen_range(0..ids_n) }).collect();
                for i in (1..g).rev() {
                    ids.swap(i, r.gen_range(0..=i));
                }
                ids
            })
            .collect();
        let pids: Vec<usize> = (0..p).map(|_| r.gen_range(0..ids_n)).collect();
        let c = compute_cmc(&ranked, &pids).unwrap();
        if !c.windows(2).all(|w| w[0] <= w[1]) || (c[c.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(format!("case {case}: curve not monotone to 1"));
        }
    }
    Ok(format!("{cases} fuzzed inputs, every curve nondecreasing and ending at 1"))
}

fn desk_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.seed = 0;
    cfg.out = out.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

fn chance_check(cfg: &ExperimentConfig) -> Check {
    let p = Pipeline::new(cfg.clone(), false);
    let data = p.load_data().map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for t in &data.targets {
        let protocol = cfg.protocol_for(t).unwrap();
        let opts = EvalOptions {
            n_splits: cfg.eval.n_splits,
            cross_camera: false,
        };
        let res = evaluate_null_model(t, protocol, opts, cfg.model.d_emb, p.eval_seed()).unwrap();
        let split = make_single_shot_split(t, protocol, res.split_seeds[0]).unwrap();
        let chance = 1.0 / gallery_identities(&split) as f64;
        let (mean, se) = mean_and_stderr(&res.per_split_rank1);
        ok &= (mean - chance).abs() <= 3.0 * se;
        lines.push(format!("{}: rank-1 {:.4} vs chance {:.4} (3 SE = {:.4})", t.name, mean, chance, 3.0 * se));
    }
    let detail = format!("identity-agnostic untrained embeddings, {}", lines.join("; "));
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_network_info(cfg: &ExperimentConfig) -> String {
    let p = Pipeline::new(cfg.clone(), false);
    let data = p.load_data().unwrap();
    let t = &data.targets[0];
    let m = GlobalModel::new(cfg.model_config(), data.sources.label_map().total_identities(), cfg.seed).unwrap();
    let opts = EvalOptions {
        n_splits: cfg.eval.n_splits,
        cross_camera: false,
    };
    let r = evaluate_target(&m, t, cfg.protocol_for(t).unwrap(), opts, &cfg.preprocess(), p.eval_seed()).unwrap();
    let (mean, se) = mean_and_stderr(&r.per_split_rank1);
    format!("randomly initialized network on {}: rank-1 {mean:.4} ± {se:.4} (not a criterion; random conv features carry colour)", t.name)
}

struct DeskRun {
    comparison: Comparison,
    results: Vec<u8>,
    variant_results: Vec<Vec<u8>>,
    elapsed: Duration,
    stage1_before: Vec<(String, Vec<f64>)>,
    stage1_after: Vec<(String, Vec<f64>)>,
}

fn stage1_state(cfg: &ExperimentConfig) -> Vec<(String, Vec<f64>)> {
    (0..cfg.data.synthetic.source_domains)
        .map(|d| {
            let path = cfg.out.join("stage1").join(format!("F_{d}.ckpt"));
            let (f, _) = load_extractor(&path).unwrap();
            (file_sha256(&path).unwrap(), f.flat_params())
        })
        .collect()
}

/// Full desk pipeline; optionally pauses after stage 1 to snapshot the
/// frozen extractors.
fn desk_run(out: &Path, snapshot: bool) -> DeskRun {
    let cfg = desk_config(out);
    let p = Pipeline::new(cfg.clone(), false);
    let t = Instant::now();
    let mut before = Vec::new();
    if snapshot {
        p.ensure_data().unwrap();
        p.cmd_pretrain().unwrap();
        before = stage1_state(&cfg);
    }
    let comparison = p.cmd_reproduce().unwrap();
    let elapsed = t.elapsed();
    let after = stage1_state(&cfg);
    let variant_results = [Variant::Full, Variant::NoTri, Variant::NoConsis]
        .iter()
        .map(|v| fs::read(p.eval_dir(*v).join("results.json")).unwrap())
        .collect();
    DeskRun {
        comparison,
        results: fs::read(out.join("results.json")).unwrap(),
        variant_results,
        elapsed,
        stage1_before: before,
        stage1_after: after,
    }
}

fn rank1(c: &Comparison, variant: &str) -> f64 {
    c.rows.iter().find(|r| r.variant == variant).unwrap().average_rank1
}

fn schedule_full_scale() -> Check {
    let spec = SyntheticSpec {
        ids_per_domain: 2,
        images_per_id: 2,
        target_domains: 0,
        height: 16,
        width: 8,
        ..SyntheticSpec::default()
    };
    let suite = generate_synthetic_domains(&spec, 1).unwrap();
    let model = ModelConfig {
        backbone: BackboneConfig::tiny_with(16, 8, 2, 4, true),
        d_emb: 2,
        encoder_hidden: 2,
    };
    let pre = PreprocessConfig {
        height: 16,
        width: 8,
        pad: 2,
        ..PreprocessConfig::default()
    };
    let train_cfg = TrainConfig {
        p: 2,
        k: 2,
        ..TrainConfig::default()
    };
    if (train_cfg.epochs, train_cfg.lr_drop_epoch) != (150, 100) {
        return Err("default training config is not the full-scale 150/100 schedule".into());
    }
    let dir = tempfile::tempdir().unwrap();
    let run = RunSpec {
        collection: &suite.sources,
        model: &model,
        train: &train_cfg,
        preprocess: &pre,
        variant: Variant::Baseline,
        seed: 0,
        init_weights: None,
    };
    train(&run, Vec::new(), dir.path(), &TrainOptions::default()).map_err(|e| e.to_string())?;
    let log = read_log(&dir.path().join(LOG_JSONL)).unwrap();
    check_trace(&log, 150, 100)?;
    Ok(format!("{} logged iterations over 150 epochs: 0.01 through epoch 100, 0.001 after", log.len()))
}

fn check_trace(log: &[dgreid::trainer::LogRecord], epochs: usize, drop: usize) -> Result<(), String> {
    let last = log.last().ok_or("empty log")?;
    if last.epoch != epochs {
        return Err(format!("log ends at epoch {}", last.epoch));
    }
    for r in log {
        let want = if r.epoch <= drop { 0.01 } else { 0.001 };
        if r.lr != want {
            return Err(format!("iteration {} (epoch {}) lr {} expected {want}", r.iteration, r.epoch, r.lr));
        }
    }
    let sched = LrSchedule::proportional(0.01, epochs);
    if sched.drop_epoch != drop {
        return Err(format!("proportional mapping gives drop at {}", sched.drop_epoch));
    }
    Ok(())
}

fn main() {
    let mut s = Suite { failed: 0 };
    s.run("loss oracles (consistency, distances, triplet, cross-entropy, total) to 1e-9", loss_oracles);
    s.run("batch-hard mining equals exhaustive enumeration", mining_oracle);
    s.run("gradient check of L_total w.r.t. F and E", gradient_check);
    s.run("CMC ranking and curve equal brute-force oracles", cmc_oracle);
    s.run("CMC curve monotone on fuzzed inputs", cmc_monotone);
    s.run("schedule conformance, full-scale 150/100", schedule_full_scale);

    let root = tempfile::tempdir().unwrap();
    let a_dir = root.path().join("a");
    let b_dir = root.path().join("b");
    let a = catch_unwind(|| desk_run(&a_dir, true));
    let b = catch_unwind(|| desk_run(&b_dir, false));
    let (a, b) = match (a, b) {
        (Ok(a), Ok(b)) => (a, b),
        _ => {
            println!("FAIL  desk-scale reproduce: pipeline aborted; end-to-end criteria not evaluated");
            std::process::exit(1);
        }
    };
    let cfg = desk_config(&a_dir);

    s.run("freeze invariant: stage-1 checkpoints bit-identical after stage 2", || {
        let same = a.stage1_before.len() == 3
            && a.stage1_before.iter().zip(&a.stage1_after).all(|(x, y)| x.0 == y.0 && x.1 == y.1);
        let detail = format!(
            "{} extractors, {} parameters compared after full, w/o L_tri and w/o L_consis runs",
            a.stage1_after.len(),
            a.stage1_after.iter().map(|x| x.1.len()).sum::<usize>()
        );
        if same {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
    s.run("untrained rank-1 within 3 SE of chance", || chance_check(&cfg));
    println!("INFO  {}", random_network_info(&cfg));

    let c = &a.comparison;
    let full = rank1(c, "full");
    let chance = c.chance_rank1.iter().sum::<f64>() / c.chance_rank1.len() as f64;
    s.run("headline (a): full method rank-1 > 5x chance", || {
        let d = format!("rank-1 {:.1}% vs 5 x chance {:.2}%", 100.0 * full, 500.0 * chance);
        if full > 5.0 * chance {
            Ok(d)
        } else {
            Err(d)
        }
    });
    for (variant, label) in [("no-tri", "w/o L_tri"), ("no-consis", "w/o L_consis")] {
        s.run(&format!("headline (b): full >= {label} - 2 pp"), || {
            let other = rank1(c, variant);
            let d = format!("full {:.1}% vs {label} {:.1}% (margin {:+.1} pp)", 100.0 * full, 100.0 * other, 100.0 * (full - other));
            if full >= other - 0.02 {
                Ok(d)
            } else {
                Err(d)
            }
        });
    }
    s.run("reproduce runtime <= 30 min", || {
        let d = format!("{:.1?} on this machine (run b, from scratch)", b.elapsed);
        if b.elapsed <= Duration::from_secs(30 * 60) {
            Ok(d)
        } else {
            Err(d)
        }
    });
    s.run("determinism: two reproduce runs give identical results files", || {
        if a.results == b.results && a.variant_results == b.variant_results {
            Ok(format!("results.json and 3 per-variant result files byte-identical ({} bytes)", a.results.len()))
        } else {
            Err("results differ between runs".into())
        }
    });
    s.run("schedule conformance, desk 15/10", || {
        let log = read_log(&a_dir.join("runs/full/stage2").join(LOG_JSONL)).map_err(|e| e.to_string())?;
        check_trace(&log, 15, 10)?;
        Ok(format!("{} logged iterations: 0.01 through epoch 10, 0.001 for 11..=15", log.len()))
    });

    if s.failed > 0 {
        println!("{} criterion(s) failed", s.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
