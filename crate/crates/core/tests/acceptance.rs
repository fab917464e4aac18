//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `BANDFUSE_AC=1,4,9` restricts the run to the listed criteria. AC6 and
//! AC7 train desk-scale models and dominate the runtime.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use bandfuse_core::checkpoint::Checkpoint;
use bandfuse_core::config::FusionConfig;
use bandfuse_core::container::SampleRecord;
use bandfuse_core::dataset::{gen_dataset, Dataset, Sample};
use bandfuse_core::diagnostics::{embed_view, sample_batch, similarity_matrix};
use bandfuse_core::finetune::{finetune_logs_to_csv, FinetuneModel, Finetuner, DECODER_PREFIX, FUSION_PREFIX};
use bandfuse_core::fusion::{fusion_param_count, Fusion};
use bandfuse_core::init::Init;
use bandfuse_core::model::{count_params, SwavModel};
use bandfuse_core::pyramid::{pyramid_geometry, Pyramid};
use bandfuse_core::swav::{sinkhorn, swav_loss, swav_targets};
use bandfuse_core::train::{logs_to_csv, sample_views, EpochLog, Pretrainer};
use bandfuse_core::{Config, Error, Graph, ParamStore, Tensor};
use common::module_checks::MODULE_CHECKS;
use common::op_cases::op_cases;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// Dataset seeds: pretraining data and the labelled fine-tuning set are
/// drawn independently.
const PRETRAIN_DATA_SEED: u64 = 1;
const FINETUNE_DATA_SEED: u64 = 2;
const PRETRAIN_SEED: u64 = 0;
const PRETRAIN_SAMPLES: u64 = 2000;
const FT_TRAIN: usize = 400;
const FT_VAL: usize = 100;
const FT_SEEDS: u64 = 3;

struct Pretrained {
    cfg: Config,
    samples: Vec<Sample>,
    logs: Vec<EpochLog>,
    checkpoint: Checkpoint,
    seconds: f64,
}

#[derive(Default)]
struct Shared {
    pretrained: Option<Pretrained>,
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("BANDFUSE_AC")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let criteria: [(u32, &str, fn(&mut Shared) -> Outcome); 9] = [
        (1, "gradient suite", ac1_gradients),
        (2, "geometry law", ac2_geometry),
        (3, "fusion contracts", ac3_fusion),
        (4, "sinkhorn", ac4_sinkhorn),
        (5, "swav loss", ac5_swav_loss),
        (6, "desk-scale pretraining", ac6_pretraining),
        (7, "fine-tuning protocol", ac7_finetuning),
        (8, "determinism", ac8_determinism),
        (9, "formats", ac9_formats),
    ];
    let mut failed = 0;
    for (id, title, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            println!("AC{id} SKIP {title}");
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("AC{id} PASS {title} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("AC{id} FAIL {title} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "non-string panic".into())
}

fn e2s(e: Error) -> String {
    e.to_string()
}

fn ac1_gradients(_: &mut Shared) -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut checks = 0;
    for seed in 0..5u64 {
        let mut errs: Vec<(String, f64)> = op_cases(seed)
            .into_iter()
            .map(|c| (c.name.to_string(), common::check_inputs(&c.inputs, c.build.as_ref())))
            .collect();
        for (_, check) in MODULE_CHECKS {
            errs.extend(check(seed).into_iter().map(|(n, e)| (n.to_string(), e)));
        }
        for (name, err) in errs {
            checks += 1;
            ensure!(err < common::FD_TOL, "{name} seed {seed}: relative error {err:e}");
            if err >= worst.0 {
                worst = (err, name);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s (limit 120s)");
    Ok(format!(
        "{checks} checks over 5 seeds, worst {:.2e} ({}), {secs:.1}s",
        worst.0, worst.1
    ))
}

fn ac2_geometry(_: &mut Shared) -> Outcome {
    for (n_p, blocks, d) in [(8, 3, 16), (16, 4, 128), (8, 2, 8), (16, 3, 32)] {
        let levels = pyramid_geometry(n_p, blocks, 2, d).map_err(e2s)?;
        let last = *levels.last().unwrap();
        let want = (n_p >> (blocks - 1), d << (blocks - 1));
        ensure!(last == want, "({n_p},{blocks},{d}): got {last:?}, want {want:?}");
    }
    // The built model agrees with the formula, for the desk pyramid and a
    // narrow stand-in with the paper profile's patch grid and block count.
    let paper = Config::paper();
    let pm = &paper.model;
    let paper_levels = pyramid_geometry(pm.n_p, pm.pyramid.blocks, pm.pyramid.merge_factor, pm.d).map_err(e2s)?;
    ensure!(
        *paper_levels.last().unwrap() == (2, 1024),
        "paper deepest level {:?}",
        paper_levels.last()
    );
    let mut narrow = pm.pyramid.clone();
    narrow.layers_per_block = 1;
    narrow.heads = 2;
    narrow.merge_query_dim = 8;
    narrow.merge_heads = 2;
    for (n_p, d, cfg) in [(pm.n_p, 8, narrow), (Config::desk().model.n_p, Config::desk().model.d, Config::desk().model.pyramid)] {
        let mut store = ParamStore::<f32>::new();
        let pyr = Pyramid::new(&mut store, &mut Init::new(0), n_p, d, &cfg, 1e-5).map_err(e2s)?;
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, n_p * n_p, d]));
        let out = pyr.forward(&mut g, &store, x).map_err(e2s)?;
        let deep = g.shape(out.deepest()).to_vec();
        let (side, dim) = *pyramid_geometry(n_p, cfg.blocks, 2, d).map_err(e2s)?.last().unwrap();
        ensure!(deep == [1, side * side, dim], "built pyramid n_p={n_p} d={d}: deepest {deep:?}");
    }
    Ok("4 configs exact; paper deepest grid 2×2×1024; built pyramids match".into())
}

fn desk_batch(cfg: &Config, n: u64, seed: u64) -> Vec<Vec<Vec<f32>>> {
    (0..n)
        .map(|i| {
            let r = bandfuse_core::synth::generate_sample(&cfg.data, seed, i).unwrap();
            r.bands().map(|b| b.data.clone()).collect()
        })
        .collect()
}

fn ac3_fusion(_: &mut Shared) -> Outcome {
    let cfg = Config::desk();
    let (store, model) = SwavModel::build::<f32>(&cfg).map_err(e2s)?;
    let samples = desk_batch(&cfg, 4, 7);
    let refs: Vec<&[Vec<f32>]> = samples.iter().map(Vec::as_slice).collect();
    let nb = cfg.data.n_bands();

    // Scores are distributions over bands, with and without dropped bands.
    let mut masks = vec![vec![false; nb]; refs.len()];
    masks[1][0] = true;
    masks[2] = vec![true, true, false, false, false, true, true];
    let batch = sample_batch(&model, &refs, &masks).map_err(e2s)?;
    let mut g = Graph::new();
    let out = model.encoder.forward(&mut g, &store, &batch).map_err(e2s)?;
    let mut worst_sum = 0.0f64;
    for row in g.value(out.band_scores).data().chunks(nb) {
        worst_sum = worst_sum.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
    }
    ensure!(worst_sum <= 1e-6, "score row sums off by {worst_sum:e}");

    // Dropped-band pixels never reach the output.
    let mut altered = samples.clone();
    for s in &mut altered {
        for v in s[0].iter_mut() {
            *v = 1e3 - *v;
        }
    }
    let drop_first = vec![{
        let mut m = vec![false; nb];
        m[0] = true;
        m
    }; refs.len()];
    let encode = |bands: &[Vec<Vec<f32>>]| -> Result<Vec<Vec<f32>>, String> {
        let imgs: Vec<Vec<Option<&[f32]>>> =
            bands.iter().map(|s| s.iter().map(|b| Some(b.as_slice())).collect()).collect();
        let batch = model.encoder.input.patch_batch(&imgs, &drop_first).map_err(e2s)?;
        let mut g = Graph::new();
        let (z, out) = model.embed(&mut g, &store, &batch).map_err(e2s)?;
        Ok([z, out.fused, out.band_scores, out.pyramid.deepest()]
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect())
    };
    ensure!(encode(&samples)? == encode(&altered)?, "dropped band pixels changed the encoder output");

    // Permuting the band axis permutes scores and leaves the fused token.
    let fcfg = FusionConfig {
        query_dim: 16,
        heads: 4,
        bias: true,
    };
    let mut fstore = ParamStore::<f32>::new();
    let fusion = Fusion::new(&mut fstore, &mut Init::new(3), "f", 8, 8, &fcfg).map_err(e2s)?;
    let mut r = common::rng(5);
    let raw = common::randn(&mut r, &[6, 5, 8], 1.0);
    let tokens = Tensor::<f32>::from_fn([6, 5, 8], |i| raw.data()[i] as f32);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted = Tensor::from_fn([6, 5, 8], |i| {
        let (row, rest) = (i / 40, i % 40);
        let (band, c) = (rest / 8, rest % 8);
        tokens.data()[row * 40 + perm[band] * 8 + c]
    });
    let run = |t: &Tensor<f32>| {
        let mut g = Graph::new();
        let v = g.input(t.clone());
        let o = fusion.forward(&mut g, &fstore, v).unwrap();
        (g.value(o.fused).clone(), g.value(o.scores).clone())
    };
    let (f0, s0) = run(&tokens);
    let (f1, s1) = run(&permuted);
    let fused_dev = f0.data().iter().zip(f1.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure!(fused_dev <= 1e-5, "fused tokens moved by {fused_dev:e} under band permutation");
    let mut score_dev = 0.0f32;
    for (r0, r1) in s0.data().chunks(5).zip(s1.data().chunks(5)) {
        for (j, &p) in perm.iter().enumerate() {
            score_dev = score_dev.max((r1[j] - r0[p]).abs());
        }
    }
    ensure!(score_dev <= 1e-5, "scores not permuted with the bands ({score_dev:e})");

    let count = fusion_param_count(128, 128, 4096, 8, false);
    ensure!(count == 790_528, "fusion_param_count(128,128,4096,8) = {count}");
    for counts in [count_params(&cfg, true).map_err(e2s)?, count_params(&small_paper_like(), true).map_err(e2s)?] {
        for c in &counts {
            ensure!(c.enumerated == Some(c.analytic), "{}: analytic {} enumerated {:?}", c.module, c.analytic, c.enumerated);
        }
    }
    let paper_total: usize = count_params(&Config::paper(), false).map_err(e2s)?.iter().map(|c| c.analytic).sum();
    let rel = paper_total as f64 / 103e6 - 1.0;
    ensure!(rel.abs() <= 0.30, "paper-profile total {paper_total} is {:+.1}% from ~103M", rel * 100.0);
    Ok(format!(
        "row sums within {worst_sum:.1e}, permutation {fused_dev:.1e}/{score_dev:.1e}, drop independence exact, \
         790,528 fusion params, paper total {paper_total} ({:+.1}% vs ~103M)",
        rel * 100.0
    ))
}

/// Paper band layout with a narrow model, small enough to enumerate.
fn small_paper_like() -> Config {
    let mut c = Config::paper();
    c.model.d = 8;
    c.model.fusion.query_dim = 8;
    c.model.fusion.heads = 2;
    c.model.pyramid.layers_per_block = 1;
    c.model.pyramid.heads = 2;
    c.model.pyramid.merge_query_dim = 8;
    c.model.pyramid.merge_heads = 2;
    c.model.embed_dim = 8;
    c.swav.prototypes = 8;
    c
}

fn ac4_sinkhorn(_: &mut Shared) -> Outcome {
    let mut worst_row = 0.0f64;
    for seed in 0..50u64 {
        let mut r = common::rng(seed);
        let (m, k) = (1 + seed as usize % 13, 1 + seed as usize % 9);
        let scale = [0.1, 1.0, 10.0, 100.0][seed as usize % 4];
        let s = common::randn(&mut r, &[m, k], scale);
        for (eps, iters) in [(0.05, 0), (0.05, 3), (1.0, 50)] {
            let q = sinkhorn(&s, eps, iters).map_err(e2s)?;
            for row in q.data().chunks(k) {
                ensure!(row.iter().all(|&v| v >= 0.0), "negative code");
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure!(worst_row <= 1e-6, "row sums off by {worst_row:e}");

    let mut worst_col = 0.0f64;
    for seed in 0..5u64 {
        let s = common::randn(&mut common::rng(100 + seed), &[64, 16], 1.0);
        let q = sinkhorn(&s, 1.0, 50).map_err(e2s)?;
        for c in 0..16 {
            let col: f64 = (0..64).map(|r| q.data()[r * 16 + c]).sum();
            worst_col = worst_col.max((col - 4.0).abs());
        }
    }
    ensure!(worst_col <= 1e-6, "column sums off M/K by {worst_col:e}");

    // Bit-exact when every normalizer is a power of two; otherwise the
    // divisions round, to within a few ulps of 1/K.
    for (m, k, v) in [(64, 16, 0.3), (16, 32, -1.0), (2, 512, 0.0)] {
        let q = sinkhorn(&Tensor::<f64>::full([m, k], v), 0.05, 3).map_err(e2s)?;
        ensure!(q.data().iter().all(|&x| x == 1.0 / k as f64), "uniform {m}×{k} not an exact fixed point");
    }
    for (m, k, v) in [(7, 5, -2.0), (3, 512, 0.0)] {
        let q = sinkhorn(&Tensor::<f64>::full([m, k], v), 0.05, 3).map_err(e2s)?;
        ensure!(q.data().iter().all(|&x| (x - 1.0 / k as f64).abs() <= 1e-15), "uniform {m}×{k} drifted from 1/K");
    }
    Ok(format!(
        "rows within {worst_row:.1e}, columns within {worst_col:.1e}, uniform input bit-exact for power-of-two shapes"
    ))
}

fn ac5_swav_loss(_: &mut Shared) -> Outcome {
    let (n_g, n_l, k, b, tau, eps) = (2usize, 3usize, 4usize, 2usize, 0.1, 0.05);
    let n_v = n_g + n_l;
    let mut worst = 0.0f64;
    let mut worst_grad = 0.0f64;
    for seed in 0..5u64 {
        let scores = common::randn(&mut common::rng(seed), &[n_v * b, k], 1.0);
        let codes: Vec<Tensor<f64>> = (0..n_g)
            .map(|i| sinkhorn(&Tensor::new([b, k], scores.data()[i * b * k..(i + 1) * b * k].to_vec()).unwrap(), eps, 3))
            .collect::<Result<_, _>>()
            .map_err(e2s)?;
        let targets = swav_targets(&codes, n_v).map_err(e2s)?;
        let mut g = Graph::new();
        let s = g.leaf(scores.clone(), true);
        let loss = swav_loss(&mut g, s, targets.clone(), tau).map_err(e2s)?;
        let got = g.value(loss).item();

        // Pair-sum oracle over samples, globals and every other view.
        let row = |v: usize, i: usize| &scores.data()[(v * b + i) * k..(v * b + i + 1) * k];
        let log_p = |x: &[f64]| -> Vec<f64> {
            let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = x.iter().map(|v| ((v - m) / tau).exp()).sum();
            x.iter().map(|v| (v - m) / tau - z.ln()).collect()
        };
        let mut total = 0.0;
        for i in 0..b {
            for a in 0..n_g {
                let q = &codes[a].data()[i * k..(i + 1) * k];
                for v in (0..n_v).filter(|&v| v != a) {
                    total -= q.iter().zip(log_p(row(v, i))).map(|(q, l)| q * l).sum::<f64>();
                }
            }
        }
        let want = total / (b * n_g * (n_v - 1)) as f64;
        worst = worst.max((got - want).abs());

        // With codes held fixed, central differences of the loss reproduce
        // the analytic gradient: nothing flows through the code path.
        let grads = g.backward(loss).map_err(e2s)?;
        let analytic = grads.wrt(s).unwrap().data().to_vec();
        let fixed = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(x.clone());
            let l = swav_loss(&mut g, v, targets.clone(), tau).unwrap();
            g.value(l).item()
        };
        let mut numeric = vec![0.0; scores.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut up = scores.clone();
            up.data_mut()[j] += common::FD_STEP;
            let mut down = scores.clone();
            down.data_mut()[j] -= common::FD_STEP;
            *n = (fixed(&up) - fixed(&down)) / (2.0 * common::FD_STEP);
        }
        worst_grad = worst_grad.max(common::rel_err(&analytic, &numeric));
    }
    ensure!(worst <= 1e-6, "loss differs from the pair-sum oracle by {worst:e}");
    ensure!(worst_grad < common::FD_TOL, "gradient differs from fixed-code differences by {worst_grad:e}");
    Ok(format!("oracle within {worst:.1e}; fixed-code gradient within {worst_grad:.1e}"))
}

fn pretrained(shared: &mut Shared) -> Result<&Pretrained, String> {
    if shared.pretrained.is_none() {
        let cfg = Config::desk();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        gen_dataset(&cfg.data, "desk", PRETRAIN_SAMPLES, PRETRAIN_DATA_SEED, dir.path()).map_err(e2s)?;
        let ds = Dataset::open(dir.path()).map_err(e2s)?;
        ds.check_compatible(&cfg).map_err(e2s)?;
        let samples = ds.load_all().map_err(e2s)?;
        let t0 = Instant::now();
        let mut trainer = Pretrainer::new(&cfg, PRETRAIN_SEED, samples.len()).map_err(e2s)?;
        let mut logs = Vec::new();
        for _ in 0..cfg.train.epochs {
            match trainer.run_epoch(&samples) {
                Ok(l) => {
                    eprintln!("  pretrain {}", l.csv_row());
                    logs.push(l);
                }
                Err(e) => {
                    print_collapse(&logs);
                    return Err(format!("epoch {} failed: {e}", logs.len() + 1));
                }
            }
        }
        let checkpoint = Checkpoint::from_store(&cfg, &trainer.store);
        shared.pretrained = Some(Pretrained {
            cfg,
            samples,
            logs,
            checkpoint,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(shared.pretrained.as_ref().unwrap())
}

fn print_collapse(logs: &[EpochLog]) {
    println!("  collapse diagnostics:");
    println!("  {}", EpochLog::CSV_HEADER);
    for l in logs {
        println!("  {}", l.csv_row());
    }
}

fn ac6_pretraining(shared: &mut Shared) -> Outcome {
    let p = pretrained(shared)?;
    let cfg = &p.cfg;
    let first = p.logs[0].loss;
    let best = p.logs.iter().map(|l| l.loss).fold(f64::INFINITY, f64::min);
    let drop = 1.0 - best / first;
    let last = p.logs.last().unwrap();
    let ln_k = (cfg.swav.prototypes as f64).ln();

    let (mut store, model) = SwavModel::build::<f32>(cfg).map_err(e2s)?;
    p.checkpoint.apply_to(&mut store).map_err(e2s)?;
    let refs: Vec<&Sample> = p.samples.iter().take(cfg.train.batch_size).collect();
    let views = sample_views(cfg, &refs, PRETRAIN_SEED, 0).map_err(e2s)?;
    let global = embed_view(&model, &store, &views, 0).map_err(e2s)?;
    let local = embed_view(&model, &store, &views, cfg.swav.n_global).map_err(e2s)?;
    let sim = similarity_matrix(&global, &local).map_err(e2s)?;
    let gap = sim.diag_mean() - sim.offdiag_mean();

    let summary = format!(
        "loss {first:.3} → best {best:.3} ({:.0}% drop), usage entropy {:.3} / hard-assignment entropy {:.3} \
         (0.5·ln K = {:.3}), σ diagonal {:.3} vs off-diagonal {:.3}, {:.0}s",
        drop * 100.0,
        last.usage_entropy,
        last.hard_entropy,
        0.5 * ln_k,
        sim.diag_mean(),
        sim.offdiag_mean(),
        p.seconds
    );
    let ok = drop >= 0.20 && last.hard_entropy >= 0.5 * ln_k && last.usage_entropy >= 0.5 * ln_k && gap >= 0.15;
    if !ok {
        print_collapse(&p.logs);
        return Err(summary);
    }
    ensure!(p.seconds < 1800.0, "pretraining took {:.0}s (limit 1800s); {summary}", p.seconds);
    Ok(summary)
}

fn snapshot(store: &ParamStore<f32>) -> Vec<(String, Vec<f32>)> {
    store.iter().map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

fn ac7_finetuning(shared: &mut Shared) -> Outcome {
    let p = pretrained(shared)?;
    let cfg = p.cfg.clone();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    gen_dataset(&cfg.data, "desk", (FT_TRAIN + FT_VAL) as u64, FINETUNE_DATA_SEED, dir.path()).map_err(e2s)?;
    let all = Dataset::open(dir.path()).and_then(|d| d.load_all()).map_err(e2s)?;
    let (train, val) = all.split_at(FT_TRAIN);
    let s1 = cfg.fpn.stage1_epochs;

    let mut scores: Vec<(String, Vec<f64>)> = Vec::new();
    for ab in cfg.fpn.ablations.iter().filter(|a| a.name == "all" || a.name == "B-rgb") {
        let mask = cfg.data.ablation_mask(ab).map_err(e2s)?;
        let mut per_seed = Vec::new();
        for seed in 0..FT_SEEDS {
            let (_, store, model) = FinetuneModel::from_checkpoint(&p.checkpoint, seed).map_err(e2s)?;
            let mut ft = Finetuner::new(&cfg, seed, store, model, mask.clone(), train.len()).map_err(e2s)?;
            let contract = seed == 0 && ab.name == "all";
            let before = snapshot(&ft.store);
            let mut logs = Vec::new();
            for e in 0..ft.total_epochs() {
                logs.push(ft.run_epoch(train, val).map_err(e2s)?);
                if contract && e + 1 == s1 {
                    frozen_in_stage1(&before, &ft.store)?;
                }
            }
            if contract {
                stage2_contract(&before, &ft)?;
                let lr_last = ft.optimizer.schedule.lr(ft.optimizer.steps() - 1);
                ensure!(
                    logs[0].lr == cfg.fpn.lr0 && lr_last == cfg.fpn.lr_min,
                    "lr endpoints {} / {lr_last}, want {} / {}",
                    logs[0].lr,
                    cfg.fpn.lr0,
                    cfg.fpn.lr_min
                );
            }
            let fg = logs.last().unwrap().val.fg_iou;
            eprintln!("  finetune {} seed {seed}: final val fg-IoU {fg:.4}", ab.name);
            per_seed.push(fg);
        }
        scores.push((ab.name.clone(), per_seed));
    }
    let all_m = median(scores[0].1.clone());
    let rgb_m = median(scores[1].1.clone());
    let detail = format!(
        "stage-1 encoder bitwise frozen, stage 2 = decoder + fusion, lr {:e} → {:e}; median fg-IoU all {all_m:.3} \
         {:?} vs B-rgb {rgb_m:.3} {:?} (gap {:.3})",
        cfg.fpn.lr0,
        cfg.fpn.lr_min,
        scores[0].1,
        scores[1].1,
        all_m - rgb_m
    );
    ensure!(all_m - rgb_m >= 0.05, "ablation gap below 0.05: {detail}");
    Ok(detail)
}

fn frozen_in_stage1(before: &[(String, Vec<f32>)], store: &ParamStore<f32>) -> Result<(), String> {
    for ((name, a), (_, b)) in before.iter().zip(snapshot(store).iter()) {
        if !name.starts_with(DECODER_PREFIX) {
            ensure!(a == b, "{name} changed during stage 1");
        }
    }
    Ok(())
}

fn stage2_contract(before: &[(String, Vec<f32>)], ft: &Finetuner) -> Result<(), String> {
    let mut fusion_moved = false;
    for ((name, a), (_, p)) in before.iter().zip(ft.store.iter()) {
        let trainable = name.starts_with(DECODER_PREFIX) || name.starts_with(FUSION_PREFIX);
        ensure!(p.frozen != trainable, "{name}: frozen = {} in stage 2", p.frozen);
        if !trainable {
            ensure!(a.as_slice() == p.value.data(), "{name} changed during fine-tuning");
        } else if name.starts_with(FUSION_PREFIX) && a.as_slice() != p.value.data() {
            fusion_moved = true;
        }
    }
    ensure!(fusion_moved, "no fusion parameter was updated in stage 2");
    Ok(())
}

fn tiny() -> Config {
    let mut cfg = Config::desk();
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.fpn.stage1_epochs = 1;
    cfg.fpn.stage2_epochs = 1;
    cfg.fpn.batch_size = 4;
    cfg
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn ac8_determinism(_: &mut Shared) -> Outcome {
    let cfg = tiny();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    for (d, seed) in dirs.iter().zip([5, 5, 6]) {
        gen_dataset(&cfg.data, "desk", 12, seed, d.path()).map_err(e2s)?;
    }
    let (a, b, c) = (dir_bytes(dirs[0].path()), dir_bytes(dirs[1].path()), dir_bytes(dirs[2].path()));
    ensure!(a.len() == 13, "expected manifest + 12 samples, found {} files", a.len());
    ensure!(a == b, "same-seed datasets differ");
    ensure!(a != c, "different seeds gave identical datasets");

    let samples = Dataset::open(dirs[0].path()).and_then(|d| d.load_all()).map_err(e2s)?;
    let pretrain_csv = |seed: u64| -> Result<(String, Checkpoint), String> {
        let mut t = Pretrainer::new(&cfg, seed, samples.len()).map_err(e2s)?;
        let logs: Vec<_> = (0..cfg.train.epochs).map(|_| t.run_epoch(&samples)).collect::<Result<_, _>>().map_err(e2s)?;
        Ok((logs_to_csv(&logs), Checkpoint::from_store(&cfg, &t.store)))
    };
    let (csv0, ck) = pretrain_csv(3)?;
    ensure!(csv0 == pretrain_csv(3)?.0, "same-seed pretraining loss CSVs differ");
    ensure!(csv0 != pretrain_csv(4)?.0, "seed has no effect on pretraining");

    let (train, val) = samples.split_at(8);
    let finetune_csv = || -> Result<String, String> {
        let (_, store, model) = FinetuneModel::from_checkpoint(&ck, 1).map_err(e2s)?;
        let mut ft = Finetuner::new(&cfg, 1, store, model, vec![false; cfg.data.n_bands()], train.len()).map_err(e2s)?;
        Ok(finetune_logs_to_csv(&ft.run(train, val).map_err(e2s)?))
    };
    ensure!(finetune_csv()? == finetune_csv()?, "same-seed fine-tuning CSVs differ");
    Ok("datasets, pretraining and fine-tuning CSVs byte-identical under equal seeds".into())
}

fn ac9_formats(_: &mut Shared) -> Outcome {
    let cfg = Config::desk();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let rec = bandfuse_core::synth::generate_sample(&cfg.data, 9, 0).map_err(e2s)?;
    let path = dir.path().join("s.pvfs");
    rec.write(&path).map_err(e2s)?;
    let written = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = SampleRecord::read(&path).map_err(e2s)?;
    ensure!(back == rec, "sample record changed on round trip");
    ensure!(back.to_bytes().map_err(e2s)? == written, "re-encoded sample bytes differ");
    ensure!(
        back.bands().zip(rec.bands()).all(|(a, b)| a.data.iter().map(|v| v.to_bits()).eq(b.data.iter().map(|v| v.to_bits()))),
        "pixel bits changed"
    );

    let (store, _) = SwavModel::build::<f32>(&cfg).map_err(e2s)?;
    let ck = Checkpoint::from_store(&cfg, &store);
    let ck_path = dir.path().join("m.pvck");
    ck.save(&ck_path).map_err(e2s)?;
    let ck_bytes = std::fs::read(&ck_path).map_err(|e| e.to_string())?;
    let ck_back = Checkpoint::load(&ck_path).map_err(e2s)?;
    ensure!(ck_back == ck, "checkpoint changed on round trip");
    ensure!(ck_back.to_bytes().map_err(e2s)? == ck_bytes, "re-encoded checkpoint bytes differ");

    let p = Path::new("corrupt");
    let mut cases = 0;
    for (kind, bytes) in [("sample", &written), ("checkpoint", &ck_bytes)] {
        let decode = |b: &[u8]| -> Result<(), Error> {
            match kind {
                "sample" => SampleRecord::from_bytes(b, p).map(|_| ()),
                _ => Checkpoint::from_bytes(b, p).map(|_| ()),
            }
        };
        let mut bad = bytes.clone();
        bad[1] ^= 0xff;
        match decode(&bad) {
            Err(e @ Error::Format { .. }) if e.to_string().contains("magic") => {}
            other => return Err(format!("{kind} with corrupted magic: {other:?}")),
        }
        for cut in [0, 3, 7, bytes.len() / 2, bytes.len() - 1] {
            cases += 1;
            match decode(&bytes[..cut]) {
                Err(e @ Error::Format { .. }) if e.to_string().contains("truncated") => {}
                other => return Err(format!("{kind} truncated to {cut} bytes: {other:?}")),
            }
        }
    }

    // A sample whose band count disagrees with the manifest.
    gen_dataset(&cfg.data, "desk", 1, 0, dir.path()).map_err(e2s)?;
    let ds = Dataset::open(dir.path()).map_err(e2s)?;
    let mut short = ds.load_raw(0).map_err(e2s)?;
    short.records.remove(2);
    short.write(&ds.path(0)).map_err(e2s)?;
    ensure!(matches!(ds.load(0), Err(Error::Data(_))), "band-count mismatch not reported as a data error");
    Ok(format!(
        "sample and checkpoint round trips bitwise; bad magic and {cases} truncations are format errors; \
         band-count mismatch is a data error"
    ))
}
