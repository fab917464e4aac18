use std::fs;
use std::path::Path;

use anyhow::Context;
use bandfuse_core::augment::make_views;
use bandfuse_core::checkpoint::{Checkpoint, NamedTensor};
use bandfuse_core::dataset::{gen_dataset, Dataset, Sample};
use bandfuse_core::diagnostics::{self, FeatureMode};
use bandfuse_core::finetune::{evaluate, finetune_logs_to_csv, FinetuneModel, Finetuner};
use bandfuse_core::fpn::mean_metrics;
use bandfuse_core::model::{count_params, SwavModel};
use bandfuse_core::train::{logs_to_csv, sample_views, Pretrainer};
use bandfuse_core::{Config, Error, ParamStore};

use crate::{run_manifest, Cli, Command, Diagnose, FeatureModeArg, ModelArgs, Profile};

/// Name of the tensor carrying a fine-tuned model's band drop mask.
const DROP_MASK_TENSOR: &str = "finetune.drop_mask";
const PAPER_TOTAL: &str = "~103M";

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData { samples } => gen_data(cli, *samples),
        Command::Pretrain { data } => pretrain(cli, data),
        Command::Embed { model, limit } => embed(cli, model, *limit),
        Command::Diagnose(d) => diagnose(cli, d),
        Command::Finetune { model, val, ablation } => finetune(cli, model, *val, ablation),
        Command::EvalSeg { model, maps } => eval_seg(cli, model, *maps),
        Command::CountParams { enumerate } => count(cli, *enumerate),
    }
}

fn base_config(cli: &Cli) -> anyhow::Result<Config> {
    let cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            Config::from_toml(&text).with_context(|| format!("loading {}", path.display()))?
        }
        None => match cli.profile {
            Profile::Desk => Config::desk(),
            Profile::Paper => Config::paper(),
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// The checkpoint's config, or `--config` when given and compatible with
/// the checkpoint's model.
fn checkpoint_config(cli: &Cli, ck: &Checkpoint) -> anyhow::Result<Config> {
    let stored = ck.config()?;
    if cli.config.is_none() {
        return Ok(stored);
    }
    let cfg = base_config(cli)?;
    if cfg.model != stored.model || cfg.data.band_specs() != stored.data.band_specs() || cfg.swav.prototypes != stored.swav.prototypes {
        return Err(Error::Geometry("--config describes a different model than the checkpoint".into()).into());
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        path: cli.out.clone(),
        source: e,
    })?;
    Ok(&cli.out)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    diagnostics::write_file(path, text.as_bytes())?;
    Ok(())
}

fn open_data(path: &Path, cfg: &Config) -> anyhow::Result<Dataset> {
    let ds = Dataset::open(path)?;
    ds.check_compatible(cfg)?;
    Ok(ds)
}

fn load_first(ds: &Dataset, n: usize) -> anyhow::Result<Vec<Sample>> {
    let n = n.min(ds.len());
    if n == 0 {
        return Err(Error::Data(format!("dataset {} is empty", ds.dir.display())).into());
    }
    Ok((0..n as u64).map(|i| ds.load(i)).collect::<Result<_, _>>()?)
}

struct Loaded {
    cfg: Config,
    store: ParamStore<f32>,
    model: SwavModel,
    data: Dataset,
}

fn load_model(cli: &Cli, args: &ModelArgs) -> anyhow::Result<Loaded> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let (mut store, model) = SwavModel::build::<f32>(&cfg)?;
    ck.apply_to(&mut store)?;
    let data = open_data(&args.data, &cfg)?;
    Ok(Loaded { cfg, store, model, data })
}

fn band_names(cfg: &Config) -> Vec<String> {
    cfg.data
        .band_specs()
        .iter()
        .map(|b| format!("{}.{}", b.modality_name, b.name))
        .collect()
}

fn gen_data(cli: &Cli, samples: u64) -> anyhow::Result<()> {
    let cfg = base_config(cli)?;
    let out = out_dir(cli)?;
    let m = gen_dataset(&cfg.data, &cfg.profile, samples, cli.seed, out)?;
    run_manifest::write(out, "gen-data", cli.seed, &cfg)?;
    println!("wrote {} samples ({} bands) to {}", m.count, m.bands.len(), out.display());
    Ok(())
}

fn pretrain(cli: &Cli, data: &Path) -> anyhow::Result<()> {
    let cfg = base_config(cli)?;
    let ds = open_data(data, &cfg)?;
    let samples = ds.load_all()?;
    let out = out_dir(cli)?;
    run_manifest::write(out, "pretrain", cli.seed, &cfg)?;
    let mut trainer = Pretrainer::new(&cfg, cli.seed, samples.len())?;
    println!("pretraining {} parameters on {} samples", trainer.store.count(), samples.len());
    let mut logs = Vec::new();
    for _ in 0..cfg.train.epochs {
        let log = trainer.run_epoch(&samples);
        if let Ok(l) = &log {
            println!("epoch {:>3}  loss {:.5}  usage-entropy {:.4}  lr {:.3e}", l.epoch, l.loss, l.usage_entropy, l.lr);
            logs.push(*l);
        }
        write(&out.join("loss.csv"), &logs_to_csv(&logs))?;
        log?;
    }
    Checkpoint::from_store(&cfg, &trainer.store).save(&out.join("model.pvck"))?;
    Ok(())
}

fn embed(cli: &Cli, args: &ModelArgs, limit: Option<usize>) -> anyhow::Result<()> {
    let m = load_model(cli, args)?;
    let samples = load_first(&m.data, limit.unwrap_or(usize::MAX))?;
    let out = out_dir(cli)?;
    run_manifest::write(out, "embed", cli.seed, &m.cfg)?;
    let n_bands = m.model.encoder.input.n_bands();
    let mut csv = String::from("sample");
    for k in 0..m.cfg.model.embed_dim {
        csv.push_str(&format!(",e{k}"));
    }
    csv.push('\n');
    for chunk in samples.chunks(m.cfg.train.batch_size.max(1)) {
        let bands: Vec<&[Vec<f32>]> = chunk.iter().map(|s| s.bands.as_slice()).collect();
        let masks = vec![vec![false; n_bands]; chunk.len()];
        let batch = diagnostics::sample_batch(&m.model, &bands, &masks)?;
        let mut g = bandfuse_core::Graph::new();
        let (z, _) = m.model.embed(&mut g, &m.store, &batch)?;
        for (s, row) in chunk.iter().zip(g.value(z).data().chunks(m.cfg.model.embed_dim)) {
            csv.push_str(&s.id.to_string());
            for v in row {
                csv.push_str(&format!(",{v:.8}"));
            }
            csv.push('\n');
        }
    }
    write(&out.join("embeddings.csv"), &csv)?;
    println!("embedded {} samples", samples.len());
    Ok(())
}

fn diagnose(cli: &Cli, d: &Diagnose) -> anyhow::Result<()> {
    match d {
        Diagnose::Similarity { model, batch } => {
            let m = load_model(cli, model)?;
            let samples = load_first(&m.data, *batch)?;
            let (global, local) = global_and_local(cli, &m, &samples)?;
            let report = diagnostics::similarity_matrix(&global, &local)?;
            let out = out_dir(cli)?;
            run_manifest::write(out, "diagnose similarity", cli.seed, &m.cfg)?;
            report.export(out)?;
            println!(
                "sigma diagonal mean {:.4}, off-diagonal mean {:.4}",
                report.diag_mean(),
                report.offdiag_mean()
            );
        }
        Diagnose::Attention { model, sample, drop } => {
            let m = load_model(cli, model)?;
            let names = band_names(&m.cfg);
            for d in drop {
                if !names.contains(d) {
                    return Err(Error::Usage(format!("unknown band `{d}`; bands are {}", names.join(", "))).into());
                }
            }
            let dropped: Vec<bool> = names.iter().map(|n| drop.contains(n)).collect();
            if dropped.iter().all(|&x| x) {
                return Err(Error::Usage("cannot drop every band".into()).into());
            }
            let s = m.data.load(*sample)?;
            let scores = diagnostics::fusion_scores(&m.model, &m.store, &s.bands, &dropped)?;
            let out = out_dir(cli)?;
            run_manifest::write(out, "diagnose attention", cli.seed, &m.cfg)?;
            let heads = diagnostics::export_attention_maps(&scores, m.cfg.model.n_p, &m.cfg.data.band_specs(), &dropped, out)?;
            println!("wrote {heads} head maps for sample {sample}");
        }
        Diagnose::Features { model, sample, mode } => {
            let m = load_model(cli, model)?;
            let s = m.data.load(*sample)?;
            let dropped = vec![false; s.bands.len()];
            let levels = diagnostics::pyramid_maps(&m.model, &m.store, &s.bands, &dropped)?;
            let mode = match mode {
                FeatureModeArg::Averaged => FeatureMode::Averaged,
                FeatureModeArg::All => FeatureMode::All,
            };
            let out = out_dir(cli)?;
            run_manifest::write(out, "diagnose features", cli.seed, &m.cfg)?;
            let n = diagnostics::export_feature_maps(&levels, mode, out)?;
            println!("wrote {n} feature maps for sample {sample}");
        }
        Diagnose::Prototypes { model, samples } => {
            let m = load_model(cli, model)?;
            let loaded = load_first(&m.data, *samples)?;
            let (global, local) = global_and_local(cli, &m, &loaded)?;
            let protos = m.store.value(m.model.prototypes.id);
            let al = diagnostics::prototype_alignment(&global, &local, protos, &m.cfg)?;
            let out = out_dir(cli)?;
            run_manifest::write(out, "diagnose prototypes", cli.seed, &m.cfg)?;
            let n = diagnostics::export_alignment(&al, out)?;
            println!("wrote {n} prototype strips");
        }
        Diagnose::Views { data, sample } => {
            let cfg = base_config(cli)?;
            let ds = open_data(data, &cfg)?;
            let s = ds.load(*sample)?;
            let bands: Vec<&[f32]> = s.bands.iter().map(Vec::as_slice).collect();
            let specs = cfg.data.band_specs();
            let modality_of: Vec<usize> = specs.iter().map(|b| b.modality).collect();
            let views = make_views(
                &bands,
                &modality_of,
                &cfg.augment,
                cfg.swav.n_global,
                cfg.swav.n_local,
                cli.seed,
                0,
                s.id,
            )?;
            let out = out_dir(cli)?;
            run_manifest::write(out, "diagnose views", cli.seed, &cfg)?;
            diagnostics::export_views(&views, &specs, out, &format!("views_sample{}", s.id))?;
            println!("wrote drop-mask strip of {} views", views.len());
        }
    }
    Ok(())
}

/// Embeddings of the first global and the first local view per sample,
/// with views drawn as in pretraining epoch 0.
fn global_and_local(
    cli: &Cli,
    m: &Loaded,
    samples: &[Sample],
) -> anyhow::Result<(bandfuse_core::Tensor<f32>, bandfuse_core::Tensor<f32>)> {
    if m.cfg.swav.n_local == 0 {
        return Err(Error::Usage("config has no local views".into()).into());
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let views = sample_views(&m.cfg, &refs, cli.seed, 0)?;
    let global = diagnostics::embed_view(&m.model, &m.store, &views, 0)?;
    let local = diagnostics::embed_view(&m.model, &m.store, &views, m.cfg.swav.n_global)?;
    Ok((global, local))
}

fn finetune(cli: &Cli, args: &ModelArgs, val: usize, ablation: &str) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = checkpoint_config(cli, &ck)?;
    let ab = cfg.fpn.ablations.iter().find(|a| a.name == ablation).ok_or_else(|| {
        let known: Vec<&str> = cfg.fpn.ablations.iter().map(|a| a.name.as_str()).collect();
        Error::Usage(format!("unknown ablation `{ablation}`; known: {}", known.join(", ")))
    })?;
    let dropped = cfg.data.ablation_mask(ab)?;
    let ds = open_data(&args.data, &cfg)?;
    let all = ds.load_all()?;
    if val >= all.len() {
        return Err(Error::Data(format!("{} samples cannot leave {val} for validation", all.len())).into());
    }
    let (train, held) = all.split_at(all.len() - val);

    let (_, store, model) = FinetuneModel::from_checkpoint(&ck, cli.seed)?;
    let widths: Vec<String> = model.decoder.stages.iter().map(|s| format!("{}@{}", s.out_ch, s.side)).collect();
    println!(
        "decoder: lateral width {}, stages {} ({} parameters)",
        model.decoder.lateral_width,
        widths.join(" "),
        model.decoder.param_count()
    );
    let out = out_dir(cli)?;
    run_manifest::write(out, "finetune", cli.seed, &cfg)?;
    let mut ft = Finetuner::new(&cfg, cli.seed, store, model, dropped.clone(), train.len())?;
    let mut logs = Vec::new();
    for _ in 0..ft.total_epochs() {
        let log = ft.run_epoch(train, held);
        if let Ok(l) = &log {
            println!(
                "epoch {:>3} stage {}  loss {:.5}  fg-iou {:.4}  bg-iou {:.4}  acc {:.4}  trainable {}",
                l.epoch, l.stage, l.loss, l.val.fg_iou, l.val.bg_iou, l.val.accuracy, l.trainable
            );
            logs.push(*l);
        }
        write(&out.join("finetune.csv"), &finetune_logs_to_csv(&logs))?;
        log?;
    }
    let mut saved = Checkpoint::from_store(&cfg, &ft.store);
    saved.tensors.push(NamedTensor {
        name: DROP_MASK_TENSOR.into(),
        shape: vec![dropped.len()],
        data: dropped.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect(),
    });
    saved.save(&out.join("finetuned.pvck"))?;
    Ok(())
}

fn eval_seg(cli: &Cli, args: &ModelArgs, maps: usize) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    if !FinetuneModel::has_decoder(&ck) {
        return Err(Error::Data(format!("{} has no decoder; run finetune first", args.checkpoint.display())).into());
    }
    let cfg = checkpoint_config(cli, &ck)?;
    let (_, store, model) = FinetuneModel::from_checkpoint(&ck, cli.seed)?;
    let dropped = match ck.get(DROP_MASK_TENSOR) {
        Some(t) => t.data.iter().map(|&v| v > 0.5).collect(),
        None => vec![false; model.swav.encoder.input.n_bands()],
    };
    let ds = open_data(&args.data, &cfg)?;
    let samples = ds.load_all()?;
    let per = evaluate(&model, &store, &cfg, &samples, &dropped)?;
    let out = out_dir(cli)?;
    run_manifest::write(out, "eval-seg", cli.seed, &cfg)?;
    let mut csv = String::from("sample,accuracy,fg_iou,bg_iou\n");
    for (s, m) in samples.iter().zip(&per) {
        csv.push_str(&format!("{},{:.8},{:.8},{:.8}\n", s.id, m.accuracy, m.fg_iou, m.bg_iou));
    }
    write(&out.join("segmentation.csv"), &csv)?;
    let side = cfg.fpn.output_side;
    let shown: Vec<&Sample> = samples.iter().take(maps).collect();
    if !shown.is_empty() {
        let probs = model.predict(&store, &shown, &dropped)?;
        for (i, s) in shown.iter().enumerate() {
            diagnostics::export_probability_map(probs.row(i), side, out, &format!("probability_sample{}", s.id))?;
        }
    }
    let mean = mean_metrics(&per);
    println!(
        "{} samples: accuracy {:.4}  fg-iou {:.4}  bg-iou {:.4}",
        per.len(),
        mean.accuracy,
        mean.fg_iou,
        mean.bg_iou
    );
    Ok(())
}

fn count(cli: &Cli, enumerate: bool) -> anyhow::Result<()> {
    let cfg = base_config(cli)?;
    let rows = count_params(&cfg, enumerate)?;
    println!("{:<12} {:>14} {:>14}", "module", "analytic", "enumerated");
    for r in &rows {
        let e = r.enumerated.map_or_else(|| "-".to_string(), |n| n.to_string());
        println!("{:<12} {:>14} {:>14}", r.module, r.analytic, e);
    }
    let total: usize = rows.iter().map(|r| r.analytic).sum();
    let enumerated: Option<usize> = rows.iter().map(|r| r.enumerated).sum();
    println!(
        "{:<12} {:>14} {:>14}",
        "total",
        total,
        enumerated.map_or_else(|| "-".to_string(), |n| n.to_string())
    );
    if cfg.profile == "paper" {
        println!("reference    {PAPER_TOTAL:>14}  (reference count for the full-size model)");
    }
    Ok(())
}
