use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use cleancoder_core::asr::{evaluate_model, RowResult, CONDITION_DENOISED, CONDITION_NOISY};
use cleancoder_core::cleancoder::CleancoderModel;
use cleancoder_core::corpus::{build_corpus, load_audio, load_features, manifest_path, Manifest, Utterance};
use cleancoder_core::dsp::{log_mel, spec_mae, FeatureStats};
use cleancoder_core::encoder::pretrain_backbone;
use cleancoder_core::numgrad::Rng;
use cleancoder_core::parallel;
use cleancoder_core::trainer::{
    frontend_examples, read_metric_log, series, train_frontend, train_scratch_asr, write_metric_log, MetricRow,
};

use crate::artifacts::{load_asr, load_frontend, save_asr, save_frontend, ArtifactMeta, KIND_ASR, KIND_FRONTEND};
use crate::config::ExperimentConfig;
use crate::report::{bar_series, snr_report, write_csv, MaeRow, Metric};
use crate::svg::{bar_chart, line_chart, Panel};
use crate::UsageError;

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const FRONTEND_FILE: &str = "frontend.ckpt";
pub const CONDITION_CLEAN: &str = "clean";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_split(corpus: &Path, split: &str, cfg: &ExperimentConfig) -> Result<Vec<Utterance>> {
    let path = manifest_path(corpus, split);
    if !path.exists() {
        bail!("manifest {} not found; run `cleancoder gen-corpus` first", path.display());
    }
    let alphabet = cfg.corpus.validate()?;
    Ok(load_features(&Manifest::load(&path)?, &alphabet)?)
}

fn training_stats(train: &[Utterance]) -> Result<FeatureStats> {
    Ok(FeatureStats::compute(train.iter().flat_map(|u| [&u.clean, &u.noisy]))?)
}

fn meta(cfg: &ExperimentConfig, kind: &str, model_encoder: &cleancoder_core::encoder::EncoderConfig, stats: &FeatureStats) -> ArtifactMeta {
    ArtifactMeta {
        kind: kind.into(),
        encoder: model_encoder.clone(),
        stats: stats.clone(),
        seed: cfg.seed,
        alphabet: cfg.corpus.alphabet.clone(),
        word_len: cfg.corpus.word_len,
    }
}

fn write_log(path: &Path, log: &[MetricRow]) -> Result<()> {
    write_metric_log(path, log)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn gen_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let s = build_corpus(&cfg.corpus, out)?;
    println!("train={} val={} test={}", s.train, s.val, s.test);
    Ok(())
}

pub fn pretrain(cfg: &ExperimentConfig, corpus: &Path, out: &Path) -> Result<()> {
    let encoder = cfg.encoder_config()?;
    let train = load_split(corpus, "train", cfg)?;
    let val = load_split(corpus, "val", cfg)?;
    let stats = training_stats(&train)?;
    let vocab = cfg.corpus.validate()?.vocab_size();
    let res = pretrain_backbone(&train, &val, &encoder, &cfg.pretrain_config(), vocab, &stats, cfg.corpus.word_len)?;
    ensure_dir(out)?;
    save_asr(&out.join(BACKBONE_FILE), &res.model, &meta(cfg, KIND_ASR, &encoder, &stats))?;
    write_log(&out.join("pretrain_metrics.csv"), &res.outcome.log)?;
    println!(
        "pretrain: best val WER {:.4} at step {} of {}{}",
        res.outcome.best_value,
        res.outcome.best_step,
        res.outcome.steps,
        if res.converged { "" } else { " (target not reached)" }
    );
    Ok(())
}

pub fn train_frontend_cmd(cfg: &ExperimentConfig, corpus: &Path, backbone: &Path, out: &Path) -> Result<()> {
    let (asr, bmeta) = load_asr(backbone, "pretrain")?;
    let train = load_split(corpus, "train", cfg)?;
    let val = load_split(corpus, "val", cfg)?;
    let tc = cfg.frontend_config();
    let mut model = CleancoderModel::init(asr.encoder, bmeta.stats.clone(), &mut Rng::new(tc.seed))?;
    let tr = frontend_examples(&model, &train, cfg.frontend.identity_pairs)?;
    let va = frontend_examples(&model, &val, false)?;
    let outcome = train_frontend(&mut model, &tr, &va, &tc)?;
    ensure_dir(out)?;
    save_frontend(&out.join(FRONTEND_FILE), &model, &meta(cfg, KIND_FRONTEND, &bmeta.encoder, &bmeta.stats))?;
    write_log(&out.join("frontend_metrics.csv"), &outcome.log)?;
    println!(
        "train-frontend: val L1 {:.4} -> {:.4} (best at step {} of {})",
        outcome.init_value, outcome.best_value, outcome.best_step, outcome.steps
    );
    Ok(())
}

pub fn train_asr_cmd(cfg: &ExperimentConfig, corpus: &Path, frontend: Option<&Path>, out: &Path) -> Result<()> {
    let frontend = frontend.map(load_frontend).transpose()?.map(|(m, _)| m);
    let encoder = cfg.encoder_config()?;
    let train = load_split(corpus, "train", cfg)?;
    let val = load_split(corpus, "val", cfg)?;
    let stats = training_stats(&train)?;
    let vocab = cfg.corpus.validate()?.vocab_size();
    let tc = cfg.asr_config();
    let (model, outcome) =
        train_scratch_asr(&train, &val, &encoder, vocab, &stats, frontend.as_ref(), &tc, cfg.corpus.word_len)?;
    let tag = if frontend.is_some() { "frontend" } else { "baseline" };
    ensure_dir(out)?;
    save_asr(&out.join(format!("asr_{tag}.ckpt")), &model, &meta(cfg, KIND_ASR, &encoder, &stats))?;
    write_log(&out.join(format!("asr_{tag}_metrics.csv")), &outcome.log)?;
    let final_ctc = series(&outcome.log, "val", "ctc").last().map_or(f64::NAN, |p| p.1);
    println!(
        "train-asr ({tag}): final val CTC {final_ctc:.4}, best val WER {:.4} at step {} of {}",
        outcome.best_value, outcome.best_step, outcome.steps
    );
    Ok(())
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        bail!("manifest {} not found; run `cleancoder gen-corpus` first", path.display());
    }
    Ok(Manifest::load(path)?)
}

fn overall(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

fn write_chart(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn snr_labels(snrs: &[f64]) -> Vec<String> {
    snrs.iter().map(|s| format!("{s}")).collect()
}

pub fn eval_mae(frontend: &Path, manifest: &Path, out: &Path) -> Result<()> {
    let (model, meta) = load_frontend(frontend)?;
    let manifest = load_manifest(manifest)?;
    if let Some(r) = manifest.rows.iter().find(|r| r.clean_path.trim().is_empty()) {
        return Err(UsageError(format!("row {} has no clean_path; MAE needs clean references", r.id)).into());
    }
    let per_row = parallel::map(&manifest.rows, |_, row| -> Result<[MaeRow; 2]> {
        let noisy = log_mel(&load_audio(&manifest.resolve(&row.noisy_path))?)?;
        let clean = log_mel(&load_audio(&manifest.resolve(&row.clean_path))?)?;
        let denoised = model.forward(&noisy)?;
        let mk = |condition: &str, mae: f64| MaeRow {
            id: row.id.clone(),
            snr_db: row.snr_db,
            noise_type: row.noise_type.clone(),
            condition: condition.into(),
            mae,
        };
        Ok([mk(CONDITION_NOISY, spec_mae(&noisy, &clean)?), mk(CONDITION_DENOISED, spec_mae(&denoised, &clean)?)])
    });
    let mut rows = Vec::with_capacity(2 * per_row.len());
    for (r, res) in manifest.rows.iter().zip(per_row) {
        rows.extend(res.with_context(|| format!("row {}", r.id))?);
    }
    // Group noisy rows first so the report and chart list conditions in
    // a fixed order.
    rows.sort_by_key(|r| r.condition != CONDITION_NOISY);
    ensure_dir(out)?;
    write_csv(&out.join("mae_rows.csv"), &rows)?;
    let report = snr_report(rows.iter().map(|r| (r.snr_db, r.condition.as_str(), r.mae)), Metric::Mae, meta.seed);
    write_csv(&out.join("mae_report.csv"), &report)?;
    let (snrs, series) = bar_series(&report);
    write_chart(&out.join("mae.svg"), &bar_chart("MAE by SNR", &snr_labels(&snrs), &series, "SNR (dB)", "MAE"))?;
    for cond in [CONDITION_NOISY, CONDITION_DENOISED] {
        let v = overall(rows.iter().filter(|r| r.condition == cond).map(|r| r.mae));
        println!("{cond}: mean MAE {v:.4} over {} rows", manifest.rows.len());
    }
    Ok(())
}

pub fn eval_wer(asr: &Path, frontend: Option<&Path>, manifest: &Path, clean: bool, out: &Path) -> Result<()> {
    let (model, meta) = load_asr(asr, "pretrain` or `cleancoder train-asr")?;
    let frontend = frontend.map(load_frontend).transpose()?.map(|(m, _)| m);
    let mut manifest = load_manifest(manifest)?;
    if clean {
        manifest = manifest.clean_view();
    }
    let alphabet = meta.alphabet()?;
    let mut rows: Vec<RowResult> = Vec::new();
    let mut errors = Vec::new();
    let runs: Vec<Option<&CleancoderModel>> = match &frontend {
        Some(f) => vec![None, Some(f)],
        None => vec![None],
    };
    for f in runs {
        let (mut r, e) = evaluate_model(&model, &manifest, f, &alphabet, meta.word_len);
        if clean {
            r.iter_mut().filter(|x| x.condition == CONDITION_NOISY).for_each(|x| x.condition = CONDITION_CLEAN.into());
        }
        rows.append(&mut r);
        errors.extend(e);
    }
    ensure_dir(out)?;
    write_csv(&out.join("wer_rows.csv"), &rows)?;
    if !errors.is_empty() {
        let path = out.join("wer_errors.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["id", "message"])?;
        for e in &errors {
            w.write_record([&e.id, &e.message])?;
        }
        w.flush()?;
        log::warn!("{} rows failed; see {}", errors.len(), path.display());
    }
    let report = snr_report(rows.iter().map(|r| (r.snr_db, r.condition.as_str(), r.wer)), Metric::Wer, meta.seed);
    write_csv(&out.join("wer_report.csv"), &report)?;
    let (snrs, series) = bar_series(&report);
    write_chart(&out.join("wer.svg"), &bar_chart("WER by SNR", &snr_labels(&snrs), &series, "SNR (dB)", "WER"))?;
    for (cond, _) in &series {
        let v = overall(rows.iter().filter(|r| r.condition == *cond).map(|r| r.wer));
        println!("{cond}: overall WER {v:.4}");
    }
    Ok(())
}

/// Validation CTC and WER curves of each metric log, one series per file
/// in argument order.
pub fn plot_curves(logs: &[PathBuf], out: &Path) -> Result<()> {
    if logs.is_empty() {
        return Err(UsageError("plot-curves needs at least one --logs file".into()).into());
    }
    let mut ctc = Vec::new();
    let mut wer = Vec::new();
    for path in logs {
        let log = read_metric_log(path).with_context(|| format!("cannot read metric log {}", path.display()))?;
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let c = series(&log, "val", "ctc");
        if c.is_empty() {
            bail!("{} has no validation ctc rows; is it an ASR metric log?", path.display());
        }
        let to_points = |s: Vec<(u64, f64)>| s.into_iter().map(|(x, y)| (x as f64, y)).collect::<Vec<_>>();
        ctc.push((name.clone(), to_points(c)));
        wer.push((name, to_points(series(&log, "val", "wer"))));
    }
    let panels = [Panel { y_label: "val CTC loss".into(), series: ctc }, Panel { y_label: "val WER".into(), series: wer }];
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_chart(out, &line_chart("Validation curves", "training step", &panels))
}
