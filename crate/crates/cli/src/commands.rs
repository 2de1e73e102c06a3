use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use pearl::data::io::{frame_file_name, write_label_png, Split};
use pearl::data::{build_preceding_set, generate_synthetic_dataset, load_dataset, SyntheticConfig, VideoDataset};
use pearl::eval::{
    argmax_labels, evaluate, CausalContext, EvalOptions, FlowProvider, LabelOracle, MetricsReport, ParsingModel,
    WarpMergeParser,
};
use pearl::train::{load_model, train, ParserNet, StageModel, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{config_error, flag, read_config_file, resolve, FlagValue};
use crate::figure::{compose, frame_tile, label_tile, save, Tile};
use crate::palette::Palette;
use crate::{Cli, Command, CompareArgs, EvalArgs, GenerateArgs, TrainArgs, VisualizeArgs};

/// Exit status for an error: 2 for configuration problems, 3 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(pe) = cause.downcast_ref::<pearl::Error>() {
            return match pe {
                pearl::Error::Config(_) | pearl::Error::Pipeline(_) | pearl::Error::UnknownFlowProvider(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

/// What a subcommand resolved and produced, echoed into `run.json`.
#[derive(Default)]
struct RunRecord {
    config: Value,
    outputs: Vec<PathBuf>,
}

fn default_out(cmd: &Command) -> PathBuf {
    match cmd {
        Command::GenerateData(_) => PathBuf::from("data"),
        other => Path::new("runs").join(other.name()),
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.clone().unwrap_or_else(|| default_out(&cli.command));
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let mut record = RunRecord::default();
    let result = match &cli.command {
        Command::GenerateData(a) => generate_data(cli, a, &out, &mut record),
        Command::Train(a) => train_stage(cli, a, &out, &mut record),
        Command::Eval(a) => eval(cli, a, &out, &mut record),
        Command::Compare(a) => compare(cli, a, &out, &mut record),
        Command::Visualize(a) => visualize(cli, a, &out, &mut record),
    };
    let run_json = json!({
        "command": cli.command.name(),
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": record.config.get("seed").cloned().unwrap_or(json!(cli.seed.unwrap_or(0))),
        "config": record.config,
        "outputs": record.outputs,
        "status": if result.is_ok() { "ok" } else { "error" },
        "error": result.as_ref().err().map(|e| format!("{e:#}")),
        "started_unix_secs": started,
        "elapsed_secs": clock.elapsed().as_secs_f64(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let written = fs::create_dir_all(&out)
        .and_then(|_| fs::write(out.join("run.json"), serde_json::to_string_pretty(&run_json)? + "\n"));
    if let Err(e) = written {
        log::warn!("could not write run.json in {}: {e}", out.display());
    }
    result
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn push_opt(flags: &mut Vec<FlagValue>, key: &str, value: Option<impl Serialize>) {
    if let Some(v) = value {
        flags.push(flag(key, v));
    }
}

fn generate_data(cli: &Cli, a: &GenerateArgs, out: &Path, record: &mut RunRecord) -> Result<()> {
    let mut flags = Vec::new();
    push_opt(&mut flags, "num_clips", a.num_clips);
    push_opt(&mut flags, "val_clips", a.val_clips);
    push_opt(&mut flags, "num_classes", a.num_classes);
    push_opt(&mut flags, "height", a.height);
    push_opt(&mut flags, "width", a.width);
    push_opt(&mut flags, "frames_per_clip", a.frames_per_clip);
    push_opt(&mut flags, "noise_std", a.noise_std);
    push_opt(&mut flags, "seed", cli.seed);
    let cfg: SyntheticConfig = resolve(cli.config.as_deref(), flags, &cli.set)?;
    record.config = serde_json::to_value(&cfg)?;
    let corpus = generate_synthetic_dataset(&cfg)?;
    let manifest = corpus.write(out)?;
    println!("{}", manifest.display());
    record.outputs.push(manifest);
    Ok(())
}

fn train_stage(cli: &Cli, a: &TrainArgs, out: &Path, record: &mut RunRecord) -> Result<()> {
    let file_has_stage = match &cli.config {
        Some(p) => read_config_file(p)?.get("stage").is_some(),
        None => false,
    };
    if a.stage.is_none() && !file_has_stage && !cli.set.iter().any(|(k, _)| k == "stage") {
        bail!(config_error("no stage given; pass --stage (pipeline is fp -> pp -> psp)"));
    }
    let mut flags = Vec::new();
    push_opt(&mut flags, "stage", a.stage.as_deref());
    push_opt(&mut flags, "dataset", a.data.as_ref());
    push_opt(&mut flags, "val_dataset", a.val_data.as_ref());
    push_opt(&mut flags, "checkpoint_in", a.checkpoint_in.as_ref());
    push_opt(&mut flags, "ipnet_checkpoint", a.ipnet_checkpoint.as_ref());
    push_opt(&mut flags, "steps", a.steps);
    push_opt(&mut flags, "batch_size", a.batch_size);
    push_opt(&mut flags, "seed", cli.seed);
    if a.random_init {
        flags.push(flag("random_init", true));
    }
    if a.pipeline_override {
        flags.push(flag("pipeline_override", true));
    }
    let mut cfg: TrainConfig = resolve(cli.config.as_deref(), flags, &cli.set)?;
    cfg.checkpoint_out.get_or_insert_with(|| out.join("checkpoint.ckpt"));
    cfg.log_path.get_or_insert_with(|| out.join("train_log.jsonl"));
    record.config = serde_json::to_value(&cfg)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = train(&cfg)?;
    let report_path = out.join("report.json");
    outcome.report.write(&report_path)?;
    let last = outcome.report.steps.last().map(|r| r.loss);
    println!(
        "stage {} steps {}..{} final loss {}",
        outcome.report.stage,
        outcome.report.start_step,
        outcome.report.end_step,
        last.map_or("-".into(), |l| format!("{l:.6}"))
    );
    record.outputs.extend(cfg.checkpoint_out.clone());
    record.outputs.push(report_path);
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    oracle: bool,
    /// `train`, `val`, `all`, or `auto` (val when present, else all).
    split: String,
    /// Temporal-consistency flow provider name, or `none`.
    flow: String,
    flow_dir: Option<PathBuf>,
    warp_merge: Option<f64>,
    dump_predictions: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            checkpoint: None,
            dataset: None,
            oracle: false,
            split: "auto".into(),
            flow: "synthetic-truth".into(),
            flow_dir: None,
            warp_merge: None,
            dump_predictions: false,
        }
    }
}

fn select_split(dataset: VideoDataset, split: &str) -> Result<VideoDataset> {
    let chosen = match split {
        "all" => dataset,
        "train" => dataset.filter_split(Split::Train),
        "val" => dataset.filter_split(Split::Val),
        "auto" => {
            let val = dataset.filter_split(Split::Val);
            if val.clips.is_empty() {
                dataset
            } else {
                val
            }
        }
        other => bail!(config_error(format!("unknown split `{other}` (train, val, all, auto)"))),
    };
    if chosen.clips.is_empty() {
        bail!(config_error(format!("split `{split}` has no clips")));
    }
    Ok(chosen)
}

fn flow_provider(name: &str, dir: Option<&PathBuf>) -> Result<Option<FlowProvider>> {
    if name == "none" {
        return Ok(None);
    }
    Ok(Some(FlowProvider::from_name(name, dir.cloned())?))
}

fn parser_of(model: StageModel, path: &Path) -> Result<ParserNet> {
    match model {
        StageModel::Parser(p) => Ok(p),
        StageModel::Frame(_) => bail!(config_error(format!(
            "{} is a frame-prediction checkpoint and has no parsing output",
            path.display()
        ))),
    }
}

fn load_data(path: Option<&PathBuf>) -> Result<VideoDataset> {
    let root = path.ok_or_else(|| config_error("no dataset given; pass --data"))?;
    Ok(load_dataset(root)?)
}

fn every_frame_annotated(d: &VideoDataset) -> bool {
    d.clips.iter().all(|c| c.labels.len() == c.frames.len())
}

fn eval(cli: &Cli, a: &EvalArgs, out: &Path, record: &mut RunRecord) -> Result<()> {
    let mut flags = Vec::new();
    push_opt(&mut flags, "checkpoint", a.checkpoint.as_ref());
    push_opt(&mut flags, "dataset", a.data.as_ref());
    push_opt(&mut flags, "split", a.split.as_deref());
    push_opt(&mut flags, "flow", a.flow.as_deref());
    push_opt(&mut flags, "flow_dir", a.flow_dir.as_ref());
    push_opt(&mut flags, "warp_merge", a.warp_merge);
    if a.oracle {
        flags.push(flag("oracle", true));
    }
    if a.dump_predictions {
        flags.push(flag("dump_predictions", true));
    }
    let settings: EvalSettings = resolve(cli.config.as_deref(), flags, &cli.set)?;
    record.config = serde_json::to_value(&settings)?;
    let data = select_split(load_data(settings.dataset.as_ref())?, &settings.split)?;
    let mut options = EvalOptions {
        consistency_flow: flow_provider(&settings.flow, settings.flow_dir.as_ref())?,
        keep_predictions: settings.dump_predictions,
    };
    let parser: Box<dyn ParsingModel> = if settings.oracle {
        if settings.checkpoint.is_some() {
            bail!(config_error("--oracle and --checkpoint are exclusive"));
        }
        if !every_frame_annotated(&data) {
            log::info!("oracle skips temporal consistency: not every frame is annotated");
            options.consistency_flow = None;
        }
        Box::new(LabelOracle::from_dataset(&data))
    } else {
        let path = settings
            .checkpoint
            .as_ref()
            .ok_or_else(|| config_error("no checkpoint given; pass --checkpoint or --oracle"))?;
        let (model, _) = load_model(path)?;
        Box::new(parser_of(model, path)?)
    };
    let parser: Box<dyn ParsingModel> = match settings.warp_merge {
        Some(alpha) => Box::new(WarpMergeParser {
            inner: parser,
            provider: flow_provider(&settings.flow, settings.flow_dir.as_ref())?
                .ok_or_else(|| config_error("warp-and-merge needs a flow provider"))?,
            alpha,
        }),
        None => parser,
    };
    let outcome = evaluate(&parser, &data, &options)?;
    let mut report = outcome.report;
    report.config = record.config.clone();
    report.write(out)?;
    record.outputs.push(out.join("metrics.json"));
    record.outputs.push(out.join("per_class_iou.csv"));
    if settings.dump_predictions {
        let dir = out.join("predictions");
        for f in &outcome.frames {
            let pred = f.prediction.as_ref().context("prediction was not kept")?;
            write_label_png(&dir.join(&f.clip_id).join(frame_file_name(f.index - 1)), pred)?;
        }
        record.outputs.push(dir);
    }
    println!("{}", summary_line(&report));
    Ok(())
}

fn summary_line(r: &MetricsReport) -> String {
    format!(
        "mIoU {:.4} PA {:.4} CA {:.4} TC {}",
        r.miou,
        r.pixel_accuracy,
        r.class_accuracy,
        r.temporal_consistency.map_or("-".into(), |t| format!("{t:.4}"))
    )
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CompareSettings {
    checkpoints: Vec<PathBuf>,
    dataset: Option<PathBuf>,
    split: String,
    flow: String,
    flow_dir: Option<PathBuf>,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            checkpoints: Vec::new(),
            dataset: None,
            split: "auto".into(),
            flow: "synthetic-truth".into(),
            flow_dir: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub name: String,
    pub checkpoint: PathBuf,
    pub stage: String,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
    pub temporal_consistency: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
}

/// Plain aligned text: one header line, then one line per row.
pub fn comparison_table(rows: &[CompareRow]) -> String {
    let header = ["model", "stage", "mIoU", "PA", "CA", "TC"];
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        cells.push(vec![
            r.name.clone(),
            r.stage.clone(),
            format!("{:.4}", r.miou),
            format!("{:.4}", r.pixel_accuracy),
            format!("{:.4}", r.class_accuracy),
            r.temporal_consistency.map_or("-".into(), |t| format!("{t:.4}")),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| cells.iter().map(|row| row[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn row_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            match p.parent().and_then(|d| d.file_name()) {
                Some(dir) if stem == "checkpoint" => dir.to_string_lossy().into_owned(),
                _ => stem,
            }
        })
        .collect();
    let mut counts = BTreeMap::new();
    for s in &stems {
        *counts.entry(s.clone()).or_insert(0) += 1;
    }
    stems
        .iter()
        .zip(paths)
        .map(|(s, p)| if counts[s] > 1 { p.display().to_string() } else { s.clone() })
        .collect()
}

fn compare(cli: &Cli, a: &CompareArgs, out: &Path, record: &mut RunRecord) -> Result<()> {
    let mut flags = vec![flag("checkpoints", &a.checkpoints)];
    push_opt(&mut flags, "dataset", a.data.as_ref());
    push_opt(&mut flags, "split", a.split.as_deref());
    push_opt(&mut flags, "flow", a.flow.as_deref());
    push_opt(&mut flags, "flow_dir", a.flow_dir.as_ref());
    let settings: CompareSettings = resolve(cli.config.as_deref(), flags, &cli.set)?;
    record.config = serde_json::to_value(&settings)?;
    if settings.checkpoints.is_empty() {
        bail!(config_error("compare needs at least one checkpoint"));
    }
    let data = select_split(load_data(settings.dataset.as_ref())?, &settings.split)?;
    let options = EvalOptions {
        consistency_flow: flow_provider(&settings.flow, settings.flow_dir.as_ref())?,
        keep_predictions: false,
    };
    let names = row_names(&settings.checkpoints);
    let mut rows = Vec::with_capacity(names.len());
    for (path, name) in settings.checkpoints.iter().zip(names) {
        let (model, ck) = load_model(path)?;
        let parser = parser_of(model, path)?;
        let r = evaluate(&parser, &data, &options)
            .with_context(|| format!("evaluating {}", path.display()))?
            .report;
        rows.push(CompareRow {
            name,
            checkpoint: path.clone(),
            stage: ck.meta.stage.to_string(),
            miou: r.miou,
            pixel_accuracy: r.pixel_accuracy,
            class_accuracy: r.class_accuracy,
            temporal_consistency: r.temporal_consistency,
            per_class_iou: r.per_class_iou,
        });
    }
    let table = comparison_table(&rows);
    let json_path = out.join("compare.json");
    write_json(&json_path, &json!({ "rows": rows, "config": record.config }))?;
    let txt_path = out.join("compare.txt");
    fs::write(&txt_path, &table).with_context(|| format!("writing {}", txt_path.display()))?;
    print!("{table}");
    record.outputs.push(json_path);
    record.outputs.push(txt_path);
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VisualizeSettings {
    checkpoint: Option<PathBuf>,
    dataset: Option<PathBuf>,
    clip: Option<String>,
    frame: Option<usize>,
    palette: Option<PathBuf>,
}

fn visualize(cli: &Cli, a: &VisualizeArgs, out: &Path, record: &mut RunRecord) -> Result<()> {
    let mut flags = Vec::new();
    push_opt(&mut flags, "checkpoint", a.checkpoint.as_ref());
    push_opt(&mut flags, "dataset", a.data.as_ref());
    push_opt(&mut flags, "clip", a.clip.as_deref());
    push_opt(&mut flags, "frame", a.frame);
    push_opt(&mut flags, "palette", a.palette.as_ref());
    let settings: VisualizeSettings = resolve(cli.config.as_deref(), flags, &cli.set)?;
    record.config = serde_json::to_value(&settings)?;
    let path = settings
        .checkpoint
        .as_ref()
        .ok_or_else(|| config_error("no checkpoint given; pass --checkpoint"))?;
    let data = load_data(settings.dataset.as_ref())?;
    let clip_id = settings.clip.as_deref().ok_or_else(|| config_error("no clip given; pass --clip"))?;
    let clip = data
        .clip_by_id(clip_id)
        .ok_or_else(|| config_error(format!("unknown clip `{clip_id}`")))?;
    let index = settings.frame.unwrap_or(clip.len());
    if index == 0 || index > clip.len() {
        bail!(config_error(format!("frame {index} outside 1..={} of clip {clip_id}", clip.len())));
    }
    let (model, _) = load_model(path)?;
    let s = model.meta().s;
    let columns: Vec<usize> = (index.saturating_sub(s).max(1)..=index).collect();
    let (w, h) = (data.width as u32, data.height as u32);
    let frames_row = columns
        .iter()
        .map(|&j| frame_tile(&clip.frames[j - 1]))
        .collect::<Result<Vec<_>>>()?;
    let rows = match &model {
        StageModel::Frame(fm) => {
            let mut predicted = Vec::with_capacity(columns.len());
            for &j in &columns {
                if j == 1 {
                    predicted.push(Tile::Blank(w, h));
                    continue;
                }
                let past = build_preceding_set(&clip.frames, j, s)?;
                predicted.push(frame_tile(&fm.predict_frame(&past)?)?);
            }
            vec![frames_row, predicted]
        }
        StageModel::Parser(p) => {
            let palette = match &settings.palette {
                Some(pp) => Palette::load(pp)?,
                None => Palette::default_synthetic(),
            };
            palette.check_covers(data.num_classes)?;
            let mut predicted = Vec::with_capacity(columns.len());
            let mut truth = Vec::with_capacity(columns.len());
            for &j in &columns {
                let ctx = CausalContext::new(&clip.id, &clip.frames, clip.flows.as_deref(), j)?;
                let map = p.predict_labels(&ctx)?;
                predicted.push(label_tile(&map, &palette));
                truth.push(match clip.labels.get(&j) {
                    Some(l) => label_tile(l, &palette),
                    None => Tile::Blank(w, h),
                });
            }
            vec![frames_row, predicted, truth]
        }
    };
    let img = compose(&rows)?;
    let fig = out.join(format!("{clip_id}_frame{index:04}.png"));
    save(&img, &fig)?;
    println!("{}", fig.display());
    record.outputs.push(fig);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, tc: Option<f64>) -> CompareRow {
        CompareRow {
            name: name.into(),
            checkpoint: PathBuf::from(format!("{name}.ckpt")),
            stage: "psp".into(),
            miou: 0.5,
            pixel_accuracy: 0.75,
            class_accuracy: 2.0 / 3.0,
            temporal_consistency: tc,
            per_class_iou: vec![],
        }
    }

    #[test]
    fn table_is_aligned_and_ordered() {
        let t = comparison_table(&[row("baseline", Some(0.9)), row("pearl", None)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("model"));
        assert!(lines[1].starts_with("baseline"));
        assert!(lines[2].starts_with("pearl"));
        assert!(lines[1].contains("0.6667") && lines[1].ends_with("0.9000"));
        assert!(lines[2].ends_with('-'));
        let col = |l: &str| l.find("0.5000").unwrap();
        assert_eq!(col(lines[1]), col(lines[2]));
    }

    #[test]
    fn duplicate_names_fall_back_to_paths() {
        let names = row_names(&[
            PathBuf::from("a/x.ckpt"),
            PathBuf::from("b/x.ckpt"),
            PathBuf::from("runs/pp/checkpoint.ckpt"),
        ]);
        assert_eq!(names, vec!["a/x.ckpt", "b/x.ckpt", "pp"]);
    }

    #[test]
    fn config_errors_map_to_two() {
        assert_eq!(exit_code(&config_error("x")), 2);
        let div: anyhow::Error = pearl::Error::Divergence { step: 1, detail: "nan".into() }.into();
        assert_eq!(exit_code(&div), 3);
        assert_eq!(exit_code(&div.context("training")), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 3);
    }
}
