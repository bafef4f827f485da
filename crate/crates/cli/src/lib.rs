//! `c2sdg` subcommands.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data or
//! checkpoint error, 4 numeric failure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use c2sdg_core::dataio::{self, netpbm, synth_benchmark, BenchmarkSpec, Dataset, Split};
use c2sdg_core::image::images_to_tensor;
use c2sdg_core::segmodel::ShallowFeatures;
use c2sdg_core::trainer::{self, average_dice, evaluate_with, DomainDice, RunOutput};
use c2sdg_core::{DropPoint, Error, Image, InferHooks, Mask, Model, ModelState, Sample, TrainConfig};

pub const ABLATION_HEADER: &str = "channel,dice_od,dice_oc";
pub const PROMPT_HEADER: &str = "channel,logit_sty,logit_str,mask_sty,mask_str";
pub const EVAL_HEADER: &str = "domain,dice_od,dice_oc";
pub const FEATURE_SIDECAR_HEADER: &str = "part,channel,min,max";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::NonFinite(_)) => 4,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

const HELP: &str = "usage: c2sdg <command> [--key value ...]

commands:
  synth            --out DIR [--spec FILE] [--seed N]
  train            [--config FILE] [--<config key> VALUE ...]
  eval             --checkpoint FILE --data DIR [--domains A,B] [--split test|train|all]
  infer            --checkpoint FILE --image FILE.ppm
  ablate           --checkpoint FILE --data DIR --mode drop|add [--point pre|post]
                   [--domains B,C,D] [--split test|train|all] [--out FILE]
                   [--export-dir DIR --export-ids ID,ID]
  inspect-prompt   --checkpoint FILE [--out FILE]
  export-features  --checkpoint FILE --image FILE.ppm --out DIR
";

/// `--key value` pairs in command-line order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Flags(Vec<(String, String)>);

impl Flags {
    pub fn parse(args: &[String]) -> CliResult<Self> {
        let mut out = Vec::new();
        let mut it = args.iter();
        while let Some(a) = it.next() {
            let key = a
                .strip_prefix("--")
                .filter(|k| !k.is_empty())
                .ok_or_else(|| usage(format!("expected --key, got {a:?}")))?;
            let (key, value) = match key.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| usage(format!("missing value for --{key}")))?;
                    (key.to_string(), v.clone())
                }
            };
            let key = key.replace('-', "_");
            if out.iter().any(|(k, _)| *k == key) {
                return Err(usage(format!("--{key} given twice")));
            }
            out.push((key, value));
        }
        Ok(Self(out))
    }

    fn only(&self, allowed: &[&str]) -> CliResult<()> {
        match self.0.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
            Some((k, _)) => Err(usage(format!("unknown flag --{k}"))),
            None => Ok(()),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn required(&self, key: &str) -> CliResult<&str> {
        self.get(key).ok_or_else(|| usage(format!("missing required --{key}")))
    }

    fn path(&self, key: &str) -> CliResult<PathBuf> {
        self.required(key).map(PathBuf::from)
    }

    fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key)
            .map(|v| v.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect())
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.0
    }
}

fn read_config_file(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

/// Loads a training config from an optional JSON file and applies flag
/// overrides. Each flag must name an existing config key.
pub fn load_train_config(file: Option<&Path>, overrides: &[(String, String)]) -> CliResult<TrainConfig> {
    let mut value = match file {
        Some(p) => serde_json::from_str::<serde_json::Value>(&read_config_file(p)?)
            .map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => serde_json::json!({}),
    };
    let defaults = serde_json::to_value(TrainConfig::default()).expect("config serializes");
    let known = defaults.as_object().expect("config is an object");
    let obj = value
        .as_object_mut()
        .ok_or_else(|| usage("config file must hold a JSON object"))?;
    for (k, raw) in overrides {
        if !known.contains_key(k) {
            return Err(usage(format!("unknown flag --{k}")));
        }
        let is_text = known[k].is_string() || (k == "targets" && !raw.trim_start().starts_with('['));
        let v = if k == "targets" && is_text {
            serde_json::Value::from(raw.split(',').filter(|s| !s.is_empty()).collect::<Vec<_>>())
        } else if is_text {
            serde_json::Value::from(raw.as_str())
        } else {
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::from(raw.as_str()))
        };
        obj.insert(k.clone(), v);
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Counts of what `cmd_synth` wrote.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSummary {
    pub domains: usize,
    pub images: usize,
    pub masks: usize,
}

pub fn load_benchmark_spec(path: Option<&Path>) -> CliResult<BenchmarkSpec> {
    let spec = match path {
        Some(p) => serde_json::from_str(&read_config_file(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => BenchmarkSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_synth(spec_file: Option<&Path>, out_dir: &Path, seed: u64) -> CliResult<SynthSummary> {
    let spec = load_benchmark_spec(spec_file)?;
    let samples = synth_benchmark(&spec, seed)?;
    dataio::write_dataset(out_dir, &samples)?;
    Ok(SynthSummary {
        domains: spec.domains.len(),
        images: samples.len(),
        masks: 2 * samples.len(),
    })
}

pub fn cmd_train(cfg: &TrainConfig) -> CliResult<RunOutput> {
    Ok(trainer::train(cfg)?)
}

pub fn load_model(checkpoint: &Path) -> CliResult<Model> {
    Ok(ModelState::load(checkpoint)?.model)
}

fn parse_split(v: Option<&str>) -> CliResult<Option<Split>> {
    match v.unwrap_or("test") {
        "test" => Ok(Some(Split::Test)),
        "train" => Ok(Some(Split::Train)),
        "all" => Ok(None),
        other => Err(usage(format!("unknown split {other:?}"))),
    }
}

/// Samples of the chosen domains; a domain without the requested split
/// contributes all of its samples.
pub fn select_samples<'a>(data: &'a Dataset, domains: Option<&[String]>, split: Option<Split>) -> CliResult<Vec<&'a Sample>> {
    let names: Vec<String> = match domains {
        Some(d) => d.to_vec(),
        None => data.domains().into_iter().map(str::to_string).collect(),
    };
    let mut out = Vec::new();
    for name in &names {
        let all = data.domain(name);
        if all.is_empty() {
            return Err(Error::Dataset(format!("domain {name:?} not found")).into());
        }
        let chosen = split.map(|s| data.split(name, s)).filter(|s| !s.is_empty()).unwrap_or(all);
        out.extend(chosen);
    }
    Ok(out)
}

fn dice_csv(scores: &BTreeMap<String, DomainDice>) -> String {
    let mut out = format!("{EVAL_HEADER}\n");
    for (d, s) in scores {
        writeln!(out, "{d},{},{}", s.od, s.oc).expect("string write");
    }
    out
}

pub fn cmd_eval(checkpoint: &Path, data_root: &Path, domains: Option<&[String]>, split: Option<Split>) -> CliResult<String> {
    let model = load_model(checkpoint)?;
    let data = dataio::load_dataset(data_root)?;
    let samples = select_samples(&data, domains, split)?;
    Ok(dice_csv(&evaluate_with(&model, &samples, &InferHooks::default())?))
}

fn check_image_fits(model: &Model, img: &Image) -> CliResult<()> {
    if img.channels() != 3 {
        return Err(Error::Dataset("expected an RGB image".into()).into());
    }
    model.arch().check_input(img.height(), img.width())?;
    Ok(())
}

/// Writes `<stem>_od_pred.pgm` and `<stem>_oc_pred.pgm` next to the image.
pub fn cmd_infer(checkpoint: &Path, image: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let model = load_model(checkpoint)?;
    let img = netpbm::read_ppm(image)?;
    check_image_fits(&model, &img)?;
    let probs = model.infer(&images_to_tensor([&img])?, &InferHooks::default())?;
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let od = Mask::from_probabilities(h, w, &probs.data()[..plane])?;
    let oc = Mask::from_probabilities(h, w, &probs.data()[plane..2 * plane])?;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| usage(format!("bad image path {}", image.display())))?;
    let dir = image.parent().unwrap_or(Path::new("."));
    let od_path = dir.join(format!("{stem}_od_pred.pgm"));
    let oc_path = dir.join(format!("{stem}_oc_pred.pgm"));
    netpbm::write_pgm(&od, &od_path)?;
    netpbm::write_pgm(&oc, &oc_path)?;
    Ok((od_path, oc_path))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    /// Zero one channel at a time.
    Drop,
    /// Add one style channel back into the structure features at a time.
    Add,
}

impl std::str::FromStr for AblationMode {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "drop" => Ok(AblationMode::Drop),
            "add" => Ok(AblationMode::Add),
            _ => Err(usage(format!("unknown ablation mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblateOptions {
    pub checkpoint: PathBuf,
    pub data_root: PathBuf,
    pub mode: AblationMode,
    pub point: DropPoint,
    pub domains: Option<Vec<String>>,
    pub split: Option<Split>,
    pub export_dir: Option<PathBuf>,
    pub export_ids: Vec<String>,
}

/// One ablation row: `None` is the unablated reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AblationRow {
    pub channel: Option<usize>,
    pub dice_od: f64,
    pub dice_oc: f64,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        (self.dice_od + self.dice_oc) / 2.0
    }
}

fn domain_average(scores: &BTreeMap<String, DomainDice>) -> (f64, f64) {
    let n = scores.len().max(1) as f64;
    (
        scores.values().map(|s| s.od).sum::<f64>() / n,
        scores.values().map(|s| s.oc).sum::<f64>() / n,
    )
}

/// Per-channel ablation on an in-memory model and sample set.
pub fn ablation_rows(model: &Model, samples: &[&Sample], mode: AblationMode, point: DropPoint) -> CliResult<Vec<AblationRow>> {
    let row = |channel: Option<usize>, hooks: &InferHooks| -> CliResult<AblationRow> {
        let (dice_od, dice_oc) = domain_average(&evaluate_with(model, samples, hooks)?);
        Ok(AblationRow { channel, dice_od, dice_oc })
    };
    let mut rows = vec![row(None, &InferHooks::default())?];
    let channels: Vec<usize> = match mode {
        AblationMode::Drop => (0..model.arch().channels).collect(),
        AblationMode::Add => {
            let (_, st) = model.masks()?;
            (0..st.len()).filter(|&i| st[i] < 0.5).collect()
        }
    };
    for c in channels {
        let hooks = match mode {
            AblationMode::Drop => InferHooks {
                drop_channel: Some((c, point)),
                ..Default::default()
            },
            AblationMode::Add => InferHooks {
                add_style_channel: Some(c),
                ..Default::default()
            },
        };
        rows.push(row(Some(c), &hooks)?);
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let ch = r.channel.map(|c| c.to_string()).unwrap_or_else(|| "reference".into());
        writeln!(out, "{ch},{},{}", r.dice_od, r.dice_oc).expect("string write");
    }
    out
}

pub fn cmd_ablate(opts: &AblateOptions) -> CliResult<String> {
    let model = load_model(&opts.checkpoint)?;
    let data = dataio::load_dataset(&opts.data_root)?;
    let samples = select_samples(&data, opts.domains.as_deref(), opts.split)?;
    let rows = ablation_rows(&model, &samples, opts.mode, opts.point)?;
    if let Some(dir) = &opts.export_dir {
        for id in &opts.export_ids {
            let s = samples
                .iter()
                .find(|s| &s.id == id)
                .ok_or_else(|| Error::Dataset(format!("no sample with id {id:?} in the selection")))?;
            export_feature_maps(&model, &s.image, dir, &format!("{}_{}", s.domain, s.id))?;
        }
    }
    Ok(ablation_csv(&rows))
}

pub fn prompt_csv(model: &Model) -> CliResult<String> {
    let logits = model.store.get(model.net.prompt.logits);
    let c = model.arch().channels;
    let (sty, st) = model.masks()?;
    let mut out = format!("{PROMPT_HEADER}\n");
    for i in 0..c {
        writeln!(out, "{i},{},{},{},{}", logits.data()[i], logits.data()[c + i], sty[i], st[i]).expect("string write");
    }
    Ok(out)
}

pub fn cmd_inspect_prompt(checkpoint: &Path) -> CliResult<String> {
    prompt_csv(&load_model(checkpoint)?)
}

/// Writes one PGM per channel of each feature part, each scaled by its own
/// min/max, plus a sidecar CSV of those ranges. Returns the written paths.
pub fn export_feature_maps(model: &Model, image: &Image, dir: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    check_image_fits(model, image)?;
    let feats = model.shallow_features(&images_to_tensor([image])?)?;
    let ShallowFeatures { full, style, structure } = &feats;
    std::fs::create_dir_all(dir).map_err(|e| Error::io_error(dir, e))?;
    let d = full.dims();
    let (c, h, w) = (d[1], d[2], d[3]);
    let plane = h * w;
    let mut sidecar = format!("{FEATURE_SIDECAR_HEADER}\n");
    let mut written = Vec::new();
    for (part, t) in [("full", full), ("style", style), ("structure", structure)] {
        for ch in 0..c {
            let v = &t.data()[ch * plane..(ch + 1) * plane];
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let path = dir.join(format!("{prefix}_{part}_c{ch:03}.pgm"));
            let bytes = netpbm::encode_gray(v, w, h, lo, hi)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io_error(&path, e))?;
            writeln!(sidecar, "{part},{ch},{lo},{hi}").expect("string write");
            written.push(path);
        }
    }
    let side = dir.join(format!("{prefix}_features.csv"));
    std::fs::write(&side, sidecar).map_err(|e| Error::io_error(&side, e))?;
    written.push(side);
    Ok(written)
}

pub fn cmd_export_features(checkpoint: &Path, image: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let model = load_model(checkpoint)?;
    let img = netpbm::read_ppm(image)?;
    let prefix = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    export_feature_maps(&model, &img, out_dir, &prefix)
}

fn write_or_print(text: &str, out_file: Option<&str>, out: &mut dyn Write) -> CliResult<()> {
    match out_file {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io_error(Path::new(p), e))?,
        None => out.write_all(text.as_bytes()).map_err(|e| Error::io_error(Path::new("<stdout>"), e))?,
    }
    Ok(())
}

/// Dispatches one command line (without the program name).
pub fn run(args: &[String], out: &mut dyn Write) -> CliResult<()> {
    let Some((command, rest)) = args.split_first() else {
        return Err(usage(HELP));
    };
    if matches!(command.as_str(), "-h" | "--help" | "help") {
        let _ = out.write_all(HELP.as_bytes());
        return Ok(());
    }
    let flags = Flags::parse(rest)?;
    match command.as_str() {
        "synth" => {
            flags.only(&["out", "spec", "seed"])?;
            let seed = flags
                .get("seed")
                .map(|s| s.parse().map_err(|_| usage(format!("bad --seed {s:?}"))))
                .transpose()?
                .unwrap_or(0);
            let spec = flags.get("spec").map(PathBuf::from);
            let s = cmd_synth(spec.as_deref(), &flags.path("out")?, seed)?;
            let text = format!("wrote {} images and {} masks across {} domains\n", s.images, s.masks, s.domains);
            write_or_print(&text, None, out)
        }
        "train" => {
            let file = flags.get("config").map(PathBuf::from);
            let overrides: Vec<(String, String)> = flags.pairs().iter().filter(|(k, _)| k != "config").cloned().collect();
            let cfg = load_train_config(file.as_deref(), &overrides)?;
            let r = cmd_train(&cfg)?;
            let mut text = format!("steps: {}\n", r.steps);
            if let Some(b) = r.best_score {
                writeln!(text, "best average target dice: {b} (epoch {})", r.best_epoch.unwrap_or(0)).expect("string write");
            }
            writeln!(text, "final: {}", r.final_checkpoint.display()).expect("string write");
            writeln!(text, "metrics: {}", r.metrics.display()).expect("string write");
            write_or_print(&text, None, out)
        }
        "eval" => {
            flags.only(&["checkpoint", "data", "domains", "split"])?;
            let split = parse_split(flags.get("split"))?;
            let csv = cmd_eval(&flags.path("checkpoint")?, &flags.path("data")?, flags.list("domains").as_deref(), split)?;
            write_or_print(&csv, None, out)
        }
        "infer" => {
            flags.only(&["checkpoint", "image"])?;
            let (od, oc) = cmd_infer(&flags.path("checkpoint")?, &flags.path("image")?)?;
            write_or_print(&format!("{}\n{}\n", od.display(), oc.display()), None, out)
        }
        "ablate" => {
            flags.only(&["checkpoint", "data", "mode", "point", "domains", "split", "out", "export_dir", "export_ids"])?;
            let opts = AblateOptions {
                checkpoint: flags.path("checkpoint")?,
                data_root: flags.path("data")?,
                mode: flags.required("mode")?.parse()?,
                point: flags.get("point").unwrap_or("pre").parse().map_err(|e: Error| usage(e.to_string()))?,
                domains: flags.list("domains"),
                split: parse_split(flags.get("split"))?,
                export_dir: flags.get("export_dir").map(PathBuf::from),
                export_ids: flags.list("export_ids").unwrap_or_default(),
            };
            let csv = cmd_ablate(&opts)?;
            write_or_print(&csv, flags.get("out"), out)
        }
        "inspect-prompt" => {
            flags.only(&["checkpoint", "out"])?;
            let csv = cmd_inspect_prompt(&flags.path("checkpoint")?)?;
            write_or_print(&csv, flags.get("out"), out)
        }
        "export-features" => {
            flags.only(&["checkpoint", "image", "out"])?;
            let paths = cmd_export_features(&flags.path("checkpoint")?, &flags.path("image")?, &flags.path("out")?)?;
            write_or_print(&format!("wrote {} files\n", paths.len()), None, out)
        }
        other => Err(usage(format!("unknown command {other:?}\n\n{HELP}"))),
    }
}

/// Average target Dice of a finished run's final scores.
pub fn run_score(r: &RunOutput) -> f64 {
    average_dice(&r.final_scores)
}
