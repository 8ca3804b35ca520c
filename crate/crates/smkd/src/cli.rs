//! Command implementations behind the `smkd` binary: flat key=value config
//! handling, dataset construction, the four subcommands, and report files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointError};
use crate::data::{
    apply_class_splits, generate_synthetic, load_cifar_binary, parse_class_splits, read_ppm,
    write_ppm, AugmentParams, CifarVariant, DataError, Image, LabeledDataset,
};
use crate::fewshot::{evaluate, FeatureMode, FewshotError, Method};
use crate::head::HeadConfig;
use crate::losses::match_patches;
use crate::masking::MaskSpec;
use crate::trainer::{
    metrics_csv, train_stage, LossMode, MultiCropConfig, Stage, TrainConfig, TrainError,
    TrainState,
};
use crate::viz::{attention_overlays, correspondence_image, top_attention_queries};
use crate::vit::{VitConfig, VitError};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config {
        key: String,
        line: Option<usize>,
        message: String,
    },
    Data(DataError),
    Checkpoint(CheckpointError),
    Numeric(String),
    Io(io::Error),
}

impl CliError {
    /// Process exit code: 1 usage, 2 data/format, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config { .. } | CliError::Data(_) | CliError::Checkpoint(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Config { key, line, message } => match line {
                Some(l) => write!(f, "config key `{key}` (line {l}): {message}"),
                None => write!(f, "config key `{key}`: {message}"),
            },
            CliError::Data(e) => write!(f, "{e}"),
            CliError::Checkpoint(e) => write!(f, "{e}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}
impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Checkpoint(e)
    }
}
impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            TrainError::Vit(VitError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            TrainError::MissingInit => CliError::Usage(e.to_string()),
            other => CliError::Config {
                key: "train".into(),
                line: None,
                message: other.to_string(),
            },
        }
    }
}
impl From<FewshotError> for CliError {
    fn from(e: FewshotError) -> Self {
        match e {
            FewshotError::UnknownMode(_) | FewshotError::UnknownMethod(_) => {
                CliError::Usage(e.to_string())
            }
            FewshotError::Model(VitError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Data(DataError::BadParameter(other.to_string())),
        }
    }
}
impl From<VitError> for CliError {
    fn from(e: VitError) -> Self {
        match e {
            VitError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Config {
                key: "model".into(),
                line: None,
                message: other.to_string(),
            },
        }
    }
}

// ---- config file ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum DataSource {
    Synthetic,
    Cifar {
        variant: CifarVariant,
        path: PathBuf,
        split_file: PathBuf,
    },
}

/// Everything a run needs, parsed from the flat `key = value` config file.
#[derive(Clone, Debug)]
pub struct FileConfig {
    pub vit: VitConfig,
    pub head: HeadConfig,
    pub aug: AugmentParams,
    pub train: TrainConfig,
    pub data_source: DataSource,
    pub data_seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub eval_n_way: usize,
    pub eval_k_shot: usize,
    pub eval_queries: usize,
    pub eval_episodes: usize,
    pub eval_mode: String,
    pub eval_method: String,
}

const KNOWN_KEYS: &[&str] = &[
    "data", "cifar_path", "split_file", "classes", "per_class", "data_seed",
    "image_size", "patch_size", "embed_dim", "depth", "heads", "mlp_ratio",
    "head_hidden", "head_bottleneck", "head_out", "student_temp", "teacher_temp_start",
    "teacher_temp_end", "teacher_temp_warmup_epochs", "center_momentum",
    "epochs", "batch_size", "base_lr", "final_lr", "warmup_epochs", "wd_start", "wd_end",
    "ema_start", "ema_end", "lambda", "seed", "loss",
    "mask_zero_prob", "mask_ratio_lo", "mask_ratio_hi", "normalize_mim",
    "attention_weighted_patch", "reset_optimizer",
    "crop_scale_lo", "crop_scale_hi", "flip_p", "jitter", "blur_p",
    "multicrop_local_crops", "multicrop_local_size", "multicrop_scale_lo", "multicrop_scale_hi",
    "n_way", "k_shot", "queries", "episodes", "eval_mode", "eval_method",
];

pub struct KvMap {
    entries: HashMap<String, (String, usize)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries = HashMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CliError::Config {
                key: line.to_string(),
                line: Some(ln + 1),
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Config {
                    key,
                    line: Some(ln + 1),
                    message: "unknown key".into(),
                });
            }
            if entries
                .insert(key.clone(), (value.trim().to_string(), ln + 1))
                .is_some()
            {
                return Err(CliError::Config {
                    key,
                    line: Some(ln + 1),
                    message: "duplicate key".into(),
                });
            }
        }
        Ok(KvMap { entries })
    }

    fn required(&self, key: &str) -> Result<&str, CliError> {
        self.entries
            .get(key)
            .map(|(v, _)| v.as_str())
            .ok_or_else(|| CliError::Config {
                key: key.into(),
                line: None,
                message: "missing required key".into(),
            })
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| CliError::Config {
                key: key.into(),
                line: Some(*line),
                message: format!("cannot parse {v:?}"),
            }),
        }
    }

    fn parse_required<T: std::str::FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.required(key)?;
        let line = self.entries.get(key).map(|(_, l)| *l);
        v.parse().map_err(|_| CliError::Config {
            key: key.into(),
            line,
            message: format!("cannot parse {v:?}"),
        })
    }

    fn get_bool(&self, key: &str, default: bool) -> Result<bool, CliError> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(CliError::Config {
                    key: key.into(),
                    line: Some(*line),
                    message: format!("expected a boolean, got {other:?}"),
                }),
            },
        }
    }

    fn get_str(&self, key: &str, default: &str) -> String {
        self.entries
            .get(key)
            .map(|(v, _)| v.clone())
            .unwrap_or_else(|| default.to_string())
    }
}

pub fn load_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = fs::read_to_string(path)?;
    config_from_text(&text)
}

pub fn config_from_text(text: &str) -> Result<FileConfig, CliError> {
    let kv = KvMap::parse(text)?;

    let image_size = kv.parse_as("image_size", 32usize)?;
    let vit = VitConfig {
        image_size,
        patch_size: kv.parse_as("patch_size", 8)?,
        embed_dim: kv.parse_as("embed_dim", 64)?,
        depth: kv.parse_as("depth", 4)?,
        num_heads: kv.parse_as("heads", 4)?,
        mlp_ratio: kv.parse_as("mlp_ratio", 4)?,
    };
    let head = HeadConfig {
        in_dim: vit.embed_dim,
        hidden_dim: kv.parse_as("head_hidden", 2 * vit.embed_dim)?,
        bottleneck_dim: kv.parse_as("head_bottleneck", vit.embed_dim)?,
        out_dim: kv.parse_as("head_out", 256)?,
        student_temp: kv.parse_as("student_temp", 0.1)?,
        teacher_temp_start: kv.parse_as("teacher_temp_start", 0.04)?,
        teacher_temp_end: kv.parse_as("teacher_temp_end", 0.07)?,
        teacher_temp_warmup_epochs: kv.parse_as("teacher_temp_warmup_epochs", 5)?,
        center_momentum: kv.parse_as("center_momentum", 0.9)?,
    };
    let aug = AugmentParams {
        crop_scale: (
            kv.parse_as("crop_scale_lo", 0.55)?,
            kv.parse_as("crop_scale_hi", 1.0)?,
        ),
        flip_p: kv.parse_as("flip_p", 0.5)?,
        jitter: kv.parse_as("jitter", 0.25)?,
        blur_p: kv.parse_as("blur_p", 0.1)?,
        out_size: image_size,
    };

    let loss_str = kv.get_str("loss", "cls+patch");
    let loss_mode = LossMode::parse(&loss_str).ok_or_else(|| CliError::Config {
        key: "loss".into(),
        line: kv.entries.get("loss").map(|(_, l)| *l),
        message: format!("unknown loss mode {loss_str:?}"),
    })?;
    let n_local = kv.parse_as("multicrop_local_crops", 0usize)?;
    let multicrop = if n_local > 0 {
        Some(MultiCropConfig {
            n_local,
            local_size: kv.parse_as("multicrop_local_size", image_size / 2)?,
            local_scale: (
                kv.parse_as("multicrop_scale_lo", 0.05)?,
                kv.parse_as("multicrop_scale_hi", 0.4)?,
            ),
        })
    } else {
        None
    };
    let train = TrainConfig {
        stage: Stage::SslPretrain, // chosen by the subcommand
        epochs: kv.parse_required("epochs")?,
        batch_size: kv.parse_as("batch_size", 24)?,
        base_lr: kv.parse_as("base_lr", 1e-3)?,
        final_lr: kv.parse_as("final_lr", 1e-5)?,
        warmup_epochs: kv.parse_as("warmup_epochs", 3)?,
        wd_start: kv.parse_as("wd_start", 0.04)?,
        wd_end: kv.parse_as("wd_end", 0.4)?,
        ema_momentum_start: kv.parse_as("ema_start", 0.996)?,
        ema_momentum_end: kv.parse_as("ema_end", 1.0)?,
        lambda: kv.parse_as("lambda", 0.45)?,
        seed: kv.parse_as("seed", 0u64)?,
        loss_mode,
        mask_zero_prob: kv.parse_as("mask_zero_prob", 0.5)?,
        mask_ratio_lo: kv.parse_as("mask_ratio_lo", 0.1)?,
        mask_ratio_hi: kv.parse_as("mask_ratio_hi", 0.5)?,
        normalize_mim: kv.get_bool("normalize_mim", true)?,
        attention_weighted_patch: kv.get_bool("attention_weighted_patch", false)?,
        reset_optimizer: kv.get_bool("reset_optimizer", true)?,
        allow_cold_start: false,
        multicrop,
    };

    let data_source = match kv.required("data")? {
        "synthetic" => DataSource::Synthetic,
        variant @ ("cifar10" | "cifar100") => DataSource::Cifar {
            variant: if variant == "cifar10" {
                CifarVariant::Cifar10Like
            } else {
                CifarVariant::Cifar100Like
            },
            path: PathBuf::from(kv.required("cifar_path")?),
            split_file: PathBuf::from(kv.required("split_file")?),
        },
        other => {
            return Err(CliError::Config {
                key: "data".into(),
                line: kv.entries.get("data").map(|(_, l)| *l),
                message: format!("expected synthetic|cifar10|cifar100, got {other:?}"),
            })
        }
    };

    Ok(FileConfig {
        vit,
        head,
        aug,
        train,
        data_source,
        data_seed: kv.parse_as("data_seed", 7u64)?,
        classes: kv.parse_as("classes", 12usize)?,
        per_class: kv.parse_as("per_class", 200usize)?,
        eval_n_way: kv.parse_as("n_way", 5usize)?,
        eval_k_shot: kv.parse_as("k_shot", 1usize)?,
        eval_queries: kv.parse_as("queries", 15usize)?,
        eval_episodes: kv.parse_as("episodes", 600usize)?,
        eval_mode: kv.get_str("eval_mode", "cls+weighted_avg_pool"),
        eval_method: kv.get_str("eval_method", "prototype"),
    })
}

pub fn build_dataset(cfg: &FileConfig) -> Result<LabeledDataset, CliError> {
    match &cfg.data_source {
        DataSource::Synthetic => Ok(generate_synthetic(
            cfg.classes,
            cfg.per_class,
            cfg.vit.image_size,
            cfg.data_seed,
        )?),
        DataSource::Cifar {
            variant,
            path,
            split_file,
        } => {
            let ds = load_cifar_binary(path, *variant)?;
            let text = fs::read_to_string(split_file)?;
            let splits = parse_class_splits(&text)?;
            Ok(apply_class_splits(ds, &splits)?)
        }
    }
}

// ---- command-line overrides -------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub loss: Option<String>,
    pub episodes: Option<usize>,
    pub n_way: Option<usize>,
    pub k_shot: Option<usize>,
    pub mode: Option<String>,
    pub method: Option<String>,
    pub cold_start: bool,
    pub strict: bool,
    pub out_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut FileConfig) -> Result<(), CliError> {
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(lambda) = self.lambda {
            cfg.train.lambda = lambda;
        }
        if let Some(loss) = &self.loss {
            cfg.train.loss_mode = LossMode::parse(loss).ok_or_else(|| {
                CliError::Usage(format!("unknown --loss {loss:?}"))
            })?;
        }
        if let Some(e) = self.episodes {
            cfg.eval_episodes = e;
        }
        if let Some(n) = self.n_way {
            cfg.eval_n_way = n;
        }
        if let Some(k) = self.k_shot {
            cfg.eval_k_shot = k;
        }
        if let Some(m) = &self.mode {
            cfg.eval_mode = m.clone();
        }
        if let Some(m) = &self.method {
            cfg.eval_method = m.clone();
        }
        cfg.train.allow_cold_start = self.cold_start;
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("smkd-out"))
    }
}

fn load_init_state(
    path: &Path,
    cfg: &FileConfig,
    strict: bool,
) -> Result<TrainState<f32>, CliError> {
    let loaded = load_checkpoint(path, &cfg.vit, &cfg.head, strict)?;
    Ok(loaded.state)
}

// ---- subcommands --------------------------------------------------------------

/// Stage-1 self-supervised pretraining; writes `stage1.ckpt` and
/// `pretrain_metrics.csv` into the output directory. Pass `--init` with a
/// stage-1 checkpoint to resume it.
pub fn cmd_pretrain(
    config_path: &Path,
    init: Option<&Path>,
    ov: &Overrides,
) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(config_path)?;
    ov.apply(&mut cfg)?;
    cfg.train.stage = Stage::SslPretrain;

    let data = build_dataset(&cfg)?;
    let init_state = match init {
        Some(p) => Some(load_init_state(p, &cfg, ov.strict)?),
        None => None,
    };
    let (state, rows) = train_stage(&data, &cfg.vit, &cfg.head, &cfg.aug, &cfg.train, init_state)?;

    let out = ov.out_dir();
    fs::create_dir_all(&out)?;
    let ckpt = out.join("stage1.ckpt");
    save_checkpoint(
        &ckpt,
        &state,
        Stage::SslPretrain,
        config_hash(&cfg.vit, &cfg.head),
    )?;
    fs::write(out.join("pretrain_metrics.csv"), metrics_csv(&rows))?;
    Ok(ckpt)
}

/// Stage-2 supervised distillation from a pretrained checkpoint; writes
/// `stage2.ckpt` and `train_metrics.csv`.
pub fn cmd_train(
    config_path: &Path,
    init: Option<&Path>,
    ov: &Overrides,
) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(config_path)?;
    ov.apply(&mut cfg)?;
    cfg.train.stage = Stage::Supervised;

    let data = build_dataset(&cfg)?;
    let init_state = match init {
        Some(p) => {
            let mut state = load_init_state(p, &cfg, ov.strict)?;
            // a stage-1 checkpoint seeds stage 2 from step zero
            if cfg.train.reset_optimizer {
                state.opt = crate::trainer::AdamW::new();
            }
            state.pair.step = 0;
            state.pair.epoch = 0;
            Some(state)
        }
        None => None,
    };
    let (state, rows) = train_stage(&data, &cfg.vit, &cfg.head, &cfg.aug, &cfg.train, init_state)?;

    let out = ov.out_dir();
    fs::create_dir_all(&out)?;
    let ckpt = out.join("stage2.ckpt");
    save_checkpoint(
        &ckpt,
        &state,
        Stage::Supervised,
        config_hash(&cfg.vit, &cfg.head),
    )?;
    fs::write(out.join("train_metrics.csv"), metrics_csv(&rows))?;
    Ok(ckpt)
}

pub fn eval_report_csv(rows: &[(Method, FeatureMode, usize, usize, f64, f64, usize)]) -> String {
    let mut out = String::from("method,mode,n_way,k_shot,mean_acc,ci95,n_episodes\n");
    for (method, mode, n, k, acc, ci, eps) in rows {
        out.push_str(&format!(
            "{method},{mode},{n},{k},{acc:.6},{ci:.6},{eps}\n"
        ));
    }
    out
}

/// Few-shot evaluation of a frozen checkpoint (the teacher weights); writes
/// `eval_report.csv` plus a per-episode dump and prints a table.
pub fn cmd_eval(
    checkpoint: &Path,
    config_path: &Path,
    ov: &Overrides,
) -> Result<(), CliError> {
    let mut cfg = load_config(config_path)?;
    ov.apply(&mut cfg)?;
    let data = build_dataset(&cfg)?;
    let state = load_init_state(checkpoint, &cfg, ov.strict)?;
    let seed = ov.seed.unwrap_or(cfg.train.seed);

    let modes: Vec<FeatureMode> = cfg
        .eval_mode
        .split(',')
        .map(FeatureMode::parse)
        .collect::<Result<_, _>>()?;
    let methods: Vec<Method> = cfg
        .eval_method
        .split(',')
        .map(Method::parse)
        .collect::<Result<_, _>>()?;

    let mut report_rows = Vec::new();
    let mut episode_csv = String::from("method,mode,episode,accuracy\n");
    println!("method      mode                                n  k  episodes  acc      ci95");
    for method in &methods {
        for mode in &modes {
            let report = evaluate(
                &state.pair.teacher,
                &cfg.vit,
                &data,
                cfg.eval_episodes,
                cfg.eval_n_way,
                cfg.eval_k_shot,
                cfg.eval_queries,
                *mode,
                *method,
                seed,
            )?;
            println!(
                "{:<11} {:<35} {:<2} {:<2} {:<9} {:.4}   {:.4}",
                method.to_string(),
                mode.to_string(),
                report.n_way,
                report.k_shot,
                report.n_episodes,
                report.mean_acc,
                report.ci95
            );
            for (i, acc) in report.per_episode.iter().enumerate() {
                episode_csv.push_str(&format!("{method},{mode},{i},{acc:.6}\n"));
            }
            report_rows.push((
                *method,
                *mode,
                report.n_way,
                report.k_shot,
                report.mean_acc,
                report.ci95,
                report.n_episodes,
            ));
        }
    }

    let out = ov.out_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("eval_report.csv"), eval_report_csv(&report_rows))?;
    fs::write(out.join("eval_episodes.csv"), episode_csv)?;
    Ok(())
}

/// Attention overlays for every image (one PPM per head plus a combined map)
/// and, for each consecutive image pair, a side-by-side dense-correspondence
/// rendering.
pub fn cmd_visualize(
    checkpoint: &Path,
    config_path: &Path,
    image_paths: &[PathBuf],
    ov: &Overrides,
) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(config_path)?;
    let state = load_init_state(checkpoint, &cfg, ov.strict)?;
    let model = &state.pair.teacher;
    let out = ov.out_dir();
    fs::create_dir_all(&out)?;

    let mut images = Vec::new();
    for p in image_paths {
        let (w, h, rgb) = read_ppm(p)?;
        if w != cfg.vit.image_size || h != cfg.vit.image_size {
            return Err(CliError::Data(DataError::BadParameter(format!(
                "{}: image is {w}x{h}, model expects {0}x{0}",
                cfg.vit.image_size
            ))));
        }
        images.push(Image::from_interleaved(w, &rgb));
    }

    let mut written = Vec::new();
    let mut token_sets = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let tokens = model.vit.patchify(&cfg.vit, &img.to_tensor())?;
        let ts = model.vit.forward(&cfg.vit, &tokens)?;
        for (name, raster) in attention_overlays(&ts, img, &cfg.vit) {
            let path = out.join(format!("img{i}_{name}.ppm"));
            write_ppm(&path, raster.width, raster.height, &raster.rgb)?;
            written.push(path);
        }
        token_sets.push(ts);
    }

    for pair_idx in 0..images.len() / 2 {
        let a = 2 * pair_idx;
        let b = a + 1;
        let matches = match_patches(&token_sets[a].patches, &token_sets[b].patches)
            .map_err(|e| CliError::Data(DataError::BadParameter(e.to_string())))?;
        let queries = top_attention_queries(&token_sets[a]);
        let raster = correspondence_image(&cfg.vit, &images[a], &images[b], &matches, &queries);
        let path = out.join(format!("pair{pair_idx}_match.ppm"));
        write_ppm(&path, raster.width, raster.height, &raster.rgb)?;
        written.push(path);
    }
    Ok(written)
}

/// Convenience used by tests and pilots: a fully-specified mask that leaves
/// everything visible.
pub fn no_mask(n: usize) -> MaskSpec {
    MaskSpec::none(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> String {
        "data = synthetic\nepochs = 1\nclasses = 7\nper_class = 4\nimage_size = 8\n\
         patch_size = 4\nembed_dim = 8\ndepth = 2\nheads = 2\nmlp_ratio = 2\n\
         head_hidden = 12\nhead_bottleneck = 6\nhead_out = 16\nbatch_size = 4\n\
         warmup_epochs = 0\n"
            .to_string()
    }

    #[test]
    fn config_defaults_and_parsing() {
        let cfg = config_from_text(&base_config()).unwrap();
        assert_eq!(cfg.vit.image_size, 8);
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.lambda, 0.45);
        assert_eq!(cfg.eval_episodes, 600);
        assert_eq!(cfg.eval_mode, "cls+weighted_avg_pool");
    }

    #[test]
    fn missing_required_key_names_it() {
        let err = config_from_text("epochs = 5\n").unwrap_err();
        match err {
            CliError::Config { key, message, .. } => {
                assert_eq!(key, "data");
                assert!(message.contains("missing required key"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let err = config_from_text("data = synthetic\n").unwrap_err();
        match err {
            CliError::Config { key, .. } => assert_eq!(key, "epochs"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_key_and_line() {
        let text = "data = synthetic\nepochs = banana\n";
        match config_from_text(text).unwrap_err() {
            CliError::Config { key, line, .. } => {
                assert_eq!(key, "epochs");
                assert_eq!(line, Some(2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let text = "data = synthetic\nepochs = 1\nnonsense = 3\n";
        match config_from_text(text).unwrap_err() {
            CliError::Config { key, line, .. } => {
                assert_eq!(key, "nonsense");
                assert_eq!(line, Some(3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let text = "# top comment\n\ndata = synthetic # trailing\nepochs = 2\n";
        let cfg = config_from_text(text).unwrap();
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(
            CliError::Config {
                key: "k".into(),
                line: None,
                message: "m".into()
            }
            .exit_code(),
            2
        );
        assert_eq!(CliError::Numeric("n".into()).exit_code(), 3);
    }

    #[test]
    fn loss_mode_override_applies() {
        let mut cfg = config_from_text(&base_config()).unwrap();
        let ov = Overrides {
            loss: Some("ce".into()),
            lambda: Some(0.25),
            seed: Some(42),
            ..Default::default()
        };
        ov.apply(&mut cfg).unwrap();
        assert_eq!(cfg.train.loss_mode, LossMode::Ce);
        assert_eq!(cfg.train.lambda, 0.25);
        assert_eq!(cfg.train.seed, 42);

        let ov = Overrides {
            loss: Some("bogus".into()),
            ..Default::default()
        };
        assert!(matches!(ov.apply(&mut cfg), Err(CliError::Usage(_))));
    }
}
