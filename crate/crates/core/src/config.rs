//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, keys are the field names of
//! [`ModelConfig`] and [`TrainConfig`] plus the dataset keys below. Unknown
//! or repeated keys are errors; missing keys take their defaults.
//!
//! ```text
//! # tiny stripes run
//! dim = 32
//! block_pattern = LL
//! dataset = stripes
//! stripes_split = even_odd
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::trainer::DEFAULT_SAMPLES;
use crate::train::{DataSpec, StripesSplit, TrainConfig};

pub const KEYS: &[&str] = &[
    "image_h",
    "image_w",
    "channels",
    "patch_size",
    "dim",
    "depth",
    "mlp_ratio",
    "num_heads",
    "num_classes",
    "block_pattern",
    "use_pos_embed",
    "kernel_init",
    "view",
    "batch_size",
    "total_steps",
    "seed",
    "label_smoothing",
    "base_lr",
    "min_lr",
    "warmup_steps",
    "weight_decay",
    "eval_every",
    "dataset",
    "train_samples",
    "test_samples",
    "stripes_split",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "metrics_path",
    "checkpoint_path",
];

/// A parsed config and the keys the file set explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub train: TrainConfig,
    pub explicit: BTreeSet<String>,
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {raw:?} for {key}")))
}

fn flag(key: &str, raw: &str, line: usize) -> Result<bool> {
    match raw {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: invalid flag {raw:?} for {key}"))),
    }
}

#[derive(Default)]
struct DataKeys {
    kind: Option<String>,
    train_samples: Option<usize>,
    test_samples: Option<usize>,
    split: Option<StripesSplit>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
}

pub fn parse(text: &str) -> Result<ConfigFile> {
    let mut cfg = TrainConfig::default();
    let mut data = DataKeys::default();
    let mut explicit = BTreeSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, raw) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`")))?;
        let (key, raw) = (key.trim(), raw.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {line}: unknown key {key:?}")));
        }
        if !explicit.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line}: {key} set twice")));
        }
        let m = &mut cfg.model;
        match key {
            "image_h" => m.image_h = value(key, raw, line)?,
            "image_w" => m.image_w = value(key, raw, line)?,
            "channels" => m.channels = value(key, raw, line)?,
            "patch_size" => m.patch_size = value(key, raw, line)?,
            "dim" => m.dim = value(key, raw, line)?,
            "depth" => m.depth = value(key, raw, line)?,
            "mlp_ratio" => m.mlp_ratio = value(key, raw, line)?,
            "num_heads" => m.num_heads = value(key, raw, line)?,
            "num_classes" => m.num_classes = value(key, raw, line)?,
            "block_pattern" => m.block_pattern = raw.to_string(),
            "use_pos_embed" => m.use_pos_embed = flag(key, raw, line)?,
            "kernel_init" => m.kernel_init = value(key, raw, line)?,
            "view" => m.view = value(key, raw, line)?,
            "batch_size" => cfg.batch_size = value(key, raw, line)?,
            "total_steps" => cfg.total_steps = value(key, raw, line)?,
            "seed" => cfg.seed = value(key, raw, line)?,
            "label_smoothing" => cfg.label_smoothing = value(key, raw, line)?,
            "base_lr" => cfg.base_lr = value(key, raw, line)?,
            "min_lr" => cfg.min_lr = value(key, raw, line)?,
            "warmup_steps" => cfg.warmup_steps = Some(value(key, raw, line)?),
            "weight_decay" => cfg.weight_decay = value(key, raw, line)?,
            "eval_every" => cfg.eval_every = value(key, raw, line)?,
            "dataset" => data.kind = Some(raw.to_string()),
            "train_samples" => data.train_samples = Some(value(key, raw, line)?),
            "test_samples" => data.test_samples = Some(value(key, raw, line)?),
            "stripes_split" => {
                data.split = Some(match raw {
                    "all" => StripesSplit::All,
                    "even_odd" => StripesSplit::EvenOdd,
                    _ => {
                        return Err(Error::Config(format!(
                            "line {line}: stripes_split must be all or even_odd"
                        )))
                    }
                })
            }
            "train_images" => data.train_images = Some(raw.into()),
            "train_labels" => data.train_labels = Some(raw.into()),
            "test_images" => data.test_images = Some(raw.into()),
            "test_labels" => data.test_labels = Some(raw.into()),
            "metrics_path" => cfg.metrics_path = raw.into(),
            "checkpoint_path" => cfg.checkpoint_path = raw.into(),
            _ => unreachable!("key list and match are out of sync: {key}"),
        }
    }
    cfg.data = build_data(data)?;
    cfg.validate()?;
    Ok(ConfigFile {
        train: cfg,
        explicit,
    })
}

fn build_data(d: DataKeys) -> Result<DataSpec> {
    let idx_keys = [&d.train_images, &d.train_labels, &d.test_images, &d.test_labels];
    match d.kind.as_deref().unwrap_or("stripes") {
        "stripes" => {
            if idx_keys.iter().any(|k| k.is_some()) {
                return Err(Error::Config("IDX paths given with dataset = stripes".into()));
            }
            Ok(DataSpec::Stripes {
                train_samples: d.train_samples.unwrap_or(DEFAULT_SAMPLES),
                test_samples: d.test_samples.unwrap_or(DEFAULT_SAMPLES),
                split: d.split.unwrap_or(StripesSplit::All),
            })
        }
        "idx" => {
            if d.train_samples.is_some() || d.test_samples.is_some() || d.split.is_some() {
                return Err(Error::Config("stripes keys given with dataset = idx".into()));
            }
            let need = |p: Option<PathBuf>, k: &str| {
                p.ok_or_else(|| Error::Config(format!("dataset = idx needs {k}")))
            };
            Ok(DataSpec::Idx {
                train_images: need(d.train_images, "train_images")?,
                train_labels: need(d.train_labels, "train_labels")?,
                test_images: d.test_images,
                test_labels: d.test_labels,
            })
        }
        other => Err(Error::Config(format!(
            "dataset must be stripes or idx, got {other:?}"
        ))),
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<ConfigFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut file = parse(&text)?;
    // IDX paths are relative to the config file
    if let DataSpec::Idx {
        train_images,
        train_labels,
        test_images,
        test_labels,
    } = &mut file.train.data
    {
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [Some(train_images), Some(train_labels), test_images.as_mut(), test_labels.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    Ok(file)
}

/// Every key with its effective value, in [`KEYS`] order.
pub fn effective_values(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let m: &ModelConfig = &cfg.model;
    let mut out: Vec<(&'static str, String)> = vec![
        ("image_h", m.image_h.to_string()),
        ("image_w", m.image_w.to_string()),
        ("channels", m.channels.to_string()),
        ("patch_size", m.patch_size.to_string()),
        ("dim", m.dim.to_string()),
        ("depth", m.depth.to_string()),
        ("mlp_ratio", m.mlp_ratio.to_string()),
        ("num_heads", m.num_heads.to_string()),
        ("num_classes", m.num_classes.to_string()),
        ("block_pattern", m.block_pattern.clone()),
        ("use_pos_embed", m.use_pos_embed.to_string()),
        ("kernel_init", m.kernel_init.to_string()),
        ("view", m.view.as_str().to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("total_steps", cfg.total_steps.to_string()),
        ("seed", cfg.seed.to_string()),
        ("label_smoothing", cfg.label_smoothing.to_string()),
        ("base_lr", cfg.base_lr.to_string()),
        ("min_lr", cfg.min_lr.to_string()),
        (
            "warmup_steps",
            cfg.schedule().map(|s| s.warmup_steps.to_string()).unwrap_or_default(),
        ),
        ("weight_decay", cfg.weight_decay.to_string()),
        ("eval_every", cfg.eval_every.to_string()),
    ];
    match &cfg.data {
        DataSpec::Stripes {
            train_samples,
            test_samples,
            split,
        } => {
            out.push(("dataset", "stripes".into()));
            out.push(("train_samples", train_samples.to_string()));
            out.push(("test_samples", test_samples.to_string()));
            out.push((
                "stripes_split",
                match split {
                    StripesSplit::All => "all",
                    StripesSplit::EvenOdd => "even_odd",
                }
                .into(),
            ));
        }
        DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            out.push(("dataset", "idx".into()));
            out.push(("train_images", train_images.display().to_string()));
            out.push(("train_labels", train_labels.display().to_string()));
            if let (Some(i), Some(l)) = (test_images, test_labels) {
                out.push(("test_images", i.display().to_string()));
                out.push(("test_labels", l.display().to_string()));
            }
        }
    }
    out.push(("metrics_path", cfg.metrics_path.display().to_string()));
    out.push(("checkpoint_path", cfg.checkpoint_path.display().to_string()));
    out
}

/// Config text with defaulted keys marked, as printed at startup.
pub fn render(file: &ConfigFile) -> String {
    effective_values(&file.train)
        .into_iter()
        .map(|(k, v)| {
            if file.explicit.contains(k) {
                format!("{k} = {v}\n")
            } else {
                format!("{k} = {v}  # default\n")
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lkca::{KernelInit, View};

    #[test]
    fn defaults_when_empty() {
        let f = parse("# nothing\n\n").unwrap();
        assert_eq!(f.train, TrainConfig::default());
        assert!(f.explicit.is_empty());
    }

    #[test]
    fn sets_fields() {
        let f = parse(
            "dim = 8\npatch_size=4 # trailing comment\nview = attention\nkernel_init = trunc_normal\n\
             use_pos_embed = false\nstripes_split = even_odd\nwarmup_steps = 3\n",
        )
        .unwrap();
        let t = &f.train;
        assert_eq!(t.model.dim, 8);
        assert_eq!(t.model.patch_size, 4);
        assert_eq!(t.model.view, View::Attention);
        assert_eq!(t.model.kernel_init, KernelInit::TruncNormal);
        assert!(!t.model.use_pos_embed);
        assert_eq!(t.warmup_steps, Some(3));
        assert!(matches!(t.data, DataSpec::Stripes { split: StripesSplit::EvenOdd, .. }));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse("nonsense = 1").is_err());
        assert!(parse("dim = 8\ndim = 8").is_err());
        assert!(parse("dim").is_err());
        assert!(parse("dim = eight").is_err());
        assert!(parse("patch_size = 3").is_err());
        assert!(parse("dataset = idx").is_err());
        assert!(parse("train_images = a.idx").is_err());
    }

    #[test]
    fn render_round_trips() {
        let f = parse("dim = 16\nseed = 9\n").unwrap();
        let text = render(&f);
        assert!(text.contains("dim = 16\n"));
        assert!(text.contains("depth = 2  # default\n"));
        let again = parse(&text).unwrap();
        let mut expect = f.train.clone();
        expect.warmup_steps = Some(expect.schedule().unwrap().warmup_steps);
        assert_eq!(again.train, expect);
    }

    #[test]
    fn every_key_is_rendered() {
        let rendered: Vec<&str> = effective_values(&TrainConfig::default()).iter().map(|(k, _)| *k).collect();
        for k in rendered {
            assert!(KEYS.contains(&k));
        }
    }
}
