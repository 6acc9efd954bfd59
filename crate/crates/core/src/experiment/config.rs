use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::data::{Augmentation, CifarVariant, SampleShape};
use crate::engine::{DflConfig, DistillWeight, ResetMode};
use crate::model::{tiny_cnn, tiny_mlp, vgg16, InitScheme, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar(CifarVariant),
}

/// Generator settings used when `dataset = synthetic`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticParams {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub classes: usize,
    pub shape: SampleShape,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            train_per_class: 200,
            test_per_class: 100,
            classes: 3,
            shape: SampleShape::Image {
                channels: 3,
                height: 16,
                width: 16,
            },
            spread: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arch {
    TinyCnn,
    TinyMlp { hidden: usize },
    Vgg16,
    Layers(Vec<LayerSpec>),
}

impl Arch {
    /// Layer list for per-sample `input` shape and `classes` outputs.
    pub fn specs(&self, input: &[usize], classes: usize) -> Result<Vec<LayerSpec>, ExperimentError> {
        let image = |name: &str| match input {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(ExperimentError::Invalid(format!(
                "{name} needs image input, got sample shape {input:?}"
            ))),
        };
        Ok(match self {
            Arch::TinyCnn => {
                let (c, h, w) = image("tiny_cnn")?;
                tiny_cnn(c, h, w, classes)
            }
            Arch::Vgg16 => {
                let (c, h, w) = image("vgg16")?;
                vgg16(c, h, w, classes)
            }
            Arch::TinyMlp { hidden } => {
                let inputs = input.iter().product();
                let mut specs = tiny_mlp(inputs, *hidden, classes);
                if input.len() > 1 {
                    specs.insert(0, LayerSpec::Flatten);
                }
                specs
            }
            Arch::Layers(specs) => specs.clone(),
        })
    }

    /// Column label used in grid summaries.
    pub fn label(&self) -> String {
        match self {
            Arch::TinyCnn => "tiny_cnn".into(),
            Arch::TinyMlp { .. } => "tiny_mlp".into(),
            Arch::Vgg16 => "vgg16".into(),
            Arch::Layers(_) => "model".into(),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::TinyCnn => f.write_str("tiny_cnn"),
            Arch::Vgg16 => f.write_str("vgg16"),
            Arch::TinyMlp { hidden } => write!(f, "tiny_mlp:{hidden}"),
            Arch::Layers(specs) => {
                let parts: Vec<String> = specs.iter().map(ToString::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny_cnn" => return Ok(Arch::TinyCnn),
            "vgg16" => return Ok(Arch::Vgg16),
            _ => {}
        }
        if let Some(h) = s.strip_prefix("tiny_mlp:") {
            let hidden = h.parse().map_err(|_| format!("bad hidden width {h:?}"))?;
            return Ok(Arch::TinyMlp { hidden });
        }
        let specs = s
            .split(',')
            .map(|p| p.trim().parse::<LayerSpec>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| format!("not a preset (tiny_cnn, tiny_mlp:H, vgg16) or layer list: {e}"))?;
        Ok(Arch::Layers(specs))
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    /// Dataset root; when absent the `DFL_DATA_DIR` variable or `./data` is used.
    pub data_dir: Option<PathBuf>,
    pub synthetic: SyntheticParams,
    pub arch: Arch,
    pub init: InitScheme,
    pub dfl: DflConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augmentation: Augmentation,
    pub normalize: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Cifar(CifarVariant::Cifar100),
            data_dir: None,
            synthetic: SyntheticParams::default(),
            arch: Arch::Vgg16,
            init: InitScheme::KaimingUniform,
            dfl: DflConfig::default(),
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 2e-4,
            milestones: vec![60, 120, 160],
            gamma: 0.2,
            warmup_epochs: 1,
            epochs: 200,
            batch_size: 128,
            seed: 0,
            augmentation: Augmentation::standard(),
            normalize: true,
            out: PathBuf::from("runs"),
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ExperimentError> {
    value.parse().map_err(|_| ExperimentError::Config {
        line,
        message: format!("cannot parse {value:?} as a value for {key}"),
    })
}

fn parse_with<T>(
    line: usize,
    key: &str,
    value: &str,
    f: impl FnOnce(&str) -> Result<T, String>,
) -> Result<T, ExperimentError> {
    f(value).map_err(|e| ExperimentError::Config {
        line,
        message: format!("{key}: {e}"),
    })
}

fn parse_shape(s: &str) -> Result<SampleShape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| d.parse().map_err(|_| format!("bad dimension {d:?}")))
        .collect::<Result<_, _>>()?;
    match dims[..] {
        [d] => Ok(SampleShape::Vector(d)),
        [channels, height, width] => Ok(SampleShape::Image {
            channels,
            height,
            width,
        }),
        _ => Err(format!("shape {s:?} must be D or CxHxW")),
    }
}

fn render_shape(s: SampleShape) -> String {
    match s {
        SampleShape::Vector(d) => d.to_string(),
        SampleShape::Image {
            channels,
            height,
            width,
        } => format!("{channels}x{height}x{width}"),
    }
}

fn parse_augment(s: &str) -> Result<Augmentation, String> {
    let mut aug = Augmentation::default();
    if s == "none" {
        return Ok(aug);
    }
    for part in s.split(',') {
        match part.trim() {
            "crop" => aug.crop_pad4 = true,
            "flip" => aug.hflip = true,
            other => return Err(format!("unknown augmentation {other:?} (crop, flip or none)")),
        }
    }
    Ok(aug)
}

fn render_augment(a: Augmentation) -> String {
    match (a.crop_pad4, a.hflip) {
        (true, true) => "crop,flip".into(),
        (true, false) => "crop".into(),
        (false, true) => "flip".into(),
        (false, false) => "none".into(),
    }
}

fn parse_init(s: &str) -> Result<InitScheme, String> {
    if s == "kaiming" {
        return Ok(InitScheme::KaimingUniform);
    }
    let a = s
        .strip_prefix("uniform:")
        .ok_or_else(|| format!("unknown init {s:?} (kaiming or uniform:A)"))?;
    let a: f64 = a.parse().map_err(|_| format!("bad uniform bound {a:?}"))?;
    Ok(InitScheme::Uniform(a))
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    match s {
        "synthetic" => Ok(DatasetKind::Synthetic),
        "cifar10" => Ok(DatasetKind::Cifar(CifarVariant::Cifar10)),
        "cifar100" => Ok(DatasetKind::Cifar(CifarVariant::Cifar100)),
        _ => Err(format!("unknown dataset {s:?} (synthetic, cifar10 or cifar100)")),
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad list entry {p:?}")))
        .collect()
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    /// `T` (or `T_cycle`) sets both cycle lengths; `T_update` and `T_reset`
    /// override it independently of line order.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ExperimentError::Config {
                line,
                message: format!("expected key = value, found {content:?}"),
            })?;
            let key = key.trim();
            let key = if key == "T_cycle" { "T" } else { key };
            if let Some((first, _)) =
                entries.insert(key.to_string(), (line, value.trim().to_string()))
            {
                return Err(ExperimentError::Config {
                    line,
                    message: format!("{key} already set on line {first}"),
                });
            }
        }
        let mut cfg = RunConfig::default();
        if let Some((line, v)) = entries.remove("T") {
            let t = parse(line, "T", &v)?;
            cfg.dfl.update_every = t;
            cfg.dfl.reset_every = t;
        }
        for (key, (line, v)) in entries {
            let v = v.as_str();
            match key.as_str() {
                "dataset" => cfg.dataset = parse_with(line, &key, v, parse_dataset)?,
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "synthetic_train_per_class" => cfg.synthetic.train_per_class = parse(line, &key, v)?,
                "synthetic_test_per_class" => cfg.synthetic.test_per_class = parse(line, &key, v)?,
                "synthetic_classes" => cfg.synthetic.classes = parse(line, &key, v)?,
                "synthetic_shape" => cfg.synthetic.shape = parse_with(line, &key, v, parse_shape)?,
                "synthetic_spread" => cfg.synthetic.spread = parse(line, &key, v)?,
                "synthetic_seed" => cfg.synthetic.seed = parse(line, &key, v)?,
                "arch" => cfg.arch = parse_with(line, &key, v, Arch::from_str)?,
                "init" => cfg.init = parse_with(line, &key, v, parse_init)?,
                "K" => cfg.dfl.teachers = parse(line, &key, v)?,
                "T_update" => cfg.dfl.update_every = parse(line, &key, v)?,
                "T_reset" => cfg.dfl.reset_every = parse(line, &key, v)?,
                "L" => cfg.dfl.head_len = parse(line, &key, v)?,
                "M" => cfg.dfl.reset = parse_with(line, &key, v, ResetMode::from_str)?,
                "distill_weight" => {
                    cfg.dfl.distill_weight = parse_with(line, &key, v, DistillWeight::from_str)?
                }
                "lr" => cfg.lr = parse(line, &key, v)?,
                "momentum" => cfg.momentum = parse(line, &key, v)?,
                "weight_decay" => cfg.weight_decay = parse(line, &key, v)?,
                "milestones" => cfg.milestones = parse_with(line, &key, v, parse_list)?,
                "gamma" => cfg.gamma = parse(line, &key, v)?,
                "warmup" => cfg.warmup_epochs = parse(line, &key, v)?,
                "epochs" => cfg.epochs = parse(line, &key, v)?,
                "batch_size" => cfg.batch_size = parse(line, &key, v)?,
                "seed" => cfg.seed = parse(line, &key, v)?,
                "augment" => cfg.augmentation = parse_with(line, &key, v, parse_augment)?,
                "normalize" => cfg.normalize = parse(line, &key, v)?,
                "out" => cfg.out = PathBuf::from(v),
                _ => {
                    return Err(ExperimentError::Config {
                        line,
                        message: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    /// Every field as `key = value` text that [`RunConfig::parse`] reads back
    /// to an equal value.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let dataset = match self.dataset {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar(CifarVariant::Cifar10) => "cifar10",
            DatasetKind::Cifar(CifarVariant::Cifar100) => "cifar100",
        };
        let init = match self.init {
            InitScheme::KaimingUniform => "kaiming".to_string(),
            InitScheme::Uniform(a) => format!("uniform:{a}"),
        };
        let milestones: Vec<String> = self.milestones.iter().map(ToString::to_string).collect();
        let mut e = vec![("dataset", dataset.to_string())];
        if let Some(dir) = &self.data_dir {
            e.push(("data_dir", dir.display().to_string()));
        }
        let syn = &self.synthetic;
        e.extend([
            ("synthetic_train_per_class", syn.train_per_class.to_string()),
            ("synthetic_test_per_class", syn.test_per_class.to_string()),
            ("synthetic_classes", syn.classes.to_string()),
            ("synthetic_shape", render_shape(syn.shape)),
            ("synthetic_spread", syn.spread.to_string()),
            ("synthetic_seed", syn.seed.to_string()),
            ("arch", self.arch.to_string()),
            ("init", init),
            ("K", self.dfl.teachers.to_string()),
            ("T_update", self.dfl.update_every.to_string()),
            ("T_reset", self.dfl.reset_every.to_string()),
            ("L", self.dfl.head_len.to_string()),
            ("M", self.dfl.reset.to_string()),
            ("distill_weight", self.dfl.distill_weight.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("milestones", milestones.join(",")),
            ("gamma", self.gamma.to_string()),
            ("warmup", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", render_augment(self.augmentation)),
            ("normalize", self.normalize.to_string()),
            ("out", self.out.display().to_string()),
        ]);
        e
    }

    /// Hex digest of every setting that affects results; the output and
    /// data locations are excluded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "out" && k != "data_dir" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks settings that do not depend on the dataset.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.dfl.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ExperimentError::Invalid(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_default_settings() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.dfl.teachers, 4);
        assert_eq!((c.dfl.update_every, c.dfl.reset_every), (100, 100));
        assert_eq!(c.dfl.head_len, 3);
        assert_eq!(c.dfl.reset, ResetMode::Mean);
        assert_eq!((c.lr, c.batch_size, c.epochs), (0.1, 128, 200));
        assert_eq!((c.momentum, c.weight_decay, c.gamma), (0.9, 2e-4, 0.2));
        assert_eq!(c.milestones, vec![60, 120, 160]);
    }

    #[test]
    fn single_override() {
        let c = RunConfig::parse("# sweep\nK=8\n").unwrap();
        let mut d = RunConfig::default();
        d.dfl.teachers = 8;
        assert_eq!(c, d);
    }

    #[test]
    fn errors_carry_line_numbers() {
        for (text, line) in [("K=banana", 1), ("\nlr = 0.1\nwidth = 3", 3), ("K=1\nK=2", 2), ("\n\nnonsense", 3)] {
            match RunConfig::parse(text) {
                Err(ExperimentError::Config { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn cycle_shorthand_and_overrides() {
        let c = RunConfig::parse("T_reset = 7\nT = 3").unwrap();
        assert_eq!((c.dfl.update_every, c.dfl.reset_every), (3, 7));
    }

    #[test]
    fn render_round_trips() {
        let text = "dataset = synthetic\nsynthetic_shape = 5\narch = dense:5:8,relu,dense:8:3\n\
                    L = 1\nM = random\ninit = uniform:0.25\naugment = flip\nlr = 0.037\n\
                    milestones =\ndata_dir = /tmp/x\ndistill_weight = sum\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(RunConfig::parse(&c.render()).unwrap(), c);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.render()).unwrap(), d);
    }

    #[test]
    fn fingerprint_ignores_locations_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.data_dir = Some("/data".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn mlp_flattens_images() {
        let specs = Arch::TinyMlp { hidden: 8 }.specs(&[3, 4, 4], 2).unwrap();
        assert_eq!(specs[0], LayerSpec::Flatten);
        assert_eq!(specs[1], LayerSpec::dense(48, 8));
        assert!(Arch::TinyCnn.specs(&[6], 2).is_err());
    }
}
