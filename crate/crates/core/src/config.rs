//! Run configuration: a flat `key = value` text format with the section
//! headers `[data] [diffusion] [ddpo] [translator] [ablation]`, strict
//! schema validation, repeatable `section.key=value` overrides, and a
//! content hash that keys every run directory.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {0}: expected `key = value` or `[section]`")]
    BadLine(usize),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {0}.{1}")]
    UnknownKey(String, String),
    #[error("key {0}.{1}: cannot parse {2:?} as {3}")]
    BadValue(String, String, String, &'static str),
    #[error("override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seed: u64,
    pub out_dir: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub ambiguous_fraction: f64,
    pub lexicon: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: usize,
    pub ctx_dim: usize,
    pub time_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub val_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DdpoConfig {
    pub steps: usize,
    pub contexts_per_step: usize,
    pub samples_per_context: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub noise_scale: f64,
    pub dump_trajectories: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub visual_len: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub capture_batches: usize,
    pub update_denoiser: bool,
    pub denoiser_learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub use_diffusion: bool,
    pub use_real_scenes: bool,
    pub use_scene_encoder: bool,
}

/// How stage 3 and evaluation obtain a scene for each example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SceneSource {
    /// Sampled from the tuned diffusion model conditioned on the source.
    Generated,
    /// The oracle encoding of the example's real scene.
    Oracle,
    /// No visual prefix at all.
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub diffusion: DiffusionConfig,
    pub ddpo: DdpoConfig,
    pub translator: TranslatorConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig {
                seed: 42,
                out_dir: "runs".into(),
                n_train: 10_000,
                n_dev: 400,
                n_test: 1_000,
                ambiguous_fraction: 0.5,
                lexicon: "strict".into(),
            },
            diffusion: DiffusionConfig {
                timesteps: 50,
                beta_start: 1e-4,
                beta_end: 0.1,
                hidden: 128,
                ctx_dim: 32,
                time_dim: 16,
                batch_size: 64,
                learning_rate: 1e-3,
                max_epochs: 60,
                val_fraction: 0.1,
            },
            ddpo: DdpoConfig {
                steps: 200,
                contexts_per_step: 16,
                samples_per_context: 2,
                learning_rate: 1e-5,
                clip_norm: 1.0,
                noise_scale: 1.0,
                dump_trajectories: false,
            },
            translator: TranslatorConfig {
                d_model: 64,
                blocks: 2,
                heads: 4,
                ff_dim: 256,
                visual_len: 4,
                max_len: 48,
                batch_size: 32,
                learning_rate: 1e-3,
                epochs: 3,
                checkpoint_every: 100,
                capture_batches: 50,
                update_denoiser: true,
                denoiser_learning_rate: 1e-5,
            },
            ablation: AblationConfig {
                use_diffusion: true,
                use_real_scenes: false,
                use_scene_encoder: true,
            },
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or(ConfigError::BadLine(lineno + 1))?;
                if !SECTIONS.contains(&name) {
                    return Err(ConfigError::UnknownSection(name.to_string()));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine(lineno + 1))?;
            if section.is_empty() {
                return Err(ConfigError::BadLine(lineno + 1));
            }
            config.set(&section, key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Apply `section.key=value` overrides. Unknown keys are rejected
    /// before any work starts.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (path, value) = o
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            let (section, key) = path
                .trim()
                .split_once('.')
                .ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
            self.set(section, key, value.trim())?;
        }
        self.validate()
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let bad = |ty: &'static str| {
            ConfigError::BadValue(section.to_string(), key.to_string(), value.to_string(), ty)
        };
        macro_rules! parse {
            ($ty:literal) => {
                value.parse().map_err(|_| bad($ty))?
            };
        }
        match (section, key) {
            ("data", "seed") => self.data.seed = parse!("u64"),
            ("data", "out_dir") => self.data.out_dir = value.to_string(),
            ("data", "n_train") => self.data.n_train = parse!("usize"),
            ("data", "n_dev") => self.data.n_dev = parse!("usize"),
            ("data", "n_test") => self.data.n_test = parse!("usize"),
            ("data", "ambiguous_fraction") => self.data.ambiguous_fraction = parse!("f64"),
            ("data", "lexicon") => self.data.lexicon = value.to_string(),
            ("diffusion", "timesteps") => self.diffusion.timesteps = parse!("usize"),
            ("diffusion", "beta_start") => self.diffusion.beta_start = parse!("f64"),
            ("diffusion", "beta_end") => self.diffusion.beta_end = parse!("f64"),
            ("diffusion", "hidden") => self.diffusion.hidden = parse!("usize"),
            ("diffusion", "ctx_dim") => self.diffusion.ctx_dim = parse!("usize"),
            ("diffusion", "time_dim") => self.diffusion.time_dim = parse!("usize"),
            ("diffusion", "batch_size") => self.diffusion.batch_size = parse!("usize"),
            ("diffusion", "learning_rate") => self.diffusion.learning_rate = parse!("f64"),
            ("diffusion", "max_epochs") => self.diffusion.max_epochs = parse!("usize"),
            ("diffusion", "val_fraction") => self.diffusion.val_fraction = parse!("f64"),
            ("ddpo", "steps") => self.ddpo.steps = parse!("usize"),
            ("ddpo", "contexts_per_step") => self.ddpo.contexts_per_step = parse!("usize"),
            ("ddpo", "samples_per_context") => self.ddpo.samples_per_context = parse!("usize"),
            ("ddpo", "learning_rate") => self.ddpo.learning_rate = parse!("f64"),
            ("ddpo", "clip_norm") => self.ddpo.clip_norm = parse!("f64"),
            ("ddpo", "noise_scale") => self.ddpo.noise_scale = parse!("f64"),
            ("ddpo", "dump_trajectories") => self.ddpo.dump_trajectories = parse!("bool"),
            ("translator", "d_model") => self.translator.d_model = parse!("usize"),
            ("translator", "blocks") => self.translator.blocks = parse!("usize"),
            ("translator", "heads") => self.translator.heads = parse!("usize"),
            ("translator", "ff_dim") => self.translator.ff_dim = parse!("usize"),
            ("translator", "visual_len") => self.translator.visual_len = parse!("usize"),
            ("translator", "max_len") => self.translator.max_len = parse!("usize"),
            ("translator", "batch_size") => self.translator.batch_size = parse!("usize"),
            ("translator", "learning_rate") => self.translator.learning_rate = parse!("f64"),
            ("translator", "epochs") => self.translator.epochs = parse!("usize"),
            ("translator", "checkpoint_every") => {
                self.translator.checkpoint_every = parse!("usize")
            }
            ("translator", "capture_batches") => self.translator.capture_batches = parse!("usize"),
            ("translator", "update_denoiser") => self.translator.update_denoiser = parse!("bool"),
            ("translator", "denoiser_learning_rate") => {
                self.translator.denoiser_learning_rate = parse!("f64")
            }
            ("ablation", "use_diffusion") => self.ablation.use_diffusion = parse!("bool"),
            ("ablation", "use_real_scenes") => self.ablation.use_real_scenes = parse!("bool"),
            ("ablation", "use_scene_encoder") => self.ablation.use_scene_encoder = parse!("bool"),
            _ => {
                if SECTIONS.contains(&section) {
                    return Err(ConfigError::UnknownKey(
                        section.to_string(),
                        key.to_string(),
                    ));
                }
                return Err(ConfigError::UnknownSection(section.to_string()));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.ablation.use_diffusion && self.ablation.use_real_scenes {
            return fail("use_diffusion and use_real_scenes are mutually exclusive".into());
        }
        if !(0.0..=1.0).contains(&self.data.ambiguous_fraction) {
            return fail("ambiguous_fraction must be in [0, 1]".into());
        }
        if self.data.n_train == 0 || self.data.n_dev == 0 || self.data.n_test == 0 {
            return fail("dataset sizes must be positive".into());
        }
        if self.diffusion.timesteps < 2 {
            return fail("diffusion.timesteps must be at least 2".into());
        }
        if !(self.diffusion.beta_start > 0.0
            && self.diffusion.beta_start <= self.diffusion.beta_end
            && self.diffusion.beta_end < 1.0)
        {
            return fail("diffusion betas must satisfy 0 < start <= end < 1".into());
        }
        if !(0.0..0.9).contains(&self.diffusion.val_fraction) {
            return fail("diffusion.val_fraction must be in [0, 0.9)".into());
        }
        if !(0.0..=1.0).contains(&self.ddpo.noise_scale) {
            return fail("ddpo.noise_scale must be in [0, 1]".into());
        }
        if self.translator.d_model % self.translator.heads != 0 {
            return fail("translator.heads must divide translator.d_model".into());
        }
        for (name, v) in [
            ("diffusion.learning_rate", self.diffusion.learning_rate),
            ("ddpo.learning_rate", self.ddpo.learning_rate),
            ("ddpo.clip_norm", self.ddpo.clip_norm),
            ("translator.learning_rate", self.translator.learning_rate),
            (
                "translator.denoiser_learning_rate",
                self.translator.denoiser_learning_rate,
            ),
        ] {
            if v <= 0.0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.translator.checkpoint_every == 0 || self.translator.capture_batches == 0 {
            return fail("translator.checkpoint_every and capture_batches must be positive".into());
        }
        Ok(())
    }

    /// The scene source stage 3 and evaluation run with.
    pub fn scene_source(&self) -> SceneSource {
        if self.ablation.use_diffusion {
            SceneSource::Generated
        } else if self.ablation.use_real_scenes {
            SceneSource::Oracle
        } else {
            SceneSource::None
        }
    }

    /// Canonical text: fixed section and key order, one `key = value` per
    /// line. Parsing it back yields an equal config.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let d = &self.data;
        let _ = write!(
            s,
            "[data]\nseed = {}\nout_dir = {}\nn_train = {}\nn_dev = {}\nn_test = {}\nambiguous_fraction = {}\nlexicon = {}\n",
            d.seed, d.out_dir, d.n_train, d.n_dev, d.n_test, d.ambiguous_fraction, d.lexicon
        );
        let f = &self.diffusion;
        let _ = write!(
            s,
            "[diffusion]\ntimesteps = {}\nbeta_start = {}\nbeta_end = {}\nhidden = {}\nctx_dim = {}\ntime_dim = {}\nbatch_size = {}\nlearning_rate = {}\nmax_epochs = {}\nval_fraction = {}\n",
            f.timesteps, f.beta_start, f.beta_end, f.hidden, f.ctx_dim, f.time_dim, f.batch_size,
            f.learning_rate, f.max_epochs, f.val_fraction
        );
        let p = &self.ddpo;
        let _ = write!(
            s,
            "[ddpo]\nsteps = {}\ncontexts_per_step = {}\nsamples_per_context = {}\nlearning_rate = {}\nclip_norm = {}\nnoise_scale = {}\ndump_trajectories = {}\n",
            p.steps, p.contexts_per_step, p.samples_per_context, p.learning_rate, p.clip_norm,
            p.noise_scale, p.dump_trajectories
        );
        let t = &self.translator;
        let _ = write!(
            s,
            "[translator]\nd_model = {}\nblocks = {}\nheads = {}\nff_dim = {}\nvisual_len = {}\nmax_len = {}\nbatch_size = {}\nlearning_rate = {}\nepochs = {}\ncheckpoint_every = {}\ncapture_batches = {}\nupdate_denoiser = {}\ndenoiser_learning_rate = {}\n",
            t.d_model, t.blocks, t.heads, t.ff_dim, t.visual_len, t.max_len, t.batch_size,
            t.learning_rate, t.epochs, t.checkpoint_every, t.capture_batches, t.update_denoiser,
            t.denoiser_learning_rate
        );
        let a = &self.ablation;
        let _ = write!(
            s,
            "[ablation]\nuse_diffusion = {}\nuse_real_scenes = {}\nuse_scene_encoder = {}\n",
            a.use_diffusion, a.use_real_scenes, a.use_scene_encoder
        );
        s
    }

    /// First 12 hex chars of the sha256 of the canonical text with the
    /// storage location (`data.out_dir`) excluded, so the hash keys the
    /// experiment rather than where it is written.
    pub fn hash(&self) -> String {
        let canonical = self.canonical();
        let filtered: String = canonical
            .lines()
            .filter(|l| !l.starts_with("out_dir = "))
            .map(|l| format!("{l}\n"))
            .collect();
        let digest = Sha256::digest(filtered.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Every artifact of a run lives below this directory.
    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.data.out_dir).join(self.hash())
    }
}

const SECTIONS: [&str; 5] = ["data", "diffusion", "ddpo", "translator", "ablation"];

/// Artifact paths inside a run directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn of(config: &RunConfig) -> Self {
        RunPaths {
            root: config.run_dir(),
        }
    }

    pub fn config_file(&self) -> PathBuf {
        self.root.join("config.resolved.cfg")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.txt")
    }

    pub fn train_data(&self) -> PathBuf {
        self.root.join("data/train.jsonl")
    }

    pub fn dev_data(&self) -> PathBuf {
        self.root.join("data/dev.jsonl")
    }

    pub fn test_data(&self) -> PathBuf {
        self.root.join("data/test.jsonl")
    }

    pub fn vocab_file(&self) -> PathBuf {
        self.root.join("data/vocab.txt")
    }

    pub fn denoiser_pretrained(&self) -> PathBuf {
        self.root.join("diffusion/denoiser_pretrained.bin")
    }

    pub fn diffusion_loss_curve(&self) -> PathBuf {
        self.root.join("diffusion/loss_curve.csv")
    }

    pub fn denoiser_tuned(&self) -> PathBuf {
        self.root.join("ddpo/denoiser_tuned.bin")
    }

    pub fn rl_log(&self) -> PathBuf {
        self.root.join("ddpo/rl_log.csv")
    }

    pub fn trajectory_dump(&self) -> PathBuf {
        self.root.join("ddpo/trajectories.jsonl")
    }

    pub fn model_final(&self) -> PathBuf {
        self.root.join("translator/model_final.bin")
    }

    pub fn stage3_checkpoint(&self, index: usize) -> PathBuf {
        self.root.join(format!("translator/ck_{index:04}.bin"))
    }

    pub fn stage3_log(&self) -> PathBuf {
        self.root.join("translator/train_log.csv")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("eval/report.csv")
    }

    pub fn curve(&self) -> PathBuf {
        self.root.join("eval/curve.csv")
    }

    pub fn ablation_table(&self) -> PathBuf {
        self.root.join("eval/ablation.csv")
    }
}
