//! Ordered training: stage 1 pretrains the denoiser with the DDPM
//! objective, stage 2 fine-tunes it against the scene-graph reward with
//! REINFORCE, stage 3 trains the translator under the constant-normalized
//! joint loss, optionally propagating the reward term into the denoiser.
//!
//! Every artifact lives under the run directory keyed by the config hash;
//! the manifest records the hash, the captured loss constants and the
//! checksums of stage outputs.

use crate::config::{ConfigError, RunConfig, RunPaths, SceneSource};
use crate::ddpo::{
    collect_rollouts, ddpo_step, reinforce_gradient, BaselineState, Context, DdpoError,
    RewardOutcome, RolloutBatch, RolloutEntry,
};
use crate::diffusion::{
    build_schedule, ddpm_loss, ddpm_loss_value, sample_trajectory, Denoiser, DenoiserConfig,
    DiffusionError, NoiseSchedule,
};
use crate::eval::{
    build_report, clip_score_analog, write_curve_csv, CurvePoint, EvalError, EvalReport,
    ExampleEval,
};
use crate::reward::{reward, RewardError, SymbolLexicon};
use crate::streams;
use crate::tensor::{
    clip_gradients, load_named_tensors, save_named_tensors, Adam, Record, Tensor, TensorError,
};
use crate::translator::{
    greedy_decode, mllm_loss, prepare_example, DecoderModel, ModelConfig, PreparedExample,
    ProjectorConfig, TranslatorError, VisualProjector, Vocabulary,
};
use crate::world::{
    decode_scene, encode_scene, extract_vsg, parse_lsg, SceneVector, Split, TranslationExample,
    WorldError,
};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Ddpo(#[from] DdpoError),
    #[error(transparent)]
    Translator(#[from] TranslatorError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing checkpoint: {0} (run the earlier stage first)")]
    MissingArtifact(String),
    #[error("stage {0} diverged (non-finite loss); last good checkpoint retained")]
    Diverged(&'static str),
    #[error("{0}")]
    Invalid(String),
}

impl TrainError {
    /// Errors the CLI maps to exit code 1 (validation) rather than 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TrainError::Config(_) | TrainError::MissingArtifact(_) | TrainError::Invalid(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Resolve the reward lexicon named by the config: `strict`, `soft`, or a
/// path to a lexicon table file.
pub fn load_lexicon(config: &RunConfig) -> Result<SymbolLexicon> {
    if let Some(lex) = SymbolLexicon::by_name(&config.data.lexicon) {
        return Ok(lex);
    }
    Ok(SymbolLexicon::from_file(Path::new(&config.data.lexicon))?)
}

pub fn schedule_of(config: &RunConfig) -> Result<NoiseSchedule> {
    Ok(build_schedule(
        config.diffusion.timesteps,
        config.diffusion.beta_start,
        config.diffusion.beta_end,
    )?)
}

fn denoiser_config(config: &RunConfig, vocab: &Vocabulary) -> DenoiserConfig {
    DenoiserConfig {
        state_dim: crate::world::SCENE_DIM,
        ctx_dim: config.diffusion.ctx_dim,
        hidden: config.diffusion.hidden,
        time_dim: config.diffusion.time_dim,
        vocab: vocab.len(),
    }
}

fn model_config(config: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        d_model: config.translator.d_model,
        blocks: config.translator.blocks,
        heads: config.translator.heads,
        ff_dim: config.translator.ff_dim,
        max_len: config.translator.max_len,
        vocab: vocab.len(),
    }
}

fn projector_config(config: &RunConfig) -> ProjectorConfig {
    let mut cfg = ProjectorConfig::standard(
        config.translator.d_model,
        config.translator.visual_len,
        config.ablation.use_scene_encoder,
    );
    // keep the encoder no wider than the model it feeds
    cfg.enc_hidden = cfg.enc_hidden.min(config.translator.d_model.max(8));
    cfg.enc_out = cfg.enc_out.min(config.translator.d_model.max(8));
    cfg
}

// ---------------------------------------------------------------------
// manifest

fn file_checksum(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn update_manifest(paths: &RunPaths, entries: &[(String, String)]) -> Result<()> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    if let Ok(text) = std::fs::read_to_string(paths.manifest()) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                map.insert(k.to_string(), v.to_string());
            }
        }
    }
    for (k, v) in entries {
        map.insert(k.clone(), v.clone());
    }
    let mut out = String::new();
    for (k, v) in &map {
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::create_dir_all(&paths.root)?;
    std::fs::write(paths.manifest(), out)?;
    Ok(())
}

// ---------------------------------------------------------------------
// data stage

/// Generate the train/dev/test JSONL files, the vocabulary file and the
/// resolved config inside the run directory. Re-running with the same
/// config produces byte-identical files.
pub fn ensure_data(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::of(config);
    std::fs::create_dir_all(&paths.root)?;
    std::fs::write(paths.config_file(), config.canonical())?;
    let mut rng = streams::named(config.data.seed, "data");
    crate::world::emit_dataset(
        &mut rng,
        config.data.n_train,
        config.data.ambiguous_fraction,
        &paths.train_data(),
    )?;
    crate::world::emit_dataset(
        &mut rng,
        config.data.n_dev,
        config.data.ambiguous_fraction,
        &paths.dev_data(),
    )?;
    crate::world::emit_dataset(
        &mut rng,
        config.data.n_test,
        config.data.ambiguous_fraction,
        &paths.test_data(),
    )?;
    Vocabulary::shared().save(&paths.vocab_file())?;
    update_manifest(
        &paths,
        &[
            ("config_hash".to_string(), config.hash()),
            (
                "checksum.data.train".to_string(),
                file_checksum(&paths.train_data())?,
            ),
            (
                "checksum.data.dev".to_string(),
                file_checksum(&paths.dev_data())?,
            ),
            (
                "checksum.data.test".to_string(),
                file_checksum(&paths.test_data())?,
            ),
        ],
    )?;
    Ok(())
}

fn load_split(path: &Path) -> Result<Vec<TranslationExample>> {
    if !path.exists() {
        return Err(TrainError::MissingArtifact(path.display().to_string()));
    }
    Ok(crate::world::load_dataset(path)?)
}

// ---------------------------------------------------------------------
// stage 1: DDPM pretraining

struct DiffusionData {
    /// (encoded scene, source ids) for every normal-split example.
    train: Vec<(SceneVector, Vec<usize>)>,
    val: Vec<(SceneVector, Vec<usize>)>,
}

fn diffusion_data(config: &RunConfig, vocab: &Vocabulary) -> Result<DiffusionData> {
    let paths = RunPaths::of(config);
    let examples = load_split(&paths.train_data())?;
    let mut rows = Vec::new();
    for ex in &examples {
        if ex.split == Split::Normal {
            rows.push((encode_scene(&ex.scene), vocab.ids(&ex.source)?));
        }
    }
    let n_val = ((rows.len() as f64) * config.diffusion.val_fraction).floor() as usize;
    let split = rows.len() - n_val.max(1).min(rows.len().saturating_sub(1));
    let val = rows.split_off(split);
    Ok(DiffusionData { train: rows, val })
}

fn batch_refs<'a>(rows: &'a [(SceneVector, Vec<usize>)], idx: &[usize]) -> Vec<(&'a [f64], &'a [usize])> {
    idx.iter()
        .map(|&i| (rows[i].0.as_slice(), rows[i].1.as_slice()))
        .collect()
}

/// Train the denoiser to the convergence criterion (validation loss
/// improvement below 1% across 3 epochs) or `max_epochs`. A non-finite
/// loss aborts the stage with the last finite-epoch checkpoint retained.
pub fn pretrain_diffusion(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::of(config);
    let vocab = Vocabulary::shared();
    let data = diffusion_data(config, &vocab)?;
    let sched = schedule_of(config)?;
    let mut rng = streams::named(config.data.seed, "diffusion");
    let mut denoiser = Denoiser::init(denoiser_config(config, &vocab), &mut rng);
    let mut opt = Adam::new(config.diffusion.learning_rate);
    let val_rng_template = streams::named(config.data.seed, "diffusion/val");

    let mut curve = String::from("epoch,train_loss,val_loss\n");
    let mut val_history: Vec<f64> = Vec::new();
    let mut last_good: Option<Denoiser> = None;
    let mut diverged = false;

    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    'epochs: for epoch in 0..config.diffusion.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.diffusion.batch_size) {
            let batch = batch_refs(&data.train, chunk);
            let mut rec = Record::new();
            let bind = denoiser.bind(&mut rec);
            let loss = ddpm_loss(&mut rec, &bind, &denoiser, &batch, &sched, &mut rng)?;
            if !loss.item().is_finite() {
                diverged = true;
                break 'epochs;
            }
            epoch_loss += loss.item();
            batches += 1;
            let grads = rec.backward(&loss)?;
            let named = bind.grads(&grads);
            opt.step(&mut denoiser.params, &named);
        }
        let train_loss = epoch_loss / batches as f64;
        let mut val_rng = val_rng_template.clone();
        let val_batch = batch_refs(&data.val, &(0..data.val.len()).collect::<Vec<_>>());
        let val_loss = ddpm_loss_value(&denoiser, &val_batch, &sched, &mut val_rng)?;
        if !val_loss.is_finite() {
            diverged = true;
            break 'epochs;
        }
        curve.push_str(&format!("{epoch},{train_loss:.6},{val_loss:.6}\n"));
        val_history.push(val_loss);
        last_good = Some(denoiser.clone());
        // converged when the loss three epochs ago improved by less than 1%
        let e = val_history.len();
        if e >= 4 && val_history[e - 1] > 0.99 * val_history[e - 4] {
            break;
        }
    }

    let final_model = match (&last_good, diverged) {
        (Some(model), _) => model,
        (None, _) => &denoiser,
    };
    final_model.save(&paths.denoiser_pretrained())?;
    std::fs::write(paths.diffusion_loss_curve(), curve)?;
    update_manifest(
        &paths,
        &[(
            "checksum.diffusion.denoiser_pretrained".to_string(),
            file_checksum(&paths.denoiser_pretrained())?,
        )],
    )?;
    if diverged {
        return Err(TrainError::Diverged("diffusion"));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// stage 2: DDPO fine-tuning

fn load_denoiser(config: &RunConfig, vocab: &Vocabulary, path: &Path) -> Result<Denoiser> {
    if !path.exists() {
        return Err(TrainError::MissingArtifact(path.display().to_string()));
    }
    // construct with throwaway init then overwrite from the checkpoint
    let mut rng = streams::named(0, "denoiser/shape");
    let mut denoiser = Denoiser::init(denoiser_config(config, vocab), &mut rng);
    denoiser.load_into(path)?;
    Ok(denoiser)
}

fn contexts_of(examples: &[TranslationExample], vocab: &Vocabulary) -> Result<Vec<Context>> {
    examples
        .iter()
        .map(|ex| {
            let ids = vocab.ids(&ex.source)?;
            let lsg = parse_lsg(&ex.source)?;
            Ok(Context::new(ids, lsg))
        })
        .collect()
}

/// Decode the sampled scene vector, extract its graph, score it against
/// the context's language graph.
fn scene_reward(x0: &[f64], ctx: &Context, lex: &SymbolLexicon) -> RewardOutcome {
    let scene = decode_scene(&SceneVector::from_slice(x0));
    let vsg = extract_vsg(&scene);
    let r = reward(&ctx.lsg, &vsg, lex).expect("context LSG is non-empty by construction");
    RewardOutcome {
        reward: r,
        decodable: !scene.is_empty(),
    }
}

/// Run `ddpo.steps` REINFORCE updates from the pretrained checkpoint and
/// log one CSV row per step. With zero steps the tuned checkpoint equals
/// the pretrained one.
pub fn finetune_ddpo(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::of(config);
    let vocab = Vocabulary::shared();
    let mut denoiser = load_denoiser(config, &vocab, &paths.denoiser_pretrained())?;
    let sched = schedule_of(config)?;
    let lex = load_lexicon(config)?;
    let train = load_split(&paths.train_data())?;
    let contexts = contexts_of(&train, &vocab)?;
    let data = diffusion_data(config, &vocab)?;
    let holdout: Vec<usize> = (0..data.val.len().min(128)).collect();
    let holdout_rng_template = streams::named(config.data.seed, "ddpo/holdout");
    let mut rng = streams::named(config.data.seed, "ddpo");

    let mut log = String::from(
        "step,mean_reward,std_reward,grad_norm,decodable_fraction,ddpm_holdout_loss\n",
    );
    let mut opt = Adam::new(config.ddpo.learning_rate);
    let mut baseline = BaselineState::new();
    for step in 0..config.ddpo.steps {
        let picked = rand::seq::index::sample(
            &mut rng,
            contexts.len(),
            config.ddpo.contexts_per_step.min(contexts.len()),
        );
        let selected: Vec<Context> = picked.iter().map(|i| contexts[i].clone()).collect();
        let batch = collect_rollouts(
            &selected,
            &denoiser,
            &sched,
            |x0, ctx| scene_reward(x0, ctx, &lex),
            &mut rng,
            config.ddpo.samples_per_context,
            config.ddpo.noise_scale,
        )?;
        if step == 0 && config.ddpo.dump_trajectories {
            let trajs: Vec<_> = batch.entries.iter().map(|e| e.trajectory.clone()).collect();
            crate::diffusion::dump_trajectories(&paths.trajectory_dump(), &trajs)?;
        }
        let stats = ddpo_step(
            &batch,
            &mut denoiser,
            &sched,
            &mut opt,
            &mut baseline,
            config.ddpo.clip_norm,
        )?;
        if stats.skipped {
            eprintln!("ddpo step {step}: skipped update (non-finite gradient)");
        }
        let mut holdout_rng = holdout_rng_template.clone();
        let holdout_batch = batch_refs(&data.val, &holdout);
        let holdout_loss = ddpm_loss_value(&denoiser, &holdout_batch, &sched, &mut holdout_rng)?;
        log.push_str(&format!(
            "{step},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            stats.mean_reward,
            stats.std_reward,
            stats.grad_norm,
            stats.decodable_fraction,
            holdout_loss
        ));
    }
    denoiser.save(&paths.denoiser_tuned())?;
    std::fs::write(paths.rl_log(), log)?;
    update_manifest(
        &paths,
        &[(
            "checksum.ddpo.denoiser_tuned".to_string(),
            file_checksum(&paths.denoiser_tuned())?,
        )],
    )?;
    Ok(())
}

// ---------------------------------------------------------------------
// stage 3: translator training under the joint loss

/// The frozen normalization constants of the joint loss, captured once
/// over the first batches of stage 3 before any update.
#[derive(Clone, Copy, Debug)]
pub struct JointLossState {
    pub mllm_constant: f64,
    /// Present only when the reward term is active.
    pub imagerl_constant: Option<f64>,
}

impl JointLossState {
    pub fn new(mllm_constant: f64, imagerl_constant: Option<f64>) -> Self {
        let floor = 1e-6;
        JointLossState {
            mllm_constant: mllm_constant.max(floor),
            imagerl_constant: imagerl_constant.map(|c| c.max(floor)),
        }
    }

    /// Joint objective value: each term divided by its frozen constant.
    /// The reward term enters as `1 - mean_reward` so it is minimized and
    /// its constant stays positive.
    pub fn joint_value(&self, mllm: f64, imagerl: Option<f64>) -> f64 {
        let mut total = mllm / self.mllm_constant;
        if let (Some(rl), Some(c)) = (imagerl, self.imagerl_constant) {
            total += rl / c;
        }
        total
    }
}

/// Everything stage 3 trains, saved together in one container with
/// namespaced tensor names.
pub struct Stage3Model {
    pub translator: DecoderModel,
    pub projector: Option<VisualProjector>,
    pub denoiser: Option<Denoiser>,
}

fn save_stage3(path: &Path, model: &Stage3Model) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::new();
    for (n, t) in model.translator.params.iter() {
        named.push((format!("translator/{n}"), t));
    }
    if let Some(p) = &model.projector {
        for (n, t) in p.params.iter() {
            named.push((format!("projector/{n}"), t));
        }
    }
    if let Some(d) = &model.denoiser {
        for (n, t) in d.params.iter() {
            named.push((format!("denoiser/{n}"), t));
        }
    }
    save_named_tensors(path, &named)?;
    Ok(())
}

fn load_stage3(config: &RunConfig, vocab: &Vocabulary, path: &Path) -> Result<Stage3Model> {
    if !path.exists() {
        return Err(TrainError::MissingArtifact(path.display().to_string()));
    }
    let mut shape_rng = streams::named(0, "stage3/shape");
    let mut model = Stage3Model {
        translator: DecoderModel::init(model_config(config, vocab), &mut shape_rng),
        projector: match config.scene_source() {
            SceneSource::None => None,
            _ => Some(VisualProjector::init(
                projector_config(config),
                &mut shape_rng,
            )),
        },
        denoiser: match config.scene_source() {
            SceneSource::Generated => Some(Denoiser::init(
                denoiser_config(config, vocab),
                &mut shape_rng,
            )),
            _ => None,
        },
    };
    let loaded = load_named_tensors(path)?;
    for (name, tensor) in loaded {
        let (ns, pname) = name
            .split_once('/')
            .ok_or_else(|| TrainError::Invalid(format!("checkpoint tensor {name} lacks namespace")))?;
        let slot = match ns {
            "translator" => model.translator.params.get_mut(pname),
            "projector" => {
                model
                    .projector
                    .as_mut()
                    .ok_or_else(|| TrainError::Invalid("unexpected projector tensors".into()))?
                    .params
                    .get_mut(pname)
            }
            "denoiser" => {
                model
                    .denoiser
                    .as_mut()
                    .ok_or_else(|| TrainError::Invalid("unexpected denoiser tensors".into()))?
                    .params
                    .get_mut(pname)
            }
            other => return Err(TrainError::Invalid(format!("unknown namespace {other}"))),
        };
        if slot.shape() != tensor.shape() {
            return Err(TrainError::Invalid(format!(
                "checkpoint shape mismatch for {name}"
            )));
        }
        *slot = tensor;
    }
    Ok(model)
}

/// Scene vectors for one batch under the configured source, plus the
/// rollouts backing them when they are generated.
struct BatchScenes {
    vectors: Vec<Option<Vec<f64>>>,
    rollouts: Option<RolloutBatch>,
}

fn batch_scenes(
    batch: &[(usize, &TranslationExample)],
    source: SceneSource,
    denoiser: Option<&Denoiser>,
    sched: &NoiseSchedule,
    contexts: &[Context],
    lex: &SymbolLexicon,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BatchScenes> {
    match source {
        SceneSource::None => Ok(BatchScenes {
            vectors: vec![None; batch.len()],
            rollouts: None,
        }),
        SceneSource::Oracle => Ok(BatchScenes {
            vectors: batch
                .iter()
                .map(|(_, ex)| Some(encode_scene(&ex.scene).as_slice().to_vec()))
                .collect(),
            rollouts: None,
        }),
        SceneSource::Generated => {
            let denoiser = denoiser.expect("generated scenes need the denoiser");
            let mut vectors = Vec::with_capacity(batch.len());
            let mut entries = Vec::with_capacity(batch.len());
            for (idx, _) in batch {
                let ctx = &contexts[*idx];
                let traj = sample_trajectory(&ctx.ids, denoiser, sched, rng, noise_scale)?;
                let outcome = scene_reward(traj.x0(), ctx, lex);
                vectors.push(Some(traj.x0().to_vec()));
                entries.push(RolloutEntry {
                    trajectory: traj,
                    reward: outcome.reward,
                    bucket: ctx.bucket,
                    decodable: outcome.decodable,
                });
            }
            Ok(BatchScenes {
                vectors,
                rollouts: Some(RolloutBatch::from_entries(entries)?),
            })
        }
    }
}

fn prepare_batch(
    batch: &[(usize, &TranslationExample)],
    scenes: &BatchScenes,
    vocab: &Vocabulary,
    projector: Option<(&VisualProjector, &crate::tensor::Bound)>,
    rec: &mut Record,
    l_vis: usize,
) -> Result<Vec<PreparedExample>> {
    let mut prepared = Vec::with_capacity(batch.len());
    for ((_, ex), scene) in batch.iter().zip(&scenes.vectors) {
        let visuals = match (scene, projector) {
            (Some(x0), Some((proj, bind))) => Some(proj.project_visual(rec, bind, x0)?),
            _ => None,
        };
        prepared.push(prepare_example(vocab, &ex.source, &ex.target, visuals, l_vis)?);
    }
    Ok(prepared)
}

/// Mean MLLM loss and mean reward-term value over the capture batches,
/// computed with frozen parameters.
fn capture_constants(
    batches: &[Vec<(usize, &TranslationExample)>],
    model: &Stage3Model,
    vocab: &Vocabulary,
    sched: &NoiseSchedule,
    contexts: &[Context],
    lex: &SymbolLexicon,
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
    rl_active: bool,
) -> Result<JointLossState> {
    let n = batches.len().min(config.translator.capture_batches).max(1);
    let mut mllm_sum = 0.0;
    let mut rl_sum = 0.0;
    for batch in &batches[..n] {
        let scenes = batch_scenes(
            batch,
            config.scene_source(),
            model.denoiser.as_ref(),
            sched,
            contexts,
            lex,
            config.ddpo.noise_scale,
            rng,
        )?;
        let mut rec = Record::disabled();
        let t_bind = model.translator.bind(&mut rec);
        let p_bind = model.projector.as_ref().map(|p| p.bind(&mut rec));
        let proj = model
            .projector
            .as_ref()
            .zip(p_bind.as_ref())
            .map(|(p, b)| (p, b));
        let prepared = prepare_batch(
            batch,
            &scenes,
            vocab,
            proj,
            &mut rec,
            config.translator.visual_len,
        )?;
        mllm_sum += mllm_loss(&mut rec, &t_bind, &model.translator, &prepared)?.item();
        if let Some(rollouts) = &scenes.rollouts {
            rl_sum += 1.0 - rollouts.mean_reward;
        }
    }
    let mllm_constant = mllm_sum / n as f64;
    let imagerl_constant = if rl_active {
        Some(rl_sum / n as f64)
    } else {
        None
    };
    Ok(JointLossState::new(mllm_constant, imagerl_constant))
}

/// Train the translator (and, when the joint term is active, keep
/// training the denoiser) for `translator.epochs` passes over the
/// training set. Checkpoints are saved every `checkpoint_every` batches
/// for the curve evaluation.
pub fn train_translator(config: &RunConfig) -> Result<()> {
    let paths = RunPaths::of(config);
    let vocab = Vocabulary::shared();
    let source = config.scene_source();
    let sched = schedule_of(config)?;
    let lex = load_lexicon(config)?;
    let train = load_split(&paths.train_data())?;
    let contexts = contexts_of(&train, &vocab)?;
    let mut rng = streams::named(config.data.seed, "translator");

    let denoiser = match source {
        SceneSource::Generated => Some(load_denoiser(config, &vocab, &paths.denoiser_tuned())?),
        _ => None,
    };
    let projector = match source {
        SceneSource::None => None,
        _ => Some(VisualProjector::init(projector_config(config), &mut rng)),
    };
    let mut model = Stage3Model {
        translator: DecoderModel::init(model_config(config, &vocab), &mut rng),
        projector,
        denoiser,
    };
    let rl_active =
        source == SceneSource::Generated && config.translator.update_denoiser;

    // fixed batch layout for the capture pass: the first epoch's batches
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let first_epoch_batches: Vec<Vec<(usize, &TranslationExample)>> = order
        .chunks(config.translator.batch_size)
        .map(|chunk| {
            let mut b: Vec<(usize, &TranslationExample)> =
                chunk.iter().map(|&i| (i, &train[i])).collect();
            b.sort_by_key(|(i, _)| *i);
            b
        })
        .collect();

    let mut capture_rng = streams::named(config.data.seed, "translator/capture");
    let constants = capture_constants(
        &first_epoch_batches,
        &model,
        &vocab,
        &sched,
        &contexts,
        &lex,
        config,
        &mut capture_rng,
        rl_active,
    )?;
    let mut manifest_entries = vec![(
        "constant_mllm".to_string(),
        format!("{:.12}", constants.mllm_constant),
    )];
    if let Some(c) = constants.imagerl_constant {
        manifest_entries.push(("constant_imagerl".to_string(), format!("{c:.12}")));
    }
    update_manifest(&paths, &manifest_entries)?;

    let mut opt_translator = Adam::new(config.translator.learning_rate);
    let mut opt_denoiser = Adam::new(config.translator.denoiser_learning_rate);
    let mut baseline = BaselineState::new();
    let mut log = String::from(
        "step,mllm_loss,rl_value,joint_loss,mean_reward,translator_grad_norm,denoiser_grad_norm\n",
    );
    let mut step = 0usize;
    let mut checkpoints: Vec<usize> = Vec::new();

    for epoch in 0..config.translator.epochs {
        let epoch_batches: Vec<Vec<(usize, &TranslationExample)>> = if epoch == 0 {
            first_epoch_batches.clone()
        } else {
            order.shuffle(&mut rng);
            order
                .chunks(config.translator.batch_size)
                .map(|chunk| {
                    let mut b: Vec<(usize, &TranslationExample)> =
                        chunk.iter().map(|&i| (i, &train[i])).collect();
                    b.sort_by_key(|(i, _)| *i);
                    b
                })
                .collect()
        };
        for batch in &epoch_batches {
            if step % config.translator.checkpoint_every == 0 {
                save_stage3(&paths.stage3_checkpoint(step), &model)?;
                checkpoints.push(step);
            }
            let stats = stage3_batch_update(
                batch,
                &mut model,
                &vocab,
                &sched,
                &contexts,
                &lex,
                config,
                &constants,
                &mut opt_translator,
                &mut opt_denoiser,
                &mut baseline,
                rl_active,
                &mut rng,
            )?;
            log.push_str(&format!(
                "{step},{:.6},{},{:.6},{},{:.6},{}\n",
                stats.mllm_loss,
                stats
                    .rl_value
                    .map_or("".to_string(), |v| format!("{v:.6}")),
                stats.joint_loss,
                stats
                    .mean_reward
                    .map_or("".to_string(), |v| format!("{v:.6}")),
                stats.translator_grad_norm,
                stats
                    .denoiser_grad_norm
                    .map_or("".to_string(), |v| format!("{v:.6}")),
            ));
            step += 1;
        }
    }
    save_stage3(&paths.model_final(), &model)?;
    std::fs::write(paths.stage3_log(), log)?;
    let mut entries = vec![(
        "checksum.translator.model_final".to_string(),
        file_checksum(&paths.model_final())?,
    )];
    entries.push((
        "stage3_checkpoints".to_string(),
        checkpoints
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    ));
    update_manifest(&paths, &entries)?;
    Ok(())
}

struct Stage3Stats {
    mllm_loss: f64,
    rl_value: Option<f64>,
    joint_loss: f64,
    mean_reward: Option<f64>,
    translator_grad_norm: f64,
    denoiser_grad_norm: Option<f64>,
}

/// One stage-3 update. Examples are re-sorted by dataset index so the
/// gradient reduction order is independent of the caller's batch order.
#[allow(clippy::too_many_arguments)]
fn stage3_batch_update(
    batch: &[(usize, &TranslationExample)],
    model: &mut Stage3Model,
    vocab: &Vocabulary,
    sched: &NoiseSchedule,
    contexts: &[Context],
    lex: &SymbolLexicon,
    config: &RunConfig,
    constants: &JointLossState,
    opt_translator: &mut Adam,
    opt_denoiser: &mut Adam,
    baseline: &mut BaselineState,
    rl_active: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Stage3Stats> {
    let mut batch: Vec<(usize, &TranslationExample)> = batch.to_vec();
    batch.sort_by_key(|(i, _)| *i);

    let scenes = batch_scenes(
        &batch,
        config.scene_source(),
        model.denoiser.as_ref(),
        sched,
        contexts,
        lex,
        config.ddpo.noise_scale,
        rng,
    )?;

    // translator + projector update on the normalized MLLM term
    let mut rec = Record::new();
    let t_bind = model.translator.bind(&mut rec);
    let p_bind = model.projector.as_ref().map(|p| p.bind(&mut rec));
    let proj = model
        .projector
        .as_ref()
        .zip(p_bind.as_ref())
        .map(|(p, b)| (p, b));
    let prepared = prepare_batch(
        &batch,
        &scenes,
        vocab,
        proj,
        &mut rec,
        config.translator.visual_len,
    )?;
    let mllm = mllm_loss(&mut rec, &t_bind, &model.translator, &prepared)?;
    let mllm_value = mllm.item();
    let scaled = rec.scale(&mllm, 1.0 / constants.mllm_constant)?;
    let grads = rec.backward(&scaled)?;
    let mut named = t_bind.grads(&grads);
    if let Some(pb) = &p_bind {
        // projector gradients ride along in the same optimizer, namespaced
        for (n, g) in pb.grads(&grads) {
            named.push((format!("proj::{n}"), g));
        }
    }
    let translator_grad_norm = crate::tensor::global_norm(&named);
    let (t_grads, p_grads): (Vec<_>, Vec<_>) = named
        .into_iter()
        .partition(|(n, _)| !n.starts_with("proj::"));
    opt_translator.step(&mut model.translator.params, &t_grads);
    if let Some(p) = &mut model.projector {
        let stripped: Vec<(String, Tensor)> = p_grads
            .into_iter()
            .map(|(n, g)| (n.trim_start_matches("proj::").to_string(), g))
            .collect();
        opt_translator.step(&mut p.params, &stripped);
    }

    // denoiser update on the normalized reward term
    let mut rl_value = None;
    let mut mean_reward = None;
    let mut denoiser_grad_norm = None;
    if let Some(rollouts) = &scenes.rollouts {
        mean_reward = Some(rollouts.mean_reward);
        if rl_active {
            rl_value = Some(1.0 - rollouts.mean_reward);
            let denoiser = model.denoiser.as_mut().expect("rl needs the denoiser");
            let c = constants
                .imagerl_constant
                .ok_or_else(|| TrainError::Invalid("joint term enabled before capture".into()))?;
            let ascent = reinforce_gradient(rollouts, denoiser, sched, baseline)?;
            let finite = ascent.iter().all(|(_, g)| g.is_finite());
            if finite {
                let mut descent: Vec<(String, Tensor)> = ascent
                    .into_iter()
                    .map(|(n, g)| {
                        let data = g.data().iter().map(|v| -v / c).collect();
                        (n, Tensor::new(g.shape().to_vec(), data).expect("shape"))
                    })
                    .collect();
                let norm = clip_gradients(&mut descent, config.ddpo.clip_norm);
                denoiser_grad_norm = Some(norm);
                opt_denoiser.step(&mut denoiser.params, &descent);
            } else {
                eprintln!("stage 3: skipped denoiser update (non-finite gradient)");
            }
            baseline.update(rollouts);
        }
    }

    Ok(Stage3Stats {
        mllm_loss: mllm_value,
        rl_value,
        joint_loss: constants.joint_value(mllm_value, rl_value),
        mean_reward,
        translator_grad_norm,
        denoiser_grad_norm,
    })
}

// ---------------------------------------------------------------------
// evaluation

/// Evaluate a stage-3 model on a dataset: greedy-decode every example
/// with its configured scene source and score rewards and consistency.
/// Per-example randomness comes from substreams of `stream_name`, so two
/// evaluations of different checkpoints see identical noise.
pub fn evaluate_model(
    config: &RunConfig,
    model: &Stage3Model,
    examples: &[TranslationExample],
    vocab: &Vocabulary,
    lex: &SymbolLexicon,
    stream_name: &str,
) -> Result<Vec<ExampleEval>> {
    let sched = schedule_of(config)?;
    let source_kind = config.scene_source();
    let mut out = Vec::with_capacity(examples.len());
    for (idx, ex) in examples.iter().enumerate() {
        let (scene_vec, reward_value, clip_value) = match source_kind {
            SceneSource::None => (None, 0.0, 0.0),
            SceneSource::Oracle => {
                let lsg = parse_lsg(&ex.source)?;
                let vsg = extract_vsg(&ex.scene);
                let r = reward(&lsg, &vsg, lex)?;
                let clip = clip_score_analog(&ex.source, &ex.scene)?;
                (
                    Some(encode_scene(&ex.scene).as_slice().to_vec()),
                    r,
                    clip,
                )
            }
            SceneSource::Generated => {
                let denoiser = model
                    .denoiser
                    .as_ref()
                    .ok_or_else(|| TrainError::Invalid("generated scenes need a denoiser".into()))?;
                let ids = vocab.ids(&ex.source)?;
                let mut ex_rng = streams::substream(config.data.seed, stream_name, idx as u64);
                let traj =
                    sample_trajectory(&ids, denoiser, &sched, &mut ex_rng, config.ddpo.noise_scale)?;
                let lsg = parse_lsg(&ex.source)?;
                let decoded = decode_scene(&SceneVector::from_slice(traj.x0()));
                let vsg = extract_vsg(&decoded);
                let r = reward(&lsg, &vsg, lex)?;
                let clip = clip_score_analog(&ex.source, &decoded)?;
                (Some(traj.x0().to_vec()), r, clip)
            }
        };
        let visuals = match (&scene_vec, &model.projector) {
            (Some(x0), Some(proj)) => Some(proj.project_visual_plain(x0)?),
            _ => None,
        };
        let hypothesis = greedy_decode(
            &model.translator,
            vocab,
            &ex.source,
            visuals.as_ref(),
            16,
        )?;
        out.push(ExampleEval {
            split: ex.split,
            hypothesis,
            reference: ex.target.clone(),
            reward: reward_value,
            clip_analog: clip_value,
        });
    }
    Ok(out)
}

/// Evaluate the final model on the test set and write `eval/report.csv`.
pub fn evaluate(config: &RunConfig) -> Result<EvalReport> {
    let paths = RunPaths::of(config);
    let vocab = Vocabulary::shared();
    let lex = load_lexicon(config)?;
    let model = load_stage3(config, &vocab, &paths.model_final())?;
    let test = load_split(&paths.test_data())?;
    let evals = evaluate_model(config, &model, &test, &vocab, &lex, "eval/test")?;
    let report = build_report(&evals)?;
    report.write_csv(&paths.report())?;
    Ok(report)
}

/// Evaluate every stage-3 checkpoint on the dev set and write
/// `eval/curve.csv`. Returns the points and the Spearman correlation
/// between checkpoint BLEU and checkpoint mean reward (when defined).
pub fn run_curve(config: &RunConfig) -> Result<(Vec<CurvePoint>, Option<f64>)> {
    let paths = RunPaths::of(config);
    let vocab = Vocabulary::shared();
    let lex = load_lexicon(config)?;
    let dev = load_split(&paths.dev_data())?;
    let manifest = std::fs::read_to_string(paths.manifest()).map_err(|_| {
        TrainError::MissingArtifact(paths.manifest().display().to_string())
    })?;
    let checkpoints: Vec<usize> = manifest
        .lines()
        .find_map(|l| l.strip_prefix("stage3_checkpoints = "))
        .map(|s| {
            s.split_whitespace()
                .filter_map(|w| w.parse().ok())
                .collect()
        })
        .unwrap_or_default();
    if checkpoints.is_empty() {
        return Err(TrainError::MissingArtifact(
            "stage 3 checkpoints (train the translator first)".to_string(),
        ));
    }
    let mut points = Vec::with_capacity(checkpoints.len());
    for index in checkpoints {
        let model = load_stage3(config, &vocab, &paths.stage3_checkpoint(index))?;
        let evals = evaluate_model(config, &model, &dev, &vocab, &lex, "eval/dev")?;
        let report = build_report(&evals)?;
        points.push(CurvePoint {
            iteration: index,
            bleu: report.overall.bleu,
            mean_reward: report.overall.mean_reward,
        });
    }
    let corr = write_curve_csv(&paths.curve(), &points)?;
    Ok((points, corr))
}

/// Run every stage the configuration calls for, then the curve and the
/// final evaluation.
pub fn run_pipeline(config: &RunConfig) -> Result<EvalReport> {
    ensure_data(config)?;
    if config.scene_source() == SceneSource::Generated {
        pretrain_diffusion(config)?;
        finetune_ddpo(config)?;
    }
    train_translator(config)?;
    run_curve(config)?;
    evaluate(config)
}

/// Append a line to the events log inside the run directory.
pub fn log_event(config: &RunConfig, message: &str) -> Result<()> {
    let paths = RunPaths::of(config);
    std::fs::create_dir_all(&paths.root)?;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(paths.root.join("events.log"))?;
    writeln!(f, "{message}")?;
    Ok(())
}
