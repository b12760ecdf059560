use super::config::{InitFrom, StageConfig};
use super::optim::{cosine_lr, AdamHyper};
use super::state::{Checkpoint, TrainState, LOGIT_SCALE_NAME};
use crate::data::{tokenize_batch, ImageCaptionCorpus, ImageCaptionRecord, TrainingCorpora};
use crate::encoders::TokenBatch;
use crate::error::{Error, Result};
use crate::losses::{stage_joint_loss_on, Stage, TextSideVars};
use crate::numcore::{Graph, Tensor, Var};

/// One optimizer step's worth of tokenized, tensorized inputs.
pub struct StepBatch {
    pub text: TextBatch,
    pub captions: TokenBatch,
    /// `[B, C, H, W]`.
    pub images: Tensor,
}

pub enum TextBatch {
    Pairs {
        queries: TokenBatch,
        positives: TokenBatch,
    },
    /// `negatives` holds the seven negatives of query 0, then of query 1, ….
    Triplets {
        queries: TokenBatch,
        positives: TokenBatch,
        negatives: TokenBatch,
    },
}

fn caption_corpus(stage: Stage, corpora: &TrainingCorpora) -> (&'static str, Option<&ImageCaptionCorpus>) {
    match stage {
        Stage::One => ("short image captions", corpora.captions_short.as_ref()),
        Stage::Two | Stage::Three => ("long image captions", corpora.captions_long.as_ref()),
    }
}

fn missing(stage: Stage, what: &str) -> Error {
    Error::Config(format!("stage {stage} needs {what}, but none were provided"))
}

/// Checks that `corpora` hold what `stage` trains on.
pub fn check_corpora(cfg: &StageConfig, corpora: &TrainingCorpora) -> Result<()> {
    let stage = cfg.stage;
    let text_len = match stage {
        Stage::One | Stage::Two => corpora
            .pairs
            .as_ref()
            .map(|c| c.len())
            .ok_or_else(|| missing(stage, "text pairs"))?,
        Stage::Three => corpora
            .triplets
            .as_ref()
            .map(|c| c.len())
            .ok_or_else(|| missing(stage, "text triplets"))?,
    };
    let (what, captions) = caption_corpus(stage, corpora);
    let image_len = captions.map(|c| c.len()).ok_or_else(|| missing(stage, what))?;
    if cfg.batch_size_text > text_len || cfg.batch_size_img > image_len {
        return Err(Error::Config(format!(
            "stage {stage} batch sizes {}/{} exceed corpus sizes {text_len}/{image_len}",
            cfg.batch_size_text, cfg.batch_size_img
        )));
    }
    Ok(())
}

/// Draws and tokenizes the batches for step `step` of a stage.
pub fn draw_batch(cfg: &StageConfig, corpora: &TrainingCorpora, step: usize) -> Result<StepBatch> {
    let (stage, len) = (cfg.stage, cfg.max_seq_len);
    let text = match stage {
        Stage::One | Stage::Two => {
            let c = corpora.pairs.as_ref().ok_or_else(|| missing(stage, "text pairs"))?;
            let recs = c.next_batch(cfg.batch_size_text, step)?;
            let q: Vec<&str> = recs.iter().map(|r| r.query.as_str()).collect();
            let p: Vec<&str> = recs.iter().map(|r| r.positive.as_str()).collect();
            TextBatch::Pairs {
                queries: tokenize_batch(&q, len)?,
                positives: tokenize_batch(&p, len)?,
            }
        }
        Stage::Three => {
            let c = corpora
                .triplets
                .as_ref()
                .ok_or_else(|| missing(stage, "text triplets"))?;
            let recs = c.next_batch(cfg.batch_size_text, step)?;
            let q: Vec<&str> = recs.iter().map(|r| r.query.as_str()).collect();
            let p: Vec<&str> = recs.iter().map(|r| r.positive.as_str()).collect();
            let n: Vec<&str> = recs
                .iter()
                .flat_map(|r| r.negatives.iter().map(String::as_str))
                .collect();
            TextBatch::Triplets {
                queries: tokenize_batch(&q, len)?,
                positives: tokenize_batch(&p, len)?,
                negatives: tokenize_batch(&n, len)?,
            }
        }
    };
    let (what, captions) = caption_corpus(stage, corpora);
    let c = captions.ok_or_else(|| missing(stage, what))?;
    let recs: Vec<&ImageCaptionRecord> = c.next_batch(cfg.batch_size_img, step)?;
    let caps: Vec<&str> = recs.iter().map(|r| r.caption.as_str()).collect();
    let imgs: Vec<Tensor> = recs.iter().map(|r| r.image.clone()).collect();
    Ok(StepBatch {
        text,
        captions: tokenize_batch(&caps, len)?,
        images: Tensor::stack(&imgs)?,
    })
}

/// Joint loss of `batch` under `state`, its value and parameter gradients
/// in [`TrainState::params`] order.
pub fn loss_and_grads(state: &TrainState, stage: Stage, batch: &StepBatch) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let tv = state.text.bind(&mut g);
    let iv = state.image.bind(&mut g);
    let tau_text = state.tau_text.bind(&mut g);
    let tau_img = state.tau_img.bind(&mut g);

    let mut vars: Vec<Var> = vec![tv.token_embedding, tv.attn_qkv, tv.attn_out, tv.proj];
    vars.extend([iv.patch_proj, iv.attn_qkv, iv.attn_out, iv.proj]);
    if let crate::losses::TempVar::Trainable(s) = tau_img {
        vars.push(s);
    }

    let text = match &batch.text {
        TextBatch::Pairs { queries, positives } => TextSideVars::Pairs {
            queries: tv.encode(&mut g, queries)?,
            positives: tv.encode(&mut g, positives)?,
        },
        TextBatch::Triplets {
            queries,
            positives,
            negatives,
        } => TextSideVars::Triplets {
            queries: tv.encode(&mut g, queries)?,
            positives: tv.encode(&mut g, positives)?,
            negatives: tv.encode(&mut g, negatives)?,
        },
    };
    let captions = tv.encode(&mut g, &batch.captions)?;
    let images_in = g.constant(batch.images.clone());
    let images = iv.encode(&mut g, images_in)?;
    let loss = stage_joint_loss_on(&mut g, stage, text, captions, images, tau_text, tau_img)?;

    let grads = g.backward(loss)?;
    let params = state.params();
    let mut out = Vec::with_capacity(vars.len());
    for (v, (_, p)) in vars.iter().zip(&params) {
        out.push(match grads.get(*v) {
            Some(d) => Tensor::new(p.shape().to_vec(), d.to_vec())?,
            None => Tensor::zeros(p.shape()),
        });
    }
    Ok((g.value(loss).data()[0], out))
}

/// Applies one AdamW update to every trainable tensor of `state`.
///
/// The image logit scale is exempt from weight decay and is clamped back to
/// its cap afterwards.
pub fn adamw_step(state: &mut TrainState, grads: &[Tensor], lr: f64, cfg: &StageConfig) -> Result<()> {
    let hp = AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    };
    let decay: Vec<bool> = state.params().iter().map(|(n, _)| *n != LOGIT_SCALE_NAME).collect();
    let mut moments = std::mem::replace(
        &mut state.moments,
        super::AdamMoments {
            m: vec![],
            v: vec![],
            t: 0,
        },
    );
    let result = {
        let mut params: Vec<&mut Tensor> = state.params_mut().into_iter().map(|(_, t)| t).collect();
        moments.step(&mut params, grads, &decay, lr, &hp)
    };
    state.moments = moments;
    result?;
    state.tau_img.clamp();
    state.step += 1;
    Ok(())
}

/// Output of [`run_stage`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub state: TrainState,
    /// Loss before each update, one entry per step.
    pub losses: Vec<f64>,
}

/// Runs `cfg.total_steps` joint-loss updates from `state`.
pub fn run_stage(cfg: &StageConfig, mut state: TrainState, corpora: &TrainingCorpora) -> Result<StageOutcome> {
    cfg.validate()?;
    check_corpora(cfg, corpora)?;
    let mut losses = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let batch = draw_batch(cfg, corpora, step)?;
        let (loss, grads) = loss_and_grads(&state, cfg.stage, &batch)?;
        let lr = cosine_lr(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_steps)?;
        adamw_step(&mut state, &grads, lr, cfg)?;
        losses.push(loss);
    }
    Ok(StageOutcome { state, losses })
}

/// Output of [`run_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutcome {
    pub state: TrainState,
    /// One checkpoint per stage, taken at its end.
    pub checkpoints: Vec<Checkpoint>,
    pub losses: Vec<Vec<f64>>,
}

/// Runs consecutive stages, handing each one's final weights to the next.
///
/// The first config decides the starting point: `random` uses `initial`,
/// a checkpoint path loads that file. Later configs must use `previous`.
/// Optimizer moments start from zero in every stage.
pub fn run_pipeline(
    configs: &[StageConfig],
    initial: TrainState,
    corpora: &TrainingCorpora,
) -> Result<PipelineOutcome> {
    let first = configs
        .first()
        .ok_or_else(|| Error::Config("pipeline needs at least one stage".into()))?;
    for pair in configs.windows(2) {
        if pair[1].stage.number() != pair[0].stage.number() + 1 {
            return Err(Error::Config(format!(
                "stage {} cannot follow stage {}",
                pair[1].stage, pair[0].stage
            )));
        }
        if pair[1].init_from != InitFrom::Previous {
            return Err(Error::Config(format!(
                "stage {} inside a pipeline must start from the previous stage",
                pair[1].stage
            )));
        }
    }
    for cfg in configs {
        cfg.validate()?;
        check_corpora(cfg, corpora)?;
    }
    let mut state = match &first.init_from {
        InitFrom::Random => initial,
        InitFrom::Checkpoint(path) => Checkpoint::load(path)?.state,
        InitFrom::Previous => {
            return Err(Error::Config(format!(
                "stage {} starts the pipeline but is set to start from a previous stage",
                first.stage
            )))
        }
    };
    let mut checkpoints = Vec::with_capacity(configs.len());
    let mut losses = Vec::with_capacity(configs.len());
    for cfg in configs {
        state.reset_optimizer();
        let outcome = run_stage(cfg, state, corpora)?;
        state = outcome.state;
        checkpoints.push(Checkpoint {
            state: state.clone(),
            stage: cfg.stage,
            config_hash: cfg.hash(),
        });
        losses.push(outcome.losses);
    }
    Ok(PipelineOutcome {
        state,
        checkpoints,
        losses,
    })
}
