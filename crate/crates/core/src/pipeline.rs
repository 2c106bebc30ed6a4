//! End-to-end orchestration shared by the CLI, examples and tests.

use serde::{Deserialize, Serialize};

use crate::backbone::{pretrain_backbone_mlm, BackboneDims, MlmReport};
use crate::config::Config;
use crate::corpus::{Sentence, StyleCorpus, Vocab};
use crate::error::Result;
use crate::metrics::{train_char_lm, train_eval_classifier, CharLm, CharLmDims, CharLmTraining, ClassifierTraining, EvalClassifier};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::scorer::{train_style_classifier, ScorerModel, ScorerReport};
use crate::trainer::{train_stage1, train_stage2, Models, Stage2History, TrainHistory, TrainHooks};
use crate::transfer::{sweep_style_weight, Judges, SweepRow};
use crate::vae::{new_style_table, VaeDims, VaeModel};

/// A corpus split into training and held-out parts with a vocabulary built
/// from the training part.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_corpus: StyleCorpus,
    pub test_corpus: StyleCorpus,
    pub vocab: Vocab,
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.train_corpus.k()
    }
}

pub fn prepare_dataset(corpus: &StyleCorpus, cfg: &Config, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(derive_seed(seed, Stream::Split));
    let (train_corpus, test_corpus) = corpus.split(cfg.data.held_out_fraction, &mut rng)?;
    let vocab = Vocab::build(train_corpus.lines(), cfg.data.min_count)?;
    let train = train_corpus.sentences(&vocab, cfg.data.max_len)?;
    let test = test_corpus.sentences(&vocab, cfg.data.max_len)?;
    Ok(Dataset {
        train_corpus,
        test_corpus,
        vocab,
        train,
        test,
    })
}

pub fn pretrain(ds: &Dataset, cfg: &Config, seed: u64) -> Result<(crate::backbone::BackboneModel, MlmReport)> {
    let dims = BackboneDims::from_config(&cfg.backbone, ds.vocab.len(), cfg.data.max_len);
    pretrain_backbone_mlm(&ds.train, dims, &cfg.backbone, seed)
}

/// Fresh VAE and style table around a prepared backbone.
pub fn init_models(backbone: crate::backbone::BackboneModel, ds: &Dataset, cfg: &Config, seed: u64) -> Result<Models> {
    let dims = VaeDims::from_config(&cfg.vae, backbone.d_model(), ds.vocab.len(), cfg.data.max_len);
    let vae = VaeModel::new(dims, &mut rng_from_seed(derive_seed(seed, Stream::VaeInit)))?;
    let style = new_style_table(
        ds.k(),
        cfg.vae.d_latent,
        &cfg.style,
        &mut rng_from_seed(derive_seed(seed, Stream::StyleInit)),
    );
    Ok(Models { backbone, vae, style })
}

pub fn train_scorer(models: &Models, ds: &Dataset, cfg: &Config, seed: u64) -> Result<(ScorerModel, ScorerReport)> {
    train_style_classifier(&models.backbone, &ds.train, &ds.test, ds.k(), &cfg.scorer, seed)
}

/// Independent judges for transfer outputs.
#[derive(Clone, Debug)]
pub struct EvalModels {
    pub classifier: EvalClassifier,
    pub lm: CharLm,
    pub classifier_held_out_accuracy: f64,
}

impl EvalModels {
    pub fn judges(&self) -> Judges<'_> {
        Judges {
            classifier: &self.classifier,
            lm: &self.lm,
        }
    }
}

pub fn train_eval_models(ds: &Dataset, cfg: &Config, seed: u64) -> Result<EvalModels> {
    let e = &cfg.eval;
    let classifier = train_eval_classifier(
        &ds.train_corpus,
        ClassifierTraining {
            epochs: e.classifier_epochs,
            lr: e.classifier_lr,
            bits: e.hash_bits,
        },
        seed,
    )?;
    let acc = classifier.accuracy(&ds.test_corpus);
    let lines: Vec<&str> = ds.train_corpus.lines().collect();
    let lm = train_char_lm(
        &lines,
        CharLmDims {
            embed: e.char_embed,
            hidden: e.char_hidden,
        },
        CharLmTraining {
            steps: e.char_steps,
            lr: e.char_lr,
            batch: e.char_batch,
        },
        seed,
    )?;
    Ok(EvalModels {
        classifier,
        lm,
        classifier_held_out_accuracy: acc,
    })
}

/// Results of [`run_experiment`].
#[derive(Clone, Debug)]
pub struct Experiment {
    pub dataset: Dataset,
    pub mlm: MlmReport,
    /// Backbone checksum right after pre-training.
    pub backbone_pretrained: String,
    pub stage1: Models,
    pub stage1_history: TrainHistory,
    pub scorer: ScorerModel,
    pub scorer_report: ScorerReport,
    pub stage2: Models,
    pub stage2_history: Stage2History,
    pub eval: EvalModels,
    pub stage1_sweep: Vec<SweepRow>,
    pub stage2_sweep: Vec<SweepRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub backbone_pretrained: String,
    pub backbone: String,
    pub stage1: String,
    pub style_stage1: String,
    pub stage2: String,
    pub style_stage2: String,
    pub scorer: String,
}

impl Experiment {
    pub fn summary(&self, seed: u64) -> ExperimentSummary {
        ExperimentSummary {
            seed,
            backbone_pretrained: self.backbone_pretrained.clone(),
            backbone: self.stage2.backbone.store.checksum(),
            stage1: self.stage1.vae.store.checksum(),
            style_stage1: self.stage1.style.checksum(),
            stage2: self.stage2.vae.store.checksum(),
            style_stage2: self.stage2.style.checksum(),
            scorer: self.scorer.store.checksum(),
        }
    }
}

/// pretrain → stage I → scorer → stage II → judges → sweeps of both stages.
pub fn run_experiment(corpus: &StyleCorpus, cfg: &Config) -> Result<Experiment> {
    let seed = cfg.run.seed;
    let dataset = prepare_dataset(corpus, cfg, seed)?;
    let (backbone, mlm) = pretrain(&dataset, cfg, seed)?;
    let backbone_pretrained = backbone.store.checksum();
    let mut stage1 = init_models(backbone, &dataset, cfg, seed)?;
    let stage1_history = train_stage1(&mut stage1, &dataset.train, cfg, seed, &mut TrainHooks::default())?;
    let (scorer, scorer_report) = train_scorer(&stage1, &dataset, cfg, seed)?;
    let mut stage2 = stage1.clone();
    let stage2_history = train_stage2(
        &mut stage2,
        Some(&scorer),
        &dataset.train,
        &dataset.test,
        cfg,
        seed,
        &mut TrainHooks::default(),
    )?;
    let eval = train_eval_models(&dataset, cfg, seed)?;
    let weights = &cfg.transfer.weights;
    let max_len = cfg.transfer.max_len;
    let stage1_sweep = sweep_style_weight(&stage1, &dataset.vocab, &dataset.test, weights, max_len, &eval.judges())?;
    let stage2_sweep = sweep_style_weight(&stage2, &dataset.vocab, &dataset.test, weights, max_len, &eval.judges())?;
    Ok(Experiment {
        dataset,
        mlm,
        backbone_pretrained,
        stage1,
        stage1_history,
        scorer,
        scorer_report,
        stage2,
        stage2_history,
        eval,
        stage1_sweep,
        stage2_sweep,
    })
}
