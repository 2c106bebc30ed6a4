//! Command-line front end. [`run_command`] parses `argv`, runs one
//! subcommand and maps the outcome to an exit status.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::backbone::BackboneModel;
use crate::config::Config;
use crate::corpus::{gen_synthetic_corpus, tokenize, StyleCorpus, SyntheticSpec, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{bleu_single, transfer_accuracy, CharLm, EvalClassifier, EvalReport};
use crate::persist::{sha256_file, write_atomic, Checkpoint, ComponentTag};
use crate::pipeline::{init_models, prepare_dataset, pretrain, train_eval_models, Dataset};
use crate::rng::{derive_seed, rng_from_seed, Stream};
use crate::scorer::{train_style_classifier, ScorerModel};
use crate::trainer::{sentence_scores, train_stage1, train_stage2, Models, TrainHooks};
use crate::transfer::{sweep_csv, sweep_style_weight, transfer_texts, Judges, TransferRequest};

pub const SEED_ENV: &str = "STOWER_SEED";

#[derive(Parser, Debug)]
#[command(name = "pivotvae", version, about = "Text style transfer with a style-embedding VAE")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed (overrides the config and STOWER_SEED).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic two-style corpus and its manifest.
    GenData {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the backbone with masked-token prediction.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the VAE and style embeddings on top of a backbone checkpoint.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines step log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the style classifier used for importance scores.
    TrainScorer {
        #[arg(long)]
        data: PathBuf,
        /// Any checkpoint holding the backbone.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a stage-I model on pivot-masked inputs.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the evaluation classifier and character LM.
    TrainEvalModels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print per-token importance scores as `token<TAB>score` lines.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Transfer sentences from one style to another.
    Transfer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "from")]
        from: String,
        #[arg(long = "to")]
        to: String,
        #[arg(long)]
        weight: f32,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Decode from a posterior sample instead of the mean.
        #[arg(long)]
        sample: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score transferred sentences against their sources.
    Evaluate {
        #[arg(long)]
        eval_models: PathBuf,
        /// Transferred sentences, one per line.
        #[arg(long)]
        input: PathBuf,
        /// Source sentences (BLEU references), aligned with `input`.
        #[arg(long)]
        source: PathBuf,
        #[arg(long = "to")]
        to: String,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a grid of style weights on the held-out split.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        eval_models: PathBuf,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f32>>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit status: 0 on success, 2 for usage errors, 1 otherwise.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn resolve_config(common: &Common) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::synthetic(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.run.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer")))?;
    }
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    cfg.validate()?;
    for line in cfg.to_text().lines() {
        log::info!("config {line}");
    }
    Ok(cfg)
}

/// Run record written next to every output.
struct Manifest {
    command: &'static str,
    cfg: Config,
    inputs: Vec<(String, PathBuf)>,
    extra: serde_json::Value,
}

impl Manifest {
    fn new(command: &'static str, cfg: &Config) -> Self {
        Self {
            command,
            cfg: cfg.clone(),
            inputs: Vec::new(),
            extra: json!({}),
        }
    }

    fn input(mut self, role: &str, p: &Path) -> Self {
        self.inputs.push((role.to_string(), p.to_path_buf()));
        self
    }

    fn write(self, output: &Path) -> Result<()> {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        self.write_to(output, &output.with_file_name(name))
    }

    fn write_to(self, output: &Path, path: &Path) -> Result<()> {
        let seed = self.cfg.run.seed;
        let streams = [
            ("corpus", Stream::Corpus),
            ("backbone_init", Stream::BackboneInit),
            ("backbone_train", Stream::BackboneTrain),
            ("vae_init", Stream::VaeInit),
            ("style_init", Stream::StyleInit),
            ("stage1", Stream::Stage1),
            ("scorer_init", Stream::ScorerInit),
            ("scorer_train", Stream::ScorerTrain),
            ("stage2", Stream::Stage2),
            ("eval_classifier", Stream::EvalClassifier),
            ("char_lm", Stream::CharLm),
            ("transfer", Stream::Transfer),
            ("split", Stream::Split),
        ];
        let seeds: serde_json::Map<String, serde_json::Value> =
            streams.iter().map(|(n, s)| (n.to_string(), json!(derive_seed(seed, *s)))).collect();
        let mut inputs = serde_json::Map::new();
        for (role, p) in &self.inputs {
            let hash = if p.is_file() { Some(sha256_file(p)?) } else { None };
            inputs.insert(role.clone(), json!({"path": p.display().to_string(), "sha256": hash}));
        }
        let out_hash = if output.is_file() { Some(sha256_file(output)?) } else { None };
        let doc = json!({
            "command": self.command,
            "seed": seed,
            "stream_seeds": seeds,
            "config": self.cfg.to_json(),
            "inputs": inputs,
            "output": {"path": output.display().to_string(), "sha256": out_hash},
            "extra": self.extra,
        });
        write_atomic(path, serde_json::to_string_pretty(&doc)?.as_bytes())
    }
}

fn load_dataset(data: &Path, cfg: &Config) -> Result<Dataset> {
    prepare_dataset(&StyleCorpus::load_dir(data)?, cfg, cfg.run.seed)
}

fn vocab_of(ck: &Checkpoint) -> Result<Vocab> {
    let tokens = ck
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no vocabulary".into()))?;
    Vocab::from_token_list(tokens.clone())
}

fn ensure_same_vocab(ds: &Dataset, ck: &Checkpoint) -> Result<()> {
    if ck.vocab.as_deref() != Some(ds.vocab.tokens()) {
        return Err(Error::usage(
            "the corpus vocabulary differs from the checkpoint's (different data, seed or split?)",
        ));
    }
    Ok(())
}

fn style_names(ck: &Checkpoint) -> Vec<String> {
    ck.config["style_names"]
        .as_array()
        .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

fn with_names(mut ck: Checkpoint, names: &[String]) -> Checkpoint {
    if let Some(obj) = ck.config.as_object_mut() {
        obj.insert("style_names".into(), json!(names));
    }
    ck
}

fn resolve_style(names: &[String], s: &str) -> Result<usize> {
    if let Some(i) = names.iter().position(|n| n == s) {
        return Ok(i);
    }
    s.parse::<usize>()
        .map_err(|_| Error::usage(format!("unknown style '{s}' (known: {})", names.join(", "))))
}

fn read_lines(p: &Path) -> Result<Vec<String>> {
    let body = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    Ok(body.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn log_sink(p: &Option<PathBuf>) -> Result<Option<fs::File>> {
    p.as_ref()
        .map(|p| {
            if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            fs::File::create(p).map_err(|e| Error::io(p, e))
        })
        .transpose()
}

fn scorer_checkpoint(scorer: &ScorerModel, backbone_checksum: &str, cfg: &Config) -> Checkpoint {
    let mut ck = Checkpoint::new(cfg.to_json(), None, cfg.run.seed);
    let mut c = scorer.component();
    c.meta["backbone_checksum"] = json!(backbone_checksum);
    ck.put(c);
    ck
}

fn load_scorer(path: &Path, backbone: &BackboneModel) -> Result<ScorerModel> {
    let ck = Checkpoint::load_components(path, &[ComponentTag::Scorer])?;
    let c = ck.require(ComponentTag::Scorer)?;
    let want = backbone.store.checksum();
    if c.meta["backbone_checksum"].as_str().is_some_and(|h| h != want) {
        return Err(Error::usage("scorer was trained on a different backbone"));
    }
    ScorerModel::from_component(c)
}

fn load_eval_models(path: &Path) -> Result<(EvalClassifier, CharLm, Vec<String>)> {
    let ck = Checkpoint::load_components(path, &[ComponentTag::EvalClassifier, ComponentTag::CharLm])?;
    Ok((
        EvalClassifier::from_component(ck.require(ComponentTag::EvalClassifier)?)?,
        CharLm::from_component(ck.require(ComponentTag::CharLm)?)?,
        style_names(&ck),
    ))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { n, out, common } => {
            let cfg = resolve_config(&common)?;
            let spec = SyntheticSpec {
                n_per_style: n,
                ..SyntheticSpec::default()
            };
            let synth = gen_synthetic_corpus(derive_seed(cfg.run.seed, Stream::Corpus), &spec)?;
            synth.write(&out)?;
            println!("wrote {} sentences to {}", synth.records.len(), out.display());
            let mut m = Manifest::new("gen-data", &cfg);
            m.extra = json!({"n_per_style": n, "styles": spec.style_names});
            m.write_to(&out.join("manifest.jsonl"), &out.join("run.manifest.json"))
        }
        Command::Pretrain { data, out, common } => {
            let cfg = resolve_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let (backbone, report) = pretrain(&ds, &cfg, cfg.run.seed)?;
            let mut ck = Checkpoint::new(cfg.to_json(), Some(ds.vocab.tokens().to_vec()), cfg.run.seed);
            ck.put(backbone.component());
            with_names(ck, &ds.train_corpus.names).save(&out)?;
            println!("final masked-token loss {:.4}", report.final_loss);
            let mut m = Manifest::new("pretrain", &cfg).input("data", &data);
            m.extra = json!({"epoch_means": report.epoch_means});
            m.write(&out)
        }
        Command::TrainStage1 {
            data,
            backbone,
            out,
            log,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let bck = Checkpoint::load_components(&backbone, &[ComponentTag::Backbone])?;
            ensure_same_vocab(&ds, &bck)?;
            let bb = BackboneModel::from_component(bck.require(ComponentTag::Backbone)?)?;
            let mut models = init_models(bb, &ds, &cfg, cfg.run.seed)?;
            let mut sink = log_sink(&log)?;
            let names = ds.train_corpus.names.clone();
            let vocab = ds.vocab.tokens().to_vec();
            let mut save = |m: &Models, step: usize| -> Result<()> {
                let ck = with_names(m.checkpoint(&cfg, &vocab, cfg.run.seed), &names);
                log::info!("checkpoint at step {step}");
                ck.save(&out)
            };
            let mut hooks = TrainHooks {
                log: sink.as_mut().map(|f| f as &mut dyn std::io::Write),
                checkpoint: Some(&mut save),
            };
            let history = train_stage1(&mut models, &ds.train, &cfg, cfg.run.seed, &mut hooks)?;
            with_names(models.checkpoint(&cfg, &vocab, cfg.run.seed), &names).save(&out)?;
            println!("stage I epoch means {:?}", history.epoch_means);
            let mut m = Manifest::new("train-stage1", &cfg).input("data", &data).input("backbone", &backbone);
            m.extra = json!({"style_table": models.style.checksum(), "backbone": models.backbone.store.checksum()});
            m.write(&out)
        }
        Command::TrainScorer { data, model, out, common } => {
            let cfg = resolve_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let ck = Checkpoint::load_components(&model, &[ComponentTag::Backbone])?;
            ensure_same_vocab(&ds, &ck)?;
            let bb = BackboneModel::from_component(ck.require(ComponentTag::Backbone)?)?;
            let (scorer, report) = train_style_classifier(&bb, &ds.train, &ds.test, ds.k(), &cfg.scorer, cfg.run.seed)?;
            scorer_checkpoint(&scorer, &bb.store.checksum(), &cfg).save(&out)?;
            println!("style classifier held-out accuracy {:.4}", report.held_out_accuracy);
            let mut m = Manifest::new("train-scorer", &cfg).input("data", &data).input("model", &model);
            m.extra = json!({"held_out_accuracy": report.held_out_accuracy});
            m.write(&out)
        }
        Command::TrainStage2 {
            data,
            model,
            scorer,
            out,
            log,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let ck = Checkpoint::load(&model)?;
            ensure_same_vocab(&ds, &ck)?;
            let mut models = Models::from_checkpoint(&ck)?;
            let scorer_path = scorer.ok_or_else(|| Error::usage("train-stage2 needs --scorer"))?;
            let sc = load_scorer(&scorer_path, &models.backbone)?;
            let mut sink = log_sink(&log)?;
            let names = ds.train_corpus.names.clone();
            let vocab = ds.vocab.tokens().to_vec();
            let mut save = |m: &Models, _step: usize| -> Result<()> {
                with_names(m.checkpoint(&cfg, &vocab, cfg.run.seed), &names).save(&out)
            };
            let mut hooks = TrainHooks {
                log: sink.as_mut().map(|f| f as &mut dyn std::io::Write),
                checkpoint: Some(&mut save),
            };
            let history = train_stage2(&mut models, Some(&sc), &ds.train, &ds.test, &cfg, cfg.run.seed, &mut hooks)?;
            with_names(models.checkpoint(&cfg, &vocab, cfg.run.seed), &names).save(&out)?;
            println!("stage II held-out losses {:?}", history.held_out_losses);
            let mut m = Manifest::new("train-stage2", &cfg)
                .input("data", &data)
                .input("model", &model)
                .input("scorer", &scorer_path);
            m.extra = json!({"plans": history.plans, "best_epoch": history.best_epoch, "style_table": models.style.checksum()});
            m.write(&out)
        }
        Command::TrainEvalModels { data, out, common } => {
            let cfg = resolve_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let em = train_eval_models(&ds, &cfg, cfg.run.seed)?;
            let mut ck = Checkpoint::new(cfg.to_json(), None, cfg.run.seed);
            ck.put(em.classifier.component());
            ck.put(em.lm.component());
            with_names(ck, &ds.train_corpus.names).save(&out)?;
            println!("evaluation classifier held-out accuracy {:.4}", em.classifier_held_out_accuracy);
            let mut m = Manifest::new("train-eval-models", &cfg).input("data", &data);
            m.extra = json!({"classifier_held_out_accuracy": em.classifier_held_out_accuracy});
            m.write(&out)
        }
        Command::Score {
            model,
            scorer,
            input,
            output,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let ck = Checkpoint::load(&model)?;
            let vocab = vocab_of(&ck)?;
            let bb = BackboneModel::from_component(ck.require(ComponentTag::Backbone)?)?;
            let sc = load_scorer(&scorer, &bb)?;
            let sentences = read_lines(&input)?
                .iter()
                .map(|l| tokenize(l, &vocab, 0, cfg.data.max_len).map(|t| t.sentence))
                .collect::<Result<Vec<_>>>()?;
            let scores = sentence_scores(&bb, &sc, &sentences)?;
            let mut text = String::new();
            for (s, a) in sentences.iter().zip(&scores) {
                let words: Vec<String> = s.raw.split_whitespace().map(str::to_lowercase).collect();
                for (j, (&t, &x)) in s.content().iter().zip(a).enumerate() {
                    let tok = words.get(j).cloned().unwrap_or_else(|| vocab.token(t).to_string());
                    text.push_str(&format!("{tok}\t{x:.6}\n"));
                }
                text.push('\n');
            }
            match &output {
                Some(p) => {
                    write_atomic(p, text.as_bytes())?;
                    Manifest::new("score", &cfg).input("model", &model).input("scorer", &scorer).input("input", &input).write(p)
                }
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
        Command::Transfer {
            model,
            from,
            to,
            weight,
            input,
            output,
            sample,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let ck = Checkpoint::load(&model)?;
            let vocab = vocab_of(&ck)?;
            let names = style_names(&ck);
            let models = Models::from_checkpoint(&ck)?;
            let req = TransferRequest {
                from: resolve_style(&names, &from)?,
                to: resolve_style(&names, &to)?,
                weight,
                max_len: cfg.transfer.max_len,
            };
            let sentences = read_lines(&input)?
                .iter()
                .map(|l| tokenize(l, &vocab, req.from, cfg.data.max_len).map(|t| t.sentence))
                .collect::<Result<Vec<_>>>()?;
            let mut rng = rng_from_seed(derive_seed(cfg.run.seed, Stream::Transfer));
            let sampler = (sample || cfg.transfer.sample).then_some(&mut rng);
            let outputs = transfer_texts(&models, &vocab, &sentences, &req, sampler)?;
            let mut body = outputs.join("\n");
            body.push('\n');
            write_atomic(&output, body.as_bytes())?;
            let mut m = Manifest::new("transfer", &cfg).input("model", &model).input("input", &input);
            m.extra = json!({"request": req, "sample": sample});
            m.write(&output)
        }
        Command::Evaluate {
            eval_models,
            input,
            source,
            to,
            output,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let (cls, lm, names) = load_eval_models(&eval_models)?;
            let hyps = fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
            let hyps: Vec<String> = hyps.lines().map(|l| l.trim().to_lowercase()).collect();
            let srcs = read_lines(&source)?;
            let srcs: Vec<String> = srcs.iter().map(|l| l.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()).collect();
            if hyps.len() != srcs.len() {
                return Err(Error::usage(format!(
                    "{} transferred lines but {} source lines",
                    hyps.len(),
                    srcs.len()
                )));
            }
            let target = resolve_style(&names, &to)?;
            let report = EvalReport::new(
                transfer_accuracy(&cls, &hyps, target)?,
                lm.perplexity(&hyps)?,
                bleu_single(&hyps, &srcs)?,
                hyps.len(),
            );
            let doc = serde_json::to_string(&report)?;
            print!("{}", report.table());
            if let Some(p) = &output {
                write_atomic(p, format!("{doc}\n").as_bytes())?;
                Manifest::new("evaluate", &cfg)
                    .input("eval_models", &eval_models)
                    .input("input", &input)
                    .input("source", &source)
                    .write(p)?;
            } else {
                println!("{doc}");
            }
            Ok(())
        }
        Command::Sweep {
            data,
            model,
            eval_models,
            weights,
            out,
            common,
        } => {
            let cfg = resolve_config(&common)?;
            let ds = load_dataset(&data, &cfg)?;
            let ck = Checkpoint::load(&model)?;
            ensure_same_vocab(&ds, &ck)?;
            let models = Models::from_checkpoint(&ck)?;
            let (cls, lm, _) = load_eval_models(&eval_models)?;
            let weights = weights.unwrap_or_else(|| cfg.transfer.weights.clone());
            let judges = Judges {
                classifier: &cls,
                lm: &lm,
            };
            let rows = sweep_style_weight(&models, &ds.vocab, &ds.test, &weights, cfg.transfer.max_len, &judges)?;
            write_atomic(&out, sweep_csv(&rows).as_bytes())?;
            print!("{}", sweep_csv(&rows));
            Manifest::new("sweep", &cfg)
                .input("data", &data)
                .input("model", &model)
                .input("eval_models", &eval_models)
                .write(&out)
        }
    }
}
