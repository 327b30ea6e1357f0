use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use dim_core::embedding::{load_pretrained, PRETRAINED, TASK};
use dim_core::init::param_rng;
use dim_core::model::{ModelConfig, Variant};
use dim_core::tensor::Tensor;
use dim_core::text::{
    build_vocab, load_corpus, DialogueExample, Limits, PersonaSide, PersonaVersion, Vocab,
};
use dim_core::train::{
    self, attention_dump, check_vocab, evaluate, load_checkpoint, save_checkpoint,
    transfer_eval, Tables, TrainConfig, TransferData,
};
use serde_json::json;

use crate::settings::{parse_list, Settings};
use crate::Failure;

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("--{flag} is required for this command")))
}

fn usage<T: std::str::FromStr>(flag: &str, value: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Failure::Usage(format!("--{flag}: {e}")))
}

fn output_dir(s: &Settings) -> Result<PathBuf, Failure> {
    let dir = require(&s.output_dir, "output-dir")?.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn persona_side(s: &Settings) -> Result<PersonaSide, Failure> {
    s.persona_side
        .as_deref()
        .map_or(Ok(PersonaSide::Own), |v| usage("persona-side", v))
}

fn persona_version(s: &Settings) -> Result<PersonaVersion, Failure> {
    s.persona_version
        .as_deref()
        .map_or(Ok(PersonaVersion::Original), |v| usage("persona-version", v))
}

/// The requested variant; without a persona only the plain IMN applies.
fn variant(s: &Settings, side: PersonaSide) -> Result<Variant, Failure> {
    let asked: Option<Variant> = s.variant.as_deref().map(|v| usage("variant", v)).transpose()?;
    if side == PersonaSide::None {
        if let Some(v) = asked.filter(|&v| v != Variant::Imn) {
            eprintln!("note: --persona-side none selects imn (ignoring --variant {v})");
        }
        return Ok(Variant::Imn);
    }
    Ok(asked.unwrap_or(Variant::Dim))
}

fn limits(s: &Settings) -> Result<Limits, Failure> {
    let Some(text) = &s.limits else {
        return Ok(Limits::default());
    };
    let v = parse_list("limits", text).map_err(Failure::Usage)?;
    let [max_chars, max_utterance_words, max_utterances, max_response_words, max_profile_words, max_profiles] =
        v[..]
    else {
        return Err(Failure::Usage("--limits takes six comma-separated values".into()));
    };
    let l = Limits {
        max_chars,
        max_utterance_words,
        max_utterances,
        max_response_words,
        max_profile_words,
        max_profiles,
    };
    l.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(l)
}

fn train_config(s: &Settings) -> Result<TrainConfig, Failure> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: s.batch_size.unwrap_or(d.batch_size),
        lr: s.lr.unwrap_or(d.lr),
        dropout: s.dropout.unwrap_or(d.dropout),
        epochs: s.epochs.unwrap_or(d.epochs),
        max_steps: s.max_steps.or(d.max_steps),
        seed: s.seed.unwrap_or(d.seed),
        limits: limits(s)?,
        persona_side: persona_side(s)?,
        persona_version: persona_version(s)?,
        ..d
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn model_config(s: &Settings, variant: Variant, vocab: &Vocab) -> Result<ModelConfig, Failure> {
    let mut cfg = ModelConfig::full_size(
        variant,
        vocab.words.len(),
        vocab.chars.len(),
        s.seed.unwrap_or(0),
    );
    if let Some(h) = s.hidden_dim {
        cfg.hidden = h;
    }
    if let Some(m) = s.mlp_hidden {
        cfg.mlp_hidden = m;
    }
    if let Some(dims) = &s.embed_dims {
        let v = parse_list("embed-dims", dims).map_err(Failure::Usage)?;
        let [p, t] = v[..] else {
            return Err(Failure::Usage("--embed-dims takes two values, e.g. 300,100".into()));
        };
        cfg.embedding.pretrained_dim = p;
        cfg.embedding.task_dim = t;
    }
    if let Some(f) = s.char_filters {
        cfg.embedding.char_filters = f;
    }
    if let Some(w) = &s.char_windows {
        cfg.embedding.char_windows = parse_list("char-windows", w).map_err(Failure::Usage)?;
    }
    if let Some(e) = s.char_embed_dim {
        cfg.embedding.char_embed_dim = e;
    }
    // Tables are frozen only when they came from a file.
    cfg.embedding.freeze_pretrained = s.embeddings.is_some();
    cfg.embedding.freeze_task = s.task_embeddings.is_some();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Pretrained and task tables read from `--embeddings` / `--task-embeddings`.
fn tables(
    s: &Settings,
    cfg: &ModelConfig,
    vocab: &Vocab,
) -> Result<(Option<Tensor>, Option<Tensor>), Failure> {
    let read = |path: &Option<PathBuf>, flag: &str, dim: usize, name: &str| {
        let Some(path) = path else {
            return Ok(None);
        };
        if dim == 0 {
            return Err(Failure::Usage(format!("--{flag} given but its embedding width is 0")));
        }
        let mut rng = param_rng(cfg.seed, name);
        let t = load_pretrained(path, &vocab.words, dim, &mut rng)
            .with_context(|| format!("loading embeddings {}", path.display()))?;
        Ok(Some(t))
    };
    Ok((
        read(&s.embeddings, "embeddings", cfg.embedding.pretrained_dim, PRETRAINED)?,
        read(&s.task_embeddings, "task-embeddings", cfg.embedding.task_dim, TASK)?,
    ))
}

fn corpus(path: &Path, side: PersonaSide, version: PersonaVersion) -> Result<Vec<DialogueExample>, Failure> {
    Ok(load_corpus(path, side, version).with_context(|| format!("reading {}", path.display()))?)
}

fn vocabulary(s: &Settings, examples: &[DialogueExample]) -> Result<Vocab, Failure> {
    Ok(match &s.vocab {
        Some(path) => Vocab::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => build_vocab(examples, s.min_count.unwrap_or(1))?,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn train(s: &Settings) -> Result<(), Failure> {
    let train_file = require(&s.train_file, "train-file")?;
    let out = output_dir(s)?;
    let cfg = train_config(s)?;
    let variant = variant(s, cfg.persona_side)?;
    let train_set = corpus(train_file, cfg.persona_side, cfg.persona_version)?;
    let dev = s
        .dev_file
        .as_ref()
        .map(|p| corpus(p, cfg.persona_side, cfg.persona_version))
        .transpose()?;
    let vocab = vocabulary(s, &train_set)?;
    let model_cfg = model_config(s, variant, &vocab)?;
    let (pretrained, task) = tables(s, &model_cfg, &vocab)?;
    let model = dim_core::model::Model::init(model_cfg.clone(), pretrained, task)?;
    let trained = train::train(model, &cfg, &vocab, &train_set, dev.as_deref())?;

    save_checkpoint(&out.join("checkpoint.bin"), &trained.model)?;
    vocab.save(&out.join("vocab.txt"))?;
    let log = json!({
        "model_config": model_cfg,
        "train_config": cfg,
        "best_epoch": trained.log.best_epoch,
        "epochs": trained.log.epochs,
        "steps": trained.log.steps,
    });
    write(&out.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
    let last = trained.log.epochs.last();
    println!(
        "trained {variant}: {} steps, best epoch {}, final loss {:.4}",
        trained.log.steps.len(),
        trained.log.best_epoch,
        last.map_or(f64::NAN, |e| e.mean_loss)
    );
    if let Some(h) = trained.log.epochs.get(trained.log.best_epoch).and_then(|e| e.dev_hits_at_1) {
        println!("dev hits@1 {h:.4}");
    }
    Ok(())
}

pub fn eval(s: &Settings) -> Result<(), Failure> {
    let ckpt = require(&s.checkpoint, "checkpoint")?;
    let vocab_path = require(&s.vocab, "vocab")?;
    let test_file = require(&s.test_file, "test-file")?;
    let out = output_dir(s)?;
    let cfg = train_config(s)?;
    let model = load_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let vocab = Vocab::load(vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?;
    check_vocab(&model, &vocab)?;
    let test = corpus(test_file, cfg.persona_side, cfg.persona_version)?;
    let report = evaluate(&model, &vocab, &test, cfg.limits, cfg.batch_size)?;
    write(&out.join("report.txt"), report.summary())?;
    write(&out.join("ranks.jsonl"), report.jsonl()?)?;
    print!("{}", report.summary());
    Ok(())
}

pub fn ablate(s: &Settings) -> Result<(), Failure> {
    let train_file = require(&s.train_file, "train-file")?;
    let test_file = require(&s.test_file, "test-file")?;
    let out = output_dir(s)?;
    let cfg = train_config(s)?;
    if cfg.persona_side == PersonaSide::None {
        return Err(Failure::Usage("ablate needs a persona (--persona-side self|their)".into()));
    }
    let train_set = corpus(train_file, cfg.persona_side, cfg.persona_version)?;
    let dev = s
        .dev_file
        .as_ref()
        .map(|p| corpus(p, cfg.persona_side, cfg.persona_version))
        .transpose()?;
    let test = corpus(test_file, cfg.persona_side, cfg.persona_version)?;
    let vocab = vocabulary(s, &train_set)?;
    let base = model_config(s, Variant::Dim, &vocab)?;
    let (pretrained, task) = tables(s, &base, &vocab)?;
    let tables = Tables {
        pretrained: pretrained.as_ref(),
        task: task.as_ref(),
    };
    let results = train::ablate(&base, tables, &cfg, &vocab, &train_set, dev.as_deref(), &test)?;
    let mut summary = String::new();
    for (variant, report) in &results {
        report.write(&out, &format!("ablate_{variant}"))?;
        writeln!(summary, "{variant} hits@1 {:.6} mrr {:.6}", report.hits_at_1, report.mrr)
            .expect("writing to a String");
    }
    write(&out.join("ablate.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// The revised-persona counterpart of an original-persona file.
fn revised_path(path: &Path) -> Result<PathBuf, Failure> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .filter(|n| n.contains("original"))
        .ok_or_else(|| {
            Failure::Runtime(anyhow!(
                "cannot derive a revised file from {} (name lacks \"original\")",
                path.display()
            ))
        })?;
    let revised = path.with_file_name(name.replace("original", "revised"));
    if !revised.exists() {
        return Err(Failure::Runtime(anyhow!(
            "data error: revised persona file {} not found",
            revised.display()
        )));
    }
    Ok(revised)
}

pub fn transfer(s: &Settings) -> Result<(), Failure> {
    let train_file = require(&s.train_file, "train-file")?;
    let test_file = require(&s.test_file, "test-file")?;
    let out = output_dir(s)?;
    let cfg = train_config(s)?;
    if cfg.persona_side == PersonaSide::None {
        return Err(Failure::Usage("transfer needs a persona (--persona-side self|their)".into()));
    }
    let side = cfg.persona_side;
    let (orig, rev) = (PersonaVersion::Original, PersonaVersion::Revised);
    let pair = |path: &Path| -> Result<[Vec<DialogueExample>; 2], Failure> {
        Ok([corpus(path, side, orig)?, corpus(&revised_path(path)?, side, rev)?])
    };
    let train_sets = pair(train_file)?;
    let test_sets = pair(test_file)?;
    let dev = match &s.dev_file {
        Some(p) => {
            let [a, b] = pair(p)?;
            [Some(a), Some(b)]
        }
        None => [None, None],
    };
    let vocab = match &s.vocab {
        Some(_) => vocabulary(s, &[])?,
        None => build_vocab(&[train_sets[0].clone(), train_sets[1].clone()].concat(), s.min_count.unwrap_or(1))?,
    };
    let variant = variant(s, side)?;
    let base = model_config(s, variant, &vocab)?;
    let (pretrained, task) = tables(s, &base, &vocab)?;
    let data = TransferData {
        train: train_sets,
        dev,
        test: test_sets,
    };
    let cells = transfer_eval(
        &base,
        Tables {
            pretrained: pretrained.as_ref(),
            task: task.as_ref(),
        },
        &cfg, &vocab, &data)?;
    let mut grid = String::from("train\\test original revised\n");
    for row in cells.chunks(2) {
        write!(grid, "{}", row[0].train_version).expect("writing to a String");
        for cell in row {
            write!(grid, " {:.6}", cell.report.hits_at_1).expect("writing to a String");
        }
        grid.push('\n');
    }
    write(&out.join("transfer.json"), serde_json::to_string_pretty(&cells)?)?;
    write(&out.join("transfer.txt"), &grid)?;
    print!("{grid}");
    Ok(())
}

pub fn attn_dump(s: &Settings) -> Result<(), Failure> {
    let ckpt = require(&s.checkpoint, "checkpoint")?;
    let vocab_path = require(&s.vocab, "vocab")?;
    let test_file = require(&s.test_file, "test-file")?;
    let id = *require(&s.example_id, "example-id")?;
    let out = output_dir(s)?;
    let cfg = train_config(s)?;
    let model = load_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let vocab = Vocab::load(vocab_path).with_context(|| format!("reading {}", vocab_path.display()))?;
    check_vocab(&model, &vocab)?;
    let test = corpus(test_file, cfg.persona_side, cfg.persona_version)?;
    let example = test.get(id).ok_or_else(|| {
        anyhow!("example {id} not found ({} examples in {})", test.len(), test_file.display())
    })?;
    let dump = attention_dump(&model, &vocab, example, id, cfg.limits, s.candidate)?;
    let path = out.join(format!("attention_{id}.json"));
    write(&path, serde_json::to_string_pretty(&dump)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn vocab(s: &Settings) -> Result<(), Failure> {
    let train_file = require(&s.train_file, "train-file")?;
    let out = output_dir(s)?;
    let examples = corpus(train_file, persona_side(s)?, persona_version(s)?)?;
    let vocab = build_vocab(&examples, s.min_count.unwrap_or(1))?;
    vocab.save(&out.join("vocab.txt"))?;
    println!("{} words, {} characters", vocab.words.len(), vocab.chars.len());
    Ok(())
}
