use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use acort::accountant::{emit_tables, reference_suite_configs};
use acort::decoding::generate;
use acort::eval::{clip_to_second_lowest, evaluate, layer_distance_matrix, rms_matrix, write_matrix_csv, FeatureOptions};
use acort::model::{build_model, CaptionerModel, Regions};
use acort::toy_world::{generate_dataset, read_jsonl, scene_regions, write_jsonl, Scene};
use acort::train::{build_codec, config_for_codec, save_metrics_csv, train_with_progress, TrainOptions};
use acort::vocab::{TokenCodec, TokenStream, WordVocab};

use crate::config::{load_run_config, RunConfig};
use crate::{
    CaptionArgs, CountArgs, DecodeArgs, EncodeArgs, EvaluateArgs, GenDataArgs, LayerDistArgs, TablesArgs, TrainArgs,
    VocabArgs,
};

pub type Result<T> = std::result::Result<T, String>;

fn err<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> String {
    move |e| format!("{context}: {e}")
}

/// Writes to `path`, or stdout when there is none.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(err(p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let file = File::open(path).map_err(err(path.display()))?;
    read_jsonl(BufReader::new(file)).map_err(err(path.display()))
}

fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let file = File::create(path).map_err(err(path.display()))?;
    write_jsonl(BufWriter::new(file), scenes).map_err(err(path.display()))
}

fn read_vocab(path: &Path) -> Result<WordVocab> {
    let file = File::open(path).map_err(err(path.display()))?;
    WordVocab::read_tsv(BufReader::new(file)).map_err(err(path.display()))
}

fn write_vocab(path: &Path, vocab: &WordVocab) -> Result<()> {
    let file = File::create(path).map_err(err(path.display()))?;
    vocab.write_tsv(BufWriter::new(file)).map_err(err(path.display()))
}

/// Train, validation and test scenes for a run.
fn dataset(run: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>, Vec<Scene>)> {
    match &run.data.path {
        Some(dir) => Ok((
            read_scenes(&dir.join("train.jsonl"))?,
            read_scenes(&dir.join("val.jsonl"))?,
            read_scenes(&dir.join("test.jsonl"))?,
        )),
        None => Ok(generate_dataset(run.data.seed, run.data.n_train, run.data.n_val, run.data.n_test)),
    }
}

fn features(run: &RunConfig) -> FeatureOptions {
    FeatureOptions {
        noise: run.data.noise,
        seed: run.data.feature_seed,
    }
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut data = match &args.config {
        Some(path) => load_run_config(path)?.data,
        None => Default::default(),
    };
    if let Some(seed) = args.seed {
        data.seed = seed;
    }
    data.n_train = args.n_train.unwrap_or(data.n_train);
    data.n_val = args.n_val.unwrap_or(data.n_val);
    data.n_test = args.n_test.unwrap_or(data.n_test);
    if data.n_train == 0 || data.n_val == 0 || data.n_test == 0 {
        return Err("every split needs at least one scene".into());
    }
    std::fs::create_dir_all(&args.out).map_err(err(args.out.display()))?;
    let (train, val, test) = generate_dataset(data.seed, data.n_train, data.n_val, data.n_test);
    for (name, scenes) in [("train", &train), ("val", &val), ("test", &test)] {
        write_scenes(&args.out.join(format!("{name}.jsonl")), scenes)?;
    }
    eprintln!(
        "wrote {} / {} / {} scenes to {}",
        train.len(),
        val.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

pub fn build_vocab(args: &VocabArgs) -> Result<()> {
    let scenes = read_scenes(&args.data)?;
    let captions: Vec<String> = scenes.iter().map(Scene::caption_text).collect();
    let vocab = WordVocab::build(&captions, args.min_frequency).map_err(err(args.data.display()))?;
    let mut out = output(args.out.as_deref())?;
    vocab.write_tsv(&mut out).map_err(err("vocabulary"))?;
    out.flush().map_err(err("vocabulary"))?;
    eprintln!("{} words, <UNK> included", vocab.len());
    Ok(())
}

fn codec_from(vocab: &Path, radix_base: usize) -> Result<TokenCodec> {
    TokenCodec::new(read_vocab(vocab)?, radix_base).map_err(err("codec"))
}

pub fn encode(args: &EncodeArgs) -> Result<()> {
    let codec = codec_from(&args.vocab, args.radix_base)?;
    let words: Vec<&str> = args.text.iter().flat_map(|t| t.split_whitespace()).collect();
    if args.strict {
        if let Some(unknown) = words.iter().find(|w| codec.word_vocab().index_of(w).is_none()) {
            return Err(format!("word {unknown:?} is not in the vocabulary"));
        }
    }
    let stream = codec.encode_caption(&words).map_err(err("encode"))?;
    println!("{}", stream.to_text());
    Ok(())
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let codec = codec_from(&args.vocab, args.radix_base)?;
    let stream = TokenStream::parse(&args.tokens.join(" "), codec.mode()).map_err(err("decode"))?;
    let words = codec.decode_stream(&stream, args.strict).map_err(err("decode"))?;
    println!("{}", words.join(" "));
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut run = load_run_config(&args.config)?;
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(base) = args.radix_base {
        run.model.radix_base = base;
    }
    if let Some(epochs) = args.epochs {
        run.train.epochs = epochs;
    }
    let (train_set, val, _) = dataset(&run)?;
    let codec = build_codec(&train_set, run.model.radix_base, run.train.min_frequency).map_err(err("vocabulary"))?;
    let cfg = config_for_codec(&run.model, &codec);
    if cfg.vocab_size != run.model.vocab_size {
        eprintln!(
            "vocab_size {} in config replaced by {} from the training captions",
            run.model.vocab_size, cfg.vocab_size
        );
    }
    run.model = cfg.clone();

    std::fs::create_dir_all(&args.out).map_err(err(args.out.display()))?;
    let opts = TrainOptions {
        epochs: run.train.epochs,
        batch_size: run.train.batch_size,
        lr_peak: run.train.lr_peak,
        warmup_steps: run.train.warmup_steps,
        seed: run.train.seed,
        features: features(&run),
        target_exact_match: run.train.target_exact_match,
        checkpoint_dir: Some(args.out.join("checkpoints")),
        eval_beam: 1,
    };
    let result = train_with_progress(&cfg, codec, &train_set, &val, &opts, |r| {
        eprintln!(
            "epoch {:>3}  step {:>6}  loss {:.4}  exact {:.3}  bleu4 {:.3}  ({:.1}s)",
            r.epoch, r.step, r.loss, r.exact_match, r.bleu4, r.seconds
        )
    })
    .map_err(err("train"))?;

    result.model.save(&args.out.join("model.ckpt")).map_err(err("checkpoint"))?;
    write_vocab(&args.out.join("vocab.tsv"), result.codec.word_vocab())?;
    save_metrics_csv(&args.out.join("metrics.csv"), &result.history).map_err(err("metrics"))?;
    let json = serde_json::to_string_pretty(&run).map_err(err("config"))?;
    std::fs::write(args.out.join("run.json"), json + "\n").map_err(err("config"))?;
    eprintln!(
        "best validation exact match {:.3} at epoch {}; model in {}",
        result.best_exact_match,
        result.best_epoch,
        args.out.display()
    );
    Ok(())
}

/// A trained model directory as written by `train`.
struct Trained {
    run: RunConfig,
    codec: TokenCodec,
    model: CaptionerModel,
}

fn load_trained(dir: &Path) -> Result<Trained> {
    let run = load_run_config(&dir.join("run.json"))?;
    let codec = codec_from(&dir.join("vocab.tsv"), run.model.radix_base)?;
    let model = build_model(&run.model, 0).map_err(err("model"))?;
    let ckpt = dir.join("model.ckpt");
    model.load(&ckpt).map_err(err(ckpt.display()))?;
    Ok(Trained { run, codec, model })
}

fn scenes_for(trained: &Trained, data: Option<&PathBuf>) -> Result<Vec<Scene>> {
    match data {
        Some(path) => read_scenes(path),
        None => Ok(dataset(&trained.run)?.2),
    }
}

pub fn caption(args: &CaptionArgs) -> Result<()> {
    let trained = load_trained(&args.model)?;
    let scenes = scenes_for(&trained, args.data.as_ref())?;
    let beam = args.beam_size.unwrap_or(trained.run.eval.beam_size);
    let dim = trained.run.model.feature_dim;
    let regions: Vec<Regions> = scenes
        .iter()
        .map(|s| scene_regions(s, dim, trained.run.data.noise, trained.run.data.feature_seed))
        .collect();
    let refs: Vec<&Regions> = regions.iter().collect();
    let hyps = generate(&trained.model, &refs, &trained.codec, beam, trained.run.eval.max_len).map_err(err("caption"))?;
    let mut out = output(args.out.as_deref())?;
    for (scene, hyp) in scenes.iter().zip(hyps) {
        let stream = TokenStream::new(hyp.tokens, trained.codec.mode());
        let text = trained.codec.caption_from_tokens(&stream).map_err(err("caption"))?;
        writeln!(out, "{}\t{}", scene.id, text).map_err(err("caption"))?;
    }
    out.flush().map_err(err("caption"))
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let trained = load_trained(&args.model)?;
    let scenes = scenes_for(&trained, args.data.as_ref())?;
    let beam = args.beam_size.unwrap_or(trained.run.eval.beam_size);
    let training: HashSet<String> = dataset(&trained.run)?.0.iter().map(Scene::caption_text).collect();
    let e = evaluate(&trained.model, &trained.codec, &scenes, features(&trained.run), &training, beam)
        .map_err(err("evaluate"))?;
    let mut out = output(args.out.as_deref())?;
    let io = err::<std::io::Error>("evaluate");
    writeln!(out, "scenes,exact_match,bleu1,bleu2,bleu3,bleu4,unique_frac,avg_len").map_err(io)?;
    writeln!(
        out,
        "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.3}",
        scenes.len(),
        e.exact_match,
        e.bleu[0],
        e.bleu[1],
        e.bleu[2],
        e.bleu[3],
        e.stats.unique_fraction,
        e.stats.avg_word_count
    )
    .map_err(err("evaluate"))?;
    out.flush().map_err(err("evaluate"))
}

pub fn count(args: &CountArgs) -> Result<()> {
    let mut run = load_run_config(&args.config)?;
    if let Some(base) = args.radix_base {
        run.model.radix_base = base;
        run.model.validate().map_err(err("config"))?;
    }
    let name = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let mut out = output(args.out.as_deref())?;
    out.write_all(emit_tables(&[(name, run.model)]).as_bytes()).map_err(err("count"))?;
    out.flush().map_err(err("count"))
}

pub fn tables(args: &TablesArgs) -> Result<()> {
    let mut out = output(args.out.as_deref())?;
    out.write_all(emit_tables(&reference_suite_configs()).as_bytes()).map_err(err("tables"))?;
    out.flush().map_err(err("tables"))
}

pub fn layer_dist(args: &LayerDistArgs) -> Result<()> {
    let trained = load_trained(&args.model)?;
    let d = layer_distance_matrix(&trained.model).map_err(err("layer-dist"))?;
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(err(dir.display()))?;
            for (stack, m) in [("encoder", &d.encoder), ("decoder", &d.decoder)] {
                for (kind, grid) in [("msd", m.clone()), ("rms", rms_matrix(m)), ("clipped", clip_to_second_lowest(m))] {
                    let path = dir.join(format!("{stack}.{kind}.csv"));
                    let file = File::create(&path).map_err(err(path.display()))?;
                    write_matrix_csv(BufWriter::new(file), &grid).map_err(err(path.display()))?;
                }
            }
            eprintln!("wrote distance grids to {}", dir.display());
        }
        None => {
            let mut out = output(None)?;
            let io = |e: std::io::Error| format!("layer-dist: {e}");
            writeln!(out, "# encoder").map_err(io)?;
            write_matrix_csv(&mut out, &d.encoder).map_err(io)?;
            writeln!(out, "# decoder").map_err(io)?;
            write_matrix_csv(&mut out, &d.decoder).map_err(io)?;
            out.flush().map_err(io)?;
        }
    }
    Ok(())
}
