//! `forgeloc` command-line entry point.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use forgeloc::config::RunConfig;
use forgeloc::datagen::{make_dataset, write_dataset, Dataset};
use forgeloc::imgproc::{distort, guided_noise, Distortion, Image};
use forgeloc::metrics::evaluate;
use forgeloc::network::{gradcheck_model, GradcheckOptions, Model, ModelConfig, PreparedSample, Trainer};
use serde_json::{json, Value};

const CHECKPOINT: &str = "checkpoint.fgln";

#[derive(Parser)]
#[command(name = "forgeloc", version, about = "Image forgery localization: data, training, evaluation and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic split under `out_dir/split`.
    GenData(Settings),
    /// Train on `train_data`, writing train.tsv and a checkpoint per epoch.
    Train(Settings),
    /// Score a checkpoint on `eval_data`, optionally under `distort` specs.
    Eval(Settings),
    /// Write the predicted probability mask of one image as PGM.
    Localize {
        image: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Write the guided-noise view of one image.
    Noise {
        image: PathBuf,
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Apply one distortion (`resize:F`, `blur:K`, `noise:S`, `jpeg:Q`) to an image.
    Distort {
        image: PathBuf,
        out: PathBuf,
        spec: String,
        #[command(flatten)]
        settings: Settings,
    },
    /// Finite-difference check of every parameter of the miniature model.
    Gradcheck(Settings),
}

#[derive(Args)]
struct Settings {
    /// `--config FILE` followed by any `--key value` overrides.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    pairs: Vec<String>,
}

/// Marks errors that should exit with status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(e: forgeloc::Error) -> anyhow::Error {
    match e {
        forgeloc::Error::Config(msg) => Usage(msg).into(),
        other => other.into(),
    }
}

fn split_pairs(pairs: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = pairs.iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").ok_or_else(|| Usage(format!("expected --key, got {arg:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Usage(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

/// Effective settings: `base`, then the config file, then overrides. Keys in
/// `extra` are returned separately instead of being applied.
fn resolve(base: RunConfig, settings: &Settings, extra: &[&str]) -> anyhow::Result<(RunConfig, BTreeMap<String, String>)> {
    let pairs = split_pairs(&settings.pairs)?;
    let mut cfg = base;
    for (k, v) in pairs.iter().filter(|(k, _)| k == "config") {
        let text = fs::read_to_string(v).with_context(|| format!("reading config file {v}"))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| Usage(format!("{v}:{}: expected key=value, got {line:?}", n + 1)))?;
            cfg.set(key.trim(), value.trim()).map_err(usage).with_context(|| format!("in {k} file {v}"))?;
        }
    }
    let mut extras = BTreeMap::new();
    for (k, v) in pairs.into_iter().filter(|(k, _)| k != "config") {
        if extra.contains(&k.as_str()) {
            extras.insert(k, v);
        } else {
            cfg.set(&k, &v).map_err(usage)?;
        }
    }
    Ok((cfg, extras))
}

fn parse_extra<T: std::str::FromStr>(extras: &BTreeMap<String, String>, key: &str, default: T) -> anyhow::Result<T> {
    match extras.get(key) {
        Some(v) => v.parse().map_err(|_| Usage(format!("{key}: cannot parse {v:?}")).into()),
        None => Ok(default),
    }
}

fn run_json(command: &str, cfg: &RunConfig, extra: Value) -> Value {
    json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": cfg.echo(),
        "extra": extra,
    })
}

fn write_json(path: &Path, value: &Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `out.pgm` -> `out.pgm.json`.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn gen_data(settings: &Settings) -> anyhow::Result<()> {
    let (cfg, _) = resolve(RunConfig::default(), settings, &[])?;
    let spec = cfg.dataset_spec().map_err(usage)?;
    let samples = make_dataset(&spec)?;
    let dir = write_dataset(&cfg.out_dir, &cfg.split, &samples)?;
    write_json(&dir.join("run.json"), &run_json("gen-data", &cfg, json!({ "samples": samples.len() })))?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

fn train(settings: &Settings) -> anyhow::Result<()> {
    let (cfg, _) = resolve(RunConfig::default(), settings, &[])?;
    let tc = cfg.train_config().map_err(usage)?;
    let data = cfg.train_data.clone().ok_or_else(|| Usage("train_data is required".into()))?;
    let ds = Dataset::open(&data).with_context(|| format!("opening dataset {}", data.display()))?;
    let model = Model::new(cfg.model.clone(), tc.seed).map_err(usage)?;
    let samples = (0..ds.len())
        .map(|i| {
            let (img, mask) = ds.load(i)?;
            model.prepare(&img, Some(&mask))
        })
        .collect::<forgeloc::Result<Vec<PreparedSample>>>()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("run.json"), &run_json("train", &cfg, json!({ "samples": samples.len() })))?;
    let mut log = BufWriter::new(File::create(cfg.out_dir.join("train.tsv"))?);
    writeln!(log, "epoch\tstep\tlr\tloss")?;
    let mut io_error = None;
    let checkpoint = cfg.out_dir.join(CHECKPOINT);
    let mut trainer = Trainer::new(model, tc)?;
    let result = trainer.fit(
        &samples,
        |r| {
            if let Err(e) = writeln!(log, "{}\t{}\t{:?}\t{:?}", r.epoch, r.step, r.lr, r.loss) {
                io_error.get_or_insert(e);
            }
        },
        |epoch, model| {
            model.save(&checkpoint)?;
            eprintln!("epoch {} done, checkpoint {}", epoch + 1, checkpoint.display());
            Ok(())
        },
    );
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e).context("writing train.tsv");
    }
    result?;
    println!("trained {} steps; checkpoint {}", trainer.steps_taken(), checkpoint.display());
    Ok(())
}

fn load_checkpoint(cfg: &mut RunConfig) -> anyhow::Result<Model> {
    let path = cfg.checkpoint.clone().ok_or_else(|| Usage("checkpoint is required".into()))?;
    let model = Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    cfg.model = model.config.clone();
    Ok(model)
}

fn eval(settings: &Settings) -> anyhow::Result<()> {
    let (mut cfg, _) = resolve(RunConfig::default(), settings, &[])?;
    let model = load_checkpoint(&mut cfg)?;
    let data = cfg.eval_data.clone().ok_or_else(|| Usage("eval_data is required".into()))?;
    let ds = Dataset::open(&data).with_context(|| format!("opening dataset {}", data.display()))?;
    let sweep: Vec<Option<Distortion>> = cfg.distortions.iter().copied().map(Some).collect();
    let report = evaluate(&model, &ds, &sweep, &cfg.eval_options())?;
    fs::create_dir_all(&cfg.out_dir)?;
    report.write(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("run.json"), &run_json("eval", &cfg, json!({ "images": ds.len() })))?;
    print!("{}", report.summary_tsv());
    Ok(())
}

fn localize(image: &Path, out: &Path, settings: &Settings) -> anyhow::Result<()> {
    let (mut cfg, _) = resolve(RunConfig::default(), settings, &[])?;
    let model = load_checkpoint(&mut cfg)?;
    let img = Image::read(image).with_context(|| format!("reading {}", image.display()))?;
    let mask = model.predict(&img).with_context(|| format!("localizing {}", image.display()))?;
    mask.write(out)?;
    write_json(&sidecar(out), &run_json("localize", &cfg, json!({ "image": image, "out": out })))?;
    Ok(())
}

fn noise(image: &Path, out: &Path, settings: &Settings) -> anyhow::Result<()> {
    let (cfg, extras) = resolve(RunConfig::default(), settings, &["r", "eps"])?;
    let r = parse_extra(&extras, "r", cfg.model.gf_radius)?;
    let eps = parse_extra(&extras, "eps", cfg.model.gf_eps)?;
    let img = Image::read(image).with_context(|| format!("reading {}", image.display()))?;
    guided_noise(&img, r, eps).map_err(usage)?.noise.write(out)?;
    write_json(&sidecar(out), &run_json("noise", &cfg, json!({ "image": image, "r": r, "eps": eps })))?;
    Ok(())
}

fn distort_cmd(image: &Path, out: &Path, spec: &str, settings: &Settings) -> anyhow::Result<()> {
    let (cfg, _) = resolve(RunConfig::default(), settings, &[])?;
    let d: Distortion = spec.parse().map_err(|e: forgeloc::Error| Usage(e.to_string()))?;
    let seed = cfg.seed.unwrap_or(0);
    let img = Image::read(image).with_context(|| format!("reading {}", image.display()))?;
    distort(&img, d, seed)?.write(out)?;
    write_json(&sidecar(out), &run_json("distort", &cfg, json!({ "image": image, "distortion": d.to_string(), "seed": seed })))?;
    Ok(())
}

/// Returns whether every parameter passed.
fn gradcheck(settings: &Settings) -> anyhow::Result<bool> {
    let base = RunConfig { model: ModelConfig::miniature(), ..RunConfig::default() };
    let (cfg, extras) = resolve(base, settings, &["corrupt", "corrupt_by", "only", "h", "tol", "floor"])?;
    let defaults = GradcheckOptions::default();
    let opts = GradcheckOptions {
        model: cfg.model.clone(),
        seed: cfg.seed.unwrap_or(defaults.seed),
        corrupt: extras.get("corrupt").cloned(),
        corrupt_by: parse_extra(&extras, "corrupt_by", defaults.corrupt_by)?,
        only: extras.get("only").cloned(),
        h: parse_extra(&extras, "h", defaults.h)?,
        tol: parse_extra(&extras, "tol", defaults.tol)?,
        floor: parse_extra(&extras, "floor", defaults.floor)?,
    };
    let report = gradcheck_model(&opts).map_err(usage)?;
    let mut table = String::from("module\tworst_param\tindex\tanalytic\tnumeric\trel_error\tfailing_entries\n");
    for (module, p) in report.worst_per_module() {
        let failing: usize = report.params.iter().filter(|q| q.name.split('.').next() == Some(module.as_str())).map(|q| q.failures).sum();
        table.push_str(&format!(
            "{module}\t{}\t{}\t{:e}\t{:e}\t{:.3e}\t{failing}\n",
            p.name, p.worst_index, p.analytic, p.numeric, p.worst_error
        ));
    }
    let failed: Vec<&str> = report.params.iter().filter(|p| p.failures > 0).map(|p| p.name.as_str()).collect();
    print!("{table}");
    println!(
        "{} {}/{} parameters within relative tolerance {:e}",
        if failed.is_empty() { "PASS" } else { "FAIL" },
        report.params.len() - failed.len(),
        report.params.len(),
        opts.tol
    );
    for name in &failed {
        println!("failed\t{name}");
    }
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("gradcheck.tsv"), &table)?;
    let extra = json!({ "corrupt": opts.corrupt, "only": opts.only, "h": opts.h, "tol": opts.tol, "floor": opts.floor, "passed": failed.is_empty() });
    write_json(&cfg.out_dir.join("run.json"), &run_json("gradcheck", &cfg, extra))?;
    Ok(failed.is_empty())
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::GenData(s) => gen_data(s)?,
        Command::Train(s) => train(s)?,
        Command::Eval(s) => eval(s)?,
        Command::Localize { image, out, settings } => localize(image, out, settings)?,
        Command::Noise { image, out, settings } => noise(image, out, settings)?,
        Command::Distort { image, out, spec, settings } => distort_cmd(image, out, spec, settings)?,
        Command::Gradcheck(s) => return gradcheck(s),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Usage>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(args: &[&str]) -> Settings {
        Settings { pairs: args.iter().map(|s| s.to_string()).collect() }
    }

    #[test]
    fn pairs_accept_both_forms() {
        let p = split_pairs(&settings(&["--seed", "3", "--noise-branch=off"]).pairs).unwrap();
        assert_eq!(p, vec![("seed".into(), "3".into()), ("noise_branch".into(), "off".into())]);
        assert!(split_pairs(&settings(&["seed"]).pairs).is_err());
        assert!(split_pairs(&settings(&["--seed"]).pairs).is_err());
    }

    #[test]
    fn overrides_beat_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "seed=1\nlr=0.001\n").unwrap();
        let s = settings(&["--lr", "0.002", "--config", file.to_str().unwrap(), "--r", "3"]);
        let (cfg, extra) = resolve(RunConfig::default(), &s, &["r"]).unwrap();
        assert_eq!(cfg.seed, Some(1));
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(extra["r"], "3");
    }

    #[test]
    fn unknown_key_is_a_usage_error() {
        let err = resolve(RunConfig::default(), &settings(&["--sede", "1"]), &[]).unwrap_err();
        assert!(err.chain().any(|c| c.is::<Usage>()));
    }

    #[test]
    fn sidecar_appends_json() {
        assert_eq!(sidecar(Path::new("a/m.pgm")), PathBuf::from("a/m.pgm.json"));
    }
}
