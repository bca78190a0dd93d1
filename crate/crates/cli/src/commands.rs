use std::fs;
use std::path::{Path, PathBuf};

use agop_core::agop::{load_diag, save_diag, AgopDiagonal, AgopHook};
use agop_core::attribution::{attribute as run_method, derive_seed, write_pgm, AttributionSettings, Method};
use agop_core::data::{
    generate_dataset, pixel_mean, read_dataset, write_dataset, Background, Sample, Scenario,
    ScenarioSpec, Split, PIXELS,
};
use agop_core::metrics::{
    energy_gt, evaluate_suite, fixed_map_miou, format_sig, format_table, miou,
    parse_report_csv, pointing_game, report_csv, SuiteConfig,
};
use agop_core::model::{build_cnn8by8, load_model, save_model, Classifier};
use agop_core::train::{history_csv, train as run_training, TrainConfig};
use agop_core::Error;

use crate::manifest::Entry;
use crate::{AttributeArgs, CliError, EvaluateArgs, GenArgs, ReportArgs, ReportFormat, TrainArgs};

pub const TRAIN_FILE: &str = "train.xtrb";
pub const TEST_FILE: &str = "test.xtrb";
pub const MODEL_FILE: &str = "model.cnn8";
pub const DIAG_FILE: &str = "agop.diag";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const HISTORY_FILE: &str = "history.csv";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn load_samples(path: &Path, entry: &mut Entry) -> Result<Vec<Sample>, CliError> {
    let samples = read_dataset(path)?;
    entry.input(path)?;
    Ok(samples)
}

fn load_optional_diag(
    path: Option<&Path>,
    entry: &mut Entry,
) -> Result<Option<AgopDiagonal>, CliError> {
    path.map(|p| {
        let d = load_diag(p)?;
        entry.input(p)?;
        Ok(d)
    })
    .transpose()
}

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    if args.out.exists() && !args.force {
        return Err(CliError::Runtime(format!(
            "{} already exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let alpha = args.alpha.unwrap_or(args.scenario.default_alpha());
    let spec = |n: usize, split: Split| ScenarioSpec {
        alpha,
        kappa: args.kappa,
        ..ScenarioSpec::new(args.scenario, args.background, n, args.seed).with_split(split)
    };
    let train = generate_dataset(&spec(args.n_train, Split::Train))?;
    let test = generate_dataset(&spec(args.n_test, Split::Test))?;

    create_dir(&args.out)?;
    let mut entry = Entry::new("gen");
    entry
        .seed(args.seed)
        .param("scenario", args.scenario.name())
        .param("background", args.background.name())
        .param("alpha", alpha)
        .param("kappa", args.kappa)
        .param("n_train", args.n_train)
        .param("n_test", args.n_test);
    for (name, samples) in [(TRAIN_FILE, &train), (TEST_FILE, &test)] {
        let path = args.out.join(name);
        write_dataset(&path, samples)?;
        entry.output(&path)?;
    }
    entry.append(&args.out)?;
    println!(
        "wrote {} train / {} test samples ({} {}, alpha {alpha}) to {}",
        train.len(),
        test.len(),
        args.scenario,
        args.background,
        args.out.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| args.data.clone());
    let model_path = out.join(MODEL_FILE);
    if model_path.exists() && !args.force {
        return Err(CliError::Runtime(format!(
            "{} already exists; pass --force to overwrite",
            model_path.display()
        )));
    }
    let mut entry = Entry::new("train");
    let train_set = load_samples(&args.data.join(TRAIN_FILE), &mut entry)?;
    let test_set = load_samples(&args.data.join(TEST_FILE), &mut entry)?;
    let config = TrainConfig {
        epochs: args.epochs,
        lr0: args.lr,
        weight_decay: args.wd,
        batch_size: args.batch,
        seed: args.seed,
        snapshot_every: args.snapshot_every,
        only_correct: args.only_correct,
    };
    config.validate()?;

    create_dir(&out)?;
    let snapshot_dir = out.join(SNAPSHOT_DIR);
    if snapshot_dir.exists() {
        fs::remove_dir_all(&snapshot_dir).map_err(|e| CliError::io(&snapshot_dir, e))?;
    }
    let stale_diag = out.join(DIAG_FILE);
    if stale_diag.exists() {
        fs::remove_file(&stale_diag).map_err(|e| CliError::io(&stale_diag, e))?;
    }

    let mut model = build_cnn8by8(args.seed);
    let mut hook = (!args.no_agop_hook)
        .then(|| AgopHook::new(PIXELS, args.only_correct).with_snapshot_dir(&snapshot_dir));
    let outcome = run_training(
        &mut model,
        &train_set,
        &test_set,
        &config,
        hook.as_mut().map(|h| h as &mut dyn agop_core::train::TrainingHook),
    )?;

    save_model(&model_path, &model)?;
    entry.output(&model_path)?;
    if let Some(h) = hook.as_mut() {
        let diag = h.finalize(outcome.steps)?;
        save_diag(&stale_diag, &diag)?;
        entry.output(&stale_diag)?;
        for snap in h.snapshots() {
            entry.output(&snapshot_dir.join(format!("agop_step{}.diag", snap.step)))?;
        }
    }
    let history_path = out.join(HISTORY_FILE);
    fs::write(&history_path, history_csv(&outcome.history))
        .map_err(|e| CliError::io(&history_path, e))?;
    entry.output(&history_path)?;

    let digest: String = outcome
        .trajectory_digest
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let last = outcome.history.last().expect("at least one epoch");
    entry
        .seed(args.seed)
        .param("epochs", args.epochs)
        .param("lr", args.lr)
        .param("wd", args.wd)
        .param("batch", args.batch)
        .param("snapshot_every", args.snapshot_every)
        .param("only_correct", args.only_correct)
        .param("agop_hook", !args.no_agop_hook)
        .param("steps", outcome.steps)
        .param("trajectory_sha256", digest.clone())
        .param("final_train_acc", last.train_acc)
        .param("final_test_acc", last.test_acc);
    entry.append(&out)?;
    println!(
        "trained {} steps: train acc {:.4}, test acc {:.4}, trajectory {digest}",
        outcome.steps, last.train_acc, last.test_acc
    );
    Ok(())
}

pub fn attribute(args: &AttributeArgs) -> Result<(), CliError> {
    let mut entry = Entry::new("attribute");
    let model = load_model(&args.model)?;
    entry.input(&args.model)?;
    let diag = load_optional_diag(args.diag.as_deref(), &mut entry)?;
    if args.method.needs_diag() && diag.is_none() {
        return Err(Error::Config(format!("method {} requires --diag", args.method)).into());
    }
    let samples = load_samples(&args.data, &mut entry)?;
    let sample = samples.get(args.index).ok_or_else(|| {
        CliError::Runtime(format!(
            "index {} out of range for {} samples",
            args.index,
            samples.len()
        ))
    })?;
    let map = run_method(
        args.method,
        &model,
        diag.as_ref(),
        &sample.image,
        &AttributionSettings::default(),
        derive_seed(args.seed, args.index as u64),
    )?;
    create_dir(&args.out)?;
    let pgm = write_pgm(&args.out, &map, args.index)?;
    entry.output(&pgm)?;
    entry
        .seed(args.seed)
        .param("method", args.method.name())
        .param("index", args.index);
    entry.append(&args.out)?;

    let energy = match energy_gt(&map.values, &sample.mask) {
        Ok(e) => format_sig(e, 6),
        Err(Error::UndefinedMass) => "undefined".to_string(),
        Err(e) => return Err(e.into()),
    };
    println!(
        "index={} label={} predicted={} pg={} miou={} energy_gt={}",
        args.index,
        sample.label,
        model.predict(&sample.image)?,
        u8::from(pointing_game(&map.values, &sample.mask)?),
        format_sig(miou(&map.values, &sample.mask)?, 6),
        energy
    );
    eprintln!(
        "{}: {:.4} ms, map written to {}",
        args.method,
        map.ms_elapsed,
        pgm.display()
    );
    Ok(())
}

fn parse_methods(list: &str) -> Result<Vec<Method>, CliError> {
    if list.trim() == "all" {
        return Ok(Method::ALL.to_vec());
    }
    let mut methods = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let m: Method = name.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Usage("no methods selected".into()));
    }
    Ok(methods)
}

fn data_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn scenario_of(args: &EvaluateArgs) -> Result<(Scenario, Background), CliError> {
    let dir = data_dir(&args.data);
    let scenario = match args.scenario {
        Some(s) => s,
        None => crate::manifest::lookup_param(&dir, "gen", "scenario")?
            .ok_or_else(|| {
                CliError::Usage("cannot tell the scenario of --data; pass --scenario".into())
            })?
            .parse()?,
    };
    let background = match args.background {
        Some(b) => b,
        None => crate::manifest::lookup_param(&dir, "gen", "background")?
            .map(|b| b.parse())
            .transpose()?
            .unwrap_or(Background::Uncorrelated),
    };
    Ok((scenario, background))
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let methods = parse_methods(&args.methods)?;
    if args.out.exists() && !args.force {
        return Err(CliError::Runtime(format!(
            "{} already exists; pass --force to overwrite",
            args.out.display()
        )));
    }
    let mut entry = Entry::new("evaluate");
    let model = load_model(&args.model)?;
    entry.input(&args.model)?;
    let diag = load_optional_diag(args.diag.as_deref(), &mut entry)?;
    if let Some(m) = methods.iter().find(|m| m.needs_diag()) {
        if diag.is_none() {
            return Err(Error::Config(format!("method {m} requires --diag")).into());
        }
    }
    let (scenario, background) = scenario_of(args)?;
    let mut samples = load_samples(&args.data, &mut entry)?;
    if let Some(n) = args.n_eval {
        samples.truncate(n);
    }
    let baseline_path = args
        .baseline_data
        .clone()
        .unwrap_or_else(|| data_dir(&args.data).join(TRAIN_FILE));
    let baseline = pixel_mean(&load_samples(&baseline_path, &mut entry)?)?;

    let cfg = SuiteConfig {
        scenario,
        background,
        seed: args.seed,
        settings: AttributionSettings::default(),
        baseline: baseline.to_vec(),
    };
    let mut records = evaluate_suite(&model, diag.as_ref(), &samples, &methods, &cfg)?;
    if args.no_timing {
        for r in &mut records {
            r.ms_per_sample = 0.0;
        }
    }
    let out_dir = data_dir(&args.out);
    create_dir(&out_dir)?;
    fs::write(&args.out, report_csv(&records)).map_err(|e| CliError::io(&args.out, e))?;
    entry.output(&args.out)?;
    entry
        .seed(args.seed)
        .param("scenario", scenario.name())
        .param("background", background.name())
        .param("methods", args.methods.clone())
        .param("n_eval", samples.len());
    entry.append(&out_dir)?;
    print!("{}", format_table(&records));
    Ok(())
}

/// Snapshot files in `dir` ordered by step.
fn snapshot_files(dir: &Path) -> Result<Vec<(u64, PathBuf)>, CliError> {
    let mut files = Vec::new();
    for item in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = item.map_err(|e| CliError::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("agop_step"))
            .and_then(|n| n.strip_suffix(".diag"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            files.push((step, path));
        }
    }
    files.sort();
    Ok(files)
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    if let Some(dir) = &args.snapshots {
        let data = args
            .data
            .as_ref()
            .ok_or_else(|| CliError::Usage("--snapshots needs --data".into()))?;
        let samples = read_dataset(data)?;
        let files = snapshot_files(dir)?;
        if files.is_empty() {
            return Err(CliError::Runtime(format!(
                "no agop_step*.diag files in {}",
                dir.display()
            )));
        }
        println!("step,agop_global_miou");
        for (step, path) in files {
            let diag = load_diag(&path)?;
            println!("{step},{}", format_sig(fixed_map_miou(&diag.values, &samples)?, 6));
        }
        return Ok(());
    }
    let input = args
        .input
        .as_ref()
        .ok_or_else(|| CliError::Usage("pass --input <report.csv> or --snapshots <dir>".into()))?;
    let text = fs::read_to_string(input).map_err(|e| CliError::io(input, e))?;
    let records = parse_report_csv(&text)?;
    match args.format {
        ReportFormat::Table => print!("{}", format_table(&records)),
        ReportFormat::Csv => print!("{text}"),
    }
    Ok(())
}
