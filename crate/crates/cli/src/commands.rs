use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use dlsp_core::chgen::{ch_run, ChParams, BLEND_MEANS};
use dlsp_core::design::{self, pbil_init, pbil_run, CnnExpectedClass, FitnessFn, OracleJsc, PbilInit, PbilParams};
use dlsp_core::interpret::{interface_concentration, saliency, DEFAULT_BAND};
use dlsp_core::kv;
use dlsp_core::morpho::{
    self, augment_shift_amounts, binarize, binning_sidecar_path, encode_gray, read_pgm, split_dataset, DatasetManifest,
    LabeledSample, Morphology, Provenance, Split, DEFAULT_THRESHOLD,
};
use dlsp_core::nn::{self, history_csv, load_weights, save_weights, train, ArchSpec, CnnModel, Dataset, TrainConfig};
use dlsp_core::oracle::{self, OracleParams};
use dlsp_core::presets;
use dlsp_server::ServerConfig;

use crate::config::{parse_list, Config};
use crate::{runtime, CliError, Command, OracleFlags};

pub struct Context {
    pub config: Config,
    pub deterministic: bool,
}

pub fn dispatch(ctx: &Context, cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Generate(a) => generate(ctx, a),
        Command::Label(a) => label(ctx, a),
        Command::Split(a) => split(ctx, a),
        Command::Train(a) => train_cmd(ctx, a),
        Command::Eval(a) => eval(a),
        Command::Saliency(a) => saliency_cmd(a),
        Command::Design(a) => design_cmd(ctx, a),
        Command::Oracle(a) => oracle_cmd(ctx, a),
        Command::Serve(a) => serve(ctx, a),
    }
}

fn print_json(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json values serialize"));
}

/// Seed precedence: flag, config section, `DLSP_SEED`, 0.
fn seed(ctx: &Context, flag: Option<u64>, section: &str) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(s) = ctx.config.get(section, "seed")? {
        return Ok(s);
    }
    match std::env::var("DLSP_SEED") {
        Ok(raw) => raw
            .trim()
            .parse()
            .map_err(|_| CliError::Usage(format!("DLSP_SEED={raw:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

fn oracle_params(ctx: &Context, f: &OracleFlags) -> Result<OracleParams, CliError> {
    let c = &ctx.config;
    let d = OracleParams::default();
    let p = OracleParams {
        diffusion_length: c.pick(f.diffusion_length, "oracle", "diffusion_length", d.diffusion_length)?,
        transport_length: c.pick(f.transport_length, "oracle", "transport_length", d.transport_length)?,
        generation: c.pick(None, "oracle", "generation", d.generation)?,
        solver_tol: c.pick(f.solver_tol, "oracle", "solver_tol", d.solver_tol)?,
        solver_max_iters: c.pick(f.solver_max_iters, "oracle", "solver_max_iters", d.solver_max_iters)?,
        j_scale: c.pick(f.j_scale, "oracle", "j_scale", d.j_scale)?,
    };
    p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(p)
}

/// Hex SHA-256 of the rendered generator parameters.
pub fn param_digest(pairs: &[(String, String)]) -> String {
    Sha256::digest(kv::render(pairs).as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn generate(ctx: &Context, a: crate::GenerateArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let d = ChParams::default();
    let base_seed = seed(ctx, a.seed, "chgen")?;
    let steps = match a.snapshot_steps.or(c.get("chgen", "snapshot_steps")?) {
        Some(raw) => parse_list::<u64>(&raw).map_err(CliError::Usage)?,
        None => d.snapshot_steps.clone(),
    };
    let fixed_mean: Option<f64> = match a.blend_mean {
        Some(v) => Some(v),
        None => c.get("chgen", "blend_mean")?,
    };
    let template = ChParams {
        grid_n: c.pick(a.grid_n, "chgen", "grid_n", d.grid_n)?,
        eps2: c.pick(a.eps2, "chgen", "eps2", d.eps2)?,
        mobility: c.pick(None, "chgen", "mobility", d.mobility)?,
        dt: c.pick(a.dt, "chgen", "dt", d.dt)?,
        stabilization: c.pick(None, "chgen", "stabilization", d.stabilization)?,
        blend_mean: fixed_mean.unwrap_or(0.0),
        noise_amp: c.pick(a.noise_amp, "chgen", "noise_amp", d.noise_amp)?,
        seed: base_seed,
        snapshot_steps: steps,
        crop: c.pick(a.crop, "chgen", "crop", d.crop)?,
    };
    let shifts: Option<usize> = match a.augment_shifts {
        Some(s) => Some(s),
        None => c.get("chgen", "augment_shifts")?,
    };
    let per_seed = |s: u64| ChParams {
        seed: s,
        blend_mean: fixed_mean.unwrap_or(BLEND_MEANS[(s % BLEND_MEANS.len() as u64) as usize]),
        ..template.clone()
    };
    // validate every run before touching the file system
    for s in base_seed..base_seed + a.runs {
        per_seed(s).validate().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if a.runs == 0 {
        return Err(CliError::Usage("--runs must be at least 1".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(format!("cannot create {}: {e}", a.out.display())))?;

    let run = |s: u64| -> Result<Vec<LabeledSample>, CliError> {
        let snaps = ch_run(&per_seed(s)).map_err(|e| runtime(format!("seed {s}: {e}")))?;
        let mut rows = Vec::new();
        for snap in &snaps {
            let stem = format!("ch_{s}_{}", snap.step);
            let mut variants = vec![(format!("{stem}.pgm"), snap.morphology.clone())];
            if let Some(k) = shifts {
                variants.push((format!("{stem}_m.pgm"), snap.morphology.mirror()));
                for amount in augment_shift_amounts(snap.morphology.width(), k) {
                    variants.push((format!("{stem}_s{amount}.pgm"), snap.morphology.shift_columns(amount)));
                }
            }
            for (name, m) in variants {
                morpho::write_pgm(&a.out.join(&name), &m).map_err(runtime)?;
                rows.push(LabeledSample {
                    path: name,
                    jsc: None,
                    class_id: None,
                    split: None,
                    group: snap.group.clone(),
                });
            }
        }
        eprintln!("run seed {s}: {} images", rows.len());
        Ok(rows)
    };
    let seeds: Vec<u64> = (base_seed..base_seed + a.runs).collect();
    let per_run: Vec<Vec<LabeledSample>> = if ctx.deterministic {
        seeds.iter().map(|&s| run(s)).collect::<Result<_, _>>()?
    } else {
        seeds.par_iter().map(|&s| run(s)).collect::<Result<_, _>>()?
    };
    let mut manifest = DatasetManifest::new(per_run.concat()).map_err(runtime)?;
    let mut echo = template.to_kv();
    echo.retain(|(k, _)| k != "seed" && k != "blend_mean");
    echo.push(("blend_mean".into(), fixed_mean.map_or("by_seed".into(), |v| v.to_string())));
    echo.push(("augment_shifts".into(), shifts.map_or("none".into(), |v| v.to_string())));
    manifest.provenance = Some(Provenance {
        seed: base_seed,
        param_digest: param_digest(&echo),
    });
    let path = a.out.join("manifest.csv");
    manifest.save(&path).map_err(runtime)?;
    print_json(json!({
        "manifest": path,
        "runs": a.runs,
        "images": manifest.samples.len(),
        "param_digest": manifest.provenance.as_ref().map(|p| p.param_digest.clone()),
    }));
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, CliError> {
    require_file(path, "manifest")?;
    DatasetManifest::load(path).map_err(runtime)
}

fn class_histogram(m: &DatasetManifest) -> Vec<usize> {
    let mut h = vec![0; morpho::N_CLASSES];
    for c in m.samples.iter().filter_map(|s| s.class_id) {
        h[c as usize] += 1;
    }
    h
}

fn label(ctx: &Context, a: crate::LabelArgs) -> Result<(), CliError> {
    let p = oracle_params(ctx, &a.oracle)?;
    let m = load_manifest(&a.manifest)?;
    let labeled = oracle::label_dataset(&m, &a.manifest, &p).map_err(runtime)?;
    labeled.save(&a.manifest).map_err(runtime)?;
    let b = labeled.binning.as_ref().expect("labeling sets binning");
    print_json(json!({
        "manifest": a.manifest,
        "sidecar": binning_sidecar_path(&a.manifest),
        "labeled": labeled.samples.len(),
        "j_min": b.j_min,
        "j_max": b.j_max,
        "class_histogram": class_histogram(&labeled),
    }));
    Ok(())
}

fn split(ctx: &Context, a: crate::SplitArgs) -> Result<(), CliError> {
    let fr = parse_list::<f64>(a.fractions.as_deref().unwrap_or("0.7,0.15,0.15")).map_err(CliError::Usage)?;
    let [tr, va, te] = fr[..] else {
        return Err(CliError::Usage("--fractions needs exactly three values".into()));
    };
    let s = seed(ctx, a.seed, "train")?;
    let m = load_manifest(&a.manifest)?;
    let mut out = split_dataset(&m, (tr, va, te), s).map_err(|e| match e {
        morpho::MorphoError::InvalidFractions(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    })?;
    // bins follow the training split once it exists
    if !out.samples.is_empty() && out.samples.iter().all(|s| s.jsc.is_some()) {
        out.rebin().map_err(runtime)?;
    }
    out.save(&a.manifest).map_err(runtime)?;
    let count = |sp| out.split(sp).count();
    print_json(json!({
        "manifest": a.manifest,
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "class_histogram": class_histogram(&out),
    }));
    Ok(())
}

fn nn_err(e: nn::NnError) -> CliError {
    match e {
        nn::NnError::InvalidConfig(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    }
}

fn train_cmd(ctx: &Context, a: crate::TrainArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        learning_rate: c.pick(a.lr, "train", "learning_rate", d.learning_rate)?,
        batch_size: c.pick(a.batch_size, "train", "batch_size", d.batch_size)?,
        epochs: c.pick(a.epochs, "train", "epochs", d.epochs)?,
        seed: seed(ctx, a.seed, "train")?,
        deterministic: ctx.deterministic,
        ..d
    };
    cfg.validate().map_err(nn_err)?;
    let m = load_manifest(&a.manifest)?;
    let train_set = Dataset::from_manifest(&m, &a.manifest, Split::Train).map_err(|e| match e {
        nn::NnError::EmptySplit(_) => runtime(nn::NnError::EmptyTrainSplit),
        other => runtime(other),
    })?;
    let val_set = match Dataset::from_manifest(&m, &a.manifest, Split::Val) {
        Ok(v) => Some(v),
        Err(nn::NnError::EmptySplit(_)) => None,
        Err(e) => return Err(runtime(e)),
    };
    let arch = ArchSpec::default_classifier();
    let model = CnnModel::<f32>::build(&arch, cfg.seed).map_err(runtime)?;
    eprintln!(
        "training on {} samples ({} validation), {} parameters",
        train_set.len(),
        val_set.as_ref().map_or(0, |v| v.len()),
        model.parameter_count()
    );
    let started = std::time::Instant::now();
    let outcome = train(model, &train_set, val_set.as_ref(), &cfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  val_acc {}  ({:.0}s)",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            started.elapsed().as_secs_f64()
        )
    })
    .map_err(nn_err)?;
    save_weights(&outcome.best, &a.out).map_err(runtime)?;
    if let Some(b) = &m.binning {
        write(&a.out.with_extension("binning"), morpho::render_sidecar(Some(b), m.provenance.as_ref()))?;
    }
    if let Some(p) = &a.final_out {
        save_weights(&outcome.model, p).map_err(runtime)?;
    }
    let history_path = a.history.unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", a.out.display())));
    write(&history_path, history_csv(&outcome.history))?;
    let best = &outcome.history[outcome.best_epoch - 1];
    print_json(json!({
        "model": a.out,
        "history": history_path,
        "epochs": cfg.epochs,
        "best_epoch": outcome.best_epoch,
        "best_val_acc": best.val_acc,
        "best_train_acc": best.train_acc,
        "final_train_loss": outcome.history.last().map(|r| r.train_loss),
        "seconds": started.elapsed().as_secs_f64(),
    }));
    Ok(())
}

fn load_model(path: &Path) -> Result<CnnModel<f32>, CliError> {
    require_file(path, "model")?;
    load_weights(path, &ArchSpec::default_classifier()).map_err(runtime)
}

fn eval(a: crate::EvalArgs) -> Result<(), CliError> {
    let split: Split = a
        .split
        .as_deref()
        .unwrap_or("test")
        .parse()
        .map_err(|e: morpho::MorphoError| CliError::Usage(e.to_string()))?;
    let model = load_model(&a.model)?;
    let m = load_manifest(&a.manifest)?;
    let data = Dataset::from_manifest(&m, &a.manifest, split).map_err(runtime)?;
    let report = nn::evaluate(&model, &data).map_err(runtime)?;
    let confusion = a
        .confusion
        .unwrap_or_else(|| PathBuf::from(format!("{}.confusion.csv", a.model.display())));
    write(&confusion, report.confusion_csv())?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["samples"] = json!(data.len());
    v["split"] = json!(split.as_str());
    v["confusion_csv"] = json!(confusion);
    v["diagonally_dominant"] = json!(report.diagonally_dominant());
    print_json(v);
    Ok(())
}

fn load_image(path: &Path) -> Result<Morphology, CliError> {
    require_file(path, "image")?;
    read_pgm(path).map_err(runtime)
}

fn saliency_cmd(a: crate::SaliencyArgs) -> Result<(), CliError> {
    let model = load_model(&a.model)?;
    let m = load_image(&a.image)?;
    let s = saliency(&model, &m, a.target).map_err(|e| CliError::Usage(e.to_string()))?;
    write(&a.out, s.to_pgm())?;
    let ratio = interface_concentration(&s, &binarize(&m, DEFAULT_THRESHOLD), DEFAULT_BAND);
    print_json(json!({
        "out": a.out,
        "target_class": s.target_class,
        "interface_concentration": if ratio.is_finite() { json!(ratio) } else { json!("inf") },
    }));
    Ok(())
}

fn design_cmd(ctx: &Context, a: crate::DesignArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let d = PbilParams::default();
    let params = PbilParams {
        n: c.pick(a.n, "pbil", "n", d.n)?,
        n_b: c.pick(a.n_b, "pbil", "n_b", d.n_b)?,
        l_r: c.pick(a.l_r, "pbil", "l_r", d.l_r)?,
        mutation_prob: c.pick(a.mutation_prob, "pbil", "mutation_prob", d.mutation_prob)?,
        mutation_shift: c.pick(a.mutation_shift, "pbil", "mutation_shift", d.mutation_shift)?,
        p_min: c.pick(None, "pbil", "p_min", d.p_min)?,
        p_max: c.pick(None, "pbil", "p_max", d.p_max)?,
        smoothing_radius: c.pick(a.smoothing_radius, "pbil", "smoothing_radius", d.smoothing_radius)?,
        max_iters: c.pick(a.iters, "pbil", "max_iters", d.max_iters)?,
        improvement_tol: c.pick(a.improvement_tol, "pbil", "improvement_tol", d.improvement_tol)?,
        improvement_window: c.pick(a.improvement_window, "pbil", "improvement_window", d.improvement_window)?,
        seed: seed(ctx, a.seed, "pbil")?,
        serial: ctx.deterministic,
    };
    params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let delta = c.pick(a.delta, "pbil", "delta", 0.1)?;
    let snapshots = parse_list::<usize>(a.snapshots.as_deref().unwrap_or("10,30,50")).map_err(CliError::Usage)?;
    let init_name = a.init.unwrap_or_else(|| "bilayer".into());
    let init = if init_name == "uniform" {
        Morphology::filled(morpho::DEFAULT_SIDE, morpho::DEFAULT_SIDE, 0.5).map_err(runtime)?
    } else if let Some(b) = presets::by_name(&init_name) {
        Morphology::from(&b)
    } else {
        load_image(Path::new(&init_name))?
    };
    let model;
    let fitness: Box<dyn FitnessFn> = match a.fitness.as_deref().unwrap_or("cnn") {
        "cnn" => {
            let path = a.model.as_ref().ok_or_else(|| CliError::Usage("cnn fitness needs --model".into()))?;
            model = load_model(path)?;
            if (init.height(), init.width()) != (model.arch.height, model.arch.width) {
                return Err(CliError::Usage(format!("init image must be {}x{}", model.arch.height, model.arch.width)));
            }
            Box::new(CnnExpectedClass(&model))
        }
        "oracle" => Box::new(OracleJsc(oracle_params(ctx, &a.oracle)?)),
        other => return Err(CliError::Usage(format!("unknown fitness {other:?} (cnn or oracle)"))),
    };
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(format!("cannot create {}: {e}", a.out.display())))?;
    let state = pbil_init(PbilInit::Morphology(&init), delta, &params, fitness.as_ref()).map_err(runtime)?;
    let initial = state.best_fitness;
    let (state, snaps) = pbil_run(state, &params, fitness.as_ref(), &snapshots, |s| {
        let last = s.history.last().expect("history has the initial row");
        eprintln!("iter {:>4}  best {:.4}  elite_mean {:.4}", last.iter, last.best_fitness, last.elite_mean);
        true
    })
    .map_err(runtime)?;
    write(&a.out.join("history.csv"), design::history_csv(&state.history))?;
    for s in &snaps {
        write(&a.out.join(format!("p_{:04}.pgm", s.iteration)), encode_gray(state.height, state.width, &s.p))?;
    }
    write(&a.out.join("p_final.pgm"), encode_gray(state.height, state.width, &state.p))?;
    morpho::write_pgm(&a.out.join("best.pgm"), &Morphology::from(&state.best_sample)).map_err(runtime)?;
    print_json(json!({
        "out": a.out,
        "iterations": state.iteration,
        "initial_fitness": initial,
        "best_fitness": state.best_fitness,
        "snapshots": snaps.iter().map(|s| s.iteration).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn oracle_cmd(ctx: &Context, a: crate::OracleArgs) -> Result<(), CliError> {
    let p = oracle_params(ctx, &a.oracle)?;
    let m = load_image(&a.image)?;
    let r = oracle::evaluate(&m, &p).map_err(runtime)?;
    print_json(serde_json::to_value(&r).expect("result serializes"));
    Ok(())
}

fn serve(ctx: &Context, a: crate::ServeArgs) -> Result<(), CliError> {
    let c = &ctx.config;
    let host: String = c.pick(a.host, "serve", "host", "127.0.0.1".to_string())?;
    let port: u16 = c.pick(a.port, "serve", "port", 8080)?;
    let ip: IpAddr = host.parse().map_err(|_| CliError::Usage(format!("invalid host {host:?}")))?;
    let ui_dir = match a.ui_dir {
        Some(d) => Some(d),
        None => c.get::<String>("serve", "ui_dir")?.map(PathBuf::from),
    };
    if let Some(m) = &a.model {
        require_file(m, "model")?;
    }
    let cfg = ServerConfig {
        model_path: a.model,
        binning_path: None,
        ui_dir,
        max_jobs: c.pick(a.max_jobs, "serve", "max_jobs", 4)?,
        oracle: oracle_params(ctx, &OracleFlags::default())?,
    };
    dlsp_server::serve_blocking(cfg, SocketAddr::new(ip, port)).map_err(runtime)
}
