use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ace_core::dataio::{
    parse_cifar10, split_files, tile_sheet, write_png, write_synthetic_cifar, Dataset, Split,
    RECORDS_PER_FILE, RECORD_LEN,
};
use ace_core::generator::{
    interpolate, perturbation_grid, zero_drift_baseline, GridCell, GridSpec,
};
use ace_core::gradcore::{AdamState, Checkpoint, ParamStore, Tensor};
use ace_core::laplace::sample;
use ace_core::model::{Bands, Level, Model, LATENT_DIM};
use ace_core::pyramid::ImageShape;
use ace_core::rng::{stream, CounterRng};
use ace_core::trainer::{
    median, mse, reconstruct, train_run, DriftRegistry, EpochMetrics, Start, METRICS_HEADER,
};
use ace_core::Error;

use crate::config::Config;
use crate::manifest::ManifestBuilder;
use crate::{CliError, CliResult, Command, Common, Set};

pub const ENV_DATA_DIR: &str = "ACE_DATA_DIR";

const GUTTER: usize = 2;
/// Sheet width of the reconstruction panels, in images.
const PANEL_COLS: usize = 15;

/// Dataset directory: the flag, else the environment, else the config.
pub fn data_dir(
    flag: Option<&Path>,
    env: Option<OsString>,
    config: Option<&Path>,
) -> CliResult<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| config.map(Path::to_path_buf))
        .ok_or_else(|| {
            CliError::Usage(format!(
                "no dataset directory: pass --data-dir, set {ENV_DATA_DIR} or add data_dir to the config"
            ))
        })
}

fn resolve_data_dir(common: &Common, config: Option<&Path>) -> CliResult<PathBuf> {
    data_dir(
        common.data_dir.as_deref(),
        std::env::var_os(ENV_DATA_DIR),
        config,
    )
}

fn read(path: &Path) -> ace_core::Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> ace_core::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// The first `count` records of a split, hashing every file touched.
fn load_data(
    dir: &Path,
    split: Split,
    count: usize,
    downscale: usize,
    m: &mut ManifestBuilder,
) -> CliResult<Dataset> {
    if count == 0 {
        return Err(CliError::Usage(
            "at least one observation must be requested".into(),
        ));
    }
    let files = split_files(dir, split)?;
    let needed = count.div_ceil(RECORDS_PER_FILE);
    if files.len() < needed {
        return Err(Error::invalid(format!(
            "{count} records requested but {} holds only {}",
            dir.display(),
            files.len() * RECORDS_PER_FILE
        ))
        .into());
    }
    let mut records = Vec::with_capacity(count * RECORD_LEN);
    for (k, path) in files[..needed].iter().enumerate() {
        let bytes = read(path)?;
        if bytes.len() != RECORDS_PER_FILE * RECORD_LEN {
            return Err(Error::format(
                "CIFAR-10 batch",
                format!("{} has {} bytes", path.display(), bytes.len()),
            )
            .into());
        }
        let name = path.file_name().unwrap_or_default().to_string_lossy();
        m.input(&format!("data:{name}"), &bytes);
        let take = (count - k * RECORDS_PER_FILE).min(RECORDS_PER_FILE);
        records.extend_from_slice(&bytes[..take * RECORD_LEN]);
    }
    let (images, labels) = parse_cifar10(&records)?;
    let data = Dataset::new(ImageShape::CIFAR, images, labels)?;
    Ok(if downscale > 1 {
        data.downscale(downscale)?
    } else {
        data
    })
}

fn load_checkpoint(path: &Path, m: &mut ManifestBuilder) -> CliResult<(Checkpoint, Model)> {
    let bytes = read(path)?;
    m.input("checkpoint", &bytes);
    let c = Checkpoint::from_bytes(&bytes)?;
    let model = Model::from_params(c.params.clone())?;
    Ok((c, model))
}

fn load_registry(path: &Path, m: &mut ManifestBuilder) -> CliResult<DriftRegistry> {
    let bytes = read(path)?;
    m.input("registry", &bytes);
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::format("drift registry", "file is not UTF-8 text"))?;
    Ok(DriftRegistry::from_csv(&text)?)
}

fn meta_count(params: &ParamStore, name: &str) -> Option<usize> {
    params
        .buffers
        .get(name)
        .and_then(|t| t.data().first().copied())
        .map(|v| v as usize)
}

/// Training-set size recorded by the trainer.
fn train_count(params: &ParamStore) -> CliResult<usize> {
    meta_count(params, "meta.train_count").ok_or_else(|| {
        Error::format(
            "checkpoint",
            "no meta.train_count record; was it written by train?",
        )
        .into()
    })
}

fn run_tag(params: &ParamStore) -> String {
    meta_count(params, "meta.run").map_or_else(String::new, |r| format!("_run{r}"))
}

fn downscale_of(model: &Model) -> usize {
    ImageShape::CIFAR.side / model.spec.image.side
}

fn write_file(path: &Path, bytes: &[u8], m: &mut ManifestBuilder) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    m.artifact(path);
    Ok(())
}

fn write_image(
    images: &[Tensor],
    cols: usize,
    path: &Path,
    m: &mut ManifestBuilder,
) -> CliResult<()> {
    write_png(&tile_sheet(images, cols, GUTTER)?, path)?;
    m.artifact(path);
    Ok(())
}

fn save_checkpoint(
    params: &ParamStore,
    adam: &AdamState,
    run: u32,
    path: &Path,
    m: &mut ManifestBuilder,
) -> CliResult<()> {
    let mut params = params.clone();
    params
        .buffers
        .insert("meta.run".into(), Tensor::vector(vec![run as f64]));
    let c = Checkpoint {
        params,
        adam: adam.clone(),
    };
    write_file(path, &c.to_bytes(), m)
}

fn check_index(index: usize, n: usize, what: &str) -> CliResult<()> {
    if index < n {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{what} {index} is outside the {n}-observation training set"
        )))
    }
}

pub fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            run,
            config,
            registry,
            checkpoint,
            common,
        } => train(
            run,
            &config,
            registry.as_deref(),
            checkpoint.as_deref(),
            &common,
        ),
        Command::ExtractDrifts { checkpoint, common } => extract(&checkpoint, &common),
        Command::Reconstruct {
            checkpoint,
            set,
            first,
            seed,
            common,
        } => reconstruct_sheet(&checkpoint, set, first, seed, &common),
        Command::Generate {
            checkpoint,
            registry,
            center,
            span,
            n,
            common,
        } => generate(&checkpoint, &registry, center, grid(span, n)?, &common),
        Command::Interpolate {
            checkpoint,
            registry,
            from,
            to,
            steps,
            common,
        } => interpolation(&checkpoint, &registry, from, to, steps, &common),
        Command::Baseline {
            checkpoint,
            class,
            span,
            n,
            out,
        } => baseline(&checkpoint, class, grid(span, n)?, &out),
        Command::SynthData { seed, out } => synth(seed, &out),
    }
}

fn grid(span: f64, n: usize) -> CliResult<GridSpec> {
    let spec = GridSpec {
        n_per_axis: n,
        span,
        varied_level: Level::Coarse,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

fn train(
    run: u32,
    config_path: &Path,
    registry: Option<&Path>,
    checkpoint: Option<&Path>,
    common: &Common,
) -> CliResult<()> {
    match (run, registry, checkpoint) {
        (0, _, _) => return Err(CliError::Usage("--run counts from 1".into())),
        (1, None, None) => {}
        (1, _, _) => {
            return Err(CliError::Usage(
                "run 1 starts from scratch; --registry and --checkpoint belong to later runs"
                    .into(),
            ))
        }
        (r, None, _) => {
            return Err(CliError::Usage(format!(
                "train --run {r} needs --registry with the previous run's drifts"
            )))
        }
        (r, _, None) => {
            return Err(CliError::Usage(format!(
                "train --run {r} needs --checkpoint with the previous run's parameters"
            )))
        }
        _ => {}
    }
    let text = read(config_path)?;
    let cfg = Config::parse(
        std::str::from_utf8(&text)
            .map_err(|_| Error::format("config", "file is not UTF-8 text"))?,
    )?;
    let dir = resolve_data_dir(common, cfg.data_dir.as_deref())?;
    let out = &common.out;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("train", out);
    m.seed(cfg.seed);
    m.settings(cfg.echo());
    m.setting("run", run);
    m.input("config", &text);
    let data = load_data(&dir, Split::Train, cfg.train_count, cfg.downscale, &mut m)?;

    let start = match checkpoint {
        None => Start::Fresh {
            spec: cfg.model_spec(),
            init_seed: cfg.init_seed,
        },
        Some(p) => Start::Resume(load_checkpoint(p, &mut m)?.0),
    };
    let targets = registry.map(|p| load_registry(p, &mut m)).transpose()?;
    let tc = cfg.train_config(run);

    let metrics_path = out.join(format!("metrics_run{run}.csv"));
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(log, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let mut periodic = Vec::new();
    let outcome = train_run(
        &tc,
        &data,
        start,
        targets.as_ref(),
        |e: &EpochMetrics, model: &Model, adam: &AdamState| {
            writeln!(log, "{}", e.to_csv_line()).map_err(|err| Error::io(&metrics_path, err))?;
            let done = e.epoch + 1;
            if cfg.checkpoint_every > 0
                && done.is_multiple_of(cfg.checkpoint_every)
                && done < tc.epochs
            {
                let p = out.join(format!("checkpoint_run{run}_epoch{done:03}.ace"));
                let mut params = model.params.clone();
                params
                    .buffers
                    .insert("meta.run".into(), Tensor::vector(vec![run as f64]));
                Checkpoint {
                    params,
                    adam: adam.clone(),
                }
                .save(&p)?;
                periodic.push(p);
            }
            Ok(())
        },
    )?;
    drop(log);
    m.artifact(&metrics_path);
    for p in &periodic {
        m.artifact(p);
    }

    save_checkpoint(
        &outcome.model.params,
        &outcome.adam,
        run,
        &out.join(format!("checkpoint_run{run}.ace")),
        &mut m,
    )?;
    let registry_path = out.join(format!("registry_run{run}.csv"));
    write_file(&registry_path, outcome.registry.to_csv().as_bytes(), &mut m)?;

    let mut dom = String::from("batch,index,label,weight\n");
    for (b, &i) in outcome.dominant.iter().enumerate() {
        dom.push_str(&format!(
            "{b},{i},{},{:.16e}\n",
            data.labels[i], outcome.final_weights[i]
        ));
    }
    write_file(
        &out.join(format!("dominant_run{run}.csv")),
        dom.as_bytes(),
        &mut m,
    )?;

    let mut weights = String::from("index,label,weight\n");
    for (i, w) in outcome.final_weights.iter().enumerate() {
        weights.push_str(&format!("{i},{},{w:.16e}\n", data.labels[i]));
    }
    write_file(
        &out.join(format!("weights_run{run}.csv")),
        weights.as_bytes(),
        &mut m,
    )?;

    if let Some(errs) = &outcome.initial_generative {
        let mut s = String::from("index,generative\n");
        for (i, e) in errs.iter().enumerate() {
            s.push_str(&format!("{i},{e:.16e}\n"));
        }
        write_file(
            &out.join(format!("initial_generative_run{run}.csv")),
            s.as_bytes(),
            &mut m,
        )?;
    }
    m.write()?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "run {run}: {} epochs, final weighted total {:.6e}; outputs in {}",
            tc.epochs,
            last.weighted_total,
            out.display()
        );
    }
    Ok(())
}

fn extract(checkpoint: &Path, common: &Common) -> CliResult<()> {
    let out = &common.out;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("extract-drifts", out);
    let (c, model) = load_checkpoint(checkpoint, &mut m)?;
    let n = train_count(&c.params)?;
    let dir = resolve_data_dir(common, None)?;
    let data = load_data(&dir, Split::Train, n, downscale_of(&model), &mut m)?;
    m.setting("train_count", n);
    m.setting("downscale", downscale_of(&model));
    let registry = ace_core::trainer::extract_drifts(&model, &data)?;
    write_file(
        &out.join("registry.csv"),
        registry.to_csv().as_bytes(),
        &mut m,
    )?;
    m.write()?;
    println!(
        "{} registry rows for {n} observations",
        registry.len() * 2 * LATENT_DIM
    );
    Ok(())
}

/// Per observation: a re-sample at the posterior, the reconstruction and
/// the raw image, stacked as three panels in that order from the top.
fn reconstruct_sheet(
    checkpoint: &Path,
    set: Set,
    first: usize,
    seed: u64,
    common: &Common,
) -> CliResult<()> {
    let out = &common.out;
    create_dir(out)?;
    let name = match set {
        Set::Train => "train",
        Set::Test => "test",
    };
    let mut m = ManifestBuilder::new("reconstruct", out);
    m.seed(seed);
    m.setting("set", name);
    m.setting("first", first);
    let (_, model) = load_checkpoint(checkpoint, &mut m)?;
    let dir = resolve_data_dir(common, None)?;
    let split = match set {
        Set::Train => Split::Train,
        Set::Test => Split::Test,
    };
    let data = load_data(&dir, split, first, downscale_of(&model), &mut m)?;
    let bands = Bands::of(&data)?;
    let rng = CounterRng::new(seed);

    let cols = first.min(PANEL_COLS);
    let padded = first.div_ceil(cols) * cols;
    let blank = Tensor::zeros(&[data.shape.channels, data.shape.side, data.shape.side]);
    let mut panels = [Vec::new(), Vec::new(), Vec::new()];
    let mut table = String::from("index,label,mse\n");
    let mut errors = Vec::with_capacity(first);
    for i in 0..first {
        let class = data.labels[i];
        let post = model.posterior(
            bands.band(Level::Residual, i),
            bands.band(Level::Coarse, i),
            class,
        )?;
        let mut z = [[0.0; LATENT_DIM]; 2];
        for level in Level::ALL {
            for d in 0..LATENT_DIM {
                let u = rng.latent_uniform(stream::RESAMPLE, 0, i, level.number(), d);
                z[level.index()][d] = sample(u, post[level.index()][d].laplace())?;
            }
        }
        let recon = reconstruct(&model, &data, &bands, i)?;
        let e = mse(recon.data(), data.pixels(i));
        if !e.is_finite() {
            return Err(Error::NonFinite(format!("reconstruction MSE of observation {i}")).into());
        }
        errors.push(e);
        table.push_str(&format!("{i},{class},{e:.16e}\n"));
        panels[0].push(model.decode_image(z, class)?);
        panels[1].push(recon);
        panels[2].push(data.image(i));
    }
    let mut tiles = Vec::with_capacity(3 * padded);
    for mut p in panels {
        p.resize(padded, blank.clone());
        tiles.extend(p);
    }
    write_image(
        &tiles,
        cols,
        &out.join(format!("reconstruct_{name}.png")),
        &mut m,
    )?;
    write_file(
        &out.join(format!("reconstruct_{name}_mse.csv")),
        table.as_bytes(),
        &mut m,
    )?;
    m.write()?;
    println!(
        "{name}: median reconstruction MSE {:.6e} over {first} observations",
        median(&errors)
    );
    Ok(())
}

/// Writes one PNG per cell plus `index.csv` into `dir`, and the tiled sheet
/// next to it as `dir.png`.
fn write_grid(
    cells: &[GridCell],
    spec: &GridSpec,
    dir: &Path,
    m: &mut ManifestBuilder,
) -> CliResult<()> {
    create_dir(dir)?;
    let mut index = String::from("row,col,gx,gy,file\n");
    for c in cells {
        let file = format!("r{:02}_c{:02}.png", c.row, c.col);
        write_image(std::slice::from_ref(&c.image), 1, &dir.join(&file), m)?;
        index.push_str(&format!(
            "{},{},{:?},{:?},{file}\n",
            c.row, c.col, c.gx, c.gy
        ));
    }
    write_file(&dir.join("index.csv"), index.as_bytes(), m)?;
    let images: Vec<Tensor> = cells.iter().map(|c| c.image.clone()).collect();
    write_image(&images, spec.n_per_axis, &dir.with_extension("png"), m)
}

fn labels_for(
    model: &Model,
    params: &ParamStore,
    common: &Common,
    m: &mut ManifestBuilder,
) -> CliResult<Vec<u8>> {
    let n = train_count(params)?;
    let dir = resolve_data_dir(common, None)?;
    Ok(load_data(&dir, Split::Train, n, downscale_of(model), m)?.labels)
}

fn generate(
    checkpoint: &Path,
    registry: &Path,
    center: usize,
    spec: GridSpec,
    common: &Common,
) -> CliResult<()> {
    let out = &common.out;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("generate", out);
    m.setting("center", center);
    m.setting("span", spec.span);
    m.setting("n", spec.n_per_axis);
    m.setting("varied_level", spec.varied_level.number());
    let (c, model) = load_checkpoint(checkpoint, &mut m)?;
    let registry = load_registry(registry, &mut m)?;
    let labels = labels_for(&model, &c.params, common, &mut m)?;
    check_index(center, labels.len(), "--center")?;
    let cells = perturbation_grid(&model, &spec, &registry, center, labels[center])?;
    let dir = out.join(format!("center{center}{}", run_tag(&c.params)));
    write_grid(&cells, &spec, &dir, &mut m)?;
    m.write()?;
    println!(
        "{} images around observation {center} in {}",
        cells.len(),
        dir.display()
    );
    Ok(())
}

fn interpolation(
    checkpoint: &Path,
    registry: &Path,
    from: usize,
    to: usize,
    steps: usize,
    common: &Common,
) -> CliResult<()> {
    if steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    let out = &common.out;
    create_dir(out)?;
    let mut m = ManifestBuilder::new("interpolate", out);
    m.setting("from", from);
    m.setting("to", to);
    m.setting("steps", steps);
    let (c, model) = load_checkpoint(checkpoint, &mut m)?;
    let registry = load_registry(registry, &mut m)?;
    let labels = labels_for(&model, &c.params, common, &mut m)?;
    check_index(from, labels.len(), "--from")?;
    check_index(to, labels.len(), "--to")?;
    let images = interpolate(
        &model,
        &registry,
        (from, labels[from]),
        (to, labels[to]),
        steps,
    )?;

    let dir = out.join(format!("interp_{from}_{to}{}", run_tag(&c.params)));
    create_dir(&dir)?;
    let mut index = String::from("step,t,file\n");
    for (k, img) in images.iter().enumerate() {
        let file = format!("step{k:02}.png");
        write_image(std::slice::from_ref(img), 1, &dir.join(&file), &mut m)?;
        index.push_str(&format!("{k},{:?},{file}\n", k as f64 / (steps - 1) as f64));
    }
    write_file(&dir.join("index.csv"), index.as_bytes(), &mut m)?;
    write_image(&images, steps, &dir.with_extension("png"), &mut m)?;
    m.write()?;
    println!("{steps} images from {from} to {to} in {}", dir.display());
    Ok(())
}

fn baseline(checkpoint: &Path, class: u8, spec: GridSpec, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    let mut m = ManifestBuilder::new("baseline", out);
    m.setting("class", class);
    m.setting("span", spec.span);
    m.setting("n", spec.n_per_axis);
    m.setting("varied_level", spec.varied_level.number());
    let (c, model) = load_checkpoint(checkpoint, &mut m)?;
    if class as usize >= model.spec.num_classes {
        return Err(CliError::Usage(format!(
            "--class {class} outside 0..{}",
            model.spec.num_classes
        )));
    }
    let cells = zero_drift_baseline(&model, &spec, class)?;
    let dir = out.join(format!("baseline_class{class}{}", run_tag(&c.params)));
    write_grid(&cells, &spec, &dir, &mut m)?;
    m.write()?;
    println!(
        "{} images around the zero latent in {}",
        cells.len(),
        dir.display()
    );
    Ok(())
}

fn synth(seed: u64, out: &Path) -> CliResult<()> {
    write_synthetic_cifar(out, seed)?;
    let mut m = ManifestBuilder::new("synth-data", out);
    m.seed(seed);
    for name in ["data_batch_1.bin", "test_batch.bin"] {
        m.artifact(&out.join(name));
    }
    m.write()?;
    println!("synthetic CIFAR-10 batches in {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_dir_precedence() {
        let (f, e, c) = (
            Path::new("/flag"),
            OsString::from("/env"),
            Path::new("/cfg"),
        );
        assert_eq!(data_dir(Some(f), Some(e.clone()), Some(c)).unwrap(), f);
        assert_eq!(
            data_dir(None, Some(e.clone()), Some(c)).unwrap(),
            Path::new("/env")
        );
        assert_eq!(data_dir(None, Some(OsString::new()), Some(c)).unwrap(), c);
        assert_eq!(data_dir(None, None, Some(c)).unwrap(), c);
        assert!(matches!(
            data_dir(None, None, None),
            Err(CliError::Usage(_))
        ));
    }
}
