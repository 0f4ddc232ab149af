//! The five experiment commands plus dataset format conversion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use scbch::dataset::{self, FileFormat, MultimodalDataset};
use scbch::error::{Error, Result};
use scbch::losses::jaccard_matrix;
use scbch::model::{HashModel, Modality};
use scbch::ndmath::Matrix;
use scbch::retrieval::{
    build_runs, cross_modal_map_from_runs, precision_recall_curve, Direction, PrMode, RetrievalRun,
};
use scbch::trainer::{train, AblationFlags, TrainOutcome};

use crate::config::ExperimentConfig;

pub struct Printer {
    pub quiet: bool,
}

impl Printer {
    pub fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

/// Loads the dataset file and applies the config's split and noise.
fn prepare_dataset(config: &ExperimentConfig) -> Result<MultimodalDataset> {
    let path = config.dataset_path();
    let mut ds = dataset::load_features(&path)?;
    ds.assign_splits(
        config.split.query_fraction,
        config.split.retrieval_fraction,
        config.split.seed,
    )?;
    ds.inject_noise(&config.noise)?;
    Ok(ds)
}

pub fn cmd_generate(config: &ExperimentConfig, printer: &Printer) -> Result<()> {
    config.synthetic.validate()?;
    let ds = dataset::generate_synthetic(&config.synthetic)?;
    std::fs::create_dir_all(&config.out_dir)?;
    let path = config.dataset_path();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dataset::save_features(&ds, &path, config.dataset_format())?;
    config.snapshot(&config.out_dir)?;

    printer.say(format!(
        "wrote {} ({} samples, {} classes, image dim {}, text dim {})",
        path.display(),
        ds.len(),
        ds.num_classes(),
        ds.image_dim(),
        ds.text_dim()
    ));
    let hist = ds.cardinality_histogram();
    for (k, count) in hist.iter().enumerate() {
        if *count > 0 {
            printer.say(format!("  {k} active labels: {count} samples"));
        }
    }
    let mut class_counts = vec![0usize; ds.num_classes()];
    for i in 0..ds.len() {
        for (c, &v) in ds.clean_labels.row(i).iter().enumerate() {
            if v != 0.0 {
                class_counts[c] += 1;
            }
        }
    }
    printer.say(format!("  per-class counts: {class_counts:?}"));
    Ok(())
}

/// Bins confidence weights into a fixed histogram split by the noise mask.
fn weight_histogram_csv(weights: &[(usize, f64)], mask: &[bool]) -> String {
    const BINS: usize = 20;
    let mut clean = [0usize; BINS];
    let mut noisy = [0usize; BINS];
    for &(id, w) in weights {
        let bin = ((w * BINS as f64) as usize).min(BINS - 1);
        if mask[id] {
            noisy[bin] += 1;
        } else {
            clean[bin] += 1;
        }
    }
    let mut out = String::from("bin_lo,bin_hi,clean_count,noisy_count\n");
    for b in 0..BINS {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            b as f64 / BINS as f64,
            (b + 1) as f64 / BINS as f64,
            clean[b],
            noisy[b]
        );
    }
    out
}

fn write_train_outputs(
    config: &ExperimentConfig,
    outcome: &TrainOutcome,
    mask: Option<&[bool]>,
    printer: &Printer,
) -> Result<()> {
    std::fs::create_dir_all(&config.out_dir)?;
    let ckpt = config.out_dir.join("checkpoint.json");
    outcome.state.model.save(&ckpt)?;
    std::fs::write(config.out_dir.join("metrics.csv"), outcome.log.to_csv())?;
    if let Some(map_csv) = outcome.log.map_csv() {
        std::fs::write(config.out_dir.join("map_per_epoch.csv"), map_csv)?;
    }
    if let Some(mask) = mask {
        for snapshot in &outcome.log.weight_snapshots {
            let csv = weight_histogram_csv(&snapshot.weights, mask);
            std::fs::write(
                config
                    .out_dir
                    .join(format!("weights_epoch_{}.csv", snapshot.epoch)),
                csv,
            )?;
        }
    }
    config.snapshot(&config.out_dir)?;
    printer.say(format!("checkpoint: {}", ckpt.display()));
    if let Some(final_map) = &outcome.final_map {
        printer.say(format!(
            "final-epoch query MAP: I2T {:.4} T2I {:.4} avg {:.4}",
            final_map.i2t.map,
            final_map.t2i.map,
            final_map.average()
        ));
    }
    if let Some((epoch, map)) = outcome.best_epoch_map {
        printer.say(format!("best-epoch-on-query MAP: {map:.4} at epoch {epoch}"));
    }
    Ok(())
}

pub fn cmd_train(config: &ExperimentConfig, printer: &Printer) -> Result<()> {
    config.validate()?;
    let ds = prepare_dataset(config)?;
    let outcome = train(&ds, &config.train)?;
    write_train_outputs(config, &outcome, ds.noise_mask.as_deref(), printer)?;
    Ok(())
}

fn report_line(
    direction: Direction,
    code_length: usize,
    noise_rate: f64,
    map: f64,
    num_queries: usize,
    zero_relevant: usize,
) -> String {
    format!(
        "direction={direction} L={code_length} noise_rate={noise_rate} MAP={map} num_queries={num_queries} zero_relevant={zero_relevant}"
    )
}

fn pr_csv(run: &RetrievalRun, mode: PrMode) -> Result<String> {
    let mut out = String::from("cutoff,recall,precision\n");
    for p in precision_recall_curve(run, mode)? {
        let _ = writeln!(out, "{},{},{}", p.cutoff, p.recall, p.precision);
    }
    Ok(out)
}

pub fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    printer: &Printer,
) -> Result<()> {
    let ckpt_path = checkpoint
        .map(PathBuf::from)
        .unwrap_or_else(|| config.out_dir.join("checkpoint.json"));
    let model = HashModel::load(&ckpt_path)?;
    let ds = prepare_dataset(config)?;
    if model.image_config.input_dim != ds.image_dim()
        || model.text_config.input_dim != ds.text_dim()
        || model.num_classes != ds.num_classes()
    {
        return Err(Error::config(format!(
            "checkpoint expects image {}, text {}, {} classes; dataset has image {}, text {}, {} classes",
            model.image_config.input_dim,
            model.text_config.input_dim,
            model.num_classes,
            ds.image_dim(),
            ds.text_dim(),
            ds.num_classes()
        )));
    }

    let (i2t, t2i) = build_runs(&model, &ds)?;
    let maps = cross_modal_map_from_runs(&i2t, &t2i, config.map_cutoff())?;
    std::fs::create_dir_all(&config.out_dir)?;
    let mut report = String::new();
    for (run, result) in [(&i2t, &maps.i2t), (&t2i, &maps.t2i)] {
        report.push_str(&report_line(
            run.direction,
            model.code_length(),
            config.noise.rate,
            result.map,
            result.num_queries,
            result.zero_relevant,
        ));
        report.push('\n');
    }
    let _ = writeln!(report, "map_avg={}", maps.average());
    std::fs::write(config.out_dir.join("report.txt"), &report)?;
    std::fs::write(
        config.out_dir.join("pr_i2t.csv"),
        pr_csv(&i2t, config.eval.pr_mode)?,
    )?;
    std::fs::write(
        config.out_dir.join("pr_t2i.csv"),
        pr_csv(&t2i, config.eval.pr_mode)?,
    )?;
    config.snapshot(&config.out_dir)?;
    printer.say(report.trim_end());
    Ok(())
}

/// One sweep cell: the axis values that vary across the grid.
#[derive(Debug, Clone)]
pub struct SweepAxes {
    pub noise_rates: Vec<f64>,
    pub code_lengths: Vec<usize>,
    pub ablations: Vec<String>,
    pub xis: Vec<f64>,
    pub margins: Vec<f64>,
}

pub fn parse_ablation(name: &str) -> Result<AblationFlags> {
    let mut flags = AblationFlags::default();
    match name {
        "none" => {}
        "cscc" => flags.disable_cscc = true,
        "bsch" => flags.disable_bsch = true,
        "weighting" => flags.disable_weighting = true,
        "attraction" => flags.disable_attraction = true,
        other => {
            return Err(Error::config(format!(
                "unknown ablation `{other}` (expected none, cscc, bsch, weighting, attraction)"
            )))
        }
    }
    Ok(flags)
}

pub fn cmd_sweep(
    config: &ExperimentConfig,
    axes: &SweepAxes,
    workers: usize,
    printer: &Printer,
) -> Result<()> {
    config.validate()?;
    for name in &axes.ablations {
        parse_ablation(name)?;
    }
    let base_dataset = Arc::new(dataset::load_features(&config.dataset_path())?);
    let base_seed = config.seed.unwrap_or(42);

    struct Cell {
        index: usize,
        noise_rate: f64,
        code_length: usize,
        ablation: String,
        xi: f64,
        margin: f64,
    }
    let mut cells = Vec::new();
    let mut index = 0usize;
    for &noise_rate in &axes.noise_rates {
        for &code_length in &axes.code_lengths {
            for ablation in &axes.ablations {
                for &xi in &axes.xis {
                    for &margin in &axes.margins {
                        cells.push(Cell {
                            index,
                            noise_rate,
                            code_length,
                            ablation: ablation.clone(),
                            xi,
                            margin,
                        });
                        index += 1;
                    }
                }
            }
        }
    }

    let total = cells.len();
    let results: Arc<Mutex<Vec<Option<String>>>> = Arc::new(Mutex::new(vec![None; total]));
    let cells = Arc::new(Mutex::new(cells));
    let workers = workers.max(1).min(total.max(1));

    let run_cell = |cell: &Cell| -> Result<(f64, f64, u64)> {
        let started = Instant::now();
        let mut cfg = config.clone();
        cfg.seed = Some(base_seed.wrapping_add(cell.index as u64));
        cfg.apply_master_seed();
        cfg.noise.rate = cell.noise_rate;
        cfg.train.code_length = cell.code_length;
        cfg.train.ablation = parse_ablation(&cell.ablation)?;
        cfg.train.xi = cell.xi;
        cfg.train.margin = cell.margin;
        cfg.train.track_map = false;
        cfg.train.validate()?;

        let mut ds = (*base_dataset).clone();
        ds.assign_splits(
            cfg.split.query_fraction,
            cfg.split.retrieval_fraction,
            cfg.split.seed,
        )?;
        ds.inject_noise(&cfg.noise)?;
        let outcome = train(&ds, &cfg.train)?;
        let maps = scbch::retrieval::evaluate_model(&outcome.state.model, &ds, cfg.map_cutoff())?;
        Ok((maps.i2t.map, maps.t2i.map, started.elapsed().as_millis() as u64))
    };

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let cells = Arc::clone(&cells);
            let results = Arc::clone(&results);
            let run_cell = &run_cell;
            scope.spawn(move || loop {
                let cell = {
                    let mut queue = cells.lock().expect("queue lock");
                    match queue.pop() {
                        Some(c) => c,
                        None => break,
                    }
                };
                let row = match run_cell(&cell) {
                    Ok((i2t, t2i, ms)) => format!(
                        "{},{},{},{},{},{},{},{},{},ok",
                        cell.noise_rate,
                        cell.code_length,
                        cell.ablation,
                        cell.xi,
                        cell.margin,
                        i2t,
                        t2i,
                        (i2t + t2i) / 2.0,
                        ms
                    ),
                    Err(e) => {
                        // Keep the row parseable: no commas inside the status.
                        let msg = e.to_string().replace(',', ";");
                        format!(
                            "{},{},{},{},{},nan,nan,nan,0,error: {msg}",
                            cell.noise_rate, cell.code_length, cell.ablation, cell.xi, cell.margin
                        )
                    }
                };
                results.lock().expect("results lock")[cell.index] = Some(row);
            });
        }
    });

    let mut csv =
        String::from("noise_rate,code_length,ablation,xi,margin,map_i2t,map_t2i,map_avg,runtime_ms,status\n");
    for row in results.lock().expect("results lock").iter() {
        csv.push_str(row.as_deref().expect("every cell produced a row"));
        csv.push('\n');
    }
    std::fs::create_dir_all(&config.out_dir)?;
    std::fs::write(config.out_dir.join("sweep.csv"), &csv)?;
    config.snapshot(&config.out_dir)?;
    printer.say(format!(
        "{total} sweep cells written to {}",
        config.out_dir.join("sweep.csv").display()
    ));
    Ok(())
}

fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt() + 1e-12)
}

pub fn cmd_diagnose(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    sample_count: usize,
    printer: &Printer,
) -> Result<()> {
    let ckpt_path = checkpoint
        .map(PathBuf::from)
        .unwrap_or_else(|| config.out_dir.join("checkpoint.json"));
    let model = HashModel::load(&ckpt_path)?;
    let ds = dataset::load_features(&config.dataset_path())?;
    if sample_count > ds.len() {
        return Err(Error::config(format!(
            "sample count {} exceeds dataset size {}",
            sample_count,
            ds.len()
        )));
    }

    // Seeded subset, reproducible from the config alone.
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed.unwrap_or(42));
    let mut ids: Vec<usize> = (0..ds.len()).collect();
    ids.shuffle(&mut rng);
    ids.truncate(sample_count);
    ids.sort_unstable();

    let labels = ds.clean_labels.select_rows(&ids);
    let r = jaccard_matrix(&labels);
    let h1 = model.forward(Modality::Image, &ds.image.select_rows(&ids))?;
    let h2 = model.forward(Modality::Text, &ds.text.select_rows(&ids))?;
    let s = scbch::losses::cross_modal_similarity_matrix(
        &h1,
        &h2,
        config.train.similarity_scaling,
    )?;

    std::fs::create_dir_all(&config.out_dir)?;
    std::fs::write(config.out_dir.join("r_matrix.csv"), matrix_csv(&r))?;
    std::fs::write(config.out_dir.join("s_matrix.csv"), matrix_csv(&s))?;
    config.snapshot(&config.out_dir)?;

    let mut rs = Vec::new();
    let mut ss = Vec::new();
    for i in 0..r.rows() {
        for j in 0..r.cols() {
            if i != j {
                rs.push(r.get(i, j));
                ss.push(s.get(i, j));
            }
        }
    }
    printer.say(format!(
        "wrote {0}/r_matrix.csv and {0}/s_matrix.csv ({1} samples); off-diagonal Pearson r = {2:.4}",
        config.out_dir.display(),
        sample_count,
        pearson(&rs, &ss)
    ));
    Ok(())
}

pub fn cmd_convert(input: &Path, output: &Path, format: FileFormat, printer: &Printer) -> Result<()> {
    let ds = dataset::load_features(input)?;
    dataset::save_features(&ds, output, format)?;
    printer.say(format!(
        "converted {} -> {} ({:?})",
        input.display(),
        output.display(),
        format
    ));
    Ok(())
}
