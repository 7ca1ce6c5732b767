use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use qdz::nn::Network;
use qdz::recipe::{test_accuracy, Recipe};
use qdz::sizing::{read_container, write_container, Container, Encoding, SizeReport};
use qdz::stats::{study_row, write_study_csv, NoiseStudyConfig};
use qdz::train::{network_from_container, network_to_container, EpochRecord, QuantizedModel};

use crate::config::{Config, DATA_KEYS};
use crate::{CliError, Command, Invocation, VERSION};

pub const SUMMARY_HEADER: [&str; 9] = [
    "method",
    "bits",
    "accuracy",
    "full_precision_bits",
    "quantized_bits",
    "huffman_bits",
    "gain_plain",
    "gain_huffman",
    "weight_gain",
];

const REPORT_ORDER: [Command; 5] = [
    Command::TrainTeacher,
    Command::TrainStudent,
    Command::QuantizePm,
    Command::QuantizeDistill,
    Command::QuantizeDiff,
];

pub fn summary_path(out: &Path, command: Command) -> PathBuf {
    out.join(format!("{}.summary.csv", command.name()))
}

pub fn run(inv: &Invocation) -> Result<(), CliError> {
    inv.config.validate()?;
    fs::create_dir_all(&inv.out)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", inv.out.display())))?;
    if inv.command == Command::Recipe {
        for c in REPORT_ORDER.into_iter().chain([Command::Report]) {
            run(&Invocation { command: c, ..inv.clone() })?;
        }
        return write_manifest(inv);
    }
    let ctx = Ctx { cfg: &inv.config, out: &inv.out, threads: inv.threads };
    match inv.command {
        Command::TrainTeacher => ctx.train_teacher()?,
        Command::TrainStudent => ctx.train_student()?,
        Command::QuantizePm => ctx.quantize_pm()?,
        Command::QuantizeDistill => ctx.quantize_distill()?,
        Command::QuantizeDiff => ctx.quantize_diff()?,
        Command::NoiseStudy => ctx.noise_study()?,
        Command::Report => ctx.report()?,
        Command::Recipe => unreachable!(),
    }
    write_manifest(inv)
}

fn write_manifest(inv: &Invocation) -> Result<(), CliError> {
    let text = format!(
        "# qdz {VERSION}\n# command: {}\n{}",
        inv.command.name(),
        inv.config.render()
    );
    fs::write(inv.out.join(format!("{}.manifest", inv.command.name())), text)?;
    Ok(())
}

/// Run `f` over `items` on at most `threads` workers, keeping input order.
fn par_map<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> Result<R, CliError> + Sync,
) -> Result<Vec<R>, CliError> {
    let workers = threads.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, CliError>>>> =
        Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

struct Row {
    method: String,
    bits: String,
    accuracy: f64,
    size: Option<(SizeReport, f64)>,
    full_precision_bits: u64,
}

impl Row {
    fn full(method: &str, net: &Network, accuracy: f64, f: u32) -> Self {
        Row {
            method: method.into(),
            bits: "fp".into(),
            accuracy,
            size: None,
            full_precision_bits: (net.num_weights() + net.num_biases()) as u64 * u64::from(f),
        }
    }

    fn quantized(method: &str, bits: u8, model: &QuantizedModel, accuracy: f64, f: u32) -> Result<Self, CliError> {
        let report = model.size_report(f)?;
        let weights: u64 = report.layers.iter().map(|l| l.weights).sum();
        let weight_bits: u64 = report.layers.iter().map(|l| l.plain_bits).sum();
        let weight_gain = (weights * u64::from(f)) as f64 / weight_bits.max(1) as f64;
        Ok(Row {
            method: method.into(),
            bits: bits.to_string(),
            accuracy,
            full_precision_bits: report.full_precision_bits,
            size: Some((report, weight_gain)),
        })
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.method.clone(),
            self.bits.clone(),
            self.accuracy.to_string(),
            self.full_precision_bits.to_string(),
        ];
        match &self.size {
            Some((s, wg)) => r.extend([
                s.quantized_bits.to_string(),
                s.huffman_bits.to_string(),
                s.gain_plain.to_string(),
                s.gain_huffman.to_string(),
                wg.to_string(),
            ]),
            None => r.extend(std::iter::repeat_n(String::new(), 5)),
        }
        r
    }
}

struct Ctx<'a> {
    cfg: &'a Config,
    out: &'a Path,
    threads: usize,
}

impl Ctx<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn recipe(&self) -> Result<Recipe, CliError> {
        self.cfg.recipe()
    }

    fn save(&self, name: &str, container: &Container, encoding: Encoding) -> Result<(), CliError> {
        let mut w = BufWriter::new(fs::File::create(self.path(name))?);
        write_container(&mut w, container, encoding)?;
        w.into_inner().map_err(|e| CliError::Other(e.to_string()))?.sync_all()?;
        Ok(())
    }

    fn save_model(&self, name: &str, model: &QuantizedModel) -> Result<(), CliError> {
        self.save(name, &model.to_container(), Encoding::Huffman)
    }

    fn save_network(&self, name: &str, net: &Network) -> Result<(), CliError> {
        self.save(name, &network_to_container(net), Encoding::Packed)
    }

    /// Load a network written by `producer`, checking that it was trained on
    /// the same data.
    fn load_network(&self, name: &str, producer: Command) -> Result<Network, CliError> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::Dependency(format!(
                "{} not found; run `qdz {}` first",
                path.display(),
                producer.name()
            )));
        }
        let manifest = self.path(&format!("{}.manifest", producer.name()));
        let upstream = Config::load(&manifest).map_err(|e| CliError::Dependency(e.to_string()))?;
        for key in DATA_KEYS {
            if upstream.raw(key) != self.cfg.raw(key) {
                return Err(CliError::Dependency(format!(
                    "{name} was produced with {key} = {}, this run has {key} = {}",
                    upstream.raw(key),
                    self.cfg.raw(key)
                )));
            }
        }
        let mut r = std::io::BufReader::new(fs::File::open(&path)?);
        Ok(network_from_container(&read_container(&mut r)?)?)
    }

    fn teacher(&self) -> Result<Network, CliError> {
        self.load_network("teacher.qdz", Command::TrainTeacher)
    }

    fn source_model(&self, key: &str) -> Result<Network, CliError> {
        match self.cfg.choose(key, &["plain", "distilled", "teacher"])? {
            "teacher" => self.teacher(),
            s => self.load_network(&format!("student-{s}.qdz"), Command::TrainStudent),
        }
    }

    fn write_metrics(&self, name: &str, history: &[EpochRecord]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(["epoch", "split", "loss", "accuracy"])?;
        for h in history {
            w.write_record([h.epoch.to_string(), h.split.to_string(), h.loss.to_string(), h.accuracy.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_summary(&self, command: Command, rows: &[Row]) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(summary_path(self.out, command))?;
        w.write_record(SUMMARY_HEADER)?;
        for r in rows {
            w.write_record(r.record())?;
        }
        w.flush()?;
        Ok(())
    }

    fn train_teacher(&self) -> Result<(), CliError> {
        let ds = self.cfg.dataset()?;
        let (net, history) = self.recipe()?.train_teacher(&ds)?;
        self.save_network("teacher.qdz", &net)?;
        self.write_metrics("teacher.metrics.csv", &history)?;
        let acc = test_accuracy(&net, &ds)?;
        self.write_summary(Command::TrainTeacher, &[Row::full("teacher", &net, acc, self.cfg.float_bits()?)])
    }

    fn train_student(&self) -> Result<(), CliError> {
        let ds = self.cfg.dataset()?;
        let recipe = self.recipe()?;
        let f = self.cfg.float_bits()?;
        let modes = self.cfg.flags("student.distill")?;
        let teacher = if modes.contains(&true) { Some(self.teacher()?) } else { None };
        let trained = par_map(&modes, self.threads, |&distill| {
            let t = if distill { teacher.as_ref() } else { None };
            Ok(recipe.train_student(&ds, t)?)
        })?;
        let mut rows = Vec::new();
        for (distill, (net, history)) in modes.iter().zip(trained) {
            let name = if *distill { "student-distilled" } else { "student-plain" };
            self.save_network(&format!("{name}.qdz"), &net)?;
            self.write_metrics(&format!("{name}.metrics.csv"), &history)?;
            rows.push(Row::full(name, &net, test_accuracy(&net, &ds)?, f));
        }
        self.write_summary(Command::TrainStudent, &rows)
    }

    fn quantize_pm(&self) -> Result<(), CliError> {
        let ds = self.cfg.dataset()?;
        let recipe = self.recipe()?;
        let f = self.cfg.float_bits()?;
        let net = self.source_model("pm.source")?;
        let modes = self.cfg.flags("pm.bucketing")?;
        let jobs: Vec<(u8, bool)> = self
            .cfg
            .bits()?
            .into_iter()
            .flat_map(|b| modes.iter().map(move |&k| (b, k)))
            .collect();
        let models = par_map(&jobs, self.threads, |&(bits, bucketing)| Ok(recipe.quantize_pm(&net, bits, bucketing)?))?;
        let mut rows = Vec::new();
        for ((bits, bucketing), model) in jobs.iter().zip(models) {
            let method = if *bucketing { "pm-bucket" } else { "pm-nobucket" };
            self.save_model(&format!("{method}-b{bits}.qdz"), &model)?;
            let acc = test_accuracy(&model.to_network()?, &ds)?;
            rows.push(Row::quantized(method, *bits, &model, acc, f)?);
        }
        self.write_summary(Command::QuantizePm, &rows)
    }

    fn quantize_distill(&self) -> Result<(), CliError> {
        let ds = self.cfg.dataset()?;
        let recipe = self.recipe()?;
        let f = self.cfg.float_bits()?;
        let teacher = self.teacher()?;
        let losses = self.cfg.flags("qd.loss")?;
        let jobs: Vec<(u8, bool)> = self
            .cfg
            .bits()?
            .into_iter()
            .flat_map(|b| losses.iter().map(move |&d| (b, d)))
            .collect();
        let outcomes = par_map(&jobs, self.threads, |&(bits, distill)| {
            Ok(recipe.quantize_distill(&ds, &teacher, bits, distill)?)
        })?;
        let mut rows = Vec::new();
        for ((bits, distill), o) in jobs.iter().zip(outcomes) {
            let method = if *distill { "qd-distill" } else { "qd-normal" };
            self.save_model(&format!("{method}-b{bits}.qdz"), &o.model)?;
            self.write_metrics(&format!("{method}-b{bits}.metrics.csv"), &o.history)?;
            let acc = test_accuracy(&o.model.to_network()?, &ds)?;
            rows.push(Row::quantized(method, *bits, &o.model, acc, f)?);
        }
        self.write_summary(Command::QuantizeDistill, &rows)
    }

    fn quantize_diff(&self) -> Result<(), CliError> {
        let ds = self.cfg.dataset()?;
        let base = self.recipe()?;
        let f = self.cfg.float_bits()?;
        let net = self.source_model("dq.source")?;
        let modes = self.cfg.flags("dq.redistribute")?;
        let jobs: Vec<(u8, bool)> = self
            .cfg
            .bits()?
            .into_iter()
            .flat_map(|b| modes.iter().map(move |&r| (b, r)))
            .collect();
        let outcomes = par_map(&jobs, self.threads, |&(bits, redistribute)| {
            let recipe = Recipe { dq_redistribute: redistribute, ..base.clone() };
            Ok(recipe.quantize_diff(&ds, &net, bits)?)
        })?;
        let mut rows = Vec::new();
        for ((bits, redistribute), o) in jobs.iter().zip(outcomes) {
            let method = if *redistribute { "dq-redistribute" } else { "dq-fixed" };
            let stem = format!("{method}-b{bits}");
            for w in &o.warnings {
                eprintln!("warning: {stem}: {w}");
            }
            self.save_model(&format!("{stem}.qdz"), &o.model)?;
            let mut alloc = csv::Writer::from_path(self.path(&format!("{stem}.allocation.csv")))?;
            alloc.write_record(["layer", "points", "bits"])?;
            for (i, p) in o.allocation.iter().enumerate() {
                alloc.write_record([i.to_string(), p.to_string(), (*p as f64).log2().to_string()])?;
            }
            alloc.flush()?;
            let mut m = csv::Writer::from_path(self.path(&format!("{stem}.metrics.csv")))?;
            m.write_record(["interval", "loss"])?;
            for (i, l) in o.losses.iter().enumerate() {
                m.write_record([i.to_string(), l.to_string()])?;
            }
            m.flush()?;
            let acc = test_accuracy(&o.model.to_network()?, &ds)?;
            rows.push(Row::quantized(method, *bits, &o.model, acc, f)?);
        }
        self.write_summary(Command::QuantizeDiff, &rows)
    }

    fn noise_study(&self) -> Result<(), CliError> {
        let dims: Vec<usize> = self.cfg.list("noise.n")?;
        if dims.is_empty() {
            return Err(CliError::Config("noise.n must list at least one dimension".into()));
        }
        let mut rows = Vec::new();
        for n in dims {
            for quantize_inputs in self.cfg.flags("noise.quantize_inputs")? {
                let cfg = NoiseStudyConfig {
                    scaling: self.cfg.noise_scaling()?,
                    quantize_inputs,
                    weights: self.cfg.distribution("noise.weights")?,
                    inputs: self.cfg.distribution("noise.inputs")?,
                    redraw: self.cfg.get("noise.redraw")?,
                    threads: self.threads,
                    ..NoiseStudyConfig::new(n, self.cfg.get("noise.s")?, self.cfg.get("noise.trials")?, self.cfg.seed()?)
                };
                rows.push(study_row(&cfg)?);
            }
        }
        let w = BufWriter::new(fs::File::create(self.path("noise-study.csv"))?);
        write_study_csv(w, &rows)?;
        Ok(())
    }

    fn report(&self) -> Result<(), CliError> {
        let mut records = Vec::new();
        for c in REPORT_ORDER {
            let path = summary_path(self.out, c);
            if !path.exists() {
                continue;
            }
            let mut r = csv::Reader::from_path(&path)?;
            if r.headers()?.iter().ne(SUMMARY_HEADER) {
                return Err(CliError::Dependency(format!("{} has an unexpected header", path.display())));
            }
            for rec in r.records() {
                let mut row = vec![c.name().to_string()];
                row.extend(rec?.iter().map(String::from));
                records.push(row);
            }
        }
        if records.is_empty() {
            return Err(CliError::Dependency(format!(
                "no summaries in {}; run a training or quantization command first",
                self.out.display()
            )));
        }
        let mut w = csv::Writer::from_path(self.path("report.csv"))?;
        w.write_record(std::iter::once("command").chain(SUMMARY_HEADER))?;
        for r in &records {
            w.write_record(r)?;
        }
        w.flush()?;
        print_table(&records);
        Ok(())
    }
}

fn print_table(records: &[Vec<String>]) {
    println!("{:<18} {:<18} {:>4} {:>9} {:>10} {:>12}", "command", "method", "bits", "accuracy", "gain", "huffman gain");
    for r in records {
        let pct = r[3].parse::<f64>().map_or(String::new(), |a| format!("{:.2}%", 100.0 * a));
        let gain = |s: &str| s.parse::<f64>().map_or("-".to_string(), |g| format!("{g:.2}x"));
        println!(
            "{:<18} {:<18} {:>4} {:>9} {:>10} {:>12}",
            r[0],
            r[1],
            r[2],
            pct,
            gain(&r[7]),
            gain(&r[8])
        );
    }
}
