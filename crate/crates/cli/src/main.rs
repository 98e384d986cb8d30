//! `orient-geo` command line.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use orient_geo::eval::{
    acc_pi6, arp, avp, detection_analysis, detection_ap, matched_pairs, med_err, ordered_categories, read_records,
    MetricReport, ACC_THRESHOLD_DEG,
};
use orient_geo::gradcheck::{families_for, gradcheck_family, GradcheckConfig};
use orient_geo::harness::{ablation_suite, run_experiment, ExperimentConfig};
use orient_geo::jitter::{jitter_sample, synthetic_sample, write_manifest, JitterSpec};
use orient_geo::losses::Family;
use orient_geo::pose::Representation;
use orient_geo::so3::EulerZXZ;

#[derive(Parser)]
#[command(name = "orient-geo", version, about = "Orientation estimation experiments on SO(3)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration; writes reports and artifacts.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the representation, K, alpha and augmentation sweeps.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pose and detection metrics for a record file.
    Eval {
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated subset of med, acc, ap, arp, avp, analysis.
        #[arg(long, value_delimiter = ',', default_value = "med,acc,arp,avp")]
        metric: Vec<Metric>,
        /// Azimuth bins for AVP.
        #[arg(long, default_value_t = 8)]
        bins: usize,
        /// Azimuth of the first bin edge in degrees.
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
        /// Write JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of objective gradients.
    Gradcheck {
        /// Family name (e.g. M_G+) or `all`.
        #[arg(long, default_value = "all")]
        family: String,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a jitter manifest for poses read from a file or stdin.
    Jitter {
        #[arg(long)]
        manifest: PathBuf,
        /// Jitter grid as JSON; the default 45-offset grid when absent.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Lines of `id az el ct` in degrees; stdin when absent.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Med,
    Acc,
    Ap,
    Arp,
    Avp,
    Analysis,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let r = run_experiment(&cfg, out)?;
    print!("{}", r.report.to_csv());
    eprintln!("artifacts written to {}", out.display());
    Ok(())
}

fn ablate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let r = ablation_suite(&cfg, Some(out))?;
    print!("{}", r.to_csv());
    if let Some(best) = r.best_alpha() {
        eprintln!("selected alpha by validation MedErr: {}", best.value);
    }
    Ok(())
}

fn eval(records: &Path, metrics: &[Metric], bins: usize, offset: f64, json: bool) -> Result<()> {
    let file = File::open(records).with_context(|| format!("opening {}", records.display()))?;
    let (dets, gts) = read_records(BufReader::new(file))?;
    if gts.is_empty() {
        bail!("no ground-truth records in {}", records.display());
    }
    let categories = ordered_categories(gts.iter().map(|g| &g.category));
    let counts = categories
        .iter()
        .map(|c| gts.iter().filter(|g| &g.category == c).count())
        .collect();
    let mut report = MetricReport::new(categories.clone(), counts);
    let pairs = matched_pairs(&dets, &gts);
    let paired: Vec<String> = categories
        .iter()
        .filter(|c| pairs.iter().any(|p| &p.category == *c))
        .cloned()
        .collect();
    for m in metrics {
        match m {
            Metric::Med => report.push("MedErr", &med_err(&pairs, &paired)?),
            Metric::Acc => report.push("Acc_pi/6", &acc_pi6(&pairs, &paired)?),
            Metric::Ap => report.push("AP", &detection_ap(&dets, &gts)),
            Metric::Arp => report.push("ARP", &arp(&dets, &gts, ACC_THRESHOLD_DEG)),
            Metric::Avp => report.push(&format!("AVP{bins}"), &avp(&dets, &gts, bins, offset)?),
            Metric::Analysis => {
                let (per, _) = detection_analysis(&dets, &gts);
                let pick = |f: fn(&orient_geo::eval::DetectionAnalysis) -> Option<f64>| {
                    let map = per.iter().filter_map(|(c, a)| f(a).map(|v| (c.clone(), v))).collect();
                    orient_geo::eval::CategoryValues {
                        per_category: map,
                        mean: 0.0,
                    }
                };
                report.push("detected", &pick(|a| Some(a.detected)));
                report.push("correct", &pick(|a| Some(a.correct)));
                report.push("pose_err", &pick(|a| a.pose_err));
            }
        }
    }
    if json {
        println!("{}", report.to_json()?);
    } else {
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn gradcheck(family: &str, trials: usize, seed: u64) -> Result<bool> {
    let families: Vec<Family> = if family == "all" {
        Family::ALL.to_vec()
    } else {
        vec![family.parse()?]
    };
    let cfg = GradcheckConfig::default();
    let mut ok = true;
    println!("family,representation,trials,excluded,max_rel_error,failures,status");
    for repr in [Representation::AxisAngle, Representation::Quaternion] {
        let valid = families_for(repr);
        for f in families.iter().filter(|f| valid.contains(f)) {
            let r = gradcheck_family(*f, repr, trials, seed, &cfg)?;
            ok &= r.passed();
            println!(
                "{},{},{},{},{:.3e},{},{}",
                r.family,
                r.representation,
                r.trials,
                r.excluded,
                r.max_rel_error,
                r.failures,
                if r.passed() { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

fn jitter(manifest: &Path, grid: Option<&Path>, poses: Option<&Path>) -> Result<()> {
    let spec: JitterSpec = match grid {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => JitterSpec::default(),
    };
    spec.validate()?;
    let input: Box<dyn BufRead> = match poses {
        Some(p) => Box::new(BufReader::new(File::open(p).with_context(|| format!("opening {}", p.display()))?)),
        None => Box::new(BufReader::new(io::stdin())),
    };
    let mut out = BufWriter::new(File::create(manifest).with_context(|| format!("creating {}", manifest.display()))?);
    writeln!(out, "# sample, d_az, d_el, d_ct, flipped, h00..h22, az, el, ct")?;
    let mut n = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 4 {
            bail!("line {}: expected `id az el ct`, got {} fields", i + 1, f.len());
        }
        let num = |s: &str| s.parse::<f64>().with_context(|| format!("line {}: '{s}'", i + 1));
        let pose = EulerZXZ::from_degrees(num(f[1])?, num(f[2])?, num(f[3])?)?;
        let variants = jitter_sample(&synthetic_sample(pose)?, &spec)?;
        write_manifest(&mut out, f[0], &variants)?;
        n += variants.len();
    }
    out.flush()?;
    eprintln!("{n} variants written to {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, out } => run(config.as_deref(), out),
        Command::Ablate { config, out } => ablate(config.as_deref(), out),
        Command::Eval {
            records,
            metric,
            bins,
            offset,
            json,
        } => eval(records, metric, *bins, *offset, *json),
        Command::Gradcheck { family, trials, seed } => match gradcheck(family, *trials, *seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
        Command::Jitter { manifest, grid, poses } => jitter(manifest, grid.as_deref(), poses.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
