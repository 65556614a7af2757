use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use bnlrp::fusion::{fuse_network, FusionPolicy};
use bnlrp::heatmap::{channel_sum, render_heatmap, Normalization};
use bnlrp::lrp::{explain, BiasPolicy, LrpConfig, PoolRule, SeedClass, DEFAULT_EPSILON};
use bnlrp::model::{load_model, normalize_pixels, save_model, Layer, Network};
use bnlrp::netpbm::{read_csv, read_image, write_csv, write_ppm};
use bnlrp::verify::{verify_network, VerifyConfig, CONSERVATION_TOL};
use bnlrp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bnlrp",
    version,
    about = "Fold batch-norm layers and explain classifiers with LRP heat-maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fold batch-norm layers; writes the model and a .fusion.json report.
    Fuse {
        model: PathBuf,
        #[arg(long, default_value = "fuse")]
        policy: FusionPolicy,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Forward pass plus relevance propagation for one image.
    Explain {
        model: PathBuf,
        image: PathBuf,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value = "absorb_in_denominator")]
        bias_policy: BiasPolicy,
        #[arg(long, default_value = "winner_take_all")]
        pool_rule: PoolRule,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Keep BN layers and treat them as relevance-identity.
        #[arg(long)]
        no_fuse_bn: bool,
        /// Fusion policy when BN layers are folded.
        #[arg(long, default_value = "fuse", conflicts_with = "no_fuse_bn")]
        policy: FusionPolicy,
        #[arg(long, default_value = "max")]
        norm: Normalization,
        /// Output directory (defaults to the image's directory).
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Run the invariant suite on random probe inputs.
    Verify {
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "absorb_in_denominator")]
        bias_policy: BiasPolicy,
        #[arg(long, default_value = "winner_take_all")]
        pool_rule: PoolRule,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Render a relevance CSV as a PPM heat-map.
    Render {
        csv: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "max")]
        norm: Normalization,
    },
    /// Print the layer table, shapes, BN placements and metadata.
    Info { model: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("error:usage: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error:{}: {}",
                e.category(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::from(if e.category() == "io" { 3 } else { 2 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fuse { model, policy, out } => fuse(&model, policy, &out),
        Command::Explain {
            model,
            image,
            class,
            bias_policy,
            pool_rule,
            epsilon,
            no_fuse_bn,
            policy,
            norm,
            out_dir,
        } => {
            let cfg = LrpConfig {
                bias_policy,
                pool_rule,
                stabilizer_epsilon: epsilon,
                seed_class: class.map_or(SeedClass::Argmax, SeedClass::Index),
            };
            let policy = if no_fuse_bn {
                FusionPolicy::Bypass
            } else {
                policy
            };
            explain_image(&model, &image, &cfg, policy, norm, out_dir.as_deref())
        }
        Command::Verify {
            model,
            probes,
            seed,
            bias_policy,
            pool_rule,
            epsilon,
        } => {
            let cfg = VerifyConfig {
                probes,
                seed,
                lrp: LrpConfig {
                    bias_policy,
                    pool_rule,
                    stabilizer_epsilon: epsilon,
                    seed_class: SeedClass::Argmax,
                },
            };
            verify(&model, &cfg)
        }
        Command::Render { csv, out, norm } => {
            let map = read_csv(&csv)?;
            let heat = render_heatmap(&map, norm)?;
            if let Some(w) = &heat.warning {
                eprintln!("warning: {w}");
            }
            write_ppm(&out, heat.width, heat.height, &heat.rgb)
        }
        Command::Info { model } => info(&load_model(&model)?),
    }
}

/// `x.lrp.json` -> `x.fusion.json`, anything else gets `.fusion.json` appended.
fn report_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".lrp.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    out.with_file_name(format!("{stem}.fusion.json"))
}

fn fuse(model: &Path, policy: FusionPolicy, out: &Path) -> Result<()> {
    let network = load_model(model)?;
    let (fused, report) = fuse_network(&network, policy)?;
    save_model(&fused, out)?;
    let rpath = report_path(out);
    std::fs::write(&rpath, report.to_json_string()).map_err(|e| Error::Io {
        path: rpath.clone(),
        source: e,
    })?;
    for u in &report.unfused {
        if policy != FusionPolicy::Bypass {
            eprintln!(
                "warning: BN at layer {} not fused: {}",
                u.layer_index, u.reason
            );
        }
    }
    println!(
        "{} fusion(s), {} BN(s) left in place; wrote {} and {}",
        report.records.len(),
        report.unfused.len(),
        out.display(),
        rpath.display()
    );
    Ok(())
}

fn explain_image(
    model: &Path,
    image: &Path,
    cfg: &LrpConfig,
    policy: FusionPolicy,
    norm: Normalization,
    out_dir: Option<&Path>,
) -> Result<()> {
    let network = load_model(model)?;
    let (network, _) = fuse_network(&network, policy)?;
    let img = read_image(image)?;
    let raw = img.to_tensor()?;
    let input = normalize_pixels(&raw)?.reshape(network.input_shape().to_vec())?;
    let trace = explain(&network, &input, cfg)?;
    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    trace.check_conservation(CONSERVATION_TOL)?;

    let relevance = channel_sum(&trace.input_relevance().reshape(raw.shape().to_vec())?)?;
    let heat = render_heatmap(&relevance, norm)?;
    if let Some(w) = &heat.warning {
        eprintln!("warning: {w}");
    }

    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => image.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let csv = dir.join(format!("{stem}.relevance.csv"));
    let ppm = dir.join(format!("{stem}.heat.ppm"));
    let json = dir.join(format!("{stem}.trace.json"));
    write_csv(&csv, &relevance)?;
    write_ppm(&ppm, heat.width, heat.height, &heat.rgb)?;
    let mut summary =
        serde_json::to_string_pretty(&trace.summary()).expect("trace summary serializes");
    summary.push('\n');
    std::fs::write(&json, summary).map_err(|e| Error::Io {
        path: json.clone(),
        source: e,
    })?;

    println!(
        "class {} logit {} input relevance {} (policy {policy}, max balance error {:e})",
        trace.seed_class,
        trace.seed_logit,
        trace.input_relevance().sum(),
        trace.max_conservation_error()
    );
    println!(
        "wrote {}, {}, {}",
        csv.display(),
        ppm.display(),
        json.display()
    );
    Ok(())
}

fn verify(model: &Path, cfg: &VerifyConfig) -> Result<()> {
    let network = load_model(model)?;
    let report = verify_network(&network, cfg)?;
    for c in &report.checks {
        println!(
            "{} {}: worst {:e} (tolerance {:e}) {}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance,
            c.detail
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "{} check(s) failed: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

fn info(network: &Network) -> Result<()> {
    println!("name:        {}", network.name().unwrap_or("-"));
    println!("input shape: {:?}", network.input_shape());
    println!(
        "input box:   [{}, {}]",
        network.input_low(),
        network.input_high()
    );
    println!("classes:     {}", network.class_count());
    println!();
    println!("{:>3}  {:<10} {:<16} detail", "#", "layer", "output");
    for (i, layer) in network.layers().iter().enumerate() {
        let detail = match layer {
            Layer::Dense(d) => format!("{} -> {}", d.in_features(), d.out_features()),
            Layer::Conv2d(c) => format!(
                "kernel {:?}, stride {}, padding {}",
                c.kernel().shape(),
                c.stride(),
                c.padding()
            ),
            Layer::BatchNorm {
                params,
                placement,
                bypass,
            } => format!(
                "{} channel(s), placement {}{}",
                params.len(),
                placement.map_or("untagged".to_string(), |p| {
                    serde_json::to_value(p)
                        .ok()
                        .and_then(|v| v.as_str().map(String::from))
                        .unwrap_or_default()
                }),
                if *bypass { ", bypass" } else { "" }
            ),
            Layer::MaxPool { window, stride } | Layer::AvgPool { window, stride } => {
                format!("window {}x{}, stride {stride}", window[0], window[1])
            }
            Layer::Relu | Layer::Flatten => String::new(),
        };
        let line = format!(
            "{i:>3}  {:<10} {:<16} {detail}",
            layer.kind(),
            format!("{:?}", network.shapes()[i + 1])
        );
        println!("{}", line.trim_end());
    }
    if !network.metadata().is_empty() {
        println!();
        println!(
            "metadata: {}",
            serde_json::to_string_pretty(network.metadata()).expect("metadata serializes")
        );
    }
    Ok(())
}
