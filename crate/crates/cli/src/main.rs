//! Command-line front end: training, hiding, revealing, evaluation,
//! self-verification and coefficient dumps.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::FileConfig;
use mrag_core::freq::cover_coarse;
use mrag_core::image8::Rgb8Image;
use mrag_core::jpeg;
use mrag_core::model::{MragConfig, MragModel};
use mrag_core::surrogate::{detection_accuracy, pretrain_surrogate, standin_stego, Surrogate};
use mrag_core::trainer::{evaluate_pairs, train_with_observer, write_loss_csv, TrainPair};

#[derive(Parser)]
#[command(name = "mrag", version, about = "JPEG-domain image hiding with invertible networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load) the surrogate and train the hiding model.
    Train {
        /// key=value config file
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of `*_cover.jpg` / `*_secret.png` pairs
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Where to save the trained model
        #[arg(long)]
        model: Option<PathBuf>,
        /// Surrogate weights: loaded when the file exists, pretrained and
        /// saved there otherwise
        #[arg(long)]
        surrogate: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Coupling layers in the fusion module (1..=4)
        #[arg(long)]
        fusion_layers: Option<usize>,
        /// Per-step loss log CSV
        #[arg(long)]
        csv_log: Option<PathBuf>,
        /// Emit the final report as JSON on stdout
        #[arg(long)]
        json: bool,
    },
    /// Hide a secret PNG in a JPEG cover.
    Hide {
        #[arg(long)]
        cover: PathBuf,
        #[arg(long)]
        secret: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fusion_layers: Option<usize>,
    },
    /// Reveal the secret from a stego JPEG.
    Reveal {
        #[arg(long)]
        stego: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        fusion_layers: Option<usize>,
    },
    /// Score hide/reveal quality and surrogate detection over a pair set.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        surrogate: PathBuf,
        #[arg(long)]
        fusion_layers: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Run every module's invariant suite.
    Selfcheck {
        /// 32 (default) or 64
        #[arg(long, default_value_t = 32)]
        precision: u32,
    },
    /// Print quantization tables and coefficient planes of a JPEG.
    JpegDump { file: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cmd: Command) -> Result<ExitCode, String> {
    match cmd {
        Command::Train { config, data_dir, model, surrogate, steps, seed, fusion_layers, csv_log, json } => {
            let file = match &config {
                Some(p) => FileConfig::parse(p)?,
                None => FileConfig::default(),
            };
            let data_dir = data_dir
                .or(file.data_dir.clone())
                .ok_or("train needs --data-dir or data_dir in the config")?;
            let model_path = model
                .or(file.model_file.clone())
                .ok_or("train needs --model or model_file in the config")?;
            let surrogate_path = surrogate.or(file.surrogate_file.clone());
            let csv_log = csv_log.or(file.csv_log.clone());
            let fusion_layers = fusion_layers.or(file.fusion_layers).unwrap_or(3);
            let train_cfg = file.train_config(seed, steps);
            let quality = file.quality.unwrap_or(75);
            let rate = file.embed_rate.unwrap_or(0.1);
            let pretrain_epochs = file.pretrain_epochs.unwrap_or(30);

            let pairs = load_pairs(&data_dir, quality)?;
            eprintln!("loaded {} pairs from {}", pairs.len(), data_dir.display());
            let (h, w) = (pairs[0].cover.height, pairs[0].cover.width);

            let surrogate_net: Surrogate<f32> = match &surrogate_path {
                Some(p) if p.exists() => {
                    let mut s = Surrogate::new(train_cfg.seed);
                    let mut f = std::fs::File::open(p).map_err(|e| e.to_string())?;
                    s.load(&mut f).map_err(|e| e.to_string())?;
                    eprintln!("loaded surrogate from {}", p.display());
                    s
                }
                _ => {
                    let standins: Vec<_> = pairs
                        .iter()
                        .enumerate()
                        .map(|(i, p)| {
                            standin_stego(&p.cover, rate, train_cfg.seed ^ i as u64)
                                .map(|s| (p.cover.clone(), s))
                        })
                        .collect::<Result<_, _>>()
                        .map_err(|e| e.to_string())?;
                    eprintln!(
                        "pretraining surrogate: {} pairs, {} epochs",
                        standins.len(),
                        pretrain_epochs
                    );
                    let (s, acc) = pretrain_surrogate(&standins, pretrain_epochs, &train_cfg)
                        .map_err(|e| e.to_string())?;
                    eprintln!("surrogate train accuracy: {acc:.3}");
                    if let Some(p) = &surrogate_path {
                        let mut f = std::fs::File::create(p).map_err(|e| e.to_string())?;
                        s.save(&mut f).map_err(|e| e.to_string())?;
                        eprintln!("saved surrogate to {}", p.display());
                    }
                    s
                }
            };

            let mut net: MragModel<f32> = MragModel::new(
                MragConfig::new(h, w).with_fusion_layers(fusion_layers),
                train_cfg.seed,
            )
            .map_err(|e| e.to_string())?;
            let started = std::time::Instant::now();
            let log = train_with_observer(&mut net, &surrogate_net, &pairs, &train_cfg, |step, b| {
                if step % 25 == 0 {
                    eprintln!(
                        "step {step:4}  l_hi {:+.5}  l_re {:+.5}  l_an {:+.5}  l_total {:+.5}",
                        b.l_hi, b.l_re, b.l_an, b.l_total
                    );
                }
            })
            .map_err(|e| e.to_string())?;
            eprintln!("trained {} steps in {:.1}s", log.len(), started.elapsed().as_secs_f64());
            net.save_file(&model_path).map_err(|e| e.to_string())?;
            eprintln!("saved model to {}", model_path.display());
            if let Some(p) = csv_log {
                let mut f = std::fs::File::create(&p).map_err(|e| e.to_string())?;
                write_loss_csv(&log, &mut f).map_err(|e| e.to_string())?;
                eprintln!("wrote loss log to {}", p.display());
            }
            if json {
                let last = log.last().ok_or("empty loss log")?;
                println!(
                    "{}",
                    serde_json::json!({
                        "steps": log.len(),
                        "final_loss": last,
                        "seconds": started.elapsed().as_secs_f64(),
                    })
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Hide { cover, secret, model, out, fusion_layers } => {
            let cover_img = load_cover(&cover)?;
            let secret_img = load_png(&secret)?;
            let net = load_model(&model, cover_img.height, cover_img.width, fusion_layers)?;
            let bundle = net.hide(&cover_img, &secret_img).map_err(|e| e.to_string())?;
            let bytes = jpeg::encode(&bundle.stego).map_err(|e| e.to_string())?;
            std::fs::write(&out, bytes).map_err(|e| e.to_string())?;
            eprintln!("wrote stego to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Reveal { stego, model, out, fusion_layers } => {
            let stego_img = load_cover(&stego)?;
            let net = load_model(&model, stego_img.height, stego_img.width, fusion_layers)?;
            let revealed = net.reveal(&stego_img).map_err(|e| e.to_string())?;
            save_png(&out, &revealed)?;
            eprintln!("wrote revealed secret to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { pairs, model, surrogate, fusion_layers, json } => {
            let pair_list = load_pairs(&pairs, 75)?;
            let (h, w) = (pair_list[0].cover.height, pair_list[0].cover.width);
            let net = load_model(&model, h, w, fusion_layers)?;
            let mut sur: Surrogate<f32> = Surrogate::new(0);
            let mut f = std::fs::File::open(&surrogate).map_err(|e| e.to_string())?;
            sur.load(&mut f).map_err(|e| e.to_string())?;

            let covers: Vec<_> = pair_list.iter().map(|p| cover_coarse::<f32>(&p.cover)).collect();
            let stegos: Vec<_> = pair_list
                .iter()
                .map(|p| {
                    net.hide(&p.cover, &p.secret)
                        .map(|b| cover_coarse::<f32>(&b.stego))
                        .map_err(|e| e.to_string())
                })
                .collect::<Result<_, _>>()?;
            let acc = detection_accuracy(&sur, &covers, &stegos).map_err(|e| e.to_string())?;
            let report = evaluate_pairs(&net, &pair_list, Some(acc)).map_err(|e| e.to_string())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?);
            } else {
                println!("pairs evaluated: {}", report.pairs.len());
                println!(
                    "stego    vs cover : PSNR {:6.2} dB  SSIM {:.4}  APD {:6.3}",
                    report.mean_stego_psnr, report.mean_stego_ssim, report.mean_stego_apd
                );
                println!(
                    "revealed vs secret: PSNR {:6.2} dB  SSIM {:.4}  APD {:6.3}",
                    report.mean_revealed_psnr, report.mean_revealed_ssim, report.mean_revealed_apd
                );
                println!("surrogate detection accuracy: {acc:.3}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Selfcheck { precision } => {
            let results = match precision {
                32 => mrag_core::selfcheck::run_all::<f32>(),
                64 => mrag_core::selfcheck::run_all::<f64>(),
                other => return Err(format!("precision {other} not supported (32 or 64)")),
            };
            let mut failed = 0;
            for r in &results {
                println!("{} {:40} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                if !r.passed {
                    failed += 1;
                }
            }
            println!("{} checks, {failed} failed ({precision}-bit)", results.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::JpegDump { file } => {
            let bytes = std::fs::read(&file).map_err(|e| e.to_string())?;
            let img = jpeg::parse(&bytes).map_err(|e| e.to_string())?;
            print!("{}", img.dump());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_cover(path: &Path) -> Result<jpeg::JpegImage, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    jpeg::parse(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_png(path: &Path) -> Result<Rgb8Image, String> {
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match img {
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Rgb8Image::new(w, h, rgb.into_raw()).map_err(|e| e.to_string())
        }
        other => Err(format!(
            "{}: only 8-bit RGB images are supported, found {:?}",
            path.display(),
            other.color()
        )),
    }
}

fn save_png(path: &Path, img: &Rgb8Image) -> Result<(), String> {
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(img.width() as u32, img.height() as u32, img.data().to_vec())
            .ok_or("buffer size mismatch")?;
    buf.save(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_model(
    path: &Path,
    height: usize,
    width: usize,
    fusion_layers: Option<usize>,
) -> Result<MragModel<f32>, String> {
    let mut net = MragModel::new(
        MragConfig::new(height, width).with_fusion_layers(fusion_layers.unwrap_or(3)),
        0,
    )
    .map_err(|e| e.to_string())?;
    net.load_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(net)
}

/// Pairs are `<stem>_cover.jpg` (or `.png`, compressed at `quality`) plus
/// `<stem>_secret.png`.
fn load_pairs(dir: &Path, quality: u32) -> Result<Vec<TrainPair>, String> {
    let mut stems: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let name = entry.map_err(|e| e.to_string())?.file_name().into_string().unwrap_or_default();
        if let Some(stem) = name.strip_suffix("_cover.jpg") {
            stems.push(stem.to_string());
        } else if let Some(stem) = name.strip_suffix("_cover.png") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    stems.dedup();
    if stems.is_empty() {
        return Err(format!("no *_cover.jpg or *_cover.png files in {}", dir.display()));
    }
    let mut pairs = Vec::with_capacity(stems.len());
    for stem in stems {
        let jpg = dir.join(format!("{stem}_cover.jpg"));
        let cover = if jpg.exists() {
            load_cover(&jpg)?
        } else {
            let png = load_png(&dir.join(format!("{stem}_cover.png")))?;
            jpeg::compress_rgb(&png, quality).map_err(|e| e.to_string())?
        };
        let secret = load_png(&dir.join(format!("{stem}_secret.png")))?;
        if secret.width() != cover.width || secret.height() != cover.height {
            return Err(format!(
                "pair {stem}: secret {}x{} does not match cover {}x{}",
                secret.width(),
                secret.height(),
                cover.width,
                cover.height
            ));
        }
        pairs.push(TrainPair { cover, secret });
    }
    Ok(pairs)
}
