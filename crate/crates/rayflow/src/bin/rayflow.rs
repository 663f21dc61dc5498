//! Command-line front end: render synthetic light-field pairs, estimate
//! scene flow, analyze structure tensors, score estimates, render flow
//! images, and run parameter sweeps.
//!
//! Exit status: 0 on success, 1 for malformed input or arguments, 2 for
//! runtime failures.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use rayflow::global::{hs_pyramidal, GlobalParams, Penalty};
use rayflow::gradients::compute_gradients;
use rayflow::local::{lk_pyramidal, LKParams};
use rayflow::metrics::mae_rmse;
use rayflow::sag::{estimate_disparity, sag_solve, DisparityMap, SAGWeights};
use rayflow::sweep::{run_sweep, SweepSpec};
use rayflow::synth::{default_calibration, load_scene, render_pair};
use rayflow::tensor::eigen_maps;
use rayflow::viz::write_flow_images;
use rayflow::{Error, FlowField, LightField, Result};

#[derive(Parser)]
#[command(name = "rayflow", version, about = "Dense 3D scene flow from 4D light field pairs")]
struct Cli {
    /// `key = value` file overriding solver defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a scene file into a light-field pair with ground truth
    Render {
        /// Scene description file
        scene: PathBuf,
        /// Output directory (creates t0/, t1/, gt.rflw, gt.ralf)
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Estimate scene flow between two rendered light fields
    Estimate {
        #[arg(long)]
        method: MethodArg,
        /// Light-field directory at time 0
        dir0: PathBuf,
        /// Light-field directory at time 1
        dir1: PathBuf,
        /// Output flow file (.rflw)
        #[arg(short, long)]
        out: PathBuf,
        /// Smoothness penalty for hs and sag
        #[arg(long)]
        penalty: Option<PenaltyArg>,
        /// Smoothness weight for V_X and V_Y
        #[arg(long)]
        lambda: Option<f64>,
        /// Smoothness weight for V_Z
        #[arg(long)]
        lambda_z: Option<f64>,
        /// Pyramid levels
        #[arg(long)]
        levels: Option<usize>,
        /// Warp iterations per level
        #[arg(long)]
        warp_iters: Option<usize>,
        /// sag: read the disparity map from this file instead of sweeping
        #[arg(long, value_name = "PATH", conflicts_with = "alpha_sweep")]
        alpha_file: Option<PathBuf>,
        /// sag: plane-sweep range as min:max:steps (default 0.1:0.8:36)
        #[arg(long, value_name = "MIN:MAX:STEPS")]
        alpha_sweep: Option<String>,
    },
    /// Structure-tensor eigenvalue and rank maps of a light-field pair
    AnalyzeTensor {
        dir0: PathBuf,
        dir1: PathBuf,
        /// Output directory for class.png and lambda maps
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compare an estimated flow file against a ground-truth flow file
    Evaluate { est: PathBuf, truth: PathBuf },
    /// Render a flow file as <prefix>_xy.png and <prefix>_z.png
    Viz {
        flow: PathBuf,
        /// Output path prefix
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run a parameter sweep and write a CSV of per-cell metrics
    Sweep {
        spec: PathBuf,
        /// Output CSV path
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lk,
    Hs,
    Sag,
}

#[derive(Clone, Copy, ValueEnum)]
enum PenaltyArg {
    Quadratic,
    Charbonnier,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match cli.cmd {
        Cmd::Render { scene, out } => render_cmd(&scene, &out),
        Cmd::Estimate {
            method,
            dir0,
            dir1,
            out,
            penalty,
            lambda,
            lambda_z,
            levels,
            warp_iters,
            alpha_file,
            alpha_sweep,
        } => {
            let flags = EstimateFlags {
                penalty,
                lambda,
                lambda_z,
                levels,
                warp_iters,
                alpha_file,
                alpha_sweep,
            };
            estimate_cmd(method, &dir0, &dir1, &out, &config, &flags)
        }
        Cmd::AnalyzeTensor { dir0, dir1, out } => analyze_cmd(&dir0, &dir1, &out, &config),
        Cmd::Evaluate { est, truth } => evaluate_cmd(&est, &truth),
        Cmd::Viz { flow, out } => viz_cmd(&flow, &out),
        Cmd::Sweep { spec, out } => sweep_cmd(&spec, &out),
    }
}

fn render_cmd(scene_path: &Path, out: &Path) -> Result<()> {
    let (scene, calib) = load_scene(scene_path)?;
    let calib = calib.unwrap_or_else(default_calibration);
    let (lf0, lf1, gt) = render_pair(&scene, &calib)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    lf0.save_dir(&out.join("t0"))?;
    lf1.save_dir(&out.join("t1"))?;
    gt.flow.write_file(&out.join("gt.rflw"))?;

    let lo = gt.alpha.iter().cloned().fold(f64::MAX, f64::min);
    let hi = gt.alpha.iter().cloned().fold(f64::MIN, f64::max);
    let conf = ndarray::Array2::from_elem(gt.alpha.dim(), 1.0);
    let dmap = DisparityMap::new(gt.alpha.clone(), conf, (lo.max(1e-9), hi.max(lo + 1e-9)))?;
    dmap.write_file(&out.join("gt.ralf"))?;

    println!(
        "rendered {}x{} views of {}x{} px into {}",
        calib.n_x,
        calib.n_y,
        calib.n_u,
        calib.n_v,
        out.display()
    );
    Ok(())
}

struct EstimateFlags {
    penalty: Option<PenaltyArg>,
    lambda: Option<f64>,
    lambda_z: Option<f64>,
    levels: Option<usize>,
    warp_iters: Option<usize>,
    alpha_file: Option<PathBuf>,
    alpha_sweep: Option<String>,
}

fn estimate_cmd(
    method: MethodArg,
    dir0: &Path,
    dir1: &Path,
    out: &Path,
    config: &Config,
    flags: &EstimateFlags,
) -> Result<()> {
    let lf0 = LightField::load_dir(dir0)?;
    let lf1 = LightField::load_dir(dir1)?;
    let flow = match method {
        MethodArg::Lk => {
            let mut p = config.lk_params();
            if let Some(l) = flags.levels {
                p.levels = l;
            }
            if let Some(w) = flags.warp_iters {
                p.warp_iters = w;
            }
            lk_pyramidal(&lf0, &lf1, &p)?
        }
        MethodArg::Hs => {
            let p = config.global_params(flags)?;
            let (flow, stats) = hs_pyramidal(&lf0, &lf1, &p)?;
            if let Some(w) = &stats.warning {
                eprintln!("warning: {w}");
            }
            flow
        }
        MethodArg::Sag => {
            let dmap = match (&flags.alpha_file, &flags.alpha_sweep) {
                (Some(path), _) => DisparityMap::read_file(path)?,
                (None, spec) => {
                    let (lo, hi, steps) =
                        parse_alpha_sweep(spec.as_deref().unwrap_or("0.1:0.8:36"))?;
                    estimate_disparity(&lf0, (lo, hi), steps)?
                }
            };
            let mut w = SAGWeights::defaults_for(&dmap);
            config.apply_sag(&mut w);
            if let Some(l) = flags.lambda {
                w.lambda = l;
            }
            if let Some(l) = flags.lambda_z {
                w.lambda_z = l;
            }
            let p = config.global_params(flags)?;
            let (flow, stats) = sag_solve(&lf0, &lf1, &dmap, &w, &p)?;
            if let Some(warn) = &stats.warning {
                eprintln!("warning: {warn}");
            }
            flow
        }
    };
    flow.write_file(out)?;
    println!(
        "wrote {} ({} entries, {} valid)",
        out.display(),
        flow.len(),
        flow.valid_count()
    );
    Ok(())
}

fn parse_alpha_sweep(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::invalid(format!("bad --alpha-sweep `{s}`, expected min:max:steps"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let steps: usize = parts[2].parse().map_err(|_| bad())?;
    Ok((lo, hi, steps))
}

fn analyze_cmd(dir0: &Path, dir1: &Path, out: &Path, config: &Config) -> Result<()> {
    let lf0 = LightField::load_dir(dir0)?;
    let lf1 = LightField::load_dir(dir1)?;
    let g = compute_gradients(&lf0, &lf1)?;
    let half = config.lk_params().half;
    let maps = eigen_maps(&g, half[2], half[3], config.tau.unwrap_or(0.02));
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let (nu, nv) = (maps.class.dim().0, maps.class.dim().1);
    let mut class_img = image::RgbImage::new(nu as u32, nv as u32);
    let mut counts = [0usize; 3];
    for iu in 0..nu {
        for iv in 0..nv {
            let (rgb, slot) = match maps.class[[iu, iv]] {
                0 => ([40u8, 40, 90], 0),
                2 => ([230, 150, 40], 1),
                _ => ([60, 180, 90], 2),
            };
            counts[slot] += 1;
            class_img.put_pixel(iu as u32, iv as u32, image::Rgb(rgb));
        }
    }
    let class_path = out.join("class.png");
    class_img.save(&class_path).map_err(|e| Error::Image {
        path: class_path,
        msg: e.to_string(),
    })?;

    let max_l = maps.lambda.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for k in 0..3 {
        let mut img = image::GrayImage::new(nu as u32, nv as u32);
        for iu in 0..nu {
            for iv in 0..nv {
                let t = (maps.lambda[[k, iu, iv]] / max_l).clamp(0.0, 1.0);
                img.put_pixel(iu as u32, iv as u32, image::Luma([(t * 255.0).round() as u8]));
            }
        }
        let path = out.join(format!("lambda{}.png", k + 1));
        img.save(&path).map_err(|e| Error::Image {
            path,
            msg: e.to_string(),
        })?;
    }
    println!(
        "windows: {} smooth, {} edge, {} full-texture -> {}",
        counts[0],
        counts[1],
        counts[2],
        out.display()
    );
    Ok(())
}

fn evaluate_cmd(est: &Path, truth: &Path) -> Result<()> {
    let est = FlowField::read_file(est)?;
    let truth = FlowField::read_file(truth)?;
    let m = mae_rmse(&est, &truth)?;
    println!("{m}");
    Ok(())
}

fn viz_cmd(flow: &Path, out: &Path) -> Result<()> {
    let flow = FlowField::read_file(flow)?;
    let (p_xy, p_z) = write_flow_images(&flow, out)?;
    println!("wrote {} and {}", p_xy.display(), p_z.display());
    Ok(())
}

fn sweep_cmd(spec: &Path, out: &Path) -> Result<()> {
    let spec = SweepSpec::load(spec)?;
    let results = run_sweep(&spec)?;
    print!("{results}");
    results.write_csv(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Optional solver defaults from a `key = value` file; command-line flags
/// take precedence over these, which take precedence over built-ins.
#[derive(Default)]
struct Config {
    lambda: Option<f64>,
    lambda_z: Option<f64>,
    penalty: Option<String>,
    charbonnier_a: Option<f64>,
    charbonnier_eps: Option<f64>,
    sor_omega: Option<f64>,
    sor_tol: Option<f64>,
    sor_max_iters: Option<usize>,
    lagged_iters: Option<usize>,
    levels: Option<usize>,
    warp_iters: Option<usize>,
    factor: Option<f64>,
    tau: Option<f64>,
    lk_half: Option<[usize; 4]>,
    sigma_g: Option<f64>,
    sigma_o: Option<f64>,
    sigma_c: Option<f64>,
    sigma_d: Option<f64>,
}

impl Config {
    fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Config::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path.into(),
                    msg: format!("line {}: expected `key = value`", lineno + 1),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = || Error::Parse {
                path: path.into(),
                msg: format!("line {}: bad value for {key}", lineno + 1),
            };
            match key {
                "lambda" => c.lambda = Some(value.parse().map_err(|_| bad())?),
                "lambda_z" => c.lambda_z = Some(value.parse().map_err(|_| bad())?),
                "penalty" => c.penalty = Some(value.to_string()),
                "charbonnier_a" => c.charbonnier_a = Some(value.parse().map_err(|_| bad())?),
                "charbonnier_eps" => c.charbonnier_eps = Some(value.parse().map_err(|_| bad())?),
                "sor_omega" => c.sor_omega = Some(value.parse().map_err(|_| bad())?),
                "sor_tol" => c.sor_tol = Some(value.parse().map_err(|_| bad())?),
                "sor_max_iters" => c.sor_max_iters = Some(value.parse().map_err(|_| bad())?),
                "lagged_iters" => c.lagged_iters = Some(value.parse().map_err(|_| bad())?),
                "levels" => c.levels = Some(value.parse().map_err(|_| bad())?),
                "warp_iters" => c.warp_iters = Some(value.parse().map_err(|_| bad())?),
                "factor" => c.factor = Some(value.parse().map_err(|_| bad())?),
                "tau" => c.tau = Some(value.parse().map_err(|_| bad())?),
                "lk_half" => {
                    let parts: Vec<usize> = value
                        .split_whitespace()
                        .map(|t| t.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    if parts.len() != 4 {
                        return Err(bad());
                    }
                    c.lk_half = Some([parts[0], parts[1], parts[2], parts[3]]);
                }
                "sigma_g" => c.sigma_g = Some(value.parse().map_err(|_| bad())?),
                "sigma_o" => c.sigma_o = Some(value.parse().map_err(|_| bad())?),
                "sigma_c" => c.sigma_c = Some(value.parse().map_err(|_| bad())?),
                "sigma_d" => c.sigma_d = Some(value.parse().map_err(|_| bad())?),
                other => eprintln!("warning: unknown config key `{other}` ignored"),
            }
        }
        Ok(c)
    }

    fn global_params(&self, flags: &EstimateFlags) -> Result<GlobalParams> {
        let mut p = GlobalParams::default();
        if let Some(l) = self.lambda {
            p.lambda = l;
        }
        if let Some(l) = self.lambda_z {
            p.lambda_z = l;
        }
        let a = self.charbonnier_a.unwrap_or(0.45);
        let eps = self.charbonnier_eps.unwrap_or(1e-3);
        match self.penalty.as_deref() {
            None | Some("quadratic") => {}
            Some("charbonnier") => p.penalty = Penalty::Charbonnier { a, eps },
            Some(other) => {
                return Err(Error::invalid(format!("unknown penalty `{other}` in config")));
            }
        }
        if let Some(o) = self.sor_omega {
            p.sor.omega = o;
        }
        if let Some(t) = self.sor_tol {
            p.sor.tol = t;
        }
        if let Some(n) = self.sor_max_iters {
            p.sor.max_iters = n;
        }
        if let Some(n) = self.lagged_iters {
            p.lagged_iters = n;
        }
        if let Some(n) = self.levels {
            p.outer.levels = n;
        }
        if let Some(n) = self.warp_iters {
            p.outer.warp_iters = n;
        }
        if let Some(f) = self.factor {
            p.outer.factor = f;
        }

        if let Some(arg) = flags.penalty {
            p.penalty = match arg {
                PenaltyArg::Quadratic => Penalty::Quadratic,
                PenaltyArg::Charbonnier => Penalty::Charbonnier { a, eps },
            };
        }
        if let Some(l) = flags.lambda {
            p.lambda = l;
        }
        if let Some(l) = flags.lambda_z {
            p.lambda_z = l;
        }
        if let Some(n) = flags.levels {
            p.outer.levels = n;
        }
        if let Some(n) = flags.warp_iters {
            p.outer.warp_iters = n;
        }
        Ok(p)
    }

    fn lk_params(&self) -> LKParams {
        let mut p = LKParams::default();
        if let Some(h) = self.lk_half {
            p.half = h;
        }
        if let Some(t) = self.tau {
            p.tau = t;
        }
        if let Some(n) = self.levels {
            p.levels = n;
        }
        if let Some(n) = self.warp_iters {
            p.warp_iters = n;
        }
        if let Some(f) = self.factor {
            p.factor = f;
        }
        p
    }

    fn apply_sag(&self, w: &mut SAGWeights) {
        if let Some(s) = self.sigma_g {
            w.sigma_g = s;
        }
        if let Some(s) = self.sigma_o {
            w.sigma_o = s;
        }
        if let Some(s) = self.sigma_c {
            w.sigma_c = s;
        }
        if let Some(s) = self.sigma_d {
            w.sigma_d = s;
        }
        if let Some(l) = self.lambda {
            w.lambda = l;
        }
        if let Some(l) = self.lambda_z {
            w.lambda_z = l;
        }
    }
}
