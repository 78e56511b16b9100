use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;

use asgreg::asg::{asg_closed_form, AsgConfig};
use asgreg::camera::{
    compose_projection, project_point, read_camera_file, write_camera_file, CameraIntrinsics,
    CameraPose, DepthSign,
};
use asgreg::mesh::TriangleMesh;
use asgreg::pipeline::{
    evaluate, parse_config, register, stats_to_csv, EvalMode, RegistrationConfig,
};
use asgreg::raster::{read_pgm, write_pgm8, DepthMap, IntensityImage};
use asgreg::render::render;
use asgreg::synthetic::make_synthetic_scene;

#[derive(Parser)]
#[command(
    name = "asgreg",
    about = "Co-registration of photographs to untextured triangle meshes via average shading gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy)]
enum Mode {
    Asg,
    Icp,
}

#[derive(Subcommand)]
enum Command {
    /// Refine an error-prone initial camera pose against a mesh.
    ///
    /// Exit code 0 on verified success, 2 when the verifier rejects the
    /// refinement, 1 on errors.
    Register {
        /// Triangle mesh (ASCII PLY or OBJ).
        #[arg(long)]
        mesh: PathBuf,
        /// Query photograph (PGM, 8- or 16-bit).
        #[arg(long)]
        image: PathBuf,
        /// Query depth map (plain-text raster); omitting it falls back to
        /// intensity gradients.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Camera file supplying the intrinsics.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Camera file supplying the initial pose estimate.
        #[arg(long)]
        initial_pose: PathBuf,
        /// Key-value config file (asg.*, flow.*, ransac.*, verify.*,
        /// pipeline.* prefixes).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Destination for the plain-text report.
        #[arg(long)]
        out_report: Option<PathBuf>,
        /// Destination for a PGM overlay of the query with projected mesh
        /// edges under the final (or initial, when rejected) pose.
        #[arg(long)]
        out_overlay: Option<PathBuf>,
        /// Overrides pipeline.rng_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the synthetic evaluation sweep and write per-bucket statistics.
    Evaluate {
        /// Synthetic scene name: house, blocks, or courtyard.
        #[arg(long)]
        scene: String,
        /// Comma-separated initial-error buckets in pixels.
        #[arg(long, default_value = "30,55,80,100")]
        buckets: String,
        /// Trials per bucket.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Registration method to score.
        #[arg(long, value_enum, default_value_t = Mode::Asg)]
        mode: Mode,
        /// Destination CSV; stdout when omitted.
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Render the average-shading-gradients image of a mesh under a camera.
    RenderAsg {
        #[arg(long)]
        mesh: PathBuf,
        /// Camera file supplying the pose.
        #[arg(long)]
        pose: PathBuf,
        /// Camera file supplying the intrinsics.
        #[arg(long)]
        intrinsics: PathBuf,
        /// Output path: .pgm writes a normalized 8-bit image, anything else
        /// the plain-text float raster.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic scene on disk: mesh, cameras, depths, queries.
    MakeScene {
        /// Scene name: house, blocks, or courtyard.
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Register {
            mesh,
            image,
            depth,
            intrinsics,
            initial_pose,
            config,
            out_report,
            out_overlay,
            seed,
        } => {
            let mesh = TriangleMesh::load(&mesh)?;
            let image = read_pgm(&image)?;
            let depth = depth.as_deref().map(DepthMap::read_text).transpose()?;
            let (k, _) = read_camera_file(&intrinsics)?;
            let (_, pose) = read_camera_file(&initial_pose)?;
            let mut cfg = match config {
                Some(p) => parse_config(&std::fs::read_to_string(&p)?)?,
                None => RegistrationConfig::default(),
            };
            if let Some(s) = seed {
                cfg.rng_seed = s;
            }
            let report = register(&mesh, &image, depth.as_ref(), &k, &pose, &cfg, None)?;
            if let Some(p) = &out_report {
                std::fs::write(p, report.to_text())?;
            } else {
                print!("{}", report.to_text());
            }
            if let Some(p) = &out_overlay {
                let overlay_pose = report.final_pose.as_ref().unwrap_or(&pose);
                let overlay_k = report.final_intrinsics.as_ref().unwrap_or(&k);
                write_overlay(p, &image, &mesh, overlay_k, overlay_pose)?;
            }
            Ok(ExitCode::from(if report.success { 0 } else { 2 }))
        }
        Command::Evaluate {
            scene,
            buckets,
            trials,
            mode,
            out_csv,
        } => {
            let scene = make_synthetic_scene(&scene, 0)?;
            let buckets: Vec<f64> = buckets
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<_, _>>()?;
            let mode = match mode {
                Mode::Asg => EvalMode::Asg,
                Mode::Icp => EvalMode::Icp,
            };
            let cfg = RegistrationConfig::harness();
            let (stats, _) = evaluate(&scene, &buckets, trials, mode, &cfg)?;
            let csv = stats_to_csv(&stats);
            match out_csv {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::RenderAsg {
            mesh,
            pose,
            intrinsics,
            out,
        } => {
            let mesh = TriangleMesh::load(&mesh)?;
            let (_, pose) = read_camera_file(&pose)?;
            let (k, _) = read_camera_file(&intrinsics)?;
            let output = render(&mesh, &k, &pose);
            let gradient = asg_closed_form(&output.normal_map, &AsgConfig::default());
            if out.extension().is_some_and(|e| e == "pgm") {
                gradient.write_pgm_normalized(&out)?;
            } else {
                gradient.write_text(&out)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::MakeScene {
            name,
            seed,
            out_dir,
        } => {
            let scene = make_synthetic_scene(&name, seed)?;
            std::fs::create_dir_all(&out_dir)?;
            scene.mesh.save_obj(&out_dir.join(format!("{name}.obj")))?;
            for (i, view) in scene.views.iter().enumerate() {
                write_camera_file(
                    &out_dir.join(format!("view_{i:02}.camera")),
                    &scene.intrinsics,
                    &view.pose,
                )?;
                view.depth
                    .write_text(&out_dir.join(format!("view_{i:02}_depth.txt")))?;
                let bytes: Vec<u8> = view
                    .image
                    .pixels
                    .iter()
                    .map(|&v| v.clamp(0.0, 255.0).round() as u8)
                    .collect();
                write_pgm8(
                    &out_dir.join(format!("view_{i:02}.pgm")),
                    view.image.width,
                    view.image.height,
                    &bytes,
                )?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Writes the query image with the mesh wireframe projected under the given
/// camera burned in at full white.
fn write_overlay(
    path: &std::path::Path,
    image: &IntensityImage,
    mesh: &TriangleMesh,
    k: &CameraIntrinsics,
    pose: &CameraPose,
) -> anyhow::Result<()> {
    let (w, h) = (image.width, image.height);
    let mut bytes: Vec<u8> = image
        .pixels
        .iter()
        .map(|&v| v.clamp(0.0, 255.0).round() as u8)
        .collect();
    let p = compose_projection(k, pose);
    let project = |v: &nalgebra::Vector3<f64>| -> Option<Vector2<f64>> {
        match project_point(&p, v) {
            Ok((px, DepthSign::Positive)) => Some(px),
            _ => None,
        }
    };
    for face in mesh.faces() {
        for e in 0..3 {
            let a = &mesh.vertices()[face[e]];
            let b = &mesh.vertices()[face[(e + 1) % 3]];
            let (Some(pa), Some(pb)) = (project(a), project(b)) else {
                continue;
            };
            let steps = pa.metric_distance(&pb).ceil().max(1.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let q = pa.lerp(&pb, t);
                let (x, y) = (q.x.round() as i64, q.y.round() as i64);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    bytes[y as usize * w + x as usize] = 255;
                }
            }
        }
    }
    write_pgm8(path, w, h, &bytes)?;
    Ok(())
}
