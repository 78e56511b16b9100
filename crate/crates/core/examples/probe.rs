use asgreg::camera::compose_projection;
use asgreg::flow::Correspondence2D3D;
use asgreg::pipeline::*;
use asgreg::pose::{ransac_refine, RansacMode};
use asgreg::render::render;
use asgreg::synthetic::make_synthetic_scene;
use nalgebra::Vector2;
use std::io::Write;
use std::time::Instant;

/// Ideal-correspondence control: render under a perturbed pose, backproject
/// every valid depth pixel, project under ground truth (optionally rounded
/// to integer pixels), and fit the pose through the standard RANSAC path.
fn oracle(round: bool) {
    let scene = make_synthetic_scene("house", 0).unwrap();
    let k = &scene.intrinsics;
    let config = RegistrationConfig::harness();
    for trial in 0..5u64 {
        let view = &scene.views[trial as usize % scene.views.len()];
        let (coarse, d0) = pose_with_initial_delta(
            &scene.mesh, k, &view.pose, 20.0, 2, 700 + trial,
        )
        .unwrap();
        let out = render(&scene.mesh, k, &coarse);
        let p_gt = compose_projection(k, &view.pose);
        let mut corrs = Vec::new();
        for y in (0..out.height).step_by(2) {
            for x in (0..out.width).step_by(2) {
                let Some(d) = out.depth_map.get(x, y) else { continue };
                let world = asgreg::render::backproject_pixel(x as f64, y as f64, d, k, &coarse);
                let Ok((px, asgreg::camera::DepthSign::Positive)) =
                    asgreg::camera::project_point(&p_gt, &world)
                else {
                    continue;
                };
                if px.x < 0.0 || px.y < 0.0 || px.x >= out.width as f64 || px.y >= out.height as f64
                {
                    continue;
                }
                let pixel = if round {
                    Vector2::new(px.x.round(), px.y.round())
                } else {
                    px
                };
                corrs.push(Correspondence2D3D { pixel, world, view_index: 0 });
            }
        }
        let params = asgreg::pose::RansacParams {
            inlier_threshold: config.ransac_threshold,
            min_consensus_fraction: config.ransac_min_consensus,
            max_iterations: config.ransac_max_iterations,
            sample_size: 4,
            rng_seed: 42 + trial,
        };
        let hyp = ransac_refine(&corrs, &RansacMode::KnownIntrinsics(k.clone()), &params).unwrap();
        let (_, pose) = hyp.decomposed.clone().unwrap();
        let d = pose_delta(&scene.mesh, k, &pose, &view.pose, 2).unwrap();
        println!(
            "oracle trial {trial}: coarse {d0:.1} -> {d:.3} px  (cons {:.3}, {} corrs, round={round})",
            hyp.consensus_fraction,
            corrs.len()
        );
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--oracle") {
        oracle(args.iter().any(|a| a == "--round"));
        return;
    }
    let trials: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let full = args.iter().any(|a| a == "--full");
    let delta: f64 = args
        .iter()
        .position(|a| a == "--delta")
        .map(|p| args[p + 1].parse().unwrap())
        .unwrap_or(30.0);
    let start: u64 = args
        .iter()
        .position(|a| a == "--start")
        .map(|p| args[p + 1].parse().unwrap())
        .unwrap_or(0);
    let scene = make_synthetic_scene("house", 0).unwrap();
    for trial in start..start + trials {
        let view = &scene.views[trial as usize % scene.views.len()];
        let (initial, d0) = pose_with_initial_delta(
            &scene.mesh, &scene.intrinsics, &view.pose, delta, 2, 100 + trial,
        )
        .unwrap();
        let mut c = RegistrationConfig::harness();
        c.rng_seed = 1000 + trial;
        if let Some(sr) = args.iter().position(|a| a == "--sr") {
            c.sigma_rotation_deg = args[sr + 1].parse().unwrap();
        }
        if let Some(p) = args.iter().position(|a| a == "--fr") {
            c.flow.fine_radius = args[p + 1].parse().unwrap();
        }
        if let Some(p) = args.iter().position(|a| a == "--it") {
            c.flow.iterations = args[p + 1].parse().unwrap();
        }
        if let Some(t) = args.iter().position(|a| a == "--thr") {
            c.ransac_threshold = args[t + 1].parse().unwrap();
        }
        if let Some(p) = args.iter().position(|a| a == "--sw") {
            c.flow.smoothness_weight = args[p + 1].parse().unwrap();
        }
        if let Some(p) = args.iter().position(|a| a == "--dp") {
            c.flow.displacement_penalty = args[p + 1].parse().unwrap();
        }
        if let Some(st) = args.iter().position(|a| a == "--st") {
            let frac: f64 = args[st + 1].parse().unwrap();
            c.sigma_translation = Some(frac * scene.mesh.bounding_box_diagonal());
        }
        let t0 = Instant::now();
        let rep = register(
            &scene.mesh, &view.image, Some(&view.depth), &scene.intrinsics,
            &initial, &c, Some(&view.pose),
        )
        .unwrap();
        println!(
            "trial {trial}: {} final {:.2} / initial {d0:.1} ({:.0}s)",
            if rep.success { "S" } else { "R" },
            rep.final_delta.unwrap_or(f64::NAN),
            t0.elapsed().as_secs_f64()
        );
        if full {
            for r in &rep.records {
                let cd = pose_delta(&scene.mesh, &scene.intrinsics, &r.coarse_pose, &view.pose, 2)
                    .unwrap_or(f64::NAN);
                println!(
                    "  v{:2} coarse {:7.1} -> refined {:8.2}  cons {:.3} corr {}",
                    r.view_index,
                    cd,
                    r.refined_delta.unwrap_or(f64::NAN),
                    r.consensus_fraction.unwrap_or(f64::NAN),
                    r.correspondence_count,
                );
            }
            println!("  component: {:?}", rep.component_views);
        }
        std::io::stdout().flush().unwrap();
    }
}
