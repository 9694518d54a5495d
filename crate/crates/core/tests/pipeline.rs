use dfrc_core::fim::crb_matrices;
use dfrc_core::pipeline::{alternate, builtin, circle_receivers, crb_heatmap, initial_mask, prepare, CovarianceMode};
use dfrc_core::{AllocationInstance, Owner, PowerProfile, Prepared, RunConfig};
use itertools::Itertools;

fn shrunk(mut c: RunConfig) -> RunConfig {
    c.system.covariance = CovarianceMode::Isotropic;
    c.scenario.num_tx_antennas = 4;
    c.scenario.num_symbols = 4;
    c.scenario.num_subcarriers = 8;
    c
}

/// `factor` times the worst CRBs of a uniform all-detection split on the
/// first `num_selected` receivers.
fn bounds(p: &Prepared, num_selected: usize, factor: f64) -> (f64, f64) {
    let sc = &p.scenario;
    let beams = sc.detection_subarea_angles.len();
    let mut profile = PowerProfile::zeros(sc.num_subcarriers, beams, sc.num_users());
    profile.radar.fill(sc.total_power_w / (beams * sc.num_subcarriers) as f64);
    let crbs = crb_matrices(&p.blocks, &profile, &initial_mask(sc.num_receivers(), num_selected)).unwrap();
    let d = crbs.iter().map(|c| c.max_location()).fold(0.0, f64::max);
    let v = crbs.iter().map(|c| c.max_velocity()).fold(0.0, f64::max);
    (factor * d, factor * v)
}

#[test]
fn alternation_is_close_to_joint_enumeration() {
    let mut c = shrunk(builtin("desk_default").unwrap());
    c.scenario.receiver_positions = circle_receivers([0.0, 0.0], 50.0, &[0.0, 90.0, 180.0, 270.0]);
    c.scenario.target_positions.truncate(1);
    c.scenario.target_velocities.truncate(1);
    c.scenario.detection_subarea_angles.truncate(1);
    c.scenario.user_positions.truncate(1);
    c.experiment.num_selected = 2;
    let p = prepare(&c).unwrap();
    (c.experiment.eta_d, c.experiment.eta_v) = bounds(&p, 2, 2.0);
    let alt = alternate(&c, &p).unwrap();

    let sc = &p.scenario;
    let mut best = f64::NEG_INFINITY;
    for chosen in (0..4).combinations(2) {
        let mask: Vec<bool> = (0..4).map(|r| chosen.contains(&r)).collect();
        let inst = AllocationInstance::new(sc, &p.blocks, &mask, c.experiment.eta_d, c.experiment.eta_v).unwrap();
        for owners in (0..sc.num_subcarriers).map(|_| [Owner::User(0), Owner::Subarea(0)]).multi_cartesian_product() {
            if let Ok(a) = inst.power_only(&owners) {
                best = best.max(a.rate);
            }
        }
    }
    assert!(alt.allocation.rate >= 0.98 * best, "{} vs {best}", alt.allocation.rate);
    assert!(alt.allocation.rate <= best * (1.0 + 1e-6));
    assert!(alt.mask.achieved_eta_d <= c.experiment.eta_d * (1.0 + 1e-6));
}

#[test]
fn heatmap_is_mirror_symmetric_for_a_symmetric_scene() {
    let mut c = shrunk(builtin("desk_default").unwrap());
    c.scenario.receiver_positions = vec![[0.0, 50.0], [0.0, -50.0]];
    c.scenario.rcs_per_receiver = vec![0.1, 0.1];
    c.scenario.target_positions = vec![[300.0, 0.0]];
    c.scenario.target_velocities = vec![[20.0, 0.0]];
    c.scenario.detection_subarea_angles = vec![[-15.0, 15.0]];
    c.scenario.user_positions.truncate(1);
    c.experiment.num_selected = 2;
    c.experiment.heatmap.half_width_m = 30.0;
    c.experiment.heatmap.points = 7;
    let p = prepare(&c).unwrap();
    (c.experiment.eta_d, c.experiment.eta_v) = bounds(&p, 2, 3.0);
    let alt = alternate(&c, &p).unwrap();
    let cells = crb_heatmap(&c, &p, &alt.allocation, &alt.mask.s);
    let n = c.experiment.heatmap.points;
    for iy in 0..n {
        for ix in 0..n {
            let a = cells[iy * n + ix];
            let b = cells[(n - 1 - iy) * n + ix];
            assert!((a.y + b.y).abs() < 1e-9);
            assert!((a.crb_loc - b.crb_loc).abs() <= 1e-9 * a.crb_loc, "{a:?} vs {b:?}");
            assert!((a.crb_vel - b.crb_vel).abs() <= 1e-9 * a.crb_vel, "{a:?} vs {b:?}");
        }
    }
}

#[test]
fn active_bound_level_set_passes_through_the_target() {
    let mut c = shrunk(builtin("desk_default").unwrap());
    c.experiment.heatmap.half_width_m = 20.0;
    c.experiment.heatmap.points = 5;
    let p = prepare(&c).unwrap();
    let (d, v) = bounds(&p, c.experiment.num_selected, 1.5);
    (c.experiment.eta_d, c.experiment.eta_v) = (d, 100.0 * v);
    let alt = alternate(&c, &p).unwrap();
    let eta = c.experiment.eta_d;
    let n = c.experiment.heatmap.points;
    let cells = crb_heatmap(&c, &p, &alt.allocation, &alt.mask.s);
    let mut active = 0;
    for (t, crb) in alt.crbs.iter().enumerate() {
        if crb.max_location() < eta * (1.0 - 1e-4) {
            continue;
        }
        active += 1;
        // Marching squares over the four grid squares touching the center:
        // one of them must contain a crossing of the level eta.
        let at = |ix: usize, iy: usize| cells[t * n * n + iy * n + ix].crb_loc - eta;
        let mid = n / 2;
        let crossing = [(mid - 1, mid - 1), (mid - 1, mid), (mid, mid - 1), (mid, mid)].iter().any(|&(x0, y0)| {
            let corners = [at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)];
            corners.iter().any(|&v| v <= 0.0) && corners.iter().any(|&v| v >= 0.0)
        });
        assert!(crossing, "target {t}");
    }
    assert!(active >= 1, "location bound never active: {:?}", alt.crbs);
}
