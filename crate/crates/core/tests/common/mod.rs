//! Label oracle shared by the scene and acceptance tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use tokenflow_core::channel::RssCombine;
use tokenflow_core::model::Task;
use tokenflow_core::scene::{Label, Rect, SceneMeta, ScenarioConfig};

/// Proper-intersection test of two segments, endpoints included.
fn segments_cross(p: (f64, f64), q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> bool {
    let cross = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| (u.0 - o.0) * (v.1 - o.1) - (u.1 - o.1) * (v.0 - o.0);
    let (d1, d2) = (cross(a, b, p), cross(a, b, q));
    let (d3, d4) = (cross(p, q, a), cross(p, q, b));
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return true;
    }
    let on = |o: (f64, f64), u: (f64, f64), v: (f64, f64)| {
        cross(o, u, v) == 0.0 && v.0 >= o.0.min(u.0) && v.0 <= o.0.max(u.0) && v.1 >= o.1.min(u.1) && v.1 <= o.1.max(u.1)
    };
    on(a, b, p) || on(a, b, q) || on(p, q, a) || on(p, q, b)
}

pub fn sight_blocked(target: (f64, f64), r: &Rect) -> bool {
    let inside = |x: f64, y: f64| x >= r.x_min && x <= r.x_max && y >= r.y_min && y <= r.y_max;
    if inside(0.0, 0.0) || inside(target.0, target.1) {
        return true;
    }
    let c = [(r.x_min, r.y_min), (r.x_max, r.y_min), (r.x_max, r.y_max), (r.x_min, r.y_max)];
    (0..4).any(|i| segments_cross((0.0, 0.0), target, c[i], c[(i + 1) % 4]))
}

/// Exhaustive label evaluator written from the channel definitions.
pub fn oracle_label(cfg: &ScenarioConfig, meta: &SceneMeta) -> (Label, Vec<bool>) {
    let q = cfg.antenna.q;
    let c = if cfg.antenna.include_pi { PI } else { 1.0 };
    let size = match cfg.task {
        Task::Beam { classes } => classes,
        Task::Handover { .. } => 16,
    };
    let rows = (size as f64).sqrt().floor() as usize;
    let cols = (size + rows - 1) / rows;
    let theta_max = 80f64.to_radians();
    let beams: Vec<(f64, f64)> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .take(size)
        .map(|(i, j)| (theta_max * (i as f64 + 0.5) / rows as f64, -PI + PI * (j as f64 + 0.5) / cols as f64))
        .collect();
    let gain = |beam: (f64, f64), t: f64, p: f64| {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..q {
            for n in 0..q {
                let ph_b = c * (m as f64 * beam.0.sin() * beam.1.cos() + n as f64 * beam.0.sin() * beam.1.sin());
                let ph_p = c * (m as f64 * t.sin() * p.cos() + n as f64 * t.sin() * p.sin());
                acc += Complex64::from_polar(1.0 / (q * q) as f64, ph_p - ph_b);
            }
        }
        let mag = acc.norm();
        if mag < 1e-12 {
            cfg.channel.gain_floor_db
        } else {
            (10.0 * mag.log10()).clamp(cfg.channel.gain_floor_db, 0.0)
        }
    };
    let h = cfg.rsu_height;
    let z = cfg.antenna_height;
    let mut blocked = Vec::new();
    // Per vehicle, per beam RSS.
    let mut table = Vec::new();
    for (v, &[x, y]) in meta.vehicles.iter().enumerate() {
        let is_blocked = meta.footprints.iter().enumerate().any(|(i, r)| i != v && sight_blocked((x, y), r));
        blocked.push(is_blocked);
        let mut paths = Vec::new();
        if !is_blocked {
            paths.push((z - h, true, meta.fading_db[v][0]));
        }
        paths.push((-z - h, false, meta.fading_db[v][1]));
        let per_beam: Vec<f64> = beams
            .iter()
            .map(|&b| {
                let terms: Vec<f64> = paths
                    .iter()
                    .map(|&(dz, los, xi)| {
                        let len = (x * x + y * y + dz * dz).sqrt();
                        let theta = (y / len).acos();
                        let phi = dz.atan2(x);
                        let loss = cfg.channel.p0_db
                            + 10.0 * cfg.channel.eta * len.log10()
                            + xi
                            + if los { 0.0 } else { cfg.channel.reflection_loss_db };
                        gain(b, theta, phi) - loss
                    })
                    .collect();
                cfg.channel.tx_power_dbm
                    + match cfg.channel.combine {
                        RssCombine::DbSum => terms.iter().sum::<f64>(),
                        RssCombine::PowerSum => 10.0 * terms.iter().map(|t| 10f64.powf(t / 10.0)).sum::<f64>().log10(),
                    }
            })
            .collect();
        table.push(per_beam);
    }
    let label = match cfg.task {
        Task::Beam { .. } => {
            let total: Vec<f64> = (0..beams.len()).map(|b| table.iter().map(|t| t[b]).sum()).collect();
            let mut best = 0;
            for b in 1..total.len() {
                if total[b] > total[best] {
                    best = b;
                }
            }
            Label::Beam { index: best }
        }
        Task::Handover { .. } => Label::Handover {
            status: table
                .iter()
                .map(|t| u8::from(t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > cfg.channel.s_th_dbm))
                .collect(),
        },
    };
    (label, blocked)
}
