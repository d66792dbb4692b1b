use meter::config::MeterConfig;
use meter::data::{generate_drift_stream, split_history, standardize, DriftIn, DriftScript, Segment};
use meter::engine::{run_stream, train, UpdateMode};
use meter::eval::{aucroc, drift_response};
use std::time::Instant;

fn script() -> DriftScript {
    DriftScript {
        dim: 16,
        segments: (0..4).map(|g| Segment { generator: g, len: 5000, drift: DriftIn::Abrupt, anomaly_rate: 0.02 }).collect(),
        concept_sep: 2.0, anomaly_offset: 6.0, component_spread: 2.0, noise: 0.5, noise_growth: 0.0, latent_rank: 0, drift_rank: 0,
    }
}

#[test]
fn dbg_variance_drift() {
    let t_all = Instant::now();
    let mut u_pass = 0; let mut lag_pass_all = 0;
    for seed in [42u64, 43, 44, 45, 46] {
        let stream = generate_drift_stream(&script(), seed).unwrap();
        let (hist, rest) = split_history(&stream, 0.2).unwrap();
        let (h, s, _) = standardize(hist, rest).unwrap();
        let mut cfg = MeterConfig::default();
        cfg.seed = seed;
        cfg.train.epochs = 300;
        cfg.finetune_lr = 5e-3;
        let snap = train(&h, &cfg).unwrap();
        let mu_e0 = snap.mu_e;
        let run = run_stream(snap, &s, &cfg, UpdateMode::Synchronous).unwrap();
        let scores: Vec<f64> = run.decisions.iter().map(|d| d.score.value).collect();
        let ys: Vec<u8> = s.iter().map(|i| i.label().unwrap()).collect();
        let full = aucroc(&scores, &ys).unwrap();

        let mut cfg_s = cfg.clone();
        cfg_s.use_iec = false; cfg_s.use_dsd = false; cfg_s.use_ous = false;
        let snap_s = train(&h, &cfg_s).unwrap();
        let run_s = run_stream(snap_s, &s, &cfg_s, UpdateMode::Synchronous).unwrap();
        let s_scores: Vec<f64> = run_s.decisions.iter().map(|d| d.score.value).collect();
        let s_only = aucroc(&s_scores, &ys).unwrap();

        let reports = drift_response(&run.trace, &[1000, 6000, 11000], cfg.delta_l, mu_e0);
        let all_u = reports.iter().all(|r| r.mean_u_after > r.mean_u_before);
        let all_lag = reports.iter().all(|r| r.update_lag.map_or(false, |l| l <= 3 * cfg.delta_l));
        if all_u { u_pass += 1; }
        if all_lag { lag_pass_all += 1; }
        eprintln!("seed {seed}: full {full:.4} S {s_only:.4} gap {:.4}, mu_e0 {mu_e0:.4}, {} upd, allU {all_u}, allLag {all_lag}",
            full - s_only, run.updates.len());
        for r in &reports {
            eprintln!("  onset {}: U {:.4}->{:.4}, delay {:?}, lag {:?}", r.onset, r.mean_u_before, r.mean_u_after, r.detection_delay, r.update_lag);
        }
    }
    eprintln!("U-rise pass {u_pass}/5, lag pass {lag_pass_all}/5, total {:.0}s", t_all.elapsed().as_secs_f64());
}
