use meter::config::MeterConfig;
use meter::data::{generate_drift_stream, split_history, standardize, DriftIn, DriftScript, Segment};
use meter::engine::train;

#[test]
fn dbg_overfit_gap() {
    let script = DriftScript {
        dim: 16,
        segments: (0..4).map(|g| Segment { generator: g, len: 5000, drift: DriftIn::Abrupt, anomaly_rate: 0.02 }).collect(),
        concept_sep: 0.0, anomaly_offset: 6.0, component_spread: 2.0, noise: 0.5, noise_growth: 0.0, latent_rank: 0,
    };
    for seed in [42u64, 46] {
        let stream = generate_drift_stream(&script, seed).unwrap();
        let (hist, rest) = split_history(&stream, 0.2).unwrap();
        let (h, s, _) = standardize(hist, rest).unwrap();
        for epochs in [40usize, 100, 300] {
            let mut cfg = MeterConfig::default();
            cfg.seed = seed;
            cfg.train.epochs = epochs;
            cfg.use_dsd = false;
            let snap = train(&h, &cfg).unwrap();
            let c = snap.controller.as_ref().unwrap();
            let tu = {
                let d: Vec<Vec<f64>> = h.iter().map(|i| i.features().to_vec()).collect();
                let mut u = c.uncertainties(&d).unwrap();
                u.sort_by(|a, b| a.partial_cmp(b).unwrap());
                u
            };
            let fresh_c0: Vec<Vec<f64>> = s[..1000].iter().map(|i| i.features().to_vec()).collect();
            let mut f0 = c.uncertainties(&fresh_c0).unwrap();
            f0.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let fresh_c1: Vec<Vec<f64>> = s[1000..2000].iter().map(|i| i.features().to_vec()).collect();
            let mut f1 = c.uncertainties(&fresh_c1).unwrap();
            f1.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = tu.len();
            eprintln!("seed {seed} epochs {epochs}: trainU p90 {:.4} p99 {:.4} max {:.4} | freshC0 p50 {:.4} p90 {:.4} | freshC1 p50 {:.4} p90 {:.4}",
                tu[n*9/10], tu[n*99/100], tu[n-1], f0[500], f0[900], f1[500], f1[900]);
        }
    }
}
