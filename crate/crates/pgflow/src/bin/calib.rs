use std::time::Instant;

use nalgebra::DMatrix;
use pgflow::case_model::{adjacency, build_admittance, parse_case};
use pgflow::data::{add_noise, split, SplitSpec};
use pgflow::experiments::*;
use pgflow::pgnn::{
    train_mlp_baseline, train_pgnn, train_pgnn_from, Bnn, Decoder, DecoderKind, LinearModel,
    TrainConfig,
};

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_u(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn split_blocks(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows() / 2;
    (m.rows(0, n).into_owned(), m.rows(n, n).into_owned())
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("solver");
    let sys = parse_case(&std::fs::read_to_string("cases/ieee57.case").unwrap()).unwrap();
    let y = build_admittance(&sys);
    let a = adjacency(&sys);

    let base = ExperimentConfig::default();
    let train = TrainConfig {
        encoder_hidden: vec![env_u("W", 288); env_u("DEPTH", 2)],
        decoder_hidden: vec![env_u("DW", 256)],
        alpha_unsup: env_f("ALPHA", 1.0),
        lr: env_f("LR", 1e-3),
        decoder_lr: env_f("DLR", 0.0),
        max_epochs: env_u("EPOCHS", 1500),
        patience: env_u("PATIENCE", 150),
        ..TrainConfig::default()
    };
    let cfg = ExperimentConfig {
        n_steps: env_u("STEPS", 2000),
        seeds: (0..env_u("NSEEDS", 3) as u64).collect(),
        noise_rel_std: env_f("NOISE", 0.01),
        target_fraction: env_f("FRAC", 1.0),
        train: train.clone(),
        decoder_train: TrainConfig {
            decoder_hidden: train.decoder_hidden.clone(),
            decoder_lr: env_f("MDLR", 1e-3),
            max_epochs: 600,
            patience: 100,
            ..TrainConfig::default()
        },
        ..base
    };

    match which {
        "probe" => {
            // Single-seed, per-method exploration: METHODS=lr,mlp,mlp_bnn ...
            let methods = std::env::var("METHODS")
                .unwrap_or_else(|_| "lr,mlp,mlp_bnn".into());
            let ds = build_measurements(&sys, &y, &cfg).unwrap();
            let (tr_clean, va, te) =
                split(&ds, &SplitSpec::Sequential { train_frac: 0.6, val_frac: 0.1 }).unwrap();
            let tr = add_noise(&tr_clean, cfg.noise_rel_std, cfg.data_seed.wrapping_add(1));
            let te_x = te.input_matrix();
            let te_v = te.v_target_matrix();
            let (t_mu, t_om) = split_blocks(&te_v);
            for m in methods.split(',') {
                let t = Instant::now();
                let run_cfg = TrainConfig { seed: env_u("SEED", 0) as u64, ..train.clone() };
                let pred = match m {
                    "lr" => LinearModel::fit(&tr.input_matrix(), &tr.v_target_matrix(), 1e-6)
                        .unwrap()
                        .predict(&te_x),
                    "mlp" => {
                        let (model, hist) = train_mlp_baseline(&tr, &va, &run_cfg).unwrap();
                        eprintln!("  mlp epochs={} best_val={:.6e}",
                            hist.len(), hist.iter().map(|h| h.val_sup).fold(f64::MAX, f64::min));
                        model.predict_voltages(&te_x)
                    }
                    name => {
                        let (kind, adj, init) = match name {
                            "mlp_mlp" => (DecoderKind::Mlp, None, None),
                            "mlp_bnn" => (DecoderKind::Bnn, None, None),
                            "mlp_tpbnn" => (DecoderKind::Tpbnn, Some(&a.a), None),
                            "mlp_oracle" => {
                                let n = y.g.nrows();
                                (DecoderKind::Bnn, None, Some(Decoder::Bnn(Bnn {
                                    w_g: y.g.clone(),
                                    w_b: y.b.clone(),
                                    b_p: nalgebra::DVector::zeros(n),
                                    b_q: nalgebra::DVector::zeros(n),
                                    mask: None,
                                })))
                            }
                            _ => panic!("unknown method {name}"),
                        };
                        let (model, hist) =
                            train_pgnn_from(kind, adj, init, &tr, &va, &run_cfg).unwrap();
                        eprintln!("  {name} epochs={} best_val_sup={:.4e} last_val_sup={:.4e} last_val_unsup={:.4e}",
                            hist.len(),
                            hist.iter().map(|h| h.val_sup).fold(f64::MAX, f64::min),
                            hist.last().unwrap().val_sup,
                            hist.last().unwrap().val_unsup);
                        if let pgflow::pgnn::Decoder::Bnn(bnn) = &model.decoder {
                            let rec = analyze_recovery(bnn, &y, &a);
                            eprintln!("  {name} decoder weight_rmse={:.4e} recall={:.4}",
                                rec.weight_rmse_on_pattern, rec.pattern_recall);
                        }
                        model.predict_voltages(&te_x)
                    }
                };
                let (p_mu, p_om) = split_blocks(&pred);
                let mmu = compute_metrics(&p_mu, &t_mu);
                let mom = compute_metrics(&p_om, &t_om);
                println!(
                    "{m:>10}  mu_rmse={:.4e}  om_rmse={:.4e}  ({:.1?})",
                    mmu.rmse, mom.rmse, t.elapsed()
                );
            }
        }
        "dump" => {
            let ds = build_measurements(&sys, &y, &cfg).unwrap();
            std::fs::write("/tmp/ds_x.csv", matrix_to_csv(&ds.input_matrix())).unwrap();
            std::fs::write("/tmp/ds_v.csv", matrix_to_csv(&ds.v_target_matrix())).unwrap();
            std::fs::write("/tmp/ds_s.csv", matrix_to_csv(&ds.s_target_matrix())).unwrap();
            eprintln!("dumped {} samples", ds.samples.len());
        }
        "solver" => {
            let t = Instant::now();
            let r = run_solver_comparison(&sys, &y, &a, "ieee57", &cfg).unwrap();
            println!("elapsed {:?}", t.elapsed());
            print!("{}", r.to_csv());
        }
        "modeling" => {
            let t = Instant::now();
            let r = run_modeling_comparison(&sys, &y, &a, "ieee57", &cfg).unwrap();
            println!("elapsed {:?}", t.elapsed());
            print!("{}", r.to_csv());
        }
        "decls" => {
            let ds = build_measurements(&sys, &y, &cfg).unwrap();
            let (tr_clean, _va, te) =
                split(&ds, &SplitSpec::Sequential { train_frac: 0.6, val_frac: 0.1 }).unwrap();
            let tr = add_noise(&tr_clean, cfg.noise_rel_std, cfg.data_seed.wrapping_add(1));
            let (te_mu, te_om) = split_blocks(&te.v_target_matrix());
            let (te_p, te_q) = split_blocks(&te.s_target_matrix());
            let smooth = {
                let mut d = tr.clone();
                let x = tr.input_matrix();
                let v = pgflow::pgnn::LinearModel::fit(&x, &tr.v_target_matrix(), 1e-6)
                    .unwrap()
                    .predict(&x);
                for (k, s) in d.samples.iter_mut().enumerate() {
                    s.v_target = v.column(k).into_owned();
                }
                d
            };
            for (name, d) in [("noisy", &tr), ("clean", &tr_clean), ("smooth", &smooth)] {
                let (mu, om) = split_blocks(&d.v_target_matrix());
                let (p, q) = split_blocks(&d.s_target_matrix());
                for (kind, mask, lam) in
                    [("bnn", None, 1e-6), ("tpbnn", Some(&a.a), 1e-8)]
                {
                    let b = pgflow::pgnn::Bnn::fit_least_squares(&mu, &om, &p, &q, mask, lam)
                        .unwrap();
                    let (pp, pq, _) = b.forward(&te_mu, &te_om);
                    let rp = compute_metrics(&pp, &te_p).rmse;
                    let rq = compute_metrics(&pq, &te_q).rmse;
                    let rec = analyze_recovery(&b, &y, &a);
                    println!(
                        "{name} {kind}: pred_p={rp:.4e} pred_q={rq:.4e} wrmse={:.4e}",
                        rec.weight_rmse_on_pattern
                    );
                }
            }
        }
        "recovery" => {
            let t = Instant::now();
            let (full, pruned) = run_recovery(&sys, &y, &a, &cfg).unwrap();
            println!("elapsed {:?}", t.elapsed());
            println!("full  : prec={:.4} recall={:.4} wrmse={:.4e}",
                full.pattern_precision, full.pattern_recall, full.weight_rmse_on_pattern);
            println!("pruned: prec={:.4} recall={:.4} wrmse={:.4e}",
                pruned.pattern_precision, pruned.pattern_recall, pruned.weight_rmse_on_pattern);
        }
        "gaps" => {
            let t = Instant::now();
            let r = run_interp_extrap(&sys, &y, &a, "ieee57", &cfg).unwrap();
            println!("elapsed {:?}", t.elapsed());
            print!("{}", r.to_csv());
        }
        "robust" => {
            let t = Instant::now();
            let r = run_outlier_robustness(&sys, &y, &a, "ieee57", &cfg, &[0.0, 0.05, 0.10])
                .unwrap();
            println!("elapsed {:?}", t.elapsed());
            print!("{}", r.to_csv());
            for m in SOLVER_METHODS {
                println!("inflation {m} = {}", r.inflation(m));
            }
        }
        other => eprintln!("unknown: {other}"),
    }
}
